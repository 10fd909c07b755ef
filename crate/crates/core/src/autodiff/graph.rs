use std::borrow::Cow;

use rand::Rng;

use super::tensor::{Real, Tensor};
use super::AutogradError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D patch extraction over an `[H, W, C]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patches {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Patches {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Relu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { a: usize, mask: Vec<T> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize },
    MaskedFill { a: usize, mask: Vec<bool> },
    Reshape { a: usize },
    Sum { a: usize },
    Unfold { a: usize, geom: Patches },
}

struct Node<'p, T: Real> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Leaves may borrow their data (`'p`), which lets model parameters enter a
/// graph without copying. A graph belongs to one thread; build one per
/// utterance or per step.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// (outer, axis length, inner) decomposition of a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Logical (rows, cols) of a stored matrix and its strides, optionally transposed.
fn mat_view(shape: &[usize], t: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (shape[0], shape[1]);
    if t {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p, T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is consistent")
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// Leaf that requires gradients.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    /// Leaf borrowing `t`'s storage; used for model parameters.
    pub fn borrowed(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, requires_grad)
    }

    /// Accumulated gradient of `v`, if `v` requires grad and backward has run.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.node(v).shape, g.clone()).expect("grad shape"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    // ----- primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, rsa, csa) = mat_view(sa, ta);
        let (k2, n, rsb, csb) = mat_view(sb, tb);
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        let (va, vb) = (self.value(a), self.value(b));
        unsafe {
            T::gemm(
                m, k, n, T::one(),
                va.as_ptr(), rsa, csa,
                vb.as_ptr(), rsb, csb,
                T::zero(),
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the last dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.iter().product::<usize>() == *sa.last().unwrap_or(&1)
            && sb.last() == sa.last()
            && sb.iter().rev().skip(1).all(|&d| d == 1)
        {
            true
        } else {
            return Err(mismatch("add", sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = if broadcast {
            va.chunks(vb.len())
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| x + y))
                .collect()
        } else {
            va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect()
        };
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Add { a: a.0, b: b.0, broadcast }, rg))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Scale { a: a.0, s }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Softmax { a: a.0 }, rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::LogSoftmax { a: a.0 }, rg)
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutogradError> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        let rows = vx.len() / c;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        let n = T::of(c as f64);
        for r in 0..rows {
            let row = &vx[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = (var + T::of(LN_EPS)).sqrt().recip();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg[j] + vb[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std,
        };
        Ok(self.push(Cow::Owned(out), shape, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Relu { a: a.0 }, rg)
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutogradError> {
        let st = self.shape(table);
        if st.len() != 2 || ids.iter().any(|&i| i >= st[0]) {
            return Err(mismatch("embedding", st, &[ids.iter().copied().max().unwrap_or(0)]));
        }
        let d = st[1];
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Identity when
    /// `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, train: bool) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Dropout { a: a.0, mask }, rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutogradError> {
        let first = parts.first().ok_or_else(|| mismatch("concat", &[], &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Cow::Owned(out), shape, Op::Concat { inputs, axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutogradError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(mismatch("slice", &sa, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let va = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&va[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::Slice { a: a.0, axis, start }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(mismatch("transpose", sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let va = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), vec![c, r], Op::Transpose { a: a.0 }, rg))
    }

    /// Sets masked entries to −∞ (additive mask ahead of a softmax).
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutogradError> {
        if mask.len() != self.value(a).len() {
            return Err(mismatch("masked_fill", self.shape(a), &[mask.len()]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { T::neg_infinity() } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::MaskedFill { a: a.0, mask: mask.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape { a: a.0 }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![s]), vec![], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Extracts `kernel × kernel` patches from an `[H, W, C]` input, giving
    /// `[H' · W', kernel · kernel · C]` with columns ordered (kh, kw, c).
    /// Multiplying by a `[k·k·C, C_out]` weight is a 2-D convolution.
    pub fn unfold(&mut self, a: Var, geom: Patches) -> Result<Var, AutogradError> {
        let sa = self.shape(a);
        if sa.len() != 3 || geom.kernel == 0 || geom.stride == 0 {
            return Err(mismatch("unfold", sa, &[geom.kernel, geom.stride]));
        }
        let (h, w, c) = (sa[0], sa[1], sa[2]);
        let (ho, wo) = (geom.out_len(h), geom.out_len(w));
        let k = geom.kernel;
        let cols = k * k * c;
        let va = self.value(a);
        let mut out = vec![T::zero(); ho * wo * cols];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
                for ky in 0..k {
                    let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let src = (y as usize * w + x as usize) * c;
                        let dst = (ky * k + kx) * c;
                        row[dst..dst + c].copy_from_slice(&va[src..src + c]);
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), vec![ho * wo, cols], Op::Unfold { a: a.0, geom }, rg))
    }

    // ----- backward ---------------------------------------------------

    /// Accumulates d`loss`/d`v` into every leaf that requires grad.
    /// Calling it again without [`Graph::zero_grad`] adds to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutogradError> {
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut g: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        g.resize_with(n, || None);
        if !self.rg(loss) {
            return Ok(());
        }
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.propagate(i, &gout, &mut g);
        }

        if self.grads.len() < n {
            self.grads.resize_with(n, || None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            if let (Some(gi), true) = (gi, matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        fn slot<'a, T: Real>(g: &'a mut [Option<Vec<T>>], j: usize, len: usize) -> &'a mut [T] {
            g[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, rsa, csa) = mat_view(sa, *ta);
                let (_, n, rsb, csb) = mat_view(sb, *tb);
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let ga = slot(g, *a, va.len());
                    // d op(A) = dC · op(B)^T, written back through A's view strides.
                    unsafe {
                        T::gemm(
                            m, n, k, T::one(),
                            gout.as_ptr(), n as isize, 1,
                            vb.as_ptr(), csb, rsb,
                            T::one(),
                            ga.as_mut_ptr(), rsa, csa,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot(g, *b, vb.len());
                    // d op(B) = op(A)^T · dC.
                    unsafe {
                        T::gemm(
                            k, m, n, T::one(),
                            va.as_ptr(), csa, rsa,
                            gout.as_ptr(), n as isize, 1,
                            T::one(),
                            gb.as_mut_ptr(), rsb, csb,
                        );
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    slot(g, *a, gout.len()).iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                }
                if wants(*b) {
                    let len = nodes[*b].value.len();
                    let gb = slot(g, *b, len);
                    if *broadcast {
                        for row in gout.chunks(len) {
                            gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                        }
                    } else {
                        gb.iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let ga = slot(g, *a, va.len());
                    for ((x, &y), &w) in ga.iter_mut().zip(gout).zip(vb.iter()) {
                        *x += y * w;
                    }
                }
                if wants(*b) {
                    let gb = slot(g, *b, vb.len());
                    for ((x, &y), &w) in gb.iter_mut().zip(gout).zip(va.iter()) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    slot(g, *a, gout.len()).iter_mut().zip(gout).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let c = *node.shape.last().unwrap_or(&1);
                    let ga = slot(g, *a, gout.len());
                    for ((gr, yr), dr) in ga.chunks_mut(c).zip(node.value.chunks(c)).zip(gout.chunks(c)) {
                        let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                        for ((x, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if wants(*a) {
                    let c = *node.shape.last().unwrap_or(&1);
                    let ga = slot(g, *a, gout.len());
                    for ((gr, yr), dr) in ga.chunks_mut(c).zip(node.value.chunks(c)).zip(gout.chunks(c)) {
                        let total: T = dr.iter().copied().sum();
                        for ((x, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += d - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = *node.shape.last().unwrap_or(&1);
                let vg = &nodes[*gain].value;
                if wants(*gain) {
                    let gg = slot(g, *gain, c);
                    for (dr, hr) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(g, *bias, c);
                    for dr in gout.chunks(c) {
                        for j in 0..c {
                            gb[j] += dr[j];
                        }
                    }
                }
                if wants(*x) {
                    let n = T::of(c as f64);
                    let gx = slot(g, *x, gout.len());
                    let mut dh = vec![T::zero(); c];
                    for (r, ((gr, dr), hr)) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            dh[j] = dr[j] * vg[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let scale = inv_std[r] / n;
                        for j in 0..c {
                            gr[j] += scale * (n * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let ga = slot(g, *a, gout.len());
                    for ((x, &y), &v) in ga.iter_mut().zip(gout).zip(node.value.iter()) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = nodes[*table].shape[1];
                    let gt = slot(g, *table, nodes[*table].value.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let ga = slot(g, *a, gout.len());
                    for ((x, &y), &m) in ga.iter_mut().zip(gout).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let chunk = nodes[p].shape[*axis] * inner;
                    if wants(p) {
                        let gp = slot(g, p, nodes[p].value.len());
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + chunk];
                            for (x, &y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                if wants(*a) {
                    let (outer, n, inner) = split_axis(&nodes[*a].shape, *axis);
                    let len = node.shape[*axis];
                    let ga = slot(g, *a, nodes[*a].value.len());
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        for (x, &y) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let ga = slot(g, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if wants(*a) {
                    let ga = slot(g, *a, gout.len());
                    for ((x, &y), &m) in ga.iter_mut().zip(gout).zip(mask) {
                        if !m {
                            *x += y;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    slot(g, *a, gout.len()).iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let len = nodes[*a].value.len();
                    slot(g, *a, len).iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Unfold { a, geom } => {
                if wants(*a) {
                    let sa = &nodes[*a].shape;
                    let (h, w, c) = (sa[0], sa[1], sa[2]);
                    let (ho, wo) = (geom.out_len(h), geom.out_len(w));
                    let k = geom.kernel;
                    let cols = k * k * c;
                    let ga = slot(g, *a, h * w * c);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = &gout[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
                            for ky in 0..k {
                                let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    let dst = (y as usize * w + x as usize) * c;
                                    let src = (ky * k + kx) * c;
                                    for ch in 0..c {
                                        ga[dst + ch] += row[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
