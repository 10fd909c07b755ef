use super::net::positional_encoding;
use super::params::{layout, AttnIdx, FfnIdx, Layout, NormIdx};
use super::{EncoderStates, ModelError, ModelParams};
use crate::autodiff::{Real, Tensor, LN_EPS};

/// `x · W + b` for `rows` stacked row vectors.
fn linear<T: Real>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), rows * k);
    let mut out: Vec<T> = b.data().iter().copied().cycle().take(rows * n).collect();
    unsafe {
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            x.as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            n as isize,
            1,
            T::one(),
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn layer_norm<T: Real>(x: &mut [T], gain: &[T], bias: &[T]) {
    let d = gain.len();
    let n = T::of(d as f64);
    for row in x.chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = (var + T::of(LN_EPS)).sqrt().recip();
        for j in 0..d {
            row[j] = (row[j] - mean) * is * gain[j] + bias[j];
        }
    }
}

/// Softmax-weighted sum of `values` rows for one query against `keys` rows,
/// restricted to the head columns `[lo, lo + dk)`.
fn attend_head<T: Real>(q: &[T], keys: &[T], values: &[T], d: usize, lo: usize, dk: usize, out: &mut [T]) {
    let n = keys.len() / d;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut w: Vec<T> = (0..n)
        .map(|r| {
            let k = &keys[r * d + lo..r * d + lo + dk];
            q[lo..lo + dk].iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale
        })
        .collect();
    let max = w.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in out[lo..lo + dk].iter_mut() {
        *x = T::zero();
    }
    for (r, &wr) in w.iter().enumerate() {
        let v = &values[r * d + lo..r * d + lo + dk];
        for (o, &vv) in out[lo..lo + dk].iter_mut().zip(v) {
            *o += wr / sum * vv;
        }
    }
}

/// Per-hypothesis decoder memory: keys and values of every past position, per block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> DecoderState<T> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Incremental decoder over fixed encoder states.
///
/// Cross-attention keys and values are computed once per utterance; each
/// [`DecoderSession::step`] consumes one token per hypothesis and returns the
/// next-token log-probabilities. Equivalent to the teacher-forced pass with
/// dropout off.
pub struct DecoderSession<'a, T> {
    params: &'a ModelParams<T>,
    layout: Layout,
    cross: Vec<(Vec<T>, Vec<T>)>,
}

impl<'a, T: Real> DecoderSession<'a, T> {
    pub fn new(params: &'a ModelParams<T>, enc: &EncoderStates<T>) -> Result<Self, ModelError> {
        let cfg = params.config();
        if enc.states.cols() != cfg.model_dim {
            return Err(ModelError::ShapeMismatch {
                what: "encoder width",
                expected: cfg.model_dim,
                got: enc.states.cols(),
            });
        }
        let (layout, _) = layout(cfg);
        let t = params.tensors();
        let rows = enc.len();
        let cross = layout
            .decoder
            .iter()
            .map(|b| {
                let a = b.cross_attn;
                (
                    linear(enc.states.data(), rows, &t[a.wk], &t[a.bk]),
                    linear(enc.states.data(), rows, &t[a.wv], &t[a.bv]),
                )
            })
            .collect();
        Ok(Self { params, layout, cross })
    }

    pub fn start(&self) -> DecoderState<T> {
        let n = self.layout.decoder.len();
        DecoderState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    fn t(&self, idx: usize) -> &Tensor<T> {
        &self.params.tensors()[idx]
    }

    fn norm(&self, x: &mut [T], n: NormIdx) {
        layer_norm(x, self.t(n.gain).data(), self.t(n.bias).data());
    }

    fn ffn(&self, x: &[T], rows: usize, f: FfnIdx) -> Vec<T> {
        let mut h = linear(x, rows, self.t(f.w1), self.t(f.b1));
        for v in h.iter_mut() {
            *v = v.max(T::zero());
        }
        linear(&h, rows, self.t(f.w2), self.t(f.b2))
    }

    fn project_out(&self, heads: &[T], rows: usize, a: AttnIdx) -> Vec<T> {
        linear(heads, rows, self.t(a.wo), self.t(a.bo))
    }

    /// Feeds `tokens[i]` to `states[i]` and returns `[states.len(), vocab]` log-probabilities.
    pub fn step(&self, states: &mut [DecoderState<T>], tokens: &[usize]) -> Result<Tensor<T>, ModelError> {
        let cfg = self.params.config();
        let (d, dk, v) = (cfg.model_dim, cfg.head_dim(), cfg.vocab_size);
        let b = states.len();
        assert_eq!(b, tokens.len(), "one token per state");
        if let Some(&id) = tokens.iter().find(|&&i| i >= v) {
            return Err(ModelError::UnknownId { id, size: v });
        }
        if let Some(s) = states.iter().find(|s| s.len >= cfg.max_positions) {
            return Err(ModelError::TooLong {
                len: s.len + 1,
                max: cfg.max_positions,
            });
        }
        let table = self.t(self.layout.embedding).data();
        let scale = T::of((d as f64).sqrt());
        let mut x = Vec::with_capacity(b * d);
        for (s, &id) in states.iter().zip(tokens) {
            let pe = positional_encoding(s.len, d);
            x.extend(table[id * d..(id + 1) * d].iter().zip(&pe).map(|(&e, &p)| e * scale + T::of(p)));
        }

        let mut heads = vec![T::zero(); b * d];
        for (l, blk) in self.layout.decoder.iter().enumerate() {
            let a = blk.self_attn;
            let q = linear(&x, b, self.t(a.wq), self.t(a.bq));
            let k = linear(&x, b, self.t(a.wk), self.t(a.bk));
            let vv = linear(&x, b, self.t(a.wv), self.t(a.bv));
            for (i, s) in states.iter_mut().enumerate() {
                s.keys[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                s.values[l].extend_from_slice(&vv[i * d..(i + 1) * d]);
                for h in 0..cfg.num_heads {
                    attend_head(
                        &q[i * d..(i + 1) * d],
                        &s.keys[l],
                        &s.values[l],
                        d,
                        h * dk,
                        dk,
                        &mut heads[i * d..(i + 1) * d],
                    );
                }
            }
            let o = self.project_out(&heads, b, a);
            x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
            self.norm(&mut x, blk.norm1);

            let a = blk.cross_attn;
            let q = linear(&x, b, self.t(a.wq), self.t(a.bq));
            let (ck, cv) = &self.cross[l];
            for i in 0..b {
                for h in 0..cfg.num_heads {
                    attend_head(&q[i * d..(i + 1) * d], ck, cv, d, h * dk, dk, &mut heads[i * d..(i + 1) * d]);
                }
            }
            let o = self.project_out(&heads, b, a);
            x.iter_mut().zip(&o).for_each(|(x, &o)| *x += o);
            self.norm(&mut x, blk.norm2);

            let f = self.ffn(&x, b, blk.ffn);
            x.iter_mut().zip(&f).for_each(|(x, &f)| *x += f);
            self.norm(&mut x, blk.norm3);
        }
        for s in states.iter_mut() {
            s.len += 1;
        }

        let mut logits = linear(&x, b, self.t(self.layout.out_w), self.t(self.layout.out_b));
        for row in logits.chunks_mut(v) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|z| *z = *z - lse);
        }
        Ok(Tensor::new(&[b, v], logits)?)
    }
}
