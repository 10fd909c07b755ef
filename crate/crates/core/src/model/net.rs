use super::params::{layout, AttnIdx, Bound, FfnIdx, NormIdx};
use super::{Dropout, ModelConfig, ModelError, CONV};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::synth::FeatureMatrix;

/// Sinusoidal encoding of one position: `sin` on even dims, `cos` on odd dims,
/// wavelength `10000^(2i/d)` for the pair `i`.
pub fn positional_encoding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let angle = position as f64 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Position encodings for packed segments, restarting at 0 for each.
fn packed_positions<T: Real>(lens: &[usize], dim: usize) -> Tensor<T> {
    let total: usize = lens.iter().sum();
    let longest = lens.iter().copied().max().unwrap_or(0);
    let table: Vec<Vec<f64>> = (0..longest).map(|p| positional_encoding(p, dim)).collect();
    let mut data = Vec::with_capacity(total * dim);
    for &l in lens {
        for row in &table[..l] {
            data.extend(row.iter().map(|&x| T::of(x)));
        }
    }
    Tensor::new(&[total, dim], data).expect("packed shape")
}

fn linear<T: Real>(g: &mut Graph<'_, T>, p: &Bound, x: Var, w: usize, b: usize) -> Result<Var, ModelError> {
    let y = g.matmul(x, p.var(w))?;
    Ok(g.add(y, p.var(b))?)
}

fn norm<T: Real>(g: &mut Graph<'_, T>, p: &Bound, x: Var, n: NormIdx) -> Result<Var, ModelError> {
    Ok(g.layer_norm(x, p.var(n.gain), p.var(n.bias))?)
}

fn drop<T: Real>(g: &mut Graph<'_, T>, x: Var, d: Option<&mut Dropout<'_>>) -> Var {
    match d {
        Some(d) => g.dropout(x, d.rate, &mut *d.rng, true),
        None => x,
    }
}

fn ffn<T: Real>(g: &mut Graph<'_, T>, p: &Bound, x: Var, f: FfnIdx) -> Result<Var, ModelError> {
    let h = linear(g, p, x, f.w1, f.b1)?;
    let h = g.relu(h);
    linear(g, p, h, f.w2, f.b2)
}

/// Multi-head scaled dot-product attention over packed segments: segment `i`
/// of the queries attends to segment `i` of the keys.
#[allow(clippy::too_many_arguments)]
fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    p: &Bound,
    a: AttnIdx,
    xq: Var,
    q_lens: &[usize],
    xkv: Var,
    kv_lens: &[usize],
    causal: bool,
) -> Result<Var, ModelError> {
    let q = linear(g, p, xq, a.wq, a.bq)?;
    let k = linear(g, p, xkv, a.wk, a.bk)?;
    let v = linear(g, p, xkv, a.wv, a.bv)?;
    let dk = cfg.head_dim();
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut segments = Vec::with_capacity(q_lens.len());
    let (mut qo, mut ko) = (0, 0);
    for (&ql, &kl) in q_lens.iter().zip(kv_lens) {
        let qs = g.slice(q, 0, qo, ql)?;
        let ks = g.slice(k, 0, ko, kl)?;
        let vs = g.slice(v, 0, ko, kl)?;
        let mask: Option<Vec<bool>> = causal.then(|| (0..ql * kl).map(|n| n % kl > n / kl).collect());
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (qh, kh, vh) = if cfg.num_heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    g.slice(qs, 1, h * dk, dk)?,
                    g.slice(ks, 1, h * dk, dk)?,
                    g.slice(vs, 1, h * dk, dk)?,
                )
            };
            let s = g.matmul_t(qh, kh, false, true)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = &mask {
                s = g.masked_fill(s, m)?;
            }
            let w = g.softmax(s);
            heads.push(g.matmul(w, vh)?);
        }
        segments.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        qo += ql;
        ko += kl;
    }
    let o = if segments.len() == 1 {
        segments[0]
    } else {
        g.concat(&segments, 0)?
    };
    linear(g, p, o, a.wo, a.bo)
}

/// Packed encoder pass. Returns `f^M` stacked over utterances and each
/// utterance's subsampled length.
pub(crate) fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    p: &Bound,
    feats: &[&FeatureMatrix],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, Vec<usize>), ModelError> {
    let (lay, _) = layout(cfg);
    let (c1, c2) = cfg.conv_channels;
    let mut cols = Vec::with_capacity(feats.len());
    let mut shapes = Vec::with_capacity(feats.len());
    for f in feats {
        if f.dim() != cfg.feat_dim {
            return Err(ModelError::ShapeMismatch {
                what: "feature width",
                expected: cfg.feat_dim,
                got: f.dim(),
            });
        }
        if f.frames() == 0 {
            return Err(ModelError::ShapeMismatch {
                what: "frame count",
                expected: 1,
                got: 0,
            });
        }
        let x = Tensor::new(
            &[f.frames(), f.dim(), 1],
            f.data().iter().map(|&v| T::of(v as f64)).collect(),
        )?;
        let x = g.constant(x);
        cols.push(g.unfold(x, CONV)?);
        let (h1, w1) = (CONV.out_len(f.frames()), CONV.out_len(f.dim()));
        shapes.push((h1, w1, CONV.out_len(h1), CONV.out_len(w1)));
    }
    let x = g.concat(&cols, 0)?;
    let x = linear(g, p, x, lay.conv.w1, lay.conv.b1)?;
    let x = g.relu(x);

    let mut cols = Vec::with_capacity(feats.len());
    let mut off = 0;
    for &(h1, w1, _, _) in &shapes {
        let s = g.slice(x, 0, off, h1 * w1)?;
        let s = g.reshape(s, &[h1, w1, c1])?;
        cols.push(g.unfold(s, CONV)?);
        off += h1 * w1;
    }
    let x = g.concat(&cols, 0)?;
    let x = linear(g, p, x, lay.conv.w2, lay.conv.b2)?;
    let x = g.relu(x);

    let lens: Vec<usize> = shapes.iter().map(|s| s.2).collect();
    let total: usize = lens.iter().sum();
    if let Some(&len) = lens.iter().find(|&&l| l > cfg.max_positions) {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    let x = g.reshape(x, &[total, shapes[0].3 * c2])?;
    let x = linear(g, p, x, lay.conv.proj_w, lay.conv.proj_b)?;
    let pe = g.constant(packed_positions(&lens, cfg.model_dim));
    let x = g.add(x, pe)?;
    let mut x = drop(g, x, dropout.as_deref_mut());

    for blk in &lay.encoder {
        let a = attention(g, cfg, p, blk.attn, x, &lens, x, &lens, false)?;
        let a = drop(g, a, dropout.as_deref_mut());
        let r = g.add(x, a)?;
        x = norm(g, p, r, blk.norm1)?;
        let f = ffn(g, p, x, blk.ffn)?;
        let f = drop(g, f, dropout.as_deref_mut());
        let r = g.add(x, f)?;
        x = norm(g, p, r, blk.norm2)?;
    }
    Ok((x, lens))
}

/// Packed decoder pass over input prefixes, giving log-probabilities for every
/// input position.
pub(crate) fn decode<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    p: &Bound,
    enc: Var,
    enc_lens: &[usize],
    inputs: &[&[usize]],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, ModelError> {
    let (lay, _) = layout(cfg);
    let lens: Vec<usize> = inputs.iter().map(|i| i.len()).collect();
    let ids: Vec<usize> = inputs.iter().flat_map(|i| i.iter().copied()).collect();
    let e = g.embedding(p.var(lay.embedding), &ids)?;
    let e = g.scale(e, T::of((cfg.model_dim as f64).sqrt()));
    let pe = g.constant(packed_positions(&lens, cfg.model_dim));
    let x = g.add(e, pe)?;
    let mut x = drop(g, x, dropout.as_deref_mut());

    for blk in &lay.decoder {
        let a = attention(g, cfg, p, blk.self_attn, x, &lens, x, &lens, true)?;
        let a = drop(g, a, dropout.as_deref_mut());
        let r = g.add(x, a)?;
        x = norm(g, p, r, blk.norm1)?;
        let c = attention(g, cfg, p, blk.cross_attn, x, &lens, enc, enc_lens, false)?;
        let c = drop(g, c, dropout.as_deref_mut());
        let r = g.add(x, c)?;
        x = norm(g, p, r, blk.norm2)?;
        let f = ffn(g, p, x, blk.ffn)?;
        let f = drop(g, f, dropout.as_deref_mut());
        let r = g.add(x, f)?;
        x = norm(g, p, r, blk.norm3)?;
    }
    let logits = linear(g, p, x, lay.out_w, lay.out_b)?;
    Ok(g.log_softmax(logits))
}
