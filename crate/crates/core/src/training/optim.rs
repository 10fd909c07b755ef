use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// `lr_scale · d^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize, lr_scale: f64) -> f64 {
    let s = step.max(1) as f64;
    lr_scale * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients to global norm `max_norm` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = ((*g as f64) * s) as f32;
        }
    }
    norm
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Self::with_sizes(params.tensors().iter().map(|t| t.numel()))
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0 }
    }
}

/// Bias-corrected Adam update of flat parameter slices.
pub fn adam_update(params: &mut [&mut [f32]], grads: &[Vec<f32>], state: &mut OptimState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.len(), g.len());
        for i in 0..p.len() {
            let gi = g[i] as f64;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] = (p[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

/// [`adam_update`] over every tensor of a model.
pub fn adam_step(params: &mut ModelParams<f32>, grads: &[Vec<f32>], state: &mut OptimState, lr: f64) {
    let mut slices: Vec<&mut [f32]> = params.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    adam_update(&mut slices, grads, state, lr);
}
