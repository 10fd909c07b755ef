//! Frame-level feature matrices and their post-processing.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `frames × dim` row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// # Panics
    /// If `data.len() != frames * dim`.
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * dim, "feature matrix size");
        Self { frames, dim, data }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self::new(frames, dim, vec![0.0; frames * dim])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, d: usize) -> f32 {
        self.data[i * self.dim + d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Symmetric first difference along time with edge replication.
fn delta(f: &FeatureMatrix) -> FeatureMatrix {
    let (n, d) = (f.frames, f.dim);
    let mut out = FeatureMatrix::zeros(n, d);
    for t in 0..n {
        let prev = f.row(t.saturating_sub(1));
        let next = f.row((t + 1).min(n - 1));
        for (o, (a, b)) in out.row_mut(t).iter_mut().zip(next.iter().zip(prev)) {
            *o = (a - b) / 2.0;
        }
    }
    out
}

/// Stacks `[F | delta | acceleration]`, tripling the width.
pub fn add_dynamics(f: &FeatureMatrix) -> FeatureMatrix {
    if f.frames == 0 {
        return FeatureMatrix::zeros(0, 3 * f.dim);
    }
    let d1 = delta(f);
    let d2 = delta(&d1);
    let mut data = Vec::with_capacity(f.data.len() * 3);
    for t in 0..f.frames {
        data.extend_from_slice(f.row(t));
        data.extend_from_slice(d1.row(t));
        data.extend_from_slice(d2.row(t));
    }
    FeatureMatrix::new(f.frames, 3 * f.dim, data)
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population moments over every frame of every matrix.
    pub fn compute<'a, I>(matrices: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in matrices {
            if sum.is_empty() {
                sum = vec![0.0; m.dim];
                sq = vec![0.0; m.dim];
            }
            if m.dim != sum.len() {
                return None;
            }
            for t in 0..m.frames {
                for (d, &x) in m.row(t).iter().enumerate() {
                    sum[d] += x as f64;
                    sq[d] += (x as f64) * (x as f64);
                }
            }
            count += m.frames;
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt() as f32)
            .collect();
        Some(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(F - mean) / std` per dimension. Dimensions with zero spread are left untouched.
pub fn normalize(f: &FeatureMatrix, stats: &FeatureStats) -> FeatureMatrix {
    let mut out = f.clone();
    for t in 0..out.frames {
        for (d, x) in out.row_mut(t).iter_mut().enumerate() {
            let s = stats.std[d];
            if s > 0.0 {
                *x = (*x - stats.mean[d]) / s;
            }
        }
    }
    out
}

/// Time and frequency masking policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecAugment {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    /// Maximum time-mask width as a fraction of the utterance length.
    pub max_time_ratio: f64,
}

impl SpecAugment {
    /// Two frequency masks up to `base_dim / 4` wide, two time masks up to a tenth of the frames.
    pub fn mild(base_dim: usize) -> Self {
        Self {
            freq_masks: 2,
            max_freq_width: base_dim / 4,
            time_masks: 2,
            max_time_ratio: 0.1,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, f: &FeatureMatrix, rng: &mut R) -> FeatureMatrix {
        let max_time = (f.frames as f64 * self.max_time_ratio).floor() as usize;
        spec_augment(f, self.freq_masks, self.max_freq_width, self.time_masks, max_time, rng)
    }
}

/// Zeroes random contiguous column (frequency) and row (time) bands.
///
/// Each mask draws a width uniformly from `0..=max` (capped by the axis
/// length), then a start uniformly over the positions where it fits.
pub fn spec_augment<R: Rng + ?Sized>(
    f: &FeatureMatrix,
    n_freq_masks: usize,
    max_freq_width: usize,
    n_time_masks: usize,
    max_time_width: usize,
    rng: &mut R,
) -> FeatureMatrix {
    let mut out = f.clone();
    for _ in 0..n_freq_masks {
        let (start, w) = draw_band(out.dim, max_freq_width, rng);
        for t in 0..out.frames {
            out.row_mut(t)[start..start + w].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for _ in 0..n_time_masks {
        let (start, w) = draw_band(out.frames, max_time_width, rng);
        for t in start..start + w {
            out.row_mut(t).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}

fn draw_band<R: Rng + ?Sized>(len: usize, max_width: usize, rng: &mut R) -> (usize, usize) {
    let w = rng.random_range(0..=max_width.min(len));
    let start = rng.random_range(0..=len - w);
    (start, w)
}
