use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Graph, Real, Tensor, Var};

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolutional front-end.
    Conv,
    /// Encoder blocks.
    Encoder,
    /// Decoder blocks.
    Decoder,
    /// Token embedding table.
    Embedding,
    /// Output projection.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncBlockIdx {
    pub attn: AttnIdx,
    pub norm1: NormIdx,
    pub ffn: FfnIdx,
    pub norm2: NormIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct DecBlockIdx {
    pub self_attn: AttnIdx,
    pub norm1: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm2: NormIdx,
    pub ffn: FfnIdx,
    pub norm3: NormIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

/// Tensor indices of every model component, in storage order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub conv: ConvIdx,
    pub encoder: Vec<EncBlockIdx>,
    pub decoder: Vec<DecBlockIdx>,
    pub embedding: usize,
    pub out_w: usize,
    pub out_b: usize,
}

pub(crate) struct Spec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], group: ParamGroup, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            group,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), &[fan_in, fan_out], group, Init::Xavier);
        let b = self.add(format!("{prefix}.bias"), &[fan_out], group, Init::Zero);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize, group: ParamGroup) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), &[d], group, Init::One),
            bias: self.add(format!("{prefix}.bias"), &[d], group, Init::Zero),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, group: ParamGroup) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{prefix}.query"), d, d, group);
        let (wk, bk) = self.linear(&format!("{prefix}.key"), d, d, group);
        let (wv, bv) = self.linear(&format!("{prefix}.value"), d, d, group);
        let (wo, bo) = self.linear(&format!("{prefix}.out"), d, d, group);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize, group: ParamGroup) -> FfnIdx {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, hidden, group);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), hidden, d, group);
        FfnIdx { w1, b1, w2, b2 }
    }
}

pub(crate) fn layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    use ParamGroup::*;
    let d = cfg.model_dim;
    let (c1, c2) = cfg.conv_channels;
    let mut b = Builder { specs: Vec::new() };
    let (w1, b1) = b.linear("conv.layer1", 9, c1, Conv);
    let (w2, b2) = b.linear("conv.layer2", 9 * c1, c2, Conv);
    let (proj_w, proj_b) = b.linear("conv.proj", c2 * cfg.subsampled_feat_dim(), d, Conv);
    let conv = ConvIdx { w1, b1, w2, b2, proj_w, proj_b };
    let encoder = (0..cfg.num_encoder_blocks)
        .map(|i| {
            let p = format!("encoder.{i}");
            EncBlockIdx {
                attn: b.attn(&format!("{p}.self_attn"), d, Encoder),
                norm1: b.norm(&format!("{p}.norm1"), d, Encoder),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim, Encoder),
                norm2: b.norm(&format!("{p}.norm2"), d, Encoder),
            }
        })
        .collect();
    let decoder = (0..cfg.num_decoder_blocks)
        .map(|i| {
            let p = format!("decoder.{i}");
            DecBlockIdx {
                self_attn: b.attn(&format!("{p}.self_attn"), d, Decoder),
                norm1: b.norm(&format!("{p}.norm1"), d, Decoder),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d, Decoder),
                norm2: b.norm(&format!("{p}.norm2"), d, Decoder),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim, Decoder),
                norm3: b.norm(&format!("{p}.norm3"), d, Decoder),
            }
        })
        .collect();
    let embedding = b.add("embedding.weight".into(), &[cfg.vocab_size, d], Embedding, Init::Xavier);
    let (out_w, out_b) = b.linear("output", d, cfg.vocab_size, Output);
    (
        Layout {
            conv,
            encoder,
            decoder,
            embedding,
            out_w,
            out_b,
        },
        b.specs,
    )
}

/// All trainable tensors of the encoder-decoder, by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Xavier-uniform weights, zero biases and norm offsets, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let (_, specs) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = match s.init {
                Init::Zero => Tensor::zeros(&s.shape),
                Init::One => Tensor::ones(&s.shape),
                Init::Xavier => {
                    let limit = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    let n = s.shape.iter().product();
                    let data = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
                    Tensor::new(&s.shape, data).expect("spec shape")
                }
            };
            tensors.push(t);
        }
        Self::from_specs(config.clone(), specs, tensors)
    }

    fn from_specs(config: ModelConfig, specs: Vec<Spec>, tensors: Vec<Tensor<T>>) -> Self {
        Self {
            config,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            tensors,
        }
    }

    /// Assembles parameters from named tensors, checking names and shapes against the config.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, String> {
        let (_, specs) = layout(config);
        if named.len() != specs.len() {
            return Err(format!("expected {} tensors, found {}", specs.len(), named.len()));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(format!(
                    "expected {}{:?}, found {name}{:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                ));
            }
            tensors.push(t);
        }
        Ok(Self::from_specs(config.clone(), specs, tensors))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the dropout rate recorded in the config; shapes are unaffected.
    pub fn set_dropout(&mut self, rate: f64) {
        self.config.dropout = rate;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn group(&self, idx: usize) -> ParamGroup {
        self.groups[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor on `g` as a borrowed leaf.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.borrowed(t, requires_grad)).collect(),
        }
    }
}

/// Graph handles for each parameter tensor, by storage index.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Replaces the handle for one tensor (e.g. with a perturbed copy for gradient checks).
    pub fn substitute(&mut self, idx: usize, v: Var) {
        self.vars[idx] = v;
    }
}
