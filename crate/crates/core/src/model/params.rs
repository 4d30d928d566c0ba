use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequence::Expert;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizers::VocabLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Two experts; the understanding side is frozen.
    MoT,
    /// One trainable parameter set (the understanding blocks) for every token.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layout: VocabLayout,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Width of a continuous understanding slot before projection.
    pub slot_dim: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layout: VocabLayout::default(),
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 512,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            slot_dim: 108,
            architecture: Architecture::MoT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config("head width must be even for rotary encoding".into()));
        }
        if self.n_layers == 0 || self.ffn_hidden == 0 || self.slot_dim == 0 {
            return Err(Error::Config("layers, ffn width and slot width must be positive".into()));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Config("norm_eps must be positive and rope_base above 1".into()));
        }
        Ok(())
    }

    pub fn und_vocab(&self) -> usize {
        self.layout.und_range().len()
    }

    pub fn gen_vocab(&self) -> usize {
        self.layout.gen_range().len()
    }

    /// Expert whose blocks process a position tagged `tag`.
    pub fn block_expert(&self, tag: Expert) -> Expert {
        match self.architecture {
            Architecture::MoT => tag,
            Architecture::Dense => Expert::Und,
        }
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    UndBlock,
    UndEmbed,
    UndHead,
    Projector,
    GenBlock,
    GenEmbed,
    GenHead,
}

impl Group {
    /// Inherited understanding parameters, which the MoT model keeps frozen.
    pub fn is_und_side(self) -> bool {
        matches!(self, Group::UndBlock | Group::UndEmbed | Group::UndHead | Group::Projector)
    }

    pub fn trainable(self, arch: Architecture) -> bool {
        match arch {
            Architecture::MoT => !self.is_und_side(),
            Architecture::Dense => !matches!(self, Group::Projector | Group::GenBlock),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<W> {
    pub attn_norm: W,
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    pub ffn_norm: W,
    pub w_up: W,
    pub w_down: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights<W> {
    pub layers: Vec<BlockWeights<W>>,
    pub final_norm: W,
}

/// Every model tensor, generic over what is stored per tensor (values,
/// graph handles, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct MoTWeights<W> {
    pub und: ExpertWeights<W>,
    pub gen: ExpertWeights<W>,
    /// Text and special ids.
    pub und_embed: W,
    /// Special, semantic and pixel ids.
    pub gen_embed: W,
    /// Frozen continuous patch projector, no bias.
    pub projector: W,
    pub und_head: W,
    pub gen_head: W,
}

const BLOCK_FIELDS: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_down"];

impl<W> BlockWeights<W> {
    fn fields(&self) -> [&W; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut W; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    fn from_fields(f: [W; 8]) -> Self {
        let [attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down] = f;
        Self {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_up,
            w_down,
        }
    }
}

impl<W> MoTWeights<W> {
    pub fn expert(&self, e: Expert) -> &ExpertWeights<W> {
        match e {
            Expert::Und => &self.und,
            Expert::Gen => &self.gen,
        }
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        param_infos(self.und.layers.len())
    }

    /// References in canonical order.
    pub fn values(&self) -> Vec<&W> {
        let mut out = Vec::new();
        for exp in [&self.und, &self.gen] {
            for b in &exp.layers {
                out.extend(b.fields());
            }
            out.push(&exp.final_norm);
        }
        out.extend([&self.und_embed, &self.gen_embed, &self.projector, &self.und_head, &self.gen_head]);
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut W> {
        let mut out = Vec::new();
        for exp in [&mut self.und, &mut self.gen] {
            for b in &mut exp.layers {
                out.extend(b.fields_mut());
            }
            out.push(&mut exp.final_norm);
        }
        out.extend([
            &mut self.und_embed,
            &mut self.gen_embed,
            &mut self.projector,
            &mut self.und_head,
            &mut self.gen_head,
        ]);
        out
    }

    pub fn entries(&self) -> Vec<(ParamInfo, &W)> {
        self.infos().into_iter().zip(self.values()).collect()
    }

    /// Rebuilds the same structure from values in canonical order.
    pub fn try_map<U>(&self, mut f: impl FnMut(&ParamInfo, &W) -> Result<U>) -> Result<MoTWeights<U>> {
        let mut mapped = Vec::new();
        for (info, w) in self.entries() {
            mapped.push(f(&info, w)?);
        }
        Ok(MoTWeights::from_canonical(self.und.layers.len(), mapped))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&ParamInfo, &W) -> U) -> MoTWeights<U> {
        self.try_map(|i, w| Ok(f(i, w))).expect("infallible")
    }

    /// Inverse of [`values`](Self::values) for a model with `n_layers` layers.
    pub fn from_canonical(n_layers: usize, values: Vec<W>) -> Self {
        assert_eq!(values.len(), 2 * (8 * n_layers + 1) + 5, "canonical tensor count");
        let mut it = values.into_iter();
        let expert = |it: &mut std::vec::IntoIter<W>| ExpertWeights {
            layers: (0..n_layers)
                .map(|_| BlockWeights::from_fields(std::array::from_fn(|_| it.next().unwrap())))
                .collect(),
            final_norm: it.next().unwrap(),
        };
        let und = expert(&mut it);
        let gen = expert(&mut it);
        let mut next = || it.next().unwrap();
        Self {
            und,
            gen,
            und_embed: next(),
            gen_embed: next(),
            projector: next(),
            und_head: next(),
            gen_head: next(),
        }
    }
}

/// Canonical (name, group) order shared by checkpoints and optimizers.
pub fn param_infos(n_layers: usize) -> Vec<ParamInfo> {
    let mut out = Vec::new();
    for (side, group) in [("und", Group::UndBlock), ("gen", Group::GenBlock)] {
        for l in 0..n_layers {
            for f in BLOCK_FIELDS {
                out.push(ParamInfo {
                    name: format!("{side}.layers.{l}.{f}"),
                    group,
                });
            }
        }
        out.push(ParamInfo {
            name: format!("{side}.final_norm"),
            group,
        });
    }
    for (name, group) in [
        ("und_embed", Group::UndEmbed),
        ("gen_embed", Group::GenEmbed),
        ("projector", Group::Projector),
        ("und_head", Group::UndHead),
        ("gen_head", Group::GenHead),
    ] {
        out.push(ParamInfo {
            name: name.into(),
            group,
        });
    }
    out
}

/// Tensor shapes for `cfg`, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let d = cfg.d_model;
    let f = cfg.ffn_hidden;
    let block = [vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d, f], vec![f, d]];
    let mut out = Vec::new();
    for _ in 0..2 {
        for _ in 0..cfg.n_layers {
            out.extend(block.iter().cloned());
        }
        out.push(vec![d]);
    }
    out.push(vec![cfg.und_vocab(), d]);
    out.push(vec![cfg.gen_vocab(), d]);
    out.push(vec![cfg.slot_dim, d]);
    out.push(vec![d, cfg.und_vocab()]);
    out.push(vec![d, cfg.gen_vocab()]);
    out
}

/// Model configuration plus tensor values.
#[derive(Clone, Debug, PartialEq)]
pub struct MoTParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub weights: MoTWeights<Tensor<T>>,
}

impl<T: Scalar> MoTParams<T> {
    /// Seeded initialization. Heads start at zero (uniform predictions) and the
    /// generation blocks start as a copy of the understanding blocks.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let f = config.ffn_hidden as f64;
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };
        let dm = config.d_model;
        let fh = config.ffn_hidden;
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(BlockWeights {
                attn_norm: Tensor::full(&[dm], T::one()),
                wq: normal(vec![dm, dm], 1.0 / d.sqrt()),
                wk: normal(vec![dm, dm], 1.0 / d.sqrt()),
                wv: normal(vec![dm, dm], 1.0 / d.sqrt()),
                wo: normal(vec![dm, dm], 1.0 / d.sqrt() / depth),
                ffn_norm: Tensor::full(&[dm], T::one()),
                w_up: normal(vec![dm, fh], 1.0 / d.sqrt()),
                w_down: normal(vec![fh, dm], 1.0 / f.sqrt() / depth),
            });
        }
        let und = ExpertWeights {
            layers,
            final_norm: Tensor::full(&[dm], T::one()),
        };
        let und_embed = normal(vec![config.und_vocab(), dm], 1.0);
        let gen_embed = normal(vec![config.gen_vocab(), dm], 1.0);
        let projector = normal(vec![config.slot_dim, dm], 1.0 / (config.slot_dim as f64).sqrt());
        let weights = MoTWeights {
            gen: und.clone(),
            und,
            und_embed,
            gen_embed,
            projector,
            und_head: Tensor::zeros(&[dm, config.und_vocab()]),
            gen_head: Tensor::zeros(&[dm, config.gen_vocab()]),
        };
        Ok(Self { config, weights })
    }

    /// Overwrites the generation blocks with a copy of the understanding blocks.
    pub fn copy_und_to_gen(&mut self) {
        self.weights.gen = self.weights.und.clone();
    }

    pub fn named(&self) -> Vec<(ParamInfo, &Tensor<T>)> {
        self.weights.entries()
    }

    pub fn n_params(&self) -> usize {
        self.weights.values().iter().map(|t| t.len()).sum()
    }

    /// Checks tensor shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for ((info, t), shape) in self.named().into_iter().zip(param_shapes(&self.config)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MoTParams<U> {
        MoTParams {
            config: self.config.clone(),
            weights: self.weights.map(|_, t| t.cast()),
        }
    }
}
