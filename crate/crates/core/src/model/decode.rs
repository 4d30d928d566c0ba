use super::params::MoTParams;
use super::sequence::{classify_id, Expert, Token, TokenClass};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Scalar};
use crate::tokenizers::Special;

/// Position-by-position forward pass with cached keys and values. Built from
/// the same kernels as the recorded graph, so a decoded position reproduces
/// the teacher-forced logits bit for bit.
#[derive(Clone, Debug)]
pub struct IncrementalDecoder<'p, T: Scalar = f32> {
    params: &'p MoTParams<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    hidden: Vec<T>,
    len: usize,
    scratch: Vec<T>,
}

impl<'p, T: Scalar> IncrementalDecoder<'p, T> {
    pub fn new(params: &'p MoTParams<T>) -> Self {
        let l = params.config.n_layers;
        Self {
            params,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            hidden: Vec::new(),
            len: 0,
            scratch: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn embed(&self, token: Token, slot: Option<&[f32]>) -> Result<Vec<T>> {
        let cfg = &self.params.config;
        let w = &self.params.weights;
        let d = cfg.d_model;
        match token {
            Token::Id(id) => {
                let (class, special) = classify_id(&cfg.layout, id)?;
                let und = match class {
                    TokenClass::Text => true,
                    TokenClass::Special => !matches!(special, Some(Special::Boi | Special::Eoi)),
                    _ => false,
                };
                let (table, row) = if und {
                    (&w.und_embed, id as usize)
                } else {
                    (&w.gen_embed, id as usize - cfg.layout.text)
                };
                Ok(table.data()[row * d..(row + 1) * d].to_vec())
            }
            Token::Slot(_) => {
                let f = slot.ok_or_else(|| Error::Contract("slot token without features".into()))?;
                if f.len() != cfg.slot_dim {
                    return Err(Error::Config(format!(
                        "slot width {} does not match projector input {}",
                        f.len(),
                        cfg.slot_dim
                    )));
                }
                let x: Vec<T> = f.iter().map(|&v| T::of(v as f64)).collect();
                Ok(kernels::matmul(&x, w.projector.data(), 1, cfg.slot_dim, d))
            }
        }
    }

    /// Appends one position processed by the blocks of `tag`.
    pub fn push(&mut self, token: Token, tag: Expert, slot: Option<&[f32]>) -> Result<()> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let f = cfg.ffn_hidden;
        let eps = T::of(cfg.norm_eps);
        let e = cfg.block_expert(tag);
        let expert = self.params.weights.expert(e);
        let pos = self.len;
        let mut x = self.embed(token, slot)?;
        let mut h = vec![T::zero(); d];
        let mut att = vec![T::zero(); d];
        for (l, bw) in expert.layers.iter().enumerate() {
            kernels::rmsnorm_row(&x, bw.attn_norm.data(), eps, &mut h);
            let mut q = kernels::matmul(&h, bw.wq.data(), 1, d, d);
            let mut k = kernels::matmul(&h, bw.wk.data(), 1, d, d);
            let v = kernels::matmul(&h, bw.wv.data(), 1, d, d);
            kernels::rope_row(&mut q, pos, cfg.n_heads, cfg.rope_base, false);
            kernels::rope_row(&mut k, pos, cfg.n_heads, cfg.rope_base, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            kernels::attend_query(&q, &self.keys[l], &self.values[l], pos, cfg.n_heads, &mut att, None, &mut self.scratch);
            let o = kernels::matmul(&att, bw.wo.data(), 1, d, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
            kernels::rmsnorm_row(&x, bw.ffn_norm.data(), eps, &mut h);
            let mut up = kernels::matmul(&h, bw.w_up.data(), 1, d, f);
            up.iter_mut().for_each(|u| *u = kernels::silu(*u));
            let down = kernels::matmul(&up, bw.w_down.data(), 1, f, d);
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += *di;
            }
        }
        let mut out = vec![T::zero(); d];
        kernels::rmsnorm_row(&x, expert.final_norm.data(), eps, &mut out);
        self.hidden = out;
        self.len += 1;
        Ok(())
    }

    /// Logits of the newest position under `head`.
    pub fn logits(&self, head: Expert) -> Result<Vec<T>> {
        if self.len == 0 {
            return Err(Error::Contract("no position decoded yet".into()));
        }
        let cfg = &self.params.config;
        let (w, n) = match head {
            Expert::Und => (&self.params.weights.und_head, cfg.und_vocab()),
            Expert::Gen => (&self.params.weights.gen_head, cfg.gen_vocab()),
        };
        let out = kernels::matmul(&self.hidden, w.data(), 1, cfg.d_model, n);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(out)
    }
}
