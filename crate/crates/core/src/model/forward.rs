use super::params::{BlockWeights, MoTParams, MoTWeights, ModelConfig, ParamInfo};
use super::sequence::{Expert, MultimodalSequence, Token, TokenClass};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Gradients, Graph, Scalar, Tensor, Var};
use crate::tokenizers::{extract_patches, Special, ToyImage, VocabLayout};

/// Head output for the positions it scores.
#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub logits: Var,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub hidden: Var,
    pub und: Option<HeadLogits>,
    pub gen: Option<HeadLogits>,
}

/// Registers every tensor as a graph leaf; `grad` picks those that need gradients.
pub fn register_params<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a MoTParams<T>,
    mut grad: impl FnMut(&ParamInfo) -> bool,
) -> MoTWeights<Var> {
    let mut vars = Vec::new();
    for (info, t) in params.weights.entries() {
        vars.push(g.param(t, grad(&info)));
    }
    MoTWeights::from_canonical(params.config.n_layers, vars)
}

/// Per-tensor gradients in the weights structure (zeros where none flowed).
pub fn collect_gradients<T: Scalar>(grads: &Gradients<T>, vars: &MoTWeights<Var>) -> MoTWeights<Tensor<T>> {
    vars.map(|_, &v| grads.get(v))
}

/// Whether an id embeds through the understanding table.
fn und_table(class: TokenClass, special: Option<Special>) -> bool {
    match class {
        TokenClass::Text => true,
        TokenClass::Special => !matches!(special, Some(Special::Boi | Special::Eoi)),
        _ => false,
    }
}

fn embed<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    w: &MoTWeights<Var>,
    seq: &MultimodalSequence,
) -> Result<Var> {
    let text = cfg.layout.text as u32;
    let (mut und_pos, mut und_ids) = (Vec::new(), Vec::new());
    let (mut gen_pos, mut gen_ids) = (Vec::new(), Vec::new());
    let (mut slot_pos, mut slot_rows) = (Vec::new(), Vec::new());
    for (t, tok) in seq.tokens.iter().enumerate() {
        match *tok {
            Token::Id(id) => {
                if und_table(seq.classes[t], seq.specials[t]) {
                    und_pos.push(t);
                    und_ids.push(id as usize);
                } else {
                    gen_pos.push(t);
                    gen_ids.push((id - text) as usize);
                }
            }
            Token::Slot(i) => {
                slot_pos.push(t);
                slot_rows.push(i);
            }
        }
    }
    let mut parts = Vec::new();
    if !und_pos.is_empty() {
        parts.push((g.embedding(w.und_embed, &und_ids)?, und_pos));
    }
    if !gen_pos.is_empty() {
        parts.push((g.embedding(w.gen_embed, &gen_ids)?, gen_pos));
    }
    if !slot_pos.is_empty() {
        if seq.slot_dim != cfg.slot_dim {
            return Err(Error::Config(format!(
                "slot width {} does not match projector input {}",
                seq.slot_dim, cfg.slot_dim
            )));
        }
        let sd = seq.slot_dim;
        let mut data = Vec::with_capacity(slot_rows.len() * sd);
        for &r in &slot_rows {
            let row = seq
                .slot_features
                .get(r * sd..(r + 1) * sd)
                .ok_or_else(|| Error::Index(format!("slot {r} has no features")))?;
            data.extend(row.iter().map(|&x| T::of(x as f64)));
        }
        let feats = g.leaf(Tensor::matrix(slot_rows.len(), sd, data)?, false);
        parts.push((g.matmul(feats, w.projector)?, slot_pos));
    }
    merge(g, &parts, seq.len())
}

fn merge<T: Scalar>(g: &mut Graph<'_, T>, parts: &[(Var, Vec<usize>)], n: usize) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0].0);
    }
    let refs: Vec<(Var, &[usize])> = parts.iter().map(|(v, p)| (*v, p.as_slice())).collect();
    g.merge_rows(&refs, n)
}

fn block_ffn<T: Scalar>(g: &mut Graph<'_, T>, bw: &BlockWeights<Var>, x: Var, eps: T) -> Result<Var> {
    let h = g.rmsnorm(x, bw.ffn_norm, eps)?;
    let up = g.matmul(h, bw.w_up)?;
    let act = g.silu(up)?;
    let down = g.matmul(act, bw.w_down)?;
    g.add(x, down)
}

/// Records the forward pass. Requires routing tags.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    w: &MoTWeights<Var>,
    seq: &MultimodalSequence,
) -> Result<ForwardVars> {
    if seq.is_empty() {
        return Err(Error::Contract("empty sequence".into()));
    }
    let routing = seq.routing()?;
    let n = seq.len();
    let eps = T::of(cfg.norm_eps);
    let positions: Vec<usize> = (0..n).collect();

    let mut groups: Vec<(Expert, Vec<usize>)> = Vec::new();
    for e in [Expert::Und, Expert::Gen] {
        let idx: Vec<usize> = (0..n).filter(|&t| cfg.block_expert(routing[t]) == e).collect();
        if !idx.is_empty() {
            groups.push((e, idx));
        }
    }
    let single = groups.len() == 1;

    let mut x = embed(g, cfg, w, seq)?;
    for l in 0..cfg.n_layers {
        let mut xs = Vec::with_capacity(groups.len());
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for (e, idx) in &groups {
            let bw = &w.expert(*e).layers[l];
            let xe = if single { x } else { g.gather_rows(x, idx)? };
            let h = g.rmsnorm(xe, bw.attn_norm, eps)?;
            qs.push((g.matmul(h, bw.wq)?, idx.clone()));
            ks.push((g.matmul(h, bw.wk)?, idx.clone()));
            vs.push((g.matmul(h, bw.wv)?, idx.clone()));
            xs.push(xe);
        }
        let q = merge(g, &qs, n)?;
        let k = merge(g, &ks, n)?;
        let v = merge(g, &vs, n)?;
        let q = g.rope(q, &positions, cfg.n_heads, cfg.rope_base)?;
        let k = g.rope(k, &positions, cfg.n_heads, cfg.rope_base)?;
        let att = g.causal_attention(q, k, v, cfg.n_heads)?;
        let mut outs = Vec::with_capacity(groups.len());
        for ((e, idx), xe) in groups.iter().zip(xs) {
            let bw = &w.expert(*e).layers[l];
            let ae = if single { att } else { g.gather_rows(att, idx)? };
            let o = g.matmul(ae, bw.wo)?;
            let xe = g.add(xe, o)?;
            outs.push((block_ffn(g, bw, xe, eps)?, idx.clone()));
        }
        x = merge(g, &outs, n)?;
    }
    let mut normed = Vec::with_capacity(groups.len());
    for (e, idx) in &groups {
        let xe = if single { x } else { g.gather_rows(x, idx)? };
        normed.push((g.rmsnorm(xe, w.expert(*e).final_norm, eps)?, idx.clone()));
    }
    let hidden = merge(g, &normed, n)?;

    let heads = seq.heads(&cfg.layout)?;
    let mut out = ForwardVars {
        hidden,
        und: None,
        gen: None,
    };
    for e in [Expert::Und, Expert::Gen] {
        let pos: Vec<usize> = (0..n).filter(|&t| heads[t] == e).collect();
        if pos.is_empty() {
            continue;
        }
        let rows = if pos.len() == n { hidden } else { g.gather_rows(hidden, &pos)? };
        let head = match e {
            Expert::Und => w.und_head,
            Expert::Gen => w.gen_head,
        };
        let logits = g.matmul(rows, head)?;
        let hl = HeadLogits { logits, positions: pos };
        match e {
            Expert::Und => out.und = Some(hl),
            Expert::Gen => out.gen = Some(hl),
        }
    }
    Ok(out)
}

/// Head-local index of `id`, or a contract error when the head cannot score it.
fn local_target(layout: &VocabLayout, head: Expert, id: u32) -> Result<usize> {
    let range = match head {
        Expert::Und => layout.und_range(),
        Expert::Gen => layout.gen_range(),
    };
    if !range.contains(&(id as usize)) {
        return Err(Error::Contract(format!("target {id} cannot be scored by the {head:?} head")));
    }
    Ok(id as usize - range.start)
}

/// `scale` times the summed masked cross-entropy over both heads.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    layout: &VocabLayout,
    fv: &ForwardVars,
    seq: &MultimodalSequence,
    scale: T,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (head, hl) in [(Expert::Und, &fv.und), (Expert::Gen, &fv.gen)] {
        let Some(hl) = hl else { continue };
        let mut targets = Vec::with_capacity(hl.positions.len());
        let mut mask = Vec::with_capacity(hl.positions.len());
        for &t in &hl.positions {
            match (seq.loss_mask[t], seq.targets[t]) {
                (true, Some(id)) => {
                    targets.push(local_target(layout, head, id)?);
                    mask.push(true);
                }
                _ => {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
        let l = g.cross_entropy_scaled(hl.logits, &targets, &mask, scale)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Contract("no head produced logits".into()))
}

/// Logits at one position, from the head that scores it.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionLogits<T> {
    pub head: Expert,
    pub values: Vec<T>,
}

/// Unrecorded forward pass.
pub fn forward<T: Scalar>(params: &MoTParams<T>, seq: &MultimodalSequence) -> Result<Vec<PositionLogits<T>>> {
    let mut g = Graph::new();
    let w = register_params(&mut g, params, |_| false);
    let fv = build_forward(&mut g, &params.config, &w, seq)?;
    let mut out: Vec<Option<PositionLogits<T>>> = vec![None; seq.len()];
    for (head, hl) in [(Expert::Und, &fv.und), (Expert::Gen, &fv.gen)] {
        let Some(hl) = hl else { continue };
        let lv = g.value(hl.logits);
        for (r, &t) in hl.positions.iter().enumerate() {
            out[t] = Some(PositionLogits {
                head,
                values: lv.row(r).to_vec(),
            });
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every position has a head")).collect())
}

/// Mean masked cross-entropy of precomputed logits.
pub fn compute_loss<T: Scalar>(
    logits: &[PositionLogits<T>],
    seq: &MultimodalSequence,
    layout: &VocabLayout,
) -> Result<T> {
    if logits.len() != seq.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} positions",
            logits.len(),
            seq.len()
        )));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (t, pl) in logits.iter().enumerate() {
        let (true, Some(id)) = (seq.loss_mask[t], seq.targets[t]) else {
            continue;
        };
        let local = local_target(layout, pl.head, id)?;
        if local >= pl.values.len() {
            return Err(Error::Contract(format!("position {t}: head width {} too small", pl.values.len())));
        }
        sum += kernels::log_sum_exp(&pl.values) - pl.values[local];
        count += 1;
    }
    Ok(if count == 0 { T::zero() } else { sum / T::of(count as f64) })
}

/// Summed masked NLL and the number of scored positions.
pub fn sequence_nll<T: Scalar>(params: &MoTParams<T>, seq: &MultimodalSequence) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let w = register_params(&mut g, params, |_| false);
    let fv = build_forward(&mut g, &params.config, &w, seq)?;
    let loss = build_loss(&mut g, &params.config.layout, &fv, seq, T::one())?;
    Ok((g.value(loss).item().as_f64(), seq.masked_count()))
}

/// Continuous understanding slots: one frozen linear projection per patch.
pub fn encode_und_image<T: Scalar>(img: &ToyImage, params: &MoTParams<T>, patch: usize) -> Result<Tensor<T>> {
    let cfg = &params.config;
    if patch * patch * crate::tokenizers::CHANNELS != cfg.slot_dim {
        return Err(Error::Config(format!(
            "patch {patch} gives slots of {} values, projector expects {}",
            patch * patch * crate::tokenizers::CHANNELS,
            cfg.slot_dim
        )));
    }
    let feats = extract_patches(img, patch)?;
    let n = feats.len() / cfg.slot_dim;
    let data: Vec<T> = feats.iter().map(|&x| T::of(x as f64)).collect();
    let out = kernels::matmul(&data, params.weights.projector.data(), n, cfg.slot_dim, cfg.d_model);
    Tensor::matrix(n, cfg.d_model, out)
}

/// Result of comparing the inherited understanding tensors of two snapshots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenReport {
    pub checked: Vec<String>,
    pub mismatched: Vec<String>,
}

impl FrozenReport {
    pub fn passed(&self) -> bool {
        self.mismatched.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::FrozenDrift(self.mismatched))
        }
    }
}

/// Bitwise comparison of understanding blocks, embeddings, head and projector.
pub fn assert_frozen<T: Scalar>(before: &MoTParams<T>, after: &MoTParams<T>) -> Result<FrozenReport> {
    let a = before.named();
    let b = after.named();
    if a.len() != b.len() {
        return Err(Error::Config("snapshots have different tensor counts".into()));
    }
    let mut report = FrozenReport {
        checked: Vec::new(),
        mismatched: Vec::new(),
    };
    for ((ia, ta), (ib, tb)) in a.into_iter().zip(b) {
        if ia.name != ib.name || ta.shape() != tb.shape() {
            return Err(Error::Config(format!(
                "tensor {} {:?} does not match {} {:?}",
                ia.name,
                ta.shape(),
                ib.name,
                tb.shape()
            )));
        }
        if !ia.group.is_und_side() {
            continue;
        }
        if !ta.bit_eq(tb) {
            report.mismatched.push(ia.name.clone());
        }
        report.checked.push(ia.name);
    }
    Ok(report)
}
