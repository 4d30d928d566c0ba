use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::caption::{decode_caption, value_id, A};
use crate::data::{attribute_oracle, gen_sample, sample_seed, Attributes, Sample, TaskKind, World};
use crate::error::{Error, Result};
use crate::model::{forward, route_tokens, sequence_nll, Expert, MoTParams, MultimodalSequence, RoutingPolicy};
use crate::numerics::Scalar;
use crate::sampler::{generate_image, generate_text, DecodeConfig};
use crate::tokenizers::VocabClass;

/// Seed stream for evaluation samples, disjoint from training and held-out losses.
pub const EVAL_STREAM: u64 = 0xe7a1 << 24;

/// Toy benchmark scores for one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generated images whose oracle attributes match the prompt.
    pub gen_accuracy: f64,
    /// Greedy captions that match the image exactly.
    pub und_accuracy: f64,
    /// Teacher-forced perplexity over pixel tokens, normalized over pixel ids
    /// only. `None` when the representation has no pixel tokens.
    pub pixel_ppl: Option<f64>,
    /// Edits whose result shows the instructed value with everything else kept.
    pub edit_accuracy: f64,
    /// Harmonic mean of the captioning and text-copy soft scores.
    pub harmonic_und: f64,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        for (name, x) in [
            ("gen_accuracy", self.gen_accuracy),
            ("und_accuracy", self.und_accuracy),
            ("edit_accuracy", self.edit_accuracy),
            ("harmonic_und", self.harmonic_und),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Numeric(format!("{name} = {x} outside [0, 1]")));
            }
        }
        match self.pixel_ppl {
            Some(p) if !(p >= 1.0) => Err(Error::Numeric(format!("pixel_ppl = {p} below 1"))),
            _ => Ok(()),
        }
    }
}

/// Sample counts behind an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generation prompts; 216 visits every concept once.
    pub gen_prompts: usize,
    pub und_samples: usize,
    pub ppl_samples: usize,
    pub edit_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gen_prompts: Attributes::COUNT,
            und_samples: 216,
            ppl_samples: 64,
            edit_samples: 108,
            seed: 0,
        }
    }
}

/// `n` concepts: whole seeded permutations of the concept space, so any
/// multiple of 216 is balanced and smaller counts never repeat.
pub fn concepts(n: usize, seed: u64) -> Vec<Attributes> {
    let mut out = Vec::with_capacity(n);
    let mut round = 0u64;
    while out.len() < n {
        let mut idx: Vec<usize> = (0..Attributes::COUNT).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed ^ EVAL_STREAM, round)));
        out.extend(idx.into_iter().take(n - out.len()).map(Attributes::from_index));
        round += 1;
    }
    out
}

fn eval_samples(world: &World, task: TaskKind, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let stream = sample_seed(seed ^ EVAL_STREAM, task as u64 + 1);
    (0..n as u64).map(|i| gen_sample(sample_seed(stream, i), task, world)).collect()
}

fn routed(mut s: MultimodalSequence, policy: RoutingPolicy) -> MultimodalSequence {
    route_tokens(&mut s, policy);
    s
}

/// Greedy generation for each prompt, scored by the attribute oracle.
pub fn gen_accuracy_on<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    prompts: &[Attributes],
    policy: RoutingPolicy,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InsufficientData("no generation prompts".into()));
    }
    let mut hits = 0usize;
    for a in prompts {
        let prompt = routed(world.t2i_prompt(a)?.finish(), policy);
        let g = generate_image(&prompt, params, world.block_spec(), DecodeConfig::greedy())?;
        let img = world.tokenizer.decode(&g.block.sem_ids, &g.block.pix_ids)?;
        hits += (attribute_oracle(&img) == Some(*a)) as usize;
    }
    Ok(hits as f64 / prompts.len() as f64)
}

/// Perplexity of held-out pixel tokens under teacher forcing, with the
/// softmax restricted to pixel ids.
pub fn pixel_perplexity<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    n: usize,
    seed: u64,
    policy: RoutingPolicy,
) -> Result<Option<f64>> {
    let layout = world.layout;
    if layout.pix == 0 {
        return Ok(None);
    }
    let pix = layout.pix_range();
    let local = pix.start - layout.text..pix.end - layout.text;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for s in eval_samples(world, TaskKind::T2I, n, seed)? {
        let seq = routed(s.sequence, policy);
        let logits = forward(params, &seq)?;
        for (t, pl) in logits.iter().enumerate() {
            let Some(id) = seq.targets[t] else { continue };
            if !seq.loss_mask[t] || !matches!(layout.classify(id)?, VocabClass::Pix(_)) {
                continue;
            }
            if pl.head != Expert::Gen {
                return Err(Error::Contract(format!("pixel target at {t} scored by the {:?} head", pl.head)));
            }
            let row: Vec<f64> = pl.values[local.clone()].iter().map(|x| x.as_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum += lse - row[id as usize - pix.start];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientData("no pixel targets".into()));
    }
    Ok(Some((sum / count as f64).exp()))
}

/// Greedy captions of held-out images, exact match against the truth.
pub fn und_accuracy<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    n: usize,
    seed: u64,
    policy: RoutingPolicy,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InsufficientData("no captioning samples".into()));
    }
    let mut hits = 0usize;
    for s in eval_samples(world, TaskKind::I2T, n, seed)? {
        let img = world.render(&s.attributes, s.background)?;
        let prompt = routed(world.i2t_prompt(&img)?.finish(), policy);
        let mut words = vec![A];
        words.extend(generate_text(&prompt, params, policy, 8)?);
        hits += (decode_caption(&words) == Some(s.attributes)) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// `exp(-mean NLL)` of the answer tokens for one understanding task.
pub fn soft_score<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    task: TaskKind,
    n: usize,
    seed: u64,
    policy: RoutingPolicy,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in eval_samples(world, task, n, seed)? {
        let (a, b) = sequence_nll(params, &routed(s.sequence, policy))?;
        sum += a;
        count += b;
    }
    if count == 0 {
        return Err(Error::InsufficientData(format!("no scored {} tokens", task.name())));
    }
    Ok((-sum / count as f64).exp())
}

pub fn harmonic_mean(xs: &[f64]) -> f64 {
    if xs.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    xs.len() as f64 / xs.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// Harmonic mean of the captioning and text-copy soft scores.
pub fn harmonic_und<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    n: usize,
    seed: u64,
    policy: RoutingPolicy,
) -> Result<f64> {
    let caption = soft_score(params, world, TaskKind::I2T, n, seed, policy)?;
    let text = soft_score(params, world, TaskKind::TextOnly, n, seed, policy)?;
    Ok(harmonic_mean(&[caption, text]))
}

/// Greedy edits of held-out sources; a hit needs the oracle to read exactly
/// the instructed target.
pub fn edit_accuracy<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    n: usize,
    seed: u64,
    policy: RoutingPolicy,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InsufficientData("no edit samples".into()));
    }
    let mut hits = 0usize;
    for s in eval_samples(world, TaskKind::Edit, n, seed)? {
        let (target, field) = (s.target.expect("edit sample"), s.edit_field.expect("edit sample"));
        let src = world.render(&s.attributes, s.background)?;
        let prompt = routed(world.edit_prompt(&src, value_id(&target, field))?.finish(), policy);
        let g = generate_image(&prompt, params, world.block_spec(), DecodeConfig::greedy())?;
        let img = world.tokenizer.decode(&g.block.sem_ids, &g.block.pix_ids)?;
        hits += (attribute_oracle(&img) == Some(target)) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Generation accuracy on `n` fresh prompts plus pixel perplexity.
pub fn eval_generation<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    n: usize,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    let policy = RoutingPolicy::default();
    let acc = gen_accuracy_on(params, world, &concepts(n, seed), policy)?;
    Ok((acc, pixel_perplexity(params, world, n.min(64), seed, policy)?))
}

pub fn evaluate<T: Scalar>(
    params: &MoTParams<T>,
    world: &World,
    cfg: &EvalConfig,
    policy: RoutingPolicy,
) -> Result<EvalReport> {
    let report = EvalReport {
        gen_accuracy: gen_accuracy_on(params, world, &concepts(cfg.gen_prompts, cfg.seed), policy)?,
        und_accuracy: und_accuracy(params, world, cfg.und_samples, cfg.seed, policy)?,
        pixel_ppl: pixel_perplexity(params, world, cfg.ppl_samples, cfg.seed, policy)?,
        edit_accuracy: edit_accuracy(params, world, cfg.edit_samples, cfg.seed, policy)?,
        harmonic_und: harmonic_und(params, world, cfg.und_samples, cfg.seed, policy)?,
    };
    report.check()?;
    Ok(report)
}
