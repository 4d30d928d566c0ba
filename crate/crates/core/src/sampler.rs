//! Grammar-constrained decoding: `BOI` is forced, then `s` semantic ids and
//! `p` pixel ids are sampled under per-phase masks, then `EOI` is forced.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{classify_id, Expert, IncrementalDecoder, MoTParams, MultimodalSequence, RoutingPolicy, Token, TokenClass};
use crate::numerics::Scalar;
use crate::tokenizers::{BlockSpec, ImageTokenBlock, Special, TokenId, VocabClass, VocabLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitBoi,
    Semantic(usize),
    Pixel(usize),
    Done,
}

/// Sampling options. `temperature == 0` is greedy; `top_k == 0` keeps the full range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            seed: 0,
        }
    }
}

/// Phase machine for one block plus its generator.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub phase: Phase,
    pub spec: BlockSpec,
    pub config: DecodeConfig,
    rng: ChaCha8Rng,
}

impl DecodeState {
    pub fn new(spec: BlockSpec, config: DecodeConfig) -> Self {
        Self {
            phase: Phase::AwaitBoi,
            spec,
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    /// Global id range the next token must come from.
    pub fn active_range(&self, layout: &VocabLayout) -> Option<Range<usize>> {
        match self.phase {
            Phase::Semantic(_) => Some(layout.sem_range()),
            Phase::Pixel(_) => Some(layout.pix_range()),
            _ => None,
        }
    }

    /// Records one emitted content token.
    pub fn advance(&mut self) -> Result<()> {
        let s = self.spec.s;
        let p = self.spec.p;
        self.phase = match self.phase {
            Phase::AwaitBoi if s > 0 => Phase::Semantic(0),
            Phase::AwaitBoi => Phase::Pixel(0),
            Phase::Semantic(k) if k + 1 < s => Phase::Semantic(k + 1),
            Phase::Semantic(_) if p > 0 => Phase::Pixel(0),
            Phase::Pixel(k) if k + 1 < p => Phase::Pixel(k + 1),
            Phase::Semantic(_) | Phase::Pixel(_) => Phase::Done,
            Phase::Done => return Err(Error::Contract("block already complete".into())),
        };
        Ok(())
    }
}

/// Sets every logit outside `range` to negative infinity.
pub fn mask_logits<T: Scalar>(logits: &[T], range: Range<usize>) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if range.contains(&i) { x.as_f64() } else { f64::NEG_INFINITY })
        .collect()
}

/// Sampling distribution implied by masked logits; masked ids get exactly 0.
pub fn distribution(logits: &[f64], temperature: f64, top_k: usize) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut live: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if live.is_empty() {
        return Err(Error::Contract("every logit is masked".into()));
    }
    let mut probs = vec![0.0; logits.len()];
    if temperature <= 0.0 {
        probs[argmax(logits, &live)] = 1.0;
        return Ok(probs);
    }
    // Stable sort keeps lower ids first among equal logits.
    live.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    if top_k > 0 && live.len() > top_k {
        live.truncate(top_k);
    }
    let m = logits[live[0]];
    let mut z = 0.0;
    for &i in &live {
        probs[i] = ((logits[i] - m) / temperature).exp();
        z += probs[i];
    }
    for &i in &live {
        probs[i] /= z;
    }
    Ok(probs)
}

fn argmax(logits: &[f64], live: &[usize]) -> usize {
    let mut best = live[0];
    for &i in live {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws an id from masked logits by inverse CDF. Greedy picks the lowest id among ties.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> Result<usize> {
    let probs = distribution(logits, temperature, top_k)?;
    if temperature <= 0.0 {
        return Ok(probs.iter().position(|&p| p == 1.0).unwrap_or(0));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// One decoded block with the generation-head logits seen at every sampled step.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub block: ImageTokenBlock,
    /// `BOI ... EOI` in global ids.
    pub tokens: Vec<TokenId>,
    /// Raw logits that produced content token `i`, taken at prompt position `prompt_len + i`.
    pub step_logits: Vec<Vec<f32>>,
}

/// Feeds a routed sequence into a decoder.
pub fn prefill<T: Scalar>(dec: &mut IncrementalDecoder<'_, T>, seq: &MultimodalSequence) -> Result<()> {
    let tags = seq.routing()?;
    for (t, tok) in seq.tokens.iter().enumerate() {
        let slot = match tok {
            Token::Slot(k) => Some(&seq.slot_features[k * seq.slot_dim..(k + 1) * seq.slot_dim]),
            Token::Id(_) => None,
        };
        dec.push(*tok, tags[t], slot)?;
    }
    Ok(())
}

fn check_prompt(seq: &MultimodalSequence) -> Result<()> {
    let mut open = false;
    for (c, s) in seq.classes.iter().zip(&seq.specials) {
        match (c, s) {
            (TokenClass::Special, Some(Special::Boi)) => open = true,
            (TokenClass::Special, Some(Special::Eoi)) => open = false,
            _ => {}
        }
    }
    if seq.is_empty() || open {
        return Err(Error::Contract("prompt must end outside an image block".into()));
    }
    Ok(())
}

/// Decodes one image block after `prompt` (which must already be routed).
pub fn generate_image<T: Scalar>(
    prompt: &MultimodalSequence,
    params: &MoTParams<T>,
    spec: BlockSpec,
    config: DecodeConfig,
) -> Result<Generation> {
    check_prompt(prompt)?;
    let layout = params.config.layout;
    let mut dec = IncrementalDecoder::new(params);
    prefill(&mut dec, prompt)?;
    let mut state = DecodeState::new(spec, config);
    let boi = layout.special(Special::Boi);
    dec.push(Token::Id(boi), Expert::Gen, None)?;
    let mut tokens = vec![boi];
    let mut step_logits = Vec::with_capacity(spec.s + spec.p);
    let mut block = ImageTokenBlock::default();
    state.advance()?;
    while let Some(range) = state.active_range(&layout) {
        let raw = dec.logits(Expert::Gen)?;
        // Generation head indices start at the first special id.
        let local = range.start - layout.text..range.end - layout.text;
        let masked = mask_logits(&raw, local);
        let pick = sample_token(&masked, config.temperature, config.top_k, &mut state.rng)?;
        let id = (pick + layout.text) as TokenId;
        match layout.classify(id)? {
            VocabClass::Sem(c) => block.sem_ids.push(c),
            VocabClass::Pix(c) => block.pix_ids.push(c),
            _ => unreachable!("masked to a content range"),
        }
        step_logits.push(raw.iter().map(|x| x.as_f64() as f32).collect());
        tokens.push(id);
        state.advance()?;
        if state.phase != Phase::Done {
            dec.push(Token::Id(id), Expert::Gen, None)?;
        }
    }
    tokens.push(layout.special(Special::Eoi));
    Ok(Generation {
        block,
        tokens,
        step_logits,
    })
}

/// Greedy text continuation on the understanding head, restricted to text ids
/// and `EOS`. Stops at `EOS` (not returned) or after `max_len` tokens.
pub fn generate_text<T: Scalar>(
    prompt: &MultimodalSequence,
    params: &MoTParams<T>,
    policy: RoutingPolicy,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let layout = params.config.layout;
    let mut dec = IncrementalDecoder::new(params);
    prefill(&mut dec, prompt)?;
    let eos = layout.special(Special::Eos) as usize;
    let mut out = Vec::new();
    while out.len() < max_len {
        let raw = dec.logits(Expert::Und)?;
        let masked: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(i, x)| if i < layout.text || i == eos { x.as_f64() } else { f64::NEG_INFINITY })
            .collect();
        let pick = sample_token(&masked, 0.0, 0, &mut rand::rng())?;
        if pick == eos {
            break;
        }
        out.push(pick as TokenId);
        if out.len() < max_len {
            let (class, special) = classify_id(&layout, pick as TokenId)?;
            dec.push(Token::Id(pick as TokenId), policy.route(class, special), None)?;
        }
    }
    Ok(out)
}

fn class_label(layout: &VocabLayout, id: TokenId) -> Result<String> {
    Ok(match layout.classify(id)? {
        VocabClass::Text(_) => "text".into(),
        VocabClass::Special(s) => s.name().into(),
        VocabClass::Sem(c) => format!("sem:{c}"),
        VocabClass::Pix(c) => format!("pix:{c}"),
    })
}

/// Text trace: a `# vocab` header, then one `id<TAB>class` line per token.
pub fn write_trace(ids: &[TokenId], layout: &VocabLayout, spec: BlockSpec) -> Result<String> {
    let mut out = format!(
        "# vocab text={} sem={} pix={} s={} p={}\n",
        layout.text, layout.sem, layout.pix, spec.s, spec.p
    );
    for &id in ids {
        writeln!(out, "{id}\t{}", class_label(layout, id)?).expect("string write");
    }
    Ok(out)
}

/// Parses a trace. The class column is informational; ids are authoritative.
pub fn read_trace(text: &str) -> Result<(VocabLayout, BlockSpec, Vec<TokenId>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format("empty trace".into()))?;
    let fields = header
        .strip_prefix("# vocab")
        .ok_or_else(|| Error::Format("trace must start with a '# vocab' header".into()))?;
    let get = |key: &str| -> Result<usize> {
        fields
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("header lacks '{key}='")))?
            .parse()
            .map_err(|_| Error::Format(format!("header field '{key}' is not an integer")))
    };
    let layout = VocabLayout::new(get("text")?, get("sem")?, get("pix")?);
    let spec = BlockSpec { s: get("s")?, p: get("p")? };
    let mut ids = Vec::new();
    for (n, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let first = line.split('\t').next().unwrap_or_default().trim();
        let id: TokenId = first
            .parse()
            .map_err(|_| Error::Format(format!("line {}: '{first}' is not a token id", n + 1)))?;
        ids.push(id);
    }
    Ok((layout, spec, ids))
}
