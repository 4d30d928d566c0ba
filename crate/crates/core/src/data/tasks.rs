use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{apply_value, A, encode_caption, value_id, CAPTION_LEN, MAKE, SEMI};
use super::world::{render, AttributeField, Attributes};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, MultimodalSequence, SequenceBuilder};
use crate::tokenizers::{
    assemble_image_block, extract_patches, BlockSpec, Codebook, ImageGeometry, ImageTokenBlock, ImageTokenizer, Special,
    ToyImage, TokenizerConfig, VocabLayout, CHANNELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "t2i")]
    T2I,
    #[serde(rename = "i2t")]
    I2T,
    #[serde(rename = "edit")]
    Edit,
    #[serde(rename = "text")]
    TextOnly,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::T2I, TaskKind::I2T, TaskKind::Edit, TaskKind::TextOnly];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2I => "t2i",
            TaskKind::I2T => "i2t",
            TaskKind::Edit => "edit",
            TaskKind::TextOnly => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub geometry: ImageGeometry,
    /// Background intensities samples draw from.
    pub backgrounds: Vec<f32>,
    /// Patch side of the continuous understanding encoder.
    pub und_patch: usize,
    /// Feed I2T images as generation blocks instead of continuous slots.
    pub i2t_via_gen: bool,
    pub text_vocab: usize,
    /// Concept indices samples are restricted to; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<usize>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            geometry: ImageGeometry::default(),
            backgrounds: vec![0.0],
            und_patch: 6,
            i2t_via_gen: false,
            text_vocab: 256,
            concepts: Vec::new(),
        }
    }
}

/// Background levels the tokenizers are fitted on.
pub const FIT_BACKGROUNDS: [f32; 3] = [0.0, 0.15, 0.3];

/// A fitted tokenizer with the configuration samples are drawn under.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub tokenizer: ImageTokenizer,
    pub layout: VocabLayout,
}

impl World {
    pub fn new(config: WorldConfig, tokenizer: ImageTokenizer) -> Result<Self> {
        if config.geometry != tokenizer.geometry {
            return Err(Error::Config("world and tokenizer geometries differ".into()));
        }
        if config.backgrounds.is_empty() {
            return Err(Error::Config("world needs at least one background level".into()));
        }
        if let Some(c) = config.concepts.iter().find(|&&c| c >= Attributes::COUNT) {
            return Err(Error::Config(format!("concept index {c} outside 0..{}", Attributes::COUNT)));
        }
        if config.und_patch == 0 || !config.geometry.side.is_multiple_of(config.und_patch) {
            return Err(Error::Config(format!(
                "understanding patch {} does not tile side {}",
                config.und_patch, config.geometry.side
            )));
        }
        if config.text_vocab < super::caption::text_words() {
            return Err(Error::Config(format!(
                "text vocabulary {} is smaller than the {} caption words",
                config.text_vocab,
                super::caption::text_words()
            )));
        }
        let layout = VocabLayout::new(
            config.text_vocab,
            tokenizer.semantic.as_ref().map_or(0, |c| c.k()),
            tokenizer.pixel.as_ref().map_or(0, |c| c.k()),
        );
        Ok(Self {
            config,
            tokenizer,
            layout,
        })
    }

    /// This world as evaluation sees it: understanding images enter as
    /// continuous slots and every concept is in play.
    pub fn for_evaluation(&self) -> Result<Self> {
        Self::new(
            WorldConfig {
                i2t_via_gen: false,
                concepts: Vec::new(),
                ..self.config.clone()
            },
            self.tokenizer.clone(),
        )
    }

    /// The world a checkpoint was trained in: its tokenizer plus the `world`
    /// entry of its metadata, falling back to defaults at the tokenizer's
    /// geometry.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tokenizer = ckpt
            .tokenizer
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no tokenizer".into()))?;
        let config = match ckpt.meta.get("world") {
            Some(w) => serde_json::from_value(w.clone())
                .map_err(|e| Error::Format(format!("checkpoint world metadata: {e}")))?,
            None => WorldConfig {
                geometry: tokenizer.geometry,
                ..WorldConfig::default()
            },
        };
        let world = Self::new(config, tokenizer)?;
        if ckpt.params.config.layout != world.layout {
            return Err(Error::Format("checkpoint model and tokenizer vocabularies differ".into()));
        }
        Ok(world)
    }

    /// Renders every concept on every fit background and fits the tokenizer.
    pub fn fit(config: WorldConfig, tok: &TokenizerConfig) -> Result<Self> {
        Self::fit_sharing(config, tok, None)
    }

    /// Like [`World::fit`], reusing `pixel` instead of fitting a pixel codebook.
    pub fn fit_sharing(config: WorldConfig, tok: &TokenizerConfig, pixel: Option<Codebook>) -> Result<Self> {
        let images = fit_images(config.geometry.side)?;
        let tokenizer = ImageTokenizer::fit(config.geometry, tok, &images, pixel)?;
        Self::new(config, tokenizer)
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            s: self.config.geometry.s(),
            p: self.config.geometry.p(),
        }
    }

    /// Width of one continuous understanding slot.
    pub fn slot_dim(&self) -> usize {
        self.config.und_patch * self.config.und_patch * CHANNELS
    }

    pub fn und_slots(&self) -> usize {
        (self.config.geometry.side / self.config.und_patch).pow(2)
    }

    pub fn builder(&self) -> SequenceBuilder {
        SequenceBuilder::new(self.layout, self.slot_dim())
    }

    pub fn render(&self, a: &Attributes, background: f32) -> Result<ToyImage> {
        render(a, self.config.geometry.side, background)
    }

    pub fn encode_block(&self, img: &ToyImage) -> Result<ImageTokenBlock> {
        let (sem_ids, pix_ids) = self.tokenizer.encode(img)?;
        Ok(ImageTokenBlock { sem_ids, pix_ids })
    }

    pub fn block_tokens(&self, img: &ToyImage) -> Result<Vec<u32>> {
        assemble_image_block(&self.encode_block(img)?, self.block_spec(), &self.layout)
    }

    pub fn slot_features(&self, img: &ToyImage) -> Result<Vec<f32>> {
        extract_patches(img, self.config.und_patch)
    }

    /// `BOS a <color> <shape> at <position>` with the image block to follow.
    pub fn t2i_prompt(&self, a: &Attributes) -> Result<SequenceBuilder> {
        let mut b = self.builder();
        b.special(Special::Bos, false)?;
        b.extend(&encode_caption(a), false)?;
        Ok(b)
    }

    /// `BOS <image> a` with the rest of the caption to follow. The constant
    /// leading word belongs to the prompt because the last understanding slot
    /// carries no loss, so nothing learns to emit it there.
    pub fn i2t_prompt(&self, img: &ToyImage) -> Result<SequenceBuilder> {
        let mut b = self.builder();
        b.special(Special::Bos, false)?;
        if self.config.i2t_via_gen {
            b.extend(&self.block_tokens(img)?, false)?;
        } else {
            b.slots(&self.slot_features(img)?)?;
        }
        b.push(A, false)?;
        Ok(b)
    }

    /// `BOS <caption> ;` with the copy to follow.
    pub fn text_prompt(&self, a: &Attributes) -> Result<SequenceBuilder> {
        let mut b = self.builder();
        b.special(Special::Bos, false)?;
        b.extend(&encode_caption(a), false)?;
        b.push(SEMI, false)?;
        Ok(b)
    }

    /// `BOS <source block> make <value>` with the target block to follow.
    pub fn edit_prompt(&self, src: &ToyImage, value: u32) -> Result<SequenceBuilder> {
        let mut b = self.builder();
        b.special(Special::Bos, false)?;
        b.extend(&self.block_tokens(src)?, false)?;
        b.push(MAKE, false)?;
        b.push(value, false)?;
        Ok(b)
    }
}

fn fit_images(side: usize) -> Result<Vec<ToyImage>> {
    let mut out = Vec::with_capacity(Attributes::COUNT * FIT_BACKGROUNDS.len());
    for bg in FIT_BACKGROUNDS {
        for a in Attributes::all() {
            out.push(render(&a, side, bg)?);
        }
    }
    Ok(out)
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: TaskKind,
    pub seed: u64,
    pub attributes: Attributes,
    /// Edit target.
    pub target: Option<Attributes>,
    pub edit_field: Option<AttributeField>,
    pub background: f32,
    pub sequence: MultimodalSequence,
}

/// Draws a sample deterministically from `seed`.
pub fn gen_sample(seed: u64, task: TaskKind, world: &World) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attributes = match world.config.concepts.as_slice() {
        [] => Attributes::from_index(rng.random_range(0..Attributes::COUNT)),
        only => Attributes::from_index(only[rng.random_range(0..only.len())]),
    };
    let bg = world.config.backgrounds[rng.random_range(0..world.config.backgrounds.len())];
    let mut target = None;
    let mut edit_field = None;
    let sequence = match task {
        TaskKind::T2I => {
            let mut b = world.t2i_prompt(&attributes)?;
            b.extend(&world.block_tokens(&world.render(&attributes, bg)?)?, true)?;
            b.finish()
        }
        TaskKind::I2T => {
            let mut b = world.i2t_prompt(&world.render(&attributes, bg)?)?;
            b.extend(&encode_caption(&attributes)[1..], true)?;
            b.special(Special::Eos, true)?;
            b.finish()
        }
        TaskKind::TextOnly => {
            let mut b = world.text_prompt(&attributes)?;
            b.extend(&encode_caption(&attributes), true)?;
            b.special(Special::Eos, true)?;
            b.finish()
        }
        TaskKind::Edit => {
            let field = [AttributeField::Shape, AttributeField::Color, AttributeField::Position]
                [rng.random_range(0..3)];
            let tgt = loop {
                let c = Attributes::from_index(rng.random_range(0..Attributes::COUNT));
                let (t, _) = apply_value(&attributes, value_id(&c, field)).expect("value ids apply");
                if t != attributes {
                    break t;
                }
            };
            let mut b = world.edit_prompt(&world.render(&attributes, bg)?, value_id(&tgt, field))?;
            b.extend(&world.block_tokens(&world.render(&tgt, bg)?)?, true)?;
            target = Some(tgt);
            edit_field = Some(field);
            b.finish()
        }
    };
    Ok(Sample {
        task,
        seed,
        attributes,
        target,
        edit_field,
        background: bg,
        sequence,
    })
}

/// Per-task loss-bearing length, used to size evaluation batches.
pub fn scored_len(task: TaskKind, spec: BlockSpec) -> usize {
    match task {
        TaskKind::T2I | TaskKind::Edit => spec.len(),
        TaskKind::I2T => CAPTION_LEN,
        TaskKind::TextOnly => CAPTION_LEN + 1,
    }
}

/// Line of a dataset snapshot; samples regenerate from `(task, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub task: TaskKind,
    pub seed: u64,
    pub attributes: (String, String, String),
}

impl SnapshotRecord {
    pub fn of(s: &Sample) -> Self {
        let a = &s.attributes;
        Self {
            task: s.task,
            seed: s.seed,
            attributes: (a.shape.word().into(), a.color.word().into(), a.position.word().into()),
        }
    }
}

pub fn write_snapshot<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, &SnapshotRecord::of(s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<Vec<SnapshotRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Regenerates a snapshot's samples, checking each recorded attribute tuple.
pub fn regenerate(records: &[SnapshotRecord], world: &World) -> Result<Vec<Sample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = gen_sample(r.seed, r.task, world)?;
            if SnapshotRecord::of(&s) != *r {
                return Err(Error::Format(format!("snapshot line {} does not regenerate", i + 1)));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::attribute_oracle;
    use crate::data::caption::decode_caption;
    use crate::model::{route_tokens, RoutingPolicy, Token};
    use crate::tokenizers::validate_sequence;
    use std::sync::OnceLock;

    pub(crate) fn world() -> &'static World {
        static W: OnceLock<World> = OnceLock::new();
        W.get_or_init(|| World::fit(WorldConfig::default(), &TokenizerConfig::default()).unwrap())
    }

    fn ids(seq: &MultimodalSequence) -> Vec<u32> {
        seq.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Id(i) => Some(*i),
                Token::Slot(_) => None,
            })
            .collect()
    }

    #[test]
    fn samples_are_deterministic_in_seed() {
        for task in TaskKind::ALL {
            assert_eq!(gen_sample(9, task, world()).unwrap(), gen_sample(9, task, world()).unwrap());
        }
    }

    #[test]
    fn every_sequence_routes_and_parses() {
        let w = world();
        for seed in 0..40 {
            for task in TaskKind::ALL {
                let mut s = gen_sample(seed, task, w).unwrap().sequence;
                for p in RoutingPolicy::ALL {
                    assert_eq!(route_tokens(&mut s, p).len(), s.len());
                }
                let blocks = validate_sequence(&ids(&s), w.block_spec(), &w.layout).unwrap();
                let expect = match task {
                    TaskKind::T2I => 1,
                    TaskKind::Edit => 2,
                    _ => 0,
                };
                assert_eq!(blocks.len(), expect);
                assert!(s.masked_count() > 0);
            }
        }
    }

    #[test]
    fn task_layouts() {
        let w = world();
        let t2i = gen_sample(1, TaskKind::T2I, w).unwrap();
        let caption: Vec<u32> = ids(&t2i.sequence)[1..6].to_vec();
        assert_eq!(decode_caption(&caption), Some(t2i.attributes));
        assert_eq!(t2i.sequence.len(), 1 + CAPTION_LEN + w.block_spec().len());

        let i2t = gen_sample(1, TaskKind::I2T, w).unwrap();
        let n = w.und_slots();
        assert!(i2t.sequence.tokens[1..=n].iter().all(|t| matches!(t, Token::Slot(_))));
        assert_eq!(decode_caption(&ids(&i2t.sequence)[1..6]), Some(i2t.attributes));
    }

    #[test]
    fn stage_one_flag_feeds_i2t_images_as_blocks() {
        let mut cfg = WorldConfig::default();
        cfg.i2t_via_gen = true;
        let w = World::new(cfg, world().tokenizer.clone()).unwrap();
        let s = gen_sample(3, TaskKind::I2T, &w).unwrap();
        assert!(s.sequence.tokens.iter().all(|t| matches!(t, Token::Id(_))));
        assert_eq!(validate_sequence(&ids(&s.sequence), w.block_spec(), &w.layout).unwrap().len(), 1);
        // The caption after its constant first word, and EOS, carry the loss.
        assert_eq!(s.sequence.masked_count(), CAPTION_LEN);
        assert_eq!(s.sequence.masked_count(), scored_len(TaskKind::I2T, w.block_spec()));
    }

    #[test]
    fn edits_change_exactly_the_instructed_field() {
        let w = world();
        for seed in 0..200 {
            let s = gen_sample(seed, TaskKind::Edit, w).unwrap();
            let tgt = s.target.unwrap();
            assert_eq!(s.attributes.diff(&tgt), vec![s.edit_field.unwrap()]);
            let toks = ids(&s.sequence);
            let value = toks[1 + w.block_spec().len() + 1];
            assert_eq!(apply_value(&s.attributes, value).unwrap().0, tgt);
        }
    }

    #[test]
    fn oracle_recovers_random_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = Attributes::from_index(rng.random_range(0..Attributes::COUNT));
            let bg = FIT_BACKGROUNDS[rng.random_range(0..3)];
            assert_eq!(attribute_oracle(&render(&a, 24, bg).unwrap()), Some(a));
        }
    }

    #[test]
    fn oracle_survives_vq_round_trip() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ok = 0;
        for _ in 0..1000 {
            let a = Attributes::from_index(rng.random_range(0..Attributes::COUNT));
            let bg = FIT_BACKGROUNDS[rng.random_range(0..3)];
            let b = w.encode_block(&w.render(&a, bg).unwrap()).unwrap();
            let img = w.tokenizer.decode(&b.sem_ids, &b.pix_ids).unwrap();
            ok += (attribute_oracle(&img) == Some(a)) as usize;
        }
        assert!(ok >= 990, "{ok}/1000");
    }

    #[test]
    fn snapshot_round_trip() {
        let w = world();
        let samples: Vec<Sample> = (0..12)
            .map(|i| gen_sample(100 + i, TaskKind::ALL[i as usize % 4], w).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &samples).unwrap();
        let recs = read_snapshot(&buf[..]).unwrap();
        assert_eq!(regenerate(&recs, w).unwrap(), samples);
        let mut bad = recs.clone();
        bad[2].seed += 1;
        assert!(regenerate(&bad, w).is_err());
    }
}
