use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::{concepts, evaluate, gen_accuracy_on, EvalConfig, EvalReport};
use crate::data::{MixSpec, TaskKind, World, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, MoTParams, RoutingPolicy};
use crate::tokenizers::TokenizerConfig;
use crate::training::{pretrain_understanding, PretrainConfig, StageConfig, TrainMode, Trainer};

/// Transformer size shared by every ablation leg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backbone {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for Backbone {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
        }
    }
}

impl Backbone {
    pub fn model(&self, world: &World, architecture: Architecture) -> ModelConfig {
        ModelConfig {
            layout: world.layout,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            slot_dim: world.slot_dim(),
            architecture,
            ..ModelConfig::default()
        }
    }
}

/// Everything a harness run depends on besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationBudget {
    pub backbone: Backbone,
    pub tokenizer: TokenizerConfig,
    pub pretrain: PretrainConfig,
    /// Text-to-image training for the representation comparison.
    pub t2i: StageConfig,
    /// Edit continuation after `t2i`; skipped when `None`.
    pub edit: Option<StageConfig>,
    /// Generation training on text-to-image, captioning and text data for the
    /// architecture and routing comparisons.
    pub mixed: StageConfig,
    pub eval: EvalConfig,
}

/// Peak learning rates are the recipe's times this factor; the recipe's
/// values are sized for a billion-parameter model.
pub const TOY_LR_SCALE: f64 = 60.0;

impl Default for AblationBudget {
    fn default() -> Self {
        let t2i = StageConfig {
            name: "t2i".into(),
            learning_rate: StageConfig::stage1().learning_rate * TOY_LR_SCALE,
            // At 24k every representation memorizes all 216 concepts and the
            // table ties at 1.0; at 12k the pixel-only baseline sits near 0.25.
            total_samples: 12_000,
            warmup_steps: 50,
            mix: MixSpec::single(TaskKind::T2I),
            i2t_via_gen: false,
            ..StageConfig::stage1()
        };
        let edit = StageConfig {
            name: "edit".into(),
            learning_rate: StageConfig::stage3().learning_rate * TOY_LR_SCALE,
            total_samples: 2_000,
            mix: MixSpec::single(TaskKind::Edit),
            backgrounds: vec![0.0],
            ..StageConfig::stage3()
        };
        let mixed = StageConfig {
            name: "mixed".into(),
            mix: MixSpec {
                entries: vec![(TaskKind::T2I, 6), (TaskKind::I2T, 2), (TaskKind::TextOnly, 1)],
            },
            total_samples: 24_000,
            ..t2i.clone()
        };
        Self {
            backbone: Backbone::default(),
            tokenizer: TokenizerConfig::default(),
            // Long enough that captioning saturates: the inherited model
            // should be finished, not still learning its own tasks.
            pretrain: PretrainConfig {
                steps: 8000,
                warmup_steps: 50,
                ..PretrainConfig::default()
            },
            t2i,
            edit: Some(edit),
            mixed,
            eval: EvalConfig::default(),
        }
    }
}

impl AblationBudget {
    /// Minutes-scale settings for smoke runs; orderings are not meaningful.
    pub fn smoke() -> Self {
        let b = Self::default();
        let shrink = |s: StageConfig, n: u64| StageConfig {
            total_samples: n,
            warmup_steps: 2,
            batch_size: 8,
            ..s
        };
        Self {
            backbone: Backbone {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ffn_hidden: 32,
            },
            pretrain: PretrainConfig {
                steps: 20,
                batch_size: 8,
                warmup_steps: 2,
                ..b.pretrain
            },
            t2i: shrink(b.t2i, 80),
            edit: b.edit.map(|e| shrink(e, 32)),
            mixed: shrink(b.mixed, 72),
            eval: EvalConfig {
                gen_prompts: 12,
                und_samples: 12,
                ppl_samples: 4,
                edit_samples: 6,
                seed: 0,
            },
            ..b
        }
    }
}

/// The inherited understanding model: Und side trained on captioning and text.
pub fn pretrained_base(world: &World, budget: &AblationBudget, seed: u64) -> Result<MoTParams<f32>> {
    let p0 = MoTParams::init(budget.backbone.model(world, Architecture::MoT), seed)?;
    pretrain_understanding(p0, world, &budget.pretrain, seed, |_| Ok(()))
}

/// A fresh model for `cfg` carrying `base`'s understanding side, with the
/// generation blocks copied from it. Generation tables come from `seed`.
pub fn transplant(base: &MoTParams<f32>, cfg: ModelConfig, seed: u64) -> Result<MoTParams<f32>> {
    let b = &base.config;
    if (b.d_model, b.n_layers, b.n_heads, b.ffn_hidden, b.slot_dim, b.layout.text)
        != (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.ffn_hidden, cfg.slot_dim, cfg.layout.text)
    {
        return Err(Error::Config("transplant needs the same backbone and text vocabulary".into()));
    }
    let mut p = MoTParams::init(cfg, seed)?;
    let infos = p.weights.infos();
    for ((info, dst), src) in infos.iter().zip(p.weights.values_mut()).zip(base.weights.values()) {
        if info.group.is_und_side() {
            *dst = src.clone();
        }
    }
    p.copy_und_to_gen();
    p.validate()?;
    Ok(p)
}

fn train(params: MoTParams<f32>, world: &World, stage: &StageConfig, seed: u64) -> Result<MoTParams<f32>> {
    let mut t = Trainer::new(params, world, stage.clone(), seed, TrainMode::Generation)?;
    t.run(None, |_| Ok(()))?;
    t.finish()
}

/// One representation variant: semantic grid side and whether pixel tokens follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representation {
    pub sem_grid: usize,
    pub pixels: bool,
}

impl Representation {
    /// Rows in table order: pixel-only, then each semantic length alone and
    /// followed by pixels.
    pub const GRID: [Representation; 5] = [
        Representation { sem_grid: 0, pixels: true },
        Representation { sem_grid: 6, pixels: false },
        Representation { sem_grid: 6, pixels: true },
        Representation { sem_grid: 3, pixels: false },
        Representation { sem_grid: 3, pixels: true },
    ];
    pub const PIX_ONLY: Representation = Representation { sem_grid: 0, pixels: true };
    pub const SEM_PIX: Representation = Representation { sem_grid: 3, pixels: true };

    /// `s/p`, token counts per image.
    pub fn label(&self, base: &WorldConfig) -> String {
        let g = self.geometry(base);
        format!("{}/{}", g.s(), g.p())
    }

    fn geometry(&self, base: &WorldConfig) -> crate::tokenizers::ImageGeometry {
        crate::tokenizers::ImageGeometry {
            sem_grid: self.sem_grid,
            patch: if self.pixels { base.geometry.patch } else { 0 },
            ..base.geometry
        }
    }

    /// World with this representation. Pixel codebooks are shared with `base`,
    /// so variants differ only in their semantic tokens.
    pub fn world(&self, base: &World, tok: &TokenizerConfig) -> Result<World> {
        let config = WorldConfig {
            geometry: self.geometry(&base.config),
            ..base.config.clone()
        };
        if config == base.config {
            return Ok(base.clone());
        }
        let pixel = if self.pixels { base.tokenizer.pixel.clone() } else { None };
        World::fit_sharing(config, tok, pixel)
    }
}

/// One leg's full configuration, the unit of single-variable checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LegConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    pub eval_routing: RoutingPolicy,
    pub seed: u64,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
            if a.is_empty() {
                out.insert(prefix.into(), "[]".into());
            }
        }
        other => {
            out.insert(prefix.into(), other.to_string());
        }
    }
}

/// Keys whose values differ, as `key: a -> b`.
pub fn config_diff(a: &LegConfig, b: &LegConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).expect("serializable"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("serializable"), &mut fb);
    let keys: std::collections::BTreeSet<_> = fa.keys().chain(fb.keys()).cloned().collect();
    let none = "-".to_string();
    keys.into_iter()
        .filter(|k| fa.get(k) != fb.get(k))
        .map(|k| format!("{k}: {} -> {}", fa.get(&k).unwrap_or(&none), fb.get(&k).unwrap_or(&none)))
        .collect()
}

/// Fails unless every differing key starts with one of `allowed`.
pub fn assert_single_variable(reference: &LegConfig, leg: &LegConfig, allowed: &[&str]) -> Result<Vec<String>> {
    let diff = config_diff(reference, leg);
    for d in &diff {
        if !allowed.iter().any(|a| d.starts_with(a)) {
            return Err(Error::Contract(format!("ablation legs differ beyond {allowed:?}: {d}")));
        }
    }
    Ok(diff)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub config: LegConfig,
    /// Differences from the first row.
    pub diff: Vec<String>,
    /// Tokens per image block including delimiters.
    pub block_len: usize,
    pub before: Option<EvalReport>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or(String::new(), |v| format!("{v:.digits$}"))
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label",
            "block_len",
            "gen_accuracy",
            "und_accuracy",
            "pixel_ppl",
            "edit_accuracy",
            "harmonic_und",
            "harmonic_und_before",
        ])?;
        for r in &self.rows {
            let m = &r.report;
            w.write_record([
                r.label.clone(),
                r.block_len.to_string(),
                format!("{:.6}", m.gen_accuracy),
                format!("{:.6}", m.und_accuracy),
                fmt_opt(m.pixel_ppl, 4),
                format!("{:.6}", m.edit_accuracy),
                format!("{:.6}", m.harmonic_und),
                fmt_opt(r.before.map(|b| b.harmonic_und), 6),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("{}\n", self.name);
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>7} {:>7} {:>9} {:>7} {:>10} {:>10}",
            "row", "len", "gen", "und", "pix_ppl", "edit", "h_und", "h_und_pre"
        );
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>7.3} {:>7.3} {:>9} {:>7.3} {:>10.6} {:>10}",
                r.label,
                r.block_len,
                m.gen_accuracy,
                m.und_accuracy,
                fmt_opt(m.pixel_ppl, 2),
                m.edit_accuracy,
                m.harmonic_und,
                fmt_opt(r.before.map(|b| b.harmonic_und), 6),
            );
        }
        for r in self.rows.iter().skip(1) {
            let _ = writeln!(s, "{} vs {}: {}", r.label, self.rows[0].label, r.diff.join("; "));
        }
        s
    }
}

/// Runs `legs` on up to `jobs` threads, keeping input order.
fn run_legs<L: Sync, R: Send>(legs: &[L], jobs: usize, f: impl Fn(&L) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, legs.len().max(1));
    if jobs == 1 {
        return legs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<R>>>> = legs.iter().map(|_| Default::default()).collect();
    std::thread::scope(|sc| {
        for _ in 0..jobs {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= legs.len() {
                    break;
                }
                let r = f(&legs[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("unpoisoned").expect("leg ran")).collect()
}

fn finish_table(name: &str, legs: Vec<(String, LegConfig, usize, Option<EvalReport>, EvalReport)>, allowed: &[&str]) -> Result<AblationTable> {
    let reference = legs[0].1.clone();
    let rows = legs
        .into_iter()
        .map(|(label, config, block_len, before, report)| {
            let diff = assert_single_variable(&reference, &config, allowed)?;
            Ok(AblationRow {
                label,
                config,
                diff,
                block_len,
                before,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { name: name.into(), rows })
}

/// Trains each representation from the same inherited model, data seed and
/// budget, then scores it. `und` is [`pretrained_base`] output for `base`.
pub fn ablate_representation(
    base: &World,
    und: &MoTParams<f32>,
    variants: &[Representation],
    budget: &AblationBudget,
    seed: u64,
    jobs: usize,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Config("no representation variants".into()));
    }
    let legs = run_legs(variants, jobs, |v| {
        let world = v.world(base, &budget.tokenizer)?;
        let cfg = budget.backbone.model(&world, Architecture::MoT);
        let mut p = transplant(und, cfg.clone(), seed)?;
        let mut stages = vec![budget.t2i.clone()];
        p = train(p, &world, &budget.t2i, seed)?;
        let prompts = concepts(budget.eval.gen_prompts, budget.eval.seed);
        let gen_accuracy = gen_accuracy_on(&p, &world, &prompts, RoutingPolicy::default())?;
        if let Some(e) = &budget.edit {
            p = train(p, &world, e, seed)?;
            stages.push(e.clone());
        }
        let report = EvalReport {
            gen_accuracy,
            ..evaluate(&p, &world, &budget.eval, RoutingPolicy::default())?
        };
        let config = LegConfig {
            world: world.config.clone(),
            model: cfg,
            stages,
            eval_routing: RoutingPolicy::default(),
            seed,
        };
        Ok((v.label(&base.config), config, world.block_spec().len(), None, report))
    })?;
    finish_table("representation", legs, &["world.geometry", "model.layout"])
}

fn mixed_leg(
    world: &World,
    und: &MoTParams<f32>,
    budget: &AblationBudget,
    seed: u64,
    architecture: Architecture,
    routing: RoutingPolicy,
) -> Result<(LegConfig, EvalReport, EvalReport)> {
    let cfg = budget.backbone.model(world, architecture);
    let p = transplant(und, cfg.clone(), seed)?;
    let before = evaluate(&p, world, &budget.eval, routing)?;
    let stage = StageConfig {
        routing,
        ..budget.mixed.clone()
    };
    let p = train(p, world, &stage, seed)?;
    let after = evaluate(&p, world, &budget.eval, routing)?;
    let config = LegConfig {
        world: world.config.clone(),
        model: cfg,
        stages: vec![stage],
        eval_routing: routing,
        seed,
    };
    Ok((config, before, after))
}

/// Dense (one trainable parameter set for every token) against MoT, both
/// from the same inherited model and data.
pub fn ablate_architecture(
    world: &World,
    und: &MoTParams<f32>,
    budget: &AblationBudget,
    seed: u64,
    jobs: usize,
) -> Result<AblationTable> {
    let arches = [Architecture::Dense, Architecture::MoT];
    let legs = run_legs(&arches, jobs, |&a| {
        let (config, before, after) = mixed_leg(world, und, budget, seed, a, RoutingPolicy::default())?;
        let label = match a {
            Architecture::Dense => "Dense",
            Architecture::MoT => "MoT",
        };
        Ok((label.to_string(), config, world.block_spec().len(), Some(before), after))
    })?;
    finish_table("architecture", legs, &["model.architecture"])
}

/// The four routing policies under identical budgets and seeds.
pub fn ablate_routing(
    world: &World,
    und: &MoTParams<f32>,
    budget: &AblationBudget,
    seed: u64,
    jobs: usize,
) -> Result<AblationTable> {
    let legs = run_legs(&RoutingPolicy::ALL, jobs, |&r| {
        let (config, before, after) = mixed_leg(world, und, budget, seed, Architecture::MoT, r)?;
        Ok((r.label(), config, world.block_spec().len(), Some(before), after))
    })?;
    finish_table("routing", legs, &["stages[0].routing", "eval_routing"])
}
