use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{lr_at, StageConfig};
use super::optim::{adamw_step, AdamW, OptimizerState, StepStats};
use crate::data::{gen_sample, mix_stream, sample_seed, MixStream, TaskKind, World};
use crate::error::{Error, Result};
use crate::model::{
    build_forward, build_loss, param_infos, route_tokens, sequence_nll, Checkpoint, FrozenReport, MoTParams,
    MultimodalSequence, RoutingPolicy, TensorData, TensorEntry,
};
use crate::numerics::Graph;

/// Which tensors a trainer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Generation training: the architecture decides (Gen side for MoT).
    Generation,
    /// Building the inherited understanding model: Und side only.
    Understanding,
}

impl TrainMode {
    pub fn mask(self, params: &MoTParams<f32>) -> Vec<bool> {
        let arch = params.config.architecture;
        param_infos(params.config.n_layers)
            .iter()
            .map(|i| match self {
                TrainMode::Generation => i.group.trainable(arch),
                TrainMode::Understanding => i.group.is_und_side(),
            })
            .collect()
    }
}

/// One optimizer step's record. Per-task losses are mean per-token NLL over
/// that task's samples in the batch, `None` when the batch held none.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub stage: String,
    pub lr: f64,
    pub loss_total: f64,
    pub task_loss: [Option<f64>; 4],
    pub stats: StepStats,
}

impl StepLog {
    pub fn loss(&self, task: TaskKind) -> Option<f64> {
        self.task_loss[task_index(task)]
    }
}

fn task_index(task: TaskKind) -> usize {
    TaskKind::ALL.iter().position(|&t| t == task).expect("listed")
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "stage",
    "lr",
    "loss_total",
    "loss_t2i",
    "loss_i2t",
    "loss_edit",
    "loss_text",
];

impl MetricsLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(METRICS_HEADER)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        self.writer.write_record([
            log.step.to_string(),
            log.stage.clone(),
            log.lr.to_string(),
            log.loss_total.to_string(),
            opt(log.loss(TaskKind::T2I)),
            opt(log.loss(TaskKind::I2T)),
            opt(log.loss(TaskKind::Edit)),
            opt(log.loss(TaskKind::TextOnly)),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

/// The world a stage samples from: the base tokenizer with the stage's flags.
pub fn stage_world(base: &World, stage: &StageConfig) -> Result<World> {
    let mut cfg = base.config.clone();
    cfg.i2t_via_gen = stage.i2t_via_gen;
    cfg.backgrounds = stage.backgrounds.clone();
    cfg.concepts = stage.concepts.clone();
    World::new(cfg, base.tokenizer.clone())
}

/// Owns the mutable model for one stage.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: MoTParams<f32>,
    pub optimizer: OptimizerState,
    pub stage: StageConfig,
    pub world: World,
    pub seed: u64,
    pub mode: TrainMode,
    stream: MixStream,
    trainable: Vec<bool>,
    reference: MoTParams<f32>,
    hp: AdamW,
}

impl Trainer {
    pub fn new(params: MoTParams<f32>, base: &World, stage: StageConfig, seed: u64, mode: TrainMode) -> Result<Self> {
        stage.validate()?;
        params.validate()?;
        if params.config.layout != base.layout {
            return Err(Error::Config("model vocabulary does not match the world's".into()));
        }
        let world = stage_world(base, &stage)?;
        let trainable = mode.mask(&params);
        let tensors: Vec<(String, usize)> = params
            .named()
            .into_iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|((info, t), _)| (info.name, t.len()))
            .collect();
        let hp = AdamW {
            beta1: stage.beta1,
            beta2: stage.beta2,
            eps: stage.eps,
            weight_decay: stage.weight_decay,
        };
        Ok(Self {
            optimizer: OptimizerState::new(&tensors),
            stream: mix_stream(&stage.mix, seed)?,
            reference: params.clone(),
            params,
            stage,
            world,
            seed,
            mode,
            trainable,
            hp,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn is_done(&self) -> bool {
        self.optimizer.step >= self.stage.total_steps()
    }

    pub fn stream_position(&self) -> u64 {
        self.stream.position()
    }

    fn batch(&mut self) -> Result<Vec<(TaskKind, MultimodalSequence)>> {
        (0..self.stage.batch_size)
            .map(|_| {
                let item = self.stream.next().expect("stream is endless");
                let mut seq = gen_sample(item.seed, item.task, &self.world)?.sequence;
                route_tokens(&mut seq, self.stage.routing);
                Ok((item.task, seq))
            })
            .collect()
    }

    /// One optimizer step over the next batch of the stream.
    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.batch()?;
        let tokens: usize = batch.iter().map(|(_, s)| s.masked_count()).sum();
        if tokens == 0 {
            return Err(Error::InsufficientData("batch has no scored tokens".into()));
        }
        let scale = 1.0 / tokens as f32;
        let mut acc: Vec<Vec<f32>> = self
            .params
            .weights
            .values()
            .into_iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| vec![0.0; t.len()])
            .collect();
        let mut nll = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for (task, seq) in &batch {
            let mut g = Graph::new();
            let mut idx = 0;
            let mask = &self.trainable;
            let w = crate::model::register_params(&mut g, &self.params, |_| {
                idx += 1;
                mask[idx - 1]
            });
            let fv = build_forward(&mut g, &self.params.config, &w, seq)?;
            let loss = build_loss(&mut g, &self.params.config.layout, &fv, seq, scale)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", self.optimizer.step + 1)));
            }
            let grads = g.backward(loss)?;
            let vars = w.values();
            let mut slot = 0;
            for (v, &t) in vars.iter().zip(&self.trainable) {
                if !t {
                    continue;
                }
                if grads.has(**v) {
                    for (a, x) in acc[slot].iter_mut().zip(grads.get(**v).data()) {
                        *a += *x;
                    }
                }
                slot += 1;
            }
            let k = task_index(*task);
            nll[k] += value / scale as f64;
            counts[k] += seq.masked_count();
        }
        let lr = lr_at(self.optimizer.step + 1, &self.stage);
        let mut targets: Vec<&mut [f32]> = self
            .params
            .weights
            .values_mut()
            .into_iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.data_mut())
            .collect();
        let grads: Vec<&[f32]> = acc.iter().map(|a| a.as_slice()).collect();
        let stats = adamw_step(&mut targets, &grads, &mut self.optimizer, lr, self.stage.grad_clip, &self.hp)?;
        let mut task_loss = [None; 4];
        for k in 0..4 {
            if counts[k] > 0 {
                task_loss[k] = Some(nll[k] / counts[k] as f64);
            }
        }
        Ok(StepLog {
            step: self.optimizer.step,
            stage: self.stage.name.clone(),
            lr,
            loss_total: nll.iter().sum::<f64>() / tokens as f64,
            task_loss,
            stats,
        })
    }

    /// Steps until the stage budget (or `until`, if smaller) is reached.
    pub fn run(&mut self, until: Option<u64>, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        let end = until.map_or(self.stage.total_steps(), |u| u.min(self.stage.total_steps()));
        while self.optimizer.step < end {
            let log = self.step()?;
            on_step(&log)?;
        }
        Ok(())
    }

    /// Bitwise comparison of every non-trainable tensor against the stage start.
    pub fn frozen_report(&self) -> FrozenReport {
        let mut report = FrozenReport {
            checked: Vec::new(),
            mismatched: Vec::new(),
        };
        for (((info, a), (_, b)), &t) in self.reference.named().into_iter().zip(self.params.named()).zip(&self.trainable) {
            if t {
                continue;
            }
            report.checked.push(info.name.clone());
            if !a.bit_eq(b) {
                report.mismatched.push(info.name);
            }
        }
        report
    }

    /// Ends the stage: fails hard if any frozen tensor drifted.
    pub fn finish(self) -> Result<MoTParams<f32>> {
        self.frozen_report().into_result()?;
        Ok(self.params)
    }

    /// Parameters, optimizer moments, step, stream position and configuration.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.params.clone());
        c.tokenizer = Some(self.world.tokenizer.clone());
        c.meta = json!({
            "kind": "trainer",
            "stage": self.stage,
            "world": self.world.config,
            "seed": self.seed,
            "mode": self.mode,
            "step": self.optimizer.step,
            "stream_position": self.stream.position(),
        });
        for (i, name) in self.optimizer.names.iter().enumerate() {
            for (tag, data) in [("m", &self.optimizer.m[i]), ("v", &self.optimizer.v[i])] {
                c.extra.push(TensorEntry {
                    name: format!("optim.{tag}.{name}"),
                    shape: vec![data.len()],
                    data: TensorData::F64(data.clone()),
                });
            }
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        if meta["kind"] != "trainer" {
            return Err(Error::Format("checkpoint holds no trainer state".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint meta lacks '{k}'")));
        let stage: StageConfig = serde_json::from_value(field("stage")?)?;
        let world_cfg = serde_json::from_value(field("world")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let mode: TrainMode = serde_json::from_value(field("mode")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let position: u64 = serde_json::from_value(field("stream_position")?)?;
        let tokenizer = ckpt
            .tokenizer
            .clone()
            .ok_or_else(|| Error::Format("checkpoint lacks the tokenizer".into()))?;
        let world = World::new(world_cfg, tokenizer)?;
        let mut t = Trainer::new(ckpt.params, &world, stage, seed, mode)?;
        t.stream.skip_items(position);
        t.optimizer.step = step;
        for i in 0..t.optimizer.names.len() {
            for tag in ["m", "v"] {
                let name = format!("optim.{tag}.{}", t.optimizer.names[i]);
                let entry = ckpt
                    .extra
                    .iter()
                    .find(|e| e.name == name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                let TensorData::F64(data) = &entry.data else {
                    return Err(Error::Format(format!("{name} is not f64")));
                };
                let slot = if tag == "m" { &mut t.optimizer.m[i] } else { &mut t.optimizer.v[i] };
                if data.len() != slot.len() {
                    return Err(Error::Format(format!("{name} has {} values, expected {}", data.len(), slot.len())));
                }
                slot.copy_from_slice(data);
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resume(Checkpoint::load(path)?)
    }
}

/// Fixed evaluation sequences drawn from a stream disjoint from training seeds.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub task: TaskKind,
    pub sequences: Vec<MultimodalSequence>,
}

pub const HELD_OUT_STREAM: u64 = 0x0004_e1d0_u64 << 20;

impl HeldOut {
    pub fn new(world: &World, task: TaskKind, n: usize, seed: u64, policy: RoutingPolicy) -> Result<Self> {
        let sequences = (0..n as u64)
            .map(|i| {
                let mut s = gen_sample(sample_seed(seed ^ HELD_OUT_STREAM, i), task, world)?.sequence;
                route_tokens(&mut s, policy);
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(Self { task, sequences })
    }

    /// Mean per-token NLL.
    pub fn loss(&self, params: &MoTParams<f32>) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        for s in &self.sequences {
            let (a, b) = sequence_nll(params, s)?;
            sum += a;
            count += b;
        }
        if count == 0 {
            return Err(Error::InsufficientData("held-out set has no scored tokens".into()));
        }
        Ok(sum / count as f64)
    }
}

/// Settings for building the inherited understanding expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 1500,
            batch_size: 16,
            warmup_steps: 100,
        }
    }
}

impl PretrainConfig {
    /// Captioning and text copying, understanding routing, clean backgrounds
    /// plus the harder levels.
    pub fn stage(&self) -> StageConfig {
        StageConfig {
            name: "pretrain".into(),
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_samples: self.steps * self.batch_size as u64,
            batch_size: self.batch_size,
            mix: crate::data::MixSpec {
                entries: vec![(TaskKind::I2T, 1), (TaskKind::TextOnly, 1)],
            },
            i2t_via_gen: false,
            backgrounds: crate::data::FIT_BACKGROUNDS.to_vec(),
            ..StageConfig::stage1()
        }
    }
}

/// Trains the understanding side from `params`, then copies it into the
/// generation expert so both start identical.
pub fn pretrain_understanding(
    params: MoTParams<f32>,
    world: &World,
    cfg: &PretrainConfig,
    seed: u64,
    on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<MoTParams<f32>> {
    let mut t = Trainer::new(params, world, cfg.stage(), seed, TrainMode::Understanding)?;
    t.run(None, on_step)?;
    let mut p = t.finish()?;
    p.copy_und_to_gen();
    Ok(p)
}
