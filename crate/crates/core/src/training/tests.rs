use super::*;
use crate::data::tasks_fixture as world;
use crate::data::{MixSpec, TaskKind};
use crate::error::Error;
use crate::model::{param_infos, Architecture, Checkpoint, ModelConfig, MoTParams, RoutingPolicy};

fn tiny(arch: Architecture) -> MoTParams<f32> {
    let w = world();
    let cfg = ModelConfig {
        layout: w.layout,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_hidden: 32,
        slot_dim: w.slot_dim(),
        architecture: arch,
        ..ModelConfig::default()
    };
    MoTParams::init(cfg, 3).unwrap()
}

fn stage(samples: u64, batch: usize) -> StageConfig {
    StageConfig {
        learning_rate: 3e-3,
        warmup_steps: 2,
        total_samples: samples,
        batch_size: batch,
        ..StageConfig::stage1()
    }
}

fn bits(p: &MoTParams<f32>) -> Vec<u32> {
    p.weights.values().into_iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn trainer(seed: u64) -> Trainer {
    Trainer::new(tiny(Architecture::MoT), world(), stage(8 * 6, 6), seed, TrainMode::Generation).unwrap()
}

#[test]
fn equal_seeds_give_identical_runs() {
    let mut logs = Vec::new();
    let mut finals = Vec::new();
    for _ in 0..2 {
        let mut t = trainer(11);
        let mut l = Vec::new();
        t.run(None, |s| {
            l.push(s.clone());
            Ok(())
        })
        .unwrap();
        assert!(t.is_done());
        logs.push(l);
        finals.push(bits(&t.params));
    }
    assert_eq!(logs[0].len(), 8);
    assert_eq!(logs[0], logs[1]);
    assert_eq!(finals[0], finals[1]);
    let mut other = trainer(12);
    other.run(None, |_| Ok(())).unwrap();
    assert_ne!(bits(&other.params), finals[0]);
}

#[test]
fn split_and_resume_matches_unbroken_run() {
    let mut whole = trainer(5);
    whole.run(None, |_| Ok(())).unwrap();

    let mut first = trainer(5);
    first.run(Some(3), |_| Ok(())).unwrap();
    assert_eq!(first.step_count(), 3);
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(second.step_count(), 3);
    assert_eq!(second.stream_position(), 18);
    second.run(None, |_| Ok(())).unwrap();

    assert_eq!(bits(&second.params), bits(&whole.params));
    assert_eq!(second.optimizer, whole.optimizer);
}

#[test]
fn resume_through_a_file_and_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(2);
    t.run(Some(2), |_| Ok(())).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    t.save(&a).unwrap();
    Trainer::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_trainer_checkpoint_is_rejected() {
    let mut bytes = trainer(2).checkpoint().to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let plain = Checkpoint::new(tiny(Architecture::MoT));
    assert!(matches!(Trainer::resume(plain), Err(Error::Format(_))));
}

#[test]
fn only_generation_side_moves_each_step() {
    let mut t = trainer(8);
    let infos = param_infos(1);
    for _ in 0..3 {
        let before = t.params.clone();
        t.step().unwrap();
        let mut moved_gen = false;
        for ((info, a), (_, b)) in before.named().into_iter().zip(t.params.named()) {
            if info.group.is_und_side() {
                assert!(a.bit_eq(b), "{} moved", info.name);
            } else if !a.bit_eq(b) {
                moved_gen = true;
            }
        }
        assert!(moved_gen);
    }
    assert!(t.optimizer.names.iter().all(|n| {
        let i = infos.iter().find(|i| &i.name == n).unwrap();
        !i.group.is_und_side()
    }));
    let report = t.frozen_report();
    assert!(report.passed() && !report.checked.is_empty());
    t.finish().unwrap();
}

#[test]
fn frozen_drift_is_a_hard_failure() {
    let mut t = trainer(8);
    t.step().unwrap();
    let (idx, info) = param_infos(1).into_iter().enumerate().find(|(_, i)| i.group.is_und_side()).unwrap();
    t.params.weights.values_mut()[idx].data_mut()[0] += 1e-6;
    let report = t.frozen_report();
    assert_eq!(report.mismatched, vec![info.name.clone()]);
    let err = t.finish().unwrap_err().to_string();
    assert!(err.contains(&info.name), "{err}");
}

#[test]
fn understanding_mode_moves_only_the_understanding_side() {
    let cfg = PretrainConfig {
        learning_rate: 3e-3,
        steps: 2,
        batch_size: 4,
        warmup_steps: 1,
    };
    let p0 = tiny(Architecture::MoT);
    let mut t = Trainer::new(p0.clone(), world(), cfg.stage(), 1, TrainMode::Understanding).unwrap();
    t.run(None, |_| Ok(())).unwrap();
    for ((info, a), (_, b)) in p0.named().into_iter().zip(t.params.named()) {
        if !info.group.is_und_side() {
            assert!(a.bit_eq(b), "{}", info.name);
        }
    }
    let p = pretrain_understanding(p0, world(), &cfg, 1, |_| Ok(())).unwrap();
    assert_eq!(bits(&p), {
        let mut q = t.params.clone();
        q.copy_und_to_gen();
        bits(&q)
    });
}

#[test]
fn dense_trains_the_shared_blocks() {
    let mut t = Trainer::new(tiny(Architecture::Dense), world(), stage(12, 6), 4, TrainMode::Generation).unwrap();
    let before = t.params.clone();
    t.run(None, |_| Ok(())).unwrap();
    let changed: Vec<_> = before
        .named()
        .into_iter()
        .zip(t.params.named())
        .filter(|((_, a), (_, b))| !a.bit_eq(b))
        .map(|((i, _), _)| i.group)
        .collect();
    assert!(changed.contains(&crate::model::Group::UndBlock));
    assert!(!changed.contains(&crate::model::Group::GenBlock));
}

#[test]
fn per_task_losses_follow_the_mix() {
    // One full 14:2:1 cycle per batch.
    let mut t = Trainer::new(tiny(Architecture::MoT), world(), stage(17, 17), 9, TrainMode::Generation).unwrap();
    let log = t.step().unwrap();
    for task in [TaskKind::T2I, TaskKind::I2T, TaskKind::Edit] {
        let l = log.loss(task).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }
    assert_eq!(log.loss(TaskKind::TextOnly), None);
    assert_eq!(log.lr, lr_at(1, &t.stage));
    assert_eq!(log.step, 1);
}

#[test]
fn held_out_loss_drops_on_a_short_run() {
    let st = StageConfig {
        learning_rate: 1e-2,
        warmup_steps: 2,
        total_samples: 30 * 8,
        batch_size: 8,
        mix: MixSpec::single(TaskKind::T2I),
        i2t_via_gen: false,
        ..StageConfig::stage1()
    };
    let held = HeldOut::new(world(), TaskKind::T2I, 8, 1, RoutingPolicy::default()).unwrap();
    let mut t = Trainer::new(tiny(Architecture::MoT), world(), st, 3, TrainMode::Generation).unwrap();
    let before = held.loss(&t.params).unwrap();
    t.run(None, |_| Ok(())).unwrap();
    let after = held.loss(&t.params).unwrap();
    assert!(after < 0.7 * before, "{before} -> {after}");
}

#[test]
fn held_out_seeds_differ_from_training_seeds() {
    let a = HeldOut::new(world(), TaskKind::T2I, 4, 1, RoutingPolicy::default()).unwrap();
    let b = HeldOut::new(world(), TaskKind::T2I, 4, 1, RoutingPolicy::default()).unwrap();
    assert_eq!(a.sequences, b.sequences);
    let train = crate::data::gen_sample(crate::data::sample_seed(1, 0), TaskKind::T2I, world()).unwrap();
    assert_ne!(a.sequences[0].tokens, train.sequence.tokens);
}

#[test]
fn metrics_csv_has_header_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut t = trainer(1);
    {
        let mut m = MetricsLog::append(&path).unwrap();
        t.run(Some(2), |s| m.write(s)).unwrap();
    }
    {
        let mut m = MetricsLog::append(&path).unwrap();
        t.run(Some(3), |s| m.write(s)).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER.join(","));
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,stage1,"));
    assert_eq!(lines[1].split(',').count(), 8);
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let mut p = tiny(Architecture::MoT);
    p.config.layout.text += 1;
    assert!(Trainer::new(p, world(), stage(6, 6), 0, TrainMode::Generation).is_err());
    let bad = StageConfig {
        batch_size: 0,
        ..stage(6, 6)
    };
    assert!(Trainer::new(tiny(Architecture::MoT), world(), bad, 0, TrainMode::Generation).is_err());
}
