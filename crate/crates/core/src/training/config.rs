use serde::{Deserialize, Serialize};

use crate::data::{MixSpec, TaskKind};
use crate::error::{Error, Result};
use crate::model::RoutingPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// One training stage. The `stage1/2/3` presets keep the optimizer settings
/// of the reference recipe and scale only sample counts, warmup and batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub total_samples: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mix: MixSpec,
    pub routing: RoutingPolicy,
    /// Stage-1 variant: I2T images enter as generation blocks.
    pub i2t_via_gen: bool,
    /// Background levels samples are drawn from.
    pub backgrounds: Vec<f32>,
    /// Concept indices to draw from; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<usize>,
}

impl StageConfig {
    fn base(name: &str) -> Self {
        Self {
            name: name.into(),
            learning_rate: 5e-5,
            schedule: Schedule::Cosine,
            warmup_steps: 200,
            total_samples: 50_000,
            batch_size: 32,
            grad_clip: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mix: MixSpec::single(TaskKind::T2I),
            routing: RoutingPolicy::default(),
            i2t_via_gen: false,
            backgrounds: vec![0.0],
            concepts: Vec::new(),
        }
    }

    /// Unified pretraining: T2I:I2T:IL = 14:2:1, I2T images through the generation side.
    pub fn stage1() -> Self {
        Self {
            mix: MixSpec {
                entries: vec![(TaskKind::T2I, 14), (TaskKind::I2T, 2), (TaskKind::Edit, 1)],
            },
            i2t_via_gen: true,
            ..Self::base("stage1")
        }
    }

    /// Continued pretraining on harder samples (varied backgrounds), 7:2:1.
    pub fn stage2() -> Self {
        Self {
            learning_rate: 1.25e-5,
            total_samples: 10_000,
            batch_size: 16,
            mix: MixSpec {
                entries: vec![(TaskKind::T2I, 7), (TaskKind::I2T, 2), (TaskKind::Edit, 1)],
            },
            backgrounds: crate::data::FIT_BACKGROUNDS.to_vec(),
            ..Self::base("stage2")
        }
    }

    /// Fine-tuning: T2I:EDIT:I2T:IL = 4:3:2:1, constant schedule, tight clipping.
    pub fn stage3() -> Self {
        Self {
            learning_rate: 1.25e-5,
            schedule: Schedule::Constant,
            warmup_steps: 10,
            total_samples: 5_000,
            batch_size: 16,
            grad_clip: 0.1,
            mix: MixSpec {
                entries: vec![
                    (TaskKind::T2I, 4),
                    (TaskKind::Edit, 3),
                    (TaskKind::I2T, 2),
                    (TaskKind::Edit, 1),
                ],
            },
            backgrounds: crate::data::FIT_BACKGROUNDS.to_vec(),
            ..Self::base("stage3")
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "stage1" | "1" => Some(Self::stage1()),
            "stage2" | "2" => Some(Self::stage2()),
            "stage3" | "3" => Some(Self::stage3()),
            _ => None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.total_samples.div_ceil(self.batch_size.max(1) as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.total_samples == 0 {
            return bad("total_samples", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps/weight_decay", "eps must be positive and weight_decay non-negative");
        }
        if self.backgrounds.is_empty() {
            return bad("backgrounds", "needs at least one level");
        }
        self.mix.validate()
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at the last step
/// (or a constant plateau).
pub fn lr_at(step: u64, cfg: &StageConfig) -> f64 {
    let peak = cfg.learning_rate;
    let w = cfg.warmup_steps;
    if step < w {
        return peak * step as f64 / w as f64;
    }
    match cfg.schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let total = cfg.total_steps();
            if total <= w {
                return peak;
            }
            let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_recipe_values() {
        let s: Vec<_> = [StageConfig::stage1(), StageConfig::stage2(), StageConfig::stage3()].into();
        assert_eq!(s.iter().map(|c| c.learning_rate).collect::<Vec<_>>(), vec![5e-5, 1.25e-5, 1.25e-5]);
        assert_eq!(
            s.iter().map(|c| c.schedule).collect::<Vec<_>>(),
            vec![Schedule::Cosine, Schedule::Cosine, Schedule::Constant]
        );
        assert_eq!(s.iter().map(|c| c.grad_clip).collect::<Vec<_>>(), vec![1.0, 1.0, 0.1]);
        assert_eq!(s.iter().map(|c| c.warmup_steps).collect::<Vec<_>>(), vec![200, 200, 10]);
        assert_eq!(s.iter().map(|c| c.total_samples).collect::<Vec<_>>(), vec![50_000, 10_000, 5_000]);
        assert_eq!(s.iter().map(|c| c.batch_size).collect::<Vec<_>>(), vec![32, 16, 16]);
        assert_eq!(
            s.iter().map(|c| c.mix.ratio_label()).collect::<Vec<_>>(),
            vec!["14:2:1", "7:2:1", "4:3:2:1"]
        );
        for c in &s {
            assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.999, 1e-4));
            c.validate().unwrap();
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = StageConfig::stage1();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(c.warmup_steps, &c), c.learning_rate);
        assert_eq!(lr_at(c.total_steps(), &c), 0.0);
        let c3 = StageConfig::stage3();
        for s in c3.warmup_steps..c3.total_steps() + 5 {
            assert_eq!(lr_at(s, &c3), c3.learning_rate);
        }
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        let c = StageConfig {
            total_samples: 2 * 32 * 1000,
            ..StageConfig::stage1()
        };
        let mid = c.warmup_steps + (c.total_steps() - c.warmup_steps) / 2;
        assert_eq!((c.total_steps() - c.warmup_steps) % 2, 0);
        assert!((lr_at(mid, &c) - c.learning_rate / 2.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_matches_closed_form_at_every_step() {
        for c in [StageConfig::stage1(), StageConfig::stage2(), StageConfig::stage3()] {
            let (w, t, lr) = (c.warmup_steps as f64, c.total_steps() as f64, c.learning_rate);
            for s in 0..=c.total_steps() {
                let x = s as f64;
                let want = if x < w {
                    lr * x / w
                } else if c.schedule == Schedule::Constant {
                    lr
                } else {
                    lr * (1.0 + (std::f64::consts::PI * (x - w) / (t - w)).cos()) / 2.0
                };
                assert!((lr_at(s, &c) - want).abs() <= 1e-15, "{} step {s}", c.name);
            }
        }
    }

    #[test]
    fn validation_names_the_field() {
        let c = StageConfig {
            learning_rate: f64::NAN,
            ..StageConfig::stage1()
        };
        assert!(c.validate().unwrap_err().to_string().contains("learning_rate"));
        let c = StageConfig {
            batch_size: 0,
            ..StageConfig::stage1()
        };
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));
    }

    #[test]
    fn config_serializes_with_field_names() {
        let c = StageConfig::stage3();
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["learning_rate"], 1.25e-5);
        assert_eq!(j["schedule"], "constant");
        assert_eq!(j["mix"]["entries"][0][0], "t2i");
        let back: StageConfig = serde_json::from_value(j).unwrap();
        assert_eq!(back, c);
    }
}
