use crate::error::{Error, Result};

/// AdamW coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for the trainable tensors only, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(tensors: &[(String, usize)]) -> Self {
        Self {
            step: 0,
            names: tensors.iter().map(|(n, _)| n.clone()).collect(),
            m: tensors.iter().map(|&(_, len)| vec![0.0; len]).collect(),
            v: tensors.iter().map(|&(_, len)| vec![0.0; len]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when under the limit).
    pub clip_scale: f64,
}

/// Factor that brings a gradient of norm `norm` under `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// One clipped, bias-corrected AdamW update with decoupled weight decay.
/// `params[i]` and `grads[i]` must match `state.m[i]` in length. Nothing is
/// modified when a gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    lr: f64,
    clip: f64,
    hp: &AdamW,
) -> Result<StepStats> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameter and {} gradient tensors for {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        if g.len() != state.m[i].len() || params[i].len() != g.len() {
            return Err(Error::Dimension(format!("tensor {} changed size", state.names[i])));
        }
        for &x in g.iter() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {}", state.names[i])));
            }
            sq += x as f64 * x as f64;
        }
    }
    let grad_norm = sq.sqrt();
    let scale = clip_scale(grad_norm, clip);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in params[i].iter_mut().enumerate() {
            let gj = g[j] as f64 * scale;
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + hp.eps);
            let w = *p as f64;
            *p = (w - lr * (update + hp.weight_decay * w)) as f32;
        }
    }
    Ok(StepStats {
        grad_norm,
        clip_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(len: usize) -> OptimizerState {
        OptimizerState::new(&[("w".into(), len)])
    }

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        let mut st = state(3);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&[0.0; 3]], &mut st, 1e-2, 1.0, &hp).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = -lr g / (|g| + eps).
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for g in [0.3f32, -2.0, 0.5] {
            let mut p = [1.0f32];
            let mut st = state(1);
            adamw_step(&mut [&mut p], &[&[g]], &mut st, 1e-3, 10.0, &hp).unwrap();
            let want = 1.0 - 1e-3 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((p[0] as f64 - want).abs() < 1e-7, "{g}");
        }
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = [0.0f32];
        let mut st = state(1);
        for k in 1..=10 {
            adamw_step(&mut [&mut p], &[&[0.7]], &mut st, 0.01, 10.0, &hp).unwrap();
            assert!((p[0] as f64 + 0.01 * k as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_weight_decay() {
        let hp = AdamW::default();
        let mut p = [2.0f32];
        let mut st = state(1);
        adamw_step(&mut [&mut p], &[&[0.0]], &mut st, 0.1, 1.0, &hp).unwrap();
        assert!((p[0] as f64 - (2.0 - 0.1 * 1e-4 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn clipping_scales_to_the_limit() {
        // Norm 10 over two tensors; clip 1 scales by exactly 0.1.
        assert_eq!(clip_scale(10.0, 1.0), 0.1);
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        let mut a = [0.0f32];
        let mut b = [0.0f32];
        let mut st = OptimizerState::new(&[("a".into(), 1), ("b".into(), 1)]);
        let s = adamw_step(&mut [&mut a, &mut b], &[&[6.0], &[8.0]], &mut st, 0.0, 1.0, &AdamW::default()).unwrap();
        assert_eq!(s.grad_norm, 10.0);
        assert_eq!(s.clip_scale, 0.1);
        assert!((st.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((st.m[1][0] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let mut p = [1.0f32, 2.0];
        let mut st = state(2);
        let err = adamw_step(&mut [&mut p], &[&[0.1, f32::NAN]], &mut st, 0.1, 1.0, &AdamW::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(st, state(2));
    }
}
