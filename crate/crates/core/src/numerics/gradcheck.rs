use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients of `f` against central differences with step `h`.
///
/// `f` receives the graph and one leaf per entry of `params` (in order) and
/// returns a scalar loss. Checks every coordinate when there are at most
/// `samples` of them, otherwise a seeded uniform sample of `samples` coordinates.
/// The per-coordinate error is `|a - fd| / (|a| + |fd| + 1e-12)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p, false)).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p, true)).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(|p| p.len()).sum();
    let coords: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, total, samples).into_vec();
        c.sort_unstable();
        c
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in coords {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[pi];
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + h;
        let up = eval(&work)?;
        work[pi].data_mut()[ci] = orig - h;
        let down = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[pi].data()[ci];
        let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((pi, ci));
        }
    }
    Ok(report)
}
