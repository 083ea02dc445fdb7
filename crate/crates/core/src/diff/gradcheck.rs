//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Absolute floor of the relative-error denominator. Entries whose true gradient
/// is below this are compared in absolute terms, where finite-difference
/// round-off (≈ ulp(f) / h) would otherwise dominate.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `f` against central
/// finite differences, for every element of every tensor in `params`.
pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(params, usize::MAX, 0, f)
}

/// Like [`grad_check`] but checks at most `max_per_tensor` randomly chosen
/// elements of each tensor.
pub fn grad_check_sampled<F>(
    params: &[Tensor],
    max_per_tensor: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return dim_err("grad_check: function must return a single value");
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (ti, param) in params.iter().enumerate() {
        let n = param.numel();
        let indices: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, max_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        for ei in indices {
            let orig = param.data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[ei];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
