//! Inverse-multiquadratics MMD estimates between encoded codes and prior samples.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diff::{Graph, Var};
use crate::error::{NdfError, Result};
use crate::tensor::Tensor;

/// `C / (C + ‖a − b‖²)`.
pub fn imq(a: &[f64], b: &[f64], scale: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "imq: dimension mismatch");
    let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    scale / (scale + dist)
}

/// Unbiased U-statistic estimate of MMD² between the rows of `post` and
/// `prior` (both `[n, d]`), differentiable in both.
pub fn mmd_u_statistic_graph(g: &mut Graph, post: Var, prior: Var, scale: f64) -> Result<Var> {
    let (sp, sq) = (g.shape(post).to_vec(), g.shape(prior).to_vec());
    if sp.len() != 2 || sp != sq {
        return Err(NdfError::Dimension(format!("mmd: codes {sp:?} vs prior {sq:?}")));
    }
    let n = sp[0];
    if n < 2 {
        return Err(NdfError::Arity(format!("mmd needs at least 2 samples per set, got {n}")));
    }
    let within = 1.0 / (n * (n - 1)) as f64;
    let off_diag: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 0.0 } else { within })
        .collect();
    let kxx = g.imq_kernel(post, post, scale)?;
    let kyy = g.imq_kernel(prior, prior, scale)?;
    let kxy = g.imq_kernel(post, prior, scale)?;
    let a = g.weighted_sum(kxx, off_diag.clone())?;
    let b = g.weighted_sum(kyy, off_diag)?;
    let c = g.weighted_sum(kxy, vec![-2.0 / (n * n) as f64; n * n])?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Value-only form of [`mmd_u_statistic_graph`].
pub fn mmd_u_statistic(post: &Tensor, prior: &Tensor, scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(post.clone());
    let q = g.constant(prior.clone());
    let v = mmd_u_statistic_graph(&mut g, p, q, scale)?;
    Ok(g.value(v).item())
}

/// Row indices of each class in `labels`.
pub fn class_rows(labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut rows = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(NdfError::Label {
                label: l,
                n_classes,
            });
        }
        rows[l].push(i);
    }
    Ok(rows)
}

/// Fresh `N(0, I)` samples for each class, as many as the class has codes in
/// the batch.
pub fn sample_class_priors(
    rng: &mut impl Rng,
    labels: &[usize],
    n_classes: usize,
    d_z: usize,
) -> Result<Vec<Tensor>> {
    class_rows(labels, n_classes)?
        .iter()
        .map(|rows| {
            let n = rows.len().max(1);
            let data = (0..n * d_z).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(&[n, d_z], data)
        })
        .collect()
}

/// `D_Z = (1/C) Σ_c MMD²(prior_c, codes of class c)`.
///
/// Every class must be present in the batch with at least two codes, and
/// `priors[c]` must hold as many rows as class `c` has codes.
pub fn per_class_regularizer(
    g: &mut Graph,
    z: Var,
    labels: &[usize],
    priors: &[Tensor],
    scale: f64,
) -> Result<Var> {
    let n_classes = priors.len();
    if n_classes == 0 {
        return Err(NdfError::Arity("regularizer needs at least one class".into()));
    }
    let rows = class_rows(labels, n_classes)?;
    let mut total: Option<Var> = None;
    for (c, (rows, prior)) in rows.iter().zip(priors).enumerate() {
        if rows.len() < 2 {
            return Err(NdfError::Arity(format!(
                "class {c} has {} codes in the batch; at least 2 are required",
                rows.len()
            )));
        }
        if prior.shape()[0] != rows.len() {
            return Err(NdfError::Dimension(format!(
                "class {c}: {} prior samples for {} codes",
                prior.shape()[0],
                rows.len()
            )));
        }
        let zc = g.select_rows(z, rows)?;
        let pc = g.constant(prior.clone());
        let term = mmd_u_statistic_graph(g, zc, pc, scale)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.expect("at least one class");
    Ok(g.mul_scalar(total, 1.0 / n_classes as f64))
}
