//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Coordinates whose absolute error is at or below this floor always pass.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (sampled deterministically).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Outcome for one named parameter tensor.
///
/// `max_rel_error` is taken over coordinates whose absolute error exceeds the
/// floor, so `pass == (max_rel_error <= tol || max_abs_error <= floor)`.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compares `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` coordinate by coordinate.
pub fn grad_check<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    cfg: &GradCheckConfig,
    mut loss: F,
) -> Result<Vec<GradReport>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = params.names().cloned().collect();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic.get(&name)?;
        if grad.len() != n {
            return Err(Error::Shape(format!("analytic gradient for `{name}`")));
        }
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &coords {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + cfg.eps;
            let plus = loss(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - cfg.eps;
            let minus = loss(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss at perturbed `{name}`[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs > cfg.abs_floor {
                max_rel = max_rel.max(abs / a.abs().max(numeric.abs()));
            }
        }
        reports.push(GradReport {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            checked: coords.len(),
            pass: max_rel <= cfg.rel_tol || max_abs <= cfg.abs_floor,
        });
    }
    Ok(reports)
}
