use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many entries per tensor (chosen uniformly); `None` checks all.
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_entries_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_and_grad` must accumulate gradients into the store (they are zeroed
/// first); `loss` evaluates the same objective without touching gradients.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<L, G>(
    store: &mut ParamStore,
    mut loss: L,
    mut loss_and_grad: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grad();
    loss_and_grad(store)?;
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).to_vec()).collect();
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (&id, grads) in ids.iter().zip(&analytic) {
        let n = grads.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + opts.step;
            let up = loss(store)?;
            store.value_mut(id)[i] = orig - opts.step;
            let down = loss(store)?;
            store.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_owned();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
