use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor2};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter; parameters with fewer are checked in full.
    pub coords_per_param: usize,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding compare on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            coords_per_param: 16,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `eval` returns the loss and, for each parameter id it differentiates, the
/// analytic gradient. Parameters missing from the analytic set are treated
/// as having zero gradient.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut eval: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Tensor2)>)>,
{
    let (_, analytic) = eval(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.value(id).dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= cfg.coords_per_param {
            (0..total).collect()
        } else {
            sample(&mut rng, total, cfg.coords_per_param).into_vec()
        };
        let grad = analytic
            .iter()
            .filter(|(pid, _)| *pid == id)
            .fold(None::<Tensor2>, |acc, (_, g)| match acc {
                Some(a) => Some(a + g),
                None => Some(g.clone()),
            });
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + cfg.h;
            let plus = eval(store)?.0;
            store.value_mut(id)[[r, c]] = orig - cfg.h;
            let minus = eval(store)?.0;
            store.value_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let exact = grad.as_ref().map_or(0.0, |g| g[[r, c]]);
            let denom = exact.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (exact - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), r, c));
            }
        }
    }
    Ok(report)
}
