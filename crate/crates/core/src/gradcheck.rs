//! Central-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::RngState;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter;
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Relative error used throughout: `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the autodiff gradient of the scalar built by `f` against central
/// differences `(f(p+eps) − f(p−eps)) / 2eps` for every parameter in `store`
/// (or the subset in `only`). `f` must be deterministic.
pub fn grad_check<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::arg(format!("grad_check eps {} outside [1e-6, 1e-3]", opts.eps)));
    }
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let grads = g.backward(root)?;
    drop(g);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut rng = RngState::new(opts.seed);
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let v = f(&mut g, store)?;
        Ok(g.value(v).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = grads.param(id).map(|t| t.data()[c]).unwrap_or(0.0);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::scalar(3.0)).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-4,
            ..Default::default()
        };
        let r = grad_check(&mut store, None, &opts, |g, s| {
            let x = g.param(s, p);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let p = store
            .add("w", Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap())
            .unwrap();
        let opts = GradCheckOptions {
            eps: 1e-4,
            ..Default::default()
        };
        let r = grad_check(&mut store, None, &opts, |g, s| {
            let x = g.param(s, p);
            let y = g.scale(x, 1.75);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0)).unwrap();
        let opts = GradCheckOptions {
            eps: 0.1,
            ..Default::default()
        };
        let r = grad_check(&mut store, None, &opts, |g, _| Ok(g.constant(Tensor::scalar(1.0))));
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
