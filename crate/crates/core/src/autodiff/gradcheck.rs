use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    /// Set when the loss was non-finite at some perturbed point.
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| !p.non_finite && p.max_rel_err < self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares tape gradients of `f` against central differences with the given
/// step, for every entry of the parameters in `ids`.
///
/// `f` builds a scalar loss on the graph it is handed and must be
/// deterministic in the store contents.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &ParameterStore,
    ids: &[ParamId],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::with_trainable(ids.iter().copied());
    let root = f(&mut g, params)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let v = g.param(params, id);
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.value(id).len()])
        })
        .collect();

    let mut probe = params.clone();
    let mut eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        Ok(g.value(root).item())
    };

    let mut report = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            non_finite: false,
        };
        for k in 0..grad.len() {
            let original = probe.values(id)[k];
            probe.values_mut(id)[k] = original + step;
            let up = eval(&probe)?;
            probe.values_mut(id)[k] = original - step;
            let down = eval(&probe)?;
            probe.values_mut(id)[k] = original;
            if !up.is_finite() || !down.is_finite() {
                check.non_finite = true;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grad[k], numeric);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = k;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParameterStore::new();
        let id = store
            .add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let report =
            finite_difference_check(|g, _| Ok(g.scalar(4.0)), &store, &[id], 1e-5, 1e-4).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn mean_tanh_of_matvec_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wid = store.add("w", Tensor::matrix(3, 3, w).unwrap()).unwrap();
        let report = finite_difference_check(
            |g, s| {
                let w = g.param(s, wid);
                let x = g.constant(Tensor::matrix(3, 1, x.clone())?);
                let h = g.matmul(w, x)?;
                let t = g.tanh(h);
                Ok(g.mean(t))
            },
            &store,
            &[wid],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu(x) at x = 0 uses the zero branch; the central difference sees 1/2.
        let mut store = ParameterStore::new();
        let id = store.add("x", Tensor::scalar(0.0)).unwrap();
        let report = finite_difference_check(
            |g, s| {
                let x = g.param(s, id);
                Ok(g.relu(x))
            },
            &store,
            &[id],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_is_reported() {
        let mut store = ParameterStore::new();
        let id = store.add("x", Tensor::scalar(0.0)).unwrap();
        let report = finite_difference_check(
            |g, s| {
                let x = g.param(s, id);
                let e = g.exp(x);
                let big = g.scale(e, f64::INFINITY);
                Ok(g.sum(big))
            },
            &store,
            &[id],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.params[0].non_finite);
        assert!(!report.passed());
    }
}
