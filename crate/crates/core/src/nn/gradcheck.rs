//! Central finite-difference checks for tape gradients.

use rand::Rng;

use super::params::{Gradients, ParameterStore};

/// Magnitudes below this are compared absolutely: central differences carry
/// roughly `1e-16 * |f| / eps` of rounding noise.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
        }
        self.checked += 1;
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against central differences of `loss`, probing at most
/// `per_param` randomly chosen entries of every parameter.
pub fn check_params<R: Rng>(
    store: &mut ParameterStore,
    analytic: &Gradients,
    loss: impl Fn(&ParameterStore) -> f64,
    eps: f64,
    per_param: usize,
    rng: &mut R,
) -> GradCheck {
    let mut report = GradCheck::default();
    for id in 0..store.len() {
        let n = store.get(id).data.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + eps;
            let plus = loss(store);
            store.get_mut(id).data[k] = orig - eps;
            let minus = loss(store);
            store.get_mut(id).data[k] = orig;
            report.record(analytic.get(id)[k], (plus - minus) / (2.0 * eps));
        }
    }
    report
}

/// Same as [`check_params`] for a plain input vector.
pub fn check_input(x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64, eps: f64) -> GradCheck {
    let mut report = GradCheck::default();
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + eps;
        let plus = loss(&probe);
        probe[k] = x[k] - eps;
        let minus = loss(&probe);
        probe[k] = x[k];
        report.record(analytic[k], (plus - minus) / (2.0 * eps));
    }
    report
}
