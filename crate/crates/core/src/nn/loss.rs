//! Loss functions and their closed-form gradients.

pub const VARIANCE_MIN: f64 = 1e-6;
pub const VARIANCE_MAX: f64 = 1e6;
pub const PROB_MIN: f64 = 1e-7;
pub const PROB_MAX: f64 = 1.0 - 1e-7;

/// `exp(raw)` clamped to `[VARIANCE_MIN, VARIANCE_MAX]`.
pub fn variance_from_raw(raw: f64) -> f64 {
    raw.clamp(VARIANCE_MIN.ln(), VARIANCE_MAX.ln()).exp()
}

fn raw_in_range(raw: f64) -> bool {
    raw > VARIANCE_MIN.ln() && raw < VARIANCE_MAX.ln()
}

/// Mean over joints of `err / var + ln var`, where `err` is the squared 3D
/// distance of the joint. `pred` and `target` hold three coordinates per
/// entry of `variance`.
pub fn heteroscedastic_nll(pred: &[f64], target: &[f64], variance: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), 3 * variance.len());
    let total: f64 = pred
        .chunks_exact(3)
        .zip(target.chunks_exact(3))
        .zip(variance)
        .map(|((p, t), &v)| {
            let err: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            err / v + v.ln()
        })
        .sum();
    total / variance.len() as f64
}

/// Gradients of [`heteroscedastic_nll`] with respect to `pred` and the raw
/// log-variances. The clamp has zero slope outside its range.
pub fn heteroscedastic_nll_grad(pred: &[f64], target: &[f64], raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = raw.len() as f64;
    let mut dp = vec![0.0; pred.len()];
    let mut dr = vec![0.0; raw.len()];
    for (k, &r) in raw.iter().enumerate() {
        let v = variance_from_raw(r);
        let mut err = 0.0;
        for c in 0..3 {
            let d = pred[3 * k + c] - target[3 * k + c];
            err += d * d;
            dp[3 * k + c] = 2.0 * d / (v * n);
        }
        if raw_in_range(r) {
            dr[k] = (1.0 - err / v) / n;
        }
    }
    (dp, dr)
}

/// Mean over cells of `-(w t ln p + (1 - t) ln(1 - p))` with `p` clamped.
pub fn weighted_bce(prob: &[f64], target: &[f64], pos_weight: f64) -> f64 {
    debug_assert_eq!(prob.len(), target.len());
    let total: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_MIN, PROB_MAX);
            -(pos_weight * t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / prob.len() as f64
}

pub fn weighted_bce_grad(prob: &[f64], target: &[f64], pos_weight: f64) -> Vec<f64> {
    let n = prob.len() as f64;
    prob.iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p > PROB_MIN && p < PROB_MAX {
                (-pos_weight * t / p + (1.0 - t) / (1.0 - p)) / n
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_variance_reduces_to_mean_squared_joint_error() {
        let pred = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        let target = [0.0; 6];
        let loss = heteroscedastic_nll(&pred, &target, &[1.0, 1.0]);
        assert!((loss - 2.5).abs() < 1e-15);
        assert_eq!(heteroscedastic_nll(&target, &target, &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn variance_clamp_bounds() {
        assert_eq!(variance_from_raw(0.0), 1.0);
        assert!((variance_from_raw(-50.0) - VARIANCE_MIN).abs() < 1e-18);
        assert!((variance_from_raw(50.0) - VARIANCE_MAX).abs() < 1e-6);
    }

    #[test]
    fn bce_perfect_prediction_is_at_clamp_floor() {
        let t = [0.0, 1.0, 1.0, 0.0];
        let loss = weighted_bce(&t, &t, 25.0);
        // Each saturated cell costs at most w * -ln(1 - 1e-7).
        assert!(loss <= 25.0 * 1.1e-7, "{loss}");
    }

    #[test]
    fn bce_never_non_finite() {
        let p = [0.0, 1.0, 0.5, 1e-300];
        let t = [1.0, 0.0, 0.3, 1.0];
        assert!(weighted_bce(&p, &t, 25.0).is_finite());
        assert!(weighted_bce_grad(&p, &t, 25.0).iter().all(|g| g.is_finite()));
    }
}
