//! Finite-difference gradient checking against the f64 shadow evaluation.
//!
//! The tape's backward pass is verified by perturbing leaf coordinates and
//! re-evaluating the loss in 64-bit arithmetic, so the numeric derivative is
//! independent of the f32 storage noise it is checking.

use super::graph::{Graph, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Central finite-difference gradient of a scalar `loss` w.r.t. every
/// coordinate of the leaf `v`, evaluated on the f64 shadow.
pub fn fd_gradient(g: &Graph, loss: Var, v: Var, step: f64) -> Vec<f64> {
    let base: Vec<f64> = g.value(v).data().iter().map(|&x| x as f64).collect();
    (0..base.len())
        .map(|j| fd_coordinate(g, loss, v, &base, j, step))
        .collect()
}

/// Finite difference along a single coordinate of leaf `v`.
pub fn fd_coordinate(g: &Graph, loss: Var, v: Var, base: &[f64], j: usize, step: f64) -> f64 {
    let mut plus = base.to_vec();
    plus[j] += step;
    let fp = g.eval_f64(loss, &[(v, &plus)])[0];
    let mut minus = base.to_vec();
    minus[j] -= step;
    let fm = g.eval_f64(loss, &[(v, &minus)])[0];
    (fp - fm) / (2.0 * step)
}

/// Largest relative disagreement between an analytic gradient and its
/// finite-difference estimate. Coordinates where both are below `atol`
/// count as agreeing.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            let mag = a.abs().max(n.abs());
            if mag < atol {
                0.0
            } else {
                (a - n).abs() / mag
            }
        })
        .fold(0.0, f64::max)
}

/// Run backward once and compare the gradient of each listed leaf against
/// central finite differences. Returns the worst relative error seen.
///
/// Panics with context if any leaf is missing a gradient.
pub fn check_gradients(g: &mut Graph, loss: Var, leaves: &[(&str, Var)], step: f64) -> f64 {
    g.backward(loss).expect("backward failed in gradient check");
    let mut worst = 0.0f64;
    for (name, v) in leaves {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| panic!("no gradient reached leaf '{name}'"));
        let numeric = fd_gradient(g, loss, *v, step);
        let err = max_rel_err(analytic, &numeric, 1e-6);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Like [`check_gradients`] but only probing `samples` evenly spread
/// coordinates per leaf; used for end-to-end checks where the full Jacobian
/// probe would be slow.
pub fn check_gradients_sampled(
    g: &mut Graph,
    loss: Var,
    leaves: &[(&str, Var)],
    step: f64,
    samples: usize,
) -> f64 {
    g.backward(loss).expect("backward failed in gradient check");
    let mut worst = 0.0f64;
    for (name, v) in leaves {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| panic!("no gradient reached leaf '{name}'"));
        let base: Vec<f64> = g.value(*v).data().iter().map(|&x| x as f64).collect();
        let n = base.len();
        let picks = samples.min(n).max(1);
        for s in 0..picks {
            let j = s * n / picks;
            let numeric = fd_coordinate(g, loss, *v, &base, j, step);
            let err = max_rel_err(&analytic[j..=j], &[numeric], 1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
