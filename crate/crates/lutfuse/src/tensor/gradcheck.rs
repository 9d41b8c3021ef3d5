//! Central finite-difference gradient checking in widened (f64) precision.
//!
//! The forward closure is instantiated on an f64 graph; the check re-runs it
//! at perturbed inputs and compares the difference quotient against the
//! recorded backward pass. Parameter storage stays f32 — inputs are widened
//! once at the boundary.

use crate::tensor::{GraphT, Tensor, Var};

type G64 = GraphT<f64>;

/// Worst-case report for one input tensor.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient of `f` with central finite differences at
/// step `h`. `f` builds a fresh graph from the given inputs and returns the
/// scalar loss var.
pub fn check(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut G64, &[Var]) -> Var,
) -> Vec<GradCheck> {
    let widened: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = G64::new();
        let vars: Vec<Var> = data
            .iter()
            .zip(inputs)
            .map(|(d, t)| g.constant(d.clone(), t.shape().to_vec()))
            .collect();
        let loss = f(&mut g, &vars);
        g.value(loss)
    };

    // analytic gradients; every input is tracked regardless of its flag
    let mut g = G64::new();
    let vars: Vec<Var> = widened
        .iter()
        .zip(inputs)
        .map(|(d, t)| g.leaf_grad(d.clone(), t.shape().to_vec()))
        .collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).expect("gradcheck backward failed");

    let mut reports = Vec::with_capacity(inputs.len());
    for (pi, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[pi])
            .unwrap_or_else(|| panic!("input {pi} received no gradient"));
        let mut worst = GradCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for ei in 0..t.numel() {
            let orig = widened[pi][ei];
            let mut plus = widened.clone();
            plus[pi][ei] = orig + h;
            let mut minus = widened.clone();
            minus[pi][ei] = orig - h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: rel,
                    worst_index: ei,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(worst);
    }
    reports
}

/// Asserts every input's gradient matches finite differences within `tol`
/// relative error.
pub fn assert_grads(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    f: impl Fn(&mut G64, &[Var]) -> Var,
) {
    for (pi, rep) in check(inputs, h, f).iter().enumerate() {
        assert!(
            rep.max_rel_err <= tol,
            "input {pi} element {} gradient mismatch: analytic {} vs numeric {} (rel {:.3e} > {:.1e})",
            rep.worst_index,
            rep.analytic,
            rep.numeric,
            rep.max_rel_err,
            tol
        );
    }
}
