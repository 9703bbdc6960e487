//! BFGS with a backtracking Armijo line search.
//!
//! Accepted iterates never increase the objective. Points where the
//! objective is undefined (the closure returns `None`) are rejected by the
//! line search.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the gradient ∞-norm.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub history: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Minimizes `f`, which returns the objective value and gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x.as_slice()).filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()))?;
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut history = alloc::vec![fx];
    let mut iterations = 0;

    loop {
        let grad_inf = g.amax();
        if grad_inf < opts.grad_tol {
            return Some(done(x, fx, grad_inf, iterations, true, history));
        }
        if iterations >= opts.max_iter {
            return Some(done(x, fx, grad_inf, iterations, false, history));
        }

        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = if fresh { (1.0 / grad_inf).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = f(trial.as_slice()) {
                if ft.is_finite() && gt.iter().all(|c| c.is_finite()) && ft <= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                // Steepest descent could not make progress either.
                return Some(done(x, fx, grad_inf, iterations, false, history));
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← H + ρ²(sᵀy + yᵀHy) ssᵀ − ρ(H y sᵀ + s yᵀH)
            h += (&s * s.transpose()) * (rho * rho * (sy + yhy));
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
        history.push(fx);
    }
}

fn done(x: DVector<f64>, value: f64, grad_inf: f64, iterations: usize, converged: bool, history: Vec<f64>) -> Minimum {
    Minimum {
        x: x.as_slice().to_vec(),
        value,
        grad_inf,
        iterations,
        converged,
        history,
    }
}
