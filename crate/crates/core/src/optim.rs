//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! L-BFGS directions with projection onto the box and a monotone Armijo
//! backtracking search along the projected path. The iterate sequence never
//! increases the objective, every iterate satisfies the bounds, and the
//! search falls back to projected steepest descent when the quasi-Newton
//! direction fails.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-coordinate lower/upper bounds.
#[derive(Debug, Clone)]
pub struct Bounds<S> {
    pub lo: Vec<S>,
    pub hi: Vec<S>,
}

impl<S: Scalar> Bounds<S> {
    pub fn symmetric(n: usize, magnitude: S) -> Self {
        Self {
            lo: vec![-magnitude; n],
            hi: vec![magnitude; n],
        }
    }

    pub fn project(&self, x: &mut [S]) {
        for (xi, (lo, hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *xi = (*xi).max(*lo).min(*hi);
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.lo.len() != n || self.hi.len() != n {
            return Err(Error::InvalidConfig(format!(
                "bounds of length {}/{} for {} variables",
                self.lo.len(),
                self.hi.len(),
                n
            )));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidConfig("lower bound above upper bound".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuasiNewtonConfig<S> {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Convergence on the infinity norm of the projected gradient step
    /// `x - proj(x - g)`.
    pub grad_tolerance: S,
    /// Convergence on the relative objective decrease per iteration.
    pub f_tolerance: S,
}

impl<S: Scalar> Default for QuasiNewtonConfig<S> {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 300,
            grad_tolerance: S::from_f64_c(1e-11),
            f_tolerance: S::from_f64_c(1e-18),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimized<S> {
    pub x: Vec<S>,
    pub f: S,
    pub iterations: usize,
    pub evaluations: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// Minimizes `f` over the box. `f` returns the objective and its gradient.
/// The starting point is projected into the box first; the returned point
/// has `f(x) <= f(proj(x0))`.
pub fn minimize_bounded<S: Scalar>(
    mut objective: impl FnMut(&[S]) -> Result<(S, Vec<S>)>,
    x0: Vec<S>,
    bounds: &Bounds<S>,
    config: &QuasiNewtonConfig<S>,
) -> Result<Minimized<S>> {
    let n = x0.len();
    bounds.check(n)?;
    let mut x = x0;
    bounds.project(&mut x);
    let (mut f, mut g) = objective(&x)?;
    let mut evaluations = 1;

    let mut memory: VecDeque<(Vec<S>, Vec<S>, S)> = VecDeque::new();
    let c1 = S::from_f64_c(ARMIJO_C1);

    let mut iterations = 0;
    while iterations < config.max_iterations {
        if projected_gradient_norm(&x, &g, bounds) <= config.grad_tolerance {
            break;
        }
        iterations += 1;

        let mut d = lbfgs_direction(&g, &memory);
        let mut descent = dot(&d, &g);
        if !(descent < S::zero()) {
            memory.clear();
            d = g.iter().map(|gi| -*gi).collect();
            descent = dot(&d, &g);
            if !(descent < S::zero()) {
                break;
            }
        }

        // Armijo search along the projected path: backtrack from the unit
        // step; when the unit step already passes, expand while the
        // objective keeps strictly improving (plain backtracking lets the
        // memory collapse into tiny curvature pairs on curved valleys).
        let mut alpha = S::one();
        let mut accepted: Option<(Vec<S>, S, Vec<S>, Vec<S>)> = None;
        let trial = |alpha: S, objective: &mut dyn FnMut(&[S]) -> Result<(S, Vec<S>)>,
                     evaluations: &mut usize|
         -> Result<Option<(Vec<S>, S, Vec<S>, Vec<S>, bool)>> {
            let mut cand: Vec<S> = x
                .iter()
                .zip(&d)
                .map(|(xi, di)| *xi + alpha * *di)
                .collect();
            bounds.project(&mut cand);
            let disp: Vec<S> = cand.iter().zip(&x).map(|(c, xi)| *c - *xi).collect();
            if disp.iter().all(|v| v.is_zero()) {
                return Ok(None);
            }
            let gd = dot(&g, &disp);
            let (fc, gc) = objective(&cand)?;
            *evaluations += 1;
            let ok = fc.is_finite() && fc <= f + c1 * gd.min(S::zero());
            Ok(Some((cand, fc, gc, disp, ok)))
        };
        match trial(alpha, &mut objective, &mut evaluations)? {
            Some((cand, fc, gc, disp, true)) => {
                accepted = Some((cand, fc, gc, disp));
                // Expansion: keep doubling while strictly better.
                let mut best = f;
                let mut fc = fc;
                for _ in 0..40 {
                    if fc >= best {
                        break;
                    }
                    best = fc;
                    alpha = alpha * S::from_f64_c(2.0);
                    match trial(alpha, &mut objective, &mut evaluations)? {
                        Some((cand2, fc2, gc2, disp2, ok2)) if ok2 && fc2 < best => {
                            fc = fc2;
                            accepted = Some((cand2, fc2, gc2, disp2));
                        }
                        _ => break,
                    }
                }
            }
            _ => {
                // Backtrack.
                while alpha.to_f64().unwrap() > MIN_STEP {
                    alpha = alpha * S::from_f64_c(0.5);
                    match trial(alpha, &mut objective, &mut evaluations)? {
                        Some((cand, fc, gc, disp, true)) => {
                            accepted = Some((cand, fc, gc, disp));
                            break;
                        }
                        Some(_) => {}
                        None => break,
                    }
                }
            }
        }

        let Some((xn, fn_, gn, s)) = accepted else {
            if memory.is_empty() {
                break;
            }
            // Quasi-Newton step failed everywhere along the arc: drop the
            // memory and retry from steepest descent next iteration.
            memory.clear();
            continue;
        };

        let y: Vec<S> = gn.iter().zip(&g).map(|(a, b)| *a - *b).collect();
        let sy = dot(&s, &y);
        let curvature_ok = sy
            > S::from_f64_c(1e-12) * norm2(&s).sqrt() * norm2(&y).sqrt();
        if curvature_ok {
            if memory.len() == config.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, sy));
        }

        let decrease = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        if decrease <= config.f_tolerance * f.abs().max(S::one()) {
            break;
        }
    }

    Ok(Minimized {
        x,
        f,
        iterations,
        evaluations,
    })
}

/// Infinity norm of `x - proj(x - g)`.
pub fn projected_gradient_norm<S: Scalar>(x: &[S], g: &[S], bounds: &Bounds<S>) -> S {
    let mut norm = S::zero();
    for i in 0..x.len() {
        let stepped = (x[i] - g[i]).max(bounds.lo[i]).min(bounds.hi[i]);
        norm = norm.max((x[i] - stepped).abs());
    }
    norm
}

fn lbfgs_direction<S: Scalar>(g: &[S], memory: &VecDeque<(Vec<S>, Vec<S>, S)>) -> Vec<S> {
    let mut q: Vec<S> = g.iter().map(|v| -*v).collect();
    if memory.is_empty() {
        return q;
    }
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, sy) in memory.iter().rev() {
        let alpha = dot(s, &q) / *sy;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi = *qi - alpha * *yi;
        }
        alphas.push(alpha);
    }
    // Initial Hessian scaling from the most recent pair.
    let (_, y_last, sy_last) = memory.back().unwrap();
    let yy = norm2(y_last);
    if yy > S::zero() {
        let gamma = *sy_last / yy;
        for qi in q.iter_mut() {
            *qi = *qi * gamma;
        }
    }
    for ((s, y, sy), alpha) in memory.iter().zip(alphas.into_iter().rev()) {
        let beta = dot(y, &q) / *sy;
        for (qi, si) in q.iter_mut().zip(s) {
            *qi = *qi + (alpha - beta) * *si;
        }
    }
    q
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a)
}
