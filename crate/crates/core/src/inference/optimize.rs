//! BFGS minimization with a backtracking Armijo line search.

use crate::error::Result;
use crate::scalar::Scalar;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn sup_norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().fold(0.0, |acc, v| acc.max(v.abs().as_f64()))
}

pub(crate) struct Minimum<T> {
    pub w: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub gradient_sup_norm: f64,
    pub converged: bool,
    pub status: String,
}

/// Minimizes `objective`, which writes the gradient and returns the value
/// (`+inf` where undefined), starting from `w`.
pub(crate) fn minimize_bfgs<T, F>(mut objective: F, mut w: Vec<T>, max_iterations: usize, tolerance: f64) -> Result<Minimum<T>>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> Result<T>,
{
    let n = w.len();
    let mut g = vec![T::zero(); n];
    let mut f = objective(&w, &mut g)?;
    if !f.is_finite() {
        return Ok(Minimum {
            w,
            value: f,
            iterations: 0,
            gradient_sup_norm: f64::INFINITY,
            converged: false,
            status: "non-finite likelihood at initial point".into(),
        });
    }
    let identity = |n: usize| {
        let mut h = vec![T::zero(); n * n];
        (0..n).for_each(|i| h[i * n + i] = T::one());
        h
    };
    let mut h = identity(n);
    let mut fresh = true;
    let mut w_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];
    let mut dir = vec![T::zero(); n];
    let mut status = String::from("iteration limit");
    let mut converged = false;
    let mut iterations = 0;
    let mut first = true;

    while iterations < max_iterations {
        if sup_norm(&g) < tolerance {
            converged = true;
            status = "gradient tolerance reached".into();
            break;
        }
        for i in 0..n {
            dir[i] = -(0..n).map(|j| h[i * n + j] * g[j]).sum::<T>();
        }
        let mut slope: T = dir.iter().zip(&g).map(|(d, gi)| *d * *gi).sum();
        if !(slope < T::zero()) {
            h = identity(n);
            fresh = true;
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -*gi);
            slope = -g.iter().map(|v| *v * *v).sum::<T>();
        }
        let mut step = if first {
            T::one().min(T::one() / T::lit(sup_norm(&g)))
        } else {
            T::one()
        };
        first = false;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                w_new[i] = w[i] + step * dir[i];
            }
            let f_new = objective(&w_new, &mut g_new)?;
            if f_new.is_finite() && f_new <= f + T::lit(ARMIJO_C1) * step * slope {
                accepted = true;
                let s: Vec<T> = w_new.iter().zip(&w).map(|(a, b)| *a - *b).collect();
                let y: Vec<T> = g_new.iter().zip(&g).map(|(a, b)| *a - *b).collect();
                let sy: T = s.iter().zip(&y).map(|(a, b)| *a * *b).sum();
                let yy: T = y.iter().map(|v| *v * *v).sum();
                if sy > T::lit(1e-12) * yy.sqrt() * s.iter().map(|v| *v * *v).sum::<T>().sqrt() {
                    if fresh {
                        let scale = sy / yy;
                        h.iter_mut().for_each(|v| *v *= scale);
                        fresh = false;
                    }
                    let rho = T::one() / sy;
                    let hy: Vec<T> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
                    let yhy: T = y.iter().zip(&hy).map(|(a, b)| *a * *b).sum();
                    for i in 0..n {
                        for j in 0..n {
                            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                        }
                    }
                }
                std::mem::swap(&mut w, &mut w_new);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                break;
            }
            step *= T::lit(0.5);
        }
        iterations += 1;
        if !accepted {
            if fresh {
                status = "line search failed".into();
                break;
            }
            h = identity(n);
            fresh = true;
        }
    }
    Ok(Minimum {
        gradient_sup_norm: sup_norm(&g),
        w,
        value: f,
        iterations,
        converged,
        status,
    })
}
