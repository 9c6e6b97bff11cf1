//! Nelder-Mead simplex minimization with dimension-adaptive coefficients and optional box
//! bounds. Out-of-box points are evaluated at their clamped image plus a quadratic penalty on
//! the excess, which pushes the simplex back inside without hard rejection.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMeadConfig {
    pub max_iterations: usize,
    /// Stop once every vertex lies within this (infinity-norm) distance of the best one.
    pub simplex_tolerance: f64,
    /// Initial simplex edge per coordinate.
    pub initial_steps: Vec<f64>,
    pub bounds: Option<Vec<(f64, f64)>>,
    pub bound_penalty: f64,
}

impl NelderMeadConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            max_iterations: 5_000,
            simplex_tolerance: 1e-8,
            initial_steps: vec![0.1; dim],
            bounds: None,
            bound_penalty: 1e3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    /// Best point, clamped into the bounds.
    pub x: Vec<f64>,
    /// Objective at `x`.
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Bounded<'a, F> {
    f: F,
    bounds: Option<&'a [(f64, f64)]>,
    penalty: f64,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Bounded<'_, F> {
    fn clamp(&self, x: &[f64]) -> (Vec<f64>, f64) {
        match self.bounds {
            None => (x.to_vec(), 0.0),
            Some(b) => {
                let mut excess = 0.0;
                let clamped = x
                    .iter()
                    .zip(b)
                    .map(|(&v, &(lo, hi))| {
                        let c = v.clamp(lo, hi);
                        excess += (v - c) * (v - c);
                        c
                    })
                    .collect();
                (clamped, excess)
            }
        }
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let (c, excess) = self.clamp(x);
        let v = (self.f)(&c);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        v + self.penalty * excess
    }
}

/// Minimizes `f` from `x0`. The returned value never exceeds `f(x0)` for an in-bounds `x0`.
pub fn nelder_mead(f: impl FnMut(&[f64]) -> f64, x0: &[f64], config: &NelderMeadConfig) -> Result<Minimum> {
    let n = x0.len();
    if config.initial_steps.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} initial steps for a {n}-dimensional problem",
            config.initial_steps.len()
        )));
    }
    if let Some(b) = &config.bounds {
        if b.len() != n || b.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidParameter("bounds must be one ordered pair per coordinate".into()));
        }
    }
    let mut obj = Bounded { f, bounds: config.bounds.as_deref(), penalty: config.bound_penalty, evaluations: 0 };
    let f0 = obj.eval(x0);
    if !f0.is_finite() {
        return Err(Error::InvalidParameter(format!("objective is not finite at the start point ({f0})")));
    }
    if n == 0 {
        return Ok(Minimum { x: vec![], value: f0, iterations: 0, evaluations: 1, converged: true });
    }

    let nf = n as f64;
    let (alpha, gamma, rho, shrink) = if n > 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += config.initial_steps[i];
        let v = obj.eval(&x);
        simplex.push((x, v));
    }

    let mut iterations = 0;
    let mut converged = false;
    loop {
        // Stable sort keeps earlier vertices (x0 first) ahead on ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter < config.simplex_tolerance {
            converged = true;
            break;
        }
        if iterations >= config.max_iterations {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / nf;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect()
        };

        let xr = along(alpha);
        let fr = obj.eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = obj.eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(alpha * rho);
            let fc = obj.eval(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = obj.eval(&xc);
            (xc, fc)
        };
        if fc < fr.min(worst.1) {
            simplex[n] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = anchor.iter().zip(&vertex.0).map(|(a, v)| a + shrink * (v - a)).collect();
            let v = obj.eval(&x);
            *vertex = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (best, best_value) = simplex.swap_remove(0);
    let (x, excess) = obj.clamp(&best);
    Ok(Minimum {
        x,
        value: best_value - obj.penalty * excess,
        iterations,
        evaluations: obj.evaluations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_dimensional_parabola() {
        let cfg = NelderMeadConfig { simplex_tolerance: 1e-10, ..NelderMeadConfig::new(1) };
        let m = nelder_mead(|x| (x[0] - 3.0).powi(2), &[0.0], &cfg).unwrap();
        assert_abs_diff_eq!(m.x[0], 3.0, epsilon = 1e-6);
        assert!(m.converged);
    }

    #[test]
    fn rosenbrock() {
        let cfg = NelderMeadConfig { simplex_tolerance: 1e-10, ..NelderMeadConfig::new(2) };
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(rosen, &[-1.2, 1.0], &cfg).unwrap();
        assert!(m.value < 1e-6, "f* = {}", m.value);
        assert!(m.iterations <= 5_000);
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn constant_objective_returns_start() {
        let m = nelder_mead(|_| 4.2, &[0.5, -1.0, 2.0], &NelderMeadConfig::new(3)).unwrap();
        assert_eq!(m.x, vec![0.5, -1.0, 2.0]);
        assert_eq!(m.value, 4.2);
    }

    #[test]
    fn bounds_are_respected() {
        let cfg = NelderMeadConfig { bounds: Some(vec![(-1.0, 1.0), (-1.0, 1.0)]), ..NelderMeadConfig::new(2) };
        let m = nelder_mead(|x| -(x[0] + x[1]), &[0.0, 0.0], &cfg).unwrap();
        assert!(m.x.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_abs_diff_eq!(m.value, -2.0, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        assert!(nelder_mead(|_| f64::NAN, &[1.0], &NelderMeadConfig::new(1)).is_err());
    }
}
