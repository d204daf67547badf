//! Derivative-free minimization with random restarts.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use rand::Rng;

use crate::error::{Error, Result};

struct Objective<'a, F: Fn(&[f64]) -> f64> {
    f: &'a F,
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let v = (self.f)(p);
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_iters: u64,
    /// Standard-deviation tolerance on the simplex values.
    pub sd_tolerance: f64,
    /// Initial simplex edge along each coordinate.
    pub step: f64,
    /// Extra starts jittered around the best point so far.
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            sd_tolerance: 1e-10,
            step: 0.25,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: u64,
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &SimplexOptions) -> Result<Minimum> {
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] += opts.step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.sd_tolerance)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let res = Executor::new(Objective { f }, solver)
        .configure(|s| s.max_iters(opts.max_iters))
        .run()
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let state = res.state();
    let x = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Optimizer("simplex search produced no point".into()))?;
    Ok(Minimum {
        value: state.get_best_cost(),
        x,
        evaluations: state.get_func_counts().values().sum(),
    })
}

/// Minimizes `f` from `x0`, then from `restarts` random perturbations of the
/// incumbent. Never returns a point worse than `x0`.
pub fn minimize<F, R>(f: F, x0: &[f64], opts: &SimplexOptions, rng: &mut R) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let f0 = f(x0);
    let mut best = Minimum {
        x: x0.to_vec(),
        value: if f0.is_nan() { f64::INFINITY } else { f0 },
        evaluations: 1,
    };
    if x0.is_empty() {
        return Ok(best);
    }
    let mut evaluations = 1;
    for attempt in 0..=opts.restarts {
        let start: Vec<f64> = if attempt == 0 {
            x0.to_vec()
        } else {
            best.x.iter().map(|v| v + opts.step * rng.random_range(-1.0..1.0)).collect()
        };
        let m = nelder_mead(&f, &start, opts)?;
        evaluations += m.evaluations;
        if m.value < best.value {
            best = m;
        }
    }
    if !best.value.is_finite() {
        return Err(Error::Optimizer("objective is not finite anywhere the search went".into()));
    }
    best.evaluations = evaluations;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = minimize(f, &[-1.2, 1.0], &SimplexOptions::default(), &mut rng).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| if x[0] == 0.0 { -1.0 } else { x[0].abs() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = minimize(f, &[0.0], &SimplexOptions::default(), &mut rng).unwrap();
        assert_eq!(m.x, vec![0.0]);
        assert_eq!(m.value, -1.0);
    }

    #[test]
    fn nan_treated_as_infeasible() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = minimize(f, &[1.0], &SimplexOptions::default(), &mut rng).unwrap();
        assert!((m.x[0] - 2.0).abs() < 1e-4);
    }
}
