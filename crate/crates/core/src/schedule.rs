//! Adaptive tempering: effective sample size of the incremental weights and
//! the bisection rule that picks the next `lambda`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::AnnealState;

/// Absolute bisection tolerance on `lambda`.
pub const BISECTION_TOL: f64 = 1e-6;
/// Upper bound on bisection halvings.
pub const MAX_HALVINGS: usize = 60;
/// Slack used when deciding whether the capped step reaches `lambda = 1`.
const ENDPOINT_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("empty population")]
    EmptyPopulation,
    #[error("annealing already terminated")]
    AlreadyTerminated,
    #[error("lambda must strictly increase (from {from} to {to})")]
    NonIncreasingLambda { from: f64, to: f64 },
}

/// A point on the ESS-versus-lambda curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssCurvePoint {
    pub lambda: f64,
    pub ess: f64,
}

/// `(sum u)^2 / sum u^2` with `u_n = exp((lambda - lambda_prev) * beta * R_n)`,
/// evaluated after shifting the log-weights by their maximum.
pub fn ess(rewards: &[f64], lambda_prev: f64, lambda: f64, beta: f64) -> Result<f64, ScheduleError> {
    if rewards.is_empty() {
        return Err(ScheduleError::EmptyPopulation);
    }
    let scale = (lambda - lambda_prev) * beta;
    Ok(ess_scaled(rewards, scale))
}

pub(crate) fn ess_scaled(rewards: &[f64], scale: f64) -> f64 {
    let max = rewards.iter().map(|r| scale * r).fold(f64::NEG_INFINITY, f64::max);
    let (s1, s2) = rewards.iter().fold((0.0, 0.0), |(s1, s2), r| {
        let u = (scale * r - max).exp();
        (s1 + u, s2 + u * u)
    });
    let n = rewards.len() as f64;
    (s1 * s1 / s2).clamp(1.0, n)
}

/// Largest admissible `lambda` in `(lambda_prev, min(1, lambda_prev + 1/min_iterations)]`
/// keeping `ess >= kappa * N`.
pub fn next_lambda(
    rewards: &[f64],
    state: &AnnealState,
    kappa: f64,
    min_iterations: usize,
    tol: f64,
) -> Result<f64, ScheduleError> {
    if state.terminated {
        return Err(ScheduleError::AlreadyTerminated);
    }
    if rewards.is_empty() {
        return Err(ScheduleError::EmptyPopulation);
    }
    let lo0 = state.lambda;
    let beta = state.beta_target;
    let threshold = kappa * rewards.len() as f64;
    let admissible = |lambda: f64| ess_scaled(rewards, (lambda - lo0) * beta) >= threshold;

    let cap = lo0 + 1.0 / min_iterations.max(1) as f64;
    let upper = if cap >= 1.0 - ENDPOINT_SLACK { 1.0 } else { cap };
    if admissible(upper) {
        return Ok(upper);
    }

    let (mut lo, mut hi) = (lo0, upper);
    for _ in 0..MAX_HALVINGS {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if admissible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // `lo` can only equal lambda_prev when the root sits below 2^-60 of the
    // bracket; step to `hi` so the schedule always advances.
    Ok(if lo > lo0 { lo } else { hi })
}

/// Moves the annealing state to `new_lambda`, marking termination at 1.
pub fn advance(state: &AnnealState, new_lambda: f64) -> Result<AnnealState, ScheduleError> {
    if state.terminated {
        return Err(ScheduleError::AlreadyTerminated);
    }
    if !(new_lambda > state.lambda && new_lambda <= 1.0) {
        return Err(ScheduleError::NonIncreasingLambda {
            from: state.lambda,
            to: new_lambda,
        });
    }
    Ok(AnnealState {
        lambda: new_lambda,
        beta_target: state.beta_target,
        iteration: state.iteration + 1,
        terminated: new_lambda >= 1.0,
    })
}

/// Samples the ESS curve on `points` evenly spaced lambdas in `[lambda_prev, 1]`.
pub fn ess_curve(rewards: &[f64], lambda_prev: f64, beta: f64, points: usize) -> Vec<EssCurvePoint> {
    if rewards.is_empty() || points == 0 {
        return Vec::new();
    }
    let span = 1.0 - lambda_prev;
    (0..points)
        .map(|i| {
            let frac = if points == 1 {
                1.0
            } else {
                i as f64 / (points - 1) as f64
            };
            let lambda = lambda_prev + span * frac;
            EssCurvePoint {
                lambda,
                ess: ess_scaled(rewards, (lambda - lambda_prev) * beta),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn state(lambda: f64, beta: f64) -> AnnealState {
        AnnealState {
            lambda,
            beta_target: beta,
            iteration: 0,
            terminated: false,
        }
    }

    #[test]
    fn ess_equal_rewards_is_n() {
        let r = [0.3; 7];
        assert_abs_diff_eq!(ess(&r, 0.0, 0.8, 20.0).unwrap(), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_zero_increment_is_n() {
        let r = [0.0, 1.0, 5.0, -2.0];
        assert_eq!(ess(&r, 0.4, 0.4, 20.0).unwrap(), 4.0);
    }

    #[test]
    fn ess_two_point_example() {
        // u = [1, 2] => (3)^2 / 5
        let got = ess(&[0.0, 1.0], 0.0, std::f64::consts::LN_2, 1.0).unwrap();
        assert_abs_diff_eq!(got, 1.8, epsilon = 1e-12);
    }

    #[test]
    fn ess_empty_errors() {
        assert_eq!(ess(&[], 0.0, 1.0, 1.0), Err(ScheduleError::EmptyPopulation));
    }

    #[test]
    fn next_lambda_cap_binds_on_constant_rewards() {
        let l = next_lambda(&[0.5; 4], &state(0.0, 20.0), 0.9, 3, BISECTION_TOL).unwrap();
        assert_eq!(l, 1.0 / 3.0);
    }

    #[test]
    fn next_lambda_endpoint_within_cap() {
        let l = next_lambda(&[0.5; 4], &state(0.9, 20.0), 0.9, 3, BISECTION_TOL).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn next_lambda_bisection_root() {
        // Root of (1 + e^{20 l})^2 / (1 + e^{40 l}) = 1.8, solved independently
        // with scipy.optimize.brentq: ln(2)/20.
        let root = 0.034_657_359_027_997_235;
        let l = next_lambda(&[0.0, 1.0], &state(0.0, 20.0), 0.9, 3, BISECTION_TOL).unwrap();
        assert!((l - root).abs() <= BISECTION_TOL, "{l} vs {root}");
        assert!(l <= root + 1e-15, "returned lambda must keep ESS >= kappa N");
        assert!(ess(&[0.0, 1.0], 0.0, l, 20.0).unwrap() >= 1.8);
    }

    #[test]
    fn next_lambda_rejects_terminated() {
        let mut s = state(1.0, 20.0);
        s.terminated = true;
        assert_eq!(
            next_lambda(&[1.0], &s, 0.5, 3, BISECTION_TOL),
            Err(ScheduleError::AlreadyTerminated)
        );
    }

    #[test]
    fn advance_examples() {
        let s = advance(&state(0.4, 20.0), 0.7).unwrap();
        assert_eq!(s.lambda, 0.7);
        assert!(!s.terminated);
        assert_eq!(s.iteration, 1);
        let s2 = advance(&s, 1.0).unwrap();
        assert!(s2.terminated);
        assert!(matches!(
            advance(&s, 0.7),
            Err(ScheduleError::NonIncreasingLambda { .. })
        ));
    }

    #[test]
    fn constant_rewards_give_thirds() {
        let mut s = state(0.0, 20.0);
        let mut lambdas = Vec::new();
        while !s.terminated {
            let l = next_lambda(&[1.0; 8], &s, 0.9, 3, BISECTION_TOL).unwrap();
            s = advance(&s, l).unwrap();
            lambdas.push(l);
        }
        assert_eq!(lambdas, vec![1.0 / 3.0, 1.0 / 3.0 + 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn ess_curve_starts_at_n() {
        let c = ess_curve(&[0.0, 1.0, 2.0], 0.2, 20.0, 11);
        assert_eq!(c.len(), 11);
        assert_eq!(c[0].ess, 3.0);
        assert_eq!(c[10].lambda, 1.0);
    }

    proptest! {
        #[test]
        fn ess_is_bounded(rewards in prop::collection::vec(-50.0f64..50.0, 1..40), dl in 0.0f64..1.0, beta in 0.0f64..100.0) {
            let e = ess(&rewards, 0.0, dl, beta).unwrap();
            prop_assert!(e >= 1.0 && e <= rewards.len() as f64 + 1e-9);
        }

        #[test]
        fn ess_non_increasing_in_lambda(rewards in prop::collection::vec(-5.0f64..5.0, 2..30), beta in 0.1f64..50.0) {
            let mut prev = f64::INFINITY;
            for i in 0..=50 {
                let e = ess(&rewards, 0.0, i as f64 / 50.0, beta).unwrap();
                prop_assert!(e <= prev + 1e-9);
                prev = e;
            }
        }

        #[test]
        fn next_lambda_shift_invariant(rewards in prop::collection::vec(0.0f64..1.0, 2..30), c in -100.0f64..100.0, lp in 0.0f64..0.9) {
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            let s = state(lp, 20.0);
            let a = next_lambda(&rewards, &s, 0.7, 3, BISECTION_TOL).unwrap();
            let b = next_lambda(&shifted, &s, 0.7, 3, BISECTION_TOL).unwrap();
            prop_assert!((a - b).abs() <= BISECTION_TOL);
        }

        #[test]
        fn schedule_terminates_within_bounds(rewards in prop::collection::vec(0.0f64..1.0, 2..30), kappa in 0.1f64..0.95, min_it in 1usize..6) {
            let mut s = state(0.0, 20.0);
            let mut steps = 0;
            while !s.terminated {
                let l = next_lambda(&rewards, &s, kappa, min_it, BISECTION_TOL).unwrap();
                prop_assert!(l > s.lambda);
                prop_assert!(ess(&rewards, s.lambda, l, 20.0).unwrap() >= kappa * rewards.len() as f64 - 1e-9);
                s = advance(&s, l).unwrap();
                steps += 1;
                prop_assert!(steps <= 10_000);
            }
            prop_assert!(steps >= min_it);
        }
    }
}
