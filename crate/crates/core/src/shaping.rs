//! Closed-form diagnostics for policy and advantage shaping.
//!
//! For a resampled token the logit gradient of the target token is bounded
//! by a per-token weight that depends only on `pi` (current policy
//! probability), `pi_old` (sampling probability), and the formulation:
//!
//! | formulation | weight |
//! |---|---|
//! | vanilla ratio | `pi (1 - pi) / pi_old` |
//! | clipped, `A > 0` | vanilla while `pi / pi_old <= 1 + eps`, else `0` |
//! | shaped `f(rho) = rho / (rho + gamma)` | `gamma pi_old pi (1 - pi) / (pi + gamma pi_old)^2` |
//!
//! The shaped weight peaks at `pi* = gamma pi_old / (1 + 2 gamma pi_old)`
//! with value `1 / (4 (1 + gamma pi_old))`, always below `1/4`.

use std::io::Write;

use crate::{Error, Result};

pub fn vanilla_bound(pi: f64, pi_old: f64) -> f64 {
    pi * (1.0 - pi) / pi_old
}

/// Positive-advantage branch only.
pub fn clipped_bound(pi: f64, pi_old: f64, epsilon: f64) -> f64 {
    if pi / pi_old <= 1.0 + epsilon {
        vanilla_bound(pi, pi_old)
    } else {
        0.0
    }
}

pub fn shaped_bound(pi: f64, pi_old: f64, gamma: f64) -> f64 {
    let d = pi + gamma * pi_old;
    gamma * pi_old * pi * (1.0 - pi) / (d * d)
}

pub fn peak_location(pi_old: f64, gamma: f64) -> f64 {
    gamma * pi_old / (1.0 + 2.0 * gamma * pi_old)
}

pub fn peak_value(pi_old: f64, gamma: f64) -> f64 {
    1.0 / (4.0 * (1.0 + gamma * pi_old))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageAmplification {
    pub c: usize,
    /// Positive advantage normalized within the `G` selected rollouts.
    pub a_plus: f64,
    /// Positive advantage normalized over all `G + G'` rollouts.
    pub a_hat_plus: f64,
    pub ratio: f64,
}

/// `A+ = sqrt((G - N_s) / N_s)` with `N_s = min(c, G - 1)` and
/// `A^+ = sqrt((G + G' - c) / c)`, for `c` correct resampled responses.
pub fn advantage_closed_form(g: usize, g_prime: usize, c: usize) -> Result<AdvantageAmplification> {
    if c == 0 {
        return Err(Error::Undefined(
            "no correct resampled response (c = 0)".into(),
        ));
    }
    if g < 2 {
        return Err(Error::config("group size must be at least 2"));
    }
    if c > g_prime {
        return Err(Error::config(format!(
            "c = {c} exceeds the resample size {g_prime}"
        )));
    }
    let n_s = c.min(g - 1) as f64;
    let a_plus = ((g as f64 - n_s) / n_s).sqrt();
    let a_hat_plus = (((g + g_prime - c) as f64) / c as f64).sqrt();
    Ok(AdvantageAmplification {
        c,
        a_plus,
        a_hat_plus,
        ratio: a_hat_plus / a_plus,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSpec {
    pub pi_old: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    /// Strictly increasing points inside `(0, 1)`.
    pub grid: Vec<f64>,
}

impl CurveSpec {
    pub const DEFAULT_PI_OLD: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

    pub fn new(gamma: f64, epsilon: f64, points: usize) -> Self {
        CurveSpec {
            pi_old: Self::DEFAULT_PI_OLD.to_vec(),
            gamma,
            epsilon,
            grid: uniform_grid(points),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.pi_old.is_empty() {
            return Err(Error::config("curve grid and pi_old set must be non-empty"));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("grid must be strictly increasing"));
        }
        if self.grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::config("grid points must lie in (0, 1)"));
        }
        if self.pi_old.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::config("pi_old must lie in (0, 1]"));
        }
        if !(self.gamma > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("gamma and epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for CurveSpec {
    fn default() -> Self {
        CurveSpec::new(0.1, 0.2, 2001)
    }
}

/// `points` uniform points strictly inside `(0, 1)`: `k / (points + 1)`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    let step = 1.0 / (points + 1) as f64;
    (1..=points).map(|k| k as f64 * step).collect()
}

pub const CURVE_HEADER: &str = "pi,pi_old,vanilla,clipped,shaped";
pub const AMPLIFICATION_HEADER: &str = "c,a_plus,a_hat_plus,ratio";

/// Writes one row per `(pi_old, pi)` pair and returns the number of data rows.
pub fn emit_curves<W: Write>(spec: &CurveSpec, mut out: W) -> Result<usize> {
    spec.validate()?;
    writeln!(out, "{CURVE_HEADER}")?;
    let mut rows = 0;
    for &pi_old in &spec.pi_old {
        for &pi in &spec.grid {
            writeln!(
                out,
                "{pi},{pi_old},{},{},{}",
                vanilla_bound(pi, pi_old),
                clipped_bound(pi, pi_old, spec.epsilon),
                shaped_bound(pi, pi_old, spec.gamma)
            )?;
            rows += 1;
        }
    }
    Ok(rows)
}

/// Amplification table for `c = 1..=G'`.
pub fn emit_amplification<W: Write>(g: usize, g_prime: usize, mut out: W) -> Result<usize> {
    writeln!(out, "{AMPLIFICATION_HEADER}")?;
    for c in 1..=g_prime {
        let a = advantage_closed_form(g, g_prime, c)?;
        writeln!(out, "{},{},{},{}", a.c, a.a_plus, a.a_hat_plus, a.ratio)?;
    }
    Ok(g_prime)
}

/// Grid maximum of [`shaped_bound`]: `(argmax, max)`.
pub fn shaped_grid_peak(grid: &[f64], pi_old: f64, gamma: f64) -> (f64, f64) {
    grid.iter()
        .map(|&pi| (pi, shaped_bound(pi, pi_old, gamma)))
        .fold((f64::NAN, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
}
