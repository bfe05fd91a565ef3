//! Temporal regularity of motion traces.
//!
//! The smoothness penalty is `g(theta) = 1/2 sum_c |D theta_c|^2` over the six
//! parameter channels, with `D` the first difference along time.

use crate::error::{invalid_param, Result};
use crate::geometry::{MotionTrace, RigidParams};

/// Solves `(diag(w) + c D^T D) x = rhs` for one channel (Thomas algorithm).
fn solve_tridiagonal(w: &[f64], c: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![rhs[0] / w[0]];
    }
    let diag = |i: usize| w[i] + c * if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
    let off = -c;
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = off / diag(0);
    dp[0] = rhs[0] / diag(0);
    for i in 1..n {
        let m = diag(i) - off * cp[i - 1];
        cp[i] = off / m;
        dp[i] = (rhs[i] - off * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// `argmin_theta 1/2 |theta - z|^2 + alpha mu g(theta)`, channel by channel.
pub fn prox_motion_smoothness(trace: &MotionTrace, alpha: f64, mu: f64) -> Result<MotionTrace> {
    if !(alpha > 0.0 && alpha.is_finite() && mu >= 0.0 && mu.is_finite()) {
        return Err(invalid_param(format!(
            "smoothness prox needs alpha > 0 and mu >= 0, got {alpha}, {mu}"
        )));
    }
    let ones = vec![1.0; trace.len()];
    let channels = trace.to_channels();
    let out: [Vec<f64>; 6] = std::array::from_fn(|c| solve_tridiagonal(&ones, alpha * mu, &channels[c]));
    Ok(MotionTrace::from_channels(&out))
}

/// Weighted variant `argmin 1/2 sum_t w_t (theta_t - z_t)^2 + mu g(theta)` with
/// per-line, per-channel weights `w > 0`.
pub fn prox_motion_smoothness_weighted(trace: &MotionTrace, weights: &[[f64; 6]], mu: f64) -> Result<MotionTrace> {
    if weights.len() != trace.len() {
        return Err(invalid_param("weight count does not match trace length"));
    }
    if !(mu >= 0.0 && mu.is_finite()) || weights.iter().flatten().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(invalid_param("weights must be positive and mu non-negative"));
    }
    let channels = trace.to_channels();
    let out: [Vec<f64>; 6] = std::array::from_fn(|c| {
        let w: Vec<f64> = weights.iter().map(|v| v[c]).collect();
        let rhs: Vec<f64> = channels[c].iter().zip(&w).map(|(z, w)| z * w).collect();
        solve_tridiagonal(&w, mu, &rhs)
    });
    Ok(MotionTrace::from_channels(&out))
}

pub type Block = [[f64; 6]; 6];

/// Cholesky factor of a symmetric positive definite 6x6 block.
fn cholesky(a: &Block) -> Option<Block> {
    let mut l = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Block, b: &[f64; 6]) -> [f64; 6] {
    let mut y = [0.0; 6];
    for i in 0..6 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        x[i] = (y[i] - (i + 1..6).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Solves `W x = b` for a symmetric positive definite block.
pub fn block_solve(w: &Block, b: &[f64; 6]) -> Option<[f64; 6]> {
    cholesky(w).map(|l| cholesky_solve(&l, b))
}

/// Variable-metric prox: `argmin 1/2 sum_t (theta_t - z_t)^T W_t (theta_t - z_t) + sum_c mu_c / 2 |D theta_c|^2`
/// with symmetric positive definite 6x6 blocks `W_t`. The normal equations are
/// block tridiagonal and solved exactly.
pub fn prox_motion_smoothness_metric(z: &MotionTrace, metric: &[Block], mu: [f64; 6]) -> Result<MotionTrace> {
    let n = z.len();
    if metric.len() != n {
        return Err(invalid_param("metric block count does not match trace length"));
    }
    if mu.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(invalid_param("smoothness weights must be non-negative"));
    }
    if n == 0 {
        return Ok(z.clone());
    }
    let rhs: Vec<[f64; 6]> = z
        .params
        .iter()
        .zip(metric)
        .map(|(p, w)| {
            let v = p.to_array();
            std::array::from_fn(|a| (0..6).map(|b| w[a][b] * v[b]).sum())
        })
        .collect();
    // off-diagonal blocks are -diag(mu)
    let mut factors: Vec<Block> = Vec::with_capacity(n);
    let mut r = rhs;
    for t in 0..n {
        let mut b = metric[t];
        let neighbours = usize::from(t > 0) + usize::from(t + 1 < n);
        for c in 0..6 {
            b[c][c] += mu[c] * neighbours as f64;
        }
        if t > 0 {
            // B_t -= C B'_{t-1}^{-1} C and r_t -= C B'_{t-1}^{-1} r_{t-1}, C = -diag(mu)
            let prev = &factors[t - 1];
            for c in 0..6 {
                let mut e = [0.0; 6];
                e[c] = mu[c];
                let col = cholesky_solve(prev, &e);
                for a in 0..6 {
                    b[a][c] -= mu[a] * col[a];
                }
            }
            let y = cholesky_solve(prev, &r[t - 1]);
            for a in 0..6 {
                r[t][a] += mu[a] * y[a];
            }
            // restore exact symmetry lost to rounding
            for a in 0..6 {
                for c in 0..a {
                    let m = 0.5 * (b[a][c] + b[c][a]);
                    b[a][c] = m;
                    b[c][a] = m;
                }
            }
        }
        factors.push(cholesky(&b).ok_or_else(|| invalid_param("metric blocks must be positive definite"))?);
    }
    let mut x = vec![[0.0; 6]; n];
    x[n - 1] = cholesky_solve(&factors[n - 1], &r[n - 1]);
    for t in (0..n - 1).rev() {
        let v: [f64; 6] = std::array::from_fn(|a| r[t][a] + mu[a] * x[t + 1][a]);
        x[t] = cholesky_solve(&factors[t], &v);
    }
    Ok(MotionTrace::new(x.into_iter().map(RigidParams::from_array).collect()))
}

/// `sum_c mu_c / 2 |D theta_c|^2`.
pub fn weighted_smoothness_value(trace: &MotionTrace, mu: [f64; 6]) -> f64 {
    trace
        .params
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].to_array(), w[1].to_array());
            (0..6).map(|c| mu[c] * (b[c] - a[c]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        * 0.5
}

/// `g(theta)`.
pub fn smoothness_value(trace: &MotionTrace) -> f64 {
    trace
        .params
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].to_array(), w[1].to_array());
            a.iter().zip(&b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>()
        })
        .sum::<f64>()
        * 0.5
}

/// Piecewise-linear interpolation weights from `m` uniform knots onto `n_t` times.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotInterpolation {
    n_t: usize,
    m: usize,
    /// For each time index: lower knot and weight of the upper knot.
    taps: Vec<(usize, f64)>,
}

impl KnotInterpolation {
    pub fn new(m: usize, n_t: usize) -> Result<Self> {
        if m < 1 || m > n_t {
            return Err(invalid_param(format!("knot count {m} must lie in 1..={n_t}")));
        }
        let taps = (0..n_t)
            .map(|t| {
                if m == 1 {
                    return (0, 0.0);
                }
                let pos = if n_t == 1 { 0.0 } else { t as f64 * (m - 1) as f64 / (n_t - 1) as f64 };
                let lo = (pos.floor() as usize).min(m - 2);
                (lo, pos - lo as f64)
            })
            .collect();
        Ok(Self { n_t, m, taps })
    }

    pub fn n_knots(&self) -> usize {
        self.m
    }

    pub fn expand(&self, knots: &MotionTrace) -> Result<MotionTrace> {
        knots.check_len(self.m)?;
        let ch = knots.to_channels();
        let out: [Vec<f64>; 6] = std::array::from_fn(|c| {
            self.taps
                .iter()
                .map(|&(lo, f)| if self.m == 1 { ch[c][0] } else { ch[c][lo] * (1.0 - f) + ch[c][lo + 1] * f })
                .collect()
        });
        Ok(MotionTrace::from_channels(&out))
    }

    /// Transpose of [`KnotInterpolation::expand`] applied to per-time vectors.
    pub fn restrict(&self, per_time: &[[f64; 6]]) -> Vec<[f64; 6]> {
        let mut out = vec![[0.0; 6]; self.m];
        for (&(lo, f), v) in self.taps.iter().zip(per_time) {
            for c in 0..6 {
                if self.m == 1 {
                    out[0][c] += v[c];
                } else {
                    out[lo][c] += v[c] * (1.0 - f);
                    out[lo + 1][c] += v[c] * f;
                }
            }
        }
        out
    }

    /// Block-diagonal majorizer of `E^T diag(H_t) E` for per-time 6x6 blocks:
    /// every time index contributes to its two knots with its interpolation
    /// weights, which bounds the coupled quadratic by convexity.
    pub fn restrict_blocks(&self, per_time: &[Block]) -> Vec<Block> {
        let mut out = vec![[[0.0; 6]; 6]; self.m];
        for (&(lo, f), h) in self.taps.iter().zip(per_time) {
            let parts: &[(usize, f64)] = if self.m == 1 { &[(0, 1.0)] } else { &[(lo, 1.0 - f), (lo + 1, f)] };
            for &(j, e) in parts {
                for a in 0..6 {
                    for b in 0..6 {
                        out[j][a][b] += e * h[a][b];
                    }
                }
            }
        }
        out
    }

    /// Knot values sampled from a full trace at the knot times (nearest index).
    pub fn sample(&self, trace: &MotionTrace) -> Result<MotionTrace> {
        trace.check_len(self.n_t)?;
        let params = (0..self.m)
            .map(|j| {
                let t = if self.m == 1 {
                    0
                } else {
                    ((j as f64 * (self.n_t - 1) as f64 / (self.m - 1) as f64).round() as usize).min(self.n_t - 1)
                };
                trace.params[t]
            })
            .collect();
        Ok(MotionTrace::new(params))
    }
}

/// Expands a trace given on `m` uniformly spaced knots to `n_t` time indices.
pub fn coarse_time_parameterize(knots: &MotionTrace, n_t: usize) -> Result<MotionTrace> {
    KnotInterpolation::new(knots.len(), n_t)?.expand(knots)
}
