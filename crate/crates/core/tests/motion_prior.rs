use moco_core::motion_prior::{
    coarse_time_parameterize, prox_motion_smoothness, prox_motion_smoothness_weighted, smoothness_value,
    KnotInterpolation,
};
use moco_core::{MotionTrace, RigidParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_trace(n: usize, seed: u64) -> MotionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MotionTrace::new(
        (0..n)
            .map(|_| RigidParams::from_array(std::array::from_fn(|_| rng.random_range(-0.5..0.5))))
            .collect(),
    )
}

/// Gaussian elimination with partial pivoting on a dense copy.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

#[test]
fn prox_matches_dense_solver() {
    let z = random_trace(4, 1);
    let (alpha, mu) = (0.8, 1.7);
    let out = prox_motion_smoothness(&z, alpha, mu).unwrap();
    let c = alpha * mu;
    // I + c D^T D for four time points
    let a = vec![
        vec![1.0 + c, -c, 0.0, 0.0],
        vec![-c, 1.0 + 2.0 * c, -c, 0.0],
        vec![0.0, -c, 1.0 + 2.0 * c, -c],
        vec![0.0, 0.0, -c, 1.0 + c],
    ];
    for ch in 0..6 {
        let x = dense_solve(a.clone(), z.channel(ch));
        for (p, q) in out.channel(ch).iter().zip(&x) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}

#[test]
fn constant_trace_is_a_fixed_point() {
    let p = RigidParams::from_array([1.0, -2.0, 0.5, 0.1, -0.05, 0.02]);
    let z = MotionTrace::new(vec![p; 17]);
    let out = prox_motion_smoothness(&z, 1.0, 50.0).unwrap();
    for q in &out.params {
        for (a, b) in q.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn huge_weight_gives_the_mean() {
    let z = random_trace(25, 2);
    let out = prox_motion_smoothness(&z, 1.0, 1e8).unwrap();
    for ch in 0..6 {
        let c = z.channel(ch);
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        assert!(out.channel(ch).iter().all(|v| (v - mean).abs() < 1e-4));
    }
}

#[test]
fn prox_minimizes_its_objective() {
    let z = random_trace(12, 3);
    let (alpha, mu) = (0.5, 2.0);
    let out = prox_motion_smoothness(&z, alpha, mu).unwrap();
    let objective = |t: &MotionTrace| {
        let d: f64 = t
            .params
            .iter()
            .zip(&z.params)
            .map(|(a, b)| a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum();
        0.5 * d + alpha * mu * smoothness_value(t)
    };
    let best = objective(&out);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let perturbed = MotionTrace::new(
            out.params
                .iter()
                .map(|p| {
                    let mut a = p.to_array();
                    a.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
                    RigidParams::from_array(a)
                })
                .collect(),
        );
        assert!(objective(&perturbed) >= best);
    }
}

#[test]
fn weighted_prox_with_unit_weights_matches_plain() {
    let z = random_trace(9, 5);
    let a = prox_motion_smoothness(&z, 1.0, 3.0).unwrap();
    let b = prox_motion_smoothness_weighted(&z, &vec![[1.0; 6]; 9], 3.0).unwrap();
    for (p, q) in a.params.iter().zip(&b.params) {
        for (x, y) in p.to_array().iter().zip(q.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(prox_motion_smoothness_weighted(&z, &vec![[0.0; 6]; 9], 3.0).is_err());
    assert!(prox_motion_smoothness(&z, 0.0, 1.0).is_err());
}

#[test]
fn knot_counts_at_the_extremes() {
    let knots = random_trace(1, 6);
    let t = coarse_time_parameterize(&knots, 7).unwrap();
    assert!(t.params.iter().all(|p| *p == knots.params[0]));
    let full = random_trace(7, 7);
    assert_eq!(coarse_time_parameterize(&full, 7).unwrap(), full);
}

#[test]
fn restrict_is_the_transpose_of_expand() {
    let interp = KnotInterpolation::new(4, 11).unwrap();
    let knots = random_trace(4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<[f64; 6]> = (0..11).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let ex = interp.expand(&knots).unwrap();
    let lhs: f64 = ex.params.iter().zip(&y).map(|(p, v)| p.to_array().iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).sum();
    let r = interp.restrict(&y);
    let rhs: f64 = knots.params.iter().zip(&r).map(|(p, v)| p.to_array().iter().zip(v).map(|(a, b)| a * b).sum::<f64>()).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

proptest! {
    #[test]
    fn prox_is_nonexpansive(s1 in 0u64..10_000, s2 in 0u64..10_000, n in 2usize..40, mu in 0.01f64..100.0) {
        let a = random_trace(n, s1);
        let b = random_trace(n, s2 + 20_000);
        let pa = prox_motion_smoothness(&a, 1.0, mu).unwrap();
        let pb = prox_motion_smoothness(&b, 1.0, mu).unwrap();
        let dist = |x: &MotionTrace, y: &MotionTrace| -> f64 {
            x.params.iter().zip(&y.params)
                .map(|(p, q)| p.to_array().iter().zip(q.to_array()).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) * (1.0 + 1e-12));
        prop_assert!(smoothness_value(&pa) <= smoothness_value(&a) + 1e-12);
    }
}

#[test]
fn metric_prox_matches_dense_solver() {
    use moco_core::motion_prior::prox_motion_smoothness_metric;
    let n = 5;
    let z = random_trace(n, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let metric: Vec<[[f64; 6]; 6]> = (0..n)
        .map(|_| {
            // J^T J + 0.1 I from a random 8x6 Jacobian
            let j: Vec<[f64; 6]> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
            std::array::from_fn(|a| {
                std::array::from_fn(|b| j.iter().map(|r| r[a] * r[b]).sum::<f64>() + if a == b { 0.1 } else { 0.0 })
            })
        })
        .collect();
    let mu = [0.5, 1.0, 2.0, 0.1, 3.0, 0.7];
    let out = prox_motion_smoothness_metric(&z, &metric, mu).unwrap();
    // dense 6n x 6n normal equations, index t * 6 + c
    let m = 6 * n;
    let mut a = vec![vec![0.0; m]; m];
    let mut b = vec![0.0; m];
    for t in 0..n {
        let zt = z.params[t].to_array();
        for r in 0..6 {
            for c in 0..6 {
                a[t * 6 + r][t * 6 + c] += metric[t][r][c];
                b[t * 6 + r] += metric[t][r][c] * zt[c];
            }
        }
        for c in 0..6 {
            if t + 1 < n {
                a[t * 6 + c][t * 6 + c] += mu[c];
                a[(t + 1) * 6 + c][(t + 1) * 6 + c] += mu[c];
                a[t * 6 + c][(t + 1) * 6 + c] -= mu[c];
                a[(t + 1) * 6 + c][t * 6 + c] -= mu[c];
            }
        }
    }
    let x = dense_solve(a, b);
    for t in 0..n {
        let o = out.params[t].to_array();
        for c in 0..6 {
            assert!((o[c] - x[t * 6 + c]).abs() < 1e-10);
        }
    }
    // diagonal metric reduces to the weighted prox
    let diag: Vec<[[f64; 6]; 6]> = metric
        .iter()
        .map(|w| std::array::from_fn(|a| std::array::from_fn(|b| if a == b { w[a][a] } else { 0.0 })))
        .collect();
    let weights: Vec<[f64; 6]> = metric.iter().map(|w| std::array::from_fn(|a| w[a][a])).collect();
    let p = prox_motion_smoothness_metric(&z, &diag, [1.3; 6]).unwrap();
    let q = prox_motion_smoothness_weighted(&z, &weights, 1.3).unwrap();
    for (u, v) in p.params.iter().zip(&q.params) {
        for (x, y) in u.to_array().iter().zip(v.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
