//! Motion-perturbed Fourier acquisition model and the data misfit
//! `f(u, theta) = sum_t 1/2 || S_t F_{theta_t} u - d_t ||^2` with its gradients.
//!
//! For a pose `theta = (tau, phi)` the acquired sample at frequency `k` is
//! `N^{-1/2} exp(-i k.tau) U(R_phi^T k)` where `U(q) = sum_x u(x) exp(-i q.x)`.
//! All rotated frequencies of all readouts go through one batched type-2 NUFFT.

use rayon::prelude::*;

use crate::error::{invalid_input, MocoError, Result};
use crate::fft::{fft3_centered, ifft3_centered};
use crate::geometry::{rotation_derivatives, transpose, mat_t_vec, mat_vec, MotionTrace, RigidParams, Vec3};
use crate::nufft::{in_band, NufftConfig, NufftOperator, NufftPlan, OutOfBand};
use crate::pattern::{KSpaceData, PatternKind, SamplingPattern, freq_range};
use crate::volume::{stable_sum_pair, voxel_count, ComplexVolume3D, C64};

/// Forward operator for a fixed sampling pattern and image grid.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pattern: SamplingPattern,
    nufft: NufftOperator,
    kpoints: Vec<Vec3>,
    scale: f64,
    policy: OutOfBand,
}

/// Motion-dependent part of the operator: interpolation geometry and the
/// per-sample factor `N^{-1/2} exp(-i k.tau_t)`.
#[derive(Debug, Clone)]
pub struct MotionPlan {
    plan: NufftPlan,
    factor: Vec<C64>,
}

impl MotionPlan {
    /// Samples zeroed because their rotated frequency left the band.
    pub fn out_of_band(&self) -> usize {
        self.plan.out_of_band()
    }
}

/// Per-line gradient of the misfit with respect to the six pose parameters,
/// plus the Gauss-Newton block `Re sum conj(dm/dtheta_a) dm/dtheta_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGradient {
    pub grad: Vec<[f64; 6]>,
    pub hessian: Vec<[[f64; 6]; 6]>,
}

impl ThetaGradient {
    /// Diagonal of every Gauss-Newton block.
    pub fn curvature(&self) -> Vec<[f64; 6]> {
        self.hessian.iter().map(|h| std::array::from_fn(|a| h[a][a])).collect()
    }
}

impl ForwardModel {
    pub fn new(pattern: &SamplingPattern, cfg: &NufftConfig) -> Result<Self> {
        Self::with_policy(pattern, cfg, OutOfBand::Zero)
    }

    pub fn with_policy(pattern: &SamplingPattern, cfg: &NufftConfig, policy: OutOfBand) -> Result<Self> {
        let nufft = NufftOperator::new(pattern.dims(), pattern.voxel_size(), cfg)?;
        Ok(Self {
            kpoints: pattern.kpoints(),
            scale: 1.0 / (voxel_count(pattern.dims()) as f64).sqrt(),
            pattern: pattern.clone(),
            nufft,
            policy,
        })
    }

    pub fn pattern(&self) -> &SamplingPattern {
        &self.pattern
    }

    pub fn kpoints(&self) -> &[Vec3] {
        &self.kpoints
    }

    pub fn plan(&self, trace: &MotionTrace) -> Result<MotionPlan> {
        let n_t = self.pattern.n_lines();
        trace.check_len(n_t)?;
        let nr = self.pattern.n_readout();
        let vs = self.pattern.voxel_size();
        let mut normalized = Vec::with_capacity(self.kpoints.len());
        let mut factor = Vec::with_capacity(self.kpoints.len());
        for (t, pose) in trace.params.iter().enumerate() {
            let r = pose.matrix();
            for k in &self.kpoints[t * nr..(t + 1) * nr] {
                let q = mat_t_vec(&r, *k);
                let q = [q[0] * vs[0], q[1] * vs[1], q[2] * vs[2]];
                if !in_band(&q) {
                    if self.policy == OutOfBand::Reject {
                        let value = q.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                        return Err(MocoError::BandLimit {
                            location: format!("readout t={t}"),
                            value,
                        });
                    }
                    factor.push(C64::default());
                } else {
                    let phase = -(k[0] * pose.tau[0] + k[1] * pose.tau[1] + k[2] * pose.tau[2]);
                    factor.push(C64::from_polar(self.scale, phase));
                }
                normalized.push(q);
            }
        }
        let plan = self.nufft.plan(&normalized, OutOfBand::Zero)?;
        Ok(MotionPlan { plan, factor })
    }

    fn check_image(&self, u: &ComplexVolume3D) -> Result<()> {
        if u.dims() != self.pattern.dims() {
            return Err(invalid_input(format!(
                "image dims {:?} do not match pattern dims {:?}",
                u.dims(),
                self.pattern.dims()
            )));
        }
        Ok(())
    }

    /// Model samples `S F_theta u`, line-major.
    pub fn apply(&self, plan: &MotionPlan, u: &ComplexVolume3D) -> Result<Vec<C64>> {
        self.check_image(u)?;
        let mut out = self.nufft.forward(u.data(), &plan.plan)?;
        out.par_iter_mut().zip(plan.factor.par_iter()).for_each(|(v, f)| *v *= f);
        Ok(out)
    }

    /// Adjoint `(S F_theta)^H samples`.
    pub fn adjoint(&self, plan: &MotionPlan, samples: &[C64]) -> Result<ComplexVolume3D> {
        if samples.len() != plan.factor.len() {
            return Err(invalid_input(format!(
                "{} samples for {} pattern samples",
                samples.len(),
                plan.factor.len()
            )));
        }
        let weighted: Vec<C64> = samples
            .par_iter()
            .zip(plan.factor.par_iter())
            .map(|(s, f)| s * f.conj())
            .collect();
        let img = self.nufft.adjoint(&weighted, &plan.plan)?;
        ComplexVolume3D::from_data(self.pattern.dims(), self.pattern.voxel_size(), img)
    }

    fn check_data(&self, data: &KSpaceData) -> Result<()> {
        if data.pattern().n_samples() != self.pattern.n_samples() || data.pattern().dims() != self.pattern.dims() {
            return Err(invalid_input("k-space data does not match the forward model pattern"));
        }
        Ok(())
    }

    pub fn residual(&self, plan: &MotionPlan, u: &ComplexVolume3D, data: &KSpaceData) -> Result<Vec<C64>> {
        self.check_data(data)?;
        let mut r = self.apply(plan, u)?;
        r.par_iter_mut().zip(data.samples().par_iter()).for_each(|(m, d)| *m -= d);
        Ok(r)
    }

    pub fn misfit(&self, u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData) -> Result<f64> {
        let plan = self.plan(trace)?;
        let r = self.residual(&plan, u, data)?;
        Ok(half_norm_sqr(&r))
    }

    pub fn grad_u(&self, u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData) -> Result<ComplexVolume3D> {
        let plan = self.plan(trace)?;
        let r = self.residual(&plan, u, data)?;
        self.adjoint(&plan, &r)
    }

    /// Gradient with respect to every pose given precomputed model samples
    /// `model = S F_theta u` under `plan`.
    pub fn grad_theta_with(
        &self,
        plan: &MotionPlan,
        trace: &MotionTrace,
        u: &ComplexVolume3D,
        model: &[C64],
        data: &KSpaceData,
    ) -> Result<ThetaGradient> {
        self.check_image(u)?;
        self.check_data(data)?;
        let n_t = self.pattern.n_lines();
        trace.check_len(n_t)?;
        let nr = self.pattern.n_readout();

        // frequency gradient of U at the rotated points: NUFFTs of (-i x_l) u
        let dims = u.dims();
        let vs = u.voxel_size();
        let mut dq: Vec<Vec<C64>> = Vec::with_capacity(3);
        for l in 0..3 {
            let weighted: Vec<C64> = (0..u.len())
                .into_par_iter()
                .map(|idx| {
                    let i = match l {
                        0 => idx % dims[0],
                        1 => (idx / dims[0]) % dims[1],
                        _ => idx / (dims[0] * dims[1]),
                    };
                    let x = crate::volume::centered_coord(i, dims[l]) * vs[l];
                    u.data()[idx] * C64::new(0.0, -x)
                })
                .collect();
            dq.push(self.nufft.forward(&weighted, &plan.plan)?);
        }

        let per_line: Vec<([f64; 6], [[f64; 6]; 6])> = (0..n_t)
            .into_par_iter()
            .map(|t| {
                let pose = &trace.params[t];
                let drt = rotation_derivatives(pose.phi).map(|d| transpose(&d));
                let mut g = [0.0; 6];
                let mut h = [[0.0; 6]; 6];
                for s in t * nr..(t + 1) * nr {
                    let f = plan.factor[s];
                    if f == C64::default() {
                        continue;
                    }
                    let k = self.kpoints[s];
                    let m = model[s];
                    let res = m - data.samples()[s];
                    let grad_q = [dq[0][s], dq[1][s], dq[2][s]];
                    let mut dm = [C64::default(); 6];
                    for j in 0..3 {
                        dm[j] = C64::new(0.0, -k[j]) * m;
                        let dk = mat_vec(&drt[j], k);
                        dm[3 + j] = f * (grad_q[0] * dk[0] + grad_q[1] * dk[1] + grad_q[2] * dk[2]);
                    }
                    for a in 0..6 {
                        g[a] += res.re * dm[a].re + res.im * dm[a].im;
                        for b in a..6 {
                            h[a][b] += dm[a].re * dm[b].re + dm[a].im * dm[b].im;
                        }
                    }
                }
                for a in 0..6 {
                    for b in 0..a {
                        h[a][b] = h[b][a];
                    }
                }
                (g, h)
            })
            .collect();
        let (grad, hessian) = per_line.into_iter().unzip();
        Ok(ThetaGradient { grad, hessian })
    }

    pub fn grad_theta(&self, u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData) -> Result<ThetaGradient> {
        let plan = self.plan(trace)?;
        let model = self.apply(&plan, u)?;
        self.grad_theta_with(&plan, trace, u, &model, data)
    }

    /// Largest eigenvalue of `A^H A` at a fixed trace by power iteration.
    pub fn lipschitz(&self, trace: &MotionTrace, iters: usize, seed: u64) -> Result<f64> {
        use rand::{Rng, SeedableRng};
        let plan = self.plan(trace)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = self.pattern.dims();
        let mut x = ComplexVolume3D::from_fn(dims, self.pattern.voxel_size(), |_, _, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })?;
        let mut lambda = 0.0;
        for _ in 0..iters.max(1) {
            let n = x.norm();
            if n == 0.0 {
                return Ok(0.0);
            }
            x.scale(1.0 / n);
            let y = self.adjoint(&plan, &self.apply(&plan, &x)?)?;
            lambda = x.dot_re(&y);
            x = y;
        }
        Ok(lambda)
    }
}

pub fn half_norm_sqr(r: &[C64]) -> f64 {
    0.5 * stable_sum_pair(r, r, |a, _| a.iter().map(|v| v.norm_sqr()).sum())
}

/// Acquires `vol` under `trace` on `pattern`: `S_t F_{theta_t} vol` for every line.
pub fn perturbed_fourier(
    vol: &ComplexVolume3D,
    trace: &MotionTrace,
    pattern: &SamplingPattern,
    cfg: &NufftConfig,
) -> Result<KSpaceData> {
    vol.check_finite()?;
    let fm = ForwardModel::new(pattern, cfg)?;
    let plan = fm.plan(trace)?;
    let samples = fm.apply(&plan, vol)?;
    KSpaceData::new(pattern.clone(), samples, None)
}

/// Adjoint of [`perturbed_fourier`] onto the pattern grid.
pub fn perturbed_fourier_adjoint(data: &KSpaceData, trace: &MotionTrace, cfg: &NufftConfig) -> Result<ComplexVolume3D> {
    let fm = ForwardModel::new(data.pattern(), cfg)?;
    let plan = fm.plan(trace)?;
    fm.adjoint(&plan, data.samples())
}

pub fn misfit(u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData, cfg: &NufftConfig) -> Result<f64> {
    ForwardModel::new(data.pattern(), cfg)?.misfit(u, trace, data)
}

pub fn grad_u(u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData, cfg: &NufftConfig) -> Result<ComplexVolume3D> {
    ForwardModel::new(data.pattern(), cfg)?.grad_u(u, trace, data)
}

pub fn grad_theta(u: &ComplexVolume3D, trace: &MotionTrace, data: &KSpaceData, cfg: &NufftConfig) -> Result<ThetaGradient> {
    ForwardModel::new(data.pattern(), cfg)?.grad_theta(u, trace, data)
}

/// Zero-filled reconstruction: the adjoint at the identity trace.
pub fn zero_filled(data: &KSpaceData, cfg: &NufftConfig) -> Result<ComplexVolume3D> {
    let trace = MotionTrace::identity(data.pattern().n_lines());
    perturbed_fourier_adjoint(data, &trace, cfg)
}

/// Fully sampled pattern on the grid of `vol`, z-outer then y, readout along x.
pub fn full_pattern(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<SamplingPattern> {
    let (yl, yh) = freq_range(dims[1]);
    let (zl, zh) = freq_range(dims[2]);
    let coords = (zl..zh).flat_map(|z| (yl..yh).map(move |y| [y, z])).collect();
    SamplingPattern::new(dims, voxel_size, 0, coords, PatternKind::Full)
}

/// Rigidly moves a volume, `out(x) = vol(R^T (x - tau))`, by band-limited
/// resampling through the perturbed Fourier transform.
pub fn move_volume(vol: &ComplexVolume3D, params: &RigidParams, cfg: &NufftConfig) -> Result<ComplexVolume3D> {
    let pattern = full_pattern(vol.dims(), vol.voxel_size())?;
    let trace = MotionTrace::new(vec![*params; pattern.n_lines()]);
    let data = perturbed_fourier(vol, &trace, &pattern, cfg)?;
    let mut spectrum = vol.zeros_like();
    for t in 0..pattern.n_lines() {
        for r in 0..pattern.n_readout() {
            let idx = pattern.spectrum_index(pattern.sample_index(t, r));
            spectrum.data_mut()[idx] = data.line(t)[r];
        }
    }
    ifft3_centered(&spectrum)
}

/// Reorders a centred spectrum into pattern order (motion-free acquisition).
pub fn sample_spectrum(spectrum: &ComplexVolume3D, pattern: &SamplingPattern) -> Vec<C64> {
    let mut out = Vec::with_capacity(pattern.n_samples());
    for t in 0..pattern.n_lines() {
        for r in 0..pattern.n_readout() {
            out.push(spectrum.data()[pattern.spectrum_index(pattern.sample_index(t, r))]);
        }
    }
    out
}

/// Motion-free acquisition through the uniform FFT.
pub fn acquire_static(vol: &ComplexVolume3D, pattern: &SamplingPattern) -> Result<Vec<C64>> {
    Ok(sample_spectrum(&fft3_centered(vol)?, pattern))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> ComplexVolume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume3D::from_fn(dims, [1.0; 3], |_, _, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn random_trace(n: usize, seed: u64, tau: f64, phi: f64) -> MotionTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionTrace::new(
            (0..n)
                .map(|_| {
                    RigidParams::new(
                        std::array::from_fn(|_| rng.random_range(-tau..tau)),
                        std::array::from_fn(|_| rng.random_range(-phi..phi)),
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn zero_data_adjoint_is_zero() {
        let p = full_pattern([4; 3], [1.0; 3]).unwrap();
        let d = KSpaceData::new(p.clone(), vec![C64::default(); p.n_samples()], None).unwrap();
        let v = perturbed_fourier_adjoint(&d, &random_trace(p.n_lines(), 1, 1.0, 0.1), &NufftConfig::default()).unwrap();
        assert!(v.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn zero_image_misfit_is_half_data_energy() {
        let vol = random_volume([6; 3], 2);
        let p = full_pattern([6; 3], [1.0; 3]).unwrap();
        let trace = random_trace(p.n_lines(), 3, 0.5, 0.05);
        let cfg = NufftConfig::default();
        let d = perturbed_fourier(&vol, &trace, &p, &cfg).unwrap();
        let f0 = misfit(&vol.zeros_like(), &trace, &d, &cfg).unwrap();
        assert!((f0 - 0.5 * d.norm_sqr()).abs() < 1e-12 * d.norm_sqr());
        let f = misfit(&vol, &trace, &d, &cfg).unwrap();
        assert!(f < 1e-10 * d.norm_sqr());
    }

    #[test]
    fn trace_length_mismatch_is_rejected() {
        let p = full_pattern([4; 3], [1.0; 3]).unwrap();
        let fm = ForwardModel::new(&p, &NufftConfig::default()).unwrap();
        assert!(matches!(fm.plan(&MotionTrace::identity(3)), Err(MocoError::InvalidInput(_))));
    }

    #[test]
    fn reject_policy_names_the_readout() {
        let p = full_pattern([8; 3], [1.0; 3]).unwrap();
        let fm = ForwardModel::with_policy(&p, &NufftConfig::default(), OutOfBand::Reject).unwrap();
        let mut trace = MotionTrace::identity(p.n_lines());
        trace.params[8] = RigidParams::new([0.0; 3], [0.3, 0.0, 0.0]).unwrap();
        match fm.plan(&trace) {
            Err(MocoError::BandLimit { location, .. }) => assert_eq!(location, "readout t=8"),
            other => panic!("expected band-limit error, got {other:?}"),
        }
        let lenient = ForwardModel::new(&p, &NufftConfig::default()).unwrap();
        assert!(lenient.plan(&trace).unwrap().out_of_band() > 0);
    }

    #[test]
    fn move_volume_by_whole_voxels_is_a_shift() {
        let vol = random_volume([8; 3], 4);
        let moved = move_volume(&vol, &RigidParams::new([2.0, 0.0, -1.0], [0.0; 3]).unwrap(), &NufftConfig::default()).unwrap();
        for iz in 0..8 {
            for iy in 0..8 {
                for ix in 0..8 {
                    let src = vol.get((ix + 6) % 8, iy, (iz + 1) % 8);
                    assert!((moved.get(ix, iy, iz) - src).norm() < 1e-5);
                }
            }
        }
    }
}
