//! Synthetic ground truth: ellipsoid phantoms with several contrasts sharing one
//! geometry, stepwise motion scripts, Cartesian sampling patterns and noisy
//! motion-corrupted acquisitions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, MocoError, Result};
use crate::forward::{move_volume, perturbed_fourier};
use crate::geometry::{rotation_matrix, MotionTrace, RigidParams};
use crate::nufft::NufftConfig;
use crate::pattern::{freq_range, pe_axes, KSpaceData, PatternKind, SamplingPattern};
use crate::volume::{centered_coord, ComplexVolume3D, Dims, C64};

/// One ellipsoid; intensities are added to every voxel whose centre lies inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// Centre in mm relative to the FOV centre.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Orientation as plane rotation angles `(xy, xz, yz)` in degrees.
    #[serde(default)]
    pub angles_deg: [f64; 3],
    /// One additive intensity per contrast channel.
    pub intensities: Vec<f64>,
    /// Marks structures present only where their intensity is non-zero
    /// (e.g. a lesion visible in one contrast); skipped unless lesions are enabled.
    #[serde(default)]
    pub lesion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size: [f64; 3],
    pub contrasts: usize,
    pub ellipsoids: Vec<Ellipsoid>,
    #[serde(default)]
    pub include_lesions: bool,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let spec_err = |m: String| Err(MocoError::InvalidSpec(m));
        if self.dims.iter().any(|&d| d < 2) {
            return spec_err(format!("dims must be >= 2, got {:?}", self.dims));
        }
        if self.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return spec_err("voxel size must be positive".into());
        }
        if self.contrasts < 1 {
            return spec_err("at least one contrast channel is required".into());
        }
        for (i, e) in self.ellipsoids.iter().enumerate() {
            if e.intensities.len() != self.contrasts {
                return spec_err(format!(
                    "ellipsoid {i} has {} intensities for {} contrasts",
                    e.intensities.len(),
                    self.contrasts
                ));
            }
            let finite = e.center.iter().chain(&e.semi_axes).chain(&e.angles_deg).chain(&e.intensities);
            if finite.clone().any(|v| !v.is_finite()) || e.semi_axes.iter().any(|&a| a <= 0.0) {
                return spec_err(format!("ellipsoid {i} has invalid geometry or intensity"));
            }
            let r = rotation_matrix(e.angles_deg.map(f64::to_radians))?;
            for j in 0..3 {
                let half = (0..3).map(|k| (r[j][k] * e.semi_axes[k]).powi(2)).sum::<f64>().sqrt();
                let lo = centered_coord(0, self.dims[j]) * self.voxel_size[j];
                let hi = centered_coord(self.dims[j] - 1, self.dims[j]) * self.voxel_size[j];
                if e.center[j] - half < lo - 1e-9 || e.center[j] + half > hi + 1e-9 {
                    return spec_err(format!("ellipsoid {i} extends outside the field of view along axis {j}"));
                }
            }
        }
        Ok(())
    }
}

/// Voxelises the spec, one volume per contrast channel.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Vec<ComplexVolume3D>> {
    spec.validate()?;
    let mut channels: Vec<Vec<f64>> = vec![vec![0.0; spec.dims.iter().product()]; spec.contrasts];
    let d = spec.dims;
    for e in spec.ellipsoids.iter().filter(|e| spec.include_lesions || !e.lesion) {
        let r = rotation_matrix(e.angles_deg.map(f64::to_radians))?;
        for iz in 0..d[2] {
            for iy in 0..d[1] {
                for ix in 0..d[0] {
                    let p = [
                        centered_coord(ix, d[0]) * spec.voxel_size[0] - e.center[0],
                        centered_coord(iy, d[1]) * spec.voxel_size[1] - e.center[1],
                        centered_coord(iz, d[2]) * spec.voxel_size[2] - e.center[2],
                    ];
                    // body frame: R^T p
                    let mut s = 0.0;
                    for k in 0..3 {
                        let q = r[0][k] * p[0] + r[1][k] * p[1] + r[2][k] * p[2];
                        s += (q / e.semi_axes[k]).powi(2);
                    }
                    if s <= 1.0 {
                        let idx = ix + d[0] * (iy + d[1] * iz);
                        for (c, ch) in channels.iter_mut().enumerate() {
                            ch[idx] += e.intensities[c];
                        }
                    }
                }
            }
        }
    }
    channels
        .iter()
        .map(|ch| ComplexVolume3D::from_real(spec.dims, spec.voxel_size, ch))
        .collect()
}

/// Head-like two-contrast phantom on any grid. Channel 0 is the target
/// contrast, channel 1 the reference; both share every boundary.
pub fn two_contrast_spec(dims: Dims, voxel_size: [f64; 3]) -> PhantomSpec {
    // geometry in units of the half field of view (minus one voxel margin)
    let half: [f64; 3] = std::array::from_fn(|j| (dims[j] / 2 - 1) as f64 * voxel_size[j]);
    let shapes: [([f64; 3], [f64; 3], [f64; 3], [f64; 2], bool); 10] = [
        ([0.0, 0.0, 0.0], [0.80, 0.90, 0.78], [0.0, 0.0, 0.0], [0.80, 0.60], false),
        ([0.0, 0.0, 0.0], [0.72, 0.82, 0.70], [0.0, 0.0, 0.0], [-0.30, 0.25], false),
        ([-0.17, 0.06, 0.10], [0.10, 0.26, 0.16], [18.0, 0.0, 0.0], [0.55, -0.50], false),
        ([0.17, 0.06, 0.10], [0.10, 0.26, 0.16], [-18.0, 0.0, 0.0], [0.55, -0.50], false),
        ([0.0, -0.40, -0.20], [0.16, 0.10, 0.12], [0.0, 0.0, 0.0], [0.30, 0.20], false),
        ([-0.32, -0.25, -0.12], [0.15, 0.12, 0.20], [0.0, 30.0, 0.0], [0.20, -0.20], false),
        ([0.28, -0.22, -0.30], [0.10, 0.10, 0.10], [0.0, 0.0, 0.0], [-0.25, 0.35], false),
        ([0.0, 0.45, -0.25], [0.26, 0.10, 0.12], [0.0, 0.0, 20.0], [0.25, 0.30], false),
        ([0.05, 0.10, 0.45], [0.30, 0.20, 0.08], [10.0, 0.0, 0.0], [-0.15, 0.40], false),
        ([-0.30, 0.35, 0.28], [0.07, 0.06, 0.06], [0.0, 0.0, 0.0], [0.40, 0.0], true),
    ];
    let ellipsoids = shapes
        .iter()
        .map(|(c, a, ang, val, lesion)| Ellipsoid {
            center: std::array::from_fn(|j| c[j] * half[j]),
            semi_axes: std::array::from_fn(|j| a[j] * half[j]),
            angles_deg: *ang,
            intensities: val.to_vec(),
            lesion: *lesion,
        })
        .collect();
    PhantomSpec {
        dims,
        voxel_size,
        contrasts: 2,
        ellipsoids,
        include_lesions: false,
    }
}

/// Named phantom presets.
pub fn phantom_preset(name: &str) -> Result<PhantomSpec> {
    match name {
        "two-contrast-64" => Ok(two_contrast_spec([64; 3], [1.0; 3])),
        "two-contrast-32" => Ok(two_contrast_spec([32; 3], [2.0; 3])),
        other => Err(MocoError::InvalidSpec(format!("unknown phantom preset '{other}'"))),
    }
}

/// Piecewise-constant motion: identity until the first transition, then one
/// random pose per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub n_poses: usize,
    pub poses: Vec<RigidParams>,
    /// First time index of every non-identity segment.
    pub transitions: Vec<usize>,
    pub seed: u64,
    pub trace: MotionTrace,
}

pub fn make_motion_script(
    n_t: usize,
    n_poses: usize,
    max_tau_mm: f64,
    max_phi_deg: f64,
    seed: u64,
) -> Result<MotionScript> {
    if !(max_tau_mm > 0.0 && max_tau_mm.is_finite() && max_phi_deg > 0.0 && max_phi_deg.is_finite()) {
        return Err(invalid_param("motion bounds must be positive"));
    }
    if n_poses < 1 || n_poses >= n_t {
        return Err(invalid_param(format!("{n_poses} pose changes do not fit {n_t} time points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = n_t as f64 / (n_poses + 1) as f64;
    let mut transitions = Vec::with_capacity(n_poses);
    for i in 0..n_poses {
        let jitter = if spacing >= 4.0 { rng.random_range(-0.25..0.25) * spacing } else { 0.0 };
        let t = ((i + 1) as f64 * spacing + jitter).round() as usize;
        let lo = transitions.last().map_or(1, |&p: &usize| p + 1);
        let hi = n_t - (n_poses - i);
        transitions.push(t.clamp(lo, hi));
    }
    let mut draw = |max: f64| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * rng.random_range(0.3..=1.0) * max
    };
    let mut poses = vec![RigidParams::IDENTITY];
    for _ in 0..n_poses {
        let tau = std::array::from_fn(|_| draw(max_tau_mm));
        let phi = std::array::from_fn(|_| draw(max_phi_deg));
        poses.push(RigidParams::from_degrees(tau, phi)?);
    }
    let mut params = Vec::with_capacity(n_t);
    let mut seg = 0;
    for t in 0..n_t {
        while seg < n_poses && t >= transitions[seg] {
            seg += 1;
        }
        params.push(poses[seg]);
    }
    Ok(MotionScript {
        n_poses,
        poses,
        transitions,
        seed,
        trace: MotionTrace::new(params),
    })
}

/// Time indices within `margin` of a pose change.
pub fn near_transition(t: usize, transitions: &[usize], margin: usize) -> bool {
    transitions.iter().any(|&s| t + margin >= s && t < s + margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Total undersampling factor for randomized patterns, stride per
    /// phase-encoding axis for linear ones.
    pub accel: f64,
    pub readout_axis: usize,
    pub seed: u64,
    /// Exponent `p` of the variable density `(1 + r / r_max)^-p`.
    pub density_power: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            kind: PatternKind::Randomized,
            accel: 2.0,
            readout_axis: 0,
            seed: 0,
            density_power: 2.0,
        }
    }
}

pub fn make_sampling_pattern(dims: Dims, voxel_size: [f64; 3], spec: &PatternSpec) -> Result<SamplingPattern> {
    if spec.readout_axis > 2 {
        return Err(invalid_param("readout axis must be 0, 1 or 2"));
    }
    let [a, b] = pe_axes(spec.readout_axis);
    let (al, ah) = freq_range(dims[a]);
    let (bl, bh) = freq_range(dims[b]);
    let all: Vec<[i64; 2]> = (bl..bh).flat_map(|mb| (al..ah).map(move |ma| [ma, mb])).collect();
    if !(spec.accel >= 1.0 && spec.accel.is_finite()) || spec.accel > all.len() as f64 {
        return Err(invalid_param(format!(
            "acceleration {} must lie in [1, {}]",
            spec.accel,
            all.len()
        )));
    }
    let coords = match spec.kind {
        PatternKind::Full => all,
        PatternKind::Linear => {
            if spec.accel.fract() != 0.0 {
                return Err(invalid_param("linear patterns need an integer stride"));
            }
            let s = spec.accel as i64;
            if s > dims[a] as i64 || s > dims[b] as i64 {
                return Err(invalid_param(format!("stride {s} exceeds a phase-encoding axis")));
            }
            all.into_iter().filter(|c| (c[0] - al) % s == 0 && (c[1] - bl) % s == 0).collect()
        }
        PatternKind::Randomized => {
            if !(spec.density_power >= 0.0 && spec.density_power.is_finite()) {
                return Err(invalid_param("density exponent must be non-negative"));
            }
            let count = (all.len() as f64 / spec.accel).ceil() as usize;
            let radius = |c: &[i64; 2]| {
                let x = c[0] as f64 / (dims[a] / 2) as f64;
                let y = c[1] as f64 / (dims[b] / 2) as f64;
                (x * x + y * y).sqrt()
            };
            let rmax = all.iter().map(radius).fold(0.0, f64::max);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let picked = rand::seq::index::sample_weighted(
                &mut rng,
                all.len(),
                |i| (1.0 + radius(&all[i]) / rmax).powf(-spec.density_power),
                count,
            )
            .map_err(|e| invalid_param(format!("sampling weights: {e}")))?;
            let mut idx = picked.into_vec();
            idx.sort_unstable();
            idx.shuffle(&mut rng);
            idx.into_iter().map(|i| all[i]).collect()
        }
    };
    SamplingPattern::new(dims, voxel_size, spec.readout_axis, coords, spec.kind)
}

/// Motion-corrupted acquisition plus complex Gaussian noise of standard
/// deviation `sigma` per real and imaginary component.
pub fn simulate_acquisition(
    u: &ComplexVolume3D,
    trace: &MotionTrace,
    pattern: &SamplingPattern,
    noise_sigma: f64,
    seed: u64,
    cfg: &NufftConfig,
) -> Result<KSpaceData> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid_param(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let clean = perturbed_fourier(u, trace, pattern, cfg)?;
    let (pattern, mut samples) = clean.into_parts();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in samples.iter_mut() {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            *s += C64::new(g1, g2) * noise_sigma;
        }
    }
    KSpaceData::new(pattern, samples, Some(noise_sigma))
}

/// Reference contrast rigidly displaced by `params` (band-limited resampling).
pub fn misregister(reference: &ComplexVolume3D, params: &RigidParams, cfg: &NufftConfig) -> Result<ComplexVolume3D> {
    move_volume(reference, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_spec_is_valid() {
        let spec = phantom_preset("two-contrast-64").unwrap();
        spec.validate().unwrap();
        assert!(phantom_preset("nope").is_err());
        two_contrast_spec([64, 64, 32], [1.0, 1.0, 2.0]).validate().unwrap();
    }

    #[test]
    fn transitions_are_strictly_increasing() {
        for seed in 0..20 {
            let s = make_motion_script(10, 5, 2.0, 3.0, seed).unwrap();
            assert!(s.transitions.windows(2).all(|w| w[0] < w[1]));
            assert!(s.transitions[0] >= 1 && *s.transitions.last().unwrap() < 10);
        }
        assert!(make_motion_script(10, 10, 2.0, 3.0, 0).is_err());
        assert!(make_motion_script(10, 2, 0.0, 3.0, 0).is_err());
    }
}
