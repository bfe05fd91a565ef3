//! Type-2 non-uniform FFT and its adjoint by Kaiser-Bessel gridding.
//!
//! For an image `u` on a FOV-centred grid the type-2 transform evaluates
//! `S(k) = sum_x u(x) exp(-i k.x)` at arbitrary `k` (rad/mm). Per axis the
//! normalized frequency `q = k * voxel_size` must lie in `[-pi, pi]`.
//!
//! Algorithm: divide the image by the kernel's Fourier transform
//! (deapodization), zero-pad it onto an oversampled grid of size `M`, FFT,
//! then interpolate the grid at `nu = M q / (2 pi)` with a separable
//! Kaiser-Bessel kernel of `width` taps. The adjoint runs the same steps
//! transposed, so the dot-product identity holds to rounding error.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, MocoError, Result};
use crate::fft::{fft3_pruned_input, fft3_pruned_output};
use crate::geometry::Vec3;
use crate::volume::{centered_coord, voxel_count, ComplexVolume3D, Dims, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NufftConfig {
    pub oversampling: f64,
    pub kernel_width: usize,
    /// Expected relative accuracy; informational.
    pub tolerance: f64,
}

impl Default for NufftConfig {
    fn default() -> Self {
        Self {
            oversampling: 2.0,
            kernel_width: 7,
            tolerance: 1e-6,
        }
    }
}

impl NufftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.oversampling >= 1.25) {
            return Err(invalid_param(format!("oversampling must be >= 1.25, got {}", self.oversampling)));
        }
        if self.kernel_width < 2 {
            return Err(invalid_param(format!("kernel width must be >= 2, got {}", self.kernel_width)));
        }
        Ok(())
    }

    /// Shape parameter that balances aliasing and truncation error for the given width and oversampling.
    pub fn beta(&self) -> f64 {
        let w = self.kernel_width as f64;
        let s = self.oversampling;
        PI * ((w / s).powi(2) * (s - 0.5).powi(2) - 0.8).max(1.0).sqrt()
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-17 * sum {
            return sum;
        }
        k += 1.0;
    }
}

/// Edge-subtracted Kaiser-Bessel kernel: `I0(beta sqrt(1 - (2x/w)^2)) - 1`
/// inside `|x| < w/2`, zero outside.
#[inline]
pub fn kb_kernel(x: f64, width: f64, beta: f64) -> f64 {
    let r = 2.0 * x / width;
    let t = 1.0 - r * r;
    if t <= 0.0 {
        0.0
    } else {
        bessel_i0(beta * t.sqrt()) - 1.0
    }
}

/// Continuous Fourier transform `int kb_kernel(x) cos(2 pi x xi) dx`.
pub fn kb_kernel_ft(xi: f64, width: f64, beta: f64) -> f64 {
    let a = PI * width * xi;
    let z2 = beta * beta - a * a;
    let main = if z2 > 1e-12 {
        let z = z2.sqrt();
        width * z.sinh() / z
    } else if z2 < -1e-12 {
        let z = (-z2).sqrt();
        width * z.sin() / z
    } else {
        width
    };
    let box_ft = if xi.abs() < 1e-300 { width } else { (a).sin() / (PI * xi) };
    main - box_ft
}

fn is_smooth(mut n: usize) -> bool {
    for p in [2, 3, 5, 7] {
        while n % p == 0 {
            n /= p;
        }
    }
    n == 1
}

fn oversampled_len(n: usize, cfg: &NufftConfig) -> usize {
    let mut m = ((n as f64) * cfg.oversampling).ceil() as usize;
    m = m.max(2 * cfg.kernel_width).max(n);
    while m % 2 != 0 || !is_smooth(m) {
        m += 1;
    }
    m
}

/// Frequencies in rad/mm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NonUniformPoints {
    coords: Vec<Vec3>,
}

impl NonUniformPoints {
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid_input("non-uniform points must be finite"));
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Converts to normalized frequencies `k * voxel_size`.
    pub fn normalized(&self, voxel_size: [f64; 3]) -> Vec<Vec3> {
        self.coords
            .iter()
            .map(|k| [k[0] * voxel_size[0], k[1] * voxel_size[1], k[2] * voxel_size[2]])
            .collect()
    }
}

/// Tolerance on the `[-pi, pi]` band check.
const BAND_SLACK: f64 = 1e-9;

#[inline]
pub fn in_band(q: &Vec3) -> bool {
    q.iter().all(|v| v.abs() <= PI + BAND_SLACK)
}

/// Precomputed gridding operator for one image grid.
#[derive(Debug, Clone)]
pub struct NufftOperator {
    dims: Dims,
    voxel_size: [f64; 3],
    os_dims: Dims,
    width: usize,
    beta: f64,
    /// `1 / Psi(s / M)` per image index and axis.
    deapod: [Vec<f64>; 3],
    /// `exp(2 pi i j c / M)` per grid index and axis, undoing corner placement.
    phase: [Vec<C64>; 3],
}

/// Interpolation geometry for a fixed point set.
#[derive(Debug, Clone)]
pub struct NufftPlan {
    n_points: usize,
    width: usize,
    valid: Vec<bool>,
    /// First tap per axis, already wrapped into `[0, M)`.
    starts: Vec<[usize; 3]>,
    /// `3 * width` weights per point, axis-major.
    weights: Vec<f64>,
    /// Point indices grouped by first z tap, for race-free spreading.
    z_bins: Vec<Vec<u32>>,
    out_of_band: usize,
}

impl NufftPlan {
    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    /// Number of points zeroed because they left the band.
    pub fn out_of_band(&self) -> usize {
        self.out_of_band
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }
}

/// How points outside `[-pi, pi]` are handled when building a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutOfBand {
    Reject,
    Zero,
}

impl NufftOperator {
    pub fn new(dims: Dims, voxel_size: [f64; 3], cfg: &NufftConfig) -> Result<Self> {
        cfg.validate()?;
        if dims.iter().any(|&d| d < 2) {
            return Err(invalid_param(format!("nufft grid dims must be >= 2, got {dims:?}")));
        }
        let width = cfg.kernel_width;
        let beta = cfg.beta();
        let os_dims = dims.map(|n| oversampled_len(n, cfg));
        let deapod = std::array::from_fn(|a| {
            let (n, m) = (dims[a], os_dims[a] as f64);
            (0..n)
                .map(|i| 1.0 / kb_kernel_ft(centered_coord(i, n) / m, width as f64, beta))
                .collect()
        });
        let phase = std::array::from_fn(|a| {
            let (c, m) = (dims[a] / 2, os_dims[a]);
            (0..m)
                .map(|j| C64::from_polar(1.0, 2.0 * PI * ((j * c) % m) as f64 / m as f64))
                .collect()
        });
        Ok(Self {
            dims,
            voxel_size,
            os_dims,
            width,
            beta,
            deapod,
            phase,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn oversampled_dims(&self) -> Dims {
        self.os_dims
    }

    /// Builds the interpolation plan for normalized frequencies.
    pub fn plan(&self, normalized: &[Vec3], policy: OutOfBand) -> Result<NufftPlan> {
        let w = self.width;
        let half = w as f64 / 2.0;
        let n_points = normalized.len();
        if policy == OutOfBand::Reject {
            if let Some((i, q)) = normalized.iter().enumerate().find(|(_, q)| !in_band(q)) {
                let value = q.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                return Err(MocoError::BandLimit {
                    location: format!("point {i}"),
                    value,
                });
            }
        }
        let per_point: Vec<(bool, [usize; 3], Vec<f64>)> = normalized
            .par_iter()
            .map(|q| {
                let mut weights = vec![0.0; 3 * w];
                if !in_band(q) || q.iter().any(|v| !v.is_finite()) {
                    return (false, [0; 3], weights);
                }
                let mut starts = [0usize; 3];
                for a in 0..3 {
                    let m = self.os_dims[a] as f64;
                    let nu = m * q[a] / (2.0 * PI);
                    let j0 = (nu - half).floor() + 1.0;
                    for t in 0..w {
                        weights[a * w + t] = kb_kernel(nu - (j0 + t as f64), w as f64, self.beta);
                    }
                    starts[a] = (j0 as i64).rem_euclid(self.os_dims[a] as i64) as usize;
                }
                (true, starts, weights)
            })
            .collect();
        let mut valid = Vec::with_capacity(n_points);
        let mut starts = Vec::with_capacity(n_points);
        let mut weights = Vec::with_capacity(n_points * 3 * w);
        let mut z_bins = vec![Vec::new(); self.os_dims[2]];
        let mut out_of_band = 0;
        for (i, (ok, s, wt)) in per_point.into_iter().enumerate() {
            if ok {
                z_bins[s[2]].push(i as u32);
            } else {
                out_of_band += 1;
            }
            valid.push(ok);
            starts.push(s);
            weights.extend_from_slice(&wt);
        }
        Ok(NufftPlan {
            n_points,
            width: w,
            valid,
            starts,
            weights,
            z_bins,
            out_of_band,
        })
    }

    fn check_image(&self, data: &[C64]) -> Result<()> {
        if data.len() != voxel_count(self.dims) {
            return Err(invalid_input("image length does not match nufft grid"));
        }
        Ok(())
    }

    /// Deapodized, padded and transformed image on the oversampled grid.
    pub fn spectrum(&self, image: &[C64]) -> Result<Vec<C64>> {
        self.check_image(image)?;
        let [nx, ny, nz] = self.dims;
        let [mx, my, _] = self.os_dims;
        let mut grid = vec![C64::default(); voxel_count(self.os_dims)];
        for iz in 0..nz {
            let dz = self.deapod[2][iz];
            for iy in 0..ny {
                let dyz = dz * self.deapod[1][iy];
                let src = nx * (iy + ny * iz);
                let dst = mx * (iy + my * iz);
                for ix in 0..nx {
                    grid[dst + ix] = image[src + ix] * (dyz * self.deapod[0][ix]);
                }
            }
        }
        fft3_pruned_input(&mut grid, self.os_dims, self.dims, FftDirection::Forward);
        self.apply_phase(&mut grid, false);
        Ok(grid)
    }

    fn apply_phase(&self, grid: &mut [C64], conjugate: bool) {
        let [mx, my, _] = self.os_dims;
        let (px, py, pz) = (&self.phase[0], &self.phase[1], &self.phase[2]);
        grid.par_chunks_mut(mx * my).enumerate().for_each(|(jz, plane)| {
            for jy in 0..my {
                let pyz = py[jy] * pz[jz];
                let row = &mut plane[jy * mx..(jy + 1) * mx];
                for (jx, v) in row.iter_mut().enumerate() {
                    let p = px[jx] * pyz;
                    *v *= if conjugate { p.conj() } else { p };
                }
            }
        });
    }

    /// Interpolates an oversampled spectrum at the planned points.
    pub fn interpolate(&self, grid: &[C64], plan: &NufftPlan) -> Vec<C64> {
        let w = plan.width;
        let [mx, my, mz] = self.os_dims;
        (0..plan.n_points)
            .into_par_iter()
            .map(|p| {
                if !plan.valid[p] {
                    return C64::default();
                }
                let s = plan.starts[p];
                let wt = &plan.weights[p * 3 * w..(p + 1) * 3 * w];
                let (wx, wy, wz) = (&wt[..w], &wt[w..2 * w], &wt[2 * w..]);
                let xs: Vec<usize> = (0..w).map(|t| (s[0] + t) % mx).collect();
                let mut acc = C64::default();
                for (c, &wzc) in wz.iter().enumerate() {
                    let jz = (s[2] + c) % mz;
                    for (b, &wyb) in wy.iter().enumerate() {
                        let jy = (s[1] + b) % my;
                        let base = mx * (jy + my * jz);
                        let mut row = C64::default();
                        for (a, &wxa) in wx.iter().enumerate() {
                            row += grid[base + xs[a]] * wxa;
                        }
                        acc += row * (wyb * wzc);
                    }
                }
                acc
            })
            .collect()
    }

    /// Adjoint of [`interpolate`](Self::interpolate): spreads samples onto
    /// the oversampled grid. Each output z-plane is owned by one task and
    /// visits points in a fixed order.
    pub fn spread(&self, samples: &[C64], plan: &NufftPlan) -> Vec<C64> {
        let w = plan.width;
        let [mx, my, mz] = self.os_dims;
        let mut grid = vec![C64::default(); voxel_count(self.os_dims)];
        grid.par_chunks_mut(mx * my).enumerate().for_each(|(jz, plane)| {
            let mut xs = vec![0usize; w];
            for c in 0..w {
                // points whose tap c lands on this plane
                let bin = (jz + mz - c % mz) % mz;
                for &p in &plan.z_bins[bin] {
                    let p = p as usize;
                    let v = samples[p];
                    if v == C64::default() {
                        continue;
                    }
                    let s = plan.starts[p];
                    let wt = &plan.weights[p * 3 * w..(p + 1) * 3 * w];
                    let vz = v * wt[2 * w + c];
                    for (t, x) in xs.iter_mut().enumerate() {
                        *x = (s[0] + t) % mx;
                    }
                    for b in 0..w {
                        let jy = (s[1] + b) % my;
                        let vyz = vz * wt[w + b];
                        let row = &mut plane[jy * mx..(jy + 1) * mx];
                        for a in 0..w {
                            row[xs[a]] += vyz * wt[a];
                        }
                    }
                }
            }
        });
        grid
    }

    /// Adjoint of [`spectrum`](Self::spectrum).
    pub fn image_from_grid(&self, mut grid: Vec<C64>) -> Vec<C64> {
        let [nx, ny, nz] = self.dims;
        let [mx, my, _] = self.os_dims;
        self.apply_phase(&mut grid, true);
        fft3_pruned_output(&mut grid, self.os_dims, self.dims, FftDirection::Inverse);
        let mut image = vec![C64::default(); voxel_count(self.dims)];
        for iz in 0..nz {
            let dz = self.deapod[2][iz];
            for iy in 0..ny {
                let dyz = dz * self.deapod[1][iy];
                let src = mx * (iy + my * iz);
                let dst = nx * (iy + ny * iz);
                for ix in 0..nx {
                    image[dst + ix] = grid[src + ix] * (dyz * self.deapod[0][ix]);
                }
            }
        }
        image
    }

    /// Type-2 transform of `image` at the planned points.
    pub fn forward(&self, image: &[C64], plan: &NufftPlan) -> Result<Vec<C64>> {
        let grid = self.spectrum(image)?;
        Ok(self.interpolate(&grid, plan))
    }

    /// Adjoint of [`forward`](Self::forward).
    pub fn adjoint(&self, samples: &[C64], plan: &NufftPlan) -> Result<Vec<C64>> {
        if samples.len() != plan.n_points {
            return Err(invalid_input(format!(
                "{} samples for {} points",
                samples.len(),
                plan.n_points
            )));
        }
        Ok(self.image_from_grid(self.spread(samples, plan)))
    }
}

/// Evaluates `sum_x u(x) exp(-i k.x)` at every point. Points outside the
/// band are rejected.
pub fn nufft_type2(vol: &ComplexVolume3D, pts: &NonUniformPoints, cfg: &NufftConfig) -> Result<Vec<C64>> {
    vol.check_finite()?;
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let op = NufftOperator::new(vol.dims(), vol.voxel_size(), cfg)?;
    let plan = op.plan(&pts.normalized(vol.voxel_size()), OutOfBand::Reject)?;
    op.forward(vol.data(), &plan)
}

/// Adjoint of [`nufft_type2`] onto a grid of `dims` with `voxel_size`.
pub fn nufft_type2_adjoint(
    samples: &[C64],
    pts: &NonUniformPoints,
    dims: Dims,
    voxel_size: [f64; 3],
    cfg: &NufftConfig,
) -> Result<ComplexVolume3D> {
    if samples.len() != pts.len() {
        return Err(invalid_input(format!(
            "{} samples for {} points",
            samples.len(),
            pts.len()
        )));
    }
    let op = NufftOperator::new(dims, voxel_size, cfg)?;
    let plan = op.plan(&pts.normalized(voxel_size), OutOfBand::Reject)?;
    let image = op.adjoint(samples, &plan)?;
    ComplexVolume3D::from_data(dims, voxel_size, image)
}
