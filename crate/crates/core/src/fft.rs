//! Uniform 3D FFTs and spectral crop/pad helpers.
//!
//! `fft3_centered` is the unitary DFT with the image origin at the FOV centre
//! and DC at index `n/2` of every axis:
//! `X[m] = N^{-1/2} sum_s x[s] exp(-2 pi i m s / n)` with `s, m` in `[-n/2, n - n/2)`.

use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{invalid_param, Result};
use crate::volume::{voxel_count, ComplexVolume3D, Dims, C64};

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

pub(crate) fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let mut p = planner().lock().unwrap_or_else(|e| e.into_inner());
    p.plan_fft(n, direction)
}

/// Transforms x lines in the first `planes` z-planes, first `rows` rows each.
fn fft_axis0(data: &mut [C64], dims: Dims, rows: usize, planes: usize, direction: FftDirection) {
    let [nx, ny, _] = dims;
    let f = plan(nx, direction);
    data.par_chunks_mut(nx * ny).take(planes).for_each(|plane| {
        let mut scratch = vec![C64::default(); f.get_inplace_scratch_len()];
        f.process_with_scratch(&mut plane[..nx * rows], &mut scratch);
    });
}

/// Transforms y lines in the first `planes` z-planes.
fn fft_axis1(data: &mut [C64], dims: Dims, planes: usize, direction: FftDirection) {
    let [nx, ny, _] = dims;
    let f = plan(ny, direction);
    data.par_chunks_mut(nx * ny).take(planes).for_each(|plane| {
        let mut buf = vec![C64::default(); nx * ny];
        let mut scratch = vec![C64::default(); f.get_inplace_scratch_len()];
        for iy in 0..ny {
            for ix in 0..nx {
                buf[ix * ny + iy] = plane[ix + nx * iy];
            }
        }
        f.process_with_scratch(&mut buf, &mut scratch);
        for iy in 0..ny {
            for ix in 0..nx {
                plane[ix + nx * iy] = buf[ix * ny + iy];
            }
        }
    });
}

/// Transforms all z lines, gathered one y-row at a time.
fn fft_axis2(data: &mut [C64], dims: Dims, direction: FftDirection) {
    let [nx, ny, nz] = dims;
    let f = plan(nz, direction);
    let mut scratch = vec![C64::default(); f.get_inplace_scratch_len()];
    let mut buf = vec![C64::default(); nx * nz];
    for iy in 0..ny {
        for iz in 0..nz {
            let base = nx * (iy + ny * iz);
            buf[iz..].iter_mut().step_by(nz).zip(&data[base..base + nx]).for_each(|(b, d)| *b = *d);
        }
        f.process_with_scratch(&mut buf, &mut scratch);
        for iz in 0..nz {
            let base = nx * (iy + ny * iz);
            data[base..base + nx].iter_mut().zip(buf[iz..].iter().step_by(nz)).for_each(|(d, b)| *d = *b);
        }
    }
}

/// In-place unnormalized 3D FFT of an x-fastest array.
pub(crate) fn fft3_inplace(data: &mut [C64], dims: Dims, direction: FftDirection) {
    debug_assert_eq!(data.len(), voxel_count(dims));
    fft_axis0(data, dims, dims[1], dims[2], direction);
    fft_axis1(data, dims, dims[2], direction);
    fft_axis2(data, dims, direction);
}

/// Forward transform of an array whose nonzero entries all lie in the
/// leading `extent` corner; skips lines that are identically zero.
pub(crate) fn fft3_pruned_input(data: &mut [C64], dims: Dims, extent: Dims, direction: FftDirection) {
    fft_axis0(data, dims, extent[1], extent[2], direction);
    fft_axis1(data, dims, extent[2], direction);
    fft_axis2(data, dims, direction);
}

/// Transform whose output is only needed in the leading `extent` corner;
/// entries outside that corner are left in an unspecified state.
pub(crate) fn fft3_pruned_output(data: &mut [C64], dims: Dims, extent: Dims, direction: FftDirection) {
    fft_axis2(data, dims, direction);
    fft_axis1(data, dims, extent[2], direction);
    fft_axis0(data, dims, extent[1], extent[2], direction);
}

/// Moves centred index `i` (coordinate `i - n/2`) to the FFT storage slot of
/// that coordinate.
#[inline]
fn to_fft_slot(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

fn centered_transform(vol: &ComplexVolume3D, direction: FftDirection) -> Result<ComplexVolume3D> {
    vol.check_finite()?;
    let dims = vol.dims();
    let [nx, ny, nz] = dims;
    let mut work = vec![C64::default(); vol.len()];
    for iz in 0..nz {
        let sz = to_fft_slot(iz, nz);
        for iy in 0..ny {
            let sy = to_fft_slot(iy, ny);
            for ix in 0..nx {
                work[to_fft_slot(ix, nx) + nx * (sy + ny * sz)] = vol.get(ix, iy, iz);
            }
        }
    }
    fft3_inplace(&mut work, dims, direction);
    let scale = 1.0 / (voxel_count(dims) as f64).sqrt();
    let mut out = vol.zeros_like();
    let od = out.data_mut();
    for iz in 0..nz {
        let sz = to_fft_slot(iz, nz);
        for iy in 0..ny {
            let sy = to_fft_slot(iy, ny);
            for ix in 0..nx {
                od[ix + nx * (iy + ny * iz)] = work[to_fft_slot(ix, nx) + nx * (sy + ny * sz)] * scale;
            }
        }
    }
    Ok(out)
}

/// Unitary, DC-centred forward 3D DFT.
pub fn fft3_centered(vol: &ComplexVolume3D) -> Result<ComplexVolume3D> {
    centered_transform(vol, FftDirection::Forward)
}

/// Inverse of [`fft3_centered`].
pub fn ifft3_centered(spectrum: &ComplexVolume3D) -> Result<ComplexVolume3D> {
    centered_transform(spectrum, FftDirection::Inverse)
}

/// Copies the shared central frequencies of a centred spectrum onto a grid
/// of `new_dims`, zero-filling new frequencies. Values are copied verbatim.
/// The voxel size is rescaled so the field of view is unchanged.
pub fn crop_or_pad_spectrum(spectrum: &ComplexVolume3D, new_dims: Dims) -> Result<ComplexVolume3D> {
    let dims = spectrum.dims();
    let vs = spectrum.voxel_size();
    let new_vs = [
        vs[0] * dims[0] as f64 / new_dims[0] as f64,
        vs[1] * dims[1] as f64 / new_dims[1] as f64,
        vs[2] * dims[2] as f64 / new_dims[2] as f64,
    ];
    let mut out = ComplexVolume3D::zeros(new_dims, new_vs)?;
    let half = dims.map(|n| (n / 2) as i64);
    let new_half = new_dims.map(|n| (n / 2) as i64);
    let lo: [i64; 3] = std::array::from_fn(|j| (-half[j]).max(-new_half[j]));
    let hi: [i64; 3] = std::array::from_fn(|j| {
        (dims[j] as i64 - half[j]).min(new_dims[j] as i64 - new_half[j])
    });
    for mz in lo[2]..hi[2] {
        for my in lo[1]..hi[1] {
            for mx in lo[0]..hi[0] {
                let src = spectrum.index(
                    (mx + half[0]) as usize,
                    (my + half[1]) as usize,
                    (mz + half[2]) as usize,
                );
                let dst = out.index(
                    (mx + new_half[0]) as usize,
                    (my + new_half[1]) as usize,
                    (mz + new_half[2]) as usize,
                );
                out.data_mut()[dst] = spectrum.data()[src];
            }
        }
    }
    Ok(out)
}

/// Band-limited resampling of an image onto `new_dims` over the same field
/// of view. With `preserve_intensity` the result is rescaled so voxel values
/// keep their physical meaning; otherwise unitary spectral coefficients are
/// kept verbatim.
pub fn resample_spectral(vol: &ComplexVolume3D, new_dims: Dims, preserve_intensity: bool) -> Result<ComplexVolume3D> {
    if new_dims.iter().any(|&d| d < 2) {
        return Err(invalid_param(format!("cannot resample to {new_dims:?}")));
    }
    let spec = fft3_centered(vol)?;
    let moved = crop_or_pad_spectrum(&spec, new_dims)?;
    let mut out = ifft3_centered(&moved)?;
    if preserve_intensity {
        out.scale((voxel_count(new_dims) as f64 / vol.len() as f64).sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_volume(dims: Dims, seed: u64) -> ComplexVolume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume3D::from_fn(dims, [1.0; 3], |_, _, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn rel_err(a: &[C64], b: &[C64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn constant_volume_puts_energy_in_dc() {
        let v = ComplexVolume3D::from_fn([8; 3], [1.0; 3], |_, _, _| C64::new(1.0, 0.0)).unwrap();
        let s = fft3_centered(&v).unwrap();
        let dc = s.get(4, 4, 4);
        assert!((dc.re - 8f64.powf(1.5)).abs() < 1e-12 && dc.im.abs() < 1e-12);
        let others = s
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != s.index(4, 4, 4))
            .map(|(_, c)| c.norm())
            .fold(0.0, f64::max);
        assert!(others < 1e-12);
    }

    #[test]
    fn centred_impulse_has_flat_spectrum() {
        let mut v = ComplexVolume3D::zeros([8; 3], [1.0; 3]).unwrap();
        let c = v.index(4, 4, 4);
        v.data_mut()[c] = C64::new(1.0, 0.0);
        let s = fft3_centered(&v).unwrap();
        for c in s.data() {
            assert!((c.re - 8f64.powf(-1.5)).abs() < 1e-12 && c.im.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let dims = [8, 6, 4];
        let v = random_volume(dims, 3);
        let s = fft3_centered(&v).unwrap();
        let norm = 1.0 / (voxel_count(dims) as f64).sqrt();
        let mut oracle = Vec::new();
        for mz in 0..dims[2] {
            for my in 0..dims[1] {
                for mx in 0..dims[0] {
                    let m = [mx, my, mz].map(|x| x as f64);
                    let mut acc = C64::new(0.0, 0.0);
                    for iz in 0..dims[2] {
                        for iy in 0..dims[1] {
                            for ix in 0..dims[0] {
                                let mut phase = 0.0;
                                for (j, i) in [ix, iy, iz].into_iter().enumerate() {
                                    let n = dims[j] as f64;
                                    let h = (dims[j] / 2) as f64;
                                    phase += 2.0 * PI * (m[j] - h) * (i as f64 - h) / n;
                                }
                                acc += v.get(ix, iy, iz) * C64::from_polar(1.0, -phase);
                            }
                        }
                    }
                    oracle.push(acc * norm);
                }
            }
        }
        assert!(rel_err(s.data(), &oracle) < 1e-10);
    }

    #[test]
    fn inverse_and_parseval() {
        let v = random_volume([6, 8, 10], 11);
        let s = fft3_centered(&v).unwrap();
        assert!((s.norm() - v.norm()).abs() / v.norm() < 1e-12);
        let back = ifft3_centered(&s).unwrap();
        assert!(rel_err(back.data(), v.data()) < 1e-12);
    }

    #[test]
    fn odd_dims_round_trip() {
        let v = random_volume([5, 7, 3], 2);
        let back = ifft3_centered(&fft3_centered(&v).unwrap()).unwrap();
        assert!(rel_err(back.data(), v.data()) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut v = ComplexVolume3D::zeros([4; 3], [1.0; 3]).unwrap();
        v.data_mut()[0] = C64::new(f64::NAN, 0.0);
        assert!(fft3_centered(&v).is_err());
    }

    #[test]
    fn pad_then_crop_recovers_spectrum() {
        let v = random_volume([8, 8, 4], 5);
        let s = fft3_centered(&v).unwrap();
        let big = crop_or_pad_spectrum(&s, [16, 12, 8]).unwrap();
        let back = crop_or_pad_spectrum(&big, [8, 8, 4]).unwrap();
        assert_eq!(back.data(), s.data());
        assert_eq!(back.voxel_size(), v.voxel_size());
    }

    #[test]
    fn intensity_preserving_resample_keeps_constants() {
        let v = ComplexVolume3D::from_fn([8; 3], [2.0; 3], |_, _, _| C64::new(3.0, 0.0)).unwrap();
        let up = resample_spectral(&v, [16; 3], true).unwrap();
        assert_eq!(up.voxel_size(), [1.0; 3]);
        for c in up.data() {
            assert!((c.re - 3.0).abs() < 1e-12 && c.im.abs() < 1e-12);
        }
    }
}
