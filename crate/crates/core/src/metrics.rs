//! Image quality metrics on magnitude images: peak-referenced PSNR and SSIM,
//! for whole volumes and the three central orthogonal slices.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid_input, invalid_param, Result};
use crate::volume::{stable_sum, ComplexVolume3D, RealVolume3D};

fn check_shapes(x: &RealVolume3D, reference: &RealVolume3D) -> Result<()> {
    if x.dims != reference.dims {
        return Err(invalid_input(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dims, reference.dims
        )));
    }
    if x.data.iter().chain(&reference.data).any(|v| !v.is_finite()) {
        return Err(invalid_input("images contain non-finite values"));
    }
    Ok(())
}

/// `20 log10(max(ref) / RMSE(x, ref))`; `+inf` for identical inputs.
pub fn psnr(x: &RealVolume3D, reference: &RealVolume3D) -> Result<f64> {
    check_shapes(x, reference)?;
    let peak = reference.max();
    if !(peak > 0.0) {
        return Err(invalid_input("reference image has no positive peak"));
    }
    let pairs: Vec<(f64, f64)> = x.data.iter().copied().zip(reference.data.iter().copied()).collect();
    let sse = stable_sum(&pairs, |c| c.iter().map(|(a, b)| (a - b) * (a - b)).sum());
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let rmse = (sse / pairs.len() as f64).sqrt();
    Ok(20.0 * (peak / rmse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range from the maximum of both images instead of the reference.
    pub range_from_pair: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range_from_pair: false,
        }
    }
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering along the axes whose extent is > 1.
fn filter_valid(data: &[f64], dims: [usize; 3], taps: &[f64], axes: &[usize]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut d = dims;
    let w = taps.len();
    for &axis in axes {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - w;
        let stride = match axis {
            0 => 1,
            1 => d[0],
            _ => d[0] * d[1],
        };
        let out: Vec<f64> = (0..nd[0] * nd[1] * nd[2])
            .into_par_iter()
            .map(|o| {
                let ix = o % nd[0];
                let iy = (o / nd[0]) % nd[1];
                let iz = o / (nd[0] * nd[1]);
                let base = ix + d[0] * (iy + d[1] * iz);
                taps.iter().enumerate().map(|(k, t)| t * cur[base + k * stride]).sum()
            })
            .collect();
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean local SSIM with a Gaussian window; 2D images use `dims[2] == 1`.
pub fn ssim(x: &RealVolume3D, reference: &RealVolume3D, opts: &SsimOptions) -> Result<f64> {
    check_shapes(x, reference)?;
    if opts.window == 0 || !(opts.sigma > 0.0) || opts.k1 <= 0.0 || opts.k2 <= 0.0 {
        return Err(invalid_param("SSIM window, sigma and constants must be positive"));
    }
    let dims = x.dims;
    let axes: Vec<usize> = (0..3).filter(|&a| dims[a] > 1).collect();
    if axes.iter().any(|&a| dims[a] < opts.window) {
        return Err(invalid_param(format!(
            "SSIM window {} larger than image {:?}",
            opts.window, dims
        )));
    }
    let range = if opts.range_from_pair {
        reference.max().max(x.max())
    } else {
        reference.max()
    };
    let c1 = (opts.k1 * range).powi(2);
    let c2 = (opts.k2 * range).powi(2);
    let taps = gaussian_taps(opts.window, opts.sigma);
    let f = |v: &[f64]| filter_valid(v, dims, &taps, &axes).0;
    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = reference.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&reference.data).map(|(a, b)| a * b).collect();
    let (mx, my, sxx, syy, sxy) = (f(&x.data), f(&reference.data), f(&xx), f(&yy), f(&xy));
    let map: Vec<f64> = (0..mx.len())
        .into_par_iter()
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cxy = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(stable_sum(&map, |c| c.iter().sum()) / map.len() as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Str(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Db::Str(s) => Err(serde::de::Error::custom(format!("invalid PSNR value '{s}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub volume: Quality,
    pub sagittal: Quality,
    pub coronal: Quality,
    pub axial: Quality,
    /// Slice indices along x (sagittal), y (coronal) and z (axial).
    pub slice_indices: [usize; 3],
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "label,volume_psnr_db,volume_ssim,sagittal_psnr_db,sagittal_ssim,coronal_psnr_db,coronal_ssim,axial_psnr_db,axial_ssim";

    pub fn csv_row(&self, label: &str) -> String {
        let db = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v}") };
        let q = [self.volume, self.sagittal, self.coronal, self.axial];
        let mut row = label.to_string();
        for v in q {
            row.push_str(&format!(",{},{}", db(v.psnr_db), v.ssim));
        }
        row
    }
}

fn quality(x: &RealVolume3D, reference: &RealVolume3D, opts: &SsimOptions) -> Result<Quality> {
    Ok(Quality {
        psnr_db: psnr(x, reference)?,
        ssim: ssim(x, reference, opts)?,
    })
}

/// Volume and central-slice metrics between magnitude images.
pub fn quality_report(x: &RealVolume3D, reference: &RealVolume3D, opts: &SsimOptions) -> Result<QualityReport> {
    check_shapes(x, reference)?;
    let idx = reference.dims.map(|n| n / 2);
    let slice = |axis: usize| -> Result<Quality> {
        quality(&x.slice(axis, idx[axis])?, &reference.slice(axis, idx[axis])?, opts)
    };
    Ok(QualityReport {
        volume: quality(x, reference, opts)?,
        sagittal: slice(0)?,
        coronal: slice(1)?,
        axial: slice(2)?,
        slice_indices: idx,
    })
}

/// [`quality_report`] on the magnitudes of complex volumes.
pub fn compare_volumes(x: &ComplexVolume3D, reference: &ComplexVolume3D, opts: &SsimOptions) -> Result<QualityReport> {
    quality_report(&x.magnitude(), &reference.magnitude(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    #[test]
    fn infinite_psnr_round_trips_through_json() {
        let q = Quality {
            psnr_db: f64::INFINITY,
            ssim: 1.0,
        };
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"psnr_db":"inf","ssim":1.0}"#);
        assert_eq!(serde_json::from_str::<Quality>(&s).unwrap(), q);
    }
}
