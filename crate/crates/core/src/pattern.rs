//! Cartesian sampling patterns and acquired k-space data.
//!
//! A pattern is an ordered list of phase-encoding coordinates; entry `t`
//! names the readout line acquired at time index `t`. Each line covers every
//! readout frequency of the grid. Frequencies are integer indices
//! `m` in `[-n/2, n - n/2)` with physical value `k = 2 pi m / (n * voxel)` rad/mm.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};
use crate::geometry::Vec3;
use crate::volume::{Dims, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Full,
    Randomized,
    Linear,
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatternKind::Full => "full",
            PatternKind::Randomized => "randomized",
            PatternKind::Linear => "linear",
        })
    }
}

impl std::str::FromStr for PatternKind {
    type Err = crate::MocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PatternKind::Full),
            "randomized" => Ok(PatternKind::Randomized),
            "linear" => Ok(PatternKind::Linear),
            other => Err(invalid_param(format!("unknown pattern kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPattern {
    dims: Dims,
    voxel_size: [f64; 3],
    readout_axis: usize,
    /// Frequency indices on the two phase-encoding axes, in increasing axis order.
    pe_coords: Vec<[i64; 2]>,
    kind: PatternKind,
}

/// Inclusive lower and exclusive upper frequency index on an axis of length `n`.
#[inline]
pub fn freq_range(n: usize) -> (i64, i64) {
    let h = (n / 2) as i64;
    (-h, n as i64 - h)
}

impl SamplingPattern {
    pub fn new(
        dims: Dims,
        voxel_size: [f64; 3],
        readout_axis: usize,
        pe_coords: Vec<[i64; 2]>,
        kind: PatternKind,
    ) -> Result<Self> {
        if readout_axis > 2 {
            return Err(invalid_param(format!("readout axis {readout_axis} out of range")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(invalid_param(format!("pattern dims must be >= 2, got {dims:?}")));
        }
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid_param("voxel size must be positive"));
        }
        let axes = pe_axes(readout_axis);
        let mut seen = HashSet::with_capacity(pe_coords.len());
        for c in &pe_coords {
            for (j, &a) in axes.iter().enumerate() {
                let (lo, hi) = freq_range(dims[a]);
                if c[j] < lo || c[j] >= hi {
                    return Err(invalid_input(format!("phase-encoding coordinate {c:?} off the grid")));
                }
            }
            if !seen.insert(*c) {
                return Err(invalid_input(format!("duplicate phase-encoding coordinate {c:?}")));
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            readout_axis,
            pe_coords,
            kind,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn readout_axis(&self) -> usize {
        self.readout_axis
    }

    pub fn pe_axes(&self) -> [usize; 2] {
        pe_axes(self.readout_axis)
    }

    pub fn pe_coords(&self) -> &[[i64; 2]] {
        &self.pe_coords
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    /// Number of readout lines, i.e. time indices.
    pub fn n_lines(&self) -> usize {
        self.pe_coords.len()
    }

    pub fn n_readout(&self) -> usize {
        self.dims[self.readout_axis]
    }

    pub fn n_samples(&self) -> usize {
        self.n_lines() * self.n_readout()
    }

    /// Integer frequency index of sample `r` on line `t`, per axis.
    pub fn sample_index(&self, t: usize, r: usize) -> [i64; 3] {
        let mut m = [0i64; 3];
        let axes = self.pe_axes();
        m[axes[0]] = self.pe_coords[t][0];
        m[axes[1]] = self.pe_coords[t][1];
        m[self.readout_axis] = r as i64 + freq_range(self.n_readout()).0;
        m
    }

    /// Physical frequency (rad/mm) for an integer index.
    pub fn kvector(&self, m: [i64; 3]) -> Vec3 {
        std::array::from_fn(|j| 2.0 * PI * m[j] as f64 / (self.dims[j] as f64 * self.voxel_size[j]))
    }

    /// All sample frequencies in acquisition order (line-major).
    pub fn kpoints(&self) -> Vec<Vec3> {
        let nr = self.n_readout();
        let mut out = Vec::with_capacity(self.n_samples());
        for t in 0..self.n_lines() {
            for r in 0..nr {
                out.push(self.kvector(self.sample_index(t, r)));
            }
        }
        out
    }

    /// Index into a DC-centred spectrum volume of the same dims.
    pub fn spectrum_index(&self, m: [i64; 3]) -> usize {
        let c = self.dims.map(|n| (n / 2) as i64);
        let i = [(m[0] + c[0]) as usize, (m[1] + c[1]) as usize, (m[2] + c[2]) as usize];
        i[0] + self.dims[0] * (i[1] + self.dims[1] * i[2])
    }

    /// Same lines with a different acquisition order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let coords = order.iter().map(|&i| self.pe_coords[i]).collect();
        Self::new(self.dims, self.voxel_size, self.readout_axis, coords, self.kind)
    }
}

pub fn pe_axes(readout_axis: usize) -> [usize; 2] {
    match readout_axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

/// Acquired samples, row-major `(t, r)`, aligned with a pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSpaceData {
    pattern: SamplingPattern,
    samples: Vec<C64>,
    pub noise_sigma: Option<f64>,
}

impl KSpaceData {
    pub fn new(pattern: SamplingPattern, samples: Vec<C64>, noise_sigma: Option<f64>) -> Result<Self> {
        if samples.len() != pattern.n_samples() {
            return Err(invalid_input(format!(
                "{} samples for a pattern with {} lines of {}",
                samples.len(),
                pattern.n_lines(),
                pattern.n_readout()
            )));
        }
        Ok(Self {
            pattern,
            samples,
            noise_sigma,
        })
    }

    pub fn pattern(&self) -> &SamplingPattern {
        &self.pattern
    }

    pub fn samples(&self) -> &[C64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [C64] {
        &mut self.samples
    }

    pub fn line(&self, t: usize) -> &[C64] {
        let nr = self.pattern.n_readout();
        &self.samples[t * nr..(t + 1) * nr]
    }

    pub fn norm_sqr(&self) -> f64 {
        crate::volume::stable_sum(&self.samples, |c| c.iter().map(|v| v.norm_sqr()).sum())
    }

    pub fn into_parts(self) -> (SamplingPattern, Vec<C64>) {
        (self.pattern, self.samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(dims: Dims) -> SamplingPattern {
        let mut coords = Vec::new();
        let (zl, zh) = freq_range(dims[2]);
        let (yl, yh) = freq_range(dims[1]);
        for z in zl..zh {
            for y in yl..yh {
                coords.push([y, z]);
            }
        }
        SamplingPattern::new(dims, [1.0; 3], 0, coords, PatternKind::Full).unwrap()
    }

    #[test]
    fn rejects_duplicates_and_off_grid_lines() {
        let dup = SamplingPattern::new([4; 3], [1.0; 3], 0, vec![[0, 0], [0, 0]], PatternKind::Randomized);
        assert!(dup.is_err());
        let off = SamplingPattern::new([4; 3], [1.0; 3], 0, vec![[2, 0]], PatternKind::Randomized);
        assert!(off.is_err());
        assert!(SamplingPattern::new([4; 3], [1.0; 3], 3, vec![], PatternKind::Full).is_err());
    }

    #[test]
    fn kpoints_follow_line_order() {
        let p = full([4, 4, 2]);
        let k = p.kpoints();
        assert_eq!(k.len(), 32);
        // first line is (y, z) = (-2, -1); readout starts at m_x = -2
        let step = 2.0 * PI / 4.0;
        assert!((k[0][0] + 2.0 * step).abs() < 1e-15);
        assert!((k[0][1] + 2.0 * step).abs() < 1e-15);
        assert!((k[0][2] + PI).abs() < 1e-15);
        assert!((k[3][0] - step).abs() < 1e-15);
        assert_eq!(p.spectrum_index(p.sample_index(0, 0)), 0);
    }

    #[test]
    fn data_shape_is_checked() {
        let p = full([4, 4, 2]);
        assert!(KSpaceData::new(p.clone(), vec![C64::default(); 31], None).is_err());
        let d = KSpaceData::new(p, vec![C64::new(1.0, 0.0); 32], None).unwrap();
        assert_eq!(d.line(1).len(), 4);
        assert_eq!(d.norm_sqr(), 32.0);
    }

    #[test]
    fn other_readout_axes() {
        let p = SamplingPattern::new([4, 6, 8], [1.0; 3], 2, vec![[0, 1]], PatternKind::Linear).unwrap();
        assert_eq!(p.n_readout(), 8);
        assert_eq!(p.sample_index(0, 0), [0, 1, -4]);
    }
}
