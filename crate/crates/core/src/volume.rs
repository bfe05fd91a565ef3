//! Dense complex and real 3D arrays on a FOV-centred grid.
//!
//! Storage is x-fastest: `index = ix + nx * (iy + ny * iz)`. The voxel with
//! index `i` along an axis of length `n` sits at `(i - n/2) * voxel_size`
//! millimetres from the FOV centre (integer division).

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};

pub type C64 = Complex64;
pub type Dims = [usize; 3];

/// Chunk length for order-stable parallel reductions.
const REDUCE_CHUNK: usize = 8192;

/// Sums `f(chunk)` over fixed-size chunks, combining partials sequentially so
/// the result does not depend on the thread count.
pub(crate) fn stable_sum<T: Sync>(data: &[T], f: impl Fn(&[T]) -> f64 + Sync + Send) -> f64 {
    let partials: Vec<f64> = data.par_chunks(REDUCE_CHUNK).map(f).collect();
    partials.iter().sum()
}

pub(crate) fn stable_sum_pair<T: Sync, U: Sync>(
    a: &[T],
    b: &[U],
    f: impl Fn(&[T], &[U]) -> f64 + Sync + Send,
) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| f(x, y))
        .collect();
    partials.iter().sum()
}

/// Centred coordinate (in voxels) of index `i` on an axis of length `n`.
#[inline]
pub fn centered_coord(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexVolume3D {
    dims: Dims,
    voxel_size: [f64; 3],
    data: Vec<C64>,
}

impl ComplexVolume3D {
    pub fn zeros(dims: Dims, voxel_size: [f64; 3]) -> Result<Self> {
        check_grid(dims, voxel_size)?;
        Ok(Self {
            dims,
            voxel_size,
            data: vec![C64::new(0.0, 0.0); voxel_count(dims)],
        })
    }

    pub fn from_data(dims: Dims, voxel_size: [f64; 3], data: Vec<C64>) -> Result<Self> {
        check_grid(dims, voxel_size)?;
        if data.len() != voxel_count(dims) {
            return Err(invalid_input(format!(
                "volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn from_fn(dims: Dims, voxel_size: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> C64) -> Result<Self> {
        check_grid(dims, voxel_size)?;
        let mut data = Vec::with_capacity(voxel_count(dims));
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    data.push(f(ix, iy, iz));
                }
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn from_real(dims: Dims, voxel_size: [f64; 3], real: &[f64]) -> Result<Self> {
        Self::from_data(dims, voxel_size, real.iter().map(|&r| C64::new(r, 0.0)).collect())
    }

    /// Same grid, zero contents.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: vec![C64::new(0.0, 0.0); self.data.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> C64 {
        self.data[self.index(ix, iy, iz)]
    }

    /// Physical position (mm) of a voxel relative to the FOV centre.
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            centered_coord(ix, self.dims[0]) * self.voxel_size[0],
            centered_coord(iy, self.dims[1]) * self.voxel_size[1],
            centered_coord(iz, self.dims[2]) * self.voxel_size[2],
        ]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if !self.same_grid(other) {
            return Err(invalid_input(format!(
                "volume dims mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(invalid_input("volume contains non-finite values"));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        stable_sum(&self.data, |c| c.iter().map(|v| v.norm_sqr()).sum())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Real part of `<self, other> = sum conj(self) * other`.
    pub fn dot_re(&self, other: &Self) -> f64 {
        stable_sum_pair(&self.data, &other.data, |a, b| {
            a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
        })
    }

    /// Complex inner product `sum conj(self) * other`.
    pub fn dot(&self, other: &Self) -> C64 {
        let re = self.dot_re(other);
        let im = stable_sum_pair(&self.data, &other.data, |a, b| {
            a.iter().zip(b).map(|(x, y)| x.re * y.im - x.im * y.re).sum()
        });
        C64::new(re, im)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.par_iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.data
            .par_iter_mut()
            .zip(x.data.par_iter())
            .for_each(|(y, &xv)| *y += xv * a);
    }

    pub fn sub(&self, other: &Self) -> Self {
        let data = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(a, b)| a - b)
            .collect();
        Self {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data,
        }
    }

    pub fn magnitude(&self) -> RealVolume3D {
        RealVolume3D {
            dims: self.dims,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    pub fn mean(&self) -> C64 {
        let n = self.data.len() as f64;
        let re = stable_sum(&self.data, |c| c.iter().map(|v| v.re).sum());
        let im = stable_sum(&self.data, |c| c.iter().map(|v| v.im).sum());
        C64::new(re / n, im / n)
    }

    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }
}

fn check_grid(dims: Dims, voxel_size: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < 2) {
        return Err(invalid_param(format!("every dimension must be >= 2, got {dims:?}")));
    }
    if voxel_size.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(invalid_param(format!("voxel size must be positive, got {voxel_size:?}")));
    }
    Ok(())
}

/// Real-valued volume or image, typically a magnitude map. Two-dimensional
/// slices use `dims[2] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealVolume3D {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl RealVolume3D {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != voxel_count(dims) || dims.iter().any(|&d| d == 0) {
            return Err(invalid_input(format!(
                "real volume data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[ix + self.dims[0] * (iy + self.dims[1] * iz)]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Extracts the central (or given) slice orthogonal to `axis` as a 2D image
    /// stored with `dims[2] == 1`. The in-plane axes keep their original order.
    pub fn slice(&self, axis: usize, index: usize) -> Result<RealVolume3D> {
        if axis > 2 || index >= self.dims[axis] {
            return Err(invalid_param(format!("slice {index} on axis {axis} out of range")));
        }
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (na, nb) = (self.dims[a], self.dims[b]);
        let mut data = Vec::with_capacity(na * nb);
        for jb in 0..nb {
            for ja in 0..na {
                let mut idx = [0usize; 3];
                idx[axis] = index;
                idx[a] = ja;
                idx[b] = jb;
                data.push(self.get(idx[0], idx[1], idx[2]));
            }
        }
        Ok(RealVolume3D {
            dims: [na, nb, 1],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(ComplexVolume3D::zeros([1, 4, 4], [1.0; 3]).is_err());
        assert!(ComplexVolume3D::zeros([4, 4, 4], [0.0, 1.0, 1.0]).is_err());
        assert!(ComplexVolume3D::from_data([2, 2, 2], [1.0; 3], vec![C64::new(0.0, 0.0); 7]).is_err());
    }

    #[test]
    fn layout_is_x_fastest() {
        let v = ComplexVolume3D::from_fn([3, 4, 5], [1.0; 3], |x, y, z| C64::new((x + 10 * y + 100 * z) as f64, 0.0))
            .unwrap();
        assert_eq!(v.data()[1].re, 1.0);
        assert_eq!(v.data()[3].re, 10.0);
        assert_eq!(v.data()[12].re, 100.0);
        assert_eq!(v.get(2, 3, 4).re, 432.0);
        assert_eq!(v.position(1, 2, 2), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn slices_keep_in_plane_order() {
        let v = RealVolume3D::new([2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let s = v.slice(2, 1).unwrap();
        assert_eq!(s.dims, [2, 3, 1]);
        assert_eq!(s.data[0], 6.0);
        let s = v.slice(0, 1).unwrap();
        assert_eq!(s.dims, [3, 4, 1]);
        assert_eq!(s.data[1], 3.0);
        assert!(v.slice(1, 3).is_err());
    }
}
