//! Structure-guided total variation and the projection onto its level sets.
//!
//! The guide turns a reference image `v` into unit-bounded directions
//! `xi = grad v / sqrt(|grad v|^2 + eta^2)` and the operator `Pi = I - xi xi^H`
//! suppresses the part of a gradient aligned with the reference structure.
//! With `xi = 0` everywhere this reduces to isotropic total variation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, MocoError, Result};
use crate::volume::{stable_sum, stable_sum_pair, ComplexVolume3D, Dims, C64};

pub type Grad = [C64; 3];

/// Forward differences divided by the voxel size, zero on the far face of each axis.
pub fn gradient(u: &ComplexVolume3D) -> Vec<Grad> {
    let d = u.dims();
    let h = u.voxel_size().map(|v| 1.0 / v);
    let data = u.data();
    let plane = d[0] * d[1];
    let mut out = vec![[C64::default(); 3]; data.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(iz, chunk)| {
        for iy in 0..d[1] {
            for ix in 0..d[0] {
                let i = ix + d[0] * iy;
                let g = iz * plane + i;
                let c = data[g];
                let mut v = [C64::default(); 3];
                if ix + 1 < d[0] {
                    v[0] = (data[g + 1] - c) * h[0];
                }
                if iy + 1 < d[1] {
                    v[1] = (data[g + d[0]] - c) * h[1];
                }
                if iz + 1 < d[2] {
                    v[2] = (data[g + plane] - c) * h[2];
                }
                chunk[i] = v;
            }
        }
    });
    out
}

/// Adjoint of [`gradient`] (the negative divergence).
pub fn gradient_adjoint(p: &[Grad], dims: Dims, voxel_size: [f64; 3]) -> Vec<C64> {
    let h = voxel_size.map(|v| 1.0 / v);
    let plane = dims[0] * dims[1];
    let mut out = vec![C64::default(); p.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(iz, chunk)| {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let i = ix + dims[0] * iy;
                let g = iz * plane + i;
                let mut acc = C64::default();
                if ix + 1 < dims[0] {
                    acc -= p[g][0] * h[0];
                }
                if ix > 0 {
                    acc += p[g - 1][0] * h[0];
                }
                if iy + 1 < dims[1] {
                    acc -= p[g][1] * h[1];
                }
                if iy > 0 {
                    acc += p[g - dims[0]][1] * h[1];
                }
                if iz + 1 < dims[2] {
                    acc -= p[g][2] * h[2];
                }
                if iz > 0 {
                    acc += p[g - plane][2] * h[2];
                }
                chunk[i] = acc;
            }
        }
    });
    out
}

/// Upper bound on `||grad||^2` for the grid.
pub fn gradient_norm_bound(voxel_size: [f64; 3]) -> f64 {
    voxel_size.iter().map(|v| 4.0 / (v * v)).sum()
}

#[inline]
pub(crate) fn vnorm_sqr(v: &Grad) -> f64 {
    v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr()
}

/// Per-voxel guide directions derived from a reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideField {
    dims: Dims,
    voxel_size: [f64; 3],
    xi: Vec<Grad>,
    eta: f64,
}

impl GuideField {
    /// Builds the guide with an explicit `eta`, or `0.05 * max |grad v|` when `None`.
    pub fn from_reference(reference: &ComplexVolume3D, eta: Option<f64>) -> Result<Self> {
        reference.check_finite()?;
        let g = gradient(reference);
        let eta = match eta {
            Some(e) if e.is_finite() && e > 0.0 => e,
            Some(e) => return Err(invalid_param(format!("guide eta must be positive, got {e}"))),
            None => 0.05 * g.iter().map(vnorm_sqr).fold(0.0, f64::max).sqrt(),
        };
        let xi = g
            .par_iter()
            .map(|v| {
                let d = (vnorm_sqr(v) + eta * eta).sqrt();
                if d == 0.0 {
                    [C64::default(); 3]
                } else {
                    [v[0] / d, v[1] / d, v[2] / d]
                }
            })
            .collect();
        Ok(Self {
            dims: reference.dims(),
            voxel_size: reference.voxel_size(),
            xi,
            eta,
        })
    }

    /// Guide with no structure; the regulariser becomes plain total variation.
    pub fn none(dims: Dims, voxel_size: [f64; 3]) -> Self {
        Self {
            dims,
            voxel_size,
            xi: vec![[C64::default(); 3]; dims[0] * dims[1] * dims[2]],
            eta: 0.0,
        }
    }

    /// Guide from explicit direction vectors (each of norm at most one).
    pub fn from_directions(dims: Dims, voxel_size: [f64; 3], xi: Vec<Grad>) -> Result<Self> {
        if xi.len() != dims[0] * dims[1] * dims[2] {
            return Err(invalid_input("guide direction count does not match dims"));
        }
        if xi.iter().any(|v| !(vnorm_sqr(v) <= 1.0 + 1e-12)) {
            return Err(invalid_input("guide directions must have norm at most one"));
        }
        Ok(Self {
            dims,
            voxel_size,
            xi,
            eta: 0.0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn directions(&self) -> &[Grad] {
        &self.xi
    }

    fn check(&self, u: &ComplexVolume3D) -> Result<()> {
        if u.dims() != self.dims {
            return Err(invalid_input(format!(
                "image dims {:?} do not match guide dims {:?}",
                u.dims(),
                self.dims
            )));
        }
        Ok(())
    }

    /// Applies `Pi = I - xi xi^H` voxel-wise, in place.
    pub fn project(&self, field: &mut [Grad]) {
        field.par_iter_mut().zip(self.xi.par_iter()).for_each(|(w, x)| {
            let c = x[0].conj() * w[0] + x[1].conj() * w[1] + x[2].conj() * w[2];
            for j in 0..3 {
                w[j] -= x[j] * c;
            }
        });
    }

    /// `Pi grad u`.
    pub fn projected_gradient(&self, u: &ComplexVolume3D) -> Result<Vec<Grad>> {
        self.check(u)?;
        let mut g = gradient(u);
        self.project(&mut g);
        Ok(g)
    }

    /// Adjoint of [`GuideField::projected_gradient`]: `grad^H Pi p`.
    pub fn projected_gradient_adjoint(&self, p: &[Grad]) -> Vec<C64> {
        let mut q = p.to_vec();
        self.project(&mut q);
        gradient_adjoint(&q, self.dims, self.voxel_size)
    }

    /// `sum_x |Pi grad u (x)|`.
    pub fn sgtv(&self, u: &ComplexVolume3D) -> Result<f64> {
        Ok(l12_norm(&self.projected_gradient(u)?))
    }
}

pub fn l12_norm(field: &[Grad]) -> f64 {
    stable_sum(field, |c| c.iter().map(|v| vnorm_sqr(v).sqrt()).sum())
}

pub fn sgtv_value(u: &ComplexVolume3D, guide: &GuideField) -> Result<f64> {
    guide.sgtv(u)
}

pub fn tv_value(u: &ComplexVolume3D) -> f64 {
    l12_norm(&gradient(u))
}

/// Convenience wrapper around [`GuideField::projected_gradient`].
pub fn projected_gradient(u: &ComplexVolume3D, guide: &GuideField) -> Result<Vec<Grad>> {
    guide.projected_gradient(u)
}

/// Euclidean projection of `y` onto `{p : sum_x |p_x| <= radius}`.
pub fn project_l12_ball(y: &mut [Grad], radius: f64) {
    let norms: Vec<f64> = y.par_iter().map(|v| vnorm_sqr(v).sqrt()).collect();
    let total: f64 = stable_sum(&norms, |c| c.iter().sum());
    if total <= radius {
        return;
    }
    if radius <= 0.0 {
        y.par_iter_mut().for_each(|v| *v = [C64::default(); 3]);
        return;
    }
    let theta = l1_threshold(&norms, radius);
    y.par_iter_mut().zip(norms.par_iter()).for_each(|(v, &n)| {
        let s = if n > theta { (n - theta) / n } else { 0.0 };
        for c in v.iter_mut() {
            *c *= s;
        }
    });
}

/// Threshold `theta` with `sum max(a_i - theta, 0) = radius` for non-negative `a`
/// whose sum exceeds `radius`.
fn l1_threshold(a: &[f64], radius: f64) -> f64 {
    let mut sorted: Vec<f64> = a.iter().copied().filter(|&v| v > 0.0).collect();
    sorted.par_sort_unstable_by(|x, y| y.total_cmp(x));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - radius) / (i + 1) as f64;
        if v > t {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionOptions {
    pub max_iterations: usize,
    /// Relative tolerance on the constraint violation and the duality gap.
    pub tolerance: f64,
    /// Rescale towards the mean when the iteration cap is reached infeasible.
    pub feasibility_fallback: bool,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-4,
            feasibility_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub iterations: usize,
    /// `max(0, sgtv(w) - eps) / eps` before any fallback.
    pub violation: f64,
    pub gap: f64,
    /// Both tolerances were met (trivially so when `z` was already feasible).
    pub converged: bool,
    pub fallback_used: bool,
}

/// Dual variable kept between calls to warm-start the projection.
#[derive(Debug, Clone, Default)]
pub struct DualState {
    p: Vec<Grad>,
}

impl DualState {
    pub fn reset(&mut self) {
        self.p.clear();
    }
}

/// Projects `z` onto `{w : sgtv(w) <= eps}`.
///
/// Solved through the dual `min_p 1/2 |z - A^H p|^2 + eps |p|_{inf,2}` with
/// `A = Pi grad`, using FISTA; the primal point is `w = z - A^H p`.
pub fn project_sgtv_ball(
    z: &ComplexVolume3D,
    guide: &GuideField,
    eps: f64,
    opts: &ProjectionOptions,
    warm: Option<&mut DualState>,
) -> Result<(ComplexVolume3D, ProjectionInfo)> {
    guide.check(z)?;
    z.check_finite()?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(invalid_param(format!("constraint radius must be non-negative, got {eps}")));
    }
    if opts.max_iterations == 0 || !(opts.tolerance > 0.0) {
        return Err(invalid_param("projection needs a positive iteration cap and tolerance"));
    }
    let mut info = ProjectionInfo {
        iterations: 0,
        violation: 0.0,
        gap: 0.0,
        converged: true,
        fallback_used: false,
    };
    let current = guide.sgtv(z)?;
    if current <= eps {
        return Ok((z.clone(), info));
    }
    if eps == 0.0 {
        let mut w = z.zeros_like();
        let m = z.mean();
        w.data_mut().iter_mut().for_each(|v| *v = m);
        return Ok((w, info));
    }

    let n = z.len();
    let lip = gradient_norm_bound(guide.voxel_size);
    let mut scratch = DualState::default();
    let state = warm.unwrap_or(&mut scratch);
    if state.p.len() != n {
        state.p = vec![[C64::default(); 3]; n];
    }
    let mut p = std::mem::take(&mut state.p);
    let mut y = p.clone();
    let mut t = 1.0f64;
    let zd = z.data();
    let z2 = z.norm_sqr();

    let primal = |p: &[Grad]| -> Vec<C64> {
        let ap = guide.projected_gradient_adjoint(p);
        zd.par_iter().zip(ap.par_iter()).map(|(a, b)| a - b).collect()
    };

    let mut w_data = primal(&p);
    for it in 1..=opts.max_iterations {
        let wy = primal(&y);
        let wy_vol = ComplexVolume3D::from_data(z.dims(), z.voxel_size(), wy)?;
        // gradient of the smooth dual term at y is -A w(y)
        let aw = guide.projected_gradient(&wy_vol)?;
        let mut next: Vec<Grad> = y
            .par_iter()
            .zip(aw.par_iter())
            .map(|(yv, g)| [yv[0] + g[0] / lip, yv[1] + g[1] / lip, yv[2] + g[2] / lip])
            .collect();
        // prox of (eps/L)|.|_{inf,2} by Moreau: v - proj_{l12 ball of radius eps/L}(v)
        let mut proj = next.clone();
        project_l12_ball(&mut proj, eps / lip);
        next.par_iter_mut().zip(proj.par_iter()).for_each(|(v, q)| {
            for j in 0..3 {
                v[j] -= q[j];
            }
        });
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = next
            .par_iter()
            .zip(p.par_iter())
            .map(|(a, b)| [a[0] + (a[0] - b[0]) * beta, a[1] + (a[1] - b[1]) * beta, a[2] + (a[2] - b[2]) * beta])
            .collect();
        p = next;
        t = t_next;
        info.iterations = it;

        if it % 5 == 0 || it == opts.max_iterations {
            w_data = primal(&p);
            let w = ComplexVolume3D::from_data(z.dims(), z.voxel_size(), w_data.clone())?;
            let s = guide.sgtv(&w)?;
            info.violation = ((s - eps) / eps).max(0.0);
            let dist = 0.5 * stable_sum_pair(&w_data, zd, |a, b| a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum());
            let pinf = p.iter().map(|v| vnorm_sqr(v).sqrt()).fold(0.0, f64::max);
            // dual value: 1/2|z|^2 - 1/2|w|^2 - eps |p|_inf
            let dual = 0.5 * z2 - 0.5 * w.norm_sqr() - eps * pinf;
            info.gap = ((dist - dual) / dist.max(f64::MIN_POSITIVE)).abs();
            if info.violation <= opts.tolerance && info.gap <= opts.tolerance {
                break;
            }
        }
    }
    info.converged = info.violation <= opts.tolerance && info.gap <= opts.tolerance;
    state.p = p;

    let mut w = ComplexVolume3D::from_data(z.dims(), z.voxel_size(), w_data)?;
    let s = guide.sgtv(&w)?;
    if s > eps {
        if info.violation > opts.tolerance && !opts.feasibility_fallback {
            return Err(MocoError::Convergence {
                iterations: info.iterations,
                violation: info.violation,
                gap: info.gap,
            });
        }
        let m = w.mean();
        let scale = eps / s;
        w.data_mut().par_iter_mut().for_each(|v| *v = m + (*v - m) * scale);
        info.fallback_used = true;
    }
    Ok((w, info))
}
