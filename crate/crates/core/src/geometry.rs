//! Rigid-motion parameters and coordinate conventions.
//!
//! Axes: x = left-right, y = posterior-anterior, z = inferior-superior.
//! Planes: xy = axial, xz = coronal, yz = sagittal. A plane rotation by a
//! positive angle turns the first-named axis towards the second-named one
//! (`phi_xy = pi/2` maps `e_x` to `e_y`).
//!
//! The rotation of a point is applied plane by plane in the order xy, xz, yz,
//! i.e. `R = R_yz * R_xz * R_xy` acting on column vectors, followed by the
//! translation. The rotation centre is the centre of the field of view.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, MocoError, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Fixed axis semantics shared by simulation and reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisConvention;

impl AxisConvention {
    pub const AXES: [&'static str; 3] = ["left-right", "posterior-anterior", "inferior-superior"];
    pub const PLANES: [(&'static str, &'static str); 3] =
        [("xy", "axial"), ("xz", "coronal"), ("yz", "sagittal")];
    pub const ROTATION_SIGN: &'static str = "right-hand, first axis towards second";
    pub const TAG: &'static str = "x=LR,y=PA,z=IS;R=Ryz*Rxz*Rxy;right-hand";
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a + 2.0 * PI * ((PI - a) / (2.0 * PI)).floor();
    // floor can land one period off for values extremely close to the boundary
    if w <= -PI {
        w + 2.0 * PI
    } else if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Six rigid-motion parameters: translations in mm and plane-rotation angles
/// in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidParams {
    /// `(tau_x, tau_y, tau_z)` in mm.
    pub tau: Vec3,
    /// `(phi_xy, phi_xz, phi_yz)` in radians.
    pub phi: Vec3,
}

impl RigidParams {
    pub const IDENTITY: RigidParams = RigidParams {
        tau: [0.0; 3],
        phi: [0.0; 3],
    };

    /// Builds parameters with angles wrapped into `(-pi, pi]`.
    pub fn new(tau: Vec3, phi: Vec3) -> Result<Self> {
        if tau.iter().chain(phi.iter()).any(|v| !v.is_finite()) {
            return Err(invalid_param("rigid parameters must be finite"));
        }
        Ok(Self {
            tau,
            phi: phi.map(wrap_angle),
        })
    }

    pub fn from_degrees(tau: Vec3, phi_deg: Vec3) -> Result<Self> {
        Self::new(tau, phi_deg.map(f64::to_radians))
    }

    pub fn phi_degrees(&self) -> Vec3 {
        self.phi.map(f64::to_degrees)
    }

    /// Flat layout `(tau_x, tau_y, tau_z, phi_xy, phi_xz, phi_yz)`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.tau[0], self.tau[1], self.tau[2], self.phi[0], self.phi[1], self.phi[2],
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            tau: [a[0], a[1], a[2]],
            phi: [a[3], a[4], a[5]],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.tau == [0.0; 3] && self.phi == [0.0; 3]
    }

    pub fn matrix(&self) -> Mat3 {
        rotation_matrix_unchecked(self.phi)
    }

    /// Maps a point: `R p + tau`.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.matrix(), p), self.tau)
    }

    /// Maps a point back: `R^T (p - tau)`.
    pub fn apply_inverse(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.matrix(), sub(p, self.tau))
    }

    /// The transform `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &RigidParams) -> RigidParams {
        let ra = self.matrix();
        let rb = other.matrix();
        let r = mat_mul(&ra, &rb);
        let tau = add(mat_vec(&ra, other.tau), self.tau);
        RigidParams {
            tau,
            phi: angles_from_matrix(&r),
        }
    }

    pub fn inverse(&self) -> RigidParams {
        let r = self.matrix();
        let rt = transpose(&r);
        let tau = mat_vec(&rt, self.tau).map(|v| -v);
        RigidParams {
            tau,
            phi: angles_from_matrix(&rt),
        }
    }
}

fn plane_xy(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn plane_xz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

fn plane_yz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn d_plane_xy(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

fn d_plane_xz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, -c], [0.0, 0.0, 0.0], [c, 0.0, -s]]
}

fn d_plane_yz(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

pub(crate) fn rotation_matrix_unchecked(phi: Vec3) -> Mat3 {
    mat_mul(&plane_yz(phi[2]), &mat_mul(&plane_xz(phi[1]), &plane_xy(phi[0])))
}

/// `R_phi = R_yz(phi_yz) * R_xz(phi_xz) * R_xy(phi_xy)`.
pub fn rotation_matrix(phi: Vec3) -> Result<Mat3> {
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(invalid_param("rotation angles must be finite"));
    }
    Ok(rotation_matrix_unchecked(phi))
}

/// Partial derivatives `dR/dphi_xy`, `dR/dphi_xz`, `dR/dphi_yz`.
pub fn rotation_derivatives(phi: Vec3) -> [Mat3; 3] {
    let (rxy, rxz, ryz) = (plane_xy(phi[0]), plane_xz(phi[1]), plane_yz(phi[2]));
    [
        mat_mul(&ryz, &mat_mul(&rxz, &d_plane_xy(phi[0]))),
        mat_mul(&ryz, &mat_mul(&d_plane_xz(phi[1]), &rxy)),
        mat_mul(&d_plane_yz(phi[2]), &mat_mul(&rxz, &rxy)),
    ]
}

/// Recovers `(phi_xy, phi_xz, phi_yz)` from a rotation matrix built with the
/// composition order above.
pub fn angles_from_matrix(r: &Mat3) -> Vec3 {
    let b = (-r[0][2]).clamp(-1.0, 1.0).asin();
    let a = (-r[0][1]).atan2(r[0][0]);
    let c = (-r[1][2]).atan2(r[2][2]);
    [a, b, c]
}

/// Applies `R p + tau` to every point.
pub fn apply_rigid(params: &RigidParams, points: &[Vec3]) -> Result<Vec<Vec3>> {
    check_points(points)?;
    let r = rotation_matrix(params.phi)?;
    Ok(points
        .iter()
        .map(|&p| add(mat_vec(&r, p), params.tau))
        .collect())
}

/// Inverse of [`apply_rigid`]: untranslate, then rotate back.
pub fn apply_rigid_inverse(params: &RigidParams, points: &[Vec3]) -> Result<Vec<Vec3>> {
    check_points(points)?;
    let r = rotation_matrix(params.phi)?;
    Ok(points
        .iter()
        .map(|&p| mat_t_vec(&r, sub(p, params.tau)))
        .collect())
}

/// Returns `R_phi^T k` for each frequency vector.
pub fn inverse_rotate_kpoints(phi: Vec3, kpoints: &[Vec3]) -> Result<Vec<Vec3>> {
    check_points(kpoints)?;
    let r = rotation_matrix(phi)?;
    Ok(kpoints.iter().map(|&k| mat_t_vec(&r, k)).collect())
}

fn check_points(points: &[Vec3]) -> Result<()> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid_param("points must be finite"));
    }
    Ok(())
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

#[inline]
pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn mat_t_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// One rigid pose per readout time index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionTrace {
    pub params: Vec<RigidParams>,
}

pub const TRACE_CSV_HEADER: &str = "t,tau_x_mm,tau_y_mm,tau_z_mm,phi_xy_deg,phi_xz_deg,phi_yz_deg";

impl MotionTrace {
    pub fn new(params: Vec<RigidParams>) -> Self {
        Self { params }
    }

    pub fn identity(n_t: usize) -> Self {
        Self {
            params: vec![RigidParams::IDENTITY; n_t],
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Channel `c` (0..6, flat layout) as a time series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.params.iter().map(|p| p.to_array()[c]).collect()
    }

    pub fn from_channels(channels: &[Vec<f64>; 6]) -> Self {
        let n = channels[0].len();
        let params = (0..n)
            .map(|t| RigidParams::from_array(std::array::from_fn(|c| channels[c][t])))
            .collect();
        Self { params }
    }

    pub fn to_channels(&self) -> [Vec<f64>; 6] {
        std::array::from_fn(|c| self.channel(c))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.params.len() + 1));
        s.push_str(TRACE_CSV_HEADER);
        s.push('\n');
        for (t, p) in self.params.iter().enumerate() {
            let d = p.phi_degrees();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t, p.tau[0], p.tau[1], p.tau[2], d[0], d[1], d[2]
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRACE_CSV_HEADER => {}
            _ => return Err(MocoError::Format("trace csv: unexpected header".into())),
        }
        let mut params = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(MocoError::Format(format!("trace csv row {row}: expected 7 fields")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| MocoError::Format(format!("trace csv row {row}: {e}")))
            };
            let t: usize = fields[0]
                .trim()
                .parse()
                .map_err(|e| MocoError::Format(format!("trace csv row {row}: {e}")))?;
            if t != params.len() {
                return Err(MocoError::Format(format!("trace csv row {row}: time index {t} out of order")));
            }
            let tau = [parse(fields[1])?, parse(fields[2])?, parse(fields[3])?];
            let phi = [parse(fields[4])?, parse(fields[5])?, parse(fields[6])?];
            params.push(RigidParams::from_degrees(tau, phi)?);
        }
        Ok(Self { params })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Applies `f` to each pose.
    pub fn map(&self, f: impl Fn(&RigidParams) -> RigidParams) -> Self {
        Self {
            params: self.params.iter().map(f).collect(),
        }
    }

    pub fn check_len(&self, n_t: usize) -> Result<()> {
        if self.params.len() != n_t {
            return Err(invalid_input(format!(
                "trace length {} does not match {} readout lines",
                self.params.len(),
                n_t
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    const I3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn zero_rotation_is_exact_identity() {
        assert_eq!(rotation_matrix([0.0; 3]).unwrap(), I3);
    }

    #[test]
    fn quarter_turn_axial_maps_x_to_y() {
        let r = rotation_matrix([PI / 2.0, 0.0, 0.0]).unwrap();
        let v = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn composition_matches_explicit_product() {
        // explicit trig, written out independently of the plane helpers
        let (a, b, c) = (0.1f64, 0.2f64, 0.3f64);
        let rxy = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
        let rxz = [[b.cos(), 0.0, -b.sin()], [0.0, 1.0, 0.0], [b.sin(), 0.0, b.cos()]];
        let ryz = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
        let mut tmp = [[0.0; 3]; 3];
        let mut expect = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    tmp[i][j] += rxz[i][l] * rxy[l][j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    expect[i][j] += ryz[i][l] * tmp[l][j];
                }
            }
        }
        let r = rotation_matrix([a, b, c]).unwrap();
        assert!(max_abs_diff(&r, &expect) < 1e-15);
        let rtr = mat_mul(&transpose(&r), &r);
        assert!(max_abs_diff(&rtr, &I3) < 1e-12);
    }

    #[test]
    fn non_finite_angles_rejected() {
        assert!(rotation_matrix([f64::NAN, 0.0, 0.0]).is_err());
        assert!(RigidParams::new([f64::INFINITY, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn apply_rigid_examples() {
        let p = apply_rigid(&RigidParams::IDENTITY, &[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(p[0], [1.0, 2.0, 3.0]);
        let t = RigidParams::new([1.0, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(apply_rigid(&t, &[[0.0; 3]]).unwrap()[0], [1.0, 0.0, 0.0]);

        let params = RigidParams::new([1.0, -2.0, 0.5], [0.1, 0.2, 0.3]).unwrap();
        let out = apply_rigid(&params, &[[1.0, 1.0, 1.0]]).unwrap()[0];
        // oracle: rotate plane by plane on the point itself
        let mut q = [1.0f64, 1.0, 1.0];
        let (s, c) = 0.1f64.sin_cos();
        q = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
        let (s, c) = 0.2f64.sin_cos();
        q = [c * q[0] - s * q[2], q[1], s * q[0] + c * q[2]];
        let (s, c) = 0.3f64.sin_cos();
        q = [q[0], c * q[1] - s * q[2], s * q[1] + c * q[2]];
        let expect = [q[0] + 1.0, q[1] - 2.0, q[2] + 0.5];
        for j in 0..3 {
            assert!((out[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_rotate_kpoints_examples() {
        let k = [[0.3, -0.2, 0.1]];
        assert_eq!(inverse_rotate_kpoints([0.0; 3], &k).unwrap(), k.to_vec());
        let h = inverse_rotate_kpoints([PI, 0.0, 0.0], &[[0.7, 0.4, 0.0]]).unwrap()[0];
        assert!((h[0] + 0.7).abs() < 1e-12 && (h[1] + 0.4).abs() < 1e-12 && h[2].abs() < 1e-12);
        let phi = [0.4, -1.1, 2.0];
        let r = rotation_matrix(phi).unwrap();
        let rotated = mat_vec(&r, k[0]);
        let back = inverse_rotate_kpoints(phi, &[rotated]).unwrap()[0];
        for j in 0..3 {
            assert!((back[j] - k[0][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let phi = [0.3, -0.4, 0.7];
        let d = rotation_derivatives(phi);
        let h = 1e-6;
        for a in 0..3 {
            let mut p = phi;
            let mut m = phi;
            p[a] += h;
            m[a] -= h;
            let (rp, rm) = (rotation_matrix(p).unwrap(), rotation_matrix(m).unwrap());
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert!((fd - d[a][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-12);
        assert!((wrap_angle(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = MotionTrace::new(vec![
            RigidParams::IDENTITY,
            RigidParams::new([1.5, -0.25, 3.0], [0.01, -0.02, 0.03]).unwrap(),
        ]);
        let csv = trace.to_csv();
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        let back = MotionTrace::from_csv(&csv).unwrap();
        for (a, b) in trace.params.iter().zip(&back.params) {
            for (x, y) in a.to_array().iter().zip(b.to_array()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        assert!(MotionTrace::from_csv("t,a\n0,1\n").is_err());
    }

    fn angle() -> impl Strategy<Value = f64> {
        -3.0f64..3.0
    }

    proptest! {
        #[test]
        fn rotation_is_orthogonal(a in angle(), b in angle(), c in angle()) {
            let r = rotation_matrix([a, b, c]).unwrap();
            prop_assert!(max_abs_diff(&mat_mul(&transpose(&r), &r), &I3) < 1e-12);
        }

        #[test]
        fn rigid_inverse_round_trip(
            t in prop::array::uniform3(-20.0f64..20.0),
            phi in prop::array::uniform3(angle()),
            p in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let params = RigidParams::new(t, phi).unwrap();
            let q = apply_rigid_inverse(&params, &[p]).unwrap();
            let back = apply_rigid(&params, &q).unwrap()[0];
            for j in 0..3 {
                prop_assert!((back[j] - p[j]).abs() < 1e-10);
            }
        }

        #[test]
        fn wrapped_angles_give_identical_matrices(a in angle(), k in -3i32..3) {
            let shifted = a + 2.0 * PI * k as f64;
            let p = RigidParams::new([0.0; 3], [shifted, 0.2, -0.1]).unwrap();
            prop_assert!(p.phi[0] > -PI && p.phi[0] <= PI);
            let direct = rotation_matrix([a, 0.2, -0.1]).unwrap();
            prop_assert!(max_abs_diff(&p.matrix(), &direct) < 1e-12);
        }

        #[test]
        fn angle_decomposition_round_trip(
            a in angle(), b in -1.5f64..1.5, c in angle()
        ) {
            let r = rotation_matrix([a, b, c]).unwrap();
            let back = angles_from_matrix(&r);
            prop_assert!(max_abs_diff(&rotation_matrix(back).unwrap(), &r) < 1e-12);
        }

        #[test]
        fn compose_with_inverse_is_identity(
            t in prop::array::uniform3(-5.0f64..5.0),
            phi in prop::array::uniform3(-0.5f64..0.5),
            p in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let a = RigidParams::new(t, phi).unwrap();
            let id = a.compose(&a.inverse());
            let q = id.apply(p);
            for j in 0..3 {
                prop_assert!((q[j] - p[j]).abs() < 1e-10);
            }
        }
    }
}
