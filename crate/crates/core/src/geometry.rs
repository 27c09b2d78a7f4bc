//! Pinhole camera, SE(3) poses, and differentiable view synthesis.
//!
//! Pixel `(i, j)` (row, column) sits at image coordinates `(x = j, y = i)`.
//! A [`RigidTransform`] maps points as `p' = R p + t`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{Tape, Var};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::nn::{grid_sample, SampleGrid};
use crate::tensor::Tensor;

/// Points closer than this (camera z, metres) are clamped before division.
pub const MIN_PROJECTION_Z: f64 = 1e-3;
/// Below this rotation angle the exponential map uses `I + [w]x`.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        let ok = fx > 0.0
            && fy > 0.0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(domain_err!("invalid intrinsics {cam:?}"));
        }
        Ok(cam)
    }

    /// Intrinsics after keeping the `height x width` window whose top-left is `(top, left)`.
    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            self.fx,
            self.fy,
            self.cx - left as f64,
            self.cy - top as f64,
            width,
            height,
        )
    }

    /// Unit-depth ray `((x - cx)/fx, (y - cy)/fy, 1)` for every pixel, `[3,H,W]`.
    pub fn pixel_rays(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |k| {
            let (c, r) = (k / (h * w), k % (h * w));
            let (i, j) = (r / w, r % w);
            match c {
                0 => (j as f64 - self.cx) / self.fx,
                1 => (i as f64 - self.cy) / self.fy,
                _ => 1.0,
            }
        })
    }

    /// One line: `fx fy cx cy W H`.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Format(format!(
                "intrinsics need 6 values `fx fy cx cy W H`, got {}",
                parts.len()
            )));
        }
        let f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad intrinsic {s:?}: {e}")))
        };
        let u = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Format(format!("bad image extent {s:?}: {e}")))
        };
        Self::new(
            f(parts[0])?,
            f(parts[1])?,
            f(parts[2])?,
            f(parts[3])?,
            u(parts[4])?,
            u(parts[5])?,
        )
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(text.trim())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, format!("{}\n", self.to_line())).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest deviation of `R^T R` from `I` and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        dev.max((r.determinant() - 1.0).abs())
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Format(format!("pose needs 12 values, got {}", v.len())));
        }
        let rotation = Matrix3::from_fn(|r, c| v[r * 4 + c]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Ok(Self::new(rotation, translation))
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation of an axis-angle vector.
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k;
    }
    let a = theta.sin() / theta;
    let half = (0.5 * theta).sin();
    let b = 2.0 * half * half / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

/// `dR/dw_i` for i = 0..3, consistent with [`rotation_from_axis_angle`].
pub fn rotation_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2.sqrt() < SMALL_ANGLE {
        return basis.map(|e| skew(&e));
    }
    let r = rotation_from_axis_angle(w);
    let k = skew(w);
    let i_minus_r = Matrix3::identity() - r;
    let mut out = [Matrix3::zeros(); 3];
    for (slot, (i, e)) in out.iter_mut().zip(basis.iter().enumerate()) {
        let cross = w.cross(&(i_minus_r * e));
        *slot = (k * w[i] + skew(&cross)) / theta2 * r;
    }
    out
}

pub fn se3_exp(axis_angle: &Vector3<f64>, translation: &Vector3<f64>) -> RigidTransform {
    RigidTransform::new(rotation_from_axis_angle(axis_angle), *translation)
}

fn check_depth(depth: &Tensor, cam: &CameraModel) -> Result<()> {
    let (c, h, w) = depth.chw()?;
    if c != 1 || h != cam.height || w != cam.width {
        return Err(shape_err!(
            "depth {:?} does not match camera {}x{}",
            depth.shape(),
            cam.width,
            cam.height
        ));
    }
    if depth.data().iter().any(|&d| d <= 0.0) {
        return Err(domain_err!("backproject needs strictly positive depth"));
    }
    Ok(())
}

/// Camera-frame points `depth * ((x-cx)/fx, (y-cy)/fy, 1)`, `[3,H,W]`.
pub fn backproject(depth: &Tensor, cam: &CameraModel) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = tape.constant(depth.clone());
    let p = tape.backproject(d, cam)?;
    Ok(tape.value(p).clone())
}

/// Pixel coordinates of `T * points`.
pub fn project(points: &Tensor, cam: &CameraModel, pose: &RigidTransform) -> Result<SampleGrid> {
    let moved = transform_points(points, pose)?;
    SampleGrid::new(project_raw(&moved, cam)?)
}

pub fn transform_points(points: &Tensor, pose: &RigidTransform) -> Result<Tensor> {
    let (c, h, w) = points.chw()?;
    if c != 3 {
        return Err(shape_err!("points must be [3,H,W], got {:?}", points.shape()));
    }
    let n = h * w;
    let src = points.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..n {
        let v = pose.apply(&Vector3::new(src[p], src[n + p], src[2 * n + p]));
        out[p] = v.x;
        out[n + p] = v.y;
        out[2 * n + p] = v.z;
    }
    Tensor::new(points.shape(), out)
}

fn project_raw(points: &Tensor, cam: &CameraModel) -> Result<Tensor> {
    let (c, h, w) = points.chw()?;
    if c != 3 {
        return Err(shape_err!("points must be [3,H,W], got {:?}", points.shape()));
    }
    let n = h * w;
    let src = points.data();
    let mut out = vec![0.0; 2 * n];
    for p in 0..n {
        let z = src[2 * n + p].max(MIN_PROJECTION_Z);
        out[p] = cam.fx * src[p] / z + cam.cx;
        out[n + p] = cam.fy * src[n + p] / z + cam.cy;
    }
    Tensor::new(&[2, h, w], out)
}

pub fn warp(source: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    grid_sample(source, grid)
}

impl Tape {
    pub fn backproject(&mut self, depth: Var, cam: &CameraModel) -> Result<Var> {
        check_depth(self.value(depth), cam)?;
        let rays = self.constant(cam.pixel_rays());
        self.mul(rays, depth)
    }

    /// `R(axis_angle) * points + translation` with both 3-vectors as vars.
    pub fn rigid_transform(&mut self, points: Var, axis_angle: Var, translation: Var) -> Result<Var> {
        for v in [axis_angle, translation] {
            if self.value(v).numel() != 3 {
                return Err(shape_err!("pose vectors need 3 values, got {:?}", self.shape(v)));
            }
        }
        let w = vec3(self.value(axis_angle));
        let t = vec3(self.value(translation));
        let value = transform_points(self.value(points), &se3_exp(&w, &t))?;
        let (w_shape, t_shape) = (self.shape(axis_angle).to_vec(), self.shape(translation).to_vec());
        Ok(self.push_op(
            value,
            &[points, axis_angle, translation],
            Box::new(move |p, _, g, needs| {
                let pts = p[0];
                let n = pts.numel() / 3;
                let w = vec3(p[1]);
                let r = rotation_from_axis_angle(&w);
                let jac = rotation_jacobian(&w);
                let (src, gd) = (pts.data(), g.data());
                let mut gp = needs[0].then(|| vec![0.0; pts.numel()]);
                let mut gw = Vector3::zeros();
                let mut gt = Vector3::zeros();
                for i in 0..n {
                    let gv = Vector3::new(gd[i], gd[n + i], gd[2 * n + i]);
                    gt += gv;
                    if let Some(gp) = gp.as_mut() {
                        let back = r.transpose() * gv;
                        gp[i] = back.x;
                        gp[n + i] = back.y;
                        gp[2 * n + i] = back.z;
                    }
                    if needs[1] {
                        let pv = Vector3::new(src[i], src[n + i], src[2 * n + i]);
                        for (k, j) in jac.iter().enumerate() {
                            gw[k] += gv.dot(&(j * pv));
                        }
                    }
                }
                vec![
                    gp.map(|v| Tensor::new(pts.shape(), v).expect("shape")),
                    Some(Tensor::new(&w_shape, gw.as_slice().to_vec()).expect("shape")),
                    Some(Tensor::new(&t_shape, gt.as_slice().to_vec()).expect("shape")),
                ]
            }),
        ))
    }

    /// Pinhole projection of camera-frame points to a `[2,H,W]` sample grid.
    pub fn project(&mut self, points: Var, cam: &CameraModel) -> Result<Var> {
        let value = project_raw(self.value(points), cam)?;
        let (fx, fy) = (cam.fx, cam.fy);
        Ok(self.push_op(
            value,
            &[points],
            Box::new(move |p, _, g, _| {
                let pts = p[0];
                let n = pts.numel() / 3;
                let (src, gd) = (pts.data(), g.data());
                let mut gp = vec![0.0; pts.numel()];
                for i in 0..n {
                    let (x, y, zr) = (src[i], src[n + i], src[2 * n + i]);
                    let z = zr.max(MIN_PROJECTION_Z);
                    let (gx, gy) = (gd[i], gd[n + i]);
                    gp[i] = gx * fx / z;
                    gp[n + i] = gy * fy / z;
                    if zr > MIN_PROJECTION_Z {
                        gp[2 * n + i] = -(gx * fx * x + gy * fy * y) / (z * z);
                    }
                }
                vec![Some(Tensor::new(pts.shape(), gp).expect("shape"))]
            }),
        ))
    }

    /// Samples `source` at `grid`; alias of [`Tape::grid_sample`].
    pub fn warp(&mut self, source: Var, grid: Var) -> Result<Var> {
        self.grid_sample(source, grid)
    }
}

fn vec3(t: &Tensor) -> Vector3<f64> {
    Vector3::new(t.data()[0], t.data()[1], t.data()[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::random::{rng, uniform, uniform_with};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam() -> CameraModel {
        CameraModel::new(20.0, 22.0, 7.5, 5.5, 16, 12).unwrap()
    }

    /// Rotation matrix through a unit quaternion, independent of Rodrigues.
    fn quaternion_rotation(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta = w.norm();
        let axis = w / theta;
        let (s, c) = ((theta / 2.0).sin(), (theta / 2.0).cos());
        let (qw, qx, qy, qz) = (c, axis.x * s, axis.y * s, axis.z * s);
        Matrix3::new(
            1.0 - 2.0 * (qy * qy + qz * qz),
            2.0 * (qx * qy - qz * qw),
            2.0 * (qx * qz + qy * qw),
            2.0 * (qx * qy + qz * qw),
            1.0 - 2.0 * (qx * qx + qz * qz),
            2.0 * (qy * qz - qx * qw),
            2.0 * (qx * qz - qy * qw),
            2.0 * (qy * qz + qx * qw),
            1.0 - 2.0 * (qx * qx + qy * qy),
        )
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = se3_exp(&Vector3::zeros(), &Vector3::zeros());
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = se3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2), &Vector3::zeros());
        let p = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rodrigues_matches_quaternions() {
        let mut r = rng(1);
        for _ in 0..50 {
            let w = uniform_with(&mut r, &[3], -3.0, 3.0);
            let w = Vector3::new(w.data()[0], w.data()[1], w.data()[2]);
            let diff = (rotation_from_axis_angle(&w) - quaternion_rotation(&w)).abs().max();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        for w in [Vector3::new(0.3, -0.7, 1.1), Vector3::new(1e-3, 2e-3, -1e-3), Vector3::zeros()] {
            let jac = rotation_jacobian(&w);
            for (i, j) in jac.iter().enumerate() {
                let mut wp = w;
                let mut wm = w;
                wp[i] += 1e-6;
                wm[i] -= 1e-6;
                let fd = (rotation_from_axis_angle(&wp) - rotation_from_axis_angle(&wm)) / 2e-6;
                assert!((fd - j).abs().max() < 1e-7, "w={w:?} i={i}");
            }
        }
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, t in -5.0f64..5.0) {
            let x = se3_exp(&Vector3::new(a, b, c), &Vector3::new(t, -t, 0.5 * t));
            prop_assert!(x.orthonormality_error() < 1e-9);
            let id = x.compose(&x.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn backproject_principal_point() {
        let cam = CameraModel::new(10.0, 10.0, 2.0, 1.0, 5, 3).unwrap();
        let p = backproject(&Tensor::ones(&[1, 3, 5]), &cam).unwrap();
        assert_eq!([p.get(&[0, 1, 2]), p.get(&[1, 1, 2]), p.get(&[2, 1, 2])], [0.0, 0.0, 1.0]);
        let p2 = backproject(&Tensor::full(&[1, 3, 5], 2.0), &cam).unwrap();
        assert!(p2.max_abs_diff(&p.scale(2.0)) == 0.0);
        assert!(backproject(&Tensor::zeros(&[1, 3, 5]), &cam).is_err());
    }

    #[test]
    fn identity_roundtrip_recovers_pixel_grid() {
        let c = cam();
        let depth = uniform(&[1, 12, 16], 0.5, 50.0, 2);
        let grid = project(&backproject(&depth, &c).unwrap(), &c, &RigidTransform::identity()).unwrap();
        let pixels = SampleGrid::identity(12, 16, 1);
        assert!(grid.coords().max_abs_diff(pixels.coords()) < 1e-9);
    }

    #[test]
    fn forward_motion_pushes_points_outward() {
        let c = cam();
        let pts = backproject(&Tensor::full(&[1, 12, 16], 5.0), &c).unwrap();
        let toward = RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0));
        let grid = project(&pts, &c, &toward).unwrap();
        for i in 0..12 {
            for j in 0..16 {
                let (dx0, dy0) = (j as f64 - c.cx, i as f64 - c.cy);
                let (dx1, dy1) = (grid.coords().get(&[0, i, j]) - c.cx, grid.coords().get(&[1, i, j]) - c.cy);
                assert!(dx1 * dx0 >= 0.0 && dy1 * dy0 >= 0.0);
                assert!(dx1.hypot(dy1) >= dx0.hypot(dy0));
            }
        }
    }

    #[test]
    fn shifted_grid_shifts_ramp() {
        let ramp = Tensor::from_fn(&[3, 4, 6], |k| (k % 6) as f64 * 0.1);
        let mut coords = SampleGrid::identity(4, 6, 1).into_tensor();
        for v in &mut coords.data_mut()[..24] {
            *v += 1.0;
        }
        let out = warp(&ramp, &SampleGrid::new(coords).unwrap()).unwrap();
        for j in 0..5 {
            assert!((out.get(&[0, 2, j]) - ramp.get(&[0, 2, j + 1])).abs() < 1e-15);
        }
        assert_eq!(warp(&ramp, &SampleGrid::identity(4, 6, 1)).unwrap(), ramp);
    }

    #[test]
    fn intrinsics_line_round_trips() {
        let c = cam();
        assert_eq!(CameraModel::parse(&c.to_line()).unwrap(), c);
        assert!(CameraModel::parse("1 2 3").is_err());
        assert!(CameraModel::new(-1.0, 1.0, 0.0, 0.0, 2, 2).is_err());
    }

    #[test]
    fn depth_and_pose_gradients_through_warp() {
        let c = CameraModel::new(6.0, 6.0, 3.5, 2.5, 8, 6).unwrap();
        let source = Tensor::from_fn(&[3, 6, 8], |k| {
            let (ch, r) = (k / 48, k % 48);
            let (i, j) = ((r / 8) as f64, (r % 8) as f64);
            0.5 + 0.3 * (0.7 * j + 0.4 * i + ch as f64).sin()
        });
        let depth = uniform(&[1, 6, 8], 2.0, 4.0, 3);
        let w = Tensor::new(&[3], vec![0.01, -0.02, 0.015]).unwrap();
        let t = Tensor::new(&[3], vec![0.05, 0.02, -0.04]).unwrap();
        let err = grad_check(
            |tape, v| {
                let pts = tape.backproject(v[0], &c)?;
                let pts = tape.rigid_transform(pts, v[1], v[2])?;
                let grid = tape.project(pts, &c)?;
                let src = tape.constant(source.clone());
                let out = tape.warp(src, grid)?;
                let out = tape.unary(out, crate::autodiff::UnaryOp::Square)?;
                tape.mean(out)
            },
            &[depth, w, t],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rigid_transform_points_gradient() {
        let err = grad_check(
            |tape, v| {
                let p = tape.rigid_transform(v[0], v[1], v[2])?;
                let p = tape.unary(p, crate::autodiff::UnaryOp::Square)?;
                tape.sum(p)
            },
            &[
                uniform(&[3, 2, 3], -1.0, 1.0, 5),
                Tensor::new(&[3], vec![0.4, -0.3, 0.9]).unwrap(),
                Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pose_round_trips_row_major() {
        let t = se3_exp(&Vector3::new(0.1, 0.2, -0.3), &Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()).unwrap(), t);
    }
}
