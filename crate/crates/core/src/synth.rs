//! Analytic scenes with exact depth: a textured ground plane plus a few
//! axis-aligned boxes, seen from a forward-moving camera.
//!
//! World axes follow the camera convention (x right, y down, z forward); the
//! ground is the plane `y = 0` and the camera flies at `y = -height`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{frame_name, depth_name, write_poses, INTRINSICS_FILE, POSES_FILE};
use crate::error::{contract_err, domain_err, Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::image_io::{quantize, write_ppm};
use crate::lkdt;
use crate::random::rng;
use crate::tensor::Tensor;

/// Depth assigned to rays that hit nothing.
pub const FAR_PLANE: f64 = 100.0;
/// Closest admissible surface distance along the optical axis.
pub const MIN_CLEARANCE: f64 = 0.5;
pub const BACKGROUND: [f64; 3] = [0.55, 0.65, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub freq: [f64; 3],
    pub phase: f64,
    pub amp: [f64; 3],
}

/// Sum of sinusoids over world coordinates, per colour channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.freq[0] * p.x + w.freq[1] * p.y + w.freq[2] * p.z + w.phase).sin();
            for (ch, a) in c.iter_mut().zip(w.amp) {
                *ch += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Three waves with spatial frequencies `freq_scale * (1..=2)` rad/m along the masked axes.
    pub fn random(rng: &mut impl Rng, base: [f64; 3], axes: [f64; 3], freq_scale: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let freq = axes.map(|a| a * freq_scale * rng.random_range(-2.0..2.0));
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = [0; 3].map(|_| rng.random_range(0.04..0.1));
                Wave { freq, phase, amp }
            })
            .collect();
        Self { base, waves }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub texture: Texture,
}

impl SceneBox {
    /// Entry distance of `origin + t * dir`, if the ray enters the box at `t > 0`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[a] - origin[a]) / dir[a];
            let t2 = (self.max[a] - origin[a]) / dir[a];
            near = near.max(t1.min(t2));
            far = far.min(t1.max(t2));
        }
        (near <= far && near > 0.0).then_some(near)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub cam: CameraModel,
    pub ground: Texture,
    pub boxes: Vec<SceneBox>,
    /// Camera-to-world poses.
    pub trajectory: Vec<RigidTransform>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Camera-to-world rotation looking along +z, pitched down by `pitch` radians.
pub fn pitched_rotation(pitch: f64) -> Matrix3<f64> {
    let (s, c) = pitch.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// KITTI-like intrinsics scaled to the image size.
pub fn default_camera(width: usize, height: usize) -> Result<CameraModel> {
    CameraModel::new(
        0.58 * width as f64,
        1.92 * height as f64,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )
}

pub const CAMERA_HEIGHT: f64 = 1.5;
pub const CAMERA_PITCH: f64 = 0.43;
pub const FORWARD_STEP: f64 = 0.15;

impl SceneSpec {
    /// Ground plane, two boxes 4-7 m ahead, forward motion with lateral sway.
    pub fn default_scene(width: usize, height: usize, frames: usize, seed: u64) -> Result<Self> {
        let cam = default_camera(width, height)?;
        let mut r = rng(seed);
        let ground = Texture::random(&mut r, [0.45, 0.42, 0.38], [1.0, 0.0, 0.5], 1.5);
        let mut boxes = Vec::new();
        for side in [-1.0, 1.0] {
            let x = side * r.random_range(0.8..1.6);
            let z = r.random_range(4.0..6.0);
            let (half_w, depth, tall) = (
                r.random_range(0.4..0.6),
                r.random_range(0.6..1.0),
                r.random_range(0.8..1.4),
            );
            let base = [0; 3].map(|_| r.random_range(0.3..0.7));
            boxes.push(SceneBox {
                min: Vector3::new(x - half_w, -tall, z),
                max: Vector3::new(x + half_w, 0.0, z + depth),
                texture: Texture::random(&mut r, base, [1.0, 1.0, 1.0], 2.0),
            });
        }
        let rot = pitched_rotation(CAMERA_PITCH);
        let trajectory = (0..frames)
            .map(|k| {
                let k = k as f64;
                let c = Vector3::new(0.08 * (0.9 * k).sin(), -CAMERA_HEIGHT, FORWARD_STEP * k);
                RigidTransform::new(rot, c)
            })
            .collect();
        let spec = Self {
            cam,
            ground,
            boxes,
            trajectory,
            noise_sigma: 0.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory.len() < 3 {
            return Err(contract_err!("trajectory needs at least 3 poses"));
        }
        if self.boxes.is_empty() || self.boxes.len() > 3 {
            return Err(contract_err!("scene needs 1 to 3 boxes, got {}", self.boxes.len()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(domain_err!("noise sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// Maps points in camera `from` into camera `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> RigidTransform {
        self.trajectory[to].inverse().compose(&self.trajectory[from])
    }

    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, &Texture)> = None;
        if dir.y > 1e-12 {
            let t = -origin.y / dir.y;
            if t > 0.0 {
                best = Some((t, &self.ground));
            }
        }
        for b in &self.boxes {
            if let Some(t) = b.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, &b.texture));
                }
            }
        }
        best.map(|(t, tex)| (t, tex.color(&(origin + dir * t))))
    }
}

/// Image in `[0,1]` (8-bit quantised) and z-depth in metres for one frame.
pub fn render(spec: &SceneSpec, index: usize) -> Result<(Tensor, Tensor)> {
    let pose = spec
        .trajectory
        .get(index)
        .ok_or_else(|| contract_err!("frame {index} outside trajectory of {}", spec.len()))?;
    let cam = &spec.cam;
    let (h, w) = (cam.height, cam.width);
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = Tensor::zeros(&[1, h, w]);
    let origin = pose.translation;
    for i in 0..h {
        for j in 0..w {
            let ray = Vector3::new((j as f64 - cam.cx) / cam.fx, (i as f64 - cam.cy) / cam.fy, 1.0);
            let dir = pose.rotation * ray;
            // the ray has unit camera-z, so the hit parameter is the z-depth
            let (z, color) = spec.trace(&origin, &dir).unwrap_or((FAR_PLANE, BACKGROUND));
            if z < MIN_CLEARANCE {
                return Err(domain_err!("surface at {z:.3} m in frame {index}"));
            }
            depth.set(&[0, i, j], z.min(FAR_PLANE));
            for (ch, v) in color.into_iter().enumerate() {
                image.set(&[ch, i, j], v);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut r = rng(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| domain_err!("{e}"))?;
        for v in image.data_mut() {
            *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    Ok((quantize(&image), depth))
}

/// Writes every frame, depth map, the intrinsics, poses and a README into `dir`.
pub fn make_sequence(spec: &SceneSpec, dir: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for k in 0..spec.len() {
        let (image, depth) = render(spec, k)?;
        write_ppm(dir.join(frame_name(k)), &image)?;
        lkdt::write_file(dir.join(depth_name(k)), &depth)?;
    }
    spec.cam.write_file(dir.join(INTRINSICS_FILE))?;
    write_poses(dir.join(POSES_FILE), &spec.trajectory)?;
    let mut readme = String::new();
    let _ = writeln!(readme, "# Synthetic sequence\n");
    let _ = writeln!(readme, "{} frames, {}x{} pixels, seed {}.\n", spec.len(), spec.cam.width, spec.cam.height, spec.seed);
    let _ = writeln!(readme, "- `frame_NNNN.ppm`: binary P6 RGB, 8 bits per channel.");
    let _ = writeln!(readme, "- `depth_NNNN.lkdt`: z-depth in metres, tensor of shape [1,H,W]; {FAR_PLANE} m where no surface is hit.");
    let _ = writeln!(readme, "- `{INTRINSICS_FILE}`: one line `fx fy cx cy W H` in pixels.");
    let _ = writeln!(readme, "- `{POSES_FILE}`: one camera-to-world 3x4 matrix per frame, row-major, 12 numbers per line.");
    let path = dir.join("README.md");
    fs::write(&path, readme).map_err(|e| Error::io(&path, e))
}
