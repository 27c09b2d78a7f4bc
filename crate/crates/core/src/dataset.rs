//! Sequence directories: `frame_NNNN.ppm`, optional `depth_NNNN.lkdt`,
//! `intrinsics.txt` and optional `poses.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::image_io::read_ppm;
use crate::lkdt;
use crate::tensor::Tensor;

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const POSES_FILE: &str = "poses.txt";

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}.ppm")
}

pub fn depth_name(k: usize) -> String {
    format!("depth_{k:04}.lkdt")
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[RigidTransform]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("pose value {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            RigidTransform::from_row_major(&v)
        })
        .collect()
}

/// Top-left corner of a centred `th x tw` window inside `h x w`.
pub fn crop_offsets(h: usize, w: usize, th: usize, tw: usize) -> Result<(usize, usize)> {
    if th > h || tw > w {
        return Err(shape_err!("cannot crop {h}x{w} to {th}x{tw}"));
    }
    Ok(((h - th) / 2, (w - tw) / 2))
}

pub fn crop(t: &Tensor, top: usize, left: usize, th: usize, tw: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if top + th > h || left + tw > w {
        return Err(shape_err!("crop window exceeds {h}x{w}"));
    }
    Ok(Tensor::from_fn(&[c, th, tw], |k| {
        let (ch, r) = (k / (th * tw), k % (th * tw));
        t.get(&[ch, top + r / tw, left + r % tw])
    }))
}

pub fn center_crop(t: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (_, h, w) = t.chw()?;
    let (top, left) = crop_offsets(h, w, th, tw)?;
    crop(t, top, left, th, tw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub cam: CameraModel,
    pub frames: Vec<Tensor>,
    pub depths: Option<Vec<Tensor>>,
    /// Camera-to-world.
    pub poses: Option<Vec<RigidTransform>>,
}

fn numbered(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with(prefix) && name.ends_with(ext) {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

impl Sequence {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cam = CameraModel::read_file(dir.join(INTRINSICS_FILE))?;
        let frames = numbered(dir, "frame_", ".ppm")?
            .iter()
            .map(read_ppm)
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::Format(format!("no frame_*.ppm files in {}", dir.display())));
        }
        for f in &frames {
            if f.shape() != [3, cam.height, cam.width] {
                return Err(shape_err!(
                    "frame {:?} does not match intrinsics {}x{}",
                    f.shape(),
                    cam.width,
                    cam.height
                ));
            }
        }
        let depth_paths = numbered(dir, "depth_", ".lkdt")?;
        let depths = if depth_paths.is_empty() {
            None
        } else {
            if depth_paths.len() != frames.len() {
                return Err(Error::Format(format!(
                    "{} depth maps for {} frames",
                    depth_paths.len(),
                    frames.len()
                )));
            }
            Some(depth_paths.iter().map(lkdt::read_file).collect::<Result<Vec<_>>>()?)
        };
        let pose_path = dir.join(POSES_FILE);
        let poses = if pose_path.exists() { Some(read_poses(&pose_path)?) } else { None };
        Ok(Self {
            cam,
            frames,
            depths,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Centre-crops every frame and depth map, shifting the principal point.
    pub fn center_cropped(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.cam.height, self.cam.width) {
            return Ok(self.clone());
        }
        let (top, left) = crop_offsets(self.cam.height, self.cam.width, height, width)?;
        let c = |t: &Tensor| crop(t, top, left, height, width);
        Ok(Self {
            cam: self.cam.cropped(top, left, height, width)?,
            frames: self.frames.iter().map(c).collect::<Result<_>>()?,
            depths: match &self.depths {
                Some(d) => Some(d.iter().map(c).collect::<Result<_>>()?),
                None => None,
            },
            poses: self.poses.clone(),
        })
    }

    /// Centre indices that have both neighbours.
    pub fn target_indices(&self) -> std::ops::Range<usize> {
        1..self.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_sequence, render, SceneSpec};

    #[test]
    fn synthetic_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default_scene(32, 16, 4, 2).unwrap();
        make_sequence(&spec, dir.path()).unwrap();
        let seq = Sequence::load(dir.path()).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.cam, spec.cam);
        for k in 0..4 {
            let (img, depth) = render(&spec, k).unwrap();
            assert_eq!(seq.frames[k], img);
            assert_eq!(seq.depths.as_ref().unwrap()[k], depth);
        }
        let poses = seq.poses.unwrap();
        for (a, b) in poses.iter().zip(&spec.trajectory) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn crop_shifts_principal_point() {
        let t = Tensor::from_fn(&[1, 4, 6], |k| k as f64);
        let c = center_crop(&t, 2, 2).unwrap();
        assert_eq!(c.data(), &[8.0, 9.0, 14.0, 15.0]);
        let cam = CameraModel::new(5.0, 5.0, 3.0, 2.0, 6, 4).unwrap();
        let cc = cam.cropped(1, 2, 2, 2).unwrap();
        assert_eq!((cc.cx, cc.cy), (1.0, 1.0));
        assert!(center_crop(&t, 5, 2).is_err());
    }
}
