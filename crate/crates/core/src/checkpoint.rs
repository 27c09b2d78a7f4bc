//! Checkpoint directories: `manifest.txt` plus one LKDT file per parameter.
//!
//! The manifest records the config hash, the full configuration, and every
//! parameter's name and shape in order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lkdt;
use crate::net::ParamStore;

pub const MANIFEST: &str = "manifest.txt";
const FORMAT_LINE: &str = "lkadepth-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Configuration entries exactly as stored.
    pub stored_config: Vec<(String, String)>,
    pub config_hash: String,
    pub step: usize,
    pub epoch: usize,
    pub depth: ParamStore,
    pub pose: ParamStore,
}

fn file_name(group: &str, name: &str) -> String {
    format!("{group}-{name}.lkdt")
}

pub fn save(
    dir: impl AsRef<Path>,
    config: &RunConfig,
    step: usize,
    epoch: usize,
    depth: &ParamStore,
    pose: &ParamStore,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    let _ = writeln!(m, "{FORMAT_LINE}");
    let _ = writeln!(m, "config_hash {}", config.hash());
    let _ = writeln!(m, "step {step}");
    let _ = writeln!(m, "epoch {epoch}");
    let _ = writeln!(m, "[config]");
    m.push_str(&config.to_text());
    let _ = writeln!(m, "[params]");
    for (group, store) in [("depth", depth), ("pose", pose)] {
        for (name, t) in store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(m, "{group} {name} {}", shape.join(","));
            lkdt::write_file(dir.join(file_name(group, name)), t)?;
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, m).map_err(|e| Error::io(&path, e))?;
    Ok(dir.to_path_buf())
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(bad("not a checkpoint manifest".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().unwrap_or_default();
        line.strip_prefix(key)
            .map(|v| v.trim().to_string())
            .ok_or_else(|| bad(format!("expected {key}, found {line:?}")))
    };
    let config_hash = field("config_hash")?;
    let step = field("step")?.parse().map_err(|e| bad(format!("step: {e}")))?;
    let epoch = field("epoch")?.parse().map_err(|e| bad(format!("epoch: {e}")))?;
    if !field("[config]")?.is_empty() {
        return Err(bad("expected [config] section".into()));
    }
    let mut config_text = String::new();
    let mut stored_config = Vec::new();
    let mut depth = ParamStore::new();
    let mut pose = ParamStore::new();
    let mut in_params = false;
    for line in lines {
        if line == "[params]" {
            in_params = true;
            continue;
        }
        if !in_params {
            if let Some((k, v)) = line.split_once('=') {
                stored_config.push((k.trim().to_string(), v.trim().to_string()));
            }
            config_text.push_str(line);
            config_text.push('\n');
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [group, name, shape] = parts[..] else {
            return Err(bad(format!("bad parameter line {line:?}")));
        };
        let t = lkdt::read_file(dir.join(file_name(group, name)))?;
        let expect: Vec<usize> = shape
            .split(',')
            .map(|s| s.parse().map_err(|e| bad(format!("shape {shape:?}: {e}"))))
            .collect::<Result<_>>()?;
        if t.shape() != expect.as_slice() {
            return Err(bad(format!("{group} {name}: file shape {:?}, manifest {expect:?}", t.shape())));
        }
        match group {
            "depth" => depth.insert(name, t),
            "pose" => pose.insert(name, t),
            _ => return Err(bad(format!("unknown parameter group {group:?}"))),
        }
    }
    let config = RunConfig::from_text(&config_text)?;
    if config.hash() != config_hash {
        return Err(bad("config hash does not match stored configuration".into()));
    }
    Ok(Checkpoint {
        config,
        stored_config,
        config_hash,
        step,
        epoch,
        depth,
        pose,
    })
}

impl Checkpoint {
    /// Errors with every differing architecture field if `requested` cannot use these weights.
    pub fn check_compatible(&self, requested: &RunConfig) -> Result<()> {
        let diffs = RunConfig::architecture_mismatches(&self.stored_config, requested);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diffs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::uniform;
    use crate::tensor::Tensor;

    fn stores() -> (ParamStore, ParamStore) {
        let mut d = ParamStore::new();
        d.insert("enc1.conv1.weight", uniform(&[2, 3, 3, 3], -1.0, 1.0, 1));
        d.insert("enc1.conv1.bias", uniform(&[2], -1.0, 1.0, 2));
        let mut p = ParamStore::new();
        p.insert("pose.out.bias", Tensor::zeros(&[6]));
        (d, p)
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (d, p) = stores();
        let cfg = RunConfig::default();
        save(dir.path().join("a"), &cfg, 10, 1, &d, &p).unwrap();
        save(dir.path().join("b"), &cfg, 10, 1, &d, &p).unwrap();
        let ck = load(dir.path().join("a")).unwrap();
        assert_eq!((ck.depth, ck.pose, ck.config, ck.step, ck.epoch), (d, p, cfg, 10, 1));
        for f in fs::read_dir(dir.path().join("a")).unwrap() {
            let f = f.unwrap();
            let other = dir.path().join("b").join(f.file_name());
            assert_eq!(fs::read(f.path()).unwrap(), fs::read(other).unwrap());
        }
    }

    #[test]
    fn mismatch_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        let (d, p) = stores();
        save(dir.path(), &RunConfig::default(), 0, 0, &d, &p).unwrap();
        let ck = load(dir.path()).unwrap();
        let mut req = RunConfig::default();
        req.use_lka = false;
        req.decoder_channels = [4, 4, 4, 4];
        match ck.check_compatible(&req) {
            Err(Error::ConfigMismatch(f)) => {
                let names: Vec<&str> = f.iter().map(|m| m.field.as_str()).collect();
                assert_eq!(names, ["use_lka", "decoder_channels"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(ck.check_compatible(&RunConfig::default()).is_ok());
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (d, p) = stores();
        save(dir.path(), &RunConfig::default(), 0, 0, &d, &p).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap().replace("batch = 2", "batch = 3");
        fs::write(&m, text).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
