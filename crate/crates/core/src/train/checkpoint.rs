//! Directory checkpoints: `manifest.json` plus a flat little-endian f32
//! blob, with a CRC32 per tensor. Optimizer moments live under `optim/` in
//! the same layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, ModelBundle, OptimState};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: [usize; 2],
    /// Offset in elements into the blob.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format_version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes tensors to `dir`; the manifest is written last so a directory
/// without one is never mistaken for a complete checkpoint.
pub fn write_tensor_dir(dir: &Path, tensors: &[(String, &Mat<f32>)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let bytes = le_bytes(&t.data);
        entries.push(TensorEntry {
            name: name.clone(),
            group: name.split('.').next().unwrap_or_default().to_string(),
            shape: [t.rows, t.cols],
            offset,
            crc32: crc32fast::hash(&bytes),
        });
        offset += t.data.len();
        blob.extend_from_slice(&bytes);
    }
    let _ = fs::remove_file(dir.join(MANIFEST));
    fs::File::create(dir.join(BLOB))?.write_all(&blob)?;
    let manifest = TensorManifest {
        format_version: FORMAT_VERSION,
        meta,
        tensors: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads and verifies every tensor before returning any of them.
pub fn read_tensor_dir(dir: &Path) -> Result<(serde_json::Value, Vec<(String, Mat<f32>)>)> {
    let manifest: TensorManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = fs::read(dir.join(BLOB))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} is not a multiple of 4", blob.len())));
    }
    let expected: usize = manifest.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if blob.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} values, manifest describes {expected}",
            blob.len() / 4
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let bytes = blob
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} extends past the blob", e.name)))?;
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checksum(e.name.clone()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)));
    }
    Ok((manifest.meta, out))
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    model_config: ModelConfig,
    stage_completed: u8,
    frozen: Vec<Group>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
}

/// Copies `src` tensors into `dst` by name; the name sets must match
/// exactly and shapes must agree. Nothing is written on failure.
fn assign_by_name(dst: &mut [(String, &mut Mat<f32>)], src: Vec<(String, Mat<f32>)>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", dst.len(), src.len())));
    }
    for ((dn, d), (sn, s)) in dst.iter().zip(&src) {
        if dn != sn || d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {sn} {:?} does not match expected {dn} {:?}",
                s.shape(),
                d.shape()
            )));
        }
    }
    for ((_, d), (_, s)) in dst.iter_mut().zip(src) {
        **d = s;
    }
    Ok(())
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, optim: Option<&OptimState<f32>>, dir: &Path) -> Result<()> {
    let meta = BundleMeta {
        model_config: bundle.config.clone(),
        stage_completed: bundle.stage_completed,
        frozen: Group::ALL.into_iter().filter(|&g| bundle.is_frozen(g)).collect(),
    };
    if let Some(o) = optim {
        let mut tensors = Vec::with_capacity(o.names.len() * 2);
        for (i, n) in o.names.iter().enumerate() {
            tensors.push((format!("{n}.m"), &o.m[i]));
        }
        for (i, n) in o.names.iter().enumerate() {
            tensors.push((format!("{n}.v"), &o.v[i]));
        }
        write_tensor_dir(&dir.join("optim"), &tensors, serde_json::to_value(OptimMeta { step: o.step })?)?;
    } else {
        let _ = fs::remove_dir_all(dir.join("optim"));
    }
    write_tensor_dir(dir, &bundle.tensors(), serde_json::to_value(meta)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle<f32>, Option<OptimState<f32>>)> {
    let (meta, tensors) = read_tensor_dir(dir)?;
    let meta: BundleMeta = serde_json::from_value(meta)?;
    let mut bundle = ModelBundle::<f32>::new(&meta.model_config, 0)?;
    assign_by_name(&mut bundle.tensors_mut(), tensors)?;
    bundle.stage_completed = meta.stage_completed;
    bundle.set_frozen(&meta.frozen);

    let optim_dir = dir.join("optim");
    let optim = if optim_dir.join(MANIFEST).exists() {
        let (ometa, tensors) = read_tensor_dir(&optim_dir)?;
        let ometa: OptimMeta = serde_json::from_value(ometa)?;
        if tensors.len() % 2 != 0 {
            return Err(Error::Checkpoint("optimizer state has an odd tensor count".into()));
        }
        let half = tensors.len() / 2;
        let mut names = Vec::with_capacity(half);
        let (mut m, mut v) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let (base, want) = if i < half { (name.strip_suffix(".m"), true) } else { (name.strip_suffix(".v"), false) };
            let base = base.ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer tensor {name}")))?;
            let params = bundle.tensors();
            let shape = params
                .iter()
                .find(|(n, _)| n == base)
                .map(|(_, p)| p.shape())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer tensor {name} has no parameter")))?;
            if shape != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer tensor {name} has the wrong shape")));
            }
            if want {
                names.push(base.to_string());
                m.push(t);
            } else {
                if names.get(i - half).map(String::as_str) != Some(base) {
                    return Err(Error::Checkpoint(format!("optimizer tensor {name} out of order")));
                }
                v.push(t);
            }
        }
        Some(OptimState {
            step: ometa.step,
            names,
            m,
            v,
        })
    } else {
        None
    };
    Ok((bundle, optim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle<f32> {
        ModelBundle::new(&ModelConfig::tiny(12), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bundle();
        b.stage_completed = 2;
        b.set_frozen(&[Group::Text]);
        let mut o = OptimState::new(&b.tensors());
        o.step = 7;
        o.m[0].data[0] = 0.25;
        save_checkpoint(&b, Some(&o), dir.path()).unwrap();
        let (b2, o2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(b, b2);
        assert_eq!(Some(o), o2);
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), None, dir.path()).unwrap();
        let path = dir.path().join(BLOB);
        let mut bytes = fs::read(&path).unwrap();
        bytes[41] ^= 0x10;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checksum(_))));
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), None, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn blob_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let t = Mat::from_vec(1, 2, vec![1.0f32, -2.5]);
        write_tensor_dir(dir.path(), &[("x.t".into(), &t)], serde_json::Value::Null).unwrap();
        let bytes = fs::read(dir.path().join(BLOB)).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
    }
}
