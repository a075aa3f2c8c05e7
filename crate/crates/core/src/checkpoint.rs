//! Parameter checkpoints: safetensors files with a plain-text manifest sidecar
//! (`<name>.manifest.txt`, one `name<TAB>dtype<TAB>shape` line per parameter).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::VarMap;

use crate::error::{Error, Result};

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.txt");
    checkpoint.with_file_name(name)
}

/// `name → (dtype, shape)` of every parameter whose name starts with `prefix`.
pub fn manifest_of(varmap: &VarMap, prefix: &str) -> BTreeMap<String, (String, Vec<usize>)> {
    let data = varmap.data().lock().expect("varmap lock");
    data.iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, var)| {
            (
                name.clone(),
                (format!("{:?}", var.dtype()).to_lowercase(), var.dims().to_vec()),
            )
        })
        .collect()
}

fn render_manifest(manifest: &BTreeMap<String, (String, Vec<usize>)>) -> String {
    let mut out = String::new();
    for (name, (dtype, shape)) in manifest {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{name}\t{dtype}\t{}", dims.join("x"));
    }
    out
}

fn parse_manifest(text: &str) -> BTreeMap<String, (String, Vec<usize>)> {
    text.lines()
        .filter_map(|line| {
            let mut parts = line.split('\t');
            let name = parts.next()?.to_string();
            let dtype = parts.next()?.to_string();
            let shape = parts
                .next()?
                .split('x')
                .filter(|s| !s.is_empty())
                .map(|d| d.parse().ok())
                .collect::<Option<Vec<usize>>>()?;
            Some((name, (dtype, shape)))
        })
        .collect()
}

/// Human-readable difference between an expected and an actual manifest; empty
/// when they agree.
pub fn manifest_diff(
    expected: &BTreeMap<String, (String, Vec<usize>)>,
    actual: &BTreeMap<String, (String, Vec<usize>)>,
) -> Vec<String> {
    let mut diff = Vec::new();
    for (name, spec) in expected {
        match actual.get(name) {
            None => diff.push(format!("- {name} {:?} (missing)", spec.1)),
            Some(got) if got.1 != spec.1 => {
                diff.push(format!("~ {name} expected {:?}, found {:?}", spec.1, got.1))
            }
            _ => {}
        }
    }
    for (name, spec) in actual {
        if !expected.contains_key(name) {
            diff.push(format!("+ {name} {:?} (unexpected)", spec.1));
        }
    }
    diff
}

/// Writes the parameters under `prefix` to `path` plus the manifest sidecar.
pub fn save(varmap: &VarMap, prefix: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tensors: BTreeMap<String, Tensor> = {
        let data = varmap.data().lock().expect("varmap lock");
        data.iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
            .collect()
    };
    candle_core::safetensors::save(&tensors.into_iter().collect(), path)?;
    let manifest = render_manifest(&manifest_of(varmap, prefix));
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Loads every parameter under `prefix` from `path` into `varmap`. The file must
/// hold exactly those parameters with matching shapes; otherwise the error lists
/// the manifest difference.
pub fn load(varmap: &VarMap, prefix: &str, path: &Path) -> Result<()> {
    let expected = manifest_of(varmap, prefix);
    let tensors = match candle_core::safetensors::load(path, &Device::Cpu) {
        Ok(t) => t,
        Err(e) => {
            let sidecar = std::fs::read_to_string(manifest_path(path))
                .map(|t| parse_manifest(&t))
                .unwrap_or_default();
            let diff = manifest_diff(&expected, &sidecar);
            let detail = if diff.is_empty() {
                "manifest matches the model; the tensor file itself is damaged".to_string()
            } else {
                diff.join("\n")
            };
            return Err(Error::Checkpoint(format!(
                "cannot read {}: {e}\n{detail}",
                path.display()
            )));
        }
    };
    let actual: BTreeMap<String, (String, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                (format!("{:?}", t.dtype()).to_lowercase(), t.dims().to_vec()),
            )
        })
        .collect();
    let diff = manifest_diff(&expected, &actual);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} does not match the model:\n{}",
            path.display(),
            diff.join("\n")
        )));
    }
    let data = varmap.data().lock().expect("varmap lock");
    for (name, t) in tensors {
        data[&name].set(&t.to_dtype(data[&name].dtype())?)?;
    }
    Ok(())
}
