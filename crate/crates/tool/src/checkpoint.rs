//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   architecture, step, tensor index, run info
//! <dir>/base.f32        base weights, little-endian f32, concatenated
//! <dir>/adapters.f32    adapter weights, present only if the model has any
//! ```
//!
//! Loading rebuilds the architecture from the manifest and then overwrites
//! every parameter by name, so a missing or extra tensor is an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sr_distill_core::nets::{
    lora_wrap, module_checksum, AeConfig, AutoEncoder, Module, ParamKind, Student, VelocityConfig,
    VelocityNet,
};
use sr_distill_core::rng::seeded;
use sr_distill_core::tensor::Tensor;

use crate::error::{Result, ToolError};
use crate::files::{create_dir, read_json, write_json};
use crate::manifest::RunInfo;

pub const MANIFEST: &str = "manifest.json";
const BASE_BLOB: &str = "base.f32";
const ADAPTER_BLOB: &str = "adapters.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Autoencoder,
    Teacher,
    Replica,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub factor: usize,
    pub t_cond: usize,
    pub encoder_rank: usize,
}

/// Everything needed to rebuild the module before loading weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<AeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<VelocityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobIndex {
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub arch: Architecture,
    pub step: usize,
    /// Content hash of all parameters (see `module_checksum`).
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_checksum: Option<String>,
    pub base: BlobIndex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapters: Option<BlobIndex>,
    /// Phase-specific results, e.g. training reports.
    #[serde(default)]
    pub notes: serde_json::Value,
    pub run: RunInfo,
}

fn write_blob(dir: &Path, file: &str, tensors: &[(String, Tensor<f32>)]) -> Result<BlobIndex> {
    let mut bytes = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        index.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| ToolError::io(&path, e))?;
    Ok(BlobIndex {
        file: file.into(),
        tensors: index,
    })
}

fn read_blob(dir: &Path, index: &BlobIndex, out: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let path = dir.join(&index.file);
    let bytes = fs::read(&path).map_err(|e| ToolError::io(&path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(ToolError::format(
            &path,
            "blob length is not a multiple of 4",
        ));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    for e in &index.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats.get(e.offset..e.offset + n).ok_or_else(|| {
            ToolError::format(
                &path,
                format!("tensor {} runs past the end of the blob", e.name),
            )
        })?;
        out.insert(e.name.clone(), Tensor::from_vec(&e.shape, data.to_vec())?);
    }
    Ok(())
}

/// Writes `module` into `dir` with base and adapter groups split.
#[allow(clippy::too_many_arguments)]
pub fn save<M: Module<f32>>(
    dir: &Path,
    module: &M,
    kind: CheckpointKind,
    arch: Architecture,
    step: usize,
    decoder_checksum: Option<String>,
    notes: serde_json::Value,
    run: RunInfo,
) -> Result<CheckpointManifest> {
    create_dir(dir)?;
    let (mut base, mut adapters) = (Vec::new(), Vec::new());
    module.visit(&mut |name, k, t| {
        let group = if k == ParamKind::Base {
            &mut base
        } else {
            &mut adapters
        };
        group.push((name.to_string(), t.clone()));
    });
    let manifest = CheckpointManifest {
        kind,
        arch,
        step,
        checksum: module_checksum(module),
        decoder_checksum,
        base: write_blob(dir, BASE_BLOB, &base)?,
        adapters: if adapters.is_empty() {
            None
        } else {
            Some(write_blob(dir, ADAPTER_BLOB, &adapters)?)
        },
        notes,
        run,
    };
    let stale = dir.join(ADAPTER_BLOB);
    if manifest.adapters.is_none() && stale.exists() {
        fs::remove_file(&stale).map_err(|e| ToolError::io(&stale, e))?;
    }
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(ToolError::MissingPrerequisite(format!(
            "no checkpoint at {}",
            dir.display()
        )));
    }
    read_json(&path)
}

fn expect_kind(dir: &Path, m: &CheckpointManifest, kind: CheckpointKind) -> Result<()> {
    if m.kind != kind {
        return Err(ToolError::MissingPrerequisite(format!(
            "{} holds a {:?} checkpoint, expected {:?}",
            dir.display(),
            m.kind,
            kind
        )));
    }
    Ok(())
}

fn arch_field<T: Clone>(dir: &Path, v: &Option<T>, what: &str) -> Result<T> {
    v.clone().ok_or_else(|| {
        ToolError::format(&dir.join(MANIFEST), format!("architecture lacks `{what}`"))
    })
}

/// Overwrites every parameter of `module` from the checkpoint blobs.
fn fill<M: Module<f32>>(dir: &Path, m: &CheckpointManifest, module: &mut M) -> Result<()> {
    let mut tensors = BTreeMap::new();
    read_blob(dir, &m.base, &mut tensors)?;
    if let Some(a) = &m.adapters {
        read_blob(dir, a, &mut tensors)?;
    }
    let mut problem = None;
    module.visit_mut(&mut |name, _, t| match tensors.remove(name) {
        Some(src) if src.shape() == t.shape() => *t = src,
        Some(src) => {
            problem.get_or_insert(format!(
                "tensor {name}: shape {:?} in file, {:?} in model",
                src.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("tensor {name} missing from checkpoint"));
        }
    });
    if let Some(extra) = tensors.keys().next() {
        problem.get_or_insert(format!(
            "checkpoint tensor {extra} has no place in the model"
        ));
    }
    match problem {
        Some(p) => Err(ToolError::format(&dir.join(MANIFEST), p)),
        None => Ok(()),
    }
}

fn build_ae(dir: &Path, m: &CheckpointManifest) -> Result<AutoEncoder<f32>> {
    let mut ae = AutoEncoder::new(
        arch_field(dir, &m.arch.autoencoder, "autoencoder")?,
        &mut seeded(0),
    );
    ae.latent_scale = arch_field(dir, &m.arch.latent_scale, "latent_scale")?;
    Ok(ae)
}

fn build_velocity(dir: &Path, m: &CheckpointManifest) -> Result<VelocityNet<f32>> {
    Ok(VelocityNet::new(
        arch_field(dir, &m.arch.velocity, "velocity")?,
        &mut seeded(0),
    ))
}

pub fn load_autoencoder(dir: &Path) -> Result<(AutoEncoder<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, CheckpointKind::Autoencoder)?;
    let mut ae = build_ae(dir, &m)?;
    fill(dir, &m, &mut ae)?;
    Ok((ae, m))
}

pub fn load_teacher(dir: &Path) -> Result<(VelocityNet<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, CheckpointKind::Teacher)?;
    let mut net = build_velocity(dir, &m)?;
    fill(dir, &m, &mut net)?;
    Ok((net, m))
}

pub fn load_replica(dir: &Path) -> Result<(VelocityNet<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, CheckpointKind::Replica)?;
    let base = build_velocity(dir, &m)?;
    let rank = arch_field(dir, &m.arch.lora_rank, "lora_rank")?;
    let scale = arch_field(dir, &m.arch.lora_scale, "lora_scale")?;
    let mut net = lora_wrap(&base, rank, scale, 0)?;
    fill(dir, &m, &mut net)?;
    Ok((net, m))
}

pub fn load_student(dir: &Path) -> Result<(Student<f32>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    expect_kind(dir, &m, CheckpointKind::Student)?;
    let spec = arch_field(dir, &m.arch.student, "student")?;
    let ae = build_ae(dir, &m)?;
    let vel = build_velocity(dir, &m)?;
    let mut s = Student::new(&ae, &vel, spec.factor, spec.t_cond, spec.encoder_rank, 0)?;
    fill(dir, &m, &mut s)?;
    Ok((s, m))
}

pub fn ae_arch(ae: &AutoEncoder<f32>) -> Architecture {
    Architecture {
        autoencoder: Some(ae.config.clone()),
        latent_scale: Some(ae.latent_scale),
        ..Default::default()
    }
}

pub fn velocity_arch(net: &VelocityNet<f32>) -> Architecture {
    Architecture {
        velocity: Some(net.config.clone()),
        ..Default::default()
    }
}

pub fn replica_arch(net: &VelocityNet<f32>, scale: f64) -> Architecture {
    Architecture {
        lora_rank: net.lora_rank(),
        lora_scale: Some(scale),
        ..velocity_arch(net)
    }
}

pub fn student_arch(s: &Student<f32>, encoder_rank: usize) -> Architecture {
    Architecture {
        velocity: Some(s.denoiser.config.clone()),
        student: Some(StudentSpec {
            factor: s.factor,
            t_cond: s.t_cond,
            encoder_rank,
        }),
        ..ae_arch(&s.ae)
    }
}
