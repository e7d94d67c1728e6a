//! Checkpoint directories.
//!
//! A checkpoint is a directory holding a key-value manifest (model
//! dimensions, token plan, init seed, storage precision) plus two
//! tensor blobs: backbone parameters and projection-head parameters.
//! Loading rebuilds the exact model; forward outputs round-trip
//! bit-exactly because fp32 storage is paired with fp32-constrained
//! parameters during training.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ProjectionSet;
use crate::kv::KvFile;
use crate::linalg::Matrix;
use crate::model::{
    build_reference_model, Backbone, BackboneSpec, ModalityFusion, ParamStore, TinyDecoder,
    TrainableScope,
};
use crate::tensorio::{read_tensors, write_tensors, StorageDtype};

/// Parameter storage precision. Compute is always f64; `Fp32` rounds
/// parameters through f32 after every update so that saved blobs
/// reload bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp64,
    Fp32,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp64 => "fp64",
            Precision::Fp32 => "fp32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp64" => Ok(Precision::Fp64),
            "fp32" => Ok(Precision::Fp32),
            other => Err(Error::config(format!("unknown precision '{other}'"))),
        }
    }

    pub fn dtype(self) -> StorageDtype {
        match self {
            Precision::Fp64 => StorageDtype::F64,
            Precision::Fp32 => StorageDtype::F32,
        }
    }

    /// Round every parameter to the storage precision.
    pub fn constrain(self, params: &mut ParamStore) {
        if self == Precision::Fp32 {
            for (_, m) in params.iter_mut() {
                for v in m.as_mut_slice() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TinyDecoder,
    pub projections: ProjectionSet,
    pub precision: Precision,
}

fn store_entries(store: &ParamStore) -> Vec<(String, &Matrix)> {
    store.iter().map(|(n, m)| (n.to_string(), m)).collect()
}

/// Copy saved tensors into a skeleton store, enforcing identical
/// names, order, and shapes.
fn merge_into(
    skeleton: &mut ParamStore,
    saved: Vec<(String, Matrix)>,
    what: &str,
) -> Result<()> {
    if saved.len() != skeleton.len() {
        return Err(Error::data(format!(
            "{what}: expected {} tensors, file holds {}",
            skeleton.len(),
            saved.len()
        )));
    }
    for ((name, value), (expect_name, slot)) in saved.into_iter().zip(skeleton.iter_mut()) {
        if name != expect_name {
            return Err(Error::data(format!(
                "{what}: tensor '{name}' where '{expect_name}' was expected"
            )));
        }
        if value.shape() != slot.shape() {
            return Err(Error::data(format!(
                "{what}: tensor '{name}' is {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    Ok(())
}

pub fn save_checkpoint(
    dir: &Path,
    model: &TinyDecoder,
    projections: &ProjectionSet,
    precision: Precision,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = model.spec();
    let plan = model.plan();

    let mut kv = KvFile::new();
    kv.set("schema", 1);
    kv.set("kind", "checkpoint");
    kv.set("precision", precision.as_str());
    kv.set("seed", model.seed());
    kv.set("spec.vocab_size", spec.vocab_size);
    kv.set("spec.hidden_dim", spec.hidden_dim);
    kv.set("spec.num_layers", spec.num_layers);
    kv.set("spec.max_seq_len", spec.max_seq_len);
    kv.set("spec.patch_dim", spec.patch_dim);
    kv.set("spec.modality_fusion", spec.modality_fusion.as_str());
    kv.set("spec.trainable_scope", spec.trainable_scope.as_str());
    kv.set("plan.image_tokens", plan.image_tokens.len());
    kv.set("plan.text_tokens", plan.text_tokens.len());

    let img_head = projections.head(crate::features::HEAD_IMG)?;
    kv.set("proj.in_dim", img_head.in_dim);
    kv.set("proj.out_dim", img_head.out_dim);
    kv.set("proj.depth", img_head.depth);
    kv.set("proj.normalize", projections.normalize);
    kv.set(
        "proj.separate_local_heads",
        projections.has_head(crate::features::HEAD_IMG_LOCAL),
    );
    kv.set("fingerprint", model.fingerprint());
    kv.save(&dir.join("manifest.txt"))?;

    write_tensors(
        &dir.join("backbone.bin"),
        &store_entries(&model.params),
        precision.dtype(),
    )?;
    write_tensors(
        &dir.join("projections.bin"),
        &store_entries(&projections.params),
        precision.dtype(),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let kv = KvFile::load(&dir.join("manifest.txt"))?;
    if kv.require("kind")? != "checkpoint" {
        return Err(Error::data(format!(
            "{} is not a checkpoint manifest",
            dir.display()
        )));
    }
    let precision = Precision::parse(kv.require("precision")?)?;
    let seed = kv.require_u64("seed")?;
    let spec = BackboneSpec {
        vocab_size: kv.require_usize("spec.vocab_size")?,
        hidden_dim: kv.require_usize("spec.hidden_dim")?,
        num_layers: kv.require_usize("spec.num_layers")?,
        max_seq_len: kv.require_usize("spec.max_seq_len")?,
        patch_dim: kv.require_usize("spec.patch_dim")?,
        modality_fusion: ModalityFusion::parse(kv.require("spec.modality_fusion")?)?,
        trainable_scope: TrainableScope::parse(kv.require("spec.trainable_scope")?)?,
    };
    let image_tokens = kv.require_usize("plan.image_tokens")?;
    let text_tokens = kv.require_usize("plan.text_tokens")?;

    // skeletons fix the canonical parameter names and shapes; saved
    // values then replace the placeholder init
    let mut model = build_reference_model(&spec, image_tokens, text_tokens, seed)?;
    let (_, backbone_saved) = read_tensors(&dir.join("backbone.bin"))?;
    merge_into(&mut model.params, backbone_saved, "backbone.bin")?;

    let mut projections = ProjectionSet::new(
        kv.require_usize("proj.in_dim")?,
        kv.require_usize("proj.out_dim")?,
        kv.require_usize("proj.depth")?,
        kv.require_bool("proj.normalize")?,
        kv.require_bool("proj.separate_local_heads")?,
        0,
    )?;
    let (_, proj_saved) = read_tensors(&dir.join("projections.bin"))?;
    merge_into(&mut projections.params, proj_saved, "projections.bin")?;

    Ok(Checkpoint {
        model,
        projections,
        precision,
    })
}
