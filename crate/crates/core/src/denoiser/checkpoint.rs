use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamTree;

use super::config::{DiffusionConfig, ModelConfig};
use super::model::DenoiserParams;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "rhythm-ssm-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBody {
    format: String,
    model: ModelConfig,
    diffusion: DiffusionConfig,
    params: Vec<ParamEntry>,
    blob_len: usize,
    blob_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    content: ManifestBody,
    manifest_sha256: String,
}

/// Trained model: configuration plus parameters held at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    params: DenoiserParams,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    /// Rounds every parameter to `f32` so the in-memory model is exactly
    /// what a save/load cycle reproduces.
    pub fn new(model: ModelConfig, diffusion: DiffusionConfig, mut params: DenoiserParams) -> Self {
        params.visit_params_mut(&mut |_, m| m.mapv_inplace(|v| v as f32 as f64));
        Self { model, diffusion, params }
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn index(&self) -> Vec<ParamEntry> {
        let mut offset = 0;
        self.params
            .layout()
            .into_iter()
            .map(|(name, (r, c))| {
                let entry = ParamEntry { name, offset, shape: [r, c] };
                offset += r * c;
                entry
            })
            .collect()
    }

    fn blob(&self) -> Vec<u8> {
        self.params.flatten().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob = self.blob();
        let body = ManifestBody {
            format: FORMAT.to_string(),
            model: self.model.clone(),
            diffusion: self.diffusion.clone(),
            params: self.index(),
            blob_len: blob.len(),
            blob_sha256: sha_hex(&blob),
        };
        let manifest_sha256 = sha_hex(&serde_json::to_vec(&body).map_err(|e| format_err(e.to_string()))?);
        let manifest = Manifest { content: body, manifest_sha256 };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(e.to_string()))?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| format_err(format!("bad checkpoint manifest: {e}")))?;
        let body = manifest.content;
        let digest = sha_hex(&serde_json::to_vec(&body).map_err(|e| format_err(e.to_string()))?);
        if digest != manifest.manifest_sha256 {
            return Err(format_err("manifest hash mismatch"));
        }
        if body.format != FORMAT {
            return Err(format_err(format!("unsupported checkpoint format {}", body.format)));
        }
        body.model.validate()?;
        body.diffusion.validate()?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        if blob.len() != body.blob_len || sha_hex(&blob) != body.blob_sha256 {
            return Err(format_err("parameter blob does not match its manifest"));
        }

        let mut params = DenoiserParams::init(&body.model, body.diffusion.layers, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = Checkpoint { model: body.model.clone(), diffusion: body.diffusion.clone(), params: params.clone() }.index();
        if expected != body.params {
            return Err(format_err("parameter index does not match the configured architecture"));
        }
        if blob.len() != 4 * params.num_params() {
            return Err(format_err("blob length differs from the declared shapes"));
        }
        let flat: Vec<f64> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        params.assign_flat(&flat);
        Ok(Self { model: body.model, diffusion: body.diffusion, params })
    }
}

/// Writes a `step,loss` csv.
pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}
