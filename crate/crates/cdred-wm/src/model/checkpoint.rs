//! Checkpoint files: a JSON header followed by raw little-endian f64 blocks.
//!
//! Layout: the magic `CWM1`, a little-endian u32 header length, the header
//! JSON, then every parameter block in the order the header's shape table
//! declares. Weights are stored row-major, biases as a single column. The
//! header carries the model configuration and the reward normalizer state,
//! so a load rebuilds the exact actor that was saved; saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, RunningRms, WorldModel};
use crate::bc::{BcConfig, BcPolicy};
use crate::nn::MlpParams;

const MAGIC: &[u8; 4] = b"CWM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_kind: String,
    config: serde_json::Value,
    bonus_scale: Option<RunningRms>,
    shapes: Vec<BlockShape>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn world_net_names(model: &WorldModel) -> Vec<String> {
    let mut names = vec!["encoder".to_string(), "dynamics".to_string()];
    names.extend((0..model.critics.len()).map(|i| format!("critic{i}")));
    names.extend((0..model.critic_targets.len()).map(|i| format!("critic_target{i}")));
    names.push("policy".to_string());
    names.push("expert_pred".to_string());
    names.push("behavior_pred".to_string());
    names.extend((0..model.embed_targets.len()).map(|k| format!("embed_target{k}")));
    names
}

fn world_nets<'m>(model: &'m WorldModel) -> Vec<&'m MlpParams> {
    let mut nets = vec![&model.encoder, &model.dynamics];
    nets.extend(model.critics.iter());
    nets.extend(model.critic_targets.iter());
    nets.push(&model.policy);
    nets.push(&model.expert_pred);
    nets.push(&model.behavior_pred);
    nets.extend(model.embed_targets.iter());
    nets
}

fn world_nets_mut(model: &mut WorldModel) -> Vec<&mut MlpParams> {
    let mut nets: Vec<&mut MlpParams> = vec![&mut model.encoder, &mut model.dynamics];
    nets.extend(model.critics.iter_mut());
    nets.extend(model.critic_targets.iter_mut());
    nets.push(&mut model.policy);
    nets.push(&mut model.expert_pred);
    nets.push(&mut model.behavior_pred);
    nets.extend(model.embed_targets.iter_mut());
    nets
}

fn append_net(shapes: &mut Vec<BlockShape>, payload: &mut Vec<u8>, name: &str, net: &MlpParams) {
    for (l, layer) in net.layers.iter().enumerate() {
        shapes.push(BlockShape {
            name: format!("{name}.{l}.weight"),
            rows: layer.weight.rows(),
            cols: layer.weight.cols(),
        });
        for v in layer.weight.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        shapes.push(BlockShape {
            name: format!("{name}.{l}.bias"),
            rows: layer.bias.len(),
            cols: 1,
        });
        for v in &layer.bias {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn write_file(path: &Path, header: &Header, payload: &[u8]) -> Result<(), CheckpointError> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| format_err(path, format!("header serialization: {e}")))?;
    let mut bytes = Vec::with_capacity(8 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body_start = 8 + header_len;
    if bytes.len() < body_start {
        return Err(format_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("format version {} unsupported", header.format_version),
        ));
    }
    Ok((header, body_start))
}

struct BlockReader<'a> {
    path: &'a Path,
    shapes: &'a [BlockShape],
    payload: &'a [u8],
    next: usize,
    offset: usize,
}

impl<'a> BlockReader<'a> {
    fn fill_net(&mut self, name: &str, net: &mut MlpParams) -> Result<(), CheckpointError> {
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            self.fill_block(&format!("{name}.{l}.weight"), rows, cols, layer.weight.data_mut())?;
            let b = layer.bias.len();
            self.fill_block(&format!("{name}.{l}.bias"), b, 1, &mut layer.bias)?;
        }
        Ok(())
    }

    fn fill_block(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        out: &mut [f64],
    ) -> Result<(), CheckpointError> {
        let shape = self.shapes.get(self.next).ok_or_else(|| {
            format_err(self.path, format!("missing block {name} in shape table"))
        })?;
        if shape.name != name || shape.rows != rows || shape.cols != cols {
            return Err(format_err(
                self.path,
                format!(
                    "block mismatch: expected {name} [{rows}x{cols}], found {} [{}x{}]",
                    shape.name, shape.rows, shape.cols
                ),
            ));
        }
        let bytes_needed = rows * cols * 8;
        let end = self.offset + bytes_needed;
        if end > self.payload.len() {
            return Err(format_err(self.path, format!("payload truncated in block {name}")));
        }
        for (i, slot) in out.iter_mut().enumerate() {
            let at = self.offset + i * 8;
            *slot = f64::from_le_bytes(self.payload[at..at + 8].try_into().expect("8 bytes"));
        }
        self.offset = end;
        self.next += 1;
        Ok(())
    }

    fn finish(self) -> Result<(), CheckpointError> {
        if self.next != self.shapes.len() {
            return Err(format_err(self.path, "shape table has unread blocks"));
        }
        if self.offset != self.payload.len() {
            return Err(format_err(self.path, "trailing bytes after final block"));
        }
        Ok(())
    }
}

pub fn save_world_model(path: &Path, model: &WorldModel) -> Result<(), CheckpointError> {
    let mut shapes = Vec::new();
    let mut payload = Vec::new();
    for (name, net) in world_net_names(model).iter().zip(world_nets(model)) {
        append_net(&mut shapes, &mut payload, name, net);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_kind: "world_model".to_string(),
        config: serde_json::to_value(model.cfg)
            .map_err(|e| format_err(path, format!("config serialization: {e}")))?,
        bonus_scale: Some(model.bonus_scale),
        shapes,
    };
    write_file(path, &header, &payload)
}

pub fn load_world_model(path: &Path) -> Result<WorldModel, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, body_start) = read_header(path, &bytes)?;
    if header.model_kind != "world_model" {
        return Err(format_err(
            path,
            format!("expected a world_model checkpoint, found {}", header.model_kind),
        ));
    }
    let cfg: ModelConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| format_err(path, format!("bad config: {e}")))?;
    let mut model = WorldModel::init(cfg, 0);
    model.bonus_scale = header
        .bonus_scale
        .ok_or_else(|| format_err(path, "missing bonus_scale"))?;
    let mut reader = BlockReader {
        path,
        shapes: &header.shapes,
        payload: &bytes[body_start..],
        next: 0,
        offset: 0,
    };
    let names = world_net_names(&model);
    for (name, net) in names.iter().zip(world_nets_mut(&mut model)) {
        reader.fill_net(name, net)?;
    }
    reader.finish()?;
    Ok(model)
}

pub fn save_policy(path: &Path, policy: &BcPolicy) -> Result<(), CheckpointError> {
    let mut shapes = Vec::new();
    let mut payload = Vec::new();
    append_net(&mut shapes, &mut payload, "encoder", &policy.encoder);
    append_net(&mut shapes, &mut payload, "policy", &policy.policy);
    let header = Header {
        format_version: FORMAT_VERSION,
        model_kind: "bc".to_string(),
        config: serde_json::to_value(policy.cfg)
            .map_err(|e| format_err(path, format!("config serialization: {e}")))?,
        bonus_scale: None,
        shapes,
    };
    write_file(path, &header, &payload)
}

pub fn load_policy(path: &Path) -> Result<BcPolicy, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, body_start) = read_header(path, &bytes)?;
    if header.model_kind != "bc" {
        return Err(format_err(
            path,
            format!("expected a bc checkpoint, found {}", header.model_kind),
        ));
    }
    let cfg: BcConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| format_err(path, format!("bad config: {e}")))?;
    let mut policy = BcPolicy::init(cfg, 0);
    let mut reader = BlockReader {
        path,
        shapes: &header.shapes,
        payload: &bytes[body_start..],
        next: 0,
        offset: 0,
    };
    reader.fill_net("encoder", &mut policy.encoder)?;
    reader.fill_net("policy", &mut policy.policy)?;
    reader.finish()?;
    Ok(policy)
}

/// What a checkpoint contains, read from the header alone.
pub fn checkpoint_kind(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, _) = read_header(path, &bytes)?;
    Ok(header.model_kind)
}

/// Hex SHA-256 of the checkpoint file bytes.
pub fn checkpoint_hash(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;

    fn saved_model(dir: &Path) -> (WorldModel, PathBuf) {
        let mut model = WorldModel::init(ModelConfig::for_task(Task::Insert), 77);
        model.bonus_scale.update(0.123456789);
        let path = dir.join("model.ckpt");
        save_world_model(&path, &model).unwrap();
        (model, path)
    }

    #[test]
    fn world_model_roundtrips_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (model, path) = saved_model(dir.path());
        let loaded = load_world_model(&path).unwrap();
        assert_eq!(loaded.encoder, model.encoder);
        assert_eq!(loaded.dynamics, model.dynamics);
        assert_eq!(loaded.critics, model.critics);
        assert_eq!(loaded.critic_targets, model.critic_targets);
        assert_eq!(loaded.policy, model.policy);
        assert_eq!(loaded.expert_pred, model.expert_pred);
        assert_eq!(loaded.behavior_pred, model.behavior_pred);
        assert_eq!(loaded.embed_targets, model.embed_targets);
        assert_eq!(loaded.bonus_scale.mean_sq.to_bits(), model.bonus_scale.mean_sq.to_bits());

        let path2 = dir.path().join("model2.ckpt");
        save_world_model(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, path) = saved_model(dir.path());
        let h1 = checkpoint_hash(&path).unwrap();
        assert_eq!(h1.len(), 64);
        assert_eq!(h1, checkpoint_hash(&path).unwrap());
        model.policy.layers[0].weight.data_mut()[0] += 1e-9;
        let path2 = dir.path().join("perturbed.ckpt");
        save_world_model(&path2, &model).unwrap();
        assert_ne!(h1, checkpoint_hash(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let (_, path) = saved_model(dir.path());
        let mut bytes = fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ckpt");
        fs::write(&truncated, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_world_model(&truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        bytes[0] = b'X';
        let magic = dir.path().join("magic.ckpt");
        fs::write(&magic, &bytes).unwrap();
        let err = load_world_model(&magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn kind_probe_reads_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let (_, path) = saved_model(dir.path());
        assert_eq!(checkpoint_kind(&path).unwrap(), "world_model");
    }
}
