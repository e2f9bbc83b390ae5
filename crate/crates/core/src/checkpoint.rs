//! Checkpoint container: magic `QCKP`, u32 format version, u64 manifest
//! length, JSON manifest, then every layer's weight and bias as
//! little-endian f32 in manifest order. All integers little-endian.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_specs, LayerKind, QuantLayer, QuantUNet, UNetConfig};
use crate::quant::{ActQuantState, QuantParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
    pub quant: QuantParams,
    pub act: Option<ActQuantState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: UNetConfig,
    pub input_act: ActQuantState,
    pub layers: Vec<CheckpointLayer>,
}

fn ckpt_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        message: message.into(),
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no file name")))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint(model: &QuantUNet) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        input_act: model.input_act,
        layers: model
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                name: l.name.clone(),
                kind: l.kind,
                weight_shape: l.weight.shape().to_vec(),
                bias_len: l.bias.len(),
                quant: l.quant,
                act: l.act,
            })
            .collect(),
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| ckpt_err("manifest", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for l in &model.layers {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &QuantUNet, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, field: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(ckpt_err(
            field,
            format!("truncated: need {n} bytes, {} left", bytes.len()),
        ));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<QuantUNet> {
    let cur = &mut bytes;
    if take(cur, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ckpt_err("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(cur, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            "version",
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let len = u64::from_le_bytes(take(cur, 8, "manifest_len")?.try_into().expect("8 bytes"));
    let json = take(cur, len as usize, "manifest")?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| ckpt_err("manifest", e.to_string()))?;
    if manifest.version != version {
        return Err(ckpt_err("version", "manifest version differs from header"));
    }
    manifest.config.validate()?;
    check_layer_table(&manifest.config, &manifest.layers)?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, l) in manifest.layers.into_iter().enumerate() {
        let mut read = |n: usize, what: &str| -> Result<Vec<f32>> {
            let field = format!("layers[{i}].{what}");
            let raw = take(cur, 4 * n, &field)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let weight = Tensor::new(
            l.weight_shape.clone(),
            read(l.weight_shape.iter().product(), "weight")?,
        )?;
        let bias = Tensor::new([l.bias_len], read(l.bias_len, "bias")?)?;
        layers.push(QuantLayer {
            name: l.name,
            kind: l.kind,
            weight,
            bias,
            quant: l.quant,
            act: l.act,
        });
    }
    if !cur.is_empty() {
        return Err(ckpt_err("blob", format!("{} trailing bytes", cur.len())));
    }
    Ok(QuantUNet {
        config: manifest.config,
        input_act: manifest.input_act,
        layers,
    })
}

fn check_layer_table(config: &UNetConfig, layers: &[CheckpointLayer]) -> Result<()> {
    let specs = layer_specs(config);
    if specs.len() != layers.len() {
        return Err(ckpt_err(
            "layers",
            format!("expected {} layers, found {}", specs.len(), layers.len()),
        ));
    }
    for (i, ((name, kind, shape), l)) in specs.iter().zip(layers).enumerate() {
        if &l.name != name || l.kind != *kind {
            return Err(ckpt_err(
                format!("layers[{i}].name"),
                format!("expected {name}, found {}", l.name),
            ));
        }
        if l.weight_shape != shape {
            return Err(ckpt_err(
                format!("layers[{i}].weight_shape"),
                format!("expected {shape:?}, found {:?}", l.weight_shape),
            ));
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<QuantUNet> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint that must match the architecture described by
/// `config` (layer names and weight shapes).
pub fn load_checkpoint_for(config: &UNetConfig, path: &Path) -> Result<QuantUNet> {
    let model = load_checkpoint(path)?;
    let specs = layer_specs(config);
    if specs.len() != model.layers.len() {
        return Err(ckpt_err(
            "layers",
            format!(
                "expected {} layers, found {}",
                specs.len(),
                model.layers.len()
            ),
        ));
    }
    for (i, ((_, _, shape), l)) in specs.iter().zip(&model.layers).enumerate() {
        if l.weight.shape() != shape {
            return Err(ckpt_err(
                format!("layers[{i}].weight_shape"),
                format!(
                    "{}: expected {shape:?}, found {:?}",
                    l.name,
                    l.weight.shape()
                ),
            ));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> QuantUNet {
        let mut m = QuantUNet::build(UNetConfig::with_base(2), 4).unwrap();
        m.layers[3].quant.b_param = 5.123456789012345;
        m.layers[5].act.as_mut().unwrap().observe(0.1 + 0.2);
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_names_field() {
        let bytes = encode_checkpoint(&model()).unwrap();
        for cut in [2, 10, bytes.len() - 3] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint { field, .. }) => assert!(!field.is_empty()),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &QuantUNet::build(UNetConfig::with_base(8), 0).unwrap(),
            &path,
        )
        .unwrap();
        match load_checkpoint_for(&UNetConfig::full(), &path) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "layers[0].weight_shape"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Checkpoint { field, .. }) if field == "version"
        ));
    }
}
