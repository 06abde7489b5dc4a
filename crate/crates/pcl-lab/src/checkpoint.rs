//! Model checkpoints: a versioned JSON document holding shapes, row-major
//! parameter arrays, the RNG state and a config echo. A load reproduces
//! forward outputs bit-exactly (f64 values survive the JSON round trip via
//! shortest-round-trip formatting).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pcl_core::model::{LinearLayer, ModelConfig};
use pcl_core::{Model, Tensor, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorRepr {
    fn of(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    fn build(self, what: &str) -> Result<Tensor> {
        Tensor::new(self.shape, self.data)
            .map_err(|e| CheckpointError::Shape(format!("{what}: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: TensorRepr,
    bias: TensorRepr,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    config: TrainConfig,
    model_config: ModelConfig,
    encoder: Vec<LayerRepr>,
    classifier: TensorRepr,
    rng: ChaCha8Rng,
}

pub fn checkpoint_save(
    path: &Path,
    model: &Model,
    rng: &ChaCha8Rng,
    config: &TrainConfig,
) -> Result<()> {
    let file = CheckpointFile {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        model_config: model.config,
        encoder: model
            .encoder
            .iter()
            .map(|l| LayerRepr { weight: TensorRepr::of(&l.weight), bias: TensorRepr::of(&l.bias) })
            .collect(),
        classifier: TensorRepr::of(&model.classifier),
        rng: rng.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<(Model, ChaCha8Rng, TrainConfig)> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::SchemaVersion {
            found: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }

    let encoder: Vec<LinearLayer<f64>> = file
        .encoder
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LinearLayer {
                weight: l.weight.build(&format!("encoder layer {i} weight"))?,
                bias: l.bias.build(&format!("encoder layer {i} bias"))?,
            })
        })
        .collect::<Result<_>>()?;
    let classifier = file.classifier.build("classifier")?;

    let cfg = file.model_config;
    let expected_widths = [
        (cfg.input_dim, cfg.hidden_dim),
        (cfg.hidden_dim, cfg.hidden_dim),
        (cfg.hidden_dim, cfg.feature_dim),
    ];
    if encoder.len() != expected_widths.len() {
        return Err(CheckpointError::Shape(format!(
            "{} encoder layers, expected {}",
            encoder.len(),
            expected_widths.len()
        )));
    }
    for (i, (layer, (in_dim, out_dim))) in encoder.iter().zip(expected_widths).enumerate() {
        if layer.weight.shape() != [out_dim, in_dim] || layer.bias.shape() != [out_dim] {
            return Err(CheckpointError::Shape(format!(
                "encoder layer {i} has weight {:?} / bias {:?}, expected [{out_dim} x {in_dim}]",
                layer.weight.shape(),
                layer.bias.shape()
            )));
        }
    }
    if classifier.shape() != [cfg.num_classes, cfg.feature_dim] {
        return Err(CheckpointError::Shape(format!(
            "classifier {:?}, expected [{} x {}]",
            classifier.shape(),
            cfg.num_classes,
            cfg.feature_dim
        )));
    }

    Ok((Model { config: cfg, encoder, classifier }, file.rng, file.config))
}
