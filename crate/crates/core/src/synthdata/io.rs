//! Dataset files: `{"schema_version": "1", "config": …, "scenes": […]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneConfig, SceneSample, SynthError};
use crate::jsonfmt;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: String,
    pub config: SceneConfig,
    pub scenes: Vec<SceneSample>,
}

impl Dataset {
    pub fn new(config: SceneConfig, scenes: Vec<SceneSample>) -> Self {
        Self { schema_version: SCHEMA_VERSION.to_string(), config, scenes }
    }
}

#[derive(Deserialize)]
struct RawDataset {
    schema_version: String,
    config: serde_json::Value,
    scenes: Vec<serde_json::Value>,
}

fn parse_error(bytes: &[u8], e: serde_json::Error) -> SynthError {
    SynthError::Parse { offset: jsonfmt::byte_offset(bytes, e.line(), e.column()), line: e.line(), column: e.column(), message: e.to_string() }
}

pub fn write_dataset(dataset: &Dataset) -> Result<Vec<u8>, SynthError> {
    jsonfmt::to_vec(dataset).map_err(|e| SynthError::Io(e.into()))
}

/// Parses dataset bytes, checking the schema version before any scene.
pub fn read_dataset(bytes: &[u8]) -> Result<Dataset, SynthError> {
    let raw: RawDataset = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, e))?;
    if raw.schema_version != SCHEMA_VERSION {
        return Err(SynthError::Version { found: raw.schema_version, expected: SCHEMA_VERSION.to_string() });
    }
    let config: SceneConfig =
        serde_json::from_value(raw.config).map_err(|e| SynthError::Record { index: usize::MAX, message: format!("config: {e}") })?;
    let scenes = raw
        .scenes
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            let s: SceneSample = serde_json::from_value(v).map_err(|e| SynthError::Record { index, message: e.to_string() })?;
            s.validate().map_err(|e| SynthError::Record { index, message: e.to_string() })?;
            Ok(s)
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(Dataset { schema_version: raw.schema_version, config, scenes })
}

pub fn serialize_dataset(dataset: &Dataset, path: &Path) -> Result<(), SynthError> {
    fs::write(path, write_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SynthError> {
    read_dataset(&fs::read(path)?)
}
