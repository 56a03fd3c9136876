//! Versioned JSON persistence for trained forests.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Forest, ForestError};

pub const MODEL_FORMAT: &str = "memfigless-forest";
pub const MODEL_VERSION: u64 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format: &'a str,
    version: u64,
    forest: &'a Forest,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u64,
}

pub fn write_model<W: Write>(forest: &Forest, w: W) -> Result<(), ForestError> {
    let env = EnvelopeRef {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        forest,
    };
    serde_json::to_writer(w, &env).map_err(|e| ForestError::Io(e.to_string()))
}

pub fn read_model<R: Read>(mut r: R) -> Result<Forest, ForestError> {
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|e| ForestError::Io(e.to_string()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| ForestError::CorruptModel(e.to_string()))?;
    let header: Header = serde_json::from_value(value.clone())
        .map_err(|e| ForestError::CorruptModel(e.to_string()))?;
    if header.format != MODEL_FORMAT {
        return Err(ForestError::CorruptModel(format!(
            "unknown format {:?}",
            header.format
        )));
    }
    if header.version != MODEL_VERSION {
        return Err(ForestError::VersionMismatch {
            found: header.version,
            expected: MODEL_VERSION,
        });
    }
    let forest_value = value
        .get("forest")
        .cloned()
        .ok_or_else(|| ForestError::CorruptModel("missing forest".into()))?;
    let forest: Forest = serde_json::from_value(forest_value)
        .map_err(|e| ForestError::CorruptModel(e.to_string()))?;
    forest.validate()?;
    Ok(forest)
}

pub fn save_model(forest: &Forest, path: &Path) -> Result<(), ForestError> {
    let file =
        fs::File::create(path).map_err(|e| ForestError::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_model(forest, &mut w)?;
    w.flush().map_err(|e| ForestError::Io(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<Forest, ForestError> {
    let file =
        fs::File::open(path).map_err(|e| ForestError::Io(format!("{}: {e}", path.display())))?;
    read_model(std::io::BufReader::new(file))
}

impl Forest {
    fn validate(&self) -> Result<(), ForestError> {
        if self.trees.is_empty() {
            return Err(ForestError::CorruptModel("forest without trees".into()));
        }
        if self.feature_bounds.len() != self.n_features {
            return Err(ForestError::CorruptModel(
                "feature bounds do not match feature count".into(),
            ));
        }
        for t in &self.trees {
            if t.n_features() != self.n_features || t.n_outputs() != self.n_outputs {
                return Err(ForestError::CorruptModel(
                    "tree shape differs from forest".into(),
                ));
            }
            t.validate_structure()?;
        }
        Ok(())
    }
}
