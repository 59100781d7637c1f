use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MODEL_FILE_SCHEMA: &str = "oprisk.cli.model/1";
pub const RISK_FILE_SCHEMA: &str = "oprisk.cli.risk/1";
pub const ALLOCATION_FILE_SCHEMA: &str = "oprisk.cli.allocation/1";
pub const BOUNDS_FILE_SCHEMA: &str = "oprisk.cli.bounds/1";
pub const CURVE_FILE_SCHEMA: &str = "oprisk.cli.curve/1";
pub const QQ_FILE_SCHEMA: &str = "oprisk.cli.qq/1";
pub const STUDY_FILE_SCHEMA: &str = "oprisk.cli.study/1";
pub const TEST_FILE_SCHEMA: &str = "oprisk.cli.independence/1";

pub type Config = BTreeMap<String, String>;

/// One file to be written once the whole command has succeeded.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Numerical(format!("serialization: {e}")))
}

/// `{"schema", "config", <key>: payload}` as pretty JSON.
pub fn json_artifact<T: Serialize>(
    name: &str,
    schema: &str,
    config: &Config,
    key: &str,
    payload: &T,
) -> Result<Artifact, CliError> {
    json_fields(name, schema, config, vec![(key, to_value(payload)?)])
}

pub fn json_fields(name: &str, schema: &str, config: &Config, fields: Vec<(&str, Value)>) -> Result<Artifact, CliError> {
    let mut doc = json!({ "schema": schema, "config": config });
    for (k, v) in fields {
        doc[k] = v;
    }
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    Ok(Artifact { name: name.into(), bytes: text.into_bytes() })
}

/// CSV body preceded by `#` comment lines carrying schema and config.
pub fn csv_artifact(name: &str, schema: &str, config: &Config, body: &str) -> Artifact {
    let mut text = format!("# schema: {schema}\n");
    for (k, v) in config {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(body);
    Artifact { name: name.into(), bytes: text.into_bytes() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
    for a in artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
