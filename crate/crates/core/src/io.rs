use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DvfError, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DvfError::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| DvfError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DvfError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DvfError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DvfError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| DvfError::Internal(format!("json serialization: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| DvfError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| DvfError::Data(format!("cannot parse {}: {e}", path.display())))
}
