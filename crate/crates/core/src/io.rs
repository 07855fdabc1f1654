//! JSON file helpers shared by every on-disk format.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamRecord;

/// Current version of every container written by this crate.
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let full = e.to_string();
        // serde_json appends the position, which Parse already carries.
        let message = match full.rsplit_once(" at line ") {
            Some((head, _)) => head.to_string(),
            None => full,
        };
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message,
        }
    })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&std::fs::read_to_string(path)?)
}

pub(crate) fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Container for trained parameters: a typed header plus flat tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<H> {
    pub version: u32,
    pub kind: String,
    pub header: H,
    pub params: Vec<ParamRecord>,
}

impl<H: DeserializeOwned> Checkpoint<H> {
    /// Parses and checks version and kind; the header is validated by the caller.
    pub fn parse(text: &str, kind: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = from_json(text)?;
        check_version(probe.version)?;
        let ck: Checkpoint<H> = from_json(text)?;
        if ck.kind != kind {
            return Err(Error::validation("kind", format!("expected {kind:?}, found {:?}", ck.kind)));
        }
        Ok(ck)
    }
}
