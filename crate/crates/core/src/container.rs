//! Shared binary container for model checkpoints: a versioned header, a
//! JSON-encoded spec with its SHA-256, and the flat parameter vector with its
//! own digest.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

pub(crate) fn save(path: &Path, magic: &[u8; 4], spec_json: &[u8], params: &[f64]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(magic)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    file.write_all(spec_json)?;
    let mut hasher = Sha256::new();
    hasher.update(spec_json);
    file.write_all(&hasher.finalize())?;
    file.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut param_hasher = Sha256::new();
    for v in params {
        let bytes = v.to_le_bytes();
        param_hasher.update(bytes);
        file.write_all(&bytes)?;
    }
    file.write_all(&param_hasher.finalize())?;
    Ok(())
}

pub(crate) fn load(path: &Path, magic: &[u8; 4]) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::MissingPath(path.display().to_string()))?,
    );
    let mut got_magic = [0u8; 4];
    file.read_exact(&mut got_magic)?;
    if &got_magic != magic {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {version}"
        )));
    }
    file.read_exact(&mut buf4)?;
    let spec_len = u32::from_le_bytes(buf4) as usize;
    let mut spec_json = vec![0u8; spec_len];
    file.read_exact(&mut spec_json)?;
    let mut stored_hash = [0u8; 32];
    file.read_exact(&mut stored_hash)?;
    let mut hasher = Sha256::new();
    hasher.update(&spec_json);
    if hasher.finalize().as_slice() != stored_hash {
        return Err(Error::CheckpointHashMismatch);
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut params = vec![0.0f64; count];
    let mut param_hasher = Sha256::new();
    for v in params.iter_mut() {
        file.read_exact(&mut buf8)?;
        param_hasher.update(buf8);
        *v = f64::from_le_bytes(buf8);
    }
    let mut stored_param_hash = [0u8; 32];
    file.read_exact(&mut stored_param_hash)?;
    if param_hasher.finalize().as_slice() != stored_param_hash {
        return Err(Error::CheckpointHashMismatch);
    }
    Ok((spec_json, params))
}
