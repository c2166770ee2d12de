//! `.fdackpt` single-file checkpoints.
//!
//! Layout: the ASCII line `FDACKPT <version> <manifest_len>\n`, a JSON
//! manifest of `manifest_len` bytes, then the FTEN blocks named in the
//! manifest, back to back. Offsets are relative to the first block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{read_ften, write_ften, Dtype};
use crate::textproc::FunctionWordDictionary;

pub const CHECKPOINT_EXTENSION: &str = "fdackpt";
const MAGIC: &str = "FDACKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    dictionary: Vec<String>,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut blocks = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let offset = blocks.len() as u64;
        write_ften(&mut blocks, t, Dtype::F64)?;
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: blocks.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config().clone(),
        dictionary: model.dictionary().iter().map(str::to_string).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC} {VERSION} {}", json.len())?;
    w.write_all(&json)?;
    w.write_all(&blocks)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header missing".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("checkpoint header not text".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 3 || fields[0] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    if fields[1] != VERSION.to_string() {
        return Err(Error::Format(format!("unsupported checkpoint version {}", fields[1])));
    }
    let manifest_len: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("bad manifest length `{}`", fields[2])))?;
    let rest = &bytes[nl + 1..];
    if rest.len() < manifest_len {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..manifest_len])
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Format(format!("manifest version {}", manifest.version)));
    }
    let blocks = &rest[manifest_len..];
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
        let end = start
            .checked_add(e.length as usize)
            .filter(|&end| end <= blocks.len())
            .ok_or_else(|| Error::Format(format!("block `{}` out of bounds", e.name)))?;
        let t = read_ften(&mut &blocks[start..end])?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("block `{}` shape disagrees with manifest", e.name)));
        }
        params.insert(e.name.clone(), t);
    }
    let dict = FunctionWordDictionary::from_words(manifest.dictionary, path.to_string_lossy().as_ref());
    Model::from_parts(manifest.config, params, dict)
}
