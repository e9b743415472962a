//! `SMCK` checkpoint files.
//!
//! Layout: magic `SMCK`, version `u16` LE, header length `u32` LE, a UTF-8
//! JSON header `{config, echo, entries: [{name, dims, offset, length}]}`,
//! then the little-endian `f32` blobs back to back. Offsets are relative to
//! the first byte after the header. Entries list trainable blocks in
//! parameter order followed by `<bn>.running_mean` / `<bn>.running_var`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::smaat::SmaAtUNet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    echo: serde_json::Value,
    entries: Vec<Entry>,
}

/// A loaded checkpoint: the model plus whatever run configuration was echoed into it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: SmaAtUNet<T>,
    pub echo: serde_json::Value,
}

fn blocks<T: Scalar>(model: &SmaAtUNet<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let to_f32 = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect::<Vec<_>>();
    let mut out: Vec<_> = model
        .params()
        .iter()
        .map(|(name, t)| (name.to_string(), t.dims().to_vec(), to_f32(t.data())))
        .collect();
    for bn in model.batch_norms() {
        let c = bn.channels();
        out.push((format!("{}.running_mean", bn.name), vec![c], to_f32(&bn.state.running_mean)));
        out.push((format!("{}.running_var", bn.name), vec![c], to_f32(&bn.state.running_var)));
    }
    out
}

/// Serializes a model to bytes.
pub fn encode<T: Scalar>(model: &SmaAtUNet<T>, echo: &serde_json::Value) -> Result<Vec<u8>> {
    let blocks = blocks(model);
    let mut offset = 0u64;
    let entries = blocks
        .iter()
        .map(|(name, dims, data)| {
            let length = 4 * data.len() as u64;
            let e = Entry {
                name: name.clone(),
                dims: dims.clone(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        echo: echo.clone(),
        entries,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Size("checkpoint header too large".into()))?;
    let mut buf = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in &blocks {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses a checkpoint from bytes.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected SMCK"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(6, format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body_start])
        .map_err(|e| Error::format(PREAMBLE as u64 + e.column() as u64, format!("invalid header JSON: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::format(PREAMBLE as u64, format!("invalid config in header: {e}")))?;
    let body = &bytes[body_start..];

    let mut model = SmaAtUNet::<T>::build(header.config.clone(), 0)
        .map_err(|e| Error::format(PREAMBLE as u64, format!("cannot build model from header: {e}")))?;
    let expected = blocks(&model);
    if expected.len() != header.entries.len() {
        return Err(Error::format(
            PREAMBLE as u64,
            format!("header lists {} entries, config implies {}", header.entries.len(), expected.len()),
        ));
    }
    let mut values: Vec<Vec<T>> = Vec::with_capacity(expected.len());
    let mut cursor = 0u64;
    for (entry, (name, dims, data)) in header.entries.iter().zip(&expected) {
        if &entry.name != name || &entry.dims != dims {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("entry `{}` {:?} does not match expected `{name}` {dims:?}", entry.name, entry.dims),
            ));
        }
        if entry.offset != cursor || entry.length != 4 * data.len() as u64 {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("entry `{name}` has inconsistent offset/length"),
            ));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if end > body.len() {
            return Err(Error::format(
                (body_start + body.len()) as u64,
                format!("truncated blob for `{name}`: need {end} bytes, have {}", body.len()),
            ));
        }
        values.push(
            body[start..end]
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
        );
        cursor = end as u64;
    }
    if cursor as usize != body.len() {
        return Err(Error::format(
            (body_start as u64) + cursor,
            format!("{} trailing bytes after last blob", body.len() - cursor as usize),
        ));
    }

    let mut values = values.into_iter();
    for t in model.params_mut().values_mut() {
        t.data_mut().copy_from_slice(&values.next().expect("entry count checked"));
    }
    for bn in model.batch_norms_mut() {
        bn.state.running_mean = values.next().expect("entry count checked");
        bn.state.running_var = values.next().expect("entry count checked");
    }
    Ok(Checkpoint {
        model,
        echo: header.echo,
    })
}

/// Writes via a sibling temp file and an atomic rename.
pub fn save_checkpoint<T: Scalar>(model: &SmaAtUNet<T>, path: &Path, echo: &serde_json::Value) -> Result<()> {
    let bytes = encode(model, echo)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
