//! Versioned binary parameter files.
//!
//! Layout, all integers little-endian `u32`, strings as length + UTF-8:
//!
//! ```text
//! magic "SACLOGP\0" | version | kind | dim | radius
//! vocab count | tokens...
//! extra count | (key, value)...
//! block count | (name, rows, cols)...
//! parameters as f64 LE, blocks in table order, each row-major
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"SACLOGP\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Encoder = 0,
    Reference = 1,
}

/// Decoded file contents; the parameter table is checked by the consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub kind: FileKind,
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub extras: Vec<(String, String)>,
    pub store: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(
    kind: FileKind,
    config: EncoderConfig,
    vocab: &Vocab,
    extras: &[(String, String)],
    store: &ParamStore,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.len() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, kind as usize);
    put_u32(&mut out, config.dim);
    put_u32(&mut out, config.radius);
    put_u32(&mut out, vocab.len());
    for t in vocab.tokens() {
        put_str(&mut out, t);
    }
    put_u32(&mut out, extras.len());
    for (k, v) in extras {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, store.blocks().len());
    for b in store.blocks() {
        put_str(&mut out, &b.name);
        put_u32(&mut out, b.rows);
        put_u32(&mut out, b.cols);
    }
    for x in store.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!("parameter file truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Data(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(String::from("not a parameter file")));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Data(format!("unsupported parameter file version {version}")));
    }
    let kind = match r.u32()? {
        0 => FileKind::Encoder,
        1 => FileKind::Reference,
        k => return Err(Error::Data(format!("unknown parameter file kind {k}"))),
    };
    let config = EncoderConfig {
        dim: r.u32()?,
        radius: r.u32()?,
    };
    let n_tokens = r.u32()?;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(&tokens);
    if vocab.tokens() != tokens.as_slice() {
        return Err(Error::Data(String::from("vocabulary section is not in canonical order")));
    }
    let n_extras = r.u32()?;
    let extras = (0..n_extras)
        .map(|_| Ok((r.string()?, r.string()?)))
        .collect::<Result<Vec<_>>>()?;
    let n_blocks = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n_blocks {
        let name = r.string()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        store.add(name, rows, cols);
    }
    let mut data = Vec::with_capacity(store.len());
    for _ in 0..store.len() {
        let b = r.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        data.push(f64::from_le_bytes(a));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
    }
    store.set_data(data)?;
    Ok(ParamFile {
        kind,
        config,
        vocab,
        extras,
        store,
    })
}

/// Copies every block of `file` into the same-named, same-shaped block of
/// `target`; both tables must list the same blocks in the same order.
pub fn load_into(file: &ParamStore, target: &mut ParamStore) -> Result<()> {
    let same = file.blocks().len() == target.blocks().len()
        && file
            .blocks()
            .iter()
            .zip(target.blocks())
            .all(|(a, b)| (a.name.as_str(), a.rows, a.cols) == (b.name.as_str(), b.rows, b.cols));
    if !same {
        return Err(Error::Shape(String::from("parameter table does not match the model")));
    }
    target.set_data(file.data().to_vec())
}
