//! Binary weight container.
//!
//! Layout (little-endian): magic `FSNT`, format version u32, the network
//! spec as length-prefixed UTF-8 canonical text, tensor count u32, then per
//! tensor {length-prefixed name, rank u32, extents u32 each, raw f32 data},
//! and a trailing CRC-32 over all preceding bytes.

use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec, Parameters};
use crate::tensor::Tensor;
use byteorder::{ByteOrder, LittleEndian};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FSNT";
const VERSION: u32 = 1;

/// Serializes a model's spec and parameters to `path`.
pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_str(&mut buf, &model.spec().to_canonical_text());

    let tensors = model.params().named_tensors();
    push_u32(&mut buf, tensors.len() as u32);
    for (name, tensor) in tensors {
        push_str(&mut buf, &name);
        push_u32(&mut buf, tensor.shape().len() as u32);
        for &e in tensor.shape() {
            push_u32(&mut buf, e as u32);
        }
        for &v in tensor.data() {
            let mut le = [0u8; 4];
            LittleEndian::write_f32(&mut le, v);
            buf.extend_from_slice(&le);
        }
    }

    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a container back into a validated model, verifying the checksum
/// before any parsing.
pub fn load_weights(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(Error::format(0, "file too short for a weight container"));
    }
    let (payload, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = LittleEndian::read_u32(crc_bytes);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::format(
            payload.len() as u64,
            format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        ));
    }

    let mut cur = Cursor {
        buf: payload,
        pos: 0,
    };
    let magic = cur.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported container version {version}"),
        ));
    }
    let spec = NetworkSpec::from_canonical_text(&cur.string()?)?;

    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.bytes(len * 4)?;
        let mut data = vec![0.0f32; len];
        LittleEndian::read_f32_into(raw, &mut data);
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != payload.len() {
        return Err(Error::format(
            cur.pos as u64,
            "trailing bytes after tensor payload",
        ));
    }

    let params = Parameters::from_named_tensors(&spec, &tensors)?;
    Model::new(spec, params)
}

impl Model {
    /// Shorthand for [`save_weights`].
    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(self, path)
    }

    /// Shorthand for [`load_weights`].
    pub fn load(path: &Path) -> Result<Model> {
        load_weights(path)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    let mut le = [0u8; 4];
    LittleEndian::write_u32(&mut le, v);
    buf.extend_from_slice(&le);
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated field, need {n} more bytes"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.bytes(4)?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at as u64, "string field is not UTF-8"))
    }
}
