//! IDX image/label file parsing (the MNIST container format).
//!
//! All integers are big-endian. Image files carry magic 0x00000803 and three
//! dimensions (count, rows, cols); label files carry 0x00000801 and one.

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ByteOrder};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(Error::format(self.pos as u64, "truncated 32-bit field"));
        }
        let v = BigEndian::read_u32(&self.buf[self.pos..]);
        self.pos += 4;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated payload, need {n} more bytes"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Loads a paired IDX image file and label file into a [`Dataset`].
///
/// Pixels are scaled by 1/255; the class count is the largest label + 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_buf = std::fs::read(images_path)?;
    let label_buf = std::fs::read(labels_path)?;

    let mut img = Cursor {
        buf: &image_buf,
        pos: 0,
    };
    let magic = img.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;

    let mut lab = Cursor {
        buf: &label_buf,
        pos: 0,
    };
    let magic = lab.u32()?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::format(
            4,
            format!("{count} images but {label_count} labels"),
        ));
    }

    if count > 0 && (rows == 0 || cols == 0) {
        return Err(Error::format(8, "zero image extents"));
    }

    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = img.bytes(rows * cols)?;
        let pixels: Vec<f32> = raw.iter().map(|&b| f32::from(b) / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], pixels)?);
    }
    if img.pos != image_buf.len() {
        return Err(Error::format(
            img.pos as u64,
            "trailing bytes after image payload",
        ));
    }

    let labels: Vec<usize> = lab.bytes(count)?.iter().map(|&b| b as usize).collect();
    if lab.pos != label_buf.len() {
        return Err(Error::format(
            lab.pos as u64,
            "trailing bytes after label payload",
        ));
    }

    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(
        images,
        labels,
        classes,
        format!("idx({})", images_path.display()),
    )
}
