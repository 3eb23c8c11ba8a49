//! Binary netpbm reading and writing: P5 (PGM, grayscale) and P6 (PPM, RGB)
//! with maxval 255. ASCII variants are deliberately unsupported.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Loads a binary PGM as `[1,H,W]` or a binary PPM as `[3,H,W]`, pixels
/// scaled by 1/255. Header comment lines (`#`) are skipped.
pub fn load_netpbm(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path)?;
    if buf.len() < 2 {
        return Err(Error::format(0, "file too short for a netpbm magic"));
    }
    let channels = match &buf[..2] {
        b"P5" => 1,
        b"P6" => 3,
        b"P2" | b"P3" => {
            return Err(Error::UnsupportedFormat(
                "ASCII netpbm (P2/P3) is not supported, use binary P5/P6".into(),
            ));
        }
        other => {
            return Err(Error::format(
                0,
                format!("unknown magic {:?}", String::from_utf8_lossy(other)),
            ));
        }
    };

    let mut pos = 2;
    let width = read_header_number(&buf, &mut pos)?;
    let height = read_header_number(&buf, &mut pos)?;
    let maxval = read_header_number(&buf, &mut pos)?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} is not supported, expected 255"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(pos as u64, "missing raster separator"));
    }
    pos += 1;

    let len = width * height * channels;
    if buf.len() - pos < len {
        return Err(Error::format(
            pos as u64,
            format!(
                "raster truncated: need {len} bytes, have {}",
                buf.len() - pos
            ),
        ));
    }
    let raster = &buf[pos..pos + len];

    // file raster is interleaved per pixel; tensors are planar per channel
    let mut data = vec![0.0f32; len];
    for p in 0..width * height {
        for c in 0..channels {
            data[c * width * height + p] = f32::from(raster[p * channels + c]) / 255.0;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Writes a `[1,H,W]` or `[H,W]` tensor in [0,1] as binary PGM,
/// values rounded to round(255·v).
pub fn save_pgm(tensor: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match tensor.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => {
            return Err(Error::shape(
                "save_pgm",
                "[1,H,W] or [H,W]",
                format!("{other:?}"),
            ));
        }
    };
    write_netpbm(path, b"P5", w, h, tensor.data(), 1)
}

/// Writes a `[3,H,W]` tensor in [0,1] as binary PPM.
pub fn save_ppm(tensor: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match tensor.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::shape("save_ppm", "[3,H,W]", format!("{other:?}")));
        }
    };
    write_netpbm(path, b"P6", w, h, tensor.data(), 3)
}

fn write_netpbm(
    path: &Path,
    magic: &[u8],
    width: usize,
    height: usize,
    planar: &[f32],
    channels: usize,
) -> Result<()> {
    let mut out = Vec::with_capacity(20 + width * height * channels);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    for p in 0..width * height {
        for c in 0..channels {
            let v = planar[c * width * height + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads one ASCII decimal from a netpbm header, skipping whitespace and
/// `#` comment lines.
fn read_header_number(buf: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::format(
            start as u64,
            "expected a decimal header field",
        ));
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start as u64, "unparseable header field"))
}
