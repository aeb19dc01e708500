//! QMRSTACK container I/O.
//!
//! Layout, bit-exact:
//!   bytes 0..9   magic `QMRSTACK1`
//!   byte  9      `\n`
//!   bytes 10..14 little-endian u32 header length `n`
//!   n bytes      UTF-8 JSON header
//!   payload      `n_frames * height * width [* channels]` samples,
//!                frame-major row-major (channel-last for fields),
//!                little-endian f32 for dtype `f32le`, one byte per
//!                sample for dtype `u8`
//!
//! Header keys: required `n_frames`, `height`, `width`, `dtype`; optional
//! `inversion_times_ms`, `spacing_mm`, `channels`, `label`. Masks use dtype
//! `u8` with values {0, 1}; displacement fields use `channels: 2`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::bspline::DisplacementField;
use crate::error::{QmrError, Result};
use crate::stack::{ImageStack, RoiMask};

pub const MAGIC: &[u8; 9] = b"QMRSTACK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n_frames: usize,
    height: usize,
    width: usize,
    dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    inversion_times_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacing_mm: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(b"\n")?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)
        .map_err(|_| QmrError::Format("file too short for QMRSTACK magic".into()))?;
    if &magic[..9] != MAGIC || magic[9] != b'\n' {
        return Err(QmrError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic[..9])
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| QmrError::Format("truncated header length".into()))?;
    let n = u32::from_le_bytes(len) as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)
        .map_err(|_| QmrError::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| QmrError::Format(format!("invalid header json: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

fn expected_samples(header: &Header) -> usize {
    header.n_frames * header.height * header.width * header.channels.unwrap_or(1)
}

fn decode_f32(header: &Header, payload: &[u8]) -> Result<Vec<f64>> {
    if header.dtype != "f32le" {
        return Err(QmrError::Format(format!(
            "expected dtype f32le, got {:?}",
            header.dtype
        )));
    }
    let n = expected_samples(header);
    if payload.len() != n * 4 {
        return Err(QmrError::Corrupt(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            n * 4
        )));
    }
    let mut out = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(QmrError::Validation("non-finite sample in payload".into()));
        }
        out.push(v as f64);
    }
    Ok(out)
}

fn encode_f32(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Write an [`ImageStack`] to a QMRSTACK file. Intensities are stored as f32.
pub fn save_stack(stack: &ImageStack, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        n_frames: stack.n_frames(),
        height: stack.height(),
        width: stack.width(),
        dtype: "f32le".into(),
        inversion_times_ms: stack.inversion_times_ms().map(|t| t.to_vec()),
        spacing_mm: Some(stack.spacing_mm()),
        channels: None,
        label: None,
    };
    let payload = encode_f32(stack.frames().iter().copied());
    write_container(path.as_ref(), &header, &payload)
}

/// Read an [`ImageStack`] from a QMRSTACK file.
pub fn load_stack(path: impl AsRef<Path>) -> Result<ImageStack> {
    let (header, payload) = read_container(path.as_ref())?;
    if header.channels.unwrap_or(1) != 1 {
        return Err(QmrError::Format(
            "file holds a multi-channel field, not an image stack".into(),
        ));
    }
    let data = decode_f32(&header, &payload)?;
    let frames = Array3::from_shape_vec((header.n_frames, header.height, header.width), data)
        .map_err(|e| QmrError::Corrupt(format!("shape mismatch: {e}")))?;
    ImageStack::new(
        frames,
        header.inversion_times_ms,
        header.spacing_mm.unwrap_or([1.0, 1.0]),
    )
}

/// Write a mask as a u8 QMRSTACK with values {0, 1}.
pub fn save_mask(mask: &RoiMask, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        n_frames: 1,
        height: mask.height(),
        width: mask.width(),
        dtype: "u8".into(),
        inversion_times_ms: None,
        spacing_mm: None,
        channels: None,
        label: Some(mask.label().to_string()),
    };
    let payload: Vec<u8> = mask.mask().iter().map(|&b| b as u8).collect();
    write_container(path.as_ref(), &header, &payload)
}

/// Read a mask from a u8 QMRSTACK file.
pub fn load_mask(path: impl AsRef<Path>) -> Result<RoiMask> {
    let (header, payload) = read_container(path.as_ref())?;
    if header.dtype != "u8" {
        return Err(QmrError::Format(format!(
            "expected dtype u8 for mask, got {:?}",
            header.dtype
        )));
    }
    if header.n_frames != 1 {
        return Err(QmrError::Format("mask must hold exactly one frame".into()));
    }
    if payload.len() != header.height * header.width {
        return Err(QmrError::Corrupt(format!(
            "mask payload holds {} bytes, header implies {}",
            payload.len(),
            header.height * header.width
        )));
    }
    let mut bits = Vec::with_capacity(payload.len());
    for &b in &payload {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            other => {
                return Err(QmrError::Validation(format!(
                    "mask sample {other} outside {{0,1}}"
                )))
            }
        }
    }
    let mask = Array2::from_shape_vec((header.height, header.width), bits)
        .map_err(|e| QmrError::Corrupt(format!("shape mismatch: {e}")))?;
    RoiMask::new(mask, header.label.unwrap_or_else(|| "roi".into()))
}

/// Write a displacement field (`channels: 2`, channel-last dy/dx pairs).
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let (n, h, w, _) = field.u().dim();
    let header = Header {
        n_frames: n,
        height: h,
        width: w,
        dtype: "f32le".into(),
        inversion_times_ms: None,
        spacing_mm: None,
        channels: Some(2),
        label: None,
    };
    let payload = encode_f32(field.u().iter().copied());
    write_container(path.as_ref(), &header, &payload)
}

/// Read a displacement field written by [`save_field`].
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let (header, payload) = read_container(path.as_ref())?;
    if header.channels != Some(2) {
        return Err(QmrError::Format(
            "displacement field requires header key channels: 2".into(),
        ));
    }
    let data = decode_f32(&header, &payload)?;
    let u = Array4::from_shape_vec((header.n_frames, header.height, header.width, 2), data)
        .map_err(|e| QmrError::Corrupt(format!("shape mismatch: {e}")))?;
    DisplacementField::new(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::fs;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("qmr-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn f32_stack(n: usize, h: usize, w: usize) -> ImageStack {
        // values exactly representable in f32 so round-trips are bitwise
        let frames = Array3::from_shape_fn((n, h, w), |(i, y, x)| {
            ((i * h * w + y * w + x) as f32 * 0.25 - 3.5) as f64
        });
        ImageStack::new(frames, Some((1..=n).map(|i| 100.0 * i as f64).collect()), [1.5, 1.5])
            .unwrap()
    }

    #[test]
    fn stack_round_trip_is_exact() {
        let s = f32_stack(3, 8, 9);
        let p = tmpfile("rt.qmr");
        save_stack(&s, &p).unwrap();
        let back = load_stack(&p).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn missing_inversion_times_stay_missing() {
        let frames = Array3::zeros((2, 8, 8));
        let s = ImageStack::new(frames, None, [1.0, 1.0]).unwrap();
        let p = tmpfile("no-ti.qmr");
        save_stack(&s, &p).unwrap();
        assert!(load_stack(&p).unwrap().inversion_times_ms().is_none());
    }

    #[test]
    fn zero_stack_payload_is_all_zero_floats() {
        let s = ImageStack::new(Array3::zeros((3, 8, 8)), None, [1.0, 1.0]).unwrap();
        let p = tmpfile("zeros.qmr");
        save_stack(&s, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header_len = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
        let payload = &bytes[14 + header_len..];
        assert_eq!(payload.len(), 3 * 8 * 8 * 4);
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let p = tmpfile("bad-magic.qmr");
        fs::write(&p, b"XXXXSTACK\n\x02\x00\x00\x00{}").unwrap();
        assert!(matches!(load_stack(&p), Err(QmrError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let s = f32_stack(2, 8, 8);
        let p = tmpfile("trunc.qmr");
        save_stack(&s, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_stack(&p), Err(QmrError::Corrupt(_))));
    }

    #[test]
    fn nan_payload_is_a_validation_error() {
        let s = f32_stack(2, 8, 8);
        let p = tmpfile("nan.qmr");
        save_stack(&s, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let tail = bytes.len() - 4;
        bytes[tail..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_stack(&p), Err(QmrError::Validation(_))));
    }

    #[test]
    fn header_dims_drive_decoding() {
        // 11 frames of 112x112 f32 zeros, header written by hand
        let p = tmpfile("by-hand.qmr");
        let json = br#"{"n_frames":11,"height":112,"width":112,"dtype":"f32le"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(b'\n');
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(json);
        bytes.extend(std::iter::repeat(0u8).take(11 * 112 * 112 * 4));
        fs::write(&p, &bytes).unwrap();
        let s = load_stack(&p).unwrap();
        assert_eq!((s.n_frames(), s.height(), s.width()), (11, 112, 112));
    }

    #[test]
    fn mask_round_trip() {
        let mut m = Array2::from_elem((8, 8), false);
        m[[2, 3]] = true;
        m[[4, 4]] = true;
        let mask = RoiMask::new(m, "myocardium").unwrap();
        let p = tmpfile("mask.qmr");
        save_mask(&mask, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn mask_values_outside_01_rejected() {
        let mut m = Array2::from_elem((8, 8), false);
        m[[0, 0]] = true;
        let mask = RoiMask::new(m, "roi").unwrap();
        let p = tmpfile("mask-bad.qmr");
        save_mask(&mask, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_mask(&p), Err(QmrError::Validation(_))));
    }
}
