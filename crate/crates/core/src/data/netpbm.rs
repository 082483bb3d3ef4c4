//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Header fields and the offset of the first payload byte.
struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            path,
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    let mut starts = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        starts[i] = start;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(parse_err(path, start, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, start, "number out of range"))?;
    }
    if fields[2] != 255 {
        return Err(parse_err(path, starts[2], format!("maxval {} is not 255", fields[2])));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(path, pos, "expected a single whitespace byte after maxval")),
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header.width * header.height * channels;
    let actual = bytes.len() - header.data_start;
    if actual < expected {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(&bytes[header.data_start..header.data_start + expected])
}

/// Decodes a P6 image to `[3, H, W]` floats `v / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, b"P6", path)?;
    let data = payload(bytes, &header, 3, path)?;
    let plane = header.width * header.height;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = byte_to_unit(px[ch]);
        }
    }
    Ok(Tensor::new(vec![3, header.height, header.width], out)?)
}

/// The float a byte decodes to; matches the generator's quantisation exactly.
pub fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 255.0) as f32
}

pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::config(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())))?;
    if c != 3 {
        return Err(Error::config(format!("PPM needs 3 channels, got {c}")));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(unit_to_byte(image.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

/// An 8-bit label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Gray> {
    let header = parse_header(bytes, b"P5", path)?;
    let data = payload(bytes, &header, 1, path)?.to_vec();
    Ok(Gray {
        width: header.width,
        height: header.height,
        data,
    })
}

pub fn encode_pgm(g: &Gray) -> Result<Vec<u8>> {
    if g.data.len() != g.width * g.height {
        return Err(Error::config(format!(
            "{} labels for a {}x{} map",
            g.data.len(),
            g.width,
            g.height
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    out.extend_from_slice(&g.data);
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(PathBuf::from(path), e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read(path)?, path)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write(path, &encode_ppm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    decode_pgm(&read(path)?, path)
}

pub fn write_pgm(path: &Path, g: &Gray) -> Result<()> {
    write(path, &encode_pgm(g)?)
}
