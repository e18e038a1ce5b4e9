//! RGB images in [0,1] and integer label maps, with binary PPM (P6) and
//! PGM (P5) persistence. Quantization is linear 0..=255 with round-half-up.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

/// 3-channel image, channel-major row-major data, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {}x{} needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes =
            format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let hw = self.height * self.width;
        for p in 0..hw {
            for c in 0..3 {
                bytes.push(quantize(self.data[c * hw + p]));
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, payload) = parse_pnm_header(&bytes, b'6', path)?;
        if maxval != 255 {
            return Err(Error::Data(format!(
                "{}: only maxval 255 supported, got {maxval}",
                path.display()
            )));
        }
        if payload.len() != 3 * w * h {
            return Err(Error::Data(format!(
                "{}: truncated P6 payload",
                path.display()
            )));
        }
        let hw = w * h;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = payload[3 * p + c] as f64 / 255.0;
            }
        }
        Image::new(h, w, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// H×W class-id map; 255 is the ignore sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes =
            format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, maxval, payload) = parse_pnm_header(&bytes, b'5', path)?;
        if maxval != 255 {
            return Err(Error::Data(format!(
                "{}: only maxval 255 supported, got {maxval}",
                path.display()
            )));
        }
        if payload.len() != w * h {
            return Err(Error::Data(format!(
                "{}: truncated P5 payload",
                path.display()
            )));
        }
        LabelMap::new(h, w, payload.to_vec())
    }
}

fn parse_pnm_header<'a>(
    bytes: &'a [u8],
    kind: u8,
    path: &Path,
) -> Result<(usize, usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut cursor = bytes;
    let mut magic = [0u8; 2];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| bad("missing PNM magic"))?;
    if magic != [b'P', kind] {
        return Err(bad("wrong PNM magic"));
    }
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed PNM header"));
        }
        let field: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("bad header field"))?;
        fields.push(field);
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    if pos > bytes.len() {
        return Err(bad("missing payload"));
    }
    Ok((fields[0], fields[1], fields[2], &bytes[pos..]))
}
