//! Micro encoder/decoder segmentation network: three strided 3x3 conv layers
//! produce 64x16x16 bottleneck features from a 3x64x64 image, and a small
//! decoder maps them back to per-pixel class logits at full resolution.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthscenes::NUM_CLASSES;
use crate::tensor::{Tape, Tensor, Var};

pub const BOTTLENECK_CHANNELS: usize = 64;

#[derive(Copy, Clone, Debug)]
pub struct LayerSpec {
    pub name: &'static str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub encoder: bool,
}

pub const LAYERS: [LayerSpec; 5] = [
    LayerSpec { name: "enc1", in_ch: 3, out_ch: 16, k: 3, stride: 2, pad: 1, relu: true, encoder: true },
    LayerSpec { name: "enc2", in_ch: 16, out_ch: 32, k: 3, stride: 2, pad: 1, relu: true, encoder: true },
    LayerSpec { name: "enc3", in_ch: 32, out_ch: 64, k: 3, stride: 1, pad: 1, relu: true, encoder: true },
    LayerSpec { name: "dec1", in_ch: 64, out_ch: 32, k: 3, stride: 1, pad: 1, relu: true, encoder: false },
    LayerSpec { name: "dec2", in_ch: 32, out_ch: NUM_CLASSES, k: 1, stride: 1, pad: 0, relu: false, encoder: false },
];

const ENCODER_LAYERS: usize = 3;
const UPSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl SegNetParams {
    /// He fan-in initialization with zero biases, deterministic per seed.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for spec in LAYERS {
            let fan_in = spec.in_ch * spec.k * spec.k;
            let std = (2.0 / fan_in as f64).sqrt();
            let n = spec.out_ch * spec.in_ch * spec.k * spec.k;
            let data: Vec<f64> = (0..n).map(|_| gauss(&mut rng) * std).collect();
            weights.push(
                Tensor::new(vec![spec.out_ch, spec.in_ch, spec.k, spec.k], data).unwrap(),
            );
            biases.push(Tensor::zeros(&[spec.out_ch]));
        }
        SegNetParams { weights, biases }
    }

    /// Flat list of (name, is_encoder, tensor) views in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, bool, &Tensor)> {
        let mut out = Vec::new();
        for (i, spec) in LAYERS.iter().enumerate() {
            out.push((format!("{}.weight", spec.name), spec.encoder, &self.weights[i]));
            out.push((format!("{}.bias", spec.name), spec.encoder, &self.biases[i]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Tensor::all_finite) && self.biases.iter().all(Tensor::all_finite)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Network parameters registered on a tape.
pub struct NetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

pub fn register(tape: &Tape, params: &SegNetParams, requires_grad: bool) -> NetVars {
    NetVars {
        weights: params
            .weights
            .iter()
            .map(|w| tape.leaf(w.clone(), requires_grad))
            .collect(),
        biases: params
            .biases
            .iter()
            .map(|b| tape.leaf(b.clone(), requires_grad))
            .collect(),
    }
}

pub fn image_to_tensor(image: &Image) -> Tensor {
    Tensor::new(
        vec![3, image.height, image.width],
        image.data().to_vec(),
    )
    .unwrap()
}

/// Encoder φ: post-activation bottleneck features.
pub fn encode(tape: &Tape, net: &NetVars, image: Var) -> Result<Var> {
    let shape = tape.shape_of(image);
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "encode: expected 3xHxW image, got {shape:?}"
        )));
    }
    if shape[1] % UPSAMPLE_FACTOR != 0 || shape[2] % UPSAMPLE_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "encode: spatial extents must be divisible by {UPSAMPLE_FACTOR}, got {shape:?}"
        )));
    }
    let mut x = image;
    for i in 0..ENCODER_LAYERS {
        let spec = LAYERS[i];
        x = tape.conv2d(x, net.weights[i], net.biases[i], spec.stride, spec.pad)?;
        if spec.relu {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Decoder ω: bottleneck features to full-resolution class logits.
pub fn decode(tape: &Tape, net: &NetVars, features: Var) -> Result<Var> {
    let shape = tape.shape_of(features);
    if shape.len() != 3 || shape[0] != BOTTLENECK_CHANNELS {
        return Err(Error::Shape(format!(
            "decode: expected {BOTTLENECK_CHANNELS}xMxN features, got {shape:?}"
        )));
    }
    let mut x = features;
    for i in ENCODER_LAYERS..LAYERS.len() {
        let spec = LAYERS[i];
        x = tape.conv2d(x, net.weights[i], net.biases[i], spec.stride, spec.pad)?;
        if spec.relu {
            x = tape.relu(x);
        }
    }
    tape.upsample_bilinear(x, UPSAMPLE_FACTOR)
}

/// F = ω ∘ φ.
pub fn forward(tape: &Tape, net: &NetVars, image: Var) -> Result<Var> {
    let features = encode(tape, net, image)?;
    decode(tape, net, features)
}

// ---- checkpoint format ----
// magic "CISSCKPT", version u32 LE, then records
// {name_len u32, name bytes, ndim u32, dims u32[], data f32[] LE}

const MAGIC: &[u8; 8] = b"CISSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        Record {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            self.dims.iter().map(|&d| d as usize).collect(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for rec in records {
        bytes.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(rec.name.as_bytes());
        bytes.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
        for d in &rec.dims {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in &rec.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("bad checkpoint magic"));
    }
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u32buf).map_err(|_| bad("truncated checkpoint"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )));
    }
    let mut records = Vec::new();
    while (cur.position() as usize) < bytes.len() {
        cur.read_exact(&mut u32buf).map_err(|_| bad("truncated record"))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes).map_err(|_| bad("truncated record name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("record name not utf-8"))?;
        cur.read_exact(&mut u32buf).map_err(|_| bad("truncated record"))?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            cur.read_exact(&mut u32buf).map_err(|_| bad("truncated dims"))?;
            dims.push(u32::from_le_bytes(u32buf));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            cur.read_exact(&mut u32buf).map_err(|_| bad("truncated data"))?;
            data.push(f32::from_le_bytes(u32buf));
        }
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

impl SegNetParams {
    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.named_tensors()
            .iter()
            .map(|(name, _, t)| Record::from_tensor(&format!("{prefix}.{name}"), t))
            .collect()
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let mut params = SegNetParams::init(0);
        for (i, spec) in LAYERS.iter().enumerate() {
            let wname = format!("{prefix}.{}.weight", spec.name);
            let bname = format!("{prefix}.{}.bias", spec.name);
            let find = |n: &str| -> Result<Tensor> {
                records
                    .iter()
                    .find(|r| r.name == n)
                    .ok_or_else(|| Error::Data(format!("checkpoint missing record '{n}'")))?
                    .to_tensor()
            };
            params.weights[i] = find(&wname)?;
            params.biases[i] = find(&bname)?;
        }
        Ok(params)
    }
}
