//! Loss formulations, pseudolabel self-training, DACS mixing, EMA teacher,
//! AdamW, and the training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, IGNORE_LABEL};
use crate::metrics::ConfusionMatrix;
use crate::segnet::{self, NetVars, Record, SegNetParams, LAYERS};
use crate::stylize::{self, StyleConfig};
use crate::synthscenes::{sample_seed, substream, Dataset, Split, NUM_CLASSES};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Basic,
    Fda,
    CeFull,
    Ciss,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(LossVariant::Basic),
            "fda" => Ok(LossVariant::Fda),
            "ce_full" => Ok(LossVariant::CeFull),
            "ciss" => Ok(LossVariant::Ciss),
            other => Err(Error::Config(format!(
                "unknown loss variant '{other}' (expected basic|fda|ce_full|ciss)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Basic => "basic",
            LossVariant::Fda => "fda",
            LossVariant::CeFull => "ce_full",
            LossVariant::Ciss => "ciss",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InvariancePoint {
    Encoder,
    Output,
}

impl InvariancePoint {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(InvariancePoint::Encoder),
            "output" => Ok(InvariancePoint::Output),
            other => Err(Error::Config(format!(
                "unknown invariance point '{other}' (expected encoder|output)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InvariancePoint::Encoder => "encoder",
            InvariancePoint::Output => "output",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InvarianceNorm {
    FrobeniusSq,
    L1,
}

impl InvarianceNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frobenius_sq" => Ok(InvarianceNorm::FrobeniusSq),
            "l1" => Ok(InvarianceNorm::L1),
            other => Err(Error::Config(format!(
                "unknown invariance norm '{other}' (expected frobenius_sq|l1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InvarianceNorm::FrobeniusSq => "frobenius_sq",
            InvarianceNorm::L1 => "l1",
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub invariance_point: InvariancePoint,
    pub invariance_norm: InvarianceNorm,
    pub style: StyleConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_s < 0.0 || self.lambda_t < 0.0 {
            return Err(Error::Config(format!(
                "lambda weights must be nonnegative, got lambda_s={}, lambda_t={}",
                self.lambda_s, self.lambda_t
            )));
        }
        self.style.validate()
    }
}

/// One training sample with all views the loss variants may need.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub src_image: Image,
    pub src_labels: LabelMap,
    pub tgt_image: Image,
    pub src_to_tgt: Option<Image>,
    pub tgt_to_src: Option<Image>,
    pub pseudo_labels: LabelMap,
    /// Confidence weight q of the pseudolabels.
    pub confidence: f64,
    /// Image and labels feeding the target CE term (DACS-mixed when applied).
    pub tgt_ce_image: Image,
    pub tgt_ce_labels: LabelMap,
}

/// Mean cross-entropy of a softmax prediction against a label map, scaled by
/// `pixel_weight`. Normalized by the count of non-ignored pixels.
pub fn cross_entropy(
    tape: &Tape,
    probs: Var,
    labels: &LabelMap,
    pixel_weight: f64,
) -> Result<Var> {
    tape.nll_mean(probs, labels.data(), pixel_weight)
}

/// Feature invariance loss between two same-shape feature maps.
pub fn feature_invariance(tape: &Tape, f1: Var, f2: Var, norm: InvarianceNorm) -> Result<Var> {
    match norm {
        InvarianceNorm::FrobeniusSq => tape.mse_mean(f1, f2),
        InvarianceNorm::L1 => tape.mad_mean(f1, f2),
    }
}

/// Per-term loss values emitted alongside the total.
#[derive(Copy, Clone, Debug, Default)]
pub struct LossBreakdown {
    pub ce_src: f64,
    pub ce_tgt: f64,
    pub inv_src: f64,
    pub inv_tgt: f64,
}

impl LossBreakdown {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        let (ls, lt) = match cfg.variant {
            LossVariant::Ciss => (cfg.lambda_s, cfg.lambda_t),
            _ => (0.0, 0.0),
        };
        self.ce_src + self.ce_tgt + ls * self.inv_src + lt * self.inv_tgt
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("loss_ce_src", self.ce_src),
            ("loss_ce_tgt", self.ce_tgt),
            ("loss_inv_src", self.inv_src),
            ("loss_inv_tgt", self.inv_tgt),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn image_leaf(tape: &Tape, image: &Image) -> Var {
    tape.leaf(segnet::image_to_tensor(image), false)
}

fn require_view<'a>(view: &'a Option<Image>, which: &str, variant: LossVariant) -> Result<&'a Image> {
    view.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "loss variant '{}' requires the stylized view {which}",
            variant.name()
        ))
    })
}

/// Invariance attachment: encoder bottleneck features or softmax outputs.
fn invariance_features(
    tape: &Tape,
    net: &NetVars,
    point: InvariancePoint,
    image: &Image,
) -> Result<Var> {
    let x = image_leaf(tape, image);
    match point {
        InvariancePoint::Encoder => segnet::encode(tape, net, x),
        InvariancePoint::Output => {
            let logits = segnet::forward(tape, net, x)?;
            tape.softmax_channels(logits)
        }
    }
}

/// Build the loss of the configured variant on the given tape and return the
/// root node plus a per-term breakdown.
pub fn compose_loss(
    tape: &Tape,
    net: &NetVars,
    cfg: &LossConfig,
    batch: &TrainBatch,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let q = batch.confidence;
    let mut bd = LossBreakdown::default();

    // target CE term, common to all variants
    let tgt_logits = segnet::forward(tape, net, image_leaf(tape, &batch.tgt_ce_image))?;
    let tgt_probs = tape.softmax_channels(tgt_logits)?;
    let ce_tgt = cross_entropy(tape, tgt_probs, &batch.tgt_ce_labels, q)?;
    bd.ce_tgt = tape.value(ce_tgt).item();

    let total = match cfg.variant {
        LossVariant::Basic => {
            let src_logits = segnet::forward(tape, net, image_leaf(tape, &batch.src_image))?;
            let src_probs = tape.softmax_channels(src_logits)?;
            let ce_src = cross_entropy(tape, src_probs, &batch.src_labels, 1.0)?;
            bd.ce_src = tape.value(ce_src).item();
            tape.add(ce_src, ce_tgt)?
        }
        LossVariant::Fda => {
            let view = require_view(&batch.src_to_tgt, "src_to_tgt", cfg.variant)?;
            let logits = segnet::forward(tape, net, image_leaf(tape, view))?;
            let probs = tape.softmax_channels(logits)?;
            let ce_src = cross_entropy(tape, probs, &batch.src_labels, 1.0)?;
            bd.ce_src = tape.value(ce_src).item();
            tape.add(ce_src, ce_tgt)?
        }
        LossVariant::CeFull => {
            let v_s2t = require_view(&batch.src_to_tgt, "src_to_tgt", cfg.variant)?;
            let v_t2s = require_view(&batch.tgt_to_src, "tgt_to_src", cfg.variant)?;
            let l_s2t = segnet::forward(tape, net, image_leaf(tape, v_s2t))?;
            let p_s2t = tape.softmax_channels(l_s2t)?;
            let ce_s2t = cross_entropy(tape, p_s2t, &batch.src_labels, 1.0)?;
            let l_s = segnet::forward(tape, net, image_leaf(tape, &batch.src_image))?;
            let p_s = tape.softmax_channels(l_s)?;
            let ce_s = cross_entropy(tape, p_s, &batch.src_labels, 1.0)?;
            let l_t2s = segnet::forward(tape, net, image_leaf(tape, v_t2s))?;
            let p_t2s = tape.softmax_channels(l_t2s)?;
            let ce_t2s = cross_entropy(tape, p_t2s, &batch.pseudo_labels, q)?;
            bd.ce_src = tape.value(ce_s2t).item() + tape.value(ce_s).item();
            bd.ce_tgt += tape.value(ce_t2s).item();
            let a = tape.add(ce_s2t, ce_s)?;
            let b = tape.add(a, ce_tgt)?;
            tape.add(b, ce_t2s)?
        }
        LossVariant::Ciss => {
            // CE on the original source image, sharing the encoder forward
            // with the source invariance term at the encoder point.
            let src_var = image_leaf(tape, &batch.src_image);
            let feat_s = segnet::encode(tape, net, src_var)?;
            let src_logits = segnet::decode(tape, net, feat_s)?;
            let src_probs = tape.softmax_channels(src_logits)?;
            let ce_src = cross_entropy(tape, src_probs, &batch.src_labels, 1.0)?;
            bd.ce_src = tape.value(ce_src).item();
            let mut total = tape.add(ce_src, ce_tgt)?;
            if cfg.lambda_s > 0.0 {
                let view = require_view(&batch.src_to_tgt, "src_to_tgt", cfg.variant)?;
                let f1 = match cfg.invariance_point {
                    InvariancePoint::Encoder => feat_s,
                    InvariancePoint::Output => src_probs,
                };
                let f2 = invariance_features(tape, net, cfg.invariance_point, view)?;
                let inv = feature_invariance(tape, f1, f2, cfg.invariance_norm)?;
                bd.inv_src = tape.value(inv).item();
                total = tape.add(total, tape.scale(inv, cfg.lambda_s))?;
            }
            if cfg.lambda_t > 0.0 {
                let view = require_view(&batch.tgt_to_src, "tgt_to_src", cfg.variant)?;
                // invariance is always computed on the unmixed target image
                let f1 = invariance_features(tape, net, cfg.invariance_point, &batch.tgt_image)?;
                let f2 = invariance_features(tape, net, cfg.invariance_point, view)?;
                let inv = feature_invariance(tape, f1, f2, cfg.invariance_norm)?;
                bd.inv_tgt = tape.value(inv).item();
                total = tape.add(total, tape.scale(inv, cfg.lambda_t))?;
            }
            total
        }
    };
    Ok((total, bd))
}

/// Teacher pseudolabels: per-pixel argmax (ties to the lowest class id) and
/// the fraction q of pixels whose max softmax reaches `tau`.
pub fn pseudolabel(
    teacher: &SegNetParams,
    tgt_image: &Image,
    tau: f64,
) -> Result<(LabelMap, f64)> {
    let c = NUM_CLASSES as f64;
    if tau <= 1.0 / c || tau >= 1.0 {
        return Err(Error::Config(format!(
            "tau {tau} must lie in (1/C, 1) = ({}, 1)",
            1.0 / c
        )));
    }
    let tape = Tape::new();
    let net = segnet::register(&tape, teacher, false);
    let logits = segnet::forward(&tape, &net, image_leaf(&tape, tgt_image))?;
    let probs = tape.softmax_channels(logits)?;
    Ok(tape.with_value(probs, |p| {
        let (h, w) = (tgt_image.height, tgt_image.width);
        argmax_with_confidence(p.data(), h, w, tau)
    }))
}

fn argmax_with_confidence(probs: &[f64], h: usize, w: usize, tau: f64) -> (LabelMap, f64) {
    let hw = h * w;
    let c = probs.len() / hw;
    let mut labels = LabelMap::filled(h, w, 0);
    let mut confident = 0usize;
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_p = probs[p];
        for ch in 1..c {
            let v = probs[ch * hw + p];
            if v > best_p {
                best_p = v;
                best = ch;
            }
        }
        labels.data_mut()[p] = best as u8;
        if best_p >= tau {
            confident += 1;
        }
    }
    (labels, confident as f64 / hw as f64)
}

/// DACS class mixing: pick ceil(K/2) of the K classes present in the source
/// labels, paste those source pixels (with labels) into the target pair.
pub fn dacs_mix(
    src: (&Image, &LabelMap),
    tgt: (&Image, &LabelMap),
    seed: u64,
) -> Result<(Image, LabelMap)> {
    let (src_img, src_lab) = src;
    let (tgt_img, _) = tgt;
    if src_img.height != tgt_img.height || src_img.width != tgt_img.width {
        return Err(Error::Shape("dacs_mix: dimension mismatch".into()));
    }
    let mut present: Vec<u8> = Vec::new();
    for &l in src_lab.data() {
        if l != IGNORE_LABEL && !present.contains(&l) {
            present.push(l);
        }
    }
    present.sort_unstable();
    let take = present.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = present.clone();
    shuffled.shuffle(&mut rng);
    let chosen = &shuffled[..take];
    mix_with_classes(src, tgt, chosen)
}

/// Deterministic core of DACS: paste pixels of the given source classes.
pub fn mix_with_classes(
    src: (&Image, &LabelMap),
    tgt: (&Image, &LabelMap),
    classes: &[u8],
) -> Result<(Image, LabelMap)> {
    let (src_img, src_lab) = src;
    let (tgt_img, tgt_lab) = tgt;
    let (h, w) = (src_img.height, src_img.width);
    let hw = h * w;
    let mut out_img = tgt_img.clone();
    let mut out_lab = tgt_lab.clone();
    for p in 0..hw {
        if classes.contains(&src_lab.data()[p]) {
            for c in 0..3 {
                out_img.data_mut()[c * hw + p] = src_img.data()[c * hw + p];
            }
            out_lab.data_mut()[p] = src_lab.data()[p];
        }
    }
    Ok((out_img, out_lab))
}

/// θ_T ← α·θ_T + (1−α)·θ_S, elementwise.
pub fn ema_update(teacher: &mut SegNetParams, student: &SegNetParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0,1]")));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::Shape("ema_update: parameter shape mismatch".into()));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// AdamW with decoupled weight decay, bias correction, and separate encoder /
/// decoder learning rates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &SegNetParams, weight_decay: f64) -> Self {
        let shapes: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamW {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update. `grads` aligns with `params.tensors()`; `lr_scale` is the
    /// warm-up multiplier.
    pub fn step(
        &mut self,
        params: &mut SegNetParams,
        grads: &[Tensor],
        lr_encoder: f64,
        lr_decoder: f64,
        lr_scale: f64,
    ) -> Result<()> {
        if lr_encoder < 0.0 || lr_decoder < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "adamw_step: {} gradients for {} parameters",
                grads.len(),
                tensors.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // tensors are ordered (weight, bias) per layer, matching LAYERS
        for (idx, (p, g)) in tensors.into_iter().zip(grads).enumerate() {
            if !g.all_finite() {
                let spec = LAYERS[idx / 2];
                let kind = if idx % 2 == 0 { "weight" } else { "bias" };
                return Err(Error::Numeric(format!(
                    "NaN/Inf gradient for {}.{kind}",
                    spec.name
                )));
            }
            let lr = if LAYERS[idx / 2].encoder {
                lr_encoder
            } else {
                lr_decoder
            } * lr_scale;
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for i in 0..m.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pi = &mut p.data_mut()[i];
                *pi -= lr * self.weight_decay * *pi;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: SegNetParams,
    pub teacher: SegNetParams,
    pub opt: AdamW,
    pub iter: u64,
}

impl TrainState {
    pub fn new(init_seed: u64, weight_decay: f64) -> Self {
        let student = SegNetParams::init(init_seed);
        let teacher = student.clone();
        let opt = AdamW::new(&student, weight_decay);
        TrainState {
            student,
            teacher,
            opt,
            iter: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = self.student.to_records("student");
        records.extend(self.teacher.to_records("teacher"));
        for (i, (name, _, _)) in self.student.named_tensors().iter().enumerate() {
            records.push(Record::from_tensor(&format!("opt.m.{name}"), &self.opt.m[i]));
            records.push(Record::from_tensor(&format!("opt.v.{name}"), &self.opt.v[i]));
        }
        records.push(Record {
            name: "meta.iter".into(),
            dims: vec![1],
            data: vec![self.iter as f32],
        });
        segnet::write_records(path, &records)
    }

    pub fn load(path: &Path, weight_decay: f64) -> Result<Self> {
        let records = segnet::read_records(path)?;
        let student = SegNetParams::from_records(&records, "student")?;
        let teacher = SegNetParams::from_records(&records, "teacher")?;
        let mut opt = AdamW::new(&student, weight_decay);
        for (i, (name, _, _)) in student.named_tensors().iter().enumerate() {
            let find = |n: String| -> Result<Tensor> {
                records
                    .iter()
                    .find(|r| r.name == n)
                    .ok_or_else(|| Error::Data(format!("checkpoint missing record '{n}'")))?
                    .to_tensor()
            };
            opt.m[i] = find(format!("opt.m.{name}"))?;
            opt.v[i] = find(format!("opt.v.{name}"))?;
        }
        let iter = records
            .iter()
            .find(|r| r.name == "meta.iter")
            .map(|r| r.data[0] as u64)
            .unwrap_or(0);
        opt.t = iter;
        Ok(TrainState {
            student,
            teacher,
            opt,
            iter,
        })
    }
}

/// One row of the training metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_ce_src: f64,
    pub loss_ce_tgt: f64,
    pub loss_inv_src: f64,
    pub loss_inv_tgt: f64,
    pub q_weight: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "iter,loss_total,loss_ce_src,loss_ce_tgt,loss_inv_src,loss_inv_tgt,q_weight,lr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss_total,
            self.loss_ce_src,
            self.loss_ce_tgt,
            self.loss_inv_src,
            self.loss_inv_tgt,
            self.q_weight,
            self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Data(format!("metrics row: expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("metrics row: bad number '{s}'")))
        };
        Ok(MetricsRow {
            iter: f[0]
                .parse()
                .map_err(|_| Error::Data(format!("metrics row: bad iter '{}'", f[0])))?,
            loss_total: num(f[1])?,
            loss_ce_src: num(f[2])?,
            loss_ce_tgt: num(f[3])?,
            loss_inv_src: num(f[4])?,
            loss_inv_tgt: num(f[5])?,
            q_weight: num(f[6])?,
            lr: num(f[7])?,
        })
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Data("metrics CSV: missing or wrong header".into())),
    }
    lines.map(MetricsRow::parse).collect()
}

/// Full training run, deterministic from the config's master seed.
/// Learning-rate multiplier: linear warm-up to 1, then linear decay to 0.1
/// at the final iteration. Decay keeps the final iterate stable so repeated
/// runs land close together.
fn lr_schedule(it: u64, warmup: u64, iterations: u64) -> f64 {
    if it <= warmup {
        return it as f64 / warmup as f64;
    }
    if iterations <= warmup {
        return 1.0;
    }
    let progress = (it - warmup) as f64 / (iterations - warmup) as f64;
    1.0 - 0.9 * progress
}

pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(TrainState, Vec<MetricsRow>)> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    let mut state = TrainState::new(substream(cfg.master_seed, "init"), cfg.weight_decay);
    let mut data_rng = ChaCha8Rng::seed_from_u64(substream(cfg.master_seed, "data"));
    let mut dacs_rng = ChaCha8Rng::seed_from_u64(substream(cfg.master_seed, "dacs"));
    let jitter_stream = substream(cfg.master_seed, "jitter");
    let src_idx = dataset.indices(Split::SourceTrain);
    let tgt_idx = dataset.indices(Split::TargetTrain);
    if src_idx.is_empty() || tgt_idx.is_empty() {
        return Err(Error::Data("training requires source and target scenes".into()));
    }
    let warmup = ((cfg.warmup_frac * cfg.iterations as f64).round() as u64).max(1);
    let mut rows = Vec::with_capacity(cfg.iterations as usize);
    let mut jitter_counter = 0u64;

    for it in 1..=cfg.iterations {
        let tape = Tape::new();
        let net = segnet::register(&tape, &state.student, true);
        let mut sum_bd = LossBreakdown::default();
        let mut sum_q = 0.0;
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            let si = src_idx[data_rng.gen_range(0..src_idx.len())];
            let ti = tgt_idx[data_rng.gen_range(0..tgt_idx.len())];
            let src_image = dataset.image(si).clone();
            let src_labels = dataset.labels(si)?.clone();
            let tgt_image = dataset.image(ti).clone();

            // stylized cross-domain views
            let seed_a = sample_seed(jitter_stream, jitter_counter);
            let seed_b = sample_seed(jitter_stream, jitter_counter + 1);
            jitter_counter += 2;
            let src_to_tgt = stylize::apply(&loss_cfg.style, &src_image, &tgt_image, seed_a)?;
            let tgt_to_src = stylize::apply(&loss_cfg.style, &tgt_image, &src_image, seed_b)?;

            // teacher pseudolabels on the plain target image
            let (pseudo, q) = pseudolabel(&state.teacher, &tgt_image, cfg.tau)?;
            sum_q += q;

            // DACS draw, target CE term only
            let coin: f64 = dacs_rng.gen();
            let mix_seed: u64 = dacs_rng.gen();
            let (tgt_ce_image, tgt_ce_labels) = if coin < cfg.dacs_prob {
                dacs_mix((&src_image, &src_labels), (&tgt_image, &pseudo), mix_seed)?
            } else {
                (tgt_image.clone(), pseudo.clone())
            };

            let batch = TrainBatch {
                src_image,
                src_labels,
                tgt_image,
                src_to_tgt: Some(src_to_tgt),
                tgt_to_src: Some(tgt_to_src),
                pseudo_labels: pseudo,
                confidence: q,
                tgt_ce_image,
                tgt_ce_labels,
            };
            let (sample_total, bd) = compose_loss(&tape, &net, &loss_cfg, &batch)?;
            sum_bd.ce_src += bd.ce_src;
            sum_bd.ce_tgt += bd.ce_tgt;
            sum_bd.inv_src += bd.inv_src;
            sum_bd.inv_tgt += bd.inv_tgt;
            total = Some(match total {
                None => sample_total,
                Some(acc) => tape.add(acc, sample_total)?,
            });
        }
        let b = cfg.batch_size as f64;
        let bd = LossBreakdown {
            ce_src: sum_bd.ce_src / b,
            ce_tgt: sum_bd.ce_tgt / b,
            inv_src: sum_bd.inv_src / b,
            inv_tgt: sum_bd.inv_tgt / b,
        };
        if let Some(term) = bd.non_finite_term() {
            return Err(Error::Numeric(format!(
                "non-finite loss term {term} at iteration {it}"
            )));
        }
        let root = tape.scale(total.expect("batch_size >= 1"), 1.0 / b);
        tape.backward(root)?;
        let grads: Vec<Tensor> = net
            .weights
            .iter()
            .zip(&net.biases)
            .flat_map(|(w, bvar)| [w, bvar])
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(&tape.shape_of(v)))
            })
            .collect();
        let lr_scale = lr_schedule(it, warmup, cfg.iterations);
        step_ordered(&mut state, &grads, cfg, lr_scale)?;
        ema_update(&mut state.teacher, &state.student, cfg.ema_alpha)?;
        state.iter = it;

        rows.push(MetricsRow {
            iter: it,
            loss_total: bd.total(&loss_cfg),
            loss_ce_src: bd.ce_src,
            loss_ce_tgt: bd.ce_tgt,
            loss_inv_src: bd.inv_src,
            loss_inv_tgt: bd.inv_tgt,
            q_weight: sum_q / b,
            lr: cfg.lr_encoder * lr_scale,
        });
    }
    Ok((state, rows))
}

fn step_ordered(
    state: &mut TrainState,
    grads: &[Tensor],
    cfg: &ExperimentConfig,
    lr_scale: f64,
) -> Result<()> {
    state.opt.step(
        &mut state.student,
        grads,
        cfg.lr_encoder,
        cfg.lr_decoder,
        lr_scale,
    )
}

/// Evaluate a parameter set on a labeled split.
pub fn evaluate(params: &SegNetParams, dataset: &Dataset, split: Split) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("no scenes in split {}", split.name())));
    }
    for idx in indices {
        let image = dataset.image(idx);
        let truth = dataset.labels(idx)?;
        let tape = Tape::new();
        let net = segnet::register(&tape, params, false);
        let logits = segnet::forward(&tape, &net, image_leaf(&tape, image))?;
        let pred = tape.with_value(logits, |t| {
            argmax_with_confidence(t.data(), image.height, image.width, 0.5).0
        });
        cm.update(&pred, truth)?;
    }
    Ok(cm)
}
