//! Shallow stylization mappings: the output carries the content of the first
//! image and the style of the second. FDA swaps the low-frequency Fourier
//! amplitude, Reinhard transfer matches lαβ statistics, and color jitter is a
//! seeded photometric perturbation that ignores the style argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::Spectrum;
use crate::image::Image;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StyleMethod {
    Fda,
    Reinhard,
    Jitter,
}

impl StyleMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fda" => Ok(StyleMethod::Fda),
            "reinhard" => Ok(StyleMethod::Reinhard),
            "jitter" => Ok(StyleMethod::Jitter),
            other => Err(Error::Config(format!(
                "unknown stylization method '{other}' (expected fda|reinhard|jitter)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StyleMethod::Fda => "fda",
            StyleMethod::Reinhard => "reinhard",
            StyleMethod::Jitter => "jitter",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleConfig {
    pub method: StyleMethod,
    /// FDA low-frequency bandwidth, in [0,1].
    pub beta: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    /// Hue shift range in cycles.
    pub jitter_hue: f64,
    /// Per-perturbation application probability.
    pub jitter_prob: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            method: StyleMethod::Reinhard,
            beta: 0.06,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            jitter_hue: 0.05,
            jitter_prob: 0.5,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0,1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.jitter_prob) {
            return Err(Error::Config(format!(
                "jitter probability {} outside [0,1]",
                self.jitter_prob
            )));
        }
        Ok(())
    }
}

/// Apply the configured stylization g(content, style).
pub fn apply(cfg: &StyleConfig, content: &Image, style: &Image, seed: u64) -> Result<Image> {
    match cfg.method {
        StyleMethod::Fda => fda_stylize(content, style, cfg.beta),
        StyleMethod::Reinhard => Ok(reinhard_transfer(content, style)),
        StyleMethod::Jitter => Ok(color_jitter(content, seed, cfg)),
    }
}

/// Ideal low-pass mask in the corner (unshifted) spectrum convention:
/// with b = floor(beta * min(H,W)), each corner holds a b×b block of ones.
pub fn lowpass_mask(h: usize, w: usize, beta: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0,1]")));
    }
    let b = (beta * h.min(w) as f64).floor() as usize;
    let low = |idx: usize, n: usize| idx < b || idx + b >= n;
    let mut mask = vec![false; h * w];
    for u in 0..h {
        for v in 0..w {
            mask[u * w + v] = low(u, h) && low(v, w);
        }
    }
    Ok(mask)
}

/// FDA: per channel, replace the low-frequency amplitude of the content with
/// the style's, keep the content phase, invert and clamp.
pub fn fda_stylize(content: &Image, style: &Image, beta: f64) -> Result<Image> {
    if content.height != style.height || content.width != style.width {
        return Err(Error::Shape(format!(
            "fda_stylize: content {}x{} vs style {}x{}",
            content.height, content.width, style.height, style.width
        )));
    }
    let (h, w) = (content.height, content.width);
    let mask = lowpass_mask(h, w, beta)?;
    let mut out = Image::zeros(h, w);
    for c in 0..3 {
        let spec_c = Spectrum::forward(content.channel(c), h, w);
        let spec_s = Spectrum::forward(style.channel(c), h, w);
        let amp_c = spec_c.amplitude();
        let amp_s = spec_s.amplitude();
        let phase = spec_c.phase();
        let mixed: Vec<f64> = mask
            .iter()
            .zip(amp_c.iter().zip(&amp_s))
            .map(|(&m, (&ac, &as_))| if m { as_ } else { ac })
            .collect();
        let rebuilt = Spectrum::inverse_from(&mixed, &phase, h, w);
        out.channel_mut(c).copy_from_slice(&rebuilt);
    }
    out.clamp_unit();
    Ok(out)
}

// Reinhard et al. color transfer constants: RGB -> LMS, log10, -> lab,
// statistics remap, and the inverse chain.
const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
// Exact inverse of RGB_TO_LMS. The rounded inverse printed in the original
// color-transfer paper only inverts the forward matrix to ~7e-3, which would
// break the self-transfer identity; the exact inverse keeps the round trip
// tight while the forward constants stay verbatim.
const LMS_TO_RGB: [[f64; 3]; 3] = [
    [4.4686698634962552, -3.5886759034721267, 0.11960436657860116],
    [-1.2197166276177631, 2.3830879129554567, -0.16263011175140055],
    [0.058508476938545856, -0.26107843902769368, 1.2056659085256229],
];
const LMS_LOG_FLOOR: f64 = 1e-6;

fn mat_apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn lab_from_log_lms(l: [f64; 3]) -> [f64; 3] {
    let s3 = 1.0 / 3f64.sqrt();
    let s6 = 1.0 / 6f64.sqrt();
    let s2 = 1.0 / 2f64.sqrt();
    [
        s3 * (l[0] + l[1] + l[2]),
        s6 * (l[0] + l[1] - 2.0 * l[2]),
        s2 * (l[0] - l[1]),
    ]
}

fn log_lms_from_lab(lab: [f64; 3]) -> [f64; 3] {
    let s3 = 3f64.sqrt() / 3.0;
    let s6 = 6f64.sqrt() / 6.0;
    let s2 = 2f64.sqrt() / 2.0;
    [
        s3 * lab[0] + s6 * lab[1] + s2 * lab[2],
        s3 * lab[0] + s6 * lab[1] - s2 * lab[2],
        s3 * lab[0] - 2.0 * s6 * lab[1],
    ]
}

/// lαβ coordinates of a single RGB pixel.
pub(crate) fn lab_from_rgb_px(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_apply(&RGB_TO_LMS, rgb);
    let log_lms = [
        lms[0].max(LMS_LOG_FLOOR).log10(),
        lms[1].max(LMS_LOG_FLOOR).log10(),
        lms[2].max(LMS_LOG_FLOOR).log10(),
    ];
    lab_from_log_lms(log_lms)
}

/// RGB pixel from lαβ coordinates (no clamping).
pub(crate) fn rgb_from_lab_px(lab: [f64; 3]) -> [f64; 3] {
    let log_lms = log_lms_from_lab(lab);
    let lms = [
        10f64.powf(log_lms[0]),
        10f64.powf(log_lms[1]),
        10f64.powf(log_lms[2]),
    ];
    mat_apply(&LMS_TO_RGB, lms)
}

/// Per-pixel lαβ coordinates of an image (log-LMS decorrelated space).
pub fn image_to_lab(img: &Image) -> Vec<[f64; 3]> {
    let hw = img.height * img.width;
    (0..hw)
        .map(|p| {
            let rgb = [img.data()[p], img.data()[hw + p], img.data()[2 * hw + p]];
            lab_from_rgb_px(rgb)
        })
        .collect()
}

fn lab_stats(lab: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = lab.len() as f64;
    let mut mean = [0.0; 3];
    for px in lab {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 3];
    for px in lab {
        for c in 0..3 {
            let d = px[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = [
        (var[0] / n).sqrt(),
        (var[1] / n).sqrt(),
        (var[2] / n).sqrt(),
    ];
    (mean, std)
}

/// Reinhard color transfer: match per-channel lαβ mean and std of the content
/// to the style. Channels with near-zero content std keep unit scale.
pub fn reinhard_transfer(content: &Image, style: &Image) -> Image {
    let lab_c = image_to_lab(content);
    let lab_s = image_to_lab(style);
    let (mu_c, sd_c) = lab_stats(&lab_c);
    let (mu_s, sd_s) = lab_stats(&lab_s);
    let scale: Vec<f64> = (0..3)
        .map(|c| if sd_c[c] < 1e-6 { 1.0 } else { sd_s[c] / sd_c[c] })
        .collect();
    let hw = content.height * content.width;
    let mut out = Image::zeros(content.height, content.width);
    for (p, px) in lab_c.iter().enumerate() {
        let mut lab = [0.0; 3];
        for c in 0..3 {
            lab[c] = (px[c] - mu_c[c]) * scale[c] + mu_s[c];
        }
        let rgb = rgb_from_lab_px(lab);
        for c in 0..3 {
            out.data_mut()[c * hw + p] = rgb[c];
        }
    }
    out.clamp_unit();
    out
}

// ---- color jitter ----

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn luminance(img: &Image, p: usize) -> f64 {
    let hw = img.height * img.width;
    0.299 * img.data()[p] + 0.587 * img.data()[hw + p] + 0.114 * img.data()[2 * hw + p]
}

pub(crate) fn apply_brightness(img: &mut Image, factor: f64) {
    for v in img.data_mut().iter_mut() {
        *v *= factor;
    }
    img.clamp_unit();
}

pub(crate) fn apply_contrast(img: &mut Image, factor: f64) {
    let hw = img.height * img.width;
    let mean: f64 = (0..hw).map(|p| luminance(img, p)).sum::<f64>() / hw as f64;
    for v in img.data_mut().iter_mut() {
        *v = (*v - mean) * factor + mean;
    }
    img.clamp_unit();
}

pub(crate) fn apply_saturation(img: &mut Image, factor: f64) {
    let hw = img.height * img.width;
    for p in 0..hw {
        let gray = luminance(img, p);
        for c in 0..3 {
            let v = img.data()[c * hw + p];
            img.data_mut()[c * hw + p] = gray + (v - gray) * factor;
        }
    }
    img.clamp_unit();
}

pub(crate) fn apply_hue_shift(img: &mut Image, cycles: f64) {
    let hw = img.height * img.width;
    for p in 0..hw {
        let (r, g, b) = (
            img.data()[p],
            img.data()[hw + p],
            img.data()[2 * hw + p],
        );
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r2, g2, b2) = hsv_to_rgb(h + cycles, s, v);
        img.data_mut()[p] = r2;
        img.data_mut()[hw + p] = g2;
        img.data_mut()[2 * hw + p] = b2;
    }
    img.clamp_unit();
}

/// Seeded color jitter: brightness, contrast, saturation, hue, each applied
/// independently with the configured probability. Zero-strength perturbations
/// are skipped so they are exact identities.
pub fn color_jitter(image: &Image, seed: u64, cfg: &StyleConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    if cfg.jitter_brightness > 0.0 && rng.gen::<f64>() < cfg.jitter_prob {
        let f = rng.gen_range(1.0 - cfg.jitter_brightness..=1.0 + cfg.jitter_brightness);
        apply_brightness(&mut out, f);
    }
    if cfg.jitter_contrast > 0.0 && rng.gen::<f64>() < cfg.jitter_prob {
        let f = rng.gen_range(1.0 - cfg.jitter_contrast..=1.0 + cfg.jitter_contrast);
        apply_contrast(&mut out, f);
    }
    if cfg.jitter_saturation > 0.0 && rng.gen::<f64>() < cfg.jitter_prob {
        let f = rng.gen_range(1.0 - cfg.jitter_saturation..=1.0 + cfg.jitter_saturation);
        apply_saturation(&mut out, f);
    }
    if cfg.jitter_hue > 0.0 && rng.gen::<f64>() < cfg.jitter_prob {
        let d = rng.gen_range(-cfg.jitter_hue..=cfg.jitter_hue);
        apply_hue_shift(&mut out, d);
    }
    out
}
