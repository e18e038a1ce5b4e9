//! Experiment configuration: flat `key = value` text with `#` comments.
//! Unknown keys are rejected and every value is validated on load.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::stylize::{StyleConfig, StyleMethod};
use crate::uda::{InvarianceNorm, InvariancePoint, LossConfig, LossVariant};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_src_train: usize,
    pub n_tgt_train: usize,
    pub n_val: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub variant: LossVariant,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub style_method: StyleMethod,
    pub invariance_point: InvariancePoint,
    pub invariance_norm: InvarianceNorm,
    pub tau: f64,
    pub ema_alpha: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub dacs_prob: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub jitter_prob: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let style = StyleConfig::default();
        ExperimentConfig {
            master_seed: 42,
            n_src_train: 80,
            n_tgt_train: 80,
            n_val: 32,
            iterations: 2000,
            batch_size: 1,
            variant: LossVariant::Ciss,
            lambda_s: 2.0,
            lambda_t: 2.0,
            beta: style.beta,
            style_method: style.method,
            invariance_point: InvariancePoint::Encoder,
            invariance_norm: InvarianceNorm::FrobeniusSq,
            tau: 0.968,
            ema_alpha: 0.999,
            lr_encoder: 6e-3,
            lr_decoder: 2.4e-2,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            dacs_prob: 0.5,
            jitter_brightness: style.jitter_brightness,
            jitter_contrast: style.jitter_contrast,
            jitter_saturation: style.jitter_saturation,
            jitter_hue: style.jitter_hue,
            jitter_prob: style.jitter_prob,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{value}'")))
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "master_seed" => self.master_seed = parse_num(key, value)?,
            "n_src_train" => self.n_src_train = parse_num(key, value)?,
            "n_tgt_train" => self.n_tgt_train = parse_num(key, value)?,
            "n_val" => self.n_val = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "variant" => self.variant = LossVariant::parse(value)?,
            "lambda_s" => self.lambda_s = parse_num(key, value)?,
            "lambda_t" => self.lambda_t = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "style_method" => self.style_method = StyleMethod::parse(value)?,
            "invariance_point" => self.invariance_point = InvariancePoint::parse(value)?,
            "invariance_norm" => self.invariance_norm = InvarianceNorm::parse(value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "ema_alpha" => self.ema_alpha = parse_num(key, value)?,
            "lr_encoder" => self.lr_encoder = parse_num(key, value)?,
            "lr_decoder" => self.lr_decoder = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "warmup_frac" => self.warmup_frac = parse_num(key, value)?,
            "dacs_prob" => self.dacs_prob = parse_num(key, value)?,
            "jitter_brightness" => self.jitter_brightness = parse_num(key, value)?,
            "jitter_contrast" => self.jitter_contrast = parse_num(key, value)?,
            "jitter_saturation" => self.jitter_saturation = parse_num(key, value)?,
            "jitter_hue" => self.jitter_hue = parse_num(key, value)?,
            "jitter_prob" => self.jitter_prob = parse_num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "master_seed = {}\n\
             n_src_train = {}\n\
             n_tgt_train = {}\n\
             n_val = {}\n\
             iterations = {}\n\
             batch_size = {}\n\
             variant = {}\n\
             lambda_s = {}\n\
             lambda_t = {}\n\
             beta = {}\n\
             style_method = {}\n\
             invariance_point = {}\n\
             invariance_norm = {}\n\
             tau = {}\n\
             ema_alpha = {}\n\
             lr_encoder = {}\n\
             lr_decoder = {}\n\
             weight_decay = {}\n\
             warmup_frac = {}\n\
             dacs_prob = {}\n\
             jitter_brightness = {}\n\
             jitter_contrast = {}\n\
             jitter_saturation = {}\n\
             jitter_hue = {}\n\
             jitter_prob = {}\n\
             data_dir = {}\n\
             out_dir = {}\n",
            self.master_seed,
            self.n_src_train,
            self.n_tgt_train,
            self.n_val,
            self.iterations,
            self.batch_size,
            self.variant.name(),
            self.lambda_s,
            self.lambda_t,
            self.beta,
            self.style_method.name(),
            self.invariance_point.name(),
            self.invariance_norm.name(),
            self.tau,
            self.ema_alpha,
            self.lr_encoder,
            self.lr_decoder,
            self.weight_decay,
            self.warmup_frac,
            self.dacs_prob,
            self.jitter_brightness,
            self.jitter_contrast,
            self.jitter_saturation,
            self.jitter_hue,
            self.jitter_prob,
            self.data_dir.display(),
            self.out_dir.display(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")))
            }
        };
        if self.n_src_train == 0 || self.n_tgt_train == 0 || self.n_val == 0 {
            return Err(Error::Config("dataset split sizes must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        positive("lambda_s", self.lambda_s)?;
        positive("lambda_t", self.lambda_t)?;
        positive("lr_encoder", self.lr_encoder)?;
        positive("lr_decoder", self.lr_decoder)?;
        positive("weight_decay", self.weight_decay)?;
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0,1]",
                self.warmup_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.dacs_prob) {
            return Err(Error::Config(format!(
                "dacs_prob {} outside [0,1]",
                self.dacs_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!(
                "ema_alpha {} outside [0,1]",
                self.ema_alpha
            )));
        }
        let c = crate::synthscenes::NUM_CLASSES as f64;
        if self.tau <= 1.0 / c || self.tau >= 1.0 {
            return Err(Error::Config(format!(
                "tau {} must lie in (1/{c}, 1)",
                self.tau
            )));
        }
        self.style_config().validate()?;
        self.loss_config().validate()
    }

    pub fn style_config(&self) -> StyleConfig {
        StyleConfig {
            method: self.style_method,
            beta: self.beta,
            jitter_brightness: self.jitter_brightness,
            jitter_contrast: self.jitter_contrast,
            jitter_saturation: self.jitter_saturation,
            jitter_hue: self.jitter_hue,
            jitter_prob: self.jitter_prob,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            variant: self.variant,
            lambda_s: self.lambda_s,
            lambda_t: self.lambda_t,
            invariance_point: self.invariance_point,
            invariance_norm: self.invariance_norm,
            style: self.style_config(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.master_seed = 7;
        cfg.variant = LossVariant::Basic;
        cfg.lambda_s = 0.25;
        cfg.invariance_point = InvariancePoint::Output;
        let parsed = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed.to_text(), cfg.to_text());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\nmaster_seed = 9  # trailing comment\n",
        )
        .unwrap();
        assert_eq!(cfg.master_seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("learning_rate = 0.1\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::parse("tau = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("batch_size = 0\n").is_err());
        assert!(ExperimentConfig::parse("variant = nonsense\n").is_err());
        assert!(ExperimentConfig::parse("lambda_s = -1\n").is_err());
        assert!(ExperimentConfig::parse("master_seed\n").is_err());
    }
}
