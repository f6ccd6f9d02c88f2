//! Run configuration: flat `key = value` files with `#` comments.
//! Unknown keys are rejected so typos fail fast.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::{CombinedMode, LossWeights};
use crate::network::MsrfNetConfig;
use crate::subnet::SubnetVariant;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub net: MsrfNetConfig,
    pub weights: LossWeights,
    pub loss_mode: CombinedMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Extra checkpoint every N epochs (0 = only the best-validation one).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: MsrfNetConfig::default(),
            weights: LossWeights::default(),
            loss_mode: CombinedMode::Both,
            epochs: 200,
            batch_size: 4,
            lr: 1e-4,
            seed: 42,
            data_root: None,
            out_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", lineno + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(format!("invalid value `{}` for {}", value, key)))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::config(format!("invalid boolean `{}` for {}", value, key))),
            }
        }
        fn list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
            let parts: Vec<usize> = value
                .split(',')
                .map(|p| num::<usize>(key, p.trim()))
                .collect::<Result<_>>()?;
            parts.try_into().map_err(|_| {
                Error::config(format!("{} expects {} comma-separated integers", key, N))
            })
        }
        match key {
            "input_height" => self.net.input_h = num(key, value)?,
            "input_width" => self.net.input_w = num(key, value)?,
            "input_channels" => self.net.input_ch = num(key, value)?,
            "widths" => self.net.widths = list::<4>(key, value)?,
            "growth" => self.net.growth = list::<3>(key, value)?,
            "dropout" => self.net.dropout = num(key, value)?,
            "w" => self.net.w = num(key, value)?,
            "leaky_slope" => self.net.leaky_slope = num(key, value)?,
            "se_reduction" => self.net.se_reduction = num(key, value)?,
            "shape_channels" => self.net.shape_channels = num(key, value)?,
            "shape_stream" => self.net.shape_stream = boolean(key, value)?,
            "deep_supervision" => self.net.deep_supervision = boolean(key, value)?,
            "decoder_attention" => self.net.decoder_attention = boolean(key, value)?,
            "subnet_variant" => self.net.subnet_variant = SubnetVariant::parse(value)?,
            "lambda1" => self.weights.lambda1 = num(key, value)?,
            "lambda2" => self.weights.lambda2 = num(key, value)?,
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta1" => self.weights.beta1 = num(key, value)?,
            "beta2" => self.weights.beta2 = num(key, value)?,
            "gamma" => self.weights.gamma = num(key, value)?,
            "loss_mode" => self.loss_mode = CombinedMode::parse(value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(Error::config(format!("unknown key `{}`", other))),
        }
        Ok(())
    }

    /// Serializes back to the `key = value` format (used by `synth` to drop
    /// a ready-to-train config next to the generated dataset).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = &self.net;
        let _ = writeln!(s, "input_height = {}", n.input_h);
        let _ = writeln!(s, "input_width = {}", n.input_w);
        let _ = writeln!(s, "input_channels = {}", n.input_ch);
        let _ = writeln!(s, "widths = {},{},{},{}", n.widths[0], n.widths[1], n.widths[2], n.widths[3]);
        let _ = writeln!(s, "growth = {},{},{}", n.growth[0], n.growth[1], n.growth[2]);
        let _ = writeln!(s, "dropout = {}", n.dropout);
        let _ = writeln!(s, "w = {}", n.w);
        let _ = writeln!(s, "leaky_slope = {}", n.leaky_slope);
        let _ = writeln!(s, "se_reduction = {}", n.se_reduction);
        let _ = writeln!(s, "shape_channels = {}", n.shape_channels);
        let _ = writeln!(s, "shape_stream = {}", n.shape_stream);
        let _ = writeln!(s, "deep_supervision = {}", n.deep_supervision);
        let _ = writeln!(s, "decoder_attention = {}", n.decoder_attention);
        let _ = writeln!(s, "subnet_variant = {}", n.subnet_variant.name());
        let w = &self.weights;
        let _ = writeln!(s, "lambda1 = {}", w.lambda1);
        let _ = writeln!(s, "lambda2 = {}", w.lambda2);
        let _ = writeln!(s, "alpha = {}", w.alpha);
        let _ = writeln!(s, "beta1 = {}", w.beta1);
        let _ = writeln!(s, "beta2 = {}", w.beta2);
        let _ = writeln!(s, "gamma = {}", w.gamma);
        let _ = writeln!(s, "loss_mode = {}", self.loss_mode.name());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(p) = &self.data_root {
            let _ = writeln!(s, "data_root = {}", p.display());
        }
        if let Some(p) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", p.display());
        }
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }
}
