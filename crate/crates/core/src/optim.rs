//! Optimizers, learning-rate schedules, early stopping and the training
//! configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnet::{Mixup, RegularizerConfig, DEFAULT_WIDTHS, HIDDEN_LAYERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Contrastive embedding plus detached BCE projection, SGD.
    Iconp,
    /// End-to-end BCE classifier, Adam with early stopping.
    Ibce,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Iconp => "iconp",
            Method::Ibce => "ibce",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iconp" => Ok(Method::Iconp),
            "ibce" => Ok(Method::Ibce),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

/// Which schedule a session follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Session 0, trained from scratch.
    Initial,
    /// Sessions 1.., warm-started at `base_lr / incremental_lr_factor`.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    /// Peak rate after warmup (iConP) or initial rate (iBCE).
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stopping_window: usize,
    pub validation_fraction: f64,
    pub incremental_lr_factor: f64,
    pub incremental_epochs: usize,
    pub temperature: f64,
    pub widths: Vec<usize>,
    pub regularizer: RegularizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn iconp() -> Self {
        Self {
            method: Method::Iconp,
            batch_size: 512,
            base_lr: 0.005,
            warmup_start_lr: 0.01,
            epochs: 25,
            warmup_epochs: 10,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stopping_window: 5,
            validation_fraction: 0.1,
            incremental_lr_factor: 10.0,
            incremental_epochs: 15,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            widths: DEFAULT_WIDTHS.to_vec(),
            regularizer: RegularizerConfig::default(),
            seed: 0,
        }
    }

    pub fn ibce() -> Self {
        Self {
            method: Method::Ibce,
            base_lr: 0.0005,
            warmup_start_lr: 0.0005,
            warmup_epochs: 0,
            incremental_epochs: 5,
            ..Self::iconp()
        }
    }

    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Iconp => Self::iconp(),
            Method::Ibce => Self::ibce(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if !(self.base_lr > 0.0) || !(self.warmup_start_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.epochs == 0 || self.incremental_epochs == 0 {
            return bad("epoch counts must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.early_stopping_window == 0 {
            return bad("early_stopping_window must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)".into());
        }
        if !(self.incremental_lr_factor > 0.0) || !(self.temperature > 0.0) {
            return bad("incremental_lr_factor and temperature must be > 0".into());
        }
        if self.widths.len() != HIDDEN_LAYERS || self.widths.contains(&0) {
            return bad(format!("widths must be {HIDDEN_LAYERS} positive values"));
        }
        if self.method == Method::Iconp && self.regularizer.mixup != Mixup::Off {
            return bad("mixup needs soft labels, which only the ibce method supports".into());
        }
        self.regularizer.validate()
    }

    /// Sets one key from its textual value. Keys are the field names, with
    /// the regularizer flattened (`dropout_p`, `mixup`, ...).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
        }
        match key {
            "method" => self.method = value.trim().parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_start_lr" => self.warmup_start_lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "early_stopping_window" => self.early_stopping_window = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "incremental_lr_factor" => self.incremental_lr_factor = parse(key, value)?,
            "incremental_epochs" => self.incremental_epochs = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| parse(key, w))
                    .collect::<Result<_>>()?
            }
            "dropout_p" => self.regularizer.dropout_p = parse(key, value)?,
            "mixup" => self.regularizer.mixup = value.trim().parse()?,
            "mixup_mu" => self.regularizer.mixup_mu = parse(key, value)?,
            "mixup_variance" => self.regularizer.mixup_variance = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Builds a config from key/value pairs. A `method` key selects that
    /// method's defaults before the other keys apply.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let method = match pairs.iter().rev().find(|(k, _)| *k == "method") {
            Some((_, v)) => v.trim().parse()?,
            None => Method::Iconp,
        };
        let mut cfg = Self::for_method(method);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_key_values(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let entries: BTreeMap<&str, String> = [
            ("method", self.method.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_start_lr", self.warmup_start_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("early_stopping_window", self.early_stopping_window.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("incremental_lr_factor", self.incremental_lr_factor.to_string()),
            ("incremental_epochs", self.incremental_epochs.to_string()),
            ("temperature", self.temperature.to_string()),
            ("widths", widths.join(",")),
            ("dropout_p", self.regularizer.dropout_p.to_string()),
            ("mixup", self.regularizer.mixup.to_string()),
            ("mixup_mu", self.regularizer.mixup_mu.to_string()),
            ("mixup_variance", self.regularizer.mixup_variance.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .collect();
        let mut s = String::new();
        // method first so from_pairs picks the right defaults on re-read
        writeln!(s, "method={}", entries["method"]).unwrap();
        for (k, v) in entries.iter().filter(|(k, _)| **k != "method") {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn session_epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Initial => self.epochs,
            Phase::Incremental => self.incremental_epochs,
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed("config", format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn cosine(peak: f64, step: usize, span: usize) -> f64 {
    peak * (1.0 + (std::f64::consts::PI * step as f64 / span as f64).cos()) / 2.0
}

/// Learning rate for `epoch`, set before the epoch runs.
///
/// Initial phase: a linear ramp from `warmup_start_lr` to `base_lr` over
/// `warmup_epochs`, then cosine annealing from `base_lr` to 0 over the
/// remaining epochs. Incremental phase: cosine from
/// `base_lr / incremental_lr_factor` over `incremental_epochs`, no warmup.
pub fn lr_at(epoch: usize, cfg: &TrainConfig, phase: Phase) -> Result<f64> {
    let total = cfg.session_epochs(phase);
    if epoch >= total {
        return Err(Error::InvalidConfig(format!("epoch {epoch} outside 0..{total}")));
    }
    Ok(match phase {
        Phase::Initial if epoch < cfg.warmup_epochs => {
            let t = epoch as f64 / cfg.warmup_epochs as f64;
            cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t
        }
        Phase::Initial => cosine(cfg.base_lr, epoch - cfg.warmup_epochs, total - cfg.warmup_epochs),
        Phase::Incremental => cosine(cfg.base_lr / cfg.incremental_lr_factor, epoch, total),
    })
}

pub trait Optimizer {
    /// Updates `params` in place from `grads`; tensors pair up by position.
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()>;
}

fn check_shapes(state: &mut Vec<Vec<f64>>, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!("{} parameter tensors, {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!("tensor {i}: {} parameters, {} gradients", p.len(), g.len())));
        }
    }
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
    } else if state.len() != params.len() || state.iter().zip(params).any(|(s, p)| s.len() != p.len()) {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_shapes(&mut self.velocity, params, grads)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_shapes(&mut self.m, params, grads)?;
        check_shapes(&mut self.v, params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    pub best_epoch: usize,
}

/// Stops once the best (earliest minimal) validation loss is `window` or
/// more epochs behind the latest entry.
pub fn early_stop_check(history: &[f64], window: usize) -> Result<EarlyStop> {
    if history.is_empty() {
        return Err(Error::Empty("validation history"));
    }
    let best_epoch = history
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < history[best] { i } else { best });
    let since = history.len() - 1 - best_epoch;
    Ok(EarlyStop {
        stop: since >= window,
        best_epoch,
    })
}
