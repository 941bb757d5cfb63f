//! The novelty detection head.
//!
//! Four dense ReLU layers map a proposal feature `x` to an embedding `z`; a
//! bias-free projection `w` maps `z` to the score `nu = sigmoid(w . z)`.
//!
//! The score path can be wired two ways at backward time:
//! - [`ScorePath::Detached`]: the score's gradient reaches `w` only, the
//!   embedding never sees it (stop-gradient on `z`).
//! - [`ScorePath::Attached`]: the score's gradient flows through the whole
//!   network, which is then an ordinary binary classifier.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const HIDDEN_LAYERS: usize = 4;
pub const DEFAULT_WIDTHS: [usize; HIDDEN_LAYERS] = [512, 256, 128, 128];

const CHECKPOINT_MAGIC: [u8; 4] = *b"ONDM";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(fan_in, fan_out)`, so a batch forward is `x.dot(&weight)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdModel {
    pub hidden: Vec<Dense>,
    pub projection: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixup {
    #[default]
    Off,
    Input,
    Manifold,
}

impl std::str::FromStr for Mixup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Mixup::Off),
            "input" => Ok(Mixup::Input),
            "manifold" => Ok(Mixup::Manifold),
            _ => Err(Error::InvalidConfig(format!("unknown mixup mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mixup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mixup::Off => "off",
            Mixup::Input => "input",
            Mixup::Manifold => "manifold",
        })
    }
}

/// Train-time regularizers. All are inactive in [`Mode::Eval`].
///
/// The mixup coefficient is drawn from `N(mixup_mu, mixup_variance)` and
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub dropout_p: f64,
    pub mixup: Mixup,
    pub mixup_mu: f64,
    pub mixup_variance: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            dropout_p: 0.0,
            mixup: Mixup::Off,
            mixup_mu: 0.5,
            mixup_variance: 0.2,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if !(self.mixup_variance >= 0.0) || !self.mixup_mu.is_finite() {
            return Err(Error::InvalidConfig("mixup distribution parameters invalid".into()));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.dropout_p == 0.0 && self.mixup == Mixup::Off
    }

    fn draw_lambda(&self, rng: &mut rng::Rng) -> f64 {
        let normal = Normal::new(self.mixup_mu, self.mixup_variance.sqrt()).expect("validated");
        normal.sample(rng).clamp(0.0, 1.0)
    }
}

/// A batch blend `(1 - lambda) * x_i + lambda * x_perm[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

impl MixPlan {
    pub fn draw(n: usize, reg: &RegularizerConfig, rng: &mut rng::Rng) -> Self {
        let lambda = reg.draw_lambda(rng);
        let mut partner: Vec<usize> = (0..n).collect();
        partner.shuffle(rng);
        Self { lambda, partner }
    }

    pub fn mix_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let shuffled = x.select(Axis(0), &self.partner);
        &x * (1.0 - self.lambda) + &shuffled * self.lambda
    }

    pub fn mix_labels(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.partner)
            .map(|(yi, &j)| (1.0 - self.lambda) * yi + self.lambda * y[j])
            .collect()
    }

    /// Transposed blend, for backpropagating through [`MixPlan::mix_rows`].
    fn unmix_grad(&self, d: &Array2<f64>) -> Array2<f64> {
        let mut out = d * (1.0 - self.lambda);
        for (i, &j) in self.partner.iter().enumerate() {
            let mut row = out.row_mut(j);
            row.scaled_add(self.lambda, &d.row(i));
        }
        out
    }
}

/// Input-level mixup over a batch with binary (or soft) labels.
pub fn apply_mixup(
    batch: ArrayView2<f64>,
    labels: &[f64],
    reg: &RegularizerConfig,
    seed: u64,
) -> Result<(Array2<f64>, Vec<f64>, MixPlan)> {
    if reg.mixup == Mixup::Off {
        return Err(Error::InvalidConfig("mixup is disabled".into()));
    }
    reg.validate()?;
    if batch.nrows() < 2 {
        return Err(Error::Insufficient("mixup needs a batch of at least 2".into()));
    }
    if labels.len() != batch.nrows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), batch.nrows())));
    }
    let plan = MixPlan::draw(batch.nrows(), reg, &mut rng::stream(seed, 20));
    Ok((plan.mix_rows(batch), plan.mix_labels(labels), plan))
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    /// Dropout keep mask, already scaled by `1 / (1 - p)`.
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Penultimate activations, one row per sample.
    pub z: Array2<f64>,
    /// `w . z` before the sigmoid.
    pub logits: Array1<f64>,
    pub nu: Array1<f64>,
    /// Set when manifold mixup blended the activations of a hidden layer.
    pub manifold_mix: Option<(usize, MixPlan)>,
    caches: Vec<LayerCache>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorePath {
    Detached,
    Attached,
}

/// Upstream gradients for [`NdModel::backward`].
///
/// `d_embedding` is `dL/dz`; `d_logit` is `dL/d(w . z)`, the gradient on the
/// pre-sigmoid score.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub d_embedding: Option<ArrayView2<'a, f64>>,
    pub d_logit: Option<ArrayView1<'a, f64>>,
    pub score_path: ScorePath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<Dense>,
    pub projection: Array1<f64>,
}

impl Gradients {
    /// Tensors in [`NdModel::parameters_mut`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * HIDDEN_LAYERS + 1);
        for d in &self.hidden {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out.push(self.projection.as_slice().expect("standard layout"));
        out
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds a Xavier-uniform initialized head; biases start at zero.
pub fn init_model(input_dim: usize, widths: &[usize], seed: u64) -> Result<NdModel> {
    if widths.len() != HIDDEN_LAYERS || widths.contains(&0) || input_dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "need {HIDDEN_LAYERS} positive hidden widths and input_dim >= 1, got {widths:?} / {input_dim}"
        )));
    }
    let mut rng = rng::stream(seed, 30);
    let mut fan_in = input_dim;
    let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
    for &w in widths {
        hidden.push(Dense {
            weight: xavier(fan_in, w, &mut rng),
            bias: Array1::zeros(w),
        });
        fan_in = w;
    }
    let projection = xavier(fan_in, 1, &mut rng).into_shape_with_order(fan_in).expect("column vector");
    Ok(NdModel { hidden, projection })
}

impl NdModel {
    pub fn input_dim(&self) -> usize {
        self.hidden[0].weight.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|d| d.bias.len()).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.len()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * HIDDEN_LAYERS + 1);
        for d in &mut self.hidden {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.projection.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * HIDDEN_LAYERS + 1);
        for d in &self.hidden {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out.push(self.projection.as_slice().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    fn head(&self, z: Array2<f64>, caches: Vec<LayerCache>, manifold_mix: Option<(usize, MixPlan)>) -> ForwardResult {
        let logits = z.dot(&self.projection);
        let nu = logits.mapv(sigmoid);
        ForwardResult {
            z,
            logits,
            nu,
            manifold_mix,
            caches,
        }
    }

    /// Eval-mode forward without the backward cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<ForwardResult> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let mut a = h.dot(&layer.weight);
            a += &layer.bias;
            a.mapv_inplace(|v| v.max(0.0));
            h = a;
        }
        Ok(self.head(h, Vec::new(), None))
    }

    /// Forward pass keeping what [`NdModel::backward`] needs.
    ///
    /// In train mode dropout follows every hidden activation and, with
    /// manifold mixup, one uniformly drawn hidden layer's output is blended.
    /// Eval mode ignores `reg` entirely.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, reg: &RegularizerConfig, seed: u64) -> Result<ForwardResult> {
        self.check_input(&x)?;
        let train = mode == Mode::Train;
        if train {
            reg.validate()?;
        }
        let mut rng = rng::stream(seed, 31);
        let manifold_layer = (train && reg.mixup == Mixup::Manifold && x.nrows() >= 2)
            .then(|| rng.random_range(0..HIDDEN_LAYERS));
        let mut manifold_mix = None;

        let mut caches = Vec::with_capacity(HIDDEN_LAYERS);
        let mut h = x.to_owned();
        for (l, layer) in self.hidden.iter().enumerate() {
            let mut pre = h.dot(&layer.weight);
            pre += &layer.bias;
            let mut out = relu(&pre);
            let mask = (train && reg.dropout_p > 0.0).then(|| {
                let keep = 1.0 - reg.dropout_p;
                let m = Array2::from_shape_simple_fn(out.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                out *= &m;
                m
            });
            if manifold_layer == Some(l) {
                let plan = MixPlan::draw(out.nrows(), reg, &mut rng);
                out = plan.mix_rows(out.view());
                manifold_mix = Some((l, plan));
            }
            caches.push(LayerCache { input: h, pre, mask });
            h = out;
        }
        Ok(self.head(h, caches, manifold_mix))
    }

    /// Parameter gradients for the given upstream gradients.
    pub fn backward(&self, fwd: &ForwardResult, upstream: Upstream<'_>) -> Result<Gradients> {
        if fwd.caches.len() != HIDDEN_LAYERS {
            return Err(Error::InvalidConfig("forward cache missing; use forward(), not predict()".into()));
        }
        let n = fwd.z.nrows();
        let mut projection = Array1::zeros(self.embedding_dim());
        let mut d_h: Array2<f64> = match upstream.d_embedding {
            Some(d) => {
                if d.dim() != fwd.z.dim() {
                    return Err(Error::ShapeMismatch(format!("d_embedding {:?} vs z {:?}", d.dim(), fwd.z.dim())));
                }
                d.to_owned()
            }
            None => Array2::zeros(fwd.z.raw_dim()),
        };
        if let Some(d_logit) = upstream.d_logit {
            if d_logit.len() != n {
                return Err(Error::ShapeMismatch(format!("d_logit has {} entries for {n} samples", d_logit.len())));
            }
            projection = fwd.z.t().dot(&d_logit);
            if upstream.score_path == ScorePath::Attached {
                Zip::from(d_h.rows_mut()).and(&d_logit).for_each(|mut row, &g| {
                    row.scaled_add(g, &self.projection);
                });
            }
        }

        let mut hidden: Vec<Dense> = Vec::with_capacity(HIDDEN_LAYERS);
        for (l, (layer, cache)) in self.hidden.iter().zip(&fwd.caches).enumerate().rev() {
            if let Some((ml, plan)) = &fwd.manifold_mix {
                if *ml == l {
                    d_h = plan.unmix_grad(&d_h);
                }
            }
            if let Some(mask) = &cache.mask {
                d_h *= mask;
            }
            Zip::from(&mut d_h).and(&cache.pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let d_weight = cache.input.t().dot(&d_h);
            let d_bias = d_h.sum_axis(Axis(0));
            if l > 0 {
                d_h = d_h.dot(&layer.weight.t());
            }
            hidden.push(Dense {
                weight: d_weight,
                bias: d_bias,
            });
        }
        hidden.reverse();
        Ok(Gradients { hidden, projection })
    }

    /// Checkpoint bytes: magic "ONDM", version u16, input dim u32, 4 widths
    /// u32, then every tensor in [`NdModel::parameters`] order as
    /// little-endian f64.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        for w in self.widths() {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for t in self.parameters() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let header_len = 4 + 2 + 4 * (1 + HIDDEN_LAYERS);
        if bytes.len() < header_len {
            return Err(Error::malformed("checkpoint", "shorter than its header"));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let input_dim = u32_at(6);
        let widths: Vec<usize> = (0..HIDDEN_LAYERS).map(|i| u32_at(10 + 4 * i)).collect();
        let mut model = init_model(input_dim, &widths, 0)?;
        let expected: usize = model.parameters().iter().map(|t| t.len()).sum();
        let payload = &bytes[header_len..];
        if payload.len() != 8 * expected {
            return Err(Error::malformed(
                "checkpoint",
                format!("payload is {} bytes, layout needs {}", payload.len(), 8 * expected),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for t in model.parameters_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Converts feature rows to the f64 matrix the head consumes.
pub fn feature_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, dim: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut m = Array2::zeros((n, dim));
    for (i, row) in rows.enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        for (dst, &src) in m.row_mut(i).iter_mut().zip(row) {
            *dst = src as f64;
        }
    }
    Ok(m)
}
