//! CT-level classifier heads trained on flattened slice-probability
//! features: logistic regression and a one-hidden-layer ReLU MLP, optimized
//! by mini-batch SGD or SAM on label-smoothed cross-entropy under a
//! warmup + cosine learning-rate schedule.
//!
//! Parameters live in one flat vector laid out as `W1` (row-major), `b1`,
//! then for the MLP `W2` (row-major) and `b2`. The same order is used by
//! the text model format.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::aggregate::{FeatureMatrix, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::types::Label;
use crate::util::seeded_rng;

/// Number of output classes (COVID, NON_COVID).
pub const CLASSES: usize = 2;
/// Hidden width of the MLP head.
pub const DEFAULT_HIDDEN: usize = 100;
/// Floor applied to probabilities inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Step of the central finite differences in [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    LogReg,
    Mlp,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::LogReg => "logreg",
            HeadKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "logreg" => Ok(HeadKind::LogReg),
            "mlp" => Ok(HeadKind::Mlp),
            other => Err(format!("unknown head kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    kind: HeadKind,
    input_dim: usize,
    hidden: usize,
    seed: u64,
    params: Vec<f64>,
}

fn param_count(kind: HeadKind, input_dim: usize, hidden: usize) -> usize {
    match kind {
        HeadKind::LogReg => CLASSES * input_dim + CLASSES,
        HeadKind::Mlp => hidden * input_dim + hidden + CLASSES * hidden + CLASSES,
    }
}

impl HeadModel {
    /// All-zero parameters. `hidden` is ignored for logistic regression.
    pub fn zeros(kind: HeadKind, input_dim: usize, hidden: usize) -> Result<Self> {
        let hidden = if kind == HeadKind::LogReg { 0 } else { hidden };
        if input_dim == 0 || (kind == HeadKind::Mlp && hidden == 0) {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        Ok(HeadModel {
            kind,
            input_dim,
            hidden,
            seed: 0,
            params: vec![0.0; param_count(kind, input_dim, hidden)],
        })
    }

    pub fn from_params(kind: HeadKind, input_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = HeadModel::zeros(kind, input_dim, hidden)?;
        if params.len() != m.params.len() {
            return Err(Error::DimensionMismatch {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite head parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init(kind: HeadKind, input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut m = HeadModel::zeros(kind, input_dim, hidden)?;
        m.seed = seed;
        let mut rng = seeded_rng(seed, &[b"init"]);
        let first = m.layer1_len();
        let b1 = 1.0 / (input_dim as f64).sqrt();
        for v in &mut m.params[..first] {
            *v = rng.random_range(-b1..=b1);
        }
        if kind == HeadKind::Mlp {
            let b2 = 1.0 / (m.hidden as f64).sqrt();
            for v in &mut m.params[first..] {
                *v = rng.random_range(-b2..=b2);
            }
        }
        Ok(m)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn out1(&self) -> usize {
        match self.kind {
            HeadKind::LogReg => CLASSES,
            HeadKind::Mlp => self.hidden,
        }
    }

    fn layer1_len(&self) -> usize {
        self.out1() * self.input_dim + self.out1()
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.out1() * self.input_dim]
    }

    pub fn b1(&self) -> &[f64] {
        &self.params[self.out1() * self.input_dim..self.layer1_len()]
    }

    pub fn w2(&self) -> Option<&[f64]> {
        (self.kind == HeadKind::Mlp).then(|| &self.params[self.layer1_len()..self.layer1_len() + CLASSES * self.hidden])
    }

    pub fn b2(&self) -> Option<&[f64]> {
        (self.kind == HeadKind::Mlp).then(|| &self.params[self.layer1_len() + CLASSES * self.hidden..])
    }

    /// `kind,dims,seed` header.
    fn header(&self) -> String {
        let dims = match self.kind {
            HeadKind::LogReg => format!("{}x{}", self.input_dim, CLASSES),
            HeadKind::Mlp => format!("{}x{}x{}", self.input_dim, self.hidden, CLASSES),
        };
        format!("{},{},{}", self.kind.as_str(), dims, self.seed)
    }

    /// Header line then one parameter per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for p in &self.params {
            writeln!(s, "{p:.16e}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let malformed = |line: usize, reason: String| Error::MalformedRecord { line, reason };
        let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty model file".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(1, format!("bad header {header:?}")));
        }
        let kind: HeadKind = fields[0].parse().map_err(|e| malformed(1, e))?;
        let dims = fields[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| malformed(1, format!("bad dims {:?}", fields[1])))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| malformed(1, format!("bad seed {:?}", fields[2])))?;
        let (input_dim, hidden) = match (kind, dims.as_slice()) {
            (HeadKind::LogReg, &[d, CLASSES]) => (d, 0),
            (HeadKind::Mlp, &[d, h, CLASSES]) => (d, h),
            _ => {
                return Err(malformed(
                    1,
                    format!("dims {:?} do not fit {}", fields[1], kind.as_str()),
                ))
            }
        };
        let params = lines
            .filter(|(_, l)| !l.is_empty())
            .map(|(n, l)| {
                l.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(n, format!("bad parameter {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = HeadModel::from_params(kind, input_dim, hidden, params)?;
        m.seed = seed;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        HeadModel::from_text(&text)
    }

    fn logits(&self, x: &[f64], hidden_act: &mut Vec<f64>) -> [f64; CLASSES] {
        let d = self.input_dim;
        let (w1, b1) = (self.w1(), self.b1());
        let out1 = self.out1();
        hidden_act.clear();
        hidden_act.extend((0..out1).map(|j| dot(&w1[j * d..(j + 1) * d], x) + b1[j]));
        match self.kind {
            HeadKind::LogReg => [hidden_act[0], hidden_act[1]],
            HeadKind::Mlp => {
                let h = self.hidden;
                let (w2, b2) = (self.w2().unwrap(), self.b2().unwrap());
                let act: Vec<f64> = hidden_act.iter().map(|&a| a.max(0.0)).collect();
                std::array::from_fn(|c| dot(&w2[c * h..(c + 1) * h], &act) + b2[c])
            }
        }
    }

    /// Class distribution `(p_covid, p_noncovid)` for a flat input vector.
    pub fn predict_vec(&self, x: &[f64]) -> Result<[f64; CLASSES]> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(softmax(self.logits(x, &mut Vec::new())))
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<Label> {
        let p = self.predict_vec(x)?;
        Ok(if p[0] >= p[1] { Label::Covid } else { Label::NonCovid })
    }
}

/// Forward pass on a feature matrix, flattened row-major.
pub fn predict_head(model: &HeadModel, features: &FeatureMatrix) -> Result<[f64; CLASSES]> {
    model.predict_vec(&features.flatten())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax<const N: usize>(z: [f64; N]) -> [f64; N] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn smoothed_target(target: usize, classes: usize, eps: f64) -> impl Fn(usize) -> f64 {
    let off = eps / classes as f64;
    let on = 1.0 - eps + off;
    move |c| if c == target { on } else { off }
}

/// Cross-entropy against the label-smoothed target
/// `q = (1 - eps) * onehot + eps / C`.
pub fn smoothed_cross_entropy(probs: &[f64], target: usize, eps: f64) -> Result<f64> {
    if probs.len() < 2 || target >= probs.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} classes with target {target}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("{probs:?}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::OutOfRange {
            what: "label_smoothing",
            value: eps,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(ce_unchecked(probs, target, eps))
}

fn ce_unchecked(probs: &[f64], target: usize, eps: f64) -> f64 {
    let q = smoothed_target(target, probs.len(), eps);
    -probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let w = q(c);
            if w == 0.0 {
                0.0
            } else {
                w * p.max(LOG_FLOOR).ln()
            }
        })
        .sum::<f64>()
}

/// One training example: flat features and class index.
pub type Example<'a> = (&'a [f64], usize);

/// Mean smoothed cross-entropy over `batch`.
pub fn batch_loss(model: &HeadModel, batch: &[Example<'_>], eps: f64) -> f64 {
    let mut scratch = Vec::new();
    let total: f64 = batch
        .iter()
        .map(|&(x, y)| ce_unchecked(&softmax(model.logits(x, &mut scratch)), y, eps))
        .sum();
    total / batch.len() as f64
}

/// Mean loss and its analytic gradient over the flat parameter vector.
pub fn loss_and_gradient(model: &HeadModel, batch: &[Example<'_>], eps: f64) -> (f64, Vec<f64>) {
    let d = model.input_dim;
    let out1 = model.out1();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let mut pre = Vec::with_capacity(out1);
    let l1 = model.layer1_len();
    let (gl1, gl2) = grad.split_at_mut(l1);
    let (gw1, gb1) = gl1.split_at_mut(out1 * d);

    for &(x, y) in batch {
        let z = model.logits(x, &mut pre);
        let p = softmax(z);
        loss += ce_unchecked(&p, y, eps);
        let q = smoothed_target(y, CLASSES, eps);
        let dz: [f64; CLASSES] = std::array::from_fn(|c| (p[c] - q(c)) / n);

        // gradient with respect to the first layer's outputs
        let da: Vec<f64> = match model.kind {
            HeadKind::LogReg => dz.to_vec(),
            HeadKind::Mlp => {
                let h = model.hidden;
                let w2 = model.w2().unwrap();
                let (gw2, gb2) = gl2.split_at_mut(CLASSES * h);
                for c in 0..CLASSES {
                    gb2[c] += dz[c];
                    for j in 0..h {
                        gw2[c * h + j] += dz[c] * pre[j].max(0.0);
                    }
                }
                (0..h)
                    .map(|j| {
                        if pre[j] > 0.0 {
                            (0..CLASSES).map(|c| w2[c * h + j] * dz[c]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        for (j, &g) in da.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb1[j] += g;
            for (w, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
    (loss / n, grad)
}

/// Largest relative error `|g_a - g_n| / max(1, |g_a|, |g_n|)` between the
/// analytic gradient and central finite differences over every parameter.
pub fn grad_check(model: &HeadModel, batch: &[Example<'_>], eps: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &(x, y) in batch {
        if x.len() != model.input_dim {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim,
                got: x.len(),
            });
        }
        if y >= CLASSES {
            return Err(Error::InvalidConfig(format!("class index {y}")));
        }
    }
    let (_, analytic) = loss_and_gradient(model, batch, eps);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &ga) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let up = batch_loss(&probe, batch, eps);
        probe.params[i] = orig - FD_STEP;
        let down = batch_loss(&probe, batch, eps);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !numeric.is_finite() || !ga.is_finite() {
            return Err(Error::NonFiniteGradient(i));
        }
        let rel = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// SAM neighbourhood radius; 0 trains with plain SGD.
    pub sam_rho: f64,
    pub seed: u64,
    /// MLP hidden width.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr_init: 1e-3,
            warmup_epochs: 5,
            batch_size: 32,
            label_smoothing: 0.1,
            sam_rho: 0.05,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(self.sam_rho >= 0.0 && self.sam_rho.is_finite()) {
            return bad("sam_rho must be >= 0");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_epochs`, then half-cosine decay reaching zero
/// at `epochs`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::OutOfRange {
            what: "epoch",
            value: epoch as f64,
            lo: 0.0,
            hi: cfg.epochs as f64,
        });
    }
    if cfg.warmup_epochs >= cfg.epochs {
        return Err(Error::InvalidConfig("warmup_epochs must be smaller than epochs".into()));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr_init * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let progress = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
    Ok(cfg.lr_init * 0.5 * (1.0 + (PI * progress).cos()))
}

pub trait Optimizer {
    /// Applies one update for `batch`; returns the loss at the starting
    /// parameters.
    fn step(&mut self, model: &mut HeadModel, batch: &[Example<'_>], eps: f64, lr: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, model: &mut HeadModel, batch: &[Example<'_>], eps: f64, lr: f64) -> f64 {
        let (loss, g) = loss_and_gradient(model, batch, eps);
        for (p, gi) in model.params.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        loss
    }
}

/// Sharpness-aware minimization on top of SGD: the gradient is evaluated at
/// `theta + rho * g / ||g||` and applied at `theta`.
#[derive(Debug, Clone, Copy)]
pub struct Sam {
    pub rho: f64,
}

impl Optimizer for Sam {
    fn step(&mut self, model: &mut HeadModel, batch: &[Example<'_>], eps: f64, lr: f64) -> f64 {
        let (loss, g) = loss_and_gradient(model, batch, eps);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let origin = model.params.clone();
        if norm > 0.0 {
            let scale = self.rho / norm;
            for (p, gi) in model.params.iter_mut().zip(&g) {
                *p += scale * gi;
            }
        }
        let (_, g_sharp) = loss_and_gradient(model, batch, eps);
        model.params = origin;
        for (p, gi) in model.params.iter_mut().zip(&g_sharp) {
            *p -= lr * gi;
        }
        loss
    }
}

fn training_set<'a>(xs: &'a [Vec<f64>], labels: &[Label]) -> Result<Vec<Example<'a>>> {
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: labels.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig("need at least two training examples".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateLabels);
    }
    let d = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(xs.iter().zip(labels).map(|(x, l)| (x.as_slice(), l.index())).collect())
}

/// Trains with an explicit optimizer, calling `on_step` with the step
/// counter and parameters after every update.
pub fn train_with<O: Optimizer>(
    xs: &[Vec<f64>],
    labels: &[Label],
    kind: HeadKind,
    cfg: &TrainConfig,
    optimizer: &mut O,
    mut on_step: impl FnMut(usize, &HeadModel),
) -> Result<HeadModel> {
    cfg.validate()?;
    let data = training_set(xs, labels)?;
    let mut model = HeadModel::init(kind, data[0].0.len(), cfg.hidden, cfg.seed)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(cfg.seed, &[b"shuffle", &epoch.to_le_bytes()]));
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            let loss = optimizer.step(&mut model, &batch, cfg.label_smoothing, lr);
            if !loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            on_step(step, &model);
            step += 1;
        }
    }
    Ok(model)
}

/// Trains on flat feature vectors with SAM when `sam_rho > 0`, else SGD.
pub fn train_on_vectors(xs: &[Vec<f64>], labels: &[Label], kind: HeadKind, cfg: &TrainConfig) -> Result<HeadModel> {
    if cfg.sam_rho > 0.0 {
        train_with(xs, labels, kind, cfg, &mut Sam { rho: cfg.sam_rho }, |_, _| {})
    } else {
        train_with(xs, labels, kind, cfg, &mut Sgd, |_, _| {})
    }
}

pub fn train_head(
    features: &[FeatureMatrix],
    labels: &[Label],
    kind: HeadKind,
    cfg: &TrainConfig,
) -> Result<HeadModel> {
    let xs: Vec<Vec<f64>> = features.iter().map(FeatureMatrix::flatten).collect();
    debug_assert!(xs.iter().all(|x| x.len() == FEATURE_DIM));
    train_on_vectors(&xs, labels, kind, cfg)
}
