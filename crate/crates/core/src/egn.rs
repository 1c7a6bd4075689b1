//! Experience guidance network: a 4096 → 256 → 1 scorer.
//!
//! `y = sigmoid(W2 · dropout(relu(W1 x + b1)) + b2)`, trained with Adam on
//! mean squared error. Inputs are mostly binary and very sparse, so the
//! first layer is stored input-major and only non-zero inputs are visited.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fingerprint::Fingerprint;
use crate::problem::{egn_active_inputs, EGN_INPUT_DIM};

pub const INPUT_DIM: usize = EGN_INPUT_DIM;
pub const HIDDEN_DIM: usize = 256;
pub const PARAM_COUNT: usize = HIDDEN_DIM * INPUT_DIM + 2 * HIDDEN_DIM + 1;

/// Logit saturation; keeps the output strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

const WEIGHTS_MAGIC: &[u8; 4] = b"EGNW";
const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EgnError {
    #[error("input has dimension {0}, expected {INPUT_DIM}")]
    DimensionMismatch(usize),
    #[error("dropout mask has {0} entries, expected {HIDDEN_DIM}")]
    MaskMismatch(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Non-zero entries of an input vector, indices strictly ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseInput {
    entries: Vec<(u32, f64)>,
}

impl SparseInput {
    pub fn from_dense(x: &[f64]) -> Result<Self, EgnError> {
        if x.len() != INPUT_DIM {
            return Err(EgnError::DimensionMismatch(x.len()));
        }
        Ok(SparseInput {
            entries: x
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        })
    }

    /// Equivalent to `from_dense(&make_egn_input(mol, tmpl))`.
    pub fn from_fingerprints(mol: &Fingerprint, tmpl: &Fingerprint) -> Self {
        SparseInput {
            entries: egn_active_inputs(mol, tmpl)
                .into_iter()
                .map(|i| (i as u32, 1.0))
                .collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|&(i, v)| (i as usize, v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: SparseInput,
    pub target: f64,
}

/// Per-unit hidden-layer multipliers: 0 for dropped units, `1/(1-p)` for kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Vec<f64>);

impl DropoutMask {
    pub fn new(scales: Vec<f64>) -> Result<Self, EgnError> {
        if scales.len() != HIDDEN_DIM {
            return Err(EgnError::MaskMismatch(scales.len()));
        }
        Ok(DropoutMask(scales))
    }

    pub fn sample<R: Rng>(rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        DropoutMask(
            (0..HIDDEN_DIM)
                .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train(&'a DropoutMask),
}

/// Network parameters plus provenance metadata.
#[derive(Clone, PartialEq)]
pub struct EgnWeights {
    /// W1 stored input-major: `w1t[i * HIDDEN_DIM + j] = W1[j][i]`.
    w1t: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    pub version: u64,
    pub seed: u64,
    pub round: u32,
}

impl std::fmt::Debug for EgnWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EgnWeights")
            .field("version", &self.version)
            .field("seed", &self.seed)
            .field("round", &self.round)
            .finish_non_exhaustive()
    }
}

/// Gradient buffers, same layout as [`EgnWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1t: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    fn zeros() -> Self {
        Gradients {
            w1t: vec![0.0; HIDDEN_DIM * INPUT_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; HIDDEN_DIM],
            b2: 0.0,
        }
    }

    fn clear(&mut self) {
        self.w1t.par_chunks_mut(1 << 14).for_each(|c| c.fill(0.0));
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2 = 0.0;
    }

    /// Gradient at a flat parameter index (see [`EgnWeights::param`]).
    pub fn get(&self, idx: usize) -> f64 {
        match ParamRef::of(idx) {
            ParamRef::W1 { row, col } => self.w1t[col * HIDDEN_DIM + row],
            ParamRef::B1(j) => self.b1[j],
            ParamRef::W2(j) => self.w2[j],
            ParamRef::B2 => self.b2,
        }
    }
}

/// Location of a flat parameter index. Flat order is W1 row-major, then b1,
/// W2, b2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    W1 { row: usize, col: usize },
    B1(usize),
    W2(usize),
    B2,
}

impl ParamRef {
    pub fn of(idx: usize) -> Self {
        const W1_END: usize = HIDDEN_DIM * INPUT_DIM;
        match idx {
            i if i < W1_END => ParamRef::W1 {
                row: i / INPUT_DIM,
                col: i % INPUT_DIM,
            },
            i if i < W1_END + HIDDEN_DIM => ParamRef::B1(i - W1_END),
            i if i < W1_END + 2 * HIDDEN_DIM => ParamRef::W2(i - W1_END - HIDDEN_DIM),
            i if i == PARAM_COUNT - 1 => ParamRef::B2,
            i => panic!("parameter index {i} out of range"),
        }
    }

    pub fn flat(self) -> usize {
        match self {
            ParamRef::W1 { row, col } => row * INPUT_DIM + col,
            ParamRef::B1(j) => HIDDEN_DIM * INPUT_DIM + j,
            ParamRef::W2(j) => HIDDEN_DIM * INPUT_DIM + HIDDEN_DIM + j,
            ParamRef::B2 => PARAM_COUNT - 1,
        }
    }
}

struct ForwardCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logit_saturated: bool,
    output: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl EgnWeights {
    pub fn zeros() -> Self {
        EgnWeights {
            w1t: vec![0.0; HIDDEN_DIM * INPUT_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; HIDDEN_DIM],
            b2: 0.0,
            version: 0,
            seed: 0,
            round: 0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = (6.0 / (INPUT_DIM + HIDDEN_DIM) as f64).sqrt();
        let l2 = (6.0 / (HIDDEN_DIM + 1) as f64).sqrt();
        let mut w = EgnWeights::zeros();
        w.seed = seed;
        // drawn in row-major order so the stream does not depend on layout
        for row in 0..HIDDEN_DIM {
            for col in 0..INPUT_DIM {
                w.w1t[col * HIDDEN_DIM + row] = rng.gen_range(-l1..=l1);
            }
        }
        for v in &mut w.w2 {
            *v = rng.gen_range(-l2..=l2);
        }
        w
    }

    /// Every parameter uniform in `[-scale, scale]`, biases included.
    pub fn random_uniform(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = EgnWeights::zeros();
        w.seed = seed;
        for v in w.w1t.iter_mut().chain(&mut w.b1).chain(&mut w.w2) {
            *v = rng.gen_range(-scale..=scale);
        }
        w.b2 = rng.gen_range(-scale..=scale);
        w
    }

    pub fn param(&self, idx: usize) -> f64 {
        match ParamRef::of(idx) {
            ParamRef::W1 { row, col } => self.w1t[col * HIDDEN_DIM + row],
            ParamRef::B1(j) => self.b1[j],
            ParamRef::W2(j) => self.w2[j],
            ParamRef::B2 => self.b2,
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        match ParamRef::of(idx) {
            ParamRef::W1 { row, col } => self.w1t[col * HIDDEN_DIM + row] = value,
            ParamRef::B1(j) => self.b1[j] = value,
            ParamRef::W2(j) => self.w2[j] = value,
            ParamRef::B2 => self.b2 = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1t
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
            .all(|v| v.is_finite())
    }

    fn forward_cached(&self, x: &SparseInput, mask: Option<&DropoutMask>) -> ForwardCache {
        let mut pre = self.b1.clone();
        for (i, v) in x.iter() {
            let col = &self.w1t[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            if v == 1.0 {
                pre.iter_mut().zip(col).for_each(|(p, w)| *p += w);
            } else {
                pre.iter_mut().zip(col).for_each(|(p, w)| *p += v * w);
            }
        }
        let mut hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        if let Some(m) = mask {
            hidden.iter_mut().zip(&m.0).for_each(|(h, s)| *h *= s);
        }
        let mut logit = self.b2;
        for (h, w) in hidden.iter().zip(&self.w2) {
            logit += h * w;
        }
        let logit_saturated = logit.abs() > LOGIT_LIMIT;
        let output = sigmoid(logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        ForwardCache {
            pre,
            hidden,
            logit_saturated,
            output,
        }
    }

    /// Scores a dense 4096-wide input.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<f64, EgnError> {
        let sparse = SparseInput::from_dense(x)?;
        Ok(self.forward_sparse(&sparse, mode))
    }

    pub fn forward_sparse(&self, x: &SparseInput, mode: Mode<'_>) -> f64 {
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train(m) => Some(m),
        };
        self.forward_cached(x, mask).output
    }

    /// Eval-mode score of a (molecule, template) fingerprint pair.
    pub fn score(&self, mol: &Fingerprint, tmpl: &Fingerprint) -> f64 {
        self.forward_sparse(&SparseInput::from_fingerprints(mol, tmpl), Mode::Eval)
    }

    /// Adds `scale * d(output)/d(params)` into `grads`.
    fn backward(
        &self,
        x: &SparseInput,
        mask: Option<&DropoutMask>,
        cache: &ForwardCache,
        d_output: f64,
        grads: &mut Gradients,
    ) {
        if cache.logit_saturated {
            return;
        }
        let y = cache.output;
        let d_logit = d_output * y * (1.0 - y);
        grads.b2 += d_logit;
        let mut d_pre = vec![0.0; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            grads.w2[j] += d_logit * cache.hidden[j];
            if cache.pre[j] > 0.0 {
                let s = mask.map_or(1.0, |m| m.0[j]);
                d_pre[j] = d_logit * self.w2[j] * s;
            }
        }
        for (g, d) in grads.b1.iter_mut().zip(&d_pre) {
            *g += d;
        }
        for (i, v) in x.iter() {
            let col = &mut grads.w1t[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            col.iter_mut().zip(&d_pre).for_each(|(g, d)| *g += v * d);
        }
    }

    /// Gradient of the single-sample squared error in eval mode.
    pub fn loss_gradient(&self, x: &SparseInput, target: f64) -> Gradients {
        let cache = self.forward_cached(x, None);
        let mut g = Gradients::zeros();
        self.backward(x, None, &cache, 2.0 * (cache.output - target), &mut g);
        g
    }

    fn hidden_pattern(&self, x: &SparseInput) -> Vec<bool> {
        self.forward_cached(x, None).pre.iter().map(|&p| p > 0.0).collect()
    }

    fn save_binary<W: Write>(&self, mut out: W) -> Result<(), EgnError> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&(INPUT_DIM as u32).to_le_bytes())?;
        out.write_all(&(HIDDEN_DIM as u32).to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&self.round.to_le_bytes())?;
        let mut buf = Vec::with_capacity(INPUT_DIM * 8);
        for row in 0..HIDDEN_DIM {
            buf.clear();
            for col in 0..INPUT_DIM {
                buf.extend_from_slice(&self.w1t[col * HIDDEN_DIM + row].to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        for v in self.b1.iter().chain(&self.w2).chain(std::iter::once(&self.b2)) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PARAM_COUNT * 8 + 40);
        self.save_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, EgnError> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(EgnError::Format("bad magic".into()));
        }
        let fmt = read_u32(r)?;
        if fmt != WEIGHTS_FORMAT_VERSION {
            return Err(EgnError::Format(format!("unsupported format version {fmt}")));
        }
        let version = read_u64(r)?;
        let (input, hidden) = (read_u32(r)? as usize, read_u32(r)? as usize);
        if input != INPUT_DIM || hidden != HIDDEN_DIM {
            return Err(EgnError::Format(format!("dims {hidden}x{input}, expected {HIDDEN_DIM}x{INPUT_DIM}")));
        }
        let seed = read_u64(r)?;
        let round = read_u32(r)?;
        let mut w = EgnWeights::zeros();
        w.version = version;
        w.seed = seed;
        w.round = round;
        for row in 0..HIDDEN_DIM {
            for col in 0..INPUT_DIM {
                w.w1t[col * HIDDEN_DIM + row] = read_f64(r)?;
            }
        }
        for j in 0..HIDDEN_DIM {
            w.b1[j] = read_f64(r)?;
        }
        for j in 0..HIDDEN_DIM {
            w.w2[j] = read_f64(r)?;
        }
        w.b2 = read_f64(r)?;
        if !r.is_empty() {
            return Err(EgnError::Format("trailing bytes".into()));
        }
        if !w.is_finite() {
            return Err(EgnError::Format("non-finite parameter".into()));
        }
        Ok(w)
    }

    /// Writes the binary weights file and a `<path>.json` provenance sidecar.
    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<(), EgnError> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        let sidecar = WeightsSidecar {
            format: "egmcts-egn-weights".into(),
            format_version: WEIGHTS_FORMAT_VERSION,
            version: self.version,
            seed: self.seed,
            round: self.round,
            input_dim: INPUT_DIM,
            hidden_dim: HIDDEN_DIM,
            sha256: hex::encode(Sha256::digest(&bytes)),
            provenance,
        };
        let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        text.push('\n');
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EgnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsSidecar {
    pub format: String,
    pub format_version: u32,
    pub version: u64,
    pub seed: u64,
    pub round: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub sha256: String,
    pub provenance: serde_json::Value,
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), EgnError> {
    r.read_exact(buf)
        .map_err(|_| EgnError::Format("truncated weights file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, EgnError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, EgnError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, EgnError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dropout_rate: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            dropout_rate: 0.1,
            adam: AdamConfig::default(),
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EgnError> {
        if self.epochs == 0 {
            return Err(EgnError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EgnError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(EgnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(EgnError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss (with dropout) of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode loss over the dataset before training.
    pub initial_loss: f64,
    /// Eval-mode loss over the dataset after training.
    pub final_loss: f64,
    pub samples: usize,
}

/// Adam moment estimates, one per parameter.
struct Adam {
    cfg: AdamConfig,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Gradients::zeros(),
            v: Gradients::zeros(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut EgnWeights, g: &Gradients) {
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        const CHUNK: usize = 1 << 14;
        w.w1t
            .par_chunks_mut(CHUNK)
            .zip(g.w1t.par_chunks(CHUNK))
            .zip(self.m.w1t.par_chunks_mut(CHUNK))
            .zip(self.v.w1t.par_chunks_mut(CHUNK))
            .for_each(|(((p, g), m), v)| {
                for i in 0..p.len() {
                    update(&mut p[i], g[i], &mut m[i], &mut v[i]);
                }
            });
        for j in 0..HIDDEN_DIM {
            update(&mut w.b1[j], g.b1[j], &mut self.m.b1[j], &mut self.v.b1[j]);
            update(&mut w.w2[j], g.w2[j], &mut self.m.w2[j], &mut self.v.w2[j]);
        }
        update(&mut w.b2, g.b2, &mut self.m.b2, &mut self.v.b2);
    }
}

/// Mean squared error over `batch` in eval mode.
pub fn loss(w: &EgnWeights, batch: &[Sample]) -> Result<f64, EgnError> {
    if batch.is_empty() {
        return Err(EgnError::EmptyBatch);
    }
    let total: f64 = batch
        .iter()
        .map(|s| {
            let d = w.forward_sparse(&s.input, Mode::Eval) - s.target;
            d * d
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mini-batch Adam with dropout. Returns new weights with `version + 1`.
/// A fixed `cfg.seed` gives bit-identical results.
pub fn train(
    w: &EgnWeights,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(EgnWeights, TrainReport), EgnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EgnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = w.clone();
    let initial_loss = loss(&weights, data)?;
    let mut adam = Adam::new(cfg.adam);
    let mut grads = Gradients::zeros();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let s = &data[idx];
                let mask = DropoutMask::sample(cfg.dropout_rate, &mut rng);
                let cache = weights.forward_cached(&s.input, Some(&mask));
                let err = cache.output - s.target;
                epoch_sum += err * err;
                weights.backward(&s.input, Some(&mask), &cache, 2.0 * err * scale, &mut grads);
            }
            adam.step(&mut weights, &grads);
        }
        epoch_losses.push(epoch_sum / data.len() as f64);
    }
    let final_loss = loss(&weights, data)?;
    weights.version = w.version + 1;
    Ok((
        weights,
        TrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
            samples: data.len(),
        },
    ))
}

/// Gradient corruptions used as negative controls for [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCorruption {
    FlipW2Sign,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Number of parameters compared.
    pub samples: usize,
    pub seed: u64,
    pub corruption: Option<GradCorruption>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples: 120,
            seed: 0,
            corruption: None,
        }
    }
}

/// Worst relative error between the analytic per-sample loss gradient and
/// central finite differences with step `h`.
pub fn grad_check(w: &EgnWeights, x: &SparseInput, target: f64, h: f64) -> f64 {
    grad_check_with(
        w,
        x,
        target,
        &GradCheckOptions {
            step: h,
            ..GradCheckOptions::default()
        },
    )
}

/// Parameters are drawn evenly from W1 columns of active inputs, b1, W2 and
/// b2. A parameter whose ±h perturbation flips any hidden unit across the
/// ReLU kink is skipped and redrawn, since the finite difference is not
/// meaningful there.
pub fn grad_check_with(w: &EgnWeights, x: &SparseInput, target: f64, opts: &GradCheckOptions) -> f64 {
    let mut analytic = w.loss_gradient(x, target);
    if opts.corruption == Some(GradCorruption::FlipW2Sign) {
        analytic.w2.iter_mut().for_each(|g| *g = -*g);
    }
    let sample_loss = |w: &EgnWeights| {
        let d = w.forward_sparse(x, Mode::Eval) - target;
        d * d
    };
    let base_pattern = w.hidden_pattern(x);
    let active: Vec<usize> = x.iter().map(|(i, _)| i).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = w.clone();
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < opts.samples && attempts < opts.samples * 20 {
        attempts += 1;
        let param = match rng.gen_range(0..4) {
            0 if !active.is_empty() => ParamRef::W1 {
                row: rng.gen_range(0..HIDDEN_DIM),
                col: active[rng.gen_range(0..active.len())],
            },
            0 | 1 => ParamRef::B1(rng.gen_range(0..HIDDEN_DIM)),
            2 => ParamRef::W2(rng.gen_range(0..HIDDEN_DIM)),
            _ => ParamRef::B2,
        }
        .flat();
        let orig = w.param(param);
        probe.set_param(param, orig + opts.step);
        let crosses_up = probe.hidden_pattern(x) != base_pattern;
        let plus = sample_loss(&probe);
        probe.set_param(param, orig - opts.step);
        let crosses_down = probe.hidden_pattern(x) != base_pattern;
        let minus = sample_loss(&probe);
        probe.set_param(param, orig);
        if crosses_up || crosses_down {
            continue;
        }
        accepted += 1;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.get(param);
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::make_egn_input;

    fn random_input(seed: u64, nnz: usize) -> SparseInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; INPUT_DIM];
        for _ in 0..nnz {
            x[rng.gen_range(0..INPUT_DIM)] = 1.0;
        }
        SparseInput::from_dense(&x).unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        let w = EgnWeights::zeros();
        let x = vec![1.0; INPUT_DIM];
        assert_eq!(w.forward(&x, Mode::Eval).unwrap(), 0.5);
    }

    #[test]
    fn zero_input_uses_bias_path_only() {
        let w = EgnWeights::random_uniform(3, 0.5);
        let y = w.forward(&vec![0.0; INPUT_DIM], Mode::Eval).unwrap();
        let mut logit = w.b2;
        for j in 0..HIDDEN_DIM {
            logit += w.w2[j] * w.b1[j].max(0.0);
        }
        assert!((y - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_dimension() {
        let w = EgnWeights::zeros();
        assert!(matches!(w.forward(&[0.0; 10], Mode::Eval), Err(EgnError::DimensionMismatch(10))));
        assert!(DropoutMask::new(vec![1.0; 3]).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_sparse_matches_dense() {
        let w = EgnWeights::random(1);
        let mol = Fingerprint::from_indices([1, 50, 900]);
        let tmpl = Fingerprint::from_indices([7, 2000]);
        let dense = make_egn_input(&mol, &tmpl);
        let a = w.forward(&dense, Mode::Eval).unwrap();
        let b = w.forward(&dense, Mode::Eval).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), w.score(&mol, &tmpl).to_bits());
    }

    #[test]
    fn zero_dropout_equals_eval() {
        let w = EgnWeights::random_uniform(5, 0.1);
        let x = random_input(9, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = DropoutMask::sample(0.0, &mut rng);
        assert_eq!(
            w.forward_sparse(&x, Mode::Train(&mask)).to_bits(),
            w.forward_sparse(&x, Mode::Eval).to_bits()
        );
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut w = EgnWeights::zeros();
        w.b2 = 1e6;
        let y = w.forward_sparse(&SparseInput::default(), Mode::Eval);
        assert!(y > 0.0 && y < 1.0);
        w.b2 = -1e6;
        let y = w.forward_sparse(&SparseInput::default(), Mode::Eval);
        assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn loss_examples() {
        let w = EgnWeights::zeros();
        let s = |t: f64| Sample {
            input: SparseInput::default(),
            target: t,
        };
        assert_eq!(loss(&w, &[s(0.5)]).unwrap(), 0.0);
        assert!((loss(&w, &[s(0.7)]).unwrap() - 0.04).abs() < 1e-15);
        assert!((loss(&w, &[s(0.7), s(0.9)]).unwrap() - 0.10).abs() < 1e-15);
        assert!(matches!(loss(&w, &[]), Err(EgnError::EmptyBatch)));
    }

    #[test]
    fn single_sample_training_reduces_loss() {
        let w = EgnWeights::random(2);
        let data = vec![Sample {
            input: random_input(4, 30),
            target: 0.9,
        }];
        let (w2, report) = train(&w, &data, &TrainConfig::default()).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(report.epoch_losses.len(), 20);
        assert_eq!(w2.version, w.version + 1);
    }

    #[test]
    fn constant_half_target_is_a_fixed_point_from_zero() {
        let w = EgnWeights::zeros();
        let data: Vec<Sample> = (0..10)
            .map(|i| Sample {
                input: random_input(i, 20),
                target: 0.5,
            })
            .collect();
        let (w2, report) = train(&w, &data, &TrainConfig::default()).unwrap();
        assert_eq!(report.final_loss, 0.0);
        for s in &data {
            assert_eq!(w2.forward_sparse(&s.input, Mode::Eval), 0.5);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let w = EgnWeights::random(7);
        let data: Vec<Sample> = (0..40)
            .map(|i| Sample {
                input: random_input(100 + i, 25),
                target: (i % 7) as f64 / 7.0,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&w, &data, &cfg).unwrap();
        let (b, rb) = train(&w, &data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
    }

    #[test]
    fn empty_dataset_and_bad_config() {
        let w = EgnWeights::zeros();
        assert!(matches!(train(&w, &[], &TrainConfig::default()), Err(EgnError::EmptyDataset)));
        let s = vec![Sample {
            input: SparseInput::default(),
            target: 0.1,
        }];
        let bad = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&w, &s, &bad), Err(EgnError::InvalidConfig(_))));
    }

    #[test]
    fn gradient_check_examples() {
        let x = random_input(11, 50);
        assert!(grad_check(&EgnWeights::zeros(), &x, 0.8, 1e-5) < 1e-4);
        let w = EgnWeights::random_uniform(12, 0.1);
        assert!(grad_check(&w, &x, 0.3, 1e-5) < 1e-4);
        let corrupted = grad_check_with(
            &w,
            &x,
            0.3,
            &GradCheckOptions {
                corruption: Some(GradCorruption::FlipW2Sign),
                ..GradCheckOptions::default()
            },
        );
        assert!(corrupted > 0.5, "negative control gave {corrupted}");
    }

    #[test]
    fn weights_file_roundtrip() {
        let mut w = EgnWeights::random(8);
        w.version = 3;
        w.round = 2;
        let bytes = w.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 4 + 8 + 4 + PARAM_COUNT * 8);
        let back = EgnWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert!(EgnWeights::from_bytes(&bytes[..100]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EgnWeights::from_bytes(&bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        w.save(&path, serde_json::json!({"note": "test"})).unwrap();
        assert_eq!(EgnWeights::load(&path).unwrap(), w);
        let sidecar: WeightsSidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(sidecar.version, 3);
        assert_eq!(sidecar.sha256, hex::encode(Sha256::digest(&bytes)));
    }

    #[test]
    fn flat_param_index_roundtrip() {
        for idx in [0, 1, INPUT_DIM, HIDDEN_DIM * INPUT_DIM - 1, HIDDEN_DIM * INPUT_DIM, PARAM_COUNT - 2, PARAM_COUNT - 1] {
            assert_eq!(ParamRef::of(idx).flat(), idx);
        }
        let mut w = EgnWeights::zeros();
        w.set_param(INPUT_DIM + 3, 2.5);
        assert_eq!(w.param(INPUT_DIM + 3), 2.5);
        assert_eq!(w.w1t[3 * HIDDEN_DIM + 1], 2.5);
    }
}
