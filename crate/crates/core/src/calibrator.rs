//! Per-query interpolation weight predictor.
//!
//! Five feature groups (hidden state, parametric distribution scalars,
//! lexical scalars, neighbor distances, retrieved-value diversity) each pass
//! through their own LeakyReLU encoder into a `width`-dimensional state. The
//! concatenation feeds a ReLU trunk with dropout and a sigmoid head that
//! emits lambda. Training maximizes the interpolated probability of the gold
//! token with Adam; all gradients are computed by hand in `f64`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lexstats::LexStats;
use crate::lm::LmOutput;
use crate::memory::Neighbor;
use crate::rng::{self, Rng};
use crate::vocab::TokenId;

const CAL_MAGIC: &[u8] = b"SEMCAL1";

/// Number of nearest neighbors summarized in the density features.
pub const TOP_NEIGHBORS: usize = 10;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const DROPOUT: f64 = 0.2;
/// Distance recorded for every slot when memory returned nothing.
pub const EMPTY_DISTANCE: f64 = 1e6;

const GROUPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorFeatures {
    pub hidden: Vec<f64>,
    pub conf: f64,
    pub ent: f64,
    pub log_freq_last: f64,
    pub log_distinct_last: f64,
    pub top_dists: [f64; TOP_NEIGHBORS],
    pub log_distinct_retrieved: [f64; TOP_NEIGHBORS],
}

impl CalibratorFeatures {
    /// Network inputs per encoder group. Distances enter as `ln(1 + d)`.
    fn groups(&self) -> [Vec<f64>; GROUPS] {
        [
            self.hidden.clone(),
            vec![self.conf, self.ent],
            vec![self.log_freq_last, self.log_distinct_last],
            self.top_dists.iter().map(|d| d.ln_1p()).collect(),
            self.log_distinct_retrieved.to_vec(),
        ]
    }
}

/// Assembles the distribution, lexical and density features for one query.
/// `neighbors` must be sorted by ascending distance.
pub fn extract_features(
    lm_out: &LmOutput,
    neighbors: &[Neighbor],
    lexstats: &LexStats,
    last_token: TokenId,
) -> CalibratorFeatures {
    let mut conf = 0.0f64;
    let mut ent = 0.0f64;
    for &lp in &lm_out.log_probs {
        let p = lp.exp();
        conf = conf.max(p);
        if p > 0.0 {
            ent -= p * lp;
        }
    }

    let mut top_dists = [EMPTY_DISTANCE; TOP_NEIGHBORS];
    let mut log_distinct_retrieved = [0.0; TOP_NEIGHBORS];
    let head = &neighbors[..neighbors.len().min(TOP_NEIGHBORS)];
    let mut seen: Vec<TokenId> = Vec::with_capacity(TOP_NEIGHBORS);
    for (i, n) in head.iter().enumerate() {
        top_dists[i] = n.dist;
        if !seen.contains(&n.value) {
            seen.push(n.value);
        }
        log_distinct_retrieved[i] = (seen.len() as f64).ln_1p();
    }
    if let Some(last) = head.last() {
        let pad = head.iter().map(|n| n.dist).fold(last.dist, f64::max) + 1.0;
        let distinct = log_distinct_retrieved[head.len() - 1];
        for i in head.len()..TOP_NEIGHBORS {
            top_dists[i] = pad;
            log_distinct_retrieved[i] = distinct;
        }
    }

    CalibratorFeatures {
        hidden: lm_out.hidden.iter().map(|&h| f64::from(h)).collect(),
        conf,
        ent,
        log_freq_last: lexstats.log_freq(last_token),
        log_distinct_last: lexstats.log_distinct(last_token),
        top_dists,
        log_distinct_retrieved,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorTrainExample {
    pub features: CalibratorFeatures,
    pub p_lm_gold: f64,
    pub p_mem_gold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratorConfig {
    /// Encoder and trunk width.
    pub width: usize,
    pub trunk_layers: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            trunk_layers: 4,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// Training epochs for calibration round `day` of `days`: 5 on the first,
/// decaying linearly to 1 on the last.
pub fn epoch_schedule(day: usize, days: usize) -> usize {
    if days <= 1 {
        return 5;
    }
    let frac = day.min(days - 1) as f64 / (days - 1) as f64;
    (5.0 - 4.0 * frac).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    out: usize,
    inp: usize,
    /// out x inp, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            w: vec![0.0; out * inp],
            b: vec![0.0; out],
        }
    }

    fn random(out: usize, inp: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            out,
            inp,
            w: (0..out * inp).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|i| {
                let row = &self.w[i * self.inp..(i + 1) * self.inp];
                dot(row, x) + self.b[i]
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for (i, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w[i * self.inp..(i + 1) * self.inp];
            let grow = &mut grad.w[i * self.inp..(i + 1) * self.inp];
            for j in 0..self.inp {
                grow[j] += g * x[j];
                dx[j] += g * row[j];
            }
            grad.b[i] += g;
        }
        dx
    }
}

/// Calibrator parameters. Gradients and Adam moments reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorWeights {
    encoders: Vec<Dense>,
    trunk: Vec<Dense>,
    head: Dense,
}

struct Cache {
    inputs: [Vec<f64>; GROUPS],
    enc_pre: Vec<Vec<f64>>,
    /// acts[0] is the concatenated encoding; acts[l + 1] is trunk layer l's
    /// output after ReLU and dropout.
    acts: Vec<Vec<f64>>,
    trunk_pre: Vec<Vec<f64>>,
    /// Per-unit dropout scale: 0 or 1/(1-p) in training, 1 otherwise.
    masks: Vec<Vec<f64>>,
    logit: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

impl CalibratorWeights {
    fn input_dims(hidden_dim: usize) -> [usize; GROUPS] {
        [hidden_dim, 2, 2, TOP_NEIGHBORS, TOP_NEIGHBORS]
    }

    fn shaped(hidden_dim: usize, config: &CalibratorConfig, mut make: impl FnMut(usize, usize, usize) -> Dense) -> Self {
        let width = config.width;
        let mut layer = 0;
        let mut next = |out, inp| {
            layer += 1;
            make(layer - 1, out, inp)
        };
        let encoders = Self::input_dims(hidden_dim)
            .iter()
            .map(|&inp| next(width, inp))
            .collect();
        let mut trunk = Vec::with_capacity(config.trunk_layers);
        for l in 0..config.trunk_layers {
            let inp = if l == 0 { GROUPS * width } else { width };
            trunk.push(next(width, inp));
        }
        let head_in = if config.trunk_layers == 0 { GROUPS * width } else { width };
        let head = next(1, head_in);
        Self { encoders, trunk, head }
    }

    pub fn zeros(hidden_dim: usize, config: &CalibratorConfig) -> Self {
        Self::shaped(hidden_dim, config, |_, out, inp| Dense::zeros(out, inp))
    }

    /// He-normal initialization under `seed`; the head starts near lambda = 0.5.
    pub fn new(hidden_dim: usize, config: &CalibratorConfig, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "calibrator-init", 0);
        let n_layers = GROUPS + config.trunk_layers + 1;
        Self::shaped(hidden_dim, config, |i, out, inp| {
            let gain = if i + 1 == n_layers { 1.0 } else { 2.0 };
            Dense::random(out, inp, (gain / inp as f64).sqrt(), &mut rng)
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoders[0].inp
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoders.iter().chain(&self.trunk).chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoders
            .iter_mut()
            .chain(self.trunk.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    /// `(rows, cols)` of every tensor in snapshot order; biases are `(rows, 1)`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.layers()
            .flat_map(|l| [(l.out, l.inp), (l.out, 1)])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Sets the head so that lambda is `lambda` for every input.
    pub fn set_constant_output(&mut self, lambda: f64) {
        self.head.w.fill(0.0);
        self.head.b[0] = (lambda / (1.0 - lambda)).ln();
    }

    fn forward(&self, features: &CalibratorFeatures, mut dropout: Option<&mut Rng>) -> Result<Cache> {
        if features.hidden.len() != self.hidden_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim(),
                got: features.hidden.len(),
            });
        }
        let inputs = features.groups();
        let mut enc_pre = Vec::with_capacity(GROUPS);
        let mut concat = Vec::with_capacity(GROUPS * self.encoders[0].out);
        for (enc, x) in self.encoders.iter().zip(&inputs) {
            let u = enc.apply(x);
            concat.extend(u.iter().map(|&v| leaky(v)));
            enc_pre.push(u);
        }
        let mut acts = vec![concat];
        let mut trunk_pre = Vec::with_capacity(self.trunk.len());
        let mut masks = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let z = layer.apply(acts.last().unwrap());
            let mask: Vec<f64> = match dropout.as_deref_mut() {
                Some(rng) => (0..z.len())
                    .map(|_| {
                        if rng.random::<f64>() < DROPOUT {
                            0.0
                        } else {
                            1.0 / (1.0 - DROPOUT)
                        }
                    })
                    .collect(),
                None => vec![1.0; z.len()],
            };
            acts.push(z.iter().zip(&mask).map(|(&v, &m)| v.max(0.0) * m).collect());
            trunk_pre.push(z);
            masks.push(mask);
        }
        let logit = self.head.apply(acts.last().unwrap())[0];
        if !logit.is_finite() {
            return Err(Error::NumericalBlowup("calibrator forward"));
        }
        Ok(Cache {
            inputs,
            enc_pre,
            acts,
            trunk_pre,
            masks,
            logit,
        })
    }

    /// Lambda with dropout disabled. Always strictly inside (0, 1).
    pub fn predict_lambda(&self, features: &CalibratorFeatures) -> Result<f64> {
        Ok(clamp_open(sigmoid(self.forward(features, None)?.logit)))
    }

    /// Lambda with a dropout mask drawn from `rng`.
    pub fn predict_lambda_train(&self, features: &CalibratorFeatures, rng: &mut Rng) -> Result<f64> {
        Ok(clamp_open(sigmoid(self.forward(features, Some(rng))?.logit)))
    }

    /// ReLU/LeakyReLU pre-activation signs, for detecting kinks in numerical
    /// gradient checks.
    pub fn activation_signs(&self, features: &CalibratorFeatures, dropout: Option<&mut Rng>) -> Result<Vec<bool>> {
        let cache = self.forward(features, dropout)?;
        Ok(cache
            .enc_pre
            .iter()
            .chain(&cache.trunk_pre)
            .flatten()
            .map(|&v| v > 0.0)
            .collect())
    }

    /// `-ln((1 - lambda) p_lm + lambda p_mem)` with dropout disabled.
    pub fn loss(&self, example: &CalibratorTrainExample) -> Result<f64> {
        let cache = self.forward(&example.features, None)?;
        Ok(mixture_loss(cache.logit, example)?.0)
    }

    /// Loss (optionally under a dropout mask) and its gradient for every tensor.
    pub fn loss_and_grad(
        &self,
        example: &CalibratorTrainExample,
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, CalibratorWeights)> {
        let mut grad = self.zeros_like();
        let loss = self.accumulate_grad(example, dropout, &mut grad)?;
        if grad.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NumericalBlowup("calibrator backward"));
        }
        Ok((loss, grad))
    }

    /// Adds this example's gradient into `grad` and returns its loss.
    fn accumulate_grad(
        &self,
        example: &CalibratorTrainExample,
        dropout: Option<&mut Rng>,
        grad: &mut CalibratorWeights,
    ) -> Result<f64> {
        let cache = self.forward(&example.features, dropout)?;
        let (loss, dlogit) = mixture_loss(cache.logit, example)?;

        let mut da = self.head.backward(cache.acts.last().unwrap(), &[dlogit], &mut grad.head);
        for l in (0..self.trunk.len()).rev() {
            let dz: Vec<f64> = da
                .iter()
                .zip(&cache.trunk_pre[l])
                .zip(&cache.masks[l])
                .map(|((&g, &z), &m)| if z > 0.0 { g * m } else { 0.0 })
                .collect();
            da = self.trunk[l].backward(&cache.acts[l], &dz, &mut grad.trunk[l]);
        }
        let width = self.encoders[0].out;
        for (g, enc) in self.encoders.iter().enumerate() {
            let du: Vec<f64> = da[g * width..(g + 1) * width]
                .iter()
                .zip(&cache.enc_pre[g])
                .map(|(&d, &u)| if u > 0.0 { d } else { LEAKY_SLOPE * d })
                .collect();
            enc.backward(&cache.inputs[g], &du, &mut grad.encoders[g]);
        }
        Ok(loss)
    }

    pub fn mean_loss(&self, examples: &[CalibratorTrainExample]) -> Result<f64> {
        let losses: Vec<f64> = examples
            .par_iter()
            .map(|e| self.loss(e))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CAL_MAGIC);
        let shapes = self.tensor_shapes();
        w.u32(shapes.len() as u32);
        for (r, c) in &shapes {
            w.u32(*r as u32);
            w.u32(*c as u32);
        }
        for t in self.tensors() {
            w.f64s(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CAL_MAGIC)?;
        let n = r.u32()? as usize;
        if !n.is_multiple_of(2) || n < 2 * (GROUPS + 1) {
            return Err(Error::corrupt("bad calibrator tensor count"));
        }
        let shapes = (0..n)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n / 2);
        for pair in shapes.chunks(2) {
            let ((out, inp), (bout, one)) = (pair[0], pair[1]);
            if bout != out || one != 1 {
                return Err(Error::corrupt("bias shape mismatch"));
            }
            let count = r.count(out as u64 * inp as u64, 8)?;
            let w = r.f64s(count)?;
            let b = r.f64s(out)?;
            layers.push(Dense { out, inp, w, b });
        }
        r.finish()?;
        let head = layers.pop().unwrap();
        let trunk = layers.split_off(GROUPS);
        let weights = Self {
            encoders: layers,
            trunk,
            head,
        };
        weights.validate_shapes()?;
        Ok(weights)
    }

    fn validate_shapes(&self) -> Result<()> {
        let width = self.encoders[0].out;
        let dims = Self::input_dims(self.hidden_dim());
        let mut ok = self
            .encoders
            .iter()
            .zip(dims)
            .all(|(e, d)| e.out == width && e.inp == d);
        let mut prev = GROUPS * width;
        for t in &self.trunk {
            ok &= t.inp == prev && t.out == width;
            prev = width;
        }
        ok &= self.head.out == 1 && self.head.inp == prev;
        if ok {
            Ok(())
        } else {
            Err(Error::corrupt("inconsistent calibrator layer shapes"))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn clamp_open(lambda: f64) -> f64 {
    lambda.clamp(1e-15, 1.0 - 1e-15)
}

/// Loss and d(loss)/d(logit) for one example.
fn mixture_loss(logit: f64, ex: &CalibratorTrainExample) -> Result<(f64, f64)> {
    let lambda = sigmoid(logit);
    let keep = sigmoid(-logit);
    let mix = keep * ex.p_lm_gold + lambda * ex.p_mem_gold;
    if !(mix > 0.0) {
        return Err(Error::ZeroProbabilityGold);
    }
    let dlogit = -lambda * keep * (ex.p_mem_gold - ex.p_lm_gold) / mix;
    Ok((-mix.ln(), dlogit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: CalibratorWeights,
    /// Mean loss with dropout off: before training, then after each epoch.
    pub loss_trace: Vec<f64>,
    /// Validation loss at the same points; empty without a validation set.
    pub validation_trace: Vec<f64>,
    /// Epoch whose weights were kept (0 = the starting weights).
    pub selected_epoch: usize,
}

struct Adam {
    m: CalibratorWeights,
    v: CalibratorWeights,
    t: i32,
}

impl Adam {
    fn new(w: &CalibratorWeights) -> Self {
        Self {
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut CalibratorWeights, grad: &CalibratorWeights, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let grads = grad.tensors();
        for (((w, m), v), g) in weights
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Minibatch Adam over `epochs` shuffled passes, dropout on. With a
/// non-empty `validation` set the returned weights are those with the lowest
/// validation loss among the starting weights and every epoch end;
/// otherwise the final weights.
pub fn train(
    weights: CalibratorWeights,
    examples: &[CalibratorTrainExample],
    validation: &[CalibratorTrainExample],
    epochs: usize,
    config: &CalibratorConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::invalid("no calibrator training examples"));
    }
    let mut weights = weights;
    let mut adam = Adam::new(&weights);
    let mut loss_trace = vec![weights.mean_loss(examples)?];
    let mut validation_trace = Vec::new();
    let mut best = None;
    let mut keep = |w: &CalibratorWeights, epoch: usize, trace: &mut Vec<f64>| -> Result<()> {
        if validation.is_empty() {
            return Ok(());
        }
        let loss = w.mean_loss(validation)?;
        trace.push(loss);
        if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, epoch, w.clone()));
        }
        Ok(())
    };
    keep(&weights, 0, &mut validation_trace)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = config.batch_size.max(1);
    let mut step = 0u64;
    let mut total = weights.zeros_like();
    for epoch in 0..epochs {
        order.shuffle(&mut rng::substream(seed, "calibrator-shuffle", epoch as u64));
        for chunk in order.chunks(batch) {
            let base = step * batch as u64;
            total.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            for (i, &e) in chunk.iter().enumerate() {
                let mut drop = rng::substream(seed, "calibrator-dropout", base + i as u64);
                weights.accumulate_grad(&examples[e], Some(&mut drop), &mut total)?;
            }
            if total.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
                return Err(Error::NumericalBlowup("calibrator backward"));
            }
            let scale = 1.0 / chunk.len() as f64;
            for t in total.tensors_mut() {
                for x in t {
                    *x *= scale;
                }
            }
            adam.step(&mut weights, &total, &config.adam);
            step += 1;
        }
        loss_trace.push(weights.mean_loss(examples)?);
        keep(&weights, epoch + 1, &mut validation_trace)?;
    }
    let (weights, selected_epoch) = match best {
        Some((_, epoch, w)) => (w, epoch),
        None => (weights, epochs),
    };
    Ok(TrainOutcome {
        weights,
        loss_trace,
        validation_trace,
        selected_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ContextRep;

    fn features(d: usize, seed: u64) -> CalibratorFeatures {
        let mut rng = rng::substream(seed, "features", 0);
        let mut dists: Vec<f64> = (0..TOP_NEIGHBORS).map(|_| rng.random_range(0.0..5.0)).collect();
        dists.sort_by(f64::total_cmp);
        let mut distinct = [0.0; TOP_NEIGHBORS];
        let mut k = 1.0f64;
        for slot in &mut distinct {
            k += f64::from(rng.random_bool(0.5) as u8);
            *slot = k.ln();
        }
        CalibratorFeatures {
            hidden: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            conf: rng.random_range(0.05..1.0),
            ent: rng.random_range(0.0..3.0),
            log_freq_last: rng.random_range(0.0..8.0),
            log_distinct_last: rng.random_range(0.0..3.0),
            top_dists: dists.try_into().unwrap(),
            log_distinct_retrieved: distinct,
        }
    }

    fn small() -> CalibratorConfig {
        CalibratorConfig {
            width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_distribution_features() {
        let v = 16usize;
        let out = LmOutput {
            log_probs: vec![-(v as f64).ln(); v],
            hidden: ContextRep(vec![0.5, -0.5]),
        };
        let f = extract_features(&out, &[], &LexStats::new(v), 3);
        assert!((f.conf - 1.0 / v as f64).abs() < 1e-15);
        assert!((f.ent - (v as f64).ln()).abs() < 1e-12);
        assert_eq!(f.top_dists, [EMPTY_DISTANCE; TOP_NEIGHBORS]);
        assert_eq!(f.log_distinct_retrieved, [0.0; TOP_NEIGHBORS]);
        assert_eq!(f.log_freq_last, 0.0);
    }

    #[test]
    fn retrieved_diversity_and_padding() {
        let out = LmOutput {
            log_probs: vec![0.5f64.ln(), 0.5f64.ln()],
            hidden: ContextRep(vec![0.0; 2]),
        };
        let nb = |row, value, dist| Neighbor { row, value, dist };
        let ns = [nb(0, 1, 0.5), nb(1, 1, 1.0), nb(2, 0, 2.0)];
        let f = extract_features(&out, &ns, &LexStats::new(2), 0);
        let (l2, l3) = (1f64.ln_1p(), 2f64.ln_1p());
        assert_eq!(&f.log_distinct_retrieved[..3], &[l2, l2, l3]);
        assert!(f.log_distinct_retrieved[3..].iter().all(|&x| x == l3));
        assert_eq!(&f.top_dists[..3], &[0.5, 1.0, 2.0]);
        assert!(f.top_dists[3..].iter().all(|&x| x == 3.0));
    }

    #[test]
    fn entropy_matches_two_pass() {
        let mut rng = rng::substream(1, "ent", 0);
        let logits: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lp = crate::lm::log_softmax(&logits);
        let out = LmOutput {
            log_probs: lp.clone(),
            hidden: ContextRep(vec![0.0; 2]),
        };
        let f = extract_features(&out, &[], &LexStats::new(40), 0);
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let z: f64 = probs.iter().sum();
        let ent: f64 = probs.iter().map(|p| p / z).map(|p| -p * p.ln()).sum();
        assert!((f.ent - ent).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_predict_half() {
        let w = CalibratorWeights::zeros(4, &small());
        assert_eq!(w.predict_lambda(&features(4, 0)).unwrap(), 0.5);
    }

    #[test]
    fn inference_is_deterministic_and_dropout_is_seeded() {
        let w = CalibratorWeights::new(4, &small(), 3);
        let f = features(4, 1);
        assert_eq!(w.predict_lambda(&f).unwrap(), w.predict_lambda(&f).unwrap());
        let a = w.predict_lambda_train(&f, &mut rng::substream(9, "d", 0)).unwrap();
        let b = w.predict_lambda_train(&f, &mut rng::substream(9, "d", 0)).unwrap();
        assert_eq!(a, b);
        let l = w.predict_lambda(&f).unwrap();
        assert!(l > 0.0 && l < 1.0);
    }

    #[test]
    fn equal_probabilities_cancel_lambda() {
        let w = CalibratorWeights::new(4, &small(), 4);
        let ex = CalibratorTrainExample {
            features: features(4, 2),
            p_lm_gold: 0.3,
            p_mem_gold: 0.3,
        };
        assert!((w.loss(&ex).unwrap() + 0.3f64.ln()).abs() < 1e-14);
        let (_, g) = w.loss_and_grad(&ex, None).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn saturated_lambda_recovers_parametric_loss() {
        let mut w = CalibratorWeights::new(4, &small(), 5);
        w.set_constant_output(1e-9);
        let ex = CalibratorTrainExample {
            features: features(4, 3),
            p_lm_gold: 0.2,
            p_mem_gold: 0.9,
        };
        assert!((w.loss(&ex).unwrap() + 0.2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_mixture_is_an_error() {
        let w = CalibratorWeights::zeros(4, &small());
        let ex = CalibratorTrainExample {
            features: features(4, 4),
            p_lm_gold: 0.0,
            p_mem_gold: 0.0,
        };
        assert!(matches!(w.loss(&ex), Err(Error::ZeroProbabilityGold)));
    }

    #[test]
    fn schedule_decays_from_five_to_one() {
        assert_eq!(epoch_schedule(0, 10), 5);
        assert_eq!(epoch_schedule(9, 10), 1);
        assert_eq!(epoch_schedule(0, 1), 5);
        let all: Vec<usize> = (0..10).map(|d| epoch_schedule(d, 10)).collect();
        assert!(all.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn snapshot_round_trip() {
        let w = CalibratorWeights::new(6, &small(), 7);
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..7], b"SEMCAL1");
        assert_eq!(CalibratorWeights::from_bytes(&bytes).unwrap(), w);
        assert!(CalibratorWeights::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn default_shape_follows_grouped_encoders() {
        let w = CalibratorWeights::zeros(64, &CalibratorConfig::default());
        let shapes = w.tensor_shapes();
        assert_eq!(shapes.len(), 2 * (5 + 4 + 1));
        assert_eq!(shapes[0], (128, 64));
        assert_eq!(shapes[10], (128, 640));
        assert_eq!(*shapes.last().unwrap(), (1, 1));
    }
}
