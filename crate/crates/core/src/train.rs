//! Minimal straight-through-estimator trainer for fully connected BNNs.
//!
//! Latent real weights in `[-1, 1]` are binarized by sign in the forward
//! pass and receive the gradient of their binarized copies. Each hidden
//! layer has a per-neuron batch norm followed by sign; after training, the
//! batch norm is measured over the whole training set and folded into the
//! layer's thresholds. The output layer's raw scores feed a one-vs-all
//! squared hinge loss.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::{BatchNormStats, BnnModel, Layer};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::seed::derive_seed_tagged;

const BN_EPS: f64 = 1e-4;
const MIN_PSI: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Widths of the hidden layers; the output width is the class count.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BnnModel,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Seeded latent weights, one `outputs x inputs` matrix per layer, uniform
/// in `[-1, 1]`.
pub fn initial_latent_weights(dims: &[usize], seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_tagged(seed, "train-init", 0));
    dims.windows(2)
        .map(|w| Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-1.0..=1.0)))
        .collect()
}

struct Net {
    w: Vec<Array2<f64>>,
    psi: Vec<Array1<f64>>,
    eta: Vec<Array1<f64>>,
}

/// Cached quantities of one hidden layer for the backward pass.
struct HiddenCache {
    input: Array2<f64>,
    wb: Array2<f64>,
    zhat: Array2<f64>,
    y: Array2<f64>,
    sigma: Array1<f64>,
}

fn batch_stats(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mu = z.mean_axis(Axis(0)).expect("non-empty batch");
    let var = (z - &mu).mapv(|d| d * d).mean_axis(Axis(0)).expect("non-empty batch");
    (mu, var.mapv(|v| (v + BN_EPS).sqrt()))
}

impl Net {
    fn binarized(&self, l: usize) -> Array2<f64> {
        self.w[l].mapv(sign)
    }

    fn forward(&self, x: Array2<f64>) -> (Vec<HiddenCache>, Array2<f64>, Array2<f64>) {
        let hidden = self.w.len() - 1;
        let mut caches = Vec::with_capacity(hidden);
        let mut act = x;
        for l in 0..hidden {
            let wb = self.binarized(l);
            let z = act.dot(&wb.t());
            let (mu, sigma) = batch_stats(&z);
            let zhat = (&z - &mu) / &sigma;
            let y = &zhat * &self.psi[l] + &self.eta[l];
            let next = y.mapv(|v| if v > 0.0 { 1.0 } else { -1.0 });
            caches.push(HiddenCache {
                input: act,
                wb,
                zhat,
                y,
                sigma,
            });
            act = next;
        }
        let wb = self.binarized(hidden);
        let scale = 1.0 / (wb.ncols() as f64).sqrt();
        let scores = act.dot(&wb.t()) * scale;
        (caches, act, scores)
    }
}

/// One-hot targets in `{-1, +1}`.
fn targets(labels: &[u32], classes: usize) -> Array2<f64> {
    let mut t = Array2::from_elem((labels.len(), classes), -1.0);
    for (i, &c) in labels.iter().enumerate() {
        t[[i, c as usize]] = 1.0;
    }
    t
}

fn to_matrix(ds: &Dataset, idx: &[usize]) -> Array2<f64> {
    let n = ds.input_len();
    Array2::from_shape_fn((idx.len(), n), |(r, c)| ds.samples[idx[r]].pixels[c] as f64)
}

struct Momentum {
    w: Vec<Array2<f64>>,
    psi: Vec<Array1<f64>>,
    eta: Vec<Array1<f64>>,
}

/// Trains an FC network `input -> hidden... -> classes` on `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let classes = dataset.classes;
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.label as usize >= classes) {
        return Err(invalid(format!("label {} exceeds class count {classes}", s.label)));
    }
    let mut dims = vec![dataset.input_len()];
    dims.extend(&cfg.hidden);
    dims.push(classes);

    let mut net = Net {
        w: initial_latent_weights(&dims, cfg.seed),
        psi: cfg.hidden.iter().map(|&h| Array1::ones(h)).collect(),
        eta: cfg.hidden.iter().map(|&h| Array1::zeros(h)).collect(),
    };
    let mut vel = Momentum {
        w: net.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
        psi: net.psi.iter().map(|p| Array1::zeros(p.len())).collect(),
        eta: net.eta.iter().map(|e| Array1::zeros(e.len())).collect(),
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_tagged(cfg.seed, "train-shuffle", 0));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = to_matrix(dataset, batch);
            let labels: Vec<u32> = batch.iter().map(|&i| dataset.samples[i].label).collect();
            let t = targets(&labels, classes);
            let (caches, last_act, scores) = net.forward(x);
            let b = batch.len() as f64;

            let margin = (&t * &scores).mapv(|m| (1.0 - m).max(0.0));
            loss_sum += margin.mapv(|m| m * m).sum() / classes as f64;
            let d_scores = &t * &margin * (-2.0 / (b * classes as f64));

            let out = net.w.len() - 1;
            let wb = net.binarized(out);
            let scale = 1.0 / (wb.ncols() as f64).sqrt();
            let mut grads_w = vec![Array2::zeros((0, 0)); net.w.len()];
            grads_w[out] = d_scores.t().dot(&last_act) * scale;
            let mut d_act = d_scores.dot(&wb) * scale;
            let mut grads_psi = Vec::with_capacity(caches.len());
            let mut grads_eta = Vec::with_capacity(caches.len());
            for (l, c) in caches.iter().enumerate().rev() {
                // Straight-through sign: pass the gradient where |y| <= 1.
                let mut dy = d_act;
                dy.zip_mut_with(&c.y, |g, &y| {
                    if y.abs() > 1.0 {
                        *g = 0.0;
                    }
                });
                grads_psi.push((&dy * &c.zhat).sum_axis(Axis(0)));
                grads_eta.push(dy.sum_axis(Axis(0)));
                let dzhat = &dy * &net.psi[l];
                let mean_d = dzhat.mean_axis(Axis(0)).expect("non-empty batch");
                let mean_dz = (&dzhat * &c.zhat).mean_axis(Axis(0)).expect("non-empty batch");
                let dz = (&dzhat - &mean_d - &c.zhat * &mean_dz) / &c.sigma;
                grads_w[l] = dz.t().dot(&c.input);
                d_act = dz.dot(&c.wb);
            }
            grads_psi.reverse();
            grads_eta.reverse();

            let (lr, mu) = (cfg.learning_rate, cfg.momentum);
            for ((w, v), g) in net.w.iter_mut().zip(&mut vel.w).zip(&grads_w) {
                *v = &*v * mu - g * lr;
                *w += &*v;
                w.mapv_inplace(|x| x.clamp(-1.0, 1.0));
            }
            for l in 0..net.psi.len() {
                vel.psi[l] = &vel.psi[l] * mu - &grads_psi[l] * lr;
                vel.eta[l] = &vel.eta[l] * mu - &grads_eta[l] * lr;
                net.psi[l] += &vel.psi[l];
                net.psi[l].mapv_inplace(|v| v.max(MIN_PSI));
                net.eta[l] += &vel.eta[l];
            }
        }
        let loss = loss_sum / dataset.len() as f64;
        if !loss.is_finite() || net.w.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        log::debug!("epoch {epoch}: loss {loss:.5}");
        losses.push(loss);
    }

    let model = finalize(&net, dataset, &dims)?;
    Ok(TrainOutcome { model, losses })
}

/// Binarizes the weights, measures each hidden layer's batch norm over the
/// full training set and folds it into thresholds.
fn finalize(net: &Net, dataset: &Dataset, dims: &[usize]) -> Result<BnnModel> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut act = to_matrix(dataset, &all);
    let mut shape = dataset.shape;
    let mut layers = Vec::with_capacity(net.w.len());
    for l in 0..net.w.len() {
        let wb = net.binarized(l);
        let weights: Vec<i8> = wb.iter().map(|&v| v as i8).collect();
        let mut layer = Layer::fully_connected(shape, dims[l + 1], weights, Vec::new());
        if l + 1 < net.w.len() {
            let z = act.dot(&wb.t());
            let (mu, sigma) = batch_stats(&z);
            let stats = BatchNormStats {
                mu: mu.to_vec(),
                sigma: sigma.to_vec(),
                psi: net.psi[l].to_vec(),
                eta: net.eta[l].to_vec(),
            };
            layer.thresholds = stats.fold()?;
            let th = Array1::from(layer.thresholds.clone());
            act = &z - &th;
            act.mapv_inplace(|v| if v > 0.0 { 1.0 } else { -1.0 });
            layer.batchnorm = Some(stats);
        }
        shape = layer.output_shape;
        layers.push(layer);
    }
    BnnModel::new(dataset.shape, layers)
}
