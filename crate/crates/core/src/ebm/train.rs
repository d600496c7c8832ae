use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{DbmModel, MeanFieldConfig, RbmLayer};
use crate::error::{Result, WmError};
use crate::math::{logit_clipped, sigmoid};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcdConfig {
    pub k: usize,
    pub n_chains: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub adam: AdamConfig,
}

impl Default for PcdConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n_chains: 128,
            batch_size: 256,
            init_std: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub pcd: PcdConfig,
    /// Rows used for the per-epoch reconstruction diagnostic.
    pub monitor_rows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![72, 64, 32, 16],
            epochs: 8,
            lr: 1e-3,
            pcd: PcdConfig::default(),
            monitor_rows: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub pcd: PcdConfig,
    pub mean_field: MeanFieldConfig,
    /// Rows of train and of validation used for the free-energy gap.
    pub monitor_rows: usize,
    /// Return the smallest-gap epoch instead of the last one.
    pub restore_best: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 2e-4,
            patience: 10,
            pcd: PcdConfig::default(),
            mean_field: MeanFieldConfig::default(),
            monitor_rows: 4096,
            restore_best: false,
        }
    }
}

fn bernoulli_inplace(p: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    p.mapv_inplace(|x| if rng.random::<f64>() < x { 1.0 } else { 0.0 });
}

fn sigmoid_inplace(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(sigmoid);
    x
}

/// Logit of the column means, means clipped to `[1e-3, 1 - 1e-3]`.
pub fn logit_of_means(data: ArrayView2<f64>) -> Array1<f64> {
    let n = data.nrows().max(1) as f64;
    data.sum_axis(Axis(0)).mapv(|s| logit_clipped(s / n, 1e-3))
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let nrm = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || nrm.sample(rng))
}

/// Ascent direction for one RBM.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmGradient {
    pub weights: Array2<f64>,
    pub bias_lower: Array1<f64>,
    pub bias_upper: Array1<f64>,
}

/// One RBM under persistent contrastive divergence.
///
/// `up` and `down` scale the weight input towards the upper and lower
/// units; greedy DBM pretraining doubles them on the interior layers.
pub struct RbmPcd {
    pub layer: RbmLayer,
    pub chains: Array2<f64>,
    pub up: f64,
    pub down: f64,
    k: usize,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl RbmPcd {
    pub fn new(layer: RbmLayer, cfg: &PcdConfig, up: f64, down: f64, mut rng: ChaCha8Rng) -> Self {
        let nv = layer.lower_dim();
        let mut chains = Array2::from_shape_fn((cfg.n_chains, nv), |(_, j)| sigmoid(layer.bias_lower[j]));
        bernoulli_inplace(&mut chains, &mut rng);
        let shapes = [layer.weights.len(), layer.bias_lower.len(), layer.bias_upper.len()];
        Self {
            opt: Adam::new(cfg.adam, &shapes),
            layer,
            chains,
            up,
            down,
            k: cfg.k,
            rng,
        }
    }

    fn upper_prob(&self, x: ArrayView2<f64>) -> Array2<f64> {
        sigmoid_inplace(x.dot(&self.layer.weights) * self.up + &self.layer.bias_upper)
    }

    fn lower_prob(&self, h: ArrayView2<f64>) -> Array2<f64> {
        sigmoid_inplace(h.dot(&self.layer.weights.t()) * self.down + &self.layer.bias_lower)
    }

    /// Advance the chains `k` sweeps, compute the gradient, take one Adam
    /// step at `lr`, and return the gradient used.
    pub fn update(&mut self, batch: ArrayView2<f64>, lr: f64) -> Result<RbmGradient> {
        if batch.nrows() == 0 {
            return Err(WmError::EmptyBatch);
        }
        if batch.ncols() != self.layer.lower_dim() {
            return Err(WmError::DimensionMismatch {
                what: "rbm batch",
                expected: self.layer.lower_dim(),
                got: batch.ncols(),
            });
        }
        let ph = self.upper_prob(batch);
        for _ in 0..self.k {
            let mut h = self.upper_prob(self.chains.view());
            bernoulli_inplace(&mut h, &mut self.rng);
            let mut v = self.lower_prob(h.view());
            bernoulli_inplace(&mut v, &mut self.rng);
            self.chains = v;
        }
        let phc = self.upper_prob(self.chains.view());
        let n = batch.nrows() as f64;
        let m = self.chains.nrows() as f64;
        let grad = RbmGradient {
            weights: batch.t().dot(&ph) / n - self.chains.t().dot(&phc) / m,
            bias_lower: batch.mean_axis(Axis(0)).expect("rows") - self.chains.mean_axis(Axis(0)).expect("rows"),
            bias_upper: ph.mean_axis(Axis(0)).expect("rows") - phc.mean_axis(Axis(0)).expect("rows"),
        };
        let neg: Vec<Vec<f64>> = vec![
            grad.weights.iter().map(|x| -x).collect(),
            grad.bias_lower.iter().map(|x| -x).collect(),
            grad.bias_upper.iter().map(|x| -x).collect(),
        ];
        let grads: Vec<&[f64]> = neg.iter().map(|g| g.as_slice()).collect();
        let l = &mut self.layer;
        self.opt.step(
            lr,
            &mut [
                l.weights.as_slice_mut().expect("contiguous"),
                l.bias_lower.as_slice_mut().expect("contiguous"),
                l.bias_upper.as_slice_mut().expect("contiguous"),
            ],
            &grads,
        );
        Ok(grad)
    }

    /// Mean binary cross-entropy of one deterministic up-down pass.
    pub fn reconstruction_error(&self, data: ArrayView2<f64>) -> f64 {
        rbm_reconstruction_error(&self.layer, data, self.up, self.down)
    }
}

pub fn rbm_reconstruction_error(layer: &RbmLayer, data: ArrayView2<f64>, up: f64, down: f64) -> f64 {
    let h = sigmoid_inplace(data.dot(&layer.weights) * up + &layer.bias_upper);
    let pre = h.dot(&layer.weights.t()) * down + &layer.bias_lower;
    let mut total = 0.0;
    for (x, z) in data.iter().zip(pre.iter()) {
        // BCE with logits: softplus(z) - x z
        total += crate::math::softplus(*z) - x * z;
    }
    total / data.len().max(1) as f64
}

/// Ascent direction for the full DBM, in model parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct DbmGradient {
    pub weights: Vec<Array2<f64>>,
    pub visible_bias: Array1<f64>,
    pub hidden_biases: Vec<Array1<f64>>,
}

/// Joint PCD for the DBM: mean-field positive phase, alternating Gibbs
/// negative phase on persistent chains.
pub struct DbmPcd {
    pub chains_v: Array2<f64>,
    pub chains_h: Vec<Array2<f64>>,
    k: usize,
    mean_field: MeanFieldConfig,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl DbmPcd {
    pub fn new(model: &DbmModel, cfg: &PcdConfig, mean_field: MeanFieldConfig, mut rng: ChaCha8Rng) -> Self {
        let c = cfg.n_chains;
        let mut chains_v = Array2::from_shape_fn((c, model.visible_dim()), |(_, j)| sigmoid(model.visible_bias[j]));
        bernoulli_inplace(&mut chains_v, &mut rng);
        let chains_h = model
            .hidden_biases
            .iter()
            .map(|b| {
                let mut h = Array2::from_elem((c, b.len()), 0.5);
                bernoulli_inplace(&mut h, &mut rng);
                h
            })
            .collect();
        let mut shapes: Vec<usize> = model.weights.iter().map(|w| w.len()).collect();
        shapes.push(model.visible_dim());
        shapes.extend(model.hidden_biases.iter().map(|b| b.len()));
        Self {
            chains_v,
            chains_h,
            k: cfg.k,
            mean_field,
            opt: Adam::new(cfg.adam, &shapes),
            rng,
        }
    }

    fn sample_hidden(&mut self, model: &DbmModel, l: usize) {
        let nl = model.n_hidden_layers();
        let below = if l == 0 { &self.chains_v } else { &self.chains_h[l - 1] };
        let mut x = below.dot(&model.weights[l]) + &model.hidden_biases[l];
        if l + 1 < nl {
            x += &self.chains_h[l + 1].dot(&model.weights[l + 1].t());
        }
        let mut p = sigmoid_inplace(x);
        bernoulli_inplace(&mut p, &mut self.rng);
        self.chains_h[l] = p;
    }

    fn sample_visible(&mut self, model: &DbmModel) {
        let x = self.chains_h[0].dot(&model.weights[0].t()) + &model.visible_bias;
        let mut p = sigmoid_inplace(x);
        bernoulli_inplace(&mut p, &mut self.rng);
        self.chains_v = p;
    }

    /// One Gibbs sweep: odd layers (h1, h3, ...) then even layers (v, h2, ...).
    pub fn gibbs_sweep(&mut self, model: &DbmModel) {
        let nl = model.n_hidden_layers();
        for l in (0..nl).step_by(2) {
            self.sample_hidden(model, l);
        }
        self.sample_visible(model);
        for l in (1..nl).step_by(2) {
            self.sample_hidden(model, l);
        }
    }

    pub fn update(&mut self, model: &mut DbmModel, batch: ArrayView2<f64>, lr: f64) -> Result<DbmGradient> {
        if model.frozen {
            return Err(WmError::FrozenModel);
        }
        if batch.nrows() == 0 {
            return Err(WmError::EmptyBatch);
        }
        let pos = model.mean_field_batch(batch, &self.mean_field)?;
        for _ in 0..self.k {
            self.gibbs_sweep(model);
        }
        let n = batch.nrows() as f64;
        let m = self.chains_v.nrows() as f64;
        let nl = model.n_hidden_layers();
        let mut weights = Vec::with_capacity(nl);
        for l in 0..nl {
            let (dl, fl) = if l == 0 {
                (batch.to_owned(), &self.chains_v)
            } else {
                (pos.mu[l - 1].clone(), &self.chains_h[l - 1])
            };
            weights.push(dl.t().dot(&pos.mu[l]) / n - fl.t().dot(&self.chains_h[l]) / m);
        }
        let visible_bias = batch.mean_axis(Axis(0)).expect("rows") - self.chains_v.mean_axis(Axis(0)).expect("rows");
        let hidden_biases = (0..nl)
            .map(|l| pos.mu[l].mean_axis(Axis(0)).expect("rows") - self.chains_h[l].mean_axis(Axis(0)).expect("rows"))
            .collect::<Vec<_>>();
        let grad = DbmGradient {
            weights,
            visible_bias,
            hidden_biases,
        };
        let mut neg: Vec<Vec<f64>> = grad.weights.iter().map(|w| w.iter().map(|x| -x).collect()).collect();
        neg.push(grad.visible_bias.iter().map(|x| -x).collect());
        neg.extend(
            grad.hidden_biases
                .iter()
                .map(|b| b.iter().map(|x| -x).collect::<Vec<f64>>()),
        );
        let grads: Vec<&[f64]> = neg.iter().map(|g| g.as_slice()).collect();
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * nl + 1);
        for w in model.weights.iter_mut() {
            params.push(w.as_slice_mut().expect("contiguous"));
        }
        params.push(model.visible_bias.as_slice_mut().expect("contiguous"));
        for b in model.hidden_biases.iter_mut() {
            params.push(b.as_slice_mut().expect("contiguous"));
        }
        self.opt.step(lr, &mut params, &grads);
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `recon[layer][epoch]`, mean cross-entropy on the monitor rows.
    pub recon: Vec<Vec<f64>>,
    /// Reconstruction error of each layer at initialisation.
    pub recon_init: Vec<f64>,
}

fn monitor_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.shuffle(rng);
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// Greedy layer-wise pretraining of the stack.
pub fn pretrain_stack(train: ArrayView2<f64>, cfg: &PretrainConfig, seed: u64) -> Result<(DbmModel, PretrainReport)> {
    let sizes = &cfg.layer_sizes;
    if sizes.len() < 2 {
        return Err(WmError::InvalidConfig("layer_sizes needs at least two entries".into()));
    }
    if train.nrows() == 0 {
        return Err(WmError::EmptyData);
    }
    if train.ncols() != sizes[0] {
        return Err(WmError::DimensionMismatch {
            what: "pretrain data",
            expected: sizes[0],
            got: train.ncols(),
        });
    }
    let n_layers = sizes.len() - 1;
    let mut layers: Vec<RbmLayer> = Vec::with_capacity(n_layers);
    let mut report = PretrainReport {
        recon: Vec::new(),
        recon_init: Vec::new(),
    };
    let mut data: Array2<f64> = train.to_owned();
    let n = data.nrows();
    let bs = cfg.pcd.batch_size.max(1);
    for l in 0..n_layers {
        let up = if l + 1 < n_layers { 2.0 } else { 1.0 };
        let down = if l > 0 { 2.0 } else { 1.0 };
        let mut init_rng = rng::stream(seed, "pretrain-init", l as u64, 0);
        let layer = RbmLayer {
            weights: normal_matrix(sizes[l], sizes[l + 1], cfg.pcd.init_std, &mut init_rng),
            bias_lower: logit_of_means(data.view()),
            bias_upper: Array1::zeros(sizes[l + 1]),
        };
        let mon = monitor_indices(n, cfg.monitor_rows, &mut init_rng);
        let mon_data = data.select(Axis(0), &mon);
        let mut pcd = RbmPcd::new(
            layer,
            &cfg.pcd,
            up,
            down,
            rng::stream(seed, "pretrain-chains", l as u64, 0),
        );
        report.recon_init.push(pcd.reconstruction_error(mon_data.view()));
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut sample_rng = rng::stream(seed, "pretrain-sample", l as u64, 0);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, "pretrain-shuffle", l as u64, epoch as u64));
            for chunk in order.chunks(bs) {
                let mut batch = data.select(Axis(0), chunk);
                if l > 0 {
                    bernoulli_inplace(&mut batch, &mut sample_rng);
                }
                pcd.update(batch.view(), cfg.lr)?;
            }
            let err = pcd.reconstruction_error(mon_data.view());
            info!("pretrain layer {} epoch {} recon {:.5}", l + 1, epoch + 1, err);
            curve.push(err);
        }
        report.recon.push(curve);
        data = sigmoid_inplace(data.dot(&pcd.layer.weights) * up + &pcd.layer.bias_upper);
        layers.push(pcd.layer);
    }
    let mut model = DbmModel::zeros(sizes);
    model.visible_bias = layers[0].bias_lower.clone();
    for l in 0..n_layers {
        model.weights[l] = layers[l].weights.clone();
        model.hidden_biases[l] = if l + 1 < n_layers {
            (&layers[l].bias_upper + &layers[l + 1].bias_lower) / 2.0
        } else {
            layers[l].bias_upper.clone()
        };
    }
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub f_train: f64,
    pub f_val: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub f_train_init: f64,
    pub f_val_init: f64,
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were returned (0 = pretrained).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Joint PCD fine-tuning with early stopping on the train/validation
/// free-energy gap: training stops once the gap has not reached a new
/// minimum for `patience` epochs. Returns the frozen model from the last
/// epoch run, or from the smallest-gap epoch with `restore_best`.
pub fn finetune_dbm(
    model: DbmModel,
    train: ArrayView2<f64>,
    val: ArrayView2<f64>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(DbmModel, FinetuneReport)> {
    if model.frozen {
        return Err(WmError::FrozenModel);
    }
    if train.nrows() == 0 || val.nrows() == 0 {
        return Err(WmError::EmptyData);
    }
    let mut mon_rng = rng::stream(seed, "finetune-monitor", 0, 0);
    let tr_mon = train.select(Axis(0), &monitor_indices(train.nrows(), cfg.monitor_rows, &mut mon_rng));
    let va_mon = val.select(Axis(0), &monitor_indices(val.nrows(), cfg.monitor_rows, &mut mon_rng));
    let score = |m: &DbmModel| -> Result<(f64, f64)> {
        let ft = mean(&m.variational_free_energy_batch(tr_mon.view(), &cfg.mean_field)?);
        let fv = mean(&m.variational_free_energy_batch(va_mon.view(), &cfg.mean_field)?);
        Ok((ft, fv))
    };
    let (f_train_init, f_val_init) = score(&model)?;
    let mut report = FinetuneReport {
        f_train_init,
        f_val_init,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    if cfg.epochs == 0 {
        return Ok((model.freeze(), report));
    }
    let mut current = model;
    let mut best: Option<DbmModel> = None;
    let mut best_gap: Option<f64> = None;
    let mut since_best = 0;
    let mut pcd = DbmPcd::new(
        &current,
        &cfg.pcd,
        cfg.mean_field,
        rng::stream(seed, "finetune-chains", 0, 0),
    );
    let n = train.nrows();
    let bs = cfg.pcd.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "finetune-shuffle", epoch as u64, 0));
        for chunk in order.chunks(bs) {
            let batch = train.select(Axis(0), chunk);
            pcd.update(&mut current, batch.view(), cfg.lr)?;
        }
        let (ft, fv) = score(&current)?;
        let gap = (fv - ft).abs();
        info!("finetune epoch {epoch} F(train) {ft:.4} F(val) {fv:.4} gap {gap:.4}");
        report.epochs.push(FinetuneEpoch {
            epoch,
            f_train: ft,
            f_val: fv,
            gap,
        });
        if best_gap.is_none_or(|g| gap < g) {
            best_gap = Some(gap);
            if cfg.restore_best {
                best = Some(current.clone());
                report.best_epoch = epoch;
            }
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let kept = match best {
        Some(m) => m,
        None => {
            report.best_epoch = report.epochs.len();
            current
        }
    };
    Ok((kept.freeze(), report))
}
