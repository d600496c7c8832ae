//! MLP heads: belief adapters and the raw-feature baseline.

use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Envelope, Kind};
use crate::ebm::Belief;
use crate::error::{Result, WmError};
use crate::math::{sigmoid, softplus};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::simgen::ActionVector;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `[belief; action]`, 112 + 5 inputs.
    BeliefAction,
    /// `[visible bits; action]`, 72 + 5 inputs.
    RawAction,
}

impl InputKind {
    fn code(self) -> u32 {
        match self {
            InputKind::BeliefAction => 1,
            InputKind::RawAction => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            1 => Ok(InputKind::BeliefAction),
            2 => Ok(InputKind::RawAction),
            _ => Err(WmError::Checkpoint(format!("unknown input kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Visit,
    Purchase,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Visit, Task::Purchase];

    pub fn name(self) -> &'static str {
        match self {
            Task::Visit => "visit",
            Task::Purchase => "purchase",
        }
    }
}

/// Feed-forward rectifier network with a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `out × in` per layer.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input_kind: InputKind,
    /// Fingerprint of the world model whose beliefs this model consumes.
    pub world_model: String,
    pub schema_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpModel {
    pub fn zeros(dims: &[usize], input_kind: InputKind) -> Self {
        assert!(
            dims.len() >= 2 && *dims.last().unwrap() == 1,
            "dims must end in a single logit"
        );
        Self {
            weights: dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect(),
            biases: dims[1..].iter().map(|&d| Array1::zeros(d)).collect(),
            input_kind,
            world_model: String::new(),
            schema_hash: String::new(),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation of weights and biases.
    pub fn init(dims: &[usize], input_kind: InputKind, seed: u64) -> Self {
        let mut m = Self::zeros(dims, input_kind);
        let mut r = rng::stream(seed, "mlp-init", 0, 0);
        for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| r.random_range(-bound..bound));
            b.mapv_inplace(|_| r.random_range(-bound..bound));
        }
        m
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.biases.iter().map(|b| b.len()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(WmError::DimensionMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Pre-sigmoid output for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x.len())?;
        let a = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        Ok(self.forward_batch_unchecked(a.view())[0])
    }

    /// Logits for every row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_batch_unchecked(x))
    }

    fn forward_batch_unchecked(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let last = self.weights.len() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = a.dot(&w.t()) + b;
            if l < last {
                a.mapv_inplace(|z| z.max(0.0));
            }
        }
        a.column(0).to_owned()
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_batch(x)?.mapv(sigmoid))
    }

    /// Mean binary cross-entropy and its gradient for a batch.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: &[f64]) -> Result<(f64, MlpGradient)> {
        self.check_input(x.ncols())?;
        if x.nrows() == 0 {
            return Err(WmError::EmptyBatch);
        }
        if y.len() != x.nrows() {
            return Err(WmError::DimensionMismatch {
                what: "mlp labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let n = x.nrows() as f64;
        let last = self.weights.len() - 1;
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t()) + b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        let logits = acts[last + 1].column(0);
        let loss = logits.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n;
        let mut delta = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| (sigmoid(logits[i]) - y[i]) / n);
        let mut gw = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut gb = vec![Array1::zeros(0); self.weights.len()];
        for l in (0..=last).rev() {
            gw[l] = delta.t().dot(&acts[l]);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                back.zip_mut_with(&acts[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        Ok((
            loss,
            MlpGradient {
                weights: gw,
                biases: gb,
            },
        ))
    }

    /// Mean binary cross-entropy only.
    pub fn loss(&self, x: ArrayView2<f64>, y: &[f64]) -> Result<f64> {
        let z = self.forward_batch(x)?;
        Ok(z.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / y.len().max(1) as f64)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("contiguous"));
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    fn param_shapes(&self) -> Vec<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() || self.weights.is_empty() {
            return Err(WmError::Checkpoint("mlp layer count".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() || (l > 0 && w.ncols() != self.weights[l - 1].nrows()) {
                return Err(WmError::Checkpoint("mlp dims do not chain".into()));
            }
        }
        if self.biases.last().map(|b| b.len()) != Some(1) {
            return Err(WmError::Checkpoint("mlp output must be one logit".into()));
        }
        let finite = self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(WmError::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blocks = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.iter().copied().collect::<Vec<f64>>(), b.to_vec()])
            .collect();
        Ok(Envelope {
            kind: Kind::Mlp,
            dims: self.dims().iter().map(|&d| d as u32).collect(),
            flags: self.input_kind.code(),
            schema_hash: checkpoint::hash_bytes(&self.schema_hash)?,
            parent_hash: checkpoint::hash_bytes(&self.world_model)?,
            blocks,
        }
        .to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let e = Envelope::from_bytes(bytes)?;
        if e.kind != Kind::Mlp {
            return Err(WmError::Checkpoint("not an MLP checkpoint".into()));
        }
        let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
        if dims.len() < 2 || e.blocks.len() != 2 * (dims.len() - 1) {
            return Err(WmError::Checkpoint("mlp block count".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            weights.push(
                Array2::from_shape_vec((dims[l + 1], dims[l]), e.blocks[2 * l].clone())
                    .map_err(|err| WmError::Checkpoint(err.to_string()))?,
            );
            biases.push(Array1::from(e.blocks[2 * l + 1].clone()));
        }
        let m = Self {
            weights,
            biases,
            input_kind: InputKind::from_code(e.flags)?,
            world_model: checkpoint::hash_hex(&e.parent_hash),
            schema_hash: checkpoint::hash_hex(&e.schema_hash),
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<f64> {
    model.forward(x)
}

/// `[belief; action]`
pub fn adapter_input(belief: &[f64], z: &ActionVector) -> Vec<f64> {
    let mut x = belief.to_vec();
    x.extend(z.to_bits().iter().map(|&b| f64::from(b)));
    x
}

/// `σ(g([b; z]))`; the belief must come from the adapter's world model.
pub fn predict_proba(model: &MlpModel, b: &Belief, z: &ActionVector) -> Result<f64> {
    if model.input_kind != InputKind::BeliefAction {
        return Err(WmError::InvalidConfig("predict_proba needs a belief adapter".into()));
    }
    if b.world_model != model.world_model {
        return Err(WmError::SchemaMismatch {
            expected: model.world_model.clone(),
            got: b.world_model.clone(),
        });
    }
    Ok(sigmoid(model.forward(&adapter_input(&b.values, z))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 16],
            max_epochs: 100,
            patience: 30,
            batch_size: 512,
            lr: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(WmError::InvalidConfig("patience exceeds max_epochs".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(WmError::InvalidConfig("max_epochs, batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Adam on mean binary cross-entropy; keeps the epoch with the best
/// validation AUC and stops after `patience` epochs without improvement.
pub fn train_mlp(
    train_x: ArrayView2<f64>,
    train_y: &[bool],
    val_x: ArrayView2<f64>,
    val_y: &[bool],
    input_kind: InputKind,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if train_x.nrows() == 0 || val_x.nrows() == 0 {
        return Err(WmError::EmptyData);
    }
    for (rows, labels, what) in [
        (train_x.nrows(), train_y.len(), "train labels"),
        (val_x.nrows(), val_y.len(), "val labels"),
    ] {
        if rows != labels {
            return Err(WmError::DimensionMismatch {
                what,
                expected: rows,
                got: labels,
            });
        }
    }
    let pos = train_y.iter().filter(|&&y| y).count();
    if pos == 0 || pos == train_y.len() {
        return Err(WmError::SingleClass);
    }
    let mut dims = vec![train_x.ncols()];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut model = MlpModel::init(&dims, input_kind, cfg.seed);
    let mut opt = Adam::new(cfg.adam, &model.param_shapes());
    let yf: Vec<f64> = train_y.iter().map(|&y| f64::from(u8::from(y))).collect();
    let n = train_x.nrows();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_auc: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
    };
    let mut best = model.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "mlp-shuffle", epoch as u64, 0));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train_x.select(Axis(0), chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| yf[i]).collect();
            let (loss, g) = model.loss_and_grad(xb.view(), &yb)?;
            total += loss * chunk.len() as f64;
            let grads: Vec<&[f64]> = g
                .weights
                .iter()
                .zip(&g.biases)
                .flat_map(|(w, b)| [w.as_slice().expect("contiguous"), b.as_slice().expect("contiguous")])
                .collect();
            opt.step(cfg.lr, &mut model.param_slices_mut(), &grads);
        }
        report.train_loss.push(total / n as f64);
        let val_scores = model.forward_batch(val_x)?;
        let auc = stats::auc(val_scores.as_slice().expect("contiguous"), val_y).unwrap_or(0.5);
        report.val_auc.push(auc);
        info!("mlp epoch {epoch} loss {:.5} val auc {auc:.4}", total / n as f64);
        if auc > report.best_val_auc {
            report.best_val_auc = auc;
            report.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    Ok((best, report))
}

/// Logits for `x` in chunks, to bound memory on large panels.
pub fn forward_chunked(model: &MlpModel, x: ArrayView2<f64>, chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk.max(1)).min(x.nrows());
        out.extend(model.forward_batch(x.slice(ndarray::s![start..end, ..]))?);
        start = end;
    }
    Ok(out)
}
