use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Envelope, Kind};
use crate::error::{Result, WmError};
use crate::math::{bernoulli_entropy, sigmoid, softplus};

/// Enumeration limit for the exact free energy.
pub const EXACT_HIDDEN_LIMIT: usize = 20;

fn dim_check(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(WmError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// One Bernoulli-Bernoulli RBM: `E(x, h) = -xᵀWh - bᵀx - cᵀh`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmLayer {
    /// lower_dim × upper_dim
    pub weights: Array2<f64>,
    pub bias_lower: Array1<f64>,
    pub bias_upper: Array1<f64>,
}

impl RbmLayer {
    pub fn zeros(lower: usize, upper: usize) -> Self {
        Self {
            weights: Array2::zeros((lower, upper)),
            bias_lower: Array1::zeros(lower),
            bias_upper: Array1::zeros(upper),
        }
    }

    pub fn lower_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn upper_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `c + Wᵀx`
    pub fn upper_input(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias_upper.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weights.row(i)) {
                    *o += xi * w;
                }
            }
        }
        out
    }

    /// `F(x) = -bᵀx - Σ_j log(1 + exp(c_j + (Wᵀx)_j))`
    pub fn free_energy(&self, x: &[f64]) -> Result<f64> {
        dim_check("rbm visible", self.lower_dim(), x.len())?;
        let lin: f64 = x.iter().zip(&self.bias_lower).map(|(a, b)| a * b).sum();
        let hidden: f64 = self.upper_input(x).into_iter().map(softplus).sum();
        Ok(-lin - hidden)
    }
}

pub fn rbm_free_energy(layer: &RbmLayer, v: &[f64]) -> Result<f64> {
    layer.free_energy(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanFieldConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tol: 1e-4,
            damping: 0.5,
        }
    }
}

/// Row-aligned mean-field results for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldBatch {
    /// One `rows × layer_dim` matrix per hidden layer.
    pub mu: Vec<Array2<f64>>,
    pub iterations: Vec<u32>,
    pub converged: Vec<bool>,
    pub residual: Vec<f64>,
}

impl MeanFieldBatch {
    /// Concatenated belief of row `i`.
    pub fn belief_row(&self, i: usize) -> Vec<f64> {
        self.mu.iter().flat_map(|m| m.row(i).to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub mu: Vec<Vec<f64>>,
    pub iterations_used: usize,
    pub converged: bool,
    /// `max |σ(messages(μ)) - μ|` at the returned `μ`.
    pub residual: f64,
}

/// Stacked Bernoulli-Bernoulli deep Boltzmann machine.
///
/// `weights[l]` couples layer `l` (0 = visible) to layer `l + 1`;
/// `hidden_biases[l]` belongs to hidden layer `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DbmModel {
    pub weights: Vec<Array2<f64>>,
    pub visible_bias: Array1<f64>,
    pub hidden_biases: Vec<Array1<f64>>,
    pub frozen: bool,
    pub schema_hash: String,
}

impl DbmModel {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "need a visible and at least one hidden layer");
        Self {
            weights: layer_sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            visible_bias: Array1::zeros(layer_sizes[0]),
            hidden_biases: layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            frozen: false,
            schema_hash: String::new(),
        }
    }

    pub fn from_single_rbm(layer: RbmLayer) -> Self {
        Self {
            weights: vec![layer.weights],
            visible_bias: layer.bias_lower,
            hidden_biases: vec![layer.bias_upper],
            frozen: false,
            schema_hash: String::new(),
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.visible_bias.len()];
        s.extend(self.hidden_biases.iter().map(|b| b.len()));
        s
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.hidden_biases.len()
    }

    pub fn visible_dim(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn total_hidden(&self) -> usize {
        self.hidden_biases.iter().map(|b| b.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.layer_sizes();
        if self.weights.len() != self.hidden_biases.len() {
            return Err(WmError::Checkpoint("weight/bias layer count".into()));
        }
        for (l, w) in self.weights.iter().enumerate() {
            dim_check("dbm weight rows", sizes[l], w.nrows())?;
            dim_check("dbm weight cols", sizes[l + 1], w.ncols())?;
        }
        let finite = self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.visible_bias.iter().all(|x| x.is_finite())
            && self.hidden_biases.iter().all(|b| b.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(WmError::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Joint energy of a full configuration.
    pub fn joint_energy(&self, v: &[f64], h: &[Vec<f64>]) -> Result<f64> {
        dim_check("visible", self.visible_dim(), v.len())?;
        dim_check("hidden layer count", self.n_hidden_layers(), h.len())?;
        for (b, hl) in self.hidden_biases.iter().zip(h) {
            dim_check("hidden layer", b.len(), hl.len())?;
        }
        Ok(self.energy_unchecked(v, h))
    }

    fn energy_unchecked(&self, v: &[f64], h: &[Vec<f64>]) -> f64 {
        let mut e = 0.0;
        let mut lower: &[f64] = v;
        for (l, w) in self.weights.iter().enumerate() {
            let upper = &h[l];
            for (i, &x) in lower.iter().enumerate() {
                if x != 0.0 {
                    let row = w.row(i);
                    let s: f64 = row.iter().zip(upper).map(|(a, b)| a * b).sum();
                    e -= x * s;
                }
            }
            lower = upper;
        }
        e -= v.iter().zip(&self.visible_bias).map(|(a, b)| a * b).sum::<f64>();
        for (b, hl) in self.hidden_biases.iter().zip(h) {
            e -= hl.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
        }
        e
    }

    /// Total input to hidden layer `l` given the layer below and above.
    fn hidden_input(&self, l: usize, below: &[f64], above: Option<&[f64]>, out: &mut [f64]) {
        out.copy_from_slice(self.hidden_biases[l].as_slice().expect("contiguous bias"));
        let w = &self.weights[l];
        for (i, &x) in below.iter().enumerate() {
            if x != 0.0 {
                for (o, wv) in out.iter_mut().zip(w.row(i)) {
                    *o += x * wv;
                }
            }
        }
        if let Some(a) = above {
            let w2 = &self.weights[l + 1];
            for (i, o) in out.iter_mut().enumerate() {
                *o += w2.row(i).iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            }
        }
    }

    /// Single bottom-up pass with doubled input to every layer that also
    /// receives top-down input.
    fn bottom_up(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_hidden_layers();
        let mut mu: Vec<Vec<f64>> = Vec::with_capacity(n);
        for l in 0..n {
            let below: &[f64] = if l == 0 { v } else { &mu[l - 1] };
            let factor = if l + 1 < n { 2.0 } else { 1.0 };
            let mut out = self.hidden_biases[l].to_vec();
            for (i, &x) in below.iter().enumerate() {
                if x != 0.0 {
                    for (o, wv) in out.iter_mut().zip(self.weights[l].row(i)) {
                        *o += factor * x * wv;
                    }
                }
            }
            out.iter_mut().for_each(|o| *o = sigmoid(*o));
            mu.push(out);
        }
        mu
    }

    /// Mean-field messages `σ(input)` for every hidden layer at `mu`.
    fn messages(&self, v: &[f64], mu: &[Vec<f64>], out: &mut [Vec<f64>]) {
        let n = self.n_hidden_layers();
        for l in 0..n {
            let below: &[f64] = if l == 0 { v } else { &mu[l - 1] };
            let above = (l + 1 < n).then(|| mu[l + 1].as_slice());
            self.hidden_input(l, below, above, &mut out[l]);
            out[l].iter_mut().for_each(|o| *o = sigmoid(*o));
        }
    }

    /// Damped synchronous fixed-point iteration, started from a bottom-up
    /// pass. Stops at the first iterate whose residual is below `tol`.
    pub fn mean_field(&self, v: &[f64], cfg: &MeanFieldConfig) -> Result<MeanFieldState> {
        dim_check("visible", self.visible_dim(), v.len())?;
        let mut mu = self.bottom_up(v);
        let mut msg: Vec<Vec<f64>> = mu.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut residual = f64::INFINITY;
        let mut iterations_used = 0;
        let mut converged = false;
        for it in 1..=cfg.max_iters.max(1) {
            self.messages(v, &mu, &mut msg);
            residual = mu
                .iter()
                .zip(&msg)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            iterations_used = it;
            if residual < cfg.tol {
                converged = true;
                break;
            }
            if it == cfg.max_iters.max(1) {
                break;
            }
            for (m, g) in mu.iter_mut().zip(&msg) {
                for (x, y) in m.iter_mut().zip(g) {
                    *x = cfg.damping * *x + (1.0 - cfg.damping) * y;
                }
            }
        }
        if !converged {
            // Residual at the returned iterate.
            self.messages(v, &mu, &mut msg);
            residual = mu
                .iter()
                .zip(&msg)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
        }
        Ok(MeanFieldState {
            mu,
            iterations_used,
            converged,
            residual,
        })
    }

    /// Mean-field residual of an arbitrary `mu`.
    pub fn mean_field_residual(&self, v: &[f64], mu: &[Vec<f64>]) -> f64 {
        let mut msg: Vec<Vec<f64>> = mu.iter().map(|m| vec![0.0; m.len()]).collect();
        self.messages(v, mu, &mut msg);
        mu.iter()
            .zip(&msg)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Mean-field for a batch of rows. Each row runs its own iteration and
    /// stops on its own residual, so results do not depend on batch company.
    pub fn mean_field_batch(&self, v: ArrayView2<f64>, cfg: &MeanFieldConfig) -> Result<MeanFieldBatch> {
        dim_check("visible", self.visible_dim(), v.ncols())?;
        let n = v.nrows();
        let nl = self.n_hidden_layers();
        let max_iters = cfg.max_iters.max(1);
        let vis_in = v.dot(&self.weights[0]);
        // bottom-up initialisation
        let mut mu: Vec<Array2<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let factor = if l + 1 < nl { 2.0 } else { 1.0 };
            let pre = if l == 0 {
                vis_in.clone()
            } else {
                mu[l - 1].dot(&self.weights[l])
            };
            let mut m = pre * factor + &self.hidden_biases[l];
            m.mapv_inplace(sigmoid);
            mu.push(m);
        }
        let mut iterations = vec![0u32; n];
        let mut converged = vec![false; n];
        let mut residual = vec![f64::INFINITY; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut it = 0;
        while !active.is_empty() {
            it += 1;
            let sub: Vec<Array2<f64>> = mu.iter().map(|m| m.select(Axis(0), &active)).collect();
            let vin = vis_in.select(Axis(0), &active);
            let msg = self.messages_matrix(&vin, &sub);
            let mut still = Vec::with_capacity(active.len());
            for (r, &row) in active.iter().enumerate() {
                let res = row_residual(&sub, &msg, r);
                iterations[row] = it as u32;
                residual[row] = res;
                if res < cfg.tol {
                    converged[row] = true;
                } else if it < max_iters {
                    for l in 0..nl {
                        let mut dst = mu[l].row_mut(row);
                        for (d, (x, y)) in dst.iter_mut().zip(sub[l].row(r).iter().zip(msg[l].row(r))) {
                            *d = cfg.damping * x + (1.0 - cfg.damping) * y;
                        }
                    }
                    still.push(row);
                } else {
                    still.push(row);
                }
            }
            if it >= max_iters {
                break;
            }
            active = still;
        }
        if it >= max_iters && !active.is_empty() {
            // residual at the returned iterate for rows that ran out of iterations
            let open: Vec<usize> = active.iter().copied().filter(|&r| !converged[r]).collect();
            if !open.is_empty() {
                let sub: Vec<Array2<f64>> = mu.iter().map(|m| m.select(Axis(0), &open)).collect();
                let vin = vis_in.select(Axis(0), &open);
                let msg = self.messages_matrix(&vin, &sub);
                for (r, &row) in open.iter().enumerate() {
                    residual[row] = row_residual(&sub, &msg, r);
                }
            }
        }
        Ok(MeanFieldBatch {
            mu,
            iterations,
            converged,
            residual,
        })
    }

    /// Batched `σ(input)` for every hidden layer; `vis_in` is `v · W1`.
    fn messages_matrix(&self, vis_in: &Array2<f64>, mu: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let nl = self.n_hidden_layers();
        (0..nl)
            .map(|l| {
                let mut x = if l == 0 {
                    vis_in.clone()
                } else {
                    mu[l - 1].dot(&self.weights[l])
                };
                if l + 1 < nl {
                    x += &mu[l + 1].dot(&self.weights[l + 1].t());
                }
                x += &self.hidden_biases[l];
                x.mapv_inplace(sigmoid);
                x
            })
            .collect()
    }

    /// Variational free energy for every row of `v`.
    pub fn variational_free_energy_batch(&self, v: ArrayView2<f64>, cfg: &MeanFieldConfig) -> Result<Vec<f64>> {
        let st = self.mean_field_batch(v, cfg)?;
        Ok((0..v.nrows())
            .map(|i| {
                let mu: Vec<Vec<f64>> = st.mu.iter().map(|m| m.row(i).to_vec()).collect();
                let row = v.row(i).to_vec();
                self.variational_free_energy_at(&row, &mu)
            })
            .collect())
    }

    /// `E_q[E(v, h)] - H(q)` for a factorized `q` with means `mu`.
    pub fn variational_free_energy_at(&self, v: &[f64], mu: &[Vec<f64>]) -> f64 {
        let energy = self.energy_unchecked(v, mu);
        let entropy: f64 = mu.iter().flatten().map(|&p| bernoulli_entropy(p)).sum();
        energy - entropy
    }

    /// Mean-field variational free energy at the fixed point.
    pub fn variational_free_energy(&self, v: &[f64], cfg: &MeanFieldConfig) -> Result<f64> {
        let st = self.mean_field(v, cfg)?;
        Ok(self.variational_free_energy_at(v, &st.mu))
    }

    /// Exact `-log Σ_h exp(-E(v, h))`.
    ///
    /// Layers 2, 4, ... are enumerated; layers 1, 3, ... are summed out in
    /// closed form given their neighbours.
    pub fn exact_free_energy(&self, v: &[f64]) -> Result<f64> {
        dim_check("visible", self.visible_dim(), v.len())?;
        let n = self.n_hidden_layers();
        let enumerated: Vec<usize> = (1..n).step_by(2).collect();
        let n_enum: usize = enumerated.iter().map(|&l| self.hidden_biases[l].len()).sum();
        if n_enum > EXACT_HIDDEN_LIMIT {
            return Err(WmError::ExactUnavailable {
                limit: EXACT_HIDDEN_LIMIT,
                got: n_enum,
            });
        }
        let vis_term: f64 = v.iter().zip(&self.visible_bias).map(|(a, b)| a * b).sum();
        let mut h: Vec<Vec<f64>> = self.hidden_biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut terms = Vec::with_capacity(1 << n_enum);
        let mut scratch: Vec<Vec<f64>> = h.clone();
        for code in 0u64..(1u64 << n_enum) {
            let mut bit = 0;
            for &l in &enumerated {
                for x in h[l].iter_mut() {
                    *x = ((code >> bit) & 1) as f64;
                    bit += 1;
                }
            }
            let mut t = vis_term;
            for &l in &enumerated {
                t += h[l].iter().zip(&self.hidden_biases[l]).map(|(a, b)| a * b).sum::<f64>();
            }
            for l in (0..n).step_by(2) {
                let below: &[f64] = if l == 0 { v } else { &h[l - 1] };
                let above = (l + 1 < n).then(|| h[l + 1].as_slice());
                self.hidden_input(l, below, above, &mut scratch[l]);
                t += scratch[l].iter().map(|&x| softplus(x)).sum::<f64>();
            }
            terms.push(t);
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        Ok(-lse)
    }

    pub fn free_energy(&self, v: &[f64], mode: FreeEnergyMode, cfg: &MeanFieldConfig) -> Result<f64> {
        match mode {
            FreeEnergyMode::Variational => self.variational_free_energy(v, cfg),
            FreeEnergyMode::Exact => self.exact_free_energy(v),
        }
    }

    // --- checkpoint ---------------------------------------------------------

    pub fn to_envelope(&self) -> Result<Envelope> {
        let mut blocks: Vec<Vec<f64>> = self.weights.iter().map(|w| w.iter().copied().collect()).collect();
        blocks.push(self.visible_bias.to_vec());
        blocks.extend(self.hidden_biases.iter().map(|b| b.to_vec()));
        Ok(Envelope {
            kind: Kind::Dbm,
            dims: self.layer_sizes().iter().map(|&d| d as u32).collect(),
            flags: u32::from(self.frozen),
            schema_hash: checkpoint::hash_bytes(&self.schema_hash)?,
            parent_hash: [0; 32],
            blocks,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_envelope()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let e = Envelope::from_bytes(bytes)?;
        if e.kind != Kind::Dbm {
            return Err(WmError::Checkpoint("not a DBM checkpoint".into()));
        }
        let sizes: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
        if sizes.len() < 2 {
            return Err(WmError::Checkpoint("need at least two layers".into()));
        }
        let n = sizes.len() - 1;
        if e.blocks.len() != 2 * n + 1 {
            return Err(WmError::Checkpoint("block count".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for l in 0..n {
            let w = Array2::from_shape_vec((sizes[l], sizes[l + 1]), e.blocks[l].clone())
                .map_err(|err| WmError::Checkpoint(err.to_string()))?;
            weights.push(w);
        }
        let m = Self {
            weights,
            visible_bias: Array1::from(e.blocks[n].clone()),
            hidden_biases: e.blocks[n + 1..].iter().map(|b| Array1::from(b.clone())).collect(),
            frozen: e.flags & 1 == 1,
            schema_hash: checkpoint::hash_hex(&e.schema_hash),
        };
        m.validate()?;
        Ok(m)
    }

    /// SHA-256 of the checkpoint bytes; identifies the world model.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(checkpoint::sha256_hex(&self.to_bytes()?))
    }
}

fn row_residual(a: &[Array2<f64>], b: &[Array2<f64>], r: usize) -> f64 {
    let mut m = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.row(r).iter().zip(y.row(r)) {
            m = m.max((p - q).abs());
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeEnergyMode {
    Variational,
    Exact,
}

pub fn joint_energy(model: &DbmModel, v: &[f64], h: &[Vec<f64>]) -> Result<f64> {
    model.joint_energy(v, h)
}

pub fn mean_field(model: &DbmModel, v: &[f64], cfg: &MeanFieldConfig) -> Result<MeanFieldState> {
    model.mean_field(v, cfg)
}

pub fn dbm_free_energy(model: &DbmModel, v: &[f64], cfg: &MeanFieldConfig) -> Result<f64> {
    model.variational_free_energy(v, cfg)
}

/// Concatenated mean-field activations of a frozen world model.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub values: Vec<f64>,
    /// Fingerprint of the world model that produced it.
    pub world_model: String,
}

/// Belief extraction with the frozen-model check and fingerprint done once.
#[derive(Debug, Clone)]
pub struct BeliefExtractor<'a> {
    model: &'a DbmModel,
    fingerprint: String,
    cfg: MeanFieldConfig,
}

impl<'a> BeliefExtractor<'a> {
    pub fn new(model: &'a DbmModel, cfg: MeanFieldConfig) -> Result<Self> {
        if !model.frozen {
            return Err(WmError::NotFrozen);
        }
        Ok(Self {
            model,
            fingerprint: model.fingerprint()?,
            cfg,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.model.total_hidden()
    }

    pub fn state(&self, v: &[f64]) -> Result<MeanFieldState> {
        self.model.mean_field(v, &self.cfg)
    }

    pub fn belief(&self, v: &[f64]) -> Result<Belief> {
        let st = self.state(v)?;
        Ok(Belief {
            values: st.mu.concat(),
            world_model: self.fingerprint.clone(),
        })
    }
}

pub fn belief(model: &DbmModel, v: &[f64], cfg: &MeanFieldConfig) -> Result<Belief> {
    BeliefExtractor::new(model, *cfg)?.belief(v)
}
