//! Bernoulli-Bernoulli RBM / DBM world model.

mod model;
mod train;

pub use model::*;
pub use train::*;

use serde::Serialize;

/// Summary emitted by `wm-info`.
#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub layer_sizes: Vec<usize>,
    pub frozen: bool,
    pub schema_hash: String,
    pub fingerprint: String,
    pub weight_norms: Vec<f64>,
    pub visible_bias_norm: f64,
    pub hidden_bias_norms: Vec<f64>,
}

fn norm<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn model_info(model: &DbmModel) -> crate::Result<ModelInfo> {
    Ok(ModelInfo {
        layer_sizes: model.layer_sizes(),
        frozen: model.frozen,
        schema_hash: model.schema_hash.clone(),
        fingerprint: model.fingerprint()?,
        weight_norms: model.weights.iter().map(|w| norm(w.iter())).collect(),
        visible_bias_norm: norm(model.visible_bias.iter()),
        hidden_bias_norms: model.hidden_biases.iter().map(|b| norm(b.iter())).collect(),
    })
}
