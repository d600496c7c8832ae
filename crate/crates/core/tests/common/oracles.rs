//! Brute-force references for energies and free energies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wm_core::ebm::DbmModel;

pub fn uniform(r: &mut ChaCha8Rng, scale: f64) -> f64 {
    r.random_range(-scale..scale)
}

pub fn random_dbm(sizes: &[usize], scale: f64, r: &mut ChaCha8Rng) -> DbmModel {
    let mut m = DbmModel::zeros(sizes);
    for w in m.weights.iter_mut() {
        w.mapv_inplace(|_| uniform(r, scale));
    }
    m.visible_bias.mapv_inplace(|_| uniform(r, scale));
    for b in m.hidden_biases.iter_mut() {
        b.mapv_inplace(|_| uniform(r, scale));
    }
    m
}

pub fn random_bits(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| f64::from(u8::from(r.random::<bool>()))).collect()
}

/// The joint energy written out term by term with plain loops.
pub fn scalar_energy(m: &DbmModel, v: &[f64], h: &[Vec<f64>]) -> f64 {
    let layers: Vec<&[f64]> = std::iter::once(v).chain(h.iter().map(|x| x.as_slice())).collect();
    let mut e = 0.0;
    for (l, w) in m.weights.iter().enumerate() {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                e -= layers[l][i] * w[[i, j]] * layers[l + 1][j];
            }
        }
    }
    for (b, x) in m.visible_bias.iter().zip(v) {
        e -= b * x;
    }
    for (l, b) in m.hidden_biases.iter().enumerate() {
        for j in 0..b.len() {
            e -= b[j] * h[l][j];
        }
    }
    e
}

/// `-log Σ_h exp(-E(v, h))` over every joint hidden state.
pub fn brute_free_energy(m: &DbmModel, v: &[f64]) -> f64 {
    let dims: Vec<usize> = m.hidden_biases.iter().map(|b| b.len()).collect();
    let total: usize = dims.iter().sum();
    let mut terms = Vec::with_capacity(1 << total);
    for code in 0u64..(1u64 << total) {
        let mut bit = 0;
        let h: Vec<Vec<f64>> = dims
            .iter()
            .map(|&d| {
                (0..d)
                    .map(|_| {
                        let x = ((code >> bit) & 1) as f64;
                        bit += 1;
                        x
                    })
                    .collect()
            })
            .collect();
        terms.push(-scalar_energy(m, v, &h));
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
}
