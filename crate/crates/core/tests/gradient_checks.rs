//! Analytic gradients against finite differences and hand derivations.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wm_core::adapter::{InputKind, MlpModel};
use wm_core::ebm::{DbmModel, DbmPcd, MeanFieldConfig, PcdConfig, RbmLayer, RbmPcd};
use wm_core::rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Plain column means in row order.
fn column_means(x: &Array2<f64>) -> Vec<f64> {
    let mut s = vec![0.0; x.ncols()];
    for row in x.rows() {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s.iter().map(|v| v / x.nrows() as f64).collect()
}

#[test]
fn mlp_backprop_matches_central_differences_on_20_models() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let din = 3 + k % 4;
        let dims = match k % 3 {
            0 => vec![din, 4, 1],
            1 => vec![din, 5, 3, 1],
            _ => vec![din, 4, 3, 2, 1],
        };
        let mut m = MlpModel::init(&dims, InputKind::BeliefAction, k as u64);
        let rows = 6;
        let x = Array2::from_shape_fn((rows, din), |_| r.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..rows).map(|_| f64::from(u8::from(r.random::<bool>()))).collect();
        let (_, g) = m.loss_and_grad(x.view(), &y).unwrap();
        for l in 0..m.weights.len() {
            for idx in 0..m.weights[l].len() {
                let (i, j) = (idx / m.weights[l].ncols(), idx % m.weights[l].ncols());
                let w0 = m.weights[l][[i, j]];
                m.weights[l][[i, j]] = w0 + EPS;
                let lp = m.loss(x.view(), &y).unwrap();
                m.weights[l][[i, j]] = w0 - EPS;
                let lm = m.loss(x.view(), &y).unwrap();
                m.weights[l][[i, j]] = w0;
                let fd = (lp - lm) / (2.0 * EPS);
                let e = rel_err(g.weights[l][[i, j]], fd);
                worst = worst.max(e);
                assert!(e < REL_TOL, "model {k} W{l}[{i},{j}]: {} vs {fd}", g.weights[l][[i, j]]);
            }
            for j in 0..m.biases[l].len() {
                let b0 = m.biases[l][j];
                m.biases[l][j] = b0 + EPS;
                let lp = m.loss(x.view(), &y).unwrap();
                m.biases[l][j] = b0 - EPS;
                let lm = m.loss(x.view(), &y).unwrap();
                m.biases[l][j] = b0;
                let fd = (lp - lm) / (2.0 * EPS);
                let e = rel_err(g.biases[l][j], fd);
                worst = worst.max(e);
                assert!(e < REL_TOL, "model {k} b{l}[{j}]: {} vs {fd}", g.biases[l][j]);
            }
        }
    }
    assert!(worst < REL_TOL);
}

#[test]
fn rbm_visible_bias_gradient_is_data_minus_fantasy_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let data = Array2::from_shape_fn((40, 9), |_| f64::from(u8::from(r.random::<f64>() < 0.3)));
    let layer = RbmLayer {
        weights: Array2::from_shape_fn((9, 4), |_| r.random_range(-0.1..0.1)),
        bias_lower: Array1::zeros(9),
        bias_upper: Array1::zeros(4),
    };
    let mut pcd = RbmPcd::new(layer, &PcdConfig::default(), 1.0, 1.0, rng::stream(3, "chains", 0, 0));
    for step in 0..5 {
        let g = pcd.update(data.view(), 1e-2).unwrap();
        let dm = column_means(&data);
        let fm = column_means(&pcd.chains);
        for j in 0..9 {
            assert_eq!(g.bias_lower[j], dm[j] - fm[j], "step {step} unit {j}");
        }
    }
}

#[test]
fn dbm_visible_bias_gradient_is_data_minus_fantasy_mean() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let data = Array2::from_shape_fn((30, 7), |_| f64::from(u8::from(r.random::<f64>() < 0.4)));
    let mut model = DbmModel::zeros(&[7, 5, 3]);
    for w in model.weights.iter_mut() {
        w.mapv_inplace(|_| r.random_range(-0.2..0.2));
    }
    let cfg = PcdConfig {
        n_chains: 16,
        ..PcdConfig::default()
    };
    let mut pcd = DbmPcd::new(&model, &cfg, MeanFieldConfig::default(), rng::stream(4, "chains", 0, 0));
    for _ in 0..3 {
        let g = pcd.update(&mut model, data.view(), 1e-2).unwrap();
        let dm = column_means(&data);
        let fm = column_means(&pcd.chains_v);
        for j in 0..7 {
            assert_eq!(g.visible_bias[j], dm[j] - fm[j]);
        }
        assert_eq!(g.visible_bias.len(), data.len_of(Axis(1)));
    }
}
