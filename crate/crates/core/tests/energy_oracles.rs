//! Free energies and joint energy against brute-force enumeration.

mod common;

use common::oracles::{brute_free_energy, random_bits, random_dbm, scalar_energy, uniform};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wm_core::ebm::{rbm_free_energy, DbmModel, FreeEnergyMode, MeanFieldConfig, RbmLayer};

fn tight() -> MeanFieldConfig {
    MeanFieldConfig {
        max_iters: 2000,
        tol: 1e-12,
        damping: 0.5,
    }
}

#[test]
fn rbm_free_energy_matches_enumeration_up_to_twelve_hidden() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for h in 1..=12 {
        for _ in 0..3 {
            let nv = 2 + (h % 5);
            let layer = RbmLayer {
                weights: Array2::from_shape_fn((nv, h), |_| uniform(&mut r, 1.5)),
                bias_lower: Array1::from_shape_fn(nv, |_| uniform(&mut r, 1.0)),
                bias_upper: Array1::from_shape_fn(h, |_| uniform(&mut r, 1.0)),
            };
            let v = random_bits(nv, &mut r);
            let dbm = DbmModel::from_single_rbm(layer.clone());
            let want = brute_free_energy(&dbm, &v);
            let got = rbm_free_energy(&layer, &v).unwrap();
            assert!((got - want).abs() < 1e-8, "H={h}: {got} vs {want}");
        }
    }
}

#[test]
fn tiny_rbm_matches_enumeration_to_1e10() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let m = random_dbm(&[4, 3], 1.0, &mut r);
    let layer = RbmLayer {
        weights: m.weights[0].clone(),
        bias_lower: m.visible_bias.clone(),
        bias_upper: m.hidden_biases[0].clone(),
    };
    for _ in 0..16 {
        let v = random_bits(4, &mut r);
        assert!((rbm_free_energy(&layer, &v).unwrap() - brute_free_energy(&m, &v)).abs() < 1e-10);
    }
}

#[test]
fn exact_mode_matches_enumeration_on_deep_models() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for sizes in [vec![4, 3, 2], vec![5, 4, 3, 2], vec![3, 2, 2, 2, 2], vec![6, 8, 6]] {
        for _ in 0..10 {
            let m = random_dbm(&sizes, 1.0, &mut r);
            let v = random_bits(sizes[0], &mut r);
            let got = m.free_energy(&v, FreeEnergyMode::Exact, &tight()).unwrap();
            let want = brute_free_energy(&m, &v);
            assert!((got - want).abs() < 1e-8, "{sizes:?}: {got} vs {want}");
        }
    }
}

#[test]
fn variational_free_energy_bounds_exact_on_100_tiny_models() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for k in 0..100 {
        let m = random_dbm(&[4, 3, 2], 0.5, &mut r);
        let v = random_bits(4, &mut r);
        let exact = brute_free_energy(&m, &v);
        let var = m.variational_free_energy(&v, &MeanFieldConfig::default()).unwrap();
        assert!(var >= exact - 1e-12, "model {k}: F_var {var} < F_exact {exact}");
        assert!(var - exact < 0.5, "model {k}: gap {}", var - exact);
    }
}

#[test]
fn joint_energy_matches_scalar_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for sizes in [vec![3, 2, 2], vec![72, 64, 32, 16], vec![5, 1]] {
        for _ in 0..20 {
            let m = random_dbm(&sizes, 1.0, &mut r);
            let v = random_bits(sizes[0], &mut r);
            let h: Vec<Vec<f64>> = sizes[1..].iter().map(|&d| random_bits(d, &mut r)).collect();
            let got = m.joint_energy(&v, &h).unwrap();
            assert!((got - scalar_energy(&m, &v, &h)).abs() < 1e-10);
        }
    }
    let m = DbmModel::zeros(&[3, 2, 2]);
    assert!(m.joint_energy(&[0.0; 3], &[vec![0.0; 2], vec![0.0; 3]]).is_err());
}

#[test]
fn visible_bias_shift_moves_free_energy_by_minus_delta_sum_v() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mut m = random_dbm(&[6, 4, 3], 1.0, &mut r);
        for w in m.weights.iter_mut() {
            w.fill(0.0);
        }
        let v = random_bits(6, &mut r);
        let delta = uniform(&mut r, 2.0);
        let f0 = m.variational_free_energy(&v, &tight()).unwrap();
        m.visible_bias.mapv_inplace(|b| b + delta);
        let f1 = m.variational_free_energy(&v, &tight()).unwrap();
        let sum_v: f64 = v.iter().sum();
        assert!((f1 - f0 + delta * sum_v).abs() < 1e-10);
    }
}

#[test]
fn single_layer_variational_agrees_with_closed_form() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let m = random_dbm(&[8, 5], 1.5, &mut r);
        let v = random_bits(8, &mut r);
        let layer = RbmLayer {
            weights: m.weights[0].clone(),
            bias_lower: m.visible_bias.clone(),
            bias_upper: m.hidden_biases[0].clone(),
        };
        let st = m.mean_field(&v, &MeanFieldConfig::default()).unwrap();
        assert!(st.converged);
        let fv = m.variational_free_energy(&v, &MeanFieldConfig::default()).unwrap();
        assert!((fv - rbm_free_energy(&layer, &v).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn beliefs_are_pure_and_in_the_open_interval() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let m = random_dbm(&[72, 64, 32, 16], 0.3, &mut r).freeze();
    let cfg = MeanFieldConfig::default();
    let v = random_bits(72, &mut r);
    let b1 = wm_core::ebm::belief(&m, &v, &cfg).unwrap();
    let b2 = wm_core::ebm::belief(&m, &v, &cfg).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(b1.values.len(), 112);
    assert!(b1.values.iter().all(|&x| x > 0.0 && x < 1.0));
    let st = m.mean_field(&v, &cfg).unwrap();
    assert_eq!(b1.values, st.mu.concat());
    if st.converged {
        assert!(m.mean_field_residual(&v, &st.mu) < cfg.tol);
    }
}
