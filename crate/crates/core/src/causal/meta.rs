//! Meta-learner CATE baselines over random-forest base learners.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forest::{causal_forest_fit, rf_fit, ForestConfig, ForestMode};
use crate::error::{Result, WmError};
use crate::math::logit_clipped;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    S,
    T,
    XL,
    DR,
    CF,
    Adapter,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::S,
        Method::T,
        Method::XL,
        Method::DR,
        Method::CF,
        Method::Adapter,
    ];
    pub const BASELINES: [Method; 5] = [Method::S, Method::T, Method::XL, Method::DR, Method::CF];

    pub fn name(self) -> &'static str {
        match self {
            Method::S => "S",
            Method::T => "T",
            Method::XL => "XL",
            Method::DR => "DR",
            Method::CF => "CF",
            Method::Adapter => "Adapter",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::S => "S-learner",
            Method::T => "T-learner",
            Method::XL => "X-learner",
            Method::DR => "DR-learner",
            Method::CF => "Causal Forest",
            Method::Adapter => "Adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub forest: ForestConfig,
    pub propensity_eps: f64,
    pub logit_eps: f64,
    pub dr_folds: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            propensity_eps: 0.01,
            logit_eps: 1e-6,
            dr_folds: 2,
        }
    }
}

impl MetaConfig {
    fn forest_for(&self, tag: &str, k: u64) -> ForestConfig {
        ForestConfig {
            seed: rng::derive_seed(self.forest.seed, tag, k, 0),
            ..self.forest.clone()
        }
    }
}

/// Per-unit effect on both scales. For XL, DR and CF `tau_logit = tau_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutput {
    pub tau_prob: Vec<f64>,
    pub tau_logit: Vec<f64>,
}

fn check_inputs(x: ArrayView2<f64>, t: &[bool], y: &[bool], x_test: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(WmError::EmptyData);
    }
    for (what, got) in [("meta treatment", t.len()), ("meta outcome", y.len())] {
        if got != x.nrows() {
            return Err(WmError::DimensionMismatch {
                what,
                expected: x.nrows(),
                got,
            });
        }
    }
    if x_test.ncols() != x.ncols() {
        return Err(WmError::DimensionMismatch {
            what: "meta test features",
            expected: x.ncols(),
            got: x_test.ncols(),
        });
    }
    let n1 = t.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == t.len() {
        return Err(WmError::SingleArm);
    }
    Ok(())
}

fn as_f64(y: &[bool]) -> Vec<f64> {
    y.iter().map(|&v| f64::from(u8::from(v))).collect()
}

fn rows(x: ArrayView2<f64>, keep: impl Fn(usize) -> bool) -> (Array2<f64>, Vec<usize>) {
    let idx: Vec<usize> = (0..x.nrows()).filter(|&i| keep(i)).collect();
    (x.select(Axis(0), &idx), idx)
}

fn with_column(x: ArrayView2<f64>, value: f64) -> Array2<f64> {
    concatenate(Axis(1), &[x, Array2::from_elem((x.nrows(), 1), value).view()]).expect("same rows")
}

/// Outcome probability models fitted on each arm.
fn arm_models(
    x: ArrayView2<f64>,
    t: &[bool],
    y: &[f64],
    cfg: &MetaConfig,
    tag: &str,
) -> Result<(super::forest::ForestModel, super::forest::ForestModel)> {
    let (x0, i0) = rows(x, |i| !t[i]);
    let (x1, i1) = rows(x, |i| t[i]);
    let y0: Vec<f64> = i0.iter().map(|&i| y[i]).collect();
    let y1: Vec<f64> = i1.iter().map(|&i| y[i]).collect();
    let m0 = rf_fit(x0.view(), &y0, ForestMode::Probability, &cfg.forest_for(tag, 0))?;
    let m1 = rf_fit(x1.view(), &y1, ForestMode::Probability, &cfg.forest_for(tag, 1))?;
    Ok((m0, m1))
}

/// Doubly robust pseudo-outcome
/// `mu1 - mu0 + t (y - mu1) / e - (1 - t)(y - mu0) / (1 - e)`, `e` clipped.
pub fn dr_pseudo_outcome(mu0: f64, mu1: f64, e: f64, t: bool, y: f64, eps: f64) -> f64 {
    let e = e.clamp(eps, 1.0 - eps);
    if t {
        mu1 - mu0 + (y - mu1) / e
    } else {
        mu1 - mu0 - (y - mu0) / (1.0 - e)
    }
}

pub fn meta_cate(
    method: Method,
    x: ArrayView2<f64>,
    t: &[bool],
    y: &[bool],
    x_test: ArrayView2<f64>,
    cfg: &MetaConfig,
) -> Result<MetaOutput> {
    check_inputs(x, t, y, x_test)?;
    let yf = as_f64(y);
    let eps = cfg.logit_eps;
    match method {
        Method::S => {
            let tf: Vec<f64> = as_f64(t);
            let xt = concatenate(
                Axis(1),
                &[x, Array2::from_shape_vec((x.nrows(), 1), tf).expect("column").view()],
            )
            .expect("same rows");
            let m = rf_fit(xt.view(), &yf, ForestMode::Probability, &cfg.forest_for("s-learner", 0))?;
            let p1 = m.predict_rows(with_column(x_test, 1.0).view())?;
            let p0 = m.predict_rows(with_column(x_test, 0.0).view())?;
            Ok(two_arm_output(&p0, &p1, eps))
        }
        Method::T => {
            let (m0, m1) = arm_models(x, t, &yf, cfg, "t-learner")?;
            let p0 = m0.predict_rows(x_test)?;
            let p1 = m1.predict_rows(x_test)?;
            Ok(two_arm_output(&p0, &p1, eps))
        }
        Method::XL => {
            let (m0, m1) = arm_models(x, t, &yf, cfg, "x-learner-outcome")?;
            let (x0, i0) = rows(x, |i| !t[i]);
            let (x1, i1) = rows(x, |i| t[i]);
            let mu0_on_1 = m0.predict_rows(x1.view())?;
            let mu1_on_0 = m1.predict_rows(x0.view())?;
            let d1: Vec<f64> = i1.iter().zip(&mu0_on_1).map(|(&i, m)| yf[i] - m).collect();
            let d0: Vec<f64> = i0.iter().zip(&mu1_on_0).map(|(&i, m)| m - yf[i]).collect();
            let tau1 = rf_fit(
                x1.view(),
                &d1,
                ForestMode::Regression,
                &cfg.forest_for("x-learner-effect", 1),
            )?;
            let tau0 = rf_fit(
                x0.view(),
                &d0,
                ForestMode::Regression,
                &cfg.forest_for("x-learner-effect", 0),
            )?;
            let prop = rf_fit(
                x,
                &as_f64(t),
                ForestMode::Probability,
                &cfg.forest_for("x-learner-propensity", 0),
            )?;
            let e = prop.predict_rows(x_test)?;
            let a1 = tau1.predict_rows(x_test)?;
            let a0 = tau0.predict_rows(x_test)?;
            let tau: Vec<f64> = (0..x_test.nrows())
                .map(|i| {
                    let e = e[i].clamp(cfg.propensity_eps, 1.0 - cfg.propensity_eps);
                    (e * a0[i] + (1.0 - e) * a1[i]).clamp(-1.0, 1.0)
                })
                .collect();
            Ok(MetaOutput {
                tau_logit: tau.clone(),
                tau_prob: tau,
            })
        }
        Method::DR => {
            let n = x.nrows();
            let folds = cfg.dr_folds.max(2);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.forest.seed, "dr-folds", 0, 0));
            let mut fold_of = vec![0usize; n];
            for (k, &i) in order.iter().enumerate() {
                fold_of[i] = k % folds;
            }
            let mut phi = vec![0.0; n];
            for k in 0..folds {
                let (xf, train_idx) = rows(x, |i| fold_of[i] != k);
                let (xo, out_idx) = rows(x, |i| fold_of[i] == k);
                let tf: Vec<bool> = train_idx.iter().map(|&i| t[i]).collect();
                let yk: Vec<f64> = train_idx.iter().map(|&i| yf[i]).collect();
                let (m0, m1) = arm_models(xf.view(), &tf, &yk, cfg, &format!("dr-outcome-{k}"))?;
                let prop = rf_fit(
                    xf.view(),
                    &as_f64(&tf),
                    ForestMode::Probability,
                    &cfg.forest_for("dr-propensity", k as u64),
                )?;
                let mu0 = m0.predict_rows(xo.view())?;
                let mu1 = m1.predict_rows(xo.view())?;
                let e = prop.predict_rows(xo.view())?;
                for (r, &i) in out_idx.iter().enumerate() {
                    phi[i] = dr_pseudo_outcome(mu0[r], mu1[r], e[r], t[i], yf[i], cfg.propensity_eps);
                }
            }
            let fin = rf_fit(x, &phi, ForestMode::Regression, &cfg.forest_for("dr-final", 0))?;
            let tau: Vec<f64> = fin
                .predict_rows(x_test)?
                .into_iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect();
            Ok(MetaOutput {
                tau_logit: tau.clone(),
                tau_prob: tau,
            })
        }
        Method::CF => causal_forest_cate(x, t, y, x_test, cfg),
        Method::Adapter => Err(WmError::InvalidConfig("the adapter is not a meta-learner".into())),
    }
}

fn two_arm_output(p0: &[f64], p1: &[f64], eps: f64) -> MetaOutput {
    MetaOutput {
        tau_prob: p0.iter().zip(p1).map(|(a, b)| b - a).collect(),
        tau_logit: p0
            .iter()
            .zip(p1)
            .map(|(a, b)| logit_clipped(*b, eps) - logit_clipped(*a, eps))
            .collect(),
    }
}

pub fn causal_forest_cate(
    x: ArrayView2<f64>,
    t: &[bool],
    y: &[bool],
    x_test: ArrayView2<f64>,
    cfg: &MetaConfig,
) -> Result<MetaOutput> {
    check_inputs(x, t, y, x_test)?;
    let m = causal_forest_fit(x, t, &as_f64(y), &cfg.forest_for("causal-forest", 0))?;
    let tau: Vec<f64> = m
        .predict_rows(x_test)?
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(MetaOutput {
        tau_logit: tau.clone(),
        tau_prob: tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            forest: ForestConfig {
                n_trees: 20,
                max_depth: 6,
                min_leaf: 10,
                ..ForestConfig::default()
            },
            ..MetaConfig::default()
        }
    }

    fn design(n: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut r = rng::stream(seed, "design", 0, 0);
        let x = Array2::from_shape_fn((n, 4), |_| f64::from(u8::from(r.random_bool(0.5))));
        let t = (0..n).map(|_| r.random_bool(0.5)).collect();
        (x, t)
    }

    #[test]
    fn zero_outcome_gives_zero_tau() {
        let (x, t) = design(400, 1);
        let y = vec![false; 400];
        for m in Method::BASELINES {
            let out = meta_cate(m, x.view(), &t, &y, x.view(), &small_cfg()).unwrap();
            assert!(out.tau_prob.iter().all(|&v| v == 0.0), "{m:?}");
            assert!(out.tau_logit.iter().all(|&v| v == 0.0), "{m:?}");
        }
    }

    #[test]
    fn outcome_equal_to_treatment() {
        let (x, t) = design(2000, 2);
        let y = t.clone();
        for m in Method::BASELINES {
            let out = meta_cate(m, x.view(), &t, &y, x.view(), &small_cfg()).unwrap();
            let mean = out.tau_prob.iter().sum::<f64>() / out.tau_prob.len() as f64;
            assert!((0.8..=1.0).contains(&mean), "{m:?} mean tau {mean}");
        }
    }

    #[test]
    fn pseudo_outcome_with_zero_residual() {
        assert!((dr_pseudo_outcome(0.2, 0.7, 0.4, true, 0.7, 0.01) - 0.5).abs() < 1e-12);
        assert!((dr_pseudo_outcome(0.2, 0.7, 0.4, false, 0.2, 0.01) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_arm_is_an_error() {
        let (x, _) = design(50, 3);
        let t = vec![true; 50];
        assert!(matches!(
            meta_cate(Method::T, x.view(), &t, &t, x.view(), &small_cfg()),
            Err(WmError::SingleArm)
        ));
    }
}
