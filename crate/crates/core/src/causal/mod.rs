//! Counterfactual queries on the world model and CATE baselines.

pub mod forest;
pub mod meta;

pub use forest::{causal_forest_fit, rf_fit, rf_predict, ForestConfig, ForestMode, ForestModel};
pub use meta::{causal_forest_cate, dr_pseudo_outcome, meta_cate, MetaConfig, MetaOutput, Method};

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_input, MlpModel, Task};
use crate::ebm::{Belief, DbmModel, MeanFieldConfig};
use crate::encode::{BitMatrix, ClampSpec, ResolvedClamp, Schema, VisibleVector};
use crate::error::{Result, WmError};
use crate::math::{mean, sigmoid, std_dev};
use crate::simgen::{Action, ActionVector, LatentTraits};
use crate::stats::{self, TestResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    PushVisit,
    Sale1Purchase,
}

impl Intervention {
    pub const ALL: [Intervention; 2] = [Intervention::PushVisit, Intervention::Sale1Purchase];

    pub fn action(self) -> Action {
        match self {
            Intervention::PushVisit => Action::Push,
            Intervention::Sale1Purchase => Action::Sale1,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Intervention::PushVisit => Task::Visit,
            Intervention::Sale1Purchase => Task::Purchase,
        }
    }

    /// Latent parameter the effect should track.
    pub fn target(self) -> Param {
        match self {
            Intervention::PushVisit => Param::Gamma,
            Intervention::Sale1Purchase => Param::Alpha,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intervention::PushVisit => "push->visit",
            Intervention::Sale1Purchase => "sale1->purchase",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Alpha,
    Beta,
    Gamma,
}

impl Param {
    pub const ALL: [Param; 3] = [Param::Alpha, Param::Beta, Param::Gamma];

    pub fn of(self, t: &LatentTraits) -> f64 {
        match self {
            Param::Alpha => t.alpha,
            Param::Beta => t.beta,
            Param::Gamma => t.gamma,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::Alpha => "alpha",
            Param::Beta => "beta",
            Param::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub consumer_id: u32,
    pub day: u32,
    pub method: Method,
    pub intervention: Action,
    pub tau_prob: f64,
    pub tau_logit: f64,
}

/// Effect of toggling one action bit with the belief held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Toggle {
    pub logit_on: f64,
    pub logit_off: f64,
}

impl Toggle {
    pub fn tau_logit(&self) -> f64 {
        self.logit_on - self.logit_off
    }

    pub fn tau_prob(&self) -> f64 {
        sigmoid(self.logit_on) - sigmoid(self.logit_off)
    }
}

pub fn adapter_cate(adapter: &MlpModel, b: &Belief, z: &ActionVector, j: usize) -> Result<Toggle> {
    let a = Action::from_index(j)?;
    if b.world_model != adapter.world_model {
        return Err(WmError::SchemaMismatch {
            expected: adapter.world_model.clone(),
            got: b.world_model.clone(),
        });
    }
    let on = adapter_input(&b.values, &z.with(a, true));
    let off = adapter_input(&b.values, &z.with(a, false));
    let x = Array2::from_shape_vec((2, on.len()), [on, off].concat()).map_err(|e| WmError::Format(e.to_string()))?;
    let l = adapter.forward_batch(x.view())?;
    Ok(Toggle {
        logit_on: l[0],
        logit_off: l[1],
    })
}

/// `[belief; action]` rows with action bit `j` forced to `value`.
pub fn adapter_matrix(
    beliefs: ArrayView2<f64>,
    actions: &[ActionVector],
    toggle: Option<(Action, bool)>,
) -> Array2<f64> {
    let d = beliefs.ncols();
    let mut x = Array2::zeros((beliefs.nrows(), d + ActionVector::DIM));
    for (i, (b, z)) in beliefs.rows().into_iter().zip(actions).enumerate() {
        let z = match toggle {
            Some((a, v)) => z.with(a, v),
            None => *z,
        };
        let mut row = x.row_mut(i);
        for (o, v) in row.iter_mut().zip(b) {
            *o = *v;
        }
        for (k, bit) in z.to_bits().iter().enumerate() {
            row[d + k] = f64::from(*bit);
        }
    }
    x
}

/// Toggle effects for a batch of rows. Both arms share the belief rows.
pub fn adapter_cate_batch(
    adapter: &MlpModel,
    beliefs: ArrayView2<f64>,
    actions: &[ActionVector],
    j: usize,
) -> Result<Vec<Toggle>> {
    let a = Action::from_index(j)?;
    if beliefs.nrows() != actions.len() {
        return Err(WmError::DimensionMismatch {
            what: "cate actions",
            expected: beliefs.nrows(),
            got: actions.len(),
        });
    }
    let on = adapter.forward_batch(adapter_matrix(beliefs, actions, Some((a, true))).view())?;
    let off = adapter.forward_batch(adapter_matrix(beliefs, actions, Some((a, false))).view())?;
    Ok(on
        .iter()
        .zip(off.iter())
        .map(|(&logit_on, &logit_off)| Toggle { logit_on, logit_off })
        .collect())
}

/// `F(v_clamped) - F(v)`, or `None` when `v` is not eligible.
pub fn delta_free_energy(
    model: &DbmModel,
    v: &VisibleVector,
    spec: &ClampSpec,
    schema: &Schema,
    cfg: &MeanFieldConfig,
) -> Result<Option<f64>> {
    if !model.frozen {
        return Err(WmError::NotFrozen);
    }
    let resolved = spec.resolve(schema)?;
    let (clamped, eligible) = resolved.apply(v.bits());
    if !eligible {
        return Ok(None);
    }
    let x0 = v.to_f64();
    let x1: Vec<f64> = clamped.iter().map(|&b| f64::from(b)).collect();
    Ok(Some(
        model.variational_free_energy(&x1, cfg)? - model.variational_free_energy(&x0, cfg)?,
    ))
}

/// Clamp every row of `v`; ineligible rows give `None`.
pub fn delta_free_energy_batch(
    model: &DbmModel,
    v: &BitMatrix,
    clamp: &ResolvedClamp,
    cfg: &MeanFieldConfig,
    chunk: usize,
) -> Result<Vec<Option<f64>>> {
    if !model.frozen {
        return Err(WmError::NotFrozen);
    }
    let eligible: Vec<usize> = (0..v.rows).filter(|&i| clamp.eligible(v.row(i))).collect();
    let mut out = vec![None; v.rows];
    for part in eligible.chunks(chunk.max(1)) {
        let orig = v.select(part);
        let mut clamped = BitMatrix::new(v.cols);
        for i in 0..orig.rows {
            clamped.push_row(&clamp.apply(orig.row(i)).0);
        }
        let f0 = model.variational_free_energy_batch(orig.to_f64().view(), cfg)?;
        let f1 = model.variational_free_energy_batch(clamped.to_f64().view(), cfg)?;
        for (k, &i) in part.iter().enumerate() {
            out[i] = Some(f1[k] - f0[k]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl GroupStats {
    fn of(x: &[f64]) -> Self {
        Self {
            n: x.len(),
            mean: mean(x),
            sd: if x.len() > 1 { std_dev(x) } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub split: String,
    pub n_samples: usize,
    pub eligible: usize,
    pub delta_f: GroupStats,
    pub paired_t: TestResult,
    pub wilcoxon: TestResult,
    pub beta_median: f64,
    pub high_beta: GroupStats,
    pub low_beta: GroupStats,
    pub welch_t: TestResult,
    pub mann_whitney: TestResult,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub values: Vec<f64>,
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Tests on eligible ΔF values; `beta` is the true base preference of each
/// sample's consumer. High β means strictly above the median.
pub fn energy_report(
    split: &str,
    n_samples: usize,
    delta_f: &[f64],
    beta: &[f64],
    keep_values: bool,
) -> Result<EnergyReport> {
    if delta_f.len() != beta.len() {
        return Err(WmError::DimensionMismatch {
            what: "energy beta",
            expected: delta_f.len(),
            got: beta.len(),
        });
    }
    if delta_f.is_empty() {
        return Err(WmError::EmptyData);
    }
    let med = median(beta);
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for (&d, &b) in delta_f.iter().zip(beta) {
        if b > med {
            hi.push(d)
        } else {
            lo.push(d)
        }
    }
    Ok(EnergyReport {
        split: split.to_string(),
        n_samples,
        eligible: delta_f.len(),
        delta_f: GroupStats::of(delta_f),
        paired_t: stats::paired_t(delta_f)?,
        wilcoxon: stats::wilcoxon(delta_f)?,
        beta_median: med,
        high_beta: GroupStats::of(&hi),
        low_beta: GroupStats::of(&lo),
        welch_t: stats::welch_t(&hi, &lo)?,
        mann_whitney: stats::mann_whitney(&hi, &lo)?,
        values: if keep_values { delta_f.to_vec() } else { Vec::new() },
    })
}

/// Spearman ρ of one method's effects against α, β, γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

impl RhoRow {
    pub fn get(&self, p: Param) -> Option<f64> {
        match p {
            Param::Alpha => self.alpha,
            Param::Beta => self.beta,
            Param::Gamma => self.gamma,
        }
    }
}

/// ρ against every latent parameter. With `per_consumer`, effects are
/// first averaged per consumer. Constant effects give `None`.
pub fn rho_row(
    tau: &[f64],
    consumer_ids: &[u32],
    traits: &BTreeMap<u32, LatentTraits>,
    per_consumer: bool,
) -> Result<RhoRow> {
    if tau.len() != consumer_ids.len() {
        return Err(WmError::DimensionMismatch {
            what: "rho consumers",
            expected: tau.len(),
            got: consumer_ids.len(),
        });
    }
    let (x, ids): (Vec<f64>, Vec<u32>) = if per_consumer {
        let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (&t, &c) in tau.iter().zip(consumer_ids) {
            let e = acc.entry(c).or_insert((0.0, 0));
            e.0 += t;
            e.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (s / n as f64, c)).unzip()
    } else {
        (tau.to_vec(), consumer_ids.to_vec())
    };
    let mut out = [None; 3];
    for (k, p) in Param::ALL.iter().enumerate() {
        let y: Vec<f64> = ids
            .iter()
            .map(|c| {
                traits
                    .get(c)
                    .map(|t| p.of(t))
                    .ok_or(WmError::Format(format!("no traits for consumer {c}")))
            })
            .collect::<Result<_>>()?;
        out[k] = match stats::spearman(&x, &y) {
            Ok(r) => Some(r),
            Err(WmError::UndefinedCorrelation) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(RhoRow {
        alpha: out[0],
        beta: out[1],
        gamma: out[2],
    })
}

/// Raw meta-learner features: visible bits plus the non-intervened actions.
pub fn meta_features(visible: &BitMatrix, actions: &[ActionVector], treatment: Action) -> Array2<f64> {
    let others: Vec<Action> = Action::ALL.iter().copied().filter(|&a| a != treatment).collect();
    let mut x = Array2::zeros((visible.rows, visible.cols + others.len()));
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        for (o, &b) in row.iter_mut().zip(visible.row(i)) {
            *o = f64::from(b);
        }
        for (k, &a) in others.iter().enumerate() {
            row[visible.cols + k] = f64::from(u8::from(actions[i].get(a)));
        }
    }
    x
}

/// Inputs for one intervention of the CATE experiment.
pub struct CateInputs<'a> {
    pub intervention: Intervention,
    pub train_visible: &'a BitMatrix,
    pub train_actions: &'a [ActionVector],
    pub train_outcome: &'a [bool],
    pub test_visible: &'a BitMatrix,
    pub test_actions: &'a [ActionVector],
    pub test_beliefs: ArrayView2<'a, f64>,
    pub test_keys: &'a [(u32, u32)],
    pub adapter: &'a MlpModel,
    pub traits: &'a BTreeMap<u32, LatentTraits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSummary {
    pub intervention: Intervention,
    pub n_test: usize,
    pub per_consumer: bool,
    pub rho: BTreeMap<Method, RhoRow>,
    /// Mean `tau_prob` per method.
    pub mean_tau: BTreeMap<Method, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CateReport {
    pub summary: CateSummary,
    pub estimates: BTreeMap<Method, MetaOutput>,
}

pub fn run_cate_experiment(
    inp: &CateInputs<'_>,
    methods: &[Method],
    cfg: &MetaConfig,
    per_consumer: bool,
) -> Result<CateReport> {
    let a = inp.intervention.action();
    let x_train = meta_features(inp.train_visible, inp.train_actions, a);
    let x_test = meta_features(inp.test_visible, inp.test_actions, a);
    let t_train: Vec<bool> = inp.train_actions.iter().map(|z| z.get(a)).collect();
    let ids: Vec<u32> = inp.test_keys.iter().map(|k| k.0).collect();
    let mut estimates = BTreeMap::new();
    for &m in methods {
        log::info!("cate {} {}", inp.intervention.name(), m.label());
        let out = if m == Method::Adapter {
            let t = adapter_cate_batch(inp.adapter, inp.test_beliefs, inp.test_actions, a.index())?;
            MetaOutput {
                tau_prob: t.iter().map(Toggle::tau_prob).collect(),
                tau_logit: t.iter().map(Toggle::tau_logit).collect(),
            }
        } else {
            meta_cate(m, x_train.view(), &t_train, inp.train_outcome, x_test.view(), cfg)?
        };
        estimates.insert(m, out);
    }
    let mut rho = BTreeMap::new();
    let mut mean_tau = BTreeMap::new();
    for (m, out) in &estimates {
        rho.insert(*m, rho_row(&out.tau_logit, &ids, inp.traits, per_consumer)?);
        mean_tau.insert(*m, mean(&out.tau_prob));
    }
    Ok(CateReport {
        summary: CateSummary {
            intervention: inp.intervention,
            n_test: inp.test_keys.len(),
            per_consumer,
            rho,
            mean_tau,
        },
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InputKind;

    #[test]
    fn action_blind_adapter_has_zero_effect() {
        let mut m = MlpModel::init(&[117, 8, 1], InputKind::BeliefAction, 1);
        for r in 0..8 {
            m.weights[0][[r, 112 + 4]] = 0.0;
        }
        let b = Belief {
            values: vec![0.3; 112],
            world_model: String::new(),
        };
        let t = adapter_cate(&m, &b, &ActionVector::default(), 4).unwrap();
        assert_eq!(t.tau_logit(), 0.0);
        assert_eq!(t.tau_prob(), 0.0);
        assert!(adapter_cate(&m, &b, &ActionVector::default(), 5).is_err());
    }

    #[test]
    fn linear_adapter_effect_is_the_weight() {
        let mut m = MlpModel::init(&[117, 1], InputKind::BeliefAction, 2);
        m.weights[0][[0, 112]] = 0.75;
        for v in [0.1, 0.9] {
            let b = Belief {
                values: vec![v; 112],
                world_model: String::new(),
            };
            let t = adapter_cate(&m, &b, &ActionVector::default(), 0).unwrap();
            assert!((t.tau_logit() - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_tau_has_undefined_rho() {
        let mut traits = BTreeMap::new();
        for c in 0..5u32 {
            traits.insert(
                c,
                LatentTraits {
                    alpha: c as f64,
                    gamma: 1.0 + c as f64,
                    beta: -(c as f64),
                    coupon_depth_r: 5.0,
                },
            );
        }
        let ids = [0, 1, 2, 3, 4];
        let row = rho_row(&[0.2; 5], &ids, &traits, false).unwrap();
        assert_eq!(
            row,
            RhoRow {
                alpha: None,
                beta: None,
                gamma: None
            }
        );
        let row = rho_row(&[0.1, 0.2, 0.3, 0.4, 0.5], &ids, &traits, false).unwrap();
        assert_eq!(row.alpha, Some(1.0));
        assert_eq!(row.beta, Some(-1.0));
    }

    #[test]
    fn energy_report_groups() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let b = [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let r = energy_report("test", 10, &d, &b, false).unwrap();
        assert_eq!(r.high_beta.n + r.low_beta.n, r.eligible);
        assert!(r.high_beta.mean < r.low_beta.mean);
        assert!(r.eligible <= r.n_samples);
    }
}
