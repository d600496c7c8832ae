//! Histogram-binned CART ensembles: bagged regression / probability forests
//! and honest causal forests.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmError};
use crate::rng;

/// Maximum number of bins per feature.
pub const MAX_BINS: usize = 32;
/// Minimum treated and control count in each child of a causal split.
pub const MIN_ARM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    Regression,
    Probability,
    CausalHonest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `floor(sqrt(d))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 12,
            min_leaf: 20,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// Go left when `x[feature] <= threshold`.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub mode: ForestMode,
    pub config: ForestConfig,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(WmError::DimensionMismatch {
                what: "forest input",
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn predict_rows(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let mut buf = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                for (b, v) in buf.iter_mut().zip(x.row(i)) {
                    *b = *v;
                }
                self.predict(&buf)
            })
            .collect()
    }
}

/// Quantile bin edges per feature; value `x` falls in the first bin whose
/// upper edge is `>= x`. Edges are observed values.
#[derive(Debug, Clone)]
struct Binned {
    edges: Vec<Vec<f64>>,
    /// Column-major bin codes.
    codes: Vec<Vec<u8>>,
}

fn bin_features(x: ArrayView2<f64>) -> Binned {
    let n = x.nrows();
    let mut edges = Vec::with_capacity(x.ncols());
    let mut codes = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let mut sorted: Vec<f64> = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let e: Vec<f64> = if sorted.len() <= MAX_BINS {
            sorted
        } else {
            let mut all: Vec<f64> = col.to_vec();
            all.sort_by(f64::total_cmp);
            let mut e: Vec<f64> = (1..=MAX_BINS).map(|k| all[(k * n / MAX_BINS).min(n) - 1]).collect();
            e.dedup();
            if *e.last().unwrap() < all[n - 1] {
                e.push(all[n - 1]);
            }
            e
        };
        let c: Vec<u8> = col
            .iter()
            .map(|v| e.partition_point(|edge| edge < v).min(e.len() - 1) as u8)
            .collect();
        edges.push(e);
        codes.push(c);
    }
    Binned { edges, codes }
}

/// Per-sample training signal.
struct Target<'a> {
    y: &'a [f64],
    /// Treatment for causal mode.
    t: Option<&'a [bool]>,
}

#[derive(Clone, Copy, Default)]
struct Stat {
    n: f64,
    s: f64,
    n1: f64,
    s1: f64,
}

impl Stat {
    fn add(&mut self, y: f64, t: Option<bool>) {
        self.n += 1.0;
        self.s += y;
        if t == Some(true) {
            self.n1 += 1.0;
            self.s1 += y;
        }
    }

    fn sub(self, o: Stat) -> Stat {
        Stat {
            n: self.n - o.n,
            s: self.s - o.s,
            n1: self.n1 - o.n1,
            s1: self.s1 - o.s1,
        }
    }

    fn tau(&self) -> Option<f64> {
        let n0 = self.n - self.n1;
        (self.n1 > 0.0 && n0 > 0.0).then(|| self.s1 / self.n1 - (self.s - self.s1) / n0)
    }
}

struct Builder<'a> {
    binned: &'a Binned,
    target: Target<'a>,
    cfg: &'a ForestConfig,
    causal: bool,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn stat_of(&self, idx: &[usize]) -> Stat {
        let mut st = Stat::default();
        for &i in idx {
            st.add(self.target.y[i], self.target.t.map(|t| t[i]));
        }
        st
    }

    fn leaf_value(&self, st: &Stat) -> f64 {
        st.s / st.n.max(1.0)
    }

    /// Best `(feature, bin)` split of `idx`.
    fn best_split(&self, idx: &[usize], parent: &Stat, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let d = self.binned.codes.len();
        let mut feats: Vec<usize> = (0..d).collect();
        feats.shuffle(rng);
        let min_leaf = self.cfg.min_leaf.max(1) as f64;
        let mut best: Option<(f64, usize, usize)> = None;
        let base = parent.s * parent.s / parent.n;
        let mut hist = [Stat::default(); MAX_BINS + 1];
        for &f in feats.iter().take(self.mtry) {
            let nb = self.binned.edges[f].len();
            if nb < 2 {
                continue;
            }
            hist[..nb].iter_mut().for_each(|h| *h = Stat::default());
            let codes = &self.binned.codes[f];
            for &i in idx {
                hist[codes[i] as usize].add(self.target.y[i], self.target.t.map(|t| t[i]));
            }
            let mut left = Stat::default();
            for (b, h) in hist.iter().enumerate().take(nb - 1) {
                left.n += h.n;
                left.s += h.s;
                left.n1 += h.n1;
                left.s1 += h.s1;
                let right = parent.sub(left);
                if left.n < min_leaf || right.n < min_leaf {
                    continue;
                }
                let gain = if self.causal {
                    let arms_ok = |s: &Stat| s.n1 >= MIN_ARM as f64 && s.n - s.n1 >= MIN_ARM as f64;
                    if !arms_ok(&left) || !arms_ok(&right) {
                        continue;
                    }
                    let (tl, tr) = (left.tau().expect("both arms"), right.tau().expect("both arms"));
                    left.n * right.n / parent.n * (tl - tr) * (tl - tr)
                } else {
                    left.s * left.s / left.n + right.s * right.s / right.n - base
                };
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, b));
                }
            }
        }
        best.map(|(_, f, b)| (f, b))
    }

    /// Grows the subtree for `idx`; returns its node index.
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let st = self.stat_of(idx);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(&st),
        });
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) {
            return me;
        }
        let Some((f, b)) = self.best_split(idx, &st, rng) else {
            return me;
        };
        let codes = &self.binned.codes[f];
        let mut k = 0;
        for j in 0..idx.len() {
            if codes[idx[j]] as usize <= b {
                idx.swap(j, k);
                k += 1;
            }
        }
        let (l, r) = idx.split_at_mut(k);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[me] = Node::Split {
            feature: f,
            threshold: self.binned.edges[f][b],
            left,
            right,
        };
        me
    }
}

fn check_rows(x: ArrayView2<f64>, n: usize, what: &'static str) -> Result<()> {
    if x.nrows() == 0 {
        return Err(WmError::EmptyData);
    }
    if x.nrows() != n {
        return Err(WmError::DimensionMismatch {
            what,
            expected: x.nrows(),
            got: n,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(WmError::InvalidConfig("non-finite forest feature".into()));
    }
    Ok(())
}

fn mtry(cfg: &ForestConfig, d: usize) -> usize {
    cfg.max_features
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
        .clamp(1, d.max(1))
}

/// Bagged CART forest. Probability mode expects targets in `{0, 1}` and
/// averages leaf class frequencies.
pub fn rf_fit(x: ArrayView2<f64>, y: &[f64], mode: ForestMode, cfg: &ForestConfig) -> Result<ForestModel> {
    if mode == ForestMode::CausalHonest {
        return Err(WmError::InvalidConfig("use causal_forest_fit for causal mode".into()));
    }
    check_rows(x, y.len(), "forest targets")?;
    if cfg.n_trees == 0 {
        return Err(WmError::InvalidConfig("n_trees must be positive".into()));
    }
    if mode == ForestMode::Probability && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(WmError::InvalidConfig("probability forest needs 0/1 targets".into()));
    }
    let binned = bin_features(x);
    let n = x.nrows();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut r = rng::stream(cfg.seed, "forest-tree", t as u64, 0);
        let mut idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let mut b = Builder {
            binned: &binned,
            target: Target { y, t: None },
            cfg,
            causal: false,
            mtry: mtry(cfg, x.ncols()),
            nodes: Vec::new(),
        };
        b.grow(&mut idx, 0, &mut r);
        trees.push(Tree { nodes: b.nodes });
    }
    Ok(ForestModel {
        mode,
        config: cfg.clone(),
        n_features: x.ncols(),
        trees,
    })
}

pub fn rf_predict(model: &ForestModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Honest causal forest: each tree draws a random half for structure and
/// re-estimates every node's effect on the other half. Leaves without both
/// arms in the estimation half use their nearest ancestor's estimate.
pub fn causal_forest_fit(x: ArrayView2<f64>, t: &[bool], y: &[f64], cfg: &ForestConfig) -> Result<ForestModel> {
    check_rows(x, y.len(), "forest targets")?;
    check_rows(x, t.len(), "forest treatment")?;
    let n1 = t.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == t.len() {
        return Err(WmError::SingleArm);
    }
    if cfg.n_trees == 0 {
        return Err(WmError::InvalidConfig("n_trees must be positive".into()));
    }
    let binned = bin_features(x);
    let n = x.nrows();
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for k in 0..cfg.n_trees {
        let mut r = rng::stream(cfg.seed, "causal-tree", k as u64, 0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let (structure, estimation) = order.split_at_mut(n / 2);
        let mut b = Builder {
            binned: &binned,
            target: Target { y, t: Some(t) },
            cfg,
            causal: true,
            mtry: mtry(cfg, x.ncols()),
            nodes: Vec::new(),
        };
        b.grow(structure, 0, &mut r);
        let mut nodes = b.nodes;
        // honest re-estimation
        let mut stats = vec![Stat::default(); nodes.len()];
        for &i in estimation.iter() {
            let mut node = 0;
            loop {
                stats[node].add(y[i], Some(t[i]));
                match &nodes[node] {
                    Node::Leaf { .. } => break,
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => node = if x[[i, *feature]] <= *threshold { *left } else { *right },
                }
            }
        }
        let root = stats[0].tau().unwrap_or(0.0);
        fill_honest(&mut nodes, &stats, 0, root);
        trees.push(Tree { nodes });
    }
    Ok(ForestModel {
        mode: ForestMode::CausalHonest,
        config: cfg.clone(),
        n_features: x.ncols(),
        trees,
    })
}

fn fill_honest(nodes: &mut [Node], stats: &[Stat], i: usize, parent: f64) {
    let here = stats[i].tau().unwrap_or(parent);
    match nodes[i].clone() {
        Node::Leaf { .. } => nodes[i] = Node::Leaf { value: here },
        Node::Split { left, right, .. } => {
            fill_honest(nodes, stats, left, here);
            fill_honest(nodes, stats, right, here);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn constant_target_predicts_constant() {
        let x = Array2::from_shape_fn((100, 3), |(i, j)| ((i * 7 + j) % 5) as f64);
        let y = vec![0.37; 100];
        let m = rf_fit(
            x.view(),
            &y,
            ForestMode::Regression,
            &ForestConfig {
                n_trees: 5,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..100 {
            let p = m.predict(&x.row(i).to_vec()).unwrap();
            assert!((p - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn stump_recovers_binary_split() {
        let x = Array2::from_shape_fn((60, 1), |(i, _)| (i % 2) as f64);
        let y: Vec<f64> = (0..60).map(|i| (i % 2) as f64).collect();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            ..Default::default()
        };
        let m = rf_fit(x.view(), &y, ForestMode::Probability, &cfg).unwrap();
        assert_eq!(m.predict(&[0.0]).unwrap(), 0.0);
        assert_eq!(m.predict(&[1.0]).unwrap(), 1.0);
        assert_eq!(m.trees[0].depth(), 1);
    }

    #[test]
    fn thresholds_are_observed_values() {
        let mut r = rng::stream(1, "t", 0, 0);
        let x = Array2::from_shape_fn((500, 2), |_| r.random::<f64>());
        let y: Vec<f64> = (0..500).map(|i| x[[i, 0]]).collect();
        let m = rf_fit(
            x.view(),
            &y,
            ForestMode::Regression,
            &ForestConfig {
                n_trees: 3,
                ..Default::default()
            },
        )
        .unwrap();
        for t in &m.trees {
            for node in &t.nodes {
                if let Node::Split { feature, threshold, .. } = node {
                    assert!(x.column(*feature).iter().any(|v| v == threshold));
                }
            }
        }
    }

    #[test]
    fn empty_and_single_arm_errors() {
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            rf_fit(x.view(), &[], ForestMode::Regression, &ForestConfig::default()),
            Err(WmError::EmptyData)
        ));
        let x = Array2::<f64>::zeros((10, 2));
        assert!(matches!(
            causal_forest_fit(x.view(), &[true; 10], &[0.0; 10], &ForestConfig::default()),
            Err(WmError::SingleArm)
        ));
    }
}
