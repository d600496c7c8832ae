//! Metrics and two-sided hypothesis tests.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmError};
use crate::math::pearson;

/// Largest sample for which the Wilcoxon signed-rank p-value is exact.
pub const WILCOXON_EXACT_MAX: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    /// Second sample size; zero for one-sample tests.
    pub n2: usize,
    /// Degrees of freedom for t-tests.
    pub df: Option<f64>,
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn rank_average(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Sizes of tie groups in `x`.
fn tie_groups(x: &[f64]) -> Vec<usize> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        out.push(j - i);
        i = j;
    }
    out
}

/// Area under the ROC curve; ties between classes count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(WmError::DimensionMismatch {
            what: "auc labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(WmError::SingleClass);
    }
    let ranks = rank_average(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(WmError::DimensionMismatch {
            what: "spearman",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(WmError::TooFewSamples {
            test: "spearman",
            need: 3,
            got: x.len(),
        });
    }
    pearson(&rank_average(x), &rank_average(y)).ok_or(WmError::UndefinedCorrelation)
}

// --- special functions -------------------------------------------------------

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail `P(|T| > |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Student t CDF.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Complementary error function, relative accuracy about 1e-15.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 0.5 {
        // Maclaurin series of erf
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..60 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    // Continued fraction for the upper incomplete gamma Γ(1/2, x²).
    let z = x * x;
    const TINY: f64 = 1e-300;
    let a = 0.5;
    let mut b = z + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-z - ln_gamma(a) + a * z.ln()).exp() * h
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `2 · P(Z > |z|)`.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

// --- tests ---------------------------------------------------------------------

fn need(test: &'static str, need: usize, got: usize) -> Result<()> {
    if got < need {
        return Err(WmError::TooFewSamples { test, need, got });
    }
    Ok(())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sample t test of `mean(d) = 0` on paired differences.
pub fn paired_t(d: &[f64]) -> Result<TestResult> {
    need("paired_t", 2, d.len())?;
    let (m, v) = mean_var(d);
    if v <= 0.0 {
        return Err(WmError::ZeroVariance("paired_t"));
    }
    let n = d.len() as f64;
    let t = m / (v / n).sqrt();
    let df = n - 1.0;
    Ok(TestResult {
        method: "paired_t".into(),
        statistic: t,
        p_value: student_t_two_sided(t, df),
        n1: d.len(),
        n2: 0,
        df: Some(df),
    })
}

/// Welch's unequal-variance t test with Welch-Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult> {
    need("welch_t", 2, a.len())?;
    need("welch_t", 2, b.len())?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    if sa + sb <= 0.0 {
        return Err(WmError::ZeroVariance("welch_t"));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestResult {
        method: "welch_t".into(),
        statistic: t,
        p_value: student_t_two_sided(t, df),
        n1: a.len(),
        n2: b.len(),
        df: Some(df),
    })
}

/// Wilcoxon signed-rank test; zero differences are dropped.
///
/// The statistic is `min(W+, W-)`. Up to [`WILCOXON_EXACT_MAX`] non-zero
/// differences the p-value is exact over all sign assignments (ties keep
/// their average ranks); above it uses the tie-corrected normal
/// approximation with continuity correction.
pub fn wilcoxon(d: &[f64]) -> Result<TestResult> {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    need("wilcoxon", 2, n)?;
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let ranks = rank_average(&abs);
    let w_plus: f64 = ranks.iter().zip(&nz).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let stat = w_plus.min(w_minus);
    let p = if n <= WILCOXON_EXACT_MAX {
        wilcoxon_exact_p(&ranks, stat)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let ties: f64 = tie_groups(&abs).iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            return Err(WmError::ZeroVariance("wilcoxon"));
        }
        let diff = stat - mean;
        let z = (diff.abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(TestResult {
        method: if n <= WILCOXON_EXACT_MAX {
            "wilcoxon_exact"
        } else {
            "wilcoxon_normal"
        }
        .into(),
        statistic: stat,
        p_value: p.clamp(0.0, 1.0),
        n1: n,
        n2: 0,
        df: None,
    })
}

/// `P(W+ <= stat) + P(W+ >= total - stat)` by dynamic programming over
/// doubled ranks.
fn wilcoxon_exact_p(ranks: &[f64], stat: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let lo = (2.0 * stat).round() as usize;
    let hi = max - lo;
    let tail: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s <= lo || s >= hi)
        .map(|(_, c)| c)
        .sum();
    (tail / all).min(1.0)
}

/// Mann-Whitney U test, tie-corrected normal approximation with continuity
/// correction. The statistic is `U` of the first sample.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<TestResult> {
    need("mann_whitney", 2, a.len())?;
    need("mann_whitney", 2, b.len())?;
    let mut pooled = a.to_vec();
    pooled.extend_from_slice(b);
    let ranks = rank_average(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let ties: f64 = tie_groups(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Err(WmError::ZeroVariance("mann_whitney"));
    }
    let mean = n1 * n2 / 2.0;
    let z = ((u1 - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(TestResult {
        method: "mann_whitney".into(),
        statistic: u1,
        p_value: normal_two_sided(z).clamp(0.0, 1.0),
        n1: a.len(),
        n2: b.len(),
        df: None,
    })
}
