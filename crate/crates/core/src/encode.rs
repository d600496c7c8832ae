//! Visible-layer encoding.
//!
//! Column order (with lag window `ws`, 72 columns at `ws = 4`):
//!
//! | offset | block |
//! |---|---|
//! | 0..10 | `store_0..store_9` |
//! | 10 | `loyalty` |
//! | 11..16 | `age_20s..age_60s` |
//! | 16..21 | `income_q1..income_q5` |
//! | 21..33 | `month_1..month_12` |
//! | 33..40 | `dow_0..dow_6` (Monday = 0) |
//! | 40..43 | `visited_within_{7,14,30}d` |
//! | 43..46 | `purchased_within_{7,14,30}d` |
//! | 46..49 | `cum_visits_{5,10,30}plus` |
//! | 49..52 | `cum_purchases_{5,10,30}plus` |
//! | 52.. | `coupon_lag1..ws`, `campaign_lag*`, `push_lag*`, `visit_lag*`, `purchase_lag*` |
//!
//! Day 0 is Monday, January 1 of a 365-day year. All history features read
//! days strictly before the encoded day; the current action vector is kept
//! out of the visible layer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WmError};
use crate::simgen::{ActionVector, ConsumerProfile, PanelRecord, AGE_DECADES, N_STORES};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_WS: usize = 4;
pub const RECENCY_WINDOWS: [u32; 3] = [7, 14, 30];
pub const CUMULATIVE_THRESHOLDS: [u32; 3] = [5, 10, 30];
const MONTH_LENGTHS: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

pub const OFF_STORE: usize = 0;
pub const OFF_LOYALTY: usize = 10;
pub const OFF_AGE: usize = 11;
pub const OFF_INCOME: usize = 16;
pub const OFF_MONTH: usize = 21;
pub const OFF_DOW: usize = 33;
pub const OFF_VISITED_WITHIN: usize = 40;
pub const OFF_PURCHASED_WITHIN: usize = 43;
pub const OFF_CUM_VISITS: usize = 46;
pub const OFF_CUM_PURCHASES: usize = 49;
pub const OFF_LAGS: usize = 52;

/// Lagged series in the order they appear in the visible vector.
pub const LAG_SERIES: [&str; 5] = ["coupon", "campaign", "push", "visit", "purchase"];

/// Month index (0-based) and day of week of a panel day.
pub fn calendar(day: u32) -> (usize, usize) {
    let mut doy = day % 365;
    let mut month = 0;
    while doy >= MONTH_LENGTHS[month] {
        doy -= MONTH_LENGTHS[month];
        month += 1;
    }
    (month, (day % 7) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub version: u32,
    pub ws: usize,
    pub columns: Vec<String>,
}

impl Schema {
    pub fn new(ws: usize) -> Self {
        let mut c: Vec<String> = Vec::with_capacity(52 + 5 * ws);
        c.extend((0..N_STORES).map(|s| format!("store_{s}")));
        c.push("loyalty".into());
        c.extend(AGE_DECADES.iter().map(|a| format!("age_{a}s")));
        c.extend((1..=5).map(|q| format!("income_q{q}")));
        c.extend((1..=12).map(|m| format!("month_{m}")));
        c.extend((0..7).map(|d| format!("dow_{d}")));
        c.extend(RECENCY_WINDOWS.iter().map(|w| format!("visited_within_{w}d")));
        c.extend(RECENCY_WINDOWS.iter().map(|w| format!("purchased_within_{w}d")));
        c.extend(CUMULATIVE_THRESHOLDS.iter().map(|k| format!("cum_visits_{k}plus")));
        c.extend(CUMULATIVE_THRESHOLDS.iter().map(|k| format!("cum_purchases_{k}plus")));
        for s in LAG_SERIES {
            c.extend((1..=ws).map(|k| format!("{s}_lag{k}")));
        }
        Self {
            version: SCHEMA_VERSION,
            ws,
            columns: c,
        }
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| WmError::UnknownFeature(name.to_string()))
    }

    /// Offset of `series_lag1` for one of [`LAG_SERIES`].
    pub fn lag_offset(&self, series: usize) -> usize {
        OFF_LAGS + series * self.ws
    }

    /// Hex SHA-256 over version, lag window and column names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.version.to_le_bytes());
        h.update((self.ws as u64).to_le_bytes());
        for c in &self.columns {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

impl Default for Schema {
    fn default() -> Self {
        Self::new(DEFAULT_WS)
    }
}

/// Binary visible vector; one byte per bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VisibleVector(pub Vec<u8>);

impl VisibleVector {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn hamming(&self, other: &VisibleVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// Check dimension, one-hot blocks and monotone recency/cumulative chains.
pub fn check_invariants(bits: &[u8], schema: &Schema) -> Result<()> {
    let fail = |m: String| Err(WmError::Format(m));
    if bits.len() != schema.dim() {
        return fail(format!("visible length {} != {}", bits.len(), schema.dim()));
    }
    if bits.iter().any(|&b| b > 1) {
        return fail("non-binary visible bit".into());
    }
    let blocks = [
        ("store", OFF_STORE, 10),
        ("age", OFF_AGE, 5),
        ("income", OFF_INCOME, 5),
        ("month", OFF_MONTH, 12),
        ("dow", OFF_DOW, 7),
    ];
    for (name, off, len) in blocks {
        let s: u32 = bits[off..off + len].iter().map(|&b| u32::from(b)).sum();
        if s != 1 {
            return fail(format!("{name} block sums to {s}"));
        }
    }
    // within_7 => within_14 => within_30
    for off in [OFF_VISITED_WITHIN, OFF_PURCHASED_WITHIN] {
        if bits[off] > bits[off + 1] || bits[off + 1] > bits[off + 2] {
            return fail(format!("recency chain broken at column {off}"));
        }
    }
    // 30plus => 10plus => 5plus
    for off in [OFF_CUM_VISITS, OFF_CUM_PURCHASES] {
        if bits[off + 2] > bits[off + 1] || bits[off + 1] > bits[off] {
            return fail(format!("cumulative chain broken at column {off}"));
        }
    }
    Ok(())
}

fn write_static(profile: &ConsumerProfile, day: u32, out: &mut [u8]) {
    out[OFF_STORE + profile.store as usize] = 1;
    out[OFF_LOYALTY] = u8::from(profile.loyalty);
    let age_idx = AGE_DECADES
        .iter()
        .position(|&a| a == profile.age_decade)
        .expect("validated age decade");
    out[OFF_AGE + age_idx] = 1;
    out[OFF_INCOME + profile.income_quintile as usize - 1] = 1;
    let (month, dow) = calendar(day);
    out[OFF_MONTH + month] = 1;
    out[OFF_DOW + dow] = 1;
}

fn series_bit(r: &PanelRecord, series: usize) -> bool {
    match series {
        0 => r.actions.coupon,
        1 => r.actions.campaign,
        2 => r.actions.push,
        3 => r.visit,
        4 => r.purchase,
        _ => unreachable!("five lag series"),
    }
}

/// Encode the visible vector for `day` from a consumer's history of days
/// strictly before `day`.
pub fn encode_visible(
    profile: &ConsumerProfile,
    history: &[PanelRecord],
    day: u32,
    schema: &Schema,
) -> Result<VisibleVector> {
    profile.validate()?;
    let mut prev: Option<u32> = None;
    for r in history {
        if r.consumer_id != profile.consumer_id {
            return Err(WmError::InvalidHistory(format!(
                "record of consumer {} in history of {}",
                r.consumer_id, profile.consumer_id
            )));
        }
        if r.day >= day {
            return Err(WmError::InvalidHistory(format!(
                "record at day {} is not before day {day}",
                r.day
            )));
        }
        if prev.is_some_and(|p| r.day <= p) {
            return Err(WmError::InvalidHistory("history not sorted by day".into()));
        }
        prev = Some(r.day);
    }

    let mut out = vec![0u8; schema.dim()];
    write_static(profile, day, &mut out);

    let (mut visits, mut purchases) = (0u32, 0u32);
    for r in history {
        let age = day - r.day;
        for (k, w) in RECENCY_WINDOWS.iter().enumerate() {
            if age <= *w {
                if r.visit {
                    out[OFF_VISITED_WITHIN + k] = 1;
                }
                if r.purchase {
                    out[OFF_PURCHASED_WITHIN + k] = 1;
                }
            }
        }
        visits += u32::from(r.visit);
        purchases += u32::from(r.purchase);
        if (age as usize) <= schema.ws {
            for s in 0..LAG_SERIES.len() {
                if series_bit(r, s) {
                    out[schema.lag_offset(s) + age as usize - 1] = 1;
                }
            }
        }
    }
    for (k, th) in CUMULATIVE_THRESHOLDS.iter().enumerate() {
        out[OFF_CUM_VISITS + k] = u8::from(visits >= *th);
        out[OFF_CUM_PURCHASES + k] = u8::from(purchases >= *th);
    }
    Ok(VisibleVector(out))
}

/// Encode every record of one consumer in a single pass.
///
/// `records` must be sorted by day with strictly increasing days; the result
/// matches [`encode_visible`] called on each prefix.
pub fn encode_consumer(
    profile: &ConsumerProfile,
    records: &[PanelRecord],
    schema: &Schema,
) -> Result<Vec<VisibleVector>> {
    profile.validate()?;
    for w in records.windows(2) {
        if w[1].day <= w[0].day {
            return Err(WmError::InvalidHistory("records not sorted by day".into()));
        }
    }
    if records.iter().any(|r| r.consumer_id != profile.consumer_id) {
        return Err(WmError::InvalidHistory("foreign record in consumer panel".into()));
    }
    let Some(last) = records.last() else {
        return Ok(Vec::new());
    };
    // Dense per-day series; days without a record contribute zeros.
    let horizon = last.day as usize + 1;
    let mut series = vec![[false; 5]; horizon];
    for r in records {
        for (s, slot) in series[r.day as usize].iter_mut().enumerate() {
            *slot = series_bit(r, s);
        }
    }
    // prefix[d] = counts over days < d
    let mut pv = vec![0u32; horizon + 1];
    let mut pp = vec![0u32; horizon + 1];
    for d in 0..horizon {
        pv[d + 1] = pv[d] + u32::from(series[d][3]);
        pp[d + 1] = pp[d] + u32::from(series[d][4]);
    }

    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let t = r.day as usize;
        let mut bits = vec![0u8; schema.dim()];
        write_static(profile, r.day, &mut bits);
        for (k, w) in RECENCY_WINDOWS.iter().enumerate() {
            let lo = t.saturating_sub(*w as usize);
            bits[OFF_VISITED_WITHIN + k] = u8::from(pv[t] > pv[lo]);
            bits[OFF_PURCHASED_WITHIN + k] = u8::from(pp[t] > pp[lo]);
        }
        for (k, th) in CUMULATIVE_THRESHOLDS.iter().enumerate() {
            bits[OFF_CUM_VISITS + k] = u8::from(pv[t] >= *th);
            bits[OFF_CUM_PURCHASES + k] = u8::from(pp[t] >= *th);
        }
        for lag in 1..=schema.ws {
            if lag > t {
                break;
            }
            for s in 0..LAG_SERIES.len() {
                if series[t - lag][s] {
                    bits[schema.lag_offset(s) + lag - 1] = 1;
                }
            }
        }
        out.push(VisibleVector(bits));
    }
    Ok(out)
}

pub fn encode_action(record: &PanelRecord) -> ActionVector {
    record.actions
}

/// Clamp: overwrite named bits, but only when every `require_zero` bit is 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClampSpec {
    pub set_to_one: Vec<String>,
    pub set_to_zero: Vec<String>,
    pub require_zero: Vec<String>,
}

impl ClampSpec {
    /// "Purchasing without recent promotion": eligible when no purchase in
    /// the lag window; sets all purchase lags and `purchased_within_7d`,
    /// clears campaign and push lags.
    pub fn purchase_without_promotion(ws: usize) -> Self {
        let lags = |s: &'static str| (1..=ws).map(move |k| format!("{s}_lag{k}"));
        let mut set_to_one: Vec<String> = lags("purchase").collect();
        set_to_one.push("purchased_within_7d".into());
        Self {
            set_to_one,
            set_to_zero: lags("campaign").chain(lags("push")).collect(),
            require_zero: lags("purchase").collect(),
        }
    }

    pub fn resolve(&self, schema: &Schema) -> Result<ResolvedClamp> {
        let idx = |names: &[String]| -> Result<Vec<usize>> { names.iter().map(|n| schema.index(n)).collect() };
        let ones = idx(&self.set_to_one)?;
        let zeros = idx(&self.set_to_zero)?;
        if let Some(c) = ones.iter().find(|i| zeros.contains(i)) {
            return Err(WmError::InvalidClamp(format!(
                "`{}` is both set to one and to zero",
                schema.columns[*c]
            )));
        }
        Ok(ResolvedClamp {
            ones,
            zeros,
            require_zero: idx(&self.require_zero)?,
        })
    }

    /// A clamp restoring the bits this clamp touches to their values in `original`.
    pub fn inverse_for(&self, original: &VisibleVector, schema: &Schema) -> Result<ClampSpec> {
        let r = self.resolve(schema)?;
        let mut inv = ClampSpec::default();
        for &i in r.ones.iter().chain(&r.zeros) {
            let name = schema.columns[i].clone();
            if original.0[i] == 1 {
                inv.set_to_one.push(name);
            } else {
                inv.set_to_zero.push(name);
            }
        }
        Ok(inv)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedClamp {
    pub ones: Vec<usize>,
    pub zeros: Vec<usize>,
    pub require_zero: Vec<usize>,
}

impl ResolvedClamp {
    pub fn eligible(&self, bits: &[u8]) -> bool {
        self.require_zero.iter().all(|&i| bits[i] == 0)
    }

    pub fn apply(&self, bits: &[u8]) -> (Vec<u8>, bool) {
        let mut out = bits.to_vec();
        if !self.eligible(bits) {
            return (out, false);
        }
        for &i in &self.ones {
            out[i] = 1;
        }
        for &i in &self.zeros {
            out[i] = 0;
        }
        (out, true)
    }
}

pub fn clamp_visible(v: &VisibleVector, spec: &ClampSpec, schema: &Schema) -> Result<(VisibleVector, bool)> {
    if v.len() != schema.dim() {
        return Err(WmError::DimensionMismatch {
            what: "visible vector",
            expected: schema.dim(),
            got: v.len(),
        });
    }
    let (bits, eligible) = spec.resolve(schema)?.apply(&v.0);
    Ok((VisibleVector(bits), eligible))
}

// ---------------------------------------------------------------------------
// Flat binary matrices
// ---------------------------------------------------------------------------

/// Row-major byte matrix, one byte per bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl BitMatrix {
    pub fn new(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: &[u8]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> BitMatrix {
        let mut out = BitMatrix::new(self.cols);
        out.data.reserve(rows.len() * self.cols);
        for &r in rows {
            out.push_row(self.row(r));
        }
        out
    }

    pub fn to_f64(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.rows, self.cols), |(i, j)| f64::from(self.data[i * self.cols + j]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub cols: usize,
    pub columns: Vec<String>,
    pub schema_hash: String,
    pub layout: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Write `<path>` (raw bytes) and `<path>.json` (sidecar naming every column).
pub fn write_bit_matrix(path: &Path, m: &BitMatrix, columns: &[String], schema_hash: &str) -> Result<()> {
    if columns.len() != m.cols {
        return Err(WmError::DimensionMismatch {
            what: "matrix columns",
            expected: m.cols,
            got: columns.len(),
        });
    }
    fs::write(path, &m.data)?;
    let side = MatrixSidecar {
        rows: m.rows,
        cols: m.cols,
        columns: columns.to_vec(),
        schema_hash: schema_hash.to_string(),
        layout: "row-major u8, one byte per bit".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn read_bit_matrix(path: &Path) -> Result<(BitMatrix, MatrixSidecar)> {
    let side: MatrixSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let data = fs::read(path)?;
    if data.len() != side.rows * side.cols {
        return Err(WmError::Format(format!(
            "{}: {} bytes, sidecar says {}x{}",
            path.display(),
            data.len(),
            side.rows,
            side.cols
        )));
    }
    if data.iter().any(|&b| b > 1) {
        return Err(WmError::Format(format!("{}: non-binary byte", path.display())));
    }
    Ok((
        BitMatrix {
            rows: side.rows,
            cols: side.cols,
            data,
        },
        side,
    ))
}

/// Debug export with a header row of column names.
pub fn write_bit_matrix_csv<W: Write>(w: W, m: &BitMatrix, columns: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(columns)?;
    for i in 0..m.rows {
        wtr.write_record(m.row(i).iter().map(|b| if *b == 1 { "1" } else { "0" }))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{simulate_panel, SimConfig};

    fn profile() -> ConsumerProfile {
        ConsumerProfile {
            consumer_id: 3,
            store: 4,
            loyalty: true,
            age_decade: 30,
            income_quintile: 2,
        }
    }

    fn rec(day: u32, visit: bool, purchase: bool) -> PanelRecord {
        PanelRecord {
            consumer_id: 3,
            day,
            actions: ActionVector::default(),
            price: 100.0,
            visit,
            purchase,
        }
    }

    #[test]
    fn schema_has_72_columns_in_table_order() {
        let s = Schema::default();
        assert_eq!(s.dim(), 72);
        assert_eq!(s.columns[0], "store_0");
        assert_eq!(s.columns[OFF_LOYALTY], "loyalty");
        assert_eq!(s.columns[OFF_AGE], "age_20s");
        assert_eq!(s.columns[OFF_INCOME + 4], "income_q5");
        assert_eq!(s.columns[OFF_MONTH], "month_1");
        assert_eq!(s.columns[OFF_DOW + 6], "dow_6");
        assert_eq!(s.columns[OFF_PURCHASED_WITHIN], "purchased_within_7d");
        assert_eq!(s.columns[OFF_CUM_PURCHASES + 2], "cum_purchases_30plus");
        assert_eq!(s.columns[52], "coupon_lag1");
        assert_eq!(s.columns[56], "campaign_lag1");
        assert_eq!(s.columns[60], "push_lag1");
        assert_eq!(s.columns[64], "visit_lag1");
        assert_eq!(s.columns[71], "purchase_lag4");
        assert_eq!(Schema::new(2).dim(), 62);
    }

    #[test]
    fn calendar_anchoring() {
        assert_eq!(calendar(0), (0, 0));
        assert_eq!(calendar(30), (0, 2));
        assert_eq!(calendar(31), (1, 3));
        assert_eq!(calendar(58), (1, 2));
        assert_eq!(calendar(59), (2, 3));
        assert_eq!(calendar(364), (11, 0));
    }

    #[test]
    fn empty_history_has_no_time_varying_bits() {
        let s = Schema::default();
        let v = encode_visible(&profile(), &[], 0, &s).unwrap();
        assert_eq!(v.len(), 72);
        assert!(v.0[OFF_VISITED_WITHIN..].iter().all(|&b| b == 0));
        check_invariants(&v.0, &s).unwrap();
        assert_eq!(v.0[OFF_STORE + 4], 1);
        assert_eq!(v.0[OFF_MONTH], 1);
        assert_eq!(v.0[OFF_DOW], 1);
    }

    #[test]
    fn single_visit_three_days_ago() {
        let s = Schema::default();
        let t = 20;
        let v = encode_visible(&profile(), &[rec(t - 3, true, false)], t, &s).unwrap();
        let b = |n: &str| v.0[s.index(n).unwrap()];
        assert_eq!(b("visit_lag3"), 1);
        assert_eq!((b("visit_lag1"), b("visit_lag2"), b("visit_lag4")), (0, 0, 0));
        assert_eq!(
            (b("visited_within_7d"), b("visited_within_14d"), b("visited_within_30d")),
            (1, 1, 1)
        );
        assert_eq!(b("cum_visits_5plus"), 0);
        assert_eq!(b("purchased_within_30d"), 0);
    }

    #[test]
    fn windows_count_calendar_days() {
        let s = Schema::default();
        let t = 40;
        let v = encode_visible(&profile(), &[rec(t - 8, false, true)], t, &s).unwrap();
        let b = |n: &str| v.0[s.index(n).unwrap()];
        assert_eq!(b("purchased_within_7d"), 0);
        assert_eq!(b("purchased_within_14d"), 1);
        let v = encode_visible(&profile(), &[rec(t - 7, false, true)], t, &s).unwrap();
        assert_eq!(v.0[s.index("purchased_within_7d").unwrap()], 1);
    }

    #[test]
    fn rejects_bad_history() {
        let s = Schema::default();
        let p = profile();
        assert!(encode_visible(&p, &[rec(5, true, true)], 5, &s).is_err());
        assert!(encode_visible(&p, &[rec(3, true, true), rec(2, true, true)], 5, &s).is_err());
    }

    #[test]
    fn rolling_encoder_matches_prefix_encoder() {
        let cfg = SimConfig {
            n_consumers: 6,
            t_days: 80,
            ..SimConfig::default()
        };
        let panel = simulate_panel(&cfg).unwrap();
        let s = Schema::default();
        for p in &panel.profiles {
            let recs: Vec<PanelRecord> = panel
                .records
                .iter()
                .filter(|r| r.consumer_id == p.consumer_id)
                .copied()
                .collect();
            let rolled = encode_consumer(p, &recs, &s).unwrap();
            for (i, r) in recs.iter().enumerate() {
                let direct = encode_visible(p, &recs[..i], r.day, &s).unwrap();
                assert_eq!(direct, rolled[i], "consumer {} day {}", p.consumer_id, r.day);
                check_invariants(&direct.0, &s).unwrap();
            }
        }
    }

    #[test]
    fn action_round_trip_over_all_patterns() {
        for code in 0u8..32 {
            let bits: Vec<u8> = (0..5).map(|k| (code >> k) & 1).collect();
            let a = ActionVector::from_bits(&bits).unwrap();
            let r = PanelRecord {
                consumer_id: 0,
                day: 0,
                actions: a,
                price: 100.0,
                visit: false,
                purchase: false,
            };
            assert_eq!(encode_action(&r).to_bits().to_vec(), bits);
        }
        let sale1 = ActionVector {
            sale1: true,
            ..Default::default()
        };
        assert_eq!(sale1.to_bits(), [1, 0, 0, 0, 0]);
        assert_eq!(ActionVector::default().to_bits(), [0; 5]);
    }

    #[test]
    fn purchase_clamp_on_eligible_vector() {
        let s = Schema::default();
        let spec = ClampSpec::purchase_without_promotion(4);
        let mut bits = encode_visible(&profile(), &[], 10, &s).unwrap().0;
        for n in ["campaign_lag2", "push_lag1", "push_lag4", "visit_lag1", "coupon_lag3"] {
            bits[s.index(n).unwrap()] = 1;
        }
        let v = VisibleVector(bits);
        let (c, eligible) = clamp_visible(&v, &spec, &s).unwrap();
        assert!(eligible);
        for k in 1..=4 {
            assert_eq!(c.0[s.index(&format!("purchase_lag{k}")).unwrap()], 1);
            assert_eq!(c.0[s.index(&format!("campaign_lag{k}")).unwrap()], 0);
            assert_eq!(c.0[s.index(&format!("push_lag{k}")).unwrap()], 0);
        }
        assert_eq!(c.0[s.index("purchased_within_7d").unwrap()], 1);
        let touched: Vec<usize> = spec
            .resolve(&s)
            .map(|r| r.ones.into_iter().chain(r.zeros).collect())
            .unwrap();
        for i in 0..72 {
            if !touched.contains(&i) {
                assert_eq!(c.0[i], v.0[i], "column {}", s.columns[i]);
            }
        }
        assert_eq!(v.hamming(&c), 8);
    }

    #[test]
    fn ineligible_vector_is_unchanged() {
        let s = Schema::default();
        let mut bits = encode_visible(&profile(), &[], 10, &s).unwrap().0;
        bits[s.index("purchase_lag2").unwrap()] = 1;
        let v = VisibleVector(bits);
        let (c, eligible) = clamp_visible(&v, &ClampSpec::purchase_without_promotion(4), &s).unwrap();
        assert!(!eligible);
        assert_eq!(c, v);
    }

    #[test]
    fn empty_clamp_is_identity_and_unknown_names_fail() {
        let s = Schema::default();
        let v = encode_visible(&profile(), &[], 3, &s).unwrap();
        let (c, eligible) = clamp_visible(&v, &ClampSpec::default(), &s).unwrap();
        assert!(eligible);
        assert_eq!(c, v);
        let bad = ClampSpec {
            set_to_one: vec!["sale1_lag1".into()],
            ..Default::default()
        };
        assert!(matches!(clamp_visible(&v, &bad, &s), Err(WmError::UnknownFeature(_))));
        let overlap = ClampSpec {
            set_to_one: vec!["push_lag1".into()],
            set_to_zero: vec!["push_lag1".into()],
            ..Default::default()
        };
        assert!(matches!(clamp_visible(&v, &overlap, &s), Err(WmError::InvalidClamp(_))));
    }

    #[test]
    fn inverse_clamp_restores_original() {
        let s = Schema::default();
        let spec = ClampSpec::purchase_without_promotion(4);
        let mut bits = encode_visible(&profile(), &[], 9, &s).unwrap().0;
        bits[s.index("push_lag3").unwrap()] = 1;
        let v = VisibleVector(bits);
        let (c, _) = clamp_visible(&v, &spec, &s).unwrap();
        let inv = spec.inverse_for(&v, &s).unwrap();
        let (back, eligible) = clamp_visible(&c, &inv, &s).unwrap();
        assert!(eligible);
        assert_eq!(back, v);
    }

    #[test]
    fn bit_matrix_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Schema::default();
        let mut m = BitMatrix::new(72);
        m.push_row(&encode_visible(&profile(), &[], 0, &s).unwrap().0);
        m.push_row(&encode_visible(&profile(), &[rec(0, true, true)], 1, &s).unwrap().0);
        let path = dir.path().join("visible.bin");
        write_bit_matrix(&path, &m, &s.columns, &s.hash()).unwrap();
        let (back, side) = read_bit_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(side.columns, s.columns);
        assert_eq!(side.schema_hash, s.hash());
        let mut csv_out = Vec::new();
        write_bit_matrix_csv(&mut csv_out, &m, &s.columns).unwrap();
        assert_eq!(String::from_utf8(csv_out).unwrap().lines().count(), 3);
    }
}
