//! Synthetic consumer panel with known latent heterogeneity.
//!
//! Each consumer carries static demographics and three hidden traits:
//! price sensitivity `alpha`, promotion responsiveness `gamma` and base
//! preference `beta`. Actions are assigned per store-day and per
//! consumer-day, price follows from the actions, and visit and purchase are
//! drawn independently from logistic responses with a common noise scale.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmError};
use crate::math::{sigmoid, softplus};
use crate::rng;

pub const N_STORES: u8 = 10;
pub const AGE_DECADES: [u8; 5] = [20, 30, 40, 50, 60];
pub const BASE_PRICE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerProfile {
    pub consumer_id: u32,
    pub store: u8,
    pub loyalty: bool,
    pub age_decade: u8,
    pub income_quintile: u8,
}

impl ConsumerProfile {
    pub fn validate(&self) -> Result<()> {
        if self.store >= N_STORES || !AGE_DECADES.contains(&self.age_decade) || !(1..=5).contains(&self.income_quintile)
        {
            return Err(WmError::Format(format!("profile out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentTraits {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub coupon_depth_r: f64,
}

/// Per-consumer noise behind [`LatentTraits`]; `coupon_u` is uniform on [0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNoise {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub coupon_u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Sale1 = 0,
    Sale2 = 1,
    Campaign = 2,
    Coupon = 3,
    Push = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Sale1,
        Action::Sale2,
        Action::Campaign,
        Action::Coupon,
        Action::Push,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(j: usize) -> Result<Self> {
        Self::ALL.get(j).copied().ok_or(WmError::ActionIndex(j))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Sale1 => "sale1",
            Action::Sale2 => "sale2",
            Action::Campaign => "campaign",
            Action::Coupon => "coupon",
            Action::Push => "push",
        }
    }
}

/// The five current-day action indicators, in the order
/// `(sale1, sale2, campaign, coupon, push)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector {
    pub sale1: bool,
    pub sale2: bool,
    pub campaign: bool,
    pub coupon: bool,
    pub push: bool,
}

impl ActionVector {
    pub const DIM: usize = 5;

    pub fn get(&self, a: Action) -> bool {
        match a {
            Action::Sale1 => self.sale1,
            Action::Sale2 => self.sale2,
            Action::Campaign => self.campaign,
            Action::Coupon => self.coupon,
            Action::Push => self.push,
        }
    }

    pub fn with(mut self, a: Action, value: bool) -> Self {
        match a {
            Action::Sale1 => self.sale1 = value,
            Action::Sale2 => self.sale2 = value,
            Action::Campaign => self.campaign = value,
            Action::Coupon => self.coupon = value,
            Action::Push => self.push = value,
        }
        self
    }

    pub fn to_bits(&self) -> [u8; 5] {
        Action::ALL.map(|a| u8::from(self.get(a)))
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != Self::DIM {
            return Err(WmError::DimensionMismatch {
                what: "action vector",
                expected: Self::DIM,
                got: bits.len(),
            });
        }
        let mut out = Self::default();
        for (a, &b) in Action::ALL.iter().zip(bits) {
            if b > 1 {
                return Err(WmError::Format(format!("non-binary action bit {b}")));
            }
            out = out.with(*a, b == 1);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub consumer_id: u32,
    pub day: u32,
    pub actions: ActionVector,
    pub price: f64,
    pub visit: bool,
    pub purchase: bool,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub loyalty_rate: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self { loyalty_rate: 0.4 }
    }
}

/// Coefficients of the trait equations. Income and age enter through the
/// centred codes `(q - 3) / 2` and `(a - 40) / 20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub alpha_intercept: f64,
    pub alpha_income: f64,
    pub alpha_age: f64,
    pub gamma_intercept: f64,
    pub gamma_loyalty: f64,
    pub beta_income: f64,
    pub beta_age: f64,
    pub beta_loyalty: f64,
    pub noise_sd: f64,
    pub coupon_depth_min: f64,
    pub coupon_depth_max: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            alpha_intercept: 0.8,
            alpha_income: -0.15,
            alpha_age: -0.10,
            gamma_intercept: 0.3,
            gamma_loyalty: 0.6,
            beta_income: 0.25,
            beta_age: 0.20,
            beta_loyalty: 0.30,
            noise_sd: 0.1,
            coupon_depth_min: 2.0,
            coupon_depth_max: 6.0,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WmError::InvalidConfig(format!("latent: {m}")));
        if !(self.alpha_income < 0.0 && self.alpha_age < 0.0) {
            return bad("alpha must decrease in income and age");
        }
        if self.gamma_loyalty.is_nan() || self.gamma_loyalty <= 0.0 {
            return bad("gamma must increase in loyalty");
        }
        if !(self.beta_income > 0.0 && self.beta_age > 0.0 && self.beta_loyalty > 0.0) {
            return bad("beta must increase in income, age and loyalty");
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return bad("noise_sd must be non-negative");
        }
        if !(1.0 <= self.coupon_depth_min
            && self.coupon_depth_min <= self.coupon_depth_max
            && self.coupon_depth_max <= 10.0)
        {
            return bad("coupon depth range must lie in [1, 10]");
        }
        Ok(())
    }
}

/// Store-day and consumer-day assignment rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub sale1_rate: f64,
    pub sale2_rate: f64,
    pub campaign_rate: f64,
    pub weekend_campaign_multiplier: f64,
    pub coupon_base_rate: f64,
    pub coupon_loyalty_uplift: f64,
    pub push_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sale1_rate: 0.10,
            sale2_rate: 0.15,
            campaign_rate: 0.10,
            weekend_campaign_multiplier: 2.0,
            coupon_base_rate: 0.05,
            coupon_loyalty_uplift: 0.10,
            push_rate: 0.15,
        }
    }
}

/// Utility coefficients of the visit and purchase responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    pub beta_scale: f64,
    pub w_campaign: f64,
    pub w_push: f64,
    pub w_coupon: f64,
    /// Price enters as `(price - 100) / price_scale`.
    pub price_scale: f64,
    pub intercept_visit: f64,
    pub intercept_purchase: f64,
    pub noise_scale: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            beta_scale: 0.3,
            w_campaign: 0.25,
            w_push: 0.25,
            w_coupon: 0.25,
            price_scale: 40.0,
            intercept_visit: -0.26,
            intercept_purchase: -0.25,
            noise_scale: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Time,
    Consumer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub val_start: u32,
    pub test_start: u32,
    /// Fractions of consumers held out when `mode = "consumer"`.
    pub consumer_val_fraction: f64,
    pub consumer_test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Time,
            val_start: 305,
            test_start: 335,
            consumer_val_fraction: 30.0 / 365.0,
            consumer_test_fraction: 30.0 / 365.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_consumers: usize,
    pub t_days: u32,
    pub seed: u64,
    pub population: PopulationConfig,
    pub latent: LatentConfig,
    pub policy: PolicyConfig,
    pub utility: UtilityConfig,
    pub split: SplitConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_consumers: 1024,
            t_days: 365,
            seed: 7,
            population: PopulationConfig::default(),
            latent: LatentConfig::default(),
            policy: PolicyConfig::default(),
            utility: UtilityConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Population and traits
// ---------------------------------------------------------------------------

pub fn draw_population(n: usize, seed: u64) -> Result<Vec<ConsumerProfile>> {
    draw_population_with(n, seed, &PopulationConfig::default())
}

pub fn draw_population_with(n: usize, seed: u64, cfg: &PopulationConfig) -> Result<Vec<ConsumerProfile>> {
    if n == 0 {
        return Err(WmError::EmptyPopulation);
    }
    let mut r = rng::stream(seed, "population", 0, 0);
    Ok((0..n)
        .map(|i| ConsumerProfile {
            consumer_id: i as u32,
            store: r.random_range(0..N_STORES),
            loyalty: r.random_bool(cfg.loyalty_rate),
            age_decade: AGE_DECADES[r.random_range(0..AGE_DECADES.len())],
            income_quintile: r.random_range(1..=5u8),
        })
        .collect())
}

pub fn draw_latent_noise(consumer_id: u32, seed: u64, noise_sd: f64) -> LatentNoise {
    let mut r = rng::stream(seed, "latent", u64::from(consumer_id), 0);
    let mut normal = || {
        let z: f64 = StandardNormal.sample(&mut r);
        noise_sd * z
    };
    let alpha = normal();
    let gamma = normal();
    let beta = normal();
    LatentNoise {
        alpha,
        gamma,
        beta,
        coupon_u: r.random::<f64>(),
    }
}

fn income_code(p: &ConsumerProfile) -> f64 {
    (f64::from(p.income_quintile) - 3.0) / 2.0
}

fn age_code(p: &ConsumerProfile) -> f64 {
    (f64::from(p.age_decade) - 40.0) / 20.0
}

/// Deterministic trait map for a fixed noise draw.
pub fn latent_from_noise(profile: &ConsumerProfile, noise: &LatentNoise, cfg: &LatentConfig) -> LatentTraits {
    let (q, a, l) = (
        income_code(profile),
        age_code(profile),
        f64::from(u8::from(profile.loyalty)),
    );
    LatentTraits {
        alpha: softplus(cfg.alpha_intercept + cfg.alpha_income * q + cfg.alpha_age * a + noise.alpha),
        gamma: softplus(cfg.gamma_intercept + cfg.gamma_loyalty * l + noise.gamma),
        beta: cfg.beta_income * q + cfg.beta_age * a + cfg.beta_loyalty * l + noise.beta,
        coupon_depth_r: cfg.coupon_depth_min + (cfg.coupon_depth_max - cfg.coupon_depth_min) * noise.coupon_u,
    }
}

pub fn latent_params(profile: &ConsumerProfile, seed: u64, cfg: &LatentConfig) -> LatentTraits {
    let noise = draw_latent_noise(profile.consumer_id, seed, cfg.noise_sd);
    latent_from_noise(profile, &noise, cfg)
}

// ---------------------------------------------------------------------------
// Actions, price, outcomes
// ---------------------------------------------------------------------------

pub fn is_weekend(day: u32) -> bool {
    day % 7 >= 5
}

/// Store-level `(sale1, sale2, campaign)` for one store-day.
pub fn store_actions(store: u8, day: u32, seed: u64, cfg: &PolicyConfig) -> (bool, bool, bool) {
    let mut r = rng::stream(seed, "store-actions", u64::from(store), u64::from(day));
    let campaign_p = if is_weekend(day) {
        (cfg.campaign_rate * cfg.weekend_campaign_multiplier).min(1.0)
    } else {
        cfg.campaign_rate
    };
    (
        r.random_bool(cfg.sale1_rate),
        r.random_bool(cfg.sale2_rate),
        r.random_bool(campaign_p),
    )
}

pub fn consumer_actions(profile: &ConsumerProfile, day: u32, seed: u64, cfg: &PolicyConfig) -> (bool, bool) {
    let mut r = rng::stream(seed, "consumer-actions", u64::from(profile.consumer_id), u64::from(day));
    let coupon_p = cfg.coupon_base_rate + cfg.coupon_loyalty_uplift * f64::from(u8::from(profile.loyalty));
    (r.random_bool(coupon_p.clamp(0.0, 1.0)), r.random_bool(cfg.push_rate))
}

pub fn assign_actions(
    profiles: &[ConsumerProfile],
    day: u32,
    seed: u64,
    cfg: &PolicyConfig,
) -> BTreeMap<u32, ActionVector> {
    let mut per_store = BTreeMap::new();
    profiles
        .iter()
        .map(|p| {
            let (sale1, sale2, campaign) = *per_store
                .entry(p.store)
                .or_insert_with(|| store_actions(p.store, day, seed, cfg));
            let (coupon, push) = consumer_actions(p, day, seed, cfg);
            (
                p.consumer_id,
                ActionVector {
                    sale1,
                    sale2,
                    campaign,
                    coupon,
                    push,
                },
            )
        })
        .collect()
}

pub fn price_of(actions: &ActionVector, coupon_depth_r: f64) -> f64 {
    let b = |x: bool| f64::from(u8::from(x));
    BASE_PRICE
        - 5.0 * b(actions.sale1)
        - 3.0 * b(actions.sale2)
        - 5.0 * b(actions.campaign)
        - coupon_depth_r * b(actions.coupon)
}

pub fn visit_utility(traits: &LatentTraits, actions: &ActionVector, cfg: &UtilityConfig) -> f64 {
    let b = |x: bool| f64::from(u8::from(x));
    let promo = cfg.w_campaign * b(actions.campaign) + cfg.w_push * b(actions.push) + cfg.w_coupon * b(actions.coupon);
    cfg.beta_scale * traits.beta + traits.gamma * promo + cfg.intercept_visit
}

pub fn purchase_utility(traits: &LatentTraits, price: f64, cfg: &UtilityConfig) -> f64 {
    let price_normalized = (price - BASE_PRICE) / cfg.price_scale;
    cfg.beta_scale * traits.beta - traits.alpha * price_normalized + cfg.intercept_purchase
}

/// `(P(visit), P(purchase))` under the logistic response with scale `noise_scale`.
pub fn outcome_probabilities(
    traits: &LatentTraits,
    actions: &ActionVector,
    price: f64,
    cfg: &UtilityConfig,
) -> (f64, f64) {
    (
        sigmoid(visit_utility(traits, actions, cfg) / cfg.noise_scale),
        sigmoid(purchase_utility(traits, price, cfg) / cfg.noise_scale),
    )
}

pub fn step_outcomes<R: Rng + ?Sized>(
    traits: &LatentTraits,
    actions: &ActionVector,
    price: f64,
    rng: &mut R,
    cfg: &UtilityConfig,
) -> (bool, bool) {
    let (pv, pp) = outcome_probabilities(traits, actions, price, cfg);
    let visit = rng.random::<f64>() < pv;
    let purchase = rng.random::<f64>() < pp;
    (visit, purchase)
}

// ---------------------------------------------------------------------------
// Panel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub profiles: Vec<ConsumerProfile>,
    /// Sorted by `(consumer_id, day)`.
    pub records: Vec<PanelRecord>,
    pub traits: BTreeMap<u32, LatentTraits>,
}

pub fn simulate_panel(config: &SimConfig) -> Result<SimulatedPanel> {
    config.latent.validate()?;
    if config.t_days == 0 {
        return Err(WmError::InvalidConfig("t_days must be positive".into()));
    }
    if !(config.utility.noise_scale > 0.0 && config.utility.price_scale > 0.0) {
        return Err(WmError::InvalidConfig(
            "utility noise_scale and price_scale must be positive".into(),
        ));
    }
    let seed = config.seed;
    let profiles = draw_population_with(config.n_consumers, seed, &config.population)?;
    let traits: BTreeMap<u32, LatentTraits> = profiles
        .iter()
        .map(|p| (p.consumer_id, latent_params(p, seed, &config.latent)))
        .collect();

    let store_table: Vec<Vec<(bool, bool, bool)>> = (0..N_STORES)
        .map(|s| {
            (0..config.t_days)
                .map(|d| store_actions(s, d, seed, &config.policy))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(profiles.len() * config.t_days as usize);
    for p in &profiles {
        let tr = traits[&p.consumer_id];
        for day in 0..config.t_days {
            let (sale1, sale2, campaign) = store_table[p.store as usize][day as usize];
            let (coupon, push) = consumer_actions(p, day, seed, &config.policy);
            let actions = ActionVector {
                sale1,
                sale2,
                campaign,
                coupon,
                push,
            };
            let price = price_of(&actions, tr.coupon_depth_r);
            let mut r = rng::stream(seed, "outcomes", u64::from(p.consumer_id), u64::from(day));
            let (visit, purchase) = step_outcomes(&tr, &actions, price, &mut r, &config.utility);
            records.push(PanelRecord {
                consumer_id: p.consumer_id,
                day,
                actions,
                price,
                visit,
                purchase,
            });
        }
    }
    Ok(SimulatedPanel {
        profiles,
        records,
        traits,
    })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| WmError::Format(format!("bad split code {c}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub mode: SplitMode,
    pub val_start: u32,
    pub test_start: u32,
    pub t_days: u32,
    /// Consumer ids held out per split (consumer mode only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_consumers: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_consumers: Vec<u32>,
}

impl SplitMeta {
    pub fn time(val_start: u32, test_start: u32, t_days: u32) -> Result<Self> {
        if val_start > test_start || test_start > t_days {
            return Err(WmError::InvalidSplit {
                val_start,
                test_start,
                t_days,
            });
        }
        Ok(Self {
            mode: SplitMode::Time,
            val_start,
            test_start,
            t_days,
            val_consumers: Vec::new(),
            test_consumers: Vec::new(),
        })
    }

    /// Hold out whole consumers, chosen by a seeded shuffle.
    pub fn consumer(
        consumer_ids: &[u32],
        val_fraction: f64,
        test_fraction: f64,
        t_days: u32,
        seed: u64,
    ) -> Result<Self> {
        if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction <= 1.0) {
            return Err(WmError::InvalidConfig("consumer split fractions".into()));
        }
        let mut ids = consumer_ids.to_vec();
        ids.sort_unstable();
        let mut r = rng::stream(seed, "consumer-split", 0, 0);
        use rand::seq::SliceRandom;
        ids.shuffle(&mut r);
        let n = ids.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_val);
        let mut val_consumers = ids[..n_val].to_vec();
        let mut test_consumers = ids[n_val..n_val + n_test].to_vec();
        val_consumers.sort_unstable();
        test_consumers.sort_unstable();
        Ok(Self {
            mode: SplitMode::Consumer,
            val_start: t_days,
            test_start: t_days,
            t_days,
            val_consumers,
            test_consumers,
        })
    }

    pub fn from_config(cfg: &SplitConfig, profiles: &[ConsumerProfile], t_days: u32, seed: u64) -> Result<Self> {
        match cfg.mode {
            SplitMode::Time => Self::time(cfg.val_start, cfg.test_start, t_days),
            SplitMode::Consumer => {
                let ids: Vec<u32> = profiles.iter().map(|p| p.consumer_id).collect();
                Self::consumer(
                    &ids,
                    cfg.consumer_val_fraction,
                    cfg.consumer_test_fraction,
                    t_days,
                    seed,
                )
            }
        }
    }

    pub fn assign(&self, consumer_id: u32, day: u32) -> Split {
        match self.mode {
            SplitMode::Time => {
                if day < self.val_start {
                    Split::Train
                } else if day < self.test_start {
                    Split::Validation
                } else {
                    Split::Test
                }
            }
            SplitMode::Consumer => {
                if self.val_consumers.binary_search(&consumer_id).is_ok() {
                    Split::Validation
                } else if self.test_consumers.binary_search(&consumer_id).is_ok() {
                    Split::Test
                } else {
                    Split::Train
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPanel {
    pub train: Vec<PanelRecord>,
    pub validation: Vec<PanelRecord>,
    pub test: Vec<PanelRecord>,
    pub meta: SplitMeta,
}

impl SplitPanel {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

pub fn split_by(records: &[PanelRecord], meta: SplitMeta) -> SplitPanel {
    let mut out = SplitPanel {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        meta,
    };
    for r in records {
        match out.meta.assign(r.consumer_id, r.day) {
            Split::Train => out.train.push(*r),
            Split::Validation => out.validation.push(*r),
            Split::Test => out.test.push(*r),
        }
    }
    out
}

/// Time split: train `[0, b.0)`, validation `[b.0, b.1)`, test `[b.1, T)`.
pub fn split_panel(records: &[PanelRecord], boundaries: (u32, u32), t_days: u32) -> Result<SplitPanel> {
    let meta = SplitMeta::time(boundaries.0, boundaries.1, t_days)?;
    Ok(split_by(records, meta))
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const PANEL_HEADER: [&str; 10] = [
    "consumer_id",
    "day",
    "sale1",
    "sale2",
    "campaign",
    "coupon",
    "push",
    "price",
    "visit",
    "purchase",
];
pub const TRAITS_HEADER: [&str; 5] = ["consumer_id", "alpha", "gamma", "beta", "r"];
pub const PROFILES_HEADER: [&str; 5] = ["consumer_id", "store", "loyalty", "age_decade", "income_quintile"];

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_bit(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(WmError::Format(format!("expected 0/1, got `{other}`"))),
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| WmError::Format(format!("cannot parse {what} from `{s}`")))
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(WmError::Format(format!(
            "unexpected header {:?}, expected {:?}",
            h, expected
        )));
    }
    Ok(())
}

pub fn write_panel_csv<W: Write>(w: W, records: &[PanelRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PANEL_HEADER)?;
    for r in records {
        let a = &r.actions;
        wtr.write_record([
            r.consumer_id.to_string().as_str(),
            r.day.to_string().as_str(),
            bit(a.sale1),
            bit(a.sale2),
            bit(a.campaign),
            bit(a.coupon),
            bit(a.push),
            r.price.to_string().as_str(),
            bit(r.visit),
            bit(r.purchase),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_panel_csv<R: Read>(r: R) -> Result<Vec<PanelRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &PANEL_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push(PanelRecord {
            consumer_id: parse(&row[0], "consumer_id")?,
            day: parse(&row[1], "day")?,
            actions: ActionVector {
                sale1: parse_bit(&row[2])?,
                sale2: parse_bit(&row[3])?,
                campaign: parse_bit(&row[4])?,
                coupon: parse_bit(&row[5])?,
                push: parse_bit(&row[6])?,
            },
            price: parse(&row[7], "price")?,
            visit: parse_bit(&row[8])?,
            purchase: parse_bit(&row[9])?,
        });
    }
    Ok(out)
}

pub fn write_traits_csv<W: Write>(w: W, traits: &BTreeMap<u32, LatentTraits>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRAITS_HEADER)?;
    for (id, t) in traits {
        wtr.write_record([
            id.to_string(),
            t.alpha.to_string(),
            t.gamma.to_string(),
            t.beta.to_string(),
            t.coupon_depth_r.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_traits_csv<R: Read>(r: R) -> Result<BTreeMap<u32, LatentTraits>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &TRAITS_HEADER)?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        out.insert(
            parse(&row[0], "consumer_id")?,
            LatentTraits {
                alpha: parse(&row[1], "alpha")?,
                gamma: parse(&row[2], "gamma")?,
                beta: parse(&row[3], "beta")?,
                coupon_depth_r: parse(&row[4], "r")?,
            },
        );
    }
    Ok(out)
}

pub fn write_profiles_csv<W: Write>(w: W, profiles: &[ConsumerProfile]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PROFILES_HEADER)?;
    for p in profiles {
        wtr.write_record([
            p.consumer_id.to_string().as_str(),
            p.store.to_string().as_str(),
            bit(p.loyalty),
            p.age_decade.to_string().as_str(),
            p.income_quintile.to_string().as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_profiles_csv<R: Read>(r: R) -> Result<Vec<ConsumerProfile>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &PROFILES_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let p = ConsumerProfile {
            consumer_id: parse(&row[0], "consumer_id")?,
            store: parse(&row[1], "store")?,
            loyalty: parse_bit(&row[2])?,
            age_decade: parse(&row[3], "age_decade")?,
            income_quintile: parse(&row[4], "income_quintile")?,
        };
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
