//! Panel-level properties of the simulator at the default calibration.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use wm_core::simgen::{
    draw_population, latent_params, price_of, simulate_panel, split_by, write_panel_csv, LatentConfig, SimConfig,
    SimulatedPanel, SplitMeta,
};

fn panel() -> &'static SimulatedPanel {
    static P: OnceLock<SimulatedPanel> = OnceLock::new();
    P.get_or_init(|| simulate_panel(&SimConfig::default()).unwrap())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn corr(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn b(x: bool) -> f64 {
    f64::from(u8::from(x))
}

#[test]
fn push_is_uncorrelated_with_traits() {
    let p = panel();
    let push: Vec<f64> = p.records.iter().map(|r| b(r.actions.push)).collect();
    let alpha: Vec<f64> = p.records.iter().map(|r| p.traits[&r.consumer_id].alpha).collect();
    let gamma: Vec<f64> = p.records.iter().map(|r| p.traits[&r.consumer_id].gamma).collect();
    assert!(corr(&push, &alpha).abs() < 0.02);
    assert!(corr(&push, &gamma).abs() < 0.02);
    let rate = mean(&push);
    assert!((rate - 0.15).abs() < 0.005, "push rate {rate}");
}

#[test]
fn coupons_target_loyal_consumers() {
    let p = panel();
    let loyal: BTreeMap<u32, bool> = p.profiles.iter().map(|c| (c.consumer_id, c.loyalty)).collect();
    let mut rate = [(0.0, 0.0); 2];
    for r in &p.records {
        let k = usize::from(loyal[&r.consumer_id]);
        rate[k].0 += b(r.actions.coupon);
        rate[k].1 += 1.0;
    }
    assert!(rate[1].0 / rate[1].1 > rate[0].0 / rate[0].1);
}

#[test]
fn base_rates_land_in_range() {
    let p = panel();
    let visit = mean(&p.records.iter().map(|r| b(r.visit)).collect::<Vec<_>>());
    let purchase = mean(&p.records.iter().map(|r| b(r.purchase)).collect::<Vec<_>>());
    assert!((0.15..=0.45).contains(&visit), "visit rate {visit}");
    assert!((0.05..=0.35).contains(&purchase), "purchase rate {purchase}");
}

#[test]
fn price_equation_holds_on_every_record() {
    let p = panel();
    for r in &p.records {
        let want = price_of(&r.actions, p.traits[&r.consumer_id].coupon_depth_r);
        assert_eq!(r.price.to_bits(), want.to_bits());
    }
}

#[test]
fn store_actions_are_shared_within_store_days() {
    let p = panel();
    let store: BTreeMap<u32, u8> = p.profiles.iter().map(|c| (c.consumer_id, c.store)).collect();
    let mut seen: BTreeMap<(u8, u32), (bool, bool, bool)> = BTreeMap::new();
    for r in &p.records {
        let a = (r.actions.sale1, r.actions.sale2, r.actions.campaign);
        assert_eq!(*seen.entry((store[&r.consumer_id], r.day)).or_insert(a), a);
    }
}

#[test]
fn confounding_signs_and_no_direct_alpha_gamma_path() {
    let seed = 11;
    let pop = draw_population(2000, seed).unwrap();
    let cfg = LatentConfig::default();
    let traits: Vec<_> = pop.iter().map(|c| latent_params(c, seed, &cfg)).collect();
    let alpha: Vec<f64> = traits.iter().map(|t| t.alpha).collect();
    let gamma: Vec<f64> = traits.iter().map(|t| t.gamma).collect();
    let beta: Vec<f64> = traits.iter().map(|t| t.beta).collect();
    assert!(corr(&alpha, &beta) < -0.1);
    assert!(corr(&gamma, &beta) > 0.1);

    // residualise on demographic cells, then correlate
    let mut cells: BTreeMap<(u8, u8, bool), Vec<usize>> = BTreeMap::new();
    for (i, c) in pop.iter().enumerate() {
        cells
            .entry((c.income_quintile, c.age_decade, c.loyalty))
            .or_default()
            .push(i);
    }
    let (mut ra, mut rg) = (vec![0.0; pop.len()], vec![0.0; pop.len()]);
    for idx in cells.values() {
        let ma = idx.iter().map(|&i| alpha[i]).sum::<f64>() / idx.len() as f64;
        let mg = idx.iter().map(|&i| gamma[i]).sum::<f64>() / idx.len() as f64;
        for &i in idx {
            ra[i] = alpha[i] - ma;
            rg[i] = gamma[i] - mg;
        }
    }
    let partial = corr(&ra, &rg);
    assert!(partial.abs() < 0.05, "partial corr {partial}");
}

#[test]
fn default_split_sizes() {
    let p = panel();
    let cfg = SimConfig::default();
    let meta = SplitMeta::from_config(&cfg.split, &p.profiles, cfg.t_days, cfg.seed).unwrap();
    let s = split_by(&p.records, meta);
    assert_eq!(s.sizes(), (312_320, 30_720, 30_720));
    let last_train = s.train.iter().map(|r| r.day).max().unwrap();
    assert!(s.test.iter().all(|r| r.day > last_train));
}

#[test]
fn same_seed_gives_byte_identical_panels() {
    let cfg = SimConfig {
        n_consumers: 64,
        t_days: 90,
        ..SimConfig::default()
    };
    let bytes = |c: &SimConfig| {
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &simulate_panel(c).unwrap().records).unwrap();
        buf
    };
    assert_eq!(bytes(&cfg), bytes(&cfg));
    let other = SimConfig { seed: 8, ..cfg.clone() };
    assert_ne!(bytes(&cfg), bytes(&other));
}
