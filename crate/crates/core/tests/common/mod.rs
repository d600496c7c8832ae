//! Small simulated panels encoded into visible matrices.

#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use wm_core::encode::{encode_consumer, Schema};
use wm_core::pipeline::RunConfig;
use wm_core::simgen::{simulate_panel, PanelRecord, SimConfig, Split, SplitMeta};

pub struct Encoded {
    pub x: Array2<f64>,
    pub records: Vec<PanelRecord>,
}

/// Visible matrices (train, validation, test) for `n` consumers over a full year.
pub fn encoded_panel(n: usize, seed: u64) -> [Encoded; 3] {
    let cfg = SimConfig {
        n_consumers: n,
        seed,
        ..SimConfig::default()
    };
    let schema = Schema::new(4);
    let panel = simulate_panel(&cfg).unwrap();
    let meta = SplitMeta::from_config(&cfg.split, &panel.profiles, cfg.t_days, cfg.seed).unwrap();
    let mut by_consumer: BTreeMap<u32, Vec<PanelRecord>> = BTreeMap::new();
    for r in &panel.records {
        by_consumer.entry(r.consumer_id).or_default().push(*r);
    }
    let mut rows: [(Vec<f64>, Vec<PanelRecord>); 3] = Default::default();
    for p in &panel.profiles {
        let recs = &by_consumer[&p.consumer_id];
        for (r, v) in recs.iter().zip(encode_consumer(p, recs, &schema).unwrap()) {
            let k = match meta.assign(r.consumer_id, r.day) {
                Split::Train => 0,
                Split::Validation => 1,
                Split::Test => 2,
            };
            rows[k].0.extend(v.to_f64());
            rows[k].1.push(*r);
        }
    }
    rows.map(|(data, records)| Encoded {
        x: Array2::from_shape_vec((records.len(), schema.dim()), data).unwrap(),
        records,
    })
}

/// A run small enough to finish in seconds: 48 consumers, one epoch per
/// world-model phase, short adapter training and tiny forests.
pub fn small_config(out: &Path, seed: u64) -> RunConfig {
    let text = format!(
        r#"
seed = {seed}
out = "{}"

[sim]
n_consumers = 48

[world_model.pretrain]
epochs = 1
monitor_rows = 512

[world_model.finetune]
epochs = 1
monitor_rows = 512

[adapter]
max_epochs = 3
patience = 2

[baseline_mlp]
max_epochs = 3
patience = 2

[meta.forest]
n_trees = 4
"#,
        out.display()
    );
    RunConfig::from_toml_str(&text).unwrap()
}
