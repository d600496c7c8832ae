//! Staged, content-addressed pipeline driver.
//!
//! Each stage writes its artifacts into the output directory together with a
//! manifest `manifests/<stage>.json` recording a key (a digest of the config
//! sections the stage depends on, chained through its predecessors) and the
//! SHA-256 of every file it wrote. A stage loading a predecessor's artifacts
//! checks that the manifest exists, that its key matches the current config,
//! and that no file changed since it was written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapter::{forward_chunked, train_mlp, InputKind, MlpModel, Task, TrainConfig, TrainReport};
use crate::causal::{
    adapter_matrix, delta_free_energy_batch, energy_report, run_cate_experiment, CateInputs, CateSummary, EnergyReport,
    Intervention, MetaConfig, Method,
};
use crate::checkpoint::sha256_hex;
use crate::ebm::{
    finetune_dbm, model_info, pretrain_stack, DbmModel, FinetuneConfig, FinetuneReport, MeanFieldConfig, ModelInfo,
    PretrainConfig, PretrainReport,
};
use crate::encode::{encode_consumer, read_bit_matrix, write_bit_matrix, BitMatrix, ClampSpec, Schema, DEFAULT_WS};
use crate::error::{Result, WmError};
use crate::math::sigmoid;
use crate::rng::derive_seed;
use crate::simgen::{
    read_panel_csv, read_profiles_csv, read_traits_csv, simulate_panel, split_by, write_panel_csv, write_profiles_csv,
    write_traits_csv, ActionVector, ConsumerProfile, LatentTraits, PanelRecord, SimConfig, Split, SplitMeta,
    SplitPanel,
};
use crate::stats;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub ws: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self { ws: DEFAULT_WS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelConfig {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefConfig {
    pub mean_field: MeanFieldConfig,
    pub chunk_rows: usize,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        Self {
            mean_field: MeanFieldConfig::default(),
            chunk_rows: 16384,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CateConfig {
    /// Average effects per consumer before correlating with the traits.
    pub per_consumer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    /// Defaults to "purchase without recent promotion" for the encoder window.
    pub clamp: Option<ClampSpec>,
    pub mean_field: MeanFieldConfig,
    pub chunk_rows: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            clamp: None,
            mean_field: MeanFieldConfig::default(),
            chunk_rows: 16384,
        }
    }
}

/// Everything a run depends on. `seed` replaces `sim.seed`; every other
/// stage draws a named sub-seed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub sim: SimConfig,
    pub encode: EncodeConfig,
    pub world_model: WorldModelConfig,
    pub belief: BeliefConfig,
    pub adapter: TrainConfig,
    pub baseline_mlp: TrainConfig,
    pub meta: MetaConfig,
    pub cate: CateConfig,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/default"),
            sim: SimConfig::default(),
            encode: EncodeConfig::default(),
            world_model: WorldModelConfig::default(),
            belief: BeliefConfig::default(),
            adapter: TrainConfig::default(),
            baseline_mlp: TrainConfig::default(),
            meta: MetaConfig::default(),
            cate: CateConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.encode.ws)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.sim.clone()
        }
    }

    pub fn clamp(&self) -> ClampSpec {
        self.energy
            .clamp
            .clone()
            .unwrap_or_else(|| ClampSpec::purchase_without_promotion(self.encode.ws))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.schema();
        let sizes = &self.world_model.pretrain.layer_sizes;
        if sizes.len() < 2 {
            return Err(WmError::InvalidConfig(
                "world_model.pretrain.layer_sizes needs at least two layers".into(),
            ));
        }
        if sizes[0] != schema.dim() {
            return Err(WmError::InvalidConfig(format!(
                "world_model.pretrain.layer_sizes[0] = {} but the encoder emits {} bits",
                sizes[0],
                schema.dim()
            )));
        }
        self.adapter.validate()?;
        self.baseline_mlp.validate()?;
        if self.belief.chunk_rows == 0 || self.energy.chunk_rows == 0 {
            return Err(WmError::InvalidConfig("chunk_rows must be positive".into()));
        }
        self.clamp().resolve(&schema)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stages and manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Encode,
    TrainWm,
    ExtractBelief,
    TrainAdapter,
    TrainBaselines,
    EvalPred,
    EvalCate,
    EvalEnergy,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Simulate,
        Stage::Encode,
        Stage::TrainWm,
        Stage::ExtractBelief,
        Stage::TrainAdapter,
        Stage::TrainBaselines,
        Stage::EvalPred,
        Stage::EvalCate,
        Stage::EvalEnergy,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Encode => "encode",
            Stage::TrainWm => "train-wm",
            Stage::ExtractBelief => "extract-belief",
            Stage::TrainAdapter => "train-adapter",
            Stage::TrainBaselines => "train-baselines",
            Stage::EvalPred => "eval-pred",
            Stage::EvalCate => "eval-cate",
            Stage::EvalEnergy => "eval-energy",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| WmError::InvalidConfig(format!("unknown stage `{s}`")))
    }

    fn per_task(self) -> bool {
        matches!(self, Stage::TrainAdapter | Stage::TrainBaselines)
    }
}

/// Stage plus task for the per-task training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit(Stage, Option<Task>);

impl Unit {
    fn id(self) -> String {
        match self.1 {
            Some(t) => format!("{}-{}", self.0.name(), t.name()),
            None => self.0.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    /// File name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSidecar {
    pub rows: usize,
    pub cols: usize,
    pub world_model: String,
    pub schema_hash: String,
    pub converged_fraction: f64,
    pub mean_iterations: f64,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelTraining {
    pub fingerprint: String,
    pub pretrain: PretrainReport,
    pub finetune: FinetuneReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub task: Task,
    pub n_test: usize,
    pub positive_rate: f64,
    pub adapter_auc: f64,
    pub baseline_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub world_model: String,
    pub tasks: Vec<TaskPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateFile {
    pub world_model: String,
    pub interventions: Vec<CateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyFile {
    pub world_model: String,
    pub clamp: ClampSpec,
    pub splits: Vec<EnergyReport>,
}

fn digest(parts: &serde_json::Value) -> String {
    sha256_hex(parts.to_string().as_bytes())
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn task_label(r: &PanelRecord, task: Task) -> bool {
    match task {
        Task::Visit => r.visit,
        Task::Purchase => r.purchase,
    }
}

fn task_index(task: Task) -> u64 {
    match task {
        Task::Visit => 0,
        Task::Purchase => 1,
    }
}

fn split_records(sp: &SplitPanel, split: Split) -> &[PanelRecord] {
    match split {
        Split::Train => &sp.train,
        Split::Validation => &sp.validation,
        Split::Test => &sp.test,
    }
}

pub struct PanelData {
    pub profiles: Vec<ConsumerProfile>,
    pub records: Vec<PanelRecord>,
    pub traits: BTreeMap<u32, LatentTraits>,
    pub split: SplitPanel,
}

impl PanelData {
    pub fn records(&self, split: Split) -> &[PanelRecord] {
        split_records(&self.split, split)
    }

    pub fn actions(&self, split: Split) -> Vec<ActionVector> {
        self.records(split).iter().map(|r| r.actions).collect()
    }

    pub fn labels(&self, split: Split, task: Task) -> Vec<bool> {
        self.records(split).iter().map(|r| task_label(r, task)).collect()
    }

    pub fn keys(&self, split: Split) -> Vec<(u32, u32)> {
        self.records(split).iter().map(|r| (r.consumer_id, r.day)).collect()
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out.clone();
        fs::create_dir_all(out.join("manifests"))?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest_path(&self, u: Unit) -> PathBuf {
        self.out.join("manifests").join(format!("{}.json", u.id()))
    }

    /// Expected manifest key of a stage under the current config.
    fn key(&self, u: Unit) -> Result<String> {
        let c = &self.cfg;
        let v = match u {
            Unit(Stage::Simulate, _) => json!(["simulate", c.sim_config()]),
            Unit(Stage::Encode, _) => json!(["encode", self.key(Unit(Stage::Simulate, None))?, c.encode]),
            Unit(Stage::TrainWm, _) => {
                json!(["train-wm", self.key(Unit(Stage::Encode, None))?, c.seed, c.world_model])
            }
            Unit(Stage::ExtractBelief, _) => {
                json!(["extract-belief", self.key(Unit(Stage::TrainWm, None))?, c.belief])
            }
            Unit(Stage::TrainAdapter, t) => json!([
                "train-adapter",
                self.key(Unit(Stage::ExtractBelief, None))?,
                c.seed,
                t,
                c.adapter
            ]),
            Unit(Stage::TrainBaselines, t) => json!([
                "train-baselines",
                self.key(Unit(Stage::Encode, None))?,
                c.seed,
                t,
                c.baseline_mlp
            ]),
            Unit(Stage::EvalPred, _) => {
                let mut deps = Vec::new();
                for t in Task::ALL {
                    deps.push(self.key(Unit(Stage::TrainAdapter, Some(t)))?);
                    deps.push(self.key(Unit(Stage::TrainBaselines, Some(t)))?);
                }
                json!(["eval-pred", deps])
            }
            Unit(Stage::EvalCate, _) => {
                let deps: Vec<String> = Task::ALL
                    .iter()
                    .map(|&t| self.key(Unit(Stage::TrainAdapter, Some(t))))
                    .collect::<Result<_>>()?;
                json!(["eval-cate", deps, c.seed, c.meta, c.cate])
            }
            Unit(Stage::EvalEnergy, _) => json!([
                "eval-energy",
                self.key(Unit(Stage::TrainWm, None))?,
                c.clamp(),
                c.energy.mean_field,
                c.energy.chunk_rows
            ]),
            Unit(Stage::Report, _) => json!([
                "report",
                self.key(Unit(Stage::EvalPred, None))?,
                self.key(Unit(Stage::EvalCate, None))?,
                self.key(Unit(Stage::EvalEnergy, None))?
            ]),
        };
        Ok(digest(&v))
    }

    fn begin(&self, u: Unit) -> Result<()> {
        let p = self.manifest_path(u);
        if p.exists() {
            fs::remove_file(p)?;
        }
        log::info!("stage {}", u.id());
        Ok(())
    }

    fn finish(&self, u: Unit, outputs: &[String]) -> Result<Manifest> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.clone(), sha256_hex(&fs::read(self.path(name))?));
        }
        let m = Manifest {
            stage: u.0.name().to_string(),
            key: self.key(u)?,
            outputs: hashes,
        };
        write_json(&self.manifest_path(u), &m)?;
        Ok(m)
    }

    fn require(&self, u: Unit) -> Result<Manifest> {
        let stage = u.0.name();
        let p = self.manifest_path(u);
        if !p.exists() {
            return Err(WmError::MissingArtifact { path: p, stage });
        }
        let m: Manifest = read_json(&p)?;
        if m.key != self.key(u)? {
            return Err(WmError::StaleArtifact {
                stage,
                detail: format!("{} was produced under a different configuration", u.id()),
            });
        }
        for (name, hash) in &m.outputs {
            let f = self.path(name);
            if !f.exists() {
                return Err(WmError::MissingArtifact { path: f, stage });
            }
            if &sha256_hex(&fs::read(&f)?) != hash {
                return Err(WmError::StaleArtifact {
                    stage,
                    detail: format!("{name} changed after it was written"),
                });
            }
        }
        Ok(m)
    }

    /// Manifest of a completed stage, if present (no freshness check).
    pub fn manifest(&self, stage: Stage, task: Option<Task>) -> Result<Option<Manifest>> {
        let p = self.manifest_path(Unit(stage, task));
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    // -- loaders -------------------------------------------------------------

    pub fn load_panel(&self) -> Result<PanelData> {
        self.require(Unit(Stage::Simulate, None))?;
        let records = read_panel_csv(File::open(self.path("panel.csv"))?)?;
        let profiles = read_profiles_csv(File::open(self.path("profiles.csv"))?)?;
        let traits = read_traits_csv(File::open(self.path("traits.csv"))?)?;
        let meta: SplitMeta = read_json(&self.path("split.json"))?;
        let split = split_by(&records, meta);
        Ok(PanelData {
            profiles,
            records,
            traits,
            split,
        })
    }

    pub fn load_visible(&self, split: Split) -> Result<BitMatrix> {
        let (m, side) = read_bit_matrix(&self.path(&format!("visible_{}.bin", split.name())))?;
        let schema = self.cfg.schema();
        if side.schema_hash != schema.hash() {
            return Err(WmError::SchemaMismatch {
                expected: schema.hash(),
                got: side.schema_hash,
            });
        }
        Ok(m)
    }

    pub fn load_world_model(&self) -> Result<DbmModel> {
        self.require(Unit(Stage::TrainWm, None))?;
        let m = DbmModel::from_bytes(&fs::read(self.path("world_model.ckpt"))?)?;
        if !m.frozen {
            return Err(WmError::NotFrozen);
        }
        let want = self.cfg.schema().hash();
        if m.schema_hash != want {
            return Err(WmError::SchemaMismatch {
                expected: want,
                got: m.schema_hash,
            });
        }
        Ok(m)
    }

    pub fn load_beliefs(&self, split: Split, world_model: &str) -> Result<Array2<f64>> {
        let name = format!("belief_{}", split.name());
        let side: BeliefSidecar = read_json(&self.path(&format!("{name}.json")))?;
        if side.world_model != world_model {
            return Err(WmError::SchemaMismatch {
                expected: world_model.to_string(),
                got: side.world_model,
            });
        }
        let bytes = fs::read(self.path(&format!("{name}.bin")))?;
        if bytes.len() != side.rows * side.cols * 8 {
            return Err(WmError::Format(format!(
                "{name}.bin: {} bytes for {}x{}",
                bytes.len(),
                side.rows,
                side.cols
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((side.rows, side.cols), data).map_err(|e| WmError::Format(e.to_string()))
    }

    fn adapter_file(task: Task) -> String {
        format!("adapter_{}.ckpt", task.name())
    }

    fn baseline_file(task: Task) -> String {
        format!("baseline_{}.ckpt", task.name())
    }

    pub fn load_adapter(&self, task: Task, world_model: &str) -> Result<MlpModel> {
        self.require(Unit(Stage::TrainAdapter, Some(task)))?;
        let m = MlpModel::from_bytes(&fs::read(self.path(&Self::adapter_file(task)))?)?;
        if m.world_model != world_model {
            return Err(WmError::SchemaMismatch {
                expected: world_model.to_string(),
                got: m.world_model,
            });
        }
        Ok(m)
    }

    pub fn load_baseline(&self, task: Task) -> Result<MlpModel> {
        self.require(Unit(Stage::TrainBaselines, Some(task)))?;
        MlpModel::from_bytes(&fs::read(self.path(&Self::baseline_file(task)))?)
    }

    // -- stages --------------------------------------------------------------

    pub fn simulate(&self) -> Result<Manifest> {
        let u = Unit(Stage::Simulate, None);
        self.begin(u)?;
        let sim = self.cfg.sim_config();
        let panel = simulate_panel(&sim)?;
        let meta = SplitMeta::from_config(&sim.split, &panel.profiles, sim.t_days, sim.seed)?;
        write_panel_csv(create_writer(&self.path("panel.csv"))?, &panel.records)?;
        write_traits_csv(create_writer(&self.path("traits.csv"))?, &panel.traits)?;
        write_profiles_csv(create_writer(&self.path("profiles.csv"))?, &panel.profiles)?;
        write_json(&self.path("split.json"), &meta)?;
        let outs = ["panel.csv", "traits.csv", "profiles.csv", "split.json"].map(String::from);
        self.finish(u, &outs)
    }

    pub fn encode(&self) -> Result<Manifest> {
        let u = Unit(Stage::Encode, None);
        let pd = self.load_panel()?;
        self.begin(u)?;
        let schema = self.cfg.schema();
        let by_id: BTreeMap<u32, &ConsumerProfile> = pd.profiles.iter().map(|p| (p.consumer_id, p)).collect();
        let mut mats: BTreeMap<Split, BitMatrix> =
            Split::ALL.iter().map(|&s| (s, BitMatrix::new(schema.dim()))).collect();
        for rows in pd.records.chunk_by(|a, b| a.consumer_id == b.consumer_id) {
            let id = rows[0].consumer_id;
            let p = by_id
                .get(&id)
                .ok_or_else(|| WmError::Format(format!("panel consumer {id} has no profile")))?;
            for (r, v) in rows.iter().zip(encode_consumer(p, rows, &schema)?) {
                let sp = pd.split.meta.assign(r.consumer_id, r.day);
                mats.get_mut(&sp).expect("every split present").push_row(v.bits());
            }
        }
        let mut outs = Vec::new();
        for (sp, m) in &mats {
            let name = format!("visible_{}", sp.name());
            write_bit_matrix(&self.path(&format!("{name}.bin")), m, &schema.columns, &schema.hash())?;
            outs.push(format!("{name}.bin"));
            outs.push(format!("{name}.json"));
        }
        write_json(&self.path("schema.json"), &schema)?;
        outs.push("schema.json".into());
        self.finish(u, &outs)
    }

    pub fn train_world_model(&self) -> Result<Manifest> {
        let u = Unit(Stage::TrainWm, None);
        self.require(Unit(Stage::Encode, None))?;
        let train = self.load_visible(Split::Train)?.to_f64();
        let val = self.load_visible(Split::Validation)?.to_f64();
        self.begin(u)?;
        let seed = derive_seed(self.cfg.seed, "world-model", 0, 0);
        let t0 = Instant::now();
        let (mut model, pretrain) = pretrain_stack(train.view(), &self.cfg.world_model.pretrain, seed)?;
        log::info!("pretraining done in {:.1?}", t0.elapsed());
        model.schema_hash = self.cfg.schema().hash();
        let t0 = Instant::now();
        let (model, finetune) = finetune_dbm(model, train.view(), val.view(), &self.cfg.world_model.finetune, seed)?;
        log::info!("fine-tuning done in {:.1?}", t0.elapsed());
        fs::write(self.path("world_model.ckpt"), model.to_bytes()?)?;
        write_json(
            &self.path("world_model_training.json"),
            &WorldModelTraining {
                fingerprint: model.fingerprint()?,
                pretrain,
                finetune,
            },
        )?;
        self.finish(u, &["world_model.ckpt".into(), "world_model_training.json".into()])
    }

    pub fn extract_beliefs(&self) -> Result<Manifest> {
        let u = Unit(Stage::ExtractBelief, None);
        let model = self.load_world_model()?;
        self.require(Unit(Stage::Encode, None))?;
        self.begin(u)?;
        let fp = model.fingerprint()?;
        let bc = &self.cfg.belief;
        let mut outs = Vec::new();
        for sp in Split::ALL {
            let vis = self.load_visible(sp)?;
            let name = format!("belief_{}", sp.name());
            let mut w = create_writer(&self.path(&format!("{name}.bin")))?;
            let (mut conv, mut iters) = (0usize, 0u64);
            let mut start = 0;
            while start < vis.rows {
                let end = (start + bc.chunk_rows).min(vis.rows);
                let idx: Vec<usize> = (start..end).collect();
                let batch = model.mean_field_batch(vis.select(&idx).to_f64().view(), &bc.mean_field)?;
                let mu: Vec<ArrayView2<f64>> = batch.mu.iter().map(|m| m.view()).collect();
                let b = concatenate(Axis(1), &mu).map_err(|e| WmError::Format(e.to_string()))?;
                for x in b.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
                conv += batch.converged.iter().filter(|&&c| c).count();
                iters += batch.iterations.iter().map(|&i| u64::from(i)).sum::<u64>();
                start = end;
            }
            w.flush()?;
            let n = vis.rows.max(1) as f64;
            write_json(
                &self.path(&format!("{name}.json")),
                &BeliefSidecar {
                    rows: vis.rows,
                    cols: model.total_hidden(),
                    world_model: fp.clone(),
                    schema_hash: model.schema_hash.clone(),
                    converged_fraction: conv as f64 / n,
                    mean_iterations: iters as f64 / n,
                    layout: "row-major little-endian f64, layers concatenated bottom to top".into(),
                },
            )?;
            log::info!("{name}: {} rows, {:.4} converged", vis.rows, conv as f64 / n);
            outs.push(format!("{name}.bin"));
            outs.push(format!("{name}.json"));
        }
        self.finish(u, &outs)
    }

    fn fit_mlp(
        &self,
        xs: [Array2<f64>; 2],
        pd: &PanelData,
        task: Task,
        kind: InputKind,
        base: &TrainConfig,
        tag: &str,
    ) -> Result<(MlpModel, TrainReport)> {
        let cfg = TrainConfig {
            seed: derive_seed(self.cfg.seed, tag, task_index(task), 0),
            ..base.clone()
        };
        let y_tr = pd.labels(Split::Train, task);
        let y_va = pd.labels(Split::Validation, task);
        let t0 = Instant::now();
        let out = train_mlp(xs[0].view(), &y_tr, xs[1].view(), &y_va, kind, &cfg)?;
        log::info!(
            "{tag} {}: best epoch {} val AUC {:.4} in {:.1?}",
            task.name(),
            out.1.best_epoch,
            out.1.best_val_auc,
            t0.elapsed()
        );
        Ok(out)
    }

    /// Fit the belief adapter for one task. Other tasks' artifacts are untouched.
    pub fn train_adapter(&self, task: Task) -> Result<Manifest> {
        let u = Unit(Stage::TrainAdapter, Some(task));
        let model = self.load_world_model()?;
        self.require(Unit(Stage::ExtractBelief, None))?;
        let fp = model.fingerprint()?;
        let pd = self.load_panel()?;
        self.begin(u)?;
        let xs = [Split::Train, Split::Validation].map(|sp| -> Result<Array2<f64>> {
            let b = self.load_beliefs(sp, &fp)?;
            Ok(adapter_matrix(b.view(), &pd.actions(sp), None))
        });
        let [a, b] = xs;
        let (mut mlp, report) = self.fit_mlp(
            [a?, b?],
            &pd,
            task,
            InputKind::BeliefAction,
            &self.cfg.adapter,
            "adapter",
        )?;
        mlp.world_model = fp;
        mlp.schema_hash = self.cfg.schema().hash();
        let ck = Self::adapter_file(task);
        let rep = format!("adapter_{}_training.json", task.name());
        fs::write(self.path(&ck), mlp.to_bytes()?)?;
        write_json(&self.path(&rep), &report)?;
        self.finish(u, &[ck, rep])
    }

    /// Fit the raw-feature baseline MLP for one task.
    pub fn train_baseline(&self, task: Task) -> Result<Manifest> {
        let u = Unit(Stage::TrainBaselines, Some(task));
        self.require(Unit(Stage::Encode, None))?;
        let pd = self.load_panel()?;
        self.begin(u)?;
        let xs = [Split::Train, Split::Validation].map(|sp| -> Result<Array2<f64>> {
            let v = self.load_visible(sp)?.to_f64();
            Ok(adapter_matrix(v.view(), &pd.actions(sp), None))
        });
        let [a, b] = xs;
        let (mut mlp, report) = self.fit_mlp(
            [a?, b?],
            &pd,
            task,
            InputKind::RawAction,
            &self.cfg.baseline_mlp,
            "baseline-mlp",
        )?;
        mlp.schema_hash = self.cfg.schema().hash();
        let ck = Self::baseline_file(task);
        let rep = format!("baseline_{}_training.json", task.name());
        fs::write(self.path(&ck), mlp.to_bytes()?)?;
        write_json(&self.path(&rep), &report)?;
        self.finish(u, &[ck, rep])
    }

    fn write_predictions(&self, name: &str, keys: &[(u32, u32)], rows: &[(Task, Vec<f64>)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(create_writer(&self.path(name))?);
        w.write_record(["consumer_id", "day", "task", "p_hat", "logit"])?;
        for (task, logits) in rows {
            for (&(c, d), &z) in keys.iter().zip(logits) {
                w.write_record([
                    c.to_string(),
                    d.to_string(),
                    task.name().to_string(),
                    format!("{:.12e}", sigmoid(z)),
                    format!("{z:.12e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn eval_predictions(&self) -> Result<Manifest> {
        let u = Unit(Stage::EvalPred, None);
        let model = self.load_world_model()?;
        let fp = model.fingerprint()?;
        let adapters: Vec<MlpModel> = Task::ALL
            .iter()
            .map(|&t| self.load_adapter(t, &fp))
            .collect::<Result<_>>()?;
        let baselines: Vec<MlpModel> = Task::ALL
            .iter()
            .map(|&t| self.load_baseline(t))
            .collect::<Result<_>>()?;
        let pd = self.load_panel()?;
        self.begin(u)?;
        let acts = pd.actions(Split::Test);
        let keys = pd.keys(Split::Test);
        let xb = adapter_matrix(self.load_beliefs(Split::Test, &fp)?.view(), &acts, None);
        let xr = adapter_matrix(self.load_visible(Split::Test)?.to_f64().view(), &acts, None);
        let chunk = self.cfg.belief.chunk_rows;
        let mut a_rows = Vec::new();
        let mut b_rows = Vec::new();
        let mut tasks = Vec::new();
        for (k, &task) in Task::ALL.iter().enumerate() {
            let y = pd.labels(Split::Test, task);
            let za = forward_chunked(&adapters[k], xb.view(), chunk)?;
            let zb = forward_chunked(&baselines[k], xr.view(), chunk)?;
            tasks.push(TaskPrediction {
                task,
                n_test: y.len(),
                positive_rate: y.iter().filter(|&&v| v).count() as f64 / y.len().max(1) as f64,
                adapter_auc: stats::auc(&za, &y)?,
                baseline_auc: stats::auc(&zb, &y)?,
            });
            a_rows.push((task, za));
            b_rows.push((task, zb));
        }
        self.write_predictions("predictions.csv", &keys, &a_rows)?;
        self.write_predictions("predictions_baseline.csv", &keys, &b_rows)?;
        write_json(
            &self.path("prediction_report.json"),
            &PredictionReport { world_model: fp, tasks },
        )?;
        self.finish(
            u,
            &["predictions.csv", "predictions_baseline.csv", "prediction_report.json"].map(String::from),
        )
    }

    pub fn eval_cate(&self) -> Result<Manifest> {
        let u = Unit(Stage::EvalCate, None);
        let model = self.load_world_model()?;
        let fp = model.fingerprint()?;
        let adapters: BTreeMap<Task, MlpModel> = Task::ALL
            .iter()
            .map(|&t| Ok((t, self.load_adapter(t, &fp)?)))
            .collect::<Result<_>>()?;
        let pd = self.load_panel()?;
        self.begin(u)?;
        let tr_vis = self.load_visible(Split::Train)?;
        let te_vis = self.load_visible(Split::Test)?;
        let te_bel = self.load_beliefs(Split::Test, &fp)?;
        let tr_act = pd.actions(Split::Train);
        let te_act = pd.actions(Split::Test);
        let keys = pd.keys(Split::Test);
        let mut summaries = Vec::new();
        let mut w = csv::Writer::from_writer(create_writer(&self.path("cate_report.csv"))?);
        w.write_record(["consumer_id", "day", "intervention", "method", "tau_prob", "tau_logit"])?;
        for (k, iv) in Intervention::ALL.into_iter().enumerate() {
            let y = pd.labels(Split::Train, iv.task());
            let mut meta = self.cfg.meta.clone();
            meta.forest.seed = derive_seed(self.cfg.seed, "meta", k as u64, 0);
            let t0 = Instant::now();
            let rep = run_cate_experiment(
                &CateInputs {
                    intervention: iv,
                    train_visible: &tr_vis,
                    train_actions: &tr_act,
                    train_outcome: &y,
                    test_visible: &te_vis,
                    test_actions: &te_act,
                    test_beliefs: te_bel.view(),
                    test_keys: &keys,
                    adapter: &adapters[&iv.task()],
                    traits: &pd.traits,
                },
                &Method::ALL,
                &meta,
                self.cfg.cate.per_consumer,
            )?;
            log::info!("cate {} done in {:.1?}", iv.name(), t0.elapsed());
            for (m, est) in &rep.estimates {
                for (i, &(c, d)) in keys.iter().enumerate() {
                    w.write_record([
                        c.to_string(),
                        d.to_string(),
                        iv.name().to_string(),
                        m.name().to_string(),
                        format!("{:.12e}", est.tau_prob[i]),
                        format!("{:.12e}", est.tau_logit[i]),
                    ])?;
                }
            }
            summaries.push(rep.summary);
        }
        w.flush()?;
        drop(w);
        write_json(
            &self.path("cate_summary.json"),
            &CateFile {
                world_model: fp,
                interventions: summaries,
            },
        )?;
        self.finish(u, &["cate_report.csv".into(), "cate_summary.json".into()])
    }

    pub fn eval_energy(&self) -> Result<Manifest> {
        let u = Unit(Stage::EvalEnergy, None);
        let model = self.load_world_model()?;
        self.require(Unit(Stage::Encode, None))?;
        let pd = self.load_panel()?;
        self.begin(u)?;
        let clamp = self.cfg.clamp();
        let resolved = clamp.resolve(&self.cfg.schema())?;
        let ec = &self.cfg.energy;
        let mut splits = Vec::new();
        for sp in Split::ALL {
            let vis = self.load_visible(sp)?;
            let t0 = Instant::now();
            let df = delta_free_energy_batch(&model, &vis, &resolved, &ec.mean_field, ec.chunk_rows)?;
            let recs = pd.records(sp);
            let (mut vals, mut beta) = (Vec::new(), Vec::new());
            for (d, r) in df.iter().zip(recs) {
                if let Some(d) = d {
                    vals.push(*d);
                    beta.push(pd.traits[&r.consumer_id].beta);
                }
            }
            let rep = energy_report(sp.name(), vis.rows, &vals, &beta, false)?;
            log::info!(
                "energy {}: {} eligible, mean dF {:.4} in {:.1?}",
                sp.name(),
                rep.eligible,
                rep.delta_f.mean,
                t0.elapsed()
            );
            splits.push(rep);
        }
        write_json(
            &self.path("energy_report.json"),
            &EnergyFile {
                world_model: model.fingerprint()?,
                clamp,
                splits,
            },
        )?;
        self.finish(u, &["energy_report.json".into()])
    }

    pub fn report(&self) -> Result<Manifest> {
        let u = Unit(Stage::Report, None);
        self.require(Unit(Stage::EvalPred, None))?;
        self.require(Unit(Stage::EvalCate, None))?;
        self.require(Unit(Stage::EvalEnergy, None))?;
        self.begin(u)?;
        let pred: PredictionReport = read_json(&self.path("prediction_report.json"))?;
        let cate: CateFile = read_json(&self.path("cate_summary.json"))?;
        let energy: EnergyFile = read_json(&self.path("energy_report.json"))?;
        let md = render_summary(&self.cfg, &pred, &cate, &energy);
        fs::write(self.path("summary.md"), md)?;
        self.finish(u, &["summary.md".into()])
    }

    /// Run one stage; per-task stages run for `task` or for every task.
    pub fn run_stage(&self, stage: Stage, task: Option<Task>) -> Result<()> {
        if task.is_some() && !stage.per_task() {
            return Err(WmError::InvalidConfig(format!(
                "stage `{}` does not take a task",
                stage.name()
            )));
        }
        let tasks: Vec<Task> = task.map(|t| vec![t]).unwrap_or_else(|| Task::ALL.to_vec());
        match stage {
            Stage::Simulate => self.simulate().map(drop),
            Stage::Encode => self.encode().map(drop),
            Stage::TrainWm => self.train_world_model().map(drop),
            Stage::ExtractBelief => self.extract_beliefs().map(drop),
            Stage::TrainAdapter => tasks.into_iter().try_for_each(|t| self.train_adapter(t).map(drop)),
            Stage::TrainBaselines => tasks.into_iter().try_for_each(|t| self.train_baseline(t).map(drop)),
            Stage::EvalPred => self.eval_predictions().map(drop),
            Stage::EvalCate => self.eval_cate().map(drop),
            Stage::EvalEnergy => self.eval_energy().map(drop),
            Stage::Report => self.report().map(drop),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        let t0 = Instant::now();
        for stage in Stage::ALL {
            let t = Instant::now();
            self.run_stage(stage, None)?;
            log::info!("{} finished in {:.1?}", stage.name(), t.elapsed());
        }
        log::info!("run-all finished in {:.1?}", t0.elapsed());
        Ok(())
    }
}

pub fn wm_info(path: &Path) -> Result<ModelInfo> {
    model_info(&DbmModel::from_bytes(&fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Markdown summary
// ---------------------------------------------------------------------------

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:+.3}"))
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn render_summary(cfg: &RunConfig, pred: &PredictionReport, cate: &CateFile, energy: &EnergyFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(
        s,
        "seed {}, {} consumers x {} days, world model `{}`\n",
        cfg.seed,
        cfg.sim.n_consumers,
        cfg.sim.t_days,
        &pred.world_model[..pred.world_model.len().min(16)]
    );

    let _ = writeln!(s, "## Outcome prediction (test AUC)\n");
    let _ = writeln!(s, "| task | n | positive rate | adapter | baseline MLP | difference |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|");
    for t in &pred.tasks {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:+.4} |",
            t.task.name(),
            t.n_test,
            t.positive_rate,
            t.adapter_auc,
            t.baseline_auc,
            t.adapter_auc - t.baseline_auc
        );
    }

    let _ = writeln!(s, "\n## Free-energy response to the clamp\n");
    let _ = writeln!(
        s,
        "| split | eligible | mean dF | paired t (p) | Wilcoxon (p) | high beta | low beta | Welch t (p) | Mann-Whitney (p) |"
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    for r in &energy.splits {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.2} ({}) | {:.1} ({}) | {:.4} | {:.4} | {:.2} ({}) | {:.1} ({}) |",
            r.split,
            r.eligible,
            r.delta_f.mean,
            r.paired_t.statistic,
            fmt_p(r.paired_t.p_value),
            r.wilcoxon.statistic,
            fmt_p(r.wilcoxon.p_value),
            r.high_beta.mean,
            r.low_beta.mean,
            r.welch_t.statistic,
            fmt_p(r.welch_t.p_value),
            r.mann_whitney.statistic,
            fmt_p(r.mann_whitney.p_value)
        );
    }

    let _ = writeln!(
        s,
        "\n## Treatment-effect heterogeneity (Spearman rho with latent traits)\n"
    );
    for c in &cate.interventions {
        let _ = writeln!(
            s,
            "### {} (n = {}{})\n",
            c.intervention.name(),
            c.n_test,
            if c.per_consumer { ", consumer means" } else { "" }
        );
        let _ = writeln!(s, "| method | rho alpha | rho beta | rho gamma | mean tau |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for (m, r) in &c.rho {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:+.4} |",
                m.label(),
                fmt_opt(r.alpha),
                fmt_opt(r.beta),
                fmt_opt(r.gamma),
                c.mean_tau.get(m).copied().unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(s);
    }
    s
}
