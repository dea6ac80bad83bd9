//! Experiment orchestration behind the command-line verbs.
//!
//! All outputs of a configuration live under one output directory:
//!
//! ```text
//! data/{lab,wild,xfer}-{train,test}.advds
//! pretrain/seed-<s>/{generator.ckpt,history.csv,config.toml}
//! adv/<variant>/seed-<s>/{model.ckpt,history.csv,config.toml}
//! eval/<variant>/seed-<s>/<domain>-test.{csv,toml}
//! ablation/{matrix.csv,config.toml}
//! report/{curves.csv,metrics.csv}
//! ```
//!
//! Commands reuse finished artifacts and resume unfinished training runs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{
    grad_check, Checkpoint, CheckpointError, EngineError, GradCheckReport, Parameterized, Record, Tensor,
};
use crate::encode::EncodeConfig;
use crate::eval::MetricsReport;
use crate::models::{
    make_variant, DiscriminatorModel, GeneratorMode, GeneratorModel, ModelConfig, ParamGroup, SourceSet, Variant,
};
use crate::skeleton::{CameraModel, Frame, Pose2D, Pose3D, SkeletonTopology};
use crate::synth::{
    generate_dataset, splitmix, AnthropometricModel, Dataset, DatasetError, DomainSpec, SyntheticSample,
};
use crate::train::{
    adversarial_train, evaluate_generator, generator_objective, pretrain_generator, AdvConfig, AdvState, Batch,
    PreparedSet, PretrainConfig, PretrainState, TrainError, TrainHistory, Validation,
};

/// Maximum relative error accepted by the gradient self-test.
pub const GRADCHECK_TOL: f64 = 1e-6;
pub const GRADCHECK_EPS: f64 = 1e-4;

/// Full-scale benchmark MPJPE (mm) of each ablation variant, printed under
/// the ablation matrix for context.
pub const REFERENCE_MPJPE: [(Variant, f64); 6] = [
    (Variant::Baseline, 64.8),
    (Variant::Map, 61.3),
    (Variant::Geo, 60.3),
    (Variant::Full, 59.7),
    (Variant::FullFix2d, 63.1),
    (Variant::FullNoPretrain, 63.4),
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("training failed: {0}")]
    Train(String),
}

impl ExperimentError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Train(_) => 1,
            Self::Io(_) => 2,
            Self::MissingArtifact(_) => 3,
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<DatasetError> for ExperimentError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => Self::Io(e.to_string()),
            DatasetError::InvalidDomain(p) => Self::Config(p.join("; ")),
            other => Self::Io(other.to_string()),
        }
    }
}

impl From<CheckpointError> for ExperimentError {
    fn from(e: CheckpointError) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(e) => Self::Io(e.to_string()),
            TrainError::Csv(e) => Self::Io(e.to_string()),
            TrainError::Checkpoint(e) => Self::Io(e.to_string()),
            other => Self::Train(other.to_string()),
        }
    }
}

impl From<crate::models::ModelError> for ExperimentError {
    fn from(e: crate::models::ModelError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<EngineError> for ExperimentError {
    fn from(e: EngineError) -> Self {
        Self::Io(format!("checkpoint contents: {e}"))
    }
}

impl From<crate::eval::EvalError> for ExperimentError {
    fn from(e: crate::eval::EvalError) -> Self {
        Self::Train(e.to_string())
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Sample counts per split; the data seed is shared by all training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub lab_train: usize,
    pub lab_test: usize,
    pub wild_train: usize,
    pub wild_test: usize,
    /// The transfer-domain training split is never trained on; it serves
    /// as the validation set.
    pub xfer_train: usize,
    pub xfer_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            lab_train: 4000,
            lab_test: 500,
            wild_train: 4000,
            wild_test: 500,
            xfer_train: 500,
            xfer_test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Domains {
    pub lab: DomainSpec,
    pub wild: DomainSpec,
    pub xfer: DomainSpec,
}

impl Default for Domains {
    fn default() -> Self {
        Self { lab: DomainSpec::lab(), wild: DomainSpec::wild(), xfer: DomainSpec::xfer() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub variant: String,
    /// Topology document; the built-in 16-joint body when absent.
    pub skeleton: Option<PathBuf>,
    pub data: DataConfig,
    pub domains: Domains,
    pub model: ModelConfig,
    pub encode: EncodeConfig,
    pub pretrain: PretrainConfig,
    pub adversarial: AdvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variant: "Full".into(),
            skeleton: None,
            data: DataConfig::default(),
            domains: Domains::default(),
            model: ModelConfig::default(),
            encode: EncodeConfig::default(),
            pretrain: PretrainConfig::default(),
            adversarial: AdvConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.variant.parse()?)
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        match &self.skeleton {
            None => Ok(SkeletonTopology::default_16()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", p.display())))?;
                SkeletonTopology::from_toml(&text).map_err(|e| ExperimentError::Config(e.to_string()))
            }
        }
    }

    /// Body model for data generation; anthropometric tables exist for the
    /// built-in topology only.
    pub fn body(&self) -> Result<AnthropometricModel> {
        let body = AnthropometricModel::default_16();
        if self.topology()? != body.topology {
            return Err(ExperimentError::Config("no anthropometric table for a custom skeleton topology".into()));
        }
        Ok(body)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return err("seeds must not be empty".into());
        }
        self.variant()?;
        let topo = self.topology()?;
        let problems = topo.validate();
        if !problems.is_empty() {
            return err(problems.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; "));
        }
        for d in [&self.domains.lab, &self.domains.wild, &self.domains.xfer] {
            let p = d.validate();
            if !p.is_empty() {
                return err(format!("domain {}: {}", d.name, p.join("; ")));
            }
            if d.image_size != self.model.image_size {
                return err(format!("domain {} image size differs from the model's", d.name));
            }
        }
        if !self.domains.lab.has_3d_labels || !self.domains.xfer.has_3d_labels || self.domains.wild.has_3d_labels {
            return err("lab and xfer must carry 3D labels and wild must not".into());
        }
        if self.model.joints != topo.joint_count() {
            return err(format!("model has {} joints, skeleton {}", self.model.joints, topo.joint_count()));
        }
        if self.encode.heatmap_size != self.model.heatmap_size || self.encode.image_size != self.model.image_size {
            return err("encode and model sizes disagree".into());
        }
        let d = &self.data;
        if [d.lab_train, d.lab_test, d.wild_train, d.wild_test, d.xfer_train, d.xfer_test].contains(&0) {
            return err("every split needs at least one sample".into());
        }
        let (p, a) = (&self.pretrain, &self.adversarial);
        if p.batch_size < 2 || a.batch_size < 2 {
            return err("batch sizes must be at least 2".into());
        }
        if !(a.lambda >= 0.0) || a.ratio < 1 {
            return err("lambda must be >= 0 and ratio >= 1".into());
        }
        if !(p.lr > 0.0 && a.lr_g > 0.0 && a.lr_d > 0.0) {
            return err("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Copy with the training seeds set to `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.adversarial.seed = seed;
        c
    }
}

/// Progress sink for long-running commands.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

pub const SPLITS: [&str; 2] = ["train", "test"];

pub fn dataset_path(out: &Path, domain: &str, split: &str) -> PathBuf {
    out.join("data").join(format!("{domain}-{split}.advds"))
}

pub fn pretrain_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("pretrain").join(format!("seed-{seed}"))
}

pub fn adv_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("adv").join(variant.name()).join(format!("seed-{seed}"))
}

pub fn eval_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("eval").join(variant.name()).join(format!("seed-{seed}"))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn split_seed(data_seed: u64, split: &str) -> u64 {
    splitmix(data_seed ^ split.bytes().fold(0u64, |h, b| h.rotate_left(8) ^ b as u64))
}

/// Writes the six dataset files; returns their paths and sizes.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path, progress: Progress) -> Result<Vec<(PathBuf, usize)>> {
    cfg.validate()?;
    let body = cfg.body()?;
    let d = &cfg.data;
    let jobs = [
        (&cfg.domains.lab, d.lab_train, d.lab_test),
        (&cfg.domains.wild, d.wild_train, d.wild_test),
        (&cfg.domains.xfer, d.xfer_train, d.xfer_test),
    ];
    let mut written = Vec::new();
    for (domain, n_train, n_test) in jobs {
        for (split, n) in SPLITS.into_iter().zip([n_train, n_test]) {
            let ds = generate_dataset(domain, &body, n, split_seed(d.seed, split))?;
            let path = dataset_path(out, &domain.name, split);
            ds.save(&path)?;
            progress(&format!("{}: {n} samples", path.display()));
            written.push((path, n));
        }
    }
    write_config(&out.join("data"), cfg)?;
    Ok(written)
}

pub fn load_set(out: &Path, domain: &str, split: &str) -> Result<PreparedSet> {
    let path = dataset_path(out, domain, split);
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact(path));
    }
    Ok(PreparedSet::new(&Dataset::load(&path)?))
}

/// Training sets: lab train, wild train, and the validation split.
pub struct TrainingData {
    pub lab: PreparedSet,
    pub wild: PreparedSet,
    pub val: PreparedSet,
}

impl TrainingData {
    pub fn load(cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        Ok(Self {
            lab: load_set(out, &cfg.domains.lab.name, "train")?,
            wild: load_set(out, &cfg.domains.wild.name, "train")?,
            val: load_set(out, &cfg.domains.xfer.name, "train")?,
        })
    }
}

fn load_history(path: &Path) -> Result<TrainHistory> {
    if path.exists() {
        Ok(TrainHistory::load(path)?)
    } else {
        Ok(TrainHistory::default())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub history: TrainHistory,
    /// Iterations performed by this invocation (0 when already complete).
    pub ran: usize,
}

impl RunOutcome {
    pub fn final_val(&self) -> Option<f64> {
        self.history.last_val()
    }
}

/// Pretrains the generator for `seed`, resuming a saved run if present.
pub fn pretrain(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    data: Option<&TrainingData>,
    progress: Progress,
) -> Result<RunOutcome> {
    let cfg = cfg.for_seed(seed);
    cfg.validate()?;
    let loaded;
    let data = match data {
        Some(d) => d,
        None => {
            loaded = TrainingData::load(&cfg, out)?;
            &loaded
        }
    };
    let topo = cfg.topology()?;
    let dir = pretrain_dir(out, seed);
    let ckpt_path = dir.join("generator.ckpt");
    let hist_path = dir.join("history.csv");
    let (mut g, _) = make_variant(Variant::Full, &cfg.model, seed)?;
    let mut state = PretrainState::new(&g, &cfg.pretrain);
    let mut history = TrainHistory::default();
    if ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        g.load_records(&ck)?;
        state.load_records(&ck)?;
        history = load_history(&hist_path)?;
        if history.rows.last().map_or(0, |r| r.iteration) != state.iteration {
            return Err(ExperimentError::Io(format!("{} does not match its checkpoint", hist_path.display())));
        }
    }
    let start = state.iteration;
    let total = cfg.pretrain.total();
    if start < total {
        progress(&format!("pretrain seed {seed}: iterations {}..{total}", start + 1));
        let val = Validation { set: &data.val, every: cfg.pretrain.val_every, samples: cfg.pretrain.val_samples };
        let more = pretrain_generator(
            &mut g,
            &data.lab,
            &data.wild,
            Some(val),
            &cfg.pretrain,
            &cfg.encode,
            &topo,
            &mut state,
            total,
        )?;
        history.extend(more);
        let mut ck = Checkpoint::new();
        g.push_records(&mut ck);
        state.push_records(&mut ck);
        ck.push(Record::scalar("meta.stage".into(), 0.0));
        ck.save(&ckpt_path)?;
        history.save(&hist_path)?;
        write_config(&dir, &cfg)?;
    }
    if let Some(v) = history.last_val() {
        progress(&format!("pretrain seed {seed}: final validation MPJPE {v:.2} mm"));
    }
    Ok(RunOutcome { checkpoint: ckpt_path, history, ran: total.saturating_sub(start) })
}

/// Loads the generator of a finished pretraining run.
pub fn load_pretrained(cfg: &ExperimentConfig, out: &Path, seed: u64, mode: GeneratorMode) -> Result<GeneratorModel> {
    let path = pretrain_dir(out, seed).join("generator.ckpt");
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact(path));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.scalar("meta.iteration").map_or(0, |v| v as usize) < cfg.pretrain.total() {
        return Err(ExperimentError::MissingArtifact(path));
    }
    let mut g = GeneratorModel::new(cfg.model.clone(), mode, 0)?;
    g.load_records(&ck)?;
    Ok(g)
}

/// Adversarial training of `variant` for `seed`.
pub fn train_adv(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    variant: Variant,
    data: Option<&TrainingData>,
    progress: Progress,
) -> Result<RunOutcome> {
    let cfg = ExperimentConfig { variant: variant.name().into(), ..cfg.for_seed(seed) };
    cfg.validate()?;
    if variant == Variant::Baseline {
        return Err(ExperimentError::Config("Baseline has no adversarial phase".into()));
    }
    let (mut g, d) = make_variant(variant, &cfg.model, seed)?;
    let mut d = d.expect("non-baseline variants have a discriminator");
    if variant.uses_pretraining() {
        g = load_pretrained(&cfg, out, seed, g.mode)?;
    }
    let loaded;
    let data = match data {
        Some(d) => d,
        None => {
            loaded = TrainingData::load(&cfg, out)?;
            &loaded
        }
    };
    let topo = cfg.topology()?;
    let dir = adv_dir(out, variant, seed);
    let ckpt_path = dir.join("model.ckpt");
    let hist_path = dir.join("history.csv");
    let mut state = AdvState::new(&g, &d, &cfg.adversarial);
    let mut history = TrainHistory::default();
    if ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        g.load_records(&ck)?;
        d.load_records(&ck)?;
        state.load_records(&ck)?;
        history = load_history(&hist_path)?;
        if history.rows.last().map_or(0, |r| r.iteration) != state.iteration {
            return Err(ExperimentError::Io(format!("{} does not match its checkpoint", hist_path.display())));
        }
    }
    let start = state.iteration;
    let total = cfg.adversarial.iterations;
    if start < total {
        progress(&format!("train-adv {variant} seed {seed}: iterations {}..{total}", start + 1));
        let val = Validation { set: &data.val, every: cfg.adversarial.val_every, samples: cfg.adversarial.val_samples };
        let more = adversarial_train(
            &mut g,
            &mut d,
            &data.lab,
            &data.wild,
            Some(val),
            &cfg.adversarial,
            &cfg.encode,
            &topo,
            &mut state,
            total,
        )?;
        history.extend(more);
        let mut ck = Checkpoint::new();
        g.push_records(&mut ck);
        d.push_records(&mut ck);
        state.push_records(&mut ck);
        ck.push(Record::scalar("meta.stage".into(), 1.0));
        ck.push(Record::scalar("meta.variant".into(), variant.code()));
        ck.save(&ckpt_path)?;
        history.save(&hist_path)?;
        write_config(&dir, &cfg)?;
    }
    if let Some(v) = history.last_val() {
        progress(&format!("train-adv {variant} seed {seed}: final validation MPJPE {v:.2} mm"));
    }
    Ok(RunOutcome { checkpoint: ckpt_path, history, ran: total.saturating_sub(start) })
}

/// The generator a variant ends up with: the pretrained one for Baseline,
/// the adversarially trained one otherwise.
pub fn final_generator(cfg: &ExperimentConfig, out: &Path, seed: u64, variant: Variant) -> Result<GeneratorModel> {
    if variant == Variant::Baseline {
        return load_pretrained(cfg, out, seed, GeneratorMode::EndToEnd);
    }
    let path = adv_dir(out, variant, seed).join("model.ckpt");
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact(path));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.scalar("meta.iteration").map_or(0, |v| v as usize) < cfg.adversarial.iterations {
        return Err(ExperimentError::MissingArtifact(path));
    }
    let mut g = GeneratorModel::new(cfg.model.clone(), variant.generator_mode(), 0)?;
    g.load_records(&ck)?;
    Ok(g)
}

/// Evaluates a variant's generator on the transfer and lab test splits and
/// writes one report pair per domain.
pub fn eval(cfg: &ExperimentConfig, out: &Path, seed: u64, variant: Variant) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let g = final_generator(cfg, out, seed, variant)?;
    let topo = cfg.topology()?;
    let dir = eval_dir(out, variant, seed);
    let mut reports = Vec::new();
    for domain in [&cfg.domains.xfer.name, &cfg.domains.lab.name] {
        let set = load_set(out, domain, "test")?;
        let r = evaluate_generator(&g, &set, &cfg.encode, &topo, variant.name(), seed)?;
        r.save(&dir, &format!("{domain}-test"))?;
        reports.push(r);
    }
    write_config(&dir, &ExperimentConfig { variant: variant.name().into(), ..cfg.for_seed(seed) })?;
    Ok(reports)
}

/// One (variant, seed) cell of the ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub xfer: Option<MetricsReport>,
    pub lab: Option<MetricsReport>,
    pub final_l_d: Option<f64>,
    pub final_l_g: Option<f64>,
    pub history: TrainHistory,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationMatrix {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

impl AblationMatrix {
    pub fn completed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_none()).count()
    }

    /// Median of `metric` over the completed seeds of `variant`.
    pub fn median_of(&self, variant: Variant, metric: impl Fn(&AblationRow) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).filter_map(&metric).collect();
        median(&mut v)
    }

    pub fn median_xfer_mpjpe(&self, variant: Variant) -> Option<f64> {
        self.median_of(variant, |r| r.xfer.as_ref().map(|m| m.mpjpe_p1))
    }

    pub const HEADER: [&'static str; 12] = [
        "variant",
        "seed",
        "status",
        "xfer_mpjpe_p1",
        "xfer_mpjpe_p2",
        "xfer_pck3d",
        "xfer_auc3d",
        "xfer_pckh05",
        "lab_mpjpe_p1",
        "lab_mpjpe_p2",
        "l_d",
        "l_g",
    ];

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Io(e.to_string()))?;
        let mut put = |rec: Vec<String>| w.write_record(rec).map_err(|e| ExperimentError::Io(e.to_string()));
        put(Self::HEADER.map(String::from).to_vec())?;
        for r in &self.rows {
            let x = r.xfer.as_ref();
            let l = r.lab.as_ref();
            put(vec![
                r.variant.name().into(),
                r.seed.to_string(),
                r.error.clone().map_or("ok".into(), |e| format!("failed: {e}")),
                opt(x.map(|m| m.mpjpe_p1)),
                opt(x.map(|m| m.mpjpe_p2)),
                opt(x.map(|m| m.pck3d)),
                opt(x.map(|m| m.auc3d)),
                opt(x.map(|m| m.pckh05)),
                opt(l.map(|m| m.mpjpe_p1)),
                opt(l.map(|m| m.mpjpe_p2)),
                opt(r.final_l_d),
                opt(r.final_l_g),
            ])?;
        }
        for v in Variant::ALL {
            if !self.rows.iter().any(|r| r.variant == v) {
                continue;
            }
            let m = |f: fn(&MetricsReport) -> f64, lab: bool| {
                opt(self.median_of(v, |r| if lab { r.lab.as_ref() } else { r.xfer.as_ref() }.map(f)))
            };
            put(vec![
                v.name().into(),
                "median".into(),
                format!(
                    "{} of {} seeds",
                    self.rows.iter().filter(|r| r.variant == v && r.error.is_none()).count(),
                    self.rows.iter().filter(|r| r.variant == v).count()
                ),
                m(|r| r.mpjpe_p1, false),
                m(|r| r.mpjpe_p2, false),
                m(|r| r.pck3d, false),
                m(|r| r.auc3d, false),
                m(|r| r.pckh05, false),
                m(|r| r.mpjpe_p1, true),
                m(|r| r.mpjpe_p2, true),
                opt(self.median_of(v, |r| r.final_l_d)),
                opt(self.median_of(v, |r| r.final_l_g)),
            ])?;
        }
        w.flush()?;
        drop(w);
        let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
        let refs: Vec<String> = REFERENCE_MPJPE.iter().map(|(v, mm)| format!("{v} {mm}")).collect();
        writeln!(f, "# full-scale benchmark reference, MPJPE mm: {}", refs.join(", "))?;
        Ok(())
    }
}

/// Worker pool sized by `ADVPOSE_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads =
        match std::env::var("ADVPOSE_THREADS") {
            Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                ExperimentError::Config(format!("ADVPOSE_THREADS must be a positive integer, got {v:?}"))
            })?,
            Err(_) => 0,
        };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| ExperimentError::Config(e.to_string()))
}

fn ablation_cell(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    variant: Variant,
    data: &TrainingData,
    progress: Progress,
) -> AblationRow {
    let run = || -> Result<(Vec<MetricsReport>, TrainHistory)> {
        let history = if variant == Variant::Baseline {
            pretrain(cfg, out, seed, Some(data), progress)?.history
        } else {
            train_adv(cfg, out, seed, variant, Some(data), progress)?.history
        };
        Ok((eval(cfg, out, seed, variant)?, history))
    };
    match run() {
        Ok((reports, history)) => {
            let last = history.rows.last();
            AblationRow {
                variant,
                seed,
                xfer: reports.first().cloned(),
                lab: reports.get(1).cloned(),
                final_l_d: last.and_then(|r| r.l_d),
                final_l_g: last.and_then(|r| r.l_g),
                history,
                error: None,
            }
        }
        Err(e) => AblationRow {
            variant,
            seed,
            xfer: None,
            lab: None,
            final_l_d: None,
            final_l_g: None,
            history: TrainHistory::default(),
            error: Some(e.to_string()),
        },
    }
}

/// Runs every variant over every seed and writes `ablation/matrix.csv`.
/// Pretraining runs first (one per seed); the variants then run in
/// parallel on the worker pool. Fails only if no cell completes.
pub fn ablate(cfg: &ExperimentConfig, out: &Path, variants: &[Variant], progress: Progress) -> Result<AblationMatrix> {
    cfg.validate()?;
    let data = TrainingData::load(cfg, out)?;
    for split in ["test"] {
        for d in [&cfg.domains.xfer.name, &cfg.domains.lab.name] {
            if !dataset_path(out, d, split).exists() {
                return Err(ExperimentError::MissingArtifact(dataset_path(out, d, split)));
            }
        }
    }
    let pool = thread_pool()?;
    let needs_pretrain = variants.iter().any(|v| v.uses_pretraining());
    let pretrain_errors: BTreeMap<u64, String> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .filter(|_| needs_pretrain)
            .filter_map(|&s| pretrain(cfg, out, s, Some(&data), progress).err().map(|e| (s, e.to_string())))
            .collect()
    });
    let cells: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let rows: Vec<AblationRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, s)| match pretrain_errors.get(&s).filter(|_| v.uses_pretraining()) {
                Some(e) => AblationRow {
                    variant: v,
                    seed: s,
                    xfer: None,
                    lab: None,
                    final_l_d: None,
                    final_l_g: None,
                    history: TrainHistory::default(),
                    error: Some(format!("pretraining failed: {e}")),
                },
                None => ablation_cell(cfg, out, s, v, &data, progress),
            })
            .collect()
    });
    let matrix = AblationMatrix { rows };
    matrix.write(&out.join("ablation").join("matrix.csv"))?;
    write_config(&out.join("ablation"), cfg)?;
    if matrix.completed() == 0 {
        return Err(ExperimentError::Train("no ablation cell completed".into()));
    }
    Ok(matrix)
}

/// Collects training curves and evaluation reports found under `out`.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let dir = out.join("report");
    std::fs::create_dir_all(&dir)?;
    let curves_path = dir.join("curves.csv");
    let metrics_path = dir.join("metrics.csv");
    let mut curves = csv::Writer::from_path(&curves_path).map_err(|e| ExperimentError::Io(e.to_string()))?;
    let io = |e: csv::Error| ExperimentError::Io(e.to_string());
    curves.write_record(["run", "seed", "iteration", "l_pose", "l_d", "l_g", "val_mpjpe"]).map_err(io)?;
    let mut found = 0;
    let mut runs: Vec<(String, u64, PathBuf)> =
        cfg.seeds.iter().map(|&s| ("pretrain".to_string(), s, pretrain_dir(out, s).join("history.csv"))).collect();
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Baseline) {
        runs.extend(cfg.seeds.iter().map(|&s| (v.name().to_string(), s, adv_dir(out, v, s).join("history.csv"))));
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (run, seed, path) in runs {
        if !path.exists() {
            continue;
        }
        found += 1;
        for r in TrainHistory::load(&path)?.rows {
            curves
                .write_record([
                    run.clone(),
                    seed.to_string(),
                    r.iteration.to_string(),
                    r.l_pose.to_string(),
                    opt(r.l_d),
                    opt(r.l_g),
                    opt(r.val_mpjpe),
                ])
                .map_err(io)?;
        }
    }
    curves.flush()?;
    let mut reports = Vec::new();
    for v in Variant::ALL {
        for &s in &cfg.seeds {
            for domain in [&cfg.domains.xfer.name, &cfg.domains.lab.name] {
                let p = eval_dir(out, v, s).join(format!("{domain}-test.toml"));
                if p.exists() {
                    let text = std::fs::read_to_string(&p)?;
                    reports.push(MetricsReport::from_toml(&text).map_err(|e| ExperimentError::Io(e.to_string()))?);
                }
            }
        }
    }
    found += reports.len();
    if found == 0 {
        return Err(ExperimentError::MissingArtifact(out.to_path_buf()));
    }
    crate::eval::write_csv(&metrics_path, &reports).map_err(|e| ExperimentError::Io(e.to_string()))?;
    Ok((curves_path, metrics_path))
}

/// One line of the gradient self-test.
#[derive(Debug, Clone)]
pub struct GradcheckLine {
    pub architecture: String,
    pub report: GradCheckReport,
}

impl GradcheckLine {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOL)
    }
}

/// A generator restricted to one parameter group.
struct GroupView {
    g: GeneratorModel,
    group: ParamGroup,
}

impl Parameterized for GroupView {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if matches!(self.group, ParamGroup::TwoD | ParamGroup::All) {
            out.extend(self.g.trunk.params());
            out.extend(self.g.heat_head.params());
        }
        if matches!(self.group, ParamGroup::Depth | ParamGroup::All) {
            out.extend(self.g.depth_net.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.g.params_in(self.group)
    }
}

/// Generator plus a fixed discriminator, differentiated through the pose
/// encoding.
struct Adversaries {
    view: GroupView,
    d: DiscriminatorModel,
}

impl Parameterized for Adversaries {
    fn params(&self) -> Vec<&Tensor> {
        self.view.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.view.params_mut()
    }
}

/// Moves every parameter off its initial value so that no ReLU sits exactly
/// at its kink (zero biases behind inactive units do otherwise).
fn jitter<M: Parameterized>(m: &mut M, rng: &mut ChaCha8Rng) {
    for t in m.params_mut() {
        t.value.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
}

fn engine(e: impl std::fmt::Display) -> EngineError {
    EngineError::InvalidSpec(e.to_string())
}

fn rand_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Small labeled batch matching a reduced model, for the composite check.
fn toy_samples(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<SyntheticSample> {
    let (h, w) = cfg.image_size;
    let cam = CameraModel::new(
        (8.0, 8.0),
        ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
        nalgebra::Matrix3::identity(),
        nalgebra::Vector3::zeros(),
    )
    .expect("identity rotation");
    (0..n)
        .map(|id| {
            let pose: Vec<[f64; 3]> = (0..cfg.joints)
                .map(|_| {
                    [
                        rng.random_range(-600.0..600.0),
                        rng.random_range(-600.0..600.0),
                        4000.0 + rng.random_range(-300.0..300.0),
                    ]
                })
                .collect();
            let pose3d = Pose3D::new(pose, Frame::Camera);
            let pose2d = Pose2D::new(pose3d.coords.iter().map(|c| cam.pixel(c)).collect());
            SyntheticSample {
                id,
                domain: "toy".into(),
                image: (0..h * w).map(|_| rng.random_range(0.0..1.0) as f32).collect(),
                pose2d,
                pose3d: Some(pose3d),
                camera: cam.clone(),
            }
        })
        .collect()
}

/// Gradient-checks every network architecture the experiments build, at
/// reduced widths: generator in each mode, discriminator for each source
/// set, and the generator objective through the encoding into the
/// discriminator.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckLine>, EngineError> {
    let cfg = ModelConfig::reduced(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 3;
    let images = rand_array(&mut rng, b, cfg.image_len(), 0.0, 1.0);
    let oracle = rand_array(&mut rng, b, cfg.heatmap_len(), 0.0, 1.0);
    let wh = rand_array(&mut rng, b, cfg.heatmap_len(), -1.0, 1.0);
    let wd = rand_array(&mut rng, b, cfg.joints, -1.0, 1.0);
    let mut lines = Vec::new();

    for (name, mode) in [
        ("generator end-to-end", GeneratorMode::EndToEnd),
        ("generator fix-2d", GeneratorMode::Fix2d),
        ("generator oracle-2d", GeneratorMode::Oracle2d),
    ] {
        let g = GeneratorModel::new(cfg.clone(), mode, rng.random()).map_err(engine)?;
        let mut view = GroupView { g, group: mode.trainable() };
        jitter(&mut view.g, &mut rng);
        let report = grad_check(
            &mut view,
            |v, with_grad| {
                let out = v.g.forward(&images, Some(&oracle)).map_err(engine)?;
                let d = out.depths.mapv(|x| x / 500.0);
                let loss = (&out.heatmaps * &wh).sum() + (&d * &wd).sum() + 0.5 * d.mapv(|x| x * x).sum();
                if with_grad {
                    let dd = (&wd + &d) / 500.0;
                    v.g.backward(Some(&wh), Some(&dd), v.group).map_err(engine)?;
                }
                Ok(loss)
            },
            GRADCHECK_EPS,
        )?;
        lines.push(GradcheckLine { architecture: name.into(), report });
    }

    let maps = rand_array(&mut rng, b, 2 * cfg.heatmap_len(), 0.0, 1.0);
    let geo = rand_array(&mut rng, b, cfg.descriptor_len(), -1.0, 1.0);
    let labels: Vec<f64> = (0..b).map(|i| (i % 2) as f64).collect();
    for v in [Variant::Map, Variant::Geo, Variant::Full] {
        let sources: SourceSet = v.sources().expect("adversarial variant");
        let mut d = DiscriminatorModel::new(&cfg, sources, rng.random()).map_err(engine)?;
        jitter(&mut d, &mut rng);
        let report = grad_check(
            &mut d,
            |d, with_grad| {
                let s = d.forward(&images, &maps, &geo).map_err(engine)?;
                let loss: f64 = s.iter().zip(&labels).map(|(&p, &y)| crate::diffnet::bce(p, y)).sum();
                if with_grad {
                    let g = Array2::from_shape_fn((b, 1), |(i, _)| crate::diffnet::bce_grad(s[(i, 0)], labels[i]));
                    d.backward(&g).map_err(engine)?;
                }
                Ok(loss)
            },
            GRADCHECK_EPS,
        )?;
        lines.push(GradcheckLine { architecture: format!("discriminator {}", v.name().to_lowercase()), report });
    }

    let enc = EncodeConfig {
        heatmap_size: cfg.heatmap_size,
        image_size: cfg.image_size,
        nominal_root_depth: 4000.0,
        feature_scale: 500.0,
        window_radius: Some(4),
    };
    let samples = toy_samples(&cfg, b, &mut rng);
    let set = PreparedSet {
        domain: "toy".into(),
        labeled: true,
        images: Array2::from_shape_fn((b, cfg.image_len()), |(i, k)| samples[i].image[k] as f64),
        samples,
    };
    let idx: Vec<usize> = (0..b).collect();
    let batch = Batch::gather(&[(&set, idx)], &enc, 0);
    let g = GeneratorModel::new(cfg.clone(), GeneratorMode::EndToEnd, rng.random()).map_err(engine)?;
    let d = DiscriminatorModel::new(&cfg, SourceSet::ALL, rng.random()).map_err(engine)?;
    let mut adv = Adversaries { view: GroupView { g, group: ParamGroup::All }, d };
    jitter(&mut adv.view.g, &mut rng);
    jitter(&mut adv.d, &mut rng);
    let report = grad_check(
        &mut adv,
        |a, _| {
            generator_objective(&mut a.view.g, &mut a.d, &batch, 1.0, &enc, ParamGroup::All)
                .map(|r| r.1)
                .map_err(engine)
        },
        GRADCHECK_EPS,
    )?;
    lines.push(GradcheckLine { architecture: "generator objective through encoding and discriminator".into(), report });
    Ok(lines)
}
