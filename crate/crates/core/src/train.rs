//! Pose loss, adversarial losses, generator pretraining and the alternating
//! adversarial loop.
//!
//! Every iteration draws its minibatch from an RNG seeded by
//! `(seed, stage, iteration)`, so a run resumed from a checkpoint follows
//! the same trajectory as an uninterrupted one.

use std::io;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{
    adam_step, bce, bce_grad, AdamConfig, AdamState, Checkpoint, CheckpointError, EngineError, Parameterized, Record,
};
use crate::encode::{
    compose_3d, decode_heatmaps, encode_ground_truth, encode_prediction, encode_prediction_backward, input_features,
    input_features_backward, render_heatmaps, EncodeConfig, EncodeError, HeatmapStack,
};
use crate::eval::{mpjpe, EvalError, MetricsReport};
use crate::models::{DiscriminatorModel, GeneratorMode, GeneratorModel, GeneratorOutput, ModelError, ParamGroup};
use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology};
use crate::synth::{splitmix, Dataset, SyntheticSample};

/// Depth errors enter the pose loss in units of this many millimeters.
pub const DEPTH_UNIT_MM: f64 = 100.0;

const TAG_PRETRAIN: u64 = 0x7072_6574;
const TAG_ADV: u64 = 0x6164_7600;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: String },
    #[error("dataset {0} is empty")]
    EmptySet(String),
    #[error("dataset {0} has no 3D labels")]
    Unlabeled(String),
    #[error("history: {0}")]
    History(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A dataset held in training-ready form.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub domain: String,
    pub labeled: bool,
    pub samples: Vec<SyntheticSample>,
    /// `N × (H·W)` images.
    pub images: Array2<f64>,
}

impl PreparedSet {
    pub fn new(ds: &Dataset) -> Self {
        let (h, w) = ds.header.image_size;
        let mut images = Array2::zeros((ds.samples.len(), h * w));
        for (mut row, s) in images.rows_mut().into_iter().zip(&ds.samples) {
            row.iter_mut().zip(&s.image).for_each(|(d, &v)| *d = v as f64);
        }
        Self { domain: ds.header.domain.clone(), labeled: ds.header.has_3d_labels, samples: ds.samples.clone(), images }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images_at(&self, idx: &[usize]) -> Array2<f64> {
        self.images.select(Axis(0), idx)
    }

    /// Rendered ground-truth heatmaps, one flattened stack per row.
    pub fn heatmaps_at(&self, idx: &[usize], enc: &EncodeConfig) -> Array2<f64> {
        let (h, w) = enc.heatmap_size;
        let p = self.samples.first().map_or(0, |s| s.pose2d.joint_count());
        let mut out = Array2::zeros((idx.len(), p * h * w));
        for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
            let hm = Pose2D::new(self.samples[i].pose2d.coords.iter().map(|&c| enc.image_to_heatmap(c)).collect());
            let stack = render_heatmaps(&hm, h, w);
            row.iter_mut().zip(&stack.values).for_each(|(d, &v)| *d = v);
        }
        out
    }

    /// Root-relative ground-truth depths; zero rows for unlabeled samples.
    pub fn depths_at(&self, idx: &[usize], root: usize) -> Array2<f64> {
        let p = self.samples.first().map_or(0, |s| s.pose2d.joint_count());
        let mut out = Array2::zeros((idx.len(), p));
        for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
            if let Some(pose) = &self.samples[i].pose3d {
                row.iter_mut().zip(pose.root_relative_depths(root)).for_each(|(d, v)| *d = v);
            }
        }
        out
    }
}

/// A training minibatch gathered from one or more sets.
pub struct Batch<'a> {
    pub images: Array2<f64>,
    pub heatmaps: Array2<f64>,
    pub depths: Array2<f64>,
    pub labeled: Vec<bool>,
    pub samples: Vec<&'a SyntheticSample>,
}

impl<'a> Batch<'a> {
    pub fn gather(parts: &[(&'a PreparedSet, Vec<usize>)], enc: &EncodeConfig, root: usize) -> Self {
        let cat = |arrays: Vec<Array2<f64>>| {
            let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).expect("column counts agree")
        };
        Self {
            images: cat(parts.iter().map(|(s, i)| s.images_at(i)).collect()),
            heatmaps: cat(parts.iter().map(|(s, i)| s.heatmaps_at(i, enc)).collect()),
            depths: cat(parts.iter().map(|(s, i)| s.depths_at(i, root)).collect()),
            labeled: parts.iter().flat_map(|(s, i)| std::iter::repeat_n(s.labeled, i.len())).collect(),
            samples: parts.iter().flat_map(|(s, i)| i.iter().map(|&k| &s.samples[k])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Value and gradients of the pose loss.
#[derive(Debug, Clone)]
pub struct PoseLoss {
    pub value: f64,
    pub heatmap_term: f64,
    pub depth_term: f64,
    pub d_heatmaps: Array2<f64>,
    pub d_depths: Array2<f64>,
}

/// Squared heatmap error summed over every sample plus squared depth error
/// (in [`DEPTH_UNIT_MM`] units) summed over labeled samples only.
pub fn loss_pose(
    out: &GeneratorOutput,
    target_heatmaps: &Array2<f64>,
    target_depths: &Array2<f64>,
    labeled: &[bool],
) -> PoseLoss {
    let diff_h = &out.heatmaps - target_heatmaps;
    let heatmap_term = diff_h.iter().map(|v| v * v).sum();
    let mut d_depths = Array2::zeros(out.depths.raw_dim());
    let mut depth_term = 0.0;
    for (n, &lab) in labeled.iter().enumerate() {
        if !lab {
            continue;
        }
        for j in 0..out.depths.ncols() {
            let e = (out.depths[(n, j)] - target_depths[(n, j)]) / DEPTH_UNIT_MM;
            depth_term += e * e;
            d_depths[(n, j)] = 2.0 * e / DEPTH_UNIT_MM;
        }
    }
    PoseLoss { value: heatmap_term + depth_term, heatmap_term, depth_term, d_heatmaps: diff_h * 2.0, d_depths }
}

/// Mean BCE of reals against 1 plus mean BCE of fakes against 0.
pub fn loss_d(real: &[f64], fake: &[f64]) -> f64 {
    let mean = |s: &[f64], y: f64| s.iter().map(|&v| bce(v, y)).sum::<f64>() / s.len() as f64;
    mean(real, 1.0) + mean(fake, 0.0)
}

/// `∂loss_d/∂score` for reals and fakes.
pub fn loss_d_grads(real: &[f64], fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        real.iter().map(|&v| bce_grad(v, 1.0) / real.len() as f64).collect(),
        fake.iter().map(|&v| bce_grad(v, 0.0) / fake.len() as f64).collect(),
    )
}

/// Generator classification term: `Σ bce(D(fake), 1)`.
pub fn cls_term(fake: &[f64]) -> f64 {
    fake.iter().map(|&v| bce(v, 1.0)).sum()
}

/// `λ·cls_term + l_pose`.
pub fn loss_g(fake: &[f64], lambda: f64, l_pose: f64) -> f64 {
    lambda * cls_term(fake) + l_pose
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// 2D-module-only iterations.
    pub phase1_iterations: usize,
    /// Joint fine-tuning iterations.
    pub phase2_iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_every: usize,
    pub val_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            phase1_iterations: 2000,
            phase2_iterations: 3000,
            batch_size: 12,
            lr: 1e-3,
            seed: 0,
            val_every: 250,
            val_samples: 200,
        }
    }
}

impl PretrainConfig {
    pub fn total(&self) -> usize {
        self.phase1_iterations + self.phase2_iterations
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub ratio: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub val_every: usize,
    pub val_samples: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            iterations: 5000,
            batch_size: 12,
            ratio: 1,
            lr_g: 2.5e-4,
            lr_d: 1e-4,
            seed: 0,
            val_every: 250,
            val_samples: 200,
        }
    }
}

/// One logged iteration; the adversarial columns are empty during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub l_pose: f64,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub d_acc_real: Option<f64>,
    pub d_acc_fake: Option<f64>,
    pub val_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn extend(&mut self, other: TrainHistory) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["iteration", "l_pose", "l_d", "l_g", "d_acc_real", "d_acc_fake", "val_mpjpe"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<Result<Vec<HistoryRow>, _>>()?;
        if rows.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
            return Err(TrainError::History("iteration index not increasing".into()));
        }
        Ok(Self { rows })
    }

    /// First iteration whose validation MPJPE is at or below `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.val_mpjpe.is_some_and(|v| v <= target)).map(|r| r.iteration)
    }

    pub fn last_val(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_mpjpe)
    }
}

fn iteration_rng(seed: u64, tag: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ tag) ^ iteration as u64))
}

fn draw(rng: &mut ChaCha8Rng, set: &PreparedSet, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..set.len())).collect()
}

fn require(set: &PreparedSet) -> Result<(), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet(set.domain.clone()));
    }
    Ok(())
}

fn finite(v: f64, iteration: usize, what: &str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { iteration, what: what.to_string() })
    }
}

/// Where to measure validation MPJPE during training.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub set: &'a PreparedSet,
    pub every: usize,
    pub samples: usize,
}

impl Validation<'_> {
    fn due(&self, done: usize, last: usize) -> bool {
        self.every > 0 && (done.is_multiple_of(self.every) || done == last)
    }

    fn measure(&self, g: &GeneratorModel, enc: &EncodeConfig, root: usize) -> Result<f64, TrainError> {
        let idx: Vec<usize> = (0..self.samples.min(self.set.len())).collect();
        let preds = predict_set(g, self.set, &idx, enc, root)?;
        let gts: Vec<Pose3D> =
            idx.iter().map(|&i| self.set.samples[i].pose3d.clone().expect("validation set is labeled")).collect();
        Ok(mpjpe(&preds.poses3d, &gts, root)?)
    }
}

/// Optimizer state and position of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub iteration: usize,
    pub adam_2d: AdamState,
    pub adam_all: AdamState,
}

impl PretrainState {
    pub fn new(g: &GeneratorModel, cfg: &PretrainConfig) -> Self {
        let c = AdamConfig::with_lr(cfg.lr);
        Self {
            iteration: 0,
            adam_2d: AdamState::new(c, &g.shapes_in(ParamGroup::TwoD)),
            adam_all: AdamState::new(c, &g.shapes_in(ParamGroup::All)),
        }
    }

    pub fn push_records(&self, ckpt: &mut Checkpoint) {
        self.adam_2d.push_records("opt.g2d", ckpt);
        self.adam_all.push_records("opt.gall", ckpt);
        ckpt.push(Record::scalar("meta.iteration".into(), self.iteration as f64));
    }

    pub fn load_records(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.adam_2d.load_records("opt.g2d", ckpt)?;
        self.adam_all.load_records("opt.gall", ckpt)?;
        self.iteration =
            ckpt.scalar("meta.iteration").ok_or_else(|| EngineError::MissingRecord("meta.iteration".into()))? as usize;
        Ok(())
    }
}

/// Two-phase pretraining: the 2D module on the heatmap term over both
/// domains, then everything on the full pose loss. Runs from
/// `state.iteration` up to `stop_at` (capped at the configured total).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_generator(
    g: &mut GeneratorModel,
    lab: &PreparedSet,
    wild: &PreparedSet,
    val: Option<Validation>,
    cfg: &PretrainConfig,
    enc: &EncodeConfig,
    topology: &SkeletonTopology,
    state: &mut PretrainState,
    stop_at: usize,
) -> Result<TrainHistory, TrainError> {
    require(lab)?;
    require(wild)?;
    let root = topology.root;
    let total = cfg.total();
    let mut history = TrainHistory::default();
    while state.iteration < stop_at.min(total) {
        let it = state.iteration;
        let mut rng = iteration_rng(cfg.seed, TAG_PRETRAIN, it);
        let n_wild = cfg.batch_size / 2;
        let parts = [(lab, draw(&mut rng, lab, cfg.batch_size - n_wild)), (wild, draw(&mut rng, wild, n_wild))];
        let batch = Batch::gather(&parts, enc, root);
        g.zero_grad();
        let l_pose = if it < cfg.phase1_iterations {
            let hm = g.forward_2d(&batch.images)?;
            let diff = &hm - &batch.heatmaps;
            g.backward(Some(&(&diff * 2.0)), None, ParamGroup::TwoD)?;
            adam_step(&mut g.params_in(ParamGroup::TwoD), &mut state.adam_2d)?;
            diff.iter().map(|v| v * v).sum()
        } else {
            let out = g.forward(&batch.images, Some(&batch.heatmaps))?;
            let pl = loss_pose(&out, &batch.heatmaps, &batch.depths, &batch.labeled);
            g.backward(Some(&pl.d_heatmaps), Some(&pl.d_depths), ParamGroup::All)?;
            adam_step(&mut g.params_in(ParamGroup::All), &mut state.adam_all)?;
            pl.value
        };
        finite(l_pose, it + 1, "pose loss")?;
        state.iteration += 1;
        let val_mpjpe = match val {
            Some(v) if v.due(state.iteration, total) => {
                Some(finite(v.measure(g, enc, root)?, state.iteration, "validation MPJPE")?)
            }
            _ => None,
        };
        history.rows.push(HistoryRow {
            iteration: state.iteration,
            l_pose,
            l_d: None,
            l_g: None,
            d_acc_real: None,
            d_acc_fake: None,
            val_mpjpe,
        });
    }
    Ok(history)
}

/// Optimizer state and bookkeeping of an adversarial run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvState {
    pub iteration: usize,
    pub d_updates: usize,
    pub g_updates: usize,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

impl AdvState {
    pub fn new(g: &GeneratorModel, d: &DiscriminatorModel, cfg: &AdvConfig) -> Self {
        Self {
            iteration: 0,
            d_updates: 0,
            g_updates: 0,
            adam_g: AdamState::new(AdamConfig::with_lr(cfg.lr_g), &g.shapes_in(g.mode.trainable())),
            adam_d: AdamState::for_params(AdamConfig::with_lr(cfg.lr_d), d),
        }
    }

    pub fn push_records(&self, ckpt: &mut Checkpoint) {
        self.adam_g.push_records("opt.g", ckpt);
        self.adam_d.push_records("opt.d", ckpt);
        for (name, v) in
            [("meta.iteration", self.iteration), ("meta.d_updates", self.d_updates), ("meta.g_updates", self.g_updates)]
        {
            ckpt.push(Record::scalar(name.into(), v as f64));
        }
    }

    pub fn load_records(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.adam_g.load_records("opt.g", ckpt)?;
        self.adam_d.load_records("opt.d", ckpt)?;
        let get = |n: &str| ckpt.scalar(n).map(|v| v as usize).ok_or_else(|| EngineError::MissingRecord(n.into()));
        self.iteration = get("meta.iteration")?;
        self.d_updates = get("meta.d_updates")?;
        self.g_updates = get("meta.g_updates")?;
        Ok(())
    }
}

/// Discriminator features for a batch: `(maps, geo)` rows.
pub struct Features {
    pub maps: Array2<f64>,
    pub geo: Array2<f64>,
}

fn stack_rows(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let n = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((n, w), rows.into_iter().flatten().collect()).expect("equal row widths")
}

fn heatmap_row(out: &GeneratorOutput, n: usize, enc: &EncodeConfig) -> HeatmapStack {
    let (h, w) = enc.heatmap_size;
    HeatmapStack { joints: out.depths.ncols(), height: h, width: w, values: out.heatmaps.row(n).to_vec() }
}

/// Encodes labeled ground truth as discriminator features.
pub fn real_features(samples: &[&SyntheticSample], enc: &EncodeConfig, root: usize) -> Result<Features, TrainError> {
    let (mut maps, mut geo) = (Vec::new(), Vec::new());
    for s in samples {
        let (m, g) = input_features(&encode_ground_truth(s, root, enc)?, enc);
        maps.push(m);
        geo.push(g);
    }
    Ok(Features { maps: stack_rows(maps), geo: stack_rows(geo) })
}

/// Encodes generator outputs as discriminator features, keeping the traces
/// needed to backpropagate into the generator.
pub fn fake_features(
    out: &GeneratorOutput,
    samples: &[&SyntheticSample],
    enc: &EncodeConfig,
) -> Result<(Features, Vec<(HeatmapStack, crate::encode::PredictionTrace)>), TrainError> {
    let (mut maps, mut geo, mut traces) = (Vec::new(), Vec::new(), Vec::new());
    for (n, s) in samples.iter().enumerate() {
        let hm = heatmap_row(out, n, enc);
        let depths = out.depths.row(n).to_vec();
        let (input, trace) = encode_prediction(&hm, &depths, &s.camera, enc)?;
        let (m, g) = input_features(&input, enc);
        maps.push(m);
        geo.push(g);
        traces.push((hm, trace));
    }
    Ok((Features { maps: stack_rows(maps), geo: stack_rows(geo) }, traces))
}

/// Adds the gradient flowing from D's enabled map/geo inputs back into the
/// generator outputs.
fn backprop_through_encoding(
    d_maps: Option<&Array2<f64>>,
    d_geo: Option<&Array2<f64>>,
    traces: &[(HeatmapStack, crate::encode::PredictionTrace)],
    enc: &EncodeConfig,
    d_heatmaps: &mut Array2<f64>,
    d_depths: &mut Array2<f64>,
) {
    for (n, (hm, trace)) in traces.iter().enumerate() {
        let zeros_m = vec![0.0; 2 * hm.values.len()];
        let zeros_g = vec![0.0; 6 * hm.joints * hm.joints];
        let m = d_maps.map_or(zeros_m, |a| a.row(n).to_vec());
        let g = d_geo.map_or(zeros_g, |a| a.row(n).to_vec());
        let grad = input_features_backward(&m, &g, enc);
        let (dh, dd) = encode_prediction_backward(hm, trace, &grad, enc);
        d_heatmaps.row_mut(n).iter_mut().zip(dh).for_each(|(a, b)| *a += b);
        d_depths.row_mut(n).iter_mut().zip(dd).for_each(|(a, b)| *a += b);
    }
}

fn accuracy(scores: &[f64], real: bool) -> f64 {
    scores.iter().filter(|&&s| (s > 0.5) == real).count() as f64 / scores.len() as f64
}

/// One discriminator update on `⌈B/2⌉` lab ground truths against `⌊B/2⌋`
/// generator predictions split between lab and wild. Returns
/// `(loss, real accuracy, fake accuracy)`.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    g: &GeneratorModel,
    d: &mut DiscriminatorModel,
    lab: &PreparedSet,
    wild: &PreparedSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    enc: &EncodeConfig,
    root: usize,
    adam: &mut AdamState,
) -> Result<(f64, f64, f64), TrainError> {
    let n_fake = batch_size / 2;
    let n_real = batch_size - n_fake;
    let real_idx = draw(rng, lab, n_real);
    let fake_lab = draw(rng, lab, n_fake - n_fake / 2);
    let fake_wild = draw(rng, wild, n_fake / 2);
    let reals = Batch::gather(&[(lab, real_idx)], enc, root);
    let fakes = Batch::gather(&[(lab, fake_lab), (wild, fake_wild)], enc, root);
    let out = g.predict(&fakes.images, Some(&fakes.heatmaps))?;
    let rf = real_features(&reals.samples, enc, root)?;
    let (ff, _) = fake_features(&out, &fakes.samples, enc)?;
    let cat = |a: &Array2<f64>, b: &Array2<f64>| concatenate(Axis(0), &[a.view(), b.view()]).expect("widths agree");
    let scores = d.forward(&cat(&reals.images, &fakes.images), &cat(&rf.maps, &ff.maps), &cat(&rf.geo, &ff.geo))?;
    let s: Vec<f64> = scores.iter().copied().collect();
    let (sr, sf) = s.split_at(n_real);
    let loss = loss_d(sr, sf);
    let (gr, gf) = loss_d_grads(sr, sf);
    let d_score = Array2::from_shape_vec((s.len(), 1), gr.into_iter().chain(gf).collect()).expect("one score per row");
    d.zero_grad();
    d.backward(&d_score)?;
    adam.update(d)?;
    Ok((loss, accuracy(sr, true), accuracy(sf, false)))
}

/// One generator update on `λ·Σ bce(D(fake), 1) + L_pose` over a batch of
/// half lab, half wild samples. Returns `(l_pose, l_g)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    lab: &PreparedSet,
    wild: &PreparedSet,
    cfg: &AdvConfig,
    rng: &mut ChaCha8Rng,
    enc: &EncodeConfig,
    root: usize,
    adam: &mut AdamState,
) -> Result<(f64, f64), TrainError> {
    let n_wild = cfg.batch_size / 2;
    let parts = [(lab, draw(rng, lab, cfg.batch_size - n_wild)), (wild, draw(rng, wild, n_wild))];
    let batch = Batch::gather(&parts, enc, root);
    let group = g.mode.trainable();
    let losses = generator_objective(g, d, &batch, cfg.lambda, enc, group)?;
    adam_step(&mut g.params_in(group), adam)?;
    Ok(losses)
}

/// Evaluates `L_G` on `batch` and leaves its gradient with respect to the
/// parameters in `group` in the generator; discriminator gradients are
/// discarded. Returns `(l_pose, l_g)`.
pub fn generator_objective(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    batch: &Batch,
    lambda: f64,
    enc: &EncodeConfig,
    group: ParamGroup,
) -> Result<(f64, f64), TrainError> {
    g.zero_grad();
    let out = g.forward(&batch.images, Some(&batch.heatmaps))?;
    let pl = loss_pose(&out, &batch.heatmaps, &batch.depths, &batch.labeled);
    let (ff, traces) = fake_features(&out, &batch.samples, enc)?;
    let scores = d.forward(&batch.images, &ff.maps, &ff.geo)?;
    let s: Vec<f64> = scores.iter().copied().collect();
    let l_g = loss_g(&s, lambda, pl.value);
    let d_score = Array2::from_shape_vec((s.len(), 1), s.iter().map(|&v| lambda * bce_grad(v, 1.0)).collect())
        .expect("one score per row");
    let grads = d.backward(&d_score)?;
    d.zero_grad();
    let (mut d_hm, mut d_depth) = (pl.d_heatmaps, pl.d_depths);
    backprop_through_encoding(grads.maps.as_ref(), grads.geo.as_ref(), &traces, enc, &mut d_hm, &mut d_depth);
    g.backward(Some(&d_hm), Some(&d_depth), group)?;
    Ok((pl.value, l_g))
}

/// Alternating optimization: each cycle runs `ratio` discriminator updates
/// then one generator update.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    lab: &PreparedSet,
    wild: &PreparedSet,
    val: Option<Validation>,
    cfg: &AdvConfig,
    enc: &EncodeConfig,
    topology: &SkeletonTopology,
    state: &mut AdvState,
    stop_at: usize,
) -> Result<TrainHistory, TrainError> {
    require(lab)?;
    require(wild)?;
    if !lab.labeled {
        return Err(TrainError::Unlabeled(lab.domain.clone()));
    }
    let root = topology.root;
    let mut history = TrainHistory::default();
    while state.iteration < stop_at.min(cfg.iterations) {
        let it = state.iteration;
        let mut rng = iteration_rng(cfg.seed, TAG_ADV, it);
        let mut last = (0.0, 0.0, 0.0);
        for _ in 0..cfg.ratio.max(1) {
            last = discriminator_step(g, d, lab, wild, cfg.batch_size, &mut rng, enc, root, &mut state.adam_d)?;
            state.d_updates += 1;
        }
        let (l_pose, l_g) = generator_step(g, d, lab, wild, cfg, &mut rng, enc, root, &mut state.adam_g)?;
        state.g_updates += 1;
        state.iteration += 1;
        let n = state.iteration;
        let val_mpjpe = match val {
            Some(v) if v.due(n, cfg.iterations) => Some(finite(v.measure(g, enc, root)?, n, "validation MPJPE")?),
            _ => None,
        };
        history.rows.push(HistoryRow {
            iteration: n,
            l_pose: finite(l_pose, n, "pose loss")?,
            l_d: Some(finite(last.0, n, "discriminator loss")?),
            l_g: Some(finite(l_g, n, "generator loss")?),
            d_acc_real: Some(last.1),
            d_acc_fake: Some(last.2),
            val_mpjpe,
        });
    }
    Ok(history)
}

/// Decoded predictions for a set of samples.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub poses2d: Vec<Pose2D>,
    /// Camera frame; the root sits at the ground-truth root depth when the
    /// sample is labeled, at the nominal depth otherwise.
    pub poses3d: Vec<Pose3D>,
}

/// Runs the generator on `indices` of `set` and decodes 2D and 3D poses.
pub fn predict_set(
    g: &GeneratorModel,
    set: &PreparedSet,
    indices: &[usize],
    enc: &EncodeConfig,
    root: usize,
) -> Result<Predictions, TrainError> {
    let mut poses2d = Vec::with_capacity(indices.len());
    let mut poses3d = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let oracle = (g.mode == GeneratorMode::Oracle2d).then(|| set.heatmaps_at(chunk, enc));
        let out = g.predict(&set.images_at(chunk), oracle.as_ref())?;
        for (n, &i) in chunk.iter().enumerate() {
            let s = &set.samples[i];
            let px = decode_heatmaps(&heatmap_row(&out, n, enc), enc)?;
            let root_z = s.pose3d.as_ref().map_or(enc.nominal_root_depth, |p| p.coords[root][2]);
            let abs: Vec<f64> = out.depths.row(n).iter().map(|r| (root_z + r).max(1.0)).collect();
            poses3d.push(compose_3d(&px, &abs, &s.camera)?);
            poses2d.push(px);
        }
    }
    Ok(Predictions { poses2d, poses3d })
}

/// All metrics of predictions against a labeled set.
pub fn evaluate_predictions(
    preds: &Predictions,
    set: &PreparedSet,
    topology: &SkeletonTopology,
    variant: &str,
    seed: u64,
) -> Result<MetricsReport, TrainError> {
    if !set.labeled {
        return Err(TrainError::Unlabeled(set.domain.clone()));
    }
    let gts: Vec<Pose3D> = set.samples.iter().map(|s| s.pose3d.clone().expect("labeled")).collect();
    let gts2d: Vec<Pose2D> = set.samples.iter().map(|s| s.pose2d.clone()).collect();
    Ok(MetricsReport::compute(variant, seed, &set.domain, &preds.poses3d, &gts, &preds.poses2d, &gts2d, topology)?)
}

pub fn evaluate_generator(
    g: &GeneratorModel,
    set: &PreparedSet,
    enc: &EncodeConfig,
    topology: &SkeletonTopology,
    variant: &str,
    seed: u64,
) -> Result<MetricsReport, TrainError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let preds = predict_set(g, set, &idx, enc, topology.root)?;
    evaluate_predictions(&preds, set, topology, variant, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn output(h: Array2<f64>, d: Array2<f64>) -> GeneratorOutput {
        GeneratorOutput { heatmaps: h, depths: d }
    }

    #[test]
    fn pose_loss_zero_at_targets() {
        let h = array![[0.1, 0.9], [0.4, 0.2]];
        let d = array![[10.0], [-20.0]];
        let l = loss_pose(&output(h.clone(), d.clone()), &h, &d, &[true, true]);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn pose_loss_hand_batch() {
        let h = array![[0.1, 0.9, 0.3], [0.4, 0.2, 0.8]];
        let t = array![[0.0, 1.0, 0.5], [0.5, 0.0, 0.5]];
        let d = array![[120.0, -40.0], [300.0, 5.0]];
        let td = array![[100.0, -10.0], [0.0, 0.0]];
        let l = loss_pose(&output(h.clone(), d.clone()), &t, &td, &[true, false]);
        let mut oracle = 0.0;
        for n in 0..2 {
            for k in 0..3 {
                oracle += (h[(n, k)] - t[(n, k)]).powi(2);
            }
        }
        oracle += ((120.0f64 - 100.0) / 100.0).powi(2) + ((-40.0f64 + 10.0) / 100.0).powi(2);
        assert!((l.value - oracle).abs() / oracle < 1e-12);
        assert!(l.d_depths.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_loss_cases() {
        assert!((loss_d(&[0.5; 4], &[0.5; 3]) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // −ln(1 − ε) exceeds ε by ε²/2, hence the 1e-6 relative slack
        assert!(loss_d(&[1.0; 4], &[crate::diffnet::BCE_EPS; 4]) <= 2e-7 * (1.0 + 1e-6));
        let (r, f) = ([0.9, 0.3, 0.6], [0.2, 0.7]);
        let oracle = (-(0.9f64.ln()) - 0.3f64.ln() - 0.6f64.ln()) / 3.0 + (-(0.8f64.ln()) - 0.3f64.ln()) / 2.0;
        assert!((loss_d(&r, &f) - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn generator_loss_cases() {
        let s = [0.3, 0.8, 0.55];
        assert_eq!(loss_g(&s, 0.0, 7.25), 7.25);
        assert!((loss_g(&[1.0; 3], 1.0, 2.0) - 2.0).abs() <= 3e-7 * (1.0 + 1e-6));
        let oracle = 1e-4 * (-(0.3f64.ln()) - 0.8f64.ln() - 0.55f64.ln()) + 7.25;
        assert!((loss_g(&s, 1e-4, 7.25) - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn history_csv_roundtrip() {
        let h = TrainHistory {
            rows: vec![
                HistoryRow {
                    iteration: 1,
                    l_pose: 3.5,
                    l_d: None,
                    l_g: None,
                    d_acc_real: None,
                    d_acc_fake: None,
                    val_mpjpe: None,
                },
                HistoryRow {
                    iteration: 2,
                    l_pose: 0.1 + 0.2,
                    l_d: Some(1.25),
                    l_g: Some(4.0),
                    d_acc_real: Some(0.5),
                    d_acc_fake: Some(1.0),
                    val_mpjpe: Some(87.125),
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.save(&p).unwrap();
        assert_eq!(TrainHistory::load(&p).unwrap(), h);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iteration,l_pose,l_d,l_g,d_acc_real,d_acc_fake,val_mpjpe\n1,3.5,,,,,\n"));
        assert_eq!(h.first_reaching(100.0), Some(2));
    }
}
