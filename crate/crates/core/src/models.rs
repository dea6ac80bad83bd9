//! The generator (2D module plus depth regressor) and the multi-source
//! discriminator, assembled from [`crate::diffnet`] dense networks.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{Activation, Checkpoint, DenseNet, DenseNetSpec, EngineError, Parameterized, Record, Tensor};
use crate::synth::splitmix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("unknown generator mode {0:?}")]
    UnknownMode(String),
    #[error("oracle-2d mode needs ground-truth heatmaps")]
    MissingOracle,
    #[error("discriminator needs at least one source")]
    NoSources,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Layer widths for both adversaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    /// (height, width)
    pub heatmap_size: (usize, usize),
    /// Width of the 2D module's hidden layer, which is also the feature tap.
    pub trunk_width: usize,
    pub depth_hidden: Vec<usize>,
    /// Depth outputs are the regressor's raw output times this, in mm.
    pub depth_scale: f64,
    pub embed_width: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    /// Desk-scale widths.
    fn default() -> Self {
        Self {
            joints: 16,
            image_size: (32, 32),
            heatmap_size: (16, 16),
            trunk_width: 256,
            depth_hidden: vec![128, 64],
            depth_scale: 500.0,
            embed_width: 64,
            head_hidden: vec![128, 64],
        }
    }
}

impl ModelConfig {
    /// The larger reference widths (1024-wide 2D module, 128-wide embeddings).
    pub fn reference() -> Self {
        Self { trunk_width: 1024, depth_hidden: vec![512, 256], embed_width: 128, ..Self::default() }
    }

    /// Same topology with every width shrunk, for gradient checking.
    pub fn reduced(joints: usize) -> Self {
        Self {
            joints,
            image_size: (4, 5),
            heatmap_size: (3, 4),
            trunk_width: 6,
            depth_hidden: vec![5, 4],
            depth_scale: 500.0,
            embed_width: 3,
            head_hidden: vec![4, 3],
        }
    }

    pub fn image_len(&self) -> usize {
        self.image_size.0 * self.image_size.1
    }

    pub fn heatmap_len(&self) -> usize {
        self.joints * self.heatmap_size.0 * self.heatmap_size.1
    }

    pub fn descriptor_len(&self) -> usize {
        6 * self.joints * self.joints
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    EndToEnd,
    Fix2d,
    Oracle2d,
}

impl GeneratorMode {
    /// Parameters updated during adversarial training.
    pub fn trainable(self) -> ParamGroup {
        match self {
            Self::EndToEnd => ParamGroup::All,
            Self::Fix2d | Self::Oracle2d => ParamGroup::Depth,
        }
    }

    fn code(self) -> f64 {
        match self {
            Self::EndToEnd => 0.0,
            Self::Fix2d => 1.0,
            Self::Oracle2d => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        [Self::EndToEnd, Self::Fix2d, Self::Oracle2d].into_iter().find(|m| m.code() == c)
    }
}

impl FromStr for GeneratorMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "end-to-end" => Ok(Self::EndToEnd),
            "fix-2d" => Ok(Self::Fix2d),
            "oracle-2d" => Ok(Self::Oracle2d),
            _ => Err(ModelError::UnknownMode(s.to_string())),
        }
    }
}

/// Subsets of generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TwoD,
    Depth,
    All,
}

impl ParamGroup {
    fn has_two_d(self) -> bool {
        matches!(self, Self::TwoD | Self::All)
    }

    fn has_depth(self) -> bool {
        matches!(self, Self::Depth | Self::All)
    }
}

/// Batch outputs of the generator; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    /// `B × (P·H·W)`, joint-major maps.
    pub heatmaps: Array2<f64>,
    /// `B × P`, root-relative mm.
    pub depths: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: ModelConfig,
    pub mode: GeneratorMode,
    /// Image → feature tap (ReLU).
    pub trunk: DenseNet,
    /// Feature tap → heatmaps (sigmoid).
    pub heat_head: DenseNet,
    /// [heatmaps ⊕ tap] → depths / depth_scale.
    pub depth_net: DenseNet,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag))
}

impl GeneratorModel {
    pub fn new(config: ModelConfig, mode: GeneratorMode, seed: u64) -> Result<Self, ModelError> {
        let hm = config.heatmap_len();
        let trunk = DenseNet::new(DenseNetSpec::new(
            vec![config.image_len(), config.trunk_width],
            vec![Activation::Relu],
            sub_seed(seed, 1),
        ))?;
        let heat_head = DenseNet::new(DenseNetSpec::new(
            vec![config.trunk_width, hm],
            vec![Activation::Sigmoid],
            sub_seed(seed, 2),
        ))?;
        let mut widths = vec![hm + config.trunk_width];
        widths.extend(&config.depth_hidden);
        widths.push(config.joints);
        let depth_net = DenseNet::new(DenseNetSpec::mlp(&widths, Activation::Identity, sub_seed(seed, 3)))?;
        Ok(Self { config, mode, trunk, heat_head, depth_net })
    }

    /// Runs the 2D module only, recording intermediates.
    pub fn forward_2d(&mut self, images: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let tap = self.trunk.forward(images)?;
        Ok(self.heat_head.forward(&tap)?)
    }

    /// Full recorded forward pass. `oracle` supplies rendered ground-truth
    /// heatmaps and is required in oracle-2d mode (ignored otherwise).
    pub fn forward(
        &mut self,
        images: &Array2<f64>,
        oracle: Option<&Array2<f64>>,
    ) -> Result<GeneratorOutput, ModelError> {
        let tap = self.trunk.forward(images)?;
        let heatmaps = match self.mode {
            GeneratorMode::Oracle2d => oracle.ok_or(ModelError::MissingOracle)?.clone(),
            _ => self.heat_head.forward(&tap)?,
        };
        let input = concatenate(Axis(1), &[heatmaps.view(), tap.view()]).expect("row counts agree");
        let depths = self.depth_net.forward(&input)? * self.config.depth_scale;
        Ok(GeneratorOutput { heatmaps, depths })
    }

    /// Inference without recording.
    pub fn predict(&self, images: &Array2<f64>, oracle: Option<&Array2<f64>>) -> Result<GeneratorOutput, ModelError> {
        let tap = self.trunk.predict(images)?;
        let heatmaps = match self.mode {
            GeneratorMode::Oracle2d => oracle.ok_or(ModelError::MissingOracle)?.clone(),
            _ => self.heat_head.predict(&tap)?,
        };
        let input = concatenate(Axis(1), &[heatmaps.view(), tap.view()]).expect("row counts agree");
        let depths = self.depth_net.predict(&input)? * self.config.depth_scale;
        Ok(GeneratorOutput { heatmaps, depths })
    }

    /// Accumulates gradients of the parameters in `group` from upstream
    /// gradients on heatmaps and/or depths. The 2D module is never reached
    /// in oracle-2d mode.
    pub fn backward(
        &mut self,
        d_heatmaps: Option<&Array2<f64>>,
        d_depths: Option<&Array2<f64>>,
        group: ParamGroup,
    ) -> Result<(), ModelError> {
        let hm = self.config.heatmap_len();
        let mut d_hm = d_heatmaps.cloned();
        let mut d_tap = None;
        if let Some(dd) = d_depths {
            let d_in = self.depth_net.backward(&(dd * self.config.depth_scale))?;
            if !group.has_depth() {
                self.depth_net.zero_grad();
            }
            let from_depth = d_in.slice(s![.., ..hm]).to_owned();
            d_hm = Some(match d_hm {
                Some(h) => h + &from_depth,
                None => from_depth,
            });
            d_tap = Some(d_in.slice(s![.., hm..]).to_owned());
        }
        if !group.has_two_d() || self.mode == GeneratorMode::Oracle2d {
            return Ok(());
        }
        let mut tap_grad = match d_hm {
            Some(h) => self.heat_head.backward(&h)?,
            None => return Ok(()),
        };
        if let Some(t) = d_tap {
            tap_grad += &t;
        }
        self.trunk.backward(&tap_grad)?;
        Ok(())
    }

    pub fn params_in(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if group.has_two_d() {
            out.extend(self.trunk.params_mut());
            out.extend(self.heat_head.params_mut());
        }
        if group.has_depth() {
            out.extend(self.depth_net.params_mut());
        }
        out
    }

    pub fn shapes_in(&self, group: ParamGroup) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if group.has_two_d() {
            out.extend(self.trunk.params().iter().chain(self.heat_head.params().iter()).map(|p| p.shape()));
        }
        if group.has_depth() {
            out.extend(self.depth_net.params().iter().map(|p| p.shape()));
        }
        out
    }

    pub fn push_records(&self, ckpt: &mut Checkpoint) {
        self.trunk.push_records("g.trunk", ckpt);
        self.heat_head.push_records("g.heat", ckpt);
        self.depth_net.push_records("g.depth", ckpt);
        ckpt.push(Record::scalar("meta.g_mode".into(), self.mode.code()));
    }

    /// Loads weights; the mode stays as constructed.
    pub fn load_records(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        self.trunk.load_records("g.trunk", ckpt)?;
        self.heat_head.load_records("g.heat", ckpt)?;
        self.depth_net.load_records("g.depth", ckpt)?;
        Ok(())
    }

    pub fn mode_in(ckpt: &Checkpoint) -> Option<GeneratorMode> {
        ckpt.scalar("meta.g_mode").and_then(GeneratorMode::from_code)
    }
}

impl Parameterized for GeneratorModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.trunk.params();
        out.extend(self.heat_head.params());
        out.extend(self.depth_net.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_in(ParamGroup::All)
    }
}

/// Which inputs the discriminator looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSet {
    pub image: bool,
    pub maps: bool,
    pub geo: bool,
}

impl SourceSet {
    pub const ALL: SourceSet = SourceSet { image: true, maps: true, geo: true };

    pub fn count(&self) -> usize {
        [self.image, self.maps, self.geo].iter().filter(|&&b| b).count()
    }
}

/// Gradients of the discriminator score w.r.t. its enabled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub images: Option<Array2<f64>>,
    pub maps: Option<Array2<f64>>,
    pub geo: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub sources: SourceSet,
    pub image_branch: Option<DenseNet>,
    pub map_branch: Option<DenseNet>,
    pub geo_branch: Option<DenseNet>,
    pub head: DenseNet,
}

impl DiscriminatorModel {
    pub fn new(config: &ModelConfig, sources: SourceSet, seed: u64) -> Result<Self, ModelError> {
        if sources.count() == 0 {
            return Err(ModelError::NoSources);
        }
        let e = config.embed_width;
        let branch = |on: bool, width: usize, tag: u64| -> Result<Option<DenseNet>, ModelError> {
            if !on {
                return Ok(None);
            }
            Ok(Some(DenseNet::new(DenseNetSpec::new(vec![width, e], vec![Activation::Relu], sub_seed(seed, tag)))?))
        };
        let mut widths = vec![e * sources.count()];
        widths.extend(&config.head_hidden);
        widths.push(1);
        Ok(Self {
            sources,
            image_branch: branch(sources.image, config.image_len(), 11)?,
            map_branch: branch(sources.maps, 2 * config.heatmap_len(), 12)?,
            geo_branch: branch(sources.geo, config.descriptor_len(), 13)?,
            head: DenseNet::new(DenseNetSpec::mlp(&widths, Activation::Sigmoid, sub_seed(seed, 14)))?,
        })
    }

    fn branches_mut(&mut self) -> [Option<&mut DenseNet>; 3] {
        [self.image_branch.as_mut(), self.map_branch.as_mut(), self.geo_branch.as_mut()]
    }

    /// Recorded forward; returns `B × 1` scores in (0, 1). Inputs of
    /// disabled sources are never read.
    pub fn forward(
        &mut self,
        images: &Array2<f64>,
        maps: &Array2<f64>,
        geo: &Array2<f64>,
    ) -> Result<Array2<f64>, ModelError> {
        let mut parts = Vec::with_capacity(3);
        for (net, x) in self.branches_mut().into_iter().zip([images, maps, geo]) {
            if let Some(net) = net {
                parts.push(net.forward(x)?);
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let joined = concatenate(Axis(1), &views).expect("row counts agree");
        Ok(self.head.forward(&joined)?)
    }

    pub fn predict(
        &self,
        images: &Array2<f64>,
        maps: &Array2<f64>,
        geo: &Array2<f64>,
    ) -> Result<Array2<f64>, ModelError> {
        let mut parts = Vec::with_capacity(3);
        for (net, x) in [&self.image_branch, &self.map_branch, &self.geo_branch].into_iter().zip([images, maps, geo]) {
            if let Some(net) = net {
                parts.push(net.predict(x)?);
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let joined = concatenate(Axis(1), &views).expect("row counts agree");
        Ok(self.head.predict(&joined)?)
    }

    /// Accumulates parameter gradients for `∂L/∂score` and returns the
    /// input gradients of every enabled source.
    pub fn backward(&mut self, d_score: &Array2<f64>) -> Result<InputGrads, ModelError> {
        let d_joined = self.head.backward(d_score)?;
        let e = d_joined.ncols() / self.sources.count();
        let mut grads = [None, None, None];
        let mut k = 0;
        for (slot, net) in grads.iter_mut().zip(self.branches_mut()) {
            if let Some(net) = net {
                let part = d_joined.slice(s![.., k * e..(k + 1) * e]).to_owned();
                *slot = Some(net.backward(&part)?);
                k += 1;
            }
        }
        let [images, maps, geo] = grads;
        Ok(InputGrads { images, maps, geo })
    }

    pub fn push_records(&self, ckpt: &mut Checkpoint) {
        for (prefix, net) in
            [("d.image", &self.image_branch), ("d.maps", &self.map_branch), ("d.geo", &self.geo_branch)]
        {
            if let Some(net) = net {
                net.push_records(prefix, ckpt);
            }
        }
        self.head.push_records("d.head", ckpt);
        let s = self.sources;
        ckpt.push(Record::vector(
            "meta.d_sources".into(),
            vec![s.image as u8 as f64, s.maps as u8 as f64, s.geo as u8 as f64],
        ));
    }

    pub fn load_records(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        for (prefix, net) in
            [("d.image", &mut self.image_branch), ("d.maps", &mut self.map_branch), ("d.geo", &mut self.geo_branch)]
        {
            if let Some(net) = net {
                net.load_records(prefix, ckpt)?;
            }
        }
        self.head.load_records("d.head", ckpt)?;
        Ok(())
    }
}

impl Parameterized for DiscriminatorModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for net in [&self.image_branch, &self.map_branch, &self.geo_branch].into_iter().flatten() {
            out.extend(net.params());
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for net in [&mut self.image_branch, &mut self.map_branch, &mut self.geo_branch].into_iter().flatten() {
            out.extend(net.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Map,
    Geo,
    Full,
    FullFix2d,
    FullNoPretrain,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Self::Baseline, Self::Map, Self::Geo, Self::Full, Self::FullFix2d, Self::FullNoPretrain];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Map => "Map",
            Self::Geo => "Geo",
            Self::Full => "Full",
            Self::FullFix2d => "Full-fix2D",
            Self::FullNoPretrain => "Full-no-pretrain",
        }
    }

    /// Discriminator inputs, or `None` when there is no adversary.
    pub fn sources(self) -> Option<SourceSet> {
        match self {
            Self::Baseline => None,
            Self::Map => Some(SourceSet { image: true, maps: true, geo: false }),
            Self::Geo => Some(SourceSet { image: true, maps: false, geo: true }),
            Self::Full | Self::FullFix2d | Self::FullNoPretrain => Some(SourceSet::ALL),
        }
    }

    pub fn generator_mode(self) -> GeneratorMode {
        match self {
            Self::FullFix2d => GeneratorMode::Fix2d,
            _ => GeneratorMode::EndToEnd,
        }
    }

    pub fn uses_pretraining(self) -> bool {
        self != Self::FullNoPretrain
    }

    pub fn code(self) -> f64 {
        Self::ALL.iter().position(|&v| v == self).expect("listed") as f64
    }

    pub fn from_code(c: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == c)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// Builds the generator and (unless Baseline) the discriminator of a variant.
pub fn make_variant(
    variant: Variant,
    config: &ModelConfig,
    seed: u64,
) -> Result<(GeneratorModel, Option<DiscriminatorModel>), ModelError> {
    let g = GeneratorModel::new(config.clone(), variant.generator_mode(), sub_seed(seed, 100))?;
    let d = variant.sources().map(|s| DiscriminatorModel::new(config, s, sub_seed(seed, 200))).transpose()?;
    Ok((g, d))
}
