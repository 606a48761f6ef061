//! Run configuration. One JSON file drives every pipeline stage, and the
//! serialized form is embedded in each output artifact so a model can always
//! be traced back to the exact settings that produced it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnet::train::TrainOptions;
use crate::convnet::ConvSpec;
use crate::hogmap::{HogError, HogParams};
use crate::pooling::Pooling;
use crate::saliency::SaliencyOptions;
use crate::util;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which descriptor stream the writer models score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerChoice {
    Conv1,
    Conv2,
    Conv3,
    /// conv1 and conv2 scored separately, then combined per word
    Fused,
}

impl LayerChoice {
    /// Convolution layers that need models (and descriptors) under this choice.
    pub fn layers(self) -> Vec<usize> {
        match self {
            LayerChoice::Conv1 => vec![1],
            LayerChoice::Conv2 => vec![2],
            LayerChoice::Conv3 => vec![3],
            LayerChoice::Fused => vec![1, 2],
        }
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerChoice::Conv1 => write!(f, "conv1"),
            LayerChoice::Conv2 => write!(f, "conv2"),
            LayerChoice::Conv3 => write!(f, "conv3"),
            LayerChoice::Fused => write!(f, "fused"),
        }
    }
}

impl std::str::FromStr for LayerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv1" => Ok(LayerChoice::Conv1),
            "conv2" => Ok(LayerChoice::Conv2),
            "conv3" => Ok(LayerChoice::Conv3),
            "fused" => Ok(LayerChoice::Fused),
            other => Err(format!("unknown layer {other:?} (conv1|conv2|conv3|fused)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiftConfig {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma0: f64,
    pub contrast_thresh: f64,
    pub edge_ratio: f64,
    /// fragment half-width in units of keypoint scale
    pub eta: f64,
    pub min_side: usize,
}

impl Default for SiftConfig {
    fn default() -> Self {
        SiftConfig {
            octaves: 4,
            scales_per_octave: 3,
            sigma0: 1.6,
            contrast_thresh: 0.03,
            edge_ratio: 10.0,
            eta: 6.0,
            min_side: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub bn_momentum: f64,
    /// stop early once validation accuracy reaches this level
    pub stop_at_val_acc: Option<f64>,
    /// per-class training images rendered when no IDX dataset is configured
    pub builtin_train_per_class: usize,
    pub builtin_val_per_class: usize,
    /// cap per class when loading IDX files; None keeps the whole set
    pub subset_per_class: Option<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        let spec = ConvSpec::default();
        let opts = TrainOptions::default();
        CnnConfig {
            filters: spec.filters,
            strides: spec.strides,
            classes: spec.classes,
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            learning_rate: opts.learning_rate,
            lr_decay_every: opts.lr_decay_every,
            lr_decay: opts.lr_decay,
            bn_momentum: opts.bn_momentum,
            stop_at_val_acc: None,
            builtin_train_per_class: 400,
            builtin_val_per_class: 40,
            subset_per_class: None,
        }
    }
}

impl CnnConfig {
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            filters: self.filters.clone(),
            strides: self.strides.clone(),
            classes: self.classes,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay_every: self.lr_decay_every,
            lr_decay: self.lr_decay,
            bn_momentum: self.bn_momentum,
            seed,
            stop_at_val_acc: self.stop_at_val_acc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLayout {
    /// every cell in one block
    Single,
    /// four equal blocks; needs an even cell grid
    Quadrant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HogLayerConfig {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub layout: BlockLayout,
}

impl HogLayerConfig {
    pub fn params(&self) -> Result<HogParams, HogError> {
        match self.layout {
            BlockLayout::Single => HogParams::single_block(self.rows, self.cols, self.bins),
            BlockLayout::Quadrant => HogParams::quadrants(self.rows, self.cols, self.bins),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HogConfig {
    pub conv1: HogLayerConfig,
    pub conv2: HogLayerConfig,
    pub conv3: HogLayerConfig,
}

impl Default for HogConfig {
    fn default() -> Self {
        let wide = HogLayerConfig { rows: 4, cols: 4, bins: 10, layout: BlockLayout::Quadrant };
        let narrow = HogLayerConfig { rows: 2, cols: 2, bins: 10, layout: BlockLayout::Quadrant };
        HogConfig { conv1: wide.clone(), conv2: wide, conv3: narrow }
    }
}

impl HogConfig {
    pub fn for_layer(&self, layer: usize) -> Result<HogParams, ConfigError> {
        let cfg = match layer {
            1 => &self.conv1,
            2 => &self.conv2,
            3 => &self.conv3,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "no descriptor geometry for conv{other}; layers 1-3 are supported"
                )))
            }
        };
        cfg.params().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// sparse components per filter
    pub components: usize,
    /// histogram bins for the entropy estimate
    pub bins: usize,
    pub lambda: f64,
    /// None selects lambda1 by bisection toward `target_sparsity`
    pub lambda1: Option<f64>,
    pub target_sparsity: f64,
    pub iters: usize,
    /// calibration rows per writer; None uses every writer's common minimum
    pub fragments_per_writer: Option<usize>,
    /// cap on calibration writers; None enrols all of them
    pub max_writers: Option<usize>,
    /// layers profiled by `calibrate`
    pub layers: Vec<usize>,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        let opts = SaliencyOptions::default();
        SaliencyConfig {
            components: opts.components,
            bins: opts.bins,
            lambda: opts.lambda,
            lambda1: opts.lambda1,
            target_sparsity: opts.target_sparsity,
            iters: opts.iters,
            fragments_per_writer: Some(128),
            max_writers: None,
            layers: vec![1, 2],
        }
    }
}

impl SaliencyConfig {
    pub fn options(&self) -> SaliencyOptions {
        SaliencyOptions {
            components: self.components,
            bins: self.bins,
            lambda: self.lambda,
            lambda1: self.lambda1,
            target_sparsity: self.target_sparsity,
            iters: self.iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// share of each writer's training words held out for the grid search
    /// and the fusion-weight sweep
    pub holdout_fraction: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c_grid: crate::classify::default_c_grid(),
            gamma_grid: crate::classify::default_gamma_grid(),
            holdout_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// writers rendered by `synth-corpus`
    pub num_writers: usize,
    pub words_per_writer: usize,
    /// per-class glyph instances behind the synthetic renderer
    pub glyphs_per_class: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { num_writers: 10, words_per_writer: 40, glyphs_per_class: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// IDX image/label pairs; when absent the built-in glyph set stands in
    pub emnist_train_images: Option<PathBuf>,
    pub emnist_train_labels: Option<PathBuf>,
    pub emnist_test_images: Option<PathBuf>,
    pub emnist_test_labels: Option<PathBuf>,
    pub weights: PathBuf,
    pub profiles_dir: PathBuf,
    pub bundle: PathBuf,
    /// word-corpus manifest; `synth-corpus` writes it, later stages read it
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            emnist_train_images: None,
            emnist_train_labels: None,
            emnist_test_images: None,
            emnist_test_labels: None,
            weights: PathBuf::from("artifacts/cnn.weights"),
            profiles_dir: PathBuf::from("artifacts/profiles"),
            bundle: PathBuf::from("artifacts/writers.bundle"),
            manifest: PathBuf::from("artifacts/corpus/manifest.csv"),
            out_dir: PathBuf::from("artifacts"),
        }
    }
}

impl PathsConfig {
    pub fn profile_path(&self, layer: usize) -> PathBuf {
        self.profiles_dir.join(format!("saliency-conv{layer}.json"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// master seed; every stage derives its own stream from it
    pub seed: u64,
    pub sift: SiftConfig,
    pub cnn: CnnConfig,
    pub hog: HogConfig,
    pub saliency: SaliencyConfig,
    pub pooling: Pooling,
    pub layer: LayerChoice,
    pub svm: SvmConfig,
    pub corpus: CorpusConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            sift: SiftConfig::default(),
            cnn: CnnConfig::default(),
            hog: HogConfig::default(),
            saliency: SaliencyConfig::default(),
            pooling: Pooling::Post,
            layer: LayerChoice::Fused,
            svm: SvmConfig::default(),
            corpus: CorpusConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form, the string embedded in artifacts.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        util::digest_hex(self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let s = &self.sift;
        if s.octaves == 0 || s.scales_per_octave == 0 {
            return bad("sift: octaves and scales_per_octave must be positive".into());
        }
        if !(s.sigma0 > 0.0) || !(s.eta > 0.0) {
            return bad("sift: sigma0 and eta must be positive".into());
        }
        if !(s.contrast_thresh > 0.0) || !(s.edge_ratio >= 1.0) {
            return bad("sift: contrast_thresh > 0 and edge_ratio >= 1 required".into());
        }
        if s.min_side < 5 {
            return bad(format!("sift: min_side {} too small for the network", s.min_side));
        }

        self.cnn.conv_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let c = &self.cnn;
        if c.epochs == 0 || c.batch_size == 0 {
            return bad("cnn: epochs and batch_size must be positive".into());
        }
        if !(c.learning_rate > 0.0) || !(c.lr_decay > 0.0) || c.lr_decay_every == 0 {
            return bad("cnn: learning rate schedule must be positive".into());
        }
        if !(0.0..=1.0).contains(&c.bn_momentum) {
            return bad(format!("cnn: bn_momentum {} outside [0,1]", c.bn_momentum));
        }
        if c.builtin_train_per_class == 0 || c.builtin_val_per_class == 0 {
            return bad("cnn: builtin per-class counts must be positive".into());
        }

        for layer in 1..=3 {
            self.hog.for_layer(layer)?;
        }

        let sal = &self.saliency;
        if sal.components == 0 || sal.bins < 2 {
            return bad("saliency: need components >= 1 and bins >= 2".into());
        }
        if !(sal.lambda >= 0.0) || !sal.lambda1.map_or(true, |l| l >= 0.0) {
            return bad("saliency: penalties must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&sal.target_sparsity) {
            return bad("saliency: target_sparsity outside [0,1)".into());
        }
        if sal.iters == 0 {
            return bad("saliency: iters must be positive".into());
        }
        if sal.fragments_per_writer == Some(0) || sal.max_writers.is_some_and(|w| w < 2) {
            return bad("saliency: calibration needs rows and at least two writers".into());
        }
        if sal.layers.is_empty() || sal.layers.iter().any(|&l| l == 0 || l > 3) {
            return bad(format!("saliency: layers {:?} outside 1-3", sal.layers));
        }

        let v = &self.svm;
        if v.c_grid.is_empty() || v.gamma_grid.is_empty() {
            return bad("svm: empty hyperparameter grid".into());
        }
        if v.c_grid.iter().chain(&v.gamma_grid).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return bad("svm: grid values must be positive and finite".into());
        }
        if !(0.0 < v.holdout_fraction && v.holdout_fraction < 1.0) {
            return bad(format!("svm: holdout_fraction {} outside (0,1)", v.holdout_fraction));
        }

        let co = &self.corpus;
        if co.num_writers < 2 {
            return bad("corpus: need at least two writers".into());
        }
        if co.words_per_writer < 11 {
            return bad("corpus: words_per_writer must be at least 11 (two pages)".into());
        }
        if co.glyphs_per_class == 0 {
            return bad("corpus: glyphs_per_class must be positive".into());
        }

        if self.pooling != Pooling::Average {
            for layer in self.layer.layers() {
                if !sal.layers.contains(&layer) {
                    return bad(format!(
                        "{} pooling on conv{layer} needs a saliency profile; \
                         add {layer} to saliency.layers",
                        self.pooling
                    ));
                }
            }
        }
        Ok(())
    }
}
