//! Per-subcommand flags (all optional) and the resolved settings they
//! override. Field names double as configuration-file keys.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sfp_core::attack::AttackConfig;
use sfp_core::render::RenderOptions;
use sfp_core::targets::{DEFAULT_GROUND_EXTENT, DEFAULT_TESSELLATION};

/// Rendering flags shared by the commands that trace scenes.
#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RenderFlags {
    /// Elevation angle in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    /// Image side length in pixels.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    /// Rays across the sensor plane's azimuth axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rays_u: Option<usize>,
    /// Rays across the sensor plane's vertical axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rays_v: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_bounces: Option<usize>,
    /// Multiplicative speckle on or off.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speckle: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct RenderSettings {
    pub elevation: f64,
    pub image_size: usize,
    pub rays_u: usize,
    pub rays_v: usize,
    pub max_bounces: usize,
    pub speckle: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        let r = RenderOptions::default();
        RenderSettings {
            elevation: r.elevation_deg,
            image_size: r.n_azimuth,
            rays_u: r.rays_u,
            rays_v: r.rays_v,
            max_bounces: r.max_bounces,
            speckle: r.speckle,
        }
    }
}

impl RenderSettings {
    pub fn options(&self, scale_cap: f64, run_seed: u64) -> RenderOptions {
        RenderOptions {
            elevation_deg: self.elevation,
            n_azimuth: self.image_size,
            n_range: self.image_size,
            rays_u: self.rays_u,
            rays_v: self.rays_v,
            sensor_distance: RenderOptions::default().sensor_distance,
            max_bounces: self.max_bounces,
            scale_cap,
            speckle: self.speckle,
            run_seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TargetsFlags {
    /// Subdivision level applied to every primitive.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tessellation: Option<u32>,
    /// Half-width of the square ground plane in meters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_extent: Option<f64>,
    /// Directory of target specification files (default: built-in targets).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    /// Comma-separated subset of classes.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TargetsSettings {
    pub tessellation: u32,
    pub ground_extent: f64,
    pub targets: Option<PathBuf>,
    pub classes: Option<Vec<String>>,
}

impl Default for TargetsSettings {
    fn default() -> Self {
        TargetsSettings {
            tessellation: DEFAULT_TESSELLATION,
            ground_extent: DEFAULT_GROUND_EXTENT,
            targets: None,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DatasetFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub targets: TargetsFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub render: RenderFlags,
    /// `start:stop:step` in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub azimuth_sweep: Option<String>,
    /// Percentile of nonzero training intensities mapped to full scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap_percentile: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DatasetSettings {
    #[serde(flatten)]
    pub targets: TargetsSettings,
    #[serde(flatten)]
    pub render: RenderSettings,
    pub azimuth_sweep: String,
    pub cap_percentile: f64,
    pub train_fraction: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            targets: TargetsSettings::default(),
            render: RenderSettings::default(),
            azimuth_sweep: "0:360:1".into(),
            cap_percentile: 99.5,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateFlags {
    /// Scene file to render.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    /// Single azimuth in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
    /// `start:stop:step` in degrees; images go to the output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub azimuth_sweep: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub render: RenderFlags,
    /// Intensity mapped to full scale.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_cap: Option<f64>,
    /// Take rendering settings (cap, speckle seed, grid) from a dataset.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Apply a snapshot's blend coefficients instead of the clean parameters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
    /// Apply the blend coefficients stored in the scene file.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apply_scene_blend: Option<bool>,
    /// Also write every echo sample as CSV next to each image.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub echo_csv: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SimulateSettings {
    pub scene: Option<PathBuf>,
    pub azimuth: Option<f64>,
    pub azimuth_sweep: Option<String>,
    #[serde(flatten)]
    pub render: RenderSettings,
    pub scale_cap: f64,
    pub dataset: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub apply_scene_blend: bool,
    pub echo_csv: bool,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            scene: None,
            azimuth: None,
            azimuth_sweep: None,
            render: RenderSettings::default(),
            scale_cap: 1.0,
            dataset: None,
            snapshot: None,
            apply_scene_blend: false,
            echo_csv: false,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainFlags {
    /// Dataset directory written by `gen-dataset`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// One of linear, mlp, cnn-small, cnn-large.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Learning rate (default depends on the architecture).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainSettings {
    pub dataset: Option<PathBuf>,
    pub architecture: String,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            dataset: None,
            architecture: "cnn-small".into(),
            epochs: 20,
            lr: None,
            batch_size: 16,
        }
    }
}

/// Optimizer flags shared by `attack` and the attack-running protocols.
#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OptimizerFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Finite-difference step on the blend coefficients.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    /// Number of mesh batches per epoch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_denominator: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
    /// Comma-separated ascending epoch-loss thresholds.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_thresholds: Option<Vec<f64>>,
    /// Attack views as `start:stop:step` degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<String>,
    /// Elevation of the attack views.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    /// Restrict the optimization to these comma-separated components.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<String>>,
    /// Difference every coefficient separately.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_parameter: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct OptimizerSettings {
    pub epochs: usize,
    pub lr: f64,
    pub fd_step: f64,
    pub batch_denominator: usize,
    pub clip_bound: f64,
    pub lr_thresholds: Vec<f64>,
    pub views: String,
    pub elevation: f64,
    pub components: Option<Vec<String>>,
    pub per_parameter: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let c = AttackConfig::default();
        OptimizerSettings {
            epochs: c.epochs,
            lr: c.lr,
            fd_step: c.fd_step,
            batch_denominator: c.batch_denominator,
            clip_bound: c.clip_bound,
            lr_thresholds: c.lr_drop_thresholds,
            views: "0:360:10".into(),
            elevation: c.elevation_deg,
            components: None,
            per_parameter: false,
        }
    }
}

/// Which scene and class an attack or evaluation is about.
#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TargetFlags {
    /// Dataset directory (supplies scenes, class labels and render settings).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Class name of the attacked target (default: the first class).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    /// Scene file overriding the dataset's scene for the class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TargetSettings {
    pub dataset: Option<PathBuf>,
    pub class: Option<String>,
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Random,
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AttackFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
    /// Model file written by `train`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optimizer: OptimizerFlags,
    /// Emit a baseline snapshot instead of optimizing.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct AttackSettings {
    #[serde(flatten)]
    pub target: TargetSettings,
    pub model: Option<PathBuf>,
    #[serde(flatten)]
    pub optimizer: OptimizerSettings,
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Success,
    CrossView,
    CrossModel,
    Ablation,
    Sweep,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Success => "success",
            Protocol::CrossView => "cross-view",
            Protocol::CrossModel => "cross-model",
            Protocol::Ablation => "ablation",
            Protocol::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalFlags {
    /// success | cross-view | cross-model | ablation | sweep
    #[arg(value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetFlags,
    /// Model file of the evaluated classifier.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Snapshot file to evaluate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
    /// `name=path` model list for cross-model evaluation.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
    /// `name=path` snapshot list, one per source model.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<String>>,
    /// Azimuth step of the cross-view sweep in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Width of each cross-view azimuth group in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<f64>,
    /// Comma-separated epoch counts for the sweep.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_list: Option<Vec<usize>>,
    /// Count clean misclassifications as attacked.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_all: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optimizer: OptimizerFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalSettings {
    pub protocol: Option<Protocol>,
    #[serde(flatten)]
    pub target: TargetSettings,
    pub model: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub models: Option<Vec<String>>,
    pub snapshots: Option<Vec<String>>,
    pub step: f64,
    pub group: f64,
    pub epoch_list: Vec<usize>,
    pub count_all: bool,
    #[serde(flatten)]
    pub optimizer: OptimizerSettings,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            protocol: None,
            target: TargetSettings::default(),
            model: None,
            snapshot: None,
            models: None,
            snapshots: None,
            step: 1.0,
            group: 60.0,
            epoch_list: vec![12, 16, 25, 50],
            count_all: false,
            optimizer: OptimizerSettings::default(),
        }
    }
}
