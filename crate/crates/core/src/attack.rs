//! Black-box optimization of per-mesh blend coefficients: joint
//! finite-difference gradients over mesh batches, clipping, Adam ascent on
//! the true-class cross-entropy, and a loss-triggered learning-rate decay.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy, ClassifierModel};
use crate::error::{Error, Result};
use crate::raytracer::{EffectiveParams, TraceScene};
use crate::render::{PreparedView, RenderOptions};
use crate::scene::{component_mask, partition_batches, random_blend, BlendCoefficients, ScatteringParams, Scene};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_GUARD: f64 = 1e-8;
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Finite-difference step added to α and β.
    pub fd_step: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Number of mesh batches per epoch.
    pub batch_denominator: usize,
    pub clip_bound: f64,
    /// Ascending epoch-loss thresholds; crossing each divides the lr by 10 once.
    pub lr_drop_thresholds: Vec<f64>,
    pub view_azimuths_deg: Vec<f64>,
    pub elevation_deg: f64,
    pub target_class: usize,
    pub seed: u64,
    pub component_restriction: Option<Vec<String>>,
    /// Difference each coefficient separately instead of the whole batch.
    pub per_parameter: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            fd_step: 0.001,
            lr: 0.001,
            epochs: 25,
            batch_denominator: 20,
            clip_bound: 1.0,
            lr_drop_thresholds: vec![2.0, 4.0],
            view_azimuths_deg: (0..36).map(|k| f64::from(k) * 10.0).collect(),
            elevation_deg: 15.0,
            target_class: 0,
            seed: 0,
            component_restriction: None,
            per_parameter: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.fd_step) {
            return Err(Error::config(format!("fd_step must be positive (got {})", self.fd_step)));
        }
        if !positive(self.lr) {
            return Err(Error::config(format!("lr must be positive (got {})", self.lr)));
        }
        if !positive(self.clip_bound) {
            return Err(Error::config(format!("clip_bound must be positive (got {})", self.clip_bound)));
        }
        if self.batch_denominator == 0 {
            return Err(Error::config("batch_denominator must be at least 1"));
        }
        if self.lr_drop_thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("lr_drop_thresholds must be ascending"));
        }
        if self.view_azimuths_deg.is_empty() {
            return Err(Error::config("at least one attack view is required"));
        }
        Ok(())
    }
}

/// Optimizer state; coefficient `2i` is mesh `i`'s α and `2i + 1` its β.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub blend: Vec<BlendCoefficients>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Adam steps taken per coefficient (bias correction is per coefficient).
    pub step_count: Vec<u64>,
    pub loss_history: Vec<f64>,
    pub lr_history: Vec<f64>,
    pub current_lr: f64,
    pub thresholds_consumed: usize,
}

impl AttackState {
    pub fn new(blend: Vec<BlendCoefficients>, lr: f64) -> Self {
        let n = 2 * blend.len();
        AttackState {
            blend,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: vec![0; n],
            loss_history: Vec::new(),
            lr_history: Vec::new(),
            current_lr: lr,
            thresholds_consumed: 0,
        }
    }

    fn coefficient_mut(&mut self, j: usize) -> &mut f64 {
        let b = &mut self.blend[j / 2];
        if j % 2 == 0 {
            &mut b.alpha
        } else {
            &mut b.beta
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSnapshot {
    pub format_version: u32,
    pub scene_hash: String,
    pub config: AttackConfig,
    pub blend: Vec<BlendCoefficients>,
    pub loss_history: Vec<f64>,
    /// Learning rate in effect during each epoch.
    #[serde(default)]
    pub lr_history: Vec<f64>,
}

impl ParameterSnapshot {
    pub fn new(scene: &Scene, config: &AttackConfig, state: &AttackState) -> Self {
        ParameterSnapshot {
            format_version: SNAPSHOT_FORMAT_VERSION,
            scene_hash: scene.fingerprint(),
            config: config.clone(),
            blend: state.blend.clone(),
            loss_history: state.loss_history.clone(),
            lr_history: state.lr_history.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("snapshot", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: ParameterSnapshot =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if snap.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported snapshot format version {}",
                snap.format_version
            )));
        }
        Ok(snap)
    }

    /// Checks that the snapshot belongs to `scene` and returns the scene with
    /// the snapshot's coefficients applied.
    pub fn apply_to(&self, scene: &Scene) -> Result<Scene> {
        if self.scene_hash != scene.fingerprint() {
            return Err(Error::validation("snapshot was optimized for a different scene"));
        }
        if self.blend.len() != scene.len() {
            return Err(Error::validation(format!(
                "snapshot has {} coefficients for {} meshes",
                self.blend.len(),
                scene.len()
            )));
        }
        let mut out = scene.clone();
        out.blend = self.blend.clone();
        out.validate()?;
        Ok(out)
    }

    /// `epoch,avg_loss,lr` rows.
    pub fn write_loss_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "epoch,avg_loss,lr")?;
        for (k, loss) in self.loss_history.iter().enumerate() {
            let lr = self.lr_history.get(k).copied().unwrap_or(f64::NAN);
            writeln!(out, "{},{loss},{lr}", k + 1)?;
        }
        Ok(())
    }
}

/// Mixes object and background coefficients with `α + δ` for `f_s` and
/// `β + δ` for `f_d`, each clamped to `[0, 1]`; `f_r` and `f_b` pass through.
pub fn blend_params(
    object: ScatteringParams,
    background: ScatteringParams,
    coeffs: BlendCoefficients,
    delta: f64,
) -> ScatteringParams {
    let a = (coeffs.alpha + delta).clamp(0.0, 1.0);
    let b = (coeffs.beta + delta).clamp(0.0, 1.0);
    ScatteringParams {
        f_s: (1.0 - a) * object.f_s + a * background.f_s,
        f_d: (1.0 - b) * object.f_d + b * background.f_d,
        f_r: object.f_r,
        f_b: object.f_b,
    }
}

/// Per-mesh adversarial parameters of `scene` under `blend`.
pub fn effective_params(scene: &Scene, blend: &[BlendCoefficients]) -> Vec<ScatteringParams> {
    scene
        .object_params
        .iter()
        .zip(blend)
        .map(|(&obj, &c)| blend_params(obj, scene.background_params, c, 0.0))
        .collect()
}

pub fn clip_gradient(g: f64, epsilon: f64) -> f64 {
    g.max(-epsilon).min(epsilon)
}

/// The attack's objective as a function of the blend coefficients.
pub trait LossOracle: Sync {
    fn loss(&self, blend: &[BlendCoefficients]) -> Result<f64>;
}

impl<F: Fn(&[BlendCoefficients]) -> f64 + Sync> LossOracle for F {
    fn loss(&self, blend: &[BlendCoefficients]) -> Result<f64> {
        Ok(self(blend))
    }
}

/// Mean true-class cross-entropy of the classifier over prepared views.
pub struct SceneObjective<'a> {
    pub scene: &'a Scene,
    pub model: &'a ClassifierModel,
    pub views: Vec<PreparedView>,
    pub target_class: usize,
}

impl<'a> SceneObjective<'a> {
    pub fn new(
        scene: &'a Scene,
        model: &'a ClassifierModel,
        opts: &RenderOptions,
        azimuths: &[f64],
        target_class: usize,
    ) -> Result<Self> {
        if azimuths.is_empty() {
            return Err(Error::config("at least one view is required"));
        }
        if target_class >= model.n_classes {
            return Err(Error::config(format!(
                "target class {target_class} out of range for a {}-class model",
                model.n_classes
            )));
        }
        Ok(SceneObjective {
            scene,
            model,
            views: prepare_views(scene, opts, azimuths)?,
            target_class,
        })
    }

    /// Per-view probabilities under `blend`, in view order.
    pub fn probabilities(&self, blend: &[BlendCoefficients]) -> Result<Vec<Vec<f64>>> {
        view_probabilities(self.scene, self.model, &self.views, blend)
    }
}

impl LossOracle for SceneObjective<'_> {
    fn loss(&self, blend: &[BlendCoefficients]) -> Result<f64> {
        let probs = self.probabilities(blend)?;
        let total: f64 = probs.iter().map(|p| cross_entropy(p, self.target_class)).sum();
        Ok(total / probs.len() as f64)
    }
}

/// Traces every view of `scene` once, in parallel.
pub fn prepare_views(scene: &Scene, opts: &RenderOptions, azimuths: &[f64]) -> Result<Vec<PreparedView>> {
    opts.validate()?;
    let trace = TraceScene::new(scene);
    let reference = EffectiveParams {
        objects: &scene.object_params,
        background: scene.background_params,
    };
    azimuths
        .par_iter()
        .map(|&az| PreparedView::new(&trace, scene, opts, az, reference))
        .collect()
}

pub fn view_probabilities(
    scene: &Scene,
    model: &ClassifierModel,
    views: &[PreparedView],
    blend: &[BlendCoefficients],
) -> Result<Vec<Vec<f64>>> {
    let objects = effective_params(scene, blend);
    let params = EffectiveParams {
        objects: &objects,
        background: scene.background_params,
    };
    views.par_iter().map(|v| model.forward(&v.render(params))).collect()
}

/// Mean loss over the views; the order of summation is fixed so the value
/// does not depend on the worker count.
pub fn average_loss(oracle: &dyn LossOracle, blend: &[BlendCoefficients]) -> Result<f64> {
    oracle.loss(blend)
}

fn perturbed(blend: &[BlendCoefficients], coefficients: &[usize], delta: f64) -> Vec<BlendCoefficients> {
    let mut out = blend.to_vec();
    for &j in coefficients {
        let b = &mut out[j / 2];
        if j % 2 == 0 {
            b.alpha = (b.alpha + delta).clamp(0.0, 1.0);
        } else {
            b.beta = (b.beta + delta).clamp(0.0, 1.0);
        }
    }
    out
}

fn coefficients_of(batch: &[usize]) -> Vec<usize> {
    batch.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect()
}

/// Forward difference of the loss along the batch direction: δ is added to α
/// and β of every mesh in `batch` at once. Returns `(g, loss_before)`.
pub fn estimate_batch_gradient(
    oracle: &dyn LossOracle,
    state: &AttackState,
    batch: &[usize],
    fd_step: f64,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let shifted = perturbed(&state.blend, &coefficients_of(batch), fd_step);
    let (before, now) = rayon::join(|| oracle.loss(&state.blend), || oracle.loss(&shifted));
    let (before, now) = (before?, now?);
    Ok(((now - before) / fd_step, before))
}

/// Separate forward difference for every coefficient of the batch, in
/// coefficient order. Returns `(gradients, loss_before)`.
pub fn estimate_parameter_gradients(
    oracle: &dyn LossOracle,
    state: &AttackState,
    batch: &[usize],
    fd_step: f64,
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let before = oracle.loss(&state.blend)?;
    let grads = coefficients_of(batch)
        .par_iter()
        .map(|&j| Ok((oracle.loss(&perturbed(&state.blend, &[j], fd_step))? - before) / fd_step))
        .collect::<Result<Vec<f64>>>()?;
    Ok((grads, before))
}

/// One Adam ascent step on the listed coefficients with per-coefficient
/// gradients; results are clamped to `[0, 1]`.
pub fn adam_step_coefficients(state: &mut AttackState, coefficients: &[usize], grads: &[f64], lr: f64) {
    for (&j, &g) in coefficients.iter().zip(grads) {
        state.step_count[j] += 1;
        let t = state.step_count[j] as i32;
        state.adam_m[j] = ADAM_BETA1 * state.adam_m[j] + (1.0 - ADAM_BETA1) * g;
        state.adam_v[j] = ADAM_BETA2 * state.adam_v[j] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.adam_m[j] / (1.0 - ADAM_BETA1.powi(t));
        let v_hat = state.adam_v[j] / (1.0 - ADAM_BETA2.powi(t));
        let x = state.coefficient_mut(j);
        *x = (*x + lr * m_hat / (v_hat.sqrt() + ADAM_GUARD)).clamp(0.0, 1.0);
    }
}

/// Adam ascent with the same gradient `g` for α and β of every batch mesh.
pub fn adam_step(state: &mut AttackState, batch: &[usize], g: f64, lr: f64) {
    let coefficients = coefficients_of(batch);
    let grads = vec![g; coefficients.len()];
    adam_step_coefficients(state, &coefficients, &grads, lr);
}

/// Divides the learning rate by 10 for every not-yet-consumed threshold the
/// latest epoch loss exceeds.
pub fn schedule_lr(state: &mut AttackState, thresholds: &[f64]) -> f64 {
    if let Some(&loss) = state.loss_history.last() {
        while state.thresholds_consumed < thresholds.len() && loss > thresholds[state.thresholds_consumed] {
            state.current_lr /= 10.0;
            state.thresholds_consumed += 1;
        }
    }
    state.current_lr
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub avg_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// State after the requested epoch counts of a single run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub state: AttackState,
    pub checkpoints: Vec<(usize, AttackState)>,
}

/// Optimizes the blend coefficients of the meshes in `optimized` (all
/// meshes when `None`). Each epoch walks one fixed seeded batch schedule;
/// the epoch loss is the mean of the batches' pre-step losses. States at
/// the epoch counts in `checkpoints` are returned alongside the final one.
pub fn optimize(
    oracle: &dyn LossOracle,
    initial: Vec<BlendCoefficients>,
    config: &AttackConfig,
    optimized: Option<&[usize]>,
    checkpoints: &[usize],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<AttackOutcome> {
    config.validate()?;
    let mut state = AttackState::new(initial, config.lr);
    let mut saved = Vec::new();
    if checkpoints.contains(&0) {
        saved.push((0, state.clone()));
    }
    let last = checkpoints.iter().copied().max().unwrap_or(0).max(config.epochs);
    if last == 0 {
        return Ok(AttackOutcome { state, checkpoints: saved });
    }
    let all: Vec<usize>;
    let indices = match optimized {
        Some(idx) => idx,
        None => {
            all = (0..state.blend.len()).collect();
            &all
        }
    };
    if indices.is_empty() {
        return Err(Error::validation("no meshes selected for optimization"));
    }
    let m = config.batch_denominator.min(indices.len());
    let schedule = partition_batches(indices.len(), m, config.seed)?;
    let batches: Vec<Vec<usize>> = schedule
        .batches
        .iter()
        .map(|b| b.iter().map(|&k| indices[k]).collect())
        .collect();

    let mut final_state = None;
    for epoch in 1..=last {
        let lr = state.current_lr;
        let mut total = 0.0;
        for batch in &batches {
            let before = if config.per_parameter {
                let (grads, before) = estimate_parameter_gradients(oracle, &state, batch, config.fd_step)?;
                let clipped: Vec<f64> = grads.iter().map(|&g| clip_gradient(g, config.clip_bound)).collect();
                adam_step_coefficients(&mut state, &coefficients_of(batch), &clipped, lr);
                before
            } else {
                let (g, before) = estimate_batch_gradient(oracle, &state, batch, config.fd_step)?;
                adam_step(&mut state, batch, clip_gradient(g, config.clip_bound), lr);
                before
            };
            total += before;
        }
        let avg_loss = total / batches.len() as f64;
        state.loss_history.push(avg_loss);
        state.lr_history.push(lr);
        schedule_lr(&mut state, &config.lr_drop_thresholds);
        progress(&EpochRecord { epoch, avg_loss, lr });
        if checkpoints.contains(&epoch) {
            saved.push((epoch, state.clone()));
        }
        if epoch == config.epochs {
            final_state = Some(state.clone());
        }
    }
    Ok(AttackOutcome {
        state: final_state.unwrap_or(state),
        checkpoints: saved,
    })
}

/// Renders the configured views once and optimizes the scene's blend
/// coefficients against `model`.
pub fn run_attack(
    scene: &Scene,
    model: &ClassifierModel,
    config: &AttackConfig,
    render: &RenderOptions,
    progress: impl FnMut(&EpochRecord),
) -> Result<ParameterSnapshot> {
    Ok(run_attack_with_checkpoints(scene, model, config, render, &[], progress)?.0)
}

/// As [`run_attack`], also returning snapshots at the listed epoch counts.
pub fn run_attack_with_checkpoints(
    scene: &Scene,
    model: &ClassifierModel,
    config: &AttackConfig,
    render: &RenderOptions,
    checkpoints: &[usize],
    progress: impl FnMut(&EpochRecord),
) -> Result<(ParameterSnapshot, Vec<(usize, ParameterSnapshot)>)> {
    config.validate()?;
    scene.validate()?;
    let mut opts = *render;
    opts.elevation_deg = config.elevation_deg;
    let mask = match &config.component_restriction {
        Some(labels) => Some(component_mask(scene, labels)?),
        None => None,
    };
    let objective = SceneObjective::new(scene, model, &opts, &config.view_azimuths_deg, config.target_class)?;
    let outcome = optimize(
        &objective,
        scene.blend.clone(),
        config,
        mask.as_deref(),
        checkpoints,
        progress,
    )?;
    let snapshots = outcome
        .checkpoints
        .iter()
        .map(|(k, s)| {
            let mut c = config.clone();
            c.epochs = *k;
            (*k, ParameterSnapshot::new(scene, &c, s))
        })
        .collect();
    Ok((ParameterSnapshot::new(scene, config, &outcome.state), snapshots))
}

/// Uniform random coefficients in the snapshot format. With a component
/// restriction only the masked meshes are redrawn.
pub fn random_baseline(scene: &Scene, config: &AttackConfig, seed: u64) -> Result<ParameterSnapshot> {
    let draw = random_blend(scene.len(), seed);
    let blend = match &config.component_restriction {
        Some(labels) => {
            let mut blend = scene.blend.clone();
            for i in component_mask(scene, labels)? {
                blend[i] = draw[i];
            }
            blend
        }
        None => draw,
    };
    let mut c = config.clone();
    c.epochs = 0;
    c.seed = seed;
    Ok(ParameterSnapshot {
        format_version: SNAPSHOT_FORMAT_VERSION,
        scene_hash: scene.fingerprint(),
        config: c,
        blend,
        loss_history: Vec::new(),
        lr_history: Vec::new(),
    })
}

/// Snapshot with every coefficient zero: renders the clean scene.
pub fn zero_snapshot(scene: &Scene, config: &AttackConfig) -> ParameterSnapshot {
    let mut c = config.clone();
    c.epochs = 0;
    ParameterSnapshot {
        format_version: SNAPSHOT_FORMAT_VERSION,
        scene_hash: scene.fingerprint(),
        config: c,
        blend: vec![BlendCoefficients::zero(); scene.len()],
        loss_history: Vec::new(),
        lr_history: Vec::new(),
    }
}

pub fn write_loss_csv(snapshot: &ParameterSnapshot, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    snapshot.write_loss_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
