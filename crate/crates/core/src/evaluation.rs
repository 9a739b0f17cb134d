//! Experiment protocols: attack success rate, accuracy before and after,
//! iteration sweeps, per-component ablation, azimuth-group transfer and the
//! cross-model transfer matrix.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, effective_params, AttackConfig, ParameterSnapshot};
use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::raytracer::{EffectiveParams, TraceScene};
use crate::render::{self, RenderOptions};
use crate::scene::{component_mask, BlendCoefficients, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub azimuth_deg: f64,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub true_class: usize,
}

impl ViewRecord {
    pub fn clean_correct(&self) -> bool {
        self.clean_prediction == self.true_class
    }

    pub fn fooled(&self) -> bool {
        self.adversarial_prediction != self.true_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_views: usize,
    pub n_attacked: usize,
    pub n_fooled: usize,
    /// `None` when no view was attacked.
    pub success_rate_percent: Option<f64>,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
}

impl Aggregates {
    pub fn from_records(records: &[ViewRecord], count_all: bool) -> Self {
        let attacked: Vec<&ViewRecord> = records.iter().filter(|r| count_all || r.clean_correct()).collect();
        let n_fooled = attacked.iter().filter(|r| r.fooled()).count();
        let fraction = |k: usize| if records.is_empty() { 0.0 } else { k as f64 / records.len() as f64 };
        Aggregates {
            n_views: records.len(),
            n_attacked: attacked.len(),
            n_fooled,
            success_rate_percent: success_rate(n_fooled, attacked.len()),
            clean_accuracy: fraction(records.iter().filter(|r| r.clean_correct()).count()),
            adversarial_accuracy: fraction(records.iter().filter(|r| !r.fooled()).count()),
        }
    }
}

fn success_rate(fooled: usize, attacked: usize) -> Option<f64> {
    (attacked > 0).then(|| 100.0 * fooled as f64 / attacked as f64)
}

/// `100 · fooled / attacked`. Only views the clean model classifies
/// correctly are attacked unless `count_all` is set; `None` when nothing
/// was attacked.
pub fn attack_success_rate(records: &[ViewRecord], count_all: bool) -> Option<f64> {
    Aggregates::from_records(records, count_all).success_rate_percent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Azimuth group, model pair, component or epoch count.
    pub group: String,
    pub records: Vec<ViewRecord>,
    pub aggregates: Aggregates,
    pub count_all: bool,
}

impl EvalReport {
    pub fn new(group: impl Into<String>, records: Vec<ViewRecord>, count_all: bool) -> Self {
        let aggregates = Aggregates::from_records(&records, count_all);
        EvalReport {
            group: group.into(),
            records,
            aggregates,
            count_all,
        }
    }

    /// Whether the stored aggregates equal a recomputation from the records.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_records(&self.records, self.count_all) == self.aggregates
    }
}

pub fn format_rate(rate: Option<f64>) -> String {
    rate.map_or_else(|| "undefined".to_string(), |r| format!("{r:.2}"))
}

/// Renders the clean and adversarial image of every view and classifies both.
/// Views are independent and evaluated in parallel; records keep view order.
pub struct Evaluator<'a> {
    pub scene: &'a Scene,
    pub render: RenderOptions,
    trace: TraceScene,
}

impl<'a> Evaluator<'a> {
    pub fn new(scene: &'a Scene, render: &RenderOptions) -> Result<Self> {
        render.validate()?;
        scene.validate()?;
        Ok(Evaluator {
            scene,
            render: *render,
            trace: TraceScene::new(scene),
        })
    }

    fn check_snapshot(&self, snapshot: &ParameterSnapshot) -> Result<()> {
        snapshot.apply_to(self.scene).map(|_| ())
    }

    /// Predictions of each model for each blend, per view:
    /// `out[view][blend][model]`.
    pub fn predictions(
        &self,
        azimuths: &[f64],
        blends: &[&[BlendCoefficients]],
        models: &[&ClassifierModel],
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let params: Vec<_> = blends.iter().map(|b| effective_params(self.scene, b)).collect();
        azimuths
            .par_iter()
            .map(|&az| {
                params
                    .iter()
                    .map(|objects| {
                        let eff = EffectiveParams {
                            objects,
                            background: self.scene.background_params,
                        };
                        let image = render::render_image(&self.trace, self.scene, &self.render, az, eff)?;
                        models.iter().map(|m| m.predict(&image)).collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// Clean versus snapshot records over `azimuths`.
    pub fn records(
        &self,
        model: &ClassifierModel,
        snapshot: &ParameterSnapshot,
        azimuths: &[f64],
        true_class: usize,
    ) -> Result<Vec<ViewRecord>> {
        self.check_snapshot(snapshot)?;
        let clean = vec![BlendCoefficients::zero(); self.scene.len()];
        let preds = self.predictions(azimuths, &[&clean, &snapshot.blend], &[model])?;
        Ok(azimuths
            .iter()
            .zip(preds)
            .map(|(&azimuth_deg, p)| ViewRecord {
                azimuth_deg,
                clean_prediction: p[0][0],
                adversarial_prediction: p[1][0],
                true_class,
            })
            .collect())
    }

    pub fn evaluate(
        &self,
        model: &ClassifierModel,
        snapshot: &ParameterSnapshot,
        azimuths: &[f64],
        true_class: usize,
        count_all: bool,
    ) -> Result<EvalReport> {
        let records = self.records(model, snapshot, azimuths, true_class)?;
        Ok(EvalReport::new("all", records, count_all))
    }
}

fn whole_division(total: f64, part: f64, what: &str) -> Result<usize> {
    let k = total / part;
    if !(part > 0.0) || (k - k.round()).abs() > 1e-9 {
        return Err(Error::config(format!("360 is not divisible by the {what} {part}")));
    }
    Ok(k.round() as usize)
}

/// Evaluates the snapshot at every `azimuth_step_deg` around the circle and
/// reports each `group_size_deg`-wide azimuth group separately.
#[allow(clippy::too_many_arguments)]
pub fn cross_view_eval(
    scene: &Scene,
    snapshot: &ParameterSnapshot,
    model: &ClassifierModel,
    render: &RenderOptions,
    elevation_deg: f64,
    azimuth_step_deg: f64,
    group_size_deg: f64,
    true_class: usize,
    count_all: bool,
) -> Result<Vec<EvalReport>> {
    let n_views = whole_division(360.0, azimuth_step_deg, "azimuth step")?;
    let n_groups = whole_division(360.0, group_size_deg, "group size")?;
    let per_group = n_views / n_groups;
    if per_group == 0 || n_views % n_groups != 0 {
        return Err(Error::config("group size must be a multiple of the azimuth step"));
    }
    let mut opts = *render;
    opts.elevation_deg = elevation_deg;
    let azimuths: Vec<f64> = (0..n_views).map(|k| k as f64 * azimuth_step_deg).collect();
    let records = Evaluator::new(scene, &opts)?.records(model, snapshot, &azimuths, true_class)?;
    Ok(records
        .chunks(per_group)
        .enumerate()
        .map(|(g, chunk)| {
            let lo = g as f64 * group_size_deg;
            EvalReport::new(format!("{lo}-{}", lo + group_size_deg), chunk.to_vec(), count_all)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    /// Source models (rows, the snapshot's optimization target).
    pub sources: Vec<String>,
    /// Target models (columns, the evaluated classifier).
    pub targets: Vec<String>,
    /// `rates[i][j]`: success of source `i`'s snapshot on target `j`.
    pub rates: Vec<Vec<Option<f64>>>,
    pub reports: Vec<EvalReport>,
}

/// Success rate of every source snapshot on every target model; snapshots
/// are reused verbatim.
#[allow(clippy::too_many_arguments)]
pub fn cross_model_eval(
    scene: &Scene,
    snapshots: &[(String, ParameterSnapshot)],
    models: &[(String, ClassifierModel)],
    render: &RenderOptions,
    azimuths: &[f64],
    true_class: usize,
    count_all: bool,
) -> Result<TransferMatrix> {
    if snapshots.is_empty() || models.is_empty() {
        return Err(Error::config("cross-model evaluation needs at least one snapshot and one model"));
    }
    let ev = Evaluator::new(scene, render)?;
    for (_, s) in snapshots {
        ev.check_snapshot(s)?;
    }
    let clean = vec![BlendCoefficients::zero(); scene.len()];
    let mut blends: Vec<&[BlendCoefficients]> = vec![&clean];
    blends.extend(snapshots.iter().map(|(_, s)| s.blend.as_slice()));
    let model_refs: Vec<&ClassifierModel> = models.iter().map(|(_, m)| m).collect();
    let preds = ev.predictions(azimuths, &blends, &model_refs)?;
    let mut rates = Vec::new();
    let mut reports = Vec::new();
    for (i, (src, _)) in snapshots.iter().enumerate() {
        let mut row = Vec::new();
        for (j, (dst, _)) in models.iter().enumerate() {
            let records: Vec<ViewRecord> = azimuths
                .iter()
                .zip(&preds)
                .map(|(&azimuth_deg, p)| ViewRecord {
                    azimuth_deg,
                    clean_prediction: p[0][j],
                    adversarial_prediction: p[i + 1][j],
                    true_class,
                })
                .collect();
            let report = EvalReport::new(format!("{src}->{dst}"), records, count_all);
            row.push(report.aggregates.success_rate_percent);
            reports.push(report);
        }
        rates.push(row);
    }
    Ok(TransferMatrix {
        sources: snapshots.iter().map(|(n, _)| n.clone()).collect(),
        targets: models.iter().map(|(n, _)| n.clone()).collect(),
        rates,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub mesh_count: usize,
    pub mesh_share: f64,
    pub area_share: f64,
    pub report: EvalReport,
}

/// One restricted attack per component, each evaluated on the attack views.
pub fn ablation_eval(
    scene: &Scene,
    model: &ClassifierModel,
    config: &AttackConfig,
    render: &RenderOptions,
    components: &[String],
    count_all: bool,
) -> Result<Vec<ComponentResult>> {
    let total_area: f64 = scene.meshes.iter().map(|m| m.area()).sum();
    let mut opts = *render;
    opts.elevation_deg = config.elevation_deg;
    let ev = Evaluator::new(scene, &opts)?;
    let mut out = Vec::new();
    for component in components {
        let mask = component_mask(scene, std::slice::from_ref(component))?;
        if mask.is_empty() {
            return Err(Error::validation(format!("component {component:?} has no meshes")));
        }
        let restricted = AttackConfig {
            component_restriction: Some(vec![component.clone()]),
            ..config.clone()
        };
        let snapshot = attack::run_attack(scene, model, &restricted, &opts, |_| {})?;
        let records = ev.records(model, &snapshot, &config.view_azimuths_deg, config.target_class)?;
        let area: f64 = mask.iter().map(|&i| scene.meshes[i].area()).sum();
        out.push(ComponentResult {
            component: component.clone(),
            mesh_count: mask.len(),
            mesh_share: mask.len() as f64 / scene.len() as f64,
            area_share: area / total_area,
            report: EvalReport::new(component.clone(), records, count_all),
        });
    }
    Ok(out)
}

/// Snapshots at every listed epoch count, taken from a single run of the
/// largest count, each evaluated on the attack views.
pub fn iteration_sweep(
    scene: &Scene,
    model: &ClassifierModel,
    config: &AttackConfig,
    render: &RenderOptions,
    epoch_list: &[usize],
    count_all: bool,
) -> Result<(Vec<EvalReport>, Vec<(usize, ParameterSnapshot)>)> {
    if epoch_list.is_empty() {
        return Err(Error::config("empty epoch list"));
    }
    let longest = AttackConfig {
        epochs: epoch_list.iter().copied().max().unwrap_or(0),
        ..config.clone()
    };
    let mut opts = *render;
    opts.elevation_deg = config.elevation_deg;
    let (_, snapshots) = attack::run_attack_with_checkpoints(scene, model, &longest, &opts, epoch_list, |_| {})?;
    let ev = Evaluator::new(scene, &opts)?;
    let mut reports = Vec::new();
    let mut ordered = Vec::new();
    for &k in epoch_list {
        let (_, snap) = snapshots
            .iter()
            .find(|(e, _)| *e == k)
            .ok_or_else(|| Error::validation(format!("missing checkpoint {k}")))?;
        let records = ev.records(model, snap, &config.view_azimuths_deg, config.target_class)?;
        reports.push(EvalReport::new(k.to_string(), records, count_all));
        ordered.push((k, snap.clone()));
    }
    Ok((reports, ordered))
}

/// Machine-readable protocol output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<TransferMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentResult>,
}

/// SHA-256 of any serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).unwrap_or_default();
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Aligned columns: group, views, attacked, fooled, success, clean and
/// adversarial accuracy.
pub fn reports_table(title: &str, reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>8}  {:>6}  {:>9}  {:>9}  {:>9}",
        "group", "views", "attacked", "fooled", "success%", "clean%", "adv%"
    );
    for r in reports {
        let a = &r.aggregates;
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>8}  {:>6}  {:>9}  {:>9.2}  {:>9.2}",
            r.group,
            a.n_views,
            a.n_attacked,
            a.n_fooled,
            format_rate(a.success_rate_percent),
            100.0 * a.clean_accuracy,
            100.0 * a.adversarial_accuracy
        );
    }
    out
}

pub fn matrix_table(matrix: &TransferMatrix) -> String {
    let width = matrix
        .sources
        .iter()
        .chain(&matrix.targets)
        .map(String::len)
        .max()
        .unwrap_or(9)
        .max(11);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "source\\eval");
    for t in &matrix.targets {
        let _ = write!(out, "  {t:>width$}");
    }
    out.push('\n');
    for (s, row) in matrix.sources.iter().zip(&matrix.rates) {
        let _ = write!(out, "{s:<width$}");
        for r in row {
            let _ = write!(out, "  {:>width$}", format_rate(*r));
        }
        out.push('\n');
    }
    out
}

pub fn components_table(results: &[ComponentResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12}  {:>6}  {:>7}  {:>7}  {:>9}",
        "component", "meshes", "mesh%", "area%", "success%"
    );
    for c in results {
        let _ = writeln!(
            out,
            "{:<12}  {:>6}  {:>7.2}  {:>7.2}  {:>9}",
            c.component,
            c.mesh_count,
            100.0 * c.mesh_share,
            100.0 * c.area_share,
            format_rate(c.report.aggregates.success_rate_percent)
        );
    }
    out
}

/// `group,views,attacked,fooled,success_rate,clean_accuracy,adversarial_accuracy`.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("group,views,attacked,fooled,success_rate,clean_accuracy,adversarial_accuracy\n");
    for r in reports {
        let a = &r.aggregates;
        let rate = a.success_rate_percent.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{rate},{},{}",
            r.group, a.n_views, a.n_attacked, a.n_fooled, a.clean_accuracy, a.adversarial_accuracy
        );
    }
    out
}

pub fn matrix_csv(matrix: &TransferMatrix) -> String {
    let mut out = String::from("source,target,success_rate\n");
    for (s, row) in matrix.sources.iter().zip(&matrix.rates) {
        for (t, r) in matrix.targets.iter().zip(row) {
            let rate = r.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(out, "{s},{t},{rate}");
        }
    }
    out
}

pub fn components_csv(results: &[ComponentResult]) -> String {
    let mut out = String::from("component,meshes,mesh_share,area_share,success_rate\n");
    for c in results {
        let rate = c.report.aggregates.success_rate_percent.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{rate}",
            c.component, c.mesh_count, c.mesh_share, c.area_share
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(attacked: usize, fooled: usize, clean_wrong: usize) -> Vec<ViewRecord> {
        let mut out = Vec::new();
        for k in 0..attacked {
            out.push(ViewRecord {
                azimuth_deg: k as f64,
                clean_prediction: 1,
                adversarial_prediction: if k < fooled { 0 } else { 1 },
                true_class: 1,
            });
        }
        for k in 0..clean_wrong {
            out.push(ViewRecord {
                azimuth_deg: (attacked + k) as f64,
                clean_prediction: 2,
                adversarial_prediction: 2,
                true_class: 1,
            });
        }
        out
    }

    #[test]
    fn success_rate_examples() {
        let r = attack_success_rate(&records(36, 35, 0), false).unwrap();
        assert!((r - 97.22).abs() < 0.005, "{r}");
        assert_eq!(attack_success_rate(&records(36, 18, 0), false), Some(50.0));
        assert_eq!(attack_success_rate(&records(36, 0, 0), false), Some(0.0));
        assert_eq!(attack_success_rate(&records(0, 0, 4), false), None);
        // Clean errors are excluded by default and counted as fooled otherwise.
        assert_eq!(attack_success_rate(&records(10, 5, 10), false), Some(50.0));
        assert_eq!(attack_success_rate(&records(10, 5, 10), true), Some(75.0));
    }

    #[test]
    fn aggregates_recompute() {
        let report = EvalReport::new("g", records(12, 7, 3), false);
        assert!(report.is_consistent());
        assert_eq!(report.aggregates.n_attacked, 12);
        assert!((report.aggregates.clean_accuracy - 0.8).abs() < 1e-12);
        assert!((report.aggregates.adversarial_accuracy - 5.0 / 15.0).abs() < 1e-12);
        let mut tampered = report.clone();
        tampered.aggregates.n_fooled += 1;
        assert!(!tampered.is_consistent());
        assert_eq!(format_rate(None), "undefined");
    }

    #[test]
    fn tables_have_one_row_per_report() {
        let reports: Vec<EvalReport> = (0..6).map(|g| EvalReport::new(format!("g{g}"), records(5, g % 5, 0), false)).collect();
        assert_eq!(reports_table("t", &reports).lines().count(), 8);
        assert_eq!(reports_csv(&reports).lines().count(), 7);
    }
}
