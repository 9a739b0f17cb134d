//! Subcommand implementations. Each resolves its settings, writes
//! `run_config.json` into its output location, then does the work.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sfp_core::attack::{self, AttackConfig, ParameterSnapshot};
use sfp_core::classifier::{self, ArchitectureId, ClassifierModel, TrainConfig};
use sfp_core::evaluation::{self, EvalReport, Evaluator, ProtocolReport};
use sfp_core::imaging;
use sfp_core::raytracer::{self, EffectiveParams, TraceScene};
use sfp_core::scene::{load_scene, Scene};
use sfp_core::targets::{self, DatasetConfig, DatasetManifest, TargetSpec};
use sfp_core::{Error, Result};

use crate::config::{resolve, Resolved};
use crate::settings::*;
use crate::GlobalFlags;

fn setup<S>(command: &str, file: Option<&Path>, flags: &impl Serialize, global: &GlobalFlags) -> Result<Resolved<S>>
where
    S: Default + Serialize + DeserializeOwned,
{
    let resolved: Resolved<S> = resolve(command, file, flags, global)?;
    // A second initialization (only possible in-process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(resolved.common.workers)
        .build_global();
    Ok(resolved)
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::config(format!("--{flag} is required")))
}

fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let numbers: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("invalid sweep {text:?}; expected start:stop:step")))?;
    match numbers.as_slice() {
        [start, stop, step] => targets::azimuth_sweep(*start, *stop, *step),
        _ => Err(Error::config(format!("invalid sweep {text:?}; expected start:stop:step"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    write_text(path, &(text + "\n"))
}

/// Built-in targets or every `*.json` spec in `dir`, optionally filtered.
fn target_specs(settings: &TargetsSettings) -> Result<Vec<TargetSpec>> {
    let mut specs = match &settings.targets {
        None => targets::default_targets(),
        Some(dir) => {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            paths.iter().map(|p| TargetSpec::load(p)).collect::<Result<_>>()?
        }
    };
    if let Some(wanted) = &settings.classes {
        for w in wanted {
            if !specs.iter().any(|s| &s.class_id == w) {
                let known: Vec<&str> = specs.iter().map(|s| s.class_id.as_str()).collect();
                return Err(Error::config(format!("unknown class {w:?}; known: {}", known.join(", "))));
            }
        }
        specs.retain(|s| wanted.contains(&s.class_id));
    }
    if specs.is_empty() {
        return Err(Error::config("no target specifications selected"));
    }
    Ok(specs)
}

fn build_scenes(settings: &TargetsSettings, blend_seed: u64) -> Result<Vec<(String, Scene)>> {
    target_specs(settings)?
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let scene = targets::build_scene(
                spec,
                settings.tessellation,
                settings.ground_extent,
                blend_seed.wrapping_add(i as u64),
            )?;
            Ok((spec.class_id.clone(), scene))
        })
        .collect()
}

pub fn gen_targets(file: Option<&Path>, flags: &TargetsFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<TargetsSettings> = setup("gen-targets", file, flags, global)?;
    let out = &run.common.out;
    run.write_record("gen-targets", out)?;
    let specs = target_specs(&run.settings)?;
    let scenes = build_scenes(&run.settings, run.seeds.blend)?;
    for (spec, (name, scene)) in specs.iter().zip(&scenes) {
        let spec_path = out.join("targets").join(format!("{name}.json"));
        write_json(&spec_path, spec)?;
        let scene_path = out.join("scenes").join(format!("{name}.json"));
        if let Some(parent) = scene_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        scene.save(&scene_path)?;
        println!("{name}: {} triangles, components {}", scene.len(), scene.components.join(","));
    }
    Ok(())
}

pub fn gen_dataset(file: Option<&Path>, flags: &DatasetFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<DatasetSettings> = setup("gen-dataset", file, flags, global)?;
    let s = &run.settings;
    let out = &run.common.out;
    run.write_record("gen-dataset", out)?;
    let scenes = build_scenes(&s.targets, run.seeds.blend)?;
    let config = DatasetConfig {
        azimuths: parse_sweep(&s.azimuth_sweep)?,
        render: s.render.options(1.0, run.seeds.speckle),
        cap_percentile: s.cap_percentile,
        train_fraction: s.train_fraction,
        split_seed: run.seeds.split,
    };
    if !(0.0..=100.0).contains(&config.cap_percentile) || !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::config("cap-percentile must be in [0, 100] and train-fraction in [0, 1]"));
    }
    let (dataset, manifest) = targets::generate_dataset(&scenes, &config)?;
    targets::write_dataset(out, &scenes, &dataset, &manifest)?;
    let n_train = dataset.indices(classifier::Split::Train).len();
    println!(
        "{} images ({} train / {} test) for {} classes; scale cap {}",
        dataset.images.len(),
        n_train,
        dataset.images.len() - n_train,
        manifest.class_names.len(),
        manifest.render.scale_cap
    );
    Ok(())
}

pub fn simulate(file: Option<&Path>, flags: &SimulateFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<SimulateSettings> = setup("simulate", file, flags, global)?;
    let s = &run.settings;
    let azimuths = match (&s.azimuth, &s.azimuth_sweep) {
        (Some(a), None) => vec![*a],
        (None, Some(sweep)) => parse_sweep(sweep)?,
        _ => return Err(Error::config("give exactly one of --azimuth and --azimuth-sweep")),
    };
    let out = &run.common.out;
    let single_file = azimuths.len() == 1 && out.extension().is_some_and(|e| e == "pgm");
    let record_dir = if single_file {
        out.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        out.clone()
    };
    run.write_record("simulate", &record_dir)?;

    let scene = load_scene(required(&s.scene, "scene")?, run.seeds.blend)?;
    let mut opts = match &s.dataset {
        Some(dir) => DatasetManifest::load(dir)?.render,
        None => s.render.options(s.scale_cap, run.seeds.speckle),
    };
    opts.elevation_deg = s.render.elevation;
    opts.validate()?;
    let blend = match (&s.snapshot, s.apply_scene_blend) {
        (Some(path), _) => Some(ParameterSnapshot::load(path)?.apply_to(&scene)?.blend),
        (None, true) => Some(scene.blend.clone()),
        (None, false) => None,
    };
    let objects = match &blend {
        Some(b) => attack::effective_params(&scene, b),
        None => scene.object_params.clone(),
    };
    let params = EffectiveParams {
        objects: &objects,
        background: scene.background_params,
    };
    let trace = TraceScene::new(&scene);
    eprintln!("azimuth,dropped,dropped_intensity");
    for &az in &azimuths {
        let path = if single_file {
            out.clone()
        } else {
            out.join(format!("{az:06.2}.pgm"))
        };
        let sensor = opts.sensor(&scene, az);
        let echoes = raytracer::render_echoes(&trace, &sensor, params, opts.max_bounces);
        let (raw, stats) = imaging::focus(&echoes, &opts.grid(&scene)?);
        let speckled = imaging::add_speckle(&raw, opts.speckle_seed(az), opts.speckle);
        let image = imaging::normalize(&speckled, opts.scale_cap)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        imaging::write_image(&image, &path)?;
        if s.echo_csv {
            let csv_path = path.with_extension("echoes.csv");
            let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            raytracer::write_echo_csv(&echoes, std::io::BufWriter::new(f)).map_err(|e| Error::io(&csv_path, e))?;
        }
        eprintln!("{az},{},{}", stats.dropped, stats.dropped_intensity);
    }
    println!("wrote {} image(s)", azimuths.len());
    Ok(())
}

pub fn train(file: Option<&Path>, flags: &TrainFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<TrainSettings> = setup("train", file, flags, global)?;
    let s = &run.settings;
    let architecture: ArchitectureId = s.architecture.parse()?;
    let out = &run.common.out;
    run.write_record("train", out)?;
    let (dataset, _) = targets::read_dataset(required(&s.dataset, "dataset")?)?;
    let config = TrainConfig {
        architecture,
        seed: run.seeds.init,
        epochs: s.epochs,
        lr: s.lr.unwrap_or_else(|| classifier::default_lr(architecture)),
        batch_size: s.batch_size,
    };
    let (model, report) = classifier::train(&dataset, &config)?;
    classifier::save_model(&model, &out.join("model.sfpm"))?;
    write_json(&out.join("train_report.json"), &report)?;
    println!(
        "{}: {} parameters; train accuracy {:.2}%, test accuracy {:.2}%",
        architecture,
        model.parameter_count(),
        100.0 * report.train_accuracy,
        100.0 * report.test_accuracy
    );
    Ok(())
}

/// Scene, class index and render settings an attack or evaluation runs on.
struct Target {
    manifest: DatasetManifest,
    scene: Scene,
    class_index: usize,
}

fn load_target(t: &TargetSettings, blend_seed: u64) -> Result<Target> {
    let dir = required(&t.dataset, "dataset")?;
    let manifest = DatasetManifest::load(dir)?;
    let class_index = match &t.class {
        None => 0,
        Some(name) => manifest.class_names.iter().position(|c| c == name).ok_or_else(|| {
            Error::config(format!(
                "unknown class {name:?}; dataset classes: {}",
                manifest.class_names.join(", ")
            ))
        })?,
    };
    let scene_path = match &t.scene {
        Some(p) => p.clone(),
        None => dir.join(&manifest.scenes[class_index]),
    };
    let scene = load_scene(&scene_path, blend_seed)?;
    Ok(Target {
        manifest,
        scene,
        class_index,
    })
}

fn load_model_for(path: &Path, manifest: &DatasetManifest) -> Result<ClassifierModel> {
    let model = classifier::load_model(path)?;
    if model.n_classes != manifest.class_names.len() {
        return Err(Error::validation(format!(
            "{}: model has {} classes, dataset has {}",
            path.display(),
            model.n_classes,
            manifest.class_names.len()
        )));
    }
    Ok(model)
}

fn attack_config(o: &OptimizerSettings, target_class: usize, seed: u64) -> Result<AttackConfig> {
    let config = AttackConfig {
        fd_step: o.fd_step,
        lr: o.lr,
        epochs: o.epochs,
        batch_denominator: o.batch_denominator,
        clip_bound: o.clip_bound,
        lr_drop_thresholds: o.lr_thresholds.clone(),
        view_azimuths_deg: parse_sweep(&o.views)?,
        elevation_deg: o.elevation,
        target_class,
        seed,
        component_restriction: o.components.clone(),
        per_parameter: o.per_parameter,
    };
    config.validate()?;
    Ok(config)
}

pub fn attack(file: Option<&Path>, flags: &AttackFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<AttackSettings> = setup("attack", file, flags, global)?;
    let s = &run.settings;
    let out = &run.common.out;
    run.write_record("attack", out)?;
    let target = load_target(&s.target, run.seeds.blend)?;
    let config = attack_config(&s.optimizer, target.class_index, run.seeds.batches)?;
    let snapshot = match s.baseline {
        Some(Baseline::Random) => attack::random_baseline(&target.scene, &config, run.seeds.baseline)?,
        None => {
            let model = load_model_for(required(&s.model, "model")?, &target.manifest)?;
            println!("epoch,avg_loss,lr");
            attack::run_attack(&target.scene, &model, &config, &target.manifest.render, |r| {
                println!("{},{},{}", r.epoch, r.avg_loss, r.lr)
            })?
        }
    };
    snapshot.save(&out.join("snapshot.json"))?;
    attack::write_loss_csv(&snapshot, &out.join("loss.csv"))?;
    Ok(())
}

fn named_paths(entries: &[String], flag: &str) -> Result<Vec<(String, PathBuf)>> {
    entries
        .iter()
        .map(|e| {
            e.split_once('=')
                .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
                .ok_or_else(|| Error::config(format!("--{flag} entries must be name=path, got {e:?}")))
        })
        .collect()
}

pub fn eval(file: Option<&Path>, flags: &EvalFlags, global: &GlobalFlags) -> Result<()> {
    let run: Resolved<EvalSettings> = setup("eval", file, flags, global)?;
    let s = &run.settings;
    let protocol = *required(&s.protocol, "protocol (success, cross-view, cross-model, ablation, sweep)")?;
    let out = &run.common.out;
    run.write_record("eval", out)?;
    let target = load_target(&s.target, run.seeds.blend)?;
    let config = attack_config(&s.optimizer, target.class_index, run.seeds.batches)?;
    let scene = &target.scene;
    let mut opts = target.manifest.render;
    opts.elevation_deg = config.elevation_deg;
    let class = target.class_index;
    let mut report = ProtocolReport {
        protocol: protocol.name().to_string(),
        config_hash: evaluation::config_hash(&run.record("eval")),
        reports: Vec::new(),
        matrix: None,
        components: Vec::new(),
    };
    let (table, csv_name, csv) = match protocol {
        Protocol::Success => {
            let model = load_model_for(required(&s.model, "model")?, &target.manifest)?;
            let snapshot = ParameterSnapshot::load(required(&s.snapshot, "snapshot")?)?;
            let r = Evaluator::new(scene, &opts)?.evaluate(&model, &snapshot, &config.view_azimuths_deg, class, s.count_all)?;
            report.reports.push(r);
            (
                evaluation::reports_table("attack success", &report.reports),
                "table1.csv",
                evaluation::reports_csv(&report.reports),
            )
        }
        Protocol::CrossView => {
            let model = load_model_for(required(&s.model, "model")?, &target.manifest)?;
            let snapshot = ParameterSnapshot::load(required(&s.snapshot, "snapshot")?)?;
            report.reports = evaluation::cross_view_eval(
                scene,
                &snapshot,
                &model,
                &opts,
                config.elevation_deg,
                s.step,
                s.group,
                class,
                s.count_all,
            )?;
            (
                evaluation::reports_table("success by azimuth group", &report.reports),
                "fig8.csv",
                evaluation::reports_csv(&report.reports),
            )
        }
        Protocol::CrossModel => {
            let models = named_paths(required(&s.models, "models")?, "models")?
                .into_iter()
                .map(|(n, p)| Ok((n, load_model_for(&p, &target.manifest)?)))
                .collect::<Result<Vec<_>>>()?;
            let snapshots = named_paths(required(&s.snapshots, "snapshots")?, "snapshots")?
                .into_iter()
                .map(|(n, p)| Ok((n, ParameterSnapshot::load(&p)?)))
                .collect::<Result<Vec<_>>>()?;
            let matrix = evaluation::cross_model_eval(
                scene,
                &snapshots,
                &models,
                &opts,
                &config.view_azimuths_deg,
                class,
                s.count_all,
            )?;
            let table = evaluation::matrix_table(&matrix);
            let csv = evaluation::matrix_csv(&matrix);
            report.reports = matrix.reports.clone();
            report.matrix = Some(matrix);
            (table, "fig9.csv", csv)
        }
        Protocol::Ablation => {
            let model = load_model_for(required(&s.model, "model")?, &target.manifest)?;
            let components = config.component_restriction.clone().unwrap_or_else(|| scene.components.clone());
            let unrestricted = AttackConfig {
                component_restriction: None,
                ..config.clone()
            };
            report.components =
                evaluation::ablation_eval(scene, &model, &unrestricted, &opts, &components, s.count_all)?;
            report.reports = report.components.iter().map(|c| c.report.clone()).collect();
            (
                evaluation::components_table(&report.components),
                "fig7.csv",
                evaluation::components_csv(&report.components),
            )
        }
        Protocol::Sweep => {
            let model = load_model_for(required(&s.model, "model")?, &target.manifest)?;
            let (reports, _) = evaluation::iteration_sweep(scene, &model, &config, &opts, &s.epoch_list, s.count_all)?;
            report.reports = reports;
            (
                evaluation::reports_table("success by epoch count", &report.reports),
                "table2.csv",
                evaluation::reports_csv(&report.reports),
            )
        }
    };
    debug_assert!(report.reports.iter().all(EvalReport::is_consistent));
    write_json(&out.join(format!("{}.json", protocol.name())), &report)?;
    write_text(&out.join(format!("{}.txt", protocol.name())), &table)?;
    write_text(&out.join(csv_name), &csv)?;
    print!("{table}");
    Ok(())
}
