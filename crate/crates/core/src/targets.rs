//! Procedural vehicle-like targets built from boxes, wedges and cylinders,
//! and rendering of labeled datasets over azimuth sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{Triangle, Vec3};
use crate::imaging::{self, SarImage};
use crate::raytracer::{EffectiveParams, TraceScene};
use crate::render::{self, RenderOptions};
use crate::scene::{random_blend, Mesh, ScatteringParams, Scene};

pub const MIN_MESHES: usize = 500;
pub const MAX_MESHES: usize = 20_000;
pub const DEFAULT_TESSELLATION: u32 = 2;
pub const DEFAULT_GROUND_EXTENT: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrimitiveShape {
    /// Axis-aligned box with full edge lengths `[x, y, z]`.
    Box { size: [f64; 3] },
    /// Box footprint whose top face slopes from full height at `-x` down to
    /// the bottom edge at `+x`.
    Wedge { size: [f64; 3] },
    /// Prism with a regular polygon cross-section.
    Cylinder {
        radius: f64,
        length: f64,
        segments: usize,
        axis: Axis,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    pub component: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub class_id: String,
    pub primitives: Vec<Primitive>,
    pub component_params: BTreeMap<String, ScatteringParams>,
}

impl TargetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("target spec", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Level-0 faces of a primitive in its local frame, each a convex polygon.
fn faces(shape: &PrimitiveShape) -> Result<Vec<Vec<Vec3>>> {
    let positive = |x: f64| x > 0.0 && x.is_finite();
    match shape {
        PrimitiveShape::Box { size } | PrimitiveShape::Wedge { size } => {
            if !size.iter().all(|&s| positive(s)) {
                return Err(Error::validation(format!("degenerate primitive size {size:?}")));
            }
            let [hx, hy, hz] = size.map(|s| s / 2.0);
            let c = |x: f64, y: f64, z: f64| Vec3::new(x * hx, y * hy, z * hz);
            if matches!(shape, PrimitiveShape::Box { .. }) {
                Ok(vec![
                    vec![c(-1., -1., -1.), c(1., -1., -1.), c(1., 1., -1.), c(-1., 1., -1.)],
                    vec![c(-1., -1., 1.), c(1., -1., 1.), c(1., 1., 1.), c(-1., 1., 1.)],
                    vec![c(-1., -1., -1.), c(1., -1., -1.), c(1., -1., 1.), c(-1., -1., 1.)],
                    vec![c(-1., 1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(-1., 1., 1.)],
                    vec![c(-1., -1., -1.), c(-1., 1., -1.), c(-1., 1., 1.), c(-1., -1., 1.)],
                    vec![c(1., -1., -1.), c(1., 1., -1.), c(1., 1., 1.), c(1., -1., 1.)],
                ])
            } else {
                Ok(vec![
                    vec![c(-1., -1., -1.), c(1., -1., -1.), c(1., 1., -1.), c(-1., 1., -1.)],
                    vec![c(-1., -1., -1.), c(-1., 1., -1.), c(-1., 1., 1.), c(-1., -1., 1.)],
                    vec![c(-1., -1., 1.), c(-1., 1., 1.), c(1., 1., -1.), c(1., -1., -1.)],
                    vec![c(-1., -1., -1.), c(1., -1., -1.), c(-1., -1., 1.)],
                    vec![c(-1., 1., -1.), c(1., 1., -1.), c(-1., 1., 1.)],
                ])
            }
        }
        PrimitiveShape::Cylinder {
            radius,
            length,
            segments,
            axis,
        } => {
            if !positive(*radius) || !positive(*length) || *segments < 3 {
                return Err(Error::validation(format!(
                    "degenerate cylinder (radius {radius}, length {length}, {segments} segments)"
                )));
            }
            let h = length / 2.0;
            let point = |k: usize, s: f64| {
                let t = std::f64::consts::TAU * k as f64 / *segments as f64;
                let (a, b) = (radius * t.cos(), radius * t.sin());
                match axis {
                    Axis::Z => Vec3::new(a, b, s * h),
                    Axis::X => Vec3::new(s * h, a, b),
                }
            };
            let mut out: Vec<Vec<Vec3>> = (0..*segments)
                .map(|k| {
                    let k1 = (k + 1) % segments;
                    vec![point(k, -1.0), point(k1, -1.0), point(k1, 1.0), point(k, 1.0)]
                })
                .collect();
            out.push((0..*segments).map(|k| point(k, -1.0)).collect());
            out.push((0..*segments).map(|k| point(k, 1.0)).collect());
            Ok(out)
        }
    }
}

fn subdivide(t: &Triangle, level: u32, out: &mut Vec<Triangle>) {
    if level == 0 {
        out.push(*t);
        return;
    }
    let [a, b, c] = t.v;
    let ab = (a + b) / 2.0;
    let bc = (b + c) / 2.0;
    let ca = (c + a) / 2.0;
    for child in [
        Triangle::new(a, ab, ca),
        Triangle::new(ab, b, bc),
        Triangle::new(ca, bc, c),
        Triangle::new(ab, bc, ca),
    ] {
        subdivide(&child, level - 1, out);
    }
}

/// Level-0 triangles of one primitive in world coordinates, wound outward.
fn primitive_triangles(p: &Primitive) -> Result<Vec<Triangle>> {
    let (s, c) = p.yaw_deg.to_radians().sin_cos();
    let center = v(p.center);
    let place = |q: &Vec3| Vec3::new(c * q.x - s * q.y, s * q.x + c * q.y, q.z) + center;
    let mut out = Vec::new();
    for face in faces(&p.shape)? {
        // Fan triangulation of a convex face, oriented away from the center.
        let pts: Vec<Vec3> = face.iter().map(place).collect();
        let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
        for k in 1..pts.len() - 1 {
            let mut t = Triangle::new(pts[0], pts[k], pts[k + 1]);
            let n = (t.v[1] - t.v[0]).cross(&(t.v[2] - t.v[0]));
            if n.dot(&(centroid - center)) < 0.0 {
                t = Triangle::new(pts[0], pts[k + 1], pts[k]);
            }
            out.push(t);
        }
    }
    Ok(out)
}

/// Tessellates every primitive; each level multiplies the triangle count by
/// four without changing the surface.
pub fn generate_target(spec: &TargetSpec, tessellation_level: u32) -> Result<Scene> {
    let mut meshes = Vec::new();
    let mut object_params = Vec::new();
    let mut components: Vec<String> = Vec::new();
    for prim in &spec.primitives {
        let params = *spec.component_params.get(&prim.component).ok_or_else(|| {
            Error::validation(format!(
                "{}: no scattering parameters for component {:?}",
                spec.class_id, prim.component
            ))
        })?;
        params
            .validate()
            .map_err(|e| Error::validation(format!("{}/{}: {e}", spec.class_id, prim.component)))?;
        if !components.contains(&prim.component) {
            components.push(prim.component.clone());
        }
        let mut tris = Vec::new();
        for t in primitive_triangles(prim)? {
            subdivide(&t, tessellation_level, &mut tris);
        }
        for t in tris {
            let id = meshes.len() as u64;
            meshes.push(Mesh::from_winding(id, t.v, prim.component.clone())?);
            object_params.push(params);
        }
    }
    let n = meshes.len();
    Ok(Scene {
        meshes,
        object_params,
        background_params: default_background(),
        blend: vec![Default::default(); n],
        ground_extent: 0.0,
        components,
    })
}

pub fn default_background() -> ScatteringParams {
    ScatteringParams::new(0.1, 0.15, 1.0, 1.0)
}

/// Target plus ground, with seeded initial blend coefficients.
pub fn build_scene(spec: &TargetSpec, tessellation_level: u32, ground_extent: f64, blend_seed: u64) -> Result<Scene> {
    let mut scene = generate_target(spec, tessellation_level)?;
    scene.ground_extent = ground_extent;
    scene.blend = random_blend(scene.len(), blend_seed);
    scene.validate()?;
    Ok(scene)
}

fn prim(shape: PrimitiveShape, center: [f64; 3], component: &str) -> Primitive {
    Primitive {
        shape,
        center,
        yaw_deg: 0.0,
        component: component.into(),
    }
}

fn boxed(size: [f64; 3]) -> PrimitiveShape {
    PrimitiveShape::Box { size }
}

/// Tank-like composite with the six-part component taxonomy.
pub fn boxtank() -> TargetSpec {
    let params = |f_s, f_d| ScatteringParams::new(f_s, f_d, 0.3, 1.0);
    TargetSpec {
        class_id: "boxtank".into(),
        primitives: vec![
            prim(boxed([6.0, 2.4, 0.9]), [0.0, 0.0, 1.15], "body"),
            prim(PrimitiveShape::Wedge { size: [1.2, 2.4, 0.9] }, [3.6, 0.0, 1.15], "head_armor"),
            prim(boxed([5.0, 0.1, 0.6]), [0.0, 1.75, 1.0], "side_skirts"),
            prim(boxed([5.0, 0.1, 0.6]), [0.0, -1.75, 1.0], "side_skirts"),
            prim(boxed([2.6, 2.2, 0.8]), [-0.3, 0.0, 2.0], "turret"),
            prim(
                PrimitiveShape::Cylinder {
                    radius: 0.12,
                    length: 3.5,
                    segments: 8,
                    axis: Axis::X,
                },
                [2.7, 0.0, 2.05],
                "barrel",
            ),
            prim(boxed([6.4, 0.7, 0.7]), [0.0, 1.35, 0.35], "track"),
            prim(boxed([6.4, 0.7, 0.7]), [0.0, -1.35, 0.35], "track"),
        ],
        component_params: [
            ("body", params(0.6, 0.7)),
            ("head_armor", params(0.7, 0.8)),
            ("side_skirts", params(0.5, 0.6)),
            ("turret", params(0.6, 0.7)),
            ("barrel", params(0.8, 0.5)),
            ("track", params(0.4, 0.5)),
        ]
        .into_iter()
        .map(|(k, p)| (k.to_string(), p))
        .collect(),
    }
}

/// Low hull under a stepped dome; the outlier silhouette.
pub fn dome() -> TargetSpec {
    let cyl = |radius: f64| PrimitiveShape::Cylinder {
        radius,
        length: 0.4,
        segments: 12,
        axis: Axis::Z,
    };
    TargetSpec {
        class_id: "dome".into(),
        primitives: vec![
            prim(boxed([5.0, 3.0, 1.0]), [0.0, 0.0, 0.5], "body"),
            prim(cyl(1.5), [0.0, 0.0, 1.2], "dome"),
            prim(cyl(1.2), [0.0, 0.0, 1.6], "dome"),
            prim(cyl(0.8), [0.0, 0.0, 2.0], "dome"),
            prim(cyl(0.4), [0.0, 0.0, 2.4], "dome"),
        ],
        component_params: [
            ("body", ScatteringParams::new(0.6, 0.7, 0.3, 1.0)),
            ("dome", ScatteringParams::new(0.7, 0.8, 0.3, 1.0)),
        ]
        .into_iter()
        .map(|(k, p)| (k.to_string(), p))
        .collect(),
    }
}

/// Open frame on four legs with a low payload block.
pub fn gantry() -> TargetSpec {
    let mut primitives = Vec::new();
    for (x, y) in [(2.2, 1.4), (2.2, -1.4), (-2.2, 1.4), (-2.2, -1.4)] {
        primitives.push(prim(boxed([0.4, 0.4, 2.6]), [x, y, 1.3], "legs"));
    }
    for y in [1.4, -1.4] {
        primitives.push(prim(boxed([5.2, 0.4, 0.4]), [0.0, y, 2.8], "beams"));
    }
    for x in [2.2, -2.2] {
        primitives.push(prim(boxed([0.4, 3.2, 0.4]), [x, 0.0, 2.8], "beams"));
    }
    primitives.push(prim(boxed([1.6, 1.6, 1.0]), [0.0, 0.0, 0.5], "payload"));
    TargetSpec {
        class_id: "gantry".into(),
        primitives,
        component_params: [
            ("legs", ScatteringParams::new(0.6, 0.7, 0.3, 1.0)),
            ("beams", ScatteringParams::new(0.7, 0.7, 0.3, 1.0)),
            ("payload", ScatteringParams::new(0.5, 0.6, 0.3, 1.0)),
        ]
        .into_iter()
        .map(|(k, p)| (k.to_string(), p))
        .collect(),
    }
}

pub fn default_targets() -> Vec<TargetSpec> {
    vec![boxtank(), dome(), gantry()]
}

/// Azimuths `start, start + step, ...` below `stop`.
pub fn azimuth_sweep(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop > start) {
        return Err(Error::config(format!("invalid azimuth sweep {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step - 1e-9).ceil() as usize;
    Ok((0..n).map(|k| start + k as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub class_label: usize,
    pub class_name: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    /// Scene file per class, relative to the dataset directory.
    pub scenes: Vec<PathBuf>,
    pub render: RenderOptions,
    pub split_seed: u64,
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub azimuths: Vec<f64>,
    pub render: RenderOptions,
    /// Percentile of the nonzero training-pixel intensities mapped to full scale.
    pub cap_percentile: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl DatasetConfig {
    pub fn new(azimuths: Vec<f64>, render: RenderOptions, split_seed: u64) -> Self {
        DatasetConfig {
            azimuths,
            render,
            cap_percentile: 99.5,
            train_fraction: 0.7,
            split_seed,
        }
    }
}

/// Linear-interpolated percentile of `values` (`pct` in `[0, 100]`).
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Stratified seeded split: per class, `round(train_fraction * n)` samples
/// go to training.
pub fn stratified_split(labels: &[usize], n_classes: usize, train_fraction: f64, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![Split::Test; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_train] {
            split[i] = Split::Train;
        }
    }
    split
}

/// Renders every scene at every azimuth with zero blend (clean parameters),
/// freezes the normalization cap from the training split and splits 7:3
/// per class. Pixels are quantized to the 16-bit file precision so the
/// in-memory dataset matches what is written to disk.
pub fn generate_dataset(
    scenes: &[(String, Scene)],
    config: &DatasetConfig,
) -> Result<(LabeledDataset, DatasetManifest)> {
    if scenes.len() < 2 {
        return Err(Error::validation("a dataset needs at least 2 classes"));
    }
    if config.azimuths.is_empty() {
        return Err(Error::config("empty azimuth sweep"));
    }
    let mut render_opts = config.render;
    render_opts.validate()?;
    let jobs: Vec<(usize, f64)> = (0..scenes.len())
        .flat_map(|c| config.azimuths.iter().map(move |&a| (c, a)))
        .collect();
    let traces: Vec<TraceScene> = scenes.iter().map(|(_, s)| TraceScene::new(s)).collect();
    let raw: Vec<SarImage> = jobs
        .par_iter()
        .map(|&(c, az)| {
            let scene = &scenes[c].1;
            let eff = EffectiveParams {
                objects: &scene.object_params,
                background: scene.background_params,
            };
            render::render_speckled(&traces[c], scene, &render_opts, az, eff).map(|r| r.0)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = jobs.iter().map(|j| j.0).collect();
    let split = stratified_split(&labels, scenes.len(), config.train_fraction, config.split_seed);

    let mut train_pixels: Vec<f64> = raw
        .iter()
        .zip(&split)
        .filter(|(_, s)| **s == Split::Train)
        .flat_map(|(img, _)| img.pixels.iter().copied().filter(|&p| p > 0.0))
        .collect();
    let cap = percentile(&mut train_pixels, config.cap_percentile);
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::validation("training images are empty; cannot set a normalization cap"));
    }
    render_opts.scale_cap = cap;

    let mut images = Vec::with_capacity(raw.len());
    let mut entries = Vec::with_capacity(raw.len());
    for (k, img) in raw.iter().enumerate() {
        let (c, az) = jobs[k];
        let normalized = imaging::normalize(img, cap)?;
        images.push(quantize(&normalized));
        entries.push(ManifestEntry {
            path: image_path(&scenes[c].0, az),
            class_label: c,
            class_name: scenes[c].0.clone(),
            azimuth_deg: az,
            elevation_deg: render_opts.elevation_deg,
            seed: render_opts.speckle_seed(az),
            split: split[k],
        });
    }
    let class_names: Vec<String> = scenes.iter().map(|(n, _)| n.clone()).collect();
    let manifest = DatasetManifest {
        format_version: 1,
        scenes: class_names.iter().map(|n| PathBuf::from(format!("scenes/{n}.json"))).collect(),
        class_names: class_names.clone(),
        render: render_opts,
        split_seed: config.split_seed,
        images: entries,
    };
    Ok((
        LabeledDataset {
            images,
            labels,
            split,
            class_names,
        },
        manifest,
    ))
}

fn image_path(class: &str, azimuth: f64) -> PathBuf {
    PathBuf::from(format!("{class}/{azimuth:06.2}.pgm"))
}

/// Rounds pixels to the 16-bit levels used on disk.
pub fn quantize(image: &SarImage) -> SarImage {
    SarImage {
        grid: image.grid,
        pixels: image
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
            .collect(),
        normalized: image.normalized,
    }
}

/// Writes `dir/<class>/<azimuth>.pgm`, the class scenes and `manifest.json`.
pub fn write_dataset(dir: &Path, scenes: &[(String, Scene)], dataset: &LabeledDataset, manifest: &DatasetManifest) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("scenes"))?;
    for ((_, scene), rel) in scenes.iter().zip(&manifest.scenes) {
        scene.save(&dir.join(rel))?;
    }
    for (img, entry) in dataset.images.iter().zip(&manifest.images) {
        let path = dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            mkdir(parent)?;
        }
        imaging::write_image(img, &path)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::parse("manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads images listed in a manifest back into a labeled dataset.
pub fn read_dataset(dir: &Path) -> Result<(LabeledDataset, DatasetManifest)> {
    let manifest = DatasetManifest::load(dir)?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        images.push(imaging::read_image(&dir.join(&entry.path))?);
    }
    let dataset = LabeledDataset {
        images,
        labels: manifest.images.iter().map(|e| e.class_label).collect(),
        split: manifest.images.iter().map(|e| e.split).collect(),
        class_names: manifest.class_names.clone(),
    };
    dataset.validate()?;
    Ok((dataset, manifest))
}

/// Loads the per-class scenes referenced by a manifest.
pub fn read_scenes(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<(String, Scene)>> {
    manifest
        .class_names
        .iter()
        .zip(&manifest.scenes)
        .map(|(name, rel)| Ok((name.clone(), crate::scene::load_scene(&dir.join(rel), 0)?)))
        .collect()
}

/// Re-renders one manifest entry to the exact bytes of its image file.
pub fn rerender_entry(dir: &Path, manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Vec<u8>> {
    let scene = crate::scene::load_scene(&dir.join(&manifest.scenes[entry.class_label]), 0)?;
    let trace = TraceScene::new(&scene);
    let mut opts = manifest.render;
    opts.elevation_deg = entry.elevation_deg;
    let eff = EffectiveParams {
        objects: &scene.object_params,
        background: scene.background_params,
    };
    let (raw, _) = render::render_raw(&trace, &scene, &opts, entry.azimuth_deg, eff)?;
    let speckled = imaging::add_speckle(&raw, entry.seed, opts.speckle);
    imaging::encode_pgm(&imaging::normalize(&speckled, opts.scale_cap)?)
}
