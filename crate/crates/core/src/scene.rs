//! Scene representation: triangle meshes grouped into named components, their
//! scattering feature parameters, the ground plane, and the per-mesh blend
//! coefficients the attack optimizes.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Triangle, Vec3};

const NORMAL_TOLERANCE: f64 = 1e-9;

/// One triangular facet with a flat normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub id: u64,
    pub vertices: [Vec3; 3],
    pub normal: Vec3,
    pub component: String,
}

impl Mesh {
    /// Builds a mesh whose normal follows the vertex winding.
    pub fn from_winding(id: u64, vertices: [Vec3; 3], component: impl Into<String>) -> Result<Self> {
        let normal = Triangle::new(vertices[0], vertices[1], vertices[2])
            .winding_normal()
            .ok_or_else(|| Error::validation(format!("mesh {id}: degenerate triangle")))?;
        Ok(Mesh {
            id,
            vertices,
            normal,
            component: component.into(),
        })
    }

    pub fn triangle(&self) -> Triangle {
        Triangle::new(self.vertices[0], self.vertices[1], self.vertices[2])
    }

    pub fn area(&self) -> f64 {
        self.triangle().area()
    }
}

/// Per-facet scattering feature parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatteringParams {
    /// Specular reflection coefficient, in `[0, 1]`.
    pub f_s: f64,
    /// Diffuse reflection coefficient, in `[0, 1]`.
    pub f_d: f64,
    /// Surface roughness, `> 0`.
    pub f_r: f64,
    /// Surface brightness, `>= 0`.
    pub f_b: f64,
}

impl ScatteringParams {
    pub fn new(f_s: f64, f_d: f64, f_r: f64, f_b: f64) -> Self {
        ScatteringParams { f_s, f_d, f_r, f_b }
    }

    /// Returns the name of the first violated range invariant.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.f_s) {
            return Err(format!("f_s out of range ({})", self.f_s));
        }
        if !in_unit(self.f_d) {
            return Err(format!("f_d out of range ({})", self.f_d));
        }
        if !(self.f_r > 0.0 && self.f_r.is_finite()) {
            return Err(format!("f_r out of range ({})", self.f_r));
        }
        if !(self.f_b >= 0.0 && self.f_b.is_finite()) {
            return Err(format!("f_b out of range ({})", self.f_b));
        }
        Ok(())
    }
}

/// Blend weights pulling a facet's specular (`alpha`) and diffuse (`beta`)
/// coefficients toward the background.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlendCoefficients {
    pub alpha: f64,
    pub beta: f64,
}

impl BlendCoefficients {
    pub fn new(alpha: f64, beta: f64) -> Self {
        BlendCoefficients {
            alpha: alpha.clamp(0.0, 1.0),
            beta: beta.clamp(0.0, 1.0),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Seeded uniform draw of blend coefficients in `[0, 1)`.
pub fn random_blend(n: usize, seed: u64) -> Vec<BlendCoefficients> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let alpha = rng.gen::<f64>();
            let beta = rng.gen::<f64>();
            BlendCoefficients { alpha, beta }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meshes: Vec<Mesh>,
    pub object_params: Vec<ScatteringParams>,
    pub background_params: ScatteringParams,
    pub blend: Vec<BlendCoefficients>,
    /// Half-width of the square ground plane at `z = 0`; zero disables the ground.
    pub ground_extent: f64,
    pub components: Vec<String>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    pub fn has_ground(&self) -> bool {
        self.ground_extent > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meshes.len();
        if self.object_params.len() != n {
            return Err(Error::validation(format!(
                "object_params has {} entries for {n} meshes",
                self.object_params.len()
            )));
        }
        if self.blend.len() != n {
            return Err(Error::validation(format!(
                "blend has {} entries for {n} meshes",
                self.blend.len()
            )));
        }
        if !(self.ground_extent >= 0.0 && self.ground_extent.is_finite()) {
            return Err(Error::validation(format!(
                "ground_extent out of range ({})",
                self.ground_extent
            )));
        }
        self.background_params
            .validate()
            .map_err(|e| Error::validation(format!("background_params: {e}")))?;
        let declared: BTreeSet<&str> = self.components.iter().map(String::as_str).collect();
        for (i, mesh) in self.meshes.iter().enumerate() {
            if mesh.triangle().area() <= 0.0 {
                return Err(Error::validation(format!("mesh {}: degenerate triangle", mesh.id)));
            }
            if (mesh.normal.norm() - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(Error::validation(format!("mesh {}: normal is not unit length", mesh.id)));
            }
            if !declared.contains(mesh.component.as_str()) {
                return Err(Error::validation(format!(
                    "mesh {}: component {:?} is not declared",
                    mesh.id, mesh.component
                )));
            }
            self.object_params[i]
                .validate()
                .map_err(|e| Error::validation(format!("mesh {}: {e}", mesh.id)))?;
            let b = self.blend[i];
            if !(0.0..=1.0).contains(&b.alpha) || !(0.0..=1.0).contains(&b.beta) {
                return Err(Error::validation(format!(
                    "mesh {}: blend coefficients out of range",
                    mesh.id
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over geometry and scattering parameters. Blend coefficients are
    /// excluded: they are the attack's variables, not the scene's identity.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.meshes.len() as u64).to_le_bytes());
        for (mesh, p) in self.meshes.iter().zip(&self.object_params) {
            h.update(mesh.id.to_le_bytes());
            for v in &mesh.vertices {
                for c in v.iter() {
                    h.update(c.to_le_bytes());
                }
            }
            for c in mesh.normal.iter() {
                h.update(c.to_le_bytes());
            }
            h.update(mesh.component.as_bytes());
            h.update([0u8]);
            for c in [p.f_s, p.f_d, p.f_r, p.f_b] {
                h.update(c.to_le_bytes());
            }
        }
        let b = self.background_params;
        for c in [b.f_s, b.f_d, b.f_r, b.f_b, self.ground_extent] {
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json_str(text: &str, blend_seed: u64) -> Result<Scene> {
        let file: SceneFile =
            serde_json::from_str(text).map_err(|e| Error::parse("scene", format!("{e}")))?;
        file.into_scene(blend_seed)
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(&SceneFile::from(self)).map_err(|e| Error::parse("scene", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    /// Appends another scene's meshes; component lists are merged in order of
    /// first appearance and mesh ids are kept as given.
    pub fn extend(&mut self, other: Scene) {
        for c in other.components {
            if !self.components.contains(&c) {
                self.components.push(c);
            }
        }
        self.meshes.extend(other.meshes);
        self.object_params.extend(other.object_params);
        self.blend.extend(other.blend);
    }
}

/// Reads and validates a scene file. Missing blend coefficients are drawn
/// from `blend_seed`; missing normals follow the vertex winding.
pub fn load_scene(path: &Path, blend_seed: u64) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), format!("{e}")))?;
    file.into_scene(blend_seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshRecord {
    id: u64,
    vertices: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal: Option<[f64; 3]>,
    component: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlendRecord {
    alpha: f64,
    beta: f64,
    // Accepted for compatibility; nothing reads it.
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    gamma: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    meshes: Vec<MeshRecord>,
    object_params: Vec<ScatteringParams>,
    background_params: ScatteringParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blend: Option<Vec<BlendRecord>>,
    ground_extent: f64,
    components: Vec<String>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        let v = |p: &Vec3| [p.x, p.y, p.z];
        SceneFile {
            meshes: s
                .meshes
                .iter()
                .map(|m| MeshRecord {
                    id: m.id,
                    vertices: [v(&m.vertices[0]), v(&m.vertices[1]), v(&m.vertices[2])],
                    normal: Some(v(&m.normal)),
                    component: m.component.clone(),
                })
                .collect(),
            object_params: s.object_params.clone(),
            background_params: s.background_params,
            blend: Some(
                s.blend
                    .iter()
                    .map(|b| BlendRecord {
                        alpha: b.alpha,
                        beta: b.beta,
                        gamma: None,
                    })
                    .collect(),
            ),
            ground_extent: s.ground_extent,
            components: s.components.clone(),
        }
    }
}

impl SceneFile {
    fn into_scene(self, blend_seed: u64) -> Result<Scene> {
        let to_vec = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let mut meshes = Vec::with_capacity(self.meshes.len());
        for rec in self.meshes {
            let vertices = rec.vertices.map(to_vec);
            let mesh = match rec.normal {
                Some(n) => {
                    let tri = Triangle::new(vertices[0], vertices[1], vertices[2]);
                    if tri.area() <= 0.0 {
                        return Err(Error::validation(format!("mesh {}: degenerate triangle", rec.id)));
                    }
                    Mesh {
                        id: rec.id,
                        vertices,
                        normal: to_vec(n),
                        component: rec.component,
                    }
                }
                None => Mesh::from_winding(rec.id, vertices, rec.component)?,
            };
            meshes.push(mesh);
        }
        let blend = match self.blend {
            Some(b) => b
                .into_iter()
                .map(|r| BlendCoefficients {
                    alpha: r.alpha,
                    beta: r.beta,
                })
                .collect(),
            None => random_blend(meshes.len(), blend_seed),
        };
        let scene = Scene {
            meshes,
            object_params: self.object_params,
            background_params: self.background_params,
            blend,
            ground_extent: self.ground_extent,
            components: self.components,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Disjoint mini-batches of mesh indices covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub batches: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Seeded permutation of `0..n_meshes` cut into `m` batches whose sizes differ
/// by at most one; the first `n % m` batches take the extra element.
pub fn partition_batches(n_meshes: usize, m: usize, seed: u64) -> Result<BatchSchedule> {
    if n_meshes == 0 {
        return Err(Error::config("cannot partition zero meshes"));
    }
    if m == 0 {
        return Err(Error::config("batch denominator must be at least 1"));
    }
    if m > n_meshes {
        return Err(Error::config(format!(
            "cannot form {m} non-empty batches from {n_meshes} meshes"
        )));
    }
    let mut perm: Vec<usize> = (0..n_meshes).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_meshes / m;
    let extra = n_meshes % m;
    let mut batches = Vec::with_capacity(m);
    let mut start = 0;
    for b in 0..m {
        let size = base + usize::from(b < extra);
        batches.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(BatchSchedule { batches, seed })
}

/// Indices of every mesh whose component label is in `components`.
pub fn component_mask<S: AsRef<str>>(scene: &Scene, components: &[S]) -> Result<Vec<usize>> {
    let wanted: BTreeSet<&str> = components.iter().map(AsRef::as_ref).collect();
    for label in &wanted {
        if !scene.components.iter().any(|c| c == label) {
            return Err(Error::validation(format!(
                "unknown component {label:?}; valid components: {}",
                scene.components.join(", ")
            )));
        }
    }
    Ok(scene
        .meshes
        .iter()
        .enumerate()
        .filter(|(_, m)| wanted.contains(m.component.as_str()))
        .map(|(i, _)| i)
        .collect())
}
