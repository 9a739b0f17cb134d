//! Orthographic multi-bounce ray tracing with specular/diffuse echo models.
//!
//! Rays leave a sensor plane perpendicular to the look direction, all
//! mutually parallel. At every hit that can see the sensor plane an echo is
//! emitted: the diffuse return always, plus the specular return when the
//! mirror direction points back at the sensor. The ray then continues along
//! the mirror direction, attenuated by the specular factor of the bounce.
//! Echoes are positioned at the midpoint of the first and last azimuth
//! projections and at half the total path length in slant range.

use rayon::prelude::*;

use crate::geometry::{reflect, Bvh, PreparedRay, Ray, Triangle, Vec3, T_MIN};
use crate::scene::{ScatteringParams, Scene};

/// Paths whose incident intensity falls below this are abandoned.
pub const INTENSITY_FLOOR: f64 = 1e-6;
/// Angular tolerance for a mirror direction to count as a specular return.
pub const SPECULAR_TOLERANCE_DEG: f64 = 0.5;
pub const DEFAULT_MAX_BOUNCES: usize = 3;
pub const MAX_BOUNCES_LIMIT: usize = 5;

/// Look geometry and the orthographic ray grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensorGeometry {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    /// Rays along the azimuth axis of the sensor plane.
    pub n_u: usize,
    /// Rays along the vertical axis of the sensor plane.
    pub n_v: usize,
    pub width_u: f64,
    pub width_v: f64,
    pub sensor_distance: f64,
}

impl SensorGeometry {
    pub fn frame(&self) -> SensorFrame {
        let e = self.elevation_deg.to_radians();
        let a = self.azimuth_deg.to_radians();
        let (se, ce) = e.sin_cos();
        let (sa, ca) = a.sin_cos();
        SensorFrame {
            to_sensor: Vec3::new(ce * ca, ce * sa, se),
            azimuth_axis: Vec3::new(-sa, ca, 0.0),
            vertical_axis: Vec3::new(-se * ca, -se * sa, ce),
            distance: self.sensor_distance,
        }
    }

    pub fn ray_count(&self) -> usize {
        self.n_u * self.n_v
    }

    /// Ray through the center of grid cell `(iu, iv)`.
    pub fn grid_ray(&self, frame: &SensorFrame, iu: usize, iv: usize) -> RayState {
        let u = -0.5 * self.width_u + (iu as f64 + 0.5) * self.width_u / self.n_u as f64;
        let v = -0.5 * self.width_v + (iv as f64 + 0.5) * self.width_v / self.n_v as f64;
        let origin = frame.to_sensor * frame.distance + frame.azimuth_axis * u + frame.vertical_axis * v;
        RayState::new(origin, -frame.to_sensor)
    }

    /// Ray with linear index `k` (azimuth-major).
    pub fn ray(&self, frame: &SensorFrame, k: usize) -> RayState {
        self.grid_ray(frame, k / self.n_v, k % self.n_v)
    }
}

/// Orthonormal sensor basis derived from a [`SensorGeometry`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    /// Unit vector from the scene toward the sensor.
    pub to_sensor: Vec3,
    /// Horizontal axis of the sensor plane.
    pub azimuth_axis: Vec3,
    pub vertical_axis: Vec3,
    /// Distance of the sensor plane from the origin.
    pub distance: f64,
}

impl SensorFrame {
    /// Distance from `p` to the sensor plane along the return direction.
    pub fn distance_to_plane(&self, p: &Vec3) -> f64 {
        self.distance - p.dot(&self.to_sensor)
    }

    pub fn azimuth_of(&self, p: &Vec3) -> f64 {
        p.dot(&self.azimuth_axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayState {
    pub origin: Vec3,
    pub direction: Vec3,
    pub i_sig: f64,
    pub bounce_index: usize,
    pub path_length_so_far: f64,
}

impl RayState {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        RayState {
            origin,
            direction: direction.normalize(),
            i_sig: 1.0,
            bounce_index: 1,
            path_length_so_far: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EchoSample {
    /// Azimuth coordinate in meters.
    pub a: f64,
    /// Slant range in meters.
    pub r: f64,
    pub intensity: f64,
    pub bounce_count: usize,
}

/// `F_s * (N.H)^(1/F_r)`.
pub fn specular_intensity(params: &ScatteringParams, n_dot_h: f64) -> f64 {
    params.f_s * n_dot_h.powf(1.0 / params.f_r)
}

/// `F_d * I_sig * (N.L)^F_b`.
pub fn diffuse_intensity(params: &ScatteringParams, i_sig: f64, n_dot_l: f64) -> f64 {
    params.f_d * i_sig * n_dot_l.powf(params.f_b)
}

/// Focusing rule: azimuth at the midpoint of the first and last projections,
/// slant range at half the total path length.
pub fn echo_position(x_first: f64, x_last: f64, path_segments: &[f64]) -> (f64, f64) {
    let a = (x_first + x_last) / 2.0;
    let r = 0.5 * path_segments.iter().sum::<f64>();
    (a, r)
}

/// Scattering parameters in effect for one render: one entry per scene mesh
/// plus the ground's.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveParams<'a> {
    pub objects: &'a [ScatteringParams],
    pub background: ScatteringParams,
}

impl<'a> EffectiveParams<'a> {
    fn of(&self, surface: Surface) -> &ScatteringParams {
        match surface {
            Surface::Mesh(i) => &self.objects[i],
            Surface::Ground => &self.background,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Mesh(usize),
    Ground,
}

/// Immutable acceleration structure for one scene geometry. Parameters are
/// supplied per render, so a single instance serves every render of an attack.
#[derive(Debug, Clone)]
pub struct TraceScene {
    bvh: Bvh,
    surfaces: Vec<Surface>,
    normals: Vec<Vec3>,
}

impl TraceScene {
    pub fn new(scene: &Scene) -> Self {
        let mut triangles: Vec<Triangle> = scene.meshes.iter().map(|m| m.triangle()).collect();
        let mut surfaces: Vec<Surface> = (0..scene.meshes.len()).map(Surface::Mesh).collect();
        let mut normals: Vec<Vec3> = scene.meshes.iter().map(|m| m.normal).collect();
        if scene.has_ground() {
            let g = scene.ground_extent;
            let a = Vec3::new(-g, -g, 0.0);
            let b = Vec3::new(g, -g, 0.0);
            let c = Vec3::new(g, g, 0.0);
            let d = Vec3::new(-g, g, 0.0);
            triangles.push(Triangle::new(a, b, c));
            triangles.push(Triangle::new(a, c, d));
            surfaces.extend([Surface::Ground, Surface::Ground]);
            normals.extend([Vec3::z(), Vec3::z()]);
        }
        TraceScene {
            bvh: Bvh::build(triangles),
            surfaces,
            normals,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bvh.is_empty()
    }
}

/// Geometry of one hit, independent of scattering parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitGeometry {
    pub surface: Surface,
    pub bounce: usize,
    /// Echo position when the hit sees the sensor; `None` when occluded.
    pub echo: Option<(f64, f64)>,
    pub n_dot_l: f64,
    /// `N.H` toward the sensor when the mirror direction is within tolerance.
    pub specular_n_dot_h: Option<f64>,
    /// `N.H` along the continuation (mirror) direction.
    pub continuation_n_dot_h: f64,
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Walks the path geometry of a ray up to `max_bounces` hits, calling `visit`
/// per hit. `visit` returns false to stop the walk.
fn walk_path<F>(geom: &TraceScene, frame: &SensorFrame, ray: &RayState, max_bounces: usize, mut visit: F)
where
    F: FnMut(&HitGeometry) -> bool,
{
    let cos_tol = SPECULAR_TOLERANCE_DEG.to_radians().cos();
    let mut origin = ray.origin;
    let mut dir = ray.direction;
    let mut path = ray.path_length_so_far;
    let mut x_first = 0.0;
    for bounce in ray.bounce_index..=max_bounces {
        let prepared = PreparedRay::new(Ray {
            origin,
            direction: dir,
        });
        let Some(hit) = geom.bvh.closest(&prepared, T_MIN, f64::INFINITY) else {
            break;
        };
        let p = origin + dir * hit.t;
        path += hit.t;
        let surface = geom.surfaces[hit.triangle];
        let mut n = geom.normals[hit.triangle];
        if n.dot(&dir) > 0.0 {
            n = -n;
        }
        if bounce == ray.bounce_index {
            x_first = frame.azimuth_of(&p);
        }
        let mirror = reflect(&dir, &n);

        let to_plane = frame.distance_to_plane(&p);
        let visible = to_plane > 0.0 && {
            let back = PreparedRay::new(Ray {
                origin: p,
                direction: frame.to_sensor,
            });
            !geom.bvh.occluded(&back, T_MIN, to_plane)
        };
        let (echo, n_dot_l, specular_n_dot_h) = if visible {
            let n_dot_l = clamp_unit(n.dot(&frame.to_sensor));
            let specular = if mirror.dot(&frame.to_sensor) >= cos_tol {
                let h = (frame.to_sensor - dir).normalize();
                Some(clamp_unit(n.dot(&h)))
            } else {
                None
            };
            let pos = echo_position(x_first, frame.azimuth_of(&p), &[path, to_plane]);
            (Some(pos), n_dot_l, specular)
        } else {
            (None, 0.0, None)
        };
        let h_cont = (mirror - dir).normalize();
        let info = HitGeometry {
            surface,
            bounce,
            echo,
            n_dot_l,
            specular_n_dot_h,
            continuation_n_dot_h: clamp_unit(n.dot(&h_cont)),
        };
        if !visit(&info) {
            break;
        }
        origin = p;
        dir = mirror;
    }
}

/// Per-hit echo rule shared by direct tracing and cached plans. Returns the
/// echo intensity (if the hit is visible) and the propagated incident
/// intensity.
#[inline]
fn shade(params: &ScatteringParams, hit: &HitGeometry, i_sig: f64, diffuse_geom: f64, specular_geom: f64, continuation_geom: f64) -> (f64, f64) {
    let mut intensity = params.f_d * i_sig * diffuse_geom;
    if hit.specular_n_dot_h.is_some() {
        intensity += i_sig * (params.f_s * specular_geom);
    }
    (intensity, i_sig * (params.f_s * continuation_geom))
}

/// Traces one ray through up to `max_bounces` hits and returns the echoes
/// that reach the sensor.
pub fn trace_ray(
    geom: &TraceScene,
    frame: &SensorFrame,
    ray: RayState,
    max_bounces: usize,
    params: EffectiveParams<'_>,
) -> Vec<EchoSample> {
    let mut out = Vec::new();
    let mut i_sig = ray.i_sig;
    walk_path(geom, frame, &ray, max_bounces, |hit| {
        let p = params.of(hit.surface);
        let diffuse_geom = hit.n_dot_l.powf(p.f_b);
        let specular_geom = hit.specular_n_dot_h.map_or(0.0, |nh| nh.powf(1.0 / p.f_r));
        let continuation_geom = hit.continuation_n_dot_h.powf(1.0 / p.f_r);
        let (intensity, next) = shade(p, hit, i_sig, diffuse_geom, specular_geom, continuation_geom);
        if let Some((a, r)) = hit.echo {
            out.push(EchoSample {
                a,
                r,
                intensity,
                bounce_count: hit.bounce,
            });
        }
        i_sig = next;
        i_sig >= INTENSITY_FLOOR
    });
    out
}

/// Echoes of every grid ray, in ray-index order.
pub fn render_echoes(
    geom: &TraceScene,
    sensor: &SensorGeometry,
    params: EffectiveParams<'_>,
    max_bounces: usize,
) -> Vec<EchoSample> {
    let frame = sensor.frame();
    let per_ray: Vec<Vec<EchoSample>> = (0..sensor.ray_count())
        .into_par_iter()
        .map(|k| trace_ray(geom, &frame, sensor.ray(&frame, k), max_bounces, params))
        .collect();
    per_ray.into_iter().flatten().collect()
}

/// One cached hit: geometry plus power terms evaluated with reference
/// `f_b`/`f_r` values, recomputed only when a render uses different ones.
#[derive(Debug, Clone, Copy)]
struct PlanHit {
    geometry: HitGeometry,
    /// Destination of the echo, as an opaque bin id supplied by the caller.
    bin: Option<u32>,
    ref_f_b: f64,
    ref_f_r: f64,
    diffuse_geom: f64,
    specular_geom: f64,
    continuation_geom: f64,
}

/// Parameter-independent record of every ray path for one view.
///
/// Geometry never changes during an attack, only scattering parameters, so
/// the paths can be traced once and re-shaded per render. Shading a plan is
/// bit-identical to [`render_echoes`] with the same parameters.
#[derive(Debug, Clone)]
pub struct RenderPlan {
    hits: Vec<PlanHit>,
    /// `ray_start[k]..ray_start[k + 1]` indexes the hits of ray `k`.
    ray_start: Vec<usize>,
}

impl RenderPlan {
    /// Traces all grid rays to `max_bounces` with `reference` parameters
    /// used to precompute power terms. `bin` maps an echo position to an
    /// accumulation bin.
    pub fn build<B>(
        geom: &TraceScene,
        sensor: &SensorGeometry,
        max_bounces: usize,
        reference: EffectiveParams<'_>,
        bin: B,
    ) -> Self
    where
        B: Fn(f64, f64) -> Option<u32> + Sync,
    {
        let frame = sensor.frame();
        let per_ray: Vec<Vec<PlanHit>> = (0..sensor.ray_count())
            .into_par_iter()
            .map(|k| {
                let mut hits = Vec::new();
                walk_path(geom, &frame, &sensor.ray(&frame, k), max_bounces, |hit| {
                    let p = reference.of(hit.surface);
                    hits.push(PlanHit {
                        geometry: *hit,
                        bin: hit.echo.and_then(|(a, r)| bin(a, r)),
                        ref_f_b: p.f_b,
                        ref_f_r: p.f_r,
                        diffuse_geom: hit.n_dot_l.powf(p.f_b),
                        specular_geom: hit.specular_n_dot_h.map_or(0.0, |nh| nh.powf(1.0 / p.f_r)),
                        continuation_geom: hit.continuation_n_dot_h.powf(1.0 / p.f_r),
                    });
                    true
                });
                hits
            })
            .collect();
        let mut ray_start = Vec::with_capacity(per_ray.len() + 1);
        let mut hits = Vec::new();
        for h in per_ray {
            ray_start.push(hits.len());
            hits.extend(h);
        }
        ray_start.push(hits.len());
        RenderPlan { hits, ray_start }
    }

    pub fn hit_count(&self) -> usize {
        self.hits.len()
    }

    fn shade_all<F: FnMut(&PlanHit, f64)>(&self, params: EffectiveParams<'_>, mut emit: F) {
        for k in 0..self.ray_start.len() - 1 {
            let mut i_sig = 1.0;
            for h in &self.hits[self.ray_start[k]..self.ray_start[k + 1]] {
                let p = params.of(h.geometry.surface);
                let (diffuse_geom, specular_geom, continuation_geom) =
                    if p.f_b == h.ref_f_b && p.f_r == h.ref_f_r {
                        (h.diffuse_geom, h.specular_geom, h.continuation_geom)
                    } else {
                        (
                            h.geometry.n_dot_l.powf(p.f_b),
                            h.geometry.specular_n_dot_h.map_or(0.0, |nh| nh.powf(1.0 / p.f_r)),
                            h.geometry.continuation_n_dot_h.powf(1.0 / p.f_r),
                        )
                    };
                let (intensity, next) =
                    shade(p, &h.geometry, i_sig, diffuse_geom, specular_geom, continuation_geom);
                if h.geometry.echo.is_some() {
                    emit(h, intensity);
                }
                i_sig = next;
                if i_sig < INTENSITY_FLOOR {
                    break;
                }
            }
        }
    }

    /// Re-shades the cached paths, returning echoes in ray-index order.
    pub fn echoes(&self, params: EffectiveParams<'_>) -> Vec<EchoSample> {
        let mut out = Vec::new();
        self.shade_all(params, |h, intensity| {
            let (a, r) = h.geometry.echo.expect("emitted hits are visible");
            out.push(EchoSample {
                a,
                r,
                intensity,
                bounce_count: h.geometry.bounce,
            });
        });
        out
    }

    /// Re-shades and deposits straight into `bins`; returns the summed
    /// intensity and count of echoes with no bin.
    pub fn accumulate(&self, params: EffectiveParams<'_>, bins: &mut [f64]) -> (usize, f64) {
        let mut dropped = 0;
        let mut dropped_intensity = 0.0;
        self.shade_all(params, |h, intensity| match h.bin {
            Some(b) => bins[b as usize] += intensity,
            None => {
                dropped += 1;
                dropped_intensity += intensity;
            }
        });
        (dropped, dropped_intensity)
    }
}

/// Writes echoes as `a,r,intensity,bounces` CSV.
pub fn write_echo_csv<W: std::io::Write>(echoes: &[EchoSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "a,r,intensity,bounces")?;
    for e in echoes {
        writeln!(out, "{},{},{},{}", e.a, e.r, e.intensity, e.bounce_count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BlendCoefficients, Mesh};

    fn params(f_s: f64, f_d: f64, f_r: f64, f_b: f64) -> ScatteringParams {
        ScatteringParams::new(f_s, f_d, f_r, f_b)
    }

    #[test]
    fn specular_cases() {
        assert!((specular_intensity(&params(0.5, 0.0, 1.0, 1.0), 1.0) - 0.5).abs() <= 1e-9);
        assert!((specular_intensity(&params(1.0, 0.0, 0.5, 1.0), 0.8) - 0.64).abs() <= 1e-9);
        assert_eq!(specular_intensity(&params(0.0, 0.3, 0.7, 1.0), 0.9), 0.0);
    }

    #[test]
    fn diffuse_cases() {
        assert!((diffuse_intensity(&params(0.0, 0.6, 1.0, 1.0), 1.0, 1.0) - 0.6).abs() <= 1e-9);
        assert!((diffuse_intensity(&params(0.0, 1.0, 1.0, 2.0), 0.5, 0.5) - 0.125).abs() <= 1e-9);
        assert_eq!(diffuse_intensity(&params(0.0, 1.0, 1.0, 2.0), 1.0, 0.0), 0.0);
    }

    #[test]
    fn echo_position_cases() {
        assert_eq!(echo_position(2.0, 6.0, &[3.0, 4.0, 5.0]), (4.0, 6.0));
        assert_eq!(echo_position(1.5, 1.5, &[7.25, 7.25]), (1.5, 7.25));
        let (a, _) = echo_position(-3.0, -3.0, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a, -3.0);
    }

    /// Square plate of half-width `h` centered at `c`, facing `normal`.
    fn plate(id: u64, c: Vec3, normal: Vec3, h: f64, component: &str) -> Vec<Mesh> {
        let n = normal.normalize();
        let helper = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = helper.cross(&n).normalize() * h;
        let v = n.cross(&u).normalize() * h;
        let p = [c - u - v, c + u - v, c + u + v, c - u + v];
        vec![
            Mesh::from_winding(id, [p[0], p[1], p[2]], component).unwrap(),
            Mesh::from_winding(id + 1, [p[0], p[2], p[3]], component).unwrap(),
        ]
    }

    fn scene_of(meshes: Vec<Mesh>, p: ScatteringParams, ground: f64) -> Scene {
        let n = meshes.len();
        Scene {
            meshes,
            object_params: vec![p; n],
            background_params: params(0.1, 0.2, 1.0, 1.0),
            blend: vec![BlendCoefficients::zero(); n],
            ground_extent: ground,
            components: vec!["plate".into()],
        }
    }

    fn sensor(elev: f64, az: f64, n: usize, width: f64) -> SensorGeometry {
        SensorGeometry {
            elevation_deg: elev,
            azimuth_deg: az,
            n_u: n,
            n_v: n,
            width_u: width,
            width_v: width,
            sensor_distance: 50.0,
        }
    }

    #[test]
    fn head_on_plate_single_bounce() {
        let s = sensor(30.0, 20.0, 1, 0.1);
        let frame = s.frame();
        let p = params(0.4, 0.6, 0.5, 1.0);
        let scene = scene_of(plate(0, Vec3::zeros(), frame.to_sensor, 1.0, "plate"), p, 0.0);
        let geom = TraceScene::new(&scene);
        let ray = s.grid_ray(&frame, 0, 0);
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        let echoes = trace_ray(&geom, &frame, ray, 1, eff);
        assert_eq!(echoes.len(), 1);
        let e = echoes[0];
        // Closed form: f_d * 1 * 1^f_b + f_s * 1^(1/f_r), range = plane distance.
        assert!((e.intensity - (0.6 + 0.4)).abs() < 1e-9, "{}", e.intensity);
        assert!((e.r - 50.0).abs() < 1e-9);
        assert!(e.a.abs() < 1e-9);
        assert_eq!(e.bounce_count, 1);
    }

    #[test]
    fn empty_scene_has_no_echoes() {
        let scene = scene_of(Vec::new(), params(0.5, 0.5, 1.0, 1.0), 0.0);
        let geom = TraceScene::new(&scene);
        let s = sensor(15.0, 0.0, 4, 2.0);
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        assert!(render_echoes(&geom, &s, eff, 3).is_empty());
    }

    #[test]
    fn occluded_return_emits_nothing() {
        // Sensor straight overhead-ish; a plate at the origin hit by a sideways
        // ray whose return path is blocked by a second plate above it.
        let s = sensor(60.0, 0.0, 1, 0.1);
        let frame = s.frame();
        let p = params(0.0, 0.8, 1.0, 1.0);
        let mut meshes = plate(0, Vec3::zeros(), frame.to_sensor, 1.0, "plate");
        meshes.extend(plate(2, frame.to_sensor * 5.0, frame.to_sensor, 3.0, "plate"));
        let scene = scene_of(meshes, p, 0.0);
        let geom = TraceScene::new(&scene);
        // Incoming from below the blocker, grazing in along the azimuth axis.
        let dir = (-frame.to_sensor + frame.azimuth_axis * 0.5).normalize();
        let origin = -dir * 2.0;
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        let echoes = trace_ray(&geom, &frame, RayState::new(origin, dir), 1, eff);
        assert!(echoes.is_empty());

        // Without the blocker the same ray is seen.
        let scene = scene_of(plate(0, Vec3::zeros(), frame.to_sensor, 1.0, "plate"), p, 0.0);
        let geom = TraceScene::new(&scene);
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        assert_eq!(trace_ray(&geom, &frame, RayState::new(origin, dir), 1, eff).len(), 1);
    }

    #[test]
    fn dihedral_produces_double_bounce() {
        // Wall facing the sensor azimuth standing on the ground.
        let s = sensor(30.0, 0.0, 16, 4.0);
        let wall_normal = Vec3::x();
        let meshes = plate(0, Vec3::new(0.0, 0.0, 1.0), wall_normal, 1.0, "plate");
        let scene = scene_of(meshes, params(0.9, 0.5, 1.0, 1.0), 3.0);
        let geom = TraceScene::new(&scene);
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        let echoes = render_echoes(&geom, &s, eff, 3);
        assert!(echoes.iter().any(|e| e.bounce_count == 2));
        assert!(echoes.iter().all(|e| e.bounce_count <= 3 && e.intensity >= 0.0 && e.r > 0.0));
    }

    #[test]
    fn plan_matches_direct_render() {
        let s = sensor(25.0, 35.0, 12, 5.0);
        let mut meshes = plate(0, Vec3::new(0.0, 0.0, 1.0), Vec3::x(), 1.0, "plate");
        meshes.extend(plate(2, Vec3::new(0.5, 0.5, 0.8), Vec3::new(1.0, 1.0, 0.3), 0.7, "plate"));
        let scene = scene_of(meshes, params(0.7, 0.5, 0.3, 1.5), 3.0);
        let geom = TraceScene::new(&scene);
        let eff = EffectiveParams {
            objects: &scene.object_params,
            background: scene.background_params,
        };
        let plan = RenderPlan::build(&geom, &s, 3, eff, |_, _| Some(0));
        assert_eq!(plan.echoes(eff), render_echoes(&geom, &s, eff, 3));

        // Different parameters, including ones that miss the power cache.
        let other: Vec<ScatteringParams> = (0..scene.len())
            .map(|i| params(0.1 * i as f64, 0.9, 0.3 + 0.1 * (i % 2) as f64, 1.0))
            .collect();
        let eff2 = EffectiveParams {
            objects: &other,
            background: params(0.05, 0.1, 2.0, 0.5),
        };
        assert_eq!(plan.echoes(eff2), render_echoes(&geom, &s, eff2, 3));
    }
}
