//! End-to-end rendering: trace, focus, speckle, normalize.
//!
//! [`PreparedView`] caches the traced paths, speckle field and bin indices of
//! one viewing angle so that re-rendering under new scattering parameters
//! only re-shades the cached hits. Its output is bit-identical to
//! [`render_image`].

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{self, DropStats, ImageGrid, SarImage};
use crate::raytracer::{self, EffectiveParams, RenderPlan, SensorGeometry, TraceScene};
use crate::scene::Scene;

/// Rendering settings shared by every view of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub elevation_deg: f64,
    pub n_azimuth: usize,
    pub n_range: usize,
    /// Ray grid along the sensor plane's azimuth axis.
    pub rays_u: usize,
    /// Ray grid along the sensor plane's vertical axis.
    pub rays_v: usize,
    pub sensor_distance: f64,
    pub max_bounces: usize,
    /// Intensity mapped to full scale; fixed per experiment.
    pub scale_cap: f64,
    pub speckle: bool,
    /// Source of the per-view speckle seeds.
    pub run_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            elevation_deg: 15.0,
            n_azimuth: imaging::DEFAULT_PIXELS,
            n_range: imaging::DEFAULT_PIXELS,
            rays_u: 128,
            rays_v: 256,
            sensor_distance: 100.0,
            max_bounces: raytracer::DEFAULT_MAX_BOUNCES,
            scale_cap: 1.0,
            speckle: true,
            run_seed: 0,
        }
    }
}

impl RenderOptions {
    /// Image grid covering the ground square in azimuth and the matching
    /// slant-range window around the scene center.
    pub fn grid(&self, scene: &Scene) -> Result<ImageGrid> {
        let g = scene.ground_extent.max(1.0);
        ImageGrid::new(
            self.n_azimuth,
            self.n_range,
            (-g, g),
            (self.sensor_distance - g, self.sensor_distance + g),
        )
    }

    pub fn sensor(&self, scene: &Scene, azimuth_deg: f64) -> SensorGeometry {
        let g = scene.ground_extent.max(1.0);
        SensorGeometry {
            elevation_deg: self.elevation_deg,
            azimuth_deg,
            n_u: self.rays_u,
            n_v: self.rays_v,
            width_u: 2.0 * g,
            width_v: 2.0 * g,
            sensor_distance: self.sensor_distance,
        }
    }

    pub fn speckle_seed(&self, azimuth_deg: f64) -> u64 {
        imaging::speckle_seed(self.run_seed, azimuth_deg)
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.elevation_deg > 0.0 && self.elevation_deg < 90.0) {
            return Err(Error::config(format!("elevation {} outside (0, 90)", self.elevation_deg)));
        }
        if self.rays_u == 0 || self.rays_v == 0 {
            return Err(Error::config("ray grid must be non-empty"));
        }
        if !(1..=raytracer::MAX_BOUNCES_LIMIT).contains(&self.max_bounces) {
            return Err(Error::config(format!(
                "max_bounces must be in 1..={}",
                raytracer::MAX_BOUNCES_LIMIT
            )));
        }
        if !(self.sensor_distance > 0.0) {
            return Err(Error::config("sensor distance must be positive"));
        }
        if !(self.scale_cap > 0.0 && self.scale_cap.is_finite()) {
            return Err(Error::config("scale_cap must be positive"));
        }
        Ok(())
    }
}

/// Focused intensity image before speckle and normalization.
pub fn render_raw(
    trace: &TraceScene,
    scene: &Scene,
    opts: &RenderOptions,
    azimuth_deg: f64,
    params: EffectiveParams<'_>,
) -> Result<(SarImage, DropStats)> {
    let grid = opts.grid(scene)?;
    let echoes = raytracer::render_echoes(trace, &opts.sensor(scene, azimuth_deg), params, opts.max_bounces);
    Ok(imaging::focus(&echoes, &grid))
}

/// Raw render with speckle applied (when enabled), not yet normalized.
pub fn render_speckled(
    trace: &TraceScene,
    scene: &Scene,
    opts: &RenderOptions,
    azimuth_deg: f64,
    params: EffectiveParams<'_>,
) -> Result<(SarImage, DropStats)> {
    let (raw, stats) = render_raw(trace, scene, opts, azimuth_deg, params)?;
    Ok((
        imaging::add_speckle(&raw, opts.speckle_seed(azimuth_deg), opts.speckle),
        stats,
    ))
}

/// Full pipeline to a normalized image.
pub fn render_image(
    trace: &TraceScene,
    scene: &Scene,
    opts: &RenderOptions,
    azimuth_deg: f64,
    params: EffectiveParams<'_>,
) -> Result<SarImage> {
    let (speckled, _) = render_speckled(trace, scene, opts, azimuth_deg, params)?;
    imaging::normalize(&speckled, opts.scale_cap)
}

/// Cached render of one viewing angle.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub azimuth_deg: f64,
    grid: ImageGrid,
    plan: RenderPlan,
    speckle: Option<Vec<f64>>,
    scale_cap: f64,
}

impl PreparedView {
    /// Traces the view once. `reference` parameters only seed the power-term
    /// cache; any parameters may be used to render afterwards.
    pub fn new(
        trace: &TraceScene,
        scene: &Scene,
        opts: &RenderOptions,
        azimuth_deg: f64,
        reference: EffectiveParams<'_>,
    ) -> Result<Self> {
        let grid = opts.grid(scene)?;
        let sensor = opts.sensor(scene, azimuth_deg);
        let plan = RenderPlan::build(trace, &sensor, opts.max_bounces, reference, |a, r| {
            grid.bin(a, r).map(|b| b as u32)
        });
        let speckle = opts
            .speckle
            .then(|| imaging::speckle_field(grid.len(), opts.speckle_seed(azimuth_deg)));
        Ok(PreparedView {
            azimuth_deg,
            grid,
            plan,
            speckle,
            scale_cap: opts.scale_cap,
        })
    }

    pub fn render_raw(&self, params: EffectiveParams<'_>) -> (SarImage, DropStats) {
        let mut image = SarImage::zeros(self.grid);
        let (dropped, dropped_intensity) = self.plan.accumulate(params, &mut image.pixels);
        (
            image,
            DropStats {
                dropped,
                dropped_intensity,
            },
        )
    }

    /// Normalized image under `params`.
    pub fn render(&self, params: EffectiveParams<'_>) -> SarImage {
        let (mut image, _) = self.render_raw(params);
        if let Some(field) = &self.speckle {
            for (p, s) in image.pixels.iter_mut().zip(field) {
                *p *= s;
            }
        }
        let cap = self.scale_cap;
        for p in image.pixels.iter_mut() {
            *p = p.min(cap) / cap;
        }
        image.normalized = true;
        image
    }
}
