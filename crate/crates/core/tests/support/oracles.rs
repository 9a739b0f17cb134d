//! Independent reference computations shared by the oracle tests and the
//! acceptance run. Nothing here calls the optimizer or backprop code it
//! checks; each value is rebuilt from its defining formula.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfp_core::attack::{adam_step, clip_gradient, estimate_batch_gradient, AttackState};
use sfp_core::classifier::{cross_entropy, ArchitectureId, ClassifierModel};
use sfp_core::scene::BlendCoefficients;

/// Convex quadratic `½ xᵀAx + bᵀx` over the flattened (α, β) vector.
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn random(n_coefficients: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A = MᵀM + I keeps the curvature along any direction positive.
        let m: Vec<Vec<f64>> = (0..n_coefficients)
            .map(|_| (0..n_coefficients).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = (0..n_coefficients)
            .map(|i| {
                (0..n_coefficients)
                    .map(|j| {
                        let dot: f64 = (0..n_coefficients).map(|k| m[k][i] * m[k][j]).sum();
                        dot + if i == j { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let b = (0..n_coefficients).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Quadratic { a, b }
    }

    fn flatten(blend: &[BlendCoefficients]) -> Vec<f64> {
        blend.iter().flat_map(|c| [c.alpha, c.beta]).collect()
    }

    pub fn value(&self, blend: &[BlendCoefficients]) -> f64 {
        let x = Self::flatten(blend);
        let mut v = 0.0;
        for i in 0..x.len() {
            v += self.b[i] * x[i];
            for j in 0..x.len() {
                v += 0.5 * x[i] * self.a[i][j] * x[j];
            }
        }
        v
    }

    /// Exact derivative along `d`: (Ax + b)·d.
    pub fn directional_derivative(&self, blend: &[BlendCoefficients], d: &[f64]) -> f64 {
        let x = Self::flatten(blend);
        (0..x.len())
            .map(|i| (self.b[i] + (0..x.len()).map(|j| self.a[i][j] * x[j]).sum::<f64>()) * d[i])
            .sum()
    }

    /// dᵀAd, the curvature along `d`.
    pub fn curvature(&self, d: &[f64]) -> f64 {
        (0..d.len())
            .map(|i| d[i] * (0..d.len()).map(|j| self.a[i][j] * d[j]).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub relative_error: f64,
    pub absolute_error: f64,
    pub error_bound: f64,
    /// Bias at δ/2 divided by bias at δ.
    pub bias_factor: f64,
}

/// Compares the batch forward difference with the analytic directional
/// derivative of a random quadratic at an interior point.
pub fn gradient_check(seed: u64, fd_step: f64) -> GradientCheck {
    let n_meshes = 8;
    let q = Quadratic::random(2 * n_meshes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let blend: Vec<BlendCoefficients> = (0..n_meshes)
        .map(|_| BlendCoefficients::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
        .collect();
    let batch: Vec<usize> = (0..n_meshes).filter(|&i| i == n_meshes - 1 || rng.gen_bool(0.5)).collect();
    let mut d = vec![0.0; 2 * n_meshes];
    for &i in &batch {
        d[2 * i] = 1.0;
        d[2 * i + 1] = 1.0;
    }
    let state = AttackState::new(blend.clone(), 0.001);
    let oracle = |b: &[BlendCoefficients]| q.value(b);
    let exact = q.directional_derivative(&blend, &d);
    let estimate = |delta: f64| estimate_batch_gradient(&oracle, &state, &batch, delta).unwrap().0;
    let g = estimate(fd_step);
    let g_half = estimate(fd_step / 2.0);
    let curvature = q.curvature(&d);
    GradientCheck {
        relative_error: (g - exact).abs() / exact.abs(),
        absolute_error: (g - exact).abs(),
        error_bound: 2.0 * fd_step * curvature,
        bias_factor: (g_half - exact) / (g - exact),
    }
}

/// Textbook Adam ascent on one scalar with clipping to `[0, 1]`.
pub struct ReferenceAdam {
    pub x: f64,
    m: f64,
    v: f64,
    beta1_power: f64,
    beta2_power: f64,
}

impl ReferenceAdam {
    pub fn new(x: f64) -> Self {
        ReferenceAdam {
            x,
            m: 0.0,
            v: 0.0,
            beta1_power: 1.0,
            beta2_power: 1.0,
        }
    }

    pub fn step(&mut self, g: f64, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.beta1_power *= B1;
        self.beta2_power *= B2;
        self.m = B1 * self.m + (1.0 - B1) * g;
        self.v = B2 * self.v + (1.0 - B2) * g * g;
        let m_hat = self.m / (1.0 - self.beta1_power);
        let v_hat = self.v / (1.0 - self.beta2_power);
        self.x = (self.x + lr * m_hat / (v_hat.sqrt() + 1e-8)).clamp(0.0, 1.0);
    }
}

/// Three 100-step gradient sequences: constant, alternating and seeded random
/// (the random one passes through the clip).
pub fn adam_sequences() -> Vec<(&'static str, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    vec![
        ("constant", vec![0.7; 100]),
        ("alternating", (0..100).map(|k| if k % 2 == 0 { 1.0 } else { -0.4 }).collect()),
        ("random", (0..100).map(|_| clip_gradient(rng.gen_range(-3.0..3.0), 1.0)).collect()),
    ]
}

/// Largest per-step deviation between the attack's Adam and the reference.
pub fn adam_max_deviation(grads: &[f64], lr: f64) -> f64 {
    let start = [0.2, 0.5];
    let mut state = AttackState::new(vec![BlendCoefficients::new(start[0], start[1])], lr);
    let mut alpha = ReferenceAdam::new(start[0]);
    let mut beta = ReferenceAdam::new(start[1]);
    let mut worst = 0.0f64;
    for &g in grads {
        adam_step(&mut state, &[0], g, lr);
        alpha.step(g, lr);
        beta.step(g, lr);
        worst = worst
            .max((state.blend[0].alpha - alpha.x).abs())
            .max((state.blend[0].beta - beta.x).abs());
    }
    worst
}

#[derive(Debug, Clone)]
pub struct BackpropCheck {
    pub architecture: ArchitectureId,
    pub parameters: usize,
    pub worst_relative_error: f64,
}

/// Small instance of every architecture: (architecture, input side, width).
pub const BACKPROP_INSTANCES: [(ArchitectureId, usize, usize); 4] = [
    (ArchitectureId::Linear, 12, 1),
    (ArchitectureId::Mlp, 12, 1),
    (ArchitectureId::CnnSmall, 16, 2),
    (ArchitectureId::CnnLarge, 32, 2),
];

/// Central differences (step `h`) of the sample loss against backprop for
/// every parameter. The per-parameter error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn backprop_check(architecture: ArchitectureId, side: usize, width: usize, seed: u64, h: f64) -> BackpropCheck {
    let model = ClassifierModel::with_width(architecture, (side, side), 3, width, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
    let pixels: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
    let label = 1;
    let (_, analytic) = model.loss_and_gradient(&pixels, label).unwrap();
    let base = model.parameters();
    let loss_at = |values: &[f64]| {
        let mut m = model.clone();
        m.set_parameters(values).unwrap();
        cross_entropy(&m.probabilities(&pixels).unwrap(), label)
    };
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for k in 0..base.len() {
        probe[k] = base[k] + h;
        let up = loss_at(&probe);
        probe[k] = base[k] - h;
        let down = loss_at(&probe);
        probe[k] = base[k];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    BackpropCheck {
        architecture,
        parameters: base.len(),
        worst_relative_error: worst,
    }
}
