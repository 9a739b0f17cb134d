//! Dense, 3x3 convolution, pooling and ReLU layers with hand-written
//! backward passes. Activations are `(channels, height, width)` planes stored
//! contiguously.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Non-overlapping `k x k` average pooling.
    AvgPool { k: usize },
    /// 3x3 convolution, stride 1, zero padding 1. Weights `[out][in][3][3]`.
    Conv {
        in_c: usize,
        out_c: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool,
    /// Fully connected, weights `[out][in]`.
    Dense {
        n_in: usize,
        n_out: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// What a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Input(Vec<f64>),
    Argmax(Vec<usize>),
}

impl Layer {
    pub fn output_shape(&self, s: Shape) -> Shape {
        match self {
            Layer::AvgPool { k } => Shape::new(s.c, s.h / k, s.w / k),
            Layer::Conv { out_c, .. } => Shape::new(*out_c, s.h, s.w),
            Layer::Relu => s,
            Layer::MaxPool => Shape::new(s.c, s.h / 2, s.w / 2),
            Layer::Dense { n_out, .. } => Shape::new(*n_out, 1, 1),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    /// Tensor shapes of the parameters, in `params()` order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Layer::Conv { in_c, out_c, .. } => vec![vec![*out_c, *in_c, 3, 3], vec![*out_c]],
            Layer::Dense { n_in, n_out, .. } => vec![vec![*n_out, *n_in], vec![*n_out]],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, input: &[f64], s: Shape, keep_cache: bool) -> (Vec<f64>, Cache) {
        match self {
            Layer::AvgPool { k } => (avg_pool(input, s, *k), Cache::None),
            Layer::Conv {
                in_c,
                out_c,
                weight,
                bias,
            } => {
                debug_assert_eq!(*in_c, s.c);
                let out = conv_forward(input, s, *out_c, weight, bias);
                let cache = if keep_cache {
                    Cache::Input(input.to_vec())
                } else {
                    Cache::None
                };
                (out, cache)
            }
            Layer::Relu => {
                let out: Vec<f64> = input.iter().map(|&x| x.max(0.0)).collect();
                let cache = if keep_cache {
                    Cache::Input(input.to_vec())
                } else {
                    Cache::None
                };
                (out, cache)
            }
            Layer::MaxPool => {
                let (out, idx) = max_pool(input, s);
                (out, if keep_cache { Cache::Argmax(idx) } else { Cache::None })
            }
            Layer::Dense {
                n_in,
                n_out,
                weight,
                bias,
            } => {
                debug_assert_eq!(*n_in, s.len());
                let mut out = bias.clone();
                for (o, row) in out.iter_mut().zip(weight.chunks_exact(*n_in)).take(*n_out) {
                    *o += dot(row, input);
                }
                let cache = if keep_cache {
                    Cache::Input(input.to_vec())
                } else {
                    Cache::None
                };
                (out, cache)
            }
        }
    }

    /// Returns the gradient with respect to the layer input, accumulating
    /// parameter gradients into `grads` (same layout as `params()`).
    pub fn backward(&self, grad_out: &[f64], s: Shape, cache: &Cache, grads: &mut [Vec<f64>]) -> Vec<f64> {
        match (self, cache) {
            (Layer::AvgPool { k }, _) => avg_pool_backward(grad_out, s, *k),
            (Layer::Conv { out_c, weight, .. }, Cache::Input(input)) => {
                let (gw, gb) = grads.split_at_mut(1);
                conv_backward(input, s, *out_c, weight, grad_out, &mut gw[0], &mut gb[0])
            }
            (Layer::Relu, Cache::Input(input)) => grad_out
                .iter()
                .zip(input)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            (Layer::MaxPool, Cache::Argmax(idx)) => {
                let mut g = vec![0.0; s.len()];
                for (&i, &go) in idx.iter().zip(grad_out) {
                    g[i] += go;
                }
                g
            }
            (
                Layer::Dense {
                    n_in, weight, ..
                },
                Cache::Input(input),
            ) => {
                let mut g_in = vec![0.0; *n_in];
                let (gw, gb) = grads.split_at_mut(1);
                for (o, &go) in grad_out.iter().enumerate() {
                    gb[0][o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    let row = &weight[o * n_in..(o + 1) * n_in];
                    let grow = &mut gw[0][o * n_in..(o + 1) * n_in];
                    for i in 0..*n_in {
                        grow[i] += go * input[i];
                        g_in[i] += go * row[i];
                    }
                }
                g_in
            }
            _ => panic!("backward called without the forward cache"),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn avg_pool(input: &[f64], s: Shape, k: usize) -> Vec<f64> {
    let (oh, ow) = (s.h / k, s.w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; s.c * oh * ow];
    for c in 0..s.c {
        for y in 0..oh * k {
            let row = &input[(c * s.h + y) * s.w..(c * s.h + y) * s.w + ow * k];
            let orow = &mut out[(c * oh + y / k) * ow..(c * oh + y / k + 1) * ow];
            for (x, v) in row.iter().enumerate() {
                orow[x / k] += v * scale;
            }
        }
    }
    out
}

fn avg_pool_backward(grad_out: &[f64], s: Shape, k: usize) -> Vec<f64> {
    let (oh, ow) = (s.h / k, s.w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut g = vec![0.0; s.len()];
    for c in 0..s.c {
        for y in 0..oh * k {
            for x in 0..ow * k {
                g[(c * s.h + y) * s.w + x] = grad_out[(c * oh + y / k) * ow + x / k] * scale;
            }
        }
    }
    g
}

fn max_pool(input: &[f64], s: Shape) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut idx = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = (c * s.h + 2 * y) * s.w + 2 * x;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (c * s.h + 2 * y + dy) * s.w + 2 * x + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

/// Row span of output positions whose tap `d` (in -1..=1) stays inside `n`.
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

fn conv_forward(input: &[f64], s: Shape, out_c: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = s.h * s.w;
    let mut out = vec![0.0; out_c * plane];
    for oc in 0..out_c {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..s.c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(s.h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(s.w, dx);
                    let wv = weight[((oc * s.c + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut o[y * s.w + x0..y * s.w + x1];
                        let start = (iy * s.w) as isize + x0 as isize + dx;
                        let irow = &inp[start as usize..start as usize + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    s: Shape,
    out_c: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let plane = s.h * s.w;
    let mut g_in = vec![0.0; s.len()];
    for oc in 0..out_c {
        let go = &grad_out[oc * plane..(oc + 1) * plane];
        grad_b[oc] += go.iter().sum::<f64>();
        for ic in 0..s.c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            let gi = &mut g_in[ic * plane..(ic + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(s.h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(s.w, dx);
                    let widx = ((oc * s.c + ic) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &go[y * s.w + x0..y * s.w + x1];
                        let start = ((iy * s.w) as isize + x0 as isize + dx) as usize;
                        let irow = &inp[start..start + (x1 - x0)];
                        let girow = &mut gi[start..start + (x1 - x0)];
                        for ((g, iv), gv) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                            acc += g * iv;
                            *gv += g * wv;
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    g_in
}
