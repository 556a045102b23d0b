//! Convolutional vision encoder: five `conv 3x3 -> leaky ReLU -> avg-pool`
//! layers, global average pooling and a linear projection to the embedding.
//! Feature maps are planar `C x H x W` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdipError, Result};
use crate::params::{join, Linear, Params};
use crate::probe;
use crate::tensor::{Image, StopGrad, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NUM_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub num_layers: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 128,
            base_channels: 8,
            num_layers: NUM_LAYERS,
            embedding_dim: 64,
        }
    }

    pub fn full_scale() -> Self {
        EncoderConfig {
            input_size: 448,
            base_channels: 64,
            num_layers: NUM_LAYERS,
            embedding_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers != NUM_LAYERS {
            return Err(GdipError::invalid(format!(
                "encoder must have {NUM_LAYERS} layers, got {}",
                self.num_layers
            )));
        }
        if self.input_size == 0 || self.base_channels == 0 || self.embedding_dim == 0 {
            return Err(GdipError::invalid("encoder sizes must be positive"));
        }
        Ok(())
    }

    /// Filters of layer `l` (0-based).
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial side of the map produced by layer `l` (0-based).
    pub fn tap_size(&self, l: usize) -> usize {
        (0..=l).fold(self.input_size, |s, _| pooled_size(s))
    }
}

/// Output side of the 3x3 stride-2 pooling with padding 1.
pub fn pooled_size(n: usize) -> usize {
    n.div_ceil(2)
}

/// 3x3 convolution, zero padding 1, weights stored `[out, in * 9]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv3x3 {
            weight: Tensor::zeros(vec![c_out, c_in * 9]),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

    /// Kaiming-uniform fan-in initialization for the leaky ReLU slope.
    pub fn kaiming(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Conv3x3::zeros(c_in, c_out);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / (c_in * 9) as f64).sqrt();
        for v in conv.weight.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        conv
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1] / 9
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Params for Conv3x3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut cols = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let plane = &x[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut x = vec![0.0; c * n];
    for ci in 0..c {
        let plane = &mut x[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
    x
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with
/// optional transposed views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least the m x k, k x n and m x n elements
    // addressed by these strides, checked by the assertion above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(conv: &Conv3x3, cols: &[f64], n: usize) -> Vec<f64> {
    let (c_out, k) = (conv.c_out(), conv.c_in() * 9);
    let mut out = vec![0.0; c_out * n];
    for (o, b) in conv.bias.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(*b);
    }
    gemm(c_out, k, n, conv.weight.data(), false, cols, false, 1.0, &mut out);
    out
}

/// Average pooling 3x3, stride 2, padding 1; each window is divided by its
/// number of in-bounds taps.
pub fn avg_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (pooled_size(h), pooled_size(w));
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = window(ox, w);
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[y * w + xx];
                    }
                }
                out[(ci * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn avg_pool_vjp(g_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (pooled_size(h), pooled_size(w));
    let mut g = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut g[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = window(ox, w);
                let share = g_out[(ci * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        plane[y * w + xx] += share;
                    }
                }
            }
        }
    }
    g
}

/// In-bounds input range `[lo, hi)` of pooling window `o`.
fn window(o: usize, n: usize) -> (usize, usize) {
    let lo = (2 * o).saturating_sub(1);
    let hi = (2 * o + 2).min(n);
    (lo, hi)
}

/// Converts an interleaved `H x W x 3` buffer to planar `3 x H x W`.
pub fn hwc_to_planar(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            out[c * n + p] = x[p * 3 + c];
        }
    }
    out
}

pub fn planar_to_hwc(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            out[p * 3 + c] = x[c * n + p];
        }
    }
    out
}

/// One encoder layer on a planar `C x H x W` map.
pub fn conv_layer(x: &Tensor, conv: &Conv3x3) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(GdipError::invalid("conv_layer expects a C x H x W tensor"));
    };
    if c != conv.c_in() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![conv.c_in(), h, w],
            actual: x.shape().to_vec(),
        });
    }
    let (out, _) = layer_forward(conv, x.data(), h, w, &mut StopGrad::live());
    Ok(Tensor::from_parts(
        vec![conv.c_out(), pooled_size(h), pooled_size(w)],
        out,
    ))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    pre: Vec<f64>,
}

fn layer_forward(
    conv: &Conv3x3,
    x: &[f64],
    h: usize,
    w: usize,
    sg: &mut StopGrad,
) -> (Vec<f64>, LayerCache) {
    let cols = im2col(x, conv.c_in(), h, w);
    probe::hit(probe::Op::Conv);
    let pre = conv_forward(conv, &cols, h * w);
    let act = sg.leaky_relu(&pre, LEAKY_SLOPE);
    probe::hit(probe::Op::Pool);
    let out = avg_pool(&act, conv.c_out(), h, w);
    (out, LayerCache { h, w, cols, pre })
}

fn layer_backward(
    conv: &Conv3x3,
    cache: &LayerCache,
    g_out: &[f64],
    grads: &mut Conv3x3,
    need_input: bool,
) -> Option<Vec<f64>> {
    let (h, w) = (cache.h, cache.w);
    let n = h * w;
    let (c_in, c_out) = (conv.c_in(), conv.c_out());
    let mut g_pre = avg_pool_vjp(g_out, c_out, h, w);
    for (g, &p) in g_pre.iter_mut().zip(&cache.pre) {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    for (o, gb) in grads.bias.data_mut().iter_mut().enumerate() {
        *gb += g_pre[o * n..(o + 1) * n].iter().sum::<f64>();
    }
    let k = c_in * 9;
    gemm(c_out, n, k, &g_pre, false, &cache.cols, true, 1.0, grads.weight.data_mut());
    need_input.then(|| {
        let mut g_cols = vec![0.0; k * n];
        gemm(k, c_out, n, conv.weight.data(), true, &g_pre, false, 0.0, &mut g_cols);
        col2im(&g_cols, c_in, h, w)
    })
}

/// The five convolutional layers without the embedding head. Shared by
/// the encoder and the detector backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv3x3>,
}

/// Cached activations of a stack forward.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub(crate) caches: Vec<LayerCache>,
    /// Planar output of every layer.
    pub(crate) taps: Vec<Vec<f64>>,
    pub(crate) dims: Vec<(usize, usize, usize)>,
}

impl StackTrace {
    pub fn tap(&self, l: usize) -> Tensor {
        let (c, h, w) = self.dims[l];
        Tensor::from_parts(vec![c, h, w], self.taps[l].clone())
    }

    pub(crate) fn tap_data(&self, l: usize) -> (&[f64], (usize, usize, usize)) {
        (&self.taps[l], self.dims[l])
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

impl ConvStack {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let c_in = if l == 0 { 3 } else { config.channels(l - 1) };
                Conv3x3::kaiming(c_in, config.channels(l), rng)
            })
            .collect();
        Ok(ConvStack { layers })
    }

    /// Runs every layer on a planar `3 x H x W` input.
    pub fn forward(&self, x: &[f64], h: usize, w: usize, sg: &mut StopGrad) -> Result<StackTrace> {
        if x.len() != 3 * h * w {
            return Err(GdipError::ShapeMismatch {
                expected: vec![3, h, w],
                actual: vec![x.len()],
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut dims = Vec::with_capacity(self.layers.len());
        let (mut ch, mut cw) = (h, w);
        let mut cur = x.to_vec();
        for conv in &self.layers {
            let (out, cache) = layer_forward(conv, &cur, ch, cw, sg);
            caches.push(cache);
            ch = pooled_size(ch);
            cw = pooled_size(cw);
            dims.push((conv.c_out(), ch, cw));
            taps.push(out.clone());
            cur = out;
        }
        Ok(StackTrace { caches, taps, dims })
    }

    /// Backward from per-tap upstream gradients (`None` = no gradient into
    /// that tap). Returns the planar input gradient when `need_input`.
    pub fn backward(
        &self,
        trace: &StackTrace,
        g_taps: &[Option<Vec<f64>>],
        grads: &mut ConvStack,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let Some(deepest) = g_taps.iter().rposition(Option::is_some) else {
            return need_input.then(|| {
                let (h, w) = (trace.caches[0].h, trace.caches[0].w);
                vec![0.0; 3 * h * w]
            });
        };
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..=deepest).rev() {
            let mut g = carry.take().unwrap_or_else(|| vec![0.0; trace.taps[l].len()]);
            if let Some(extra) = &g_taps[l] {
                for (a, b) in g.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            carry = layer_backward(
                &self.layers[l],
                &trace.caches[l],
                &g,
                &mut grads.layers[l],
                l > 0 || need_input,
            );
        }
        carry
    }
}

impl Params for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("conv{}", i + 1)), f);
        }
    }
}

/// Per-channel spatial mean of a planar map.
pub fn global_avg_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    (0..c)
        .map(|ci| x[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64)
        .collect()
}

pub fn global_avg_pool_vjp(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(v / n as f64, n))
        .collect()
}

/// Encoder outputs: every layer tap and the final embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTaps {
    pub taps: Vec<Tensor>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub(crate) stack: StackTrace,
    pub(crate) pooled: Vec<f64>,
    pub(crate) embedding: Vec<f64>,
}

impl EncoderTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn stack(&self) -> &StackTrace {
        &self.stack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stack: ConvStack,
    pub fc: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let stack = ConvStack::new(&config, rng)?;
        let c_last = config.channels(config.num_layers - 1);
        let fc = Linear::uniform(config.embedding_dim, c_last, 1.0 / (c_last as f64).sqrt(), rng);
        Ok(Encoder { config, stack, fc })
    }

    /// Resizes to the configured input size when needed, then encodes.
    pub fn forward(&self, img: &Image) -> Result<EncoderTaps> {
        let s = self.config.input_size;
        let img = img.resize(s, s)?;
        let trace = self.forward_planar(&img.to_planar(), s, s, &mut StopGrad::live())?;
        Ok(EncoderTaps {
            taps: (0..trace.stack.len()).map(|l| trace.stack.tap(l)).collect(),
            embedding: trace.embedding,
        })
    }

    pub fn forward_planar(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        sg: &mut StopGrad,
    ) -> Result<EncoderTrace> {
        let stack = self.stack.forward(x, h, w, sg)?;
        let (last, (c, th, tw)) = stack.tap_data(stack.len() - 1);
        let pooled = global_avg_pool(last, c, th, tw);
        probe::hit(probe::Op::Linear);
        let embedding = self.fc.forward(&pooled)?;
        Ok(EncoderTrace {
            stack,
            pooled,
            embedding,
        })
    }

    /// Reverse pass from optional per-tap gradients and an embedding
    /// gradient. Returns the planar input gradient when `need_input`.
    pub fn backward(
        &self,
        trace: &EncoderTrace,
        g_taps: &[Option<Vec<f64>>],
        g_embedding: Option<&[f64]>,
        grads: &mut Encoder,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let mut g_taps = g_taps.to_vec();
        g_taps.resize(self.stack.layers.len(), None);
        if let Some(ge) = g_embedding {
            let g_pooled = self.fc.backward(&trace.pooled, ge, &mut grads.fc);
            let last = g_taps.len() - 1;
            let (_, (_, th, tw)) = trace.stack.tap_data(last);
            let g_map = global_avg_pool_vjp(&g_pooled, th, tw);
            match &mut g_taps[last] {
                Some(g) => g.iter_mut().zip(&g_map).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g_map),
            }
        }
        self.stack
            .backward(&trace.stack, &g_taps, &mut grads.stack, need_input)
    }
}

impl Params for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stack.visit(prefix, f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stack.visit_mut(prefix, f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}
