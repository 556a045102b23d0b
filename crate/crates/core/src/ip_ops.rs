//! Differentiable image-processing operations: tone curve, contrast
//! balance, unsharp-mask sharpening, dark-channel defogging, gamma, white
//! balance and identity.
//!
//! Internally every operation works on interleaved `H x W x 3` buffers that
//! are not required to stay inside `[0, 1]`: replayed surrogate passes used
//! for gradient checking can step slightly outside. The `apply_*` functions
//! are the validated public entry points.

use serde::{Deserialize, Serialize};

use crate::error::{GdipError, Result};
use crate::tensor::{clamp_passes, Image, MinMax, StopGrad, Tensor};

/// Segments of the piecewise-linear tone curve.
pub const TONE_SEGMENTS: usize = 8;
/// Neighborhood of the dark channel used by the defog operation.
pub const DARK_PATCH: usize = 7;
/// Lower bound on the estimated transmission.
pub const TRANSMISSION_FLOOR: f64 = 0.1;
const LUMA: [f64; 3] = [0.27, 0.67, 0.06];
const LUMA_EPS: f64 = 1e-6;
const GAMMA_EPS: f64 = 1e-8;
const LIGHT_FRACTION: f64 = 0.001;
const GAUSS_RADIUS: usize = 2;
const GAUSS_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IpKind {
    Tone,
    Contrast,
    Sharpen,
    Defog,
    Gamma,
    WhiteBalance,
    Identity,
}

impl IpKind {
    pub const ALL: [IpKind; 7] = [
        IpKind::Tone,
        IpKind::Contrast,
        IpKind::Sharpen,
        IpKind::Defog,
        IpKind::Gamma,
        IpKind::WhiteBalance,
        IpKind::Identity,
    ];

    pub fn param_count(self) -> usize {
        match self {
            IpKind::Tone => TONE_SEGMENTS,
            IpKind::Contrast | IpKind::Sharpen | IpKind::Defog | IpKind::Gamma => 1,
            IpKind::WhiteBalance => 3,
            IpKind::Identity => 0,
        }
    }

    /// Column label used in gate reports.
    pub fn label(self) -> &'static str {
        match self {
            IpKind::Tone => "T",
            IpKind::Contrast => "C",
            IpKind::Sharpen => "S",
            IpKind::Defog => "DF",
            IpKind::Gamma => "G",
            IpKind::WhiteBalance => "WB",
            IpKind::Identity => "I",
        }
    }
}

/// Operation parameters, always inside their valid ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum IpParams {
    Tone(Vec<f64>),
    Contrast(f64),
    Sharpen(f64),
    Defog(f64),
    Gamma(f64),
    WhiteBalance([f64; 3]),
    Identity,
}

impl IpParams {
    pub fn kind(&self) -> IpKind {
        match self {
            IpParams::Tone(_) => IpKind::Tone,
            IpParams::Contrast(_) => IpKind::Contrast,
            IpParams::Sharpen(_) => IpKind::Sharpen,
            IpParams::Defog(_) => IpKind::Defog,
            IpParams::Gamma(_) => IpKind::Gamma,
            IpParams::WhiteBalance(_) => IpKind::WhiteBalance,
            IpParams::Identity => IpKind::Identity,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            IpParams::Tone(t) => t.clone(),
            IpParams::Contrast(v)
            | IpParams::Sharpen(v)
            | IpParams::Defog(v)
            | IpParams::Gamma(v) => vec![*v],
            IpParams::WhiteBalance(w) => w.to_vec(),
            IpParams::Identity => Vec::new(),
        }
    }

    /// Rebuilds parameters from a flat vector without range checks.
    #[cfg(test)]
    pub(crate) fn from_slice(kind: IpKind, v: &[f64]) -> IpParams {
        match kind {
            IpKind::Tone => IpParams::Tone(v.to_vec()),
            IpKind::Contrast => IpParams::Contrast(v[0]),
            IpKind::Sharpen => IpParams::Sharpen(v[0]),
            IpKind::Defog => IpParams::Defog(v[0]),
            IpKind::Gamma => IpParams::Gamma(v[0]),
            IpKind::WhiteBalance => IpParams::WhiteBalance([v[0], v[1], v[2]]),
            IpKind::Identity => IpParams::Identity,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Maps raw linear-layer outputs into each operation's parameter range.
/// Every mapping sends `raw = 0` to the operation's neutral setting except
/// the tone curve (any uniform weights are neutral) and contrast.
pub fn map_raw_params(kind: IpKind, raw: &[f64]) -> Result<IpParams> {
    if raw.len() != kind.param_count() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![kind.param_count()],
            actual: vec![raw.len()],
        });
    }
    let ln3 = 3f64.ln();
    let ln2 = 2f64.ln();
    Ok(match kind {
        IpKind::Tone => IpParams::Tone(raw.iter().map(|&r| softplus(r) + 1e-3).collect()),
        IpKind::Contrast => IpParams::Contrast(sigmoid(raw[0])),
        IpKind::Sharpen => IpParams::Sharpen(2.0 * sigmoid(raw[0])),
        IpKind::Defog => IpParams::Defog(0.1 + 0.9 * sigmoid(raw[0])),
        IpKind::Gamma => IpParams::Gamma((raw[0].tanh() * ln3).exp()),
        IpKind::WhiteBalance => IpParams::WhiteBalance([
            (raw[0].tanh() * ln2).exp(),
            (raw[1].tanh() * ln2).exp(),
            (raw[2].tanh() * ln2).exp(),
        ]),
        IpKind::Identity => IpParams::Identity,
    })
}

/// Chain rule through [`map_raw_params`].
pub fn map_raw_params_vjp(kind: IpKind, raw: &[f64], g_params: &[f64]) -> Vec<f64> {
    let ln3 = 3f64.ln();
    let ln2 = 2f64.ln();
    raw.iter()
        .zip(g_params)
        .map(|(&r, &g)| {
            let s = sigmoid(r);
            let th = r.tanh();
            let d = match kind {
                IpKind::Tone => s,
                IpKind::Contrast => s * (1.0 - s),
                IpKind::Sharpen => 2.0 * s * (1.0 - s),
                IpKind::Defog => 0.9 * s * (1.0 - s),
                IpKind::Gamma => (th * ln3).exp() * ln3 * (1.0 - th * th),
                IpKind::WhiteBalance => (th * ln2).exp() * ln2 * (1.0 - th * th),
                IpKind::Identity => 0.0,
            };
            g * d
        })
        .collect()
}

/// Stop-gradient quantities an operation computed during its forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum OpStats {
    None,
    Contrast(MinMax),
    Defog { light: [f64; 3], dark: Vec<f64> },
}

/// Forward of one operation on an interleaved buffer.
pub(crate) fn op_forward(
    params: &IpParams,
    x: &[f64],
    h: usize,
    w: usize,
    sg: &mut StopGrad,
) -> (Vec<f64>, OpStats) {
    match params {
        IpParams::Tone(t) => (tone_fwd(x, t, sg), OpStats::None),
        IpParams::Contrast(a) => {
            let lum = luminance(x);
            let mm = sg.minmax(&lum);
            (contrast_fwd(x, *a, &lum, mm, sg), OpStats::Contrast(mm))
        }
        IpParams::Sharpen(l) => (sharpen_fwd(x, h, w, *l, sg), OpStats::None),
        IpParams::Defog(o) => {
            let light = sg.hold(|| atmospheric_light_buf(x, h, w).to_vec());
            let light = [light[0], light[1], light[2]];
            let dark = sg.hold(|| scaled_dark_channel(x, h, w, &light));
            let out = defog_fwd(x, *o, &light, &dark, sg);
            (out, OpStats::Defog { light, dark })
        }
        IpParams::Gamma(g) => (gamma_fwd(x, *g, sg), OpStats::None),
        IpParams::WhiteBalance(wb) => (wb_fwd(x, wb, sg), OpStats::None),
        IpParams::Identity => (x.to_vec(), OpStats::None),
    }
}

/// VJP of [`op_forward`]; returns `(input gradient, parameter gradient)`.
pub(crate) fn op_vjp(
    params: &IpParams,
    x: &[f64],
    h: usize,
    w: usize,
    stats: &OpStats,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    match (params, stats) {
        (IpParams::Tone(t), _) => tone_vjp(x, t, g),
        (IpParams::Contrast(a), OpStats::Contrast(mm)) => contrast_vjp(x, *a, *mm, g),
        (IpParams::Sharpen(l), _) => sharpen_vjp(x, h, w, *l, g),
        (IpParams::Defog(o), OpStats::Defog { light, dark }) => defog_vjp(x, *o, light, dark, g),
        (IpParams::Gamma(gm), _) => gamma_vjp(x, *gm, g),
        (IpParams::WhiteBalance(wb), _) => wb_vjp(x, wb, g),
        (IpParams::Identity, _) => (g.to_vec(), Vec::new()),
        (p, s) => panic!("operation {:?} paired with stats {:?}", p.kind(), s),
    }
}

// ---------------------------------------------------------------- tone

fn tone_fwd(x: &[f64], t: &[f64], sg: &mut StopGrad) -> Vec<f64> {
    let k = t.len();
    let total: f64 = t.iter().sum();
    let pre: Vec<f64> = x
        .iter()
        .flat_map(|&v| (0..k).map(move |j| k as f64 * v - j as f64))
        .collect();
    let seg = sg.clamp(&pre, 0.0, 1.0);
    seg.chunks_exact(k)
        .map(|s| s.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / total)
        .collect()
}

fn tone_vjp(x: &[f64], t: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = t.len();
    let kf = k as f64;
    let total: f64 = t.iter().sum();
    let mut gx = vec![0.0; x.len()];
    let mut gt = vec![0.0; k];
    for (i, (&v, &gi)) in x.iter().zip(g).enumerate() {
        let mut curve = 0.0;
        let mut slope = 0.0;
        let mut seg = [0.0; 64];
        for j in 0..k {
            let pre = kf * v - j as f64;
            seg[j] = pre.clamp(0.0, 1.0);
            curve += seg[j] * t[j];
            if clamp_passes(pre, 0.0, 1.0) {
                slope += kf * t[j];
            }
        }
        curve /= total;
        gx[i] = gi * slope / total;
        for j in 0..k {
            gt[j] += gi * (seg[j] - curve) / total;
        }
    }
    (gx, gt)
}

/// Piecewise-linear tone curve shared across channels.
pub fn apply_tone(img: &Image, t: &[f64]) -> Result<Image> {
    if t.len() < 2 || t.len() > 64 {
        return Err(GdipError::invalid("tone curve needs 2..=64 weights"));
    }
    if t.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(GdipError::invalid("tone weights must be positive"));
    }
    let out = tone_fwd(img.data(), t, &mut StopGrad::live());
    Ok(Image::from_clamped(img.height(), img.width(), out))
}

// ------------------------------------------------------------ contrast

fn luminance(x: &[f64]) -> Vec<f64> {
    x.chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect()
}

fn contrast_fwd(x: &[f64], alpha: f64, lum: &[f64], mm: MinMax, sg: &mut StopGrad) -> Vec<f64> {
    let stretched = mm.apply(lum);
    let mut pre = Vec::with_capacity(x.len());
    for (p, (&l, &e)) in x.chunks_exact(3).zip(lum.iter().zip(&stretched)) {
        let ratio = e / (l + LUMA_EPS);
        for &v in p {
            pre.push(alpha * v * ratio + (1.0 - alpha) * v);
        }
    }
    sg.clamp(&pre, 0.0, 1.0)
}

fn contrast_vjp(x: &[f64], alpha: f64, mm: MinMax, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scale = mm.scale();
    let stretched = {
        let lum = luminance(x);
        (mm.apply(&lum), lum)
    };
    let (en, lum) = stretched;
    let mut gx = vec![0.0; x.len()];
    let mut galpha = 0.0;
    for (p, px) in x.chunks_exact(3).enumerate() {
        let l = lum[p] + LUMA_EPS;
        let ratio = en[p] / l;
        let mut g_ratio = 0.0;
        for c in 0..3 {
            let i = 3 * p + c;
            let v = px[c];
            let pre = alpha * v * ratio + (1.0 - alpha) * v;
            if !clamp_passes(pre, 0.0, 1.0) {
                continue;
            }
            let gi = g[i];
            galpha += gi * (v * ratio - v);
            gx[i] += gi * (alpha * ratio + 1.0 - alpha);
            g_ratio += gi * alpha * v;
        }
        // ratio = stretched(lum) / (lum + eps), extremes frozen
        let d_ratio = scale / l - en[p] / (l * l);
        let g_lum = g_ratio * d_ratio;
        for c in 0..3 {
            gx[3 * p + c] += g_lum * LUMA[c];
        }
    }
    (gx, vec![galpha])
}

/// Blends the image with its full-range luminance stretch.
pub fn apply_contrast(img: &Image, alpha: f64) -> Result<Image> {
    check_range("contrast alpha", alpha, 0.0, 1.0)?;
    let mut sg = StopGrad::live();
    let lum = luminance(img.data());
    let mm = sg.minmax(&lum);
    let out = contrast_fwd(img.data(), alpha, &lum, mm, &mut sg);
    Ok(Image::from_clamped(img.height(), img.width(), out))
}

// ------------------------------------------------------------- sharpen

pub(crate) fn gaussian_taps() -> [f64; 2 * GAUSS_RADIUS + 1] {
    let mut taps = [0.0; 2 * GAUSS_RADIUS + 1];
    for (i, tap) in taps.iter_mut().enumerate() {
        let d = i as f64 - GAUSS_RADIUS as f64;
        *tap = (-d * d / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn offset(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Separable 5x5 Gaussian blur with replicate padding.
pub(crate) fn gaussian_blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = GAUSS_RADIUS as isize;
    let mut rows = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * x[(y * w + offset(xx, k as isize - r, w)) * 3 + c];
                }
                rows[(y * w + xx) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * rows[(offset(y, k as isize - r, h) * w + xx) * 3 + c];
                }
                out[(y * w + xx) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`gaussian_blur`].
fn gaussian_blur_adjoint(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = GAUSS_RADIUS as isize;
    let mut rows = vec![0.0; g.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                let gv = g[(y * w + xx) * 3 + c];
                for (k, &t) in taps.iter().enumerate() {
                    rows[(offset(y, k as isize - r, h) * w + xx) * 3 + c] += t * gv;
                }
            }
        }
    }
    let mut out = vec![0.0; g.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                let gv = rows[(y * w + xx) * 3 + c];
                for (k, &t) in taps.iter().enumerate() {
                    out[(y * w + offset(xx, k as isize - r, w)) * 3 + c] += t * gv;
                }
            }
        }
    }
    out
}

fn sharpen_fwd(x: &[f64], h: usize, w: usize, lambda: f64, sg: &mut StopGrad) -> Vec<f64> {
    let blur = gaussian_blur(x, h, w);
    let pre: Vec<f64> = x
        .iter()
        .zip(&blur)
        .map(|(&v, &b)| v + lambda * (v - b))
        .collect();
    sg.clamp(&pre, 0.0, 1.0)
}

fn sharpen_vjp(x: &[f64], h: usize, w: usize, lambda: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let blur = gaussian_blur(x, h, w);
    let mut g_pre = vec![0.0; x.len()];
    let mut glambda = 0.0;
    for i in 0..x.len() {
        let detail = x[i] - blur[i];
        if clamp_passes(x[i] + lambda * detail, 0.0, 1.0) {
            g_pre[i] = g[i];
            glambda += g[i] * detail;
        }
    }
    let back = gaussian_blur_adjoint(&g_pre, h, w);
    let gx = g_pre
        .iter()
        .zip(&back)
        .map(|(&gp, &b)| (1.0 + lambda) * gp - lambda * b)
        .collect();
    (gx, vec![glambda])
}

/// Unsharp mask `I + lambda * (I - Gaussian(I))`.
pub fn apply_sharpen(img: &Image, lambda: f64) -> Result<Image> {
    check_range("sharpen lambda", lambda, 0.0, 2.0)?;
    let out = sharpen_fwd(
        img.data(),
        img.height(),
        img.width(),
        lambda,
        &mut StopGrad::live(),
    );
    Ok(Image::from_clamped(img.height(), img.width(), out))
}

// --------------------------------------------------------------- defog

/// Channel minimum followed by a `patch x patch` minimum filter with
/// replicate padding, on a raw interleaved buffer.
fn dark_channel_buf(x: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let r = (patch / 2) as isize;
    let chan_min: Vec<f64> = x
        .chunks_exact(3)
        .map(|p| p[0].min(p[1]).min(p[2]))
        .collect();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(chan_min[y * w + offset(xx, d, w)]);
            }
            rows[y * w + xx] = m;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(rows[offset(y, d, h) * w + xx]);
            }
            out[y * w + xx] = m;
        }
    }
    out
}

/// Dark channel of an image: per-pixel channel minimum, then minimum over
/// a `patch x patch` neighborhood.
pub fn dark_channel(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(GdipError::invalid("dark-channel patch must be odd"));
    }
    let (h, w) = img.dims();
    Ok(Tensor::from_parts(
        vec![h, w],
        dark_channel_buf(img.data(), h, w, patch),
    ))
}

fn atmospheric_light_buf(x: &[f64], h: usize, w: usize) -> [f64; 3] {
    let dark = dark_channel_buf(x, h, w, DARK_PATCH);
    let n = h * w;
    let count = ((n as f64 * LIGHT_FRACTION).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // brightest first, earlier pixel on ties
    order.sort_by(|&a, &b| dark[b].total_cmp(&dark[a]).then(a.cmp(&b)));
    let mut light = [0.0; 3];
    for &p in &order[..count] {
        for c in 0..3 {
            light[c] += x[3 * p + c];
        }
    }
    light.map(|v| v / count as f64)
}

/// Atmospheric light: per-channel mean over the brightest 0.1% of the
/// dark channel (at least one pixel).
pub fn estimate_atmospheric_light(img: &Image) -> [f64; 3] {
    atmospheric_light_buf(img.data(), img.height(), img.width())
}

fn scaled_dark_channel(x: &[f64], h: usize, w: usize, light: &[f64; 3]) -> Vec<f64> {
    let scaled: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v / light[i % 3].max(1e-6))
        .collect();
    dark_channel_buf(&scaled, h, w, DARK_PATCH)
}

fn defog_fwd(x: &[f64], omega: f64, light: &[f64; 3], dark: &[f64], sg: &mut StopGrad) -> Vec<f64> {
    let t: Vec<f64> = dark.iter().map(|d| 1.0 - omega * d).collect();
    let t = sg.clamp(&t, TRANSMISSION_FLOOR, f64::INFINITY);
    let pre: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = light[i % 3];
            (v - a) / t[i / 3] + a
        })
        .collect();
    sg.clamp(&pre, 0.0, 1.0)
}

fn defog_vjp(
    x: &[f64],
    omega: f64,
    light: &[f64; 3],
    dark: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gomega = 0.0;
    for (p, &d) in dark.iter().enumerate() {
        let t_raw = 1.0 - omega * d;
        let t_live = clamp_passes(t_raw, TRANSMISSION_FLOOR, f64::INFINITY);
        let t = t_raw.max(TRANSMISSION_FLOOR);
        for c in 0..3 {
            let i = 3 * p + c;
            let a = light[c];
            let pre = (x[i] - a) / t + a;
            if !clamp_passes(pre, 0.0, 1.0) {
                continue;
            }
            gx[i] = g[i] / t;
            if t_live {
                // d pre / d t = -(x - a) / t^2 and d t / d omega = -dark
                gomega += g[i] * (x[i] - a) * d / (t * t);
            }
        }
    }
    (gx, vec![gomega])
}

/// Inverts the scattering model using a dark-channel transmission
/// estimate `t = 1 - omega * dark(I / A)`.
pub fn apply_defog(img: &Image, omega: f64) -> Result<Image> {
    check_range("defog omega", omega, 0.1, 1.0)?;
    let (h, w) = img.dims();
    let (out, _) = op_forward(
        &IpParams::Defog(omega),
        img.data(),
        h,
        w,
        &mut StopGrad::live(),
    );
    Ok(Image::from_clamped(h, w, out))
}

// --------------------------------------------------------------- gamma

fn gamma_fwd(x: &[f64], gamma: f64, sg: &mut StopGrad) -> Vec<f64> {
    let base = sg.clamp(x, 0.0, f64::INFINITY);
    let pre: Vec<f64> = base
        .iter()
        .map(|&v| (gamma * (v + GAMMA_EPS).ln()).exp())
        .collect();
    sg.clamp(&pre, 0.0, 1.0)
}

fn gamma_vjp(x: &[f64], gamma: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let base = v.max(0.0);
        let log = (base + GAMMA_EPS).ln();
        let pre = (gamma * log).exp();
        if !clamp_passes(pre, 0.0, 1.0) {
            continue;
        }
        ggamma += g[i] * pre * log;
        if clamp_passes(v, 0.0, f64::INFINITY) {
            gx[i] = g[i] * gamma * pre / (base + GAMMA_EPS);
        }
    }
    (gx, vec![ggamma])
}

/// Elementwise power, computed as `exp(gamma * ln(I + 1e-8))`.
pub fn apply_gamma(img: &Image, gamma: f64) -> Result<Image> {
    check_range("gamma", gamma, 1.0 / 3.0, 3.0)?;
    let out = gamma_fwd(img.data(), gamma, &mut StopGrad::live());
    Ok(Image::from_clamped(img.height(), img.width(), out))
}

// ------------------------------------------------------- white balance

fn wb_fwd(x: &[f64], wb: &[f64; 3], sg: &mut StopGrad) -> Vec<f64> {
    let pre: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * wb[i % 3]).collect();
    sg.clamp(&pre, 0.0, 1.0)
}

fn wb_vjp(x: &[f64], wb: &[f64; 3], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; 3];
    for (i, &v) in x.iter().enumerate() {
        let c = i % 3;
        if clamp_passes(v * wb[c], 0.0, 1.0) {
            gx[i] = g[i] * wb[c];
            gw[c] += g[i] * v;
        }
    }
    (gx, gw)
}

/// Per-channel gains.
pub fn apply_white_balance(img: &Image, wb: [f64; 3]) -> Result<Image> {
    for w in wb {
        check_range("white-balance gain", w, 0.5, 2.0)?;
    }
    let out = wb_fwd(img.data(), &wb, &mut StopGrad::live());
    Ok(Image::from_clamped(img.height(), img.width(), out))
}

pub fn apply_identity(img: &Image) -> Image {
    img.clone()
}

/// Applies any operation to an image.
pub fn apply_op(params: &IpParams, img: &Image) -> Image {
    let (h, w) = img.dims();
    let (out, _) = op_forward(params, img.data(), h, w, &mut StopGrad::live());
    Image::from_clamped(h, w, out)
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    const SLACK: f64 = 1e-12;
    if v.is_finite() && v >= lo - SLACK && v <= hi + SLACK {
        Ok(())
    } else {
        Err(GdipError::invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}
