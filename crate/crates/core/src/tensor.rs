//! Image and tensor containers, min-max normalization and the stop-gradient
//! tape shared by every differentiable stage.

use crate::error::{GdipError, Result};

/// Ranges narrower than this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GdipError::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor without validating finiteness. The length must match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An `H x W x 3` RGB image with values in `[0, 1]`, stored interleaved
/// (row-major, channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GdipError::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(GdipError::ShapeMismatch {
                expected: vec![height, width, 3],
                actual: vec![data.len()],
            });
        }
        check_finite(&data)?;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(GdipError::OutOfRange { index, value });
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Clamps every value into `[0, 1]`. Values must already be finite.
    pub(crate) fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width, 3], self.data.clone())
    }

    /// Planar `3 x H x W` copy, the layout convolutions consume.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[n + p] = px[1];
            out[2 * n + p] = px[2];
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(GdipError::invalid("resize target must be positive"));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
                    let bot = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        Ok(Image::from_clamped(height, width, data))
    }
}

pub(crate) fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(GdipError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Extremes of a buffer, frozen for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn of(data: &[f64]) -> MinMax {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in data {
            min = min.min(v);
            max = max.max(v);
        }
        MinMax { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        self.max - self.min < DEGENERATE_RANGE
    }

    /// Multiplier applied by the normalization; zero for degenerate ranges.
    pub fn scale(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            1.0 / (self.max - self.min)
        }
    }

    /// Affine rescale; no clamping, so values outside the frozen extremes
    /// map outside `[0, 1]`.
    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        if self.is_degenerate() {
            return vec![0.0; data.len()];
        }
        let range = self.max - self.min;
        data.iter().map(|&v| (v - self.min) / range).collect()
    }

    /// Backward with the extremes held constant.
    pub fn backward(&self, g_out: &[f64]) -> Vec<f64> {
        let scale = self.scale();
        g_out.iter().map(|g| g * scale).collect()
    }
}

/// Min-max normalization over the whole tensor.
pub fn normalize_minmax(t: &Tensor) -> Result<Tensor> {
    if t.is_empty() {
        return Err(GdipError::invalid("cannot normalize an empty tensor"));
    }
    check_finite(t.data())?;
    let stats = MinMax::of(t.data());
    Ok(Tensor::from_parts(t.shape.clone(), stats.apply(t.data())))
}

/// VJP of [`normalize_minmax`] treating `min(t)` and `max(t)` as constants.
pub fn normalize_minmax_vjp(t: &Tensor, g_out: &Tensor) -> Result<Tensor> {
    if t.shape() != g_out.shape() {
        return Err(GdipError::ShapeMismatch {
            expected: t.shape().to_vec(),
            actual: g_out.shape().to_vec(),
        });
    }
    check_finite(t.data())?;
    let stats = MinMax::of(t.data());
    Ok(Tensor::from_parts(
        t.shape.clone(),
        stats.backward(g_out.data()),
    ))
}

/// Normalizes a finite buffer into an image of the given size.
pub(crate) fn normalize_to_image(
    height: usize,
    width: usize,
    data: &[f64],
    stats: MinMax,
) -> Image {
    Image::from_clamped(height, width, stats.apply(data))
}

/// Min-max normalizes an image over all of its values.
pub fn normalize_image(img: &Image) -> Image {
    let stats = MinMax::of(img.data());
    normalize_to_image(img.height, img.width, img.data(), stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeMode {
    Live,
    Record,
    Replay,
}

/// Tape of stop-gradient quantities: normalization extremes, atmospheric
/// light, dark channels, and the branch taken by every clamp or leaky ReLU.
///
/// In `Record` mode every held value is stored in call order; a `Replay`
/// tape hands the same values back, which turns a forward pass into the
/// piecewise-smooth surrogate whose exact gradient the VJPs compute. Finite
/// differences must be taken against that surrogate.
#[derive(Debug, Clone)]
pub struct StopGrad {
    mode: TapeMode,
    values: Vec<Vec<f64>>,
    cursor: usize,
}

impl Default for StopGrad {
    fn default() -> Self {
        StopGrad::live()
    }
}

impl StopGrad {
    pub fn live() -> Self {
        StopGrad {
            mode: TapeMode::Live,
            values: Vec::new(),
            cursor: 0,
        }
    }

    pub fn recording() -> Self {
        StopGrad {
            mode: TapeMode::Record,
            ..StopGrad::live()
        }
    }

    pub fn replaying(values: Vec<Vec<f64>>) -> Self {
        StopGrad {
            mode: TapeMode::Replay,
            values,
            cursor: 0,
        }
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }

    pub fn hold(&mut self, compute: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        match self.mode {
            TapeMode::Live => compute(),
            TapeMode::Record => {
                let v = compute();
                self.values.push(v.clone());
                v
            }
            TapeMode::Replay => {
                let v = self
                    .values
                    .get(self.cursor)
                    .cloned()
                    .expect("stop-gradient tape exhausted: replayed a different graph");
                self.cursor += 1;
                v
            }
        }
    }

    pub fn minmax(&mut self, data: &[f64]) -> MinMax {
        let v = self.hold(|| {
            let m = MinMax::of(data);
            vec![m.min, m.max]
        });
        MinMax {
            min: v[0],
            max: v[1],
        }
    }

    /// Clamps into `[lo, hi]`. A value passes through only when strictly
    /// inside; that is the rule the VJPs use, see [`clamp_passes`].
    pub fn clamp(&mut self, pre: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        match self.mode {
            TapeMode::Live => pre.iter().map(|v| v.clamp(lo, hi)).collect(),
            TapeMode::Record => {
                let codes: Vec<f64> = pre
                    .iter()
                    .map(|&v| {
                        if v <= lo {
                            0.0
                        } else if v >= hi {
                            2.0
                        } else {
                            1.0
                        }
                    })
                    .collect();
                self.values.push(codes);
                pre.iter().map(|v| v.clamp(lo, hi)).collect()
            }
            TapeMode::Replay => {
                let codes = self.hold(Vec::new);
                pre.iter()
                    .zip(&codes)
                    .map(|(&v, &code)| match code as u8 {
                        0 => lo,
                        2 => hi,
                        _ => v,
                    })
                    .collect()
            }
        }
    }

    /// Leaky ReLU with the branch frozen on replay.
    pub fn leaky_relu(&mut self, pre: &[f64], slope: f64) -> Vec<f64> {
        let apply = |v: f64, positive: bool| if positive { v } else { slope * v };
        match self.mode {
            TapeMode::Live => pre.iter().map(|&v| apply(v, v > 0.0)).collect(),
            TapeMode::Record => {
                self.values
                    .push(pre.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect());
                pre.iter().map(|&v| apply(v, v > 0.0)).collect()
            }
            TapeMode::Replay => {
                let codes = self.hold(Vec::new);
                pre.iter()
                    .zip(&codes)
                    .map(|(&v, &code)| apply(v, code > 0.5))
                    .collect()
            }
        }
    }
}

/// Gradient mask of [`StopGrad::clamp`].
#[inline]
pub fn clamp_passes(v: f64, lo: f64, hi: f64) -> bool {
    v > lo && v < hi
}
