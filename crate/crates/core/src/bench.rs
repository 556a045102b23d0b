//! Per-image inference latency.

use std::time::Instant;

use crate::datagen::{synth_scene, SceneSpec};
use crate::error::{GdipError, Result};
use crate::model::Model;
use crate::tensor::Image;

pub const WARMUP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iters: usize,
}

impl Latency {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Latency {
            mean_ms: mean,
            std_ms: var.sqrt(),
            iters: ms.len(),
        }
    }
}

impl std::fmt::Display for Latency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3} ms over {} iterations", self.mean_ms, self.std_ms, self.iters)
    }
}

/// A fixed synthetic scene at the model's input size.
pub fn bench_image(model: &Model) -> Result<Image> {
    let size = model.config.encoder.input_size;
    Ok(synth_scene(&SceneSpec::random(0, 0, size, 3)?)?.0)
}

fn time_once(model: &Model, img: &Image) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(model.infer(img)?);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Mean and standard deviation of `iters` forward passes after
/// [`WARMUP`] untimed ones.
pub fn bench(model: &Model, img: &Image, iters: usize) -> Result<Latency> {
    if iters == 0 {
        return Err(GdipError::invalid("iters must be >= 1"));
    }
    for _ in 0..WARMUP {
        time_once(model, img)?;
    }
    let ms = (0..iters).map(|_| time_once(model, img)).collect::<Result<Vec<_>>>()?;
    Ok(Latency::from_samples(&ms))
}

/// Benchmarks two models with alternating iterations so that drift in
/// machine load affects both equally.
pub fn bench_interleaved(a: &Model, b: &Model, img: &Image, iters: usize) -> Result<(Latency, Latency)> {
    if iters == 0 {
        return Err(GdipError::invalid("iters must be >= 1"));
    }
    for _ in 0..WARMUP {
        time_once(a, img)?;
        time_once(b, img)?;
    }
    let mut ta = Vec::with_capacity(iters);
    let mut tb = Vec::with_capacity(iters);
    for i in 0..iters {
        if i % 2 == 0 {
            ta.push(time_once(a, img)?);
            tb.push(time_once(b, img)?);
        } else {
            tb.push(time_once(b, img)?);
            ta.push(time_once(a, img)?);
        }
    }
    Ok((Latency::from_samples(&ta), Latency::from_samples(&tb)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let l = Latency::from_samples(&[1.0, 3.0]);
        assert_eq!(l.mean_ms, 2.0);
        assert_eq!(l.std_ms, 1.0);
        assert_eq!(l.iters, 2);
    }
}
