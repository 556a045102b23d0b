//! Multi-level GDIP: a chain of GDIP blocks, each guided by a different
//! encoder tap, applied progressively to the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{global_avg_pool, global_avg_pool_vjp, ConvStack, EncoderConfig, StackTrace};
use crate::error::{GdipError, Result};
use crate::gdip::{GateReport, GdipBlock, GdipConfig, GdipTrace};
use crate::params::{join, Linear, Params};
use crate::probe;
use crate::tensor::{Image, StopGrad, Tensor};

/// Order in which encoder taps guide the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LevelOrder {
    /// Shallowest tap first.
    #[default]
    #[serde(alias = "bottom-up", alias = "bottom_up")]
    BottomUp,
    /// Deepest tap first.
    #[serde(alias = "top-down", alias = "top_down")]
    TopDown,
}

impl LevelOrder {
    /// Orders 0-based layer indices for application.
    pub fn arrange(self, layers: &[usize]) -> Vec<usize> {
        let mut v = layers.to_vec();
        v.sort_unstable();
        v.dedup();
        if self == LevelOrder::TopDown {
            v.reverse();
        }
        v
    }
}

/// GDIP blocks chained over a set of encoder taps. Level `i` projects the
/// global-average-pooled tap `taps[i]` to an embedding and enhances the
/// output of level `i - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GdipChain {
    pub taps: Vec<usize>,
    pub projections: Vec<Linear>,
    pub blocks: Vec<GdipBlock>,
}

#[derive(Debug, Clone)]
pub(crate) struct LevelTrace {
    pooled: Vec<f64>,
    tap_dims: (usize, usize),
    block: GdipTrace,
}

#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub(crate) h: usize,
    pub(crate) w: usize,
    pub(crate) levels: Vec<LevelTrace>,
}

impl ChainTrace {
    /// Final enhanced buffer (interleaved).
    pub(crate) fn z(&self) -> &[f64] {
        self.levels.last().expect("chain has levels").block.z()
    }

    pub fn output(&self) -> Image {
        Image::from_clamped(self.h, self.w, self.z().to_vec())
    }

    /// Output of every level in application order.
    pub fn progressive(&self) -> Vec<Image> {
        self.levels.iter().map(|l| l.block.output()).collect()
    }

    pub fn gates(&self) -> Vec<Vec<f64>> {
        self.levels.iter().map(|l| l.block.gates().to_vec()).collect()
    }
}

impl GdipChain {
    /// `taps` are 0-based layer indices in application order.
    pub fn new(
        gdip: &GdipConfig,
        encoder: &EncoderConfig,
        taps: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        gdip.validate()?;
        if taps.is_empty() {
            return Err(GdipError::invalid("chain needs at least one tap"));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t >= encoder.num_layers) {
            return Err(GdipError::invalid(format!("tap {} exceeds encoder depth", bad + 1)));
        }
        let mut projections = Vec::with_capacity(taps.len());
        let mut blocks = Vec::with_capacity(taps.len());
        for &t in &taps {
            let c = encoder.channels(t);
            projections.push(Linear::uniform(
                gdip.embedding_dim,
                c,
                1.0 / (c as f64).sqrt(),
                rng,
            ));
            blocks.push(GdipBlock::new(gdip.clone(), rng)?);
        }
        Ok(GdipChain {
            taps,
            projections,
            blocks,
        })
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    /// Runs the chain on an interleaved image buffer.
    pub fn forward_buf(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        stack: &StackTrace,
        sg: &mut StopGrad,
    ) -> Result<ChainTrace> {
        let mut levels: Vec<LevelTrace> = Vec::with_capacity(self.levels());
        for (i, &t) in self.taps.iter().enumerate() {
            if t >= stack.len() {
                return Err(GdipError::invalid(format!("tap {} not produced by the encoder", t + 1)));
            }
            let (data, (c, th, tw)) = stack.tap_data(t);
            let pooled = global_avg_pool(data, c, th, tw);
            probe::hit(probe::Op::Linear);
            let e = self.projections[i].forward(&pooled)?;
            let input = match levels.last() {
                Some(prev) => prev.block.z(),
                None => x,
            };
            let block = self.blocks[i].forward_buf(input, h, w, &e, None, sg)?;
            levels.push(LevelTrace {
                pooled,
                tap_dims: (th, tw),
                block,
            });
        }
        Ok(ChainTrace { h, w, levels })
    }

    /// Reverse pass. Returns the gradient into the chain input image and the
    /// per-layer tap gradients (length `num_layers`).
    pub fn backward(
        &self,
        trace: &ChainTrace,
        g_z: &[f64],
        grads: &mut GdipChain,
        num_layers: usize,
    ) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
        let mut g_taps: Vec<Option<Vec<f64>>> = vec![None; num_layers];
        let mut g = g_z.to_vec();
        for i in (0..self.levels()).rev() {
            let level = &trace.levels[i];
            let (g_x, g_e) = self.blocks[i].backward(&level.block, &g, &mut grads.blocks[i]);
            let g_pooled = self.projections[i].backward(&level.pooled, &g_e, &mut grads.projections[i]);
            let (th, tw) = level.tap_dims;
            let g_map = global_avg_pool_vjp(&g_pooled, th, tw);
            match &mut g_taps[self.taps[i]] {
                Some(acc) => acc.iter_mut().zip(&g_map).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g_map),
            }
            g = g_x;
        }
        (g, g_taps)
    }
}

impl Params for GdipChain {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for i in 0..self.levels() {
            let p = join(prefix, &format!("level{}", i + 1));
            self.projections[i].visit(&join(&p, "proj"), f);
            self.blocks[i].visit(&join(&p, "block"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for i in 0..self.levels() {
            let p = join(prefix, &format!("level{}", i + 1));
            self.projections[i].visit_mut(&join(&p, "proj"), f);
            self.blocks[i].visit_mut(&join(&p, "block"), f);
        }
    }
}

/// Encoder stack plus a chain over all five taps.
#[derive(Debug, Clone, PartialEq)]
pub struct Mgdip {
    pub encoder: EncoderConfig,
    pub stack: ConvStack,
    pub chain: GdipChain,
}

impl Mgdip {
    pub fn new(
        encoder: EncoderConfig,
        gdip: &GdipConfig,
        order: LevelOrder,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stack = ConvStack::new(&encoder, rng)?;
        let taps = order.arrange(&(0..encoder.num_layers).collect::<Vec<_>>());
        let chain = GdipChain::new(gdip, &encoder, taps, rng)?;
        Ok(Mgdip {
            encoder,
            stack,
            chain,
        })
    }

    /// Encodes the original image once, then enhances it level by level.
    pub fn forward(&self, img: &Image) -> Result<(Image, Vec<GateReport>)> {
        let s = self.encoder.input_size;
        let planar = img.resize(s, s)?.to_planar();
        let stack = self.stack.forward(&planar, s, s, &mut StopGrad::live())?;
        let (h, w) = img.dims();
        let trace = self
            .chain
            .forward_buf(img.data(), h, w, &stack, &mut StopGrad::live())?;
        let reports = self
            .chain
            .blocks
            .iter()
            .zip(&trace.levels)
            .map(|(b, l)| b.report(&l.block))
            .collect();
        Ok((trace.output(), reports))
    }
}

impl Params for Mgdip {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stack.visit(&join(prefix, "enc"), f);
        self.chain.visit(&join(prefix, "chain"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stack.visit_mut(&join(prefix, "enc"), f);
        self.chain.visit_mut(&join(prefix, "chain"), f);
    }
}
