//! The four trainable architectures: plain detector, GDIP in front of the
//! detector, MGDIP in front of the detector, and the detector with a
//! training-only GDIP reconstruction regularizer on its backbone taps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{
    loss_obj, loss_rec_buf, DetectionOutput, DetectionTarget, Detector, LossBreakdown, DEFAULT_GRID,
};
use crate::encoder::{
    hwc_to_planar, planar_to_hwc, ConvStack, Encoder, EncoderConfig, EncoderTrace, StackTrace,
};
use crate::error::{GdipError, Result};
use crate::gdip::{GateReport, GdipBlock, GdipConfig, GdipMode, GdipTrace};
use crate::ip_ops::IpKind;
use crate::mgdip::{ChainTrace, GdipChain, LevelOrder};
use crate::params::{join, zeros_like, Params};
use crate::tensor::{normalize_image, Image, StopGrad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Gdip,
    Mgdip,
    Regularizer,
}

impl Variant {
    pub fn enhances(self) -> bool {
        matches!(self, Variant::Gdip | Variant::Mgdip)
    }
}

/// Default backbone layers (1-based) carrying regularizer blocks.
pub const DEFAULT_REG_TAPS: [usize; 2] = [2, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub ops: Vec<IpKind>,
    pub mode: GdipMode,
    pub grid: usize,
    pub order: LevelOrder,
    /// 1-based backbone layers for the regularizer chain.
    pub reg_taps: Vec<usize>,
    /// Weight of the reconstruction loss; 0 disables it.
    pub alpha: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, encoder: EncoderConfig) -> Self {
        let grid = default_grid(&encoder);
        ModelConfig {
            variant,
            encoder,
            ops: IpKind::ALL.to_vec(),
            mode: GdipMode::Full,
            grid,
            order: LevelOrder::BottomUp,
            reg_taps: DEFAULT_REG_TAPS.to_vec(),
            alpha: 0.0,
        }
    }

    pub fn gdip_config(&self) -> GdipConfig {
        GdipConfig {
            ops: self.ops.clone(),
            mode: self.mode,
            embedding_dim: self.encoder.embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gdip_config().validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(GdipError::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        let c5 = self.encoder.tap_size(self.encoder.num_layers - 1);
        if self.grid == 0 || self.grid > c5 {
            return Err(GdipError::invalid(format!(
                "grid {} must be in 1..={c5} for this backbone",
                self.grid
            )));
        }
        if self.variant == Variant::Regularizer {
            if self.reg_taps.is_empty() {
                return Err(GdipError::invalid("regularizer needs at least one tap"));
            }
            if let Some(t) = self
                .reg_taps
                .iter()
                .find(|&&t| t == 0 || t > self.encoder.num_layers)
            {
                return Err(GdipError::invalid(format!("regularizer tap {t} out of range")));
            }
        }
        Ok(())
    }

    /// Whether training consumes paired clear images.
    pub fn uses_reconstruction(&self) -> bool {
        self.variant != Variant::Baseline && self.alpha > 0.0
    }
}

/// Grid of the detection head: 8 cells per side, capped by the last
/// backbone map.
pub fn default_grid(encoder: &EncoderConfig) -> usize {
    DEFAULT_GRID.min(encoder.tap_size(encoder.num_layers - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Enhancer {
    None,
    Gdip { encoder: Encoder, block: GdipBlock },
    Mgdip { stack: ConvStack, chain: GdipChain },
    Regularizer { chain: GdipChain },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub detector: Detector,
    pub enhancer: Enhancer,
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    /// The detector is drawn from its own random stream, so every variant
    /// built from one seed starts from the same detector weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(&config.encoder, config.grid, &mut substream(seed, 0))?;
        let mut rng = substream(seed, 1);
        let enc = &config.encoder;
        let gdip = config.gdip_config();
        let enhancer = match config.variant {
            Variant::Baseline => Enhancer::None,
            Variant::Gdip => Enhancer::Gdip {
                encoder: Encoder::new(enc.clone(), &mut rng)?,
                block: GdipBlock::new(gdip, &mut rng)?,
            },
            Variant::Mgdip => {
                let stack = ConvStack::new(enc, &mut rng)?;
                let taps = config.order.arrange(&(0..enc.num_layers).collect::<Vec<_>>());
                let chain = GdipChain::new(&gdip, enc, taps, &mut rng)?;
                Enhancer::Mgdip { stack, chain }
            }
            Variant::Regularizer => {
                let zero_based: Vec<usize> = config.reg_taps.iter().map(|t| t - 1).collect();
                let taps = config.order.arrange(&zero_based);
                Enhancer::Regularizer {
                    chain: GdipChain::new(&gdip, enc, taps, &mut rng)?,
                }
            }
        };
        Ok(Model {
            config,
            detector,
            enhancer,
        })
    }

    fn prepare(&self, img: &Image) -> Result<Image> {
        let s = self.config.encoder.input_size;
        img.resize(s, s)
    }

    /// Enhancement path of GDIP / MGDIP models; `None` for the others.
    pub fn enhance(&self, img: &Image) -> Result<Option<(Image, Vec<GateReport>)>> {
        let img = self.prepare(img)?;
        let (h, w) = img.dims();
        let planar = img.to_planar();
        let mut sg = StopGrad::live();
        Ok(match &self.enhancer {
            Enhancer::Gdip { encoder, block } => {
                let et = encoder.forward_planar(&planar, h, w, &mut sg)?;
                let t = block.forward_buf(img.data(), h, w, et.embedding(), None, &mut sg)?;
                Some((t.output(), vec![block.report(&t)]))
            }
            Enhancer::Mgdip { stack, chain } => {
                let st = stack.forward(&planar, h, w, &mut sg)?;
                let t = chain.forward_buf(img.data(), h, w, &st, &mut sg)?;
                let reports = chain
                    .blocks
                    .iter()
                    .zip(t.gates())
                    .map(|(b, g)| GateReport {
                        ops: b.config.ops.clone(),
                        gates: g,
                    })
                    .collect();
                Some((t.output(), reports))
            }
            Enhancer::None | Enhancer::Regularizer { .. } => None,
        })
    }

    /// Inference: enhancement (GDIP / MGDIP only) followed by detection.
    /// Regularizer blocks are never run here.
    pub fn infer(&self, img: &Image) -> Result<DetectionOutput> {
        let input = match self.enhance(img)? {
            Some((z, _)) => z,
            None => self.prepare(img)?,
        };
        let (h, w) = input.dims();
        let st = self
            .detector
            .stack
            .forward(&input.to_planar(), h, w, &mut StopGrad::live())?;
        Ok(self.detector.head_forward(&st)?.0)
    }

    /// Loss of one sample and its parameter gradients.
    pub fn loss_and_grad(
        &self,
        adverse: &Image,
        clear: Option<&Image>,
        target: &DetectionTarget,
    ) -> Result<(LossBreakdown, Model)> {
        self.loss_and_grad_with(adverse, clear, target, &mut StopGrad::live())
    }

    pub(crate) fn loss_and_grad_with(
        &self,
        adverse: &Image,
        clear: Option<&Image>,
        target: &DetectionTarget,
        sg: &mut StopGrad,
    ) -> Result<(LossBreakdown, Model)> {
        let img = self.prepare(adverse)?;
        let (h, w) = img.dims();
        let alpha = match self.config.variant {
            Variant::Baseline => 0.0,
            _ => self.config.alpha,
        };
        let recon_target = if alpha > 0.0 {
            let c = clear.ok_or_else(|| {
                GdipError::MissingClear("reconstruction loss needs the clear image".into())
            })?;
            Some(normalize_image(&self.prepare(c)?))
        } else {
            None
        };
        let mut grads = zeros_like(self);
        let nl = self.config.encoder.num_layers;

        let planar = img.to_planar();
        let enh = match &self.enhancer {
            Enhancer::None | Enhancer::Regularizer { .. } => None,
            Enhancer::Gdip { encoder, block } => {
                let et = encoder.forward_planar(&planar, h, w, sg)?;
                let bt = block.forward_buf(img.data(), h, w, et.embedding(), None, sg)?;
                Some(EnhTrace::Gdip(et, bt))
            }
            Enhancer::Mgdip { stack, chain } => {
                let st = stack.forward(&planar, h, w, sg)?;
                let ct = chain.forward_buf(img.data(), h, w, &st, sg)?;
                Some(EnhTrace::Mgdip(st, ct))
            }
        };
        let z: Vec<f64> = match &enh {
            Some(EnhTrace::Gdip(_, bt)) => bt.z().to_vec(),
            Some(EnhTrace::Mgdip(_, ct)) => ct.z().to_vec(),
            None => img.data().to_vec(),
        };
        let det_in = if enh.is_some() { hwc_to_planar(&z, h, w) } else { planar.clone() };
        let st = self.detector.stack.forward(&det_in, h, w, sg)?;
        let (out, ht) = self.detector.head_forward(&st)?;
        let (l_obj, g_logits) = loss_obj(&out, target);
        let g_c5 = self.detector.head.backward(&ht, &g_logits, &mut grads.detector.head);

        let mut g_taps: Vec<Option<Vec<f64>>> = vec![None; nl];
        g_taps[nl - 1] = Some(g_c5);
        let (mut l1, mut mse) = (0.0, 0.0);

        // regularizer: chain over the detector's own taps
        if let (Enhancer::Regularizer { chain }, Some(rt)) = (&self.enhancer, &recon_target) {
            let ct = chain.forward_buf(img.data(), h, w, &st, sg)?;
            let (a, b, g_rec) = loss_rec_buf(ct.z(), rt.data());
            l1 = a;
            mse = b;
            let g_z: Vec<f64> = g_rec.iter().map(|g| g * alpha).collect();
            let Enhancer::Regularizer { chain: gchain } = &mut grads.enhancer else {
                unreachable!("gradient model mirrors the variant")
            };
            let (_, reg_taps) = chain.backward(&ct, &g_z, gchain, nl);
            for (acc, extra) in g_taps.iter_mut().zip(reg_taps) {
                if let Some(e) = extra {
                    match acc {
                        Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
                        None => *acc = Some(e),
                    }
                }
            }
        }

        let g_det_in = self
            .detector
            .stack
            .backward(&st, &g_taps, &mut grads.detector.stack, enh.is_some());

        if let Some(enh) = &enh {
            let mut g_z = planar_to_hwc(&g_det_in.expect("input gradient requested"), h, w);
            if let Some(rt) = &recon_target {
                let (a, b, g_rec) = loss_rec_buf(&z, rt.data());
                l1 = a;
                mse = b;
                g_z.iter_mut().zip(&g_rec).for_each(|(g, r)| *g += alpha * r);
            }
            match (enh, &self.enhancer, &mut grads.enhancer) {
                (
                    EnhTrace::Gdip(et, bt),
                    Enhancer::Gdip { encoder, block },
                    Enhancer::Gdip {
                        encoder: genc,
                        block: gblock,
                    },
                ) => {
                    let (_, g_e) = block.backward(bt, &g_z, gblock);
                    encoder.backward(et, &[], Some(&g_e), genc, false);
                }
                (
                    EnhTrace::Mgdip(st, ct),
                    Enhancer::Mgdip { stack, chain },
                    Enhancer::Mgdip {
                        stack: gstack,
                        chain: gchain,
                    },
                ) => {
                    let (_, g_taps) = chain.backward(ct, &g_z, gchain, nl);
                    stack.backward(st, &g_taps, gstack, false);
                }
                _ => unreachable!("trace matches the enhancer"),
            }
        }

        Ok((LossBreakdown::new(l_obj, l1, mse, alpha), grads))
    }
}

enum EnhTrace {
    Gdip(EncoderTrace, GdipTrace),
    Mgdip(StackTrace, ChainTrace),
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.detector.visit(&join(prefix, "det"), f);
        match &self.enhancer {
            Enhancer::None => {}
            Enhancer::Gdip { encoder, block } => {
                encoder.visit(&join(prefix, "enc"), f);
                block.visit(&join(prefix, "gdip"), f);
            }
            Enhancer::Mgdip { stack, chain } => {
                stack.visit(&join(prefix, "enc"), f);
                chain.visit(&join(prefix, "chain"), f);
            }
            Enhancer::Regularizer { chain } => chain.visit(&join(prefix, "reg"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.detector.visit_mut(&join(prefix, "det"), f);
        match &mut self.enhancer {
            Enhancer::None => {}
            Enhancer::Gdip { encoder, block } => {
                encoder.visit_mut(&join(prefix, "enc"), f);
                block.visit_mut(&join(prefix, "gdip"), f);
            }
            Enhancer::Mgdip { stack, chain } => {
                stack.visit_mut(&join(prefix, "enc"), f);
                chain.visit_mut(&join(prefix, "chain"), f);
            }
            Enhancer::Regularizer { chain } => chain.visit_mut(&join(prefix, "reg"), f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{BBox, BoxTarget};
    use crate::encoder::NUM_LAYERS;
    use crate::gradcheck::{grad_check, FnOp};
    use crate::params::{flatten, names, unflatten};
    use crate::probe;
    use rand::Rng;

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(
            variant,
            EncoderConfig {
                input_size: 16,
                base_channels: 1,
                num_layers: NUM_LAYERS,
                embedding_dim: 3,
            },
        );
        c.alpha = 0.5;
        c
    }

    fn sample(seed: u64) -> (Image, Image, DetectionTarget) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clear = Image::from_fn(16, 16, |_, _, _| rng.gen_range(0.05..0.95)).unwrap();
        let adverse = Image::from_fn(16, 16, |y, x, c| 0.5 * clear.get(y, x, c) + 0.4).unwrap();
        let target = DetectionTarget::new(vec![BoxTarget {
            class: 1,
            bbox: BBox { cx: 0.4, cy: 0.6, w: 0.3, h: 0.2 },
        }])
        .unwrap();
        (adverse, clear, target)
    }

    fn check_model_gradients(variant: Variant) {
        let model = Model::new(tiny(variant), 7).unwrap();
        let (adverse, clear, target) = sample(8);
        let mut rec = StopGrad::recording();
        model
            .loss_and_grad_with(&adverse, Some(&clear), &target, &mut rec)
            .unwrap();
        let tape = rec.into_values();
        let with = |p: &[f64]| {
            let mut m = model.clone();
            unflatten(&mut m, p).unwrap();
            m
        };
        let op = FnOp {
            forward: |_: &[f64], p: &[f64]| {
                let mut sg = StopGrad::replaying(tape.clone());
                let (b, _) = with(p)
                    .loss_and_grad_with(&adverse, Some(&clear), &target, &mut sg)
                    .unwrap();
                vec![b.l_total]
            },
            backward: |_: &[f64], p: &[f64], g: &[f64]| {
                let (_, grads) = with(p).loss_and_grad(&adverse, Some(&clear), &target).unwrap();
                (vec![], flatten(&grads).iter().map(|v| v * g[0]).collect())
            },
        };
        let r = grad_check(&op, &[], &flatten(&model), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{variant:?}: {:e} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn gdip_model_gradients() {
        check_model_gradients(Variant::Gdip);
    }

    #[test]
    fn mgdip_model_gradients() {
        check_model_gradients(Variant::Mgdip);
    }

    #[test]
    fn regularizer_model_gradients() {
        check_model_gradients(Variant::Regularizer);
    }

    #[test]
    fn baseline_model_gradients() {
        check_model_gradients(Variant::Baseline);
    }

    #[test]
    fn zero_alpha_regularizer_matches_baseline() {
        let mut reg_cfg = tiny(Variant::Regularizer);
        reg_cfg.alpha = 0.0;
        let reg = Model::new(reg_cfg, 3).unwrap();
        let base = Model::new(tiny(Variant::Baseline), 3).unwrap();
        assert_eq!(reg.detector, base.detector);
        let (adverse, _, target) = sample(4);
        let (lr, gr) = reg.loss_and_grad(&adverse, None, &target).unwrap();
        let (lb, gb) = base.loss_and_grad(&adverse, None, &target).unwrap();
        assert_eq!(lr, lb);
        assert_eq!(gr.detector, gb.detector);
        assert!(flatten(&gr).iter().skip(crate::params::param_count(&gr.detector)).all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_requires_clear_image() {
        let model = Model::new(tiny(Variant::Regularizer), 1).unwrap();
        let (adverse, _, target) = sample(2);
        assert!(matches!(
            model.loss_and_grad(&adverse, None, &target),
            Err(GdipError::MissingClear(_))
        ));
        let mut base_cfg = tiny(Variant::Baseline);
        base_cfg.alpha = 3.0;
        let base = Model::new(base_cfg, 1).unwrap();
        let (b, _) = base.loss_and_grad(&adverse, None, &target).unwrap();
        assert_eq!(b.alpha, 0.0);
        assert_eq!(b.l_total, b.l_obj);
    }

    #[test]
    fn regularizer_inference_matches_baseline_graph() {
        let reg = Model::new(tiny(Variant::Regularizer), 5).unwrap();
        let base = Model::new(tiny(Variant::Baseline), 5).unwrap();
        let (adverse, _, _) = sample(6);
        let (out_r, counts_r) = probe::count(|| reg.infer(&adverse).unwrap());
        let (out_b, counts_b) = probe::count(|| base.infer(&adverse).unwrap());
        assert_eq!(counts_r, counts_b);
        assert!(!counts_r.contains_key(&probe::Op::IpOp));
        assert_eq!(out_r, out_b);
        let gdip = Model::new(tiny(Variant::Gdip), 5).unwrap();
        let (_, counts_g) = probe::count(|| gdip.infer(&adverse).unwrap());
        assert_eq!(counts_g.get(&probe::Op::IpOp), Some(&7));
    }

    #[test]
    fn parameter_groups_are_prefixed() {
        let reg = Model::new(tiny(Variant::Regularizer), 5).unwrap();
        let n = names(&reg);
        assert!(n.iter().any(|s| s.starts_with("reg.level2.block.")));
        assert!(n.iter().all(|s| s.starts_with("det.") || s.starts_with("reg.")));
        let gdip = Model::new(tiny(Variant::Gdip), 5).unwrap();
        let n = names(&gdip);
        assert!(n.contains(&"enc.fc.weight".to_string()));
        assert!(n.contains(&"gdip.gb0.weight".to_string()));
        assert!(n.contains(&"det.head.weight".to_string()));
    }

    #[test]
    fn enhance_only_for_enhancing_variants() {
        let (adverse, _, _) = sample(9);
        for v in [Variant::Baseline, Variant::Regularizer] {
            assert!(Model::new(tiny(v), 1).unwrap().enhance(&adverse).unwrap().is_none());
        }
        let (z, reports) = Model::new(tiny(Variant::Mgdip), 1)
            .unwrap()
            .enhance(&adverse)
            .unwrap()
            .unwrap();
        assert_eq!(reports.len(), 5);
        assert_eq!(z.dims(), (16, 16));
    }

    #[test]
    fn config_validation_and_grid() {
        assert_eq!(default_grid(&EncoderConfig::desk()), 4);
        let mut c = tiny(Variant::Regularizer);
        c.reg_taps = vec![0];
        assert!(Model::new(c.clone(), 0).is_err());
        c.reg_taps = vec![6];
        assert!(c.validate().is_err());
        c.reg_taps = vec![2, 4];
        c.alpha = -1.0;
        assert!(c.validate().is_err());
    }
}
