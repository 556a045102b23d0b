//! SGD training with a per-step cosine learning-rate schedule, validation
//! after every epoch, CSV logging and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::datagen::{load_samples, rng_for, Manifest, Sample};
use crate::detect::{DetectionHead, LossBreakdown, DEFAULT_ALPHA, NUM_CLASSES};
use crate::encoder::{EncoderConfig, NUM_LAYERS};
use crate::error::{GdipError, Result};
use crate::gdip::GdipMode;
use crate::ip_ops::IpKind;
use crate::metrics::{psnr, EvalSummary, ImageEval};
use crate::mgdip::LevelOrder;
use crate::model::{default_grid, Model, ModelConfig, Variant, DEFAULT_REG_TAPS};
use crate::params::{add_assign, scale, zeros_like, Params};

/// Minimum confidence kept when decoding predictions for evaluation.
pub const DECODE_MIN_CONF: f64 = 0.01;

fn default_ops() -> Vec<IpKind> {
    IpKind::ALL.to_vec()
}

fn default_reg_taps() -> Vec<usize> {
    DEFAULT_REG_TAPS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub mode: GdipMode,
    #[serde(default = "default_ops")]
    pub ops: Vec<IpKind>,
    /// Reconstruction weight; `None` uses 1e-4 for the regularizer and 0
    /// (pure detection loss) otherwise. Ignored by the baseline.
    pub alpha: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub image_size: usize,
    pub base_channels: usize,
    pub embedding_dim: usize,
    /// Detection grid; defaults to 8 capped by the last backbone map.
    pub grid: Option<usize>,
    pub order: LevelOrder,
    /// 1-based backbone layers carrying regularizer blocks.
    #[serde(default = "default_reg_taps")]
    pub reg_taps: Vec<usize>,
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Gdip,
            mode: GdipMode::Full,
            ops: default_ops(),
            alpha: None,
            batch_size: 6,
            epochs: 80,
            lr_min: 1e-6,
            lr_max: 1e-4,
            weight_decay: 5e-4,
            momentum: 0.0,
            image_size: 128,
            base_channels: 8,
            embedding_dim: 64,
            grid: None,
            order: LevelOrder::BottomUp,
            reg_taps: default_reg_taps(),
            seed: 0,
            train_data: PathBuf::from("data/train"),
            val_data: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn effective_alpha(&self) -> f64 {
        match (self.variant, self.alpha) {
            (Variant::Baseline, _) => 0.0,
            (_, Some(a)) => a,
            (Variant::Regularizer, None) => DEFAULT_ALPHA,
            (_, None) => 0.0,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let encoder = EncoderConfig {
            input_size: self.image_size,
            base_channels: self.base_channels,
            num_layers: NUM_LAYERS,
            embedding_dim: self.embedding_dim,
        };
        ModelConfig {
            variant: self.variant,
            grid: self.grid.unwrap_or_else(|| default_grid(&encoder)),
            encoder,
            ops: self.ops.clone(),
            mode: self.mode,
            order: self.order,
            reg_taps: self.reg_taps.clone(),
            alpha: self.effective_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(GdipError::invalid("batch_size and epochs must be >= 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(GdipError::invalid("need 0 <= lr_min <= lr_max"));
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(GdipError::invalid("weight_decay must be >= 0 and momentum in [0, 1)"));
        }
        self.model_config().validate()
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(GdipError::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(GdipError::invalid("step beyond total_steps"));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

fn decays(name: &str) -> bool {
    !name.ends_with("bias")
}

/// `p <- p - lr (g + wd p)`, no decay on biases. Rejects the whole step if
/// any gradient is non-finite.
pub fn sgd_step<P: Params>(params: &mut P, grads: &P, lr: f64, weight_decay: f64) -> Result<()> {
    check_grads(grads)?;
    let flat: Vec<f64> = crate::params::flatten(grads);
    let mut offset = 0;
    params.visit_mut("", &mut |name, t| {
        let wd = if decays(name) { weight_decay } else { 0.0 };
        for (p, g) in t.data_mut().iter_mut().zip(&flat[offset..]) {
            *p -= lr * (g + wd * *p);
        }
        offset += t.len();
    });
    Ok(())
}

/// Heavy-ball variant: `v <- mu v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_momentum_step<P: Params>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    check_grads(grads)?;
    let g = crate::params::flatten(grads);
    let mut v = crate::params::flatten(velocity);
    let mut offset = 0;
    params.visit_mut("", &mut |name, t| {
        let wd = if decays(name) { weight_decay } else { 0.0 };
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let k = offset + i;
            v[k] = momentum * v[k] + g[k] + wd * *p;
            *p -= lr * v[k];
        }
        offset += t.len();
    });
    crate::params::unflatten(velocity, &v)
}

fn check_grads<P: Params>(grads: &P) -> Result<()> {
    let mut bad = None;
    grads.visit("", &mut |name, t| {
        if bad.is_none() && t.data().iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(GdipError::NonFiniteGradient { name }),
        None => Ok(()),
    }
}

/// Evaluation of a model on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub images: Vec<ImageEval>,
    /// Mean detection loss.
    pub l_obj: f64,
}

/// Runs inference on every sample. PSNR is measured on adverse samples
/// with a clear reference: enhanced output for GDIP / MGDIP models, the
/// raw input otherwise.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Evaluation> {
    let per: Vec<(ImageEval, Option<f64>, f64)> = samples
        .par_iter()
        .map(|s| {
            let out = model.infer(&s.adverse)?;
            let (l_obj, _) = crate::detect::loss_obj(&out, &s.target);
            let detections = DetectionHead::decode(&out, DECODE_MIN_CONF);
            let p = match &s.clear {
                Some(clear) if s.condition != "clear" => {
                    let shown = match model.enhance(&s.adverse)? {
                        Some((z, _)) => z,
                        None => s.adverse.clone(),
                    };
                    let s = model.config.encoder.input_size;
                    Some(psnr(&shown.resize(s, s)?, &clear.resize(s, s)?)?)
                }
                _ => None,
            };
            Ok((
                ImageEval {
                    detections,
                    target: s.target.clone(),
                },
                p,
                l_obj,
            ))
        })
        .collect::<Result<_>>()?;
    let psnrs: Vec<f64> = per.iter().filter_map(|p| p.1).collect();
    let l_obj = per.iter().map(|p| p.2).sum::<f64>() / per.len().max(1) as f64;
    let images: Vec<ImageEval> = per.into_iter().map(|p| p.0).collect();
    Ok(Evaluation {
        summary: EvalSummary::compute(&images, NUM_CLASSES, &psnrs),
        images,
        l_obj,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_map: Option<f64>,
    pub val_psnr: Option<f64>,
    pub val_l_obj: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,step,lr,l_obj,l_reg,l_total,val_map,val_psnr,val_l_obj";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(crate::metrics::format_db).unwrap_or_default();
        format!(
            "{},{},{:.6e},{:.10},{:.10},{:.10},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss.l_obj,
            self.loss.l_reg,
            self.loss.l_total,
            opt(self.val_map),
            opt(self.val_psnr),
            self.val_l_obj.map(|v| format!("{v:.10}")).unwrap_or_default(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
}

pub const LOG_FILE: &str = "log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Trains from the manifests named in the config, writing the log and
/// checkpoints to `run_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let need_clear = model_cfg.uses_reconstruction();
    let train_set = load_samples(&Manifest::load(&cfg.train_data)?, need_clear)?;
    if train_set.is_empty() {
        return Err(GdipError::invalid("training set is empty"));
    }
    let val_set = match &cfg.val_data {
        Some(p) => load_val(p)?,
        None => Vec::new(),
    };
    train_on(cfg, &train_set, &val_set)
}

/// Validation samples, with clear references when every row has one.
pub fn load_val(path: &Path) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(path)?;
    let have_clear = manifest
        .rows
        .iter()
        .all(|r| !r.clear.is_empty() && manifest.resolve(&r.clear).exists());
    load_samples(&manifest, have_clear)
}

pub fn train_on(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    if model_cfg.uses_reconstruction() {
        if let Some(s) = train_set.iter().find(|s| s.clear.is_none()) {
            return Err(GdipError::MissingClear(format!(
                "{} sample without a clear reference",
                s.condition
            )));
        }
    }
    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut velocity = (cfg.momentum > 0.0).then(|| zeros_like(&model));
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut lr_trace = Vec::with_capacity(total);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut log_text = format!("{LOG_HEADER}\n");
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed ^ 0x5eed_0f5a_3b1e, epoch as u64));
        let mut epoch_losses = Vec::with_capacity(n);
        let mut lr = cfg.lr_max;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, Model)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    model.loss_and_grad(&s.adverse, s.clear.as_ref(), &s.target)
                })
                .collect::<Result<_>>()?;
            let mut grads = zeros_like(&model);
            for (loss, g) in &results {
                add_assign(&mut grads, g);
                epoch_losses.push(*loss);
            }
            scale(&mut grads, 1.0 / batch.len() as f64);
            lr = cosine_lr(step, total, cfg.lr_min, cfg.lr_max)?;
            match &mut velocity {
                Some(v) => sgd_momentum_step(&mut model, &grads, v, lr, cfg.weight_decay, cfg.momentum)?,
                None => sgd_step(&mut model, &grads, lr, cfg.weight_decay)?,
            }
            lr_trace.push(lr);
            step += 1;
        }
        let (val_map, val_psnr, val_l_obj) = if val_set.is_empty() {
            (None, None, None)
        } else {
            let ev = evaluate(&model, val_set)?;
            (Some(ev.summary.map), ev.summary.psnr_mean, Some(ev.l_obj))
        };
        let log = EpochLog {
            epoch,
            step,
            lr,
            loss: LossBreakdown::mean(&epoch_losses),
            val_map,
            val_psnr,
            val_l_obj,
        };
        let _ = writeln!(log_text, "{}", log.csv_row());
        fs::write(cfg.run_dir.join(LOG_FILE), &log_text)?;
        logs.push(log);
        save_model(&model, &cfg.run_dir.join(LAST_CKPT))?;
        let score = val_map.unwrap_or(-log.loss.l_total);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, epoch));
            save_model(&model, &cfg.run_dir.join(BEST_CKPT))?;
        }
    }
    Ok(TrainOutcome {
        model,
        logs,
        lr_trace,
        best_epoch: best.map_or(0, |b| b.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Scalar(Tensor);

    impl Params for Scalar {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&crate::params::join(prefix, "p"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&crate::params::join(prefix, "p"), &mut self.0);
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn cosine_schedule_points() {
        assert!((cosine_lr(0, 100, 1e-6, 1e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(100, 100, 1e-6, 1e-4).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-6, 1e-4).unwrap() - 5.05e-5).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1e-6, 1e-4).is_err());
        assert!(cosine_lr(5, 4, 1e-6, 1e-4).is_err());
    }

    #[test]
    fn sgd_update_cases() {
        let mut p = scalar(1.0);
        sgd_step(&mut p, &scalar(0.0), 0.1, 0.0).unwrap();
        assert_eq!(p.0.data()[0], 1.0);
        sgd_step(&mut p, &scalar(0.0), 0.1, 0.5).unwrap();
        assert!((p.0.data()[0] - 0.95).abs() < 1e-15);
        let mut bad = scalar(0.0);
        bad.0.data_mut()[0] = f64::NAN;
        let before = p.0.clone();
        assert!(matches!(sgd_step(&mut p, &bad, 0.1, 0.0), Err(GdipError::NonFiniteGradient { .. })));
        assert_eq!(p.0, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        for _ in 0..100 {
            let g = scalar(2.0 * p.0.data()[0]);
            sgd_step(&mut p, &g, 0.1, 0.0).unwrap();
        }
        // p_k = 0.8^k
        assert!(p.0.data()[0].abs() < 1e-4);
        assert!((p.0.data()[0] - 0.8f64.powi(100)).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_matches_plain_sgd() {
        let mut a = scalar(0.7);
        let mut b = scalar(0.7);
        let mut v = scalar(0.0);
        for k in 0..5 {
            let g = scalar(0.3 * k as f64 - 0.4);
            sgd_step(&mut a, &g, 0.05, 0.01).unwrap();
            sgd_momentum_step(&mut b, &g, &mut v, 0.05, 0.01, 0.0).unwrap();
        }
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn alpha_resolution() {
        let mut c = TrainConfig {
            variant: Variant::Baseline,
            alpha: Some(0.3),
            ..TrainConfig::default()
        };
        assert_eq!(c.effective_alpha(), 0.0);
        c.variant = Variant::Regularizer;
        c.alpha = None;
        assert_eq!(c.effective_alpha(), 1e-4);
        c.variant = Variant::Gdip;
        assert_eq!(c.effective_alpha(), 0.0);
        c.alpha = Some(0.2);
        assert_eq!(c.model_config().alpha, 0.2);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { grid: Some(5), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { grid: Some(4), ..ok.clone() }.validate().is_ok());
        let json = serde_json::to_string(&ok).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ok);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"variant": "mgdip", "mode": "Max"}"#).unwrap();
        assert_eq!(partial.variant, Variant::Mgdip);
        assert_eq!(partial.mode, GdipMode::Max);
        assert_eq!(partial.batch_size, 6);
    }
}
