//! The finite-difference gradient suite behind `gdip gradcheck`. Every
//! check compares a hand-written VJP with central differences of a
//! surrogate whose stop-gradient statistics and branch choices are frozen
//! at the base point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{loss_obj, loss_rec_buf, BBox, BoxTarget, DetectionHead, DetectionOutput, DetectionTarget};
use crate::encoder::{Encoder, EncoderConfig, NUM_LAYERS};
use crate::error::{GdipError, Result};
use crate::gdip::{gate, gate_grad, GdipBlock, GdipConfig, GdipMode};
use crate::gradcheck::{grad_check, FnOp, GradCheckReport};
use crate::ip_ops::{map_raw_params, map_raw_params_vjp, op_forward, op_vjp, IpKind};
use crate::mgdip::{GdipChain, LevelOrder, Mgdip};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{flatten, unflatten, zeros_like};
use crate::tensor::{Image, MinMax, StopGrad};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Gdip,
    Encoder,
    Mgdip,
    Losses,
    All,
}

impl std::str::FromStr for Scope {
    type Err = GdipError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "gdip" => Scope::Gdip,
            "encoder" => Scope::Encoder,
            "mgdip" => Scope::Mgdip,
            "losses" => Scope::Losses,
            "all" => Scope::All,
            other => return Err(GdipError::invalid(format!("unknown scope {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckResult {
    fn from_report(name: impl Into<String>, r: &GradCheckReport) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked(),
            passed: r.passed,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(size, size, |_, _, _| r.gen_range(0.05..0.95)).expect("values in range")
}

/// Records the tape of `forward` at `(x, p)` and checks `vjp` against the
/// replayed surrogate.
fn taped_check(
    name: &str,
    x: &[f64],
    p: &[f64],
    forward: impl Fn(&[f64], &[f64], &mut StopGrad) -> Vec<f64>,
    vjp: impl Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
) -> Result<CheckResult> {
    let mut rec = StopGrad::recording();
    forward(x, p, &mut rec);
    let tape = rec.into_values();
    let op = FnOp {
        forward: |x: &[f64], p: &[f64]| forward(x, p, &mut StopGrad::replaying(tape.clone())),
        backward: vjp,
    };
    let r = grad_check(&op, x, p, STEP, TOLERANCE)?;
    Ok(CheckResult::from_report(name, &r))
}

/// Each operation composed with its parameter mapping, on an 8x8 image.
pub fn check_ops() -> Result<Vec<CheckResult>> {
    let img = random_image(8, 42);
    let mut r = rng(43);
    IpKind::ALL
        .iter()
        .map(|&kind| {
            let raw = uniform(kind.param_count(), -1.0, 1.0, &mut r);
            taped_check(
                &format!("op {}", kind.label()),
                img.data(),
                &raw,
                |x, p, sg| {
                    let params = map_raw_params(kind, p).expect("raw length matches");
                    op_forward(&params, x, 8, 8, sg).0
                },
                |x, p, g| {
                    let params = map_raw_params(kind, p).expect("raw length matches");
                    let (_, stats) = op_forward(&params, x, 8, 8, &mut StopGrad::live());
                    let (gx, gp) = op_vjp(&params, x, 8, 8, &stats, g);
                    (gx, map_raw_params_vjp(kind, p, &gp))
                },
            )
        })
        .collect()
}

/// Gate, min-max normalization and the Full-mode block.
pub fn check_gdip() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let gate_op = FnOp {
        forward: |x: &[f64], _: &[f64]| x.iter().map(|&s| gate(s)).collect(),
        backward: |x: &[f64], _: &[f64], g: &[f64]| {
            (x.iter().zip(g).map(|(&s, g)| g * gate_grad(s)).collect(), vec![])
        },
    };
    let s = [-2.0, -0.3, 0.0, 0.4, 1.0, 2.5];
    out.push(CheckResult::from_report("gate", &grad_check(&gate_op, &s, &[], STEP, TOLERANCE)?));

    let mut r = rng(7);
    let x = uniform(8 * 8 * 3, -0.5, 1.5, &mut r);
    out.push(taped_check(
        "normalization",
        &x,
        &[],
        |x, _, sg| sg.minmax(x).apply(x),
        |x, _, g| (MinMax::of(x).backward(g), vec![]),
    )?);

    let img = random_image(8, 11);
    let dim = 3;
    let mut block = GdipBlock::new(GdipConfig::all_ops(GdipMode::Full, dim), &mut r)?;
    block.visit_random(&mut r, 0.6);
    let e = uniform(dim, -1.0, 1.0, &mut r);
    let mut p = e.clone();
    p.extend(flatten(&block));
    let split = |p: &[f64]| {
        let mut b = block.clone();
        unflatten(&mut b, &p[dim..]).expect("length matches");
        (b, p[..dim].to_vec())
    };
    out.push(taped_check(
        "gdip block (full)",
        img.data(),
        &p,
        |x, p, sg| {
            let (b, e) = split(p);
            b.forward_buf(x, 8, 8, &e, None, sg).expect("valid fixture").z().to_vec()
        },
        |x, p, g| {
            let (b, e) = split(p);
            let t = b.forward_buf(x, 8, 8, &e, None, &mut StopGrad::live()).expect("valid fixture");
            let mut grads = zeros_like(&b);
            let (gx, mut gp) = b.backward(&t, g, &mut grads);
            gp.extend(flatten(&grads));
            (gx, gp)
        },
    )?);
    Ok(out)
}

fn small_encoder(size: usize, base: usize, emb: usize) -> EncoderConfig {
    EncoderConfig {
        input_size: size,
        base_channels: base,
        num_layers: NUM_LAYERS,
        embedding_dim: emb,
    }
}

/// Encoder on a 3x16x16 input with base width 2; every tap and the
/// embedding receive upstream gradient.
pub fn check_encoder() -> Result<Vec<CheckResult>> {
    let mut r = rng(5);
    let mut enc = Encoder::new(small_encoder(16, 2, 4), &mut r)?;
    for layer in &mut enc.stack.layers {
        layer.bias.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
    }
    let x = uniform(3 * 16 * 16, 0.0, 1.0, &mut r);
    let with = |p: &[f64]| {
        let mut e = enc.clone();
        unflatten(&mut e, p).expect("length matches");
        e
    };
    let res = taped_check(
        "encoder",
        &x,
        &flatten(&enc),
        |x, p, sg| {
            let t = with(p).forward_planar(x, 16, 16, sg).expect("valid fixture");
            let mut v: Vec<f64> = t.stack.taps.concat();
            v.extend(t.embedding());
            v
        },
        |x, p, g| {
            let e = with(p);
            let t = e.forward_planar(x, 16, 16, &mut StopGrad::live()).expect("valid fixture");
            let mut offset = 0;
            let g_taps: Vec<Option<Vec<f64>>> = t
                .stack
                .taps
                .iter()
                .map(|tap| {
                    let s = g[offset..offset + tap.len()].to_vec();
                    offset += tap.len();
                    Some(s)
                })
                .collect();
            let mut grads = zeros_like(&e);
            let gx = e
                .backward(&t, &g_taps, Some(&g[offset..]), &mut grads, true)
                .expect("input gradient requested");
            (gx, flatten(&grads))
        },
    )?;
    Ok(vec![res])
}

/// Two-level chain on a 16x16 image, encoder base width 2, including the
/// encoder parameters reached through the taps.
pub fn check_mgdip() -> Result<Vec<CheckResult>> {
    let mut r = rng(13);
    let cfg = small_encoder(16, 2, 3);
    let gcfg = GdipConfig::all_ops(GdipMode::Full, 3);
    let mut m = Mgdip::new(cfg.clone(), &gcfg, LevelOrder::BottomUp, &mut r)?;
    m.chain = GdipChain::new(&gcfg, &cfg, vec![0, 1], &mut r)?;
    let img = random_image(16, 14);
    let planar = img.to_planar();
    let with = |p: &[f64]| {
        let mut c = m.clone();
        unflatten(&mut c, p).expect("length matches");
        c
    };
    let res = taped_check(
        "mgdip (2 levels)",
        img.data(),
        &flatten(&m),
        |x, p, sg| {
            let c = with(p);
            let st = c.stack.forward(&planar, 16, 16, sg).expect("valid fixture");
            c.chain.forward_buf(x, 16, 16, &st, sg).expect("valid fixture").z().to_vec()
        },
        |x, p, g| {
            let c = with(p);
            let st = c.stack.forward(&planar, 16, 16, &mut StopGrad::live()).expect("valid fixture");
            let t = c.chain.forward_buf(x, 16, 16, &st, &mut StopGrad::live()).expect("valid fixture");
            let mut grads = zeros_like(&c);
            let (gx, g_taps) = c.chain.backward(&t, g, &mut grads.chain, NUM_LAYERS);
            c.stack.backward(&st, &g_taps, &mut grads.stack, false);
            (gx, flatten(&grads))
        },
    )?;
    Ok(vec![res])
}

fn fixture_target() -> DetectionTarget {
    DetectionTarget::new(vec![
        BoxTarget {
            class: 0,
            bbox: BBox { cx: 0.3, cy: 0.6, w: 0.2, h: 0.3 },
        },
        BoxTarget {
            class: 2,
            bbox: BBox { cx: 0.8, cy: 0.1, w: 0.4, h: 0.1 },
        },
    ])
    .expect("valid boxes")
}

/// Detection loss, reconstruction loss, detection head and the combined
/// regularizer objective `L_obj + alpha L_Reg` of a small model.
pub fn check_losses() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut r = rng(17);
    let target = fixture_target();
    let logits = uniform(3 * 3 * 8, -2.0, 2.0, &mut r);
    let wrap = |x: &[f64]| DetectionOutput {
        grid: 3,
        num_classes: 3,
        logits: x.to_vec(),
    };
    let op = FnOp {
        forward: |x: &[f64], _: &[f64]| vec![loss_obj(&wrap(x), &target).0],
        backward: |x: &[f64], _: &[f64], g: &[f64]| {
            (loss_obj(&wrap(x), &target).1.iter().map(|v| v * g[0]).collect(), vec![])
        },
    };
    out.push(CheckResult::from_report("loss_obj", &grad_check(&op, &logits, &[], STEP, TOLERANCE)?));

    let z = uniform(8 * 8 * 3, 0.0, 1.0, &mut r);
    let clear = uniform(8 * 8 * 3, 0.0, 1.0, &mut r);
    let op = FnOp {
        forward: |x: &[f64], _: &[f64]| {
            let (a, b, _) = loss_rec_buf(x, &clear);
            vec![a + b]
        },
        backward: |x: &[f64], _: &[f64], g: &[f64]| {
            (loss_rec_buf(x, &clear).2.iter().map(|v| v * g[0]).collect(), vec![])
        },
    };
    out.push(CheckResult::from_report("loss_rec (L1 + MSE)", &grad_check(&op, &z, &[], STEP, TOLERANCE)?));

    let head = DetectionHead::new(4, 2, 3, &mut r)?;
    let x = uniform(4 * 5 * 3, -1.0, 1.0, &mut r);
    let with = |p: &[f64]| {
        let mut h = head.clone();
        unflatten(&mut h, p).expect("length matches");
        h
    };
    let op = FnOp {
        forward: |x: &[f64], p: &[f64]| with(p).forward(x, 4, 5, 3).expect("valid fixture").0.logits,
        backward: |x: &[f64], p: &[f64], g: &[f64]| {
            let h = with(p);
            let (_, tr) = h.forward(x, 4, 5, 3).expect("valid fixture");
            let mut grads = zeros_like(&h);
            let gx = h.backward(&tr, g, &mut grads);
            (gx, flatten(&grads))
        },
    };
    out.push(CheckResult::from_report("detection head", &grad_check(&op, &x, &flatten(&head), STEP, TOLERANCE)?));

    let mut cfg = ModelConfig::new(Variant::Regularizer, small_encoder(16, 1, 3));
    cfg.alpha = 0.5;
    let model = Model::new(cfg, 19)?;
    let clear_img = random_image(16, 20);
    let adverse = Image::from_fn(16, 16, |y, x, c| 0.5 * clear_img.get(y, x, c) + 0.4)?;
    let target = DetectionTarget::new(vec![BoxTarget {
        class: 1,
        bbox: BBox { cx: 0.4, cy: 0.6, w: 0.3, h: 0.2 },
    }])?;
    let with = |p: &[f64]| {
        let mut m = model.clone();
        unflatten(&mut m, p).expect("length matches");
        m
    };
    out.push(taped_check(
        "regularizer L_total",
        &[],
        &flatten(&model),
        |_, p, sg| {
            let (b, _) = with(p)
                .loss_and_grad_with(&adverse, Some(&clear_img), &target, sg)
                .expect("valid fixture");
            vec![b.l_total]
        },
        |_, p, g| {
            let (_, grads) = with(p)
                .loss_and_grad(&adverse, Some(&clear_img), &target)
                .expect("valid fixture");
            (vec![], flatten(&grads).iter().map(|v| v * g[0]).collect())
        },
    )?);
    Ok(out)
}

pub fn run(scope: Scope) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let all = scope == Scope::All;
    if all || scope == Scope::Ops {
        out.extend(check_ops()?);
    }
    if all || scope == Scope::Gdip {
        out.extend(check_gdip()?);
    }
    if all || scope == Scope::Encoder {
        out.extend(check_encoder()?);
    }
    if all || scope == Scope::Mgdip {
        out.extend(check_mgdip()?);
    }
    if all || scope == Scope::Losses {
        out.extend(check_losses()?);
    }
    Ok(out)
}
