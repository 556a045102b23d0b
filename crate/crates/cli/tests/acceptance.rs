//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The exit status fails on any correctness criterion. The three trained
//! experiments (efficacy, gate pattern, regularizer mAP) are reported but
//! only fail the run when `GDIP_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdip_core::checkpoint::load_model;
use gdip_core::datagen::{
    beta_for_level, generate_dataset, transmission_map, Adversity, Condition, ConditionKind, GenOptions,
    HybridSampler, DARK_GAMMA_RANGE, FOG_LEVELS,
};
use gdip_core::detect::{iou, BBox, BoxTarget, Detection, DetectionTarget};
use gdip_core::gdip::{GdipBlock, GdipConfig, GdipMode};
use gdip_core::ip_ops::IpKind;
use gdip_core::metrics::{average_precision, default_thresholds, psnr, tp_fp_fn_curves, GateSummary, ImageEval};
use gdip_core::model::Variant;
use gdip_core::trainer::{evaluate, load_val, train, TrainConfig, TrainOutcome, LAST_CKPT, LOG_FILE};
use gdip_core::{probe, Image};

struct Verdict {
    name: &'static str,
    passed: bool,
    empirical: bool,
    detail: String,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gdip"))
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let out = bin().args(["gradcheck", "--scope", "all"]).output().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst = stdout
        .lines()
        .filter_map(|l| l.rsplit(' ').next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    Verdict {
        name: "gradient suite",
        passed: out.status.success() && secs < 120.0,
        empirical: false,
        detail: format!(
            "{} checks, worst rel error {worst:.2e}, {secs:.1}s",
            stdout.lines().filter(|l| l.starts_with("ok") || l.starts_with("FAIL")).count()
        ),
    }
}

fn ablation_semantics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let img = random_image(12, 12, &mut rng);
    let dim = 6;
    let e1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let block = |mode| {
        let mut b = GdipBlock::new(GdipConfig::all_ops(mode, dim), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        b.visit_random(&mut ChaCha8Rng::seed_from_u64(6), 1.0);
        b
    };
    let (full, max, unnorm, nogates) = (
        block(GdipMode::Full),
        block(GdipMode::Max),
        block(GdipMode::Unnormalized),
        block(GdipMode::NoGates),
    );
    let mut single_gap: f64 = 0.0;
    for k in 0..IpKind::ALL.len() {
        let mut gates = vec![0.0; IpKind::ALL.len()];
        gates[k] = 0.8;
        let a = full.forward_with_gates(&img, &e1, &gates).unwrap();
        let b = max.forward_with_gates(&img, &e1, &gates).unwrap();
        single_gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(single_gap, f64::max);
    }
    let n1 = nogates.forward(&img, &e1).unwrap().0;
    let perturbed: Vec<f64> = (0..IpKind::ALL.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let n2 = nogates.forward_with_gates(&img, &e1, &perturbed).unwrap();
    let nogates_gap = n1.data().iter().zip(n2.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let gates = [0.9, 0.2, 0.6, 0.4, 0.7, 0.3, 0.5];
    let f = full.forward_with_gates(&img, &e1, &gates).unwrap();
    let u = unnorm.forward_with_gates(&img, &e1, &gates).unwrap();
    let unnorm_gap = f.data().iter().zip(u.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Verdict {
        name: "ablation semantics",
        passed: single_gap <= 1e-9 && nogates_gap == 0.0 && unnorm_gap > 1e-6,
        empirical: false,
        detail: format!(
            "full vs max {single_gap:.1e}; no-gates under perturbed gates {nogates_gap:.1e}; unnormalized vs full {unnorm_gap:.3}"
        ),
    }
}

fn metric_oracles() -> Verdict {
    let i = iou(&BBox::from_corners(0.0, 0.0, 2.0, 2.0), &BBox::from_corners(1.0, 1.0, 3.0, 3.0));
    let b = |cx| BBox { cx, cy: 0.5, w: 0.1, h: 0.1 };
    let fixture = vec![ImageEval {
        detections: [(0.2, 0.9), (0.5, 0.8), (0.8, 0.7)]
            .iter()
            .map(|&(cx, confidence)| Detection { class: 0, bbox: b(cx), confidence })
            .collect(),
        target: DetectionTarget::new(vec![BoxTarget { class: 0, bbox: b(0.2) }, BoxTarget { class: 0, bbox: b(0.8) }])
            .unwrap(),
    }];
    let ap = average_precision(&fixture, 0, 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut conserved = true;
    for _ in 0..200 {
        let rbox = |rng: &mut ChaCha8Rng| BBox {
            cx: rng.gen_range(0.1..0.9),
            cy: rng.gen_range(0.1..0.9),
            w: rng.gen_range(0.05..0.4),
            h: rng.gen_range(0.05..0.4),
        };
        let images: Vec<ImageEval> = (0..3)
            .map(|_| {
                let gts = (0..rng.gen_range(0..4)).map(|_| BoxTarget { class: rng.gen_range(0..3), bbox: rbox(&mut rng) }).collect();
                let detections = (0..rng.gen_range(0..6))
                    .map(|_| Detection { class: rng.gen_range(0..3), bbox: rbox(&mut rng), confidence: rng.gen() })
                    .collect();
                ImageEval { detections, target: DetectionTarget::new(gts).unwrap() }
            })
            .collect();
        let total: usize = images.iter().map(|i| i.target.boxes.len()).sum();
        conserved &= tp_fp_fn_curves(&images, &default_thresholds()).iter().all(|p| p.tp + p.fn_ == total);
    }
    let p = psnr(&Image::filled(4, 4, 0.2).unwrap(), &Image::filled(4, 4, 0.3).unwrap()).unwrap();
    Verdict {
        name: "metric oracles",
        passed: i == 1.0 / 7.0 && (ap - 0.8333).abs() <= 1e-4 && conserved && (p - 20.0).abs() <= 1e-9,
        empirical: false,
        detail: format!("iou {i:.6}, ap {ap:.6}, tp+fn conserved {conserved}, psnr {p:.9} dB"),
    }
}

/// Shared desk training settings for the trained experiments.
fn desk(variant: Variant, train_data: &Path, val_data: &Path, run_dir: PathBuf) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 15,
        batch_size: 6,
        lr_max: 1e-2,
        lr_min: 1e-4,
        momentum: 0.9,
        image_size: 96,
        seed: 1,
        train_data: train_data.to_path_buf(),
        val_data: Some(val_data.to_path_buf()),
        run_dir,
        ..TrainConfig::default()
    }
}

fn dataset(root: &Path, name: &str, count: usize, condition: ConditionKind, seed: u64) -> PathBuf {
    let dir = root.join(name);
    let opts = GenOptions { count, condition, seed, size: 96, max_objects: 3 };
    generate_dataset(&dir, &opts).unwrap();
    dir
}

fn run(cfg: &TrainConfig) -> TrainOutcome {
    let start = Instant::now();
    let out = train(cfg).unwrap();
    println!("    trained {:?} in {:.0}s", cfg.variant, start.elapsed().as_secs_f64());
    out
}

struct FogRuns {
    baseline: TrainOutcome,
    gdip: TrainOutcome,
    baseline_dir: PathBuf,
    seconds: f64,
}

fn fog_runs(root: &Path, train_dir: &Path, val_dir: &Path) -> FogRuns {
    let start = Instant::now();
    let baseline_dir = root.join("baseline");
    let baseline = run(&desk(Variant::Baseline, train_dir, val_dir, baseline_dir.clone()));
    let mut cfg = desk(Variant::Gdip, train_dir, val_dir, root.join("gdip"));
    cfg.alpha = Some(0.0);
    let gdip = run(&cfg);
    FogRuns { baseline, gdip, baseline_dir, seconds: start.elapsed().as_secs_f64() }
}

fn efficacy(runs: &FogRuns, val_dir: &Path) -> Verdict {
    let val = load_val(val_dir).unwrap();
    let base = evaluate(&runs.baseline.model, &val).unwrap().summary;
    let gdip = evaluate(&runs.gdip.model, &val).unwrap().summary;
    let d_map = 100.0 * (gdip.map - base.map);
    let fogged = base.psnr_mean.unwrap();
    let enhanced = gdip.psnr_mean.unwrap();
    Verdict {
        name: "enhancement efficacy",
        passed: d_map >= 5.0 && enhanced - fogged >= 2.0 && runs.seconds <= 1800.0,
        empirical: true,
        detail: format!(
            "mAP gdip {:.4} vs baseline {:.4} ({d_map:+.1} pts, need +5); PSNR enhanced {enhanced:.2} vs fogged {fogged:.2} dB ({:+.2}, need +2); {:.0}s",
            gdip.map,
            base.map,
            enhanced - fogged,
            runs.seconds
        ),
    }
}

fn gate_pattern(root: &Path) -> Verdict {
    let train_dir = dataset(root, "mixed_train", 500, ConditionKind::Mixed, 300);
    let val_dir = dataset(root, "mixed_val", 300, ConditionKind::Mixed, 400);
    let mut cfg = desk(Variant::Gdip, &train_dir, &val_dir, root.join("gates"));
    cfg.alpha = Some(0.0);
    let out = run(&cfg);
    let mut summary = GateSummary::default();
    for s in load_val(&val_dir).unwrap() {
        let (_, reports) = out.model.enhance(&s.adverse).unwrap().unwrap();
        summary.add(&s.condition, &reports);
    }
    let m = |c, k| summary.mean(c, k).unwrap_or(f64::NAN);
    let gamma = (m("dark", IpKind::Gamma), m("clear", IpKind::Gamma));
    let defog = (m("fog", IpKind::Defog), m("clear", IpKind::Defog));
    Verdict {
        name: "gate pattern",
        passed: gamma.0 - gamma.1 >= 0.02 && defog.0 - defog.1 >= 0.02,
        empirical: true,
        detail: format!(
            "gamma dark {:.4} vs clear {:.4} ({:+.4}); defog fog {:.4} vs clear {:.4} ({:+.4}); need +0.02",
            gamma.0,
            gamma.1,
            gamma.0 - gamma.1,
            defog.0,
            defog.1,
            defog.0 - defog.1
        ),
    }
}

fn regularizer(root: &Path, runs: &FogRuns, train_dir: &Path, val_dir: &Path) -> Vec<Verdict> {
    let mut with = desk(Variant::Regularizer, train_dir, val_dir, root.join("reg"));
    with.alpha = Some(1e-4);
    let reg = run(&with);
    let mut control = desk(Variant::Regularizer, train_dir, val_dir, root.join("reg0"));
    control.alpha = Some(0.0);
    let reg0 = run(&control);

    let reg_model = load_model(&root.join("reg").join(LAST_CKPT)).unwrap();
    let img = load_val(val_dir).unwrap().swap_remove(0).adverse;
    let (_, reg_ops) = probe::count(|| reg_model.infer(&img).unwrap());
    let (_, base_ops) = probe::count(|| runs.baseline.model.infer(&img).unwrap());

    let out = bin()
        .args(["bench", "--iters", "200", "--ckpt"])
        .arg(root.join("reg").join(LAST_CKPT))
        .arg("--against")
        .arg(runs.baseline_dir.join(LAST_CKPT))
        .env("GDIP_THREADS", "1")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ratio = stdout
        .lines()
        .find_map(|l| l.strip_prefix("ratio ")?.trim().parse::<f64>().ok())
        .unwrap_or(f64::NAN);

    let map = |o: &TrainOutcome| o.logs.last().and_then(|l| l.val_map).unwrap_or(f64::NAN);
    vec![
        Verdict {
            name: "regularizer inference cost",
            passed: reg_ops == base_ops && (0.98..=1.02).contains(&ratio),
            empirical: false,
            detail: format!("op counts equal {}; latency ratio {ratio:.4} over 200 iterations", reg_ops == base_ops),
        },
        Verdict {
            name: "regularizer mAP",
            passed: map(&reg) >= map(&reg0),
            empirical: true,
            detail: format!("alpha 1e-4 mAP {:.4} vs alpha 0 mAP {:.4}", map(&reg), map(&reg0)),
        },
    ]
}

fn data_pipeline() -> Verdict {
    let draws: Vec<_> = HybridSampler::new(3000, Adversity::Mixed, 17).unwrap().take(9000).collect();
    let frac = draws.iter().filter(|d| d.condition.is_adverse()).count() as f64 / draws.len() as f64;
    let means: Vec<f64> = (0..FOG_LEVELS)
        .map(|l| {
            let t = transmission_map(96, 96, beta_for_level(l));
            t.iter().sum::<f64>() / t.len() as f64
        })
        .collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let gammas: Vec<f64> = (0..9000)
        .filter_map(|_| match Adversity::Dark.sample(&mut rng) {
            Condition::Dark(p) => Some(p.gamma),
            _ => None,
        })
        .collect();
    let lo = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Verdict {
        name: "data pipeline",
        passed: (frac - 2.0 / 3.0).abs() <= 0.02
            && decreasing
            && lo >= DARK_GAMMA_RANGE.0
            && hi <= DARK_GAMMA_RANGE.1
            && gammas.len() == 9000,
        empirical: false,
        detail: format!(
            "adverse fraction {frac:.4}; transmission {:.3} -> {:.3} strictly decreasing {decreasing}; gamma range [{lo:.3}, {hi:.3}]",
            means[0],
            means[FOG_LEVELS - 1]
        ),
    }
}

fn determinism(root: &Path) -> Verdict {
    let dir = root.join("det");
    fs::create_dir_all(&dir).unwrap();
    for (name, cond, seed) in [("train", "mixed", "5"), ("val", "mixed", "6")] {
        let ok = bin()
            .args(["gen-data", "--out", name, "--count", "48", "--condition", cond, "--seed", seed, "--size", "48"])
            .current_dir(&dir)
            .status()
            .unwrap()
            .success();
        assert!(ok, "gen-data failed");
    }
    let config = r#"{"variant": "mgdip", "epochs": 3, "image_size": 48, "base_channels": 4, "embedding_dim": 16,
        "lr_max": 0.01, "lr_min": 0.0001, "momentum": 0.9, "seed": 11, "train_data": "train", "val_data": "val"}"#;
    fs::write(dir.join("cfg.json"), config).unwrap();
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|r| {
            let ok = bin()
                .args(["train", "--config", "cfg.json", "--override"])
                .arg(format!("run_dir={r}"))
                .current_dir(&dir)
                .status()
                .unwrap()
                .success();
            assert!(ok, "train failed");
            fs::read(dir.join(r).join(LOG_FILE)).unwrap()
        })
        .collect();
    Verdict {
        name: "determinism",
        passed: logs[0] == logs[1] && !logs[0].is_empty(),
        empirical: false,
        detail: format!("two mgdip runs, {} log bytes, identical {}", logs[0].len(), logs[0] == logs[1]),
    }
}

fn report(v: &Verdict) {
    println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
}

fn main() {
    let strict = std::env::var("GDIP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };

    record(gradient_suite());
    record(ablation_semantics());
    record(metric_oracles());
    record(data_pipeline());
    record(determinism(root));

    let train_dir = dataset(root, "fog_train", 500, ConditionKind::Fog, 100);
    let val_dir = dataset(root, "fog_val", 150, ConditionKind::Fog, 200);
    let runs = fog_runs(root, &train_dir, &val_dir);
    record(efficacy(&runs, &val_dir));
    for v in regularizer(root, &runs, &train_dir, &val_dir) {
        record(v);
    }
    record(gate_pattern(root));

    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.passed).collect();
    println!("{} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    let fatal = failed.iter().any(|v| strict || !v.empirical);
    if fatal {
        std::process::exit(1);
    }
}
