//! Detection and enhancement metrics: AP / mAP at IoU 0.5, TP/FP/FN counts
//! over confidence thresholds, PSNR and per-condition gate summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::detect::{iou, Detection, DetectionTarget};
use crate::error::{GdipError, Result};
use crate::gdip::GateReport;
use crate::ip_ops::IpKind;
use crate::tensor::Image;

pub const MATCH_IOU: f64 = 0.5;

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub target: DetectionTarget,
}

/// Greedy matching of confidence-sorted detections; each detection takes
/// the unmatched ground truth of its class with the highest IoU (earliest on
/// ties) if that IoU reaches `iou_thr`. Returns per-detection TP flags in
/// the given order.
pub fn greedy_match(dets: &[Detection], target: &DetectionTarget, iou_thr: f64) -> Vec<bool> {
    let mut used = vec![false; target.boxes.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in target.boxes.iter().enumerate() {
                if used[j] || gt.class != d.class {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn sorted_by_confidence(dets: &[Detection]) -> Vec<Detection> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    v
}

/// All-point interpolated AP from TP flags (confidence order) and the
/// number of ground truths.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of one class over a dataset.
pub fn average_precision(images: &[ImageEval], class: usize, iou_thr: f64) -> f64 {
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (idx, im) in images.iter().enumerate() {
        num_gt += im.target.boxes.iter().filter(|b| b.class == class).count();
        let dets: Vec<Detection> = im
            .detections
            .iter()
            .filter(|d| d.class == class)
            .copied()
            .collect();
        let dets = sorted_by_confidence(&dets);
        let flags = greedy_match(&dets, &im.target, iou_thr);
        scored.extend(dets.iter().zip(flags).map(|(d, f)| (d.confidence, idx, f)));
    }
    // stable on ties: earlier image first
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = scored.iter().map(|s| s.2).collect();
    ap_from_flags(&flags, num_gt)
}

/// Per-class AP and their unweighted mean.
pub fn mean_average_precision(images: &[ImageEval], num_classes: usize) -> (Vec<f64>, f64) {
    let aps: Vec<f64> = (0..num_classes)
        .map(|c| average_precision(images, c, MATCH_IOU))
        .collect();
    let map = aps.iter().sum::<f64>() / num_classes.max(1) as f64;
    (aps, map)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// `0.05, 0.10, ..., 0.95`
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 5.0 / 100.0).collect()
}

pub fn tp_fp_fn_curves(images: &[ImageEval], thresholds: &[f64]) -> Vec<CurvePoint> {
    thresholds
        .iter()
        .map(|&threshold| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for im in images {
                let kept: Vec<Detection> = im
                    .detections
                    .iter()
                    .filter(|d| d.confidence >= threshold)
                    .copied()
                    .collect();
                let flags = greedy_match(&sorted_by_confidence(&kept), &im.target, MATCH_IOU);
                let t = flags.iter().filter(|&&f| f).count();
                tp += t;
                fp += flags.len() - t;
                fn_ += im.target.boxes.len() - t;
            }
            CurvePoint {
                threshold,
                tp,
                fp,
                fn_,
            }
        })
        .collect()
}

/// `10 log10(1 / mse)`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![a.height(), a.width(), 3],
            actual: vec![b.height(), b.width(), 3],
        });
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub curves: Vec<CurvePoint>,
    pub psnr_mean: Option<f64>,
}

impl EvalSummary {
    pub fn compute(images: &[ImageEval], num_classes: usize, psnrs: &[f64]) -> Self {
        let (per_class_ap, map) = mean_average_precision(images, num_classes);
        EvalSummary {
            per_class_ap,
            map,
            curves: tp_fp_fn_curves(images, &default_thresholds()),
            psnr_mean: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
        }
    }

    /// Header plus one row: `map, ap_<class>..., psnr_mean`.
    pub fn summary_csv(&self, class_names: &[&str]) -> String {
        let mut header = vec!["map".to_string()];
        header.extend(class_names.iter().map(|c| format!("ap_{c}")));
        header.push("psnr_mean".into());
        let mut row = vec![format!("{:.6}", self.map)];
        row.extend(self.per_class_ap.iter().map(|a| format!("{a:.6}")));
        row.push(self.psnr_mean.map(format_db).unwrap_or_default());
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("threshold,tp,fp,fn\n");
        for p in &self.curves {
            let _ = writeln!(s, "{:.2},{},{},{}", p.threshold, p.tp, p.fp, p.fn_);
        }
        s
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Condition group of a manifest tag: `fog:3` -> `fog`.
pub fn condition_group(tag: &str) -> &str {
    tag.split(':').next().unwrap_or(tag)
}

/// Mean gate value per operation, grouped by condition. Each sample
/// contributes the average of its per-level reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateSummary {
    sums: BTreeMap<String, ([f64; 7], [usize; 7])>,
}

impl GateSummary {
    pub fn add(&mut self, condition: &str, levels: &[GateReport]) {
        let entry = self
            .sums
            .entry(condition_group(condition).to_string())
            .or_insert(([0.0; 7], [0; 7]));
        for (k, kind) in IpKind::ALL.iter().enumerate() {
            let vals: Vec<f64> = levels.iter().filter_map(|r| r.get(*kind)).collect();
            if !vals.is_empty() {
                entry.0[k] += vals.iter().sum::<f64>() / vals.len() as f64;
                entry.1[k] += 1;
            }
        }
    }

    pub fn mean(&self, condition: &str, kind: IpKind) -> Option<f64> {
        let (sums, counts) = self.sums.get(condition)?;
        let k = IpKind::ALL.iter().position(|&x| x == kind)?;
        (counts[k] > 0).then(|| sums[k] / counts[k] as f64)
    }

    pub fn conditions(&self) -> Vec<&str> {
        self.sums.keys().map(String::as_str).collect()
    }

    /// Columns `condition,T,C,S,DF,G,WB,I`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("condition,{}\n", GateReport::csv_header());
        for cond in self.conditions() {
            let cols: Vec<String> = IpKind::ALL
                .iter()
                .map(|&k| self.mean(cond, k).map(|v| format!("{v:.6}")).unwrap_or_default())
                .collect();
            let _ = writeln!(s, "{cond},{}", cols.join(","));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{BBox, BoxTarget};

    fn gt(class: usize, cx: f64, cy: f64) -> BoxTarget {
        BoxTarget {
            class,
            bbox: BBox { cx, cy, w: 0.2, h: 0.2 },
        }
    }

    fn det(class: usize, cx: f64, cy: f64, confidence: f64) -> Detection {
        Detection {
            class,
            bbox: BBox { cx, cy, w: 0.2, h: 0.2 },
            confidence,
        }
    }

    #[test]
    fn ap_hand_fixture() {
        let im = ImageEval {
            detections: vec![det(0, 0.2, 0.2, 0.9), det(0, 0.5, 0.5, 0.8), det(0, 0.8, 0.8, 0.7)],
            target: DetectionTarget::new(vec![gt(0, 0.2, 0.2), gt(0, 0.8, 0.8)]).unwrap(),
        };
        let ap = average_precision(&[im], 0, 0.5);
        assert!((ap - (0.5 + (2.0 / 3.0) * 0.5)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ap_edge_cases() {
        let target = DetectionTarget::new(vec![gt(1, 0.3, 0.3), gt(1, 0.7, 0.7)]).unwrap();
        let perfect = ImageEval {
            detections: vec![det(1, 0.7, 0.7, 0.1), det(1, 0.3, 0.3, 0.2)],
            target: target.clone(),
        };
        assert_eq!(average_precision(&[perfect], 1, 0.5), 1.0);
        let none = ImageEval {
            detections: vec![],
            target,
        };
        assert_eq!(average_precision(std::slice::from_ref(&none), 1, 0.5), 0.0);
        assert_eq!(average_precision(std::slice::from_ref(&none), 0, 0.5), 1.0);
        let stray = ImageEval {
            detections: vec![det(0, 0.5, 0.5, 0.9)],
            target: DetectionTarget::default(),
        };
        assert_eq!(average_precision(&[stray], 0, 0.5), 0.0);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let im = ImageEval {
            detections: vec![det(0, 0.5, 0.5, 0.9), det(0, 0.51, 0.5, 0.8)],
            target: DetectionTarget::new(vec![gt(0, 0.5, 0.5)]).unwrap(),
        };
        let flags = greedy_match(&im.detections, &im.target, 0.5);
        assert_eq!(flags, vec![true, false]);
        assert_eq!(average_precision(&[im], 0, 0.5), 1.0);
    }

    #[test]
    fn best_iou_wins_among_unmatched() {
        let target = DetectionTarget::new(vec![gt(0, 0.5, 0.5), gt(0, 0.55, 0.5)]).unwrap();
        let flags = greedy_match(&[det(0, 0.56, 0.5, 0.9), det(0, 0.49, 0.5, 0.8)], &target, 0.5);
        assert_eq!(flags, vec![true, true]);
    }

    #[test]
    fn curves_fixture_properties() {
        let images = vec![
            ImageEval {
                detections: vec![det(0, 0.2, 0.2, 0.9), det(2, 0.6, 0.6, 0.3), det(1, 0.8, 0.8, 0.55)],
                target: DetectionTarget::new(vec![gt(0, 0.2, 0.2), gt(2, 0.6, 0.6)]).unwrap(),
            },
            ImageEval {
                detections: vec![det(1, 0.4, 0.4, 0.7)],
                target: DetectionTarget::new(vec![gt(1, 0.4, 0.4), gt(0, 0.9, 0.1)]).unwrap(),
            },
        ];
        let curves = tp_fp_fn_curves(&images, &default_thresholds());
        assert_eq!(curves.len(), 19);
        assert!((curves[18].threshold - 0.95).abs() < 1e-12);
        for w in curves.windows(2) {
            assert!(w[1].tp <= w[0].tp && w[1].fn_ >= w[0].fn_);
        }
        for p in &curves {
            assert_eq!(p.tp + p.fn_, 4);
        }
        assert_eq!((curves[0].tp, curves[0].fp, curves[0].fn_), (3, 1, 1));
        let high = tp_fp_fn_curves(&images, &[0.99]);
        assert_eq!((high[0].tp, high[0].fp, high[0].fn_), (0, 0, 4));
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(3, 3, 0.4).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(3, 3, 0.5).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(3, 4, 0.5).unwrap()).is_err());
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn gate_summary_grouping() {
        let r = |v: f64| GateReport {
            ops: IpKind::ALL.to_vec(),
            gates: vec![v; 7],
        };
        let mut s = GateSummary::default();
        s.add("fog:3", &[r(0.2), r(0.4)]);
        s.add("fog:7", &[r(0.6)]);
        s.add("clear", &[r(0.5)]);
        assert!((s.mean("fog", IpKind::Gamma).unwrap() - 0.45).abs() < 1e-12);
        assert_eq!(s.mean("clear", IpKind::Tone), Some(0.5));
        assert_eq!(s.mean("dark", IpKind::Tone), None);
        let csv = s.to_csv();
        assert!(csv.starts_with("condition,T,C,S,DF,G,WB,I\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn summary_csv_layout() {
        let s = EvalSummary::compute(&[], 3, &[20.0, 22.0]);
        let csv = s.summary_csv(&["circle", "square", "triangle"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "map,ap_circle,ap_square,ap_triangle,psnr_mean");
        assert_eq!(lines[1], "1.000000,1.000000,1.000000,1.000000,21.000000");
    }
}
