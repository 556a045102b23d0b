//! Single-scale grid detection head, the Yolo-v1 style detection loss, the
//! reconstruction loss and decoding of predictions into detections.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{ConvStack, EncoderConfig, StackTrace};
use crate::error::{GdipError, Result};
use crate::params::{join, Linear, Params};
use crate::probe;
use crate::tensor::{Image, Tensor};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const DEFAULT_GRID: usize = 8;
pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 1e-4;
pub const NMS_IOU: f64 = 0.45;

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub class: usize,
    pub bbox: BBox,
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionTarget {
    pub boxes: Vec<BoxTarget>,
}

impl DetectionTarget {
    pub fn new(boxes: Vec<BoxTarget>) -> Result<Self> {
        for b in &boxes {
            let BBox { cx, cy, w, h } = b.bbox;
            let ok = (0.0..=1.0).contains(&cx)
                && (0.0..=1.0).contains(&cy)
                && w > 0.0
                && w <= 1.0
                && h > 0.0
                && h <= 1.0
                && b.class < NUM_CLASSES;
            if !ok {
                return Err(GdipError::invalid(format!("invalid target box {b:?}")));
            }
        }
        Ok(DetectionTarget { boxes })
    }
}

impl fmt::Display for DetectionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.boxes {
            let BBox { cx, cy, w, h } = b.bbox;
            writeln!(f, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", b.class)?;
        }
        Ok(())
    }
}

impl FromStr for DetectionTarget {
    type Err = GdipError;

    /// Parses lines `class cx cy w h`; blank lines are skipped.
    fn from_str(s: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = || GdipError::format("target", format!("line {}: {line:?}", n + 1));
            if fields.len() != 5 {
                return Err(bad());
            }
            let class: usize = fields[0].parse().map_err(|_| bad())?;
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            boxes.push(BoxTarget {
                class,
                bbox: BBox {
                    cx: v[0],
                    cy: v[1],
                    w: v[2],
                    h: v[3],
                },
            });
        }
        DetectionTarget::new(boxes)
    }
}

/// A decoded prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Intersection over union; zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw head output: `G x G x (5 + classes)` logits, cells row-major, each
/// cell `[objectness, tx, ty, tw, th, class logits...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub grid: usize,
    pub num_classes: usize,
    pub logits: Vec<f64>,
}

impl DetectionOutput {
    pub fn zeros(grid: usize, num_classes: usize) -> Self {
        DetectionOutput {
            grid,
            num_classes,
            logits: vec![0.0; grid * grid * (5 + num_classes)],
        }
    }

    pub fn stride(&self) -> usize {
        5 + self.num_classes
    }

    pub fn cell(&self, gy: usize, gx: usize) -> &[f64] {
        let s = self.stride();
        &self.logits[(gy * self.grid + gx) * s..][..s]
    }

    pub fn cell_mut(&mut self, gy: usize, gx: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.logits[(gy * self.grid + gx) * s..][..s]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.grid, self.grid, self.stride()]
    }
}

/// Cell `(gy, gx)` responsible for each cell's box: the box whose center
/// lies in the cell, the larger one on conflicts (earlier on equal area).
pub fn assign_cells(target: &DetectionTarget, grid: usize) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; grid * grid];
    let cell_of = |v: f64| ((v * grid as f64).floor() as usize).min(grid - 1);
    for (i, b) in target.boxes.iter().enumerate() {
        let idx = cell_of(b.bbox.cy) * grid + cell_of(b.bbox.cx);
        match owner[idx] {
            Some(j) if target.boxes[j].bbox.area() >= b.bbox.area() => {}
            _ => owner[idx] = Some(i),
        }
    }
    owner
}

/// Sum-squared detection loss and its gradient with respect to the logits.
pub fn loss_obj(pred: &DetectionOutput, target: &DetectionTarget) -> (f64, Vec<f64>) {
    let g = pred.grid;
    let nc = pred.num_classes;
    let s = pred.stride();
    let owner = assign_cells(target, g);
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.logits.len()];
    // d/dz of weight * (sigmoid(z) - t)^2
    let term = |z: f64, t: f64, weight: f64, gslot: &mut f64| {
        let p = sigmoid(z);
        let d = p - t;
        *gslot = 2.0 * weight * d * p * (1.0 - p);
        weight * d * d
    };
    for gy in 0..g {
        for gx in 0..g {
            let base = (gy * g + gx) * s;
            let cell = &pred.logits[base..base + s];
            let gcell = &mut grad[base..base + s];
            match owner[gy * g + gx] {
                None => loss += term(cell[0], 0.0, LAMBDA_NOOBJ, &mut gcell[0]),
                Some(i) => {
                    let b = &target.boxes[i];
                    let tx = b.bbox.cx * g as f64 - gx as f64;
                    let ty = b.bbox.cy * g as f64 - gy as f64;
                    let coords = [tx, ty, b.bbox.w.sqrt(), b.bbox.h.sqrt()];
                    loss += term(cell[0], 1.0, 1.0, &mut gcell[0]);
                    for k in 0..4 {
                        loss += term(cell[1 + k], coords[k], LAMBDA_COORD, &mut gcell[1 + k]);
                    }
                    for c in 0..nc {
                        let t = if c == b.class { 1.0 } else { 0.0 };
                        loss += term(cell[5 + c], t, 1.0, &mut gcell[5 + c]);
                    }
                }
            }
        }
    }
    (loss, grad)
}

/// Reconstruction losses `(mean |z - c|, mean (z - c)^2)`.
pub fn loss_rec(z: &Image, clear: &Image) -> Result<(f64, f64)> {
    if z.dims() != clear.dims() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![clear.height(), clear.width(), 3],
            actual: vec![z.height(), z.width(), 3],
        });
    }
    let (l1, mse, _) = loss_rec_buf(z.data(), clear.data());
    Ok((l1, mse))
}

/// Returns `(l1, mse, d(l1 + mse)/dz)`; the L1 subgradient at 0 is 0.
pub(crate) fn loss_rec_buf(z: &[f64], clear: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = z.len() as f64;
    let mut l1 = 0.0;
    let mut mse = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (a, b) in z.iter().zip(clear) {
        let d = a - b;
        l1 += d.abs();
        mse += d * d;
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push((sign + 2.0 * d) / n);
    }
    (l1 / n, mse / n, grad)
}

pub fn loss_total(l_obj: f64, l_reg: f64, alpha: f64) -> f64 {
    l_obj + alpha * l_reg
}

/// Loss components of one sample or an averaged batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_rec_l1: f64,
    pub l_rec_mse: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_obj: f64, l1: f64, mse: f64, alpha: f64) -> Self {
        let l_reg = l1 + mse;
        LossBreakdown {
            l_obj,
            l_rec_l1: l1,
            l_rec_mse: mse,
            l_reg,
            l_total: loss_total(l_obj, l_reg, alpha),
            alpha,
        }
    }

    /// Component-wise mean in the given order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.l_obj += it.l_obj;
            acc.l_rec_l1 += it.l_rec_l1;
            acc.l_rec_mse += it.l_rec_mse;
            acc.l_reg += it.l_reg;
            acc.l_total += it.l_total;
            acc.alpha = it.alpha;
        }
        acc.l_obj /= n;
        acc.l_rec_l1 /= n;
        acc.l_rec_mse /= n;
        acc.l_reg /= n;
        acc.l_total /= n;
        acc
    }
}

/// Input bin `[lo, hi)` of adaptive pooling output `i` (of `g`) over `n`.
fn adaptive_bin(i: usize, g: usize, n: usize) -> (usize, usize) {
    ((i * n) / g, ((i + 1) * n).div_ceil(g))
}

/// 1x1 convolution over the adaptively pooled last backbone map.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub grid: usize,
    pub num_classes: usize,
    pub conv: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pooled: Vec<f64>,
    channels: usize,
    map: (usize, usize),
}

impl DetectionHead {
    pub fn new(channels: usize, grid: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if grid == 0 {
            return Err(GdipError::invalid("grid must be positive"));
        }
        Ok(DetectionHead {
            grid,
            num_classes,
            conv: Linear::uniform(5 + num_classes, channels, 1.0 / (channels as f64).sqrt(), rng),
        })
    }

    pub fn zeros(channels: usize, grid: usize, num_classes: usize) -> Self {
        DetectionHead {
            grid,
            num_classes,
            conv: Linear::zeros(5 + num_classes, channels),
        }
    }

    /// `x` is a planar `C x H x W` map.
    pub fn forward(&self, x: &[f64], c: usize, h: usize, w: usize) -> Result<(DetectionOutput, HeadTrace)> {
        let g = self.grid;
        if g > h || g > w {
            return Err(GdipError::invalid(format!(
                "grid {g} exceeds the {h}x{w} backbone map"
            )));
        }
        if c != self.conv.in_dim() || x.len() != c * h * w {
            return Err(GdipError::ShapeMismatch {
                expected: vec![self.conv.in_dim(), h, w],
                actual: vec![c, h, w],
            });
        }
        probe::hit(probe::Op::Head);
        // pooled is cell-major: [cell][channel]
        let mut pooled = vec![0.0; g * g * c];
        for gy in 0..g {
            let (y0, y1) = adaptive_bin(gy, g, h);
            for gx in 0..g {
                let (x0, x1) = adaptive_bin(gx, g, w);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for ci in 0..c {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    pooled[(gy * g + gx) * c + ci] = s / count;
                }
            }
        }
        let mut out = DetectionOutput::zeros(g, self.num_classes);
        let stride = out.stride();
        for cell in 0..g * g {
            let y = self.conv.forward(&pooled[cell * c..(cell + 1) * c])?;
            out.logits[cell * stride..(cell + 1) * stride].copy_from_slice(&y);
        }
        Ok((
            out,
            HeadTrace {
                pooled,
                channels: c,
                map: (h, w),
            },
        ))
    }

    /// Returns the planar gradient into the backbone map.
    pub fn backward(&self, trace: &HeadTrace, g_logits: &[f64], grads: &mut DetectionHead) -> Vec<f64> {
        let g = self.grid;
        let c = trace.channels;
        let (h, w) = trace.map;
        let stride = 5 + self.num_classes;
        let mut g_map = vec![0.0; c * h * w];
        for gy in 0..g {
            let (y0, y1) = adaptive_bin(gy, g, h);
            for gx in 0..g {
                let (x0, x1) = adaptive_bin(gx, g, w);
                let cell = gy * g + gx;
                let g_out = &g_logits[cell * stride..(cell + 1) * stride];
                if g_out.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let g_pooled =
                    self.conv
                        .backward(&trace.pooled[cell * c..(cell + 1) * c], g_out, &mut grads.conv);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for ci in 0..c {
                    let share = g_pooled[ci] / count;
                    let plane = &mut g_map[ci * h * w..(ci + 1) * h * w];
                    for y in y0..y1 {
                        for v in &mut plane[y * w + x0..y * w + x1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        g_map
    }

    /// Decodes logits into detections with confidence at least `min_conf`,
    /// then applies class-wise greedy NMS.
    pub fn decode(out: &DetectionOutput, min_conf: f64) -> Vec<Detection> {
        let g = out.grid as f64;
        let mut dets = Vec::new();
        for gy in 0..out.grid {
            for gx in 0..out.grid {
                let cell = out.cell(gy, gx);
                let obj = sigmoid(cell[0]);
                let (class, pc) = cell[5..]
                    .iter()
                    .map(|&z| sigmoid(z))
                    .enumerate()
                    .fold((0, f64::MIN), |best, (i, p)| if p > best.1 { (i, p) } else { best });
                let confidence = obj * pc;
                if confidence < min_conf {
                    continue;
                }
                let bw = sigmoid(cell[3]).powi(2);
                let bh = sigmoid(cell[4]).powi(2);
                dets.push(Detection {
                    class,
                    bbox: BBox {
                        cx: (gx as f64 + sigmoid(cell[1])) / g,
                        cy: (gy as f64 + sigmoid(cell[2])) / g,
                        w: bw,
                        h: bh,
                    },
                    confidence,
                });
            }
        }
        nms(dets, NMS_IOU)
    }
}

/// Greedy class-wise non-maximum suppression; output sorted by confidence.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

impl Params for DetectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(prefix, f);
    }
}

/// Backbone plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub stack: ConvStack,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new(encoder: &EncoderConfig, grid: usize, rng: &mut impl Rng) -> Result<Self> {
        let stack = ConvStack::new(encoder, rng)?;
        let last = encoder.num_layers - 1;
        if grid > encoder.tap_size(last) {
            return Err(GdipError::invalid(format!(
                "grid {grid} exceeds the {0}x{0} backbone map",
                encoder.tap_size(last)
            )));
        }
        let head = DetectionHead::new(encoder.channels(last), grid, NUM_CLASSES, rng)?;
        Ok(Detector { stack, head })
    }

    pub fn head_forward(&self, stack: &StackTrace) -> Result<(DetectionOutput, HeadTrace)> {
        let (x, (c, h, w)) = stack.tap_data(stack.len() - 1);
        self.head.forward(x, c, h, w)
    }
}

impl Params for Detector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stack.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stack.visit_mut(&join(prefix, "backbone"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use crate::params::{flatten, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target(boxes: &[(usize, f64, f64, f64, f64)]) -> DetectionTarget {
        DetectionTarget::new(
            boxes
                .iter()
                .map(|&(class, cx, cy, w, h)| BoxTarget {
                    class,
                    bbox: BBox { cx, cy, w, h },
                })
                .collect(),
        )
        .unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn iou_fixtures() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 1.0 / 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &BBox::from_corners(1.0, 1.0, 1.0, 3.0)), 0.0);
    }

    #[test]
    fn target_text_round_trip_and_validation() {
        let t = target(&[(0, 0.5, 0.25, 0.2, 0.3), (2, 0.1, 0.9, 0.05, 0.1)]);
        let parsed: DetectionTarget = t.to_string().parse().unwrap();
        assert_eq!(parsed, t);
        assert!("3 0.5 0.5 0.1 0.1".parse::<DetectionTarget>().is_err());
        assert!("0 0.5 0.5 0 0.1".parse::<DetectionTarget>().is_err());
        assert!("0 1.5 0.5 0.1 0.1".parse::<DetectionTarget>().is_err());
        assert!("0 0.5 0.5 0.1".parse::<DetectionTarget>().is_err());
        assert_eq!("\n".parse::<DetectionTarget>().unwrap().boxes.len(), 0);
    }

    #[test]
    fn zero_head_gives_half_objectness() {
        let head = DetectionHead::zeros(128, 4, 3);
        let (out, _) = head.forward(&vec![0.7; 128 * 16], 128, 4, 4).unwrap();
        assert_eq!(out.shape(), [4, 4, 8]);
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert_eq!(sigmoid(out.cell(2, 3)[0]), 0.5);
        assert!(head.forward(&vec![0.0; 128 * 9], 128, 3, 3).is_err());
    }

    #[test]
    fn responsible_cell_and_conflicts() {
        let t = target(&[(0, 0.30, 0.80, 0.1, 0.1)]);
        let owner = assign_cells(&t, 4);
        assert_eq!(owner[3 * 4 + 1], Some(0));
        assert_eq!(owner.iter().flatten().count(), 1);
        let t = target(&[(0, 0.30, 0.30, 0.1, 0.1), (1, 0.35, 0.40, 0.2, 0.1), (2, 0.26, 0.26, 0.05, 0.05)]);
        assert_eq!(assign_cells(&t, 4)[5], Some(1));
        let edge = target(&[(0, 1.0, 1.0, 0.1, 0.1)]);
        assert_eq!(assign_cells(&edge, 4)[15], Some(0));
    }

    #[test]
    fn encoded_target_gives_zero_loss() {
        let t = target(&[(1, 0.30, 0.80, 0.16, 0.25)]);
        let mut pred = DetectionOutput::zeros(4, 3);
        for v in pred.logits.chunks_mut(8) {
            v[0] = -60.0;
        }
        let cell = pred.cell_mut(3, 1);
        cell[0] = 60.0;
        cell[1] = logit(0.30 * 4.0 - 1.0);
        cell[2] = logit(0.80 * 4.0 - 3.0);
        cell[3] = logit(0.4);
        cell[4] = logit(0.5);
        cell[5] = -60.0;
        cell[6] = 60.0;
        cell[7] = -60.0;
        let (loss, _) = loss_obj(&pred, &t);
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn empty_target_with_silent_head_gives_zero_loss() {
        let mut pred = DetectionOutput::zeros(3, 3);
        for v in pred.logits.chunks_mut(8) {
            v[0] = -800.0;
            v[3] = 7.0;
        }
        assert_eq!(loss_obj(&pred, &DetectionTarget::default()).0, 0.0);
    }

    #[test]
    fn single_cell_loss_by_hand() {
        let t = target(&[(2, 0.75, 0.25, 0.36, 0.09)]);
        let mut pred = DetectionOutput::zeros(2, 3);
        let vals = [0.4, -0.3, 0.8, 0.1, -1.2, 0.5, -0.5, 1.5];
        pred.cell_mut(0, 1).copy_from_slice(&vals);
        pred.cell_mut(0, 0)[0] = 1.0;
        pred.cell_mut(1, 0)[0] = -2.0;
        pred.cell_mut(1, 1)[0] = 0.0;
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let sq = |v: f64| v * v;
        let coords = sq(s(-0.3) - 0.5) + sq(s(0.8) - 0.5) + sq(s(0.1) - 0.6) + sq(s(-1.2) - 0.3);
        let obj = sq(s(0.4) - 1.0);
        let cls = sq(s(0.5)) + sq(s(-0.5)) + sq(s(1.5) - 1.0);
        let noobj = sq(s(1.0)) + sq(s(-2.0)) + sq(s(0.0));
        let expected = 5.0 * coords + obj + cls + 0.5 * noobj;
        let (loss, _) = loss_obj(&pred, &t);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_obj_gradient_matches_finite_differences() {
        let t = target(&[(0, 0.3, 0.6, 0.2, 0.3), (2, 0.8, 0.1, 0.4, 0.1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..3 * 3 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wrap = |x: &[f64]| DetectionOutput {
            grid: 3,
            num_classes: 3,
            logits: x.to_vec(),
        };
        let op = FnOp {
            forward: |x: &[f64], _: &[f64]| vec![loss_obj(&wrap(x), &t).0],
            backward: |x: &[f64], _: &[f64], g: &[f64]| {
                (loss_obj(&wrap(x), &t).1.iter().map(|v| v * g[0]).collect(), vec![])
            },
        };
        let r = grad_check(&op, &logits, &[], 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{:e}", r.max_rel_error);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let a = Image::filled(4, 4, 0.3).unwrap();
        assert_eq!(loss_rec(&a, &a).unwrap(), (0.0, 0.0));
        let b = Image::filled(4, 4, 0.8).unwrap();
        let (l1, mse) = loss_rec(&a, &b).unwrap();
        assert!((l1 - 0.5).abs() < 1e-15 && (mse - 0.25).abs() < 1e-15);
        assert!((LossBreakdown::new(0.0, l1, mse, 1.0).l_reg - 0.75).abs() < 1e-15);
        assert!(loss_rec(&a, &Image::filled(4, 5, 0.3).unwrap()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Image::from_fn(5, 7, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let y = Image::from_fn(5, 7, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let (l1, mse) = loss_rec(&x, &y).unwrap();
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..x.data().len() {
            let d = x.data()[i] - y.data()[i];
            s1 += d.abs();
            s2 += d * d;
        }
        let n = x.data().len() as f64;
        assert!((l1 - s1 / n).abs() < 1e-12 && (mse - s2 / n).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let op = FnOp {
            forward: |x: &[f64], _: &[f64]| {
                let (a, b, _) = loss_rec_buf(x, &c);
                vec![a + b]
            },
            backward: |x: &[f64], _: &[f64], g: &[f64]| {
                (loss_rec_buf(x, &c).2.iter().map(|v| v * g[0]).collect(), vec![])
            },
        };
        let r = grad_check(&op, &z, &[], 1e-6, 1e-4).unwrap();
        assert!(r.passed, "{:e}", r.max_rel_error);
        assert_eq!(loss_rec_buf(&[0.5], &[0.5]).2, vec![0.0]);
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(DEFAULT_ALPHA, 1e-4);
        assert_eq!(loss_total(2.0, 0.0, 0.5), 2.0);
        assert!((loss_total(2.0, 10.0, 0.1) - 3.0).abs() < 1e-15);
        let b = LossBreakdown::new(1.5, 0.2, 0.1, 1e-4);
        assert!(b.l_total >= b.l_obj);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = DetectionHead::new(4, 2, 3, &mut rng).unwrap();
        let x: Vec<f64> = (0..4 * 5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let with = |p: &[f64]| {
            let mut h = head.clone();
            unflatten(&mut h, p).unwrap();
            h
        };
        let op = FnOp {
            forward: |x: &[f64], p: &[f64]| with(p).forward(x, 4, 5, 3).unwrap().0.logits,
            backward: |x: &[f64], p: &[f64], g: &[f64]| {
                let h = with(p);
                let (_, tr) = h.forward(x, 4, 5, 3).unwrap();
                let mut grads = zeros_like(&h);
                let gx = h.backward(&tr, g, &mut grads);
                (gx, flatten(&grads))
            },
        };
        let r = grad_check(&op, &x, &flatten(&head), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{:e}", r.max_rel_error);
    }

    #[test]
    fn decode_and_nms() {
        let mut out = DetectionOutput::zeros(2, 3);
        for v in out.logits.chunks_mut(8) {
            v[0] = -10.0;
        }
        let c = out.cell_mut(1, 0);
        c[0] = 3.0;
        c[1] = 0.0;
        c[2] = 0.0;
        c[3] = logit(0.5);
        c[4] = logit(0.5);
        c[6] = 4.0;
        let dets = DetectionHead::decode(&out, 0.1);
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!(d.class, 1);
        assert!((d.bbox.cx - 0.25).abs() < 1e-12 && (d.bbox.cy - 0.75).abs() < 1e-12);
        assert!((d.bbox.w - 0.25).abs() < 1e-12);
        assert!((d.confidence - sigmoid(3.0) * sigmoid(4.0)).abs() < 1e-15);

        let b = BBox { cx: 0.5, cy: 0.5, w: 0.4, h: 0.4 };
        let shifted = BBox { cx: 0.52, ..b };
        let dets = vec![
            Detection { class: 0, bbox: b, confidence: 0.6 },
            Detection { class: 0, bbox: shifted, confidence: 0.9 },
            Detection { class: 1, bbox: b, confidence: 0.5 },
        ];
        let kept = nms(dets, NMS_IOU);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].confidence, 0.9);
        assert_eq!(kept[1].class, 1);
    }

    #[test]
    fn detector_rejects_oversized_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig::desk();
        assert!(Detector::new(&cfg, 4, &mut rng).is_ok());
        assert!(Detector::new(&cfg, 5, &mut rng).is_err());
        assert!(Detector::new(&cfg, DEFAULT_GRID, &mut rng).is_err());
    }
}
