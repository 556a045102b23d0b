//! The gated block: each `Gb` module maps a shared embedding to operation
//! parameters plus a gate pre-activation, and the block aggregates the
//! normalized, gate-weighted operation outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdipError, Result};
use crate::ip_ops::{map_raw_params, map_raw_params_vjp, op_forward, op_vjp, IpKind, IpParams, OpStats};
use crate::params::{join, Linear, Params};
use crate::probe;
use crate::tensor::{Image, MinMax, StopGrad, Tensor};

/// Initial weight bound of the `Gb` linear layers.
pub const GB_INIT_BOUND: f64 = 0.01;

/// Shifted tanh, `(tanh(s) + 1) / 2`.
pub fn gate(s: f64) -> f64 {
    (s.tanh() + 1.0) / 2.0
}

pub fn gate_grad(s: f64) -> f64 {
    let t = s.tanh();
    (1.0 - t * t) / 2.0
}

/// Aggregation variant of the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GdipMode {
    /// `z = N(sum_i N(f_i(x)) * w_i)`
    #[serde(alias = "full")]
    Full,
    /// `z = N(f_k(x))` with `k = argmax_i w_i`
    #[serde(alias = "max")]
    Max,
    /// `z = N(sum_i f_i(x) * w_i)`
    #[serde(alias = "unnormalized")]
    Unnormalized,
    /// `z = N(sum_i N(f_i(x)))`
    #[serde(alias = "nogates", alias = "no-gates")]
    NoGates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdipConfig {
    pub ops: Vec<IpKind>,
    pub mode: GdipMode,
    pub embedding_dim: usize,
}

impl GdipConfig {
    pub fn new(ops: Vec<IpKind>, mode: GdipMode, embedding_dim: usize) -> Result<Self> {
        let cfg = GdipConfig {
            ops,
            mode,
            embedding_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// All seven operations in canonical order.
    pub fn all_ops(mode: GdipMode, embedding_dim: usize) -> Self {
        GdipConfig {
            ops: IpKind::ALL.to_vec(),
            mode,
            embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(GdipError::invalid("GDIP needs at least one operation"));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(op) {
                return Err(GdipError::invalid(format!("duplicate operation {op:?}")));
            }
        }
        if self.embedding_dim == 0 {
            return Err(GdipError::invalid("embedding_dim must be positive"));
        }
        Ok(())
    }
}

/// One gated sub-unit: `embedding -> (op params, gate pre-activation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbModule {
    pub kind: IpKind,
    pub linear: Linear,
}

impl GbModule {
    pub fn new(kind: IpKind, embedding_dim: usize, rng: &mut impl Rng) -> Self {
        GbModule {
            kind,
            linear: Linear::uniform(kind.param_count() + 1, embedding_dim, GB_INIT_BOUND, rng),
        }
    }

    pub fn zeros(kind: IpKind, embedding_dim: usize) -> Self {
        GbModule {
            kind,
            linear: Linear::zeros(kind.param_count() + 1, embedding_dim),
        }
    }

    /// Splits the linear output into mapped parameters and the gate input.
    fn params(&self, raw: &[f64]) -> Result<(IpParams, f64)> {
        let n = self.kind.param_count();
        Ok((map_raw_params(self.kind, &raw[..n])?, raw[n]))
    }
}

/// Runs one `Gb` module: returns `N(f(x))`, the gate value and the raw
/// linear-layer output.
pub fn gb_forward(gb: &GbModule, img: &Image, e: &[f64]) -> Result<(Image, f64, Vec<f64>)> {
    let raw = gb.linear.forward(e)?;
    let (params, s) = gb.params(&raw)?;
    let (h, w) = img.dims();
    let mut sg = StopGrad::live();
    let (y, _) = op_forward(&params, img.data(), h, w, &mut sg);
    let mm = MinMax::of(&y);
    Ok((Image::from_clamped(h, w, mm.apply(&y)), gate(s), raw))
}

/// Per-image gate values, one per configured operation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub ops: Vec<IpKind>,
    pub gates: Vec<f64>,
}

impl GateReport {
    pub fn get(&self, kind: IpKind) -> Option<f64> {
        self.ops.iter().position(|&k| k == kind).map(|i| self.gates[i])
    }

    pub fn csv_header() -> String {
        IpKind::ALL.map(IpKind::label).join(",")
    }

    /// One CSV row in canonical column order; absent operations are empty.
    pub fn csv_row(&self) -> String {
        IpKind::ALL
            .iter()
            .map(|&k| self.get(k).map(|v| format!("{v:.6}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BranchTrace {
    params: IpParams,
    stats: OpStats,
    output: Vec<f64>,
    norm: MinMax,
    normalized: Vec<f64>,
}

/// Cached intermediates of one block forward.
#[derive(Debug, Clone)]
pub struct GdipTrace {
    pub(crate) h: usize,
    pub(crate) w: usize,
    pub(crate) input: Vec<f64>,
    pub(crate) embedding: Vec<f64>,
    pub(crate) raws: Vec<Vec<f64>>,
    pub(crate) pre_gates: Vec<f64>,
    pub(crate) gates: Vec<f64>,
    pub(crate) gates_fixed: bool,
    pub(crate) branches: Vec<Option<BranchTrace>>,
    pub(crate) selected: Option<usize>,
    pub(crate) sum_stats: MinMax,
    pub(crate) z: Vec<f64>,
}

impl GdipTrace {
    pub fn output(&self) -> Image {
        Image::from_clamped(self.h, self.w, self.z.clone())
    }

    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    /// Branch used in max mode.
    pub fn selected(&self) -> Option<usize> {
        self.selected
    }

    pub(crate) fn z(&self) -> &[f64] {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdipBlock {
    pub config: GdipConfig,
    pub modules: Vec<GbModule>,
}

impl GdipBlock {
    pub fn new(config: GdipConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let modules = config
            .ops
            .iter()
            .map(|&k| GbModule::new(k, config.embedding_dim, rng))
            .collect();
        Ok(GdipBlock { config, modules })
    }

    pub fn zeros(config: GdipConfig) -> Result<Self> {
        config.validate()?;
        let modules = config
            .ops
            .iter()
            .map(|&k| GbModule::zeros(k, config.embedding_dim))
            .collect();
        Ok(GdipBlock { config, modules })
    }

    pub fn forward(&self, img: &Image, e: &[f64]) -> Result<(Image, GateReport)> {
        let (h, w) = img.dims();
        let trace = self.forward_buf(img.data(), h, w, e, None, &mut StopGrad::live())?;
        let report = self.report(&trace);
        Ok((trace.output(), report))
    }

    /// Forward with externally fixed gate values in place of the learned
    /// gates (no gradient reaches the gate pre-activations).
    pub fn forward_with_gates(&self, img: &Image, e: &[f64], gates: &[f64]) -> Result<Image> {
        let (h, w) = img.dims();
        let trace = self.forward_buf(img.data(), h, w, e, Some(gates), &mut StopGrad::live())?;
        Ok(trace.output())
    }

    pub fn report(&self, trace: &GdipTrace) -> GateReport {
        GateReport {
            ops: self.config.ops.clone(),
            gates: trace.gates.clone(),
        }
    }

    pub(crate) fn forward_buf(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        e: &[f64],
        fixed_gates: Option<&[f64]>,
        sg: &mut StopGrad,
    ) -> Result<GdipTrace> {
        if e.len() != self.config.embedding_dim {
            return Err(GdipError::ShapeMismatch {
                expected: vec![self.config.embedding_dim],
                actual: vec![e.len()],
            });
        }
        let n = self.modules.len();
        let mut raws = Vec::with_capacity(n);
        let mut pre_gates = Vec::with_capacity(n);
        for gb in &self.modules {
            probe::hit(probe::Op::Linear);
            let raw = gb.linear.forward(e)?;
            pre_gates.push(raw[gb.kind.param_count()]);
            raws.push(raw);
        }
        let gates: Vec<f64> = match fixed_gates {
            Some(g) if g.len() != n => {
                return Err(GdipError::ShapeMismatch {
                    expected: vec![n],
                    actual: vec![g.len()],
                })
            }
            Some(g) => g.to_vec(),
            None => pre_gates.iter().map(|&s| gate(s)).collect(),
        };

        let mode = self.config.mode;
        let selected = (mode == GdipMode::Max).then(|| argmax(&gates));
        let mut branches = vec![None; n];
        let mut sum = vec![0.0; x.len()];
        for (i, gb) in self.modules.iter().enumerate() {
            if selected.is_some_and(|k| k != i) {
                continue;
            }
            let (params, _) = gb.params(&raws[i])?;
            probe::hit(probe::Op::IpOp);
            let (output, stats) = op_forward(&params, x, h, w, sg);
            let norm = sg.minmax(&output);
            probe::hit(probe::Op::Normalize);
            let normalized = norm.apply(&output);
            let (term, weight) = match mode {
                GdipMode::Full => (&normalized, gates[i]),
                GdipMode::Unnormalized => (&output, gates[i]),
                GdipMode::NoGates | GdipMode::Max => (&normalized, 1.0),
            };
            for (s, v) in sum.iter_mut().zip(term) {
                *s += v * weight;
            }
            branches[i] = Some(BranchTrace {
                params,
                stats,
                output,
                norm,
                normalized,
            });
        }
        let sum_stats = sg.minmax(&sum);
        probe::hit(probe::Op::Normalize);
        let z = sum_stats.apply(&sum);
        Ok(GdipTrace {
            h,
            w,
            input: x.to_vec(),
            embedding: e.to_vec(),
            raws,
            pre_gates,
            gates,
            gates_fixed: fixed_gates.is_some(),
            branches,
            selected,
            sum_stats,
            z,
        })
    }

    /// Backward through the block. Accumulates into `grads`; returns the
    /// gradients with respect to the input image and the embedding.
    pub(crate) fn backward(
        &self,
        trace: &GdipTrace,
        g_z: &[f64],
        grads: &mut GdipBlock,
    ) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (trace.h, trace.w);
        let mode = self.config.mode;
        let g_sum = trace.sum_stats.backward(g_z);
        let mut g_x = vec![0.0; trace.input.len()];
        let mut g_e = vec![0.0; trace.embedding.len()];
        for (i, gb) in self.modules.iter().enumerate() {
            let Some(branch) = &trace.branches[i] else {
                continue;
            };
            let wi = trace.gates[i];
            let (g_gate, g_out) = match mode {
                GdipMode::Full => {
                    let gg = dot(&g_sum, &branch.normalized);
                    let g_n: Vec<f64> = g_sum.iter().map(|g| g * wi).collect();
                    (gg, branch.norm.backward(&g_n))
                }
                GdipMode::Unnormalized => {
                    let gg = dot(&g_sum, &branch.output);
                    (gg, g_sum.iter().map(|g| g * wi).collect())
                }
                GdipMode::NoGates | GdipMode::Max => (0.0, branch.norm.backward(&g_sum)),
            };
            let (gx_i, gp) = op_vjp(&branch.params, &trace.input, h, w, &branch.stats, &g_out);
            for (a, b) in g_x.iter_mut().zip(&gx_i) {
                *a += b;
            }
            let np = gb.kind.param_count();
            let mut g_raw = map_raw_params_vjp(gb.kind, &trace.raws[i][..np], &gp);
            let gate_in = if trace.gates_fixed {
                0.0
            } else {
                g_gate * gate_grad(trace.pre_gates[i])
            };
            g_raw.push(gate_in);
            let ge = gb.linear.backward(&trace.embedding, &g_raw, &mut grads.modules[i].linear);
            for (a, b) in g_e.iter_mut().zip(&ge) {
                *a += b;
            }
        }
        (g_x, g_e)
    }
}

impl GdipBlock {
    /// Overwrites every weight and bias with uniform values in
    /// `[-bound, bound]`.
    pub fn visit_random(&mut self, rng: &mut impl Rng, bound: f64) {
        self.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
    }
}

impl Params for GdipBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, gb) in self.modules.iter().enumerate() {
            gb.linear.visit(&join(prefix, &format!("gb{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, gb) in self.modules.iter_mut().enumerate() {
            gb.linear.visit_mut(&join(prefix, &format!("gb{i}")), f);
        }
    }
}

/// Index of the largest value; the earliest wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Combines already computed operation outputs `f_i(x)` with gate values
/// according to `mode`. Exposed for checking the aggregation in isolation.
pub fn aggregate(mode: GdipMode, outputs: &[Image], gates: &[f64]) -> Result<Image> {
    let first = outputs
        .first()
        .ok_or_else(|| GdipError::invalid("no operation outputs to aggregate"))?;
    if gates.len() != outputs.len() {
        return Err(GdipError::ShapeMismatch {
            expected: vec![outputs.len()],
            actual: vec![gates.len()],
        });
    }
    let (h, w) = first.dims();
    let mut sum = vec![0.0; first.data().len()];
    let selected = (mode == GdipMode::Max).then(|| argmax(gates));
    for (i, out) in outputs.iter().enumerate() {
        if out.dims() != (h, w) {
            return Err(GdipError::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![out.height(), out.width()],
            });
        }
        if selected.is_some_and(|k| k != i) {
            continue;
        }
        let normalized = MinMax::of(out.data()).apply(out.data());
        let (term, weight) = match mode {
            GdipMode::Full => (normalized, gates[i]),
            GdipMode::Unnormalized => (out.data().to_vec(), gates[i]),
            GdipMode::NoGates | GdipMode::Max => (normalized, 1.0),
        };
        for (s, v) in sum.iter_mut().zip(&term) {
            *s += v * weight;
        }
    }
    let z = MinMax::of(&sum).apply(&sum);
    Ok(Image::from_clamped(h, w, z))
}
