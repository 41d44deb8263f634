//! Full runs, held-out evaluation and ablation arms.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{AtmError, Result};
use crate::numerics::{Matrix, SeedStreams};
use crate::pipeline::{Routing, TrainState};
use crate::synthbench::data::{train_eval_split, Benchmark, SynthSample, TaskKind};
use crate::synthbench::metrics::{pca_2d, separation_ratio, struc_sim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// The standard three-stage pipeline.
    Full,
    /// The decoder consumes the encoded queries directly.
    NoMemory,
    /// Routing by a seeded uniform-random memory item instead of the gate.
    NoGate,
    /// `q0` stays at its random initial value.
    NoQueries,
    /// Stage 3 runs without detail tokens.
    NoDetails,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoMemory, Arm::NoGate, Arm::NoQueries, Arm::NoDetails];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMemory => "no_memory",
            Arm::NoGate => "no_gate",
            Arm::NoQueries => "no_queries",
            Arm::NoDetails => "no_details",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
            format!("unknown arm `{s}` (valid arms: {})", valid.join(", "))
        })
    }
}

/// Per-block errors for subject+style composition against single-condition
/// inference with the mismatched condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionMetrics {
    pub pairs: usize,
    /// Subject output block, composed inference.
    pub subject_error: f64,
    /// Style output block, composed inference.
    pub style_error: f64,
    /// Subject output block, style condition alone.
    pub subject_baseline: f64,
    /// Style output block, subject condition alone.
    pub style_baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Held-out gate accuracy right after stage 1.
    pub gate_accuracy: f64,
    /// Fraction of held-out samples routed to their own task's memory at the
    /// end of training (gate for adaptive arms, random for `no_gate`).
    pub routing_accuracy: f64,
    pub separation_ratio_raw: f64,
    pub separation_ratio_retrieved: f64,
    /// Held-out MSE after stage 2 (no detail tokens).
    pub stage2_eval_loss: f64,
    /// Held-out MSE after stage 3; the run's final loss.
    pub final_loss: f64,
    pub stage2_leading_mean: f64,
    pub stage2_trailing_mean: f64,
    pub struc_sim: f64,
    pub composition: CompositionMetrics,
}

/// Wall-clock time per stage plus final evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub stages: [Duration; 3],
    pub metrics: Duration,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Arm,
    pub state: TrainState,
    pub report: MetricReport,
    pub timings: StageTimings,
    pub bench: Benchmark,
    pub eval: Vec<SynthSample>,
}

/// Window used for the leading/trailing stage-2 loss means.
pub const LOSS_WINDOW: usize = 50;

/// Trains `config` end to end and evaluates it on held-out samples.
pub fn run(config: &TrainConfig) -> Result<RunOutcome> {
    let (bench, train, eval) = train_eval_split(config)?;
    let mut state = TrainState::new(config)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    state.stage1_train(&train)?;
    timings.stages[0] = t.elapsed();
    let gate_accuracy = gate_accuracy(&state, &eval)?;

    let t = Instant::now();
    state.stage2_train(&train)?;
    timings.stages[1] = t.elapsed();
    let stage2_eval_loss = evaluate(&state, &eval)?.loss;

    let t = Instant::now();
    state.stage3_train(&train)?;
    timings.stages[2] = t.elapsed();

    let t = Instant::now();
    let summary = evaluate(&state, &eval)?;
    let composition = composition_metrics(&state, &bench, &eval)?;
    let (lead, trail) = leading_trailing(&state.history().stage2, LOSS_WINDOW);
    let report = MetricReport {
        gate_accuracy,
        routing_accuracy: summary.routing_accuracy,
        separation_ratio_raw: summary.separation_raw,
        separation_ratio_retrieved: summary.separation_retrieved,
        stage2_eval_loss,
        final_loss: summary.loss,
        stage2_leading_mean: lead,
        stage2_trailing_mean: trail,
        struc_sim: summary.struc_sim,
        composition,
    };
    timings.metrics = t.elapsed();

    Ok(RunOutcome {
        arm: config.arm,
        state,
        report,
        timings,
        bench,
        eval,
    })
}

/// One ablation arm on `config`'s seed and data.
pub fn run_ablation(arm: Arm, config: &TrainConfig) -> Result<RunOutcome> {
    run(&TrainConfig { arm, ..config.clone() })
}

/// Mean of the first and last `window` entries (fewer if the curve is
/// shorter). Empty curves give NaN.
pub fn leading_trailing(curve: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(curve.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if w == 0 {
        return (f64::NAN, f64::NAN);
    }
    (mean(&curve[..w]), mean(&curve[curve.len() - w..]))
}

/// Held-out accuracy of the gate on pooled encoded queries.
pub fn gate_accuracy(state: &TrainState, eval: &[SynthSample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in eval {
        let q = state.encoder().encode(state.queries(), &s.x)?;
        if state.gate().predict(&q)?.0 == s.task {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len().max(1) as f64)
}

/// Memory item each held-out sample is routed to under the state's
/// inference routing: the gate for adaptive variants, otherwise draws from
/// the `ablation.eval` stream in sample order.
pub fn eval_routes(state: &TrainState, eval: &[SynthSample]) -> Result<Vec<usize>> {
    match state.variant().routing {
        Routing::Adaptive => eval
            .iter()
            .map(|s| {
                let q = state.encoder().encode(state.queries(), &s.x)?;
                Ok(state.gate().predict(&q)?.0)
            })
            .collect(),
        Routing::Random => {
            let n = state.config().dims.n;
            let mut rng = SeedStreams::new(state.config().seed).stream("ablation.eval");
            Ok(eval.iter().map(|_| rng.gen_range(0..n)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub routing_accuracy: f64,
    pub separation_raw: f64,
    pub separation_retrieved: f64,
    pub struc_sim: f64,
    pub routes: Vec<usize>,
    /// Pooled encoded queries per sample.
    pub raw: Vec<Vec<f64>>,
    /// Pooled retrieved rows per sample.
    pub retrieved: Vec<Vec<f64>>,
}

/// Held-out evaluation at the state's current point of training.
pub fn evaluate(state: &TrainState, eval: &[SynthSample]) -> Result<EvalSummary> {
    if eval.is_empty() {
        return Err(AtmError::contract("evaluation set is empty"));
    }
    let routes = eval_routes(state, eval)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut raw = Vec::with_capacity(eval.len());
    let mut retrieved = Vec::with_capacity(eval.len());
    let mut outputs = Vec::with_capacity(eval.len());
    for (s, &route) in eval.iter().zip(&routes) {
        let pass = state.condition_pass(&s.x, Some(route))?;
        let assembled = crate::conditioning::assemble(&pass.retrieved, pass.details.as_ref())?;
        let out = state.decoder().forward(&assembled.mean_pool_rows()?)?;
        let diff = out.sub(&s.target)?;
        sq += diff.data().iter().map(|d| d * d).sum::<f64>();
        count += diff.data().len();
        raw.push(pass.queries.mean_pool_rows()?.into_data());
        retrieved.push(pass.retrieved.mean_pool_rows()?.into_data());
        outputs.push(out);
    }
    let labels: Vec<usize> = eval.iter().map(|s| s.task).collect();
    let routing_accuracy = routes.iter().zip(&labels).filter(|(r, l)| r == l).count() as f64 / eval.len() as f64;
    Ok(EvalSummary {
        loss: sq / count as f64,
        routing_accuracy,
        separation_raw: separation_ratio(&raw, &labels)?,
        separation_retrieved: separation_ratio(&retrieved, &labels)?,
        struc_sim: structure_similarity(state, eval, &outputs)?,
        routes,
        raw,
        retrieved,
    })
}

/// Mean struc-sim over structure-task samples. Predicted and target
/// structure blocks are mapped to `[0, 1]` with the min/max of the target
/// structure blocks over the evaluation set, clamping predictions.
fn structure_similarity(state: &TrainState, eval: &[SynthSample], outputs: &[Matrix]) -> Result<f64> {
    let structure = TaskKind::Structure.index();
    if structure >= state.config().dims.n {
        return Ok(f64::NAN);
    }
    let block = crate::conditioning::contiguous_blocks(state.config().dims.d_out, state.config().dims.n)?
        .swap_remove(structure);
    let picked: Vec<(&SynthSample, &Matrix)> = eval.iter().zip(outputs).filter(|(s, _)| s.task == structure).collect();
    if picked.is_empty() {
        return Ok(f64::NAN);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, _) in &picked {
        for &v in &s.target.row(0)[block.clone()] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let norm = |v: f64| ((v - lo) / span).clamp(0.0, 1.0);
    let mut total = 0.0;
    for (s, out) in &picked {
        let a = Matrix::row_vector(&out.row(0)[block.clone()]).map(norm);
        let b = Matrix::row_vector(&s.target.row(0)[block.clone()]).map(norm);
        total += struc_sim(&a, &b)?;
    }
    Ok(total / picked.len() as f64)
}

fn block_mse(a: &Matrix, b: &Matrix, block: std::ops::Range<usize>) -> f64 {
    let len = block.len().max(1) as f64;
    block.map(|i| (a.get(0, i) - b.get(0, i)).powi(2)).sum::<f64>() / len
}

/// Pairs held-out subject and style samples. For each pair the composed
/// output is scored on the subject output block against the subject target
/// and on the style block against the style target; baselines score the
/// same blocks when only the other condition is given.
pub fn composition_metrics(state: &TrainState, bench: &Benchmark, eval: &[SynthSample]) -> Result<CompositionMetrics> {
    let (subject, style) = (TaskKind::Subject.index(), TaskKind::Style.index());
    let subjects: Vec<&SynthSample> = eval.iter().filter(|s| s.task == subject).collect();
    let styles: Vec<&SynthSample> = eval.iter().filter(|s| s.task == style).collect();
    let pairs = subjects.len().min(styles.len());
    if pairs == 0 {
        return Err(AtmError::contract("composition needs subject and style samples"));
    }
    let (sb, yb) = (bench.output_block(subject), bench.output_block(style));
    let mut m = CompositionMetrics {
        pairs,
        subject_error: 0.0,
        style_error: 0.0,
        subject_baseline: 0.0,
        style_baseline: 0.0,
    };
    for (s, y) in subjects.iter().zip(&styles) {
        let composed = state.predict_composed(&[(s.x.clone(), subject), (y.x.clone(), style)])?;
        let style_only = state.predict(&y.x, Some(style))?;
        let subject_only = state.predict(&s.x, Some(subject))?;
        m.subject_error += block_mse(&composed, &s.target, sb.clone());
        m.style_error += block_mse(&composed, &y.target, yb.clone());
        m.subject_baseline += block_mse(&style_only, &s.target, sb.clone());
        m.style_baseline += block_mse(&subject_only, &y.target, yb.clone());
    }
    let k = pairs as f64;
    m.subject_error /= k;
    m.style_error /= k;
    m.subject_baseline /= k;
    m.style_baseline /= k;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Raw,
    Retrieved,
    Memory,
}

impl PointKind {
    pub fn name(self) -> &'static str {
        match self {
            PointKind::Raw => "raw",
            PointKind::Retrieved => "retrieved",
            PointKind::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPoint {
    pub x: f64,
    pub y: f64,
    /// Task label for raw/retrieved points, item index for memory rows.
    pub label: usize,
    pub kind: PointKind,
}

/// Joint 2-D PCA of pooled raw queries, pooled retrieved rows (one each per
/// sample) and every memory row, in that order.
pub fn projection(state: &TrainState, eval: &[SynthSample]) -> Result<Vec<ProjectionPoint>> {
    let summary = evaluate(state, eval)?;
    let mut points = Vec::new();
    let mut meta = Vec::new();
    for (p, s) in summary.raw.iter().zip(eval) {
        points.push(p.clone());
        meta.push((s.task, PointKind::Raw));
    }
    for (p, s) in summary.retrieved.iter().zip(eval) {
        points.push(p.clone());
        meta.push((s.task, PointKind::Retrieved));
    }
    for (i, item) in state.bank().items().iter().enumerate() {
        for r in 0..item.rows() {
            points.push(item.row(r).to_vec());
            meta.push((i, PointKind::Memory));
        }
    }
    let xy = pca_2d(&points)?;
    Ok(xy
        .into_iter()
        .zip(meta)
        .map(|([x, y], (label, kind))| ProjectionPoint { x, y, label, kind })
        .collect())
}
