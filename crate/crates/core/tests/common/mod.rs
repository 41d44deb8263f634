//! Central-difference gradient checking against the tape.

#![allow(dead_code)]

use atm_core::numerics::{NodeId, SeedStreams, StreamRng, Tape};
use atm_core::{Matrix, Result};
use rand::Rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
    /// (input, row, col, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eval<F>(inputs: &[Matrix], build: &F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let loss = build(&mut tape, &ids).expect("graph builds");
    tape.value(loss).get(0, 0)
}

/// Compares tape gradients of a scalar graph with central differences for
/// every entry of every input.
pub fn gradcheck<F>(inputs: &[Matrix], build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    gradcheck_entries(inputs, build, None)
}

/// As [`gradcheck`], but probes at most `limit` entries per input, chosen
/// from `rng`.
pub fn gradcheck_sampled<F>(inputs: &[Matrix], build: F, limit: usize, rng: &mut StreamRng) -> GradCheck
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    gradcheck_entries(inputs, build, Some((limit, rng)))
}

fn gradcheck_entries<F>(inputs: &[Matrix], build: F, mut sample: Option<(usize, &mut StreamRng)>) -> GradCheck
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids).expect("graph builds");
    let grads = tape.backward(loss).expect("scalar loss");

    let mut out = GradCheck {
        max_rel_error: 0.0,
        entries: 0,
        worst: None,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        assert_eq!(analytic.shape(), input.shape(), "gradient shape of input {k}");
        let total = input.rows() * input.cols();
        let picks: Vec<usize> = match sample.as_mut() {
            Some((limit, rng)) if total > *limit => (0..*limit).map(|_| rng.gen_range(0..total)).collect(),
            _ => (0..total).collect(),
        };
        for flat in picks {
            let (r, c) = (flat / input.cols(), flat % input.cols());
            let mut probe = inputs.to_vec();
            let base = input.get(r, c);
            probe[k].set(r, c, base + STEP);
            let up = eval(&probe, &build);
            probe[k].set(r, c, base - STEP);
            let down = eval(&probe, &build);
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(r, c);
            let err = rel_error(a, numeric);
            out.entries += 1;
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(err);
                out.worst = Some((k, r, c, a, numeric));
            }
        }
    }
    out
}

pub fn random(rows: usize, cols: usize, std: f64, rng: &mut StreamRng) -> Matrix {
    Matrix::random_normal(rows, cols, std, rng)
}

pub fn rng(name: &str, seed: u64) -> StreamRng {
    SeedStreams::new(seed).stream(name)
}

pub type Graph = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// A scalar graph over some inputs, mirroring one of the training graphs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Matrix>,
    pub build: Graph,
}

impl Case {
    pub fn check(&self) -> GradCheck {
        gradcheck(&self.inputs, &self.build)
    }
}

fn decoder(tape: &mut Tape, pooled: NodeId, p: &[NodeId]) -> Result<NodeId> {
    let h = tape.matmul(pooled, p[0])?;
    let h = tape.add(h, p[1])?;
    let h = tape.relu(h);
    let y = tape.matmul(h, p[2])?;
    tape.add(y, p[3])
}

fn decoder_params(c: usize, hidden: usize, d_out: usize, rng: &mut StreamRng) -> Vec<Matrix> {
    vec![
        random(c, hidden, 0.5, rng),
        random(1, hidden, 0.1, rng),
        random(hidden, d_out, 0.5, rng),
        random(1, d_out, 0.1, rng),
    ]
}

/// One instance of every graph used by the three training stages, with
/// dimensions drawn from `seed`.
pub fn stage_cases(seed: u64) -> Vec<Case> {
    use atm_core::atm::{retrieve_on_tape, GateNodes};
    use atm_core::conditioning::{DetailBranch, FrozenEncoder};

    let mut g = rng("gradcheck.cases", seed);
    let l = g.gen_range(1..=6);
    let m = g.gen_range(1..=6);
    let c = g.gen_range(2..=8);
    let d = g.gen_range(3..=9);
    let v = g.gen_range(1..=d.min(3));
    let hidden = g.gen_range(2..=8);
    let d_out = g.gen_range(1..=4);
    let batch = g.gen_range(2..=3);

    let encoder = FrozenEncoder::random(d, c, &mut g);
    let detail = DetailBranch::random(d, c, v, &mut g).expect("v ≤ d");
    let xs: Vec<Matrix> = (0..batch).map(|_| random(1, d, 1.0, &mut g)).collect();
    let tasks: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let details: Vec<Matrix> = xs.iter().map(|x| detail.detail_tokens(x).unwrap()).collect();
    let targets = random(batch, d_out, 1.0, &mut g);
    let q0 = random(l, c, 1.0, &mut g);
    let memories = [random(m, c, 1.0, &mut g), random(m, c, 1.0, &mut g)];

    let mut cases = Vec::new();

    cases.push(Case {
        name: "linear_mse",
        inputs: vec![random(d_out, d, 1.0, &mut g), random(d, 1, 1.0, &mut g)],
        build: {
            let y = random(d_out, 1, 1.0, &mut g);
            Box::new(move |t, p| {
                let wx = t.matmul(p[0], p[1])?;
                let y = t.constant(y.clone());
                t.mse(wx, y)
            })
        },
    });

    cases.push(Case {
        name: "retrieval_sum",
        inputs: vec![random(l, c, 1.0, &mut g), memories[0].clone()],
        build: Box::new(|t, p| {
            let mt = t.transpose(p[1]);
            let (r, _) = retrieve_on_tape(t, p[0], p[1], mt)?;
            Ok(t.sum(r))
        }),
    });

    cases.push(Case {
        name: "retrieval_mse",
        inputs: vec![random(l, c, 1.0, &mut g), memories[1].clone()],
        build: {
            let y = random(l, c, 1.0, &mut g);
            Box::new(move |t, p| {
                let mt = t.transpose(p[1]);
                let (r, _) = retrieve_on_tape(t, p[0], p[1], mt)?;
                let y = t.constant(y.clone());
                t.mse(r, y)
            })
        },
    });

    // stage 1: encoder → pooled queries → gate → cross-entropy
    {
        let (encoder, xs, tasks) = (encoder.clone(), xs.clone(), tasks.clone());
        let mut inputs = vec![q0.clone()];
        inputs.extend([
            random(c, hidden, 0.5, &mut g),
            random(1, hidden, 0.1, &mut g),
            random(hidden, 2, 0.5, &mut g),
            random(1, 2, 0.1, &mut g),
        ]);
        cases.push(Case {
            name: "stage1_gate",
            inputs,
            build: Box::new(move |t, p| {
                let qt = encoder.query_term_on_tape(t, p[0])?;
                let mut pooled = Vec::new();
                for x in &xs {
                    let q = encoder.encode_on_tape(t, qt, x)?;
                    pooled.push(t.mean_pool_rows(q)?);
                }
                let pooled = t.concat_rows(&pooled)?;
                let gate = GateNodes {
                    w1: p[1],
                    b1: p[2],
                    w2: p[3],
                    b2: p[4],
                };
                let logits = gate.logits(t, pooled)?;
                t.cross_entropy(logits, &tasks)
            }),
        });
    }

    // stages 2 and 3: encoder → routed retrieval (→ details) → pool → decoder → mse
    for (name, with_details) in [("stage2_semantic", false), ("stage3_joint", true)] {
        let (encoder, xs, tasks, details, targets) = (
            encoder.clone(),
            xs.clone(),
            tasks.clone(),
            details.clone(),
            targets.clone(),
        );
        let mut inputs = vec![q0.clone(), memories[0].clone(), memories[1].clone()];
        inputs.extend(decoder_params(c, hidden, d_out, &mut g));
        cases.push(Case {
            name,
            inputs,
            build: Box::new(move |t, p| {
                let qt = encoder.query_term_on_tape(t, p[0])?;
                let mts = [t.transpose(p[1]), t.transpose(p[2])];
                let mut pooled = Vec::new();
                for ((x, &task), det) in xs.iter().zip(&tasks).zip(&details) {
                    let q = encoder.encode_on_tape(t, qt, x)?;
                    let (mut cond, _) = retrieve_on_tape(t, q, p[1 + task], mts[task])?;
                    if with_details {
                        let det = t.constant(det.clone());
                        cond = t.concat_rows(&[cond, det])?;
                    }
                    pooled.push(t.mean_pool_rows(cond)?);
                }
                let pooled = t.concat_rows(&pooled)?;
                let y = decoder(t, pooled, &p[3..7])?;
                let target = t.constant(targets.clone());
                t.mse(y, target)
            }),
        });
    }

    // composition: two conditions, each retrieved from its own item
    {
        let (encoder, xs, details) = (encoder.clone(), xs.clone(), details.clone());
        let target = random(1, d_out, 1.0, &mut g);
        let mut inputs = vec![q0, memories[0].clone(), memories[1].clone()];
        inputs.extend(decoder_params(c, hidden, d_out, &mut g));
        cases.push(Case {
            name: "composed",
            inputs,
            build: Box::new(move |t, p| {
                let qt = encoder.query_term_on_tape(t, p[0])?;
                let mut rows = Vec::new();
                for (k, x) in xs.iter().take(2).enumerate() {
                    let q = encoder.encode_on_tape(t, qt, x)?;
                    let mt = t.transpose(p[1 + k]);
                    rows.push(retrieve_on_tape(t, q, p[1 + k], mt)?.0);
                }
                for det in details.iter().take(2) {
                    rows.push(t.constant(det.clone()));
                }
                let all = t.concat_rows(&rows)?;
                let pooled = t.mean_pool_rows(all)?;
                let y = decoder(t, pooled, &p[3..7])?;
                let target = t.constant(target.clone());
                t.mse(y, target)
            }),
        });
    }

    cases
}
