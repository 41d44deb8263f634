//! Task-specific memory: per-task memory items read by cross-attention,
//! written by EMA soft aggregation, and selected by an adaptive gate.
//!
//! For queries `Q` (l×c) and memory item `M` (m×c):
//!
//! ```text
//! W = softmax_rows(Q Mᵀ / √c)              (l×m)
//! R = W M                                  (l×c)
//! N[j,k] = W[j,k] / max(Σ_j' W[j',k], ε)   (column-normalised W)
//! M ← α Nᵀ Q + (1 − α) M
//! ```
//!
//! The read is projection-free and single-head. Each memory row is
//! overwritten by a convex blend of its old value and an attention-weighted
//! average of the query rows that attended to it.

use rand::Rng;

use crate::error::{AtmError, Result};
use crate::numerics::{Matrix, NodeId, Tape};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_EPSILON_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    items: Vec<Matrix>,
    alpha: f64,
    epsilon_norm: f64,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `R`, one row per query.
    pub retrieved: Matrix,
    /// `W`, row-stochastic attention over memory slots.
    pub weights: Matrix,
}

impl MemoryBank {
    pub fn new(items: Vec<Matrix>, alpha: f64) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| AtmError::contract("memory bank needs at least one item"))?;
        if first.rows() == 0 || first.cols() == 0 {
            return Err(AtmError::contract("memory items must be non-empty"));
        }
        if let Some(bad) = items.iter().find(|m| m.shape() != first.shape()) {
            return Err(AtmError::dim("memory_bank", first.shape(), bad.shape()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(AtmError::contract(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            items,
            alpha,
            epsilon_norm: DEFAULT_EPSILON_NORM,
            frozen: false,
        })
    }

    /// `n` items of shape `m×c`, entries drawn from N(0, 1/c).
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, c: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (c as f64).sqrt();
        let items = (0..n).map(|_| Matrix::random_normal(m, c, std, rng)).collect();
        Self::new(items, alpha)
    }

    pub fn with_epsilon_norm(mut self, epsilon_norm: f64) -> Self {
        self.epsilon_norm = epsilon_norm;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Memory capacity `m` (slots per item).
    pub fn capacity(&self) -> usize {
        self.items[0].rows()
    }

    pub fn channels(&self) -> usize {
        self.items[0].cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon_norm(&self) -> f64 {
        self.epsilon_norm
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn items(&self) -> &[Matrix] {
        &self.items
    }

    pub fn item(&self, task: usize) -> Result<&Matrix> {
        self.items.get(task).ok_or(AtmError::Routing {
            index: task,
            count: self.items.len(),
        })
    }

    /// Mutable access for gradient steps. Refused while frozen.
    pub(crate) fn item_mut(&mut self, task: usize) -> Result<&mut Matrix> {
        if self.frozen {
            return Err(AtmError::Frozen);
        }
        let count = self.items.len();
        self.items.get_mut(task).ok_or(AtmError::Routing { index: task, count })
    }

    /// Cross-attention read of item `task`. Never modifies the bank.
    pub fn retrieve(&self, task: usize, queries: &Matrix) -> Result<RetrievalResult> {
        let memory = self.item(task)?;
        if queries.cols() != memory.cols() {
            return Err(AtmError::dim("retrieve", queries.shape(), memory.shape()));
        }
        let scale = 1.0 / (memory.cols() as f64).sqrt();
        let weights = queries.matmul(&memory.transpose())?.scale(scale).softmax_rows();
        let retrieved = weights.matmul(memory)?;
        Ok(RetrievalResult { retrieved, weights })
    }

    /// EMA soft-aggregation write of `queries` into item `task`.
    pub fn update(&mut self, task: usize, queries: &Matrix, weights: &Matrix) -> Result<()> {
        if self.frozen {
            return Err(AtmError::Frozen);
        }
        let memory = self.item(task)?;
        let (m, c) = memory.shape();
        if queries.cols() != c {
            return Err(AtmError::dim("update", queries.shape(), memory.shape()));
        }
        if weights.rows() != queries.rows() || weights.cols() != m {
            return Err(AtmError::dim("update", weights.shape(), (queries.rows(), m)));
        }
        let normalized = column_normalize(weights, self.epsilon_norm);
        let aggregated = normalized.transpose().matmul(queries)?;
        let alpha = self.alpha;
        let fused = aggregated.scale(alpha).add(&memory.scale(1.0 - alpha))?;
        self.items[task] = fused;
        Ok(())
    }
}

/// `N[j,k] = W[j,k] / max(Σ_j' W[j',k], epsilon)`.
pub fn column_normalize(weights: &Matrix, epsilon: f64) -> Matrix {
    let (rows, cols) = weights.shape();
    let mut sums = vec![0.0; cols];
    for r in 0..rows {
        for (s, w) in sums.iter_mut().zip(weights.row(r)) {
            *s += w;
        }
    }
    let mut out = weights.clone();
    for r in 0..rows {
        for (k, s) in sums.iter().enumerate() {
            out.set(r, k, weights.get(r, k) / s.max(epsilon));
        }
    }
    out
}

/// Records `W` and `R` for a retrieval on a tape so gradients reach both the
/// queries and the memory item. `memory_t` must be the transpose of `memory`
/// (shared across retrievals from the same item within one step).
pub fn retrieve_on_tape(
    tape: &mut Tape,
    queries: NodeId,
    memory: NodeId,
    memory_t: NodeId,
) -> Result<(NodeId, NodeId)> {
    let c = tape.value(memory).cols();
    if tape.value(queries).cols() != c {
        return Err(AtmError::dim(
            "retrieve",
            tape.value(queries).shape(),
            tape.value(memory).shape(),
        ));
    }
    let logits = tape.matmul(queries, memory_t)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let weights = tape.softmax_rows(logits);
    let retrieved = tape.matmul(weights, memory)?;
    Ok((retrieved, weights))
}

/// Multi-class MLP over the mean-pooled query rows:
/// `softmax(relu(p W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateClassifier {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Gate parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl GateClassifier {
    pub fn zeros(c: usize, hidden: usize, n: usize) -> Self {
        Self {
            w1: Matrix::zeros(c, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, n),
            b2: Matrix::zeros(1, n),
        }
    }

    pub fn random<R: Rng + ?Sized>(c: usize, hidden: usize, n: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::random_normal(c, hidden, (2.0 / c as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(hidden, n, (1.0 / hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, n),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.rows()
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Class logits for pooled inputs (one row per condition).
    pub fn logits(&self, pooled: &Matrix) -> Result<Matrix> {
        if pooled.cols() != self.channels() {
            return Err(AtmError::dim("gate", pooled.shape(), self.w1.shape()));
        }
        let hidden = pooled.matmul(&self.w1)?.add(&self.b1)?.relu();
        hidden.matmul(&self.w2)?.add(&self.b2)
    }

    /// Predicted task and class distribution for one condition's queries.
    pub fn predict(&self, queries: &Matrix) -> Result<(usize, Matrix)> {
        if queries.cols() != self.channels() {
            return Err(AtmError::dim("gate_predict", queries.shape(), self.w1.shape()));
        }
        let probs = self.logits(&queries.mean_pool_rows()?)?.softmax_rows();
        Ok((argmax(probs.row(0)), probs))
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GateNodes {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        GateNodes {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }
}

impl GateNodes {
    pub fn logits(&self, tape: &mut Tape, pooled: NodeId) -> Result<NodeId> {
        let h = tape.matmul(pooled, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let z = tape.matmul(h, self.w2)?;
        tape.add(z, self.b2)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulated {
    pub task: usize,
    pub result: RetrievalResult,
}

/// Routes `queries` to a memory item (ground-truth label if given, else the
/// gate's prediction), retrieves from it, and in training mode writes the
/// queries back with the same attention weights.
pub fn modulate(
    bank: &mut MemoryBank,
    gate: &GateClassifier,
    queries: &Matrix,
    task_label: Option<usize>,
    training: bool,
) -> Result<Modulated> {
    if training && bank.is_frozen() {
        return Err(AtmError::Frozen);
    }
    let task = match task_label {
        Some(t) => t,
        None => gate.predict(queries)?.0,
    };
    let result = bank.retrieve(task, queries)?;
    if training {
        bank.update(task, queries, &result.weights)?;
    }
    Ok(Modulated { task, result })
}

/// Concatenates retrieved rows of several conditions along the sequence axis.
pub fn compose(results: &[RetrievalResult]) -> Result<Matrix> {
    let parts: Vec<&Matrix> = results.iter().map(|r| &r.retrieved).collect();
    if parts.is_empty() {
        return Err(AtmError::contract("compose needs at least one retrieval"));
    }
    Matrix::concat_rows(&parts)
}
