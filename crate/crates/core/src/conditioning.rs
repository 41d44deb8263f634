//! Semantic query bank, the frozen encoder that propagates it, and the frozen
//! detail branch that supplies per-block fine-grained tokens.

use std::ops::Range;

use rand::Rng;

use crate::error::{AtmError, Result};
use crate::numerics::{Matrix, NodeId, Tape};

/// Trainable queries `q0` (l×c).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticQueryBank {
    pub q0: Matrix,
}

impl SemanticQueryBank {
    pub fn new(q0: Matrix) -> Self {
        Self { q0 }
    }

    pub fn random<R: Rng + ?Sized>(l: usize, c: usize, rng: &mut R) -> Self {
        Self {
            q0: Matrix::random_normal(l, c, 1.0, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.q0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q0.rows() == 0
    }
}

/// `Q = relu(q0 w_q + (x w_x + b))`, the condition term broadcast to every
/// query row. All weights are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    w_q: Matrix,
    w_x: Matrix,
    b: Matrix,
}

impl FrozenEncoder {
    pub fn new(w_q: Matrix, w_x: Matrix, b: Matrix) -> Result<Self> {
        let c = w_q.cols();
        if w_q.rows() != c {
            return Err(AtmError::dim("encoder.w_q", w_q.shape(), (c, c)));
        }
        if w_x.cols() != c {
            return Err(AtmError::dim("encoder.w_x", w_x.shape(), (w_x.rows(), c)));
        }
        if b.shape() != (1, c) {
            return Err(AtmError::dim("encoder.b", b.shape(), (1, c)));
        }
        Ok(Self { w_q, w_x, b })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, c: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::random_normal(c, c, 1.0 / (c as f64).sqrt(), rng),
            w_x: Matrix::random_normal(d, c, 1.0 / (d as f64).sqrt(), rng),
            b: Matrix::random_normal(1, c, 0.1, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.rows()
    }

    pub fn channels(&self) -> usize {
        self.w_q.cols()
    }

    pub fn weights(&self) -> [&Matrix; 3] {
        [&self.w_q, &self.w_x, &self.b]
    }

    /// The per-condition row `x w_x + b` (1×c).
    pub fn condition_row(&self, x: &Matrix) -> Result<Matrix> {
        if x.shape() != (1, self.input_dim()) {
            return Err(AtmError::dim("encode", x.shape(), (1, self.input_dim())));
        }
        x.matmul(&self.w_x)?.add(&self.b)
    }

    /// `q0 w_q`, shared by every condition.
    pub fn query_term(&self, qbank: &SemanticQueryBank) -> Result<Matrix> {
        qbank.q0.matmul(&self.w_q)
    }

    pub fn encode(&self, qbank: &SemanticQueryBank, x: &Matrix) -> Result<Matrix> {
        let row = self.condition_row(x)?;
        Ok(self.query_term(qbank)?.add(&row)?.relu())
    }

    /// Records `q0 w_q` on a tape; `q0` is whatever node the caller
    /// registered (a leaf while queries train, a constant otherwise).
    pub fn query_term_on_tape(&self, tape: &mut Tape, q0: NodeId) -> Result<NodeId> {
        let w_q = tape.constant(self.w_q.clone());
        tape.matmul(q0, w_q)
    }

    /// `relu(query_term + condition_row)` on a tape.
    pub fn encode_on_tape(&self, tape: &mut Tape, query_term: NodeId, x: &Matrix) -> Result<NodeId> {
        let row = tape.constant(self.condition_row(x)?);
        let pre = tape.add(query_term, row)?;
        Ok(tape.relu(pre))
    }
}

/// Frozen per-block projection of the raw condition: token `k` is
/// `relu(x[block k] · w_v[block k, :])`, with the `d` coordinates split into
/// `v` contiguous blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBranch {
    w_v: Matrix,
    blocks: Vec<Range<usize>>,
}

impl DetailBranch {
    pub fn new(w_v: Matrix, tokens: usize) -> Result<Self> {
        let blocks = contiguous_blocks(w_v.rows(), tokens)?;
        Ok(Self { w_v, blocks })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, c: usize, tokens: usize, rng: &mut R) -> Result<Self> {
        let block = d.div_ceil(tokens.max(1)).max(1);
        Self::new(Matrix::random_normal(d, c, 1.0 / (block as f64).sqrt(), rng), tokens)
    }

    pub fn tokens_per_condition(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn weights(&self) -> &Matrix {
        &self.w_v
    }

    pub fn detail_tokens(&self, x: &Matrix) -> Result<Matrix> {
        let (d, c) = self.w_v.shape();
        if x.shape() != (1, d) {
            return Err(AtmError::dim("detail_tokens", x.shape(), (1, d)));
        }
        let mut out = Matrix::zeros(self.blocks.len(), c);
        for (k, block) in self.blocks.iter().enumerate() {
            for i in block.clone() {
                let xi = x.get(0, i);
                if xi == 0.0 {
                    continue;
                }
                for j in 0..c {
                    out.set(k, j, out.get(k, j) + xi * self.w_v.get(i, j));
                }
            }
        }
        Ok(out.relu())
    }
}

/// Splits `0..d` into `parts` contiguous ranges whose lengths differ by at
/// most one (longer ranges first).
pub fn contiguous_blocks(d: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 || parts > d {
        return Err(AtmError::contract(format!(
            "cannot split {d} coordinates into {parts} blocks"
        )));
    }
    let base = d / parts;
    let extra = d % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// `[retrieved; details]`, or `retrieved` unchanged when there are no
/// detail tokens.
pub fn assemble(retrieved: &Matrix, details: Option<&Matrix>) -> Result<Matrix> {
    match details {
        None => Ok(retrieved.clone()),
        Some(d) => Matrix::concat_rows(&[retrieved, d]),
    }
}
