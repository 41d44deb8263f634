//! Decoder head and the three-stage training schedule.
//!
//! | stage | trains                         | conditioning seen by the decoder |
//! |-------|--------------------------------|----------------------------------|
//! | 1     | gate                           | (none; gate classifies queries)  |
//! | 2     | queries, memory, decoder       | retrieved queries                |
//! | 3     | queries, memory, decoder       | retrieved queries + detail tokens|
//!
//! The encoder and detail branch never change. During stages 2-3 routing is
//! teacher-forced by the sample's task label; after training the bank is
//! frozen and the gate routes.

use rand::Rng;

use crate::atm::{retrieve_on_tape, GateClassifier, MemoryBank};
use crate::conditioning::{assemble, DetailBranch, FrozenEncoder, SemanticQueryBank};
use crate::config::TrainConfig;
use crate::error::{AtmError, Result};
use crate::numerics::{rng::fnv1a, AdamState, Matrix, NodeId, SeedStreams, StreamRng, Tape};
use crate::synthbench::{Arm, SynthSample};

/// Two-layer relu MLP from a pooled condition (1×c) to an output (1×d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, Copy)]
struct DecoderNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl DecoderHead {
    pub fn random<R: Rng + ?Sized>(c: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::random_normal(c, hidden, (2.0 / c as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(hidden, d_out, (1.0 / hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d_out),
        }
    }

    pub fn forward(&self, pooled: &Matrix) -> Result<Matrix> {
        if pooled.cols() != self.w1.rows() {
            return Err(AtmError::dim("decoder", pooled.shape(), self.w1.shape()));
        }
        pooled
            .matmul(&self.w1)?
            .add(&self.b1)?
            .relu()
            .matmul(&self.w2)?
            .add(&self.b2)
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn register(&self, tape: &mut Tape) -> DecoderNodes {
        DecoderNodes {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

impl DecoderNodes {
    fn forward(&self, tape: &mut Tape, pooled: NodeId) -> Result<NodeId> {
        let h = tape.matmul(pooled, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let y = tape.matmul(h, self.w2)?;
        tape.add(y, self.b2)
    }

    fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GatePretrain,
    Semantic,
    Joint,
    Done,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::GatePretrain => 1,
            Stage::Semantic => 2,
            Stage::Joint => 3,
            Stage::Done => 4,
        }
    }

    fn label(self) -> String {
        match self {
            Stage::Done => "done".into(),
            s => s.number().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Ground-truth labels while training, the gate at inference.
    Adaptive,
    /// A seeded uniform-random memory item, in training and at inference.
    Random,
}

/// Which pieces of the model are active; the full model enables all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub use_memory: bool,
    pub routing: Routing,
    pub train_queries: bool,
    pub use_details: bool,
}

impl From<Arm> for Variant {
    fn from(arm: Arm) -> Self {
        let full = Variant {
            use_memory: true,
            routing: Routing::Adaptive,
            train_queries: true,
            use_details: true,
        };
        match arm {
            Arm::Full => full,
            Arm::NoMemory => Variant {
                use_memory: false,
                ..full
            },
            Arm::NoGate => Variant {
                routing: Routing::Random,
                ..full
            },
            Arm::NoQueries => Variant {
                train_queries: false,
                ..full
            },
            Arm::NoDetails => Variant {
                use_details: false,
                ..full
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub stage3: Vec<f64>,
}

impl LossHistory {
    pub fn stage(&self, stage: u8) -> &[f64] {
        match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            3 => &self.stage3,
            _ => &[],
        }
    }
}

/// Parameter groups for the freeze contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Gate,
    Queries,
    Memory,
    Decoder,
    Encoder,
    Detail,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Gate,
        ParamGroup::Queries,
        ParamGroup::Memory,
        ParamGroup::Decoder,
        ParamGroup::Encoder,
        ParamGroup::Detail,
    ];

    /// Whether the group may change during `stage`.
    pub fn trainable_in(self, stage: Stage) -> bool {
        match self {
            ParamGroup::Gate => stage == Stage::GatePretrain,
            ParamGroup::Queries | ParamGroup::Memory | ParamGroup::Decoder => {
                matches!(stage, Stage::Semantic | Stage::Joint)
            }
            ParamGroup::Encoder | ParamGroup::Detail => false,
        }
    }
}

/// Learning rates actually handed to the optimizer, per stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Telemetry {
    pub stage_lr: [Option<f64>; 3],
    pub optimizer_steps: [usize; 3],
}

/// Decoder-side view of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPass {
    pub task: usize,
    pub queries: Matrix,
    /// Retrieved rows, or the raw queries when memory is disabled.
    pub retrieved: Matrix,
    pub details: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    config: TrainConfig,
    variant: Variant,
    streams: SeedStreams,
    encoder: FrozenEncoder,
    detail: DetailBranch,
    qbank: SemanticQueryBank,
    bank: MemoryBank,
    gate: GateClassifier,
    decoder: DecoderHead,
    stage: Stage,
    step: usize,
    details_active: bool,
    history: LossHistory,
    telemetry: Telemetry,
    routing_trace: Vec<usize>,
    train_router: StreamRng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate().map_err(|e| AtmError::contract(e.to_string()))?;
        let d = config.dims;
        let streams = SeedStreams::new(config.seed);
        let encoder = FrozenEncoder::random(d.d, d.c, &mut streams.stream("init.encoder"));
        let detail = DetailBranch::random(d.d, d.c, d.v, &mut streams.stream("init.detail"))?;
        let qbank = SemanticQueryBank::random(d.l, d.c, &mut streams.stream("init.queries"));
        let bank = MemoryBank::random(d.n, d.m, d.c, config.alpha, &mut streams.stream("init.memory"))?;
        let gate = GateClassifier::random(d.c, d.h, d.n, &mut streams.stream("init.gate"));
        let decoder = DecoderHead::random(d.c, d.h_dec, d.d_out, &mut streams.stream("init.decoder"));
        Ok(Self {
            config: config.clone(),
            variant: Variant::from(config.arm),
            streams,
            encoder,
            detail,
            qbank,
            bank,
            gate,
            decoder,
            stage: Stage::GatePretrain,
            step: 0,
            details_active: false,
            history: LossHistory::default(),
            telemetry: Telemetry::default(),
            routing_trace: Vec::new(),
            train_router: streams.stream("ablation.train"),
        })
    }

    /// Reassembles a trained state (from a checkpoint).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: TrainConfig,
        encoder: FrozenEncoder,
        detail: DetailBranch,
        qbank: SemanticQueryBank,
        bank: MemoryBank,
        gate: GateClassifier,
        decoder: DecoderHead,
        stage: Stage,
        step: usize,
        details_active: bool,
    ) -> Self {
        let streams = SeedStreams::new(config.seed);
        Self {
            variant: Variant::from(config.arm),
            train_router: streams.stream("ablation.train"),
            config,
            streams,
            encoder,
            detail,
            qbank,
            bank,
            gate,
            decoder,
            stage,
            step,
            details_active,
            history: LossHistory::default(),
            telemetry: Telemetry::default(),
            routing_trace: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn details_active(&self) -> bool {
        self.details_active
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    pub fn detail_branch(&self) -> &DetailBranch {
        &self.detail
    }

    pub fn queries(&self) -> &SemanticQueryBank {
        &self.qbank
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn gate(&self) -> &GateClassifier {
        &self.gate
    }

    pub fn decoder(&self) -> &DecoderHead {
        &self.decoder
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    /// Memory items chosen for each training sample of stages 2-3, in order.
    pub fn routing_trace(&self) -> &[usize] {
        &self.routing_trace
    }

    /// FNV-1a hash over the bit patterns of a parameter group.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mats: Vec<&Matrix> = match group {
            ParamGroup::Gate => self.gate.params().to_vec(),
            ParamGroup::Queries => vec![&self.qbank.q0],
            ParamGroup::Memory => self.bank.items().iter().collect(),
            ParamGroup::Decoder => self.decoder.params().to_vec(),
            ParamGroup::Encoder => self.encoder.weights().to_vec(),
            ParamGroup::Detail => vec![self.detail.weights()],
        };
        let mut bytes = Vec::new();
        for m in mats {
            bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    fn fingerprints(&self) -> [u64; 6] {
        ParamGroup::ALL.map(|g| self.fingerprint(g))
    }

    fn check_freeze(&self, stage: Stage, before: [u64; 6]) -> Result<()> {
        for (g, (a, b)) in ParamGroup::ALL.iter().zip(before.iter().zip(self.fingerprints())) {
            if !g.trainable_in(stage) && *a != b {
                return Err(AtmError::contract(format!(
                    "{g:?} parameters changed during stage {}",
                    stage.number()
                )));
            }
        }
        Ok(())
    }

    fn expect_stage(&self, op: &'static str, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(AtmError::Sequencing {
                op,
                expected: expected.label(),
                found: self.stage.label(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &[SynthSample]) -> Result<()> {
        let d = self.config.dims;
        if data.is_empty() {
            return Err(AtmError::contract("training data is empty"));
        }
        for s in data {
            if s.x.shape() != (1, d.d) {
                return Err(AtmError::dim("training sample", s.x.shape(), (1, d.d)));
            }
            if s.target.shape() != (1, d.d_out) {
                return Err(AtmError::dim("training target", s.target.shape(), (1, d.d_out)));
            }
            if s.task >= d.n {
                return Err(AtmError::Routing {
                    index: s.task,
                    count: d.n,
                });
            }
        }
        Ok(())
    }

    /// Stage 1: cross-entropy training of the gate on pooled encoded
    /// queries. Nothing else changes.
    pub fn stage1_train(&mut self, data: &[SynthSample]) -> Result<()> {
        self.expect_stage("stage1_train", Stage::GatePretrain)?;
        let before = self.fingerprints();
        if self.config.stage1_steps > 0 {
            self.check_data(data)?;
        }

        let lr = self.config.lr_early;
        let pooled: Vec<Matrix> = data
            .iter()
            .map(|s| self.encoder.encode(&self.qbank, &s.x)?.mean_pool_rows())
            .collect::<Result<_>>()?;
        let mut optim: Vec<AdamState> = self.gate.params().iter().map(|p| AdamState::for_param(p)).collect();
        let mut batches = self.streams.stream("batch.stage1");

        for step in 0..self.config.stage1_steps {
            let idx = draw_batch(&mut batches, data.len(), self.config.batch_size);
            let rows: Vec<&Matrix> = idx.iter().map(|&i| &pooled[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].task).collect();

            let mut tape = Tape::new();
            let input = tape.constant(Matrix::concat_rows(&rows)?);
            let nodes = self.gate.register(&mut tape, true);
            let logits = nodes.logits(&mut tape, input)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(AtmError::NonFinite { stage: 1, step, value });
            }
            let mut grads = tape.backward(loss)?;
            for ((param, state), id) in self
                .gate
                .params_mut()
                .into_iter()
                .zip(optim.iter_mut())
                .zip([nodes.w1, nodes.b1, nodes.w2, nodes.b2])
            {
                if let Some(g) = grads.take(id) {
                    state.apply(param, &g, lr)?;
                }
            }
            self.history.stage1.push(value);
            self.telemetry.stage_lr[0] = Some(lr);
            self.telemetry.optimizer_steps[0] += 1;
            self.step += 1;
        }

        self.check_freeze(Stage::GatePretrain, before)?;
        self.stage = Stage::Semantic;
        Ok(())
    }

    /// Stage 2: queries, memory and decoder trained on retrieved queries
    /// alone, at `lr_early`.
    pub fn stage2_train(&mut self, data: &[SynthSample]) -> Result<()> {
        self.expect_stage("stage2_train", Stage::Semantic)?;
        self.train_generation(Stage::Semantic, data)?;
        self.stage = Stage::Joint;
        Ok(())
    }

    /// Stage 3: as stage 2 with detail tokens appended, at `lr_late`. Ends
    /// training and freezes the memory bank.
    pub fn stage3_train(&mut self, data: &[SynthSample]) -> Result<()> {
        self.expect_stage("stage3_train", Stage::Joint)?;
        self.details_active = self.variant.use_details;
        self.train_generation(Stage::Joint, data)?;
        self.stage = Stage::Done;
        self.bank.set_frozen(true);
        Ok(())
    }

    /// Runs all three stages on `data`.
    pub fn train_all(&mut self, data: &[SynthSample]) -> Result<()> {
        self.stage1_train(data)?;
        self.stage2_train(data)?;
        self.stage3_train(data)
    }

    fn train_generation(&mut self, stage: Stage, data: &[SynthSample]) -> Result<()> {
        let (steps, lr, slot, name) = match stage {
            Stage::Semantic => (self.config.stage2_steps, self.config.lr_early, 1usize, "batch.stage2"),
            Stage::Joint => (self.config.stage3_steps, self.config.lr_late, 2usize, "batch.stage3"),
            _ => unreachable!("generation training runs in stages 2 and 3"),
        };
        let before = self.fingerprints();
        if steps > 0 {
            self.check_data(data)?;
        }

        let n = self.config.dims.n;
        let mut q_state = AdamState::for_param(&self.qbank.q0);
        let mut mem_states: Vec<AdamState> = self.bank.items().iter().map(AdamState::for_param).collect();
        let mut dec_states: Vec<AdamState> = self.decoder.params().iter().map(|p| AdamState::for_param(p)).collect();
        let mut batches = self.streams.stream(name);
        let with_details = stage == Stage::Joint && self.variant.use_details;

        for step in 0..steps {
            let idx = draw_batch(&mut batches, data.len(), self.config.batch_size);

            let mut tape = Tape::new();
            let q0 = if self.variant.train_queries {
                tape.leaf(self.qbank.q0.clone())
            } else {
                tape.constant(self.qbank.q0.clone())
            };
            let query_term = self.encoder.query_term_on_tape(&mut tape, q0)?;
            let mut memory: Vec<Option<(NodeId, NodeId)>> = vec![None; n];
            // (task, queries node, weights node) per routed sample
            let mut writes: Vec<(usize, NodeId, NodeId)> = Vec::with_capacity(idx.len());
            let mut pooled = Vec::with_capacity(idx.len());

            for &i in &idx {
                let sample = &data[i];
                let queries = self.encoder.encode_on_tape(&mut tape, query_term, &sample.x)?;
                let mut cond = queries;
                if self.variant.use_memory {
                    let task = match self.variant.routing {
                        Routing::Adaptive => sample.task,
                        Routing::Random => self.train_router.gen_range(0..n),
                    };
                    self.routing_trace.push(task);
                    let (m, mt) = match memory[task] {
                        Some(pair) => pair,
                        None => {
                            let m = tape.leaf(self.bank.item(task)?.clone());
                            let mt = tape.transpose(m);
                            memory[task] = Some((m, mt));
                            (m, mt)
                        }
                    };
                    let (retrieved, weights) = retrieve_on_tape(&mut tape, queries, m, mt)?;
                    writes.push((task, queries, weights));
                    cond = retrieved;
                }
                if with_details {
                    let details = tape.constant(self.detail.detail_tokens(&sample.x)?);
                    cond = tape.concat_rows(&[cond, details])?;
                }
                pooled.push(tape.mean_pool_rows(cond)?);
            }

            let inputs = tape.concat_rows(&pooled)?;
            let dec = self.decoder.register(&mut tape);
            let prediction = dec.forward(&mut tape, inputs)?;
            let targets: Vec<&Matrix> = idx.iter().map(|&i| &data[i].target).collect();
            let targets = tape.constant(Matrix::concat_rows(&targets)?);
            let loss = tape.mse(prediction, targets)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(AtmError::NonFinite {
                    stage: stage.number(),
                    step,
                    value,
                });
            }
            let mut grads = tape.backward(loss)?;

            if let Some(g) = grads.take(q0) {
                q_state.apply(&mut self.qbank.q0, &g, lr)?;
            }
            for (task, slot_nodes) in memory.iter().enumerate() {
                if let Some((m, _)) = slot_nodes {
                    if let Some(g) = grads.take(*m) {
                        mem_states[task].apply(self.bank.item_mut(task)?, &g, lr)?;
                    }
                }
            }
            for ((param, state), id) in self
                .decoder
                .params_mut()
                .into_iter()
                .zip(dec_states.iter_mut())
                .zip(dec.ids())
            {
                if let Some(g) = grads.take(id) {
                    state.apply(param, &g, lr)?;
                }
            }

            // EMA write per routed item, with this step's forward-pass Q and W.
            for task in 0..n {
                let routed: Vec<&(usize, NodeId, NodeId)> = writes.iter().filter(|w| w.0 == task).collect();
                if routed.is_empty() {
                    continue;
                }
                let qs: Vec<&Matrix> = routed.iter().map(|w| tape.value(w.1)).collect();
                let ws: Vec<&Matrix> = routed.iter().map(|w| tape.value(w.2)).collect();
                self.bank
                    .update(task, &Matrix::concat_rows(&qs)?, &Matrix::concat_rows(&ws)?)?;
            }

            match stage {
                Stage::Semantic => self.history.stage2.push(value),
                _ => self.history.stage3.push(value),
            }
            self.telemetry.stage_lr[slot] = Some(lr);
            self.telemetry.optimizer_steps[slot] += 1;
            self.step += 1;
        }

        self.check_freeze(stage, before)
    }

    /// Encodes one condition and routes it: the given task, or the gate's
    /// prediction.
    pub fn condition_pass(&self, x: &Matrix, task: Option<usize>) -> Result<ConditionPass> {
        let queries = self.encoder.encode(&self.qbank, x)?;
        let task = match task {
            Some(t) => t,
            None => self.gate.predict(&queries)?.0,
        };
        let retrieved = if self.variant.use_memory {
            self.bank.retrieve(task, &queries)?.retrieved
        } else {
            if task >= self.config.dims.n {
                return Err(AtmError::Routing {
                    index: task,
                    count: self.config.dims.n,
                });
            }
            queries.clone()
        };
        let details = if self.details_active {
            Some(self.detail.detail_tokens(x)?)
        } else {
            None
        };
        Ok(ConditionPass {
            task,
            queries,
            retrieved,
            details,
        })
    }

    /// Decoder output for one condition at the current point of training.
    pub fn predict(&self, x: &Matrix, task: Option<usize>) -> Result<Matrix> {
        let pass = self.condition_pass(x, task)?;
        let assembled = assemble(&pass.retrieved, pass.details.as_ref())?;
        self.decoder.forward(&assembled.mean_pool_rows()?)
    }

    fn expect_trained(&self, op: &'static str) -> Result<()> {
        self.expect_stage(op, Stage::Done)?;
        if !self.bank.is_frozen() {
            return Err(AtmError::contract("memory bank must be frozen for inference"));
        }
        Ok(())
    }

    /// Inference with the frozen bank; the gate routes unless a task label
    /// is supplied.
    pub fn infer(&self, x: &Matrix, task_label: Option<usize>) -> Result<Matrix> {
        self.expect_trained("infer")?;
        self.predict(x, task_label)
    }

    /// The assembled decoder input rows for several conditions: every
    /// condition's retrieved rows in order, then every condition's detail
    /// tokens in the same order.
    pub fn composed_input(&self, conditions: &[(Matrix, usize)]) -> Result<Matrix> {
        if conditions.len() < 2 {
            return Err(AtmError::contract(format!(
                "composition needs at least two conditions, got {}",
                conditions.len()
            )));
        }
        let passes: Vec<ConditionPass> = conditions
            .iter()
            .map(|(x, t)| self.condition_pass(x, Some(*t)))
            .collect::<Result<_>>()?;
        let retrieved: Vec<&Matrix> = passes.iter().map(|p| &p.retrieved).collect();
        let composed = Matrix::concat_rows(&retrieved)?;
        let details: Vec<&Matrix> = passes.iter().filter_map(|p| p.details.as_ref()).collect();
        if details.is_empty() {
            assemble(&composed, None)
        } else {
            assemble(&composed, Some(&Matrix::concat_rows(&details)?))
        }
    }

    /// Decoder output for several conditions at the current point of
    /// training (see [`TrainState::composed_input`]).
    pub fn predict_composed(&self, conditions: &[(Matrix, usize)]) -> Result<Matrix> {
        let assembled = self.composed_input(conditions)?;
        self.decoder.forward(&assembled.mean_pool_rows()?)
    }

    /// Multi-condition inference: retrieve per condition from its task's
    /// memory, concatenate along the sequence axis, pool, decode.
    pub fn infer_composed(&self, conditions: &[(Matrix, usize)]) -> Result<Matrix> {
        self.expect_trained("infer_composed")?;
        self.predict_composed(conditions)
    }
}

/// Indices drawn uniformly with replacement.
fn draw_batch<R: Rng>(rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::train_eval_split;

    fn small_config() -> TrainConfig {
        TrainConfig {
            stage1_steps: 20,
            stage2_steps: 20,
            stage3_steps: 20,
            train_samples: 60,
            eval_samples: 30,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stages_enforce_order() {
        let cfg = small_config();
        let (_, train, _) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        assert!(matches!(s.stage2_train(&train), Err(AtmError::Sequencing { .. })));
        assert!(matches!(s.stage3_train(&train), Err(AtmError::Sequencing { .. })));
        assert!(matches!(s.infer(&train[0].x, None), Err(AtmError::Sequencing { .. })));
        s.stage1_train(&train).unwrap();
        assert!(matches!(s.stage1_train(&train), Err(AtmError::Sequencing { .. })));
        s.stage2_train(&train).unwrap();
        s.stage3_train(&train).unwrap();
        assert_eq!(s.stage(), Stage::Done);
        assert!(s.bank().is_frozen());
    }

    #[test]
    fn zero_step_stage1_only_advances() {
        let cfg = TrainConfig {
            stage1_steps: 0,
            ..small_config()
        };
        let (_, train, _) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        let gate = s.gate().clone();
        s.stage1_train(&train).unwrap();
        assert_eq!(s.gate(), &gate);
        assert_eq!(s.stage(), Stage::Semantic);
        assert!(s.history().stage1.is_empty());
    }

    #[test]
    fn freeze_matrix_holds_per_stage() {
        let cfg = small_config();
        let (_, train, _) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        let snap = |s: &TrainState| {
            (
                s.gate().clone(),
                s.queries().clone(),
                s.bank().items().to_vec(),
                s.decoder().clone(),
                s.encoder().clone(),
                s.detail_branch().clone(),
            )
        };

        let a = snap(&s);
        s.stage1_train(&train).unwrap();
        let b = snap(&s);
        assert_ne!(a.0, b.0, "gate trains in stage 1");
        assert!(a.1.q0.bits_eq(&b.1.q0));
        assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.bits_eq(y)));
        assert_eq!(a.3, b.3);
        assert_eq!(a.4, b.4);
        assert_eq!(a.5, b.5);

        s.stage2_train(&train).unwrap();
        let c = snap(&s);
        assert_eq!(b.0, c.0, "gate frozen in stage 2");
        assert_ne!(b.1, c.1);
        assert_ne!(b.2, c.2);
        assert_ne!(b.3, c.3);
        assert_eq!(b.4, c.4);
        assert_eq!(b.5, c.5);
        assert_eq!(s.history().stage2.len(), cfg.stage2_steps);
        assert_eq!(s.telemetry().stage_lr[1], Some(cfg.lr_early));

        s.stage3_train(&train).unwrap();
        let d = snap(&s);
        assert_eq!(c.0, d.0);
        assert_ne!(c.3, d.3);
        assert_eq!(c.4, d.4);
        assert_eq!(c.5, d.5, "detail branch frozen in stage 3");
        assert_eq!(s.telemetry().stage_lr[2], Some(cfg.lr_late));
    }

    #[test]
    fn no_queries_arm_keeps_q0_fixed() {
        let cfg = TrainConfig {
            arm: Arm::NoQueries,
            ..small_config()
        };
        let (_, train, _) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        let q0 = s.queries().q0.clone();
        s.train_all(&train).unwrap();
        assert!(s.queries().q0.bits_eq(&q0));
    }

    #[test]
    fn random_routing_follows_the_ablation_stream() {
        let cfg = TrainConfig {
            arm: Arm::NoGate,
            ..small_config()
        };
        let (_, train, _) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        s.train_all(&train).unwrap();
        let mut rng = SeedStreams::new(cfg.seed).stream("ablation.train");
        let expected: Vec<usize> = (0..s.routing_trace().len())
            .map(|_| rng.gen_range(0..cfg.dims.n))
            .collect();
        assert_eq!(s.routing_trace(), expected.as_slice());
        assert_eq!(
            s.routing_trace().len(),
            (cfg.stage2_steps + cfg.stage3_steps) * cfg.batch_size
        );
    }

    #[test]
    fn inference_is_deterministic_and_read_only() {
        let cfg = small_config();
        let (_, train, eval) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        s.train_all(&train).unwrap();
        let items = s.bank().items().to_vec();
        let x = &eval[0].x;
        let first = s.infer(x, None).unwrap();
        for _ in 0..1000 {
            assert!(s.infer(x, None).unwrap().bits_eq(&first));
        }
        assert!(s.bank().items().iter().zip(&items).all(|(a, b)| a.bits_eq(b)));
        assert!(s.infer(x, Some(7)).is_err());
    }

    #[test]
    fn composed_layout_and_order_symmetry() {
        let cfg = small_config();
        let (_, train, eval) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        s.train_all(&train).unwrap();
        let d = cfg.dims;
        let a = (eval[0].x.clone(), 0);
        let b = (eval[1].x.clone(), 1);
        let dup = s.composed_input(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(dup.rows(), 2 * d.l + 2 * d.v);
        let ab = s
            .composed_input(&[a.clone(), b.clone()])
            .unwrap()
            .mean_pool_rows()
            .unwrap();
        let ba = s
            .composed_input(&[b.clone(), a.clone()])
            .unwrap()
            .mean_pool_rows()
            .unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-12);
        assert!(matches!(s.infer_composed(&[]), Err(AtmError::Contract(_))));
        assert!(s.infer_composed(&[a, b]).is_ok());
    }

    #[test]
    fn gate_routed_matches_teacher_forced_when_gate_is_right() {
        let cfg = TrainConfig {
            stage1_steps: 150,
            ..small_config()
        };
        let (_, train, eval) = train_eval_split(&cfg).unwrap();
        let mut s = TrainState::new(&cfg).unwrap();
        s.train_all(&train).unwrap();
        let confident = eval
            .iter()
            .find(|e| {
                let q = s.encoder().encode(s.queries(), &e.x).unwrap();
                let (task, probs) = s.gate().predict(&q).unwrap();
                task == e.task && probs.get(0, task) > 0.99
            })
            .expect("some held-out sample is classified confidently");
        let routed = s.infer(&confident.x, None).unwrap();
        let forced = s.infer(&confident.x, Some(confident.task)).unwrap();
        assert!(routed.bits_eq(&forced));
    }
}
