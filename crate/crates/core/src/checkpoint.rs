//! Binary snapshot of a [`TrainState`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "# atm-lab checkpoint v1.0\n"     version line (ASCII)
//! u32 len, len bytes                config text, as written by TrainConfig::to_text
//! u8  stage                         1..=4 (4 = training complete)
//! u8  flags                         bit 0: details active, bit 1: bank frozen
//! u64 step
//! u32 count                         number of matrices
//! count × { u16 len, name, u32 rows, u32 cols, rows·cols f64 }
//! u64 checksum                      FNV-1a of every preceding byte
//! ```
//!
//! Matrix names: `encoder.w_q`, `encoder.w_x`, `encoder.b`, `detail.w_v`,
//! `queries.q0`, `memory.<i>`, `gate.{w1,b1,w2,b2}`,
//! `decoder.{w1,b1,w2,b2}`. Loading checks the version, the checksum and
//! every shape against the embedded configuration.

use std::path::Path;

use crate::atm::{GateClassifier, MemoryBank};
use crate::conditioning::{DetailBranch, FrozenEncoder, SemanticQueryBank};
use crate::config::TrainConfig;
use crate::error::{AtmError, Result};
use crate::numerics::{rng::fnv1a, Matrix};
use crate::pipeline::{DecoderHead, Stage, TrainState};
use crate::report::{check_version_line, write_atomic};

pub const CHECKPOINT_MINOR: u32 = 0;

fn header_line() -> String {
    format!(
        "# atm-lab checkpoint v{}.{CHECKPOINT_MINOR}\n",
        crate::report::FORMAT_MAJOR
    )
}

fn named_matrices(state: &TrainState) -> Vec<(String, &Matrix)> {
    let [w_q, w_x, b] = state.encoder().weights();
    let mut out: Vec<(String, &Matrix)> = vec![
        ("encoder.w_q".into(), w_q),
        ("encoder.w_x".into(), w_x),
        ("encoder.b".into(), b),
        ("detail.w_v".into(), state.detail_branch().weights()),
        ("queries.q0".into(), &state.queries().q0),
    ];
    for (i, item) in state.bank().items().iter().enumerate() {
        out.push((format!("memory.{i}"), item));
    }
    let g = state.gate();
    let d = state.decoder();
    for (prefix, [w1, b1, w2, b2]) in [("gate", [&g.w1, &g.b1, &g.w2, &g.b2]), ("decoder", d.params())] {
        for (name, m) in [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)] {
            out.push((format!("{prefix}.{name}"), m));
        }
    }
    out
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut buf = header_line().into_bytes();
    let config = state.config().to_text();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.push(state.stage().number());
    let flags = u8::from(state.details_active()) | (u8::from(state.bank().is_frozen()) << 1);
    buf.push(flags);
    buf.extend_from_slice(&(state.step() as u64).to_le_bytes());
    let matrices = named_matrices(state);
    buf.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for (name, m) in matrices {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode(state))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| AtmError::io(path, e))?;
    decode(path, &bytes)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                AtmError::format(
                    self.path,
                    format!(
                        "truncated at byte {} while reading {what} ({} bytes total)",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |detail: String| AtmError::format(path, detail);

    let line_end = bytes.iter().take(128).position(|&b| b == b'\n').ok_or_else(|| {
        corrupt(format!(
            "not an atm-lab checkpoint (first bytes: {:?})",
            String::from_utf8_lossy(&bytes[..bytes.len().min(32)])
        ))
    })?;
    let line = std::str::from_utf8(&bytes[..line_end]).map_err(|_| corrupt("header is not text".into()))?;
    check_version_line(path, line, "checkpoint")?;

    if bytes.len() < line_end + 1 + 8 {
        return Err(corrupt(format!("truncated: only {} bytes", bytes.len())));
    }
    let (payload, stored) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(stored.try_into().expect("8 bytes"));
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(corrupt(format!(
            "checksum mismatch (stored {stored:016x}, computed {computed:016x}); the file is damaged or truncated"
        )));
    }

    let mut cur = Cursor {
        path,
        bytes: payload,
        pos: line_end + 1,
    };
    let config_len = cur.u32("config length")? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len, "config text")?)
        .map_err(|_| corrupt("embedded config is not UTF-8".into()))?;
    let config = TrainConfig::parse(config_text).map_err(|e| corrupt(format!("embedded config: {e}")))?;
    let stage = match cur.u8("stage")? {
        1 => Stage::GatePretrain,
        2 => Stage::Semantic,
        3 => Stage::Joint,
        4 => Stage::Done,
        s => return Err(corrupt(format!("unknown stage {s}"))),
    };
    let flags = cur.u8("flags")?;
    let step = cur.u64("step")? as usize;
    let count = cur.u32("matrix count")? as usize;

    // shapes come from a freshly initialised state of the same config
    let template = TrainState::new(&config).map_err(|e| corrupt(format!("embedded config: {e}")))?;
    let expected = named_matrices(&template);
    if count != expected.len() {
        return Err(corrupt(format!("expected {} matrices, found {count}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in expected.iter().map(|(n, m)| (n.clone(), m.shape())) {
        let len = cur.u16("matrix name")? as usize;
        let found = String::from_utf8_lossy(cur.take(len, "matrix name")?).into_owned();
        if found != name {
            return Err(corrupt(format!("expected matrix `{name}`, found `{found}`")));
        }
        let rows = cur.u32(&name)? as usize;
        let cols = cur.u32(&name)? as usize;
        if (rows, cols) != shape {
            return Err(corrupt(format!(
                "`{name}` is {rows}×{cols}, config implies {}×{}",
                shape.0, shape.1
            )));
        }
        let raw = cur.take(rows * cols * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        loaded.push(Matrix::new(rows, cols, data)?);
    }
    if cur.pos != payload.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after the last matrix",
            payload.len() - cur.pos
        )));
    }

    let n = config.dims.n;
    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("count checked");
    let encoder = FrozenEncoder::new(next(), next(), next())?;
    let detail = DetailBranch::new(next(), config.dims.v)?;
    let qbank = SemanticQueryBank::new(next());
    let items = (0..n).map(|_| next()).collect();
    let mut bank = MemoryBank::new(items, config.alpha)?;
    bank.set_frozen(flags & 2 != 0);
    let gate = GateClassifier {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
    };
    let decoder = DecoderHead {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
    };
    Ok(TrainState::from_parts(
        config,
        encoder,
        detail,
        qbank,
        bank,
        gate,
        decoder,
        stage,
        step,
        flags & 1 != 0,
    ))
}
