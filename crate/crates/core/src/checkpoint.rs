//! Binary checkpoint: encoder layers, then activation and epoch, then the
//! classifier pairs, then both memory banks. All integers are little-endian
//! `u64` unless noted; all reals are `f64`.
//!
//! ```text
//! "CODC" | version:u8 | layers:u64 | { rows cols | W (row-major) | b }*
//! | activation:u8 | epoch:u64
//! | runs:u64 | { k L | W_A | W_B }*
//! | { domain:u8 | momentum | N L | { id | row }* } × 2
//! ```

use std::path::Path;

use crate::dataset::Domain;
use crate::encoder::{Activation, Encoder, Layer};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::Matrix;
use crate::objective::ClassifierPair;
use crate::trainer::TrainState;

const MAGIC: &[u8; 4] = b"CODC";
const VERSION: u8 = 1;

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    let u64_ = |out: &mut Vec<u8>, x: u64| out.extend_from_slice(&x.to_le_bytes());
    let f64s = |out: &mut Vec<u8>, xs: &[f64]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let layers = state.encoder.layers();
    u64_(&mut out, layers.len() as u64);
    for l in layers {
        u64_(&mut out, l.weight.rows() as u64);
        u64_(&mut out, l.weight.cols() as u64);
        f64s(&mut out, l.weight.as_slice());
        f64s(&mut out, &l.bias);
    }
    out.push(state.encoder.activation().tag());
    u64_(&mut out, state.epoch as u64);
    u64_(&mut out, state.classifiers.len() as u64);
    for p in &state.classifiers {
        u64_(&mut out, p.k() as u64);
        u64_(&mut out, p.dim() as u64);
        f64s(&mut out, p.w_a.as_slice());
        f64s(&mut out, p.w_b.as_slice());
    }
    for bank in [&state.bank_a, &state.bank_b] {
        out.push(bank.domain().as_u8());
        f64s(&mut out, &[bank.momentum()]);
        u64_(&mut out, bank.len() as u64);
        u64_(&mut out, bank.dim() as u64);
        for (id, row) in bank.ids().iter().zip(bank.rows().row_iter()) {
            u64_(&mut out, *id);
            f64s(&mut out, row);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.name.to_string(),
            line: self.pos,
            message: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a count that must fit in what remains of the buffer.
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_bytes.max(1) as u64) > remaining {
            return Err(self.err(format!("count {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.f64s(rows.checked_mul(cols).ok_or_else(|| self.err("size overflow"))?)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err(e.to_string()))
    }
}

pub fn decode(bytes: &[u8], name: &str) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0, name };
    if r.take(4)? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n_layers = r.count(16)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.count(8)?;
        let cols = r.count(8)?;
        let weight = r.matrix(rows, cols)?;
        let bias = r.f64s(rows)?;
        layers.push(Layer { weight, bias });
    }
    let tag = r.u8()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| r.err(format!("unknown activation tag {tag}")))?;
    let encoder = Encoder::from_layers(layers, activation).map_err(|e| r.err(e.to_string()))?;
    let epoch = r.u64()? as usize;

    let n_runs = r.count(16)?;
    let mut classifiers = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let k = r.count(8)?;
        let l = r.count(8)?;
        if l != encoder.output_dim() {
            return Err(r.err(format!("classifier width {l} != encoder output {}", encoder.output_dim())));
        }
        let w_a = r.matrix(k, l)?;
        let w_b = r.matrix(k, l)?;
        classifiers.push(ClassifierPair::new(w_a, w_b).map_err(|e| r.err(e.to_string()))?);
    }

    let mut banks = Vec::with_capacity(2);
    for expected in [Domain::A, Domain::B] {
        let domain = Domain::from_u8(r.u8()?).filter(|d| *d == expected).ok_or_else(|| r.err("bad bank domain"))?;
        let momentum = r.f64s(1)?[0];
        let n = r.count(8)?;
        let l = r.count(8)?;
        let mut ids = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n * l);
        for _ in 0..n {
            ids.push(r.u64()?);
            rows.extend(r.f64s(l)?);
        }
        let slots = Matrix::from_vec(n, l, rows).map_err(|e| r.err(e.to_string()))?;
        banks.push(MemoryBank::from_rows(domain, ids, slots, momentum).map_err(|e| r.err(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let bank_b = banks.pop().unwrap();
    let bank_a = banks.pop().unwrap();
    Ok(TrainState {
        encoder,
        classifiers,
        bank_a,
        bank_b,
        epoch,
    })
}

pub fn save(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode(state))
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
