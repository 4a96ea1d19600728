//! Single-file binary checkpoint of a [`RunState`].
//!
//! Little-endian throughout. Every tensor record carries its rank and extents
//! followed by raw `f64` payload, so the file is self-describing. Wall-clock
//! times are not stored, which keeps re-serialization byte-identical.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, LayerSpec, ModelSpec, Norm};
use crate::piggyback::{BankBlock, FilterBank, FilterTensor, Lambda, TaskLayerParams};
use crate::run::{DataSource, FullLayer, LayerParams, Mode, RunState, TaskRecord};
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, TrainLog};

pub const MAGIC: &[u8; 4] = b"PBGK";
pub const FORMAT_VERSION: u32 = 1;

const TAG_FACTORIZED: u8 = 0;
const TAG_FULL: u8 = 1;
const TAG_SUPERSEDED: u8 = 2;

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u8(out, t.rank() as u8);
    for &e in t.shape() {
        put_u32(out, e);
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

fn put_opt_tensor(out: &mut Vec<u8>, t: Option<&Tensor>) {
    match t {
        Some(t) => {
            put_u8(out, 1);
            put_tensor(out, t);
        }
        None => put_u8(out, 0),
    }
}

fn put_layer_spec(out: &mut Vec<u8>, l: &LayerSpec) {
    put_u8(out, match l.kind {
        LayerKind::Conv => 0,
        LayerKind::Deconv => 1,
    });
    for v in [l.kw, l.kh, l.c_in, l.c_out, l.stride, l.pad] {
        put_u32(out, v);
    }
    put_u8(out, match l.activation {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::LeakyRelu => 2,
        Activation::Tanh => 3,
    });
    put_u8(out, match l.norm {
        Norm::None => 0,
        Norm::Instance => 1,
    });
    put_u8(out, l.task_specific as u8);
    match l.skip_from {
        Some(s) => {
            put_u8(out, 1);
            put_u32(out, s);
        }
        None => put_u8(out, 0),
    }
}

fn put_spec(out: &mut Vec<u8>, s: &ModelSpec) {
    put_u32(out, s.name.len());
    out.extend_from_slice(s.name.as_bytes());
    for v in [s.height, s.width, s.channels] {
        put_u32(out, v);
    }
    for layers in [&s.generator, &s.discriminator] {
        put_u32(out, layers.len());
        for l in layers {
            put_layer_spec(out, l);
        }
    }
}

fn put_full(out: &mut Vec<u8>, l: &FullLayer) {
    put_tensor(out, l.filters.tensor());
    put_tensor(out, &l.bias);
}

pub(crate) fn encode_bank(out: &mut Vec<u8>, bank: &FilterBank) {
    for v in [bank.layer_index, bank.kw, bank.kh, bank.c_in, bank.blocks().len()] {
        put_u32(out, v);
    }
    for b in bank.blocks() {
        put_u32(out, b.task_index);
        put_tensor(out, b.filters.tensor());
    }
}

pub(crate) fn encode_task(out: &mut Vec<u8>, t: &TaskRecord) {
    put_u32(out, t.index);
    put_u8(out, t.mode.code());
    put_u8(out, t.data.kind.code());
    put_u64(out, t.data.seed);
    put_u64(out, t.data.count as u64);
    put_u32(out, t.generator.len());
    for lp in &t.generator {
        match lp {
            LayerParams::Factorized(p) => {
                put_u8(out, TAG_FACTORIZED);
                put_u32(out, p.task_index);
                put_opt_tensor(out, p.unconstrained.as_ref().map(FilterTensor::tensor));
                put_opt_tensor(out, p.weight.as_ref());
                put_tensor(out, &p.bias);
                put_u32(out, p.trained_bank_width);
            }
            LayerParams::Full(l) => {
                put_u8(out, TAG_FULL);
                put_full(out, l);
            }
            LayerParams::Superseded => put_u8(out, TAG_SUPERSEDED),
        }
    }
    put_u32(out, t.discriminator.len());
    for l in &t.discriminator {
        put_full(out, l);
    }
    put_u64(out, t.log.seed);
    put_u32(out, t.log.epochs.len());
    for e in &t.log.epochs {
        put_f64(out, e.g_loss);
        put_f64(out, e.d_loss);
        put_f64(out, e.val_l1);
    }
}

pub fn encode(run: &RunState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, run.lambda.num() as usize);
    put_u32(&mut out, run.lambda.den() as usize);
    put_u64(&mut out, run.seed);
    put_spec(&mut out, &run.spec);
    put_u32(&mut out, run.banks.len());
    for b in &run.banks {
        encode_bank(&mut out, b);
    }
    put_u32(&mut out, run.tasks.len());
    for t in &run.tasks {
        encode_task(&mut out, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { offset, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(at, format!("{what}: flag byte {v}"))),
        }
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u8(what)? as usize;
        if !(1..=4).contains(&rank) {
            return Err(self.err(at, format!("{what}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.err(at, format!("{what}: extents {shape:?} exceed the file")))?;
        let raw = self.take(n * 8, what)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| self.err(at, format!("{what}: {e}")))
    }

    fn opt_tensor(&mut self, what: &str) -> Result<Option<Tensor>> {
        if self.flag(what)? {
            self.tensor(what).map(Some)
        } else {
            Ok(None)
        }
    }

    fn filters(&mut self, what: &str) -> Result<FilterTensor> {
        let at = self.pos;
        let t = self.tensor(what)?;
        FilterTensor::new(t).map_err(|e| self.err(at, format!("{what}: {e}")))
    }

    fn layer_spec(&mut self) -> Result<LayerSpec> {
        let at = self.pos;
        let kind = match self.u8("layer kind")? {
            0 => LayerKind::Conv,
            1 => LayerKind::Deconv,
            v => return Err(self.err(at, format!("layer kind {v}"))),
        };
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = self.u32("layer extents")?;
        }
        let at = self.pos;
        let activation = match self.u8("activation")? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Tanh,
            v => return Err(self.err(at, format!("activation {v}"))),
        };
        let at = self.pos;
        let norm = match self.u8("norm")? {
            0 => Norm::None,
            1 => Norm::Instance,
            v => return Err(self.err(at, format!("norm {v}"))),
        };
        let task_specific = self.flag("task_specific")?;
        let skip_from = if self.flag("skip flag")? { Some(self.u32("skip source")?) } else { None };
        let [kw, kh, c_in, c_out, stride, pad] = dims;
        Ok(LayerSpec { kind, kw, kh, c_in, c_out, stride, pad, activation, norm, task_specific, skip_from })
    }

    fn spec(&mut self) -> Result<ModelSpec> {
        let at = self.pos;
        let len = self.u32("spec name length")?;
        let name = std::str::from_utf8(self.take(len, "spec name")?)
            .map_err(|_| self.err(at, "spec name is not UTF-8"))?
            .to_string();
        let height = self.u32("height")?;
        let width = self.u32("width")?;
        let channels = self.u32("channels")?;
        let mut nets = [Vec::new(), Vec::new()];
        for net in &mut nets {
            let count = self.u32("layer count")?;
            for _ in 0..count {
                net.push(self.layer_spec()?);
            }
        }
        let [generator, discriminator] = nets;
        let spec = ModelSpec { name, height, width, channels, generator, discriminator };
        spec.validate().map_err(|e| self.err(at, format!("model spec: {e}")))?;
        Ok(spec)
    }

    fn bank(&mut self) -> Result<FilterBank> {
        let at = self.pos;
        let layer_index = self.u32("bank layer")?;
        let kw = self.u32("bank kw")?;
        let kh = self.u32("bank kh")?;
        let c_in = self.u32("bank c_in")?;
        let count = self.u32("bank block count")?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let task_index = self.u32("block task")?;
            blocks.push(BankBlock { task_index, filters: self.filters("bank block")? });
        }
        FilterBank::from_blocks(layer_index, kw, kh, c_in, blocks).map_err(|e| self.err(at, format!("bank: {e}")))
    }

    fn full(&mut self) -> Result<FullLayer> {
        Ok(FullLayer { filters: self.filters("filters")?, bias: self.tensor("bias")? })
    }

    fn task(&mut self) -> Result<TaskRecord> {
        let index = self.u32("task index")?;
        let at = self.pos;
        let mode = Mode::from_code(self.u8("mode")?).ok_or_else(|| self.err(at, "unknown mode"))?;
        let at = self.pos;
        let kind = TaskKind::from_code(self.u8("task kind")?).ok_or_else(|| self.err(at, "unknown task kind"))?;
        let seed = self.u64("data seed")?;
        let count = self.u64("data count")? as usize;
        let n_layers = self.u32("generator layer count")?;
        let mut generator = Vec::new();
        for _ in 0..n_layers {
            let at = self.pos;
            generator.push(match self.u8("layer tag")? {
                TAG_FACTORIZED => {
                    let task_index = self.u32("layer task")?;
                    let at_u = self.pos;
                    let unconstrained = self
                        .opt_tensor("unconstrained")?
                        .map(FilterTensor::new)
                        .transpose()
                        .map_err(|e| self.err(at_u, format!("unconstrained: {e}")))?;
                    let weight = self.opt_tensor("weight")?;
                    let bias = self.tensor("bias")?;
                    let trained_bank_width = self.u32("trained bank width")?;
                    LayerParams::Factorized(TaskLayerParams {
                        task_index,
                        unconstrained,
                        weight,
                        bias,
                        trained_bank_width,
                    })
                }
                TAG_FULL => LayerParams::Full(self.full()?),
                TAG_SUPERSEDED => LayerParams::Superseded,
                v => return Err(self.err(at, format!("layer tag {v}"))),
            });
        }
        let n_disc = self.u32("discriminator layer count")?;
        let mut discriminator = Vec::new();
        for _ in 0..n_disc {
            discriminator.push(self.full()?);
        }
        let log_seed = self.u64("log seed")?;
        let n_epochs = self.u32("epoch count")?;
        let mut epochs = Vec::new();
        for _ in 0..n_epochs {
            epochs.push(EpochRecord {
                g_loss: self.f64("g_loss")?,
                d_loss: self.f64("d_loss")?,
                val_l1: self.f64("val_l1")?,
            });
        }
        let log = TrainLog { epochs, ..TrainLog::empty(log_seed) };
        Ok(TaskRecord { index, mode, data: DataSource { kind, seed, count }, generator, discriminator, log })
    }
}

pub fn decode(bytes: &[u8]) -> Result<RunState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic (not a checkpoint)"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION as usize {
        return Err(r.err(4, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let at = r.pos;
    let num = r.u32("lambda numerator")? as u32;
    let den = r.u32("lambda denominator")? as u32;
    let lambda = Lambda::new(num, den).map_err(|e| r.err(at, e.to_string()))?;
    let seed = r.u64("seed")?;
    let spec = r.spec()?;
    let at = r.pos;
    let n_banks = r.u32("bank count")?;
    let mut banks = Vec::new();
    for _ in 0..n_banks {
        banks.push(r.bank()?);
    }
    let expected: Vec<usize> = spec.shared_layers().map(|(i, _)| i).collect();
    if banks.iter().map(|b| b.layer_index).collect::<Vec<_>>() != expected {
        return Err(r.err(at, "banks do not match the model's shared layers"));
    }
    let n_tasks = r.u32("task count")?;
    let mut tasks = Vec::new();
    for i in 0..n_tasks {
        let at = r.pos;
        let t = r.task()?;
        if t.index != i + 1 || t.generator.len() != spec.generator.len() || t.discriminator.len() != spec.discriminator.len()
        {
            return Err(r.err(at, format!("task record {} is inconsistent with the model", i + 1)));
        }
        tasks.push(t);
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RunState { lambda, seed, spec, banks, tasks })
}

pub fn load(path: &Path) -> Result<RunState> {
    decode(&fs::read(path)?)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`. With `interrupt_after = Some(k)` the write stops after `k` bytes
/// and fails before the rename, simulating a crash.
pub fn write_atomic(path: &Path, bytes: &[u8], interrupt_after: Option<usize>) -> Result<()> {
    let tmp = temp_path(path);
    let mut f = File::create(&tmp)?;
    if let Some(k) = interrupt_after {
        f.write_all(&bytes[..k.min(bytes.len())])?;
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::Interrupted, "write interrupted")));
    }
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(run: &RunState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(run), None)
}
