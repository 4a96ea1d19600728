//! Piggyback filter factorization.
//!
//! Each shared generator layer of task `n` is the channel concatenation of a
//! freely learned (unconstrained) block and piggyback filters, the latter being
//! linear combinations of the frozen filter bank:
//!
//! ```text
//! F_n = [ F_n^u , R^-1( R([F_1^u, .., F_{n-1}^u]) @ W_n ) ]
//! ```
//!
//! `R` flattens `(kw, kh, c_in, c_out)` into a `(kw*kh*c_in, c_out)` matrix.
//! Because the output-channel axis is stored last, `R` never moves data.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::run::{LayerParams, Mode, RunState};
use crate::tensor::Tensor;

/// A rank-4 `(kw, kh, c_in, c_out)` filter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterTensor(Tensor);

impl FilterTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!("filters need 4 axes, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn kw(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn kh(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn fan(&self) -> usize {
        self.kw() * self.kh() * self.c_in()
    }

    pub fn bit_eq(&self, other: &FilterTensor) -> bool {
        self.0.bit_eq(&other.0)
    }
}

/// `R`: column `j` of the result is filter `j` flattened row-major.
pub fn reshape_r(f: &FilterTensor) -> Tensor {
    f.0.reshape(&[f.fan(), f.c_out()]).expect("element count preserved")
}

/// `R^-1` for a `(kw*kh*c_in, c_out)` matrix.
pub fn reshape_r_inv(m: &Tensor, kw: usize, kh: usize, c_in: usize) -> Result<FilterTensor> {
    let s = m.shape();
    if s.len() != 2 || s[0] != kw * kh * c_in {
        return Err(Error::shape(format!("{s:?} is not a ({kw}*{kh}*{c_in}, c_out) matrix")));
    }
    FilterTensor::new(m.reshape(&[kw, kh, c_in, s[1]])?)
}

/// Fraction of each layer's output channels that are learned freely, kept as
/// an exact rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Lambda {
    num: u32,
    den: u32,
}

impl Lambda {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::InvalidLambda { num: num as u64, den: den as u64 });
        }
        Ok(Self { num, den })
    }

    pub const ZERO: Lambda = Lambda { num: 0, den: 1 };
    pub const ONE: Lambda = Lambda { num: 1, den: 1 };

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("lambda {s:?} is not of the form N/D"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num: u64 = n.parse().map_err(|_| bad())?;
        let den: u64 = d.parse().map_err(|_| bad())?;
        if den == 0 || num > den || den > u32::MAX as u64 {
            return Err(Error::InvalidLambda { num, den });
        }
        Lambda::new(num as u32, den as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    pub lambda: Lambda,
    pub n_u: usize,
    pub n_p: usize,
}

/// Splits `c_out` channels into unconstrained and piggyback parts.
///
/// `n_u = round(λ c_out)` with ties rounded up, clamped to `[1, c_out - 1]`
/// when `0 < λ < 1` and the layer has at least two channels.
pub fn partition_channels(c_out: usize, lambda: Lambda) -> Result<Partition> {
    if c_out == 0 {
        return Err(Error::InvalidArgument("c_out must be at least 1".into()));
    }
    let (num, den) = (lambda.num as u128, lambda.den as u128);
    let mut n_u = ((2 * num * c_out as u128 + den) / (2 * den)) as usize;
    if !lambda.is_zero() && !lambda.is_one() && c_out >= 2 {
        n_u = n_u.clamp(1, c_out - 1);
    }
    Ok(Partition { lambda, n_u, n_p: c_out - n_u })
}

/// One frozen block of the bank, contributed by a finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct BankBlock {
    pub task_index: usize,
    pub filters: FilterTensor,
}

/// Frozen, growing collection of unconstrained filters for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub layer_index: usize,
    pub kw: usize,
    pub kh: usize,
    pub c_in: usize,
    blocks: Vec<BankBlock>,
}

impl FilterBank {
    pub fn empty(layer_index: usize, kw: usize, kh: usize, c_in: usize) -> Self {
        Self { layer_index, kw, kh, c_in, blocks: Vec::new() }
    }

    pub fn blocks(&self) -> &[BankBlock] {
        &self.blocks
    }

    /// Total output-channel count across blocks.
    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.filters.c_out()).sum()
    }

    pub fn fan(&self) -> usize {
        self.kw * self.kh * self.c_in
    }

    /// `R` of the first `width` bank filters, as a `(kw*kh*c_in, width)` matrix.
    pub fn prefix_matrix(&self, width: usize) -> Result<Tensor> {
        let have = self.width();
        if width > have {
            return Err(Error::BankTooNarrow { have, need: width });
        }
        if width == 0 {
            return Err(Error::shape("empty bank prefix"));
        }
        let rows = self.fan();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let mut taken = 0;
            for b in &self.blocks {
                if taken == width {
                    break;
                }
                let c = b.filters.c_out();
                let take = c.min(width - taken);
                data.extend_from_slice(&b.filters.tensor().data()[r * c..r * c + take]);
                taken += take;
            }
        }
        Tensor::new(vec![rows, width], data)
    }

    /// Returns a new bank with `block` appended. Earlier blocks are shared
    /// unchanged.
    pub fn expand(&self, task_index: usize, block: FilterTensor) -> Result<FilterBank> {
        if [block.kw(), block.kh(), block.c_in()] != [self.kw, self.kh, self.c_in] {
            return Err(Error::shape(format!(
                "block {:?} does not fit bank ({}, {}, {})",
                block.shape(),
                self.kw,
                self.kh,
                self.c_in
            )));
        }
        if self.blocks.iter().any(|b| b.task_index == task_index) {
            return Err(Error::DuplicateBlock(task_index));
        }
        let mut next = self.clone();
        next.blocks.push(BankBlock { task_index, filters: block });
        Ok(next)
    }

    pub(crate) fn from_blocks(
        layer_index: usize,
        kw: usize,
        kh: usize,
        c_in: usize,
        blocks: Vec<BankBlock>,
    ) -> Result<Self> {
        let mut bank = Self::empty(layer_index, kw, kh, c_in);
        for b in blocks {
            bank = bank.expand(b.task_index, b.filters)?;
        }
        Ok(bank)
    }
}

/// `expand_bank` as a free function.
pub fn expand_bank(bank: &FilterBank, task_index: usize, block: FilterTensor) -> Result<FilterBank> {
    bank.expand(task_index, block)
}

/// Per-task trainables of one shared layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLayerParams {
    pub task_index: usize,
    /// `n_u` freely learned filters; absent when `n_u = 0`.
    pub unconstrained: Option<FilterTensor>,
    /// `(trained_bank_width, n_p)` mixing matrix; absent when `n_p = 0`.
    pub weight: Option<Tensor>,
    pub bias: Tensor,
    /// Bank prefix width this task was trained against.
    pub trained_bank_width: usize,
}

impl TaskLayerParams {
    pub fn n_u(&self) -> usize {
        self.unconstrained.as_ref().map_or(0, FilterTensor::c_out)
    }

    pub fn n_p(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::last_extent)
    }

    pub fn c_out(&self) -> usize {
        self.n_u() + self.n_p()
    }
}

/// Builds the composed filters on a graph. `bank` is the `R`-image of the bank
/// prefix and may be omitted when there is no piggyback part.
pub fn compose_in_graph(
    g: &mut Graph,
    dims: (usize, usize, usize),
    bank: Option<Var>,
    unconstrained: Option<Var>,
    weight: Option<Var>,
) -> Result<Var> {
    let (kw, kh, c_in) = dims;
    let mut parts = Vec::with_capacity(2);
    if let Some(u) = unconstrained {
        parts.push(u);
    }
    if let Some(w) = weight {
        let bank = bank.ok_or_else(|| Error::shape("piggyback weight without a bank"))?;
        let flat = g.matmul(bank, w)?;
        let n_p = g.value(flat).last_extent();
        parts.push(g.reshape(flat, &[kw, kh, c_in, n_p])?);
    }
    match parts.as_slice() {
        [] => Err(Error::shape("layer has neither unconstrained nor piggyback filters")),
        [only] => Ok(*only),
        _ => g.concat_last_axis(&parts),
    }
}

/// Resolves a task's filters for one layer against the bank prefix it trained on.
pub fn compose_filters(bank: &FilterBank, params: &TaskLayerParams) -> Result<FilterTensor> {
    if let Some(u) = &params.unconstrained {
        if [u.kw(), u.kh(), u.c_in()] != [bank.kw, bank.kh, bank.c_in] {
            return Err(Error::shape(format!(
                "unconstrained block {:?} does not match bank ({}, {}, {})",
                u.shape(),
                bank.kw,
                bank.kh,
                bank.c_in
            )));
        }
    }
    let mut g = Graph::new();
    let bank_var = match &params.weight {
        Some(w) => {
            if w.rank() != 2 || w.shape()[0] != params.trained_bank_width {
                return Err(Error::shape(format!(
                    "weight {:?} does not have {} rows",
                    w.shape(),
                    params.trained_bank_width
                )));
            }
            Some(g.constant(bank.prefix_matrix(params.trained_bank_width)?))
        }
        None => {
            if bank.width() < params.trained_bank_width {
                return Err(Error::BankTooNarrow {
                    have: bank.width(),
                    need: params.trained_bank_width,
                });
            }
            None
        }
    };
    let u = params.unconstrained.as_ref().map(|u| g.constant(u.tensor().clone()));
    let w = params.weight.as_ref().map(|w| g.constant(w.clone()));
    let out = compose_in_graph(&mut g, (bank.kw, bank.kh, bank.c_in), bank_var, u, w)?;
    FilterTensor::new(g.value(out).clone())
}

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Network {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    /// `F^u` of a factorized layer.
    Unconstrained,
    /// `W` of a factorized layer.
    PiggybackWeight,
    /// Filters of a full (unfactorized) layer.
    Filters,
    Bias,
}

/// Address of one parameter tensor inside a [`RunState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub task: usize,
    pub network: Network,
    pub layer: usize,
    pub slot: Slot,
}

/// Parameters optimized while training task `n`, which must be the latest
/// task. Nothing from the bank or from an earlier task is ever included.
pub fn trainable_set(run: &RunState, n: usize) -> Result<Vec<ParamRef>> {
    let current = run.tasks.len();
    if n != current || n == 0 {
        return Err(Error::NotCurrentTask { requested: n, current });
    }
    let task = run.task(n)?;
    let mut refs = Vec::new();
    let gen = |layer, slot| ParamRef { task: n, network: Network::Generator, layer, slot };
    for (idx, lp) in task.generator.iter().enumerate() {
        match lp {
            LayerParams::Factorized(p) => {
                if p.unconstrained.is_some() {
                    refs.push(gen(idx, Slot::Unconstrained));
                }
                if p.weight.is_some() {
                    refs.push(gen(idx, Slot::PiggybackWeight));
                }
                refs.push(gen(idx, Slot::Bias));
            }
            LayerParams::Full(_) => {
                refs.push(gen(idx, Slot::Filters));
                refs.push(gen(idx, Slot::Bias));
            }
            LayerParams::Superseded => {
                return Err(Error::shape(format!("current task {n} has superseded layer {idx}")))
            }
        }
    }
    for idx in 0..task.discriminator.len() {
        for slot in [Slot::Filters, Slot::Bias] {
            refs.push(ParamRef { task: n, network: Network::Discriminator, layer: idx, slot });
        }
    }
    Ok(refs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Parameters optimized while training the task (generator and
    /// discriminator).
    pub trainable: usize,
    /// Generator parameters that must be kept to serve tasks `1..=n`.
    pub stored_cumulative: usize,
}

/// Closed-form parameter accounting for task `n`.
///
/// `full` stores one independent model per task. `piggyback` banks every
/// task's unconstrained filters and stores `W` and biases per task.
/// `pure_factorization` is piggyback with λ = 0 against the task-1 bank.
pub fn param_count(spec: &ModelSpec, n: usize, lambda: Lambda, mode: Mode) -> Result<ParamCount> {
    if n == 0 {
        return Err(Error::InvalidArgument("task index starts at 1".into()));
    }
    let lambda = match mode {
        Mode::Full => Lambda::ONE,
        Mode::Piggyback => lambda,
        Mode::PureFactorization => Lambda::ZERO,
        Mode::SequentialFinetune => {
            return Err(Error::Unsupported("param_count has no sequential_finetune mode".into()))
        }
    };
    let disc = spec.discriminator_param_count();
    let mut trainable = disc;
    let mut stored = 0;
    for l in &spec.generator {
        let full = l.full_param_count();
        if l.task_specific || mode == Mode::Full {
            trainable += full;
            stored += n * full;
            continue;
        }
        let part = partition_channels(l.c_out, lambda)?;
        // Bank width before task t trains (t >= 2) is c_out + (t - 2) * n_u.
        let width_before = |t: usize| l.c_out + (t - 2) * part.n_u;
        trainable += if n == 1 {
            full
        } else {
            l.fan() * part.n_u + width_before(n) * part.n_p + l.c_out
        };
        stored += l.fan() * (l.c_out + (n - 1) * part.n_u) + l.c_out;
        stored += (2..=n).map(|t| width_before(t) * part.n_p + l.c_out).sum::<usize>();
    }
    Ok(ParamCount { trainable, stored_cumulative: stored })
}
