//! Run state: the filter banks plus every task's parameters.

use std::fmt;
use std::str::FromStr;

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::piggyback::{
    partition_channels, FilterBank, FilterTensor, Lambda, Network, ParamRef, Slot, TaskLayerParams,
};
use crate::rng::{rng_stream, Purpose, Role};
use crate::tensor::Tensor;
use crate::trainer::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Piggyback,
    Full,
    PureFactorization,
    SequentialFinetune,
}

impl Mode {
    pub const ALL: [Mode; 4] =
        [Mode::Piggyback, Mode::Full, Mode::PureFactorization, Mode::SequentialFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Piggyback => "piggyback",
            Mode::Full => "full",
            Mode::PureFactorization => "pure_factorization",
            Mode::SequentialFinetune => "sequential_finetune",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Mode::Piggyback => 0,
            Mode::Full => 1,
            Mode::PureFactorization => 2,
            Mode::SequentialFinetune => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piggyback" | "pb" => Ok(Mode::Piggyback),
            "full" => Ok(Mode::Full),
            "pure_factorization" | "pf" => Ok(Mode::PureFactorization),
            "sequential_finetune" | "sft" => Ok(Mode::SequentialFinetune),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullLayer {
    pub filters: FilterTensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// Shared layer composed from the bank.
    Factorized(TaskLayerParams),
    /// Unfactorized layer owned by this task.
    Full(FullLayer),
    /// Sequential fine-tuning only: this task's copy of a shared layer was
    /// handed on to a later task and is read from the latest task instead.
    Superseded,
}

/// Where a task's training data came from, enough to regenerate it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataSource {
    pub kind: TaskKind,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    /// 1-based.
    pub index: usize,
    pub mode: Mode,
    pub data: DataSource,
    pub generator: Vec<LayerParams>,
    pub discriminator: Vec<FullLayer>,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub lambda: Lambda,
    pub seed: u64,
    pub spec: ModelSpec,
    /// One bank per shared generator layer, in layer order.
    pub banks: Vec<FilterBank>,
    pub tasks: Vec<TaskRecord>,
}

/// He-style normal filters for `(task, layer)`, drawn from a stream keyed so
/// that the same tensor shape always receives the same values.
fn init_filters(seed: u64, net: Purpose, task: usize, layer: usize, shape: [usize; 4]) -> FilterTensor {
    let std = (2.0 / (shape[0] * shape[1] * shape[2]) as f64).sqrt();
    let n = shape.iter().product();
    let mut s = rng_stream(seed, net, &[task as u64, layer as u64, Role::Filters as u64]);
    let t = Tensor::new(shape.to_vec(), s.normals(n, std)).expect("finite draws");
    FilterTensor::new(t).expect("rank 4")
}

fn init_weight(seed: u64, task: usize, layer: usize, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let mut s = rng_stream(
        seed,
        Purpose::GeneratorInit,
        &[task as u64, layer as u64, Role::PiggybackWeight as u64],
    );
    Tensor::new(vec![rows, cols], s.normals(rows * cols, std)).expect("finite draws")
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).expect("positive extent")
}

impl RunState {
    pub fn new(spec: ModelSpec, lambda: Lambda, seed: u64) -> Result<Self> {
        spec.validate()?;
        let banks = spec
            .shared_layers()
            .map(|(idx, l)| FilterBank::empty(idx, l.kw, l.kh, l.c_in))
            .collect();
        Ok(Self { lambda, seed, spec, banks, tasks: Vec::new() })
    }

    pub fn task(&self, n: usize) -> Result<&TaskRecord> {
        n.checked_sub(1).and_then(|i| self.tasks.get(i)).ok_or(Error::MissingTask(n))
    }

    pub fn task_mut(&mut self, n: usize) -> Result<&mut TaskRecord> {
        n.checked_sub(1).and_then(|i| self.tasks.get_mut(i)).ok_or(Error::MissingTask(n))
    }

    pub fn bank(&self, layer: usize) -> Result<&FilterBank> {
        self.banks
            .iter()
            .find(|b| b.layer_index == layer)
            .ok_or_else(|| Error::shape(format!("layer {layer} has no filter bank")))
    }

    /// The mode every task so far was trained with.
    pub fn history_mode(&self) -> Option<Mode> {
        self.tasks.first().map(|t| t.mode)
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        match self.history_mode() {
            Some(prev) if prev != mode => Err(Error::IncompatibleMode {
                requested: mode.to_string(),
                history: format!("{} task(s) trained as {prev}", self.tasks.len()),
            }),
            _ => Ok(()),
        }
    }

    /// Appends task `n = tasks.len() + 1` with freshly initialized trainables
    /// and returns `n`.
    pub fn begin_task(&mut self, mode: Mode, data: DataSource) -> Result<usize> {
        self.check_mode(mode)?;
        let n = self.tasks.len() + 1;
        let seed = self.seed;
        let mut generator = Vec::with_capacity(self.spec.generator.len());
        for (idx, l) in self.spec.generator.iter().enumerate() {
            let shape = l.filter_shape();
            let fresh = || {
                LayerParams::Full(FullLayer {
                    filters: init_filters(seed, Purpose::GeneratorInit, n, idx, shape),
                    bias: zeros(l.c_out),
                })
            };
            let lp = match mode {
                Mode::Full => fresh(),
                Mode::SequentialFinetune if n == 1 => fresh(),
                Mode::SequentialFinetune => {
                    let prev = &mut self.tasks[n - 2].generator[idx];
                    if l.task_specific {
                        prev.clone()
                    } else {
                        std::mem::replace(prev, LayerParams::Superseded)
                    }
                }
                _ if l.task_specific => fresh(),
                Mode::Piggyback | Mode::PureFactorization => {
                    let width = self.bank(idx)?.width();
                    let (n_u, n_p) = if n == 1 {
                        (l.c_out, 0)
                    } else {
                        let lambda = if mode == Mode::PureFactorization { Lambda::ZERO } else { self.lambda };
                        let p = partition_channels(l.c_out, lambda)?;
                        (p.n_u, p.n_p)
                    };
                    if n_p > 0 && width == 0 {
                        return Err(Error::shape(format!("layer {idx}: empty bank for task {n}")));
                    }
                    let unconstrained = (n_u > 0).then(|| {
                        init_filters(seed, Purpose::GeneratorInit, n, idx, [l.kw, l.kh, l.c_in, n_u])
                    });
                    let weight = (n_p > 0).then(|| init_weight(seed, n, idx, width, n_p));
                    LayerParams::Factorized(TaskLayerParams {
                        task_index: n,
                        unconstrained,
                        weight,
                        bias: zeros(l.c_out),
                        trained_bank_width: if n_p > 0 { width } else { 0 },
                    })
                }
            };
            generator.push(lp);
        }
        let discriminator = self
            .spec
            .discriminator
            .iter()
            .enumerate()
            .map(|(idx, l)| FullLayer {
                filters: init_filters(seed, Purpose::DiscriminatorInit, n, idx, l.filter_shape()),
                bias: zeros(l.c_out),
            })
            .collect();
        self.tasks.push(TaskRecord {
            index: n,
            mode,
            data,
            generator,
            discriminator,
            log: TrainLog::empty(seed),
        });
        Ok(n)
    }

    /// Appends task `n`'s unconstrained blocks to the banks. Only the latest
    /// task can be finished, and only once.
    pub fn finish_task(&mut self, n: usize) -> Result<()> {
        if n != self.tasks.len() {
            return Err(Error::NotCurrentTask { requested: n, current: self.tasks.len() });
        }
        let task = &self.tasks[n - 1];
        if !matches!(task.mode, Mode::Piggyback | Mode::PureFactorization) {
            return Ok(());
        }
        let mut next = self.banks.clone();
        for bank in &mut next {
            if let LayerParams::Factorized(p) = &task.generator[bank.layer_index] {
                if let Some(u) = &p.unconstrained {
                    *bank = bank.expand(n, u.clone())?;
                }
            }
        }
        self.banks = next;
        Ok(())
    }

    pub fn param(&self, r: &ParamRef) -> Result<&Tensor> {
        let task = self.task(r.task)?;
        let missing = || Error::shape(format!("no parameter at {r:?}"));
        match r.network {
            Network::Discriminator => {
                let l = task.discriminator.get(r.layer).ok_or_else(missing)?;
                match r.slot {
                    Slot::Filters => Ok(l.filters.tensor()),
                    Slot::Bias => Ok(&l.bias),
                    _ => Err(missing()),
                }
            }
            Network::Generator => match (task.generator.get(r.layer).ok_or_else(missing)?, r.slot) {
                (LayerParams::Factorized(p), Slot::Unconstrained) => {
                    p.unconstrained.as_ref().map(FilterTensor::tensor).ok_or_else(missing)
                }
                (LayerParams::Factorized(p), Slot::PiggybackWeight) => p.weight.as_ref().ok_or_else(missing),
                (LayerParams::Factorized(p), Slot::Bias) => Ok(&p.bias),
                (LayerParams::Full(l), Slot::Filters) => Ok(l.filters.tensor()),
                (LayerParams::Full(l), Slot::Bias) => Ok(&l.bias),
                _ => Err(missing()),
            },
        }
    }

    pub fn set_param(&mut self, r: &ParamRef, value: Tensor) -> Result<()> {
        let current = self.param(r)?;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!("{r:?}: {:?} vs {:?}", current.shape(), value.shape())));
        }
        let task = self.task_mut(r.task)?;
        match r.network {
            Network::Discriminator => {
                let l = &mut task.discriminator[r.layer];
                match r.slot {
                    Slot::Filters => l.filters = FilterTensor::new(value)?,
                    _ => l.bias = value,
                }
            }
            Network::Generator => match (&mut task.generator[r.layer], r.slot) {
                (LayerParams::Factorized(p), Slot::Unconstrained) => {
                    p.unconstrained = Some(FilterTensor::new(value)?)
                }
                (LayerParams::Factorized(p), Slot::PiggybackWeight) => p.weight = Some(value),
                (LayerParams::Factorized(p), _) => p.bias = value,
                (LayerParams::Full(l), Slot::Filters) => l.filters = FilterTensor::new(value)?,
                (LayerParams::Full(l), _) => l.bias = value,
                (LayerParams::Superseded, _) => unreachable!("param() rejected superseded layers"),
            },
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_spec;
    use crate::piggyback::trainable_set;

    fn source() -> DataSource {
        DataSource { kind: TaskKind::Invert, seed: 1, count: 20 }
    }

    #[test]
    fn piggyback_shapes_follow_bank() {
        let spec = reference_spec(32).unwrap();
        let mut run = RunState::new(spec, Lambda::new(1, 4).unwrap(), 5).unwrap();
        for n in 1..=3 {
            assert_eq!(run.begin_task(Mode::Piggyback, source()).unwrap(), n);
            for bank in &run.banks {
                let l = &run.spec.generator[bank.layer_index];
                let LayerParams::Factorized(p) = &run.tasks[n - 1].generator[bank.layer_index] else {
                    panic!("shared layer not factorized")
                };
                assert_eq!(p.c_out(), l.c_out);
                if n > 1 {
                    assert_eq!(p.trained_bank_width, bank.width());
                    assert_eq!(p.weight.as_ref().unwrap().shape()[0], bank.width());
                }
            }
            run.finish_task(n).unwrap();
        }
        let l0 = &run.banks[0];
        assert_eq!(l0.width(), 16 + 4 + 4);
        assert!(run.finish_task(3).is_err());
    }

    #[test]
    fn mode_history_enforced() {
        let spec = reference_spec(32).unwrap();
        let mut run = RunState::new(spec, Lambda::new(1, 4).unwrap(), 5).unwrap();
        run.begin_task(Mode::Piggyback, source()).unwrap();
        assert!(matches!(
            run.begin_task(Mode::SequentialFinetune, source()),
            Err(Error::IncompatibleMode { .. })
        ));
    }

    #[test]
    fn full_and_lambda_one_draw_identical_filters() {
        let spec = reference_spec(32).unwrap();
        let mut pb = RunState::new(spec.clone(), Lambda::ONE, 11).unwrap();
        let mut full = RunState::new(spec, Lambda::ONE, 11).unwrap();
        for n in 1..=2 {
            pb.begin_task(Mode::Piggyback, source()).unwrap();
            pb.finish_task(n).unwrap();
            full.begin_task(Mode::Full, source()).unwrap();
        }
        for (a, b) in pb.tasks[1].generator.iter().zip(&full.tasks[1].generator) {
            let fa = match a {
                LayerParams::Factorized(p) => {
                    assert!(p.weight.is_none());
                    p.unconstrained.clone().unwrap()
                }
                LayerParams::Full(l) => l.filters.clone(),
                LayerParams::Superseded => unreachable!(),
            };
            let LayerParams::Full(fb) = b else { panic!() };
            assert!(fa.bit_eq(&fb.filters));
        }
    }

    #[test]
    fn sft_moves_shared_layers_forward() {
        let spec = reference_spec(32).unwrap();
        let mut run = RunState::new(spec, Lambda::new(1, 4).unwrap(), 3).unwrap();
        run.begin_task(Mode::SequentialFinetune, source()).unwrap();
        let before = run.tasks[0].generator.clone();
        run.begin_task(Mode::SequentialFinetune, source()).unwrap();
        for (idx, l) in run.spec.generator.iter().enumerate() {
            if l.task_specific {
                assert_eq!(run.tasks[0].generator[idx], before[idx]);
            } else {
                assert_eq!(run.tasks[0].generator[idx], LayerParams::Superseded);
            }
            assert_eq!(run.tasks[1].generator[idx], before[idx]);
        }
        assert!(trainable_set(&run, 1).is_err());
        assert!(trainable_set(&run, 2).is_ok());
    }
}
