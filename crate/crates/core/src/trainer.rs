//! Sequential-task adversarial training.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::eval::l1_psnr;
use crate::model::{build_generator, discriminator_forward, generator_forward, LayerVars};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::piggyback::{compose_in_graph, trainable_set, Network, ParamRef, Slot};
use crate::rng::{rng_stream, Purpose};
use crate::run::{DataSource, LayerParams, Mode, RunState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub l1_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, epochs: usize, seed: u64) -> Self {
        Self { mode, epochs, lr: 2e-4, beta1: 0.5, beta2: 0.999, l1_weight: 100.0, batch_size: 4, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("invalid optimizer settings".into()));
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(Error::InvalidArgument("l1_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr).with_betas(self.beta1, self.beta2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Mean per-sample generator loss over the epoch.
    pub g_loss: f64,
    /// Mean per-sample discriminator loss over the epoch.
    pub d_loss: f64,
    /// Mean L1 over the validation split after the epoch.
    pub val_l1: f64,
}

/// Per-epoch training record. Wall-clock time is informational: it is not
/// persisted and does not take part in equality.
#[derive(Clone, Debug)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub seed: u64,
    pub wall_clock: Duration,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.g_loss.to_bits() == b.g_loss.to_bits()
                    && a.d_loss.to_bits() == b.d_loss.to_bits()
                    && a.val_l1.to_bits() == b.val_l1.to_bits()
            })
    }
}

impl TrainLog {
    pub fn empty(seed: u64) -> Self {
        Self { epochs: Vec::new(), seed, wall_clock: Duration::ZERO }
    }

    pub fn final_val_l1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_l1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub g_loss: f64,
    pub d_loss: f64,
}

/// Least-squares discriminator loss: `½ mean((d_real-1)²) + ½ mean(d_fake²)`.
pub fn d_loss_graph(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = g.affine(d_real, 1.0, -1.0)?;
    let r2 = g.mul(r, r)?;
    let mr = g.mean(r2)?;
    let f2 = g.mul(d_fake, d_fake)?;
    let mf = g.mean(f2)?;
    let s = g.add(mr, mf)?;
    g.affine(s, 0.5, 0.0)
}

/// Generator loss: `½ mean((d_fake-1)²) + l1_weight · mean|fake - target|`.
pub fn g_loss_graph(g: &mut Graph, d_fake: Var, fake: Var, target: Var, l1_weight: f64) -> Result<Var> {
    let r = g.affine(d_fake, 1.0, -1.0)?;
    let r2 = g.mul(r, r)?;
    let adv = g.mean(r2)?;
    let adv = g.affine(adv, 0.5, 0.0)?;
    let diff = g.sub(fake, target)?;
    let ad = g.abs(diff)?;
    let l1 = g.mean(ad)?;
    let l1 = g.affine(l1, l1_weight, 0.0)?;
    g.add(adv, l1)
}

pub fn gan_losses(
    d_real: &Tensor,
    d_fake: &Tensor,
    fake: &Tensor,
    target: &Tensor,
    l1_weight: f64,
) -> Result<GanLosses> {
    let mut g = Graph::new();
    let (dr, df) = (g.constant(d_real.clone()), g.constant(d_fake.clone()));
    let (fk, tg) = (g.constant(fake.clone()), g.constant(target.clone()));
    let d = d_loss_graph(&mut g, dr, df)?;
    let gl = g_loss_graph(&mut g, df, fk, tg, l1_weight)?;
    Ok(GanLosses { g_loss: g.value(gl).data()[0], d_loss: g.value(d).data()[0] })
}

/// Mean per-image L1 of task `n`'s generator over the validation split.
pub fn validation_l1(run: &RunState, n: usize, data: &PairedDataset) -> Result<f64> {
    let gen = build_generator(run, n)?;
    let val = data.val_indices();
    let mut total = 0.0;
    for &i in &val {
        let p = &data.pairs[i];
        total += l1_psnr(&gen.generate(&p.condition)?, &p.target)?.l1;
    }
    Ok(total / val.len() as f64)
}

fn check_finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at epoch {epoch}, step {step}")))
    }
}

/// Serialized bytes of everything training task `n` must not touch.
fn frozen_fingerprint(run: &RunState, n: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for bank in &run.banks {
        checkpoint::encode_bank(&mut out, bank);
    }
    for task in &run.tasks[..n - 1] {
        checkpoint::encode_task(&mut out, task);
    }
    out
}

/// Generator layer handles for task `n`, with trainables registered as graph
/// parameters.
fn generator_vars(
    g: &mut Graph,
    run: &RunState,
    n: usize,
    bank_mats: &BTreeMap<usize, Tensor>,
    leaves: &mut Vec<(ParamRef, Var)>,
) -> Result<Vec<LayerVars>> {
    let task = run.task(n)?;
    let mut out = Vec::with_capacity(task.generator.len());
    for (idx, lp) in task.generator.iter().enumerate() {
        let mut leaf = |g: &mut Graph, slot: Slot, t: &Tensor| {
            let v = g.param(t.clone());
            leaves.push((ParamRef { task: n, network: Network::Generator, layer: idx, slot }, v));
            v
        };
        let vars = match lp {
            LayerParams::Factorized(p) => {
                let l = &run.spec.generator[idx];
                let bank = bank_mats.get(&idx).map(|m| g.constant(m.clone()));
                let u = p.unconstrained.as_ref().map(|u| leaf(g, Slot::Unconstrained, u.tensor()));
                let w = p.weight.as_ref().map(|w| leaf(g, Slot::PiggybackWeight, w));
                let filters = compose_in_graph(g, (l.kw, l.kh, l.c_in), bank, u, w)?;
                LayerVars { filters, bias: leaf(g, Slot::Bias, &p.bias) }
            }
            LayerParams::Full(f) => LayerVars {
                filters: leaf(g, Slot::Filters, f.filters.tensor()),
                bias: leaf(g, Slot::Bias, &f.bias),
            },
            LayerParams::Superseded => return Err(Error::MissingTask(n)),
        };
        out.push(vars);
    }
    Ok(out)
}

fn discriminator_vars(
    g: &mut Graph,
    run: &RunState,
    n: usize,
    trainable: bool,
    leaves: &mut Vec<(ParamRef, Var)>,
) -> Result<Vec<LayerVars>> {
    let task = run.task(n)?;
    let mut out = Vec::with_capacity(task.discriminator.len());
    for (idx, l) in task.discriminator.iter().enumerate() {
        let mut add = |slot: Slot, t: &Tensor| {
            if trainable {
                let v = g.param(t.clone());
                leaves.push((ParamRef { task: n, network: Network::Discriminator, layer: idx, slot }, v));
                v
            } else {
                g.constant(t.clone())
            }
        };
        let filters = add(Slot::Filters, l.filters.tensor());
        let bias = add(Slot::Bias, &l.bias);
        out.push(LayerVars { filters, bias });
    }
    Ok(out)
}

struct Optimizer {
    cfg: AdamConfig,
    states: BTreeMap<ParamRef, AdamState>,
}

impl Optimizer {
    fn new(cfg: AdamConfig, run: &RunState, refs: &[ParamRef]) -> Result<Self> {
        let mut states = BTreeMap::new();
        for r in refs {
            states.insert(*r, AdamState::zeros(run.param(r)?.numel()));
        }
        Ok(Self { cfg, states })
    }

    fn apply(&mut self, run: &mut RunState, leaves: &[(ParamRef, Var)], grads: &crate::autodiff::Gradients) -> Result<()> {
        for (r, v) in leaves {
            let state = self
                .states
                .get(r)
                .ok_or_else(|| Error::FreezeViolation(format!("{r:?} is not trainable")))?;
            let grad = grads.tensor(*v);
            let (next, st) = adam_step(run.param(r)?, grad.data(), state, &self.cfg)?;
            run.set_param(r, next)?;
            self.states.insert(*r, st);
        }
        Ok(())
    }
}

/// Trains a new task on `data` and returns the updated run with the task
/// appended. In piggyback mode the task's unconstrained filters join the bank
/// afterwards; banks and earlier tasks are verified untouched.
pub fn train_task(run: RunState, data: &PairedDataset, cfg: &TrainConfig) -> Result<(RunState, TrainLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let spec = run.spec.clone();
    let shape = [spec.height, spec.width, spec.channels];
    if data.pairs.is_empty() || data.pairs[0].condition.shape() != shape {
        return Err(Error::shape(format!(
            "dataset images {:?} do not match spec {shape:?}",
            data.pairs.first().map(|p| p.condition.shape().to_vec())
        )));
    }
    let train = data.train_indices();
    if train.is_empty() || data.val_indices().is_empty() {
        return Err(Error::InvalidArgument("dataset needs train and validation pairs".into()));
    }
    let mut run = run;
    let source = DataSource { kind: data.kind, seed: data.seed, count: data.pairs.len() };
    let n = run.begin_task(cfg.mode, source)?;
    let frozen = frozen_fingerprint(&run, n);

    let refs = trainable_set(&run, n)?;
    let (gen_refs, disc_refs): (Vec<_>, Vec<_>) =
        refs.iter().partition(|r| r.network == Network::Generator);
    let mut gen_opt = Optimizer::new(cfg.adam(), &run, &gen_refs)?;
    let mut disc_opt = Optimizer::new(cfg.adam(), &run, &disc_refs)?;

    let mut bank_mats = BTreeMap::new();
    for (idx, lp) in run.task(n)?.generator.iter().enumerate() {
        if let LayerParams::Factorized(p) = lp {
            if p.weight.is_some() {
                bank_mats.insert(idx, run.bank(idx)?.prefix_matrix(p.trained_bank_width)?);
            }
        }
    }

    let mut log = TrainLog::empty(cfg.seed);
    for epoch in 0..cfg.epochs {
        let order = rng_stream(cfg.seed, Purpose::Shuffle, &[n as u64, epoch as u64]).permutation(train.len());
        let (mut g_sum, mut d_sum) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<_> = batch.iter().map(|&k| &data.pairs[train[k]]).collect();

            // Generator forward; kept for the generator update below.
            let mut gg = Graph::new();
            let mut g_leaves = Vec::new();
            let gen_w = generator_vars(&mut gg, &run, n, &bank_mats, &mut g_leaves)?;
            let mut fakes = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let x = gg.constant(p.condition.clone());
                fakes.push(generator_forward(&mut gg, &spec, &gen_w, x)?);
            }

            // Discriminator update on detached fakes.
            let mut dg = Graph::new();
            let mut d_leaves = Vec::new();
            let disc_w = discriminator_vars(&mut dg, &run, n, true, &mut d_leaves)?;
            let mut d_total = None;
            for (p, &fake) in pairs.iter().zip(&fakes) {
                let c = dg.constant(p.condition.clone());
                let t = dg.constant(p.target.clone());
                let f = dg.constant(gg.value(fake).clone());
                let real = discriminator_forward(&mut dg, &spec, &disc_w, c, t)?;
                let fake_score = discriminator_forward(&mut dg, &spec, &disc_w, c, f)?;
                let l = d_loss_graph(&mut dg, real, fake_score)?;
                d_total = Some(match d_total {
                    Some(acc) => dg.add(acc, l)?,
                    None => l,
                });
            }
            let d_total = d_total.expect("non-empty batch");
            let d_val = dg.value(d_total).data()[0];
            check_finite(d_val, "discriminator loss", epoch, step)?;
            let d_grads = dg.backward(d_total)?;
            disc_opt.apply(&mut run, &d_leaves, &d_grads)?;

            // Generator update against the refreshed discriminator.
            let disc_c = discriminator_vars(&mut gg, &run, n, false, &mut Vec::new())?;
            let mut g_total = None;
            for (p, &fake) in pairs.iter().zip(&fakes) {
                let c = gg.constant(p.condition.clone());
                let t = gg.constant(p.target.clone());
                let score = discriminator_forward(&mut gg, &spec, &disc_c, c, fake)?;
                let l = g_loss_graph(&mut gg, score, fake, t, cfg.l1_weight)?;
                g_total = Some(match g_total {
                    Some(acc) => gg.add(acc, l)?,
                    None => l,
                });
            }
            let g_total = g_total.expect("non-empty batch");
            let g_val = gg.value(g_total).data()[0];
            check_finite(g_val, "generator loss", epoch, step)?;
            let g_grads = gg.backward(g_total)?;
            gen_opt.apply(&mut run, &g_leaves, &g_grads)?;

            g_sum += g_val;
            d_sum += d_val;
        }
        let samples = train.len() as f64;
        let val_l1 = validation_l1(&run, n, data)?;
        log.epochs.push(EpochRecord { g_loss: g_sum / samples, d_loss: d_sum / samples, val_l1 });
    }

    if frozen_fingerprint(&run, n) != frozen {
        return Err(Error::FreezeViolation(format!("bank or tasks before {n} changed")));
    }
    run.finish_task(n)?;
    log.wall_clock = started.elapsed();
    run.task_mut(n)?.log = log.clone();
    Ok((run, log))
}
