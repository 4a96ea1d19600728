//! Quality metrics, the forgetting verifier, and parameter-growth reports.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::model::{build_generator, GeneratorInstance};
use crate::piggyback::param_count;
use crate::rng::{rng_stream, Purpose};
use crate::run::{Mode, RunState};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const RP_SEED: u64 = 7777;
pub const RP_DIM: usize = 16;
pub const FRECHET_MIN_SAMPLES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L1Psnr {
    pub l1: f64,
    pub psnr: f64,
}

/// `l1 = mean|fake - target|`, `psnr = 10 log10(4 / mse)` (peak-to-peak 2),
/// capped at 99 dB.
pub fn l1_psnr(fake: &Tensor, target: &Tensor) -> Result<L1Psnr> {
    if fake.shape() != target.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", fake.shape(), target.shape())));
    }
    let n = fake.numel() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (a, b) in fake.data().iter().zip(target.data()) {
        let d = a - b;
        abs += d.abs();
        sq += d * d;
    }
    let mse = sq / n;
    let psnr = if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB) };
    Ok(L1Psnr { l1: abs / n, psnr })
}

/// Fixed Gaussian projection standing in for a pretrained feature extractor.
pub struct RpProjector {
    input_len: usize,
    rows: Vec<Vec<f64>>,
}

impl RpProjector {
    pub fn new(seed: u64, input_len: usize) -> Self {
        let scale = 1.0 / (input_len as f64).sqrt();
        let mut s = rng_stream(seed, Purpose::Projection, &[RP_DIM as u64, input_len as u64]);
        let rows = (0..RP_DIM).map(|_| s.normals(input_len, scale)).collect();
        Self { input_len, rows }
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.numel() != self.input_len {
            return Err(Error::shape(format!("projector expects {} values, got {}", self.input_len, image.numel())));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().zip(image.data()).map(|(w, x)| w * x).sum::<f64>().max(0.0))
            .collect())
    }
}

/// 16 relu'd random projections of the flattened image.
pub fn rp_features(image: &Tensor, seed: u64) -> Result<Vec<f64>> {
    RpProjector::new(seed, image.numel()).features(image)
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = feats[0].len();
    if feats.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in feats {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Symmetric PSD square root with negative eigenvalues floored at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|μa-μb|² + Tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < FRECHET_MIN_SAMPLES || b.len() < FRECHET_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "frechet distance needs at least {FRECHET_MIN_SAMPLES} samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::shape("feature dimensions differ"));
    }
    let ra = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task_index: usize,
    pub samples: usize,
    pub l1: f64,
    pub psnr: f64,
    /// Absent when the split has fewer than 32 samples.
    pub rp_frechet: Option<f64>,
}

impl MetricReport {
    pub fn csv(reports: &[MetricReport]) -> String {
        let mut out = String::from("task,samples,l1,psnr,rp_frechet\n");
        let fmt_fd = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.12e}"));
        for r in reports {
            let _ = writeln!(out, "{},{},{:.12e},{:.12e},{}", r.task_index, r.samples, r.l1, r.psnr, fmt_fd(r.rp_frechet));
        }
        if reports.len() > 1 {
            let k = reports.len() as f64;
            let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            let fd = reports
                .iter()
                .map(|r| r.rp_frechet)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.iter().sum::<f64>() / k);
            let _ = writeln!(
                out,
                "mean,{},{:.12e},{:.12e},{}",
                reports.iter().map(|r| r.samples).sum::<usize>(),
                mean(&|r| r.l1),
                mean(&|r| r.psnr),
                fmt_fd(fd)
            );
        }
        out
    }
}

/// Generated validation outputs plus their metrics.
pub struct Evaluation {
    pub report: MetricReport,
    /// `(dataset index, fake)` in validation order.
    pub fakes: Vec<(usize, Tensor)>,
}

/// Evaluates task `k` over the validation split in fixed index order.
pub fn evaluate_task(run: &RunState, k: usize, data: &PairedDataset, threads: usize) -> Result<Evaluation> {
    let gen = build_generator(run, k)?;
    let val = data.val_indices();
    let fakes: Vec<Tensor> = par_map(&val, threads, |&i| gen.generate(&data.pairs[i].condition))
        .into_iter()
        .collect::<Result<_>>()?;
    let (mut l1, mut psnr) = (0.0, 0.0);
    for (&i, fake) in val.iter().zip(&fakes) {
        let m = l1_psnr(fake, &data.pairs[i].target)?;
        l1 += m.l1;
        psnr += m.psnr;
    }
    let n = val.len() as f64;
    let rp_frechet = if val.len() >= FRECHET_MIN_SAMPLES {
        let proj = RpProjector::new(RP_SEED, fakes[0].numel());
        let fa = fakes.iter().map(|f| proj.features(f)).collect::<Result<Vec<_>>>()?;
        let fb = val.iter().map(|&i| proj.features(&data.pairs[i].target)).collect::<Result<Vec<_>>>()?;
        Some(frechet_distance(&fa, &fb)?)
    } else {
        None
    };
    Ok(Evaluation {
        report: MetricReport { task_index: k, samples: val.len(), l1: l1 / n, psnr: psnr / n, rp_frechet },
        fakes: val.into_iter().zip(fakes).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingReport {
    /// `(task index, max |before - after|)` over the probe conditions.
    pub diffs: Vec<(usize, f64)>,
    pub pass: bool,
}

fn max_output_diff(a: &GeneratorInstance, b: &GeneratorInstance, probes: &PairedDataset) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in &probes.pairs {
        worst = worst.max(a.generate(&p.condition)?.max_abs_diff(&b.generate(&p.condition)?)?);
    }
    Ok(worst)
}

/// Rebuilds task `k` from both runs and compares outputs on every probe
/// condition. Passes only if every difference is exactly zero.
pub fn verify_forgetting(
    before: &RunState,
    after: &RunState,
    probes: &PairedDataset,
    k: usize,
) -> Result<ForgettingReport> {
    if before.spec != after.spec {
        return Err(Error::InvalidArgument("runs have different model specs".into()));
    }
    let a = build_generator(before, k)?;
    let b = build_generator(after, k)?;
    let diff = max_output_diff(&a, &b, probes)?;
    Ok(ForgettingReport { diffs: vec![(k, diff)], pass: diff == 0.0 })
}

impl ForgettingReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("task,max_abs_diff,pass\n");
        for (k, d) in &self.diffs {
            let _ = writeln!(out, "{k},{d:e},{}", *d == 0.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub strategy: Mode,
    pub task: usize,
    pub trainable: usize,
    pub stored_cumulative: usize,
    pub trainable_ratio: f64,
    pub stored_ratio: f64,
}

/// Trainable and cumulative stored counts per strategy and task, with ratios
/// against one full model per task.
pub fn param_report(run: &RunState, n_tasks: usize) -> Result<Vec<ParamRow>> {
    let mut rows = Vec::new();
    for strategy in [Mode::Full, Mode::Piggyback, Mode::PureFactorization] {
        for task in 1..=n_tasks {
            let c = param_count(&run.spec, task, run.lambda, strategy)?;
            let full = param_count(&run.spec, task, run.lambda, Mode::Full)?;
            rows.push(ParamRow {
                strategy,
                task,
                trainable: c.trainable,
                stored_cumulative: c.stored_cumulative,
                trainable_ratio: c.trainable as f64 / full.trainable as f64,
                stored_ratio: c.stored_cumulative as f64 / full.stored_cumulative as f64,
            });
        }
    }
    Ok(rows)
}

fn strategy_label(m: Mode) -> &'static str {
    match m {
        Mode::Full => "full-per-task",
        other => other.name(),
    }
}

pub fn param_report_csv(rows: &[ParamRow]) -> String {
    let mut out = String::from("strategy,task,trainable,stored_cumulative,trainable_ratio,stored_ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            strategy_label(r.strategy),
            r.task,
            r.trainable,
            r.stored_cumulative,
            r.trainable_ratio,
            r.stored_ratio
        );
    }
    out
}

pub fn param_report_text(rows: &[ParamRow]) -> String {
    let mut out = format!(
        "{:<20} {:>4} {:>12} {:>18} {:>10} {:>10}\n",
        "strategy", "task", "trainable", "stored_cumulative", "train_x", "stored_x"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>4} {:>12} {:>18} {:>10.4} {:>10.4}",
            strategy_label(r.strategy),
            r.task,
            r.trainable,
            r.stored_cumulative,
            r.trainable_ratio,
            r.stored_ratio
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Tensor::from_fn(&[4, 4, 3], |i| (i as f64 * 0.1).sin()).unwrap();
        assert_eq!(l1_psnr(&a, &a).unwrap(), L1Psnr { l1: 0.0, psnr: 99.0 });
    }

    #[test]
    fn constant_offset() {
        let a = Tensor::full(&[4, 4, 3], 0.1).unwrap();
        let b = Tensor::full(&[4, 4, 3], -0.1).unwrap();
        let m = l1_psnr(&a, &b).unwrap();
        assert!((m.l1 - 0.2).abs() < 1e-15);
        assert!((m.psnr - 20.0).abs() < 1e-12);
        assert!(l1_psnr(&a, &Tensor::zeros(&[4, 4, 2]).unwrap()).is_err());
    }

    #[test]
    fn random_pair_matches_loop_oracle() {
        let mut s = rng_stream(3, Purpose::Test, &[]);
        let a = Tensor::from_fn(&[5, 6, 3], |_| s.uniform_range(-1.0, 1.0)).unwrap();
        let b = Tensor::from_fn(&[5, 6, 3], |_| s.uniform_range(-1.0, 1.0)).unwrap();
        let (mut abs, mut sq) = (0.0, 0.0);
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    let i = (y * 6 + x) * 3 + c;
                    abs += (a.data()[i] - b.data()[i]).abs();
                    sq += (a.data()[i] - b.data()[i]).powi(2);
                }
            }
        }
        let m = l1_psnr(&a, &b).unwrap();
        assert!((m.l1 - abs / 90.0).abs() <= 1e-12);
        assert!((m.psnr - 10.0 * (4.0 / (sq / 90.0)).log10()).abs() <= 1e-12);
    }

    #[test]
    fn rp_features_basics() {
        let zero = Tensor::zeros(&[32, 32, 3]).unwrap();
        assert!(rp_features(&zero, RP_SEED).unwrap().iter().all(|&v| v == 0.0));
        let img = Tensor::from_fn(&[32, 32, 3], |i| ((i * 7919) % 200) as f64 / 100.0 - 1.0).unwrap();
        let a = rp_features(&img, RP_SEED).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, rp_features(&img, RP_SEED).unwrap());
        let p1 = RpProjector::new(RP_SEED, 3072);
        let p2 = RpProjector::new(RP_SEED, 3072);
        for (r1, r2) in p1.matrix().iter().zip(p2.matrix()) {
            assert!(r1.iter().zip(r2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    fn gaussian(seed: u64, n: usize, offset: f64) -> Vec<Vec<f64>> {
        let mut s = rng_stream(seed, Purpose::Test, &[n as u64]);
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..RP_DIM).map(|_| s.normal()).collect();
                v[0] += offset;
                v
            })
            .collect()
    }

    #[test]
    fn frechet_identical_and_symmetric() {
        let a = gaussian(1, 64, 0.0);
        let b = gaussian(2, 80, 0.5);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-10, "{ab} vs {ba}");
        assert!(ab >= 0.0);
        assert!(frechet_distance(&a[..31], &b).is_err());
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = par_map(&items, 4, |&i| i * 2);
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
    }
}
