//! Short training runs exercising freezing, determinism and the mode
//! contracts. Budgets are tiny; quality claims live in the acceptance suite.

use pbgan::checkpoint::encode;
use pbgan::data::{synth_task, PairedDataset, TaskKind};
use pbgan::eval::verify_forgetting;
use pbgan::model::{build_generator, reference_spec};
use pbgan::piggyback::Lambda;
use pbgan::run::{Mode, RunState};
use pbgan::trainer::{train_task, validation_l1, TrainConfig};
use pbgan::Error;

fn data(kind: TaskKind, seed: u64) -> PairedDataset {
    synth_task(kind, seed, 20, 32).unwrap()
}

fn fresh(lambda: Lambda, seed: u64) -> RunState {
    RunState::new(reference_spec(32).unwrap(), lambda, seed).unwrap()
}

fn quarter() -> Lambda {
    Lambda::new(1, 4).unwrap()
}

#[test]
fn earlier_tasks_and_bank_prefix_are_byte_identical_after_training() {
    let cfg = TrainConfig::new(Mode::Piggyback, 1, 3);
    let (after1, _) = train_task(fresh(quarter(), 3), &data(TaskKind::BlurSharpen, 1), &cfg).unwrap();
    let (after2, _) = train_task(after1.clone(), &data(TaskKind::Invert, 2), &cfg).unwrap();

    let reassembled = RunState { tasks: vec![after2.tasks[0].clone()], ..after1.clone() };
    assert_eq!(encode(&reassembled), encode(&after1));
    for (old, new) in after1.banks.iter().zip(&after2.banks) {
        assert_eq!(new.blocks().len(), old.blocks().len() + 1);
        for (a, b) in old.blocks().iter().zip(new.blocks()) {
            assert!(a.filters.bit_eq(&b.filters));
        }
    }

    let probes = data(TaskKind::BlurSharpen, 1);
    let report = verify_forgetting(&after1, &after2, &probes, 1).unwrap();
    assert!(report.pass);
    assert_eq!(report.diffs, vec![(1, 0.0)]);
    assert!(verify_forgetting(&after2, &after2, &probes, 2).unwrap().pass);
    assert!(verify_forgetting(&after1, &after2, &probes, 2).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig::new(Mode::Piggyback, 2, 5);
    let d = data(TaskKind::EdgeFill, 4);
    let (a, la) = train_task(fresh(quarter(), 5), &d, &cfg).unwrap();
    let (b, lb) = train_task(fresh(quarter(), 5), &d, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.epochs.len(), 2);
    assert_eq!(encode(&a), encode(&b));
    assert_eq!(a.tasks[0].log, la);
}

#[test]
fn logged_validation_matches_recomputation() {
    let cfg = TrainConfig::new(Mode::Full, 1, 2);
    let d = data(TaskKind::Invert, 8);
    let (run, log) = train_task(fresh(quarter(), 2), &d, &cfg).unwrap();
    let again = validation_l1(&run, 1, &d).unwrap();
    assert_eq!(log.final_val_l1().unwrap().to_bits(), again.to_bits());
}

#[test]
fn unit_lambda_matches_full_mode_exactly() {
    let d1 = data(TaskKind::BlurSharpen, 1);
    let d2 = data(TaskKind::Invert, 2);
    let mut pb = fresh(Lambda::ONE, 7);
    let mut full = fresh(Lambda::ONE, 7);
    for d in [&d1, &d2] {
        let (p, lp) = train_task(pb, d, &TrainConfig::new(Mode::Piggyback, 1, 7)).unwrap();
        let (f, lf) = train_task(full, d, &TrainConfig::new(Mode::Full, 1, 7)).unwrap();
        assert_eq!(lp, lf);
        pb = p;
        full = f;
    }
    for n in 1..=2 {
        let (a, b) = (build_generator(&pb, n).unwrap(), build_generator(&full, n).unwrap());
        for (x, y) in a.filters.iter().zip(&b.filters) {
            assert!(x.bit_eq(y));
        }
        for (x, y) in a.biases.iter().zip(&b.biases) {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn sequential_finetune_changes_the_first_task() {
    let d1 = data(TaskKind::BlurSharpen, 1);
    let cfg = TrainConfig::new(Mode::SequentialFinetune, 2, 1);
    let (after1, _) = train_task(fresh(quarter(), 1), &d1, &cfg).unwrap();
    let (after2, _) = train_task(after1.clone(), &data(TaskKind::Invert, 2), &cfg).unwrap();
    let report = verify_forgetting(&after1, &after2, &d1, 1).unwrap();
    assert!(!report.pass);
    assert!(report.diffs[0].1 > 0.0);
}

#[test]
fn mode_history_and_inputs_are_checked() {
    let d = data(TaskKind::Invert, 1);
    let (run, _) = train_task(fresh(quarter(), 1), &d, &TrainConfig::new(Mode::Piggyback, 1, 1)).unwrap();
    let err = train_task(run, &d, &TrainConfig::new(Mode::SequentialFinetune, 1, 1)).unwrap_err();
    assert!(matches!(err, Error::IncompatibleMode { .. }));
    assert!(train_task(fresh(quarter(), 1), &d, &TrainConfig::new(Mode::Piggyback, 0, 1)).is_err());
}

#[test]
fn pure_factorization_keeps_the_bank_fixed() {
    let cfg = TrainConfig::new(Mode::PureFactorization, 1, 2);
    let (r1, _) = train_task(fresh(quarter(), 2), &data(TaskKind::BlurSharpen, 1), &cfg).unwrap();
    let widths: Vec<usize> = r1.banks.iter().map(|b| b.width()).collect();
    let (r2, _) = train_task(r1, &data(TaskKind::EdgeFill, 2), &cfg).unwrap();
    assert_eq!(r2.banks.iter().map(|b| b.width()).collect::<Vec<_>>(), widths);
}
