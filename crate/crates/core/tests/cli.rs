use std::fs;
use std::path::Path;

use pbgan::checkpoint;
use pbgan::cli::{checkpoint_path, run_cli, LOCK_FILE};
use pbgan::data::synth_task;
use pbgan::eval::evaluate_task;

fn pbgan(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("pbgan").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn init(dir: &Path, seed: &str) {
    let (code, _, err) = pbgan(&["init", "--arch", "small-unet", "--lambda", "1/4", "--seed", seed, "--out", p(dir)]);
    assert_eq!(code, 0, "{err}");
}

fn train(dir: &Path, task: &str, mode: &str, data_seed: &str) -> (i32, String, String) {
    pbgan(&[
        "train", "--run", p(dir), "--task", task, "--mode", mode, "--epochs", "1", "--count", "12", "--data-seed",
        data_seed,
    ])
}

#[test]
fn init_prints_partitions_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (code, out, _) = pbgan(&["init", "--arch", "small-unet", "--lambda", "1/4", "--seed", "3", "--out", p(&a)]);
    assert_eq!(code, 0);
    assert!(out.contains("layer 0: c_out=16 n_u=4 n_p=12"), "{out}");
    assert!(out.contains("layer 2: c_out=64 n_u=16 n_p=48"), "{out}");
    fs::create_dir(&b).unwrap();
    init(&b, "3");
    assert_eq!(fs::read(checkpoint_path(&a)).unwrap(), fs::read(checkpoint_path(&b)).unwrap());
    let run = checkpoint::load(&checkpoint_path(&a)).unwrap();
    assert!(run.tasks.is_empty());
    assert!(run.banks.iter().all(|b| b.width() == 0));

    let (code, _, _) = pbgan(&["init", "--arch", "small-unet", "--lambda", "1/4", "--seed", "3", "--out", p(&a)]);
    assert_eq!(code, 2, "non-empty directory");
    let c = tmp.path().join("c");
    let (code, _, _) = pbgan(&["init", "--arch", "small-unet", "--lambda", "5/4", "--seed", "3", "--out", p(&c)]);
    assert_eq!(code, 2);
    let (code, _, _) = pbgan(&["init", "--arch", "huge", "--lambda", "1/4", "--seed", "3", "--out", p(&c)]);
    assert_eq!(code, 2);
    assert_eq!(pbgan(&["frobnicate"]).0, 2);
    assert_eq!(pbgan(&["--help"]).0, 0);
}

#[test]
fn train_eval_verify_report_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    init(&dir, "5");

    let (code, out, err) = train(&dir, "blur_sharpen", "piggyback", "11");
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("final validation L1 for task 1"));
    let after1 = tmp.path().join("after1.pbgk");
    fs::copy(checkpoint_path(&dir), &after1).unwrap();
    let widths1: Vec<usize> = checkpoint::load(&after1).unwrap().banks.iter().map(|b| b.width()).collect();

    // Same invocation on a copy of the same checkpoint gives the same bytes.
    let twin = tmp.path().join("twin");
    fs::create_dir(&twin).unwrap();
    fs::copy(&after1, checkpoint_path(&twin)).unwrap();
    assert_eq!(train(&dir, "invert", "piggyback", "12").0, 0);
    assert_eq!(train(&twin, "invert", "piggyback", "12").0, 0);
    let bytes = fs::read(checkpoint_path(&dir)).unwrap();
    assert_eq!(bytes, fs::read(checkpoint_path(&twin)).unwrap());
    let run = checkpoint::decode(&bytes).unwrap();
    assert_eq!(run.tasks.len(), 2);
    for (b, w1) in run.banks.iter().zip(&widths1) {
        assert_eq!(b.blocks().len(), 2);
        assert!(b.width() > *w1);
    }
    assert!(!dir.join(LOCK_FILE).exists());

    let (code, _, err) = train(&dir, "invert", "sft", "13");
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("incompatible"));

    // Evaluation reproduces the logged validation L1 and is byte-stable.
    let ev_dir = tmp.path().join("eval");
    let (code, out, err) = pbgan(&["eval", "--run", p(&dir), "--task-index", "2", "--out", p(&ev_dir)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("rp_frechet NA"));
    let csv = fs::read_to_string(ev_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("task,samples,l1,psnr,rp_frechet\n") && !csv.contains('\r'));
    assert_eq!(pbgan(&["eval", "--run", p(&dir), "--task-index", "2", "--out", p(&ev_dir)]).0, 0);
    assert_eq!(fs::read_to_string(ev_dir.join("metrics.csv")).unwrap(), csv);
    let src = run.tasks[1].data;
    let ds = synth_task(src.kind, src.seed, src.count, 32).unwrap();
    let report = evaluate_task(&run, 2, &ds, 1).unwrap().report;
    let logged = run.tasks[1].log.final_val_l1().unwrap();
    assert!((report.l1 - logged).abs() <= 1e-12);
    let l1_field: f64 = csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((l1_field - logged).abs() <= 1e-12);
    let ppms = fs::read_dir(&ev_dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ppm").count();
    assert_eq!(ppms, 3 * ds.val_indices().len().min(8));
    assert_eq!(pbgan(&["eval", "--run", p(&dir), "--task-index", "3", "--out", p(&ev_dir)]).0, 2);

    // Forgetting check against the checkpoint taken after task 1.
    let ck = checkpoint_path(&dir);
    let (code, out, _) = pbgan(&["verify-forgetting", "--before", p(&after1), "--after", p(&ck), "--task-index", "1"]);
    assert_eq!(code, 0);
    assert!(out.contains("PASS") && out.contains("task,max_abs_diff,pass\n1,0e0,true"), "{out}");
    assert_eq!(pbgan(&["verify-forgetting", "--before", p(&after1), "--after", p(&ck), "--task-index", "2"]).0, 2);

    let (code, out, _) = pbgan(&["report-params", "--run", p(&dir)]);
    assert_eq!(code, 0);
    let csv = out.split("\n\n").nth(1).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(csv.lines().filter(|l| l.starts_with("full-per-task")).all(|l| l.ends_with(",1.000000,1.000000")));
}

#[test]
fn sequential_finetune_fails_forgetting_check() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    init(&dir, "2");
    assert_eq!(train(&dir, "blur_sharpen", "sequential_finetune", "1").0, 0);
    let before = tmp.path().join("before.pbgk");
    fs::copy(checkpoint_path(&dir), &before).unwrap();
    assert_eq!(train(&dir, "invert", "sequential_finetune", "2").0, 0);
    let (code, out, _) =
        pbgan(&["verify-forgetting", "--before", p(&before), "--after", p(&checkpoint_path(&dir)), "--task-index", "1"]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("FAIL"));
}

#[test]
fn corrupt_checkpoints_and_locks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    init(&dir, "1");
    let ck = checkpoint_path(&dir);
    let good = fs::read(&ck).unwrap();

    let bad = tmp.path().join("bad.pbgk");
    let mut bytes = good.clone();
    bytes[0] = b'Q';
    fs::write(&bad, &bytes).unwrap();
    let (code, _, err) = pbgan(&["verify-forgetting", "--before", p(&bad), "--after", p(&ck), "--task-index", "1"]);
    assert_eq!(code, 3);
    assert!(err.contains("offset 0"), "{err}");
    bytes[0] = b'P';
    bytes[4] = 9;
    fs::write(&bad, &bytes).unwrap();
    let (code, _, err) = pbgan(&["verify-forgetting", "--before", p(&bad), "--after", p(&ck), "--task-index", "1"]);
    assert_eq!(code, 3);
    assert!(err.contains("offset 4"), "{err}");
    let missing = tmp.path().join("nope.pbgk");
    assert_eq!(pbgan(&["verify-forgetting", "--before", p(&missing), "--after", p(&ck), "--task-index", "1"]).0, 3);

    fs::write(dir.join(LOCK_FILE), "123\n").unwrap();
    let (code, _, err) = train(&dir, "invert", "piggyback", "1");
    assert_eq!(code, 3);
    assert!(err.contains("locked"), "{err}");
    assert_eq!(fs::read(&ck).unwrap(), good);
    // Readers ignore the lock.
    assert_eq!(pbgan(&["report-params", "--run", p(&dir)]).0, 0);
}

#[test]
fn gradcheck_command_passes() {
    let (code, out, _) = pbgan(&["gradcheck"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("worst relative error"));
    assert!(out.lines().filter(|l| l.contains(",20,")).count() >= 18);
}
