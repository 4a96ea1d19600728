use pbgan::data::TaskKind;
use pbgan::model::{build_generator, reference_spec, GeneratorInstance, Norm};
use pbgan::piggyback::{FilterTensor, Lambda};
use pbgan::rng::{rng_stream, Purpose};
use pbgan::run::{DataSource, LayerParams, Mode, RunState};
use pbgan::Tensor;

fn source() -> DataSource {
    DataSource { kind: TaskKind::Invert, seed: 1, count: 20 }
}

fn probe(seed: u64) -> Tensor {
    let mut s = rng_stream(seed, Purpose::Probe, &[]);
    Tensor::from_fn(&[32, 32, 3], |_| s.uniform_range(-1.0, 1.0)).unwrap()
}

#[test]
fn parameter_count_matches_layer_walk() {
    let spec = reference_spec(32).unwrap();
    // (kind, k, c_in, c_out) as laid out in the reference architecture.
    let layers = [(4, 3, 16), (4, 16, 32), (4, 32, 64), (4, 64, 32), (4, 64, 16), (4, 32, 16), (3, 16, 3)];
    let walk: usize = layers.iter().map(|&(k, ci, co)| k * k * ci * co + co).sum();
    assert_eq!(spec.generator_param_count(), walk);
    let disc = [(4, 6, 16), (4, 16, 32), (3, 32, 1)];
    assert_eq!(spec.discriminator_param_count(), disc.iter().map(|&(k, ci, co)| k * k * ci * co + co).sum::<usize>());
    assert_eq!(spec.generator.iter().filter(|l| l.task_specific).count(), 1);
    assert!(spec.generator.last().unwrap().task_specific);
}

#[test]
fn skip_channels_must_double() {
    let mut spec = reference_spec(32).unwrap();
    spec.generator[4].c_in = 32;
    assert!(spec.validate().is_err());
    let mut spec = reference_spec(32).unwrap();
    spec.generator[4].skip_from = Some(2);
    assert!(spec.validate().is_err());
}

#[test]
fn zero_weights_give_constant_tanh_bias() {
    let mut spec = reference_spec(32).unwrap();
    for l in &mut spec.generator {
        l.norm = Norm::None;
    }
    let last_bias = [0.3, -1.2, 0.0];
    let filters = spec
        .generator
        .iter()
        .map(|l| FilterTensor::new(Tensor::zeros(&l.filter_shape()).unwrap()).unwrap())
        .collect();
    let mut biases: Vec<Tensor> = spec.generator.iter().map(|l| Tensor::zeros(&[l.c_out]).unwrap()).collect();
    *biases.last_mut().unwrap() = Tensor::new(vec![3], last_bias.to_vec()).unwrap();
    let gen = GeneratorInstance { spec, task_index: 1, filters, biases };
    let out = gen.generate(&probe(1)).unwrap();
    for px in out.data().chunks(3) {
        for (v, b) in px.iter().zip(last_bias) {
            assert_eq!(*v, b.tanh());
        }
    }
}

#[test]
fn generate_is_deterministic_and_bounded() {
    let mut run = RunState::new(reference_spec(32).unwrap(), Lambda::new(1, 4).unwrap(), 4).unwrap();
    run.begin_task(Mode::Piggyback, source()).unwrap();
    let gen = build_generator(&run, 1).unwrap();
    let x = probe(2);
    let a = gen.generate(&x).unwrap();
    assert!(a.bit_eq(&gen.generate(&x).unwrap()));
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a.shape(), &[32, 32, 3]);
    assert!(gen.generate(&Tensor::zeros(&[16, 16, 3]).unwrap()).is_err());
    assert!(build_generator(&run, 2).is_err());
}

#[test]
fn first_task_resolves_to_stored_filters() {
    let mut run = RunState::new(reference_spec(32).unwrap(), Lambda::new(1, 4).unwrap(), 4).unwrap();
    run.begin_task(Mode::Piggyback, source()).unwrap();
    let gen = build_generator(&run, 1).unwrap();
    for (f, lp) in gen.filters.iter().zip(&run.tasks[0].generator) {
        match lp {
            LayerParams::Factorized(p) => assert!(f.bit_eq(p.unconstrained.as_ref().unwrap())),
            LayerParams::Full(l) => assert!(f.bit_eq(&l.filters)),
            LayerParams::Superseded => unreachable!(),
        }
    }
}

#[test]
fn unit_lambda_resolves_like_full_model() {
    let spec = reference_spec(32).unwrap();
    let mut pb = RunState::new(spec.clone(), Lambda::ONE, 6).unwrap();
    let mut full = RunState::new(spec, Lambda::ONE, 6).unwrap();
    for n in 1..=3 {
        pb.begin_task(Mode::Piggyback, source()).unwrap();
        pb.finish_task(n).unwrap();
        full.begin_task(Mode::Full, source()).unwrap();
        full.finish_task(n).unwrap();
        let (a, b) = (build_generator(&pb, n).unwrap(), build_generator(&full, n).unwrap());
        for (x, y) in a.filters.iter().zip(&b.filters) {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn old_tasks_rebuild_identically_after_bank_growth() {
    let mut run = RunState::new(reference_spec(32).unwrap(), Lambda::new(1, 4).unwrap(), 9).unwrap();
    run.begin_task(Mode::Piggyback, source()).unwrap();
    run.finish_task(1).unwrap();
    run.begin_task(Mode::Piggyback, source()).unwrap();
    run.finish_task(2).unwrap();
    let x = probe(3);
    let before = build_generator(&run, 2).unwrap().generate(&x).unwrap();
    for n in 3..=4 {
        run.begin_task(Mode::Piggyback, source()).unwrap();
        run.finish_task(n).unwrap();
    }
    let after = build_generator(&run, 2).unwrap().generate(&x).unwrap();
    assert_eq!(before.max_abs_diff(&after).unwrap(), 0.0);
}
