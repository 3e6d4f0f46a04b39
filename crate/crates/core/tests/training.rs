use sharpcam::autodiff::Tensor;
use sharpcam::dataset::{assemble, generate_synthetic, Batcher, Dataset, Split, SyntheticSpec};
use sharpcam::gradcam::gradcam_map;
use sharpcam::measures::measure_all;
use sharpcam::network::{forward, Architecture, ModelParams};
use sharpcam::trainer::{argmax_rows, evaluate, train, train_with, Evaluator, TrainConfig, Trainer};
use sharpcam::Error;

fn data(classes: usize, per_class: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec { n_classes: classes, n_per_class: per_class, image_size: size, noise_level: noise, seed })
        .unwrap()
}

fn cfg(beta: f64, epochs: usize) -> TrainConfig {
    TrainConfig { beta, epochs, seed: 4, log_every: 1000, ..Default::default() }
}

#[test]
fn separable_two_class_data_is_learned() {
    let d = data(2, 60, 16, 0.0, 1);
    let out = train(&cfg(0.0, 20), &Architecture::desk(2, 16), &d).unwrap();
    let last_train = out.rows.iter().rev().find(|r| r.split == Split::Train).unwrap();
    assert!(last_train.accuracy >= 0.95, "{last_train:?}");
    let first_train = out.rows.iter().find(|r| r.split == Split::Train).unwrap();
    assert!(last_train.loss < first_train.loss);
}

#[test]
fn zero_epochs_returns_initial_params_and_baseline_rows() {
    let d = data(3, 10, 16, 0.3, 2);
    let c = cfg(0.0, 0);
    let arch = Architecture::desk(3, 16);
    let out = train(&c, &arch, &d).unwrap();
    assert_eq!(out.params, ModelParams::init(&c.architecture(&arch), c.seed).unwrap());
    assert_eq!(out.rows.len(), 2);
    assert_eq!((out.rows[0].step, out.rows[0].split), (0, Split::Train));
    assert_eq!((out.rows[1].step, out.rows[1].split), (0, Split::Test));
}

#[test]
fn training_is_deterministic() {
    let d = data(3, 12, 16, 0.3, 3);
    let arch = Architecture::desk(3, 16);
    let c = TrainConfig { beta: 1.0, log_every: 2, ..cfg(1.0, 2) };
    let a = train(&c, &arch, &d).unwrap();
    let b = train(&c, &arch, &d).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.rows, b.rows);
}

#[test]
fn logging_schedule_includes_final_step() {
    let d = data(2, 15, 16, 0.3, 4);
    // 24 train samples, batch 10 -> 3 steps per epoch, 6 steps total
    let c = TrainConfig { batch_size: 10, log_every: 4, ..cfg(0.0, 2) };
    let out = train(&c, &Architecture::desk(2, 16), &d).unwrap();
    let steps: Vec<usize> = out.rows.iter().filter(|r| r.split == Split::Train).map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 4, 6]);
}

/// Criterion 7 at desk scale: the β = 0 loss graph and a graph with the
/// entropy term removed move the parameters identically, bit for bit.
#[test]
fn zero_beta_matches_compiled_out_entropy_term() {
    let d = data(4, 50, 32, 0.3, 5);
    let arch = Architecture::desk(4, 32);
    let with_term = TrainConfig { beta: 0.0, ..cfg(0.0, 1) };
    let without = TrainConfig { entropy_term: false, ..with_term.clone() };
    let mut a = Trainer::new(&with_term, &arch).unwrap();
    let mut b = Trainer::new(&without, &arch).unwrap();
    let mut batches = Batcher::new(d.train.len(), 20, 9).unwrap();
    for step in 0..100 {
        let (x, y) = assemble(&d.train, &batches.next_batch()).unwrap();
        let la = a.step(&x, &y).unwrap();
        let lb = b.step(&x, &y).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits(), "loss at step {step}");
        for (pa, pb) in a.params().params.iter().zip(&b.params().params) {
            let same = pa.value.data().iter().zip(pb.value.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            assert!(same, "{} diverged at step {step}", pa.name);
        }
    }
}

#[test]
fn entropy_term_changes_the_trajectory() {
    let d = data(2, 15, 16, 0.3, 6);
    let arch = Architecture::desk(2, 16);
    let mut a = Trainer::new(&cfg(0.0, 1), &arch).unwrap();
    let mut b = Trainer::new(&cfg(10.0, 1), &arch).unwrap();
    let idx: Vec<usize> = (0..10).collect();
    let (x, y) = assemble(&d.train, &idx).unwrap();
    for _ in 0..3 {
        a.step(&x, &y).unwrap();
        b.step(&x, &y).unwrap();
    }
    assert_ne!(a.params(), b.params());
}

#[test]
fn exploding_learning_rate_reports_non_finite_loss() {
    let d = data(2, 15, 16, 0.3, 7);
    let c = TrainConfig { learning_rate: 1e200, ..cfg(0.0, 5) };
    match train(&c, &Architecture::desk(2, 16), &d) {
        Err(Error::NonFiniteLoss { step }) => assert!(step >= 2),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let d = data(2, 5, 16, 0.3, 8);
    let arch = Architecture::desk(2, 16);
    for bad in [
        TrainConfig { learning_rate: 0.0, ..cfg(0.0, 1) },
        TrainConfig { beta: -1.0, ..cfg(0.0, 1) },
        TrainConfig { batch_size: 0, ..cfg(0.0, 1) },
    ] {
        assert!(matches!(train(&bad, &arch, &d), Err(Error::Config(_))), "{bad:?}");
    }
    let no_such_layer = TrainConfig { target_layer: Some(3), ..cfg(0.0, 1) };
    assert!(matches!(train(&no_such_layer, &arch, &d), Err(Error::Architecture(_))));
    let wrong_classes = data(3, 5, 16, 0.3, 8);
    assert!(matches!(train(&cfg(0.0, 1), &arch, &wrong_classes), Err(Error::Config(_))));
}

#[test]
fn callback_sees_every_step() {
    let d = data(2, 15, 16, 0.3, 9);
    // 24 train samples in batches of 8
    let c = TrainConfig { batch_size: 8, ..cfg(0.0, 2) };
    let mut seen = Vec::new();
    train_with(&c, &Architecture::desk(2, 16), &d, |s, _| seen.push(s)).unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
}

#[test]
fn untrained_model_is_near_chance() {
    let d = data(4, 100, 32, 0.3, 10);
    let params = ModelParams::init(&Architecture::desk(4, 32), 11).unwrap();
    let row = evaluate(&params, &d.test, Split::Test, 0).unwrap();
    assert!((row.accuracy - 0.25).abs() <= 0.15, "{row:?}");
}

#[test]
fn evaluation_equals_direct_loop() {
    let d = data(3, 10, 16, 0.3, 12);
    let params = ModelParams::init(&Architecture::desk(3, 16), 13).unwrap();
    let mut ev = Evaluator::new(&params.arch).with_chunk(4);
    let e = ev.evaluate(&params, &d.test).unwrap();
    let row = e.row(0, Split::Test);

    let n = d.test.len() as f64;
    let (mut ce, mut ca, mut cd, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for s in &d.test {
        let x = Tensor::stack(std::slice::from_ref(&s.image)).unwrap();
        let mut trace = forward(&params, &x).unwrap();
        let logits = trace.logits().unwrap();
        correct += usize::from(argmax_rows(&logits)[0] == s.label);
        let m = measure_all(&gradcam_map(&mut trace, s.label, 0).unwrap());
        ce += m.ce;
        ca += m.ca;
        cd += m.cd;
    }
    assert!((row.ce_mean - ce / n).abs() < 1e-10);
    assert!((row.ca_mean - ca / n).abs() < 1e-10);
    assert!((row.cd_mean - cd / n).abs() < 1e-10);
    assert_eq!(row.accuracy, correct as f64 / n);
}

#[test]
fn accuracy_ignores_per_sample_logit_shifts() {
    let logits = Tensor::new(vec![3, 3], vec![0.1, 2.0, -1.0, 5.0, 4.0, 4.5, -3.0, -2.0, -2.5]).unwrap();
    let shifted = Tensor::new(
        vec![3, 3],
        logits.data().iter().enumerate().map(|(i, v)| v + [100.0, -7.5, 0.25][i / 3]).collect(),
    )
    .unwrap();
    assert_eq!(argmax_rows(&logits), vec![1, 0, 1]);
    assert_eq!(argmax_rows(&logits), argmax_rows(&shifted));
}
