use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrnn_core::ansatz::readout;
use qrnn_core::config::RunConfig;
use qrnn_core::diagnostics::norm_audit;
use qrnn_core::qrnn::Sample;
use qrnn_core::tasks::{self, CopyTaskSpec};
use qrnn_core::training::Trainer;

#[test]
fn norm_holds_over_400_steps_at_14_qubits() {
    let cfg = RunConfig::parse("task = classify\nn_qubits = 14\nhidden = 8\nembed_dim = 4\nvocab_size = 20\nseed = 2\n").unwrap();
    let model = cfg.build_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens: Vec<usize> = (0..400).map(|_| rng.gen_range(0..20)).collect();
    let mut readouts_stable = true;
    let worst = model
        .norm_trajectory(&tokens, |_, state| {
            readouts_stable &= readout(state) == readout(state);
        })
        .unwrap()
        .into_iter()
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
    assert!(readouts_stable);
    assert!(norm_audit(&model, &tokens[..1]).unwrap() < 1e-12);
}

#[test]
fn first_angles_receive_gradient_over_100_steps() {
    let cfg = RunConfig::parse("task = copy\nn_qubits = 6\nhidden = 8\nembed_dim = 4\nvocab_size = 10\n").unwrap();
    let model = cfg.build_model().unwrap();
    let spec = CopyTaskSpec {
        train_count: 1,
        test_count: 0,
        ..CopyTaskSpec::new(80, 10)
    };
    let (data, _) = tasks::gen_copy_dataset(&spec).unwrap();
    let sample = tasks::copy_samples(&data, 10).remove(0);
    let mut f = model.forward(&sample, None).unwrap();
    assert_eq!(f.thetas.len(), 100);
    let loss = f.loss.unwrap();
    let mut grads = model.params.zero_grads();
    let first = f.thetas[0];
    let g = f.tape.backward_retain(loss, &mut grads, &[first]).unwrap();
    let norm = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0 && norm.is_finite(), "{norm}");
}

#[test]
fn padding_rows_stay_zero_through_training() {
    let mut cfg = RunConfig::parse(
        "task = classify\nn_qubits = 3\nhidden = 5\nembed_dim = 3\nvocab_size = 6\npad_token = 0\nbatch_size = 4\nepochs = 3\ndropout = 0.2\nweight_decay = 0.01\n",
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train: Vec<Sample> = (0..24)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..6)).collect();
            tokens.extend(std::iter::repeat(0).take(6 - len));
            let label = tokens.iter().filter(|&&t| t > 3).count() % 2;
            Sample::Classify { tokens, label }
        })
        .collect();
    cfg.set("n_classes", "2").unwrap();
    let model = cfg.build_model().unwrap();
    let table = model.params.id("token.embedding").unwrap();
    let width = model.params.get(table).shape[1];
    let mut trainer = Trainer::new(model, cfg.train_config()).unwrap();
    let before = trainer.model.params.get(table).values.clone();
    for _ in 0..3 {
        trainer.train_epoch(&train).unwrap();
    }
    let after = &trainer.model.params.get(table).values;
    assert!(after[..width].iter().all(|&v| v == 0.0));
    assert_ne!(&after[width..], &before[width..]);
}

#[test]
fn trailing_padding_does_not_change_the_prediction() {
    let cfg = RunConfig::parse("task = classify\nn_qubits = 3\nhidden = 5\nembed_dim = 3\nvocab_size = 6\npad_token = 0\n").unwrap();
    let model = cfg.build_model().unwrap();
    let (a, ta) = model.run_classifier(&[3, 1, 4]).unwrap();
    let (b, tb) = model.run_classifier(&[3, 1, 4, 0, 0, 0]).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.len(), 3);
    assert_eq!(tb.len(), 3);
}
