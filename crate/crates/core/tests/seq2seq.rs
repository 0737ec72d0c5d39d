use qrnn_core::config::RunConfig;
use qrnn_core::qrnn::{QrnnModel, Sample};
use qrnn_core::training::Trainer;
use qrnn_core::Error;

fn model(extra: &str) -> QrnnModel {
    let text = format!(
        "task = seq2seq\nn_qubits = 3\nembed_dim = 4\nhidden = 6\nattention_dim = 5\nvocab_size = 9\ntarget_vocab_size = 8\npad_token = 0\n{extra}"
    );
    RunConfig::parse(&text).unwrap().build_model().unwrap()
}

#[test]
fn attention_rows_are_distributions_over_unmasked_source() {
    let m = model("");
    let out = m.run_seq2seq(&[4, 5, 6, 0, 0], Some(&[4, 5, 3]), 0).unwrap();
    assert_eq!(out.attention.len(), 3);
    assert_eq!(out.logits.len(), 3);
    for row in &out.attention {
        assert_eq!(row.len(), 5);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&row[3..], &[0.0, 0.0]);
        assert!(row[..3].iter().all(|w| *w > 0.0));
    }
}

#[test]
fn single_token_source_attends_fully() {
    let m = model("");
    let out = m.run_seq2seq(&[7], None, 6).unwrap();
    assert!(!out.attention.is_empty());
    for row in &out.attention {
        assert_eq!(row, &vec![1.0]);
    }
}

#[test]
fn decoding_errors() {
    let m = model("max_decode_len = 4\n");
    assert!(matches!(m.run_seq2seq(&[], None, 2), Err(Error::Empty(_))));
    assert!(matches!(m.run_seq2seq(&[4], None, 5), Err(Error::InvalidSpec(_))));
    assert!(matches!(m.run_seq2seq(&[4], None, 0), Err(Error::InvalidSpec(_))));
    let out = m.run_seq2seq(&[4, 5], None, 4).unwrap();
    assert!(out.tokens.len() <= 4);
    assert!(!out.tokens.contains(&3));
}

#[test]
fn variants_change_parameters_or_outputs() {
    let separate = model("");
    let shared = model("share_controller = true\n");
    assert!(shared.params.numel() < separate.params.numel());
    assert!(shared.params.id("decoder.hidden.weight").is_none());

    let cont = separate.run_seq2seq(&[4, 5, 6], Some(&[4, 3]), 0).unwrap();
    let reset = model("decoder_state = reset\n").run_seq2seq(&[4, 5, 6], Some(&[4, 3]), 0).unwrap();
    assert_ne!(cont.logits, reset.logits);
    let transformed = model("encoder_memory = transformed\n");
    // feedback and readout widths are both 9 here
    assert_eq!(transformed.params.numel(), separate.params.numel());
    assert_ne!(transformed.run_seq2seq(&[4, 5, 6], Some(&[4, 3]), 0).unwrap().logits, cont.logits);
}

#[test]
fn echo_language_is_learned() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/echo.cfg");
    let mut cfg = RunConfig::from_file(path).unwrap();
    let data = cfg.task_data().unwrap();
    cfg.resolve(&data).unwrap();
    let mut trainer = Trainer::new(cfg.build_model().unwrap(), cfg.train_config()).unwrap();
    let mut accuracy = 0.0;
    for _ in 0..cfg.usize("epochs") {
        trainer.train_epoch(&data.train).unwrap();
        accuracy = trainer.evaluate(&data.test, "test").unwrap().metric;
        if accuracy > 0.95 {
            break;
        }
    }
    assert!(accuracy > 0.95, "token accuracy {accuracy}");
    // greedy decoding reproduces most sources
    let exact = data
        .test
        .iter()
        .filter(|s| {
            let Sample::Pair { source, .. } = s else { unreachable!() };
            trainer.model.run_seq2seq(source, None, source.len() + 1).unwrap().tokens == *source
        })
        .count();
    assert!(exact as f64 > 0.5 * data.test.len() as f64, "{exact} exact copies");
}
