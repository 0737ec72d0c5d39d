use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrnn_core::ansatz::{build_ansatz14_layers, build_ry_layer, CircuitLayout};
use qrnn_core::config::{keys_help, load_trained, RunConfig};
use qrnn_core::diagnostics::{
    expressibility, grad_profile, gradient_check, norm_audit, Ensemble, ExpressibilitySpec,
};
use qrnn_core::qrnn::{QrnnModel, Sample, TaskKind};
use qrnn_core::tasks::{self, COPY_VOCAB};
use qrnn_core::training::{append_metrics, metric_name, save_checkpoint, AdamState, Trainer};
use qrnn_core::{Error, Result};

const RESOLVED_CONFIG: &str = "config.resolved.cfg";
const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Quantum recurrent network toolkit.
#[derive(Parser)]
#[command(name = "qrnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the configured dataset and write its splits.
    GenData(Common),
    /// Train a model; writes a checkpoint and metrics CSV.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Fidelity-distribution KL divergence from the Haar ensemble.
    Expressibility(Common),
    /// Per-step readout gradient norms of a checkpoint.
    Gradprofile(Common),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(Common),
    /// Largest deviation of the state norm from 1 along an unroll.
    NormAudit(Common),
    /// Parameter-count report.
    Info(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable; applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set n_qubits=N.
    #[arg(long)]
    n_qubits: Option<usize>,
    /// Shorthand for --set data_dir=DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to read (eval, gradprofile, norm-audit, info) or resume from (train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(n) = self.n_qubits {
            cfg.set("n_qubits", &n.to_string())?;
        }
        if let Some(dir) = &self.data {
            cfg.set("data_dir", &dir.to_string_lossy())?;
        }
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint is required for this command".into()))
    }

    /// Model from `--checkpoint` if given, else freshly initialised.
    fn model(&self) -> Result<(RunConfig, QrnnModel)> {
        match &self.checkpoint {
            Some(path) => {
                let (base, model, _) = load_trained(path)?;
                let cfg = self.resolve(Some(base))?;
                if cfg.model_config()? != *model.config() {
                    return Err(Error::Config("overrides change the checkpoint's model shape".into()));
                }
                Ok((cfg, model))
            }
            None => {
                let mut cfg = self.resolve(None)?;
                let data = cfg.task_data()?;
                cfg.resolve(&data)?;
                let model = cfg.build_model()?;
                Ok((cfg, model))
            }
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    write(&out.join(RESOLVED_CONFIG), &cfg.to_text())
}

fn gen_data(args: &Common) -> Result<()> {
    let mut cfg = args.resolve(None)?;
    let out = args.out_dir()?;
    let data = cfg.task_data()?;
    cfg.resolve(&data)?;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        tasks::write_split(out, split, &to_seq_data(samples))?;
    }
    tasks::write_manifest(
        out,
        &[
            ("task", cfg.task().to_string()),
            ("train", data.train.len().to_string()),
            ("test", data.test.len().to_string()),
            ("vocab_size", data.vocab_size.to_string()),
            ("target_vocab_size", data.target_vocab_size.to_string()),
            ("data_seed", cfg.get("data_seed").to_string()),
        ],
    )?;
    write_snapshot(out, &cfg)?;
    eprintln!("wrote {} train / {} test samples to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

fn to_seq_data(samples: &[Sample]) -> tasks::SeqData {
    let mut d = tasks::SeqData::default();
    for s in samples {
        let (i, t) = match s {
            Sample::Classify { tokens, label } => (tokens.clone(), vec![*label]),
            Sample::Sequence { inputs, targets, .. } => (inputs.clone(), targets.clone()),
            Sample::Pair { source, target } => (source.clone(), target.clone()),
        };
        d.inputs.push(i);
        d.targets.push(t);
    }
    d
}

fn train(args: &Common) -> Result<()> {
    let mut cfg = args.resolve(None)?;
    let data = cfg.task_data()?;
    cfg.resolve(&data)?;
    let out = args.out_dir()?;
    let (model, adam) = match &args.checkpoint {
        Some(path) => {
            let (_, model, adam) = load_trained(path)?;
            if cfg.model_config()? != *model.config() {
                return Err(Error::Config(format!(
                    "configuration does not match the model stored in {}",
                    path.display()
                )));
            }
            (model, adam)
        }
        None => {
            let model = cfg.build_model()?;
            let adam = AdamState::new(&model.params);
            (model, adam)
        }
    };
    write_snapshot(out, &cfg)?;
    let tc = cfg.train_config();
    let epochs = tc.epochs;
    let eval_every = cfg.usize("eval_every");
    let metrics_path = out.join("metrics.csv");
    let ck_path = out.join("checkpoint.bin");
    let text = cfg.to_text();
    let mut trainer = Trainer::resume(model, adam, tc, 0)?;
    let label = metric_name(cfg.task());
    let started = Instant::now();
    for epoch in 1..=epochs {
        let m = trainer.train_epoch(&data.train)?;
        append_metrics(&metrics_path, &m)?;
        let mut line = format!("epoch {epoch}/{epochs} train loss {:.5} {label} {:.4}", m.loss, m.metric);
        let due = eval_every > 0 && epoch % eval_every == 0;
        if !data.test.is_empty() && (due || epoch == epochs) {
            let e = trainer.evaluate(&data.test, "test")?;
            append_metrics(&metrics_path, &e)?;
            line.push_str(&format!(" | test loss {:.5} {label} {:.4}", e.loss, e.metric));
        }
        eprintln!("{line} ({:.1}s)", started.elapsed().as_secs_f64());
        save_checkpoint(&ck_path, &text, &trainer.model.params, &trainer.adam)?;
    }
    if epochs == 0 {
        save_checkpoint(&ck_path, &text, &trainer.model.params, &trainer.adam)?;
    }
    println!("{}", ck_path.display());
    Ok(())
}

fn eval(args: &Common) -> Result<()> {
    let path = args.checkpoint()?;
    let (base, model, _) = load_trained(path)?;
    let cfg = args.resolve(Some(base))?;
    let data = cfg.task_data()?;
    let m = qrnn_core::training::evaluate(&model, &data.test, "test")?;
    println!("loss {} {} {}", m.loss, metric_name(cfg.task()), m.metric);
    append_metrics(args.out_dir()?.join("eval.csv"), &m)?;
    Ok(())
}

fn expressibility_cmd(args: &Common) -> Result<()> {
    let cfg = args.resolve(None)?;
    let n = cfg.usize("n_qubits");
    let spec = ExpressibilitySpec {
        pairs: cfg.usize("expr_pairs"),
        bins: cfg.usize("expr_bins"),
        seed: cfg.u64("seed"),
        threads: cfg.usize("threads"),
        ..ExpressibilitySpec::new(n)
    };
    let circuit = cfg.get("expr_circuit");
    let layout: Option<CircuitLayout> = match circuit {
        "ansatz14" => Some(build_ansatz14_layers(n, cfg.usize("depth"))?),
        "ry" => Some(build_ry_layer(n)?),
        "idle" => Some(CircuitLayout::new(n, Vec::new())?),
        _ => None,
    };
    let ensemble = layout.as_ref().map_or(Ensemble::Haar, Ensemble::Circuit);
    let result = expressibility(&spec, ensemble)?;
    let out = args.out_dir()?;
    write(&out.join("expressibility.csv"), &result.to_csv())?;
    write_snapshot(out, &cfg)?;
    println!("{}", result.kl);
    eprintln!("{circuit}, {n} qubits, {} pairs, {} bins", spec.pairs, spec.bins);
    Ok(())
}

fn gradprofile(args: &Common) -> Result<()> {
    let path = args.checkpoint()?;
    let (base, model, _) = load_trained(path)?;
    let mut cfg = args.resolve(Some(base))?;
    let batch_size = cfg.usize("profile_batch");
    let batch: Vec<Sample> = if cfg.task() == TaskKind::Copy {
        cfg.set("copy_t", &cfg.usize("profile_t").to_string())?;
        cfg.set("train_count", "0")?;
        cfg.set("test_count", &batch_size.to_string())?;
        cfg.task_data()?.test
    } else {
        let data = cfg.task_data()?;
        let first = data.test.first().ok_or(Error::Empty("test split"))?;
        let len = seq_len(first);
        data.test.iter().filter(|s| seq_len(s) == len).take(batch_size).cloned().collect()
    };
    let profile = grad_profile(&model, &batch)?;
    let out = args.out_dir()?;
    write(&out.join("gradprofile.csv"), &profile.to_csv())?;
    write_snapshot(out, &cfg)?;
    println!("{}", profile.normalized[0]);
    eprintln!("{} steps, batch {}", profile.normalized.len(), profile.batch_size);
    Ok(())
}

fn seq_len(s: &Sample) -> usize {
    match s {
        Sample::Classify { tokens, .. } => tokens.len(),
        Sample::Sequence { inputs, .. } => inputs.len(),
        Sample::Pair { source, .. } => source.len(),
    }
}

/// A random sample of `len` input steps for the configured task.
fn random_sample(cfg: &RunConfig, len: usize, rng: &mut ChaCha8Rng) -> Sample {
    let vocab = cfg.opt_usize("vocab_size").unwrap_or(COPY_VOCAB);
    let mut draw = |v: usize, n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..v)).collect() };
    match cfg.task() {
        TaskKind::Classify => {
            let tokens = draw(vocab, len);
            let label = draw(cfg.usize("n_classes"), 1)[0];
            Sample::Classify { tokens, label }
        }
        TaskKind::Lm | TaskKind::Copy => Sample::Sequence {
            inputs: draw(vocab, len),
            targets: draw(vocab, len),
            scored_from: 0,
        },
        TaskKind::Seq2seq => {
            let target_vocab = cfg.opt_usize("target_vocab_size").unwrap_or(vocab);
            Sample::Pair {
                source: draw(vocab, len),
                target: draw(target_vocab, len),
            }
        }
    }
}

fn gradcheck(args: &Common) -> Result<bool> {
    let (cfg, mut model) = args.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("seed"));
    let sample = random_sample(&cfg, cfg.usize("gradcheck_t"), &mut rng);
    let report = gradient_check(&mut model, &sample, 1e-5)?;
    println!("{:e}", report.max_rel_error);
    eprintln!("{} entries checked, worst at {}", report.checked, report.worst);
    Ok(report.max_rel_error < GRADCHECK_TOLERANCE)
}

fn norm_audit_cmd(args: &Common) -> Result<()> {
    let (cfg, model) = args.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("seed"));
    let tokens = match random_sample(&cfg, cfg.usize("audit_t"), &mut rng) {
        Sample::Classify { tokens, .. } => tokens,
        Sample::Sequence { inputs, .. } => inputs,
        Sample::Pair { source, .. } => source,
    };
    println!("{:e}", norm_audit(&model, &tokens)?);
    Ok(())
}

fn info(args: &Common) -> Result<()> {
    let (cfg, model) = args.model()?;
    print!("{}", model.param_report().to_text());
    println!(
        "circuit: {} qubits, depth {}, {} angles per step, readout width {}",
        cfg.usize("n_qubits"),
        cfg.usize("depth"),
        model.layout().param_count(),
        model.layout().readout_width()
    );
    Ok(())
}

fn run(command: &Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Expressibility(a) => expressibility_cmd(a)?,
        Command::Gradprofile(a) => gradprofile(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck(a)? {
                eprintln!("ERROR 2: gradient check exceeded {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::NormAudit(a) => norm_audit_cmd(a)?,
        Command::Info(a) => info(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let help = keys_help();
    let command = Cli::command().mut_subcommands(|s| s.after_help(help.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("ERROR 1: {}", e.render().to_string().trim_end());
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ERROR 1: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            eprintln!("ERROR {code}: {e}");
            ExitCode::from(code)
        }
    }
}
