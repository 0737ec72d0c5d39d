//! Analysis procedures: expressibility against the Haar ensemble, per-step
//! gradient profiles and norm audits.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ansatz::CircuitLayout;
use crate::error::{Error, Result};
use crate::qrnn::{QrnnModel, Sample};
use crate::statevector::QuantumState;

/// How fidelity samples are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelitySampling {
    /// Each fidelity uses two freshly sampled states.
    Pairs,
    /// Every unordered pair within one pool of this many states.
    Pool(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressibilitySpec {
    pub n_qubits: usize,
    pub pairs: usize,
    pub bins: usize,
    pub seed: u64,
    pub sampling: FidelitySampling,
    pub threads: usize,
}

impl ExpressibilitySpec {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            pairs: 5000,
            bins: 75,
            seed: 0,
            sampling: FidelitySampling::Pairs,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 bins, got {}", self.bins)));
        }
        match self.sampling {
            FidelitySampling::Pairs if self.pairs < 100 => {
                Err(Error::InvalidSpec(format!("need at least 100 pairs, got {}", self.pairs)))
            }
            FidelitySampling::Pool(m) if m * m.saturating_sub(1) / 2 < 100 => {
                Err(Error::InvalidSpec(format!("a pool of {m} states gives fewer than 100 pairs")))
            }
            _ => Ok(()),
        }
    }
}

/// State family whose fidelity distribution is measured.
#[derive(Debug, Clone, Copy)]
pub enum Ensemble<'a> {
    /// The circuit applied to |0..0> with angles uniform on [0, 2pi).
    Circuit(&'a CircuitLayout),
    /// Haar-random states (normalised complex Gaussian vectors).
    Haar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expressibility {
    pub kl: f64,
    pub empirical: Vec<f64>,
    pub haar: Vec<f64>,
}

impl Expressibility {
    /// Columns `bin_lower,empirical_mass,haar_mass`.
    pub fn to_csv(&self) -> String {
        let bins = self.empirical.len();
        let mut out = String::from("bin_lower,empirical_mass,haar_mass\n");
        for (i, (p, q)) in self.empirical.iter().zip(&self.haar).enumerate() {
            out.push_str(&format!("{},{p},{q}\n", i as f64 / bins as f64));
        }
        out
    }
}

/// Density of `|<a|b>|^2` for Haar-random states of `n_qubits`.
pub fn haar_density(fidelity: f64, n_qubits: usize) -> f64 {
    let dim = (1u64 << n_qubits) as f64;
    (dim - 1.0) * (1.0 - fidelity).powf(dim - 2.0)
}

/// Exact Haar probability of each uniform bin on [0, 1].
///
/// Masses too small to represent are raised to the smallest positive
/// double so the reference never vanishes.
pub fn haar_bin_masses(n_qubits: usize, bins: usize) -> Vec<f64> {
    let e = (1u64 << n_qubits) as f64 - 1.0;
    // P(F > x) = (1 - x)^(N - 1)
    let tail = |x: f64| if x >= 1.0 { 0.0 } else { (e * (-x).ln_1p()).exp() };
    (0..bins)
        .map(|i| {
            let a = i as f64 / bins as f64;
            let b = (i + 1) as f64 / bins as f64;
            (tail(a) - tail(b)).max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// `sum p ln(p / q)` with empty bins of `p` contributing nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn bin_index(f: f64, bins: usize) -> usize {
    ((f.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn sample_state(ensemble: Ensemble, n_qubits: usize, rng: &mut ChaCha8Rng) -> Result<QuantumState> {
    match ensemble {
        Ensemble::Circuit(layout) => {
            let theta: Vec<f64> = (0..layout.param_count()).map(|_| rng.gen_range(0.0..TAU)).collect();
            let mut state = QuantumState::zero(n_qubits)?;
            layout.apply(&theta, &mut state)?;
            Ok(state)
        }
        Ensemble::Haar => {
            let mut amps: Vec<Complex64> = (0..1usize << n_qubits)
                .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            for a in &mut amps {
                *a /= norm;
            }
            QuantumState::from_amplitudes(n_qubits, amps)
        }
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_parallel<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Diagnostic(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Samples fidelities, bins them and compares with the Haar reference.
/// Deterministic in `spec.seed` regardless of `spec.threads`.
pub fn expressibility(spec: &ExpressibilitySpec, ensemble: Ensemble) -> Result<Expressibility> {
    spec.validate()?;
    if let Ensemble::Circuit(layout) = ensemble {
        if layout.n_qubits() != spec.n_qubits {
            return Err(Error::InvalidSpec(format!(
                "circuit has {} qubits, spec has {}",
                layout.n_qubits(),
                spec.n_qubits
            )));
        }
    }
    let n = spec.n_qubits;
    let fidelities: Vec<f64> = match spec.sampling {
        FidelitySampling::Pairs => run_parallel(spec.threads, || {
            (0..spec.pairs as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(spec.seed, i);
                    let a = sample_state(ensemble, n, &mut rng)?;
                    let b = sample_state(ensemble, n, &mut rng)?;
                    a.fidelity(&b)
                })
                .collect::<Result<Vec<_>>>()
        })??,
        FidelitySampling::Pool(m) => run_parallel(spec.threads, || {
            let states = (0..m as u64)
                .into_par_iter()
                .map(|i| sample_state(ensemble, n, &mut substream(spec.seed, i)))
                .collect::<Result<Vec<_>>>()?;
            (0..m)
                .into_par_iter()
                .flat_map_iter(|i| (i + 1..m).map(move |j| (i, j)))
                .map(|(i, j)| states[i].fidelity(&states[j]))
                .collect::<Result<Vec<_>>>()
        })??,
    };
    let mut counts = vec![0usize; spec.bins];
    for f in &fidelities {
        counts[bin_index(*f, spec.bins)] += 1;
    }
    let total = fidelities.len() as f64;
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let haar = haar_bin_masses(n, spec.bins);
    Ok(Expressibility {
        kl: kl_divergence(&empirical, &haar),
        empirical,
        haar,
    })
}

/// KL(empirical || Haar) of the circuit's fidelity distribution.
pub fn expressibility_kl(spec: &ExpressibilitySpec, layout: &CircuitLayout) -> Result<f64> {
    Ok(expressibility(spec, Ensemble::Circuit(layout))?.kl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradProfile {
    /// Mean over the batch of `||dL/dz_t||`, one entry per step.
    pub mean_norms: Vec<f64>,
    /// `mean_norms` divided by its last entry.
    pub normalized: Vec<f64>,
    pub batch_size: usize,
}

impl GradProfile {
    /// Columns `t,mean_grad_norm,normalized` with `t` counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_grad_norm,normalized\n");
        for (t, (g, r)) in self.mean_norms.iter().zip(&self.normalized).enumerate() {
            out.push_str(&format!("{},{g},{r}\n", t + 1));
        }
        out
    }
}

fn sample_len(sample: &Sample) -> usize {
    match sample {
        Sample::Classify { tokens, .. } => tokens.len(),
        Sample::Sequence { inputs, .. } => inputs.len(),
        Sample::Pair { source, .. } => source.len(),
    }
}

/// Gradient of each sample's loss with respect to the per-step readouts,
/// averaged over the batch. Without dropout and single-threaded, so
/// repeated calls agree bit for bit.
pub fn grad_profile(model: &QrnnModel, batch: &[Sample]) -> Result<GradProfile> {
    let first = batch.first().ok_or(Error::Empty("gradient profile batch"))?;
    let len = sample_len(first);
    if let Some(bad) = batch.iter().find(|s| sample_len(s) != len) {
        return Err(Error::InvalidSequence(format!(
            "gradient profile needs equal lengths, got {len} and {}",
            sample_len(bad)
        )));
    }
    let mut sums: Vec<f64> = Vec::new();
    for sample in batch {
        let mut f = model.forward(sample, None)?;
        let loss = f.loss.ok_or(Error::Diagnostic("sample produced no loss".into()))?;
        let mut grads = model.params.zero_grads();
        let retained = f.tape.backward_retain(loss, &mut grads, &f.readouts)?;
        if sums.is_empty() {
            sums = vec![0.0; retained.len()];
        }
        for (s, g) in sums.iter_mut().zip(&retained) {
            *s += g.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    let mean_norms: Vec<f64> = sums.iter().map(|s| s / batch.len() as f64).collect();
    let last = *mean_norms.last().ok_or(Error::Empty("recorded steps"))?;
    if !(last > 0.0 && last.is_finite()) {
        return Err(Error::Diagnostic(format!("final-step gradient norm is {last}; cannot normalise")));
    }
    let mut normalized: Vec<f64> = mean_norms.iter().map(|g| g / last).collect();
    *normalized.last_mut().expect("nonempty") = 1.0;
    Ok(GradProfile {
        mean_norms,
        normalized,
        batch_size: batch.len(),
    })
}

/// Largest `| ||h_t||^2 - 1 |` over the unroll of `tokens`.
pub fn norm_audit(model: &QrnnModel, tokens: &[usize]) -> Result<f64> {
    norm_audit_with_hook(model, tokens, |_, _| {})
}

/// [`norm_audit`] with a hook that may alter each state before it is
/// measured; used to check that the audit notices corruption.
pub fn norm_audit_with_hook(
    model: &QrnnModel,
    tokens: &[usize],
    hook: impl FnMut(usize, &mut QuantumState),
) -> Result<f64> {
    Ok(model.norm_trajectory(tokens, hook)?.into_iter().fold(0.0, f64::max))
}

/// Worst disagreement between tape gradients and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Denominator floor of the relative error, so that near-zero gradients
/// are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

fn sample_loss(model: &QrnnModel, sample: &Sample) -> Result<f64> {
    let f = model.forward(sample, None)?;
    let loss = f.loss.ok_or(Error::Diagnostic("sample produced no loss".into()))?;
    Ok(f.tape.value(loss)[0])
}

/// Compares the analytic gradient of `sample`'s loss with central
/// differences of step `h` on every trainable entry (frozen padding rows
/// excluded). Parameters are restored afterwards.
pub fn gradient_check(model: &mut QrnnModel, sample: &Sample, h: f64) -> Result<GradCheck> {
    let mut grads = model.params.zero_grads();
    {
        let mut f = model.forward(sample, None)?;
        let loss = f.loss.ok_or(Error::Diagnostic("sample produced no loss".into()))?;
        f.tape.backward(loss, &mut grads)?;
    }
    let frozen = model.padding_rows();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in 0..model.params.len() {
        let tensor = model.params.get(id);
        if !tensor.requires_grad {
            continue;
        }
        let width = tensor.shape.last().copied().unwrap_or(1).max(1);
        for i in 0..tensor.numel() {
            if frozen.iter().any(|&(t, row)| t == id && i / width == row) {
                continue;
            }
            let orig = model.params.get(id).values[i];
            model.params.get_mut(id).values[i] = orig + h;
            let up = sample_loss(model, sample);
            model.params.get_mut(id).values[i] = orig - h;
            let down = sample_loss(model, sample);
            model.params.get_mut(id).values[i] = orig;
            let fd = (up? - down?) / (2.0 * h);
            let an = grads.get(id)[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(GRADCHECK_FLOOR);
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}]", model.params.get(id).name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{build_ansatz14, build_ry_layer};
    use crate::autograd::{Activation, ActivationKind};
    use crate::qrnn::{QrnnConfig, TaskKind};

    #[test]
    fn haar_masses_sum_to_one() {
        for n in 1..6 {
            let m = haar_bin_masses(n, 75);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.iter().all(|&v| v > 0.0));
        }
        // one qubit: fidelity is uniform
        for v in haar_bin_masses(1, 10) {
            assert!((v - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_conventions() {
        let q = [0.25; 4];
        assert_eq!(kl_divergence(&q, &q), 0.0);
        assert!(kl_divergence(&[0.5, 0.5, 0.0, 0.0], &q) > 0.0);
        assert!((kl_divergence(&[1.0, 0.0, 0.0, 0.0], &q) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let mut s = ExpressibilitySpec::new(2);
        s.bins = 1;
        assert!(s.validate().is_err());
        s.bins = 2;
        s.pairs = 99;
        assert!(s.validate().is_err());
        s.sampling = FidelitySampling::Pool(14);
        assert!(s.validate().is_err());
        s.sampling = FidelitySampling::Pool(15);
        assert!(s.validate().is_ok());
        let layout = build_ansatz14(3).unwrap();
        assert!(expressibility_kl(&ExpressibilitySpec::new(2), &layout).is_err());
    }

    #[test]
    fn idle_circuit_fills_top_bin() {
        let idle = CircuitLayout::new(3, vec![]).unwrap();
        let mut spec = ExpressibilitySpec::new(3);
        spec.pairs = 200;
        let e = expressibility(&spec, Ensemble::Circuit(&idle)).unwrap();
        assert_eq!(e.empirical[74], 1.0);
        assert!((e.kl + e.haar[74].ln()).abs() < 1e-12);
        let a14 = expressibility_kl(&spec, &build_ansatz14(3).unwrap()).unwrap();
        assert!(e.kl > a14);
    }

    #[test]
    fn thread_count_and_pool_mode() {
        let layout = build_ry_layer(2).unwrap();
        let mut spec = ExpressibilitySpec::new(2);
        spec.pairs = 300;
        let one = expressibility(&spec, Ensemble::Circuit(&layout)).unwrap();
        spec.threads = 3;
        assert_eq!(expressibility(&spec, Ensemble::Circuit(&layout)).unwrap(), one);
        spec.sampling = FidelitySampling::Pool(40);
        let pool = expressibility(&spec, Ensemble::Haar).unwrap();
        assert!((pool.empirical.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pool.to_csv().starts_with("bin_lower,empirical_mass,haar_mass\n0,"));
    }

    fn copy_model() -> QrnnModel {
        let mut c = QrnnConfig::new(TaskKind::Copy, 3, 4, 5, Activation::new(ActivationKind::LeakyRelu));
        c.vocab_size = 10;
        c.transform_width = 9;
        QrnnModel::new(c, 3).unwrap()
    }

    #[test]
    fn profile_normalises_to_last_step() {
        let model = copy_model();
        let spec = crate::tasks::CopyTaskSpec {
            train_count: 3,
            test_count: 1,
            ..crate::tasks::CopyTaskSpec::new(6, 2)
        };
        let (train, _) = crate::tasks::gen_copy_dataset(&spec).unwrap();
        let batch = crate::tasks::copy_samples(&train, 2);
        let p = grad_profile(&model, &batch).unwrap();
        assert_eq!(p.mean_norms.len(), 10);
        assert_eq!(*p.normalized.last().unwrap(), 1.0);
        assert!(p.normalized.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(grad_profile(&model, &batch).unwrap(), p);
        let csv = p.to_csv();
        assert!(csv.starts_with("t,mean_grad_norm,normalized\n1,"));
        assert_eq!(csv.lines().count(), 11);

        let mut mixed = batch.clone();
        mixed.push(Sample::Sequence {
            inputs: vec![1, 2, 0, 9, 9, 9],
            targets: vec![0, 0, 0, 0, 1, 2],
            scored_from: 4,
        });
        assert!(matches!(grad_profile(&model, &mixed), Err(Error::InvalidSequence(_))));
        assert!(grad_profile(&model, &[]).is_err());
    }

    #[test]
    fn audit_detects_corruption() {
        let model = copy_model();
        assert!(norm_audit(&model, &[1]).unwrap() < 1e-12);
        assert!(norm_audit(&model, &[1, 2, 3, 0, 9, 9]).unwrap() < 1e-12);
        let bad = norm_audit_with_hook(&model, &[1, 2, 3], |t, s| {
            if t == 1 {
                s.amplitudes_mut()[0] *= 1.01;
            }
        })
        .unwrap();
        assert!(bad > 1e-6);
    }

    #[test]
    fn gradient_check_agrees() {
        let mut model = copy_model();
        let before = model.clone();
        let sample = Sample::Sequence {
            inputs: vec![4, 5, 0, 9, 9, 9],
            targets: vec![0, 0, 0, 0, 4, 5],
            scored_from: 4,
        };
        let r = gradient_check(&mut model, &sample, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.checked, model.params.numel());
        assert_eq!(model, before);
    }
}
