//! The recurrent-core circuit: a fixed layout of parametrized RY and CRX
//! gates, its action on a state, the Pauli readout, and exact gradients by
//! a reverse (adjoint) sweep.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};
use crate::statevector::{
    apply_rx, apply_ry, for_each_pair2, qubit_expectations, QuantumState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    Ry,
    Crx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateOp {
    pub kind: GateKind,
    pub target: usize,
    /// Present iff `kind == Crx`.
    pub control: Option<usize>,
    pub param: usize,
}

impl GateOp {
    pub fn ry(target: usize, param: usize) -> Self {
        Self {
            kind: GateKind::Ry,
            target,
            control: None,
            param,
        }
    }

    pub fn crx(control: usize, target: usize, param: usize) -> Self {
        Self {
            kind: GateKind::Crx,
            target,
            control: Some(control),
            param,
        }
    }
}

impl fmt::Display for GateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.control) {
            (GateKind::Ry, _) => write!(f, "RY q={} p={}", self.target, self.param),
            (GateKind::Crx, Some(c)) => write!(f, "CRX c={} t={} p={}", c, self.target, self.param),
            (GateKind::Crx, None) => write!(f, "CRX c=? t={} p={}", self.target, self.param),
        }
    }
}

impl FromStr for GateOp {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Layout(format!("cannot parse gate line `{line}`"));
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let mut fields = std::collections::HashMap::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let v: usize = v.parse().map_err(|_| bad())?;
            if fields.insert(k, v).is_some() {
                return Err(bad());
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        match kind {
            "RY" if fields.len() == 2 => Ok(GateOp::ry(get("q")?, get("p")?)),
            "CRX" if fields.len() == 3 => Ok(GateOp::crx(get("c")?, get("t")?, get("p")?)),
            _ => Err(bad()),
        }
    }
}

/// An ordered gate list acting on `n_qubits`, reading angles from a
/// parameter vector of length `param_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitLayout {
    n_qubits: usize,
    ops: Vec<GateOp>,
    param_count: usize,
}

impl CircuitLayout {
    /// Validates that every op addresses valid, distinct wires and that the
    /// parameter indices are exactly `0..param_count`, each used once.
    pub fn new(n_qubits: usize, ops: Vec<GateOp>) -> Result<Self> {
        if n_qubits == 0 || n_qubits > crate::statevector::MAX_QUBITS {
            return Err(Error::QubitCount(n_qubits));
        }
        let param_count = ops.len();
        let mut seen = vec![false; param_count];
        for op in &ops {
            if op.target >= n_qubits {
                return Err(Error::Layout(format!("{op}: target out of range")));
            }
            match (op.kind, op.control) {
                (GateKind::Ry, Some(_)) => {
                    return Err(Error::Layout(format!("{op}: RY cannot have a control")))
                }
                (GateKind::Crx, None) => {
                    return Err(Error::Layout(format!("{op}: CRX needs a control")))
                }
                (GateKind::Crx, Some(c)) if c >= n_qubits || c == op.target => {
                    return Err(Error::Layout(format!("{op}: bad control wire")))
                }
                _ => {}
            }
            if op.param >= param_count || std::mem::replace(&mut seen[op.param], true) {
                return Err(Error::Layout(format!(
                    "{op}: parameter index must be unique and below {param_count}"
                )));
            }
        }
        Ok(Self {
            n_qubits,
            ops,
            param_count,
        })
    }

    #[inline]
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    #[inline]
    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    #[inline]
    pub fn readout_width(&self) -> usize {
        3 * self.n_qubits
    }

    /// One `GateOp` per line in the `RY q=0 p=0` / `CRX c=3 t=0 p=4` format.
    pub fn to_text(&self) -> String {
        let mut out = format!("# qubits={}\n", self.n_qubits);
        for op in &self.ops {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_qubits = None;
        let mut ops = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("qubits=") {
                    n_qubits = Some(
                        v.parse()
                            .map_err(|_| Error::Layout(format!("bad header `{line}`")))?,
                    );
                }
                continue;
            }
            ops.push(line.parse()?);
        }
        let n = n_qubits.ok_or_else(|| Error::Layout("missing `# qubits=N` header".into()))?;
        Self::new(n, ops)
    }

    fn check(&self, theta: &[f64], state: &QuantumState) -> Result<()> {
        check_dim("theta length", self.param_count, theta.len())?;
        check_dim("state qubit count", self.n_qubits, state.n_qubits())
    }

    /// `state <- U(theta) state`, gates applied in list order.
    pub fn apply(&self, theta: &[f64], state: &mut QuantumState) -> Result<()> {
        self.check(theta, state)?;
        let amps = state.amplitudes_mut();
        for op in &self.ops {
            let (s, c) = (theta[op.param] / 2.0).sin_cos();
            apply_gate(amps, op, c, s);
        }
        Ok(())
    }

    /// `state <- U(theta)^dagger state`.
    pub fn apply_inverse(&self, theta: &[f64], state: &mut QuantumState) -> Result<()> {
        self.check(theta, state)?;
        let amps = state.amplitudes_mut();
        for op in self.ops.iter().rev() {
            let (s, c) = (theta[op.param] / 2.0).sin_cos();
            apply_gate(amps, op, c, -s);
        }
        Ok(())
    }

    /// Gradients of `L = sum_j readout_cotangent[j] * readout_j(U(theta) state_in)`.
    pub fn adjoint_backward(
        &self,
        theta: &[f64],
        state_in: &QuantumState,
        readout_cotangent: &[f64],
    ) -> Result<AdjointGradients> {
        let mut out = state_in.clone();
        self.apply(theta, &mut out)?;
        let mut lambda = vec![Complex64::new(0.0, 0.0); out.dim()];
        accumulate_readout_cotangent(&out, readout_cotangent, &mut lambda)?;
        self.adjoint_sweep(theta, &out, lambda)
    }

    /// Reverse sweep from the circuit output.
    ///
    /// `state_cotangent` holds `dL/dRe(psi_out) + i dL/dIm(psi_out)` for the
    /// output state. The sweep un-applies one gate at a time, so memory stays
    /// at two state buffers regardless of circuit length. The returned state
    /// cotangent uses the same convention for the input amplitudes.
    pub fn adjoint_sweep(
        &self,
        theta: &[f64],
        state_out: &QuantumState,
        state_cotangent: Vec<Complex64>,
    ) -> Result<AdjointGradients> {
        self.check(theta, state_out)?;
        check_dim("state cotangent length", state_out.dim(), state_cotangent.len())?;
        let mut phi = state_out.amplitudes().to_vec();
        let mut lambda = state_cotangent;
        let mut grad = vec![0.0; self.param_count];
        for op in self.ops.iter().rev() {
            let (s, c) = (theta[op.param] / 2.0).sin_cos();
            grad[op.param] = reverse_gate(&mut phi, &mut lambda, op, c, s);
        }
        Ok(AdjointGradients {
            theta: grad,
            state_in: lambda,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradients {
    pub theta: Vec<f64>,
    /// `dL/dRe(psi_in) + i dL/dIm(psi_in)`.
    pub state_in: Vec<Complex64>,
}

/// The ansatz-14 layout with `depth` repetitions of the four-block layer.
pub fn build_ansatz14_layers(n_qubits: usize, depth: usize) -> Result<CircuitLayout> {
    if n_qubits < 2 {
        return Err(Error::Layout(format!(
            "ansatz-14 needs at least 2 qubits for its CRX rings, got {n_qubits}"
        )));
    }
    if depth == 0 {
        return Err(Error::Layout("depth must be at least 1".into()));
    }
    let n = n_qubits;
    let mut ops = Vec::with_capacity(4 * n * depth);
    for layer in 0..depth {
        let base = layer * 4 * n;
        ops.extend((0..n).map(|q| GateOp::ry(q, base + q)));
        ops.extend(
            (0..n)
                .rev()
                .enumerate()
                .map(|(i, k)| GateOp::crx(k, (k + 1) % n, base + n + i)),
        );
        ops.extend((0..n).map(|q| GateOp::ry(q, base + 2 * n + q)));
        ops.extend((0..n).map(|k| GateOp::crx(k, (k + n - 1) % n, base + 3 * n + k)));
    }
    CircuitLayout::new(n, ops)
}

pub fn build_ansatz14(n_qubits: usize) -> Result<CircuitLayout> {
    build_ansatz14_layers(n_qubits, 1)
}

/// A single RY on every qubit; the low-expressibility reference circuit.
pub fn build_ry_layer(n_qubits: usize) -> Result<CircuitLayout> {
    CircuitLayout::new(n_qubits, (0..n_qubits).map(|q| GateOp::ry(q, q)).collect())
}

/// `(<X_1>, <Y_1>, <Z_1>, ..., <X_n>, <Y_n>, <Z_n>)`.
pub fn readout(state: &QuantumState) -> Vec<f64> {
    let mut out = vec![0.0; 3 * state.n_qubits()];
    readout_into(state, &mut out);
    out
}

pub fn readout_into(state: &QuantumState, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 3 * state.n_qubits());
    for (q, chunk) in out.chunks_exact_mut(3).enumerate() {
        chunk.copy_from_slice(&qubit_expectations(state.amplitudes(), q));
    }
}

/// `lambda += 2 sum_j c_j P_j psi`, the state cotangent of a linear
/// functional of the readout.
pub fn accumulate_readout_cotangent(
    state: &QuantumState,
    readout_cotangent: &[f64],
    lambda: &mut [Complex64],
) -> Result<()> {
    check_dim("readout cotangent length", 3 * state.n_qubits(), readout_cotangent.len())?;
    check_dim("state cotangent length", state.dim(), lambda.len())?;
    let mut psi = state.amplitudes().to_vec();
    for (q, c) in readout_cotangent.chunks_exact(3).enumerate() {
        let (cx, cy, cz) = (2.0 * c[0], 2.0 * c[1], 2.0 * c[2]);
        if cx == 0.0 && cy == 0.0 && cz == 0.0 {
            continue;
        }
        for_each_pair2(&mut psi, lambda, q, None, |a, b, la, lb| {
            // X psi = (b, a); Y psi = (-i b, i a); Z psi = (a, -b)
            *la += Complex64::new(cx * b.re + cy * b.im + cz * a.re, cx * b.im - cy * b.re + cz * a.im);
            *lb += Complex64::new(cx * a.re - cy * a.im - cz * b.re, cx * a.im + cy * a.re - cz * b.im);
        });
    }
    Ok(())
}

#[inline]
fn apply_gate(amps: &mut [Complex64], op: &GateOp, c: f64, s: f64) {
    match op.kind {
        GateKind::Ry => apply_ry(amps, c, s, op.target, None),
        GateKind::Crx => apply_rx(amps, c, s, op.target, op.control),
    }
}

/// Un-applies one gate from `phi` and pulls `lambda` back through it,
/// returning `Re <lambda_after | dG/dtheta | phi_before>`.
#[inline]
fn reverse_gate(phi: &mut [Complex64], lambda: &mut [Complex64], op: &GateOp, c: f64, s: f64) -> f64 {
    let (hc, hs) = (0.5 * c, 0.5 * s);
    let mut acc = 0.0;
    match op.kind {
        GateKind::Ry => {
            for_each_pair2(phi, lambda, op.target, None, |p0, p1, l0, l1| {
                // RY^dagger = [[c, s], [-s, c]]
                let (a, b) = (*p0, *p1);
                let (x, y) = (c * a + s * b, c * b - s * a);
                *p0 = x;
                *p1 = y;
                // dRY = 0.5 [[-s, -c], [c, -s]]
                let d0 = -hs * x - hc * y;
                let d1 = hc * x - hs * y;
                let (la, lb) = (*l0, *l1);
                acc += la.re * d0.re + la.im * d0.im + lb.re * d1.re + lb.im * d1.im;
                *l0 = c * la + s * lb;
                *l1 = c * lb - s * la;
            });
        }
        GateKind::Crx => {
            for_each_pair2(phi, lambda, op.target, op.control, |p0, p1, l0, l1| {
                // RX^dagger = [[c, i s], [i s, c]]
                let (a, b) = (*p0, *p1);
                let x = Complex64::new(c * a.re - s * b.im, c * a.im + s * b.re);
                let y = Complex64::new(c * b.re - s * a.im, c * b.im + s * a.re);
                *p0 = x;
                *p1 = y;
                // dRX = 0.5 [[-s, -i c], [-i c, -s]]
                let d0 = Complex64::new(-hs * x.re + hc * y.im, -hs * x.im - hc * y.re);
                let d1 = Complex64::new(-hs * y.re + hc * x.im, -hs * y.im - hc * x.re);
                let (la, lb) = (*l0, *l1);
                acc += la.re * d0.re + la.im * d0.im + lb.re * d1.re + lb.im * d1.im;
                *l0 = Complex64::new(c * la.re - s * lb.im, c * la.im + s * lb.re);
                *l1 = Complex64::new(c * lb.re - s * la.im, c * lb.im + s * la.re);
            });
        }
    }
    acc
}
