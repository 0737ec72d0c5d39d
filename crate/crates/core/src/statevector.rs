//! Dense statevector simulation.
//!
//! Amplitudes use little-endian basis ordering: bit `k` of a basis index is
//! the value of qubit `k`. Gates are applied in place over amplitude pairs
//! separated by a stride of `2^target`; no operator matrix is ever built.

use std::fmt;

use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};

/// Largest register accepted by [`QuantumState::zero`] (16 MiB of amplitudes).
pub const MAX_QUBITS: usize = 20;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PauliAxis {
    X,
    Y,
    Z,
}

/// A pure state of `n_qubits` qubits.
#[derive(Clone, PartialEq)]
pub struct QuantumState {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl fmt::Debug for QuantumState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantumState")
            .field("n_qubits", &self.n_qubits)
            .field("norm_sqr", &self.norm_sqr())
            .finish()
    }
}

impl QuantumState {
    /// The all-zero basis state `|0...0>`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::QubitCount(n_qubits));
        }
        let mut amps = vec![ZERO; 1 << n_qubits];
        amps[0] = ONE;
        Ok(Self { n_qubits, amps })
    }

    /// Wraps an amplitude vector. The vector must have length `2^n_qubits`
    /// and unit norm within `1e-10`.
    pub fn from_amplitudes(n_qubits: usize, amps: Vec<Complex64>) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::QubitCount(n_qubits));
        }
        check_dim("amplitude vector length", 1 << n_qubits, amps.len())?;
        let state = Self { n_qubits, amps };
        let dev = (state.norm_sqr() - 1.0).abs();
        if dev > 1e-10 {
            return Err(Error::NotNormalized(dev));
        }
        Ok(state)
    }

    #[inline]
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    #[inline]
    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    /// Raw mutable access. Callers are responsible for keeping the state
    /// normalized; the norm audit uses this to inject faults.
    #[inline]
    pub fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn check_qubit(&self, index: usize) -> Result<()> {
        if index >= self.n_qubits {
            return Err(Error::QubitIndex {
                index,
                n_qubits: self.n_qubits,
            });
        }
        Ok(())
    }

    pub fn apply_single_qubit(&mut self, gate: &GateMatrix2x2, target: usize) -> Result<()> {
        self.check_qubit(target)?;
        apply_matrix(&mut self.amps, &gate.0, target, None);
        Ok(())
    }

    /// Applies `|0><0| (x) I + |1><1| (x) gate` on `(control, target)`.
    pub fn apply_controlled(
        &mut self,
        gate: &GateMatrix2x2,
        control: usize,
        target: usize,
    ) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(Error::ControlIsTarget(control));
        }
        apply_matrix(&mut self.amps, &gate.0, target, Some(control));
        Ok(())
    }

    /// `<psi|P_qubit|psi>`. Does not touch the amplitudes.
    pub fn pauli_expectation(&self, axis: PauliAxis, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let [x, y, z] = qubit_expectations(&self.amps, qubit);
        Ok(match axis {
            PauliAxis::X => x,
            PauliAxis::Y => y,
            PauliAxis::Z => z,
        })
    }

    /// `<self|other>`, conjugate-linear in `self`.
    pub fn inner_product(&self, other: &QuantumState) -> Result<Complex64> {
        check_dim("qubit count", self.n_qubits, other.n_qubits)?;
        Ok(inner(&self.amps, &other.amps))
    }

    pub fn fidelity(&self, other: &QuantumState) -> Result<f64> {
        Ok(self.inner_product(other)?.norm_sqr())
    }
}

pub fn zero_state(n_qubits: usize) -> Result<QuantumState> {
    QuantumState::zero(n_qubits)
}

pub fn inner_product(a: &QuantumState, b: &QuantumState) -> Result<Complex64> {
    a.inner_product(b)
}

pub fn pauli_expectation(state: &QuantumState, axis: PauliAxis, qubit: usize) -> Result<f64> {
    state.pauli_expectation(axis, qubit)
}

/// A 2x2 complex matrix in row-major order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateMatrix2x2(pub [[Complex64; 2]; 2]);

impl GateMatrix2x2 {
    pub fn identity() -> Self {
        Self([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn pauli(axis: PauliAxis) -> Self {
        match axis {
            PauliAxis::X => Self([[ZERO, ONE], [ONE, ZERO]]),
            PauliAxis::Y => Self([[ZERO, -I], [I, ZERO]]),
            PauliAxis::Z => Self([[ONE, ZERO], [ZERO, -ONE]]),
        }
    }

    pub fn rx(theta: f64) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        let c = Complex64::new(c, 0.0);
        let mis = Complex64::new(0.0, -s);
        Self([[c, mis], [mis, c]])
    }

    pub fn ry(theta: f64) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        Self([
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ])
    }

    pub fn dagger(&self) -> Self {
        let m = &self.0;
        Self([[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]])
    }

    pub fn mul(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[ZERO; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Self(out)
    }

    /// Max entrywise deviation of `U^dagger U` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let p = self.dagger().mul(self);
        let id = Self::identity();
        p.0.iter()
            .flatten()
            .zip(id.0.iter().flatten())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Calls `f` on every amplitude pair `(i, i + 2^target)` with target bit 0,
/// restricted to indices whose control bit is set when `control` is given.
#[inline(always)]
pub(crate) fn for_each_pair<F>(amps: &mut [Complex64], target: usize, control: Option<usize>, mut f: F)
where
    F: FnMut(&mut Complex64, &mut Complex64),
{
    let s = 1usize << target;
    match control {
        None => {
            for chunk in amps.chunks_exact_mut(2 * s) {
                let (lo, hi) = chunk.split_at_mut(s);
                for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                    f(a, b);
                }
            }
        }
        Some(c) if c > target => {
            let cm = 1usize << c;
            for chunk in amps.chunks_exact_mut(2 * cm) {
                for sub in chunk[cm..].chunks_exact_mut(2 * s) {
                    let (lo, hi) = sub.split_at_mut(s);
                    for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                        f(a, b);
                    }
                }
            }
        }
        Some(c) => {
            let cm = 1usize << c;
            for chunk in amps.chunks_exact_mut(2 * s) {
                let (lo, hi) = chunk.split_at_mut(s);
                for (ca, cb) in lo.chunks_exact_mut(2 * cm).zip(hi.chunks_exact_mut(2 * cm)) {
                    for (a, b) in ca[cm..].iter_mut().zip(cb[cm..].iter_mut()) {
                        f(a, b);
                    }
                }
            }
        }
    }
}

/// Pair iteration over two equally sized buffers in lockstep.
#[inline(always)]
pub(crate) fn for_each_pair2<F>(
    xs: &mut [Complex64],
    ys: &mut [Complex64],
    target: usize,
    control: Option<usize>,
    mut f: F,
) where
    F: FnMut(&mut Complex64, &mut Complex64, &mut Complex64, &mut Complex64),
{
    debug_assert_eq!(xs.len(), ys.len());
    let s = 1usize << target;
    match control {
        None => {
            for (cx, cy) in xs.chunks_exact_mut(2 * s).zip(ys.chunks_exact_mut(2 * s)) {
                let (x0, x1) = cx.split_at_mut(s);
                let (y0, y1) = cy.split_at_mut(s);
                for (((a, b), c), d) in x0.iter_mut().zip(x1).zip(y0).zip(y1) {
                    f(a, b, c, d);
                }
            }
        }
        Some(c) if c > target => {
            let cm = 1usize << c;
            for (cx, cy) in xs.chunks_exact_mut(2 * cm).zip(ys.chunks_exact_mut(2 * cm)) {
                for (sx, sy) in cx[cm..]
                    .chunks_exact_mut(2 * s)
                    .zip(cy[cm..].chunks_exact_mut(2 * s))
                {
                    let (x0, x1) = sx.split_at_mut(s);
                    let (y0, y1) = sy.split_at_mut(s);
                    for (((a, b), c), d) in x0.iter_mut().zip(x1).zip(y0).zip(y1) {
                        f(a, b, c, d);
                    }
                }
            }
        }
        Some(c) => {
            let cm = 1usize << c;
            for (cx, cy) in xs.chunks_exact_mut(2 * s).zip(ys.chunks_exact_mut(2 * s)) {
                let (x0, x1) = cx.split_at_mut(s);
                let (y0, y1) = cy.split_at_mut(s);
                let it = x0
                    .chunks_exact_mut(2 * cm)
                    .zip(x1.chunks_exact_mut(2 * cm))
                    .zip(y0.chunks_exact_mut(2 * cm))
                    .zip(y1.chunks_exact_mut(2 * cm));
                for (((a0, a1), b0), b1) in it {
                    for (((a, b), c), d) in a0[cm..]
                        .iter_mut()
                        .zip(a1[cm..].iter_mut())
                        .zip(b0[cm..].iter_mut())
                        .zip(b1[cm..].iter_mut())
                    {
                        f(a, b, c, d);
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn apply_matrix(
    amps: &mut [Complex64],
    m: &[[Complex64; 2]; 2],
    target: usize,
    control: Option<usize>,
) {
    let [[m00, m01], [m10, m11]] = *m;
    for_each_pair(amps, target, control, |a, b| {
        let (x, y) = (*a, *b);
        *a = m00 * x + m01 * y;
        *b = m10 * x + m11 * y;
    });
}

/// RY with precomputed `(cos(theta/2), sin(theta/2))`.
#[inline]
pub(crate) fn apply_ry(amps: &mut [Complex64], c: f64, s: f64, target: usize, control: Option<usize>) {
    for_each_pair(amps, target, control, |a, b| {
        let (x, y) = (*a, *b);
        *a = x * c - y * s;
        *b = x * s + y * c;
    });
}

/// RX with precomputed `(cos(theta/2), sin(theta/2))`.
#[inline]
pub(crate) fn apply_rx(amps: &mut [Complex64], c: f64, s: f64, target: usize, control: Option<usize>) {
    for_each_pair(amps, target, control, |a, b| {
        let (x, y) = (*a, *b);
        // -i s y = (s y.im, -s y.re)
        *a = Complex64::new(c * x.re + s * y.im, c * x.im - s * y.re);
        *b = Complex64::new(c * y.re + s * x.im, c * y.im - s * x.re);
    });
}

/// `[<X_k>, <Y_k>, <Z_k>]` for one qubit in a single pass.
pub(crate) fn qubit_expectations(amps: &[Complex64], qubit: usize) -> [f64; 3] {
    let s = 1usize << qubit;
    let (mut cross, mut z) = (ZERO, 0.0);
    for chunk in amps.chunks_exact(2 * s) {
        let (lo, hi) = chunk.split_at(s);
        for (a, b) in lo.iter().zip(hi) {
            cross += a.conj() * b;
            z += a.norm_sqr() - b.norm_sqr();
        }
    }
    [2.0 * cross.re, 2.0 * cross.im, z]
}
