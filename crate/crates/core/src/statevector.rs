//! Dense statevector simulation of an n-qubit register.
//!
//! Only the primitives the feature-extraction circuit needs are provided:
//! amplitude embedding of a real waveform, Pauli-Y rotations, controlled-Z,
//! and computational-basis probabilities. Gates are in-place stride kernels
//! over the amplitude array; no gate matrix is ever materialized.
//!
//! Convention: qubit 0 is the least-significant bit of the basis index
//! (little-endian). All cross-module indexing relies on this.
//!
//! Amplitudes are stored as `Complex64` even though RY and CZ are real
//! matrices; the reality of embedded states is a tested invariant, not a
//! storage assumption.

use num_complex::Complex64;
use thiserror::Error;

/// Largest register the simulator accepts (4096 amplitudes).
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("waveform has zero norm")]
    ZeroNormWaveform,
    #[error("waveform length {len} exceeds register capacity {capacity}")]
    LengthExceedsRegister { len: usize, capacity: usize },
    #[error("qubit index {index} out of range for {n_qubits} qubits")]
    IndexOutOfRange { index: usize, n_qubits: usize },
    #[error("two-qubit gate requires distinct qubits, got {0} twice")]
    SameQubit(usize),
}

/// Index of a wire in the register; validated against the register size at
/// the point of use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QubitIndex(pub usize);

/// Pure state of an n-qubit register as 2^n complex amplitudes.
#[derive(Debug, Clone)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<Complex64>,
    gate_ops: u64,
}

impl Statevector {
    /// Amplitude-embeds a real waveform: `amps[j] = waveform[j] / ||waveform||`
    /// for `j < L`, zero for the padded tail `L..2^n`.
    ///
    /// # Panics
    /// Panics if `n_qubits` is outside `1..=MAX_QUBITS`.
    pub fn embed_amplitude(waveform: &[f64], n_qubits: usize) -> Result<Self, StateError> {
        assert!(
            (1..=MAX_QUBITS).contains(&n_qubits),
            "register size {n_qubits} outside 1..={MAX_QUBITS}"
        );
        let dim = 1usize << n_qubits;
        if waveform.len() > dim {
            return Err(StateError::LengthExceedsRegister {
                len: waveform.len(),
                capacity: dim,
            });
        }
        let norm_sq: f64 = waveform.iter().map(|x| x * x).sum();
        if norm_sq == 0.0 {
            return Err(StateError::ZeroNormWaveform);
        }
        let inv_norm = 1.0 / norm_sq.sqrt();
        let mut amps = vec![Complex64::new(0.0, 0.0); dim];
        for (a, &x) in amps.iter_mut().zip(waveform) {
            *a = Complex64::new(x * inv_norm, 0.0);
        }
        Ok(Statevector {
            n_qubits,
            amps,
            gate_ops: 0,
        })
    }

    /// Wraps raw amplitudes without validation beyond the length check.
    /// Used internally for adjoint sweeps, where the cost vector is not a
    /// normalized state.
    pub(crate) fn from_raw(n_qubits: usize, amps: Vec<Complex64>) -> Self {
        assert_eq!(amps.len(), 1 << n_qubits);
        Statevector {
            n_qubits,
            amps,
            gate_ops: 0,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    /// Number of gate kernel applications performed on this state so far.
    pub fn gate_ops(&self) -> u64 {
        self.gate_ops
    }

    fn check_qubit(&self, q: QubitIndex) -> Result<usize, StateError> {
        if q.0 >= self.n_qubits {
            Err(StateError::IndexOutOfRange {
                index: q.0,
                n_qubits: self.n_qubits,
            })
        } else {
            Ok(q.0)
        }
    }

    /// Applies a real 2x2 matrix `[[m00, m01], [m10, m11]]` on wire `q`.
    fn apply_real_1q(&mut self, q: usize, m00: f64, m01: f64, m10: f64, m11: f64) {
        let step = 1usize << q;
        let len = self.amps.len();
        let mut base = 0;
        while base < len {
            for i0 in base..base + step {
                let i1 = i0 + step;
                let a = self.amps[i0];
                let b = self.amps[i1];
                self.amps[i0] = a * m00 + b * m01;
                self.amps[i1] = a * m10 + b * m11;
            }
            base += 2 * step;
        }
        self.gate_ops += 1;
    }

    /// Y-rotation by `theta` on wire `q`:
    /// rows `[cos(t/2), -sin(t/2)]`, `[sin(t/2), cos(t/2)]`.
    pub fn apply_ry(&mut self, q: QubitIndex, theta: f64) -> Result<(), StateError> {
        let q = self.check_qubit(q)?;
        let c = (theta / 2.0).cos();
        let s = (theta / 2.0).sin();
        self.apply_real_1q(q, c, -s, s, c);
        Ok(())
    }

    /// Derivative of the Y-rotation with respect to its angle, applied as a
    /// (non-unitary) matrix: `d RY(t) / dt`. Only meaningful inside gradient
    /// sweeps.
    pub(crate) fn apply_ry_deriv(&mut self, q: QubitIndex, theta: f64) -> Result<(), StateError> {
        let q = self.check_qubit(q)?;
        let c = 0.5 * (theta / 2.0).cos();
        let s = 0.5 * (theta / 2.0).sin();
        self.apply_real_1q(q, -s, -c, c, -s);
        Ok(())
    }

    /// Controlled-Z on wires `a`, `b`: negates every amplitude whose basis
    /// index has both bits set.
    pub fn apply_cz(&mut self, a: QubitIndex, b: QubitIndex) -> Result<(), StateError> {
        let a = self.check_qubit(a)?;
        let b = self.check_qubit(b)?;
        if a == b {
            return Err(StateError::SameQubit(a));
        }
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
        self.gate_ops += 1;
        Ok(())
    }

    /// Computational-basis probabilities `p[i] = |amps[i]|^2`.
    pub fn measure_probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(Complex64::norm_sqr).collect()
    }

    /// Squared l2 norm of the amplitude vector.
    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(Complex64::norm_sqr).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn embed_normalizes() {
        let s = Statevector::embed_amplitude(&[3.0, 4.0], 1).unwrap();
        assert_close(s.amplitudes()[0].re, 0.6, 1e-15);
        assert_close(s.amplitudes()[1].re, 0.8, 1e-15);
    }

    #[test]
    fn embed_pads_tail_with_zeros() {
        let mut w = vec![0.0; 196];
        w[0] = 1.0;
        let s = Statevector::embed_amplitude(&w, 8).unwrap();
        assert_eq!(s.dim(), 256);
        assert_eq!(s.amplitudes()[0], num_complex::Complex64::new(1.0, 0.0));
        assert!(s.amplitudes()[1..].iter().all(|a| a.norm_sqr() == 0.0));
    }

    #[test]
    fn embed_uniform() {
        let s = Statevector::embed_amplitude(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        for a in s.amplitudes() {
            assert_close(a.re, 0.5, 1e-15);
        }
    }

    #[test]
    fn embed_rejects_zero_norm() {
        assert_eq!(
            Statevector::embed_amplitude(&[0.0, 0.0, 0.0], 2).unwrap_err(),
            StateError::ZeroNormWaveform
        );
    }

    #[test]
    fn embed_rejects_oversized_waveform() {
        let err = Statevector::embed_amplitude(&[1.0; 5], 2).unwrap_err();
        assert_eq!(
            err,
            StateError::LengthExceedsRegister { len: 5, capacity: 4 }
        );
    }

    #[test]
    fn ry_pi_flips_zero_to_one() {
        let mut s = Statevector::embed_amplitude(&[1.0], 1).unwrap();
        s.apply_ry(QubitIndex(0), PI).unwrap();
        assert_close(s.amplitudes()[0].re, 0.0, 1e-15);
        assert_close(s.amplitudes()[1].re, 1.0, 1e-15);
    }

    #[test]
    fn ry_zero_is_identity() {
        let mut s = Statevector::embed_amplitude(&[0.3, -0.7, 0.1, 0.64], 2).unwrap();
        let before = s.amplitudes().to_vec();
        s.apply_ry(QubitIndex(1), 0.0).unwrap();
        assert_eq!(s.amplitudes(), &before[..]);
    }

    #[test]
    fn ry_half_pi_makes_equal_superposition() {
        let mut s = Statevector::embed_amplitude(&[1.0], 1).unwrap();
        s.apply_ry(QubitIndex(0), FRAC_PI_2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_close(s.amplitudes()[0].re, r, 1e-15);
        assert_close(s.amplitudes()[1].re, r, 1e-15);
    }

    #[test]
    fn ry_rejects_out_of_range_wire() {
        let mut s = Statevector::embed_amplitude(&[1.0], 1).unwrap();
        assert_eq!(
            s.apply_ry(QubitIndex(1), 0.1).unwrap_err(),
            StateError::IndexOutOfRange { index: 1, n_qubits: 1 }
        );
    }

    #[test]
    fn cz_negates_the_11_amplitude_only() {
        // |11> on two qubits is basis index 3
        let mut s = Statevector::embed_amplitude(&[0.0, 0.0, 0.0, 1.0], 2).unwrap();
        s.apply_cz(QubitIndex(0), QubitIndex(1)).unwrap();
        assert_close(s.amplitudes()[3].re, -1.0, 1e-15);

        let mut s = Statevector::embed_amplitude(&[0.0, 1.0], 1).unwrap(); // |1> q0
        let mut w = vec![0.0; 4];
        w[1] = 1.0; // |10> in little-endian: q0=1, q1=0
        let mut s2 = Statevector::embed_amplitude(&w, 2).unwrap();
        s2.apply_cz(QubitIndex(0), QubitIndex(1)).unwrap();
        assert_close(s2.amplitudes()[1].re, 1.0, 1e-15);
        let _ = &mut s;
    }

    #[test]
    fn cz_on_superposition() {
        // (|01> + |11>)/sqrt(2): q0=1 in both, q1 differs -> indices 1 and 3
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut w = vec![0.0; 4];
        w[1] = r;
        w[3] = r;
        let mut s = Statevector::embed_amplitude(&w, 2).unwrap();
        s.apply_cz(QubitIndex(0), QubitIndex(1)).unwrap();
        assert_close(s.amplitudes()[1].re, r, 1e-15);
        assert_close(s.amplitudes()[3].re, -r, 1e-15);
    }

    #[test]
    fn cz_rejects_same_wire() {
        let mut s = Statevector::embed_amplitude(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(
            s.apply_cz(QubitIndex(1), QubitIndex(1)).unwrap_err(),
            StateError::SameQubit(1)
        );
    }

    #[test]
    fn probabilities_of_basis_state() {
        let mut w = vec![0.0; 256];
        w[0] = 1.0;
        let s = Statevector::embed_amplitude(&w, 8).unwrap();
        let p = s.measure_probabilities();
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn probabilities_of_uniform_state() {
        let s = Statevector::embed_amplitude(&[1.0; 256], 8).unwrap();
        for p in s.measure_probabilities() {
            assert_close(p, 1.0 / 256.0, 1e-15);
        }
    }

    #[test]
    fn probabilities_square_amplitudes() {
        let s = Statevector::embed_amplitude(&[0.6, 0.8], 1).unwrap();
        let p = s.measure_probabilities();
        assert_close(p[0], 0.36, 1e-15);
        assert_close(p[1], 0.64, 1e-15);
    }

    #[test]
    fn cz_involution_is_bit_exact() {
        let mut s = Statevector::embed_amplitude(&[0.25, -0.5, 0.75, 1.0, -0.125, 0.3, 0.6, 0.1], 3)
            .unwrap();
        let before = s.amplitudes().to_vec();
        s.apply_cz(QubitIndex(0), QubitIndex(2)).unwrap();
        s.apply_cz(QubitIndex(0), QubitIndex(2)).unwrap();
        assert_eq!(s.amplitudes(), &before[..]);
    }

    proptest! {
        #[test]
        fn norm_preserved_by_random_gate_sequences(
            seed in 0u64..1000,
            n_qubits in 2usize..=5,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded_rng(seed, &[0xA]);
            let dim = 1usize << n_qubits;
            let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(w.iter().any(|&x| x != 0.0));
            let mut s = Statevector::embed_amplitude(&w, n_qubits).unwrap();
            for _ in 0..40 {
                if rng.gen_bool(0.5) {
                    let q = rng.gen_range(0..n_qubits);
                    let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    s.apply_ry(QubitIndex(q), theta).unwrap();
                } else {
                    let a = rng.gen_range(0..n_qubits);
                    let mut b = rng.gen_range(0..n_qubits);
                    if b == a { b = (b + 1) % n_qubits; }
                    s.apply_cz(QubitIndex(a), QubitIndex(b)).unwrap();
                }
                prop_assert!((s.norm_sqr() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn reality_closure_is_exact(
            seed in 0u64..1000,
            n_qubits in 1usize..=4,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded_rng(seed, &[0xB]);
            let len = rng.gen_range(1..=(1usize << n_qubits));
            let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(w.iter().any(|&x| x != 0.0));
            let mut s = Statevector::embed_amplitude(&w, n_qubits).unwrap();
            for _ in 0..30 {
                if rng.gen_bool(0.5) || n_qubits < 2 {
                    let q = rng.gen_range(0..n_qubits);
                    s.apply_ry(QubitIndex(q), rng.gen_range(-3.0..3.0)).unwrap();
                } else {
                    let a = rng.gen_range(0..n_qubits);
                    let mut b = rng.gen_range(0..n_qubits);
                    if b == a { b = (b + 1) % n_qubits; }
                    s.apply_cz(QubitIndex(a), QubitIndex(b)).unwrap();
                }
            }
            let max_im = s.amplitudes().iter().map(|a| a.im.abs()).fold(0.0, f64::max);
            prop_assert_eq!(max_im, 0.0);
        }

        #[test]
        fn ry_angles_compose_additively(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in 0u64..200,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded_rng(seed, &[0xC]);
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(w.iter().any(|&x| x != 0.0));
            let q = QubitIndex(rng.gen_range(0..3));
            let mut s1 = Statevector::embed_amplitude(&w, 3).unwrap();
            s1.apply_ry(q, a).unwrap();
            s1.apply_ry(q, b).unwrap();
            let mut s2 = Statevector::embed_amplitude(&w, 3).unwrap();
            s2.apply_ry(q, a + b).unwrap();
            for (x, y) in s1.amplitudes().iter().zip(s2.amplitudes()) {
                prop_assert!((x - y).norm() <= 1e-12);
            }
        }

        #[test]
        fn probabilities_form_a_simplex(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = crate::rng::seeded_rng(seed, &[0xD]);
            let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(w.iter().any(|&x| x != 0.0));
            let mut s = Statevector::embed_amplitude(&w, 4).unwrap();
            for _ in 0..10 {
                let q = rng.gen_range(0..4);
                s.apply_ry(QubitIndex(q), rng.gen_range(-3.0..3.0)).unwrap();
            }
            let p = s.measure_probabilities();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
