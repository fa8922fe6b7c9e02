//! Dense statevector simulation of qubit chains.
//!
//! Qubit `q` is bit `q` of the basis index (little-endian). Two-qubit gates act
//! on `(site, (site + 1) mod N)`; the 4x4 matrix is indexed by
//! `b_site + 2 * b_{site+1}`, so `kron(hi, lo)` applies `lo` to `site` and `hi`
//! to its right neighbour.

use nalgebra::{DMatrix, Matrix2, Matrix4};
use num_complex::Complex64 as C64;
use rand::Rng;
use thiserror::Error;

pub const MAX_QUBITS: usize = 24;
/// Largest window for which a dense reduced density matrix is built (4^12 entries).
pub const MAX_RDM_QUBITS: usize = 12;
pub const UNITARITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("qubit count {0} outside supported range {1}..={MAX_QUBITS}")]
    SizeOutOfRange(usize, usize),
    #[error("site {site} out of range for {n_qubits} qubits")]
    SiteOutOfRange { site: usize, n_qubits: usize },
    #[error("window [{first}, {first}+{len}) invalid for {n_qubits} qubits (max length {MAX_RDM_QUBITS})")]
    BadWindow { first: usize, len: usize, n_qubits: usize },
    #[error("gate is not unitary: |u^dag u - I| = {0:e}")]
    NonUnitary(f64),
    #[error("amplitude vector length {0} is not a power of two")]
    BadLength(usize),
}

/// Frobenius distance of `u^dag u` from the identity.
pub fn unitarity_defect(u: &DMatrix<C64>) -> f64 {
    let n = u.nrows();
    let prod = u.adjoint() * u;
    (prod - DMatrix::<C64>::identity(n, n)).norm()
}

fn check_unitary2(u: &Matrix2<C64>) -> Result<(), QsimError> {
    let d = (u.adjoint() * u - Matrix2::identity()).norm();
    if d > UNITARITY_TOL {
        return Err(QsimError::NonUnitary(d));
    }
    Ok(())
}

fn check_unitary4(u: &Matrix4<C64>) -> Result<(), QsimError> {
    let d = (u.adjoint() * u - Matrix4::identity()).norm();
    if d > UNITARITY_TOL {
        return Err(QsimError::NonUnitary(d));
    }
    Ok(())
}

/// Kronecker product of two single-qubit gates in the `apply_2q` layout.
pub fn kron2(hi: &Matrix2<C64>, lo: &Matrix2<C64>) -> Matrix4<C64> {
    Matrix4::from_fn(|r, c| hi[(r >> 1, c >> 1)] * lo[(r & 1, c & 1)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl Statevector {
    fn check_size(n: usize, min: usize) -> Result<(), QsimError> {
        if n < min || n > MAX_QUBITS {
            return Err(QsimError::SizeOutOfRange(n, min));
        }
        Ok(())
    }

    /// `⊗ (|0⟩ + |1⟩)/√2`.
    pub fn new_product_plus(n_qubits: usize) -> Result<Self, QsimError> {
        Self::check_size(n_qubits, 1)?;
        let a = (0.5f64).powf(n_qubits as f64 / 2.0);
        Ok(Self {
            n_qubits,
            amps: vec![C64::new(a, 0.0); 1 << n_qubits],
        })
    }

    /// Computational basis state `|1…1⟩`.
    pub fn new_all_ones(n_qubits: usize) -> Result<Self, QsimError> {
        Self::check_size(n_qubits, 1)?;
        Self::basis(n_qubits, (1 << n_qubits) - 1)
    }

    pub fn new_ghz(n_qubits: usize) -> Result<Self, QsimError> {
        Self::check_size(n_qubits, 2)?;
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n_qubits];
        let a = std::f64::consts::FRAC_1_SQRT_2;
        amps[0] = C64::new(a, 0.0);
        amps[(1 << n_qubits) - 1] = C64::new(a, 0.0);
        Ok(Self { n_qubits, amps })
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self, QsimError> {
        Self::check_size(n_qubits, 1)?;
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n_qubits];
        *amps
            .get_mut(index)
            .ok_or(QsimError::SiteOutOfRange { site: index, n_qubits })? = C64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    /// Wraps a raw amplitude vector. No normalization is applied.
    pub fn from_amplitudes(amps: Vec<C64>) -> Result<Self, QsimError> {
        let len = amps.len();
        if !len.is_power_of_two() {
            return Err(QsimError::BadLength(len));
        }
        let n_qubits = len.trailing_zeros() as usize;
        Self::check_size(n_qubits, 1)?;
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_site(&self, site: usize) -> Result<(), QsimError> {
        if site >= self.n_qubits {
            return Err(QsimError::SiteOutOfRange {
                site,
                n_qubits: self.n_qubits,
            });
        }
        Ok(())
    }

    pub fn apply_1q(&mut self, site: usize, u: &Matrix2<C64>) -> Result<(), QsimError> {
        self.check_site(site)?;
        check_unitary2(u)?;
        let (u00, u01, u10, u11) = (u[(0, 0)], u[(0, 1)], u[(1, 0)], u[(1, 1)]);
        let stride = 1usize << site;
        for block in self.amps.chunks_exact_mut(stride << 1) {
            let (lo, hi) = block.split_at_mut(stride);
            for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x0, x1) = (*a0, *a1);
                *a0 = u00 * x0 + u01 * x1;
                *a1 = u10 * x0 + u11 * x1;
            }
        }
        Ok(())
    }

    pub fn apply_2q(&mut self, site: usize, u: &Matrix4<C64>) -> Result<(), QsimError> {
        self.check_site(site)?;
        if self.n_qubits < 2 {
            return Err(QsimError::SiteOutOfRange {
                site,
                n_qubits: self.n_qubits,
            });
        }
        check_unitary4(u)?;
        let m_lo = 1usize << site;
        let m_hi = 1usize << ((site + 1) % self.n_qubits);
        let mask = m_lo | m_hi;
        let mut v = [C64::new(0.0, 0.0); 4];
        for base in 0..self.amps.len() {
            if base & mask != 0 {
                continue;
            }
            let idx = [base, base | m_lo, base | m_hi, base | mask];
            for k in 0..4 {
                v[k] = self.amps[idx[k]];
            }
            for r in 0..4 {
                self.amps[idx[r]] =
                    u[(r, 0)] * v[0] + u[(r, 1)] * v[1] + u[(r, 2)] * v[2] + u[(r, 3)] * v[3];
            }
        }
        Ok(())
    }

    fn check_window(&self, first: usize, len: usize, cap: usize) -> Result<(), QsimError> {
        if len == 0 || len > cap || first + len > self.n_qubits {
            return Err(QsimError::BadWindow {
                first,
                len,
                n_qubits: self.n_qubits,
            });
        }
        Ok(())
    }

    /// Amplitudes reshaped as a `2^len x 2^(N-len)` matrix: rows index the
    /// window bits, columns the complement.
    fn window_matrix(&self, first: usize, len: usize) -> DMatrix<C64> {
        let rows = 1usize << len;
        let cols = 1usize << (self.n_qubits - len);
        let low_mask = (1usize << first) - 1;
        let mut m = DMatrix::<C64>::zeros(rows, cols);
        for (idx, a) in self.amps.iter().enumerate() {
            let w = (idx >> first) & (rows - 1);
            let e = (idx & low_mask) | ((idx >> (first + len)) << first);
            m[(w, e)] = *a;
        }
        m
    }

    /// Partial trace onto the contiguous window `[first, first + len)`.
    pub fn reduced_density_matrix(&self, first: usize, len: usize) -> Result<DensityMatrix, QsimError> {
        self.check_window(first, len, MAX_RDM_QUBITS)?;
        let m = self.window_matrix(first, len);
        let rho = &m * m.adjoint();
        Ok(DensityMatrix::from_matrix(rho))
    }

    /// A factor `L` with `L L^dag` equal to the window's reduced density matrix.
    pub fn window_purification(&self, first: usize, len: usize) -> Result<Purification, QsimError> {
        self.check_window(first, len, MAX_QUBITS)?;
        let m = self.window_matrix(first, len);
        let rows = m.nrows();
        if rows <= 256 && m.ncols() > 1 {
            let rho = &m * m.adjoint();
            Ok(Purification::from_factor(&pivoted_cholesky(&rho, 1e-15)))
        } else {
            Ok(Purification::from_factor(&m))
        }
    }

    /// Samples the joint Z-basis outcome of a window; `self` is not modified.
    pub fn sample_z<R: Rng + ?Sized>(&self, first: usize, len: usize, rng: &mut R) -> Result<Vec<u8>, QsimError> {
        self.check_window(first, len, MAX_QUBITS)?;
        let p = Purification::from_factor(&self.window_matrix(first, len));
        Ok(p.sample(&[], rng))
    }
}

/// Low-rank factor of a window's reduced state, stored row-major as
/// `2^len` rows (window basis) by `rank` columns.
#[derive(Clone, Debug)]
pub struct Purification {
    len: usize,
    rank: usize,
    data: Vec<C64>,
}

impl Purification {
    pub fn from_factor(l: &DMatrix<C64>) -> Self {
        let rows = l.nrows();
        let rank = l.ncols().max(1);
        let mut data = vec![C64::new(0.0, 0.0); rows * rank];
        for r in 0..rows {
            for c in 0..l.ncols() {
                data[r * rank + c] = l[(r, c)];
            }
        }
        Self {
            len: rows.trailing_zeros() as usize,
            rank,
            data,
        }
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Measures window qubits in order. Before measuring qubit `j`, `gates[j]`
    /// (if present) is applied to it. Collapse keeps only the surviving half of
    /// the buffer, so later qubits are cheaper.
    pub fn sample<R: Rng + ?Sized>(&self, gates: &[Matrix2<C64>], rng: &mut R) -> Vec<u8> {
        let r = self.rank;
        let mut buf = self.data.clone();
        let mut rows = 1usize << self.len;
        let mut bits = Vec::with_capacity(self.len);
        for j in 0..self.len {
            if let Some(u) = gates.get(j) {
                let (u00, u01, u10, u11) = (u[(0, 0)], u[(0, 1)], u[(1, 0)], u[(1, 1)]);
                for pair in buf[..rows * r].chunks_exact_mut(2 * r) {
                    let (a, b) = pair.split_at_mut(r);
                    for (x0, x1) in a.iter_mut().zip(b.iter_mut()) {
                        let (y0, y1) = (*x0, *x1);
                        *x0 = u00 * y0 + u01 * y1;
                        *x1 = u10 * y0 + u11 * y1;
                    }
                }
            }
            let (mut s0, mut s1) = (0.0f64, 0.0f64);
            for pair in buf[..rows * r].chunks_exact(2 * r) {
                s0 += pair[..r].iter().map(|x| x.norm_sqr()).sum::<f64>();
                s1 += pair[r..].iter().map(|x| x.norm_sqr()).sum::<f64>();
            }
            let p1 = s1 / (s0 + s1);
            let bit = u8::from(rng.gen::<f64>() < p1);
            let keep = bit as usize;
            let half = rows / 2;
            for k in 0..half {
                let src = (2 * k + keep) * r;
                buf.copy_within(src..src + r, k * r);
            }
            rows = half;
            bits.push(bit);
        }
        bits
    }
}

/// Pivoted Cholesky factor of a Hermitian PSD matrix, truncated once the
/// remaining diagonal mass drops below `rel_tol * trace`.
fn pivoted_cholesky(a: &DMatrix<C64>, rel_tol: f64) -> DMatrix<C64> {
    let n = a.nrows();
    let mut diag: Vec<f64> = (0..n).map(|i| a[(i, i)].re.max(0.0)).collect();
    let trace: f64 = diag.iter().sum();
    let mut cols: Vec<Vec<C64>> = Vec::new();
    let mut used = vec![false; n];
    while cols.len() < n {
        let (p, &dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        if dp <= rel_tol * trace || dp <= 0.0 {
            break;
        }
        used[p] = true;
        let s = dp.sqrt();
        let mut col = vec![C64::new(0.0, 0.0); n];
        for i in 0..n {
            if used[i] && i != p {
                continue;
            }
            let mut v = a[(i, p)];
            for c in &cols {
                v -= c[i] * c[p].conj();
            }
            col[i] = v / s;
        }
        for i in 0..n {
            if !used[i] {
                diag[i] -= col[i].norm_sqr();
            }
        }
        cols.push(col);
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 1);
    }
    DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    m: DMatrix<C64>,
}

impl DensityMatrix {
    /// Panics if `m` is not square with power-of-two dimension.
    pub fn from_matrix(m: DMatrix<C64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "density matrix must be square");
        assert!(m.nrows().is_power_of_two(), "dimension must be a power of two");
        Self {
            n_qubits: m.nrows().trailing_zeros() as usize,
            m,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (&self.m - self.m.adjoint()).norm()
    }

    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (&self.m + self.m.adjoint()) * C64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Half the trace norm of the difference.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        let d = DensityMatrix::from_matrix(&self.m - &other.m);
        0.5 * d.eigenvalues().iter().map(|e| e.abs()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn pauli_x() -> Matrix2<C64> {
        Matrix2::new(c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.))
    }

    fn hadamard() -> Matrix2<C64> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Matrix2::new(c(h, 0.), c(h, 0.), c(h, 0.), c(-h, 0.))
    }

    fn random_state(n: usize, seed: u64) -> Statevector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amps: Vec<C64> = (0..1 << n)
            .map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let nrm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= nrm);
        Statevector::from_amplitudes(amps).unwrap()
    }

    fn random_unitary4(seed: u64) -> Matrix4<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<C64>::from_fn(4, 4, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let q = g.qr().q();
        Matrix4::from_fn(|r, cc| q[(r, cc)])
    }

    #[test]
    fn constructors() {
        let p = Statevector::new_product_plus(1).unwrap();
        assert!((p.amplitudes()[0].re - 0.70710678).abs() < 1e-8);
        let p2 = Statevector::new_product_plus(2).unwrap();
        assert!(p2.amplitudes().iter().all(|a| (a.re - 0.5).abs() < 1e-15));
        assert!((Statevector::new_product_plus(16).unwrap().norm() - 1.0).abs() < 1e-12);
        let o = Statevector::new_all_ones(3).unwrap();
        assert_eq!(o.amplitudes()[7], c(1., 0.));
        assert_eq!(o.amplitudes().iter().filter(|a| a.norm() > 0.0).count(), 1);
        let g = Statevector::new_ghz(3).unwrap();
        assert!(g.amplitudes()[0].re > 0.7 && g.amplitudes()[7].re > 0.7);
        assert!((g.norm() - 1.0).abs() < 1e-14);
        assert_eq!(Statevector::new_ghz(1), Err(QsimError::SizeOutOfRange(1, 2)));
        assert!(Statevector::new_product_plus(25).is_err());
        assert!(Statevector::new_all_ones(0).is_err());
    }

    #[test]
    fn single_qubit_gates() {
        let mut s = Statevector::basis(1, 0).unwrap();
        s.apply_1q(0, &pauli_x()).unwrap();
        assert_eq!(s.amplitudes()[1], c(1., 0.));

        let r = random_state(4, 3);
        let mut id = r.clone();
        id.apply_1q(2, &Matrix2::identity()).unwrap();
        assert_eq!(id, r);

        let mut hh = r.clone();
        hh.apply_1q(1, &hadamard()).unwrap();
        hh.apply_1q(1, &hadamard()).unwrap();
        for (a, b) in hh.amplitudes().iter().zip(r.amplitudes()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(matches!(r.clone().apply_1q(4, &hadamard()), Err(QsimError::SiteOutOfRange { .. })));
        let bad = Matrix2::new(c(1., 0.), c(1., 0.), c(0., 0.), c(1., 0.));
        assert!(matches!(r.clone().apply_1q(0, &bad), Err(QsimError::NonUnitary(_))));
    }

    #[test]
    fn two_qubit_gates() {
        let cnot = Matrix4::from_fn(|r, cc| {
            // control = low bit (site), target = high bit
            let out = if cc & 1 == 1 { cc ^ 2 } else { cc };
            if r == out { c(1., 0.) } else { c(0., 0.) }
        });
        let mut s = Statevector::basis(2, 0b01).unwrap();
        s.apply_2q(0, &cnot).unwrap();
        assert_eq!(s.amplitudes()[0b11], c(1., 0.));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix2::new(c(0.6, 0.), c(0., 0.8), c(0., 0.8), c(0.6, 0.));
        let b = hadamard();
        let r = random_state(5, 4);
        for site in 0..5 {
            let mut via2 = r.clone();
            via2.apply_2q(site, &kron2(&b, &a)).unwrap();
            let mut via1 = r.clone();
            via1.apply_1q(site, &a).unwrap();
            via1.apply_1q((site + 1) % 5, &b).unwrap();
            for (x, y) in via2.amplitudes().iter().zip(via1.amplitudes()) {
                assert!((x - y).norm() < 1e-12);
            }
        }
        let u = random_unitary4(rng.gen());
        let mut s = r.clone();
        s.apply_2q(4, &u).unwrap();
        s.apply_2q(4, &u.adjoint()).unwrap();
        for (x, y) in s.amplitudes().iter().zip(r.amplitudes()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_pair_matches_cyclic_shift() {
        let n = 5;
        let r = random_state(n, 11);
        let u = random_unitary4(12);
        let mut direct = r.clone();
        direct.apply_2q(n - 1, &u).unwrap();
        // relabel qubit q -> q+1 so that the wrap pair (N-1, 0) becomes (0, 1)
        let shift = |idx: usize| ((idx << 1) | (idx >> (n - 1))) & ((1 << n) - 1);
        let mut amps = vec![c(0., 0.); 1 << n];
        for (i, a) in r.amplitudes().iter().enumerate() {
            amps[shift(i)] = *a;
        }
        let mut shifted = Statevector::from_amplitudes(amps).unwrap();
        shifted.apply_2q(0, &u).unwrap();
        for (i, a) in direct.amplitudes().iter().enumerate() {
            assert!((shifted.amplitudes()[shift(i)] - a).norm() < 1e-12);
        }
    }

    #[test]
    fn norm_preserved_over_many_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = random_state(8, 6);
        for k in 0..1000 {
            let site = rng.gen_range(0..8);
            if k % 2 == 0 {
                s.apply_2q(site, &random_unitary4(k)).unwrap();
            } else {
                let q = random_unitary4(k);
                let u = Matrix2::new(q[(0, 0)], q[(0, 1)], q[(1, 0)], q[(1, 1)]);
                let g = nalgebra::DMatrix::from_fn(2, 2, |i, j| u[(i, j)]).qr().q();
                s.apply_1q(site, &Matrix2::from_fn(|i, j| g[(i, j)])).unwrap();
            }
        }
        assert!((s.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reduced_density_matrices() {
        let g = Statevector::new_ghz(8).unwrap();
        let rho = g.reduced_density_matrix(2, 4).unwrap();
        let m = rho.matrix();
        assert!((m[(0, 0)].re - 0.5).abs() < 1e-14 && (m[(15, 15)].re - 0.5).abs() < 1e-14);
        assert!((m.norm_squared() - 0.5).abs() < 1e-14);

        let p = Statevector::new_product_plus(8).unwrap();
        let rho = p.reduced_density_matrix(3, 2).unwrap();
        assert!(rho.matrix().iter().all(|x| (x.re - 0.25).abs() < 1e-14));
        assert!((rho.purity() - 1.0).abs() < 1e-12);

        // reshaping oracle: rho[w, w'] = sum_e psi[w, e] psi*[w', e]
        let r = random_state(6, 2);
        let rho = r.reduced_density_matrix(1, 3).unwrap();
        let mut oracle = DMatrix::<C64>::zeros(8, 8);
        for i in 0..64usize {
            for j in 0..64usize {
                let env = |x: usize| (x & 1) | ((x >> 4) << 1);
                if env(i) == env(j) {
                    oracle[((i >> 1) & 7, (j >> 1) & 7)] += r.amplitudes()[i] * r.amplitudes()[j].conj();
                }
            }
        }
        assert!((rho.matrix() - &oracle).norm() < 1e-14);
        let ev = rho.eigenvalues();
        assert!((ev.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ev.iter().all(|&e| e >= -1e-12));
        assert!(rho.hermiticity_defect() < 1e-12);
        assert!(r.reduced_density_matrix(4, 3).is_err());
        let big = Statevector::new_ghz(14).unwrap();
        assert!(big.reduced_density_matrix(0, 13).is_err());
    }

    #[test]
    fn locality_of_gates() {
        let r = random_state(7, 21);
        let before = r.reduced_density_matrix(4, 3).unwrap();
        let mut s = r.clone();
        s.apply_2q(1, &random_unitary4(3)).unwrap();
        let after = s.reduced_density_matrix(4, 3).unwrap();
        assert!((before.matrix() - after.matrix()).norm() < 1e-10);
    }

    #[test]
    fn purification_reproduces_rdm() {
        let r = random_state(10, 8);
        for (first, len) in [(0, 3), (2, 5), (3, 7)] {
            let p = r.window_purification(first, len).unwrap();
            let rows = 1 << len;
            let l = DMatrix::from_fn(rows, p.rank, |i, k| p.data[i * p.rank + k]);
            let rho = r.reduced_density_matrix(first, len).unwrap();
            assert!((l.clone() * l.adjoint() - rho.matrix()).norm() < 1e-12);
        }
        let g = Statevector::new_ghz(10).unwrap();
        assert_eq!(g.window_purification(3, 4).unwrap().rank(), 2);
    }

    #[test]
    fn z_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Statevector::new_all_ones(2).unwrap();
        for _ in 0..20 {
            assert_eq!(s.sample_z(0, 2, &mut rng).unwrap(), vec![1, 1]);
        }

        let g = Statevector::new_ghz(6).unwrap();
        let mut ones = 0;
        for _ in 0..10_000 {
            let b = g.sample_z(0, 6, &mut rng).unwrap();
            assert!(b.iter().all(|&x| x == b[0]));
            ones += b[0] as usize;
        }
        assert!((ones as f64 / 1e4 - 0.5).abs() < 0.02);

        // chi-square against uniform over 16 strings
        let p = Statevector::new_product_plus(4).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let b = p.sample_z(0, 4, &mut rng).unwrap();
            counts[b.iter().enumerate().map(|(i, &x)| (x as usize) << i).sum::<usize>()] += 1;
        }
        let e = n as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 15 dof: mean 15, sd sqrt(30); 3 sigma
        assert!(chi2 < 15.0 + 3.0 * 30f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn sampling_matches_marginal_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = random_state(6, 31);
        let rho = r.reduced_density_matrix(2, 3).unwrap();
        let n = 20_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let b = r.sample_z(2, 3, &mut rng).unwrap();
            counts[b.iter().enumerate().map(|(i, &x)| (x as usize) << i).sum::<usize>()] += 1;
        }
        let tv: f64 = 0.5
            * (0..8)
                .map(|i| (counts[i] as f64 / n as f64 - rho.matrix()[(i, i)].re).abs())
                .sum::<f64>();
        assert!(tv <= 5.0 / (n as f64).sqrt(), "tv = {tv}");
    }
}
