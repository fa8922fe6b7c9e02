//! Ground states of the periodic ANNNI chain
//!
//! `H = -Σ_j (Z_j Z_{j+1} - κ Z_j Z_{j+2}) - g Σ_j X_j`   (J = 1)
//!
//! via Lanczos restricted to the Z2-even sector of `P = Π_j X_j`, with dense
//! exact diagonalization as a small-N oracle. `κ = 0` is the transverse-field
//! Ising chain. Also hosts the closed-form phase-boundary curves.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsim::Statevector;
use crate::rng::keyed_rng;

pub const MAX_SITES: usize = 20;
pub const MAX_DENSE_SITES: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundStateError {
    #[error("vector length {got} does not match 2^{n} = {want}")]
    DimensionMismatch { got: usize, want: usize, n: usize },
    #[error("chain length {0} outside 2..={1}")]
    Size(usize, usize),
    #[error("Lanczos did not converge in {iterations} iterations (residual {residual:e}, energy {energy})")]
    NotConverged { iterations: usize, residual: f64, energy: f64 },
    #[error("κ = {0} outside the domain of this boundary formula")]
    Domain(f64),
    #[error("negative parameter: g = {g}, κ = {kappa}")]
    NegativeParameter { g: f64, kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnniParams {
    pub g: f64,
    pub kappa: f64,
    pub n: usize,
}

impl AnnniParams {
    pub fn ising(g: f64, n: usize) -> Self {
        Self { g, kappa: 0.0, n }
    }

    pub fn new(g: f64, kappa: f64, n: usize) -> Self {
        Self { g, kappa, n }
    }

    fn check(&self, cap: usize) -> Result<(), GroundStateError> {
        if self.n < 2 || self.n > cap {
            return Err(GroundStateError::Size(self.n, cap));
        }
        if self.g < 0.0 || self.kappa < 0.0 {
            return Err(GroundStateError::NegativeParameter { g: self.g, kappa: self.kappa });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }
}

fn rotl(s: usize, k: usize, n: usize) -> usize {
    let mask = (1usize << n) - 1;
    ((s << k) | (s >> (n - k))) & mask
}

/// Diagonal `ZZ` energies. `Z|0> = +|0>`; anti-aligned bonds are the set
/// bits of `s XOR rotl(s, k)`.
pub fn diagonal(p: &AnnniParams) -> Vec<f64> {
    let n = p.n;
    (0..p.dim())
        .map(|s| {
            let d1 = (s ^ rotl(s, 1 % n, n)).count_ones() as f64;
            let d2 = (s ^ rotl(s, 2 % n, n)).count_ones() as f64;
            let nn = n as f64 - 2.0 * d1;
            let nnn = n as f64 - 2.0 * d2;
            -nn + p.kappa * nnn
        })
        .collect()
}

fn apply_real(p: &AnnniParams, diag: &[f64], v: &[f64], out: &mut [f64]) {
    let n = p.n;
    for (s, o) in out.iter_mut().enumerate() {
        let mut acc = diag[s] * v[s];
        let mut flip = 0.0;
        for j in 0..n {
            flip += v[s ^ (1 << j)];
        }
        acc -= p.g * flip;
        *o = acc;
    }
}

/// `H v` without materializing `H`.
pub fn hamiltonian_matvec(p: &AnnniParams, v: &[C64]) -> Result<Vec<C64>, GroundStateError> {
    p.check(MAX_SITES)?;
    if v.len() != p.dim() {
        return Err(GroundStateError::DimensionMismatch {
            got: v.len(),
            want: p.dim(),
            n: p.n,
        });
    }
    let diag = diagonal(p);
    let re: Vec<f64> = v.iter().map(|x| x.re).collect();
    let im: Vec<f64> = v.iter().map(|x| x.im).collect();
    let (mut hre, mut him) = (vec![0.0; v.len()], vec![0.0; v.len()]);
    apply_real(p, &diag, &re, &mut hre);
    apply_real(p, &diag, &im, &mut him);
    Ok(hre.into_iter().zip(him).map(|(a, b)| C64::new(a, b)).collect())
}

/// Full dense Hamiltonian, `N <= 12`.
pub fn dense_hamiltonian(p: &AnnniParams) -> Result<DMatrix<f64>, GroundStateError> {
    p.check(MAX_DENSE_SITES)?;
    let dim = p.dim();
    let diag = diagonal(p);
    let mut h = DMatrix::zeros(dim, dim);
    for s in 0..dim {
        h[(s, s)] = diag[s];
        for j in 0..p.n {
            h[(s ^ (1 << j), s)] -= p.g;
        }
    }
    Ok(h)
}

/// Dense Hamiltonian in the Z2-even basis `(|s> + |~s>)/√2`, `s` with the top bit clear.
pub fn dense_even_hamiltonian(p: &AnnniParams) -> Result<DMatrix<f64>, GroundStateError> {
    p.check(MAX_DENSE_SITES)?;
    let half = p.dim() / 2;
    let all = p.dim() - 1;
    let rep = |s: usize| if s < half { s } else { s ^ all };
    let diag = diagonal(p);
    let mut h = DMatrix::zeros(half, half);
    for b in 0..half {
        h[(b, b)] += diag[b];
        for j in 0..p.n {
            h[(rep(b ^ (1 << j)), b)] -= p.g;
        }
    }
    Ok(h)
}

fn min_eigenvalue(h: DMatrix<f64>) -> f64 {
    h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn dense_ground_energy(p: &AnnniParams) -> Result<f64, GroundStateError> {
    Ok(min_eigenvalue(dense_hamiltonian(p)?))
}

pub fn dense_even_ground_energy(p: &AnnniParams) -> Result<f64, GroundStateError> {
    Ok(min_eigenvalue(dense_even_hamiltonian(p)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanczosConfig {
    /// Residual tolerance relative to the running spectral-norm estimate.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            seed: 0x1a2c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroundStateResult {
    pub energy: f64,
    pub state: Statevector,
    /// `<P>` for the returned state; +1 in the even sector.
    pub parity: f64,
    pub iterations: usize,
    /// `||H psi - E psi||`.
    pub residual: f64,
    /// Lowest Ritz value after each iteration.
    pub energy_history: Vec<f64>,
}

impl GroundStateResult {
    pub fn is_even(&self) -> bool {
        (self.parity - 1.0).abs() < 1e-8
    }
}

fn project_even(v: &mut [f64]) {
    let all = v.len() - 1;
    for s in 0..v.len() / 2 {
        let m = 0.5 * (v[s] + v[s ^ all]);
        v[s] = m;
        v[s ^ all] = m;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    n
}

/// Lowest eigenpair in the Z2-even sector via Lanczos with full
/// reorthogonalization. Memory is `iterations * 2^N` doubles.
pub fn lanczos_ground(p: &AnnniParams, cfg: &LanczosConfig) -> Result<GroundStateResult, GroundStateError> {
    p.check(MAX_SITES)?;
    let dim = p.dim();
    let diag = diagonal(p);
    let mut rng = keyed_rng(cfg.seed, &[p.n as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    project_even(&mut v);
    normalize(&mut v);

    let mut basis: Vec<Vec<f64>> = vec![v];
    let (mut alphas, mut betas) = (Vec::new(), Vec::<f64>::new());
    let mut history = Vec::new();
    let mut w = vec![0.0; dim];
    let mut hnorm = 1.0f64;
    let mut last = (f64::NAN, f64::INFINITY);

    for it in 0..cfg.max_iter.max(1) {
        apply_real(p, &diag, &basis[it], &mut w);
        project_even(&mut w);
        let a = dot(&w, &basis[it]);
        alphas.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = dot(&w, &w).sqrt();

        let k = alphas.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j || j + 1 == i {
                betas[i.min(j)]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let (imin, &emin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        hnorm = hnorm.max(eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs())));
        history.push(emin);
        let y: DVector<f64> = eig.eigenvectors.column(imin).into_owned();
        let est = (b * y[k - 1]).abs();
        let breakdown = b <= 1e-13 * hnorm;
        last = (emin, est);

        if est <= cfg.tol * hnorm || breakdown {
            let mut psi = vec![0.0; dim];
            for (q, &c) in basis.iter().zip(y.iter()) {
                psi.iter_mut().zip(q).for_each(|(x, z)| *x += c * z);
            }
            project_even(&mut psi);
            normalize(&mut psi);
            let mut hpsi = vec![0.0; dim];
            apply_real(p, &diag, &psi, &mut hpsi);
            let energy = dot(&psi, &hpsi);
            let residual = hpsi
                .iter()
                .zip(&psi)
                .map(|(h, x)| (h - energy * x).powi(2))
                .sum::<f64>()
                .sqrt();
            if residual <= cfg.tol * hnorm.max(1.0) * 10.0 || breakdown {
                let all = dim - 1;
                let parity = (0..dim).map(|s| psi[s] * psi[s ^ all]).sum();
                let amps = psi.into_iter().map(|x| C64::new(x, 0.0)).collect();
                return Ok(GroundStateResult {
                    energy,
                    state: Statevector::from_amplitudes(amps).expect("power-of-two length"),
                    parity,
                    iterations: it + 1,
                    residual,
                    energy_history: history,
                });
            }
        }
        betas.push(b);
        w.iter_mut().for_each(|x| *x /= b);
        basis.push(std::mem::replace(&mut w, vec![0.0; dim]));
    }
    Err(GroundStateError::NotConverged {
        iterations: cfg.max_iter,
        residual: last.1,
        energy: last.0,
    })
}

/// Ising-type transition line for `0 <= κ < 1/2`,
/// `g_I = (1-κ)/κ [1 - sqrt((1 - 3κ + 4κ²)/(1-κ))]`, evaluated in the
/// cancellation-free form `2(1-2κ) / (1 + sqrt(...))` so that `κ = 0` gives 1.
pub fn ising_boundary(kappa: f64) -> Result<f64, GroundStateError> {
    if !(0.0..=0.5).contains(&kappa) {
        return Err(GroundStateError::Domain(kappa));
    }
    let x = (1.0 - 3.0 * kappa + 4.0 * kappa * kappa) / (1.0 - kappa);
    Ok(2.0 * (1.0 - 2.0 * kappa) / (1.0 + x.sqrt()))
}

/// BKT line for `κ >= 1/2`, `1.05 sqrt((κ - 1/2)(κ - 1/10))`.
pub fn bkt_boundary(kappa: f64) -> Result<f64, GroundStateError> {
    if !(kappa >= 0.5) {
        return Err(GroundStateError::Domain(kappa));
    }
    Ok(1.05 * ((kappa - 0.5) * (kappa - 0.1)).sqrt())
}
