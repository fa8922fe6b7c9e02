//! Local geometric entanglement on a four-site window with a depth-one channel
//!
//! The channel applies `U12 ⊗ U34` to the window, traces out the two boundary
//! qubits and applies `U23` to the remaining pair. The objective is the
//! weight of the output on `|00>`; `L = -ln(max objective)`.
//!
//! Window qubit `k` is bit `k` of the 16-dim index. Two-qubit gates use the
//! `qsim` convention: the low qubit of the pair is the low bit of the 4-dim index.

use nalgebra::{Matrix4, SMatrix};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qsim::{DensityMatrix, UNITARITY_TOL};
use crate::randunit::haar_u4;
use crate::rng::keyed_rng;
use crate::shadows::{mean_snapshot, ShadowError, ShadowSet};

type M16 = SMatrix<C64, 16, 16>;

pub const GEM_SITES: usize = 4;
const HERMITICITY_TOL: f64 = 1e-8;
const TAG_GEM: u64 = 0x6765_6d;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("window has {0} qubits, local GEM needs {GEM_SITES}")]
    WindowSize(usize),
    #[error("input is not Hermitian (defect {0:e})")]
    NonHermitian(f64),
    #[error("gate is not unitary (defect {0:e})")]
    NonUnitary(f64),
    #[error("only l = 4, t = 1 is supported (got l = {l}, t = {t})")]
    Unsupported { l: usize, t: usize },
    #[error(transparent)]
    Shadow(#[from] ShadowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GemOptimizer {
    /// Riemannian gradient ascent with a Cayley retraction.
    #[default]
    Riemannian,
    /// Alternating polar updates of each gate against its linearized environment.
    Polar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemConfig {
    pub l: usize,
    pub t: usize,
    pub n_restarts: usize,
    pub max_iters: usize,
    pub step_tol: f64,
    pub objective_tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: GemOptimizer,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            l: 4,
            t: 1,
            n_restarts: 8,
            max_iters: 500,
            step_tol: 1e-10,
            objective_tol: 1e-9,
            seed: 0,
            optimizer: GemOptimizer::Riemannian,
        }
    }
}

impl GemConfig {
    pub fn validate(&self) -> Result<(), GemError> {
        if self.l != 4 || self.t != 1 {
            return Err(GemError::Unsupported { l: self.l, t: self.t });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemResult {
    /// `-ln(objective)`, `+inf` when the objective is not positive (see `undefined`).
    pub value: f64,
    pub objective: f64,
    pub converged: bool,
    pub restarts_used: usize,
    pub undefined: bool,
    pub gates: [Matrix4<C64>; 3],
}

fn check_unitary(u: &Matrix4<C64>) -> Result<(), GemError> {
    let d = (u * u.adjoint() - Matrix4::identity()).norm();
    if d > UNITARITY_TOL {
        return Err(GemError::NonUnitary(d));
    }
    Ok(())
}

fn check_rho(rho: &DensityMatrix) -> Result<M16, GemError> {
    if rho.n_qubits() != GEM_SITES {
        return Err(GemError::WindowSize(rho.n_qubits()));
    }
    let d = rho.hermiticity_defect();
    if d > HERMITICITY_TOL {
        return Err(GemError::NonHermitian(d));
    }
    let m = rho.matrix();
    // exact Hermitian part, so the objective is real by construction
    Ok(M16::from_fn(|i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj())))
}

/// `tr_{0,3}` of a 16×16 operator, result indexed by `b1 + 2 b2`.
fn trace_boundary(r: &M16) -> Matrix4<C64> {
    Matrix4::from_fn(|a, b| {
        let mut acc = C64::new(0.0, 0.0);
        for b0 in 0..2 {
            for b3 in 0..2 {
                acc += r[(b0 | (a << 1) | (b3 << 3), b0 | (b << 1) | (b3 << 3))];
            }
        }
        acc
    })
}

/// `I ⊗ m ⊗ I` on qubits (1, 2).
fn embed_middle(m: &Matrix4<C64>) -> M16 {
    M16::from_fn(|i, j| {
        if (i & 0b1001) != (j & 0b1001) {
            return C64::new(0.0, 0.0);
        }
        m[((i >> 1) & 3, (j >> 1) & 3)]
    })
}

fn outer_layer(u12: &Matrix4<C64>, u34: &Matrix4<C64>) -> M16 {
    u34.kronecker(u12)
}

fn objective_raw(rho: &M16, g: &[Matrix4<C64>; 3]) -> f64 {
    let w = outer_layer(&g[0], &g[1]);
    let sigma = trace_boundary(&(w * rho * w.adjoint()));
    let row = g[2].row(0);
    (row * sigma * row.adjoint())[(0, 0)].re
}

/// `<00| U23 tr_{0,3}[(U12 ⊗ U34) ρ (U12 ⊗ U34)†] U23† |00>`.
pub fn gem_objective(rho: &DensityMatrix, u12: &Matrix4<C64>, u34: &Matrix4<C64>, u23: &Matrix4<C64>) -> Result<f64, GemError> {
    let r = check_rho(rho)?;
    for u in [u12, u34, u23] {
        check_unitary(u)?;
    }
    let g = [*u12, *u34, *u23];
    let w = outer_layer(u12, u34);
    let sigma = trace_boundary(&(w * r * w.adjoint()));
    let row = g[2].row(0);
    let f = (row * sigma * row.adjoint())[(0, 0)];
    debug_assert!(f.im.abs() <= 1e-10 * (1.0 + f.re.abs()));
    Ok(f.re)
}

/// Euclidean gradients `G_k` with `df = Re tr(G_k† dU_k)`.
pub fn gem_gradients(rho: &DensityMatrix, gates: &[Matrix4<C64>; 3]) -> Result<[Matrix4<C64>; 3], GemError> {
    let r = check_rho(rho)?;
    Ok(gradients(&r, gates))
}

fn gradients(rho: &M16, g: &[Matrix4<C64>; 3]) -> [Matrix4<C64>; 3] {
    let w = outer_layer(&g[0], &g[1]);
    let sigma = trace_boundary(&(w * rho * w.adjoint()));
    let mut p = Matrix4::zeros();
    p[(0, 0)] = C64::new(1.0, 0.0);
    let g23 = (p * g[2] * sigma) * C64::new(2.0, 0.0);
    let m = embed_middle(&(g[2].adjoint() * p * g[2]));
    let gw = (m * w * rho) * C64::new(2.0, 0.0);
    let mut g12 = Matrix4::zeros();
    let mut g34 = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                for l in 0..4 {
                    let v = gw[(i * 4 + k, j * 4 + l)];
                    g12[(k, l)] += v * g[1][(i, j)].conj();
                    g34[(i, j)] += v * g[0][(k, l)].conj();
                }
            }
        }
    }
    [g12, g34, g23]
}

fn cayley(a: &Matrix4<C64>, u: &Matrix4<C64>, tau: f64) -> Matrix4<C64> {
    let id = Matrix4::<C64>::identity();
    let half = a * C64::new(0.5 * tau, 0.0);
    let lhs = id - half;
    let rhs = (id + half) * u;
    lhs.lu().solve(&rhs).expect("I - τA/2 is invertible for skew-Hermitian A")
}

#[derive(Clone, Debug)]
struct Run {
    objective: f64,
    gates: [Matrix4<C64>; 3],
    converged: bool,
    history: Vec<f64>,
}

fn inner(a: &[Matrix4<C64>], b: &[Matrix4<C64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.adjoint() * y).trace().re).sum()
}

/// Polak-Ribière conjugate gradient on `U(4)^3`. Directions live in the Lie
/// algebra (`dU = A U`), so no vector transport is needed between iterates.
fn ascend(rho: &M16, start: [Matrix4<C64>; 3], cfg: &GemConfig) -> Run {
    let mut gates = start;
    let mut f = objective_raw(rho, &gates);
    let mut history = vec![f];
    let mut tau: f64 = 1.0;
    let mut prev: Option<(Vec<Matrix4<C64>>, Vec<Matrix4<C64>>)> = None;
    for _ in 0..cfg.max_iters {
        let grads = gradients(rho, &gates);
        // skew part of G U†, the Riemannian gradient in algebra coordinates
        let xs: Vec<Matrix4<C64>> = grads.iter().zip(&gates).map(|(g, u)| g * u.adjoint()).collect();
        let rgrad: Vec<Matrix4<C64>> = xs.iter().map(|x| (x - x.adjoint()) * C64::new(0.5, 0.0)).collect();
        let gnorm2 = inner(&rgrad, &rgrad);
        if gnorm2.sqrt() < 1e-12 {
            return Run { objective: f, gates, converged: true, history };
        }
        let mut dirs = rgrad.clone();
        if let Some((g_old, d_old)) = &prev {
            let diff: Vec<Matrix4<C64>> = rgrad.iter().zip(g_old).map(|(a, b)| a - b).collect();
            let beta = (inner(&rgrad, &diff) / inner(g_old, g_old)).max(0.0);
            for (d, o) in dirs.iter_mut().zip(d_old) {
                *d += o * C64::new(beta, 0.0);
            }
        }
        let mut slope = inner(&xs, &dirs);
        if slope <= 0.0 {
            dirs = rgrad.clone();
            slope = gnorm2;
        }
        let dnorm = inner(&dirs, &dirs).sqrt();
        tau = (tau * 2.0).min(1e3);
        let mut accepted = None;
        while tau * dnorm > cfg.step_tol {
            let trial = [
                cayley(&dirs[0], &gates[0], tau),
                cayley(&dirs[1], &gates[1], tau),
                cayley(&dirs[2], &gates[2], tau),
            ];
            let ft = objective_raw(rho, &trial);
            if ft >= f + 1e-4 * tau * slope {
                accepted = Some((trial, ft));
                break;
            }
            tau *= 0.5;
        }
        let Some((mut trial, mut ft)) = accepted else {
            return Run { objective: f, gates, converged: true, history };
        };
        // vertex of the parabola through f, f'(0) and f(τ)
        let curv = slope * tau - (ft - f);
        if curv > 0.0 {
            let tq = 0.5 * slope * tau * tau / curv;
            if (tq - tau).abs() > 1e-3 * tau {
                let t2 = [
                    cayley(&dirs[0], &gates[0], tq),
                    cayley(&dirs[1], &gates[1], tq),
                    cayley(&dirs[2], &gates[2], tq),
                ];
                let f2 = objective_raw(rho, &t2);
                if f2 > ft {
                    (trial, ft, tau) = (t2, f2, tq);
                }
            }
        }
        let gain = ft - f;
        gates = trial;
        f = ft;
        history.push(f);
        prev = Some((rgrad, dirs));
        if gain <= cfg.objective_tol && gnorm2 <= cfg.objective_tol {
            return Run { objective: f, gates, converged: true, history };
        }
    }
    Run { objective: f, gates, converged: false, history }
}

fn polar(g: &Matrix4<C64>) -> Matrix4<C64> {
    let svd = g.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

/// Alternating maximization of the linearization `Re tr(G_k† U_k)` for each
/// gate in turn. Only improving updates are kept.
fn polar_sweeps(rho: &M16, start: [Matrix4<C64>; 3], cfg: &GemConfig) -> Run {
    let mut gates = start;
    let mut f = objective_raw(rho, &gates);
    let mut history = vec![f];
    for _ in 0..cfg.max_iters {
        let before = f;
        for k in 0..3 {
            let grads = gradients(rho, &gates);
            if grads[k].norm() < 1e-14 {
                continue;
            }
            let mut trial = gates;
            trial[k] = polar(&grads[k]);
            let ft = objective_raw(rho, &trial);
            if ft > f {
                gates = trial;
                f = ft;
            }
        }
        history.push(f);
        if f - before <= cfg.objective_tol {
            return Run { objective: f, gates, converged: true, history };
        }
    }
    Run { objective: f, gates, converged: false, history }
}

fn run_one(rho: &M16, start: [Matrix4<C64>; 3], cfg: &GemConfig) -> Run {
    match cfg.optimizer {
        GemOptimizer::Riemannian => ascend(rho, start, cfg),
        GemOptimizer::Polar => polar_sweeps(rho, start, cfg),
    }
}

fn start_gates(cfg: &GemConfig, restart: usize) -> [Matrix4<C64>; 3] {
    if restart == 0 {
        return [Matrix4::identity(); 3];
    }
    let mut rng = keyed_rng(cfg.seed, &[TAG_GEM, restart as u64]);
    [haar_u4(&mut rng), haar_u4(&mut rng), haar_u4(&mut rng)]
}

/// Objective trajectory of one restart, for diagnostics.
pub fn gem_trace(rho: &DensityMatrix, cfg: &GemConfig, restart: usize) -> Result<Vec<f64>, GemError> {
    cfg.validate()?;
    let r = check_rho(rho)?;
    Ok(run_one(&r, start_gates(cfg, restart), cfg).history)
}

/// Best objective over the identity start and `n_restarts` Haar-random starts.
pub fn local_gem(rho: &DensityMatrix, cfg: &GemConfig) -> Result<GemResult, GemError> {
    cfg.validate()?;
    let r = check_rho(rho)?;
    let runs: Vec<Run> = (0..=cfg.n_restarts)
        .into_par_iter()
        .map(|k| run_one(&r, start_gates(cfg, k), cfg))
        .collect();
    let best = runs
        .iter()
        .max_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least the identity start");
    let undefined = !(best.objective > 0.0);
    Ok(GemResult {
        value: if undefined { f64::INFINITY } else { -best.objective.ln() },
        objective: best.objective,
        converged: best.converged,
        restarts_used: runs.len(),
        undefined,
        gates: best.gates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemClassification {
    /// 1 = SSB (`L > threshold`), 0 = trivial.
    pub label: u8,
    pub result: GemResult,
}

/// Tomographic mean of a four-site shadow set, then `local_gem` and a threshold.
pub fn gem_classify(set: &ShadowSet, cfg: &GemConfig, threshold: f64) -> Result<GemClassification, GemError> {
    if set.patch_length() != GEM_SITES {
        return Err(GemError::WindowSize(set.patch_length()));
    }
    let rho = mean_snapshot(set, &[0, 1, 2, 3])?;
    let result = local_gem(&rho, cfg)?;
    Ok(GemClassification {
        label: u8::from(result.value > threshold),
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn rho_from(m: DMatrix<C64>) -> DensityMatrix {
        DensityMatrix::from_matrix(m)
    }

    fn ghz_marginal() -> DensityMatrix {
        let mut m = DMatrix::zeros(16, 16);
        m[(0, 0)] = c(0.5);
        m[(15, 15)] = c(0.5);
        rho_from(m)
    }

    fn random_hermitian(rng: &mut ChaCha8Rng) -> DensityMatrix {
        let a = DMatrix::from_fn(16, 16, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        rho_from(&a + a.adjoint())
    }

    /// 4-qubit pure state from a product of single-qubit states.
    fn product_rho(rng: &mut ChaCha8Rng) -> DensityMatrix {
        let sites: Vec<[C64; 2]> = (0..4)
            .map(|_| {
                let u = crate::randunit::haar_u2(rng);
                [u[(0, 0)], u[(1, 0)]]
            })
            .collect();
        let psi: Vec<C64> = (0..16)
            .map(|s| (0..4).map(|k| sites[k][(s >> k) & 1]).product())
            .collect();
        let v = nalgebra::DVector::from_vec(psi);
        rho_from(&v * v.adjoint())
    }

    /// Dense channel matrix: vec(σ_out) = K vec(ρ), built entrywise from basis inputs.
    fn channel_oracle(rho: &DensityMatrix, g: &[Matrix4<C64>; 3]) -> f64 {
        let w: DMatrix<C64> = {
            let k = g[1].kronecker(&g[0]);
            DMatrix::from_fn(16, 16, |i, j| k[(i, j)])
        };
        let u23 = DMatrix::from_fn(16, 16, |i, j| {
            if (i & 0b1001) != (j & 0b1001) {
                c(0.0)
            } else {
                g[2][((i >> 1) & 3, (j >> 1) & 3)]
            }
        });
        let total = &u23 * &w;
        let mut out = C64::new(0.0, 0.0);
        // <00| on qubits 1,2, trace over qubits 0,3, summed over basis inputs E_ab
        for a in 0..16 {
            for b in 0..16 {
                let mut kab = C64::new(0.0, 0.0);
                for b0 in 0..2 {
                    for b3 in 0..2 {
                        let o = b0 | (b3 << 3);
                        kab += total[(o, a)] * total[(o, b)].conj();
                    }
                }
                out += kab * rho.matrix()[(a, b)];
            }
        }
        out.re
    }

    fn cnot(control_low: bool) -> Matrix4<C64> {
        // index b_lo + 2 b_hi
        let mut m = Matrix4::zeros();
        for s in 0..4usize {
            let (lo, hi) = (s & 1, s >> 1);
            let t = if control_low { lo | ((hi ^ lo) << 1) } else { (lo ^ hi) | (hi << 1) };
            m[(t, s)] = c(1.0);
        }
        m
    }

    #[test]
    fn direct_contractions() {
        let mut m = DMatrix::zeros(16, 16);
        m[(0, 0)] = c(1.0);
        let id = Matrix4::identity();
        assert_eq!(gem_objective(&rho_from(m), &id, &id, &id).unwrap(), 1.0);
        assert!((gem_objective(&ghz_marginal(), &id, &id, &id).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rho = random_hermitian(&mut rng);
            let g = [haar_u4(&mut rng), haar_u4(&mut rng), haar_u4(&mut rng)];
            let f = gem_objective(&rho, &g[0], &g[1], &g[2]).unwrap();
            assert!((f - channel_oracle(&rho, &g)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let id = Matrix4::<C64>::identity();
        let mut m = DMatrix::zeros(16, 16);
        m[(0, 1)] = c(1.0);
        assert!(matches!(gem_objective(&rho_from(m), &id, &id, &id), Err(GemError::NonHermitian(_))));
        let bad = id * c(1.1);
        assert!(matches!(gem_objective(&ghz_marginal(), &bad, &id, &id), Err(GemError::NonUnitary(_))));
        let small = rho_from(DMatrix::identity(8, 8));
        assert!(matches!(gem_objective(&small, &id, &id, &id), Err(GemError::WindowSize(3))));
        let cfg = GemConfig { t: 2, ..GemConfig::default() };
        assert!(matches!(local_gem(&ghz_marginal(), &cfg), Err(GemError::Unsupported { .. })));
    }

    #[test]
    fn phase_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rho = random_hermitian(&mut rng);
        let g = [haar_u4(&mut rng), haar_u4(&mut rng), haar_u4(&mut rng)];
        let f = gem_objective(&rho, &g[0], &g[1], &g[2]).unwrap();
        let ph = C64::from_polar(1.0, 0.83);
        let f2 = gem_objective(&rho, &(g[0] * ph), &(g[1] * ph.conj()), &(g[2] * ph)).unwrap();
        assert!((f - f2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = random_hermitian(&mut rng);
        let g = [haar_u4(&mut rng), haar_u4(&mut rng), haar_u4(&mut rng)];
        let grads = gem_gradients(&rho, &g).unwrap();
        let r = check_rho(&rho).unwrap();
        for _ in 0..5 {
            // random skew-Hermitian tangent direction per gate
            let dirs: Vec<Matrix4<C64>> = (0..3)
                .map(|_| {
                    let x = Matrix4::from_fn(|_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
                    x - x.adjoint()
                })
                .collect();
            let analytic: f64 = (0..3).map(|k| (grads[k].adjoint() * dirs[k] * g[k]).trace().re).sum();
            let h = 1e-6;
            let at = |s: f64| {
                let t = [cayley(&dirs[0], &g[0], s), cayley(&dirs[1], &g[1], s), cayley(&dirs[2], &g[2], s)];
                objective_raw(&r, &t)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn ascent_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho = random_hermitian(&mut rng);
        let cfg = GemConfig::default();
        for k in 0..3 {
            let h = gem_trace(&rho, &cfg, k).unwrap();
            assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }

    #[test]
    fn pure_products_reach_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = GemConfig::default();
        for _ in 0..20 {
            let rho = product_rho(&mut rng);
            let r = local_gem(&rho, &cfg).unwrap();
            assert!(r.objective >= 1.0 - 1e-6, "{}", r.objective);
            assert!(r.value <= 1e-6);
        }
    }

    #[test]
    fn polar_strategy_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = GemConfig { optimizer: GemOptimizer::Polar, ..GemConfig::default() };
        let rho = product_rho(&mut rng);
        let r = local_gem(&rho, &cfg).unwrap();
        assert!(r.objective > 0.9 && r.objective <= 1.0 + 1e-12);
        let h = gem_trace(&rho, &cfg, 1).unwrap();
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cnot_pair_disentangles_ghz_marginal() {
        // both branches of the classical mixture map to |00> on the middle pair
        let id = Matrix4::identity();
        let f = gem_objective(&ghz_marginal(), &cnot(true), &cnot(false), &id).unwrap();
        assert!((f - 1.0).abs() < 1e-14);
        let r = local_gem(&ghz_marginal(), &GemConfig::default()).unwrap();
        assert!(r.objective > 1.0 - 1e-6);
    }

    #[test]
    fn non_positive_estimates_are_flagged() {
        let mut m = DMatrix::zeros(16, 16);
        m[(0, 0)] = c(-1.0);
        m[(15, 15)] = c(2.0);
        let neg = rho_from(DMatrix::identity(16, 16) * c(-0.25));
        let r = local_gem(&neg, &GemConfig::default()).unwrap();
        assert!(r.undefined && r.value.is_infinite());
        let r = local_gem(&rho_from(m), &GemConfig::default()).unwrap();
        assert!(!r.undefined && r.objective > 1.0 && r.value < 0.0);
    }
}
