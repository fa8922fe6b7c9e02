//! Haar-random unitaries on U(2) and U(4), and the three-angle
//! parameterization used to record single-qubit measurement bases.
//!
//! The parameterization is
//!
//! ```text
//! U(θ, φ, χ) = [ cos(θ/2) e^{ i(φ+χ)/2}   i sin(θ/2) e^{ i(φ-χ)/2} ]
//!              [ i sin(θ/2) e^{-i(φ-χ)/2}  cos(θ/2) e^{-i(φ+χ)/2} ]
//! ```
//!
//! which covers SU(2); a general U(2) element is `e^{iα} U(θ, φ, χ)`.

use nalgebra::{DMatrix, Matrix2, Matrix4};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{PI, TAU};
use thiserror::Error;

use crate::qsim::UNITARITY_TOL;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandUnitError {
    #[error("unsupported unitary dimension {0} (expected 2 or 4)")]
    UnsupportedDim(usize),
    #[error("euler angles out of range: theta={theta}, phi={phi}, chi={chi}")]
    AngleRange { theta: f64, phi: f64, chi: f64 },
    #[error("matrix is not unitary: |u^dag u - I| = {0:e}")]
    NonUnitary(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EulerAngles {
    /// `[0, 2π)`
    pub theta: f64,
    /// `[0, 2π)`
    pub phi: f64,
    /// `[-2π, 2π)`
    pub chi: f64,
}

impl EulerAngles {
    pub fn new(theta: f64, phi: f64, chi: f64) -> Self {
        Self { theta, phi, chi }
    }

    pub fn in_range(&self) -> bool {
        (0.0..TAU).contains(&self.theta) && (0.0..TAU).contains(&self.phi) && (-TAU..TAU).contains(&self.chi)
    }

    /// The matrix `U(θ, φ, χ)` without range validation (stored float32
    /// angles may round onto a range edge).
    pub fn matrix(&self) -> Matrix2<C64> {
        let (s, c) = (self.theta / 2.0).sin_cos();
        let p = (self.phi + self.chi) / 2.0;
        let m = (self.phi - self.chi) / 2.0;
        let i = C64::new(0.0, 1.0);
        Matrix2::new(
            C64::from_polar(c, p),
            i * C64::from_polar(s, m),
            i * C64::from_polar(s, -m),
            C64::from_polar(c, -p),
        )
    }
}

pub fn unitary_from_euler(a: &EulerAngles) -> Result<Matrix2<C64>, RandUnitError> {
    if !a.in_range() {
        return Err(RandUnitError::AngleRange {
            theta: a.theta,
            phi: a.phi,
            chi: a.chi,
        });
    }
    Ok(a.matrix())
}

fn wrap_tau(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU { 0.0 } else { y }
}

/// Returns angles and global phase `α` with `e^{iα} U(θ, φ, χ) = u`.
///
/// θ lands in `[0, π]`. When either `|u00|` or `|u01|` vanishes, χ is fixed to 0.
pub fn euler_from_unitary(u: &Matrix2<C64>) -> Result<(EulerAngles, f64), RandUnitError> {
    let d = (u.adjoint() * u - Matrix2::identity()).norm();
    if d > UNITARITY_TOL {
        return Err(RandUnitError::NonUnitary(d));
    }
    let mut alpha = u.determinant().arg() / 2.0;
    let v = u * C64::from_polar(1.0, -alpha);
    let (a, b) = (v[(0, 0)], v[(0, 1)]);
    let theta = 2.0 * b.norm().atan2(a.norm());
    const DEGENERATE: f64 = 1e-12;
    // half-sum p = (φ+χ)/2 and half-difference q = (φ-χ)/2
    let (p, q) = if a.norm() < DEGENERATE {
        let q = wrap_tau(b.arg() - PI / 2.0);
        (q, q)
    } else if b.norm() < DEGENERATE {
        let p = wrap_tau(a.arg());
        (p, p)
    } else {
        (wrap_tau(a.arg()), wrap_tau(b.arg() - PI / 2.0))
    };
    let mut phi = p + q;
    let chi = p - q;
    if phi >= TAU {
        // shifting both half-angles by -π negates U(θ, φ, χ); compensate in α
        phi -= TAU;
        alpha += PI;
    }
    let phi = if !(0.0..TAU).contains(&phi) { wrap_tau(phi) } else { phi };
    let alpha = alpha.rem_euclid(TAU);
    Ok((EulerAngles { theta, phi, chi }, alpha))
}

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im)
}

/// Gram-Schmidt on the columns of a complex Ginibre matrix. The implied `R`
/// factor has a positive real diagonal, which is the phase convention that
/// makes `Q` Haar distributed.
fn haar_columns<const D: usize, R: Rng + ?Sized>(rng: &mut R) -> [[C64; D]; D] {
    let mut cols = [[C64::new(0.0, 0.0); D]; D];
    for c in cols.iter_mut() {
        for x in c.iter_mut() {
            *x = gaussian_complex(rng);
        }
    }
    for j in 0..D {
        // two passes of projection for numerical orthogonality
        for _ in 0..2 {
            for k in 0..j {
                let proj: C64 = (0..D).map(|i| cols[k][i].conj() * cols[j][i]).sum();
                for i in 0..D {
                    let v = cols[k][i];
                    cols[j][i] -= proj * v;
                }
            }
        }
        let nrm = cols[j].iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        for x in cols[j].iter_mut() {
            *x /= nrm;
        }
    }
    cols
}

pub fn haar_u2<R: Rng + ?Sized>(rng: &mut R) -> Matrix2<C64> {
    let c = haar_columns::<2, R>(rng);
    Matrix2::from_fn(|r, k| c[k][r])
}

pub fn haar_u4<R: Rng + ?Sized>(rng: &mut R) -> Matrix4<C64> {
    let c = haar_columns::<4, R>(rng);
    Matrix4::from_fn(|r, k| c[k][r])
}

/// Dynamically sized entry point; `dim` must be 2 or 4.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<DMatrix<C64>, RandUnitError> {
    match dim {
        2 => {
            let u = haar_u2(rng);
            Ok(DMatrix::from_fn(2, 2, |r, c| u[(r, c)]))
        }
        4 => {
            let u = haar_u4(rng);
            Ok(DMatrix::from_fn(4, 4, |r, c| u[(r, c)]))
        }
        d => Err(RandUnitError::UnsupportedDim(d)),
    }
}

/// Haar-random measurement basis reduced to its stored angles.
pub fn haar_euler<R: Rng + ?Sized>(rng: &mut R) -> EulerAngles {
    let u = haar_u2(rng);
    euler_from_unitary(&u).expect("Haar sample is unitary").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::unitarity_defect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(a: &EulerAngles, alpha: f64) -> Matrix2<C64> {
        a.matrix() * C64::from_polar(1.0, alpha)
    }

    #[test]
    fn haar_samples_are_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(unitarity_defect(&haar_unitary(2, &mut rng).unwrap()) < 1e-12);
            assert!(unitarity_defect(&haar_unitary(4, &mut rng).unwrap()) < 1e-12);
        }
        assert_eq!(haar_unitary(3, &mut rng), Err(RandUnitError::UnsupportedDim(3)));
    }

    #[test]
    fn haar_first_moments() {
        // E[U |0><0| U^dag] = I/2 and E|<00|U|00>|^2 = 1/4
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut acc = Matrix2::<C64>::zeros();
        let mut overlap = 0.0;
        for _ in 0..n {
            let u = haar_u2(&mut rng);
            let col = u.column(0);
            acc += col * col.adjoint();
            overlap += haar_u4(&mut rng)[(0, 0)].norm_sqr();
        }
        acc /= C64::new(n as f64, 0.0);
        for r in 0..2 {
            for c in 0..2 {
                let want = if r == c { 0.5 } else { 0.0 };
                assert!((acc[(r, c)] - C64::new(want, 0.0)).norm() < 0.01);
            }
        }
        assert!((overlap / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn euler_matrix_examples() {
        let id = unitary_from_euler(&EulerAngles::new(0.0, 0.0, 0.0)).unwrap();
        assert!((id - Matrix2::identity()).norm() < 1e-15);
        let ix = unitary_from_euler(&EulerAngles::new(PI, 0.0, 0.0)).unwrap();
        assert!(ix[(0, 0)].norm() < 1e-15 && ix[(1, 1)].norm() < 1e-15);
        assert!((ix[(0, 1)] - C64::new(0.0, 1.0)).norm() < 1e-15);
        assert!((ix[(1, 0)] - C64::new(0.0, 1.0)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = EulerAngles::new(rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(-TAU..TAU));
            let u = unitary_from_euler(&a).unwrap();
            assert!((u.adjoint() * u - Matrix2::identity()).norm() < 1e-14);
        }
        assert!(unitary_from_euler(&EulerAngles::new(TAU, 0.0, 0.0)).is_err());
        assert!(unitary_from_euler(&EulerAngles::new(0.0, 0.0, TAU)).is_err());
    }

    #[test]
    fn euler_decomposition() {
        let (a, alpha) = euler_from_unitary(&Matrix2::identity()).unwrap();
        assert_eq!((a.theta, a.phi, a.chi), (0.0, 0.0, 0.0));
        assert!(alpha.abs() < 1e-15);

        let ix = EulerAngles::new(PI, 0.0, 0.0).matrix();
        let (a, alpha) = euler_from_unitary(&ix).unwrap();
        assert!((a.theta - PI).abs() < 1e-12);
        assert!((reconstruct(&a, alpha) - ix).norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let u = haar_u2(&mut rng);
            let (a, alpha) = euler_from_unitary(&u).unwrap();
            assert!(a.in_range(), "{a:?}");
            worst = worst.max((reconstruct(&a, alpha) - u).norm());
        }
        assert!(worst <= 1e-9, "worst = {worst}");

        // diagonal and anti-diagonal phases hit the degenerate branches
        for u in [
            Matrix2::new(C64::from_polar(1.0, 2.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::from_polar(1.0, -0.3)),
            Matrix2::new(C64::new(0.0, 0.0), C64::from_polar(1.0, 1.0), C64::from_polar(1.0, 0.4), C64::new(0.0, 0.0)),
        ] {
            let (a, alpha) = euler_from_unitary(&u).unwrap();
            assert_eq!(a.chi, 0.0);
            assert!(a.in_range());
            assert!((reconstruct(&a, alpha) - u).norm() < 1e-12);
        }
        let bad = Matrix2::new(C64::new(2.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0));
        assert!(matches!(euler_from_unitary(&bad), Err(RandUnitError::NonUnitary(_))));
    }

    #[test]
    fn angle_streams_are_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| haar_euler(&mut rng)).collect::<Vec<_>>()
        };
        let (a, b) = (draw(10), draw(10));
        assert!(a.iter().zip(&b).all(|(x, y)| {
            x.theta.to_bits() == y.theta.to_bits() && x.phi.to_bits() == y.phi.to_bits() && x.chi.to_bits() == y.chi.to_bits()
        }));
    }
}
