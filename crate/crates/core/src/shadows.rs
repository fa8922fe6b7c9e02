//! Randomized single-qubit measurements on a patch and the estimators built
//! on top of them.
//!
//! Each snapshot records, per patch site, the measurement basis as Euler
//! angles and the Z outcome. Its inverse-channel reconstruction on one site is
//! `3 U^dag |b><b| U - I = (I + 3 n.σ) / 2` with `n` the Bloch vector of
//! `U^dag |b>`.

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64 as C64;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::qsim::{DensityMatrix, QsimError, Statevector};
use crate::randunit::{haar_euler, EulerAngles};
use crate::rng::{keyed_rng, TAG_MOM, TAG_SHADOW};

/// Largest site set for dense mean-snapshot tomography.
pub const MAX_TOMOGRAPHY_SITES: usize = 6;
/// Largest site set for the purity estimator.
pub const MAX_PURITY_SITES: usize = 4;
/// Score assigned to states whose mutual-information estimate is undefined.
pub const MI_SENTINEL: f64 = -1.0e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadowError {
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error("empty site set")]
    EmptySites,
    #[error("site {site} outside patch of length {len}")]
    SiteOutsidePatch { site: usize, len: usize },
    #[error("{0} sites exceeds the estimator limit of {1}")]
    TooManySites(usize, usize),
    #[error("median-of-means needs at least 2 snapshots per block: n_s={n_s}, K={k}")]
    TooFewSnapshots { n_s: usize, k: usize },
    #[error("purity estimate for {subsystem} is non-positive ({value}); raise n_s")]
    EstimatorUndefined { subsystem: &'static str, value: f64 },
    #[error("shadow sets disagree on patch length: {0} vs {1}")]
    MixedPatchLength(usize, usize),
    #[error("shadow set is empty")]
    EmptySet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteRecord {
    pub angles: EulerAngles,
    pub bit: u8,
}

impl SiteRecord {
    /// Bloch vector of the post-measurement state `U^dag |b>`.
    pub fn bloch(&self) -> [f64; 3] {
        let u = self.angles.matrix();
        let b = self.bit as usize;
        let (v0, v1) = (u[(b, 0)].conj(), u[(b, 1)].conj());
        let cross = v0.conj() * v1;
        [2.0 * cross.re, 2.0 * cross.im, v0.norm_sqr() - v1.norm_sqr()]
    }

    /// Single-site inverse-channel estimate `3 U^dag |b><b| U - I`.
    pub fn density(&self) -> Matrix2<C64> {
        let u = self.angles.matrix();
        let b = self.bit as usize;
        let row = u.row(b);
        let proj = row.adjoint() * row;
        proj * C64::new(3.0, 0.0) - Matrix2::identity()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSnapshot {
    pub sites: Vec<SiteRecord>,
}

impl ShadowSnapshot {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSet {
    patch_length: usize,
    snapshots: Vec<ShadowSnapshot>,
    pub label: Option<u8>,
}

impl ShadowSet {
    pub fn new(patch_length: usize, snapshots: Vec<ShadowSnapshot>) -> Result<Self, ShadowError> {
        if snapshots.is_empty() {
            return Err(ShadowError::EmptySet);
        }
        if let Some(s) = snapshots.iter().find(|s| s.len() != patch_length) {
            return Err(ShadowError::MixedPatchLength(patch_length, s.len()));
        }
        Ok(Self {
            patch_length,
            snapshots,
            label: None,
        })
    }

    /// Builds a set from a flat `n_s x l x 4` record `(θ, φ, χ, bit)`.
    pub fn from_flat(l: usize, data: &[f32]) -> Result<Self, ShadowError> {
        let snaps = data
            .chunks_exact(4 * l)
            .map(|snap| ShadowSnapshot {
                sites: snap
                    .chunks_exact(4)
                    .map(|r| SiteRecord {
                        angles: EulerAngles::new(r[0] as f64, r[1] as f64, r[2] as f64),
                        bit: u8::from(r[3] >= 0.5),
                    })
                    .collect(),
            })
            .collect();
        Self::new(l, snaps)
    }

    /// Flat float32 layout, `n_s x l x 4`.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.snapshots.len() * self.patch_length * 4);
        for s in &self.snapshots {
            for r in &s.sites {
                out.extend_from_slice(&[r.angles.theta as f32, r.angles.phi as f32, r.angles.chi as f32, r.bit as f32]);
            }
        }
        out
    }

    pub fn patch_length(&self) -> usize {
        self.patch_length
    }

    pub fn n_shadows(&self) -> usize {
        self.snapshots.len()
    }

    pub fn snapshots(&self) -> &[ShadowSnapshot] {
        &self.snapshots
    }

    /// First `n` snapshots.
    pub fn truncated(&self, n: usize) -> Result<Self, ShadowError> {
        let mut s = Self::new(self.patch_length, self.snapshots[..n.min(self.snapshots.len())].to_vec())?;
        s.label = self.label;
        Ok(s)
    }

    /// Restriction to the window `[first, first + len)` of the patch.
    pub fn window(&self, first: usize, len: usize) -> Result<Self, ShadowError> {
        if first + len > self.patch_length || len == 0 {
            return Err(ShadowError::SiteOutsidePatch {
                site: first + len,
                len: self.patch_length,
            });
        }
        let snaps = self
            .snapshots
            .iter()
            .map(|s| ShadowSnapshot {
                sites: s.sites[first..first + len].to_vec(),
            })
            .collect();
        let mut s = Self::new(len, snaps)?;
        s.label = self.label;
        Ok(s)
    }
}

/// How measurement bases are drawn. `Fixed` is a test hook.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisChoice {
    Haar,
    Fixed(EulerAngles),
}

fn check_patch(state: &Statevector, patch_start: usize, l: usize) -> Result<(), ShadowError> {
    if l == 0 || patch_start + l > state.n_qubits() {
        return Err(QsimError::BadWindow {
            first: patch_start,
            len: l,
            n_qubits: state.n_qubits(),
        }
        .into());
    }
    Ok(())
}

fn one_snapshot<R: Rng + ?Sized>(p: &crate::qsim::Purification, l: usize, basis: BasisChoice, rng: &mut R) -> ShadowSnapshot {
    let angles: Vec<EulerAngles> = (0..l)
        .map(|_| match basis {
            BasisChoice::Haar => haar_euler(rng),
            BasisChoice::Fixed(a) => a,
        })
        .collect();
    let gates: Vec<_> = angles.iter().map(EulerAngles::matrix).collect();
    let bits = p.sample(&gates, rng);
    ShadowSnapshot {
        sites: angles.into_iter().zip(bits).map(|(angles, bit)| SiteRecord { angles, bit }).collect(),
    }
}

/// `n_s` rounds of random single-qubit measurements on `[patch_start, patch_start + l)`.
pub fn measure_shadows<R: Rng + ?Sized>(
    state: &Statevector,
    patch_start: usize,
    l: usize,
    n_s: usize,
    rng: &mut R,
) -> Result<ShadowSet, ShadowError> {
    measure_shadows_with(state, patch_start, l, n_s, BasisChoice::Haar, rng)
}

pub fn measure_shadows_with<R: Rng + ?Sized>(
    state: &Statevector,
    patch_start: usize,
    l: usize,
    n_s: usize,
    basis: BasisChoice,
    rng: &mut R,
) -> Result<ShadowSet, ShadowError> {
    check_patch(state, patch_start, l)?;
    let p = state.window_purification(patch_start, l)?;
    let snaps = (0..n_s).map(|_| one_snapshot(&p, l, basis, rng)).collect();
    ShadowSet::new(l, snaps)
}

/// Like [`measure_shadows_with`], but snapshot `k` draws from its own stream
/// keyed by `(seed, state_index, k)`.
pub fn measure_shadows_keyed(
    state: &Statevector,
    patch_start: usize,
    l: usize,
    n_s: usize,
    basis: BasisChoice,
    seed: u64,
    state_index: u64,
) -> Result<ShadowSet, ShadowError> {
    check_patch(state, patch_start, l)?;
    let p = state.window_purification(patch_start, l)?;
    let snaps = (0..n_s)
        .map(|k| {
            let mut rng = keyed_rng(seed, &[TAG_SHADOW, state_index, k as u64]);
            one_snapshot(&p, l, basis, &mut rng)
        })
        .collect();
    ShadowSet::new(l, snaps)
}

fn check_sites(sites: &[usize], l: usize, cap: usize) -> Result<(), ShadowError> {
    if sites.is_empty() {
        return Err(ShadowError::EmptySites);
    }
    if sites.len() > cap {
        return Err(ShadowError::TooManySites(sites.len(), cap));
    }
    if let Some(&s) = sites.iter().find(|&&s| s >= l) {
        return Err(ShadowError::SiteOutsidePatch { site: s, len: l });
    }
    Ok(())
}

/// `a ⊗ b` with `b` on the low bits.
fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ra * rb, ca * cb, |r, c| a[(r / rb, c / cb)] * b[(r % rb, c % cb)])
}

fn snapshot_matrix(snap: &ShadowSnapshot, sites: &[usize]) -> DMatrix<C64> {
    // first listed site is the least significant qubit
    let mut acc = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
    for &s in sites {
        let d = snap.sites[s].density();
        let d = DMatrix::from_fn(2, 2, |r, c| d[(r, c)]);
        acc = kron(&d, &acc);
    }
    acc
}

/// Product over `sites` of the single-site inverse-channel estimates. Trace
/// one, Hermitian, generally not positive.
pub fn snapshot_density(snap: &ShadowSnapshot, sites: &[usize]) -> Result<DensityMatrix, ShadowError> {
    check_sites(sites, snap.len(), usize::MAX)?;
    Ok(DensityMatrix::from_matrix(snapshot_matrix(snap, sites)))
}

/// Average of [`snapshot_density`] over the set.
pub fn mean_snapshot(set: &ShadowSet, sites: &[usize]) -> Result<DensityMatrix, ShadowError> {
    check_sites(sites, set.patch_length(), MAX_TOMOGRAPHY_SITES)?;
    let dim = 1 << sites.len();
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    for s in set.snapshots() {
        acc += snapshot_matrix(s, sites);
    }
    acc /= C64::new(set.n_shadows() as f64, 0.0);
    Ok(DensityMatrix::from_matrix(acc))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MomConfig {
    /// Number of median-of-means blocks.
    pub k: usize,
    pub seed: u64,
}

impl Default for MomConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomEstimate {
    pub value: f64,
    pub block_values: Vec<f64>,
    /// Unordered snapshot pairs evaluated, `K * m (m - 1) / 2` for block size `m`.
    pub pair_evaluations: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Snapshot order used for block assignment: canonical sort followed by a
/// seeded shuffle, so the estimate depends only on the multiset of snapshots.
fn block_order(set: &ShadowSet, seed: u64) -> Vec<usize> {
    let key = |s: &ShadowSnapshot| -> Vec<(u64, u64, u64, u8)> {
        s.sites
            .iter()
            .map(|r| (r.angles.theta.to_bits(), r.angles.phi.to_bits(), r.angles.chi.to_bits(), r.bit))
            .collect()
    };
    let snaps = set.snapshots();
    let mut idx: Vec<usize> = (0..snaps.len()).collect();
    idx.sort_by_cached_key(|&i| key(&snaps[i]));
    idx.shuffle(&mut keyed_rng(seed, &[TAG_MOM]));
    idx
}

/// Median-of-means estimate of `tr ρ_S^2` from the pairwise U-statistic
/// `tr(ρ̂_j ρ̂_l)`, `j != l`, within each of `K` equal blocks. Leftover
/// snapshots beyond `K * floor(n_s / K)` are dropped.
pub fn purity_mom(set: &ShadowSet, sites: &[usize], cfg: &MomConfig) -> Result<MomEstimate, ShadowError> {
    check_sites(sites, set.patch_length(), MAX_PURITY_SITES)?;
    let n_s = set.n_shadows();
    let k = cfg.k.max(1);
    let m = n_s / k;
    if m < 2 {
        return Err(ShadowError::TooFewSnapshots { n_s, k: cfg.k });
    }
    let order = block_order(set, cfg.seed);
    let blochs: Vec<Vec<[f64; 3]>> = order
        .iter()
        .map(|&i| sites.iter().map(|&s| set.snapshots()[i].sites[s].bloch()).collect())
        .collect();
    let mut block_values = Vec::with_capacity(k);
    let mut pairs = 0usize;
    for block in blochs.chunks_exact(m).take(k) {
        let mut sum = 0.0;
        for j in 0..m {
            for l in (j + 1)..m {
                let mut prod = 1.0;
                for (a, b) in block[j].iter().zip(&block[l]) {
                    prod *= 0.5 * (1.0 + 9.0 * (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]));
                }
                sum += prod;
            }
        }
        pairs += m * (m - 1) / 2;
        block_values.push(2.0 * sum / (m * (m - 1)) as f64);
    }
    let value = median(&mut block_values.clone());
    Ok(MomEstimate {
        value,
        block_values,
        pair_evaluations: pairs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutualInformation {
    /// `ln[p_AB / (p_A p_B)]`, natural logarithm.
    pub value: f64,
    pub purity_a: f64,
    pub purity_b: f64,
    pub purity_ab: f64,
}

/// Rényi-2 mutual information between single patch sites `a` and `b`.
pub fn renyi2_mutual_information(set: &ShadowSet, a: usize, b: usize, cfg: &MomConfig) -> Result<MutualInformation, ShadowError> {
    let pa = purity_mom(set, &[a], cfg)?.value;
    let pb = purity_mom(set, &[b], cfg)?.value;
    let pab = purity_mom(set, &[a, b], cfg)?.value;
    for (name, v) in [("A", pa), ("B", pb), ("AB", pab)] {
        if !(v > 0.0) {
            return Err(ShadowError::EstimatorUndefined { subsystem: name, value: v });
        }
    }
    Ok(MutualInformation {
        value: (pab / (pa * pb)).ln(),
        purity_a: pa,
        purity_b: pb,
        purity_ab: pab,
    })
}

/// Mutual information between the leftmost and rightmost patch sites.
pub fn end_to_end_mi(set: &ShadowSet, cfg: &MomConfig) -> Result<MutualInformation, ShadowError> {
    renyi2_mutual_information(set, 0, set.patch_length() - 1, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiClassification {
    pub labels: Vec<u8>,
    /// Raw estimates; undefined ones are replaced by [`MI_SENTINEL`].
    pub scores: Vec<f64>,
    pub undefined: Vec<bool>,
}

/// Labels a state SSB (1) iff its end-to-end mutual information exceeds `threshold`.
pub fn mi_classify(sets: &[ShadowSet], threshold: f64, cfg: &MomConfig) -> Result<MiClassification, ShadowError> {
    let l = sets.first().map(ShadowSet::patch_length).unwrap_or(0);
    if let Some(s) = sets.iter().find(|s| s.patch_length() != l) {
        return Err(ShadowError::MixedPatchLength(l, s.patch_length()));
    }
    let mut out = MiClassification {
        labels: Vec::with_capacity(sets.len()),
        scores: Vec::with_capacity(sets.len()),
        undefined: Vec::with_capacity(sets.len()),
    };
    for set in sets {
        let (score, undefined) = match end_to_end_mi(set, cfg) {
            Ok(mi) => (mi.value, false),
            Err(ShadowError::EstimatorUndefined { .. }) => (MI_SENTINEL, true),
            Err(e) => return Err(e),
        };
        out.labels.push(u8::from(score > threshold));
        out.scores.push(score);
        out.undefined.push(undefined);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randunit::haar_u2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fixed_basis_on_eigenstate() {
        let s = Statevector::new_all_ones(6).unwrap();
        let set = measure_shadows_with(&s, 1, 4, 50, BasisChoice::Fixed(EulerAngles::default()), &mut rng(1)).unwrap();
        assert!(set.snapshots().iter().all(|sn| sn.sites.iter().all(|r| r.bit == 1)));
        assert_eq!(set.to_flat().len(), 50 * 4 * 4);
        assert!(matches!(measure_shadows(&s, 4, 4, 1, &mut rng(1)), Err(ShadowError::Qsim(_))));
    }

    #[test]
    fn single_site_density_examples() {
        let up = ShadowSnapshot {
            sites: vec![SiteRecord { angles: EulerAngles::default(), bit: 0 }],
        };
        let d = snapshot_density(&up, &[0]).unwrap();
        let m = d.matrix();
        assert!((m[(0, 0)].re - 2.0).abs() < 1e-15 && (m[(1, 1)].re + 1.0).abs() < 1e-15);
        assert!(m[(0, 1)].norm() < 1e-15);
        let down = ShadowSnapshot {
            sites: vec![SiteRecord { angles: EulerAngles::default(), bit: 1 }],
        };
        let m = snapshot_density(&down, &[0]).unwrap().into_matrix();
        assert!((m[(0, 0)].re + 1.0).abs() < 1e-15 && (m[(1, 1)].re - 2.0).abs() < 1e-15);
        assert_eq!(snapshot_density(&down, &[]), Err(ShadowError::EmptySites));
    }

    #[test]
    fn snapshot_trace_and_bloch_agree() {
        let mut r = rng(2);
        for _ in 0..200 {
            let rec = SiteRecord {
                angles: haar_euler(&mut r),
                bit: r.gen_range(0..2),
            };
            let d = rec.density();
            assert!((d.trace() - C64::new(1.0, 0.0)).norm() < 1e-12);
            let n = rec.bloch();
            let from_bloch = Matrix2::new(
                C64::new(1.0 + 3.0 * n[2], 0.0),
                C64::new(3.0 * n[0], -3.0 * n[1]),
                C64::new(3.0 * n[0], 3.0 * n[1]),
                C64::new(1.0 - 3.0 * n[2], 0.0),
            ) * C64::new(0.5, 0.0);
            assert!((d - from_bloch).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_channel_is_unbiased() {
        let mut r = rng(3);
        let mut state = Statevector::basis(1, 0).unwrap();
        state.apply_1q(0, &haar_u2(&mut r)).unwrap();
        let exact = state.reduced_density_matrix(0, 1).unwrap();
        let set = measure_shadows(&state, 0, 1, 100_000, &mut r).unwrap();
        let est = mean_snapshot(&set, &[0]).unwrap();
        assert!((est.matrix() - exact.matrix()).iter().all(|x| x.norm() < 0.02));
    }

    #[test]
    fn mean_snapshot_examples() {
        let zero = Statevector::basis(3, 0).unwrap();
        let set = measure_shadows(&zero, 0, 3, 10_000, &mut rng(4)).unwrap();
        let m = mean_snapshot(&set, &[1]).unwrap().into_matrix();
        assert!((m[(0, 0)].re - 1.0).abs() < 0.05 && m[(1, 1)].re.abs() < 0.05);

        let one = set.truncated(1).unwrap();
        assert_eq!(mean_snapshot(&one, &[0, 2]).unwrap(), snapshot_density(&one.snapshots()[0], &[0, 2]).unwrap());

        let ghz = Statevector::new_ghz(8).unwrap();
        let set = measure_shadows(&ghz, 1, 6, 10_000, &mut rng(5)).unwrap();
        let m = mean_snapshot(&set, &[0]).unwrap();
        let half = DMatrix::<C64>::identity(2, 2) * C64::new(0.5, 0.0);
        assert!((m.matrix() - half).iter().all(|x| x.norm() < 0.05));
        assert!(matches!(mean_snapshot(&set, &[0, 1, 2, 3, 4, 5, 0]), Err(ShadowError::TooManySites(7, 6))));
        let tr = mean_snapshot(&set, &[0, 3, 5]).unwrap().trace();
        assert!((tr - C64::new(1.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn tomography_error_shrinks_with_shots() {
        let mut r = rng(6);
        let mut s = Statevector::new_ghz(4).unwrap();
        for q in 0..4 {
            s.apply_1q(q, &haar_u2(&mut r)).unwrap();
        }
        let exact = s.reduced_density_matrix(0, 2).unwrap();
        let full = measure_shadows(&s, 0, 2, 10_000, &mut r).unwrap();
        let dist: Vec<f64> = [100, 1000, 10_000]
            .iter()
            .map(|&n| mean_snapshot(&full.truncated(n).unwrap(), &[0, 1]).unwrap().trace_distance(&exact))
            .collect();
        assert!(dist[0] > dist[1] && dist[1] > dist[2], "{dist:?}");
    }

    #[test]
    fn purity_estimates() {
        let cfg = MomConfig::default();
        let zero = Statevector::basis(4, 0).unwrap();
        let set = measure_shadows(&zero, 0, 4, 10_000, &mut rng(7)).unwrap();
        let p = purity_mom(&set, &[0], &cfg).unwrap();
        assert!((p.value - 1.0).abs() < 0.05, "{}", p.value);
        assert_eq!(p.pair_evaluations, 10 * 1000 * 999 / 2);

        let ghz = Statevector::new_ghz(6).unwrap();
        let set = measure_shadows(&ghz, 0, 6, 10_000, &mut rng(8)).unwrap();
        assert!((purity_mom(&set, &[0], &cfg).unwrap().value - 0.5).abs() < 0.05);

        let plus = Statevector::new_product_plus(4).unwrap();
        let set = measure_shadows(&plus, 0, 4, 10_000, &mut rng(9)).unwrap();
        let joint = purity_mom(&set, &[0, 3], &cfg).unwrap().value;
        let prod = purity_mom(&set, &[0], &cfg).unwrap().value * purity_mom(&set, &[3], &cfg).unwrap().value;
        assert!((joint - prod).abs() < 0.1);

        let tiny = set.truncated(15).unwrap();
        assert!(matches!(purity_mom(&tiny, &[0], &cfg), Err(ShadowError::TooFewSnapshots { .. })));
    }

    #[test]
    fn purity_is_permutation_invariant() {
        let s = Statevector::new_ghz(4).unwrap();
        let set = measure_shadows(&s, 0, 4, 300, &mut rng(10)).unwrap();
        let mut snaps = set.snapshots().to_vec();
        snaps.shuffle(&mut rng(11));
        let shuffled = ShadowSet::new(4, snaps).unwrap();
        for k in [1, 5] {
            let cfg = MomConfig { k, seed: 3 };
            let a = purity_mom(&set, &[0, 2], &cfg).unwrap().value;
            let b = purity_mom(&shuffled, &[0, 2], &cfg).unwrap().value;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn identical_snapshots_give_snapshot_purity() {
        let rec = SiteRecord {
            angles: EulerAngles::new(1.0, 2.0, -0.5),
            bit: 1,
        };
        let snap = ShadowSnapshot { sites: vec![rec, rec] };
        let set = ShadowSet::new(2, vec![snap.clone(); 40]).unwrap();
        let direct = snapshot_density(&snap, &[0, 1]).unwrap().purity();
        let est = purity_mom(&set, &[0, 1], &MomConfig { k: 1, seed: 0 }).unwrap().value;
        assert!((est - direct).abs() <= 1e-13 * direct, "{est} vs {direct}");
        assert!((direct - 25.0).abs() < 1e-10);
    }

    #[test]
    fn mutual_information_anchors() {
        let cfg = MomConfig::default();
        let ghz = Statevector::new_ghz(8).unwrap();
        let set = measure_shadows(&ghz, 1, 6, 10_000, &mut rng(12)).unwrap();
        let mi = end_to_end_mi(&set, &cfg).unwrap();
        assert!((mi.value - 2f64.ln()).abs() < 0.1, "{mi:?}");

        let plus = Statevector::new_product_plus(8).unwrap();
        let set = measure_shadows(&plus, 1, 6, 10_000, &mut rng(13)).unwrap();
        assert!(end_to_end_mi(&set, &cfg).unwrap().value.abs() < 0.1);
    }

    #[test]
    fn mi_classification_flags_undefined() {
        let cfg = MomConfig { k: 1, seed: 0 };
        // half the snapshots point up, half down: the pair average is negative
        let a = SiteRecord { angles: EulerAngles::default(), bit: 0 };
        let b = SiteRecord { angles: EulerAngles::default(), bit: 1 };
        let snaps: Vec<_> = (0..8)
            .map(|i| ShadowSnapshot {
                sites: vec![if i % 2 == 0 { a } else { b }, a],
            })
            .collect();
        let weird = ShadowSet::new(2, snaps).unwrap();
        let plus = Statevector::new_product_plus(4).unwrap();
        let ok = measure_shadows(&plus, 0, 2, 2000, &mut rng(14)).unwrap();
        let res = mi_classify(&[weird, ok], 0.3, &cfg).unwrap();
        assert_eq!(res.undefined, vec![true, false]);
        assert_eq!(res.scores[0], MI_SENTINEL);
        assert_eq!(res.labels[0], 0);
        let three = measure_shadows(&plus, 0, 3, 10, &mut rng(1)).unwrap();
        let two = measure_shadows(&plus, 0, 2, 10, &mut rng(1)).unwrap();
        assert!(matches!(mi_classify(&[two, three], 0.3, &cfg), Err(ShadowError::MixedPatchLength(2, 3))));
    }

    #[test]
    fn flat_roundtrip_keeps_shape() {
        let plus = Statevector::new_product_plus(5).unwrap();
        let set = measure_shadows(&plus, 0, 3, 7, &mut rng(15)).unwrap();
        let flat = set.to_flat();
        let back = ShadowSet::from_flat(3, &flat).unwrap();
        assert_eq!(back.n_shadows(), 7);
        assert_eq!(back.to_flat(), flat);
    }
}
