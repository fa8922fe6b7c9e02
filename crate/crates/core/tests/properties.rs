use nalgebra::Matrix2;
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qphase_core::datagen::{Dataset, DatasetError, HEADER_BYTES};
use qphase_core::groundstate::{dense_even_ground_energy, ising_boundary, lanczos_ground, AnnniParams, LanczosConfig};
use qphase_core::metrics::{roc_auc, roc_curve};
use qphase_core::qsim::Statevector;
use qphase_core::randunit::{euler_from_unitary, haar_u2, haar_u4};
use qphase_core::rng::keyed_rng;
use qphase_core::shadows::{measure_shadows, purity_mom, MomConfig, ShadowSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_state(n: usize, seed: u64) -> Statevector {
    let mut rng = keyed_rng(seed, &[1]);
    let mut amps: Vec<C64> = (0..1 << n)
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    amps.iter_mut().for_each(|a| *a /= norm);
    Statevector::from_amplitudes(amps).unwrap()
}

fn random_set(n: usize, l: usize, n_s: usize, seed: u64) -> ShadowSet {
    let psi = random_state(n, seed);
    measure_shadows(&psi, 0, l, n_s, &mut keyed_rng(seed, &[2])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gates_preserve_norm(n in 2usize..7, seed in any::<u64>(), steps in 1usize..30) {
        let mut psi = random_state(n, seed);
        let mut rng = keyed_rng(seed, &[3]);
        for _ in 0..steps {
            let site = rng.gen_range(0..n);
            if rng.gen_bool(0.5) {
                psi.apply_1q(site, &haar_u2(&mut rng)).unwrap();
            } else {
                // site n - 1 pairs with site 0 across the boundary
                psi.apply_2q(site, &haar_u4(&mut rng)).unwrap();
            }
        }
        prop_assert!((psi.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduced_density_matrices_are_states(n in 2usize..8, seed in any::<u64>(), first in 0usize..8, len in 1usize..4) {
        let psi = random_state(n, seed);
        let first = first % n;
        let len = len.min(n - first);
        let rho = psi.reduced_density_matrix(first, len).unwrap();
        prop_assert!((rho.trace() - C64::new(1.0, 0.0)).norm() < 1e-12);
        prop_assert!(rho.hermiticity_defect() < 1e-12);
        prop_assert!(rho.eigenvalues().iter().all(|&e| e > -1e-12));
        prop_assert!(rho.purity() <= 1.0 + 1e-12);
    }

    #[test]
    fn euler_decomposition_reconstructs_haar_samples(seed in any::<u64>()) {
        let u = haar_u2(&mut keyed_rng(seed, &[4]));
        let (a, alpha) = euler_from_unitary(&u).unwrap();
        prop_assert!(a.in_range());
        let back = a.matrix() * C64::from_polar(1.0, alpha);
        prop_assert!((back - u).norm() < 1e-10);
    }

    #[test]
    fn single_site_snapshots_have_unit_trace_and_bloch_length(seed in any::<u64>()) {
        let set = random_set(3, 3, 20, seed);
        for rec in set.snapshots().iter().flat_map(|s| &s.sites) {
            let d = rec.density();
            prop_assert!((d.trace() - C64::new(1.0, 0.0)).norm() < 1e-12);
            let r = rec.bloch();
            prop_assert!(((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) - 1.0).abs() < 1e-12);
            // 3 U^dag|b><b|U - I = I/2 + (3/2) r.sigma
            let expect = Matrix2::new(
                C64::new(0.5 + 1.5 * r[2], 0.0),
                C64::new(1.5 * r[0], -1.5 * r[1]),
                C64::new(1.5 * r[0], 1.5 * r[1]),
                C64::new(0.5 - 1.5 * r[2], 0.0),
            );
            prop_assert!((d - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn single_block_purity_ignores_snapshot_order(seed in any::<u64>(), site in 0usize..3) {
        let set = random_set(4, 3, 40, seed);
        let cfg = MomConfig { k: 1, seed: 0 };
        let a = purity_mom(&set, &[site], &cfg).unwrap().value;
        let mut snaps = set.snapshots().to_vec();
        snaps.shuffle(&mut keyed_rng(seed, &[5]));
        let b = purity_mom(&ShadowSet::new(3, snaps).unwrap(), &[site], &cfg).unwrap().value;
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn datasets_round_trip_and_reject_damage(seed in any::<u64>(), n_states in 1usize..4, n_s in 1usize..6, cut in 1usize..64) {
        let sets: Vec<ShadowSet> = (0..n_states).map(|i| random_set(4, 3, n_s, seed ^ i as u64)).collect();
        let d = Dataset::from_sets(4, 0, seed, &sets).unwrap();
        let mut bytes = Vec::new();
        d.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(&bytes, &again);
        for i in 0..n_states {
            let s = back.shadow_set(i).unwrap();
            prop_assert_eq!(s.label, None);
            prop_assert_eq!(s.to_flat(), sets[i].to_flat());
        }

        let short = &bytes[..bytes.len() - cut.min(bytes.len() - HEADER_BYTES)];
        let truncated = matches!(Dataset::read_from(&mut &short[..]), Err(DatasetError::Truncated { .. }));
        prop_assert!(truncated);
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        let bad_magic = matches!(Dataset::read_from(&mut bad.as_slice()), Err(DatasetError::BadMagic(_)));
        prop_assert!(bad_magic);
    }

    #[test]
    fn auc_is_antisymmetric_under_score_negation(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()) {
        let mut rng = keyed_rng(seed, &[6]);
        let mut labels: Vec<u8> = scores.iter().map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = roc_auc(&scores, &labels);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + roc_auc(&neg, &labels) - 1.0).abs() < 1e-12);
        let roc = roc_curve(&scores, &labels);
        prop_assert!(roc.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn ising_boundary_falls_from_one_to_zero(a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (g_lo, g_hi) = (ising_boundary(lo).unwrap(), ising_boundary(hi).unwrap());
        prop_assert!(g_hi <= g_lo + 1e-15);
        prop_assert!((0.0..=1.0).contains(&g_hi) && (0.0..=1.0).contains(&g_lo));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lanczos_matches_dense_even_sector(n in 4usize..9, g in 0.05f64..2.0, kappa in 0.0f64..1.5) {
        let p = AnnniParams::new(g, kappa, n);
        let r = lanczos_ground(&p, &LanczosConfig::default()).unwrap();
        let e = dense_even_ground_energy(&p).unwrap();
        prop_assert!((r.energy - e).abs() < 1e-8, "lanczos {} dense {}", r.energy, e);
        prop_assert!(r.is_even());
        prop_assert!((r.state.norm() - 1.0).abs() < 1e-10);
    }
}
