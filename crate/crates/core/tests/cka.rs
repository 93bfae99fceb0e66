mod common;

use bridge_attn::cka::{cka, feature_cka, gram, hsic, BlockFeatures, CkaMatrix, FeatureBatch, Gram};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn batch(rows: usize, cols: usize, seed: u64) -> FeatureBatch {
    FeatureBatch::new(rows, cols, common::randn(&[rows, cols], seed).into_data()).unwrap()
}

fn to_matrix(x: &FeatureBatch) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.values())
}

fn gram_matrix(k: &Gram) -> DMatrix<f64> {
    DMatrix::from_row_slice(k.size(), k.size(), k.values())
}

/// Expands `tr(K·H·L·H)` entry by entry with an explicit centering matrix.
fn brute_force_hsic(k: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    let m = k.nrows();
    let h = |i: usize, j: usize| (i == j) as u8 as f64 - 1.0 / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            for a in 0..m {
                for b in 0..m {
                    total += k[(i, j)] * h(j, a) * l[(a, b)] * h(b, i);
                }
            }
        }
    }
    total / ((m - 1) * (m - 1)) as f64
}

#[test]
fn gram_is_psd() {
    let x = batch(5, 3, 1);
    let k = gram(&x);
    let km = gram_matrix(&k);
    assert_eq!(km, km.transpose());
    let xm = to_matrix(&x);
    assert!((&km - &xm * xm.transpose()).amax() < 1e-12);
    let eig = SymmetricEigen::new(km);
    assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10), "{:?}", eig.eigenvalues);
    // rank 3 from three features
    assert_eq!(eig.eigenvalues.iter().filter(|e| e.abs() > 1e-8).count(), 3);
}

#[test]
fn hsic_matches_brute_force_expansion() {
    for m in 2..=8 {
        for seed in 0..4 {
            let x = batch(m, 3, 100 + seed);
            let y = batch(m, 5, 200 + seed);
            let (k, l) = (gram(&x), gram(&y));
            let want = brute_force_hsic(&gram_matrix(&k), &gram_matrix(&l));
            let got = hsic(&k, &l).unwrap();
            assert!((got - want).abs() < 1e-10, "m={m}: {got} vs {want}");
            assert!(hsic(&k, &k).unwrap() >= 0.0);
        }
    }
    // arbitrary symmetric, not necessarily PSD
    let a = common::randn(&[6, 6], 9).into_data();
    let sym: Vec<f64> = (0..36).map(|x| a[x] + a[(x % 6) * 6 + x / 6]).collect();
    let k = Gram::from_values(6, sym).unwrap();
    let l = gram(&batch(6, 2, 10));
    let want = brute_force_hsic(&gram_matrix(&k), &gram_matrix(&l));
    assert!((hsic(&k, &l).unwrap() - want).abs() < 1e-10);
}

#[test]
fn self_similarity_and_symmetry() {
    for seed in 0..5 {
        let x = batch(64, 16, seed);
        let y = batch(64, 8, seed + 50);
        assert!((feature_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (feature_cka(&x, &y).unwrap(), feature_cka(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn isotropic_scale_invariance() {
    let x = batch(64, 16, 11);
    let y = batch(64, 16, 12);
    let base = feature_cka(&x, &y).unwrap();
    for c in [-3.0, 1e-3, 250.0] {
        let scaled = FeatureBatch::new(64, 16, x.values().iter().map(|v| c * v).collect()).unwrap();
        assert!((feature_cka(&scaled, &y).unwrap() - base).abs() < 1e-10, "c={c}");
    }
}

#[test]
fn orthogonal_invariance() {
    for seed in 0..3 {
        let x = batch(64, 16, 20 + seed);
        // a correlated target so the score is well away from zero
        let noise = batch(64, 16, 30 + seed);
        let y = FeatureBatch::new(64, 16, x.values().iter().zip(noise.values()).map(|(a, b)| a + 0.5 * b).collect()).unwrap();
        let q = DMatrix::from_row_slice(16, 16, &common::randn(&[16, 16], 40 + seed).into_data()).qr().q();
        assert!((q.transpose() * &q - DMatrix::identity(16, 16)).amax() < 1e-12);
        let xq = to_matrix(&x) * &q;
        let rotated = FeatureBatch::new(64, 16, xq.transpose().as_slice().to_vec()).unwrap();
        let (a, b) = (feature_cka(&x, &y).unwrap(), feature_cka(&rotated, &y).unwrap());
        assert!(a > 0.5);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn independent_noise_scores_low() {
    let omega = batch(256, 16, 60);
    let noise = batch(256, 4, 61);
    let s = feature_cka(&noise, &omega).unwrap();
    assert!(s < 0.2, "{s}");
}

#[test]
fn importance_matrix_from_features() {
    let omega = batch(32, 8, 70);
    let blocks: Vec<BlockFeatures> = (0..3)
        .map(|i| BlockFeatures {
            branches: vec![batch(32, 4, 71 + i), omega.clone()],
            omega: omega.clone(),
        })
        .collect();
    let m = CkaMatrix::from_features(&blocks).unwrap();
    assert_eq!(m.blocks, ["B1", "B2", "B3"]);
    assert_eq!(m.branches, ["S1", "S2"]);
    assert!(m.in_unit_range());
    assert!(m.scores.iter().all(|r| (r[1] - 1.0).abs() < 1e-12));
    let ragged = vec![blocks[0].clone(), BlockFeatures { branches: vec![omega.clone()], omega: omega.clone() }];
    assert!(CkaMatrix::from_features(&ragged).is_err());
    assert!(CkaMatrix::from_features(&[]).is_err());
    let constant = FeatureBatch::new(32, 2, vec![1.0; 64]).unwrap();
    assert!(CkaMatrix::from_features(&[BlockFeatures { branches: vec![constant], omega }]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_in_unit_range(seed in 0u64..10_000, m in 3usize..20, d1 in 1usize..6, d2 in 1usize..6) {
        let x = batch(m, d1, seed);
        let y = batch(m, d2, seed + 1);
        let (k, l) = (gram(&x), gram(&y));
        let s = cka(&k, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - cka(&l, &k).unwrap()).abs() < 1e-12);
    }
}
