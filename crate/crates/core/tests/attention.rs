mod common;

use bridge_attn::attention::count::{attention_param_count, enumerate_params, paper_extra_params, Counting};
use bridge_attn::attention::pooling::dct_coefficients;
use bridge_attn::attention::{
    AttentionConfig, BridgeModule, BridgeVariant, ChannelAttention, PoolingStrategy, SeModule, Variant,
};
use bridge_attn::autodiff::{grad_check, GradCheckConfig};
use bridge_attn::param::{Mode, ParamStore, Session};
use bridge_attn::Tensor;
use common::{assert_close, check, jitter_params, probe_loss, randn, randomize_running_stats, uniform};
use proptest::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[n][o] = Σ_i W[o,i] z[n][i]`.
fn matvec(w: &Tensor<f64>, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (o, i) = (w.dim(0), w.dim(1));
    z.iter()
        .map(|row| {
            assert_eq!(row.len(), i);
            (0..o).map(|r| (0..i).map(|c| w.get(&[r, c]) * row[c]).sum()).collect()
        })
        .collect()
}

fn gap_rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw: usize = x.shape()[2..].iter().product();
    (0..n)
        .map(|b| {
            (0..c)
                .map(|ch| x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect()
        })
        .collect()
}

fn se_oracle(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = matvec(w1, &gap_rows(x));
    let h: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    matvec(w2, &h)
        .into_iter()
        .map(|r| r.into_iter().map(sigmoid).collect())
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn se_omega(store: &mut ParamStore<f64>, se: &SeModule, x: &Tensor<f64>) -> Tensor<f64> {
    let mut sess = Session::new(store, Mode::Eval);
    let xn = sess.input(x.clone()).unwrap();
    let w = se.forward(&mut sess, xn).unwrap();
    sess.value(w).clone()
}

#[test]
fn se_examples() {
    let mut store = ParamStore::<f64>::new(1);
    let se = SeModule::new(&mut store, "se", 8, 2, PoolingStrategy::avg()).unwrap();
    assert_eq!(store.value(se.w1.weight).shape(), &[4, 8]);
    assert_eq!(store.value(se.w2.weight).shape(), &[8, 4]);
    assert!(se.w1.bias.is_none() && se.w2.bias.is_none());

    let x = randn(&[2, 8, 3, 3], 2);
    let w1 = store.value(se.w1.weight).clone();
    let w2 = store.value(se.w2.weight).clone();
    let omega = se_omega(&mut store, &se, &x);
    assert_close(omega.data(), &flat(&se_oracle(&x, &w1, &w2)), 1e-12);
    assert!(omega.data().iter().all(|&v| v > 0.0 && v < 1.0));

    let zero_in = se_omega(&mut store, &se, &Tensor::zeros(&[2, 8, 3, 3]));
    assert!(zero_in.data().iter().all(|&v| v == 0.5));

    store.set_value(se.w1.weight, Tensor::zeros(&[4, 8])).unwrap();
    let zero_w1 = se_omega(&mut store, &se, &x);
    assert!(zero_w1.data().iter().all(|&v| v == 0.5));

    assert!(SeModule::new(&mut store, "bad", 8, 3, PoolingStrategy::avg()).is_err());
    let mut sess = Session::new(&mut store, Mode::Eval);
    let wrong = sess.input(randn(&[2, 6, 3, 3], 3)).unwrap();
    assert!(se.forward(&mut sess, wrong).is_err());
}

fn bridge(
    store: &mut ParamStore<f64>,
    widths: &[usize],
    out: usize,
    r: usize,
    v: BridgeVariant,
    pooling: PoolingStrategy,
) -> BridgeModule {
    BridgeModule::new(store, "ba", widths, out, r, v, pooling).unwrap()
}

fn run_bridge(store: &mut ParamStore<f64>, m: &BridgeModule, xs: &[Tensor<f64>]) -> (Vec<Tensor<f64>>, Tensor<f64>, Tensor<f64>) {
    let mut sess = Session::new(store, Mode::Eval);
    let nodes: Vec<_> = xs.iter().map(|x| sess.input(x.clone()).unwrap()).collect();
    let out = m.forward(&mut sess, &nodes).unwrap();
    (
        out.squeezed.iter().map(|&s| sess.value(s).clone()).collect(),
        sess.value(out.fused).clone(),
        sess.value(out.omega).clone(),
    )
}

fn branch_inputs(widths: &[usize], sizes: &[usize], seed: u64) -> Vec<Tensor<f64>> {
    widths
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&c, &s))| randn(&[3, c, s, s], seed + i as u64))
        .collect()
}

#[test]
fn integrate_single_branch_is_identity() {
    let mut store = ParamStore::<f64>::new(4);
    let m = bridge(&mut store, &[16], 16, 4, BridgeVariant::V2, PoolingStrategy::avg());
    store.set_value(m.fusion.unwrap(), Tensor::ones(&[1])).unwrap();
    let xs = branch_inputs(&[16], &[4], 5);
    let (squeezed, fused, _) = run_bridge(&mut store, &m, &xs);
    assert_eq!(squeezed[0], fused);
}

#[test]
fn integrate_equal_branches_under_uniform_fusion() {
    let mut store = ParamStore::<f64>::new(6);
    let m = bridge(&mut store, &[8, 8, 8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg());
    let w = store.value(m.branch_proj[0].weight).clone();
    for p in &m.branch_proj[1..] {
        store.set_value(p.weight, w.clone()).unwrap();
    }
    assert_eq!(store.value(m.fusion.unwrap()).data(), &[1.0 / 3.0; 3]);
    let x = randn(&[3, 8, 4, 4], 7);
    let (squeezed, fused, _) = run_bridge(&mut store, &m, &[x.clone(), x.clone(), x]);
    assert_close(fused.data(), squeezed[0].data(), 1e-15);
}

#[test]
fn integrate_and_generate_match_direct_formula() {
    let widths = [8, 12, 16];
    let sizes = [6, 4, 3];
    let xs = branch_inputs(&widths, &sizes, 8);
    for v in [BridgeVariant::V1, BridgeVariant::V2] {
        let mut store = ParamStore::<f64>::new(9);
        let m = bridge(&mut store, &widths, 16, 4, v, PoolingStrategy::avg());
        if let Some(f) = m.fusion {
            store.set_value(f, Tensor::from_f64(&[3], &[0.7, -0.2, 1.3]).unwrap()).unwrap();
        }
        randomize_running_stats(&mut store, 10);
        let bn_params: Vec<_> = m.branch_bn.iter().chain(m.gen_bn.as_ref()).cloned().collect();
        for (i, bn) in bn_params.iter().enumerate() {
            store.set_value(bn.gamma, uniform(&[4], 1.0, 11 + i as u64).map(|v| v + 1.0)).unwrap();
            store.set_value(bn.beta, randn(&[4], 21 + i as u64)).unwrap();
        }
        let (squeezed, fused, omega) = run_bridge(&mut store, &m, &xs);

        let bn = |bn: &bridge_attn::layers::BatchNorm, rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let st = store.buffer(bn.stats);
            let (g, b) = (store.value(bn.gamma).data(), store.value(bn.beta).data());
            rows.into_iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(c, x)| (x - st.mean[c]) / (st.var[c] + 1e-5).sqrt() * g[c] + b[c])
                        .collect()
                })
                .collect()
        };
        let s: Vec<Vec<Vec<f64>>> = xs
            .iter()
            .zip(&m.branch_proj)
            .map(|(x, p)| matvec(store.value(p.weight), &gap_rows(x)))
            .collect();
        for (got, want) in squeezed.iter().zip(&s) {
            assert_close(got.data(), &flat(want), 1e-12);
        }
        let want_fused: Vec<Vec<f64>> = match v {
            BridgeVariant::V2 => {
                let f = store.value(m.fusion.unwrap()).data().to_vec();
                (0..3)
                    .map(|n| (0..4).map(|j| (0..3).map(|i| f[i] * s[i][n][j]).sum()).collect())
                    .collect()
            }
            BridgeVariant::V1 => {
                let normed: Vec<_> = s.iter().zip(&m.branch_bn).map(|(si, b)| bn(b, si.clone())).collect();
                (0..3)
                    .map(|n| (0..4).map(|j| (0..3).map(|i| normed[i][n][j]).sum()).collect())
                    .collect()
            }
        };
        assert_close(fused.data(), &flat(&want_fused), 1e-12);
        let pre = match &m.gen_bn {
            Some(b) => bn(b, want_fused),
            None => want_fused,
        };
        let h: Vec<Vec<f64>> = pre.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
        let want_omega: Vec<Vec<f64>> = matvec(store.value(m.w2.weight), &h)
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect();
        assert_close(omega.data(), &flat(&want_omega), 1e-12);
        assert!(omega.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn generate_with_zero_expansion_is_half() {
    for v in [BridgeVariant::V1, BridgeVariant::V2] {
        let mut store = ParamStore::<f64>::new(12);
        let m = bridge(&mut store, &[8, 16], 16, 4, v, PoolingStrategy::avg());
        store.set_value(m.w2.weight, Tensor::zeros(&[16, 4])).unwrap();
        let (_, _, omega) = run_bridge(&mut store, &m, &branch_inputs(&[8, 16], &[3, 3], 13));
        assert!(omega.data().iter().all(|&x| x == 0.5));
    }
}

#[test]
fn identity_generation_norm_matches_v1_generation() {
    let mut store = ParamStore::<f64>::new(14);
    let v1 = bridge(&mut store, &[8], 8, 2, BridgeVariant::V1, PoolingStrategy::avg());
    let v2 = bridge(&mut store, &[8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg());
    let w2 = store.value(v1.w2.weight).clone();
    store.set_value(v2.w2.weight, w2).unwrap();
    let s = randn(&[5, 4], 15);
    let gen = |store: &mut ParamStore<f64>, m: &BridgeModule| {
        let mut sess = Session::new(store, Mode::Eval);
        let sn = sess.input(s.clone()).unwrap();
        let w = m.generate(&mut sess, sn).unwrap();
        sess.value(w).clone()
    };
    let a = gen(&mut store, &v1);
    // BN with gamma 1, beta 0, mean 0, var 1 scales by 1/sqrt(1 + eps)
    let b = gen(&mut store, &v2);
    assert!(a.max_abs_diff(&b) < 1e-5);
    let mut frozen = v2.clone();
    frozen.freeze_norms_identity();
    assert_eq!(gen(&mut store, &frozen), a);

    let mut sess = Session::new(&mut store, Mode::Eval);
    let wrong = sess.input(randn(&[5, 3], 16)).unwrap();
    assert!(v1.generate(&mut sess, wrong).is_err());
}

#[test]
fn branch_count_mismatch_is_an_error() {
    let mut store = ParamStore::<f64>::new(17);
    let m = bridge(&mut store, &[8, 8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg());
    let mut sess = Session::new(&mut store, Mode::Eval);
    let x = sess.input(randn(&[2, 8, 3, 3], 18)).unwrap();
    assert!(m.forward(&mut sess, &[x]).is_err());
    let y = sess.input(randn(&[2, 6, 3, 3], 19)).unwrap();
    assert!(m.forward(&mut sess, &[x, y]).is_err());
}

#[test]
fn train_mode_needs_a_batch() {
    let mut store = ParamStore::<f64>::new(20);
    let m = bridge(&mut store, &[8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg());
    let mut sess = Session::new(&mut store, Mode::Train);
    let x = sess.input(randn(&[1, 8, 3, 3], 21)).unwrap();
    assert!(m.forward(&mut sess, &[x]).is_err());
    let x = sess.input(randn(&[4, 8, 3, 3], 22)).unwrap();
    assert!(m.forward(&mut sess, &[x]).is_ok());
}

#[test]
fn bav2_single_source_reproduces_se_bitwise() {
    for pooling in [PoolingStrategy::avg(), PoolingStrategy::avg_max(), PoolingStrategy::avg_std(), PoolingStrategy::dct(4)] {
        let mut store = ParamStore::<f64>::new(23);
        let se = SeModule::new(&mut store, "se", 16, 4, pooling).unwrap();
        let mut ba = bridge(&mut store, &[16], 16, 4, BridgeVariant::V2, pooling);
        let (w1, w2) = (store.value(se.w1.weight).clone(), store.value(se.w2.weight).clone());
        store.set_value(ba.branch_proj[0].weight, w1).unwrap();
        store.set_value(ba.w2.weight, w2).unwrap();
        store.set_value(ba.fusion.unwrap(), Tensor::ones(&[1])).unwrap();
        ba.freeze_norms_identity();
        let x = randn(&[4, 16, 5, 5], 24);
        let a = se_omega(&mut store, &se, &x);
        let (_, _, b) = run_bridge(&mut store, &ba, &[x]);
        assert_eq!(a, b, "{pooling}");
    }
}

#[test]
fn bav2_unit_fusion_reproduces_bav1_bitwise() {
    let widths = [8, 16, 16];
    let mut store = ParamStore::<f64>::new(25);
    let mut v1 = bridge(&mut store, &widths, 16, 4, BridgeVariant::V1, PoolingStrategy::avg());
    let mut v2 = bridge(&mut store, &widths, 16, 4, BridgeVariant::V2, PoolingStrategy::avg());
    for (a, b) in v1.branch_proj.iter().zip(&v2.branch_proj) {
        let w = store.value(a.weight).clone();
        store.set_value(b.weight, w).unwrap();
    }
    let w2 = store.value(v1.w2.weight).clone();
    store.set_value(v2.w2.weight, w2).unwrap();
    store.set_value(v2.fusion.unwrap(), Tensor::ones(&[3])).unwrap();
    v1.freeze_norms_identity();
    v2.freeze_norms_identity();
    let xs = branch_inputs(&widths, &[6, 3, 3], 26);
    let (_, fa, wa) = run_bridge(&mut store, &v1, &xs);
    let (_, fb, wb) = run_bridge(&mut store, &v2, &xs);
    assert_eq!(fa, fb);
    assert_eq!(wa, wb);
}

fn permute_spatial(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let hw = perm.len();
    let mut out = x.clone();
    for (m, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        let src = &x.data()[m * hw..(m + 1) * hw];
        for (j, &p) in perm.iter().enumerate() {
            chunk[j] = src[p];
        }
    }
    out
}

#[test]
fn omega_is_invariant_to_spatial_permutation() {
    use rand::seq::SliceRandom;
    let strategies = [
        PoolingStrategy::avg(),
        PoolingStrategy::avg_max(),
        PoolingStrategy::avg_std(),
        // only the constant basis is permutation symmetric
        PoolingStrategy::dct(1),
    ];
    for pooling in strategies {
        let mut store = ParamStore::<f64>::new(27);
        let m = bridge(&mut store, &[8, 8], 8, 2, BridgeVariant::V2, pooling);
        let xs = branch_inputs(&[8, 8], &[4, 4], 28);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut common::rng(29));
        let ys: Vec<_> = xs.iter().map(|x| permute_spatial(x, &perm)).collect();
        let (_, _, a) = run_bridge(&mut store, &m, &xs);
        let (_, _, b) = run_bridge(&mut store, &m, &ys);
        assert!(a.max_abs_diff(&b) < 1e-14, "{pooling}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn dct_full_basis_preserves_energy() {
    let map = randn(&[16], 30).into_data();
    let coeffs = dct_coefficients(&map, 4, 4, 16).unwrap();
    let energy: f64 = coeffs.iter().map(|c| c * c).sum();
    let norm: f64 = map.iter().map(|v| v * v).sum();
    assert!((energy - norm).abs() < 1e-12 * norm.max(1.0));
    assert!(dct_coefficients(&map, 4, 4, 17).is_err());

    let mut store = ParamStore::<f64>::new(31);
    let m = bridge(&mut store, &[4], 4, 2, BridgeVariant::V2, PoolingStrategy::dct(10));
    let mut sess = Session::new(&mut store, Mode::Eval);
    let small = sess.input(randn(&[2, 4, 3, 3], 32)).unwrap();
    assert!(m.forward(&mut sess, &[small]).is_err());
}

#[test]
fn two_statistic_pooling_widens_projection() {
    let mut store = ParamStore::<f64>::new(33);
    let m = bridge(&mut store, &[8, 16], 16, 4, BridgeVariant::V2, PoolingStrategy::avg_std());
    assert_eq!(store.value(m.branch_proj[0].weight).shape(), &[4, 16]);
    assert_eq!(store.value(m.branch_proj[1].weight).shape(), &[4, 32]);
    let (_, _, omega) = run_bridge(&mut store, &m, &branch_inputs(&[8, 16], &[1, 3], 34));
    assert_eq!(omega.shape(), &[3, 16]);
}

fn module_gradcheck(cfg: AttentionConfig, widths: &[usize], out: usize, seed: u64) -> f64 {
    let mut store = ParamStore::<f64>::new(seed);
    let m = ChannelAttention::new(&mut store, "m", &cfg, widths, out).unwrap();
    randomize_running_stats(&mut store, seed + 1);
    jitter_params(&mut store, &m.params(), seed + 2);
    let mut sess = Session::new(&mut store, Mode::Eval);
    let xs: Vec<_> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| sess.input_var(randn(&[2, c, 4, 4], seed + 50 + i as u64)).unwrap())
        .collect();
    let att = m.forward(&mut sess, &xs).unwrap();
    let scaled = sess.graph.channel_scale(*xs.last().unwrap(), att.omega).unwrap();
    let loss = probe_loss(&mut sess.graph, scaled, seed + 99);
    let mut wrt: Vec<_> = sess.bound_params().into_iter().map(|(_, n)| n).collect();
    wrt.extend(xs);
    check(&mut sess.graph, loss, &wrt)
}

#[test]
fn attention_paths_pass_gradient_check() {
    let cases = [
        (Variant::Se, PoolingStrategy::avg()),
        (Variant::Bav1, PoolingStrategy::avg()),
        (Variant::Bav2, PoolingStrategy::avg()),
        (Variant::Bav2, PoolingStrategy::avg_max()),
        (Variant::Bav2, PoolingStrategy::avg_std()),
        (Variant::Bav2, PoolingStrategy::dct(4)),
    ];
    for (i, (v, pooling)) in cases.into_iter().enumerate() {
        let cfg = AttentionConfig::new(v, 4).with_pooling(pooling);
        let err = module_gradcheck(cfg, &[8, 16, 16], 16, 100 + 10 * i as u64);
        assert!(err < 1e-6, "{v} {pooling}: {err}");
    }
}

#[test]
fn train_mode_bridge_gradient() {
    let mut store = ParamStore::<f64>::new(40);
    let m = bridge(&mut store, &[8, 8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg());
    let mut sess = Session::new(&mut store, Mode::Train);
    let a = sess.input_var(randn(&[6, 8, 3, 3], 41)).unwrap();
    let b = sess.input_var(randn(&[6, 8, 3, 3], 42)).unwrap();
    let out = m.forward(&mut sess, &[a, b]).unwrap();
    let loss = probe_loss(&mut sess.graph, out.omega, 43);
    let mut wrt: Vec<_> = sess.bound_params().into_iter().map(|(_, n)| n).collect();
    wrt.extend([a, b]);
    let r = grad_check(&mut sess.graph, loss, &wrt, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn parameter_count_matches_enumeration() {
    for (v, stats, pooling) in [
        (Variant::Se, 1, PoolingStrategy::avg()),
        (Variant::Bav1, 1, PoolingStrategy::avg()),
        (Variant::Bav2, 1, PoolingStrategy::avg()),
        (Variant::Bav2, 2, PoolingStrategy::avg_max()),
    ] {
        let widths = [64, 64, 256];
        let mut store = ParamStore::<f64>::new(44);
        let cfg = AttentionConfig::new(v, 16).with_pooling(pooling);
        let m = ChannelAttention::new(&mut store, "m", &cfg, &widths, 256).unwrap();
        for counting in [Counting::Actual, Counting::Paper] {
            let closed = attention_param_count(v, &widths, 256, 16, stats, counting).unwrap();
            assert_eq!(closed, enumerate_params(&m, &store, counting), "{v} {counting:?}");
        }
        assert_eq!(store.numel(), attention_param_count(v, &widths, 256, 16, stats, Counting::Actual).unwrap());
    }
    assert_eq!(paper_extra_params(Variant::Bav1, 3, 256, 16).unwrap(), 48);
    assert_eq!(paper_extra_params(Variant::Bav2, 3, 256, 16).unwrap(), 19);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn omega_stays_in_open_unit_interval(seed in 0u64..10_000, scale in 0.01f64..5.0) {
        let mut store = ParamStore::<f64>::new(seed);
        let m = bridge(&mut store, &[8, 8], 8, 2, BridgeVariant::V2, PoolingStrategy::avg_max());
        let xs: Vec<_> = branch_inputs(&[8, 8], &[3, 3], seed).into_iter().map(|x| x.map(|v| v * scale)).collect();
        let (_, _, omega) = run_bridge(&mut store, &m, &xs);
        prop_assert!(omega.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
