//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the output.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bridge_attn::attention::count::{enumerate_params, Counting};
use bridge_attn::attention::{AttentionConfig, BridgeModule, BridgeVariant, ChannelAttention, PoolingStrategy, SeModule, Variant};
use bridge_attn::audit::{audit_report, build_arch, count_block, count_flops, Backbone, ReferenceTable};
use bridge_attn::blocks::{ConvBlock, ConvBlockKind, ConvBlockSpec};
use bridge_attn::cka::{cka, feature_cka, gram, hsic, FeatureBatch};
use bridge_attn::harness::cli;
use bridge_attn::harness::data::parse_cifar10;
use bridge_attn::harness::suites::{run_suite, Suite};
use bridge_attn::harness::train::{train, TrainConfig};
use bridge_attn::param::{Mode, ParamStore, Session};
use bridge_attn::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

type Outcome = Result<String, String>;

const VARIANTS: [Option<Variant>; 4] = [None, Some(Variant::Se), Some(Variant::Bav1), Some(Variant::Bav2)];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: u64, reference: f64, tol_pct: f64) -> bool {
    ((value as f64 - reference) / reference * 100.0).abs() <= tol_pct
}

fn params() -> Outcome {
    let start = Instant::now();
    let cells = [
        (Backbone::Resnet50, [25.56, 28.07, 28.71, 28.70]),
        (Backbone::Resnet101, [44.55, 49.29, 50.49, 50.48]),
    ];
    let mut worst: f64 = 0.0;
    for (b, millions) in cells {
        for (v, m) in VARIANTS.into_iter().zip(millions) {
            let arch = build_arch(b, v, 16).map_err(|e| e.to_string())?;
            let n = audit_report(&arch, &ReferenceTable::builtin()).map_err(|e| e.to_string())?.params_total;
            let delta = (n as f64 / (m * 1e6) - 1.0) * 100.0;
            worst = worst.max(delta.abs());
            ensure(within(n, m * 1e6, 0.5), || format!("{b} {v:?}: {n} vs {m}M ({delta:+.3}%)"))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("8 cells, worst {worst:.3}%, {:.0} ms", t.as_secs_f64() * 1e3))
}

fn flops() -> Outcome {
    let start = Instant::now();
    let cells = [
        (Backbone::Resnet50, [4.13, 4.14, 4.14, 4.15]),
        (Backbone::Resnet101, [7.87, 7.88, 7.89, 7.89]),
    ];
    let mut worst: f64 = 0.0;
    for (b, giga) in cells {
        for (v, g) in VARIANTS.into_iter().zip(giga) {
            let n = count_flops(&build_arch(b, v, 16).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let delta = (n as f64 / (g * 1e9) - 1.0) * 100.0;
            worst = worst.max(delta.abs());
            ensure(within(n, g * 1e9, 2.0), || format!("{b} {v:?}: {n} vs {g}G ({delta:+.3}%)"))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("8 cells, worst {worst:.3}%, {:.0} ms", t.as_secs_f64() * 1e3))
}

fn arithmetic() -> Outcome {
    let mut widths = std::collections::BTreeSet::new();
    let mut checked = 0;
    for v in [Variant::Bav1, Variant::Bav2] {
        let arch = build_arch(Backbone::Resnet50, Some(v), 16).map_err(|e| e.to_string())?;
        for plan in arch.blocks() {
            let c_n = plan.spec.out_channels() as u64;
            let n = 3;
            let want = match v {
                Variant::Bav1 => n * c_n / 16,
                _ => n + c_n / 16,
            };
            let symbolic = count_block(&plan.spec, plan.prev_out, plan.input_hw).map_err(|e| e.to_string())?.attention_params_paper;
            let mut store = ParamStore::<f32>::new(0);
            let block = ConvBlock::new(&mut store, "b", plan.spec.clone(), plan.prev_out).map_err(|e| e.to_string())?;
            let enumerated = block.attention.as_ref().map_or(0, |a| enumerate_params(a, &store, Counting::Paper)) as u64;
            ensure(symbolic == want && enumerated == want, || {
                format!("{v} C={c_n}: formula {want}, symbolic {symbolic}, enumerated {enumerated}")
            })?;
            widths.insert(c_n);
            checked += 1;
        }
    }
    Ok(format!("{checked} blocks over widths {widths:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = run_suite(Suite::All, 0).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let required = [
        "ops/gap", "ops/linear", "ops/conv2d_s1", "ops/conv2d_s2", "ops/batchnorm_train", "ops/batchnorm_eval",
        "ops/relu_sigmoid", "ops/channel_scale", "ops/mhsa", "ops/layer_norm", "ops/softmax", "ops/pool_avg_max",
        "ops/pool_avg_std", "ops/pool_dct:4", "ops/add_scale_permute_reshape", "ops/bmm", "ops/bmm_trans",
        "ops/token_mean_scale", "ops/concat_fuse", "ops/cross_entropy_sum", "attention/se_avg", "attention/bav1_avg",
        "attention/bav2_avg", "blocks/basic_plain", "blocks/basic_bav2", "blocks/bottleneck_plain", "blocks/bottleneck_se",
        "blocks/bottleneck_bav1", "blocks/bottleneck_bav2", "transformer/ba_mlp", "transformer/se_mlp",
        "transformer/ba_block", "transformer/ba_stage",
    ];
    let names: Vec<String> = results.iter().map(|r| format!("{}/{}", r.suite, r.name)).collect();
    let missing: Vec<&str> = required.iter().copied().filter(|n| !names.iter().any(|m| m == n)).collect();
    ensure(missing.is_empty(), || format!("missing cases {missing:?}"))?;
    for r in &results {
        let limit = if r.suite == "transformer" || r.name == "mhsa" { 1e-5 } else { 1e-6 };
        ensure(r.passed && r.max_rel_error < limit && r.threshold <= limit, || {
            format!("{}/{}: {:.3e} (threshold {:.0e})", r.suite, r.name, r.max_rel_error, r.threshold)
        })?;
    }
    ensure(t < Duration::from_secs(120), || format!("took {t:?}"))?;
    let worst = results.iter().map(|r| r.max_rel_error / r.threshold).fold(0.0, f64::max);
    Ok(format!("{} cases, worst {worst:.3} of threshold, {:.1} s", results.len(), t.as_secs_f64()))
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn omega_of(store: &mut ParamStore<f64>, m: &ChannelAttention, xs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut sess = Session::new(store, Mode::Eval);
    let nodes: Vec<_> = xs.iter().map(|x| sess.input(x.clone()).unwrap()).collect();
    let out = m.forward(&mut sess, &nodes).unwrap();
    sess.value(out.omega).clone()
}

fn block_out(store: &mut ParamStore<f64>, b: &ConvBlock, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut sess = Session::new(store, mode);
    let xn = sess.input(x.clone()).unwrap();
    let (y, _) = b.forward(&mut sess, xn, None).unwrap();
    sess.value(y).clone()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn degeneracy() -> Outcome {
    // (a) one adjacent source, unit fusion, identity generation norm
    let mut store = ParamStore::<f64>::new(23);
    let se = SeModule::new(&mut store, "se", 16, 4, PoolingStrategy::avg()).unwrap();
    let mut ba = BridgeModule::new(&mut store, "ba", &[16], 16, 4, BridgeVariant::V2, PoolingStrategy::avg()).unwrap();
    let (w1, w2) = (store.value(se.w1.weight).clone(), store.value(se.w2.weight).clone());
    store.set_value(ba.branch_proj[0].weight, w1).unwrap();
    store.set_value(ba.w2.weight, w2).unwrap();
    store.set_value(ba.fusion.unwrap(), Tensor::ones(&[1])).unwrap();
    ba.freeze_norms_identity();
    let x = randn(&[4, 16, 5, 5], 24);
    let a = omega_of(&mut store, &ChannelAttention::Se(se), std::slice::from_ref(&x));
    let b = omega_of(&mut store, &ChannelAttention::Bridge(ba), &[x]);
    ensure(bits(&a) == bits(&b), || "BAv2 single source differs from SE".into())?;

    // (b) unit fusion against v1, identity norms on both
    let widths = [8, 16, 16];
    let mut store = ParamStore::<f64>::new(25);
    let mut v1 = BridgeModule::new(&mut store, "v1", &widths, 16, 4, BridgeVariant::V1, PoolingStrategy::avg()).unwrap();
    let mut v2 = BridgeModule::new(&mut store, "v2", &widths, 16, 4, BridgeVariant::V2, PoolingStrategy::avg()).unwrap();
    for (p, q) in v1.branch_proj.iter().zip(&v2.branch_proj) {
        let w = store.value(p.weight).clone();
        store.set_value(q.weight, w).unwrap();
    }
    let w2 = store.value(v1.w2.weight).clone();
    store.set_value(v2.w2.weight, w2).unwrap();
    store.set_value(v2.fusion.unwrap(), Tensor::ones(&[3])).unwrap();
    v1.freeze_norms_identity();
    v2.freeze_norms_identity();
    let xs: Vec<_> = widths.iter().zip([6, 3, 3]).enumerate().map(|(i, (&c, s))| randn(&[3, c, s, s], 26 + i as u64)).collect();
    let a = omega_of(&mut store, &ChannelAttention::Bridge(v1), &xs);
    let b = omega_of(&mut store, &ChannelAttention::Bridge(v2), &xs);
    ensure(bits(&a) == bits(&b), || "BAv2 unit fusion differs from BAv1".into())?;

    // (c) bypass against the attention-free block
    let mut cases = 0;
    for mode in [Mode::Eval, Mode::Train] {
        for v in [Variant::Se, Variant::Bav1, Variant::Bav2] {
            for spec in [
                ConvBlockSpec::new(ConvBlockKind::Bottleneck, 16, 8, 2),
                ConvBlockSpec::new(ConvBlockKind::Basic, 8, 16, 1),
            ] {
                let mut plain_store = ParamStore::<f64>::new(30);
                let plain = ConvBlock::new(&mut plain_store, "b", spec.clone(), None).unwrap();
                let mut att_store = ParamStore::<f64>::new(31);
                let mut att = ConvBlock::new(&mut att_store, "b", spec.clone().with_attention(AttentionConfig::new(v, 4)), None).unwrap();
                att_store.copy_matching_from(&plain_store);
                att.bypass_attention = true;
                let x = randn(&[3, spec.in_channels, 6, 6], 32);
                let p = block_out(&mut plain_store, &plain, &x, mode);
                let q = block_out(&mut att_store, &att, &x, mode);
                ensure(bits(&p) == bits(&q), || format!("bypass {v} {:?} {mode:?} differs", spec.kind))?;
                cases += 1;
            }
        }
    }
    Ok(format!("SE, BAv1 and {cases} bypass cases bit-identical"))
}

fn batch(rows: usize, cols: usize, seed: u64) -> FeatureBatch {
    FeatureBatch::new(rows, cols, randn(&[rows, cols], seed).into_data()).unwrap()
}

/// `tr(K·H·L·H) / (m−1)²` with an explicit centering matrix.
fn brute_hsic(k: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    let m = k.nrows();
    let h = DMatrix::<f64>::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    (k * &h * l * &h).trace() / ((m - 1) * (m - 1)) as f64
}

fn cka_props() -> Outcome {
    let e = |e: bridge_attn::Error| e.to_string();
    let mut worst = [0.0f64; 5];
    for seed in 0..3 {
        let x = batch(64, 16, 100 + seed);
        let noise = batch(64, 16, 200 + seed);
        let y = FeatureBatch::new(64, 16, x.values().iter().zip(noise.values()).map(|(a, b)| a + 0.5 * b).collect()).unwrap();
        let (kx, ky) = (gram(&x), gram(&y));
        worst[0] = worst[0].max((cka(&kx, &kx).map_err(e)? - 1.0).abs());
        let xy = cka(&kx, &ky).map_err(e)?;
        worst[1] = worst[1].max((xy - cka(&ky, &kx).map_err(e)?).abs());
        let scaled = FeatureBatch::new(64, 16, x.values().iter().map(|v| 3.7 * v).collect()).unwrap();
        worst[2] = worst[2].max((feature_cka(&scaled, &y).map_err(e)? - xy).abs());
        let q = DMatrix::from_row_slice(16, 16, randn(&[16, 16], 300 + seed).data()).qr().q();
        let xq = DMatrix::from_row_slice(64, 16, x.values()) * q;
        let rotated = FeatureBatch::new(64, 16, xq.transpose().as_slice().to_vec()).unwrap();
        worst[3] = worst[3].max((feature_cka(&rotated, &y).map_err(e)? - xy).abs());
    }
    for m in 2..=8 {
        let (k, l) = (gram(&batch(m, 3, 400 + m as u64)), gram(&batch(m, 5, 500 + m as u64)));
        let km = DMatrix::from_row_slice(m, m, k.values());
        let lm = DMatrix::from_row_slice(m, m, l.values());
        worst[4] = worst[4].max((hsic(&k, &l).map_err(e)? - brute_hsic(&km, &lm)).abs());
    }
    let limits = [1e-12, 1e-12, 1e-10, 1e-10, 1e-10];
    let labels = ["self", "symmetry", "scale", "orthogonal", "hsic"];
    for i in 0..5 {
        ensure(worst[i] <= limits[i], || format!("{} off by {:.2e}", labels[i], worst[i]))?;
    }
    Ok(format!(
        "self {:.1e}, sym {:.1e}, scale {:.1e}, orth {:.1e}, hsic {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ))
}

fn learning() -> Outcome {
    let cfg = TrainConfig {
        stop_at_acc: Some(0.99),
        ..TrainConfig::default()
    };
    ensure(cfg.epochs == 50 && cfg.samples == 256 && cfg.attention == Some(Variant::Bav2), || "unexpected defaults".into())?;
    let a = train::<f32>(&cfg).map_err(|e| e.to_string())?;
    let b = train::<f32>(&cfg).map_err(|e| e.to_string())?;
    let last = *a.log.last().ok_or("empty log")?;
    ensure(last.acc >= 0.99, || format!("BAv2 reached {:.4} in {} epochs", last.acc, a.log.len()))?;
    let same = a.log.len() == b.log.len()
        && a.log.iter().zip(&b.log).all(|(p, q)| p.loss.to_bits() == q.loss.to_bits() && p.acc == q.acc)
        && a.store.iter().zip(b.store.iter()).all(|((_, p), (_, q))| p.value == q.value);
    ensure(same, || "two runs with one seed differ".into())?;
    let bypass = train::<f32>(&TrainConfig {
        bypass_attention: true,
        ..cfg.clone()
    })
    .map_err(|e| e.to_string())?;
    let bl = *bypass.log.last().ok_or("empty log")?;
    ensure(bl.acc >= 0.99, || format!("bypass reached {:.4} in {} epochs", bl.acc, bypass.log.len()))?;
    Ok(format!(
        "BAv2 {:.4} at epoch {}, bypass {:.4} at epoch {}, reruns identical",
        last.acc,
        a.log.len(),
        bl.acc,
        bypass.log.len()
    ))
}

fn schema(name: &str) -> Result<jsonschema::Validator, String> {
    let path = format!("{}/schemas/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    jsonschema::validator_for(&value).map_err(|e| e.to_string())
}

fn validate(v: &jsonschema::Validator, doc: &Value, what: &str) -> Result<(), String> {
    match v.iter_errors(doc).next() {
        None => Ok(()),
        Some(err) => Err(format!("{what}: {err} at {}", err.instance_path())),
    }
}

fn formats() -> Outcome {
    // CIFAR fixture: labels plus position-coded planes, read back by offset
    let labels = [0u8, 9, 4];
    let mut bytes = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        bytes.push(l);
        bytes.extend((0..3072).map(|p| ((p * 11 + i * 57 + p / 1024) % 256) as u8));
    }
    let ds = parse_cifar10(&bytes).map_err(|e| e.to_string())?;
    for (i, &l) in labels.iter().enumerate() {
        ensure(ds.labels()[i] == l as usize, || format!("label {i}"))?;
        for p in 0..3072 {
            let (c, y, x) = (p / 1024, p % 1024 / 32, p % 32);
            let want = bytes[i * 3073 + 1 + p];
            let got = ds.images().get(&[i, c, y, x]);
            ensure((got * 255.0).round() as u8 == want && got == want as f64 / 255.0, || format!("pixel {i}/{p}"))?;
        }
    }
    ensure(parse_cifar10(&bytes[..bytes.len() - 1]).is_err(), || "truncated fixture accepted".into())?;

    let audit_schema = schema("audit.schema.json")?;
    let mut docs = 0;
    for b in [Backbone::Resnet18, Backbone::Resnet50, Backbone::Resnet101] {
        for v in VARIANTS {
            let mut out = Vec::new();
            let attn = v.map_or("none".to_string(), |v| v.to_string());
            let args = ["bridge-attn", "audit", "--arch", &b.to_string(), "--attn", &attn];
            let code = cli::run(args, &mut out, &mut Vec::new());
            ensure(code != cli::EXIT_USAGE, || format!("audit {b} {attn} exited {code}"))?;
            let doc: Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
            validate(&audit_schema, &doc, &format!("audit {b} {attn}"))?;
            docs += 1;
        }
    }
    let mut broken = serde_json::to_value(audit_report(&build_arch(Backbone::Resnet50, None, 16).unwrap(), &ReferenceTable::builtin()).unwrap()).unwrap();
    broken["per_stage"][0]["params"] = json!(-1);
    ensure(!audit_schema.is_valid(&broken), || "audit schema accepts a negative count".into())?;

    let row_schema = schema("cka_row.schema.json")?;
    let mut out = Vec::new();
    let code = cli::run(["bridge-attn", "cka", "--samples", "128"], &mut out, &mut Vec::new());
    ensure(code == cli::EXIT_OK, || format!("cka exited {code}"))?;
    let mut rdr = csv::Reader::from_reader(out.as_slice());
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    ensure(header.get(0) == Some("block"), || format!("header {header:?}"))?;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let mut obj = Map::new();
        for (k, v) in header.iter().zip(rec.iter()) {
            let value = if k == "block" { json!(v) } else { v.parse::<f64>().map(|f| json!(f)).unwrap_or(json!(v)) };
            obj.insert(k.to_string(), value);
        }
        validate(&row_schema, &Value::Object(obj), &format!("cka row {rows}"))?;
        rows += 1;
    }
    ensure(rows > 0, || "empty CKA matrix".into())?;
    ensure(!row_schema.is_valid(&json!({"block": "B1", "S1": 1.5})), || "row schema accepts 1.5".into())?;
    Ok(format!("{} CIFAR records, {docs} audit documents, {rows} CKA rows x {} branches", labels.len(), header.len() - 1))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("param counts", params),
        ("FLOPs", flops),
        ("attention arithmetic", arithmetic),
        ("gradient suite", gradients),
        ("degeneracy", degeneracy),
        ("CKA", cka_props),
        ("toy learning", learning),
        ("formats", formats),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
