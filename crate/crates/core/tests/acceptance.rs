//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

mod support;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use support::{gradcheck, max_abs_diff, oracle, random_mask, random_pred, random_tensor, rng, tensor, values};
use vcp_core::backbone::MixTransformer;
use vcp_core::config::{CpgConfig, Fusion, LossConfig, MlpSharing, ModelConfig};
use vcp_core::cpd::{fuse_prompts, StageDisperser};
use vcp_core::cpg::StageCpg;
use vcp_core::data::{sample_batch, scan_dataset, synthesize_toy_dataset, ToyConfig};
use vcp_core::harness::{count_tunable_params, evaluate_groups, save_checkpoint, toy_config, train};
use vcp_core::metrics::evaluate_image;
use vcp_core::model::VcpModel;
use vcp_core::objectives::total_loss;
use vcp_core::params::{Init, ParamStore};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(value: f64, quoted: f64, tol: f64) -> bool {
    (value / quoted - 1.0).abs() <= tol
}

fn millions(cfg: &ModelConfig) -> f64 {
    count_tunable_params(cfg).unwrap().total() as f64 / 1e6
}

fn parameter_budget() -> Outcome {
    let table = count_tunable_params(&ModelConfig::default()).unwrap();
    let total = table.total() as f64 / 1e6;
    let head = table.head as f64 / 1e6;
    outcome(
        within(total, 4.94, 0.1) && within(head, 1.49, 0.1) && table.backbone == 0,
        format!("total {total:.3}M (4.94M), head {head:.3}M (1.49M)"),
    )
}

fn variant_ordering() -> Outcome {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut cfg = ModelConfig::default();
        f(&mut cfg);
        millions(&cfg)
    };
    let share = with(&|c| c.cpd.mlp_sharing = MlpSharing::Share);
    let adaptive = with(&|_| {});
    let unshare = with(&|c| c.cpd.mlp_sharing = MlpSharing::Unshare);
    let r8 = with(&|c| c.cpg.r = 8);
    let r8_d96 = with(&|c| {
        c.cpg.r = 8;
        c.head.head_dim = 96;
    });
    let quoted = [(share, 4.53), (adaptive, 4.94), (unshare, 5.78), (r8, 3.34), (r8_d96, 3.13)];
    let close = quoted.iter().all(|&(v, q)| within(v, q, 0.1));
    outcome(
        share < adaptive && adaptive < unshare && r8 < adaptive && close,
        format!("share {share:.3} < adaptive {adaptive:.3} < unshare {unshare:.3}; r=8 {r8:.3}; r=8,d=96 {r8_d96:.3}"),
    )
}

fn checkpoint_size() -> Outcome {
    let cfg = vcp_core::config::Config::default();
    let model = VcpModel::new(&cfg.model, 0, DType::F32, &Device::Cpu).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.safetensors");
    save_checkpoint(&path, &model, &cfg, 0, None).unwrap();
    let mb = std::fs::metadata(&path).unwrap().len() as f64 / 1e6;
    outcome((19.0..=21.0).contains(&mb), format!("{mb:.2} MB"))
}

fn weight_bits(bb: &MixTransformer) -> Vec<Vec<u32>> {
    bb.weights()
        .values()
        .map(|t| t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn zero_prompt_is_promptless(bb: &MixTransformer) -> bool {
    let x = random_tensor(&mut rng(7), &[2, 3, 96, 96], 1.0).to_dtype(DType::F32).unwrap();
    let plain = bb.forward(&x).unwrap();
    let zero = bb
        .forward_with_prompts(&x, |_, _, emb| Ok(Some(emb.tokens.zeros_like()?)))
        .unwrap();
    plain
        .features
        .iter()
        .zip(&zero.features)
        .all(|(a, b)| support::bitwise_equal(&a.tokens, &b.tokens))
}

fn nested3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (n, l, c) = t.dims3().unwrap();
    let v = values(t);
    (0..n)
        .map(|i| (0..l).map(|j| v[(i * l + j) * c..(i * l + j + 1) * c].to_vec()).collect())
        .collect()
}

fn nested2(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.dim(0).unwrap();
    let v = values(t);
    v.chunks(v.len() / n).map(|c| c.to_vec()).collect()
}

fn flat(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().cloned().collect()
}

fn cpg_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, h, w) = (r.random_range(1..4), r.random_range(2..5), r.random_range(2..5));
    let cfg = CpgConfig {
        r: 2,
        j: r.random_range(2..5),
        k: r.random_range(1..=(n * h * w).min(6)),
        seed_mlp_hidden: r.random_range(3..7),
    };
    let channels = 2 * r.random_range(2..5);
    let mut store = ParamStore::new(seed, DType::F64, &Device::Cpu);
    let cpg = StageCpg::new(&mut store, "cpg.0", channels, &cfg).unwrap();
    let tokens = random_tensor(&mut r, &[n, h * w, channels], 1.0);
    let out = cpg.generate(&tokens, h, w).unwrap();
    let o = oracle::cpg(&cpg, &nested3(&tokens), h, w);
    if out.consensus.indices != o.indices {
        return f64::INFINITY;
    }
    [
        max_abs_diff(&values(&out.p_em), &flat(&o.p_em)),
        max_abs_diff(&values(&out.saliency.map), &o.map.concat()),
        max_abs_diff(&values(&out.consensus.query), &o.query),
        max_abs_diff(&values(&out.p_co.prompt), &flat(&o.prompt)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn cpd_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let sharing = [MlpSharing::Adaptive, MlpSharing::Share, MlpSharing::Unshare][r.random_range(0..3)];
    let fusion = if r.random_bool(0.5) { Fusion::Concat } else { Fusion::Add };
    let (c_r, channels, depth, tokens) = (r.random_range(1..5), r.random_range(2..9), r.random_range(1..4), r.random_range(1..6));
    let input = if fusion == Fusion::Concat { 2 * c_r } else { c_r };
    let mut store = ParamStore::new(seed, DType::F64, &Device::Cpu);
    let d = StageDisperser::new(&mut store, "cpd.0", input, c_r, channels, depth, sharing).unwrap();
    let parts: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[2, tokens, c_r], 1.0)).collect();
    let v = fuse_prompts(&parts[0], &parts[1], &parts[2], fusion).unwrap();
    let cols: Vec<Vec<f64>> = parts.iter().map(values).collect();
    let mut gap = 0.0f64;
    for layer in 0..depth {
        let got = values(&d.disperse(&v, layer).unwrap());
        let mut want = Vec::new();
        for t in 0..2 * tokens {
            let tok = |x: &Vec<f64>| x[t * c_r..(t + 1) * c_r].to_vec();
            want.extend(oracle::disperse(&d, &oracle::fuse(&tok(&cols[0]), &tok(&cols[1]), &tok(&cols[2]), fusion), layer));
        }
        gap = gap.max(max_abs_diff(&got, &want));
    }
    gap
}

/// Nearest downsampling written out per pixel.
fn downsample(mask: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            out.push(mask[(i * h / oh) * w + j * w / ow]);
        }
    }
    out
}

fn loss_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, h, w) = (r.random_range(1..4), r.random_range(4..9), r.random_range(4..9));
    let classes = r.random_range(2..6);
    let gt = tensor(random_mask(&mut r, n * h * w, 0.4), &[n, 1, h, w]);
    let logits = random_tensor(&mut r, &[n, 1, h, w], 4.0);
    let sizes = [(h, w), (h / 2, w / 2), (2, 3)];
    let aux: Vec<Tensor> = sizes.iter().map(|&(a, b)| random_tensor(&mut r, &[n, 1, a, b], 4.0)).collect();
    let cls = random_tensor(&mut r, &[n, classes], 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let cfg = LossConfig::default();
    let got = total_loss(&logits, &aux, &cls, &gt, &labels, &cfg).unwrap().total_value().unwrap();

    let gt_rows = nested2(&gt);
    let mut want = cfg.alpha * oracle::map_loss(&nested2(&logits), &gt_rows);
    for (a, &(oh, ow)) in aux.iter().zip(&sizes) {
        let small: Vec<Vec<f64>> = gt_rows.iter().map(|m| downsample(m, h, w, oh, ow)).collect();
        want += cfg.beta * oracle::map_loss(&nested2(a), &small);
    }
    want += cfg.lambda * oracle::cross_entropy(&nested2(&cls), &labels);
    (got - want).abs()
}

fn metric_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(4..17), r.random_range(4..17));
    let fg = r.random_range(0.1..0.9);
    let gt = random_mask(&mut r, h * w, fg);
    let pred = random_pred(&mut r, h * w);
    let m = evaluate_image(&pred, &gt, h, w).unwrap();
    let f: Vec<f64> = oracle::f_curve(&pred, &gt).iter().map(|x| x.2).collect();
    [
        (m.mae - oracle::mae(&pred, &gt)).abs(),
        (m.s_measure - oracle::s_measure(&pred, &gt, h, w)).abs(),
        max_abs_diff(&m.e.values, &oracle::e_curve(&pred, &gt)),
        max_abs_diff(&m.f.curve.values, &f),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let worst = |f: fn(u64) -> f64| (0..100u64).map(|s| f(10_000 + s)).fold(0.0, f64::max);
    let gaps = [worst(cpg_gap), worst(cpd_gap), worst(loss_gap), worst(metric_gap)];
    outcome(
        gaps.iter().all(|&g| g <= 1e-6),
        format!(
            "100 instances each, max gap cpg {:.1e} cpd {:.1e} loss {:.1e} metrics {:.1e} in {:.1?}",
            gaps[0],
            gaps[1],
            gaps[2],
            gaps[3],
            start.elapsed()
        ),
    )
}

fn cpg_gradient() -> f64 {
    let cfg = CpgConfig {
        r: 2,
        j: 3,
        k: 4,
        seed_mlp_hidden: 6,
    };
    let mut store = ParamStore::new(21, DType::F64, &Device::Cpu);
    let cpg = StageCpg::new(&mut store, "cpg.0", 8, &cfg).unwrap();
    let mut r = rng(22);
    for (name, var) in store.vars() {
        if name.contains(".lift.") && name.ends_with(".weight") {
            var.set(&random_tensor(&mut r, var.dims(), 1.0)).unwrap();
        }
    }
    let tokens = random_tensor(&mut r, &[2, 9, 8], 1.0);
    let w_co = random_tensor(&mut r, &[2, 9, 4], 1.0);
    let w_map = random_tensor(&mut r, &[2, 1, 3, 3], 1.0);
    let loss = || {
        let out = cpg.generate(&tokens, 3, 3).unwrap();
        let a = (out.p_co.prompt * &w_co).unwrap().sum_all().unwrap();
        let b = (out.saliency.map * &w_map).unwrap().sum_all().unwrap();
        (a + b).unwrap()
    };
    gradcheck::worst(&gradcheck::check(&store.vars(), loss, 12, 1e-5)).1
}

fn cpd_gradient() -> f64 {
    let c_r = 3;
    let mut store = ParamStore::new(31, DType::F64, &Device::Cpu);
    let d = StageDisperser::new(&mut store, "cpd.0", 2 * c_r, c_r, 5, 2, MlpSharing::Adaptive).unwrap();
    let p_em = store.tensor("input.p_em", &[2, 4, c_r], Init::Uniform(1.0)).unwrap();
    let p_hand = store.tensor("input.p_hand", &[2, 4, c_r], Init::Uniform(1.0)).unwrap();
    let p_co = store.tensor("input.p_co", &[2, 4, c_r], Init::Uniform(1.0)).unwrap();
    let mut r = rng(32);
    let weights: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut r, &[2, 4, 5], 1.0)).collect();
    let loss = || {
        let v = fuse_prompts(&p_em, &p_hand, &p_co, Fusion::Concat).unwrap();
        let mut total = Tensor::zeros((), DType::F64, &Device::Cpu).unwrap();
        for (n, w) in weights.iter().enumerate() {
            total = (total + (d.disperse(&v, n).unwrap() * w).unwrap().sum_all().unwrap()).unwrap();
        }
        total
    };
    gradcheck::worst(&gradcheck::check(&store.vars(), loss, 12, 1e-6)).1
}

fn objective_gradient() -> f64 {
    let mut store = ParamStore::new(41, DType::F64, &Device::Cpu);
    let logits = store.tensor("final", &[2, 1, 3, 3], Init::Uniform(3.0)).unwrap();
    let aux = store.tensor("aux", &[2, 1, 2, 2], Init::Uniform(3.0)).unwrap();
    let cls = store.tensor("cls", &[2, 4], Init::Uniform(3.0)).unwrap();
    let gt = tensor(random_mask(&mut rng(42), 18, 0.5), &[2, 1, 3, 3]);
    let cfg = LossConfig::default();
    let loss = || {
        total_loss(&logits, std::slice::from_ref(&aux), &cls, &gt, &[2, 0], &cfg)
            .unwrap()
            .total
    };
    gradcheck::worst(&gradcheck::check(&store.vars(), loss, 18, 1e-6)).1
}

fn gradient_checks() -> Outcome {
    let errs = [cpg_gradient(), cpd_gradient(), objective_gradient()];
    outcome(
        errs.iter().all(|&e| e <= 1e-4),
        format!("worst relative error cpg {:.1e} cpd {:.1e} objectives {:.1e}", errs[0], errs[1], errs[2]),
    )
}

fn batch_rule() -> Outcome {
    let mut r = rng(2024);
    let mut bad = 0;
    for _ in 0..1000 {
        let groups = r.random_range(3..12);
        let sizes: Vec<usize> = (0..groups).map(|_| r.random_range(1..40)).collect();
        let b = sample_batch(&sizes, 16, &mut r).unwrap();
        let distinct = b.groups[0] != b.groups[1] && b.groups[1] != b.groups[2] && b.groups[0] != b.groups[2];
        let want = b.groups.iter().map(|&g| sizes[g]).min().unwrap().min(16);
        let members_ok = b.members.iter().zip(&b.groups).all(|(m, &g)| {
            let mut sorted = m.clone();
            sorted.sort_unstable();
            sorted.dedup();
            m.len() == want && sorted.len() == want && m.iter().all(|&i| i < sizes[g])
        });
        if !(distinct && b.n == want && members_ok) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("1000 batches, {bad} violations"))
}

struct ToyRun {
    frozen: Outcome,
    learning: Outcome,
}

/// One 200-step toy run serves both the frozen contract and the learning check.
fn toy_run(root: &Path) -> ToyRun {
    let start = Instant::now();
    let dev = Device::Cpu;
    synthesize_toy_dataset(root, &ToyConfig::default()).unwrap();
    let held_root = root.join("held");
    let held_cfg = ToyConfig {
        groups: 1,
        first_group: 6,
        ..ToyConfig::default()
    };
    synthesize_toy_dataset(&held_root, &held_cfg).unwrap();
    let groups = scan_dataset(&root.join("images"), &root.join("gt")).unwrap();
    let held = scan_dataset(&held_root.join("images"), &held_root.join("gt")).unwrap();

    let cfg = toy_config();
    let bb = MixTransformer::random(&cfg.model.backbone, 0, DType::F32, &dev).unwrap();
    let before = weight_bits(&bb);
    let mut frozen_at_50 = None;
    let run = train(&cfg, &groups, &bb, &dev, |log| {
        if log.step == 49 {
            frozen_at_50 = Some(weight_bits(&bb) == before);
        }
    });
    let run = match run {
        Ok(run) => run,
        Err(e) => {
            let failed = || outcome(false, format!("training failed: {e}"));
            return ToyRun {
                frozen: failed(),
                learning: failed(),
            };
        }
    };
    let unchanged_50 = frozen_at_50 == Some(true);
    let unchanged_end = weight_bits(&bb) == before;
    let zero = zero_prompt_is_promptless(&bb);
    let frozen = outcome(
        unchanged_50 && unchanged_end && zero,
        format!(
            "{} backbone arrays bitwise unchanged after 50 steps: {unchanged_50}, after {}: {unchanged_end}; zero prompt exact: {zero}",
            before.len(),
            run.steps
        ),
    );

    let initial = run.log[0].total;
    let tail = &run.log[run.log.len().saturating_sub(10)..];
    let last = tail.iter().map(|s| s.total).sum::<f64>() / tail.len() as f64;
    let size = cfg.train.input_size;
    let train_eval = evaluate_groups(&run.model, &bb, &groups, size, 16).unwrap();
    let held_eval = evaluate_groups(&run.model, &bb, &held, size, 16).unwrap();
    let ratio = last / initial;
    let learning = outcome(
        ratio < 0.2 && train_eval.f_m_max >= 0.9 && held_eval.f_m_max >= 0.7,
        format!(
            "{} steps: loss {initial:.3} -> {last:.3} (last-10 mean, ratio {ratio:.3} < 0.2); train F_max {:.3} >= 0.9; held-out `{}` F_max {:.3} >= 0.7; {:.0?}",
            run.steps,
            train_eval.f_m_max,
            held[0].name,
            held_eval.f_m_max,
            start.elapsed()
        ),
    );
    ToyRun { frozen, learning }
}

fn metric_sanity() -> Outcome {
    let mut r = rng(9);
    let (h, w) = (12, 10);
    let gt = random_mask(&mut r, h * w, 0.35);
    let perfect = evaluate_image(&gt, &gt, h, w).unwrap();
    let complement: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
    let inverse = evaluate_image(&complement, &gt, h, w).unwrap();
    let one = |v: f64| (v - 1.0).abs() <= 1e-12;
    let ok = one(perfect.s_measure)
        && one(perfect.e.max)
        && one(perfect.f.curve.max)
        && perfect.mae == 0.0
        && inverse.mae == 1.0;
    outcome(
        ok,
        format!(
            "perfect: S {:.15} E_max {:.15} F_max {:.15} MAE {}; complement MAE {} (unit values to 1e-12)",
            perfect.s_measure, perfect.e.max, perfect.f.curve.max, perfect.mae, inverse.mae
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_run(dir.path());
    let results = [
        ("parameter budget", parameter_budget()),
        ("variant ordering", variant_ordering()),
        ("checkpoint size", checkpoint_size()),
        ("frozen contract", toy.frozen),
        ("oracle equivalence", oracle_equivalence()),
        ("gradient checks", gradient_checks()),
        ("batch rule", batch_rule()),
        ("desk-scale learning", toy.learning),
        ("metric sanity", metric_sanity()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {}. {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
