//! Acceptance gate: eight criteria, each printing one PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report;
//! criteria 4-7 train real models and together take roughly half an hour on
//! one core.

use faceforge::autodiff::{max_rel_err, numeric_grad, Arr, Tape};
use faceforge::eval::{
    build_verification_pairs, compute_eer, fidelity_improvement, generate_labeled, pair_distances,
    AugmentationConfig,
};
use faceforge::losses::{
    began_disc_loss, began_gen_loss, cycle_loss, identity_pixel_loss, identity_set_loss,
    identity_set_loss_grad, pair_disc_loss, update_k, CentroidStore, Eq7Sign, IdentityLossConfig,
};
use faceforge::nets::{
    autoencode_taped, embed_taped, generator_forward_taped, Mode, NetKind, NetworkSpec, StagedNet,
    WeightSet,
};
use faceforge::toymm::{
    build_datasets, render_real, sample_params_with, DataConfig, DomainTag, ImageBatch,
};
use faceforge::trainer::{
    checkpoint_load, checkpoint_save, ema_update, lr_at, pretrain_embedder, train, train_loop,
    PretrainConfig, RunOutputs, TrainConfig, TrainState, REFERENCE_LR_MILESTONES,
};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} ({name}): {verdict} [{detail}]");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.05..0.95))
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------------

/// Worst relative error of the analytic gradient of `mean |net(x)|` over
/// every weight array of a network, against central finite differences.
fn net_weight_gradcheck(spec: &NetworkSpec, batch: usize, seed: u64) -> f64 {
    let forward = |tape: &mut Tape, net: &StagedNet, x: faceforge::autodiff::Var| {
        let y = match spec.kind {
            NetKind::Generator | NetKind::InverseGenerator => {
                generator_forward_taped(tape, net, x, Mode::Train, 7).unwrap()
            }
            NetKind::AutoencoderDiscriminator => autoencode_taped(tape, net, x).unwrap(),
            NetKind::Embedder => embed_taped(tape, net, x).unwrap(),
        };
        // target 2.0 sits outside every output's range, so |y - t| never
        // crosses its kink and finite differences stay valid
        let z = tape.leaf(Arr::from_elem(tape.value(y).raw_dim(), 2.0));
        tape.mean_abs_diff(y, z)
    };

    let ws = WeightSet::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x0 = rand_arr(&[batch, spec.channels, spec.input_size, spec.input_size], &mut rng);

    let eval_with = |ws: &WeightSet, x: &Arr| -> f64 {
        let mut tape = Tape::new();
        let net = StagedNet::stage(&mut tape, spec, ws).unwrap();
        let xv = tape.leaf(x.clone());
        let loss = forward(&mut tape, &net, xv);
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let net = StagedNet::stage(&mut tape, spec, &ws).unwrap();
    let xv = tape.leaf(x0.clone());
    let loss = forward(&mut tape, &net, xv);
    let grads = tape.backward(loss);
    let analytic = net.collect_grads(&tape, &grads);
    let dx = grads.get(xv).cloned().unwrap_or_else(|| Arr::zeros(x0.raw_dim()));

    let mut worst = 0.0f64;
    for (name, a) in analytic.entries() {
        let n = numeric_grad(
            ws.get(name).unwrap(),
            |w| {
                let perturbed = ws.map(|nm, v| if nm == name { w.clone() } else { v.clone() });
                eval_with(&perturbed, &x0)
            },
            1e-5,
        );
        worst = worst.max(max_rel_err(a, &n));
    }
    let nx = numeric_grad(&x0, |x| eval_with(&ws, x), 1e-5);
    worst.max(max_rel_err(&dx, &nx))
}

fn identity_loss_gradcheck(sign: Eq7Sign, differentiate_sigma: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d) = (5usize, 3usize);
    let emb = Array2::from_shape_simple_fn((m, d), || rng.gen_range(-1.0..1.0));
    let labels = [1u32, 2, 1, 3, 2];
    let mut store = CentroidStore::new(d, 0.95);
    let cents = Array2::from_shape_simple_fn((4, d), || rng.gen_range(-1.0..1.0));
    store = store.updated(&cents, &[0, 1, 2, 3]).unwrap();
    let cfg = IdentityLossConfig { sign, differentiate_sigma, ..IdentityLossConfig::default() };

    let (_, analytic, sigma_sq0) = identity_set_loss_grad(&emb, &labels, &store, &cfg).unwrap();
    let sign_f = match sign {
        Eq7Sign::Magnet => -1.0,
        Eq7Sign::AsPrinted => 1.0,
    };
    // with sigma treated as a constant, the numeric oracle must hold it at its
    // base value; re-evaluate the formula directly with sigma_sq0 frozen
    let frozen_eval = |e: &Array2<f64>| -> f64 {
        let mut total = 0.0;
        for i in 0..e.nrows() {
            let own = store.get(labels[i]);
            let od = &e.row(i) - &own;
            let d_own = od.dot(&od);
            let exps: Vec<f64> = store
                .labels()
                .filter(|&l| l != labels[i])
                .map(|l| {
                    let diff = &e.row(i) - &store.get(l);
                    sign_f * diff.dot(&diff) / (2.0 * sigma_sq0)
                })
                .collect();
            let mx = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + exps.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += -sign_f * d_own / (2.0 * sigma_sq0) + cfg.eta + lse;
        }
        total
    };
    let numeric = numeric_grad(
        &emb.clone().into_dyn(),
        |e| {
            let e2: Array2<f64> = e.clone().into_dimensionality().unwrap();
            if differentiate_sigma {
                identity_set_loss(&e2, &labels, &store, &cfg).unwrap().0
            } else {
                frozen_eval(&e2)
            }
        },
        1e-6,
    );
    max_rel_err(&analytic.into_dyn(), &numeric)
}

#[test]
fn criterion_1_gradient_suite() {
    let started = std::time::Instant::now();
    let bound = 1e-4;
    let mut worst = 0.0f64;
    let mut biggest = 0usize;

    let mut gen = NetworkSpec::generator(8, 1, 1);
    gen.num_residual_blocks = 1;
    let mut inv = NetworkSpec::inverse_generator(8, 1, 1);
    inv.num_residual_blocks = 1;
    let mut disc = NetworkSpec::discriminator(4, 1, 1);
    disc.bottleneck = 3;
    let mut embr = NetworkSpec::embedder(8, 1, 1);
    embr.embedding_dim = 4;

    for (i, spec) in [gen, inv, disc, embr].iter().enumerate() {
        let params = WeightSet::init(spec, 1).unwrap().num_params();
        assert!(params <= 200, "instance {i} has {params} parameters");
        biggest = biggest.max(params);
        worst = worst.max(net_weight_gradcheck(spec, 2, 40 + i as u64));
    }

    for sign in [Eq7Sign::Magnet, Eq7Sign::AsPrinted] {
        for ds in [false, true] {
            worst = worst.max(identity_loss_gradcheck(sign, ds, 9));
        }
    }

    // the elementary tape ops feeding every scalar loss
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a0 = rand_arr(&[2, 1, 4, 4], &mut rng);
    let b0 = rand_arr(&[2, 1, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let av = tape.leaf(a0.clone());
    let bv = tape.leaf(b0.clone());
    let l = tape.mean_abs_diff(av, bv);
    let g = tape.backward(l);
    let n = numeric_grad(
        &a0,
        |a| {
            let mut t = Tape::new();
            let x = t.leaf(a.clone());
            let y = t.leaf(b0.clone());
            let l = t.mean_abs_diff(x, y);
            t.scalar(l)
        },
        1e-6,
    );
    worst = worst.max(max_rel_err(g.get(av).unwrap(), &n));

    let elapsed = started.elapsed();
    report(
        1,
        "gradient suite",
        worst <= bound && elapsed.as_secs() < 120,
        &format!(
            "worst rel err {worst:.2e} (bound {bound:.0e}), largest instance {biggest} params, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: controller arithmetic
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_controller_arithmetic() {
    let mut ok = true;

    ok &= update_k(0.1, 4.0, 1.0, 0.001, 0.5).unwrap() == 0.1 + 0.001 * (0.5 * 4.0 - 1.0);
    ok &= update_k(0.0, 0.0, 5.0, 0.001, 0.5).unwrap() == 0.0; // clamped low
    ok &= update_k(1.0, 5000.0, 0.0, 0.001, 0.5).unwrap() == 1.0; // clamped high

    let store = CentroidStore::new(1, 0.95);
    let e = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
    let next = store.updated(&e, &[7]).unwrap();
    ok &= next.get(7)[0] == 0.95;
    let mut retention = CentroidStore::new(1, 0.95);
    retention.interpret_beta_as_retention = true;
    let next = retention.updated(&e, &[7]).unwrap();
    ok &= next.get(7)[0] == (1.0 - 0.95) * 1.0;

    let z = WeightSet::new(vec![("w".into(), ArrayD::zeros(IxDyn(&[2])))]).unwrap();
    let c = WeightSet::new(vec![("w".into(), ArrayD::from_elem(IxDyn(&[2]), 2.0))]).unwrap();
    ok &= ema_update(&z, &c, 0.0).unwrap() == c;
    ok &= ema_update(&z, &c, 1.0).unwrap() == z;
    let mixed = ema_update(&z, &c, 0.999).unwrap();
    ok &= mixed.get("w").unwrap()[0] == 0.0 * 0.999 + 2.0 * (1.0 - 0.999);

    let mut cfg = TrainConfig::default();
    cfg.total_iters = 248_000;
    cfg.lr_milestones = REFERENCE_LR_MILESTONES.to_vec();
    ok &= lr_at(0, &cfg) == 8e-5;
    ok &= lr_at(127_999, &cfg) == 8e-5;
    ok &= lr_at(128_000, &cfg) == 4e-5;
    ok &= lr_at(247_999, &cfg) == 8e-5 / 128.0;

    // k stays in [0,1] over a full (tiny) training run
    let cfg = tiny_config(3);
    let bundle = build_datasets(&cfg.data).unwrap();
    let embedder = pretrain_embedder(&cfg).unwrap();
    let (_, records) = train(&cfg, &bundle, embedder, &RunOutputs::default()).unwrap();
    ok &= records
        .iter()
        .all(|r| [r.k_dr, r.k_ds, r.k_dp].iter().all(|k| (0.0..=1.0).contains(k)));

    report(2, "controller arithmetic", ok, "update_k / centroids / ema / lr_at exact, k in [0,1]");
}

// ---------------------------------------------------------------------------
// criterion 3: exact-formula oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_exact_formula_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let shape = [3usize, 1, 4, 4];
        let a = rand_arr(&shape, &mut rng);
        let b = rand_arr(&shape, &mut rng);
        let ia = ImageBatch {
            pixels: a.clone().into_dimensionality().unwrap(),
            domain: DomainTag::Synthetic,
            labels: vec![0; 3],
        };
        let ib = ImageBatch {
            pixels: b.clone().into_dimensionality().unwrap(),
            domain: DomainTag::Synthetic,
            labels: vec![0; 3],
        };
        // direct mean |a-b| with a plain accumulator
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y).abs();
        }
        let direct = acc / a.len() as f64;
        worst = worst.max((cycle_loss(&ia, &ib).unwrap() - direct).abs());
        worst = worst.max((began_gen_loss(&ia, &ib).unwrap() - direct).abs());
        worst = worst.max((identity_pixel_loss(&ia, &ib).unwrap() - direct).abs());

        let (re, ge, k) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        worst = worst.max((began_disc_loss(re, ge, k).unwrap() - (re - k * ge)).abs());
        let cyc = rng.gen_range(0.0..1.0);
        worst = worst.max((pair_disc_loss(&ia, &ib, cyc, k).unwrap() - (direct - k * cyc)).abs());
    }

    // identity set loss vs a from-scratch direct evaluation
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (m, d) = (4usize, 3usize);
        let emb = Array2::from_shape_simple_fn((m, d), || rng.gen_range(-1.0..1.0));
        let labels = [0u32, 1, 0, 2];
        let cents = Array2::from_shape_simple_fn((3, d), || rng.gen_range(-1.0..1.0));
        let store = CentroidStore::new(d, 0.95).updated(&cents, &[0, 1, 2]).unwrap();
        let cfg = IdentityLossConfig::default();

        let dist2 = |i: usize, j: u32| -> f64 {
            let c = store.get(j);
            emb.row(i)
                .iter()
                .zip(c.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut var = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            var += dist2(i, l);
        }
        let sigma_sq = (var / (m as f64 - 1.0)).max(cfg.sigma_floor);
        let mut direct = 0.0;
        for (i, &own) in labels.iter().enumerate() {
            let num = (-dist2(i, own) / (2.0 * sigma_sq) - cfg.eta).exp();
            let mut den = 0.0;
            for j in store.labels() {
                if j != own {
                    den += (-dist2(i, j) / (2.0 * sigma_sq)).exp();
                }
            }
            direct += -(num / den).ln();
        }
        let (value, used_sigma) = identity_set_loss(&emb, &labels, &store, &cfg).unwrap();
        worst = worst.max((value - direct).abs());
        worst = worst.max((used_sigma - sigma_sq).abs());
    }

    report(3, "exact-formula oracles", worst <= 1e-6, &format!("worst abs dev {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// criterion 4: end-to-end toy run
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_end_to_end_toy_run() {
    let started = std::time::Instant::now();
    let mut cfg = TrainConfig::default(); // 32x32, 200 ids x 20, 100 paired, 5k iters
    cfg.base_channels = 2;
    cfg.batch_size = 8;
    let bundle = build_datasets(&cfg.data).unwrap();
    let embedder = pretrain_embedder(&cfg).unwrap();
    let (state, records) = train(&cfg, &bundle, embedder, &RunOutputs::default()).unwrap();
    let (before, after) = fidelity_improvement(&cfg, &bundle, &state).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;

    let pass = records.len() == 5000 && after <= 0.5 * before && minutes <= 30.0;
    report(
        4,
        "end-to-end toy run",
        pass,
        &format!(
            "fidelity untrained {before:.4} -> EMA {after:.4} (ratio {:.3}), {minutes:.1} min",
            after / before
        ),
    );
}

// ---------------------------------------------------------------------------
// shared harness for the directional criteria (5-7)
// ---------------------------------------------------------------------------

/// Training config small enough to run 3 seeds x 2 variants, but at full
/// 32x32 resolution so the hidden transform's identity cues are resolved.
/// The identity weight is raised and the schedule shortened/accelerated so
/// the effects under test emerge within the iteration budget.
fn directional_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = DataConfig {
        seed,
        synth_ids: 24,
        synth_per_id: 8,
        real_ids: 24,
        real_per_id: 8,
        paired_count: 60,
        heldout_ids: 12,
        heldout_per_id: 2,
        ..DataConfig::default()
    };
    cfg.base_channels = 2;
    cfg.batch_size = 4;
    cfg.base_lr = 4e-4;
    cfg.total_iters = 2000;
    cfg.ema_decay = 0.99;
    cfg.loss_weights.lambda_c = 0.6;
    // stable EMA centroids give the identity set loss a meaningful target at
    // this scale; the printed jump-toward-sample rule is too noisy to help
    // within 2000 iterations
    cfg.interpret_beta_as_retention = true;
    cfg.pretrain = PretrainConfig { ids: 30, per_id: 8, iters: 300, lr: 3e-3, batch_size: 16 };
    cfg.seed = seed;
    cfg
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = DataConfig {
        seed,
        image_size: 16,
        synth_ids: 6,
        synth_per_id: 3,
        real_ids: 6,
        real_per_id: 3,
        paired_count: 8,
        heldout_ids: 4,
        heldout_per_id: 1,
        ..DataConfig::default()
    };
    cfg.base_channels = 2;
    cfg.embedding_dim = 8;
    cfg.batch_size = 4;
    cfg.total_iters = 6;
    cfg.pretrain = PretrainConfig { ids: 4, per_id: 3, iters: 3, lr: 2e-3, batch_size: 4 };
    cfg.seed = seed;
    cfg
}

fn eer_of(
    data: &[(u32, ndarray::Array3<f64>)],
    embedder: &WeightSet,
    cfg: &TrainConfig,
) -> f64 {
    let pairs = build_verification_pairs(data, 300, 300, 1).unwrap();
    let (d, l) = pair_distances(&pairs, embedder, &cfg.embedder_spec()).unwrap();
    compute_eer(&d, &l).unwrap().0
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

const DIRECTIONAL_SEEDS: [u64; 3] = [1, 2, 3];

// ---------------------------------------------------------------------------
// criterion 5: identity preservation ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_identity_preservation() {
    let mut full_eers = Vec::new();
    let mut ablated_eers = Vec::new();
    for seed in DIRECTIONAL_SEEDS {
        let cfg = directional_config(seed);
        let bundle = build_datasets(&cfg.data).unwrap();
        let embedder = pretrain_embedder(&cfg).unwrap();
        let (full, _) = train(&cfg, &bundle, embedder.clone(), &RunOutputs::default()).unwrap();
        let mut ablated_cfg = cfg.clone();
        ablated_cfg.loss_weights.lambda_c = 0.0;
        let (ablated, _) =
            train(&ablated_cfg, &bundle, embedder.clone(), &RunOutputs::default()).unwrap();

        let gen_full = generate_labeled(&bundle, &full.ema_gen, &cfg.generator_spec()).unwrap();
        let gen_ablated =
            generate_labeled(&bundle, &ablated.ema_gen, &cfg.generator_spec()).unwrap();
        full_eers.push(eer_of(&gen_full, &embedder, &cfg));
        ablated_eers.push(eer_of(&gen_ablated, &embedder, &cfg));
    }
    // paired comparison: median over seeds of (ablated - full)
    let gaps: Vec<f64> =
        full_eers.iter().zip(&ablated_eers).map(|(f, a)| a - f).collect();
    let med_gap = median(gaps.clone());
    report(
        5,
        "identity preservation ablation",
        med_gap > 0.0,
        &format!(
            "median EER gap (lambda_C=0 minus full) {med_gap:+.4} (per-seed EERs {full_eers:.4?} vs {ablated_eers:.4?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: domain separation vs raw synthetic renders
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_domain_separation() {
    let mut gen_eers = Vec::new();
    let mut raw_eers = Vec::new();
    for seed in DIRECTIONAL_SEEDS {
        let cfg = directional_config(seed);
        let bundle = build_datasets(&cfg.data).unwrap();
        let embedder = pretrain_embedder(&cfg).unwrap();
        let (state, _) = train(&cfg, &bundle, embedder.clone(), &RunOutputs::default()).unwrap();
        let generated = generate_labeled(&bundle, &state.ema_gen, &cfg.generator_spec()).unwrap();
        let raw: Vec<_> = bundle
            .unpaired_synthetic
            .iter()
            .map(|s| (s.params.identity_label, s.image.clone()))
            .collect();
        gen_eers.push(eer_of(&generated, &embedder, &cfg));
        raw_eers.push(eer_of(&raw, &embedder, &cfg));
    }
    // paired comparison: median over seeds of (raw - generated)
    let gaps: Vec<f64> = gen_eers.iter().zip(&raw_eers).map(|(g, r)| r - g).collect();
    let med_gap = median(gaps.clone());
    report(
        6,
        "domain separation",
        med_gap > 0.0,
        &format!(
            "median EER gap (raw minus generated) {med_gap:+.4} (per-seed EERs {gen_eers:.4?} vs {raw_eers:.4?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: augmentation benefit at the 20% real-data fraction
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_augmentation_benefit() {
    let mut diffs = Vec::new();
    let mut details = Vec::new();
    for seed in DIRECTIONAL_SEEDS {
        let cfg = directional_config(seed);
        let bundle = build_datasets(&cfg.data).unwrap();
        let embedder = pretrain_embedder(&cfg).unwrap();
        let (state, _) = train(&cfg, &bundle, embedder, &RunOutputs::default()).unwrap();
        let generated = generate_labeled(&bundle, &state.ema_gen, &cfg.generator_spec()).unwrap();

        // held-out real split: further nuisance draws of the same identities
        let d = &cfg.data;
        let (per, extra) = (d.real_per_id, 4usize);
        let test_params: Vec<_> =
            sample_params_with(d.seed.wrapping_add(1), d.real_ids, per + extra, d.real_id_base)
                .unwrap()
                .into_iter()
                .enumerate()
                .filter(|(i, _)| i % (per + extra) >= per)
                .map(|(_, p)| p)
                .collect();
        let real_test: Vec<_> = test_params
            .iter()
            .map(|p| (p.identity_label, render_real(p, d.image_size, d.channels).unwrap()))
            .collect();

        let aug = AugmentationConfig { seed, eval_pairs: 120, ..AugmentationConfig::default() };
        let cells = faceforge::eval::augmentation_experiment(
            &[0.2],
            &generated,
            &cfg,
            &aug,
            &bundle.unpaired_real,
            &real_test,
        )
        .unwrap();
        let with = cells.iter().find(|c| c.augmented).unwrap().accuracy;
        let without = cells.iter().find(|c| !c.augmented).unwrap().accuracy;
        diffs.push(with - without);
        details.push(format!("seed {seed}: {with:.4} vs {without:.4}"));
    }
    let med = median(diffs.clone());
    report(
        7,
        "augmentation benefit at 20%",
        med >= 0.0,
        &format!("median accuracy gain {med:+.4} ({})", details.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let mut cfg = tiny_config(21);
    // freeze the milestone schedule so the interrupted run (total_iters = 3)
    // sees the same learning rates as the reference run
    cfg.lr_milestones = cfg.effective_milestones();
    let bundle = build_datasets(&cfg.data).unwrap();
    let embedder = pretrain_embedder(&cfg).unwrap();

    // uninterrupted reference run
    let (reference, ref_records) =
        train(&cfg, &bundle, embedder.clone(), &RunOutputs::default()).unwrap();

    // checkpoint roundtrip is exact
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ck");
    checkpoint_save(&reference, &ckpt).unwrap();
    let reloaded = checkpoint_load(&ckpt).unwrap();
    let roundtrip_exact = reloaded == reference;

    // interrupted run: stop at 3, save, reload, continue to 6
    let mut half_cfg = cfg.clone();
    half_cfg.total_iters = 3;
    let state = TrainState::init(&half_cfg, embedder).unwrap();
    let (half, mut records) =
        train_loop(state, &bundle, &half_cfg, &RunOutputs::default()).unwrap();
    let ckpt2 = dir.path().join("ck2");
    checkpoint_save(&half, &ckpt2).unwrap();
    let resumed = checkpoint_load(&ckpt2).unwrap();
    let (finished, tail) = train_loop(resumed, &bundle, &cfg, &RunOutputs::default()).unwrap();
    records.extend(tail);

    let resume_exact = finished == reference && records == ref_records;
    report(
        8,
        "determinism & persistence",
        roundtrip_exact && resume_exact,
        &format!("roundtrip exact: {roundtrip_exact}, resumed metrics bitwise: {resume_exact}"),
    );
}

