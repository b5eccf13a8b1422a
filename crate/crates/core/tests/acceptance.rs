//! End-to-end acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use common::fixtures::{desk_data, desk_train_config, ncc_gate_case, smooth_image};
use common::grad::{all_op_checks, model_case, tiny_drn_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srforge::data::{load_ppm, save_ppm};
use srforge::ensemble::*;
use srforge::metrics::{ms_ssim, ncc, psnr, psnr_from_mse, ssim};
use srforge::models::{encode_weights, load_weights, save_weights};
use srforge::nas::*;
use srforge::tensor::ops::conv2d;
use srforge::trainer::*;
use srforge::{Model, ModelConfig, Parameter, Tensor};

struct Verdicts {
    lines: Vec<String>,
    failed: Vec<String>,
}

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        if !pass {
            self.failed.push(id.to_string());
        }
        self.lines.push(line);
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.random_range(0.0..1.0))
}

fn gradients(v: &mut Verdicts) {
    let start = Instant::now();
    let ops = all_op_checks();
    let (worst_name, worst) = ops
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let model = model_case(&tiny_drn_config(), 3, 5);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && model < 1e-3 && secs < 60.0;
    v.record(
        "1 gradients",
        pass,
        format!(
            "{} ops worst {worst:.2e} ({worst_name}), tiny DRN {model:.2e}, limit 1e-3, {secs:.1}s of 60s",
            ops.len()
        ),
    );
}

fn metric_identities(v: &mut Verdicts) {
    let x = random_image(96, 96, 11).cast::<f64>();
    let s = ssim(&x, &x).unwrap();
    let ms = ms_ssim(&x, &x).unwrap();
    let exact = psnr_from_mse(0.01);
    let a = Tensor::<f64>::full([1, 3, 8, 8], 0.25);
    let b = Tensor::<f64>::full([1, 3, 8, 8], 0.35);
    let via_images = psnr(&a, &b).unwrap();
    let self_ncc = ncc(&x, &x).unwrap();
    let anti = ncc(&x, &x.map(|p| 0.7 - p)).unwrap();
    let pass = (s - 1.0).abs() <= 1e-9
        && (ms - 1.0).abs() <= 1e-9
        && exact == 20.0
        && (via_images - 20.0).abs() < 1e-9
        && (self_ncc - 1.0).abs() <= 1e-9
        && (anti + 1.0).abs() <= 1e-9;
    v.record(
        "2 metric identities",
        pass,
        format!(
            "ssim-1 {:.1e}, ms_ssim-1 {:.1e}, psnr(0.01) {exact} dB ({via_images:.12} from images), ncc-1 {:.1e}, ncc(x,c-x)+1 {:.1e}",
            s - 1.0,
            ms - 1.0,
            self_ncc - 1.0,
            anti + 1.0
        ),
    );
}

fn ensemble_algebra(v: &mut Verdicts) {
    let identity = FnUpscaler {
        scale: 1,
        f: |x: &Tensor<f32>| Ok(x.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_identity = 0.0f64;
    let plans = 8;
    for k in 0..plans {
        let (h, w) = (rng.random_range(20..60), rng.random_range(20..60));
        let patch = rng.random_range(4..=h.min(w) / 2);
        let stride = rng.random_range(1..patch);
        let img = random_image(h, w, k);
        let plan = plan_tiles(h, w, patch, stride).unwrap();
        let out = tiled_forward_f64(&identity, &img, &plan, &make_weight_map(patch, 1)).unwrap();
        worst_identity = worst_identity.max(out.max_abs_diff(&img.cast()));
    }
    let a = worst_identity < 1e-6;

    let plan = plan_tiles(272, 272, 120, 60).unwrap();
    let mut oracle = Vec::new();
    for y in [0, 60, 120, 152] {
        for x in [0, 60, 120, 152] {
            oracle.push((y, x));
        }
    }
    let b = plan.origins == oracle;

    let mut wr = ChaCha8Rng::seed_from_u64(6);
    let weight = Parameter::new(
        "w",
        Tensor::<f32>::from_fn([3, 3, 1, 1], |_, _, _, _| wr.random_range(-1.0..1.0)),
    );
    let bias = Parameter::new(
        "b",
        Tensor::<f32>::from_fn([1, 3, 1, 1], |_, _, _, _| wr.random_range(-0.1..0.1)),
    );
    let pointwise = FnUpscaler {
        scale: 1,
        f: move |x: &Tensor<f32>| conv2d(x, &weight, &bias, 1, 0),
    };
    let img = random_image(17, 23, 7);
    let c_err = self_ensemble_forward(&pointwise, &img)
        .unwrap()
        .max_abs_diff(&pointwise.upscale(&img).unwrap());
    let c = c_err < 1e-5;

    let model = Model::build(&ModelConfig::preset("drn-tiny", 2).unwrap(), 8).unwrap();
    let img = random_image(20, 20, 8);
    let spec = EnsembleSpec {
        patch: 12,
        stride: 6,
        self_ensemble: true,
        weights: None,
    };
    let single = model_ensemble(&[&model], &spec, &img).unwrap();
    let triple = model_ensemble(&[&model, &model, &model], &spec, &img).unwrap();
    let d_err = triple.max_abs_diff(&single);
    let d = d_err < 1e-6;
    v.record(
        "3 ensemble algebra",
        a && b && c && d,
        format!(
            "(a) identity over {plans} plans {worst_identity:.1e}; (b) {} tiles, origins match oracle: {b}; (c) 1x1 self-ensemble {c_err:.1e}; (d) 3-copy ensemble {d_err:.1e}",
            plan.origins.len()
        ),
    );
}

fn gp_surrogate(v: &mut Verdicts) {
    let start = Instant::now();
    let x: Vec<Vec<f64>> = (0..9)
        .map(|i| vec![i as f64 / 8.0, ((i * 5) % 9) as f64 / 8.0])
        .collect();
    let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[1]).collect();
    let hyper = GpHyper {
        length_scales: vec![0.4, 0.4],
        signal_var: 1.0,
        noise_var: 1e-10,
    };
    let gp = GpSurrogate::with_hyper(&x, &y, hyper).unwrap();
    let interp = x
        .iter()
        .zip(&y)
        .map(|(p, t)| (gp.predict(p).0 - t).abs())
        .fold(0.0, f64::max);

    let space = SearchSpace::drn_default();
    let (mut hits, mut gp_curve, mut rnd_curve) = (0, vec![0.0; 20], vec![0.0; 20]);
    for seed in 0..50u64 {
        let cfg = SearchConfig {
            budget: 20,
            init_samples: 5,
            acquisition: Acquisition::Ucb {
                beta: BENCHMARK_BETA,
            },
            seed,
        };
        let mut bench = QuadraticBenchmark::drn_default(&space);
        let r = search(&space, &mut bench, &cfg).unwrap();
        hits += r.iterations.iter().any(|i| i.point == bench.optimum) as usize;
        for (acc, s) in gp_curve.iter_mut().zip(r.best_so_far()) {
            *acc += s / 50.0;
        }
        for (acc, s) in rnd_curve
            .iter_mut()
            .zip(random_search_curve(&space, &mut bench, 20, seed).unwrap())
        {
            *acc += s / 50.0;
        }
    }
    let margin = (4..20)
        .map(|b| gp_curve[b] - rnd_curve[b])
        .fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    let pass = interp < 1e-6 && hits >= 45 && margin >= 0.0 && secs < 120.0;
    v.record(
        "4 gp surrogate",
        pass,
        format!(
            "interpolation {interp:.1e}; optimum found {hits}/50 (need 45); min gp-minus-random margin over budgets 5..20 {margin:.4}; {secs:.1}s of 120s"
        ),
    );
}

struct Trained {
    drn: Model<f32>,
    data: TrainData,
    bicubic: f64,
}

fn end_to_end(v: &mut Verdicts) -> Trained {
    let data = desk_data();
    let bicubic = bicubic_baseline(&data.val, 2).mean_psnr;
    let cfg = desk_train_config();
    let run = || {
        let mut model =
            Model::build(&ModelConfig::preset("drn-tiny", 2).unwrap(), cfg.seed).unwrap();
        let start = Instant::now();
        let report = train(&mut model, &data, &cfg, None).unwrap();
        (model, report, start.elapsed().as_secs_f64())
    };
    let (drn, report, secs) = run();
    let full = evaluate(&[&drn], &data.val, &EnsembleSpec::default()).mean_psnr;
    let plain = evaluate(&[&drn], &data.val, &EnsembleSpec::plain()).mean_psnr;
    let (again, again_report, _) = run();
    let identical = encode_weights(&drn) == encode_weights(&again)
        && report.without_timing() == again_report.without_timing();
    let gain = full - bicubic;
    v.record(
        "5 end-to-end",
        gain >= 0.5 && secs <= 900.0 && identical,
        format!(
            "{} train / {} val, {} epochs: full-ensemble PSNR {full:.3} dB (plain {plain:.3}), bicubic {bicubic:.3} dB, gain {gain:+.3} dB (need +0.5); train {secs:.0}s of 900s on {} thread(s); bit-exact rerun: {identical}",
            data.train.len(),
            data.val.len(),
            cfg.epochs,
            rayon::current_num_threads()
        ),
    );
    Trained { drn, data, bicubic }
}

fn ensemble_beats_members(v: &mut Verdicts, t: &Trained) {
    let cfg = desk_train_config();
    let mut rcan = Model::build(&ModelConfig::preset("rcan-tiny", 2).unwrap(), cfg.seed).unwrap();
    train(&mut rcan, &t.data, &cfg, None).unwrap();
    let spec = EnsembleSpec::default();
    let d = evaluate(&[&t.drn], &t.data.val, &spec).mean_psnr;
    let r = evaluate(&[&rcan], &t.data.val, &spec).mean_psnr;
    let e = evaluate(&[&t.drn, &rcan], &t.data.val, &spec).mean_psnr;
    let pass = e >= d.max(r) - 0.05 && e >= (d + r) / 2.0;
    v.record(
        "6 ensemble vs members",
        pass,
        format!(
            "drn-tiny {d:.3}, rcan-tiny {r:.3}, ensemble {e:.3} dB (bicubic {:.3}); need >= {:.3} and >= {:.3}",
            t.bicubic,
            d.max(r) - 0.05,
            (d + r) / 2.0
        ),
    );
}

fn data_gate(v: &mut Verdicts) {
    let g = ncc_gate_case();
    let pass = g.kept == ["aligned"] && g.rejected == ["shifted"];
    v.record(
        "7 ncc gate",
        pass,
        format!(
            "oracle ncc aligned {:.6}, shifted-4px {:.6}; kept {:?}, rejected {:?}",
            g.aligned_ncc, g.shifted_ncc, g.kept, g.rejected
        ),
    );
}

fn persistence(v: &mut Verdicts) {
    let dir = tempfile::tempdir().unwrap();
    let img = smooth_image(20, 24);
    let mut weights_ok = true;
    for (i, preset) in ["drn-tiny", "rcan-tiny"].iter().enumerate() {
        let m = Model::build(&ModelConfig::preset(preset, 2).unwrap(), i as u64).unwrap();
        let path = dir.path().join(format!("{preset}.srfw"));
        save_weights(&m, &path).unwrap();
        let back = load_weights(&path).unwrap();
        let (a, b) = (m.forward(&img).unwrap(), back.forward(&img).unwrap());
        weights_ok &= a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }

    let data = common::fixtures::tiny_data(8, 2, 48, 9);
    let mut cfg = TrainConfig::new(4);
    cfg.batch_size = 2;
    cfg.crop = 16;
    cfg.adam.lr = 1e-3;
    cfg.checkpoint_every = 2;
    cfg.validation = EnsembleSpec::plain();
    let ckpt = dir.path().join("ckpt");
    let mut full = Model::build(&ModelConfig::preset("drn-tiny", 2).unwrap(), 1).unwrap();
    let straight = train(&mut full, &data, &cfg, Some(&ckpt)).unwrap();
    let (mid, _) = checkpoint_paths(&ckpt, 2);
    let (mut resumed, state) = load_checkpoint(&mid).unwrap();
    let continued = train_from(&mut resumed, state, &data, &cfg, None).unwrap();
    let resume_ok = continued.without_timing().epochs == straight.without_timing().epochs
        && encode_weights(&resumed) == encode_weights(&full);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pixels = Tensor::<f32>::from_fn([1, 3, 13, 7], |_, _, _, _| {
        rng.random_range(0..=255u8) as f32 / 255.0
    });
    let ppm = dir.path().join("x.ppm");
    save_ppm(&pixels, &ppm).unwrap();
    let ppm_ok = load_ppm::<f32>(&ppm).unwrap() == pixels;
    v.record(
        "8 persistence",
        weights_ok && resume_ok && ppm_ok,
        format!("weights bit-identical forward: {weights_ok}; resume trajectory identical: {resume_ok}; ppm lossless: {ppm_ok}"),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdicts {
        lines: Vec::new(),
        failed: Vec::new(),
    };
    gradients(&mut v);
    metric_identities(&mut v);
    ensemble_algebra(&mut v);
    gp_surrogate(&mut v);
    let trained = end_to_end(&mut v);
    ensemble_beats_members(&mut v, &trained);
    data_gate(&mut v);
    persistence(&mut v);
    println!("\nsummary");
    for line in &v.lines {
        println!("{line}");
    }
    assert!(v.failed.is_empty(), "failed criteria: {:?}", v.failed);
}
