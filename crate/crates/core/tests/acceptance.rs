//! One PASS/FAIL line per acceptance criterion.
//!
//! The fast criteria run with the default test suite. The synthetic-shift
//! comparisons take tens of minutes on one core and the MNIST→USPS run needs
//! the datasets under `DRCN_DATA_DIR`; both are ignored by default:
//!
//! ```text
//! cargo test --release -p drcn-core --test acceptance -- --ignored --nocapture
//! ```

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use drcn::checkpoint;
use drcn::data::{
    encode_idx_images, encode_idx_labels, encode_usps, make_synthetic_shift, parse_idx_images, parse_idx_labels,
    parse_usps, Shift, SyntheticSpec,
};
use drcn::experiment::{load_data, run_with_data, Baseline, ExperimentConfig, DATA_DIR_ENV};
use drcn::model::{DrcnModel, ParamGroup};
use drcn::train::{build_model, stopping_rule, Flavor, Phase, StopDecision, TrainConfig, Trainer};
use drcn::{Error, Rng};

/// Writes past the test harness's output capture so the verdict shows up
/// in a plain `cargo test` run.
fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {id} ({name}): {detail}");
}

fn bits(model: &DrcnModel, groups: &[ParamGroup]) -> Vec<u64> {
    groups
        .iter()
        .flat_map(|g| model.snapshot(*g))
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn smoke_cfg() -> TrainConfig {
    TrainConfig {
        channels: [8, 12, 16],
        batch_source: 32,
        batch_target: 32,
        lr_c: 1e-3,
        lr_r: 1e-3,
        stop_tolerance: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut worst_layer = 0.0f64;
    let mut layer_draws = 0;
    for seed in 0..64 {
        if let Some(errs) = common::layer_errors(seed) {
            layer_draws += 1;
            for (_, e) in errs {
                worst_layer = worst_layer.max(e);
            }
        }
    }
    let mut worst_c = 0.0f64;
    let mut worst_r = 0.0f64;
    let mut seed = 0;
    for _ in 0..8 {
        let (used, c, r) = common::next_clean_draw(seed);
        worst_c = worst_c.max(c);
        worst_r = worst_r.max(r);
        seed = used + 1;
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = layer_draws > 0 && worst_layer.max(worst_c).max(worst_r) < common::FD_TOL && secs < 30.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "layers {worst_layer:.1e} over {layer_draws} draws, f_c {worst_c:.1e}, f_r {worst_r:.1e} over 8 draws, {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_lambda_endpoints() {
    let started = Instant::now();
    let (source, target) = make_synthetic_shift(&mut Rng::new(11), 500, &SyntheticSpec::new(10, Shift::Invert)).unwrap();
    let pool = target.unlabeled();
    let cfg = TrainConfig { max_epochs: 3, seed: 5, ..smoke_cfg() };
    let enc_lab = [ParamGroup::Encoder, ParamGroup::Labeler];

    let trajectory = |lambda: f64, with_decoder: bool| {
        let cfg = TrainConfig { lambda, ..cfg.clone() };
        let mut model = build_model([1, 28, 28], 10, &cfg, with_decoder).unwrap();
        let mut traj = vec![bits(&model, &enc_lab)];
        Trainer::new(cfg)
            .observe(|phase, m| {
                if let Phase::SourceDone { .. } = phase {
                    traj.push(bits(m, &enc_lab));
                }
            })
            .run(&mut model, &source, with_decoder.then_some(&pool))
            .unwrap();
        traj.push(bits(&model, &enc_lab));
        traj
    };
    let drcn = trajectory(1.0, true);
    let convnet = trajectory(1.0, false);
    let identical = drcn.len() == 5 && drcn == convnet;

    let cfg0 = TrainConfig { lambda: 0.0, ..cfg.clone() };
    let mut model = build_model([1, 28, 28], 10, &cfg0, true).unwrap();
    let lab0 = bits(&model, &[ParamGroup::Labeler]);
    let enc0 = bits(&model, &[ParamGroup::Encoder]);
    Trainer::new(cfg0).run(&mut model, &source, Some(&pool)).unwrap();
    let frozen = bits(&model, &[ParamGroup::Labeler]) == lab0 && bits(&model, &[ParamGroup::Encoder]) != enc0;

    let secs = started.elapsed().as_secs_f64();
    let pass = identical && frozen && secs < 120.0;
    report(
        2,
        "λ-endpoint equivalence",
        pass,
        &format!("λ=1 matches convnet_src over 3 epochs: {identical}, λ=0 keeps Θ_lab: {frozen}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_pipeline_isolation() {
    let (source, target) = make_synthetic_shift(&mut Rng::new(12), 200, &SyntheticSpec::new(10, Shift::Invert)).unwrap();
    let pool = target.unlabeled();
    let mut violations = Vec::new();
    let mut checks = 0;
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = TrainConfig { lambda, max_epochs: 5, seed: 9, ..smoke_cfg() };
        let mut model = build_model([1, 28, 28], 10, &cfg, true).unwrap();
        let init_dec = bits(&model, &[ParamGroup::Decoder]);
        let init_lab = bits(&model, &[ParamGroup::Labeler]);
        let mut dec = init_dec.clone();
        let mut lab = init_lab.clone();
        Trainer::new(cfg)
            .observe(|phase, m| {
                checks += 1;
                let now_dec = bits(m, &[ParamGroup::Decoder]);
                let now_lab = bits(m, &[ParamGroup::Labeler]);
                match phase {
                    // Classification steps never touch the decoder.
                    Phase::SourceDone { epoch } if now_dec != dec => {
                        violations.push(format!("λ={lambda} epoch {epoch}: Θ_dec moved in the source loop"))
                    }
                    // Reconstruction steps never touch the labeler.
                    Phase::TargetDone { epoch } if now_lab != lab => {
                        violations.push(format!("λ={lambda} epoch {epoch}: Θ_lab moved in the target loop"))
                    }
                    _ => {}
                }
                if lambda == 1.0 && now_dec != init_dec {
                    violations.push(format!("λ=1: Θ_dec left its initialization ({phase:?})"));
                }
                if lambda == 0.0 && now_lab != init_lab {
                    violations.push(format!("λ=0: Θ_lab left its initialization ({phase:?})"));
                }
                dec = now_dec;
                lab = now_lab;
            })
            .run(&mut model, &source, Some(&pool))
            .unwrap();
    }
    let pass = violations.is_empty() && checks == 30;
    report(
        3,
        "pipeline isolation",
        pass,
        &format!("{checks} phase checks over 5 epochs at λ ∈ {{0, 0.5, 1}}, {} violations", violations.len()),
    );
    assert!(pass, "{violations:?}");
}

/// Target accuracies and reconstruction ratios of the synthetic inversion
/// runs shared by criteria 4, 6 and 7.
struct ShiftRuns {
    seeds: Vec<u64>,
    accuracy: Vec<[f64; 4]>,
    recon_ratio: Vec<f64>,
    seconds: [f64; 4],
}

const SHIFT_BASELINES: [Baseline; 4] = [Baseline::Drcn, Baseline::ConvnetSrc, Baseline::DrcnS, Baseline::DrcnSt];

fn shift_cfg() -> ExperimentConfig {
    ExperimentConfig::parse(
        "source=synth
target=synth-invert
lambda=0.7
synthetic_classes=10
synthetic_n=2000
synthetic_test_n=500
channels=16,24,32
batch_source=32
batch_target=32
lr_c=1e-3
lr_r=1e-3
max_epochs=25
stop_tolerance=0",
    )
    .unwrap()
}

fn shift_runs() -> &'static ShiftRuns {
    static RUNS: OnceLock<ShiftRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let seeds: Vec<u64> = (0..5).collect();
        let mut accuracy = Vec::new();
        let mut recon_ratio = Vec::new();
        let mut seconds = [0.0; 4];
        for &seed in &seeds {
            let mut cfg = shift_cfg();
            cfg.data_seed = seed;
            cfg.train.seed = seed;
            let data = load_data(&cfg).unwrap();
            let mut acc = [0.0; 4];
            for (i, baseline) in SHIFT_BASELINES.iter().enumerate() {
                cfg.baseline = *baseline;
                cfg.out = root.path().join(format!("{seed}-{}", baseline.as_str()));
                let started = Instant::now();
                let report = run_with_data(&cfg, &data).unwrap();
                seconds[i] += started.elapsed().as_secs_f64();
                acc[i] = 100.0 * report.target_accuracy.unwrap();
                if *baseline == Baseline::Drcn {
                    let model = checkpoint::load(&cfg.out.join("model.ckpt")).unwrap();
                    let x = &data.source_test.images;
                    let recon = model.forward_reconstruct(x).unwrap();
                    let dist = |t: &drcn::Tensor| {
                        recon.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    };
                    recon_ratio.push(dist(&x.map(|v| 1.0 - v)) / dist(x));
                }
            }
            println!("  seed {seed}: drcn {:.1}, convnet_src {:.1}, drcn_s {:.1}, drcn_st {:.1}", acc[0], acc[1], acc[2], acc[3]);
            accuracy.push(acc);
        }
        ShiftRuns { seeds, accuracy, recon_ratio, seconds }
    })
}

fn median_acc(runs: &ShiftRuns, i: usize) -> f64 {
    median(runs.accuracy.iter().map(|a| a[i]).collect())
}

#[test]
#[ignore = "about 25 minutes on one core"]
fn criterion_4_synthetic_shift_adaptation() {
    let runs = shift_runs();
    let (drcn, src) = (median_acc(runs, 0), median_acc(runs, 1));
    let minutes = (runs.seconds[0] + runs.seconds[1]) / 60.0;
    let pass = drcn - src >= 5.0 && minutes < 10.0;
    report(
        4,
        "synthetic-shift adaptation",
        pass,
        &format!(
            "median target accuracy drcn {drcn:.1} vs convnet_src {src:.1} over {} seeds (gap {:+.1}, need ≥ +5), {minutes:.1} min",
            runs.seeds.len(),
            drcn - src
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "about 25 minutes on one core"]
fn criterion_6_flavor_ordering() {
    let runs = shift_runs();
    let (drcn, s, st) = (median_acc(runs, 0), median_acc(runs, 2), median_acc(runs, 3));
    let pass = drcn + 1.0 >= s && drcn + 1.0 >= st;
    report(
        6,
        "flavor ordering",
        pass,
        &format!("median target accuracy drcn {drcn:.1}, drcn_s {s:.1}, drcn_st {st:.1}"),
    );
    assert!(pass);
}

#[test]
#[ignore = "about 25 minutes on one core"]
fn criterion_7_reconstruction_diagnostic() {
    let runs = shift_runs();
    let ratio = median(runs.recon_ratio.clone());
    let pass = ratio <= 0.8;
    report(
        7,
        "reconstruction diagnostic",
        pass,
        &format!("median distance to inverted / distance to original = {ratio:.3} (need ≤ 0.800)"),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs MNIST and USPS under DRCN_DATA_DIR; about 40 minutes on one core"]
fn criterion_5_mnist_to_usps() {
    let Some(dir) = std::env::var_os(DATA_DIR_ENV) else {
        report(5, "MNIST→USPS", false, &format!("{DATA_DIR_ENV} is not set"));
        panic!("{DATA_DIR_ENV} is not set");
    };
    let mut cfg = ExperimentConfig::parse(
        "source=mnist
target=usps
source_limit=5000
target_limit=2000
channels=16,24,32
batch_source=32
batch_target=32
lr_c=1e-3
lr_r=1e-3
max_epochs=30",
    )
    .unwrap();
    cfg.data_dir = Some(dir.into());
    let root = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let (mut drcn, mut src) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        cfg.train.seed = seed;
        let data = match load_data(&cfg) {
            Ok(d) => d,
            Err(e) => {
                report(5, "MNIST→USPS", false, &format!("datasets unavailable: {e}"));
                panic!("{e}");
            }
        };
        for (baseline, out) in [(Baseline::Drcn, &mut drcn), (Baseline::ConvnetSrc, &mut src)] {
            cfg.baseline = baseline;
            cfg.out = root.path().join(format!("{seed}-{}", baseline.as_str()));
            out.push(100.0 * run_with_data(&cfg, &data).unwrap().target_accuracy.unwrap());
        }
    }
    let (d, s) = (median(drcn), median(src));
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let pass = d - s >= 2.0 && minutes < 45.0;
    report(
        5,
        "MNIST→USPS",
        pass,
        &format!("median USPS test accuracy drcn {d:.1} vs convnet_src {s:.1} over 3 seeds, {minutes:.1} min"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_stopping_rule() {
    let cases: [(&[f64], usize, f64, StopDecision); 4] = [
        (&[1.0, 0.5, 0.25], 3, 0.01, StopDecision::Continue),
        (&[0.30, 0.30, 0.30], 3, 0.01, StopDecision::Stop),
        (&[0.30, 0.30, 0.30], 3, 1e-12, StopDecision::Stop),
        (&[0.300, 0.299, 0.2995], 3, 0.01, StopDecision::Stop),
    ];
    let failed: Vec<_> = cases
        .iter()
        .filter(|(l, w, t, want)| stopping_rule(l, *w, *t) != *want)
        .map(|(l, ..)| l.to_vec())
        .collect();
    let pass = failed.is_empty();
    report(8, "stopping rule", pass, &format!("{} of {} examples as specified", cases.len() - failed.len(), cases.len()));
    assert!(pass, "{failed:?}");
}

#[test]
fn criterion_9_data_ingestion() {
    let mut idx_images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    idx_images.extend([0, 1, 2, 127, 128, 255, 255, 254, 64, 32, 16, 0]);
    let idx_labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
    let mut usps = b"USPS".to_vec();
    for v in [2u32, 2, 2] {
        usps.extend(v.to_le_bytes());
    }
    for v in [0.5f32, 0.5, 0.5, 0.5, 0.0, 1.0, 0.25, 0.125] {
        usps.extend(v.to_le_bytes());
    }
    usps.extend([4, 9]);

    let mut ok = Vec::new();
    let images = parse_idx_images(&idx_images).unwrap();
    ok.push(images.shape() == [2, 1, 2, 3] && encode_idx_images(&images).unwrap() == idx_images);
    let labels = parse_idx_labels(&idx_labels).unwrap();
    ok.push(labels == [7, 3] && encode_idx_labels(&labels) == idx_labels);
    let (u_images, u_labels) = parse_usps(&usps).unwrap();
    ok.push(u_images.data()[..4] == [0.5; 4] && encode_usps(&u_images, &u_labels).unwrap() == usps);

    let mut bad_idx = idx_images.clone();
    bad_idx[3] = 1;
    ok.push(matches!(parse_idx_images(&bad_idx), Err(Error::Format(m)) if m.contains("0x00000801")));
    ok.push(matches!(parse_idx_labels(&idx_images), Err(Error::Format(_))));
    let mut bad_usps = usps.clone();
    bad_usps[0] = b'X';
    ok.push(matches!(parse_usps(&bad_usps), Err(Error::Format(_))));
    ok.push(matches!(parse_idx_images(&idx_images[..20]), Err(Error::Length(_))));

    let pass = ok.iter().all(|&b| b);
    report(
        9,
        "data ingestion",
        pass,
        &format!("{} of {} fixture checks (IDX and USPS round trips, bad magic, truncation)", ok.iter().filter(|&&b| b).count(), ok.len()),
    );
    assert!(pass, "{ok:?}");
}

#[test]
fn smoke_reconstruction_halves_in_200_steps() {
    let (_, target) = make_synthetic_shift(&mut Rng::new(13), 50, &SyntheticSpec::new(10, Shift::Invert)).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        batch_target: 50,
        max_epochs: 200,
        denoise: false,
        flavor: Flavor::TargetOnly,
        ..smoke_cfg()
    };
    let mut model = build_model([1, 28, 28], 10, &cfg, true).unwrap();
    let before = model.reconstruction_loss(&target.images, &target.images).unwrap().value;
    Trainer::new(cfg).run(&mut model, &target, Some(&target.unlabeled())).unwrap();
    let after = model.reconstruction_loss(&target.images, &target.images).unwrap().value;
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
