//! Acceptance run. Prints one PASS/FAIL line per criterion and a summary.
//! With `LIFTKIT_ACCEPTANCE_STRICT=1` it also exits non-zero if any
//! criterion fails.
//!
//! The toy-benchmark criteria (5 to 8 and 11) share one trained model;
//! criterion 7 trains two more with part of the conditioning masked.

#[path = "common/gradcheck.rs"]
mod gradcheck;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use liftkit::aggregate::Strategy;
use liftkit::denoiser::{ChannelTokens, ConditioningMask};
use liftkit::experiment::{
    ablation_row, prepare_data, run_pipeline, sample_test_set, strategy_errors, study_confidence,
    study_hypothesis_count, train_model, Conditioning, ExperimentConfig,
};
use liftkit::metrics::{auc, mpjpe, p_mpjpe, pck, procrustes_align};
use liftkit::pose::{Pose3D, PoseSample};
use liftkit::rng::{normal, normal_vec, rng_from};
use liftkit::sampler::{reverse_chain, HypothesisSet, OraclePredictor, SamplerConfig, SamplerVariant};
use liftkit::schedule::{DiffusionSchedule, ScheduleConfig};
use liftkit::trainer::TrainState;
use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;
use rand::Rng;

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

const SAMPLES: usize = 100_000;
const Y0: f64 = 5.0;

fn c1_forward_statistics() -> Check {
    let start = Instant::now();
    let schedule = DiffusionSchedule::from_betas(vec![0.01; 100]).map_err(err)?;
    let mut rng = rng_from(101);
    let start_state = vec![Y0; SAMPLES];
    let mut chain = start_state.clone();
    let mut worst: f64 = 0.0;
    for t in 1..=100 {
        chain = schedule
            .forward_step(&chain, t, &normal_vec(&mut rng, SAMPLES))
            .map_err(err)?;
        if [10, 50, 100].contains(&t) {
            let closed = schedule
                .forward_sample(&start_state, t, &normal_vec(&mut rng, SAMPLES))
                .map_err(err)?;
            let (m_seq, s_seq) = moments(&chain);
            let (m_cf, s_cf) = moments(&closed);
            worst = worst.max(rel(m_seq, m_cf)).max(rel(s_seq, s_cf));
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 0.01 && within(elapsed, 10),
        format!("max relative moment gap {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    ))
}

fn c2_posterior_consistency() -> Check {
    let start = Instant::now();
    let schedule = ScheduleConfig::default().build().map_err(err)?;
    let mut rng = rng_from(202);
    let y0 = vec![Y0; SAMPLES];
    let mut worst: f64 = 0.0;
    for t in [2, 10, 100, 500] {
        let y_t = schedule
            .forward_sample(&y0, t, &normal_vec(&mut rng, SAMPLES))
            .map_err(err)?;
        let (mean, var) = schedule.posterior_params(&y_t, &y0, t).map_err(err)?;
        let prev: Vec<f64> = mean.iter().map(|m| m + var.sqrt() * normal(&mut rng)).collect();
        let (m, s) = moments(&prev);
        let ab = schedule.alpha_bar(t - 1);
        worst = worst
            .max(rel(m, ab.sqrt() * Y0))
            .max(rel(s, (1.0 - ab).sqrt()));
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 0.01 && within(elapsed, 10),
        format!("max relative moment gap {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    ))
}

fn c3_gradients() -> Check {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut blocks = 0;
    for tokens in [ChannelTokens::Flattened, ChannelTokens::PerJoint] {
        let p = gradcheck::problem(tokens, ConditioningMask::default(), 21);
        for (name, e) in gradcheck::check_all_parameters(&p) {
            blocks += 1;
            if e > worst.1 {
                worst = (name, e);
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst.1 <= gradcheck::TOL && within(elapsed, 60),
        format!(
            "{blocks} blocks, worst {} at {:.2e}, {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    ))
}

fn c4_oracle_inversion() -> Check {
    let start = Instant::now();
    let schedule = ScheduleConfig::default().build().map_err(err)?;
    let cfg = ExperimentConfig::with_seed(404);
    let skeleton = cfg.skeleton.resolve().map_err(err)?;
    let poses = liftkit::pose::generate_synthetic_dataset(&skeleton, 100, &cfg.data.generator, 404)
        .map_err(err)?;
    let j = skeleton.joint_count();
    let mut worst: f64 = 0.0;
    let mut rng = rng_from(405);
    for s in &poses {
        let clean = Array2::from_shape_fn((j, 3), |(r, k)| s.pose3d.coords[r][k] / 1000.0);
        let oracle = OraclePredictor {
            clean: clean.clone(),
            schedule: &schedule,
        };
        let init = Array2::from_shape_simple_fn((j, 3), || normal(&mut rng));
        let out = reverse_chain(&oracle, &schedule, init, &s.features, 20, SamplerVariant::Ddim)
            .map_err(err)?;
        let diff = (&out - &clean).mapv(|v| v * v).sum().sqrt();
        worst = worst.max(diff / clean.mapv(|v| v * v).sum().sqrt());
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 1e-4 && within(elapsed, 5),
        format!("max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    ))
}

fn random_pose<R: Rng>(rng: &mut R, joints: usize) -> Pose3D {
    Pose3D::new(
        (0..joints)
            .map(|_| [300.0 * normal(rng), 300.0 * normal(rng), 300.0 * normal(rng)])
            .collect(),
    )
}

fn c9_metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = rng_from(909);
    let mut notes = Vec::new();

    // Whole millimetres, so the shifted coordinates and their differences are exact.
    let raw = random_pose(&mut rng, 8);
    let gt = Pose3D::new(raw.coords.iter().map(|c| c.map(f64::round)).collect());
    let offset = gt.translated([3.0, 4.0, 0.0]);
    let offset_ok = mpjpe(&offset, &gt).map_err(err)? == 5.0;
    notes.push(format!("offset mpjpe exact: {offset_ok}"));

    let mut residual: f64 = 0.0;
    for _ in 0..100 {
        let x = random_pose(&mut rng, 8);
        let axis = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
        let rot = Rotation3::from_scaled_axis(axis);
        let scale = rng.random_range(0.5..2.0);
        let shift = [100.0 * normal(&mut rng), 100.0 * normal(&mut rng), 100.0 * normal(&mut rng)];
        let y = Pose3D::new(
            x.coords
                .iter()
                .map(|c| {
                    let v = rot * Vector3::from(*c) * scale;
                    [v.x + shift[0], v.y + shift[1], v.z + shift[2]]
                })
                .collect(),
        );
        let aligned = procrustes_align(&x, &y).map_err(err)?;
        residual = residual.max(mpjpe(&aligned, &y).map_err(err)?);
    }
    notes.push(format!("procrustes residual {residual:.1e}"));

    let mut ordered = true;
    for _ in 0..10_000 {
        let (a, b) = (random_pose(&mut rng, 8), random_pose(&mut rng, 8));
        ordered &= p_mpjpe(&a, &b).map_err(err)? <= mpjpe(&a, &b).map_err(err)? + 1e-9;
    }
    notes.push(format!("p-mpjpe <= mpjpe: {ordered}"));

    let mut pck_ok = true;
    for _ in 0..1000 {
        let (a, b) = (random_pose(&mut rng, 8), random_pose(&mut rng, 8));
        let mut last = -1.0;
        for thr in [0.0, 50.0, 100.0, 150.0, 300.0, 1000.0] {
            let v = pck(&a, &b, thr).map_err(err)?;
            pck_ok &= v >= last;
            last = v;
        }
        let area = auc(&a, &b).map_err(err)?;
        pck_ok &= (0.0..=1.0).contains(&area);
    }
    notes.push(format!("pck monotone, auc in [0,1]: {pck_ok}"));

    let elapsed = start.elapsed();
    Ok((
        offset_ok && residual <= 1e-9 && ordered && pck_ok && within(elapsed, 10),
        format!("{}, {:.1}s", notes.join("; "), elapsed.as_secs_f64()),
    ))
}

/// Settings of the toy benchmark.
fn toy_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.data.train_count = 5000;
    cfg.data.test_count = 500;
    cfg.train.epochs = 30;
    cfg.train.batch_size = 16;
    cfg.train.lr_start = 2e-3;
    cfg.train.lr_decay_factor = 0.9;
    cfg.train.flip_prob = 0.0;
    cfg.sampler.hypotheses = 20;
    cfg.sampler.steps = 20;
    cfg
}

struct Toy {
    config: ExperimentConfig,
    train: Vec<PoseSample>,
    test: Vec<PoseSample>,
    state: TrainState,
    sets: Vec<HypothesisSet>,
    elapsed: Duration,
}

fn build_toy() -> Result<Toy, String> {
    let start = Instant::now();
    let config = toy_config(7);
    config.validate().map_err(err)?;
    let (train, test) = prepare_data(&config).map_err(err)?;
    let state = train_model(&config, ConditioningMask::default(), &train, None, None).map_err(err)?;
    let sets = sample_test_set(&state, &test, &config.sampler).map_err(err)?;
    Ok(Toy {
        config,
        train,
        test,
        state,
        sets,
        elapsed: start.elapsed(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_pose(samples: &[PoseSample]) -> Pose3D {
    let j = samples[0].pose3d.joint_count();
    let n = samples.len() as f64;
    let mut acc = vec![[0.0; 3]; j];
    for s in samples {
        for (a, c) in acc.iter_mut().zip(&s.pose3d.coords) {
            for k in 0..3 {
                a[k] += c[k] / n;
            }
        }
    }
    Pose3D::new(acc)
}

fn c5_toy_learning(toy: &Toy) -> Check {
    let baseline_pose = mean_pose(&toy.train);
    let baseline = mean(
        &toy.test
            .iter()
            .map(|s| mpjpe(&baseline_pose, &s.pose3d))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?,
    );
    let median = mean(&strategy_errors(&toy.sets, &toy.test, Strategy::Median, toy.config.seed).map_err(err)?);
    Ok((
        median <= 0.5 * baseline && within(toy.elapsed, 15 * 60),
        format!(
            "M {median:.2} mm vs mean-pose {baseline:.2} mm (ratio {:.3}), {:.0}s",
            median / baseline,
            toy.elapsed.as_secs_f64()
        ),
    ))
}

fn c6_dominance(toy: &Toy) -> Check {
    let seed = toy.config.seed;
    let errors = |s| strategy_errors(&toy.sets, &toy.test, s, seed).map_err(err);
    let (bj, b, r, m) = (
        errors(Strategy::BestJoint)?,
        errors(Strategy::Best)?,
        errors(Strategy::Random)?,
        errors(Strategy::Median)?,
    );
    let violations = (0..bj.len())
        .filter(|&i| !(bj[i] <= b[i] && b[i] <= r[i]))
        .count();
    let (mm, mr) = (mean(&m), mean(&r));
    Ok((
        violations == 0 && mm <= mr,
        format!(
            "per-frame Bjoint<=B<=R violations {violations}/{}; mean M {mm:.2} vs R {mr:.2}",
            bj.len()
        ),
    ))
}

fn c7_ablation(toy: &Toy) -> Check {
    let seed = toy.config.seed;
    let both = mean(&strategy_errors(&toy.sets, &toy.test, Strategy::Average, seed).map_err(err)?);
    let mut column = Vec::new();
    for c in [Conditioning::Context, Conditioning::Pose] {
        let state = train_model(&toy.config, c.mask(), &toy.train, None, None).map_err(err)?;
        let row = ablation_row(c, &state, &toy.test, &toy.config.sampler, seed).map_err(err)?;
        column.push(row.average);
    }
    let (context, pose) = (column[0], column[1]);
    Ok((
        both <= context && context <= pose,
        format!("A: pose+context {both:.2}, context {context:.2}, pose {pose:.2}"),
    ))
}

fn c8_confidence(toy: &Toy) -> Check {
    let rows = study_confidence(
        &toy.sets,
        &toy.test,
        Strategy::Median,
        &[1.0, 0.9],
        toy.config.seed,
    )
    .map_err(err)?;
    let (full, kept) = (rows[0].mpjpe_kept_mm, rows[1].mpjpe_kept_mm);
    Ok((
        kept <= full,
        format!("recall 0.9 kept {kept:.2} mm vs full {full:.2} mm"),
    ))
}

fn c10_determinism() -> Check {
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    let mut cfg = ExperimentConfig::with_seed(1010);
    cfg.data.train_count = 64;
    cfg.data.test_count = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.sampler.hypotheses = 4;
    cfg.sampler.steps = 5;
    let mut outputs = Vec::new();
    for d in &dirs {
        let mut c = cfg.clone();
        c.output_dir = d.path().to_path_buf();
        run_pipeline(&c).map_err(err)?;
        let read = |p: &str| std::fs::read(d.path().join(p)).map_err(err);
        outputs.push((read("reports/report.json")?, read("ckpt/model.ckpt")?));
    }
    let same_report = outputs[0].0 == outputs[1].0;
    let same_ckpt = outputs[0].1 == outputs[1].1;
    Ok((
        same_report && same_ckpt,
        format!("report.json identical: {same_report}; checkpoint identical: {same_ckpt}"),
    ))
}

fn c11_best_monotone(toy: &Toy) -> Check {
    let frames = 100.min(toy.test.len());
    let sampler = SamplerConfig {
        hypotheses: 40,
        ..toy.config.sampler.clone()
    };
    let sets = sample_test_set(&toy.state, &toy.test[..frames], &sampler).map_err(err)?;
    let counts = [1, 5, 10, 20, 40];
    let rows = study_hypothesis_count(&sets, &toy.test[..frames], &counts, toy.config.seed)
        .map_err(err)?;
    let best: Vec<f64> = rows
        .iter()
        .filter(|r| r.strategy == Strategy::Best)
        .map(|r| r.mpjpe_mm)
        .collect();
    let monotone = best.windows(2).all(|w| w[1] <= w[0]);
    let curve: Vec<String> = counts
        .iter()
        .zip(&best)
        .map(|(h, b)| format!("H={h}:{b:.2}"))
        .collect();
    Ok((monotone, curve.join(" ")))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: &str, title: &str, outcome: Check| {
        let (pass, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("{} C{id} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    };

    report("1", "forward-process statistics", c1_forward_statistics());
    report("2", "posterior consistency", c2_posterior_consistency());
    report("3", "gradient correctness", c3_gradients());
    report("4", "oracle DDIM inversion", c4_oracle_inversion());
    report("9", "metric oracles", c9_metric_oracles());
    report("10", "pipeline determinism", c10_determinism());
    match build_toy() {
        Ok(toy) => {
            report("5", "end-to-end toy learning", c5_toy_learning(&toy));
            report("6", "aggregation dominance", c6_dominance(&toy));
            report("8", "confidence filtering", c8_confidence(&toy));
            report("11", "best-of-H monotone in H", c11_best_monotone(&toy));
            report("7", "conditioning ablation ordering", c7_ablation(&toy));
        }
        Err(e) => {
            for (id, title) in [
                ("5", "end-to-end toy learning"),
                ("6", "aggregation dominance"),
                ("8", "confidence filtering"),
                ("11", "best-of-H monotone in H"),
                ("7", "conditioning ablation ordering"),
            ] {
                report(id, title, Err(format!("toy model unavailable: {e}")));
            }
        }
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("acceptance: {failures} criteria failed");
    if std::env::var("LIFTKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
