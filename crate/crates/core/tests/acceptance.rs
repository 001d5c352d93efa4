//! Acceptance suite: every release-gate criterion as one test that prints a
//! single pass/fail line. Run with
//! `cargo test -p warpaug --test acceptance -- --nocapture --test-threads 1`
//! to see the lines and keep wall-clock budgets uncontended.

mod common;

use common::{bitwise_equal, max_abs_diff, oracle_warp, square_template};
use rand::Rng;
use std::path::PathBuf;
use std::time::Instant;
use warpaug::adversary::{augment_batch, pgd_attack, AttackModel, BatchItem, PgdConfig, RecognizerAttack};
use warpaug::constraint::{compute_budget, is_feasible, landmark_flow, project, BudgetSpec};
use warpaug::data::{generate_synthetic, perturb_alignment, PerturbSpec};
use warpaug::geometry::{AffineParams, CenteredPoint, GridShape};
use warpaug::harness::{self, RunConfig, TrainMode};
use warpaug::recognizer::{ExtractorKind, ModelMeta, ModelParams};
use warpaug::rng::stream;
use warpaug::warp::{warp_image, ImageTensor};

fn criterion(n: usize, name: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("ACCEPTANCE {n} ({name}): PASS — {detail}"),
        Err(msg) => {
            println!("ACCEPTANCE {n} ({name}): FAIL — {msg}");
            panic!("acceptance criterion {n} ({name}) failed: {msg}");
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixture_template() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/template_112.txt")
}

fn random_image(rng: &mut impl Rng, channels: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(channels, GridShape::new(h, w), |_, _, _| rng.gen_range(-1.0..1.0))
}

fn random_theta(rng: &mut impl Rng) -> AffineParams {
    AffineParams::new(
        rng.gen_range(-0.7..0.7),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-3.0..3.0),
        rng.gen_range(0.6..1.6),
    )
}

/// Linear pixel probe with a nowhere-zero input gradient.
struct LinearProbe {
    weights: ImageTensor,
}

impl AttackModel for LinearProbe {
    fn loss(&self, x: &ImageTensor, _y: usize) -> warpaug::Result<f64> {
        Ok(self.weights.data.iter().zip(&x.data).map(|(w, p)| w * p).sum())
    }

    fn loss_and_input_grad(&self, x: &ImageTensor, y: usize) -> warpaug::Result<(f64, ImageTensor)> {
        Ok((self.loss(x, y)?, self.weights.clone()))
    }
}

#[test]
fn criterion_01_warp_oracle_equivalence() {
    criterion(1, "warp oracle equivalence", || {
        let start = Instant::now();
        let mut rng = stream(101, "acceptance", 1);
        let mut worst = 0.0f64;
        for img_idx in 0..100 {
            let channels = 1 + img_idx % 3;
            let h = rng.gen_range(4..=16);
            let w = rng.gen_range(4..=16);
            let img = random_image(&mut rng, channels, h, w);
            for _ in 0..10 {
                let theta = random_theta(&mut rng);
                let fast = warp_image(&img, theta);
                let slow = oracle_warp(&img, theta);
                worst = worst.max(max_abs_diff(&fast.data, &slow.data));
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        ensure(worst <= 1e-12, format!("max-abs error {worst:e} > 1e-12"))?;
        ensure(elapsed <= 5.0, format!("runtime {elapsed:.2}s > 5s"))?;
        Ok(format!("1000 warps, max-abs error {worst:.2e}, {elapsed:.2}s"))
    });
}

#[test]
fn criterion_02_identity_warp() {
    criterion(2, "identity warp", || {
        let mut rng = stream(102, "acceptance", 2);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let channels = 1 + rng.gen_range(0..3);
            let h = rng.gen_range(2..32);
            let w = rng.gen_range(2..32);
            let img = random_image(&mut rng, channels, h, w);
            let out = warp_image(&img, AffineParams::identity());
            worst = worst.max(max_abs_diff(&out.data, &img.data));
        }
        ensure(worst <= 1e-9, format!("max-abs error {worst:e} > 1e-9"))?;
        Ok(format!("100 images, max-abs error {worst:.2e}"))
    });
}

#[test]
fn criterion_03_gradient_suite() {
    criterion(3, "gradient suite", || {
        let start = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.template = Some(fixture_template());
        let report = harness::gradcheck(&cfg, 1000, 103).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        for e in &report.entries {
            ensure(
                e.pass,
                format!(
                    "suite {} failed: {}/{} within tolerance, worst rel err {:.3e}",
                    e.suite, e.within_tolerance, e.trials, e.worst_rel_err
                ),
            )?;
        }
        let e2e_trials: usize = report
            .entries
            .iter()
            .filter(|e| e.suite.starts_with("end_to_end"))
            .map(|e| e.trials)
            .sum();
        ensure(e2e_trials >= 100, format!("end-to-end trials {e2e_trials} < 100"))?;
        ensure(elapsed <= 60.0, format!("runtime {elapsed:.1}s > 60s"))?;
        Ok(format!("{} suites green, {elapsed:.1}s", report.entries.len()))
    });
}

#[test]
fn criterion_04_projection_suite() {
    criterion(4, "projection suite", || {
        let tpl = square_template(33);
        let bound = BudgetSpec {
            max_rotation: 0.05,
            max_translation_u: 0.5,
            max_translation_v: 0.5,
            max_scale_deviation: 0.05,
        };
        let budget = compute_budget(&bound, &tpl);
        let mut rng = stream(104, "acceptance", 4);
        let mut projected = 0usize;
        for i in 0..1000 {
            let theta = AffineParams::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(0.6..1.5),
            );
            let was_feasible = is_feasible(theta, &budget, &tpl);
            let proj = project(theta, &budget, &tpl);
            let flow: f64 = landmark_flow(proj, &tpl).iter().map(|f| f.norm()).sum();
            ensure(
                flow <= budget.total + 1e-9,
                format!("trial {i}: projected flow {flow} exceeds budget {}", budget.total),
            )?;
            if was_feasible {
                ensure(proj == theta, format!("trial {i}: feasible input changed"))?;
            } else {
                projected += 1;
                ensure(
                    (flow - budget.total).abs() <= 1e-6,
                    format!("trial {i}: boundary slack {:.3e}", (flow - budget.total).abs()),
                )?;
            }
            let twice = project(proj, &budget, &tpl);
            for (a, b) in twice.to_array().iter().zip(proj.to_array()) {
                ensure((a - b).abs() <= 1e-9, format!("trial {i}: projection not idempotent"))?;
            }
        }
        // pure-translation closed form
        for i in 0..100 {
            let delta: (f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let norm = (delta.0 * delta.0 + delta.1 * delta.1).sqrt();
            if 5.0 * norm <= budget.total {
                continue;
            }
            let theta = AffineParams::new(0.0, delta.0, delta.1, 1.0);
            let proj = project(theta, &budget, &tpl);
            let shrink = budget.total / (5.0 * norm);
            ensure(
                (proj.du - delta.0 * shrink).abs() <= 1e-9 && (proj.dv - delta.1 * shrink).abs() <= 1e-9,
                format!("trial {i}: translation shrink mismatch"),
            )?;
        }
        Ok(format!("1000 projections sound ({projected} shrunk), closed form matched"))
    });
}

#[test]
fn criterion_05_flow_closed_forms() {
    criterion(5, "flow closed forms", || {
        let mut rng = stream(105, "acceptance", 5);
        for t in 0..100 {
            let extent = rng.gen_range(16..128);
            let half = (extent as f64 - 1.0) / 2.0;
            let mut points = [CenteredPoint::new(0.0, 0.0); 5];
            for p in points.iter_mut() {
                *p = CenteredPoint::new(rng.gen_range(-half..half), rng.gen_range(-half..half));
            }
            let tpl = warpaug::constraint::LandmarkTemplate::new(points, GridShape::new(extent, extent))
                .map_err(|e| e.to_string())?;
            let delta: (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let dn = (delta.0 * delta.0 + delta.1 * delta.1).sqrt();
            for (k, f) in landmark_flow(AffineParams::new(0.0, delta.0, delta.1, 1.0), &tpl).iter().enumerate() {
                ensure(
                    (f.norm() - dn).abs() <= 1e-9,
                    format!("template {t} landmark {k}: translation norm"),
                )?;
            }
            let phi: f64 = rng.gen_range(0.01..2.0);
            for (k, (f, p)) in landmark_flow(AffineParams::new(phi, 0.0, 0.0, 1.0), &tpl)
                .iter()
                .zip(&points)
                .enumerate()
            {
                let expect = 2.0 * p.norm() * (phi / 2.0).sin();
                ensure(
                    (f.norm() - expect).abs() <= 1e-9,
                    format!("template {t} landmark {k}: rotation chord"),
                )?;
            }
            let s: f64 = rng.gen_range(0.5..2.0);
            for (k, (f, p)) in landmark_flow(AffineParams::new(0.0, 0.0, 0.0, s), &tpl)
                .iter()
                .zip(&points)
                .enumerate()
            {
                let expect = p.norm() * (1.0 / s - 1.0).abs();
                ensure(
                    (f.norm() - expect).abs() <= 1e-9,
                    format!("template {t} landmark {k}: scale shrink"),
                )?;
            }
        }
        Ok("100 templates, three single-component formulas matched to 1e-9".into())
    });
}

#[test]
fn criterion_06_pgd_contract() {
    criterion(6, "pgd contract", || {
        let tpl = square_template(17);
        let mut rng = stream(106, "acceptance", 6);
        let weights = random_image(&mut rng, 1, 17, 17);
        let image = random_image(&mut rng, 1, 17, 17);
        let probe = LinearProbe { weights };

        // exact step magnitude with projection disabled and dyadic alpha
        let cfg = PgdConfig {
            k: 1,
            alpha_mean: 0.0625,
            alpha_fixed: true,
            init_scale_std: 0.0,
            init_other_std: 0.0,
            project: false,
            ..PgdConfig::default()
        };
        let mut arng = stream(106, "acceptance-step", 0);
        let res = pgd_attack(&probe, &image, 0, &cfg, &tpl, &mut arng).map_err(|e| e.to_string())?;
        ensure(res.grads_all_nonzero, "probe gradient vanished on some component")?;
        for c in 0..4 {
            ensure(
                res.pre_projection_deviation[c].abs() == 0.0625,
                format!("component {c} deviation {} != alpha", res.pre_projection_deviation[c]),
            )?;
        }

        // 100% feasibility over 1000 crafted transforms
        let cfg = PgdConfig::default();
        let budget = compute_budget(&cfg.budget, &tpl);
        for i in 0..1000u64 {
            let mut arng = stream(106, "acceptance-feasible", i);
            let res = pgd_attack(&probe, &image, 0, &cfg, &tpl, &mut arng).map_err(|e| e.to_string())?;
            ensure(
                is_feasible(res.theta_star, &budget, &tpl),
                format!("crafted transform {i} infeasible"),
            )?;
        }

        // ascent tendency on seeded toy batches
        let meta = ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(16, 16),
            extractor: ExtractorKind::Conv {
                stage_channels: vec![4, 6],
            },
            embed_dim: 8,
            classes: 3,
        };
        let mut mrng = stream(106, "acceptance-model", 0);
        let params = ModelParams::init(meta, &mut mrng).map_err(|e| e.to_string())?;
        let margin = warpaug::recognizer::MarginConfig {
            variant: warpaug::recognizer::MarginVariant::Softmax,
            logit_scale: 16.0,
            margin: 0.0,
        };
        let handle = RecognizerAttack {
            params: &params,
            margin: &margin,
        };
        let tpl16 = square_template(16);
        let ds = generate_synthetic(3, 40, 1, GridShape::new(16, 16), &tpl16, 0.05, 106, 0)
            .map_err(|e| e.to_string())?;
        let attack_cfg = PgdConfig {
            alpha_mean: 0.02,
            alpha_fixed: true,
            ..PgdConfig::default()
        };
        let mut ascents = 0usize;
        let mut total = 0usize;
        for b in 0..100 {
            let items: Vec<BatchItem> = ds.samples[b % 20..b % 20 + 5]
                .iter()
                .map(|s| BatchItem {
                    id: s.id,
                    image: &s.image,
                    label: s.label,
                })
                .collect();
            let (_, results) = augment_batch(&handle, &items, &attack_cfg, &tpl16, 1000 + b as u64)
                .map_err(|e| e.to_string())?;
            for r in results {
                total += 1;
                if r.loss_after >= r.loss_before {
                    ascents += 1;
                }
            }
        }
        let frac = ascents as f64 / total as f64;
        ensure(frac >= 0.90, format!("ascent fraction {frac:.3} < 0.90"))?;
        Ok(format!(
            "step law exact, 1000/1000 feasible, ascent on {:.1}% of {total} samples",
            frac * 100.0
        ))
    });
}

#[test]
fn criterion_07_degeneracy_equalities() {
    criterion(7, "degeneracy equalities", || {
        // zero-budget attack leaves batches bitwise benign
        let tpl = square_template(16);
        let ds = generate_synthetic(2, 6, 1, GridShape::new(16, 16), &tpl, 0.05, 107, 0)
            .map_err(|e| e.to_string())?;
        let meta = ModelMeta {
            input_channels: 1,
            input_shape: GridShape::new(16, 16),
            extractor: ExtractorKind::Conv {
                stage_channels: vec![4, 6],
            },
            embed_dim: 8,
            classes: 2,
        };
        let mut mrng = stream(107, "acceptance-model", 0);
        let params = ModelParams::init(meta, &mut mrng).map_err(|e| e.to_string())?;
        let margin = warpaug::recognizer::MarginConfig {
            variant: warpaug::recognizer::MarginVariant::AdditiveAngular,
            logit_scale: 16.0,
            margin: 0.2,
        };
        let handle = RecognizerAttack {
            params: &params,
            margin: &margin,
        };
        let cfg = PgdConfig {
            budget: BudgetSpec {
                max_rotation: 0.0,
                max_translation_u: 0.0,
                max_translation_v: 0.0,
                max_scale_deviation: 0.0,
            },
            ..PgdConfig::default()
        };
        let items: Vec<BatchItem> = ds
            .samples
            .iter()
            .map(|s| BatchItem {
                id: s.id,
                image: &s.image,
                label: s.label,
            })
            .collect();
        let (warped, results) = augment_batch(&handle, &items, &cfg, &tpl, 42).map_err(|e| e.to_string())?;
        for (k, (w, s)) in warped.iter().zip(&ds.samples).enumerate() {
            ensure(results[k].theta_star == AffineParams::identity(), format!("theta {k} not identity"))?;
            ensure(bitwise_equal(&w.data, &s.image.data), format!("warped batch differs at sample {k}"))?;
        }

        // zero-std evaluation equals aligned evaluation bitwise
        for s in &ds.samples {
            let mut rng = stream(107, "eval-perturb", s.id);
            let p = perturb_alignment(s, &PerturbSpec::zero(), &mut rng);
            ensure(bitwise_equal(&p.image.data, &s.image.data), "zero-std perturbation changed pixels")?;
        }
        let report = harness::evaluate(&params, &margin, &ds, &PerturbSpec::zero(), &[0.1], 107)
            .map_err(|e| e.to_string())?;
        ensure(report.aligned == report.perturbed, "aligned and perturbed metrics differ")?;
        Ok("zero-budget batches bitwise benign; zero-std evaluation bitwise aligned".into())
    });
}

#[test]
fn criterion_08_desk_scale_direction() {
    criterion(8, "desk-scale robustness direction", || {
        let start = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.template = Some(fixture_template());
        cfg.seed = 2;
        cfg.threads = 1;
        // pin the reference benchmark explicitly
        assert_eq!(cfg.data.classes, 10);
        assert_eq!((cfg.data.height, cfg.data.width), (64, 64));
        assert_eq!(cfg.data.per_class_train, 200);
        assert_eq!(cfg.data.per_class_test, 50);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.pgd.budget.max_rotation, 0.01);
        assert_eq!(cfg.pgd.budget.max_translation_u, 0.01);
        assert_eq!(cfg.pgd.budget.max_translation_v, 0.01);
        assert_eq!(cfg.pgd.budget.max_scale_deviation, 0.01);

        let base = harness::train(&cfg, TrainMode::Baseline).map_err(|e| e.to_string())?;
        let adv = harness::train(&cfg, TrainMode::Adversarial).map_err(|e| e.to_string())?;
        let base_eval = harness::run_eval(&cfg, &base.params)
            .map_err(|e| e.to_string())?
            .evaluation
            .unwrap();
        let adv_eval = harness::run_eval(&cfg, &adv.params)
            .map_err(|e| e.to_string())?
            .evaluation
            .unwrap();
        let elapsed = start.elapsed().as_secs_f64();

        let gain = adv_eval.perturbed.accuracy - base_eval.perturbed.accuracy;
        let aligned_drift = (adv_eval.aligned.accuracy - base_eval.aligned.accuracy).abs();
        ensure(
            gain >= 0.05,
            format!(
                "perturbed-set gain {:.3} < 0.05 (adversarial {:.3} vs baseline {:.3})",
                gain, adv_eval.perturbed.accuracy, base_eval.perturbed.accuracy
            ),
        )?;
        ensure(
            aligned_drift <= 0.02,
            format!("aligned-set drift {aligned_drift:.3} > 0.02"),
        )?;
        ensure(elapsed <= 600.0, format!("wall time {elapsed:.0}s > 600s"))?;
        Ok(format!(
            "perturbed {:.3} vs {:.3} (gain {:+.3}), aligned {:.3} vs {:.3}, {elapsed:.0}s single-thread",
            adv_eval.perturbed.accuracy,
            base_eval.perturbed.accuracy,
            gain,
            adv_eval.aligned.accuracy,
            base_eval.aligned.accuracy
        ))
    });
}

#[test]
fn criterion_09_alpha_mechanism() {
    criterion(9, "alpha study mechanism", || {
        let tpl = square_template(17);
        let mut rng = stream(109, "acceptance", 9);
        let probe = LinearProbe {
            weights: random_image(&mut rng, 1, 17, 17),
        };
        let images: Vec<ImageTensor> = (0..40).map(|_| random_image(&mut rng, 1, 17, 17)).collect();
        let items: Vec<BatchItem> = images
            .iter()
            .enumerate()
            .map(|(k, img)| BatchItem {
                id: k as u64,
                image: img,
                label: 0,
            })
            .collect();

        // identity init plus a dyadic alpha keeps the float arithmetic
        // exact, so the fixed arm's deviations are literally identical
        let fixed_cfg = PgdConfig {
            alpha_mean: 0.0625,
            alpha_fixed: true,
            init_scale_std: 0.0,
            init_other_std: 0.0,
            project: false,
            ..PgdConfig::default()
        };
        let random_cfg = PgdConfig {
            alpha_fixed: false,
            alpha_std: 0.1,
            ..fixed_cfg
        };
        let std_of = |results: &[warpaug::adversary::AdversarialResult]| {
            let norms: Vec<f64> = results
                .iter()
                .filter(|r| r.grads_all_nonzero)
                .map(|r| r.pre_projection_deviation_norm())
                .collect();
            let n = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / n;
            ((norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt(), norms.len())
        };
        let (_, fixed_res) = augment_batch(&probe, &items, &fixed_cfg, &tpl, 7).map_err(|e| e.to_string())?;
        let (fixed_std, n_fixed) = std_of(&fixed_res);
        ensure(n_fixed > 10, format!("only {n_fixed} all-nonzero-gradient samples"))?;
        ensure(fixed_std == 0.0, format!("fixed-arm deviation std {fixed_std:e} != 0"))?;

        let (_, random_res) = augment_batch(&probe, &items, &random_cfg, &tpl, 7).map_err(|e| e.to_string())?;
        let (random_std, _) = std_of(&random_res);
        ensure(random_std > 0.0, "random-arm deviation std is not positive")?;

        // sigma = 0 collapses the arms bitwise, end to end
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let tpl_path = dir.path().join("tpl.txt");
        std::fs::write(&tpl_path, square_template(12).to_file_string()).map_err(|e| e.to_string())?;
        let mut cfg = RunConfig::default();
        cfg.data.classes = 2;
        cfg.data.per_class_train = 6;
        cfg.data.per_class_test = 3;
        cfg.data.height = 12;
        cfg.data.width = 12;
        cfg.model.conv_channels = vec![3, 4];
        cfg.model.embed_dim = 6;
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.template = Some(tpl_path);
        cfg.pgd.alpha_mean = 0.05;
        cfg.pgd.alpha_std = 0.0;
        let study = harness::alpha_study(&cfg).map_err(|e| e.to_string())?;
        let fixed_json = serde_json::to_string(&study.fixed).map_err(|e| e.to_string())?;
        let mut random_arm = study.random.clone();
        random_arm.mode = study.fixed.mode.clone();
        let random_json = serde_json::to_string(&random_arm).map_err(|e| e.to_string())?;
        ensure(fixed_json == random_json, "sigma=0 arms differ")?;
        Ok(format!(
            "fixed std 0 over {n_fixed} samples, random std {random_std:.2e} > 0, sigma=0 collapse bitwise"
        ))
    });
}

#[test]
fn criterion_10_reproducibility_across_workers() {
    criterion(10, "bitwise reproducibility across 1/2/4 workers", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let tpl_path = dir.path().join("tpl.txt");
        std::fs::write(&tpl_path, square_template(16).to_file_string()).map_err(|e| e.to_string())?;
        let mut cfg = RunConfig::default();
        cfg.data.classes = 3;
        cfg.data.per_class_train = 10;
        cfg.data.per_class_test = 4;
        cfg.data.height = 16;
        cfg.data.width = 16;
        cfg.model.conv_channels = vec![4, 6];
        cfg.model.embed_dim = 8;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 77;
        cfg.template = Some(tpl_path);

        let mut outputs = Vec::new();
        for threads in [1usize, 2, 4] {
            let mut c = cfg.clone();
            c.threads = threads;
            let out = harness::train(&c, TrainMode::Adversarial).map_err(|e| e.to_string())?;
            let eval = harness::run_eval(&c, &out.params).map_err(|e| e.to_string())?;
            let train_json = serde_json::to_string(&out.report).map_err(|e| e.to_string())?;
            let eval_json = serde_json::to_string(&eval).map_err(|e| e.to_string())?;
            outputs.push((out.params.flat.clone(), train_json, eval_json));
        }
        for (k, other) in outputs.iter().enumerate().skip(1) {
            ensure(
                bitwise_equal(&outputs[0].0, &other.0),
                format!("checkpoint differs between 1 and {} workers", [1, 2, 4][k]),
            )?;
            ensure(outputs[0].1 == other.1, "training report differs across workers")?;
            ensure(outputs[0].2 == other.2, "evaluation report differs across workers")?;
        }
        Ok("checkpoints and reports identical at 1, 2, and 4 workers".into())
    });
}
