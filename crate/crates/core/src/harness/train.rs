//! End-to-end experiment drivers: training (baseline and adversarial),
//! evaluation, the transformation-component ablation, and the fixed-vs-
//! random step-size study.
//!
//! Determinism contract: batch order comes from per-epoch shuffle streams,
//! per-sample attacks from per-iteration seeds and sample ids, and every
//! gradient reduction folds per-sample contributions in batch order, so a
//! run is bitwise reproducible for a given seed at any worker count.

use crate::adversary::{augment_batch, BatchItem, ComponentMask, RecognizerAttack};
use crate::constraint::{compute_budget, is_feasible, LandmarkTemplate};
use crate::data::{generate_synthetic, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{
    evaluate, AttackStats, DeviationWelford, EvalReport, MetricsReport, TrainingCurves,
};
use crate::parallel;
use crate::recognizer::{backward, GradMode, ModelParams, SgdState};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Minimize the loss on benign batches only.
    Baseline,
    /// Each iteration attacks the batch, then descends on the summed
    /// adversarial and benign losses with equal weights.
    Adversarial,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "adversarial" => Ok(TrainMode::Adversarial),
            _ => Err(Error::Validation(format!(
                "mode must be baseline or adversarial, got `{s}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Adversarial => "adversarial",
        }
    }
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub report: MetricsReport,
}

fn load_template_for(cfg: &RunConfig) -> Result<LandmarkTemplate> {
    let path = cfg
        .template
        .as_ref()
        .ok_or_else(|| Error::Validation("template is required for this command".into()))?;
    let tpl = LandmarkTemplate::load(path)?;
    Ok(if tpl.shape == cfg.shape() {
        tpl
    } else {
        tpl.rescaled(cfg.shape())
    })
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset, origin: &str) -> Result<()> {
    if ds.n_classes != cfg.data.classes {
        return Err(Error::Validation(format!(
            "{origin}: dataset has {} classes but config says {}",
            ds.n_classes, cfg.data.classes
        )));
    }
    for s in &ds.samples {
        if s.image.channels != cfg.data.channels || s.image.shape != cfg.shape() {
            return Err(Error::Validation(format!(
                "{origin}: sample {} is {}x{}x{} but config says {}x{}x{}",
                s.id,
                s.image.channels,
                s.image.shape.height,
                s.image.shape.width,
                cfg.data.channels,
                cfg.data.height,
                cfg.data.width
            )));
        }
        if s.label >= cfg.data.classes {
            return Err(Error::Validation(format!(
                "{origin}: sample {} has label {} >= classes {}",
                s.id, s.label, cfg.data.classes
            )));
        }
    }
    Ok(())
}

/// Training split: loaded from `<data.dir>/train` or synthesized with
/// instance offset 0.
pub fn prepare_train_data(cfg: &RunConfig) -> Result<(Dataset, LandmarkTemplate)> {
    let tpl = load_template_for(cfg)?;
    let ds = match &cfg.data.dir {
        Some(dir) => {
            let ds = load_dataset(&dir.join("train"))?;
            check_dataset(cfg, &ds, "train data")?;
            ds
        }
        None => generate_synthetic(
            cfg.data.classes,
            cfg.data.per_class_train,
            cfg.data.channels,
            cfg.shape(),
            &tpl,
            cfg.data.noise_std,
            cfg.seed,
            0,
        )?,
    };
    Ok((ds, tpl))
}

/// Test split: loaded from `<data.dir>/test` or synthesized with the
/// instance offset placed after the training split (same class patterns,
/// disjoint noise).
pub fn prepare_test_data(cfg: &RunConfig) -> Result<(Dataset, LandmarkTemplate)> {
    let tpl = load_template_for(cfg)?;
    let ds = match &cfg.data.dir {
        Some(dir) => {
            let ds = load_dataset(&dir.join("test"))?;
            check_dataset(cfg, &ds, "test data")?;
            ds
        }
        None => generate_synthetic(
            cfg.data.classes,
            cfg.data.per_class_test,
            cfg.data.channels,
            cfg.shape(),
            &tpl,
            cfg.data.noise_std,
            cfg.seed,
            cfg.data.per_class_train as u64,
        )?,
    };
    Ok((ds, tpl))
}

fn cosine_lr(lr0: f64, iteration: usize, total: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * iteration as f64 / total as f64).cos())
}

fn numeric_context(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {it}: {m}")),
        other => other,
    }
}

/// Train on an already prepared dataset. Pure with respect to the
/// filesystem; artifact writing lives in [`train`].
pub fn train_with_data(
    cfg: &RunConfig,
    mode: TrainMode,
    ds: &Dataset,
    tpl: &LandmarkTemplate,
) -> Result<(ModelParams, MetricsReport)> {
    let meta = cfg.model_meta()?;
    let mut rng = stream(cfg.seed, "model-init", 0);
    let mut params = ModelParams::init(meta, &mut rng)?;
    let mut sgd = SgdState::new(&params);
    let n = ds.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_iters = cfg.epochs * batches_per_epoch;
    let budget = compute_budget(&cfg.pgd.budget, tpl);

    let mut curves = TrainingCurves {
        l1: Vec::new(),
        l2: Vec::new(),
        lr: Vec::new(),
    };
    let mut attack_samples = 0u64;
    let mut attack_feasible = 0u64;
    let mut attack_ascent = 0u64;
    let mut deviation = DeviationWelford::default();

    let mut it = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.optim.lr0, it, total_iters);
            let inv_b = 1.0 / chunk.len() as f64;
            match mode {
                TrainMode::Baseline => {
                    let per_sample = parallel::map_slice(chunk, |&idx| {
                        let s = &ds.samples[idx];
                        backward(&params, &s.image, s.label, &cfg.margin, GradMode::Params)
                            .map(|bw| (bw.loss, bw.grad_params.expect("params gradient")))
                    });
                    let mut grads = vec![0.0; params.param_len()];
                    let mut loss_sum = 0.0;
                    for r in per_sample {
                        let (l, g) = r.map_err(|e| numeric_context(e, it))?;
                        loss_sum += l;
                        for (acc, v) in grads.iter_mut().zip(&g) {
                            *acc += v;
                        }
                    }
                    for g in grads.iter_mut() {
                        *g *= inv_b;
                    }
                    let l2 = loss_sum * inv_b;
                    if !l2.is_finite() {
                        return Err(Error::Numeric(format!("iteration {it}: benign loss is {l2}")));
                    }
                    curves.l2.push(l2);
                    curves.lr.push(lr);
                    crate::recognizer::sgd_update(
                        &mut params,
                        &mut sgd,
                        &grads,
                        lr,
                        cfg.optim.momentum,
                        cfg.optim.weight_decay,
                    );
                }
                TrainMode::Adversarial => {
                    let iter_seed: u64 = stream(cfg.seed, "iter-seed", it as u64).gen();
                    let items: Vec<BatchItem> = chunk
                        .iter()
                        .map(|&idx| {
                            let s = &ds.samples[idx];
                            BatchItem {
                                id: s.id,
                                image: &s.image,
                                label: s.label,
                            }
                        })
                        .collect();
                    let handle = RecognizerAttack {
                        params: &params,
                        margin: &cfg.margin,
                    };
                    let (warped, results) = augment_batch(&handle, &items, &cfg.pgd, tpl, iter_seed)
                        .map_err(|e| numeric_context(e, it))?;
                    for r in &results {
                        attack_samples += 1;
                        if is_feasible(r.theta_star, &budget, tpl) {
                            attack_feasible += 1;
                        }
                        if r.loss_after >= r.loss_before {
                            attack_ascent += 1;
                        }
                        if r.grads_all_nonzero {
                            deviation.push(r.pre_projection_deviation_norm());
                        }
                    }
                    let per_sample = parallel::map_range(chunk.len(), |pos| {
                        let s = &ds.samples[chunk[pos]];
                        let adv = backward(&params, &warped[pos], s.label, &cfg.margin, GradMode::Params)?;
                        let ben = backward(&params, &s.image, s.label, &cfg.margin, GradMode::Params)?;
                        let mut g = adv.grad_params.expect("params gradient");
                        for (acc, v) in g.iter_mut().zip(ben.grad_params.expect("params gradient")) {
                            *acc += v;
                        }
                        Ok::<_, Error>((adv.loss, ben.loss, g))
                    });
                    let mut grads = vec![0.0; params.param_len()];
                    let mut l1_sum = 0.0;
                    let mut l2_sum = 0.0;
                    for r in per_sample {
                        let (l1, l2, g) = r.map_err(|e| numeric_context(e, it))?;
                        l1_sum += l1;
                        l2_sum += l2;
                        for (acc, v) in grads.iter_mut().zip(&g) {
                            *acc += v;
                        }
                    }
                    for g in grads.iter_mut() {
                        *g *= inv_b;
                    }
                    let (l1, l2) = (l1_sum * inv_b, l2_sum * inv_b);
                    if !l1.is_finite() || !l2.is_finite() {
                        return Err(Error::Numeric(format!(
                            "iteration {it}: losses l1={l1} l2={l2}"
                        )));
                    }
                    curves.l1.push(l1);
                    curves.l2.push(l2);
                    curves.lr.push(lr);
                    crate::recognizer::sgd_update(
                        &mut params,
                        &mut sgd,
                        &grads,
                        lr,
                        cfg.optim.momentum,
                        cfg.optim.weight_decay,
                    );
                }
            }
            it += 1;
        }
    }

    let attack = (mode == TrainMode::Adversarial).then(|| AttackStats {
        samples: attack_samples,
        feasible: attack_feasible,
        all_nonzero_grad_samples: deviation.count(),
        mean_pre_projection_deviation: deviation.mean(),
        std_pre_projection_deviation: deviation.std(),
        ascent_fraction: if attack_samples == 0 {
            0.0
        } else {
            attack_ascent as f64 / attack_samples as f64
        },
    });
    let report = MetricsReport {
        mode: mode.name().to_string(),
        training: Some(curves),
        attack,
        evaluation: None,
    };
    Ok((params, report))
}

fn write_train_artifacts(cfg: &RunConfig, out: &Path, output: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.write_resolved(out)?;
    super::checkpoint::save_checkpoint(&output.params, &out.join("model.ckpt"))?;
    super::report::write_metrics(out, "report", &output.report)?;
    let curves = output.report.training.as_ref().expect("training curves");
    let mut csv = String::from("iter,lr,l1,l2\n");
    for i in 0..curves.l2.len() {
        let l1 = curves.l1.get(i).map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{},{l1},{}\n", curves.lr[i], curves.l2[i]));
    }
    let path = out.join("train_log.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Full training run: prepares data, trains, and (when an output directory
/// is configured) writes the resolved config, checkpoint, loss log, and
/// report.
pub fn train(cfg: &RunConfig, mode: TrainMode) -> Result<TrainOutput> {
    cfg.validate()?;
    parallel::with_pool(cfg.threads, || {
        let (ds, tpl) = prepare_train_data(cfg)?;
        let (params, report) = train_with_data(cfg, mode, &ds, &tpl)?;
        let output = TrainOutput { params, report };
        if let Some(out) = &cfg.out_dir {
            write_train_artifacts(cfg, out, &output)?;
        }
        Ok(output)
    })
}

/// Evaluate a trained model on the configured test split.
pub fn run_eval(cfg: &RunConfig, params: &ModelParams) -> Result<MetricsReport> {
    cfg.validate()?;
    parallel::with_pool(cfg.threads, || {
        let (ds, _tpl) = prepare_test_data(cfg)?;
        let eval = evaluate(params, &cfg.margin, &ds, &cfg.eval.perturb, &cfg.eval.fars, cfg.seed)?;
        Ok(MetricsReport {
            mode: "eval".into(),
            training: None,
            attack: None,
            evaluation: Some(eval),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scale: bool,
    pub rotation: bool,
    pub translation: bool,
    pub mode: String,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The default ablation ladder: no augmentation, each single component,
/// scale+rotation, and the full set.
pub fn default_ablation_masks() -> Vec<ComponentMask> {
    vec![
        ComponentMask::none(),
        ComponentMask {
            scale: true,
            rotation: false,
            translation: false,
        },
        ComponentMask {
            scale: false,
            rotation: true,
            translation: false,
        },
        ComponentMask {
            scale: false,
            rotation: false,
            translation: true,
        },
        ComponentMask {
            scale: true,
            rotation: true,
            translation: false,
        },
        ComponentMask::all(),
    ]
}

/// One train+evaluate run per requested component subset; the all-false
/// mask is the baseline row.
pub fn ablate(cfg: &RunConfig, masks: &[ComponentMask]) -> Result<AblationReport> {
    cfg.validate()?;
    let masks = if masks.is_empty() {
        default_ablation_masks()
    } else {
        masks.to_vec()
    };
    parallel::with_pool(cfg.threads, || {
        let (train_ds, tpl) = prepare_train_data(cfg)?;
        let (test_ds, _) = prepare_test_data(cfg)?;
        let mut rows = Vec::new();
        for mask in masks {
            let none = !(mask.scale || mask.rotation || mask.translation);
            let (mode, row_cfg) = if none {
                (TrainMode::Baseline, cfg.clone())
            } else {
                (TrainMode::Adversarial, cfg.with_mask(mask))
            };
            let (params, _) = train_with_data(&row_cfg, mode, &train_ds, &tpl)?;
            let eval = evaluate(
                &params,
                &cfg.margin,
                &test_ds,
                &cfg.eval.perturb,
                &cfg.eval.fars,
                cfg.seed,
            )?;
            rows.push(AblationRow {
                scale: mask.scale,
                rotation: mask.rotation,
                translation: mask.translation,
                mode: mode.name().into(),
                eval,
            });
        }
        Ok(AblationReport { rows })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStudyReport {
    pub fixed: MetricsReport,
    pub random: MetricsReport,
}

/// Two runs differing only in the step-size rule: alpha fixed at its mean
/// versus alpha sampled per instance; same master seed everywhere else.
pub fn alpha_study(cfg: &RunConfig) -> Result<AlphaStudyReport> {
    cfg.validate()?;
    parallel::with_pool(cfg.threads, || {
        let (train_ds, tpl) = prepare_train_data(cfg)?;
        let (test_ds, _) = prepare_test_data(cfg)?;
        let arm = |fixed: bool| -> Result<MetricsReport> {
            let mut arm_cfg = cfg.clone();
            arm_cfg.pgd.alpha_fixed = fixed;
            let (params, mut report) = train_with_data(&arm_cfg, TrainMode::Adversarial, &train_ds, &tpl)?;
            report.evaluation = Some(evaluate(
                &params,
                &cfg.margin,
                &test_ds,
                &cfg.eval.perturb,
                &cfg.eval.fars,
                cfg.seed,
            )?);
            report.mode = if fixed { "adversarial(alpha=fixed)" } else { "adversarial(alpha=random)" }.into();
            Ok(report)
        };
        Ok(AlphaStudyReport {
            fixed: arm(true)?,
            random: arm(false)?,
        })
    })
}

/// Generate and write the synthetic train/test splits configured in `cfg`.
pub fn gen_data(cfg: &RunConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let out = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Validation("gen-data needs an output directory (out = ...)".into()))?
        .clone();
    let (train_ds, _) = prepare_train_data(cfg)?;
    let (test_ds, _) = prepare_test_data(cfg)?;
    crate::data::save_dataset(&train_ds, &out.join("train"))?;
    crate::data::save_dataset(&test_ds, &out.join("test"))?;
    cfg.write_resolved(&out)?;
    Ok((train_ds.len(), test_ds.len()))
}
