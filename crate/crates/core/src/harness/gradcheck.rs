//! Finite-difference validation of the whole gradient chain.
//!
//! Suites: the bilinear sample gradient, the warp Jacobian per transform
//! component, recognizer parameter and input gradients, and the end-to-end
//! transform gradient (loss through warp through model). Trials are
//! sampled away from interpolation kinks and ReLU boundaries; failures are
//! report entries, never errors.
//!
//! The probe model follows the configured extractor kind, margin, and
//! class count but runs on a reduced 8x8 grid so that kink-free transform
//! samples exist.

use crate::error::Result;
use crate::geometry::{from_centered, inverse, to_centered, AffineParams, CenteredPoint, GridShape};
use crate::harness::config::RunConfig;
use crate::parallel;
use crate::recognizer::{backward, loss, relu_margin, ExtractorKind, GradMode, ModelMeta, ModelParams};
use crate::rng::{stream, Stream};
use crate::warp::{
    bilinear_sample, loss_grad_wrt_theta, sample_gradient, warp_image, warp_param_jacobian, ImageTensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

const PROBE_EXTENT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaComponent {
    Phi,
    Du,
    Dv,
    Scale,
}

impl ThetaComponent {
    pub const ALL: [ThetaComponent; 4] = [
        ThetaComponent::Phi,
        ThetaComponent::Du,
        ThetaComponent::Dv,
        ThetaComponent::Scale,
    ];

    pub fn index(&self) -> usize {
        match self {
            ThetaComponent::Phi => 0,
            ThetaComponent::Du => 1,
            ThetaComponent::Dv => 2,
            ThetaComponent::Scale => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ThetaComponent::Phi => "phi",
            ThetaComponent::Du => "du",
            ThetaComponent::Dv => "dv",
            ThetaComponent::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub suite: String,
    pub trials: usize,
    pub within_tolerance: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub pass: bool,
}

/// Required agreement fraction per suite.
const PASS_FRACTION: f64 = 0.95;
/// Absolute floor below which derivatives compare absolutely.
const ABS_FLOOR: f64 = 1e-6;

struct SuiteTally {
    trials: usize,
    ok: usize,
    worst: f64,
}

impl SuiteTally {
    fn new() -> Self {
        SuiteTally {
            trials: 0,
            ok: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, fd: f64, tol: f64) {
        self.trials += 1;
        let err = (analytic - fd).abs();
        let within = if fd.abs() < ABS_FLOOR {
            err <= ABS_FLOOR
        } else {
            let rel = err / fd.abs();
            self.worst = self.worst.max(rel);
            rel <= tol
        };
        if within {
            self.ok += 1;
        }
    }

    fn entry(self, suite: String, tol: f64) -> GradcheckEntry {
        let pass = self.trials == 0 || (self.ok as f64) >= PASS_FRACTION * self.trials as f64;
        GradcheckEntry {
            suite,
            trials: self.trials,
            within_tolerance: self.ok,
            worst_rel_err: self.worst,
            tolerance: tol,
            pass,
        }
    }
}

fn random_image(rng: &mut Stream, channels: usize, shape: GridShape) -> ImageTensor {
    ImageTensor::from_fn(channels, shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn near_kink(f: f64, margin: f64) -> bool {
    let frac = f.fract().abs();
    frac < margin || frac > 1.0 - margin
}

fn theta_clear_of_kinks(theta: AffineParams, shape: GridShape, margin: f64) -> bool {
    for i in 0..shape.height {
        for j in 0..shape.width {
            let q = inverse(theta, to_centered(i as i64, j as i64, shape));
            let (fi, fj) = from_centered(q, shape);
            if near_kink(fi, margin) || near_kink(fj, margin) {
                return false;
            }
        }
    }
    true
}

fn random_theta(rng: &mut Stream) -> AffineParams {
    AffineParams::new(
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(0.8..1.25),
    )
}

fn probe_meta(cfg: &RunConfig) -> Result<ModelMeta> {
    let full = cfg.model_meta()?;
    let extractor = match full.extractor {
        ExtractorKind::Conv { .. } => ExtractorKind::Conv {
            stage_channels: vec![4, 6],
        },
        ExtractorKind::Mlp { .. } => ExtractorKind::Mlp { hidden: 16 },
    };
    let meta = ModelMeta {
        input_channels: cfg.data.channels,
        input_shape: GridShape::new(PROBE_EXTENT, PROBE_EXTENT),
        extractor,
        embed_dim: full.embed_dim.min(8),
        classes: full.classes,
    };
    meta.validate()?;
    Ok(meta)
}

fn sample_gradient_suite(n_trials: usize, seed: u64) -> GradcheckEntry {
    let tol = 1e-5;
    let h = 1e-5;
    let results = parallel::map_range(n_trials, |t| {
        let mut rng = stream(seed, "gradcheck-sample", t as u64);
        let img = random_image(&mut rng, 1, GridShape::new(PROBE_EXTENT, PROBE_EXTENT));
        let grid = img.channel(0);
        let p = loop {
            let cand = CenteredPoint::new(rng.gen_range(-3.2..3.2), rng.gen_range(-3.2..3.2));
            let (fi, fj) = from_centered(cand, img.shape);
            if !near_kink(fi, 1e-3) && !near_kink(fj, 1e-3) {
                break cand;
            }
        };
        let (du, dv) = sample_gradient(grid, p);
        let fd_u = (bilinear_sample(grid, CenteredPoint::new(p.u + h, p.v))
            - bilinear_sample(grid, CenteredPoint::new(p.u - h, p.v)))
            / (2.0 * h);
        let fd_v = (bilinear_sample(grid, CenteredPoint::new(p.u, p.v + h))
            - bilinear_sample(grid, CenteredPoint::new(p.u, p.v - h)))
            / (2.0 * h);
        [(du, fd_u), (dv, fd_v)]
    });
    let mut tally = SuiteTally::new();
    for pair in results {
        for (an, fd) in pair {
            tally.record(an, fd, tol);
        }
    }
    tally.entry("warp.sample_gradient".into(), tol)
}

fn jacobian_suites(n_trials: usize, seed: u64) -> Vec<GradcheckEntry> {
    let tol = 1e-3;
    let h = 1e-4;
    let per_component = n_trials / 4;
    ThetaComponent::ALL
        .iter()
        .map(|comp| {
            let results = parallel::map_range(per_component, |t| {
                let mut rng = stream(seed, "gradcheck-jacobian", (comp.index() * per_component + t) as u64);
                let shape = GridShape::new(PROBE_EXTENT, PROBE_EXTENT);
                let img = random_image(&mut rng, 1, shape);
                // pick a pixel whose sampled coordinate sits away from kinks
                let (theta, i, j) = loop {
                    let theta = random_theta(&mut rng);
                    let i = rng.gen_range(0..shape.height);
                    let j = rng.gen_range(0..shape.width);
                    let q = inverse(theta, to_centered(i as i64, j as i64, shape));
                    let (fi, fj) = from_centered(q, shape);
                    if !near_kink(fi, 1.5e-3) && !near_kink(fj, 1.5e-3) {
                        break (theta, i, j);
                    }
                };
                let jac = warp_param_jacobian(&img, theta);
                let analytic = jac.get(0, i, j)[comp.index()];
                let mut plus = theta.to_array();
                let mut minus = theta.to_array();
                plus[comp.index()] += h;
                minus[comp.index()] -= h;
                let g = to_centered(i as i64, j as i64, shape);
                let vp = bilinear_sample(img.channel(0), inverse(AffineParams::from_array(plus), g));
                let vm = bilinear_sample(img.channel(0), inverse(AffineParams::from_array(minus), g));
                (analytic, (vp - vm) / (2.0 * h))
            });
            let mut tally = SuiteTally::new();
            for (an, fd) in results {
                tally.record(an, fd, tol);
            }
            tally.entry(format!("warp.jacobian.{}", comp.name()), tol)
        })
        .collect()
}

fn recognizer_suites(cfg: &RunConfig, n_trials: usize, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let tol = 1e-3;
    let h = 1e-5;
    let meta = probe_meta(cfg)?;
    let mut rng = stream(seed, "gradcheck-model", 0);
    let params = ModelParams::init(meta, &mut rng)?;
    let x = random_image(&mut rng, params.meta.input_channels, params.meta.input_shape);
    let y = 0usize;

    let mut entries = Vec::new();

    let bw = backward(&params, &x, y, &cfg.margin, GradMode::Both)?;
    let grads = bw.grad_params.expect("params gradient");
    let mut tally = SuiteTally::new();
    for _ in 0..n_trials.min(60) {
        let idx = rng.gen_range(0..params.param_len());
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.flat[idx] += h;
        minus.flat[idx] -= h;
        let fd = (loss(&plus, &x, y, &cfg.margin)? - loss(&minus, &x, y, &cfg.margin)?) / (2.0 * h);
        tally.record(grads[idx], fd, tol);
    }
    entries.push(tally.entry("recognizer.params".into(), tol));

    let gi = bw.grad_input.expect("input gradient");
    let mut tally = SuiteTally::new();
    for _ in 0..n_trials.min(50) {
        let idx = rng.gen_range(0..x.data.len());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data[idx] += h;
        xm.data[idx] -= h;
        let fd = (loss(&params, &xp, y, &cfg.margin)? - loss(&params, &xm, y, &cfg.margin)?) / (2.0 * h);
        tally.record(gi.data[idx], fd, tol);
    }
    entries.push(tally.entry("recognizer.input".into(), tol));
    Ok(entries)
}

fn end_to_end_suites(
    cfg: &RunConfig,
    n_trials: usize,
    seed: u64,
    fault: Option<ThetaComponent>,
) -> Result<Vec<GradcheckEntry>> {
    let tol = 1e-3;
    let h = 1e-4;
    let meta = probe_meta(cfg)?;
    let mut init_rng = stream(seed, "gradcheck-e2e-model", 0);
    let params = ModelParams::init(meta, &mut init_rng)?;
    let trials = n_trials.min(100);
    let per_component = trials.div_ceil(4).max(if trials == 0 { 0 } else { 1 });

    let mut entries = Vec::new();
    for comp in ThetaComponent::ALL {
        let mut tally = SuiteTally::new();
        if trials > 0 {
            for t in 0..per_component {
                let mut rng = stream(seed, "gradcheck-e2e", (comp.index() * per_component + t) as u64);
                let x = random_image(&mut rng, params.meta.input_channels, params.meta.input_shape);
                let y = rng.gen_range(0..params.meta.classes);
                // keep the whole FD window clear of interpolation kinks
                // and ReLU boundaries
                let (theta, warped) = {
                    let mut candidate = random_theta(&mut rng);
                    let mut warped = warp_image(&x, candidate);
                    let mut attempts = 0;
                    while attempts < 500
                        && (!theta_clear_of_kinks(candidate, params.meta.input_shape, 1.5e-3)
                            || relu_margin(&params, &warped) < 1e-2)
                    {
                        candidate = random_theta(&mut rng);
                        warped = warp_image(&x, candidate);
                        attempts += 1;
                    }
                    (candidate, warped)
                };
                let bw = backward(&params, &warped, y, &cfg.margin, GradMode::Input)?;
                let jac = warp_param_jacobian(&x, theta);
                let mut grad_theta = loss_grad_wrt_theta(&bw.grad_input.expect("input gradient"), &jac);
                if let Some(faulty) = fault {
                    grad_theta[faulty.index()] += 0.5;
                }

                let mut plus = theta.to_array();
                let mut minus = theta.to_array();
                plus[comp.index()] += h;
                minus[comp.index()] -= h;
                let lp = loss(&params, &warp_image(&x, AffineParams::from_array(plus)), y, &cfg.margin)?;
                let lm = loss(&params, &warp_image(&x, AffineParams::from_array(minus)), y, &cfg.margin)?;
                let fd = (lp - lm) / (2.0 * h);
                tally.record(grad_theta[comp.index()], fd, tol);
            }
        }
        entries.push(tally.entry(format!("end_to_end.theta.{}", comp.name()), tol));
    }
    Ok(entries)
}

/// Run all finite-difference suites. `n_trials = 0` yields an empty
/// passing report.
pub fn gradcheck(cfg: &RunConfig, n_trials: usize, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with_fault(cfg, n_trials, seed, None)
}

/// Negative-control variant: corrupt one component of the end-to-end
/// transform gradient so the corresponding suite must fail.
pub fn gradcheck_with_fault(
    cfg: &RunConfig,
    n_trials: usize,
    seed: u64,
    fault: Option<ThetaComponent>,
) -> Result<GradcheckReport> {
    if n_trials == 0 {
        return Ok(GradcheckReport {
            entries: Vec::new(),
            pass: true,
        });
    }
    parallel::with_pool(cfg.threads, || {
        let mut entries = Vec::new();
        entries.push(sample_gradient_suite(n_trials, seed));
        entries.extend(jacobian_suites(n_trials, seed));
        entries.extend(recognizer_suites(cfg, n_trials, seed)?);
        entries.extend(end_to_end_suites(cfg, n_trials, seed, fault)?);
        let pass = entries.iter().all(|e| e.pass);
        Ok(GradcheckReport { entries, pass })
    })
}
