//! The inner maximization: projected sign-gradient ascent over the four
//! transform parameters, one independent attack per sample.
//!
//! Each attack draws an initial transform and a step size alpha from its own
//! counter-derived stream (alpha once per sample, before the step loop,
//! shared by all steps and components). A step warps the image, pulls the
//! loss gradient back through the warp Jacobian, moves every unfrozen
//! component by `alpha * sign(gradient)`, and projects back onto the
//! feasible set. The returned parameters are always feasible.

use crate::constraint::{compute_budget, project, BudgetSpec, LandmarkTemplate};
use crate::error::{Error, Result};
use crate::geometry::AffineParams;
use crate::parallel;
use crate::recognizer::{backward, loss, GradMode, MarginConfig, ModelParams};
use crate::rng::{stream, Stream};
use crate::warp::{loss_grad_wrt_theta, warp_image, warp_param_jacobian, ImageTensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Smallest scale factor the initializer will emit.
const MIN_SCALE: f64 = 1e-6;

/// Loss oracle the attack drives: a value and an exact input-image gradient.
pub trait AttackModel: Sync {
    fn loss(&self, x: &ImageTensor, y: usize) -> Result<f64>;
    fn loss_and_input_grad(&self, x: &ImageTensor, y: usize) -> Result<(f64, ImageTensor)>;
}

/// The recognizer as an attack target.
pub struct RecognizerAttack<'a> {
    pub params: &'a ModelParams,
    pub margin: &'a MarginConfig,
}

impl AttackModel for RecognizerAttack<'_> {
    fn loss(&self, x: &ImageTensor, y: usize) -> Result<f64> {
        loss(self.params, x, y, self.margin)
    }

    fn loss_and_input_grad(&self, x: &ImageTensor, y: usize) -> Result<(f64, ImageTensor)> {
        let bw = backward(self.params, x, y, self.margin, GradMode::Input)?;
        Ok((bw.loss, bw.grad_input.expect("input gradient requested")))
    }
}

/// Which transform components the attack may move; frozen components stay
/// at their identity values, both at initialization and during steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub scale: bool,
    pub rotation: bool,
    pub translation: bool,
}

impl Default for ComponentMask {
    fn default() -> Self {
        ComponentMask {
            scale: true,
            rotation: true,
            translation: true,
        }
    }
}

impl ComponentMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn none() -> Self {
        ComponentMask {
            scale: false,
            rotation: false,
            translation: false,
        }
    }

    /// Enabled flag per (phi, du, dv, scale) slot.
    pub fn slots(&self) -> [bool; 4] {
        [self.rotation, self.translation, self.translation, self.scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Sign-gradient steps per sample.
    pub k: usize,
    /// Step-size distribution.
    pub alpha_mean: f64,
    pub alpha_std: f64,
    /// Use `alpha_mean` directly instead of sampling (the fixed arm of the
    /// alpha study).
    pub alpha_fixed: bool,
    /// Initial-transform distribution: scale component.
    pub init_scale_mean: f64,
    pub init_scale_std: f64,
    /// Initial-transform distribution: rotation and shifts (mean 0).
    pub init_other_std: f64,
    /// Component bounds defining the feasible set.
    pub budget: BudgetSpec,
    /// Diagnostic switch; projection stays on in real training.
    pub project: bool,
    pub mask: ComponentMask,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            k: 1,
            alpha_mean: 0.0,
            alpha_std: 0.1,
            alpha_fixed: false,
            init_scale_mean: 1.0,
            init_scale_std: 0.1,
            init_other_std: 0.1,
            budget: BudgetSpec {
                max_rotation: 0.01,
                max_translation_u: 0.01,
                max_translation_v: 0.01,
                max_scale_deviation: 0.01,
            },
            project: true,
            mask: ComponentMask::all(),
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pgd.alpha_std", self.alpha_std),
            ("pgd.init_scale_std", self.init_scale_std),
            ("pgd.init_other_std", self.init_other_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.alpha_mean.is_finite() || !self.init_scale_mean.is_finite() {
            return Err(Error::Validation("pgd means must be finite".into()));
        }
        self.budget.validate()
    }
}

/// Outcome of one per-sample attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub theta_star: AffineParams,
    pub theta_init: AffineParams,
    pub loss_before: f64,
    pub loss_after: f64,
    pub steps_taken: usize,
    pub alpha: f64,
    /// Component deviation from `theta_init` after the final sign step,
    /// measured before that step's projection.
    pub pre_projection_deviation: [f64; 4],
    /// True when every step saw a nonzero gradient on every unfrozen
    /// component (false for k = 0: no gradient was ever evaluated).
    pub grads_all_nonzero: bool,
}

impl AdversarialResult {
    pub fn pre_projection_deviation_norm(&self) -> f64 {
        self.pre_projection_deviation.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// Draw the initial transform: scale from its own Gaussian, rotation and
/// shifts zero-mean, frozen components pinned at identity, scale clamped
/// positive, then projected onto the feasible set.
pub fn sample_init_theta(
    cfg: &PgdConfig,
    tpl: &LandmarkTemplate,
    budget: &crate::constraint::FlowBudget,
    rng: &mut Stream,
) -> AffineParams {
    let other = Normal::new(0.0, cfg.init_other_std).expect("normal");
    let scale_dist = Normal::new(cfg.init_scale_mean, cfg.init_scale_std).expect("normal");
    let phi = other.sample(rng);
    let du = other.sample(rng);
    let dv = other.sample(rng);
    let scale = scale_dist.sample(rng).max(MIN_SCALE);
    let slots = cfg.mask.slots();
    let theta = AffineParams::new(
        if slots[0] { phi } else { 0.0 },
        if slots[1] { du } else { 0.0 },
        if slots[2] { dv } else { 0.0 },
        if slots[3] { scale } else { 1.0 },
    );
    if cfg.project {
        project(theta, budget, tpl)
    } else {
        theta
    }
}

/// Draw the step size: one Gaussian draw per sample, unclamped (a negative
/// alpha descends), or exactly the mean in the fixed arm.
pub fn sample_alpha(cfg: &PgdConfig, rng: &mut Stream) -> f64 {
    if cfg.alpha_fixed {
        cfg.alpha_mean
    } else {
        Normal::new(cfg.alpha_mean, cfg.alpha_std).expect("normal").sample(rng)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Run one projected sign-gradient attack.
pub fn pgd_attack(
    model: &impl AttackModel,
    x: &ImageTensor,
    y: usize,
    cfg: &PgdConfig,
    tpl: &LandmarkTemplate,
    rng: &mut Stream,
) -> Result<AdversarialResult> {
    let budget = compute_budget(&cfg.budget, tpl);
    let theta_init = sample_init_theta(cfg, tpl, &budget, rng);
    let alpha = sample_alpha(cfg, rng);
    let slots = cfg.mask.slots();

    let mut theta = theta_init;
    let mut loss_before = f64::NAN;
    let mut pre_projection_deviation = [0.0; 4];
    let mut grads_all_nonzero = cfg.k > 0;

    for step in 0..cfg.k {
        let warped = warp_image(x, theta);
        let (l, grad_img) = model.loss_and_input_grad(&warped, y)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("attack loss is {l} at step {step}")));
        }
        if step == 0 {
            loss_before = l;
        }
        let jac = warp_param_jacobian(x, theta);
        let grad_theta = loss_grad_wrt_theta(&grad_img, &jac);
        if grad_theta.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite transform gradient {grad_theta:?} at step {step}"
            )));
        }
        let mut arr = theta.to_array();
        for (c, enabled) in slots.iter().enumerate() {
            if *enabled {
                if grad_theta[c] == 0.0 {
                    grads_all_nonzero = false;
                }
                arr[c] += alpha * sign(grad_theta[c]);
            }
        }
        // scale must stay positive even before projection
        arr[3] = arr[3].max(MIN_SCALE);
        let init = theta_init.to_array();
        for c in 0..4 {
            pre_projection_deviation[c] = arr[c] - init[c];
        }
        theta = AffineParams::from_array(arr);
        if cfg.project {
            theta = project(theta, &budget, tpl);
        }
    }

    let loss_after = if cfg.k == 0 {
        let l = model.loss(&warp_image(x, theta), y)?;
        loss_before = l;
        l
    } else {
        model.loss(&warp_image(x, theta), y)?
    };
    if !loss_after.is_finite() {
        return Err(Error::Numeric(format!("final attack loss is {loss_after}")));
    }

    Ok(AdversarialResult {
        theta_star: theta,
        theta_init,
        loss_before,
        loss_after,
        steps_taken: cfg.k,
        alpha,
        pre_projection_deviation,
        grads_all_nonzero,
    })
}

/// One batch entry: sample id (keys the random stream), image, and label.
pub struct BatchItem<'a> {
    pub id: u64,
    pub image: &'a ImageTensor,
    pub label: usize,
}

/// Attack every item of a batch independently and return the warped images
/// plus per-sample results. Streams are keyed by sample id, so the output
/// depends only on `(master_seed, id)`, never on batch position or thread
/// schedule.
pub fn augment_batch(
    model: &impl AttackModel,
    items: &[BatchItem<'_>],
    cfg: &PgdConfig,
    tpl: &LandmarkTemplate,
    master_seed: u64,
) -> Result<(Vec<ImageTensor>, Vec<AdversarialResult>)> {
    let outcomes = parallel::map_slice(items, |item| {
        let mut rng = stream(master_seed, "attack", item.id);
        let res = pgd_attack(model, item.image, item.label, cfg, tpl, &mut rng).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("sample {}: {m}", item.id)),
            other => other,
        })?;
        let warped = warp_image(item.image, res.theta_star);
        Ok::<_, Error>((warped, res))
    });
    let mut warped = Vec::with_capacity(items.len());
    let mut results = Vec::with_capacity(items.len());
    for outcome in outcomes {
        let (w, r) = outcome?;
        warped.push(w);
        results.push(r);
    }
    Ok((warped, results))
}
