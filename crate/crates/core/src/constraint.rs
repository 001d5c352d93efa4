//! The feasible transform set.
//!
//! A transform is admissible when the summed Euclidean norms of the five
//! landmark displacement vectors (landmark flows) stay within a budget. The
//! budget itself is derived from per-component upper bounds by evaluating
//! the flow at the bound transform.
//!
//! Projection back onto the set shrinks the deviation from the identity
//! along a ray: `theta(t) = identity + t * deviation`, bisecting for the
//! largest feasible `t`. Total flow must be nondecreasing along the ray;
//! the bisection verifies this empirically on its bracket and aborts with a
//! diagnostic if it ever observes a decrease, rather than mis-projecting.

use crate::error::{Error, Result};
use crate::geometry::{inverse, AffineParams, CenteredPoint, GridShape};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Slack allowed by the membership test.
pub const FEASIBILITY_TOL: f64 = 1e-9;

const BISECT_ITERS: usize = 48;

/// The five alignment landmarks, in centered coordinates of `shape`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTemplate {
    pub points: [CenteredPoint; 5],
    pub shape: GridShape,
}

impl LandmarkTemplate {
    pub fn new(points: [CenteredPoint; 5], shape: GridShape) -> Result<Self> {
        let half_w = (shape.width as f64 - 1.0) / 2.0;
        let half_h = (shape.height as f64 - 1.0) / 2.0;
        for (k, p) in points.iter().enumerate() {
            if !(p.u.is_finite() && p.v.is_finite()) {
                return Err(Error::Validation(format!("landmark {k} is not finite")));
            }
            if p.u.abs() > half_w || p.v.abs() > half_h {
                return Err(Error::Validation(format!(
                    "landmark {k} at ({}, {}) lies outside a {}x{} grid",
                    p.u, p.v, shape.height, shape.width
                )));
            }
        }
        Ok(LandmarkTemplate { points, shape })
    }

    /// Parse the fixture format: one `h w` header line, then five `u v`
    /// lines in centered pixel coordinates.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "landmark template",
            path: origin.to_path_buf(),
            detail,
        };
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("header `{header}`: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 || dims[0] == 0 || dims[1] == 0 {
            return Err(bad(format!("header must be `h w`, got `{header}`")));
        }
        let mut points = [CenteredPoint::new(0.0, 0.0); 5];
        for slot in points.iter_mut() {
            let line = lines.next().ok_or_else(|| bad("expected 5 landmark lines".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("landmark line `{line}`: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 2 {
                return Err(bad(format!("landmark line must be `u v`, got `{line}`")));
            }
            *slot = CenteredPoint::new(vals[0], vals[1]);
        }
        if lines.next().is_some() {
            return Err(bad("trailing content after 5 landmarks".into()));
        }
        LandmarkTemplate::new(points, GridShape::new(dims[0], dims[1]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LandmarkTemplate::parse(&text, path)
    }

    /// Render in the fixture file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.shape.height, self.shape.width);
        for p in &self.points {
            let _ = writeln!(s, "{} {}", p.u, p.v);
        }
        s
    }

    /// Proportionally rescale the layout to a different grid.
    pub fn rescaled(&self, shape: GridShape) -> LandmarkTemplate {
        let fu = (shape.width as f64 - 1.0) / (self.shape.width as f64 - 1.0);
        let fv = (shape.height as f64 - 1.0) / (self.shape.height as f64 - 1.0);
        let points = self.points.map(|p| CenteredPoint::new(p.u * fu, p.v * fv));
        LandmarkTemplate { points, shape }
    }
}

/// Per-component upper bounds from which the flow budget is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Radians.
    pub max_rotation: f64,
    /// Pixels.
    pub max_translation_u: f64,
    /// Pixels.
    pub max_translation_v: f64,
    /// Bound on |scale - 1|, dimensionless; must stay below 1.
    pub max_scale_deviation: f64,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("budget.rotation", self.max_rotation),
            ("budget.translation_u", self.max_translation_u),
            ("budget.translation_v", self.max_translation_v),
            ("budget.scale", self.max_scale_deviation),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.max_scale_deviation >= 1.0 {
            return Err(Error::Validation(format!(
                "budget.scale must be < 1 to keep the scale factor positive, got {}",
                self.max_scale_deviation
            )));
        }
        Ok(())
    }

    /// The bound transform: every component at its positive extreme.
    pub fn extreme_theta(&self) -> AffineParams {
        AffineParams::new(
            self.max_rotation,
            self.max_translation_u,
            self.max_translation_v,
            1.0 + self.max_scale_deviation,
        )
    }
}

/// Per-landmark flow bounds and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowBudget {
    pub per_landmark: [f64; 5],
    pub total: f64,
}

impl FlowBudget {
    pub fn new(per_landmark: [f64; 5]) -> Self {
        let total = per_landmark.iter().sum();
        FlowBudget { per_landmark, total }
    }
}

/// Displacement of each landmark under the inverse transform:
/// `f_p = T^{-1}(p) - p`.
pub fn landmark_flow(theta: AffineParams, tpl: &LandmarkTemplate) -> [CenteredPoint; 5] {
    tpl.points.map(|p| inverse(theta, p).sub(p))
}

fn total_flow(theta: AffineParams, tpl: &LandmarkTemplate) -> f64 {
    landmark_flow(theta, tpl).iter().map(CenteredPoint::norm).sum()
}

/// Derive the flow budget from component bounds by evaluating the flow at
/// the bound transform.
pub fn compute_budget(bound: &BudgetSpec, tpl: &LandmarkTemplate) -> FlowBudget {
    let theta = bound.extreme_theta();
    FlowBudget::new(landmark_flow(theta, tpl).map(|f| f.norm()))
}

/// Membership test with a small slack above the budget.
pub fn is_feasible(theta: AffineParams, budget: &FlowBudget, tpl: &LandmarkTemplate) -> bool {
    total_flow(theta, tpl) <= budget.total + FEASIBILITY_TOL
}

fn theta_on_ray(deviation: [f64; 4], t: f64) -> AffineParams {
    AffineParams::new(
        t * deviation[0],
        t * deviation[1],
        t * deviation[2],
        1.0 + t * deviation[3],
    )
}

/// Project a transform onto the feasible set.
///
/// Feasible inputs come back unchanged. A zero budget collapses the set to
/// the identity transform exactly. Otherwise the deviation from identity is
/// shrunk by bisection to the largest feasible ray parameter.
///
/// # Panics
///
/// Panics if the total flow observably decreases along the bisection
/// bracket; the ray-shrink is only sound for nondecreasing flow.
pub fn project(theta: AffineParams, budget: &FlowBudget, tpl: &LandmarkTemplate) -> AffineParams {
    if is_feasible(theta, budget, tpl) {
        return theta;
    }
    if budget.total <= 0.0 {
        return AffineParams::identity();
    }
    let dev = theta.deviation();
    let mut t_lo = 0.0_f64;
    let mut f_lo = 0.0_f64;
    let mut t_hi = 1.0_f64;
    let mut f_hi = total_flow(theta, tpl);
    for _ in 0..BISECT_ITERS {
        let t_mid = 0.5 * (t_lo + t_hi);
        let f_mid = total_flow(theta_on_ray(dev, t_mid), tpl);
        let slack = 1e-9 * (1.0 + f_hi.abs());
        if f_mid < f_lo - slack || f_mid > f_hi + slack {
            panic!(
                "projection: total landmark flow is not monotone along the deviation ray \
                 (flow({t_lo:.6}) = {f_lo:.9}, flow({t_mid:.6}) = {f_mid:.9}, \
                 flow({t_hi:.6}) = {f_hi:.9}) for deviation {dev:?}"
            );
        }
        if f_mid <= budget.total {
            t_lo = t_mid;
            f_lo = f_mid;
        } else {
            t_hi = t_mid;
            f_hi = f_mid;
        }
    }
    theta_on_ray(dev, t_lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn square_template(h: usize, w: usize) -> LandmarkTemplate {
        let r = (w.min(h) as f64 - 1.0) / 4.0;
        LandmarkTemplate::new(
            [
                CenteredPoint::new(-r, r),
                CenteredPoint::new(r, r),
                CenteredPoint::new(0.0, 0.0),
                CenteredPoint::new(-r, -r),
                CenteredPoint::new(r, -r),
            ],
            GridShape::new(h, w),
        )
        .unwrap()
    }

    #[test]
    fn flow_closed_forms() {
        let tpl = square_template(65, 65);
        // translation: every flow is -delta
        let flows = landmark_flow(AffineParams::new(0.0, 3.0, 0.0, 1.0), &tpl);
        for f in flows {
            assert!((f.u + 3.0).abs() < 1e-9 && f.v.abs() < 1e-9);
            assert!((f.norm() - 3.0).abs() < 1e-9);
        }
        // rotation: chord length
        let phi = 0.37;
        let flows = landmark_flow(AffineParams::new(phi, 0.0, 0.0, 1.0), &tpl);
        for (f, p) in flows.iter().zip(&tpl.points) {
            let r = p.norm();
            assert!((f.norm() - 2.0 * r * (phi / 2.0).sin()).abs() < 1e-9);
        }
        // scale: radial shrink
        let s = 1.25;
        let flows = landmark_flow(AffineParams::new(0.0, 0.0, 0.0, s), &tpl);
        for (f, p) in flows.iter().zip(&tpl.points) {
            let r = p.norm();
            assert!((f.norm() - r * (1.0 / s - 1.0).abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_translation_only() {
        let tpl = square_template(33, 33);
        let bound = BudgetSpec {
            max_rotation: 0.0,
            max_translation_u: 2.5,
            max_translation_v: 0.0,
            max_scale_deviation: 0.0,
        };
        let budget = compute_budget(&bound, &tpl);
        assert!((budget.total - 5.0 * 2.5).abs() < 1e-9);
        for f in budget.per_landmark {
            assert!((f - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_zero_bound() {
        let tpl = square_template(33, 33);
        let bound = BudgetSpec {
            max_rotation: 0.0,
            max_translation_u: 0.0,
            max_translation_v: 0.0,
            max_scale_deviation: 0.0,
        };
        let budget = compute_budget(&bound, &tpl);
        assert_eq!(budget.total, 0.0);
        assert!(is_feasible(AffineParams::identity(), &budget, &tpl));
    }

    #[test]
    fn budget_cross_checks_flow_at_extreme() {
        let tpl = square_template(112, 112);
        let bound = BudgetSpec {
            max_rotation: 0.01,
            max_translation_u: 0.01,
            max_translation_v: 0.01,
            max_scale_deviation: 0.01,
        };
        let budget = compute_budget(&bound, &tpl);
        let direct: f64 = landmark_flow(bound.extreme_theta(), &tpl)
            .iter()
            .map(CenteredPoint::norm)
            .sum();
        assert!((budget.total - direct).abs() < 1e-12);
        // the extreme transform itself sits on the boundary
        assert!(is_feasible(bound.extreme_theta(), &budget, &tpl));
    }

    #[test]
    fn feasibility_boundary() {
        let tpl = square_template(65, 65);
        let budget = FlowBudget::new([2.0; 5]);
        // exactly at the boundary
        assert!(is_feasible(AffineParams::new(0.0, 2.0, 0.0, 1.0), &budget, &tpl));
        // double the boundary
        assert!(!is_feasible(AffineParams::new(0.0, 4.0, 0.0, 1.0), &budget, &tpl));
        assert!(is_feasible(AffineParams::identity(), &budget, &tpl));
    }

    #[test]
    fn project_feasible_unchanged() {
        let tpl = square_template(65, 65);
        let budget = FlowBudget::new([2.0; 5]);
        let theta = AffineParams::new(0.01, 0.5, -0.25, 1.01);
        assert!(is_feasible(theta, &budget, &tpl));
        let proj = project(theta, &budget, &tpl);
        assert_eq!(proj, theta);
    }

    #[test]
    fn project_pure_translation_closed_form() {
        let tpl = square_template(65, 65);
        let budget = FlowBudget::new([1.0; 5]);
        let delta = (3.0, -4.0); // norm 5, total flow 25 > 5
        let theta = AffineParams::new(0.0, delta.0, delta.1, 1.0);
        let proj = project(theta, &budget, &tpl);
        let shrink = budget.total / (5.0 * 5.0);
        assert!((proj.du - delta.0 * shrink).abs() < 1e-9);
        assert!((proj.dv - delta.1 * shrink).abs() < 1e-9);
        assert!(proj.phi.abs() < 1e-15 && (proj.scale - 1.0).abs() < 1e-15);
        assert!(is_feasible(proj, &budget, &tpl));
    }

    #[test]
    fn project_zero_budget_returns_exact_identity() {
        let tpl = square_template(65, 65);
        let budget = FlowBudget::new([0.0; 5]);
        let theta = AffineParams::new(0.05, 1.0, -2.0, 1.1);
        let proj = project(theta, &budget, &tpl);
        assert_eq!(proj, AffineParams::identity());
    }

    #[test]
    fn project_idempotent_and_sound() {
        let tpl = square_template(65, 65);
        let budget = FlowBudget::new([0.8, 1.2, 0.3, 0.9, 1.1]);
        let mut rng = crate::rng::stream(21, "constraint-test", 0);
        for _ in 0..1000 {
            let theta = AffineParams::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.5..1.5),
            );
            let was_feasible = is_feasible(theta, &budget, &tpl);
            let proj = project(theta, &budget, &tpl);
            assert!(is_feasible(proj, &budget, &tpl));
            if was_feasible {
                assert_eq!(proj, theta);
            } else {
                let flow = total_flow(proj, &tpl);
                assert!(
                    (flow - budget.total).abs() <= 1e-6,
                    "boundary tightness violated: {flow} vs {}",
                    budget.total
                );
            }
            let twice = project(proj, &budget, &tpl);
            for (a, b) in twice.to_array().iter().zip(proj.to_array()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    #[should_panic(expected = "not monotone")]
    fn project_detects_non_monotone_ray() {
        let tpl = square_template(65, 65);
        // rotation well past pi: chord length rises then falls along the ray
        let theta = AffineParams::new(1.6 * PI, 0.0, 0.0, 1.0);
        let peak: f64 = tpl.points.iter().map(|p| 2.0 * p.norm()).sum();
        let at_one = total_flow(theta, &tpl);
        assert!(at_one < peak);
        // budget between flow(1) and the peak forces the bracket to see the dip
        let budget = FlowBudget::new([at_one / 5.0 * 0.5; 5]);
        let _ = project(theta, &budget, &tpl);
    }

    #[test]
    fn template_parse_round_trip() {
        let tpl = square_template(112, 96);
        let text = tpl.to_file_string();
        let back = LandmarkTemplate::parse(&text, Path::new("mem")).unwrap();
        assert_eq!(back, tpl);
    }

    #[test]
    fn template_rejects_out_of_bounds() {
        let r = LandmarkTemplate::new(
            [
                CenteredPoint::new(-100.0, 0.0),
                CenteredPoint::new(0.0, 0.0),
                CenteredPoint::new(1.0, 0.0),
                CenteredPoint::new(2.0, 0.0),
                CenteredPoint::new(3.0, 0.0),
            ],
            GridShape::new(32, 32),
        );
        assert!(r.is_err());
    }

    #[test]
    fn template_rescale_preserves_relative_layout() {
        let tpl = square_template(112, 112);
        let small = tpl.rescaled(GridShape::new(64, 64));
        for (a, b) in small.points.iter().zip(&tpl.points) {
            assert!((a.u / b.u - 63.0 / 111.0).abs() < 1e-12 || b.u == 0.0);
        }
        assert_eq!(small.shape, GridShape::new(64, 64));
    }
}
