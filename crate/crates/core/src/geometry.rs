//! Centered coordinate conventions and the four-parameter affine transform
//! family.
//!
//! Pixel `(i, j)` (row, column, zero-indexed) maps to centered coordinates
//! `u = j - (w-1)/2`, `v = (h-1)/2 - i`; the v axis points up, so a positive
//! rotation angle is counterclockwise in the image as displayed.
//!
//! The transform is `T(p) = scale * R(phi) * p + (du, dv)`: rotate and scale
//! about the image center, then translate. Its inverse is closed-form, and
//! so are the derivatives of the inverse-mapped point with respect to each
//! parameter, which is what the warp Jacobian consumes.

use serde::{Deserialize, Serialize};

/// Height and width of a pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "grid must be at least 1x1");
        GridShape { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A point in centered image coordinates (pixels, v up-positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteredPoint {
    pub u: f64,
    pub v: f64,
}

impl CenteredPoint {
    pub fn new(u: f64, v: f64) -> Self {
        CenteredPoint { u, v }
    }

    pub fn norm(&self) -> f64 {
        self.u.hypot(self.v)
    }

    pub fn sub(&self, other: CenteredPoint) -> CenteredPoint {
        CenteredPoint::new(self.u - other.u, self.v - other.v)
    }
}

/// The adversarial variable: rotation (radians), horizontal and vertical
/// shift (pixels), and a multiplicative scale factor (> 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub phi: f64,
    pub du: f64,
    pub dv: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn new(phi: f64, du: f64, dv: f64, scale: f64) -> Self {
        let p = AffineParams { phi, du, dv, scale };
        debug_assert!(p.is_valid(), "invalid affine params: {p:?}");
        p
    }

    pub fn identity() -> Self {
        AffineParams {
            phi: 0.0,
            du: 0.0,
            dv: 0.0,
            scale: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.phi.is_finite()
            && self.du.is_finite()
            && self.dv.is_finite()
            && self.scale.is_finite()
            && self.scale > 0.0
    }

    /// Components in the fixed order (phi, du, dv, scale).
    pub fn to_array(&self) -> [f64; 4] {
        [self.phi, self.du, self.dv, self.scale]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        AffineParams {
            phi: a[0],
            du: a[1],
            dv: a[2],
            scale: a[3],
        }
    }

    /// Deviation from the identity transform: (phi, du, dv, scale - 1).
    pub fn deviation(&self) -> [f64; 4] {
        [self.phi, self.du, self.dv, self.scale - 1.0]
    }
}

/// Convert a (row, column) index pair to centered coordinates.
pub fn to_centered(i: i64, j: i64, shape: GridShape) -> CenteredPoint {
    CenteredPoint {
        u: j as f64 - (shape.width as f64 - 1.0) / 2.0,
        v: (shape.height as f64 - 1.0) / 2.0 - i as f64,
    }
}

/// Inverse of [`to_centered`] on real-valued points: returns fractional
/// (row, column) indices.
pub fn from_centered(p: CenteredPoint, shape: GridShape) -> (f64, f64) {
    let j = p.u + (shape.width as f64 - 1.0) / 2.0;
    let i = (shape.height as f64 - 1.0) / 2.0 - p.v;
    (i, j)
}

/// Apply the transform: `scale * R(phi) * p + (du, dv)`.
pub fn forward(theta: AffineParams, p: CenteredPoint) -> CenteredPoint {
    let (s, c) = theta.phi.sin_cos();
    CenteredPoint {
        u: theta.scale * (c * p.u - s * p.v) + theta.du,
        v: theta.scale * (s * p.u + c * p.v) + theta.dv,
    }
}

/// Apply the inverse transform: `R(-phi) * (p - (du, dv)) / scale`.
pub fn inverse(theta: AffineParams, p: CenteredPoint) -> CenteredPoint {
    let (s, c) = theta.phi.sin_cos();
    let wu = p.u - theta.du;
    let wv = p.v - theta.dv;
    CenteredPoint {
        u: (c * wu + s * wv) / theta.scale,
        v: (-s * wu + c * wv) / theta.scale,
    }
}

/// Derivatives of the inverse-mapped point `q = T^{-1}(p)` with respect to
/// each transform component, in (phi, du, dv, scale) order.
///
/// Writing `q_u, q_v` for the components of [`inverse`]:
/// `dq/dphi = (q_v, -q_u)`, `dq/ddu = (-cos, sin)/scale`,
/// `dq/ddv = (-sin, -cos)/scale`, `dq/dscale = -q/scale`.
pub fn inverse_jacobian(theta: AffineParams, p: CenteredPoint) -> [[f64; 2]; 4] {
    let (s, c) = theta.phi.sin_cos();
    let q = inverse(theta, p);
    [
        [q.v, -q.u],
        [-c / theta.scale, s / theta.scale],
        [-s / theta.scale, -c / theta.scale],
        [-q.u / theta.scale, -q.v / theta.scale],
    ]
}
