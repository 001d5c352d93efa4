//! Differentiable image warping.
//!
//! A warped image is built by pulling: each output pixel looks up the
//! inverse-mapped coordinate in the input and bilinearly interpolates it.
//! Coordinates more than one pixel outside the grid read as zero; there is
//! no border replication.
//!
//! The interpolation kernel `max(0, 1 - |t|)` has kinks at `t = -1, 0, 1`.
//! Derivatives use the exact left-derivative of the interpolant: the kernel
//! derivative is `+1` on `(-1, 0]`, `-1` on `(0, 1]`, and `0` elsewhere.
//! Any fixed convention works for sign-gradient ascent; this one keeps the
//! derivative consistent with a one-sided limit at grid nodes.
//!
//! Accumulation order is fixed everywhere (channel-major, row-major), so
//! parallel and sequential builds produce bitwise-identical results.

use crate::geometry::{
    from_centered, inverse, inverse_jacobian, to_centered, AffineParams, CenteredPoint, GridShape,
};
use crate::parallel;
use serde::{Deserialize, Serialize};

/// A channels x height x width grid of real pixel values, stored row-major
/// within each channel, channels outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub shape: GridShape,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, shape: GridShape) -> Self {
        ImageTensor {
            channels,
            shape,
            data: vec![0.0; channels * shape.len()],
        }
    }

    pub fn from_vec(channels: usize, shape: GridShape, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            channels * shape.len(),
            "image data length must equal channels * height * width"
        );
        ImageTensor {
            channels,
            shape,
            data,
        }
    }

    pub fn from_fn(channels: usize, shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * shape.len());
        for c in 0..channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        ImageTensor {
            channels,
            shape,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.shape.height + i) * self.shape.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f64) {
        let k = self.idx(c, i, j);
        self.data[k] = value;
    }

    /// Borrow one channel as a 2-D grid.
    pub fn channel(&self, c: usize) -> Grid2d<'_> {
        let n = self.shape.len();
        Grid2d {
            shape: self.shape,
            data: &self.data[c * n..(c + 1) * n],
        }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.channels == other.channels && self.shape == other.shape
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A borrowed single-channel grid.
#[derive(Debug, Clone, Copy)]
pub struct Grid2d<'a> {
    pub shape: GridShape,
    pub data: &'a [f64],
}

impl<'a> Grid2d<'a> {
    #[inline]
    fn get(&self, i: i64, j: i64) -> f64 {
        self.data[i as usize * self.shape.width + j as usize]
    }

    #[inline]
    fn in_bounds_row(&self, i: i64) -> bool {
        i >= 0 && (i as usize) < self.shape.height
    }

    #[inline]
    fn in_bounds_col(&self, j: i64) -> bool {
        j >= 0 && (j as usize) < self.shape.width
    }
}

/// Per-pixel, per-channel derivatives of the warped image with respect to
/// the four transform components, in (phi, du, dv, scale) order.
#[derive(Debug, Clone)]
pub struct WarpJacobian {
    pub channels: usize,
    pub shape: GridShape,
    pub data: Vec<[f64; 4]>,
}

impl WarpJacobian {
    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> [f64; 4] {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }
}

/// Interpolation kernel value `max(0, 1 - |t|)`.
#[inline]
fn kernel(t: f64) -> f64 {
    let w = 1.0 - t.abs();
    if w > 0.0 {
        w
    } else {
        0.0
    }
}

/// Left-derivative of the kernel (see module docs).
#[inline]
fn kernel_deriv(t: f64) -> f64 {
    if t > -1.0 && t <= 0.0 {
        1.0
    } else if t > 0.0 && t <= 1.0 {
        -1.0
    } else {
        0.0
    }
}

/// Bilinearly interpolate one channel at a centered-coordinate point.
///
/// Restricts the full kernel double sum to the nodes with nonzero weight;
/// the result is value-identical to summing every pixel of the grid.
/// Coordinates more than one pixel outside the grid return 0.
pub fn bilinear_sample(grid: Grid2d<'_>, p: CenteredPoint) -> f64 {
    let (fi, fj) = from_centered(p, grid.shape);
    let i0 = fi.floor() as i64;
    let j0 = fj.floor() as i64;
    // Visit candidate nodes in the same row-major order the full double sum
    // would, seeding the accumulator with the first term so that an exact
    // node lookup passes the pixel through untouched.
    let mut acc = 0.0;
    let mut started = false;
    for i in [i0, i0 + 1] {
        if !grid.in_bounds_row(i) {
            continue;
        }
        let wi = kernel(fi - i as f64);
        if wi <= 0.0 {
            continue;
        }
        for j in [j0, j0 + 1] {
            if !grid.in_bounds_col(j) {
                continue;
            }
            let wj = kernel(fj - j as f64);
            if wj <= 0.0 {
                continue;
            }
            let term = grid.get(i, j) * wi * wj;
            if started {
                acc += term;
            } else {
                acc = term;
                started = true;
            }
        }
    }
    acc
}

/// Exact piecewise derivative of [`bilinear_sample`] with respect to the
/// sample point, returned as (dI/du, dI/dv).
pub fn sample_gradient(grid: Grid2d<'_>, p: CenteredPoint) -> (f64, f64) {
    let (fi, fj) = from_centered(p, grid.shape);
    let i0 = fi.floor() as i64;
    let j0 = fj.floor() as i64;

    // dI/du: value kernel over rows, derivative kernel over columns.
    // t_u = u - P_u(j) = fj - j.
    let mut d_du = 0.0;
    for i in [i0, i0 + 1] {
        if !grid.in_bounds_row(i) {
            continue;
        }
        let wi = kernel(fi - i as f64);
        if wi <= 0.0 {
            continue;
        }
        let j_lo = (fj - 1.0).ceil() as i64;
        let j_hi = (fj + 1.0).floor() as i64;
        for j in j_lo..=j_hi {
            if !grid.in_bounds_col(j) {
                continue;
            }
            let kd = kernel_deriv(fj - j as f64);
            if kd != 0.0 {
                d_du += grid.get(i, j) * wi * kd;
            }
        }
    }

    // dI/dv: derivative kernel over rows, value kernel over columns.
    // t_v = v - P_v(i) = i - fi.
    let mut d_dv = 0.0;
    let i_lo = (fi - 1.0).ceil() as i64;
    let i_hi = (fi + 1.0).floor() as i64;
    for i in i_lo..=i_hi {
        if !grid.in_bounds_row(i) {
            continue;
        }
        let kd = kernel_deriv(i as f64 - fi);
        if kd == 0.0 {
            continue;
        }
        for j in [j0, j0 + 1] {
            if !grid.in_bounds_col(j) {
                continue;
            }
            let wj = kernel(fj - j as f64);
            if wj > 0.0 {
                d_dv += grid.get(i, j) * kd * wj;
            }
        }
    }

    (d_du, d_dv)
}

struct InverseMap {
    sin: f64,
    cos: f64,
    du: f64,
    dv: f64,
    scale: f64,
}

impl InverseMap {
    fn new(theta: AffineParams) -> Self {
        let (sin, cos) = theta.phi.sin_cos();
        InverseMap {
            sin,
            cos,
            du: theta.du,
            dv: theta.dv,
            scale: theta.scale,
        }
    }

    /// Identical arithmetic to [`inverse`], with the trig hoisted out.
    #[inline]
    fn apply(&self, p: CenteredPoint) -> CenteredPoint {
        let wu = p.u - self.du;
        let wv = p.v - self.dv;
        CenteredPoint {
            u: (self.cos * wu + self.sin * wv) / self.scale,
            v: (-self.sin * wu + self.cos * wv) / self.scale,
        }
    }
}

fn warp_row(x: &ImageTensor, map: &InverseMap, c: usize, i: usize, out_row: &mut [f64]) {
    let grid = x.channel(c);
    for (j, slot) in out_row.iter_mut().enumerate() {
        let g = to_centered(i as i64, j as i64, x.shape);
        *slot = bilinear_sample(grid, map.apply(g));
    }
}

/// Warp an image by `theta`: output pixel (i, j) reads the input at
/// `T^{-1}(P_u(j), P_v(i))` through bilinear interpolation, per channel.
pub fn warp_image(x: &ImageTensor, theta: AffineParams) -> ImageTensor {
    debug_assert!(theta.is_valid());
    let map = InverseMap::new(theta);
    let mut out = ImageTensor::zeros(x.channels, x.shape);
    let h = x.shape.height;
    let w = x.shape.width;
    parallel::fill_chunks(&mut out.data, w, |block, row| {
        warp_row(x, &map, block / h, block % h, row);
    });
    out
}

/// Sequential twin of [`warp_image`]; bitwise-identical output.
pub fn warp_image_seq(x: &ImageTensor, theta: AffineParams) -> ImageTensor {
    let map = InverseMap::new(theta);
    let mut out = ImageTensor::zeros(x.channels, x.shape);
    let w = x.shape.width;
    let h = x.shape.height;
    for (block, row) in out.data.chunks_mut(w).enumerate() {
        warp_row(x, &map, block / h, block % h, row);
    }
    out
}

fn jacobian_row(x: &ImageTensor, theta: AffineParams, c: usize, i: usize, out_row: &mut [[f64; 4]]) {
    let grid = x.channel(c);
    for (j, slot) in out_row.iter_mut().enumerate() {
        let g = to_centered(i as i64, j as i64, x.shape);
        let q = inverse(theta, g);
        let (gu, gv) = sample_gradient(grid, q);
        let dq = inverse_jacobian(theta, g);
        for m in 0..4 {
            slot[m] = gu * dq[m][0] + gv * dq[m][1];
        }
    }
}

/// Derivative of every warped pixel with respect to each transform
/// component: the chain rule of [`sample_gradient`] at the inverse-mapped
/// point with the closed-form Jacobian of the inverse map.
pub fn warp_param_jacobian(x: &ImageTensor, theta: AffineParams) -> WarpJacobian {
    debug_assert!(theta.is_valid());
    let h = x.shape.height;
    let w = x.shape.width;
    let rows = parallel::map_range(x.channels * h, |block| {
        let mut row = vec![[0.0f64; 4]; w];
        jacobian_row(x, theta, block / h, block % h, &mut row);
        row
    });
    WarpJacobian {
        channels: x.channels,
        shape: x.shape,
        data: rows.into_iter().flatten().collect(),
    }
}

/// Sequential twin of [`warp_param_jacobian`]; bitwise-identical output.
pub fn warp_param_jacobian_seq(x: &ImageTensor, theta: AffineParams) -> WarpJacobian {
    let h = x.shape.height;
    let w = x.shape.width;
    let mut data = vec![[0.0f64; 4]; x.channels * h * w];
    for (block, row) in data.chunks_mut(w).enumerate() {
        jacobian_row(x, theta, block / h, block % h, row);
    }
    WarpJacobian {
        channels: x.channels,
        shape: x.shape,
        data,
    }
}

/// Contract an upstream loss gradient with a warp Jacobian, producing the
/// loss gradient with respect to (phi, du, dv, scale).
///
/// Accumulates per row, then folds the row partials in channel-major,
/// row-major order; the reduction order never depends on thread count.
///
/// # Panics
///
/// Panics if the two arguments disagree in shape (contract violation).
pub fn loss_grad_wrt_theta(dl_dxprime: &ImageTensor, jac: &WarpJacobian) -> [f64; 4] {
    assert!(
        dl_dxprime.channels == jac.channels && dl_dxprime.shape == jac.shape,
        "loss_grad_wrt_theta: upstream gradient {}x{}x{} does not match jacobian {}x{}x{}",
        dl_dxprime.channels,
        dl_dxprime.shape.height,
        dl_dxprime.shape.width,
        jac.channels,
        jac.shape.height,
        jac.shape.width,
    );
    let h = jac.shape.height;
    let w = jac.shape.width;
    let row_partials = parallel::map_range(jac.channels * h, |block| {
        let mut acc = [0.0f64; 4];
        let base = block * w;
        for j in 0..w {
            let g = dl_dxprime.data[base + j];
            let jj = jac.data[base + j];
            for m in 0..4 {
                acc[m] += g * jj[m];
            }
        }
        acc
    });
    let mut total = [0.0f64; 4];
    for part in row_partials {
        for m in 0..4 {
            total[m] += part[m];
        }
    }
    total
}
