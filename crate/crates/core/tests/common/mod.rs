//! Shared helpers for integration tests: the literal interpolation oracle
//! and small fixtures. The oracle deliberately evaluates the full double
//! sum over every pixel so it stays independent of the fast sampling path.

// each integration test binary uses a different subset
#![allow(dead_code)]

use warpaug::geometry::{inverse, to_centered, AffineParams, CenteredPoint, GridShape};
use warpaug::constraint::LandmarkTemplate;
use warpaug::warp::ImageTensor;

/// Full double-sum bilinear interpolation of one channel.
pub fn oracle_sample(img: &ImageTensor, channel: usize, p: CenteredPoint) -> f64 {
    let mut acc = 0.0;
    for i in 0..img.shape.height {
        for j in 0..img.shape.width {
            let node = to_centered(i as i64, j as i64, img.shape);
            acc += img.get(channel, i, j)
                * (1.0 - (p.v - node.v).abs()).max(0.0)
                * (1.0 - (p.u - node.u).abs()).max(0.0);
        }
    }
    acc
}

/// Warp through the oracle sampler: output pixel (i, j) reads the inverse
/// image of its centered coordinate.
pub fn oracle_warp(img: &ImageTensor, theta: AffineParams) -> ImageTensor {
    ImageTensor::from_fn(img.channels, img.shape, |c, i, j| {
        oracle_sample(img, c, inverse(theta, to_centered(i as i64, j as i64, img.shape)))
    })
}

pub fn square_template(extent: usize) -> LandmarkTemplate {
    let r = (extent as f64 - 1.0) / 4.0;
    LandmarkTemplate::new(
        [
            CenteredPoint::new(-r, r * 0.9),
            CenteredPoint::new(r, r * 0.9),
            CenteredPoint::new(0.2, -0.3),
            CenteredPoint::new(-r * 0.9, -r),
            CenteredPoint::new(r * 0.9, -r),
        ],
        GridShape::new(extent, extent),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
