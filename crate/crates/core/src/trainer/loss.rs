//! Photometric and depth losses and their weighted combination.

use log::warn;

use super::config::LossWeights;
use crate::dataset::is_valid_depth;
use crate::{Error, GrayImage, Image, Result, RgbImage};

/// Mean absolute error over pixels and channels.
pub fn rgb_loss(gt: &RgbImage, pred: &RgbImage) -> Result<f64> {
    Ok(rgb_loss_with_grad(gt, pred)?.0)
}

pub fn rgb_loss_with_grad(gt: &RgbImage, pred: &RgbImage) -> Result<(f64, RgbImage)> {
    if !gt.same_shape(pred) {
        return Err(Error::Dimension("rgb loss images differ in size".into()));
    }
    let n = (gt.len() * 3) as f64;
    let mut sum = 0.0;
    let data = gt
        .pixels()
        .iter()
        .zip(pred.pixels())
        .map(|(g, p)| {
            std::array::from_fn(|c| {
                let r = p[c] - g[c];
                sum += r.abs();
                sign(r) / n
            })
        })
        .collect();
    Ok((sum / n, Image::from_vec(gt.width(), gt.height(), data)?))
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over pixels where `valid` holds.
pub fn depth_loss(gt: &GrayImage, pred: &GrayImage, valid: &[bool]) -> Result<f64> {
    Ok(depth_loss_with_grad(gt, pred, valid)?.0)
}

pub fn depth_loss_with_grad(gt: &GrayImage, pred: &GrayImage, valid: &[bool]) -> Result<(f64, GrayImage)> {
    if !gt.same_shape(pred) || valid.len() != gt.len() {
        return Err(Error::Dimension("depth loss inputs differ in size".into()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = GrayImage::filled(gt.width(), gt.height(), 0.0);
    if count == 0 {
        warn!("depth loss: no valid pixels");
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for (((g, &d), &p), &ok) in grad.pixels_mut().iter_mut().zip(gt.pixels()).zip(pred.pixels()).zip(valid) {
        if ok {
            let r = p - d;
            sum += r.abs();
            *g = sign(r) / n;
        }
    }
    Ok((sum / n, grad))
}

/// Validity mask of a sensor depth map.
pub fn depth_validity(gt: &GrayImage) -> Vec<bool> {
    gt.pixels().iter().map(|&d| is_valid_depth(d)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub rgb: f64,
    pub event: f64,
    pub depth: f64,
    pub smooth: f64,
}

/// Weighted total together with its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub components: LossComponents,
    pub total: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("rgb", c.rgb), ("event", c.event), ("depth", c.depth), ("smoothness", c.smooth)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(LossReport {
        components: *c,
        total: w.rgb * c.rgb + w.event * c.event + w.depth * c.depth + w.smooth * c.smooth,
    })
}
