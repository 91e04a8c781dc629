//! Finite-difference helpers shared by the unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scene::{Camera, Gaussian, GaussianGrad, Intrinsics, Vec3};

/// Raw parameters per Gaussian: mean, rotation, log-scale, opacity, color.
pub const PARAMS: usize = 14;

pub fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..3 => &mut g.mean[k],
        3..7 => &mut g.rotation[k - 3],
        7..10 => &mut g.log_scale[k - 7],
        10 => &mut g.opacity_logit,
        _ => &mut g.color_logit[k - 11],
    }
}

pub fn grad_param(g: &GaussianGrad, k: usize) -> f64 {
    match k {
        0..3 => g.mean[k],
        3..7 => g.rotation[k - 3],
        7..10 => g.log_scale[k - 7],
        10 => g.opacity_logit,
        _ => g.color_logit[k - 11],
    }
}

/// Step for a central difference around `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera {
    let intr = Intrinsics {
        width,
        height,
        fx: rng.random_range(12.0..20.0),
        fy: rng.random_range(12.0..20.0),
        cx: (width as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0),
        cy: (height as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0),
        near: 0.1,
        far: 30.0,
    };
    let az: f64 = rng.random_range(-1.0..1.0);
    let el: f64 = rng.random_range(-0.5..0.5);
    let d = rng.random_range(3.0..5.0);
    let eye = Vec3::new(d * el.cos() * az.sin(), -d * el.cos() * az.cos(), d * el.sin());
    Camera::look_at(intr, eye, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 0.0).unwrap()
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64) -> Gaussian {
    let mut q = [0.0; 4];
    q.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    q[0] += 1.5;
    Gaussian {
        mean: [0; 3].map(|_| rng.random_range(-spread..spread)),
        rotation: q,
        log_scale: [0; 3].map(|_| rng.random_range(-2.0f64..-0.6)),
        opacity_logit: rng.random_range(-1.0..2.0),
        color_logit: [0; 3].map(|_| rng.random_range(-2.0..2.0)),
    }
}
