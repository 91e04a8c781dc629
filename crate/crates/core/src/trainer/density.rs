//! Adaptive density control: clone, split and prune.

use super::config::DensifyConfig;
use super::GaussianOptim;
use crate::scene::{normalize_quat, rotation_from_unit_quat, sigmoid, Gaussian, GaussianSet};

/// Split children shrink their scales by this factor.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Split children sit this many standard deviations from the parent mean.
pub const SPLIT_OFFSET_SIGMAS: f64 = 0.75;

/// Screen-space gradient statistics since the last densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensityStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, i: usize, grad_norm: f64) {
        self.grad_accum[i] += grad_norm;
        self.count[i] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Unit vector of the largest scale axis and that scale.
fn dominant_axis(g: &Gaussian) -> ([f64; 3], f64) {
    let scale = g.scale();
    let k = (0..3).fold(0, |best, a| if scale[a] > scale[best] { a } else { best });
    let r = normalize_quat(g.rotation).map(rotation_from_unit_quat).unwrap_or_else(|_| crate::scene::Mat3::identity());
    ([r[(0, k)], r[(1, k)], r[(2, k)]], scale[k])
}

fn shifted(g: &Gaussian, dir: [f64; 3], dist: f64) -> Gaussian {
    let mut out = *g;
    for a in 0..3 {
        out.mean[a] += dir[a] * dist;
    }
    out
}

/// Clones small and splits large Gaussians whose mean screen-space gradient
/// reaches the threshold, then prunes near-transparent ones. Resets `stats`.
///
/// `extent` is the length against which `percent_dense` is measured. Growth
/// is capped at `max_gaussians`, highest gradients first.
pub fn densify_and_prune(
    gs: &mut GaussianSet,
    optim: &mut GaussianOptim,
    stats: &mut DensityStats,
    cfg: &DensifyConfig,
    extent: f64,
) -> DensifyOutcome {
    let n = gs.len();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) >= cfg.grad_threshold && stats.count[i] > 0).collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    candidates.truncate(cfg.max_gaussians.saturating_sub(n));

    let mut split_parent = vec![false; n];
    let mut added = Vec::new();
    let mut outcome = DensifyOutcome::default();
    let mut chosen = candidates.clone();
    chosen.sort_unstable();
    for i in chosen {
        let g = gs.get(i);
        let (dir, s_max) = dominant_axis(&g);
        if s_max <= cfg.percent_dense * extent {
            added.push(shifted(&g, dir, 0.5 * s_max));
            outcome.cloned += 1;
        } else {
            let mut child = g;
            child.log_scale = g.log_scale.map(|s| s - SPLIT_SCALE_DIVISOR.ln());
            added.push(shifted(&child, dir, SPLIT_OFFSET_SIGMAS * s_max));
            added.push(shifted(&child, dir, -SPLIT_OFFSET_SIGMAS * s_max));
            split_parent[i] = true;
            outcome.split += 1;
        }
    }

    let mut keep: Vec<usize> = (0..n).filter(|&i| !split_parent[i]).collect();
    let mut next = gs.select(&keep);
    for g in &added {
        next.push(*g);
    }
    // rows of `next` map to old rows (`Some`) or fresh ones (`None`)
    let mut origin: Vec<Option<usize>> = keep.iter().copied().map(Some).chain(added.iter().map(|_| None)).collect();

    let survivors: Vec<usize> = (0..next.len())
        .filter(|&j| sigmoid(next.opacity_logits[j]) >= cfg.prune_opacity)
        .collect();
    outcome.pruned = next.len() - survivors.len();
    if outcome.pruned > 0 {
        next = next.select(&survivors);
        origin = survivors.iter().map(|&j| origin[j]).collect();
    }

    keep = origin.iter().filter_map(|o| *o).collect();
    let fresh = origin.iter().filter(|o| o.is_none()).count();
    debug_assert!(origin.iter().take(keep.len()).all(|o| o.is_some()));
    optim.reshape(&keep, fresh);
    *gs = next;
    *stats = DensityStats::new(gs.len());
    outcome
}
