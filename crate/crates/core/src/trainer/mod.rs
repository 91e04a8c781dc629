//! Two-phase optimization of canonical Gaussians and the deformation field.
//!
//! Phase one fits a static model to the earliest frames with the photometric
//! and depth losses. Phase two deforms the Gaussians per timestamp and adds
//! the event and temporal smoothness terms.

pub mod config;
pub mod density;
pub mod loss;

use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{SensorDataset, Split};
use crate::deform::{DeformationField, FieldGrad};
use crate::events::{accumulate_window, event_loss_with_grad, predicted_log_diff, predicted_log_diff_vjp, sample_window};
use crate::optim::{exponential_decay, Adam};
use crate::raster::{render, render_vjp, RenderOutput, RenderUpstream};
use crate::scene::{logit, normalize_quat, Camera, Gaussian, GaussianGrad, GaussianSet, Vec3};
use crate::{Error, Result};

pub use config::{DensifyConfig, LearningRates, LossWeights, TrainConfig};
pub use density::{densify_and_prune, DensityStats, DensifyOutcome};
pub use loss::{depth_loss, rgb_loss, total_loss, LossComponents, LossReport};

/// Initial opacity of seeded Gaussians.
pub const INIT_OPACITY: f64 = 0.1;
/// Dilation of the initial point bounds used for the feature grids.
pub const GRID_BOUNDS_DILATION: f64 = 0.05;

/// Adam state for the five per-Gaussian parameter groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianOptim {
    pub means: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub opacities: Adam,
    pub colors: Adam,
}

impl GaussianOptim {
    pub fn new(n: usize) -> Self {
        Self {
            means: Adam::new(3 * n),
            rotations: Adam::new(4 * n),
            log_scales: Adam::new(3 * n),
            opacities: Adam::new(n),
            colors: Adam::new(3 * n),
        }
    }

    /// Keeps rows `keep` then appends `added` zero-moment rows.
    pub fn reshape(&mut self, keep: &[usize], added: usize) {
        self.means.reshape_rows(3, keep, added);
        self.rotations.reshape_rows(4, keep, added);
        self.log_scales.reshape_rows(3, keep, added);
        self.opacities.reshape_rows(1, keep, added);
        self.colors.reshape_rows(3, keep, added);
    }

    pub fn groups(&self) -> [&Adam; 5] {
        [&self.means, &self.rotations, &self.log_scales, &self.opacities, &self.colors]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldOptim {
    pub grids: Adam,
    pub decoder: Adam,
}

/// Everything that changes during training; saved in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub gaussians: GaussianSet,
    pub field: DeformationField,
    pub gaussian_optim: GaussianOptim,
    pub field_optim: FieldOptim,
    pub density: DensityStats,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Static,
    Full,
}

/// The samples drawn for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Batch {
    pub phase: Phase,
    /// Index into the dataset's RGB frames.
    pub frame: usize,
    pub window: Option<(f64, f64)>,
}

/// Gradients of the total loss for one batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub report: LossReport,
    pub gaussians: Vec<GaussianGrad>,
    pub field: Option<FieldGrad>,
    /// Screen-space mean gradient norm (normalized device units) of every
    /// Gaussian visible in the sampled view.
    pub view_grad: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Step number after the update (1-based).
    pub step: u64,
    pub phase: Phase,
    pub loss: LossReport,
    pub gaussians: usize,
    pub densify: Option<DensifyOutcome>,
}

/// Read-only training context over one dataset.
pub struct Trainer<'a> {
    pub dataset: &'a SensorDataset,
    pub config: TrainConfig,
    background: [f64; 3],
    train_frames: Vec<usize>,
    static_frames: Vec<usize>,
    depth_pairs: Vec<Option<usize>>,
    depth_valid: Vec<Vec<bool>>,
}

fn same_camera(a: &Camera, b: &Camera) -> bool {
    a.intrinsics() == b.intrinsics() && a.rotation == b.rotation && a.translation == b.translation
}

fn flatten<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> Vec<f64> {
    rows.flatten().collect()
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a SensorDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let train_frames = dataset.rgb_in(Split::Train);
        if train_frames.is_empty() {
            return Err(Error::Validation(vec!["dataset has no training frames".into()]));
        }
        if config.l_max > dataset.meta.span && config.weights.event > 0.0 {
            return Err(Error::Config(format!(
                "l_max {} exceeds the capture span {}",
                config.l_max, dataset.meta.span
            )));
        }
        let t0 = train_frames
            .iter()
            .map(|&i| dataset.rgb[i].camera.timestamp)
            .fold(f64::INFINITY, f64::min);
        let mut train_frames = train_frames;
        train_frames.sort_by(|&a, &b| dataset.rgb[a].camera.timestamp.total_cmp(&dataset.rgb[b].camera.timestamp).then(a.cmp(&b)));
        let static_frames = train_frames
            .iter()
            .copied()
            .filter(|&i| dataset.rgb[i].camera.timestamp == t0)
            .collect();
        let depth_pairs = (0..dataset.rgb.len()).map(|i| dataset.paired_depth(i)).collect();
        let depth_valid = dataset.depth.iter().map(|d| d.validity()).collect();
        let background = config.background.unwrap_or(dataset.meta.background);
        Ok(Self {
            dataset,
            config,
            background,
            train_frames,
            static_frames,
            depth_pairs,
            depth_valid,
        })
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    /// Length scale for density control and the position learning rate.
    pub fn extent(&self) -> f64 {
        0.5 * self.dataset.meta.scene_diameter
    }

    pub fn normalized_time(&self, t: f64) -> f64 {
        (t / self.dataset.meta.span).clamp(0.0, 1.0)
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.config.static_steps {
            Phase::Static
        } else {
            Phase::Full
        }
    }

    /// Seeds Gaussians by back-projecting the earliest training depth maps
    /// of every view, subsampled with a fixed stride.
    pub fn init_state(&self) -> Result<TrainState> {
        let ds = self.dataset;
        let t0 = ds.rgb[self.static_frames[0]].camera.timestamp;
        let mut points: Vec<([f64; 3], [f64; 3])> = Vec::new();
        for (di, d) in ds.depth.iter().enumerate() {
            if d.split != Split::Train || d.camera.timestamp != t0 {
                continue;
            }
            let rgb = self
                .static_frames
                .iter()
                .copied()
                .find(|&i| self.depth_pairs[i] == Some(di))
                .or_else(|| self.static_frames.first().copied())
                .map(|i| &ds.rgb[i]);
            let cam = &d.camera;
            for y in 0..d.depth.height() {
                for x in 0..d.depth.width() {
                    let z = *d.depth.get(x, y);
                    if !self.depth_valid[di][y * d.depth.width() + x] {
                        continue;
                    }
                    let pc = Vec3::new((x as f64 - cam.cx) / cam.fx * z, (y as f64 - cam.cy) / cam.fy * z, z);
                    let pw = cam.rotation.transpose() * (pc - cam.translation);
                    let color = rgb.map_or([0.5; 3], |f| sample_nearest(&f.image, &f.camera, &pw));
                    points.push(([pw[0], pw[1], pw[2]], color));
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Validation(vec![format!(
                "no valid depth pixels in the training frames at t = {t0}"
            )]));
        }
        let stride = points.len().div_ceil(self.config.init_points);
        let points: Vec<_> = points.into_iter().step_by(stride).collect();
        let positions: Vec<[f64; 3]> = points.iter().map(|p| p.0).collect();
        let spacing = knn_mean_distance(&positions, 3);
        let gaussians: GaussianSet = points
            .iter()
            .zip(&spacing)
            .map(|((mean, color), &d)| Gaussian {
                mean: *mean,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [d.max(1e-4).ln(); 3],
                opacity_logit: logit(INIT_OPACITY),
                color_logit: color.map(|c| logit(c.clamp(0.02, 0.98))),
            })
            .collect();
        let (lo, hi) = DeformationField::dilated_bounds(&positions, GRID_BOUNDS_DILATION);
        let field = DeformationField::new(
            lo,
            hi,
            self.config.field_config(),
            self.config.seed ^ 0x5eed_f1e1_d000_0000,
        )?;
        let n = gaussians.len();
        info!("initialized {n} gaussians from depth at t = {t0}");
        Ok(TrainState {
            step: 0,
            field_optim: FieldOptim {
                grids: Adam::new(field.grids.data.len()),
                decoder: Adam::new(field.decoder.params.len()),
            },
            gaussians,
            field,
            gaussian_optim: GaussianOptim::new(n),
            density: DensityStats::new(n),
            rng: ChaCha8Rng::seed_from_u64(self.config.seed),
        })
    }

    /// Latest capture time sampled at `step`. The horizon widens linearly
    /// from the earliest frame to the full span over the first
    /// `time_curriculum` steps of the second phase.
    pub fn time_horizon(&self, step: u64) -> f64 {
        let span = self.dataset.meta.span;
        let ramp = self.config.time_curriculum;
        if ramp == 0 || step < self.config.static_steps {
            return span;
        }
        let t0 = self.dataset.rgb[self.static_frames[0]].camera.timestamp;
        let frac = ((step - self.config.static_steps + 1) as f64 / ramp as f64).min(1.0);
        t0 + (span - t0) * frac
    }

    pub fn sample_batch(&self, state: &mut TrainState) -> Result<Batch> {
        let phase = self.phase_at(state.step);
        let horizon = self.time_horizon(state.step);
        let pool = match phase {
            Phase::Static => &self.static_frames[..],
            Phase::Full => {
                let end = self
                    .train_frames
                    .partition_point(|&i| self.dataset.rgb[i].camera.timestamp <= horizon);
                &self.train_frames[..end.max(1)]
            }
        };
        let frame = pool[state.rng.random_range(0..pool.len())];
        let window = if phase == Phase::Full && self.config.weights.event > 0.0 {
            Some(sample_window(
                &mut state.rng,
                self.config.l_min,
                self.config.l_max,
                horizon.max(self.config.l_max),
            )?)
        } else {
            None
        };
        Ok(Batch { phase, frame, window })
    }

    fn geometry_at(
        &self,
        state: &TrainState,
        phase: Phase,
        t: f64,
    ) -> Result<(GaussianSet, Option<crate::deform::DeformTape>)> {
        match phase {
            Phase::Static => Ok((state.gaussians.clone(), None)),
            Phase::Full => {
                let (gs, tape) = state.field.deform_with_tape(&state.gaussians, self.normalized_time(t))?;
                Ok((gs, Some(tape)))
            }
        }
    }

    fn to_canonical(
        &self,
        state: &TrainState,
        tape: Option<&crate::deform::DeformTape>,
        grads: Vec<GaussianGrad>,
        field_grad: &mut Option<FieldGrad>,
        acc: &mut [GaussianGrad],
    ) -> Result<()> {
        let grads = match (tape, field_grad.as_mut()) {
            (Some(tape), Some(fg)) => state.field.deform_vjp(&state.gaussians, tape, &grads, fg)?,
            _ => grads,
        };
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.add_assign(g);
        }
        Ok(())
    }

    /// Loss and gradients for one batch without touching the parameters.
    pub fn gradients(&self, state: &TrainState, batch: &Batch) -> Result<StepGradients> {
        let ds = self.dataset;
        let w = self.config.weights;
        let n = state.gaussians.len();
        let mut acc = vec![GaussianGrad::default(); n];
        let mut field_grad = (batch.phase == Phase::Full).then(|| FieldGrad::zeros(&state.field));
        let mut comps = LossComponents::default();

        // view render: rgb plus depth
        let frame = &ds.rgb[batch.frame];
        let (gs_t, tape) = self.geometry_at(state, batch.phase, frame.camera.timestamp)?;
        let out = render(&gs_t, &frame.camera, self.background)?;
        let (l_rgb, mut g_rgb) = loss::rgb_loss_with_grad(&frame.image, &out.color)?;
        comps.rgb = l_rgb;
        g_rgb.pixels_mut().iter_mut().for_each(|c| *c = c.map(|v| v * w.rgb));

        let mut depth_up = None;
        let mut depth_extra: Option<(Camera, RenderOutput, crate::GrayImage)> = None;
        if let Some(di) = self.depth_pairs[batch.frame] {
            let d = &ds.depth[di];
            let shared = same_camera(&d.camera, &frame.camera);
            let separate = if shared { None } else { Some(render(&gs_t, &d.camera, self.background)?) };
            let pred = separate.as_ref().map_or(&out.depth, |o| &o.depth);
            let (l_depth, mut g_depth) = loss::depth_loss_with_grad(&d.depth, pred, &self.depth_valid[di])?;
            comps.depth = l_depth;
            if w.depth > 0.0 {
                g_depth.pixels_mut().iter_mut().for_each(|v| *v *= w.depth);
                match separate {
                    None => depth_up = Some(g_depth),
                    Some(o) => depth_extra = Some((d.camera.clone(), o, g_depth)),
                }
            }
        }
        let up = RenderUpstream {
            color: (w.rgb > 0.0).then_some(&g_rgb),
            depth: depth_up.as_ref(),
            alpha: None,
        };
        let view_grads = render_vjp(&gs_t, &frame.camera, &out, &up)?;
        let (hw, hh) = (0.5 * frame.camera.width as f64, 0.5 * frame.camera.height as f64);
        let mut view_grad: Vec<Option<f64>> = (0..n)
            .map(|i| {
                out.is_visible(i).then(|| {
                    let [gx, gy] = view_grads.mean2[i];
                    (gx * hw).hypot(gy * hh)
                })
            })
            .collect();
        let mut gs_grads = view_grads.gaussians;
        if let Some((cam, o, g_depth)) = depth_extra {
            let up = RenderUpstream {
                depth: Some(&g_depth),
                ..Default::default()
            };
            let extra = render_vjp(&gs_t, &cam, &o, &up)?;
            for (a, g) in gs_grads.iter_mut().zip(&extra.gaussians) {
                a.add_assign(g);
            }
        }
        self.to_canonical(state, tape.as_ref(), gs_grads, &mut field_grad, &mut acc)?;

        // event window rendered from the event camera
        if let (Phase::Full, Some((t_s, t_e))) = (batch.phase, batch.window) {
            let cam_s = ds.event_camera(t_s)?;
            let cam_e = cam_s.at_time(t_e);
            let (gs_s, tape_s) = self.geometry_at(state, batch.phase, t_s)?;
            let (gs_e, tape_e) = self.geometry_at(state, batch.phase, t_e)?;
            let out_s = render(&gs_s, &cam_s, self.background)?;
            let out_e = render(&gs_e, &cam_e, self.background)?;
            let pred = predicted_log_diff(&out_s.color, &out_e.color)?;
            let window = accumulate_window(&ds.events, t_s, t_e, ds.meta.contrast_threshold)?;
            let (l_event, mut g_pred) = event_loss_with_grad(&window, &pred)?;
            comps.event = l_event.value;
            g_pred.pixels_mut().iter_mut().for_each(|v| *v *= w.event);
            let (g_s, g_e) = predicted_log_diff_vjp(&out_s.color, &out_e.color, &g_pred)?;
            for (gs_x, cam, o, g, tape) in [(&gs_s, &cam_s, &out_s, &g_s, &tape_s), (&gs_e, &cam_e, &out_e, &g_e, &tape_e)] {
                let up = RenderUpstream {
                    color: Some(g),
                    ..Default::default()
                };
                let grads = render_vjp(gs_x, cam, o, &up)?;
                self.to_canonical(state, tape.as_ref(), grads.gaussians, &mut field_grad, &mut acc)?;
            }
        }

        if let Some(fg) = field_grad.as_mut() {
            comps.smooth = state
                .field
                .grids
                .smoothness_with_grad((w.smooth > 0.0).then_some((&mut fg.grids[..], w.smooth)))?;
        }

        let report = total_loss(&comps, &w)?;
        if view_grad.len() != n {
            view_grad.resize(n, None);
        }
        Ok(StepGradients {
            report,
            gaussians: acc,
            field: field_grad,
            view_grad,
        })
    }

    /// Applies one Adam update for `grads`.
    pub fn apply(&self, state: &mut TrainState, grads: &StepGradients) -> Result<()> {
        let lr = &self.config.lr;
        let frac = state.step as f64 / self.config.total_steps.max(1) as f64;
        let lr_pos = exponential_decay(lr.position, lr.position_final.max(f64::MIN_POSITIVE), frac) * self.extent();
        let gs = &mut state.gaussians;
        let opt = &mut state.gaussian_optim;
        let g = &grads.gaussians;
        opt.means.step(gs.means.as_flattened_mut(), &flatten(g.iter().map(|x| x.mean)), lr_pos);
        let before = gs.rotations.clone();
        opt.rotations.step(gs.rotations.as_flattened_mut(), &flatten(g.iter().map(|x| x.rotation)), lr.rotation);
        for (r, old) in gs.rotations.iter_mut().zip(&before) {
            if r != old {
                *r = normalize_quat(*r).map_err(|_| Error::Numerical("rotation collapsed to zero norm".into()))?;
            }
        }
        opt.log_scales.step(gs.log_scales.as_flattened_mut(), &flatten(g.iter().map(|x| x.log_scale)), lr.scale);
        let g_op: Vec<f64> = g.iter().map(|x| x.opacity_logit).collect();
        opt.opacities.step(&mut gs.opacity_logits, &g_op, lr.opacity);
        opt.colors.step(gs.color_logits.as_flattened_mut(), &flatten(g.iter().map(|x| x.color_logit)), lr.color);
        if let Some(fg) = &grads.field {
            state.field_optim.grids.step(&mut state.field.grids.data, &fg.grids, lr.grid);
            state.field_optim.decoder.step(&mut state.field.decoder.params, &fg.decoder, lr.decoder);
        }
        state.gaussians.check_finite().map_err(|e| Error::Numerical(format!("after step {}: {e}", state.step + 1)))?;
        Ok(())
    }

    /// Samples, differentiates and updates once, then densifies on schedule.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        let batch = self.sample_batch(state)?;
        let grads = self.gradients(state, &batch)?;
        self.apply(state, &grads)?;
        for (i, g) in grads.view_grad.iter().enumerate() {
            if let Some(g) = g {
                state.density.record(i, *g);
            }
        }
        state.step += 1;
        let d = &self.config.densify;
        let mut densify = None;
        if state.step >= d.from_step && state.step <= d.until_step && state.step % d.interval == 0 {
            let outcome = densify_and_prune(
                &mut state.gaussians,
                &mut state.gaussian_optim,
                &mut state.density,
                d,
                self.extent(),
            );
            debug!("step {}: {outcome:?}, {} gaussians", state.step, state.gaussians.len());
            densify = Some(outcome);
        }
        Ok(StepReport {
            step: state.step,
            phase: batch.phase,
            loss: grads.report,
            gaussians: state.gaussians.len(),
            densify,
        })
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn train(
        &self,
        state: &mut TrainState,
        mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let mut history = Vec::new();
        while state.step < self.config.total_steps {
            let report = self.step(state)?;
            on_step(state, &report)?;
            history.push(report);
        }
        Ok(history)
    }

    /// Canonical Gaussians deformed to absolute time `t`.
    pub fn gaussians_at(&self, state: &TrainState, t: f64) -> Result<GaussianSet> {
        deformed_at(state, self.dataset.meta.span, t)
    }
}

/// Canonical Gaussians of `state` deformed to time `t` of a capture lasting
/// `span` seconds. The field is left out before the static phase ends.
pub fn deformed_at(state: &TrainState, span: f64, t: f64) -> Result<GaussianSet> {
    state.field.deform(&state.gaussians, (t / span).clamp(0.0, 1.0))
}

fn sample_nearest(img: &crate::RgbImage, cam: &Camera, p: &Vec3) -> [f64; 3] {
    let pc = cam.world_to_camera(p);
    if pc[2] <= 0.0 {
        return [0.5; 3];
    }
    let x = (cam.fx * pc[0] / pc[2] + cam.cx).round();
    let y = (cam.fy * pc[1] / pc[2] + cam.cy).round();
    if x < 0.0 || y < 0.0 || x >= img.width() as f64 || y >= img.height() as f64 {
        return [0.5; 3];
    }
    *img.get(x as usize, y as usize)
}

/// Mean distance from each point to its `k` nearest neighbours.
pub fn knn_mean_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    use rayon::prelude::*;
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let p = &points[i];
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                0.01
            } else {
                found.iter().sum::<f64>() / found.len() as f64
            }
        })
        .collect()
}

pub const LOSS_CSV_HEADER: &str = "step,l_rgb,l_event,l_depth,l_g,total";

pub fn loss_csv_row(r: &StepReport) -> String {
    let c = &r.loss.components;
    format!("{},{},{},{},{},{}", r.step, c.rgb, c.event, c.depth, c.smooth, r.loss.total)
}

/// Writes the loss history; appends (without a header) when `append` is set
/// and the file exists.
pub fn write_loss_csv(path: &Path, history: &[StepReport], append: bool) -> Result<()> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(crate::Error::file(path))?;
    let mut text = String::new();
    if !(append && exists) {
        text.push_str(LOSS_CSV_HEADER);
        text.push('\n');
    }
    for r in history {
        text.push_str(&loss_csv_row(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(crate::Error::file(path))
}
