//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `EVSPLAT_ACCEPTANCE=1,2,5` runs a subset; the training criteria (3, 4, 6
//! and 8) share one default run and take most of the time.

use std::collections::BTreeSet;
use std::time::Instant;

use evsplat_core::dataset::checkpoint::encode_checkpoint;
use evsplat_core::dataset::generator::{build_tiny_scene, event_frames, SCENES};
use evsplat_core::dataset::{load_dataset, write_dataset, Checkpoint, SceneSpec, SensorDataset, Split};
use evsplat_core::deform::{DeformationField, FieldConfig, PLANE_AXES};
use evsplat_core::events::{accumulate_window, event_loss, predicted_log_diff, EventWindow};
use evsplat_core::metrics::evaluate;
use evsplat_core::raster::{render, render_vjp, RenderOutput, RenderUpstream, DEPTH_ALPHA_FLOOR};
use evsplat_core::scene::{
    project_gaussian, project_gaussian_vjp, Camera, Gaussian, GaussianGrad, GaussianSet, Intrinsics, ProjectedGrad,
    Sym2, Vec3,
};
use evsplat_core::simulator::{simulate, FrameSequence};
use evsplat_core::trainer::loss::{depth_loss_with_grad, rgb_loss_with_grad};
use evsplat_core::trainer::{LossWeights, StepReport, TrainConfig, TrainState, Trainer};
use evsplat_core::{GrayImage, Image, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const PARAMS: usize = 14;

fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..3 => &mut g.mean[k],
        3..7 => &mut g.rotation[k - 3],
        7..10 => &mut g.log_scale[k - 7],
        10 => &mut g.opacity_logit,
        _ => &mut g.color_logit[k - 11],
    }
}

fn grad_param(g: &GaussianGrad, k: usize) -> f64 {
    match k {
        0..3 => g.mean[k],
        3..7 => g.rotation[k - 3],
        7..10 => g.log_scale[k - 7],
        10 => g.opacity_logit,
        _ => g.color_logit[k - 11],
    }
}

fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera {
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

fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64) -> Gaussian {
    let mut q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
    q[0] += 1.5;
    Gaussian {
        mean: [0; 3].map(|_| rng.random_range(-spread..spread)),
        rotation: q,
        log_scale: [0; 3].map(|_| rng.random_range(-2.0f64..-0.6)),
        opacity_logit: rng.random_range(-1.0..2.0),
        color_logit: [0; 3].map(|_| rng.random_range(-2.0..2.0)),
    }
}

/// Blend order per pixel and where depth is normalized; the image is smooth
/// in the parameters while this stays fixed.
fn structure(out: &RenderOutput) -> Vec<(Vec<u32>, bool)> {
    (0..out.height())
        .flat_map(|y| (0..out.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let ids = out.blend_records(x, y).iter().map(|r| r.gaussian).collect();
            (ids, *out.alpha.get(x, y) > DEPTH_ALPHA_FLOOR)
        })
        .collect()
}

struct Tally {
    checked: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Tally { checked: 0, skipped: 0, worst: 0.0 }
    }

    fn check(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric));
    }
}

/// Projection alone: a random linear functional of the screen-space outputs.
fn projection_gradients(rng: &mut ChaCha8Rng, tally: &mut Tally) {
    for _ in 0..100 {
        let cam = random_camera(rng, 24, 20);
        let g = random_gaussian(rng, 0.8);
        let up = ProjectedGrad {
            mean2: [0; 2].map(|_| rng.random_range(-1.0..1.0)),
            cov2: Sym2 {
                xx: rng.random_range(-1.0..1.0),
                xy: rng.random_range(-1.0..1.0),
                yy: rng.random_range(-1.0..1.0),
            },
            z_cam: rng.random_range(-1.0..1.0),
        };
        let objective = |g: &Gaussian| {
            let p = project_gaussian(g, &cam);
            p.mean2[0] * up.mean2[0]
                + p.mean2[1] * up.mean2[1]
                + p.cov2.xx * up.cov2.xx
                + p.cov2.xy * up.cov2.xy
                + p.cov2.yy * up.cov2.yy
                + p.z_cam * up.z_cam
        };
        if !project_gaussian(&g, &cam).valid {
            continue;
        }
        let grad = project_gaussian_vjp(&g, &cam, &up);
        // opacity and color do not enter the projection
        for k in 0..10 {
            let (mut plus, mut minus) = (g, g);
            let h = fd_step(*param_mut(&mut plus, k));
            *param_mut(&mut plus, k) += h;
            *param_mut(&mut minus, k) -= h;
            tally.check(grad_param(&grad, k), (objective(&plus) - objective(&minus)) / (2.0 * h));
        }
    }
}

/// Projection, rasterization and L1 photometric and depth losses against
/// random targets, plus a linear term on the alpha image.
fn render_gradients(rng: &mut ChaCha8Rng, tally: &mut Tally) {
    for _ in 0..100 {
        let (w, h) = (24, 20);
        let cam = random_camera(rng, w, h);
        let n = rng.random_range(1..5);
        let gs: GaussianSet = (0..n).map(|_| random_gaussian(rng, 0.6)).collect();
        let bg = [0.1, 0.2, 0.3];
        let gt_color = RgbImage::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random_range(0.0..1.0)));
        let gt_depth = GrayImage::from_fn(w, h, |_, _| rng.random_range(2.0..6.0));
        let valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let wa = GrayImage::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
        let signs = |out: &RenderOutput| -> Vec<bool> {
            let c = out.color.pixels().iter().zip(gt_color.pixels()).flat_map(|(p, g)| (0..3).map(move |k| p[k] > g[k]));
            c.chain(out.depth.pixels().iter().zip(gt_depth.pixels()).map(|(p, g)| p > g)).collect()
        };
        let objective = |out: &RenderOutput| {
            let lc = rgb_loss_with_grad(&gt_color, &out.color).unwrap().0;
            let ld = depth_loss_with_grad(&gt_depth, &out.depth, &valid).unwrap().0;
            let la: f64 = out.alpha.pixels().iter().zip(wa.pixels()).map(|(a, b)| a * b).sum();
            lc + ld + la
        };
        let out = render(&gs, &cam, bg).unwrap();
        let (base, base_signs) = (structure(&out), signs(&out));
        let (_, dc) = rgb_loss_with_grad(&gt_color, &out.color).unwrap();
        let (_, dd) = depth_loss_with_grad(&gt_depth, &out.depth, &valid).unwrap();
        let up = RenderUpstream {
            color: Some(&dc),
            depth: Some(&dd),
            alpha: Some(&wa),
        };
        let grads = render_vjp(&gs, &cam, &out, &up).unwrap();
        for i in 0..n {
            for k in 0..PARAMS {
                let mut plus = gs.get(i);
                let mut minus = plus;
                let step = fd_step(*param_mut(&mut plus, k));
                *param_mut(&mut plus, k) += step;
                *param_mut(&mut minus, k) -= step;
                let (mut a, mut b) = (gs.clone(), gs.clone());
                a.set(i, plus);
                b.set(i, minus);
                let (oa, ob) = (render(&a, &cam, bg).unwrap(), render(&b, &cam, bg).unwrap());
                let smooth = [&oa, &ob].iter().all(|o| structure(o) == base && signs(o) == base_signs);
                if !smooth {
                    tally.skipped += 1;
                    continue;
                }
                tally.check(grad_param(&grads.gaussians[i], k), (objective(&oa) - objective(&ob)) / (2.0 * step));
            }
        }
    }
}

/// Deformation alone: a random linear functional of the deformed Gaussians.
fn deformation_gradients(rng: &mut ChaCha8Rng, tally: &mut Tally) {
    let cfg = FieldConfig {
        spatial_res: 5,
        time_res: 4,
        features: 3,
        width: 12,
        depth: 2,
        time_freqs: 2,
    };
    for case in 0..100u64 {
        let mut field = DeformationField::new([-1.0; 3], [1.0; 3], cfg.clone(), case).unwrap();
        field.grids.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        field.decoder.params.iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
        let gs: GaussianSet = (0..3).map(|_| random_gaussian(rng, 0.8)).collect();
        let t = rng.random_range(0.05..0.95);
        let up: Vec<GaussianGrad> = (0..gs.len())
            .map(|_| GaussianGrad {
                mean: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
                rotation: [0; 4].map(|_| rng.random_range(-1.0..1.0)),
                log_scale: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
                opacity_logit: rng.random_range(-1.0..1.0),
                color_logit: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let objective = |f: &DeformationField, gs: &GaussianSet| {
            let out = f.deform(gs, t).unwrap();
            out.iter().zip(&up).map(|(g, u)| (0..PARAMS).map(|k| *param_mut(&mut g.clone(), k) * grad_param(u, k)).sum::<f64>()).sum::<f64>()
        };
        let (_, tape) = field.deform_with_tape(&gs, t).unwrap();
        let mut fg = evsplat_core::deform::FieldGrad::zeros(&field);
        let canonical = field.deform_vjp(&gs, &tape, &up, &mut fg).unwrap();
        let f0 = objective(&field, &gs);
        let mut probe = |fp: f64, fm: f64, h: f64, analytic: f64| {
            // a ReLU kink inside the stencil shows up as a large second difference
            if (fp - 2.0 * f0 + fm).abs() > 1e-3 * (fp - fm).abs().max(1e-9) {
                tally.skipped += 1;
            } else {
                tally.check(analytic, (fp - fm) / (2.0 * h));
            }
        };
        let i = rng.random_range(0..gs.len());
        let k = rng.random_range(0..PARAMS);
        let (mut a, mut b) = (gs.clone(), gs.clone());
        let (mut plus, mut minus) = (gs.get(i), gs.get(i));
        let h = fd_step(*param_mut(&mut plus, k));
        *param_mut(&mut plus, k) += h;
        *param_mut(&mut minus, k) -= h;
        a.set(i, plus);
        b.set(i, minus);
        probe(objective(&field, &a), objective(&field, &b), h, grad_param(&canonical[i], k));
        for _ in 0..2 {
            let idx = rng.random_range(0..field.grids.data.len());
            let (mut a, mut b) = (field.clone(), field.clone());
            let h = fd_step(a.grids.data[idx]);
            a.grids.data[idx] += h;
            b.grids.data[idx] -= h;
            probe(objective(&a, &gs), objective(&b, &gs), h, fg.grids[idx]);
            let idx = rng.random_range(0..field.decoder.params.len());
            let (mut a, mut b) = (field.clone(), field.clone());
            let h = fd_step(a.decoder.params[idx]);
            a.decoder.params[idx] += h;
            b.decoder.params[idx] -= h;
            probe(objective(&a, &gs), objective(&b, &gs), h, fg.decoder[idx]);
        }
    }
}

/// The whole training objective (deformation, render, RGB, event, depth and
/// smoothness terms) on small random states of a tiny scene.
fn end_to_end_gradients(rng: &mut ChaCha8Rng, tally: &mut Tally) {
    let ds = build_tiny_scene(&SceneSpec {
        views: 3,
        timestamps: 6,
        resolution: 8,
        focal: 10.0,
        supersample: 2,
        event_rate: 4,
        ..SceneSpec::new("orbiting_two_ball")
    })
    .unwrap();
    let cfg = TrainConfig {
        weights: LossWeights {
            rgb: 1.0,
            event: 0.5,
            depth: 0.5,
            smooth: 0.1,
        },
        static_steps: 0,
        total_steps: 30,
        init_points: 150,
        time_curriculum: 0,
        field: FieldConfig {
            spatial_res: 6,
            time_res: 5,
            features: 4,
            width: 16,
            depth: 2,
            time_freqs: 2,
        },
        ..Default::default()
    };
    let trainer = Trainer::new(&ds, cfg).unwrap();
    for _ in 0..10 {
        let mut state = trainer.init_state().unwrap();
        state.gaussians = (0..3)
            .map(|_| {
                let mut g = random_gaussian(rng, 0.5);
                g.log_scale = g.log_scale.map(|s| s + 0.8);
                g
            })
            .collect();
        state.field.grids.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        state.field.decoder.params.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        let batch = trainer.sample_batch(&mut state).unwrap();
        let grads = trainer.gradients(&state, &batch).unwrap();
        let field = grads.field.as_ref().unwrap();
        let f0 = grads.report.total;
        let loss_with = |edit: &dyn Fn(&mut TrainState)| {
            let mut s = state.clone();
            edit(&mut s);
            trainer.gradients(&s, &batch).unwrap().report.total
        };
        let mut probe = |analytic: f64, edit: &dyn Fn(&mut TrainState, f64)| {
            let h = fd_step(0.0);
            let fp = loss_with(&|s| edit(s, h));
            let fm = loss_with(&|s| edit(s, -h));
            // L1 residual signs, ReLUs and footprint cutoffs are kinks
            if (fp - 2.0 * f0 + fm).abs() > 1e-2 * (fp - fm).abs().max(1e-9) {
                tally.skipped += 1;
            } else {
                tally.check(analytic, (fp - fm) / (2.0 * h));
            }
        };
        for _ in 0..14 {
            let (i, k) = (rng.random_range(0..3), rng.random_range(0..PARAMS));
            probe(grad_param(&grads.gaussians[i], k), &|s, h| {
                let mut g = s.gaussians.get(i);
                *param_mut(&mut g, k) += h;
                s.gaussians.set(i, g);
            });
        }
        for _ in 0..3 {
            let idx = rng.random_range(0..state.field.grids.data.len());
            probe(field.grids[idx], &|s, h| s.field.grids.data[idx] += h);
            let idx = rng.random_range(0..state.field.decoder.params.len());
            probe(field.decoder[idx], &|s, h| s.field.decoder.params[idx] += h);
        }
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut module = Tally::new();
    projection_gradients(&mut rng, &mut module);
    render_gradients(&mut rng, &mut module);
    deformation_gradients(&mut rng, &mut module);
    let mut e2e = Tally::new();
    end_to_end_gradients(&mut rng, &mut e2e);
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "module: {} probes, worst rel err {:.2e} ({} skipped at kinks); end-to-end: {} probes, worst {:.2e} ({} skipped); {secs:.0} s",
        module.checked, module.worst, module.skipped, e2e.checked, e2e.worst, e2e.skipped
    );
    let ok = module.worst < 1e-3 && e2e.worst < 1e-2 && module.checked >= 100 && e2e.checked >= 100 && secs < 120.0;
    if ok { Ok(msg) } else { Err(msg) }
}

fn event_round_trip() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut events = 0;
    for name in SCENES {
        let spec = SceneSpec::new(name);
        let seq = event_frames(&spec).map_err(|e| e.to_string())?;
        let stream = simulate(&seq, spec.contrast).map_err(|e| e.to_string())?;
        events += stream.len();
        let window = accumulate_window(&stream, -1.0, spec.span, spec.contrast).map_err(|e| e.to_string())?;
        let frames = seq.frames();
        let truth = predicted_log_diff(&frames[0], &frames[frames.len() - 1]).map_err(|e| e.to_string())?;
        for (r, t) in window.delta_l.pixels().iter().zip(truth.pixels()) {
            worst = worst.max((r - t).abs() / spec.contrast);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("{} scenes, {events} events, worst error {worst:.3} C, {secs:.1} s", SCENES.len());
    if worst < 1.0 && secs < 30.0 { Ok(msg) } else { Err(msg) }
}

fn neutralization_mask() -> Outcome {
    let contrast = 0.2;
    let (w, h) = (8, 8);
    // log-intensity offsets at five instants: quiet, oscillating (one event
    // each way, net change -0.9 C) and steadily brightening pixels
    let profile = |x: usize, y: usize| -> [f64; 5] {
        match (x + y) % 4 {
            0 | 2 => [0.0, 0.6, 1.2, 0.2, -0.9],
            1 => [0.0; 5],
            _ => [0.0, 0.5, 1.0, 1.5, 2.05],
        }
        .map(|v| v * contrast)
    };
    let base = 0.3;
    let frames = (0..5)
        .map(|k| {
            RgbImage::from_fn(w, h, |x, y| {
                let l = (base + 1e-3f64).ln() + profile(x, y)[k];
                [l.exp() - 1e-3; 3]
            })
        })
        .collect::<Vec<_>>();
    let ts = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let seq = FrameSequence::new(frames.clone(), ts).map_err(|e| e.to_string())?;
    let stream = simulate(&seq, contrast).map_err(|e| e.to_string())?;
    let masked = accumulate_window(&stream, -1.0, 1.0, contrast).map_err(|e| e.to_string())?;
    let unmasked = EventWindow {
        mask: Image::filled(w, h, 1u8),
        ..masked.clone()
    };
    let correct = predicted_log_diff(&frames[0], &frames[4]).map_err(|e| e.to_string())?;
    let lm = event_loss(&masked, &correct).map_err(|e| e.to_string())?.value;
    let lu = event_loss(&unmasked, &correct).map_err(|e| e.to_string())?.value;
    let neutral = masked.mask.pixels().iter().filter(|&&m| m == 0).count();
    let msg = format!("{neutral} neutralized pixels, masked {lm:.3e} vs unmasked {lu:.3e} ({:.2}%)", 100.0 * lm / lu);
    if lu > 0.0 && lm < 0.1 * lu && neutral > 0 { Ok(msg) } else { Err(msg) }
}

fn regularizer_analytics() -> Outcome {
    let cfg = FieldConfig {
        spatial_res: 4,
        time_res: 6,
        features: 2,
        width: 8,
        depth: 1,
        time_freqs: 1,
    };
    let mut field = DeformationField::new([-1.0; 3], [1.0; 3], cfg, 3).map_err(|e| e.to_string())?;
    let tr = field.grids.time_res;
    let mut got = Vec::new();
    for (profile, expected) in [
        (Box::new(|_: usize| 3.0) as Box<dyn Fn(usize) -> f64>, 0.0),
        (Box::new(|j: usize| 0.5 * j as f64 - 1.0), 0.0),
        (Box::new(|j: usize| (j * j) as f64), 4.0),
    ] {
        for (k, &(a, _)) in PLANE_AXES.iter().enumerate().skip(3) {
            for i in 0..field.grids.res(a) {
                for j in 0..tr {
                    let o = field.grids.node_offset(k, i, j);
                    for ch in 0..field.grids.features {
                        field.grids.data[o + ch] = profile(j);
                    }
                }
            }
        }
        got.push((field.smoothness().map_err(|e| e.to_string())?, expected));
    }
    let msg = format!("constant {}, linear {}, quadratic {}", got[0].0, got[1].0, got[2].0);
    if got.iter().all(|(v, e)| v == e) { Ok(msg) } else { Err(msg) }
}

struct Run {
    state: TrainState,
    history: Vec<StepReport>,
    config: TrainConfig,
    seconds: f64,
}

fn train_run(ds: &SensorDataset, config: TrainConfig) -> Run {
    let start = Instant::now();
    let trainer = Trainer::new(ds, config.clone()).unwrap();
    let mut state = trainer.init_state().unwrap();
    let history = trainer.train(&mut state, |_, _| Ok(())).unwrap();
    Run {
        state,
        history,
        config,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn default_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        checkpoint_interval: 0,
        ..Default::default()
    }
}

fn scores(run: &Run, ds: &SensorDataset, split: Split) -> (f64, f64) {
    let background = run.config.background.unwrap_or(ds.meta.background);
    let report = evaluate(&run.state, ds, split, background).unwrap();
    (report.mean_psnr().unwrap(), report.mean_drms().unwrap())
}

fn convergence(ds: &SensorDataset, run: &Run) -> Outcome {
    let (psnr, drms) = scores(run, ds, Split::Eval);
    let limit = 0.02 * ds.meta.scene_diameter;
    let msg = format!(
        "{} steps in {:.0} s on {} threads: held-out PSNR {psnr:.2} dB, DRMS {drms:.4} (limit {limit:.4})",
        run.state.step,
        run.seconds,
        rayon::current_num_threads()
    );
    if psnr >= 30.0 && drms <= limit { Ok(msg) } else { Err(msg) }
}

fn fusion_trend(ds: &SensorDataset, full_seed0: &Run) -> Outcome {
    let variants: [(&str, fn(&mut LossWeights)); 3] = [
        ("rgb", |w| {
            w.event = 0.0;
            w.depth = 0.0;
        }),
        ("rgb+depth", |w| w.event = 0.0),
        ("rgb+depth+event", |_| {}),
    ];
    let mut means = Vec::new();
    for (name, edit) in variants {
        let (mut psnr, mut drms) = (0.0, 0.0);
        for seed in 0..3 {
            let mut cfg = default_config(seed);
            edit(&mut cfg.weights);
            let fresh;
            let run = if seed == 0 && cfg == full_seed0.config {
                full_seed0
            } else {
                fresh = train_run(ds, cfg);
                &fresh
            };
            psnr += scores(run, ds, Split::EvalInterp).0 / 3.0;
            drms += scores(run, ds, Split::Eval).1 / 3.0;
        }
        means.push((name, psnr, drms));
    }
    let msg = means.iter().map(|(n, p, d)| format!("{n}: interp PSNR {p:.2} dB, DRMS {d:.4}")).collect::<Vec<_>>().join("; ");
    let drms_ordered = means[0].2 > means[1].2 && means[1].2 > means[2].2;
    let psnr_best = means[2].1 > means[0].1 && means[2].1 > means[1].1;
    if drms_ordered && psnr_best { Ok(msg) } else { Err(msg) }
}

fn determinism(ds: &SensorDataset, reference: &Run) -> Outcome {
    let threads = if rayon::current_num_threads() == 3 { 2 } else { 3 };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let again = pool.install(|| train_run(ds, reference.config.clone()));
    let bytes = |r: &Run| encode_checkpoint(&Checkpoint { config: r.config.clone(), state: r.state.clone() });
    let (a, b) = (bytes(reference), bytes(&again));
    let msg = format!("{} vs {threads} threads: {} checkpoint bytes", rayon::current_num_threads(), a.len());
    if a == b { Ok(msg) } else { Err(msg + ", contents differ") }
}

fn codec_round_trip(ds: &SensorDataset, run: &Run) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_dataset(ds, tmp.path()).map_err(|e| e.to_string())?;
    let report = load_dataset(tmp.path()).map_err(|e| e.to_string())?;
    if !report.warnings.is_empty() {
        return Err(format!("loader warnings: {:?}", report.warnings));
    }
    if &report.dataset != ds {
        return Err("loaded dataset differs from the written one".into());
    }
    let densified: usize = run.history.iter().filter_map(|r| r.densify).map(|d| d.cloned + d.split).sum();
    let ck = Checkpoint {
        config: run.config.clone(),
        state: run.state.clone(),
    };
    let path = tmp.path().join("state.evck");
    evsplat_core::dataset::save_checkpoint(&ck, &path).map_err(|e| e.to_string())?;
    let loaded = evsplat_core::dataset::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let msg = format!(
        "{} RGB, {} depth, {} events; checkpoint of {} Gaussians after {densified} densified",
        ds.rgb.len(),
        ds.depth.len(),
        ds.events.len(),
        run.state.gaussians.len()
    );
    if densified > 0 && loaded == ck && encode_checkpoint(&loaded) == std::fs::read(&path).map_err(|e| e.to_string())? {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    // stay out of the way of `cargo test <filter>` and `--list` aimed at other targets
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list" || (!a.starts_with('-') && !"acceptance".contains(a.as_str()))) {
        return;
    }
    let selected: BTreeSet<u32> = match std::env::var("EVSPLAT_ACCEPTANCE") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=8).collect(),
    };
    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} criterion {n} ({name}): {msg}");
    };

    if selected.contains(&1) {
        report(1, "gradient fidelity", gradient_fidelity());
    }
    if selected.contains(&2) {
        report(2, "event round trip", event_round_trip());
    }
    if selected.contains(&5) {
        report(5, "neutralization mask", neutralization_mask());
    }
    if selected.contains(&7) {
        report(7, "regularizer analytics", regularizer_analytics());
    }
    if [3, 4, 6, 8].iter().any(|n| selected.contains(n)) {
        let ds = build_tiny_scene(&SceneSpec::new("orbiting_two_ball")).unwrap();
        let run = train_run(&ds, default_config(0));
        if selected.contains(&3) {
            report(3, "end-to-end convergence", convergence(&ds, &run));
        }
        if selected.contains(&8) {
            report(8, "codec round trip", codec_round_trip(&ds, &run));
        }
        if selected.contains(&6) {
            report(6, "determinism", determinism(&ds, &run));
        }
        if selected.contains(&4) {
            report(4, "fusion trend", fusion_trend(&ds, &run));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
