//! Analytic test scenes built from moving ellipsoids.
//!
//! Frames are ray traced with flat colors on the dataset background (RGB
//! supersampled, depth from the pixel-centre ray), events come from the
//! simulator run on a dense frame sequence of a fixed event camera.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use super::{quantize_image, write_dataset, DatasetMeta, DepthFrame, EventPose, RgbFrame, SensorDataset, Split};
use crate::scene::{Camera, Intrinsics, Mat3, Vec3};
use crate::simulator::{simulate_with_noise, FrameSequence, SimulatorNoise};
use crate::{Error, GrayImage, Result, RgbImage};

pub const SCENES: [&str; 3] = ["orbiting_two_ball", "translating_spheres", "flapping_plate"];

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    /// Multiplier on every motion amplitude; 0 gives a static scene.
    pub motion: f64,
    pub views: usize,
    pub timestamps: usize,
    pub resolution: usize,
    pub focal: f64,
    pub span: f64,
    pub contrast: f64,
    /// Event-camera frames per RGB frame interval.
    pub event_rate: usize,
    pub supersample: usize,
    pub distance: f64,
    pub elevation_deg: f64,
    pub arc_deg: f64,
    /// Backdrop color seen wherever no object is hit.
    pub background: [f64; 3],
    pub noise: SimulatorNoise,
}

impl SceneSpec {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            motion: 1.0,
            views: 12,
            timestamps: 60,
            resolution: 64,
            focal: 80.0,
            span: 1.0,
            contrast: 0.2,
            event_rate: 10,
            supersample: 4,
            distance: 4.5,
            elevation_deg: 25.0,
            arc_deg: 60.0,
            background: [0.2; 3],
            noise: SimulatorNoise::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !SCENES.contains(&self.name.as_str()) {
            return Err(Error::Config(format!(
                "unknown scene {:?} (expected one of {})",
                self.name,
                SCENES.join(", ")
            )));
        }
        if self.views < 2 || self.timestamps < 2 || self.resolution == 0 || self.supersample == 0 || self.event_rate == 0 {
            return Err(Error::Config("scene needs at least two views and two timestamps".into()));
        }
        if !(self.span > 0.0 && self.contrast > 0.0 && self.motion >= 0.0) {
            return Err(Error::Config("span and contrast must be positive, motion non-negative".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let c = (self.resolution as f64 - 1.0) / 2.0;
        Intrinsics {
            width: self.resolution,
            height: self.resolution,
            fx: self.focal,
            fy: self.focal,
            cx: c,
            cy: c,
            near: 0.1,
            far: 20.0,
        }
    }

    /// Training azimuths, evenly spread over the arc.
    pub fn train_azimuths(&self) -> Vec<f64> {
        (0..self.views)
            .map(|i| -self.arc_deg + 2.0 * self.arc_deg * i as f64 / (self.views - 1) as f64)
            .collect()
    }

    /// Held-out azimuths halfway between training views, including the
    /// one straddling the event camera.
    pub fn eval_azimuths(&self) -> Vec<f64> {
        let a = self.train_azimuths();
        let mid = (self.views - 1) / 2;
        let mut picks = vec![mid.saturating_sub(3), mid, (mid + 3).min(self.views - 2)];
        picks.dedup();
        picks.into_iter().map(|i| 0.5 * (a[i] + a[i + 1])).collect()
    }

    pub fn timestamp(&self, k: f64) -> f64 {
        self.span * k / (self.timestamps - 1) as f64
    }

    /// Timestamp indices used for held-out evaluation.
    pub fn eval_timestamp_indices(&self) -> Vec<usize> {
        let step = (self.timestamps / 10).max(1);
        (step / 2..self.timestamps - 1).step_by(step).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: Vec3,
    axes: Mat3,
    radii: [f64; 3],
    color: [f64; 3],
}

impl Ellipsoid {
    fn sphere(center: Vec3, r: f64, color: [f64; 3]) -> Self {
        Self {
            center,
            axes: Mat3::identity(),
            radii: [r; 3],
            color,
        }
    }

    /// Ray parameter of the first hit beyond `near`.
    fn hit(&self, origin: &Vec3, dir: &Vec3, near: f64) -> Option<f64> {
        let o = self.axes.transpose() * (origin - self.center);
        let d = self.axes.transpose() * dir;
        let o = Vec3::new(o[0] / self.radii[0], o[1] / self.radii[1], o[2] / self.radii[2]);
        let d = Vec3::new(d[0] / self.radii[0], d[1] / self.radii[1], d[2] / self.radii[2]);
        let a = d.dot(&d);
        let b = 2.0 * o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&s| s > near)
    }

    fn bounding_radius(&self) -> f64 {
        self.center.norm() + self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Scene contents at normalized time `tau`.
fn objects(name: &str, tau: f64, m: f64) -> Vec<Ellipsoid> {
    match name {
        "orbiting_two_ball" => {
            let a = -0.9 * PI + m * 0.5 * PI * tau;
            let b = 0.2 * PI - m * PI / 3.0 * tau;
            vec![
                Ellipsoid::sphere(Vec3::zeros(), 0.45, [0.85, 0.85, 0.8]),
                Ellipsoid::sphere(Vec3::new(1.05 * a.cos(), 1.05 * a.sin(), 0.0), 0.3, [0.95, 0.25, 0.2]),
                Ellipsoid::sphere(
                    Vec3::new(1.05 * b.cos(), 1.05 * b.sin(), 0.2 * m * (2.0 * PI * tau).sin()),
                    0.25,
                    [0.2, 0.45, 0.95],
                ),
            ]
        }
        "translating_spheres" => vec![
            Ellipsoid::sphere(Vec3::new(-0.8, 0.3 - 0.6 * m * tau, 0.0), 0.3, [0.9, 0.2, 0.2]),
            Ellipsoid::sphere(Vec3::new(0.0, 0.0, -0.3 + 0.6 * m * tau), 0.3, [0.2, 0.85, 0.3]),
            Ellipsoid::sphere(Vec3::new(0.8 - 0.5 * m * tau, -0.2, 0.1), 0.3, [0.25, 0.35, 0.95]),
        ],
        _ => {
            let phi = 0.8 * m * (2.0 * PI * 2.0 * tau).sin();
            let mut out = vec![Ellipsoid {
                center: Vec3::zeros(),
                axes: Mat3::identity(),
                radii: [0.55, 0.16, 0.16],
                color: [0.2, 0.75, 0.35],
            }];
            for side in [1.0, -1.0] {
                let axes = rot_x(side * phi);
                let hinge = Vec3::new(0.0, side * 0.12, 0.1);
                out.push(Ellipsoid {
                    center: hinge + axes * Vec3::new(0.0, side * 0.45, 0.0),
                    axes,
                    radii: [0.22, 0.45, 0.03],
                    color: [0.9, 0.6, 0.15],
                });
            }
            out
        }
    }
}

fn camera_at(spec: &SceneSpec, azimuth_deg: f64, t: f64) -> Result<Camera> {
    let (az, el) = (azimuth_deg.to_radians(), spec.elevation_deg.to_radians());
    let eye = spec.distance * Vec3::new(el.cos() * az.sin(), -el.cos() * az.cos(), el.sin());
    Camera::look_at(spec.intrinsics(), eye, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), t)
}

/// Nearest hit along a ray: camera-space depth, color and object index.
fn trace(objs: &[Ellipsoid], cam: &Camera, u: f64, v: f64) -> Option<(f64, [f64; 3], usize)> {
    let dir_cam = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    let dir = cam.rotation.transpose() * dir_cam;
    let origin = cam.center();
    objs.iter()
        .enumerate()
        .filter_map(|(i, o)| o.hit(&origin, &dir, cam.near).map(|s| (s, o.color, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Sub-pixel sample offsets of an `ss` x `ss` grid.
fn subsamples(ss: usize) -> impl Iterator<Item = (f64, f64)> {
    let step = 1.0 / ss as f64;
    (0..ss * ss).map(move |k| ((k % ss) as f64 * step + 0.5 * step - 0.5, (k / ss) as f64 * step + 0.5 * step - 0.5))
}

fn render_frame(objs: &[Ellipsoid], cam: &Camera, ss: usize, background: [f64; 3]) -> RgbImage {
    let inv = 1.0 / (ss * ss) as f64;
    RgbImage::from_fn(cam.width, cam.height, |x, y| {
        let mut acc = [0.0; 3];
        for (du, dv) in subsamples(ss) {
            let c = trace(objs, cam, x as f64 + du, y as f64 + dv).map_or(background, |h| h.1);
            for k in 0..3 {
                acc[k] += c[k] * inv;
            }
        }
        acc
    })
}

/// Depth of the pixel-centre ray. Like a real sensor, mixed pixels whose
/// footprint straddles a silhouette or an occlusion edge read as invalid.
fn render_depth(objs: &[Ellipsoid], cam: &Camera, ss: usize) -> GrayImage {
    GrayImage::from_fn(cam.width, cam.height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let Some((depth, _, id)) = trace(objs, cam, x, y) else {
            return 0.0;
        };
        if subsamples(ss).any(|(du, dv)| trace(objs, cam, x + du, y + dv).is_none_or(|h| h.2 != id)) {
            return 0.0;
        }
        // stored as f32 on disk, so round here to keep the in-memory copy identical
        depth as f32 as f64
    })
}

/// Dense event-camera frames and the simulated stream.
pub fn event_frames(spec: &SceneSpec) -> Result<FrameSequence> {
    let n = (spec.timestamps - 1) * spec.event_rate + 1;
    let cam = camera_at(spec, 0.0, 0.0)?;
    let background = spec.background;
    let ts: Vec<f64> = (0..n).map(|k| spec.span * k as f64 / (n - 1) as f64).collect();
    let frames = ts
        .par_iter()
        .map(|&t| render_frame(&objects(&spec.name, t / spec.span, spec.motion), &cam, spec.supersample, background))
        .collect();
    FrameSequence::new(frames, ts)
}

/// Builds the dataset in memory.
pub fn build_tiny_scene(spec: &SceneSpec) -> Result<SensorDataset> {
    spec.validate()?;
    let background = spec.background;
    let intr = spec.intrinsics();

    let mut shots: Vec<(Split, usize, f64, f64)> = Vec::new();
    for k in 0..spec.timestamps {
        for (v, &az) in spec.train_azimuths().iter().enumerate() {
            shots.push((Split::Train, v, az, spec.timestamp(k as f64)));
        }
    }
    for &k in &spec.eval_timestamp_indices() {
        for (v, &az) in spec.eval_azimuths().iter().enumerate() {
            shots.push((Split::Eval, v, az, spec.timestamp(k as f64)));
            shots.push((Split::EvalInterp, v, az, spec.timestamp(k as f64 + 0.5)));
        }
    }
    shots.sort_by(|a, b| a.0.cmp(&b.0).then(a.3.total_cmp(&b.3)).then(a.1.cmp(&b.1)));

    let rendered: Vec<Result<(RgbFrame, DepthFrame)>> = shots
        .par_iter()
        .enumerate()
        .map(|(i, &(split, view, az, t))| {
            let cam = camera_at(spec, az, t)?;
            let objs = objects(&spec.name, t / spec.span, spec.motion);
            let stem = format!("{}_v{view:02}_{i:04}", split.as_str());
            Ok((
                RgbFrame {
                    split,
                    file: format!("rgb/{stem}.png"),
                    camera: cam.clone(),
                    image: quantize_image(&render_frame(&objs, &cam, spec.supersample, background)),
                },
                DepthFrame {
                    split,
                    file: format!("depth/{stem}.dpth"),
                    camera: cam.clone(),
                    depth: render_depth(&objs, &cam, spec.supersample),
                },
            ))
        })
        .collect();
    let (rgb, depth): (Vec<_>, Vec<_>) = rendered.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

    let events = simulate_with_noise(&event_frames(spec)?, spec.contrast, &spec.noise)?;
    let event_cam = camera_at(spec, 0.0, 0.0)?;

    let radius = (0..spec.timestamps)
        .flat_map(|k| objects(&spec.name, k as f64 / (spec.timestamps - 1) as f64, spec.motion))
        .map(|o| o.bounding_radius())
        .fold(0.0, f64::max);

    Ok(SensorDataset {
        meta: DatasetMeta {
            scene: spec.name.clone(),
            span: spec.span,
            contrast_threshold: spec.contrast,
            scene_diameter: 2.0 * radius,
            background,
        },
        rgb_intrinsics: intr,
        depth_intrinsics: intr,
        event_intrinsics: intr,
        events_file: "events.evst".into(),
        events,
        event_poses: vec![EventPose {
            t: 0.0,
            rotation: event_cam.rotation,
            translation: event_cam.translation,
        }],
        rgb,
        depth,
    })
}

/// Builds the dataset and writes it to `dir`.
pub fn generate_tiny_scene(spec: &SceneSpec, dir: &Path) -> Result<SensorDataset> {
    let ds = build_tiny_scene(spec)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}
