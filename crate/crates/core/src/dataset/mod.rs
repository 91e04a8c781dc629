//! On-disk dataset layout, loading with full validation, checkpoints and the
//! analytic scene generator.
//!
//! A dataset directory holds `manifest.txt`, PNG frames, `DPTH` depth planes
//! and one `EVST` event file. The manifest is line oriented:
//!
//! ```text
//! evsplat-dataset 1
//! scene <name>
//! span <seconds>
//! contrast_threshold <C>
//! scene_diameter <world units>
//! background <r> <g> <b>
//! intrinsics <rgb|depth|event> <W> <H> <fx> <fy> <cx> <cy> <near> <far>
//! events <file>
//! event_pose <t> <r00> .. <r22> <tx> <ty> <tz>
//! rgb <split> <t> <file> <r00> .. <r22> <tx> <ty> <tz>
//! depth <split> <t> <file> <r00> .. <r22> <tx> <ty> <tz>
//! ```

pub mod checkpoint;
pub mod codec;
pub mod generator;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::events::EventStream;
use crate::scene::{Camera, Intrinsics, Mat3, Vec3};
use crate::{Error, GrayImage, Result, RgbImage};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use generator::{generate_tiny_scene, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    /// Held-out views at trained timestamps.
    Eval,
    /// Held-out views at timestamps between the trained ones.
    EvalInterp,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::EvalInterp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::EvalInterp => "eval_interp",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, eval or eval_interp)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub scene: String,
    pub span: f64,
    pub contrast_threshold: f64,
    pub scene_diameter: f64,
    pub background: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    pub split: Split,
    pub file: String,
    pub camera: Camera,
    pub image: RgbImage,
}

/// Depth in world units; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub split: Split,
    pub file: String,
    pub camera: Camera,
    pub depth: GrayImage,
}

impl DepthFrame {
    pub fn validity(&self) -> Vec<bool> {
        self.depth.pixels().iter().map(|&d| is_valid_depth(d)).collect()
    }
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Event camera extrinsics from `t` until the next pose.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPose {
    pub t: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorDataset {
    pub meta: DatasetMeta,
    pub rgb_intrinsics: Intrinsics,
    pub depth_intrinsics: Intrinsics,
    pub event_intrinsics: Intrinsics,
    pub events_file: String,
    pub events: EventStream,
    pub event_poses: Vec<EventPose>,
    pub rgb: Vec<RgbFrame>,
    pub depth: Vec<DepthFrame>,
}

impl SensorDataset {
    /// Event camera at time `t` (pose with the latest start not after `t`).
    pub fn event_camera(&self, t: f64) -> Result<Camera> {
        if self.event_poses.is_empty() {
            return Err(Error::Config("dataset has no event camera pose".into()));
        }
        let idx = self.event_poses.partition_point(|p| p.t <= t);
        let pose = &self.event_poses[idx.saturating_sub(1)];
        Camera::new(self.event_intrinsics, pose.rotation, pose.translation, t)
    }

    /// Depth frame captured with the same split, timestamp and pose as RGB
    /// frame `rgb_index`.
    pub fn paired_depth(&self, rgb_index: usize) -> Option<usize> {
        let f = &self.rgb[rgb_index];
        self.depth.iter().position(|d| {
            d.split == f.split
                && d.camera.timestamp == f.camera.timestamp
                && d.camera.rotation == f.camera.rotation
                && d.camera.translation == f.camera.translation
        })
    }

    pub fn rgb_in(&self, split: Split) -> Vec<usize> {
        (0..self.rgb.len()).filter(|&i| self.rgb[i].split == split).collect()
    }

    /// Every invariant violation, plus non-fatal warnings.
    pub fn check(&self) -> (Vec<String>, Vec<String>) {
        let mut problems = Vec::new();
        let mut warnings = Vec::new();
        let m = &self.meta;
        if !(m.span > 0.0 && m.span.is_finite()) {
            problems.push(format!("span {} must be positive", m.span));
        }
        if !(m.contrast_threshold > 0.0) {
            problems.push(format!("contrast_threshold {} must be positive", m.contrast_threshold));
        }
        if !(m.scene_diameter > 0.0) {
            problems.push(format!("scene_diameter {} must be positive", m.scene_diameter));
        }
        for (name, intr) in [
            ("rgb", &self.rgb_intrinsics),
            ("depth", &self.depth_intrinsics),
            ("event", &self.event_intrinsics),
        ] {
            if let Err(e) = intr.camera(Mat3::identity(), Vec3::zeros(), 0.0) {
                problems.push(format!("{name} intrinsics: {e}"));
            }
        }
        let in_span = |t: f64| t >= 0.0 && t <= m.span;
        for f in &self.rgb {
            if !in_span(f.camera.timestamp) {
                problems.push(format!("rgb frame {}: timestamp {} outside [0, {}]", f.file, f.camera.timestamp, m.span));
            }
            if f.image.width() != self.rgb_intrinsics.width || f.image.height() != self.rgb_intrinsics.height {
                problems.push(format!(
                    "rgb frame {}: {}x{} image does not match intrinsics {}x{}",
                    f.file,
                    f.image.width(),
                    f.image.height(),
                    self.rgb_intrinsics.width,
                    self.rgb_intrinsics.height
                ));
            }
        }
        for f in &self.depth {
            if !in_span(f.camera.timestamp) {
                problems.push(format!("depth frame {}: timestamp {} outside [0, {}]", f.file, f.camera.timestamp, m.span));
            }
            if f.depth.width() != self.depth_intrinsics.width || f.depth.height() != self.depth_intrinsics.height {
                problems.push(format!("depth frame {}: size does not match intrinsics", f.file));
            }
        }
        if self.events.width != self.event_intrinsics.width || self.events.height != self.event_intrinsics.height {
            problems.push(format!(
                "event file {}: sensor {}x{} does not match event intrinsics {}x{}",
                self.events_file,
                self.events.width,
                self.events.height,
                self.event_intrinsics.width,
                self.event_intrinsics.height
            ));
        }
        for p in self.events.problems() {
            problems.push(format!("event file {}: {p}", self.events_file));
        }
        if let Some(last) = self.events.events.last() {
            if last.t > m.span {
                problems.push(format!(
                    "event file {}: last event at {} exceeds span {}",
                    self.events_file, last.t, m.span
                ));
            }
        }
        if let Some(first) = self.events.events.first() {
            if first.t < 0.0 {
                problems.push(format!("event file {}: event at {} precedes 0", self.events_file, first.t));
            }
        }
        if self.event_poses.is_empty() {
            problems.push("no event_pose line".into());
        }
        if self.event_poses.windows(2).any(|w| w[1].t < w[0].t) {
            problems.push("event poses are not sorted by time".into());
        }
        if !self.rgb.iter().any(|f| f.split == Split::Train) {
            problems.push("no training rgb frames".into());
        }
        if self.events.is_empty() {
            warnings.push("event stream is empty".into());
        }
        (problems, warnings)
    }
}

/// A loaded dataset and any warnings raised while loading it.
#[derive(Clone, Debug)]
pub struct LoadReport {
    pub dataset: SensorDataset,
    pub warnings: Vec<String>,
}

fn fmt_pose(out: &mut String, r: &Mat3, t: &Vec3) {
    for i in 0..3 {
        for j in 0..3 {
            let _ = write!(out, " {}", r[(i, j)]);
        }
    }
    let _ = write!(out, " {} {} {}", t[0], t[1], t[2]);
}

fn fmt_intrinsics(out: &mut String, name: &str, i: &Intrinsics) {
    let _ = writeln!(
        out,
        "intrinsics {name} {} {} {} {} {} {} {} {}",
        i.width, i.height, i.fx, i.fy, i.cx, i.cy, i.near, i.far
    );
}

pub fn manifest_text(ds: &SensorDataset) -> String {
    let m = &ds.meta;
    let mut out = String::new();
    let _ = writeln!(out, "evsplat-dataset {MANIFEST_VERSION}");
    let _ = writeln!(out, "scene {}", m.scene);
    let _ = writeln!(out, "span {}", m.span);
    let _ = writeln!(out, "contrast_threshold {}", m.contrast_threshold);
    let _ = writeln!(out, "scene_diameter {}", m.scene_diameter);
    let _ = writeln!(out, "background {} {} {}", m.background[0], m.background[1], m.background[2]);
    fmt_intrinsics(&mut out, "rgb", &ds.rgb_intrinsics);
    fmt_intrinsics(&mut out, "depth", &ds.depth_intrinsics);
    fmt_intrinsics(&mut out, "event", &ds.event_intrinsics);
    let _ = writeln!(out, "events {}", ds.events_file);
    for p in &ds.event_poses {
        let _ = write!(out, "event_pose {}", p.t);
        fmt_pose(&mut out, &p.rotation, &p.translation);
        out.push('\n');
    }
    for f in &ds.rgb {
        let _ = write!(out, "rgb {} {} {}", f.split.as_str(), f.camera.timestamp, f.file);
        fmt_pose(&mut out, &f.camera.rotation, &f.camera.translation);
        out.push('\n');
    }
    for f in &ds.depth {
        let _ = write!(out, "depth {} {} {}", f.split.as_str(), f.camera.timestamp, f.file);
        fmt_pose(&mut out, &f.camera.rotation, &f.camera.translation);
        out.push('\n');
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Validation(vec![format!("png encode: {e}")]))?;
        let data: Vec<u8> = img.pixels().iter().flat_map(|c| c.map(quantize_u8)).collect();
        w.write_image_data(&data)
            .map_err(|e| Error::Validation(vec![format!("png encode: {e}")]))?;
    }
    Ok(out)
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every channel to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize_image(img: &RgbImage) -> RgbImage {
    img.map(|c| c.map(|v| quantize_u8(v) as f64 / 255.0))
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |e: png::DecodingError| Error::Validation(vec![format!("png decode: {e}")]);
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Validation(vec!["png too large".into()]))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Validation(vec![format!("unsupported png color type {other:?}")])),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..w * h)
        .map(|i| {
            let px = &buf[i * channels..(i + 1) * channels];
            let v = |c: usize| px[c] as f64 / 255.0;
            if channels < 3 {
                [v(0); 3]
            } else {
                [v(0), v(1), v(2)]
            }
        })
        .collect();
    RgbImage::from_vec(w, h, data)
}

/// Writes a complete dataset directory.
pub fn write_dataset(ds: &SensorDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let write = |rel: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(Error::file(parent))?;
        }
        fs::write(&path, bytes).map_err(Error::file(&path))
    };
    for f in &ds.rgb {
        write(&f.file, &encode_png(&f.image)?)?;
    }
    for f in &ds.depth {
        write(&f.file, &codec::encode_depth(&f.depth))?;
    }
    write(&ds.events_file, &codec::encode_events(&ds.events)?)?;
    write(MANIFEST_FILE, manifest_text(ds).as_bytes())
}

enum FrameKind {
    Rgb,
    Depth,
}

struct FrameLine {
    kind: FrameKind,
    line: usize,
    split: Split,
    t: f64,
    file: String,
    rotation: Mat3,
    translation: Vec3,
}

fn parse_f64s(fields: &[&str]) -> Option<Vec<f64>> {
    fields.iter().map(|s| s.parse::<f64>().ok()).collect()
}

fn parse_pose(fields: &[&str]) -> Option<(Mat3, Vec3)> {
    let v = parse_f64s(fields)?;
    if v.len() != 12 {
        return None;
    }
    Some((Mat3::from_row_slice(&v[..9]), Vec3::new(v[9], v[10], v[11])))
}

/// Loads and validates a dataset directory, reporting every problem found.
pub fn load_dataset(dir: &Path) -> Result<LoadReport> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(Error::file(&manifest_path))?;
    let mut problems = Vec::new();

    let mut version = None;
    let mut scene = None;
    let mut span = None;
    let mut contrast = None;
    let mut diameter = None;
    let mut background = None;
    let mut intrinsics: [Option<Intrinsics>; 3] = [None; 3];
    let mut events_file = None;
    let mut event_poses = Vec::new();
    let mut frames = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let args = &fields[1..];
        let scalar = |args: &[&str]| -> Option<f64> {
            match args {
                [v] => v.parse().ok(),
                _ => None,
            }
        };
        let bad = |what: &str| format!("manifest line {line}: malformed {what}");
        match fields[0] {
            "evsplat-dataset" => match args {
                [v] => match v.parse::<u32>() {
                    Ok(v) => version = Some(v),
                    Err(_) => problems.push(bad("version")),
                },
                _ => problems.push(bad("version")),
            },
            "scene" => match args {
                [s] => scene = Some(s.to_string()),
                _ => problems.push(bad("scene")),
            },
            "span" => match scalar(args) {
                Some(v) => span = Some(v),
                None => problems.push(bad("span")),
            },
            "contrast_threshold" => match scalar(args) {
                Some(v) => contrast = Some(v),
                None => problems.push(bad("contrast_threshold")),
            },
            "scene_diameter" => match scalar(args) {
                Some(v) => diameter = Some(v),
                None => problems.push(bad("scene_diameter")),
            },
            "background" => match parse_f64s(args) {
                Some(v) if v.len() == 3 => background = Some([v[0], v[1], v[2]]),
                _ => problems.push(bad("background")),
            },
            "intrinsics" => {
                let slot = match args.first() {
                    Some(&"rgb") => Some(0),
                    Some(&"depth") => Some(1),
                    Some(&"event") => Some(2),
                    _ => None,
                };
                let parsed = (args.len() == 9)
                    .then(|| {
                        let w = args[1].parse::<usize>().ok()?;
                        let h = args[2].parse::<usize>().ok()?;
                        let v = parse_f64s(&args[3..])?;
                        Some(Intrinsics {
                            width: w,
                            height: h,
                            fx: v[0],
                            fy: v[1],
                            cx: v[2],
                            cy: v[3],
                            near: v[4],
                            far: v[5],
                        })
                    })
                    .flatten();
                match (slot, parsed) {
                    (Some(s), Some(i)) => intrinsics[s] = Some(i),
                    _ => problems.push(bad("intrinsics")),
                }
            }
            "events" => match args {
                [f] => events_file = Some(f.to_string()),
                _ => problems.push(bad("events")),
            },
            "event_pose" => {
                let parsed = (args.len() == 13)
                    .then(|| Some((args[0].parse::<f64>().ok()?, parse_pose(&args[1..])?)))
                    .flatten();
                match parsed {
                    Some((t, (rotation, translation))) => event_poses.push(EventPose {
                        t,
                        rotation,
                        translation,
                    }),
                    None => problems.push(bad("event_pose")),
                }
            }
            kind @ ("rgb" | "depth") => {
                let parsed = (args.len() == 15)
                    .then(|| {
                        let split = args[0].parse::<Split>().ok()?;
                        let t = args[1].parse::<f64>().ok()?;
                        let (rotation, translation) = parse_pose(&args[3..])?;
                        Some(FrameLine {
                            kind: if kind == "rgb" { FrameKind::Rgb } else { FrameKind::Depth },
                            line,
                            split,
                            t,
                            file: args[2].to_string(),
                            rotation,
                            translation,
                        })
                    })
                    .flatten();
                match parsed {
                    Some(f) => frames.push(f),
                    None => problems.push(bad(kind)),
                }
            }
            other => problems.push(format!("manifest line {line}: unknown key {other:?}")),
        }
    }

    match version {
        Some(MANIFEST_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                what: "dataset manifest",
                found: v,
                expected: MANIFEST_VERSION,
            })
        }
        None => problems.push("manifest: missing evsplat-dataset header".into()),
    }
    let mut require = |name: &str, present: bool| {
        if !present {
            problems.push(format!("manifest: missing {name}"));
        }
    };
    require("scene", scene.is_some());
    require("span", span.is_some());
    require("contrast_threshold", contrast.is_some());
    require("scene_diameter", diameter.is_some());
    require("background", background.is_some());
    require("rgb intrinsics", intrinsics[0].is_some());
    require("depth intrinsics", intrinsics[1].is_some());
    require("event intrinsics", intrinsics[2].is_some());
    require("events", events_file.is_some());

    // decode referenced files in parallel; problems come back in manifest order
    let decoded: Vec<std::result::Result<FrameData, String>> = frames
        .par_iter()
        .map(|f| {
            let path = dir.join(&f.file);
            let bytes = fs::read(&path).map_err(|e| format!("line {}: {}: {e}", f.line, path.display()))?;
            let res = match f.kind {
                FrameKind::Rgb => decode_png(&bytes).map(FrameData::Rgb),
                FrameKind::Depth => codec::decode_depth(&bytes).map(FrameData::Depth),
            };
            res.map_err(|e| format!("line {}: {}: {e}", f.line, f.file))
        })
        .collect();

    let events = events_file.as_ref().and_then(|name| {
        let path = dir.join(name);
        match fs::read(&path) {
            Err(e) => {
                problems.push(format!("{}: {e}", path.display()));
                None
            }
            Ok(bytes) => match codec::decode_events(&bytes) {
                Ok(s) => Some(s),
                Err(Error::Validation(list)) => {
                    problems.extend(list.into_iter().map(|p| format!("{name}: {p}")));
                    None
                }
                Err(e) => {
                    problems.push(format!("{name}: {e}"));
                    None
                }
            },
        }
    });

    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    for (f, data) in frames.into_iter().zip(decoded) {
        let data = match data {
            Ok(d) => d,
            Err(p) => {
                problems.push(p);
                continue;
            }
        };
        let intr = match f.kind {
            FrameKind::Rgb => intrinsics[0],
            FrameKind::Depth => intrinsics[1],
        };
        let Some(intr) = intr else { continue };
        let camera = match Camera::new(intr, f.rotation, f.translation, f.t) {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("manifest line {}: {e}", f.line));
                continue;
            }
        };
        match data {
            FrameData::Rgb(image) => rgb.push(RgbFrame {
                split: f.split,
                file: f.file,
                camera,
                image,
            }),
            FrameData::Depth(d) => depth.push(DepthFrame {
                split: f.split,
                file: f.file,
                camera,
                depth: d,
            }),
        }
    }

    let complete = (|| {
        Some(SensorDataset {
            meta: DatasetMeta {
                scene: scene?,
                span: span?,
                contrast_threshold: contrast?,
                scene_diameter: diameter?,
                background: background?,
            },
            rgb_intrinsics: intrinsics[0]?,
            depth_intrinsics: intrinsics[1]?,
            event_intrinsics: intrinsics[2]?,
            events_file: events_file?,
            events: events?,
            event_poses,
            rgb,
            depth,
        })
    })();
    let mut warnings = Vec::new();
    if let Some(ds) = &complete {
        for pose in &ds.event_poses {
            if let Err(e) = Camera::new(ds.event_intrinsics, pose.rotation, pose.translation, pose.t) {
                problems.push(format!("event pose at {}: {e}", pose.t));
            }
        }
        let (p, w) = ds.check();
        problems.extend(p);
        warnings = w;
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(LoadReport {
        dataset: complete.expect("all required fields present when no problems were found"),
        warnings,
    })
}

enum FrameData {
    Rgb(RgbImage),
    Depth(GrayImage),
}
