//! Tile-parallel front-to-back alpha blending of projected Gaussians, and its
//! analytic backward pass.
//!
//! Gaussians are sorted once per view by camera depth (ties broken by index)
//! and binned into 16x16 pixel tiles. Every pixel keeps the ordered list of
//! blend records it consumed so the backward pass can replay the blend in
//! reverse without dividing by `1 - alpha`.

use rayon::prelude::*;

use crate::image::{GrayImage, RgbImage};
use crate::scene::{
    project_gaussian, project_gaussian_vjp, sigmoid, Camera, GaussianGrad, GaussianSet, ProjectedGrad,
    Projected2D, Sym2,
};
use crate::{Error, Result};

pub const TILE_SIZE: usize = 16;
/// Added to the projected covariance diagonal before inversion, in pixels^2.
pub const COV_REGULARIZATION: f64 = 0.3;
/// Blending at a pixel stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Accumulated alpha below which depth is reported as the far plane.
pub const DEPTH_ALPHA_FLOOR: f64 = 1e-4;
/// Squared Mahalanobis radius of the footprint (3 sigma).
const CUTOFF_MAHALANOBIS_SQ: f64 = 9.0;

/// One Gaussian's contribution at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendRecord {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance before this Gaussian was blended.
    pub transmittance: f64,
}

/// Screen-space data for one Gaussian, cached for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Splat {
    proj: Projected2D,
    conic: Sym2,
    opacity: f64,
    color: [f64; 3],
    tiles: Option<[usize; 4]>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: GrayImage,
    pub alpha: GrayImage,
    records: Vec<BlendRecord>,
    /// `[start, end)` into `records` for every pixel, row-major.
    spans: Vec<(u32, u32)>,
    /// Blended `sum z_i w_i` before alpha normalization.
    raw_depth: Vec<f64>,
    splats: Vec<Splat>,
    background: [f64; 3],
}

impl RenderOutput {
    pub fn blend_records(&self, x: usize, y: usize) -> &[BlendRecord] {
        let (s, e) = self.spans[y * self.color.width() + x];
        &self.records[s as usize..e as usize]
    }

    pub fn projected(&self, gaussian: usize) -> &Projected2D {
        &self.splats[gaussian].proj
    }

    /// Whether the Gaussian's footprint overlaps the image.
    pub fn is_visible(&self, gaussian: usize) -> bool {
        self.splats[gaussian].tiles.is_some()
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Upstream gradients on the render outputs; `None` means zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderUpstream<'a> {
    pub color: Option<&'a RgbImage>,
    pub depth: Option<&'a GrayImage>,
    pub alpha: Option<&'a GrayImage>,
}

#[derive(Clone, Debug)]
pub struct RenderGrads {
    pub gaussians: Vec<GaussianGrad>,
    /// Gradient on each projected 2D mean, in pixels (used for densification).
    pub mean2: Vec<[f64; 2]>,
}

struct TileGrid {
    cols: usize,
    rows: usize,
}

impl TileGrid {
    fn new(cam: &Camera) -> Self {
        Self {
            cols: cam.width.div_ceil(TILE_SIZE),
            rows: cam.height.div_ceil(TILE_SIZE),
        }
    }

    fn count(&self) -> usize {
        self.cols * self.rows
    }

    fn pixel_bounds(&self, tile: usize, cam: &Camera) -> (usize, usize, usize, usize) {
        let tx = tile % self.cols;
        let ty = tile / self.cols;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height))
    }
}

fn make_splat(gs: &GaussianSet, i: usize, cam: &Camera, grid: &TileGrid) -> Splat {
    let g = gs.get(i);
    let proj = project_gaussian(&g, cam);
    let mut splat = Splat {
        proj,
        conic: Sym2::default(),
        opacity: sigmoid(g.opacity_logit),
        color: g.color_logit.map(sigmoid),
        tiles: None,
    };
    if !proj.valid {
        return splat;
    }
    let reg = Sym2 {
        xx: proj.cov2.xx + COV_REGULARIZATION,
        xy: proj.cov2.xy,
        yy: proj.cov2.yy + COV_REGULARIZATION,
    };
    let Some(conic) = reg.inverse() else {
        splat.proj.valid = false;
        return splat;
    };
    splat.conic = conic;
    let radius = 3.0 * reg.max_eigenvalue().sqrt();
    let [mx, my] = proj.mean2;
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mx + radius < 0.0 || my + radius < 0.0 || mx - radius > w - 1.0 || my - radius > h - 1.0 {
        return splat;
    }
    let tile_of = |v: f64, max_tiles: usize| -> usize {
        ((v.max(0.0) as usize) / TILE_SIZE).min(max_tiles - 1)
    };
    splat.tiles = Some([
        tile_of((mx - radius).ceil(), grid.cols),
        tile_of((my - radius).ceil(), grid.rows),
        tile_of((mx + radius).floor(), grid.cols),
        tile_of((my + radius).floor(), grid.rows),
    ]);
    splat
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.proj.mean2[0];
    let dy = py - s.proj.mean2[1];
    let m = s.conic.xx * dx * dx + 2.0 * s.conic.xy * dx * dy + s.conic.yy * dy * dy;
    if m > CUTOFF_MAHALANOBIS_SQ {
        return None;
    }
    let falloff = (-0.5 * m).exp();
    Some((s.opacity * falloff, falloff, dx, dy))
}

/// Renders color, depth and alpha for one view.
///
/// Depth is the blended camera-space `z` divided by the accumulated alpha,
/// or the far plane where alpha is at most [`DEPTH_ALPHA_FLOOR`].
pub fn render(gs: &GaussianSet, cam: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    gs.check_finite()?;
    let grid = TileGrid::new(cam);
    let splats: Vec<Splat> = (0..gs.len())
        .into_par_iter()
        .map(|i| make_splat(gs, i, cam, &grid))
        .collect();

    let mut order: Vec<u32> = (0..gs.len() as u32)
        .filter(|&i| splats[i as usize].tiles.is_some())
        .collect();
    order.sort_by(|&a, &b| {
        splats[a as usize]
            .proj
            .z_cam
            .total_cmp(&splats[b as usize].proj.z_cam)
            .then(a.cmp(&b))
    });

    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); grid.count()];
    for &i in &order {
        let [x0, y0, x1, y1] = splats[i as usize].tiles.unwrap();
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * grid.cols + tx].push(i);
            }
        }
    }

    struct TileOut {
        records: Vec<BlendRecord>,
        // (pixel index, start, end) relative to this tile's records
        spans: Vec<(usize, u32, u32)>,
        color: Vec<(usize, [f64; 3], f64, f64, f64)>,
    }

    let tiles: Vec<TileOut> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (x0, y0, x1, y1) = grid.pixel_bounds(tile, cam);
            let mut out = TileOut {
                records: Vec::new(),
                spans: Vec::with_capacity((x1 - x0) * (y1 - y0)),
                color: Vec::with_capacity((x1 - x0) * (y1 - y0)),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let start = out.records.len() as u32;
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    for &gi in list {
                        let s = &splats[gi as usize];
                        let Some((alpha, ..)) = splat_alpha(s, x as f64, y as f64) else {
                            continue;
                        };
                        let w = alpha * t;
                        for k in 0..3 {
                            c[k] += s.color[k] * w;
                        }
                        d += s.proj.z_cam * w;
                        out.records.push(BlendRecord {
                            gaussian: gi,
                            alpha,
                            transmittance: t,
                        });
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for k in 0..3 {
                        c[k] += background[k] * t;
                    }
                    let pix = y * cam.width + x;
                    out.spans.push((pix, start, out.records.len() as u32));
                    out.color.push((pix, c, d, 1.0 - t, t));
                }
            }
            out
        })
        .collect();

    let n_pix = cam.width * cam.height;
    let mut color = vec![[0.0; 3]; n_pix];
    let mut depth = vec![0.0; n_pix];
    let mut alpha = vec![0.0; n_pix];
    let mut raw_depth = vec![0.0; n_pix];
    let mut spans = vec![(0u32, 0u32); n_pix];
    let mut records = Vec::with_capacity(tiles.iter().map(|t| t.records.len()).sum());
    for tile in tiles {
        let base = records.len() as u32;
        records.extend_from_slice(&tile.records);
        for (pix, s, e) in tile.spans {
            spans[pix] = (base + s, base + e);
        }
        for (pix, c, d, a, _) in tile.color {
            color[pix] = c;
            alpha[pix] = a;
            raw_depth[pix] = d;
            depth[pix] = if a > DEPTH_ALPHA_FLOOR { d / a } else { cam.far };
        }
    }

    Ok(RenderOutput {
        color: RgbImage::from_vec(cam.width, cam.height, color)?,
        depth: GrayImage::from_vec(cam.width, cam.height, depth)?,
        alpha: GrayImage::from_vec(cam.width, cam.height, alpha)?,
        records,
        spans,
        raw_depth,
        splats,
        background,
    })
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2: [f64; 2],
    conic: Sym2,
    opacity: f64,
    color: [f64; 3],
    z: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean2[0] += o.mean2[0];
        self.mean2[1] += o.mean2[1];
        self.conic.xx += o.conic.xx;
        self.conic.xy += o.conic.xy;
        self.conic.yy += o.conic.yy;
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
        self.z += o.z;
    }
}

/// Backward pass of [`render`]: gradients on every Gaussian's raw parameters.
///
/// Per-tile partial sums are merged in tile order, so the result does not
/// depend on the number of worker threads.
pub fn render_vjp(
    gs: &GaussianSet,
    cam: &Camera,
    out: &RenderOutput,
    upstream: &RenderUpstream<'_>,
) -> Result<RenderGrads> {
    if out.splats.len() != gs.len() || out.width() != cam.width || out.height() != cam.height {
        return Err(Error::Dimension("render output does not match the Gaussian set or camera".into()));
    }
    for (name, ok) in [
        ("color", upstream.color.is_none_or(|c| c.same_shape(&out.color))),
        ("depth", upstream.depth.is_none_or(|c| c.same_shape(&out.depth))),
        ("alpha", upstream.alpha.is_none_or(|c| c.same_shape(&out.alpha))),
    ] {
        if !ok {
            return Err(Error::Dimension(format!("upstream {name} gradient shape")));
        }
    }
    let grid = TileGrid::new(cam);
    let bg = out.background;

    let partials: Vec<Vec<(u32, ScreenGrad)>> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.pixel_bounds(tile, cam);
            // tile-local accumulation keyed by gaussian, in first-touch order
            let mut local: Vec<(u32, ScreenGrad)> = Vec::new();
            let mut slot_of = vec![u32::MAX; gs.len()];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * cam.width + x;
                    let (s, e) = out.spans[pix];
                    if s == e {
                        continue;
                    }
                    let g_rgb = upstream.color.map_or([0.0; 3], |c| c.pixels()[pix]);
                    let g_depth = upstream.depth.map_or(0.0, |d| d.pixels()[pix]);
                    let mut g_alpha = upstream.alpha.map_or(0.0, |a| a.pixels()[pix]);
                    let a_pix = out.alpha.pixels()[pix];
                    let mut g_raw_depth = 0.0;
                    if a_pix > DEPTH_ALPHA_FLOOR {
                        g_raw_depth = g_depth / a_pix;
                        g_alpha -= g_depth * out.raw_depth[pix] / (a_pix * a_pix);
                    }
                    if g_rgb == [0.0; 3] && g_raw_depth == 0.0 && g_alpha == 0.0 {
                        continue;
                    }
                    // suffix values seen behind the current record
                    let mut acc_rgb = bg;
                    let mut acc_z = 0.0;
                    let mut acc_a = 0.0;
                    for rec in out.records[s as usize..e as usize].iter().rev() {
                        let sp = &out.splats[rec.gaussian as usize];
                        let (alpha, t) = (rec.alpha, rec.transmittance);
                        let mut d_alpha = g_raw_depth * (sp.proj.z_cam - acc_z) + g_alpha * (1.0 - acc_a);
                        for k in 0..3 {
                            d_alpha += g_rgb[k] * (sp.color[k] - acc_rgb[k]);
                        }
                        d_alpha *= t;
                        let w = alpha * t;

                        let (_, falloff, dx, dy) = splat_alpha(sp, x as f64, y as f64)
                            .expect("recorded splat must cover its pixel");
                        let d_power = d_alpha * alpha;
                        let c = &sp.conic;
                        let g = ScreenGrad {
                            mean2: [d_power * (c.xx * dx + c.xy * dy), d_power * (c.xy * dx + c.yy * dy)],
                            conic: Sym2 {
                                xx: -0.5 * dx * dx * d_power,
                                xy: -dx * dy * d_power,
                                yy: -0.5 * dy * dy * d_power,
                            },
                            opacity: d_alpha * falloff,
                            color: [g_rgb[0] * w, g_rgb[1] * w, g_rgb[2] * w],
                            z: g_raw_depth * w,
                        };
                        let slot = &mut slot_of[rec.gaussian as usize];
                        if *slot == u32::MAX {
                            *slot = local.len() as u32;
                            local.push((rec.gaussian, ScreenGrad::default()));
                        }
                        local[*slot as usize].1.add(&g);

                        for k in 0..3 {
                            acc_rgb[k] = sp.color[k] * alpha + (1.0 - alpha) * acc_rgb[k];
                        }
                        acc_z = sp.proj.z_cam * alpha + (1.0 - alpha) * acc_z;
                        acc_a = alpha + (1.0 - alpha) * acc_a;
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); gs.len()];
    for tile in &partials {
        for (gi, g) in tile {
            screen[*gi as usize].add(g);
        }
    }

    let gaussians: Vec<GaussianGrad> = screen
        .par_iter()
        .enumerate()
        .map(|(i, sg)| {
            let sp = &out.splats[i];
            if !sp.proj.valid || sp.tiles.is_none() {
                return GaussianGrad::default();
            }
            let g = gs.get(i);
            // conic = inverse(cov + reg): dL/dcov = -K G K with G the
            // symmetric-matrix form of dL/dconic
            let k = &sp.conic;
            let gm = [[sg.conic.xx, 0.5 * sg.conic.xy], [0.5 * sg.conic.xy, sg.conic.yy]];
            let km = [[k.xx, k.xy], [k.xy, k.yy]];
            let mut kg = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    kg[r][c] = km[r][0] * gm[0][c] + km[r][1] * gm[1][c];
                }
            }
            let mut dcov = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    dcov[r][c] = -(kg[r][0] * km[0][c] + kg[r][1] * km[1][c]);
                }
            }
            let up = ProjectedGrad {
                mean2: sg.mean2,
                cov2: Sym2 {
                    xx: dcov[0][0],
                    xy: dcov[0][1] + dcov[1][0],
                    yy: dcov[1][1],
                },
                z_cam: sg.z,
            };
            let mut grad = project_gaussian_vjp(&g, cam, &up);
            grad.opacity_logit = sg.opacity * sp.opacity * (1.0 - sp.opacity);
            for c in 0..3 {
                grad.color_logit[c] = sg.color[c] * sp.color[c] * (1.0 - sp.color[c]);
            }
            grad
        })
        .collect();

    Ok(RenderGrads {
        gaussians,
        mean2: screen.iter().map(|s| s.mean2).collect(),
    })
}
