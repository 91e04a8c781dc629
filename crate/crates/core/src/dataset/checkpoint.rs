//! Binary training checkpoints.
//!
//! Layout: `EVCK`, u32 version, then little-endian sections (config text,
//! step, Gaussians, Adam moments, field shape and weights, density
//! statistics, RNG state) and a trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::deform::{DeformDecoder, DeformationField, FieldConfig, PlaneGrids};
use crate::optim::Adam;
use crate::scene::GaussianSet;
use crate::trainer::{DensityStats, FieldOptim, GaussianOptim, TrainConfig, TrainState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }

    fn adam(&mut self, a: &Adam) {
        self.f64s(&a.m);
        self.f64s(&a.v);
        self.u64(a.steps);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("checkpoint ends inside a field at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Integrity(format!("checkpoint declares an impossible length {n}")));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn adam(&mut self) -> Result<Adam> {
        Ok(Adam {
            m: self.f64s()?,
            v: self.f64s()?,
            steps: self.u64()?,
        })
    }
}

fn rows<const N: usize>(flat: Vec<f64>, n: usize, what: &str) -> Result<Vec<[f64; N]>> {
    if flat.len() != n * N {
        return Err(Error::Integrity(format!("{what}: expected {} values, found {}", n * N, flat.len())));
    }
    Ok(flat.chunks_exact(N).map(|c| c.try_into().expect("row width")).collect())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let s = &ck.state;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.bytes(ck.config.to_text().as_bytes());
    w.u64(s.step);

    let g = &s.gaussians;
    w.u64(g.len() as u64);
    w.f64s(g.means.as_flattened());
    w.f64s(g.rotations.as_flattened());
    w.f64s(g.log_scales.as_flattened());
    w.f64s(&g.opacity_logits);
    w.f64s(g.color_logits.as_flattened());
    for a in s.gaussian_optim.groups() {
        w.adam(a);
    }

    let f = &s.field;
    let c = &f.config;
    for v in [c.spatial_res, c.time_res, c.features, c.width, c.depth, c.time_freqs] {
        w.u64(v as u64);
    }
    w.f64s(&f.grids.bounds_min);
    w.f64s(&f.grids.bounds_max);
    w.f64s(&f.grids.data);
    w.f64s(&f.decoder.params);
    w.adam(&s.field_optim.grids);
    w.adam(&s.field_optim.decoder);

    w.f64s(&s.density.grad_accum);
    w.u64(s.density.count.len() as u64);
    for &c in &s.density.count {
        w.0.extend_from_slice(&c.to_le_bytes());
    }

    w.0.extend_from_slice(&s.rng.get_seed());
    w.u64(s.rng.get_stream());
    w.0.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());

    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::Integrity(format!("checkpoint is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint digest mismatch (truncated or corrupted)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Integrity("config text is not UTF-8".into()))?;
    let config = TrainConfig::parse(text)?;
    let step = r.u64()?;

    let n = r.u64()? as usize;
    let gaussians = GaussianSet {
        means: rows(r.f64s()?, n, "means")?,
        rotations: rows(r.f64s()?, n, "rotations")?,
        log_scales: rows(r.f64s()?, n, "log-scales")?,
        opacity_logits: rows::<1>(r.f64s()?, n, "opacities")?.into_iter().map(|[v]| v).collect(),
        color_logits: rows(r.f64s()?, n, "colors")?,
    };
    let gaussian_optim = GaussianOptim {
        means: r.adam()?,
        rotations: r.adam()?,
        log_scales: r.adam()?,
        opacities: r.adam()?,
        colors: r.adam()?,
    };
    for (a, width) in gaussian_optim.groups().into_iter().zip([3, 4, 3, 1, 3]) {
        if a.m.len() != n * width || a.v.len() != n * width {
            return Err(Error::Integrity("optimizer moments do not match the Gaussian count".into()));
        }
    }

    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let field_config = FieldConfig {
        spatial_res: dims[0],
        time_res: dims[1],
        features: dims[2],
        width: dims[3],
        depth: dims[4],
        time_freqs: dims[5],
    };
    field_config.validate().map_err(|e| Error::Integrity(format!("field shape: {e}")))?;
    let bounds = |v: Vec<f64>| -> Result<[f64; 3]> {
        v.try_into().map_err(|_| Error::Integrity("grid bounds need three values".into()))
    };
    let bounds_min = bounds(r.f64s()?)?;
    let bounds_max = bounds(r.f64s()?)?;
    let grids = PlaneGrids {
        bounds_min,
        bounds_max,
        spatial_res: field_config.spatial_res,
        time_res: field_config.time_res,
        features: field_config.features,
        data: r.f64s()?,
    };
    if grids.data.len() != grids.plane_offset(6) {
        return Err(Error::Integrity("grid feature count does not match the field shape".into()));
    }
    let mut decoder = DeformDecoder::new(&field_config, &mut ChaCha8Rng::seed_from_u64(0));
    let params = r.f64s()?;
    if params.len() != decoder.params.len() {
        return Err(Error::Integrity("decoder weight count does not match the field shape".into()));
    }
    decoder.params = params;
    let field_optim = FieldOptim {
        grids: r.adam()?,
        decoder: r.adam()?,
    };

    let grad_accum = r.f64s()?;
    let count_len = r.len(4)?;
    let count = r
        .take(4 * count_len)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
    }

    Ok(Checkpoint {
        config,
        state: TrainState {
            step,
            gaussians,
            field: DeformationField {
                config: field_config,
                grids,
                decoder,
            },
            gaussian_optim,
            field_optim,
            density: DensityStats { grad_accum, count },
            rng,
        },
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(Error::file(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::file(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    decode_checkpoint(&bytes)
}
