//! Event generation from dense frames by per-pixel threshold crossing of
//! linearly interpolated log luminance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::events::{log_intensity, Event, EventStream};
use crate::image::luminance;
use crate::{Error, Result, RgbImage};

/// Dense frames with strictly increasing timestamps.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<RgbImage>,
    timestamps: Vec<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::Dimension(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::Range("a frame sequence needs at least two frames".into()));
        }
        if let Some(i) = (1..timestamps.len()).find(|&i| !(timestamps[i] > timestamps[i - 1])) {
            return Err(Error::Range(format!(
                "timestamp {} at frame {i} does not increase past {}",
                timestamps[i],
                timestamps[i - 1]
            )));
        }
        if frames.iter().any(|f| !f.same_shape(&frames[0])) {
            return Err(Error::Dimension("frames differ in size".into()));
        }
        Ok(Self { frames, timestamps })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// Optional sensor noise; everything off by default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulatorNoise {
    /// Standard deviation of Gaussian timestamp jitter, seconds.
    pub timestamp_jitter: f64,
    /// Relative standard deviation of the per-event threshold.
    pub threshold_jitter: f64,
    pub seed: u64,
}

impl Default for SimulatorNoise {
    fn default() -> Self {
        Self {
            timestamp_jitter: 0.0,
            threshold_jitter: 0.0,
            seed: 0,
        }
    }
}

pub fn simulate(seq: &FrameSequence, contrast: f64) -> Result<EventStream> {
    simulate_with_noise(seq, contrast, &SimulatorNoise::default())
}

pub fn simulate_with_noise(seq: &FrameSequence, contrast: f64, noise: &SimulatorNoise) -> Result<EventStream> {
    if !(contrast > 0.0 && contrast.is_finite()) {
        return Err(Error::Config(format!("contrast threshold must be positive, got {contrast}")));
    }
    if !(noise.timestamp_jitter >= 0.0 && noise.threshold_jitter >= 0.0) {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    let (w, h) = (seq.width(), seq.height());
    if w > u16::MAX as usize + 1 || h > u16::MAX as usize + 1 {
        return Err(Error::Range("frame too large for 16-bit event coordinates".into()));
    }
    let logs: Vec<Vec<f64>> = seq
        .frames
        .iter()
        .map(|f| f.pixels().iter().map(|c| log_intensity(luminance(c))).collect())
        .collect();
    let ts = &seq.timestamps;
    let (t_first, t_last) = (ts[0], ts[ts.len() - 1]);

    let rows: Vec<Vec<Event>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let jitter_t = Normal::new(0.0, noise.timestamp_jitter.max(f64::MIN_POSITIVE)).expect("finite std");
            let jitter_c = Normal::new(0.0, noise.threshold_jitter.max(f64::MIN_POSITIVE)).expect("finite std");
            let mut row = Vec::new();
            for x in 0..w {
                let idx = y * w + x;
                let mut reference = logs[0][idx];
                let threshold = |rng: &mut ChaCha8Rng| {
                    if noise.threshold_jitter > 0.0 {
                        contrast * (1.0 + jitter_c.sample(rng)).max(0.1)
                    } else {
                        contrast
                    }
                };
                let mut c = threshold(&mut rng);
                for k in 1..ts.len() {
                    let (l0, l1) = (logs[k - 1][idx], logs[k][idx]);
                    let (t0, t1) = (ts[k - 1], ts[k]);
                    loop {
                        let (level, p) = if l1 - (reference + c) >= -1e-9 * c {
                            (reference + c, 1)
                        } else if (reference - c) - l1 >= -1e-9 * c {
                            (reference - c, -1)
                        } else {
                            break;
                        };
                        let frac = if l1 != l0 {
                            ((level - l0) / (l1 - l0)).clamp(0.0, 1.0)
                        } else {
                            1.0
                        };
                        let mut t = t0 + frac * (t1 - t0);
                        if noise.timestamp_jitter > 0.0 {
                            t = (t + jitter_t.sample(&mut rng)).clamp(t_first, t_last);
                        }
                        row.push(Event {
                            x: x as u16,
                            y: y as u16,
                            t,
                            p,
                        });
                        reference = level;
                        c = threshold(&mut rng);
                    }
                }
            }
            row
        })
        .collect();

    let mut events: Vec<Event> = rows.into_iter().flatten().collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    EventStream::new(w, h, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::accumulate_window;
    use approx::assert_abs_diff_eq;

    /// Gray frame whose log intensity equals `l` everywhere.
    fn gray_with_log(w: usize, h: usize, l: f64) -> RgbImage {
        let y = l.exp() - crate::events::LOG_EPS;
        RgbImage::filled(w, h, [y; 3])
    }

    #[test]
    fn constant_sequence_is_silent() {
        let f = RgbImage::filled(3, 3, [0.4, 0.2, 0.9]);
        let seq = FrameSequence::new(vec![f.clone(), f.clone(), f], vec![0.0, 0.5, 1.0]).unwrap();
        assert!(simulate(&seq, 0.1).unwrap().is_empty());
    }

    #[test]
    fn linear_ramp_crossings() {
        let seq = FrameSequence::new(vec![gray_with_log(1, 1, 0.0), gray_with_log(1, 1, 1.0)], vec![0.0, 1.0]).unwrap();
        let s = simulate(&seq, 0.25).unwrap();
        assert_eq!(s.len(), 4);
        for (e, t) in s.events.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert_eq!(e.p, 1);
            assert_abs_diff_eq!(e.t, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn ramp_split_over_many_frames() {
        let n = 11;
        let frames = (0..n).map(|i| gray_with_log(1, 1, -(i as f64) / 10.0)).collect();
        let ts = (0..n).map(|i| i as f64 / 10.0).collect();
        let s = simulate(&FrameSequence::new(frames, ts).unwrap(), 0.25).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.events.iter().all(|e| e.p == -1));
        assert_abs_diff_eq!(s.events[1].t, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn forward_then_reverse_balances() {
        let levels = [0.0, 0.3, 0.9, 1.37, 2.0];
        let mut seq: Vec<f64> = levels.to_vec();
        seq.extend(levels.iter().rev().skip(1));
        let frames: Vec<_> = seq
            .iter()
            .map(|&l| RgbImage::from_fn(2, 1, |x, _| [(l * (1.0 + x as f64)).exp() * 0.01 - 1e-3 + 0.01; 3]))
            .collect();
        let ts = (0..frames.len()).map(|i| i as f64).collect();
        let s = simulate(&FrameSequence::new(frames, ts).unwrap(), 0.2).unwrap();
        for x in 0..2 {
            let up = s.events.iter().filter(|e| e.x == x && e.p == 1).count() as i64;
            let down = s.events.iter().filter(|e| e.x == x && e.p == -1).count() as i64;
            assert!(up > 0);
            assert!((up - down).abs() <= 1, "{up} {down}");
        }
    }

    #[test]
    fn bad_inputs() {
        let f = RgbImage::filled(2, 2, [0.5; 3]);
        assert!(matches!(
            FrameSequence::new(vec![f.clone(), f.clone()], vec![0.0, 0.0]),
            Err(Error::Range(_))
        ));
        assert!(FrameSequence::new(vec![f.clone()], vec![0.0]).is_err());
        let seq = FrameSequence::new(vec![f.clone(), f], vec![0.0, 1.0]).unwrap();
        assert!(matches!(simulate(&seq, 0.0), Err(Error::Config(_))));
    }

    fn random_sequence(seed: u64, monotone: bool) -> FrameSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, n) = (5, 4, 8);
        let base: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.05..0.3)).collect();
        let rate: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.2..1.0)).collect();
        let frames = (0..n)
            .map(|k| {
                RgbImage::from_fn(w, h, |x, y| {
                    let i = y * w + x;
                    let v = if monotone {
                        base[i] * (1.0 + rate[i] * k as f64)
                    } else {
                        base[i] * (1.0 + rate[i] * (k as f64 * 1.3 + i as f64).sin().abs() * 3.0)
                    };
                    [v; 3]
                })
            })
            .collect();
        let ts = (0..n).map(|k| k as f64 * 0.1).collect();
        FrameSequence::new(frames, ts).unwrap()
    }

    #[test]
    fn round_trip_within_threshold() {
        for seed in 0..5 {
            let seq = random_sequence(seed, seed % 2 == 0);
            let c = 0.15;
            let s = simulate(&seq, c).unwrap();
            assert!(s.events.windows(2).all(|p| p[0].t <= p[1].t));
            let w = accumulate_window(&s, -1.0, 1.0, c).unwrap();
            let first = &seq.frames()[0];
            let last = seq.frames().last().unwrap();
            for i in 0..first.len() {
                let truth = log_intensity(luminance(&last.pixels()[i])) - log_intensity(luminance(&first.pixels()[i]));
                assert!((truth - w.delta_l.pixels()[i]).abs() <= c * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn halving_threshold_doubles_events() {
        let seq = random_sequence(11, true);
        let n1 = simulate(&seq, 0.2).unwrap().len();
        let n2 = simulate(&seq, 0.1).unwrap().len();
        assert!(n2 + seq.width() * seq.height() >= 2 * n1, "{n1} {n2}");
    }

    #[test]
    fn noise_is_seeded_and_sorted() {
        let seq = random_sequence(3, false);
        let noise = SimulatorNoise {
            timestamp_jitter: 0.01,
            threshold_jitter: 0.1,
            seed: 9,
        };
        let a = simulate_with_noise(&seq, 0.1, &noise).unwrap();
        let b = simulate_with_noise(&seq, 0.1, &noise).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate(&seq, 0.1).unwrap());
        assert!(a.events.windows(2).all(|p| p[0].t <= p[1].t));
    }
}
