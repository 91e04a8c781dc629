//! Event windows, neutralization masks and the event loss.

use rand::Rng;

use crate::image::luminance;
use crate::{Error, GrayImage, Image, Result, RgbImage};

/// Floor added before taking logs of intensity.
pub const LOG_EPS: f64 = 1e-3;

/// Log intensity used by both the event model and the simulator.
#[inline]
pub fn log_intensity(y: f64) -> f64 {
    (y + LOG_EPS).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: f64,
    /// `+1` or `-1`.
    pub p: i8,
}

/// Time-ordered events from one sensor of size `width x height`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        let s = Self {
            width,
            height,
            events,
        };
        let problems = s.problems();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Every invariant violation, by event index.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if e.x as usize >= self.width || e.y as usize >= self.height {
                out.push(format!(
                    "event {i}: coordinate ({}, {}) outside {}x{}",
                    e.x, e.y, self.width, self.height
                ));
            }
            if !e.t.is_finite() {
                out.push(format!("event {i}: non-finite timestamp"));
            } else if e.t < prev {
                out.push(format!("event {i}: timestamp {} precedes {}", e.t, prev));
            }
            if e.p != 1 && e.p != -1 {
                out.push(format!("event {i}: polarity {} is not +1 or -1", e.p));
            }
            if e.t.is_finite() {
                prev = prev.max(e.t);
            }
        }
        out
    }

    /// Events with `t_s < t <= t_e`.
    pub fn window(&self, t_s: f64, t_e: f64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t <= t_s);
        let hi = self.events.partition_point(|e| e.t <= t_e);
        &self.events[lo..hi.max(lo)]
    }
}

/// Ground-truth log-intensity change over `(t_s, t_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub t_s: f64,
    pub t_e: f64,
    pub eta: f64,
    /// Per-pixel polarity sum.
    pub net_polarity: Image<i32>,
    pub delta_l: GrayImage,
    pub mask: Image<u8>,
}

impl EventWindow {
    pub fn width(&self) -> usize {
        self.delta_l.width()
    }

    pub fn height(&self) -> usize {
        self.delta_l.height()
    }

    pub fn active_pixels(&self) -> usize {
        self.mask.pixels().iter().filter(|&&m| m != 0).count()
    }
}

pub fn accumulate_window(events: &EventStream, t_s: f64, t_e: f64, eta: f64) -> Result<EventWindow> {
    if !(t_s < t_e) {
        return Err(Error::Range(format!("event window start {t_s} is not before end {t_e}")));
    }
    let (w, h) = (events.width, events.height);
    let mut net = Image::filled(w, h, 0i32);
    let mut touched = Image::filled(w, h, false);
    for e in events.window(t_s, t_e) {
        let (x, y) = (e.x as usize, e.y as usize);
        *net.get_mut(x, y) += e.p as i32;
        *touched.get_mut(x, y) = true;
    }
    let delta_l = net.map(|&n| eta * n as f64);
    let mask = Image::from_fn(w, h, |x, y| u8::from(!(*touched.get(x, y) && *net.get(x, y) == 0)));
    Ok(EventWindow {
        t_s,
        t_e,
        eta,
        net_polarity: net,
        delta_l,
        mask,
    })
}

/// Window with length uniform in `[l_min, l_max]` and start uniform in
/// `[0, span - length]`.
pub fn sample_window(rng: &mut impl Rng, l_min: f64, l_max: f64, span: f64) -> Result<(f64, f64)> {
    if !(l_min > 0.0 && l_min <= l_max) {
        return Err(Error::Config(format!("window lengths need 0 < l_min <= l_max, got {l_min}, {l_max}")));
    }
    if l_max > span {
        return Err(Error::Config(format!("l_max {l_max} exceeds capture span {span}")));
    }
    let len = if l_min == l_max {
        l_min
    } else {
        rng.random_range(l_min..=l_max)
    };
    let room = span - len;
    let t_s = if room > 0.0 { rng.random_range(0.0..=room) } else { 0.0 };
    Ok((t_s, t_s + len))
}

/// `log(Y_e + eps) - log(Y_s + eps)` with Rec.601 luminance.
pub fn predicted_log_diff(img_s: &RgbImage, img_e: &RgbImage) -> Result<GrayImage> {
    if !img_s.same_shape(img_e) {
        return Err(Error::Dimension("log-difference inputs differ in size".into()));
    }
    let data = img_s
        .pixels()
        .iter()
        .zip(img_e.pixels())
        .map(|(s, e)| log_intensity(luminance(e)) - log_intensity(luminance(s)))
        .collect();
    Image::from_vec(img_s.width(), img_s.height(), data)
}

/// Gradients of a scalar through [`predicted_log_diff`] onto both images.
pub fn predicted_log_diff_vjp(
    img_s: &RgbImage,
    img_e: &RgbImage,
    upstream: &GrayImage,
) -> Result<(RgbImage, RgbImage)> {
    if !img_s.same_shape(img_e) || !img_s.same_shape(upstream) {
        return Err(Error::Dimension("log-difference gradient inputs differ in size".into()));
    }
    let grad = |img: &RgbImage, sign: f64| {
        let data = img
            .pixels()
            .iter()
            .zip(upstream.pixels())
            .map(|(c, g)| {
                let k = sign * g / (luminance(c) + LOG_EPS);
                crate::image::LUMA_WEIGHTS.map(|w| k * w)
            })
            .collect();
        Image::from_vec(img.width(), img.height(), data)
    };
    Ok((grad(img_s, -1.0)?, grad(img_e, 1.0)?))
}

/// Masked mean squared error and whether the mask was empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventLoss {
    pub value: f64,
    pub empty: bool,
}

pub fn event_loss(window: &EventWindow, pred: &GrayImage) -> Result<EventLoss> {
    Ok(event_loss_with_grad(window, pred)?.0)
}

/// Loss plus its gradient with respect to `pred`.
pub fn event_loss_with_grad(window: &EventWindow, pred: &GrayImage) -> Result<(EventLoss, GrayImage)> {
    if !window.delta_l.same_shape(pred) {
        return Err(Error::Dimension("event window and prediction differ in size".into()));
    }
    let active = window.active_pixels();
    let mut grad = Image::filled(pred.width(), pred.height(), 0.0);
    if active == 0 {
        return Ok((EventLoss { value: 0.0, empty: true }, grad));
    }
    let norm = 1.0 / active as f64;
    let mut sum = 0.0;
    for (((g, &m), &gt), &p) in grad
        .pixels_mut()
        .iter_mut()
        .zip(window.mask.pixels())
        .zip(window.delta_l.pixels())
        .zip(pred.pixels())
    {
        if m != 0 {
            let r = p - gt;
            sum += r * r;
            *g = 2.0 * r * norm;
        }
    }
    Ok((
        EventLoss {
            value: sum * norm,
            empty: false,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(x: u16, y: u16, t: f64, p: i8) -> Event {
        Event { x, y, t, p }
    }

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(4, 3, events).unwrap()
    }

    #[test]
    fn single_event() {
        let w = accumulate_window(&stream(vec![ev(2, 1, 0.5, 1)]), 0.0, 1.0, 0.2).unwrap();
        assert_eq!(*w.delta_l.get(2, 1), 0.2);
        assert_eq!(*w.mask.get(2, 1), 1);
        assert_eq!(*w.delta_l.get(0, 0), 0.0);
        assert_eq!(*w.mask.get(0, 0), 1);
    }

    #[test]
    fn cancelled_events_are_masked() {
        let w = accumulate_window(&stream(vec![ev(1, 1, 0.2, 1), ev(1, 1, 0.3, -1)]), 0.0, 1.0, 0.2).unwrap();
        assert_eq!(*w.delta_l.get(1, 1), 0.0);
        assert_eq!(*w.mask.get(1, 1), 0);
    }

    #[test]
    fn partial_cancellation_keeps_net() {
        let evs = vec![ev(0, 2, 0.1, 1), ev(0, 2, 0.2, 1), ev(0, 2, 0.3, -1)];
        let net: i32 = evs.iter().map(|e| e.p as i32).sum();
        let w = accumulate_window(&stream(evs), 0.0, 1.0, 0.1).unwrap();
        assert_eq!(*w.delta_l.get(0, 2), 0.1 * net as f64);
        assert_eq!(*w.mask.get(0, 2), 1);
    }

    #[test]
    fn window_is_half_open() {
        let s = stream(vec![ev(0, 0, 0.5, 1), ev(0, 0, 1.0, 1)]);
        let w = accumulate_window(&s, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(w.net_polarity.get(0, 0), &1);
        assert!(matches!(accumulate_window(&s, 1.0, 1.0, 1.0), Err(Error::Range(_))));
    }

    #[test]
    fn stream_validation_lists_problems() {
        let err = EventStream::new(4, 3, vec![ev(9, 0, 0.5, 1), ev(0, 0, 0.1, 2)]).unwrap_err();
        match err {
            Error::Validation(p) => assert_eq!(p.len(), 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn degenerate_window_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (s, e) = sample_window(&mut rng, 0.01, 0.01, 1.0).unwrap();
            assert_abs_diff_eq!(e - s, 0.01, epsilon = 1e-15);
            assert!(s >= 0.0 && e <= 1.0);
        }
    }

    #[test]
    fn window_length_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let (s, e) = sample_window(&mut rng, 1e-3, 9e-3, 1.0).unwrap();
                e - s
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 5e-3).abs() < 0.05 * 5e-3, "{mean}");
    }

    #[test]
    fn window_sampling_is_seeded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_window(&mut rng, 1e-3, 5e-2, 1.0).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_window(&mut rng, 0.1, 2.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn log_diff_values() {
        let a = RgbImage::filled(3, 2, [0.2; 3]);
        let b = RgbImage::filled(3, 2, [0.4; 3]);
        assert!(predicted_log_diff(&a, &a).unwrap().pixels().iter().all(|&v| v == 0.0));
        let d = predicted_log_diff(&a, &b).unwrap();
        let expected = 0.401f64.ln() - 0.201f64.ln();
        for &v in d.pixels() {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(expected, 0.6906, epsilon = 1e-4);
        let c = RgbImage::filled(3, 2, [0.8; 3]);
        let up = predicted_log_diff(&b, &c).unwrap();
        let down = predicted_log_diff(&c, &b).unwrap();
        for (u, d) in up.pixels().iter().zip(down.pixels()) {
            assert_abs_diff_eq!(u + d, 0.0, epsilon = 1e-15);
        }
        assert!(predicted_log_diff(&a, &RgbImage::filled(2, 2, [0.0; 3])).is_err());
    }

    #[test]
    fn log_diff_gradient_matches_finite_differences() {
        let a = RgbImage::from_fn(2, 2, |x, y| [0.1 + 0.2 * x as f64, 0.3, 0.05 * y as f64]);
        let b = RgbImage::from_fn(2, 2, |x, y| [0.5, 0.1 * (x + y) as f64, 0.7]);
        let up = GrayImage::from_fn(2, 2, |x, y| 1.0 + x as f64 - 0.5 * y as f64);
        let scalar = |a: &RgbImage, b: &RgbImage| -> f64 {
            predicted_log_diff(a, b)
                .unwrap()
                .pixels()
                .iter()
                .zip(up.pixels())
                .map(|(d, u)| d * u)
                .sum()
        };
        let (ga, gb) = predicted_log_diff_vjp(&a, &b, &up).unwrap();
        let h = 1e-6;
        for p in 0..4 {
            for c in 0..3 {
                let mut ap = a.clone();
                ap.pixels_mut()[p][c] += h;
                let mut am = a.clone();
                am.pixels_mut()[p][c] -= h;
                let fd = (scalar(&ap, &b) - scalar(&am, &b)) / (2.0 * h);
                assert_abs_diff_eq!(ga.pixels()[p][c], fd, epsilon = 1e-6);
                let mut bp = b.clone();
                bp.pixels_mut()[p][c] += h;
                let mut bm = b.clone();
                bm.pixels_mut()[p][c] -= h;
                let fd = (scalar(&a, &bp) - scalar(&a, &bm)) / (2.0 * h);
                assert_abs_diff_eq!(gb.pixels()[p][c], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn loss_values() {
        let s = stream(vec![ev(2, 2, 0.4, 1), ev(1, 1, 0.5, 1), ev(2, 2, 0.6, -1)]);
        let mut w = accumulate_window(&s, 0.0, 1.0, 0.2).unwrap();
        assert_eq!(event_loss(&w, &w.delta_l.clone()).unwrap().value, 0.0);

        // only (1, 1) supervised
        w.mask.pixels_mut().fill(0);
        *w.mask.get_mut(1, 1) = 1;
        let mut pred = GrayImage::filled(4, 3, 0.0);
        assert_abs_diff_eq!(event_loss(&w, &pred).unwrap().value, 0.04, epsilon = 1e-15);
        *pred.get_mut(3, 0) = 7.0;
        assert_abs_diff_eq!(event_loss(&w, &pred).unwrap().value, 0.04, epsilon = 1e-15);

        w.mask.pixels_mut().fill(0);
        assert_eq!(
            event_loss(&w, &pred).unwrap(),
            EventLoss {
                value: 0.0,
                empty: true
            }
        );
    }

    fn arb_events(n: usize) -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u16..4, 0u16..3, 0.0..1.0f64, prop::bool::ANY), 0..n).prop_map(|mut v| {
            v.sort_by(|a, b| a.2.total_cmp(&b.2));
            v.into_iter()
                .map(|(x, y, t, up)| ev(x, y, t, if up { 1 } else { -1 }))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn delta_is_exact_multiple(evs in arb_events(40), eta in 0.01..1.0f64) {
            let w = accumulate_window(&stream(evs), 0.0, 1.0, eta).unwrap();
            for (d, n) in w.delta_l.pixels().iter().zip(w.net_polarity.pixels()) {
                prop_assert_eq!(d.to_bits(), (eta * *n as f64).to_bits());
            }
        }

        #[test]
        fn additive_without_cancellation(evs in arb_events(40), split in 0.05..0.95f64) {
            // keep a single polarity per pixel so no window can cancel
            let evs: Vec<Event> = evs
                .into_iter()
                .map(|e| Event { p: if (e.x + e.y) % 2 == 0 { 1 } else { -1 }, ..e })
                .collect();
            let s = stream(evs);
            for eta in [0.25, 0.2] {
                let whole = accumulate_window(&s, 0.0, 1.0, eta).unwrap();
                let a = accumulate_window(&s, 0.0, split, eta).unwrap();
                let b = accumulate_window(&s, split, 1.0, eta).unwrap();
                for i in 0..whole.delta_l.len() {
                    prop_assert_eq!(
                        whole.net_polarity.pixels()[i],
                        a.net_polarity.pixels()[i] + b.net_polarity.pixels()[i]
                    );
                    if eta == 0.25 {
                        prop_assert_eq!(
                            whole.delta_l.pixels()[i],
                            a.delta_l.pixels()[i] + b.delta_l.pixels()[i]
                        );
                    }
                }
            }
        }

        #[test]
        fn masked_pixels_never_matter(evs in arb_events(40), noise in prop::collection::vec(-5.0..5.0f64, 12)) {
            let w = accumulate_window(&stream(evs), 0.0, 1.0, 0.2).unwrap();
            let base = GrayImage::filled(4, 3, 0.1);
            let mut perturbed = base.clone();
            for (i, p) in perturbed.pixels_mut().iter_mut().enumerate() {
                if w.mask.pixels()[i] == 0 {
                    *p += noise[i];
                }
            }
            prop_assert_eq!(event_loss(&w, &base).unwrap(), event_loss(&w, &perturbed).unwrap());
        }

        #[test]
        fn masked_pixels_had_cancelling_events(evs in arb_events(40)) {
            let s = stream(evs);
            let w = accumulate_window(&s, 0.0, 1.0, 0.2).unwrap();
            for y in 0..3 {
                for x in 0..4 {
                    if *w.mask.get(x, y) == 0 {
                        let here: Vec<_> = s.events.iter().filter(|e| e.x as usize == x && e.y as usize == y && e.t > 0.0).collect();
                        prop_assert!(!here.is_empty());
                        prop_assert_eq!(here.iter().map(|e| e.p as i32).sum::<i32>(), 0);
                    }
                }
            }
        }

        #[test]
        fn log_diff_antisymmetric(a in prop::collection::vec(0.0..1.0f64, 18), b in prop::collection::vec(0.0..1.0f64, 18)) {
            let mk = |v: &[f64]| RgbImage::from_vec(3, 2, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
            let (ia, ib) = (mk(&a), mk(&b));
            let ab = predicted_log_diff(&ia, &ib).unwrap();
            let ba = predicted_log_diff(&ib, &ia).unwrap();
            for (x, y) in ab.pixels().iter().zip(ba.pixels()) {
                prop_assert_eq!(x.to_bits(), (-y).to_bits());
            }
        }
    }
}
