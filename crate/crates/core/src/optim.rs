//! Adam over flat parameter groups.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Moments and step count for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed without resizing moments");
        assert_eq!(grads.len(), params.len());
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps as i32);
        let c2 = 1.0 - BETA2.powi(self.steps as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }

    /// Keeps rows (of `width` values) listed in `keep`, in that order, then
    /// appends `added` zero rows.
    pub fn reshape_rows(&mut self, width: usize, keep: &[usize], added: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity((keep.len() + added) * width);
            for &r in keep {
                out.extend_from_slice(&buf[r * width..(r + 1) * width]);
            }
            out.resize((keep.len() + added) * width, 0.0);
            *buf = out;
        }
    }
}

/// `a * (b / a)^fraction`, clamped to the endpoints.
pub fn exponential_decay(start: f64, end: f64, fraction: f64) -> f64 {
    let f = fraction.clamp(0.0, 1.0);
    (start.ln() * (1.0 - f) + end.ln() * f).exp()
}
