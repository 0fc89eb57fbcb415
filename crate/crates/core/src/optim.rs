use crate::param::Parameterized;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients of every trainable
    /// parameter. Gradients are left in place.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.learning_rate, self.eps);
        let moments = &mut self.moments;
        let mut slot = 0;
        model.visit_params("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if moments.len() <= slot {
                moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let (m, v) = &mut moments[slot];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[i] -= lr * update;
            }
            slot += 1;
        });
    }
}
