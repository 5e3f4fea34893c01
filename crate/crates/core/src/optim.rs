//! SGD with momentum and L2 weight decay.
//!
//! ```text
//! g <- g + weight_decay * w
//! v <- momentum * v + g
//! w <- w - lr * v
//! ```

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over a fixed, ordered list of parameter tensors. The list
    /// must have the same shapes on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            assert_eq!(w.len(), g.len());
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}
