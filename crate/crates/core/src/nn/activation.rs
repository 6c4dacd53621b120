use ndarray::{Array1, ArrayView1};

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward(out: f64, grad: f64) -> f64 {
    if out > 0.0 {
        grad
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut e = logits.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Binary cross-entropy of `sigmoid(z)` against label `y`, without forming the sigmoid.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn bce_with_logits_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

/// Huber loss with unit transition point.
pub fn huber(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn huber_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}
