/// Layer activation. The numeric code is the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Linear,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Softmax => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Softmax,
            3 => Activation::Linear,
            _ => return None,
        })
    }

    /// Apply in place to one row of pre-activations.
    pub(crate) fn apply_row(self, row: &mut [f64]) {
        match self {
            Activation::Relu => row.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Sigmoid => row.iter_mut().for_each(|x| *x = sigmoid_scalar(*x)),
            Activation::Softmax => softmax_in_place(row),
            Activation::Linear => {}
        }
    }

    /// Turn `grad` (w.r.t. the activation output) into the gradient w.r.t. the
    /// pre-activation, given one row of pre- and post-activation values.
    pub(crate) fn backprop_row(self, pre: &[f64], post: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (g, &z) in grad.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in grad.iter_mut().zip(post) {
                    *g *= y * (1.0 - y);
                }
            }
            Activation::Softmax => {
                let dot: f64 = grad.iter().zip(post).map(|(g, y)| g * y).sum();
                for (g, &y) in grad.iter_mut().zip(post) {
                    *g = y * (*g - dot);
                }
            }
            Activation::Linear => {}
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

#[inline]
pub(crate) fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Index of the largest value; the earliest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
