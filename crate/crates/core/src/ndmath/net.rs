//! Fully-connected layers and networks with inverted dropout and exact
//! reverse-mode gradients.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use super::activation::Activation;
use super::matrix::{axpy, Matrix};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Shape and behaviour of one layer, without weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, dropout: f64) -> Self {
        LayerSpec {
            inputs,
            outputs,
            activation,
            dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `outputs × inputs`
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
    /// Applied after the activation, in training mode only.
    pub dropout_rate: f64,
}

impl DenseLayer {
    pub fn new(weights: Matrix, biases: Vec<f64>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                actual: biases.len(),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameter".into()));
        }
        Ok(DenseLayer {
            weights,
            biases,
            activation,
            dropout_rate,
        })
    }

    /// He-uniform weights ahead of ReLU, Glorot-uniform otherwise; zero biases.
    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        let fan_in = spec.inputs as f64;
        let fan_out = spec.outputs as f64;
        let limit = match spec.activation {
            Activation::Relu => (6.0 / fan_in).sqrt(),
            _ => (6.0 / (fan_in + fan_out)).sqrt(),
        };
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidArgument(format!("init range: {e}")))?;
        let data = (0..spec.inputs * spec.outputs).map(|_| dist.sample(rng)).collect();
        let weights = Matrix::from_vec(spec.outputs, spec.inputs, data)?;
        DenseLayer::new(weights, vec![0.0; spec.outputs], spec.activation, spec.dropout)
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.inputs(), self.outputs(), self.activation, self.dropout_rate)
    }

    pub fn param_count(&self) -> usize {
        self.outputs() * self.inputs() + self.outputs()
    }

    fn affine(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul_transposed(&self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases) {
                *v += b;
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    pub mode: Mode,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    /// Post-activation values before dropout.
    pub activated: Vec<Matrix>,
    /// Per-layer dropout scale (0 or 1/(1-rate)) for every unit, if dropout ran.
    pub masks: Vec<Option<Vec<f64>>>,
    output: Matrix,
}

impl Trace {
    /// Final output, after any dropout on the last layer.
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Empty when parameter gradients were not requested.
    pub layers: Vec<LayerGrad>,
    pub input: Option<Matrix>,
}

impl Gradients {
    /// Gradient slices in the same order as [`DenseNet::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.biases.as_slice()])
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    /// The incoming gradient is w.r.t. the last layer's pre-activation
    /// (skipping its activation and dropout) rather than its output.
    pub from_preactivation: bool,
    pub param_grads: bool,
    pub input_grad: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            from_preactivation: false,
            param_grads: true,
            input_grad: true,
        }
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].outputs(),
                    actual: pair[1].inputs(),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[..last].iter().any(|l| l.activation == Activation::Softmax) {
            return Err(Error::InvalidArgument("softmax is only allowed on the output layer".into()));
        }
        Ok(DenseNet {
            layers,
            mode: Mode::Training,
        })
    }

    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&s| DenseLayer::init(s, rng))
            .collect::<Result<Vec<_>>>()?;
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(DenseLayer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Weight and bias slices for every layer, in order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    /// Round every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.cols(),
            });
        }
        Ok(())
    }

    /// Forward pass recording what `backward` needs. Dropout masks are drawn
    /// from `rng` only in training mode; inference never touches `rng`.
    pub fn forward(&self, input: &Matrix, rng: &mut Rng) -> Result<Trace> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut activated = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut current = input.clone();
        for layer in &self.layers {
            let z = layer.affine(&current)?;
            let mut a = z.clone();
            for r in 0..a.rows() {
                layer.activation.apply_row(a.row_mut(r));
            }
            let mut out = a.clone();
            let mask = if self.mode == Mode::Training && layer.dropout_rate > 0.0 {
                let keep = 1.0 - layer.dropout_rate;
                let scale = 1.0 / keep;
                let mask: Vec<f64> = (0..out.as_slice().len())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                for (v, m) in out.as_mut_slice().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            inputs.push(std::mem::replace(&mut current, out));
            pre.push(z);
            activated.push(a);
            masks.push(mask);
        }
        Ok(Trace {
            inputs,
            pre,
            activated,
            masks,
            output: current,
        })
    }

    /// Deterministic inference pass: no dropout regardless of `mode`.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut current = input.clone();
        for layer in &self.layers {
            current = layer.affine(&current)?;
            for r in 0..current.rows() {
                layer.activation.apply_row(current.row_mut(r));
            }
        }
        Ok(current)
    }

    /// Gradients of a loss w.r.t. every parameter and the input, given the
    /// loss gradient w.r.t. the network output.
    pub fn backward(&self, trace: &Trace, loss_grad: &Matrix) -> Result<Gradients> {
        self.backward_with(trace, loss_grad, BackwardOptions::default())
    }

    pub fn backward_with(&self, trace: &Trace, grad: &Matrix, opts: BackwardOptions) -> Result<Gradients> {
        let n = self.layers.len();
        if trace.inputs.len() != n || trace.pre.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "trace has {} layers, network has {n}",
                trace.inputs.len()
            )));
        }
        for (layer, z) in self.layers.iter().zip(&trace.pre) {
            if z.cols() != layer.outputs() {
                return Err(Error::ShapeMismatch("trace does not belong to this network".into()));
            }
        }
        let out = &trace.pre[n - 1];
        if grad.rows() != out.rows() || grad.cols() != out.cols() {
            return Err(Error::ShapeMismatch(format!(
                "loss gradient is {}x{}, output is {}x{}",
                grad.rows(),
                grad.cols(),
                out.rows(),
                out.cols()
            )));
        }

        let mut layer_grads = Vec::with_capacity(if opts.param_grads { n } else { 0 });
        let mut delta = grad.clone();
        let mut input_grad = None;
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            let skip_activation = idx == n - 1 && opts.from_preactivation;
            if !skip_activation {
                if let Some(mask) = &trace.masks[idx] {
                    for (d, m) in delta.as_mut_slice().iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                for r in 0..delta.rows() {
                    layer
                        .activation
                        .backprop_row(trace.pre[idx].row(r), trace.activated[idx].row(r), delta.row_mut(r));
                }
            }
            if opts.param_grads {
                let weights = delta.transpose_matmul(&trace.inputs[idx])?;
                let mut biases = vec![0.0; layer.outputs()];
                for row in delta.row_iter() {
                    axpy(1.0, row, &mut biases);
                }
                layer_grads.push(LayerGrad { weights, biases });
            }
            if idx > 0 || opts.input_grad {
                let next = delta.matmul(&layer.weights)?;
                if idx == 0 {
                    input_grad = Some(next);
                    break;
                }
                delta = next;
            } else {
                break;
            }
        }
        layer_grads.reverse();
        Ok(Gradients {
            layers: layer_grads,
            input: input_grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::loss::bce_loss;
    use crate::ndmath::rng::seeded;

    fn identity_layer(n: usize, activation: Activation) -> DenseLayer {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w.set(i, i, 1.0);
        }
        DenseLayer::new(w, vec![0.0; n], activation, 0.0).unwrap()
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let net = DenseNet::new(vec![identity_layer(3, Activation::Linear)]).unwrap();
        let v = Matrix::row_vector(&[1.5, -2.0, 0.25]);
        let trace = net.forward(&v, &mut seeded(0)).unwrap();
        assert_eq!(trace.output(), &v);
        assert_eq!(net.infer(&v).unwrap(), v);
    }

    #[test]
    fn hand_computed_two_layer_net() {
        // layer 1: W=[[1,-1],[2,0.5]], b=[0.5,-1], relu
        // layer 2: W=[[1,-2]], b=[0.25], relu
        let l1 = DenseLayer::new(
            Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap(),
            vec![0.5, -1.0],
            Activation::Relu,
            0.0,
        )
        .unwrap();
        let l2 = DenseLayer::new(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap(), vec![0.25], Activation::Relu, 0.0)
            .unwrap();
        let net = DenseNet::new(vec![l1, l2]).unwrap();
        // x = [3, 1]: h = relu([3-1+0.5, 6+0.5-1]) = [2.5, 5.5]; y = relu(2.5 - 11 + 0.25) = 0
        assert_eq!(net.infer(&Matrix::row_vector(&[3.0, 1.0])).unwrap().as_slice(), &[0.0]);
        // x = [1, 2]: h = relu([1-2+0.5, 2+1-1]) = [0, 2]; y = relu(0 - 4 + 0.25) = 0
        // x = [2, -4]: h = relu([2+4+0.5, 4-2-1]) = [6.5, 1]; y = relu(6.5 - 2 + 0.25) = 4.75
        assert_eq!(net.infer(&Matrix::row_vector(&[2.0, -4.0])).unwrap().as_slice(), &[4.75]);
    }

    #[test]
    fn inference_ignores_dropout_and_rng() {
        let mut rng = seeded(3);
        let net = DenseNet::init(&[LayerSpec::new(8, 16, Activation::Relu, 0.3), LayerSpec::new(16, 4, Activation::Linear, 0.0)], &mut rng)
            .unwrap()
            .with_mode(Mode::Inference);
        let x = Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let a = net.forward(&x, &mut seeded(1)).unwrap();
        let b = net.forward(&x, &mut seeded(2)).unwrap();
        assert_eq!(a.output(), b.output());
        assert!(a.masks.iter().all(Option::is_none));
        assert_eq!(a.output(), &net.infer(&x).unwrap());
    }

    #[test]
    fn dropout_keep_rate_within_three_sigma() {
        let layer = identity_layer(1000, Activation::Linear);
        let mut layer = layer;
        layer.dropout_rate = 0.3;
        let net = DenseNet::new(vec![layer]).unwrap();
        let x = Matrix::from_vec(100, 1000, vec![1.0; 100_000]).unwrap();
        let trace = net.forward(&x, &mut seeded(11)).unwrap();
        let kept = trace.output().as_slice().iter().filter(|&&v| v != 0.0).count() as f64;
        let n: f64 = 100_000.0;
        let p = 0.7;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((kept - n * p).abs() <= 3.0 * sigma, "kept {kept}");
        // inverted scaling
        let v = trace.output().as_slice().iter().find(|&&v| v != 0.0).unwrap();
        assert!((v - 1.0 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = seeded(5);
        let net = DenseNet::init(&[LayerSpec::new(4, 6, Activation::Relu, 0.0), LayerSpec::new(6, 2, Activation::Sigmoid, 0.0)], &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, -0.3, 0.2, 0.9], vec![1.0, 0.0, -1.0, 0.5]]).unwrap();
        let trace = net.forward(&x, &mut rng).unwrap();
        let g = net.backward(&trace, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.input.unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_bce_bias_gradient_is_p_minus_one() {
        let layer = DenseLayer::new(Matrix::from_rows(&[vec![0.4, -0.7]]).unwrap(), vec![0.1], Activation::Sigmoid, 0.0).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        let x = Matrix::row_vector(&[0.3, 0.8]);
        let trace = net.forward(&x, &mut seeded(0)).unwrap();
        let p = trace.output().get(0, 0);
        let dloss = crate::ndmath::loss::bce_output_grad(p, 1.0);
        let g = net.backward(&trace, &Matrix::row_vector(&[dloss])).unwrap();
        assert!((g.layers[0].biases[0] - (p - 1.0)).abs() < 1e-12);
        // same result feeding p - y at the pre-activation
        let opts = BackwardOptions {
            from_preactivation: true,
            ..Default::default()
        };
        let g2 = net.backward_with(&trace, &Matrix::row_vector(&[p - 1.0]), opts).unwrap();
        assert_eq!(g2.layers[0].biases[0], p - 1.0);
        assert!(bce_loss(p, 1.0) > 0.0);
    }

    #[test]
    fn softmax_only_on_output_layer() {
        let mut rng = seeded(0);
        let bad = DenseNet::init(&[LayerSpec::new(2, 2, Activation::Softmax, 0.0), LayerSpec::new(2, 2, Activation::Linear, 0.0)], &mut rng);
        assert!(bad.is_err());
        let ok = DenseNet::init(&[LayerSpec::new(2, 2, Activation::Relu, 0.0), LayerSpec::new(2, 2, Activation::Softmax, 0.0)], &mut rng);
        assert!(ok.is_ok());
    }

    #[test]
    fn dimension_errors() {
        let mut rng = seeded(0);
        assert!(DenseNet::init(&[LayerSpec::new(2, 3, Activation::Relu, 0.0), LayerSpec::new(4, 1, Activation::Linear, 0.0)], &mut rng).is_err());
        let net = DenseNet::init(&[LayerSpec::new(2, 3, Activation::Relu, 0.0)], &mut rng).unwrap();
        assert!(matches!(
            net.forward(&Matrix::row_vector(&[1.0, 2.0, 3.0]), &mut rng),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
        let other = DenseNet::init(&[LayerSpec::new(2, 5, Activation::Relu, 0.0)], &mut rng).unwrap();
        let trace = other.forward(&Matrix::row_vector(&[1.0, 2.0]), &mut rng).unwrap();
        assert!(net.backward(&trace, &Matrix::zeros(1, 3)).is_err());
        assert!(DenseLayer::new(Matrix::zeros(1, 1), vec![0.0], Activation::Linear, 1.0).is_err());
    }

    #[test]
    fn param_count_formula() {
        let mut rng = seeded(0);
        let net = DenseNet::init(&[LayerSpec::new(7, 5, Activation::Relu, 0.1), LayerSpec::new(5, 3, Activation::Softmax, 0.0)], &mut rng).unwrap();
        assert_eq!(net.param_count(), 7 * 5 + 5 + 5 * 3 + 3);
        assert_eq!(net.params().iter().map(|s| s.len()).sum::<usize>(), net.param_count());
    }

    /// `Σ r ⊙ output`, so the output gradient is just `r`.
    fn weighted_sum(net: &DenseNet, x: &Matrix, r: &Matrix) -> f64 {
        let out = net.infer(x).unwrap();
        out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        use rand::Rng as _;
        let acts = [Activation::Relu, Activation::Sigmoid, Activation::Linear];
        let mut rng = seeded(2024);
        for _ in 0..8 {
            let depth = rng.random_range(1..=3);
            let mut dims = vec![rng.random_range(2..6)];
            let mut specs = Vec::new();
            for d in 0..depth {
                let out = rng.random_range(2..6);
                let act = if d + 1 == depth && rng.random_bool(0.3) {
                    Activation::Softmax
                } else {
                    acts[rng.random_range(0..acts.len())]
                };
                specs.push(LayerSpec::new(*dims.last().unwrap(), out, act, 0.0));
                dims.push(out);
            }
            let mut net = DenseNet::init(&specs, &mut rng).unwrap();
            for p in net.params_mut() {
                p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            }
            let x = Matrix::from_vec(3, dims[0], (0..3 * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let r = Matrix::from_vec(3, dims[depth], (0..3 * dims[depth]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let trace = net.forward(&x, &mut rng).unwrap();
            let grads = net.backward(&trace, &r).unwrap();
            let analytic: Vec<f64> = grads.slices().concat();
            let h = 1e-6;
            let mut numeric = Vec::new();
            let n_tensors = net.params().len();
            for t in 0..n_tensors {
                for i in 0..net.params()[t].len() {
                    let orig = net.params()[t][i];
                    net.params_mut()[t][i] = orig + h;
                    let up = weighted_sum(&net, &x, &r);
                    net.params_mut()[t][i] = orig - h;
                    let down = weighted_sum(&net, &x, &r);
                    net.params_mut()[t][i] = orig;
                    numeric.push((up - down) / (2.0 * h));
                }
            }
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                assert!(rel <= 1e-4, "analytic {a} numeric {n}");
            }
        }
    }
}
