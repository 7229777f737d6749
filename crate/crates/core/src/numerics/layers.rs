use serde::{Deserialize, Serialize};

use super::{dim_err, Matrix, NumericsError, Parameter, Result, Rng, Scalar};

/// Negative-side slope used by attention logits unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[inline]
fn leaky<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

/// Elementwise `max(x, slope * x)` for `slope` in (0, 1).
pub fn leaky_relu<T: Scalar>(x: &Matrix<T>, slope: T) -> Matrix<T> {
    x.map(|v| leaky(v, slope))
}

/// Derivative of leaky ReLU at `x`; the kink at zero takes the negative side.
#[inline]
pub fn leaky_relu_grad<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Softmax over the unmasked entries of `logits`. Masked entries are exactly zero.
pub fn softmax_masked<T: Scalar>(logits: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if logits.len() != mask.len() {
        return Err(dim_err(
            "softmax_masked",
            format!("{} logits, {} mask entries", logits.len(), mask.len()),
        ));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(None, |acc: Option<T>, l| Some(acc.map_or(l, |a| a.max(l))))
        .ok_or(NumericsError::EmptyNeighborhood)?;
    let mut out: Vec<T> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { T::zero() })
        .collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => leaky(x, T::lit(s)),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => leaky_relu_grad(z, T::lit(s)),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Affine layer `y = x W + b` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in_dim × out_dim`
    pub weight: Parameter<T>,
    /// `1 × out_dim`
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init with bound `sqrt(6 / fan_in)`, zero bias.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt();
        let w = Matrix::from_fn(in_dim, out_dim, |_, _| T::lit(rng.uniform(-bound, bound)));
        Self::from_parts(name, w, Matrix::zeros(1, out_dim))
    }

    pub fn from_parts(name: &str, weight: Matrix<T>, bias: Matrix<T>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.weight.value)?;
        let b = self.bias.value.row(0);
        for r in 0..y.rows() {
            super::axpy(T::one(), b, y.row_mut(r));
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient wrt `x`.
    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
        let dw = x.t_matmul(dy)?;
        self.weight.grad.add_scaled(T::one(), &dw)?;
        let db = self.bias.grad.row_mut(0);
        for r in 0..dy.rows() {
            super::axpy(T::one(), dy.row(r), db);
        }
        dy.matmul_t(&self.weight.value)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Multi-layer perceptron with one activation on hidden layers and another on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    output: Matrix<T>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.output
    }
}

impl<T: Scalar> Mlp<T> {
    /// `dims` lists the input width, every hidden width, then the output width.
    pub fn new(
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NumericsError::Argument(format!(
                "mlp dims must have at least two positive entries, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn from_layers(
        layers: Vec<Linear<T>>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(NumericsError::Argument("mlp needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(dim_err(
                    "mlp",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        w[0].out_dim(),
                        i + 1,
                        w[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<MlpCache<T>> {
        if x.cols() != self.in_dim() {
            return Err(dim_err(
                "mlp_forward",
                format!("input has {} columns, expected {}", x.cols(), self.in_dim()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            let act = self.activation_of(i);
            let y = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Output only, no cache retained.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x)?.output)
    }

    /// Backpropagates `d_out` through the cached pass; returns the input gradient.
    pub fn backward(&mut self, cache: &MlpCache<T>, d_out: &Matrix<T>) -> Result<Matrix<T>> {
        if d_out.shape() != cache.output.shape() {
            return Err(dim_err(
                "mlp_backward",
                format!("{:?} vs cached {:?}", d_out.shape(), cache.output.shape()),
            ));
        }
        let mut grad = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_of(i);
            let z = &cache.pre[i];
            let y_next = if i + 1 == self.layers.len() {
                &cache.output
            } else {
                &cache.inputs[i + 1]
            };
            for ((g, &zv), &yv) in grad.data_mut().iter_mut().zip(z.data()).zip(y_next.data()) {
                *g *= act.derivative(zv, yv);
            }
            grad = self.layers[i].backward(&cache.inputs[i], &grad)?;
        }
        Ok(grad)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }
}
