use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Fully connected layer `y = x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut RngState) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        let weights = Tensor::new(vec![inputs, outputs], w).expect("shape matches data");
        Self::from_parameters(weights, Tensor::zeros(&[outputs])).expect("shapes agree")
    }

    pub fn from_parameters(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[1]] {
            return Err(Error::dim(
                "DenseLayer::from_parameters",
                weights.shape(),
                bias.shape(),
            ));
        }
        Ok(DenseLayer {
            grad_weights: Tensor::zeros(weights.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weights,
            bias,
            cached_input: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.inputs() {
            return Err(Error::dim("dense forward", x.shape(), self.weights.shape()));
        }
        let mut y = matmul(x, &self.weights)?;
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    /// Returns the input gradient; parameter gradients are written to the
    /// gradient buffers only when `accumulate_params` is set.
    pub fn backward(&mut self, grad_out: &Tensor, accumulate_params: bool) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("dense backward called before forward".into()))?;
        if grad_out.shape() != [x.rows(), self.outputs()] {
            return Err(Error::dim(
                "dense backward",
                grad_out.shape(),
                &[x.rows(), self.outputs()],
            ));
        }
        if accumulate_params {
            self.grad_weights = matmul_tn(x, grad_out)?;
            let mut gb = vec![0.0; self.outputs()];
            for i in 0..grad_out.rows() {
                for (g, v) in gb.iter_mut().zip(grad_out.row(i)) {
                    *g += v;
                }
            }
            self.grad_bias = Tensor::vector(gb);
        }
        matmul_nt(grad_out, &self.weights)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights = Tensor::zeros(self.weights.shape());
        self.grad_bias = Tensor::zeros(self.bias.shape());
    }
}

#[derive(Debug, Clone, Default)]
pub struct TanhLayer {
    cached_output: Option<Tensor>,
}

impl TanhLayer {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.map(f64::tanh);
        self.cached_output = Some(y.clone());
        y
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or_else(|| Error::State("tanh backward called before forward".into()))?;
        y.same_shape(grad_out, "tanh backward")?;
        let data = y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(y, g)| g * (1.0 - y * y))
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// Row-wise softmax over the class axis.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxLayer {
    cached_output: Option<Tensor>,
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl SoftmaxLayer {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let p = softmax_rows(x);
        self.cached_output = Some(p.clone());
        p
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        let p = self
            .cached_output
            .as_ref()
            .ok_or_else(|| Error::State("softmax backward called before forward".into()))?;
        p.same_shape(grad_out, "softmax backward")?;
        let mut out = Tensor::zeros(p.shape());
        for i in 0..p.rows() {
            let (pr, gr) = (p.row(i), grad_out.row(i));
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &pv), &gv) in out.row_mut(i).iter_mut().zip(pr).zip(gr) {
                *o = pv * (gv - dot);
            }
        }
        Ok(out)
    }
}
