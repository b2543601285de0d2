//! Ordered layer stack split into a feature encoder and a classifier.

use serde::{Deserialize, Serialize};

use super::batchnorm::{BnMode, BnState, StatGrad};
use super::dense::{DenseLayer, SoftmaxLayer, TanhLayer};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Weight-init stream under the run seed.
const INIT_STREAM: u64 = 0x1417;

// A model holds a handful of layers, so boxing the BN variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Tanh(TanhLayer),
    BatchNorm(BnState),
    Softmax(SoftmaxLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Tanh(_) => "tanh",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Softmax(_) => "softmax",
        }
    }

    pub fn as_bn(&self) -> Option<&BnState> {
        match self {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }
}

/// Which statistics the classifier's batch-norm layers normalize with once
/// the model has been split for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierBn {
    /// Stored running statistics.
    Frozen,
    /// Statistics of the current batch (never written back).
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Whole-model training: every BN layer in train mode.
    Pretrain,
    /// Encoder BN in train mode, classifier BN per [`ClassifierBn`].
    Adapt,
    /// Inference.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Topology {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub encoder_bn: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            input_dim: 2,
            hidden: vec![32],
            feature_dim: 16,
            classes: 3,
            encoder_bn: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Input of the classifier's leading BN layer.
    pub features: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub trainable: Vec<bool>,
    pub split_index: usize,
    pub seed: u64,
    pub classifier_bn: Option<ClassifierBn>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, split_index: usize, seed: u64) -> Result<Self> {
        if !matches!(layers.last(), Some(Layer::Softmax(_))) {
            return Err(Error::config("model", "last layer must be softmax"));
        }
        let model = Model {
            trainable: vec![true; layers.len()],
            layers,
            split_index,
            seed,
            classifier_bn: None,
        };
        model.check_split(split_index)?;
        model.check_widths()?;
        Ok(model)
    }

    /// `[Dense → (BN) → tanh]* → Dense | BN → Dense → softmax`, split at the
    /// final BN.
    pub fn from_topology(topo: &Topology, seed: u64) -> Result<Self> {
        if topo.input_dim == 0 || topo.feature_dim == 0 || topo.classes < 2 {
            return Err(Error::config(
                "model",
                format!(
                    "need input_dim >= 1, feature_dim >= 1 and classes >= 2, got {:?}",
                    topo
                ),
            ));
        }
        if topo.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "hidden widths must be positive"));
        }
        let mut rng = RngState::with_stream(seed, INIT_STREAM);
        let mut layers = Vec::new();
        let mut prev = topo.input_dim;
        for &h in &topo.hidden {
            layers.push(Layer::Dense(DenseLayer::new(prev, h, &mut rng)));
            if topo.encoder_bn {
                layers.push(Layer::BatchNorm(BnState::new(h, 1)));
            }
            layers.push(Layer::Tanh(TanhLayer::default()));
            prev = h;
        }
        layers.push(Layer::Dense(DenseLayer::new(prev, topo.feature_dim, &mut rng)));
        let split = layers.len();
        layers.push(Layer::BatchNorm(BnState::new(topo.feature_dim, 1)));
        layers.push(Layer::Dense(DenseLayer::new(
            topo.feature_dim,
            topo.classes,
            &mut rng,
        )));
        layers.push(Layer::Softmax(SoftmaxLayer::default()));
        Model::new(layers, split, seed)
    }

    pub(crate) fn check_split(&self, split_index: usize) -> Result<()> {
        match self.layers.get(split_index) {
            Some(Layer::BatchNorm(_)) => Ok(()),
            Some(other) => Err(Error::config(
                "split_index",
                format!(
                    "layer {split_index} is {}, the classifier must begin with a batch-norm layer",
                    other.kind()
                ),
            )),
            None => Err(Error::config(
                "split_index",
                format!("{split_index} is past the last layer ({})", self.layers.len()),
            )),
        }
    }

    fn check_widths(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (input, output) = match layer {
                Layer::Dense(d) => (Some(d.inputs()), Some(d.outputs())),
                Layer::BatchNorm(bn) => (Some(bn.features()), Some(bn.features())),
                _ => (None, None),
            };
            if let (Some(w), Some(inp)) = (width, input) {
                if w != inp {
                    return Err(Error::config(
                        "model",
                        format!("layer {i} expects width {inp} but receives {w}"),
                    ));
                }
            }
            if output.is_some() {
                width = output;
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.inputs()),
                Layer::BatchNorm(bn) => Some(bn.features()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.outputs()),
                Layer::BatchNorm(bn) => Some(bn.features()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn split_bn(&self) -> &BnState {
        self.layers[self.split_index]
            .as_bn()
            .expect("split index is validated to be a BN layer")
    }

    pub fn is_adapting(&self) -> bool {
        self.classifier_bn.is_some()
    }

    /// Indices of the last BN layer, the default split point.
    pub fn last_bn_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn set_phase(&mut self, phase: Phase) {
        let split = self.split_index;
        let classifier = self.classifier_bn;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                bn.mode = match (phase, classifier, i >= split) {
                    (Phase::Pretrain, _, _) => BnMode::Train,
                    (_, Some(ClassifierBn::Frozen), true) => BnMode::Frozen,
                    (_, Some(ClassifierBn::Batch), true) => BnMode::Batch,
                    (Phase::Adapt, _, _) => BnMode::Train,
                    (Phase::Eval, _, _) => BnMode::Eval,
                };
            }
        }
    }

    /// Forward pass with each BN layer in its current mode.
    pub fn forward(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim(
                "model_forward",
                x.shape(),
                &[x.rows(), self.input_dim()],
            ));
        }
        let mut h = x.clone();
        let mut features = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if i == self.split_index {
                features = Some(h.clone());
            }
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::Tanh(t) => t.forward(&h),
                Layer::BatchNorm(bn) => bn.forward(&h)?,
                Layer::Softmax(s) => s.forward(&h),
            };
            if !h.is_finite() {
                return Err(Error::Numerical {
                    layer: i,
                    message: format!("non-finite {} output", layer.kind()),
                });
            }
        }
        Ok(ForwardOutput {
            features: features.expect("split index lies inside the layer stack"),
            probs: h,
        })
    }

    /// Convenience: forward in `phase` and return only the probabilities.
    pub fn predict(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        self.set_phase(phase);
        Ok(self.forward(x)?.probs)
    }

    /// Backpropagates `grad_probs` (and an optional gradient on the split
    /// layer's recorded input statistics) from the top of the stack.
    /// Parameter gradients are filled only for trainable layers; propagation
    /// stops below the lowest trainable layer.
    pub fn backward(&mut self, grad_probs: &Tensor, split_stat_grad: Option<&StatGrad>) -> Result<()> {
        let lowest = match self.trainable.iter().position(|&t| t) {
            Some(i) => i,
            None => return Ok(()),
        };
        let mut g = grad_probs.clone();
        for i in (lowest..self.layers.len()).rev() {
            let train = self.trainable[i];
            let stat = if i == self.split_index { split_stat_grad } else { None };
            g = match &mut self.layers[i] {
                Layer::Dense(d) => d.backward(&g, train)?,
                Layer::Tanh(t) => t.backward(&g)?,
                Layer::BatchNorm(bn) => bn.backward(&g, stat, train)?,
                Layer::Softmax(s) => s.backward(&g)?,
            };
            if !g.is_finite() {
                return Err(Error::Numerical {
                    layer: i,
                    message: "non-finite gradient".into(),
                });
            }
        }
        Ok(())
    }

    /// `(parameter, gradient)` pairs of every trainable layer, bottom-up.
    pub fn trainable_params(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let mut out = Vec::new();
        for (layer, &train) in self.layers.iter_mut().zip(&self.trainable) {
            if !train {
                continue;
            }
            match layer {
                Layer::Dense(DenseLayer {
                    weights,
                    bias,
                    grad_weights,
                    grad_bias,
                    ..
                }) => {
                    out.push((weights, &*grad_weights));
                    out.push((bias, &*grad_bias));
                }
                Layer::BatchNorm(BnState {
                    scale,
                    shift,
                    grad_scale,
                    grad_shift,
                    ..
                }) => {
                    out.push((scale, &*grad_scale));
                    out.push((shift, &*grad_shift));
                }
                _ => {}
            }
        }
        out
    }

    /// Every stored value of the layers at `range`: weights, biases, BN
    /// running statistics and affine terms, in layer order.
    pub fn parameter_values(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers[range] {
            match layer {
                Layer::Dense(d) => {
                    out.extend_from_slice(d.weights.data());
                    out.extend_from_slice(d.bias.data());
                }
                Layer::BatchNorm(bn) => {
                    out.extend_from_slice(bn.running_mean.data());
                    out.extend_from_slice(bn.running_var.data());
                    out.extend_from_slice(bn.scale.data());
                    out.extend_from_slice(bn.shift.data());
                }
                _ => {}
            }
        }
        out
    }

    pub fn classifier_values(&self) -> Vec<f64> {
        self.parameter_values(self.split_index..self.layers.len())
    }

    pub fn encoder_values(&self) -> Vec<f64> {
        self.parameter_values(0..self.split_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model {
        Model::from_topology(&Topology::default(), 1).unwrap()
    }

    fn input(rows: usize) -> Tensor {
        let data = (0..rows * 2).map(|v| ((v * 7) as f64 * 0.37).sin() * 2.0).collect();
        Tensor::matrix(rows, 2, data).unwrap()
    }

    #[test]
    fn default_topology_splits_at_last_bn() {
        let m = small_model();
        assert_eq!(m.split_index, 4);
        assert_eq!(m.last_bn_index(), Some(4));
        let kinds: Vec<_> = m.layers[m.split_index..].iter().map(Layer::kind).collect();
        assert_eq!(kinds, ["batchnorm", "dense", "softmax"]);
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut m = small_model();
        m.set_phase(Phase::Pretrain);
        let out = m.forward(&input(9)).unwrap();
        assert_eq!(out.features.shape(), &[9, 16]);
        for i in 0..9 {
            let row = out.probs.row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_softmax_head_is_uniform() {
        let w = Tensor::zeros(&[2, 4]);
        let dense = DenseLayer::from_parameters(w, Tensor::zeros(&[4])).unwrap();
        let layers = vec![
            Layer::BatchNorm(BnState::new(2, 1)),
            Layer::Dense(dense),
            Layer::Softmax(SoftmaxLayer::default()),
        ];
        let mut m = Model::new(layers, 0, 0).unwrap();
        let p = m.predict(&input(3), Phase::Pretrain).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn row_permutation_commutes_with_forward() {
        let mut m = small_model();
        let x = input(6);
        let perm = [3, 0, 5, 1, 4, 2];
        let p = m.predict(&x, Phase::Pretrain).unwrap();
        let mut m2 = small_model();
        let pp = m2
            .predict(&x.select_rows(&perm).unwrap(), Phase::Pretrain)
            .unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in pp.row(r).iter().zip(p.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_must_be_batch_norm() {
        let m = small_model();
        let err = m.check_split(0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(m.check_split(99).is_err());
    }

    #[test]
    fn wrong_input_width() {
        let mut m = small_model();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[2, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let mut m = small_model();
        let x = Tensor::matrix(2, 2, vec![f64::NAN, 0.0, 1.0, 1.0]).unwrap();
        m.set_phase(Phase::Eval);
        match m.forward(&x) {
            Err(Error::Numerical { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
