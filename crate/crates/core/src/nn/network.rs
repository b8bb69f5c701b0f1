use serde::{Deserialize, Serialize};

use super::layer::{Cache, Layer, LayerKind, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Trainable/frozen parameter totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

pub fn param_partition(layers: &[LayerSpec]) -> ParamPartition {
    let (mut trainable, mut non_trainable) = (0, 0);
    for l in layers {
        if l.trainable {
            trainable += l.param_count();
        } else {
            non_trainable += l.param_count();
        }
    }
    ParamPartition {
        trainable,
        non_trainable,
        total: trainable + non_trainable,
    }
}

/// Trainability mask for partial fine-tuning.
///
/// The backbone is `layers[..head_start]`. Of its convolution/dense layers,
/// the last `ceil(fraction * L)` are trainable together with every layer
/// after the first of them; everything earlier is frozen. Head layers are
/// always trainable.
pub fn freeze_fraction(layers: &[LayerSpec], head_start: usize, fraction: f64) -> Result<Vec<bool>> {
    if layers.is_empty() {
        return Err(Error::Config("cannot freeze an empty layer list".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "trainable fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if head_start > layers.len() {
        return Err(Error::Config(format!(
            "head start {head_start} beyond {} layers",
            layers.len()
        )));
    }
    let counted: Vec<usize> = (0..head_start)
        .filter(|&i| layers[i].kind.is_weight_layer())
        .collect();
    // tolerate representation error, e.g. 0.2 * 10 = 2.0000000000000004
    let n_trainable = ((fraction * counted.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let first = if n_trainable == 0 {
        head_start
    } else {
        counted[counted.len() - n_trainable]
    };
    Ok((0..layers.len()).map(|i| i >= first).collect())
}

/// Which parameter gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    None,
    TrainableOnly,
    All,
}

#[derive(Debug)]
pub struct BackwardResult {
    /// Per layer in the swept range; `None` when not requested.
    pub params: Vec<Option<Vec<Tensor>>>,
    /// Gradient at the input of the lowest swept layer, when requested.
    pub input: Option<Tensor>,
}

/// A feed-forward stack of layers with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    /// Index of the first classification-head layer.
    pub head_start: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, head_start: usize) -> Result<Self> {
        if head_start > layers.len() {
            return Err(Error::Config(format!(
                "head start {head_start} beyond {} layers",
                layers.len()
            )));
        }
        let net = Network {
            layers,
            input_shape,
            head_start,
        };
        net.activation_shapes()?;
        Ok(net)
    }

    /// Shapes of every layer's output, in order.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.spec.kind.output_shape(&shape).map_err(|e| match e {
                Error::Shape { message, .. } => Error::shape(&l.spec.name, message),
                other => other,
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn param_partition(&self) -> ParamPartition {
        param_partition(&self.specs())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn set_trainable(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "mask of {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        for (l, &t) in self.layers.iter_mut().zip(mask) {
            l.spec.trainable = t;
        }
        Ok(())
    }

    pub fn apply_freeze_fraction(&mut self, fraction: f64) -> Result<()> {
        let mask = freeze_fraction(&self.specs(), self.head_start, fraction)?;
        self.set_trainable(&mask)
    }

    /// Number of leading layers that produce logits (excludes a trailing softmax).
    pub fn logits_end(&self) -> usize {
        match self.layers.last() {
            Some(l) if l.spec.kind == LayerKind::Softmax => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for l in &self.layers {
            x = l.forward(&x)?.0;
        }
        Ok(x)
    }

    /// Runs `layers[..end]`, keeping every cache.
    pub fn forward_cached(&self, input: &Tensor, end: usize) -> Result<(Tensor, Vec<Cache>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(end);
        for l in &self.layers[..end] {
            let (y, c) = l.forward(&x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Back-propagates `grad_out` from the output of `layers[caches.len() - 1]`
    /// down to layer `stop`.
    pub fn backward(
        &self,
        caches: &[Cache],
        grad_out: Tensor,
        stop: usize,
        mode: ParamGrads,
        want_input_grad: bool,
    ) -> Result<BackwardResult> {
        self.backward_from(0, caches, grad_out, stop, mode, want_input_grad)
    }

    /// Like [`Network::backward`] for caches of `layers[first..first + caches.len()]`;
    /// `stop` is an absolute layer index.
    pub fn backward_from(
        &self,
        first: usize,
        caches: &[Cache],
        grad_out: Tensor,
        stop: usize,
        mode: ParamGrads,
        want_input_grad: bool,
    ) -> Result<BackwardResult> {
        let end = first + caches.len();
        if stop < first || stop > end || end > self.layers.len() {
            return Err(Error::Contract(format!(
                "backward range {stop}..{end} invalid for caches of layers {first}..{end} \
                 ({} layers)",
                self.layers.len()
            )));
        }
        let mut params: Vec<Option<Vec<Tensor>>> = vec![None; end - stop];
        let mut grad = grad_out;
        for i in (stop..end).rev() {
            let layer = &self.layers[i];
            let need_params = match mode {
                ParamGrads::None => false,
                ParamGrads::TrainableOnly => layer.spec.trainable,
                ParamGrads::All => true,
            } && !layer.params.is_empty();
            let need_input = i > stop || want_input_grad;
            if !need_params && !need_input {
                continue;
            }
            let g = layer.backward(&caches[i - first], &grad, need_input)?;
            if need_params {
                params[i - stop] = Some(g.params);
            }
            match g.input {
                Some(gi) => grad = gi,
                None => break,
            }
        }
        Ok(BackwardResult {
            params,
            input: want_input_grad.then_some(grad),
        })
    }

    /// Lowest layer index whose parameters receive updates, if any.
    pub fn first_trainable_with_params(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.spec.trainable && !l.params.is_empty())
    }
}
