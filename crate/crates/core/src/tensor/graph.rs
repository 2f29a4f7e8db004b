use std::collections::HashSet;

use super::layers::{Cache, Layer};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Which activations a forward pass returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// Output of the final layer.
    Probabilities,
    /// Stops before a trailing softmax so a fused cross-entropy can be used.
    Logits,
}

/// Ordered layer stack with a declared per-sample input shape.
#[derive(Debug)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    caches: Vec<Cache>,
}

impl Clone for ModelGraph {
    /// Clones layers and parameters; forward caches are not carried over.
    fn clone(&self) -> Self {
        ModelGraph {
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            caches: Vec::new(),
        }
    }
}

impl ModelGraph {
    /// Validates shape compatibility for `input_shape` (no batch axis) and
    /// parameter-name uniqueness.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut seen = HashSet::new();
        for layer in &layers {
            for (name, _) in layer.parameters() {
                if !seen.insert(name.clone()) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate parameter name `{name}`"
                    )));
                }
            }
        }
        let output_shape = Self::infer(&layers, &input_shape)?;
        Ok(ModelGraph {
            layers,
            input_shape,
            output_shape,
            caches: Vec::new(),
        })
    }

    fn infer(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                shape_err!("layer {i} ({}): {e}", layer.name().unwrap_or(layer.kind()))
            })?;
        }
        Ok(shape)
    }

    /// Re-declares the input shape, e.g. to run a fully convolutional net at
    /// another resolution.
    pub fn set_input_shape(&mut self, input_shape: Vec<usize>) -> Result<()> {
        self.output_shape = Self::infer(&self.layers, &input_shape)?;
        self.input_shape = input_shape;
        self.caches.clear();
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.parameters_mut())
            .collect()
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.parameters()
            .into_iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.parameters_mut() {
            t.clear_grad();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(shape_err!(
                "batch {:?} does not match declared input [n, {:?}]",
                batch.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    fn active_layers(&self, kind: OutputKind) -> usize {
        match (kind, self.layers.last()) {
            (OutputKind::Logits, Some(Layer::Softmax)) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Inference pass; keeps no caches.
    pub fn predict(&self, batch: &Tensor, kind: OutputKind) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers[..self.active_layers(kind)] {
            x = layer.forward(&x, false)?.0;
        }
        Ok(x)
    }

    /// Training pass; caches what [`ModelGraph::backward`] needs.
    pub fn forward(&mut self, batch: &Tensor, kind: OutputKind) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.caches.clear();
        let n = self.active_layers(kind);
        let mut x = batch.clone();
        x.clear_grad();
        for layer in &self.layers[..n] {
            let (y, cache) = layer.forward(&x, true)?;
            self.caches.push(cache.expect("cache requested"));
            x = y;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for the upstream gradient of the
    /// last forward output. Consumes the forward caches.
    pub fn backward(&mut self, loss_grad: Tensor) -> Result<()> {
        if self.caches.is_empty() && !self.layers.is_empty() {
            return Err(Error::NoForwardCache);
        }
        let caches = std::mem::take(&mut self.caches);
        let mut g = loss_grad;
        for (i, cache) in caches.into_iter().enumerate().rev() {
            // the first parameterised layer needs no input gradient
            let need_gx = i > 0;
            match self.layers[i].backward(cache, g, need_gx)? {
                Some(gx) => g = gx,
                None => {
                    debug_assert_eq!(i, 0);
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}
