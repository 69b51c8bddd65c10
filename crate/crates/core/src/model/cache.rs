use crate::tensor::{Real, Tensor};

/// Per-layer self-attention keys and values of the tokens decoded so far.
///
/// A decoder-only cache holds input and output positions; an encoder-decoder
/// cache holds output positions only.
#[derive(Clone, Debug)]
pub struct KVCache<F> {
    layers: Vec<(Vec<F>, Vec<F>)>,
    real: Vec<bool>,
    next_pos: usize,
    kv_dim: usize,
    capacity: usize,
}

impl<F: Real> KVCache<F> {
    pub fn new(n_layers: usize, kv_dim: usize, capacity: usize) -> Self {
        Self {
            layers: vec![(Vec::new(), Vec::new()); n_layers],
            real: Vec::new(),
            next_pos: 0,
            kv_dim,
            capacity,
        }
    }

    /// Number of cached positions (identical in every layer).
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Positions stored in layer `l`.
    pub fn layer_len(&self, l: usize) -> usize {
        self.layers[l].0.len() / self.kv_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Position id the next real token receives.
    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    pub fn real(&self) -> &[bool] {
        &self.real
    }

    /// Keys and values of layer `l`, row-major `[len, kv_dim]`.
    pub fn layer(&self, l: usize) -> (&[F], &[F]) {
        let (k, v) = &self.layers[l];
        (k, v)
    }

    /// Bytes held by keys and values at `element_bytes` per value.
    pub fn bytes(&self, element_bytes: usize) -> usize {
        self.layers.iter().map(|(k, v)| (k.len() + v.len()) * element_bytes).sum()
    }

    pub(crate) fn append(&mut self, new: Vec<(Vec<F>, Vec<F>)>, real: &[bool], next_pos: usize) {
        debug_assert_eq!(new.len(), self.layers.len());
        for ((k, v), (nk, nv)) in self.layers.iter_mut().zip(new) {
            k.extend_from_slice(&nk);
            v.extend_from_slice(&nv);
        }
        self.real.extend_from_slice(real);
        self.next_pos = next_pos;
    }
}

/// The encoder's one-time output for an input sequence: final-layer
/// representations plus each decoder layer's projected cross-attention K/V.
#[derive(Clone, Debug)]
pub struct EncodedContext<F> {
    encoder_output: Tensor<F>,
    cross_kv: Vec<(Tensor<F>, Tensor<F>)>,
    input_mask: Vec<bool>,
}

impl<F: Real> EncodedContext<F> {
    pub(crate) fn new(encoder_output: Tensor<F>, cross_kv: Vec<(Tensor<F>, Tensor<F>)>, input_mask: Vec<bool>) -> Self {
        Self {
            encoder_output,
            cross_kv,
            input_mask,
        }
    }

    pub fn encoder_output(&self) -> &Tensor<F> {
        &self.encoder_output
    }

    pub fn cross_kv(&self) -> &[(Tensor<F>, Tensor<F>)] {
        &self.cross_kv
    }

    pub fn input_mask(&self) -> &[bool] {
        &self.input_mask
    }

    pub fn input_len(&self) -> usize {
        self.input_mask.len()
    }
}
