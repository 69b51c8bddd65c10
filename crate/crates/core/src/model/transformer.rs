use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{attention, visibility, MaskMode};
use super::cache::{EncodedContext, KVCache};
use super::config::{ModelConfig, ModelKind};
use super::rope::ntk_base;
use super::ModelError;
use crate::tensor::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Which output rows get projected to vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    Range { start: usize, len: usize },
}

impl LogitRows {
    fn resolve(self, t: usize) -> Result<(usize, usize), ModelError> {
        let (s, l) = match self {
            LogitRows::All => (0, t),
            LogitRows::Last => (t - 1, 1),
            LogitRows::Range { start, len } => (start, len),
        };
        if l == 0 || s + l > t {
            return Err(ModelError::Config(format!("logit rows [{s}, {}) outside {t} positions", s + l)));
        }
        Ok((s, l))
    }
}

#[derive(Clone, Debug)]
struct AttnIx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct LayerIx {
    ln1: (usize, usize),
    attn: AttnIx,
    cross: Option<((usize, usize), AttnIx)>,
    ln2: (usize, usize),
    w1: usize,
    w2: usize,
}

#[derive(Clone, Debug)]
struct StackIx {
    layers: Vec<LayerIx>,
    final_ln: (usize, usize),
    rope_base: f64,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Option<StackIx>,
    decoder: StackIx,
}

/// Parameter shapes and names in creation order.
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str) -> (usize, usize) {
        let d = self.d();
        (self.add(format!("{prefix}.g"), vec![d]), self.add(format!("{prefix}.b"), vec![d]))
    }

    fn d(&self) -> usize {
        self.shapes[0][1]
    }

    fn attn(&mut self, prefix: &str, kv: usize) -> AttnIx {
        let d = self.d();
        AttnIx {
            wq: self.add(format!("{prefix}.wq"), vec![d, d]),
            wk: self.add(format!("{prefix}.wk"), vec![d, kv]),
            wv: self.add(format!("{prefix}.wv"), vec![d, kv]),
            wo: self.add(format!("{prefix}.wo"), vec![d, d]),
        }
    }

    fn stack(&mut self, prefix: &str, cfg: &ModelConfig, n: usize, cross: bool, max_len: usize) -> StackIx {
        let layers = (0..n)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                let ln1 = self.norm(&format!("{p}.ln1"));
                let attn = self.attn(&format!("{p}.attn"), cfg.kv_dim());
                let cross = cross.then(|| {
                    let ln = self.norm(&format!("{p}.ln_cross"));
                    (ln, self.attn(&format!("{p}.cross"), cfg.kv_dim()))
                });
                let ln2 = self.norm(&format!("{p}.ln2"));
                let d = cfg.d_model;
                let w1 = self.add(format!("{p}.ffn.w1"), vec![d, cfg.d_ff]);
                let w2 = self.add(format!("{p}.ffn.w2"), vec![cfg.d_ff, d]);
                LayerIx { ln1, attn, cross, ln2, w1, w2 }
            })
            .collect();
        let final_ln = self.norm(&format!("{prefix}.ln_f"));
        StackIx {
            layers,
            final_ln,
            rope_base: ntk_base(cfg.rope_base, cfg.d_head(), max_len.saturating_sub(1), cfg.ntk_train_len),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let embed = b.add("embed".into(), vec![cfg.vocab_size, cfg.d_model]);
    let (encoder, decoder) = match cfg.kind {
        ModelKind::EncoderDecoder => {
            let enc = b.stack("enc", cfg, cfg.n_enc_layers, false, cfg.max_enc_len);
            let dec = b.stack("dec", cfg, cfg.n_dec_layers, true, cfg.max_dec_len);
            (Some(enc), dec)
        }
        ModelKind::DecoderOnly => (None, b.stack("dec", cfg, cfg.n_dec_layers, false, cfg.max_dec_len)),
    };
    (Layout { embed, encoder, decoder }, b)
}

/// Position ids for a chunk: real tokens count up from `start`, pads repeat
/// the current counter without advancing it.
pub fn position_ids(real: &[bool], start: usize) -> (Vec<usize>, usize) {
    let mut next = start;
    let pos = real
        .iter()
        .map(|&r| {
            let p = next;
            if r {
                next += 1;
            }
            p
        })
        .collect();
    (pos, next)
}

/// An encoder-decoder or decoder-only transformer with pre-LN blocks, RoPE,
/// grouped-query attention and tied embeddings.
pub struct Model<F: Real = f32> {
    config: ModelConfig,
    params: Vec<Tensor<F>>,
    names: Vec<String>,
    layout: Layout,
    encoder_calls: AtomicU64,
    inference_volume: AtomicU64,
}

impl<F: Real> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            encoder_calls: AtomicU64::new(self.encoder_calls()),
            inference_volume: AtomicU64::new(self.matmul_volume()),
        }
    }
}

impl<F: Real> std::fmt::Debug for Model<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("n_params", &self.num_params())
            .finish()
    }
}

/// Builds a model with parameters drawn from `N(0, 0.02)` (LayerNorm gains 1,
/// biases 0) by a ChaCha stream seeded with `seed`.
pub fn build_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<Model<F>, ModelError> {
    config.validate()?;
    let (layout, b) = layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let params = b
        .names
        .iter()
        .zip(&b.shapes)
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<F> = if name.ends_with(".g") {
                vec![F::one(); n]
            } else if name.ends_with(".b") {
                vec![F::zero(); n]
            } else {
                (0..n).map(|_| F::of(normal.sample(&mut rng))).collect()
            };
            Tensor::new(shape.clone(), data).map_err(ModelError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Model {
        config: config.clone(),
        params,
        names: b.names,
        layout,
        encoder_calls: AtomicU64::new(0),
        inference_volume: AtomicU64::new(0),
    })
}

impl<F: Real> Model<F> {
    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: &ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, b) = layout(config);
        if named.len() != b.names.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != &shape[..] {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` {:?} does not match `{want}` {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            params,
            names: b.names,
            layout,
            encoder_calls: AtomicU64::new(0),
            inference_volume: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of encoder stack forward passes run so far.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    /// Matmul `m*k*n` volume of all incremental inference (`encode_once`,
    /// `forward_chunk` and the decoding helpers built on them).
    pub fn matmul_volume(&self) -> u64 {
        self.inference_volume.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
        self.inference_volume.store(0, Ordering::Relaxed);
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            encoder_calls: AtomicU64::new(0),
            inference_volume: AtomicU64::new(0),
        }
    }

    fn p<'a>(&'a self, g: &mut Graph<'a, F>, ix: usize) -> Result<Var, ModelError> {
        Ok(g.param(ix, &self.params[ix])?)
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a, F>, x: Var, (gi, bi): (usize, usize)) -> Result<Var, ModelError> {
        let gain = self.p(g, gi)?;
        let bias = self.p(g, bi)?;
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attention<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        at: &AttnIx,
        x: Var,
        positions: &[usize],
        base: f64,
        vis: &[bool],
        past: Option<(&'a [F], &'a [F])>,
        collect: Option<&mut Vec<(Vec<F>, Vec<F>)>>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let (wq, wk, wv, wo) = (self.p(g, at.wq)?, self.p(g, at.wk)?, self.p(g, at.wv)?, self.p(g, at.wo)?);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let q = g.rope(q, c.n_heads, positions, base)?;
        let k = g.rope(k, c.n_kv_heads, positions, base)?;
        if let Some(out) = collect {
            out.push((g.value(k).to_vec(), g.value(v).to_vec()));
        }
        let (k_all, v_all) = match past {
            Some((pk, pv)) if !pk.is_empty() => {
                let n = pk.len() / c.kv_dim();
                let pk = g.borrowed_slice(vec![n, c.kv_dim()], pk)?;
                let pv = g.borrowed_slice(vec![n, c.kv_dim()], pv)?;
                (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
            }
            _ => (k, v),
        };
        let o = attention(g, q, k_all, v_all, vis, c.n_heads, c.n_kv_heads)?;
        Ok(g.matmul(o, wo)?)
    }

    /// Runs the blocks of a stack; returns the hidden state before the final norm.
    #[allow(clippy::too_many_arguments)]
    fn run_stack<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        stack: &StackIx,
        mut h: Var,
        positions: &[usize],
        vis: &[bool],
        past: Option<&'a KVCache<F>>,
        cross: Option<(&[(Var, Var)], &[bool])>,
        mut collect: Option<&mut Vec<(Vec<F>, Vec<F>)>>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        for (li, layer) in stack.layers.iter().enumerate() {
            let a = self.norm(g, h, layer.ln1)?;
            let past_l = past.map(|p| p.layer(li));
            let a = self.self_attention(
                g,
                &layer.attn,
                a,
                positions,
                stack.rope_base,
                vis,
                past_l,
                collect.as_deref_mut(),
            )?;
            h = g.add(h, a)?;
            if let (Some((ln, at)), Some((kv, cvis))) = (&layer.cross, cross) {
                let a = self.norm(g, h, *ln)?;
                let wq = self.p(g, at.wq)?;
                let wo = self.p(g, at.wo)?;
                let q = g.matmul(a, wq)?;
                let (k, v) = kv[li];
                let o = attention(g, q, k, v, cvis, c.n_heads, c.n_kv_heads)?;
                let o = g.matmul(o, wo)?;
                h = g.add(h, o)?;
            }
            let f = self.norm(g, h, layer.ln2)?;
            let w1 = self.p(g, layer.w1)?;
            let w2 = self.p(g, layer.w2)?;
            let f = g.matmul(f, w1)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, w2)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }

    fn logits<'a>(&'a self, g: &mut Graph<'a, F>, stack: &StackIx, h: Var, rows: LogitRows) -> Result<Var, ModelError> {
        let t = g.shape(h)[0];
        let (s, l) = rows.resolve(t)?;
        let h = if (s, l) == (0, t) { h } else { g.slice_rows(h, s, l)? };
        let h = self.norm(g, h, stack.final_ln)?;
        let e = self.p(g, self.layout.embed)?;
        Ok(g.matmul_nt(h, e)?)
    }

    fn check_real(ids: &[u32], real: &[bool]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Config("empty token sequence".into()));
        }
        if ids.len() != real.len() {
            return Err(ModelError::Config(format!("{} tokens but {} mask entries", ids.len(), real.len())));
        }
        Ok(())
    }

    fn capacity(what: &'static str, len: usize, cap: usize) -> Result<(), ModelError> {
        if len > cap {
            return Err(ModelError::Capacity { what, len, cap });
        }
        Ok(())
    }

    /// Final-layer encoder representations `[|x|, d_model]`.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, F>, ids: &[u32], real: &[bool]) -> Result<Var, ModelError> {
        let Some(stack) = &self.layout.encoder else {
            return Err(ModelError::Unsupported("encode on a decoder-only model".into()));
        };
        Self::check_real(ids, real)?;
        Self::capacity("max_enc_len", ids.len(), self.config.max_enc_len)?;
        if !real.iter().any(|&r| r) {
            return Err(ModelError::Config("encoder input has no real tokens".into()));
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let (positions, _) = position_ids(real, 0);
        let vis = visibility(MaskMode::Bidirectional, real, real, 0)?;
        let e = self.p(g, self.layout.embed)?;
        let h = g.embedding(e, ids)?;
        let h = self.run_stack(g, stack, h, &positions, &vis, None, None, None)?;
        self.norm(g, h, stack.final_ln)
    }

    /// Cross-attention keys and values of every decoder layer.
    fn cross_kv<'a>(&'a self, g: &mut Graph<'a, F>, enc: Var) -> Result<Vec<(Var, Var)>, ModelError> {
        let mut out = Vec::with_capacity(self.config.n_dec_layers);
        for layer in &self.layout.decoder.layers {
            let (_, at) = layer.cross.as_ref().expect("encoder-decoder layer has cross-attention");
            let wk = self.p(g, at.wk)?;
            let wv = self.p(g, at.wv)?;
            out.push((g.matmul(enc, wk)?, g.matmul(enc, wv)?));
        }
        Ok(out)
    }

    /// Teacher-forced encoder-decoder forward.
    pub fn forward_seq2seq<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        enc_ids: &[u32],
        enc_real: &[bool],
        dec_ids: &[u32],
        dec_real: &[bool],
        rows: LogitRows,
    ) -> Result<Var, ModelError> {
        let enc = self.encode(g, enc_ids, enc_real)?;
        Self::check_real(dec_ids, dec_real)?;
        Self::capacity("max_dec_len", dec_ids.len(), self.config.max_dec_len)?;
        let kv = self.cross_kv(g, enc)?;
        let cvis = visibility(MaskMode::Cross, dec_real, enc_real, 0)?;
        let (positions, _) = position_ids(dec_real, 0);
        let vis = visibility(MaskMode::Causal, dec_real, dec_real, 0)?;
        let stack = &self.layout.decoder;
        let e = self.p(g, self.layout.embed)?;
        let h = g.embedding(e, dec_ids)?;
        let h = self.run_stack(g, stack, h, &positions, &vis, None, Some((&kv, &cvis)), None)?;
        self.logits(g, stack, h, rows)
    }

    /// Full-sequence causal forward of a decoder-only model.
    pub fn forward_decoder_only<'a>(
        &'a self,
        g: &mut Graph<'a, F>,
        ids: &[u32],
        real: &[bool],
        rows: LogitRows,
    ) -> Result<Var, ModelError> {
        if self.config.kind != ModelKind::DecoderOnly {
            return Err(ModelError::Unsupported("forward_decoder_only on an encoder-decoder model".into()));
        }
        Self::check_real(ids, real)?;
        Self::capacity("max_dec_len", ids.len(), self.config.max_dec_len)?;
        let (positions, _) = position_ids(real, 0);
        let vis = visibility(MaskMode::Causal, real, real, 0)?;
        let stack = &self.layout.decoder;
        let e = self.p(g, self.layout.embed)?;
        let h = g.embedding(e, ids)?;
        let h = self.run_stack(g, stack, h, &positions, &vis, None, None, None)?;
        self.logits(g, stack, h, rows)
    }

    pub fn new_cache(&self) -> KVCache<F> {
        KVCache::new(self.config.n_dec_layers, self.config.kv_dim(), self.config.max_dec_len)
    }

    /// Runs the encoder once and precomputes every decoder layer's cross K/V.
    pub fn encode_once(&self, ids: &[u32], real: &[bool]) -> Result<EncodedContext<F>, ModelError> {
        let mut g = Graph::no_grad();
        let enc = self.encode(&mut g, ids, real)?;
        let kv = self.cross_kv(&mut g, enc)?;
        let cross = kv.iter().map(|&(k, v)| (g.tensor(k), g.tensor(v))).collect();
        self.inference_volume.fetch_add(g.matmul_volume(), Ordering::Relaxed);
        Ok(EncodedContext::new(g.tensor(enc), cross, real.to_vec()))
    }

    /// Feeds a chunk of tokens through the cached decoder path and appends their
    /// keys/values. Decoder-only prefill is one chunk; a decode step is a chunk
    /// of one token.
    pub fn forward_chunk(
        &self,
        ctx: Option<&EncodedContext<F>>,
        cache: &mut KVCache<F>,
        ids: &[u32],
        real: &[bool],
        rows: LogitRows,
    ) -> Result<Tensor<F>, ModelError> {
        match (self.config.kind, ctx) {
            (ModelKind::EncoderDecoder, None) => {
                return Err(ModelError::Unsupported("encoder-decoder decode needs an encoded context".into()))
            }
            (ModelKind::DecoderOnly, Some(_)) => {
                return Err(ModelError::Unsupported("decoder-only decode takes no encoded context".into()))
            }
            _ => {}
        }
        Self::check_real(ids, real)?;
        Self::capacity("KV cache", cache.len() + ids.len(), cache.capacity())?;
        let (positions, next) = position_ids(real, cache.next_position());
        let mut k_real = cache.real().to_vec();
        k_real.extend_from_slice(real);
        let vis = visibility(MaskMode::Causal, real, &k_real, cache.len())?;
        let mut collected = Vec::with_capacity(self.config.n_dec_layers);
        let out = {
            let mut g = Graph::no_grad();
            let stack = &self.layout.decoder;
            let e = self.p(&mut g, self.layout.embed)?;
            let h = g.embedding(e, ids)?;
            let mut cross_vars = Vec::new();
            let cvis;
            let cross = match ctx {
                Some(ctx) => {
                    for (k, v) in ctx.cross_kv() {
                        cross_vars.push((g.borrowed(k, false)?, g.borrowed(v, false)?));
                    }
                    cvis = visibility(MaskMode::Cross, real, ctx.input_mask(), 0)?;
                    Some((&cross_vars[..], &cvis[..]))
                }
                None => None,
            };
            let h = self.run_stack(&mut g, stack, h, &positions, &vis, Some(&*cache), cross, Some(&mut collected))?;
            let logits = self.logits(&mut g, stack, h, rows)?;
            self.inference_volume.fetch_add(g.matmul_volume(), Ordering::Relaxed);
            g.tensor(logits)
        };
        cache.append(collected, real, next);
        Ok(out)
    }

    /// Decoder-only prefill over the whole input; returns last-position logits.
    pub fn prefill(&self, cache: &mut KVCache<F>, ids: &[u32]) -> Result<Vec<F>, ModelError> {
        let real = vec![true; ids.len()];
        Ok(self.forward_chunk(None, cache, ids, &real, LogitRows::Last)?.into_data())
    }

    /// Feeds one token and returns next-token logits `[vocab_size]`.
    pub fn decode_step(
        &self,
        ctx: Option<&EncodedContext<F>>,
        cache: &mut KVCache<F>,
        token: u32,
    ) -> Result<Vec<F>, ModelError> {
        Ok(self.forward_chunk(ctx, cache, &[token], &[true], LogitRows::All)?.into_data())
    }
}
