//! Partially frozen graph-attention forecaster.
//!
//! Each node's history window is embedded (token, spatial and calendar
//! embeddings, fused and offset by a node positional encoding), passed
//! through a stack of pre-norm transformer blocks that attend across nodes,
//! and projected to the forecast horizon. The first blocks are frozen; the
//! last ones attend only along graph edges and are adapted through low-rank
//! updates on top of 4-bit quantized base weights.

pub mod checkpoint;
pub mod embed;
pub mod layers;
pub mod nf4;
pub mod params;

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{StationGraph, WindowedSample};
use crate::error::{Error, Result};
use crate::seed;
use embed::{HOURS, WEEKDAYS};
use layers::{AttentionCache, AttentionWeights, FfnCache, LayerNormCache, WantAttention};
pub use nf4::{nf4_dequantize, nf4_quantize, QuantizedTensor};
pub use params::{Gradients, ParamId, ParamStore, Tensor};

/// Which blocks are frozen, quantized and adapted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// First `frozen_blocks` blocks fully frozen; the remaining graph blocks
    /// keep quantized frozen attention weights plus trainable adapters and
    /// layer norms.
    #[default]
    Partial,
    /// Everything trainable in full precision, no adapters.
    None,
    /// Every block is an adapted graph block.
    AllGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width; the residual stream is three times wider.
    pub d_model: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub in_channels: usize,
    pub frozen_blocks: usize,
    pub graph_blocks: usize,
    pub heads: usize,
    /// Adapter rank.
    pub rank: usize,
    /// FFN hidden width as a multiple of the residual width.
    pub ffn_mult: usize,
    pub quant_block: usize,
    pub ln_eps: f64,
    pub adapter_init_std: f64,
    pub freeze_mode: FreezeMode,
    /// When false the graph blocks attend over all nodes.
    pub graph_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            lookback: 12,
            horizon: 3,
            in_channels: 1,
            frozen_blocks: 2,
            graph_blocks: 2,
            heads: 4,
            rank: 4,
            ffn_mult: 2,
            quant_block: 64,
            ln_eps: 1e-5,
            adapter_init_std: 0.01,
            freeze_mode: FreezeMode::Partial,
            graph_mask: true,
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        3 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.width()
    }

    pub fn n_blocks(&self) -> usize {
        self.frozen_blocks + self.graph_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("in_channels", self.in_channels),
            ("graph_blocks", self.graph_blocks),
            ("heads", self.heads),
            ("rank", self.rank),
            ("ffn_mult", self.ffn_mult),
            ("quant_block", self.quant_block),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("model.{name} must be at least 1")));
        }
        if self.width() % self.heads != 0 {
            return Err(Error::param(format!("heads {} must divide width {}", self.heads, self.width())));
        }
        if self.uses_adapters() && self.rank >= self.head_dim() {
            return Err(Error::param(format!("rank {} must be below head width {}", self.rank, self.head_dim())));
        }
        if !(self.ln_eps > 0.0) || !(self.adapter_init_std >= 0.0) {
            return Err(Error::param("ln_eps must be positive and adapter_init_std non-negative"));
        }
        Ok(())
    }

    fn uses_adapters(&self) -> bool {
        self.freeze_mode != FreezeMode::None
    }

    /// Whether block `i` carries quantized base weights and adapters.
    pub fn is_adapted_block(&self, i: usize) -> bool {
        match self.freeze_mode {
            FreezeMode::Partial => i >= self.frozen_blocks,
            FreezeMode::None => false,
            FreezeMode::AllGraph => true,
        }
    }

    /// Whether block `i` restricts attention to graph edges.
    pub fn is_masked_block(&self, i: usize) -> bool {
        self.graph_mask && (i >= self.frozen_blocks || self.freeze_mode == FreezeMode::AllGraph)
    }

    fn embedding_count(&self) -> usize {
        let d = self.d_model;
        let pc = self.lookback * self.in_channels;
        (pc * d + d) + HOURS * d + WEEKDAYS * d + (pc * d + d) + (9 * d * d + 3 * d)
    }

    fn head_count(&self) -> usize {
        self.width() * self.horizon + self.horizon
    }

    /// Closed-form number of trainable scalars.
    pub fn trainable_param_count(&self) -> usize {
        let w = self.width();
        let norms = 4 * w;
        let adapters = 2 * self.heads * self.rank * (w + self.head_dim());
        let blocks = match self.freeze_mode {
            FreezeMode::Partial => self.graph_blocks * (norms + adapters),
            FreezeMode::AllGraph => self.n_blocks() * (norms + adapters),
            FreezeMode::None => {
                let hidden = self.ffn_hidden();
                self.n_blocks() * (norms + 4 * w * w + 2 * w * hidden + hidden + w)
            }
        };
        self.embedding_count() + blocks + self.head_count()
    }
}

/// Flattened inputs of a batch: one row per (sample, node), sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Array2<f64>,
    pub hours: Vec<usize>,
    pub weekdays: Vec<usize>,
    pub nodes: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&WindowedSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Empty("batch".into()))?;
        let dim = first.history.dim();
        let nodes = dim.1;
        let mut rows = Array2::zeros((samples.len() * nodes, dim.0 * dim.2));
        let mut hours = Vec::with_capacity(samples.len());
        let mut weekdays = Vec::with_capacity(samples.len());
        for (b, sample) in samples.iter().enumerate() {
            if sample.history.dim() != dim {
                return Err(Error::shape("batch samples differ in shape"));
            }
            rows.slice_mut(s![b * nodes..(b + 1) * nodes, ..]).assign(&embed::flatten_history(&sample.history));
            let anchor = sample.anchor();
            hours.push(anchor.hour as usize);
            weekdays.push(anchor.dow as usize);
        }
        Ok(Self { rows, hours, weekdays, nodes })
    }

    pub fn samples(&self) -> usize {
        self.hours.len()
    }
}

/// `(B*N, S)` model output rows to one `(S, N, 1)` prediction per sample.
pub fn split_predictions(out: &Array2<f64>, nodes: usize) -> Vec<Array3<f64>> {
    (0..out.nrows() / nodes)
        .map(|b| {
            let block = out.slice(s![b * nodes..(b + 1) * nodes, ..]);
            block.t().to_owned().insert_axis(Axis(2))
        })
        .collect()
}

/// `(S, N, 1)` targets of each sample stacked into `(B*N, S)` rows.
pub fn stack_targets(samples: &[&WindowedSample]) -> Array2<f64> {
    let (horizon, nodes, _) = samples[0].target.dim();
    let mut out = Array2::zeros((samples.len() * nodes, horizon));
    for (b, sample) in samples.iter().enumerate() {
        out.slice_mut(s![b * nodes..(b + 1) * nodes, ..]).assign(&sample.target.index_axis(Axis(2), 0).t());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct EmbeddingIds {
    token_w: ParamId,
    token_b: ParamId,
    spatial_w: ParamId,
    spatial_b: ParamId,
    hour: ParamId,
    weekday: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterIds {
    q_l: Vec<ParamId>,
    q_m: Vec<ParamId>,
    v_l: Vec<ParamId>,
    v_m: Vec<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    masked: bool,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    adapters: Option<AdapterIds>,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
    effective: Option<(Array2<f64>, Array2<f64>)>,
}

/// Intermediate values of a forward pass, consumed by [`PfgaModel::backward`].
pub struct ForwardCache {
    rows: Array2<f64>,
    hours: Vec<usize>,
    weekdays: Vec<usize>,
    nodes: usize,
    spatial: Array2<f64>,
    concat: Array2<f64>,
    blocks: Vec<BlockCache>,
    last: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfgaModel {
    config: ModelConfig,
    store: ParamStore,
    emb: EmbeddingIds,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
    quantized: Vec<(ParamId, QuantizedTensor)>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal) * std)
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    gaussian(rng, (fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())
}

impl PfgaModel {
    /// Seeded initialization; base weights of adapted blocks are quantized
    /// immediately.
    pub fn new(config: ModelConfig, root_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::sub_seed(root_seed, seed::MODEL_INIT));
        let mut store = ParamStore::default();
        let d = config.d_model;
        let w = config.width();
        let pc = config.lookback * config.in_channels;
        let emb = EmbeddingIds {
            token_w: store.push("embed.token.w", glorot(&mut rng, pc, d), true),
            token_b: store.push("embed.token.b", Array2::zeros((1, d)), true),
            spatial_w: store.push("embed.spatial.w", glorot(&mut rng, pc, d), true),
            spatial_b: store.push("embed.spatial.b", Array2::zeros((1, d)), true),
            hour: store.push("embed.hour", gaussian(&mut rng, (HOURS, d), 0.1), true),
            weekday: store.push("embed.weekday", gaussian(&mut rng, (WEEKDAYS, d), 0.1), true),
            fuse_w: store.push("embed.fuse.w", glorot(&mut rng, w, w), true),
            fuse_b: store.push("embed.fuse.b", Array2::zeros((1, w)), true),
        };
        let hidden = config.ffn_hidden();
        let dk = config.head_dim();
        let mut blocks = Vec::with_capacity(config.n_blocks());
        for i in 0..config.n_blocks() {
            let adapted = config.is_adapted_block(i);
            let all = config.freeze_mode == FreezeMode::None;
            let norms = all || adapted;
            let p = |n: &str| format!("block{i}.{n}");
            let mut ids = BlockIds {
                masked: config.is_masked_block(i),
                ln1_g: store.push(p("ln1.gamma"), Array2::ones((1, w)), norms),
                ln1_b: store.push(p("ln1.beta"), Array2::zeros((1, w)), norms),
                ln2_g: store.push(p("ln2.gamma"), Array2::ones((1, w)), norms),
                ln2_b: store.push(p("ln2.beta"), Array2::zeros((1, w)), norms),
                wq: store.push(p("attn.q"), glorot(&mut rng, w, w), all),
                wk: store.push(p("attn.k"), glorot(&mut rng, w, w), all),
                wv: store.push(p("attn.v"), glorot(&mut rng, w, w), all),
                wo: store.push(p("attn.o"), glorot(&mut rng, w, w), all),
                w1: store.push(p("ffn.w1"), glorot(&mut rng, w, hidden), all),
                b1: store.push(p("ffn.b1"), Array2::zeros((1, hidden)), all),
                w2: store.push(p("ffn.w2"), glorot(&mut rng, hidden, w), all),
                b2: store.push(p("ffn.b2"), Array2::zeros((1, w)), all),
                adapters: None,
            };
            if adapted {
                let mut adapter = AdapterIds { q_l: vec![], q_m: vec![], v_l: vec![], v_m: vec![] };
                for h in 0..config.heads {
                    let l_std = config.adapter_init_std;
                    adapter.q_l.push(store.push(p(&format!("adapter.q{h}.l")), gaussian(&mut rng, (w, config.rank), l_std), true));
                    adapter.q_m.push(store.push(p(&format!("adapter.q{h}.m")), Array2::zeros((config.rank, dk)), true));
                    adapter.v_l.push(store.push(p(&format!("adapter.v{h}.l")), gaussian(&mut rng, (w, config.rank), l_std), true));
                    adapter.v_m.push(store.push(p(&format!("adapter.v{h}.m")), Array2::zeros((config.rank, dk)), true));
                }
                ids.adapters = Some(adapter);
            }
            blocks.push(ids);
        }
        let head_w = store.push("head.w", glorot(&mut rng, w, config.horizon), true);
        let head_b = store.push("head.b", Array2::zeros((1, config.horizon)), true);
        let mut model = Self { config, store, emb, blocks, head_w, head_b, quantized: Vec::new() };
        model.quantize_bases()?;
        Ok(model)
    }

    /// Builds a model for `config` whose tensors are copied from `backbone`
    /// wherever name and shape agree; the rest keep their seeded
    /// initialization. Base weights of adapted blocks are then quantized.
    pub fn from_backbone(backbone: &PfgaModel, config: ModelConfig, root_seed: u64) -> Result<Self> {
        let mut model = Self::new(config, root_seed)?;
        for id in 0..model.store.len() {
            let name = model.store.tensor(id).name.clone();
            if let Some(src) = backbone.store.find(&name) {
                let value = backbone.store.get(src);
                if value.dim() == model.store.get(id).dim() {
                    *model.store.get_mut(id) = value.clone();
                }
            }
        }
        model.quantize_bases()?;
        Ok(model)
    }

    fn quantize_bases(&mut self) -> Result<()> {
        self.quantized.clear();
        for b in 0..self.blocks.len() {
            if self.blocks[b].adapters.is_none() {
                continue;
            }
            let ids = [self.blocks[b].wq, self.blocks[b].wk, self.blocks[b].wv, self.blocks[b].wo];
            for id in ids {
                let q = nf4_quantize(self.store.get(id), self.config.quant_block)?;
                *self.store.get_mut(id) = nf4_dequantize(&q);
                self.quantized.push((id, q));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access for optimizers; callers must only touch trainable
    /// tensors.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn quantized(&self) -> impl Iterator<Item = (&str, &QuantizedTensor)> {
        self.quantized.iter().map(|(id, q)| (self.store.tensor(*id).name.as_str(), q))
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_batch(&self, batch: &Batch, graph: &StationGraph) -> Result<()> {
        let expected = self.config.lookback * self.config.in_channels;
        if batch.rows.ncols() != expected {
            return Err(Error::shape(format!(
                "input rows have width {}, model expects {} x {} = {expected}",
                batch.rows.ncols(),
                self.config.lookback,
                self.config.in_channels
            )));
        }
        if graph.len() != batch.nodes {
            return Err(Error::shape(format!("graph has {} nodes, batch {}", graph.len(), batch.nodes)));
        }
        if batch.hours.iter().any(|&h| h >= HOURS) || batch.weekdays.iter().any(|&d| d >= WEEKDAYS) {
            return Err(Error::param("calendar index out of range"));
        }
        Ok(())
    }

    /// Effective query and value weights `base + [L_1 M_1 | ... | L_h M_h]`.
    fn effective_qv(&self, ids: &BlockIds, adapter: &AdapterIds) -> (Array2<f64>, Array2<f64>) {
        let dk = self.config.head_dim();
        let mut q = self.store.get(ids.wq).clone();
        let mut v = self.store.get(ids.wv).clone();
        for h in 0..self.config.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut qs = q.slice_mut(cols);
            qs += &self.store.get(adapter.q_l[h]).dot(self.store.get(adapter.q_m[h]));
            let mut vs = v.slice_mut(cols);
            vs += &self.store.get(adapter.v_l[h]).dot(self.store.get(adapter.v_m[h]));
        }
        (q, v)
    }

    fn embed_rows(&self, batch: &Batch) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let st = &self.store;
        let e = &self.emb;
        let d = self.config.d_model;
        let r = batch.rows.nrows();
        let token = layers::linear(&batch.rows.view(), st.get(e.token_w), Some(st.get(e.token_b)));
        let spatial = layers::linear(&batch.rows.view(), st.get(e.spatial_w), Some(st.get(e.spatial_b))).mapv(f64::tanh);
        let mut concat = Array2::zeros((r, 3 * d));
        concat.slice_mut(s![.., 0..d]).assign(&token);
        concat.slice_mut(s![.., d..2 * d]).assign(&spatial);
        for (b, (&hour, &dow)) in batch.hours.iter().zip(&batch.weekdays).enumerate() {
            let temporal = &st.get(e.hour).row(hour) + &st.get(e.weekday).row(dow);
            concat.slice_mut(s![b * batch.nodes..(b + 1) * batch.nodes, 2 * d..]).assign(&temporal);
        }
        let mut h = layers::linear(&concat.view(), st.get(e.fuse_w), Some(st.get(e.fuse_b)));
        let pe = embed::positional_encoding(batch.nodes, self.config.width());
        for mut block in h.axis_chunks_iter_mut(Axis(0), batch.nodes) {
            block += &pe;
        }
        (h, spatial, concat)
    }

    fn block_forward_cached(&self, ids: &BlockIds, h: &Array2<f64>, nodes: usize, mask: &Array2<u8>) -> (Array2<f64>, BlockCache) {
        let st = &self.store;
        let eps = self.config.ln_eps;
        let (x1, ln1) = layers::layer_norm(h, st.get(ids.ln1_g), st.get(ids.ln1_b), eps);
        let effective = ids.adapters.as_ref().map(|a| self.effective_qv(ids, a));
        let (q, v) = match &effective {
            Some((q, v)) => (q, v),
            None => (st.get(ids.wq), st.get(ids.wv)),
        };
        let weights = AttentionWeights { q, k: st.get(ids.wk), v, o: st.get(ids.wo) };
        let (att, attn) = layers::attention(&x1, &weights, self.config.heads, nodes, ids.masked.then_some(mask));
        let hbar = h + &att;
        let (x2, ln2) = layers::layer_norm(&hbar, st.get(ids.ln2_g), st.get(ids.ln2_b), eps);
        let (f, ffn) = layers::ffn(&x2, st.get(ids.w1), st.get(ids.b1), st.get(ids.w2), st.get(ids.b2));
        (hbar + f, BlockCache { ln1, attn, ln2, ffn, effective })
    }

    /// Forward pass returning `(B*N, S)` outputs and the cache for backward.
    pub fn forward_train(&self, batch: &Batch, graph: &StationGraph) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(batch, graph)?;
        let (mut h, spatial, concat) = self.embed_rows(batch);
        let mask = graph.adjacency();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for ids in &self.blocks {
            let (next, cache) = self.block_forward_cached(ids, &h, batch.nodes, mask);
            caches.push(cache);
            h = next;
        }
        let out = layers::linear(&h.view(), self.store.get(self.head_w), Some(self.store.get(self.head_b)));
        let cache = ForwardCache {
            rows: batch.rows.clone(),
            hours: batch.hours.clone(),
            weekdays: batch.weekdays.clone(),
            nodes: batch.nodes,
            spatial,
            concat,
            blocks: caches,
            last: h,
        };
        Ok((out, cache))
    }

    pub fn forward(&self, batch: &Batch, graph: &StationGraph) -> Result<Array2<f64>> {
        Ok(self.forward_train(batch, graph)?.0)
    }

    /// `(S, N, 1)` forecast for one window.
    pub fn predict(&self, sample: &WindowedSample, graph: &StationGraph) -> Result<Array3<f64>> {
        let batch = Batch::from_samples(&[sample])?;
        let out = self.forward(&batch, graph)?;
        Ok(split_predictions(&out, batch.nodes).remove(0))
    }

    /// Fused embedding plus positional encoding, `(B*N, 3D)`.
    pub fn embed(&self, batch: &Batch) -> Array2<f64> {
        self.embed_rows(batch).0
    }

    /// Output of block `index` on a single sample's `(N, 3D)` state.
    pub fn block_forward(&self, index: usize, h: &Array2<f64>, graph: &StationGraph) -> Result<Array2<f64>> {
        let ids = self.block_ids(index, h, graph)?;
        Ok(self.block_forward_cached(ids, h, h.nrows(), graph.adjacency()).0)
    }

    /// The attention sublayer of block `index` alone, `MHA(LN(h))`, without
    /// the residual.
    pub fn attention_sublayer(&self, index: usize, h: &Array2<f64>, graph: &StationGraph) -> Result<Array2<f64>> {
        let ids = self.block_ids(index, h, graph)?;
        let st = &self.store;
        let (x1, _) = layers::layer_norm(h, st.get(ids.ln1_g), st.get(ids.ln1_b), self.config.ln_eps);
        let effective = ids.adapters.as_ref().map(|a| self.effective_qv(ids, a));
        let (q, v) = match &effective {
            Some((q, v)) => (q, v),
            None => (st.get(ids.wq), st.get(ids.wv)),
        };
        let weights = AttentionWeights { q, k: st.get(ids.wk), v, o: st.get(ids.wo) };
        let mask = graph.adjacency();
        Ok(layers::attention(&x1, &weights, self.config.heads, h.nrows(), ids.masked.then_some(mask)).0)
    }

    fn block_ids(&self, index: usize, h: &Array2<f64>, graph: &StationGraph) -> Result<&BlockIds> {
        let ids = self.blocks.get(index).ok_or_else(|| Error::param(format!("no block {index}")))?;
        if h.ncols() != self.config.width() || h.nrows() != graph.len() {
            return Err(Error::shape(format!("block input {:?} does not match graph of {} nodes", h.dim(), graph.len())));
        }
        Ok(ids)
    }

    /// Gradients of `sum(d_out * out)` with respect to every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Gradients {
        let st = &self.store;
        let mut g = Gradients::zeros_like(st);
        g.add(self.head_w, &cache.last.t().dot(d_out));
        g.add(self.head_b, &layers::column_sums(d_out));
        let mut dh = d_out.dot(&st.get(self.head_w).t());
        for (ids, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = self.block_backward(ids, bc, dh, cache.nodes, &mut g);
        }
        self.embed_backward(cache, &dh, &mut g);
        g
    }

    fn block_backward(&self, ids: &BlockIds, bc: &BlockCache, dh: Array2<f64>, nodes: usize, g: &mut Gradients) -> Array2<f64> {
        let st = &self.store;
        let ffn_weights = g.wants(ids.w1);
        let (dx2, fg) = layers::ffn_backward(&dh, st.get(ids.w1), st.get(ids.w2), &bc.ffn, ffn_weights);
        if let Some(fg) = fg {
            g.add(ids.w1, &fg.w1);
            g.add(ids.b1, &fg.b1);
            g.add(ids.w2, &fg.w2);
            g.add(ids.b2, &fg.b2);
        }
        let (dhbar_ln, dg2, db2) = layers::layer_norm_backward(&dx2, st.get(ids.ln2_g), &bc.ln2);
        g.add(ids.ln2_g, &dg2);
        g.add(ids.ln2_b, &db2);
        let dhbar = dh + dhbar_ln;

        let adapter_grads = ids.adapters.as_ref().is_some_and(|a| g.wants(a.q_l[0]));
        let want = WantAttention {
            q: g.wants(ids.wq) || adapter_grads,
            k: g.wants(ids.wk),
            v: g.wants(ids.wv) || adapter_grads,
            o: g.wants(ids.wo),
        };
        let (q, v) = match &bc.effective {
            Some((q, v)) => (q, v),
            None => (st.get(ids.wq), st.get(ids.wv)),
        };
        let weights = AttentionWeights { q, k: st.get(ids.wk), v, o: st.get(ids.wo) };
        let (dx1, ag) = layers::attention_backward(&dhbar, &weights, self.config.heads, nodes, &bc.attn, want);
        if let (Some(adapter), true) = (&ids.adapters, adapter_grads) {
            let dk = self.config.head_dim();
            let (dq, dv) = (ag.q.as_ref().expect("requested"), ag.v.as_ref().expect("requested"));
            for h in 0..self.config.heads {
                let cols = s![.., h * dk..(h + 1) * dk];
                for (l, m, dw) in [(adapter.q_l[h], adapter.q_m[h], dq), (adapter.v_l[h], adapter.v_m[h], dv)] {
                    let dslice = dw.slice(cols);
                    g.add(l, &dslice.dot(&st.get(m).t()));
                    g.add(m, &st.get(l).t().dot(&dslice));
                }
            }
        } else {
            for (id, grad) in [(ids.wq, &ag.q), (ids.wk, &ag.k), (ids.wv, &ag.v)] {
                if let Some(grad) = grad {
                    g.add(id, grad);
                }
            }
        }
        if let Some(go) = &ag.o {
            g.add(ids.wo, go);
        }
        let (dh_ln, dg1, db1) = layers::layer_norm_backward(&dx1, st.get(ids.ln1_g), &bc.ln1);
        g.add(ids.ln1_g, &dg1);
        g.add(ids.ln1_b, &db1);
        dhbar + dh_ln
    }

    fn embed_backward(&self, cache: &ForwardCache, dh: &Array2<f64>, g: &mut Gradients) {
        let st = &self.store;
        let e = &self.emb;
        let d = self.config.d_model;
        g.add(e.fuse_w, &cache.concat.t().dot(dh));
        g.add(e.fuse_b, &layers::column_sums(dh));
        let dcat = dh.dot(&st.get(e.fuse_w).t());
        let dtoken = dcat.slice(s![.., 0..d]).to_owned();
        g.add(e.token_w, &cache.rows.t().dot(&dtoken));
        g.add(e.token_b, &layers::column_sums(&dtoken));
        let mut dspatial = dcat.slice(s![.., d..2 * d]).to_owned();
        dspatial.zip_mut_with(&cache.spatial, |v, &y| *v *= 1.0 - y * y);
        g.add(e.spatial_w, &cache.rows.t().dot(&dspatial));
        g.add(e.spatial_b, &layers::column_sums(&dspatial));
        let dtemporal = dcat.slice(s![.., 2 * d..]);
        for (b, (&hour, &dow)) in cache.hours.iter().zip(&cache.weekdays).enumerate() {
            let sum = dtemporal.slice(s![b * cache.nodes..(b + 1) * cache.nodes, ..]).sum_axis(Axis(0));
            g.add_row(e.hour, hour, sum.view());
            g.add_row(e.weekday, dow, sum.view());
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::domain::CalendarRow;

    pub(crate) fn tiny_config(mode: FreezeMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            lookback: 6,
            horizon: 2,
            in_channels: 2,
            frozen_blocks: 1,
            graph_blocks: 1,
            heads: 2,
            rank: 2,
            freeze_mode: mode,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn sample(cfg: &ModelConfig, nodes: usize, s: u64) -> WindowedSample {
        let mut rng = seed::rng(s);
        WindowedSample {
            start: 0,
            history: Array3::from_shape_simple_fn((cfg.lookback, nodes, cfg.in_channels), || rng.random_range(-1.0..1.0)),
            target: Array3::from_shape_simple_fn((cfg.horizon, nodes, 1), || rng.random_range(-1.0..1.0)),
            calendar: (0..cfg.lookback).map(|i| CalendarRow { hour: (i % 24) as u8, dow: 3, holiday: 0 }).collect(),
        }
    }

    fn ring(n: usize) -> StationGraph {
        let a = Array2::from_shape_fn((n, n), |(i, j)| u8::from(i == j || (i + 1) % n == j || (j + 1) % n == i));
        StationGraph::anonymous(a).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        for mode in [FreezeMode::Partial, FreezeMode::None, FreezeMode::AllGraph] {
            let cfg = tiny_config(mode);
            let model = PfgaModel::new(cfg.clone(), 1).unwrap();
            let s = sample(&cfg, 5, 2);
            let a = model.predict(&s, &ring(5)).unwrap();
            assert_eq!(a.dim(), (2, 5, 1));
            assert_eq!(a, model.predict(&s, &ring(5)).unwrap());
            assert_eq!(model, PfgaModel::new(cfg, 1).unwrap());
        }
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        for mode in [FreezeMode::Partial, FreezeMode::None, FreezeMode::AllGraph] {
            for (d, f, u, h, r) in [(8, 1, 1, 2, 2), (4, 0, 3, 3, 1), (16, 2, 2, 4, 4)] {
                let cfg = ModelConfig { d_model: d, frozen_blocks: f, graph_blocks: u, heads: h, rank: r, in_channels: 3, freeze_mode: mode, ..ModelConfig::default() };
                let model = PfgaModel::new(cfg.clone(), 0).unwrap();
                assert_eq!(model.trainable_count(), cfg.trainable_param_count(), "{mode:?} {d} {f} {u}");
            }
        }
        let partial = tiny_config(FreezeMode::Partial).trainable_param_count();
        assert!(partial < tiny_config(FreezeMode::None).trainable_param_count());
    }

    #[test]
    fn zero_initialized_adapters_leave_quantized_base() {
        let model = PfgaModel::new(tiny_config(FreezeMode::Partial), 3).unwrap();
        let ids = &model.blocks[1];
        let (q, v) = model.effective_qv(ids, ids.adapters.as_ref().unwrap());
        assert_eq!(&q, model.store.get(ids.wq));
        assert_eq!(&v, model.store.get(ids.wv));
        assert_eq!(model.quantized().count(), 4);
        for (name, qt) in model.quantized() {
            let id = model.store.find(name).unwrap();
            assert_eq!(&nf4_dequantize(qt), model.store.get(id));
            assert!(!model.store.is_trainable(id));
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            ModelConfig { heads: 5, ..ModelConfig::default() },
            ModelConfig { rank: 24, ..ModelConfig::default() },
            ModelConfig { graph_blocks: 0, ..ModelConfig::default() },
            ModelConfig { d_model: 0, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(PfgaModel::new(cfg, 0).is_err());
        }
        assert!(ModelConfig { rank: 24, freeze_mode: FreezeMode::None, ..ModelConfig::default() }.validate().is_ok());
    }

    #[test]
    fn single_node_attention_is_value_path() {
        let model = PfgaModel::new(tiny_config(FreezeMode::Partial), 4).unwrap();
        let h = Array2::from_shape_fn((1, 24), |(_, j)| (j as f64 * 0.3).sin());
        let g = StationGraph::identity(1);
        let att = model.attention_sublayer(0, &h, &g).unwrap();
        let st = model.store();
        let ids = &model.blocks[0];
        let (x1, _) = layers::layer_norm(&h, st.get(ids.ln1_g), st.get(ids.ln1_b), 1e-5);
        let expected = x1.dot(st.get(ids.wv)).dot(st.get(ids.wo));
        for (a, b) in att.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unmasked_blocks_are_permutation_equivariant() {
        let model = PfgaModel::new(tiny_config(FreezeMode::Partial), 5).unwrap();
        let mut rng = seed::rng(6);
        let h = Array2::from_shape_simple_fn((4, 24), || rng.random_range(-1.0..1.0));
        let perm = [2usize, 0, 3, 1];
        let hp = Array2::from_shape_fn((4, 24), |(i, j)| h[[perm[i], j]]);
        let g = StationGraph::complete(4);
        let out = model.block_forward(0, &h, &g).unwrap();
        let outp = model.block_forward(0, &hp, &g).unwrap();
        for i in 0..4 {
            for j in 0..24 {
                assert!((outp[[i, j]] - out[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_graph_isolates_nodes_in_all_graph_mode() {
        let cfg = tiny_config(FreezeMode::AllGraph);
        let model = PfgaModel::new(cfg.clone(), 7).unwrap();
        let g = StationGraph::identity(4);
        let s = sample(&cfg, 4, 8);
        let base = model.predict(&s, &g).unwrap();
        let mut t = s.clone();
        t.history.slice_mut(s![.., 2, ..]).mapv_inplace(|v| v + 3.0);
        let moved = model.predict(&t, &g).unwrap();
        for n in [0usize, 1, 3] {
            for k in 0..2 {
                assert_eq!(base[[k, n, 0]], moved[[k, n, 0]]);
            }
        }
        assert_ne!(base[[0, 2, 0]], moved[[0, 2, 0]]);
    }

    #[test]
    fn all_ones_mask_equals_unmasked() {
        let masked = PfgaModel::new(tiny_config(FreezeMode::Partial), 9).unwrap();
        let open = PfgaModel::new(ModelConfig { graph_mask: false, ..tiny_config(FreezeMode::Partial) }, 9).unwrap();
        let s = sample(&tiny_config(FreezeMode::Partial), 4, 10);
        let g = StationGraph::complete(4);
        assert_eq!(masked.predict(&s, &g).unwrap(), open.predict(&s, &g).unwrap());
    }

    #[test]
    fn backbone_transfer_copies_matching_tensors() {
        let backbone = PfgaModel::new(tiny_config(FreezeMode::None), 11).unwrap();
        let model = PfgaModel::from_backbone(&backbone, tiny_config(FreezeMode::Partial), 12).unwrap();
        let id = model.store.find("block0.ffn.w1").unwrap();
        assert_eq!(model.store.get(id), backbone.store.get(backbone.store.find("block0.ffn.w1").unwrap()));
        let id = model.store.find("block1.attn.q").unwrap();
        let src = backbone.store.get(backbone.store.find("block1.attn.q").unwrap());
        assert_eq!(model.store.get(id), &nf4_dequantize(&nf4_quantize(src, 64).unwrap()));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = tiny_config(FreezeMode::Partial);
        let model = PfgaModel::new(cfg.clone(), 0).unwrap();
        let s = sample(&cfg, 4, 1);
        assert!(model.predict(&s, &ring(5)).is_err());
        let other = sample(&ModelConfig { in_channels: 3, ..cfg }, 4, 1);
        assert!(model.predict(&other, &ring(4)).is_err());
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let cfg = tiny_config(FreezeMode::Partial);
        let model = PfgaModel::new(cfg.clone(), 13).unwrap();
        let samples: Vec<WindowedSample> = (0..3).map(|i| sample(&cfg, 4, 20 + i)).collect();
        let refs: Vec<&WindowedSample> = samples.iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let preds = split_predictions(&model.forward(&batch, &ring(4)).unwrap(), 4);
        for (p, s) in preds.iter().zip(&samples) {
            let single = model.predict(s, &ring(4)).unwrap();
            for (a, b) in p.iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let targets = stack_targets(&refs);
        assert_eq!(targets[[4 + 2, 1]], samples[1].target[[1, 2, 0]]);
    }
}
