//! Row-batched layer primitives with hand-written backward passes.
//!
//! Activations are `(rows, width)` matrices where rows enumerate
//! `(sample, node)` pairs sample-major, so attention runs on consecutive
//! blocks of `nodes` rows.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

/// Logit assigned to masked attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: Option<&Array2<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += &b.row(0);
    }
    y
}

pub fn column_sums(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
    let w = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / w;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / w;
        *is = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    let y = &xhat * &gamma.row(0) + &beta.row(0);
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array2<f64>,
    cache: &LayerNormCache,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dgamma = column_sums(&(dy * &cache.xhat));
    let dbeta = column_sums(dy);
    let dxhat = dy * &gamma.row(0);
    let w = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_g = g.sum() / w;
        let mean_gx = g.dot(&xh) / w;
        let is = cache.inv_std[r];
        dx.row_mut(r).assign(&((&g - mean_g - &xh * mean_gx) * is));
    }
    (dx, dgamma, dbeta)
}

/// Effective projection weights of one attention sublayer.
pub struct AttentionWeights<'a> {
    pub q: &'a Array2<f64>,
    pub k: &'a Array2<f64>,
    pub v: &'a Array2<f64>,
    pub o: &'a Array2<f64>,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per (sample, head), sample-major.
    probs: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
}

/// Weight gradients of an attention sublayer; `None` where not requested.
#[derive(Default)]
pub struct AttentionGrads {
    pub q: Option<Array2<f64>>,
    pub k: Option<Array2<f64>>,
    pub v: Option<Array2<f64>>,
    pub o: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Default)]
pub struct WantAttention {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Multi-head scaled dot-product attention over each block of `nodes` rows.
/// `mask[i][j] == 0` blocks node `i` from attending to node `j`.
pub fn attention(
    x: &Array2<f64>,
    w: &AttentionWeights,
    heads: usize,
    nodes: usize,
    mask: Option<&Array2<u8>>,
) -> (Array2<f64>, AttentionCache) {
    let width = w.q.ncols();
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = x.dot(w.q);
    let k = x.dot(w.k);
    let v = x.dot(w.v);
    let samples = x.nrows() / nodes;
    let mut heads_out = Array2::zeros((x.nrows(), width));
    let mut probs = Vec::with_capacity(samples * heads);
    for b in 0..samples {
        let rows = b * nodes..(b + 1) * nodes;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut logits = qh.dot(&kh.t()) * scale;
            if let Some(m) = mask {
                ndarray::Zip::from(&mut logits).and(m).for_each(|l, &a| {
                    if a == 0 {
                        *l = MASKED_LOGIT;
                    }
                });
            }
            softmax_rows(&mut logits);
            heads_out.slice_mut(s![rows.clone(), cols]).assign(&logits.dot(&vh));
            probs.push(logits);
        }
    }
    let out = heads_out.dot(w.o);
    (out, AttentionCache { x: x.clone(), q, k, v, probs, heads_out })
}

/// Returns the input gradient and the requested weight gradients.
pub fn attention_backward(
    dout: &Array2<f64>,
    w: &AttentionWeights,
    heads: usize,
    nodes: usize,
    cache: &AttentionCache,
    want: WantAttention,
) -> (Array2<f64>, AttentionGrads) {
    let width = w.q.ncols();
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grads = AttentionGrads::default();
    if want.o {
        grads.o = Some(cache.heads_out.t().dot(dout));
    }
    let dheads = dout.dot(&w.o.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dkm = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    let samples = dout.nrows() / nodes;
    for b in 0..samples {
        let rows = b * nodes..(b + 1) * nodes;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let p = &cache.probs[b * heads + h];
            let dh = dheads.slice(s![rows.clone(), cols.clone()]);
            let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
            let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
            let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dh));
            let dp = dh.dot(&vh.t());
            let mut dlogits = &dp * p;
            for (mut row, prow) in dlogits.rows_mut().into_iter().zip(p.rows()) {
                let inner = row.sum();
                row.zip_mut_with(&prow, |d, &pv| *d -= pv * inner);
            }
            dlogits *= scale;
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&dlogits.dot(&kh));
            dkm.slice_mut(s![rows.clone(), cols]).assign(&dlogits.t().dot(&qh));
        }
    }
    let dx = dq.dot(&w.q.t()) + dkm.dot(&w.k.t()) + dv.dot(&w.v.t());
    if want.q {
        grads.q = Some(cache.x.t().dot(&dq));
    }
    if want.k {
        grads.k = Some(cache.x.t().dot(&dkm));
    }
    if want.v {
        grads.v = Some(cache.x.t().dot(&dv));
    }
    (dx, grads)
}

pub struct FfnCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
}

/// `relu(x W1 + b1) W2 + b2`.
pub fn ffn(x: &Array2<f64>, w1: &Array2<f64>, b1: &Array2<f64>, w2: &Array2<f64>, b2: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let mut hidden = linear(&x.view(), w1, Some(b1));
    hidden.mapv_inplace(|v| v.max(0.0));
    let y = linear(&hidden.view(), w2, Some(b2));
    (y, FfnCache { x: x.clone(), hidden })
}

pub struct FfnGrads {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

pub fn ffn_backward(
    dy: &Array2<f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    cache: &FfnCache,
    want_weights: bool,
) -> (Array2<f64>, Option<FfnGrads>) {
    let mut dhidden = dy.dot(&w2.t());
    dhidden.zip_mut_with(&cache.hidden, |d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    let dx = dhidden.dot(&w1.t());
    let grads = want_weights.then(|| FfnGrads {
        w1: cache.x.t().dot(&dhidden),
        b1: column_sums(&dhidden),
        w2: cache.hidden.t().dot(dy),
        b2: column_sums(dy),
    });
    (dx, grads)
}
