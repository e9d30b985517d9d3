//! Per-subject brain-graph encoder: spatial embedding of every window segment
//! (GCN, self-attention pooling, mean readout) followed by a temporal
//! transformer encoder with sum readout and a perceptron head. Layers stack;
//! the subject embedding is the concatenation of each layer's output.

use std::rc::Rc;

use hdgl_autodiff::{Matrix, ParamId, ParamStore, Session, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::dynfc::{ceil_fraction, DynamicBrainGraph};
use crate::error::{Error, Result};
use crate::features::uniform_init;

/// Symmetrically normalized operator `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalized_operator(adj: &Array2<f64>) -> Array2<f64> {
    let n = adj.dim().0;
    let mut tilde = adj.clone();
    for i in 0..n {
        tilde[[i, i]] += 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| tilde.row(i).sum().sqrt().recip())
        .collect();
    for i in 0..n {
        for j in 0..n {
            tilde[[i, j]] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    tilde
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub theta: ParamId,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        GcnLayer {
            in_dim,
            out_dim,
            theta: store.add(format!("{name}.theta"), uniform_init(rng, in_dim, out_dim, bound)),
        }
    }
}

/// `Z = ReLU(D̃^{-1/2} Ã D̃^{-1/2} X θ)` on a single graph.
pub fn gcn_forward(sess: &mut Session, x: Var, adj: &Array2<f64>, layer: &GcnLayer) -> Result<Var> {
    let (n, d) = sess.tape.value(x).dim();
    if adj.dim() != (n, n) || d != layer.in_dim {
        return Err(Error::Shape(format!(
            "gcn shapes: X {:?}, A {:?}, theta {}x{}",
            (n, d),
            adj.dim(),
            layer.in_dim,
            layer.out_dim
        )));
    }
    let op = sess.constant(normalized_operator(adj));
    let agg = sess.tape.matmul(op, x);
    let theta = sess.param(layer.theta);
    let z = sess.tape.matmul(agg, theta);
    Ok(sess.tape.relu(z))
}

#[derive(Debug, Clone)]
pub struct SagPoolLayer {
    pub ratio: f64,
    /// Attention-score GCN weights, `D×1`: one scalar score per node.
    pub score_theta: ParamId,
}

impl SagPoolLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "pooling ratio must be in (0,1), got {ratio}"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(SagPoolLayer {
            ratio,
            score_theta: store.add(format!("{name}.score"), uniform_init(rng, in_dim, 1, bound)),
        })
    }
}

/// Top scores first, ties to the lower index; the survivors come back sorted.
fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

pub struct PooledGraph {
    pub features: Var,
    pub adjacency: Array2<f64>,
    pub retained: Vec<usize>,
}

/// Self-attention pooling: score nodes with a one-channel GCN pass, keep the
/// top `⌈kN⌉`, gate the surviving feature rows by `tanh(score)` and induce the
/// subgraph.
pub fn sagpool(
    sess: &mut Session,
    x: Var,
    adj: &Array2<f64>,
    layer: &SagPoolLayer,
) -> Result<PooledGraph> {
    let n = sess.tape.value(x).dim().0;
    if n == 0 {
        return Err(Error::EmptyGraph("sagpool on empty graph".into()));
    }
    if adj.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "sagpool adjacency {:?} vs {n} nodes",
            adj.dim()
        )));
    }
    let op = sess.constant(normalized_operator(adj));
    let agg = sess.tape.matmul(op, x);
    let theta = sess.param(layer.score_theta);
    let scores = sess.tape.matmul(agg, theta);

    let keep = ceil_fraction(layer.ratio, n).max(1);
    let score_vals: Vec<f64> = sess.tape.value(scores).column(0).to_vec();
    let retained = top_k_indices(&score_vals, keep);

    let picked = sess.tape.gather_rows(x, retained.clone());
    let picked_scores = sess.tape.gather_rows(scores, retained.clone());
    let gate = sess.tape.tanh(picked_scores);
    let features = sess.tape.mul_col(picked, gate);

    let mut sub = Array2::zeros((keep, keep));
    for (a, &i) in retained.iter().enumerate() {
        for (b, &j) in retained.iter().enumerate() {
            sub[[a, b]] = adj[[i, j]];
        }
    }
    Ok(PooledGraph {
        features,
        adjacency: sub,
        retained,
    })
}

/// Columnwise mean of the node features: one row per graph.
pub fn mean_readout(sess: &mut Session, x: Var) -> Result<Var> {
    let n = sess.tape.value(x).dim().0;
    if n == 0 {
        return Err(Error::EmptyGraph("readout of empty graph".into()));
    }
    let s = sess.tape.sum_rows(x);
    Ok(sess.tape.scale(s, 1.0 / n as f64))
}

/// Inverted-dropout context used during training passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, sess: &mut Session, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        use rand::Rng;
        let shape = sess.tape.value(x).dim();
        let scale = 1.0 / (1.0 - self.rate);
        let mask = Matrix::from_shape_fn(shape, |_| {
            if self.rng.random_range(0.0..1.0) < self.rate {
                0.0
            } else {
                scale
            }
        });
        let m = sess.constant(mask);
        sess.tape.mul(x, m)
    }
}

pub fn maybe_dropout(sess: &mut Session, x: Var, dropout: &mut Option<Dropout>) -> Var {
    match dropout {
        Some(d) => d.apply(sess, x),
        None => x,
    }
}

struct EncoderBlock {
    w_query: ParamId,
    w_key: ParamId,
    w_value: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// Single-head transformer encoder over the per-segment readout sequence, with
/// residual connections and layer normalization around both sublayers, then a
/// sum readout into a one-layer perceptron.
pub struct TemporalEncoder {
    pub dim: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
    blocks: Vec<EncoderBlock>,
    head_w: ParamId,
    head_b: ParamId,
    pub sinusoidal_positions: bool,
}

impl TemporalEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        attn_dim: usize,
        ffn_hidden: usize,
        n_blocks: usize,
        sinusoidal_positions: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if attn_dim != dim {
            return Err(Error::Config(format!(
                "attention width d={attn_dim} must equal embedding width D={dim} \
                 for the residual connections"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let blocks = (0..n_blocks)
            .map(|b| EncoderBlock {
                w_query: store.add(format!("{name}.b{b}.w_query"), uniform_init(rng, dim, attn_dim, bound)),
                w_key: store.add(format!("{name}.b{b}.w_key"), uniform_init(rng, dim, attn_dim, bound)),
                w_value: store.add(format!("{name}.b{b}.w_value"), uniform_init(rng, dim, attn_dim, bound)),
                ln1_gamma: store.add(format!("{name}.b{b}.ln1_gamma"), Matrix::from_elem((1, dim), 1.0)),
                ln1_beta: store.add(format!("{name}.b{b}.ln1_beta"), Matrix::zeros((1, dim))),
                ff_w1: store.add(
                    format!("{name}.b{b}.ff_w1"),
                    uniform_init(rng, dim, ffn_hidden, bound),
                ),
                ff_b1: store.add(format!("{name}.b{b}.ff_b1"), Matrix::zeros((1, ffn_hidden))),
                ff_w2: store.add(
                    format!("{name}.b{b}.ff_w2"),
                    uniform_init(rng, ffn_hidden, dim, 1.0 / (ffn_hidden as f64).sqrt()),
                ),
                ff_b2: store.add(format!("{name}.b{b}.ff_b2"), Matrix::zeros((1, dim))),
                ln2_gamma: store.add(format!("{name}.b{b}.ln2_gamma"), Matrix::from_elem((1, dim), 1.0)),
                ln2_beta: store.add(format!("{name}.b{b}.ln2_beta"), Matrix::zeros((1, dim))),
            })
            .collect();
        Ok(TemporalEncoder {
            dim,
            attn_dim,
            out_dim: dim,
            blocks,
            head_w: store.add(format!("{name}.head_w"), uniform_init(rng, dim, dim, bound)),
            head_b: store.add(format!("{name}.head_b"), Matrix::zeros((1, dim))),
            sinusoidal_positions,
        })
    }
}

fn layer_norm(sess: &mut Session, x: Var, gamma: ParamId, beta: ParamId) -> Var {
    let mu = sess.tape.mean_cols(x);
    let centered = sess.tape.sub_col(x, mu);
    let sq = sess.tape.mul(centered, centered);
    let var = sess.tape.mean_cols(sq);
    let var = sess.tape.add_scalar(var, 1e-5);
    let std = sess.tape.sqrt(var);
    let inv = sess.tape.recip(std);
    let normed = sess.tape.mul_col(centered, inv);
    let g = sess.param(gamma);
    let b = sess.param(beta);
    let scaled = sess.tape.mul_row(normed, g);
    sess.tape.add_row(scaled, b)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)V` for one head.
pub fn scaled_dot_attention(sess: &mut Session, h: Var, w_q: Var, w_k: Var, w_v: Var) -> Var {
    let d_k = sess.tape.value(w_k).dim().1 as f64;
    let q = sess.tape.matmul(h, w_q);
    let k = sess.tape.matmul(h, w_k);
    let v = sess.tape.matmul(h, w_v);
    let kt = sess.tape.transpose(k);
    let logits = sess.tape.matmul(q, kt);
    let scaled = sess.tape.scale(logits, 1.0 / d_k.sqrt());
    let weights = sess.tape.softmax_rows(scaled);
    sess.tape.matmul(weights, v)
}

fn sinusoidal_encoding(t: usize, dim: usize) -> Matrix {
    Matrix::from_shape_fn((t, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Encode a `T×D` readout sequence into a single `1×D` subject-level vector.
pub fn temporal_encode(
    sess: &mut Session,
    h_seq: Var,
    enc: &TemporalEncoder,
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    let (t, d) = sess.tape.value(h_seq).dim();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if d != enc.dim {
        return Err(Error::Shape(format!(
            "temporal encoder expects width {}, got {d}",
            enc.dim
        )));
    }
    let mut h = h_seq;
    if enc.sinusoidal_positions {
        let pe = sess.constant(sinusoidal_encoding(t, d));
        h = sess.tape.add(h, pe);
    }
    for block in &enc.blocks {
        let wq = sess.param(block.w_query);
        let wk = sess.param(block.w_key);
        let wv = sess.param(block.w_value);
        let attn = scaled_dot_attention(sess, h, wq, wk, wv);
        let res1 = sess.tape.add(h, attn);
        let h1 = layer_norm(sess, res1, block.ln1_gamma, block.ln1_beta);

        let w1 = sess.param(block.ff_w1);
        let b1 = sess.param(block.ff_b1);
        let lin1 = sess.tape.matmul(h1, w1);
        let lin1 = sess.tape.add_row(lin1, b1);
        let act = sess.tape.relu(lin1);
        let act = maybe_dropout(sess, act, dropout);
        let w2 = sess.param(block.ff_w2);
        let b2 = sess.param(block.ff_b2);
        let lin2 = sess.tape.matmul(act, w2);
        let lin2 = sess.tape.add_row(lin2, b2);
        let res2 = sess.tape.add(h1, lin2);
        h = layer_norm(sess, res2, block.ln2_gamma, block.ln2_beta);
    }
    let summed = sess.tape.sum_rows(h);
    let hw = sess.param(enc.head_w);
    let hb = sess.param(enc.head_b);
    let out = sess.tape.matmul(summed, hw);
    let out = sess.tape.add_row(out, hb);
    Ok(sess.tape.relu(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TemporalMode {
    /// Transformer encoder, sum readout, perceptron head.
    Transformer,
    /// Plain mean over the segment readouts (ablation arm).
    MeanPool,
}

/// One stack layer: spatial embedding plus its own temporal encoder.
pub struct BrainLayer {
    pub gcn: GcnLayer,
    pub pool: Option<SagPoolLayer>,
    pub temporal: Option<TemporalEncoder>,
}

/// The K-layer brain encoder. Layer 1 consumes the window graphs and their
/// node features; each later layer consumes the pooled graphs of the previous
/// one. Every layer yields one vector; the subject embedding concatenates them.
pub struct BrainEncoder {
    pub layers: Vec<BrainLayer>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderSettings {
    pub in_dim: usize,
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub ffn_hidden: usize,
    pub encoder_blocks: usize,
    pub stack_layers: usize,
    pub pooling_ratio: f64,
    pub sinusoidal_positions: bool,
    pub use_sagpool: bool,
    pub temporal_mode: TemporalMode,
}

impl BrainEncoder {
    pub fn new(store: &mut ParamStore, s: &EncoderSettings, rng: &mut ChaCha8Rng) -> Result<Self> {
        if s.stack_layers == 0 {
            return Err(Error::Config("stack needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(s.stack_layers);
        for k in 0..s.stack_layers {
            let name = format!("brain.l{k}");
            let in_dim = if k == 0 { s.in_dim } else { s.feature_dim };
            let gcn = GcnLayer::new(store, &name, in_dim, s.feature_dim, rng);
            let pool = if s.use_sagpool {
                Some(SagPoolLayer::new(
                    store,
                    &name,
                    s.feature_dim,
                    s.pooling_ratio,
                    rng,
                )?)
            } else {
                None
            };
            let temporal = match s.temporal_mode {
                TemporalMode::Transformer => Some(TemporalEncoder::new(
                    store,
                    &format!("{name}.temporal"),
                    s.feature_dim,
                    s.attn_dim,
                    s.ffn_hidden,
                    s.encoder_blocks,
                    s.sinusoidal_positions,
                    rng,
                )?),
                TemporalMode::MeanPool => None,
            };
            layers.push(BrainLayer { gcn, pool, temporal });
        }
        Ok(BrainEncoder {
            layers,
            feature_dim: s.feature_dim,
        })
    }

    /// Width of the subject embedding this encoder produces.
    pub fn embedding_dim(&self) -> usize {
        self.layers.len() * self.feature_dim
    }
}

/// Which original ROI ids survived pooling, per stack layer and segment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PoolTrace {
    pub layers: Vec<Vec<Vec<usize>>>,
}

/// Encode one subject from its dynamic graph and per-segment feature matrices.
pub fn encode_subject(
    sess: &mut Session,
    graph: &DynamicBrainGraph,
    segment_features: &[Var],
    encoder: &BrainEncoder,
    dropout: &mut Option<Dropout>,
) -> Result<(Var, PoolTrace)> {
    let t = graph.n_segments();
    if segment_features.len() != t {
        return Err(Error::Shape(format!(
            "{} feature matrices for {t} segments",
            segment_features.len()
        )));
    }
    let n = graph.n_rois();
    for (s, &f) in segment_features.iter().enumerate() {
        let rows = sess.tape.value(f).dim().0;
        if rows != n {
            return Err(Error::Shape(format!(
                "segment {s} features have {rows} rows, graph has {n} nodes"
            )));
        }
    }
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let stacked = sess.tape.concat_rows(segment_features);
    encode_subject_stacked(sess, graph, stacked, encoder, dropout)
}

/// [`encode_subject`] on features already stacked into one `(T·N)×D` matrix,
/// segment blocks in order. Features, graphs and pooling all live in this
/// block-diagonal layout so a whole layer costs a handful of tape nodes
/// regardless of T.
pub fn encode_subject_stacked(
    sess: &mut Session,
    graph: &DynamicBrainGraph,
    stacked_features: Var,
    encoder: &BrainEncoder,
    dropout: &mut Option<Dropout>,
) -> Result<(Var, PoolTrace)> {
    let t = graph.n_segments();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let n = graph.n_rois();
    if sess.tape.value(stacked_features).dim().0 != t * n {
        return Err(Error::Shape(format!(
            "stacked features have {} rows, expected {t}x{n}",
            sess.tape.value(stacked_features).dim().0
        )));
    }

    let mut x = stacked_features;
    let mut sizes: Vec<usize> = vec![n; t];
    let mut adjacencies: Vec<Array2<f64>> = graph.adjacencies.clone();
    let mut global_ids: Vec<Vec<usize>> = vec![(0..n).collect(); t];

    let mut outputs = Vec::with_capacity(encoder.layers.len());
    let mut trace = PoolTrace { layers: Vec::new() };

    for layer in &encoder.layers {
        let blocks: Rc<Vec<Matrix>> =
            Rc::new(adjacencies.iter().map(normalized_operator).collect());

        // GCN over all segments at once.
        let agg = sess.tape.block_matmul(Rc::clone(&blocks), x);
        let theta = sess.param(layer.gcn.theta);
        let z = sess.tape.matmul(agg, theta);
        let z = sess.tape.relu(z);
        let z = maybe_dropout(sess, z, dropout);

        // Pooling (scores from a one-channel GCN pass over the same blocks).
        let (pooled, new_sizes, new_adjacencies, new_global_ids) = match &layer.pool {
            Some(pool) => {
                let sagg = sess.tape.block_matmul(Rc::clone(&blocks), z);
                let stheta = sess.param(pool.score_theta);
                let scores = sess.tape.matmul(sagg, stheta);
                let score_vals: Vec<f64> = sess.tape.value(scores).column(0).to_vec();

                let mut keep_rows = Vec::new();
                let mut new_sizes = Vec::with_capacity(t);
                let mut new_adjacencies = Vec::with_capacity(t);
                let mut new_global = Vec::with_capacity(t);
                let mut offset = 0;
                for (seg, &size) in sizes.iter().enumerate() {
                    let local = &score_vals[offset..offset + size];
                    let keep = ceil_fraction(pool.ratio, size).max(1);
                    let retained = top_k_indices(local, keep);
                    let mut sub = Array2::zeros((keep, keep));
                    for (a, &i) in retained.iter().enumerate() {
                        for (b, &j) in retained.iter().enumerate() {
                            sub[[a, b]] = adjacencies[seg][[i, j]];
                        }
                    }
                    new_global.push(retained.iter().map(|&i| global_ids[seg][i]).collect());
                    keep_rows.extend(retained.iter().map(|&i| offset + i));
                    new_sizes.push(keep);
                    new_adjacencies.push(sub);
                    offset += size;
                }
                let picked = sess.tape.gather_rows(z, keep_rows.clone());
                let picked_scores = sess.tape.gather_rows(scores, keep_rows);
                let gate = sess.tape.tanh(picked_scores);
                let pooled = sess.tape.mul_col(picked, gate);
                (pooled, new_sizes, new_adjacencies, new_global)
            }
            None => (z, sizes.clone(), adjacencies.clone(), global_ids.clone()),
        };
        trace.layers.push(new_global_ids.clone());

        let readouts = sess.tape.segment_mean(pooled, new_sizes.clone());
        let h_layer = match &layer.temporal {
            Some(enc) => temporal_encode(sess, readouts, enc, dropout)?,
            None => {
                let s = sess.tape.sum_rows(readouts);
                sess.tape.scale(s, 1.0 / t as f64)
            }
        };
        outputs.push(h_layer);

        x = pooled;
        sizes = new_sizes;
        adjacencies = new_adjacencies;
        global_ids = new_global_ids;
    }

    let mut h = outputs[0];
    for &o in &outputs[1..] {
        h = sess.tape.concat_cols(h, o);
    }
    Ok((h, trace))
}
