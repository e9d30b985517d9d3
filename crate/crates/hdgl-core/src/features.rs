//! Time-dependent node features: a GRU consumes the signal prefix up to each
//! window endpoint, and a learned projection mixes the GRU state with a
//! one-hot ROI identity.

use hdgl_autodiff::{Matrix, ParamId, ParamStore, Session, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::RoiTimeSeries;
use crate::dynfc::DynamicBrainGraph;
use crate::error::{Error, Result};

pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Single-layer unidirectional GRU, hidden state initialized to zero.
///
/// Gate parameters follow the usual update/reset/candidate split; the step is
/// `h' = (1 - z) ⊙ n + z ⊙ h` with the reset gate applied to the hidden state
/// inside the candidate.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruEncoder {
    pub fn new(
        store: &mut ParamStore,
        input_size: usize,
        hidden_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let mut w = |store: &mut ParamStore, name: &str, rows, cols| {
            store.add(name, uniform_init(rng, rows, cols, bound))
        };
        GruEncoder {
            input_size,
            hidden_size,
            w_update: w(store, "gru.w_update", input_size, hidden_size),
            u_update: w(store, "gru.u_update", hidden_size, hidden_size),
            b_update: store.add("gru.b_update", Matrix::zeros((1, hidden_size))),
            w_reset: {
                let p = uniform_init(rng, input_size, hidden_size, bound);
                store.add("gru.w_reset", p)
            },
            u_reset: {
                let p = uniform_init(rng, hidden_size, hidden_size, bound);
                store.add("gru.u_reset", p)
            },
            b_reset: store.add("gru.b_reset", Matrix::zeros((1, hidden_size))),
            w_cand: {
                let p = uniform_init(rng, input_size, hidden_size, bound);
                store.add("gru.w_cand", p)
            },
            u_cand: {
                let p = uniform_init(rng, hidden_size, hidden_size, bound);
                store.add("gru.u_cand", p)
            },
            b_cand: store.add("gru.b_cand", Matrix::zeros((1, hidden_size))),
        }
    }

    /// One GRU step over a batch: `x` is `B×N`, `h` is `B×D`.
    fn step(&self, sess: &mut Session, x: Var, h: Var) -> Var {
        let (wz, uz, bz) = (
            sess.param(self.w_update),
            sess.param(self.u_update),
            sess.param(self.b_update),
        );
        let (wr, ur, br) = (
            sess.param(self.w_reset),
            sess.param(self.u_reset),
            sess.param(self.b_reset),
        );
        let (wn, un, bn) = (
            sess.param(self.w_cand),
            sess.param(self.u_cand),
            sess.param(self.b_cand),
        );
        let t = &mut sess.tape;

        let zx = t.matmul(x, wz);
        let zh = t.matmul(h, uz);
        let zs = t.add(zx, zh);
        let zs = t.add_row(zs, bz);
        let z = t.sigmoid(zs);

        let rx = t.matmul(x, wr);
        let rh = t.matmul(h, ur);
        let rs = t.add(rx, rh);
        let rs = t.add_row(rs, br);
        let r = t.sigmoid(rs);

        let rh = t.mul(r, h);
        let nx = t.matmul(x, wn);
        let nh = t.matmul(rh, un);
        let ns = t.add(nx, nh);
        let ns = t.add_row(ns, bn);
        let n = t.tanh(ns);

        // h' = n + z ⊙ (h − n)
        let hn = t.sub(h, n);
        let zhn = t.mul(z, hn);
        t.add(n, zhn)
    }

    /// Run the recurrence over columns `0..endpoint` of one subject's series
    /// and return the final hidden state as a `1×D` row.
    pub fn encode_prefix(
        &self,
        sess: &mut Session,
        ts: &RoiTimeSeries,
        endpoint: usize,
    ) -> Result<Var> {
        if endpoint == 0 || endpoint > ts.n_timepoints() {
            return Err(Error::InvalidInput(format!(
                "endpoint {endpoint} out of range 1..={}",
                ts.n_timepoints()
            )));
        }
        let states = self.encode_batch(sess, &[&ts.values], &[endpoint])?;
        Ok(states[0][0])
    }

    /// Shared recurrence over a batch of series with identical length,
    /// capturing the hidden state at each requested endpoint.
    ///
    /// Returns, per subject, one `1×D` state per endpoint. Endpoints must be
    /// strictly increasing, so a single pass covers them all; each segment
    /// therefore costs exactly one GRU evaluation.
    pub fn encode_batch(
        &self,
        sess: &mut Session,
        series: &[&Array2<f64>],
        endpoints: &[usize],
    ) -> Result<Vec<Vec<Var>>> {
        if series.is_empty() || endpoints.is_empty() {
            return Err(Error::InvalidInput("empty GRU batch".into()));
        }
        let tmax = series[0].dim().1;
        for s in series {
            if s.dim() != (self.input_size, tmax) {
                return Err(Error::Shape(format!(
                    "series shape {:?} does not match GRU input {}x{tmax}",
                    s.dim(),
                    self.input_size
                )));
            }
        }
        if !endpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("endpoints must be strictly increasing".into()));
        }
        let last = *endpoints.last().unwrap();
        if endpoints[0] == 0 || last > tmax {
            return Err(Error::InvalidInput(format!(
                "endpoint out of range 1..={tmax}"
            )));
        }

        let batch = series.len();
        let mut h = sess.constant(Matrix::zeros((batch, self.hidden_size)));
        let mut captured: Vec<Var> = Vec::with_capacity(endpoints.len());
        let mut next = 0;
        for t in 0..last {
            let x = Matrix::from_shape_fn((batch, self.input_size), |(b, r)| series[b][[r, t]]);
            let x = sess.constant(x);
            h = self.step(sess, x, h);
            if next < endpoints.len() && t + 1 == endpoints[next] {
                captured.push(h);
                next += 1;
            }
        }
        let per_subject = (0..batch)
            .map(|b| {
                captured
                    .iter()
                    .map(|&state| sess.tape.gather_rows(state, vec![b]))
                    .collect()
            })
            .collect();
        Ok(per_subject)
    }

    /// Like [`encode_batch`] but returning, per subject, one `T×D` matrix of
    /// endpoint states instead of separate rows. Cheaper for downstream use.
    pub fn encode_batch_stacked(
        &self,
        sess: &mut Session,
        series: &[&Array2<f64>],
        endpoints: &[usize],
    ) -> Result<Vec<Var>> {
        if series.is_empty() || endpoints.is_empty() {
            return Err(Error::InvalidInput("empty GRU batch".into()));
        }
        let tmax = series[0].dim().1;
        for s in series {
            if s.dim() != (self.input_size, tmax) {
                return Err(Error::Shape(format!(
                    "series shape {:?} does not match GRU input {}x{tmax}",
                    s.dim(),
                    self.input_size
                )));
            }
        }
        if !endpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("endpoints must be strictly increasing".into()));
        }
        let last = *endpoints.last().unwrap();
        if endpoints[0] == 0 || last > tmax {
            return Err(Error::InvalidInput(format!("endpoint out of range 1..={tmax}")));
        }

        let batch = series.len();
        let mut h = sess.constant(Matrix::zeros((batch, self.hidden_size)));
        let mut captured: Vec<Var> = Vec::with_capacity(endpoints.len());
        let mut next = 0;
        for t in 0..last {
            let x = Matrix::from_shape_fn((batch, self.input_size), |(b, r)| series[b][[r, t]]);
            let x = sess.constant(x);
            h = self.step(sess, x, h);
            if next < endpoints.len() && t + 1 == endpoints[next] {
                captured.push(h);
                next += 1;
            }
        }
        Ok((0..batch)
            .map(|b| sess.tape.row_from_each(&captured, b))
            .collect())
    }
}

/// Learned map from `[one_hot(roi) ∥ η]` to a `D`-dimensional node feature.
#[derive(Debug, Clone)]
pub struct NodeFeatureProjector {
    pub n_rois: usize,
    pub feature_dim: usize,
    /// `D×(N+D)`, applied as `x_v = W [e_v ; η]`.
    pub weight: ParamId,
}

impl NodeFeatureProjector {
    pub fn new(
        store: &mut ParamStore,
        n_rois: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((n_rois + feature_dim) as f64).sqrt();
        let weight = store.add(
            "projector.weight",
            uniform_init(rng, feature_dim, n_rois + feature_dim, bound),
        );
        NodeFeatureProjector {
            n_rois,
            feature_dim,
            weight,
        }
    }

    /// Feature for a single ROI given a shared `1×D` GRU state.
    pub fn node_feature(&self, sess: &mut Session, roi: usize, eta: Var) -> Result<Var> {
        if roi >= self.n_rois {
            return Err(Error::InvalidInput(format!(
                "ROI index {roi} out of range 0..{}",
                self.n_rois
            )));
        }
        let mut one_hot = Matrix::zeros((1, self.n_rois));
        one_hot[[0, roi]] = 1.0;
        let e = sess.constant(one_hot);
        let cat = sess.tape.concat_cols(e, eta);
        let w = sess.param(self.weight);
        let wt = sess.tape.transpose(w);
        Ok(sess.tape.matmul(cat, wt))
    }

    /// All `N` node features of one segment at once: rows share `η` and differ
    /// only through their one-hot block.
    pub fn segment_features(&self, sess: &mut Session, eta: Var) -> Var {
        let identity = sess.constant(Matrix::eye(self.n_rois));
        let ones = sess.constant(Matrix::from_elem((self.n_rois, 1), 1.0));
        let tiled = sess.tape.matmul(ones, eta);
        let cat = sess.tape.concat_cols(identity, tiled);
        let w = sess.param(self.weight);
        let wt = sess.tape.transpose(w);
        sess.tape.matmul(cat, wt)
    }
}

/// Per-segment feature matrices `X(t) ∈ R^{N×D}` for one subject: one GRU
/// evaluation per segment endpoint, shared across that segment's nodes.
pub fn feature_matrix(
    sess: &mut Session,
    ts: &RoiTimeSeries,
    graph: &DynamicBrainGraph,
    encoder: &GruEncoder,
    projector: &NodeFeatureProjector,
) -> Result<Vec<Var>> {
    if graph.n_rois() != ts.n_rois() || ts.n_rois() != projector.n_rois {
        return Err(Error::Shape(format!(
            "ROI count mismatch: series {}, graph {}, projector {}",
            ts.n_rois(),
            graph.n_rois(),
            projector.n_rois
        )));
    }
    let states = encoder.encode_batch(sess, &[&ts.values], &graph.window_endpoints)?;
    Ok(states[0]
        .iter()
        .map(|&eta| projector.segment_features(sess, eta))
        .collect())
}
