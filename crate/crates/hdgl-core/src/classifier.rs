//! Population-graph classifier: two graph-transformer layers and a linear
//! head over the subject nodes.

use hdgl_autodiff::{Matrix, ParamId, ParamStore, Session, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::uniform_init;
use crate::popgraph::PopulationGraph;

const MASKED: f64 = -1e30;

/// One graph-transformer layer. For node `i` with neighbors `N(i)`:
/// `h_i' = W1 h_i + Σ_{j∈N(i)} α_{i,j} W2 h_j` where the attention
/// coefficients softmax `(W3 h_i)ᵀ(W4 h_j)/√d_k` over `N(i)`. Isolated nodes
/// skip the attention term entirely.
#[derive(Debug, Clone)]
pub struct GraphTransformerLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
}

impl GraphTransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        GraphTransformerLayer {
            in_dim,
            out_dim,
            w_self: store.add(format!("{name}.w_self"), uniform_init(rng, in_dim, out_dim, bound)),
            w_neigh: store.add(format!("{name}.w_neigh"), uniform_init(rng, in_dim, out_dim, bound)),
            w_query: store.add(format!("{name}.w_query"), uniform_init(rng, in_dim, out_dim, bound)),
            w_key: store.add(format!("{name}.w_key"), uniform_init(rng, in_dim, out_dim, bound)),
        }
    }
}

/// Forward pass over all nodes at once. Neighborhoods come from the graph's
/// positive edge weights; attention is unweighted unless `weighted` adds a
/// log-weight bias to the logits.
pub fn graph_transformer_forward(
    sess: &mut Session,
    h: Var,
    graph: &PopulationGraph,
    layer: &GraphTransformerLayer,
    weighted: bool,
) -> Result<Var> {
    let (m, d_in) = sess.tape.value(h).dim();
    if m != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "{m} feature rows for {} graph nodes",
            graph.n_nodes()
        )));
    }
    if d_in != layer.in_dim {
        return Err(Error::Shape(format!(
            "feature width {d_in} vs layer input {}",
            layer.in_dim
        )));
    }
    let d_k = layer.out_dim as f64;

    let wq = sess.param(layer.w_query);
    let wk = sess.param(layer.w_key);
    let q = sess.tape.matmul(h, wq);
    let k = sess.tape.matmul(h, wk);
    let kt = sess.tape.transpose(k);
    let logits = sess.tape.matmul(q, kt);
    let logits = sess.tape.scale(logits, 1.0 / d_k.sqrt());

    // Non-neighbor (and self) entries drop out of the softmax; isolated rows
    // are neutralized afterwards.
    let mut mask = Matrix::from_elem((m, m), MASKED);
    let mut isolated = Matrix::zeros((m, 1));
    for i in 0..m {
        if graph.neighbors[i].is_empty() {
            continue;
        }
        isolated[[i, 0]] = 1.0;
        for &j in &graph.neighbors[i] {
            mask[[i, j]] = if weighted {
                graph.edge_weights[[i, j]].ln()
            } else {
                0.0
            };
        }
    }
    let mask = sess.constant(mask);
    let masked = sess.tape.add(logits, mask);
    let alpha = sess.tape.softmax_rows(masked);
    let keep = sess.constant(isolated);
    let alpha = sess.tape.mul_col(alpha, keep);

    let wn = sess.param(layer.w_neigh);
    let neigh_feats = sess.tape.matmul(h, wn);
    let gathered = sess.tape.matmul(alpha, neigh_feats);
    let ws = sess.param(layer.w_self);
    let own = sess.tape.matmul(h, ws);
    Ok(sess.tape.add(own, gathered))
}

/// Two graph-transformer layers with a ReLU between them, then a linear map to
/// two logits per node.
pub struct PopulationClassifier {
    pub layer1: GraphTransformerLayer,
    pub layer2: GraphTransformerLayer,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub weighted_attention: bool,
}

impl PopulationClassifier {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        weighted_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layer1 = GraphTransformerLayer::new(store, "pop.gt1", in_dim, hidden, rng);
        let layer2 = GraphTransformerLayer::new(store, "pop.gt2", hidden, hidden, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        PopulationClassifier {
            layer1,
            layer2,
            head_w: store.add("pop.head_w", uniform_init(rng, hidden, 2, bound)),
            head_b: store.add("pop.head_b", Matrix::zeros((1, 2))),
            weighted_attention,
        }
    }
}

/// Per-node class logits, `m×2`.
pub fn classify(
    sess: &mut Session,
    features: Var,
    graph: &PopulationGraph,
    clf: &PopulationClassifier,
) -> Result<Var> {
    let h1 = graph_transformer_forward(sess, features, graph, &clf.layer1, clf.weighted_attention)?;
    let h1 = sess.tape.relu(h1);
    let h2 = graph_transformer_forward(sess, h1, graph, &clf.layer2, clf.weighted_attention)?;
    let w = sess.param(clf.head_w);
    let b = sess.param(clf.head_b);
    let logits = sess.tape.matmul(h2, w);
    Ok(sess.tape.add_row(logits, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdgl_autodiff::gradcheck::{max_relative_error, numerical_gradient};
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn graph_from_edges(m: usize, edges: &[(usize, usize)]) -> PopulationGraph {
        let mut weights = Array2::zeros((m, m));
        let mut edge_list = Vec::new();
        for &(a, b) in edges {
            weights[[a, b]] = 1.0;
            weights[[b, a]] = 1.0;
            edge_list.push((a.min(b), a.max(b), 1.0));
        }
        let neighbors = (0..m)
            .map(|i| (0..m).filter(|&j| weights[[i, j]] > 0.0).collect())
            .collect();
        PopulationGraph {
            node_ids: (0..m).map(|i| format!("s{i}")).collect(),
            features: Array2::zeros((m, 1)),
            edge_weights: weights,
            edge_list,
            train_mask: vec![true; m],
            test_mask: vec![false; m],
            neighbors,
        }
    }

    #[test]
    fn single_neighbor_attention_is_unity() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let layer = GraphTransformerLayer::new(&mut store, "gt", 2, 2, &mut r);
        let (w1, w2) = (store.value(layer.w_self).clone(), store.value(layer.w_neigh).clone());
        let graph = graph_from_edges(2, &[(0, 1)]);
        let h = arr2(&[[0.5, -1.0], [2.0, 0.3]]);
        let mut sess = Session::new(&store);
        let hv = sess.constant(h.clone());
        let out = graph_transformer_forward(&mut sess, hv, &graph, &layer, false).unwrap();
        // α over a single neighbor is exactly 1: h0' = W1ᵀh0 + W2ᵀh1 rows.
        let expect0 = h.row(0).dot(&w1) + h.row(1).dot(&w2);
        for (got, want) in sess.tape.value(out).row(0).iter().zip(expect0.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_keeps_only_self_term() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let layer = GraphTransformerLayer::new(&mut store, "gt", 2, 2, &mut r);
        let w1 = store.value(layer.w_self).clone();
        let graph = graph_from_edges(3, &[(0, 1)]);
        let h = arr2(&[[0.5, -1.0], [2.0, 0.3], [1.5, 0.7]]);
        let mut sess = Session::new(&store);
        let hv = sess.constant(h.clone());
        let out = graph_transformer_forward(&mut sess, hv, &graph, &layer, false).unwrap();
        let expect2 = h.row(2).dot(&w1);
        for (got, want) in sess.tape.value(out).row(2).iter().zip(expect2.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Scalar hand-evaluation over a 3-node path with d=1 parameters.
    #[test]
    fn path_graph_matches_hand_computation() {
        let mut store = ParamStore::new();
        let layer = GraphTransformerLayer {
            in_dim: 1,
            out_dim: 1,
            w_self: store.add("w1", arr2(&[[0.5]])),
            w_neigh: store.add("w2", arr2(&[[-0.7]])),
            w_query: store.add("w3", arr2(&[[0.9]])),
            w_key: store.add("w4", arr2(&[[0.4]])),
        };
        let graph = graph_from_edges(3, &[(0, 1), (1, 2)]);
        let h = [1.0, -0.5, 2.0];
        let mut sess = Session::new(&store);
        let hv = sess.constant(arr2(&[[h[0]], [h[1]], [h[2]]]));
        let out = graph_transformer_forward(&mut sess, hv, &graph, &layer, false).unwrap();

        let (w1, w2, w3, w4) = (0.5, -0.7, 0.9, 0.4);
        // Node 1 attends over {0, 2}; nodes 0 and 2 have one neighbor each.
        let logit = |i: f64, j: f64| (w3 * i) * (w4 * j) / 1.0f64.sqrt();
        let l10 = logit(h[1], h[0]);
        let l12 = logit(h[1], h[2]);
        let max = l10.max(l12);
        let (e10, e12) = ((l10 - max).exp(), (l12 - max).exp());
        let a10 = e10 / (e10 + e12);
        let a12 = e12 / (e10 + e12);
        let expect = [
            w1 * h[0] + w2 * h[1],
            w1 * h[1] + a10 * w2 * h[0] + a12 * w2 * h[2],
            w1 * h[2] + w2 * h[1],
        ];
        for (i, want) in expect.iter().enumerate() {
            let got = sess.tape.value(out)[[i, 0]];
            assert!((got - want).abs() < 1e-12, "node {i}: {got} vs {want}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_neighbors() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let layer = GraphTransformerLayer::new(&mut store, "gt", 3, 3, &mut r);
        let graph = graph_from_edges(5, &[(0, 1), (0, 2), (1, 2), (3, 4), (0, 4)]);
        let h = Array2::from_shape_fn((5, 3), |_| r.random_range(-2.0..2.0));
        let mut sess = Session::new(&store);

        // Rebuild the attention matrix exactly as the forward pass does.
        let hv = sess.constant(h);
        let wq = sess.param(layer.w_query);
        let wk = sess.param(layer.w_key);
        let q = sess.tape.matmul(hv, wq);
        let k = sess.tape.matmul(hv, wk);
        let kt = sess.tape.transpose(k);
        let logits = sess.tape.matmul(q, kt);
        let logits = sess.tape.scale(logits, 1.0 / (3f64).sqrt());
        let mut mask = Matrix::from_elem((5, 5), MASKED);
        for i in 0..5 {
            for &j in &graph.neighbors[i] {
                mask[[i, j]] = 0.0;
            }
        }
        let maskv = sess.constant(mask);
        let masked = sess.tape.add(logits, maskv);
        let alpha = sess.tape.softmax_rows(masked);
        for (i, row) in sess.tape.value(alpha).rows().into_iter().enumerate() {
            let on_neighbors: f64 = graph.neighbors[i].iter().map(|&j| row[j]).sum();
            assert!((on_neighbors - 1.0).abs() < 1e-9, "node {i}");
            for j in 0..5 {
                if !graph.neighbors[i].contains(&j) {
                    assert!(row[j].abs() < 1e-12, "mass leaked to non-neighbor {j}");
                }
            }
        }
    }

    #[test]
    fn classifier_outputs_two_logits_per_node_deterministically() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let clf = PopulationClassifier::new(&mut store, 4, 3, false, &mut r);
        let graph = graph_from_edges(6, &[(0, 1), (2, 3), (4, 5), (1, 2)]);
        let h = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.1).sin());
        let mut sess = Session::new(&store);
        let hv = sess.constant(h.clone());
        let logits = classify(&mut sess, hv, &graph, &clf).unwrap();
        assert_eq!(sess.tape.value(logits).dim(), (6, 2));

        let mut sess2 = Session::new(&store);
        let hv2 = sess2.constant(h);
        let logits2 = classify(&mut sess2, hv2, &graph, &clf).unwrap();
        assert_eq!(sess.tape.value(logits), sess2.tape.value(logits2));
    }

    #[test]
    fn edgeless_graph_reduces_to_per_node_mlp() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let clf = PopulationClassifier::new(&mut store, 3, 3, false, &mut r);
        let graph = graph_from_edges(4, &[]);
        let h = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) as f64 * 0.3).cos());
        let mut sess = Session::new(&store);
        let hv = sess.constant(h.clone());
        let logits = classify(&mut sess, hv, &graph, &clf).unwrap();

        let w1a = store.value(clf.layer1.w_self).clone();
        let w1b = store.value(clf.layer2.w_self).clone();
        let wh = store.value(clf.head_w).clone();
        let bh = store.value(clf.head_b).clone();
        let expect = h.dot(&w1a).mapv(|x| x.max(0.0)).dot(&w1b).dot(&wh) + &bh;
        let diff = (sess.tape.value(logits) - &expect).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "edgeless reduction mismatch {diff}");
    }

    #[test]
    fn node_relabeling_permutes_logits() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let clf = PopulationClassifier::new(&mut store, 3, 4, false, &mut r);
        let edges = [(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)];
        let graph = graph_from_edges(4, &edges);
        let h = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));

        let perm = [2usize, 0, 3, 1];
        let pedges: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(a, b)| {
                let pa = perm.iter().position(|&p| p == a).unwrap();
                let pb = perm.iter().position(|&p| p == b).unwrap();
                (pa, pb)
            })
            .collect();
        let pgraph = graph_from_edges(4, &pedges);
        let ph = Array2::from_shape_fn((4, 3), |(i, j)| h[[perm[i], j]]);

        let mut sess = Session::new(&store);
        let hv = sess.constant(h);
        let logits = classify(&mut sess, hv, &graph, &clf).unwrap();
        let phv = sess.constant(ph);
        let plogits = classify(&mut sess, phv, &pgraph, &clf).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                let a = sess.tape.value(plogits)[[i, c]];
                let b = sess.tape.value(logits)[[perm[i], c]];
                assert!((a - b).abs() < 1e-9, "node {i} class {c}");
            }
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let clf = PopulationClassifier::new(&mut store, 2, 3, false, &mut r);
        let graph = graph_from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let h = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));

        let shapes: Vec<(usize, usize)> =
            store.ids().map(|id| store.value(id).dim()).collect();
        let flat: Vec<f64> = store
            .ids()
            .flat_map(|id| store.value(id).iter().cloned().collect::<Vec<_>>())
            .collect();
        let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();

        let run = |point: &[f64]| -> f64 {
            let mut s2 = ParamStore::new();
            let mut at = 0;
            for (shape, name) in shapes.iter().zip(&names) {
                let len = shape.0 * shape.1;
                s2.add(
                    name.clone(),
                    Array2::from_shape_vec(*shape, point[at..at + len].to_vec()).unwrap(),
                );
                at += len;
            }
            let clf2 = PopulationClassifier {
                layer1: GraphTransformerLayer {
                    in_dim: 2,
                    out_dim: 3,
                    w_self: hdgl_autodiff::ParamId(0),
                    w_neigh: hdgl_autodiff::ParamId(1),
                    w_query: hdgl_autodiff::ParamId(2),
                    w_key: hdgl_autodiff::ParamId(3),
                },
                layer2: GraphTransformerLayer {
                    in_dim: 3,
                    out_dim: 3,
                    w_self: hdgl_autodiff::ParamId(4),
                    w_neigh: hdgl_autodiff::ParamId(5),
                    w_query: hdgl_autodiff::ParamId(6),
                    w_key: hdgl_autodiff::ParamId(7),
                },
                head_w: hdgl_autodiff::ParamId(8),
                head_b: hdgl_autodiff::ParamId(9),
                weighted_attention: false,
            };
            let mut sess = Session::new(&s2);
            let hv = sess.constant(h.clone());
            let logits = classify(&mut sess, hv, &graph, &clf2).unwrap();
            let tanh = sess.tape.tanh(logits);
            let loss = sess.tape.sum_all(tanh);
            sess.tape.scalar(loss)
        };

        let mut sess = Session::new(&store);
        let hv = sess.constant(h.clone());
        let logits = classify(&mut sess, hv, &graph, &clf).unwrap();
        let tanh = sess.tape.tanh(logits);
        let loss = sess.tape.sum_all(tanh);
        let grads = sess.backward(loss);
        let param_grads = sess.param_grads(&grads);
        let analytic: Vec<f64> = store
            .ids()
            .zip(&param_grads)
            .flat_map(|(id, g)| {
                g.clone()
                    .unwrap_or_else(|| Matrix::zeros(store.value(id).dim()))
                    .into_iter()
                    .collect::<Vec<_>>()
            })
            .collect();

        let numeric = numerical_gradient(run, &flat, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
