//! Model assembly and batched subject encoding shared by the training regimes.

use hdgl_autodiff::{Matrix, ParamId, ParamStore, Session, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize_timeseries, PhenotypeRecord, RoiTimeSeries};
use crate::dynfc::{build_dynamic_graph, slice_windows, DynamicBrainGraph, WindowSpec};
use crate::encoder::{
    encode_subject_stacked, BrainEncoder, Dropout, EncoderSettings, PoolTrace,
};
use crate::error::{Error, Result};
use crate::features::{uniform_init, GruEncoder, NodeFeatureProjector};
use crate::classifier::PopulationClassifier;
use crate::training::TrainConfig;

/// Where level-1 node features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureMode {
    /// GRU state over the signal prefix, mixed with the ROI one-hot.
    Gru,
    /// The raw windowed signal rows themselves (ablation arm).
    RawWindow,
}

pub struct LinearHead {
    pub w: ParamId,
    pub b: ParamId,
}

/// One subject prepared for training: normalized series, its dynamic graph
/// and the raw window slices.
pub struct SubjectData {
    pub id: String,
    pub series: Matrix,
    pub graph: DynamicBrainGraph,
    pub segments: Vec<Matrix>,
    pub phenotype: PhenotypeRecord,
}

pub struct CohortData {
    pub subjects: Vec<SubjectData>,
    pub n_rois: usize,
}

impl CohortData {
    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.phenotype.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn id_labels(&self) -> Vec<(String, u8)> {
        self.subjects
            .iter()
            .map(|s| (s.id.clone(), s.phenotype.label))
            .collect()
    }
}

/// Normalize, window and threshold every subject. Phenotypes are matched by
/// subject id and every series must have one.
pub fn prepare_cohort(
    series: &[RoiTimeSeries],
    phenotypes: &[PhenotypeRecord],
    cfg: &TrainConfig,
) -> Result<CohortData> {
    if series.is_empty() {
        return Err(Error::InvalidInput("empty cohort".into()));
    }
    let window = WindowSpec::new(cfg.window_length, cfg.window_stride)?;
    let by_id: std::collections::BTreeMap<&str, &PhenotypeRecord> = phenotypes
        .iter()
        .map(|p| (p.subject_id.as_str(), p))
        .collect();
    let n_rois = series[0].n_rois();
    let mut subjects = Vec::with_capacity(series.len());
    for ts in series {
        if ts.n_rois() != n_rois {
            return Err(Error::Shape(format!(
                "subject {} has {} ROIs, cohort has {n_rois}",
                ts.subject_id,
                ts.n_rois()
            )));
        }
        let phenotype = by_id
            .get(ts.subject_id.as_str())
            .ok_or_else(|| Error::Schema(format!("no phenotype record for {}", ts.subject_id)))?;
        let normalized = normalize_timeseries(ts)?;
        let graph = build_dynamic_graph(
            &normalized,
            window,
            cfg.keep_fraction,
            cfg.window_count_plus_one,
        )?;
        let segments = slice_windows(&normalized, window, cfg.window_count_plus_one)?
            .into_iter()
            .map(|s| s.data)
            .collect();
        subjects.push(SubjectData {
            id: ts.subject_id.clone(),
            series: normalized.values,
            graph,
            segments,
            phenotype: (*phenotype).clone(),
        });
    }
    Ok(CohortData { subjects, n_rois })
}

/// Both levels of the model plus the temporary level-1 classification head.
pub struct HdglModel {
    pub store: ParamStore,
    pub gru: Option<GruEncoder>,
    pub projector: Option<NodeFeatureProjector>,
    pub encoder: BrainEncoder,
    pub level1_head: LinearHead,
    pub classifier: Option<PopulationClassifier>,
    level1_params: usize,
}

impl HdglModel {
    pub fn build(cfg: &TrainConfig, n_rois: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let (gru, projector, encoder_in) = match cfg.feature_mode {
            FeatureMode::Gru => {
                let gru = GruEncoder::new(&mut store, n_rois, cfg.embed_dim, &mut rng);
                let projector =
                    NodeFeatureProjector::new(&mut store, n_rois, cfg.embed_dim, &mut rng);
                (Some(gru), Some(projector), cfg.embed_dim)
            }
            FeatureMode::RawWindow => (None, None, cfg.window_length),
        };

        let encoder = BrainEncoder::new(
            &mut store,
            &EncoderSettings {
                in_dim: encoder_in,
                feature_dim: cfg.embed_dim,
                attn_dim: cfg.attn_dim,
                ffn_hidden: cfg.ffn_hidden,
                encoder_blocks: cfg.encoder_blocks,
                stack_layers: cfg.stack_layers,
                pooling_ratio: cfg.pooling_ratio,
                sinusoidal_positions: cfg.sinusoidal_positions,
                use_sagpool: cfg.use_sagpool,
                temporal_mode: cfg.temporal_mode,
            },
            &mut rng,
        )?;
        let h = encoder.embedding_dim();
        let bound = 1.0 / (h as f64).sqrt();
        let level1_head = LinearHead {
            w: store.add("level1_head.w", uniform_init(&mut rng, h, 2, bound)),
            b: store.add("level1_head.b", Matrix::zeros((1, 2))),
        };
        let level1_params = store.len();

        let classifier = if cfg.use_population {
            Some(PopulationClassifier::new(
                &mut store,
                h,
                cfg.pop_hidden,
                cfg.weighted_attention,
                &mut rng,
            ))
        } else {
            None
        };

        Ok(HdglModel {
            store,
            gru,
            projector,
            encoder,
            level1_head,
            classifier,
            level1_params,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim()
    }

    /// Mask selecting the level-1 parameters (encoder side plus the temporary
    /// head). The phase-1 optimizer of trans-sep runs under this mask.
    pub fn level1_mask(&self) -> Vec<bool> {
        (0..self.store.len()).map(|i| i < self.level1_params).collect()
    }

    /// Mask selecting only the population classifier parameters; the level-1
    /// head is deliberately absent.
    pub fn classifier_mask(&self) -> Vec<bool> {
        (0..self.store.len()).map(|i| i >= self.level1_params).collect()
    }

    /// Snapshot of the level-1 parameter values, for freeze assertions.
    pub fn level1_values(&self) -> Vec<Matrix> {
        self.store
            .ids()
            .take(self.level1_params)
            .map(|id| self.store.value(id).clone())
            .collect()
    }
}

pub struct EncodedSubjects {
    /// `1×H` embedding per requested subject, in request order.
    pub embeddings: Vec<Var>,
    pub traces: Vec<PoolTrace>,
}

/// Encode a set of subjects in one session. Subjects sharing a series length
/// run through the GRU as one batch; the spatial/temporal stack runs per
/// subject. Every encoded subject bumps `forward_counter` once.
pub fn encode_subjects(
    sess: &mut Session,
    model: &HdglModel,
    cohort: &CohortData,
    indices: &[usize],
    feature_mode: FeatureMode,
    dropout: &mut Option<Dropout>,
    forward_counter: &mut usize,
) -> Result<EncodedSubjects> {
    let mut embeddings: Vec<Option<Var>> = vec![None; indices.len()];
    let mut traces: Vec<Option<PoolTrace>> = vec![None; indices.len()];

    match feature_mode {
        FeatureMode::Gru => {
            let gru = model.gru.as_ref().expect("GRU mode without GRU");
            let projector = model.projector.as_ref().expect("GRU mode without projector");
            // Group by series length: equal lengths share window endpoints.
            let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (slot, &subject) in indices.iter().enumerate() {
                let tmax = cohort.subjects[subject].series.dim().1;
                groups.entry(tmax).or_default().push(slot);
            }
            for slots in groups.values() {
                let endpoints = cohort.subjects[indices[slots[0]]]
                    .graph
                    .window_endpoints
                    .clone();
                let series: Vec<&Matrix> = slots
                    .iter()
                    .map(|&slot| &cohort.subjects[indices[slot]].series)
                    .collect();
                let states = gru.encode_batch_stacked(sess, &series, &endpoints)?;
                for (&slot, state_seq) in slots.iter().zip(states) {
                    let subject = &cohort.subjects[indices[slot]];
                    let stacked =
                        project_stacked_features(sess, projector, state_seq, subject.graph.n_segments());
                    let (h, trace) = encode_subject_stacked(
                        sess,
                        &subject.graph,
                        stacked,
                        &model.encoder,
                        dropout,
                    )?;
                    *forward_counter += 1;
                    embeddings[slot] = Some(h);
                    traces[slot] = Some(trace);
                }
            }
        }
        FeatureMode::RawWindow => {
            for (slot, &idx) in indices.iter().enumerate() {
                let subject = &cohort.subjects[idx];
                let t = subject.segments.len();
                let n = cohort.n_rois;
                let width = subject.segments[0].dim().1;
                let mut stacked = Matrix::zeros((t * n, width));
                for (s, seg) in subject.segments.iter().enumerate() {
                    stacked
                        .slice_mut(ndarray::s![s * n..(s + 1) * n, ..])
                        .assign(seg);
                }
                let stacked = sess.constant(stacked);
                let (h, trace) = encode_subject_stacked(
                    sess,
                    &subject.graph,
                    stacked,
                    &model.encoder,
                    dropout,
                )?;
                *forward_counter += 1;
                embeddings[slot] = Some(h);
                traces[slot] = Some(trace);
            }
        }
    }

    Ok(EncodedSubjects {
        embeddings: embeddings.into_iter().map(Option::unwrap).collect(),
        traces: traces.into_iter().map(Option::unwrap).collect(),
    })
}

/// All segment feature matrices of one subject, stacked `(T·N)×D`.
///
/// Row `t·N + v` is `W[e_v ∥ η_t]`: the one-hot block picks row `v` of `Wᵀ`,
/// the GRU block projects the segment state, and the two add.
fn project_stacked_features(
    sess: &mut Session,
    projector: &NodeFeatureProjector,
    state_seq: Var,
    n_segments: usize,
) -> Var {
    let n = projector.n_rois;
    let d = projector.feature_dim;
    let w = sess.param(projector.weight);
    let wt = sess.tape.transpose(w);

    let onehot_rows: Vec<usize> = (0..n_segments).flat_map(|_| 0..n).collect();
    let id_part = sess.tape.gather_rows(wt, onehot_rows);

    let eta_rows: Vec<usize> = (0..n_segments).flat_map(|t| vec![t; n]).collect();
    let etas = sess.tape.gather_rows(state_seq, eta_rows);
    let w_right = sess.tape.gather_rows(wt, (n..n + d).collect());
    let eta_part = sess.tape.matmul(etas, w_right);

    sess.tape.add(id_part, eta_part)
}

/// Per-subject logits from the temporary level-1 linear head.
pub fn level1_logits(sess: &mut Session, model: &HdglModel, embeddings: &[Var]) -> Var {
    let features = sess.tape.concat_rows(embeddings);
    let w = sess.param(model.level1_head.w);
    let b = sess.param(model.level1_head.b);
    let logits = sess.tape.matmul(features, w);
    sess.tape.add_row(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_cohort;
    use crate::features::feature_matrix;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            embed_dim: 4,
            attn_dim: 4,
            ffn_hidden: 4,
            encoder_blocks: 1,
            stack_layers: 2,
            window_length: 10,
            window_stride: 5,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn toy_cohort(cfg: &TrainConfig) -> CohortData {
        let (series, phenos) = generate_synthetic_cohort(4, 6, 30, 0.6, 3).unwrap();
        prepare_cohort(&series, &phenos, cfg).unwrap()
    }

    #[test]
    fn cohort_preparation_builds_graphs_and_segments() {
        let cfg = toy_cfg();
        let cohort = toy_cohort(&cfg);
        assert_eq!(cohort.subjects.len(), 4);
        for s in &cohort.subjects {
            assert_eq!(s.graph.n_segments(), 4); // (30-10)/5
            assert_eq!(s.segments.len(), 4);
        }
    }

    #[test]
    fn stacked_projection_matches_public_feature_matrix() {
        let cfg = toy_cfg();
        let cohort = toy_cohort(&cfg);
        let model = HdglModel::build(&cfg, cohort.n_rois, 11).unwrap();
        let gru = model.gru.as_ref().unwrap();
        let projector = model.projector.as_ref().unwrap();
        let subject = &cohort.subjects[1];

        let mut sess = Session::new(&model.store);
        let ts = RoiTimeSeries::new(subject.id.clone(), subject.series.clone());
        let per_segment =
            feature_matrix(&mut sess, &ts, &subject.graph, gru, projector).unwrap();
        let reference = sess.tape.concat_rows(&per_segment);

        let states = gru
            .encode_batch_stacked(&mut sess, &[&subject.series], &subject.graph.window_endpoints)
            .unwrap();
        let stacked =
            project_stacked_features(&mut sess, projector, states[0], subject.graph.n_segments());
        let diff = (sess.tape.value(stacked) - sess.tape.value(reference))
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-12, "stacked projection diverged: {diff}");
    }

    #[test]
    fn encoding_counts_one_forward_per_subject() {
        let cfg = toy_cfg();
        let cohort = toy_cohort(&cfg);
        let model = HdglModel::build(&cfg, cohort.n_rois, 5).unwrap();
        let mut sess = Session::new(&model.store);
        let mut count = 0;
        let out = encode_subjects(
            &mut sess,
            &model,
            &cohort,
            &[0, 2, 3],
            FeatureMode::Gru,
            &mut None,
            &mut count,
        )
        .unwrap();
        assert_eq!(count, 3);
        assert_eq!(out.embeddings.len(), 3);
        let h = model.embedding_dim();
        for e in &out.embeddings {
            assert_eq!(sess.tape.value(*e).dim(), (1, h));
        }
    }

    #[test]
    fn parameter_masks_split_levels() {
        let cfg = toy_cfg();
        let model = HdglModel::build(&cfg, 6, 5).unwrap();
        let l1 = model.level1_mask();
        let l2 = model.classifier_mask();
        assert_eq!(l1.len(), l2.len());
        assert!(l1.iter().zip(&l2).all(|(a, b)| a ^ b));
        // The level-1 head belongs to phase 1, never to phase 2.
        let head_idx = model.level1_head.w.0;
        assert!(l1[head_idx] && !l2[head_idx]);
        let clf = model.classifier.as_ref().unwrap();
        assert!(!l1[clf.head_w.0] && l2[clf.head_w.0]);
    }
}
