//! The four training loops plus the shared evaluation pass.

use hdgl_autodiff::{Matrix, Session};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::classify;
use crate::data::FoldAssignment;
use crate::encoder::{Dropout, PoolTrace};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricReport};
use crate::popgraph::{
    build_population_graph, parse_pheno_features, sigma_from_embeddings, PhenoFeature,
    PopulationGraph, PopulationGraphSpec,
};
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::masked_cross_entropy;
use crate::training::model::{encode_subjects, level1_logits, CohortData, HdglModel};
use crate::training::optimizer::Adam;
use crate::training::schedule::one_cycle_lr;
use crate::training::{derive_seed, Regime, TrainConfig};

/// Instrumentation gathered while a fold trains: regime-contract witnesses
/// used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct RegimeStats {
    /// Level-1 encoder invocations per optimizer step (training passes only).
    pub encoder_forwards_per_step: Vec<usize>,
    /// Cache fill after each iteration of the first trans-scl epoch.
    pub populated_counts_epoch1: Vec<usize>,
    /// Node ids of every population graph a training step used.
    pub training_graph_members: Vec<Vec<String>>,
    /// Largest per-node loss term observed on a test-mask node.
    pub max_test_loss_term: f64,
    /// Bitwise level-1 freeze check for trans-sep.
    pub level1_frozen: Option<bool>,
    pub warnings: Vec<String>,
    pub epochs_run: usize,
}

fn note_test_terms(stats: &mut RegimeStats, test_mask: &[bool], per_node: &[f64]) {
    for (i, &term) in per_node.iter().enumerate() {
        if test_mask[i] {
            stats.max_test_loss_term = stats.max_test_loss_term.max(term.abs());
        }
    }
}

/// Everything a finished fold hands back.
pub struct FoldRun {
    pub fold: usize,
    pub train_report: MetricReport,
    pub test_report: MetricReport,
    /// Metrics log: `epoch,split,loss,acc,f1,auc` lines.
    pub log: String,
    pub checkpoint: Checkpoint,
    pub test_ids: Vec<String>,
    pub test_traces: Vec<PoolTrace>,
    /// Final eval-mode embeddings for every subject, cohort order.
    pub embeddings: Array2<f64>,
    pub stats: RegimeStats,
}

struct Ctx<'a> {
    cohort: &'a CohortData,
    cfg: &'a TrainConfig,
    pheno: Vec<PhenoFeature>,
    labels: Vec<u8>,
    train_mask: Vec<bool>,
    test_mask: Vec<bool>,
    model: HdglModel,
    rng: ChaCha8Rng,
    rng_seed: u64,
    stats: RegimeStats,
    log: String,
}

impl Ctx<'_> {
    fn m(&self) -> usize {
        self.cohort.subjects.len()
    }
}

fn sigma_or_fallback(embeddings: &Array2<f64>, warnings: &mut Vec<String>) -> f64 {
    match sigma_from_embeddings(embeddings) {
        Ok(s) => s,
        Err(_) => {
            warnings.push("degenerate sigma, falling back to 1.0".into());
            1.0
        }
    }
}

fn graph_over(
    cohort: &CohortData,
    pheno: &[PhenoFeature],
    age_band: f64,
    indices: &[usize],
    embeddings: Array2<f64>,
    train_mask: Vec<bool>,
    test_mask: Vec<bool>,
    sigma: f64,
) -> Result<PopulationGraph> {
    let node_ids = indices
        .iter()
        .map(|&i| cohort.subjects[i].id.clone())
        .collect();
    let phenotypes: Vec<_> = indices
        .iter()
        .map(|&i| cohort.subjects[i].phenotype.clone())
        .collect();
    build_population_graph(PopulationGraphSpec {
        node_ids,
        embeddings,
        phenotypes: &phenotypes,
        features: pheno,
        age_band,
        train_mask,
        test_mask,
        sigma: Some(sigma),
    })
}

fn embeddings_to_matrix(sess: &Session, vars: &[hdgl_autodiff::Var]) -> Array2<f64> {
    let h = sess.tape.value(vars[0]).dim().1;
    let mut out = Array2::zeros((vars.len(), h));
    for (i, &v) in vars.iter().enumerate() {
        out.row_mut(i).assign(&sess.tape.value(v).row(0));
    }
    out
}

struct EvalOutcome {
    logits: Vec<(f64, f64)>,
    embeddings: Array2<f64>,
    traces: Vec<PoolTrace>,
}

/// Dropout-free forward over the whole cohort under the regime's graph
/// semantics: one transductive graph for the trans regimes, separate
/// train-only/test-only graphs for the inductive one, plain level-1 head
/// logits when the population level is disabled.
fn eval_pass(ctx: &mut Ctx) -> Result<EvalOutcome> {
    let m = ctx.m();
    let all: Vec<usize> = (0..m).collect();
    let mut sess = Session::new(&ctx.model.store);
    let mut scratch = 0;
    let encoded = encode_subjects(
        &mut sess,
        &ctx.model,
        ctx.cohort,
        &all,
        ctx.cfg.feature_mode,
        &mut None,
        &mut scratch,
    )?;
    let embeddings = embeddings_to_matrix(&sess, &encoded.embeddings);
    let mut warnings = Vec::new();

    let logits = if !ctx.cfg.use_population {
        let logits_var = level1_logits(&mut sess, &ctx.model, &encoded.embeddings);
        let v = sess.tape.value(logits_var);
        (0..m).map(|i| (v[[i, 0]], v[[i, 1]])).collect()
    } else if ctx.cfg.regime == Regime::Induc {
        // Inductive evaluation never mixes the splits in one graph.
        let features = sess.tape.concat_rows(&encoded.embeddings);
        let mut merged = vec![(0.0, 0.0); m];
        for split_test in [false, true] {
            let members: Vec<usize> = (0..m)
                .filter(|&i| ctx.test_mask[i] == split_test)
                .collect();
            if members.is_empty() {
                continue;
            }
            let sub = sess.tape.gather_rows(features, members.clone());
            let sub_embeddings = embeddings.select(ndarray::Axis(0), &members);
            let sigma = sigma_or_fallback(&sub_embeddings, &mut warnings);
            let graph = graph_over(
                ctx.cohort,
                &ctx.pheno,
                ctx.cfg.age_band,
                &members,
                sub_embeddings,
                vec![true; members.len()],
                vec![false; members.len()],
                sigma,
            )?;
            let clf = ctx.model.classifier.as_ref().expect("population classifier");
            let logits = classify(&mut sess, sub, &graph, clf)?;
            let v = sess.tape.value(logits);
            for (row, &subject) in members.iter().enumerate() {
                merged[subject] = (v[[row, 0]], v[[row, 1]]);
            }
        }
        merged
    } else {
        let features = sess.tape.concat_rows(&encoded.embeddings);
        let sigma = sigma_or_fallback(&embeddings, &mut warnings);
        let graph = graph_over(
            ctx.cohort,
            &ctx.pheno,
            ctx.cfg.age_band,
            &all,
            embeddings.clone(),
            ctx.train_mask.clone(),
            ctx.test_mask.clone(),
            sigma,
        )?;
        let clf = ctx.model.classifier.as_ref().expect("population classifier");
        let logits_var = classify(&mut sess, features, &graph, clf)?;
        let v = sess.tape.value(logits_var);
        (0..m).map(|i| (v[[i, 0]], v[[i, 1]])).collect()
    };

    drop(sess);
    ctx.stats.warnings.extend(warnings);
    Ok(EvalOutcome {
        logits,
        embeddings,
        traces: encoded.traces,
    })
}

fn positive_probability(logits: (f64, f64)) -> f64 {
    let (a, b) = logits;
    let max = a.max(b);
    let ea = (a - max).exp();
    let eb = (b - max).exp();
    eb / (ea + eb)
}

fn split_metrics(
    logits: &[(f64, f64)],
    labels: &[u8],
    mask: &[bool],
) -> Result<(f64, MetricReport)> {
    let mut probs = Vec::new();
    let mut split_labels = Vec::new();
    let mut loss = 0.0;
    for i in 0..labels.len() {
        if !mask[i] {
            continue;
        }
        let p = positive_probability(logits[i]);
        let p_true = if labels[i] == 1 { p } else { 1.0 - p };
        loss -= p_true.max(1e-300).ln();
        probs.push(p);
        split_labels.push(labels[i]);
    }
    if probs.is_empty() {
        return Err(Error::InvalidMask("empty evaluation split".into()));
    }
    loss /= probs.len() as f64;
    Ok((loss, compute_metrics(&probs, &split_labels)?))
}

fn log_line(log: &mut String, epoch: usize, split: &str, loss: f64, report: &MetricReport) {
    let auc = report
        .auc
        .map(|a| format!("{a:.6}"))
        .unwrap_or_else(|| "na".into());
    log.push_str(&format!(
        "{epoch},{split},{loss:.6},{:.6},{:.6},{auc}\n",
        report.accuracy, report.f1
    ));
}

fn log_eval(ctx: &mut Ctx, epoch: usize, prefix: &str) -> Result<f64> {
    let eval = eval_pass(ctx)?;
    let (train_loss, train_report) = split_metrics(&eval.logits, &ctx.labels, &ctx.train_mask)?;
    let (test_loss, test_report) = split_metrics(&eval.logits, &ctx.labels, &ctx.test_mask)?;
    log_line(
        &mut ctx.log,
        epoch,
        &format!("{prefix}train"),
        train_loss,
        &train_report,
    );
    log_line(
        &mut ctx.log,
        epoch,
        &format!("{prefix}test"),
        test_loss,
        &test_report,
    );
    Ok(train_loss)
}

/// Early-stopping tracker over the training-split loss.
struct EarlyStop {
    best: f64,
    since_best: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            since_best: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }
}

/// One training forward/backward pass shared by the loops: encode `indices`,
/// produce logits via `finish`, apply the masked loss, and hand back the
/// parameter gradients with the per-node loss terms.
struct StepOutcome {
    grads: Vec<Option<Matrix>>,
    per_node: Vec<f64>,
    forwards: usize,
    loss: f64,
}

fn train_step<F>(
    model: &HdglModel,
    cohort: &CohortData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    indices: &[usize],
    labels: &[u8],
    loss_mask: &[bool],
    finish: F,
) -> Result<StepOutcome>
where
    F: FnOnce(&mut Session, &[hdgl_autodiff::Var], &Array2<f64>) -> Result<hdgl_autodiff::Var>,
{
    let mut sess = Session::new(&model.store);
    let mut forwards = 0;
    let encoded = {
        let mut dropout = if cfg.dropout > 0.0 {
            Some(Dropout {
                rate: cfg.dropout,
                rng,
            })
        } else {
            None
        };
        encode_subjects(
            &mut sess,
            model,
            cohort,
            indices,
            cfg.feature_mode,
            &mut dropout,
            &mut forwards,
        )?
    };
    let embeddings = embeddings_to_matrix(&sess, &encoded.embeddings);
    let logits = finish(&mut sess, &encoded.embeddings, &embeddings)?;
    let masked = masked_cross_entropy(&mut sess, logits, labels, loss_mask)?;
    let loss = sess.tape.scalar(masked.loss);
    let grads = sess.backward(masked.loss);
    Ok(StepOutcome {
        grads: sess.param_grads(&grads),
        per_node: masked.per_node,
        forwards,
        loss,
    })
}

/// Level-1 with its linear head, trained supervised on the training subjects.
/// This is trans-sep's phase 1 and the whole model for the ablation arms
/// without a population level.
fn train_level1(ctx: &mut Ctx, log_prefix: &str) -> Result<()> {
    let train_indices: Vec<usize> = (0..ctx.m()).filter(|&i| ctx.train_mask[i]).collect();
    let train_labels: Vec<u8> = train_indices.iter().map(|&i| ctx.labels[i]).collect();
    let total_steps = ctx.cfg.epochs;
    let mut adam = Adam::new(&ctx.model.store);
    let allowed = ctx.model.level1_mask();
    let mut stop = EarlyStop::new(ctx.cfg.early_stop_patience);

    for epoch in 0..ctx.cfg.epochs {
        let lr = one_cycle_lr(
            epoch,
            total_steps,
            ctx.cfg.lr_initial,
            ctx.cfg.lr_max,
            ctx.cfg.warmup_fraction,
        )?;
        let model = &ctx.model;
        let out = train_step(
            model,
            ctx.cohort,
            ctx.cfg,
            &mut ctx.rng,
            &train_indices,
            &train_labels,
            &vec![true; train_labels.len()],
            |sess, embeddings, _| Ok(level1_logits(sess, model, embeddings)),
        )?;
        adam.step(&mut ctx.model.store, &out.grads, lr, Some(&allowed));
        ctx.stats.encoder_forwards_per_step.push(out.forwards);
        ctx.stats.epochs_run += 1;

        let train_loss = log_eval(ctx, epoch, log_prefix)?;
        if stop.observe(train_loss) {
            break;
        }
    }
    Ok(())
}

fn train_trans_sep(ctx: &mut Ctx) -> Result<()> {
    train_level1(ctx, "level1_")?;
    let frozen_snapshot = ctx.model.level1_values();

    // Final-epoch embeddings become the fixed node features of level 2.
    let eval = eval_pass(ctx)?;
    let embeddings = eval.embeddings;
    let sigma = sigma_or_fallback(&embeddings, &mut ctx.stats.warnings);
    let all: Vec<usize> = (0..ctx.m()).collect();
    let graph = graph_over(
        ctx.cohort,
        &ctx.pheno,
        ctx.cfg.age_band,
        &all,
        embeddings.clone(),
        ctx.train_mask.clone(),
        ctx.test_mask.clone(),
        sigma,
    )?;

    let total_steps = ctx.cfg.epochs;
    let mut adam = Adam::new(&ctx.model.store);
    let allowed = ctx.model.classifier_mask();
    let mut stop = EarlyStop::new(ctx.cfg.early_stop_patience);
    for epoch in 0..ctx.cfg.epochs {
        let lr = one_cycle_lr(
            epoch,
            total_steps,
            ctx.cfg.lr_initial,
            ctx.cfg.lr_max,
            ctx.cfg.warmup_fraction,
        )?;
        let (grads, per_node, logit_values) = {
            let mut sess = Session::new(&ctx.model.store);
            let features = sess.constant(embeddings.clone());
            let clf = ctx.model.classifier.as_ref().expect("population classifier");
            let logits = classify(&mut sess, features, &graph, clf)?;
            let masked = masked_cross_entropy(&mut sess, logits, &ctx.labels, &ctx.train_mask)?;
            let grads = sess.backward(masked.loss);
            let lv = sess.tape.value(logits);
            let values: Vec<(f64, f64)> =
                (0..ctx.m()).map(|i| (lv[[i, 0]], lv[[i, 1]])).collect();
            (sess.param_grads(&grads), masked.per_node, values)
        };
        note_test_terms(&mut ctx.stats, &ctx.test_mask, &per_node);
        adam.step(&mut ctx.model.store, &grads, lr, Some(&allowed));
        ctx.stats.training_graph_members.push(graph.node_ids.clone());
        ctx.stats.epochs_run += 1;

        // Phase 2 never re-encodes; metrics come from the fixed graph.
        let (train_loss, train_report) =
            split_metrics(&logit_values, &ctx.labels, &ctx.train_mask)?;
        let (test_loss, test_report) = split_metrics(&logit_values, &ctx.labels, &ctx.test_mask)?;
        log_line(&mut ctx.log, epoch, "train", train_loss, &train_report);
        log_line(&mut ctx.log, epoch, "test", test_loss, &test_report);
        if stop.observe(train_loss) {
            break;
        }
    }

    ctx.stats.level1_frozen = Some(
        frozen_snapshot
            .iter()
            .zip(ctx.model.level1_values().iter())
            .all(|(a, b)| a == b),
    );
    Ok(())
}

fn train_trans_join(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.m();
    let all: Vec<usize> = (0..m).collect();
    let total_steps = ctx.cfg.epochs;
    let mut adam = Adam::new(&ctx.model.store);
    let mut stop = EarlyStop::new(ctx.cfg.early_stop_patience);

    for epoch in 0..ctx.cfg.epochs {
        let lr = one_cycle_lr(
            epoch,
            total_steps,
            ctx.cfg.lr_initial,
            ctx.cfg.lr_max,
            ctx.cfg.warmup_fraction,
        )?;
        let mut graph_ids: Vec<String> = Vec::new();
        let out = {
            let model = &ctx.model;
            let cohort = ctx.cohort;
            let pheno = &ctx.pheno;
            let cfg = ctx.cfg;
            let train_mask = ctx.train_mask.clone();
            let test_mask = ctx.test_mask.clone();
            let warnings = &mut ctx.stats.warnings;
            let graph_ids = &mut graph_ids;
            train_step(
                model,
                cohort,
                cfg,
                &mut ctx.rng,
                &all,
                &ctx.labels,
                &ctx.train_mask,
                |sess, embedding_vars, embeddings| {
                    // Edge weights are recomputed each epoch from the fresh
                    // embeddings but stay constants: gradients flow only
                    // through the node features.
                    let sigma = sigma_or_fallback(embeddings, warnings);
                    let graph = graph_over(
                        cohort,
                        pheno,
                        cfg.age_band,
                        &all,
                        embeddings.clone(),
                        train_mask,
                        test_mask,
                        sigma,
                    )?;
                    *graph_ids = graph.node_ids.clone();
                    let features = sess.tape.concat_rows(embedding_vars);
                    let clf = model.classifier.as_ref().expect("population classifier");
                    classify(sess, features, &graph, clf)
                },
            )?
        };
        note_test_terms(&mut ctx.stats, &ctx.test_mask, &out.per_node);
        adam.step(&mut ctx.model.store, &out.grads, lr, None);
        ctx.stats.encoder_forwards_per_step.push(out.forwards);
        ctx.stats.training_graph_members.push(graph_ids);
        ctx.stats.epochs_run += 1;

        let train_loss = log_eval(ctx, epoch, "")?;
        if stop.observe(train_loss) {
            break;
        }
    }
    Ok(())
}

/// Feature matrix kept across trans-scl iterations: encoded rows overwrite
/// their slot, everything else stays (zeros until first touched).
pub struct FeatureCache {
    pub values: Array2<f64>,
    pub populated: Vec<bool>,
}

impl FeatureCache {
    pub fn new(m: usize, width: usize) -> Self {
        FeatureCache {
            values: Array2::zeros((m, width)),
            populated: vec![false; m],
        }
    }

    pub fn populated_count(&self) -> usize {
        self.populated.iter().filter(|&&b| b).count()
    }

    fn populated_rows(&self) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.populated.len())
            .filter(|&i| self.populated[i])
            .collect();
        self.values.select(ndarray::Axis(0), &rows)
    }
}

fn train_trans_scl(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.m();
    let z = ctx.cfg.batch_size;
    if z > m {
        return Err(Error::Config(format!(
            "batch size {z} exceeds cohort size {m}"
        )));
    }
    let h = ctx.model.embedding_dim();
    let mut cache = FeatureCache::new(m, h);
    let steps_per_epoch = m.div_ceil(z);
    let total_steps = ctx.cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(&ctx.model.store);
    let mut stop = EarlyStop::new(ctx.cfg.early_stop_patience);
    let mut step = 0;

    for epoch in 0..ctx.cfg.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ctx.rng);
        // Sigma is fixed once per epoch, from whatever rows are populated when
        // first needed; rows persist across epochs so epoch 2 onward sees all.
        let mut sigma_epoch: Option<f64> = None;

        for batch in order.chunks(z) {
            let lr = one_cycle_lr(
                step,
                total_steps,
                ctx.cfg.lr_initial,
                ctx.cfg.lr_max,
                ctx.cfg.warmup_fraction,
            )?;
            let loss_mask: Vec<bool> = {
                let mut in_batch = vec![false; m];
                for &subject in batch {
                    in_batch[subject] = true;
                }
                (0..m).map(|i| in_batch[i] && ctx.train_mask[i]).collect()
            };
            if !loss_mask.iter().any(|&b| b) {
                ctx.stats
                    .warnings
                    .push(format!("batch at step {step} holds no training subjects"));
                step += 1;
                continue;
            }

            let (out, graph_ids) = {
                let model = &ctx.model;
                let cohort = ctx.cohort;
                let pheno = &ctx.pheno;
                let cfg = ctx.cfg;
                let cache = &mut cache;
                let sigma_epoch = &mut sigma_epoch;
                let train_mask = ctx.train_mask.clone();
                let test_mask = ctx.test_mask.clone();
                let warnings = &mut ctx.stats.warnings;
                let mut graph_ids: Vec<String> = Vec::new();
                let graph_ids_ref = &mut graph_ids;
                let out = train_step(
                    model,
                    cohort,
                    cfg,
                    &mut ctx.rng,
                    batch,
                    &ctx.labels,
                    &loss_mask,
                    |sess, embedding_vars, _| {
                        for (slot, &subject) in batch.iter().enumerate() {
                            cache
                                .values
                                .row_mut(subject)
                                .assign(&sess.tape.value(embedding_vars[slot]).row(0));
                            cache.populated[subject] = true;
                        }
                        let sigma = *sigma_epoch.get_or_insert_with(|| {
                            let rows = cache.populated_rows();
                            if rows.dim().0 < 2 {
                                warnings
                                    .push("fewer than 2 populated rows for sigma, using 1.0".into());
                                1.0
                            } else {
                                sigma_or_fallback(&rows, warnings)
                            }
                        });
                        // Gradient flows only through the freshly-encoded batch
                        // rows; every other node feature is the cached constant.
                        let mut row_vars = Vec::with_capacity(m);
                        for i in 0..m {
                            row_vars.push(sess.constant(
                                cache.values.row(i).to_owned().insert_axis(ndarray::Axis(0)),
                            ));
                        }
                        for (slot, &subject) in batch.iter().enumerate() {
                            row_vars[subject] = embedding_vars[slot];
                        }
                        let features = sess.tape.concat_rows(&row_vars);
                        let graph = graph_over(
                            cohort,
                            pheno,
                            cfg.age_band,
                            &(0..m).collect::<Vec<_>>(),
                            cache.values.clone(),
                            train_mask,
                            test_mask,
                            sigma,
                        )?;
                        *graph_ids_ref = graph.node_ids.clone();
                        let clf = model.classifier.as_ref().expect("population classifier");
                        classify(sess, features, &graph, clf)
                    },
                )?;
                (out, graph_ids)
            };
            note_test_terms(&mut ctx.stats, &ctx.test_mask, &out.per_node);
            adam.step(&mut ctx.model.store, &out.grads, lr, None);
            ctx.stats.encoder_forwards_per_step.push(out.forwards);
            ctx.stats.training_graph_members.push(graph_ids);
            step += 1;
            if epoch == 0 {
                ctx.stats
                    .populated_counts_epoch1
                    .push(cache.populated_count());
            }
        }
        ctx.stats.epochs_run += 1;

        let train_loss = log_eval(ctx, epoch, "")?;
        if stop.observe(train_loss) {
            break;
        }
    }
    Ok(())
}

fn train_induc(ctx: &mut Ctx) -> Result<()> {
    let train_indices: Vec<usize> = (0..ctx.m()).filter(|&i| ctx.train_mask[i]).collect();
    let z = ctx.cfg.batch_size.min(train_indices.len());
    let steps_per_epoch = train_indices.len().div_ceil(z);
    let total_steps = ctx.cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(&ctx.model.store);
    let mut stop = EarlyStop::new(ctx.cfg.early_stop_patience);
    let mut step = 0;

    for epoch in 0..ctx.cfg.epochs {
        let mut order = train_indices.clone();
        order.shuffle(&mut ctx.rng);
        for batch in order.chunks(z) {
            let lr = one_cycle_lr(
                step,
                total_steps,
                ctx.cfg.lr_initial,
                ctx.cfg.lr_max,
                ctx.cfg.warmup_fraction,
            )?;
            let batch_labels: Vec<u8> = batch.iter().map(|&i| ctx.labels[i]).collect();
            if batch_labels.windows(2).all(|w| w[0] == w[1]) {
                ctx.stats.warnings.push(format!(
                    "single-class training batch at step {step} (class {})",
                    batch_labels[0]
                ));
            }
            let (out, graph_ids) = {
                let model = &ctx.model;
                let cohort = ctx.cohort;
                let pheno = &ctx.pheno;
                let cfg = ctx.cfg;
                let warnings = &mut ctx.stats.warnings;
                let mut graph_ids: Vec<String> = Vec::new();
                let graph_ids_ref = &mut graph_ids;
                let out = train_step(
                    model,
                    cohort,
                    cfg,
                    &mut ctx.rng,
                    batch,
                    &batch_labels,
                    &vec![true; batch.len()],
                    |sess, embedding_vars, embeddings| {
                        let sigma = sigma_or_fallback(embeddings, warnings);
                        // The population graph holds only this batch's members.
                        let graph = graph_over(
                            cohort,
                            pheno,
                            cfg.age_band,
                            batch,
                            embeddings.clone(),
                            vec![true; batch.len()],
                            vec![false; batch.len()],
                            sigma,
                        )?;
                        *graph_ids_ref = graph.node_ids.clone();
                        let features = sess.tape.concat_rows(embedding_vars);
                        let clf = model.classifier.as_ref().expect("population classifier");
                        classify(sess, features, &graph, clf)
                    },
                )?;
                (out, graph_ids)
            };
            adam.step(&mut ctx.model.store, &out.grads, lr, None);
            ctx.stats.encoder_forwards_per_step.push(out.forwards);
            ctx.stats.training_graph_members.push(graph_ids);
            step += 1;
        }
        ctx.stats.epochs_run += 1;

        let train_loss = log_eval(ctx, epoch, "")?;
        if stop.observe(train_loss) {
            break;
        }
    }
    Ok(())
}

/// Train one fold and evaluate its final model.
pub fn train_fold(
    cohort: &CohortData,
    assignment: &FoldAssignment,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<FoldRun> {
    cfg.validate()?;
    let m = cohort.subjects.len();
    let mut train_mask = vec![false; m];
    let mut test_mask = vec![false; m];
    for (i, subject) in cohort.subjects.iter().enumerate() {
        match assignment.fold_of(&subject.id) {
            Some(f) if f == fold => test_mask[i] = true,
            Some(_) => train_mask[i] = true,
            None => {
                return Err(Error::InvalidInput(format!(
                    "subject {} has no fold assignment",
                    subject.id
                )))
            }
        }
    }
    if !test_mask.iter().any(|&b| b) || !train_mask.iter().any(|&b| b) {
        return Err(Error::Stratification(format!(
            "fold {fold} leaves a split empty"
        )));
    }

    let fold_seed = derive_seed(cfg.seed, 0xA000 + fold as u64);
    let model = HdglModel::build(cfg, cohort.n_rois, derive_seed(fold_seed, 1))?;
    let rng_seed = derive_seed(fold_seed, 2);
    let mut ctx = Ctx {
        cohort,
        cfg,
        pheno: parse_pheno_features(&cfg.pheno_features)?,
        labels: cohort.labels(),
        train_mask,
        test_mask,
        model,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        rng_seed,
        stats: RegimeStats::default(),
        log: String::from("epoch,split,loss,acc,f1,auc\n"),
    };

    if !cfg.use_population {
        train_level1(&mut ctx, "")?;
    } else {
        match cfg.regime {
            Regime::TransSep => train_trans_sep(&mut ctx)?,
            Regime::TransJoin => train_trans_join(&mut ctx)?,
            Regime::TransScl => train_trans_scl(&mut ctx)?,
            Regime::Induc => train_induc(&mut ctx)?,
        }
    }

    let eval = eval_pass(&mut ctx)?;
    let (_, train_report) = split_metrics(&eval.logits, &ctx.labels, &ctx.train_mask)?;
    let (_, test_report) = split_metrics(&eval.logits, &ctx.labels, &ctx.test_mask)?;

    let test_ids: Vec<String> = cohort
        .subjects
        .iter()
        .enumerate()
        .filter(|(i, _)| ctx.test_mask[*i])
        .map(|(_, s)| s.id.clone())
        .collect();
    let test_traces: Vec<PoolTrace> = eval
        .traces
        .iter()
        .enumerate()
        .filter(|(i, _)| ctx.test_mask[*i])
        .map(|(_, t)| t.clone())
        .collect();

    let checkpoint = Checkpoint::capture(
        cfg,
        cohort.n_rois,
        fold,
        cohort
            .subjects
            .iter()
            .enumerate()
            .filter(|(i, _)| ctx.train_mask[*i])
            .map(|(_, s)| s.id.clone())
            .collect(),
        test_ids.clone(),
        ctx.rng_seed,
        ctx.rng.get_word_pos(),
        &ctx.model.store,
    );

    Ok(FoldRun {
        fold,
        train_report,
        test_report,
        log: ctx.log,
        checkpoint,
        test_ids,
        test_traces,
        embeddings: eval.embeddings,
        stats: ctx.stats,
    })
}

/// Evaluate a trained model on a prepared cohort with explicit masks, under
/// the config's regime graph semantics. The train report is absent when the
/// train mask is empty (evaluating a pure held-out manifest).
pub fn evaluate_model(
    model: HdglModel,
    cohort: &CohortData,
    cfg: &TrainConfig,
    train_mask: Vec<bool>,
    test_mask: Vec<bool>,
) -> Result<(Option<MetricReport>, MetricReport, Array2<f64>, Vec<PoolTrace>)> {
    let mut ctx = Ctx {
        cohort,
        cfg,
        pheno: parse_pheno_features(&cfg.pheno_features)?,
        labels: cohort.labels(),
        train_mask,
        test_mask,
        model,
        rng: ChaCha8Rng::seed_from_u64(0),
        rng_seed: 0,
        stats: RegimeStats::default(),
        log: String::new(),
    };
    let eval = eval_pass(&mut ctx)?;
    let train_report = if ctx.train_mask.iter().any(|&b| b) {
        Some(split_metrics(&eval.logits, &ctx.labels, &ctx.train_mask)?.1)
    } else {
        None
    };
    let (_, test_report) = split_metrics(&eval.logits, &ctx.labels, &ctx.test_mask)?;
    Ok((train_report, test_report, eval.embeddings, eval.traces))
}
