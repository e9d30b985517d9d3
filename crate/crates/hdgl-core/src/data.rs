//! Subject ingestion: ROI time series, phenotype tables, stratified folds and
//! the synthetic cohort generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Per-subject matrix of region signals: one row per ROI, one column per
/// timepoint.
#[derive(Debug, Clone)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub values: Array2<f64>,
}

impl RoiTimeSeries {
    pub fn new(subject_id: impl Into<String>, values: Array2<f64>) -> Self {
        RoiTimeSeries {
            subject_id: subject_id.into(),
            values,
        }
    }

    pub fn n_rois(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_timepoints(&self) -> usize {
        self.values.dim().1
    }
}

/// Load one time-series file: comma-separated, one ROI per row, one column per
/// timepoint, no header. The subject id is the file stem.
pub fn load_roi_timeseries(path: &Path) -> Result<RoiTimeSeries> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_idx, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: display.clone(),
                row: row_idx,
                col: col_idx,
                detail: format!("non-numeric cell {:?}", cell.trim()),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Format {
                    path: display,
                    detail: format!(
                        "row {} has {} columns, expected {}",
                        row_idx,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: display,
            detail: "no rows".into(),
        });
    }
    let n = rows.len();
    let t = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, t), flat).expect("row-major rebuild");
    let subject_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    Ok(RoiTimeSeries::new(subject_id, values))
}

/// Standardize each ROI row to zero mean and unit variance (population
/// standard deviation). Zero-variance rows become all zeros: constant signals
/// show up in masked regions and must not poison a batch.
pub fn normalize_timeseries(ts: &RoiTimeSeries) -> Result<RoiTimeSeries> {
    if ts.n_timepoints() < 2 {
        return Err(Error::InvalidInput(format!(
            "normalization needs at least 2 timepoints, got {}",
            ts.n_timepoints()
        )));
    }
    let mut values = ts.values.clone();
    for mut row in values.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        if var == 0.0 {
            row.fill(0.0);
        } else {
            let std = var.sqrt();
            row.mapv_inplace(|x| (x - mean) / std);
        }
    }
    Ok(RoiTimeSeries::new(ts.subject_id.clone(), values))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhenotypeRecord {
    pub subject_id: String,
    pub label: u8,
    pub sex: String,
    pub site: String,
    pub age: f64,
}

/// Load a phenotype table: header `subject_id,label,sex,site,age`, label in
/// {0,1}, age decimal. Categorical fields are kept verbatim.
pub fn load_phenotypes(path: &Path) -> Result<Vec<PhenotypeRecord>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        path: display.clone(),
        detail: "no rows".into(),
    })?;
    let expected = ["subject_id", "label", "sex", "site", "age"];
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for name in expected {
        if !cols.contains(&name) {
            return Err(Error::Schema(format!(
                "{display}: missing required column {name:?}"
            )));
        }
    }
    let col_of = |name: &str| cols.iter().position(|c| *c == name).unwrap();
    let (id_c, label_c, sex_c, site_c, age_c) = (
        col_of("subject_id"),
        col_of("label"),
        col_of("sex"),
        col_of("site"),
        col_of("age"),
    );

    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::new();
    for (row_idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::Format {
                path: display.clone(),
                detail: format!(
                    "row {} has {} columns, expected {}",
                    row_idx,
                    cells.len(),
                    cols.len()
                ),
            });
        }
        let parse_err = |col: usize, what: &str| Error::Parse {
            path: display.clone(),
            row: row_idx,
            col,
            detail: what.to_string(),
        };
        let label: u8 = cells[label_c]
            .parse()
            .map_err(|_| parse_err(label_c, "label must be 0 or 1"))?;
        if label > 1 {
            return Err(parse_err(label_c, "label must be 0 or 1"));
        }
        let age: f64 = cells[age_c]
            .parse()
            .map_err(|_| parse_err(age_c, "age must be a decimal"))?;
        let subject_id = cells[id_c].to_string();
        if !seen.insert(subject_id.clone()) {
            return Err(Error::DuplicateSubject(subject_id));
        }
        records.push(PhenotypeRecord {
            subject_id,
            label,
            sex: cells[sex_c].to_string(),
            site: cells[site_c].to_string(),
            age,
        });
    }
    Ok(records)
}

/// Manifest mapping subject id to its time-series path, one `id,path` pair per
/// line. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let display = path.display().to_string();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (row_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, p) = line.split_once(',').ok_or_else(|| Error::Format {
            path: display.clone(),
            detail: format!("row {row_idx}: expected `subject_id,path`"),
        })?;
        let raw = PathBuf::from(p.trim());
        let resolved = if raw.is_absolute() { raw } else { base.join(raw) };
        out.push((id.trim().to_string(), resolved));
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: display,
            detail: "no rows".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    /// Subject ids in fold `fold`, in the order of `ids`.
    pub fn members<'a>(&self, ids: &'a [String], fold: usize) -> Vec<&'a String> {
        ids.iter().filter(|id| self.fold_of(id) == Some(fold)).collect()
    }
}

/// Stratified k-fold assignment. Within each class, members are shuffled and
/// dealt round-robin; the dealing pointer carries over between classes so fold
/// totals stay balanced as well.
pub fn stratified_kfold(subjects: &[(String, u8)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be >= 2, got {k}")));
    }
    if subjects.len() < k {
        return Err(Error::Stratification(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in subjects.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next_fold = 0usize;
    for members in by_class.values() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for idx in order {
            assignments.insert(subjects[idx].0.clone(), next_fold);
            next_fold = (next_fold + 1) % k;
        }
    }
    Ok(FoldAssignment {
        fold_count: k,
        assignments,
    })
}

/// Layout of the planted structure in a synthetic cohort.
///
/// Two disjoint ROI blocks carry latent-factor coupling: a control block whose
/// coupling is the same in both classes, and a discriminative block whose
/// coupling differs between classes by `class_gap` (in Pearson units).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayout {
    pub control_block: std::ops::Range<usize>,
    pub discriminative_block: std::ops::Range<usize>,
}

pub fn synthetic_layout(n_rois: usize) -> SyntheticLayout {
    let b = (n_rois / 4).max(2);
    SyntheticLayout {
        control_block: 0..b,
        discriminative_block: b..2 * b,
    }
}

const CONTROL_COUPLING: f64 = 0.35;
const BASE_COUPLING: f64 = 0.05;

/// Generate a reproducible synthetic cohort with a planted block-correlation
/// class signal. Identical `(arguments, seed)` produce bit-identical output.
///
/// Subject `i` belongs to class `i % 2`, so classes are exactly balanced.
/// Within the discriminative block, the expected pairwise Pearson correlation
/// is `BASE_COUPLING` for class 0 and `BASE_COUPLING + 0.8*class_gap` (capped)
/// for class 1; the control block sits at `CONTROL_COUPLING` in both classes.
pub fn generate_synthetic_cohort(
    n_subjects: usize,
    n_rois: usize,
    n_timepoints: usize,
    class_gap: f64,
    seed: u64,
) -> Result<(Vec<RoiTimeSeries>, Vec<PhenotypeRecord>)> {
    if n_subjects == 0 || n_subjects % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "n_subjects must be even and positive, got {n_subjects}"
        )));
    }
    if !(class_gap >= 0.0) {
        return Err(Error::InvalidInput("class_gap must be >= 0".into()));
    }
    if n_rois < 4 {
        return Err(Error::InvalidInput("need at least 4 ROIs".into()));
    }
    if n_timepoints < 2 {
        return Err(Error::InvalidInput("need at least 2 timepoints".into()));
    }

    let layout = synthetic_layout(n_rois);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let draw = |rng: &mut ChaCha8Rng| -> f64 { normal.sample(rng) };

    let sites = ["SITE_A", "SITE_B", "SITE_C"];
    let mut series = Vec::with_capacity(n_subjects);
    let mut phenotypes = Vec::with_capacity(n_subjects);

    for i in 0..n_subjects {
        let class = (i % 2) as u8;
        let disc_coupling = if class == 1 {
            (BASE_COUPLING + 0.8 * class_gap).min(0.95)
        } else {
            BASE_COUPLING
        };

        let factor_control: Vec<f64> = (0..n_timepoints).map(|_| draw(&mut rng)).collect();
        let factor_disc: Vec<f64> = (0..n_timepoints).map(|_| draw(&mut rng)).collect();

        let mut values = Array2::zeros((n_rois, n_timepoints));
        for r in 0..n_rois {
            let coupling = if layout.control_block.contains(&r) {
                CONTROL_COUPLING
            } else if layout.discriminative_block.contains(&r) {
                disc_coupling
            } else {
                0.0
            };
            let factor = if layout.control_block.contains(&r) {
                &factor_control
            } else {
                &factor_disc
            };
            let w = coupling.sqrt();
            let noise_w = (1.0 - coupling).sqrt();
            for t in 0..n_timepoints {
                values[[r, t]] = noise_w * draw(&mut rng) + w * factor[t];
            }
        }

        let subject_id = format!("s{i:04}");
        let sex = if rng.random_range(0..2) == 0 { "M" } else { "F" };
        let site = sites[rng.random_range(0..sites.len())];
        let age = rng.random_range(80..300) as f64 / 10.0;
        series.push(RoiTimeSeries::new(subject_id.clone(), values));
        phenotypes.push(PhenotypeRecord {
            subject_id,
            label: class,
            sex: sex.to_string(),
            site: site.to_string(),
            age,
        });
    }
    Ok((series, phenotypes))
}

/// Per-fold class counts, mostly useful in tests and diagnostics.
pub fn fold_class_counts(
    folds: &FoldAssignment,
    subjects: &[(String, u8)],
) -> Vec<BTreeMap<u8, usize>> {
    let mut counts = vec![BTreeMap::new(); folds.fold_count];
    for (id, label) in subjects {
        if let Some(f) = folds.fold_of(id) {
            *counts[f].entry(*label).or_insert(0) += 1;
        }
    }
    counts
}

/// Mean of each row, computed with a second pass for the deviations. Exists so
/// tests can cross-check normalization with an independent accumulation.
pub fn row_mean_std(values: &Array2<f64>) -> Vec<(f64, f64)> {
    values
        .axis_iter(Axis(0))
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}
