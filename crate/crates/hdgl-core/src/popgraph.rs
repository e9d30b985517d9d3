//! Population graph over subjects: edge weights fuse phenotype agreement with
//! a Gaussian kernel over embedding correlation distance.

use ndarray::Array2;

use crate::data::PhenotypeRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PhenoFeature {
    Sex,
    Site,
    Age,
}

pub fn parse_pheno_features(names: &[String]) -> Result<Vec<PhenoFeature>> {
    names
        .iter()
        .map(|n| match n.trim().to_ascii_lowercase().as_str() {
            "sex" => Ok(PhenoFeature::Sex),
            "site" => Ok(PhenoFeature::Site),
            "age" => Ok(PhenoFeature::Age),
            other => Err(Error::Config(format!("unknown phenotype feature {other:?}"))),
        })
        .collect()
}

/// Count of agreeing phenotype features: categorical equality for sex/site,
/// banded absolute difference for age.
pub fn phenotype_similarity(
    a: &PhenotypeRecord,
    b: &PhenotypeRecord,
    features: &[PhenoFeature],
    age_band: f64,
) -> f64 {
    features
        .iter()
        .map(|f| match f {
            PhenoFeature::Sex => (a.sex == b.sex) as u32 as f64,
            PhenoFeature::Site => (a.site == b.site) as u32 as f64,
            PhenoFeature::Age => ((a.age - b.age).abs() <= age_band) as u32 as f64,
        })
        .sum()
}

/// Correlation distance `1 − pearson(u, v)` between two vectors. A vector with
/// zero variance has no correlation evidence; its pearson is taken as 0, so
/// the distance is 1.
pub fn correlation_distance(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "correlation distance of unequal lengths");
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let mut su = 0.0;
    let mut sv = 0.0;
    let mut cov = 0.0;
    for (x, y) in u.iter().zip(v) {
        let du = x - mu;
        let dv = y - mv;
        su += du * du;
        sv += dv * dv;
        cov += du * dv;
    }
    if su == 0.0 || sv == 0.0 {
        return 1.0;
    }
    let rho = 1.0 - cov / (su.sqrt() * sv.sqrt());
    // Perfectly correlated pairs land within float noise of zero; snap them.
    if rho.abs() < 1e-12 {
        0.0
    } else {
        rho
    }
}

/// Mean of the squared pairwise distances, which scales the similarity kernel.
pub fn sigma_from_sq_distances(sq_distances: &[f64]) -> Result<f64> {
    if sq_distances.is_empty() {
        return Err(Error::InvalidInput("no pairwise distances".into()));
    }
    let sigma = sq_distances.iter().sum::<f64>() / sq_distances.len() as f64;
    if sigma == 0.0 {
        return Err(Error::DegenerateSigma);
    }
    Ok(sigma)
}

/// `σ` from all unordered embedding pairs: the mean of `ρ(h_v, h_w)²`.
pub fn sigma_from_embeddings(embeddings: &Array2<f64>) -> Result<f64> {
    let m = embeddings.dim().0;
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "sigma needs at least 2 embeddings, got {m}"
        )));
    }
    let rows: Vec<Vec<f64>> = embeddings.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut sq = Vec::with_capacity(m * (m - 1) / 2);
    for v in 0..m {
        for w in v + 1..m {
            let rho = correlation_distance(&rows[v], &rows[w]);
            sq.push(rho * rho);
        }
    }
    sigma_from_sq_distances(&sq)
}

/// Imaging similarity `exp(−ρ² / (2σ²))`.
pub fn embedding_similarity(rho: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok((-(rho * rho) / (2.0 * sigma * sigma)).exp())
}

/// Weighted graph over subjects with train/test masks attached.
#[derive(Debug, Clone)]
pub struct PopulationGraph {
    pub node_ids: Vec<String>,
    /// Detached embedding values, one row per subject.
    pub features: Array2<f64>,
    pub edge_weights: Array2<f64>,
    /// Upper-triangle pairs with weight > 0.
    pub edge_list: Vec<(usize, usize, f64)>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub neighbors: Vec<Vec<usize>>,
}

impl PopulationGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }
}

pub struct PopulationGraphSpec<'a> {
    pub node_ids: Vec<String>,
    pub embeddings: Array2<f64>,
    pub phenotypes: &'a [PhenotypeRecord],
    pub features: &'a [PhenoFeature],
    pub age_band: f64,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    /// Kernel scale; computed from the embeddings when absent.
    pub sigma: Option<f64>,
}

/// Assemble the graph: `S(v,w) = S_I(v,w) · S_NI(v,w)` for every unordered
/// pair, with edges wherever the product is positive.
pub fn build_population_graph(spec: PopulationGraphSpec) -> Result<PopulationGraph> {
    let m = spec.node_ids.len();
    if spec.embeddings.dim().0 != m || spec.phenotypes.len() != m {
        return Err(Error::Shape(format!(
            "{m} nodes but {} embeddings and {} phenotype records",
            spec.embeddings.dim().0,
            spec.phenotypes.len()
        )));
    }
    if spec.train_mask.len() != m || spec.test_mask.len() != m {
        return Err(Error::Shape("mask length mismatch".into()));
    }
    if spec
        .train_mask
        .iter()
        .zip(&spec.test_mask)
        .any(|(a, b)| *a && *b)
    {
        return Err(Error::InvalidMask("train and test masks overlap".into()));
    }

    let sigma = match spec.sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive, got {s}"
            )))
        }
        None => sigma_from_embeddings(&spec.embeddings)?,
    };

    let rows: Vec<Vec<f64>> = spec.embeddings.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut weights = Array2::zeros((m, m));
    let mut edge_list = Vec::new();
    for v in 0..m {
        for w in v + 1..m {
            let s_ni = phenotype_similarity(
                &spec.phenotypes[v],
                &spec.phenotypes[w],
                spec.features,
                spec.age_band,
            );
            if s_ni == 0.0 {
                continue;
            }
            let rho = correlation_distance(&rows[v], &rows[w]);
            let s_i = embedding_similarity(rho, sigma)?;
            let s = s_i * s_ni;
            if s > 0.0 {
                weights[[v, w]] = s;
                weights[[w, v]] = s;
                edge_list.push((v, w, s));
            }
        }
    }
    let neighbors = (0..m)
        .map(|i| (0..m).filter(|&j| weights[[i, j]] > 0.0).collect())
        .collect();
    Ok(PopulationGraph {
        node_ids: spec.node_ids,
        features: spec.embeddings,
        edge_weights: weights,
        edge_list,
        train_mask: spec.train_mask,
        test_mask: spec.test_mask,
        neighbors,
    })
}

/// Edge-list dump: `id_v,id_w,weight` per line.
pub fn edge_list_to_text(graph: &PopulationGraph) -> String {
    let mut out = String::new();
    for &(v, w, weight) in &graph.edge_list {
        out.push_str(&format!(
            "{},{},{}\n",
            graph.node_ids[v], graph.node_ids[w], weight
        ));
    }
    out
}
