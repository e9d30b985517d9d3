//! Dynamic functional connectivity: sliding-window Pearson correlation and
//! proportional thresholding into a sequence of binary adjacency matrices.

use ndarray::{s, Array2};

use crate::data::RoiTimeSeries;
use crate::error::{Error, Result};

/// Sliding-window geometry: window length and stride in timepoints.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Result<Self> {
        if length < 2 {
            return Err(Error::InvalidWindow(format!(
                "window length must be >= 2, got {length}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidWindow("stride must be >= 1".into()));
        }
        Ok(WindowSpec { length, stride })
    }
}

/// Number of window segments for a series of `tmax` timepoints:
/// `floor((tmax - length) / stride)`, or that plus one when `plus_one` is set.
///
/// The default drops the final fitting window; `plus_one` switches to the
/// conventional count. Call sites constructing graphs reject a result of 0.
pub fn num_windows(tmax: usize, spec: WindowSpec, plus_one: bool) -> Result<usize> {
    if spec.length > tmax {
        return Err(Error::InvalidWindow(format!(
            "window length {} exceeds series length {tmax}",
            spec.length
        )));
    }
    let base = (tmax - spec.length) / spec.stride;
    Ok(if plus_one { base + 1 } else { base })
}

/// One windowed slice of a subject's series and the timepoint where the
/// window ends.
#[derive(Debug, Clone)]
pub struct WindowSegment {
    pub data: Array2<f64>,
    pub endpoint: usize,
}

/// Cut the series into overlapping segments. Segment `j` covers columns
/// `[j*stride, j*stride + length)` and its endpoint is `j*stride + length`.
pub fn slice_windows(
    ts: &RoiTimeSeries,
    spec: WindowSpec,
    plus_one: bool,
) -> Result<Vec<WindowSegment>> {
    let tmax = ts.n_timepoints();
    let count = num_windows(tmax, spec, plus_one)?;
    if count == 0 {
        return Err(Error::TooShortSeries {
            tmax,
            length: spec.length,
            stride: spec.stride,
        });
    }
    let mut segments = Vec::with_capacity(count);
    for j in 0..count {
        let start = j * spec.stride;
        let end = start + spec.length;
        segments.push(WindowSegment {
            data: ts.values.slice(s![.., start..end]).to_owned(),
            endpoint: end,
        });
    }
    Ok(segments)
}

/// Pairwise Pearson correlation between the rows of a segment.
///
/// Rows are standardized, then the coefficient matrix is `Z Zᵀ / Γ`. Any pair
/// involving a zero-variance row gets coefficient 0, including that row's
/// diagonal entry; non-degenerate diagonal entries are exactly 1.
pub fn pearson_fc(segment: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, width) = segment.dim();
    if width < 2 {
        return Err(Error::InvalidInput(format!(
            "pearson needs at least 2 samples per row, got {width}"
        )));
    }
    let mut z = segment.clone();
    let mut degenerate = vec![false; n];
    for (r, mut row) in z.rows_mut().into_iter().enumerate() {
        let m = width as f64;
        let mean = row.sum() / m;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
        if var == 0.0 {
            degenerate[r] = true;
            row.fill(0.0);
        } else {
            let std = var.sqrt();
            row.mapv_inplace(|x| (x - mean) / std);
        }
    }
    let mut fc = z.dot(&z.t()) / width as f64;
    for r in 0..n {
        fc[[r, r]] = if degenerate[r] { 0.0 } else { 1.0 };
    }
    Ok(fc)
}

/// Keep the strongest fraction of off-diagonal entries as binary edges.
///
/// Upper-triangle entries are ranked by absolute coefficient, ties broken by
/// smaller `(row, col)`; the top `ceil(keep_fraction * N(N-1)/2)` become
/// symmetric edges. Exact-zero coefficients are never promoted: zero
/// correlation carries no connectivity evidence.
pub fn threshold_adjacency(fc: &Array2<f64>, keep_fraction: f64) -> Result<Array2<f64>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep_fraction must be in (0,1], got {keep_fraction}"
        )));
    }
    let n = fc.dim().0;
    if fc.dim().1 != n {
        return Err(Error::Shape(format!("FC matrix must be square, got {:?}", fc.dim())));
    }
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            entries.push((i, j, fc[[i, j]].abs()));
        }
    }
    let keep = ceil_fraction(keep_fraction, entries.len());
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut adj = Array2::zeros((n, n));
    for &(i, j, mag) in entries.iter().take(keep) {
        if mag == 0.0 {
            continue;
        }
        adj[[i, j]] = 1.0;
        adj[[j, i]] = 1.0;
    }
    Ok(adj)
}

/// `ceil(fraction * count)` with a guard against float drift on products that
/// should be integral (e.g. 0.8 * 10).
pub fn ceil_fraction(fraction: f64, count: usize) -> usize {
    let raw = fraction * count as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

/// Sequence of thresholded binary adjacency matrices for one subject with the
/// window endpoints they came from. Segments never share edges; the overall
/// adjacency is block-diagonal over time.
#[derive(Debug, Clone)]
pub struct DynamicBrainGraph {
    pub subject_id: String,
    pub adjacencies: Vec<Array2<f64>>,
    pub window_endpoints: Vec<usize>,
}

impl DynamicBrainGraph {
    pub fn n_segments(&self) -> usize {
        self.adjacencies.len()
    }

    pub fn n_rois(&self) -> usize {
        self.adjacencies.first().map(|a| a.dim().0).unwrap_or(0)
    }
}

/// Slice windows, correlate, threshold: the full per-subject construction.
pub fn build_dynamic_graph(
    ts: &RoiTimeSeries,
    spec: WindowSpec,
    keep_fraction: f64,
    plus_one: bool,
) -> Result<DynamicBrainGraph> {
    let segments = slice_windows(ts, spec, plus_one)?;
    let mut adjacencies = Vec::with_capacity(segments.len());
    let mut window_endpoints = Vec::with_capacity(segments.len());
    for seg in &segments {
        let fc = pearson_fc(&seg.data)?;
        adjacencies.push(threshold_adjacency(&fc, keep_fraction)?);
        window_endpoints.push(seg.endpoint);
    }
    Ok(DynamicBrainGraph {
        subject_id: ts.subject_id.clone(),
        adjacencies,
        window_endpoints,
    })
}

/// Render one adjacency matrix as text, one row per line, entries
/// comma-separated as integers.
pub fn adjacency_to_text(adj: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in adj.rows() {
        let line: Vec<String> = row.iter().map(|&x| format!("{}", x as i64)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_cohort;
    use crate::data::synthetic_layout;
    use ndarray::arr2;

    fn spec(length: usize, stride: usize) -> WindowSpec {
        WindowSpec::new(length, stride).unwrap()
    }

    #[test]
    fn window_count_matches_formula() {
        assert_eq!(num_windows(176, spec(20, 5), false).unwrap(), 31);
        assert_eq!(num_windows(20, spec(20, 5), false).unwrap(), 0);
        assert_eq!(num_windows(25, spec(20, 5), false).unwrap(), 1);
    }

    #[test]
    fn window_count_plus_one_mode() {
        assert_eq!(num_windows(20, spec(20, 5), true).unwrap(), 1);
        assert_eq!(num_windows(176, spec(20, 5), true).unwrap(), 32);
    }

    #[test]
    fn window_longer_than_series_is_invalid() {
        assert!(matches!(
            num_windows(19, spec(20, 5), false),
            Err(Error::InvalidWindow(_))
        ));
    }

    /// Brute-force enumeration of start offsets, minus the final fitting
    /// window that the count formula drops.
    fn enumerate_starts(tmax: usize, w: WindowSpec) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut j = 0;
        while j * w.stride + w.length <= tmax {
            starts.push(j * w.stride);
            j += 1;
        }
        starts
    }

    #[test]
    fn slices_match_bruteforce_enumeration() {
        let ts = RoiTimeSeries::new(
            "a",
            Array2::from_shape_fn((3, 30), |(r, c)| (r * 30 + c) as f64),
        );
        let w = spec(20, 5);
        let segments = slice_windows(&ts, w, false).unwrap();
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].endpoint, 20);
        assert_eq!(segments[1].endpoint, 25);
        let starts = enumerate_starts(30, w);
        // Literal count drops the last enumerated window.
        assert_eq!(segments.len(), starts.len() - 1);
        for (seg, &start) in segments.iter().zip(&starts) {
            assert_eq!(seg.data, ts.values.slice(s![.., start..start + 20]).to_owned());
        }
    }

    #[test]
    fn single_window_when_tmax_is_length_plus_stride() {
        let ts = RoiTimeSeries::new("a", Array2::zeros((2, 25)));
        let segments = slice_windows(&ts, spec(20, 5), false).unwrap();
        assert_eq!(segments.len(), 1);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let ts = RoiTimeSeries::new("a", Array2::zeros((2, 20)));
        assert!(matches!(
            slice_windows(&ts, spec(20, 5), false),
            Err(Error::TooShortSeries { .. })
        ));
    }

    #[test]
    fn pearson_of_identical_rows_is_one() {
        let seg = arr2(&[[1.0, 2.0, 5.0], [1.0, 2.0, 5.0]]);
        let fc = pearson_fc(&seg).unwrap();
        assert!((fc[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_of_negated_rows_is_minus_one() {
        let seg = arr2(&[[1.0, 2.0, 5.0], [-1.0, -2.0, -5.0]]);
        let fc = pearson_fc(&seg).unwrap();
        assert!((fc[[0, 1]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_textbook_value() {
        let seg = arr2(&[[1.0, 2.0, 3.0], [1.0, 2.0, 4.0]]);
        let fc = pearson_fc(&seg).unwrap();
        // Independently: cov/(sx*sy*n) = 3/sqrt(2*14/3)/3 = 0.98198...
        assert!((fc[[0, 1]] - 0.981_980_506_061_965_7).abs() < 1e-12);
    }

    /// Two-pass covariance oracle: explicit means, then explicit covariance
    /// and standard deviations.
    pub fn pearson_oracle(segment: &Array2<f64>) -> Array2<f64> {
        let (n, width) = segment.dim();
        let m = width as f64;
        let means: Vec<f64> = (0..n).map(|r| segment.row(r).sum() / m).collect();
        let stds: Vec<f64> = (0..n)
            .map(|r| {
                (segment
                    .row(r)
                    .iter()
                    .map(|x| (x - means[r]).powi(2))
                    .sum::<f64>()
                    / m)
                    .sqrt()
            })
            .collect();
        let mut fc = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if stds[i] == 0.0 || stds[j] == 0.0 {
                    fc[[i, j]] = 0.0;
                    continue;
                }
                let cov = segment
                    .row(i)
                    .iter()
                    .zip(segment.row(j).iter())
                    .map(|(a, b)| (a - means[i]) * (b - means[j]))
                    .sum::<f64>()
                    / m;
                fc[[i, j]] = cov / (stds[i] * stds[j]);
            }
        }
        fc
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(2..6);
            let width = rng.random_range(2..12);
            let seg = Array2::from_shape_fn((n, width), |_| rng.random_range(-3.0..3.0));
            let fc = pearson_fc(&seg).unwrap();
            let oracle = pearson_oracle(&seg);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    assert!(
                        (fc[[i, j]] - oracle[[i, j]]).abs() < 1e-10,
                        "entry ({i},{j}): {} vs {}",
                        fc[[i, j]],
                        oracle[[i, j]]
                    );
                    assert!(fc[[i, j]].abs() <= 1.0 + 1e-12);
                    assert!((fc[[i, j]] - fc[[j, i]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_variance_row_pairs_are_zero() {
        let seg = arr2(&[[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]]);
        let fc = pearson_fc(&seg).unwrap();
        assert_eq!(fc[[0, 0]], 0.0);
        assert_eq!(fc[[0, 1]], 0.0);
        assert_eq!(fc[[1, 1]], 1.0);
    }

    #[test]
    fn full_keep_fraction_gives_complete_graph() {
        let seg = arr2(&[[1.0, 2.0, 3.5], [2.0, 1.0, 4.0], [0.5, 3.0, 1.0]]);
        let fc = pearson_fc(&seg).unwrap();
        let adj = threshold_adjacency(&fc, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 1.0 };
                assert_eq!(adj[[i, j]], expect);
            }
        }
    }

    #[test]
    fn keeps_only_strongest_edge() {
        let fc = arr2(&[
            [1.0, 0.9, 0.5],
            [0.9, 1.0, -0.1],
            [0.5, -0.1, 1.0],
        ]);
        let adj = threshold_adjacency(&fc, 1.0 / 3.0).unwrap();
        assert_eq!(adj[[0, 1]], 1.0);
        assert_eq!(adj[[1, 0]], 1.0);
        assert_eq!(adj.sum(), 2.0);
    }

    #[test]
    fn zero_fc_yields_empty_graph() {
        let fc = Array2::zeros((4, 4));
        let adj = threshold_adjacency(&fc, 0.5).unwrap();
        assert_eq!(adj.sum(), 0.0);
    }

    #[test]
    fn edge_count_follows_ceiling_law() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let n = rng.random_range(3..10);
            let mut fc = Array2::zeros((n, n));
            for i in 0..n {
                for j in i + 1..n {
                    let v: f64 = rng.random_range(0.01..1.0);
                    fc[[i, j]] = v;
                    fc[[j, i]] = v;
                }
            }
            let kf: f64 = rng.random_range(0.05..1.0);
            let adj = threshold_adjacency(&fc, kf).unwrap();
            let expected = ceil_fraction(kf, n * (n - 1) / 2);
            let edges = adj.sum() as usize / 2;
            assert_eq!(edges, expected, "n={n} kf={kf}");
            assert_eq!(&adj, &adj.t().to_owned());
            for i in 0..n {
                assert_eq!(adj[[i, i]], 0.0);
            }
        }
    }

    #[test]
    fn ceil_fraction_is_robust_to_float_drift() {
        assert_eq!(ceil_fraction(0.8, 10), 8);
        assert_eq!(ceil_fraction(1.0 / 3.0, 3), 1);
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(0.8, 116 * 115 / 2), 5336);
    }

    #[test]
    fn dynamic_graph_composes_constituents() {
        let (series, _) = generate_synthetic_cohort(2, 6, 30, 0.5, 9).unwrap();
        let g = build_dynamic_graph(&series[0], spec(20, 5), 0.3, false).unwrap();
        assert_eq!(g.n_segments(), 2);
        assert_eq!(g.window_endpoints, vec![20, 25]);
        for adj in &g.adjacencies {
            assert_eq!(adj, &adj.t().to_owned());
            for i in 0..6 {
                assert_eq!(adj[[i, i]], 0.0);
            }
        }
    }

    #[test]
    fn constant_signal_yields_empty_graphs() {
        let ts = RoiTimeSeries::new("a", Array2::from_elem((4, 30), 2.5));
        let g = build_dynamic_graph(&ts, spec(20, 5), 0.5, false).unwrap();
        for adj in &g.adjacencies {
            assert_eq!(adj.sum(), 0.0);
        }
    }

    #[test]
    fn too_short_for_graph_construction() {
        let ts = RoiTimeSeries::new("a", Array2::zeros((4, 15)));
        assert!(matches!(
            build_dynamic_graph(&ts, spec(20, 5), 0.5, false),
            Err(Error::InvalidWindow(_))
        ));
    }

    /// Monte-Carlo check of the planted class signal, using the independent
    /// Pearson oracle over whole series.
    fn mean_block_fc(gap: f64, seed: u64) -> (f64, f64) {
        let n_subjects = 50;
        let (series, phenos) =
            generate_synthetic_cohort(n_subjects, 8, 120, gap, seed).unwrap();
        let block = synthetic_layout(8).discriminative_block;
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (ts, ph) in series.iter().zip(&phenos) {
            let fc = pearson_oracle(&ts.values);
            for i in block.clone() {
                for j in block.clone() {
                    if i < j {
                        sums[ph.label as usize] += fc[[i, j]].abs();
                        counts[ph.label as usize] += 1;
                    }
                }
            }
        }
        (sums[0] / counts[0] as f64, sums[1] / counts[1] as f64)
    }

    #[test]
    fn zero_gap_classes_are_indistinguishable() {
        let (c0, c1) = mean_block_fc(0.0, 13);
        assert!((c1 - c0).abs() < 0.1, "class means {c0} vs {c1}");
    }

    #[test]
    fn planted_gap_separates_classes() {
        let (c0, c1) = mean_block_fc(0.8, 13);
        assert!(c1 - c0 > 0.3, "class means {c0} vs {c1}");
    }
}
