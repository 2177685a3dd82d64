//! Retrieval evaluation: pairwise distances, the ranking protocol with
//! same-camera exclusion, CMC top-k rates, and mean average precision.

use crate::data::FeatureRecord;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Errors from the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("embedding set is empty")]
    EmptySet,
    #[error("record {index} has width {got}, other records have width {expected}")]
    InconsistentWidth {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("record {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("query and gallery widths differ: {query} vs {gallery}")]
    WidthMismatch { query: usize, gallery: usize },
    #[error("vectors must share a length, got {lhs} and {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("cosine distance is undefined for the zero vector ({operand} operand)")]
    ZeroNorm { operand: &'static str },
    #[error("query {query_index}: no eligible gallery items remain after same-camera exclusion")]
    NoEligibleGallery { query_index: usize },
    #[error("query {query_index}: gallery holds no relevant item, average precision is undefined")]
    NoRelevant { query_index: usize },
    #[error("cmc rank k must be at least 1")]
    ZeroK,
    #[error("unknown metric '{0}', expected 'euclidean' or 'cosine'")]
    UnknownMetric(String),
}

/// Distance function used for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    #[default]
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Euclidean => write!(f, "euclidean"),
            Metric::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(EvalError::UnknownMetric(other.to_owned())),
        }
    }
}

/// Euclidean or cosine distance between two equal-length vectors. Cosine
/// distance is `1 - cos(a, b)` and rejects zero-norm operands.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    match metric {
        Metric::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            if na == 0.0 {
                return Err(EvalError::ZeroNorm { operand: "lhs" });
            }
            if nb == 0.0 {
                return Err(EvalError::ZeroNorm { operand: "rhs" });
            }
            Ok(1.0 - dot / (na * nb))
        }
    }
}

/// Scales a vector to unit Euclidean norm in place. The zero vector is left
/// unchanged; downstream cosine ranking reports it as a domain error.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// A validated collection of equal-width, finite feature records.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    records: Vec<FeatureRecord>,
    width: usize,
}

impl EmbeddingSet {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self, EvalError> {
        let width = records.first().ok_or(EvalError::EmptySet)?.vector.len();
        for (index, record) in records.iter().enumerate() {
            if record.vector.len() != width {
                return Err(EvalError::InconsistentWidth {
                    index,
                    expected: width,
                    got: record.vector.len(),
                });
            }
            if record.vector.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite { index });
            }
        }
        Ok(Self { records, width })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }
}

/// The ranked gallery for one query: eligible gallery indices in ascending
/// distance order (ties broken by ascending gallery index) and, parallel to
/// them, whether each shares the query identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub query_index: usize,
    pub order: Vec<usize>,
    pub matches: Vec<bool>,
}

impl RankedQuery {
    /// 1-based rank of the first correct gallery item, if any matched.
    pub fn first_match_rank(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }
}

/// Ranks the gallery for one query.
///
/// Gallery items sharing both the query's identity and its camera tag are
/// excluded (the standard protocol: trivial same-camera shots must not count
/// as hits). The exclusion only applies when both sides carry camera tags.
pub fn rank_query(
    query: &FeatureRecord,
    query_index: usize,
    gallery: &EmbeddingSet,
    metric: Metric,
) -> Result<RankedQuery, EvalError> {
    if query.vector.len() != gallery.width() {
        return Err(EvalError::WidthMismatch {
            query: query.vector.len(),
            gallery: gallery.width(),
        });
    }
    let mut scored: Vec<(f64, usize, bool)> = Vec::with_capacity(gallery.len());
    for (i, item) in gallery.records().iter().enumerate() {
        let same_id = item.id == query.id;
        let same_camera = match (&query.camera, &item.camera) {
            (Some(q), Some(g)) => q == g,
            _ => false,
        };
        if same_id && same_camera {
            continue;
        }
        let d = distance(&query.vector, &item.vector, metric)?;
        scored.push((d, i, same_id));
    }
    if scored.is_empty() {
        return Err(EvalError::NoEligibleGallery { query_index });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedQuery {
        query_index,
        order: scored.iter().map(|&(_, i, _)| i).collect(),
        matches: scored.iter().map(|&(_, _, m)| m).collect(),
    })
}

/// Fraction of queries whose first correct match appears within the top `k`
/// ranks. Queries that never match count as misses.
pub fn cmc_top_k(ranked: &[RankedQuery], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if ranked.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let hits = ranked
        .iter()
        .filter(|r| r.first_match_rank().is_some_and(|rank| rank <= k))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean over queries of average precision: for each query,
/// `AP = (1/R) Σ_j precision@rank(j)` over its `R` relevant gallery items.
/// A query with no relevant item in the eligible gallery is a protocol
/// error, not a zero.
pub fn mean_average_precision(ranked: &[RankedQuery]) -> Result<f64, EvalError> {
    if ranked.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut total = 0.0;
    for r in ranked {
        let relevant = r.matches.iter().filter(|&&m| m).count();
        if relevant == 0 {
            return Err(EvalError::NoRelevant {
                query_index: r.query_index,
            });
        }
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (pos, &matched) in r.matches.iter().enumerate() {
            if matched {
                seen += 1;
                ap += seen as f64 / (pos + 1) as f64;
            }
        }
        total += ap / relevant as f64;
    }
    Ok(total / ranked.len() as f64)
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    pub metric: Metric,
}

impl EvalReport {
    /// The line-oriented machine format:
    /// `top1=<x> top5=<x> map=<x> n_query=<n> n_gallery=<n> metric=<m>`.
    pub fn machine_line(&self) -> String {
        format!(
            "top1={} top5={} map={} n_query={} n_gallery={} metric={}",
            self.top1, self.top5, self.map, self.n_query, self.n_gallery, self.metric
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries : {}", self.n_query)?;
        writeln!(f, "gallery : {}", self.n_gallery)?;
        writeln!(f, "metric  : {}", self.metric)?;
        writeln!(f, "top-1   : {:.4}", self.top1)?;
        writeln!(f, "top-5   : {:.4}", self.top5)?;
        write!(f, "mAP     : {:.4}", self.map)
    }
}

/// Runs the full protocol: ranks every query against the gallery, then
/// aggregates CMC top-1, top-5, and mean average precision.
pub fn evaluate(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    metric: Metric,
) -> Result<EvalReport, EvalError> {
    if queries.width() != gallery.width() {
        return Err(EvalError::WidthMismatch {
            query: queries.width(),
            gallery: gallery.width(),
        });
    }
    let ranked = queries
        .records()
        .iter()
        .enumerate()
        .map(|(i, q)| rank_query(q, i, gallery, metric))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        top1: cmc_top_k(&ranked, 1)?,
        top5: cmc_top_k(&ranked, 5)?,
        map: mean_average_precision(&ranked)?,
        n_query: queries.len(),
        n_gallery: gallery.len(),
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, camera: Option<&str>, vector: Vec<f64>) -> FeatureRecord {
        FeatureRecord::new(id, camera.map(String::from), vector)
    }

    #[test]
    fn euclidean_distance_is_the_l2_norm_of_the_difference() {
        let d = distance(&[0.0, 0.0], &[3.0, 4.0], Metric::Euclidean).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn cosine_distance_fixtures() {
        let orthogonal = distance(&[1.0, 0.0], &[0.0, 2.0], Metric::Cosine).unwrap();
        assert!((orthogonal - 1.0).abs() < 1e-15);
        let parallel = distance(&[1.0, 1.0], &[3.0, 3.0], Metric::Cosine).unwrap();
        assert!(parallel.abs() < 1e-15);
        let opposite = distance(&[1.0, 0.0], &[-2.0, 0.0], Metric::Cosine).unwrap();
        assert!((opposite - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let err = distance(&[0.0, 0.0], &[1.0, 0.0], Metric::Cosine).unwrap_err();
        assert_eq!(err, EvalError::ZeroNorm { operand: "lhs" });
        let err = distance(&[1.0, 0.0], &[0.0, 0.0], Metric::Cosine).unwrap_err();
        assert_eq!(err, EvalError::ZeroNorm { operand: "rhs" });
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let err = distance(&[1.0], &[1.0, 2.0], Metric::Euclidean).unwrap_err();
        assert_eq!(err, EvalError::LengthMismatch { lhs: 1, rhs: 2 });
    }

    #[test]
    fn l2_normalize_produces_unit_vectors_and_ignores_zero() {
        let mut v = vec![3.0, 4.0];
        l2_normalize(&mut v);
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
        let mut z = vec![0.0, 0.0];
        l2_normalize(&mut z);
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn embedding_set_validates_width_and_finiteness() {
        assert_eq!(EmbeddingSet::new(vec![]).unwrap_err(), EvalError::EmptySet);
        let err = EmbeddingSet::new(vec![
            record("a", None, vec![1.0, 2.0]),
            record("b", None, vec![1.0]),
        ])
        .unwrap_err();
        assert_eq!(err, EvalError::InconsistentWidth { index: 1, expected: 2, got: 1 });
        let err = EmbeddingSet::new(vec![record("a", None, vec![f64::NAN])]).unwrap_err();
        assert_eq!(err, EvalError::NonFinite { index: 0 });
    }

    #[test]
    fn ranking_sorts_by_distance_with_index_tiebreak() {
        let gallery = EmbeddingSet::new(vec![
            record("x", None, vec![5.0, 0.0]),
            record("q", None, vec![1.0, 0.0]), // duplicate distance with index 2
            record("y", None, vec![1.0, 0.0]),
            record("q", None, vec![2.0, 0.0]),
        ])
        .unwrap();
        let query = record("q", None, vec![1.0, 0.0]);
        let ranked = rank_query(&query, 0, &gallery, Metric::Euclidean).unwrap();
        assert_eq!(ranked.order, vec![1, 2, 3, 0]);
        assert_eq!(ranked.matches, vec![true, false, true, false]);
        assert_eq!(ranked.first_match_rank(), Some(1));
    }

    #[test]
    fn same_id_same_camera_items_are_excluded() {
        let gallery = EmbeddingSet::new(vec![
            record("q", Some("cam0"), vec![1.0, 0.0]), // excluded: same id+camera
            record("q", Some("cam1"), vec![2.0, 0.0]), // kept: other camera
            record("z", Some("cam0"), vec![3.0, 0.0]), // kept: other id
        ])
        .unwrap();
        let query = record("q", Some("cam0"), vec![1.0, 0.0]);
        let ranked = rank_query(&query, 0, &gallery, Metric::Euclidean).unwrap();
        assert_eq!(ranked.order, vec![1, 2]);
        assert_eq!(ranked.matches, vec![true, false]);
    }

    #[test]
    fn untagged_records_are_never_excluded() {
        let gallery = EmbeddingSet::new(vec![
            record("q", None, vec![1.0, 0.0]),
            record("q", Some("cam0"), vec![2.0, 0.0]),
        ])
        .unwrap();
        // Query tagged, gallery item untagged: no exclusion.
        let query = record("q", Some("cam0"), vec![1.0, 0.0]);
        let ranked = rank_query(&query, 0, &gallery, Metric::Euclidean).unwrap();
        assert_eq!(ranked.order.len(), 1, "the cam0 twin is excluded, the untagged one kept");
        assert_eq!(ranked.order, vec![0]);
        // Query untagged: nothing is excluded.
        let query = record("q", None, vec![1.0, 0.0]);
        let ranked = rank_query(&query, 0, &gallery, Metric::Euclidean).unwrap();
        assert_eq!(ranked.order, vec![0, 1]);
    }

    #[test]
    fn fully_excluded_gallery_is_a_protocol_error() {
        let gallery =
            EmbeddingSet::new(vec![record("q", Some("cam0"), vec![1.0, 0.0])]).unwrap();
        let query = record("q", Some("cam0"), vec![1.0, 0.0]);
        let err = rank_query(&query, 3, &gallery, Metric::Euclidean).unwrap_err();
        assert_eq!(err, EvalError::NoEligibleGallery { query_index: 3 });
    }

    fn ranked_with_first_match(query_index: usize, rank: usize, len: usize) -> RankedQuery {
        RankedQuery {
            query_index,
            order: (0..len).collect(),
            matches: (0..len).map(|i| i + 1 == rank).collect(),
        }
    }

    #[test]
    fn cmc_counts_first_match_ranks() {
        let ranked: Vec<RankedQuery> = [1, 2, 6, 3]
            .iter()
            .enumerate()
            .map(|(q, &r)| ranked_with_first_match(q, r, 6))
            .collect();
        assert_eq!(cmc_top_k(&ranked, 1).unwrap(), 0.25);
        assert_eq!(cmc_top_k(&ranked, 5).unwrap(), 0.75);
        assert_eq!(cmc_top_k(&ranked, 6).unwrap(), 1.0);
    }

    #[test]
    fn cmc_rejects_zero_k() {
        let ranked = vec![ranked_with_first_match(0, 1, 2)];
        assert_eq!(cmc_top_k(&ranked, 0).unwrap_err(), EvalError::ZeroK);
    }

    #[test]
    fn average_precision_fixture() {
        // Relevant items at ranks 1 and 3: AP = (1/1 + 2/3) / 2 = 5/6.
        let ranked = vec![RankedQuery {
            query_index: 0,
            order: vec![0, 1, 2, 3],
            matches: vec![true, false, true, false],
        }];
        let map = mean_average_precision(&ranked).unwrap();
        assert!((map - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn map_averages_over_queries() {
        let ranked = vec![
            RankedQuery {
                query_index: 0,
                order: vec![0, 1],
                matches: vec![true, false], // AP = 1
            },
            RankedQuery {
                query_index: 1,
                order: vec![0, 1],
                matches: vec![false, true], // AP = 1/2
            },
        ];
        assert_eq!(mean_average_precision(&ranked).unwrap(), 0.75);
    }

    #[test]
    fn map_requires_a_relevant_item_per_query() {
        let ranked = vec![RankedQuery {
            query_index: 2,
            order: vec![0],
            matches: vec![false],
        }];
        assert_eq!(
            mean_average_precision(&ranked).unwrap_err(),
            EvalError::NoRelevant { query_index: 2 }
        );
    }

    #[test]
    fn evaluate_produces_a_consistent_report() {
        let gallery = EmbeddingSet::new(vec![
            record("a", Some("cam1"), vec![1.0, 0.0]),
            record("b", Some("cam1"), vec![0.0, 1.0]),
        ])
        .unwrap();
        let queries = EmbeddingSet::new(vec![
            record("a", Some("cam0"), vec![0.9, 0.1]),
            record("b", Some("cam0"), vec![0.1, 0.9]),
        ])
        .unwrap();
        let report = evaluate(&queries, &gallery, Metric::Cosine).unwrap();
        assert_eq!(report.top1, 1.0);
        assert_eq!(report.top5, 1.0);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.n_query, 2);
        assert_eq!(report.n_gallery, 2);
        assert_eq!(
            report.machine_line(),
            "top1=1 top5=1 map=1 n_query=2 n_gallery=2 metric=cosine"
        );
    }

    #[test]
    fn metric_parses_from_strings() {
        assert_eq!("cosine".parse::<Metric>().unwrap(), Metric::Cosine);
        assert_eq!("Euclidean".parse::<Metric>().unwrap(), Metric::Euclidean);
        assert_eq!("l2".parse::<Metric>().unwrap(), Metric::Euclidean);
        assert!(matches!(
            "manhattan".parse::<Metric>(),
            Err(EvalError::UnknownMetric(_))
        ));
    }
}
