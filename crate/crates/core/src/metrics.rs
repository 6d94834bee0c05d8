//! Bit statistics and Hamming-ranking retrieval metrics.
//!
//! Conventions, fixed so numbers are comparable across runs and platforms:
//!
//! * relevance: two items are relevant iff their label sets intersect;
//! * ranking: ascending Hamming distance, ties by ascending database index;
//! * `AP@k = (1/R_k) Σ_{i ≤ k, rel_i} precision@i`, with `R_k` the number of
//!   relevant items inside the top `k` (0 when `R_k = 0`);
//! * a query that is itself a database member is removed from its own ranking;
//! * the PR curve is swept over Hamming radii `0..=K`; precision at a radius
//!   is averaged over the queries that retrieve at least one item there, and
//!   radii where no query retrieves anything carry no precision.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::codes::{rank_by_distance, PackedCodeDatabase};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitStats {
    pub positive_rates: Vec<f64>,
    pub entropies: Vec<f64>,
    pub mean_entropy: f64,
}

/// Entropy in bits of a Bernoulli(p) variable, `0 · log 0 := 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    term(p) + term(1.0 - p)
}

impl BitStats {
    fn from_counts(positives: &[usize], n: usize) -> Self {
        let positive_rates: Vec<f64> = positives.iter().map(|&c| c as f64 / n as f64).collect();
        let entropies: Vec<f64> = positive_rates.iter().map(|&p| binary_entropy(p)).collect();
        let mean_entropy = entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;
        Self {
            positive_rates,
            entropies,
            mean_entropy,
        }
    }
}

/// Per-bit positive rate and entropy of a ±1 code matrix (`v ≥ 0` counts as +1).
pub fn bit_entropy(codes: &Matrix) -> Result<BitStats> {
    if codes.rows() == 0 {
        return Err(Error::invalid("bit statistics need at least one item"));
    }
    let mut positives = vec![0usize; codes.cols()];
    for row in codes.row_iter() {
        for (c, &v) in positives.iter_mut().zip(row) {
            *c += usize::from(v >= 0.0);
        }
    }
    Ok(BitStats::from_counts(&positives, codes.rows()))
}

pub fn bit_entropy_packed(db: &PackedCodeDatabase) -> Result<BitStats> {
    if db.is_empty() {
        return Err(Error::invalid("bit statistics need at least one item"));
    }
    let mut positives = vec![0usize; db.n_bits()];
    for i in 0..db.len() {
        let code = db.code(i);
        for (j, c) in positives.iter_mut().enumerate() {
            *c += (code[j / 64] >> (j % 64) & 1) as usize;
        }
    }
    Ok(BitStats::from_counts(&positives, db.len()))
}

/// Whether two label sets share at least one label.
pub fn relevance(query_labels: &[u32], item_labels: &[u32]) -> Result<bool> {
    if query_labels.is_empty() {
        return Err(Error::invalid("query has no labels"));
    }
    Ok(shares_label(query_labels, item_labels))
}

#[inline]
fn shares_label(a: &[u32], b: &[u32]) -> bool {
    match (a, b) {
        ([x], [y]) => x == y,
        _ => a.iter().any(|l| b.contains(l)),
    }
}

/// AP over the first `k` entries of a ranked relevance list.
pub fn average_precision(ranked_relevances: &[bool], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevances.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Which codes act as queries against a database.
#[derive(Clone, Copy, Debug)]
pub enum Queries<'a> {
    /// A separate query set; nothing is excluded from the rankings.
    External(&'a PackedCodeDatabase),
    /// Every database item queries the rest of the database.
    AllMembers,
}

impl<'a> Queries<'a> {
    fn len(&self, db: &PackedCodeDatabase) -> usize {
        match self {
            Queries::External(q) => q.len(),
            Queries::AllMembers => db.len(),
        }
    }

    /// Query code, labels and the database index to exclude.
    fn get<'b>(&'b self, db: &'b PackedCodeDatabase, i: usize) -> (&'b [u64], &'b [u32], Option<usize>) {
        match self {
            Queries::External(q) => (q.code(i), &q.labels()[i], None),
            Queries::AllMembers => (db.code(i), &db.labels()[i], Some(i)),
        }
    }

    fn candidates(&self, db: &PackedCodeDatabase) -> usize {
        match self {
            Queries::External(_) => db.len(),
            Queries::AllMembers => db.len().saturating_sub(1),
        }
    }

    fn check(&self, db: &PackedCodeDatabase) -> Result<()> {
        if let Queries::External(q) = self {
            if q.n_bits() != db.n_bits() {
                return Err(Error::Mismatch(format!(
                    "queries have {} bits, database has {}",
                    q.n_bits(),
                    db.n_bits()
                )));
            }
        }
        for i in 0..self.len(db) {
            if self.get(db, i).1.is_empty() {
                return Err(Error::invalid(format!("query {i} has no labels")));
            }
        }
        Ok(())
    }
}

/// Per-query ranking state shared by all metrics.
struct RankedQuery {
    /// Relevance flags in rank order, self-match removed.
    relevances: Vec<bool>,
    /// Per-distance counts of (retrieved, relevant) items, self-match removed.
    by_distance: Vec<(usize, usize)>,
}

fn rank_query(db: &PackedCodeDatabase, code: &[u64], labels: &[u32], exclude: Option<usize>) -> Result<RankedQuery> {
    let distances = db.distances(code)?;
    let order = rank_by_distance(&distances, db.n_bits());
    let mut relevances = Vec::with_capacity(order.len());
    let mut by_distance = vec![(0usize, 0usize); db.n_bits() + 1];
    for idx in order {
        if Some(idx) == exclude {
            continue;
        }
        let rel = shares_label(labels, &db.labels()[idx]);
        relevances.push(rel);
        let slot = &mut by_distance[distances[idx] as usize];
        slot.0 += 1;
        slot.1 += usize::from(rel);
    }
    Ok(RankedQuery {
        relevances,
        by_distance,
    })
}

fn ranked_queries(queries: Queries<'_>, db: &PackedCodeDatabase) -> Result<Vec<RankedQuery>> {
    queries.check(db)?;
    (0..queries.len(db))
        .into_par_iter()
        .map(|i| {
            let (code, labels, exclude) = queries.get(db, i);
            rank_query(db, code, labels, exclude)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn map_at_k(queries: Queries<'_>, db: &PackedCodeDatabase, k: usize) -> Result<f64> {
    let ranked = ranked_queries(queries, db)?;
    Ok(map_from_ranked(&ranked, k))
}

fn map_from_ranked(ranked: &[RankedQuery], k: usize) -> f64 {
    mean(ranked.iter().map(|q| average_precision(&q.relevances, k))).unwrap_or(0.0)
}

/// Mean precision among the top `N` results for every `N = 1..=n_max`.
pub fn topn_precision_curve(queries: Queries<'_>, db: &PackedCodeDatabase, n_max: usize) -> Result<Vec<f64>> {
    if n_max > queries.candidates(db) {
        return Err(Error::invalid(format!(
            "top-N cutoff {n_max} exceeds the {} rankable items",
            queries.candidates(db)
        )));
    }
    let ranked = ranked_queries(queries, db)?;
    Ok(topn_from_ranked(&ranked, n_max))
}

fn topn_from_ranked(ranked: &[RankedQuery], n_max: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_max];
    for q in ranked {
        let mut hits = 0usize;
        for (n, &rel) in q.relevances.iter().take(n_max).enumerate() {
            hits += usize::from(rel);
            sums[n] += hits as f64 / (n + 1) as f64;
        }
    }
    let count = ranked.len().max(1) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: usize,
    pub recall: f64,
    /// `None` when no query retrieves anything within `radius`.
    pub precision: Option<f64>,
    /// Queries that retrieve at least one item within `radius`.
    pub queries_with_results: usize,
}

/// Precision and recall at every Hamming radius `0..=K`.
pub fn pr_curve(queries: Queries<'_>, db: &PackedCodeDatabase) -> Result<Vec<PrPoint>> {
    let ranked = ranked_queries(queries, db)?;
    Ok(pr_from_ranked(&ranked, db.n_bits()))
}

fn pr_from_ranked(ranked: &[RankedQuery], bits: usize) -> Vec<PrPoint> {
    let mut precision_sum = vec![0.0; bits + 1];
    let mut precision_n = vec![0usize; bits + 1];
    let mut recall_sum = vec![0.0; bits + 1];
    let mut recall_n = 0usize;
    for q in ranked {
        let total_relevant: usize = q.by_distance.iter().map(|c| c.1).sum();
        let (mut retrieved, mut relevant) = (0usize, 0usize);
        for (r, &(t, rel)) in q.by_distance.iter().enumerate() {
            retrieved += t;
            relevant += rel;
            if retrieved > 0 {
                precision_sum[r] += relevant as f64 / retrieved as f64;
                precision_n[r] += 1;
            }
            if total_relevant > 0 {
                recall_sum[r] += relevant as f64 / total_relevant as f64;
            }
        }
        recall_n += usize::from(total_relevant > 0);
    }
    (0..=bits)
        .map(|r| PrPoint {
            radius: r,
            recall: if recall_n > 0 { recall_sum[r] / recall_n as f64 } else { 0.0 },
            precision: (precision_n[r] > 0).then(|| precision_sum[r] / precision_n[r] as f64),
            queries_with_results: precision_n[r],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCurves {
    /// `(N, mean precision@N)` at the requested sample points.
    pub topn_precision: Vec<(usize, f64)>,
    pub pr_curve: Vec<PrPoint>,
    pub map_at_k: f64,
    pub k: usize,
}

/// mAP@k, TopN precision at `topn_points` and the PR curve from one ranking
/// pass per query.
pub fn evaluate(
    queries: Queries<'_>,
    db: &PackedCodeDatabase,
    k: usize,
    topn_points: &[usize],
) -> Result<RetrievalCurves> {
    let n_max = topn_points.iter().copied().max().unwrap_or(0);
    if n_max > queries.candidates(db) {
        return Err(Error::invalid(format!(
            "top-N point {n_max} exceeds the {} rankable items",
            queries.candidates(db)
        )));
    }
    if topn_points.contains(&0) {
        return Err(Error::invalid("top-N points start at 1"));
    }
    let ranked = ranked_queries(queries, db)?;
    let topn = topn_from_ranked(&ranked, n_max);
    Ok(RetrievalCurves {
        topn_precision: topn_points.iter().map(|&n| (n, topn[n - 1])).collect(),
        pr_curve: pr_from_ranked(&ranked, db.n_bits()),
        map_at_k: map_from_ranked(&ranked, k),
        k,
    })
}

/// `count` roughly evenly spaced points in `1..=n_max`, always ending at `n_max`.
pub fn sample_points(n_max: usize, count: usize) -> Vec<usize> {
    if n_max == 0 || count == 0 {
        return Vec::new();
    }
    let count = count.min(n_max);
    let mut pts: Vec<usize> = (1..=count).map(|i| ((i * n_max) as f64 / count as f64).round() as usize).collect();
    pts.dedup();
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitHistogram {
    pub bit: usize,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

/// Equal-width histograms over `[min, max]` of each feature column; the
/// maximum falls in the last bin and a constant column lands in bin 0.
pub fn feature_histograms(u: &Matrix, bins: usize) -> Result<Vec<BitHistogram>> {
    if bins < 2 {
        return Err(Error::invalid("histograms need at least two bins"));
    }
    if u.rows() == 0 {
        return Err(Error::invalid("histograms need at least one item"));
    }
    u.ensure_finite("feature_histograms")?;
    Ok((0..u.cols())
        .map(|c| {
            let col = u.column(c);
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (max - min) / bins as f64;
            let mut counts = vec![0usize; bins];
            for v in col {
                let slot = if width > 0.0 {
                    (((v - min) / width) as usize).min(bins - 1)
                } else {
                    0
                };
                counts[slot] += 1;
            }
            BitHistogram { bit: c, min, max, counts }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub k: usize,
    pub map_at_k: f64,
    pub mean_entropy: f64,
    pub per_bit_rates: Vec<f64>,
    pub n_queries: usize,
    pub n_database: usize,
    pub n_bits: usize,
}

pub fn topn_csv(points: &[(usize, f64)]) -> String {
    let mut s = String::from("n,precision\n");
    for (n, p) in points {
        writeln!(s, "{n},{p}").unwrap();
    }
    s
}

/// Radii without a defined precision are left out.
pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("radius,recall,precision,queries_with_results\n");
    for p in points {
        if let Some(prec) = p.precision {
            writeln!(s, "{},{},{},{}", p.radius, p.recall, prec, p.queries_with_results).unwrap();
        }
    }
    s
}

pub fn histogram_csv(histograms: &[BitHistogram]) -> String {
    let mut s = String::from("bit,bin,lower,upper,count\n");
    for h in histograms {
        let bins = h.counts.len();
        let width = (h.max - h.min) / bins as f64;
        for (b, c) in h.counts.iter().enumerate() {
            let lower = h.min + width * b as f64;
            let upper = if b + 1 == bins { h.max } else { h.min + width * (b + 1) as f64 };
            writeln!(s, "{},{b},{lower},{upper},{c}", h.bit).unwrap();
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn entropy_examples() {
        let balanced = Matrix::column_vector(&[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(bit_entropy(&balanced).unwrap().entropies, vec![1.0]);
        let constant = Matrix::column_vector(&[1.0, 1.0, 1.0]);
        assert_eq!(bit_entropy(&constant).unwrap().entropies, vec![0.0]);
        let quarter = Matrix::column_vector(&[1.0, -1.0, -1.0, -1.0]);
        let stats = bit_entropy(&quarter).unwrap();
        assert_eq!(stats.positive_rates, vec![0.25]);
        // -0.25 log2 0.25 - 0.75 log2 0.75
        assert!((stats.entropies[0] - 0.811_278_124_459_132_8).abs() < 1e-12);
        assert!(bit_entropy(&Matrix::zeros(0, 2)).is_err());

        let db = PackedCodeDatabase::pack(&quarter, vec![vec![]; 4]).unwrap();
        assert_eq!(bit_entropy_packed(&db).unwrap(), stats);
    }

    #[test]
    fn relevance_examples() {
        assert!(relevance(&[1, 2], &[2, 5]).unwrap());
        assert!(!relevance(&[1], &[2]).unwrap());
        assert!(relevance(&[3, 4], &[3, 4]).unwrap());
        assert!(relevance(&[], &[1]).is_err());
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&[true, false, true], 3);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 5], 5), 1.0);
        assert_eq!(average_precision(&[false; 5], 5), 0.0);
        // items past the cutoff never matter
        let base = [false, true, true, false];
        let mut longer = base.to_vec();
        longer.extend([false; 10]);
        assert_eq!(average_precision(&base, 4), average_precision(&longer, 4));
    }

    fn db_from(codes: &[&[f64]], labels: &[u32]) -> PackedCodeDatabase {
        PackedCodeDatabase::pack(
            &Matrix::from_rows(codes).unwrap(),
            labels.iter().map(|&l| vec![l]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn map_examples() {
        let copies = db_from(&[&[1.0, -1.0], &[1.0, -1.0], &[1.0, -1.0]], &[4, 4, 4]);
        let query = db_from(&[&[1.0, -1.0]], &[4]);
        assert_eq!(map_at_k(Queries::External(&query), &copies, 3).unwrap(), 1.0);

        let unique = db_from(&[&[1.0, 1.0], &[1.0, -1.0], &[-1.0, 1.0]], &[0, 1, 2]);
        assert_eq!(map_at_k(Queries::AllMembers, &unique, 3).unwrap(), 0.0);

        let wrong_bits = db_from(&[&[1.0, 1.0, 1.0]], &[0]);
        assert!(map_at_k(Queries::External(&wrong_bits), &unique, 3).is_err());
        let unlabeled = PackedCodeDatabase::pack(&Matrix::filled(1, 2, 1.0), vec![vec![]]).unwrap();
        assert!(map_at_k(Queries::External(&unlabeled), &unique, 3).is_err());
    }

    #[test]
    fn map_of_random_codes_approaches_class_prior() {
        let mut rng = RngStream::new(12);
        let classes = 5u32;
        let n = 4000;
        let codes = Matrix::new(n, 16, (0..n * 16).map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let labels = (0..n).map(|_| vec![rng.below(classes as usize) as u32]).collect();
        let db = PackedCodeDatabase::pack(&codes, labels).unwrap();
        let qcodes = Matrix::new(200, 16, (0..200 * 16).map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let qlabels = (0..200).map(|_| vec![rng.below(classes as usize) as u32]).collect();
        let queries = PackedCodeDatabase::pack(&qcodes, qlabels).unwrap();
        // AP@N over the whole database averages precision at relevant ranks,
        // which for random codes concentrates around the prior 1/5.
        let map = map_at_k(Queries::External(&queries), &db, n).unwrap();
        assert!((map - 0.2).abs() < 0.02, "mAP {map}");
    }

    #[test]
    fn curve_examples() {
        let db = db_from(&[&[1.0, 1.0, 1.0], &[1.0, -1.0, 1.0], &[-1.0, -1.0, -1.0]], &[7, 7, 7]);
        let q = db_from(&[&[1.0, 1.0, -1.0]], &[7]);
        let topn = topn_precision_curve(Queries::External(&q), &db, 3).unwrap();
        assert_eq!(topn, vec![1.0; 3]);
        assert!(topn_precision_curve(Queries::External(&q), &db, 4).is_err());

        let pr = pr_curve(Queries::External(&q), &db).unwrap();
        assert_eq!(pr.len(), 4);
        assert_eq!(pr[3].recall, 1.0);
        assert_eq!(pr[0].precision, None);
        assert!(pr.windows(2).all(|w| w[0].recall <= w[1].recall));
        let csv = pr_csv(&pr);
        assert!(!csv.contains("NaN"));
        assert_eq!(csv.lines().count(), 1 + 3);
    }

    #[test]
    fn evaluate_matches_individual_metrics() {
        let mut rng = RngStream::new(6);
        let n = 120;
        let codes = Matrix::new(n, 10, (0..n * 10).map(|_| if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let labels = (0..n).map(|_| vec![rng.below(4) as u32]).collect();
        let db = PackedCodeDatabase::pack(&codes, labels).unwrap();
        let curves = evaluate(Queries::AllMembers, &db, 50, &[1, 10, 119]).unwrap();
        assert_eq!(curves.map_at_k, map_at_k(Queries::AllMembers, &db, 50).unwrap());
        let topn = topn_precision_curve(Queries::AllMembers, &db, 119).unwrap();
        assert_eq!(curves.topn_precision, vec![(1, topn[0]), (10, topn[9]), (119, topn[118])]);
        assert_eq!(curves.pr_curve, pr_curve(Queries::AllMembers, &db).unwrap());
        assert!(evaluate(Queries::AllMembers, &db, 50, &[120]).is_err());
    }

    #[test]
    fn sample_points_cover_range() {
        assert_eq!(sample_points(10, 5), vec![2, 4, 6, 8, 10]);
        assert_eq!(sample_points(3, 10), vec![1, 2, 3]);
        assert!(sample_points(0, 4).is_empty());
    }

    #[test]
    fn histogram_examples() {
        let constant = Matrix::column_vector(&[2.0; 7]);
        let h = feature_histograms(&constant, 4).unwrap();
        assert_eq!(h[0].counts, vec![7, 0, 0, 0]);

        let mut rng = RngStream::new(1);
        let n = 100_000;
        let u = Matrix::new(n, 2, (0..2 * n).map(|_| rng.uniform()).collect()).unwrap();
        let h = feature_histograms(&u, 20).unwrap();
        for bit in &h {
            assert_eq!(bit.counts.iter().sum::<usize>(), n);
            let max = *bit.counts.iter().max().unwrap() as f64;
            let min = *bit.counts.iter().min().unwrap() as f64;
            assert!(max / min <= 1.5, "bin ratio {}", max / min);
        }
        assert_eq!(histogram_csv(&h).lines().count(), 1 + 2 * 20);
        assert!(feature_histograms(&u, 1).is_err());
    }
}
