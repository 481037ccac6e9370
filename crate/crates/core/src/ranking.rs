//! Rank lists and retrieval metrics over Hamming distance.
//!
//! Ranks are 1-based. A rank list orders base samples by ascending distance
//! to the query, breaking ties by ascending sample id.
//!
//! Average precision is computed through mis-ranks: a true positive at rank
//! `i` preceded by `m` false positives has precision `(i - m) / i`, so
//!
//! ```text
//! AP = (1 / |TP|) · Σ_{tp} (i - m) / i
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::BitCode;
use crate::error::{invalid, Error, Result};
use crate::labels::{Label, LabelSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: usize,
    pub distance: u32,
    pub relevant: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankList {
    query_id: Option<usize>,
    entries: Vec<RankEntry>,
}

impl RankList {
    /// Validates ordering: non-decreasing distance, ascending id on ties.
    pub fn new(query_id: Option<usize>, entries: Vec<RankEntry>) -> Result<Self> {
        for (pos, w) in entries.windows(2).enumerate() {
            let ordered = w[0].distance < w[1].distance
                || (w[0].distance == w[1].distance && w[0].id < w[1].id);
            if !ordered {
                return invalid(format!(
                    "entries at ranks {} and {} are out of order",
                    pos + 1,
                    pos + 2
                ));
            }
        }
        Ok(Self { query_id, entries })
    }

    /// An abstract list with strictly increasing distances: entry `j` (0-based)
    /// has id `j`, distance `j`.
    pub fn from_relevance(flags: &[bool]) -> Self {
        let entries = flags
            .iter()
            .enumerate()
            .map(|(j, &relevant)| RankEntry {
                id: j,
                distance: j as u32,
                relevant,
            })
            .collect();
        Self {
            query_id: None,
            entries,
        }
    }

    pub fn query_id(&self) -> Option<usize> {
        self.query_id
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn relevance(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.relevant).collect()
    }

    pub fn relevant_count(&self) -> usize {
        self.entries.iter().filter(|e| e.relevant).count()
    }

    /// The top-`r` prefix.
    pub fn truncated(&self, r: usize) -> RankList {
        Self {
            query_id: self.query_id,
            entries: self.entries[..r.min(self.entries.len())].to_vec(),
        }
    }

    fn relevant_in_top(&self, i: usize) -> usize {
        self.entries[..i].iter().filter(|e| e.relevant).count()
    }
}

fn check_base(query: &BitCode, base: &[BitCode], flags: usize) -> Result<()> {
    if base.is_empty() {
        return Err(Error::EmptyList);
    }
    if flags != base.len() {
        return invalid(format!(
            "{} base codes but {flags} relevance/label entries",
            base.len()
        ));
    }
    if let Some(c) = base.iter().find(|c| c.len() != query.len()) {
        return invalid(format!(
            "base code of length {} does not match {}-bit query",
            c.len(),
            query.len()
        ));
    }
    Ok(())
}

/// Sample ids of `base` ordered by (distance to `query`, id), with distances.
/// Counting sort over the `h + 1` possible distances keeps ids ascending
/// within each distance.
fn order_by_distance(query: &BitCode, base: &[BitCode]) -> Vec<(usize, u32)> {
    let dists: Vec<u32> = base.iter().map(|b| query.distance_unchecked(b)).collect();
    let mut counts = vec![0usize; query.len() + 2];
    for &d in &dists {
        counts[d as usize + 1] += 1;
    }
    for k in 1..counts.len() {
        counts[k] += counts[k - 1];
    }
    let mut out = vec![(0usize, 0u32); base.len()];
    for (id, &d) in dists.iter().enumerate() {
        let slot = &mut counts[d as usize];
        out[*slot] = (id, d);
        *slot += 1;
    }
    out
}

/// Exact linear scan of `base`, `relevant[j]` flagging sample `j`.
pub fn build_rank_list(query: &BitCode, base: &[BitCode], relevant: &[bool]) -> Result<RankList> {
    check_base(query, base, relevant.len())?;
    let entries = order_by_distance(query, base)
        .into_iter()
        .map(|(id, distance)| RankEntry {
            id,
            distance,
            relevant: relevant[id],
        })
        .collect();
    Ok(RankList {
        query_id: None,
        entries,
    })
}

/// Number of false positives ranked strictly above the true positive at
/// 1-based `rank`.
pub fn mis_rank(list: &RankList, rank: usize) -> Result<usize> {
    if rank == 0 || rank > list.len() {
        return invalid(format!("rank {rank} outside 1..={}", list.len()));
    }
    if !list.entries[rank - 1].relevant {
        return Err(Error::InvalidQuery(format!(
            "rank {rank} holds a false positive"
        )));
    }
    Ok(list.entries[..rank - 1].iter().filter(|e| !e.relevant).count())
}

/// `(rank, mis-rank)` of every true positive, in rank order.
pub fn true_positive_ranks(list: &RankList) -> Vec<(usize, usize)> {
    let mut fp = 0;
    let mut out = Vec::new();
    for (j, e) in list.entries.iter().enumerate() {
        if e.relevant {
            out.push((j + 1, fp));
        } else {
            fp += 1;
        }
    }
    out
}

/// Largest mis-rank in the list, carried by its last true positive. `None`
/// when there is no true positive.
pub fn max_mis_rank(list: &RankList) -> Option<usize> {
    true_positive_ranks(list).last().map(|&(_, m)| m)
}

pub fn average_precision(list: &RankList) -> Result<f64> {
    let tps = true_positive_ranks(list);
    if tps.is_empty() {
        return Err(Error::UndefinedAp);
    }
    let sum: f64 = tps
        .iter()
        .map(|&(i, m)| (i - m) as f64 / i as f64)
        .sum();
    Ok(sum / tps.len() as f64)
}

fn check_rank(list: &RankList, i: usize) -> Result<()> {
    if i == 0 || i > list.len() {
        return invalid(format!("rank {i} outside 1..={}", list.len()));
    }
    Ok(())
}

pub fn precision_at_k(list: &RankList, k: usize) -> Result<f64> {
    check_rank(list, k)?;
    Ok(list.relevant_in_top(k) as f64 / k as f64)
}

fn hits_for_recall(list: &RankList, i: usize, total_relevant: usize) -> Result<usize> {
    check_rank(list, i)?;
    if total_relevant == 0 {
        return invalid("total relevant count must be at least 1");
    }
    let hits = list.relevant_in_top(i);
    if hits > total_relevant {
        return invalid(format!(
            "{hits} relevant entries in the top {i} exceed the stated total {total_relevant}"
        ));
    }
    Ok(hits)
}

/// `(i - m) / |T|`, with `i - m` the relevant count in the top `i`.
pub fn recall_at_rank(list: &RankList, i: usize, total_relevant: usize) -> Result<f64> {
    let hits = hits_for_recall(list, i, total_relevant)?;
    Ok(hits as f64 / total_relevant as f64)
}

/// `2 (i - m) / (i + |T|)`.
pub fn f_score_at_rank(list: &RankList, i: usize, total_relevant: usize) -> Result<f64> {
    let hits = hits_for_recall(list, i, total_relevant)?;
    Ok(2.0 * hits as f64 / (i + total_relevant) as f64)
}

/// `(recall, precision)` at every true-positive rank.
pub fn pr_points(list: &RankList, total_relevant: usize) -> Result<Vec<(f64, f64)>> {
    if total_relevant == 0 {
        return invalid("total relevant count must be at least 1");
    }
    true_positive_ranks(list)
        .into_iter()
        .map(|(i, m)| {
            let hits = i - m;
            if hits > total_relevant {
                return invalid("more true positives than the stated total");
            }
            Ok((
                hits as f64 / total_relevant as f64,
                hits as f64 / i as f64,
            ))
        })
        .collect()
}

/// Fraction of relevant codes among base codes within `radius` of `query`.
pub fn precision_in_hamming_ball(
    query: &BitCode,
    base: &[BitCode],
    relevant: &[bool],
    radius: u32,
) -> Result<f64> {
    check_base(query, base, relevant.len())?;
    let (mut inside, mut hits) = (0usize, 0usize);
    for (b, &rel) in base.iter().zip(relevant) {
        if query.distance_unchecked(b) <= radius {
            inside += 1;
            hits += usize::from(rel);
        }
    }
    if inside == 0 {
        return Err(Error::EmptyBall { radius });
    }
    Ok(hits as f64 / inside as f64)
}

/// Majority label among the `k` nearest base codes (distance, then id).
/// Label ties go to the smallest label.
pub fn knn_predict(query: &BitCode, base: &[BitCode], labels: &[Label], k: usize) -> Result<Label> {
    let sets: Vec<LabelSet> = labels.iter().map(|&l| LabelSet::single(l)).collect();
    knn_vote(query, base, &sets, k)
}

/// Multi-label kNN vote: each neighbour votes once for every label it has.
pub fn knn_vote(query: &BitCode, base: &[BitCode], labels: &[LabelSet], k: usize) -> Result<Label> {
    check_base(query, base, labels.len())?;
    if k == 0 || base.len() < k {
        return invalid(format!("k = {k} needs 1..={} base samples", base.len()));
    }
    let mut votes: std::collections::BTreeMap<Label, usize> = Default::default();
    for (id, _) in order_by_distance(query, base).into_iter().take(k) {
        for &l in labels[id].labels() {
            *votes.entry(l).or_default() += 1;
        }
    }
    // BTreeMap iterates labels ascending, so max_by keeps the first maximum
    // only if we compare on (count, Reverse(label)).
    let (label, _) = votes
        .into_iter()
        .max_by_key(|&(l, c)| (c, std::cmp::Reverse(l)))
        .expect("k >= 1 neighbours cast at least one vote");
    Ok(label)
}

fn relevance_for(query: &LabelSet, base: &[LabelSet]) -> Vec<bool> {
    base.iter().map(|b| b.intersects(query)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    /// Mean AP over evaluated queries; `None` when every query was skipped.
    pub map: Option<f64>,
    pub per_query: Vec<Option<f64>>,
    pub evaluated: usize,
    /// Queries with no relevant sample in their top-R list.
    pub skipped: usize,
}

fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        (None, 0)
    } else {
        // Sequential sum in query order keeps the result schedule-independent.
        (Some(defined.iter().sum::<f64>() / defined.len() as f64), defined.len())
    }
}

/// mAP over queries, each rank list cut to the top `r`. Relevance is label
/// set intersection.
pub fn map_at_r(
    queries: &[BitCode],
    query_labels: &[LabelSet],
    base: &[BitCode],
    base_labels: &[LabelSet],
    r: usize,
) -> Result<MapSummary> {
    if r == 0 {
        return invalid("cutoff r must be at least 1");
    }
    if queries.len() != query_labels.len() {
        return invalid("queries and query labels differ in length");
    }
    let per_query = queries
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(q, ql)| {
            let rel = relevance_for(ql, base_labels);
            let list = build_rank_list(q, base, &rel)?.truncated(r);
            match average_precision(&list) {
                Ok(ap) => Ok(Some(ap)),
                Err(Error::UndefinedAp) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (map, evaluated) = mean_defined(&per_query);
    Ok(MapSummary {
        map,
        skipped: per_query.len() - evaluated,
        evaluated,
        per_query,
    })
}

/// Which metric families [`evaluate_retrieval`] computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub r: usize,
    pub ap: bool,
    pub precision_at_k: Vec<usize>,
    pub pr: bool,
    pub ball_radius: Option<u32>,
    pub knn_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: u32,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub r: usize,
    pub map: Option<f64>,
    pub ap_per_query: Vec<Option<f64>>,
    pub skipped_queries: usize,
    /// True/false positives summed over all top-R lists.
    pub true_positives: usize,
    pub false_positives: usize,
    pub precision_at_k: Vec<(usize, f64)>,
    /// Mean precision/recall over queries when retrieving every code within
    /// each Hamming radius.
    pub pr_points: Vec<PrPoint>,
    pub precision_at_h2: Option<f64>,
    /// Queries whose Hamming ball was empty; they do not enter the mean.
    pub empty_balls: usize,
    pub knn_accuracy: Option<f64>,
}

struct QueryMetrics {
    ap: Option<f64>,
    tp: usize,
    fp: usize,
    pk: Vec<f64>,
    pr: Vec<Option<(f64, f64)>>,
    ball: Option<f64>,
    knn_correct: Option<bool>,
}

pub fn evaluate_retrieval(
    queries: &[BitCode],
    query_labels: &[LabelSet],
    base: &[BitCode],
    base_labels: &[LabelSet],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if queries.is_empty() {
        return invalid("no queries");
    }
    if queries.len() != query_labels.len() {
        return invalid("queries and query labels differ in length");
    }
    if opts.r == 0 {
        return invalid("cutoff r must be at least 1");
    }
    if let Some(&k) = opts.precision_at_k.iter().find(|&&k| k == 0 || k > base.len()) {
        return invalid(format!("P@K cutoff {k} outside 1..={}", base.len()));
    }
    let h = queries[0].len() as u32;
    let per: Vec<QueryMetrics> = queries
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(q, ql)| {
            let rel = relevance_for(ql, base_labels);
            let full = build_rank_list(q, base, &rel)?;
            let top = full.truncated(opts.r);
            let tp = top.relevant_count();
            let ap = if opts.ap {
                match average_precision(&top) {
                    Ok(ap) => Some(ap),
                    Err(Error::UndefinedAp) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let pk = opts
                .precision_at_k
                .iter()
                .map(|&k| precision_at_k(&full, k))
                .collect::<Result<Vec<_>>>()?;
            let total_rel = full.relevant_count();
            let pr = if opts.pr {
                (0..=h)
                    .map(|radius| {
                        let inside = full.entries().partition_point(|e| e.distance <= radius);
                        if inside == 0 || total_rel == 0 {
                            return None;
                        }
                        let hits = full.relevant_in_top(inside);
                        Some((hits as f64 / total_rel as f64, hits as f64 / inside as f64))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let ball = match opts.ball_radius {
                Some(radius) => match precision_in_hamming_ball(q, base, &rel, radius) {
                    Ok(p) => Some(p),
                    Err(Error::EmptyBall { .. }) => None,
                    Err(e) => return Err(e),
                },
                None => None,
            };
            let knn_correct = match opts.knn_k {
                Some(k) => {
                    let pred = knn_vote(q, base, base_labels, k)?;
                    Some(ql.labels().contains(&pred))
                }
                None => None,
            };
            Ok(QueryMetrics {
                ap,
                tp,
                fp: top.len() - tp,
                pk,
                pr,
                ball,
                knn_correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per.len() as f64;
    let ap_per_query: Vec<Option<f64>> = per.iter().map(|m| m.ap).collect();
    let (map, evaluated) = if opts.ap {
        mean_defined(&ap_per_query)
    } else {
        (None, 0)
    };
    let precision_at_k = opts
        .precision_at_k
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, per.iter().map(|m| m.pk[j]).sum::<f64>() / n))
        .collect();
    let pr_points = if opts.pr {
        (0..=h)
            .filter_map(|radius| {
                let pts: Vec<(f64, f64)> =
                    per.iter().filter_map(|m| m.pr[radius as usize]).collect();
                if pts.is_empty() {
                    return None;
                }
                let c = pts.len() as f64;
                Some(PrPoint {
                    radius,
                    recall: pts.iter().map(|p| p.0).sum::<f64>() / c,
                    precision: pts.iter().map(|p| p.1).sum::<f64>() / c,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    let balls: Vec<Option<f64>> = per.iter().map(|m| m.ball).collect();
    let (precision_at_h2, in_ball) = if opts.ball_radius.is_some() {
        mean_defined(&balls)
    } else {
        (None, per.len())
    };
    let knn_accuracy = opts.knn_k.map(|_| {
        per.iter().filter(|m| m.knn_correct == Some(true)).count() as f64 / n
    });
    Ok(MetricReport {
        queries: per.len(),
        r: opts.r,
        map,
        skipped_queries: if opts.ap { per.len() - evaluated } else { 0 },
        ap_per_query,
        true_positives: per.iter().map(|m| m.tp).sum(),
        false_positives: per.iter().map(|m| m.fp).sum(),
        precision_at_k,
        pr_points,
        precision_at_h2,
        empty_balls: per.len() - in_ball,
        knn_accuracy,
    })
}
