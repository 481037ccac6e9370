//! Class centers, inter-class distinctiveness, intra-class compactness and
//! the mis-rank lower bound on AP.
//!
//! For a query `q` whose class center is `c`, the triangle inequality gives
//!
//! ```text
//! min d(q, fp) / max d(q, tp)  >=  (min D_inter - 2 max D_intra) / (2 max D_intra)
//! ```
//!
//! so AP is bounded below by a function increasing in
//! `min D_inter / max D_intra`. The factor `2` is [`BOUND_CONSTANT`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::codes::BitCode;
use crate::error::{invalid, Error, Result};
use crate::labels::{Label, LabelSet};
use crate::ranking::{average_precision, max_mis_rank, RankList};
use crate::rng;

pub const BOUND_CONSTANT: u32 = 2;

/// Serialize an `f64` that may be `+inf` as the string `"+inf"`.
pub fn serialize_extended_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn serialize_extended_opt<S: Serializer>(
    v: &Option<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => serialize_extended_f64(x, s),
        None => s.serialize_none(),
    }
}

/// A percentile in `(0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Percentile(f64);

impl Percentile {
    pub const DEFAULT: Percentile = Percentile(99.9);

    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 100.0) {
            return invalid(format!("percentile {p} outside (0, 100]"));
        }
        Ok(Self(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Percentile {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<Percentile> for f64 {
    fn from(p: Percentile) -> f64 {
        p.0
    }
}

/// Linear-interpolation percentile of `values` (the numpy default), `q` in
/// `[0, 100]`.
pub fn percentile(values: &[u32], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    if !(0.0..=100.0).contains(&q) {
        return invalid(format!("percentile {q} outside [0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(v[lo] as f64 + (v[hi] as f64 - v[lo] as f64) * frac)
}

/// Bitwise majority vote; exact ties go to +1. Minimizes the summed Hamming
/// distance to the members.
pub fn class_center(codes: &[&BitCode]) -> Result<BitCode> {
    let first = codes
        .first()
        .ok_or_else(|| Error::InvalidInput("class has no members".into()))?;
    let h = first.len();
    if codes.iter().any(|c| c.len() != h) {
        return invalid("class members differ in length");
    }
    let mut positive = vec![0usize; h];
    for c in codes {
        for (k, p) in positive.iter_mut().enumerate() {
            *p += usize::from(c.bit(k));
        }
    }
    let bits: Vec<bool> = positive.iter().map(|&p| 2 * p >= codes.len()).collect();
    BitCode::from_bools(&bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub centers: BTreeMap<Label, BitCode>,
    /// One entry per unordered pair of centers, pairs in ascending label order.
    pub d_inter: Vec<u32>,
    /// One entry per (sample, own class) membership.
    pub d_intra: Vec<u32>,
    pub percentile: Percentile,
    /// `(100 - p)`-th percentile of `d_inter`.
    pub robust_min_inter: f64,
    /// `p`-th percentile of `d_intra`.
    pub robust_max_intra: f64,
    /// `robust_min_inter / robust_max_intra`, `+inf` when the denominator is 0.
    pub ratio: f64,
    pub warnings: Vec<String>,
}

/// Fraction of samples above which shared codes are flagged.
const COLLISION_WARN_FRACTION: f64 = 0.5;

pub fn class_stats(codes: &[BitCode], labels: &[LabelSet], p: Percentile) -> Result<ClassStats> {
    if codes.len() != labels.len() {
        return invalid(format!(
            "{} codes but {} label rows",
            codes.len(),
            labels.len()
        ));
    }
    if codes.is_empty() {
        return Err(Error::EmptyList);
    }
    let h = codes[0].len();
    if codes.iter().any(|c| c.len() != h) {
        return invalid("codes differ in length");
    }
    let mut members: BTreeMap<Label, Vec<&BitCode>> = BTreeMap::new();
    for (c, ls) in codes.iter().zip(labels) {
        for &l in ls.labels() {
            members.entry(l).or_default().push(c);
        }
    }
    if members.len() < 2 {
        return Err(Error::UndefinedRatio(format!(
            "{} class present, need at least 2",
            members.len()
        )));
    }
    let centers: BTreeMap<Label, BitCode> = members
        .iter()
        .map(|(&l, m)| Ok((l, class_center(m)?)))
        .collect::<Result<_>>()?;
    let center_list: Vec<&BitCode> = centers.values().collect();
    let mut d_inter = Vec::with_capacity(center_list.len() * (center_list.len() - 1) / 2);
    for i in 0..center_list.len() {
        for j in i + 1..center_list.len() {
            d_inter.push(center_list[i].distance_unchecked(center_list[j]));
        }
    }
    let mut d_intra = Vec::new();
    for (c, ls) in codes.iter().zip(labels) {
        for l in ls.labels() {
            d_intra.push(c.distance_unchecked(&centers[l]));
        }
    }
    let robust_min_inter = percentile(&d_inter, 100.0 - p.value())?;
    let robust_max_intra = percentile(&d_intra, p.value())?;
    let ratio = if robust_max_intra == 0.0 {
        f64::INFINITY
    } else {
        robust_min_inter / robust_max_intra
    };

    let mut warnings = Vec::new();
    let mut seen: HashMap<&BitCode, usize> = HashMap::new();
    for c in codes {
        *seen.entry(c).or_default() += 1;
    }
    let colliding: usize = seen.values().filter(|&&n| n > 1).sum();
    let frac = colliding as f64 / codes.len() as f64;
    if frac > COLLISION_WARN_FRACTION {
        warnings.push(format!(
            "{:.1}% of samples share their code with another sample; rank lists are unstable",
            100.0 * frac
        ));
    }
    if robust_min_inter == 0.0 {
        warnings.push("two class centers coincide".into());
    }
    Ok(ClassStats {
        centers,
        d_inter,
        d_intra,
        percentile: p,
        robust_min_inter,
        robust_max_intra,
        ratio,
        warnings,
    })
}

/// JSON form of [`ClassStats`]: centers printed as codes, `d_intra` as a
/// histogram indexed by distance.
#[derive(Clone, Debug, Serialize)]
pub struct ClassStatsReport {
    pub classes: usize,
    pub samples: usize,
    pub bits: usize,
    pub percentile: f64,
    pub centers: BTreeMap<Label, String>,
    pub d_inter: Vec<u32>,
    pub d_intra_histogram: Vec<usize>,
    pub min_inter: u32,
    pub max_intra: u32,
    pub robust_min_inter: f64,
    pub robust_max_intra: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub ratio: f64,
    pub bound_constant: u32,
    pub warnings: Vec<String>,
}

impl ClassStats {
    pub fn report(&self, samples: usize) -> ClassStatsReport {
        let bits = self.centers.values().next().map_or(0, BitCode::len);
        let mut hist = vec![0usize; bits + 1];
        for &d in &self.d_intra {
            hist[d as usize] += 1;
        }
        ClassStatsReport {
            classes: self.centers.len(),
            samples,
            bits,
            percentile: self.percentile.value(),
            centers: self.centers.iter().map(|(&l, c)| (l, c.to_string())).collect(),
            d_inter: self.d_inter.clone(),
            d_intra_histogram: hist,
            min_inter: self.d_inter.iter().copied().min().unwrap_or(0),
            max_intra: self.d_intra.iter().copied().max().unwrap_or(0),
            robust_min_inter: self.robust_min_inter,
            robust_max_intra: self.robust_max_intra,
            ratio: self.ratio,
            bound_constant: BOUND_CONSTANT,
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub same_class_pairs: usize,
    pub cross_class_pairs: usize,
    /// Cross-class pairs where `min D_inter - 2 max D_intra` is positive and
    /// therefore gives a non-trivial lower bound.
    pub cross_class_checked: usize,
    pub violations: usize,
    pub max_intra: u32,
    pub min_inter: u32,
}

/// Brute-force check of the triangle-inequality consequences with plain
/// min/max: same-class pairs lie within `2 max D_intra`, cross-class pairs at
/// least `min D_inter - 2 max D_intra` apart.
pub fn check_bound_inequalities(codes: &[BitCode], labels: &[LabelSet]) -> Result<InequalityReport> {
    let stats = class_stats(codes, labels, Percentile(100.0))?;
    let max_intra = stats.d_intra.iter().copied().max().unwrap_or(0);
    let min_inter = stats.d_inter.iter().copied().min().unwrap_or(0);
    let upper = BOUND_CONSTANT * max_intra;
    let lower = i64::from(min_inter) - i64::from(upper);
    let mut rep = InequalityReport {
        max_intra,
        min_inter,
        ..Default::default()
    };
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let d = codes[i].distance_unchecked(&codes[j]);
            for &a in labels[i].labels() {
                for &b in labels[j].labels() {
                    if a == b {
                        rep.same_class_pairs += 1;
                        rep.violations += usize::from(d > upper);
                    } else {
                        rep.cross_class_pairs += 1;
                        if lower > 0 {
                            rep.cross_class_checked += 1;
                            rep.violations += usize::from(i64::from(d) < lower);
                        }
                    }
                }
            }
        }
    }
    Ok(rep)
}

fn relevance_ratio(list: &RankList) -> Option<f64> {
    let max_tp = list.entries().iter().filter(|e| e.relevant).map(|e| e.distance).max()?;
    let min_fp = list.entries().iter().filter(|e| !e.relevant).map(|e| e.distance).min()?;
    Some(if min_fp == 0 {
        f64::INFINITY
    } else {
        f64::from(max_tp) / f64::from(min_fp)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RemarkReport {
    pub instances: usize,
    /// Single-bit moves applied: a farthest TP one bit closer, or a nearest
    /// FP one bit farther.
    pub perturbations: usize,
    /// Moves after which `max d(q,tp) / min d(q,fp)` strictly dropped.
    pub ratio_decreased: usize,
    /// Moves that increased the maximal mis-rank.
    pub counterexamples: usize,
}

impl RemarkReport {
    fn merge(&mut self, o: &RemarkReport) {
        self.instances += o.instances;
        self.perturbations += o.perturbations;
        self.ratio_decreased += o.ratio_decreased;
        self.counterexamples += o.counterexamples;
    }
}

/// Exhaustive monotone-perturbation check on one instance: every single-bit
/// move that brings a farthest true positive closer, or pushes a nearest
/// false positive away, must not increase the maximal mis-rank.
pub fn verify_remark_bounds(query: &BitCode, base: &[BitCode], relevant: &[bool]) -> Result<RemarkReport> {
    if query.len() > 10 || base.len() > 64 {
        return invalid("instance exceeds h <= 10, base <= 64");
    }
    let list = crate::ranking::build_rank_list(query, base, relevant)?;
    let mut rep = RemarkReport {
        instances: 1,
        ..Default::default()
    };
    let (Some(m_bar), Some(ratio)) = (max_mis_rank(&list), relevance_ratio(&list)) else {
        return Ok(rep);
    };
    let dists: Vec<u32> = base.iter().map(|b| query.distance_unchecked(b)).collect();
    let max_tp = (0..base.len()).filter(|&j| relevant[j]).map(|j| dists[j]).max().unwrap();
    let min_fp = (0..base.len()).filter(|&j| !relevant[j]).map(|j| dists[j]).min().unwrap();
    let mut moved = base.to_vec();
    for j in 0..base.len() {
        let movable = if relevant[j] {
            dists[j] == max_tp
        } else {
            dists[j] == min_fp
        };
        if !movable {
            continue;
        }
        for k in 0..query.len() {
            let differs = base[j].bit(k) != query.bit(k);
            // TPs move closer by flipping a differing bit, FPs move away by
            // flipping an agreeing one.
            if differs != relevant[j] {
                continue;
            }
            moved[j].flip(k);
            let after = crate::ranking::build_rank_list(query, &moved, relevant)?;
            rep.perturbations += 1;
            if relevance_ratio(&after).is_some_and(|r| r < ratio) {
                rep.ratio_decreased += 1;
            }
            if max_mis_rank(&after).is_some_and(|m| m > m_bar) {
                rep.counterexamples += 1;
            }
            moved[j].flip(k);
        }
    }
    Ok(rep)
}

/// Runs [`verify_remark_bounds`] on `trials` random instances of `n` samples
/// with `h`-bit codes.
pub fn verify_remark_trials(seed: u64, trials: usize, h: usize, n: usize) -> Result<RemarkReport> {
    use rayon::prelude::*;
    let reports = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, "remark", t as u64);
            let code = |r: &mut rand_chacha::ChaCha8Rng| {
                let bits: Vec<bool> = (0..h).map(|_| r.random()).collect();
                BitCode::from_bools(&bits)
            };
            let q = code(&mut r)?;
            let base = (0..n).map(|_| code(&mut r)).collect::<Result<Vec<_>>>()?;
            let rel: Vec<bool> = (0..n).map(|_| r.random()).collect();
            verify_remark_bounds(&q, &base, &rel)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = RemarkReport::default();
    for r in &reports {
        total.merge(r);
    }
    Ok(total)
}

fn check_extremes(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> Result<()> {
    if min_d_fp >= max_d_tp {
        return invalid(format!(
            "need min d(q,fp) = {min_d_fp} < max d(q,tp) = {max_d_tp}"
        ));
    }
    if n_tp < min_d_fp as usize + 1 || n_tp > max_d_tp as usize {
        return invalid(format!(
            "|TP| = {n_tp} outside {}..={max_d_tp} for gapless distances",
            min_d_fp + 1
        ));
    }
    Ok(())
}

/// Relevance flags of an arrangement with one sample per distance `0..=max_d_tp`:
/// TPs below `min_d_fp`, an FP at `min_d_fp`, the last TP at `max_d_tp`, and
/// the in-between slots given by `between`.
fn arrangement(min_d_fp: u32, between: &[bool]) -> Vec<bool> {
    let mut flags = vec![true; min_d_fp as usize];
    flags.push(false);
    flags.extend_from_slice(between);
    flags.push(true);
    flags
}

/// Every admissible arrangement for the given extremes and TP count.
pub fn admissible_arrangements(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> Result<Vec<Vec<bool>>> {
    check_extremes(min_d_fp, max_d_tp, n_tp)?;
    let slots = (max_d_tp - min_d_fp - 1) as usize;
    if slots > 20 {
        return invalid("too many in-between slots to enumerate");
    }
    let inner_tp = n_tp - min_d_fp as usize - 1;
    Ok((0u32..1 << slots)
        .filter(|m| m.count_ones() as usize == inner_tp)
        .map(|m| {
            let between: Vec<bool> = (0..slots).map(|k| m >> k & 1 == 1).collect();
            arrangement(min_d_fp, &between)
        })
        .collect())
}

fn extreme_ap(min_d_fp: u32, max_d_tp: u32, n_tp: usize, tps_first: bool) -> Result<(f64, RankList)> {
    check_extremes(min_d_fp, max_d_tp, n_tp)?;
    let slots = (max_d_tp - min_d_fp - 1) as usize;
    let inner_tp = n_tp - min_d_fp as usize - 1;
    let between: Vec<bool> = (0..slots)
        .map(|k| if tps_first { k < inner_tp } else { k >= slots - inner_tp })
        .collect();
    let list = RankList::from_relevance(&arrangement(min_d_fp, &between));
    Ok((average_precision(&list)?, list))
}

/// AP when every in-between TP ranks after every in-between FP.
pub fn worst_case_ap(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> Result<f64> {
    extreme_ap(min_d_fp, max_d_tp, n_tp, false).map(|(ap, _)| ap)
}

/// The worst-case arrangement itself.
pub fn worst_case_list(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> Result<RankList> {
    extreme_ap(min_d_fp, max_d_tp, n_tp, false).map(|(_, l)| l)
}

/// AP when every in-between TP ranks before every in-between FP.
pub fn best_case_ap(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> Result<f64> {
    extreme_ap(min_d_fp, max_d_tp, n_tp, true).map(|(ap, _)| ap)
}

/// The lowest-AP expression as printed alongside the tightness argument,
/// `min d(q,fp) - 1 + Σ_{i=1}^{|TP|} i / (max d(q,tp) - min d(q,fp) + i)`.
/// Kept only for comparison; it is not normalized by `|TP|`.
pub fn printed_lowest_ap(min_d_fp: u32, max_d_tp: u32, n_tp: usize) -> f64 {
    let gap = f64::from(max_d_tp) - f64::from(min_d_fp);
    f64::from(min_d_fp) - 1.0 + (1..=n_tp).map(|i| i as f64 / (gap + i as f64)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub min_d_fp: u32,
    pub max_d_tp: u32,
    pub n_tp: usize,
    pub worst_ap: f64,
    pub best_ap: f64,
    pub min_enumerated_ap: f64,
    pub printed_formula: f64,
    pub printed_matches: bool,
}

/// Worst/best AP over every admissible parameter triple with `max_d_tp <= max_len`.
pub fn tightness_sweep(max_len: u32) -> Result<Vec<TightnessRow>> {
    let mut rows = Vec::new();
    for max_d_tp in 1..=max_len {
        for min_d_fp in 0..max_d_tp {
            for n_tp in min_d_fp as usize + 1..=max_d_tp as usize {
                let worst = worst_case_ap(min_d_fp, max_d_tp, n_tp)?;
                let min_enum = admissible_arrangements(min_d_fp, max_d_tp, n_tp)?
                    .iter()
                    .map(|f| average_precision(&RankList::from_relevance(f)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                let printed = printed_lowest_ap(min_d_fp, max_d_tp, n_tp);
                rows.push(TightnessRow {
                    min_d_fp,
                    max_d_tp,
                    n_tp,
                    worst_ap: worst,
                    best_ap: best_case_ap(min_d_fp, max_d_tp, n_tp)?,
                    min_enumerated_ap: min_enum,
                    printed_formula: printed,
                    printed_matches: (printed - worst).abs() < 1e-9,
                });
            }
        }
    }
    Ok(rows)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return invalid("series differ in length");
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} points, need at least 3",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return invalid("series contain NaN");
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between the ratio and mAP columns of `history`.
pub fn bound_correlation(history: &[(f64, f64)]) -> Result<f64> {
    let (r, m): (Vec<f64>, Vec<f64>) = history.iter().copied().unzip();
    spearman(&r, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::index_to_code;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(signs: &[i8]) -> BitCode {
        BitCode::from_signs(signs).unwrap()
    }

    fn random_code(r: &mut ChaCha8Rng, h: usize) -> BitCode {
        let b: Vec<bool> = (0..h).map(|_| r.random()).collect();
        BitCode::from_bools(&b).unwrap()
    }

    #[test]
    fn center_examples() {
        let a = code(&[1, -1, 1]);
        assert_eq!(class_center(&[&a, &a]).unwrap(), a);
        let m = [code(&[1, 1]), code(&[1, -1]), code(&[1, 1])];
        assert_eq!(class_center(&m.iter().collect::<Vec<_>>()).unwrap(), code(&[1, 1]));
        let tie = [code(&[1, -1]), code(&[-1, -1])];
        assert_eq!(class_center(&tie.iter().collect::<Vec<_>>()).unwrap(), code(&[1, -1]));
        assert!(class_center(&[]).is_err());
    }

    #[test]
    fn center_minimizes_summed_distance() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for h in [3, 6, 9] {
            for _ in 0..20 {
                let n = r.random_range(1..8);
                let m: Vec<BitCode> = (0..n).map(|_| random_code(&mut r, h)).collect();
                let refs: Vec<&BitCode> = m.iter().collect();
                let cost = |c: &BitCode| m.iter().map(|x| c.hamming(x).unwrap()).sum::<u32>();
                let best = (0..1usize << h)
                    .map(|i| cost(&index_to_code(i, h).unwrap()))
                    .min()
                    .unwrap();
                assert_eq!(cost(&class_center(&refs).unwrap()), best);
            }
        }
    }

    #[test]
    fn percentile_matches_numpy() {
        // numpy.percentile([1, 2, 3, 4], 25) == 1.75
        assert_eq!(percentile(&[4, 1, 3, 2], 25.0).unwrap(), 1.75);
        assert_eq!(percentile(&[4, 1, 3, 2], 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&[4, 1, 3, 2], 0.0).unwrap(), 1.0);
        assert!((percentile(&[0, 10], 99.9).unwrap() - 9.99).abs() < 1e-12);
    }

    #[test]
    fn collapsed_classes_give_infinite_ratio() {
        let a = BitCode::negative(8).unwrap();
        let b = a.complement();
        let codes = vec![a.clone(), a, b.clone(), b];
        let labels: Vec<LabelSet> = [0, 0, 1, 1].map(LabelSet::single).to_vec();
        let s = class_stats(&codes, &labels, Percentile::DEFAULT).unwrap();
        assert_eq!(s.d_inter, vec![8]);
        assert_eq!(s.robust_max_intra, 0.0);
        assert!(s.ratio.is_infinite());
        let json = serde_json::to_value(s.report(4)).unwrap();
        assert_eq!(json["ratio"], "+inf");
    }

    #[test]
    fn stats_match_reference_loops() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let codes: Vec<BitCode> = (0..15).map(|_| random_code(&mut r, 8)).collect();
        let labels: Vec<LabelSet> = (0..15).map(|i| LabelSet::single(i as u32 / 5)).collect();
        let s = class_stats(&codes, &labels, Percentile::new(100.0).unwrap()).unwrap();
        let mut expected_intra = Vec::new();
        for (i, c) in codes.iter().enumerate() {
            expected_intra.push(c.hamming(&s.centers[&(i as u32 / 5)]).unwrap());
        }
        assert_eq!(s.d_intra, expected_intra);
        let cs: Vec<&BitCode> = s.centers.values().collect();
        let expected_inter = vec![
            cs[0].hamming(cs[1]).unwrap(),
            cs[0].hamming(cs[2]).unwrap(),
            cs[1].hamming(cs[2]).unwrap(),
        ];
        assert_eq!(s.d_inter, expected_inter);
        assert_eq!(s.robust_min_inter, *expected_inter.iter().min().unwrap() as f64);
        assert_eq!(s.robust_max_intra, *expected_intra.iter().max().unwrap() as f64);
    }

    #[test]
    fn single_class_is_undefined() {
        let c = vec![BitCode::negative(4).unwrap()];
        assert!(matches!(
            class_stats(&c, &[LabelSet::single(0)], Percentile::DEFAULT),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn collision_warning() {
        let a = BitCode::negative(4).unwrap();
        let codes = vec![a.clone(), a.clone(), a.clone(), a.complement()];
        let labels: Vec<LabelSet> = [0, 0, 1, 1].map(LabelSet::single).to_vec();
        assert!(!class_stats(&codes, &labels, Percentile::DEFAULT).unwrap().warnings.is_empty());
    }

    #[test]
    fn all_tps_first_has_zero_mis_rank() {
        let q = BitCode::negative(6).unwrap();
        let base = vec![q.clone(), q.flipped(0), q.flipped(0).flipped(1), q.complement()];
        let rep = verify_remark_bounds(&q, &base, &[true, true, false, false]).unwrap();
        let list = crate::ranking::build_rank_list(&q, &base, &[true, true, false, false]).unwrap();
        assert_eq!(max_mis_rank(&list), Some(0));
        assert_eq!(rep.counterexamples, 0);
        assert!(rep.perturbations > 0);
    }

    #[test]
    fn remark_direction_holds_on_random_instances() {
        let rep = verify_remark_trials(3, 300, 10, 30).unwrap();
        assert_eq!(rep.instances, 300);
        assert_eq!(rep.counterexamples, 0);
        assert!(rep.ratio_decreased > 0);
    }

    #[test]
    fn worst_case_examples() {
        // n_tp = 1: the single TP is the last one, after the FP at distance 0.
        assert_eq!(worst_case_ap(0, 3, 1).unwrap(), 1.0 / 4.0);
        assert_eq!(
            worst_case_ap(3, 4, 4).unwrap(),
            best_case_ap(3, 4, 4).unwrap()
        );
        // TP TP FP FP TP TP: (1 + 1 + 3/5 + 4/6) / 4
        let expected = (1.0 + 1.0 + 3.0 / 5.0 + 4.0 / 6.0) / 4.0;
        assert!((worst_case_ap(2, 5, 4).unwrap() - expected).abs() < 1e-15);
        assert!(worst_case_ap(3, 3, 4).is_err());
        assert!(worst_case_ap(2, 5, 6).is_err());
        assert!(worst_case_ap(2, 5, 2).is_err());
    }

    #[test]
    fn worst_case_is_minimal_with_maximal_mis_rank() {
        for row in tightness_sweep(9).unwrap() {
            assert!(row.worst_ap <= row.min_enumerated_ap + 1e-15, "{row:?}");
            assert!((row.worst_ap - row.min_enumerated_ap).abs() < 1e-15);
            assert!(row.best_ap >= row.worst_ap);
            let worst = worst_case_list(row.min_d_fp, row.max_d_tp, row.n_tp).unwrap();
            let max_m = admissible_arrangements(row.min_d_fp, row.max_d_tp, row.n_tp)
                .unwrap()
                .iter()
                .map(|f| max_mis_rank(&RankList::from_relevance(f)).unwrap())
                .max()
                .unwrap();
            assert_eq!(max_mis_rank(&worst), Some(max_m));
        }
    }

    #[test]
    fn inequalities_hold_on_random_sets() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let h = r.random_range(4..=10);
            let classes = r.random_range(2..=5);
            let centers: Vec<BitCode> = (0..classes).map(|_| random_code(&mut r, h)).collect();
            let mut codes = Vec::new();
            let mut labels = Vec::new();
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..r.random_range(1..6) {
                    let mut x = center.clone();
                    for k in 0..h {
                        if r.random_bool(0.1) {
                            x.flip(k);
                        }
                    }
                    codes.push(x);
                    labels.push(LabelSet::single(c as u32));
                }
            }
            let rep = check_bound_inequalities(&codes, &labels).unwrap();
            assert_eq!(rep.violations, 0);
        }
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 90.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            spearman(&x, &[1.0; 4]),
            Err(Error::UndefinedCorrelation(_))
        ));
        // scipy.stats.spearmanr([1,2,2,3],[1,3,2,4]) == 0.9486832980505138
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.948_683_298_050_513_8).abs() < 1e-12);
        assert!(bound_correlation(&[(f64::INFINITY, 1.0), (2.0, 0.5), (3.0, 0.7)]).is_ok());
    }

    proptest! {
        #[test]
        fn pairwise_bounds_from_intra_radius(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let h = r.random_range(2..=10);
            let n = r.random_range(2..20);
            let codes: Vec<BitCode> = (0..n).map(|_| random_code(&mut r, h)).collect();
            let labels: Vec<LabelSet> = (0..n).map(|i| LabelSet::single((i % 3) as u32)).collect();
            if let Ok(rep) = check_bound_inequalities(&codes, &labels) {
                prop_assert_eq!(rep.violations, 0);
            }
        }
    }
}
