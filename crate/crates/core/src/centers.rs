//! Pre-defined, pairwise-far class centers.
//!
//! [`hadamard_centers`] takes rows of a Sylvester Hadamard matrix `H` and then
//! of `-H`. When that does not apply, [`random_maxmin_centers`] runs
//! independent restarts of a random draw followed by greedy single-bit-flip
//! local search on the minimum pairwise distance.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codefile;
use crate::codes::{index_to_code, BitCode};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMethod {
    Hadamard,
    RandomMaxmin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub restarts: usize,
    /// Restart whose result was kept.
    pub chosen_restart: usize,
    /// Best minimum distance among the initial random draws.
    pub best_random_min: u32,
    pub flips: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CenterSet {
    centers: Vec<BitCode>,
    min_pairwise: u32,
    method: CenterMethod,
    search: Option<SearchStats>,
}

/// Minimum pairwise distance; `h` for a single center.
pub fn min_pairwise_distance(centers: &[BitCode]) -> u32 {
    let h = centers.first().map_or(0, |c| c.len() as u32);
    let mut best = h;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.min(centers[i].distance_unchecked(&centers[j]));
        }
    }
    best
}

impl CenterSet {
    fn build(centers: Vec<BitCode>, method: CenterMethod, search: Option<SearchStats>) -> Result<Self> {
        let min_pairwise = min_pairwise_distance(&centers);
        if centers.len() > 1 && min_pairwise == 0 {
            return Err(Error::InvalidState("duplicate centers".into()));
        }
        Ok(Self {
            centers,
            min_pairwise,
            method,
            search,
        })
    }

    pub fn centers(&self) -> &[BitCode] {
        &self.centers
    }

    pub fn min_pairwise(&self) -> u32 {
        self.min_pairwise
    }

    pub fn method(&self) -> CenterMethod {
        self.method
    }

    pub fn search(&self) -> Option<&SearchStats> {
        self.search.as_ref()
    }

    pub fn bits(&self) -> usize {
        self.centers[0].len()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sidecar(&self) -> CenterSidecar {
        CenterSidecar {
            classes: self.len(),
            bits: self.bits(),
            method: self.method,
            min_pairwise: self.min_pairwise,
            search: self.search.clone(),
        }
    }

    /// Writes the codes as HBC1 and the sidecar next to them (see
    /// [`sidecar_path`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        codefile::save(path, self.bits(), &self.centers)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok(())
    }

    /// Reads codes and, if present, the sidecar. Without a sidecar the method
    /// is taken to be random-maxmin. `min_pairwise` is always recomputed.
    pub fn load(path: &Path) -> Result<Self> {
        let (_, centers) = codefile::load(path)?;
        if centers.is_empty() {
            return Err(Error::Format("center file holds no codes".into()));
        }
        let side = sidecar_path(path);
        let (method, search) = if side.exists() {
            let s: CenterSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
            (s.method, s.search)
        } else {
            (CenterMethod::RandomMaxmin, None)
        };
        Self::build(centers, method, search)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterSidecar {
    pub classes: usize,
    pub bits: usize,
    pub method: CenterMethod,
    pub min_pairwise: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub search: Option<SearchStats>,
}

/// `centers.hbc` → `centers.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Row `i` of the `h × h` Sylvester Hadamard matrix, `+1` where
/// `popcount(i & j)` is even.
pub fn hadamard_row(i: usize, h: usize) -> BitCode {
    let bits: Vec<bool> = (0..h).map(|j| (i & j).count_ones() % 2 == 0).collect();
    BitCode::from_bools(&bits).expect("h >= 1")
}

pub fn hadamard_centers(num_classes: usize, h: usize) -> Result<CenterSet> {
    if num_classes == 0 {
        return Err(Error::InvalidInput("need at least one class".into()));
    }
    if !h.is_power_of_two() {
        return Err(Error::NotApplicable(format!("{h} bits is not a power of two")));
    }
    if num_classes > 2 * h {
        return Err(Error::NotApplicable(format!(
            "{num_classes} classes exceed the {} rows of H and -H",
            2 * h
        )));
    }
    let centers = (0..num_classes)
        .map(|c| {
            let row = hadamard_row(c % h, h);
            if c < h {
                row
            } else {
                row.complement()
            }
        })
        .collect();
    CenterSet::build(centers, CenterMethod::Hadamard, None)
}

/// Histogram-backed objective: `(min distance, pairs at that distance)`,
/// larger min and then fewer pairs at the min being better.
struct Search {
    centers: Vec<BitCode>,
    dist: Vec<Vec<u32>>,
    hist: Vec<usize>,
}

impl Search {
    fn new(centers: Vec<BitCode>) -> Self {
        let n = centers.len();
        let h = centers[0].len();
        let mut dist = vec![vec![0u32; n]; n];
        let mut hist = vec![0usize; h + 1];
        for i in 0..n {
            for j in i + 1..n {
                let d = centers[i].distance_unchecked(&centers[j]);
                dist[i][j] = d;
                dist[j][i] = d;
                hist[d as usize] += 1;
            }
        }
        Self { centers, dist, hist }
    }

    fn score_of(hist: &[usize]) -> (u32, std::cmp::Reverse<usize>) {
        let (d, &c) = hist.iter().enumerate().find(|(_, &c)| c > 0).expect("at least one pair");
        (d as u32, std::cmp::Reverse(c))
    }

    fn score(&self) -> (u32, std::cmp::Reverse<usize>) {
        Self::score_of(&self.hist)
    }

    /// Score after flipping bit `k` of center `i`, histogram restored after.
    fn try_flip(&mut self, i: usize, k: usize) -> (u32, std::cmp::Reverse<usize>) {
        self.apply_hist(i, k, true);
        let s = self.score();
        self.apply_hist(i, k, false);
        s
    }

    fn new_distance(&self, i: usize, j: usize, k: usize) -> u32 {
        let d = self.dist[i][j];
        if self.centers[i].bit(k) == self.centers[j].bit(k) {
            d + 1
        } else {
            d - 1
        }
    }

    fn apply_hist(&mut self, i: usize, k: usize, forward: bool) {
        for j in 0..self.centers.len() {
            if j == i {
                continue;
            }
            let (old, new) = (self.dist[i][j] as usize, self.new_distance(i, j, k) as usize);
            let (from, to) = if forward { (old, new) } else { (new, old) };
            self.hist[from] -= 1;
            self.hist[to] += 1;
        }
    }

    fn flip(&mut self, i: usize, k: usize) {
        self.apply_hist(i, k, true);
        for j in 0..self.centers.len() {
            if j != i {
                let d = self.new_distance(i, j, k);
                self.dist[i][j] = d;
                self.dist[j][i] = d;
            }
        }
        self.centers[i].flip(k);
    }

    /// First-improvement passes until no single flip helps.
    fn local_search(&mut self, max_passes: usize) -> usize {
        let h = self.centers[0].len();
        let mut flips = 0;
        for _ in 0..max_passes {
            let mut improved = false;
            for i in 0..self.centers.len() {
                for k in 0..h {
                    let current = self.score();
                    if self.try_flip(i, k) > current {
                        self.flip(i, k);
                        flips += 1;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        flips
    }
}

fn random_distinct(num_classes: usize, h: usize, r: &mut impl Rng) -> Vec<BitCode> {
    if h <= 20 && num_classes * 2 > 1 << h {
        return sample(r, 1 << h, num_classes)
            .into_iter()
            .map(|i| index_to_code(i, h).expect("index below 2^h"))
            .collect();
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(num_classes);
    while out.len() < num_classes {
        let bits: Vec<bool> = (0..h).map(|_| r.random()).collect();
        let c = BitCode::from_bools(&bits).expect("h >= 1");
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

const MAX_PASSES: usize = 1000;

/// Best of `restarts` random draws, each improved by greedy bit flips.
pub fn random_maxmin_centers(num_classes: usize, h: usize, restarts: usize, seed: u64) -> Result<CenterSet> {
    if num_classes == 0 || h == 0 {
        return Err(Error::InvalidInput("need at least one class and one bit".into()));
    }
    if h < usize::BITS as usize && num_classes > 1 << h {
        return Err(Error::Infeasible(format!(
            "{num_classes} distinct centers do not fit in {h} bits"
        )));
    }
    let restarts = restarts.max(1);
    if num_classes == 1 {
        let mut r = rng::stream(seed, "centers", 0);
        let c = random_distinct(1, h, &mut r);
        let stats = SearchStats {
            restarts,
            chosen_restart: 0,
            best_random_min: h as u32,
            flips: 0,
        };
        return CenterSet::build(c, CenterMethod::RandomMaxmin, Some(stats));
    }
    let runs: Vec<_> = (0..restarts)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, "centers", t as u64);
            let mut s = Search::new(random_distinct(num_classes, h, &mut r));
            let initial = s.score();
            let flips = s.local_search(MAX_PASSES);
            (s.score(), initial.0, flips, s.centers)
        })
        .collect();
    let best_random_min = runs.iter().map(|r| r.1).max().expect("restarts >= 1");
    let mut chosen = 0;
    for (t, run) in runs.iter().enumerate() {
        if run.0 > runs[chosen].0 {
            chosen = t;
        }
    }
    let flips = runs.iter().map(|r| r.2).sum();
    let (_, _, _, centers) = runs.into_iter().nth(chosen).expect("chosen < restarts");
    let stats = SearchStats {
        restarts,
        chosen_restart: chosen,
        best_random_min,
        flips,
    };
    CenterSet::build(centers, CenterMethod::RandomMaxmin, Some(stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterChoice {
    Auto,
    Hadamard,
    RandomMaxmin,
}

/// `Auto` tries Hadamard first and falls back to random max-min search.
pub fn generate_centers(
    choice: CenterChoice,
    num_classes: usize,
    h: usize,
    restarts: usize,
    seed: u64,
) -> Result<CenterSet> {
    match choice {
        CenterChoice::Hadamard => hadamard_centers(num_classes, h),
        CenterChoice::RandomMaxmin => random_maxmin_centers(num_classes, h, restarts, seed),
        CenterChoice::Auto => match hadamard_centers(num_classes, h) {
            Err(Error::NotApplicable(_)) => random_maxmin_centers(num_classes, h, restarts, seed),
            other => other,
        },
    }
}
