//! Acquisition: the discriminator-minimum rule, the random and entropy
//! baselines, and the k-center and k-means pickers used for the initial pool.
//!
//! Ties are broken by ascending dataset index everywhere.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Architecture, Head, ParamSet, Tensor, VaeParams};
use crate::pool::PoolState;
use crate::rng::Rng;

/// Examples evaluated per forward pass when scoring.
pub const SCORE_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcquisitionScore {
    pub index: usize,
    pub score: f64,
}

/// Strategy used to grow the labeled pool after each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Adroit,
    Random,
    Entropy,
    KCenter,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Adroit, Strategy::Random, Strategy::Entropy, Strategy::KCenter];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adroit => "adroit",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::KCenter => "kcenter",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// How the initial labeled pool is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    KCenter,
    KMeans,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 3] = [InitStrategy::Random, InitStrategy::KCenter, InitStrategy::KMeans];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::KCenter => "kcenter",
            InitStrategy::KMeans => "kmeans",
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown init strategy {s:?}")))
    }
}

fn unlabeled_chunks(dataset: &Dataset, pool: &PoolState) -> Result<Vec<(Vec<usize>, Tensor)>> {
    if pool.unlabeled().is_empty() {
        return Err(Error::state("no unlabeled examples to score"));
    }
    if pool.len() != dataset.len() {
        return Err(Error::invalid("pool does not cover the dataset"));
    }
    let shape = dataset.shape();
    Ok(pool
        .unlabeled()
        .chunks(SCORE_BATCH)
        .map(|idx| {
            let mut data = Vec::with_capacity(idx.len() * shape.numel());
            for &i in idx {
                data.extend_from_slice(dataset.image(i));
            }
            let t = Tensor::new(vec![idx.len(), shape.channels, shape.height, shape.width], data);
            (idx.to_vec(), t)
        })
        .collect())
}

/// Discriminator probability of each unlabeled example's encoder mean.
pub fn score_adroit(
    dataset: &Dataset,
    pool: &PoolState,
    arch: &Architecture,
    vae: &VaeParams,
    disc: &ParamSet,
) -> Result<Vec<AcquisitionScore>> {
    let mut out = Vec::with_capacity(pool.unlabeled().len());
    for (idx, images) in unlabeled_chunks(dataset, pool)? {
        let (mu, _) = arch.encode(&vae.encoder, &images)?;
        let p = arch.discriminate(disc, &mu)?;
        out.extend(idx.into_iter().zip(p).map(|(index, score)| AcquisitionScore { index, score }));
    }
    Ok(out)
}

fn by_score_then_index(a: &AcquisitionScore, b: &AcquisitionScore) -> Ordering {
    a.score.total_cmp(&b.score).then(a.index.cmp(&b.index))
}

/// The `b` lowest-scoring indices, in ascending score order.
pub fn select_min_b(scores: &[AcquisitionScore], b: usize) -> Result<Vec<usize>> {
    if b > scores.len() {
        return Err(Error::invalid(format!("budget {b} exceeds {} candidates", scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for index {}", s.index)));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut sorted = scores.to_vec();
    if b < sorted.len() {
        sorted.select_nth_unstable_by(b - 1, by_score_then_index);
        sorted.truncate(b);
    }
    sorted.sort_by(by_score_then_index);
    Ok(sorted.into_iter().map(|s| s.index).collect())
}

/// A uniform `b`-subset of the unlabeled pool, sorted.
pub fn select_random(pool: &PoolState, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let u = pool.unlabeled();
    if b > u.len() {
        return Err(Error::invalid(format!("budget {b} exceeds {} unlabeled", u.len())));
    }
    let mut out: Vec<usize> = rand::seq::index::sample(rng, u.len(), b)
        .into_iter()
        .map(|i| u[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Natural-log entropy of the softmax of `logits`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let lse = crate::nets::tape::log_sum_exp(logits);
    logits
        .iter()
        .map(|&l| {
            let lp = l - lse;
            -lp.exp() * lp
        })
        .sum()
}

/// Predictive entropy of the target label head on each unlabeled example.
pub fn entropy_scores(
    dataset: &Dataset,
    pool: &PoolState,
    arch: &Architecture,
    target: &ParamSet,
) -> Result<Vec<AcquisitionScore>> {
    let mut out = Vec::with_capacity(pool.unlabeled().len());
    for (idx, images) in unlabeled_chunks(dataset, pool)? {
        let logits = arch.target_forward(target, &images, Head::Label)?;
        for (r, index) in idx.into_iter().enumerate() {
            out.push(AcquisitionScore {
                index,
                score: softmax_entropy(logits.row(r)),
            });
        }
    }
    Ok(out)
}

/// The `b` highest-entropy unlabeled indices.
pub fn select_entropy(
    dataset: &Dataset,
    pool: &PoolState,
    arch: &Architecture,
    target: &ParamSet,
    b: usize,
) -> Result<Vec<usize>> {
    let negated: Vec<AcquisitionScore> = entropy_scores(dataset, pool, arch, target)?
        .into_iter()
        .map(|s| AcquisitionScore {
            index: s.index,
            score: -s.score,
        })
        .collect();
    select_min_b(&negated, b)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center: repeatedly adds the point farthest from its nearest
/// center. Candidates are all indices not in `initial`; with no initial
/// centers the first pick is the lowest candidate index. Returns picks in order.
pub fn kcenter_greedy(features: &[Vec<f64>], initial: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = features.len();
    let mut is_center = vec![false; n];
    for &i in initial {
        if i >= n {
            return Err(Error::invalid(format!("center {i} out of range for {n} points")));
        }
        is_center[i] = true;
    }
    let candidates = is_center.iter().filter(|&&c| !c).count();
    if k > candidates {
        return Err(Error::invalid(format!("k = {k} exceeds {candidates} candidates")));
    }
    let mut nearest = vec![f64::INFINITY; n];
    let update = |nearest: &mut [f64], c: usize| {
        for (j, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(&features[j], &features[c]));
        }
    };
    for &c in initial {
        update(&mut nearest, c);
    }
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| !is_center[j]) {
            if best.is_none_or(|b| nearest[j] > nearest[b]) {
                best = Some(j);
            }
        }
        let c = best.expect("k <= candidates");
        is_center[c] = true;
        picks.push(c);
        update(&mut nearest, c);
    }
    Ok(picks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the total centroid shift falls below this fraction of the total centroid norm.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(features: &[Vec<f64>], m: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![features[first].clone()];
    let mut d2: Vec<f64> = features.iter().map(|x| sq_dist(x, &features[first])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = Some(i);
                    break;
                }
                r -= d;
            }
            // rounding can run past the end; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|&c| !c).expect("m <= n")
        };
        chosen[pick] = true;
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&features[i], &features[pick]));
        }
        centroids.push(features[pick].clone());
    }
    centroids
}

fn lloyd(features: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, opts: KMeansOptions) -> KMeans {
    let dim = features[0].len();
    let mut assignment = vec![0; features.len()];
    for _ in 0..opts.max_iter {
        for (a, x) in assignment.iter_mut().zip(features) {
            *a = nearest_centroid(x, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, x) in assignment.iter().zip(features) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        let mut norm = 0.0;
        for ((c, s), &k) in centroids.iter_mut().zip(sums).zip(&counts) {
            if k > 0 {
                let next: Vec<f64> = s.into_iter().map(|v| v / k as f64).collect();
                shift += sq_dist(c, &next).sqrt();
                *c = next;
            }
            norm += c.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        if shift <= opts.tol * norm.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let mut wcss = 0.0;
    for (a, x) in assignment.iter_mut().zip(features) {
        let (j, d) = nearest_centroid(x, &centroids);
        *a = j;
        wcss += d;
    }
    KMeans {
        centroids,
        assignment,
        wcss,
    }
}

/// Best of `opts.restarts` k-means++ seeded Lloyd runs.
pub fn kmeans(features: &[Vec<f64>], m: usize, rng: &mut Rng, opts: KMeansOptions) -> Result<KMeans> {
    if m == 0 || m > features.len() {
        return Err(Error::invalid(format!("{m} clusters for {} points", features.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("features differ in length"));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd(features, plus_plus_seeds(features, m, rng), opts);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `m` distinct indices: for each centroid in turn, the nearest point not yet taken.
pub fn kmeans_init(features: &[Vec<f64>], m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let km = kmeans(features, m, rng, KMeansOptions::default())?;
    let mut taken = vec![false; features.len()];
    let mut out = Vec::with_capacity(m);
    for c in &km.centroids {
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in features.iter().enumerate().filter(|(i, _)| !taken[*i]) {
            let d = sq_dist(x, c);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("m <= n");
        taken[i] = true;
        out.push(i);
    }
    out.sort_unstable();
    Ok(out)
}
