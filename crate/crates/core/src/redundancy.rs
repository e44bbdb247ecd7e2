//! Attention redundancy: mean pairwise Jensen–Shannon divergence between the
//! rows of a layer's attention maps, traced over layers and sampler steps.
//!
//! A low score means query rows attend in near-identical ways, i.e. the
//! layer's query/key interaction is redundant.

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::f64::consts::LN_2;

/// Pairs per reduction chunk. Chunks are summed serially and the chunk sums
/// are then added in order, so the result does not depend on thread count.
const CHUNK: usize = 4096;

/// A probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Accepts non-negative finite entries whose sum is within 1e-6 of 1 and
    /// renormalizes them exactly onto the simplex.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Domain(format!("probability {p} is not a finite non-negative value")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Distribution {
            probs: probs.into_iter().map(|p| p / s).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("distribution lengths differ: {} vs {}", p.len(), q.len())));
    }
    Ok(())
}

/// `Σ p·(ln p − ln q)` with `0·ln 0 = 0`; `+∞` when `p > 0 = q`.
pub fn kl_slice(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a.ln() - b.ln());
        }
    }
    s
}

/// `½[KL(p‖m) + KL(q‖m)]`, `m = ½(p + q)`. Exactly symmetric in `p`, `q`.
pub fn js_slice(p: &[f64], q: &[f64]) -> f64 {
    let (mut kp, mut kq) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let lm = if m > 0.0 { m.ln() } else { 0.0 };
        if a > 0.0 {
            kp += a * (a.ln() - lm);
        }
        if b > 0.0 {
            kq += b * (b.ln() - lm);
        }
    }
    (0.5 * (kp + kq)).max(0.0)
}

pub fn kl_divergence(p1: &Distribution, p2: &Distribution) -> Result<f64> {
    same_len(&p1.probs, &p2.probs)?;
    Ok(kl_slice(&p1.probs, &p2.probs))
}

pub fn js_divergence(p1: &Distribution, p2: &Distribution) -> Result<f64> {
    same_len(&p1.probs, &p2.probs)?;
    Ok(js_slice(&p1.probs, &p2.probs))
}

/// Random subset of row pairs, used when a layer has too many tokens to
/// visit every pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairSampling {
    /// Maximum number of pairs evaluated per head.
    pub cap: usize,
    pub seed: u64,
}

fn pair_count(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Maps a linear index over `{(i, j) : i < j < n}` (row-major) to its pair.
struct PairIndex {
    /// `offsets[i]` = index of pair `(i, i+1)`.
    offsets: Vec<usize>,
    n: usize,
}

impl PairIndex {
    fn new(n: usize) -> Self {
        let mut offsets = Vec::with_capacity(n);
        let mut acc = 0;
        for i in 0..n {
            offsets.push(acc);
            acc += n - 1 - i;
        }
        PairIndex { offsets, n }
    }

    fn pair(&self, k: usize) -> (usize, usize) {
        let i = self.offsets.partition_point(|&o| o <= k) - 1;
        (i, i + 1 + (k - self.offsets[i]))
    }

    /// Pairs `start..end` in order, without repeated searching.
    fn range(&self, start: usize, end: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (mut i, mut j) = if start < end { self.pair(start) } else { (0, 0) };
        (start..end).map(move |_| {
            let out = (i, j);
            j += 1;
            if j == self.n {
                i += 1;
                j = i + 1;
            }
            out
        })
    }
}

fn validate_heads(heads: &[Tensor]) -> Result<(usize, usize)> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Domain("redundancy_score needs at least one head".into()))?;
    first.expect_rank(2, "redundancy_score")?;
    let (n, k) = (first.rows(), first.cols());
    if n < 2 {
        return Err(Error::Domain(format!("redundancy_score needs at least 2 rows, got {n}")));
    }
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::dim(format!(
                "attention heads differ in shape: {:?} vs {:?}",
                h.shape(),
                first.shape()
            )));
        }
        for i in 0..n {
            let row = h.row(i);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Domain(format!("attention row {i} is not a distribution (sum {s})")));
            }
        }
    }
    Ok((n, k))
}

fn chunked_sum(len: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
    let chunks = len.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(len)))
        .collect();
    partial.iter().sum()
}

/// `S = 2/(M·N·(N−1)) · Σ_m Σ_{i<j} JSD(A_i, A_j)` over the rows of each
/// head's map. With `sampling`, at most `cap` pairs per head are drawn
/// without replacement and the sum is scaled by the inverse fraction.
pub fn redundancy_score(heads: &[Tensor], sampling: Option<PairSampling>) -> Result<f64> {
    let (n, _) = validate_heads(heads)?;
    let total = pair_count(n);
    let index = PairIndex::new(n);
    let mut sum = 0.0;
    match sampling {
        None => {
            for a in heads {
                sum += chunked_sum(total, |s, e| {
                    index.range(s, e).map(|(i, j)| js_slice(a.row(i), a.row(j))).sum::<f64>()
                });
            }
        }
        Some(PairSampling { cap, seed }) => {
            if cap == 0 {
                return Err(Error::config("pair sampling cap must be positive"));
            }
            let take = cap.min(total);
            for (m, a) in heads.iter().enumerate() {
                let picks: Vec<usize> = if take == total {
                    (0..total).collect()
                } else {
                    let mut r = rng::named(seed, "pairs", m as u64);
                    let mut v = index::sample(&mut r, total, take).into_vec();
                    v.sort_unstable();
                    v
                };
                let s = chunked_sum(take, |s, e| {
                    picks[s..e]
                        .iter()
                        .map(|&k| {
                            let (i, j) = index.pair(k);
                            js_slice(a.row(i), a.row(j))
                        })
                        .sum::<f64>()
                });
                sum += s * (total as f64 / take as f64);
            }
        }
    }
    Ok(sum * 2.0 / (heads.len() as f64 * n as f64 * (n - 1) as f64))
}

/// Score of one layer's maps; mediated maps are composed to `N×N` first.
pub fn layer_redundancy(maps: &AttentionMaps, sampling: Option<PairSampling>) -> Result<f64> {
    match maps {
        AttentionMaps::Full(a) => redundancy_score(a, sampling),
        AttentionMaps::Mediated { .. } => redundancy_score(&maps.effective()?, sampling),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TraceMeta {
    pub model_id: String,
    pub heads: usize,
}

/// Mean redundancy per (layer, step), averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RedundancyTrace {
    pub meta: TraceMeta,
    pub layers: usize,
    pub steps: usize,
    pub samples: usize,
    /// Layer-major: `scores[l * steps + t]`.
    scores: Vec<f64>,
}

impl RedundancyTrace {
    /// Averages `scores[sample][step][layer]` over samples.
    pub fn from_scores<I>(samples: I, meta: TraceMeta) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<Vec<f64>>>,
    {
        let mut acc: Option<(usize, usize, Vec<f64>)> = None;
        let mut count = 0;
        for (s, per_step) in samples.into_iter().enumerate() {
            let steps = per_step.len();
            let layers = per_step.first().map_or(0, Vec::len);
            if steps == 0 || layers == 0 {
                return Err(Error::usage(format!("sample {s} has no steps or no layers")));
            }
            if let Some(t) = per_step.iter().position(|l| l.len() != layers) {
                return Err(Error::usage(format!(
                    "sample {s} step {t} has {} layers, expected {layers}",
                    per_step[t].len()
                )));
            }
            let (l0, t0, sums) = acc.get_or_insert_with(|| (layers, steps, vec![0.0; layers * steps]));
            if (*l0, *t0) != (layers, steps) {
                return Err(Error::usage(format!(
                    "sample {s} has {steps} steps × {layers} layers, expected {t0} × {l0}"
                )));
            }
            for (t, row) in per_step.iter().enumerate() {
                for (l, &v) in row.iter().enumerate() {
                    sums[l * steps + t] += v;
                }
            }
            count += 1;
        }
        let (layers, steps, sums) = acc.ok_or_else(|| Error::usage("trace needs at least one sample"))?;
        let trace = RedundancyTrace {
            meta,
            layers,
            steps,
            samples: count,
            scores: sums.into_iter().map(|s| s / count as f64).collect(),
        };
        if let Some(bad) = trace.scores.iter().find(|s| !(**s >= 0.0 && **s <= LN_2 + 1e-12)) {
            return Err(Error::Domain(format!("redundancy score {bad} outside [0, ln 2]")));
        }
        Ok(trace)
    }

    pub fn get(&self, layer: usize, step: usize) -> f64 {
        self.scores[layer * self.steps + step]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.scores[layer * self.steps..(layer + 1) * self.steps]
    }

    /// Per-step average over layers.
    pub fn mean_by_step(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|t| (0..self.layers).map(|l| self.get(l, t)).sum::<f64>() / self.layers as f64)
            .collect()
    }

    /// Least-squares slope of [`Self::mean_by_step`] against step index;
    /// positive when scores rise (redundancy falls) along the trajectory.
    pub fn trend_slope(&self) -> f64 {
        let y = self.mean_by_step();
        let n = y.len() as f64;
        if y.len() < 2 {
            return 0.0;
        }
        let mx = (n - 1.0) / 2.0;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (t, v) in y.iter().enumerate() {
            let dx = t as f64 - mx;
            sxy += dx * (v - my);
            sxx += dx * dx;
        }
        sxy / sxx
    }

    /// `layer,step,score,samples,heads`, one row per cell, layer-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,step,score,samples,heads\n");
        for l in 0..self.layers {
            for t in 0..self.steps {
                writeln!(out, "{l},{t},{},{},{}", self.get(l, t), self.samples, self.meta.heads).unwrap();
            }
        }
        out
    }
}

/// Streams samples of per-step, per-layer maps into a trace. Each sample is
/// scored and dropped before the next is pulled.
pub fn trace_over_steps<I>(samples: I, meta: TraceMeta, sampling: Option<PairSampling>) -> Result<RedundancyTrace>
where
    I: IntoIterator<Item = Vec<Vec<AttentionMaps>>>,
{
    let mut err = None;
    let scored = samples.into_iter().map_while(|steps| {
        let r: Result<Vec<Vec<f64>>> = steps
            .iter()
            .map(|layers| layers.iter().map(|m| layer_redundancy(m, sampling)).collect())
            .collect();
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                err = Some(e);
                None
            }
        }
    });
    let trace = RedundancyTrace::from_scores(scored, meta);
    match err {
        Some(e) => Err(e),
        None => trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn random_stochastic(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row: Vec<f64> = (0..cols).map(|_| r.gen_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|x| x / s));
        }
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn kl_reference_values() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&p, &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.143841036225890).abs() <= 1e-9, "{v}");
        assert_eq!(kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&p, &dist(&[1.0])).is_err());
    }

    #[test]
    fn js_reference_values() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let v = js_divergence(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert!((v - LN_2).abs() <= 1e-12);
        let v = js_divergence(&p, &dist(&[1.0, 0.0])).unwrap();
        assert!((v - 0.215761554338836).abs() <= 1e-9, "{v}");
        assert!(js_divergence(&p, &dist(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn distribution_renormalizes_or_rejects() {
        let d = dist(&[0.5, 0.5 + 5e-7]);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    #[test]
    fn score_reference_cases() {
        let same = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.2, 0.8], vec![0.2, 0.8]]).unwrap();
        assert_eq!(redundancy_score(&[same], None).unwrap(), 0.0);
        let disjoint = Tensor::eye(2);
        assert!((redundancy_score(&[disjoint], None).unwrap() - LN_2).abs() <= 1e-12);
        assert!(matches!(redundancy_score(&[Tensor::ones(&[1, 1])], None), Err(Error::Domain(_))));
    }

    #[test]
    fn score_matches_pair_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = random_stochastic(3, 4, &mut r);
        let mut s = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                s += js_slice(a.row(i), a.row(j));
            }
        }
        let expect = 2.0 / (3.0 * 2.0) * s;
        assert!((redundancy_score(&[a], None).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn pair_index_enumerates_all_pairs() {
        let idx = PairIndex::new(6);
        let all: Vec<_> = idx.range(0, 15).collect();
        let expect: Vec<_> = (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j))).collect();
        assert_eq!(all, expect);
        for (k, p) in expect.iter().enumerate() {
            assert_eq!(idx.pair(k), *p);
            assert_eq!(idx.range(k, k + 1).next().unwrap(), *p);
        }
    }

    #[test]
    fn full_cap_sampling_is_bit_identical() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let heads = vec![random_stochastic(90, 90, &mut r), random_stochastic(90, 90, &mut r)];
        let exact = redundancy_score(&heads, None).unwrap();
        let cap = pair_count(90);
        let sampled = redundancy_score(&heads, Some(PairSampling { cap, seed: 9 })).unwrap();
        assert_eq!(exact.to_bits(), sampled.to_bits());
        let approx = redundancy_score(&heads, Some(PairSampling { cap: 1500, seed: 9 })).unwrap();
        assert_eq!(approx, redundancy_score(&heads, Some(PairSampling { cap: 1500, seed: 9 })).unwrap());
        assert!((approx - exact).abs() < 0.05 * exact, "{approx} vs {exact}");
    }

    #[test]
    fn mediated_maps_are_composed() {
        let qt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let tk = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5]]).unwrap();
        let maps = AttentionMaps::Mediated {
            qt: vec![qt],
            tk: vec![tk],
        };
        let composed = maps.effective().unwrap();
        assert_eq!(layer_redundancy(&maps, None).unwrap(), redundancy_score(&composed, None).unwrap());
    }

    #[test]
    fn trace_averages_samples() {
        let meta = TraceMeta {
            model_id: "m".into(),
            heads: 1,
        };
        let t = RedundancyTrace::from_scores(vec![vec![vec![0.1], vec![0.3]]], meta.clone()).unwrap();
        assert_eq!(t.layer(0), &[0.1, 0.3]);
        let t = RedundancyTrace::from_scores(vec![vec![vec![0.1]], vec![vec![0.4]]], meta.clone()).unwrap();
        assert!((t.get(0, 0) - 0.25).abs() <= 1e-15);
        assert_eq!(t.samples, 2);
        let bad = RedundancyTrace::from_scores(vec![vec![vec![0.1], vec![0.2, 0.3]]], meta.clone());
        assert!(matches!(bad, Err(Error::Usage(_))));
        let bad = RedundancyTrace::from_scores(vec![vec![vec![0.1]], vec![vec![0.1, 0.2]]], meta);
        assert!(matches!(bad, Err(Error::Usage(_))));
    }

    #[test]
    fn trace_rises_from_identical_to_one_hot_rows() {
        let n = 4;
        let steps = 5;
        let maps_at = |t: usize| {
            let a = t as f64 / (steps - 1) as f64;
            let data = (0..n)
                .flat_map(|i| (0..n).map(move |j| (1.0 - a) / n as f64 + if i == j { a } else { 0.0 }))
                .collect();
            vec![AttentionMaps::Full(vec![Tensor::new(vec![n, n], data).unwrap()])]
        };
        let sample: Vec<_> = (0..steps).map(maps_at).collect();
        let t = trace_over_steps(vec![sample], TraceMeta::default(), None).unwrap();
        let s = t.layer(0);
        assert_eq!(s[0], 0.0);
        assert!(s.windows(2).all(|w| w[1] > w[0]), "{s:?}");
        assert!((s[steps - 1] - LN_2).abs() <= 1e-12);
        assert!(t.trend_slope() > 0.0);
        let csv = t.to_csv();
        assert!(csv.starts_with("layer,step,score,samples,heads\n0,0,"));
        assert_eq!(csv.lines().count(), steps + 1);
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(seed in any::<u64>(), k in 1usize..12) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stochastic(2, k, &mut r);
            let mut p = a.row(0).to_vec();
            if k > 2 {
                p[r.gen_range(0..k)] = 0.0;
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
            }
            let q = a.row(1);
            let (pq, qp) = (js_slice(&p, q), js_slice(q, &p));
            prop_assert_eq!(pq.to_bits(), qp.to_bits());
            prop_assert!((0.0..=LN_2 + 1e-12).contains(&pq));
            prop_assert!(js_slice(&p, &p) <= 1e-12);
        }

        #[test]
        fn score_invariant_to_key_permutation(seed in any::<u64>(), n in 2usize..10) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stochastic(n, n, &mut r);
            let perm = index::sample(&mut r, n, n).into_vec();
            let data = (0..n).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| a.at(i, j)).collect();
            let b = Tensor::new(vec![n, n], data).unwrap();
            let (sa, sb) = (redundancy_score(&[a], None).unwrap(), redundancy_score(&[b], None).unwrap());
            prop_assert!((sa - sb).abs() <= 1e-12);
        }
    }
}
