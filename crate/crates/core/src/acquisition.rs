//! BALD scoring and the BALD / PowerBALD / Random selectors.
//!
//! Pixel-level BALD is the plug-in mutual-information estimate from a
//! Monte-Carlo stack: entropy of the mean prediction minus the mean entropy
//! of the individual predictions, in nats. Image scores aggregate the pixel
//! map either by its mean or by the sum of its `K` largest values.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{validate_stack, ProbabilityStack, ScoreMap, NORMALIZATION_TOL};

pub type ImageId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AcquisitionKind {
    Bald,
    PowerBald,
    Random,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 3] = [
        AcquisitionKind::Bald,
        AcquisitionKind::PowerBald,
        AcquisitionKind::Random,
    ];

    pub fn needs_inference(self) -> bool {
        !matches!(self, AcquisitionKind::Random)
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AcquisitionKind::Bald => "BALD",
            AcquisitionKind::PowerBald => "PowerBALD",
            AcquisitionKind::Random => "Random",
        })
    }
}

impl FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bald" => Ok(AcquisitionKind::Bald),
            "powerbald" => Ok(AcquisitionKind::PowerBald),
            "random" => Ok(AcquisitionKind::Random),
            _ => Err(Error::InvalidArgument(format!(
                "acquisition must be BALD, PowerBALD or Random, got {s:?}"
            ))),
        }
    }
}

/// How a pixel score map becomes one image score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    /// Sum of the `K` largest pixel scores.
    TopK(usize),
}

impl Aggregation {
    /// Top-K with `K` = 1% of the pixels, at least one.
    pub fn top_percent(pixels: usize) -> Self {
        Aggregation::TopK(pixels.div_ceil(100).max(1))
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mean" {
            return Ok(Aggregation::Mean);
        }
        s.strip_prefix("topk:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(Aggregation::TopK)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("aggregation must be mean or topk:<K>, got {s:?}"))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// PowerBALD temperature.
    pub temperature: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl AcquisitionSpec {
    pub fn new(kind: AcquisitionKind) -> Self {
        AcquisitionSpec {
            kind,
            temperature: 1.0,
            aggregation: Aggregation::Mean,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.aggregation == Aggregation::TopK(0) {
            return Err(Error::InvalidArgument("top-K needs K >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    pub id: ImageId,
    /// Nats, never negative.
    pub score: f64,
    pub aggregation: Aggregation,
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "distribution has a negative or non-finite entry: {dist:?}"
        )));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidArgument(format!(
            "distribution sums to {sum}, not 1"
        )));
    }
    Ok(entropy_unchecked(dist.iter().copied()))
}

#[inline]
fn entropy_unchecked(dist: impl Iterator<Item = f64>) -> f64 {
    -dist.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Per-pixel BALD: `H(mean_s p_s) - mean_s H(p_s)`.
pub fn bald_map(stack: &ProbabilityStack) -> Result<ScoreMap> {
    validate_stack(stack).into_result()?;
    let (s_n, c_n, h, w) = (stack.samples(), stack.classes(), stack.height(), stack.width());
    let mut out = Vec::with_capacity(h * w);
    let mut mean = vec![0.0; c_n];
    let mut dist = vec![0.0; c_n];
    for row in 0..h {
        for col in 0..w {
            mean.fill(0.0);
            let mut cond = 0.0;
            for s in 0..s_n {
                for (c, d) in dist.iter_mut().enumerate() {
                    *d = stack.get(s, c, row, col);
                }
                cond += entropy_unchecked(dist.iter().copied());
                mean.iter_mut().zip(&dist).for_each(|(m, d)| *m += d);
            }
            let inv = 1.0 / s_n as f64;
            let marginal = entropy_unchecked(mean.iter().map(|m| m * inv));
            out.push(marginal - cond * inv);
        }
    }
    ScoreMap::new(h, w, out)
}

pub fn aggregate(id: ImageId, map: &ScoreMap, mode: Aggregation) -> Result<ImageScore> {
    let n = map.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty score map".into()));
    }
    let score = match mode {
        Aggregation::Mean => map.values().sum::<f64>() / n as f64,
        Aggregation::TopK(k) => {
            if k == 0 || k > n {
                return Err(Error::InvalidArgument(format!(
                    "top-K with K = {k} on a map of {n} pixels"
                )));
            }
            let mut v: Vec<f64> = map.values().collect();
            v.sort_unstable_by(|a, b| b.total_cmp(a));
            v[..k].iter().sum()
        }
    };
    Ok(ImageScore {
        id,
        score,
        aggregation: mode,
    })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} images from {n}"
        )));
    }
    Ok(())
}

fn check_distinct(scores: &[ImageScore]) -> Result<()> {
    let mut ids: Vec<ImageId> = scores.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    match ids.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::DuplicateImage(w[0])),
        None => Ok(()),
    }
}

/// The `k` highest scores, ties broken by ascending id.
pub fn select_bald(scores: &[ImageScore], k: usize) -> Result<Vec<ImageId>> {
    check_k(k, scores.len())?;
    check_distinct(scores)?;
    let mut ranked: Vec<&ImageScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(ranked[..k].iter().map(|s| s.id).collect())
}

/// First-draw probabilities `score^(1/T) / Σ score^(1/T)` over `scores`.
pub fn powerbald_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; scores.len()];
    }
    let raw: Vec<f64> = scores
        .iter()
        .map(|&s| if s > 0.0 { (s / max).powf(1.0 / temperature) } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// Sequential sampling without replacement with PowerBALD weights.
///
/// Weights are renormalised over the remaining pool at every draw. When
/// fewer than `k` scores are positive, every positive-score image is taken
/// and the rest is filled uniformly from the zero-score images.
pub fn select_powerbald(
    scores: &[ImageScore],
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<ImageId>> {
    check_k(k, scores.len())?;
    check_distinct(scores)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let mut rng = seed::derived_rng(seed, &[seed::stream::SELECTION]);
    let mut remaining: Vec<&ImageScore> = scores.iter().filter(|s| s.score > 0.0).collect();
    let mut zero: Vec<ImageId> = scores.iter().filter(|s| !(s.score > 0.0)).map(|s| s.id).collect();
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k && !remaining.is_empty() {
        let values: Vec<f64> = remaining.iter().map(|s| s.score).collect();
        let weights = powerbald_weights(&values, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = Some(i);
                break;
            }
        }
        // rounding can leave `acc` a hair below 1
        let pick = pick.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).unwrap());
        chosen.push(remaining.remove(pick).id);
    }
    if chosen.len() < k {
        let missing = k - chosen.len();
        log::warn!(
            "PowerBALD: only {} positive scores for {k} picks; filling {missing} uniformly",
            chosen.len()
        );
        zero.sort_unstable();
        let mut fill_rng = seed::derived_rng(seed, &[seed::stream::FALLBACK]);
        chosen.extend(
            index::sample(&mut fill_rng, zero.len(), missing)
                .into_iter()
                .map(|i| zero[i]),
        );
    }
    Ok(chosen)
}

/// Uniform sample of `k` ids without replacement; depends only on the set of
/// ids and the seed, not on their order.
pub fn select_random(pool: &[ImageId], k: usize, seed: u64) -> Result<Vec<ImageId>> {
    check_k(k, pool.len())?;
    let mut sorted = pool.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateImage(w[0]));
    }
    let mut rng = seed::derived_rng(seed, &[seed::stream::SELECTION]);
    Ok(index::sample(&mut rng, sorted.len(), k)
        .into_iter()
        .map(|i| sorted[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scores(v: &[(ImageId, f64)]) -> Vec<ImageScore> {
        v.iter()
            .map(|&(id, score)| ImageScore {
                id,
                score,
                aggregation: Aggregation::Mean,
            })
            .collect()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325083).abs() < 1e-6);
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn bald_two_sample_fixture() {
        let stack = ProbabilityStack::new(2, 2, 1, 1, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let map = bald_map(&stack).unwrap();
        // ln 2 - H(0.9, 0.1)
        assert!((map.get(0, 0) - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn identical_slices_score_zero() {
        // (class, pixel) layout: pixels (0.2,0.8), (0.6,0.4), (0.5,0.5)
        let slice = vec![0.2, 0.6, 0.5, 0.8, 0.4, 0.5];
        let stack = ProbabilityStack::new(3, 2, 1, 3, slice.repeat(3)).unwrap();
        assert!(bald_map(&stack).unwrap().values().all(|v| v <= 1e-7));
        let single = ProbabilityStack::new(1, 2, 1, 3, slice).unwrap();
        assert!(bald_map(&single).unwrap().values().all(|v| v == 0.0));
        let broken = ProbabilityStack::new(1, 2, 1, 1, vec![0.5, 0.3]).unwrap();
        assert!(matches!(bald_map(&broken), Err(Error::InvalidStack(_))));
    }

    #[test]
    fn aggregate_examples() {
        let map = ScoreMap::new(2, 2, vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let top2 = aggregate(0, &map, Aggregation::TopK(2)).unwrap().score;
        assert!((top2 - 0.7).abs() < 1e-15);
        let mean = aggregate(0, &map, Aggregation::Mean).unwrap().score;
        let all = aggregate(0, &map, Aggregation::TopK(4)).unwrap().score;
        assert!((all - 4.0 * mean).abs() < 1e-15);
        let constant = ScoreMap::new(3, 1, vec![0.25; 3]).unwrap();
        assert_eq!(aggregate(0, &constant, Aggregation::Mean).unwrap().score, 0.25);
        assert!(aggregate(0, &map, Aggregation::TopK(5)).is_err());
    }

    #[test]
    fn aggregation_parses() {
        assert_eq!("mean".parse::<Aggregation>().unwrap(), Aggregation::Mean);
        assert_eq!("topk:41".parse::<Aggregation>().unwrap(), Aggregation::TopK(41));
        assert!("topk:0".parse::<Aggregation>().is_err());
        assert_eq!(Aggregation::top_percent(4096), Aggregation::TopK(41));
    }

    #[test]
    fn bald_selection() {
        let s = scores(&[(0, 3.0), (1, 1.0), (2, 2.0)]);
        assert_eq!(select_bald(&s, 2).unwrap(), vec![0, 2]);
        let tied = scores(&[(5, 1.0), (3, 1.0), (9, 1.0)]);
        assert_eq!(select_bald(&tied, 2).unwrap(), vec![3, 5]);
        assert_eq!(select_bald(&s, 3).unwrap().len(), 3);
        assert!(select_bald(&s, 4).is_err());
    }

    #[test]
    fn powerbald_first_draw_weights() {
        let w = powerbald_weights(&[2.0, 1.0, 1.0], 1.0);
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn powerbald_low_temperature_is_greedy() {
        let s = scores(&[(0, 10.0), (1, 1.0), (2, 1.0)]);
        let hits = (0..100)
            .filter(|&seed| select_powerbald(&s, 1, 0.01, seed).unwrap() == vec![0])
            .count();
        assert!(hits >= 99);
    }

    #[test]
    fn powerbald_is_seeded() {
        let s = scores(&[(0, 0.5), (1, 0.2), (2, 0.9), (3, 0.1), (4, 0.4)]);
        assert_eq!(
            select_powerbald(&s, 3, 1.0, 42).unwrap(),
            select_powerbald(&s, 3, 1.0, 42).unwrap()
        );
        assert!(select_powerbald(&s, 2, 0.0, 1).is_err());
    }

    #[test]
    fn powerbald_falls_back_on_zero_scores() {
        let s = scores(&[(0, 0.0), (1, 0.3), (2, 0.0), (3, 0.0)]);
        let picked = select_powerbald(&s, 3, 1.0, 7).unwrap();
        assert_eq!(picked[0], 1);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        let none = scores(&[(0, 0.0), (1, 0.0)]);
        assert_eq!(select_powerbald(&none, 2, 1.0, 7).unwrap().len(), 2);
    }

    #[test]
    fn random_selection() {
        let pool: Vec<ImageId> = (10..20).collect();
        let mut all = select_random(&pool, 10, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, pool);
        assert_eq!(select_random(&pool, 4, 8).unwrap(), select_random(&pool, 4, 8).unwrap());
        let mut reversed = pool.clone();
        reversed.reverse();
        assert_eq!(select_random(&pool, 4, 8).unwrap(), select_random(&reversed, 4, 8).unwrap());
        assert!(select_random(&pool, 11, 0).is_err());
    }

    #[test]
    fn random_selection_is_uniform() {
        let pool: Vec<ImageId> = (0..5).collect();
        let mut counts = [0usize; 5];
        for seed in 0..10_000 {
            counts[select_random(&pool, 1, seed).unwrap()[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() <= 0.02, "{counts:?}");
        }
    }

    fn random_stack(seed: u64) -> ProbabilityStack {
        let mut rng = crate::seed::rng(seed);
        let s = rng.gen_range(1..=20);
        let c = [2, 3, 5][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let mut samples = Vec::with_capacity(s);
        for _ in 0..s {
            let mut block = vec![0.0; c * h * w];
            for p in 0..h * w {
                // sharpen some pixels so near-deterministic cases appear too
                let power = rng.gen_range(0.5..8.0);
                let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powf(power)).collect();
                let z: f64 = raw.iter().sum::<f64>().max(1e-300);
                for (ci, r) in raw.iter().enumerate() {
                    block[ci * h * w + p] = r / z;
                }
            }
            samples.push(block);
        }
        ProbabilityStack::from_samples(c, h, w, samples).unwrap()
    }

    proptest! {
        #[test]
        fn bald_is_bounded(seed in any::<u64>()) {
            let stack = random_stack(seed);
            let map = bald_map(&stack).unwrap();
            let bound = (stack.classes() as f64).ln() + 1e-9;
            for &v in map.raw() {
                prop_assert!(v >= -1e-9 && v <= bound, "value {}", v);
            }
        }

        #[test]
        fn powerbald_is_scale_invariant(
            raw in prop::collection::vec(0.001f64..2.0, 3..12),
            exp in -4i32..5,
            seed in any::<u64>(),
        ) {
            let s: Vec<ImageScore> = raw.iter().enumerate()
                .map(|(i, &v)| ImageScore { id: i as u32, score: v, aggregation: Aggregation::Mean })
                .collect();
            let scaled: Vec<ImageScore> = s.iter()
                .map(|x| ImageScore { score: x.score * 2f64.powi(exp), ..*x })
                .collect();
            let k = raw.len() / 2;
            prop_assert_eq!(
                select_powerbald(&s, k, 1.0, seed).unwrap(),
                select_powerbald(&scaled, k, 1.0, seed).unwrap()
            );
        }

        #[test]
        fn bald_selection_invariant_under_monotone_transform(
            raw in prop::collection::vec(0.0f64..1.0, 1..15),
            k_frac in 0.0f64..1.0,
        ) {
            let s: Vec<ImageScore> = raw.iter().enumerate()
                .map(|(i, &v)| ImageScore { id: i as u32, score: v, aggregation: Aggregation::Mean })
                .collect();
            let t: Vec<ImageScore> = s.iter()
                .map(|x| ImageScore { score: (3.0 * x.score).exp() + 1.0, ..*x })
                .collect();
            let k = (k_frac * raw.len() as f64) as usize;
            prop_assert_eq!(select_bald(&s, k).unwrap(), select_bald(&t, k).unwrap());
        }

        #[test]
        fn selectors_return_distinct_pool_members(
            raw in prop::collection::vec(0.0f64..1.0, 1..15),
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let s: Vec<ImageScore> = raw.iter().enumerate()
                .map(|(i, &v)| ImageScore { id: 100 + i as u32, score: v, aggregation: Aggregation::Mean })
                .collect();
            let ids: Vec<ImageId> = s.iter().map(|x| x.id).collect();
            let k = (k_frac * raw.len() as f64) as usize;
            for picked in [
                select_bald(&s, k).unwrap(),
                select_powerbald(&s, k, 1.0, seed).unwrap(),
                select_random(&ids, k, seed).unwrap(),
            ] {
                prop_assert_eq!(picked.len(), k);
                let mut d = picked.clone();
                d.sort_unstable();
                d.dedup();
                prop_assert_eq!(d.len(), k);
                prop_assert!(picked.iter().all(|id| ids.contains(id)));
            }
        }
    }
}
