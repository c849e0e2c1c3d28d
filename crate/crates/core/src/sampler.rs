//! Training tuple construction.
//!
//! Quadruplet mode restricts negatives to the two classes around the anchor
//! (three consecutive assembly steps) and emits every anchor twice, once per
//! negative orientation: `2·n·m` tuples per epoch instead of the full
//! combinatorial space. Triplet mode is the baseline with one negative drawn
//! from any other class (`n·m` tuples).

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_anomaly_sample, AnomalySample, RandomErasingParams};
use crate::error::{ConfigIssues, Error, Result};
use crate::labeled::LabeledImage;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleMode {
    Quadruplet,
    Triplet,
}

impl std::fmt::Display for TupleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TupleMode::Quadruplet => "quadruplet",
            TupleMode::Triplet => "triplet",
        })
    }
}

impl std::str::FromStr for TupleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadruplet" => Ok(TupleMode::Quadruplet),
            "triplet" => Ok(TupleMode::Triplet),
            _ => Err(Error::Domain(format!("unknown mode {s:?} (quadruplet|triplet)"))),
        }
    }
}

/// Which classes may provide the image that becomes the anomaly sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalySourcePolicy {
    /// Any class other than the anchor's.
    #[default]
    UniformOther,
    /// Any class other than the anchor's and the tuple's negative classes.
    ExcludeNeighborhood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n: usize,
    pub m: usize,
    pub mode: TupleMode,
    pub anomaly_source: AnomalySourcePolicy,
    pub erasing: RandomErasingParams,
    pub epoch_seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        let min_n = match (self.mode, self.anomaly_source) {
            (TupleMode::Quadruplet, AnomalySourcePolicy::ExcludeNeighborhood) => 4,
            (TupleMode::Quadruplet, _) | (TupleMode::Triplet, AnomalySourcePolicy::ExcludeNeighborhood) => 3,
            (TupleMode::Triplet, _) => 2,
        };
        issues.check(self.n >= min_n, || {
            format!(
                "sampler: {} mode with {:?} needs n >= {min_n} classes (got {})",
                self.mode, self.anomaly_source, self.n
            )
        });
        issues.check(self.m >= 2, || format!("sampler: m must be >= 2 (got {})", self.m));
        if let Err(Error::Config(e)) = self.erasing.validate() {
            e.into_iter().for_each(|s| issues.push(s));
        }
        issues.into_result()
    }

    fn check_dataset(&self, dataset: &[Vec<LabeledImage>]) -> Result<()> {
        self.validate()?;
        let mut issues = ConfigIssues::new();
        issues.check(dataset.len() == self.n, || {
            format!("sampler: dataset has {} classes, config says {}", dataset.len(), self.n)
        });
        for (c, imgs) in dataset.iter().enumerate() {
            issues.check(imgs.len() >= 2, || format!("sampler: class {} has fewer than 2 images", c + 1));
            issues.check(imgs.len() >= self.m, || {
                format!("sampler: class {} has {} images, m = {}", c + 1, imgs.len(), self.m)
            });
        }
        issues.into_result()
    }
}

fn perm(m: usize, k: usize) -> BigUint {
    (m - k + 1..=m).fold(BigUint::from(1u32), |acc, v| acc * BigUint::from(v))
}

/// Size of the exhaustive tuple space:
/// `nC1·mP2·(n−1)C1·mP1` for triplets, times `(n−2)C1·mP1` for quadruplets.
pub fn full_combination_count(n: usize, m: usize, mode: TupleMode) -> Result<BigUint> {
    let min_n = match mode {
        TupleMode::Quadruplet => 3,
        TupleMode::Triplet => 2,
    };
    if n < min_n || m < 2 {
        return Err(Error::Domain(format!(
            "{mode} combinations need n >= {min_n} and m >= 2 (got n={n}, m={m})"
        )));
    }
    let big = |v: usize| BigUint::from(v);
    let triplet = big(n) * perm(m, 2) * big(n - 1) * perm(m, 1);
    Ok(match mode {
        TupleMode::Triplet => triplet,
        TupleMode::Quadruplet => triplet * big(n - 2) * perm(m, 1),
    })
}

/// The two negative classes of a 0-based anchor class: predecessor and
/// successor inside the sequence, or the two nearest classes on the only
/// available side at either end.
pub fn neighbor_classes(class: usize, n: usize) -> (usize, usize) {
    assert!(n >= 3 && class < n);
    if class == 0 {
        (1, 2)
    } else if class == n - 1 {
        (n - 2, n - 3)
    } else {
        (class - 1, class + 1)
    }
}

/// Anchor, positive, two adjacent-class negatives and an anomaly.
#[derive(Debug, Clone)]
pub struct QuadrupletTuple<'a> {
    pub anchor: &'a LabeledImage,
    pub positive: &'a LabeledImage,
    pub negative1: &'a LabeledImage,
    pub negative2: &'a LabeledImage,
    pub anomaly: AnomalySample,
    /// The clean image the anomaly was erased from.
    pub anomaly_source: &'a LabeledImage,
    /// 1-based steps of (anchor, positive, negative1, negative2, anomaly source).
    pub classes: [usize; 5],
}

#[derive(Debug, Clone)]
pub struct TripletTuple<'a> {
    pub anchor: &'a LabeledImage,
    pub positive: &'a LabeledImage,
    pub negative: &'a LabeledImage,
    pub anomaly: AnomalySample,
    pub anomaly_source: &'a LabeledImage,
    /// 1-based steps of (anchor, positive, negative, anomaly source).
    pub classes: [usize; 4],
}

#[derive(Debug, Clone)]
pub enum TrainingTuple<'a> {
    Quadruplet(QuadrupletTuple<'a>),
    Triplet(TripletTuple<'a>),
}

impl<'a> TrainingTuple<'a> {
    /// Branch inputs in loss order; the anomaly is last.
    pub fn images(&self) -> Vec<&LabeledImage> {
        match self {
            TrainingTuple::Quadruplet(t) => vec![t.anchor, t.positive, t.negative1, t.negative2, &t.anomaly.image],
            TrainingTuple::Triplet(t) => vec![t.anchor, t.positive, t.negative, &t.anomaly.image],
        }
    }

    pub fn anchor(&self) -> &'a LabeledImage {
        match self {
            TrainingTuple::Quadruplet(t) => t.anchor,
            TrainingTuple::Triplet(t) => t.anchor,
        }
    }

    pub fn anomaly(&self) -> &AnomalySample {
        match self {
            TrainingTuple::Quadruplet(t) => &t.anomaly,
            TrainingTuple::Triplet(t) => &t.anomaly,
        }
    }

    /// 1-based anchor class and negative classes.
    pub fn anchor_and_negative_classes(&self) -> (usize, Vec<usize>) {
        match self {
            TrainingTuple::Quadruplet(t) => (t.classes[0], vec![t.classes[2], t.classes[3]]),
            TrainingTuple::Triplet(t) => (t.classes[0], vec![t.classes[2]]),
        }
    }

    pub fn as_quadruplet(&self) -> Option<&QuadrupletTuple<'a>> {
        match self {
            TrainingTuple::Quadruplet(t) => Some(t),
            TrainingTuple::Triplet(_) => None,
        }
    }

    pub fn as_triplet(&self) -> Option<&TripletTuple<'a>> {
        match self {
            TrainingTuple::Triplet(t) => Some(t),
            TrainingTuple::Quadruplet(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Assignment {
    class: usize,
    anchor: usize,
    swapped: bool,
}

/// One epoch of tuples. The anchor assignment and order are fixed at
/// construction; the free draws (positive, negative images, anomaly) of the
/// `i`-th tuple come from an rng stream dedicated to `i`, so tuples can be
/// materialized lazily, in any order, or concurrently.
pub struct EpochTuples<'a> {
    config: SamplerConfig,
    dataset: &'a [Vec<LabeledImage>],
    order: Vec<Assignment>,
}

impl<'a> EpochTuples<'a> {
    fn new(config: &SamplerConfig, dataset: &'a [Vec<LabeledImage>]) -> Result<Self> {
        config.check_dataset(dataset)?;
        let orientations: &[bool] = match config.mode {
            TupleMode::Quadruplet => &[false, true],
            TupleMode::Triplet => &[false],
        };
        let mut order = Vec::with_capacity(config.n * config.m * orientations.len());
        for class in 0..config.n {
            for anchor in 0..config.m {
                for &swapped in orientations {
                    order.push(Assignment { class, anchor, swapped });
                }
            }
        }
        order.shuffle(&mut stream_rng(config.epoch_seed, 0));
        Ok(Self {
            config: config.clone(),
            dataset,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn mode(&self) -> TupleMode {
        self.config.mode
    }

    fn class_images(&self, class: usize) -> &'a [LabeledImage] {
        &self.dataset[class][..self.config.m]
    }

    fn anomaly_class(&self, rng: &mut impl Rng, anchor: usize, negatives: &[usize]) -> usize {
        let n = self.config.n;
        let allowed: Vec<usize> = (0..n)
            .filter(|&c| {
                c != anchor
                    && (self.config.anomaly_source == AnomalySourcePolicy::UniformOther || !negatives.contains(&c))
            })
            .collect();
        allowed[rng.gen_range(0..allowed.len())]
    }

    /// Materializes the `i`-th tuple of the epoch.
    pub fn get(&self, i: usize) -> Result<TrainingTuple<'a>> {
        let a = *self
            .order
            .get(i)
            .ok_or_else(|| Error::Domain(format!("tuple index {i} out of range")))?;
        let mut rng = stream_rng(self.config.epoch_seed, i as u64 + 1);
        let m = self.config.m;
        let own = self.class_images(a.class);
        let mut pos = rng.gen_range(0..m - 1);
        if pos >= a.anchor {
            pos += 1;
        }
        let anchor = &own[a.anchor];
        let positive = &own[pos];
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, class: usize| {
            let imgs = self.class_images(class);
            &imgs[rng.gen_range(0..imgs.len())]
        };
        match self.config.mode {
            TupleMode::Quadruplet => {
                let (pred, succ) = neighbor_classes(a.class, self.config.n);
                let (c1, c2) = if a.swapped { (succ, pred) } else { (pred, succ) };
                let negative1 = pick(&mut rng, c1);
                let negative2 = pick(&mut rng, c2);
                let src_class = self.anomaly_class(&mut rng, a.class, &[c1, c2]);
                let source = pick(&mut rng, src_class);
                let anomaly = make_anomaly_sample(source, &self.config.erasing, &mut rng)?;
                Ok(TrainingTuple::Quadruplet(QuadrupletTuple {
                    anchor,
                    positive,
                    negative1,
                    negative2,
                    anomaly,
                    anomaly_source: source,
                    classes: [a.class + 1, a.class + 1, c1 + 1, c2 + 1, src_class + 1],
                }))
            }
            TupleMode::Triplet => {
                let mut neg_class = rng.gen_range(0..self.config.n - 1);
                if neg_class >= a.class {
                    neg_class += 1;
                }
                let negative = pick(&mut rng, neg_class);
                let src_class = self.anomaly_class(&mut rng, a.class, &[neg_class]);
                let source = pick(&mut rng, src_class);
                let anomaly = make_anomaly_sample(source, &self.config.erasing, &mut rng)?;
                Ok(TrainingTuple::Triplet(TripletTuple {
                    anchor,
                    positive,
                    negative,
                    anomaly,
                    anomaly_source: source,
                    classes: [a.class + 1, a.class + 1, neg_class + 1, src_class + 1],
                }))
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TrainingTuple<'a>>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Quadruplet epoch: exactly `2·n·m` tuples.
pub fn reduced_epoch_tuples<'a>(config: &SamplerConfig, dataset: &'a [Vec<LabeledImage>]) -> Result<EpochTuples<'a>> {
    if config.mode != TupleMode::Quadruplet {
        return Err(Error::config("reduced_epoch_tuples requires quadruplet mode"));
    }
    EpochTuples::new(config, dataset)
}

/// Triplet epoch: exactly `n·m` tuples, one per anchor image.
pub fn triplet_epoch_tuples<'a>(config: &SamplerConfig, dataset: &'a [Vec<LabeledImage>]) -> Result<EpochTuples<'a>> {
    if config.mode != TupleMode::Triplet {
        return Err(Error::config("triplet_epoch_tuples requires triplet mode"));
    }
    EpochTuples::new(config, dataset)
}

/// Dispatches on `config.mode`.
pub fn epoch_tuples<'a>(config: &SamplerConfig, dataset: &'a [Vec<LabeledImage>]) -> Result<EpochTuples<'a>> {
    EpochTuples::new(config, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeled::Label;
    use std::collections::BTreeMap;

    fn dataset(n: usize, m: usize) -> Vec<Vec<LabeledImage>> {
        (1..=n)
            .map(|c| {
                (0..m)
                    .map(|j| LabeledImage::filled(format!("c{c}-{j}"), Label::Step(c as u16), 8, 8, c as f32 / n as f32))
                    .collect()
            })
            .collect()
    }

    fn config(n: usize, m: usize, mode: TupleMode, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n,
            m,
            mode,
            anomaly_source: AnomalySourcePolicy::UniformOther,
            erasing: RandomErasingParams::default(),
            epoch_seed: seed,
        }
    }

    #[test]
    fn combination_counts() {
        assert_eq!(full_combination_count(8, 40, TupleMode::Triplet).unwrap(), BigUint::from(3_494_400u64));
        assert_eq!(
            full_combination_count(8, 40, TupleMode::Quadruplet).unwrap(),
            BigUint::from(838_656_000u64)
        );
        assert_eq!(full_combination_count(3, 2, TupleMode::Triplet).unwrap(), BigUint::from(24u32));
        assert!(full_combination_count(2, 5, TupleMode::Quadruplet).is_err());
        assert!(full_combination_count(4, 1, TupleMode::Triplet).is_err());
        // no overflow far beyond u64
        let huge = full_combination_count(10_000, 100_000, TupleMode::Quadruplet).unwrap();
        assert!(huge.bits() > 64);
    }

    #[test]
    fn boundary_neighbors() {
        assert_eq!(neighbor_classes(0, 8), (1, 2));
        assert_eq!(neighbor_classes(7, 8), (6, 5));
        assert_eq!(neighbor_classes(3, 8), (2, 4));
        assert_eq!(neighbor_classes(1, 3), (0, 2));
    }

    #[test]
    fn tuple_counts_per_mode() {
        let data = dataset(8, 40);
        assert_eq!(reduced_epoch_tuples(&config(8, 40, TupleMode::Quadruplet, 1), &data).unwrap().len(), 640);
        assert_eq!(triplet_epoch_tuples(&config(8, 40, TupleMode::Triplet, 1), &data).unwrap().len(), 320);
        assert!(reduced_epoch_tuples(&config(8, 40, TupleMode::Triplet, 1), &data).is_err());
    }

    #[test]
    fn small_classes_are_a_configuration_error() {
        let mut data = dataset(4, 3);
        data[2].truncate(1);
        let err = reduced_epoch_tuples(&config(4, 3, TupleMode::Quadruplet, 0), &data).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let data = dataset(2, 3);
        assert!(reduced_epoch_tuples(&config(2, 3, TupleMode::Quadruplet, 0), &data).is_err());
    }

    #[test]
    fn each_anchor_appears_twice_with_both_orientations() {
        let data = dataset(5, 4);
        let epoch = reduced_epoch_tuples(&config(5, 4, TupleMode::Quadruplet, 9), &data).unwrap();
        let mut seen: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for t in epoch.iter() {
            let t = t.unwrap();
            let q = t.as_quadruplet().unwrap();
            seen.entry(q.anchor.id.clone()).or_default().push((q.classes[2], q.classes[3]));
        }
        assert_eq!(seen.len(), 20);
        for pairs in seen.values() {
            assert_eq!(pairs.len(), 2);
            assert_eq!(pairs[0], (pairs[1].1, pairs[1].0));
        }
    }

    #[test]
    fn different_seeds_keep_assignments_but_change_draws() {
        let data = dataset(6, 5);
        let summarize = |seed| {
            let epoch = reduced_epoch_tuples(&config(6, 5, TupleMode::Quadruplet, seed), &data).unwrap();
            let tuples: Vec<_> = epoch.iter().map(|t| t.unwrap()).collect();
            let order: Vec<_> = tuples
                .iter()
                .map(|t| {
                    let q = t.as_quadruplet().unwrap();
                    (q.anchor.id.clone(), q.classes[2], q.classes[3])
                })
                .collect();
            let draws: Vec<_> = tuples
                .iter()
                .map(|t| {
                    let q = t.as_quadruplet().unwrap();
                    (q.positive.id.clone(), q.anomaly.image.pixels.clone())
                })
                .collect();
            (order, draws)
        };
        let (o1, d1) = summarize(1);
        let (o2, d2) = summarize(2);
        assert_ne!(o1, o2);
        let (mut s1, mut s2) = (o1.clone(), o2.clone());
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
        assert_ne!(d1, d2);
        // same seed reproduces exactly
        let (o3, d3) = summarize(1);
        assert_eq!(o1, o3);
        assert_eq!(d1, d3);
    }

    #[test]
    fn triplet_negatives_differ_from_anchor_class() {
        let data = dataset(4, 3);
        let epoch = triplet_epoch_tuples(&config(4, 3, TupleMode::Triplet, 4), &data).unwrap();
        for t in epoch.iter() {
            let t = t.unwrap();
            let tr = t.as_triplet().unwrap();
            assert_ne!(tr.classes[0], tr.classes[2]);
            assert_ne!(tr.classes[0], tr.classes[3]);
            assert_eq!(tr.negative.label, Label::Step(tr.classes[2] as u16));
            assert_eq!(tr.anomaly.rects.len(), 2);
        }
    }

    #[test]
    fn exclude_neighborhood_policy() {
        let data = dataset(6, 3);
        let mut cfg = config(6, 3, TupleMode::Quadruplet, 2);
        cfg.anomaly_source = AnomalySourcePolicy::ExcludeNeighborhood;
        let epoch = reduced_epoch_tuples(&cfg, &data).unwrap();
        for t in epoch.iter() {
            let t = t.unwrap();
            let q = t.as_quadruplet().unwrap();
            assert!(![q.classes[0], q.classes[2], q.classes[3]].contains(&q.classes[4]));
        }
        let mut small = config(3, 3, TupleMode::Quadruplet, 2);
        small.anomaly_source = AnomalySourcePolicy::ExcludeNeighborhood;
        assert!(small.validate().is_err());
    }
}
