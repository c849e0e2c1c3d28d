//! Inference: a gallery of embedded training images, kNN step estimation,
//! and rejection of far-away queries as `Error`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::augment::{make_anomaly_sample, RandomErasingParams};
use crate::binio::{write_atomic, Reader, Writer};
use crate::embednet::{EmbeddingVector, Parameters, Scalar};
use crate::error::{Error, Result};
use crate::labeled::{Label, LabeledImage};
use crate::loss::{pairwise_distance, Metric};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub embedding: Vec<f64>,
    pub label: Label,
    pub id: String,
}

/// Labeled embeddings searched at inference time. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub dim: usize,
    pub metric: Metric,
    pub entries: Vec<GalleryEntry>,
}

const GALLERY_MAGIC: &[u8; 8] = b"AQGALLRY";
const GALLERY_VERSION: u32 = 1;

impl Gallery {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layout: magic `AQGALLRY`, version u32, dim u32, metric tag u8,
    /// entry count u64, then per entry: label (tag u8 + value u16), id
    /// (u32 length + UTF-8), `dim` f64 values. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(GALLERY_MAGIC);
        w.u32(GALLERY_VERSION);
        w.u32(self.dim as u32);
        w.u8(self.metric.tag());
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.label(e.label);
            w.str(&e.id);
            for &v in &e.embedding {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(8)? != GALLERY_MAGIC {
            return Err(r.err("not a gallery file (bad magic)"));
        }
        let version = r.u32()?;
        if version != GALLERY_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: GALLERY_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let tag = r.u8()?;
        let metric = Metric::from_tag(tag).ok_or_else(|| r.err(format!("unknown metric tag {tag}")))?;
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let label = r.label()?;
            let id = r.str()?;
            let embedding = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(GalleryEntry { embedding, label, id });
        }
        r.finish()?;
        Ok(Self { dim, metric, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Embeds a batch of images, preserving order.
pub fn embed_all<T: Scalar>(params: &Parameters<T>, images: &[LabeledImage]) -> Result<Vec<EmbeddingVector>> {
    images.par_iter().map(|img| params.embed(img)).collect()
}

/// One gallery entry per training image.
pub fn build_gallery<T: Scalar>(params: &Parameters<T>, train_images: &[LabeledImage], metric: Metric) -> Result<Gallery> {
    if train_images.is_empty() {
        return Err(Error::Domain("cannot build a gallery from zero images".into()));
    }
    let embeddings = embed_all(params, train_images)?;
    let entries = train_images
        .iter()
        .zip(embeddings)
        .map(|(img, e)| GalleryEntry {
            embedding: e.0,
            label: img.label,
            id: img.id.clone(),
        })
        .collect();
    Ok(Gallery {
        dim: params.arch.embed_dim,
        metric,
        entries,
    })
}

/// Adds `Error`-labeled entries embedded from Random-Erased copies of the
/// given images, so kNN can vote for `Error` directly. Off by default.
pub fn add_anomaly_entries<T: Scalar>(
    gallery: &mut Gallery,
    params: &Parameters<T>,
    images: &[LabeledImage],
    erasing: &RandomErasingParams,
    seed: u64,
) -> Result<()> {
    let samples = images
        .iter()
        .enumerate()
        .map(|(i, img)| make_anomaly_sample(img, erasing, &mut rng_from(seed, &[i as u64])).map(|s| s.image))
        .collect::<Result<Vec<_>>>()?;
    for (img, e) in samples.iter().zip(embed_all(params, &samples)?) {
        gallery.entries.push(GalleryEntry {
            embedding: e.0,
            label: Label::Error,
            id: img.id.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub predicted: Label,
    pub votes: BTreeMap<Label, usize>,
    pub mean_knn_distance: f64,
    /// The vote winner was overridden by the distance threshold.
    pub threshold_applied: bool,
    /// `(gallery index, distance)` of the k nearest entries, nearest first.
    pub neighbors: Vec<(usize, f64)>,
}

fn check_query(gallery: &Gallery, query: &[f64], k: usize) -> Result<()> {
    if k == 0 || k > gallery.len() {
        return Err(Error::Domain(format!("k = {k} must lie in 1..={}", gallery.len())));
    }
    if query.len() != gallery.dim {
        return Err(Error::Domain(format!(
            "query has {} dims, gallery has {}",
            query.len(),
            gallery.dim
        )));
    }
    Ok(())
}

/// The `k` nearest gallery entries, ordered by (distance, index).
pub fn nearest_neighbors(gallery: &Gallery, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    check_query(gallery, query, k)?;
    let mut all: Vec<(usize, f64)> = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| pairwise_distance(query, &e.embedding, gallery.metric).map(|d| (i, d)))
        .collect::<Result<_>>()?;
    let by_dist = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_dist);
        all.truncate(k);
    }
    all.sort_unstable_by(by_dist);
    Ok(all)
}

/// Majority vote over the given neighbors. Ties go to the label whose voters
/// are closer on average, then to the lower label.
pub fn vote(gallery: &Gallery, neighbors: &[(usize, f64)], threshold: Option<f64>) -> PredictionResult {
    let mut votes: BTreeMap<Label, usize> = BTreeMap::new();
    let mut dist_sum: BTreeMap<Label, f64> = BTreeMap::new();
    for &(i, d) in neighbors {
        let l = gallery.entries[i].label;
        *votes.entry(l).or_default() += 1;
        *dist_sum.entry(l).or_default() += d;
    }
    let winner = votes
        .iter()
        .map(|(&l, &c)| (l, c, dist_sum[&l] / c as f64))
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|(l, _, _)| l)
        .expect("at least one neighbor");
    let mean = neighbors.iter().map(|n| n.1).sum::<f64>() / neighbors.len() as f64;
    let reject = threshold.is_some_and(|t| mean > t);
    PredictionResult {
        predicted: if reject { Label::Error } else { winner },
        votes,
        mean_knn_distance: mean,
        threshold_applied: reject,
        neighbors: neighbors.to_vec(),
    }
}

pub fn knn_classify(gallery: &Gallery, query: &[f64], k: usize, threshold: Option<f64>) -> Result<PredictionResult> {
    let neighbors = nearest_neighbors(gallery, query, k)?;
    Ok(vote(gallery, &neighbors, threshold))
}

/// Embeds `image` and classifies it against `gallery`.
pub fn classify_image<T: Scalar>(
    params: &Parameters<T>,
    gallery: &Gallery,
    image: &LabeledImage,
    k: usize,
    threshold: Option<f64>,
) -> Result<PredictionResult> {
    if params.arch.embed_dim != gallery.dim {
        return Err(Error::Domain(format!(
            "network embeds into {} dims, gallery has {}",
            params.arch.embed_dim, gallery.dim
        )));
    }
    let e = params.embed(image)?;
    knn_classify(gallery, &e, k, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(points: &[(f64, f64, u16)]) -> Gallery {
        Gallery {
            dim: 2,
            metric: Metric::SquaredEuclidean,
            entries: points
                .iter()
                .enumerate()
                .map(|(i, &(x, y, s))| GalleryEntry {
                    embedding: vec![x, y],
                    label: Label::Step(s),
                    id: format!("g{i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn exact_match_with_k1() {
        let g = gallery(&[(0.0, 0.0, 1), (5.0, 5.0, 2)]);
        let r = knn_classify(&g, &[5.0, 5.0], 1, None).unwrap();
        assert_eq!(r.predicted, Label::Step(2));
        assert_eq!(r.mean_knn_distance, 0.0);
        assert!(!r.threshold_applied);
    }

    #[test]
    fn majority_then_threshold() {
        let mut pts = vec![(0.0, 0.0, 3); 6];
        pts.extend(vec![(0.1, 0.0, 4); 4]);
        let g = gallery(&pts);
        let r = knn_classify(&g, &[0.0, 0.0], 10, Some(1.0)).unwrap();
        assert_eq!(r.predicted, Label::Step(3));
        assert_eq!(r.votes[&Label::Step(3)], 6);
        assert_eq!(r.votes.values().sum::<usize>(), 10);

        let far = gallery(&vec![(0.0, 0.0, 3); 10]);
        let r = knn_classify(&far, &[10.0, 0.0], 10, Some(50.0)).unwrap();
        assert_eq!(r.votes[&Label::Step(3)], 10);
        assert_eq!(r.predicted, Label::Error);
        assert!(r.threshold_applied);
        assert!(r.mean_knn_distance > 50.0);
    }

    #[test]
    fn ties_prefer_closer_voters_then_lower_step() {
        let g = gallery(&[(1.0, 0.0, 5), (-2.0, 0.0, 2)]);
        let r = knn_classify(&g, &[0.0, 0.0], 2, None).unwrap();
        assert_eq!(r.predicted, Label::Step(5));
        let g = gallery(&[(1.0, 0.0, 5), (-1.0, 0.0, 2)]);
        let r = knn_classify(&g, &[0.0, 0.0], 2, None).unwrap();
        assert_eq!(r.predicted, Label::Step(2));
    }

    #[test]
    fn invalid_k_and_dims() {
        let g = gallery(&[(0.0, 0.0, 1)]);
        assert!(knn_classify(&g, &[0.0, 0.0], 0, None).is_err());
        assert!(knn_classify(&g, &[0.0, 0.0], 2, None).is_err());
        assert!(knn_classify(&g, &[0.0], 1, None).is_err());
    }

    #[test]
    fn empty_gallery_is_rejected() {
        let p: Parameters<f32> = crate::embednet::init_network(
            &crate::embednet::ArchSpec {
                input_size: 16,
                conv_channels: [1, 1, 1, 1],
                embed_dim: 2,
                two_digit_guard: true,
            },
            0,
        )
        .unwrap();
        assert!(build_gallery(&p, &[], Metric::SquaredEuclidean).is_err());
    }

    #[test]
    fn gallery_bytes_round_trip_and_reject_corruption() {
        let mut g = gallery(&[(0.25, -1.0, 1), (1e-300, 7.5, 8)]);
        g.entries[1].label = Label::Error;
        let path = Path::new("mem");
        let bytes = g.to_bytes();
        assert_eq!(Gallery::from_bytes(&bytes, path).unwrap(), g);
        assert!(matches!(
            Gallery::from_bytes(&bytes[..bytes.len() - 3], path),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Gallery::from_bytes(&bad, path), Err(Error::Version { found: 9, .. })));
    }
}
