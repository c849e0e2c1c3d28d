//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use aqnet::embednet::ArchSpec;
use aqnet::inference::Gallery;
use aqnet::loss::{LossConfig, Metric};
use aqnet::sampler::{neighbor_classes, TrainingTuple};
use aqnet::{Label, LabeledImage};
use rand::Rng;

pub fn tiny_arch() -> ArchSpec {
    ArchSpec {
        input_size: 16,
        conv_channels: [2, 2, 2, 2],
        embed_dim: 4,
        two_digit_guard: true,
    }
}

/// Per-class images with distinct ids and pseudo-random pixels.
pub fn synthetic_classes(n: usize, m: usize, size: usize, seed: u64) -> Vec<Vec<LabeledImage>> {
    let mut rng = aqnet::rng::rng_from(seed, &[]);
    (1..=n)
        .map(|s| {
            (0..m)
                .map(|j| {
                    let mut img = LabeledImage::filled(format!("c{s}-{j}"), Label::Step(s as u16), size, size, 0.0);
                    for v in img.pixels.iter_mut() {
                        *v = rng.gen::<f32>();
                    }
                    img
                })
                .collect()
        })
        .collect()
}

fn dist(u: &[f64], v: &[f64], metric: Metric) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        let d = u[i] - v[i];
        s += d * d;
    }
    match metric {
        Metric::SquaredEuclidean => s,
        Metric::Euclidean => s.sqrt(),
    }
}

/// Quadruplet loss written out term by term.
pub fn quadruplet_oracle(e: [&[f64]; 5], cfg: &LossConfig, lambda: f64) -> f64 {
    let [a, p, n1, n2, ano] = e;
    let dim = a.len();
    let mut c = vec![0.0; dim];
    for i in 0..dim {
        c[i] = (a[i] + p[i] + n1[i] + n2[i]) / 4.0;
    }
    let dp = dist(a, p, cfg.metric);
    let t1 = f64::max(dp - dist(a, n1, cfg.metric) + cfg.m_alpha, 0.0);
    let t2 = f64::max(dp - dist(a, n2, cfg.metric) + cfg.m_beta, 0.0);
    let t3 = f64::max(dp - dist(ano, &c, cfg.metric) + cfg.m_c, 0.0);
    t1 + t2 + lambda * t3
}

pub fn triplet_oracle(e: [&[f64]; 4], cfg: &LossConfig, lambda: f64) -> f64 {
    let [a, p, n, ano] = e;
    let c: Vec<f64> = (0..a.len()).map(|i| (a[i] + p[i] + n[i]) / 3.0).collect();
    let dp = dist(a, p, cfg.metric);
    f64::max(dp - dist(a, n, cfg.metric) + cfg.m_alpha, 0.0)
        + lambda * f64::max(dp - dist(ano, &c, cfg.metric) + cfg.m_c, 0.0)
}

fn step_of(img: &LabeledImage) -> usize {
    img.label.step().expect("clean images are step-labeled") as usize
}

/// Checks every structural rule a training tuple must obey. `n` is the class count.
pub fn check_tuple(t: &TrainingTuple<'_>, n: usize) -> Result<(), String> {
    let anomaly = t.anomaly();
    if anomaly.rects.len() != 2 {
        return Err(format!("anomaly has {} erasures", anomaly.rects.len()));
    }
    match t {
        TrainingTuple::Quadruplet(q) => {
            let ca = step_of(q.anchor);
            if step_of(q.positive) != ca || q.anchor.id == q.positive.id {
                return Err("positive must be another image of the anchor class".into());
            }
            let (c1, c2) = (step_of(q.negative1), step_of(q.negative2));
            let expected = if ca == 1 {
                [2, 3]
            } else if ca == n {
                [n - 1, n - 2]
            } else {
                [ca - 1, ca + 1]
            };
            let mut got = [c1, c2];
            got.sort();
            let mut want = expected;
            want.sort();
            if got != want || c1 == c2 {
                return Err(format!("negatives {c1},{c2} for anchor class {ca}"));
            }
            let src = step_of(q.anomaly_source);
            if src == ca {
                return Err("anomaly source shares the anchor class".into());
            }
            if q.anomaly.image.label != Label::Anomaly(src as u16) {
                return Err("anomaly label does not name its source".into());
            }
            if q.classes != [ca, ca, c1, c2, src] {
                return Err("classes field disagrees with the images".into());
            }
            let (lo, hi) = neighbor_classes(ca - 1, n);
            let mut nb = [lo + 1, hi + 1];
            nb.sort();
            if nb != want {
                return Err("neighbor_classes disagrees with the boundary rule".into());
            }
        }
        TrainingTuple::Triplet(tr) => {
            let ca = step_of(tr.anchor);
            if step_of(tr.positive) != ca || tr.anchor.id == tr.positive.id {
                return Err("positive must be another image of the anchor class".into());
            }
            if step_of(tr.negative) == ca {
                return Err("negative shares the anchor class".into());
            }
            if step_of(tr.anomaly_source) == ca {
                return Err("anomaly source shares the anchor class".into());
            }
        }
    }
    Ok(())
}

/// Brute-force count of (anchor, positive, negative[, negative2]) index choices.
pub fn enumerate_combinations(n: usize, m: usize, quadruplet: bool) -> u64 {
    let mut count = 0;
    for ca in 0..n {
        for a in 0..m {
            for p in 0..m {
                if p == a {
                    continue;
                }
                for c1 in 0..n {
                    if c1 == ca {
                        continue;
                    }
                    for _i1 in 0..m {
                        if !quadruplet {
                            count += 1;
                            continue;
                        }
                        for c2 in 0..n {
                            if c2 == ca || c2 == c1 {
                                continue;
                            }
                            count += m as u64;
                        }
                    }
                }
            }
        }
    }
    count
}

/// Full sort of every gallery distance; ties broken by index.
pub fn brute_force_knn(gallery: &Gallery, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, dist(q, &e.embedding, gallery.metric)))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub const FD_STEP: f64 = 1e-4;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub total: usize,
    /// Parameters agreeing to relative error < 1e-3, kinks included.
    pub agree: usize,
    /// Parameters whose ±h perturbation stays on one linear piece of the
    /// network and on one side of every hinge.
    pub smooth: usize,
    pub smooth_agree: usize,
}

impl GradCheck {
    pub fn raw_fraction(&self) -> f64 {
        self.agree as f64 / self.total as f64
    }

    pub fn smooth_fraction(&self) -> f64 {
        self.smooth_agree as f64 / self.smooth as f64
    }

    pub fn kink_fraction(&self) -> f64 {
        1.0 - self.smooth as f64 / self.total as f64
    }
}

/// Network with small random biases. Zero biases put whole regions of
/// pre-activations exactly on the ReLU kink.
pub fn generic_params(seed: u64) -> aqnet::embednet::Parameters<f64> {
    use rand::SeedableRng;
    let mut p: aqnet::embednet::Parameters<f64> = aqnet::embednet::init_network(&tiny_arch(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let biases: Vec<_> = p.slots().iter().filter(|s| s.name.ends_with("bias")).map(|s| s.range()).collect();
    for r in biases {
        for v in &mut p.values[r] {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    p
}

/// ReLU/pool pattern of every tuple image plus the active hinges.
fn region(p: &aqnet::embednet::Parameters<f64>, tuple: &TrainingTuple<'_>, b: &aqnet::loss::LossBreakdown) -> Vec<u32> {
    let mut out: Vec<u32> = [b.term_n1, b.term_n2, b.term_anomaly].iter().map(|&t| u32::from(t > 0.0)).collect();
    for img in tuple.images() {
        let input: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
        out.extend(p.forward(&input, true).1.unwrap().activation_pattern());
    }
    out
}

pub fn check_gradients(
    params: &aqnet::embednet::Parameters<f64>,
    tuple: &TrainingTuple<'_>,
    cfg: &LossConfig,
    lambda: f64,
) -> GradCheck {
    let (b0, grads) = aqnet::embednet::loss_gradients(params, tuple, cfg, lambda).unwrap();
    let base = region(params, tuple, &b0);
    let mut p = params.clone();
    let mut out = GradCheck { total: p.len(), ..Default::default() };
    for i in 0..p.len() {
        let orig = p.values[i];
        p.values[i] = orig + FD_STEP;
        let up = aqnet::embednet::loss_gradients(&p, tuple, cfg, lambda).unwrap().0;
        let smooth_up = region(&p, tuple, &up) == base;
        p.values[i] = orig - FD_STEP;
        let down = aqnet::embednet::loss_gradients(&p, tuple, cfg, lambda).unwrap().0;
        let smooth_down = region(&p, tuple, &down) == base;
        p.values[i] = orig;
        let fd = (up.total - down.total) / (2.0 * FD_STEP);
        let scale = grads[i].abs().max(fd.abs());
        let ok = scale < 1e-8 || (grads[i] - fd).abs() / scale < 1e-3;
        out.agree += ok as usize;
        if smooth_up && smooth_down {
            out.smooth += 1;
            out.smooth_agree += ok as usize;
        }
    }
    out
}

/// Ten tuples of the given mode on the tiny network, each with fresh weights.
pub fn gradient_check_run(mode: aqnet::sampler::TupleMode) -> GradCheck {
    use aqnet::sampler::{epoch_tuples, AnomalySourcePolicy, SamplerConfig};
    let data = synthetic_classes(4, 3, 16, 21);
    let cfg = SamplerConfig {
        n: 4,
        m: 3,
        mode,
        anomaly_source: AnomalySourcePolicy::UniformOther,
        erasing: Default::default(),
        epoch_seed: 5,
    };
    let tuples = epoch_tuples(&cfg, &data).unwrap();
    let loss = LossConfig {
        m_alpha: 0.5,
        m_beta: 0.7,
        m_c: 0.9,
        ..Default::default()
    };
    let mut sum = GradCheck::default();
    for i in 0..10 {
        let r = check_gradients(&generic_params(100 + i as u64), &tuples.get(i).unwrap(), &loss, 0.5 + 0.05 * i as f64);
        sum.total += r.total;
        sum.agree += r.agree;
        sum.smooth += r.smooth;
        sum.smooth_agree += r.smooth_agree;
    }
    sum
}
