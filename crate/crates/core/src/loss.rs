//! Anomaly quadruplet / triplet losses, their embedding-space gradients, and
//! the λ curriculum that phases in the anomaly term.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssues, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Metric {
    pub fn tag(&self) -> u8 {
        match self {
            Metric::SquaredEuclidean => 0,
            Metric::Euclidean => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::SquaredEuclidean),
            1 => Some(Metric::Euclidean),
            _ => None,
        }
    }
}

fn check_pair(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "embedding length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

fn squared(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn pairwise_distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64> {
    check_pair(u, v)?;
    let sq = squared(u, v);
    Ok(match metric {
        Metric::SquaredEuclidean => sq,
        Metric::Euclidean => sq.sqrt(),
    })
}

/// Distance and its gradient with respect to `u` (the gradient with respect
/// to `v` is the negation). The Euclidean gradient at `u == v` is taken as 0.
fn distance_with_grad(u: &[f64], v: &[f64], metric: Metric) -> (f64, Vec<f64>) {
    let sq = squared(u, v);
    match metric {
        Metric::SquaredEuclidean => (sq, u.iter().zip(v).map(|(a, b)| 2.0 * (a - b)).collect()),
        Metric::Euclidean => {
            let d = sq.sqrt();
            let g = if d > 0.0 {
                u.iter().zip(v).map(|(a, b)| (a - b) / d).collect()
            } else {
                vec![0.0; u.len()]
            };
            (d, g)
        }
    }
}

/// Componentwise mean of equal-length vectors.
pub fn centroid(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Domain("centroid of an empty set".into()))?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        check_pair(first, v)?;
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    #[default]
    Linear,
}

/// Margins and metric. The triplet baseline uses `m_alpha` for its negative
/// and `m_c` for its anomaly term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub m_alpha: f64,
    pub m_beta: f64,
    pub m_c: f64,
    pub metric: Metric,
    pub ramp: RampShape,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_alpha: 1.0,
            m_beta: 1.0,
            m_c: 1.0,
            metric: Metric::SquaredEuclidean,
            ramp: RampShape::Linear,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        for (name, m) in [("m_alpha", self.m_alpha), ("m_beta", self.m_beta), ("m_c", self.m_c)] {
            issues.check(m.is_finite() && m >= 0.0, || format!("loss.{name} must be finite and >= 0 (got {m})"));
        }
        issues.into_result()
    }
}

/// Individual terms of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub term_n1: f64,
    /// Always 0 for the triplet loss.
    pub term_n2: f64,
    /// Unweighted anomaly hinge; `total` includes it times `lambda`.
    pub term_anomaly: f64,
    pub d_p: f64,
    pub d_n1: f64,
    /// `None` for the triplet loss.
    pub d_n2: Option<f64>,
    pub d_ano: f64,
    pub lambda: f64,
}

fn check_inputs(embs: &[&[f64]], lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1] (got {lambda})")));
    }
    for e in embs {
        check_pair(embs[0], e)?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding passed to the loss".into()));
        }
    }
    Ok(())
}

#[inline]
fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Gradient weight of a hinge: 1 when strictly active, 0 otherwise (also at the kink).
#[inline]
fn active(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    if a != 0.0 {
        for (y, v) in acc.iter_mut().zip(x) {
            *y += a * v;
        }
    }
}

/// Loss and gradients for the quadruplet loss; embeddings in the order
/// anchor, positive, negative1, negative2, anomaly.
pub fn anomaly_quadruplet_loss_with_grad(
    embs: [&[f64]; 5],
    cfg: &LossConfig,
    lambda: f64,
) -> Result<(LossBreakdown, [Vec<f64>; 5])> {
    check_inputs(&embs, lambda)?;
    let [a, p, n1, n2, ano] = embs;
    let (d_p, g_p) = distance_with_grad(a, p, cfg.metric);
    let (d_n1, g_n1) = distance_with_grad(a, n1, cfg.metric);
    let (d_n2, g_n2) = distance_with_grad(a, n2, cfg.metric);
    let c = centroid(&[a, p, n1, n2])?;
    let (d_ano, g_ano) = distance_with_grad(ano, &c, cfg.metric);

    let x1 = d_p - d_n1 + cfg.m_alpha;
    let x2 = d_p - d_n2 + cfg.m_beta;
    let x3 = d_p - d_ano + cfg.m_c;
    let (t1, t2, t3) = (hinge(x1), hinge(x2), hinge(x3));
    let breakdown = LossBreakdown {
        total: t1 + t2 + lambda * t3,
        term_n1: t1,
        term_n2: t2,
        term_anomaly: t3,
        d_p,
        d_n1,
        d_n2: Some(d_n2),
        d_ano,
        lambda,
    };

    // dL/dd_p, dL/dd_n1, dL/dd_n2, dL/dd_ano
    let w3 = lambda * active(x3);
    let (w1, w2) = (active(x1), active(x2));
    let wp = w1 + w2 + w3;
    let dim = a.len();
    let mut grads: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; dim]);
    // d_p = d(a, p)
    axpy(&mut grads[0], wp, &g_p);
    axpy(&mut grads[1], -wp, &g_p);
    // d_n1 = d(a, n1), d_n2 = d(a, n2), entering with a minus sign
    axpy(&mut grads[0], -w1, &g_n1);
    axpy(&mut grads[2], w1, &g_n1);
    axpy(&mut grads[0], -w2, &g_n2);
    axpy(&mut grads[3], w2, &g_n2);
    // d_ano = d(ano, c), c = mean(a, p, n1, n2)
    axpy(&mut grads[4], -w3, &g_ano);
    for g in grads.iter_mut().take(4) {
        axpy(g, w3 / 4.0, &g_ano);
    }
    Ok((breakdown, grads))
}

pub fn anomaly_quadruplet_loss(
    e_a: &[f64],
    e_p: &[f64],
    e_n1: &[f64],
    e_n2: &[f64],
    e_ano: &[f64],
    cfg: &LossConfig,
    lambda: f64,
) -> Result<LossBreakdown> {
    anomaly_quadruplet_loss_with_grad([e_a, e_p, e_n1, e_n2, e_ano], cfg, lambda).map(|(b, _)| b)
}

/// Loss and gradients for the triplet baseline; embeddings in the order
/// anchor, positive, negative, anomaly. The anomaly is measured against the
/// centroid of the other three.
pub fn anomaly_triplet_loss_with_grad(
    embs: [&[f64]; 4],
    cfg: &LossConfig,
    lambda: f64,
) -> Result<(LossBreakdown, [Vec<f64>; 4])> {
    check_inputs(&embs, lambda)?;
    let [a, p, n, ano] = embs;
    let (d_p, g_p) = distance_with_grad(a, p, cfg.metric);
    let (d_n, g_n) = distance_with_grad(a, n, cfg.metric);
    let c = centroid(&[a, p, n])?;
    let (d_ano, g_ano) = distance_with_grad(ano, &c, cfg.metric);

    let x1 = d_p - d_n + cfg.m_alpha;
    let x3 = d_p - d_ano + cfg.m_c;
    let (t1, t3) = (hinge(x1), hinge(x3));
    let breakdown = LossBreakdown {
        total: t1 + lambda * t3,
        term_n1: t1,
        term_n2: 0.0,
        term_anomaly: t3,
        d_p,
        d_n1: d_n,
        d_n2: None,
        d_ano,
        lambda,
    };

    let w1 = active(x1);
    let w3 = lambda * active(x3);
    let wp = w1 + w3;
    let dim = a.len();
    let mut grads: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; dim]);
    axpy(&mut grads[0], wp, &g_p);
    axpy(&mut grads[1], -wp, &g_p);
    axpy(&mut grads[0], -w1, &g_n);
    axpy(&mut grads[2], w1, &g_n);
    axpy(&mut grads[3], -w3, &g_ano);
    for g in grads.iter_mut().take(3) {
        axpy(g, w3 / 3.0, &g_ano);
    }
    Ok((breakdown, grads))
}

pub fn anomaly_triplet_loss(
    e_a: &[f64],
    e_p: &[f64],
    e_n: &[f64],
    e_ano: &[f64],
    cfg: &LossConfig,
    lambda: f64,
) -> Result<LossBreakdown> {
    anomaly_triplet_loss_with_grad([e_a, e_p, e_n, e_ano], cfg, lambda).map(|(b, _)| b)
}

/// When the anomaly term switches on. Epochs are 1-based: `1..=total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub anomaly_start_epoch: usize,
    pub total_epochs: usize,
    pub shape: RampShape,
}

impl LambdaSchedule {
    pub fn new(anomaly_start_epoch: usize, total_epochs: usize) -> Self {
        Self {
            anomaly_start_epoch,
            total_epochs,
            shape: RampShape::Linear,
        }
    }
}

/// λ for a 1-based epoch: 0 up to `anomaly_start_epoch`, then a linear ramp
/// that reaches exactly 1 at `total_epochs`.
pub fn lambda_schedule(epoch: usize, schedule: &LambdaSchedule) -> Result<f64> {
    let LambdaSchedule {
        anomaly_start_epoch: start,
        total_epochs: total,
        shape,
    } = *schedule;
    if start >= total {
        return Err(Error::Domain(format!(
            "anomaly_start_epoch ({start}) must be < total_epochs ({total})"
        )));
    }
    if epoch == 0 || epoch > total {
        return Err(Error::Domain(format!("epoch {epoch} outside 1..={total}")));
    }
    if epoch <= start {
        return Ok(0.0);
    }
    Ok(match shape {
        RampShape::Linear => (epoch - start) as f64 / (total - start) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(m: [f64; 3], metric: Metric) -> LossConfig {
        LossConfig {
            m_alpha: m[0],
            m_beta: m[1],
            m_c: m[2],
            metric,
            ..Default::default()
        }
    }

    #[test]
    fn distance_examples() {
        let (u, v) = ([0.0, 0.0], [3.0, 4.0]);
        assert_eq!(pairwise_distance(&u, &v, Metric::SquaredEuclidean).unwrap(), 25.0);
        assert_eq!(pairwise_distance(&u, &v, Metric::Euclidean).unwrap(), 5.0);
        assert_eq!(pairwise_distance(&v, &v, Metric::Euclidean).unwrap(), 0.0);
        assert!(pairwise_distance(&[1.0], &v, Metric::Euclidean).is_err());
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[&[1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        let c = centroid(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
        assert!(centroid(&[]).is_err());
        assert!(centroid(&[&[1.0], &[1.0, 2.0]]).is_err());
    }

    #[test]
    fn separated_embeddings_give_zero_loss() {
        let a = [0.0, 0.0];
        let far = [10f64.sqrt(), 0.0];
        let b = anomaly_quadruplet_loss(&a, &a, &far, &far, &[100.0, 0.0], &cfg([1.0; 3], Metric::SquaredEuclidean), 1.0)
            .unwrap();
        assert_eq!(b.d_p, 0.0);
        assert!((b.d_n1 - 10.0).abs() < 1e-12);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn identical_embeddings_sum_the_margins() {
        let e = [0.3, -1.2, 4.0];
        let b = anomaly_quadruplet_loss(&e, &e, &e, &e, &e, &cfg([1.0, 2.0, 3.0], Metric::Euclidean), 1.0).unwrap();
        assert_eq!(b.total, 6.0);
        let t = anomaly_triplet_loss(&e, &e, &e, &e, &cfg([1.0, 2.0, 3.0], Metric::Euclidean), 1.0).unwrap();
        assert_eq!(t.total, 4.0);
    }

    #[test]
    fn triplet_with_zero_lambda_is_a_plain_triplet_hinge() {
        let (a, p, n, x) = ([0.0, 1.0], [0.5, 1.0], [0.2, 0.9], [9.0, 9.0]);
        let t = anomaly_triplet_loss(&a, &p, &n, &x, &cfg([0.7, 0.0, 5.0], Metric::SquaredEuclidean), 0.0).unwrap();
        let d_p = 0.25;
        let d_n = 0.04 + 0.01;
        assert!((t.total - (d_p - d_n + 0.7_f64).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let e = [0.0, 0.0];
        let c = LossConfig::default();
        assert!(anomaly_quadruplet_loss(&e, &e, &e, &e, &e, &c, 1.5).is_err());
        assert!(anomaly_quadruplet_loss(&e, &e, &e, &[0.0], &e, &c, 0.5).is_err());
        assert!(matches!(
            anomaly_quadruplet_loss(&e, &e, &[f64::NAN, 0.0], &e, &e, &c, 0.5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_lambda_and_inactive_hinges_give_zero_gradients() {
        let a = [0.0, 0.0];
        let far = [5.0, 0.0];
        let (b, g) = anomaly_quadruplet_loss_with_grad(
            [&a, &a, &far, &[0.0, 5.0], &[0.1, 0.0]],
            &LossConfig::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn hinge_gradient_at_the_kink_is_zero() {
        // d_p = 0, d_n1 = 1, margin 1: argument exactly 0.
        let a = [0.0];
        let (b, g) = anomaly_triplet_loss_with_grad(
            [&a, &a, &[1.0], &[10.0]],
            &cfg([1.0, 0.0, 0.0], Metric::SquaredEuclidean),
            1.0,
        )
        .unwrap();
        assert_eq!(b.term_n1, 0.0);
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_schedule_endpoints_and_midpoint() {
        let s = LambdaSchedule::new(50, 100);
        assert_eq!(lambda_schedule(1, &s).unwrap(), 0.0);
        assert_eq!(lambda_schedule(49, &s).unwrap(), 0.0);
        assert_eq!(lambda_schedule(50, &s).unwrap(), 0.0);
        assert_eq!(lambda_schedule(75, &s).unwrap(), 0.5);
        assert_eq!(lambda_schedule(100, &s).unwrap(), 1.0);
        assert!(lambda_schedule(0, &s).is_err());
        assert!(lambda_schedule(101, &s).is_err());
        assert!(lambda_schedule(10, &LambdaSchedule::new(100, 100)).is_err());
    }

    fn vecs(dim: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n)
    }

    fn metric() -> impl Strategy<Value = Metric> {
        prop_oneof![Just(Metric::SquaredEuclidean), Just(Metric::Euclidean)]
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(v in vecs(6, 2), m in metric()) {
            prop_assert_eq!(
                pairwise_distance(&v[0], &v[1], m).unwrap(),
                pairwise_distance(&v[1], &v[0], m).unwrap()
            );
        }

        #[test]
        fn loss_properties(
            v in vecs(4, 5),
            m in prop::array::uniform3(0.0f64..3.0),
            lambda in 0.0f64..=1.0,
            metric in metric(),
        ) {
            let c = cfg(m, metric);
            let b = anomaly_quadruplet_loss(&v[0], &v[1], &v[2], &v[3], &v[4], &c, lambda).unwrap();
            // nonnegativity and decomposition
            prop_assert!(b.term_n1 >= 0.0 && b.term_n2 >= 0.0 && b.term_anomaly >= 0.0);
            prop_assert!((b.total - (b.term_n1 + b.term_n2 + lambda * b.term_anomaly)).abs() < 1e-12);
            // margin monotonicity
            let bigger = cfg([m[0] * 2.0, m[1] * 2.0, m[2] * 2.0], metric);
            let b2 = anomaly_quadruplet_loss(&v[0], &v[1], &v[2], &v[3], &v[4], &bigger, lambda).unwrap();
            prop_assert!(b2.total >= b.total);
            // affine in lambda
            let at = |l| anomaly_quadruplet_loss(&v[0], &v[1], &v[2], &v[3], &v[4], &c, l).unwrap().total;
            let (l0, l1) = (at(0.0), at(1.0));
            prop_assert!((at(lambda) - (l0 + lambda * (l1 - l0))).abs() < 1e-9);
        }

        #[test]
        fn perfect_separation_is_zero(
            v in vecs(3, 5),
            m in prop::array::uniform3(0.0f64..1.0),
            metric in metric(),
        ) {
            let c = cfg(m, metric);
            let b = anomaly_quadruplet_loss(&v[0], &v[1], &v[2], &v[3], &v[4], &c, 1.0).unwrap();
            if b.d_p + m[0] <= b.d_n1 && b.d_p + m[1] <= b.d_n2.unwrap() && b.d_p + m[2] <= b.d_ano {
                prop_assert_eq!(b.total, 0.0);
            }
        }

        #[test]
        fn lambda_is_monotone_and_bounded(total in 2usize..300, start_frac in 0.0f64..1.0) {
            let start = ((total - 1) as f64 * start_frac) as usize;
            let s = LambdaSchedule::new(start, total);
            let mut prev = 0.0;
            for e in 1..=total {
                let l = lambda_schedule(e, &s).unwrap();
                prop_assert!((0.0..=1.0).contains(&l));
                prop_assert!(l >= prev);
                if e <= start { prop_assert_eq!(l, 0.0); }
                prev = l;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
