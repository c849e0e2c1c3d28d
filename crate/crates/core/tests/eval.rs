use aqnet::eval::*;
use aqnet::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eight steps of `per_step` images each; `wrong[i]` of step i+1 are pushed to
/// the following step (or the preceding one for the last step).
#[allow(clippy::needless_range_loop)]
fn fixture(per_step: u64, wrong: [u64; 8], error_rows: Option<(u64, u64)>) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(8);
    for s in 0..8 {
        let off = if s == 7 { 6 } else { s + 1 };
        cm.counts[s][off] = wrong[s];
        cm.counts[s][s] = per_step - wrong[s];
    }
    if let Some((hit, miss)) = error_rows {
        cm.counts[8][8] = hit;
        cm.counts[8][0] = miss;
    }
    cm
}

fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

#[test]
fn reported_accuracies_reproduce_from_fixture_matrices() {
    // 200 test images per class over eight steps: 1,600 predictions.
    for (wrong_total, want) in [(411u64, 74.3), (74, 95.4), (150, 90.6), (379, 76.3), (56, 96.5)] {
        let mut wrong = [wrong_total / 8; 8];
        wrong[0] += wrong_total % 8;
        let cm = fixture(200, wrong, None);
        assert_eq!(cm.total(), 1600);
        assert_eq!(pct(overall_accuracy(&cm).unwrap()), want);
    }
    // 129 images for each of the eight steps plus Error: 1,161 predictions.
    let mut cm = fixture(129, [3, 3, 3, 3, 3, 3, 2, 2], Some((125, 4)));
    assert_eq!(cm.total(), 1161);
    for t in 0..9 {
        assert_eq!(cm.row_total(t), 129);
    }
    assert_eq!(pct(overall_accuracy(&cm).unwrap()), 97.8);
    cm.counts[8][8] = 129;
    cm.counts[8][0] = 0;
    assert_eq!(pct(overall_accuracy(&cm).unwrap()), 98.1);
}

#[test]
fn reported_adjacent_rates_reproduce_from_fixture_matrices() {
    // 30 of 1,032 step truths land on a neighbor.
    let cm = fixture(129, [4, 4, 4, 4, 4, 4, 3, 3], Some((129, 0)));
    assert_eq!(pct(adjacent_misclassification_rate(&cm).unwrap()), 2.9);
    // 77 of 1,600.
    let cm = fixture(200, [10, 10, 10, 10, 10, 10, 10, 7], None);
    assert_eq!(pct(adjacent_misclassification_rate(&cm).unwrap()), 4.8);
}

#[test]
fn matrix_statistics_agree_with_direct_tallies() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let label = |rng: &mut ChaCha8Rng| {
        let v = rng.gen_range(1..=9u16);
        if v == 9 { Label::Error } else { Label::Step(v) }
    };
    let preds: Vec<(Label, Label)> = (0..2000).map(|_| (label(&mut rng), label(&mut rng))).collect();
    let cm = confusion_matrix(8, &preds).unwrap();

    let correct = preds.iter().filter(|(t, p)| t == p).count();
    assert!((overall_accuracy(&cm).unwrap() - correct as f64 / 2000.0).abs() < 1e-15);

    let step_truths: Vec<_> = preds.iter().filter(|(t, _)| t.is_step()).collect();
    let adjacent = step_truths
        .iter()
        .filter(|(t, p)| match (t.step(), p.step()) {
            (Some(a), Some(b)) => a.abs_diff(b) == 1,
            _ => false,
        })
        .count();
    let want = adjacent as f64 / step_truths.len() as f64;
    assert!((adjacent_misclassification_rate(&cm).unwrap() - want).abs() < 1e-15);

    for row in cm.normalized() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 || s == 0.0);
    }
}

#[test]
fn embeddings_export_and_reimport() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    let vecs = [
        vec![0.1, -2.5e-17, 1.0 / 3.0, 12345.678],
        vec![f64::MIN_POSITIVE, 0.0, -0.0, 7.0],
        vec![1e300, -1e-300, 2.0, 0.5],
    ];
    let labels = [Label::Step(1), Label::Step(8), Label::Error];
    let rows: Vec<_> = (0..3).map(|i| (["a", "b", "c"][i], labels[i], vecs[i].as_slice())).collect();
    write_embeddings_csv(&rows, 4, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.split(',').count() == 6));
    let back = import_embeddings(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (i, (id, l, v)) in back.iter().enumerate() {
        assert_eq!(id, ["a", "b", "c"][i]);
        assert_eq!(*l, labels[i]);
        for (x, y) in v.iter().zip(&vecs[i]) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
