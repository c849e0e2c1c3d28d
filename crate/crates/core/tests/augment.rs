use aqnet::augment::{make_anomaly_sample, random_erase_once, RandomErasingParams};
use aqnet::{Label, LabeledImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(size: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = LabeledImage::filled("t", Label::Step(4), size, size, 0.0);
    for v in img.pixels.iter_mut() {
        *v = rng.gen_range(0.1..0.2);
    }
    img
}

#[test]
fn thousand_applications_respect_area_and_aspect_bounds() {
    let params = RandomErasingParams::default();
    let img = textured(64, 0);
    let total = 64.0 * 64.0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, r) = random_erase_once(&img, &params, &mut rng).unwrap();
        assert!((0.02..=0.4).contains(&r.sampled_area), "seed {seed}: {r:?}");
        assert!((0.3..=3.3).contains(&r.sampled_aspect), "seed {seed}: {r:?}");
        // Flooring each side loses less than one pixel per side, so the
        // measured box must be consistent with some in-range area and aspect.
        let (w, h) = (r.width as f64, r.height as f64);
        assert!(w * h <= 0.4 * total, "seed {seed}: {r:?}");
        assert!((w + 1.0) * (h + 1.0) >= 0.02 * total, "seed {seed}: {r:?}");
        assert!(h / (w + 1.0) <= 3.3 && (h + 1.0) / w >= 0.3, "seed {seed}: {r:?}");
        assert!(!r.fallback);
        assert!(r.x + r.width <= 64 && r.y + r.height <= 64);
        // Changed pixels never exceed the rectangle.
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    if !r.contains(x, y) {
                        assert_eq!(out.get(c, y, x), img.get(c, y, x));
                    }
                }
            }
        }
    }
}

#[test]
fn anomaly_samples_have_two_erasures_and_untouched_complement() {
    let params = RandomErasingParams::default();
    let img = textured(64, 1);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = make_anomaly_sample(&img, &params, &mut rng).unwrap();
        assert_eq!(s.rects.len(), 2);
        assert_eq!(s.image.label, Label::Anomaly(4));
        let mut changed_outside = 0;
        let mut changed_inside = 0;
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let diff = s.image.get(c, y, x) != img.get(c, y, x);
                    if s.erased(x, y) {
                        changed_inside += diff as usize;
                    } else {
                        changed_outside += diff as usize;
                    }
                }
            }
        }
        assert_eq!(changed_outside, 0);
        assert!(changed_inside > 0);
    }
}

#[test]
fn erased_pixels_average_one_half() {
    let params = RandomErasingParams {
        applications: 1,
        ..Default::default()
    };
    for base in [0.0f32, 1.0] {
        let img = LabeledImage::filled("flat", Label::Step(1), 64, 64, base);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for seed in 0..300u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, r) = random_erase_once(&img, &params, &mut rng).unwrap();
            for c in 0..3 {
                for y in r.y..r.y + r.height {
                    for x in r.x..r.x + r.width {
                        sum += out.get(c, y, x) as f64;
                        count += 1;
                    }
                }
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 0.5).abs() < 0.05, "base {base}: mean {mean}");
    }
}
