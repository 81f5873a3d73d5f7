use dynamo::data::{decode_dataset, draw_sprite, encode_dataset, gen_synthetic, GenSpec, Placement, SpriteSpec};
use dynamo::eval::evaluate;
use dynamo::model::{encode_model, decode_model, forward, ForwardOptions, ModelParams, NetworkConfig};
use dynamo::{Graph, Tensor};
use proptest::prelude::*;

fn bank_and_clip() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..4, 1usize..10, 1usize..10, prop_oneof![Just(3usize), Just(5)]).prop_flat_map(|(t, h, w, s)| {
        (
            Just(t),
            Just(h),
            Just(w),
            Just(s),
            prop::collection::vec(0.0f64..1.0, t * h * w),
            prop::collection::vec(-6.0f64..6.0, t * s * s),
        )
    })
}

fn predict(t: usize, h: usize, w: usize, s: usize, clip: &[f64], logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::new(vec![t, h, w], clip.to_vec()).unwrap()).unwrap();
    let l = g.input(Tensor::new(vec![t, s * s], logits.to_vec()).unwrap()).unwrap();
    let bank = g.make_filters(l).unwrap();
    let p = g.apply_filters(c, &bank).unwrap();
    (g.value(p).data().to_vec(), bank.tensor(&g).data().to_vec())
}

proptest! {
    #[test]
    fn filters_are_distributions((t, _h, _w, s, _clip, logits) in bank_and_clip()) {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::new(vec![t, s * s], logits).unwrap()).unwrap();
        let bank = g.make_filters(l).unwrap();
        let f = bank.tensor(&g);
        prop_assert_eq!(f.shape(), &[t, s, s][..]);
        for row in f.data().chunks(s * s) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_stay_in_local_range((t, h, w, s, clip, logits) in bank_and_clip()) {
        let (pred, _) = predict(t, h, w, s, &clip, &logits);
        let r = (s / 2) as isize;
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            let v = clip[(f * h + yy) * w + xx];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let p = pred[(f * h + y) * w + x];
                    prop_assert!(p >= lo && p <= hi);
                }
            }
        }
    }

    #[test]
    fn interior_translation_commutes(
        (t, logits, clip) in (1usize..3).prop_flat_map(|t| (
            Just(t),
            prop::collection::vec(-3.0f64..3.0, t * 9),
            prop::collection::vec(0.0f64..1.0, t * 16 * 16),
        )),
        (dy, dx) in (-2isize..=2, -2isize..=2),
    ) {
        let (h, w, s) = (16, 16, 3);
        let shifted: Vec<f64> = (0..t * h * w)
            .map(|k| {
                let (f, y, x) = (k / (h * w), (k / w % h) as isize, (k % w) as isize);
                let (sy, sx) = ((y - dy).clamp(0, h as isize - 1), (x - dx).clamp(0, w as isize - 1));
                clip[(f * h + sy as usize) * w + sx as usize]
            })
            .collect();
        let (a, _) = predict(t, h, w, s, &clip, &logits);
        let (b, _) = predict(t, h, w, s, &shifted, &logits);
        let margin = (s + 2) as isize;
        for f in 0..t {
            for y in margin..h as isize - margin {
                for x in margin..w as isize - margin {
                    let got = b[(f * h + y as usize) * w + x as usize];
                    let want = a[(f * h + (y - dy) as usize) * w + (x - dx) as usize];
                    prop_assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn one_hot_center_filter_is_identity() {
    let (t, h, w, s) = (2, 5, 6, 5);
    let clip: Vec<f64> = (0..t * h * w).map(|k| (k as f64 * 0.37).sin().abs()).collect();
    let logits: Vec<f64> = (0..t * s * s).map(|k| if k % (s * s) == s * s / 2 { 0.0 } else { -1e4 }).collect();
    let (pred, _) = predict(t, h, w, s, &clip, &logits);
    assert_eq!(pred, clip);
}

fn small_config(seed: u64) -> NetworkConfig {
    NetworkConfig { frames: 4, height: 12, width: 12, filter_size: 3, dmr_dim: 16, ar_dim: 8, trunk_channels: vec![2, 4], num_classes: 4, seed }
}

#[test]
fn zero_clip_predicts_zero_for_any_parameters() {
    for seed in 0..5 {
        let params = ModelParams::<f32>::init(&small_config(seed)).unwrap();
        let clip = Tensor::<f32>::zeros(vec![4, 12, 12]);
        let fw = forward(&params, &clip, &ForwardOptions { classify: true, trainable: None }).unwrap();
        assert!(fw.output().predicted.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_is_deterministic() {
    let params = ModelParams::<f32>::init(&small_config(3)).unwrap();
    let clip = Tensor::<f32>::from_fn(vec![4, 12, 12], |k| ((k * 7919) % 101) as f32 / 100.0);
    let opts = ForwardOptions { classify: true, trainable: None };
    let a = forward(&params, &clip, &opts).unwrap().output();
    let b = forward(&params, &clip, &opts).unwrap().output();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.predicted), bits(&b.predicted));
    assert_eq!(bits(a.class_logits.as_ref().unwrap()), bits(b.class_logits.as_ref().unwrap()));
}

#[test]
fn left_clip_reversed_is_a_right_clip() {
    let spec = GenSpec { num_clips: 40, frames: 8, speeds: vec![1, 2], size_min: 3, size_max: 5, ..GenSpec::default() };
    let placement = spec.resolve_placement().unwrap();
    let stored = spec.frames + 1;
    for index in (0..40).filter(|i| i % 4 == 0) {
        let left = draw_sprite(&spec, placement, index);
        assert!(left.velocity.0 < 0 && left.velocity.1 == 0);
        let end = (left.start.0 + left.velocity.0 * (stored as i64 - 1), left.start.1);
        let right = SpriteSpec { start: end, velocity: (-left.velocity.0, 0), ..left.clone() };
        let a = left.render(stored, spec.height, spec.width);
        let b = right.render(stored, spec.height, spec.width);
        let n = spec.height * spec.width;
        for t in 0..stored {
            let fa = &a.data()[t * n..][..n];
            let fb = &b.data()[(stored - 1 - t) * n..][..n];
            assert!(fa.iter().zip(fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn labels_are_balanced() {
    let spec = GenSpec { num_clips: 1000, frames: 4, height: 16, width: 16, size_min: 2, size_max: 4, ..GenSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    assert_eq!(ds.label_counts(), vec![250; 4]);
}

#[test]
fn symmetric_placement_hides_the_class_in_single_frames() {
    let spec = GenSpec { num_clips: 400, frames: 6, speeds: vec![1], placement: Placement::Symmetric, ..GenSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    // Mean sprite column of the first frame should not depend on the class.
    let (h, w) = (spec.height, spec.width);
    let mut sums = [0.0f64; 4];
    for c in &ds.clips {
        let f = &c.frames.data()[..h * w];
        let bg = f.iter().cloned().fold(f32::INFINITY, f32::min);
        let (mut m, mut cx) = (0.0, 0.0);
        for (k, &v) in f.iter().enumerate() {
            let wgt = (v - bg) as f64;
            m += wgt;
            cx += wgt * (k % w) as f64;
        }
        sums[c.label] += cx / m.max(1e-9);
    }
    let means: Vec<f64> = sums.iter().map(|s| s / 100.0).collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 2.0, "{means:?}");
}

#[test]
fn files_round_trip_bitwise() {
    let spec = GenSpec { num_clips: 12, frames: 4, height: 12, width: 12, size_min: 2, size_max: 3, seed: 9, ..GenSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    let bytes = encode_dataset(&ds);
    assert_eq!(encode_dataset(&decode_dataset(&bytes).unwrap()), bytes);
    let params = ModelParams::<f32>::init(&small_config(5)).unwrap();
    let mb = encode_model(&params);
    assert_eq!(encode_model(&decode_model(&mb).unwrap()), mb);
}

#[test]
fn evaluation_ignores_clip_order() {
    let spec = GenSpec { num_clips: 16, frames: 4, height: 12, width: 12, size_min: 2, size_max: 3, seed: 4, ..GenSpec::default() };
    let ds = gen_synthetic(&spec).unwrap();
    let reversed = ds.subset(&(0..16).rev().collect::<Vec<_>>());
    let params = ModelParams::<f32>::init(&small_config(1)).unwrap();
    let a = evaluate(&params, &ds).unwrap();
    let b = evaluate(&params, &reversed).unwrap();
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.mean_ssim.to_bits(), b.mean_ssim.to_bits());
    assert_eq!(a.mean_psnr.map(f64::to_bits), b.mean_psnr.map(f64::to_bits));
}
