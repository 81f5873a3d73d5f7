//! Frame-prediction quality (SSIM, PSNR), classification accuracy and run
//! comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ModelParams};
use crate::rng::{domain, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::argmax;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Separable Gaussian blur of an `h×w` plane where taps falling outside the
/// image are dropped and the remaining weights renormalized.
fn blur(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let norm_along = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                (lo..=hi).map(|k| taps[k + r - i]).sum()
            })
            .collect()
    };
    let (nh, nw) = (norm_along(h), norm_along(w));
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for k in lo..=hi {
                s += taps[k + r - x] * src[y * w + k];
            }
            tmp[y * w + x] = s / nw[x];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let mut s = 0.0;
            for k in lo..=hi {
                s += taps[k + r - y] * tmp[k * w + x];
            }
            out[y * w + x] = s / nh[y];
        }
    }
    out
}

fn plane(t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::invalid("ssim", format!("expected an H×W frame, got {s:?}"))),
    }
}

/// Mean SSIM over all pixel positions for frames with dynamic range 1.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w) = plane(a)?;
    ssim_plane(
        &a.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>(),
        &b.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>(),
        h,
        w,
    )
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("ssim", "empty frame"));
    }
    let taps = gaussian_taps();
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(a, h, w, &taps);
    let mu_b = blur(b, h, w, &taps);
    let e_aa = blur(&sq(a, a), h, w, &taps);
    let e_bb = blur(&sq(b, b), h, w, &taps);
    let e_ab = blur(&sq(a, b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
        total += num / den;
    }
    Ok(total / (h * w) as f64)
}

/// `10·log10(1 / MSE)`; `+∞` for identical frames.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// FNV-1a hash of the dataset's `DYNV` encoding, as 16 hex digits.
pub fn dataset_hash(ds: &Dataset) -> String {
    format!("{:016x}", fnv1a64(&encode_dataset(ds)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mean_ssim: f64,
    /// Mean over frame pairs with finite PSNR; `null` when every pair matched exactly.
    pub mean_psnr: Option<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub num_clips: usize,
    pub dataset_hash: String,
}

struct ClipScore {
    label: usize,
    predicted_label: Option<usize>,
    ssim_sum: f64,
    psnr_sum: f64,
    psnr_finite: usize,
}

/// Order-independent sum: values are sorted before accumulation.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn score_clip(predicted: &Tensor<f32>, clip: &Tensor<f32>, label: usize, guess: Option<usize>) -> Result<ClipScore> {
    let t = predicted.shape()[0];
    let (mut ssim_sum, mut psnr_sum, mut psnr_finite) = (0.0, 0.0, 0);
    for f in 0..t {
        let p = predicted.slice_leading(f, f + 1)?;
        let g = clip.slice_leading(f + 1, f + 2)?;
        ssim_sum += ssim(&p, &g)?;
        let db = psnr(&p, &g)?;
        if db.is_finite() {
            psnr_sum += db;
            psnr_finite += 1;
        }
    }
    Ok(ClipScore {
        label,
        predicted_label: guess,
        ssim_sum,
        psnr_sum,
        psnr_finite,
    })
}

fn report(scores: Vec<ClipScore>, frames: usize, num_classes: usize, hash: String) -> MetricsReport {
    let n = scores.len();
    let mut per_class = vec![(0usize, 0usize); num_classes];
    let mut correct = 0;
    for s in &scores {
        per_class[s.label].1 += 1;
        if s.predicted_label == Some(s.label) {
            per_class[s.label].0 += 1;
            correct += 1;
        }
    }
    let finite: usize = scores.iter().map(|s| s.psnr_finite).sum();
    let ssim_total = canonical_sum(scores.iter().map(|s| s.ssim_sum).collect());
    let psnr_total = canonical_sum(scores.iter().map(|s| s.psnr_sum).collect());
    MetricsReport {
        accuracy: correct as f64 / n.max(1) as f64,
        mean_ssim: ssim_total / (n * frames).max(1) as f64,
        mean_psnr: (finite > 0).then(|| psnr_total / finite as f64),
        per_class_accuracy: per_class
            .into_iter()
            .map(|(c, t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        num_clips: n,
        dataset_hash: hash,
    }
}

/// Classification accuracy and next-frame quality of a model over a dataset.
/// Predicted frame `t` is compared with ground-truth frame `t + 1`.
pub fn evaluate(params: &ModelParams<f32>, data: &Dataset) -> Result<MetricsReport> {
    let cfg = params.config();
    if data.header.num_classes != cfg.num_classes {
        return Err(Error::DatasetMismatch(format!(
            "dataset has {} classes, model has {}",
            data.header.num_classes, cfg.num_classes
        )));
    }
    if data.frames() != cfg.frames || data.header.height != cfg.height || data.header.width != cfg.width {
        return Err(Error::DatasetMismatch("clip dimensions differ from the model".into()));
    }
    let opts = ForwardOptions {
        classify: true,
        trainable: None,
    };
    let scores = data
        .clips
        .par_iter()
        .map(|c| {
            let fw = forward(params, &c.frames, &opts)?;
            let guess = argmax(fw.graph.value(fw.class_logits.expect("classifier built")).data());
            score_clip(fw.graph.value(fw.predicted), &c.frames, c.label, Some(guess))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(scores, cfg.frames, cfg.num_classes, dataset_hash(data)))
}

/// Next-frame quality of the "nothing moves" predictor (`x̂_{t+1} = x_t`).
/// Accuracy is reported as zero.
pub fn identity_baseline(data: &Dataset) -> Result<MetricsReport> {
    let t = data.frames();
    let scores = data
        .clips
        .par_iter()
        .map(|c| score_clip(&c.frames.slice_leading(0, t)?, &c.frames, c.label, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(scores, t, data.header.num_classes, dataset_hash(data)))
}

/// Signed differences `a − b` between two reports on the same dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub dataset_hash: String,
    pub accuracy_delta: f64,
    pub ssim_delta: f64,
    pub psnr_delta: Option<f64>,
    pub per_class_accuracy_delta: Vec<f64>,
}

pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<RunComparison> {
    if a.dataset_hash != b.dataset_hash {
        return Err(Error::DatasetMismatch(format!(
            "reports come from different datasets ({} vs {})",
            a.dataset_hash, b.dataset_hash
        )));
    }
    Ok(RunComparison {
        dataset_hash: a.dataset_hash.clone(),
        accuracy_delta: a.accuracy - b.accuracy,
        ssim_delta: a.mean_ssim - b.mean_ssim,
        psnr_delta: a.mean_psnr.zip(b.mean_psnr).map(|(x, y)| x - y),
        per_class_accuracy_delta: a
            .per_class_accuracy
            .iter()
            .zip(&b.per_class_accuracy)
            .map(|(x, y)| x - y)
            .collect(),
    })
}

/// Settings of the single-frame softmax-regression probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Which stored frame of each clip is used.
    pub frame: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            lr: 0.5,
            l2: 1e-4,
            frame: 0,
        }
    }
}

/// Trains a multinomial logistic regression on the pixels of one frame per
/// clip (full-batch gradient descent from zero weights) and returns its test
/// accuracy. Measures how much a single frame reveals about the label.
pub fn single_frame_probe(train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let k = train.header.num_classes;
    let d = train.header.height * train.header.width;
    if test.header.height * test.header.width != d || test.header.num_classes != k {
        return Err(Error::DatasetMismatch("probe train/test dimensions differ".into()));
    }
    let features = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        ds.clips
            .iter()
            .map(|c| {
                let f = c.frames.slice_leading(cfg.frame, cfg.frame + 1)?;
                let mut v: Vec<f64> = f.data().iter().map(|&x| x as f64).collect();
                v.push(1.0);
                Ok(v)
            })
            .collect()
    };
    let (xtr, xte) = (features(train)?, features(test)?);
    let ytr: Vec<usize> = train.clips.iter().map(|c| c.label).collect();
    let dim = d + 1;
    let mut w = vec![0.0f64; k * dim];
    let n = xtr.len() as f64;
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| w[c * dim..(c + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; k * dim];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let z = logits(&w, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let coef = e[c] / s - if c == y { 1.0 } else { 0.0 };
                for (g, xi) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += coef * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.lr * (gi / n + cfg.l2 * *wi);
        }
    }
    let correct = xte
        .iter()
        .zip(&test.clips)
        .filter(|(x, c)| argmax(&logits(&w, x)) == c.label)
        .count();
    Ok(correct as f64 / xte.len().max(1) as f64)
}

/// Deterministic shuffled split of `0..n` into `(first, rest)` with `first` of
/// size `round(fraction·n)`, drawn from stream `(seed, SPLIT, 0)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = SplitMix64::stream(seed, domain::SPLIT, 0).permutation(n);
    let k = ((fraction * n as f64).round() as usize).min(n);
    let (a, b) = perm.split_at(k);
    (a.to_vec(), b.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![h, w], f)
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = frame(12, 9, |i| ((i * 31) % 7) as f64 / 7.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_constant_black_and_white() {
        let a = frame(16, 16, |_| 0.0);
        let b = frame(16, 16, |_| 1.0);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = frame(10, 13, |i| ((i * 17) % 11) as f64 / 11.0);
        let b = frame(10, 13, |i| ((i * 5) % 13) as f64 / 13.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &frame(10, 12, |_| 0.0)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = frame(2, 2, |_| 0.0);
        let b = frame(2, 2, |_| 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = frame(2, 2, |_| 1.0);
        assert_eq!(psnr(&a, &c).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    fn report_with(acc: f64, hash: &str) -> MetricsReport {
        MetricsReport {
            accuracy: acc,
            mean_ssim: 0.5,
            mean_psnr: Some(30.0),
            per_class_accuracy: vec![acc; 2],
            num_clips: 10,
            dataset_hash: hash.into(),
        }
    }

    #[test]
    fn compare_examples() {
        let a = report_with(0.9, "h");
        let d = compare_runs(&a, &a).unwrap();
        assert_eq!((d.accuracy_delta, d.ssim_delta, d.psnr_delta), (0.0, 0.0, Some(0.0)));
        let d = compare_runs(&a, &report_with(0.8, "h")).unwrap();
        assert!((d.accuracy_delta - 0.1).abs() < 1e-12);
        assert!(compare_runs(&a, &report_with(0.8, "other")).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!(a.len(), 5);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
