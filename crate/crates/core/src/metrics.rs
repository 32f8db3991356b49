//! Mask accuracy (ROC, AUC) and waveform quality (SI-SNR).

use std::io::Write;

use crate::error::{Error, Result};
use crate::signal::{MultichannelSpectrogram, StftParams};
use crate::tf::TfArray;

/// SI-SNR values are clamped to `[-SISNR_CAP_DB, SISNR_CAP_DB]`.
pub const SISNR_CAP_DB: f64 = 100.0;

/// Points of the common FPR grid used for vertical averaging.
pub const ROC_GRID_POINTS: usize = 1001;

/// Speech-dominance labels at one channel: `10 log10(|s|^2 / |n|^2) > threshold_db`.
pub fn ideal_binary_mask(s: &MultichannelSpectrogram, n: &MultichannelSpectrogram, channel: usize, threshold_db: f64) -> Result<TfArray<bool>> {
    if s.bins.shape() != n.bins.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", s.bins.shape(), n.bins.shape())));
    }
    if channel >= s.num_channels() {
        return Err(Error::InvalidParameter(format!("channel {channel} out of range")));
    }
    let ratio = 10f64.powf(threshold_db / 10.0);
    Ok(TfArray::from_fn(s.num_frames(), s.num_bins(), 1, |t, f, _| {
        s.bins.get(t, f, channel).norm_sqr() > ratio * n.bins.get(t, f, channel).norm_sqr()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs, non-decreasing in both coordinates.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point (`score >= threshold` is positive).
    /// Empty for averaged curves.
    pub thresholds: Vec<f64>,
}

/// Sweeps the threshold over every distinct score.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidParameter("labels must contain both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        thresholds.push(value);
    }
    points.push((1.0, 1.0));
    thresholds.push(f64::NEG_INFINITY);
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// TPR at `fpr`, taking the top of any vertical segment.
fn tpr_at(points: &[(f64, f64)], fpr: f64) -> f64 {
    let mut best_at = None::<f64>;
    let mut below = None::<(f64, f64)>;
    let mut above = None::<(f64, f64)>;
    for &(x, y) in points {
        if x == fpr {
            best_at = Some(best_at.map_or(y, |b: f64| b.max(y)));
        } else if x < fpr {
            if below.is_none_or(|(bx, by)| x > bx || (x == bx && y > by)) {
                below = Some((x, y));
            }
        } else if above.is_none_or(|(ax, ay)| x < ax || (x == ax && y < ay)) {
            above = Some((x, y));
        }
    }
    if let Some(y) = best_at {
        return y;
    }
    match (below, above) {
        (Some((x0, y0)), Some((x1, y1))) => y0 + (y1 - y0) * (fpr - x0) / (x1 - x0),
        (Some((_, y)), None) | (None, Some((_, y))) => y,
        (None, None) => 0.0,
    }
}

/// Vertical averaging: each curve's TPR is read off a 1001-point FPR grid
/// and the readings are averaged.
pub fn averaged_roc(curves: &[RocCurve]) -> Result<RocCurve> {
    if curves.is_empty() {
        return Err(Error::InvalidParameter("no curves to average".into()));
    }
    let last = (ROC_GRID_POINTS - 1) as f64;
    let points = (0..ROC_GRID_POINTS)
        .map(|i| {
            let fpr = i as f64 / last;
            let tpr = curves.iter().map(|c| tpr_at(&c.points, fpr)).sum::<f64>() / curves.len() as f64;
            (fpr, tpr)
        })
        .collect();
    Ok(RocCurve { points, thresholds: Vec::new() })
}

pub fn write_roc_csv(mut out: impl Write, curve: &RocCurve) -> std::io::Result<()> {
    writeln!(out, "fpr,tpr")?;
    for (x, y) in &curve.points {
        writeln!(out, "{x},{y}")?;
    }
    Ok(())
}

/// Scale-invariant SNR in dB of `estimate` against `reference`.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::InvalidParameter("reference signal is zero".into()));
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let scale = dot / ref_energy;
    let target = scale * scale * ref_energy;
    let residual: f64 = estimate.iter().zip(reference).map(|(e, r)| (e - scale * r).powi(2)).sum();
    let db = if residual == 0.0 {
        SISNR_CAP_DB
    } else if target == 0.0 {
        -SISNR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SISNR_CAP_DB, SISNR_CAP_DB))
}

/// Samples scored by the evaluation: everything outside the first and last
/// analysis windows, `[window, (T - 1) * hop)`.
pub fn evaluation_range(params: &StftParams, frames: usize) -> std::ops::Range<usize> {
    let start = params.window_length;
    let end = frames.saturating_sub(1) * params.hop;
    start..end.max(start)
}

/// Frames scored by the evaluation: all but the first and last.
pub fn evaluation_frames(frames: usize) -> std::ops::Range<usize> {
    if frames > 2 {
        1..frames - 1
    } else {
        0..frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(values: Vec<Complex64>) -> MultichannelSpectrogram {
        MultichannelSpectrogram {
            bins: TfArray::from_vec(1, values.len(), 1, values).unwrap(),
            params: StftParams { fft_size: 4, window_length: 4, hop: 2 },
            sample_rate: 8,
            signal_len: 4,
        }
    }

    #[test]
    fn ibm_examples() {
        let c = |v: f64| Complex64::new(v, 0.0);
        let s = spec(vec![c(1.0), c(1.0), c(2.0), c(0.0)]);
        let n = spec(vec![c(0.0), c(1.0), c(1.0), c(0.0)]);
        let ibm = ideal_binary_mask(&s, &n, 0, 0.0).unwrap();
        assert_eq!(ibm.values(), &[true, false, true, false]);
        let strict = ideal_binary_mask(&s, &n, 0, 6.1).unwrap();
        assert_eq!(strict.values(), &[true, false, false, false]);
    }

    #[test]
    fn auc_examples() {
        let labels = [true, false, true, true, false, false];
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let curve = roc(&perfect, &labels).unwrap();
        assert!(curve.points.contains(&(0.0, 1.0)));
        assert_eq!(auc(&curve), 1.0);
        assert_eq!(auc(&roc(&[0.5; 6], &labels).unwrap()), 0.5);
        let inverted: Vec<f64> = perfect.iter().map(|v| 1.0 - v).collect();
        assert_eq!(auc(&roc(&inverted, &labels).unwrap()), 0.0);
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn random_scores_are_uninformative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
        let a = auc(&roc(&scores, &labels).unwrap());
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn averaging() {
        let labels = [true, false, true, false];
        let perfect = roc(&[1.0, 0.0, 1.0, 0.0], &labels).unwrap();
        let flat = roc(&[0.5; 4], &labels).unwrap();
        let single = averaged_roc(std::slice::from_ref(&perfect)).unwrap();
        assert_eq!(single.points.len(), ROC_GRID_POINTS);
        assert!((auc(&single) - 1.0).abs() < 1e-12);
        let twice = averaged_roc(&[flat.clone(), flat.clone()]).unwrap();
        assert_eq!(twice, averaged_roc(std::slice::from_ref(&flat)).unwrap());
        let mixed = averaged_roc(&[perfect, flat]).unwrap();
        assert!((auc(&mixed) - 0.75).abs() < 0.01);
        assert!(averaged_roc(&[]).is_err());
    }

    #[test]
    fn sisnr_examples() {
        let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(si_snr(&r, &r).unwrap(), SISNR_CAP_DB);
        let scaled: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_snr(&scaled, &r).unwrap(), SISNR_CAP_DB);
        // Alternating +-1 against a constant: orthogonal and equal power.
        let c = vec![1.0; 8];
        let alt: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let est: Vec<f64> = c.iter().zip(&alt).map(|(a, b)| a + b).collect();
        assert!(si_snr(&est, &c).unwrap().abs() < 1e-12);
        assert!(si_snr(&c, &[0.0; 8]).is_err());
        assert!(si_snr(&c, &[1.0; 7]).is_err());
    }

    #[test]
    fn evaluation_windows() {
        let p = StftParams { fft_size: 512, window_length: 512, hop: 256 };
        assert_eq!(evaluation_range(&p, 10), 512..2304);
        assert_eq!(evaluation_frames(10), 1..9);
    }

    proptest! {
        #[test]
        fn auc_invariances(seed in any::<u64>(), n in 4usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let base = auc(&roc(&scores, &labels).unwrap());
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auc(&roc(&warped, &labels).unwrap()) - base).abs() < 1e-12);
            let complement: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            prop_assert!((auc(&roc(&complement, &labels).unwrap()) + base - 1.0).abs() < 1e-9);
            let curve = roc(&scores, &labels).unwrap();
            prop_assert!(curve.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
            prop_assert_eq!(curve.points[0], (0.0, 0.0));
            prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
        }

        #[test]
        fn sisnr_scale_invariant(seed in any::<u64>(), k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let scaled: Vec<f64> = e.iter().map(|v| k * v).collect();
            prop_assert!((si_snr(&e, &r).unwrap() - si_snr(&scaled, &r).unwrap()).abs() < 1e-9);
        }
    }
}
