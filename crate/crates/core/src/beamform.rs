//! Mask-driven multi-channel Wiener filtering.
//!
//! Second-order statistics are mask-weighted averages of `y y^H`. The
//! steering vector is the principal eigenvector of the speech covariance
//! estimate, normalised at the reference microphone. The filter is an MVDR
//! beamformer followed by the time-varying gain `sqrt(lambda_s / (lambda_s + lambda_n))`.

use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, HermitianInverse};
use crate::mask::RealMask;
use crate::signal::MultichannelSpectrogram;
use crate::tf::TfArray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamformConfig {
    pub reference: usize,
    /// Diagonal loading of the noise covariance relative to `tr/M`.
    pub loading: f64,
    /// Lower bound on the post-gain. Zero applies the gain as is.
    pub gain_floor: f64,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            reference: 0,
            loading: 1e-6,
            gain_floor: 0.0,
        }
    }
}

/// Noise, noisy and speech covariances per frequency.
#[derive(Debug, Clone)]
pub struct SecondOrderStats {
    pub phi_n: Vec<CMatrix>,
    pub phi_y: Vec<CMatrix>,
    /// `phi_y - phi_n`; not necessarily positive semidefinite.
    pub phi_s: Vec<CMatrix>,
}

/// MVDR vectors per frequency and post-gains per bin.
///
/// The filter at `(t, f)` is `mvdr[f] * gain(t, f)`.
#[derive(Debug, Clone)]
pub struct BeamformerBank {
    pub steering: Vec<CVector>,
    pub mvdr: Vec<CVector>,
    pub gain: TfArray<f64>,
}

impl BeamformerBank {
    pub fn weights(&self, t: usize, f: usize) -> CVector {
        &self.mvdr[f] * Complex64::new(*self.gain.get(t, f, 0), 0.0)
    }
}

fn check_masks(y: &MultichannelSpectrogram, masks: &[&RealMask]) -> Result<()> {
    for m in masks {
        if m.frames() != y.num_frames() || m.bins() != y.num_bins() || m.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} does not match spectrogram ({}, {}, 1)",
                m.shape(),
                y.num_frames(),
                y.num_bins()
            )));
        }
    }
    Ok(())
}

fn weighted_covariance(y: &MultichannelSpectrogram, mask: &RealMask, f: usize) -> Option<CMatrix> {
    let total: f64 = (0..y.num_frames()).map(|t| mask.at(t, f)).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut acc = linalg::zeros(y.num_channels());
    for t in 0..y.num_frames() {
        let w = mask.at(t, f);
        if w > 0.0 {
            linalg::add_outer(&mut acc, y.bins.channel_slice(t, f), w);
        }
    }
    acc.apply(|v| *v = *v / total);
    linalg::hermitize(&mut acc);
    Some(acc)
}

fn sos_bin(y: &MultichannelSpectrogram, lambda_s: &RealMask, lambda_n: &RealMask, f: usize) -> Result<(CMatrix, CMatrix, CMatrix)> {
    let empty = |what: &str| Error::DegenerateMask {
        bin: f,
        reason: format!("{what} mask is zero in every frame"),
    };
    let phi_n = weighted_covariance(y, lambda_n, f).ok_or_else(|| empty("noise"))?;
    let phi_y = weighted_covariance(y, lambda_s, f).ok_or_else(|| empty("speech"))?;
    let phi_s = &phi_y - &phi_n;
    Ok((phi_n, phi_y, phi_s))
}

/// Mask-weighted covariances; the speech mask weights the noisy covariance.
pub fn compute_sos(y: &MultichannelSpectrogram, lambda_s: &RealMask, lambda_n: &RealMask) -> Result<SecondOrderStats> {
    check_masks(y, &[lambda_s, lambda_n])?;
    let per_bin = (0..y.num_bins())
        .into_par_iter()
        .map(|f| sos_bin(y, lambda_s, lambda_n, f))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = SecondOrderStats {
        phi_n: Vec::with_capacity(per_bin.len()),
        phi_y: Vec::with_capacity(per_bin.len()),
        phi_s: Vec::with_capacity(per_bin.len()),
    };
    for (n, yy, s) in per_bin {
        stats.phi_n.push(n);
        stats.phi_y.push(yy);
        stats.phi_s.push(s);
    }
    Ok(stats)
}

/// Principal eigenvector of `phi_s` scaled so its reference entry is exactly one.
pub fn steering_vector(phi_s: &CMatrix, reference: usize, bin: usize) -> Result<CVector> {
    if reference >= phi_s.nrows() {
        return Err(Error::InvalidParameter(format!(
            "reference channel {reference} out of range for {} channels",
            phi_s.nrows()
        )));
    }
    let (_, u) = linalg::principal_eigenpair(phi_s);
    let pivot = u[reference];
    if !(pivot.norm() >= 1e-12 * u.norm()) {
        return Err(Error::SteeringUndefined { bin });
    }
    let mut r = u / pivot;
    r[reference] = Complex64::new(1.0, 0.0);
    Ok(r)
}

/// `Phi_n^{-1} r / (r^H Phi_n^{-1} r)` with diagonal loading of `Phi_n`.
pub fn mvdr_vector(phi_n: &CMatrix, r: &CVector, loading: f64, bin: usize) -> Result<CVector> {
    let loaded = if linalg::trace_re(phi_n) > 0.0 {
        linalg::diagonal_load(phi_n, loading)
    } else {
        linalg::identity(phi_n.nrows())
    };
    let inv = HermitianInverse::new(&loaded).ok_or_else(|| Error::Numerical {
        bin,
        reason: "noise covariance is not positive definite after loading".into(),
    })?;
    let num = &inv.inverse * r;
    let denom = inv.quad_form(r.as_slice());
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::Numerical {
            bin,
            reason: format!("MVDR normaliser r^H Phi_n^-1 r = {denom}"),
        });
    }
    Ok(num / Complex64::new(denom, 0.0))
}

fn post_gain(lambda_s: f64, lambda_n: f64, floor: f64) -> f64 {
    let total = lambda_s + lambda_n;
    let g = if total > 0.0 { (lambda_s / total).sqrt() } else { 0.0 };
    g.max(floor).clamp(0.0, 1.0)
}

fn gains(lambda_s: &RealMask, lambda_n: &RealMask, floor: f64) -> TfArray<f64> {
    TfArray::from_fn(lambda_s.frames(), lambda_s.bins(), 1, |t, f, _| {
        post_gain(lambda_s.at(t, f), lambda_n.at(t, f), floor)
    })
}

/// Multi-channel Wiener filter from precomputed statistics and steering vectors.
pub fn mwf_weights(
    stats: &SecondOrderStats,
    steering: &[CVector],
    lambda_s: &RealMask,
    lambda_n: &RealMask,
    config: &BeamformConfig,
) -> Result<BeamformerBank> {
    if steering.len() != stats.phi_n.len() || lambda_s.bins() != steering.len() || lambda_s.shape() != lambda_n.shape() {
        return Err(Error::ShapeMismatch("statistics, steering vectors and masks disagree".into()));
    }
    let mvdr = stats
        .phi_n
        .par_iter()
        .zip(steering)
        .enumerate()
        .map(|(f, (phi_n, r))| mvdr_vector(phi_n, r, config.loading, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(BeamformerBank {
        steering: steering.to_vec(),
        mvdr,
        gain: gains(lambda_s, lambda_n, config.gain_floor),
    })
}

/// `s_hat(t, f) = w(t, f)^H y(t, f)`, returned as a one-channel spectrogram.
pub fn apply_filter(y: &MultichannelSpectrogram, bank: &BeamformerBank) -> Result<MultichannelSpectrogram> {
    if bank.mvdr.len() != y.num_bins()
        || bank.gain.frames() != y.num_frames()
        || bank.gain.bins() != y.num_bins()
        || bank.mvdr.iter().any(|w| w.len() != y.num_channels())
    {
        return Err(Error::ShapeMismatch("beamformer does not match the spectrogram".into()));
    }
    let out = TfArray::from_fn(y.num_frames(), y.num_bins(), 1, |t, f, _| {
        let g = *bank.gain.get(t, f, 0);
        let yv = y.bins.channel_slice(t, f);
        let acc: Complex64 = bank.mvdr[f].iter().zip(yv).map(|(w, v)| w.conj() * v).sum();
        acc * g
    });
    y.with_bins(out)
}

/// A frequency where the full filter could not be formed and a simpler one was used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BeamformWarning {
    /// No noise evidence; the noise covariance was taken as identity.
    NoNoiseFrames { bin: usize },
    /// No speech evidence or an undefined steering vector; steering fell back to the reference axis.
    ReferenceSteering { bin: usize },
}

impl fmt::Display for BeamformWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamformWarning::NoNoiseFrames { bin } => write!(f, "bin {bin}: noise mask empty, using identity noise covariance"),
            BeamformWarning::ReferenceSteering { bin } => write!(f, "bin {bin}: steering vector unavailable, steering at the reference microphone"),
        }
    }
}

/// Statistics, steering and weights in one pass, degrading per frequency
/// instead of failing when a mask carries no evidence there.
pub fn design_filter(
    y: &MultichannelSpectrogram,
    lambda_s: &RealMask,
    lambda_n: &RealMask,
    config: &BeamformConfig,
) -> Result<(BeamformerBank, Vec<BeamformWarning>)> {
    check_masks(y, &[lambda_s, lambda_n])?;
    let m = y.num_channels();
    if config.reference >= m {
        return Err(Error::InvalidParameter(format!(
            "reference channel {} out of range for {m} channels",
            config.reference
        )));
    }
    let unit = CVector::from_fn(m, |i, _| Complex64::new(if i == config.reference { 1.0 } else { 0.0 }, 0.0));
    let per_bin = (0..y.num_bins())
        .into_par_iter()
        .map(|f| {
            let mut warnings = Vec::new();
            let phi_n = weighted_covariance(y, lambda_n, f).unwrap_or_else(|| {
                warnings.push(BeamformWarning::NoNoiseFrames { bin: f });
                linalg::identity(m)
            });
            let steering = weighted_covariance(y, lambda_s, f)
                .and_then(|phi_y| steering_vector(&(&phi_y - &phi_n), config.reference, f).ok())
                .unwrap_or_else(|| {
                    warnings.push(BeamformWarning::ReferenceSteering { bin: f });
                    unit.clone()
                });
            let w = mvdr_vector(&phi_n, &steering, config.loading, f)?;
            Ok((steering, w, warnings))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bank = BeamformerBank {
        steering: Vec::with_capacity(per_bin.len()),
        mvdr: Vec::with_capacity(per_bin.len()),
        gain: gains(lambda_s, lambda_n, config.gain_floor),
    };
    let mut warnings = Vec::new();
    for (r, w, warn) in per_bin {
        bank.steering.push(r);
        bank.mvdr.push(w);
        warnings.extend(warn);
    }
    Ok((bank, warnings))
}

/// Which sub-array a band is processed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubArray {
    /// Narrow spacing, used below the split frequency.
    Small,
    /// Wide spacing, used at and above the split frequency.
    Large,
}

/// Number of bins whose centre frequency lies below `split_hz`.
pub fn split_bin(fft_size: usize, sample_rate: u32, split_hz: f64) -> usize {
    let bins = fft_size / 2 + 1;
    (0..bins)
        .take_while(|&k| (k as f64) * f64::from(sample_rate) / (fft_size as f64) < split_hz)
        .count()
}

/// Takes bins `< split` from `low` and the rest from `high`.
pub fn fuse_bands<T: Clone>(low: &TfArray<T>, high: &TfArray<T>, split: usize) -> Result<TfArray<T>> {
    if low.shape() != high.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", low.shape(), high.shape())));
    }
    Ok(TfArray::from_fn(low.frames(), low.bins(), low.channels(), |t, f, m| {
        if f < split {
            low.get(t, f, m).clone()
        } else {
            high.get(t, f, m).clone()
        }
    }))
}

/// Runs `process` on the small and large sub-arrays and stitches the
/// one-channel results together at `split_hz`.
pub fn subarray_fuse<F>(
    y: &MultichannelSpectrogram,
    subarrays: Option<(&[usize], &[usize])>,
    split_hz: f64,
    mut process: F,
) -> Result<MultichannelSpectrogram>
where
    F: FnMut(&MultichannelSpectrogram, SubArray) -> Result<MultichannelSpectrogram>,
{
    let (small, large) = subarrays.ok_or_else(|| Error::Geometry("array geometry declares no sub-arrays".into()))?;
    let low = process(&y.select_channels(small)?, SubArray::Small)?;
    let high = process(&y.select_channels(large)?, SubArray::Large)?;
    let split = split_bin(y.params.fft_size, y.sample_rate, split_hz);
    y.with_bins(fuse_bands(&low.bins, &high.bins, split)?)
}
