//! Waveforms, the short-time Fourier transform and its overlap-add inverse.
//!
//! Analysis uses a periodic Hann window at 50% overlap. Frames are
//! left-aligned with no edge padding: frame `t` covers samples
//! `[t * hop, t * hop + window_length)`. Synthesis is weighted overlap-add
//! normalised by the summed squared window, which reconstructs the input
//! exactly wherever two frames overlap.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tf::TfArray;

/// Multichannel time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidParameter("waveform needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::ShapeMismatch("channels differ in length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let picked = channels
            .iter()
            .map(|&m| {
                self.channels.get(m).cloned().ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "channel {m} out of range for {} channels",
                        self.channels.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(picked, self.sample_rate)
    }
}

/// Frame layout shared by analysis and synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftParams {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop: usize,
}

impl StftParams {
    /// Half-overlapping frames of `window_length` samples zero-padded to `fft_size`.
    pub fn new(fft_size: usize, window_length: usize) -> Result<Self> {
        let params = Self {
            fft_size,
            window_length,
            hop: window_length / 2,
        };
        params.validate()?;
        Ok(params)
    }

    /// Window length from milliseconds, rounded to the nearest even sample count.
    pub fn from_millis(fft_size: usize, window_ms: f64, sample_rate: u32) -> Result<Self> {
        if !(window_ms.is_finite() && window_ms > 0.0) {
            return Err(Error::InvalidParameter(format!("window length {window_ms} ms")));
        }
        let samples = (window_ms * 1e-3 * f64::from(sample_rate) / 2.0).round() as usize * 2;
        Self::new(fft_size, samples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.window_length % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "window length {} must be even and at least 2",
                self.window_length
            )));
        }
        if self.window_length > self.fft_size {
            return Err(Error::InvalidParameter(format!(
                "window length {} exceeds FFT size {}",
                self.window_length, self.fft_size
            )));
        }
        if self.hop * 2 != self.window_length {
            return Err(Error::InvalidParameter(format!(
                "hop {} must be half the window length {}",
                self.hop, self.window_length
            )));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.window_length).then(|| (samples - self.window_length) / self.hop + 1)
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize, sample_rate: u32) -> f64 {
        k as f64 * f64::from(sample_rate) / self.fft_size as f64
    }
}

/// One-sided complex STFT of every channel, indexed `(t, f, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    pub bins: TfArray<Complex64>,
    pub params: StftParams,
    pub sample_rate: u32,
    /// Length of the analysed signal; synthesis pads back to it.
    pub signal_len: usize,
}

impl MultichannelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.bins.frames()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.bins()
    }

    pub fn num_channels(&self) -> usize {
        self.bins.channels()
    }

    /// A spectrogram with the same framing but new values.
    pub fn with_bins(&self, bins: TfArray<Complex64>) -> Result<Self> {
        if bins.frames() != self.num_frames() || bins.bins() != self.num_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} bins do not match a {}x{} spectrogram",
                bins.frames(),
                bins.bins(),
                self.num_frames(),
                self.num_bins()
            )));
        }
        Ok(Self {
            bins,
            params: self.params,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        })
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        self.with_bins(self.bins.select_channels(channels)?)
    }
}

/// Periodic (DFT-even) Hann window.
pub fn hann_window(length: usize) -> Vec<f64> {
    (0..length)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / length as f64).cos())
        .collect()
}

pub fn stft(wave: &Waveform, params: StftParams) -> Result<MultichannelSpectrogram> {
    params.validate()?;
    let frames = params.num_frames(wave.len()).ok_or(Error::InputTooShort {
        samples: wave.len(),
        window: params.window_length,
    })?;
    let bins = params.num_bins();
    let window = hann_window(params.window_length);
    let fft = FftPlanner::new().plan_fft_forward(params.fft_size);

    let per_channel: Vec<Vec<Complex64>> = wave
        .channels()
        .par_iter()
        .map(|x| analyse_channel(x, &window, &params, frames, fft.as_ref()))
        .collect();

    let spec = TfArray::from_fn(frames, bins, wave.num_channels(), |t, f, m| {
        per_channel[m][t * bins + f]
    });
    Ok(MultichannelSpectrogram {
        bins: spec,
        params,
        sample_rate: wave.sample_rate(),
        signal_len: wave.len(),
    })
}

fn analyse_channel(
    x: &[f64],
    window: &[f64],
    params: &StftParams,
    frames: usize,
    fft: &dyn Fft<f64>,
) -> Vec<Complex64> {
    let bins = params.num_bins();
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); params.fft_size];
    for t in 0..frames {
        let start = t * params.hop;
        buf.fill(Complex64::new(0.0, 0.0));
        for (n, (b, w)) in buf.iter_mut().zip(window).enumerate() {
            *b = Complex64::new(x[start + n] * w, 0.0);
        }
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..bins]);
    }
    out
}

/// Squared-window sums below this are treated as uncovered edge samples.
const SYNTHESIS_NORM_FLOOR: f64 = 1e-3;

pub fn istft(spec: &MultichannelSpectrogram) -> Result<Waveform> {
    let params = spec.params;
    params.validate()?;
    if spec.num_bins() != params.num_bins() {
        return Err(Error::InvalidParameter(format!(
            "{} bins inconsistent with FFT size {}",
            spec.num_bins(),
            params.fft_size
        )));
    }
    let frames = spec.num_frames();
    if frames == 0 || spec.num_channels() == 0 {
        return Err(Error::InvalidParameter("empty spectrogram".into()));
    }
    let covered = (frames - 1) * params.hop + params.window_length;
    if spec.signal_len < covered {
        return Err(Error::InvalidParameter(format!(
            "signal length {} shorter than the {covered} samples the frames span",
            spec.signal_len
        )));
    }

    let window = hann_window(params.window_length);
    let mut norm = vec![0.0; covered];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            norm[t * params.hop + n] += w * w;
        }
    }
    let ifft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(params.fft_size);

    let channels: Vec<Vec<f64>> = (0..spec.num_channels())
        .into_par_iter()
        .map(|m| {
            let mut out = vec![0.0; spec.signal_len];
            let mut buf = vec![Complex64::new(0.0, 0.0); params.fft_size];
            let half = params.num_bins();
            let scale = 1.0 / params.fft_size as f64;
            for t in 0..frames {
                for k in 0..half {
                    buf[k] = *spec.bins.get(t, k, m);
                }
                for k in half..params.fft_size {
                    buf[k] = buf[params.fft_size - k].conj();
                }
                ifft.process(&mut buf);
                let start = t * params.hop;
                for (n, w) in window.iter().enumerate() {
                    out[start + n] += buf[n].re * scale * w;
                }
            }
            for (o, &d) in out.iter_mut().zip(&norm) {
                *o /= d.max(SYNTHESIS_NORM_FLOOR);
            }
            out
        })
        .collect();
    Waveform::new(channels, spec.sample_rate)
}
