//! Dense time-frequency-channel arrays.
//!
//! Values are stored row-major with time outermost, then frequency, then
//! channel, which is also the on-disk order of mask files. The channel
//! vector of a single time-frequency bin is therefore contiguous.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TfArray<T> {
    frames: usize,
    bins: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Clone> TfArray<T> {
    pub fn filled(frames: usize, bins: usize, channels: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            channels,
            values: vec![value; frames * bins * channels],
        }
    }
}

impl<T> TfArray<T> {
    pub fn from_vec(frames: usize, bins: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        let expected = frames
            .checked_mul(bins)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::ShapeMismatch("dimension overflow".into()))?;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {frames}x{bins}x{channels} array",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            channels,
            values,
        })
    }

    /// Builds an array by evaluating `f(t, f, m)` in storage order.
    pub fn from_fn(
        frames: usize,
        bins: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(frames * bins * channels);
        for t in 0..frames {
            for k in 0..bins {
                for m in 0..channels {
                    values.push(f(t, k, m));
                }
            }
        }
        Self {
            frames,
            bins,
            channels,
            values,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.bins, self.channels)
    }

    #[inline]
    fn offset(&self, t: usize, f: usize, m: usize) -> usize {
        debug_assert!(t < self.frames && f < self.bins && m < self.channels);
        (t * self.bins + f) * self.channels + m
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, m: usize) -> &T {
        &self.values[self.offset(t, f, m)]
    }

    #[inline]
    pub fn get_mut(&mut self, t: usize, f: usize, m: usize) -> &mut T {
        let i = self.offset(t, f, m);
        &mut self.values[i]
    }

    /// All channels of one time-frequency bin.
    #[inline]
    pub fn channel_slice(&self, t: usize, f: usize) -> &[T] {
        let start = self.offset(t, f, 0);
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub fn channel_slice_mut(&mut self, t: usize, f: usize) -> &mut [T] {
        let start = self.offset(t, f, 0);
        &mut self.values[start..start + self.channels]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> TfArray<U> {
        TfArray {
            frames: self.frames,
            bins: self.bins,
            channels: self.channels,
            values: self.values.iter().map(f).collect(),
        }
    }

    /// Elementwise combination of two arrays of identical shape.
    pub fn zip_map<U, V>(&self, other: &TfArray<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<TfArray<V>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(TfArray {
            frames: self.frames,
            bins: self.bins,
            channels: self.channels,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }
}

impl<T: Clone> TfArray<T> {
    /// Copies out the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&m| m >= self.channels) {
            return Err(Error::ShapeMismatch(format!(
                "channel {bad} out of range for {} channels",
                self.channels
            )));
        }
        Ok(Self::from_fn(self.frames, self.bins, channels.len(), |t, f, i| {
            self.get(t, f, channels[i]).clone()
        }))
    }
}
