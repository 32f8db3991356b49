//! Time-frequency masks: complex filters, energy-constrained real masks,
//! channel pooling, and synthetic oracle masks for testing without a network.

use num_complex::{Complex32, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mcmf::MaskPayload;
use crate::signal::MultichannelSpectrogram;
use crate::tf::TfArray;

/// Complex per-bin filter coefficients, shaped like the spectrogram they act on.
pub type ComplexMask = TfArray<Complex64>;

/// Real mask with every entry in `[0, 1]`.
///
/// Either per-channel (`T x F x M`) or pooled (`T x F x 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct RealMask(TfArray<f64>);

impl RealMask {
    pub fn new(values: TfArray<f64>) -> Result<Self> {
        if let Some(bad) = values.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    /// Constant mask.
    pub fn filled(frames: usize, bins: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(TfArray::filled(frames, bins, channels, value))
    }

    pub(crate) fn from_trusted(values: TfArray<f64>) -> Self {
        debug_assert!(values.values().iter().all(|v| (0.0..=1.0).contains(v)));
        Self(values)
    }

    pub fn array(&self) -> &TfArray<f64> {
        &self.0
    }

    pub fn into_array(self) -> TfArray<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn bins(&self) -> usize {
        self.0.bins()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    /// Value of a pooled mask (or channel 0) at `(t, f)`.
    #[inline]
    pub fn at(&self, t: usize, f: usize) -> f64 {
        *self.0.get(t, f, 0)
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, m: usize) -> f64 {
        *self.0.get(t, f, m)
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        Ok(Self(self.0.select_channels(channels)?))
    }

    pub fn to_payload(&self) -> MaskPayload {
        MaskPayload::Real(self.0.map(|&v| v as f32))
    }
}

fn check_shape(y: &MultichannelSpectrogram, shape: (usize, usize, usize), what: &str) -> Result<()> {
    if y.bins.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {:?} but the spectrogram is {:?}",
            shape,
            y.bins.shape()
        )));
    }
    Ok(())
}

/// Interprets a decoded mask file as complex filter coefficients.
pub fn complex_mask_from_payload(payload: &MaskPayload) -> ComplexMask {
    match payload {
        MaskPayload::Real(a) => a.map(|&v| Complex64::new(f64::from(v), 0.0)),
        MaskPayload::Complex(a) => a.map(|c| Complex64::new(f64::from(c.re), f64::from(c.im))),
    }
}

pub fn complex_mask_to_payload(mask: &ComplexMask) -> MaskPayload {
    MaskPayload::Complex(mask.map(|c| Complex32::new(c.re as f32, c.im as f32)))
}

/// Interprets a decoded real mask file as probabilities.
pub fn real_mask_from_payload(payload: &MaskPayload) -> Result<RealMask> {
    match payload {
        MaskPayload::Real(a) => RealMask::new(a.map(|&v| f64::from(v))),
        MaskPayload::Complex(_) => Err(Error::MaskFile(
            "expected a real-valued mask, found complex data".into(),
        )),
    }
}

/// Filters each bin with its complex coefficient: `xi = H * y`.
pub fn apply_complex_mask(y: &MultichannelSpectrogram, h: &ComplexMask) -> Result<MultichannelSpectrogram> {
    check_shape(y, h.shape(), "complex mask")?;
    y.with_bins(y.bins.zip_map(h, |&yv, &hv| {
        Complex64::new(
            hv.re * yv.re - hv.im * yv.im,
            hv.re * yv.im + hv.im * yv.re,
        )
    })?)
}

/// Energy-constrained real mask `|xi|^2 / (|y - xi|^2 + |xi|^2)`.
///
/// Bins where both terms vanish are assigned 0.
pub fn energetic_mask(y: &MultichannelSpectrogram, xi: &MultichannelSpectrogram) -> Result<RealMask> {
    check_shape(y, xi.bins.shape(), "source estimate")?;
    let values = y.bins.zip_map(&xi.bins, |&yv, &xv| {
        let speech = xv.norm_sqr();
        let denom = (yv - xv).norm_sqr() + speech;
        if denom > 0.0 {
            (speech / denom).clamp(0.0, 1.0)
        } else {
            0.0
        }
    })?;
    Ok(RealMask::from_trusted(values))
}

/// Per-bin median across channels; even channel counts average the two
/// central order statistics.
pub fn median_pool(gammas: &RealMask) -> RealMask {
    let a = gammas.array();
    let mut scratch = Vec::with_capacity(a.channels());
    let pooled = TfArray::from_fn(a.frames(), a.bins(), 1, |t, f, _| {
        scratch.clear();
        scratch.extend_from_slice(a.channel_slice(t, f));
        scratch.sort_by(f64::total_cmp);
        let n = scratch.len();
        if n % 2 == 1 {
            scratch[n / 2]
        } else {
            0.5 * (scratch[n / 2 - 1] + scratch[n / 2])
        }
    });
    RealMask::from_trusted(pooled)
}

pub fn complement_mask(alpha_s: &RealMask) -> RealMask {
    RealMask::from_trusted(alpha_s.array().map(|&v| 1.0 - v))
}

/// Ideal ratio mask `|s|^2 / (|s|^2 + |n|^2)` from the separated components.
pub fn oracle_mask(s: &MultichannelSpectrogram, n: &MultichannelSpectrogram) -> Result<RealMask> {
    check_shape(s, n.bins.shape(), "noise spectrogram")?;
    let values = s.bins.zip_map(&n.bins, |sv, nv| {
        let (ps, pn) = (sv.norm_sqr(), nv.norm_sqr());
        if ps + pn > 0.0 {
            ps / (ps + pn)
        } else {
            0.0
        }
    })?;
    Ok(RealMask::from_trusted(values))
}

pub const CORRUPTION_CLIP: f64 = 1e-6;

/// Perturbs a mask with Gaussian noise of standard deviation `noise_level`
/// in the logit domain. Values are clipped to `[1e-6, 1 - 1e-6]` first.
pub fn corrupt_mask(gamma: &RealMask, noise_level: f64, seed: u64) -> Result<RealMask> {
    if !(noise_level.is_finite() && noise_level >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise level {noise_level}")));
    }
    let clip = |v: f64| v.clamp(CORRUPTION_CLIP, 1.0 - CORRUPTION_CLIP);
    if noise_level == 0.0 {
        return Ok(RealMask::from_trusted(gamma.array().map(|&v| clip(v))));
    }
    let normal = Normal::new(0.0, noise_level).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = gamma.array().map(|&v| {
        let p = clip(v);
        let logit = (p / (1.0 - p)).ln() + normal.sample(&mut rng);
        1.0 / (1.0 + (-logit).exp())
    });
    Ok(RealMask::from_trusted(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftParams;
    use proptest::prelude::*;

    fn spec_of(values: Vec<Complex64>, t: usize, f: usize, m: usize) -> MultichannelSpectrogram {
        MultichannelSpectrogram {
            bins: TfArray::from_vec(t, f, m, values).unwrap(),
            params: StftParams {
                fft_size: 2 * (f - 1).max(1),
                window_length: 2 * (f - 1).max(1),
                hop: (f - 1).max(1),
            },
            sample_rate: 16000,
            signal_len: 0,
        }
    }

    fn scalar(v: Complex64) -> MultichannelSpectrogram {
        spec_of(vec![v], 1, 1, 1)
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn identity_and_zero_masks() {
        let y = spec_of((0..12).map(|i| c(i as f64, -0.5 * i as f64)).collect(), 2, 3, 2);
        let ones = TfArray::filled(2, 3, 2, c(1.0, 0.0));
        assert_eq!(apply_complex_mask(&y, &ones).unwrap(), y);
        let zeros = TfArray::filled(2, 3, 2, c(0.0, 0.0));
        assert!(apply_complex_mask(&y, &zeros).unwrap().bins.values().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn rotation_mask() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let xi = apply_complex_mask(&scalar(c(1.0, 0.0)), &TfArray::filled(1, 1, 1, c(s, s))).unwrap();
        let v = *xi.bins.get(0, 0, 0);
        assert!((v - c(s, s)).norm() < 1e-15);
        assert!((v.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let y = spec_of(vec![c(1.0, 0.0); 4], 2, 2, 1);
        assert!(apply_complex_mask(&y, &TfArray::filled(2, 2, 2, c(1.0, 0.0))).is_err());
        assert!(energetic_mask(&y, &spec_of(vec![c(1.0, 0.0); 2], 1, 2, 1)).is_err());
    }

    #[test]
    fn energetic_mask_examples() {
        let y = scalar(c(0.3, -2.0));
        assert_eq!(energetic_mask(&y, &y).unwrap().at(0, 0), 1.0);
        assert_eq!(energetic_mask(&y, &scalar(c(0.0, 0.0))).unwrap().at(0, 0), 0.0);
        assert_eq!(energetic_mask(&scalar(c(2.0, 0.0)), &scalar(c(1.0, 0.0))).unwrap().at(0, 0), 0.5);
        let silent = scalar(c(0.0, 0.0));
        assert_eq!(energetic_mask(&silent, &silent).unwrap().at(0, 0), 0.0);
    }

    #[test]
    fn median_pool_examples() {
        let g = RealMask::new(TfArray::from_vec(1, 1, 6, vec![1.0, 0.0, 0.4, 0.0, 1.0, 0.2]).unwrap()).unwrap();
        assert!((median_pool(&g).at(0, 0) - 0.3).abs() < 1e-15);
        let same = RealMask::filled(3, 4, 5, 0.37).unwrap();
        assert!(median_pool(&same).values().iter().all(|&v| v == 0.37));
        let single = RealMask::new(TfArray::from_vec(1, 3, 1, vec![0.1, 0.9, 0.5]).unwrap()).unwrap();
        assert_eq!(median_pool(&single), single);
    }

    #[test]
    fn complement_examples() {
        let a = RealMask::new(TfArray::from_vec(1, 2, 1, vec![0.0, 0.3]).unwrap()).unwrap();
        let n = complement_mask(&a);
        assert_eq!(n.at(0, 0), 1.0);
        assert!((n.at(0, 1) - 0.7).abs() < 1e-15);
        for (s, n) in a.values().iter().zip(n.values()) {
            assert_eq!(s + n, 1.0);
        }
    }

    #[test]
    fn oracle_examples() {
        let s = spec_of(vec![c(1.0, 1.0), c(3.0, 0.0), c(0.0, 2.0)], 1, 3, 1);
        let n = spec_of(vec![c(0.0, 0.0), c(0.0, 4.0), c(2.0, 0.0)], 1, 3, 1);
        let g = oracle_mask(&s, &n).unwrap();
        assert_eq!(g.at(0, 0), 1.0);
        assert!((g.at(0, 1) - 0.36).abs() < 1e-15);
        assert_eq!(g.at(0, 2), 0.5);
    }

    #[test]
    fn corruption_is_deterministic_and_clipped() {
        let g = RealMask::new(TfArray::from_fn(10, 7, 2, |t, f, m| ((t * 7 + f + m) % 11) as f64 / 10.0)).unwrap();
        let clean = corrupt_mask(&g, 0.0, 1).unwrap();
        for (a, b) in g.values().iter().zip(clean.values()) {
            assert_eq!(*b, a.clamp(1e-6, 1.0 - 1e-6));
        }
        let x = corrupt_mask(&g, 1.5, 42).unwrap();
        assert_eq!(x, corrupt_mask(&g, 1.5, 42).unwrap());
        assert_ne!(x, corrupt_mask(&g, 1.5, 43).unwrap());
        assert!(x.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(corrupt_mask(&g, -1.0, 0).is_err());
    }

    #[test]
    fn real_mask_validation() {
        assert!(RealMask::filled(1, 1, 1, 1.5).is_err());
        assert!(RealMask::new(TfArray::from_vec(1, 1, 1, vec![f64::NAN]).unwrap()).is_err());
        let p = MaskPayload::Complex(TfArray::filled(1, 1, 1, Complex32::new(0.5, 0.0)));
        assert!(real_mask_from_payload(&p).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, -1e-6..1e-6f64, Just(0.0)]
    }

    proptest! {
        #[test]
        fn energetic_mask_is_bounded(yr in finite(), yi in finite(), xr in finite(), xi in finite()) {
            let g = energetic_mask(&scalar(c(yr, yi)), &scalar(c(xr, xi))).unwrap().at(0, 0);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn energetic_mask_ignores_common_rotation(
            yr in -10.0..10.0f64, yi in -10.0..10.0f64, xr in -10.0..10.0f64, xi in -10.0..10.0f64,
            theta in 0.0..std::f64::consts::TAU
        ) {
            let rot = Complex64::from_polar(1.0, theta);
            let a = energetic_mask(&scalar(c(yr, yi)), &scalar(c(xr, xi))).unwrap().at(0, 0);
            let b = energetic_mask(&scalar(c(yr, yi) * rot), &scalar(c(xr, xi) * rot)).unwrap().at(0, 0);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn median_pool_ignores_channel_order(vals in proptest::collection::vec(0.0..=1.0f64, 6), shift in 0usize..6) {
            let a = RealMask::new(TfArray::from_vec(1, 1, 6, vals.clone()).unwrap()).unwrap();
            let mut rotated = vals.clone();
            rotated.rotate_left(shift);
            rotated.reverse();
            let b = RealMask::new(TfArray::from_vec(1, 1, 6, rotated).unwrap()).unwrap();
            prop_assert_eq!(median_pool(&a).at(0, 0), median_pool(&b).at(0, 0));
            prop_assert!((0.0..=1.0).contains(&median_pool(&a).at(0, 0)));
        }

        // masks carry float32 precision on disk; there the double complement is exact
        #[test]
        fn complement_is_an_involution(vals in proptest::collection::vec(0.0..=1.0f32, 1..64)) {
            let n = vals.len();
            let a = RealMask::new(TfArray::from_vec(1, n, 1, vals.iter().map(|&v| f64::from(v)).collect()).unwrap()).unwrap();
            prop_assert_eq!(complement_mask(&complement_mask(&a)), a);
        }

        #[test]
        fn complement_is_an_involution_to_rounding(vals in proptest::collection::vec(0.0..=1.0f64, 1..64)) {
            let n = vals.len();
            let a = RealMask::new(TfArray::from_vec(1, n, 1, vals).unwrap()).unwrap();
            let back = complement_mask(&complement_mask(&a));
            for (x, y) in a.values().iter().zip(back.values()) {
                prop_assert!((x - y).abs() <= f64::EPSILON);
            }
        }
    }
}
