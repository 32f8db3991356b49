//! Mask refinement with a two-component complex Gaussian mixture whose
//! time-varying weights are fixed to the prior masks.
//!
//! Each time-frequency observation vector `y` is modelled as
//! `sum_v alpha_v N_c(0, phi_v(t,f) R_v(f))` for `v` in {speech, noise}.
//! The priors `alpha_v` never change; EM alternates between posterior
//! masks `lambda_v`, per-bin variances `phi_v` and per-frequency spatial
//! covariances `R_v`. The posteriors are the refined masks.
//!
//! Every frequency is independent given `y` and the priors, so `refine`
//! runs one EM loop per frequency in parallel and sums the per-frequency
//! log-likelihoods in bin order.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, HermitianInverse};
use crate::mask::{complement_mask, RealMask};
use crate::signal::MultichannelSpectrogram;
use crate::tf::TfArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Speech,
    Noise,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Speech => "speech",
            Component::Noise => "noise",
        })
    }
}

/// One value per mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T> {
    pub speech: T,
    pub noise: T,
}

impl<T> Pair<T> {
    pub fn new(speech: T, noise: T) -> Self {
        Self { speech, noise }
    }

    pub fn get(&self, c: Component) -> &T {
        match c {
            Component::Speech => &self.speech,
            Component::Noise => &self.noise,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Component, &T) -> U) -> Pair<U> {
        Pair {
            speech: f(Component::Speech, &self.speech),
            noise: f(Component::Noise, &self.noise),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgmmConfig {
    pub iterations: usize,
    /// Project the speech covariance onto its principal eigenpair after every update.
    pub rank1: bool,
    /// Diagonal loading relative to `tr(R)/M`, applied before inversion.
    pub loading: f64,
    /// Variance floor relative to the mean per-frequency signal power.
    pub phi_floor: f64,
}

impl Default for CgmmConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            rank1: true,
            loading: 1e-6,
            phi_floor: 1e-10,
        }
    }
}

/// Something the EM had to work around at one frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CgmmWarning {
    /// The prior mass was zero; the covariance fell back to identity.
    EmptyPrior { component: Component, bin: usize },
    /// The posterior mass was zero; the previous covariance was kept.
    EmptyPosterior { component: Component, bin: usize },
}

impl fmt::Display for CgmmWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CgmmWarning::EmptyPrior { component, bin } => {
                write!(f, "bin {bin}: {component} prior is zero in every frame, using identity covariance")
            }
            CgmmWarning::EmptyPosterior { component, bin } => {
                write!(f, "bin {bin}: {component} posterior is zero in every frame, keeping previous covariance")
            }
        }
    }
}

/// Model parameters: variances per `(t, f)` and spatial covariances per `f`.
#[derive(Debug, Clone)]
pub struct CgmmParams {
    pub phi: Pair<TfArray<f64>>,
    pub r: Pair<Vec<CMatrix>>,
}

/// Output of the refinement.
#[derive(Debug, Clone)]
pub struct CgmmState {
    /// Refined masks; `speech + noise == 1` in every bin.
    pub lambda: Pair<RealMask>,
    pub phi: Pair<TfArray<f64>>,
    pub r: Pair<Vec<CMatrix>>,
    /// Priors, unchanged by the iterations.
    pub alpha: Pair<RealMask>,
    /// Data log-likelihood evaluated at each E-step.
    pub log_likelihood: Vec<f64>,
    pub warnings: Vec<CgmmWarning>,
}

/// Observation vectors of one frequency, `frames x channels`, frame-major.
struct BinData {
    values: Vec<Complex64>,
    channels: usize,
}

impl BinData {
    fn gather(y: &MultichannelSpectrogram, f: usize) -> Self {
        let (frames, channels) = (y.num_frames(), y.num_channels());
        let mut values = Vec::with_capacity(frames * channels);
        for t in 0..frames {
            values.extend_from_slice(y.bins.channel_slice(t, f));
        }
        Self { values, channels }
    }

    fn frames(&self) -> impl Iterator<Item = &[Complex64]> {
        self.values.chunks_exact(self.channels)
    }

    fn mean_power(&self) -> f64 {
        let n = self.values.len().max(1) as f64;
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / n
    }
}

fn column(mask: &RealMask, f: usize) -> Vec<f64> {
    (0..mask.frames()).map(|t| mask.at(t, f)).collect()
}

fn tf_column(a: &TfArray<f64>, f: usize) -> Vec<f64> {
    (0..a.frames()).map(|t| *a.get(t, f, 0)).collect()
}

fn assemble(columns: &[Vec<f64>], frames: usize) -> TfArray<f64> {
    TfArray::from_fn(frames, columns.len(), 1, |t, f, _| columns[f][t])
}

fn check_mask(y: &MultichannelSpectrogram, mask: &RealMask, what: &str) -> Result<()> {
    if mask.frames() != y.num_frames() || mask.bins() != y.num_bins() || mask.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "{what} mask is {:?}, expected ({}, {}, 1)",
            mask.shape(),
            y.num_frames(),
            y.num_bins()
        )));
    }
    Ok(())
}

fn load_and_invert(r: &CMatrix, loading: f64, bin: usize, component: Component) -> Result<HermitianInverse> {
    HermitianInverse::new(&linalg::diagonal_load(r, loading)).ok_or_else(|| Error::Numerical {
        bin,
        reason: format!("{component} spatial covariance is not positive definite after loading"),
    })
}

fn variance_floor(data: &BinData, rel: f64) -> f64 {
    (rel * data.mean_power()).max(f64::MIN_POSITIVE)
}

// ---- per-frequency kernels ----

fn init_bin(data: &BinData, weights: &[f64]) -> Option<CMatrix> {
    let m = data.channels;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut acc = linalg::zeros(m);
    for (y, &w) in data.frames().zip(weights) {
        if w > 0.0 {
            linalg::add_outer(&mut acc, y, w);
        }
    }
    let norm = linalg::trace_re(&acc) / m as f64;
    if !(norm > 0.0 && norm.is_finite()) {
        return None;
    }
    acc.apply(|v| *v = *v / norm);
    linalg::hermitize(&mut acc);
    Some(acc)
}

fn phi_bin(data: &BinData, inv: &HermitianInverse, floor: f64) -> Vec<f64> {
    let m = data.channels as f64;
    data.frames().map(|y| (inv.quad_form(y) / m).max(floor)).collect()
}

/// Log of the zero-mean circular complex Gaussian density with covariance `phi * R`.
#[inline]
fn log_density(q: f64, phi: f64, log_det_r: f64, m: usize) -> f64 {
    let m = m as f64;
    -m * PI.ln() - m * phi.ln() - log_det_r - q / phi
}

struct EStepBin {
    speech: Vec<f64>,
    noise: Vec<f64>,
    log_likelihood: f64,
}

fn e_step_bin(
    data: &BinData,
    alpha: Pair<&[f64]>,
    phi: Pair<&[f64]>,
    inv: Pair<&HermitianInverse>,
    bin: usize,
) -> Result<EStepBin> {
    let frames = alpha.speech.len();
    let mut speech = Vec::with_capacity(frames);
    let mut noise = Vec::with_capacity(frames);
    let mut total = 0.0;
    for (t, y) in data.frames().enumerate() {
        let (a_s, a_n) = (alpha.speech[t], alpha.noise[t]);
        let ls = log_density(inv.speech.quad_form(y), phi.speech[t], inv.speech.log_det, data.channels);
        let ln = log_density(inv.noise.quad_form(y), phi.noise[t], inv.noise.log_det, data.channels);
        if !ls.is_finite() || !ln.is_finite() {
            return Err(Error::Numerical {
                bin,
                reason: format!("non-finite density in frame {t}"),
            });
        }
        let (lam_s, lam_n, lse) = match (a_s > 0.0, a_n > 0.0) {
            (true, false) => (1.0, 0.0, a_s.ln() + ls),
            (false, true) => (0.0, 1.0, a_n.ln() + ln),
            (false, false) => {
                return Err(Error::InvalidParameter(format!(
                    "both priors vanish at frame {t}, bin {bin}"
                )))
            }
            (true, true) => {
                let (ws, wn) = (a_s.ln() + ls, a_n.ln() + ln);
                let (hi, lo) = if ws >= wn { (ws, wn) } else { (wn, ws) };
                let lse = hi + (lo - hi).exp().ln_1p();
                // the smaller posterior is computed directly, its complement exactly
                let small = 1.0 / (1.0 + (hi - lo).exp());
                if ws <= wn {
                    (small, 1.0 - small, lse)
                } else {
                    (1.0 - small, small, lse)
                }
            }
        };
        speech.push(lam_s);
        noise.push(lam_n);
        total += lse;
    }
    Ok(EStepBin {
        speech,
        noise,
        log_likelihood: total,
    })
}

fn r_bin(data: &BinData, lambda: &[f64], phi: &[f64]) -> Option<CMatrix> {
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut acc = linalg::zeros(data.channels);
    for ((y, &l), &p) in data.frames().zip(lambda).zip(phi) {
        if l > 0.0 {
            linalg::add_outer(&mut acc, y, l / p);
        }
    }
    acc.apply(|v| *v = *v / total);
    linalg::hermitize(&mut acc);
    // posterior mass so small that every contribution underflowed
    let tr = linalg::trace_re(&acc);
    (tr > 0.0 && tr.is_finite()).then_some(acc)
}

fn rank1_or_keep(r: CMatrix) -> CMatrix {
    let (sigma, u) = linalg::principal_eigenpair(&r);
    if sigma > 0.0 {
        linalg::rank_one(sigma, &u)
    } else {
        r
    }
}

// ---- public operations over all frequencies ----

/// Prior-weighted, trace-normalised spatial covariances.
///
/// Frequencies with zero prior mass fall back to the identity.
pub fn init_covariances(
    y: &MultichannelSpectrogram,
    alpha: &Pair<RealMask>,
) -> Result<(Pair<Vec<CMatrix>>, Vec<CgmmWarning>)> {
    check_mask(y, &alpha.speech, "speech prior")?;
    check_mask(y, &alpha.noise, "noise prior")?;
    let m = y.num_channels();
    let mut warnings = Vec::new();
    let mut out = Pair::new(Vec::new(), Vec::new());
    for f in 0..y.num_bins() {
        let data = BinData::gather(y, f);
        for c in [Component::Speech, Component::Noise] {
            let r = init_bin(&data, &column(alpha.get(c), f)).unwrap_or_else(|| {
                warnings.push(CgmmWarning::EmptyPrior { component: c, bin: f });
                linalg::identity(m)
            });
            match c {
                Component::Speech => out.speech.push(r),
                Component::Noise => out.noise.push(r),
            }
        }
    }
    Ok((out, warnings))
}

/// Posterior masks and the data log-likelihood under `params`.
pub fn e_step(
    y: &MultichannelSpectrogram,
    alpha: &Pair<RealMask>,
    params: &CgmmParams,
    config: &CgmmConfig,
) -> Result<(Pair<RealMask>, f64)> {
    check_mask(y, &alpha.speech, "speech prior")?;
    check_mask(y, &alpha.noise, "noise prior")?;
    let per_bin = (0..y.num_bins())
        .into_par_iter()
        .map(|f| {
            let data = BinData::gather(y, f);
            let inv_s = load_and_invert(&params.r.speech[f], config.loading, f, Component::Speech)?;
            let inv_n = load_and_invert(&params.r.noise[f], config.loading, f, Component::Noise)?;
            e_step_bin(
                &data,
                Pair::new(&column(&alpha.speech, f), &column(&alpha.noise, f)),
                Pair::new(&tf_column(&params.phi.speech, f), &tf_column(&params.phi.noise, f)),
                Pair::new(&inv_s, &inv_n),
                f,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = y.num_frames();
    let speech: Vec<Vec<f64>> = per_bin.iter().map(|b| b.speech.clone()).collect();
    let noise: Vec<Vec<f64>> = per_bin.iter().map(|b| b.noise.clone()).collect();
    let total = per_bin.iter().map(|b| b.log_likelihood).sum();
    Ok((
        Pair::new(
            RealMask::from_trusted(assemble(&speech, frames)),
            RealMask::from_trusted(assemble(&noise, frames)),
        ),
        total,
    ))
}

/// Per-bin variances `phi = y^H R^{-1} y / M`, floored.
pub fn m_step_phi(
    y: &MultichannelSpectrogram,
    r: &Pair<Vec<CMatrix>>,
    config: &CgmmConfig,
) -> Result<Pair<TfArray<f64>>> {
    let per_bin = (0..y.num_bins())
        .into_par_iter()
        .map(|f| {
            let data = BinData::gather(y, f);
            let floor = variance_floor(&data, config.phi_floor);
            let inv_s = load_and_invert(&r.speech[f], config.loading, f, Component::Speech)?;
            let inv_n = load_and_invert(&r.noise[f], config.loading, f, Component::Noise)?;
            Ok((phi_bin(&data, &inv_s, floor), phi_bin(&data, &inv_n, floor)))
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = y.num_frames();
    let (s, n): (Vec<_>, Vec<_>) = per_bin.into_iter().unzip();
    Ok(Pair::new(assemble(&s, frames), assemble(&n, frames)))
}

/// Posterior-weighted, variance-normalised spatial covariances.
///
/// Frequencies with zero posterior mass keep `previous`.
pub fn m_step_r(
    y: &MultichannelSpectrogram,
    lambda: &Pair<RealMask>,
    phi: &Pair<TfArray<f64>>,
    previous: &Pair<Vec<CMatrix>>,
) -> Result<(Pair<Vec<CMatrix>>, Vec<CgmmWarning>)> {
    check_mask(y, &lambda.speech, "speech posterior")?;
    check_mask(y, &lambda.noise, "noise posterior")?;
    let mut warnings = Vec::new();
    let mut out = Pair::new(Vec::new(), Vec::new());
    for f in 0..y.num_bins() {
        let data = BinData::gather(y, f);
        for c in [Component::Speech, Component::Noise] {
            let r = r_bin(&data, &column(lambda.get(c), f), &tf_column(phi.get(c), f))
                .unwrap_or_else(|| {
                    warnings.push(CgmmWarning::EmptyPosterior { component: c, bin: f });
                    previous.get(c)[f].clone()
                });
            match c {
                Component::Speech => out.speech.push(r),
                Component::Noise => out.noise.push(r),
            }
        }
    }
    Ok((out, warnings))
}

/// Best rank-one approximation `sigma_1 u_1 u_1^H` of a Hermitian PSD matrix.
pub fn rank1_source_approx(r: &CMatrix) -> CMatrix {
    rank1_or_keep(r.clone())
}

struct BinResult {
    lambda: Pair<Vec<f64>>,
    phi: Pair<Vec<f64>>,
    r: Pair<CMatrix>,
    log_likelihood: Vec<f64>,
    warnings: Vec<CgmmWarning>,
}

fn refine_bin(
    data: &BinData,
    alpha: Pair<&[f64]>,
    config: &CgmmConfig,
    bin: usize,
) -> Result<BinResult> {
    let m = data.channels;
    let mut warnings = Vec::new();
    let mut init = |c: Component, w: &[f64]| {
        init_bin(data, w).unwrap_or_else(|| {
            warnings.push(CgmmWarning::EmptyPrior { component: c, bin });
            linalg::identity(m)
        })
    };
    let mut r = Pair::new(init(Component::Speech, alpha.speech), init(Component::Noise, alpha.noise));
    let floor = variance_floor(data, config.phi_floor);

    let mut inv = Pair::new(
        load_and_invert(&r.speech, config.loading, bin, Component::Speech)?,
        load_and_invert(&r.noise, config.loading, bin, Component::Noise)?,
    );
    // variances matching the initial covariances feed the first E-step
    let mut phi = Pair::new(phi_bin(data, &inv.speech, floor), phi_bin(data, &inv.noise, floor));
    let mut lambda = Pair::new(alpha.speech.to_vec(), alpha.noise.to_vec());
    let mut log_likelihood = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        let e = e_step_bin(
            data,
            Pair::new(alpha.speech, alpha.noise),
            Pair::new(&phi.speech, &phi.noise),
            Pair::new(&inv.speech, &inv.noise),
            bin,
        )?;
        log_likelihood.push(e.log_likelihood);
        lambda = Pair::new(e.speech, e.noise);

        phi = Pair::new(phi_bin(data, &inv.speech, floor), phi_bin(data, &inv.noise, floor));

        let mut next = Pair::new(
            r_bin(data, &lambda.speech, &phi.speech),
            r_bin(data, &lambda.noise, &phi.noise),
        );
        if next.speech.is_none() {
            warnings.push(CgmmWarning::EmptyPosterior { component: Component::Speech, bin });
        }
        if next.noise.is_none() {
            warnings.push(CgmmWarning::EmptyPosterior { component: Component::Noise, bin });
        }
        let mut r_s = next.speech.take().unwrap_or_else(|| r.speech.clone());
        if config.rank1 {
            r_s = rank1_or_keep(r_s);
        }
        r = Pair::new(r_s, next.noise.take().unwrap_or_else(|| r.noise.clone()));
        inv = Pair::new(
            load_and_invert(&r.speech, config.loading, bin, Component::Speech)?,
            load_and_invert(&r.noise, config.loading, bin, Component::Noise)?,
        );
    }

    Ok(BinResult {
        lambda,
        phi,
        r,
        log_likelihood,
        warnings,
    })
}

/// Runs the fixed-prior EM from the pooled speech prior `alpha_s`.
///
/// With `iterations == 0` the returned posteriors are the priors themselves.
pub fn refine(y: &MultichannelSpectrogram, alpha_s: &RealMask, config: &CgmmConfig) -> Result<CgmmState> {
    check_mask(y, alpha_s, "speech prior")?;
    if !(config.loading >= 0.0 && config.loading.is_finite()) {
        return Err(Error::InvalidParameter(format!("diagonal loading {}", config.loading)));
    }
    let alpha = Pair::new(alpha_s.clone(), complement_mask(alpha_s));
    let (frames, bins) = (y.num_frames(), y.num_bins());

    let results = (0..bins)
        .into_par_iter()
        .map(|f| {
            let data = BinData::gather(y, f);
            refine_bin(
                &data,
                Pair::new(&column(&alpha.speech, f), &column(&alpha.noise, f)),
                config,
                f,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut log_likelihood = vec![0.0; config.iterations];
    for res in &results {
        for (acc, l) in log_likelihood.iter_mut().zip(&res.log_likelihood) {
            *acc += l;
        }
    }
    let warnings: Vec<CgmmWarning> = results.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
    for w in &warnings {
        log::warn!("{w}");
    }

    let pick = |sel: fn(&BinResult) -> &Vec<f64>| {
        assemble(&results.iter().map(|r| sel(r).clone()).collect::<Vec<_>>(), frames)
    };
    let lambda = Pair::new(
        RealMask::from_trusted(pick(|r| &r.lambda.speech)),
        RealMask::from_trusted(pick(|r| &r.lambda.noise)),
    );
    let phi = Pair::new(pick(|r| &r.phi.speech), pick(|r| &r.phi.noise));
    let (r_s, r_n) = results.into_iter().map(|r| (r.r.speech, r.r.noise)).unzip();

    Ok(CgmmState {
        lambda,
        phi,
        r: Pair::new(r_s, r_n),
        alpha,
        log_likelihood,
        warnings,
    })
}

/// Writes `iteration,loglik` rows, iterations counted from 1.
pub fn write_log_likelihood_csv(mut out: impl Write, log_likelihood: &[f64]) -> std::io::Result<()> {
    writeln!(out, "iteration,loglik")?;
    for (i, l) in log_likelihood.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1)?;
    }
    Ok(())
}
