//! End-to-end workflows: enhancing recordings, simulated experiments and
//! scenario rendering.

use std::fmt;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::beamform::{self, fuse_bands, split_bin, BeamformConfig};
use crate::cgmm::{self, CgmmConfig};
use crate::config::{Mode, PipelineConfig};
use crate::error::{Error, Result};
use crate::mask::{self, ComplexMask, RealMask};
use crate::mcmf;
use crate::metrics::{self, RocCurve};
use crate::room::{self, Scenario, ScenarioRanges};
use crate::signal::{istft, stft, MultichannelSpectrogram};
use crate::tf::TfArray;
use crate::wav::{self, WavEncoding};

/// The six processing variants compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    CrmWithout,
    CrmWith,
    ScWithout,
    ScWith,
    McWithout,
    McWith,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CrmWithout,
        Variant::CrmWith,
        Variant::ScWithout,
        Variant::ScWith,
        Variant::McWithout,
        Variant::McWith,
    ];

    pub fn new(mode: Mode, refine: bool) -> Self {
        match (mode, refine) {
            (Mode::Crm, false) => Variant::CrmWithout,
            (Mode::Crm, true) => Variant::CrmWith,
            (Mode::Sc, false) => Variant::ScWithout,
            (Mode::Sc, true) => Variant::ScWith,
            (Mode::Mc, false) => Variant::McWithout,
            (Mode::Mc, true) => Variant::McWith,
        }
    }

    pub fn refined(self) -> bool {
        matches!(self, Variant::CrmWith | Variant::ScWith | Variant::McWith)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::CrmWithout => "crm_wo",
            Variant::CrmWith => "crm_w",
            Variant::ScWithout => "sc_wo",
            Variant::ScWith => "sc_w",
            Variant::McWithout => "mc_wo",
            Variant::McWith => "mc_w",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the speech evidence comes from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Per-channel complex filters `H`, one channel per microphone.
    Complex(&'a ComplexMask),
    /// Per-channel real masks already in energetic form.
    Energetic(&'a RealMask),
    /// One pooled speech prior shared by all channels.
    Pooled(&'a RealMask),
}

impl<'a> MaskSource<'a> {
    fn check(&self, y: &MultichannelSpectrogram) -> Result<()> {
        let (t, f, m) = match self {
            MaskSource::Complex(h) => h.shape(),
            MaskSource::Energetic(g) => g.shape(),
            MaskSource::Pooled(a) => a.shape(),
        };
        let want_m = if matches!(self, MaskSource::Pooled(_)) { 1 } else { y.num_channels() };
        if (t, f, m) != (y.num_frames(), y.num_bins(), want_m) {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} does not match signal ({}, {}, {want_m})",
                (t, f, m),
                y.num_frames(),
                y.num_bins()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnhanceOptions {
    pub cgmm: CgmmConfig,
    pub beamform: BeamformConfig,
    pub band_split_hz: f64,
    pub subarray: bool,
}

impl EnhanceOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            cgmm: cfg.em,
            beamform: cfg.beamform_config(),
            band_split_hz: cfg.beamform.band_split_hz,
            subarray: cfg.beamform.subarray,
        }
    }
}

/// Single-channel outputs of the requested variants plus the masks that drove them.
#[derive(Debug, Clone)]
pub struct VariantOutputs {
    pub outputs: Vec<(Variant, MultichannelSpectrogram)>,
    /// Pooled prior; band-fused across sub-arrays when they are used.
    pub alpha_s: RealMask,
    /// Refined speech posterior, present when a refined variant ran.
    pub lambda_s: Option<RealMask>,
    /// Per-iteration EM log-likelihood, summed over sub-arrays.
    pub log_likelihood: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl VariantOutputs {
    pub fn get(&self, v: Variant) -> Option<&MultichannelSpectrogram> {
        self.outputs.iter().find(|(w, _)| *w == v).map(|(_, s)| s)
    }
}

struct ArrayOutputs {
    outputs: Vec<TfArray<Complex64>>,
    alpha_s: RealMask,
    lambda_s: Option<RealMask>,
    log_likelihood: Option<Vec<f64>>,
    warnings: Vec<String>,
}

fn scale_reference(y: &MultichannelSpectrogram, reference: usize, gain: impl Fn(usize, usize) -> Complex64) -> TfArray<Complex64> {
    TfArray::from_fn(y.num_frames(), y.num_bins(), 1, |t, f, _| gain(t, f) * y.bins.get(t, f, reference))
}

fn process_array(y: &MultichannelSpectrogram, source: MaskSource<'_>, variants: &[Variant], opts: &EnhanceOptions) -> Result<ArrayOutputs> {
    let reference = opts.beamform.reference;
    let gammas = match source {
        MaskSource::Complex(h) => Some(mask::energetic_mask(y, &mask::apply_complex_mask(y, h)?)?),
        MaskSource::Energetic(g) => Some(g.clone()),
        MaskSource::Pooled(_) => None,
    };
    let alpha_s = match (&source, &gammas) {
        (MaskSource::Pooled(a), _) => (*a).clone(),
        (_, Some(g)) => mask::median_pool(g),
        _ => unreachable!("per-channel sources always yield gammas"),
    };
    let alpha_n = mask::complement_mask(&alpha_s);

    let mut warnings = Vec::new();
    let mut log_likelihood = None;
    let lambda = if variants.iter().any(|v| v.refined()) {
        let state = cgmm::refine(y, &alpha_s, &opts.cgmm)?;
        warnings.extend(state.warnings.iter().map(|w| w.to_string()));
        log_likelihood = Some(state.log_likelihood);
        Some(state.lambda)
    } else {
        None
    };

    let mut outputs = Vec::with_capacity(variants.len());
    for &v in variants {
        let (ms, mn) = if v.refined() {
            let l = lambda.as_ref().expect("refinement ran for refined variants");
            (&l.speech, &l.noise)
        } else {
            (&alpha_s, &alpha_n)
        };
        let out = match v {
            Variant::CrmWithout => match source {
                MaskSource::Complex(h) => scale_reference(y, reference, |t, f| *h.get(t, f, reference)),
                MaskSource::Energetic(g) => scale_reference(y, reference, |t, f| Complex64::new(g.get(t, f, reference), 0.0)),
                MaskSource::Pooled(a) => scale_reference(y, reference, |t, f| Complex64::new(a.at(t, f), 0.0)),
            },
            Variant::CrmWith => scale_reference(y, reference, |t, f| Complex64::new(ms.at(t, f), 0.0)),
            Variant::ScWithout | Variant::ScWith => scale_reference(y, reference, |t, f| Complex64::new(ms.at(t, f).sqrt(), 0.0)),
            Variant::McWithout | Variant::McWith => {
                let (bank, warn) = beamform::design_filter(y, ms, mn, &opts.beamform)?;
                warnings.extend(warn.iter().map(|w| w.to_string()));
                beamform::apply_filter(y, &bank)?.bins
            }
        };
        outputs.push(out);
    }
    Ok(ArrayOutputs {
        outputs,
        alpha_s,
        lambda_s: lambda.map(|l| l.speech),
        log_likelihood,
        warnings,
    })
}

fn subset_source<'a>(source: MaskSource<'_>, channels: &[usize], store: &'a mut Option<Stored>) -> Result<MaskSource<'a>> {
    *store = Some(match source {
        MaskSource::Complex(h) => Stored::Complex(h.select_channels(channels)?),
        MaskSource::Energetic(g) => Stored::Real(g.select_channels(channels)?),
        MaskSource::Pooled(a) => Stored::Real(a.clone()),
    });
    Ok(match (store.as_ref().expect("just stored"), source) {
        (Stored::Complex(h), _) => MaskSource::Complex(h),
        (Stored::Real(a), MaskSource::Pooled(_)) => MaskSource::Pooled(a),
        (Stored::Real(g), _) => MaskSource::Energetic(g),
    })
}

enum Stored {
    Complex(ComplexMask),
    Real(RealMask),
}

/// Runs the requested variants, on the full array or per sub-array with
/// band fusion at `opts.band_split_hz`.
pub fn run_variants(
    y: &MultichannelSpectrogram,
    source: MaskSource<'_>,
    variants: &[Variant],
    opts: &EnhanceOptions,
    subarrays: Option<(&[usize], &[usize])>,
) -> Result<VariantOutputs> {
    source.check(y)?;
    if opts.beamform.reference >= y.num_channels() {
        return Err(Error::InvalidParameter(format!(
            "reference channel {} out of range for {} channels",
            opts.beamform.reference,
            y.num_channels()
        )));
    }
    let wrap = |a: ArrayOutputs| -> Result<VariantOutputs> {
        Ok(VariantOutputs {
            outputs: variants
                .iter()
                .zip(a.outputs)
                .map(|(v, bins)| Ok((*v, y.with_bins(bins)?)))
                .collect::<Result<_>>()?,
            alpha_s: a.alpha_s,
            lambda_s: a.lambda_s,
            log_likelihood: a.log_likelihood,
            warnings: a.warnings,
        })
    };
    if !opts.subarray {
        return wrap(process_array(y, source, variants, opts)?);
    }
    let (small, large) = subarrays.ok_or_else(|| Error::Geometry("sub-array processing needs a nested array".into()))?;
    if let Some(&bad) = small.iter().chain(large).find(|&&m| m >= y.num_channels()) {
        return Err(Error::ShapeMismatch(format!(
            "sub-array channel {bad} out of range for a {}-channel input",
            y.num_channels()
        )));
    }
    let local = |set: &[usize]| {
        set.iter().position(|&m| m == opts.beamform.reference).ok_or_else(|| {
            Error::InvalidParameter(format!("reference channel {} is not in both sub-arrays", opts.beamform.reference))
        })
    };
    let mut results = Vec::with_capacity(2);
    for set in [small, large] {
        let sub_opts = EnhanceOptions {
            beamform: BeamformConfig {
                reference: local(set)?,
                ..opts.beamform
            },
            ..*opts
        };
        let mut store = None;
        let sub_source = subset_source(source, set, &mut store)?;
        results.push(process_array(&y.select_channels(set)?, sub_source, variants, &sub_opts)?);
    }
    let high = results.pop().expect("two sub-arrays");
    let low = results.pop().expect("two sub-arrays");
    let split = split_bin(y.params.fft_size, y.sample_rate, opts.band_split_hz);
    let fuse_mask = |a: &RealMask, b: &RealMask| -> Result<RealMask> { RealMask::new(fuse_bands(a.array(), b.array(), split)?) };
    let outputs = low
        .outputs
        .iter()
        .zip(&high.outputs)
        .map(|(a, b)| fuse_bands(a, b, split))
        .collect::<Result<Vec<_>>>()?;
    let lambda_s = match (&low.lambda_s, &high.lambda_s) {
        (Some(a), Some(b)) => Some(fuse_mask(a, b)?),
        _ => None,
    };
    let log_likelihood = match (&low.log_likelihood, &high.log_likelihood) {
        (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, z)| x + z).collect()),
        _ => None,
    };
    let mut warnings: Vec<String> = low.warnings.iter().map(|w| format!("small sub-array: {w}")).collect();
    warnings.extend(high.warnings.iter().map(|w| format!("large sub-array: {w}")));
    wrap(ArrayOutputs {
        outputs,
        alpha_s: fuse_mask(&low.alpha_s, &high.alpha_s)?,
        lambda_s,
        log_likelihood,
        warnings,
    })
}

/// Loads mask files for an `m`-channel, `(frames, bins)` signal.
///
/// One file per channel or one multi-channel file gives per-channel filters;
/// a single real one-channel file for a multi-channel input is a pooled prior.
pub fn load_masks(paths: &[impl AsRef<Path>], frames: usize, bins: usize, channels: usize) -> Result<LoadedMask> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("no mask files given".into()));
    }
    let payloads = paths.iter().map(mcmf::read_mask_file).collect::<Result<Vec<_>>>()?;
    let shape_err = |got: (usize, usize, usize)| {
        Error::ShapeMismatch(format!("mask shape {got:?} does not match signal ({frames}, {bins}, ...)"))
    };
    for p in &payloads {
        let (t, f, _) = p.shape();
        if (t, f) != (frames, bins) {
            return Err(shape_err(p.shape()));
        }
    }
    if payloads.len() == 1 {
        let p = &payloads[0];
        let m = p.shape().2;
        if m == channels {
            return Ok(LoadedMask::PerChannel(mask::complex_mask_from_payload(p)));
        }
        if m == 1 && !p.is_complex() {
            return Ok(LoadedMask::Pooled(mask::real_mask_from_payload(p)?));
        }
        return Err(Error::ShapeMismatch(format!("mask file has {m} channels, input has {channels}")));
    }
    if payloads.len() != channels {
        return Err(Error::ShapeMismatch(format!("{} mask files for {channels} channels", payloads.len())));
    }
    if let Some(p) = payloads.iter().find(|p| p.shape().2 != 1) {
        return Err(Error::ShapeMismatch(format!("per-channel mask file has {} channels", p.shape().2)));
    }
    let per = payloads.iter().map(mask::complex_mask_from_payload).collect::<Vec<_>>();
    Ok(LoadedMask::PerChannel(TfArray::from_fn(frames, bins, channels, |t, f, m| *per[m].get(t, f, 0))))
}

#[derive(Debug, Clone)]
pub enum LoadedMask {
    PerChannel(ComplexMask),
    Pooled(RealMask),
}

impl LoadedMask {
    pub fn source(&self) -> MaskSource<'_> {
        match self {
            LoadedMask::PerChannel(h) => MaskSource::Complex(h),
            LoadedMask::Pooled(a) => MaskSource::Pooled(a),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnhanceSummary {
    pub variant: Variant,
    pub channels: usize,
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Reads the input and masks named in `cfg.paths`, enhances, and writes the result.
pub fn enhance_files(cfg: &PipelineConfig) -> Result<EnhanceSummary> {
    let input = cfg.paths.input.as_ref().ok_or_else(|| Error::InvalidParameter("no input WAV given".into()))?;
    let output = cfg.paths.output.as_ref().ok_or_else(|| Error::InvalidParameter("no output WAV given".into()))?;
    let wave = wav::read_wav(input)?;
    let params = cfg.stft_params(wave.sample_rate())?;
    let y = stft(&wave, params)?;
    let masks = load_masks(&cfg.paths.masks, y.num_frames(), y.num_bins(), y.num_channels())?;
    let variant = Variant::new(cfg.mode, cfg.refine);
    let opts = EnhanceOptions::from_config(cfg);
    let geometry = room::nested_array_geometry();
    let subarrays = if opts.subarray {
        if y.num_channels() != geometry.num_mics() {
            return Err(Error::ShapeMismatch(format!(
                "sub-array processing expects {} channels, input has {}; pass --subarray off",
                geometry.num_mics(),
                y.num_channels()
            )));
        }
        geometry.subarray_slices()
    } else {
        None
    };
    let result = run_variants(&y, masks.source(), &[variant], &opts, subarrays)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    let enhanced = istft(result.get(variant).expect("requested variant present"))?;
    wav::write_wav(output, &enhanced, WavEncoding::Float32)?;
    if let Some(dump) = &cfg.paths.dump_mask {
        let m = result.lambda_s.as_ref().unwrap_or(&result.alpha_s);
        mcmf::write_mask_file(dump, &m.to_payload())?;
    }
    if let (Some(path), Some(ll)) = (&cfg.paths.loglik, &result.log_likelihood) {
        let mut buf = Vec::new();
        cgmm::write_log_likelihood_csv(&mut buf, ll)?;
        fs::write(path, buf)?;
    }
    Ok(EnhanceSummary {
        variant,
        channels: wave.num_channels(),
        samples: enhanced.len(),
        warnings: result.warnings,
    })
}

/// SplitMix64 finaliser, used to derive independent per-trial seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub scenario_seed: u64,
    pub snr_db: f64,
    pub auc_prior: f64,
    pub auc_refined: f64,
    pub sisnr_in: f64,
    /// SI-SNR of each variant, in `Variant::ALL` order.
    pub sisnr_out: [f64; 6],
    pub roc_prior: RocCurve,
    pub roc_refined: RocCurve,
    pub warnings: Vec<String>,
}

impl TrialResult {
    pub fn sisnr(&self, v: Variant) -> f64 {
        self.sisnr_out[Variant::ALL.iter().position(|w| *w == v).expect("known variant")]
    }
}

fn interior_scores(mask: &RealMask, frames: std::ops::Range<usize>) -> Vec<f64> {
    frames.flat_map(|t| (0..mask.bins()).map(move |f| (t, f))).map(|(t, f)| mask.at(t, f)).collect()
}

/// One simulated trial: render, corrupt oracle masks, run all six variants, score.
pub fn run_trial(cfg: &PipelineConfig, trial: usize, snr_db: f64) -> Result<TrialResult> {
    let exp = &cfg.experiment;
    let scenario_seed = derive_seed(exp.seed, trial as u64);
    let ranges = ScenarioRanges {
        snr_db,
        ..ScenarioRanges::default()
    };
    let scenario = room::sample_scenario(&ranges, scenario_seed)?;
    let mix = room::simulate(&scenario, exp.duration_s)?;
    let params = cfg.stft_params(scenario.sample_rate)?;
    let y = stft(&mix.mixture, params)?;
    let s = stft(&mix.speech_image, params)?;
    let n = stft(&mix.noise_image, params)?;

    let oracle = mask::oracle_mask(&s, &n)?;
    let corruption_seed = derive_seed(scenario_seed, snr_db.to_bits());
    let corrupted = mask::corrupt_mask(&oracle, exp.corruption, corruption_seed)?;
    let reference = cfg.beamform.reference_channel;
    let labels = metrics::ideal_binary_mask(&s, &n, reference, 0.0)?;

    let opts = EnhanceOptions::from_config(cfg);
    let geometry = scenario.geometry.clone();
    let out = run_variants(&y, MaskSource::Energetic(&corrupted), &Variant::ALL, &opts, geometry.subarray_slices())?;

    let frames = metrics::evaluation_frames(y.num_frames());
    let label_vec: Vec<bool> = frames.clone().flat_map(|t| (0..y.num_bins()).map(move |f| (t, f))).map(|(t, f)| *labels.get(t, f, 0)).collect();
    let roc_prior = metrics::roc(&interior_scores(&out.alpha_s, frames.clone()), &label_vec)?;
    let lambda_s = out.lambda_s.as_ref().expect("refined variants ran");
    let roc_refined = metrics::roc(&interior_scores(lambda_s, frames), &label_vec)?;

    let range = metrics::evaluation_range(&params, y.num_frames());
    let clean = &mix.speech_image.channel(reference)[range.clone()];
    let sisnr_in = metrics::si_snr(&mix.mixture.channel(reference)[range.clone()], clean)?;
    let mut sisnr_out = [0.0; 6];
    for (slot, v) in sisnr_out.iter_mut().zip(Variant::ALL) {
        let wave = istft(out.get(v).expect("all variants requested"))?;
        *slot = metrics::si_snr(&wave.channel(0)[range.clone()], clean)?;
    }
    Ok(TrialResult {
        trial,
        scenario_seed,
        snr_db,
        auc_prior: metrics::auc(&roc_prior),
        auc_refined: metrics::auc(&roc_refined),
        sisnr_in,
        sisnr_out,
        roc_prior,
        roc_refined,
        warnings: out.warnings,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    /// Ordered by SNR (as configured), then trial index.
    pub trials: Vec<TrialResult>,
    pub snr_db: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl ExperimentReport {
    pub fn at_snr(&self, snr_db: f64) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(move |t| t.snr_db == snr_db)
    }

    pub fn mean_auc(&self, snr_db: f64) -> (f64, f64) {
        (mean(self.at_snr(snr_db).map(|t| t.auc_prior)), mean(self.at_snr(snr_db).map(|t| t.auc_refined)))
    }

    pub fn mean_sisnr_in(&self, snr_db: f64) -> f64 {
        mean(self.at_snr(snr_db).map(|t| t.sisnr_in))
    }

    pub fn mean_sisnr(&self, snr_db: f64, v: Variant) -> f64 {
        mean(self.at_snr(snr_db).map(|t| t.sisnr(v)))
    }

    /// Per-trial metrics with one `mean` row per SNR appended.
    pub fn write_metrics_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "scenario_seed,snr_db,auc_prior,auc_refined,sisnr_in,sisnr_out_sc,sisnr_out_mc")?;
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.scenario_seed,
                t.snr_db,
                t.auc_prior,
                t.auc_refined,
                t.sisnr_in,
                t.sisnr(Variant::ScWith),
                t.sisnr(Variant::McWith)
            )?;
        }
        for &snr in &self.snr_db {
            let (p, r) = self.mean_auc(snr);
            writeln!(
                out,
                "mean,{snr},{p},{r},{},{},{}",
                self.mean_sisnr_in(snr),
                self.mean_sisnr(snr, Variant::ScWith),
                self.mean_sisnr(snr, Variant::McWith)
            )?;
        }
        Ok(())
    }

    /// SI-SNR of all six variants per trial, with per-SNR means.
    pub fn write_variants_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        writeln!(out, "scenario_seed,snr_db,sisnr_in,{}", names.join(","))?;
        for t in &self.trials {
            let vals: Vec<String> = t.sisnr_out.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{},{}", t.scenario_seed, t.snr_db, t.sisnr_in, vals.join(","))?;
        }
        for &snr in &self.snr_db {
            let vals: Vec<String> = Variant::ALL.iter().map(|&v| self.mean_sisnr(snr, v).to_string()).collect();
            writeln!(out, "mean,{snr},{},{}", self.mean_sisnr_in(snr), vals.join(","))?;
        }
        Ok(())
    }

    /// Vertically averaged ROC curves `(prior, refined)` at one SNR.
    pub fn averaged_rocs(&self, snr_db: f64) -> Result<(RocCurve, RocCurve)> {
        let prior: Vec<RocCurve> = self.at_snr(snr_db).map(|t| t.roc_prior.clone()).collect();
        let refined: Vec<RocCurve> = self.at_snr(snr_db).map(|t| t.roc_refined.clone()).collect();
        Ok((metrics::averaged_roc(&prior)?, metrics::averaged_roc(&refined)?))
    }

    /// Writes `metrics.csv`, `variants.csv` and `roc_{prior,refined}_snr{X}.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.write_metrics_csv(&mut buf)?;
        fs::write(dir.join("metrics.csv"), &buf)?;
        buf.clear();
        self.write_variants_csv(&mut buf)?;
        fs::write(dir.join("variants.csv"), &buf)?;
        for &snr in &self.snr_db {
            let (prior, refined) = self.averaged_rocs(snr)?;
            for (name, curve) in [("prior", prior), ("refined", refined)] {
                buf.clear();
                metrics::write_roc_csv(&mut buf, &curve)?;
                fs::write(dir.join(format!("roc_{name}_snr{snr}.csv")), &buf)?;
            }
        }
        Ok(())
    }
}

/// Runs `trials` trials at each configured SNR. Results do not depend on
/// whether trials run in parallel.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let exp = &cfg.experiment;
    let jobs: Vec<(usize, f64)> = exp.snr_db.iter().flat_map(|&snr| (0..exp.trials).map(move |t| (t, snr))).collect();
    let run = |&(trial, snr_db): &(usize, f64)| {
        run_trial(cfg, trial, snr_db).map_err(|e| Error::Trial {
            trial,
            snr_db,
            source: Box::new(e),
        })
    };
    let trials = if exp.parallel {
        jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(ExperimentReport {
        trials,
        snr_db: exp.snr_db.clone(),
    })
}

/// Scenario to render for `simulate`: the one in the config file, or a
/// random draw from `experiment.seed` at the first configured SNR.
pub fn simulation_scenario(cfg: &PipelineConfig) -> Result<Scenario> {
    match cfg.scenario()? {
        Some(s) => Ok(s),
        None => room::sample_scenario(
            &ScenarioRanges {
                snr_db: cfg.experiment.snr_db[0],
                ..ScenarioRanges::default()
            },
            cfg.experiment.seed,
        ),
    }
}

/// Renders a scenario and writes `mixture.wav`, `speech_image.wav`,
/// `noise_image.wav`, `scenario.cfg` and the two RIR sets into `dir`.
pub fn simulate_to(scenario: &Scenario, duration_s: f64, dir: impl AsRef<Path>) -> Result<room::Mixture> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mix = room::simulate(scenario, duration_s)?.quantized_f32()?;
    wav::write_wav(dir.join("mixture.wav"), &mix.mixture, WavEncoding::Float32)?;
    wav::write_wav(dir.join("speech_image.wav"), &mix.speech_image, WavEncoding::Float32)?;
    wav::write_wav(dir.join("noise_image.wav"), &mix.noise_image, WavEncoding::Float32)?;
    let (rs, rn) = room::scenario_rirs(scenario)?;
    wav::write_wav(dir.join("rir_speech.wav"), &rs.to_waveform()?, WavEncoding::Float32)?;
    wav::write_wav(dir.join("rir_noise.wav"), &rn.to_waveform()?, WavEncoding::Float32)?;
    let mut text = scenario.to_text();
    text.push_str(&format!("experiment.duration_s = {duration_s:?}\n"));
    fs::write(dir.join("scenario.cfg"), text)?;
    Ok(mix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{StftParams, Waveform};

    fn toy(channels: usize) -> MultichannelSpectrogram {
        let params = StftParams::new(16, 16).unwrap();
        let mut state = 1u64;
        let mut next = || {
            state = derive_seed(state, 7);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let chans: Vec<Vec<f64>> = (0..channels).map(|_| (0..400).map(|_| next()).collect()).collect();
        stft(&Waveform::new(chans, 16000).unwrap(), params).unwrap()
    }

    #[test]
    fn variant_names_are_unique() {
        let mut names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        names.dedup();
        assert_eq!(names.len(), 6);
        assert_eq!(Variant::new(Mode::Sc, true), Variant::ScWith);
    }

    #[test]
    fn unit_mask_crm_passes_reference() {
        let y = toy(3);
        let h = TfArray::filled(y.num_frames(), y.num_bins(), 3, Complex64::new(1.0, 0.0));
        let opts = EnhanceOptions { subarray: false, ..EnhanceOptions::from_config(&PipelineConfig::default()) };
        let out = run_variants(&y, MaskSource::Complex(&h), &[Variant::CrmWithout, Variant::ScWithout], &opts, None).unwrap();
        let crm = out.get(Variant::CrmWithout).unwrap();
        let sc = out.get(Variant::ScWithout).unwrap();
        for t in 0..y.num_frames() {
            for f in 0..y.num_bins() {
                assert_eq!(crm.bins.get(t, f, 0), y.bins.get(t, f, 0));
                // A unit filter gives gamma = 1 everywhere, so the Wiener gain is one too.
                assert_eq!(sc.bins.get(t, f, 0), y.bins.get(t, f, 0));
            }
        }
        assert!(out.lambda_s.is_none());
    }

    #[test]
    fn subarray_mode_fuses_masks() {
        let y = toy(6);
        let g = RealMask::new(TfArray::from_fn(y.num_frames(), y.num_bins(), 6, |t, f, m| ((t + 2 * f + m) % 7) as f64 / 7.0)).unwrap();
        let cfg = PipelineConfig::default();
        let opts = EnhanceOptions { cgmm: CgmmConfig { iterations: 3, ..cfg.em }, ..EnhanceOptions::from_config(&cfg) };
        let geometry = room::nested_array_geometry();
        let out = run_variants(&y, MaskSource::Energetic(&g), &Variant::ALL, &opts, geometry.subarray_slices()).unwrap();
        assert_eq!(out.outputs.len(), 6);
        let split = split_bin(16, 16000, 1000.0);
        let (small, large) = geometry.subarray_slices().unwrap();
        let pool = |set: &[usize]| mask::median_pool(&g.select_channels(set).unwrap());
        let (ps, pl) = (pool(small), pool(large));
        for t in 0..y.num_frames() {
            for f in 0..y.num_bins() {
                let want = if f < split { ps.at(t, f) } else { pl.at(t, f) };
                assert_eq!(out.alpha_s.at(t, f), want);
            }
        }
        let err = run_variants(&toy(4), MaskSource::Energetic(&g.select_channels(&[0, 1, 2, 3]).unwrap()), &Variant::ALL, &opts, geometry.subarray_slices()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn mask_shape_is_checked() {
        let y = toy(2);
        let a = RealMask::filled(y.num_frames() + 1, y.num_bins(), 1, 0.5).unwrap();
        let opts = EnhanceOptions { subarray: false, ..EnhanceOptions::from_config(&PipelineConfig::default()) };
        assert!(matches!(run_variants(&y, MaskSource::Pooled(&a), &[Variant::McWith], &opts, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(0, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
