//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskrefine::beamform::{self, BeamformConfig};
use maskrefine::cgmm::{self, CgmmConfig, CgmmParams, Pair};
use maskrefine::config::PipelineConfig;
use maskrefine::linalg::{self, CMatrix, CVector};
use maskrefine::mask;
use maskrefine::mcmf::{self, MaskPayload};
use maskrefine::metrics;
use maskrefine::pipeline::{self, derive_seed, Variant};
use maskrefine::room::{self, RirOptions, ScenarioRanges, SPEED_OF_SOUND};
use maskrefine::wav::{self, WavEncoding};
use maskrefine::{istft, stft, Error, MultichannelSpectrogram, StftParams, TfArray, Waveform};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn params() -> StftParams {
    StftParams::from_millis(512, 32.0, 16000).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let chans: Vec<Vec<f64>> = (0..6).map(|_| (0..32000).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = Waveform::new(chans, 16000).unwrap();
    let spec = stft(&x, params()).map_err(|e| e.to_string())?;
    let back = istft(&spec).map_err(|e| e.to_string())?;
    let range = metrics::evaluation_range(&params(), spec.num_frames());
    let (mut err, mut norm) = (0.0, 0.0);
    for m in 0..6 {
        for i in range.clone() {
            err += (back.channel(m)[i] - x.channel(m)[i]).powi(2);
            norm += x.channel(m)[i].powi(2);
        }
    }
    let rel = (err / norm).sqrt();
    let elapsed = start.elapsed();
    check(rel <= 1e-10, || format!("relative error {rel:e}"))?;
    within(elapsed, 1.0)?;
    Ok(format!("relative L2 error {rel:.2e} in {:.2} s", elapsed.as_secs_f64()))
}

/// Reference-channel-relative oracle prior for a simulated scenario.
fn simulated(seed: u64, snr_db: f64, duration_s: f64) -> (MultichannelSpectrogram, MultichannelSpectrogram, MultichannelSpectrogram) {
    let scenario = room::sample_scenario(&ScenarioRanges { snr_db, ..Default::default() }, seed).unwrap();
    let mix = room::simulate(&scenario, duration_s).unwrap();
    (
        stft(&mix.mixture, params()).unwrap(),
        stft(&mix.speech_image, params()).unwrap(),
        stft(&mix.noise_image, params()).unwrap(),
    )
}

fn psd_and_hermitian(r: &CMatrix) -> bool {
    let tr = linalg::trace_re(r);
    linalg::hermitian_error(r) <= 1e-10 && linalg::hermitian_eigen(r).0.iter().all(|&v| v >= -1e-8 * tr)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let small = [0, 1, 2, 3];
    let config = CgmmConfig { rank1: false, ..Default::default() };
    let mut frames = 0;
    for k in 0..10 {
        let seed = derive_seed(200, k);
        let (y, s, n) = simulated(seed, 0.0, 1.936);
        let (y, s, n) = (y.select_channels(&small).unwrap(), s.select_channels(&small).unwrap(), n.select_channels(&small).unwrap());
        frames = y.num_frames();
        let alpha_s = mask::median_pool(&mask::corrupt_mask(&mask::oracle_mask(&s, &n).unwrap(), 1.0, seed).unwrap());

        let state = cgmm::refine(&y, &alpha_s, &config).map_err(|e| e.to_string())?;
        let ll = &state.log_likelihood;
        check(ll.len() == 20, || format!("{} log-likelihood entries", ll.len()))?;
        for (i, w) in ll.windows(2).enumerate() {
            check(w[1] >= w[0] - 1e-6 * w[0].abs(), || format!("scenario {k}: log-likelihood fell at iteration {}: {} -> {}", i + 2, w[0], w[1]))?;
        }
        for (a, b) in state.lambda.speech.values().iter().zip(state.lambda.noise.values()) {
            check(a + b == 1.0, || format!("scenario {k}: lambda_s + lambda_n = {}", a + b))?;
        }

        // the same schedule stepwise, checking the covariances after every update
        let alpha = Pair::new(alpha_s.clone(), mask::complement_mask(&alpha_s));
        let (mut r, _) = cgmm::init_covariances(&y, &alpha).map_err(|e| e.to_string())?;
        let mut phi = cgmm::m_step_phi(&y, &r, &config).map_err(|e| e.to_string())?;
        for it in 0..20 {
            let (lambda, _) = cgmm::e_step(&y, &alpha, &CgmmParams { phi: phi.clone(), r: r.clone() }, &config).map_err(|e| e.to_string())?;
            for (a, b) in lambda.speech.values().iter().zip(lambda.noise.values()) {
                check(a + b == 1.0, || format!("scenario {k} iteration {it}: lambda sum {}", a + b))?;
            }
            phi = cgmm::m_step_phi(&y, &r, &config).map_err(|e| e.to_string())?;
            r = cgmm::m_step_r(&y, &lambda, &phi, &r).map_err(|e| e.to_string())?.0;
            for (f, m) in r.speech.iter().chain(&r.noise).enumerate() {
                check(psd_and_hermitian(m), || format!("scenario {k} iteration {it}: covariance {f} not Hermitian PSD"))?;
            }
        }
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("10 scenarios, M = 4, T = {frames}, 20 iterations in {:.1} s", start.elapsed().as_secs_f64()))
}

struct Experiment {
    report: pipeline::ExperimentReport,
    elapsed: Duration,
}

fn run_default_experiment() -> Result<Experiment, String> {
    let cfg = PipelineConfig::default();
    let start = Instant::now();
    let report = pipeline::run_experiment(&cfg).map_err(|e| e.to_string())?;
    Ok(Experiment { report, elapsed: start.elapsed() })
}

fn criterion_3(exp: &Result<Experiment, String>) -> Outcome {
    let exp = exp.as_ref().map_err(Clone::clone)?;
    let r = &exp.report;
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for &snr in &r.snr_db {
        let (prior, refined) = r.mean_auc(snr);
        let gain = refined - prior;
        parts.push(format!("{snr} dB: {prior:.4} -> {refined:.4} ({gain:+.4})"));
        if !(gain > 0.0) {
            failed.push(snr);
        }
    }
    let summary = format!("{} trials per SNR; {}", r.at_snr(r.snr_db[0]).count(), parts.join(", "));
    if !failed.is_empty() {
        return Err(format!("AUC not increased at {failed:?} dB; {summary}"));
    }
    within(exp.elapsed, 600.0)?;
    Ok(summary)
}

fn criterion_4(exp: &Result<Experiment, String>) -> Outcome {
    let exp = exp.as_ref().map_err(Clone::clone)?;
    let r = &exp.report;
    let input = r.mean_sisnr_in(0.0);
    let improvement = |v: Variant| r.mean_sisnr(0.0, v) - input;
    let table: Vec<String> = Variant::ALL.iter().map(|&v| format!("{} {:+.2}", v.name(), improvement(v))).collect();
    let summary = format!("SI-SNR improvement at 0 dB: {}", table.join(", "));
    let mc_w = improvement(Variant::McWith);
    let mc_wo = improvement(Variant::McWithout);
    let mut problems = Vec::new();
    if !(mc_w > mc_wo) {
        problems.push("mc_w not above mc_wo".to_string());
    }
    if !(mc_wo > 0.0) {
        problems.push("mc_wo not above 0 dB".to_string());
    }
    if let Some(best) = Variant::ALL.iter().filter(|&&v| v != Variant::McWith).find(|&&v| improvement(v) > mc_w) {
        problems.push(format!("{} beats mc_w", best.name()));
    }
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join(", ")))
    }
}

fn random_c(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Minimiser of `w^H A w` subject to `w^H r = 1` from the stationarity
/// conditions `A w = mu r`, `r^H w = 1`, solved as one linear system.
fn constrained_minimiser(a: &CMatrix, r: &CVector) -> CVector {
    let m = a.nrows();
    let mut k = DMatrix::<Complex64>::zeros(m + 1, m + 1);
    for i in 0..m {
        for j in 0..m {
            k[(i, j)] = a[(i, j)];
        }
        k[(i, m)] = -r[i];
        k[(m, i)] = r[i].conj();
    }
    let mut rhs = DVector::<Complex64>::zeros(m + 1);
    rhs[m] = Complex64::new(1.0, 0.0);
    let sol = k.lu().solve(&rhs).expect("non-singular KKT system");
    CVector::from_fn(m, |i, _| sol[i])
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = CMatrix::from_fn(3, 5, |_, _| random_c(&mut rng));
        let phi_n = &b * b.adjoint();
        let r = CVector::from_fn(3, |_, _| random_c(&mut rng));
        let w = beamform::mvdr_vector(&phi_n, &r, 0.0, 0).map_err(|e| e.to_string())?;
        let oracle = constrained_minimiser(&phi_n, &r);
        let dev = (&w - &oracle).norm() / oracle.norm();
        worst = worst.max(dev);
        check(dev <= 1e-8, || format!("MVDR deviates from the constrained minimiser by {dev:e}"))?;
    }

    let (y, s, n) = simulated(derive_seed(500, 0), 0.0, 2.0);
    let alpha = mask::median_pool(&mask::oracle_mask(&s, &n).unwrap());
    let (bank, _) = beamform::design_filter(&y, &alpha, &mask::complement_mask(&alpha), &BeamformConfig::default()).map_err(|e| e.to_string())?;
    let mut distortion = 0.0f64;
    for (f, (w, r)) in bank.mvdr.iter().zip(&bank.steering).enumerate() {
        let resp = w.dotc(r);
        distortion = distortion.max((resp - Complex64::new(1.0, 0.0)).norm());
        check((resp - Complex64::new(1.0, 0.0)).norm() <= 1e-10, || format!("w^H r = {resp} at bin {f}"))?;
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "max |w^H r - 1| = {distortion:.1e} over {} bins; worst oracle deviation {worst:.1e} over 100 instances",
        bank.mvdr.len()
    ))
}

fn scalar_spec(values: Vec<Complex64>) -> MultichannelSpectrogram {
    let n = values.len();
    MultichannelSpectrogram {
        bins: TfArray::from_vec(n, 1, 1, values).unwrap(),
        params: StftParams::new(2, 2).unwrap(),
        sample_rate: 16000,
        signal_len: 0,
    }
}

fn criterion_6() -> Outcome {
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let y = scalar_spec(vec![c(0.3, -1.2), c(0.7, 0.1), c(2.0, 0.0)]);
    let xi = scalar_spec(vec![c(0.3, -1.2), c(0.0, 0.0), c(1.0, 0.0)]);
    let g = mask::energetic_mask(&y, &xi).map_err(|e| e.to_string())?;
    let got = [g.at(0, 0), g.at(1, 0), g.at(2, 0)];
    check(got == [1.0, 0.0, 0.5], || format!("examples gave {got:?}, expected [1, 0, 0.5]"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draw = |rng: &mut ChaCha8Rng| {
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        c(rng.random_range(-1.0..1.0) * scale, rng.random_range(-1.0..1.0) * scale)
    };
    let ys: Vec<Complex64> = (0..1000).map(|_| draw(&mut rng)).collect();
    let xis: Vec<Complex64> = (0..1000).map(|_| draw(&mut rng)).collect();
    let g = mask::energetic_mask(&scalar_spec(ys), &scalar_spec(xis)).map_err(|e| e.to_string())?;
    check(g.values().iter().all(|v| (0.0..=1.0).contains(v)), || "value outside [0, 1]".into())?;
    Ok("three worked examples exact; 1000 random bins within [0, 1]".into())
}

/// RT60 from the Schroeder backward-integrated energy decay, fitted between
/// -5 and -25 dB and extrapolated to -60 dB.
fn schroeder_rt60(h: &[f64], fs: f64) -> f64 {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / edc[0]).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, &d)| (-25.0..=-5.0).contains(&d))
        .map(|(i, &d)| (i as f64 / fs, d))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    -60.0 / slope
}

fn criterion_7() -> Outcome {
    let room_dims = [7.5, 5.5, 3.5];
    let scenario = room::Scenario::new(room_dims, 0.3, 0.0, 7, 40.0, 16000).map_err(|e| e.to_string())?;
    let rirs = room::image_source_rir(&room_dims, 0.3, &scenario.source_pos, &scenario.mic_positions(), 16000, &RirOptions::default())
        .map_err(|e| e.to_string())?;
    let estimates: Vec<f64> = rirs.taps.iter().map(|h| schroeder_rt60(h, 16000.0)).collect();
    for (m, &t) in estimates.iter().enumerate() {
        check((t - 0.3).abs() <= 0.2 * 0.3, || format!("microphone {m}: Schroeder RT60 {t:.3} s"))?;
    }

    let mut worst = 0i64;
    for k in 0..10 {
        let sc = room::sample_scenario(&ScenarioRanges::default(), derive_seed(700, k)).map_err(|e| e.to_string())?;
        let (speech, _) = room::scenario_rirs(&sc).map_err(|e| e.to_string())?;
        for (m, (h, mic)) in speech.taps.iter().zip(sc.mic_positions()).enumerate() {
            let d = ((0..3).map(|i| (mic[i] - sc.source_pos[i]).powi(2)).sum::<f64>()).sqrt();
            let expected = (d / SPEED_OF_SOUND * 16000.0).round() as i64;
            let peak = h.iter().enumerate().fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best }).0 as i64;
            worst = worst.max((peak - expected).abs());
            check((peak - expected).abs() <= 1, || format!("scenario {k} mic {m}: direct path at {peak}, geometry says {expected}"))?;
        }
    }
    let lo = estimates.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().cloned().fold(0.0, f64::max);
    Ok(format!("Schroeder RT60 {lo:.3}-{hi:.3} s for 0.3 s; direct-path offset at most {worst} sample(s) over 10 scenarios"))
}

fn experiment_bytes(parallel: bool, dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let mut cfg = PipelineConfig::default();
    cfg.experiment.trials = 4;
    cfg.experiment.snr_db = vec![0.0, 10.0];
    cfg.experiment.duration_s = 1.0;
    cfg.experiment.seed = 8;
    cfg.experiment.parallel = parallel;
    let report = pipeline::run_experiment(&cfg).map_err(|e| e.to_string())?;
    report.write_to(dir).map_err(|e| e.to_string())?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    Ok(names.iter().map(|p| std::fs::read(p).unwrap()).collect())
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = experiment_bytes(true, &tmp.path().join("a"))?;
    let b = experiment_bytes(true, &tmp.path().join("b"))?;
    let c = experiment_bytes(false, &tmp.path().join("c"))?;
    check(a == b, || "two parallel runs differ".into())?;
    check(a == c, || "parallel and serial runs differ".into())?;
    Ok(format!("{} report files byte-identical across two parallel runs and a serial run", a.len()))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn expect_err(result: Result<impl std::fmt::Debug, Error>, needle: &str, what: &str) -> Result<(), String> {
    match result {
        Ok(v) => Err(format!("{what}: accepted ({v:?})")),
        Err(e) if e.to_string().contains(needle) => Ok(()),
        Err(e) => Err(format!("{what}: error `{e}` lacks `{needle}`")),
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    let complex = MaskPayload::Complex(TfArray::from_fn(7, 5, 3, |_, _, _| num_complex::Complex32::new(rng.random(), rng.random::<f32>() - 0.5)));
    let real = MaskPayload::Real(TfArray::from_fn(4, 9, 1, |_, _, _| rng.random::<f32>()));
    for (i, mask) in [complex, real].iter().enumerate() {
        let path = tmp.path().join(format!("m{i}.mcmf"));
        mcmf::write_mask_file(&path, mask).map_err(|e| e.to_string())?;
        let back = mcmf::read_mask_file(&path).map_err(|e| e.to_string())?;
        check(mcmf::encode_mcmf(&back).unwrap() == mcmf::encode_mcmf(mask).unwrap(), || "MCMF round trip changed bits".into())?;
    }

    let chans: Vec<Vec<f64>> = (0..6).map(|_| (0..4000).map(|_| f64::from(rng.random::<f32>() * 2.0 - 1.0)).collect()).collect();
    let wave = Waveform::new(chans, 16000).unwrap();
    let path = tmp.path().join("x.wav");
    wav::write_wav(&path, &wave, WavEncoding::Float32).map_err(|e| e.to_string())?;
    let back = wav::read_wav(&path).map_err(|e| e.to_string())?;
    let same = back.channels().iter().flatten().zip(wave.channels().iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(same && back.sample_rate() == 16000, || "WAV round trip changed samples".into())?;

    // fixtures written by an independent encoder
    match mcmf::read_mask_file(fixture("real_2x3x1.mcmf")).map_err(|e| e.to_string())? {
        MaskPayload::Real(a) => check(a.shape() == (2, 3, 1) && a.values() == [0.0, 0.25, 0.5, 0.75, 1.0, 0.125], || format!("{a:?}"))?,
        other => return Err(format!("real fixture decoded as {other:?}")),
    }
    match mcmf::read_mask_file(fixture("complex_2x2x2.mcmf")).map_err(|e| e.to_string())? {
        MaskPayload::Complex(a) => {
            let expect = |i: usize| num_complex::Complex32::new(i as f32 - 2.0, i as f32 - 1.5);
            check(a.shape() == (2, 2, 2) && (0..8).all(|k| a.values()[k] == expect(k)), || format!("{a:?}"))?
        }
        other => return Err(format!("complex fixture decoded as {other:?}")),
    }
    let f32wav = wav::read_wav(fixture("float32_2ch.wav")).map_err(|e| e.to_string())?;
    check(f32wav.channel(0) == [0.0, 0.5, -0.125] && f32wav.channel(1) == [-1.0, 0.25, 1.5], || format!("{f32wav:?}"))?;
    let pcm = wav::read_wav(fixture("pcm16_1ch.wav")).map_err(|e| e.to_string())?;
    check(pcm.channel(0) == [0.0, 0.5, -1.0, 32767.0 / 32768.0] && pcm.sample_rate() == 8000, || format!("{pcm:?}"))?;

    let cases = [
        ("bad_magic.mcmf", "not an MCMF file"),
        ("truncated_header.mcmf", "truncated header"),
        ("truncated_payload.mcmf", "truncated payload"),
        ("dim_overflow.mcmf", "dimension overflow"),
        ("bad_version.mcmf", "unsupported MCMF version"),
        ("bad_dtype.mcmf", "unknown MCMF dtype"),
    ];
    for (name, needle) in cases {
        expect_err(mcmf::read_mask_file(fixture(name)), needle, name)?;
    }
    let cases = [
        ("truncated.wav", "unexpected end of WAV data"),
        ("not_riff.wav", "malformed WAV header"),
        ("pcm24_1ch.wav", "unsupported WAV codec"),
    ];
    for (name, needle) in cases {
        expect_err(wav::read_wav(fixture(name)), needle, name)?;
    }
    Ok("MCMF real/complex and float32 WAV bit-exact; 2 MCMF + 2 WAV reference fixtures decoded; 9 malformed fixtures rejected".into())
}

fn main() {
    let experiment = run_default_experiment();
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "STFT perfect reconstruction", criterion_1()),
        (2, "EM correctness", criterion_2()),
        (3, "refinement improves masks", criterion_3(&experiment)),
        (4, "enhancement improves quality", criterion_4(&experiment)),
        (5, "MVDR properties", criterion_5()),
        (6, "mask conversion", criterion_6()),
        (7, "RIR sanity", criterion_7()),
        (8, "determinism", criterion_8()),
        (9, "file formats", criterion_9()),
    ];
    if let Ok(exp) = &experiment {
        println!("default experiment: {} trials in {:.1} s", exp.report.trials.len(), exp.elapsed.as_secs_f64());
    }
    let mut failures = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL - {detail}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
