//! Shoebox room simulation with the image-source method.
//!
//! Walls share one reflection coefficient chosen so that the image lattice
//! of the room decays at the target RT60 (Eyring's formula is the fallback
//! for very large lattices). Each image contributes `beta^k / (4 pi d)` at
//! delay `d / c`, spread over neighbouring taps by a Hann-windowed sinc, and
//! the summed response is high-passed to remove its DC build-up.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::keyvalue::{format_list, KeyValues};
use crate::signal::Waveform;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the fractional delay kernel in taps.
pub const SINC_HALF_WIDTH: i64 = 8;

pub type Point = [f64; 3];

fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Microphone offsets relative to the array centre, plus optional
/// small/large sub-array index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub offsets: Vec<Point>,
    pub subarrays: Option<(Vec<usize>, Vec<usize>)>,
}

impl ArrayGeometry {
    pub fn num_mics(&self) -> usize {
        self.offsets.len()
    }

    pub fn positions(&self, center: &Point) -> Vec<Point> {
        self.offsets
            .iter()
            .map(|o| [center[0] + o[0], center[1] + o[1], center[2] + o[2]])
            .collect()
    }

    pub fn subarray_slices(&self) -> Option<(&[usize], &[usize])> {
        self.subarrays.as_ref().map(|(s, l)| (s.as_slice(), l.as_slice()))
    }
}

/// Six-element linear array along x: elements at 0, 5, 10, 15, 30 and 45 cm,
/// centred on the array midpoint. Elements 0 and 3 belong to both sub-arrays.
pub fn nested_array_geometry() -> ArrayGeometry {
    let xs = [0.0, 0.05, 0.10, 0.15, 0.30, 0.45];
    let mid = 0.225;
    ArrayGeometry {
        offsets: xs.iter().map(|&x| [x - mid, 0.0, 0.0]).collect(),
        subarrays: Some((vec![0, 1, 2, 3], vec![0, 3, 4, 5])),
    }
}

/// Draw ranges for random scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRanges {
    pub room_min: Point,
    pub room_max: Point,
    pub rt60: (f64, f64),
    pub snr_db: f64,
    pub sample_rate: u32,
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        Self {
            room_min: [7.0, 5.0, 3.0],
            room_max: [8.0, 6.0, 4.0],
            rt60: (0.2, 0.5),
            snr_db: 0.0,
            sample_rate: 16000,
        }
    }
}

/// A fully determined simulation setup.
///
/// Array centre and noise position are drawn from `seed`, so the six
/// serialised fields reproduce the whole scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub room_dims: Point,
    pub rt60: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub source_azimuth_deg: f64,
    pub sample_rate: u32,
    pub geometry: ArrayGeometry,
    pub array_center: Point,
    pub source_pos: Point,
    pub noise_pos: Point,
}

pub const SOURCE_DISTANCE: f64 = 1.0;
const WALL_MARGIN: f64 = 0.5;
const MIN_NOISE_DISTANCE: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

const STREAM_DRAW: u64 = 0;
const STREAM_PLACEMENT: u64 = 1;
const STREAM_SPEECH: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn inside(p: &Point, room: &Point, margin: f64) -> bool {
    (0..3).all(|i| p[i] > margin && p[i] < room[i] - margin)
}

impl Scenario {
    /// Places array, source and noise inside the room.
    pub fn new(room_dims: Point, rt60: f64, snr_db: f64, seed: u64, source_azimuth_deg: f64, sample_rate: u32) -> Result<Self> {
        if room_dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Geometry(format!("room dimensions {room_dims:?} must be positive")));
        }
        if !(rt60.is_finite() && rt60 > 0.0) {
            return Err(Error::InvalidParameter(format!("rt60 {rt60} must be positive")));
        }
        if !snr_db.is_finite() {
            return Err(Error::InvalidParameter(format!("snr_db {snr_db} must be finite")));
        }
        if !source_azimuth_deg.is_finite() {
            return Err(Error::InvalidParameter("source azimuth must be finite".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        let geometry = nested_array_geometry();
        let mut rng = rng_for(seed, STREAM_PLACEMENT);
        let az = source_azimuth_deg.to_radians();
        let offset = [SOURCE_DISTANCE * az.cos(), SOURCE_DISTANCE * az.sin(), 0.0];

        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let reach = SOURCE_DISTANCE + WALL_MARGIN;
            let lo = [reach, reach, 1.2f64.min(room_dims[2] / 2.0)];
            let hi = [room_dims[0] - reach, room_dims[1] - reach, 1.8f64.min(room_dims[2] / 2.0)];
            if lo[0] >= hi[0] || lo[1] >= hi[1] {
                break;
            }
            let center = [
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                if lo[2] < hi[2] { rng.random_range(lo[2]..hi[2]) } else { lo[2] },
            ];
            let source = [center[0] + offset[0], center[1] + offset[1], center[2]];
            let mics = geometry.positions(&center);
            if !inside(&source, &room_dims, 0.0) || !mics.iter().all(|m| inside(m, &room_dims, 0.0)) {
                continue;
            }
            placed = Some((center, source));
            break;
        }
        let (array_center, source_pos) =
            placed.ok_or_else(|| Error::Geometry(format!("room {room_dims:?} too small to place the array and source")))?;

        let mut noise_pos = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = [
                rng.random_range(WALL_MARGIN..(room_dims[0] - WALL_MARGIN).max(WALL_MARGIN + 1e-9)),
                rng.random_range(WALL_MARGIN..(room_dims[1] - WALL_MARGIN).max(WALL_MARGIN + 1e-9)),
                rng.random_range(WALL_MARGIN..(room_dims[2] - WALL_MARGIN).max(WALL_MARGIN + 1e-9)),
            ];
            if inside(&p, &room_dims, 0.0) && distance(&p, &array_center) >= MIN_NOISE_DISTANCE {
                noise_pos = Some(p);
                break;
            }
        }
        let noise_pos = noise_pos.ok_or_else(|| Error::Geometry("no room for a noise source away from the array".into()))?;

        Ok(Self {
            room_dims,
            rt60,
            snr_db,
            seed,
            source_azimuth_deg,
            sample_rate,
            geometry,
            array_center,
            source_pos,
            noise_pos,
        })
    }

    pub fn mic_positions(&self) -> Vec<Point> {
        self.geometry.positions(&self.array_center)
    }

    pub fn to_keyvalues(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("room_dims", format_list(&self.room_dims));
        kv.set("rt60", format!("{:?}", self.rt60));
        kv.set("snr_db", format!("{:?}", self.snr_db));
        kv.set("seed", self.seed);
        kv.set("source_azimuth_deg", format!("{:?}", self.source_azimuth_deg));
        kv.set("sample_rate", self.sample_rate);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_keyvalues().to_text()
    }

    /// Reads the six scenario keys; other keys are ignored.
    pub fn from_keyvalues(kv: &KeyValues) -> Result<Self> {
        let need = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("scenario key `{k}` missing")));
        let dims = need("room_dims")?.float_list()?;
        let room_dims: Point = dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("room_dims needs 3 values, got {}", dims.len())))?;
        Self::new(
            room_dims,
            need("rt60")?.float()?,
            need("snr_db")?.float()?,
            need("seed")?.parse("an unsigned integer")?,
            need("source_azimuth_deg")?.float()?,
            need("sample_rate")?.parse("a positive integer")?,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        if let Some(e) = kv.entries().iter().find(|e| !SCENARIO_KEYS.contains(&e.key.as_str())) {
            return Err(Error::Config(format!("line {}: unknown scenario key `{}`", e.line, e.key)));
        }
        Self::from_keyvalues(&kv)
    }
}

pub const SCENARIO_KEYS: [&str; 6] = ["room_dims", "rt60", "snr_db", "seed", "source_azimuth_deg", "sample_rate"];

/// Uniform draws of room size, RT60 and source azimuth.
pub fn sample_scenario(ranges: &ScenarioRanges, seed: u64) -> Result<Scenario> {
    for i in 0..3 {
        if !(ranges.room_min[i] > 0.0 && ranges.room_min[i] <= ranges.room_max[i]) {
            return Err(Error::InvalidParameter(format!("room range {i} is empty")));
        }
    }
    if !(ranges.rt60.0 > 0.0 && ranges.rt60.0 <= ranges.rt60.1) {
        return Err(Error::InvalidParameter("rt60 range is empty".into()));
    }
    let mut rng = rng_for(seed, STREAM_DRAW);
    let mut draw = |lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { lo };
    let room_dims = [
        draw(ranges.room_min[0], ranges.room_max[0]),
        draw(ranges.room_min[1], ranges.room_max[1]),
        draw(ranges.room_min[2], ranges.room_max[2]),
    ];
    let rt60 = draw(ranges.rt60.0, ranges.rt60.1);
    let azimuth = draw(0.0, 360.0);
    Scenario::new(room_dims, rt60, ranges.snr_db, seed, azimuth, ranges.sample_rate)
}

fn check_rt60(rt60: f64) -> Result<()> {
    if rt60.is_finite() && rt60 > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("rt60 {rt60} must be positive")))
    }
}

/// Wall reflection coefficient from Eyring's formula.
pub fn eyring_reflection(room_dims: &Point, rt60: f64) -> Result<f64> {
    check_rt60(rt60)?;
    let [lx, ly, lz] = *room_dims;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let retained = (-24.0 * std::f64::consts::LN_10 * volume / (SPEED_OF_SOUND * surface * rt60)).exp();
    Ok(retained.sqrt())
}

/// Largest image lattice used for calibration.
const CALIBRATION_MAX_IMAGES: f64 = 4.0e6;
const CALIBRATION_BIN_S: f64 = 1e-3;

/// Image energy `sum 1/d^2` of a receiver at the room centre, binned by
/// arrival time and reflection order.
struct LatticeEnergy {
    /// `table[bin][order]`
    table: Vec<Vec<f64>>,
}

impl LatticeEnergy {
    fn new(room_dims: &Point, horizon_s: f64) -> Self {
        let radius = SPEED_OF_SOUND * horizon_s;
        let bins = (horizon_s / CALIBRATION_BIN_S).ceil() as usize + 1;
        let k_max: Vec<i64> = room_dims.iter().map(|l| (radius / l).floor() as i64).collect();
        let max_order = (k_max[0] + k_max[1] + k_max[2]) as usize;
        let mut table = vec![vec![0.0; max_order + 1]; bins];
        for kx in -k_max[0]..=k_max[0] {
            let dx = kx as f64 * room_dims[0];
            for ky in -k_max[1]..=k_max[1] {
                let dy = ky as f64 * room_dims[1];
                let dxy = dx * dx + dy * dy;
                if dxy > radius * radius {
                    continue;
                }
                for kz in -k_max[2]..=k_max[2] {
                    let dz = kz as f64 * room_dims[2];
                    let d2 = dxy + dz * dz;
                    if d2 == 0.0 || d2 > radius * radius {
                        continue;
                    }
                    let bin = (d2.sqrt() / SPEED_OF_SOUND / CALIBRATION_BIN_S) as usize;
                    let order = (kx.unsigned_abs() + ky.unsigned_abs() + kz.unsigned_abs()) as usize;
                    table[bin][order] += 1.0 / d2;
                }
            }
        }
        LatticeEnergy { table }
    }

    /// Decay time from a -5..-25 dB line fit of the backward-integrated energy.
    fn rt60(&self, beta: f64) -> f64 {
        let mut powers = vec![1.0; self.table[0].len()];
        for o in 1..powers.len() {
            powers[o] = powers[o - 1] * beta * beta;
        }
        let energy: Vec<f64> = self.table.iter().map(|row| row.iter().zip(&powers).map(|(w, p)| w * p).sum()).collect();
        let mut edc = vec![0.0; energy.len()];
        let mut acc = 0.0;
        for i in (0..energy.len()).rev() {
            acc += energy[i];
            edc[i] = acc;
        }
        if edc[0] <= 0.0 {
            return 0.0;
        }
        let pts: Vec<(f64, f64)> = edc
            .iter()
            .enumerate()
            .map(|(i, e)| (i as f64 * CALIBRATION_BIN_S, 10.0 * (e / edc[0]).log10()))
            .filter(|(_, db)| (-25.0..=-5.0).contains(db))
            .collect();
        if pts.len() < 2 {
            return 0.0;
        }
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let md = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - md)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        if sxy >= 0.0 || sxx == 0.0 {
            return f64::INFINITY;
        }
        -60.0 * sxx / sxy
    }
}

/// Wall reflection coefficient for a uniform absorption reaching `rt60`.
///
/// Shoebox image lattices are anisotropic, so their energy decays more
/// slowly than Eyring predicts; the coefficient is found by bisection on the
/// lattice decay instead. Rooms whose lattice would exceed a few million
/// images use Eyring directly.
pub fn reflection_from_rt60(room_dims: &Point, rt60: f64) -> Result<f64> {
    let eyring = eyring_reflection(room_dims, rt60)?;
    let horizon = 1.5 * rt60;
    let volume: f64 = room_dims.iter().product();
    let images = 4.0 / 3.0 * PI * (SPEED_OF_SOUND * horizon).powi(3) / volume;
    if !(images <= CALIBRATION_MAX_IMAGES) {
        log::debug!("rt60 {rt60} s: lattice of ~{images:.0} images too large, using Eyring");
        return Ok(eyring);
    }
    let lattice = LatticeEnergy::new(room_dims, horizon);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if lattice.rt60(mid) < rt60 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Impulse responses from one source to each microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSet {
    pub taps: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl RirSet {
    pub fn len(&self) -> usize {
        self.taps.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_waveform(&self) -> Result<Waveform> {
        Waveform::new(self.taps.clone(), self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RirOptions {
    /// Upper bound on reflections per image; `None` keeps every image inside the length.
    pub max_order: Option<u32>,
    /// Taps per response; defaults to `rt60 * fs` plus the longest direct path and kernel.
    pub length: Option<usize>,
    /// Overrides the RT60-derived reflection coefficient.
    pub reflection: Option<f64>,
    /// Skips the DC-removing high-pass.
    pub keep_dc: bool,
}

/// Corner frequency of the DC-removing high-pass.
pub const HIGHPASS_HZ: f64 = 100.0;

/// Second-order high-pass with a double zero near DC (Allen and Berkley).
fn remove_dc(h: &mut [f64], fs: f64) {
    let w = 2.0 * PI * HIGHPASS_HZ / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in h.iter_mut() {
        let x0 = *v;
        let y0 = b1 * y1 + b2 * y2 + x0 + a1 * x1 + r1 * x2;
        (x2, x1, y2, y1) = (x1, x0, y1, y0);
        *v = y0;
    }
}

fn sinc_kernel(delay: f64, amplitude: f64, out: &mut [f64]) {
    let center = delay.round() as i64;
    let x0 = center as f64 - delay;
    let sin0 = (PI * x0).sin();
    let width = (SINC_HALF_WIDTH + 1) as f64;
    for j in -SINC_HALF_WIDTH..=SINC_HALF_WIDTH {
        let k = center + j;
        if k < 0 || k as usize >= out.len() {
            continue;
        }
        let x = x0 + j as f64;
        let sinc = if x == 0.0 {
            1.0
        } else {
            // sin(pi (x0 + j)) = (-1)^j sin(pi x0)
            let sign = if j.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            sign * sin0 / (PI * x)
        };
        if sinc == 0.0 {
            continue;
        }
        let window = 0.5 * (1.0 + (PI * x / width).cos());
        out[k as usize] += amplitude * sinc * window;
    }
}

fn rir_for_mic(room: &Point, source: &Point, mic: &Point, beta: f64, fs: f64, length: usize, max_order: Option<u32>) -> Vec<f64> {
    let mut h = vec![0.0; length];
    let max_dist = (length as f64 + SINC_HALF_WIDTH as f64) / fs * SPEED_OF_SOUND;
    let n_max: Vec<i64> = room.iter().map(|l| (max_dist / (2.0 * l)).ceil() as i64 + 1).collect();
    let axis = |i: usize, n: i64, p: i64| -> (f64, u32) {
        let img = (1 - 2 * p) as f64 * source[i] + 2.0 * n as f64 * room[i];
        let order = ((n - p).unsigned_abs() + n.unsigned_abs()) as u32;
        (img - mic[i], order)
    };
    for nx in -n_max[0]..=n_max[0] {
        for px in 0..2 {
            let (dx, ox) = axis(0, nx, px);
            if dx.abs() > max_dist {
                continue;
            }
            for ny in -n_max[1]..=n_max[1] {
                for py in 0..2 {
                    let (dy, oy) = axis(1, ny, py);
                    if dx * dx + dy * dy > max_dist * max_dist {
                        continue;
                    }
                    for nz in -n_max[2]..=n_max[2] {
                        for pz in 0..2 {
                            let (dz, oz) = axis(2, nz, pz);
                            let order = ox + oy + oz;
                            if max_order.is_some_and(|m| order > m) {
                                continue;
                            }
                            let d = (dx * dx + dy * dy + dz * dz).sqrt();
                            if d > max_dist {
                                continue;
                            }
                            let gain = beta.powi(order as i32);
                            if gain == 0.0 {
                                continue;
                            }
                            let amplitude = gain / (4.0 * PI * d.max(1e-3));
                            sinc_kernel(d / SPEED_OF_SOUND * fs, amplitude, &mut h);
                        }
                    }
                }
            }
        }
    }
    h
}

/// Image-source impulse responses from `source` to every microphone.
pub fn image_source_rir(room_dims: &Point, rt60: f64, source: &Point, mics: &[Point], sample_rate: u32, options: &RirOptions) -> Result<RirSet> {
    if !inside(source, room_dims, 0.0) {
        return Err(Error::Geometry(format!("source {source:?} outside room {room_dims:?}")));
    }
    if let Some(m) = mics.iter().find(|m| !inside(m, room_dims, 0.0)) {
        return Err(Error::Geometry(format!("microphone {m:?} outside room {room_dims:?}")));
    }
    let beta = match options.reflection {
        Some(b) if (0.0..=1.0).contains(&b) => b,
        Some(b) => return Err(Error::InvalidParameter(format!("reflection coefficient {b} outside [0, 1]"))),
        None => reflection_from_rt60(room_dims, rt60)?,
    };
    let fs = f64::from(sample_rate);
    let length = options.length.unwrap_or_else(|| {
        let direct = mics.iter().map(|m| distance(m, source)).fold(0.0, f64::max);
        (rt60 * fs).ceil() as usize + (direct / SPEED_OF_SOUND * fs).ceil() as usize + SINC_HALF_WIDTH as usize + 1
    });
    let taps = mics
        .par_iter()
        .map(|mic| {
            let mut h = rir_for_mic(room_dims, source, mic, beta, fs, length, options.max_order);
            if !options.keep_dc {
                remove_dc(&mut h, fs);
            }
            h
        })
        .collect();
    Ok(RirSet { taps, sample_rate })
}

/// Linear convolution truncated to the length of `x`.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex64> = s.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..x.len()].iter().map(|c| c.re * scale).collect()
}

/// Speech-like test signal: voiced syllables of a gliding harmonic complex
/// shaped by three formants, separated by short gaps and longer pauses.
pub fn synthetic_speech(samples: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, STREAM_SPEECH);
    let fs = f64::from(sample_rate);
    let nyquist = fs / 2.0;
    let mut out = vec![0.0; samples];
    let mut pos = (rng.random_range(0.02..0.1) * fs) as usize;
    while pos < samples {
        let len = ((rng.random_range(0.12..0.32)) * fs) as usize;
        let end = (pos + len).min(samples);
        let f0_start = rng.random_range(100.0..220.0);
        let f0_end = (f0_start * rng.random_range(0.8..1.25f64)).clamp(90.0, 240.0);
        let formants = [
            (rng.random_range(300.0..800.0), 90.0),
            (rng.random_range(900.0..2200.0), 130.0),
            (rng.random_range(2300.0..3200.0), 200.0),
        ];
        let level = rng.random_range(0.5..1.0);
        let harmonics = (0.9 * nyquist.min(5000.0) / f0_start.min(f0_end)) as usize;
        let weights: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let fh = h as f64 * (f0_start + f0_end) / 2.0;
                let env: f64 = formants.iter().map(|(fc, bw)| 1.0 / (1.0 + ((fh - fc) / bw).powi(2))).sum();
                (env + 0.02) / (h as f64).sqrt()
            })
            .collect();
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut phase0 = 0.0;
        let span = (end - pos).max(1) as f64;
        for (i, sample) in out[pos..end].iter_mut().enumerate() {
            let u = i as f64 / span;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase0 += 2.0 * PI * f0 / fs;
            let envelope = (PI * u).sin().powf(0.6) * (1.0 + 0.3 * (2.0 * PI * 5.0 * i as f64 / fs).sin());
            let mut v = 0.0;
            for (h, (w, ph)) in weights.iter().zip(&phases).enumerate() {
                if (h + 1) as f64 * f0 < nyquist {
                    v += w * ((h + 1) as f64 * phase0 + ph).sin();
                }
            }
            *sample = level * envelope * v;
        }
        let gap = if rng.random_bool(0.2) { rng.random_range(0.25..0.45) } else { rng.random_range(0.04..0.12) };
        pos = end + (gap * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Gaussian noise through a one-pole lowpass.
pub fn synthetic_noise(samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, STREAM_NOISE);
    let mut state = 0.0;
    (0..samples)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            state = 0.8 * state + 0.2 * w;
            state
        })
        .collect()
}

/// Reverberant speech and noise images at the microphones and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub speech_image: Waveform,
    pub noise_image: Waveform,
}

impl Mixture {
    /// Rounds both images to `f32` and re-forms the mixture, so that the sum
    /// survives a float32 WAV round trip exactly.
    pub fn quantized_f32(&self) -> Result<Self> {
        let q = |w: &Waveform| {
            Waveform::new(
                w.channels().iter().map(|c| c.iter().map(|&v| f64::from(v as f32)).collect()).collect(),
                w.sample_rate(),
            )
        };
        let speech_image = q(&self.speech_image)?;
        let noise_image = q(&self.noise_image)?;
        let mixture = add_waveforms(&speech_image, &noise_image)?;
        Ok(Self {
            mixture,
            speech_image,
            noise_image,
        })
    }
}

fn add_waveforms(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    let chans = a
        .channels()
        .iter()
        .zip(b.channels())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect();
    Waveform::new(chans, a.sample_rate())
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Convolves both sources with their responses and scales the noise image so
/// the speech-to-noise power ratio at `reference` equals `snr_db`.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], speech_rirs: &RirSet, noise_rirs: &RirSet, snr_db: f64, reference: usize) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("snr_db {snr_db} must be finite")));
    }
    if speech.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!("speech has {} samples, noise {}", speech.len(), noise.len())));
    }
    if speech_rirs.taps.len() != noise_rirs.taps.len() || reference >= speech_rirs.taps.len() {
        return Err(Error::ShapeMismatch("impulse response sets disagree in channel count".into()));
    }
    let convolve = |x: &[f64], set: &RirSet| -> Vec<Vec<f64>> { set.taps.par_iter().map(|h| fft_convolve(x, h)).collect() };
    let s = convolve(speech, speech_rirs);
    let n = convolve(noise, noise_rirs);
    let ps = power(&s[reference]);
    let pn = power(&n[reference]);
    if !(ps > 0.0) {
        return Err(Error::InvalidParameter("speech image is silent at the reference microphone".into()));
    }
    if !(pn > 0.0) {
        return Err(Error::InvalidParameter("noise image is silent at the reference microphone".into()));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let n: Vec<Vec<f64>> = n.into_iter().map(|c| c.into_iter().map(|v| v * gain).collect()).collect();
    let fs = speech_rirs.sample_rate;
    let speech_image = Waveform::new(s, fs)?;
    let noise_image = Waveform::new(n, fs)?;
    let mixture = add_waveforms(&speech_image, &noise_image)?;
    Ok(Mixture {
        mixture,
        speech_image,
        noise_image,
    })
}

/// Impulse responses for the speech and noise source of a scenario.
pub fn scenario_rirs(scenario: &Scenario) -> Result<(RirSet, RirSet)> {
    let mics = scenario.mic_positions();
    let opts = RirOptions::default();
    let s = image_source_rir(&scenario.room_dims, scenario.rt60, &scenario.source_pos, &mics, scenario.sample_rate, &opts)?;
    let n = image_source_rir(&scenario.room_dims, scenario.rt60, &scenario.noise_pos, &mics, scenario.sample_rate, &opts)?;
    Ok((s, n))
}

/// Full scenario rendering with the built-in source signals.
pub fn simulate(scenario: &Scenario, duration_s: f64) -> Result<Mixture> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::InvalidParameter(format!("duration {duration_s} s must be positive")));
    }
    let samples = (duration_s * f64::from(scenario.sample_rate)).round() as usize;
    let speech = synthetic_speech(samples, scenario.sample_rate, scenario.seed);
    let noise = synthetic_noise(samples, scenario.seed);
    let (rs, rn) = scenario_rirs(scenario)?;
    mix_at_snr(&speech, &noise, &rs, &rn, scenario.snr_db, 0)
}
