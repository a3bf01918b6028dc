//! Synthetic needle simulator, stream synchronization, sequence windowing,
//! dataset splitting, and the binary dataset format.
//!
//! The simulator emulates the measurement chain: an axial force compresses a
//! deformable layer whose bright interface is imaged as a 1-D depth profile
//! (A-scan). Compression follows a cubic stiffness law and responds to force
//! through a first-order viscoelastic lag, so a single frame does not
//! determine the instantaneous force — history carries real information.

use std::io::{BufReader, BufWriter, Write};

use crate::binio::{CountingReader, HashingWriter};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A-scan acquisition rate of the emulated imaging device.
pub const OCT_RATE_HZ: f64 = 5500.0;
/// Acquisition rate of the emulated reference force sensor.
pub const FORCE_RATE_HZ: f64 = 500.0;

/// Physical thickness of the deformable layer, in micrometers. Stiffness
/// presets are scaled so the maximum-force compression uses 300 um of it.
const LAYER_UM: f64 = 500.0;
const MAX_COMPRESSION_UM: f64 = 300.0;
/// Gaussian width of the bright interface peak, in pixels.
const PEAK_WIDTH_PX: f64 = 1.5;
const PEAK_AMPLITUDE: f64 = 0.85;
const SCATTER_AMPLITUDE: f64 = 0.35;

// ---------------------------------------------------------------------------
// Needle profiles
// ---------------------------------------------------------------------------

/// Simulator parameters for one virtual needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleProfile {
    pub name: String,
    /// Linear stiffness, mN per um of layer compression.
    pub a: f64,
    /// Cubic stiffness, mN per um^3.
    pub b: f64,
    /// Interface position at rest, in pixels from the crop start.
    pub rest_depth_px: f64,
    /// Pixels spanned by the deformable layer.
    pub layer_px: f64,
    /// Per-pixel exponential intensity decay of the scattering layer.
    pub attenuation: f64,
    /// Multiplicative speckle scale (log-normal, unit mean).
    pub speckle_sigma: f64,
    /// Additive noise scale.
    pub noise_floor: f64,
    /// Maximum force magnitude, mN.
    pub f_max: f64,
    /// Viscoelastic relaxation time, in OCT sample periods (1/5500 s).
    pub hysteresis_tau: f64,
}

impl NeedleProfile {
    fn preset(name: &str, f_max: f64) -> Self {
        NeedleProfile {
            name: name.to_string(),
            a: 0.65 * f_max / MAX_COMPRESSION_UM,
            b: 0.35 * f_max / MAX_COMPRESSION_UM.powi(3),
            rest_depth_px: 44.0,
            layer_px: 40.0,
            attenuation: 0.02,
            speckle_sigma: 0.12,
            noise_floor: 0.02,
            f_max,
            hysteresis_tau: 330.0,
        }
    }

    pub fn soft() -> Self {
        Self::preset("soft", 379.0)
    }

    pub fn medium() -> Self {
        Self::preset("medium", 974.0)
    }

    pub fn stiff() -> Self {
        Self::preset("stiff", 3202.0)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "soft" => Some(Self::soft()),
            "medium" => Some(Self::medium()),
            "stiff" => Some(Self::stiff()),
            _ => None,
        }
    }

    /// Disables speckle and additive noise; test helper.
    pub fn noiseless(mut self) -> Self {
        self.speckle_sigma = 0.0;
        self.noise_floor = 0.0;
        self
    }

    pub fn validate(&self, d_c: usize) -> Result<()> {
        if self.a <= 0.0 || self.b < 0.0 {
            return Err(Error::contract(format!(
                "profile stiffness must satisfy a > 0, b >= 0 (a={}, b={})",
                self.a, self.b
            )));
        }
        if !(self.rest_depth_px > 0.0 && self.rest_depth_px < d_c as f64) {
            return Err(Error::contract(format!(
                "rest depth {} px outside crop of {d_c} px",
                self.rest_depth_px
            )));
        }
        if self.f_max <= 0.0 {
            return Err(Error::contract("profile f_max must be positive"));
        }
        if self.hysteresis_tau < 0.0 {
            return Err(Error::contract("profile hysteresis_tau must be >= 0"));
        }
        Ok(())
    }

    fn px_per_um(&self) -> f64 {
        self.layer_px / LAYER_UM
    }
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

/// Uniform-payload stream with strictly increasing timestamps (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct TimedStream<T> {
    pub timestamps: Vec<f64>,
    pub values: Vec<T>,
}

impl<T> TimedStream<T> {
    pub fn new(timestamps: Vec<f64>, values: Vec<T>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::contract(format!(
                "stream has {} timestamps but {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("stream timestamps must be strictly increasing"));
        }
        Ok(TimedStream { timestamps, values })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// A-scan stream; scans are stored flat (row-major, one row per scan) so
/// windowed datasets can reference them without copying.
#[derive(Debug, Clone)]
pub struct AscanStream {
    pub timestamps: Vec<f64>,
    pub d_c: usize,
    data: Arc<Vec<f32>>,
}

impl AscanStream {
    pub fn new(timestamps: Vec<f64>, d_c: usize, data: Vec<f32>) -> Result<Self> {
        if timestamps.len() * d_c != data.len() {
            return Err(Error::contract(format!(
                "{} scans of {d_c} px need {} values, got {}",
                timestamps.len(),
                timestamps.len() * d_c,
                data.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("stream timestamps must be strictly increasing"));
        }
        Ok(AscanStream { timestamps, d_c, data: Arc::new(data) })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn scan(&self, i: usize) -> &[f32] {
        &self.data[i * self.d_c..(i + 1) * self.d_c]
    }
}

// ---------------------------------------------------------------------------
// Single-frame physics
// ---------------------------------------------------------------------------

/// Solves `force = a*d + b*d^3` for the compression `d` (um) by bisection to
/// 1e-9 relative width. The map is odd and strictly monotone, so negative
/// forces yield negative compressions.
pub fn solve_compression(force: f64, a: f64, b: f64) -> f64 {
    if force == 0.0 {
        return 0.0;
    }
    let target = force.abs();
    let mut hi = target / a;
    while a * hi + b * hi * hi * hi < target {
        hi *= 2.0;
    }
    let mut lo = 0.0f64;
    while hi - lo > 1e-9 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if a * mid + b * mid * mid * mid < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let d = 0.5 * (lo + hi);
    if force < 0.0 {
        -d
    } else {
        d
    }
}

/// Sub-pixel interface position for a given force; strictly decreasing in
/// force for compressive (positive) loads.
pub fn interface_depth_px(force: f64, profile: &NeedleProfile) -> f64 {
    profile.rest_depth_px - solve_compression(force, profile.a, profile.b) * profile.px_per_um()
}

fn ascan_from_depth<R: Rng>(peak_px: f64, profile: &NeedleProfile, d_c: usize, rng: &mut R) -> Vec<f32> {
    let inv_two_sigma_sq = 1.0 / (2.0 * PEAK_WIDTH_PX * PEAK_WIDTH_PX);
    let mut out = Vec::with_capacity(d_c);
    for i in 0..d_c {
        let fi = i as f64;
        // Scattering layer above the interface; the region beyond it is not
        // penetrated and carries noise only.
        let mut v = if fi < peak_px { SCATTER_AMPLITUDE * (-profile.attenuation * fi).exp() } else { 0.0 };
        let d = fi - peak_px;
        v += PEAK_AMPLITUDE * (-d * d * inv_two_sigma_sq).exp();
        if profile.speckle_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            // Unit-mean log-normal speckle.
            v *= (profile.speckle_sigma * z - 0.5 * profile.speckle_sigma * profile.speckle_sigma).exp();
        }
        if profile.noise_floor > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v += (profile.noise_floor * z).abs();
        }
        out.push(v.clamp(0.0, 1.0) as f32);
    }
    out
}

/// One A-scan under a static force. Deterministic given `(force, profile,
/// rng state)`.
pub fn simulate_ascan<R: Rng>(
    force: f64,
    profile: &NeedleProfile,
    d_c: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    profile.validate(d_c)?;
    if force.abs() > profile.f_max {
        return Err(Error::Range(format!(
            "force {force} mN exceeds profile maximum {} mN",
            profile.f_max
        )));
    }
    Ok(ascan_from_depth(interface_depth_px(force, profile), profile, d_c, rng))
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

/// Random force trajectory on the A-scan clock: ramps toward random targets
/// at random velocities, separated by holds, smoothed by a 3-sample moving
/// average. Stays within [0, f_max].
fn force_trajectory(n: usize, f_max: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut raw = Vec::with_capacity(n);
    let mut current = 0.0f64;
    while raw.len() < n {
        // Release toward zero every few segments, otherwise a fresh target.
        let target = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..f_max) };
        let velocity = rng.gen_range(0.1..2.0) * f_max; // mN per second
        let per_sample = velocity / OCT_RATE_HZ;
        let steps = ((target - current).abs() / per_sample).ceil() as usize;
        let dir = if target >= current { 1.0 } else { -1.0 };
        for _ in 0..steps.max(1) {
            current = (current + dir * per_sample).clamp(0.0, f_max);
            raw.push(current);
            if raw.len() == n {
                break;
            }
        }
        current = target.clamp(0.0, f_max);
        let hold = (rng.gen_range(0.02..0.3) * OCT_RATE_HZ) as usize;
        for _ in 0..hold {
            raw.push(current);
            if raw.len() == n {
                break;
            }
        }
    }
    // Centered 3-sample moving average, edges replicated.
    let mut smooth = Vec::with_capacity(n);
    for k in 0..n {
        let a = raw[k.saturating_sub(1)];
        let b = raw[k];
        let c = raw[(k + 1).min(n - 1)];
        smooth.push((a + b + c) / 3.0);
    }
    smooth
}

/// Simulates one acquisition session: an A-scan stream at ~5500 Hz and a
/// force stream at ~500 Hz sharing one clock with independent sub-sample
/// start jitter. The imaged deformation follows the force through a
/// first-order lag with time constant `profile.hysteresis_tau` (in A-scan
/// periods); force labels are the instantaneous force.
pub fn simulate_session(
    profile: &NeedleProfile,
    duration_s: f64,
    d_c: usize,
    seed: u64,
) -> Result<(AscanStream, TimedStream<f32>)> {
    profile.validate(d_c)?;
    if duration_s <= 0.0 {
        return Err(Error::contract("session duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oct_dt = 1.0 / OCT_RATE_HZ;
    let force_dt = 1.0 / FORCE_RATE_HZ;
    let oct_jitter = rng.gen_range(0.0..oct_dt);
    let force_jitter = rng.gen_range(0.0..force_dt);

    let n_oct = ((duration_s - oct_jitter) / oct_dt).floor() as usize + 1;
    let oct_ts: Vec<f64> = (0..n_oct).map(|k| oct_jitter + k as f64 * oct_dt).collect();

    let force_on_grid = force_trajectory(n_oct, profile.f_max, &mut rng);

    // Deformation lags the instantaneous stiffness response.
    let mut depth = Vec::with_capacity(n_oct);
    if profile.hysteresis_tau > 0.0 {
        let alpha = 1.0 - (-1.0 / profile.hysteresis_tau).exp();
        let mut d = solve_compression(force_on_grid[0], profile.a, profile.b);
        depth.push(d);
        for &f in &force_on_grid[1..] {
            let target = solve_compression(f, profile.a, profile.b);
            d += alpha * (target - d);
            depth.push(d);
        }
    } else {
        depth.extend(
            force_on_grid.iter().map(|&f| solve_compression(f, profile.a, profile.b)),
        );
    }

    let px_per_um = profile.px_per_um();
    let scans: Vec<Vec<f32>> = (0..n_oct)
        .into_par_iter()
        .map(|k| {
            let mut scan_rng = ChaCha8Rng::seed_from_u64(seed);
            scan_rng.set_stream(k as u64 + 1);
            let peak = profile.rest_depth_px - depth[k] * px_per_um;
            ascan_from_depth(peak, profile, d_c, &mut scan_rng)
        })
        .collect();
    let mut flat = Vec::with_capacity(n_oct * d_c);
    for s in scans {
        flat.extend_from_slice(&s);
    }

    let n_force = ((duration_s - force_jitter) / force_dt).floor() as usize + 1;
    let mut force_ts = Vec::with_capacity(n_force);
    let mut force_vals = Vec::with_capacity(n_force);
    for j in 0..n_force {
        let t = force_jitter + j as f64 * force_dt;
        // Linear interpolation of the smoothed trajectory at this stream's
        // own (jittered) sampling instants.
        let pos = (t - oct_jitter) / oct_dt;
        let i0 = (pos.floor().max(0.0) as usize).min(n_oct - 1);
        let i1 = (i0 + 1).min(n_oct - 1);
        let frac = (pos - i0 as f64).clamp(0.0, 1.0);
        let f = force_on_grid[i0] * (1.0 - frac) + force_on_grid[i1] * frac;
        force_ts.push(t);
        force_vals.push(f as f32);
    }

    Ok((AscanStream::new(oct_ts, d_c, flat)?, TimedStream::new(force_ts, force_vals)?))
}

// ---------------------------------------------------------------------------
// Synchronization and windowing
// ---------------------------------------------------------------------------

/// Assigns the temporally nearest A-scan to each force sample. Ties break
/// toward the earlier A-scan; output follows force-timestamp order.
pub fn synchronize(oct: &AscanStream, force: &TimedStream<f32>) -> Result<Vec<(usize, f32)>> {
    if oct.is_empty() || force.is_empty() {
        return Err(Error::contract("synchronize: both streams must be non-empty"));
    }
    let ts = &oct.timestamps;
    let mut pairs = Vec::with_capacity(force.len());
    for (&t, &f) in force.timestamps.iter().zip(&force.values) {
        let idx = ts.partition_point(|&x| x < t);
        let best = if idx == 0 {
            0
        } else if idx == ts.len() {
            ts.len() - 1
        } else {
            let before = idx - 1;
            if (t - ts[before]) <= (ts[idx] - t) {
                before
            } else {
                idx
            }
        };
        pairs.push((best, f));
    }
    Ok(pairs)
}

/// One training example: a `t_s x d_c` window of consecutive A-scans (rows
/// oldest to newest) plus the force label at the newest scan.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSample<'a> {
    pub window: &'a [f32],
    pub force: f32,
    /// Index of the anchoring A-scan in the source stream.
    pub source_anchor: usize,
}

#[derive(Debug, Clone, Copy)]
struct SampleMeta {
    /// Last (newest) row of the window in the shared row pool.
    row_end: usize,
    source_anchor: usize,
    force: f32,
}

/// An ordered collection of sequence windows over a shared A-scan row pool.
#[derive(Debug, Clone)]
pub struct Dataset {
    t_s: usize,
    d_c: usize,
    rows: Arc<Vec<f32>>,
    samples: Vec<SampleMeta>,
    /// Provenance blob (profile, seed, duration) embedded in saved files.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn t_s(&self) -> usize {
        self.t_s
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    /// Row-major `t_s x d_c` window, oldest row first.
    pub fn window(&self, i: usize) -> &[f32] {
        let end = (self.samples[i].row_end + 1) * self.d_c;
        &self.rows[end - self.t_s * self.d_c..end]
    }

    pub fn force(&self, i: usize) -> f32 {
        self.samples[i].force
    }

    pub fn sample(&self, i: usize) -> SequenceSample<'_> {
        SequenceSample {
            window: self.window(i),
            force: self.samples[i].force,
            source_anchor: self.samples[i].source_anchor,
        }
    }

    pub fn forces(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.force).collect()
    }

    /// Source A-scan indices covered by window `i`.
    fn source_span(&self, i: usize) -> (usize, usize) {
        let anchor = self.samples[i].source_anchor;
        (anchor + 1 - self.t_s, anchor)
    }

    fn with_samples(&self, samples: Vec<SampleMeta>) -> Dataset {
        Dataset {
            t_s: self.t_s,
            d_c: self.d_c,
            rows: Arc::clone(&self.rows),
            samples,
            provenance: self.provenance.clone(),
        }
    }

    /// Uniform-stride subsample down to at most `max_n` windows; shares the
    /// row pool.
    pub fn subsample(&self, max_n: usize) -> Dataset {
        if self.len() <= max_n || max_n == 0 {
            return self.clone();
        }
        let stride = self.len() as f64 / max_n as f64;
        let samples =
            (0..max_n).map(|i| self.samples[(i as f64 * stride) as usize]).collect();
        self.with_samples(samples)
    }

    /// Splits off the last `frac` of windows (in order); used for carving a
    /// validation tail from a train split.
    pub fn split_tail(&self, frac: f64) -> (Dataset, Dataset) {
        let n_tail = ((self.len() as f64) * frac).round() as usize;
        let cut = self.len() - n_tail.min(self.len());
        let head = self.with_samples(self.samples[..cut].to_vec());
        let tail = self.with_samples(self.samples[cut..].to_vec());
        (head, tail)
    }
}

/// Builds one window per synchronized pair whose anchor has at least
/// `t_s - 1` predecessors; earlier pairs are dropped.
pub fn window(oct: &AscanStream, pairs: &[(usize, f32)], t_s: usize) -> Result<Dataset> {
    if t_s == 0 {
        return Err(Error::contract("window: t_s must be >= 1"));
    }
    let samples = pairs
        .iter()
        .filter(|(anchor, _)| *anchor + 1 >= t_s)
        .map(|&(anchor, force)| SampleMeta { row_end: anchor, source_anchor: anchor, force })
        .collect();
    Ok(Dataset {
        t_s,
        d_c: oct.d_c,
        rows: Arc::clone(&oct.data),
        samples,
        provenance: String::new(),
    })
}

/// Splits into train/test by one contiguous held-out block (random position)
/// so that no source A-scan index appears on both sides. Train windows whose
/// span would touch the test block's sources are dropped.
pub fn split(dataset: &Dataset, train_frac: f64, rng: &mut ChaCha8Rng) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::contract(format!("train fraction must be in (0,1), got {train_frac}")));
    }
    let n = dataset.len();
    let test_len = ((1.0 - train_frac) * n as f64).round() as usize;
    if test_len == 0 || test_len >= n {
        return Err(Error::contract(format!(
            "dataset of {n} windows cannot honor a {train_frac} split"
        )));
    }
    let start = rng.gen_range(0..=n - test_len);
    let test: Vec<SampleMeta> = dataset.samples[start..start + test_len].to_vec();
    let (lo_t, _) = dataset.source_span(start);
    let (_, hi_t) = dataset.source_span(start + test_len - 1);

    let t_s = dataset.t_s;
    let train: Vec<SampleMeta> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            if *i >= start && *i < start + test_len {
                return false;
            }
            // Keep only windows whose source span misses [lo_t, hi_t].
            s.source_anchor < lo_t || s.source_anchor + 1 - t_s > hi_t
        })
        .map(|(_, s)| *s)
        .collect();

    let ratio = train.len() as f64 / n as f64;
    if (ratio - train_frac).abs() > 0.02 {
        return Err(Error::contract(format!(
            "dataset too small to honor the no-overlap gap: train ratio {ratio:.3} vs requested {train_frac}"
        )));
    }
    Ok((dataset.with_samples(train), dataset.with_samples(test)))
}

// ---------------------------------------------------------------------------
// Dataset file format (OCTF)
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"OCTF";
const DATASET_VERSION: u16 = 1;

/// Little-endian layout: magic `OCTF`, version u16, t_s u32, d_c u32, n u64,
/// provenance JSON (u32 length + UTF-8), then n records of force f32 plus
/// the `t_s * d_c` f32 window (row-major, oldest row first), and a trailing
/// CRC32 of all preceding bytes.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.t_s as u32).to_le_bytes())?;
    w.write_all(&(dataset.d_c as u32).to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    let prov = dataset.provenance.as_bytes();
    w.write_all(&(prov.len() as u32).to_le_bytes())?;
    w.write_all(prov)?;
    let mut buf = Vec::with_capacity((dataset.t_s * dataset.d_c + 1) * 4);
    for i in 0..dataset.len() {
        buf.clear();
        buf.extend_from_slice(&dataset.force(i).to_le_bytes());
        for v in dataset.window(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.finish()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"OCTF\"")));
    }
    let (version, at) = r.read_u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let (t_s, at) = r.read_u32("t_s")?;
    if t_s == 0 {
        return Err(Error::format(at, "t_s must be >= 1"));
    }
    let (d_c, at) = r.read_u32("d_c")?;
    if d_c == 0 {
        return Err(Error::format(at, "d_c must be >= 1"));
    }
    let (n, _) = r.read_u64("record count")?;
    let (prov_len, _) = r.read_u32("provenance length")?;
    let mut prov = vec![0u8; prov_len as usize];
    let at = r.read_exact_at(&mut prov, "provenance")?;
    let provenance = String::from_utf8(prov)
        .map_err(|_| Error::format(at, "provenance is not valid UTF-8"))?;

    let (t_s, d_c, n) = (t_s as usize, d_c as usize, n as usize);
    let win_len = t_s * d_c;
    let mut rows = Vec::with_capacity(n * win_len);
    let mut samples = Vec::with_capacity(n);
    let mut rec = vec![0u8; 4 + win_len * 4];
    for i in 0..n {
        r.read_exact_at(&mut rec, &format!("record {i} of {n}"))?;
        let force = f32::from_le_bytes(rec[0..4].try_into().expect("4-byte slice"));
        for chunk in rec[4..].chunks_exact(4) {
            rows.push(f32::from_le_bytes(chunk.try_into().expect("4-byte slice")));
        }
        samples.push(SampleMeta {
            row_end: (i + 1) * t_s - 1,
            source_anchor: (i + 1) * t_s - 1,
            force,
        });
    }
    r.verify_crc()?;
    Ok(Dataset { t_s, d_c, rows: Arc::new(rows), samples, provenance })
}
