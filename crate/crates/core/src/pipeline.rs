//! End-to-end helpers wiring the simulator, synchronization, windowing,
//! splitting, and training into the flows the command-line tool exposes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{simulate_session, split, synchronize, window, Dataset, NeedleProfile};
use crate::error::Result;
use crate::models::{build, ArchKind, ArchSpec};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub profile: NeedleProfile,
    pub duration_s: f64,
    pub t_s: usize,
    pub d_c: usize,
    pub seed: u64,
    pub train_frac: f64,
}

impl SimulateConfig {
    pub fn new(profile: NeedleProfile, duration_s: f64, t_s: usize, d_c: usize, seed: u64) -> Self {
        SimulateConfig { profile, duration_s, t_s, d_c, seed, train_frac: 0.8 }
    }
}

fn provenance(cfg: &SimulateConfig, tag: &str) -> String {
    json!({
        "profile": cfg.profile,
        "duration_s": cfg.duration_s,
        "t_s": cfg.t_s,
        "d_c": cfg.d_c,
        "seed": cfg.seed,
        "train_frac": cfg.train_frac,
        "split": tag,
    })
    .to_string()
}

/// Simulates one session and produces the train/test window splits.
pub fn simulate_split(cfg: &SimulateConfig) -> Result<(Dataset, Dataset)> {
    let (oct, force) = simulate_session(&cfg.profile, cfg.duration_s, cfg.d_c, cfg.seed)?;
    let pairs = synchronize(&oct, &force)?;
    let all = window(&oct, &pairs, cfg.t_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5011_7a6e);
    let (mut train_ds, mut test_ds) = split(&all, cfg.train_frac, &mut rng)?;
    train_ds.provenance = provenance(cfg, "train");
    test_ds.provenance = provenance(cfg, "test");
    Ok((train_ds, test_ds))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub t_s: usize,
    pub arch: String,
    pub val_mae: f64,
    pub train_seconds: f64,
    pub seed: u64,
}

/// One row per (t_s, arch): re-windows the same synchronized session at each
/// window length, trains from scratch, and reports the final validation MAE
/// plus the training wall-clock.
pub fn sweep_ts(
    profile: &NeedleProfile,
    duration_s: f64,
    d_c: usize,
    ts_values: &[usize],
    kinds: &[ArchKind],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if ts_values.is_empty() {
        return Err(crate::error::Error::contract("sweep needs at least one t_s value"));
    }
    let (oct, force) = simulate_session(profile, duration_s, d_c, seed)?;
    let pairs = synchronize(&oct, &force)?;
    let mut rows = Vec::new();
    for &t_s in ts_values {
        let all = window(&oct, &pairs, t_s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5011_7a6e);
        let (train_ds, _test_ds) = split(&all, 0.8, &mut rng)?;
        for &kind in kinds {
            let spec = ArchSpec::new(kind, t_s, d_c, seed);
            let mut model = build(&spec)?;
            let started = Instant::now();
            let history = train(&mut model, &train_ds, train_cfg)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let val_mae = history.epochs.last().map(|e| e.val_mae).unwrap_or(f64::NAN);
            rows.push(SweepRow { t_s, arch: kind.name().to_string(), val_mae, train_seconds, seed });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("t_s,arch,val_mae,train_seconds,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9e},{:.3},{}\n",
            r.t_s, r.arch, r.val_mae, r.train_seconds, r.seed
        ));
    }
    out
}
