//! Loss, Adam optimizer, learning-rate schedule, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{gp_fit, gp_fit_auto, mip_feature, GpHyper};
use crate::layers::{dropout_mask, Ctx, Mode, ParamSet, SeqMasks};
use crate::models::{ArchKind, Model, MIP_MEDIAN_K};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning rate halves every this many epochs.
    pub halve_every: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    /// Global-norm gradient clip; recurrent training protection.
    pub clip_norm: Option<f64>,
    /// Fraction of the train split carved off (from the tail) as validation.
    pub val_frac: f64,
    /// Uniform-stride cap on the number of training windows; desk-scale
    /// budgets. `None` trains on everything.
    pub max_train_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            lr0: 1e-4,
            halve_every: 30,
            max_epochs: 300,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            clip_norm: Some(5.0),
            val_frac: 0.125,
            max_train_windows: None,
        }
    }
}

impl TrainConfig {
    /// Minutes-scale preset for a 2-core desktop: capped training set, 30
    /// epochs, and a faster-decaying, larger initial learning rate to fit
    /// the shorter schedule.
    pub fn desk() -> Self {
        TrainConfig {
            max_epochs: 30,
            lr0: 1e-3,
            halve_every: 10,
            max_train_windows: Some(2000),
            ..TrainConfig::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::contract(format!(
                "batch size must be >= 2 (batch normalization), got {}",
                self.batch_size
            )));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::contract("initial learning rate must be positive"));
        }
        if self.halve_every == 0 {
            return Err(Error::contract("halve_every must be >= 1"));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * 0.5f64.powi((epoch / config.halve_every) as i32)
}

/// Mean squared error between two same-length vectors on the tape.
pub fn mse_loss<S: Scalar>(tape: &mut Tape<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction over a [`ParamSet`]; state is kept per entry in
/// set order. Non-trainable entries are skipped.
pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = (0..params.len()).map(|i| vec![S::ZERO; params.entry(i).tensor.len()]).collect();
        let v = (0..params.len()).map(|i| vec![S::ZERO; params.entry(i).tensor.len()]).collect();
        Adam { m, v, t: 0, beta1, beta2, eps }
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &[Option<Vec<S>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_minus_b1 = S::ONE - b1;
        let one_minus_b2 = S::ONE - b2;
        let corr1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !params.entry(idx).trainable {
                continue;
            }
            if g.len() != params.entry(idx).tensor.len() {
                return Err(Error::dim(format!(
                    "gradient of {} values for parameter {} of {}",
                    g.len(),
                    params.entry(idx).name,
                    params.entry(idx).tensor.len()
                )));
            }
            let data = params.entry_mut(idx).tensor.data_mut();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_minus_b1 * g[i];
                v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g {
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v *= scale;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch, in normalized force units.
    pub loss: f64,
    /// Validation MAE in mN (eval mode), NaN when there is no validation set.
    pub val_mae: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub total_steps: usize,
    pub seed: u64,
    pub shuffled: bool,
}

impl TrainHistory {
    /// `epoch,loss,val_mae,lr,seconds` rows under a commented metadata header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed={} shuffle={}\n", self.seed, self.shuffled);
        out.push_str("epoch,loss,val_mae,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.3}\n",
                e.epoch, e.loss, e.val_mae, e.lr, e.seconds
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn fit_normalization(model: &mut Model, train: &Dataset) {
    let d_c = train.d_c();
    let mut mean = vec![0.0f64; d_c];
    let mut sq = vec![0.0f64; d_c];
    let mut rows = 0usize;
    for i in 0..train.len() {
        for row in train.window(i).chunks_exact(d_c) {
            for (j, v) in row.iter().enumerate() {
                mean[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
            rows += 1;
        }
    }
    let n = rows.max(1) as f64;
    for j in 0..d_c {
        mean[j] /= n;
        let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
        model.norm.px_mean[j] = mean[j] as f32;
        model.norm.px_std[j] = (var.sqrt() as f32).max(1e-6);
    }
    let max_f = train.forces().iter().fold(0.0f32, |acc, f| acc.max(f.abs()));
    model.norm.force_scale = max_f.max(1e-6);
}

fn validation_mae(model: &Model, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let windows: Vec<&[f32]> = (0..val.len()).map(|i| val.window(i)).collect();
    let preds = model.predict_batch(&windows)?;
    let mae = preds
        .iter()
        .zip(val.forces())
        .map(|(p, t)| (p - t).abs() as f64)
        .sum::<f64>()
        / val.len() as f64;
    Ok(mae)
}

/// Trains in place and reports per-epoch history. Deterministic given the
/// config seed. The GP baseline is fitted directly (no gradient loop).
pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.t_s() != model.spec.t_s || dataset.d_c() != model.spec.d_c {
        return Err(Error::dim(format!(
            "dataset windows are {}x{} but the model expects {}x{}",
            dataset.t_s(),
            dataset.d_c(),
            model.spec.t_s,
            model.spec.d_c
        )));
    }
    let capped = match config.max_train_windows {
        Some(cap) => dataset.subsample(cap),
        None => dataset.clone(),
    };
    let (train_ds, val_ds) = capped.split_tail(config.val_frac);
    if train_ds.is_empty() {
        return Err(Error::contract("no training windows left after the validation carve"));
    }
    fit_normalization(model, &train_ds);

    if model.kind() == ArchKind::MipGpm {
        return train_gp(model, &train_ds, &val_ds, config);
    }

    let bsz = config.batch_size;
    let steps_per_epoch = train_ds.len() / bsz;
    if steps_per_epoch == 0 {
        return Err(Error::contract(format!(
            "{} training windows cannot fill one batch of {bsz}",
            train_ds.len()
        )));
    }

    let mut adam = Adam::new(&model.params, config.beta1, config.beta2, config.eps);
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let scale = model.norm.force_scale;
    let (p_di, p_do) = model.dropout_probs();

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, config);
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks_exact(bsz).enumerate() {
            let windows: Vec<&[f32]> = chunk.iter().map(|&i| train_ds.window(i)).collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| train_ds.force(i) / scale).collect();

            let masks = match model.mask_lens(bsz) {
                Some((in_len, out_len)) => SeqMasks {
                    input: (p_di > 0.0).then(|| dropout_mask(in_len, p_di, &mut rng)).transpose()?,
                    output: (p_do > 0.0).then(|| dropout_mask(out_len, p_do, &mut rng)).transpose()?,
                },
                None => SeqMasks::none(),
            };

            let mut ctx = Ctx::new(&model.params, Mode::Train);
            let pred = model.train_forward(&mut ctx, &windows, &masks)?;
            let target_node =
                ctx.tape.constant(crate::tensor::Tensor::new(vec![bsz], targets)?);
            let loss = mse_loss(&mut ctx.tape, pred, target_node)?;
            let loss_val = ctx.tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}, lr {lr:.3e}"
                )));
            }
            epoch_loss += loss_val;

            let mut grads = ctx.backward_and_grads(loss)?;
            let updates = ctx.finish();
            model.apply_updates(updates);
            if let Some(max_norm) = config.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&mut model.params, &grads, lr)?;
        }
        let val_mae = validation_mae(model, &val_ds)?;
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
            val_mae,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainHistory {
        epochs: history,
        total_steps: config.max_epochs * steps_per_epoch,
        seed: config.seed,
        shuffled: config.shuffle,
    })
}

/// Fits the MIP-GPM baseline: scalar features from the newest window rows,
/// hyperparameters grid-searched on validation MAE, capped at 2000 training
/// points. Values are rounded through f32 so the fitted state survives
/// serialization exactly.
fn train_gp(
    model: &mut Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let started = Instant::now();
    let d_c = train_ds.d_c();
    let scale = model.norm.force_scale;
    let feature = |ds: &Dataset, i: usize| -> Result<f64> {
        let w = ds.window(i);
        Ok((mip_feature(&w[w.len() - d_c..], MIP_MEDIAN_K)? as f32) as f64)
    };
    let mut x = Vec::with_capacity(train_ds.len());
    let mut y = Vec::with_capacity(train_ds.len());
    for i in 0..train_ds.len() {
        x.push(feature(train_ds, i)?);
        y.push((train_ds.force(i) / scale) as f64);
    }
    let mut vx = Vec::with_capacity(val_ds.len());
    let mut vy = Vec::with_capacity(val_ds.len());
    for i in 0..val_ds.len() {
        vx.push(feature(val_ds, i)?);
        vy.push((val_ds.force(i) / scale) as f64);
    }
    let fitted = gp_fit_auto(&x, &y, &vx, &vy, 2000)?;
    // Re-fit with f32-rounded hyperparameters for exact file round-trips.
    let hyper = GpHyper {
        length_scale: (fitted.hyper.length_scale as f32) as f64,
        signal_var: (fitted.hyper.signal_var as f32) as f64,
        noise_var: (fitted.hyper.noise_var as f32) as f64,
    };
    model.gp = Some(gp_fit(&fitted.x, &fitted.y, hyper)?);
    let val_mae = validation_mae(model, val_ds)?;
    Ok(TrainHistory {
        epochs: vec![EpochStats {
            epoch: 0,
            loss: f64::NAN,
            val_mae,
            lr: 0.0,
            seconds: started.elapsed().as_secs_f64(),
        }],
        total_steps: 0,
        seed: config.seed,
        shuffled: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{window, AscanStream};
    use crate::models::{build, ArchSpec};
    use crate::tape::grad_check;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let same = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let zero = mse_loss(&mut tape, a, same).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);

        let p = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let t = tape.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let one = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(one).data()[0], 1.0);
    }

    #[test]
    fn mse_gradient_is_two_over_n_times_residual() {
        let target = vec![0.5, -1.0, 2.0, 0.0];
        let x = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let tgt = target.clone();
        let err = grad_check(
            move |tape, xid| {
                let t = tape.constant(Tensor::from_vec(tgt.clone()));
                mse_loss(tape, xid, t)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        // Direct check of the analytic form 2(p - t)/B.
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(x.clone(), true);
        let t = tape.constant(Tensor::from_vec(target.clone()));
        let loss = mse_loss(&mut tape, p, t).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        for i in 0..4 {
            let expect = 2.0 * (x.data()[i] - target[i]) / 4.0;
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    fn single_param_set(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![value]), true);
        ps
    }

    #[test]
    fn adam_first_step_with_unit_gradient_moves_by_lr() {
        let mut ps = single_param_set(1.0);
        let mut adam = Adam::new(&ps, 0.9, 0.999, 1e-8);
        adam.step(&mut ps, &[Some(vec![1.0])], 0.01).unwrap();
        let moved = 1.0 - ps.get(ps.find("w").unwrap()).data()[0];
        // Bias correction makes m_hat = v_hat = 1 on step one.
        assert!((moved - 0.01).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn adam_zero_gradient_never_moves_parameters() {
        let mut ps = single_param_set(0.7);
        let mut adam = Adam::new(&ps, 0.9, 0.999, 1e-8);
        for _ in 0..50 {
            adam.step(&mut ps, &[Some(vec![0.0])], 0.5).unwrap();
        }
        assert_eq!(ps.get(ps.find("w").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn adam_trace_matches_hand_stepped_recurrence() {
        let grads = [0.3, -1.2, 0.8, 0.05, -0.4];
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let mut ps = single_param_set(0.0);
        let mut adam = Adam::new(&ps, b1, b2, eps);

        // Independent scalar recurrence.
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (step, &g) in grads.iter().enumerate() {
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);

            adam.step(&mut ps, &[Some(vec![g])], lr).unwrap();
            let got = ps.get(ps.find("w").unwrap()).data()[0];
            assert!((got - p).abs() < 1e-12, "step {step}: {got} vs {p}");
        }
    }

    #[test]
    fn lr_schedule_halves_every_thirty_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(29, &cfg), 1e-4);
        assert_eq!(lr_schedule(30, &cfg), 5e-5);
        assert_eq!(lr_schedule(60, &cfg), 2.5e-5);
        assert_eq!(lr_schedule(299, &cfg), 1e-4 * 0.5f64.powi(9));
        // Nonincreasing across the whole range.
        let mut prev = f64::MAX;
        for e in 0..300 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    /// Windows of pure noise with a force label computed from the newest row
    /// (or constant), anchored every `gap` scans.
    fn synthetic_dataset(
        n_windows: usize,
        t_s: usize,
        d_c: usize,
        seed: u64,
        label: impl Fn(&[f32]) -> f32,
    ) -> crate::data::Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = 3;
        let n_scans = t_s + n_windows * gap;
        let ts: Vec<f64> = (0..n_scans).map(|i| i as f64 * 1e-3).collect();
        let data: Vec<f32> = (0..n_scans * d_c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let oct = AscanStream::new(ts, d_c, data).unwrap();
        let pairs: Vec<(usize, f32)> = (0..n_windows)
            .map(|i| {
                let anchor = t_s - 1 + i * gap;
                (anchor, label(oct.scan(anchor)))
            })
            .collect();
        window(&oct, &pairs, t_s).unwrap()
    }

    fn tiny_spec(kind: ArchKind, seed: u64) -> ArchSpec {
        ArchSpec {
            kind,
            t_s: 3,
            d_c: 8,
            cnn_groups: vec![(6, 1)],
            gru_hidden: 8,
            convgru_channels: 3,
            seed,
        }
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr0: 3e-3,
            halve_every: 10,
            max_epochs: 5,
            seed,
            val_frac: 0.2,
            max_train_windows: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_zero_force_is_learned_immediately() {
        let ds = synthetic_dataset(40, 3, 8, 1, |_| 0.0);
        let mut model = build(&tiny_spec(ArchKind::Gru, 0)).unwrap();
        let hist = train(&mut model, &ds, &tiny_config(0)).unwrap();
        let last = hist.epochs.last().unwrap();
        assert!(last.val_mae < 1e-3, "val MAE {}", last.val_mae);
    }

    #[test]
    fn training_is_bitwise_deterministic_given_seed() {
        let ds = synthetic_dataset(24, 3, 8, 2, |row| row.iter().sum::<f32>());
        let run = || {
            let mut model = build(&tiny_spec(ArchKind::ConvGruCnnPlus, 5)).unwrap();
            train(&mut model, &ds, &tiny_config(7)).unwrap();
            model
        };
        let a = run();
        let b = run();
        for i in 0..a.params.len() {
            assert_eq!(
                a.params.entry(i).tensor.data(),
                b.params.entry(i).tensor.data(),
                "param {} differs between identical runs",
                a.params.entry(i).name
            );
        }
    }

    #[test]
    fn first_batch_loss_decreases_after_one_step_for_most_seeds() {
        let mut wins = 0;
        for seed in 0..20u64 {
            let ds = synthetic_dataset(8, 3, 8, 100 + seed, |row| 5.0 * row.iter().sum::<f32>());
            let mut model = build(&tiny_spec(ArchKind::Gru, seed)).unwrap();
            fit_normalization(&mut model, &ds);
            let windows: Vec<&[f32]> = (0..4).map(|i| ds.window(i)).collect();
            let targets: Vec<f32> =
                (0..4).map(|i| ds.force(i) / model.norm.force_scale).collect();

            let loss_of = |model: &Model| -> f64 {
                let mut ctx = Ctx::new(&model.params, Mode::Eval);
                let pred = model.train_forward(&mut ctx, &windows, &SeqMasks::none()).unwrap();
                let t = ctx.tape.constant(Tensor::new(vec![4], targets.clone()).unwrap());
                let l = mse_loss(&mut ctx.tape, pred, t).unwrap();
                ctx.tape.value(l).data()[0] as f64
            };
            let before = loss_of(&model);

            let mut ctx = Ctx::new(&model.params, Mode::Train);
            let pred = model.train_forward(&mut ctx, &windows, &SeqMasks::none()).unwrap();
            let t = ctx.tape.constant(Tensor::new(vec![4], targets.clone()).unwrap());
            let l = mse_loss(&mut ctx.tape, pred, t).unwrap();
            let grads = ctx.backward_and_grads(l).unwrap();
            let updates = ctx.finish();
            model.apply_updates(updates);
            let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);
            adam.step(&mut model.params, &grads, 1e-3).unwrap();

            if loss_of(&model) < before {
                wins += 1;
            }
        }
        assert!(wins >= 19, "loss decreased for only {wins}/20 seeds");
    }

    #[test]
    fn total_steps_counts_full_batches_only()  {
        let ds = synthetic_dataset(23, 3, 8, 3, |_| 1.0);
        let mut model = build(&tiny_spec(ArchKind::Gru, 1)).unwrap();
        let mut cfg = tiny_config(1);
        cfg.max_epochs = 3;
        cfg.val_frac = 0.0;
        let hist = train(&mut model, &ds, &cfg).unwrap();
        // 23 windows, batch 4 -> 5 full batches per epoch.
        assert_eq!(hist.total_steps, 3 * 5);
        assert_eq!(hist.epochs.len(), 3);
    }

    #[test]
    fn exploding_training_aborts_with_diagnostics() {
        let ds = synthetic_dataset(24, 3, 8, 4, |row| row.iter().sum::<f32>());
        let mut model = build(&tiny_spec(ArchKind::Gru, 2)).unwrap();
        let mut cfg = tiny_config(2);
        cfg.lr0 = 1e20;
        cfg.clip_norm = None;
        match train(&mut model, &ds, &cfg) {
            Err(Error::Training(msg)) => {
                assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
            }
            other => panic!("expected training abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn structured_signal_reduces_validation_error() {
        let ds = synthetic_dataset(60, 3, 8, 5, |row| 10.0 * row[3]);
        let mut model = build(&tiny_spec(ArchKind::Gru, 3)).unwrap();
        let mut cfg = tiny_config(11);
        cfg.max_epochs = 30;
        let hist = train(&mut model, &ds, &cfg).unwrap();
        let first = hist.epochs.first().unwrap().val_mae;
        let last = hist.epochs.last().unwrap().val_mae;
        assert!(last < first, "val MAE did not improve: {first} -> {last}");
        // lr nonincreasing over epochs.
        for w in hist.epochs.windows(2) {
            assert!(w[1].lr <= w[0].lr);
        }
    }

    #[test]
    fn gp_baseline_learns_monotone_peak_position() {
        // Windows whose newest row has a bright pixel at a force-dependent
        // position.
        let t_s = 2;
        let d_c = 16;
        let n = 60;
        let ts: Vec<f64> = (0..t_s + n).map(|i| i as f64 * 1e-3).collect();
        let mut data = vec![0.05f32; (t_s + n) * d_c];
        let mut forces = Vec::new();
        for i in 0..n {
            let force = (i % 10) as f32 * 10.0;
            let peak = (3 + (i % 10)) as isize;
            // Wide enough to survive the k=5 median filter.
            for off in -2isize..=2 {
                let px = (peak + off).clamp(0, d_c as isize - 1) as usize;
                data[(t_s + i) * d_c + px] = 1.0 - 0.2 * off.unsigned_abs() as f32;
            }
            forces.push(force);
        }
        let oct = AscanStream::new(ts, d_c, data).unwrap();
        let pairs: Vec<(usize, f32)> =
            (0..n).map(|i| (t_s + i, forces[i])).collect();
        let ds = window(&oct, &pairs, t_s).unwrap();

        let mut model = build(&ArchSpec {
            t_s,
            d_c,
            ..tiny_spec(ArchKind::MipGpm, 0)
        })
        .unwrap();
        let hist = train(&mut model, &ds, &tiny_config(0)).unwrap();
        assert!(model.gp.is_some());
        let val = hist.epochs[0].val_mae;
        assert!(val < 15.0, "GP val MAE {val}");
        // History CSV shape.
        let csv = hist.to_csv();
        assert!(csv.lines().count() >= 3);
    }
}
