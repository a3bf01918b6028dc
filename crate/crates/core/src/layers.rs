//! Neural layers shared by all architectures: dense, batch norm (plain and
//! per-timestep), dropout, GRU cell, convolutional GRU cell, residual
//! blocks.
//!
//! Layers do not own their weights; they hold [`ParamId`] handles into a
//! [`ParamSet`] so that serialization and the optimizer see one flat,
//! ordered, named collection. A forward pass goes through a [`Ctx`], which
//! owns the tape for one batch and memoizes parameter leaves.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Padding, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Updated by the optimizer. Running statistics are stored with
    /// `trainable = false` and updated in place by their layer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, index: usize) -> &ParamEntry<S> {
        &self.entries[index]
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry<S> {
        &mut self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<S>> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalars held by trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }
}

/// Forward-pass context for one batch: the tape plus memoized parameter
/// leaves. Parameters are inserted on first use; gradients flow to them only
/// in train mode.
///
/// The parameter set is borrowed immutably so eval-mode forwards can run on
/// a shared model. Train-mode layers queue running-statistic updates, which
/// the caller applies after the batch via [`Ctx::finish`].
pub struct Ctx<'a, S: Scalar> {
    pub tape: Tape<S>,
    params: &'a ParamSet<S>,
    leaves: Vec<Option<NodeId>>,
    mode: Mode,
    pending: Vec<Box<dyn FnOnce(&mut ParamSet<S>) + Send>>,
}

/// Queued running-statistic updates from one train-mode forward.
pub struct PendingUpdates<S>(Vec<Box<dyn FnOnce(&mut ParamSet<S>) + Send>>);

impl<S: Scalar> PendingUpdates<S> {
    pub fn apply(self, params: &mut ParamSet<S>) {
        for f in self.0 {
            f(params);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(params: &'a ParamSet<S>, mode: Mode) -> Self {
        let leaves = vec![None; params.len()];
        Ctx { tape: Tape::new(), params, leaves, mode, pending: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape leaf for a parameter, inserted once per batch.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.leaves[id.index()] {
            return node;
        }
        let entry = self.params.entry(id.index());
        let requires_grad = entry.trainable && self.mode == Mode::Train;
        let node = self.tape.leaf(entry.tensor.clone(), requires_grad);
        self.leaves[id.index()] = Some(node);
        node
    }

    /// Raw parameter value (running statistics, eval-mode coefficients).
    pub fn param_value(&self, id: ParamId) -> &Tensor<S> {
        self.params.get(id)
    }

    /// Queues an in-place update of a non-tape parameter (running
    /// statistics); applied by [`Ctx::finish`].
    pub fn update_param(
        &mut self,
        id: ParamId,
        f: impl FnOnce(&mut Tensor<S>) + Send + 'static,
    ) {
        self.pending.push(Box::new(move |ps: &mut ParamSet<S>| f(ps.get_mut(id))));
    }

    /// Runs backward from `loss` and collects gradients per parameter index.
    pub fn backward_and_grads(&mut self, loss: NodeId) -> Result<Vec<Option<Vec<S>>>> {
        self.tape.backward(loss)?;
        let mut grads = vec![None; self.params.len()];
        for (idx, leaf) in self.leaves.iter().enumerate() {
            if let Some(node) = leaf {
                grads[idx] = self.tape.grad(*node).map(|g| g.to_vec());
            }
        }
        Ok(grads)
    }

    /// Consumes the context, returning the queued running-stat updates.
    pub fn finish(self) -> PendingUpdates<S> {
        PendingUpdates(self.pending)
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// Fan-based uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<S: Scalar, R: Rng>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Random n x n orthogonal matrix via modified Gram-Schmidt on a Gaussian
/// draw (always computed in f64).
pub fn orthogonal<S: Scalar, R: Rng>(rng: &mut R, n: usize) -> Tensor<S> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| standard_normal(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (v, w) in rows[i].iter_mut().zip(&rj) {
                    *v -= dot * w;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        if ok {
            let data = rows.into_iter().flatten().map(S::from_f64).collect();
            return Tensor::new(vec![n, n], data).expect("square shape");
        }
    }
}

/// Box-Muller standard normal; keeps the layer initializers independent of
/// distribution crates.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{prefix}.w"),
            glorot_uniform(rng, vec![out_dim, in_dim], in_dim, out_dim),
            true,
        );
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(vec![out_dim]), true);
        Dense { w, b, in_dim, out_dim }
    }

    /// `x: [B, in_dim] -> [B, out_dim]`
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Single-vector affine map `W x + b` for `x: [n]`, `W: [m, n]`, `b: [m]`.
pub fn dense<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let n = match tape.value(x).shape() {
        [n] => *n,
        other => return Err(Error::dim(format!("dense: x must be a vector, got {other:?}"))),
    };
    let m = tape.value(w).shape()[0];
    let row = tape.reshape(x, vec![1, n])?;
    let y = tape.linear(row, w, Some(b))?;
    tape.reshape(y, vec![m])
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, prefix: &str, channels: usize) -> Self {
        Self::with_gamma(params, prefix, channels, 1.0)
    }

    pub fn with_gamma<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        channels: usize,
        gamma_init: f64,
    ) -> Self {
        let gamma = params.add(
            format!("{prefix}.gamma"),
            Tensor::full(vec![channels], S::from_f64(gamma_init)),
            true,
        );
        let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(vec![channels]), true);
        let running_mean =
            params.add(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]), false);
        let running_var = params.add(
            format!("{prefix}.running_var"),
            Tensor::full(vec![channels], S::ONE),
            false,
        );
        BatchNorm { gamma, beta, running_mean, running_var, channels, momentum: 0.99, eps: 1e-5 }
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages; eval mode applies the running statistics.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        match ctx.mode() {
            Mode::Train => {
                let g = ctx.param(self.gamma);
                let b = ctx.param(self.beta);
                let (y, stats) = ctx.tape.batch_norm(x, g, b, S::from_f64(self.eps))?;
                let keep = S::from_f64(self.momentum);
                let one_minus = S::ONE - keep;
                let (mean, var) = (stats.mean, stats.var);
                ctx.update_param(self.running_mean, move |t| {
                    for (r, m) in t.data_mut().iter_mut().zip(&mean) {
                        *r = *r * keep + *m * one_minus;
                    }
                });
                ctx.update_param(self.running_var, move |t| {
                    for (r, v) in t.data_mut().iter_mut().zip(&var) {
                        *r = *r * keep + *v * one_minus;
                    }
                });
                Ok(y)
            }
            Mode::Eval => {
                let (scale, shift) = self.eval_affine(ctx, 0);
                ctx.tape.channel_affine(x, scale, shift)
            }
        }
    }

    fn eval_affine<S: Scalar>(&self, ctx: &Ctx<S>, row: usize) -> (Vec<S>, Vec<S>) {
        let c = self.channels;
        let mean = &ctx.param_value(self.running_mean).data()[row * c..(row + 1) * c];
        let var = &ctx.param_value(self.running_var).data()[row * c..(row + 1) * c];
        let gamma = ctx.param_value(self.gamma).data();
        let beta = ctx.param_value(self.beta).data();
        let eps = S::from_f64(self.eps);
        let mut scale = vec![S::ZERO; c];
        let mut shift = vec![S::ZERO; c];
        for ch in 0..c {
            let inv = S::ONE / (var[ch] + eps).sqrt();
            scale[ch] = gamma[ch] * inv;
            shift[ch] = beta[ch] - gamma[ch] * mean[ch] * inv;
        }
        (scale, shift)
    }
}

/// Batch normalization with statistics tracked separately per timestep;
/// gamma/beta are shared across timesteps. Timestep indices at or beyond
/// `t_max` reuse the statistics of `t_max - 1`.
#[derive(Debug, Clone)]
pub struct RecurrentBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub channels: usize,
    pub t_max: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl RecurrentBatchNorm {
    /// Gamma starts small (0.1); large values saturate the recurrent
    /// nonlinearities early in training.
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        channels: usize,
        t_max: usize,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::contract("recurrent batch norm needs t_max >= 1"));
        }
        let gamma = params.add(
            format!("{prefix}.gamma"),
            Tensor::full(vec![channels], S::from_f64(0.1)),
            true,
        );
        let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(vec![channels]), true);
        let running_mean = params.add(
            format!("{prefix}.running_mean"),
            Tensor::zeros(vec![t_max, channels]),
            false,
        );
        let running_var = params.add(
            format!("{prefix}.running_var"),
            Tensor::full(vec![t_max, channels], S::ONE),
            false,
        );
        Ok(RecurrentBatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            t_max,
            momentum: 0.99,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: NodeId, t: usize) -> Result<NodeId> {
        let slot = t.min(self.t_max - 1);
        match ctx.mode() {
            Mode::Train => {
                let g = ctx.param(self.gamma);
                let b = ctx.param(self.beta);
                let (y, stats) = ctx.tape.batch_norm(x, g, b, S::from_f64(self.eps))?;
                let keep = S::from_f64(self.momentum);
                let one_minus = S::ONE - keep;
                let c = self.channels;
                let (mean, var) = (stats.mean, stats.var);
                ctx.update_param(self.running_mean, move |tns| {
                    let row = &mut tns.data_mut()[slot * c..(slot + 1) * c];
                    for (r, m) in row.iter_mut().zip(&mean) {
                        *r = *r * keep + *m * one_minus;
                    }
                });
                ctx.update_param(self.running_var, move |tns| {
                    let row = &mut tns.data_mut()[slot * c..(slot + 1) * c];
                    for (r, v) in row.iter_mut().zip(&var) {
                        *r = *r * keep + *v * one_minus;
                    }
                });
                Ok(y)
            }
            Mode::Eval => {
                let bn = BatchNorm {
                    gamma: self.gamma,
                    beta: self.beta,
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    channels: self.channels,
                    momentum: self.momentum,
                    eps: self.eps,
                };
                let (scale, shift) = bn.eval_affine(ctx, slot);
                ctx.tape.channel_affine(x, scale, shift)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout with a freshly sampled mask (per-call policy). Train
/// mode scales surviving entries by 1/(1-p); eval mode and p = 0 are the
/// identity (the input node is returned unchanged).
pub fn dropout<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    if mode == Mode::Eval || p == 0.0 {
        check_dropout_p(p)?;
        return Ok(x);
    }
    check_dropout_p(p)?;
    let mask = dropout_mask(tape.value(x).len(), p, rng)?;
    tape.mul_mask(x, mask)
}

/// Samples one inverted-dropout mask; reused across every timestep of a
/// sequence under the per-sequence policy.
pub fn dropout_mask<S: Scalar, R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Arc<Vec<S>>> {
    check_dropout_p(p)?;
    let keep = S::from_f64(1.0 / (1.0 - p));
    let mask = (0..n)
        .map(|_| if rng.gen_range(0.0..1.0) < p { S::ZERO } else { keep })
        .collect::<Vec<_>>();
    Ok(Arc::new(mask))
}

fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("dropout probability must be in [0,1), got {p}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GRU cell (matrix gates)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut gate = |g: &str, rng: &mut R| {
            let w = params.add(
                format!("{prefix}.w_{g}"),
                glorot_uniform(rng, vec![hidden, in_dim], in_dim, hidden),
                true,
            );
            let u = params.add(format!("{prefix}.u_{g}"), orthogonal(rng, hidden), true);
            let b = params.add(format!("{prefix}.b_{g}"), Tensor::zeros(vec![hidden]), true);
            (w, u, b)
        };
        let (w_z, u_z, b_z) = gate("z", rng);
        let (w_r, u_r, b_r) = gate("r", rng);
        let (w_c, u_c, b_c) = gate("c", rng);
        GruCell { w_z, u_z, b_z, w_r, u_r, b_r, w_c, u_c, b_c, in_dim, hidden }
    }

    /// One step: `x [B, n], h_prev [B, m] -> h_t [B, m]` with
    /// `h_t = z*c + (1-z)*h_prev`.
    pub fn step<S: Scalar>(&self, ctx: &mut Ctx<S>, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let gate = |ctx: &mut Ctx<S>, w, u, b, input, hidden| -> Result<NodeId> {
            let wn = ctx.param(w);
            let un = ctx.param(u);
            let bn = ctx.param(b);
            let xi = ctx.tape.linear(input, wn, Some(bn))?;
            let hi = ctx.tape.linear(hidden, un, None)?;
            ctx.tape.add(xi, hi)
        };
        let z_pre = gate(ctx, self.w_z, self.u_z, self.b_z, x, h_prev)?;
        let z = ctx.tape.sigmoid(z_pre);
        let r_pre = gate(ctx, self.w_r, self.u_r, self.b_r, x, h_prev)?;
        let r = ctx.tape.sigmoid(r_pre);
        let rh = ctx.tape.mul(r, h_prev)?;
        let c_pre = gate(ctx, self.w_c, self.u_c, self.b_c, x, rh)?;
        let c = ctx.tape.tanh(c_pre);
        ctx.tape.convex_combine(z, c, h_prev)
    }
}

// ---------------------------------------------------------------------------
// Convolutional GRU cell
// ---------------------------------------------------------------------------

/// Input-path normalization inside the convolutional GRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Recurrent batch normalization with per-timestep statistics.
    PerTimestep { t_max: usize },
    /// Parameter-free standardization with the current batch statistics.
    PerCall,
    Off,
}

/// Per-sequence dropout masks, sampled once per sequence (or batch of
/// sequences) and reused at every timestep.
#[derive(Debug, Clone, Default)]
pub struct SeqMasks<S> {
    pub input: Option<Arc<Vec<S>>>,
    pub output: Option<Arc<Vec<S>>>,
}

impl<S> SeqMasks<S> {
    pub fn none() -> Self {
        SeqMasks { input: None, output: None }
    }
}

pub struct ConvGruStep {
    /// Carried state, never dropped.
    pub state: NodeId,
    /// State as exposed to the next layer; output dropout applies here.
    pub emitted: NodeId,
}

#[derive(Debug, Clone)]
pub struct ConvGruCell {
    pub k_z: ParamId,
    pub k_r: ParamId,
    pub k_c: ParamId,
    pub l_z: ParamId,
    pub l_r: ParamId,
    pub l_c: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_c: ParamId,
    pub rbn: Option<RecurrentBatchNorm>,
    pub norm: NormMode,
    pub p_di: f64,
    pub p_do: f64,
    pub c_in: usize,
    pub c_h: usize,
    pub width: usize,
}

impl ConvGruCell {
    /// Hidden-to-hidden kernels start identity-like (orthogonal center tap,
    /// zero side taps); the update-gate bias starts at 1 so the cell begins
    /// near carry-through.
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        prefix: &str,
        c_in: usize,
        c_h: usize,
        width: usize,
        norm: NormMode,
        p_di: f64,
        p_do: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_dropout_p(p_di)?;
        check_dropout_p(p_do)?;
        let mut hidden_kernel = |name: &str, rng: &mut R| {
            let center = orthogonal::<S, R>(rng, c_h);
            let mut k = Tensor::zeros(vec![c_h, c_h, width]);
            let mid = width / 2;
            for o in 0..c_h {
                for c in 0..c_h {
                    k.data_mut()[(o * c_h + c) * width + mid] = center.data()[o * c_h + c];
                }
            }
            params.add(format!("{prefix}.{name}"), k, true)
        };
        let k_z = hidden_kernel("k_z", rng);
        let k_r = hidden_kernel("k_r", rng);
        let k_c = hidden_kernel("k_c", rng);
        let mut input_kernel = |name: &str, rng: &mut R| {
            params.add(
                format!("{prefix}.{name}"),
                glorot_uniform(rng, vec![c_h, c_in, width], c_in * width, c_h * width),
                true,
            )
        };
        let l_z = input_kernel("l_z", rng);
        let l_r = input_kernel("l_r", rng);
        let l_c = input_kernel("l_c", rng);
        let b_z = params.add(format!("{prefix}.b_z"), Tensor::full(vec![c_h], S::ONE), true);
        let b_r = params.add(format!("{prefix}.b_r"), Tensor::zeros(vec![c_h]), true);
        let b_c = params.add(format!("{prefix}.b_c"), Tensor::zeros(vec![c_h]), true);
        let rbn = match norm {
            NormMode::PerTimestep { t_max } => {
                Some(RecurrentBatchNorm::new(params, &format!("{prefix}.rbn"), c_in, t_max)?)
            }
            _ => None,
        };
        Ok(ConvGruCell {
            k_z,
            k_r,
            k_c,
            l_z,
            l_r,
            l_c,
            b_z,
            b_r,
            b_c,
            rbn,
            norm,
            p_di,
            p_do,
            c_in,
            c_h,
            width,
        })
    }

    /// One step over `x [B, c_in, L]`, `h_prev [B, c_h, L]`:
    ///
    /// ```text
    /// z = sigmoid(K_z * h_prev + L_z * norm(x) + b_z)
    /// r = sigmoid(K_r * h_prev + L_r * norm(x) + b_r)
    /// c = tanh   (K_c * (r.h_prev) + L_c * norm(x) + b_c)
    /// h = z.c + (1-z).h_prev
    /// ```
    ///
    /// Input dropout (p_di) masks x before the normalization; output dropout
    /// (p_do) applies only to the emitted state, never to the carried one.
    /// Masks come from `masks` (per-sequence policy); pass `SeqMasks::none()`
    /// in eval mode.
    pub fn step<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        x: NodeId,
        h_prev: NodeId,
        t: usize,
        masks: &SeqMasks<S>,
    ) -> Result<ConvGruStep> {
        let mut xin = x;
        if ctx.is_train() {
            if let Some(mask) = &masks.input {
                xin = ctx.tape.mul_mask(xin, Arc::clone(mask))?;
            }
        }
        let xn = match self.norm {
            NormMode::PerTimestep { .. } => {
                self.rbn.as_ref().expect("built with rbn").forward(ctx, xin, t)?
            }
            NormMode::PerCall => {
                let ones = ctx.tape.constant(Tensor::full(vec![self.c_in], S::ONE));
                let zeros = ctx.tape.constant(Tensor::zeros(vec![self.c_in]));
                let (y, _) = ctx.tape.batch_norm(xin, ones, zeros, S::from_f64(1e-5))?;
                y
            }
            NormMode::Off => xin,
        };

        let gate = |ctx: &mut Ctx<S>, k, l, b, hid| -> Result<NodeId> {
            let kn = ctx.param(k);
            let ln = ctx.param(l);
            let bn = ctx.param(b);
            let hk = ctx.tape.conv1d(hid, kn, Some(bn), 1, Padding::Same)?;
            let xl = ctx.tape.conv1d(xn, ln, None, 1, Padding::Same)?;
            ctx.tape.add(hk, xl)
        };
        let z_pre = gate(ctx, self.k_z, self.l_z, self.b_z, h_prev)?;
        let z = ctx.tape.sigmoid(z_pre);
        let r_pre = gate(ctx, self.k_r, self.l_r, self.b_r, h_prev)?;
        let r = ctx.tape.sigmoid(r_pre);
        let rh = ctx.tape.mul(r, h_prev)?;
        let c_pre = gate(ctx, self.k_c, self.l_c, self.b_c, rh)?;
        let c = ctx.tape.tanh(c_pre);
        let state = ctx.tape.convex_combine(z, c, h_prev)?;

        let mut emitted = state;
        if ctx.is_train() {
            if let Some(mask) = &masks.output {
                emitted = ctx.tape.mul_mask(emitted, Arc::clone(mask))?;
            }
        }
        Ok(ConvGruStep { state, emitted })
    }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel_width: usize,
    pub dim: usize,
}

impl ResBlockSpec {
    pub fn dim1(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResBlockSpec { in_channels, out_channels, stride, kernel_width: 3, dim: 1 }
    }

    pub fn dim2(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ResBlockSpec { in_channels, out_channels, stride, kernel_width: 3, dim: 2 }
    }

    fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::contract(format!("resblock stride must be 1 or 2, got {}", self.stride)));
        }
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::contract(format!("resblock dim must be 1 or 2, got {}", self.dim)));
        }
        Ok(())
    }
}

/// Two convolutions with batch norm and a shortcut:
/// `y = relu(BN(conv2(relu(BN(conv1(x, stride))))) + shortcut(x))`.
/// The shortcut is the identity, or a width-1 strided projection whenever
/// stride or channel count changes the shape.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub spec: ResBlockSpec,
    conv1: ParamId,
    bn1: BatchNorm,
    conv2: ParamId,
    bn2: BatchNorm,
    shortcut: Option<ParamId>,
}

impl ResBlock {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        prefix: &str,
        spec: ResBlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (ci, co, w) = (spec.in_channels, spec.out_channels, spec.kernel_width);
        let taps = if spec.dim == 1 { w } else { w * w };
        let kshape = |cin: usize, cout: usize, width: usize| -> Vec<usize> {
            if spec.dim == 1 {
                vec![cout, cin, width]
            } else {
                vec![cout, cin, width, width]
            }
        };
        let conv1 = params.add(
            format!("{prefix}.conv1"),
            glorot_uniform(rng, kshape(ci, co, w), ci * taps, co * taps),
            true,
        );
        let bn1 = BatchNorm::new(params, &format!("{prefix}.bn1"), co);
        let conv2 = params.add(
            format!("{prefix}.conv2"),
            glorot_uniform(rng, kshape(co, co, w), co * taps, co * taps),
            true,
        );
        let bn2 = BatchNorm::new(params, &format!("{prefix}.bn2"), co);
        let shortcut = if spec.stride != 1 || ci != co {
            Some(params.add(
                format!("{prefix}.shortcut"),
                glorot_uniform(rng, kshape(ci, co, 1), ci, co),
                true,
            ))
        } else {
            None
        };
        Ok(ResBlock { spec, conv1, bn1, conv2, bn2, shortcut })
    }

    fn conv<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        x: NodeId,
        k: ParamId,
        stride: usize,
    ) -> Result<NodeId> {
        let kn = ctx.param(k);
        if self.spec.dim == 1 {
            ctx.tape.conv1d(x, kn, None, stride, Padding::Same)
        } else {
            ctx.tape.conv2d(x, kn, None, stride, Padding::Same)
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: NodeId) -> Result<NodeId> {
        let a = self.conv(ctx, x, self.conv1, self.spec.stride)?;
        let a = self.bn1.forward(ctx, a)?;
        let a = ctx.tape.relu(a);
        let a = self.conv(ctx, a, self.conv2, 1)?;
        let a = self.bn2.forward(ctx, a)?;
        let s = match self.shortcut {
            Some(k) => self.conv(ctx, x, k, self.spec.stride)?,
            None => x,
        };
        let y = ctx.tape.add(a, s)?;
        Ok(ctx.tape.relu(y))
    }
}
