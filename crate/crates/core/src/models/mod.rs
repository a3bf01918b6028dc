//! The model zoo: nine architectures over the same window-in, force-out
//! contract, plus a stateful streaming API for the recurrent-first kinds.
//!
//! Streaming keeps unbounded recurrent state: after the first `t_s` scans it
//! matches whole-window inference exactly, and beyond that it keeps
//! integrating history rather than sliding a window, so the two agree only
//! approximately past `t_s` steps. `reset` restores the zero state.

mod io;

pub use io::{load_model, save_model};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GpModel};
use crate::layers::{
    ConvGruCell, Ctx, Dense, GruCell, Mode, NormMode, ParamId, ParamSet, PendingUpdates, ResBlock,
    ResBlockSpec, SeqMasks,
};
use crate::tape::{NodeId, Padding};
use crate::tensor::Tensor;

const STEM_CHANNELS: usize = 16;
const STEM_WIDTH: usize = 5;
/// Median-filter width for the classical baseline's feature.
pub const MIP_MEDIAN_K: usize = 5;

// ---------------------------------------------------------------------------
// Architecture specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ConvGruCnnPlus,
    ConvGruCnn,
    Gru,
    Cnn1d,
    CnnGru,
    CnnConvGru,
    Cnn2d,
    GruCnn,
    MipGpm,
}

impl ArchKind {
    pub const ALL: [ArchKind; 9] = [
        ArchKind::ConvGruCnnPlus,
        ArchKind::ConvGruCnn,
        ArchKind::Gru,
        ArchKind::Cnn1d,
        ArchKind::CnnGru,
        ArchKind::CnnConvGru,
        ArchKind::Cnn2d,
        ArchKind::GruCnn,
        ArchKind::MipGpm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::ConvGruCnnPlus => "convgru_cnn_plus",
            ArchKind::ConvGruCnn => "convgru_cnn",
            ArchKind::Gru => "gru",
            ArchKind::Cnn1d => "cnn1d",
            ArchKind::CnnGru => "cnn_gru",
            ArchKind::CnnConvGru => "cnn_convgru",
            ArchKind::Cnn2d => "cnn2d",
            ArchKind::GruCnn => "gru_cnn",
            ArchKind::MipGpm => "mip_gpm",
        }
    }

    pub fn from_name(name: &str) -> Option<ArchKind> {
        ArchKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub(crate) fn code(self) -> u8 {
        ArchKind::ALL.iter().position(|k| *k == self).expect("kind listed") as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<ArchKind> {
        ArchKind::ALL.get(code as usize).copied()
    }

    /// Kinds that process time first and therefore support one-sample
    /// streaming with cached hidden state.
    pub fn supports_streaming(self) -> bool {
        matches!(
            self,
            ArchKind::ConvGruCnnPlus | ArchKind::ConvGruCnn | ArchKind::Gru | ArchKind::GruCnn
        )
    }

    fn has_cnn_trunk(self) -> bool {
        !matches!(self, ArchKind::Gru | ArchKind::MipGpm)
    }

    /// Kinds trained by gradient descent (everything but the GP baseline).
    pub fn is_gradient_trained(self) -> bool {
        self != ArchKind::MipGpm
    }
}

/// Declarative description of one architecture instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Window length in timesteps. `cnn1d` accepts full windows but only
    /// consumes the newest row.
    pub t_s: usize,
    /// Crop size: pixels per A-scan.
    pub d_c: usize,
    /// CNN trunk groups as (feature_maps, num_blocks).
    pub cnn_groups: Vec<(usize, usize)>,
    pub gru_hidden: usize,
    pub convgru_channels: usize,
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(kind: ArchKind, t_s: usize, d_c: usize, seed: u64) -> Self {
        ArchSpec {
            kind,
            t_s,
            d_c,
            cnn_groups: vec![(32, 2), (64, 2), (128, 2)],
            gru_hidden: 128,
            convgru_channels: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_s == 0 {
            return Err(Error::contract("t_s must be >= 1"));
        }
        if self.d_c < 8 {
            return Err(Error::contract(format!("d_c must be >= 8, got {}", self.d_c)));
        }
        if self.kind.has_cnn_trunk() && self.cnn_groups.is_empty() {
            return Err(Error::contract(format!(
                "{} needs at least one CNN group",
                self.kind.name()
            )));
        }
        if self.cnn_groups.iter().any(|&(f, n)| f == 0 || n == 0) {
            return Err(Error::contract("CNN groups must have positive sizes"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// CNN trunk
// ---------------------------------------------------------------------------

/// Stem convolution + grouped residual blocks. The first block of each group
/// strides by 2 and raises the feature-map count; the rest keep shape.
#[derive(Debug, Clone)]
struct Trunk {
    stem: ParamId,
    stem_bn: crate::layers::BatchNorm,
    blocks: Vec<ResBlock>,
    dim: usize,
    out_channels: usize,
}

impl Trunk {
    fn new(
        params: &mut ParamSet<f32>,
        prefix: &str,
        dim: usize,
        in_channels: usize,
        groups: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Trunk> {
        let taps = if dim == 1 { STEM_WIDTH } else { STEM_WIDTH * STEM_WIDTH };
        let shape = if dim == 1 {
            vec![STEM_CHANNELS, in_channels, STEM_WIDTH]
        } else {
            vec![STEM_CHANNELS, in_channels, STEM_WIDTH, STEM_WIDTH]
        };
        let stem = params.add(
            format!("{prefix}.stem"),
            crate::layers::glorot_uniform(rng, shape, in_channels * taps, STEM_CHANNELS * taps),
            true,
        );
        let stem_bn = crate::layers::BatchNorm::new(params, &format!("{prefix}.stem_bn"), STEM_CHANNELS);
        let mut blocks = Vec::new();
        let mut prev = STEM_CHANNELS;
        for (gi, &(features, count)) in groups.iter().enumerate() {
            for bi in 0..count {
                let stride = if bi == 0 { 2 } else { 1 };
                let spec = ResBlockSpec { in_channels: prev, out_channels: features, stride, kernel_width: 3, dim };
                blocks.push(ResBlock::new(params, &format!("{prefix}.g{gi}.b{bi}"), spec, rng)?);
                prev = features;
            }
        }
        Ok(Trunk { stem, stem_bn, blocks, dim, out_channels: prev })
    }

    /// `[B, C_in, spatial..] -> [B, out_channels, spatial'..]` (no pooling).
    fn forward(&self, ctx: &mut Ctx<f32>, x: NodeId) -> Result<NodeId> {
        let k = ctx.param(self.stem);
        let mut y = if self.dim == 1 {
            ctx.tape.conv1d(x, k, None, 1, Padding::Same)?
        } else {
            ctx.tape.conv2d(x, k, None, 1, Padding::Same)?
        };
        y = self.stem_bn.forward(ctx, y)?;
        y = ctx.tape.relu(y);
        for block in &self.blocks {
            y = block.forward(ctx, y)?;
        }
        Ok(y)
    }

    /// Pooled features: `[B, out_channels]`.
    fn forward_pooled(&self, ctx: &mut Ctx<f32>, x: NodeId) -> Result<NodeId> {
        let maps = self.forward(ctx, x)?;
        ctx.tape.global_avg_pool(maps)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Arch {
    ConvGruCnn { cell: ConvGruCell, trunk: Trunk, head: Dense },
    Gru { cells: Vec<GruCell>, head: Dense },
    Cnn1d { trunk: Trunk, head: Dense },
    CnnGru { trunk: Trunk, cells: Vec<GruCell>, head: Dense },
    CnnConvGru { trunk: Trunk, cell: ConvGruCell, head: Dense },
    Cnn2d { trunk: Trunk, head: Dense },
    GruCnn { cell: GruCell, trunk: Trunk, head: Dense },
    MipGpm,
}

/// Input/output scaling frozen by training: per-pixel z-score statistics and
/// the force scale that maps normalized predictions back to mN.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub px_mean: Vec<f32>,
    pub px_std: Vec<f32>,
    pub force_scale: f32,
}

impl InputNorm {
    pub fn identity(d_c: usize) -> Self {
        InputNorm { px_mean: vec![0.0; d_c], px_std: vec![1.0; d_c], force_scale: 1.0 }
    }
}

pub struct Model {
    pub spec: ArchSpec,
    pub params: ParamSet<f32>,
    arch: Arch,
    pub norm: InputNorm,
    /// Fitted GP state; `mip_gpm` only.
    pub gp: Option<GpModel>,
}

/// Normalized batch of windows, laid out `[B, t_s, d_c]` row-major.
pub(crate) struct BatchWindows {
    pub bsz: usize,
    pub t_s: usize,
    pub d_c: usize,
    pub data: Vec<f32>,
}

impl BatchWindows {
    /// Row `t` of every window: `[B, d_c]` flat.
    fn rows_at(&self, t: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.bsz * self.d_c);
        let win = self.t_s * self.d_c;
        for b in 0..self.bsz {
            let base = b * win + t * self.d_c;
            out.extend_from_slice(&self.data[base..base + self.d_c]);
        }
        out
    }
}

/// Per-recurrent-layer hidden tensors plus the timestep counter.
#[derive(Debug, Clone)]
pub struct StreamState {
    hiddens: Vec<Tensor<f32>>,
    t: usize,
}

impl StreamState {
    pub fn reset(&mut self) {
        for h in &mut self.hiddens {
            h.data_mut().fill(0.0);
        }
        self.t = 0;
    }

    /// Scans consumed since the last reset.
    pub fn steps(&self) -> usize {
        self.t
    }
}

/// Builds a freshly initialized model; bit-deterministic given the spec
/// (including its seed).
pub fn build(spec: &ArchSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = ParamSet::new();
    let groups = spec.cnn_groups.clone();
    let arch = match spec.kind {
        ArchKind::ConvGruCnnPlus | ArchKind::ConvGruCnn => {
            let plus = spec.kind == ArchKind::ConvGruCnnPlus;
            let (norm, p_di, p_do) = if plus {
                (NormMode::PerTimestep { t_max: spec.t_s }, 0.1, 0.2)
            } else {
                (NormMode::Off, 0.0, 0.0)
            };
            let cell = ConvGruCell::new(
                &mut params,
                "convgru",
                1,
                spec.convgru_channels,
                3,
                norm,
                p_di,
                p_do,
                &mut rng,
            )?;
            let trunk = Trunk::new(&mut params, "cnn", 1, spec.convgru_channels, &groups, &mut rng)?;
            let head = Dense::new(&mut params, "head", trunk.out_channels, 1, &mut rng);
            Arch::ConvGruCnn { cell, trunk, head }
        }
        ArchKind::Gru => {
            let h = spec.gru_hidden;
            let cells = vec![
                GruCell::new(&mut params, "gru0", spec.d_c, h, &mut rng),
                GruCell::new(&mut params, "gru1", h, h, &mut rng),
                GruCell::new(&mut params, "gru2", h, h, &mut rng),
            ];
            let head = Dense::new(&mut params, "head", h, 1, &mut rng);
            Arch::Gru { cells, head }
        }
        ArchKind::Cnn1d => {
            let trunk = Trunk::new(&mut params, "cnn", 1, 1, &groups, &mut rng)?;
            let head = Dense::new(&mut params, "head", trunk.out_channels, 1, &mut rng);
            Arch::Cnn1d { trunk, head }
        }
        ArchKind::CnnGru => {
            let trunk = Trunk::new(&mut params, "cnn", 1, 1, &groups, &mut rng)?;
            let h = spec.gru_hidden;
            let cells = vec![
                GruCell::new(&mut params, "gru0", trunk.out_channels, h, &mut rng),
                GruCell::new(&mut params, "gru1", h, h, &mut rng),
            ];
            let head = Dense::new(&mut params, "head", h, 1, &mut rng);
            Arch::CnnGru { trunk, cells, head }
        }
        ArchKind::CnnConvGru => {
            let trunk = Trunk::new(&mut params, "cnn", 1, 1, &groups, &mut rng)?;
            let cell = ConvGruCell::new(
                &mut params,
                "convgru",
                trunk.out_channels,
                spec.convgru_channels,
                3,
                NormMode::Off,
                0.0,
                0.0,
                &mut rng,
            )?;
            let head = Dense::new(&mut params, "head", spec.convgru_channels, 1, &mut rng);
            Arch::CnnConvGru { trunk, cell, head }
        }
        ArchKind::Cnn2d => {
            let trunk = Trunk::new(&mut params, "cnn", 2, 1, &groups, &mut rng)?;
            let head = Dense::new(&mut params, "head", trunk.out_channels, 1, &mut rng);
            Arch::Cnn2d { trunk, head }
        }
        ArchKind::GruCnn => {
            // Hidden size pinned to d_c so the final hidden state reads as a
            // 1-channel spatial signal for the trunk.
            let cell = GruCell::new(&mut params, "gru", spec.d_c, spec.d_c, &mut rng);
            let trunk = Trunk::new(&mut params, "cnn", 1, 1, &groups, &mut rng)?;
            let head = Dense::new(&mut params, "head", trunk.out_channels, 1, &mut rng);
            Arch::GruCnn { cell, trunk, head }
        }
        ArchKind::MipGpm => Arch::MipGpm,
    };
    Ok(Model {
        spec: spec.clone(),
        params,
        arch,
        norm: InputNorm::identity(spec.d_c),
        gp: None,
    })
}

impl Model {
    pub fn kind(&self) -> ArchKind {
        self.spec.kind
    }

    /// Applies the frozen per-pixel statistics to one window.
    pub(crate) fn normalize_window(&self, window: &[f32]) -> Vec<f32> {
        let d_c = self.spec.d_c;
        window
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let px = i % d_c;
                (v - self.norm.px_mean[px]) / self.norm.px_std[px]
            })
            .collect()
    }

    pub(crate) fn assemble_batch(&self, windows: &[&[f32]]) -> Result<BatchWindows> {
        let win_len = self.spec.t_s * self.spec.d_c;
        let mut data = Vec::with_capacity(windows.len() * win_len);
        for w in windows {
            if w.len() != win_len {
                return Err(Error::dim(format!(
                    "window of {} values vs model spec {}x{}",
                    w.len(),
                    self.spec.t_s,
                    self.spec.d_c
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("window contains non-finite values"));
            }
            data.extend(self.normalize_window(w));
        }
        Ok(BatchWindows { bsz: windows.len(), t_s: self.spec.t_s, d_c: self.spec.d_c, data })
    }

    /// Builds the normalized prediction graph for a batch: output `[B]`.
    /// Not available for the GP baseline, which is not a tape model.
    pub(crate) fn forward_graph(
        &self,
        ctx: &mut Ctx<f32>,
        batch: &BatchWindows,
        masks: &SeqMasks<f32>,
    ) -> Result<NodeId> {
        let (bsz, t_s, d_c) = (batch.bsz, batch.t_s, batch.d_c);
        let head_in = |ctx: &mut Ctx<f32>, head: &Dense, feat: NodeId| -> Result<NodeId> {
            let y = head.forward(ctx, feat)?;
            ctx.tape.reshape(y, vec![bsz])
        };
        match &self.arch {
            Arch::ConvGruCnn { cell, trunk, head } => {
                let mut h = ctx
                    .tape
                    .constant(Tensor::zeros(vec![bsz, cell.c_h, d_c]));
                let mut last_emitted = h;
                for t in 0..t_s {
                    let row = batch.rows_at(t);
                    let x = ctx.tape.constant(Tensor::new(vec![bsz, 1, d_c], row)?);
                    let step = cell.step(ctx, x, h, t, masks)?;
                    h = step.state;
                    last_emitted = step.emitted;
                }
                let feat = trunk.forward_pooled(ctx, last_emitted)?;
                head_in(ctx, head, feat)
            }
            Arch::Gru { cells, head } => {
                let mut hidden: Vec<NodeId> = cells
                    .iter()
                    .map(|c| ctx.tape.constant(Tensor::zeros(vec![bsz, c.hidden])))
                    .collect();
                for t in 0..t_s {
                    let row = batch.rows_at(t);
                    let mut x = ctx.tape.constant(Tensor::new(vec![bsz, d_c], row)?);
                    for (li, cell) in cells.iter().enumerate() {
                        hidden[li] = cell.step(ctx, x, hidden[li])?;
                        x = hidden[li];
                    }
                }
                head_in(ctx, head, hidden[cells.len() - 1])
            }
            Arch::Cnn1d { trunk, head } => {
                let row = batch.rows_at(t_s - 1);
                let x = ctx.tape.constant(Tensor::new(vec![bsz, 1, d_c], row)?);
                let feat = trunk.forward_pooled(ctx, x)?;
                head_in(ctx, head, feat)
            }
            Arch::CnnGru { trunk, cells, head } => {
                let mut hidden: Vec<NodeId> = cells
                    .iter()
                    .map(|c| ctx.tape.constant(Tensor::zeros(vec![bsz, c.hidden])))
                    .collect();
                for t in 0..t_s {
                    let row = batch.rows_at(t);
                    let xin = ctx.tape.constant(Tensor::new(vec![bsz, 1, d_c], row)?);
                    let mut x = trunk.forward_pooled(ctx, xin)?;
                    for (li, cell) in cells.iter().enumerate() {
                        hidden[li] = cell.step(ctx, x, hidden[li])?;
                        x = hidden[li];
                    }
                }
                head_in(ctx, head, hidden[cells.len() - 1])
            }
            Arch::CnnConvGru { trunk, cell, head } => {
                let mut h: Option<NodeId> = None;
                let mut last = None;
                for t in 0..t_s {
                    let row = batch.rows_at(t);
                    let xin = ctx.tape.constant(Tensor::new(vec![bsz, 1, d_c], row)?);
                    let maps = trunk.forward(ctx, xin)?;
                    let hp = match h {
                        Some(node) => node,
                        None => {
                            let l = ctx.tape.value(maps).shape()[2];
                            ctx.tape.constant(Tensor::zeros(vec![bsz, cell.c_h, l]))
                        }
                    };
                    let step = cell.step(ctx, maps, hp, t, masks)?;
                    h = Some(step.state);
                    last = Some(step.emitted);
                }
                let pooled = ctx.tape.global_avg_pool(last.expect("t_s >= 1"))?;
                head_in(ctx, head, pooled)
            }
            Arch::Cnn2d { trunk, head } => {
                let x = ctx
                    .tape
                    .constant(Tensor::new(vec![bsz, 1, t_s, d_c], batch.data.clone())?);
                let feat = trunk.forward_pooled(ctx, x)?;
                head_in(ctx, head, feat)
            }
            Arch::GruCnn { cell, trunk, head } => {
                let mut h = ctx.tape.constant(Tensor::zeros(vec![bsz, d_c]));
                for t in 0..t_s {
                    let row = batch.rows_at(t);
                    let x = ctx.tape.constant(Tensor::new(vec![bsz, d_c], row)?);
                    h = cell.step(ctx, x, h)?;
                }
                let spatial = ctx.tape.reshape(h, vec![bsz, 1, d_c])?;
                let feat = trunk.forward_pooled(ctx, spatial)?;
                head_in(ctx, head, feat)
            }
            Arch::MipGpm => Err(Error::Capability(
                "mip_gpm is not a gradient model; it has no forward graph".into(),
            )),
        }
    }

    /// Scalar force prediction in mN for one `t_s x d_c` window.
    pub fn forward(&self, window: &[f32], mode: Mode) -> Result<f32> {
        if self.kind() == ArchKind::MipGpm {
            let newest = &window[window.len() - self.spec.d_c..];
            return self.gp_predict_window(newest);
        }
        let batch = self.assemble_batch(&[window])?;
        let mut ctx = Ctx::new(&self.params, mode);
        let pred = self.forward_graph(&mut ctx, &batch, &SeqMasks::none())?;
        let v = ctx.tape.value(pred).data()[0];
        Ok(v * self.norm.force_scale)
    }

    fn gp_predict_window(&self, newest_row: &[f32]) -> Result<f32> {
        let feat = gp::mip_feature(newest_row, MIP_MEDIAN_K)?;
        match &self.gp {
            Some(m) => Ok(m.predict(feat).0 as f32 * self.norm.force_scale),
            // Untrained baseline: GP prior mean.
            None => Ok(0.0),
        }
    }

    /// Eval-mode predictions over many windows, batched internally.
    pub fn predict_batch(&self, windows: &[&[f32]]) -> Result<Vec<f32>> {
        if self.kind() == ArchKind::MipGpm {
            return windows
                .iter()
                .map(|w| self.gp_predict_window(&w[w.len() - self.spec.d_c..]))
                .collect();
        }
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let batch = self.assemble_batch(chunk)?;
            let mut ctx = Ctx::new(&self.params, Mode::Eval);
            let pred = self.forward_graph(&mut ctx, &batch, &SeqMasks::none())?;
            out.extend(ctx.tape.value(pred).data().iter().map(|v| v * self.norm.force_scale));
        }
        Ok(out)
    }

    /// Train-mode batch forward returning the normalized prediction node;
    /// used by the training loop. Pending running-stat updates are returned
    /// through the context's `finish`.
    pub(crate) fn train_forward(
        &self,
        ctx: &mut Ctx<f32>,
        windows: &[&[f32]],
        masks: &SeqMasks<f32>,
    ) -> Result<NodeId> {
        let batch = self.assemble_batch(windows)?;
        self.forward_graph(ctx, &batch, masks)
    }

    pub(crate) fn apply_updates(&mut self, updates: PendingUpdates<f32>) {
        updates.apply(&mut self.params);
    }

    /// Fresh zero state for streaming; capability error for kinds whose
    /// forward is not recurrent-first.
    pub fn stream_state(&self) -> Result<StreamState> {
        let hiddens = match &self.arch {
            Arch::ConvGruCnn { cell, .. } => {
                vec![Tensor::zeros(vec![1, cell.c_h, self.spec.d_c])]
            }
            Arch::Gru { cells, .. } => {
                cells.iter().map(|c| Tensor::zeros(vec![1, c.hidden])).collect()
            }
            Arch::GruCnn { .. } => vec![Tensor::zeros(vec![1, self.spec.d_c])],
            _ => {
                return Err(Error::Capability(format!(
                    "{} does not support streaming inference",
                    self.kind().name()
                )))
            }
        };
        Ok(StreamState { hiddens, t: 0 })
    }

    /// Advances the stream by one A-scan and returns the force estimate.
    /// Eval mode only; feeding a reset state the rows of a window one by one
    /// reproduces `forward` on that window.
    pub fn forward_stream(&self, state: &mut StreamState, ascan: &[f32]) -> Result<f32> {
        if ascan.len() != self.spec.d_c {
            return Err(Error::dim(format!(
                "scan of {} px vs model d_c {}",
                ascan.len(),
                self.spec.d_c
            )));
        }
        if ascan.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("scan contains non-finite values"));
        }
        let normed = self.normalize_window(ascan);
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let value = match &self.arch {
            Arch::ConvGruCnn { cell, trunk, head } => {
                let x = ctx.tape.constant(Tensor::new(vec![1, 1, self.spec.d_c], normed)?);
                let h = ctx.tape.constant(state.hiddens[0].clone());
                let step = cell.step(&mut ctx, x, h, state.t, &SeqMasks::none())?;
                state.hiddens[0] = ctx.tape.value(step.state).clone();
                let feat = trunk.forward_pooled(&mut ctx, step.emitted)?;
                let y = head.forward(&mut ctx, feat)?;
                ctx.tape.value(y).data()[0]
            }
            Arch::Gru { cells, head } => {
                let mut x = ctx.tape.constant(Tensor::new(vec![1, self.spec.d_c], normed)?);
                for (li, cell) in cells.iter().enumerate() {
                    let h = ctx.tape.constant(state.hiddens[li].clone());
                    let hn = cell.step(&mut ctx, x, h)?;
                    state.hiddens[li] = ctx.tape.value(hn).clone();
                    x = hn;
                }
                let y = head.forward(&mut ctx, x)?;
                ctx.tape.value(y).data()[0]
            }
            Arch::GruCnn { cell, trunk, head } => {
                let x = ctx.tape.constant(Tensor::new(vec![1, self.spec.d_c], normed)?);
                let h = ctx.tape.constant(state.hiddens[0].clone());
                let hn = cell.step(&mut ctx, x, h)?;
                state.hiddens[0] = ctx.tape.value(hn).clone();
                let spatial = ctx.tape.reshape(hn, vec![1, 1, self.spec.d_c])?;
                let feat = trunk.forward_pooled(&mut ctx, spatial)?;
                let y = head.forward(&mut ctx, feat)?;
                ctx.tape.value(y).data()[0]
            }
            _ => {
                return Err(Error::Capability(format!(
                    "{} does not support streaming inference",
                    self.kind().name()
                )))
            }
        };
        state.t += 1;
        Ok(value * self.norm.force_scale)
    }

    /// Per-sequence dropout mask shapes for this model, if it uses them:
    /// (input mask length, output mask length) for a batch of `bsz`.
    pub(crate) fn mask_lens(&self, bsz: usize) -> Option<(usize, usize)> {
        match &self.arch {
            Arch::ConvGruCnn { cell, .. } if cell.p_di > 0.0 || cell.p_do > 0.0 => {
                Some((bsz * cell.c_in * self.spec.d_c, bsz * cell.c_h * self.spec.d_c))
            }
            _ => None,
        }
    }

    pub(crate) fn dropout_probs(&self) -> (f64, f64) {
        match &self.arch {
            Arch::ConvGruCnn { cell, .. } => (cell.p_di, cell.p_do),
            _ => (0.0, 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn small_spec(kind: ArchKind) -> ArchSpec {
        ArchSpec {
            kind,
            t_s: 5,
            d_c: 16,
            cnn_groups: vec![(8, 1), (12, 1)],
            gru_hidden: 10,
            convgru_channels: 4,
            seed: 42,
        }
    }

    fn rand_window(spec: &ArchSpec, seed: u64) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..spec.t_s * spec.d_c).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn build_is_deterministic_given_seed() {
        let spec = small_spec(ArchKind::ConvGruCnnPlus);
        let a = build(&spec).unwrap();
        let b = build(&spec).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for i in 0..a.params.len() {
            let (ea, eb) = (a.params.entry(i), b.params.entry(i));
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.data(), eb.tensor.data(), "param {} differs", ea.name);
        }
    }

    #[test]
    fn dense_head_parameter_count() {
        let mut spec = small_spec(ArchKind::Cnn1d);
        spec.cnn_groups = vec![(128, 1)];
        let model = build(&spec).unwrap();
        let w = model.params.find("head.w").unwrap();
        let b = model.params.find("head.b").unwrap();
        let count = model.params.get(w).len() + model.params.get(b).len();
        assert_eq!(count, 129);
    }

    #[test]
    fn convgru_cnn_plus_param_count_matches_symbolic_formula() {
        let spec = ArchSpec::new(ArchKind::ConvGruCnnPlus, 50, 64, 7);
        let model = build(&spec).unwrap();
        // Independent count over the declared layers.
        let ch = spec.convgru_channels;
        let cell = 3 * (ch * ch * 3) + 3 * (ch * 3) + 3 * ch + 2; // K, L, biases, rbn gamma+beta (1 input channel)
        let stem = STEM_CHANNELS * ch * STEM_WIDTH + 2 * STEM_CHANNELS;
        let mut trunk = 0usize;
        let mut prev = STEM_CHANNELS;
        for &(f, n) in &spec.cnn_groups {
            for b in 0..n {
                let cin = if b == 0 { prev } else { f };
                trunk += f * cin * 3 + 2 * f; // conv1 + bn1
                trunk += f * f * 3 + 2 * f; // conv2 + bn2
                if b == 0 {
                    trunk += f * cin; // width-1 projection shortcut
                }
            }
            prev = f;
        }
        let head = prev + 1;
        let expected = cell + stem + trunk + head;
        assert_eq!(model.params.trainable_scalars(), expected);
    }

    #[test]
    fn plus_variant_percall_norm_matches_plain_parameter_set() {
        use crate::layers::{ConvGruCell, NormMode, ParamSet};
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p_off = ParamSet::<f32>::new();
        ConvGruCell::new(&mut p_off, "convgru", 1, 4, 3, NormMode::Off, 0.0, 0.0, &mut rng)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p_percall = ParamSet::<f32>::new();
        ConvGruCell::new(&mut p_percall, "convgru", 1, 4, 3, NormMode::PerCall, 0.0, 0.0, &mut rng)
            .unwrap();
        // Parameter-free per-call normalization: identical names and counts.
        let names = |ps: &ParamSet<f32>| {
            ps.iter().map(|e| (e.name.clone(), e.tensor.len())).collect::<Vec<_>>()
        };
        assert_eq!(names(&p_off), names(&p_percall));

        // The per-timestep variant adds exactly the norm parameters/stats.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p_plus = ParamSet::<f32>::new();
        ConvGruCell::new(
            &mut p_plus,
            "convgru",
            1,
            4,
            3,
            NormMode::PerTimestep { t_max: 5 },
            0.0,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(p_plus.trainable_scalars(), p_off.trainable_scalars() + 2);
    }

    #[test]
    fn all_kinds_give_finite_predictions() {
        for kind in ArchKind::ALL {
            let spec = small_spec(kind);
            let model = build(&spec).unwrap();
            let w1 = rand_window(&spec, 1);
            let w2 = vec![0.0f32; spec.t_s * spec.d_c];
            let preds = model.predict_batch(&[&w1, &w2]).unwrap();
            assert_eq!(preds.len(), 2);
            assert!(preds.iter().all(|p| p.is_finite()), "{} not finite", kind.name());
        }
    }

    #[test]
    fn cnn1d_ignores_window_history_exactly() {
        let spec = small_spec(ArchKind::Cnn1d);
        let model = build(&spec).unwrap();
        let base = rand_window(&spec, 3);
        let mut permuted = base.clone();
        // Shuffle all rows except the newest.
        permuted.rotate_left(spec.d_c * 2);
        let newest = base[(spec.t_s - 1) * spec.d_c..].to_vec();
        permuted[(spec.t_s - 1) * spec.d_c..].copy_from_slice(&newest);
        let a = model.forward(&base, Mode::Eval).unwrap();
        let b = model.forward(&permuted, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        for kind in [ArchKind::ConvGruCnnPlus, ArchKind::Cnn2d, ArchKind::CnnGru] {
            let spec = small_spec(kind);
            let model = build(&spec).unwrap();
            let w = rand_window(&spec, 11);
            let a = model.forward(&w, Mode::Eval).unwrap();
            let b = model.forward(&w, Mode::Eval).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{}", kind.name());
        }
    }

    #[test]
    fn streaming_matches_whole_window_forward() {
        for kind in [ArchKind::ConvGruCnnPlus, ArchKind::ConvGruCnn, ArchKind::Gru, ArchKind::GruCnn]
        {
            let spec = small_spec(kind);
            let model = build(&spec).unwrap();
            for trial in 0..5 {
                let w = rand_window(&spec, 100 + trial);
                let offline = model.forward(&w, Mode::Eval).unwrap();
                let mut state = model.stream_state().unwrap();
                let mut last = 0.0f32;
                for t in 0..spec.t_s {
                    last = model
                        .forward_stream(&mut state, &w[t * spec.d_c..(t + 1) * spec.d_c])
                        .unwrap();
                }
                assert!(
                    (offline - last).abs() < 1e-5,
                    "{} trial {trial}: {offline} vs {last}",
                    kind.name()
                );
                assert_eq!(state.steps(), spec.t_s);
            }
        }
    }

    #[test]
    fn streaming_single_zero_scan_matches_unit_window() {
        let mut spec = small_spec(ArchKind::Gru);
        spec.t_s = 1;
        let model = build(&spec).unwrap();
        let zeros = vec![0.0f32; spec.d_c];
        let offline = model.forward(&zeros, Mode::Eval).unwrap();
        let mut state = model.stream_state().unwrap();
        let streamed = model.forward_stream(&mut state, &zeros).unwrap();
        assert_eq!(offline.to_bits(), streamed.to_bits());
        state.reset();
        assert_eq!(state.steps(), 0);
    }

    #[test]
    fn interleaved_sessions_do_not_share_state() {
        let spec = small_spec(ArchKind::ConvGruCnnPlus);
        let model = build(&spec).unwrap();
        let wa = rand_window(&spec, 21);
        let wb = rand_window(&spec, 22);

        // Serial reference runs.
        let run = |w: &[f32]| {
            let mut st = model.stream_state().unwrap();
            (0..spec.t_s)
                .map(|t| model.forward_stream(&mut st, &w[t * spec.d_c..(t + 1) * spec.d_c]).unwrap())
                .collect::<Vec<_>>()
        };
        let ra = run(&wa);
        let rb = run(&wb);

        // Interleaved with separate states.
        let mut sa = model.stream_state().unwrap();
        let mut sb = model.stream_state().unwrap();
        for t in 0..spec.t_s {
            let fa = model.forward_stream(&mut sa, &wa[t * spec.d_c..(t + 1) * spec.d_c]).unwrap();
            let fb = model.forward_stream(&mut sb, &wb[t * spec.d_c..(t + 1) * spec.d_c]).unwrap();
            assert_eq!(fa.to_bits(), ra[t].to_bits());
            assert_eq!(fb.to_bits(), rb[t].to_bits());
        }
    }

    #[test]
    fn streaming_rejects_unsupported_kinds() {
        for kind in [ArchKind::Cnn1d, ArchKind::CnnGru, ArchKind::CnnConvGru, ArchKind::Cnn2d, ArchKind::MipGpm] {
            let model = build(&small_spec(kind)).unwrap();
            assert!(
                matches!(model.stream_state(), Err(Error::Capability(_))),
                "{} should refuse streaming",
                kind.name()
            );
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_forward_bits() {
        let dir = std::env::temp_dir().join("nf_model_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        for kind in [ArchKind::ConvGruCnnPlus, ArchKind::Gru, ArchKind::Cnn2d] {
            let spec = small_spec(kind);
            let mut model = build(&spec).unwrap();
            model.norm.px_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.01);
            model.norm.force_scale = 123.5;
            let path = dir.join(format!("{}.nfmd", kind.name()));
            save_model(&model, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            let w = rand_window(&spec, 5);
            let a = model.forward(&w, Mode::Eval).unwrap();
            let b = loaded.forward(&w, Mode::Eval).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{}", kind.name());
        }
    }

    #[test]
    fn save_load_roundtrip_with_gp_state() {
        use crate::gp::{gp_fit, GpHyper};
        let dir = std::env::temp_dir().join("nf_model_gp");
        std::fs::create_dir_all(&dir).unwrap();
        let spec = small_spec(ArchKind::MipGpm);
        let mut model = build(&spec).unwrap();
        // f32-exact inputs so the fit survives serialization bit-for-bit.
        let x = [0.0f64, 0.25, 0.5, 0.75, 1.0];
        let y = [0.5f64, -0.25, 0.125, 0.75, -0.5];
        model.gp = Some(
            gp_fit(&x, &y, GpHyper { length_scale: 0.25, signal_var: 1.0, noise_var: 0.001953125 })
                .unwrap(),
        );
        model.norm.force_scale = 100.0;
        let path = dir.join("gpm.nfmd");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let w = rand_window(&spec, 9);
        let a = model.forward(&w, Mode::Eval).unwrap();
        let b = loaded.forward(&w, Mode::Eval).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn truncated_model_file_is_rejected() {
        let dir = std::env::temp_dir().join("nf_model_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let spec = small_spec(ArchKind::Gru);
        let model = build(&spec).unwrap();
        let path = dir.join("m.nfmd");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_in_file_is_reported() {
        let dir = std::env::temp_dir().join("nf_model_shape");
        std::fs::create_dir_all(&dir).unwrap();
        let spec = small_spec(ArchKind::Gru);
        let model = build(&spec).unwrap();
        let path = dir.join("m.nfmd");
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        // First table entry is gru0.w_z with shape [hidden, d_c]; swap the
        // two dims (same payload size) and re-seal the CRC.
        let name = b"gru0.w_z";
        let pos = bytes.windows(name.len()).position(|w| w == name).unwrap();
        let dims_at = pos + name.len() + 1; // rank byte
        let d0: [u8; 4] = bytes[dims_at..dims_at + 4].try_into().unwrap();
        let d1: [u8; 4] = bytes[dims_at + 4..dims_at + 8].try_into().unwrap();
        bytes[dims_at..dims_at + 4].copy_from_slice(&d1);
        bytes[dims_at + 4..dims_at + 8].copy_from_slice(&d0);
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();

        match load_model(&path) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains("does not match model shape"), "{msg}");
            }
            other => panic!("expected shape error, got {:?}", other.err()),
        }
    }
}
