//! DIAnet: a four-branch multi-resolution segmentation network with
//! cross-resolution fusion and channel/spatial attention on every branch.
//!
//! The layout (which parameter slot feeds which op) is independent of the
//! scalar type; parameters live in a separate [`ParamStore`] so the same
//! network can be evaluated in `f32` for training and `f64` for gradient
//! checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{BatchMoments, Graph, ParamStore, Tensor, TensorError, Var};

pub const BRANCHES: usize = 4;
/// Input sides are padded up to a multiple of this (three halvings).
pub const SIZE_MULTIPLE: usize = 8;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DianetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the full-resolution branch; branch `b` has `width << b`.
    pub base_width: usize,
    /// Conv units per branch per stage.
    pub stage_depth: usize,
    /// Channel reduction of the attention squeeze.
    pub iam_reduction: usize,
    pub use_iam: bool,
}

impl Default for DianetConfig {
    fn default() -> Self {
        Self {
            in_channels: 14,
            num_classes: 11,
            base_width: 8,
            stage_depth: 2,
            iam_reduction: 4,
            use_iam: true,
        }
    }
}

impl DianetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.base_width < 2 {
            return bad(format!("base_width {} < 2", self.base_width));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        if self.stage_depth == 0 {
            return bad("stage_depth must be >= 1".into());
        }
        if self.iam_reduction == 0 || !self.base_width.is_multiple_of(self.iam_reduction) {
            return bad(format!(
                "base_width {} not divisible by iam_reduction {}",
                self.base_width, self.iam_reduction
            ));
        }
        Ok(())
    }

    pub fn branch_width(&self, b: usize) -> usize {
        self.base_width << b
    }
}

/// Conv (no bias), batch normalization with a per-channel affine, optional
/// ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: usize,
    scale: usize,
    shift: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
    pad: usize,
    relu: bool,
}

/// Conv with bias.
#[derive(Debug, Clone)]
struct BiasConv {
    weight: usize,
    bias: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum FusePath {
    Identity,
    /// Stride-2 chain from a higher-resolution branch.
    Down(Vec<ConvUnit>),
    /// 1×1 projection, then bilinear upsampling.
    Up(ConvUnit),
}

#[derive(Debug, Clone)]
struct Attention {
    squeeze: BiasConv,
    excite: BiasConv,
    spatial: BiasConv,
}

#[derive(Debug, Clone)]
struct Stage {
    transition: Option<ConvUnit>,
    units: Vec<Vec<ConvUnit>>,
    /// `fuse[i][j]` maps branch `j` onto branch `i`.
    fuse: Vec<Vec<FusePath>>,
    attention: Vec<Attention>,
}

/// Parameter-slot layout of a built network.
#[derive(Debug, Clone)]
pub struct Dianet {
    cfg: DianetConfig,
    stem: Vec<ConvUnit>,
    stages: Vec<Stage>,
    head: BiasConv,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> ConvUnit {
        let weight =
            self.store
                .add_conv_weight(format!("{name}.weight"), [cout, cin, k, k], &mut self.rng);
        let scale = self.store.add(
            format!("{name}.scale"),
            Tensor::full([1, cout, 1, 1], T::one()),
        );
        let shift = self
            .store
            .add(format!("{name}.shift"), Tensor::zeros([1, cout, 1, 1]));
        let running_mean = self.store.add_buffer(
            format!("{name}.running_mean"),
            Tensor::zeros([1, cout, 1, 1]),
        );
        let running_var = self.store.add_buffer(
            format!("{name}.running_var"),
            Tensor::full([1, cout, 1, 1], T::one()),
        );
        ConvUnit {
            weight,
            scale,
            shift,
            running_mean,
            running_var,
            stride,
            pad: k / 2,
            relu,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> BiasConv {
        let weight =
            self.store
                .add_conv_weight(format!("{name}.weight"), [cout, cin, k, k], &mut self.rng);
        let bias = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        BiasConv {
            weight,
            bias,
            pad: k / 2,
        }
    }

    /// Bias conv whose weights are the magnitudes of a Kaiming draw. Pooled
    /// post-ReLU features are non-negative, so a symmetric draw would leave
    /// about half of the squeeze units permanently inactive.
    fn nonneg_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> BiasConv {
        let c = self.conv(name, cin, cout, k);
        for v in &mut self.store.tensors_mut()[c.weight].data {
            *v = v.abs();
        }
        c
    }
}

/// Builds the network layout and its seeded initial parameters.
pub fn build_dianet<T: Scalar>(
    cfg: &DianetConfig,
    seed: u64,
) -> Result<(Dianet, ParamStore<T>), ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let w = |i: usize| cfg.branch_width(i);
    let stem = vec![
        b.unit("stem.0", cfg.in_channels, w(0), 3, 1, true),
        b.unit("stem.1", w(0), w(0), 3, 1, true),
    ];
    let mut stages = Vec::with_capacity(BRANCHES);
    for s in 0..BRANCHES {
        let n = s + 1;
        let name = format!("stage{n}");
        let transition =
            (s > 0).then(|| b.unit(&format!("{name}.transition"), w(s - 1), w(s), 3, 2, true));
        let units = (0..n)
            .map(|br| {
                (0..cfg.stage_depth)
                    .map(|d| {
                        b.unit(
                            &format!("{name}.branch{br}.unit{d}"),
                            w(br),
                            w(br),
                            3,
                            1,
                            true,
                        )
                    })
                    .collect()
            })
            .collect();
        let mut fuse = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let fname = format!("{name}.fuse.{j}to{i}");
                row.push(if j == i {
                    FusePath::Identity
                } else if j > i {
                    FusePath::Up(b.unit(&fname, w(j), w(i), 1, 1, false))
                } else {
                    let steps = i - j;
                    FusePath::Down(
                        (0..steps)
                            .map(|k| {
                                let last = k + 1 == steps;
                                let cout = if last { w(i) } else { w(j) };
                                b.unit(&format!("{fname}.{k}"), w(j), cout, 3, 2, !last)
                            })
                            .collect(),
                    )
                });
            }
            fuse.push(row);
        }
        let attention = if cfg.use_iam {
            (0..n)
                .map(|br| {
                    let c = w(br);
                    let mid = c / cfg.iam_reduction;
                    let an = format!("{name}.iam{br}");
                    Attention {
                        squeeze: b.nonneg_conv(&format!("{an}.squeeze"), c, mid, 1),
                        excite: b.conv(&format!("{an}.excite"), mid, c, 1),
                        spatial: b.conv(&format!("{an}.spatial"), 2, 1, 7),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        stages.push(Stage {
            transition,
            units,
            fuse,
            attention,
        });
    }
    let concat: usize = (0..BRANCHES).map(w).sum();
    let head = b.conv("head", concat, cfg.num_classes, 1);
    let net = Dianet {
        cfg: cfg.clone(),
        stem,
        stages,
        head,
    };
    Ok((net, store))
}

/// Source of the normalization statistics of conv units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (inference).
    Running,
}

/// Batch statistics observed by one conv unit during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMoments {
    pub running_mean: usize,
    pub running_var: usize,
    pub moments: BatchMoments,
}

struct Norm {
    mode: NormMode,
    seen: Vec<UnitMoments>,
}

impl Norm {
    fn batch() -> Self {
        Self {
            mode: NormMode::Batch,
            seen: Vec::new(),
        }
    }
}

fn apply_unit<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    norm: &mut Norm,
    u: &ConvUnit,
    x: Var,
) -> Result<Var, TensorError> {
    let y = g.conv2d(x, p[u.weight], None, u.stride, u.pad)?;
    let y = match norm.mode {
        NormMode::Batch => {
            let (y, moments) = g.batch_norm(y, BN_EPS)?;
            norm.seen.push(UnitMoments {
                running_mean: u.running_mean,
                running_var: u.running_var,
                moments,
            });
            y
        }
        NormMode::Running => {
            let mean = &g.value(p[u.running_mean]).data;
            let var = &g.value(p[u.running_var]).data;
            let inv: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v.widen() + BN_EPS).sqrt())
                .collect();
            let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, s)| -m.widen() * s).collect();
            let shape = [1, inv.len(), 1, 1];
            let inv = g.input(Tensor::from_f64(shape, &inv)?);
            let shift = g.input(Tensor::from_f64(shape, &shift)?);
            g.affine(y, inv, shift)?
        }
    };
    let y = g.affine(y, p[u.scale], p[u.shift])?;
    if u.relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

fn apply_conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &[Var],
    c: &BiasConv,
    x: Var,
) -> Result<Var, TensorError> {
    g.conv2d(x, p[c.weight], Some(p[c.bias]), 1, c.pad)
}

/// Pixel count per side after padding up to [`SIZE_MULTIPLE`].
pub fn padded_size(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE
}

impl Dianet {
    pub fn config(&self) -> &DianetConfig {
        &self.cfg
    }

    /// Logits `[N, classes, H, W]` for input `[N, in_channels, H, W]`.
    /// Inputs are reflection-padded to a multiple of 8 and the logits cropped
    /// back.
    ///
    /// Conv units normalize with the statistics of the current batch.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<Var, TensorError> {
        self.forward_norm(g, p, x, &mut Norm::batch())
    }

    /// Training forward pass; also returns the batch statistics of every
    /// conv unit for [`update_running_stats`].
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<(Var, Vec<UnitMoments>), TensorError> {
        let mut norm = Norm::batch();
        let y = self.forward_norm(g, p, x, &mut norm)?;
        Ok((y, norm.seen))
    }

    /// Inference forward pass using the stored running statistics.
    pub fn forward_eval<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<Var, TensorError> {
        let mut norm = Norm {
            mode: NormMode::Running,
            seen: Vec::new(),
        };
        self.forward_norm(g, p, x, &mut norm)
    }

    fn forward_norm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        norm: &mut Norm,
    ) -> Result<Var, TensorError> {
        let [_, c, h, w] = g.shape(x);
        if c != self.cfg.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "dianet",
                detail: format!("{c} input channels, expected {}", self.cfg.in_channels),
            });
        }
        let (hp, wp) = (padded_size(h), padded_size(w));
        let xin = if (hp, wp) != (h, w) {
            g.reflect_pad(x, hp - h, wp - w)?
        } else {
            x
        };
        let mut y = xin;
        for u in &self.stem {
            y = apply_unit(g, p, norm, u, y)?;
        }
        let mut feats = vec![y];
        for s in 0..BRANCHES {
            feats = self.run_stage(g, p, norm, s, feats)?;
        }
        let logits = self.head(g, p, &feats)?;
        if (hp, wp) != (h, w) {
            g.crop(logits, h, w)
        } else {
            Ok(logits)
        }
    }

    /// One stage: optional new branch, per-branch units, fusion, attention.
    fn run_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        norm: &mut Norm,
        s: usize,
        mut feats: Vec<Var>,
    ) -> Result<Vec<Var>, TensorError> {
        let stage = &self.stages[s];
        if let Some(t) = &stage.transition {
            let last = *feats.last().expect("at least one branch");
            feats.push(apply_unit(g, p, norm, t, last)?);
        }
        for (f, units) in feats.iter_mut().zip(&stage.units) {
            for u in units {
                *f = apply_unit(g, p, norm, u, *f)?;
            }
        }
        let fused = self.fuse_norm(g, p, norm, s, &feats)?;
        fused
            .into_iter()
            .enumerate()
            .map(|(b, f)| self.attention(g, p, s, b, f))
            .collect()
    }

    /// Output `i` is `relu(Σ_j path_{j→i}(feats[j]))`, with batch
    /// statistics in the conv units of each path.
    pub fn fuse_branches<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stage: usize,
        feats: &[Var],
    ) -> Result<Vec<Var>, TensorError> {
        self.fuse_norm(g, p, &mut Norm::batch(), stage, feats)
    }

    fn fuse_norm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        norm: &mut Norm,
        stage: usize,
        feats: &[Var],
    ) -> Result<Vec<Var>, TensorError> {
        let fuse = &self.stages[stage].fuse;
        if feats.len() != fuse.len() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_branches",
                detail: format!("{} branches for stage {}", feats.len(), stage + 1),
            });
        }
        let mut out = Vec::with_capacity(feats.len());
        for (i, row) in fuse.iter().enumerate() {
            let [_, _, h, w] = g.shape(feats[i]);
            let mut terms = Vec::with_capacity(row.len());
            for (j, path) in row.iter().enumerate() {
                terms.push(match path {
                    FusePath::Identity => feats[j],
                    FusePath::Down(chain) => {
                        let mut y = feats[j];
                        for u in chain {
                            y = apply_unit(g, p, norm, u, y)?;
                        }
                        y
                    }
                    FusePath::Up(u) => {
                        let y = apply_unit(g, p, norm, u, feats[j])?;
                        g.bilinear_resize(y, h, w)?
                    }
                });
            }
            let sum = g.add_all(&terms)?;
            out.push(g.relu(sum)?);
        }
        Ok(out)
    }

    /// Channel gate from pooled statistics, spatial gate computed on the
    /// channel-reweighted map, residual add. Identity when attention is
    /// disabled.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stage: usize,
        branch: usize,
        x: Var,
    ) -> Result<Var, TensorError> {
        let Some(a) = self.stages[stage].attention.get(branch) else {
            return Ok(x);
        };
        let pooled = g.global_avg_pool(x)?;
        let squeezed = apply_conv(g, p, &a.squeeze, pooled)?;
        let squeezed = g.relu(squeezed)?;
        let excited = apply_conv(g, p, &a.excite, squeezed)?;
        let channel_gate = g.sigmoid(excited)?;
        let xc = g.mul(x, channel_gate)?;
        let mean = g.channel_mean(xc)?;
        let max = g.channel_max(xc)?;
        let stats = g.concat(&[mean, max])?;
        let spatial = apply_conv(g, p, &a.spatial, stats)?;
        let spatial_gate = g.sigmoid(spatial)?;
        let gated = g.mul(xc, spatial_gate)?;
        g.add(gated, x)
    }

    fn head<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        feats: &[Var],
    ) -> Result<Var, TensorError> {
        let [_, _, h, w] = g.shape(feats[0]);
        let mut parts = vec![feats[0]];
        for &f in &feats[1..] {
            parts.push(g.bilinear_resize(f, h, w)?);
        }
        let cat = g.concat(&parts)?;
        apply_conv(g, p, &self.head, cat)
    }

    /// Inference with running statistics and no gradient bookkeeping.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let xv = g.input(x.clone());
        let y = self.forward_eval(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Slots of the channel-gate and spatial-gate biases of one branch.
    pub fn attention_bias_slots(&self, stage: usize, branch: usize) -> Option<(usize, usize)> {
        self.stages
            .get(stage)?
            .attention
            .get(branch)
            .map(|a| (a.excite.bias, a.spatial.bias))
    }

    /// Slots of the classifier weight and bias.
    pub fn head_slots(&self) -> (usize, usize) {
        (self.head.weight, self.head.bias)
    }
}

/// Blends the batch statistics of a training step into the running
/// statistics: `running = (1 - m)·running + m·batch`.
pub fn update_running_stats<T: Scalar>(
    params: &mut ParamStore<T>,
    seen: &[UnitMoments],
    momentum: f64,
) {
    for u in seen {
        let pairs = [
            (u.running_mean, &u.moments.mean),
            (u.running_var, &u.moments.var),
        ];
        for (slot, batch) in pairs {
            for (r, b) in params.tensors_mut()[slot].data.iter_mut().zip(batch.iter()) {
                *r = T::of((1.0 - momentum) * r.widen() + momentum * b);
            }
        }
    }
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, k, h, w] = logits.shape;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = logits.data[s * k * hw + p];
            for c in 1..k {
                let v = logits.data[(s * k + c) * hw + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
