//! Base learners: three 2D plane FCNs (xy, xz, yz) and one 3D FCN, all the
//! same dense-connectivity miniature. Produces per-item pseudo-label sets.
//!
//! A network is a flat, ordered list of named parameter tensors plus a
//! [`FcnStack`] recipe describing how `forward` wires them. Keeping
//! parameters flat makes the optimizer, checkpoints, and gradient plumbing
//! uniform.

use thiserror::Error;

use crate::autodiff::{
    init_he, load_checkpoint, save_checkpoint, AdamError, AdamState, AutodiffError,
    CheckpointError, Graph, LrSchedule, Padding, Tensor, Var,
};
use crate::rng::SplitMix64;
use crate::volume::{
    argmax_labels, augment, normalize, voxel_count, voxel_index, AugmentOp, Dims, LabelVolume,
    PlaneAxis, ProbVolume, Spacing, Volume, VolumeError,
};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("no labeled training data")]
    NoLabeledData,
    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("learner {0} is not trained")]
    UntrainedLearner(&'static str),
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not describe this model: {0}")]
    BadCheckpoint(String),
}

type Result<T> = std::result::Result<T, LearnerError>;

/// Which base learner; order here fixes member order everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LearnerId {
    Xy2d,
    Xz2d,
    Yz2d,
    Vol3d,
}

impl LearnerId {
    pub const ALL: [LearnerId; 4] = [
        LearnerId::Xy2d,
        LearnerId::Xz2d,
        LearnerId::Yz2d,
        LearnerId::Vol3d,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            LearnerId::Xy2d => "xy2d",
            LearnerId::Xz2d => "xz2d",
            LearnerId::Yz2d => "yz2d",
            LearnerId::Vol3d => "vol3d",
        }
    }

    pub fn parse(s: &str) -> Option<LearnerId> {
        Self::ALL.iter().copied().find(|l| l.tag() == s)
    }

    /// The slicing plane for 2D learners; None for the 3D learner.
    pub fn plane(&self) -> Option<PlaneAxis> {
        match self {
            LearnerId::Xy2d => Some(PlaneAxis::Xy),
            LearnerId::Xz2d => Some(PlaneAxis::Xz),
            LearnerId::Yz2d => Some(PlaneAxis::Yz),
            LearnerId::Vol3d => None,
        }
    }
}

/// Recipe for a stem + dense-block feature extractor. `rank2` selects 2D
/// kernels; each conv is followed by a per-channel affine and relu.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnStack {
    pub in_channels: usize,
    /// (channels, kernel width); None starts the dense blocks directly on
    /// the input.
    pub stem: Option<(usize, usize)>,
    pub blocks: usize,
    pub convs_per_block: usize,
    pub growth: usize,
    pub block_kernel: usize,
    pub rank2: bool,
}

impl FcnStack {
    pub fn out_channels(&self) -> usize {
        let base = self.stem.map(|(c, _)| c).unwrap_or(self.in_channels);
        base + self.blocks * self.convs_per_block * self.growth
    }

    fn kernel_shape(&self, cout: usize, cin: usize, k: usize) -> Vec<usize> {
        if self.rank2 {
            vec![cout, cin, k, k]
        } else {
            vec![cout, cin, k, k, k]
        }
    }

    /// Parameter names and shapes in forward order. Every conv contributes
    /// `<name>.w` plus affine `<name>.g` (scale) and `<name>.b` (shift).
    pub fn param_specs(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut ch = self.in_channels;
        let unit = |name: String, cout: usize, cin: usize, k: usize, specs: &mut Vec<_>| {
            specs.push((format!("{name}.w"), self.kernel_shape(cout, cin, k)));
            specs.push((format!("{name}.g"), vec![cout]));
            specs.push((format!("{name}.b"), vec![cout]));
        };
        if let Some((c, k)) = self.stem {
            unit(format!("{prefix}stem"), c, ch, k, &mut specs);
            ch = c;
        }
        for b in 0..self.blocks {
            for j in 0..self.convs_per_block {
                unit(
                    format!("{prefix}blk{b}.c{j}"),
                    self.growth,
                    ch + j * self.growth,
                    self.block_kernel,
                    &mut specs,
                );
            }
            ch += self.convs_per_block * self.growth;
        }
        specs
    }

    /// Wires the stack; `params` must follow `param_specs` order. Returns
    /// the feature map and how many params were consumed.
    pub fn forward(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<(Var, usize)> {
        let mut used = 0;
        let conv_unit = |g: &mut Graph, x: Var, used: &mut usize| -> Result<Var> {
            let w = params[*used];
            let sc = params[*used + 1];
            let sh = params[*used + 2];
            *used += 3;
            let y = if self.rank2 {
                g.conv2d(x, w, 1, Padding::Same)?
            } else {
                g.conv3d(x, w, 1, Padding::Same)?
            };
            let y = g.channel_affine(y, sc, sh)?;
            Ok(g.relu(y))
        };
        let mut h = x;
        if self.stem.is_some() {
            h = conv_unit(g, h, &mut used)?;
        }
        for _ in 0..self.blocks {
            let mut feats = vec![h];
            for _ in 0..self.convs_per_block {
                let inp = if feats.len() == 1 { feats[0] } else { g.concat(&feats, 0)? };
                let y = conv_unit(g, inp, &mut used)?;
                feats.push(y);
            }
            h = g.concat(&feats, 0)?;
        }
        Ok((h, used))
    }
}

/// The miniature dense FCN: stem conv (5-wide, 16 channels), two dense
/// blocks of 3 convs (growth 8, 3-wide), 1-wide classifier. No
/// downsampling, so output resolution equals input resolution.
#[derive(Clone, Debug)]
pub struct MiniFcn {
    pub stack: FcnStack,
    pub num_classes: usize,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
}

impl MiniFcn {
    pub fn standard_stack(in_channels: usize, rank2: bool) -> FcnStack {
        FcnStack {
            in_channels,
            stem: Some((16, 5)),
            blocks: 2,
            convs_per_block: 3,
            growth: 8,
            block_kernel: 3,
            rank2,
        }
    }

    pub fn init(in_channels: usize, num_classes: usize, rank2: bool, seed: u64) -> MiniFcn {
        let stack = Self::standard_stack(in_channels, rank2);
        let mut specs = stack.param_specs("");
        let head_shape = stack.kernel_shape(num_classes, stack.out_channels(), 1);
        specs.push(("head.w".to_string(), head_shape));
        let (names, params) = init_params(&specs, seed);
        MiniFcn { stack, num_classes, params, names }
    }

    /// Loads every parameter onto a fresh tape.
    pub fn load_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    /// Input `[in_channels, ...spatial]` matching the stack's rank; returns
    /// class logits at input resolution.
    pub fn forward(&self, g: &mut Graph, x: Var, pvars: &[Var]) -> Result<Var> {
        let (feats, used) = self.stack.forward(g, x, pvars)?;
        let head = pvars[used];
        let logits = if self.stack.rank2 {
            g.conv2d(feats, head, 1, Padding::Same)?
        } else {
            g.conv3d(feats, head, 1, Padding::Same)?
        };
        Ok(logits)
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|t| t.len()).collect()
    }

    fn meta(&self, extra: &[(String, String)]) -> Vec<(String, String)> {
        let mut m = vec![
            ("arch".to_string(), "minifcn".to_string()),
            ("rank".to_string(), if self.stack.rank2 { "2" } else { "3" }.to_string()),
            ("in_channels".to_string(), self.stack.in_channels.to_string()),
            ("num_classes".to_string(), self.num_classes.to_string()),
        ];
        m.extend_from_slice(extra);
        m
    }

    pub fn save(&self, path: &std::path::Path, extra: &[(String, String)]) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter())
            .collect();
        save_checkpoint(path, &self.meta(extra), &named)?;
        Ok(())
    }

    /// Rebuilds the model from a checkpoint, verifying names and shapes.
    pub fn load(path: &std::path::Path) -> Result<(MiniFcn, Vec<(String, String)>)> {
        let (meta, tensors) = load_checkpoint(path)?;
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(mk, _)| mk == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| LearnerError::BadCheckpoint(format!("missing meta {k}")))
        };
        if get("arch")? != "minifcn" {
            return Err(LearnerError::BadCheckpoint("arch is not minifcn".into()));
        }
        let rank2 = get("rank")? == "2";
        let in_channels: usize = get("in_channels")?
            .parse()
            .map_err(|_| LearnerError::BadCheckpoint("bad in_channels".into()))?;
        let num_classes: usize = get("num_classes")?
            .parse()
            .map_err(|_| LearnerError::BadCheckpoint("bad num_classes".into()))?;
        let mut model = MiniFcn::init(in_channels, num_classes, rank2, 0);
        if tensors.len() != model.params.len() {
            return Err(LearnerError::BadCheckpoint(format!(
                "{} tensors, expected {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] {
                return Err(LearnerError::BadCheckpoint(format!(
                    "tensor {i} is {name}, expected {}",
                    model.names[i]
                )));
            }
            if t.shape != model.params[i].shape {
                return Err(LearnerError::BadCheckpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape, model.params[i].shape
                )));
            }
            model.params[i] = t.into_param();
        }
        Ok((model, meta))
    }
}

/// He init for kernels, identity for the affines.
pub(crate) fn init_params(specs: &[(String, Vec<usize>)], seed: u64) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::with_capacity(specs.len());
    let mut params = Vec::with_capacity(specs.len());
    for (i, (name, shape)) in specs.iter().enumerate() {
        let t = if name.ends_with(".w") {
            init_he(shape, SplitMix64::derive(seed, i as u64).next_u64())
        } else if name.ends_with(".g") {
            Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])
                .expect("affine scale")
                .into_param()
        } else {
            Tensor::zeros(shape.clone()).into_param()
        };
        names.push(name.clone());
        params.push(t);
    }
    (names, params)
}

/// Copies tape gradients back onto the parameter tensors.
pub(crate) fn pull_grads(g: &Graph, pvars: &[Var], params: &mut [Tensor]) {
    for (t, &v) in params.iter_mut().zip(pvars) {
        let grad = g.grad(v).expect("param gradient");
        t.grad = Some(grad.to_vec());
    }
}

#[derive(Clone, Debug)]
pub struct BaseLearner {
    pub id: LearnerId,
    pub net: MiniFcn,
    pub trained: bool,
}

impl BaseLearner {
    /// Fresh learner for `num_classes`; the geometry (2D vs 3D) follows the
    /// id. Raw image input is single-channel.
    pub fn init(id: LearnerId, num_classes: usize, seed: u64) -> BaseLearner {
        let rank2 = id.plane().is_some();
        BaseLearner { id, net: MiniFcn::init(1, num_classes, rank2, seed), trained: false }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.net.save(
            path,
            &[
                ("learner".to_string(), self.id.tag().to_string()),
                ("trained".to_string(), if self.trained { "1" } else { "0" }.to_string()),
            ],
        )
    }

    pub fn load(path: &std::path::Path) -> Result<BaseLearner> {
        let (net, meta) = MiniFcn::load(path)?;
        let id = meta
            .iter()
            .find(|(k, _)| k == "learner")
            .and_then(|(_, v)| LearnerId::parse(v))
            .ok_or_else(|| LearnerError::BadCheckpoint("missing learner id".into()))?;
        let trained = meta.iter().any(|(k, v)| k == "trained" && v == "1");
        if (id.plane().is_some()) != net.stack.rank2 {
            return Err(LearnerError::BadCheckpoint("learner id and rank disagree".into()));
        }
        Ok(BaseLearner { id, net, trained })
    }
}

/// One training-loop step for the log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseTrainCfg {
    pub iters: u64,
    /// Slices per 2D batch.
    pub batch_2d: usize,
    /// Patches per 3D batch.
    pub batch_3d: usize,
    /// Cubic crop edge for 3D training.
    pub patch_3d: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for BaseTrainCfg {
    fn default() -> Self {
        BaseTrainCfg {
            iters: 1000,
            batch_2d: 8,
            batch_3d: 2,
            patch_3d: 16,
            base_lr: 5e-4,
            lr_power: 0.9,
            augment: true,
            seed: 0,
        }
    }
}

/// Adam-trains a base learner on annotated volumes. Images are normalized
/// internally (idempotent), batches are drawn with the learner's own seeded
/// stream, and the loss trace is returned for the training log.
pub fn train_base(
    learner: &mut BaseLearner,
    items: &[(&Volume, &LabelVolume)],
    cfg: &BaseTrainCfg,
) -> Result<Vec<TrainRecord>> {
    if items.is_empty() {
        return Err(LearnerError::NoLabeledData);
    }
    let normalized: Vec<(Volume, &LabelVolume)> = items
        .iter()
        .map(|(v, l)| Ok((normalize(v)?, *l)))
        .collect::<Result<_>>()?;
    let mut rng = SplitMix64::derive(cfg.seed, learner.id as u64);
    let mut adam = AdamState::new(
        cfg.base_lr,
        LrSchedule::Poly { power: cfg.lr_power, max_iter: cfg.iters.max(1) },
        &learner.net.param_sizes(),
    );
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    let batch = match learner.id.plane() {
        Some(_) => cfg.batch_2d,
        None => cfg.batch_3d,
    };
    for step in 0..cfg.iters {
        let lr = adam.effective_lr()?;
        let mut g = Graph::new();
        let pvars = learner.net.load_params(&mut g);
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let (x, targets) = match learner.id.plane() {
                Some(axis) => sample_slice(&normalized, axis, cfg, &mut rng, &mut g)?,
                None => sample_patch(&normalized, cfg, &mut rng, &mut g)?,
            };
            let logits = learner.net.forward(&mut g, x, &pvars)?;
            let ce = g.softmax_ce(logits, &targets)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / batch as f64);
        let loss_val = g.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(LearnerError::DivergedLoss { step, loss: loss_val });
        }
        g.backward(loss)?;
        pull_grads(&g, &pvars, &mut learner.net.params);
        adam.step(&mut learner.net.params)?;
        trace.push(TrainRecord { step, loss: loss_val, lr });
    }
    learner.trained = true;
    Ok(trace)
}

/// Draws one augmented slice sample for a plane learner.
fn sample_slice(
    items: &[(Volume, &LabelVolume)],
    axis: PlaneAxis,
    cfg: &BaseTrainCfg,
    rng: &mut SplitMix64,
    g: &mut Graph,
) -> Result<(Var, Vec<u8>)> {
    let (v, l) = &items[rng.next_range(items.len())];
    let idx = rng.next_range(axis.slice_count(v.dims()));
    let s = v.plane(axis, idx);
    let labels = l.plane_labels(axis, idx);
    let (data, labels, nu, nv) = if cfg.augment {
        match draw_augment(rng) {
            None => (s.data, labels, s.nu, s.nv),
            Some(op) => {
                let (d, nu2, nv2) = augment_plane(&s.data, s.nu, s.nv, op);
                let (t, _, _) = augment_plane(&labels, s.nu, s.nv, op);
                (d, t, nu2, nv2)
            }
        }
    } else {
        (s.data, labels, s.nu, s.nv)
    };
    let x = g.input(vec![1, nv, nu], data)?;
    Ok((x, labels))
}

/// Draws one augmented cubic crop for the 3D learner.
fn sample_patch(
    items: &[(Volume, &LabelVolume)],
    cfg: &BaseTrainCfg,
    rng: &mut SplitMix64,
    g: &mut Graph,
) -> Result<(Var, Vec<u8>)> {
    let (v, l) = &items[rng.next_range(items.len())];
    let (nx, ny, nz) = v.dims();
    let p = cfg.patch_3d.min(nx).min(ny).min(nz);
    let corner = (
        rng.next_range(nx - p + 1),
        rng.next_range(ny - p + 1),
        rng.next_range(nz - p + 1),
    );
    let (pv, pl) = extract_patch(v, l, corner, (p, p, p));
    let (pv, pl) = if cfg.augment {
        match draw_augment(rng) {
            None => (pv, pl),
            Some(op) => augment(&pv, &pl, op)?,
        }
    } else {
        (pv, pl)
    };
    let (px, py, pz) = pv.dims();
    let x = g.input(vec![1, pz, py, px], pv.data().to_vec())?;
    Ok((x, pl.labels().to_vec()))
}

/// Uniform over identity + the five axial ops; one RNG draw either way.
fn draw_augment(rng: &mut SplitMix64) -> Option<AugmentOp> {
    match rng.next_range(AugmentOp::ALL.len() + 1) {
        0 => None,
        i => Some(AugmentOp::ALL[i - 1]),
    }
}

/// In-plane counterpart of the axial augmentation group.
fn augment_plane<T: Copy + Default>(
    data: &[T],
    nu: usize,
    nv: usize,
    op: AugmentOp,
) -> (Vec<T>, usize, usize) {
    let d = (nu, nv, 1);
    let (ou, ov, _) = op.out_dims(d);
    let mut out = vec![T::default(); data.len()];
    for v in 0..nv {
        for u in 0..nu {
            let (tu, tv) = op.map_xy(u, v, d);
            out[tu + ou * tv] = data[u + nu * v];
        }
    }
    (out, ou, ov)
}

pub(crate) fn extract_image_patch(v: &Volume, corner: (usize, usize, usize), size: Dims) -> Volume {
    let (cx, cy, cz) = corner;
    let (px, py, pz) = size;
    let mut data = Vec::with_capacity(voxel_count(size));
    for z in 0..pz {
        for y in 0..py {
            for x in 0..px {
                data.push(v.get(cx + x, cy + y, cz + z));
            }
        }
    }
    Volume::new(size, v.spacing(), data).expect("patch inside volume")
}

fn extract_patch(
    v: &Volume,
    l: &LabelVolume,
    corner: (usize, usize, usize),
    size: Dims,
) -> (Volume, LabelVolume) {
    let (cx, cy, cz) = corner;
    let (px, py, pz) = size;
    let mut labels = Vec::with_capacity(voxel_count(size));
    for z in 0..pz {
        for y in 0..py {
            for x in 0..px {
                labels.push(l.get(cx + x, cy + y, cz + z));
            }
        }
    }
    (
        extract_image_patch(v, corner, size),
        LabelVolume::new(size, l.spacing(), labels, l.num_classes()).expect("patch labels"),
    )
}

/// Inference tiling for the 3D learner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileCfg {
    pub patch: usize,
    pub stride: usize,
}

impl Default for TileCfg {
    fn default() -> Self {
        TileCfg { patch: 32, stride: 16 }
    }
}

/// Runs a trained learner over a whole volume. Plane learners predict every
/// slice along their axis and reassemble; the 3D learner slides a cubic
/// window and averages overlapping predictions uniformly.
pub fn predict(learner: &BaseLearner, v: &Volume, tile: TileCfg) -> Result<ProbVolume> {
    if !learner.trained {
        return Err(LearnerError::UntrainedLearner(learner.id.tag()));
    }
    let v = normalize(v)?;
    let c = learner.net.num_classes;
    let dims = v.dims();
    let nvox = voxel_count(dims);
    match learner.id.plane() {
        Some(axis) => {
            let mut probs = vec![0.0; c * nvox];
            for idx in 0..axis.slice_count(dims) {
                let s = v.plane(axis, idx);
                let mut g = Graph::new();
                let pvars = learner.net.load_params(&mut g);
                let x = g.input(vec![1, s.nv, s.nu], s.data.clone())?;
                let logits = learner.net.forward(&mut g, x, &pvars)?;
                let p = g.softmax_values(logits);
                let plane_n = s.nu * s.nv;
                for vi in 0..s.nv {
                    for ui in 0..s.nu {
                        let (x3, y3, z3) = axis.to_xyz(ui, vi, idx);
                        let tgt = voxel_index(dims, x3, y3, z3);
                        for cls in 0..c {
                            probs[cls * nvox + tgt] = p[cls * plane_n + ui + s.nu * vi];
                        }
                    }
                }
            }
            Ok(ProbVolume::new(dims, v.spacing(), c, probs)?)
        }
        None => {
            let mut sums = vec![0.0; c * nvox];
            let mut counts = vec![0u32; nvox];
            let (nx, ny, nz) = dims;
            let starts = |n: usize| tile_starts(n, tile.patch, tile.stride);
            for &sz in &starts(nz) {
                for &sy in &starts(ny) {
                    for &sx in &starts(nx) {
                        let px = tile.patch.min(nx);
                        let py = tile.patch.min(ny);
                        let pz = tile.patch.min(nz);
                        let pv = extract_image_patch(&v, (sx, sy, sz), (px, py, pz));
                        let mut g = Graph::new();
                        let pvars = learner.net.load_params(&mut g);
                        let x = g.input(vec![1, pz, py, px], pv.data().to_vec())?;
                        let logits = learner.net.forward(&mut g, x, &pvars)?;
                        let p = g.softmax_values(logits);
                        let pn = px * py * pz;
                        for z in 0..pz {
                            for y in 0..py {
                                for x3 in 0..px {
                                    let src = x3 + px * (y + py * z);
                                    let tgt = voxel_index(dims, sx + x3, sy + y, sz + z);
                                    counts[tgt] += 1;
                                    for cls in 0..c {
                                        sums[cls * nvox + tgt] += p[cls * pn + src];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            debug_assert!(counts.iter().all(|&k| k > 0), "tiling must cover the volume");
            let mut probs = vec![0.0; c * nvox];
            for i in 0..nvox {
                for cls in 0..c {
                    probs[cls * nvox + i] = sums[cls * nvox + i] / counts[i] as f64;
                }
            }
            Ok(ProbVolume::new(dims, v.spacing(), c, probs)?)
        }
    }
}

/// Window start offsets covering [0, n): stride steps, with a final window
/// clamped so the tail is always covered.
pub(crate) fn tile_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch >= n {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= n {
            starts.push(n - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// How member probabilities are reduced into the meta-learner's summary
/// input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Average,
    Concat,
}

impl Reduction {
    pub fn tag(&self) -> &'static str {
        match self {
            Reduction::Average => "average",
            Reduction::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Reduction> {
        match s {
            "average" => Some(Reduction::Average),
            "concat" => Some(Reduction::Concat),
            _ => None,
        }
    }
}

/// Channel-major multi-channel voxel field that need not be a probability
/// simplex (e.g. concatenated member probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Meta-learner summary input S(PL).
#[derive(Clone, Debug, PartialEq)]
pub enum Summary {
    Average(ProbVolume),
    Concat(FeatureVolume),
}

impl Summary {
    pub fn channels(&self) -> usize {
        match self {
            Summary::Average(p) => p.num_classes(),
            Summary::Concat(f) => f.channels,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Summary::Average(p) => p.dims(),
            Summary::Concat(f) => f.dims,
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Summary::Average(p) => p.probs(),
            Summary::Concat(f) => &f.data,
        }
    }
}

/// Everything the meta-learner needs about one item: the ordered member
/// predictions, their hard argmax labels (the cross-entropy targets), and
/// the summary.
#[derive(Clone, Debug)]
pub struct PseudoLabelSet {
    pub item: usize,
    pub members: Vec<ProbVolume>,
    pub hard: Vec<LabelVolume>,
    pub summary: Summary,
}

/// Builds the pseudo-label set for one item from member predictions ordered
/// by learner id.
pub fn make_pseudolabels(
    item: usize,
    members: Vec<ProbVolume>,
    reduction: Reduction,
) -> Result<PseudoLabelSet> {
    if members.is_empty() {
        return Err(LearnerError::DimsMismatch("no members".into()));
    }
    let dims = members[0].dims();
    let c = members[0].num_classes();
    for (i, m) in members.iter().enumerate() {
        if m.dims() != dims || m.num_classes() != c {
            return Err(LearnerError::DimsMismatch(format!(
                "member {i}: dims {:?} classes {}, expected {:?}/{c}",
                m.dims(),
                m.num_classes(),
                dims
            )));
        }
    }
    let summary = match reduction {
        Reduction::Average => Summary::Average(average_members(&members)?),
        Reduction::Concat => {
            let mut data = Vec::with_capacity(members.len() * c * voxel_count(dims));
            for m in &members {
                data.extend_from_slice(m.probs());
            }
            Summary::Concat(FeatureVolume {
                dims,
                spacing: members[0].spacing(),
                channels: members.len() * c,
                data,
            })
        }
    };
    let hard = members.iter().map(argmax_labels).collect();
    Ok(PseudoLabelSet { item, members, hard, summary })
}

/// Voxelwise mean of member probabilities.
pub fn average_members(members: &[ProbVolume]) -> Result<ProbVolume> {
    let dims = members[0].dims();
    let c = members[0].num_classes();
    let nvox = voxel_count(dims);
    let mut acc = vec![0.0; c * nvox];
    for m in members {
        if m.dims() != dims || m.num_classes() != c {
            return Err(LearnerError::DimsMismatch("average over unequal members".into()));
        }
        for (a, p) in acc.iter_mut().zip(m.probs()) {
            *a += p;
        }
    }
    let inv = 1.0 / members.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(ProbVolume::new(dims, members[0].spacing(), c, acc)?)
}
