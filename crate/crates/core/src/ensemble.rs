//! Meta-learner construction and training: the overall cross-entropy
//! objective, random-fit (uniform pseudo-label sampling), nearest-neighbor
//! fit (train toward the member whose hard labels the current prediction is
//! closest to), supervision-source selection, and the average-ensemble
//! baseline.
//!
//! Training operates on [`MetaItem`]s: fixed-size patches cut from the
//! source volumes with the raw image, the summary channels, and every
//! candidate hard-label target materialized up front. The sample index p in
//! the fitting algorithms ranges over these patches.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{
    cross_entropy_of_probs, load_checkpoint, save_checkpoint, AdamError, AdamState, AutodiffError,
    CheckpointError, Graph, LrSchedule, Padding, Tensor, Var,
};
use crate::learners::{
    average_members, extract_image_patch, init_params, pull_grads, tile_starts, FcnStack,
    LearnerError, PseudoLabelSet, Summary,
};
use crate::rng::SplitMix64;
use crate::volume::{normalize, voxel_count, voxel_index, Dims, LabelVolume, ProbVolume, Volume};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("dims mismatch: {0}")]
    DimsMismatch(String),
    #[error("item {item} needs ground truth but has none")]
    MissingGroundTruth { item: usize },
    #[error("nn-fit requires a random-fit warm start")]
    NotWarmStarted,
    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("no meta-training items")]
    NoItems,
    #[error("checkpoint does not describe this model: {0}")]
    BadCheckpoint(String),
    #[error("bad training log: {0}")]
    BadLog(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EnsembleError>;

/// Where hard training targets come from (ground truth, pseudo-labels, or
/// pseudo-labels with ground truth appended as one more version).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupervisionSource {
    Gt,
    Pl,
    GtPl,
}

impl SupervisionSource {
    pub fn tag(&self) -> &'static str {
        match self {
            SupervisionSource::Gt => "gt",
            SupervisionSource::Pl => "pl",
            SupervisionSource::GtPl => "gt_pl",
        }
    }

    pub fn parse(s: &str) -> Option<SupervisionSource> {
        match s {
            "gt" => Some(SupervisionSource::Gt),
            "pl" => Some(SupervisionSource::Pl),
            "gt_pl" => Some(SupervisionSource::GtPl),
            _ => None,
        }
    }
}

/// Which raw images join meta-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolSetting {
    /// Labeled training items only.
    OnlyTrainingData,
    /// Labeled plus unlabeled training items.
    SemiSupervised,
    /// Labeled, unlabeled, and test items; test ground truth is never read.
    Transductive,
}

impl ProtocolSetting {
    pub fn tag(&self) -> &'static str {
        match self {
            ProtocolSetting::OnlyTrainingData => "only_training_data",
            ProtocolSetting::SemiSupervised => "semi_supervised",
            ProtocolSetting::Transductive => "transductive",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolSetting> {
        match s {
            "only_training_data" => Some(ProtocolSetting::OnlyTrainingData),
            "semi_supervised" => Some(ProtocolSetting::SemiSupervised),
            "transductive" => Some(ProtocolSetting::Transductive),
            _ => None,
        }
    }
}

/// Phase plan for meta-training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainProtocol {
    pub setting: ProtocolSetting,
    pub random_iters: u64,
    pub nn_iters: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub seed: u64,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        TrainProtocol {
            setting: ProtocolSetting::OnlyTrainingData,
            random_iters: 3000,
            nn_iters: 1500,
            batch: 2,
            base_lr: 5e-4,
            lr_power: 0.9,
            seed: 0,
        }
    }
}

/// Counts ground-truth label reads per item during target construction.
/// The only sanctioned path from a ground-truth volume to meta-training
/// targets is [`select_supervision`], which records here; a clean audit for
/// an item means its ground truth never influenced training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtAudit {
    pub reads: BTreeMap<usize, u64>,
}

impl GtAudit {
    pub fn record(&mut self, item: usize) {
        *self.reads.entry(item).or_insert(0) += 1;
    }

    pub fn reads_of(&self, item: usize) -> u64 {
        self.reads.get(&item).copied().unwrap_or(0)
    }
}

/// Resolves the target versions for one item. Labeled items follow `mode`;
/// unlabeled and test items always use the pseudo-labels. Ground-truth
/// access is recorded in the audit.
pub fn select_supervision<'a>(
    mode: SupervisionSource,
    pl: &'a PseudoLabelSet,
    gt: Option<&'a LabelVolume>,
    labeled: bool,
    audit: &mut GtAudit,
) -> Result<Vec<&'a LabelVolume>> {
    let effective = if labeled { mode } else { SupervisionSource::Pl };
    let use_gt = |gt: Option<&'a LabelVolume>, audit: &mut GtAudit| -> Result<&'a LabelVolume> {
        let g = gt.ok_or(EnsembleError::MissingGroundTruth { item: pl.item })?;
        if g.dims() != pl.summary.dims() {
            return Err(EnsembleError::DimsMismatch(format!(
                "item {}: ground truth dims {:?}, members {:?}",
                pl.item,
                g.dims(),
                pl.summary.dims()
            )));
        }
        audit.record(pl.item);
        Ok(g)
    };
    Ok(match effective {
        SupervisionSource::Pl => pl.hard.iter().collect(),
        SupervisionSource::Gt => vec![use_gt(gt, audit)?],
        SupervisionSource::GtPl => {
            let mut targets: Vec<&LabelVolume> = pl.hard.iter().collect();
            targets.push(use_gt(gt, audit)?);
            targets
        }
    })
}

/// One raw volume offered to meta-training.
pub struct MetaSource<'a> {
    pub item: usize,
    pub image: &'a Volume,
    pub pl: &'a PseudoLabelSet,
    /// Ground truth when this item's labels may be consulted at all; None
    /// enforces isolation structurally.
    pub gt: Option<&'a LabelVolume>,
    pub labeled: bool,
}

/// One meta-training sample: a patch with its raw channel, summary
/// channels, and every candidate target. `targets[q]` is the hard label
/// field of version q over the patch.
#[derive(Clone, Debug)]
pub struct MetaItem {
    pub item: usize,
    pub corner: (usize, usize, usize),
    pub dims: Dims,
    pub raw: Vec<f64>,
    pub summary: Vec<f64>,
    pub targets: Vec<Vec<u8>>,
}

impl MetaItem {
    pub fn versions(&self) -> usize {
        self.targets.len()
    }
}

/// Cuts every source volume into non-overlapping `patch`-sized tiles (tail
/// tiles clamp to the border) and materializes targets per
/// [`select_supervision`]. Raw patches are normalized at whole-volume scope.
pub fn build_meta_items(
    sources: &[MetaSource],
    mode: SupervisionSource,
    patch: usize,
    audit: &mut GtAudit,
) -> Result<Vec<MetaItem>> {
    let mut out = Vec::new();
    for src in sources {
        let dims = src.image.dims();
        if src.pl.summary.dims() != dims {
            return Err(EnsembleError::DimsMismatch(format!(
                "item {}: image dims {:?}, members {:?}",
                src.item,
                dims,
                src.pl.summary.dims()
            )));
        }
        let targets = select_supervision(mode, src.pl, src.gt, src.labeled, audit)?;
        let norm = normalize(src.image)?;
        let (nx, ny, nz) = dims;
        let px = patch.min(nx);
        let py = patch.min(ny);
        let pz = patch.min(nz);
        let sum_channels = src.pl.summary.channels();
        let sum_data = src.pl.summary.data();
        let nvox = voxel_count(dims);
        for &cz in &tile_starts(nz, pz, pz) {
            for &cy in &tile_starts(ny, py, py) {
                for &cx in &tile_starts(nx, px, px) {
                    let pdims = (px, py, pz);
                    let pn = voxel_count(pdims);
                    let raw = extract_image_patch(&norm, (cx, cy, cz), pdims)
                        .data()
                        .to_vec();
                    let mut summary = vec![0.0; sum_channels * pn];
                    let mut tgt: Vec<Vec<u8>> = vec![vec![0; pn]; targets.len()];
                    for z in 0..pz {
                        for y in 0..py {
                            for x in 0..px {
                                let dst = x + px * (y + py * z);
                                let sv = voxel_index(dims, cx + x, cy + y, cz + z);
                                for c in 0..sum_channels {
                                    summary[c * pn + dst] = sum_data[c * nvox + sv];
                                }
                                for (ti, t) in targets.iter().enumerate() {
                                    tgt[ti][dst] = t.labels()[sv];
                                }
                            }
                        }
                    }
                    out.push(MetaItem {
                        item: src.item,
                        corner: (cx, cy, cz),
                        dims: pdims,
                        raw,
                        summary,
                        targets: tgt,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Architecture switches for the meta-learner.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLearnerSpec {
    pub num_classes: usize,
    /// C for the average summary, m*C for concat.
    pub summary_channels: usize,
    /// When false the raw-image branch is omitted (summary-only ablation).
    pub use_raw_image: bool,
    pub aux_head: bool,
    /// Weight of the auxiliary loss relative to the main loss.
    pub aux_weight: f64,
}

impl Default for MetaLearnerSpec {
    fn default() -> Self {
        MetaLearnerSpec {
            num_classes: 2,
            summary_channels: 2,
            use_raw_image: true,
            aux_head: false,
            aux_weight: 0.3,
        }
    }
}

/// H(x, S(PL)): per-input encoding branches, channel concatenation, a
/// fusion dense block, and a 1-wide classifier. The optional auxiliary
/// classifier reads the concatenated branch features directly (the side
/// path skips the fusion block).
#[derive(Clone, Debug)]
pub struct MetaLearner {
    pub spec: MetaLearnerSpec,
    raw_stack: Option<FcnStack>,
    sum_stack: FcnStack,
    fusion_stack: FcnStack,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    pub warm_started: bool,
}

fn branch_stack(in_channels: usize) -> FcnStack {
    FcnStack {
        in_channels,
        stem: Some((16, 5)),
        blocks: 1,
        convs_per_block: 3,
        growth: 8,
        block_kernel: 3,
        rank2: false,
    }
}

impl MetaLearner {
    pub fn init(spec: MetaLearnerSpec, seed: u64) -> MetaLearner {
        let raw_stack = spec.use_raw_image.then(|| branch_stack(1));
        let sum_stack = branch_stack(spec.summary_channels);
        let side_channels =
            raw_stack.as_ref().map_or(0, |s| s.out_channels()) + sum_stack.out_channels();
        let fusion_stack = FcnStack {
            in_channels: side_channels,
            stem: None,
            blocks: 1,
            convs_per_block: 3,
            growth: 8,
            block_kernel: 3,
            rank2: false,
        };
        let mut specs = Vec::new();
        if let Some(rs) = &raw_stack {
            specs.extend(rs.param_specs("raw."));
        }
        specs.extend(sum_stack.param_specs("sum."));
        specs.extend(fusion_stack.param_specs("fuse."));
        specs.push((
            "head.w".to_string(),
            vec![spec.num_classes, fusion_stack.out_channels(), 1, 1, 1],
        ));
        if spec.aux_head {
            specs.push(("aux.w".to_string(), vec![spec.num_classes, side_channels, 1, 1, 1]));
        }
        let (names, params) = init_params(&specs, seed);
        MetaLearner {
            spec,
            raw_stack,
            sum_stack,
            fusion_stack,
            params,
            names,
            warm_started: false,
        }
    }

    pub fn load_params(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|t| t.len()).collect()
    }

    /// Wires the network; `raw` must be Some exactly when the raw branch
    /// exists. Returns main logits and auxiliary logits when enabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        raw: Option<Var>,
        summary: Var,
        pvars: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        let mut off = 0;
        let mut branches = Vec::new();
        match (&self.raw_stack, raw) {
            (Some(rs), Some(x)) => {
                let (f, used) = rs.forward(g, x, &pvars[off..])?;
                off += used;
                branches.push(f);
            }
            (None, None) => {}
            _ => {
                return Err(EnsembleError::DimsMismatch(
                    "raw input presence disagrees with the architecture".into(),
                ))
            }
        }
        let (sf, used) = self.sum_stack.forward(g, summary, &pvars[off..])?;
        off += used;
        branches.push(sf);
        let side = if branches.len() == 1 { branches[0] } else { g.concat(&branches, 0)? };
        let (fused, used) = self.fusion_stack.forward(g, side, &pvars[off..])?;
        off += used;
        let logits = g.conv3d(fused, pvars[off], 1, Padding::Same)?;
        off += 1;
        let aux = if self.spec.aux_head {
            Some(g.conv3d(side, pvars[off], 1, Padding::Same)?)
        } else {
            None
        };
        Ok((logits, aux))
    }

    /// Forward over one meta item; feeds the patch tensors straight in.
    fn forward_item(
        &self,
        g: &mut Graph,
        pvars: &[Var],
        it: &MetaItem,
    ) -> Result<(Var, Option<Var>)> {
        let (px, py, pz) = it.dims;
        let raw = if self.spec.use_raw_image {
            Some(g.input(vec![1, pz, py, px], it.raw.clone())?)
        } else {
            None
        };
        let s = g.input(vec![self.spec.summary_channels, pz, py, px], it.summary.clone())?;
        self.forward(g, raw, s, pvars)
    }

    fn meta_kv(&self) -> Vec<(String, String)> {
        vec![
            ("arch".to_string(), "meta".to_string()),
            ("num_classes".to_string(), self.spec.num_classes.to_string()),
            ("summary_channels".to_string(), self.spec.summary_channels.to_string()),
            ("use_raw_image".to_string(), (self.spec.use_raw_image as u8).to_string()),
            ("aux_head".to_string(), (self.spec.aux_head as u8).to_string()),
            ("aux_weight".to_string(), format!("{:?}", self.spec.aux_weight)),
            ("warm_started".to_string(), (self.warm_started as u8).to_string()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter())
            .collect();
        save_checkpoint(path, &self.meta_kv(), &named)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetaLearner> {
        let (meta, tensors) = load_checkpoint(path)?;
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(mk, _)| mk == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| EnsembleError::BadCheckpoint(format!("missing meta {k}")))
        };
        if get("arch")? != "meta" {
            return Err(EnsembleError::BadCheckpoint("arch is not meta".into()));
        }
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| EnsembleError::BadCheckpoint(format!("bad {k}")))
        };
        let spec = MetaLearnerSpec {
            num_classes: parse_usize("num_classes")?,
            summary_channels: parse_usize("summary_channels")?,
            use_raw_image: get("use_raw_image")? == "1",
            aux_head: get("aux_head")? == "1",
            aux_weight: get("aux_weight")?
                .parse()
                .map_err(|_| EnsembleError::BadCheckpoint("bad aux_weight".into()))?,
        };
        let mut model = MetaLearner::init(spec, 0);
        model.warm_started = get("warm_started")? == "1";
        if tensors.len() != model.params.len() {
            return Err(EnsembleError::BadCheckpoint(format!(
                "{} tensors, expected {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != model.names[i] || t.shape != model.params[i].shape {
                return Err(EnsembleError::BadCheckpoint(format!(
                    "tensor {i}: {name} {:?}, expected {} {:?}",
                    t.shape, model.names[i], model.params[i].shape
                )));
            }
            model.params[i] = t.into_param();
        }
        Ok(model)
    }
}

/// Runs H over a whole volume and returns the main (and auxiliary)
/// probability field. The raw image is normalized internally.
pub fn meta_forward(
    h: &MetaLearner,
    x: &Volume,
    s: &Summary,
) -> Result<(ProbVolume, Option<ProbVolume>)> {
    if s.dims() != x.dims() {
        return Err(EnsembleError::DimsMismatch(format!(
            "image dims {:?}, summary dims {:?}",
            x.dims(),
            s.dims()
        )));
    }
    if s.channels() != h.spec.summary_channels {
        return Err(EnsembleError::DimsMismatch(format!(
            "summary has {} channels, meta-learner expects {}",
            s.channels(),
            h.spec.summary_channels
        )));
    }
    let (nx, ny, nz) = x.dims();
    let norm = normalize(x)?;
    let mut g = Graph::new();
    let pvars = h.load_params(&mut g);
    let raw = if h.spec.use_raw_image {
        Some(g.input(vec![1, nz, ny, nx], norm.data().to_vec())?)
    } else {
        None
    };
    let sv = g.input(vec![s.channels(), nz, ny, nx], s.data().to_vec())?;
    let (logits, aux) = h.forward(&mut g, raw, sv, &pvars)?;
    let c = h.spec.num_classes;
    let main = ProbVolume::new(x.dims(), x.spacing(), c, g.softmax_values(logits))?;
    let aux = match aux {
        Some(a) => Some(ProbVolume::new(x.dims(), x.spacing(), c, g.softmax_values(a))?),
        None => None,
    };
    Ok((main, aux))
}

/// Overall objective: sum over items and target versions of the mean-voxel
/// cross-entropy of H's prediction. Monitoring only; training minimizes the
/// stochastic per-slot estimates.
pub fn eq1_loss(h: &MetaLearner, items: &[MetaItem]) -> Result<f64> {
    let c = h.spec.num_classes;
    let mut total = 0.0;
    for it in items {
        let mut g = Graph::new();
        let pvars = h.load_params(&mut g);
        let (logits, _) = h.forward_item(&mut g, &pvars, it)?;
        let probs = g.softmax_values(logits);
        for t in &it.targets {
            total += cross_entropy_of_probs(&probs, c, t);
        }
    }
    Ok(total)
}

/// Voxelwise mean of the members; the non-trained ensembling baseline.
pub fn average_ensemble(pl: &PseudoLabelSet) -> Result<ProbVolume> {
    Ok(average_members(&pl.members)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitPhase {
    Random,
    Nn,
}

impl FitPhase {
    pub fn tag(&self) -> &'static str {
        match self {
            FitPhase::Random => "random",
            FitPhase::Nn => "nn",
        }
    }

    pub fn parse(s: &str) -> Option<FitPhase> {
        match s {
            "random" => Some(FitPhase::Random),
            "nn" => Some(FitPhase::Nn),
            _ => None,
        }
    }
}

/// One batch-slot record in the training log. `loss` is the whole step's
/// batch loss (repeated on each slot line); `candidates` holds the per-
/// version cross-entropies behind an nn-fit selection.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub step: u64,
    pub phase: FitPhase,
    pub slot: usize,
    pub p: usize,
    pub q: usize,
    pub loss: f64,
    pub lr: f64,
    pub candidates: Vec<f64>,
}

const RANDOM_FIT_STREAM: u64 = 0x666974_72; // "fit-r"
const NN_FIT_STREAM: u64 = 0x666974_6e; // "fit-n"

/// Per-slot loss of one training sample, with the auxiliary head folded in
/// when present.
fn slot_loss(
    h: &MetaLearner,
    g: &mut Graph,
    pvars: &[Var],
    it: &MetaItem,
    q: usize,
) -> Result<(Var, Var)> {
    let (logits, aux) = h.forward_item(g, pvars, it)?;
    let main = g.softmax_ce(logits, &it.targets[q])?;
    let loss = match aux {
        Some(a) => {
            let aux_ce = g.softmax_ce(a, &it.targets[q])?;
            let scaled = g.scale(aux_ce, h.spec.aux_weight);
            g.add(main, scaled)?
        }
        None => main,
    };
    Ok((loss, logits))
}

fn adam_for(h: &MetaLearner, protocol: &TrainProtocol, iters: u64) -> AdamState {
    AdamState::new(
        protocol.base_lr,
        LrSchedule::Poly { power: protocol.lr_power, max_iter: iters.max(1) },
        &h.param_sizes(),
    )
}

/// Algorithm: per batch slot draw sample p and version q uniformly, train
/// on {(x_p, S(PL_p)), target q}. Marks H warm-started.
pub fn random_fit(
    h: &mut MetaLearner,
    items: &[MetaItem],
    protocol: &TrainProtocol,
) -> Result<Vec<FitRecord>> {
    if items.is_empty() {
        return Err(EnsembleError::NoItems);
    }
    let mut rng = SplitMix64::derive(protocol.seed, RANDOM_FIT_STREAM);
    let mut adam = adam_for(h, protocol, protocol.random_iters);
    let mut records = Vec::new();
    for step in 0..protocol.random_iters {
        let lr = adam.effective_lr()?;
        let mut g = Graph::new();
        let pvars = h.load_params(&mut g);
        let mut draws = Vec::with_capacity(protocol.batch);
        let mut total: Option<Var> = None;
        for _ in 0..protocol.batch {
            let p = rng.next_range(items.len());
            let q = rng.next_range(items[p].versions());
            draws.push((p, q));
            let (loss, _) = slot_loss(h, &mut g, &pvars, &items[p], q)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let loss = g.scale(total.expect("batch >= 1"), 1.0 / protocol.batch as f64);
        let loss_val = g.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(EnsembleError::DivergedLoss { step, loss: loss_val });
        }
        g.backward(loss)?;
        pull_grads(&g, &pvars, &mut h.params);
        adam.step(&mut h.params)?;
        for (slot, (p, q)) in draws.into_iter().enumerate() {
            records.push(FitRecord {
                step,
                phase: FitPhase::Random,
                slot,
                p,
                q,
                loss: loss_val,
                lr,
                candidates: Vec::new(),
            });
        }
    }
    h.warm_started = true;
    Ok(records)
}

/// Reproduces random-fit's draw sequence from the seed; `versions[p]` is
/// the target count of item p. Log replay compares against this.
pub fn replay_random_draws(
    seed: u64,
    versions: &[usize],
    iters: u64,
    batch: usize,
) -> Vec<(usize, usize)> {
    let mut rng = SplitMix64::derive(seed, RANDOM_FIT_STREAM);
    let mut draws = Vec::with_capacity(iters as usize * batch);
    for _ in 0..iters {
        for _ in 0..batch {
            let p = rng.next_range(versions.len());
            let q = rng.next_range(versions[p]);
            draws.push((p, q));
        }
    }
    draws
}

/// Algorithm: per slot draw p uniformly, predict with the step's parameter
/// snapshot, pick the version whose hard labels the prediction is closest
/// to in cross-entropy (ties toward the lowest index), and train on that.
/// Requires a random-fit warm start. When `snapshot_dir` is set, the
/// pre-update parameters of every step are checkpointed for offline audit.
pub fn nn_fit(
    h: &mut MetaLearner,
    items: &[MetaItem],
    protocol: &TrainProtocol,
    snapshot_dir: Option<&Path>,
) -> Result<Vec<FitRecord>> {
    if !h.warm_started {
        return Err(EnsembleError::NotWarmStarted);
    }
    if items.is_empty() {
        return Err(EnsembleError::NoItems);
    }
    let c = h.spec.num_classes;
    let mut rng = SplitMix64::derive(protocol.seed, NN_FIT_STREAM);
    let mut adam = adam_for(h, protocol, protocol.nn_iters);
    let mut records = Vec::new();
    for step in 0..protocol.nn_iters {
        let lr = adam.effective_lr()?;
        if let Some(dir) = snapshot_dir {
            h.save(&dir.join(format!("nn_step_{step:06}.ckpt")))?;
        }
        // One graph per step: every slot's selection forward reads the same
        // pre-update parameters, and the training loss reuses that forward.
        let mut g = Graph::new();
        let pvars = h.load_params(&mut g);
        let mut total: Option<Var> = None;
        let mut picked = Vec::with_capacity(protocol.batch);
        for _ in 0..protocol.batch {
            let p = rng.next_range(items.len());
            let it = &items[p];
            let (logits, aux) = h.forward_item(&mut g, &pvars, it)?;
            let probs = g.softmax_values(logits);
            let candidates: Vec<f64> = it
                .targets
                .iter()
                .map(|t| cross_entropy_of_probs(&probs, c, t))
                .collect();
            let q_hat = argmin_lowest(&candidates);
            let main = g.softmax_ce(logits, &it.targets[q_hat])?;
            let loss = match aux {
                Some(a) => {
                    let aux_ce = g.softmax_ce(a, &it.targets[q_hat])?;
                    let scaled = g.scale(aux_ce, h.spec.aux_weight);
                    g.add(main, scaled)?
                }
                None => main,
            };
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
            picked.push((p, q_hat, candidates));
        }
        let loss = g.scale(total.expect("batch >= 1"), 1.0 / protocol.batch as f64);
        let loss_val = g.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(EnsembleError::DivergedLoss { step, loss: loss_val });
        }
        g.backward(loss)?;
        pull_grads(&g, &pvars, &mut h.params);
        adam.step(&mut h.params)?;
        for (slot, (p, q_hat, candidates)) in picked.into_iter().enumerate() {
            records.push(FitRecord {
                step,
                phase: FitPhase::Nn,
                slot,
                p,
                q: q_hat,
                loss: loss_val,
                lr,
                candidates,
            });
        }
    }
    Ok(records)
}

/// Reproduces nn-fit's p draw sequence from the seed.
pub fn replay_nn_p_draws(seed: u64, n_items: usize, iters: u64, batch: usize) -> Vec<usize> {
    let mut rng = SplitMix64::derive(seed, NN_FIT_STREAM);
    (0..iters * batch as u64).map(|_| rng.next_range(n_items)).collect()
}

/// Per-version selection losses of one sample under the given parameter
/// state; the offline counterpart of nn-fit's pick. Feeding a step's
/// snapshot and the replayed p reproduces that step's candidates exactly,
/// since selection reads only pre-update parameters.
pub fn nn_candidates(h: &MetaLearner, it: &MetaItem) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pvars = h.load_params(&mut g);
    let (logits, _) = h.forward_item(&mut g, &pvars, it)?;
    let probs = g.softmax_values(logits);
    Ok(it
        .targets
        .iter()
        .map(|t| cross_entropy_of_probs(&probs, h.spec.num_classes, t))
        .collect())
}

/// First index attaining the minimum.
pub fn argmin_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Mean of each full non-overlapping window; the trailing partial window is
/// dropped.
pub fn window_means(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0);
    xs.chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Training log: one line per batch slot,
/// `step phase slot p q loss lr[ c0,c1,...]`.
pub fn write_fit_log(path: &Path, records: &[FitRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        write!(
            w,
            "{} {} {} {} {} {:?} {:?}",
            r.step,
            r.phase.tag(),
            r.slot,
            r.p,
            r.q,
            r.loss,
            r.lr
        )?;
        if !r.candidates.is_empty() {
            let cs: Vec<String> = r.candidates.iter().map(|c| format!("{c:?}")).collect();
            write!(w, " {}", cs.join(","))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fit_log(path: &Path) -> Result<Vec<FitRecord>> {
    let f = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| EnsembleError::BadLog(format!("line {}: {m}", ln + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 7 || fields.len() > 8 {
            return Err(bad("expected 7 or 8 fields"));
        }
        let phase = FitPhase::parse(fields[1]).ok_or_else(|| bad("unknown phase"))?;
        let candidates = if fields.len() == 8 {
            fields[7]
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| bad("bad candidate")))
                .collect::<Result<Vec<f64>>>()?
        } else {
            Vec::new()
        };
        records.push(FitRecord {
            step: fields[0].parse().map_err(|_| bad("bad step"))?,
            phase,
            slot: fields[2].parse().map_err(|_| bad("bad slot"))?,
            p: fields[3].parse().map_err(|_| bad("bad p"))?,
            q: fields[4].parse().map_err(|_| bad("bad q"))?,
            loss: fields[5].parse().map_err(|_| bad("bad loss"))?,
            lr: fields[6].parse().map_err(|_| bad("bad lr"))?,
            candidates,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{make_pseudolabels, Reduction};
    use crate::volume::argmax_labels;

    fn random_probs(dims: Dims, c: usize, seed: u64) -> ProbVolume {
        let mut r = SplitMix64::new(seed);
        let nvox = voxel_count(dims);
        let mut probs = vec![0.0; c * nvox];
        for i in 0..nvox {
            let mut total = 0.0;
            for cls in 0..c {
                let v = r.next_f64() + 1e-3;
                probs[cls * nvox + i] = v;
                total += v;
            }
            for cls in 0..c {
                probs[cls * nvox + i] /= total;
            }
        }
        ProbVolume::new(dims, (1.0, 1.0, 1.0), c, probs).unwrap()
    }

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut r = SplitMix64::new(seed);
        let data = (0..voxel_count(dims)).map(|_| r.next_gaussian()).collect();
        Volume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    fn random_labels(dims: Dims, c: usize, seed: u64) -> LabelVolume {
        let mut r = SplitMix64::new(seed);
        let labels = (0..voxel_count(dims)).map(|_| r.next_range(c) as u8).collect();
        LabelVolume::new(dims, (1.0, 1.0, 1.0), labels, c).unwrap()
    }

    fn setup(dims: Dims, c: usize, m: usize, seed: u64) -> (Volume, PseudoLabelSet) {
        let members: Vec<ProbVolume> =
            (0..m).map(|j| random_probs(dims, c, seed * 100 + j as u64)).collect();
        let pl = make_pseudolabels(0, members, Reduction::Average).unwrap();
        (random_volume(dims, seed + 7), pl)
    }

    fn items_for(
        v: &Volume,
        pl: &PseudoLabelSet,
        mode: SupervisionSource,
        gt: Option<&LabelVolume>,
        patch: usize,
    ) -> Vec<MetaItem> {
        let mut audit = GtAudit::default();
        let sources =
            [MetaSource { item: pl.item, image: v, pl, gt, labeled: true }];
        build_meta_items(&sources, mode, patch, &mut audit).unwrap()
    }

    #[test]
    fn meta_forward_shapes_and_determinism() {
        let dims = (5, 4, 6);
        let (v, pl) = setup(dims, 3, 2, 11);
        let spec = MetaLearnerSpec {
            num_classes: 3,
            summary_channels: 3,
            use_raw_image: true,
            aux_head: true,
            aux_weight: 0.3,
        };
        let h = MetaLearner::init(spec, 3);
        let (p1, a1) = meta_forward(&h, &v, &pl.summary).unwrap();
        assert_eq!(p1.dims(), dims);
        assert_eq!(p1.num_classes(), 3);
        assert!(a1.is_some());
        let (p2, _) = meta_forward(&h, &v, &pl.summary).unwrap();
        assert_eq!(p1.probs(), p2.probs());

        // aux disabled -> single output
        let h2 = MetaLearner::init(MetaLearnerSpec { aux_head: false, num_classes: 3, summary_channels: 3, ..Default::default() }, 3);
        let (_, a2) = meta_forward(&h2, &v, &pl.summary).unwrap();
        assert!(a2.is_none());
    }

    #[test]
    fn meta_forward_rejects_mismatches() {
        let (v, pl) = setup((4, 4, 4), 2, 2, 13);
        let h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 4, ..Default::default() },
            1,
        );
        // summary has 2 channels, arch expects 4
        assert!(matches!(
            meta_forward(&h, &v, &pl.summary),
            Err(EnsembleError::DimsMismatch(_))
        ));
        let h2 = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            1,
        );
        let v_bad = random_volume((4, 4, 3), 1);
        assert!(matches!(
            meta_forward(&h2, &v_bad, &pl.summary),
            Err(EnsembleError::DimsMismatch(_))
        ));
    }

    #[test]
    fn summary_only_branch_drops_raw_params() {
        let with_raw = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            5,
        );
        let without = MetaLearner::init(
            MetaLearnerSpec {
                num_classes: 2,
                summary_channels: 2,
                use_raw_image: false,
                ..Default::default()
            },
            5,
        );
        assert!(with_raw.names.iter().any(|n| n.starts_with("raw.")));
        assert!(!without.names.iter().any(|n| n.starts_with("raw.")));
        assert!(without.params.len() < with_raw.params.len());
        let (v, pl) = setup((4, 4, 4), 2, 1, 17);
        let (p, _) = meta_forward(&without, &v, &pl.summary).unwrap();
        assert_eq!(p.dims(), (4, 4, 4));
    }

    #[test]
    fn select_supervision_modes_and_audit() {
        let dims = (4, 4, 4);
        let (_, pl) = setup(dims, 2, 3, 19);
        let gt = random_labels(dims, 2, 23);
        let mut audit = GtAudit::default();

        let t = select_supervision(SupervisionSource::Pl, &pl, Some(&gt), true, &mut audit)
            .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(audit.reads_of(0), 0);

        let t = select_supervision(SupervisionSource::Gt, &pl, Some(&gt), true, &mut audit)
            .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].labels(), gt.labels());
        assert_eq!(audit.reads_of(0), 1);

        let t = select_supervision(SupervisionSource::GtPl, &pl, Some(&gt), true, &mut audit)
            .unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[3].labels(), gt.labels());
        assert_eq!(audit.reads_of(0), 2);

        // unlabeled items fall back to PL and never touch ground truth
        let t = select_supervision(SupervisionSource::GtPl, &pl, Some(&gt), false, &mut audit)
            .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(audit.reads_of(0), 2);

        assert!(matches!(
            select_supervision(SupervisionSource::Gt, &pl, None, true, &mut audit),
            Err(EnsembleError::MissingGroundTruth { item: 0 })
        ));
    }

    #[test]
    fn meta_items_tile_and_carry_targets() {
        let dims = (8, 8, 4);
        let (v, pl) = setup(dims, 2, 2, 29);
        let gt = random_labels(dims, 2, 31);
        let items = items_for(&v, &pl, SupervisionSource::GtPl, Some(&gt), 4);
        // 2x2x1 tiles
        assert_eq!(items.len(), 4);
        for it in &items {
            assert_eq!(it.dims, (4, 4, 4));
            assert_eq!(it.versions(), 3);
            assert_eq!(it.raw.len(), 64);
            assert_eq!(it.summary.len(), 2 * 64);
        }
        // targets reproduce the member hard labels patchwise
        let norm = normalize(&v).unwrap();
        let it = items.iter().find(|i| i.corner == (4, 4, 0)).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let dst = x + 4 * (y + 4 * z);
                    let src = voxel_index(dims, 4 + x, 4 + y, z);
                    assert_eq!(it.targets[0][dst], pl.hard[0].labels()[src]);
                    assert_eq!(it.targets[1][dst], pl.hard[1].labels()[src]);
                    assert_eq!(it.targets[2][dst], gt.labels()[src]);
                    assert_eq!(it.raw[dst], norm.data()[src]);
                    let nvox = voxel_count(dims);
                    assert_eq!(it.summary[dst], pl.summary.data()[src]);
                    assert_eq!(it.summary[64 + dst], pl.summary.data()[nvox + src]);
                }
            }
        }
    }

    #[test]
    fn eq1_matches_brute_force_double_loop() {
        let dims = (4, 4, 4);
        let (v, pl_a) = setup(dims, 2, 2, 37);
        let (v2, pl_b) = setup(dims, 2, 2, 41);
        let mut pl_b = pl_b;
        pl_b.item = 1;
        let h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            7,
        );
        let mut audit = GtAudit::default();
        let sources = [
            MetaSource { item: 0, image: &v, pl: &pl_a, gt: None, labeled: true },
            MetaSource { item: 1, image: &v2, pl: &pl_b, gt: None, labeled: true },
        ];
        let items = build_meta_items(&sources, SupervisionSource::Pl, 4, &mut audit).unwrap();
        assert_eq!(items.len(), 2);
        let fast = eq1_loss(&h, &items).unwrap();

        let mut brute = 0.0;
        for it in &items {
            let mut g = Graph::new();
            let pvars = h.load_params(&mut g);
            let (logits, _) = h.forward_item(&mut g, &pvars, it).unwrap();
            let probs = g.softmax_values(logits);
            for t in &it.targets {
                // explicit per-voxel mean cross-entropy
                let nvox = t.len();
                let mut ce = 0.0;
                for (i, &cls) in t.iter().enumerate() {
                    ce -= probs[cls as usize * nvox + i].ln();
                }
                brute += ce / nvox as f64;
            }
        }
        assert!((fast - brute).abs() < 1e-9, "fast {fast} brute {brute}");
    }

    #[test]
    fn eq1_m1_is_plain_cross_entropy() {
        let dims = (4, 4, 4);
        let (v, pl) = setup(dims, 2, 1, 43);
        let h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            9,
        );
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 4);
        let got = eq1_loss(&h, &items).unwrap();
        let mut g = Graph::new();
        let pvars = h.load_params(&mut g);
        let (logits, _) = h.forward_item(&mut g, &pvars, &items[0]).unwrap();
        let ce = g.softmax_ce(logits, &items[0].targets[0]).unwrap();
        assert!((got - g.value(ce)[0]).abs() < 1e-9);
    }

    #[test]
    fn random_fit_trains_and_logs_uniform_draws() {
        let dims = (4, 4, 4);
        let (v, pl) = setup(dims, 2, 3, 47);
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 4);
        let mut h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            11,
        );
        let protocol = TrainProtocol { random_iters: 6, batch: 2, seed: 53, ..Default::default() };
        let recs = random_fit(&mut h, &items, &protocol).unwrap();
        assert!(h.warm_started);
        assert_eq!(recs.len(), 12);
        // replay reproduces every draw
        let versions = vec![3; items.len()];
        let replay = replay_random_draws(53, &versions, 6, 2);
        for (r, (p, q)) in recs.iter().zip(&replay) {
            assert_eq!((r.p, r.q), (*p, *q));
            assert_eq!(r.phase, FitPhase::Random);
            assert!(r.candidates.is_empty());
        }
        assert!(recs.iter().all(|r| r.loss.is_finite() && r.lr > 0.0));
    }

    #[test]
    fn random_fit_m1_equals_supervised_on_that_target() {
        // with a single version, every draw trains on the same target; the
        // run must be identical to one that hardwires q=0
        let dims = (4, 4, 4);
        let (v, pl) = setup(dims, 2, 1, 59);
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 4);
        let protocol = TrainProtocol { random_iters: 5, batch: 2, seed: 61, ..Default::default() };
        let mut h1 = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            13,
        );
        let recs = random_fit(&mut h1, &items, &protocol).unwrap();
        assert!(recs.iter().all(|r| r.q == 0));

        // manual supervised loop with the same p sequence
        let mut h2 = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            13,
        );
        let mut rng = SplitMix64::derive(61, RANDOM_FIT_STREAM);
        let mut adam = adam_for(&h2, &protocol, 5);
        for _ in 0..5 {
            let mut g = Graph::new();
            let pvars = h2.load_params(&mut g);
            let mut total: Option<Var> = None;
            for _ in 0..2 {
                let p = rng.next_range(items.len());
                let _q = rng.next_range(1);
                let (loss, _) = slot_loss(&h2, &mut g, &pvars, &items[p], 0).unwrap();
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss).unwrap(),
                });
            }
            let loss = g.scale(total.unwrap(), 0.5);
            g.backward(loss).unwrap();
            pull_grads(&g, &pvars, &mut h2.params);
            adam.step(&mut h2.params).unwrap();
        }
        for (a, b) in h1.params.iter().zip(&h2.params) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn nn_fit_requires_warm_start_and_picks_argmin() {
        let dims = (4, 4, 4);
        let (v, pl) = setup(dims, 2, 3, 67);
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 4);
        let mut h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            17,
        );
        let protocol = TrainProtocol {
            random_iters: 3,
            nn_iters: 4,
            batch: 2,
            seed: 71,
            ..Default::default()
        };
        assert!(matches!(
            nn_fit(&mut h, &items, &protocol, None),
            Err(EnsembleError::NotWarmStarted)
        ));
        random_fit(&mut h, &items, &protocol).unwrap();
        let recs = nn_fit(&mut h, &items, &protocol, None).unwrap();
        assert_eq!(recs.len(), 8);
        let ps = replay_nn_p_draws(71, items.len(), 4, 2);
        for (r, &p) in recs.iter().zip(&ps) {
            assert_eq!(r.phase, FitPhase::Nn);
            assert_eq!(r.p, p);
            assert_eq!(r.candidates.len(), 3);
            assert_eq!(r.q, argmin_lowest(&r.candidates));
        }
    }

    #[test]
    fn nn_selection_matches_two_term_oracle() {
        // craft a prediction 0.9-confident toward member A's labels at every
        // voxel and check the argmin picks A over B by explicit comparison
        let nvox = 8;
        let c = 2;
        let a_labels: Vec<u8> = vec![0, 1, 0, 1, 1, 0, 0, 1];
        let b_labels: Vec<u8> = vec![1, 0, 0, 1, 0, 1, 0, 0];
        let mut probs = vec![0.0; c * nvox];
        for (i, &l) in a_labels.iter().enumerate() {
            probs[l as usize * nvox + i] = 0.9;
            probs[(1 - l) as usize * nvox + i] = 0.1;
        }
        let ce_a = cross_entropy_of_probs(&probs, c, &a_labels);
        let ce_b = cross_entropy_of_probs(&probs, c, &b_labels);
        // explicit: agreement voxels cost -ln(0.9), disagreements -ln(0.1)
        let disagree = a_labels.iter().zip(&b_labels).filter(|(a, b)| a != b).count();
        let want_a = -(0.9f64.ln());
        let want_b = ((nvox - disagree) as f64 * -(0.9f64.ln())
            + disagree as f64 * -(0.1f64.ln()))
            / nvox as f64;
        assert!((ce_a - want_a).abs() < 1e-12);
        assert!((ce_b - want_b).abs() < 1e-12);
        assert_eq!(argmin_lowest(&[ce_a, ce_b]), 0);
        assert_eq!(argmin_lowest(&[ce_b, ce_a]), 1);

        // exact one-hot toward version 2 of 3 -> q = 1 (zero loss minimal)
        let mut onehot = vec![0.0; c * nvox];
        for (i, &l) in b_labels.iter().enumerate() {
            onehot[l as usize * nvox + i] = 1.0;
        }
        let cands = [
            cross_entropy_of_probs(&onehot, c, &a_labels),
            cross_entropy_of_probs(&onehot, c, &b_labels),
            cross_entropy_of_probs(&onehot, c, &a_labels),
        ];
        assert_eq!(argmin_lowest(&cands), 1);
    }

    #[test]
    fn argmin_ties_break_low() {
        assert_eq!(argmin_lowest(&[1.0, 1.0, 0.5, 0.5]), 2);
        assert_eq!(argmin_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmin_lowest(&[2.0]), 0);
    }

    #[test]
    fn nn_fit_snapshot_audit_reproduces_selection() {
        let dims = (4, 4, 4);
        let (v, pl) = setup(dims, 2, 3, 73);
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 4);
        let mut h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            19,
        );
        let protocol = TrainProtocol {
            random_iters: 2,
            nn_iters: 3,
            batch: 2,
            seed: 79,
            ..Default::default()
        };
        random_fit(&mut h, &items, &protocol).unwrap();
        let dir = std::env::temp_dir().join(format!("nnfit_audit_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let recs = nn_fit(&mut h, &items, &protocol, Some(&dir)).unwrap();
        for r in &recs {
            let snap = MetaLearner::load(&dir.join(format!("nn_step_{:06}.ckpt", r.step))).unwrap();
            let it = &items[r.p];
            let mut g = Graph::new();
            let pvars = snap.load_params(&mut g);
            let (logits, _) = snap.forward_item(&mut g, &pvars, it).unwrap();
            let probs = g.softmax_values(logits);
            let cands: Vec<f64> = it
                .targets
                .iter()
                .map(|t| cross_entropy_of_probs(&probs, 2, t))
                .collect();
            assert_eq!(argmin_lowest(&cands), r.q);
            for (a, b) in cands.iter().zip(&r.candidates) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn average_ensemble_reduces_and_argmax_ties_low() {
        let dims = (3, 3, 3);
        let (_, pl) = setup(dims, 2, 1, 83);
        // m=1 identity
        let avg = average_ensemble(&pl).unwrap();
        assert_eq!(avg.probs(), pl.members[0].probs());

        // opposite one-hots -> (0.5, 0.5) everywhere, argmax class 0
        let nvox = voxel_count(dims);
        let a = ProbVolume::new(
            dims,
            (1.0, 1.0, 1.0),
            2,
            [vec![1.0; nvox], vec![0.0; nvox]].concat(),
        )
        .unwrap();
        let b = ProbVolume::new(
            dims,
            (1.0, 1.0, 1.0),
            2,
            [vec![0.0; nvox], vec![1.0; nvox]].concat(),
        )
        .unwrap();
        let pl2 = make_pseudolabels(0, vec![a, b], Reduction::Average).unwrap();
        let avg = average_ensemble(&pl2).unwrap();
        assert!(avg.probs().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(argmax_labels(&avg).labels().iter().all(|&l| l == 0));

        // m=4 oracle
        let members: Vec<ProbVolume> = (0..4).map(|j| random_probs(dims, 3, 200 + j)).collect();
        let pl4 = make_pseudolabels(0, members.clone(), Reduction::Average).unwrap();
        let avg = average_ensemble(&pl4).unwrap();
        for i in 0..nvox {
            for cls in 0..3 {
                let want: f64 = members.iter().map(|m| m.prob_at(cls, i)).sum::<f64>() / 4.0;
                assert!((avg.prob_at(cls, i) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_log_round_trips() {
        let recs = vec![
            FitRecord {
                step: 0,
                phase: FitPhase::Random,
                slot: 0,
                p: 3,
                q: 1,
                loss: 0.6931471805599453,
                lr: 5e-4,
                candidates: Vec::new(),
            },
            FitRecord {
                step: 7,
                phase: FitPhase::Nn,
                slot: 1,
                p: 0,
                q: 2,
                loss: 1.25e-3,
                lr: 4.915e-4,
                candidates: vec![0.9, 0.30000000000000004, 1.7],
            },
        ];
        let path = std::env::temp_dir().join(format!("fitlog_{}.log", std::process::id()));
        write_fit_log(&path, &recs).unwrap();
        let got = read_fit_log(&path).unwrap();
        assert_eq!(got, recs);
        std::fs::remove_file(&path).unwrap();

        let bad = std::env::temp_dir().join(format!("fitlog_bad_{}.log", std::process::id()));
        std::fs::write(&bad, "0 random 0 1\n").unwrap();
        assert!(matches!(read_fit_log(&bad), Err(EnsembleError::BadLog(_))));
        std::fs::remove_file(&bad).unwrap();
    }

    #[test]
    fn window_means_chunks() {
        let xs = [1.0, 3.0, 2.0, 4.0, 10.0];
        assert_eq!(window_means(&xs, 2), vec![2.0, 3.0]);
        assert_eq!(window_means(&xs, 5), vec![4.0]);
        assert!(window_means(&xs[..1], 2).is_empty());
    }

    #[test]
    fn meta_checkpoint_round_trip() {
        let spec = MetaLearnerSpec {
            num_classes: 3,
            summary_channels: 6,
            use_raw_image: false,
            aux_head: true,
            aux_weight: 0.25,
        };
        let mut h = MetaLearner::init(spec.clone(), 21);
        h.warm_started = true;
        let path = std::env::temp_dir().join(format!("meta_{}.ckpt", std::process::id()));
        h.save(&path).unwrap();
        let h2 = MetaLearner::load(&path).unwrap();
        assert_eq!(h2.spec, spec);
        assert!(h2.warm_started);
        assert_eq!(h2.names, h.names);
        for (a, b) in h2.params.iter().zip(&h.params) {
            assert_eq!(a.data, b.data);
            assert!(a.requires_grad);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn random_fit_loss_trends_down_on_consistent_targets() {
        // all members agree (identical one-hot-ish targets): random-fit is
        // ordinary supervised training and the loss must drop
        let dims = (6, 6, 6);
        let nvox = voxel_count(dims);
        let mut r = SplitMix64::new(91);
        let labels: Vec<u8> = (0..nvox).map(|_| r.next_range(2) as u8).collect();
        let mut probs = vec![0.0; 2 * nvox];
        for (i, &l) in labels.iter().enumerate() {
            probs[l as usize * nvox + i] = 0.95;
            probs[(1 - l) as usize * nvox + i] = 0.05;
        }
        let member = ProbVolume::new(dims, (1.0, 1.0, 1.0), 2, probs).unwrap();
        let pl =
            make_pseudolabels(0, vec![member.clone(), member.clone(), member], Reduction::Average)
                .unwrap();
        let v = random_volume(dims, 93);
        let items = items_for(&v, &pl, SupervisionSource::Pl, None, 6);
        let mut h = MetaLearner::init(
            MetaLearnerSpec { num_classes: 2, summary_channels: 2, ..Default::default() },
            23,
        );
        let protocol =
            TrainProtocol { random_iters: 60, batch: 2, seed: 97, ..Default::default() };
        let recs = random_fit(&mut h, &items, &protocol).unwrap();
        let losses: Vec<f64> = recs.iter().step_by(2).map(|r| r.loss).collect();
        let means = window_means(&losses, 20);
        assert!(
            means.last().unwrap() < means.first().unwrap(),
            "windows {means:?}"
        );
    }
}
