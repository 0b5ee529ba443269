//! Stage machinery: a run directory holds every artifact of one
//! experiment, each stage reads its inputs from disk and is skipped when
//! its outputs already exist, and a manifest records the config hash, the
//! seed, stage completion, and a content seal once evaluation finishes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use voxstack_core::ensemble::{
    build_meta_items, nn_fit, random_fit, write_fit_log, GtAudit, MetaLearner, MetaLearnerSpec,
    MetaSource, ProtocolSetting, TrainProtocol,
};
use voxstack_core::learners::{
    average_members, make_pseudolabels, predict, train_base, BaseLearner, BaseTrainCfg, LearnerId,
    PseudoLabelSet,
};
use voxstack_core::metrics::{
    connected_components, dice, overall_score, rand_fscore, surface_distances, ClassMetrics,
    MetricsError, RandScores,
};
use voxstack_core::rng::SplitMix64;
use voxstack_core::synthgen::{generate, split, SplitTag};
use voxstack_core::volume::{argmax_labels, LabelVolume, Volume};
use voxstack_core::vvol::{self, Vvol};

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    TrainBase,
    Predict,
    TrainMeta,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Generate,
        Stage::TrainBase,
        Stage::Predict,
        Stage::TrainMeta,
        Stage::Evaluate,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainBase => "train-base",
            Stage::Predict => "predict",
            Stage::TrainMeta => "train-meta",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Self::ALL.iter().copied().find(|st| st.tag() == s)
    }
}

fn stage_err(stage: Stage, e: impl std::fmt::Display) -> CliError {
    CliError::Stage { stage: stage.tag(), msg: e.to_string() }
}

/// Layout of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> RunDir {
        RunDir { root: root.to_path_buf() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn items_file(&self) -> PathBuf {
        self.root.join("data").join("items.txt")
    }

    pub fn item_id(idx: usize) -> String {
        format!("item_{idx:03}")
    }

    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join("data").join(format!("{}.image.vvol", Self::item_id(idx)))
    }

    pub fn labels_path(&self, idx: usize) -> PathBuf {
        self.root.join("data").join(format!("{}.labels.vvol", Self::item_id(idx)))
    }

    pub fn base_ckpt(&self, id: LearnerId) -> PathBuf {
        self.root.join("base").join(format!("{}.ckpt", id.tag()))
    }

    pub fn base_log(&self, id: LearnerId) -> PathBuf {
        self.root.join("base").join(format!("{}.train.log", id.tag()))
    }

    pub fn pseudo_path(&self, idx: usize, id: LearnerId) -> PathBuf {
        self.root
            .join("pseudo")
            .join(format!("{}.{}.vvol", Self::item_id(idx), id.tag()))
    }

    pub fn meta_ckpt(&self) -> PathBuf {
        self.root.join("meta").join("meta.ckpt")
    }

    pub fn meta_random_ckpt(&self) -> PathBuf {
        self.root.join("meta").join("meta_randomfit.ckpt")
    }

    pub fn fit_log(&self) -> PathBuf {
        self.root.join("meta").join("fit.log")
    }

    pub fn gt_audit_path(&self) -> PathBuf {
        self.root.join("meta").join("gt_audit.txt")
    }

    pub fn snapshots_dir(&self) -> PathBuf {
        self.root.join("meta").join("snapshots")
    }

    pub fn eval_csv(&self, method: &str) -> PathBuf {
        self.root.join("eval").join(format!("{method}.csv"))
    }
}

/// Completion flags plus identity; lives at `manifest.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub seal: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut m = Manifest::default();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "config_hash" => m.config_hash = v.to_string(),
                "seed" => {
                    m.seed = v
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad manifest seed {v}")))?
                }
                "stage" => m.stages.push(v.to_string()),
                "seal" => m.seal = Some(v.to_string()),
                "format" => {}
                _ => return Err(CliError::Config(format!("unknown manifest key {k}"))),
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut s = String::from("format = voxstack-run-1\n");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        for st in &self.stages {
            let _ = writeln!(s, "stage = {st}");
        }
        if let Some(seal) = &self.seal {
            let _ = writeln!(s, "seal = {seal}");
        }
        std::fs::write(path, s).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn has_stage(&self, stage: Stage) -> bool {
        self.stages.iter().any(|s| s == stage.tag())
    }

    fn mark(&mut self, stage: Stage) {
        if !self.has_stage(stage) {
            self.stages.push(stage.tag().to_string());
        }
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex(&Sha256::digest(cfg.render().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every incomplete stage up to and including `upto`.
pub fn run_to(cfg: &ExperimentConfig, upto: Stage) -> Result<(), CliError> {
    let run = RunDir::new(&cfg.out);
    std::fs::create_dir_all(&run.root)
        .map_err(|e| CliError::Config(format!("{}: {e}", run.root.display())))?;
    let hash = config_hash(cfg);

    // pin the configuration: a second invocation must bring the same one
    let snap = run.config_snapshot();
    if snap.exists() {
        let old = std::fs::read_to_string(&snap)
            .map_err(|e| CliError::Config(format!("{}: {e}", snap.display())))?;
        if old != cfg.render() {
            return Err(CliError::Config(format!(
                "run directory {} was created with a different config",
                run.root.display()
            )));
        }
    } else {
        std::fs::write(&snap, cfg.render())
            .map_err(|e| CliError::Config(format!("{}: {e}", snap.display())))?;
    }

    let mut manifest = if run.manifest_path().exists() {
        let m = Manifest::read(&run.manifest_path())?;
        if m.config_hash != hash || m.seed != cfg.seed {
            return Err(CliError::Config(format!(
                "manifest in {} does not match this config",
                run.root.display()
            )));
        }
        m
    } else {
        Manifest { config_hash: hash, seed: cfg.seed, stages: Vec::new(), seal: None }
    };

    for stage in Stage::ALL {
        if stage > upto {
            break;
        }
        if manifest.has_stage(stage) && outputs_exist(cfg, &run, stage) {
            continue;
        }
        match stage {
            Stage::Generate => stage_generate(cfg, &run)?,
            Stage::TrainBase => stage_train_base(cfg, &run)?,
            Stage::Predict => stage_predict(cfg, &run)?,
            Stage::TrainMeta => stage_train_meta(cfg, &run)?,
            Stage::Evaluate => stage_evaluate(cfg, &run)?,
        }
        manifest.mark(stage);
        if stage == Stage::Evaluate {
            manifest.seal = Some(content_seal(&run)?);
        }
        manifest.write(&run.manifest_path())?;
    }
    Ok(())
}

fn outputs_exist(cfg: &ExperimentConfig, run: &RunDir, stage: Stage) -> bool {
    match stage {
        Stage::Generate => {
            run.items_file().exists()
                && (0..cfg.data.items)
                    .all(|i| run.image_path(i).exists() && run.labels_path(i).exists())
        }
        Stage::TrainBase => cfg
            .base
            .learners
            .iter()
            .all(|&l| run.base_ckpt(l).exists() && run.base_log(l).exists()),
        Stage::Predict => (0..cfg.data.items)
            .all(|i| cfg.base.learners.iter().all(|&l| run.pseudo_path(i, l).exists())),
        Stage::TrainMeta => {
            run.meta_ckpt().exists()
                && run.meta_random_ckpt().exists()
                && run.fit_log().exists()
                && run.gt_audit_path().exists()
        }
        Stage::Evaluate => method_names(cfg, run)
            .iter()
            .all(|m| run.eval_csv(m).exists()),
    }
}

/// Evaluation methods in report order.
pub fn method_names(cfg: &ExperimentConfig, run: &RunDir) -> Vec<String> {
    let mut names: Vec<String> = enabled_learners(cfg).iter().map(|l| l.tag().to_string()).collect();
    names.push("average".to_string());
    if cfg.meta.nn_iters > 0 || run.meta_random_ckpt().exists() {
        names.push("meta_random".to_string());
    }
    names.push("meta".to_string());
    names
}

/// Enabled learners in canonical order; member order everywhere.
fn enabled_learners(cfg: &ExperimentConfig) -> Vec<LearnerId> {
    LearnerId::ALL
        .iter()
        .copied()
        .filter(|l| cfg.base.learners.contains(l))
        .collect()
}

fn read_items(run: &RunDir) -> Result<Vec<SplitTag>, CliError> {
    let path = run.items_file();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut tags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or("");
        let tag = parts.next().and_then(SplitTag::parse);
        match (id == RunDir::item_id(i), tag) {
            (true, Some(t)) => tags.push(t),
            _ => return Err(CliError::Config(format!("{}: bad line {}", path.display(), i + 1))),
        }
    }
    Ok(tags)
}

fn stage_generate(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let st = Stage::Generate;
    let err = |e: &dyn std::fmt::Display| stage_err(st, e);
    std::fs::create_dir_all(run.root.join("data")).map_err(|e| err(&e))?;
    let ds = generate(&cfg.synth_spec(), cfg.data.items).map_err(|e| err(&e))?;
    let ds = split(ds, &cfg.split_policy()).map_err(|e| err(&e))?;
    let mut listing = String::new();
    for (i, item) in ds.items.iter().enumerate() {
        let _ = writeln!(listing, "{} {}", RunDir::item_id(i), item.tag.tag());
        vvol::save(&run.image_path(i), &Vvol::Scalar(item.image.clone())).map_err(|e| err(&e))?;
        vvol::save(&run.labels_path(i), &Vvol::Labels(item.labels.clone()))
            .map_err(|e| err(&e))?;
    }
    std::fs::write(run.items_file(), listing).map_err(|e| err(&e))?;
    Ok(())
}

fn load_image(run: &RunDir, idx: usize, st: Stage) -> Result<Volume, CliError> {
    vvol::load_volume(&run.image_path(idx)).map_err(|e| stage_err(st, e))
}

fn load_gt(run: &RunDir, idx: usize, st: Stage) -> Result<LabelVolume, CliError> {
    vvol::load_labels(&run.labels_path(idx)).map_err(|e| stage_err(st, e))
}

fn stage_train_base(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let st = Stage::TrainBase;
    std::fs::create_dir_all(run.root.join("base")).map_err(|e| stage_err(st, e))?;
    let tags = read_items(run)?;
    let labeled: Vec<usize> = (0..tags.len())
        .filter(|&i| tags[i] == SplitTag::TrainLabeled)
        .collect();
    let mut volumes = Vec::new();
    for &i in &labeled {
        volumes.push((load_image(run, i, st)?, load_gt(run, i, st)?));
    }
    let items: Vec<(&Volume, &LabelVolume)> = volumes.iter().map(|(v, l)| (v, l)).collect();
    let base_seed = cfg.base_seed();
    for &id in &enabled_learners(cfg) {
        let init_seed = SplitMix64::derive(base_seed, 100 + id as u64).next_u64();
        let mut learner = BaseLearner::init(id, cfg.data.classes, init_seed);
        let train_cfg = BaseTrainCfg {
            iters: if id == LearnerId::Vol3d { cfg.iters_3d() } else { cfg.base.iters },
            batch_2d: cfg.base.batch_2d,
            batch_3d: cfg.base.batch_3d,
            patch_3d: cfg.base.patch_3d,
            base_lr: cfg.base.lr,
            lr_power: 0.9,
            augment: cfg.base.augment,
            seed: base_seed,
        };
        let trace = train_base(&mut learner, &items, &train_cfg).map_err(|e| stage_err(st, e))?;
        learner.save(&run.base_ckpt(id)).map_err(|e| stage_err(st, e))?;
        let mut log = String::new();
        for r in &trace {
            let _ = writeln!(log, "{} {:?} {:?}", r.step, r.loss, r.lr);
        }
        std::fs::write(run.base_log(id), log).map_err(|e| stage_err(st, e))?;
    }
    Ok(())
}

fn stage_predict(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let st = Stage::Predict;
    std::fs::create_dir_all(run.root.join("pseudo")).map_err(|e| stage_err(st, e))?;
    let tags = read_items(run)?;
    for &id in &enabled_learners(cfg) {
        let learner = BaseLearner::load(&run.base_ckpt(id)).map_err(|e| stage_err(st, e))?;
        for i in 0..tags.len() {
            let image = load_image(run, i, st)?;
            let probs = predict(&learner, &image, cfg.pseudo.tile).map_err(|e| stage_err(st, e))?;
            vvol::save(&run.pseudo_path(i, id), &Vvol::Probs(probs))
                .map_err(|e| stage_err(st, e))?;
        }
    }
    Ok(())
}

fn load_pseudolabels(
    cfg: &ExperimentConfig,
    run: &RunDir,
    idx: usize,
    st: Stage,
) -> Result<PseudoLabelSet, CliError> {
    let mut members = Vec::new();
    for &id in &enabled_learners(cfg) {
        members.push(vvol::load_probs(&run.pseudo_path(idx, id)).map_err(|e| stage_err(st, e))?);
    }
    make_pseudolabels(idx, members, cfg.pseudo.reduction).map_err(|e| stage_err(st, e))
}

fn stage_train_meta(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let st = Stage::TrainMeta;
    std::fs::create_dir_all(run.root.join("meta")).map_err(|e| stage_err(st, e))?;
    let tags = read_items(run)?;
    let in_training = |tag: SplitTag| match cfg.meta.setting {
        ProtocolSetting::OnlyTrainingData => tag == SplitTag::TrainLabeled,
        ProtocolSetting::SemiSupervised => tag != SplitTag::Test,
        ProtocolSetting::Transductive => true,
    };
    let picked: Vec<usize> = (0..tags.len()).filter(|&i| in_training(tags[i])).collect();

    let mut images = Vec::new();
    let mut pls = Vec::new();
    // ground truth is opened only for labeled training items; unlabeled and
    // test label files stay untouched during this stage
    let mut gts: BTreeMap<usize, LabelVolume> = BTreeMap::new();
    for &i in &picked {
        images.push(load_image(run, i, st)?);
        pls.push(load_pseudolabels(cfg, run, i, st)?);
        if tags[i] == SplitTag::TrainLabeled {
            gts.insert(i, load_gt(run, i, st)?);
        }
    }
    let sources: Vec<MetaSource> = picked
        .iter()
        .enumerate()
        .map(|(k, &i)| MetaSource {
            item: i,
            image: &images[k],
            pl: &pls[k],
            gt: gts.get(&i),
            labeled: tags[i] == SplitTag::TrainLabeled,
        })
        .collect();

    let mut audit = GtAudit::default();
    let meta_items = build_meta_items(&sources, cfg.meta.supervision, cfg.meta.patch, &mut audit)
        .map_err(|e| stage_err(st, e))?;

    let spec = MetaLearnerSpec {
        num_classes: cfg.data.classes,
        summary_channels: cfg.summary_channels(),
        use_raw_image: cfg.meta.use_raw_image,
        aux_head: cfg.meta.aux_head,
        aux_weight: cfg.meta.aux_weight,
    };
    let meta_seed = cfg.meta_seed();
    let mut h = MetaLearner::init(spec, SplitMix64::derive(meta_seed, 1).next_u64());
    let protocol = TrainProtocol {
        setting: cfg.meta.setting,
        random_iters: cfg.meta.random_iters,
        nn_iters: cfg.meta.nn_iters,
        batch: cfg.meta.batch,
        base_lr: cfg.meta.lr,
        lr_power: 0.9,
        seed: meta_seed,
    };
    let mut records = random_fit(&mut h, &meta_items, &protocol).map_err(|e| stage_err(st, e))?;
    h.save(&run.meta_random_ckpt()).map_err(|e| stage_err(st, e))?;
    if cfg.meta.nn_iters > 0 {
        let snap_dir = if cfg.meta.audit_snapshots {
            std::fs::create_dir_all(run.snapshots_dir()).map_err(|e| stage_err(st, e))?;
            Some(run.snapshots_dir())
        } else {
            None
        };
        let nn_protocol = TrainProtocol { base_lr: cfg.nn_lr(), ..protocol };
        let nn_records = nn_fit(&mut h, &meta_items, &nn_protocol, snap_dir.as_deref())
            .map_err(|e| stage_err(st, e))?;
        records.extend(nn_records);
    }
    h.save(&run.meta_ckpt()).map_err(|e| stage_err(st, e))?;
    write_fit_log(&run.fit_log(), &records).map_err(|e| stage_err(st, e))?;

    let mut audit_text = String::new();
    for (i, tag) in tags.iter().enumerate() {
        let _ = writeln!(
            audit_text,
            "{} {} reads={}",
            RunDir::item_id(i),
            tag.tag(),
            audit.reads_of(i)
        );
    }
    std::fs::write(run.gt_audit_path(), audit_text).map_err(|e| stage_err(st, e))?;
    Ok(())
}

/// Per-item evaluation with a vanished-surface status instead of an abort:
/// Dice is always computable; missing surfaces leave NaN distances and a
/// status note in the CSV.
struct ItemEval {
    item: usize,
    per_class: Vec<(ClassMetrics, &'static str)>,
    rand: Option<RandScores>,
}

fn eval_item(
    pred: &LabelVolume,
    gt: &LabelVolume,
    classes: usize,
    with_rand: bool,
    exclude_background: bool,
    item: usize,
) -> Result<ItemEval, MetricsError> {
    let mut per_class = Vec::new();
    for class in 1..classes as u8 {
        let d = dice(pred, gt, class)?;
        let (adb_mm, hausdorff_mm, status) = match surface_distances(pred, gt, class) {
            Ok((a, h)) => (a, h, "ok"),
            Err(MetricsError::EmptySurface { which: "prediction", .. }) => {
                (f64::NAN, f64::NAN, "empty_pred_surface")
            }
            Err(MetricsError::EmptySurface { .. }) => (f64::NAN, f64::NAN, "empty_gt_surface"),
            Err(e) => return Err(e),
        };
        per_class.push((ClassMetrics { class, dice: d, adb_mm, hausdorff_mm }, status));
    }
    let rand = if with_rand {
        let pp = connected_components(pred, exclude_background);
        let gp = connected_components(gt, exclude_background);
        Some(rand_fscore(&pp, &gp, exclude_background)?)
    } else {
        None
    };
    Ok(ItemEval { item, per_class, rand })
}

fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

/// Renders one method's evaluation CSV. Schema:
/// `item,class,dice,adb_mm,hausdorff_mm[,rand_merge,rand_split,rand_fscore],status`
/// with per-item rows, per-class `mean` rows, and a final
/// `overall,score,...` row carrying the summary score.
fn render_eval_csv(evals: &[ItemEval], classes: usize, with_rand: bool) -> String {
    let mut s = String::new();
    s.push_str("# adb = mean of the two directed mean surface distances (mm); hausdorff = symmetric max (mm)\n");
    s.push_str("# score = sum over classes of dice/2 - adb/4 - hausdorff/30\n");
    let rand_cols = if with_rand { ",rand_merge,rand_split,rand_fscore" } else { "" };
    let _ = writeln!(s, "item,class,dice,adb_mm,hausdorff_mm{rand_cols},status");
    let rand_cells = |r: Option<&RandScores>| -> String {
        if !with_rand {
            return String::new();
        }
        match r {
            Some(r) => format!(",{},{},{}", fmt_f(r.merge), fmt_f(r.split), fmt_f(r.fscore)),
            None => ",,,".to_string(),
        }
    };
    for e in evals {
        for (m, status) in &e.per_class {
            let _ = writeln!(
                s,
                "{},{},{},{},{}{},{}",
                RunDir::item_id(e.item),
                m.class,
                fmt_f(m.dice),
                fmt_f(m.adb_mm),
                fmt_f(m.hausdorff_mm),
                rand_cells(e.rand.as_ref()),
                status
            );
        }
    }
    // per-class means over items, then the overall score of those means
    let mut mean_class = Vec::new();
    for ci in 0..classes - 1 {
        let n = evals.len() as f64;
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            evals.iter().map(|e| f(&e.per_class[ci].0)).sum::<f64>() / n
        };
        let m = ClassMetrics {
            class: (ci + 1) as u8,
            dice: mean(&|m| m.dice),
            adb_mm: mean(&|m| m.adb_mm),
            hausdorff_mm: mean(&|m| m.hausdorff_mm),
        };
        let rand_mean = if with_rand {
            let avg = |f: &dyn Fn(&RandScores) -> f64| {
                evals.iter().map(|e| f(e.rand.as_ref().expect("rand enabled"))).sum::<f64>() / n
            };
            format!(
                ",{},{},{}",
                fmt_f(avg(&|r| r.merge)),
                fmt_f(avg(&|r| r.split)),
                fmt_f(avg(&|r| r.fscore))
            )
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "mean,{},{},{},{}{},ok",
            m.class,
            fmt_f(m.dice),
            fmt_f(m.adb_mm),
            fmt_f(m.hausdorff_mm),
            rand_mean
        );
        mean_class.push(m);
    }
    let score = overall_score(&mean_class);
    let pad = if with_rand { ",,," } else { "" };
    let _ = writeln!(s, "overall,score,{},,{pad},ok", fmt_f(score));
    s
}

fn stage_evaluate(cfg: &ExperimentConfig, run: &RunDir) -> Result<(), CliError> {
    let st = Stage::Evaluate;
    std::fs::create_dir_all(run.root.join("eval")).map_err(|e| stage_err(st, e))?;
    let tags = read_items(run)?;
    let test_items: Vec<usize> =
        (0..tags.len()).filter(|&i| tags[i] == SplitTag::Test).collect();
    if test_items.is_empty() {
        return Err(stage_err(st, "no test items to evaluate"));
    }
    let classes = cfg.data.classes;
    let learners = enabled_learners(cfg);

    // every method's prediction per test item, in method order
    let mut gt = Vec::new();
    let mut pls = Vec::new();
    let mut images = Vec::new();
    for &i in &test_items {
        gt.push(load_gt(run, i, st)?);
        pls.push(load_pseudolabels(cfg, run, i, st)?);
        images.push(load_image(run, i, st)?);
    }

    let meta_pred = |ckpt: PathBuf| -> Result<Vec<LabelVolume>, CliError> {
        let h = MetaLearner::load(&ckpt).map_err(|e| stage_err(st, e))?;
        let mut preds = Vec::new();
        for (k, _) in test_items.iter().enumerate() {
            let (probs, _) = voxstack_core::ensemble::meta_forward(&h, &images[k], &pls[k].summary)
                .map_err(|e| stage_err(st, e))?;
            preds.push(argmax_labels(&probs));
        }
        Ok(preds)
    };

    for method in method_names(cfg, run) {
        let preds: Vec<LabelVolume> = match method.as_str() {
            "average" => pls
                .iter()
                .map(|pl| {
                    average_members(&pl.members)
                        .map(|p| argmax_labels(&p))
                        .map_err(|e| stage_err(st, e))
                })
                .collect::<Result<_, _>>()?,
            "meta_random" => meta_pred(run.meta_random_ckpt())?,
            "meta" => meta_pred(run.meta_ckpt())?,
            tag => {
                let id = LearnerId::parse(tag).expect("method is a learner tag");
                assert!(learners.contains(&id));
                let mut preds = Vec::new();
                for &i in &test_items {
                    let probs =
                        vvol::load_probs(&run.pseudo_path(i, id)).map_err(|e| stage_err(st, e))?;
                    preds.push(argmax_labels(&probs));
                }
                preds
            }
        };
        let mut evals = Vec::new();
        for (k, &i) in test_items.iter().enumerate() {
            evals.push(
                eval_item(
                    &preds[k],
                    &gt[k],
                    classes,
                    cfg.eval.rand,
                    cfg.eval.exclude_background,
                    i,
                )
                .map_err(|e| stage_err(st, e))?,
            );
        }
        let csv = render_eval_csv(&evals, classes, cfg.eval.rand);
        std::fs::write(run.eval_csv(&method), csv).map_err(|e| stage_err(st, e))?;
    }
    Ok(())
}

/// Digest over every artifact in the run directory except the manifest
/// itself: sorted relative paths, each hashed, then the listing hashed.
pub fn content_seal(run: &RunDir) -> Result<String, CliError> {
    let mut files = Vec::new();
    collect_files(&run.root, &run.root, &mut files)
        .map_err(|e| CliError::Config(format!("sealing {}: {e}", run.root.display())))?;
    files.sort();
    let mut listing = String::new();
    for rel in &files {
        if rel == "manifest.txt" {
            continue;
        }
        let bytes = std::fs::read(run.root.join(rel))
            .map_err(|e| CliError::Config(format!("sealing {rel}: {e}")))?;
        let _ = writeln!(listing, "{rel} {}", hex(&Sha256::digest(&bytes)));
    }
    Ok(hex(&Sha256::digest(listing.as_bytes())))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("path under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}
