//! Flat `key = value` experiment configuration.
//!
//! One option per line, `#` starts a comment, keys are dotted section
//! paths, list values are whitespace-separated. Every key has a default, so
//! the empty file is a valid (small) experiment; unknown or duplicate keys
//! are errors so typos cannot silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use voxstack_core::ensemble::{ProtocolSetting, SupervisionSource};
use voxstack_core::learners::{LearnerId, Reduction, TileCfg};
use voxstack_core::rng::SplitMix64;
use voxstack_core::synthgen::{ShapeRange, SplitPolicy, SynthSpec};

use crate::CliError;

/// Master-seed streams for the per-stage sub-seeds.
const SEED_DATA: u64 = 0x64617461; // "data"
const SEED_SPLIT: u64 = 0x73706c74; // "splt"
const SEED_BASE: u64 = 0x62617365; // "base"
const SEED_META: u64 = 0x6d657461; // "meta"

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub classes: usize,
    pub items: usize,
    pub sphere_count: (usize, usize),
    pub sphere_radius: (f64, f64),
    pub tube_count: (usize, usize),
    pub tube_radius: (f64, f64),
    pub diagonal_tubes: bool,
    pub noise_sigma: f64,
    pub intensity_means: Vec<f64>,
    /// labeled / unlabeled / test fractions, summing to 1.
    pub split: (f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseConfig {
    pub learners: Vec<LearnerId>,
    pub iters: u64,
    /// Steps for the volumetric learner; 0 inherits `iters`. The 3D net sees
    /// far fewer voxels per step than the plane nets, so it often wants more.
    pub iters_3d: u64,
    pub batch_2d: usize,
    pub batch_3d: usize,
    pub patch_3d: usize,
    pub augment: bool,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoConfig {
    pub reduction: Reduction,
    pub tile: TileCfg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub use_raw_image: bool,
    pub aux_head: bool,
    pub aux_weight: f64,
    pub supervision: SupervisionSource,
    pub setting: ProtocolSetting,
    pub random_iters: u64,
    pub nn_iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub audit_snapshots: bool,
    pub lr: f64,
    /// Learning rate for the nn-fit phase; 0 inherits `lr`. A gentler second
    /// phase keeps the self-selected targets from overwriting the random-fit
    /// solution.
    pub nn_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub rand: bool,
    pub exclude_background: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub base: BaseConfig,
    pub pseudo: PseudoConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("run"),
            data: DataConfig {
                dims: (16, 16, 16),
                spacing: (1.0, 1.0, 1.0),
                classes: 2,
                items: 8,
                sphere_count: (1, 2),
                sphere_radius: (3.0, 5.0),
                tube_count: (0, 0),
                tube_radius: (1.0, 2.0),
                diagonal_tubes: false,
                noise_sigma: 0.3,
                intensity_means: vec![0.0, 1.0],
                split: (0.25, 0.375, 0.375),
            },
            base: BaseConfig {
                learners: LearnerId::ALL.to_vec(),
                iters: 100,
                iters_3d: 0,
                batch_2d: 8,
                batch_3d: 2,
                patch_3d: 12,
                augment: true,
                lr: 5e-4,
            },
            pseudo: PseudoConfig {
                reduction: Reduction::Average,
                tile: TileCfg { patch: 32, stride: 16 },
            },
            meta: MetaConfig {
                use_raw_image: true,
                aux_head: false,
                aux_weight: 0.3,
                supervision: SupervisionSource::Pl,
                setting: ProtocolSetting::OnlyTrainingData,
                random_iters: 100,
                nn_iters: 50,
                batch: 2,
                patch: 12,
                audit_snapshots: false,
                lr: 5e-4,
                nn_lr: 0.0,
            },
            eval: EvalConfig { rand: true, exclude_background: true },
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| CliError::Config(format!("line {}: {m}", ln + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value".into()))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key {key}")));
            }
            cfg.apply(key, value).map_err(|m| bad(m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn one<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v}"))
        }
        fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
            v.split_whitespace().map(|t| one(t)).collect()
        }
        fn pair<T: std::str::FromStr + Copy>(v: &str) -> Result<(T, T), String> {
            let xs = list::<T>(v)?;
            match xs[..] {
                [a] => Ok((a, a)),
                [a, b] => Ok((a, b)),
                _ => Err(format!("expected 1 or 2 values, got {}", xs.len())),
            }
        }
        fn triple<T: std::str::FromStr + Copy>(v: &str) -> Result<(T, T, T), String> {
            let xs = list::<T>(v)?;
            match xs[..] {
                [a] => Ok((a, a, a)),
                [a, b, c] => Ok((a, b, c)),
                _ => Err(format!("expected 1 or 3 values, got {}", xs.len())),
            }
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("bad flag {v}")),
            }
        }
        match key {
            "seed" => self.seed = one(value)?,
            "out" => self.out = PathBuf::from(value),
            "data.dims" => self.data.dims = triple(value)?,
            "data.spacing" => self.data.spacing = triple(value)?,
            "data.classes" => self.data.classes = one(value)?,
            "data.items" => self.data.items = one(value)?,
            "data.sphere_count" => self.data.sphere_count = pair(value)?,
            "data.sphere_radius" => self.data.sphere_radius = pair(value)?,
            "data.tube_count" => self.data.tube_count = pair(value)?,
            "data.tube_radius" => self.data.tube_radius = pair(value)?,
            "data.diagonal_tubes" => self.data.diagonal_tubes = flag(value)?,
            "data.noise_sigma" => self.data.noise_sigma = one(value)?,
            "data.intensity_means" => self.data.intensity_means = list(value)?,
            "data.split" => {
                self.data.split = match list::<f64>(value)?[..] {
                    [a, b, c] => (a, b, c),
                    ref xs => return Err(format!("expected 3 fractions, got {}", xs.len())),
                }
            }
            "base.learners" => {
                let ids: Option<Vec<LearnerId>> =
                    value.split_whitespace().map(LearnerId::parse).collect();
                self.base.learners = ids.ok_or_else(|| format!("bad learner list {value}"))?;
            }
            "base.iters" => self.base.iters = one(value)?,
            "base.iters_3d" => self.base.iters_3d = one(value)?,
            "base.batch_2d" => self.base.batch_2d = one(value)?,
            "base.batch_3d" => self.base.batch_3d = one(value)?,
            "base.patch_3d" => self.base.patch_3d = one(value)?,
            "base.augment" => self.base.augment = flag(value)?,
            "base.lr" => self.base.lr = one(value)?,
            "pseudo.reduction" => {
                self.pseudo.reduction =
                    Reduction::parse(value).ok_or_else(|| format!("bad reduction {value}"))?
            }
            "pseudo.tile_patch" => self.pseudo.tile.patch = one(value)?,
            "pseudo.tile_stride" => self.pseudo.tile.stride = one(value)?,
            "meta.use_raw_image" => self.meta.use_raw_image = flag(value)?,
            "meta.aux_head" => self.meta.aux_head = flag(value)?,
            "meta.aux_weight" => self.meta.aux_weight = one(value)?,
            "meta.supervision" => {
                self.meta.supervision = SupervisionSource::parse(value)
                    .ok_or_else(|| format!("bad supervision {value}"))?
            }
            "meta.setting" => {
                self.meta.setting = ProtocolSetting::parse(value)
                    .ok_or_else(|| format!("bad setting {value}"))?
            }
            "meta.random_iters" => self.meta.random_iters = one(value)?,
            "meta.nn_iters" => self.meta.nn_iters = one(value)?,
            "meta.batch" => self.meta.batch = one(value)?,
            "meta.patch" => self.meta.patch = one(value)?,
            "meta.audit_snapshots" => self.meta.audit_snapshots = flag(value)?,
            "meta.lr" => self.meta.lr = one(value)?,
            "meta.nn_lr" => self.meta.nn_lr = one(value)?,
            "eval.rand" => self.eval.rand = flag(value)?,
            "eval.exclude_background" => self.eval.exclude_background = flag(value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.base.learners.is_empty() {
            return err("base.learners must name at least one learner".into());
        }
        let mut seen = BTreeSet::new();
        for l in &self.base.learners {
            if !seen.insert(l.tag()) {
                return err(format!("duplicate learner {}", l.tag()));
            }
        }
        if self.data.intensity_means.len() != self.data.classes {
            return err(format!(
                "{} intensity means for {} classes",
                self.data.intensity_means.len(),
                self.data.classes
            ));
        }
        let (a, b, c) = self.data.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return err(format!("data.split fractions {a} {b} {c} must sum to 1"));
        }
        if self.data.items == 0 {
            return err("data.items must be positive".into());
        }
        if self.base.batch_2d == 0 || self.base.batch_3d == 0 || self.meta.batch == 0 {
            return err("batch sizes must be positive".into());
        }
        if self.meta.patch == 0 || self.base.patch_3d == 0 {
            return err("patch sizes must be positive".into());
        }
        if self.pseudo.tile.patch == 0 || self.pseudo.tile.stride == 0 {
            return err("tile patch and stride must be positive".into());
        }
        if !(self.meta.aux_weight.is_finite() && self.meta.aux_weight >= 0.0) {
            return err(format!("meta.aux_weight {} invalid", self.meta.aux_weight));
        }
        if !(self.base.lr > 0.0 && self.meta.lr > 0.0) {
            return err("learning rates must be positive".into());
        }
        if !(self.meta.nn_lr.is_finite() && self.meta.nn_lr >= 0.0) {
            return err(format!("meta.nn_lr {} invalid", self.meta.nn_lr));
        }
        self.synth_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            dims: self.data.dims,
            spacing: self.data.spacing,
            num_classes: self.data.classes,
            spheres: ShapeRange { count: self.data.sphere_count, radius: self.data.sphere_radius },
            tubes: ShapeRange { count: self.data.tube_count, radius: self.data.tube_radius },
            diagonal_tubes: self.data.diagonal_tubes,
            noise_sigma: self.data.noise_sigma,
            intensity_means: self.data.intensity_means.clone(),
            seed: SplitMix64::derive(self.seed, SEED_DATA).next_u64(),
        }
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            frac_labeled: self.data.split.0,
            frac_unlabeled: self.data.split.1,
            frac_test: self.data.split.2,
            seed: SplitMix64::derive(self.seed, SEED_SPLIT).next_u64(),
        }
    }

    pub fn base_seed(&self) -> u64 {
        SplitMix64::derive(self.seed, SEED_BASE).next_u64()
    }

    pub fn meta_seed(&self) -> u64 {
        SplitMix64::derive(self.seed, SEED_META).next_u64()
    }

    pub fn iters_3d(&self) -> u64 {
        if self.base.iters_3d == 0 { self.base.iters } else { self.base.iters_3d }
    }

    pub fn nn_lr(&self) -> f64 {
        if self.meta.nn_lr == 0.0 { self.meta.lr } else { self.meta.nn_lr }
    }

    /// Class count the summary branch sees under the configured reduction.
    pub fn summary_channels(&self) -> usize {
        match self.pseudo.reduction {
            Reduction::Average => self.data.classes,
            Reduction::Concat => self.base.learners.len() * self.data.classes,
        }
    }

    /// Canonical rendering: every key, fixed order. The config hash and the
    /// snapshot stored in the run directory both come from this. The run
    /// location is deliberately omitted: two runs of the same experiment
    /// into different directories must hash alike.
    pub fn render(&self) -> String {
        let f = |x: f64| format!("{x:?}");
        let fl = |xs: &[f64]| xs.iter().map(|&x| f(x)).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        let d = &self.data;
        kv("data.dims", format!("{} {} {}", d.dims.0, d.dims.1, d.dims.2));
        kv("data.spacing", fl(&[d.spacing.0, d.spacing.1, d.spacing.2]));
        kv("data.classes", d.classes.to_string());
        kv("data.items", d.items.to_string());
        kv("data.sphere_count", format!("{} {}", d.sphere_count.0, d.sphere_count.1));
        kv("data.sphere_radius", fl(&[d.sphere_radius.0, d.sphere_radius.1]));
        kv("data.tube_count", format!("{} {}", d.tube_count.0, d.tube_count.1));
        kv("data.tube_radius", fl(&[d.tube_radius.0, d.tube_radius.1]));
        kv("data.diagonal_tubes", d.diagonal_tubes.to_string());
        kv("data.noise_sigma", f(d.noise_sigma));
        kv("data.intensity_means", fl(&d.intensity_means));
        kv("data.split", fl(&[d.split.0, d.split.1, d.split.2]));
        let b = &self.base;
        kv(
            "base.learners",
            b.learners.iter().map(|l| l.tag()).collect::<Vec<_>>().join(" "),
        );
        kv("base.iters", b.iters.to_string());
        kv("base.iters_3d", b.iters_3d.to_string());
        kv("base.batch_2d", b.batch_2d.to_string());
        kv("base.batch_3d", b.batch_3d.to_string());
        kv("base.patch_3d", b.patch_3d.to_string());
        kv("base.augment", b.augment.to_string());
        kv("base.lr", f(b.lr));
        kv("pseudo.reduction", self.pseudo.reduction.tag().to_string());
        kv("pseudo.tile_patch", self.pseudo.tile.patch.to_string());
        kv("pseudo.tile_stride", self.pseudo.tile.stride.to_string());
        let m = &self.meta;
        kv("meta.use_raw_image", m.use_raw_image.to_string());
        kv("meta.aux_head", m.aux_head.to_string());
        kv("meta.aux_weight", f(m.aux_weight));
        kv("meta.supervision", m.supervision.tag().to_string());
        kv("meta.setting", m.setting.tag().to_string());
        kv("meta.random_iters", m.random_iters.to_string());
        kv("meta.nn_iters", m.nn_iters.to_string());
        kv("meta.batch", m.batch.to_string());
        kv("meta.patch", m.patch.to_string());
        kv("meta.audit_snapshots", m.audit_snapshots.to_string());
        kv("meta.lr", f(m.lr));
        kv("meta.nn_lr", f(m.nn_lr));
        kv("eval.rand", self.eval.rand.to_string());
        kv("eval.exclude_background", self.eval.exclude_background.to_string());
        s
    }
}
