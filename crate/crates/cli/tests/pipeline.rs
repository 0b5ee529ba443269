//! End-to-end pipeline checks on a small experiment: artifact layout,
//! bit-identical reruns, resume after deletion, seal verification, and the
//! command line surface of the installed binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use voxstack_cli::config::ExperimentConfig;
use voxstack_cli::pipeline::{self, Manifest, RunDir, Stage};
use voxstack_cli::{report, CliError};

const SMOKE: &str = "
    seed = 11
    data.dims = 10 10 10
    data.classes = 2
    data.items = 6
    data.sphere_radius = 2 3
    data.noise_sigma = 0.25
    base.learners = xy2d vol3d
    base.iters = 30
    base.patch_3d = 8
    meta.random_iters = 20
    meta.nn_iters = 10
    meta.patch = 8
";

fn smoke_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(SMOKE).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// One completed smoke run shared by the read-only tests; tests that mutate
/// artifacts copy it first.
fn fixture() -> &'static (tempfile::TempDir, ExperimentConfig) {
    static FIX: OnceLock<(tempfile::TempDir, ExperimentConfig)> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(&dir.path().join("run_a"));
        pipeline::run_to(&cfg, Stage::Evaluate).unwrap();
        (dir, cfg)
    })
}

fn copy_tree(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.path().is_dir() {
            copy_tree(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), &to).unwrap();
        }
    }
}

fn eval_files(cfg: &ExperimentConfig, run: &RunDir) -> Vec<PathBuf> {
    pipeline::method_names(cfg, run).iter().map(|m| run.eval_csv(m)).collect()
}

#[test]
fn run_produces_expected_artifacts() {
    let (_, cfg) = fixture();
    let run = RunDir::new(&cfg.out);
    assert!(run.items_file().exists());
    for i in 0..cfg.data.items {
        assert!(run.image_path(i).exists());
        assert!(run.labels_path(i).exists());
    }
    for &id in &cfg.base.learners {
        assert!(run.base_ckpt(id).exists());
        let log = std::fs::read_to_string(run.base_log(id)).unwrap();
        assert_eq!(log.lines().count() as u64, cfg.base.iters);
        for i in 0..cfg.data.items {
            assert!(run.pseudo_path(i, id).exists());
        }
    }
    assert!(run.meta_ckpt().exists());
    assert!(run.meta_random_ckpt().exists());
    let fit = std::fs::read_to_string(run.fit_log()).unwrap();
    let slots = (cfg.meta.random_iters + cfg.meta.nn_iters) * cfg.meta.batch as u64;
    assert_eq!(fit.lines().count() as u64, slots);
    let audit = std::fs::read_to_string(run.gt_audit_path()).unwrap();
    assert_eq!(audit.lines().count(), cfg.data.items);
    for f in eval_files(cfg, &run) {
        let text = std::fs::read_to_string(&f).unwrap();
        assert!(text.lines().any(|l| l.starts_with("overall,score,")), "{}", f.display());
    }
    let manifest = Manifest::read(&run.manifest_path()).unwrap();
    assert_eq!(manifest.stages.len(), Stage::ALL.len());
    assert!(manifest.seal.is_some());
}

#[test]
fn rerun_from_scratch_is_byte_identical() {
    let (dir, cfg_a) = fixture();
    let cfg_b = smoke_config(&dir.path().join("run_b"));
    pipeline::run_to(&cfg_b, Stage::Evaluate).unwrap();
    let (ra, rb) = (RunDir::new(&cfg_a.out), RunDir::new(&cfg_b.out));
    let pairs = [
        (ra.items_file(), rb.items_file()),
        (ra.fit_log(), rb.fit_log()),
        (ra.meta_ckpt(), rb.meta_ckpt()),
        (ra.gt_audit_path(), rb.gt_audit_path()),
    ];
    let csvs_a = eval_files(cfg_a, &ra).into_iter();
    let csvs_b = eval_files(&cfg_b, &rb);
    for (a, b) in pairs.into_iter().chain(csvs_a.zip(csvs_b)) {
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{}", a.display());
    }
    let ma = Manifest::read(&ra.manifest_path()).unwrap();
    let mb = Manifest::read(&rb.manifest_path()).unwrap();
    assert_eq!(ma.seal, mb.seal);
}

#[test]
fn deleted_outputs_are_rebuilt_identically() {
    let (dir, cfg_a) = fixture();
    let mut cfg = cfg_a.clone();
    cfg.out = dir.path().join("run_resume");
    copy_tree(&cfg_a.out, &cfg.out);
    let run = RunDir::new(&cfg.out);
    let originals: Vec<(PathBuf, Vec<u8>)> = eval_files(&cfg, &run)
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    std::fs::remove_dir_all(run.root.join("eval")).unwrap();
    pipeline::run_to(&cfg, Stage::Evaluate).unwrap();
    for (path, bytes) in originals {
        assert_eq!(std::fs::read(&path).unwrap(), bytes, "{}", path.display());
    }
    let ma = Manifest::read(&RunDir::new(&cfg_a.out).manifest_path()).unwrap();
    let mr = Manifest::read(&run.manifest_path()).unwrap();
    assert_eq!(ma.seal, mr.seal);
}

#[test]
fn mismatched_config_is_rejected() {
    let (_, cfg_a) = fixture();
    let mut tweaked = cfg_a.clone();
    tweaked.seed = cfg_a.seed + 1;
    let err = pipeline::run_to(&tweaked, Stage::Generate).unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.contains("different config")), "{err}");
}

#[test]
fn report_renders_and_detects_tampering() {
    let (dir, cfg_a) = fixture();
    let md = report::report(std::slice::from_ref(&cfg_a.out), None).unwrap();
    for method in ["xy2d", "vol3d", "average", "meta_random", "meta"] {
        assert!(md.contains(&format!("| {method} |")), "missing {method} row:\n{md}");
    }

    let tampered = dir.path().join("run_tampered");
    copy_tree(&cfg_a.out, &tampered);
    let victim = RunDir::new(&tampered).eval_csv("meta");
    let mut text = std::fs::read_to_string(&victim).unwrap();
    text.push_str("extra,row\n");
    std::fs::write(&victim, text).unwrap();
    let err = report::report(&[tampered], None).unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.contains("seal mismatch")), "{err}");

    let partial = dir.path().join("run_partial");
    let cfg = smoke_config(&partial);
    pipeline::run_to(&cfg, Stage::Generate).unwrap();
    let err = report::report(&[partial], None).unwrap_err();
    assert!(matches!(err, CliError::IncompleteRun { .. }), "{err}");
}

#[test]
fn binary_surface_dispatches_and_validates() {
    let bin = env!("CARGO_BIN_EXE_voxstack");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.cfg");
    std::fs::write(&cfg_path, SMOKE).unwrap();
    let out_sub = dir.path().join("by_subcommand");
    let out_flag = dir.path().join("by_stage_flag");

    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let cfg_s = cfg_path.to_str().unwrap();

    let ok = run(&["generate", "--config", cfg_s, "--out", out_sub.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let ok = run(&["--stage", "generate", "--config", cfg_s, "--out", out_flag.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(
        std::fs::read(RunDir::new(&out_sub).items_file()).unwrap(),
        std::fs::read(RunDir::new(&out_flag).items_file()).unwrap()
    );

    let none = run(&[]);
    assert!(!none.status.success());
    assert!(String::from_utf8_lossy(&none.stderr).contains("nothing to do"));
    let bogus = run(&["--stage", "polish"]);
    assert!(!bogus.status.success());
    assert!(String::from_utf8_lossy(&bogus.stderr).contains("unknown stage"));
    let both = run(&["generate", "--stage", "generate"]);
    assert!(!both.status.success());

    let (_, cfg_a) = fixture();
    let rep = run(&["report", cfg_a.out.to_str().unwrap()]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("| meta |"));
}
