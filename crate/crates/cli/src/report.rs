//! Cross-run comparison. Reads the evaluation CSVs of one or more sealed
//! run directories and renders a side-by-side table, one row per
//! run and method, refusing runs whose artifacts changed after sealing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::pipeline::{self, Manifest, RunDir, Stage};
use crate::CliError;

#[derive(Clone, Debug)]
pub struct MethodRow {
    pub run: String,
    pub method: String,
    pub dice: f64,
    pub adb_mm: f64,
    pub hausdorff_mm: f64,
    pub rand_fscore: Option<f64>,
    pub score: f64,
}

fn run_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Mean foreground metrics of one method CSV: class means averaged over
/// classes, plus the overall score row.
fn read_method_csv(path: &Path) -> Result<(f64, f64, f64, Option<f64>, f64), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut header: Option<Vec<String>> = None;
    let mut means: Vec<Vec<String>> = Vec::new();
    let mut overall: Option<f64> = None;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|c| c.to_string()).collect();
        if header.is_none() {
            header = Some(cells);
            continue;
        }
        match cells[0].as_str() {
            "mean" => means.push(cells),
            "overall" => {
                overall = Some(cells[2].parse().map_err(|_| {
                    CliError::Config(format!("{}: bad overall score", path.display()))
                })?)
            }
            _ => {}
        }
    }
    let header = header.ok_or_else(|| {
        CliError::Config(format!("{}: missing header row", path.display()))
    })?;
    if means.is_empty() || overall.is_none() {
        return Err(CliError::Config(format!("{}: missing summary rows", path.display())));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| CliError::Config(format!("{}: no column {name}", path.display())))
    };
    let (ci_dice, ci_adb, ci_hd) = (need("dice")?, need("adb_mm")?, need("hausdorff_mm")?);
    let ci_rand = col("rand_fscore");
    let avg = |ci: usize| -> Result<f64, CliError> {
        let mut sum = 0.0;
        for row in &means {
            sum += row[ci].parse::<f64>().map_err(|_| {
                CliError::Config(format!("{}: bad number in mean row", path.display()))
            })?;
        }
        Ok(sum / means.len() as f64)
    };
    let rand = match ci_rand {
        Some(ci) => Some(avg(ci)?),
        None => None,
    };
    Ok((avg(ci_dice)?, avg(ci_adb)?, avg(ci_hd)?, rand, overall.unwrap()))
}

/// Loads one sealed run: verifies the manifest covers evaluation and the
/// content seal still matches what is on disk.
pub fn load_run(path: &Path) -> Result<Vec<MethodRow>, CliError> {
    let run = RunDir::new(path);
    let name = run_name(path);
    if !run.manifest_path().exists() {
        return Err(CliError::IncompleteRun { run: name, what: "manifest.txt".to_string() });
    }
    let manifest = Manifest::read(&run.manifest_path())?;
    if !manifest.stages.iter().any(|s| s == Stage::Evaluate.tag()) {
        return Err(CliError::IncompleteRun { run: name, what: "evaluate stage".to_string() });
    }
    let Some(seal) = &manifest.seal else {
        return Err(CliError::IncompleteRun { run: name, what: "content seal".to_string() });
    };
    let now = pipeline::content_seal(&run)?;
    if &now != seal {
        return Err(CliError::Config(format!(
            "run {name}: artifacts changed after evaluation (seal mismatch)"
        )));
    }
    let cfg_text = std::fs::read_to_string(run.config_snapshot())
        .map_err(|e| CliError::Config(format!("{}: {e}", run.config_snapshot().display())))?;
    let cfg = ExperimentConfig::parse(&cfg_text)?;
    let mut rows = Vec::new();
    for method in pipeline::method_names(&cfg, &run) {
        let csv = run.eval_csv(&method);
        if !csv.exists() {
            return Err(CliError::IncompleteRun { run: name, what: format!("eval/{method}.csv") });
        }
        let (dice, adb_mm, hausdorff_mm, rand_fscore, score) = read_method_csv(&csv)?;
        rows.push(MethodRow {
            run: name.clone(),
            method,
            dice,
            adb_mm,
            hausdorff_mm,
            rand_fscore,
            score,
        });
    }
    Ok(rows)
}

fn fmt_cell(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.4}")
    }
}

pub fn render_markdown(rows: &[MethodRow]) -> String {
    let mut s = String::new();
    s.push_str("# Run comparison\n\n");
    s.push_str("Mean over test items and foreground classes. `adb_mm` is the mean of the two\n");
    s.push_str("directed average surface distances; `hausdorff_mm` is the symmetric maximum.\n");
    s.push_str("`score` sums dice/2 - adb/4 - hausdorff/30 over foreground classes.\n\n");
    s.push_str("| run | method | dice | adb_mm | hausdorff_mm | rand_f | score |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let rand = r.rand_fscore.map(fmt_cell).unwrap_or_default();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.run,
            r.method,
            fmt_cell(r.dice),
            fmt_cell(r.adb_mm),
            fmt_cell(r.hausdorff_mm),
            rand,
            fmt_cell(r.score)
        );
    }
    s
}

pub fn render_csv(rows: &[MethodRow]) -> String {
    let mut s = String::from("run,method,dice,adb_mm,hausdorff_mm,rand_fscore,score\n");
    for r in rows {
        let rand = r.rand_fscore.map(|x| format!("{x:?}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?},{},{:?}",
            r.run, r.method, r.dice, r.adb_mm, r.hausdorff_mm, rand, r.score
        );
    }
    s
}

/// Builds the comparison for several runs, ordered by run directory name,
/// optionally writing `report.md` and `report.csv` under `out`.
pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".to_string()));
    }
    let mut ordered: Vec<&PathBuf> = runs.iter().collect();
    ordered.sort_by_key(|p| run_name(p));
    let mut rows = Vec::new();
    for path in ordered {
        rows.extend(load_run(path)?);
    }
    let md = render_markdown(&rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("report.md"), &md)
            .map_err(|e| CliError::Config(format!("report.md: {e}")))?;
        std::fs::write(dir.join("report.csv"), render_csv(&rows))
            .map_err(|e| CliError::Config(format!("report.csv: {e}")))?;
    }
    Ok(md)
}
