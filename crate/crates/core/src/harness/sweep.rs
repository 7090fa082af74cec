//! Grid sweeps over config keys.
//!
//! A grid file holds `key = v1 | v2 | ...` lines. The optional `base` key
//! names a config file (relative to the grid file) that every run starts from.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::train::{meta_train, TrainOptions};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub base: Option<PathBuf>,
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Grid { base: None, axes: Vec::new() };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("grid line {}: expected `key = values`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "base" {
                grid.base = Some(PathBuf::from(v));
                continue;
            }
            if grid.axes.iter().any(|(a, _)| a == k) {
                return Err(Error::Config(format!("grid key `{k}` repeated")));
            }
            let values: Vec<String> = v.split('|').map(|s| s.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::Config(format!("grid key `{k}` has an empty value")));
            }
            grid.axes.push((k.to_string(), values));
        }
        Ok(grid)
    }

    /// Every combination, the last axis varying fastest.
    pub fn combinations(&self) -> Vec<Vec<(String, String)>> {
        self.axes.iter().fold(vec![vec![]], |acc, (k, vals)| {
            acc.iter()
                .flat_map(|prefix| {
                    vals.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((k.clone(), v.clone()));
                        c
                    })
                })
                .collect()
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub index: usize,
    pub settings: Vec<(String, String)>,
    pub test: Vec<(String, f64, f64)>,
}

/// Runs every combination under `out/run_NNN` and writes `out/sweep.csv`.
/// `adjust` applies overrides (seed, output root) to the base config.
pub fn sweep(grid_path: &Path, adjust: impl Fn(&mut RunConfig) -> Result<()>) -> Result<Vec<SweepRun>> {
    let grid = Grid::parse(&fs::read_to_string(grid_path)?)?;
    let mut base = match &grid.base {
        Some(p) => {
            let p = grid_path.parent().unwrap_or(Path::new(".")).join(p);
            RunConfig::parse(&fs::read_to_string(&p)?)?
        }
        None => RunConfig::default(),
    };
    adjust(&mut base)?;
    let root = base.out.clone();
    fs::create_dir_all(&root)?;
    let mut runs = Vec::new();
    let mut csv = String::from("run,settings,metric,mean,ci95\n");
    for (index, settings) in grid.combinations().into_iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &settings {
            cfg.set(k, v)?;
        }
        cfg.out = root.join(format!("run_{index:03}"));
        cfg.validate()?;
        let outcome = meta_train(&cfg, &TrainOptions::default())?;
        let label = settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        let test: Vec<(String, f64, f64)> = outcome.test.iter().map(|(m, s)| (m.clone(), s.mean, s.ci95)).collect();
        for (m, mean, ci) in &test {
            let _ = writeln!(csv, "{index},{label},{m},{mean:?},{ci:?}");
        }
        runs.push(SweepRun { index, settings, test });
        fs::write(root.join("sweep.csv"), &csv)?;
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion_order() {
        let g = Grid::parse("base = b.cfg\nk_shot = 5 | 10\nseed = 0|1|2\n").unwrap();
        assert_eq!(g.base, Some(PathBuf::from("b.cfg")));
        let c = g.combinations();
        assert_eq!(c.len(), 6);
        assert_eq!(c[1], vec![("k_shot".to_string(), "5".to_string()), ("seed".to_string(), "1".to_string())]);
        assert!(Grid::parse("a = 1 |").is_err());
        assert!(Grid::parse("a = 1\na = 2").is_err());
        assert_eq!(Grid::parse("").unwrap().combinations().len(), 1);
    }

    #[test]
    fn sweep_runs_each_combination() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("base.cfg"),
            "learner = maml\nhidden = 3\nk_shot = 2\nquery = 3\nmeta_batch = 1\nmeta_iterations = 2\nval_every = 1\nval_tasks = 2\ntest_tasks = 2\ndeterministic = true\n",
        )
        .unwrap();
        fs::write(dir.path().join("grid.txt"), "base = base.cfg\ninner_lr = 0.01 | 0.1\n").unwrap();
        let out = dir.path().join("sweep");
        let runs = sweep(&dir.path().join("grid.txt"), |c| {
            c.out = out.clone();
            Ok(())
        })
        .unwrap();
        assert_eq!(runs.len(), 2);
        assert!(out.join("run_001/metrics.csv").exists());
        let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("inner_lr=0.1,mse,"));
    }
}
