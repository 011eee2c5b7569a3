//! Paired CCE vs FCCE comparison over several seeds.
//!
//! For every seed, each arm trains from the same initial weights on the
//! same split and batch order; only the loss differs. The FCCE weight is
//! chosen from the candidate list by mean validation Dice over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{self, DatasetSplit};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, MembershipSource};
use crate::metrics::MetricsRecord;

use super::config::RunConfig;
use super::train::{load_images, train_split};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "ablation_summary.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub membership_source: MembershipSource,
}

impl AblationConfig {
    pub fn new(base: RunConfig, seeds: Vec<u64>) -> Self {
        Self { base, seeds, lambdas: vec![0.1, 0.5], membership_source: MembershipSource::Prediction }
    }

    fn arms(&self) -> Vec<(String, LossConfig)> {
        let mut arms = vec![("cce".to_string(), LossConfig::cce())];
        for &l in &self.lambdas {
            arms.push((format!("fcce_{l}"), LossConfig::fcce(self.membership_source, l)));
        }
        arms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: String,
    pub loss: LossConfig,
    pub best: MetricsRecord,
    pub last: MetricsRecord,
    pub epochs_run: usize,
}

impl ArmResult {
    pub fn lambda(&self) -> Option<f64> {
        (self.loss.kind == crate::loss::LossKind::Fcce).then_some(self.loss.lambda)
    }
}

/// Per-seed validation Dice at the best epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub cce_dc_val: f64,
    pub fcce_dc_val: f64,
}

impl SeedComparison {
    pub fn diff(&self) -> f64 {
        self.fcce_dc_val - self.cce_dc_val
    }

    pub fn fcce_wins(&self) -> bool {
        self.fcce_dc_val >= self.cce_dc_val
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    pub chosen_lambda: f64,
    pub comparisons: Vec<SeedComparison>,
}

impl AblationReport {
    pub fn wins(&self) -> usize {
        self.comparisons.iter().filter(|c| c.fcce_wins()).count()
    }

    pub fn mean_diff(&self) -> f64 {
        self.comparisons.iter().map(SeedComparison::diff).sum::<f64>() / self.comparisons.len() as f64
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "chosen_lambda {}", self.chosen_lambda).unwrap();
        writeln!(s, "seed,cce_DC_val,fcce_DC_val,diff").unwrap();
        for c in &self.comparisons {
            writeln!(s, "{},{:.6},{:.6},{:+.6}", c.seed, c.cce_dc_val, c.fcce_dc_val, c.diff()).unwrap();
        }
        writeln!(s, "fcce_wins {}/{}", self.wins(), self.comparisons.len()).unwrap();
        writeln!(s, "mean_diff {:+.6}", self.mean_diff()).unwrap();
        s
    }
}

pub fn csv_header() -> &'static str {
    "seed,arm,lambda,best_epoch,epochs_run,AC,DC,IoU,AC_val,DC_val,IoU_val,AC_val_final,DC_val_final,IoU_val_final"
}

fn csv_row(r: &ArmResult) -> String {
    let b = &r.best;
    format!(
        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.seed,
        r.arm,
        r.lambda().map(|l| l.to_string()).unwrap_or_default(),
        b.epoch,
        r.epochs_run,
        b.ac,
        b.dc,
        b.iou,
        b.ac_val,
        b.dc_val,
        b.iou_val,
        r.last.ac_val,
        r.last.dc_val,
        r.last.iou_val
    )
}

fn write_table(path: &Path, arms: &[ArmResult]) -> Result<()> {
    let mut s = String::from(csv_header());
    s.push('\n');
    for r in arms {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn run_seed(cfg: &AblationConfig, seed: u64, split: &DatasetSplit, out: Option<&Path>) -> Result<Vec<ArmResult>> {
    cfg.arms()
        .into_iter()
        .map(|(arm, loss)| {
            let run = RunConfig { loss, seed, ..cfg.base.clone() };
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("seed{seed}")).join(&arm));
            let outcome = train_split(&run, split, dir.as_deref())?;
            Ok(ArmResult {
                seed,
                arm,
                loss,
                best: outcome.best().clone(),
                last: outcome.last().clone(),
                epochs_run: outcome.history.len(),
            })
        })
        .collect()
}

/// Runs every seed (in parallel when threads are available). Per-run
/// metrics go to `<out>/seed<S>/<arm>/`; the merged table is written even
/// when some run fails, and the first failure is returned afterwards.
pub fn run_ablation(cfg: &AblationConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    if cfg.seeds.len() < 3 {
        return Err(Error::config(format!("ablation needs at least 3 seeds, got {}", cfg.seeds.len())));
    }
    if cfg.lambdas.is_empty() {
        return Err(Error::config("ablation needs at least one lambda"));
    }
    let mut probe = cfg.base.clone();
    for (_, loss) in cfg.arms() {
        probe.loss = loss;
        probe.validate()?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut images = load_images(&cfg.base)?;
    if cfg.membership_source != MembershipSource::Prediction && images.iter().any(|i| i.memberships.is_none()) {
        data::cache_memberships(&mut images, &cfg.base.fcm)?;
    }
    let results: Vec<Result<Vec<ArmResult>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = data::split_dataset(images.clone(), cfg.base.split_fraction, seed)?;
            run_seed(cfg, seed, &split, out_dir)
        })
        .collect();

    let arms: Vec<ArmResult> = results.iter().filter_map(|r| r.as_ref().ok()).flatten().cloned().collect();
    if let Some(dir) = out_dir {
        write_table(&dir.join(ABLATION_FILE), &arms)?;
    }
    if let Some(err) = results.into_iter().find_map(Result::err) {
        return Err(err);
    }

    let mean_dc = |arm: &str| {
        let v: Vec<f64> = arms.iter().filter(|r| r.arm == arm).map(|r| r.best.dc_val).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let arm_names = cfg.arms();
    let (best_arm, best_loss) = arm_names[1..]
        .iter()
        .fold(None::<&(String, LossConfig)>, |acc, cand| match acc {
            Some(a) if mean_dc(&a.0) >= mean_dc(&cand.0) => Some(a),
            _ => Some(cand),
        })
        .expect("at least one fcce arm");
    let pick = |seed: u64, arm: &str| {
        arms.iter().find(|r| r.seed == seed && r.arm == arm).map(|r| r.best.dc_val).expect("every arm ran")
    };
    let comparisons = cfg
        .seeds
        .iter()
        .map(|&seed| SeedComparison { seed, cce_dc_val: pick(seed, "cce"), fcce_dc_val: pick(seed, best_arm) })
        .collect();
    let report = AblationReport { arms, chosen_lambda: best_loss.lambda, comparisons };
    if let Some(dir) = out_dir {
        fs::write(dir.join(SUMMARY_FILE), report.summary())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomConfig;

    fn base() -> RunConfig {
        RunConfig {
            epochs: 2,
            depth: 2,
            base_channels: 4,
            learning_rate: 1e-3,
            phantom: PhantomConfig { size: 16, count: 6, ..PhantomConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn needs_three_seeds() {
        let err = run_ablation(&AblationConfig::new(base(), vec![1, 2]), None).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn small_ablation_writes_table() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_ablation(&AblationConfig::new(base(), vec![0, 1, 2]), Some(dir.path())).unwrap();
        assert_eq!(report.arms.len(), 9);
        assert_eq!(report.comparisons.len(), 3);
        assert!([0.1, 0.5].contains(&report.chosen_lambda));
        let table = fs::read_to_string(dir.path().join(ABLATION_FILE)).unwrap();
        assert_eq!(table.lines().count(), 10);
        assert!(dir.path().join("seed1/fcce_0.5/metrics.csv").exists());
        assert!(fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap().contains("fcce_wins"));
    }

    #[test]
    fn zero_lambda_matches_cce() {
        let cfg = AblationConfig { lambdas: vec![0.0], ..AblationConfig::new(base(), vec![4, 5, 6]) };
        let report = run_ablation(&cfg, None).unwrap();
        for c in &report.comparisons {
            assert_eq!(c.cce_dc_val.to_bits(), c.fcce_dc_val.to_bits());
        }
        for pair in report.arms.chunks(2) {
            assert_eq!(pair[0].best, pair[1].best);
            assert_eq!(pair[0].last, pair[1].last);
        }
    }
}
