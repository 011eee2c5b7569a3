//! `fcce` command-line harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcce_core::data::{self, pgm};
use fcce_core::error::{Error, Result};
use fcce_core::fcm::{self, FcmConfig};
use fcce_core::gradcheck;
use fcce_core::harness::ablation::{run_ablation, AblationConfig, SUMMARY_FILE};
use fcce_core::harness::{evaluate_checkpoint, load_images, prepare, train};
use fcce_core::loss::MembershipSource;
use fcce_core::nn::TensorArchive;
use fcce_core::RunConfig;

/// Environment variable that sets the worker thread count.
const THREADS_ENV: &str = "FCCE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fcce", version, about = "Fuzzy categorical cross-entropy segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset (images, labels, FCM memberships).
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Skip the FCM membership cache.
        #[arg(long)]
        no_memberships: bool,
    },
    /// Cluster one PGM image with fuzzy c-means.
    Fcm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 2.0)]
        fuzzifier: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint and write predicted label maps.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which images of the configured dataset to score.
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
    },
    /// Paired CCE vs FCCE runs over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5")]
        lambdas: Vec<f64>,
        #[arg(long, default_value = "prediction")]
        membership_source: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    All,
    Train,
    Val,
}

/// Options shared by the subcommands that build a [`RunConfig`]. Values are
/// applied in order: config file, typed flags, then `--set` pairs.
#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_text(&text)?
            }
            None => RunConfig::default(),
        };
        let typed = [
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("data_dir", self.data.as_ref().map(|p| p.display().to_string())),
            ("model", self.model.clone()),
            ("loss", self.loss.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in typed {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot start {n} threads: {e}")))
}

fn gen_data(run: &RunArgs, no_memberships: bool) -> Result<()> {
    let cfg = run.resolve()?;
    cfg.phantom.validate()?;
    let mut images = data::generate_phantoms(&cfg.phantom)?;
    if !no_memberships {
        data::cache_memberships(&mut images, &cfg.fcm)?;
    }
    data::write_dataset(&cfg.out_dir, &images, &cfg.phantom)?;
    println!("wrote {} images to {}", images.len(), cfg.out_dir.display());
    Ok(())
}

fn run_fcm(input: &Path, out: &Path, config: &FcmConfig) -> Result<()> {
    let image = pgm::load_pgm(input)?;
    let result = fcm::run(&image.pixels, config)?;
    fs::create_dir_all(out)?;

    let mut csv = String::from("iter,objective\n");
    for (k, j) in result.objective_trace.iter().enumerate() {
        writeln!(csv, "{k},{j:.12e}").unwrap();
    }
    fs::write(out.join("fcm.csv"), csv)?;

    let m = &result.memberships;
    let mut ar = TensorArchive::new();
    ar.set_meta("centroids", result.centroids.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    ar.push_f64("memberships", &[m.clusters(), m.pixels()], m.0.as_slice().to_vec());
    ar.save(out.join("memberships.bin"))?;
    pgm::save_labels_pgm(&m.0.argmax_columns(), image.width, image.height, out.join("fcm_labels.pgm"))?;

    let centroids: Vec<String> = result.centroids.values().iter().map(|v| format!("{v:.6}")).collect();
    println!(
        "centroids [{}], objective {:.6e}, {} iterations, converged {}",
        centroids.join(", "),
        result.objective,
        result.iterations_used,
        result.converged
    );
    Ok(())
}

fn run_gradcheck(instances: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let reports = gradcheck::run_suite(instances, seed)?;
    let mut csv = String::from("mode,max_rel_err\n");
    for r in &reports {
        writeln!(csv, "{},{:.6e}", r.mode, r.max_rel_err).unwrap();
    }
    print!("{csv}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.csv"), &csv)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.mode.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} for: {}",
            gradcheck::MAX_REL_ERR,
            failed.join(", ")
        )))
    }
}

fn run_train(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let outcome = train(&cfg)?;
    let best = outcome.best();
    println!(
        "{} epochs{}; best epoch {}: AC_val {:.4} DC_val {:.4} IoU_val {:.4}; artifacts in {}",
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        best.epoch,
        best.ac_val,
        best.dc_val,
        best.iou_val,
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_eval(run: &RunArgs, checkpoint: &Path, split: EvalSplit) -> Result<()> {
    let cfg = run.resolve()?;
    let images = match split {
        EvalSplit::All => load_images(&cfg)?,
        EvalSplit::Train => prepare(&cfg)?.train,
        EvalSplit::Val => prepare(&cfg)?.val,
    };
    if images.is_empty() {
        return Err(Error::config("no images selected for evaluation"));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let eval = evaluate_checkpoint(checkpoint, &images, Some(&cfg.out_dir))?;
    let c = eval.counts.classes();
    let mut csv = String::from("images,AC,DC,IoU");
    for k in 0..c {
        write!(csv, ",DC_{k}").unwrap();
    }
    for k in 0..c {
        write!(csv, ",IoU_{k}").unwrap();
    }
    write!(csv, "\n{},{:.6},{:.6},{:.6}", images.len(), eval.counts.accuracy(), eval.counts.dice(), eval.counts.iou())
        .unwrap();
    for v in eval.counts.dice_per_class().into_iter().chain(eval.counts.iou_per_class()) {
        write!(csv, ",{v:.6}").unwrap();
    }
    csv.push('\n');
    fs::write(cfg.out_dir.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_ablate(run: &RunArgs, seeds: &[u64], lambdas: &[f64], source: &str) -> Result<()> {
    let base = run.resolve()?;
    let out = base.out_dir.clone();
    let cfg = AblationConfig {
        lambdas: lambdas.to_vec(),
        membership_source: source.parse::<MembershipSource>()?,
        ..AblationConfig::new(base, seeds.to_vec())
    };
    let report = run_ablation(&cfg, Some(&out))?;
    print!("{}", report.summary());
    println!("table in {}, summary in {}", out.join("ablation.csv").display(), out.join(SUMMARY_FILE).display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { run, no_memberships } => gen_data(&run, no_memberships),
        Command::Fcm { input, out, clusters, fuzzifier, tolerance, max_iterations, seed } => {
            let cfg = FcmConfig { num_clusters: clusters, fuzzifier, max_iterations, tolerance, seed };
            run_fcm(&input, &out, &cfg)
        }
        Command::Gradcheck { instances, seed, out } => run_gradcheck(instances, seed, out.as_deref()),
        Command::Train { run } => run_train(&run),
        Command::Eval { run, checkpoint, split } => run_eval(&run, &checkpoint, split),
        Command::Ablate { run, seeds, lambdas, membership_source } => {
            run_ablate(&run, &seeds, &lambdas, &membership_source)
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config() {
        2
    } else if err.is_numeric() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_and_set_overrides_flags() {
        let dir = std::env::temp_dir().join(format!("fcce-cli-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "epochs = 7\nlambda = 0.2\nseed = 1\n").unwrap();
        let cli = Cli::parse_from([
            "fcce", "train", "--config", path.to_str().unwrap(), "--epochs", "3", "--seed", "9", "--set", "seed=4",
        ]);
        let Command::Train { run } = cli.command else { panic!("parsed a different subcommand") };
        let cfg = run.resolve().unwrap();
        assert_eq!((cfg.epochs, cfg.loss.lambda, cfg.seed), (3, 0.2, 4));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 3);
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::DegenerateCluster { cluster: 0 }), 1);
    }
}
