//! `metfa` command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::config::RunConfig;
use crate::datagen::{generate_pair, load_csv, save_csv, DomainShiftSpec};
use crate::error::{MetfaError, Result};
use crate::eval::{macro_metrics, test_confusions, AblationName};
use crate::model::Checkpoint;
use crate::optim::{train, MANIFEST_FORMAT};
use crate::verify::check_all_losses;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "METFA_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "metfa", about = "Metric-guided feature alignment for unsupervised domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a two-domain dataset from a shift spec.
    GenData { spec: PathBuf, out: PathBuf },
    /// Train one model; writes manifest.json, checkpoint.json and timing.json.
    Train {
        /// Run config, or a manifest from an earlier run.
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test splits of a dataset CSV.
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Run the ablation ladder over several seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Subset of configurations (default: all seven).
        #[arg(long, value_delimiter = ',')]
        configs: Option<Vec<String>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check every loss gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        configs: usize,
    },
    /// Print the version.
    Version,
}

/// Loads a run config. Accepts a bare config or a manifest, and resolves
/// the output directory as flag > file > `$METFA_OUTPUT_DIR` > default.
fn load_run_config(path: &Path, output_dir: Option<PathBuf>) -> Result<RunConfig> {
    let raw: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let body = match raw.get("format").and_then(Value::as_str) {
        Some(MANIFEST_FORMAT) => raw.get("config").cloned().ok_or_else(|| MetfaError::Format("manifest without config".into()))?,
        _ => raw,
    };
    let has_dir = body.get("output_dir").is_some();
    let mut cfg: RunConfig = serde_json::from_value(body)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    } else if !has_dir {
        if let Some(env) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(env);
        }
    }
    Ok(cfg)
}

fn cmd_gen_data(spec: &Path, out: &Path) -> Result<()> {
    let spec: DomainShiftSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    let data = generate_pair(&spec)?;
    save_csv(&data, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, epochs: Option<usize>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_run_config(config, output_dir)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.opt.epochs = e;
    }
    let outcome = train(&cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), outcome.manifest.to_json()?)?;
    Checkpoint::new(&cfg.net, &outcome.store).save(&dir.join("checkpoint.json"))?;
    fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "wall_time_secs": outcome.wall_time_secs }))?,
    )?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    let m = outcome.manifest.final_metrics().copied().unwrap_or_default();
    println!(
        "seed {} {}: source F1 {:.4}  target F1 {:.4}  ({:.1}s) → {}",
        cfg.seed,
        cfg.ablation,
        m.source.f1,
        m.target.f1,
        outcome.wall_time_secs,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let (net, store) = Checkpoint::load(checkpoint)?.into_store()?;
    let data = load_csv(data)?;
    if data.num_classes > net.num_classes || data.source_test.x.cols() != net.input_dim {
        return Err(MetfaError::Config("dataset does not match the checkpoint's network".into()));
    }
    let (cs, ct) = test_confusions(&store, &net, &data)?;
    let report = serde_json::json!({
        "source": { "metrics": macro_metrics(&cs), "confusion": cs.counts },
        "target": { "metrics": macro_metrics(&ct), "confusion": ct.counts },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(
    config: &Path,
    seeds: &[u64],
    configs: Option<Vec<String>>,
    epochs: Option<usize>,
    output_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_run_config(config, output_dir)?;
    if let Some(e) = epochs {
        cfg.opt.epochs = e;
    }
    let names = match configs {
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<AblationName>>>()?,
        None => AblationName::ALL.to_vec(),
    };
    let results = crate::eval::run_ablation(&cfg, &names, seeds)?;
    results.write(&cfg.output_dir)?;
    print!("{}", results.table_csv());
    Ok(())
}

fn cmd_gradcheck(tol: f64, configs: usize) -> Result<bool> {
    let checks = check_all_losses(configs, 0, tol)?;
    let mut ok = true;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<8} max rel error {:.3e} over {} configs  [{verdict}]", c.term.name(), c.max_rel_error, c.configurations);
        ok &= c.passed();
    }
    Ok(ok)
}

fn exit_code_for(e: &MetfaError) -> i32 {
    match e {
        MetfaError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Train { config, seed, epochs, output_dir } => cmd_train(&config, seed, epochs, output_dir),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Ablate { config, seeds, configs, epochs, output_dir } => {
            cmd_ablate(&config, &seeds, configs, epochs, output_dir)
        }
        Command::Gradcheck { tol, configs } => match cmd_gradcheck(tol, configs) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_CHECK_FAILED,
            Err(e) => Err(e),
        },
        Command::Version => {
            println!("metfa {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
