//! `gdm` command-line driver.
//!
//! Every subcommand exits 0 on success. On failure it prints one JSON record
//! `{"error": <kind>, "message": <text>}` on stderr and exits nonzero
//! (2 for usage errors, 1 otherwise).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdm_core::data::{gen_synthetic, write_dataset};
use gdm_core::experiment::{
    export_sdp_instance, profile_for_trial, run_experiment, validate_r_for_trial, write_report, DataSource,
    ExperimentConfig, SdpExportConfig,
};
use gdm_core::kernel::KernelSpec;
use gdm_core::par::Execution;

#[derive(Parser)]
#[command(name = "gdm", version, about = "Generalized discrepancy minimization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic shift dataset as CSV files
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// labeled target points
        #[arg(long, default_value_t = 10)]
        s: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the comparison and write the JSON report
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// report path; defaults to <output_dir>/report.json, else stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// run trials sequentially
        #[arg(long)]
        sequential: bool,
    },
    /// Emit the objective-versus-slope table of one trial as CSV
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
        w_lo: f64,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        w_hi: f64,
        #[arg(long, default_value_t = 201)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the r-grid validation table of one trial as JSON
    ValidateR {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Export the SDP relaxation of a small synthetic instance in SDPA format
    ExportSdp {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Gaussian bandwidth; linear kernel when omitted
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        /// loss level of the q_min ball (default: half the mean squared label)
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; the synthetic default when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// replace the data source with a dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
}

impl ConfigArgs {
    fn load(&self) -> gdm_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?,
            None => ExperimentConfig::synthetic_default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(d) = &self.data_dir {
            cfg.data = DataSource::Dir { path: d.clone() };
        }
        cfg.normalize |= self.normalize;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> gdm_core::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(cmd: Cmd) -> gdm_core::Result<()> {
    match cmd {
        Cmd::Synth { seed, m, n, s, out } => {
            let (ds, _) = gen_synthetic(seed, m, n, s)?;
            write_dataset(&ds, &out)
        }
        Cmd::Run { cfg, out, sequential } => {
            let cfg = cfg.load()?;
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            let report = run_experiment(&cfg, exec)?;
            match out.or_else(|| cfg.output_dir.as_ref().map(|d| d.join("report.json"))) {
                Some(p) => write_report(&report, &p),
                None => {
                    println!("{}", report.to_json()?);
                    Ok(())
                }
            }
        }
        Cmd::Profile { cfg, trial, w_lo, w_hi, steps, out } => {
            let cfg = cfg.load()?;
            let table = profile_for_trial(&cfg, trial, (w_lo, w_hi, steps))?;
            write_or_print(out.as_deref(), &table.to_csv())
        }
        Cmd::ValidateR { cfg, trial } => {
            let cfg = cfg.load()?;
            let v = validate_r_for_trial(&cfg, trial)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(())
        }
        Cmd::ExportSdp { seed, m, n, sigma, lambda, level, out } => {
            let kernel = match sigma {
                Some(s) => KernelSpec::gaussian(s)?,
                None => KernelSpec::Linear,
            };
            let p = export_sdp_instance(&SdpExportConfig { seed, m, n, kernel, lambda, level }, &out)?;
            log::info!("wrote {} ({} variables)", out.display(), p.sdpa.m_dim);
            Ok(())
        }
    }
}

fn error_record(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_record("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_record(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

