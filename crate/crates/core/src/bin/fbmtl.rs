use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feedback_mtl::data::{gen_synthetic, write_atis_format, SyntheticSpec};
use feedback_mtl::train::{
    ablate, evaluate, prepare_data, report_line, sweep, train_to_dir, Ablation, ResultsTable, RunConfig, SweepParam,
    SweepSummary, Trained,
};
use feedback_mtl::{Error, Result};

#[derive(Parser)]
#[command(name = "fbmtl", version, about = "Multi-task SLU with output feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with train.tsv and test.tsv in ATIS format.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dot-path override, e.g. `loss.beta=0.7`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as train.tsv / test.tsv.
    GenData(Common),
    /// Train one model per seed.
    Train(Common),
    /// Evaluate a trained run directory on the test data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "final.ckpt")]
        checkpoint: String,
    },
    /// Train the ablation grid and write ablation.json / ablation.txt.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated flags (TRIV, ITER, ITER+CONV, ITER+GG, FUL).
        #[arg(long, value_delimiter = ',', default_value = "TRIV,ITER,ITER+CONV,ITER+GG,FUL")]
        flags: Vec<String>,
    },
    /// One run per value of K, beta, conv_weight or gate.temperature.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Print the tables and metrics stored under an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(dir) = &self.data {
            overrides.push(format!("data.train={:?}", dir.join("train.tsv").display().to_string()));
            overrides.push(format!("data.test={:?}", dir.join("test.tsv").display().to_string()));
        }
        let mut cfg = RunConfig::load_with_overrides(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let spec = cfg.data.synthetic.clone().unwrap_or_default();
    let spec = SyntheticSpec { seed: common.seed.unwrap_or(spec.seed), ..spec };
    let test = SyntheticSpec { count: cfg.data.test_count, seed: spec.seed.wrapping_add(1), ..spec.clone() };
    std::fs::create_dir_all(&cfg.out)?;
    write_atis_format(cfg.out.join("train.tsv"), &gen_synthetic(&spec)?)?;
    write_atis_format(cfg.out.join("test.tsv"), &gen_synthetic(&test)?)?;
    println!("wrote {} train and {} test utterances to {}", spec.count, test.count, cfg.out.display());
    Ok(())
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let data = prepare_data(&cfg.data)?;
    for &seed in &cfg.seeds {
        let dir = cfg.out.join(format!("seed{seed}"));
        let o = train_to_dir(&cfg, seed, &data, &dir)?;
        println!("seed {seed}: {} -> {}", report_line(&o.report), dir.display());
    }
    Ok(())
}

fn eval_cmd(common: &Common, run: &Path, checkpoint: &str) -> Result<()> {
    let mut trained = Trained::load(run, checkpoint)?;
    let data_cfg = if common.data.is_some() || common.config.is_some() || !common.overrides.is_empty() {
        common.config()?.data
    } else {
        trained.config.data.clone()
    };
    let data = prepare_data(&data_cfg)?;
    let report = evaluate(&mut trained, &data.test)?;
    println!("{}", report.to_json());
    Ok(())
}

fn ablate_cmd(common: &Common, flags: &[String]) -> Result<()> {
    let cfg = common.config()?;
    let flags: Vec<Ablation> = flags.iter().map(|f| f.parse()).collect::<Result<_>>()?;
    let data = prepare_data(&cfg.data)?;
    let table = ablate(&cfg, &flags, &cfg.seeds, &data, Some(&cfg.out))?;
    print!("{}", table.to_text());
    Ok(())
}

fn sweep_cmd(common: &Common, param: &str, values: &[f64]) -> Result<()> {
    let cfg = common.config()?;
    let param: SweepParam = param.parse()?;
    let data = prepare_data(&cfg.data)?;
    let summary = sweep(&cfg, param, values, cfg.seeds[0], &data, Some(&cfg.out))?;
    print!("{}", summary.to_text());
    Ok(())
}

fn report_cmd(out: &Path) -> Result<()> {
    let mut found = false;
    let ablation = out.join("ablation.json");
    if ablation.exists() {
        let table = ResultsTable::from_json(&std::fs::read_to_string(ablation)?)?;
        print!("{}", table.to_text());
        found = true;
    }
    let sweep = out.join("sweep.json");
    if sweep.exists() {
        let s: SweepSummary = serde_json::from_str(&std::fs::read_to_string(sweep)?)
            .map_err(|e| Error::Data(format!("bad sweep summary: {e}")))?;
        print!("{}", s.to_text());
        found = true;
    }
    let metrics = out.join("metrics.json");
    if metrics.exists() {
        let r = feedback_mtl::metrics::MetricsReport::from_json(&std::fs::read_to_string(metrics)?)?;
        println!("{}", report_line(&r));
        found = true;
    }
    if !found {
        return Err(Error::Data(format!("no ablation.json, sweep.json or metrics.json in {}", out.display())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval { common, run, checkpoint } => eval_cmd(common, run, checkpoint),
        Command::Ablate { common, flags } => ablate_cmd(common, flags),
        Command::Sweep { common, param, values } => sweep_cmd(common, param, values),
        Command::Report { out } => report_cmd(out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
