use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use circe::harness::{
    fit_holdout_cme, format_summary, prepare, read_records, run_single, run_sweep, summarize, write_records,
    write_summary, derive_seed, Job, SweepConfig,
};
use circe::{Error, Result};

#[derive(Parser)]
#[command(name = "circe", version, about = "Conditionally invariant regression with CIRCE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Concurrent runs in a sweep.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write each configured case's dataset as CSV.
    Gen(Common),
    /// Fit the conditional mean model on the holdout split and print the LOO table.
    FitCme(Common),
    /// One training run (first case, method and γ of the config).
    Train(Common),
    /// Full grid over cases × methods × γ × seeds.
    Sweep(Common),
    /// Seed medians and Pareto fronts of a results CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results CSV; defaults to `<out>/results.csv`.
        input: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<SweepConfig> {
    let mut cfg = match &c.config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out)?;
    Ok(&c.out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

fn gen(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    for &case in &cfg.cases {
        for &seed in &cfg.seeds {
            let batch = cfg.generate(case, cfg.n_samples, false, derive_seed(seed, 0))?;
            let path = dir.join(format!("{case}_seed{seed}.csv"));
            batch.write_csv(&path)?;
            println!("{} rows -> {}", batch.len(), path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fit_cme(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let seed = cfg.seeds[0];
    for &case in &cfg.cases {
        let prep = prepare(&cfg, case, seed)?;
        let (model, report) = fit_holdout_cme(&cfg, &prep.holdout)?;
        println!("case {case} seed {seed}: holdout M = {}", model.holdout_size());
        println!("{:>10} {:>10} {:>14}", "lambda", "sigma2_y", "loo");
        for (k, ((l, s), e)) in report.grid.iter().zip(&report.errors).enumerate() {
            let mark = if k == report.best { "  <-" } else { "" };
            println!("{l:>10.3e} {s:>10.3e} {e:>14.6e}{mark}");
        }
        let path = dir.join(format!("cme_{case}_seed{seed}.json"));
        model.save_json(&path)?;
        println!("model -> {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let method = cfg.methods[0];
    let job = Job {
        case: cfg.cases[0],
        method,
        gamma: cfg.gammas_for(method)[0],
        seed: cfg.seeds[0],
    };
    let dir = out_dir(c)?;
    let out = run_single(&cfg, job)?;
    write_records(File::create(dir.join("results.csv"))?, std::slice::from_ref(&out.record))?;
    out.model.save_json(dir.join("model.json"))?;
    write_json(&dir.join("log.json"), &out.log)?;
    let r = &out.record;
    println!(
        "{} {} gamma={} seed={}: mse_in={:.4e} vcf={:.4e} statistic={:.4e}{}",
        r.case_id,
        r.method,
        r.gamma,
        r.seed,
        r.mse_in,
        r.vcf,
        r.statistic_final,
        if r.unstable { " (unstable)" } else { "" }
    );
    Ok(if r.unstable { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn sweep(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let workers = c
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Error::Config("--workers must be positive".into()));
    }
    let dir = out_dir(c)?;
    let outcome = run_sweep(&cfg, workers)?;
    let path = dir.join("results.csv");
    write_records(File::create(&path)?, &outcome.records)?;
    for (i, msg) in &outcome.failures {
        eprintln!("run {i} failed: {msg}");
    }
    let unstable = outcome.records.iter().filter(|r| r.unstable).count();
    println!("{} runs ({unstable} unstable) -> {}", outcome.records.len(), path.display());
    Ok(if outcome.any_unstable() { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn report(c: &Common, input: Option<&Path>) -> Result<ExitCode> {
    let dir = out_dir(c)?;
    let path = input.map_or_else(|| dir.join("results.csv"), Path::to_path_buf);
    let file = File::open(&path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let rows = summarize(&read_records(file)?);
    write_summary(File::create(dir.join("summary.csv"))?, &rows)?;
    print!("{}", format_summary(&rows));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::FitCme(c) => fit_cme(c),
        Command::Train(c) => train(c),
        Command::Sweep(c) => sweep(c),
        Command::Report { common, input } => report(common, input.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
