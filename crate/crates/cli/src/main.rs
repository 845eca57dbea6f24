mod input;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ibd_core::design::{check_bibd, five_treatment_bibd, incidence, DesignFile};
use ibd_core::estimate::{adjusted, hajek, ht, ObservedData, Validation};
use ibd_core::harness::{analyze_dataset, run_monte_carlo, se_ratio_sweep, AnalysisPlan, ScenarioConfig};
use ibd_core::oracle::{verify, VerifyOptions};
use ibd_core::population::{Contrast, WeightKind, Weights};
use ibd_core::randomize::{assign, count_assignments};
use ibd_core::variance::{adjusted_var, confidence_interval, cov_bb, cov_wb, CovKind, Flavor};
use serde_json::json;

use input::{observation_rows, read_design, read_outcomes, read_rows};

macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "ibd", version, about = "Design-based analysis of incomplete block designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or generate design files
    #[command(subcommand)]
    Design(DesignCmd),
    /// Draw one two-stage assignment and print it as CSV
    Randomize {
        design: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustive-enumeration tools
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Estimate a contrast from observed data
    Analyze(AnalyzeArgs),
    /// Run the Monte Carlo harness over a scenario grid; writes one CSV row per cell
    Simulate {
        scenario: PathBuf,
        /// Override the replicate count
        #[arg(long)]
        replicates: Option<usize>,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// SE(adjusted) / SE(design-based) for every scenario cell, as CSV
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Subsample complete-block data into a two-treatment design and average the analyses
    Dataset {
        data: PathBuf,
        plan: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

#[derive(Subcommand)]
enum DesignCmd {
    /// Report incidence numbers and whether the design is balanced
    Check { file: PathBuf },
    /// Print the ten-subset five-treatment BIBD with equal block sizes
    FiveTreatment {
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, default_value_t = 15)]
        block_size: usize,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Number of legal assignments
    Count { design: PathBuf },
    /// Check every exact identity by enumeration against a potential-outcomes CSV
    Verify {
        design: PathBuf,
        outcomes: PathBuf,
        /// Contrast coefficients, e.g. "1,-1,0"
        #[arg(long)]
        contrast: Option<String>,
        /// Treatment pair for the adjusted estimator, e.g. "1,2"
        #[arg(long, default_value = "1,2")]
        pair: String,
        #[arg(long, default_value_t = 10_000_000)]
        cap: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ht,
    Hajek,
    Adjusted,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Block,
    Unit,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Bb,
    Wb,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// CSV with columns unit_id,block,treatment,outcome; blocks numbered from 1
    data: PathBuf,
    #[arg(long)]
    design: PathBuf,
    #[arg(long, value_enum, default_value = "ht")]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value = "block")]
    weights: WeightsArg,
    /// Contrast coefficients; defaults to treatment 1 minus treatment 2
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long, value_enum, default_value = "bb")]
    variance: VarianceArg,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Treatment labels in the data, in order 1..T; defaults to "1".."T"
    #[arg(long)]
    treatments: Option<String>,
    /// Accept unequal within-block treatment counts
    #[arg(long)]
    lenient: bool,
}

/// Errors in how the program was invoked, reported with exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| usage(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn parse_pair(text: &str, num_treatments: usize) -> Result<(usize, usize)> {
    let v: Vec<usize> = parse_list(text, "pair")?;
    match v[..] {
        [a, b] if a != b && (1..=num_treatments).contains(&a) && (1..=num_treatments).contains(&b) => {
            Ok((a - 1, b - 1))
        }
        _ => Err(usage(format!("pair {text:?} must name two treatments in 1..={num_treatments}"))),
    }
}

fn contrast_arg(text: Option<&str>, num_treatments: usize) -> Result<Contrast> {
    match text {
        Some(t) => {
            let v: Vec<f64> = parse_list(t, "contrast")?;
            if v.len() != num_treatments {
                bail!(usage(format!("contrast has {} entries for {num_treatments} treatments", v.len())));
            }
            Contrast::new(v).map_err(|e| usage(e.to_string()))
        }
        None => Ok(Contrast::pair(num_treatments, 0, 1)),
    }
}

fn design_check(file: PathBuf) -> Result<()> {
    let d = read_design(&file)?;
    let inc = incidence(&d);
    let status = check_bibd(&d);
    out!("is_bibd={}", status.is_bibd);
    out!("K={} T={} t={}", d.num_blocks(), d.num_treatments(), d.subset_size());
    match (status.common_occurrences, status.common_co_occurrences) {
        (Some(l1), Some(l2)) => println!("L={l1} l={l2}"),
        _ => {
            out!("L={:?}", inc.occurrences);
            out!("l={:?}", inc.co_occurrences);
        }
    }
    if let Some(v) = status.violation {
        out!("violation: {v}");
    }
    Ok(())
}

fn randomize(design: PathBuf, seed: u64) -> Result<()> {
    let d = read_design(&design)?;
    let a = assign(&d, seed);
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["unit_id", "block", "treatment"])?;
    let mut unit = 0;
    for (k, &n) in d.block_sizes().iter().enumerate() {
        for _ in 0..n {
            let z = a.unit_treatments[unit];
            unit += 1;
            w.write_record([unit.to_string(), (k + 1).to_string(), (z + 1).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn oracle(cmd: OracleCmd) -> Result<bool> {
    match cmd {
        OracleCmd::Count { design } => {
            let d = read_design(&design)?;
            out!("{}", count_assignments(&d));
            Ok(true)
        }
        OracleCmd::Verify {
            design,
            outcomes,
            contrast,
            pair,
            cap,
        } => {
            let d = read_design(&design)?;
            let po = read_outcomes(&outcomes, &d)?;
            let opts = VerifyOptions {
                contrast: contrast_arg(contrast.as_deref(), d.num_treatments())?,
                pair: parse_pair(&pair, d.num_treatments())?,
                cap,
            };
            let checks = verify(&po, &d, &opts)?;
            let mut all = true;
            for c in &checks {
                all &= c.passed;
                out!(
                    "{} {} expected={:.12e} observed={:.12e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.expected,
                    c.observed
                );
            }
            out!("{} of {} identities hold", checks.iter().filter(|c| c.passed).count(), checks.len());
            Ok(all)
        }
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let design = Arc::new(read_design(&args.design)?);
    let nt = design.num_treatments();
    let labels: Vec<String> = match &args.treatments {
        Some(t) => t.split(',').map(|s| s.trim().to_string()).collect(),
        None => (1..=nt).map(|z| z.to_string()).collect(),
    };
    if labels.len() != nt {
        bail!(usage(format!("{} treatment labels for {nt} treatments", labels.len())));
    }
    let rows = observation_rows(&read_rows(&args.data)?, &labels)?;
    let mode = if args.lenient { Validation::Lenient } else { Validation::Strict };
    let obs = ObservedData::from_rows(Arc::clone(&design), &rows, mode)?;
    let g = contrast_arg(args.contrast.as_deref(), nt)?;
    let kind = match args.weights {
        WeightsArg::Block => WeightKind::Block,
        WeightsArg::Unit => WeightKind::Unit,
    };
    let flavor = match args.variance {
        VarianceArg::Bb => Flavor::Bb,
        VarianceArg::Wb => Flavor::Wb,
    };
    let w = Weights::of_kind(kind, design.block_sizes())?;
    let (report, variance, covariance) = match args.estimator {
        EstimatorArg::Adjusted => {
            if kind != WeightKind::Block {
                bail!(usage("the adjusted estimator is defined for block-level weights only"));
            }
            let support = g.support();
            let (z1, z2) = match support[..] {
                [a, b] if g.values()[a] == 1.0 && g.values()[b] == -1.0 => (a, b),
                [a, b] if g.values()[a] == -1.0 && g.values()[b] == 1.0 => (b, a),
                _ => bail!(usage("the adjusted estimator needs a pairwise contrast such as 1,-1,0")),
            };
            (adjusted(&obs, z1, z2)?, adjusted_var(&obs, z1, z2, flavor)?, None)
        }
        est => {
            let (report, cov_kind) = match est {
                EstimatorArg::Ht => (ht(&obs, &w, &g)?, CovKind::HorvitzThompson),
                _ => (hajek(&obs, &w, &g)?, CovKind::Hajek),
            };
            let cov = match flavor {
                Flavor::Bb => cov_bb(&obs, &w, cov_kind)?,
                Flavor::Wb => cov_wb(&obs, &w, cov_kind)?,
            };
            (report, cov.contrast_variance(&g)?, Some(cov))
        }
    };
    let interval = confidence_interval(report.point, variance, args.level).map_err(|e| usage(e.to_string()))?;
    let out = json!({
        "estimate": report,
        "variance": variance,
        "flavor": flavor,
        "covariance": covariance.as_ref().map(|c| &c.matrix),
        "mask": covariance.as_ref().map(|c| &c.mask),
        "interval": interval,
        "clamped": interval.clamped,
    });
    out!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn load_scenarios(path: &PathBuf, replicates: Option<usize>, seed: Option<u64>) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ScenarioConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate(scenario: PathBuf, replicates: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_scenarios(&scenario, replicates, seed)?;
    let cells = cfg.cells().map_err(|e| usage(e.to_string()))?;
    if cfg.replicates == 0 {
        bail!(usage("replicate count must be positive"));
    }
    let sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for (i, cell) in cells.iter().enumerate() {
        let row = run_monte_carlo(cell)?.flat_row();
        if i == 0 {
            w.write_record(row.iter().map(|c| c.0.as_str()))?;
        }
        w.write_record(row.iter().map(|c| c.1.as_str()))?;
        w.flush()?;
    }
    Ok(())
}

fn sweep(scenario: PathBuf, replicates: Option<usize>, seed: Option<u64>) -> Result<()> {
    let cfg = load_scenarios(&scenario, replicates, seed)?;
    if cfg.weights != WeightKind::Block {
        bail!(usage("sweep compares against the adjusted estimator; set \"weights\": \"block\""));
    }
    let cells = cfg.cells().map_err(|e| usage(e.to_string()))?;
    let rows = se_ratio_sweep(&cells)?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn dataset(data: PathBuf, plan: PathBuf, seed: Option<u64>, repetitions: Option<usize>) -> Result<()> {
    let text = std::fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
    let mut plan = AnalysisPlan::from_json(&text).map_err(|e| usage(format!("plan: {e}")))?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    if let Some(r) = repetitions {
        plan.repetitions = r;
    }
    let report = analyze_dataset(&read_rows(&data)?, &plan)?;
    out!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Design(DesignCmd::Check { file }) => design_check(file)?,
        Command::Design(DesignCmd::FiveTreatment { reps, block_size }) => {
            let d = five_treatment_bibd(reps, vec![block_size; 10 * reps])?;
            out!("{}", serde_json::to_string_pretty(&DesignFile::from_design(&d))?);
        }
        Command::Randomize { design, seed } => randomize(design, seed)?,
        Command::Oracle(cmd) => return oracle(cmd),
        Command::Analyze(args) => analyze(args)?,
        Command::Simulate {
            scenario,
            replicates,
            seed,
            out,
        } => simulate(scenario, replicates, seed, out)?,
        Command::Sweep {
            scenario,
            replicates,
            seed,
        } => sweep(scenario, replicates, seed)?,
        Command::Dataset {
            data,
            plan,
            seed,
            repetitions,
        } => dataset(data, plan, seed, repetitions)?,
    }
    Ok(true)
}

fn closed_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c.downcast_ref::<std::io::Error>().or_else(|| match c.downcast_ref::<csv::Error>()?.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        });
        io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if closed_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
