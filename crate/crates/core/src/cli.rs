//! Command-line front end.
//!
//! Every result file carries a `meta` block (tool version, git describe of
//! the build, seed, command and the fully resolved configuration) so a run
//! can be repeated from its outputs alone. CSV files carry the same block
//! as `#` comment lines. Thread count is deliberately left out: results do
//! not depend on it.
//!
//! Exit codes: 0 on success, 1 when the inputs are valid but the
//! computation fails or a target is unreachable, 2 on usage and
//! configuration errors.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::assurance::{success_indicator, AssuranceOptions, AssurancePoint, AssuranceProblem, EngineChoice};
use crate::bench::{run_scenario, summarize, write_records_csv, write_summary_csv, BenchOptions};
use crate::config::{PowerSection, Scenario};
use crate::error::{Error, Result};
use crate::laplace::infer_laplace;
use crate::mcmc::{gibbs_continuous, sampler_binary, ChainConfig};
use crate::model::{EngineTag, OutcomeKind, SummaryRequest};
use crate::power::{power_binary, power_continuous, sample_size_binary, sample_size_continuous};
use crate::simulate::{
    draw_design_params, fork, read_trial_csv, replicate_rng, simulate_trial, sizes_for_draw,
    write_trial_csv,
};

#[derive(Debug, Parser)]
#[command(name = "crt-assure", version, about = "Bayesian design of two-arm cluster randomised trials")]
struct Cli {
    /// Worker threads for assurance and benchmark runs. Results do not
    /// depend on this.
    #[arg(long, global = true, env = "CRT_ASSURE_THREADS")]
    threads: Option<usize>,

    /// Leave wall-clock fields empty so repeated runs are byte-identical.
    #[arg(long, global = true)]
    no_timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SeedArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Draw the seed from the OS; it is recorded in the output.
    #[arg(long, conflicts_with = "seed")]
    seed_from_entropy: bool,
}

#[derive(Debug, Args)]
struct EngineArgs {
    /// auto, mcmc or laplace.
    #[arg(long)]
    engine: Option<EngineChoice>,
    /// Retained MCMC draws.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Frequentist power, or the sample size for a target when one is given.
    Power {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frequentist sample size for a target power.
    Samplesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        target: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One hypothetical trial drawn from the design prior, as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total sample size; defaults to the design's.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior summary of the treatment effect for a data file.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// CSV with columns cluster, arm, y.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the full MCMC chain here.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Assurance at given sample sizes or along a curve of cluster sizes.
    Assure {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        replicates: Option<usize>,
        /// Total sample sizes (repeatable).
        #[arg(long = "n")]
        n: Vec<usize>,
        /// Average cluster sizes for a curve (repeatable).
        #[arg(long)]
        nbar: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-size table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Smallest sample size whose assurance reaches a target.
    #[command(name = "samplesize-bayes")]
    SamplesizeBayes {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        target: Option<f64>,
        /// Grid spacing of total sample size; defaults to the cluster count.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// MCMC against Laplace accuracy and timing study.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArgs,
        #[arg(long)]
        reps: Option<usize>,
        /// Run only these scenario ids (repeatable).
        #[arg(long)]
        scenario: Vec<String>,
        /// Receives records.csv and summary.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand) {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

struct Ctx {
    threads: Option<usize>,
    no_timing: bool,
}

fn run(cli: Cli) -> Result<i32> {
    let ctx = Ctx { threads: cli.threads, no_timing: cli.no_timing };
    if ctx.threads == Some(0) {
        return Err(Error::Config(vec!["--threads: must be at least 1".into()]));
    }
    match cli.command {
        Command::Power { config, out } => power(&config, None, false, out.as_deref()),
        Command::Samplesize { config, target, out } => power(&config, target, true, out.as_deref()),
        Command::Simulate { config, seed, n, out } => simulate(&config, seed, n, out.as_deref()),
        Command::Infer { config, data, engine, seed, out, chain } => {
            infer(&ctx, &config, &data, &engine, seed, out.as_deref(), chain.as_deref())
        }
        Command::Assure { config, seed, engine, replicates, n, nbar, out, csv } => {
            let seed = resolve_seed(&seed, "assure")?;
            let mut s = Scenario::load(&config)?;
            apply_engine(&mut s, &engine);
            if let Some(l) = replicates {
                s.assurance.replicates = l;
            }
            if !n.is_empty() {
                s.assurance.sample_sizes = n;
                s.assurance.nbar_grid.clear();
            } else if !nbar.is_empty() {
                s.assurance.nbar_grid = nbar;
                s.assurance.sample_sizes.clear();
            }
            assure(&ctx, &s, seed, out.as_deref(), csv.as_deref())
        }
        Command::SamplesizeBayes { config, seed, engine, replicates, target, step, cap, out, csv } => {
            let seed = resolve_seed(&seed, "samplesize-bayes")?;
            let mut s = Scenario::load(&config)?;
            apply_engine(&mut s, &engine);
            if let Some(l) = replicates {
                s.assurance.replicates = l;
            }
            s.assurance.target = target.or(s.assurance.target);
            s.assurance.step = step.or(s.assurance.step);
            s.assurance.cap = cap.or(s.assurance.cap);
            samplesize_bayes(&ctx, &s, seed, out.as_deref(), csv.as_deref())
        }
        Command::Bench { config, seed, reps, scenario, out_dir } => {
            let seed = resolve_seed(&seed, "bench")?;
            let mut s = Scenario::load(&config)?;
            if !scenario.is_empty() {
                let unknown: Vec<String> = scenario
                    .iter()
                    .filter(|id| !s.bench.iter().any(|b| &b.id == *id))
                    .map(|id| format!("--scenario: no scenario with id {id:?}"))
                    .collect();
                if !unknown.is_empty() {
                    return Err(Error::Config(unknown));
                }
                s.bench.retain(|b| scenario.contains(&b.id));
            }
            if let Some(r) = reps {
                for b in &mut s.bench {
                    b.reps = r;
                }
            }
            bench(&ctx, &s, seed, &out_dir)
        }
    }
}

fn resolve_seed(args: &SeedArgs, command: &str) -> Result<u64> {
    match (args.seed, args.seed_from_entropy) {
        (Some(s), _) => Ok(s),
        (None, true) => Ok(rand::random()),
        (None, false) => Err(Error::Config(vec![format!(
            "{command}: --seed is required (or pass --seed-from-entropy)"
        )])),
    }
}

fn apply_engine(s: &mut Scenario, e: &EngineArgs) {
    if let Some(c) = e.engine {
        s.engine.choice = c;
    }
    if let Some(k) = e.samples {
        s.engine.chain.samples = k;
    }
    if let Some(b) = e.burnin {
        s.engine.chain.burn_in = b;
    }
    if let Some(t) = e.thin {
        s.engine.chain.thin = t;
    }
}

fn meta(command: &str, seed: Option<u64>, s: &Scenario) -> Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "git": env!("CRT_GIT_DESCRIBE"),
        "command": command,
        "seed": seed,
        "config": s.resolved(),
    })
}

fn write_json(path: Option<&Path>, meta: Value, result: impl Serialize) -> Result<()> {
    let doc = json!({ "meta": meta, "result": result });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Writes `#`-prefixed provenance lines then the CSV produced by `body`.
fn write_csv(path: Option<&Path>, meta: &Value, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# {} {} ({})", meta["tool"].as_str().unwrap_or(""), meta["version"].as_str().unwrap_or(""), meta["git"].as_str().unwrap_or(""))?;
    writeln!(buf, "# command: {}", meta["command"].as_str().unwrap_or(""))?;
    writeln!(buf, "# seed: {}", meta["seed"])?;
    writeln!(buf, "# config: {}", serde_json::to_string(&meta["config"])?)?;
    body(&mut buf)?;
    match path {
        Some(p) => std::fs::write(p, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn power(config: &Path, target: Option<f64>, force_size: bool, out: Option<&Path>) -> Result<i32> {
    let mut s = Scenario::load(config)?;
    let Some(section) = s.power.as_mut() else {
        return Err(Error::Config(vec!["power: required for this command".into()]));
    };
    let result = match section {
        PowerSection::Continuous { inputs, target: t } => {
            *t = target.or(*t);
            match (*t, force_size || inputs.nbar.is_nan()) {
                (Some(goal), true) => serde_json::to_value(sample_size_continuous(inputs, goal)?)?,
                (None, true) => return Err(Error::Config(vec!["power.target: required for a sample size".into()])),
                (_, false) => json!({ "power": power_continuous(inputs)?, "convention": "one-sided z, design effect with cluster-size CV" }),
            }
        }
        PowerSection::Binary { inputs, target: t } => {
            *t = target.or(*t);
            match (*t, force_size || inputs.nbar.is_nan()) {
                (Some(goal), true) => serde_json::to_value(sample_size_binary(inputs, goal)?)?,
                (None, true) => return Err(Error::Config(vec!["power.target: required for a sample size".into()])),
                (_, false) => {
                    json!({ "power": power_binary(inputs)?, "convention": format!("n {:?}, {:?}-sided", inputs.n_convention, inputs.sided).to_lowercase() })
                }
            }
        }
    };
    let command = if force_size { "samplesize" } else { "power" };
    write_json(out, meta(command, None, &s), result)?;
    Ok(0)
}

fn simulate(config: &Path, seed: u64, n: Option<usize>, out: Option<&Path>) -> Result<i32> {
    let s = Scenario::load(config)?;
    let prior = s.require_design_prior()?.clone();
    let mut design = s.require_design()?.clone();
    if let Some(n) = n {
        design = design.with_total_n(n)?;
    }
    let mut s = s;
    s.design = Some(design.clone());
    // Same stream layout as an assurance replicate with index 0.
    let mut rng = replicate_rng(seed, 0);
    let mut param_rng = fork(&mut rng);
    let mut size_rng = fork(&mut rng);
    let mut sim_rng = fork(&mut rng);
    let draw = draw_design_params(&prior, design.clusters(), design.size_model(), &mut param_rng)?;
    let sizes = sizes_for_draw(&draw, &design, &mut size_rng)?;
    let data = simulate_trial(&draw, &design, &sizes, prior.kind(), &mut sim_rng)?;
    let m = meta("simulate", Some(seed), &s);
    write_csv(out, &m, |buf| {
        writeln!(buf, "# draw: {}", serde_json::to_string(&draw)?)?;
        write_trial_csv(&data, buf)
    })?;
    Ok(0)
}

fn infer(
    ctx: &Ctx,
    config: &Path,
    data_path: &Path,
    engine: &EngineArgs,
    seed: u64,
    out: Option<&Path>,
    chain_out: Option<&Path>,
) -> Result<i32> {
    let mut s = Scenario::load(config)?;
    apply_engine(&mut s, engine);
    let kind = s.outcome()?;
    let prior = s.analysis_prior()?;
    let rule = s.design.as_ref().map(|d| *d.success()).unwrap_or_default();
    let file = File::open(data_path)
        .map_err(|e| Error::Config(vec![format!("{}: {e}", data_path.display())]))?;
    let data = read_trial_csv(kind, BufReader::new(file))?;
    let request = SummaryRequest::for_rule(&rule);
    let tag = s.engine.resolve(kind, data.len());
    if chain_out.is_some() && tag != EngineTag::Mcmc {
        return Err(Error::Config(vec!["--chain: only available with the mcmc engine".into()]));
    }
    let (mut summary, diagnostics) = match tag {
        EngineTag::Laplace => {
            let fit = infer_laplace(&data, &prior, &s.engine.laplace, &request)?;
            (fit.summary, Some(fit.diagnostics))
        }
        EngineTag::Mcmc => {
            let cfg = ChainConfig { seed, keep_cluster_effects: chain_out.is_some(), ..s.engine.chain.clone() };
            let (chain, summary) = match kind {
                OutcomeKind::Continuous => gibbs_continuous(&data, &prior, &cfg, &request)?,
                OutcomeKind::Binary => sampler_binary(&data, &prior, &cfg, &request)?,
            };
            if let Some(p) = chain_out {
                let m = meta("infer", Some(seed), &s);
                write_csv(Some(p), &m, |buf| chain.write_csv(buf))?;
            }
            (summary, None)
        }
    };
    let success = success_indicator(&summary, &rule)?;
    if ctx.no_timing {
        summary.seconds = f64::NAN;
    }
    let result = json!({
        "engine": tag,
        "success": success,
        "data_fingerprint": format!("{:016x}", data.fingerprint()),
        "summary": summary,
        "diagnostics": diagnostics,
    });
    write_json(out, meta("infer", Some(seed), &s), result)?;
    Ok(0)
}

fn problem(ctx: &Ctx, s: &Scenario, seed: u64) -> Result<AssuranceProblem> {
    let design = s.require_design()?.clone();
    let design_prior = s.require_design_prior()?.clone();
    let analysis_prior = s.analysis_prior()?;
    Ok(AssuranceProblem {
        design,
        design_prior,
        analysis_prior,
        engine: s.engine.clone(),
        options: AssuranceOptions {
            replicates: s.assurance.replicates,
            seed,
            freeze_nu: s.assurance.freeze_nu,
            threads: ctx.threads,
        },
    })
}

fn points_csv(points: &[AssurancePoint], buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["n", "nbar", "engine", "assurance", "mcse", "replicates", "successes", "failed"])?;
    for p in points {
        w.write_record([
            p.n.to_string(),
            p.nbar.to_string(),
            format!("{:?}", p.engine).to_lowercase(),
            p.estimate.assurance.to_string(),
            p.estimate.mcse.to_string(),
            p.estimate.replicates.to_string(),
            p.estimate.successes.to_string(),
            p.estimate.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn assure(ctx: &Ctx, s: &Scenario, seed: u64, out: Option<&Path>, csv_out: Option<&Path>) -> Result<i32> {
    let prob = problem(ctx, s, seed)?;
    let m = meta("assure", Some(seed), s);
    let (result, points) = if !s.assurance.nbar_grid.is_empty() {
        let curve = prob.assurance_curve(&s.assurance.nbar_grid)?;
        (serde_json::to_value(&curve)?, curve.points)
    } else {
        let sizes = if s.assurance.sample_sizes.is_empty() {
            vec![prob.design.total_n()]
        } else {
            s.assurance.sample_sizes.clone()
        };
        let points = sizes.iter().map(|&n| prob.assurance(n)).collect::<Result<Vec<_>>>()?;
        (json!({ "points": points }), points)
    };
    if let Some(p) = csv_out {
        write_csv(Some(p), &m, |buf| points_csv(&points, buf))?;
    }
    write_json(out, m, result)?;
    Ok(0)
}

fn samplesize_bayes(ctx: &Ctx, s: &Scenario, seed: u64, out: Option<&Path>, csv_out: Option<&Path>) -> Result<i32> {
    let prob = problem(ctx, s, seed)?;
    let target = s
        .assurance
        .target
        .ok_or_else(|| Error::Config(vec!["assurance.target: required (or pass --target)".into()]))?;
    let c = prob.design.clusters();
    let step = s.assurance.step.unwrap_or(c);
    let cap = s.assurance.cap.unwrap_or(200 * c);
    let mut resolved = s.clone();
    resolved.assurance.step = Some(step);
    resolved.assurance.cap = Some(cap);
    let m = meta("samplesize-bayes", Some(seed), &resolved);
    let search = prob.find_sample_size(target, step, cap)?;
    if let Some(p) = csv_out {
        write_csv(Some(p), &m, |buf| points_csv(&search.evaluated, buf))?;
    }
    write_json(out, m, &search)?;
    if search.feasible() {
        Ok(0)
    } else {
        eprintln!(
            "error: target {target} not reached by n = {cap}; prior probability of success is {:.4}",
            search.asymptote
        );
        Ok(1)
    }
}

fn bench(ctx: &Ctx, s: &Scenario, seed: u64, out_dir: &Path) -> Result<i32> {
    if s.bench.is_empty() {
        return Err(Error::Config(vec!["bench.scenarios: at least one scenario is required".into()]));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for b in &s.bench {
        let mut opts = BenchOptions::new(seed);
        opts.threads = ctx.threads;
        opts.laplace = s.engine.laplace.clone();
        opts.analysis_prior = match (&s.analysis_prior, s.outcome) {
            (Some(p), Some(k)) if k == b.kind => Some(p.clone()),
            _ => Some(crate::model::AnalysisPrior::vague(b.kind, s.outcome_scale)?),
        };
        records.extend(run_scenario(b, &opts)?);
    }
    if ctx.no_timing {
        for r in &mut records {
            r.seconds = f64::NAN;
        }
    }
    let rows = summarize(&records);
    let m = meta("bench", Some(seed), s);
    write_csv(Some(&out_dir.join("records.csv")), &m, |buf| write_records_csv(&records, buf))?;
    write_csv(Some(&out_dir.join("summary.csv")), &m, |buf| write_summary_csv(&rows, buf))?;
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    eprintln!("{} records ({} failed) written to {}", records.len(), failed, out_dir.display());
    Ok(0)
}
