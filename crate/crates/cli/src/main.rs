//! Command-line driver: synthetic data, CSV ingestion, candidate
//! generation, scoring, selection, and full experiment grids.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod experiment;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covclust::candidates::{linkage_candidates, spectral_candidates, GlassoConfig, LinkageMethod};
use covclust::map::AdmmConfig;
use covclust::mcmc::{mh_within_gibbs, vectorize_state, McmcConfig};
use covclust::model::{Clustering, Hyperparams};
use covclust::selection::{score_all, select, Criterion, ScoreConfig};
use covclust::synth::{generate_dataset, CovDist, SynthSpec};

use crate::io::CliError;

#[derive(Parser)]
#[command(
    name = "covclust",
    about = "Variable clustering under a Gaussian graphical model, selected by marginal likelihood",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle (stats.json, truth.json[, data.csv])
    Synth(SynthArgs),
    /// Ingest a CSV of samples into a stats.json bundle
    Ingest(IngestArgs),
    /// Build a candidate clustering set from a stats bundle
    Candidates(CandidatesArgs),
    /// Score every candidate under one criterion
    Score(ScoreArgs),
    /// Score and select the best candidate (plus posterior over k)
    Select(SelectArgs),
    /// Run a full experiment grid from a config file
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    p: usize,
    /// Comma-separated cluster sizes, e.g. 10,10,10,10
    #[arg(long)]
    clusters: String,
    #[arg(long, value_parser = parse_dist, default_value = "invw")]
    block_dist: CovDist,
    #[arg(long, value_parser = parse_dist)]
    noise_dist: Option<CovDist>,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the raw samples as data.csv (off for huge n)
    #[arg(long)]
    write_csv: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Skip one header row
    #[arg(long)]
    has_header: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CandidatesArgs {
    #[arg(long)]
    stats: PathBuf,
    /// spectral | single | average
    #[arg(long, default_value = "spectral")]
    method: String,
    #[arg(long, default_value_t = 15)]
    k_max: usize,
    /// Comma-separated glasso regularization grid
    #[arg(long)]
    lambda_grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional truth.json; prints the oracle ANMI of the set
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EstimatorArgs {
    /// Criterion: proposed-vi[:beta] | proposed-mcmc[:beta] | basic-iw |
    /// ebic[:gamma] | aic | chi
    #[arg(long)]
    criterion: String,
    /// Noise weight for the proposed criteria (overrides the colon form)
    #[arg(long)]
    beta: Option<f64>,
    /// EBIC gamma (overrides the colon form)
    #[arg(long)]
    gamma: Option<f64>,
    /// MCMC retained samples M
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 10.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0.10)]
    burn_in: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop one-cluster candidates before selection
    #[arg(long)]
    exclude_one_cluster: bool,
    /// Keep one-cluster candidates even for EBIC/AIC
    #[arg(long, conflicts_with = "exclude_one_cluster")]
    keep_one_cluster: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write per-candidate ADMM iteration traces (proposed criteria only)
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Dump the full-posterior MH-within-Gibbs chain per candidate
    /// (proposed-mcmc only), as CSV of vectorized lower triangles
    #[arg(long)]
    dump_chains: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_dist(text: &str) -> Result<CovDist, String> {
    match text {
        "invw" => Ok(CovDist::Invw),
        "uniform" => Ok(CovDist::Uniform),
        _ => Err(format!("unknown distribution '{text}' (invw|uniform)")),
    }
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad integer '{t}'")))
        })
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad number '{t}'")))
        })
        .collect()
}

impl EstimatorArgs {
    fn criterion(&self) -> Result<Criterion, CliError> {
        let mut crit = Criterion::parse(&self.criterion).map_err(CliError::usage)?;
        if let Some(beta) = self.beta {
            match &mut crit {
                Criterion::ProposedVi { beta: b } | Criterion::ProposedMcmc { beta: b } => {
                    *b = beta
                }
                _ => return Err(CliError::Usage("--beta only applies to proposed-*".into())),
            }
        }
        if let Some(gamma) = self.gamma {
            match &mut crit {
                Criterion::Ebic { gamma: g } => *g = gamma,
                _ => return Err(CliError::Usage("--gamma only applies to ebic".into())),
            }
        }
        Ok(crit)
    }

    fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            admm: AdmmConfig::balanced(),
            mcmc: McmcConfig {
                samples: self.samples,
                burn_in_frac: self.burn_in,
                kappa: self.kappa,
                seed: self.seed,
                ..McmcConfig::default()
            },
            exclude_one_cluster: if self.exclude_one_cluster {
                Some(true)
            } else if self.keep_one_cluster {
                Some(false)
            } else {
                None
            },
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        p: args.p,
        cluster_sizes: parse_usize_list(&args.clusters)?,
        block_dist: args.block_dist,
        noise_dist: args.noise_dist,
        eta: args.eta,
        n: args.n,
        seed: args.seed,
    };
    spec.validate().map_err(CliError::usage)?;
    let data = generate_dataset(&spec).map_err(CliError::numerical)?;
    std::fs::create_dir_all(&args.out_dir).map_err(CliError::io)?;
    io::write_json(&args.out_dir.join("stats.json"), &data.stats)?;
    io::write_json(
        &args.out_dir.join("truth.json"),
        &io::TruthFile {
            labels: data.truth.labels().to_vec(),
            eta: spec.eta,
            seed: spec.seed,
        },
    )?;
    if args.write_csv {
        io::write_samples_csv(&args.out_dir.join("data.csv"), &spec)?;
    }
    println!(
        "wrote {} (p = {}, n = {})",
        args.out_dir.display(),
        spec.p,
        spec.n
    );
    Ok(())
}

fn cmd_ingest(args: &IngestArgs) -> Result<(), CliError> {
    let stats = io::ingest_csv(&args.input, args.has_header)?;
    std::fs::create_dir_all(&args.out_dir).map_err(CliError::io)?;
    io::write_json(&args.out_dir.join("stats.json"), &stats)?;
    println!(
        "ingested {} samples of {} standardized variables",
        stats.n, stats.p
    );
    Ok(())
}

fn cmd_candidates(args: &CandidatesArgs) -> Result<(), CliError> {
    let stats = io::read_stats(&args.stats)?;
    let set = match args.method.as_str() {
        "spectral" => {
            let mut cfg = GlassoConfig {
                k_max: args.k_max,
                ..GlassoConfig::default()
            };
            if let Some(grid) = &args.lambda_grid {
                cfg.lambda_grid = parse_f64_list(grid)?;
            }
            spectral_candidates(&stats, &cfg, args.seed).map_err(CliError::numerical)?
        }
        "single" => linkage_candidates(&stats, LinkageMethod::Single, args.k_max)
            .map_err(CliError::numerical)?,
        "average" => linkage_candidates(&stats, LinkageMethod::Average, args.k_max)
            .map_err(CliError::numerical)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown method '{other}' (spectral|single|average)"
            )))
        }
    };
    for w in &set.warnings {
        eprintln!("warning: {w}");
    }
    io::write_json(&args.out, &set)?;
    println!("candidates: {}", set.len());
    if let Some(truth_path) = &args.truth {
        let truth = io::read_truth(truth_path)?;
        let clustering = Clustering::canonicalize(&truth.labels).map_err(CliError::data)?;
        let oracle = set.oracle_anmi(&clustering).map_err(CliError::numerical)?;
        println!("oracle_anmi: {oracle}");
    }
    Ok(())
}

fn check_dims(
    stats: &covclust::model::SampleStats,
    set: &covclust::candidates::CandidateSet,
) -> Result<(), CliError> {
    for cand in &set.candidates {
        if cand.clustering.p() != stats.p {
            return Err(CliError::Data(format!(
                "candidate has {} variables but stats has p = {}",
                cand.clustering.p(),
                stats.p
            )));
        }
    }
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let stats = io::read_stats(&args.stats)?;
    let set = io::read_candidates(&args.candidates)?;
    check_dims(&stats, &set)?;
    let criterion = args.estimator.criterion()?;
    let cfg = args.estimator.score_config();
    let records = score_all(&stats, &set, &criterion, &cfg).map_err(CliError::numerical)?;
    io::write_json(&args.out, &records)?;
    println!("scored {} candidates with {}", records.len(), criterion.name());

    if let Some(dir) = &args.trace_dir {
        let beta = match &criterion {
            Criterion::ProposedVi { beta } | Criterion::ProposedMcmc { beta } => *beta,
            _ => {
                return Err(CliError::Usage(
                    "--trace-dir needs a proposed-* criterion (the MAP solve produces the trace)"
                        .into(),
                ))
            }
        };
        std::fs::create_dir_all(dir).map_err(CliError::io)?;
        for (i, cand) in set.candidates.iter().enumerate() {
            let hyper =
                Hyperparams::noninformative(&cand.clustering, beta).map_err(CliError::numerical)?;
            let admm = AdmmConfig {
                keep_trace: true,
                ..cfg.admm.clone()
            };
            let sol = covclust::map::solve_map(&stats, &cand.clustering, &hyper, &admm)
                .map_err(CliError::numerical)?;
            io::write_trace_csv(&dir.join(format!("trace_{i}.csv")), &sol.trace)?;
        }
    }

    if let Some(dir) = &args.dump_chains {
        let beta = match &criterion {
            Criterion::ProposedMcmc { beta } => *beta,
            _ => {
                return Err(CliError::Usage(
                    "--dump-chains needs the proposed-mcmc criterion".into(),
                ))
            }
        };
        std::fs::create_dir_all(dir).map_err(CliError::io)?;
        for (i, cand) in set.candidates.iter().enumerate() {
            let hyper =
                Hyperparams::noninformative(&cand.clustering, beta).map_err(CliError::numerical)?;
            let sol = covclust::map::solve_map(&stats, &cand.clustering, &hyper, &cfg.admm)
                .map_err(CliError::numerical)?;
            let mut modes = vec![sol.sigma_eps().map_err(CliError::numerical)?];
            modes.extend(sol.sigma_blocks().map_err(CliError::numerical)?);
            let mut mcmc_cfg = cfg.mcmc.clone();
            mcmc_cfg.seed = mcmc_cfg.seed.wrapping_add(i as u64);
            let mut rng = covclust::rng::task_rng(mcmc_cfg.seed, 1);
            let chain = mh_within_gibbs(
                1,
                &modes,
                &stats,
                &cand.clustering,
                &hyper,
                &mcmc_cfg,
                &mut rng,
            )
            .map_err(CliError::numerical)?;
            let rows: Vec<Vec<f64>> = chain.states.iter().map(|s| vectorize_state(s)).collect();
            io::write_chain_csv(&dir.join(format!("chain_{i}.csv")), &rows)?;
        }
    }
    Ok(())
}

fn cmd_select(args: &SelectArgs) -> Result<(), CliError> {
    let stats = io::read_stats(&args.stats)?;
    let set = io::read_candidates(&args.candidates)?;
    check_dims(&stats, &set)?;
    let criterion = args.estimator.criterion()?;
    let cfg = args.estimator.score_config();
    let result = select(&stats, &set, &criterion, &cfg).map_err(CliError::numerical)?;
    io::write_json(&args.out, &result)?;
    println!(
        "selected k = {} with {}: {:?}",
        result.best.k(),
        criterion.name(),
        result.best.labels()
    );
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(CliError::Clap)?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Candidates(args) => cmd_candidates(args),
        Command::Score(args) => cmd_score(args),
        Command::Select(args) => cmd_select(args),
        Command::Experiment(args) => experiment::run(&args.config),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Clap(e)) => {
            // --help and --version are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
