//! Experiment grids: (η, n, repetition) cells with per-criterion selection,
//! aggregated into the table layout of the simulation study (rows =
//! criteria, columns = n, cells = "mean (std)" ANMI), plus posterior-over-k
//! dumps and a manifest that makes every cell re-derivable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use covclust::candidates::{
    linkage_candidates, spectral_candidates, CandidateSet, GlassoConfig, LinkageMethod,
};
use covclust::evaluation::{aggregate, anmi, format_mean_std};
use covclust::map::AdmmConfig;
use covclust::mcmc::McmcConfig;
use covclust::model::Clustering;
use covclust::selection::{select, Criterion, ScoreConfig};
use covclust::synth::{generate_dataset, CovDist, SynthSpec};

use crate::io::{write_json, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub p: usize,
    pub cluster_sizes: Vec<usize>,
    pub block_dist: CovDist,
    #[serde(default)]
    pub noise_dist: Option<CovDist>,
    pub etas: Vec<f64>,
    pub n_values: Vec<usize>,
    pub repetitions: usize,
    pub criteria: Vec<String>,
    #[serde(default = "default_method")]
    pub candidate_method: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub glasso: GlassoConfig,
    #[serde(default = "default_admm")]
    pub admm: AdmmConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
}

fn default_method() -> String {
    "spectral".into()
}

fn default_admm() -> AdmmConfig {
    AdmmConfig::balanced()
}

#[derive(Debug, Serialize)]
struct CellResult {
    anmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    posterior_k: Option<BTreeMap<usize, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct CellRecord {
    eta: f64,
    n: usize,
    rep: usize,
    seed: u64,
    candidate_count: usize,
    oracle_anmi: f64,
    results: BTreeMap<String, CellResult>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    cells: Vec<CellRecord>,
}

pub fn run(config_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path).map_err(CliError::io)?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(CliError::data)?;
    validate(&config)?;

    let criteria: Vec<(String, Criterion)> = config
        .criteria
        .iter()
        .map(|c| Criterion::parse(c).map(|crit| (c.clone(), crit)))
        .collect::<Result<_, _>>()
        .map_err(CliError::usage)?;

    std::fs::create_dir_all(&config.out_dir).map_err(CliError::io)?;
    let mut cells: Vec<CellRecord> = Vec::new();

    for (ei, &eta) in config.etas.iter().enumerate() {
        for (ni, &n) in config.n_values.iter().enumerate() {
            for rep in 0..config.repetitions {
                let seed = config
                    .seed
                    .wrapping_add(1_000_000 * ei as u64)
                    .wrapping_add(10_000 * ni as u64)
                    .wrapping_add(rep as u64);
                let cell = run_cell(&config, &criteria, eta, n, rep, seed)?;
                eprintln!(
                    "cell eta={eta} n={n} rep={rep}: candidates={} oracle={:.3}",
                    cell.candidate_count, cell.oracle_anmi
                );
                cells.push(cell);
            }
        }
    }

    write_tables(&config, &criteria, &cells)?;
    write_json(
        &config.out_dir.join("manifest.json"),
        &Manifest {
            config: &config,
            cells,
        },
    )?;
    println!("experiment complete: {}", config.out_dir.display());
    Ok(())
}

fn validate(config: &ExperimentConfig) -> Result<(), CliError> {
    if config.repetitions == 0 {
        return Err(CliError::Usage("repetitions must be >= 1".into()));
    }
    if config.criteria.is_empty() {
        return Err(CliError::Usage("criteria must be non-empty".into()));
    }
    if config.cluster_sizes.iter().sum::<usize>() != config.p {
        return Err(CliError::Usage("cluster sizes must sum to p".into()));
    }
    if config.etas.iter().any(|&e| e > 0.0) && config.noise_dist.is_none() {
        return Err(CliError::Usage(
            "a positive eta requires noise_dist".into(),
        ));
    }
    Ok(())
}

fn run_cell(
    config: &ExperimentConfig,
    criteria: &[(String, Criterion)],
    eta: f64,
    n: usize,
    rep: usize,
    seed: u64,
) -> Result<CellRecord, CliError> {
    let spec = SynthSpec {
        p: config.p,
        cluster_sizes: config.cluster_sizes.clone(),
        block_dist: config.block_dist,
        noise_dist: if eta > 0.0 { config.noise_dist } else { None },
        eta,
        n,
        seed,
    };
    let data = generate_dataset(&spec).map_err(CliError::numerical)?;
    let set: CandidateSet = match config.candidate_method.as_str() {
        "spectral" => spectral_candidates(&data.stats, &config.glasso, seed)
            .map_err(CliError::numerical)?,
        "single" => linkage_candidates(&data.stats, LinkageMethod::Single, config.glasso.k_max)
            .map_err(CliError::numerical)?,
        "average" => linkage_candidates(&data.stats, LinkageMethod::Average, config.glasso.k_max)
            .map_err(CliError::numerical)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown candidate method '{other}'"
            )))
        }
    };
    let oracle = set.oracle_anmi(&data.truth).map_err(CliError::numerical)?;

    let mut results = BTreeMap::new();
    for (label, criterion) in criteria {
        let cfg = ScoreConfig {
            admm: config.admm.clone(),
            mcmc: McmcConfig {
                seed,
                ..config.mcmc.clone()
            },
            exclude_one_cluster: None,
        };
        let outcome = select(&data.stats, &set, criterion, &cfg);
        let result = match outcome {
            Ok(sel) => {
                let agreement =
                    agreement_with_truth(&sel.best, &data.truth).map_err(CliError::numerical)?;
                CellResult {
                    anmi: Some(agreement),
                    selected_k: Some(sel.best.k()),
                    posterior_k: sel.posterior_k,
                    error: None,
                }
            }
            Err(e) => CellResult {
                anmi: None,
                selected_k: None,
                posterior_k: None,
                error: Some(e.to_string()),
            },
        };
        results.insert(label.clone(), result);
    }

    Ok(CellRecord {
        eta,
        n,
        rep,
        seed,
        candidate_count: set.len(),
        oracle_anmi: oracle,
        results,
    })
}

fn agreement_with_truth(best: &Clustering, truth: &Clustering) -> covclust::Result<f64> {
    anmi(best, truth)
}

fn eta_tag(eta: f64) -> String {
    format!("{eta}").replace('.', "_")
}

fn write_tables(
    config: &ExperimentConfig,
    criteria: &[(String, Criterion)],
    cells: &[CellRecord],
) -> Result<(), CliError> {
    for &eta in &config.etas {
        let tag = eta_tag(eta);

        // ANMI table: rows = criteria, columns = n
        let mut table = csv::Writer::from_path(config.out_dir.join(format!("anmi_eta{tag}.csv")))
            .map_err(CliError::data)?;
        let mut header = vec!["criterion".to_string()];
        header.extend(config.n_values.iter().map(|n| n.to_string()));
        table.write_record(&header).map_err(CliError::data)?;
        for (label, _) in criteria {
            let mut row = vec![label.clone()];
            for &n in &config.n_values {
                let values: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.eta == eta && c.n == n)
                    .filter_map(|c| c.results.get(label).and_then(|r| r.anmi))
                    .collect();
                row.push(if values.is_empty() {
                    "NA".into()
                } else {
                    let (mean, std) = aggregate(&values).map_err(CliError::numerical)?;
                    format_mean_std(mean, std)
                });
            }
            table.write_record(&row).map_err(CliError::data)?;
        }
        table.flush().map_err(CliError::io)?;

        // oracle quality of the hypothesis space
        let mut oracle =
            csv::Writer::from_path(config.out_dir.join(format!("oracle_eta{tag}.csv")))
                .map_err(CliError::data)?;
        let mut header = vec!["measure".to_string()];
        header.extend(config.n_values.iter().map(|n| n.to_string()));
        oracle.write_record(&header).map_err(CliError::data)?;
        for measure in ["oracle_anmi", "candidate_count"] {
            let mut row = vec![measure.to_string()];
            for &n in &config.n_values {
                let values: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.eta == eta && c.n == n)
                    .map(|c| {
                        if measure == "oracle_anmi" {
                            c.oracle_anmi
                        } else {
                            c.candidate_count as f64
                        }
                    })
                    .collect();
                let (mean, std) = aggregate(&values).map_err(CliError::numerical)?;
                row.push(format_mean_std(mean, std));
            }
            oracle.write_record(&row).map_err(CliError::data)?;
        }
        oracle.flush().map_err(CliError::io)?;

        // posterior over k (likelihood criteria only), per repetition
        let mut post =
            csv::Writer::from_path(config.out_dir.join(format!("posterior_k_eta{tag}.csv")))
                .map_err(CliError::data)?;
        post.write_record(["criterion", "n", "rep", "k", "probability"])
            .map_err(CliError::data)?;
        for cell in cells.iter().filter(|c| c.eta == eta) {
            for (label, result) in &cell.results {
                if let Some(pk) = &result.posterior_k {
                    for (k, prob) in pk {
                        post.write_record([
                            label.clone(),
                            cell.n.to_string(),
                            cell.rep.to_string(),
                            k.to_string(),
                            format!("{prob}"),
                        ])
                        .map_err(CliError::data)?;
                    }
                }
            }
        }
        post.flush().map_err(CliError::io)?;
    }
    Ok(())
}
