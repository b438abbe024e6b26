//! `paqm`: full-reference perceptual audio quality measurement.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 analysis pipeline error.

mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use paqm_core::audio_io::{load_audio, prepare_pair};
use paqm_core::cognitive_effects::{Cem, CemSummary};
use paqm_core::config::{PipelineConfig, TOOL_VERSION};
use paqm_core::distortion_metrics::{Dm, MovRecord};
use paqm_core::error::{Error, ErrorKind, Result};
use paqm_core::evaluation::{analyze_manifest, evaluate_db, DbManifest};
use paqm_core::pipeline::{analyze_pair, SeriesKind};
use paqm_core::salience_mapping::{
    compute_salience_targets, correlate_interactions, predict_baq, train_mapping, InteractionTable,
    ItemFeatures, SalienceMappingModel,
};

use output::{comment_header, pgm, to_json_line, write_atomic};

const INTERACTIONS_FORMAT: &str = "paqm-interactions";

#[derive(Parser, Debug)]
#[command(name = "paqm", version, about = "Perceptual audio quality measurement with cognitive effect metrics")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Key-value config file (`section.key = value` per line).
    #[arg(long, global = true, env = "PAQM_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set cem.bvar_window_s=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for batch commands (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure one reference/test pair.
    Compare {
        reference: PathBuf,
        test: PathBuf,
        /// Trained mapping model; adds a BAQ prediction.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Print the machine-readable report instead of the text summary.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate CEMs with per-DM salience over a listening-test manifest.
    AnalyzeInteractions {
        manifest: PathBuf,
        /// Interactions document (JSON) to write.
        #[arg(long)]
        out: PathBuf,
        /// Correlation matrix CSV; defaults to the output path with a .csv extension.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Minimum |r| for selection (overrides salience.threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Fit the salience-gated mapping model.
    Train {
        manifest: PathBuf,
        /// Interactions document from `analyze-interactions`.
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict BAQ over a manifest and report the pre-mapped correlation.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// JSON report file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Correlate per-condition means instead of items.
        #[arg(long)]
        pool_conditions: bool,
        /// Fit the cubic pre-map without the monotonicity constraint.
        #[arg(long)]
        unconstrained_premap: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write a band × frame matrix of one time-frequency series.
    ExportHeatmap {
        reference: PathBuf,
        test: PathBuf,
        /// One of ehs, pdev, bvar, ps, nprime.
        #[arg(long)]
        metric: String,
        /// CSV output: one row per band (lowest first), one column per frame.
        #[arg(long)]
        out: PathBuf,
        /// Grayscale PGM image of the same matrix.
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct CompareReport<'a> {
    format: &'static str,
    tool_version: &'static str,
    reference: &'a Path,
    test: &'a Path,
    lag_samples: i64,
    gain_applied_db: f64,
    frames: usize,
    mov: MovRecord,
    cem: CemSummary,
    baq: Option<f64>,
    config: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct InteractionsDocument {
    format: String,
    version: u32,
    tool_version: String,
    threshold: f64,
    n_items: usize,
    table: InteractionTable,
    config: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct TrainSummary {
    n_items: usize,
    rounds: usize,
    converged: bool,
    rmse: f64,
    gates: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("paqm: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 2,
        ErrorKind::Io => 3,
        ErrorKind::Pipeline => 4,
    }
}

fn load_config(global: &GlobalOpts) -> Result<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    for assignment in &global.set {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
        config.set(k, v)?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli.global)?;
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Compare {
            reference,
            test,
            model,
            json,
            out,
        } => compare(&config, &reference, &test, model.as_deref(), json, out.as_deref()),
        Command::AnalyzeInteractions {
            manifest,
            out,
            matrix,
            threshold,
        } => {
            if let Some(t) = threshold {
                config.set("salience.threshold", &t.to_string())?;
            }
            let matrix = matrix.unwrap_or_else(|| out.with_extension("csv"));
            analyze_interactions(&config, &manifest, &out, &matrix)
        }
        Command::Train {
            manifest,
            interactions,
            out,
        } => train(&config, &manifest, &interactions, &out),
        Command::Evaluate {
            manifest,
            model,
            out,
            pool_conditions,
            unconstrained_premap,
            json,
        } => {
            if pool_conditions {
                config.evaluation.pool_conditions = true;
            }
            if unconstrained_premap {
                config.evaluation.monotone_premap = false;
            }
            evaluate(&config, &manifest, &model, out.as_deref(), json)
        }
        Command::ExportHeatmap {
            reference,
            test,
            metric,
            out,
            image,
        } => export_heatmap(&config, &reference, &test, &metric, &out, image.as_deref()),
    }
}

/// Warns when a model was trained with different front-end settings.
fn check_model_config(model: &SalienceMappingModel, config: &PipelineConfig) {
    let current: BTreeMap<String, String> = config.to_key_values().into_iter().collect();
    let differing: Vec<&String> = ["align.", "ear.", "loudness.", "metrics.", "cem."]
        .iter()
        .flat_map(|prefix| current.keys().filter(move |k| k.starts_with(prefix)))
        .filter(|k| model.config.get(*k) != current.get(*k))
        .collect();
    if !differing.is_empty() {
        let names: Vec<&str> = differing.iter().map(|k| k.as_str()).collect();
        eprintln!(
            "paqm: warning: model was trained with different settings for {}",
            names.join(", ")
        );
    }
}

fn compare(
    config: &PipelineConfig,
    reference: &Path,
    test: &Path,
    model: Option<&Path>,
    json: bool,
    out: Option<&Path>,
) -> Result<()> {
    let model = model.map(SalienceMappingModel::load).transpose()?;
    if let Some(m) = &model {
        check_model_config(m, config);
    }
    let r = load_audio(reference)?;
    let t = load_audio(test)?;
    let pair = prepare_pair(&r, &t, &config.align)?;
    let analysis = analyze_pair(&pair, config)?;
    let summary = analysis.summary();
    let baq = model
        .as_ref()
        .map(|m| predict_baq(m, &summary.mov, &summary.cem))
        .transpose()?;
    let report = CompareReport {
        format: "paqm-compare",
        tool_version: TOOL_VERSION,
        reference,
        test,
        lag_samples: summary.lag_samples,
        gain_applied_db: summary.gain_applied_db,
        frames: summary.frames,
        mov: summary.mov,
        cem: summary.cem,
        baq,
        config: config.to_key_values().into_iter().collect(),
    };
    let text = to_json_line(&report);
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    if json {
        print!("{text}");
    } else {
        println!("reference  {}", reference.display());
        println!("test       {}", test.display());
        println!(
            "lag        {} samples, gain {:.2} dB, {} frames",
            summary.lag_samples, summary.gain_applied_db, summary.frames
        );
        for dm in Dm::ALL {
            println!("{:<14} {:>14.6}", dm.name(), summary.mov.get(dm));
        }
        for cem in Cem::ALL {
            println!("{:<14} {:>14.6}", cem.name(), summary.cem.get(cem));
        }
        if let Some(b) = baq {
            println!("{:<14} {:>14.2}", "BAQ", b);
        }
    }
    Ok(())
}

fn manifest_features(config: &PipelineConfig, manifest: &Path) -> Result<Vec<ItemFeatures>> {
    let manifest = DbManifest::load(manifest)?;
    Ok(analyze_manifest(&manifest, config)?
        .iter()
        .map(|a| a.features())
        .collect())
}

fn matrix_csv(table: &InteractionTable, header: &str) -> String {
    let mut out = String::from(header);
    out.push_str("cem");
    for dm in Dm::ALL {
        out.push(',');
        out.push_str(dm.name());
    }
    out.push('\n');
    for cem in Cem::ALL {
        out.push_str(cem.name());
        for dm in Dm::ALL {
            out.push(',');
            if let Some(r) = table.get(cem, dm) {
                out.push_str(&format!("{r}"));
            }
        }
        out.push('\n');
    }
    out
}

fn analyze_interactions(config: &PipelineConfig, manifest: &Path, out: &Path, matrix: &Path) -> Result<()> {
    let db = manifest_features(config, manifest)?;
    let targets = compute_salience_targets(&db, config)?;
    let cems: Vec<CemSummary> = db.iter().map(|it| it.cem_summary).collect();
    let threshold = config.salience.threshold;
    let table = correlate_interactions(&targets.values, &cems)?.with_selection(threshold);
    let header = comment_header(config, &[("threshold", threshold.to_string())]);
    let doc = InteractionsDocument {
        format: INTERACTIONS_FORMAT.into(),
        version: 1,
        tool_version: TOOL_VERSION.into(),
        threshold,
        n_items: db.len(),
        table,
        config: config.to_key_values().into_iter().collect(),
    };
    write_atomic(matrix, matrix_csv(&doc.table, &header).as_bytes())?;
    write_atomic(out, to_json_line(&doc).as_bytes())?;

    println!("{:<6} {:>14} {:>14} {:>14}", "", Dm::ALL[0].name(), Dm::ALL[1].name(), Dm::ALL[2].name());
    for cem in Cem::ALL {
        let cells: Vec<String> = Dm::ALL
            .iter()
            .map(|&dm| doc.table.get(cem, dm).map_or("-".into(), |r| format!("{r:.3}")))
            .collect();
        println!("{:<6} {:>14} {:>14} {:>14}", cem.name(), cells[0], cells[1], cells[2]);
    }
    println!("selected at |r| >= {threshold}:");
    for i in &doc.table.selected {
        println!("  {} -> {} ({}, r = {:.3})", i.cem, i.dm, i.sign, i.r);
    }
    Ok(())
}

fn load_interactions(path: &Path) -> Result<InteractionsDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: InteractionsDocument = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if doc.format != INTERACTIONS_FORMAT || doc.version != 1 {
        return Err(Error::ModelVersion {
            found: format!("{} v{}", doc.format, doc.version),
            expected: format!("{INTERACTIONS_FORMAT} v1"),
        });
    }
    Ok(doc)
}

fn train(config: &PipelineConfig, manifest: &Path, interactions: &Path, out: &Path) -> Result<()> {
    let doc = load_interactions(interactions)?;
    let db = manifest_features(config, manifest)?;
    let model = train_mapping(&db, &doc.table.selected, config)?;
    write_atomic(out, model.to_json().as_bytes())?;
    if !model.training.converged {
        eprintln!(
            "paqm: warning: training stopped after {} rounds without meeting the tolerance",
            model.training.rounds
        );
    }
    let summary = TrainSummary {
        n_items: model.training.n_items,
        rounds: model.training.rounds,
        converged: model.training.converged,
        rmse: model.training.rmse,
        gates: model.gates.len(),
    };
    println!(
        "trained on {} items in {} rounds (converged: {}), rmse {:.6}, {} gates",
        summary.n_items, summary.rounds, summary.converged, summary.rmse, summary.gates
    );
    Ok(())
}

fn evaluate(config: &PipelineConfig, manifest: &Path, model: &Path, out: Option<&Path>, json: bool) -> Result<()> {
    let model = SalienceMappingModel::load(model)?;
    check_model_config(&model, config);
    let manifest = DbManifest::load(manifest)?;
    let report = evaluate_db(&manifest, &model, config)?;
    let text = report.to_json();
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    if json {
        print!("{text}");
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn export_heatmap(
    config: &PipelineConfig,
    reference: &Path,
    test: &Path,
    metric: &str,
    out: &Path,
    image: Option<&Path>,
) -> Result<()> {
    let kind: SeriesKind = metric.parse()?;
    let r = load_audio(reference)?;
    let t = load_audio(test)?;
    let pair = prepare_pair(&r, &t, &config.align)?;
    let analysis = analyze_pair(&pair, config)?;
    let series = analysis.series(kind);
    // stored frames × bands; exported bands × frames
    let rows: Vec<Vec<f64>> = series.columns().into_iter().map(|c| c.to_vec()).collect();
    let header = comment_header(
        config,
        &[
            ("metric", metric.to_ascii_lowercase()),
            ("rows", "bands, lowest first".into()),
            ("frame_duration_s", analysis.frame_duration.to_string()),
        ],
    );
    let mut csv = header.clone();
    for row in &rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    if let Some(path) = image {
        // image rows run top to bottom, so the highest band goes first
        let flipped: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        write_atomic(path, &pgm(&flipped, &header))?;
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::io("a.wav", std::io::Error::other("gone"))), 3);
        assert_eq!(exit_code(&Error::ConstantVector("x".into())), 4);
    }
}
