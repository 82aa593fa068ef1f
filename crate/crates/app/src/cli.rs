use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dext_core::detector::DetectorModel;
use dext_core::eval::{CurveSummary, MetricCode};
use dext_core::formats;
use dext_core::image::heatmap_png;
use dext_core::ranking::{self, EloLedger, DEFAULT_K};
use dext_core::saliency::{Baseline, Method, MethodParams};
use serde_json::json;

use crate::error::AppError;
use crate::ops::{self, CauseName, Decision, EffectName, EvalSpec, ExplainSpec, MethodName, MovisName, SettingName};
use crate::session::Session;

#[derive(Debug, Parser)]
#[command(name = "dext", version, about = "Explain, visualize and evaluate detector decisions")]
pub struct Cli {
    /// DXTW weight file; defaults to the bundled seeded detector
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print detections of an image as JSON
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a DXTS saliency grid and its JSON sidecar
    Explain {
        #[command(flatten)]
        target: TargetArgs,
        /// Output grid path; the sidecar goes next to it with a .json extension
        #[arg(long)]
        out: PathBuf,
        /// Also write a heatmap PNG
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Draw all detections and their explanation shapes into one overlay
    Movis {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        movis: MovisName,
        #[arg(long, default_value = "class")]
        decision: Decision,
        #[arg(long, default_value = "gbp")]
        method: MethodName,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write shapes as JSON
        #[arg(long)]
        shapes: Option<PathBuf>,
    },
    /// Deletion or insertion curve of one decision as CSV
    Evaluate {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        cause: CauseName,
        #[arg(long)]
        effect: EffectName,
        #[arg(long)]
        setting: SettingName,
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the summary JSON here
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Rank methods from an AAUC table, a rank table or a game log
    Rank {
        /// CSV with a subject column and one AAUC column per metric code
        #[arg(long, conflicts_with_all = ["ranks", "games"])]
        aauc: Option<PathBuf>,
        /// CSV with a subject column and one rank column per metric
        #[arg(long, conflicts_with = "games")]
        ranks: Option<PathBuf>,
        /// JSON-lines game log
        #[arg(long)]
        games: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// User-study actions against the session in DEXT_DATA_DIR
    Study {
        #[command(subcommand)]
        action: StudyAction,
    },
    /// Run the HTTP API
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyAction {
    /// Sample the next blinded question
    Next,
    /// Answer a question; score is robot A's preference in -2..=2
    Answer {
        #[arg(long)]
        question: String,
        #[arg(long, allow_hyphen_values = true, value_parser = clap::value_parser!(i8).range(-2..=2))]
        score: i8,
    },
    /// Vote for a visualization method or "none"
    Vote {
        #[arg(long)]
        option: String,
    },
    /// Current ratings and vote tallies
    Ranking,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub detection: usize,
    #[arg(long, default_value = "class")]
    pub decision: Decision,
    #[arg(long)]
    pub method: MethodName,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Debug, Args)]
pub struct ParamArgs {
    #[arg(long, default_value_t = MethodParams::default().ig_steps)]
    pub ig_steps: usize,
    /// Gray level of the integrated-gradients baseline; black when omitted
    #[arg(long)]
    pub ig_gray: Option<f32>,
    #[arg(long, default_value_t = MethodParams::default().sg_samples)]
    pub sg_samples: usize,
    #[arg(long, default_value_t = MethodParams::default().sg_noise)]
    pub sg_noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ParamArgs {
    pub fn params(&self) -> MethodParams {
        MethodParams {
            ig_steps: self.ig_steps,
            ig_baseline: self.ig_gray.map_or(Baseline::Black, Baseline::Gray),
            sg_samples: self.sg_samples,
            sg_noise: self.sg_noise,
            seed: self.seed,
        }
    }
}

impl TargetArgs {
    fn spec(&self) -> ExplainSpec {
        ExplainSpec {
            detection: self.detection,
            decision: self.decision,
            method: self.method,
            params: self.params.params(),
        }
    }
}

fn read_input(path: &Path, flag: &str) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| AppError::Invalid(format!("--{flag} {}: {e}", path.display())).into())
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct Loaded {
    model: DetectorModel,
    image: dext_core::image::Image,
    detections: Vec<dext_core::detector::Detection>,
}

fn load(weights: Option<&Path>, image: &Path) -> anyhow::Result<Loaded> {
    let model = ops::load_model(weights)?;
    let bytes = read_input(image, "image")?;
    let (image, _) = ops::ingest_png(&bytes, model.input_size())?;
    let detections = model.detect(&image).map_err(AppError::from)?;
    Ok(Loaded { model, image, detections })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let weights = cli.weights.as_deref();
    match cli.command {
        Command::Detect { image, out } => {
            let l = load(weights, &image)?;
            write_or_print(out.as_deref(), &(serde_json::to_string_pretty(&l.detections)? + "\n"))
        }
        Command::Explain { target, out, heatmap } => {
            let l = load(weights, &target.image)?;
            let spec = target.spec();
            let map = ops::explain(&l.model, &l.image, &l.detections, &spec)?;
            fs::write(&out, formats::write_saliency(&map))?;
            fs::write(out.with_extension("json"), formats::sidecar_json(&map, &spec.params))?;
            if let Some(h) = heatmap {
                fs::write(h, heatmap_png(&map.grid, map.height, map.width).map_err(AppError::from)?)?;
            }
            Ok(())
        }
        Command::Movis { image, movis, decision, method, params, out, shapes } => {
            let l = load(weights, &image)?;
            let (png, s) =
                ops::visualize(&l.model, &l.image, &l.detections, movis.0, decision, method.0, &params.params())?;
            fs::write(&out, png)?;
            if let Some(p) = shapes {
                fs::write(p, serde_json::to_string_pretty(&s)?)?;
            }
            Ok(())
        }
        Command::Evaluate { target, cause, effect, setting, out, summary } => {
            let l = load(weights, &target.image)?;
            let spec = EvalSpec { explain: target.spec(), cause, effect, setting };
            let result = ops::evaluate(&l.model, &l.image, &l.detections, &spec)?;
            write_or_print(out.as_deref(), &result.csv)?;
            let det = ops::detection_at(&l.detections, spec.explain.detection)?;
            let s = CurveSummary {
                code: result.code,
                auc: result.auc,
                method: spec.explain.method.to_string(),
                detector_config: serde_json::to_value(l.model.config())?,
                target: json!({
                    "detection": spec.explain.detection,
                    "anchor_index": det.anchor_index,
                    "decision": spec.explain.decision,
                }),
            };
            if let Some(p) = summary {
                fs::write(p, serde_json::to_string_pretty(&s)?)?;
            }
            eprintln!("{} AUC {}", result.code, result.auc);
            Ok(())
        }
        Command::Rank { aauc, ranks, games, out } => {
            let text = if let Some(p) = aauc {
                let (subjects, header, rows) = read_table(&p, "aauc")?;
                let metrics: Vec<MetricCode> = header
                    .iter()
                    .map(|h| {
                        h.parse().map_err(|_| AppError::Invalid(format!("--aauc: column {h:?} is not a metric code")))
                    })
                    .collect::<Result<_, _>>()?;
                let values: Vec<Vec<Option<f64>>> =
                    rows.iter().map(|r| r.iter().map(|v| v.trim().parse().ok()).collect()).collect();
                ranking::aggregate_ranks(&subjects, &metrics, &values).map_err(AppError::from)?.to_csv()
            } else if let Some(p) = ranks {
                let (subjects, header, rows) = read_table(&p, "ranks")?;
                let values: Vec<Vec<usize>> = rows
                    .iter()
                    .map(|r| {
                        r.iter()
                            .map(|v| {
                                v.trim().parse().map_err(|_| AppError::Invalid(format!("--ranks: bad rank {v:?}")))
                            })
                            .collect()
                    })
                    .collect::<Result<_, _>>()?;
                ranking::aggregate_rank_rows(&subjects, &header, values).map_err(AppError::from)?.to_csv()
            } else if let Some(p) = games {
                let text = String::from_utf8(read_input(&p, "games")?).context("game log is not UTF-8")?;
                let games = EloLedger::parse_jsonl(&text).map_err(AppError::from)?;
                let names: Vec<&str> = Method::EXPLAINERS.iter().map(|m| m.name()).collect();
                let ledger = EloLedger::replay(&names, DEFAULT_K, &games).map_err(AppError::from)?;
                serde_json::to_string_pretty(&ranking::rank_by_rating(&ledger).map_err(AppError::from)?)? + "\n"
            } else {
                bail!(AppError::Invalid("one of --aauc, --ranks or --games is required".into()));
            };
            write_or_print(out.as_deref(), &text)
        }
        Command::Study { action } => {
            let session = Session::from_env(Arc::new(ops::load_model(weights)?))?;
            let value = match action {
                StudyAction::Next => serde_json::to_value(session.study_next()?)?,
                StudyAction::Answer { question, score } => {
                    serde_json::to_value(session.study_answer(&question, score)?)?
                }
                StudyAction::Vote { option } => serde_json::to_value(session.vote(&option)?)?,
                StudyAction::Ranking => serde_json::to_value(session.ranking()?)?,
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::Serve { port } => {
            let session = Arc::new(Session::from_env(Arc::new(ops::load_model(weights)?))?);
            eprintln!("serving {} on port {port}", session.root().display());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(session, port))?;
            Ok(())
        }
    }
}

/// Subjects, metric header and cell strings of a `subject,<metric>...` CSV.
fn read_table(path: &Path, flag: &str) -> anyhow::Result<(Vec<String>, Vec<String>, Vec<Vec<String>>)> {
    let bytes = read_input(path, flag)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers()?.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut subjects = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| AppError::Invalid(format!("--{flag}: {e}")))?;
        let mut cells = record.iter();
        subjects.push(cells.next().unwrap_or_default().trim().to_string());
        // A trailing Overall column from an exported table is ignored.
        rows.push(cells.take(header.len()).map(str::to_string).collect());
    }
    let header = header.into_iter().filter(|h| h != "Overall").collect::<Vec<_>>();
    let rows = rows.into_iter().map(|r: Vec<String>| r.into_iter().take(header.len()).collect()).collect();
    Ok((subjects, header, rows))
}

/// Exit status for an error: 2 for invalid input, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<AppError>() {
        Some(AppError::Invalid(_)) => 2,
        _ => 1,
    }
}
