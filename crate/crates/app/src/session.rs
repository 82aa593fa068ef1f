//! File-backed session: uploaded images, cached detections, saliency maps,
//! evaluation results and the study ledger under one data directory.
//!
//! ```text
//! <root>/images/<id>.png             model-size image
//! <root>/images/<id>.json            ingestion record
//! <root>/images/<id>.detections.json
//! <root>/saliency/<id>.dxts          grid
//! <root>/saliency/<id>.json          sidecar
//! <root>/saliency/<id>.request.json
//! <root>/manipulated/<id>.png
//! <root>/results/<id>.json           evaluation results
//! <root>/overlays/<id>.png
//! <root>/study/questions/<id>.json
//! <root>/study/games.jsonl
//! <root>/study/votes.jsonl
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use dext_core::detector::{Detection, DetectorModel};
use dext_core::eval::Cause;
use dext_core::formats;
use dext_core::image::{heatmap_png, Image};
use dext_core::movis::MovisMethod;
use dext_core::ranking::{self, EloLedger, Game, RatedMethod, VoteTally, DEFAULT_K};
use dext_core::saliency::{Method, MethodParams, SaliencyMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::ops::{self, CauseName, Decision, EvalResult, EvalSpec, ExplainSpec, IngestInfo, MethodName};

pub const DATA_DIR_ENV: &str = "DEXT_DATA_DIR";

/// First 16 bytes of SHA-256, hex encoded.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

fn json_id<T: Serialize>(value: &T) -> String {
    content_id(&serde_json::to_vec(value).expect("request serializes"))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    #[serde(flatten)]
    pub ingest: IngestInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExplainRequest {
    pub image_id: String,
    #[serde(flatten)]
    pub spec: ExplainSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExplanationRecord {
    pub saliency_id: String,
    pub heatmap_url: String,
    pub image_id: String,
    pub detection: usize,
    pub decision: Decision,
    pub method: MethodName,
    pub raw_range: (f32, f32),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluateRequest {
    pub image_id: String,
    #[serde(flatten)]
    pub spec: EvalSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManipulateRequest {
    pub saliency_id: String,
    pub cause: CauseName,
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManipulateResponse {
    pub image_url: String,
    pub fraction: f64,
    pub pixels_manipulated: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlindedExplanation {
    pub saliency_id: String,
    pub heatmap_url: String,
}

/// Question as shown to a participant: no method names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StudyQuestion {
    pub question_id: String,
    pub image_id: String,
    pub detection: usize,
    pub decision: Decision,
    pub robot_a: BlindedExplanation,
    pub robot_b: BlindedExplanation,
}

/// Stored question with its unblinding record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuestionRecord {
    pub question: StudyQuestion,
    /// Unordered pair in canonical order.
    pub pair: (MethodName, MethodName),
    /// Whether robot A shows the second method of `pair`.
    pub swapped: bool,
    pub answered: bool,
}

impl QuestionRecord {
    /// Methods shown as robot A and robot B.
    pub fn unblind(&self) -> (Method, Method) {
        if self.swapped {
            (self.pair.1 .0, self.pair.0 .0)
        } else {
            (self.pair.0 .0, self.pair.1 .0)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Ranking {
    pub ratings: Vec<RatedMethod>,
    pub games: usize,
    pub votes: VoteTally,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnswerResult {
    pub robot_a: Method,
    pub robot_b: Method,
    pub score: i8,
    pub rating_change: f64,
    pub ranking: Ranking,
}

pub struct Session {
    root: PathBuf,
    model: Arc<DetectorModel>,
    /// Parameters for study explanations.
    pub study_params: MethodParams,
    pub study_seed: u64,
    ledger_lock: Mutex<()>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Session {
    pub fn open(root: impl Into<PathBuf>, model: Arc<DetectorModel>) -> AppResult<Self> {
        let root = root.into();
        for dir in ["images", "saliency", "manipulated", "results", "overlays", "study/questions"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Self { root, model, study_params: MethodParams::default(), study_seed: 0, ledger_lock: Mutex::new(()) })
    }

    /// Opens the directory named by `DEXT_DATA_DIR`, defaulting to `./dext-data`.
    pub fn from_env(model: Arc<DetectorModel>) -> AppResult<Self> {
        let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("dext-data"));
        Self::open(root, model)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    fn path(&self, dir: &str, id: &str, suffix: &str) -> AppResult<PathBuf> {
        if !valid_id(id) {
            return Err(AppError::NotFound(format!("{dir} {id:?}")));
        }
        Ok(self.root.join(dir).join(format!("{id}{suffix}")))
    }

    pub fn upload(&self, png: &[u8]) -> AppResult<ImageRecord> {
        let (image, ingest) = ops::ingest_png(png, self.model.input_size())?;
        let stored = image.to_png()?;
        let image_id = content_id(&stored);
        let record = ImageRecord { image_id: image_id.clone(), ingest };
        let png_path = self.path("images", &image_id, ".png")?;
        if !png_path.exists() {
            write_atomic(&png_path, &stored)?;
        }
        let meta = self.path("images", &image_id, ".json")?;
        if !meta.exists() {
            write_json(&meta, &record)?;
        }
        Ok(record)
    }

    pub fn image_png(&self, image_id: &str) -> AppResult<Vec<u8>> {
        let path = self.path("images", image_id, ".png")?;
        fs::read(&path).map_err(|_| AppError::NotFound(format!("image {image_id}")))
    }

    pub fn image(&self, image_id: &str) -> AppResult<Image> {
        Ok(Image::from_png(&self.image_png(image_id)?)?)
    }

    pub fn image_ids(&self) -> AppResult<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("images"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().to_string();
                name.strip_suffix(".png").map(str::to_string)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn detections(&self, image_id: &str) -> AppResult<Vec<Detection>> {
        let path = self.path("images", image_id, ".detections.json")?;
        if let Some(d) = read_json(&path)? {
            return Ok(d);
        }
        let image = self.image(image_id)?;
        let dets = self.model.detect(&image)?;
        write_json(&path, &dets)?;
        Ok(dets)
    }

    pub fn explain(&self, request: &ExplainRequest) -> AppResult<ExplanationRecord> {
        let saliency_id = json_id(request);
        let request_path = self.path("saliency", &saliency_id, ".request.json")?;
        let record = ExplanationRecord {
            heatmap_url: format!("/explanations/{saliency_id}/heatmap.png"),
            saliency_id: saliency_id.clone(),
            image_id: request.image_id.clone(),
            detection: request.spec.detection,
            decision: request.spec.decision,
            method: request.spec.method,
            raw_range: (0.0, 0.0),
        };
        if let Some((map, _)) = self.try_saliency(&saliency_id)? {
            return Ok(ExplanationRecord { raw_range: map.raw_range, ..record });
        }
        let image = self.image(&request.image_id)?;
        let detections = self.detections(&request.image_id)?;
        let map = ops::explain(&self.model, &image, &detections, &request.spec)?;
        write_atomic(&self.path("saliency", &saliency_id, ".dxts")?, &formats::write_saliency(&map))?;
        write_atomic(
            &self.path("saliency", &saliency_id, ".json")?,
            formats::sidecar_json(&map, &request.spec.params).as_bytes(),
        )?;
        write_json(&request_path, request)?;
        Ok(ExplanationRecord { raw_range: map.raw_range, ..record })
    }

    fn try_saliency(&self, saliency_id: &str) -> AppResult<Option<(SaliencyMap, ExplainRequest)>> {
        let Some(request) = read_json::<ExplainRequest>(&self.path("saliency", saliency_id, ".request.json")?)? else {
            return Ok(None);
        };
        let grid = fs::read(self.path("saliency", saliency_id, ".dxts")?)?;
        let sidecar = fs::read_to_string(self.path("saliency", saliency_id, ".json")?)?;
        let (map, _) = formats::read_saliency(&grid, &sidecar)?;
        Ok(Some((map, request)))
    }

    pub fn saliency(&self, saliency_id: &str) -> AppResult<(SaliencyMap, ExplainRequest)> {
        self.try_saliency(saliency_id)?.ok_or_else(|| AppError::NotFound(format!("saliency {saliency_id}")))
    }

    pub fn heatmap_png(&self, saliency_id: &str) -> AppResult<Vec<u8>> {
        let (map, _) = self.saliency(saliency_id)?;
        Ok(heatmap_png(&map.grid, map.height, map.width)?)
    }

    pub fn manipulate(&self, request: &ManipulateRequest) -> AppResult<ManipulateResponse> {
        let (map, explain) = self.saliency(&request.saliency_id)?;
        let image = self.image(&explain.image_id)?;
        let cause: Cause = request.cause.0;
        let out = ops::manipulate(&image, &map, cause, request.fraction)?;
        let png = out.to_png()?;
        let id = json_id(request);
        let path = self.path("manipulated", &id, ".png")?;
        if !path.exists() {
            write_atomic(&path, &png)?;
        }
        let pixels_manipulated = dext_core::eval::pixels_at(request.fraction, image.pixel_count());
        Ok(ManipulateResponse {
            image_url: format!("/manipulated/{id}/image.png"),
            fraction: request.fraction,
            pixels_manipulated,
            detections: self.model.detect(&out)?,
        })
    }

    pub fn manipulated_png(&self, id: &str) -> AppResult<Vec<u8>> {
        fs::read(self.path("manipulated", id, ".png")?)
            .map_err(|_| AppError::NotFound(format!("manipulated image {id}")))
    }

    pub fn evaluate(&self, request: &EvaluateRequest) -> AppResult<EvalResult> {
        let path = self.path("results", &json_id(request), ".json")?;
        if let Some(r) = read_json(&path)? {
            return Ok(r);
        }
        let image = self.image(&request.image_id)?;
        let detections = self.detections(&request.image_id)?;
        let result = ops::evaluate(&self.model, &image, &detections, &request.spec)?;
        write_json(&path, &result)?;
        Ok(result)
    }

    pub fn visualization(
        &self,
        image_id: &str,
        movis: MovisMethod,
        decision: Decision,
        method: Method,
    ) -> AppResult<Vec<u8>> {
        let key = json_id(&(image_id, movis, decision, MethodName(method)));
        let path = self.path("overlays", &key, ".png")?;
        if let Ok(bytes) = fs::read(&path) {
            return Ok(bytes);
        }
        let image = self.image(image_id)?;
        let detections = self.detections(image_id)?;
        let (png, _) =
            ops::visualize(&self.model, &image, &detections, movis, decision, method, &MethodParams::default())?;
        write_atomic(&path, &png)?;
        Ok(png)
    }

    fn games_path(&self) -> PathBuf {
        self.root.join("study/games.jsonl")
    }

    fn votes_path(&self) -> PathBuf {
        self.root.join("study/votes.jsonl")
    }

    /// Ratings rebuilt by replaying the game log.
    pub fn ledger(&self) -> AppResult<EloLedger> {
        let text = match fs::read_to_string(self.games_path()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let games = EloLedger::parse_jsonl(&text)?;
        Ok(EloLedger::replay(&method_names(), DEFAULT_K, &games)?)
    }

    pub fn votes(&self) -> AppResult<VoteTally> {
        let text = fs::read_to_string(self.votes_path()).unwrap_or_default();
        let answers: Vec<String> =
            text.lines().filter(|l| !l.is_empty()).map(|l| serde_json::from_str(l)).collect::<Result<_, _>>()?;
        Ok(ranking::tally_votes(&answers)?)
    }

    pub fn ranking(&self) -> AppResult<Ranking> {
        let ledger = self.ledger()?;
        let ratings = match ranking::rank_by_rating(&ledger) {
            Ok(r) => r,
            Err(ranking::RankingError::EmptyLedger) => {
                ledger.ratings.iter().map(|(m, &r)| RatedMethod { method: m.clone(), rating: r, games: 0 }).collect()
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Ranking { ratings, games: ledger.games.len(), votes: self.votes()? })
    }

    /// Samples a detection, a decision and an unordered method pair and
    /// blinds the pair's order.
    pub fn study_next(&self) -> AppResult<StudyQuestion> {
        let _guard = self.ledger_lock.lock().map_err(AppError::internal)?;
        let mut pool = Vec::new();
        for image_id in self.image_ids()? {
            for d in 0..self.detections(&image_id)?.len() {
                pool.push((image_id.clone(), d));
            }
        }
        if pool.is_empty() {
            return Err(AppError::NotFound("detections to sample (upload an image first)".into()));
        }
        let pairs: Vec<(Method, Method)> = Method::EXPLAINERS
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| Method::EXPLAINERS[i + 1..].iter().map(move |&b| (a, b)))
            .collect();
        let n = fs::read_dir(self.root.join("study/questions"))?.count() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.study_seed);
        rng.set_stream(n);
        let (image_id, detection) = pool[rng.random_range(0..pool.len())].clone();
        let decision = Decision::ALL[rng.random_range(0..Decision::ALL.len())];
        let (m1, m2) = pairs[rng.random_range(0..pairs.len())];
        let swapped = rng.random_bool(0.5);
        let (a, b) = if swapped { (m2, m1) } else { (m1, m2) };
        let explain = |m: Method| {
            let spec = ExplainSpec { detection, decision, method: MethodName(m), params: self.study_params };
            self.explain(&ExplainRequest { image_id: image_id.clone(), spec })
                .map(|r| BlindedExplanation { saliency_id: r.saliency_id, heatmap_url: r.heatmap_url })
        };
        let question = StudyQuestion {
            question_id: json_id(&(self.study_seed, n)),
            image_id: image_id.clone(),
            detection,
            decision,
            robot_a: explain(a)?,
            robot_b: explain(b)?,
        };
        let record = QuestionRecord {
            question: question.clone(),
            pair: (MethodName(m1), MethodName(m2)),
            swapped,
            answered: false,
        };
        write_json(&self.path("study/questions", &question.question_id, ".json")?, &record)?;
        Ok(question)
    }

    pub fn question(&self, question_id: &str) -> AppResult<QuestionRecord> {
        read_json(&self.path("study/questions", question_id, ".json")?)?
            .ok_or_else(|| AppError::NotFound(format!("question {question_id}")))
    }

    /// Records a preference score from robot A's point of view.
    pub fn study_answer(&self, question_id: &str, score: i8) -> AppResult<AnswerResult> {
        if !(-2..=2).contains(&score) {
            return Err(AppError::Invalid(format!("score {score} outside -2..=2")));
        }
        let _guard = self.ledger_lock.lock().map_err(AppError::internal)?;
        let mut record = self.question(question_id)?;
        if record.answered {
            return Err(AppError::Conflict(format!("question {question_id} already answered")));
        }
        let (a, b) = record.unblind();
        let mut ledger = self.ledger()?;
        let rating_change = ledger.record_game(a.name(), b.name(), score, now())?;
        let game: &Game = ledger.games.last().expect("just recorded");
        let mut file = fs::OpenOptions::new().create(true).append(true).open(self.games_path())?;
        writeln!(file, "{}", serde_json::to_string(game)?)?;
        record.answered = true;
        write_json(&self.path("study/questions", question_id, ".json")?, &record)?;
        drop(_guard);
        Ok(AnswerResult { robot_a: a, robot_b: b, score, rating_change, ranking: self.ranking()? })
    }

    pub fn vote(&self, option: &str) -> AppResult<VoteTally> {
        let _guard = self.ledger_lock.lock().map_err(AppError::internal)?;
        let mut tally = self.votes()?;
        tally.record(option)?;
        let mut file = fs::OpenOptions::new().create(true).append(true).open(self.votes_path())?;
        writeln!(file, "{}", serde_json::to_string(option)?)?;
        Ok(tally)
    }
}

fn method_names() -> Vec<&'static str> {
    Method::EXPLAINERS.iter().map(|m| m.name()).collect()
}
