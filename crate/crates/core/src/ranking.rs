//! Rank aggregation over metric AAUCs, Elo ratings from pairwise preference
//! games and vote counting for visualization methods.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::MetricCode;
use crate::movis::MovisMethod;

pub const INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_K: f64 = 32.0;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("missing value for subject {subject} metric {metric}")]
    MissingCell { subject: String, metric: String },
    #[error("rank matrix is not {rows} rows by {cols} columns")]
    Shape { rows: usize, cols: usize },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("a game needs two different methods")]
    SelfGame,
    #[error("score {0} outside -2..=2")]
    BadScore(i8),
    #[error("no games recorded")]
    EmptyLedger,
    #[error("unknown vote option {0:?}")]
    UnknownOption(String),
    #[error("game log line {line}: {message}")]
    Log { line: usize, message: String },
}

/// Column order of the published rank tables.
pub fn table_metrics() -> Vec<MetricCode> {
    ["DCS", "ICS", "DBS", "IBS", "DCR", "ICR", "DBR", "IBR"].iter().map(|c| c.parse().expect("static code")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub subjects: Vec<String>,
    pub metrics: Vec<String>,
    /// `ranks[subject][metric]`, 1 is best.
    pub ranks: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub overall: Vec<usize>,
    /// Subjects sharing their overall rank with another.
    pub tied: Vec<bool>,
}

impl RankTable {
    /// Subjects by overall rank; tied subjects keep input order.
    pub fn order(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.subjects.len()).collect();
        idx.sort_by_key(|&i| (self.overall[i], i));
        idx.into_iter().map(|i| self.subjects[i].as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m);
        }
        out.push_str(",Overall\n");
        for (i, s) in self.subjects.iter().enumerate() {
            out.push_str(s);
            for r in &self.ranks[i] {
                let _ = write!(out, ",{r}");
            }
            let _ = writeln!(out, ",{}", self.overall[i]);
        }
        out
    }
}

/// Overall ranks from per-metric rank rows: ascending row sum, equal sums
/// share the better rank.
pub fn aggregate_rank_rows(
    subjects: &[String],
    metrics: &[String],
    ranks: Vec<Vec<usize>>,
) -> Result<RankTable, RankingError> {
    if ranks.len() != subjects.len() || ranks.iter().any(|r| r.len() != metrics.len()) {
        return Err(RankingError::Shape { rows: subjects.len(), cols: metrics.len() });
    }
    let row_sums: Vec<usize> = ranks.iter().map(|r| r.iter().sum()).collect();
    let overall: Vec<usize> = row_sums.iter().map(|&s| 1 + row_sums.iter().filter(|&&o| o < s).count()).collect();
    let tied = row_sums.iter().map(|&s| row_sums.iter().filter(|&&o| o == s).count() > 1).collect();
    Ok(RankTable { subjects: subjects.to_vec(), metrics: metrics.to_vec(), ranks, row_sums, overall, tied })
}

/// Ranks each metric column by AAUC (lower is better for deletion codes,
/// higher for insertion), then aggregates by row sum. Equal AAUCs within a
/// column are ordered by subject position so each column stays a permutation.
pub fn aggregate_ranks(
    subjects: &[String],
    metrics: &[MetricCode],
    aauc: &[Vec<Option<f64>>],
) -> Result<RankTable, RankingError> {
    if aauc.len() != subjects.len() || aauc.iter().any(|r| r.len() != metrics.len()) {
        return Err(RankingError::Shape { rows: subjects.len(), cols: metrics.len() });
    }
    let mut ranks = vec![vec![0; metrics.len()]; subjects.len()];
    for (m, code) in metrics.iter().enumerate() {
        let mut col = Vec::with_capacity(subjects.len());
        for (s, row) in aauc.iter().enumerate() {
            let v = row[m]
                .ok_or_else(|| RankingError::MissingCell { subject: subjects[s].clone(), metric: code.to_string() })?;
            col.push((s, if code.cause.lower_is_better() { v } else { -v }));
        }
        col.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (rank, (s, _)) in col.into_iter().enumerate() {
            ranks[s][m] = rank + 1;
        }
    }
    let names: Vec<String> = metrics.iter().map(|m| m.to_string()).collect();
    aggregate_rank_rows(subjects, &names, ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub a: String,
    pub b: String,
    pub score: i8,
    pub ts: u64,
}

/// Graded outcome for `a` from a preference score in `-2..=2`.
pub fn outcome(score: i8) -> f64 {
    (score as f64 + 2.0) / 4.0
}

pub fn expected(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloLedger {
    pub ratings: BTreeMap<String, f64>,
    pub games: Vec<Game>,
    pub k_factor: f64,
}

impl EloLedger {
    pub fn new<S: AsRef<str>>(methods: &[S], k_factor: f64) -> Self {
        let ratings = methods.iter().map(|m| (m.as_ref().to_string(), INITIAL_RATING)).collect();
        Self { ratings, games: Vec::new(), k_factor }
    }

    pub fn rating(&self, method: &str) -> Option<f64> {
        self.ratings.get(method).copied()
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }

    pub fn games_played(&self, method: &str) -> usize {
        self.games.iter().filter(|g| g.a == method || g.b == method).count()
    }

    /// Applies one game and appends it to the log. Returns the rating change
    /// of `a`.
    pub fn record_game(&mut self, a: &str, b: &str, score: i8, ts: u64) -> Result<f64, RankingError> {
        if !(-2..=2).contains(&score) {
            return Err(RankingError::BadScore(score));
        }
        if a == b {
            return Err(RankingError::SelfGame);
        }
        let ra = self.rating(a).ok_or_else(|| RankingError::UnknownMethod(a.to_string()))?;
        let rb = self.rating(b).ok_or_else(|| RankingError::UnknownMethod(b.to_string()))?;
        let delta = self.k_factor * (outcome(score) - expected(ra, rb));
        self.ratings.insert(a.to_string(), ra + delta);
        self.ratings.insert(b.to_string(), rb - delta);
        self.games.push(Game { a: a.to_string(), b: b.to_string(), score, ts });
        Ok(delta)
    }

    /// Rebuilds ratings from initial values by applying `games` in order.
    pub fn replay<S: AsRef<str>>(methods: &[S], k_factor: f64, games: &[Game]) -> Result<Self, RankingError> {
        let mut ledger = Self::new(methods, k_factor);
        for g in games {
            ledger.record_game(&g.a, &g.b, g.score, g.ts)?;
        }
        Ok(ledger)
    }

    pub fn to_jsonl(&self) -> String {
        self.games.iter().map(|g| serde_json::to_string(g).expect("game serializes") + "\n").collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<Game>, RankingError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| RankingError::Log { line: i + 1, message: e.to_string() })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedMethod {
    pub method: String,
    pub rating: f64,
    pub games: usize,
}

/// Methods by descending rating; ties by fewer games, then name.
pub fn rank_by_rating(ledger: &EloLedger) -> Result<Vec<RatedMethod>, RankingError> {
    if ledger.games.is_empty() {
        return Err(RankingError::EmptyLedger);
    }
    let mut out: Vec<RatedMethod> = ledger
        .ratings
        .iter()
        .map(|(m, &r)| RatedMethod { method: m.clone(), rating: r, games: ledger.games_played(m) })
        .collect();
    out.sort_by(|x, y| y.rating.total_cmp(&x.rating).then(x.games.cmp(&y.games)).then(x.method.cmp(&y.method)));
    Ok(out)
}

pub const NONE_OPTION: &str = "none";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub counts: BTreeMap<String, usize>,
    pub none: usize,
}

impl VoteTally {
    pub fn new() -> Self {
        let counts = MovisMethod::ALL.iter().map(|m| (m.name().to_string(), 0)).collect();
        Self { counts, none: 0 }
    }

    pub fn record(&mut self, answer: &str) -> Result<(), RankingError> {
        let key = answer.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        if key == NONE_OPTION || key == "none_of_the_methods" {
            self.none += 1;
            return Ok(());
        }
        let method = MovisMethod::parse(&key).ok_or_else(|| RankingError::UnknownOption(answer.to_string()))?;
        *self.counts.entry(method.name().to_string()).or_insert(0) += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.none
    }
}

pub fn tally_votes<S: AsRef<str>>(answers: &[S]) -> Result<VoteTally, RankingError> {
    let mut tally = VoteTally::new();
    for a in answers {
        tally.record(a.as_ref())?;
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn published_ed0_block() {
        let subjects = names(&["GBP", "SGBP", "IG", "SIG"]);
        let metrics: Vec<String> = table_metrics().iter().map(|m| m.to_string()).collect();
        let rows = vec![
            vec![4, 3, 1, 2, 4, 3, 3, 1],
            vec![1, 2, 2, 4, 1, 2, 2, 2],
            vec![3, 4, 4, 3, 3, 4, 4, 4],
            vec![2, 1, 3, 1, 2, 1, 1, 3],
        ];
        let t = aggregate_rank_rows(&subjects, &metrics, rows).unwrap();
        assert_eq!(t.overall, vec![3, 2, 4, 1]);
        assert_eq!(t.order(), vec!["SIG", "SGBP", "GBP", "IG"]);
        assert!(t.tied.iter().all(|&x| !x));
        assert!(t.to_csv().starts_with("subject,DCS,ICS,DBS,IBS,DCR,ICR,DBR,IBR,Overall\nGBP,4,3,1,2,4,3,3,1,3\n"));
    }

    #[test]
    fn single_subject_and_ties() {
        let t = aggregate_ranks(&names(&["A"]), &table_metrics(), &[vec![Some(0.3); 8]]).unwrap();
        assert_eq!(t.ranks[0], vec![1; 8]);
        assert_eq!(t.overall, vec![1]);

        let rows = vec![vec![1, 2], vec![2, 1], vec![3, 3]];
        let t = aggregate_rank_rows(&names(&["A", "B", "C"]), &names(&["m", "n"]), rows).unwrap();
        assert_eq!(t.overall, vec![1, 1, 3]);
        assert_eq!(t.tied, vec![true, true, false]);
    }

    #[test]
    fn orientation_follows_cause() {
        let metrics: Vec<MetricCode> = vec!["DCS".parse().unwrap(), "ICS".parse().unwrap()];
        let aauc = vec![vec![Some(0.1), Some(0.1)], vec![Some(0.5), Some(0.5)]];
        let t = aggregate_ranks(&names(&["low", "high"]), &metrics, &aauc).unwrap();
        assert_eq!(t.ranks, vec![vec![1, 2], vec![2, 1]]);
        let missing = vec![vec![Some(0.1), None], vec![Some(0.5), Some(0.5)]];
        assert!(matches!(
            aggregate_ranks(&names(&["a", "b"]), &metrics, &missing),
            Err(RankingError::MissingCell { .. })
        ));
    }

    #[test]
    fn elo_examples() {
        let mut l = EloLedger::new(&["a", "b"], DEFAULT_K);
        l.record_game("a", "b", 2, 0).unwrap();
        assert_eq!(l.rating("a"), Some(1016.0));
        assert_eq!(l.rating("b"), Some(984.0));

        let mut d = EloLedger::new(&["a", "b"], DEFAULT_K);
        d.record_game("a", "b", 0, 0).unwrap();
        assert_eq!(d.rating("a"), Some(1000.0));

        assert!(matches!(l.record_game("a", "z", 1, 0), Err(RankingError::UnknownMethod(_))));
        assert!(matches!(l.record_game("a", "a", 1, 0), Err(RankingError::SelfGame)));
        assert!(matches!(l.record_game("a", "b", 3, 0), Err(RankingError::BadScore(3))));
        assert_eq!(l.games.len(), 1);
    }

    #[test]
    fn rating_order() {
        let mut l = EloLedger::new(&["b", "a", "c"], DEFAULT_K);
        assert!(matches!(rank_by_rating(&l), Err(RankingError::EmptyLedger)));
        l.record_game("a", "b", 1, 0).unwrap();
        let r = rank_by_rating(&l).unwrap();
        assert_eq!(r[0].method, "a");
        // c has 1000 with no games; ties at 1000 impossible here, so c is second
        assert_eq!(r[1].method, "c");
    }

    #[test]
    fn replay_matches_incremental() {
        let methods = ["GBP", "SGBP", "IG", "SIG"];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = EloLedger::new(&methods, DEFAULT_K);
        for ts in 0..100 {
            let a = rng.random_range(0..4);
            let b = (a + rng.random_range(1..4)) % 4;
            l.record_game(methods[a], methods[b], rng.random_range(-2..=2), ts).unwrap();
        }
        let games = EloLedger::parse_jsonl(&l.to_jsonl()).unwrap();
        let replayed = EloLedger::replay(&methods, DEFAULT_K, &games).unwrap();
        assert_eq!(replayed, l);
        assert!(EloLedger::parse_jsonl("{\"a\":1}\n").is_err());
    }

    #[test]
    fn vote_examples() {
        let empty: [&str; 0] = [];
        let t = tally_votes(&empty).unwrap();
        assert_eq!(t.total(), 0);
        assert_eq!(t.counts.len(), 4);

        let mut answers = vec!["none"; 18];
        answers.extend(std::iter::repeat_n("convex_polygon", 138));
        let t = tally_votes(&answers).unwrap();
        assert_eq!(t.none, 18);
        assert_eq!(t.total(), 156);
        assert!(matches!(tally_votes(&["sgbp"]), Err(RankingError::UnknownOption(_))));
    }

    proptest! {
        #[test]
        fn elo_conserves_total(games in proptest::collection::vec((0usize..4, 1usize..4, -2i8..=2), 0..200)) {
            let methods = ["m0", "m1", "m2", "m3"];
            let mut l = EloLedger::new(&methods, DEFAULT_K);
            for (a, off, s) in games {
                l.record_game(methods[a], methods[(a + off) % 4], s, 0).unwrap();
            }
            prop_assert!((l.total() - 4000.0).abs() < 1e-9);
        }

        #[test]
        fn ranks_invariant_to_positive_scaling(
            vals in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 8), 4),
            scale in 0.01f64..100.0,
        ) {
            let subjects = names(&["a", "b", "c", "d"]);
            let m = table_metrics();
            let base: Vec<Vec<Option<f64>>> = vals.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
            let scaled: Vec<Vec<Option<f64>>> = vals.iter().map(|r| r.iter().map(|&v| Some(v * scale)).collect()).collect();
            let t1 = aggregate_ranks(&subjects, &m, &base).unwrap();
            let t2 = aggregate_ranks(&subjects, &m, &scaled).unwrap();
            prop_assert_eq!(t1.ranks, t2.ranks);
            prop_assert_eq!(t1.overall, t2.overall);
        }
    }
}
