//! N-best rescoring with `(1 − λ)·am + λ·lm`.
//!
//! N-best files hold one JSON object per line:
//!
//! ```text
//! {"utt_id": "u1", "reference": "the cat sleeps",
//!  "hypotheses": [{"text": "the cat sleeps", "am_score": -12.5}, ...]}
//! ```
//!
//! `reference` is optional. Acoustic scores are log-domain, higher is
//! better; hypotheses are ranked by them on load (stable, so equal scores
//! keep file order).

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::evaluation::{wer, EditCounts};
use crate::scoring::Scorer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestEntry {
    pub text: String,
    pub am_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBestList {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Best acoustic score first.
    #[serde(rename = "hypotheses")]
    pub entries: Vec<NBestEntry>,
}

impl NBestList {
    /// Validates and orders `entries` by descending acoustic score.
    pub fn new(utt_id: String, reference: Option<String>, mut entries: Vec<NBestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty(format!("N-best list `{utt_id}` has no hypotheses")));
        }
        if let Some(bad) = entries.iter().find(|e| !e.am_score.is_finite()) {
            return Err(Error::Param(format!(
                "non-finite acoustic score {} in list `{utt_id}`",
                bad.am_score
            )));
        }
        entries.sort_by(|a, b| b.am_score.total_cmp(&a.am_score));
        Ok(Self {
            utt_id,
            reference,
            entries,
        })
    }

    /// Keeps the `n` best hypotheses by acoustic score.
    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n.max(1));
    }

    pub fn reference_words(&self) -> Result<Vec<String>> {
        self.reference
            .as_deref()
            .map(tokenize)
            .ok_or_else(|| Error::MissingReference(self.utt_id.clone()))
    }
}

/// Parses an N-best file, keeping at most `max_n` hypotheses per list.
pub fn parse_nbest(text: &str, max_n: Option<usize>) -> Result<Vec<NBestList>> {
    let mut lists = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: NBestList = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let mut list = NBestList::new(raw.utt_id, raw.reference, raw.entries).map_err(|e| Error::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(n) = max_n {
            list.truncate(n);
        }
        lists.push(list);
    }
    Ok(lists)
}

pub fn read_nbest(path: impl AsRef<Path>, max_n: Option<usize>) -> Result<Vec<NBestList>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nbest(&text, max_n)
}

pub fn write_nbest(path: impl AsRef<Path>, lists: &[NBestList]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for list in lists {
        serde_json::to_writer(&mut out, list).expect("lists serialize");
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Param(format!("{name} = {w} must lie in [0, 1]")));
    }
    Ok(())
}

/// `(1 − λ)·am + λ·lm`.
pub fn combine(am_score: f64, lm_score: f64, lambda: f64) -> Result<f64> {
    check_weight("lambda", lambda)?;
    Ok((1.0 - lambda) * am_score + lambda * lm_score)
}

/// `(1 − α)·uni + α·bi`.
pub fn combine_lms(uni_score: f64, bi_score: f64, alpha: f64) -> Result<f64> {
    check_weight("alpha", alpha)?;
    Ok((1.0 - alpha) * uni_score + alpha * bi_score)
}

/// Anything that assigns a log-domain score to a word sequence.
pub trait LmScorer: Sync {
    fn score(&self, words: &[String]) -> Result<f64>;
}

impl LmScorer for Scorer {
    fn score(&self, words: &[String]) -> Result<f64> {
        Ok(self.score_words(words)?.total)
    }
}

/// A unidirectional and a bidirectional scorer mixed with weight α.
pub struct Interpolated<'a> {
    pub uni: &'a dyn LmScorer,
    pub bi: &'a dyn LmScorer,
    pub alpha: f64,
}

impl LmScorer for Interpolated<'_> {
    fn score(&self, words: &[String]) -> Result<f64> {
        check_weight("alpha", self.alpha)?;
        combine_lms(self.uni.score(words)?, self.bi.score(words)?, self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub text: String,
    /// 1-based position in the acoustic ranking.
    pub am_rank: usize,
    pub am_score: f64,
    pub lm_score: f64,
    pub score: f64,
}

/// Orders a list by combined score given its LM scores. Ties go to the
/// better acoustic rank, then to the lexicographically smaller text.
pub fn rank(list: &NBestList, lm_scores: &[f64], lambda: f64) -> Result<Vec<ScoredHypothesis>> {
    if list.entries.is_empty() {
        return Err(Error::Empty(format!("N-best list `{}` has no hypotheses", list.utt_id)));
    }
    if lm_scores.len() != list.entries.len() {
        return Err(Error::Param(format!(
            "{} LM scores for {} hypotheses in `{}`",
            lm_scores.len(),
            list.entries.len(),
            list.utt_id
        )));
    }
    let mut out = list
        .entries
        .iter()
        .zip(lm_scores)
        .enumerate()
        .map(|(i, (e, &lm))| {
            Ok(ScoredHypothesis {
                text: e.text.clone(),
                am_rank: i + 1,
                am_score: e.am_score,
                lm_score: lm,
                score: combine(e.am_score, lm, lambda)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.am_rank.cmp(&b.am_rank))
            .then_with(|| a.text.cmp(&b.text))
    });
    Ok(out)
}

/// LM scores of every hypothesis of one list.
pub fn lm_scores(list: &NBestList, scorer: &dyn LmScorer) -> Result<Vec<f64>> {
    list.entries.iter().map(|e| scorer.score(&tokenize(&e.text))).collect()
}

/// LM scores of every hypothesis of every list, on up to `threads`
/// workers. The result does not depend on the thread count.
pub fn lm_scores_many(lists: &[NBestList], scorer: &dyn LmScorer, threads: usize) -> Result<Vec<Vec<f64>>> {
    if threads <= 1 {
        return lists.iter().map(|l| lm_scores(l, scorer)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Param(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| lists.par_iter().map(|l| lm_scores(l, scorer)).collect())
}

pub fn rescore_nbest(list: &NBestList, scorer: &dyn LmScorer, lambda: f64) -> Result<Vec<ScoredHypothesis>> {
    check_weight("lambda", lambda)?;
    rank(list, &lm_scores(list, scorer)?, lambda)
}

/// `0.00, 0.05, …, 1.00`.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Parses a comma-separated λ grid such as `0,0.1,0.2`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Param(format!("bad grid value `{}`", s.trim())))?;
            check_weight("lambda", v)?;
            Ok(v)
        })
        .collect::<Result<Vec<f64>>>()?;
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid".into()));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub best_lambda: f64,
    pub rows: Vec<SweepRow>,
}

/// Corpus-level error counts of the top-1 hypotheses at one λ.
pub fn top1_counts(lists: &[NBestList], scores: &[Vec<f64>], lambda: f64) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (list, s) in lists.iter().zip(scores) {
        let reference = list.reference_words()?;
        let ranked = rank(list, s, lambda)?;
        let (counts, _) = wer(&reference, &tokenize(&ranked[0].text))?;
        total += counts;
    }
    Ok(total)
}

/// Picks the λ with the lowest corpus WER on `lists`, given precomputed LM
/// scores. Ties go to the smaller λ.
pub fn sweep_lambda(lists: &[NBestList], scores: &[Vec<f64>], grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid".into()));
    }
    if lists.is_empty() {
        return Err(Error::Empty("no development lists".into()));
    }
    if scores.len() != lists.len() {
        return Err(Error::Param(format!("{} score sets for {} lists", scores.len(), lists.len())));
    }
    if let Some(list) = lists.iter().find(|l| l.reference.is_none()) {
        return Err(Error::MissingReference(list.utt_id.clone()));
    }
    let rows = grid
        .iter()
        .map(|&lambda| {
            check_weight("lambda", lambda)?;
            Ok(SweepRow {
                lambda,
                counts: top1_counts(lists, scores, lambda)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .min_by(|a, b| {
            a.counts
                .errors()
                .cmp(&b.counts.errors())
                .then(a.lambda.total_cmp(&b.lambda))
        })
        .expect("grid is non-empty");
    Ok(Sweep {
        best_lambda: best.lambda,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(text: &str, am: f64) -> NBestEntry {
        NBestEntry {
            text: text.into(),
            am_score: am,
        }
    }

    fn list() -> NBestList {
        NBestList::new(
            "u".into(),
            Some("a b c".into()),
            vec![entry("a x c", -1.0), entry("a b c", -2.0), entry("x y", -4.0)],
        )
        .unwrap()
    }

    #[test]
    fn combination_arithmetic() {
        assert_eq!(combine(-10.0, -5.0, 0.0).unwrap(), -10.0);
        assert_eq!(combine(-10.0, -5.0, 1.0).unwrap(), -5.0);
        assert!((combine(-10.0, -5.0, 0.2).unwrap() + 9.0).abs() < 1e-12);
        assert!(combine(-1.0, -1.0, 1.5).is_err());
        assert!(combine(-1.0, -1.0, -0.1).is_err());
        assert_eq!(combine_lms(-8.0, -6.0, 1.0).unwrap(), -6.0);
        assert_eq!(combine_lms(-8.0, -6.0, 0.0).unwrap(), -8.0);
        assert_eq!(combine_lms(-8.0, -6.0, 0.5).unwrap(), -7.0);
        assert!(combine_lms(-8.0, -6.0, 2.0).is_err());
    }

    #[test]
    fn entries_are_ordered_by_acoustic_score() {
        let l = NBestList::new("u".into(), None, vec![entry("b", -3.0), entry("a", -1.0), entry("c", -3.0)]).unwrap();
        let texts: Vec<_> = l.entries.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
        assert!(NBestList::new("u".into(), None, vec![]).is_err());
        assert!(NBestList::new("u".into(), None, vec![entry("a", f64::NAN)]).is_err());
    }

    #[test]
    fn hand_computed_ranking() {
        // combined at λ = 0.5: (−1 − 9)/2 = −5, (−2 − 3)/2 = −2.5, (−4 − 2)/2 = −3
        let ranked = rank(&list(), &[-9.0, -3.0, -2.0], 0.5).unwrap();
        let texts: Vec<_> = ranked.iter().map(|h| h.text.as_str()).collect();
        assert_eq!(texts, ["a b c", "x y", "a x c"]);
        assert_eq!(ranked[0].am_rank, 2);
        assert_eq!(ranked[0].score, -2.5);
    }

    #[test]
    fn extreme_weights_follow_one_score() {
        let lm = [-9.0, -3.0, -2.0];
        let am_order: Vec<_> = rank(&list(), &lm, 0.0).unwrap().iter().map(|h| h.am_rank).collect();
        assert_eq!(am_order, [1, 2, 3]);
        let lm_order: Vec<_> = rank(&list(), &lm, 1.0).unwrap().iter().map(|h| h.am_rank).collect();
        assert_eq!(lm_order, [3, 2, 1]);
    }

    #[test]
    fn ties_go_to_acoustic_rank_then_text() {
        let l = NBestList::new("u".into(), None, vec![entry("z", -1.0), entry("b", -1.0), entry("a", -1.0)]).unwrap();
        let ranked = rank(&l, &[0.0, 0.0, 0.0], 0.5).unwrap();
        let texts: Vec<_> = ranked.iter().map(|h| h.text.as_str()).collect();
        assert_eq!(texts, ["z", "b", "a"]);
    }

    #[test]
    fn grid_parsing_and_default() {
        let g = default_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[4], 0.2);
        assert_eq!(parse_grid("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0,2").is_err());
        assert!(parse_grid("x").is_err());
    }

    #[test]
    fn sweep_picks_lowest_wer_with_small_lambda_ties() {
        let lists = vec![list()];
        let scores = vec![vec![-9.0, -3.0, -2.0]];
        let single = sweep_lambda(&lists, &scores, &[0.3]).unwrap();
        assert_eq!(single.best_lambda, 0.3);
        assert_eq!(single.rows.len(), 1);

        // λ = 0 keeps "a x c" (1 error); λ = 1 picks "x y" (3 errors).
        let s = sweep_lambda(&lists, &scores, &[0.0, 1.0]).unwrap();
        assert_eq!(s.best_lambda, 0.0);
        assert_eq!(s.rows[0].counts.errors(), 1);
        assert_eq!(s.rows[1].counts.errors(), 3);

        // λ = 0.5 and 0.6 both pick the reference; the smaller wins.
        let s = sweep_lambda(&lists, &scores, &[0.6, 0.5, 1.0]).unwrap();
        assert_eq!(s.best_lambda, 0.5);
    }

    #[test]
    fn sweep_requires_references() {
        let mut l = list();
        l.reference = None;
        assert!(matches!(
            sweep_lambda(&[l], &[vec![0.0; 3]], &[0.0]),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        let mut no_ref = list();
        no_ref.utt_id = "v".into();
        no_ref.reference = None;
        write_nbest(&path, &[list(), no_ref.clone()]).unwrap();
        let back = read_nbest(&path, None).unwrap();
        assert_eq!(back, vec![list(), no_ref]);
        let short = read_nbest(&path, Some(2)).unwrap();
        assert!(short.iter().all(|l| l.entries.len() == 2));

        let bad = parse_nbest("{\"utt_id\": \"x\", \"hypotheses\": []}\n", None);
        assert!(matches!(bad, Err(Error::Format { line: 1, .. })));
        let unknown = parse_nbest("{\"utt_id\": \"x\", \"extra\": 1, \"hypotheses\": []}", None);
        assert!(matches!(unknown, Err(Error::Format { .. })));
    }
}
