//! Word error rate, oracle WER over N-best lists, and error counts by
//! hypothesis word position, with CSV/JSON report files.

use std::fmt::Write as _;
use std::fs;
use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::rescoring::NBestList;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference word; 0 when there are no reference words.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { ref_pos: usize, hyp_pos: usize },
    Substitution { ref_pos: usize, hyp_pos: usize },
    Deletion { ref_pos: usize },
    Insertion { hyp_pos: usize },
}

/// Edit operations in left-to-right order.
pub type Alignment = Vec<EditOp>;

/// Minimum-edit alignment with unit costs. When several alignments are
/// optimal the backtrace prefers, at each step, substitution (or match),
/// then deletion, then insertion.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Result<(EditCounts, Alignment)> {
    if reference.is_empty() {
        return Err(Error::Empty("reference transcript".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diff = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i * w + j] = (d[(i - 1) * w + j - 1] + diff)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = EditCounts {
        ref_words: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                i -= 1;
                j -= 1;
                if same {
                    ops.push(EditOp::Match { ref_pos: i, hyp_pos: j });
                } else {
                    counts.substitutions += 1;
                    ops.push(EditOp::Substitution { ref_pos: i, hyp_pos: j });
                }
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            i -= 1;
            counts.deletions += 1;
            ops.push(EditOp::Deletion { ref_pos: i });
        } else {
            j -= 1;
            counts.insertions += 1;
            ops.push(EditOp::Insertion { hyp_pos: j });
        }
    }
    ops.reverse();
    Ok((counts, ops))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceWer {
    pub utt_id: String,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub utterances: Vec<UtteranceWer>,
    pub total: EditCounts,
}

impl WerReport {
    pub fn add(&mut self, utt_id: impl Into<String>, counts: EditCounts) {
        self.total += counts;
        self.utterances.push(UtteranceWer {
            utt_id: utt_id.into(),
            counts,
        });
    }

    pub fn wer(&self) -> f64 {
        self.total.wer()
    }
}

/// Best hypothesis of a list against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleChoice {
    /// Index into the list's entries (its acoustic rank minus one).
    pub index: usize,
    pub counts: EditCounts,
}

/// Fewest errors over the list; ties go to the better acoustic rank.
pub fn oracle_wer(list: &NBestList) -> Result<OracleChoice> {
    let reference = list.reference_words()?;
    let mut best: Option<OracleChoice> = None;
    for (index, e) in list.entries.iter().enumerate() {
        let (counts, _) = wer(&reference, &tokenize(&e.text))?;
        if best.as_ref().is_none_or(|b| counts.errors() < b.counts.errors()) {
            best = Some(OracleChoice { index, counts });
        }
    }
    best.ok_or_else(|| Error::Empty(format!("N-best list `{}` has no hypotheses", list.utt_id)))
}

/// Corpus report for the acoustic 1-best of every list.
pub fn first_best_report(lists: &[NBestList]) -> Result<WerReport> {
    let mut report = WerReport::default();
    for list in lists {
        let reference = list.reference_words()?;
        let (counts, _) = wer(&reference, &tokenize(&list.entries[0].text))?;
        report.add(&list.utt_id, counts);
    }
    Ok(report)
}

/// Corpus report for the oracle choice of every list.
pub fn oracle_report(lists: &[NBestList]) -> Result<WerReport> {
    let mut report = WerReport::default();
    for list in lists {
        report.add(&list.utt_id, oracle_wer(list)?.counts);
    }
    Ok(report)
}

/// Error counts indexed by 0-based hypothesis word position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionErrorHistogram {
    pub bins: Vec<usize>,
}

impl PositionErrorHistogram {
    fn bump(&mut self, pos: usize) {
        if self.bins.len() <= pos {
            self.bins.resize(pos + 1, 0);
        }
        self.bins[pos] += 1;
    }

    /// Adds one count per substituted or inserted hypothesis word.
    /// Deletions have no hypothesis position and are not counted.
    pub fn add_alignment(&mut self, alignment: &[EditOp]) {
        for op in alignment {
            match *op {
                EditOp::Substitution { hyp_pos, .. } | EditOp::Insertion { hyp_pos } => self.bump(hyp_pos),
                EditOp::Match { .. } | EditOp::Deletion { .. } => {}
            }
        }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().sum()
    }

    /// Sum over positions in `range`.
    pub fn range_total(&self, range: std::ops::Range<usize>) -> usize {
        self.bins.iter().skip(range.start).take(range.len()).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,errors\n");
        for (p, c) in self.bins.iter().enumerate() {
            writeln!(out, "{p},{c}").unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut hist = Self::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::Format {
                line: i + 1,
                msg: format!("expected `position,errors`, got `{line}`"),
            };
            let (p, c) = line.split_once(',').ok_or_else(bad)?;
            let p: usize = p.trim().parse().map_err(|_| bad())?;
            let c: usize = c.trim().parse().map_err(|_| bad())?;
            if p != hist.bins.len() {
                return Err(bad());
            }
            hist.bins.push(c);
        }
        Ok(hist)
    }
}

/// WER as a percentage with two decimals.
pub fn percent(wer: f64) -> String {
    format!("{:.2}", 100.0 * wer)
}

const WER_HEADER: &str = "utt_id,ref_words,substitutions,deletions,insertions,errors,wer_percent";
const CORPUS_ROW: &str = "corpus";

fn counts_row(name: &str, c: &EditCounts) -> String {
    format!(
        "{name},{},{},{},{},{},{}",
        c.ref_words,
        c.substitutions,
        c.deletions,
        c.insertions,
        c.errors(),
        percent(c.wer())
    )
}

impl WerReport {
    /// One row per utterance followed by a `corpus` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{WER_HEADER}\n");
        for u in &self.utterances {
            writeln!(out, "{}", counts_row(&u.utt_id, &u.counts)).unwrap();
        }
        writeln!(out, "{}", counts_row(CORPUS_ROW, &self.total)).unwrap();
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut report = WerReport::default();
        let mut corpus = None;
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |msg: &str| Error::Format {
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.rsplitn(7, ',').collect();
            if fields.len() != 7 {
                return Err(bad("expected 7 columns"));
            }
            let num = |k: usize| fields[k].parse::<usize>().map_err(|_| bad("non-numeric count"));
            let counts = EditCounts {
                ref_words: num(5)?,
                substitutions: num(4)?,
                deletions: num(3)?,
                insertions: num(2)?,
            };
            if num(1)? != counts.errors() {
                return Err(bad("errors column disagrees with S+D+I"));
            }
            if fields[6] == CORPUS_ROW {
                corpus = Some(counts);
            } else {
                report.add(fields[6], counts);
            }
        }
        if corpus != Some(report.total) {
            return Err(Error::Format {
                line: text.lines().count(),
                msg: "corpus row missing or not equal to the column sums".into(),
            });
        }
        Ok(report)
    }
}

/// One line of a system comparison table ("1-best", "oracle", ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub errors: usize,
    pub wer: f64,
    pub wer_percent: String,
}

impl SystemRow {
    pub fn new(system: impl Into<String>, c: &EditCounts) -> Self {
        Self {
            system: system.into(),
            ref_words: c.ref_words,
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            errors: c.errors(),
            wer: c.wer(),
            wer_percent: percent(c.wer()),
        }
    }
}

pub fn systems_csv(rows: &[SystemRow]) -> String {
    let mut out = String::from("system,ref_words,substitutions,deletions,insertions,errors,wer_percent\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.system, r.ref_words, r.substitutions, r.deletions, r.insertions, r.errors, r.wer_percent
        )
        .unwrap();
    }
    out
}

/// Writes `text` to `path`.
pub fn emit(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
