use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use sanlm_core::checkpoint::{Checkpoint, VocabRef};
use sanlm_core::corpus::{tokenize, Vocabulary};
use sanlm_core::evaluation::{
    emit, oracle_wer, systems_csv, wer, EditCounts, PositionErrorHistogram, SystemRow, WerReport,
};
use sanlm_core::model::Direction;
use sanlm_core::rescoring::{
    lm_scores_many, parse_grid, rank, read_nbest, sweep_lambda, write_nbest, Interpolated, LmScorer, NBestList,
    ScoredHypothesis,
};
use sanlm_core::scoring::{Scorer, SentenceScore};
use sanlm_core::synthetic::{self, CorruptionPositions, NBestConfig};
use sanlm_core::tensor::RngState;
use sanlm_core::training::Trainer;

use crate::config::{FileConfig, Overrides, Resolved};
use crate::{Cli, Command, EvalArgs, LmArgs, UsageError};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let base = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        ..Overrides::default()
    };
    match cli.command {
        Command::BuildVocab(a) => {
            let o = Overrides {
                vocab_size: a.size,
                ..base
            };
            let mut r = Resolved::new("build-vocab", &file, &o)?;
            r.set_path("corpus", &a.corpus);
            build_vocab(&r, &a.corpus, &a.out)
        }
        Command::Train(a) => {
            let o = Overrides {
                vocab: a.vocab,
                mode: a.mode,
                max_steps: a.steps,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                eval_interval: a.eval_interval,
                checkpoint_interval: a.checkpoint_interval,
                ..base
            };
            let mut r = Resolved::new("train", &file, &o)?;
            r.set_path("corpus", &a.corpus);
            if let Some(h) = &a.heldout {
                r.set_path("heldout", h);
            }
            if let Some(c) = &a.resume {
                r.set_path("resume", c);
            }
            train(&r, &a.corpus, a.heldout.as_deref(), a.resume.as_deref(), &a.out)
        }
        Command::Score(a) => {
            let o = Overrides { vocab: a.vocab, ..base };
            let mut r = Resolved::new("score", &file, &o)?;
            r.set_path("checkpoint", &a.checkpoint);
            r.set_path("input", &a.input);
            score(&r, &a.checkpoint, &a.input, &a.out)
        }
        Command::Rescore(a) => {
            let o = lm_overrides(&a.lm, base);
            let o = Overrides { lambda: a.lambda, ..o };
            let mut r = Resolved::new("rescore", &file, &o)?;
            r.set_path("nbest", &a.nbest);
            rescore(&mut r, &a.lm, &a.nbest, &a.out)
        }
        Command::Sweep(a) => {
            let grid = a.grid.as_deref().map(parse_grid).transpose()?;
            let o = Overrides {
                grid,
                ..lm_overrides(&a.lm, base)
            };
            let mut r = Resolved::new("sweep", &file, &o)?;
            r.set_path("nbest", &a.nbest);
            sweep(&mut r, &a.lm, &a.nbest, &a.out)
        }
        Command::Evaluate(a) => {
            let r = eval_resolved("evaluate", &file, base, &a)?;
            evaluate(&r, &a)
        }
        Command::AnalyzePositions(a) => {
            let r = eval_resolved("analyze-positions", &file, base, &a)?;
            analyze_positions(&r, &a)
        }
        Command::Synth(a) => {
            let r = Resolved::new("synth", &file, &base)?;
            synth(&r, &a)
        }
    }
}

fn lm_overrides(lm: &LmArgs, base: Overrides) -> Overrides {
    Overrides {
        vocab: lm.vocab.clone(),
        alpha: lm.alpha,
        max_n: lm.max_n,
        ..base
    }
}

fn eval_resolved(command: &str, file: &FileConfig, base: Overrides, a: &EvalArgs) -> Result<Resolved> {
    let mut r = Resolved::new(command, file, &base)?;
    for (key, path) in [("nbest", &a.nbest), ("refs", &a.refs), ("hyp", &a.hyp)] {
        if let Some(p) = path {
            r.set_path(key, p);
        }
    }
    Ok(r)
}

/// Creates `out` and writes the resolved configuration into it.
fn prepare_out(r: &Resolved, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let mut r = r.clone();
    r.set_path("out", out);
    write_file(&out.join(RESOLVED_CONFIG), r.to_toml().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| sanlm_core::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn load_vocab(path: &str) -> Result<Vocabulary> {
    Ok(Vocabulary::load(path)?)
}

fn build_vocab(r: &Resolved, corpus: &Path, out: &Path) -> Result<()> {
    let lines = read_lines(corpus)?;
    let vocab = Vocabulary::build(&lines, r.vocab.size)?;
    prepare_out(r, out)?;
    vocab.save(out.join("vocab.txt"))?;
    info!("wrote {} entries to {}", vocab.len(), out.join("vocab.txt").display());
    Ok(())
}

fn encode_file(vocab: &Vocabulary, path: &Path) -> Result<Vec<Vec<usize>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| vocab.encode(&tokenize(l)).0)
        .collect())
}

fn train(r: &Resolved, corpus: &Path, heldout: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<()> {
    let vocab_path = r
        .vocab
        .path
        .clone()
        .ok_or_else(|| UsageError("train needs --vocab (or vocab.path in the config)".into()))?;
    let vocab = load_vocab(&vocab_path)?;
    let train_ids = encode_file(&vocab, corpus)?;
    let heldout_ids = match heldout {
        Some(p) => encode_file(&vocab, p)?,
        None => Vec::new(),
    };
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load_with_vocab(path, &vocab)?;
            let mut saved = ckpt.training.clone().ok_or_else(|| {
                sanlm_core::CheckpointError::ConfigMismatch("checkpoint has no training config".into())
            })?;
            ckpt.check_config(&r.model_config(vocab.len()))?;
            let mut wanted = r.train_config(vocab.len());
            // Only the step budget and checkpoint cadence may change when
            // resuming.
            saved.max_steps = wanted.max_steps;
            saved.checkpoint_interval = wanted.checkpoint_interval;
            wanted.checkpoint_dir = None;
            if saved != wanted {
                bail!(UsageError("resumed run must use the same training settings".into()));
            }
            let mut ckpt = ckpt;
            ckpt.training = Some(saved);
            Trainer::resume(ckpt, &train_ids, &heldout_ids)?
        }
        None => Trainer::new(
            r.train_config(vocab.len()),
            &train_ids,
            &heldout_ids,
            VocabRef::new(&vocab, vocab_path),
        )?,
    };
    prepare_out(r, out)?;
    if r.train.checkpoint_interval > 0 {
        trainer.set_checkpoint_dir(Some(out.to_path_buf()));
    }
    let metrics_path = out.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path).with_context(|| format!("cannot write {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    trainer.run(|rec| {
        serde_json::to_writer(&mut metrics, rec).map_err(|e| sanlm_core::Error::Param(e.to_string()))?;
        metrics
            .write_all(b"\n")
            .map_err(|e| sanlm_core::Error::Io {
                path: metrics_path.display().to_string(),
                source: e,
            })
    })?;
    metrics.flush()?;
    trainer.checkpoint().save(out.join("model.ckpt"))?;
    Ok(())
}

/// Loads a checkpoint and the vocabulary it was trained with.
fn load_scorer(checkpoint: &Path, vocab: Option<&str>) -> Result<Scorer> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab_path = vocab.map(str::to_string).unwrap_or_else(|| ckpt.vocab.path.clone());
    let vocab = load_vocab(&vocab_path)?;
    ckpt.check_vocab(&vocab)?;
    Ok(Scorer::new(ckpt.model, vocab)?)
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    text: &'a str,
    #[serde(flatten)]
    score: &'a SentenceScore,
}

fn score(r: &Resolved, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let scorer = load_scorer(checkpoint, r.vocab.path.as_deref())?;
    let texts: Vec<String> = read_lines(input)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let scores = scorer.score_many(&texts, r.threads)?;
    prepare_out(r, out)?;
    jsonl(
        &out.join("scores.jsonl"),
        texts.iter().zip(&scores).map(|(text, score)| ScoreRecord { text, score }),
    )
}

/// The LM described by the `--checkpoint` flags.
struct Lm {
    bi: Option<Scorer>,
    uni: Option<Scorer>,
    alpha: f64,
}

impl Lm {
    fn load(args: &LmArgs, r: &Resolved) -> Result<Self> {
        let mut lm = Lm {
            bi: None,
            uni: None,
            alpha: r.rescore.alpha,
        };
        if args.checkpoint.len() > 2 {
            bail!(UsageError("at most two checkpoints (one bi, one uni) may be given".into()));
        }
        for path in &args.checkpoint {
            let scorer = load_scorer(path, r.vocab.path.as_deref())?;
            let slot = match scorer.mode() {
                Direction::Bidirectional => &mut lm.bi,
                Direction::Unidirectional => &mut lm.uni,
            };
            if slot.is_some() {
                bail!(UsageError(format!(
                    "two {} checkpoints given; pass one of each direction",
                    scorer.mode()
                )));
            }
            *slot = Some(scorer);
        }
        Ok(lm)
    }

    fn scores(&self, lists: &[NBestList], threads: usize) -> Result<Vec<Vec<f64>>> {
        let scorer: Box<dyn LmScorer + '_> = match (&self.uni, &self.bi) {
            (Some(uni), Some(bi)) => Box::new(Interpolated {
                uni,
                bi,
                alpha: self.alpha,
            }),
            (Some(one), None) | (None, Some(one)) => Box::new(one.clone()),
            (None, None) => bail!(UsageError("no checkpoint given".into())),
        };
        Ok(lm_scores_many(lists, scorer.as_ref(), threads)?)
    }
}

fn load_lists(path: &Path, max_n: Option<usize>) -> Result<Vec<NBestList>> {
    let mut lists = read_nbest(path, max_n)?;
    let mut seen = HashSet::new();
    for l in &lists {
        if !seen.insert(l.utt_id.clone()) {
            bail!(sanlm_core::Error::Format {
                line: 0,
                msg: format!("duplicate utterance id `{}` in {}", l.utt_id, path.display()),
            });
        }
    }
    lists.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(lists)
}

#[derive(Serialize)]
struct RescoredRecord<'a> {
    utt_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
    lambda: f64,
    hypotheses: Vec<ScoredHypothesis>,
}

fn rescore(r: &mut Resolved, lm_args: &LmArgs, nbest: &Path, out: &Path) -> Result<()> {
    for c in &lm_args.checkpoint {
        r.paths.insert(format!("checkpoint.{}", r.paths.len()), c.display().to_string());
    }
    let lm = Lm::load(lm_args, r)?;
    let lists = load_lists(nbest, r.rescore.max_n)?;
    let scores = lm.scores(&lists, r.threads)?;
    let lambda = r.rescore.lambda;
    let ranked = lists
        .iter()
        .zip(&scores)
        .map(|(l, s)| rank(l, s, lambda))
        .collect::<sanlm_core::Result<Vec<_>>>()?;
    prepare_out(r, out)?;
    jsonl(
        &out.join("rescored.jsonl"),
        lists.iter().zip(ranked.iter()).map(|(l, h)| RescoredRecord {
            utt_id: &l.utt_id,
            reference: l.reference.as_deref(),
            lambda,
            hypotheses: h.clone(),
        }),
    )?;
    let mut top1 = String::new();
    for (l, h) in lists.iter().zip(&ranked) {
        top1.push_str(&format!("{}\t{}\n", l.utt_id, h[0].text));
    }
    write_file(&out.join("top1.txt"), top1.as_bytes())
}

fn sweep(r: &mut Resolved, lm_args: &LmArgs, nbest: &Path, out: &Path) -> Result<()> {
    for c in &lm_args.checkpoint {
        r.paths.insert(format!("checkpoint.{}", r.paths.len()), c.display().to_string());
    }
    let lm = Lm::load(lm_args, r)?;
    let lists = load_lists(nbest, r.rescore.max_n)?;
    let scores = lm.scores(&lists, r.threads)?;
    let result = sweep_lambda(&lists, &scores, &r.rescore.grid)?;
    prepare_out(r, out)?;
    let mut csv = String::from("lambda,ref_words,substitutions,deletions,insertions,errors,wer_percent\n");
    for row in &result.rows {
        let s = SystemRow::new(format!("{}", row.lambda), &row.counts);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.system, s.ref_words, s.substitutions, s.deletions, s.insertions, s.errors, s.wer_percent
        ));
    }
    write_file(&out.join("sweep.csv"), csv.as_bytes())?;
    write_file(&out.join("sweep.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
    println!("best lambda {}", result.best_lambda);
    Ok(())
}

/// `utt_id<TAB>text` lines.
fn read_tsv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        if map.insert(id.to_string(), text.to_string()).is_some() {
            bail!(sanlm_core::Error::Format {
                line: i + 1,
                msg: format!("duplicate utterance id `{id}` in {}", path.display()),
            });
        }
    }
    Ok(map)
}

/// Everything the evaluation commands compare against.
struct EvalInputs {
    lists: Vec<NBestList>,
    references: BTreeMap<String, String>,
    hypotheses: Option<BTreeMap<String, String>>,
}

impl EvalInputs {
    fn load(a: &EvalArgs) -> Result<Self> {
        let mut lists = match &a.nbest {
            Some(p) => load_lists(p, None)?,
            None => Vec::new(),
        };
        let mut references: BTreeMap<String, String> = lists
            .iter()
            .filter_map(|l| l.reference.clone().map(|r| (l.utt_id.clone(), r)))
            .collect();
        if let Some(p) = &a.refs {
            references.extend(read_tsv(p)?);
            for l in &mut lists {
                if let Some(r) = references.get(&l.utt_id) {
                    l.reference = Some(r.clone());
                }
            }
        }
        let hypotheses = a.hyp.as_deref().map(read_tsv).transpose()?;
        if lists.is_empty() && hypotheses.is_none() {
            bail!(UsageError("give --nbest, or --hyp with --refs".into()));
        }
        Ok(Self {
            lists,
            references,
            hypotheses,
        })
    }

    /// (utt_id, reference, hypothesis) for the transcripts under test: the
    /// `--hyp` file if given, otherwise the acoustic 1-best of each list.
    fn pairs(&self) -> Result<Vec<(String, String, String)>> {
        let reference = |id: &str| {
            self.references
                .get(id)
                .cloned()
                .ok_or_else(|| sanlm_core::Error::MissingReference(id.to_string()))
        };
        match &self.hypotheses {
            Some(h) => h.iter().map(|(id, text)| Ok((id.clone(), reference(id)?, text.clone()))).collect(),
            None => self
                .lists
                .iter()
                .map(|l| Ok((l.utt_id.clone(), reference(&l.utt_id)?, l.entries[0].text.clone())))
                .collect(),
        }
    }
}

fn report_for(pairs: &[(String, String, String)]) -> Result<WerReport> {
    let mut report = WerReport::default();
    for (id, r, h) in pairs {
        let (counts, _) = wer(&tokenize(r), &tokenize(h))?;
        report.add(id, counts);
    }
    Ok(report)
}

#[derive(Serialize)]
struct Summary {
    utterances: usize,
    systems: Vec<SystemRow>,
}

fn evaluate(r: &Resolved, a: &EvalArgs) -> Result<()> {
    let inputs = EvalInputs::load(a)?;
    let mut systems = Vec::new();
    if !inputs.lists.is_empty() {
        let first: Vec<_> = inputs
            .lists
            .iter()
            .map(|l| Ok((l.utt_id.clone(), l.reference_words()?.join(" "), l.entries[0].text.clone())))
            .collect::<sanlm_core::Result<_>>()?;
        systems.push(SystemRow::new("1-best", &report_for(&first)?.total));
        let mut oracle = EditCounts::default();
        for l in &inputs.lists {
            oracle += oracle_wer(l)?.counts;
        }
        systems.push(SystemRow::new("oracle", &oracle));
    }
    let pairs = inputs.pairs()?;
    let report = report_for(&pairs)?;
    if inputs.hypotheses.is_some() {
        systems.push(SystemRow::new("hypothesis", &report.total));
    }
    prepare_out(r, out_dir(a))?;
    emit(out_dir(a).join("wer.csv"), &report.to_csv())?;
    emit(out_dir(a).join("systems.csv"), &systems_csv(&systems))?;
    let summary = Summary {
        utterances: report.utterances.len(),
        systems,
    };
    write_file(
        &out_dir(a).join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?).as_bytes(),
    )?;
    for s in &summary.systems {
        println!("{:<12} WER {}%", s.system, s.wer_percent);
    }
    Ok(())
}

fn out_dir(a: &EvalArgs) -> &Path {
    &a.out
}

#[derive(Serialize)]
struct PositionSummary {
    utterances: usize,
    histogram_total: usize,
    substitutions: usize,
    insertions: usize,
    deletions: usize,
}

fn analyze_positions(r: &Resolved, a: &EvalArgs) -> Result<()> {
    let inputs = EvalInputs::load(a)?;
    let pairs = inputs.pairs()?;
    let mut hist = PositionErrorHistogram::default();
    let mut total = EditCounts::default();
    for (_, reference, hyp) in &pairs {
        let (counts, alignment) = wer(&tokenize(reference), &tokenize(hyp))?;
        hist.add_alignment(&alignment);
        total += counts;
    }
    if hist.total() != total.substitutions + total.insertions {
        bail!("histogram total {} disagrees with S+I", hist.total());
    }
    prepare_out(r, &a.out)?;
    emit(a.out.join("positions.csv"), &hist.to_csv())?;
    let summary = PositionSummary {
        utterances: pairs.len(),
        histogram_total: hist.total(),
        substitutions: total.substitutions,
        insertions: total.insertions,
        deletions: total.deletions,
    };
    write_file(
        &a.out.join("positions.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?).as_bytes(),
    )
}

fn synth(r: &Resolved, a: &crate::SynthArgs) -> Result<()> {
    let mut rng = RngState::new(r.seed);
    let corpus = synthetic::corpus(a.sentences, &mut rng);
    let cfg = NBestConfig {
        list_size: a.list_size.max(1),
        positions: a.early.map_or(CorruptionPositions::Uniform, CorruptionPositions::Early),
        ..NBestConfig::default()
    };
    let lists = synthetic::nbest_lists("utt", a.lists, &cfg, &mut rng);
    prepare_out(r, &a.out)?;
    let mut text = corpus.join("\n");
    text.push('\n');
    write_file(&a.out.join("corpus.txt"), text.as_bytes())?;
    write_nbest(a.out.join("nbest.jsonl"), &lists)?;
    Ok(())
}
