//! Training and evaluation protocol.
//!
//! A step is one Adam update over a batch of documents. Documents are visited
//! in an order reshuffled every epoch by a seeded generator; per-document
//! gradients are computed in parallel and summed in batch order. Each repeat
//! `r` uses seed `seed + r`, and the final-step parameters are reported (no
//! validation-based selection).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::corpus::{
    load_candidate_table, load_entity_table, parse_documents, CandidateTable, Document, EntityTable,
    Tag,
};
use crate::decoder::{decode_mentions, DecodeConfig, PredictedMention, WindowPrediction};
use crate::encoder::{ContextEncoder, ContextMatrix, HashedEncoder, HashedEncoderConfig};
use crate::entity_index::EntityIndex;
use crate::error::{Error, Result};
use crate::evaluator::{ed_accuracy, strong_match_f1, EvalMode, EvalReport, NilPolicy};
use crate::io_util;
use crate::model::{
    adam_step, check_lambda, ed_forward, md_forward, AdamConfig, AdamState, BatchAccumulator,
    DropoutMask, EdTarget, Example, HeadParams, LossBreakdown,
};
use crate::tokenizer::{align_document, load_vocab, AlignConfig, AlignedWindow, PieceLabel, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub dropout: f64,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: u64,
    pub seed: u64,
    pub repeats: usize,
    /// Also score the final parameters on the training split.
    pub eval_train: bool,
    pub encoder: HashedEncoderConfig,
    pub align: AlignConfig,
    pub decode: DecodeConfig,
    pub nil_policy: NilPolicy,
    pub use_candidates: bool,
    pub case_fold_candidates: bool,
    pub train_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub entities_path: Option<PathBuf>,
    pub candidates_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: 0.1,
            lr: 2e-5,
            batch_size: 4,
            max_steps: 50_000,
            dropout: 0.1,
            eval_every: 1000,
            seed: 0,
            repeats: 3,
            eval_train: false,
            encoder: HashedEncoderConfig::default(),
            align: AlignConfig::default(),
            decode: DecodeConfig::default(),
            nil_policy: NilPolicy::Strict,
            use_candidates: true,
            case_fold_candidates: false,
            train_path: None,
            validation_path: None,
            test_path: None,
            vocab_path: None,
            entities_path: None,
            candidates_path: None,
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    /// Defaults with the step budget cut to 2,000 for single-machine runs.
    pub fn desk_scale() -> Self {
        RunConfig {
            max_steps: 2_000,
            eval_every: 500,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.encoder.m == 0 {
            return Err(Error::Config("encoder width m must be at least 1".into()));
        }
        Ok(())
    }

    /// Reads a JSON (`.json`) or TOML (anything else) config file. Relative
    /// paths inside the file are resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e)))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
        };
        if let Some(base) = path.parent() {
            for p in [
                &mut cfg.train_path,
                &mut cfg.validation_path,
                &mut cfg.test_path,
                &mut cfg.vocab_path,
                &mut cfg.entities_path,
                &mut cfg.candidates_path,
                &mut cfg.checkpoint_dir,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }
}

/// Loaded vocabulary, entity index and optional candidate table.
pub struct Resources {
    pub vocab: Vocabulary,
    pub index: EntityIndex,
    pub candidates: Option<CandidateTable>,
}

impl Resources {
    pub fn load(vocab: &Path, entities: &Path, candidates: Option<&Path>, case_fold: bool) -> Result<Self> {
        Self::load_cached(vocab, entities, candidates, case_fold, None)
    }

    /// Like [`Resources::load`], reusing the index cache at `cache` when it
    /// matches the entity table and rewriting it otherwise.
    pub fn load_cached(
        vocab: &Path,
        entities: &Path,
        candidates: Option<&Path>,
        case_fold: bool,
        cache: Option<&Path>,
    ) -> Result<Self> {
        let vocab = load_vocab(io_util::open(vocab)?)?;
        let table = load_entity_table(io_util::open(entities)?)?;
        let candidates = match candidates {
            Some(p) => Some(load_candidate_table(io_util::open(p)?, table.names(), case_fold)?.0),
            None => None,
        };
        let index = match cache {
            Some(path) => load_or_build_index(table, path)?.0,
            None => EntityIndex::from_table(table),
        };
        Ok(Resources {
            vocab,
            index,
            candidates,
        })
    }
}

/// Returns the cached index at `path` if it was built from `table`; otherwise
/// builds one and writes the cache. The flag reports a cache hit.
pub fn load_or_build_index(table: EntityTable, path: &Path) -> Result<(EntityIndex, bool)> {
    if path.exists() {
        if let Some(index) = EntityIndex::read_cache(io_util::open(path)?, &table)? {
            return Ok((index, true));
        }
        log::info!("index cache {} is stale; rebuilding", path.display());
    }
    let index = EntityIndex::from_table(table);
    io_util::write_atomic(path, |w| index.write_cache(w))?;
    Ok((index, false))
}

pub fn load_split(path: &Path) -> Result<Vec<Document>> {
    parse_documents(io_util::open(path)?)
}

/// One aligned window with its frozen encoding and loss targets.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub align: AlignedWindow,
    pub h: ContextMatrix,
    pub md_targets: Vec<Option<Tag>>,
    pub ed_targets: Vec<EdTarget>,
}

#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub doc: Document,
    pub windows: Vec<PreparedWindow>,
}

/// Tokenizes, aligns and encodes documents. Disambiguation targets are kept
/// only for mentions whose gold entity is in the index; NIL and out-of-table
/// mentions still train the tagger.
pub fn prepare_documents(
    docs: &[Document],
    vocab: &Vocabulary,
    encoder: &dyn ContextEncoder,
    index: &EntityIndex,
    align: &AlignConfig,
) -> Result<Vec<PreparedDoc>> {
    docs.par_iter()
        .map(|doc| {
            let windows = align_document(doc, vocab, align)?
                .into_iter()
                .map(|w| {
                    let h = encoder.encode(&w.seq)?;
                    let md_targets = w.labels.iter().map(PieceLabel::tag).collect();
                    let ed_targets = w
                        .mentions
                        .iter()
                        .filter_map(|m| {
                            let id = index.names().resolve(m.entity.as_ref()?)?;
                            Some(EdTarget {
                                piece: m.piece,
                                embedding: index.row_f64(id),
                            })
                        })
                        .collect();
                    Ok(PreparedWindow {
                        align: w,
                        h,
                        md_targets,
                        ed_targets,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedDoc {
                doc: doc.clone(),
                windows,
            })
        })
        .collect()
}

/// How spans are disambiguated at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    FullUniverse,
    Candidates,
}

impl SearchMode {
    pub fn label(self) -> &'static str {
        match self {
            SearchMode::FullUniverse => "full-universe",
            SearchMode::Candidates => "candidates",
        }
    }
}

pub fn predict_document(
    prep: &PreparedDoc,
    params: &HeadParams,
    index: &EntityIndex,
    candidates: Option<&CandidateTable>,
    decode: &DecodeConfig,
) -> Result<Vec<PredictedMention>> {
    let outputs = prep
        .windows
        .iter()
        .map(|w| Ok((md_forward(&w.h, params)?.tags, ed_forward(&w.h, params)?)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<WindowPrediction<'_>> = prep
        .windows
        .iter()
        .zip(&outputs)
        .map(|(w, (tags, m_ed))| WindowPrediction {
            seq: &w.align.seq,
            md_tags: tags,
            m_ed,
        })
        .collect();
    decode_mentions(&prep.doc, &views, index, candidates, decode)
}

/// Dropout-free end-to-end linking and strong-matching scoring.
pub fn evaluate_prepared(
    prepared: &[PreparedDoc],
    params: &HeadParams,
    index: &EntityIndex,
    candidates: Option<&CandidateTable>,
    decode: &DecodeConfig,
    nil_policy: NilPolicy,
) -> Result<EvalReport> {
    if prepared.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let preds: Vec<Vec<PredictedMention>> = prepared
        .par_iter()
        .map(|p| predict_document(p, params, index, candidates, decode))
        .collect::<Result<_>>()?;
    let docs: Vec<Document> = prepared.iter().map(|p| p.doc.clone()).collect();
    let flat: Vec<PredictedMention> = preds.into_iter().flatten().collect();
    let mut report = strong_match_f1(&docs, &flat, index.names(), nil_policy)?;
    report.search = Some(
        if candidates.is_some() {
            SearchMode::Candidates
        } else {
            SearchMode::FullUniverse
        }
        .label()
        .to_string(),
    );
    Ok(report)
}

/// Disambiguation with gold spans given: every in-table gold mention is linked
/// from its first head piece and scored by accuracy.
pub fn evaluate_gold_mentions(
    prepared: &[PreparedDoc],
    params: &HeadParams,
    index: &EntityIndex,
    candidates: Option<&CandidateTable>,
    nil_policy: NilPolicy,
) -> Result<EvalReport> {
    if prepared.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let per_doc: Vec<Vec<(PredictedMention, crate::corpus::EntityId)>> = prepared
        .par_iter()
        .map(|p| {
            let mut out = Vec::new();
            for w in &p.windows {
                let m_ed = ed_forward(&w.h, params)?;
                for m in &w.align.mentions {
                    let Some(gold) = m.entity.as_ref().and_then(|e| index.names().resolve(e)) else {
                        continue;
                    };
                    let mask = candidates.and_then(|c| c.get(&p.doc.surface(m.start_word, m.end_word)));
                    let hit = index.search(m_ed.row(m.piece), mask, 1)?[0];
                    out.push((
                        PredictedMention {
                            doc_id: p.doc.doc_id.clone(),
                            start_word: m.start_word,
                            end_word: m.end_word,
                            entity_id: hit.id,
                            score: hit.similarity,
                        },
                        gold,
                    ));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = per_doc.into_iter().flatten().collect();
    let gold: Vec<_> = pairs.iter().map(|(_, g)| *g).collect();
    let predicted: Vec<_> = pairs.iter().map(|(p, _)| p.entity_id).collect();
    let accuracy = ed_accuracy(&gold, &predicted)?;
    let docs: Vec<Document> = prepared.iter().map(|p| p.doc.clone()).collect();
    let preds: Vec<PredictedMention> = pairs.into_iter().map(|(p, _)| p).collect();
    let mut report = strong_match_f1(&docs, &preds, index.names(), nil_policy)?;
    report.mode = EvalMode::Ed;
    report.accuracy = Some(accuracy);
    report.search = Some(
        if candidates.is_some() {
            SearchMode::Candidates
        } else {
            SearchMode::FullUniverse
        }
        .label()
        .to_string(),
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub j: f64,
    pub l_md: f64,
    pub l_ed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub seed: u64,
    pub steps: u64,
    pub loss_curve: Vec<LossPoint>,
    pub validation_history: Vec<ValidationPoint>,
    /// Final-step evaluation per split name.
    pub final_eval: BTreeMap<String, EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub micro_f1: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub micro_f1_mean: f64,
    pub micro_f1_std: Option<f64>,
    pub macro_f1_mean: f64,
    pub macro_f1_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Always `final-step`.
    pub selection: String,
    pub search: String,
    pub repeats: Vec<RepeatReport>,
    pub summary: BTreeMap<String, SplitSummary>,
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (0.0, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Named evaluation splits, already prepared.
#[derive(Default)]
pub struct Splits {
    pub train: Vec<PreparedDoc>,
    pub validation: Option<Vec<PreparedDoc>>,
    pub test: Option<Vec<PreparedDoc>>,
}

/// Output of a single repeat: parameters, optimizer state and curves.
pub struct RepeatOutcome {
    pub params: HeadParams,
    pub adam: AdamState,
    pub loss_curve: Vec<LossPoint>,
    pub validation_history: Vec<ValidationPoint>,
}

/// Batch iterator over a seeded, per-epoch shuffled document order.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Batcher { order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub index: &'a EntityIndex,
    pub candidates: Option<&'a CandidateTable>,
}

impl Trainer<'_> {
    fn search_candidates(&self) -> Option<&CandidateTable> {
        if self.cfg.use_candidates {
            self.candidates
        } else {
            None
        }
    }

    /// Runs one seeded repeat over `train`.
    pub fn train_repeat(
        &self,
        train: &[PreparedDoc],
        validation: Option<&[PreparedDoc]>,
        seed: u64,
    ) -> Result<RepeatOutcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let m = cfg.encoder.m;
        let d = self.index.d();
        for p in train {
            for w in &p.windows {
                if w.h.m() != m {
                    return Err(Error::Shape(format!(
                        "encoded width {} differs from configured m={}",
                        w.h.m(),
                        m
                    )));
                }
            }
        }

        let mut params = HeadParams::init(m, d, seed);
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(m, d, adam_cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut batcher = Batcher::new(train.len(), &mut rng);
        let mut loss_curve = Vec::with_capacity(cfg.max_steps.min(1 << 20) as usize);
        let mut validation_history = Vec::new();

        for step in 1..=cfg.max_steps {
            let batch = batcher.next_batch(cfg.batch_size, &mut rng);
            // masks are drawn sequentially so the stream is independent of threading
            let masks: Vec<Vec<Option<DropoutMask>>> = batch
                .iter()
                .map(|&i| {
                    train[i]
                        .windows
                        .iter()
                        .map(|w| {
                            (cfg.dropout > 0.0)
                                .then(|| DropoutMask::sample(w.align.seq.real_len(), m, cfg.dropout, &mut rng))
                        })
                        .collect()
                })
                .collect();
            let partials: Vec<BatchAccumulator> = batch
                .par_iter()
                .zip(masks.par_iter())
                .map(|(&i, doc_masks)| {
                    let mut acc = BatchAccumulator::new(m, d, true);
                    for (w, mask) in train[i].windows.iter().zip(doc_masks) {
                        let ex = Example {
                            h: &w.h,
                            md_targets: &w.md_targets,
                            ed_targets: &w.ed_targets,
                            dropout: mask.as_ref(),
                        };
                        acc.add(&ex, &params)?;
                    }
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            let mut total = BatchAccumulator::new(m, d, true);
            for part in &partials {
                total.merge(part);
            }
            let (loss, grads) = total.finish(cfg.lambda)?;
            if !loss.j.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite loss {}", loss.j),
                });
            }
            let grads = grads.expect("gradients tracked");
            adam_step(&mut params, &grads, &mut adam).map_err(|e| Error::Training {
                step,
                message: e.to_string(),
            })?;
            loss_curve.push(LossPoint {
                step,
                j: loss.j,
                l_md: loss.l_md,
                l_ed: loss.l_ed,
            });
            if let Some(val) = validation {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                    let r = evaluate_prepared(
                        val,
                        &params,
                        self.index,
                        self.search_candidates(),
                        &cfg.decode,
                        cfg.nil_policy,
                    )?;
                    log::info!(
                        "step {}: J={:.6} validation micro F1={:.4} macro F1={:.4}",
                        step,
                        loss.j,
                        r.micro_f1,
                        r.macro_f1
                    );
                    validation_history.push(ValidationPoint {
                        step,
                        micro_f1: r.micro_f1,
                        macro_f1: r.macro_f1,
                    });
                }
            }
        }
        Ok(RepeatOutcome {
            params,
            adam,
            loss_curve,
            validation_history,
        })
    }

    pub fn evaluate(&self, prepared: &[PreparedDoc], params: &HeadParams) -> Result<EvalReport> {
        evaluate_prepared(
            prepared,
            params,
            self.index,
            self.search_candidates(),
            &self.cfg.decode,
            self.cfg.nil_policy,
        )
    }

    /// All repeats, final-step evaluation on every available split, and
    /// optional checkpointing.
    pub fn run(&self, splits: &Splits, meta: &CheckpointMeta) -> Result<(RunReport, Vec<Checkpoint>)> {
        let cfg = self.cfg;
        cfg.validate()?;
        let mut named: Vec<(&str, &[PreparedDoc])> = Vec::new();
        if let Some(v) = &splits.validation {
            named.push(("validation", v));
        }
        if let Some(t) = &splits.test {
            named.push(("test", t));
        }
        if cfg.eval_train || named.is_empty() {
            named.insert(0, ("train", &splits.train));
        }

        let mut repeats = Vec::with_capacity(cfg.repeats);
        let mut checkpoints = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let seed = cfg.seed.wrapping_add(r as u64);
            let out = self.train_repeat(&splits.train, splits.validation.as_deref(), seed)?;
            let mut final_eval = BTreeMap::new();
            for (name, docs) in &named {
                final_eval.insert(name.to_string(), self.evaluate(docs, &out.params)?);
            }
            let checkpoint = Checkpoint {
                params: out.params,
                adam: out.adam,
                meta: CheckpointMeta {
                    seed,
                    step: cfg.max_steps,
                    ..meta.clone()
                },
            };
            let path = match &cfg.checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("repeat-{}.elck", r));
                    checkpoint.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            repeats.push(RepeatReport {
                repeat: r,
                seed,
                steps: cfg.max_steps,
                loss_curve: out.loss_curve,
                validation_history: out.validation_history,
                final_eval,
                checkpoint: path,
            });
            checkpoints.push(checkpoint);
        }

        let mut summary = BTreeMap::new();
        for (name, _) in &named {
            let micro: Vec<f64> = repeats.iter().map(|r| r.final_eval[*name].micro_f1).collect();
            let macro_: Vec<f64> = repeats.iter().map(|r| r.final_eval[*name].macro_f1).collect();
            let (micro_mean, micro_std) = mean_std(&micro);
            let (macro_mean, macro_std) = mean_std(&macro_);
            summary.insert(
                name.to_string(),
                SplitSummary {
                    micro_f1: micro,
                    macro_f1: macro_,
                    micro_f1_mean: micro_mean,
                    micro_f1_std: micro_std,
                    macro_f1_mean: macro_mean,
                    macro_f1_std: macro_std,
                },
            );
        }
        let search = if self.search_candidates().is_some() {
            SearchMode::Candidates
        } else {
            SearchMode::FullUniverse
        };
        Ok((
            RunReport {
                selection: "final-step".into(),
                search: search.label().into(),
                repeats,
                summary,
            },
            checkpoints,
        ))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing path: {}", what)))
}

/// Loads everything named in `cfg`, trains all repeats and returns the report.
pub fn train(cfg: &RunConfig) -> Result<(RunReport, Vec<Checkpoint>)> {
    cfg.validate()?;
    let resources = Resources::load(
        required(&cfg.vocab_path, "vocab_path")?,
        required(&cfg.entities_path, "entities_path")?,
        cfg.candidates_path.as_deref(),
        cfg.case_fold_candidates,
    )?;
    let encoder = HashedEncoder::new(cfg.encoder)?;
    let prep = |p: &Path| -> Result<Vec<PreparedDoc>> {
        let docs = load_split(p)?;
        prepare_documents(&docs, &resources.vocab, &encoder, &resources.index, &cfg.align)
    };
    let splits = Splits {
        train: prep(required(&cfg.train_path, "train_path")?)?,
        validation: cfg.validation_path.as_deref().map(prep).transpose()?,
        test: cfg.test_path.as_deref().map(prep).transpose()?,
    };
    let meta = checkpoint_meta(cfg, &resources);
    let trainer = Trainer {
        cfg,
        index: &resources.index,
        candidates: resources.candidates.as_ref(),
    };
    trainer.run(&splits, &meta)
}

pub fn checkpoint_meta(cfg: &RunConfig, resources: &Resources) -> CheckpointMeta {
    CheckpointMeta {
        lambda: cfg.lambda,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
        dropout: cfg.dropout,
        step: 0,
        encoder: cfg.encoder,
        align: cfg.align,
        vocab_digest: resources.vocab.digest(),
        entity_digest: resources.index.source_digest().to_string(),
        vocab_path: cfg.vocab_path.clone(),
        entities_path: cfg.entities_path.clone(),
        candidates_path: cfg.candidates_path.clone(),
    }
}

/// Refuses checkpoints trained against different vocabulary or entity content.
pub fn check_digests(checkpoint: &Checkpoint, resources: &Resources) -> Result<()> {
    if checkpoint.meta.vocab_digest != resources.vocab.digest() {
        return Err(Error::DigestMismatch("vocabulary differs from the one used in training".into()));
    }
    if checkpoint.meta.entity_digest != resources.index.source_digest() {
        return Err(Error::DigestMismatch("entity table differs from the one used in training".into()));
    }
    checkpoint.params.check_shapes(checkpoint.meta.encoder.m, resources.index.d())
}

/// Full pipeline evaluation of a checkpoint on documents, dropout disabled.
pub fn evaluate(
    checkpoint: &Checkpoint,
    docs: &[Document],
    resources: &Resources,
    use_candidates: bool,
    decode: &DecodeConfig,
    nil_policy: NilPolicy,
) -> Result<EvalReport> {
    check_digests(checkpoint, resources)?;
    if docs.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let encoder = HashedEncoder::new(checkpoint.meta.encoder)?;
    let prepared = prepare_documents(docs, &resources.vocab, &encoder, &resources.index, &checkpoint.meta.align)?;
    let candidates = if use_candidates {
        resources.candidates.as_ref()
    } else {
        None
    };
    evaluate_prepared(&prepared, &checkpoint.params, &resources.index, candidates, decode, nil_policy)
}

/// Evaluates [`LossBreakdown`] on prepared documents without dropout.
pub fn dataset_loss(prepared: &[PreparedDoc], params: &HeadParams, lambda: f64) -> Result<LossBreakdown> {
    let mut acc = BatchAccumulator::new(params.m(), params.d(), false);
    for p in prepared {
        for w in &p.windows {
            acc.add(
                &Example {
                    h: &w.h,
                    md_targets: &w.md_targets,
                    ed_targets: &w.ed_targets,
                    dropout: None,
                },
                params,
            )?;
        }
    }
    Ok(acc.finish(lambda)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[0.5]), (0.5, None));
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = [
            RunConfig { lambda: 1.5, ..Default::default() },
            RunConfig { dropout: 1.0, ..Default::default() },
            RunConfig { batch_size: 0, ..Default::default() },
            RunConfig { repeats: 0, ..Default::default() },
            RunConfig { lr: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.lambda, cfg.lr, cfg.batch_size, cfg.max_steps), (0.1, 2e-5, 4, 50_000));
        assert_eq!((cfg.dropout, cfg.repeats), (0.1, 3));
        assert_eq!(RunConfig::desk_scale().max_steps, 2_000);
    }

    #[test]
    fn toml_and_json_configs() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, "lambda = 0.2\nseed = 9\nvocab_path = \"v.txt\"\n[encoder]\nm = 8\nwindow = 0\nseed = 1\n").unwrap();
        let cfg = RunConfig::from_file(&toml_path).unwrap();
        assert_eq!((cfg.lambda, cfg.seed, cfg.encoder.m), (0.2, 9, 8));
        assert_eq!(cfg.vocab_path.unwrap(), dir.path().join("v.txt"));

        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, r#"{"repeats": 1, "lr": 0.001}"#).unwrap();
        let cfg = RunConfig::from_file(&json_path).unwrap();
        assert_eq!((cfg.repeats, cfg.lr), (1, 0.001));

        std::fs::write(&json_path, r#"{"bogus": 1}"#).unwrap();
        assert!(RunConfig::from_file(&json_path).is_err());
    }
}
