//! Span decoding: piece-level tags and projections to linked mentions.
//!
//! A mention is a maximal `B I*` run of word tags. Its entity comes from the
//! projection at the head piece of its first word; projections at every other
//! position are ignored.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateTable, Document, EntityId, EntityNames, Tag};
use crate::entity_index::EntityIndex;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tokenizer::WordPieceSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMention {
    pub doc_id: String,
    pub start_word: usize,
    pub end_word: usize,
    pub entity_id: EntityId,
    pub score: f64,
}

/// What to do with a span whose surface form has no candidate entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissPolicy {
    #[default]
    FullUniverse,
    Drop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub miss_policy: MissPolicy,
}

/// Turns every `I` at position 0 or right after an `O` into `B`.
pub fn repair_iob(tags: &[Tag]) -> Vec<Tag> {
    let mut out = tags.to_vec();
    for i in 0..out.len() {
        if out[i] == Tag::I && (i == 0 || out[i - 1] == Tag::O) {
            out[i] = Tag::B;
        }
    }
    out
}

/// Maximal `B I*` runs as inclusive `(start, end)` pairs. Expects repaired tags.
pub fn spans(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == Tag::O {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < tags.len() && tags[i] == Tag::I {
            i += 1;
        }
        out.push((start, i - 1));
    }
    out
}

/// Model outputs for one aligned window of a document.
#[derive(Debug, Clone, Copy)]
pub struct WindowPrediction<'a> {
    pub seq: &'a WordPieceSequence,
    pub md_tags: &'a [Tag],
    pub m_ed: &'a Matrix,
}

/// Word-level tags and the `(window, piece)` of each word's head piece.
pub fn project_to_words(
    n_words: usize,
    windows: &[WindowPrediction<'_>],
) -> Result<(Vec<Tag>, Vec<(usize, usize)>)> {
    let mut tags = vec![None; n_words];
    let mut heads = vec![None; n_words];
    for (wi, w) in windows.iter().enumerate() {
        if w.md_tags.len() != w.seq.len() || w.m_ed.rows() != w.seq.len() {
            return Err(Error::Shape(format!(
                "window {} has {} pieces but {} tags and {} projections",
                wi,
                w.seq.len(),
                w.md_tags.len(),
                w.m_ed.rows()
            )));
        }
        for (piece, word) in w.seq.heads() {
            if word >= n_words || tags[word].is_some() {
                return Err(Error::Shape(format!("word {} has no unique head piece", word)));
            }
            tags[word] = Some(w.md_tags[piece]);
            heads[word] = Some((wi, piece));
        }
    }
    let tags = tags
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Shape(format!("word {} has no head piece", i))))
        .collect::<Result<Vec<_>>>()?;
    let heads = heads.into_iter().map(|h| h.expect("set with tag")).collect();
    Ok((tags, heads))
}

pub fn decode_mentions(
    doc: &Document,
    windows: &[WindowPrediction<'_>],
    index: &EntityIndex,
    candidates: Option<&CandidateTable>,
    cfg: &DecodeConfig,
) -> Result<Vec<PredictedMention>> {
    let (word_tags, heads) = project_to_words(doc.len(), windows)?;
    let tags = repair_iob(&word_tags);
    let mut out = Vec::new();
    for (start, end) in spans(&tags) {
        let (wi, piece) = heads[start];
        let query = windows[wi].m_ed.row(piece);
        let mask = match candidates {
            Some(table) => match table.get(&doc.surface(start, end)) {
                Some(ids) => Some(ids),
                None if cfg.miss_policy == MissPolicy::Drop => continue,
                None => None,
            },
            None => None,
        };
        let best = index.search(query, mask, 1)?[0];
        out.push(PredictedMention {
            doc_id: doc.doc_id.clone(),
            start_word: start,
            end_word: end,
            entity_id: best.id,
            score: best.similarity,
        });
    }
    Ok(out)
}

/// Writes `doc_id, start_word, end_word, entity_name, score` rows sorted by
/// `(doc_id, start_word)`.
pub fn write_predictions<W: Write + ?Sized>(
    preds: &[PredictedMention],
    names: &EntityNames,
    out: &mut W,
) -> Result<()> {
    let mut sorted: Vec<&PredictedMention> = preds.iter().collect();
    sorted.sort_by(|a, b| {
        a.doc_id
            .cmp(&b.doc_id)
            .then(a.start_word.cmp(&b.start_word))
    });
    for p in sorted {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            p.doc_id,
            p.start_word,
            p.end_word,
            names.name(p.entity_id),
            p.score
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityTable;
    use Tag::{B, I, O};

    #[test]
    fn repair_rules() {
        assert_eq!(repair_iob(&[O, I, I, O]), vec![O, B, I, O]);
        assert_eq!(repair_iob(&[B, I, O, B]), vec![B, I, O, B]);
        assert_eq!(repair_iob(&[I]), vec![B]);
        assert_eq!(repair_iob(&[]), Vec::<Tag>::new());
    }

    #[test]
    fn spans_are_maximal_runs() {
        assert_eq!(spans(&[B, I, O, B, B, I, I]), vec![(0, 1), (3, 3), (4, 6)]);
    }

    fn seq(n: usize) -> WordPieceSequence {
        WordPieceSequence {
            piece_ids: vec![1; n],
            head_mask: vec![true; n],
            word_of_piece: (0..n).map(Some).collect(),
            pad_mask: vec![true; n],
        }
    }

    fn doc(words: &[&str]) -> Document {
        let n = words.len();
        Document::new("d", words.iter().map(|s| s.to_string()).collect(), vec![O; n], vec![None; n]).unwrap()
    }

    fn index() -> EntityIndex {
        EntityIndex::build(
            &EntityTable::from_rows(&[
                ("Paris_(city)", vec![1.0, 0.0, 0.0]),
                ("Paris_Hilton", vec![0.0, 1.0, 0.0]),
                ("Paris_(band)", vec![0.0, 0.0, 1.0]),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn single_span_pipeline() {
        let d = doc(&["Paris", "is", "nice"]);
        let s = seq(3);
        let m_ed = Matrix::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let w = [WindowPrediction {
            seq: &s,
            md_tags: &[B, O, O],
            m_ed: &m_ed,
        }];
        let out = decode_mentions(&d, &w, &index(), None, &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start_word, out[0].end_word, out[0].entity_id), (0, 0, EntityId(0)));
    }

    #[test]
    fn entity_comes_from_first_word_only() {
        let d = doc(&["Paris", "Hilton", "smiled"]);
        let s = seq(3);
        let m_ed = Matrix::from_rows(&[vec![1.0, 0.2, 0.0], vec![0.0, 0.0, 9.0], vec![0.0, 5.0, 0.0]]).unwrap();
        let w = [WindowPrediction {
            seq: &s,
            md_tags: &[B, I, O],
            m_ed: &m_ed,
        }];
        let out = decode_mentions(&d, &w, &index(), None, &DecodeConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start_word, out[0].end_word), (0, 1));
        assert_eq!(out[0].entity_id, EntityId(0));
    }

    #[test]
    fn candidate_set_restricts_choice() {
        let d = doc(&["Paris"]);
        let s = seq(1);
        // globally nearest is the band (id 2)
        let m_ed = Matrix::from_rows(&[vec![0.1, 0.2, 1.0]]).unwrap();
        let w = [WindowPrediction {
            seq: &s,
            md_tags: &[B],
            m_ed: &m_ed,
        }];
        let cands = CandidateTable::from_entries([("Paris".to_string(), vec![EntityId(0), EntityId(1)])], false);
        let free = decode_mentions(&d, &w, &index(), None, &DecodeConfig::default()).unwrap();
        assert_eq!(free[0].entity_id, EntityId(2));
        let masked = decode_mentions(&d, &w, &index(), Some(&cands), &DecodeConfig::default()).unwrap();
        assert_eq!(masked[0].entity_id, EntityId(1));
    }

    #[test]
    fn miss_policy() {
        let d = doc(&["London"]);
        let s = seq(1);
        let m_ed = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let w = [WindowPrediction {
            seq: &s,
            md_tags: &[B],
            m_ed: &m_ed,
        }];
        let cands = CandidateTable::from_entries([("Paris".to_string(), vec![EntityId(0)])], false);
        let fallback = decode_mentions(&d, &w, &index(), Some(&cands), &DecodeConfig::default()).unwrap();
        assert_eq!(fallback[0].entity_id, EntityId(2));
        let strict = DecodeConfig {
            miss_policy: MissPolicy::Drop,
        };
        assert!(decode_mentions(&d, &w, &index(), Some(&cands), &strict).unwrap().is_empty());
    }

    #[test]
    fn predictions_file_is_sorted() {
        let idx = index();
        let p = |doc: &str, s: usize| PredictedMention {
            doc_id: doc.into(),
            start_word: s,
            end_word: s,
            entity_id: EntityId(1),
            score: 0.5,
        };
        let mut buf = Vec::new();
        write_predictions(&[p("b", 0), p("a", 3), p("a", 1)], idx.names(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "a\t1\t1\tParis_Hilton\t0.5\na\t3\t3\tParis_Hilton\t0.5\nb\t0\t0\tParis_Hilton\t0.5\n"
        );
    }
}
