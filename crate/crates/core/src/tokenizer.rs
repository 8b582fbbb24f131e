//! WordPiece tokenization and word-to-piece label alignment.
//!
//! Words are split greedily into the longest vocabulary prefix, with
//! non-initial pieces carrying the `##` continuation marker. The first piece
//! of a word (its head) carries the word's labels; tail pieces are masked out
//! of both losses and of decoding.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Document, EntityRef, Tag};
use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    pad: u32,
}

impl Vocabulary {
    pub fn from_pieces<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for (i, p) in pieces.into_iter().enumerate() {
            let p: String = p.into();
            if p.is_empty() {
                return Err(Error::parse(i + 1, "empty vocabulary entry"));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate piece `{}`", p)));
            }
            list.push(p);
        }
        if list.is_empty() {
            return Err(Error::Validation("vocabulary is empty".into()));
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| Error::Validation(format!("vocabulary lacks {}", UNK)))?;
        let pad = *index
            .get(PAD)
            .ok_or_else(|| Error::Validation(format!("vocabulary lacks {}", PAD)))?;
        Ok(Vocabulary {
            pieces: list,
            index,
            unk,
            pad,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// One piece per line.
pub fn load_vocab<R: BufRead>(reader: R) -> Result<Vocabulary> {
    let mut pieces = Vec::new();
    for line in reader.lines() {
        let line = line?;
        pieces.push(line.strip_suffix('\r').map(str::to_string).unwrap_or(line));
    }
    Vocabulary::from_pieces(pieces)
}

/// Greedy longest-match-first split of one word.
pub fn tokenize_word(word: &str, vocab: &Vocabulary) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + CONTINUATION.len());
    while start < chars.len() {
        let mut found = None;
        let mut end = chars.len();
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    out
}

/// Piece ids with head/pad bookkeeping. `word_of_piece` holds document-level
/// word indices (`None` on padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceSequence {
    pub piece_ids: Vec<u32>,
    pub head_mask: Vec<bool>,
    pub word_of_piece: Vec<Option<usize>>,
    pub pad_mask: Vec<bool>,
}

impl WordPieceSequence {
    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&r| r).count()
    }

    /// Iterates `(piece_index, word_index)` over head pieces.
    pub fn heads(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.head_mask
            .iter()
            .zip(&self.word_of_piece)
            .enumerate()
            .filter_map(|(i, (&h, w))| if h { w.map(|w| (i, w)) } else { None })
    }
}

/// Label carried by one piece position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PieceLabel {
    Head { tag: Tag, entity: Option<EntityRef> },
    Tail,
    Pad,
}

impl PieceLabel {
    pub fn tag(&self) -> Option<Tag> {
        match self {
            PieceLabel::Head { tag, .. } => Some(*tag),
            _ => None,
        }
    }
}

/// A gold mention located in piece space: `piece` is the head piece of its
/// first word, the only position that receives a disambiguation target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionAnchor {
    pub piece: usize,
    pub start_word: usize,
    pub end_word: usize,
    pub entity: Option<EntityRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedWindow {
    pub seq: WordPieceSequence,
    pub labels: Vec<PieceLabel>,
    pub mentions: Vec<MentionAnchor>,
    /// Document words covered, `first_word..end_word`.
    pub first_word: usize,
    pub end_word: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overflow {
    Split,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub max_len: usize,
    pub pad_to_max: bool,
    pub overflow: Overflow,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            max_len: 512,
            pad_to_max: true,
            overflow: Overflow::Split,
        }
    }
}

/// Tokenizes a document and projects its word labels onto pieces.
///
/// Documents longer than `max_len` pieces are cut into consecutive windows at
/// word boundaries. A cut that would land inside a gold mention moves left to
/// the mention's first word.
pub fn align_document(
    doc: &Document,
    vocab: &Vocabulary,
    cfg: &AlignConfig,
) -> Result<Vec<AlignedWindow>> {
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let word_pieces: Vec<Vec<u32>> = doc.tokens.iter().map(|w| tokenize_word(w, vocab)).collect();
    let total: usize = word_pieces.iter().map(Vec::len).sum();
    if total > cfg.max_len && cfg.overflow == Overflow::Error {
        return Err(Error::Validation(format!(
            "document `{}` has {} pieces, more than max_len {}",
            doc.doc_id, total, cfg.max_len
        )));
    }

    let n = doc.len();
    let mut windows = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        let mut used = 0;
        while end < n && used + word_pieces[end].len() <= cfg.max_len {
            used += word_pieces[end].len();
            end += 1;
        }
        if end < n && doc.gold_tags[end] == Tag::I {
            while end > start && doc.gold_tags[end] == Tag::I {
                end -= 1;
            }
            // `end` now sits on the mention's B word, which opens the next window
        }
        if end == start {
            return Err(Error::Validation(format!(
                "document `{}`: word {} starts a span that does not fit in {} pieces",
                doc.doc_id, start, cfg.max_len
            )));
        }
        windows.push(build_window(doc, vocab, &word_pieces, start, end, cfg));
        start = end;
    }
    Ok(windows)
}

fn build_window(
    doc: &Document,
    vocab: &Vocabulary,
    word_pieces: &[Vec<u32>],
    start: usize,
    end: usize,
    cfg: &AlignConfig,
) -> AlignedWindow {
    let mut seq = WordPieceSequence {
        piece_ids: Vec::new(),
        head_mask: Vec::new(),
        word_of_piece: Vec::new(),
        pad_mask: Vec::new(),
    };
    let mut labels = Vec::new();
    let mut mentions = Vec::new();
    for w in start..end {
        let tag = doc.gold_tags[w];
        if tag == Tag::B {
            let mut last = w;
            while last + 1 < doc.len() && doc.gold_tags[last + 1] == Tag::I {
                last += 1;
            }
            mentions.push(MentionAnchor {
                piece: seq.piece_ids.len(),
                start_word: w,
                end_word: last,
                entity: doc.gold_entities[w].clone(),
            });
        }
        for (j, &id) in word_pieces[w].iter().enumerate() {
            seq.piece_ids.push(id);
            seq.head_mask.push(j == 0);
            seq.word_of_piece.push(Some(w));
            seq.pad_mask.push(true);
            labels.push(if j == 0 {
                PieceLabel::Head {
                    tag,
                    entity: doc.gold_entities[w].clone(),
                }
            } else {
                PieceLabel::Tail
            });
        }
    }
    if cfg.pad_to_max {
        while seq.piece_ids.len() < cfg.max_len {
            seq.piece_ids.push(vocab.pad_id());
            seq.head_mask.push(false);
            seq.word_of_piece.push(None);
            seq.pad_mask.push(false);
            labels.push(PieceLabel::Pad);
        }
    }
    AlignedWindow {
        seq,
        labels,
        mentions,
        first_word: start,
        end_word: end,
    }
}
