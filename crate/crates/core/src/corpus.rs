//! Gold-annotated documents, entity-embedding tables and candidate tables.
//!
//! Corpus files are tab-separated, one word per line (`token<TAB>tag<TAB>entity`),
//! with documents introduced by `-DOCSTART- <doc_id>`. Entity tables carry a
//! `k d` header followed by `name v_1 .. v_d` rows. Candidate tables map a
//! surface form to one or more entity names, tab-separated.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::parse_header;

/// Spelling of the NIL entity in corpus files.
pub const NIL_SENTINEL: &str = "--NME--";
const DOCSTART: &str = "-DOCSTART-";

/// Mention indicator. The discriminants are the class indices used by the
/// tagging head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    I = 0,
    O = 1,
    B = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::I, Tag::O, Tag::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Tag::ALL.get(i).copied()
    }

    pub fn is_mention(self) -> bool {
        self != Tag::O
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::I => "I",
            Tag::O => "O",
            Tag::B => "B",
        })
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "I" => Ok(Tag::I),
            "O" => Ok(Tag::O),
            "B" => Ok(Tag::B),
            other => Err(format!("unknown tag `{}` (expected B, I or O)", other)),
        }
    }
}

/// Gold entity annotation of a word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EntityRef {
    Named(String),
    Nil,
}

impl EntityRef {
    fn parse(field: &str) -> Option<EntityRef> {
        match field {
            "" => None,
            NIL_SENTINEL => Some(EntityRef::Nil),
            name => Some(EntityRef::Named(name.to_string())),
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            EntityRef::Named(n) => Some(n),
            EntityRef::Nil => None,
        }
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityRef::Named(n) => f.write_str(n),
            EntityRef::Nil => f.write_str(NIL_SENTINEL),
        }
    }
}

/// A contiguous gold mention, word indices inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GoldMention {
    pub start: usize,
    pub end: usize,
    pub entity: Option<EntityRef>,
}

/// A pre-tokenized document with word-level gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub gold_tags: Vec<Tag>,
    pub gold_entities: Vec<Option<EntityRef>>,
}

impl Document {
    /// Builds and validates a document.
    pub fn new(
        doc_id: impl Into<String>,
        tokens: Vec<String>,
        gold_tags: Vec<Tag>,
        gold_entities: Vec<Option<EntityRef>>,
    ) -> Result<Self> {
        let doc = Document {
            doc_id: doc_id.into(),
            tokens,
            gold_tags,
            gold_entities,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.doc_id;
        if id.is_empty() || id.trim() != id || id.contains(['\t', '\n', '\r']) {
            return Err(Error::Validation(format!("invalid document id `{}`", id)));
        }
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Validation(format!("document `{}` has no words", id)));
        }
        if self.gold_tags.len() != n || self.gold_entities.len() != n {
            return Err(Error::Validation(format!(
                "document `{}`: {} words but {} tags and {} entity labels",
                id,
                n,
                self.gold_tags.len(),
                self.gold_entities.len()
            )));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(['\t', '\n', '\r']) {
                return Err(Error::Validation(format!(
                    "document `{}`, word {}: empty token or token containing a tab/newline",
                    id, i
                )));
            }
        }
        for i in 0..n {
            let tag = self.gold_tags[i];
            let ent = &self.gold_entities[i];
            match tag {
                Tag::I if i == 0 || self.gold_tags[i - 1] == Tag::O => {
                    return Err(Error::Validation(format!(
                        "document `{}`, word {}: I tag without a preceding B or I",
                        id, i
                    )));
                }
                Tag::I if &self.gold_entities[i - 1] != ent => {
                    return Err(Error::Validation(format!(
                        "document `{}`, word {}: entity differs from the rest of its mention",
                        id, i
                    )));
                }
                Tag::O if ent.is_some() => {
                    return Err(Error::Validation(format!(
                        "document `{}`, word {}: entity reference on an O word",
                        id, i
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Gold mentions as maximal `B I*` runs.
    pub fn mentions(&self) -> Vec<GoldMention> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.gold_tags.len() {
            if self.gold_tags[i] == Tag::O {
                i += 1;
                continue;
            }
            let start = i;
            i += 1;
            while i < self.gold_tags.len() && self.gold_tags[i] == Tag::I {
                i += 1;
            }
            out.push(GoldMention {
                start,
                end: i - 1,
                entity: self.gold_entities[start].clone(),
            });
        }
        out
    }

    /// Surface form of the words `start..=end`, joined by single spaces.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..=end].join(" ")
    }
}

/// Parses documents in the canonical corpus format.
///
/// Blank lines are ignored. Words appearing before the first `-DOCSTART-`
/// line, or after a `-DOCSTART-` without an id, get the id `doc-<index>`.
pub fn parse_documents<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    struct Pending {
        doc_id: String,
        tokens: Vec<String>,
        tags: Vec<Tag>,
        entities: Vec<Option<EntityRef>>,
    }

    fn finish(pending: Option<Pending>, docs: &mut Vec<Document>) -> Result<()> {
        if let Some(p) = pending {
            docs.push(Document::new(p.doc_id, p.tokens, p.tags, p.entities)?);
        }
        Ok(())
    }

    let mut docs = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut pending: Option<Pending> = None;

    let start_doc = |id: &str, index: usize, seen: &mut HashSet<String>, lineno: usize| {
        let doc_id = if id.is_empty() {
            format!("doc-{}", index)
        } else {
            id.to_string()
        };
        if !seen.insert(doc_id.clone()) {
            return Err(Error::parse(lineno, format!("duplicate document id `{}`", doc_id)));
        }
        Ok(Pending {
            doc_id,
            tokens: Vec::new(),
            tags: Vec::new(),
            entities: Vec::new(),
        })
    };

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(DOCSTART) {
            if !rest.is_empty() && !rest.starts_with([' ', '\t']) {
                return Err(Error::parse(lineno, "malformed -DOCSTART- line"));
            }
            finish(pending.take(), &mut docs)?;
            let index = docs.len();
            pending = Some(start_doc(rest.trim(), index, &mut seen_ids, lineno)?);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 tab-separated columns, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(lineno, "empty token"));
        }
        let tag: Tag = fields[1].parse().map_err(|e| Error::parse(lineno, e))?;
        if pending.is_none() {
            let index = docs.len();
            pending = Some(start_doc("", index, &mut seen_ids, lineno)?);
        }
        let p = pending.as_mut().expect("document started above");
        p.tokens.push(fields[0].to_string());
        p.tags.push(tag);
        p.entities.push(EntityRef::parse(fields[2]));
    }
    finish(pending, &mut docs)?;
    Ok(docs)
}

/// Writes documents in the canonical corpus format.
pub fn write_documents<W: Write + ?Sized>(docs: &[Document], out: &mut W) -> Result<()> {
    for doc in docs {
        writeln!(out, "{} {}", DOCSTART, doc.doc_id)?;
        for ((tok, tag), ent) in doc.tokens.iter().zip(&doc.gold_tags).zip(&doc.gold_entities) {
            match ent {
                Some(e) => writeln!(out, "{}\t{}\t{}", tok, tag, e)?,
                None => writeln!(out, "{}\t{}\t", tok, tag)?,
            }
        }
    }
    Ok(())
}

/// Row index into an [`EntityTable`] (zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Entity names packed into one buffer, with a name-sorted permutation for
/// lookups. Shared between a table and the indexes built from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityNames {
    buf: String,
    offsets: Vec<usize>,
    by_name: Vec<u32>,
}

impl EntityNames {
    fn with_capacity(k: usize) -> Self {
        let mut offsets = Vec::with_capacity(k + 1);
        offsets.push(0);
        EntityNames {
            buf: String::new(),
            offsets,
            by_name: Vec::new(),
        }
    }

    fn push(&mut self, name: &str) {
        self.buf.push_str(name);
        self.offsets.push(self.buf.len());
    }

    /// Sorts the lookup permutation; fails on the first duplicate name.
    fn seal(&mut self) -> std::result::Result<(), String> {
        let k = self.len() as u32;
        let mut by_name: Vec<u32> = (0..k).collect();
        by_name.sort_unstable_by(|&a, &b| {
            self.name(EntityId(a))
                .cmp(self.name(EntityId(b)))
                .then(a.cmp(&b))
        });
        for w in by_name.windows(2) {
            if self.name(EntityId(w[0])) == self.name(EntityId(w[1])) {
                return Err(self.name(EntityId(w[1])).to_string());
            }
        }
        self.buf.shrink_to_fit();
        self.by_name = by_name;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self, id: EntityId) -> &str {
        let i = id.index();
        &self.buf[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn id_of(&self, name: &str) -> Option<EntityId> {
        self.by_name
            .binary_search_by(|&j| self.name(EntityId(j)).cmp(name))
            .ok()
            .map(|pos| EntityId(self.by_name[pos]))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> + '_ {
        (0..self.len()).map(|i| self.name(EntityId(i as u32)))
    }

    /// Resolves a gold reference to a row, `None` for NIL or out-of-table names.
    pub fn resolve(&self, entity: &EntityRef) -> Option<EntityId> {
        entity.name().and_then(|n| self.id_of(n))
    }
}

/// Entity embedding matrix `k x d` (single precision, row-major) with names.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTable {
    names: Arc<EntityNames>,
    embeddings: Vec<f32>,
    dim: usize,
}

/// Incremental constructor for [`EntityTable`]; reserves the exact matrix size
/// up front so large tables are built without reallocation.
pub struct EntityTableBuilder {
    names: EntityNames,
    embeddings: Vec<f32>,
    dim: usize,
    expected: usize,
}

impl EntityTableBuilder {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "entity table needs k >= 1 and d >= 1, got k={} d={}",
                k, d
            )));
        }
        if k > u32::MAX as usize {
            return Err(Error::Validation(format!("k={} exceeds the id range", k)));
        }
        Ok(EntityTableBuilder {
            names: EntityNames::with_capacity(k),
            embeddings: Vec::with_capacity(k * d),
            dim: d,
            expected: k,
        })
    }

    pub fn push(&mut self, name: &str, row: &[f32]) -> Result<()> {
        let idx = self.names.len();
        if idx == self.expected {
            return Err(Error::Validation(format!(
                "more than the declared {} entities",
                self.expected
            )));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "entity {}: name `{}` is empty or contains whitespace",
                idx, name
            )));
        }
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "entity `{}` has {} values, expected {}",
                name,
                row.len(),
                self.dim
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entity `{}` holds {}", name, v)));
        }
        let sq: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        if sq <= 0.0 {
            return Err(Error::Validation(format!(
                "entity `{}` has a zero-norm embedding",
                name
            )));
        }
        self.names.push(name);
        self.embeddings.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn finish(mut self) -> Result<EntityTable> {
        if self.names.len() != self.expected {
            return Err(Error::Validation(format!(
                "declared {} entities but {} were given",
                self.expected,
                self.names.len()
            )));
        }
        self.names
            .seal()
            .map_err(|dup| Error::Validation(format!("duplicate entity name `{}`", dup)))?;
        Ok(EntityTable {
            names: Arc::new(self.names),
            embeddings: self.embeddings,
            dim: self.dim,
        })
    }
}

impl EntityTable {
    pub fn from_rows(rows: &[(&str, Vec<f32>)]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.1.len());
        let mut b = EntityTableBuilder::new(rows.len(), d)?;
        for (name, row) in rows {
            b.push(name, row)?;
        }
        b.finish()
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn d(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &EntityNames {
        &self.names
    }

    pub fn shared_names(&self) -> Arc<EntityNames> {
        Arc::clone(&self.names)
    }

    pub fn row(&self, id: EntityId) -> &[f32] {
        let i = id.index();
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, id: EntityId) -> Vec<f64> {
        self.row(id).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn id_of(&self, name: &str) -> Option<EntityId> {
        self.names.id_of(name)
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub(crate) fn into_parts(self) -> (Arc<EntityNames>, Vec<f32>, usize) {
        (self.names, self.embeddings, self.dim)
    }

    /// SHA-256 over shape, names and embedding bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for name in self.names.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for chunk in self.embeddings.chunks(1 << 16) {
            let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }

    pub fn write<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {}", self.k(), self.dim)?;
        for (i, name) in self.names.iter().enumerate() {
            out.write_all(name.as_bytes())?;
            for v in self.row(EntityId(i as u32)) {
                write!(out, " {}", v)?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads an entity table: `k d` header, then `k` lines of `name v_1 .. v_d`.
pub fn load_entity_table<R: BufRead>(mut reader: R) -> Result<EntityTable> {
    let mut line = String::new();
    let mut lineno = 0usize;
    let (k, d) = loop {
        line.clear();
        lineno += 1;
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::parse(lineno, "missing `k d` header"));
        }
        if !line.trim().is_empty() {
            break parse_header(&line, lineno)?;
        }
    };
    let mut builder = EntityTableBuilder::new(k, d).map_err(|e| Error::parse(lineno, e.to_string()))?;
    let mut row: Vec<f32> = Vec::with_capacity(d);
    loop {
        line.clear();
        lineno += 1;
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let mut fields = text.split_ascii_whitespace();
        let name = fields.next().expect("non-blank line has a field");
        row.clear();
        for field in fields {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::parse(lineno, format!("non-numeric value `{}`", field)))?;
            row.push(v);
        }
        if row.len() != d {
            return Err(Error::parse(
                lineno,
                format!("entity `{}` has {} values, expected {}", name, row.len(), d),
            ));
        }
        builder
            .push(name, &row)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
    }
    builder.finish()
}

/// Surface form to candidate entity rows. Lists are kept at full length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateTable {
    entries: HashMap<String, Vec<EntityId>>,
    case_fold: bool,
}

/// Bookkeeping from [`load_candidate_table`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidateLoadStats {
    pub lines: usize,
    pub entries: usize,
    /// Candidate names not present in the entity table.
    pub unresolved_names: usize,
    /// Lines dropped because none of their names resolved.
    pub dropped_lines: usize,
}

impl CandidateTable {
    fn key(&self, surface: &str) -> String {
        if self.case_fold {
            surface.to_lowercase()
        } else {
            surface.to_string()
        }
    }

    pub fn from_entries<I>(entries: I, case_fold: bool) -> Self
    where
        I: IntoIterator<Item = (String, Vec<EntityId>)>,
    {
        let mut table = CandidateTable {
            entries: HashMap::new(),
            case_fold,
        };
        for (surface, ids) in entries {
            table.insert(&surface, ids);
        }
        table
    }

    fn insert(&mut self, surface: &str, ids: Vec<EntityId>) {
        if ids.is_empty() {
            return;
        }
        let key = self.key(surface);
        let list = self.entries.entry(key).or_default();
        for id in ids {
            if !list.contains(&id) {
                list.push(id);
            }
        }
    }

    pub fn get(&self, surface: &str) -> Option<&[EntityId]> {
        if self.case_fold {
            self.entries.get(&surface.to_lowercase()).map(Vec::as_slice)
        } else {
            self.entries.get(surface).map(Vec::as_slice)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn case_fold(&self) -> bool {
        self.case_fold
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[EntityId])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Reads `surface<TAB>name1<TAB>name2...` lines and resolves names against
/// `names`. Unknown names are skipped and counted; a line left with no
/// resolvable name is dropped.
pub fn load_candidate_table<R: BufRead>(
    reader: R,
    names: &EntityNames,
    case_fold: bool,
) -> Result<(CandidateTable, CandidateLoadStats)> {
    let mut table = CandidateTable {
        entries: HashMap::new(),
        case_fold,
    };
    let mut stats = CandidateLoadStats::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let surface = fields.next().unwrap_or_default();
        if surface.is_empty() {
            return Err(Error::parse(lineno, "empty surface form"));
        }
        let mut ids = Vec::new();
        let mut listed = 0usize;
        for name in fields {
            if name.is_empty() {
                return Err(Error::parse(lineno, "empty candidate name"));
            }
            listed += 1;
            match names.id_of(name) {
                Some(id) => ids.push(id),
                None => stats.unresolved_names += 1,
            }
        }
        if listed == 0 {
            return Err(Error::parse(lineno, "surface form without candidates"));
        }
        stats.lines += 1;
        if ids.is_empty() {
            stats.dropped_lines += 1;
            continue;
        }
        table.insert(surface, ids);
    }
    stats.entries = table.len();
    if stats.unresolved_names > 0 {
        log::warn!(
            "candidate table: {} unknown entity names skipped, {} lines dropped",
            stats.unresolved_names,
            stats.dropped_lines
        );
    }
    Ok((table, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<Document>> {
        parse_documents(text.as_bytes())
    }

    #[test]
    fn parses_single_block() {
        let docs = parse("Paris\tB\tParis_(city)\nis\tO\t\nnice\tO\t\n").unwrap();
        assert_eq!(docs.len(), 1);
        let d = &docs[0];
        assert_eq!(d.len(), 3);
        assert_eq!(d.gold_tags, vec![Tag::B, Tag::O, Tag::O]);
        assert_eq!(
            d.mentions(),
            vec![GoldMention {
                start: 0,
                end: 0,
                entity: Some(EntityRef::Named("Paris_(city)".into()))
            }]
        );
    }

    #[test]
    fn two_word_mention() {
        let docs = parse("-DOCSTART- d1\nNew\tB\tNYC\nYork\tI\tNYC\nrocks\tO\t\n").unwrap();
        assert_eq!(docs[0].doc_id, "d1");
        let m = docs[0].mentions();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end), (0, 1));
    }

    #[test]
    fn orphan_i_is_rejected() {
        let err = parse("-DOCSTART- x\na\tO\t\nb\tI\tE\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("`x`") && msg.contains("word 1"), "{}", msg);
    }

    #[test]
    fn entity_on_o_word_is_rejected() {
        assert!(matches!(parse("a\tO\tE\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = parse("-DOCSTART- a\nx\tO\t\ny\tO\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn inconsistent_mention_entity_is_rejected() {
        assert!(parse("a\tB\tX\nb\tI\tY\n").is_err());
    }

    #[test]
    fn nil_sentinel_maps_to_nil() {
        let docs = parse("a\tB\t--NME--\n").unwrap();
        assert_eq!(docs[0].gold_entities[0], Some(EntityRef::Nil));
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        assert!(parse("-DOCSTART- a\nx\tO\t\n-DOCSTART- a\ny\tO\t\n").is_err());
    }

    #[test]
    fn entity_table_loads() {
        let t = load_entity_table("2 3\nA 1 0 0\nB 0 1 0\n".as_bytes()).unwrap();
        assert_eq!((t.k(), t.d()), (2, 3));
        assert_eq!(t.id_of("A"), Some(EntityId(0)));
        assert_eq!(t.id_of("B"), Some(EntityId(1)));
        assert_eq!(t.id_of("C"), None);
    }

    #[test]
    fn entity_table_rejects_bad_input() {
        assert!(load_entity_table("1 3\nC 0 0 0\n".as_bytes()).is_err());
        assert!(load_entity_table("2 1\nA 1\n".as_bytes()).is_err());
        assert!(load_entity_table("1 1\nA 1\nB 2\n".as_bytes()).is_err());
        assert!(load_entity_table("2 1\nA 1\nA 2\n".as_bytes()).is_err());
        assert!(load_entity_table("1 2\nA 1 x\n".as_bytes()).is_err());
        assert!(load_entity_table("1 2\nA 1 NaN\n".as_bytes()).is_err());
        assert!(load_entity_table("0 2\n".as_bytes()).is_err());
    }

    #[test]
    fn entity_table_infers_width_100() {
        let mut text = String::from("1 100\nX");
        for i in 0..100 {
            text.push_str(&format!(" {}", i as f32 * 0.01 + 0.5));
        }
        text.push('\n');
        let t = load_entity_table(text.as_bytes()).unwrap();
        assert_eq!(t.d(), 100);
    }

    #[test]
    fn candidates_resolve_and_skip() {
        let t = load_entity_table("2 1\nParis_(city) 1\nParis_Hilton 2\n".as_bytes()).unwrap();
        let text = "Paris\tParis_(city)\tParis_Hilton\nNowhere\tAtlantis\n";
        let (c, stats) = load_candidate_table(text.as_bytes(), t.names(), false).unwrap();
        assert_eq!(c.get("Paris").unwrap().len(), 2);
        assert!(c.get("Nowhere").is_none());
        assert!(c.get("paris").is_none());
        assert_eq!(stats.dropped_lines, 1);
        assert_eq!(stats.unresolved_names, 1);
    }

    #[test]
    fn candidates_are_not_capped() {
        let mut table = String::from("40 1\n");
        let mut line = String::from("Springfield");
        for i in 0..40 {
            table.push_str(&format!("E{} 1\n", i));
            line.push_str(&format!("\tE{}", i));
        }
        let t = load_entity_table(table.as_bytes()).unwrap();
        let (c, _) = load_candidate_table(line.as_bytes(), t.names(), false).unwrap();
        assert_eq!(c.get("Springfield").unwrap().len(), 40);
    }

    #[test]
    fn case_folding_is_opt_in() {
        let t = load_entity_table("1 1\nA 1\n".as_bytes()).unwrap();
        let (c, _) = load_candidate_table("Foo\tA\n".as_bytes(), t.names(), true).unwrap();
        assert!(c.get("FOO").is_some());
    }

    #[test]
    fn candidate_line_without_names_is_malformed() {
        let t = load_entity_table("1 1\nA 1\n".as_bytes()).unwrap();
        assert!(load_candidate_table("Foo\n".as_bytes(), t.names(), false).is_err());
    }

    fn arb_document() -> impl Strategy<Value = Document> {
        let word = "[A-Za-z0-9.,]{1,8}";
        let entity = prop_oneof![
            Just(None),
            Just(Some(EntityRef::Nil)),
            "[A-Z][a-z_]{0,6}".prop_map(|s| Some(EntityRef::Named(s))),
        ];
        // (token, is_mention_start, continues_mention, entity)
        proptest::collection::vec((word, 0u8..3, entity), 1..25).prop_map(|words| {
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            let mut ents = Vec::new();
            for (tok, kind, ent) in words {
                let prev = tags.last().copied();
                let tag = match (kind, prev) {
                    (0, Some(Tag::B | Tag::I)) => Tag::I,
                    (0, _) | (1, _) => Tag::O,
                    _ => Tag::B,
                };
                let e = match tag {
                    Tag::O => None,
                    Tag::I => ents.last().cloned().unwrap(),
                    Tag::B => ent,
                };
                tokens.push(tok);
                tags.push(tag);
                ents.push(e);
            }
            Document::new("d", tokens, tags, ents).unwrap()
        })
    }

    /// Independent scan: every B opens a mention that runs over the following I tags.
    fn brute_force_mentions(doc: &Document) -> Vec<(usize, usize, Option<EntityRef>)> {
        let n = doc.len();
        let mut out = Vec::new();
        for s in 0..n {
            if doc.gold_tags[s] != Tag::B {
                continue;
            }
            let mut e = s;
            for j in s + 1..n {
                if doc.gold_tags[j] == Tag::I {
                    e = j;
                } else {
                    break;
                }
            }
            out.push((s, e, doc.gold_entities[s].clone()));
        }
        out
    }

    proptest! {
        #[test]
        fn document_roundtrip(docs in proptest::collection::vec(arb_document(), 1..4)) {
            let docs: Vec<Document> = docs
                .into_iter()
                .enumerate()
                .map(|(i, mut d)| { d.doc_id = format!("doc{}", i); d })
                .collect();
            let mut buf = Vec::new();
            write_documents(&docs, &mut buf).unwrap();
            let back = parse_documents(&buf[..]).unwrap();
            prop_assert_eq!(back, docs);
        }

        #[test]
        fn mentions_match_brute_force(doc in arb_document()) {
            let got: Vec<_> = doc.mentions().into_iter().map(|m| (m.start, m.end, m.entity)).collect();
            prop_assert_eq!(got, brute_force_mentions(&doc));
        }

        #[test]
        fn entity_table_roundtrip(rows in proptest::collection::vec(
            proptest::collection::vec(-1e6f32..1e6f32, 3), 1..20)) {
            let named: Vec<(String, Vec<f32>)> = rows
                .into_iter()
                .enumerate()
                .map(|(i, mut r)| { if r.iter().all(|v| *v == 0.0) { r[0] = 1.0; } (format!("E{}", i), r) })
                .collect();
            let borrowed: Vec<(&str, Vec<f32>)> = named.iter().map(|(n, r)| (n.as_str(), r.clone())).collect();
            let table = EntityTable::from_rows(&borrowed).unwrap();
            let mut buf = Vec::new();
            table.write(&mut buf).unwrap();
            let back = load_entity_table(&buf[..]).unwrap();
            prop_assert_eq!(back.names(), table.names());
            let a: Vec<u32> = table.embeddings().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.embeddings().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
