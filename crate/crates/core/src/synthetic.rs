//! Seeded synthetic data: a small linkable corpus for end-to-end runs and
//! large random entity tables for index smoke tests.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Document, EntityRef, EntityTable, EntityTableBuilder, Tag};
use crate::error::Result;
use crate::tokenizer::{Vocabulary, PAD, UNK};

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub entities: usize,
    pub documents: usize,
    pub max_words: usize,
    pub d: usize,
    /// Distinct filler (`O`) words.
    pub fillers: usize,
    /// Distinct continuation (`I`) words shared across entities.
    pub continuations: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            entities: 50,
            documents: 20,
            max_words: 30,
            d: 16,
            fillers: 4,
            continuations: 2,
            seed: 2024,
        }
    }
}

/// A generated corpus with its vocabulary and entity table. Every word is a
/// single vocabulary piece.
pub struct Fixture {
    pub docs: Vec<Document>,
    pub vocab: Vocabulary,
    pub table: EntityTable,
    /// Surface form of each entity, indexed by entity id.
    pub surfaces: Vec<Vec<String>>,
}

/// Builds a corpus where entity `i` is always written with its own first word
/// (`ent{i}`), optionally followed by a shared continuation word. Entities are
/// mentioned equally often (up to one permutation cycle) between fillers.
pub fn linking_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("w{}", i)).collect();
    let conts: Vec<String> = (0..cfg.continuations).map(|i| format!("c{}", i)).collect();

    let surfaces: Vec<Vec<String>> = (0..cfg.entities)
        .map(|i| {
            let mut s = vec![format!("ent{}", i)];
            if !conts.is_empty() && i % 2 == 1 {
                s.push(conts[i / 2 % conts.len()].clone());
            }
            s
        })
        .collect();

    let rows: Vec<(String, Vec<f32>)> = (0..cfg.entities)
        .map(|i| {
            let v = (0..cfg.d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            (format!("Entity_{}", i), v)
        })
        .collect();
    let named: Vec<(&str, Vec<f32>)> = rows.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
    let table = EntityTable::from_rows(&named)?;

    let mut cycle: Vec<usize> = (0..cfg.entities).collect();
    let mut cursor = cycle.len();
    let mut docs = Vec::with_capacity(cfg.documents);
    for di in 0..cfg.documents {
        let mut words: Vec<(String, Tag, Option<EntityRef>)> = Vec::new();
        loop {
            // entities cycle through shuffled permutations so all occur equally often
            if cursor == cycle.len() {
                cycle.shuffle(&mut rng);
                cursor = 0;
            }
            let entity = cycle[cursor];
            let surface = &surfaces[entity];
            let gap = rng.random_range(1..=2);
            if words.len() + gap + surface.len() > cfg.max_words {
                break;
            }
            for _ in 0..gap {
                words.push((fillers.choose(&mut rng).expect("fillers").clone(), Tag::O, None));
            }
            let name = EntityRef::Named(rows[entity].0.clone());
            for (k, w) in surface.iter().enumerate() {
                let tag = if k == 0 { Tag::B } else { Tag::I };
                words.push((w.clone(), tag, Some(name.clone())));
            }
            cursor += 1;
        }
        if words.len() < cfg.max_words {
            words.push((fillers.choose(&mut rng).expect("fillers").clone(), Tag::O, None));
        }
        let mut tokens = Vec::with_capacity(words.len());
        let mut tags = Vec::with_capacity(words.len());
        let mut ents = Vec::with_capacity(words.len());
        for (w, t, e) in words {
            tokens.push(w);
            tags.push(t);
            ents.push(e);
        }
        docs.push(Document::new(format!("doc{:02}", di), tokens, tags, ents)?);
    }

    let mut pieces: Vec<String> = vec![PAD.to_string(), UNK.to_string()];
    pieces.extend(surfaces.iter().map(|s| s[0].clone()));
    pieces.extend(conts);
    pieces.extend(fillers);
    let vocab = Vocabulary::from_pieces(pieces.iter().map(String::as_str))?;
    Ok(Fixture {
        docs,
        vocab,
        table,
        surfaces,
    })
}

/// Streams a `k × d` table of standard-normal rows named `E{i}` straight into
/// a preallocated builder.
pub fn random_table(k: usize, d: usize, seed: u64) -> Result<EntityTable> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut builder = EntityTableBuilder::new(k, d)?;
    let mut row = vec![0f32; d];
    let mut name = String::new();
    for i in 0..k {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        name.clear();
        use std::fmt::Write;
        write!(name, "E{}", i).expect("string write");
        builder.push(&name, &row)?;
    }
    builder.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let cfg = FixtureConfig::default();
        let f = linking_fixture(&cfg).unwrap();
        assert_eq!(f.docs.len(), 20);
        assert_eq!(f.table.k(), 50);
        assert!(f.docs.iter().all(|d| d.len() <= 30 && !d.is_empty()));
        let mut seen = [false; 50];
        for d in &f.docs {
            for m in d.mentions() {
                let name = m.entity.unwrap();
                let id = f.table.names().resolve(&name).unwrap();
                seen[id.index()] = true;
                assert_eq!(d.tokens[m.start..=m.end], f.surfaces[id.index()][..]);
            }
        }
        assert!(seen.iter().all(|&s| s), "every entity is mentioned");
    }

    #[test]
    fn fixture_is_seeded() {
        let a = linking_fixture(&FixtureConfig::default()).unwrap();
        let b = linking_fixture(&FixtureConfig::default()).unwrap();
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.table.digest(), b.table.digest());
    }

    #[test]
    fn random_table_rows() {
        let t = random_table(100, 7, 1).unwrap();
        assert_eq!((t.k(), t.d()), (100, 7));
        assert_eq!(t.id_of("E42").unwrap().index(), 42);
    }
}
