#![allow(dead_code)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use linkforge::corpus::{write_documents, Tag};
use linkforge::encoder::{ContextMatrix, HashedEncoderConfig};
use linkforge::matrix::Matrix;
use linkforge::model::{DropoutMask, EdTarget, HeadParams};
use linkforge::synthetic::{linking_fixture, Fixture, FixtureConfig};
use linkforge::tokenizer::{AlignConfig, Vocabulary};
use linkforge::trainer::RunConfig;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// A random loss instance: encoder output, per-row tag targets with some
/// rows masked, disambiguation targets at distinct rows, and parameters.
pub struct Instance {
    pub h: ContextMatrix,
    pub md_targets: Vec<Option<Tag>>,
    pub ed_targets: Vec<EdTarget>,
    pub params: HeadParams,
    pub mask: Option<DropoutMask>,
}

pub fn random_instance(rng: &mut ChaCha20Rng, p: usize, m: usize, d: usize, with_mask: bool) -> Instance {
    let data: Vec<f64> = (0..p * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = ContextMatrix::new(Matrix::from_vec(p, m, data).unwrap()).unwrap();
    let md_targets = (0..p)
        .map(|_| {
            if rng.random_bool(0.25) {
                None
            } else {
                Tag::from_index(rng.random_range(0..3))
            }
        })
        .collect();
    let mut ed_targets = Vec::new();
    for piece in 0..p {
        if rng.random_bool(0.4) {
            let embedding = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            ed_targets.push(EdTarget { piece, embedding });
        }
    }
    let params = HeadParams::init(m, d, rng.random());
    let mask = with_mask.then(|| DropoutMask::sample(p, m, 0.1, rng));
    Instance {
        h,
        md_targets,
        ed_targets,
        params,
        mask,
    }
}

/// Files of a generated corpus on disk.
pub struct FixtureFiles {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub vocab: PathBuf,
    pub entities: PathBuf,
    pub candidates: PathBuf,
}

pub fn write_vocab(vocab: &Vocabulary, path: &Path) {
    let mut out = BufWriter::new(File::create(path).unwrap());
    for id in 0..vocab.len() as u32 {
        writeln!(out, "{}", vocab.piece(id)).unwrap();
    }
}

/// Writes the default linking fixture, plus a candidate table mapping every
/// surface form to its own entity and one distractor.
pub fn write_fixture(dir: &Path) -> (Fixture, FixtureFiles) {
    let fixture = linking_fixture(&FixtureConfig::default()).unwrap();
    let files = FixtureFiles {
        dir: dir.to_path_buf(),
        train: dir.join("train.tsv"),
        vocab: dir.join("vocab.txt"),
        entities: dir.join("entities.txt"),
        candidates: dir.join("candidates.tsv"),
    };
    write_documents(&fixture.docs, &mut File::create(&files.train).unwrap()).unwrap();
    write_vocab(&fixture.vocab, &files.vocab);
    fixture.table.write(&mut File::create(&files.entities).unwrap()).unwrap();
    let mut c = BufWriter::new(File::create(&files.candidates).unwrap());
    let k = fixture.surfaces.len();
    for (i, s) in fixture.surfaces.iter().enumerate() {
        let names = fixture.table.names();
        let own = names.name(linkforge::corpus::EntityId(i as u32));
        let other = names.name(linkforge::corpus::EntityId(((i + 1) % k) as u32));
        writeln!(c, "{}\t{}\t{}", s.join(" "), own, other).unwrap();
    }
    (fixture, files)
}

/// Training settings for the fixture: the protocol defaults with the
/// learning rate scaled to 2e-3, a context-free encoder and unpadded windows.
pub fn fixture_config(max_steps: u64) -> RunConfig {
    RunConfig {
        lr: 2e-3,
        max_steps,
        repeats: 1,
        eval_every: 0,
        encoder: HashedEncoderConfig {
            m: 64,
            window: 0,
            seed: 0,
        },
        align: AlignConfig {
            pad_to_max: false,
            ..AlignConfig::default()
        },
        ..RunConfig::default()
    }
}
