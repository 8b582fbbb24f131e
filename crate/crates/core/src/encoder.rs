//! Frozen context encoders producing one `m`-wide row per word piece.

use std::collections::HashMap;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tokenizer::WordPieceSequence;

/// Contextualized piece embeddings, `p x m`, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    values: Matrix,
}

impl ContextMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("context matrix holds NaN or infinity".into()));
        }
        Ok(ContextMatrix { values })
    }

    pub fn p(&self) -> usize {
        self.values.rows()
    }

    pub fn m(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }
}

/// A frozen encoder. Implementations must be pure: the same sequence always
/// yields the same matrix.
pub trait ContextEncoder: Send + Sync {
    fn width(&self) -> usize;

    fn encode(&self, seq: &WordPieceSequence) -> Result<ContextMatrix>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedEncoderConfig {
    pub m: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for HashedEncoderConfig {
    fn default() -> Self {
        HashedEncoderConfig {
            m: 64,
            window: 2,
            seed: 0,
        }
    }
}

/// Deterministic stand-in encoder: every piece id maps to a seeded unit
/// vector, mixed half-and-half with the mean of its `±window` neighbourhood.
#[derive(Debug, Clone)]
pub struct HashedEncoder {
    cfg: HashedEncoderConfig,
}

impl HashedEncoder {
    pub fn new(cfg: HashedEncoderConfig) -> Result<Self> {
        if cfg.m == 0 {
            return Err(Error::Config("encoder width m must be at least 1".into()));
        }
        Ok(HashedEncoder { cfg })
    }

    pub fn config(&self) -> &HashedEncoderConfig {
        &self.cfg
    }

    /// Unit-norm base vector of a piece, keyed by `(seed, piece_id)`.
    pub fn base_vector(&self, piece_id: u32) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(u64::from(piece_id));
        let mut v: Vec<f64> = (0..self.cfg.m).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

impl ContextEncoder for HashedEncoder {
    fn width(&self) -> usize {
        self.cfg.m
    }

    fn encode(&self, seq: &WordPieceSequence) -> Result<ContextMatrix> {
        let p = seq.len();
        let m = self.cfg.m;
        let w = self.cfg.window;
        let mut cache: HashMap<u32, Vec<f64>> = HashMap::new();
        let base: Vec<&[f64]> = {
            for &id in &seq.piece_ids {
                cache.entry(id).or_insert_with(|| self.base_vector(id));
            }
            seq.piece_ids.iter().map(|id| cache[id].as_slice()).collect()
        };
        let mut out = Matrix::zeros(p, m);
        let mut mean = vec![0.0f64; m];
        for i in 0..p {
            let row = out.row_mut(i);
            if !seq.pad_mask[i] {
                row.copy_from_slice(base[i]);
                continue;
            }
            mean.iter_mut().for_each(|x| *x = 0.0);
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(p - 1);
            let mut count = 0usize;
            for j in lo..=hi {
                if !seq.pad_mask[j] {
                    continue;
                }
                count += 1;
                for (acc, v) in mean.iter_mut().zip(base[j]) {
                    *acc += v;
                }
            }
            let inv = count as f64;
            for ((dst, &e), &s) in row.iter_mut().zip(base[i]).zip(&mean) {
                *dst = 0.5 * e + 0.5 * (s / inv);
            }
        }
        ContextMatrix::new(out)
    }
}

/// Loads externally computed features in the text matrix format, checking the
/// declared shape against the sequence it belongs to.
pub fn load_precomputed<R: BufRead>(reader: R, expected_p: usize, expected_m: usize) -> Result<ContextMatrix> {
    let matrix = Matrix::read_text(reader)?;
    if matrix.rows() != expected_p || matrix.cols() != expected_m {
        return Err(Error::Shape(format!(
            "precomputed matrix is {}x{}, expected {}x{}",
            matrix.rows(),
            matrix.cols(),
            expected_p,
            expected_m
        )));
    }
    ContextMatrix::new(matrix)
}
