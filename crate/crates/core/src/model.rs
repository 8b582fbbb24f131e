//! Prediction heads, multi-task objective, analytic gradients and Adam.
//!
//! The tagging head is `softmax(W_md h + b_md)` over `{I, O, B}`; the
//! disambiguation head is `tanh(W_ed h + b_ed)`, compared to entity embeddings
//! by cosine similarity. Training minimizes
//!
//! ```text
//! J = lambda * L_md + (1 - lambda) * L_ed
//! L_md = mean over non-pad head pieces of -log p_md[gold tag]
//! L_ed = mean over first pieces of linkable mentions of 1 - cos(m_ed, e_gold)
//! ```
//!
//! All arithmetic is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Tag;
use crate::encoder::ContextMatrix;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

pub const MD_CLASSES: usize = 3;

/// Lower bound applied to vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Trainable parameters of both heads. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_md: Matrix,
    pub b_md: Vec<f64>,
    pub w_ed: Matrix,
    pub b_ed: Vec<f64>,
}

pub type Gradients = HeadParams;

impl HeadParams {
    pub fn zeros(m: usize, d: usize) -> Self {
        HeadParams {
            w_md: Matrix::zeros(MD_CLASSES, m),
            b_md: vec![0.0; MD_CLASSES],
            w_ed: Matrix::zeros(d, m),
            b_ed: vec![0.0; d],
        }
    }

    /// Uniform Glorot initialization of the weights, zero biases.
    pub fn init(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut p = HeadParams::zeros(m, d);
        for w in [&mut p.w_md, &mut p.w_ed] {
            let bound = (6.0 / (w.cols() + w.rows()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn m(&self) -> usize {
        self.w_md.cols()
    }

    pub fn d(&self) -> usize {
        self.w_ed.rows()
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    /// The four buffers in checkpoint order: `W_md, b_md, W_ed, b_ed`.
    pub fn parts(&self) -> [&[f64]; 4] {
        [
            self.w_md.as_slice(),
            &self.b_md,
            self.w_ed.as_slice(),
            &self.b_ed,
        ]
    }

    pub fn parts_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_md.as_mut_slice(),
            &mut self.b_md,
            self.w_ed.as_mut_slice(),
            &mut self.b_ed,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, m: usize, d: usize) -> Result<()> {
        let ok = self.w_md.rows() == MD_CLASSES
            && self.w_md.cols() == m
            && self.b_md.len() == MD_CLASSES
            && self.w_ed.rows() == d
            && self.w_ed.cols() == m
            && self.b_ed.len() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameters are not shaped for m={} d={}",
                m, d
            )))
        }
    }

    fn check_input(&self, h: &ContextMatrix) -> Result<()> {
        if h.m() != self.m() {
            return Err(Error::Shape(format!(
                "context width {} does not match head input width {}",
                h.m(),
                self.m()
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(())
    }
}

/// Output of the tagging head for every piece row.
#[derive(Debug, Clone, PartialEq)]
pub struct MdOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub tags: Vec<Tag>,
}

/// Numerically stable softmax; returns the probabilities and log-sum-exp.
fn softmax(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    max + sum.ln()
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn affine(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x) + b[r];
    }
}

pub fn md_forward(h: &ContextMatrix, params: &HeadParams) -> Result<MdOutput> {
    params.check_input(h)?;
    let p = h.p();
    let mut logits = Matrix::zeros(p, MD_CLASSES);
    let mut probs = Matrix::zeros(p, MD_CLASSES);
    let mut tags = Vec::with_capacity(p);
    for i in 0..p {
        affine(&params.w_md, &params.b_md, h.row(i), logits.row_mut(i));
        softmax(logits.row(i), probs.row_mut(i));
        tags.push(Tag::from_index(argmax_lowest(probs.row(i))).expect("three classes"));
    }
    Ok(MdOutput {
        logits,
        probs,
        tags,
    })
}

/// Projection of every piece row into the entity embedding space.
pub fn ed_forward(h: &ContextMatrix, params: &HeadParams) -> Result<Matrix> {
    params.check_input(h)?;
    let mut out = Matrix::zeros(h.p(), params.d());
    for i in 0..h.p() {
        let row = out.row_mut(i);
        affine(&params.w_ed, &params.b_ed, h.row(i), row);
        row.iter_mut().for_each(|v| *v = v.tanh());
    }
    Ok(out)
}

/// Cosine similarity with both norms floored at [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS))
}

/// A disambiguation target: the gold entity embedding for one piece row.
#[derive(Debug, Clone, PartialEq)]
pub struct EdTarget {
    pub piece: usize,
    pub embedding: Vec<f64>,
}

/// Per-position inverted-dropout scale factors for the two head inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub md: Matrix,
    pub ed: Matrix,
}

impl DropoutMask {
    /// Independent Bernoulli masks per head; kept entries scaled by `1/(1-rate)`.
    pub fn sample<R: Rng + ?Sized>(p: usize, m: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mut draw = || {
            let mut mask = Matrix::zeros(p, m);
            for v in mask.as_mut_slice() {
                *v = if rng.random::<f64>() < keep { scale } else { 0.0 };
            }
            mask
        };
        let md = draw();
        let ed = draw();
        DropoutMask { md, ed }
    }
}

/// One sequence's contribution to a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub h: &'a ContextMatrix,
    /// Gold tag on every non-pad head piece, `None` elsewhere.
    pub md_targets: &'a [Option<Tag>],
    pub ed_targets: &'a [EdTarget],
    pub dropout: Option<&'a DropoutMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_md: f64,
    pub l_ed: f64,
    pub j: f64,
    pub md_count: usize,
    pub ed_count: usize,
}

/// Combines the two task losses.
pub fn combine(lambda: f64, l_md: f64, l_ed: f64) -> f64 {
    lambda * l_md + (1.0 - lambda) * l_ed
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", lambda)))
    }
}

/// Running sums of per-position losses and unscaled gradients over a batch.
///
/// `W_md, b_md` only ever receive tagging gradients and `W_ed, b_ed` only
/// disambiguation gradients, so a single [`HeadParams`] holds both sums.
#[derive(Debug, Clone)]
pub struct BatchAccumulator {
    md_loss: f64,
    md_count: usize,
    ed_loss: f64,
    ed_count: usize,
    grads: Option<HeadParams>,
}

impl BatchAccumulator {
    pub fn new(m: usize, d: usize, with_grads: bool) -> Self {
        BatchAccumulator {
            md_loss: 0.0,
            md_count: 0,
            ed_loss: 0.0,
            ed_count: 0,
            grads: with_grads.then(|| HeadParams::zeros(m, d)),
        }
    }

    pub fn add(&mut self, ex: &Example<'_>, params: &HeadParams) -> Result<()> {
        params.check_input(ex.h)?;
        let p = ex.h.p();
        let m = params.m();
        let d = params.d();
        if ex.md_targets.len() != p {
            return Err(Error::Shape(format!(
                "{} tag targets for {} pieces",
                ex.md_targets.len(),
                p
            )));
        }
        if let Some(mask) = ex.dropout {
            // masks may stop after the last row that carries a target
            let needed = ex
                .md_targets
                .iter()
                .rposition(Option::is_some)
                .map_or(0, |i| i + 1)
                .max(ex.ed_targets.iter().map(|t| t.piece + 1).max().unwrap_or(0));
            for mat in [&mask.md, &mask.ed] {
                if mat.rows() < needed.min(p) || mat.rows() > p || mat.cols() != m {
                    return Err(Error::Shape("dropout mask does not match input".into()));
                }
            }
        }

        let mut x = vec![0.0; m];
        let input = |i: usize, head: fn(&DropoutMask) -> &Matrix, x: &mut [f64]| {
            let row = ex.h.row(i);
            match ex.dropout {
                Some(mask) => {
                    for ((dst, &v), &s) in x.iter_mut().zip(row).zip(head(mask).row(i)) {
                        *dst = v * s;
                    }
                }
                None => x.copy_from_slice(row),
            }
        };

        let mut logits = [0.0; MD_CLASSES];
        let mut probs = [0.0; MD_CLASSES];
        for (i, target) in ex.md_targets.iter().enumerate() {
            let Some(tag) = target else { continue };
            input(i, |mk| &mk.md, &mut x);
            affine(&params.w_md, &params.b_md, &x, &mut logits);
            let lse = softmax(&logits, &mut probs);
            let y = tag.index();
            self.md_loss += lse - logits[y];
            self.md_count += 1;
            if let Some(g) = self.grads.as_mut() {
                for c in 0..MD_CLASSES {
                    let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
                    g.b_md[c] += delta;
                    for (gw, &xv) in g.w_md.row_mut(c).iter_mut().zip(&x) {
                        *gw += delta * xv;
                    }
                }
            }
        }

        let mut u = vec![0.0; d];
        for t in ex.ed_targets {
            if t.piece >= p {
                return Err(Error::Shape(format!("target piece {} beyond {} pieces", t.piece, p)));
            }
            if t.embedding.len() != d {
                return Err(Error::Shape(format!(
                    "target embedding of width {}, expected {}",
                    t.embedding.len(),
                    d
                )));
            }
            let e_norm = norm(&t.embedding);
            if !(e_norm > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "zero-norm target embedding at piece {}",
                    t.piece
                )));
            }
            input(t.piece, |mk| &mk.ed, &mut x);
            affine(&params.w_ed, &params.b_ed, &x, &mut u);
            u.iter_mut().for_each(|v| *v = v.tanh());
            let u_norm = norm(&u);
            let ne = e_norm.max(COSINE_EPS);
            let nu = u_norm.max(COSINE_EPS);
            let cos = dot(&u, &t.embedding) / (nu * ne);
            self.ed_loss += 1.0 - cos;
            self.ed_count += 1;
            if let Some(g) = self.grads.as_mut() {
                for r in 0..d {
                    let dcos_du = if u_norm > COSINE_EPS {
                        t.embedding[r] / (nu * ne) - cos * u[r] / (nu * nu)
                    } else {
                        t.embedding[r] / (nu * ne)
                    };
                    // d(1 - cos)/da through tanh
                    let delta = -dcos_du * (1.0 - u[r] * u[r]);
                    g.b_ed[r] += delta;
                    for (gw, &xv) in g.w_ed.row_mut(r).iter_mut().zip(&x) {
                        *gw += delta * xv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds another accumulator's sums; callers merge in a fixed order.
    pub fn merge(&mut self, other: &BatchAccumulator) {
        self.md_loss += other.md_loss;
        self.md_count += other.md_count;
        self.ed_loss += other.ed_loss;
        self.ed_count += other.ed_count;
        if let (Some(a), Some(b)) = (self.grads.as_mut(), other.grads.as_ref()) {
            for (da, db) in a.parts_mut().into_iter().zip(b.parts()) {
                for (x, y) in da.iter_mut().zip(db) {
                    *x += y;
                }
            }
        }
    }

    /// Per-loss means and, if tracked, gradients of `J`.
    pub fn finish(self, lambda: f64) -> Result<(LossBreakdown, Option<Gradients>)> {
        check_lambda(lambda)?;
        let l_md = if self.md_count > 0 {
            self.md_loss / self.md_count as f64
        } else {
            0.0
        };
        let l_ed = if self.ed_count > 0 {
            self.ed_loss / self.ed_count as f64
        } else {
            0.0
        };
        let loss = LossBreakdown {
            l_md,
            l_ed,
            j: combine(lambda, l_md, l_ed),
            md_count: self.md_count,
            ed_count: self.ed_count,
        };
        let grads = self.grads.map(|mut g| {
            let md_scale = if self.md_count > 0 {
                lambda / self.md_count as f64
            } else {
                0.0
            };
            let ed_scale = if self.ed_count > 0 {
                (1.0 - lambda) / self.ed_count as f64
            } else {
                0.0
            };
            let [w_md, b_md, w_ed, b_ed] = g.parts_mut();
            for v in w_md.iter_mut().chain(b_md.iter_mut()) {
                *v *= md_scale;
            }
            for v in w_ed.iter_mut().chain(b_ed.iter_mut()) {
                *v *= ed_scale;
            }
            g
        });
        Ok((loss, grads))
    }
}

pub fn compute_loss(examples: &[Example<'_>], params: &HeadParams, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let mut acc = BatchAccumulator::new(params.m(), params.d(), false);
    for ex in examples {
        acc.add(ex, params)?;
    }
    Ok(acc.finish(lambda)?.0)
}

pub fn compute_gradients(
    examples: &[Example<'_>],
    params: &HeadParams,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    check_lambda(lambda)?;
    let mut acc = BatchAccumulator::new(params.m(), params.d(), true);
    for ex in examples {
        acc.add(ex, params)?;
    }
    let (loss, grads) = acc.finish(lambda)?;
    Ok((loss, grads.expect("gradients were tracked")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: HeadParams,
    pub second: HeadParams,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(m: usize, d: usize, cfg: AdamConfig) -> Self {
        AdamState {
            first: HeadParams::zeros(m, d),
            second: HeadParams::zeros(m, d),
            t: 0,
            cfg,
        }
    }
}

/// One bias-corrected Adam update on flat buffers at step `t` (1-based).
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - cfg.beta1.powi(exp);
    let bc2 = 1.0 - cfg.beta2.powi(exp);
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / bc1;
        let v_hat = second[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step. Non-finite gradients reject the step and leave both
/// parameters and state untouched.
pub fn adam_step(params: &mut HeadParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.num_params() != params.num_params() || state.first.num_params() != params.num_params() {
        return Err(Error::Shape("gradient/state shapes differ from parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let t = state.t;
    let cfg = state.cfg;
    let targets = params.parts_mut();
    let firsts = state.first.parts_mut();
    let seconds = state.second.parts_mut();
    for (((p, g), m), v) in targets.into_iter().zip(grads.parts()).zip(firsts).zip(seconds) {
        adam_update(p, g, m, v, t, &cfg);
    }
    Ok(())
}
