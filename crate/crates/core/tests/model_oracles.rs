//! Loss, gradient and optimizer checks against plain scalar re-implementations.

mod common;

use proptest::prelude::*;
use rand::Rng;

use linkforge::model::{
    adam_step, adam_update, combine, compute_gradients, compute_loss, md_forward, AdamConfig, AdamState,
    Example, HeadParams,
};

use common::*;

/// Cross-entropy of softmax(W x + b) at the gold index, written out longhand.
fn scalar_md_loss(inst: &Instance) -> (f64, usize) {
    let p = &inst.params;
    let mut total = 0.0;
    let mut count = 0;
    for (i, target) in inst.md_targets.iter().enumerate() {
        let Some(tag) = target else { continue };
        let x: Vec<f64> = match &inst.mask {
            Some(mask) => inst.h.row(i).iter().zip(mask.md.row(i)).map(|(a, b)| a * b).collect(),
            None => inst.h.row(i).to_vec(),
        };
        let mut logits = [0.0f64; 3];
        for (c, logit) in logits.iter_mut().enumerate() {
            let mut s = p.b_md[c];
            for j in 0..x.len() {
                s += p.w_md.get(c, j) * x[j];
            }
            *logit = s;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let prob = (logits[tag.index()] - max).exp() / z;
        total += -prob.ln();
        count += 1;
    }
    (if count > 0 { total / count as f64 } else { 0.0 }, count)
}

/// Mean of 1 - cos(tanh(W x + b), e) over disambiguation targets.
fn scalar_ed_loss(inst: &Instance) -> (f64, usize) {
    let p = &inst.params;
    let mut total = 0.0;
    for t in &inst.ed_targets {
        let x: Vec<f64> = match &inst.mask {
            Some(mask) => inst.h.row(t.piece).iter().zip(mask.ed.row(t.piece)).map(|(a, b)| a * b).collect(),
            None => inst.h.row(t.piece).to_vec(),
        };
        let mut u = vec![0.0; p.d()];
        for (r, ur) in u.iter_mut().enumerate() {
            let mut s = p.b_ed[r];
            for j in 0..x.len() {
                s += p.w_ed.get(r, j) * x[j];
            }
            *ur = s.tanh();
        }
        let dot: f64 = u.iter().zip(&t.embedding).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let ne = t.embedding.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        total += 1.0 - dot / (nu * ne);
    }
    let n = inst.ed_targets.len();
    (if n > 0 { total / n as f64 } else { 0.0 }, n)
}

fn example(inst: &Instance) -> Example<'_> {
    Example {
        h: &inst.h,
        md_targets: &inst.md_targets,
        ed_targets: &inst.ed_targets,
        dropout: inst.mask.as_ref(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_scalar_loops(seed in any::<u64>(), p in 1usize..12, m in 1usize..16, d in 1usize..8, masked in any::<bool>()) {
        let inst = random_instance(&mut rng(seed), p, m, d, masked);
        let loss = compute_loss(&[example(&inst)], &inst.params, 0.1).unwrap();
        let (md, md_n) = scalar_md_loss(&inst);
        let (ed, ed_n) = scalar_ed_loss(&inst);
        prop_assert_eq!(loss.md_count, md_n);
        prop_assert_eq!(loss.ed_count, ed_n);
        prop_assert!((loss.l_md - md).abs() < 1e-12, "L_md {} vs {}", loss.l_md, md);
        prop_assert!((loss.l_ed - ed).abs() < 1e-12, "L_ed {} vs {}", loss.l_ed, ed);
    }

    #[test]
    fn objective_is_affine_in_lambda(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let inst = random_instance(&mut rng(seed), 7, 5, 3, false);
        let at = |l: f64| compute_loss(&[example(&inst)], &inst.params, l).unwrap();
        let base = at(0.5);
        let loss = at(lambda);
        prop_assert_eq!(loss.l_md.to_bits(), base.l_md.to_bits());
        prop_assert_eq!(loss.l_ed.to_bits(), base.l_ed.to_bits());
        prop_assert_eq!(loss.j.to_bits(), combine(lambda, loss.l_md, loss.l_ed).to_bits());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), p in 1usize..10, m in 1usize..12) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, p, m, 2, false);
        let mut params = inst.params.clone();
        // stretch the weights so some rows are nearly one-hot
        for v in params.w_md.as_mut_slice() {
            *v *= r.random_range(1.0..40.0);
        }
        let out = md_forward(&inst.h, &params).unwrap();
        for row in out.probs.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
        }
    }

    #[test]
    fn small_adam_step_descends_convex_objective(seed in any::<u64>()) {
        // with lambda = 1 only the tagger counts, and cross-entropy of a linear
        // softmax is convex in its parameters
        let inst = random_instance(&mut rng(seed), 8, 6, 2, false);
        prop_assume!(inst.md_targets.iter().any(Option::is_some));
        let ex = [example(&inst)];
        let (before, grads) = compute_gradients(&ex, &inst.params, 1.0).unwrap();
        prop_assume!(grads.parts().iter().flat_map(|s| s.iter()).any(|g| g.abs() > 1e-6));
        let mut params = inst.params.clone();
        let mut state = AdamState::new(6, 2, AdamConfig { lr: 1e-5, ..AdamConfig::default() });
        adam_step(&mut params, &grads, &mut state).unwrap();
        let after = compute_loss(&ex, &params, 1.0).unwrap();
        prop_assert!(after.j < before.j, "J went from {} to {}", before.j, after.j);
    }
}

#[test]
fn three_adam_steps_match_scalar_recurrence() {
    let cfg = AdamConfig::default();
    let grads = [[0.3, -1.2, 0.0, 5e-9], [0.1, -1.0, 2.0, -5e-9], [-0.7, 0.4, 0.0, 1.0]];
    let mut params = [0.5, -0.25, 1.0, 0.0];
    let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
    let mut expect = params;
    let (mut em, mut ev) = ([0.0f64; 4], [0.0f64; 4]);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        adam_update(&mut params, g, &mut m, &mut v, t as u64, &cfg);
        for i in 0..4 {
            em[i] = 0.9 * em[i] + (1.0 - 0.9) * g[i];
            ev[i] = 0.999 * ev[i] + (1.0 - 0.999) * g[i] * g[i];
            let mh = em[i] / (1.0 - 0.9f64.powi(t));
            let vh = ev[i] / (1.0 - 0.999f64.powi(t));
            expect[i] -= 2e-5 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..4 {
            assert_eq!(params[i].to_bits(), expect[i].to_bits(), "step {} param {}", t, i);
        }
    }
}

#[test]
fn adam_step_drives_the_state() {
    let inst = random_instance(&mut rng(3), 5, 4, 3, false);
    let ex = [example(&inst)];
    let mut params = inst.params.clone();
    let mut state = AdamState::new(4, 3, AdamConfig::default());
    for step in 1..=3 {
        let (_, grads) = compute_gradients(&ex, &params, 0.1).unwrap();
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(state.t, step);
    }
    assert_ne!(params, inst.params);
    assert!(params.is_finite());
}

#[test]
fn empty_components_contribute_zero() {
    let mut inst = random_instance(&mut rng(4), 4, 3, 2, false);
    inst.md_targets.iter_mut().for_each(|t| *t = None);
    inst.ed_targets.clear();
    let loss = compute_loss(&[example(&inst)], &inst.params, 0.1).unwrap();
    assert_eq!((loss.l_md, loss.l_ed, loss.j), (0.0, 0.0, 0.0));
    let (_, grads) = compute_gradients(&[example(&inst)], &inst.params, 0.1).unwrap();
    assert_eq!(grads, HeadParams::zeros(3, 2));
}
