use autograd::{Array, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixture::{tiny_fixture, tiny_fixture_with, Fixture};
use super::sequence::dt_logits;
use super::*;
use crate::data::ViewPayload;
use crate::nn::Binding;

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array {
    Array::from_shape_simple_fn(vec![rows, cols], || rng.random_range(-1.0..1.0))
}

fn dot(a: &Array, i: usize, b: &Array, j: usize) -> f64 {
    (0..a.shape()[1]).map(|d| a[[i, d]] * b[[j, d]]).sum()
}

/// −log softmax of candidate 0, by direct enumeration.
fn enumerate_nce(pos: f64, others: &[f64]) -> f64 {
    let m = others.iter().copied().fold(pos, f64::max);
    let denom: f64 = (pos - m).exp() + others.iter().map(|s| (s - m).exp()).sum::<f64>();
    -((pos - m).exp() / denom).ln()
}

fn nce_oracle(y: &Array, q: &Array, hard: Option<&Array>) -> f64 {
    let b = y.shape()[0];
    let total: f64 = (0..b)
        .map(|i| {
            let mut others: Vec<f64> = (0..b).filter(|&j| j != i).map(|j| dot(y, i, q, j)).collect();
            if let Some(n) = hard {
                others.push(dot(y, i, n, i));
            }
            enumerate_nce(dot(y, i, q, i), &others)
        })
        .sum();
    total / b as f64
}

fn nce(y: &Array, q: &Array, hard: Option<&Array>) -> f64 {
    let tape = Tape::new();
    let h = hard.map(|h| tape.constant(h.clone()));
    info_nce(tape.constant(y.clone()), tape.constant(q.clone()), h, Reduction::Mean).unwrap().0.item()
}

#[test]
fn info_nce_single_anchor_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = rand_matrix(1, 5, &mut rng);
    assert!(nce(&y, &rand_matrix(1, 5, &mut rng), None).abs() < 1e-12);
}

#[test]
fn info_nce_uniform_similarities_give_ln2() {
    let z = Array::zeros(vec![2, 4]);
    assert!((nce(&z, &z, None) - 2f64.ln()).abs() < 1e-12);
    assert!((nce(&z, &z, None) - 0.6931).abs() < 1e-4);
}

#[test]
fn info_nce_rejects_empty_and_non_finite() {
    let tape = Tape::new();
    let e = tape.constant(Array::zeros(vec![0, 3]));
    assert!(info_nce(e, e, None, Reduction::Mean).is_err());
    let mut bad = Array::zeros(vec![2, 3]);
    bad[[0, 0]] = f64::NAN;
    let b = tape.constant(bad);
    assert!(matches!(info_nce(b, b, None, Reduction::Mean), Err(Error::NonFinite(_))));
}

#[test]
fn r3m_single_anchor_is_two_candidate_softmax() {
    let y = Array::from_shape_vec(vec![1, 2], vec![1.0, 0.5]).unwrap();
    let q = Array::from_shape_vec(vec![1, 2], vec![0.3, -0.2]).unwrap();
    let n = Array::from_shape_vec(vec![1, 2], vec![-1.0, 2.0]).unwrap();
    let (sp, sn) = (0.2f64, 0.0f64);
    let expected = -(sp.exp() / (sp.exp() + sn.exp())).ln();
    assert!((nce(&y, &q, Some(&n)) - expected).abs() < 1e-12);
}

#[test]
fn masked_hard_negative_reduces_to_atc() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (y, q) = (rand_matrix(4, 6, &mut rng), rand_matrix(4, 6, &mut rng));
    let tape = Tape::new();
    let base = tape.constant(y.clone()).matmul(tape.constant(q.clone()).transpose_last());
    let neg = tape.constant(Array::from_elem(vec![4, 1], crate::nn::MASKED));
    let (masked, _) = nce_from_logits(Var::concat(&[base, neg], 1), &[0, 1, 2, 3], Reduction::Mean);
    assert!((masked.item() - nce(&y, &q, None)).abs() < 1e-12);
}

#[test]
fn spr_counts_every_step_of_every_sample_as_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, k, d) = (2, 4, 5);
    let y = Array::from_shape_simple_fn(vec![b, k, d], || rng.random_range(-1.0..1.0));
    let q = Array::from_shape_simple_fn(vec![b, k, d], || rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let got = spr_info_nce(tape.constant(y.clone()), tape.constant(q.clone()), Reduction::Mean).unwrap().0.item();
    let sim = |b1: usize, k1: usize, b2: usize, k2: usize| (0..d).map(|i| y[[b1, k1, i]] * q[[b2, k2, i]]).sum::<f64>();
    let mut total = 0.0;
    for b1 in 0..b {
        for k1 in 0..k {
            let mut others = Vec::new();
            for b2 in 0..b {
                for k2 in 0..k {
                    if (b2, k2) != (b1, k1) {
                        others.push(sim(b1, k1, b2, k2));
                    }
                }
            }
            assert_eq!(others.len() + 1, 8);
            total += enumerate_nce(sim(b1, k1, b1, k1), &others);
        }
    }
    assert!((got - total / (b * k) as f64).abs() < 1e-9);

    let one = Array::from_shape_vec(vec![1, 1, 3], vec![0.4, -1.0, 2.0]).unwrap();
    let single = spr_info_nce(tape.constant(one.clone()), tape.constant(one), Reduction::Mean).unwrap().0.item();
    assert!(single.abs() < 1e-12);
}

#[test]
fn sum_reduction_scales_by_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (y, q) = (rand_matrix(5, 3, &mut rng), rand_matrix(5, 3, &mut rng));
    let tape = Tape::new();
    let s = info_nce(tape.constant(y.clone()), tape.constant(q.clone()), None, Reduction::Sum).unwrap().0.item();
    assert!((s - 5.0 * nce(&y, &q, None)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn info_nce_matches_enumeration(b in 1usize..=8, d in 1usize..6, seed in 0u64..1000, with_hard in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = rand_matrix(b, d, &mut rng).mapv(|v| v * 3.0);
        let q = rand_matrix(b, d, &mut rng);
        let n = rand_matrix(b, d, &mut rng);
        let hard = with_hard.then_some(&n);
        prop_assert!((nce(&y, &q, hard) - nce_oracle(&y, &q, hard)).abs() < 1e-6);
        // Extra denominator terms can only raise the loss.
        prop_assert!(nce(&y, &q, Some(&n)) >= nce(&y, &q, None) - 1e-12);
    }

    #[test]
    fn projection_conserves_mass_and_in_support_mean(
        probs in proptest::collection::vec(0.0f64..1.0, 11),
        reward in -1.0f64..1.0,
        discount in 0.0f64..0.9,
    ) {
        let total: f64 = probs.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = probs.iter().map(|v| v / total).collect();
        let z = support(-10.0, 10.0, 11);
        let m = categorical_projection(&p, reward, discount, &z);
        prop_assert!((m.iter().sum::<f64>() - p.iter().sum::<f64>()).abs() < 1e-6);
        prop_assert!(m.iter().all(|&v| v >= 0.0));
        // Mean is preserved only when no shifted atom is clipped.
        prop_assume!(z.iter().all(|v| (reward + discount * v).abs() <= 10.0));
        let shifted: f64 = p.iter().zip(&z).map(|(a, v)| a * (reward + discount * v)).sum();
        let mean: f64 = m.iter().zip(&z).map(|(a, v)| a * v).sum();
        prop_assert!((shifted - mean).abs() < 1e-6);
    }
}

#[test]
fn projection_point_masses() {
    let z = support(-10.0, 10.0, 51);
    assert!((z[1] - z[0] - 0.4).abs() < 1e-12);
    let mut p = vec![0.0; 51];
    p[25] = 1.0;
    // Lands exactly on atom 30 (value 2.0).
    let m = categorical_projection(&p, 2.0, 0.9, &z);
    assert!((m[30] - 1.0).abs() < 1e-12);
    assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // 2.1 sits a quarter of the way from atom 30 to 31.
    let m = categorical_projection(&p, 2.1, 0.9, &z);
    assert!((m[30] - 0.75).abs() < 1e-9 && (m[31] - 0.25).abs() < 1e-9);
    // Beyond the support, mass piles onto the edge atom.
    let m = categorical_projection(&p, 50.0, 0.0, &z);
    assert!((m[50] - 1.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_uniform_and_oracle() {
    let tape = Tape::new();
    let (loss, _) = cross_entropy(tape.constant(Array::zeros(vec![3, 18])), &[0, 5, 17], None).unwrap();
    assert!((loss.item() - 18f64.ln()).abs() < 1e-12);
    assert!((loss.item() - 2.8904).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = rand_matrix(4, 18, &mut rng).mapv(|v| v * 4.0);
    let targets = [3, 0, 17, 9];
    let oracle: f64 = (0..4)
        .map(|i| {
            let z: f64 = (0..18).map(|j| l[[i, j]].exp()).sum();
            -(l[[i, targets[i]]].exp() / z).ln()
        })
        .sum::<f64>()
        / 4.0;
    let (loss, _) = cross_entropy(tape.constant(l), &targets, None).unwrap();
    assert!((loss.item() - oracle).abs() < 1e-9);
    assert!(cross_entropy(tape.constant(Array::zeros(vec![1, 18])), &[18], None).is_err());

    let mut big = Array::zeros(vec![1, 18]);
    big[[0, 4]] = 60.0;
    assert!(cross_entropy(tape.constant(big), &[4], None).unwrap().0.item() < 1e-20);
}

#[test]
fn cql_penalty_of_equal_q_is_ln_actions() {
    let tape = Tape::new();
    let q = tape.constant(Array::from_elem(vec![2, 18], 0.7));
    assert!((cql_penalty(q, &[1, 9]).item() - 18f64.ln()).abs() < 1e-12);
}

#[test]
fn mask_counts_and_sampling_are_exact() {
    assert_eq!(mask_count(0.9, 36), 32);
    assert_eq!(mask_count(0.95, 36), 34);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        assert_eq!(sample_mask(36, 32, &mut rng).iter().filter(|&&m| m).count(), 32);
        assert_eq!(sample_mask(36, 34, &mut rng).iter().filter(|&&m| m).count(), 34);
    }
}

#[test]
fn patch_geometry_follows_token_grid() {
    assert_eq!(PATCH_DIM, 784);
    let mut obs = StackedObservation::constant(0.0);
    // Token (2, 3) owns rows 28..42, cols 42..56.
    obs.values_mut()[2 * 7056 + 30 * 84 + 44] = 255.0;
    let t = patch_targets(&obs, (6, 6)).unwrap();
    assert_eq!(t.shape(), &[36, 784]);
    let token = 2 * 6 + 3;
    let col = 2 * 196 + 2 * 14 + 2;
    assert_eq!(t[[token, col]], 1.0);
    assert_eq!(t.sum(), 1.0);
}

#[test]
fn masked_mse_ignores_visible_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = Array::from_shape_simple_fn(vec![2, 36, 8], || rng.random_range(0.0..1.0));
    let masks: Vec<Vec<bool>> = (0..2).map(|_| sample_mask(36, 32, &mut rng)).collect();
    let pred = Array::from_shape_simple_fn(vec![2, 36, 8], || rng.random_range(0.0..1.0));
    let mut perturbed = pred.clone();
    for n in 0..2 {
        for t in (0..36).filter(|&t| !masks[n][t]) {
            for p in 0..8 {
                perturbed[[n, t, p]] += 100.0;
            }
        }
    }
    let tape = Tape::new();
    let pv = tape.param(pred);
    let a = masked_mse(pv, &target, &masks).unwrap();
    let b = masked_mse(tape.constant(perturbed), &target, &masks).unwrap();
    assert_eq!(a.item(), b.item());
    let g = tape.backward(a);
    let g = g.get(pv).unwrap();
    for n in 0..2 {
        for t in (0..36).filter(|&t| !masks[n][t]) {
            assert!((0..8).all(|p| g[[n, t, p]] == 0.0));
        }
    }
    // A perfect predictor of the targets scores zero.
    assert_eq!(masked_mse(tape.constant(target.clone()), &target, &masks).unwrap().item(), 0.0);
}

fn run_loss(f: &Fixture, seed: u64) -> (LossOutput, std::collections::BTreeMap<String, Array>) {
    let tape = Tape::new();
    let online = Binding::new(&tape, &f.stack.params);
    let target = f.mirror.as_ref().map(|m| Binding::frozen(&tape, m));
    let ctx = LossContext { stack: &f.stack, online: &online, target: target.as_ref() };
    let terms = f.objective.loss(&ctx, &f.views, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let out = terms.output();
    let mut g = tape.backward(terms.loss);
    (out, online.gradients(&mut g))
}

#[test]
fn every_objective_runs_and_reaches_its_heads() {
    for kind in ObjectiveKind::ALL {
        let f = tiny_fixture(kind, 3, 11).unwrap();
        let (out, grads) = run_loss(&f, 1);
        assert!(out.loss.is_finite(), "{kind:?}");
        assert!(grads.keys().any(|k| k.starts_with("backbone.")), "{kind:?} backbone gets no gradient");
        assert!(grads.keys().any(|k| k.starts_with("head.")), "{kind:?} heads get no gradient");
        assert!(grads.values().all(|g| g.iter().all(|v| v.is_finite())), "{kind:?}");
    }
}

#[test]
fn contrastive_objectives_need_a_mirror() {
    let f = tiny_fixture(ObjectiveKind::Atc, 2, 1).unwrap();
    let tape = Tape::new();
    let online = Binding::new(&tape, &f.stack.params);
    let ctx = LossContext { stack: &f.stack, online: &online, target: None };
    let r = f.objective.loss(&ctx, &f.views, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::MissingMirror("atc"))));
}

#[test]
fn spr_idm_is_the_sum_of_its_parts() {
    let f = tiny_fixture(ObjectiveKind::SprIdm, 3, 12).unwrap();
    let (sum, grads) = run_loss(&f, 0);
    let d = &sum.diagnostics;
    assert!((sum.loss - d["spr_loss"] - d["idm_loss"]).abs() < 1e-7);
    assert!(grads.keys().any(|k| k.starts_with("head.spr.")) && grads.keys().any(|k| k.starts_with("head.idm.")));
    for (w_spr, w_idm, key) in [(0.0, 1.0, "idm_loss"), (1.0, 0.0, "spr_loss")] {
        let mut g = Fixture { objective: f.objective.clone(), stack: f.stack.clone(), mirror: f.mirror.clone(), views: f.views.clone() };
        g.objective.config.spr_weight = w_spr;
        g.objective.config.idm_weight = w_idm;
        let (out, _) = run_loss(&g, 0);
        assert!((out.loss - d[key]).abs() < 1e-12);
    }
}

#[test]
fn cql_with_zero_q_head_has_closed_form() {
    let mut f = tiny_fixture(ObjectiveKind::CqlM, 4, 13).unwrap();
    for store in std::iter::once(&mut f.stack.params).chain(f.mirror.as_mut()) {
        for (name, p) in store.iter_mut() {
            if name.starts_with("head.q.") {
                p.value.fill(0.0);
            }
        }
    }
    let (out, _) = run_loss(&f, 0);
    let r2: f64 = f
        .views
        .iter()
        .map(|v| match &v.payload {
            ViewPayload::Trajectory { rewards, .. } => crate::data::clip_reward(rewards[0] as f64).powi(2),
            _ => unreachable!(),
        })
        .sum::<f64>()
        / 4.0;
    assert!((out.diagnostics["cql"] - 18f64.ln()).abs() < 1e-12);
    assert!((out.diagnostics["td"] - r2).abs() < 1e-12);
    assert!((out.loss - r2 - 0.1 * 18f64.ln()).abs() < 1e-12);

    let mut no_cql = f;
    no_cql.objective.config.cql_alpha = 0.0;
    let (plain, _) = run_loss(&no_cql, 0);
    assert!((out.loss - plain.loss - 0.1 * out.diagnostics["cql"]).abs() < 1e-12);
}

#[test]
fn masked_objectives_report_exact_counts() {
    for (kind, count) in [(ObjectiveKind::Mae, 32.0), (ObjectiveKind::SiamMae, 34.0)] {
        let f = tiny_fixture(kind, 2, 14).unwrap();
        let (out, _) = run_loss(&f, 3);
        assert_eq!(out.diagnostics["masked_tokens"], count);
    }
}

#[test]
fn decision_transformer_is_causal() {
    let f = tiny_fixture(ObjectiveKind::Dt, 3, 15).unwrap();
    let logits = |views: &[SampleView]| {
        let tape = Tape::new();
        let online = Binding::frozen(&tape, &f.stack.params);
        let ctx = LossContext { stack: &f.stack, online: &online, target: None };
        dt_logits(&ctx, &f.objective.config, views).unwrap().value().as_ref().clone()
    };
    let base = logits(&f.views);
    assert_eq!(base.shape(), &[3, 8, 18]);
    assert_eq!(f.stack.params.value("aux.dt.pos").shape(), &[24, 16]);
    // Perturb the newest observation of the first full-length window.
    let (i, len) = f
        .views
        .iter()
        .enumerate()
        .find_map(|(i, v)| match &v.payload {
            ViewPayload::Trajectory { obs, .. } if obs.len() >= 3 => Some((i, obs.len())),
            _ => None,
        })
        .expect("window with history");
    let step = len - 1;
    let pad = 8 - len;
    let mut views = f.views.clone();
    if let ViewPayload::Trajectory { obs, .. } = &mut views[i].payload {
        obs[step].values_mut().iter_mut().for_each(|v| *v = 255.0 - *v);
    }
    let after = logits(&views);
    for s in 0..pad + step {
        for a in 0..18 {
            assert_eq!(base[[i, s, a]].to_bits(), after[[i, s, a]].to_bits(), "step {s}");
        }
    }
    assert!((0..18).any(|a| base[[i, pad + step, a]] != after[[i, pad + step, a]]));
}

#[test]
fn gradients_match_finite_differences_for_cheap_objectives() {
    for kind in [ObjectiveKind::Bc, ObjectiveKind::Spr] {
        let f = tiny_fixture(kind, 2, 16).unwrap();
        let cfg = GradCheckConfig { samples: 30, ..GradCheckConfig::default() };
        let r = gradient_check(&f.objective, &f.stack, f.mirror.as_ref(), &f.views, &cfg).unwrap();
        assert!(r.pass_rate() >= 0.95, "{kind:?}: {:?}", r.failures);
    }
}

#[test]
fn curl_pairs_two_views_of_one_frame() {
    let f = tiny_fixture_with(ObjectiveConfig::defaults(ObjectiveKind::Curl), 2, 17).unwrap();
    for v in &f.views {
        let ViewPayload::Video { anchor, future, k, .. } = &v.payload else { panic!("CURL views become pairs") };
        assert_eq!(*k, 0);
        assert_eq!(anchor, future);
    }
}

#[test]
fn objective_names_round_trip() {
    for kind in ObjectiveKind::ALL {
        assert_eq!(kind.name().parse::<ObjectiveKind>().unwrap(), kind);
    }
    assert_eq!("SPR+IDM".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::SprIdm);
    assert_eq!("CQL-D".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::CqlD);
    assert!("vae".parse::<ObjectiveKind>().is_err());
}
