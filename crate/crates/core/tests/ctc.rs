use ctcatt::ctc::{
    collapse, ctc_brute_force, ctc_loss, ctc_neg_log_likelihood, ctc_prefix_score, min_frames, Extension,
    PrefixState,
};
use ctcatt::nn::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log_probs(rng: &mut impl Rng, t: usize, k: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![t, k], data).unwrap()
}

/// Every label sequence over `v` symbols with length `<= max_len`.
fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..v {
                let mut e: Vec<usize> = s.clone();
                e.push(c);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn forward_recursion_matches_enumeration_on_small_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 1..=5 {
        for v in 1..=3 {
            let lp = random_log_probs(&mut rng, t, v + 1);
            for labels in all_sequences(v, 3) {
                let p = ctc_brute_force(&lp, &labels).unwrap();
                match ctc_neg_log_likelihood(&lp, &labels) {
                    Ok(loss) => assert!(((-loss).exp() - p).abs() < 1e-10, "t={t} {labels:?}"),
                    Err(_) => {
                        assert!(t < min_frames(&labels));
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn loss_gradient_on_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let err = grad_check(
        |tape, x| {
            let lp = tape.log_softmax(x);
            ctc_loss(tape, lp, &[0, 1])
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    // raw log-prob input, repeated label
    let lp = random_log_probs(&mut rng, 5, 3);
    let err = grad_check(|tape, x| ctc_loss(tape, x, &[1, 1]), &lp, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn tape_loss_matches_plain_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lp = random_log_probs(&mut rng, 6, 4);
    let mut tape = Tape::new();
    let v = tape.leaf(lp.clone(), true);
    let l = ctc_loss(&mut tape, v, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(l).item(), ctc_neg_log_likelihood(&lp, &[2, 0, 2]).unwrap());
}

#[test]
fn tiny_probabilities_do_not_underflow() {
    // every path has probability around 1e-250
    let lp = Tensor::<f64>::full(&[50, 3], -11.5);
    let loss = ctc_neg_log_likelihood(&lp, &[0, 1, 0]).unwrap();
    assert!(loss.is_finite());
    assert!(loss > 500.0);
}

#[test]
fn prefix_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 1..7 {
        let lp = random_log_probs(&mut rng, t, 4);
        let s0 = PrefixState::initial(&lp).unwrap();
        let mut total = ctc_prefix_score(&s0, &[], Extension::End, &lp).unwrap().0.exp();
        for c in 0..3 {
            total += ctc_prefix_score(&s0, &[], Extension::Label(c), &lp).unwrap().0.exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "t={t}: {total}");
    }
}

#[test]
fn prefix_score_equals_enumerated_extension_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, v) = (4, 2);
    let lp = random_log_probs(&mut rng, t, v + 1);
    let seqs = all_sequences(v, t);
    let mut state = PrefixState::initial(&lp).unwrap();
    let mut prefix = Vec::new();
    let mut last_score = 0.0;
    for c in [1, 0, 1] {
        let (score, next) = ctc_prefix_score(&state, &prefix, Extension::Label(c), &lp).unwrap();
        prefix.push(c);
        let mass: f64 = seqs
            .iter()
            .filter(|s| s.starts_with(&prefix))
            .map(|s| ctc_brute_force(&lp, s).unwrap())
            .sum();
        assert!((score.exp() - mass).abs() < 1e-12, "{prefix:?}");
        assert!(score <= last_score);
        last_score = score;
        let (complete, _) = ctc_prefix_score(&next, &prefix, Extension::End, &lp).unwrap();
        let loss = ctc_neg_log_likelihood(&lp, &prefix).unwrap();
        assert!((complete - -loss).abs() < 1e-9);
        state = next;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_scores_never_increase(seed in 0u64..10_000, t in 1usize..9, labels in proptest::collection::vec(0usize..3, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_log_probs(&mut rng, t, 4);
        let mut state = PrefixState::initial(&lp).unwrap();
        let mut prev = 0.0f64;
        for (i, &c) in labels.iter().enumerate() {
            let (score, next) = ctc_prefix_score(&state, &labels[..i], Extension::Label(c), &lp).unwrap();
            prop_assert!(score <= prev + 1e-12);
            prev = score;
            state = next;
        }
    }

    #[test]
    fn collapse_is_idempotent_on_label_sequences(path in proptest::collection::vec(0usize..4, 0..12)) {
        let once = collapse(&path, 3);
        prop_assert!(once.iter().all(|&c| c != 3));
        prop_assert!(min_frames(&once) <= path.len());
    }
}
