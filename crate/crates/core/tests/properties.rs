use proptest::prelude::*;
use rand::Rng;
use tgdpo_lab::data::{generate, GeneratorConfig, PreferencePair, SyntheticTask, TokenId, TokenSeq, Vocab, TASK_NAMES};
use tgdpo_lab::losses::Method;
use tgdpo_lab::policy::{ContextOrder, TabularPolicy};
use tgdpo_lab::rewards::{dpo_token_rewards, Side, TokenWeightSpec};
use tgdpo_lab::rng::{substream, LabRng};

fn random_policy(
    rng: &mut LabRng,
    v: usize,
    order: ContextOrder,
    states: &[Vec<TokenId>],
    scale: f64,
) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(Vocab::digits(v).unwrap(), order);
    for s in states {
        p.set_logits(s, (0..v).map(|_| rng.random_range(-scale..=scale)).collect()).unwrap();
    }
    p
}

/// Every sequence of exactly `len` tokens over `v` symbols.
fn sequences(v: u32, len: usize) -> Vec<Vec<TokenId>> {
    (0..len).fold(vec![vec![]], |acc, _| {
        acc.into_iter().flat_map(|s| (0..v).map(move |a| [s.clone(), vec![TokenId(a)]].concat())).collect()
    })
}

fn seq(rng: &mut LabRng, v: u32, lo: usize, hi: usize) -> TokenSeq {
    let n = rng.random_range(lo..=hi);
    TokenSeq::new((0..n).map(|_| TokenId(rng.random_range(0..v))).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_pure_and_respects_predicates(
        seed in any::<u64>(), task in 0usize..3, n in 1usize..40, max_len in 2usize..7, v in 2usize..9,
    ) {
        let vocab = Vocab::digits(v).unwrap();
        let task = SyntheticTask::parse(TASK_NAMES[task], None, &vocab).unwrap();
        let cfg = GeneratorConfig { task: task.clone(), n_pairs: n, max_len, prompt_len: 1 };
        let a = generate(&cfg, &vocab, seed).unwrap();
        let b = generate(&cfg, &vocab, seed).unwrap();
        prop_assert_eq!(&a.pairs, &b.pairs);
        prop_assert_eq!(a.len(), n);
        for p in &a.pairs {
            prop_assert!(task.satisfies(&vocab, p.chosen.tokens()).unwrap());
            prop_assert!(!task.satisfies(&vocab, p.rejected.tokens()).unwrap());
            prop_assert!(p.chosen.len() <= max_len && p.rejected.len() <= max_len);
        }
    }

    #[test]
    fn rows_normalize_and_sequences_factorize(seed in any::<u64>(), v in 2usize..6, scale in 0.1f64..30.0) {
        let mut rng = substream(seed, "prop");
        let x = TokenSeq::from_ids(&[0]);
        let y = seq(&mut rng, v as u32, 1, 5);
        let states: Vec<Vec<TokenId>> = (0..y.len()).map(|t| x.concat(&y.tokens()[..t])).collect();
        let p = random_policy(&mut rng, v, ContextOrder::Full, &states, scale);
        for s in &states {
            let total: f64 = p.probs(s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let mut sum = 0.0;
        for (t, s) in states.iter().enumerate() {
            sum += p.token_log_prob(s, y.tokens()[t]).unwrap();
        }
        prop_assert_eq!(p.sequence_log_prob(&x, &y).unwrap(), sum);
    }

    #[test]
    fn full_context_distribution_sums_to_one(seed in any::<u64>(), v in 2u32..4, horizon in 1usize..5) {
        let mut rng = substream(seed, "prop");
        let x = TokenSeq::from_ids(&[1]);
        let states: Vec<Vec<TokenId>> =
            (0..horizon).flat_map(|t| sequences(v, t)).map(|s| x.concat(&s)).collect();
        let p = random_policy(&mut rng, v as usize, ContextOrder::Full, &states, 3.0);
        let total: f64 = sequences(v, horizon)
            .into_iter()
            .map(|y| p.sequence_log_prob(&x, &TokenSeq::new(y)).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn token_log_prob_gradient_matches_fd(seed in any::<u64>(), v in 2usize..6, k in 1usize..4) {
        let mut rng = substream(seed, "prop");
        let state: Vec<TokenId> = (0..k).map(|_| TokenId(rng.random_range(0..v as u32))).collect();
        let a = TokenId(rng.random_range(0..v as u32));
        let p = random_policy(&mut rng, v, ContextOrder::Last(2), std::slice::from_ref(&state), 2.0);
        let (key, g) = p.grad_token_log_prob(&state, a).unwrap();
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, gi) in g.iter().enumerate() {
            let mut plus = p.clone();
            plus.row_mut(&key).unwrap()[i] += h;
            let mut minus = p.clone();
            minus.row_mut(&key).unwrap()[i] -= h;
            let fd = (plus.token_log_prob(&state, a).unwrap() - minus.token_log_prob(&state, a).unwrap()) / (2.0 * h);
            num += (fd - gi).powi(2);
            den += gi * gi;
        }
        prop_assert!(num.sqrt() / den.sqrt() < 1e-6);
    }

    #[test]
    fn weights_are_positive(
        r_hat in -1e6f64..1e6, alpha in 0.0f64..10.0, floor in 1e-6f64..1.0, c in 1e-3f64..10.0,
        gamma in 0.01f64..=1.0, len in 1usize..40, t_frac in 0.0f64..1.0,
    ) {
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        for side in [Side::Win, Side::Lose] {
            let specs = [
                TokenWeightSpec::constant(c, side).unwrap(),
                TokenWeightSpec::tgdpo(alpha, floor, side).unwrap(),
                TokenWeightSpec::length_normalized(side),
                TokenWeightSpec::temporal_decay(gamma, side).unwrap(),
            ];
            for spec in specs {
                let w = spec.weight(r_hat, t, len);
                prop_assert!(w > 0.0 && w.is_finite());
                prop_assert!(w >= spec.floor(len));
            }
            prop_assert!(TokenWeightSpec::tgdpo(alpha, floor, side).unwrap().weight(r_hat, t, len) >= floor);
        }
    }

    #[test]
    fn token_rewards_are_causal_and_sum_to_the_sequence_ratio(seed in any::<u64>(), rb in 0.001f64..2.0) {
        let mut rng = substream(seed, "prop");
        let v = 3;
        let x = TokenSeq::from_ids(&[2]);
        let y = seq(&mut rng, v, 2, 5);
        let states: Vec<Vec<TokenId>> = (0..=y.len()).flat_map(|t| sequences(v, t)).map(|s| x.concat(&s)).collect();
        let theta = random_policy(&mut rng, v as usize, ContextOrder::Full, &states, 2.0).freeze();
        let reference = random_policy(&mut rng, v as usize, ContextOrder::Full, &states, 2.0).freeze();
        let tr = dpo_token_rewards(&theta, &reference, rb, &x, &y).unwrap();
        let mut sum = 0.0;
        for r in &tr.values {
            sum += r;
        }
        let lr = theta.sequence_log_prob(&x, &y).unwrap() - reference.sequence_log_prob(&x, &y).unwrap();
        prop_assert!((sum - rb * lr).abs() <= 1e-12 * (1.0 + (rb * lr).abs()));

        let t = rng.random_range(0..y.len() - 1);
        let mut edited = y.tokens().to_vec();
        for tok in edited.iter_mut().skip(t + 1) {
            *tok = TokenId((tok.0 + 1) % v);
        }
        let tr2 = dpo_token_rewards(&theta, &reference, rb, &x, &TokenSeq::new(edited)).unwrap();
        prop_assert_eq!(&tr.values[..=t], &tr2.values[..=t]);
    }

    #[test]
    fn losses_are_positive_and_finite(seed in any::<u64>(), beta in 0.01f64..3.0) {
        let mut rng = substream(seed, "prop");
        let v = 4;
        let x = TokenSeq::from_ids(&[0]);
        let (w, l) = (seq(&mut rng, v, 1, 4), seq(&mut rng, v, 1, 4));
        let states: Vec<Vec<TokenId>> = [&w, &l]
            .iter()
            .flat_map(|y| (0..y.len()).map(|t| x.concat(&y.tokens()[..t])).collect::<Vec<_>>())
            .collect();
        let policy = random_policy(&mut rng, v as usize, ContextOrder::Full, &states, 3.0);
        let reference = random_policy(&mut rng, v as usize, ContextOrder::Full, &states, 3.0);
        let pair = PreferencePair::new(x, w.clone(), l.clone()).unwrap();
        let traces = tgdpo_lab::rewards::PairTraces {
            chosen: tgdpo_lab::rewards::TokenRewardTrace { values: (0..w.len()).map(|_| rng.random_range(-2.0..2.0)).collect(), source_beta: 0.1 },
            rejected: tgdpo_lab::rewards::TokenRewardTrace { values: (0..l.len()).map(|_| rng.random_range(-2.0..2.0)).collect(), source_beta: 0.1 },
        };
        let methods = [
            Method::Dpo,
            Method::Tgdpo { alpha: 0.7, clamp_floor: 1e-3 },
            Method::Simpo { gamma_margin: 0.5 },
            Method::Rdpo { alpha_len: 0.1 },
            Method::D2po { gamma_decay: 0.9 },
            Method::Tdpo { kl_scale: 0.5 },
        ];
        for m in methods {
            let lv = m.loss(&policy, &reference, beta, &pair, m.needs_traces().then_some(&traces)).unwrap();
            prop_assert!(lv.loss > 0.0 && lv.loss.is_finite(), "{}: {}", m.name(), lv.loss);
        }
    }
}
