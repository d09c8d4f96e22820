use std::sync::Arc;

use proptest::prelude::*;

use dfm_core::data::{builtin_task, parse_corpus, Tokenizer, TASK_NAMES};
use dfm_core::denoiser::{
    ce_loss, Denoiser, FactorizedModel, Hyperparameters, ModelShape, TrainBatch,
};
use dfm_core::paths::{decode_index_into, encode_index, ConditionalPath, JointDistribution};
use dfm_core::rng::substream;
use dfm_core::sampler::{init_state, sample, SamplerConfig};
use dfm_core::schedule::{BetaSchedule, KappaSchedule};
use dfm_core::token_space::{SpecialTokens, TokenSpace};
use dfm_core::velocity::velocity_row;
use dfm_core::verify::{
    check_continuity_conditional, check_rate_condition, closed_vs_generic, random_velocity_rows,
    Derivative,
};

fn embeddings(max_k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_k, 2..=6usize)
        .prop_flat_map(|(k, e)| prop::collection::vec(prop::collection::vec(-1.0..1.0f64, e), k))
}

fn space_from(raw: &[Vec<f64>]) -> Option<TokenSpace<f64>> {
    TokenSpace::new(raw, SpecialTokens::default()).ok()
}

/// Upper 0.1% point of the chi-square distribution with `df` degrees of
/// freedom (Wilson-Hilferty).
fn chi2_crit(df: f64) -> f64 {
    let z = 3.090_232;
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

fn chi2(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distances_are_a_premetric(raw in embeddings(12)) {
        let Some(space) = space_from(&raw) else { return Ok(()) };
        for a in 0..space.k() {
            prop_assert_eq!(space.distance(a, a).unwrap(), 0.0);
            for b in 0..space.k() {
                let d = space.distance(a, b).unwrap();
                prop_assert!(d >= 0.0);
                prop_assert_eq!(d.to_bits(), space.distance(b, a).unwrap().to_bits());
                prop_assert_eq!(d.to_bits(), space.distance(a, b).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn beta_is_monotone_on_a_fine_grid(c in 0.1..10.0f64, a in 0.2..3.0f64) {
        let s = BetaSchedule::new(c, a, 1e6).unwrap();
        let mut prev = s.beta(0.0).unwrap();
        for i in 1..1000 {
            let b = s.beta(i as f64 / 1000.0).unwrap();
            prop_assert!(b >= prev, "beta fell at t = {}", i as f64 / 1000.0);
            prev = b;
        }
    }

    #[test]
    fn beta_dot_matches_central_differences(c in 0.5..5.0f64, a in 0.3..2.5f64, t in 0.05..0.9f64) {
        let s = BetaSchedule::new(c, a, 1e6).unwrap();
        let h = 1e-6;
        prop_assume!(!s.is_capped(t + h).unwrap());
        let fd = (s.beta(t + h).unwrap() - s.beta(t - h).unwrap()) / (2.0 * h);
        let an = s.beta_dot(t).unwrap();
        prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-12), "fd {} vs analytic {}", fd, an);
    }

    #[test]
    fn target_mass_grows_along_the_metric_path(raw in embeddings(10), x1_seed in any::<usize>()) {
        let Some(space) = space_from(&raw) else { return Ok(()) };
        let path = ConditionalPath::metric(&space, BetaSchedule::default());
        let x1 = x1_seed % space.k();
        let mut prev = 0.0;
        for i in 0..1000 {
            let p = path.path_prob(i as f64 / 1000.0, x1).unwrap()[x1];
            prop_assert!(p >= prev - 1e-15, "p(x1|x1) fell at step {}", i);
            prev = p;
        }
    }

    #[test]
    fn flow_moves_strictly_toward_the_target(raw in embeddings(10), t in 0.0..0.95f64, z in any::<usize>(), x1 in any::<usize>()) {
        let Some(space) = space_from(&raw) else { return Ok(()) };
        let k = space.k();
        let (z, x1) = (z % k, x1 % k);
        let path = ConditionalPath::metric(&space, BetaSchedule::default());
        let t = t.max(1e-3);
        let row = velocity_row(&path, t, z, x1).unwrap();
        for x in (0..k).filter(|&x| x != z) {
            if row.rates[x] > 0.0 {
                prop_assert!(space.distance(x, x1).unwrap() < space.distance(z, x1).unwrap());
            }
        }
        prop_assert!(row.row_sum().abs() <= 1e-12 * (1.0 + row.exit_rate()));
    }

    #[test]
    fn sequence_index_is_a_bijection(k in 2..7usize, d in 1..5usize, idx in any::<u64>()) {
        let n = k.pow(d as u32);
        let idx = (idx % n as u64) as usize;
        let mut seq = vec![0; d];
        decode_index_into(k, idx, &mut seq);
        prop_assert!(seq.iter().all(|&s| s < k));
        prop_assert_eq!(encode_index(k, &seq).unwrap(), idx);
    }

    #[test]
    fn text_round_trips(s in "[abcdef]{0,5}") {
        let task = builtin_task("char_text").unwrap();
        let tok = task.tokenizer.as_ref().unwrap();
        let ids = tok.encode(&s, task.d).unwrap();
        prop_assert_eq!(ids.len(), task.d);
        let back = tok.decode(&ids);
        prop_assert!(back.eos_found);
        prop_assert_eq!(back.text, s.clone());
        let corpus = parse_corpus(&format!("{s}\n"), tok, task.d).unwrap();
        prop_assert_eq!(&corpus[0].target, &ids);
    }

    #[test]
    fn tokenizer_maps_round_trip(alphabet in prop::collection::btree_set(prop::char::range('!', '~'), 1..20)) {
        let chars: String = alphabet.into_iter().collect();
        let tok = Tokenizer::from_alphabet(&chars).unwrap();
        let again = Tokenizer::parse(&tok.to_map_text()).unwrap();
        prop_assert_eq!(again, tok);
    }

    #[test]
    fn sampler_is_deterministic_and_keeps_the_condition(seed in any::<u64>(), steps in 1..12usize, c0 in 0..4usize, c1 in 0..4usize, c2 in 0..4usize) {
        let task = builtin_task("copy_condition").unwrap();
        let path = task.path(dfm_core::paths::PathKind::Metric, BetaSchedule::default(), KappaSchedule::Linear).unwrap();
        let oracle = task.oracle(&path).unwrap();
        let cfg = SamplerConfig { steps, record_trace: true, eos: None };
        let cond = [c0, c1, c2];
        let run = || sample(&oracle, &path, &cfg, task.d, &cond, &mut substream(seed, "chain.0")).unwrap();
        let (a, b) = (run(), run());
        let (ta, tb) = (a.trace.unwrap(), b.trace.unwrap());
        prop_assert_eq!(ta.to_csv(), tb.to_csv());
        prop_assert_eq!(&ta.condition, &cond.to_vec());
        prop_assert_eq!(ta.steps.len(), steps + 1);
        prop_assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn residual_checks_are_reproducible(seed in any::<u64>()) {
        let a = closed_vs_generic(20, 16, seed, false).unwrap();
        let b = closed_vs_generic(20, 16, seed, false).unwrap();
        prop_assert_eq!(a.max_residual.to_bits(), b.max_residual.to_bits());
        prop_assert_eq!(a.location, b.location);
        prop_assert!(a.pass);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_rows_satisfy_the_rate_condition(seed in any::<u64>()) {
        let rows = random_velocity_rows(200, 32, seed).unwrap();
        let report = check_rate_condition(&rows);
        prop_assert!(report.pass, "{}", report);
    }

    #[test]
    fn conditional_continuity_holds_on_random_configs(seed in any::<u64>()) {
        let an = check_continuity_conditional(10, 16, seed, Derivative::Analytic, 1.0).unwrap();
        prop_assert!(an.pass, "{}", an);
        let fd = check_continuity_conditional(10, 16, seed, Derivative::FiniteDifference(1e-5), 1.0).unwrap();
        prop_assert!(fd.pass, "{}", fd);
    }

    #[test]
    fn oracle_posterior_rows_are_distributions(seed in any::<u64>(), t in 0.0..0.99f64) {
        let task = builtin_task("two_mode").unwrap();
        for kind in [dfm_core::paths::PathKind::Metric, dfm_core::paths::PathKind::Mixture] {
            let path = task.path(kind, BetaSchedule::default(), KappaSchedule::Linear).unwrap();
            let oracle = task.oracle(&path).unwrap();
            let mut rng = substream(seed, "state");
            let tokens = path.sample_corrupted(t, &[0, 0, 0], &mut rng).unwrap();
            let post = oracle.posterior(t, &[], &tokens).unwrap();
            let mass: f64 = post.rows().flat_map(|r| r.iter()).sum();
            prop_assert!((mass - task.d as f64).abs() < 1e-12);
            prop_assert!(post.rows().all(|r| r.iter().all(|&p| p >= 0.0)));
        }
    }

    #[test]
    fn model_posteriors_are_distributions_and_loss_is_nonnegative(seed in any::<u64>(), time_embedding in any::<bool>()) {
        let shape = ModelShape { k: 5, cond_len: 2, target_len: 3 };
        let hyper = Hyperparameters { embed_dim: 4, hidden: 8, time_embedding, ..Hyperparameters::default() };
        let model = FactorizedModel::new(shape, hyper, seed).unwrap();
        let mut rng = substream(seed, "batch");
        use rand::Rng as _;
        let mut batch = TrainBatch { conditions: vec![], targets: vec![], times: vec![], corrupted: vec![] };
        for _ in 0..8 {
            batch.conditions.push((0..2).map(|_| rng.gen_range(0..5)).collect());
            batch.targets.push((0..3).map(|_| rng.gen_range(0..5)).collect());
            batch.corrupted.push((0..3).map(|_| rng.gen_range(0..5)).collect());
            batch.times.push(rng.gen());
        }
        prop_assert!(ce_loss(&model, &batch).unwrap() >= 0.0);
        for i in 0..batch.len() {
            let post = model.posterior(batch.times[i], &batch.conditions[i], &batch.corrupted[i]).unwrap();
            for row in post.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        let zero = FactorizedModel::from_params(shape, hyper, vec![0.0; model.num_params()]).unwrap();
        let expected = 3.0 * 5f64.ln();
        prop_assert!((ce_loss(&zero, &batch).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn initial_states_are_uniform() {
    let space = TokenSpace::<f64>::circle(6, SpecialTokens::default()).unwrap();
    let path = ConditionalPath::metric(&space, BetaSchedule::default());
    let mut rng = substream(41, "init");
    let mut counts = vec![0usize; 6];
    for _ in 0..20_000 {
        for tok in init_state(&path, 3, &[], &mut rng).tokens {
            counts[tok] += 1;
        }
    }
    let stat = chi2(&counts, &[1.0 / 6.0; 6]);
    assert!(stat < chi2_crit(5.0), "chi2 {stat}");

    let mask = ConditionalPath::<f64>::mixture_masked(7, 6, KappaSchedule::Linear).unwrap();
    assert!(init_state(&mask, 4, &[1], &mut rng)
        .tokens
        .iter()
        .all(|&t| t == 6));
}

#[test]
fn corrupting_positions_jointly_matches_independent_draws() {
    let space = TokenSpace::<f64>::circle(4, SpecialTokens::default()).unwrap();
    let path = ConditionalPath::metric_from_table(
        Arc::new(space.distances().clone()),
        BetaSchedule::default(),
    );
    let (t, x1) = (0.4, [1usize, 3]);
    let p0 = path.path_prob(t, x1[0]).unwrap();
    let p1 = path.path_prob(t, x1[1]).unwrap();
    let product = JointDistribution::product(&[p0, p1]).unwrap();
    let mut rng = substream(8, "corrupt");
    let mut counts = vec![0usize; 16];
    for _ in 0..40_000 {
        let s = path.sample_corrupted(t, &x1, &mut rng).unwrap();
        counts[encode_index(4, &s).unwrap()] += 1;
    }
    let stat = chi2(&counts, product.probs());
    assert!(stat < chi2_crit(15.0), "chi2 {stat}");
}

#[test]
fn builtin_targets_validate() {
    for name in TASK_NAMES {
        let task = builtin_task(name).unwrap();
        task.validate().unwrap();
        if task.is_enumerable() {
            for c in task.conditions() {
                let q = task.joint(c).unwrap();
                assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9, "{name}");
            }
        }
    }
}

#[test]
fn a_wrong_sign_fails_the_rate_condition() {
    let mut rows = random_velocity_rows(50, 8, 3).unwrap();
    let row = rows
        .iter_mut()
        .find(|r| {
            r.rates
                .iter()
                .enumerate()
                .any(|(x, &v)| x != r.z && v > 0.0)
        })
        .unwrap();
    let x = (0..row.rates.len())
        .find(|&x| x != row.z && row.rates[x] > 0.0)
        .unwrap();
    row.rates[x] = -row.rates[x];
    assert!(!check_rate_condition(&rows).pass);
}
