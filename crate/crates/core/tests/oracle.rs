//! The decision functions against the brute-force reference model.

use appspear_core::{risk_score, ContextValue, PolicyError, RiskPolicy};
use appspear_testkit::{random_context_model, random_contexts, random_model, random_request, rng, to_context_values};

#[test]
fn exhaustive_verdict_tables_match_relational_join() {
    let mut disagreements = 0;
    let mut checked = 0;
    for seed in 0..1000 {
        let mut r = rng(seed);
        let model = random_model(&mut r, 10);
        let state = model.to_state();
        let before = state.clone();
        for (entities, op) in model.all_requests() {
            let got = state.evaluate(&entities, &op).map_err(|_| ());
            if got != model.outcome(&entities, &op) {
                disagreements += 1;
            }
            checked += 1;
        }
        assert_eq!(state, before, "evaluation mutated the state");
    }
    assert_eq!(disagreements, 0);
    assert!(checked > 100_000);
}

#[test]
fn random_requests_match_relational_join() {
    let mut r = rng(7);
    for _ in 0..200 {
        let model = random_model(&mut r, 10);
        let state = model.to_state();
        for _ in 0..500 {
            let (entities, op) = random_request(&mut r, &model);
            assert_eq!(state.evaluate(&entities, &op).map_err(|_| ()), model.outcome(&entities, &op));
        }
    }
}

#[test]
fn context_decisions_match_weighted_sum_oracle() {
    let mut r = rng(11);
    for _ in 0..300 {
        let model = random_context_model(&mut r, 8);
        let state = model.to_state();
        let risk = state.risk().unwrap().clone();
        for _ in 0..200 {
            let (entities, op) = random_request(&mut r, &model);
            let ctx = random_contexts(&mut r);
            let values = to_context_values(&ctx, 1);
            let expected = model.decide(&entities, &op, &ctx);
            let (verdict, dependent) = match state.decide(&entities, &op, &values) {
                Ok((v, d)) => (Ok(v), d),
                Err(_) => (Err(()), false),
            };
            assert_eq!(verdict, expected, "{entities:?} {op:?} {ctx:?}");
            if verdict.is_ok() {
                assert_eq!(dependent, op.name == "read");
            }
            assert_eq!(
                state.evaluate_in_context(&entities, &op, &values, &risk).map_err(|_| ()),
                model.outcome_in_context(&entities, &op, &ctx)
            );
        }
    }
}

#[test]
fn risk_score_is_the_weighted_sum() {
    let mut r = rng(3);
    for _ in 0..2000 {
        let model = random_context_model(&mut r, 1);
        let risk = RiskPolicy::new(model.weights.clone(), model.threshold).unwrap();
        let ctx = random_contexts(&mut r);
        let got = risk_score(&to_context_values(&ctx, 0), &risk).unwrap();
        let want = model.score(&ctx).unwrap();
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn uncovered_context_variable_is_an_error() {
    let risk = RiskPolicy::new([("time".to_string(), 1.0)], 4.0).unwrap();
    let ctx = [ContextValue::new("altitude", 1.0, 0)];
    assert_eq!(risk_score(&ctx, &risk), Err(PolicyError::UnknownContextVariable("altitude".into())));
}
