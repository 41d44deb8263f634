mod common;

use atm_core::atm::retrieve_on_tape;
use atm_core::conditioning::{FrozenEncoder, SemanticQueryBank};
use atm_core::numerics::Tape;
use common::{gradcheck, gradcheck_sampled, random, rng, stage_cases};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_training_graph_matches_finite_differences() {
    let mut checked = 0;
    for seed in 0..24 {
        for case in stage_cases(seed) {
            let r = case.check();
            assert!(
                r.max_rel_error < TOLERANCE,
                "{} (seed {seed}): rel error {:.3e}, worst {:?}",
                case.name,
                r.max_rel_error,
                r.worst
            );
            checked += r.entries;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn linear_mse_is_tight() {
    for seed in 0..20 {
        let case = stage_cases(seed).into_iter().find(|c| c.name == "linear_mse").unwrap();
        let r = case.check();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {:?}", r);
    }
}

#[test]
fn retrieval_at_width_64() {
    let mut g = rng("gradcheck.wide", 0);
    let q = random(16, 64, 1.0, &mut g);
    let m = random(64, 64, 0.5, &mut g);
    let y = random(16, 64, 1.0, &mut g);
    let r = gradcheck_sampled(
        &[q, m],
        |t, p| {
            let mt = t.transpose(p[1]);
            let (r, _) = retrieve_on_tape(t, p[0], p[1], mt)?;
            let y = t.constant(y.clone());
            t.mse(r, y)
        },
        200,
        &mut g,
    );
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
}

#[test]
fn query_gradient_flows_through_the_frozen_encoder() {
    for seed in 0..5 {
        let mut g = rng("gradcheck.encoder", seed);
        let encoder = FrozenEncoder::random(6, 5, &mut g);
        let q0 = SemanticQueryBank::random(4, 5, &mut g).q0;
        let x = random(1, 6, 1.0, &mut g);
        let build = |t: &mut Tape, p: &[atm_core::numerics::NodeId]| {
            let qt = encoder.query_term_on_tape(t, p[0])?;
            let q = encoder.encode_on_tape(t, qt, &x)?;
            let pooled = t.mean_pool_rows(q)?;
            Ok(t.sum(pooled))
        };
        let r = gradcheck(std::slice::from_ref(&q0), build);
        assert!(r.max_rel_error < TOLERANCE, "{r:?}");

        let mut tape = Tape::new();
        let q0_id = tape.leaf(q0);
        let loss = build(&mut tape, &[q0_id]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(q0_id).is_some());
    }
}
