mod common;

use common::{encoder_case, op_generators, run_op, FD_TOL};

const CASES: usize = 100;

#[test]
fn every_op_matches_central_differences() {
    let mut failed = Vec::new();
    for (name, gen) in op_generators() {
        let r = run_op(name, gen, CASES, 7);
        println!("{:<26} cases {:>4} entries {:>6} max rel err {:.2e}", r.op, r.cases, r.entries, r.max_rel_err);
        if r.max_rel_err >= FD_TOL {
            failed.push(r);
        }
    }
    assert!(failed.is_empty(), "gradient mismatch: {failed:?}");
}

#[test]
fn gated_mlm_loss_matches_central_differences() {
    for seed in 0..3 {
        let (err, n) = encoder_case(seed);
        assert!(n > 0);
        assert!(err < FD_TOL, "seed {seed}: max rel err {err:e}");
    }
}
