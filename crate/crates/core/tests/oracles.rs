//! Library metrics and losses against brute-force double-loop versions.

#[path = "support/oracles.rs"]
mod oracles;

use oracles::run_oracles;

#[test]
fn fifty_random_instances_each() {
    for o in run_oracles(50, 0x0dd) {
        println!("{}: {} instances, max diff {:.3e}", o.name, o.instances, o.max_diff);
        let tol = if o.name == "recall_at_k" { 0.0 } else { 1e-10 };
        assert!(o.max_diff <= tol, "{} differs from its oracle by {:.3e}", o.name, o.max_diff);
    }
}

#[test]
fn other_seeds_agree_too() {
    for seed in 1..4 {
        for o in run_oracles(50, seed) {
            let tol = if o.name == "recall_at_k" { 0.0 } else { 1e-10 };
            assert!(o.max_diff <= tol, "{} (seed {seed}) differs by {:.3e}", o.name, o.max_diff);
        }
    }
}
