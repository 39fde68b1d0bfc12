//! Confusion counts and metrics against an independent per-voxel enumeration.

mod support;

#[test]
fn thousand_random_pairs_match_exactly() {
    assert!(support::check_metric_oracle(1000, 4) > 500);
}

#[test]
fn different_seed_also_matches() {
    support::check_metric_oracle(200, 99);
}
