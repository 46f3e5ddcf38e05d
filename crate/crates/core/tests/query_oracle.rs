use tlqa_core::synth::oracle::cross_check;

#[test]
fn engine_matches_brute_force_oracle() {
    let r = cross_check(150, 15, 5, 99);
    assert_eq!(r.compared, 750);
    assert!(r.mismatches.is_empty(), "{} mismatches, first: {}", r.mismatches.len(), r.mismatches[0]);
}
