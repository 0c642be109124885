mod oracle;

use fedpa::evaluation::average_precision;
use oracle::*;
use proptest::prelude::*;

#[test]
fn tp_fp_tp_with_two_ground_truths() {
    let ap = average_precision(&[true, false, true], 2).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    assert!((brute_force_ap(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn oracle_sanity() {
    assert_eq!(brute_force_ap(&[true, true], 2), 1.0);
    assert_eq!(brute_force_ap(&[false, false], 1), 0.0);
    assert_eq!(brute_force_ap(&[false, true], 1), 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn map50_matches_brute_force_oracle(case in map_case()) {
        check_map_oracle(&case)?;
    }
}
