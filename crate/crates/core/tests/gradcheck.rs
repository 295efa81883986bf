mod common;

use common::{end_to_end_errors, layer_errors, next_clean_draw, FD_TOL};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_gradients_match_finite_differences(seed in any::<u64>()) {
        let Some(errs) = layer_errors(seed) else { return Ok(()) };
        for (layer, e) in errs {
            prop_assert!(e < FD_TOL, "{layer}: relative error {e:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pipeline_gradients_match_finite_differences(seed in any::<u64>()) {
        let (used, c, r) = next_clean_draw(seed >> 1);
        prop_assert!(c < FD_TOL, "seed {used} classification: relative error {c:e}");
        prop_assert!(r < FD_TOL, "seed {used} reconstruction: relative error {r:e}");
    }
}

#[test]
fn some_draws_clear_the_kink_margin() {
    let accepted = (0..40u64).filter_map(end_to_end_errors).count();
    assert!(accepted >= 2, "only {accepted} of 40 draws usable");
}

