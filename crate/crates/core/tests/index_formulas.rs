//! Patch and token counts against brute-force enumeration.

mod common;

use proptest::prelude::*;

fn params() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..600, 1usize..60, 1usize..64).prop_flat_map(|(len, d, win)| {
        let g = len.div_ceil(d) + 1;
        (Just(len), Just(d), Just(win), 1..=g, 1..=g)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn counts_match_enumeration((len, d, win, p, h) in params()) {
        if let Err(e) = common::check_index_case(len, d, win, p, h) {
            prop_assert!(false, "{}", e);
        }
    }
}
