mod common;

use proptest::prelude::*;
use rtasr::transcript::{parse, serialize};

fn ops(max: usize) -> impl Strategy<Value = Vec<(u8, u8)>> {
    prop::collection::vec((any::<u8>(), any::<u8>()), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn generated_transcripts_keep_invariants(ops in ops(48)) {
        let tokens = common::build(&ops);
        prop_assert_eq!(common::check_well_formed(&tokens), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn repair_of_arbitrary_tokens(ops in ops(32)) {
        prop_assert_eq!(common::check_repair(&common::raw(&ops)), Ok(()));
    }

    #[test]
    fn parse_never_panics_and_accepts_only_canonical_forms(s in "[a-c\\[\\]<>]{0,12}|(\\[(laugh|filler|cough)[\\]>]|<(filler|laugh)\\]|x){0,6}") {
        if let Ok(t) = parse(&s) {
            prop_assert_eq!(serialize(&t), s);
        }
    }
}
