mod common;

use proptest::prelude::*;
use trialcensus_core::analytics::{build_citing_sample, registry_audit, CitingSampleSpec};
use trialcensus_core::corpus::YearWindow;

use common::{naive_audit, naive_citing, random_graph, random_registry, rng};

const WINDOW: YearWindow = YearWindow { lo: 2010, hi: 2022 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn citing_samples_match_double_loop_and_nest(seed in 0u64..1_000_000) {
        let (corpus, trials) = random_graph(&mut rng(seed), 1000, WINDOW, 0.2);
        let mut previous = None;
        for t in 2..=6u32 {
            let got = build_citing_sample(&trials, &corpus, CitingSampleSpec::new(t).unwrap(), WINDOW);
            prop_assert_eq!(&got, &naive_citing(&trials, &corpus, t as i32, WINDOW));
            for set in got.values() {
                prop_assert!(set.is_disjoint(&trials));
            }
            // A longer look-back only adds citing records.
            if let Some(prev) = &previous {
                for (y, set) in &got {
                    let shorter: &std::collections::BTreeMap<i32, std::collections::BTreeSet<String>> = prev;
                    prop_assert!(shorter[y].is_subset(set));
                }
            }
            previous = Some(got);
        }
    }

    #[test]
    fn registry_audit_matches_filters_applied_in_turn(seed in 0u64..1_000_000, n in 0usize..400) {
        let rows = random_registry(&mut rng(seed), n);
        let audit = registry_audit(&rows);
        prop_assert_eq!(&audit.by_completion_year, &naive_audit(&rows, false));
        prop_assert_eq!(&audit.by_posted_year, &naive_audit(&rows, true));
        prop_assert!(audit.is_monotone());
    }
}

#[test]
fn citing_window_bounds() {
    assert!(CitingSampleSpec::new(1).is_err());
    assert!(CitingSampleSpec::new(7).is_err());
    let (corpus, trials) = random_graph(&mut rng(5), 300, WINDOW, 0.3);
    let got = build_citing_sample(&trials, &corpus, CitingSampleSpec::new(4).unwrap(), WINDOW);
    // Only years whose whole look-back lies inside the window are reported.
    assert_eq!(
        got.keys().copied().collect::<Vec<_>>(),
        (2014..=2022).collect::<Vec<_>>()
    );
}
