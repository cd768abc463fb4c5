mod common;

use std::collections::BTreeSet;
use std::sync::LazyLock;

use proptest::prelude::*;
use trialcensus_core::corpus::{window_view, YearWindow};
use trialcensus_core::synthetic::{generate, SyntheticSpec};
use trialcensus_core::universe::{
    build_universe, overlap_report, Family, RegistryMode, RuleMatcher, DEFAULT_KEYWORDS, DEFAULT_NLM_TAGS,
    DEFAULT_REGISTRY_PREFIXES,
};
use trialcensus_core::{PublicationRecord, RuleSet};

use common::{loose_registry_hit, naive_flags, strict_registry_hit};

fn check_against_naive(mode: RegistryMode) {
    let synth = generate(&SyntheticSpec::new(3000, 21));
    let window = YearWindow::new(2010, 2022).unwrap();
    let rules = RuleSet::default().with_mode(mode);
    let build = build_universe(&synth.corpus, &rules, window);
    let loose = mode == RegistryMode::PaperLoose;

    let view: Vec<&PublicationRecord> = window_view(&synth.corpus, window).records().collect();
    assert_eq!(build.flags.len(), view.len());
    let mut families: [BTreeSet<&str>; 3] = Default::default();
    for (flags, record) in build.flags.iter().zip(&view) {
        assert_eq!(flags.pmid, record.pmid);
        let naive = naive_flags(
            record,
            &DEFAULT_NLM_TAGS,
            &DEFAULT_REGISTRY_PREFIXES,
            &DEFAULT_KEYWORDS,
            loose,
        );
        assert_eq!(flags.matched_tags, naive.tags, "{}", record.pmid);
        assert_eq!(flags.matched_prefixes, naive.prefixes, "{}", record.pmid);
        assert_eq!(flags.matched_keywords, naive.keywords, "{}", record.pmid);
        assert_eq!(flags.in_universe, naive.any());
        for (set, hit) in families.iter_mut().zip([&naive.prefixes, &naive.tags, &naive.keywords]) {
            if !hit.is_empty() {
                set.insert(&record.pmid);
            }
        }
    }
    // Family order matches Family::ALL: registry, tag, keyword.
    let union: BTreeSet<&str> = families.iter().flatten().copied().collect();
    assert_eq!(build.summary.universe, union.len());
    for row in overlap_report(&build.flags) {
        let i = Family::ALL.iter().position(|f| *f == row.family).unwrap();
        let expected = match row.sub_family {
            None => families[i].len(),
            Some(o) => {
                let j = Family::ALL.iter().position(|f| *f == o).unwrap();
                families[i].intersection(&families[j]).count()
            }
        };
        assert_eq!(row.count, expected, "{:?}/{:?}", row.family, row.sub_family);
        if row.sub_family.is_none() {
            assert_eq!(build.summary.of(row.family), expected);
        }
    }
    assert!(build.summary.registry_id > 0 && build.summary.nlm_tag > 0 && build.summary.keyword > 0);
}

#[test]
fn strict_universe_matches_naive_matcher() {
    check_against_naive(RegistryMode::Strict);
}

#[test]
fn loose_universe_matches_naive_matcher() {
    check_against_naive(RegistryMode::PaperLoose);
}

fn abstract_with(text: &str) -> PublicationRecord {
    let mut r = PublicationRecord::new("1");
    r.year = Some(2015);
    r.abstract_text = Some(text.to_string());
    r
}

fn adversarial_text() -> impl Strategy<Value = String> {
    let pieces = prop::sample::select(vec![
        "NCT", "nct", "Nct", "ISRCTN", "actrn", "EudraCT", "distinct", "1", "12", "2019", "0000", ":", "#", "-", " ",
        "  ", "a", "é", "x9", ".", "(", ")", "\t", "NCT0",
    ]);
    prop::collection::vec(pieces, 0..12).prop_map(|v| v.concat())
}

static STRICT: LazyLock<RuleMatcher> = LazyLock::new(|| RuleSet::default().matcher());
static LOOSE: LazyLock<RuleMatcher> =
    LazyLock::new(|| RuleSet::default().with_mode(RegistryMode::PaperLoose).matcher());

proptest! {
    #[test]
    fn registry_scanner_agrees_with_char_scanner(text in adversarial_text()) {
        let record = abstract_with(&text);
        for (matcher, loose) in [(&*STRICT, false), (&*LOOSE, true)] {
            let got = matcher.scan_registry_ids(&record);
            let want: BTreeSet<String> = DEFAULT_REGISTRY_PREFIXES
                .iter()
                .filter(|p| if loose { loose_registry_hit(&text, p) } else { strict_registry_hit(&text, p) })
                .map(|p| p.to_string())
                .collect();
            prop_assert_eq!(got, want, "loose={} {:?}", loose, text);
        }
        // Every strict identifier is also a loose one.
        let strict = STRICT.scan_registry_ids(&record);
        let loose = LOOSE.scan_registry_ids(&record);
        prop_assert!(strict.is_subset(&loose));
    }
}

#[test]
fn loose_mode_over_counts_ordinary_words() {
    let r = abstract_with("The groups were distinctly different.");
    assert!(RuleSet::default().matcher().scan_registry_ids(&r).is_empty());
    let loose = RuleSet::default()
        .with_mode(RegistryMode::PaperLoose)
        .matcher()
        .scan_registry_ids(&r);
    assert_eq!(loose, BTreeSet::from(["NCT".to_string()]));
}
