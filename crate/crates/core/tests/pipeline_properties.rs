use std::path::Path;

use offclip_core::report::{
    aggregate_report_label, filter_report, select_sentence_index, Corpus, LexiconClassifier,
    Report, ReportLabel, Sentence, SentenceLabel,
};
use proptest::prelude::*;

const WORDS: &[&str] = &[
    "there", "is", "no", "mild", "effusion", "pneumothorax", "lungs", "are", "clear", "heart",
    "size", "normal", "without", "free", "of", "stable", "left", "right", "nodule", "unremarkable",
    "cardiomegaly", "negative", "for", "within", "limits", "possible",
];

fn sentence_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..8).prop_map(|w| w.join(" "))
}

fn label() -> impl Strategy<Value = SentenceLabel> {
    prop_oneof![
        Just(SentenceLabel::Normal),
        Just(SentenceLabel::Abnormal),
        Just(SentenceLabel::Uncertain)
    ]
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(prop::collection::vec((sentence_text(), label()), 1..6), 1..12).prop_map(
        |reports| {
            let reports = reports
                .into_iter()
                .enumerate()
                .map(|(i, sents)| {
                    let sentences = sents
                        .into_iter()
                        .map(|(t, l)| Sentence::labeled(t, l).unwrap())
                        .collect();
                    let mut r = Report::new(format!("r{i}"), sentences).unwrap();
                    r.assign_report_label().unwrap();
                    r
                })
                .collect();
            Corpus::new(reports).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn filtering_is_idempotent(c in corpus()) {
        let (once, _) = c.filter().unwrap();
        let (twice, stats) = once.filter().unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(stats.sentences_removed, 0);
    }

    #[test]
    fn filtered_reports_keep_labels_order_and_content(c in corpus()) {
        let (filtered, stats) = c.filter().unwrap();
        prop_assert_eq!(stats.sentences_in, stats.sentences_out + stats.sentences_removed);
        for (orig, f) in c.reports().iter().zip(filtered.reports()) {
            prop_assert_eq!(orig.id(), f.id());
            prop_assert_eq!(orig.report_label, f.report_label);
            prop_assert!(!f.sentences().is_empty());
            // order-preserving subsequence
            let mut it = orig.sentences().iter();
            for s in f.sentences() {
                prop_assert!(it.any(|o| o == s));
            }
            match f.report_label {
                Some(ReportLabel::PseudoAbnormal) => prop_assert!(f
                    .sentences()
                    .iter()
                    .all(|s| s.label == Some(SentenceLabel::Abnormal))),
                _ => prop_assert_eq!(orig, f),
            }
        }
    }

    #[test]
    fn aggregation_ignores_sentence_order(labels in prop::collection::vec(label(), 1..10), rot in 0usize..10) {
        let a: Vec<_> = labels.iter().copied().map(Some).collect();
        let mut b = a.clone();
        b.rotate_left(rot % a.len());
        b.reverse();
        prop_assert_eq!(aggregate_report_label(&a).unwrap(), aggregate_report_label(&b).unwrap());
    }

    #[test]
    fn classification_ignores_case(text in sentence_text()) {
        let clf = LexiconClassifier::default();
        prop_assert_eq!(clf.classify(&text).unwrap(), clf.classify(&text.to_uppercase()).unwrap());
    }

    #[test]
    fn corpus_survives_a_jsonl_round_trip(c in corpus()) {
        let text = c.to_jsonl_string();
        let back = Corpus::from_jsonl_str(&text, Path::new("mem.jsonl")).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn selection_is_in_range_and_repeatable(id in "[a-z0-9-]{1,12}", n in 1usize..20, epoch in any::<u64>(), seed in any::<u64>()) {
        let i = select_sentence_index(&id, n, epoch, seed).unwrap();
        prop_assert!(i < n);
        prop_assert_eq!(i, select_sentence_index(&id, n, epoch, seed).unwrap());
    }
}

#[test]
fn filtering_single_report_matches_corpus_filtering() {
    let r = {
        let mut r = Report::new(
            "x",
            vec![
                Sentence::labeled("lungs are clear", SentenceLabel::Normal).unwrap(),
                Sentence::labeled("mild effusion", SentenceLabel::Abnormal).unwrap(),
                Sentence::labeled("possible nodule", SentenceLabel::Uncertain).unwrap(),
            ],
        )
        .unwrap();
        r.assign_report_label().unwrap();
        r
    };
    let single = filter_report(&r).unwrap();
    let (c, _) = Corpus::new(vec![r]).unwrap().filter().unwrap();
    assert_eq!(c.reports()[0], single);
    assert_eq!(single.sentences().len(), 1);
}
