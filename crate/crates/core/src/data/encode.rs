use super::vocab::{Vocabulary, EOS, UNK};
use super::{DataError, QAExample, RawExample};

/// Counters collected while encoding raw records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Attribute keys or values that had more than one token and were cut
    /// down to their first token.
    pub multiword_attributes: usize,
    pub empty_reviews_dropped: usize,
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn single_token<'a>(s: &'a str, stats: &mut EncodeStats) -> Option<&'a str> {
    let mut it = s.split_whitespace();
    let first = it.next()?;
    if it.next().is_some() {
        stats.multiword_attributes += 1;
        log::warn!("multi-word attribute {s:?} reduced to {first:?}");
    }
    Some(first)
}

/// Whitespace-tokenizes and maps a raw record to ids. Question words missing
/// from `vocab` receive extended ids `|V|, |V|+1, ...` in order of first
/// appearance; answer words reuse those ids, any other unknown word is UNK.
pub fn encode_example(
    raw: &RawExample,
    vocab: &Vocabulary,
    record: usize,
    stats: &mut EncodeStats,
) -> Result<QAExample, DataError> {
    let q = tokens(&raw.question);
    if q.is_empty() {
        return Err(DataError::EmptyField { record, field: "question" });
    }
    let a = tokens(&raw.answer);
    if a.is_empty() {
        return Err(DataError::EmptyField { record, field: "answer" });
    }
    let v = vocab.len();
    let mut oov: Vec<String> = Vec::new();
    let question = q
        .iter()
        .map(|w| {
            if vocab.contains(w) {
                vocab.lookup(w)
            } else if let Some(k) = oov.iter().position(|o| o == w) {
                v + k
            } else {
                oov.push(w.to_string());
                v + oov.len() - 1
            }
        })
        .collect();
    let mut answer: Vec<usize> = a
        .iter()
        .map(|w| {
            if vocab.contains(w) {
                vocab.lookup(w)
            } else {
                oov.iter().position(|o| o == w).map_or(UNK, |k| v + k)
            }
        })
        .collect();
    answer.push(EOS);

    let mut reviews = Vec::with_capacity(raw.reviews.len());
    for r in &raw.reviews {
        let ids: Vec<usize> = tokens(r).iter().map(|w| vocab.lookup(w)).collect();
        if ids.is_empty() {
            stats.empty_reviews_dropped += 1;
        } else {
            reviews.push(ids);
        }
    }
    if reviews.is_empty() {
        return Err(DataError::EmptyField { record, field: "reviews" });
    }

    let mut attributes = Vec::with_capacity(raw.attributes.len());
    for (k, val) in &raw.attributes {
        let (Some(k), Some(val)) = (single_token(k, stats), single_token(val, stats)) else {
            continue;
        };
        attributes.push((vocab.lookup(k), vocab.lookup(val)));
    }

    Ok(QAExample {
        question,
        reviews,
        attributes,
        answer,
        oov,
        vocab_size: v,
    })
}

/// Maps ids back to words, restoring question OOVs from the example.
pub fn decode(ids: &[usize], example: &QAExample, vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&id| {
            if id < vocab.len() {
                vocab.word(id).unwrap_or("<unk>").to_string()
            } else {
                example
                    .oov
                    .get(id - vocab.len())
                    .cloned()
                    .unwrap_or_else(|| "<unk>".to_string())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::PAD;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["is", "what", "color", "red", "the", "it"].map(String::from))
    }

    fn raw(q: &str, a: &str) -> RawExample {
        RawExample {
            question: q.into(),
            answer: a.into(),
            reviews: vec!["the color is red".into()],
            attributes: vec![("color".into(), "red".into())],
        }
    }

    #[test]
    fn question_oov_gets_first_extended_id() {
        let v = vocab();
        let mut st = EncodeStats::default();
        let ex = encode_example(&raw("is zirconia red", "zirconia is red"), &v, 0, &mut st).unwrap();
        assert_eq!(ex.oov, vec!["zirconia".to_string()]);
        assert_eq!(ex.question[1], v.len());
        assert_eq!(ex.answer, vec![v.len(), v.lookup("is"), v.lookup("red"), EOS]);
        assert_eq!(ex.attributes, vec![(v.lookup("color"), v.lookup("red"))]);
    }

    #[test]
    fn answer_only_oov_is_unk() {
        let v = vocab();
        let mut st = EncodeStats::default();
        let ex = encode_example(&raw("what color", "blue"), &v, 0, &mut st).unwrap();
        assert_eq!(ex.answer, vec![UNK, EOS]);
    }

    #[test]
    fn empty_fields_report_record_index() {
        let v = vocab();
        let mut st = EncodeStats::default();
        let err = encode_example(&raw("  ", "x"), &v, 7, &mut st).unwrap_err();
        assert!(matches!(err, DataError::EmptyField { record: 7, field: "question" }));
        let err = encode_example(&raw("what", ""), &v, 3, &mut st).unwrap_err();
        assert!(matches!(err, DataError::EmptyField { record: 3, field: "answer" }));
    }

    #[test]
    fn multiword_attribute_truncated_with_counter() {
        let v = vocab();
        let mut st = EncodeStats::default();
        let mut r = raw("what color", "red");
        r.attributes = vec![("color".into(), "red it".into())];
        let ex = encode_example(&r, &v, 0, &mut st).unwrap();
        assert_eq!(ex.attributes, vec![(v.lookup("color"), v.lookup("red"))]);
        assert_eq!(st.multiword_attributes, 1);
    }

    proptest! {
        #[test]
        fn question_roundtrip(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
            let v = vocab();
            let q = words.join(" ");
            let a: Vec<&str> = words.iter().map(String::as_str).filter(|w| v.contains(w) || true).collect();
            let mut st = EncodeStats::default();
            let ex = encode_example(&raw(&q, &a.join(" ")), &v, 0, &mut st).unwrap();
            prop_assert_eq!(decode(&ex.question, &ex, &v), words.clone());
            // every answer word is in-vocab or a question OOV, so it restores exactly
            let mut dec = decode(&ex.answer, &ex, &v);
            prop_assert_eq!(dec.pop(), Some("</s>".to_string()));
            prop_assert_eq!(dec, words);
            prop_assert!(ex.question.iter().all(|&id| id != PAD));
            prop_assert!(ex.question.iter().all(|&id| id < v.len() + ex.oov.len()));
        }
    }
}
