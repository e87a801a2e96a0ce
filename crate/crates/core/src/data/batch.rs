use super::vocab::PAD;
use super::QAExample;

/// Examples padded to per-batch maximum lengths, with masks marking real
/// tokens. A padded review slot is entirely PAD and masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub question: Vec<Vec<usize>>,
    pub question_mask: Vec<Vec<bool>>,
    pub reviews: Vec<Vec<Vec<usize>>>,
    pub review_word_mask: Vec<Vec<Vec<bool>>>,
    pub review_mask: Vec<Vec<bool>>,
    pub attributes: Vec<Vec<(usize, usize)>>,
    pub attribute_mask: Vec<Vec<bool>>,
    pub answer: Vec<Vec<usize>>,
    pub answer_mask: Vec<Vec<bool>>,
    pub oov: Vec<Vec<String>>,
    pub vocab_size: usize,
}

/// Borrowed view of one padded row of a [`Batch`].
#[derive(Clone, Copy, Debug)]
pub struct ExampleView<'a> {
    pub question: &'a [usize],
    pub question_mask: &'a [bool],
    pub reviews: &'a [Vec<usize>],
    pub review_word_mask: &'a [Vec<bool>],
    pub review_mask: &'a [bool],
    pub attributes: &'a [(usize, usize)],
    pub attribute_mask: &'a [bool],
    pub answer: &'a [usize],
    pub answer_mask: &'a [bool],
    pub oov: &'a [String],
    pub vocab_size: usize,
}

impl ExampleView<'_> {
    pub fn extended_size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    pub fn question_len(&self) -> usize {
        self.question_mask.iter().filter(|m| **m).count()
    }

    pub fn answer_len(&self) -> usize {
        self.answer_mask.iter().filter(|m| **m).count()
    }
}

fn pad<T: Clone>(xs: &[T], len: usize, fill: T) -> (Vec<T>, Vec<bool>) {
    let mut out = xs.to_vec();
    out.resize(len, fill);
    let mask = (0..len).map(|i| i < xs.len()).collect();
    (out, mask)
}

impl Batch {
    pub fn from_examples(examples: &[QAExample]) -> Batch {
        let lq = examples.iter().map(|e| e.question.len()).max().unwrap_or(0);
        let la = examples.iter().map(|e| e.answer.len()).max().unwrap_or(0);
        let nr = examples.iter().map(|e| e.reviews.len()).max().unwrap_or(0);
        let lr = examples
            .iter()
            .flat_map(|e| e.reviews.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let na = examples.iter().map(|e| e.attributes.len()).max().unwrap_or(0);
        let mut b = Batch {
            question: vec![],
            question_mask: vec![],
            reviews: vec![],
            review_word_mask: vec![],
            review_mask: vec![],
            attributes: vec![],
            attribute_mask: vec![],
            answer: vec![],
            answer_mask: vec![],
            oov: vec![],
            vocab_size: examples.first().map_or(0, |e| e.vocab_size),
        };
        for e in examples {
            let (q, qm) = pad(&e.question, lq, PAD);
            b.question.push(q);
            b.question_mask.push(qm);
            let (a, am) = pad(&e.answer, la, PAD);
            b.answer.push(a);
            b.answer_mask.push(am);
            let (attrs, attr_mask) = pad(&e.attributes, na, (PAD, PAD));
            b.attributes.push(attrs);
            b.attribute_mask.push(attr_mask);
            let mut rows = Vec::with_capacity(nr);
            let mut masks = Vec::with_capacity(nr);
            for i in 0..nr {
                let (r, m) = pad(e.reviews.get(i).map_or(&[][..], Vec::as_slice), lr, PAD);
                rows.push(r);
                masks.push(m);
            }
            b.review_mask.push((0..nr).map(|i| i < e.reviews.len()).collect());
            b.reviews.push(rows);
            b.review_word_mask.push(masks);
            b.oov.push(e.oov.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.question.len()
    }

    pub fn is_empty(&self) -> bool {
        self.question.is_empty()
    }

    pub fn view(&self, i: usize) -> ExampleView<'_> {
        ExampleView {
            question: &self.question[i],
            question_mask: &self.question_mask[i],
            reviews: &self.reviews[i],
            review_word_mask: &self.review_word_mask[i],
            review_mask: &self.review_mask[i],
            attributes: &self.attributes[i],
            attribute_mask: &self.attribute_mask[i],
            answer: &self.answer[i],
            answer_mask: &self.answer_mask[i],
            oov: &self.oov[i],
            vocab_size: self.vocab_size,
        }
    }

    pub fn views(&self) -> impl Iterator<Item = ExampleView<'_>> {
        (0..self.len()).map(|i| self.view(i))
    }
}

/// Splits `examples` in order into padded batches of at most `batch_size`.
pub fn batch(examples: &[QAExample], batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    examples.chunks(batch_size).map(Batch::from_examples).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EOS;
    use proptest::prelude::*;

    fn ex(q: usize, a: usize, reviews: &[usize], attrs: usize) -> QAExample {
        QAExample {
            question: (0..q).map(|i| 4 + i).collect(),
            reviews: reviews.iter().map(|&l| vec![5; l]).collect(),
            attributes: vec![(6, 7); attrs],
            answer: (0..a - 1).map(|_| 8).chain([EOS]).collect(),
            oov: vec![],
            vocab_size: 20,
        }
    }

    #[test]
    fn pads_to_batch_max() {
        let b = batch(&[ex(3, 2, &[2], 1), ex(5, 4, &[1, 3], 0)], 2).remove(0);
        assert_eq!(b.question[0].len(), 5);
        assert_eq!(b.question_mask[0], vec![true, true, true, false, false]);
        assert_eq!(b.review_mask[0], vec![true, false]);
        assert!(b.reviews[0][1].iter().all(|&t| t == PAD));
        assert_eq!(b.review_word_mask[1][0], vec![true, false, false]);
        assert_eq!(b.attribute_mask[1], vec![false]);
        assert_eq!(b.answer_mask[0], vec![true, true, false, false]);
    }

    #[test]
    fn single_example_has_no_padding() {
        let b = batch(&[ex(4, 3, &[2, 2], 2)], 8).remove(0);
        assert!(b.question_mask[0].iter().all(|m| *m));
        assert!(b.review_word_mask[0].iter().flatten().all(|m| *m));
        assert!(b.answer_mask[0].iter().all(|m| *m));
    }

    proptest! {
        #[test]
        fn pad_never_inside_mask(lens in prop::collection::vec((1usize..6, 2usize..6, prop::collection::vec(1usize..5, 1..4), 0usize..3), 1..6)) {
            let exs: Vec<_> = lens.iter().map(|(q, a, r, at)| ex(*q, *a, r, *at)).collect();
            for b in batch(&exs, 3) {
                for i in 0..b.len() {
                    for (t, m) in b.question[i].iter().zip(&b.question_mask[i]) {
                        prop_assert_eq!(*m, *t != PAD);
                    }
                    for (r, rm) in b.reviews[i].iter().zip(&b.review_word_mask[i]) {
                        for (t, m) in r.iter().zip(rm) {
                            prop_assert_eq!(*m, *t != PAD);
                        }
                    }
                    for (t, m) in b.answer[i].iter().zip(&b.answer_mask[i]) {
                        prop_assert_eq!(*m, *t != PAD);
                    }
                }
            }
        }
    }
}
