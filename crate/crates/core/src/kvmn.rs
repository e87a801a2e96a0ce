//! Key-value memory over product attributes.

use crate::encoders::{uniform, Embedding, ModelDims};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Result, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct KeyValueMemory {
    /// `[2H × E]` bilinear key-matching weight.
    pub w_a: ParamId,
}

/// Matching distribution over attribute slots and the value readout.
#[derive(Clone, Debug)]
pub struct MemoryReadout {
    /// `None` when the example has no real attribute.
    pub scores: Option<Var>,
    /// `[E]`; zero when there are no attributes.
    pub facts: Var,
}

impl KeyValueMemory {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        KeyValueMemory {
            w_a: ps.add("kvmn.w_a", uniform(rng, &[dims.state(), dims.embed])),
        }
    }

    /// Scores each key embedding against the question's final state and
    /// averages the value embeddings under the resulting distribution.
    pub fn read(
        &self,
        g: &mut Graph,
        b: &Bound,
        embedding: &Embedding,
        question_last: Var,
        attributes: &[(usize, usize)],
        mask: &[bool],
    ) -> Result<MemoryReadout> {
        if !mask.iter().any(|m| *m) {
            let width = g.shape(b.var(embedding.table))[1];
            return Ok(MemoryReadout { scores: None, facts: g.zeros(vec![width]) });
        }
        let keys: Vec<usize> = attributes.iter().map(|a| a.0).collect();
        let values: Vec<usize> = attributes.iter().map(|a| a.1).collect();
        let k = embedding.embed(g, b, &keys)?;
        let v = embedding.embed(g, b, &values)?;
        let q = g.matmul(question_last, b.var(self.w_a))?;
        let s = g.matmul(k, q)?;
        let scores = g.softmax(s, Some(mask))?;
        let facts = g.matmul(scores, v)?;
        Ok(MemoryReadout { scores: Some(scores), facts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{central_difference, max_relative_error, FD_STEP, REL_FLOOR};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { vocab: 10, embed: 3, hidden: 2, filters: 1, proj: 1 }
    }

    fn setup() -> (ParamSet, Embedding, KeyValueMemory) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let e = Embedding::register(&mut ps, &dims(), &mut rng);
        let m = KeyValueMemory::register(&mut ps, &dims(), &mut rng);
        (ps, e, m)
    }

    fn readout(ps: &ParamSet, e: &Embedding, m: &KeyValueMemory, q: &[f64], attrs: &[(usize, usize)], mask: &[bool]) -> (Option<Vec<f64>>, Vec<f64>) {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let qv = g.constant(vec![4], q.to_vec()).unwrap();
        let r = m.read(&mut g, &b, e, qv, attrs, mask).unwrap();
        (r.scores.map(|s| g.value(s).to_vec()), g.value(r.facts).to_vec())
    }

    fn row(ps: &ParamSet, e: &Embedding, id: usize) -> Vec<f64> {
        ps.get(e.table).data()[id * 3..id * 3 + 3].to_vec()
    }

    const Q: [f64; 4] = [0.3, -0.7, 0.2, 0.9];

    #[test]
    fn single_attribute_reads_its_value() {
        let (ps, e, m) = setup();
        let (s, f) = readout(&ps, &e, &m, &Q, &[(4, 5)], &[true]);
        assert_eq!(s.unwrap(), vec![1.0]);
        assert_eq!(f, row(&ps, &e, 5));
    }

    #[test]
    fn no_attributes_read_zero() {
        let (ps, e, m) = setup();
        let (s, f) = readout(&ps, &e, &m, &Q, &[(0, 0)], &[false]);
        assert!(s.is_none());
        assert_eq!(f, vec![0.0; 3]);
        let (s, _) = readout(&ps, &e, &m, &Q, &[], &[]);
        assert!(s.is_none());
    }

    #[test]
    fn zero_wa_is_uniform_mean() {
        let (mut ps, e, m) = setup();
        ps.get_mut(m.w_a).data_mut().fill(0.0);
        let (s, f) = readout(&ps, &e, &m, &Q, &[(4, 5), (6, 7), (0, 0)], &[true, true, false]);
        assert_eq!(s.unwrap(), vec![0.5, 0.5, 0.0]);
        let (a, b) = (row(&ps, &e, 5), row(&ps, &e, 7));
        for d in 0..3 {
            assert!((f[d] - (a[d] + b[d]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn engineered_key_wins() {
        let (mut ps, e, m) = setup();
        // with w_a mapping q to e_0 and keys differing by 20 in that coordinate
        let mut wa = vec![0.0; 12];
        wa[0] = 1.0;
        *ps.get_mut(m.w_a) = Tensor::new(vec![4, 3], wa).unwrap().with_grad();
        let t = ps.get_mut(e.table).data_mut();
        t[4 * 3] = 10.0;
        t[6 * 3] = -10.0;
        let (s, f) = readout(&ps, &e, &m, &[1.0, 0.0, 0.0, 0.0], &[(4, 5), (6, 7)], &[true, true]);
        assert!(s.unwrap()[0] > 0.9999);
        let v = row(&ps, &e, 5);
        for d in 0..3 {
            assert!((f[d] - v[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_values_ignore_scores() {
        let (ps, e, m) = setup();
        let (_, f) = readout(&ps, &e, &m, &Q, &[(4, 5), (6, 5), (7, 5)], &[true; 3]);
        let v = row(&ps, &e, 5);
        for d in 0..3 {
            assert!((f[d] - v[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_and_duplication() {
        let (ps, e, m) = setup();
        let (s1, f1) = readout(&ps, &e, &m, &Q, &[(4, 5), (6, 7), (8, 9)], &[true; 3]);
        let (s2, f2) = readout(&ps, &e, &m, &Q, &[(8, 9), (4, 5), (6, 7)], &[true; 3]);
        let (s1, s2) = (s1.unwrap(), s2.unwrap());
        assert!((s1[0] - s2[1]).abs() < 1e-12 && (s1[2] - s2[0]).abs() < 1e-12);
        for d in 0..3 {
            assert!((f1[d] - f2[d]).abs() < 1e-12);
        }
        // duplicating every attribute halves each score and keeps m
        let (s3, f3) = readout(&ps, &e, &m, &Q, &[(4, 5), (6, 7), (8, 9), (4, 5), (6, 7), (8, 9)], &[true; 6]);
        let s3 = s3.unwrap();
        for i in 0..3 {
            assert!((s3[i] + s3[i + 3] - s1[i]).abs() < 1e-12);
        }
        for d in 0..3 {
            assert!((f1[d] - f3[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_of_squared_norm_wrt_wa() {
        let (ps, e, m) = setup();
        let attrs = [(4, 5), (6, 7), (8, 9)];
        let value = |p: &ParamSet| {
            let (_, f) = readout(p, &e, &m, &Q, &attrs, &[true; 3]);
            f.iter().map(|x| x * x).sum::<f64>()
        };
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let qv = g.constant(vec![4], Q.to_vec()).unwrap();
        let r = m.read(&mut g, &b, &e, qv, &attrs, &[true; 3]).unwrap();
        let sq = g.mul(r.facts, r.facts).unwrap();
        let loss = g.sum(sq);
        let analytic = g.backward(loss).unwrap().get(b.var(m.w_a)).unwrap().to_vec();
        drop(g);
        let numeric = central_difference(
            |x| {
                let mut p = ps.clone();
                p.get_mut(m.w_a).data_mut().copy_from_slice(x);
                value(&p)
            },
            ps.get(m.w_a).data(),
            FD_STEP,
        );
        assert!(max_relative_error(&analytic, &numeric, REL_FLOOR) < 1e-4);
    }
}
