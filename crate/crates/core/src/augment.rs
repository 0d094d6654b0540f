//! Cohort-augmented representation: neighbour transform, bilinear attention,
//! summation fusion and negative-neighbour logits.
//!
//! The batched forward works on ragged neighbour lists: row block
//! `offsets[i]..offsets[i + 1]` of the neighbour matrix belongs to target `i`.
//! A target with no augmentation neighbours gets `h_a = 0`.

use rand::Rng;

use crate::autodiff::{xavier_uniform, AutodiffError, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::cohort::{CohortSet, Member};
use crate::encoders::{Linear, OutputHead};

/// Trainable parameters of the augmented phase (besides the main encoder).
#[derive(Clone, Debug)]
pub struct AugmentParams {
    /// Shared neighbour transform for augmentation and negative neighbours.
    pub transform: Linear,
    /// Bilinear attention matrix, `n_d x n_d`.
    pub attention: ParamId,
    /// Main output layer applied to fused representations.
    pub head: OutputHead,
    dim: usize,
}

/// Neighbour vectors of a batch, flattened.
#[derive(Clone, Debug)]
pub struct NeighborBatch<T: Real = f32> {
    pub vectors: Tensor<T>,
    pub offsets: Vec<usize>,
}

impl<T: Real> NeighborBatch<T> {
    pub fn empty(batch: usize, dim: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[0, dim]),
            offsets: vec![0; batch + 1],
        }
    }

    pub fn from_lists<'a, I>(lists: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [Member]>,
    {
        let mut data = Vec::new();
        let mut offsets = vec![0];
        let mut rows = 0;
        for list in lists {
            for m in list {
                assert_eq!(m.vector.len(), dim, "neighbour vector dimension");
                data.extend(m.vector.iter().map(|&x| T::from_f64_lossy(x as f64)));
            }
            rows += list.len();
            offsets.push(rows);
        }
        Self {
            vectors: Tensor::new(vec![rows, dim], data).expect("rows * dim entries"),
            offsets,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Target index of every neighbour row.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (i, w) in self.offsets.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(i, w[1] - w[0]));
        }
        out
    }
}

/// Augmentation and negative neighbours for a batch of targets.
#[derive(Clone, Debug)]
pub struct CohortBatch<T: Real = f32> {
    pub aug: NeighborBatch<T>,
    pub neg: NeighborBatch<T>,
}

impl<T: Real> CohortBatch<T> {
    pub fn empty(batch: usize, dim: usize) -> Self {
        Self {
            aug: NeighborBatch::empty(batch, dim),
            neg: NeighborBatch::empty(batch, dim),
        }
    }

    pub fn from_sets(sets: &[&CohortSet], dim: usize) -> Self {
        Self {
            aug: NeighborBatch::from_lists(sets.iter().map(|s| s.aug.as_slice()), dim),
            neg: NeighborBatch::from_lists(sets.iter().map(|s| s.neg.as_slice()), dim),
        }
    }
}

/// Tape handles produced by [`AugmentParams::forward`].
#[derive(Clone, Debug)]
pub struct AugmentOutput {
    /// `[B x 1]` fused logits.
    pub logits: Var,
    /// `[B x n_d]` aggregated neighbour representation.
    pub h_a: Var,
    /// `[N_a x 1]` attention weights, when any augmentation neighbour exists.
    pub attention: Option<Var>,
    /// `[N_n x 1]` negative-neighbour logits, when any negative exists.
    pub neg_logits: Option<Var>,
}

impl AugmentParams {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, head_depth: usize) -> Self {
        let transform = Linear::new(store, rng, &format!("{name}.transform"), dim, dim);
        let attention = store.register(format!("{name}.attention"), xavier_uniform(dim, dim, rng));
        let head = OutputHead::new(store, rng, &format!("{name}.head"), dim, head_depth);
        Self {
            transform,
            attention,
            head,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.transform.params().to_vec();
        ids.push(self.attention);
        ids.extend(self.head.params());
        ids
    }

    /// `H = E W_aug^T + b_aug`, row order preserved.
    pub fn transform<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, e: Var) -> Result<Var, AutodiffError> {
        self.transform.forward(tape, store, e)
    }

    /// Bilinear scores `s_k = h_k^T W_att h_i` of each neighbour row against its owner.
    fn scores<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_nb: Var,
        h: Var,
        owners: &[usize],
    ) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.attention);
        let q = tape.matmul_nt(h, w)?;
        let q = tape.gather_rows(q, owners)?;
        tape.row_dot(h_nb, q)
    }

    /// Attention-weighted sum of transformed neighbours per target, and the weights.
    pub fn aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_nb: Var,
        h: Var,
        offsets: &[usize],
    ) -> Result<(Var, Var), AutodiffError> {
        let owners: Vec<usize> = offsets
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| std::iter::repeat_n(i, w[1] - w[0]))
            .collect();
        let s = self.scores(tape, store, h_nb, h, &owners)?;
        let alpha = tape.segment_softmax(s, offsets)?;
        let weighted = tape.mul_col(h_nb, alpha)?;
        let h_a = tape.segment_sum(weighted, offsets)?;
        Ok((h_a, alpha))
    }

    /// `phi(h + h_a)` as `[n x 1]` logits.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, h_a: Var) -> Result<Var, AutodiffError> {
        let z = tape.add(h, h_a)?;
        self.head.forward(tape, store, z)
    }

    /// Full batched forward. With `aggregate` off, `h_a` is zero and only the
    /// negative-neighbour path uses the transform.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        cohorts: &CohortBatch<T>,
        aggregate: bool,
    ) -> Result<AugmentOutput, AutodiffError> {
        let b = tape.value(h).rows();
        if cohorts.aug.batch_len() != b || cohorts.neg.batch_len() != b {
            return Err(AutodiffError::Shape {
                op: "augment",
                detail: format!("{b} targets but cohort batch covers {}", cohorts.aug.batch_len()),
            });
        }
        let (h_a, attention) = if aggregate && cohorts.aug.total() > 0 {
            let e = tape.constant(cohorts.aug.vectors.clone());
            let h_nb = self.transform(tape, store, e)?;
            let (h_a, alpha) = self.aggregate(tape, store, h_nb, h, &cohorts.aug.offsets)?;
            (h_a, Some(alpha))
        } else {
            (tape.constant(Tensor::zeros(&[b, self.dim])), None)
        };
        let logits = self.fuse(tape, store, h, h_a)?;
        let neg_logits = if cohorts.neg.total() > 0 {
            let e = tape.constant(cohorts.neg.vectors.clone());
            let h_n = self.transform(tape, store, e)?;
            let h_rep = tape.gather_rows(h, &cohorts.neg.owners())?;
            Some(self.fuse(tape, store, h_rep, h_n)?)
        } else {
            None
        };
        Ok(AugmentOutput {
            logits,
            h_a,
            attention,
            neg_logits,
        })
    }
}

fn rows_tensor<T: Real>(rows: &[Vec<T>], dim: usize) -> Result<Tensor<T>, AutodiffError> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(AutodiffError::Shape {
                op: "augment",
                detail: format!("vector of length {} where {dim} expected", r.len()),
            });
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), dim], data)
}

fn rows_of<T: Real>(t: &Tensor<T>) -> Vec<Vec<T>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Single-sample evaluation helpers, used for inspection and tests.
impl AugmentParams {
    pub fn transform_neighbors<T: Real>(&self, store: &ParamStore<T>, e: &[Vec<T>]) -> Result<Vec<Vec<T>>, AutodiffError> {
        if e.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows_tensor(e, self.dim)?);
        let h = self.transform(&mut tape, store, x)?;
        Ok(rows_of(tape.value(h)))
    }

    /// Returns `(h_a, alpha)` for already transformed neighbours `h_nb` of `h_i`.
    pub fn attentive_aggregate<T: Real>(
        &self,
        store: &ParamStore<T>,
        h_nb: &[Vec<T>],
        h_i: &[T],
    ) -> Result<(Vec<T>, Vec<T>), AutodiffError> {
        if h_nb.is_empty() {
            return Err(AutodiffError::Shape {
                op: "attentive_aggregate",
                detail: "no neighbours; use the zero fallback".into(),
            });
        }
        let mut tape = Tape::new();
        let nb = tape.constant(rows_tensor(h_nb, self.dim)?);
        let h = tape.constant(rows_tensor(&[h_i.to_vec()], self.dim)?);
        let (h_a, alpha) = self.aggregate(&mut tape, store, nb, h, &[0, h_nb.len()])?;
        Ok((tape.value(h_a).data().to_vec(), tape.value(alpha).data().to_vec()))
    }

    pub fn fuse_predict<T: Real>(&self, store: &ParamStore<T>, h_i: &[T], h_a: &[T]) -> Result<T, AutodiffError> {
        let mut tape = Tape::new();
        let h = tape.constant(rows_tensor(&[h_i.to_vec()], self.dim)?);
        let a = tape.constant(rows_tensor(&[h_a.to_vec()], self.dim)?);
        let y = self.fuse(&mut tape, store, h, a)?;
        Ok(tape.scalar(y))
    }

    /// `phi(h_i + h_k)` for every transformed negative neighbour.
    pub fn negative_logits<T: Real>(&self, store: &ParamStore<T>, h_i: &[T], h_n: &[Vec<T>]) -> Result<Vec<T>, AutodiffError> {
        if h_n.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let h = tape.constant(rows_tensor(&[h_i.to_vec()], self.dim)?);
        let n = tape.constant(rows_tensor(h_n, self.dim)?);
        let rep = tape.gather_rows(h, &vec![0; h_n.len()])?;
        let y = self.fuse(&mut tape, store, rep, n)?;
        Ok(tape.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::predict_logit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParamStore<f64>, AugmentParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AugmentParams::new(&mut store, &mut rng, "aug", dim, 1);
        (store, p)
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(shape, data).unwrap();
    }

    #[test]
    fn identity_transform_is_noop() {
        let (mut store, p) = setup(3);
        set(&mut store, p.transform.weight, Tensor::<f64>::identity(3).into_data());
        let e = vec![vec![1.0, -2.0, 0.5], vec![0.0, 4.0, 3.0]];
        assert_eq!(p.transform_neighbors(&store, &e).unwrap(), e);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let (mut store, p) = setup(3);
        set(&mut store, p.transform.weight, vec![0.0; 9]);
        set(&mut store, p.transform.bias, vec![0.1, 0.2, 0.3]);
        let h = p.transform_neighbors(&store, &[vec![5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(h, vec![vec![0.1, 0.2, 0.3]]);
    }

    #[test]
    fn transform_matches_hand_matvec() {
        let (mut store, p) = setup(3);
        let w = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 1.0, 1.0, 1.0];
        set(&mut store, p.transform.weight, w.clone());
        set(&mut store, p.transform.bias, vec![0.25, 0.0, -1.0]);
        let e = [2.0, -1.0, 0.5];
        let h = p.transform_neighbors(&store, &[e.to_vec()]).unwrap();
        let expect = [0.5 * 2.0 + 1.0 + 1.0 + 0.25, -1.5 - 0.25, 2.0 - 1.0 + 0.5 - 1.0];
        for (a, b) in h[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbour_gets_full_weight() {
        let (store, p) = setup(2);
        let (h_a, alpha) = p.attentive_aggregate(&store, &[vec![0.3, -0.7]], &[1.0, 2.0]).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(h_a, vec![0.3, -0.7]);
    }

    #[test]
    fn equal_scores_split_evenly() {
        let (mut store, p) = setup(2);
        set(&mut store, p.attention, vec![0.0; 4]);
        let (_, alpha) = p.attentive_aggregate(&store, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]).unwrap();
        assert_eq!(alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn scores_zero_and_ln3() {
        // W_att = I, h_i = (1, 0): scores are the first coordinates.
        let (mut store, p) = setup(2);
        set(&mut store, p.attention, vec![1.0, 0.0, 0.0, 1.0]);
        let nb = vec![vec![0.0, 5.0], vec![3f64.ln(), -1.0]];
        let (_, alpha) = p.attentive_aggregate(&store, &nb, &[1.0, 0.0]).unwrap();
        assert!((alpha[0] - 0.25).abs() < 1e-12 && (alpha[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_neighbours_is_error() {
        let (store, p) = setup(2);
        assert!(p.attentive_aggregate(&store, &[], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fuse_with_zero_aug_equals_head() {
        let (store, p) = setup(3);
        let h = [0.2, -0.4, 0.9];
        let a = p.fuse_predict(&store, &h, &[0.0; 3]).unwrap();
        let b = predict_logit(&p.head, &store, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn opposite_vectors_with_zero_head_give_zero_logit() {
        let (mut store, p) = setup(2);
        for id in p.head.params() {
            let n = store.value(id).numel();
            set(&mut store, id, vec![0.0; n]);
        }
        assert_eq!(p.fuse_predict(&store, &[1.0, -2.0], &[-1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn negative_logits_are_pairwise_fusions() {
        let (store, p) = setup(3);
        let h = [0.1, 0.5, -0.3];
        assert!(p.negative_logits(&store, &h, &[]).unwrap().is_empty());
        let zero = p.negative_logits(&store, &h, &[vec![0.0; 3]]).unwrap();
        assert_eq!(zero, vec![predict_logit(&p.head, &store, &h).unwrap()]);
        let hn = vec![vec![0.4, -0.2, 0.8], vec![-1.0, 0.3, 0.0]];
        let got = p.negative_logits(&store, &h, &hn).unwrap();
        for (g, n) in got.iter().zip(&hn) {
            let sum: Vec<f64> = h.iter().zip(n).map(|(a, b)| a + b).collect();
            assert!((g - predict_logit(&p.head, &store, &sum).unwrap()).abs() < 1e-12);
        }
    }
}
