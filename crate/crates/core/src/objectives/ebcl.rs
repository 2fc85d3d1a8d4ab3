use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::{Dropout, Encoder, ProjectionHeads, Side};
use crate::error::{Error, Result};
use crate::featurizer::{EncodedPair, TokenRow};

/// Pre and post rows of `N` pairs from `N` distinct patients; row `k` of each
/// side comes from the same event.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    /// Indices into the pair set.
    pub indices: Vec<usize>,
    pub pre: Vec<TokenRow>,
    pub post: Vec<TokenRow>,
}

impl ContrastiveBatch {
    pub fn from_indices(pairs: &[EncodedPair], indices: Vec<usize>) -> Self {
        Self {
            pre: indices.iter().map(|&i| pairs[i].pre.clone()).collect(),
            post: indices.iter().map(|&i| pairs[i].post.clone()).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn distinct_patients(pairs: &[EncodedPair]) -> usize {
    pairs
        .iter()
        .map(|p| p.patient_id.as_str())
        .collect::<HashSet<_>>()
        .len()
}

fn require_patients(pairs: &[EncodedPair], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let have = distinct_patients(pairs);
    if have < n {
        return Err(Error::InsufficientData(format!(
            "a contrastive batch of N = {n} needs {n} distinct patients with valid pairs, found {have}"
        )));
    }
    Ok(())
}

/// One batch of `n` pairs from distinct patients.
pub fn sample_ebcl_batch(
    pairs: &[EncodedPair],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastiveBatch> {
    require_patients(pairs, n)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut seen = HashSet::new();
    let picked: Vec<usize> = order
        .into_iter()
        .filter(|&i| seen.insert(pairs[i].patient_id.as_str()))
        .take(n)
        .collect();
    Ok(ContrastiveBatch::from_indices(pairs, picked))
}

/// Partitions a shuffled epoch into batches of `n` with no patient repeated
/// inside a batch. Each pair appears at most once; leftovers that cannot fill
/// a batch of at least two are dropped.
pub fn ebcl_epoch_batches(
    pairs: &[EncodedPair],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    require_patients(pairs, n.min(pairs.len()).max(1))?;
    let mut pending: Vec<usize> = (0..pairs.len()).collect();
    pending.shuffle(rng);
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut seen = HashSet::new();
        let mut batch = Vec::with_capacity(n);
        let mut rest = Vec::with_capacity(pending.len());
        for i in pending {
            if batch.len() < n && seen.insert(pairs[i].patient_id.as_str()) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        pending = rest;
        if batch.len() < 2 {
            break;
        }
        if batch.len() < n && !batches.is_empty() {
            // A short tail batch has fewer negatives; keep it only if it is
            // at least half full.
            if batch.len() * 2 < n {
                break;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Symmetric CLIP loss over unit-norm rows:
/// `logits = pre post^T exp(t)`, mean of row-wise and column-wise
/// cross-entropy against the diagonal.
pub fn ebcl_clip_loss(tape: &mut Tape, pre: Var, post: Var, log_temp: Var) -> Result<Var> {
    let (n, d) = tape.shape(pre);
    if n == 0 {
        return Err(Error::invalid("contrastive batch is empty"));
    }
    if tape.shape(post) != (n, d) {
        return Err(Error::Shape(format!(
            "pre {:?} and post {:?} embeddings differ in shape",
            (n, d),
            tape.shape(post)
        )));
    }
    let sims = tape.matmul_bt(pre, post);
    let scale = tape.exp(log_temp);
    let logits = tape.scale_by(sims, scale);
    let rows = tape.log_softmax_rows(logits);
    let rows = tape.diag(rows);
    let rows = tape.mean(rows);
    let t = tape.transpose(logits);
    let cols = tape.log_softmax_rows(t);
    let cols = tape.diag(cols);
    let cols = tape.mean(cols);
    let total = tape.add(rows, cols);
    Ok(tape.scale(total, -0.5))
}

/// Loss value for plain matrices; no gradients.
pub fn clip_loss_value(pre: &Array2<f64>, post: &Array2<f64>, log_temp: f64) -> Result<f64> {
    let store = crate::autograd::ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(pre.clone());
    let b = tape.constant(post.clone());
    let t = tape.constant(Array2::from_elem((1, 1), log_temp));
    let l = ebcl_clip_loss(&mut tape, a, b, t)?;
    Ok(tape.scalar(l))
}

/// Encodes both sides of a batch, projects them, and returns the loss node.
pub fn ebcl_batch_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    heads: &ProjectionHeads,
    batch: &ContrastiveBatch,
    drop: &mut Option<Dropout>,
) -> Result<Var> {
    let (pre, post) = ebcl_projections(tape, encoder, heads, batch, drop)?;
    let t = tape.param(heads.log_temp);
    ebcl_clip_loss(tape, pre, post, t)
}

/// Unit-norm projected pre and post embeddings of a batch.
pub fn ebcl_projections(
    tape: &mut Tape,
    encoder: &Encoder,
    heads: &ProjectionHeads,
    batch: &ContrastiveBatch,
    drop: &mut Option<Dropout>,
) -> Result<(Var, Var)> {
    let pre = encoder.encode_rows(tape, &batch.pre, drop)?;
    let post = encoder.encode_rows(tape, &batch.post, drop)?;
    let pre = heads.project(tape, pre, Side::Pre)?;
    let post = heads.project(tape, post, Side::Post)?;
    Ok((pre, post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    /// Explicit double loop over rows and columns.
    fn oracle(pre: &Array2<f64>, post: &Array2<f64>, log_temp: f64) -> f64 {
        let n = pre.nrows();
        let scale = log_temp.exp();
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..pre.ncols() {
                    dot += pre[[i, k]] * post[[j, k]];
                }
                logits[i][j] = dot * scale;
            }
        }
        let mut row_ce = 0.0;
        let mut col_ce = 0.0;
        for i in 0..n {
            let mut row_sum = 0.0;
            let mut col_sum = 0.0;
            for j in 0..n {
                row_sum += logits[i][j].exp();
                col_sum += logits[j][i].exp();
            }
            row_ce += -(logits[i][i].exp() / row_sum).ln();
            col_ce += -(logits[i][i].exp() / col_sum).ln();
        }
        0.5 * (row_ce / n as f64 + col_ce / n as f64)
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / norm);
        }
        m
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..=16);
            let d = rng.random_range(1..=8);
            let pre = unit_rows(&mut rng, n, d);
            let post = unit_rows(&mut rng, n, d);
            let t = rng.random_range(-1.0..3.0);
            let got = clip_loss_value(&pre, &post, t).unwrap();
            assert!((got - oracle(&pre, &post, t)).abs() < 1e-6);
        }
    }

    #[test]
    fn single_pair_is_zero() {
        let pre = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let post = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        assert_eq!(clip_loss_value(&pre, &post, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_ln_n() {
        for n in [2usize, 5, 16] {
            let row = Array2::from_shape_fn((n, 3), |(_, k)| [0.0, 0.6, 0.8][k]);
            let got = clip_loss_value(&row, &row, 1.3).unwrap();
            assert_eq!(got, (n as f64).ln());
        }
    }

    #[test]
    fn two_by_two_hand_value() {
        let eye = Array2::eye(2);
        let got = clip_loss_value(&eye, &eye, 0.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn permutation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pre = unit_rows(&mut rng, 6, 4);
        let post = unit_rows(&mut rng, 6, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let p2 = Array2::from_shape_fn((6, 4), |(i, k)| pre[[perm[i], k]]);
        let q2 = Array2::from_shape_fn((6, 4), |(i, k)| post[[perm[i], k]]);
        let a = clip_loss_value(&pre, &post, 1.0).unwrap();
        let b = clip_loss_value(&p2, &q2, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        let e = Array2::zeros((0, 3));
        assert!(clip_loss_value(&e, &e, 0.0).is_err());
    }

    #[test]
    fn loss_approaches_zero_with_separated_pairs() {
        let eye = Array2::eye(4);
        let near_zero = clip_loss_value(&eye, &eye, 100f64.ln()).unwrap();
        assert!((0.0..1e-10).contains(&near_zero));
    }

    fn pairs_for(patients: &[(&str, usize)]) -> Vec<EncodedPair> {
        let row = TokenRow {
            times: vec![],
            tokens: vec![],
        };
        patients
            .iter()
            .flat_map(|(p, n)| {
                let row = row.clone();
                (0..*n).map(move |e| EncodedPair {
                    patient_id: p.to_string(),
                    event_time: e as f64,
                    pre: row.clone(),
                    post: row.clone(),
                    labels: BTreeMap::new(),
                })
            })
            .collect()
    }

    #[test]
    fn batch_has_distinct_patients_and_is_deterministic() {
        let names: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        let spec: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 1)).collect();
        let pairs = pairs_for(&spec);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let x = sample_ebcl_batch(&pairs, 32, &mut a).unwrap();
        let y = sample_ebcl_batch(&pairs, 32, &mut b).unwrap();
        assert_eq!(x, y);
        let ids: HashSet<&str> = x.indices.iter().map(|i| pairs[*i].patient_id.as_str()).collect();
        assert_eq!(ids.len(), 32);
    }

    #[test]
    fn epoch_never_repeats_patient_in_batch() {
        let names: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let mut spec: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 1)).collect();
        spec[0].1 = 3;
        let pairs = pairs_for(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = ebcl_epoch_batches(&pairs, 8, &mut rng).unwrap();
        let mut used = HashSet::new();
        for b in &batches {
            let ids: HashSet<&str> = b.iter().map(|i| pairs[*i].patient_id.as_str()).collect();
            assert_eq!(ids.len(), b.len());
            for i in b {
                assert!(used.insert(*i));
            }
        }
        assert!(used.len() >= 40);
    }

    #[test]
    fn too_few_patients_names_n() {
        let pairs = pairs_for(&[("a", 5), ("b", 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_ebcl_batch(&pairs, 3, &mut rng).unwrap_err();
        assert!(err.to_string().contains("N = 3"), "{err}");
    }
}
