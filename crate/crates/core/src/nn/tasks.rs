use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Regression: sum of the values selected by a k-hot mask.
    Ksum,
    /// Binary classification: do the first two symbols repeat later on.
    PairRepeat,
}

/// One batch of examples, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub kind: TaskKind,
    /// k-summation: `batch × 2n`, values then mask. Pair-repeat:
    /// `batch × max_len` symbols stored as floats, right-padded.
    pub inputs: Matrix,
    /// Sums, or labels in `{0, 1}`.
    pub targets: Vec<f64>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `batch` rows of `n` standard normal values followed by an `n`-wide mask
/// with exactly `k` ones. Targets are the masked sums.
pub fn gen_ksum(n: usize, k: usize, batch: usize, rng: &mut Rng) -> Result<TaskBatch> {
    if n == 0 {
        return Err(invalid("gen_ksum: n must be >= 1"));
    }
    if k > n {
        return Err(invalid(format!("gen_ksum: k = {k} exceeds n = {n}")));
    }
    let mut inputs = Matrix::zeros(batch, 2 * n);
    let mut targets = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = inputs.row_mut(b);
        for x in &mut row[..n] {
            *x = rng.normal();
        }
        for i in rng.distinct(n, k) {
            row[n + i] = 1.0;
        }
        targets.push(ksum_target(row));
    }
    Ok(TaskBatch {
        kind: TaskKind::Ksum,
        inputs,
        targets,
    })
}

/// `Σ maskᵢ·valueᵢ` of a row laid out as values then mask.
pub fn ksum_target(row: &[f64]) -> f64 {
    let n = row.len() / 2;
    row[..n].iter().zip(&row[n..]).map(|(v, m)| m * v).sum()
}

/// 1 if `(s₀, s₁) = (sₙ, sₙ₊₁)` for some `n ≥ 2`, else 0.
pub fn pair_repeat_label(seq: &[usize]) -> f64 {
    if seq.len() < 4 {
        return 0.0;
    }
    let hit = (2..seq.len() - 1).any(|n| seq[n] == seq[0] && seq[n + 1] == seq[1]);
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Sequences over `{0, …, vocab−1}` with lengths uniform in `len_range`
/// (inclusive), right-padded to `max_len` with the symbol `vocab`. Exactly
/// half the batch (rounded down) is positive; positives plant `(s₀, s₁)` at
/// a uniform position `n ∈ [2, len−2]`, negatives are resampled until no
/// repeat exists.
pub fn gen_pair_repeat(
    vocab: usize,
    len_range: (usize, usize),
    max_len: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<TaskBatch> {
    let (lo, hi) = len_range;
    if !(4 <= lo && lo <= hi && hi <= max_len) {
        return Err(invalid(format!(
            "gen_pair_repeat: need 4 <= lower <= upper <= max_len, got {lo}..={hi} with max_len {max_len}"
        )));
    }
    if vocab == 0 {
        return Err(invalid("gen_pair_repeat: vocabulary must be non-empty"));
    }
    if vocab == 1 {
        // every sequence repeats; no negatives exist
        return Err(invalid("gen_pair_repeat: vocabulary of 1 admits no negative examples"));
    }
    let mut labels: Vec<f64> = (0..batch).map(|i| if i < batch / 2 { 1.0 } else { 0.0 }).collect();
    for i in (1..batch).rev() {
        labels.swap(i, rng.below(i + 1));
    }
    let mut inputs = Matrix::filled(batch, max_len, vocab as f64);
    let mut seq = Vec::with_capacity(max_len);
    for (b, &label) in labels.iter().enumerate() {
        let len = lo + rng.below(hi - lo + 1);
        loop {
            seq.clear();
            seq.extend((0..len).map(|_| rng.below(vocab)));
            if label == 1.0 {
                let at = 2 + rng.below(len - 3);
                seq[at] = seq[0];
                seq[at + 1] = seq[1];
                break;
            }
            if pair_repeat_label(&seq) == 0.0 {
                break;
            }
        }
        for (x, &s) in inputs.row_mut(b).iter_mut().zip(&seq) {
            *x = s as f64;
        }
    }
    Ok(TaskBatch {
        kind: TaskKind::PairRepeat,
        inputs,
        targets: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ksum_table_example() {
        assert_eq!(ksum_target(&[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0, 0.0, 1.0]), 5.0);
        let b = gen_ksum(6, 0, 4, &mut Rng::new(0)).unwrap();
        assert!(b.targets.iter().all(|&t| t == 0.0));
        assert!(gen_ksum(3, 4, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pair_repeat_definition() {
        assert_eq!(pair_repeat_label(&[1, 2, 3, 1, 2]), 1.0);
        assert_eq!(pair_repeat_label(&[1, 2, 3, 4, 5]), 0.0);
        assert_eq!(pair_repeat_label(&[1, 1, 1, 1]), 1.0);
        // a match at n = 1 does not count
        assert_eq!(pair_repeat_label(&[1, 1, 1, 2]), 0.0);
    }

    #[test]
    fn pair_repeat_balanced_and_padded() {
        let b = gen_pair_repeat(5, (8, 10), 14, 100, &mut Rng::new(3)).unwrap();
        assert_eq!(b.targets.iter().sum::<f64>(), 50.0);
        for (i, &t) in b.targets.iter().enumerate() {
            let row = b.inputs.row(i);
            let seq: Vec<usize> = row.iter().take_while(|&&x| x < 5.0).map(|&x| x as usize).collect();
            assert!((8..=10).contains(&seq.len()));
            assert!(row[seq.len()..].iter().all(|&x| x == 5.0));
            assert_eq!(pair_repeat_label(&seq), t);
        }
        assert!(gen_pair_repeat(5, (3, 10), 14, 1, &mut Rng::new(0)).is_err());
        assert!(gen_pair_repeat(5, (8, 15), 14, 1, &mut Rng::new(0)).is_err());
    }
}
