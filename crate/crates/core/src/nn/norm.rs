//! Tensor-level entry points for the two normalization schemes used in
//! front of appended layers.

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::layer::{Mode, STD_EPS, STD_MOMENTUM};
use crate::tensor::Tensor;

/// Divides each row of `x: [B,D]` by its Euclidean norm; near-zero rows become zeros.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.l2_normalize(v)?;
    Ok(tape.value(y).clone())
}

/// Running per-feature statistics of a batch-standardization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// `running ← (1 − m)·running + m·batch`
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        blend(&mut self.mean, mean);
        blend(&mut self.var, var);
    }
}

pub(crate) fn blend(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - STD_MOMENTUM) * *r + STD_MOMENTUM * b;
    }
}

/// Standardizes features of `x: [B,D]` before the learnable scale.
///
/// Train mode uses the batch mean and biased variance and folds them into
/// `stats`; eval mode reads `stats` only.
pub fn batch_standardize(x: &Tensor, stats: &mut RunningStats, mode: Mode) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != stats.mean.len() {
        return Err(Error::dim(
            "batch_standardize",
            x.shape(),
            &[stats.mean.len()],
        ));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_standardize(v, STD_EPS)?;
            stats.update(&mean, &var);
            y
        }
        Mode::Eval => tape.standardize_with(v, &stats.mean, &stats.var, STD_EPS)?,
    };
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new([rows, cols], data).unwrap()
    }

    #[test]
    fn pythagorean_row() {
        let y = l2_normalize(&t(1, 2, vec![3.0, 4.0])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_unchanged() {
        let y = l2_normalize(&t(1, 3, vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_batch_standardizes_to_zero() {
        let mut stats = RunningStats::new(2);
        let y = batch_standardize(
            &t(3, 2, vec![5.0, -1.0, 5.0, -1.0, 5.0, -1.0]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_sample_batch_by_hand() {
        let mut stats = RunningStats::new(1);
        let y = batch_standardize(&t(2, 1, vec![0.0, 2.0]), &mut stats, Mode::Train).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + want).abs() < 1e-15);
        assert!((y.data()[1] - want).abs() < 1e-15);
        assert!((want - 0.999995).abs() < 1e-6);
        // running mean 0.9*0 + 0.1*1, running var 0.9*1 + 0.1*1
        assert!((stats.mean[0] - 0.1).abs() < 1e-15);
        assert!((stats.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_row_train_is_a_contract_error() {
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            batch_standardize(&t(1, 2, vec![1.0, 2.0]), &mut stats, Mode::Train),
            Err(Error::Contract(_))
        ));
        // Eval is fine with one row.
        assert!(batch_standardize(&t(1, 2, vec![1.0, 2.0]), &mut stats, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_is_batch_size_independent() {
        let mut stats = RunningStats {
            mean: vec![0.3, -1.0],
            var: vec![2.0, 0.5],
        };
        let batch = t(3, 2, vec![1.0, 2.0, -0.5, 0.25, 4.0, 1.5]);
        let whole = batch_standardize(&batch, &mut stats, Mode::Eval).unwrap();
        for (r, row) in batch.rows().enumerate() {
            let single = batch_standardize(&t(1, 2, row.to_vec()), &mut stats, Mode::Eval).unwrap();
            assert_eq!(single.data(), &whole.data()[r * 2..r * 2 + 2]);
        }
    }

    proptest! {
        #[test]
        fn l2_is_idempotent(rows in proptest::collection::vec(
            proptest::collection::vec(-50.0f64..50.0, 5), 1..8)) {
            let n = rows.len();
            let x = t(n, 5, rows.concat());
            let once = l2_normalize(&x).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (r, row) in x.rows().enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    let out = &once.data()[r * 5..r * 5 + 5];
                    let on = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!((on - 1.0).abs() < 1e-6);
                    for (a, b) in out.iter().zip(&twice.data()[r * 5..r * 5 + 5]) {
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn train_standardization_moments(
            spread in 1e-3f64..100.0,
            offset in -100.0f64..100.0,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..32 * 3).map(|_| offset + spread * rng.random_range(-1.0..1.0)).collect();
            let mut stats = RunningStats::new(3);
            let y = batch_standardize(&t(32, 3, data.clone()), &mut stats, Mode::Train).unwrap();
            for j in 0..3 {
                let col: Vec<f64> = (0..32).map(|r| y.data()[r * 3 + j]).collect();
                let raw: Vec<f64> = (0..32).map(|r| data[r * 3 + j]).collect();
                let m = col.iter().sum::<f64>() / 32.0;
                let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 32.0;
                let rm = raw.iter().sum::<f64>() / 32.0;
                let rv = raw.iter().map(|c| (c - rm) * (c - rm)).sum::<f64>() / 32.0;
                prop_assert!(m.abs() < 1e-6);
                // The epsilon shrinks the variance by rv/(rv+eps).
                prop_assert!((v - rv / (rv + STD_EPS)).abs() < 1e-9);
            }
        }
    }
}
