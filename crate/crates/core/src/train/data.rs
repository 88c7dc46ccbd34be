use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// 8-bit images with byte labels, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    /// `[C, H, W]`
    pub dims: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Normalization statistics used by the preprocessing pipeline.
    pub stats: ChannelStats,
}

impl Dataset {
    /// Builds a dataset and computes its channel statistics.
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        dims: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let mut ds = Dataset {
            name: name.into(),
            class_names,
            dims,
            pixels,
            labels,
            stats: ChannelStats {
                mean: vec![0.0; dims[0]],
                std: vec![1.0; dims[0]],
            },
        };
        ds.check()?;
        ds.stats = ds.compute_stats();
        Ok(ds)
    }

    /// Builds a dataset with externally supplied statistics.
    pub fn with_stats(
        name: impl Into<String>,
        class_names: Vec<String>,
        dims: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<u8>,
        stats: ChannelStats,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            class_names,
            dims,
            pixels,
            labels,
            stats,
        };
        ds.check()?;
        if ds.stats.mean.len() != dims[0] || ds.stats.std.len() != dims[0] {
            return Err(Error::contract(
                "channel statistics do not match channel count",
            ));
        }
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::contract(format!(
                "image dims {:?} have a zero extent",
                self.dims
            )));
        }
        if self.pixels.len() != self.labels.len() * self.sample_len() {
            return Err(Error::contract(format!(
                "{} pixel bytes for {} samples of {} bytes",
                self.pixels.len(),
                self.labels.len(),
                self.sample_len()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.class_names.len())
        {
            return Err(Error::LabelOverflow {
                record: i,
                label: l as usize,
                classes: self.class_names.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Sample `i` as a `[C,H,W]` tensor scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.raw(i).iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(self.dims.to_vec(), data).expect("dims match sample length")
    }

    pub fn compute_stats(&self) -> ChannelStats {
        let [c, h, w] = self.dims;
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.len() {
            for (ch, px) in self.raw(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        ChannelStats { mean, std }
    }

    /// The samples at `indices`, in that order, sharing this dataset's statistics.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.raw(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            dims: self.dims,
            pixels,
            labels,
            stats: self.stats.clone(),
        }
    }

    /// Indices grouped by class, in ascending order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l as usize).or_default().push(i);
        }
        map
    }
}

/// Stratified split: each class contributes `round(n_c · fraction)` samples
/// to train (at least one to each side). Both halves keep the original order.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in ds.by_class() {
        if idx.len() < 2 {
            return Err(Error::contract(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(per_class: usize, classes: usize) -> Dataset {
        let n = per_class * classes;
        let pixels = (0..n * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % classes) as u8).collect();
        Dataset::new(
            "toy",
            (0..classes).map(|c| format!("c{c}")).collect(),
            [1, 2, 2],
            pixels,
            labels,
        )
        .unwrap()
    }

    #[test]
    fn split_is_stratified_disjoint_and_complete() {
        let ds = toy(100, 3);
        let (tr, te) = split_dataset(&ds, 0.75, 1).unwrap();
        for c in 0..3 {
            assert_eq!(tr.by_class()[&c].len(), 75);
            assert_eq!(te.by_class()[&c].len(), 25);
        }
        // Rebuild indices through raw bytes plus labels: the union must be the whole set.
        let mut all: Vec<(Vec<u8>, u8)> = (0..tr.len())
            .map(|i| (tr.raw(i).to_vec(), tr.labels()[i]))
            .chain((0..te.len()).map(|i| (te.raw(i).to_vec(), te.labels()[i])))
            .collect();
        let mut want: Vec<(Vec<u8>, u8)> = (0..ds.len())
            .map(|i| (ds.raw(i).to_vec(), ds.labels()[i]))
            .collect();
        all.sort();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn half_split_of_pairs() {
        let (tr, te) = split_dataset(&toy(2, 4), 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 4));
    }

    #[test]
    fn split_deterministic_per_seed() {
        let ds = toy(20, 2);
        assert_eq!(
            split_dataset(&ds, 0.75, 9).unwrap(),
            split_dataset(&ds, 0.75, 9).unwrap()
        );
        assert_ne!(
            split_dataset(&ds, 0.75, 9).unwrap().0,
            split_dataset(&ds, 0.75, 10).unwrap().0
        );
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let ds = Dataset::new(
            "x",
            vec!["a".into(), "b".into()],
            [1, 1, 1],
            vec![0, 1, 2],
            vec![0, 0, 1],
        )
        .unwrap();
        assert!(matches!(
            split_dataset(&ds, 0.5, 0),
            Err(Error::Contract(_))
        ));
        assert!(split_dataset(&toy(4, 2), 1.0, 0).is_err());
    }

    #[test]
    fn label_overflow_reports_record() {
        let err =
            Dataset::new("x", vec!["a".into()], [1, 1, 1], vec![0, 0], vec![0, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOverflow {
                record: 1,
                label: 3,
                classes: 1
            }
        ));
    }
}
