//! In-memory datasets and deterministic minibatching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Stream, StreamId};
use crate::tensor::Tensor;

/// Per-channel affine normalization applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An immutable labeled dataset. Examples are stacked along the leading
/// axis; labels index classes from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Declared value range; enables attack clipping when present.
    pub range: Option<(f64, f64)>,
    /// Normalization that was applied to the examples, if any.
    pub normalization: Option<Normalization>,
}

impl DatasetHandle {
    pub fn new(examples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if examples.batch_len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} examples but {} labels",
                examples.batch_len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !examples.is_finite() {
            return Err(Error::Dataset("non-finite example values".into()));
        }
        Ok(DatasetHandle {
            examples,
            labels,
            classes,
            range: None,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (without the batch axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    /// First `n` examples as a new handle (used for fixed monitor subsets).
    pub fn take(&self, n: usize) -> DatasetHandle {
        let n = n.min(self.len());
        DatasetHandle {
            examples: self.examples.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            range: self.range,
            normalization: self.normalization.clone(),
        }
    }
}

/// One minibatch: examples plus aligned labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Tensor,
    pub labels: Vec<usize>,
}

/// Gaussian clusters around the given centers, `per_class` points each.
/// Deterministic in the seed; the declared range is unbounded so attack
/// clipping stays off by default.
pub fn make_blobs(
    per_class: usize,
    dims: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> Result<DatasetHandle> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Dataset(format!("sigma {sigma} must be positive")));
    }
    if per_class == 0 || dims == 0 || centers.len() < 2 {
        return Err(Error::Dataset(
            "blobs need per_class >= 1, dims >= 1 and at least two centers".into(),
        ));
    }
    for (i, c) in centers.iter().enumerate() {
        if c.len() != dims {
            return Err(Error::Dataset(format!(
                "center {i} has {} coordinates, expected {dims}",
                c.len()
            )));
        }
        if centers[..i].contains(c) {
            return Err(Error::Dataset(format!("duplicate center {c:?}")));
        }
    }
    let mut stream = Stream::derive(seed, &[StreamId::Data as u64]);
    let n = per_class * centers.len();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                data.push(c + sigma * stream.next_gaussian());
            }
            labels.push(class);
        }
    }
    DatasetHandle::new(
        Tensor::from_vec_finite(vec![n, dims], data)?,
        labels,
        centers.len(),
    )
}

/// Deterministic epoch batching: a permutation derived from `(seed, epoch)`
/// over the project PRNG's shuffle stream, cut into `batch_size` chunks.
/// The final short batch is kept.
pub fn minibatches(
    handle: &DatasetHandle,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..handle.len()).collect();
    let mut stream = Stream::derive(seed, &[StreamId::Shuffle as u64, epoch as u64]);
    stream.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            examples: handle.examples.gather_rows(chunk),
            labels: chunk.iter().map(|&i| handle.labels[i]).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_blob_handle(seed: u64) -> DatasetHandle {
        make_blobs(
            500,
            2,
            &[vec![1.0, 1.0], vec![-1.0, -1.0]],
            0.1,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn blobs_are_linearly_separable() {
        // Centers at +-(1,1) with sigma = 0.1: the sign of x + y classifies
        // every point (noise would need a > 7 sigma excursion to cross).
        let d = two_blob_handle(7);
        for (row, &label) in d.examples.data().chunks(2).zip(&d.labels) {
            let proj = row[0] + row[1];
            assert_eq!(proj > 0.0, label == 0, "point {row:?} label {label}");
        }
    }

    #[test]
    fn blobs_same_seed_identical() {
        let a = two_blob_handle(3);
        let b = two_blob_handle(3);
        assert_eq!(a, b);
        let c = two_blob_handle(4);
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_degenerate_noise_collapses_to_centers() {
        let d = make_blobs(4, 2, &[vec![1.0, 1.0], vec![-1.0, -1.0]], 1e-300, 5).unwrap();
        for (row, &label) in d.examples.data().chunks(2).zip(&d.labels) {
            let expected = if label == 0 { 1.0 } else { -1.0 };
            assert_eq!(row, &[expected, expected]);
        }
    }

    #[test]
    fn blobs_validate_inputs() {
        assert!(make_blobs(4, 2, &[vec![0.0, 0.0]], 0.1, 1).is_err());
        assert!(make_blobs(4, 2, &[vec![0.0, 0.0], vec![0.0, 0.0]], 0.1, 1).is_err());
        assert!(make_blobs(4, 2, &[vec![0.0], vec![1.0, 1.0]], 0.1, 1).is_err());
        assert!(make_blobs(4, 2, &[vec![0.0, 0.0], vec![1.0, 1.0]], 0.0, 1).is_err());
    }

    #[test]
    fn oversized_batch_is_identity() {
        let d = two_blob_handle(1);
        let batches = minibatches(&d, 5000, 9, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].examples.batch_len(), 1000);
    }

    #[test]
    fn batching_is_deterministic_per_seed_and_epoch() {
        let d = two_blob_handle(1);
        let a = minibatches(&d, 64, 9, 3).unwrap();
        let b = minibatches(&d, 64, 9, 3).unwrap();
        assert_eq!(a[0].examples, b[0].examples);
        assert_eq!(a[0].labels, b[0].labels);
        let c = minibatches(&d, 64, 9, 4).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn short_final_batch_kept() {
        let examples = Tensor::from_vec(vec![10, 1], (0..10).map(|v| v as f64).collect()).unwrap();
        let d = DatasetHandle::new(examples, vec![0; 10], 2).unwrap();
        let batches = minibatches(&d, 4, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    proptest! {
        #[test]
        fn epoch_batches_cover_the_dataset_exactly_once(
            n in 1usize..50,
            batch in 1usize..20,
            seed in 0u64..100,
            epoch in 0usize..5,
        ) {
            let examples =
                Tensor::from_vec(vec![n, 1], (0..n).map(|v| v as f64).collect()).unwrap();
            let d = DatasetHandle::new(examples, vec![0; n], 2).unwrap();
            let batches = minibatches(&d, batch, seed, epoch).unwrap();
            let mut seen: Vec<i64> = batches
                .iter()
                .flat_map(|b| b.examples.data().iter().map(|&v| v as i64))
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n as i64).collect::<Vec<_>>());
        }
    }
}
