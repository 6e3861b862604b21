//! Causal, random and completion splits.

use super::timeline::{CorpusTimeline, Document};
use super::vocab::Bow;
use crate::error::{DtamError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Last `n_prediction` slices become the prediction timeline.
pub fn temporal_split(
    timeline: &CorpusTimeline,
    n_prediction: usize,
) -> Result<(CorpusTimeline, CorpusTimeline)> {
    let t = timeline.num_slices();
    if t <= n_prediction {
        return Err(DtamError::Data(format!(
            "need more than {n_prediction} slices for the temporal split, have {t}"
        )));
    }
    let cut = t - n_prediction;
    Ok((timeline.sub_range(0..cut), timeline.sub_range(cut..t)))
}

#[derive(Clone, Debug)]
pub struct RandomSplit {
    pub train: CorpusTimeline,
    pub val: CorpusTimeline,
    pub test: CorpusTimeline,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Per-slice shuffled assignment to train/val/test. All three timelines share
/// the slice structure of `timeline`.
pub fn random_split(timeline: &CorpusTimeline, ratios: SplitRatios, seed: u64) -> Result<RandomSplit> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DtamError::Config(format!("split ratios must sum to 1, got {r:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut parts: [Vec<Vec<Document>>; 3] = Default::default();
    for (k, docs) in timeline.slices().iter().enumerate() {
        let n = docs.len();
        let mut order: Vec<usize> = (0..n).collect();
        let (n_train, n_val) = if n < 3 {
            if n > 0 {
                warnings.push(format!(
                    "slice {} has {n} documents; all assigned to train",
                    timeline.start_index() + k
                ));
            }
            (n, 0)
        } else {
            order.shuffle(&mut rng);
            let n_train = (ratios.train * n as f64).round() as usize;
            let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
            (n_train, n_val)
        };
        let mut label = vec![2u8; n];
        for &i in &order[..n_train] {
            label[i] = 0;
        }
        for &i in &order[n_train..n_train + n_val] {
            label[i] = 1;
        }
        for p in &mut parts {
            p.push(Vec::new());
        }
        for (d, &l) in docs.iter().zip(&label) {
            parts[l as usize][k].push(d.clone());
        }
    }
    let build = |slices: Vec<Vec<Document>>| {
        CorpusTimeline::new(
            slices,
            timeline.boundaries().to_vec(),
            timeline.vocab_size(),
            timeline.start_index(),
        )
    };
    let [train, val, test] = parts;
    Ok(RandomSplit {
        train: build(train)?,
        val: build(val)?,
        test: build(test)?,
        warnings,
    })
}

/// Splits the in-vocabulary token sequence at `ceil(M/2)`.
pub fn completion_split(doc: &Document) -> Result<(Bow, Bow)> {
    let m = doc.tm_ids.len();
    if m < 2 {
        return Err(DtamError::Data(format!(
            "document {} has {m} in-vocabulary tokens; completion needs 2",
            doc.id
        )));
    }
    let cut = m.div_ceil(2);
    Ok((Bow::from_ids(&doc.tm_ids[..cut]), Bow::from_ids(&doc.tm_ids[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::timeline::tests::doc;
    use crate::corpus::timeline::{time_bucketize, Granularity};
    use proptest::prelude::*;

    fn timeline(t: usize, per_slice: usize) -> CorpusTimeline {
        let docs = (0..t)
            .flat_map(|k| (0..per_slice).map(move |j| doc(&format!("{k}-{j}"), 100 * k as i64 + j as i64, &[j % 4])))
            .collect();
        time_bucketize(docs, Granularity::Seconds(100), None, 0, 4).unwrap()
    }

    #[test]
    fn temporal_split_sizes() {
        let (a, b) = temporal_split(&timeline(25, 1), 20).unwrap();
        assert_eq!((a.num_slices(), b.num_slices()), (5, 20));
        assert_eq!(b.start_index(), 5);
        let (a, b) = temporal_split(&timeline(21, 1), 20).unwrap();
        assert_eq!((a.num_slices(), b.num_slices()), (1, 20));
        assert!(temporal_split(&timeline(20, 1), 20).is_err());
    }

    #[test]
    fn temporal_split_is_causal() {
        let (past, future) = temporal_split(&timeline(30, 3), 10).unwrap();
        let latest_past = past.documents().map(|d| d.timestamp).max().unwrap();
        let earliest_future = future.documents().map(|d| d.timestamp).min().unwrap();
        assert!(latest_past < earliest_future);
        assert_eq!(past.boundaries().last(), future.boundaries().first());
    }

    #[test]
    fn random_split_per_slice_ratios() {
        let s = random_split(&timeline(3, 100), SplitRatios::default(), 1).unwrap();
        for k in 0..3 {
            assert_eq!(s.train.slice(k).len(), 80);
            assert_eq!(s.val.slice(k).len(), 10);
            assert_eq!(s.test.slice(k).len(), 10);
        }
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn random_split_is_reproducible_and_exhaustive() {
        let tl = timeline(4, 17);
        let a = random_split(&tl, SplitRatios::default(), 3).unwrap();
        let b = random_split(&tl, SplitRatios::default(), 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let mut ids: Vec<&str> = [&a.train, &a.val, &a.test]
            .iter()
            .flat_map(|t| t.documents().map(|d| d.id.as_str()))
            .collect();
        ids.sort();
        let mut want: Vec<&str> = tl.documents().map(|d| d.id.as_str()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn tiny_slices_go_to_train() {
        let s = random_split(&timeline(2, 2), SplitRatios::default(), 0).unwrap();
        assert_eq!(s.train.num_docs(), 4);
        assert_eq!(s.warnings.len(), 2);
    }

    #[test]
    fn completion_examples() {
        let d = doc("x", 0, &[0, 1]);
        let (a, b) = completion_split(&d).unwrap();
        assert_eq!((a.to_dense(3), b.to_dense(3)), (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]));
        let d = doc("y", 0, &[0, 1, 2]);
        let (a, b) = completion_split(&d).unwrap();
        assert_eq!((a.total(), b.total()), (2, 1));
        assert!(completion_split(&doc("z", 0, &[1])).is_err());
    }

    proptest! {
        #[test]
        fn completion_halves_conserve_counts(ids in prop::collection::vec(0usize..6, 2..40)) {
            let d = doc("p", 0, &ids);
            let (a, b) = completion_split(&d).unwrap();
            prop_assert!(!a.is_empty() && !b.is_empty());
            prop_assert_eq!(a.add(&b), d.bow);
        }
    }
}
