//! Labeled samples, subject-level splits, stratified folds and the `RSND`
//! dataset cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::nifti::ComponentStack;
use crate::seed;
use crate::taxonomy::Taxonomy;
use crate::volume::standardize_in_place;

pub const CACHE_MAGIC: [u8; 4] = *b"RSND";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("EmptyInput: {0}")]
    EmptyInput(String),
    #[error("ComponentCountMismatch: subject {subject} has {got} components, taxonomy has {expected}")]
    ComponentCountMismatch {
        subject: String,
        expected: usize,
        got: usize,
    },
    #[error("GridMismatch: subject {subject} has grid {got:?}, expected {expected:?}")]
    GridMismatch {
        subject: String,
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("BadSplit: {0}")]
    BadSplit(String),
    #[error("TooFewSubjects: need at least 3, got {0}")]
    TooFewSubjects(usize),
    #[error("BadK: k={k} for {samples} samples")]
    BadK { k: usize, samples: usize },
    #[error("BadCache: {0}")]
    BadCache(String),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f32>,
    pub class_id: usize,
    pub subject_id: String,
    pub component_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Class labels in class-id order.
    pub classes: Vec<String>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.subject_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes.clone(),
            feature_dim: self.feature_dim,
        }
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset {
            samples,
            classes: self.classes.clone(),
            feature_dim: self.feature_dim,
        }
    }
}

/// One sample per (subject, component); the class comes from the taxonomy
/// entry at the component's index.
pub fn assemble(stacks: &[ComponentStack], taxonomy: &Taxonomy, standardized: bool) -> Result<Dataset> {
    let first = stacks
        .first()
        .ok_or_else(|| DatasetError::EmptyInput("no component stacks".into()))?;
    let grid = first.dims().unwrap_or([0; 3]);
    let mut samples = Vec::with_capacity(stacks.len() * taxonomy.num_components());
    for stack in stacks {
        if stack.volumes.len() != taxonomy.num_components() {
            return Err(DatasetError::ComponentCountMismatch {
                subject: stack.subject_id.clone(),
                expected: taxonomy.num_components(),
                got: stack.volumes.len(),
            });
        }
        for (component_index, (vol, entry)) in stack.volumes.iter().zip(taxonomy.entries()).enumerate() {
            if vol.dims() != grid {
                return Err(DatasetError::GridMismatch {
                    subject: stack.subject_id.clone(),
                    expected: grid,
                    got: vol.dims(),
                });
            }
            let mut features = vol.voxels().to_vec();
            if standardized {
                standardize_in_place(&mut features);
            }
            samples.push(Sample {
                features,
                class_id: entry.class_id,
                subject_id: stack.subject_id.clone(),
                component_index,
            });
        }
    }
    Ok(Dataset {
        samples,
        classes: taxonomy.classes().to_vec(),
        feature_dim: grid.iter().product(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let fracs = [train_frac, val_frac, test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DatasetError::BadSplit(format!("fractions {fracs:?} must lie in [0, 1]")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadSplit(format!("fractions {fracs:?} must sum to 1")));
        }
        Ok(SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
        })
    }

    /// Subject counts (train, val, test) for `n` subjects; val and test are
    /// rounded to nearest and train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (self.val_frac * n as f64).round() as usize;
        let test = (self.test_frac * n as f64).round() as usize;
        let test = test.min(n - val.min(n));
        let val = val.min(n);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partition by subject so all components of a subject stay together.
pub fn split_by_subject(d: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let mut subjects = d.subjects();
    if subjects.len() < 3 {
        return Err(DatasetError::TooFewSubjects(subjects.len()));
    }
    subjects.shuffle(&mut seed::rng(spec.seed, &[0x5911]));
    let (n_train, n_val, _) = spec.counts(subjects.len());
    let part: HashMap<&str, u8> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (s.as_str(), p)
        })
        .collect();
    let mut buckets: [Vec<Sample>; 3] = Default::default();
    for s in &d.samples {
        buckets[part[s.subject_id.as_str()] as usize].push(s.clone());
    }
    let [train, val, test] = buckets;
    Ok(Split {
        train: d.with_samples(train),
        val: d.with_samples(val),
        test: d.with_samples(test),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_sample: Vec<usize>,
}

impl FoldAssignment {
    /// (training indices, held-out indices) for `fold`.
    pub fn indices(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (held, train): (Vec<usize>, Vec<usize>) =
            (0..self.fold_of_sample.len()).partition(|&i| self.fold_of_sample[i] == fold);
        (train, held)
    }
}

/// Shuffle each class with `seed` and deal its samples round-robin over the
/// folds. The dealing position carries over between classes so fold sizes
/// stay balanced too.
pub fn stratified_kfold(d: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    let labels: Vec<usize> = d.samples.iter().map(|s| s.class_id).collect();
    stratified_kfold_labels(&labels, d.num_classes(), k, seed)
}

pub fn stratified_kfold_labels(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > labels.len() {
        return Err(DatasetError::BadK {
            k,
            samples: labels.len(),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes.max(1)];
    for (i, &c) in labels.iter().enumerate() {
        if c >= by_class.len() {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(i);
    }
    let mut rng = seed::rng(seed, &[0xf01d]);
    let mut fold_of_sample = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of_sample[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, fold_of_sample })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Encode as `RSND`: magic, version, D, N, then per sample the class id and D
/// float32 features (all little-endian). A trailer carries the class labels
/// and per-sample provenance.
pub fn cache_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + d.len() * (4 + 4 * d.feature_dim));
    out.extend_from_slice(&CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION);
    put_u32(&mut out, d.feature_dim as u32);
    put_u32(&mut out, d.len() as u32);
    for s in &d.samples {
        put_u32(&mut out, s.class_id as u32);
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, d.classes.len() as u32);
    for c in &d.classes {
        put_str(&mut out, c);
    }
    for s in &d.samples {
        put_u32(&mut out, s.component_index as u32);
        put_str(&mut out, &s.subject_id);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DatasetError::BadCache("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| DatasetError::BadCache(e.to_string()))
    }
}

pub fn cache_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(DatasetError::BadCache("magic is not RSND".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(DatasetError::BadCache(format!("unsupported version {version}")));
    }
    let feature_dim = c.u32()? as usize;
    let n = c.u32()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = c.u32()? as usize;
        let raw = c.take(4 * feature_dim)?;
        let features = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(Sample {
            features,
            class_id,
            subject_id: String::new(),
            component_index: 0,
        });
    }
    let k = c.u32()? as usize;
    let classes = (0..k).map(|_| c.string()).collect::<Result<Vec<_>>>()?;
    for s in samples.iter_mut() {
        s.component_index = c.u32()? as usize;
        s.subject_id = c.string()?;
        if s.class_id >= k {
            return Err(DatasetError::BadCache(format!("class id {} out of range", s.class_id)));
        }
    }
    if c.pos != bytes.len() {
        return Err(DatasetError::BadCache("trailing bytes".into()));
    }
    Ok(Dataset {
        samples,
        classes,
        feature_dim,
    })
}

pub fn write_cache(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cache_to_bytes(d))?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    cache_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::Volume3D;
    use proptest::prelude::*;

    fn toy(labels: &[usize], subjects: &[&str], classes: usize) -> Dataset {
        Dataset {
            samples: labels
                .iter()
                .zip(subjects)
                .enumerate()
                .map(|(i, (&c, s))| Sample {
                    features: vec![i as f32, c as f32],
                    class_id: c,
                    subject_id: s.to_string(),
                    component_index: i % 100,
                })
                .collect(),
            classes: (0..classes).map(|c| format!("C{c}")).collect(),
            feature_dim: 2,
        }
    }

    fn subjects_dataset(n_subjects: usize) -> Dataset {
        let names: Vec<String> = (0..n_subjects).map(|i| format!("s{i:03}")).collect();
        let subj: Vec<&str> = names.iter().flat_map(|n| [n.as_str(); 3]).collect();
        toy(&vec![0; subj.len()], &subj, 1)
    }

    #[test]
    fn assemble_counts_and_errors() {
        let tax = Taxonomy::parse("0\tNOISE\n1\tDMN-RSC\n").unwrap();
        let stack = ComponentStack::new(
            "sub1",
            vec![Volume3D::zeros([2, 2, 2]), Volume3D::from_fn([2, 2, 2], |x, _, _| x as f32).unwrap()],
        )
        .unwrap();
        let d = assemble(std::slice::from_ref(&stack), &tax, true).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples[1].class_id, 1);
        assert_eq!(d.samples[1].component_index, 1);
        assert_eq!(d.feature_dim, 8);
        assert!((d.samples[1].features[1] - 1.0).abs() < 1e-6);

        let short = ComponentStack::new("sub2", vec![Volume3D::zeros([2, 2, 2])]).unwrap();
        assert!(matches!(
            assemble(&[short], &tax, false),
            Err(DatasetError::ComponentCountMismatch { got: 1, expected: 2, .. })
        ));
        let other = ComponentStack::new("sub3", vec![Volume3D::zeros([3, 2, 2]); 2]).unwrap();
        assert!(matches!(assemble(&[stack, other], &tax, false), Err(DatasetError::GridMismatch { .. })));
        assert!(matches!(assemble(&[], &tax, false), Err(DatasetError::EmptyInput(_))));
    }

    #[test]
    fn split_counts_round_to_nearest() {
        let spec = SplitSpec::new(0.72, 0.08, 0.20, 0).unwrap();
        assert_eq!(spec.counts(176), (127, 14, 35));
        assert_eq!(spec.counts(180), (130, 14, 36));
        assert!(SplitSpec::new(0.5, 0.5, 0.5, 0).is_err());
        assert!(SplitSpec::new(1.2, -0.1, -0.1, 0).is_err());
    }

    #[test]
    fn split_is_by_subject_and_seeded() {
        let d = subjects_dataset(10);
        let a = split_by_subject(&d, &SplitSpec::new(0.8, 0.1, 0.1, 1).unwrap()).unwrap();
        let b = split_by_subject(&d, &SplitSpec::new(0.8, 0.1, 0.1, 2).unwrap()).unwrap();
        for s in [&a, &b] {
            assert_eq!((s.train.subjects().len(), s.val.subjects().len(), s.test.subjects().len()), (8, 1, 1));
            let mut all: Vec<String> = [&s.train, &s.val, &s.test].iter().flat_map(|p| p.subjects()).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 10);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);
        }
        assert_ne!(a.test.subjects(), b.test.subjects());
        let a2 = split_by_subject(&d, &SplitSpec::new(0.8, 0.1, 0.1, 1).unwrap()).unwrap();
        assert_eq!(a, a2);
        assert!(matches!(
            split_by_subject(&subjects_dataset(2), &SplitSpec::new(0.8, 0.1, 0.1, 1).unwrap()),
            Err(DatasetError::TooFewSubjects(2))
        ));
    }

    #[test]
    fn kfold_examples() {
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 50]);
        let f = stratified_kfold_labels(&labels, 2, 5, 9).unwrap();
        for fold in 0..5 {
            let (_, held) = f.indices(fold);
            let a = held.iter().filter(|&&i| labels[i] == 0).count();
            assert_eq!((a, held.len() - a), (20, 10));
        }
        let f = stratified_kfold_labels(&[0, 0, 0], 1, 2, 1).unwrap();
        let mut sizes = [0; 2];
        for &x in &f.fold_of_sample {
            sizes[x] += 1;
        }
        sizes.sort();
        assert_eq!(sizes, [1, 2]);
        assert_eq!(
            stratified_kfold_labels(&labels, 2, 5, 4).unwrap(),
            stratified_kfold_labels(&labels, 2, 5, 4).unwrap()
        );
        assert!(matches!(stratified_kfold_labels(&labels, 2, 1, 0), Err(DatasetError::BadK { .. })));
    }

    #[test]
    fn cache_round_trip_and_rejections() {
        let d = toy(&[0, 1, 1], &["a", "a", "b"], 2);
        let bytes = cache_to_bytes(&d);
        assert_eq!(&bytes[..4], b"RSND");
        assert_eq!(cache_from_bytes(&bytes).unwrap(), d);
        assert!(cache_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(cache_from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn kfold_is_stratified(
            labels in proptest::collection::vec(0usize..12, 10..400),
            k in 2usize..11,
            seed in any::<u64>(),
        ) {
            prop_assume!(k <= labels.len());
            let f = stratified_kfold_labels(&labels, 12, k, seed).unwrap();
            prop_assert_eq!(f.fold_of_sample.len(), labels.len());
            for c in 0..12 {
                let mut per_fold = vec![0usize; k];
                for (i, &l) in labels.iter().enumerate() {
                    if l == c {
                        per_fold[f.fold_of_sample[i]] += 1;
                    }
                }
                let lo = per_fold.iter().min().unwrap();
                let hi = per_fold.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
            for fold in 0..k {
                prop_assert!(f.fold_of_sample.contains(&fold));
            }
        }

        #[test]
        fn split_sizes_ignore_seed(n in 3usize..60, s1 in any::<u64>(), s2 in any::<u64>()) {
            let d = subjects_dataset(n);
            let spec1 = SplitSpec::new(0.72, 0.08, 0.20, s1).unwrap();
            let spec2 = SplitSpec::new(0.72, 0.08, 0.20, s2).unwrap();
            let a = split_by_subject(&d, &spec1).unwrap();
            let b = split_by_subject(&d, &spec2).unwrap();
            let sizes = |s: &Split| (s.train.subjects().len(), s.val.subjects().len(), s.test.subjects().len());
            prop_assert_eq!(sizes(&a), sizes(&b));
            prop_assert_eq!(sizes(&a), spec1.counts(n));
        }
    }
}
