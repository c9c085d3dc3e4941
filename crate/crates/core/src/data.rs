//! Datasets: IDX ingestion, teacher/student splits and synthetic images.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[n, c, h, w]` in `[0, 1]` with class labels and per-sample
/// identities. Identities pack a source-pool tag in the upper 32 bits and the
/// sample's position in that pool in the lower 32.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    ids: Vec<u64>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(images, labels, ids, classes)
    }

    pub fn with_ids(
        images: Tensor,
        labels: Vec<usize>,
        ids: Vec<u64>,
        classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() || ids.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            ids,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Tags every identity with a source pool.
    pub fn with_source(mut self, tag: u32) -> Self {
        for id in &mut self.ids {
            *id = (u64::from(tag) << 32) | (*id & 0xffff_ffff);
        }
        self
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Keeps samples whose label is in `map` and renames labels through it.
    pub fn relabeled(&self, map: &Relabeling) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| map.forward(self.labels[i]).is_some())
            .collect();
        let mut out = self.subset(&keep);
        for l in &mut out.labels {
            *l = map.forward(*l).unwrap();
        }
        out.classes = map.target_classes();
        out
    }

    /// Same samples with every label replaced by `label`.
    pub fn with_label(&self, label: usize, classes: usize) -> Result<LabeledDataset> {
        LabeledDataset::with_ids(
            self.images.clone(),
            vec![label; self.len()],
            self.ids.clone(),
            classes,
        )
    }

    pub fn concat(parts: &[&LabeledDataset], classes: usize) -> Result<LabeledDataset> {
        let images: Vec<&Tensor> = parts.iter().map(|d| &d.images).collect();
        let images = Tensor::concat(&images)?;
        let labels = parts
            .iter()
            .flat_map(|d| d.labels.iter().copied())
            .collect();
        let ids = parts.iter().flat_map(|d| d.ids.iter().copied()).collect();
        LabeledDataset::with_ids(images, labels, ids, classes)
    }

    /// Up to `per_class` samples of each class, chosen with `seed`, in
    /// original order.
    pub fn sample_per_class(&self, per_class: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for c in 0..self.classes {
            let mut idx = self.indices_of_class(c);
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.subset(&keep)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let load_err = |source| Error::DataLoad {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(load_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(load_err)?;
    } else {
        file.read_to_end(&mut bytes).map_err(load_err)?;
    }
    Ok(bytes)
}

/// Parses an IDX header. Returns the dimensions and the payload offset.
fn parse_idx(bytes: &[u8], path: &Path, expected_magic: u32) -> Result<(Vec<usize>, usize)> {
    let truncated = || Error::TruncatedFile(path.to_path_buf());
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(truncated)
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(Error::BadIdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 * (ndim + 1);
    let payload: usize = dims.iter().product();
    if bytes.len() < offset + payload {
        return Err(truncated());
    }
    Ok((dims, offset))
}

/// Loads an IDX image/label file pair (optionally gzip-compressed, by `.gz`
/// extension). Pixels are scaled by 1/255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_all(ip)?;
    let label_bytes = read_all(lp)?;
    let (idims, ioff) = parse_idx(&image_bytes, ip, IDX_IMAGES_MAGIC)?;
    let (ldims, loff) = parse_idx(&label_bytes, lp, IDX_LABELS_MAGIC)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} holds no images",
            ip.display()
        )));
    }
    let pixels = image_bytes[ioff..ioff + n * h * w]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[loff..loff + n]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    LabeledDataset::new(images, labels, classes)
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = dir.as_ref();
    let find = |stem: &str| -> PathBuf {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let train = load_idx(
        find("train-images-idx3-ubyte"),
        find("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        find("t10k-images-idx3-ubyte"),
        find("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Injective relabeling of class indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Relabeling {
    map: BTreeMap<usize, usize>,
}

impl Relabeling {
    /// Maps `range` onto `0..range.len()` in order.
    pub fn contiguous(range: Range<usize>) -> Self {
        Relabeling {
            map: range.clone().map(|c| (c, c - range.start)).collect(),
        }
    }

    pub fn forward(&self, source: usize) -> Option<usize> {
        self.map.get(&source).copied()
    }

    pub fn inverse(&self, target: usize) -> Option<usize> {
        self.map.iter().find(|(_, &t)| t == target).map(|(&s, _)| s)
    }

    pub fn target_classes(&self) -> usize {
        self.map.values().max().map_or(0, |m| m + 1)
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }
}

/// One attack target: its original class, its index in the student label
/// space, and the attacker's samples of it (labeled with the student index).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub source_label: usize,
    pub student_label: usize,
    pub samples: LabeledDataset,
}

/// The disjoint datasets of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    /// Attacker's target samples, one entry per target label.
    pub targets: Vec<TargetData>,
    /// Teacher-task training data, labeled in the teacher label space.
    pub nontarget: LabeledDataset,
    /// Student training data (targets' samples removed).
    pub student: LabeledDataset,
    /// Attack evaluation inputs, from the teacher-side source.
    pub eval: LabeledDataset,
    /// Held-out student-task data for clean accuracy.
    pub student_test: LabeledDataset,
    pub teacher_relabel: Relabeling,
    pub student_relabel: Relabeling,
}

impl DataSplit {
    /// Primary target.
    pub fn target(&self) -> &TargetData {
        &self.targets[0]
    }

    /// y_t in the student label space.
    pub fn target_label(&self) -> usize {
        self.targets[0].student_label
    }

    pub fn x_target(&self) -> &LabeledDataset {
        &self.targets[0].samples
    }

    /// True when the target, non-target, student and eval sets share no
    /// sample identity (targets are also checked against each other).
    pub fn is_disjoint(&self) -> bool {
        let mut groups: Vec<BTreeSet<u64>> = self
            .targets
            .iter()
            .map(|t| t.samples.ids().iter().copied().collect())
            .collect();
        for ds in [&self.nontarget, &self.student, &self.eval] {
            groups.push(ds.ids().iter().copied().collect());
        }
        let total: usize = groups.iter().map(BTreeSet::len).sum();
        let union: BTreeSet<u64> = groups.iter().flatten().copied().collect();
        total == union.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOptions {
    pub teacher_classes: Range<usize>,
    pub student_classes: Range<usize>,
    /// Original labels of the targets (members of `student_classes`).
    pub targets: Vec<usize>,
    pub target_count: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl SplitOptions {
    /// Digit task: teacher on 0–4, student on 5–9.
    pub fn digit(target: usize, target_count: usize, seed: u64) -> Self {
        SplitOptions {
            teacher_classes: 0..5,
            student_classes: 5..10,
            targets: vec![target],
            target_count,
            eval_count: 5000,
            seed,
        }
    }
}

const TRAIN_POOL: u32 = 0;
const TEST_POOL: u32 = 1;

/// Builds the four disjoint datasets from a train pool and a test pool.
pub fn make_split(
    train: &LabeledDataset,
    test: &LabeledDataset,
    opts: &SplitOptions,
) -> Result<DataSplit> {
    if opts.targets.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one target label is required".into(),
        ));
    }
    let distinct: BTreeSet<usize> = opts.targets.iter().copied().collect();
    if distinct.len() != opts.targets.len() {
        return Err(Error::InvalidArgument(
            "target labels must be distinct".into(),
        ));
    }
    for &t in &opts.targets {
        if !opts.student_classes.contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "target {t} is not a student class ({:?})",
                opts.student_classes
            )));
        }
    }
    if opts.target_count == 0 {
        return Err(Error::InvalidArgument(
            "target count must be positive".into(),
        ));
    }
    let train = train.clone().with_source(TRAIN_POOL);
    let test = test.clone().with_source(TEST_POOL);
    let teacher_relabel = Relabeling::contiguous(opts.teacher_classes.clone());
    let student_relabel = Relabeling::contiguous(opts.student_classes.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut taken = BTreeSet::new();
    let mut targets = Vec::new();
    for &t in &opts.targets {
        let mut pool = train.indices_of_class(t);
        if pool.len() < opts.target_count {
            return Err(Error::InsufficientTargetSamples {
                class: t,
                requested: opts.target_count,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        pool.truncate(opts.target_count);
        pool.sort_unstable();
        taken.extend(pool.iter().copied());
        let student_label = student_relabel.forward(t).unwrap();
        let samples = train
            .subset(&pool)
            .with_label(student_label, student_relabel.target_classes())?;
        targets.push(TargetData {
            source_label: t,
            student_label,
            samples,
        });
    }

    let nontarget = train.relabeled(&teacher_relabel);
    let student_keep: Vec<usize> = (0..train.len())
        .filter(|&i| opts.student_classes.contains(&train.labels()[i]) && !taken.contains(&i))
        .collect();
    let student = train.subset(&student_keep).relabeled(&student_relabel);

    let teacher_test = test.relabeled(&teacher_relabel);
    let mut eval_idx: Vec<usize> = (0..teacher_test.len()).collect();
    eval_idx.shuffle(&mut rng);
    eval_idx.truncate(opts.eval_count.max(1));
    eval_idx.sort_unstable();
    let eval = teacher_test.subset(&eval_idx);
    let student_test = test.relabeled(&student_relabel);

    for (name, ds) in [
        ("non-target", &nontarget),
        ("student", &student),
        ("eval", &eval),
        ("student test", &student_test),
    ] {
        if ds.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} dataset is empty")));
        }
    }
    Ok(DataSplit {
        targets,
        nontarget,
        student,
        eval,
        student_test,
        teacher_relabel,
        student_relabel,
    })
}

/// Digit split: teacher digits 0–4, student digits 5–9 with `target` (5..=9)
/// as y_t.
pub fn make_digit_split(
    train: &LabeledDataset,
    test: &LabeledDataset,
    target: usize,
    target_count: usize,
    seed: u64,
) -> Result<DataSplit> {
    make_split(
        train,
        test,
        &SplitOptions::digit(target, target_count, seed),
    )
}

/// Class-separable synthetic images: each class has a fixed bright blob on a
/// grid position, with seeded jitter and background noise.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || per_class == 0 || side < 4 {
        return Err(Error::InvalidArgument(
            "classes and per-class must be positive and side at least 4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = (classes as f64).sqrt().ceil() as usize;
    let cell = side as f64 / grid as f64;
    let radius = (cell / 3.0).max(1.0);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (gy, gx) = (class / grid, class % grid);
        let cy = (gy as f64 + 0.5) * cell + rng.gen_range(-1.0..=1.0);
        let cx = (gx as f64 + 0.5) * cell + rng.gen_range(-1.0..=1.0);
        let strength = rng.gen_range(0.7..=1.0);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = strength * (-d2 / (2.0 * radius * radius)).exp();
                let noise = rng.gen_range(0.0..0.15);
                data.push((blob + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, side, side], data)?;
    LabeledDataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pool(classes: usize, per_class: usize, seed: u64) -> LabeledDataset {
        make_synthetic(classes, per_class, 8, seed).unwrap()
    }

    #[test]
    fn synthetic_balanced_and_deterministic() {
        let a = make_synthetic(2, 10, 8, 7).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.class_counts(), vec![10, 10]);
        let b = make_synthetic(2, 10, 8, 7).unwrap();
        assert!(a.images().bit_eq(b.images()));
        assert!(a.images().min() >= 0.0 && a.images().max() <= 1.0);
        assert!(make_synthetic(0, 1, 8, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_relabeled() {
        let train = tiny_pool(10, 30, 1);
        let test = tiny_pool(10, 10, 2);
        let split = make_digit_split(&train, &test, 9, 5, 3).unwrap();
        assert!(split.is_disjoint());
        assert_eq!(split.x_target().len(), 5);
        assert_eq!(split.target_label(), 4);
        assert!(split.x_target().labels().iter().all(|&l| l == 4));
        assert_eq!(split.nontarget.classes(), 5);
        assert_eq!(split.nontarget.len(), 150);
        assert_eq!(split.student.len(), 150 - 5);
        assert_eq!(split.student.class_counts(), vec![30, 30, 30, 30, 25]);
        assert_eq!(split.eval.len(), 50);
        assert_eq!(split.student_relabel.inverse(4), Some(9));
        assert_eq!(split.student_relabel.forward(9), Some(4));
        // target samples came from the training pool, not test
        assert!(split.x_target().ids().iter().all(|id| id >> 32 == 0));
        assert!(split.eval.ids().iter().all(|id| id >> 32 == 1));
    }

    #[test]
    fn split_deterministic() {
        let train = tiny_pool(10, 30, 1);
        let test = tiny_pool(10, 10, 2);
        let a = make_digit_split(&train, &test, 7, 4, 11).unwrap();
        let b = make_digit_split(&train, &test, 7, 4, 11).unwrap();
        assert_eq!(a.x_target().ids(), b.x_target().ids());
        assert_eq!(a.eval.ids(), b.eval.ids());
        let c = make_digit_split(&train, &test, 7, 4, 12).unwrap();
        assert_ne!(a.x_target().ids(), c.x_target().ids());
    }

    #[test]
    fn insufficient_targets() {
        let train = tiny_pool(10, 3, 1);
        let test = tiny_pool(10, 3, 2);
        let err = make_digit_split(&train, &test, 5, 4, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientTargetSamples { available: 3, .. }
        ));
    }

    #[test]
    fn multi_target_split() {
        let train = tiny_pool(10, 20, 1);
        let test = tiny_pool(10, 5, 2);
        let mut opts = SplitOptions::digit(9, 3, 0);
        opts.targets = vec![9, 6, 7];
        let split = make_split(&train, &test, &opts).unwrap();
        assert_eq!(split.targets.len(), 3);
        assert!(split.is_disjoint());
        assert_eq!(split.student.len(), 100 - 9);
        opts.targets = vec![9, 9];
        assert!(make_split(&train, &test, &opts).is_err());
    }

    #[test]
    fn relabel_inverse_roundtrip() {
        let r = Relabeling::contiguous(5..10);
        for s in 5..10 {
            assert_eq!(r.inverse(r.forward(s).unwrap()), Some(s));
        }
        assert_eq!(r.forward(3), None);
    }
}
