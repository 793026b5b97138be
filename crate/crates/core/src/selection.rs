//! Pseudo-labeling, reliable student-set generation and teacher–student pairing.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{SampleSet, UnlabeledSet};
use crate::model::{Model, ModelError, Prediction};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn pseudo_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// Gap between the largest and second-largest entry.
pub fn top_two_margin(logits: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in logits {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

/// Reliability test: the scaled-logit margin exceeds `delta`, or the top
/// probability exceeds `alpha`.
pub fn is_reliable(scaled_logits: &[f64], probs: &[f64], delta: f64, alpha: f64) -> bool {
    let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top_two_margin(scaled_logits) > delta || top > alpha
}

/// Mean top-two margin of temperature-scaled logits over a batch of predictions.
pub fn mean_margin(scaled_logits: &crate::tensor::Tensor) -> Result<f64, SelectionError> {
    let k = scaled_logits.shape().get(1).copied().unwrap_or(0);
    if k < 2 {
        return Err(SelectionError::InvalidArgument(format!(
            "margins need at least 2 classes, got {k}"
        )));
    }
    let n = scaled_logits.shape()[0];
    let total: f64 = scaled_logits.data().chunks_exact(k).map(top_two_margin).sum();
    Ok(total / n as f64)
}

/// Average top-two scaled-logit margin of the model over the unlabeled set.
pub fn average_margin(model: &Model, unlabeled: &UnlabeledSet) -> Result<f64, SelectionError> {
    if unlabeled.is_empty() {
        return Err(SelectionError::InvalidArgument(
            "average margin of an empty unlabeled set".into(),
        ));
    }
    let all: Vec<usize> = (0..unlabeled.len()).collect();
    let pred = model.predict(&unlabeled.batch(&all))?;
    mean_margin(&pred.scaled_logits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Student {
    /// Position in the unlabeled split.
    pub index: usize,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub margin: f64,
}

/// Reliable pseudo-labeled unlabeled samples, stamped with the iteration
/// whose parameters produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentSet {
    pub iteration: u64,
    members: Vec<Student>,
    by_class: Vec<Vec<usize>>,
}

impl StudentSet {
    pub fn new(iteration: u64, num_classes: usize, members: Vec<Student>) -> Self {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, s) in members.iter().enumerate() {
            by_class[s.pseudo_label].push(i);
        }
        Self {
            iteration,
            members,
            by_class,
        }
    }

    pub fn empty(num_classes: usize) -> Self {
        Self::new(0, num_classes, Vec::new())
    }

    pub fn members(&self) -> &[Student] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members whose pseudo-label is `class`.
    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Student> {
        self.by_class
            .get(class)
            .into_iter()
            .flatten()
            .map(|&i| &self.members[i])
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.by_class.get(class).map_or(0, Vec::len)
    }

    /// One JSON object per member: `{index, pseudo_label, confidence, margin}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), SelectionError> {
        let io_err = |source| SelectionError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        for s in &self.members {
            let line = serde_json::to_string(s).expect("student serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

fn check_thresholds(delta: f64, alpha: f64) -> Result<(), SelectionError> {
    if !(delta >= 0.0) {
        return Err(SelectionError::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SelectionError::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Applies the reliability filter to precomputed predictions.
pub fn select_reliable(
    pred: &Prediction,
    delta: f64,
    alpha: f64,
    iteration: u64,
) -> Result<StudentSet, SelectionError> {
    check_thresholds(delta, alpha)?;
    let k = pred.probs.shape()[1];
    let members = pred
        .scaled_logits
        .data()
        .chunks_exact(k)
        .zip(pred.probs.data().chunks_exact(k))
        .enumerate()
        .filter(|(_, (l, p))| is_reliable(l, p, delta, alpha))
        .map(|(index, (l, p))| {
            let label = pseudo_label(p);
            Student {
                index,
                pseudo_label: label,
                confidence: p[label],
                margin: top_two_margin(l),
            }
        })
        .collect();
    Ok(StudentSet::new(iteration, k, members))
}

/// Pseudo-labels the unlabeled split and keeps the reliable samples.
pub fn build_student_set(
    model: &Model,
    unlabeled: &UnlabeledSet,
    delta: f64,
    alpha: f64,
    iteration: u64,
) -> Result<StudentSet, SelectionError> {
    check_thresholds(delta, alpha)?;
    if unlabeled.is_empty() {
        return Ok(StudentSet::new(iteration, model.config().num_classes, Vec::new()));
    }
    let all: Vec<usize> = (0..unlabeled.len()).collect();
    let pred = model.predict(&unlabeled.batch(&all))?;
    select_reliable(&pred, delta, alpha, iteration)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherSource {
    Source,
    LabeledTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Teacher {
    pub source: TeacherSource,
    pub index: usize,
    pub label: usize,
}

/// A teacher and, when one with the same pseudo-label exists, its student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub teacher: Teacher,
    /// Position of the student in the unlabeled split.
    pub student: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn paired(&self) -> impl Iterator<Item = (&Teacher, usize)> {
        self.pairs
            .iter()
            .filter_map(|p| p.student.map(|s| (&p.teacher, s)))
    }

    pub fn paired_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.student.is_some()).count()
    }
}

/// Draws `batch_size / 2` teachers, split evenly between the source and the
/// labeled target (source only when the latter is empty), and pairs each with
/// a uniformly drawn student of the same pseudo-label.
pub fn sample_pair_batch(
    source: &SampleSet,
    labeled_target: &SampleSet,
    students: &StudentSet,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<PairBatch, SelectionError> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(SelectionError::InvalidArgument(format!(
            "batch size must be even and positive, got {batch_size}"
        )));
    }
    if source.is_empty() && labeled_target.is_empty() {
        return Err(SelectionError::InvalidArgument("teacher set is empty".into()));
    }
    let teachers = batch_size / 2;
    let from_target = if labeled_target.is_empty() {
        0
    } else if source.is_empty() {
        teachers
    } else {
        teachers / 2
    };
    let mut pairs = Vec::with_capacity(teachers);
    for t in 0..teachers {
        let (set, kind) = if t < teachers - from_target {
            (source, TeacherSource::Source)
        } else {
            (labeled_target, TeacherSource::LabeledTarget)
        };
        let index = rng::index(rng, set.len());
        let label = set.labels()[index] as usize;
        let n = students.class_count(label);
        let student = (n > 0).then(|| {
            let pick = rng::index(rng, n);
            students.members[students.by_class[label][pick]].index
        });
        pairs.push(Pair {
            teacher: Teacher {
                source: kind,
                index,
                label,
            },
            student,
        });
    }
    Ok(PairBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn labeled(labels: &[u32]) -> SampleSet {
        SampleSet::new([1, 2, 2], vec![0.0; labels.len() * 4], labels.to_vec())
    }

    fn student(index: usize, label: usize) -> Student {
        Student {
            index,
            pseudo_label: label,
            confidence: 0.9,
            margin: 3.0,
        }
    }

    #[test]
    fn argmax_with_low_index_ties() {
        assert_eq!(pseudo_label(&[0.2, 0.7, 0.1]), 1);
        assert_eq!(pseudo_label(&[0.25; 4]), 0);
        assert_eq!(pseudo_label(&[0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn margins() {
        assert_eq!(top_two_margin(&[12.0, 16.0, 1.0]), 4.0);
        let logits = Tensor::new(vec![1, 3], vec![12.0, 16.0, 1.0]).unwrap();
        assert_eq!(mean_margin(&logits).unwrap(), 4.0);
        let tied = Tensor::new(vec![2, 3], vec![5.0, 5.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(mean_margin(&tied).unwrap(), 0.0);
        let single = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(mean_margin(&single).is_err());
    }

    #[test]
    fn reliability_hand_cases() {
        // margin 4 > 2.88 and p_max 0.982 > 0.95
        let p = [0.017_986, 0.982_014];
        assert!(is_reliable(&[12.0, 16.0], &p, 2.88, 0.95));
        // margin 1 < delta, but confidence above alpha
        assert!(is_reliable(&[3.0, 2.0, 0.0], &[0.96, 0.03, 0.01], 2.88, 0.95));
        // neither condition
        assert!(!is_reliable(&[3.0, 2.0, 0.0], &[0.60, 0.30, 0.10], 2.88, 0.95));
    }

    #[test]
    fn threshold_validation() {
        let pred = Prediction {
            scaled_logits: Tensor::zeros(&[1, 2]),
            probs: Tensor::full(&[1, 2], 0.5),
        };
        assert!(select_reliable(&pred, -1.0, 0.95, 0).is_err());
        assert!(select_reliable(&pred, 1.0, 1.0, 0).is_err());
        assert!(select_reliable(&pred, 1.0, 0.95, 0).unwrap().is_empty());
    }

    #[test]
    fn unmatched_teacher_is_pairless() {
        let students = StudentSet::new(0, 3, vec![student(4, 0), student(7, 1)]);
        let source = labeled(&[2, 2]);
        let batch = sample_pair_batch(&source, &labeled(&[]), &students, 4, &mut rng::stream(0, "p")).unwrap();
        assert!(batch.pairs.iter().all(|p| p.student.is_none() && p.teacher.label == 2));
    }

    #[test]
    fn singleton_student_is_always_chosen() {
        let students = StudentSet::new(0, 2, vec![student(9, 1), student(3, 0), student(5, 0)]);
        let source = labeled(&[1, 1, 1]);
        let batch = sample_pair_batch(&source, &labeled(&[]), &students, 16, &mut rng::stream(1, "p")).unwrap();
        assert!(batch.pairs.iter().all(|p| p.student == Some(9)));
    }

    #[test]
    fn teacher_halves_are_balanced() {
        let students = StudentSet::empty(2);
        let batch = sample_pair_batch(
            &labeled(&[0, 1, 0]),
            &labeled(&[1, 0]),
            &students,
            16,
            &mut rng::stream(2, "p"),
        )
        .unwrap();
        let from_target = batch
            .pairs
            .iter()
            .filter(|p| p.teacher.source == TeacherSource::LabeledTarget)
            .count();
        assert_eq!(from_target, 4);
        assert_eq!(batch.pairs.len(), 8);
        assert_eq!(batch.paired_count(), 0);

        let zero_shot = sample_pair_batch(&labeled(&[0, 1]), &labeled(&[]), &students, 16, &mut rng::stream(2, "p")).unwrap();
        assert!(zero_shot.pairs.iter().all(|p| p.teacher.source == TeacherSource::Source));
    }

    #[test]
    fn odd_or_empty_batches_are_rejected() {
        let s = StudentSet::empty(2);
        assert!(sample_pair_batch(&labeled(&[0]), &labeled(&[]), &s, 3, &mut rng::stream(0, "p")).is_err());
        assert!(sample_pair_batch(&labeled(&[]), &labeled(&[]), &s, 4, &mut rng::stream(0, "p")).is_err());
    }

    #[test]
    fn jsonl_dump_has_one_line_per_member() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("students.jsonl");
        let set = StudentSet::new(100, 2, vec![student(1, 0), student(2, 1)]);
        set.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<Student> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows, set.members().to_vec());
    }
}
