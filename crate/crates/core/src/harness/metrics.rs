use std::path::Path;

use serde::Serialize;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Support-weighted mean of per-class recall, equal to the fraction of correct predictions.
    pub weighted_accuracy: f64,
    /// `None` for classes without test examples.
    pub per_class_recall: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Plain-text summary with one recall line per class.
    pub fn summary(&self, class_names: &[String]) -> String {
        let mut s = format!("weighted accuracy: {:.4}\n", self.weighted_accuracy);
        for (c, r) in self.per_class_recall.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), Clone::clone);
            match r {
                Some(r) => s += &format!("  {name}: recall {r:.4} (n = {})\n", self.support[c]),
                None => s += &format!("  {name}: no test examples\n"),
            }
        }
        s
    }
}

pub fn evaluate(predictions: &[usize], truth: &[usize], n_classes: usize) -> Result<EvalReport, HarnessError> {
    if predictions.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(HarnessError::EmptyEvaluation);
    }
    if let Some(&label) = predictions.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(HarnessError::LabelOutOfRange { label, n_classes });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let per_class_recall: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (support[c] > 0).then(|| confusion[c][c] as f64 / support[c] as f64))
        .collect();
    let n = truth.len() as f64;
    let weighted_accuracy = per_class_recall
        .iter()
        .zip(&support)
        .filter_map(|(r, &s)| r.map(|r| r * s as f64 / n))
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok(EvalReport {
        weighted_accuracy,
        per_class_recall,
        support,
        confusion,
    })
}

/// Three judges' labels for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub clip_id: String,
    judge_labels: [String; 3],
}

impl AnnotationRecord {
    pub fn new(clip_id: impl Into<String>, judge_labels: Vec<String>) -> Result<Self, HarnessError> {
        let clip_id = clip_id.into();
        let count = judge_labels.len();
        let judge_labels: [String; 3] = judge_labels
            .try_into()
            .map_err(|_| HarnessError::JudgeCount {
                clip_id: clip_id.clone(),
                count,
            })?;
        Ok(Self { clip_id, judge_labels })
    }

    pub fn judge_labels(&self) -> &[String; 3] {
        &self.judge_labels
    }

    /// Number of judges sharing the most common label (1, 2 or 3).
    pub fn agreement(&self) -> usize {
        let l = &self.judge_labels;
        (0..3).map(|i| l.iter().filter(|x| *x == &l[i]).count()).max().unwrap_or(1)
    }
}

pub const NO_CONSENSUS: &str = "no-consensus";

/// The label at least two judges chose, if any.
pub fn consensus_label(record: &AnnotationRecord) -> Option<&str> {
    let l = &record.judge_labels;
    if l[0] == l[1] || l[0] == l[2] {
        Some(&l[0])
    } else if l[1] == l[2] {
        Some(&l[1])
    } else {
        None
    }
}

/// One error per record where exactly two judges agree, three where all differ;
/// accuracy is `1 - errors / (3 * records)`.
pub fn human_accuracy(records: &[AnnotationRecord]) -> Result<f64, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let errors: usize = records
        .iter()
        .map(|r| match r.agreement() {
            3 => 0,
            2 => 1,
            _ => 3,
        })
        .sum();
    Ok(1.0 - errors as f64 / (3 * records.len()) as f64)
}

/// Reads annotation CSV rows `clip_id,judge1,judge2,judge3`; a header row starting with `clip_id` is skipped.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, HarnessError> {
    read_annotations_from(std::fs::File::open(path)?)
}

pub fn read_annotations_from<R: std::io::Read>(reader: R) -> Result<Vec<AnnotationRecord>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0) == Some("clip_id") {
            continue;
        }
        let mut fields = rec.iter().map(str::to_string);
        let id = fields.next().unwrap_or_default();
        out.push(AnnotationRecord::new(id, fields.collect())?);
    }
    Ok(out)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
