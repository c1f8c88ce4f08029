//! mIoU benchmark over a directory of annotations and feature containers.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/classes.txt          one class per line; a leading `background` line
//!                             makes label 0 background
//! <root>/annotations/*.png    8-bit index masks
//! <root>/features/*.t2d       sample containers, same stem as the annotation
//! <root>/images/*.png|jpg     RGB images (only needed for mask refinement)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, SegmentationMask};
use crate::error::{Error, Result};
use crate::io;
use crate::sample::SampleRecord;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore_index: Option<u32>,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_index: Option<u32>) -> Self {
        ConfusionMatrix {
            classes,
            ignore_index,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::DimensionMismatch(format!(
                "{classes} classes need {} counts",
                classes * classes
            )));
        }
        Ok(ConfusionMatrix {
            classes,
            ignore_index: None,
            counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::DimensionMismatch(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.classes;
        let check = |label: u32| {
            if (label as usize) < c {
                Ok(label as usize)
            } else {
                Err(Error::LabelOutOfRange { label, classes: c })
            }
        };
        // Validate first so a bad pixel leaves the matrix untouched.
        let mut pairs = Vec::with_capacity(gt.len());
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == self.ignore_index {
                continue;
            }
            pairs.push((check(g)?, check(p)?));
        }
        for (g, p) in pairs {
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch(
                "merging confusion matrices of different size".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where the class is absent from both gt and
    /// prediction) and their mean over present classes.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok((
            present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        ))
    }
}

/// Class list from `classes.txt`, split into foreground names and whether
/// label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassList {
    pub foreground: Vec<String>,
    pub has_background: bool,
}

impl ClassList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        let has_background = names
            .first()
            .is_some_and(|n| n.eq_ignore_ascii_case("background"));
        if has_background {
            names.remove(0);
        }
        if names.is_empty() {
            return Err(Error::Empty("class list with no foreground classes"));
        }
        Ok(ClassList {
            foreground: names,
            has_background,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Number of ground-truth labels, background included.
    pub fn num_labels(&self) -> usize {
        self.foreground.len() + usize::from(self.has_background)
    }

    pub fn label_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.num_labels());
        if self.has_background {
            out.push("background".to_owned());
        }
        out.extend(self.foreground.iter().cloned());
        out
    }

    /// Maps engine mask indices to dataset labels: foreground `j` becomes
    /// `j + 1` and the background index becomes 0 when label 0 is background.
    pub fn to_dataset_labels(&self, mask: &SegmentationMask) -> Vec<u32> {
        if !self.has_background {
            return mask.labels.clone();
        }
        mask.labels
            .iter()
            .map(|&l| if Some(l) == mask.background { 0 } else { l + 1 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub images_evaluated: usize,
    pub pixels_evaluated: u64,
    /// Annotations with no feature container.
    pub missing: Vec<String>,
    pub failures: Vec<ImageFailure>,
    pub config: serde_json::Value,
}

impl BenchmarkReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.failures.is_empty()
    }

    pub fn table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$}  {:>7}\n", "class", "IoU");
        out.push_str(&format!("{}\n", "-".repeat(width + 9)));
        for c in &self.per_class {
            let v = c
                .iou
                .map_or_else(|| "    n/a".to_owned(), |v| format!("{:>7.2}", 100.0 * v));
            out.push_str(&format!("{:<width$}  {v}\n", c.name));
        }
        out.push_str(&format!("{}\n", "-".repeat(width + 9)));
        out.push_str(&format!("{:<width$}  {:>7.2}\n", "mIoU", 100.0 * self.miou));
        out.push_str(&format!(
            "images: {}  missing: {}  failed: {}\n",
            self.images_evaluated,
            self.missing.len(),
            self.failures.len()
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub ignore_index: Option<u32>,
    /// Echoed into the report.
    pub config: serde_json::Value,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            ignore_index: Some(DEFAULT_IGNORE_INDEX),
            config: serde_json::Value::Null,
        }
    }
}

fn find_image(root: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| root.join("images").join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

fn sorted_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn evaluate_image(
    root: &Path,
    stem: &str,
    engine: &Engine,
    classes: &ClassList,
    ignore: Option<u32>,
) -> Result<ConfusionMatrix> {
    let sample = SampleRecord::read(root.join("features").join(format!("{stem}.t2d")))?;
    let (h, w, gt) = io::load_index_mask(root.join("annotations").join(format!("{stem}.png")))?;
    if (h, w) != sample.image_size {
        return Err(Error::DimensionMismatch(format!(
            "annotation is {h}x{w}, features declare image size {:?}",
            sample.image_size
        )));
    }
    let image = if engine.options().refinement.is_some() {
        let path = find_image(root, stem)
            .ok_or_else(|| Error::MissingRecord(format!("images/{stem}.png|jpg")))?;
        Some(io::load_rgb(path, Some((h, w)))?)
    } else {
        None
    };
    let out = engine.segment(&sample, image.as_ref())?;
    let pred = classes.to_dataset_labels(&out.mask);
    let mut cm = ConfusionMatrix::new(classes.num_labels(), ignore);
    cm.update(&pred, &gt)?;
    Ok(cm)
}

/// Segments every annotated image and aggregates one confusion matrix.
///
/// Images without a feature container are listed in `missing`; per-image
/// errors are listed in `failures`. Both are skipped.
pub fn run_benchmark(
    root: impl AsRef<Path>,
    engine: &Engine,
    classes: &ClassList,
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    let root = root.as_ref();
    if classes.foreground.len() != engine.vocab().len()
        || classes.has_background != engine.vocab().has_background()
    {
        return Err(Error::InconsistentDataset(
            "class list does not match the engine vocabulary".into(),
        ));
    }
    let stems = sorted_stems(&root.join("annotations"), "png")?;
    let (present, missing): (Vec<_>, Vec<_>) = stems
        .into_iter()
        .partition(|s| root.join("features").join(format!("{s}.t2d")).exists());

    let results: Vec<(String, Result<ConfusionMatrix>)> = present
        .par_iter()
        .map(|stem| {
            (
                stem.clone(),
                evaluate_image(root, stem, engine, classes, options.ignore_index),
            )
        })
        .collect();

    let mut total = ConfusionMatrix::new(classes.num_labels(), options.ignore_index);
    let mut failures = Vec::new();
    let mut evaluated = 0;
    for (stem, res) in results {
        match res {
            Ok(cm) => {
                total.merge(&cm)?;
                evaluated += 1;
            }
            Err(e) => failures.push(ImageFailure {
                image: stem,
                reason: e.to_string(),
            }),
        }
    }
    if evaluated == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let (miou, per_class) = total.miou()?;
    Ok(BenchmarkReport {
        miou,
        per_class: classes
            .label_names()
            .into_iter()
            .zip(per_class)
            .map(|(name, iou)| ClassIou { name, iou })
            .collect(),
        images_evaluated: evaluated,
        pixels_evaluated: total.total(),
        missing,
        failures,
        config: options.config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3, None);
        let labels = [0, 1, 2, 2, 1];
        cm.update(&labels, &labels).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(cm.get(g, p), 0);
                }
            }
        }
        assert_eq!(cm.miou().unwrap().0, 1.0);
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2, Some(255));
        cm.update(&[0, 1, 1], &[255, 255, 255]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn disjoint_classes_score_zero() {
        let mut cm = ConfusionMatrix::new(3, None);
        cm.update(&[1, 1], &[0, 0]).unwrap();
        let (m, per) = cm.miou().unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(per, vec![Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn crafted_two_class_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        let (m, per) = cm.miou().unwrap();
        assert_eq!(per, vec![Some(0.6), Some(0.6)]);
        assert_eq!(m, 0.6);
    }

    #[test]
    fn out_of_range_label_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(2, Some(255));
        assert!(matches!(
            cm.update(&[0, 5], &[0, 1]),
            Err(Error::LabelOutOfRange {
                label: 5,
                classes: 2
            })
        ));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn class_list_background_mapping() {
        let cl = ClassList::parse("background\ncat\ndog\n").unwrap();
        assert!(cl.has_background);
        assert_eq!(cl.num_labels(), 3);
        let mask = SegmentationMask {
            height: 1,
            width: 3,
            labels: vec![0, 1, 2],
            num_classes: 2,
            background: Some(2),
        };
        assert_eq!(cl.to_dataset_labels(&mask), vec![1, 2, 0]);
        let plain = ClassList::parse("cat\ndog").unwrap();
        assert!(!plain.has_background);
        assert!(ClassList::parse("background\n").is_err());
    }
}
