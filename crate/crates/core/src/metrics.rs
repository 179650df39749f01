//! Overlap metrics for binary segmentation and their fold-level aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::imgproc::BinaryMask;

/// Confusion counts of a prediction `S` against ground truth `G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(s: &BinaryMask, g: &BinaryMask) -> Result<Self> {
        if (s.width(), s.height()) != (g.width(), g.height()) {
            return Err(shape_mismatch(
                (g.width(), g.height()),
                (s.width(), s.height()),
            ));
        }
        let mut c = Confusion::default();
        for (&a, &b) in s.pixels().iter().zip(g.pixels()) {
            match (a != 0, b != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn fmeasure(&self) -> f64 {
        let s = self.tp + self.fp;
        let g = self.tp + self.fn_;
        if s == 0 || g == 0 || self.tp == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / s as f64;
        let r = self.tp as f64 / g as f64;
        2.0 * p * r / (p + r)
    }

    pub fn sensitivity(&self) -> f64 {
        let g = self.tp + self.fn_;
        if g == 0 {
            1.0
        } else {
            self.tp as f64 / g as f64
        }
    }

    pub fn specificity(&self) -> f64 {
        let bg = self.tn + self.fp;
        if bg == 0 {
            1.0
        } else {
            self.tn as f64 / bg as f64
        }
    }

    pub fn scores(&self) -> Scores {
        Scores {
            dsc: self.dsc(),
            iou: self.iou(),
            fm: self.fmeasure(),
            sen: self.sensitivity(),
            spe: self.specificity(),
        }
    }
}

/// Dice similarity; 1 when both masks are empty.
pub fn dsc(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(s, g)?.dsc())
}

/// Jaccard index; 1 when both masks are empty.
pub fn iou(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(s, g)?.iou())
}

/// Harmonic mean of precision and recall; 0 when either is undefined or both vanish.
pub fn fmeasure(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(s, g)?.fmeasure())
}

/// Recall of the lesion class; 1 when `g` is empty.
pub fn sensitivity(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(s, g)?.sensitivity())
}

/// Recall of the background class; 1 when `g` covers the whole image.
pub fn specificity(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(s, g)?.specificity())
}

/// The five scores of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dsc: f64,
    pub iou: f64,
    pub fm: f64,
    pub sen: f64,
    pub spe: f64,
}

impl Scores {
    pub fn as_array(&self) -> [f64; 5] {
        [self.dsc, self.iou, self.fm, self.sen, self.spe]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            dsc: a[0],
            iou: a[1],
            fm: a[2],
            sen: a[3],
            spe: a[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub scores: Scores,
}

/// Per-image scores with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub per_image: Vec<ImageScores>,
    pub mean: Scores,
    pub std: Scores,
}

impl MetricsReport {
    pub fn new(fold: Option<usize>, per_image: Vec<ImageScores>) -> Self {
        let values: Vec<Scores> = per_image.iter().map(|r| r.scores).collect();
        let (mean, std) = mean_std(&values);
        Self {
            fold,
            per_image,
            mean,
            std,
        }
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for fewer than two values).
pub fn mean_std(values: &[Scores]) -> (Scores, Scores) {
    if values.is_empty() {
        return (Scores::default(), Scores::default());
    }
    let n = values.len() as f64;
    let mut mean = [0.0; 5];
    for v in values {
        for (m, x) in mean.iter_mut().zip(v.as_array()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    if values.len() > 1 {
        for v in values {
            for ((s, x), m) in var.iter_mut().zip(v.as_array()).zip(mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    (Scores::from_array(mean), Scores::from_array(var))
}

/// Pools the per-image scores of several reports into one.
pub fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    let per_image = reports
        .iter()
        .flat_map(|r| r.per_image.iter().cloned())
        .collect();
    MetricsReport::new(None, per_image)
}

/// One row of a cross-validation table.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldRow {
    pub fold: String,
    pub mean: Scores,
    pub std: Option<Scores>,
}

/// Cross-validation summary: one row per fold plus an `Average` row giving the mean±std
/// of the fold means.
#[derive(Clone, Debug, PartialEq)]
pub struct CvTable {
    pub dataset: String,
    pub rows: Vec<FoldRow>,
}

impl CvTable {
    pub fn from_folds(dataset: &str, folds: &[MetricsReport]) -> Self {
        let mut rows: Vec<FoldRow> = folds
            .iter()
            .enumerate()
            .map(|(i, r)| FoldRow {
                fold: format!("{}", r.fold.unwrap_or(i) + 1),
                mean: r.mean,
                std: None,
            })
            .collect();
        let means: Vec<Scores> = folds.iter().map(|r| r.mean).collect();
        let (mean, std) = mean_std(&means);
        rows.push(FoldRow {
            fold: "Average".into(),
            mean,
            std: Some(std),
        });
        Self {
            dataset: dataset.into(),
            rows,
        }
    }

    pub fn average(&self) -> &FoldRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Fold | mDSC | mIoU | mFM | mSen | mSpe |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let _ = write!(out, "| {} | {} |", self.dataset, row.fold);
            let means = row.mean.as_array();
            match row.std {
                Some(std) => {
                    for (m, s) in means.iter().zip(std.as_array()) {
                        let _ = write!(out, " {m:.3}±{s:.3} |");
                    }
                }
                None => {
                    for m in means {
                        let _ = write!(out, " {m:.3} |");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,fold,dsc,iou,fm,sen,spe,dsc_std,iou_std,fm_std,sen_std,spe_std\n",
        );
        for row in &self.rows {
            let _ = write!(out, "{},{}", self.dataset, row.fold);
            for m in row.mean.as_array() {
                let _ = write!(out, ",{m:.6}");
            }
            for s in row.std.map(|s| s.as_array()).unwrap_or([f64::NAN; 5]) {
                if s.is_nan() {
                    out.push(',');
                } else {
                    let _ = write!(out, ",{s:.6}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-image scores as CSV.
pub fn per_image_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("fold,id,dsc,iou,fm,sen,spe\n");
    for r in reports {
        let fold = r.fold.map(|f| (f + 1).to_string()).unwrap_or_default();
        for img in &r.per_image {
            let _ = write!(out, "{fold},{}", img.id);
            for v in img.scores.as_array() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
    }
    out
}
