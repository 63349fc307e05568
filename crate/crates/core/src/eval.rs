//! Segmentation metrics: confusion matrices, per-class IoU, mIoU and the
//! per-angle breakdown over panorama width.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datamodel::{LabelMap, LabeledImage, IGNORE};
use crate::error::{Error, Result};
use crate::imageio::read_labels;
use crate::segnet::SegModel;
use crate::synthdata::TARGET_EVAL_DIR;

/// Number of equal-width column slices in the angular breakdown (45° each).
pub const ANGLES: usize = 8;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn check_pair(&self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.num_classes;
        if let Some(&v) = gt.data.iter().find(|&&v| v != IGNORE && v as usize >= c) {
            return Err(Error::validation(format!("ground-truth class {v} outside 0..{c}")));
        }
        if let Some(&v) = pred.data.iter().find(|&&v| v as usize >= c) {
            return Err(Error::validation(format!("predicted class {v} outside 0..{c}")));
        }
        Ok(())
    }

    /// Adds every pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.accumulate_columns(pred, gt, 0, gt.width)
    }

    /// Like [`accumulate`](Self::accumulate) restricted to columns `x0..x1`.
    pub fn accumulate_columns(&mut self, pred: &LabelMap, gt: &LabelMap, x0: usize, x1: usize) -> Result<()> {
        self.check_pair(pred, gt)?;
        let c = self.num_classes;
        for y in 0..gt.height {
            for x in x0..x1.min(gt.width) {
                let g = gt.get(y, x);
                if g != IGNORE {
                    self.counts[g as usize * c + pred.get(y, x) as usize] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_report(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::validation("no class occurs in prediction or ground truth"));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// One confusion matrix per contiguous slice of `width / ANGLES` columns,
/// accumulated over the whole set.
pub fn angle_matrices(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<Vec<ConfusionMatrix>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut mats = vec![ConfusionMatrix::new(num_classes); ANGLES];
    for (p, g) in preds.iter().zip(gts) {
        if g.width % ANGLES != 0 {
            return Err(Error::validation(format!("width {} is not divisible by {ANGLES}", g.width)));
        }
        let slice = g.width / ANGLES;
        for (a, m) in mats.iter_mut().enumerate() {
            m.accumulate_columns(p, g, a * slice, (a + 1) * slice)?;
        }
    }
    Ok(mats)
}

/// mIoU of each angular slice.
pub fn omnidirectional(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<Vec<f64>> {
    angle_matrices(preds, gts, num_classes)?
        .iter()
        .map(|m| iou_report(m).map(|r| r.miou))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: IouReport,
    pub per_angle: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate_predictions(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<EvalReport> {
    let mats = angle_matrices(preds, gts, num_classes)?;
    let mut confusion = ConfusionMatrix::new(num_classes);
    for m in &mats {
        confusion.merge(m)?;
    }
    Ok(EvalReport {
        overall: iou_report(&confusion)?,
        per_angle: mats.iter().map(|m| iou_report(m).map(|r| r.miou)).collect::<Result<_>>()?,
        confusion,
    })
}

/// Scores `model`'s fused prediction on `images` against `gts`, which
/// are paired by position.
pub fn evaluate_model(model: &SegModel, images: &[LabeledImage], gts: &[LabelMap]) -> Result<EvalReport> {
    if images.len() != gts.len() {
        return Err(Error::shape(format!("{} images for {} label maps", images.len(), gts.len())));
    }
    let preds = images
        .iter()
        .map(|img| Ok(model.fused_inference(&img.pixels.to_tensor())?.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, gts, model.config.num_classes)
}

/// Reads the withheld ground truth of `target` from
/// `<root>/target_eval/labels/<id>.png`.
pub fn load_target_eval(root: &Path, target: &[LabeledImage]) -> Result<Vec<LabelMap>> {
    target
        .iter()
        .map(|img| {
            let path = root.join(TARGET_EVAL_DIR).join("labels").join(format!("{}.png", img.id));
            if !path.is_file() {
                return Err(Error::MissingLabel(path));
            }
            let labels = read_labels(&path)?;
            if (labels.height, labels.width) != (img.pixels.height, img.pixels.width) {
                return Err(Error::shape(format!("{} does not match its image size", path.display())));
            }
            Ok(labels)
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// `metric,value` rows; IoU values are percentages, absent classes empty.
pub fn metrics_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"])?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{:.4}", 100.0 * v));
    w.write_record(["miou", &fmt(Some(report.overall.miou))])?;
    for (c, v) in report.overall.per_class.iter().enumerate() {
        w.write_record([&format!("iou_class_{c}"), &fmt(*v)])?;
    }
    for (a, v) in report.per_angle.iter().enumerate() {
        w.write_record([&format!("miou_angle_{}", a * 360 / ANGLES), &fmt(Some(*v))])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per method: mIoU followed by per-class IoU, in percent.
pub fn markdown_table(rows: &[(&str, &EvalReport)]) -> String {
    let c = rows.first().map_or(0, |(_, r)| r.overall.per_class.len());
    let mut s = String::from("| Method | mIoU |");
    for k in 0..c {
        let _ = write!(s, " class {k} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(c));
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "| {name} | {} |", pct(Some(r.overall.miou)));
        for v in &r.overall.per_class {
            let _ = write!(s, " {} |", pct(*v));
        }
        s.push('\n');
    }
    s
}

pub fn angle_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("| Method |");
    for a in 0..ANGLES {
        let _ = write!(s, " {}° |", a * 360 / ANGLES);
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(ANGLES));
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "| {name} |");
        for v in &r.per_angle {
            let _ = write!(s, " {} |", pct(Some(*v)));
        }
        s.push('\n');
    }
    s
}

/// Writes `metrics.csv` and `metrics.md` into `dir`.
pub fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(report)?).map_err(|e| Error::io(&csv_path, e))?;
    let md = format!(
        "{}\n{}",
        markdown_table(&[(name, report)]),
        angle_table(&[(name, report)])
    );
    let md_path = dir.join("metrics.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}
