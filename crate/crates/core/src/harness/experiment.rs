use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::HarnessConfig;
use super::dataset::{make_folds, Sample};
use crate::error::Result;
use crate::imgproc::BinaryMask;
use crate::loss::{LossWeights, Targets};
use crate::metrics::{mean_std, Confusion, CvTable, FoldRow, ImageScores, MetricsReport, Scores};
use crate::model::{train_step, Adam, ArchConfig, Mfsnet, ModelConfig, Preprocess};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// A sample after preprocessing: network input plus ground truth at both resolutions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// `[1, 3, side, side]` normalized input.
    pub input: Tensor<f32>,
    /// Ground truth resized to the network input.
    pub target: BinaryMask,
    /// Ground truth at the original resolution.
    pub truth: BinaryMask,
}

pub fn prepare(samples: &[Sample], pre: &Preprocess) -> Result<Vec<Prepared>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Prepared {
                id: s.id.clone(),
                input: pre.prepare(&s.image)?,
                target: s.mask.resize_nearest(pre.side, pre.side),
                truth: s.mask.clone(),
            })
        })
        .collect()
}

fn flip(
    input: &Tensor<f32>,
    mask: &BinaryMask,
    horizontal: bool,
    vertical: bool,
) -> (Tensor<f32>, BinaryMask) {
    let (h, w) = input.hw();
    let src = |x: usize, y: usize| {
        (
            if horizontal { w - 1 - x } else { x },
            if vertical { h - 1 - y } else { y },
        )
    };
    let t = Tensor::from_fn(input.shape(), |[n, c, y, x]| {
        let (sx, sy) = src(x, y);
        input.at([n, c, sy, sx])
    });
    let m = BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let (sx, sy) = src(x, y);
        mask.get(sx, sy)
    });
    (t, m)
}

/// A trained network with its per-step loss history.
pub struct Trained {
    pub net: Mfsnet,
    pub store: ParamStore<f32>,
    pub losses: Vec<f64>,
}

pub fn train_model(
    cfg: &HarnessConfig,
    model: &ModelConfig,
    loss: &LossWeights,
    data: &[&Prepared],
    seed: u64,
) -> Result<Trained> {
    let (net, mut store) = Mfsnet::new::<f32>(model, seed)?;
    let mut opt = Adam::new(&cfg.train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches = order.chunks(cfg.train.batch_size);
        let n_batches = batches.len();
        for batch in batches {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = data[i];
                if cfg.train.flips {
                    let (h, v) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
                    let (t, m) = flip(&p.input, &p.target, h, v);
                    inputs.push(t);
                    masks.push(m);
                } else {
                    inputs.push(p.input.clone());
                    masks.push(p.target.clone());
                }
            }
            let x = Tensor::stack(&inputs);
            let targets = Targets::new(masks, loss)?;
            let l = train_step(&net, &mut store, &mut opt, &x, &targets, loss)?;
            epoch_loss += l;
            losses.push(l);
        }
        log::debug!(
            "epoch {} mean loss {:.4}",
            epoch + 1,
            epoch_loss / n_batches.max(1) as f64
        );
    }
    Ok(Trained { net, store, losses })
}

/// Scores the network's binarized predictions against the original-resolution truth.
pub fn evaluate(
    net: &Mfsnet,
    store: &ParamStore<f32>,
    data: &[&Prepared],
    fold: Option<usize>,
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|p| p.input.clone()).collect::<Vec<_>>());
        let outs = net.forward(store, &x)?;
        for (p, out) in chunk.iter().zip(outs) {
            let pred = out
                .final_map
                .threshold(0.5)
                .resize_nearest(p.truth.width(), p.truth.height());
            per_image.push(ImageScores {
                id: p.id.clone(),
                scores: Confusion::of(&pred, &p.truth)?.scores(),
            });
        }
    }
    Ok(MetricsReport::new(fold, per_image))
}

/// Fold reports of one cross-validation run and their summary table.
#[derive(Clone, Debug)]
pub struct CvRun {
    pub reports: Vec<MetricsReport>,
    pub table: CvTable,
}

impl CvRun {
    pub fn average(&self) -> &FoldRow {
        self.table.average()
    }
}

fn cv_with(
    prepared: &[Prepared],
    cfg: &HarnessConfig,
    arch: &ArchConfig,
    loss: &LossWeights,
    dataset: &str,
) -> Result<CvRun> {
    let split = make_folds(prepared.len(), cfg.cv.folds, cfg.seed)?;
    let model = cfg.model_config(arch);
    let mut reports = Vec::with_capacity(split.k());
    for f in 0..split.k() {
        let train: Vec<&Prepared> = split
            .train_indices(f)
            .iter()
            .map(|&i| &prepared[i])
            .collect();
        let test: Vec<&Prepared> = split.folds[f].iter().map(|&i| &prepared[i]).collect();
        // Identical initialization for a fold across configurations.
        let trained = train_model(cfg, &model, loss, &train, cfg.seed.wrapping_add(f as u64))
            .map_err(|e| {
                log::error!("[{}] fold {}/{} aborted: {e}", arch.row(), f + 1, split.k());
                e
            })?;
        let report = evaluate(
            &trained.net,
            &trained.store,
            &test,
            Some(f),
            cfg.train.batch_size,
        )?;
        log::info!(
            "[{}] fold {}/{}: mDSC {:.3} over {} images",
            arch.row(),
            f + 1,
            split.k(),
            report.mean.dsc,
            report.len()
        );
        reports.push(report);
    }
    let table = CvTable::from_folds(dataset, &reports);
    Ok(CvRun { reports, table })
}

/// k-fold cross-validation of `arch` with preprocessing as configured.
pub fn run_cv(
    samples: &[Sample],
    cfg: &HarnessConfig,
    arch: &ArchConfig,
    dataset: &str,
) -> Result<CvRun> {
    let prepared = prepare(samples, &cfg.preprocess())?;
    cv_with(&prepared, cfg, arch, &cfg.loss, dataset)
}

/// Cross-validation with and without hair removal under identical folds and seeds.
pub struct PreprocessComparison {
    pub dataset: String,
    pub without: CvRun,
    pub with: CvRun,
}

pub fn compare_preprocessing(
    samples: &[Sample],
    cfg: &HarnessConfig,
    arch: &ArchConfig,
    dataset: &str,
) -> Result<PreprocessComparison> {
    let mut off = cfg.clone();
    off.preprocess.enabled = false;
    let mut on = cfg.clone();
    on.preprocess.enabled = true;
    Ok(PreprocessComparison {
        dataset: dataset.into(),
        without: run_cv(samples, &off, arch, dataset)?,
        with: run_cv(samples, &on, arch, dataset)?,
    })
}

impl PreprocessComparison {
    /// Two rows in the layout Dataset | Preprocessing | mDSC | mIoU | mSen | mSpe.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Dataset | Preprocessing | mDSC | mIoU | mSen | mSpe |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for (label, run) in [("NO", &self.without), ("YES", &self.with)] {
            let avg = run.average();
            let std = avg.std.unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {label} | {} | {} | {} | {} |",
                self.dataset,
                pm(avg.mean.dsc, std.dsc),
                pm(avg.mean.iou, std.iou),
                pm(avg.mean.sen, std.sen),
                pm(avg.mean.spe, std.spe)
            );
        }
        out
    }
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

fn score_cells(mean: &Scores, std: &Scores) -> String {
    mean.as_array()
        .iter()
        .zip(std.as_array())
        .map(|(m, s)| format!(" {} |", pm(*m, s)))
        .collect()
}

/// Which table layout an ablation renders to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationLayout {
    /// Per-level module placement.
    Orientation,
    /// Named component combinations.
    Components,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub arch: ArchConfig,
}

/// BA/RA placements over levels 1 to 5; the last row is the standard network.
pub fn orientation_rows() -> Vec<AblationRow> {
    [
        ("1", "BA BA BA RA RA"),
        ("2", "BA BA RA RA RA"),
        ("3", "- BA RA RA RA"),
        ("4", "BA RA BA RA RA"),
        ("5", "- BA RA BA RA"),
        ("Proposed", "- BA BA RA RA"),
    ]
    .into_iter()
    .map(|(label, row)| AblationRow {
        label: label.into(),
        arch: ArchConfig::from_row(row, true).expect("static rows are valid"),
    })
    .collect()
}

/// Component combinations on top of the backbone.
pub fn component_rows() -> Vec<AblationRow> {
    let mk = |label: &str, ppd: bool, ba: bool, ra: bool| AblationRow {
        label: label.into(),
        arch: ArchConfig {
            ppd,
            ba_levels: if ba { vec![2, 3] } else { Vec::new() },
            ra_levels: if ra { vec![4, 5] } else { Vec::new() },
            ..ArchConfig::proposed()
        },
    };
    vec![
        mk("Res2Net", false, false, false),
        mk("Res2Net+PPD", true, false, false),
        mk("Res2Net+BA", false, true, false),
        mk("Res2Net+RA", false, false, true),
        mk("Res2Net+BA+RA", false, true, true),
        mk("Res2Net+RA+PPD", true, false, true),
        mk("Res2Net+BA+RA+PPD (Proposed)", true, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub run: CvRun,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub layout: AblationLayout,
    pub results: Vec<AblationResult>,
}

/// Cross-validates every row under identical folds and per-fold seeds, in row order.
pub fn run_ablation(
    samples: &[Sample],
    cfg: &HarnessConfig,
    rows: &[AblationRow],
    layout: AblationLayout,
    dataset: &str,
) -> Result<AblationTable> {
    let prepared = prepare(samples, &cfg.preprocess())?;
    let results = rows
        .iter()
        .map(|row| {
            Ok(AblationResult {
                row: row.clone(),
                run: cv_with(&prepared, cfg, &row.arch, &cfg.loss, dataset)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { layout, results })
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        match self.layout {
            AblationLayout::Orientation => {
                out.push_str("| Instance | Conv1 | Conv2 | Conv3 | Conv4 | Conv5 | mDSC | mIoU | mFM | mSen | mSpe |\n");
                out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
            }
            AblationLayout::Components => {
                out.push_str("| Architecture | mDSC | mIoU | mFM | mSen | mSpe |\n");
                out.push_str("|---|---|---|---|---|---|\n");
            }
        }
        for r in &self.results {
            let avg = r.run.average();
            let _ = write!(out, "| {} |", r.row.label);
            if self.layout == AblationLayout::Orientation {
                for cell in r.row.arch.row().split(' ') {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push_str(&score_cells(&avg.mean, &avg.std.unwrap_or_default()));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,levels,ppd,dsc,dsc_std,iou,iou_std,fm,fm_std,sen,sen_std,spe,spe_std\n",
        );
        for r in &self.results {
            let avg = r.run.average();
            let std = avg.std.unwrap_or_default();
            let _ = write!(
                out,
                "{},{},{}",
                r.row.label,
                r.row.arch.row(),
                r.row.arch.ppd
            );
            for (m, s) in avg.mean.as_array().iter().zip(std.as_array()) {
                let _ = write!(out, ",{m:.6},{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// The δ values swept by default.
pub const DEFAULT_DELTAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Debug)]
pub struct DeltaSweep {
    pub points: Vec<(f64, CvRun)>,
}

pub fn sweep_delta(
    samples: &[Sample],
    cfg: &HarnessConfig,
    deltas: &[f64],
    dataset: &str,
) -> Result<DeltaSweep> {
    let prepared = prepare(samples, &cfg.preprocess())?;
    let arch = ArchConfig::proposed();
    let points = deltas
        .iter()
        .map(|&delta| {
            let loss = LossWeights { delta, ..cfg.loss };
            loss.validate()?;
            Ok((delta, cv_with(&prepared, cfg, &arch, &loss, dataset)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaSweep { points })
}

impl DeltaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,mdsc,mdsc_std,miou,miou_std\n");
        for (delta, run) in &self.points {
            let avg = run.average();
            let std = avg.std.unwrap_or_default();
            let _ = writeln!(
                out,
                "{delta:.2},{:.6},{:.6},{:.6},{:.6}",
                avg.mean.dsc, std.dsc, avg.mean.iou, std.iou
            );
        }
        out
    }
}

/// Mean and sample std of the per-fold means of a run (the `Average` row).
pub fn fold_summary(run: &CvRun) -> (Scores, Scores) {
    let means: Vec<Scores> = run.reports.iter().map(|r| r.mean).collect();
    mean_std(&means)
}

/// A markdown preamble recording every setting that produced a report.
pub fn report_header(title: &str, cfg: &HarnessConfig, notes: &[String]) -> String {
    let mut out = format!("# {title}\n\n");
    for note in notes {
        let _ = writeln!(out, "- {note}");
    }
    if !notes.is_empty() {
        out.push('\n');
    }
    out.push_str("```toml\n");
    out.push_str(&cfg.to_toml());
    out.push_str("```\n\n");
    out
}

/// The same settings as `#`-prefixed lines for CSV files.
pub fn csv_header(cfg: &HarnessConfig) -> String {
    cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect()
}

/// Notes on architecture choices that every report carries.
pub fn architecture_notes(cfg: &HarnessConfig, arch: &ArchConfig) -> Vec<String> {
    let prediction = match arch.ra_levels.iter().min() {
        Some(l) => format!("O_{l}"),
        None => "O_S".into(),
    };
    vec![
        format!("backbone: {:?}", cfg.model.backbone),
        format!(
            "levels: {} (ppd: {}, ba_source: {})",
            arch.row(),
            arch.ppd,
            cfg.model.ba_source
        ),
        "partial decoder inputs: RFB(F4), RFB(F5)".into(),
        format!("prediction map: sigmoid of upsampled {prediction}"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::from_fn([1, 3, 4, 5], |[_, c, y, x]| (c * 100 + y * 10 + x) as f32);
        let m = BinaryMask::from_fn(5, 4, |x, y| x == 0 && y == 1);
        let (ft, fm) = flip(&t, &m, true, false);
        assert_eq!(ft.at([0, 2, 1, 0]), 214.0);
        assert!(fm.get(4, 1));
        let (bt, bm) = flip(&ft, &fm, true, false);
        assert_eq!((bt, bm), (t.clone(), m.clone()));
        let (vt, vm) = flip(&t, &m, false, true);
        assert_eq!(vt.at([0, 0, 0, 3]), 33.0);
        assert!(vm.get(0, 2));
    }

    #[test]
    fn ablation_rows_enumerate() {
        let rows = orientation_rows();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[5].arch, ArchConfig::proposed());
        let rows = component_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[6].arch, ArchConfig::proposed());
        assert!(
            !rows[0].arch.ppd
                && rows[0].arch.ba_levels.is_empty()
                && rows[0].arch.ra_levels.is_empty()
        );
    }
}
