//! Dice/IOU metrics, per-domain aggregation, the cross-validation harness,
//! and report emitters (aligned text, CSV, JSON sidecar).
//!
//! Metrics are computed per image on hard masks (probabilities binarized at
//! 0.5) and then averaged, first within a domain, then across domains. Both
//! metrics define the empty-vs-empty case as 1.0. The cross-fold summary
//! reports the mean and population standard deviation of the cross-domain
//! average over folds.

use crate::data::{DomainBatch, DomainDataset, Sample, NUM_FOLDS};
use crate::error::{MdvitError, Result};
use crate::model::Mdvit;
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Threshold probabilities into a hard {0, 1} mask.
pub fn binarize<T: Scalar>(probs: &ArrayD<T>, threshold: f64) -> ArrayD<u8> {
    let t = T::from_f64(threshold);
    probs.mapv(|v| u8::from(v > t))
}

/// Foreground overlap counts (intersection, |P|, |T|).
pub fn overlap_counts(pred: &ArrayD<u8>, target: &ArrayD<u8>) -> Result<(u64, u64, u64)> {
    if pred.shape() != target.shape() {
        return Err(MdvitError::shape(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut t = 0u64;
    for (&a, &b) in pred.iter().zip(target.iter()) {
        inter += u64::from(a != 0 && b != 0);
        p += u64::from(a != 0);
        t += u64::from(b != 0);
    }
    Ok((inter, p, t))
}

/// Hard Dice `2|P∩T| / (|P|+|T|)`; 1.0 when both masks are empty.
pub fn dice_score(pred: &ArrayD<u8>, target: &ArrayD<u8>) -> Result<f64> {
    let (inter, p, t) = overlap_counts(pred, target)?;
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    })
}

/// Hard IOU `|P∩T| / |P∪T|`; 1.0 when both masks are empty.
pub fn iou_score(pred: &ArrayD<u8>, target: &ArrayD<u8>) -> Result<f64> {
    let (inter, p, t) = overlap_counts(pred, target)?;
    let union = p + t - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean hard Dice of a model over the listed samples of one dataset
/// (e.g. a train split for overfit checks, or a validation holdout).
pub fn mean_dice_on<T: Scalar>(
    model: &Mdvit<T>,
    ds: &DomainDataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(MdvitError::contract(
            "mean_dice_on needs at least one sample",
        ));
    }
    let mut scores = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(4) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
        let batch = DomainBatch::<T>::from_samples(&samples);
        let probs = model.predict(&batch.images, &batch.domains)?;
        for i in 0..batch.len() {
            let pred = binarize(&probs.index_axis(Axis(0), i).to_owned().into_dyn(), 0.5);
            let target = binarize(
                &batch.masks.index_axis(Axis(0), i).to_owned().into_dyn(),
                0.5,
            );
            scores.push(dice_score(&pred, &target)?);
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub domain: String,
    /// Fractions in [0, 1]; reports render them as percent.
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub images: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Paradigm tag: "st", "jt", "mat", or a caller-chosen label.
    pub paradigm: String,
    pub fold: usize,
    /// Inference parameter count of the evaluated model.
    pub param_count: usize,
    pub per_image: Vec<ImageMetrics>,
    pub per_domain: Vec<DomainMetrics>,
    /// Arithmetic mean of the per-domain mean Dice / IOU.
    pub avg_dice: f64,
    pub avg_iou: f64,
}

fn domain_means(per_image: &[ImageMetrics], domains: &[String]) -> Vec<DomainMetrics> {
    domains
        .iter()
        .map(|name| {
            let rows: Vec<&ImageMetrics> = per_image.iter().filter(|m| &m.domain == name).collect();
            let n = rows.len();
            let (d, i) = rows
                .iter()
                .fold((0.0, 0.0), |acc, m| (acc.0 + m.dice, acc.1 + m.iou));
            DomainMetrics {
                domain: name.clone(),
                images: n,
                mean_dice: if n > 0 { d / n as f64 } else { f64::NAN },
                mean_iou: if n > 0 { i / n as f64 } else { f64::NAN },
            }
        })
        .collect()
}

fn finish_report(
    paradigm: &str,
    fold: usize,
    param_count: usize,
    per_image: Vec<ImageMetrics>,
    domains: &[String],
) -> EvalReport {
    let per_domain = domain_means(&per_image, domains);
    let n = per_domain.len().max(1) as f64;
    let avg_dice = per_domain.iter().map(|d| d.mean_dice).sum::<f64>() / n;
    let avg_iou = per_domain.iter().map(|d| d.mean_iou).sum::<f64>() / n;
    EvalReport {
        paradigm: paradigm.to_string(),
        fold,
        param_count,
        per_image,
        per_domain,
        avg_dice,
        avg_iou,
    }
}

/// Evaluate a model on the fold-`fold` test split of each dataset.
pub fn evaluate<T: Scalar>(
    model: &Mdvit<T>,
    datasets: &[&DomainDataset],
    fold: usize,
    paradigm: &str,
) -> Result<EvalReport> {
    if fold >= NUM_FOLDS {
        return Err(MdvitError::config(format!(
            "fold {fold} out of range [0, {NUM_FOLDS})"
        )));
    }
    let mut per_image = Vec::new();
    for ds in datasets {
        let test = ds.test_indices(fold);
        for chunk in test.chunks(4) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let batch = DomainBatch::<T>::from_samples(&samples);
            let probs = model.predict(&batch.images, &batch.domains)?;
            for (i, s) in samples.iter().enumerate() {
                let pred = binarize(&probs.index_axis(Axis(0), i).to_owned().into_dyn(), 0.5);
                let target = binarize(
                    &batch.masks.index_axis(Axis(0), i).to_owned().into_dyn(),
                    0.5,
                );
                per_image.push(ImageMetrics {
                    id: s.id.clone(),
                    domain: ds.name.clone(),
                    dice: dice_score(&pred, &target)?,
                    iou: iou_score(&pred, &target)?,
                });
            }
        }
    }
    let domains: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    let param_count = model.count_parameters(crate::model::ParamRole::Inference);
    Ok(finish_report(
        paradigm,
        fold,
        param_count,
        per_image,
        &domains,
    ))
}

/// Merge per-domain reports (the ST case: one model per domain) into one.
/// All inputs must share the paradigm tag and fold.
pub fn merge_reports(reports: Vec<EvalReport>) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return Err(MdvitError::contract("no reports to merge"));
    };
    let (paradigm, fold, params) = (first.paradigm.clone(), first.fold, first.param_count);
    if reports
        .iter()
        .any(|r| r.paradigm != paradigm || r.fold != fold)
    {
        return Err(MdvitError::contract(
            "cannot merge reports with different paradigm tags or folds",
        ));
    }
    let mut per_image = Vec::new();
    let mut domains = Vec::new();
    for r in reports {
        for d in &r.per_domain {
            if domains.contains(&d.domain) {
                return Err(MdvitError::contract(format!(
                    "domain '{}' appears in more than one report",
                    d.domain
                )));
            }
            domains.push(d.domain.clone());
        }
        per_image.extend(r.per_image);
    }
    Ok(finish_report(&paradigm, fold, params, per_image, &domains))
}

/// Cross-fold aggregate of one paradigm: mean and population std of the
/// cross-domain average, as in a "avg ± std" table column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub paradigm: String,
    pub folds: usize,
    pub mean_avg_dice: f64,
    pub std_avg_dice: f64,
    pub mean_avg_iou: f64,
    pub std_avg_iou: f64,
}

pub fn aggregate_folds(reports: &[EvalReport]) -> Result<FoldSummary> {
    let Some(first) = reports.first() else {
        return Err(MdvitError::contract("no reports to aggregate"));
    };
    if reports.iter().any(|r| r.paradigm != first.paradigm) {
        return Err(MdvitError::contract("mixed paradigms in fold aggregate"));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let std = |f: &dyn Fn(&EvalReport) -> f64, mu: f64| {
        (reports.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let md = mean(&|r: &EvalReport| r.avg_dice);
    let mi = mean(&|r: &EvalReport| r.avg_iou);
    Ok(FoldSummary {
        paradigm: first.paradigm.clone(),
        folds: reports.len(),
        mean_avg_dice: md,
        std_avg_dice: std(&|r: &EvalReport| r.avg_dice, md),
        mean_avg_iou: mi,
        std_avg_iou: std(&|r: &EvalReport| r.avg_iou, mi),
    })
}

/// One row of the paradigm comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub domain: String,
    pub st_dice: f64,
    pub jt_dice: f64,
    pub mat_dice: Option<f64>,
    /// JT under-performs ST by more than the margin on this domain.
    pub nkt: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub fold: usize,
    /// Dice-point margin (percent scale) for the NKT flag.
    pub margin: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Compare ST/JT(/MAT) reports over identical domains and flag negative
/// knowledge transfer: domains where JT falls more than `margin` Dice
/// points (percent scale) below ST.
pub fn compare_paradigms(reports: &[EvalReport], margin: f64) -> Result<Comparison> {
    let find = |tag: &str| reports.iter().find(|r| r.paradigm == tag);
    let st = find("st").ok_or_else(|| MdvitError::contract("missing 'st' report"))?;
    let jt = find("jt").ok_or_else(|| MdvitError::contract("missing 'jt' report"))?;
    let mat = find("mat");
    for r in reports {
        if r.fold != st.fold {
            return Err(MdvitError::contract("reports cover different folds"));
        }
    }
    let domains: Vec<&str> = st.per_domain.iter().map(|d| d.domain.as_str()).collect();
    let lookup = |r: &EvalReport, domain: &str| -> Result<f64> {
        r.per_domain
            .iter()
            .find(|d| d.domain == domain)
            .map(|d| d.mean_dice)
            .ok_or_else(|| {
                MdvitError::contract(format!(
                    "report '{}' does not cover domain '{domain}'",
                    r.paradigm
                ))
            })
    };
    let mut rows = Vec::with_capacity(domains.len());
    for domain in domains {
        let st_dice = lookup(st, domain)?;
        let jt_dice = lookup(jt, domain)?;
        let mat_dice = match mat {
            Some(r) => Some(lookup(r, domain)?),
            None => None,
        };
        rows.push(ComparisonRow {
            domain: domain.to_string(),
            st_dice,
            jt_dice,
            mat_dice,
            nkt: (st_dice - jt_dice) * 100.0 > margin,
        });
    }
    Ok(Comparison {
        fold: st.fold,
        margin,
        rows,
    })
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:.2}", v * 100.0)
    } else {
        "n/a".to_string()
    }
}

/// Aligned plain-text table, rows in percent with two decimals.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "paradigm {}  fold {}  params {}",
        report.paradigm, report.fold, report.param_count
    );
    let width = report
        .per_domain
        .iter()
        .map(|d| d.domain.len())
        .chain(["domain".len(), "average".len()])
        .max()
        .unwrap_or(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>6}",
        "domain", "dice", "iou", "images"
    );
    for d in &report.per_domain {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>6}",
            d.domain,
            pct(d.mean_dice),
            pct(d.mean_iou),
            d.images
        );
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}",
        "average",
        pct(report.avg_dice),
        pct(report.avg_iou)
    );
    out
}

/// CSV with one row per domain plus the average row, percent values.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("paradigm,fold,domain,images,dice,iou\n");
    for d in &report.per_domain {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            report.paradigm,
            report.fold,
            d.domain,
            d.images,
            pct(d.mean_dice),
            pct(d.mean_iou)
        );
    }
    let _ = writeln!(
        out,
        "{},{},average,{},{},{}",
        report.paradigm,
        report.fold,
        report.per_image.len(),
        pct(report.avg_dice),
        pct(report.avg_iou)
    );
    out
}

/// Comparison table with NKT flags.
pub fn comparison_table(cmp: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "fold {}  margin {} Dice points", cmp.fold, cmp.margin);
    let width = cmp
        .rows
        .iter()
        .map(|r| r.domain.len())
        .chain(["domain".len()])
        .max()
        .unwrap_or(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  flag",
        "domain", "st", "jt", "mat"
    );
    for r in &cmp.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {}",
            r.domain,
            pct(r.st_dice),
            pct(r.jt_dice),
            r.mat_dice.map(pct).unwrap_or_else(|| "-".to_string()),
            if r.nkt { "NKT" } else { "" }
        );
    }
    out
}

/// Write `stem.txt`, `stem.csv`, and the raw per-image JSON sidecar
/// `stem.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.txt")), report_table(report))?;
    std::fs::write(dir.join(format!("{stem}.csv")), report_csv(report))?;
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}
