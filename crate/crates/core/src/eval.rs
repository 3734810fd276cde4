//! Desk-scale evaluation: axis-aligned BEV IoU, average precision over 40
//! recall positions, per-bin depth MAE and uncertainty tables grouped by
//! difficulty or noise stratum.
//!
//! Matching follows the score-ordered greedy rule: detections sorted by
//! descending score each claim the highest-IoU unmatched ground truth at or
//! above the threshold. Precision is sampled at recalls `k/40` with
//! right-max interpolation. Ground truth marked `Ignored` never enters
//! matching or counts.

use std::io::{self, Write};

use thiserror::Error;

use crate::dap::DepthMode;
use crate::geometry::geometric_depth;
use crate::kitti::DifficultyLevel;
use crate::model::{forward, MlpParams, ModelError};
use crate::query::build_dab_query;
use crate::synth::Dataset;
use crate::uncertainty::{Attribute, LogVariances};
use crate::{real, Real};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate BEV rectangle")]
    DegenerateRect,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] crate::uncertainty::UncertaintyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned ground-plane rectangle, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevRect<F> {
    x_min: F,
    z_min: F,
    x_max: F,
    z_max: F,
}

impl<F: Real> BevRect<F> {
    pub fn new(x_min: F, z_min: F, x_max: F, z_max: F) -> Result<Self, EvalError> {
        if !(x_min < x_max && z_min < z_max) {
            return Err(EvalError::DegenerateRect);
        }
        Ok(Self {
            x_min,
            z_min,
            x_max,
            z_max,
        })
    }

    /// Rectangle from a center and side lengths.
    pub fn centered(x: F, z: F, width: F, length: F) -> Result<Self, EvalError> {
        let half = real::<F>(0.5);
        Self::new(
            x - width * half,
            z - length * half,
            x + width * half,
            z + length * half,
        )
    }

    fn area(&self) -> F {
        (self.x_max - self.x_min) * (self.z_max - self.z_min)
    }
}

/// Intersection over union of two BEV rectangles.
pub fn bev_iou<F: Real>(a: &BevRect<F>, b: &BevRect<F>) -> F {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(F::zero());
    let iz = (a.z_max.min(b.z_max) - a.z_min.max(b.z_min)).max(F::zero());
    let inter = ix * iz;
    let union = a.area() + b.area() - inter;
    if union <= F::zero() {
        F::zero()
    } else {
        inter / union
    }
}

/// One scored detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<F> {
    pub bev: BevRect<F>,
    pub depth: F,
    pub class_idx: usize,
    pub score: F,
}

/// One ground-truth object for matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject<F> {
    pub bev: BevRect<F>,
    pub depth: F,
    pub class_idx: usize,
    pub difficulty: DifficultyLevel,
}

/// Score-ordered greedy matching within one scene; returns `(score, is_tp)`
/// per detection. Ignored ground truth is excluded before matching.
pub fn match_scene<F: Real>(
    dets: &[Detection<F>],
    gts: &[GtObject<F>],
    iou_thresh: F,
) -> (Vec<(F, bool)>, usize) {
    let active: Vec<&GtObject<F>> = gts
        .iter()
        .filter(|g| g.difficulty != DifficultyLevel::Ignored)
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; active.len()];
    let mut out = Vec::with_capacity(dets.len());
    for di in order {
        let det = &dets[di];
        let mut best: Option<(usize, F)> = None;
        for (gi, gt) in active.iter().enumerate() {
            if taken[gi] || gt.class_idx != det.class_idx {
                continue;
            }
            let iou = bev_iou(&det.bev, &gt.bev);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                out.push((det.score, true));
            }
            None => out.push((det.score, false)),
        }
    }
    (out, active.len())
}

/// Average precision over 40 recall positions from pooled `(score, is_tp)`
/// pairs. `None` when there is no ground truth.
pub fn ap_from_matches<F: Real>(matches: &[(F, bool)], num_gt: usize) -> Option<F> {
    if num_gt == 0 {
        return None;
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut points = Vec::with_capacity(sorted.len()); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (_, is_tp) in sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }
    let mut total = 0.0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        total += p;
    }
    Some(real::<F>(total / 40.0))
}

/// Single-scene average precision; see [`match_scene`] and
/// [`ap_from_matches`].
pub fn ap_r40<F: Real>(
    dets: &[Detection<F>],
    gts: &[GtObject<F>],
    iou_thresh: F,
) -> Option<F> {
    let (matches, num_gt) = match_scene(dets, gts, iou_thresh);
    ap_from_matches(&matches, num_gt)
}

/// AP pooled over scenes for one class at one difficulty ceiling
/// (`difficulty <= level`, the benchmark's cumulative convention).
pub fn ap_r40_scenes<F: Real>(
    scenes: &[(Vec<Detection<F>>, Vec<GtObject<F>>)],
    class_idx: usize,
    level: DifficultyLevel,
    iou_thresh: F,
) -> Option<F> {
    let mut pooled = Vec::new();
    let mut num_gt = 0usize;
    for (dets, gts) in scenes {
        let dets: Vec<Detection<F>> = dets
            .iter()
            .filter(|d| d.class_idx == class_idx)
            .copied()
            .collect();
        let gts: Vec<GtObject<F>> = gts
            .iter()
            .filter(|g| {
                g.class_idx == class_idx
                    && g.difficulty != DifficultyLevel::Ignored
                    && g.difficulty <= level
            })
            .copied()
            .collect();
        let (matches, n) = match_scene(&dets, &gts, iou_thresh);
        pooled.extend(matches);
        num_gt += n;
    }
    ap_from_matches(&pooled, num_gt)
}

/// Per-bin depth MAE rows: `(lo, hi, count, mae)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMaeReport<F> {
    pub bins: Vec<(F, F, usize, Option<F>)>,
    pub overall: Option<F>,
    pub count: usize,
}

/// Mean absolute depth error per bin (binned by ground-truth depth) plus the
/// overall value; empty bins report as absent.
pub fn depth_mae<F: Real>(pairs: &[(F, F)], edges: &[F]) -> DepthMaeReport<F> {
    assert!(edges.len() >= 2, "need at least one bin");
    let n_bins = edges.len() - 1;
    let mut sums = vec![(F::zero(), 0usize); n_bins];
    let mut total = F::zero();
    for &(pred, gt) in pairs {
        let err = (pred - gt).abs();
        total += err;
        for b in 0..n_bins {
            let last = b == n_bins - 1;
            if gt >= edges[b] && (gt < edges[b + 1] || (last && gt == edges[b + 1])) {
                sums[b].0 += err;
                sums[b].1 += 1;
                break;
            }
        }
    }
    let bins = (0..n_bins)
        .map(|b| {
            let (sum, count) = sums[b];
            let mae = (count > 0).then(|| sum / real::<F>(count as f64));
            (edges[b], edges[b + 1], count, mae)
        })
        .collect();
    let overall = (!pairs.is_empty()).then(|| total / real::<F>(pairs.len() as f64));
    DepthMaeReport {
        bins,
        overall,
        count: pairs.len(),
    }
}

/// Summary statistics of one `(group, attribute)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRow<F> {
    pub group: String,
    pub attribute: Attribute,
    pub count: usize,
    pub mean_log_sigma: F,
    pub q25: F,
    pub median: F,
    pub q75: F,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Collects per-attribute statistics from `(group key, log-variances)`
/// samples; rows come out sorted by group then attribute.
pub fn uncertainty_table<F: Real>(samples: &[(String, LogVariances<F>)]) -> Vec<UncertaintyRow<F>> {
    let mut groups: Vec<String> = samples.iter().map(|(g, _)| g.clone()).collect();
    groups.sort();
    groups.dedup();
    let mut rows = Vec::new();
    for group in groups {
        for attr in Attribute::ALL {
            let mut values: Vec<f64> = samples
                .iter()
                .filter(|(g, _)| *g == group)
                .map(|(_, lv)| lv.get(attr).to_f64().unwrap_or(f64::NAN))
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let count = values.len();
            let mean = values.iter().sum::<f64>() / count.max(1) as f64;
            rows.push(UncertaintyRow {
                group: group.clone(),
                attribute: attr,
                count,
                mean_log_sigma: real(mean),
                q25: real(quantile(&values, 0.25)),
                median: real(quantile(&values, 0.5)),
                q75: real(quantile(&values, 0.75)),
            });
        }
    }
    rows
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let n = vals.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return 0.0;
    }
    cov / (var_x * var_y).sqrt()
}

/// One object's depth views under a trained model: the reconstruction
/// prediction/target in the query's depth space, the absolute depths, and
/// the grouping metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEvalSample<F> {
    pub recon_pred: F,
    pub recon_target: F,
    pub abs_pred: F,
    pub abs_truth: F,
    pub stratum: usize,
    pub difficulty: DifficultyLevel,
}

/// Runs the model over every ingestible object's clean label query.
pub fn depth_eval_samples<F: Real>(
    params: &MlpParams<F>,
    dataset: &Dataset<F>,
    mode: DepthMode,
) -> Result<Vec<DepthEvalSample<F>>, EvalError> {
    let c = params.num_classes();
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        for obj in &scene.objects {
            let Some(clean) =
                crate::dap::CleanLabel::from_object_label(&obj.label, &scene.calib, mode, c)
            else {
                continue;
            };
            let q = build_dab_query(&clean.box_proj, clean.depth, clean.class_idx, c);
            let pred = forward(&q.vec, params)?.depth;
            let abs_pred = match mode {
                DepthMode::Absolute => pred,
                DepthMode::Residual => {
                    let d_geo = geometric_depth(
                        obj.label.height3d(),
                        obj.label.pixel_height(),
                        scene.calib.fy,
                    )
                    .map_err(|_| EvalError::DegenerateRect)
                    .unwrap_or(F::zero());
                    d_geo + pred
                }
            };
            out.push(DepthEvalSample {
                recon_pred: pred,
                recon_target: clean.depth,
                abs_pred,
                abs_truth: obj.truth_box.z,
                stratum: obj.stratum,
                difficulty: obj.difficulty,
            });
        }
    }
    Ok(out)
}

/// Reconstruction depth MAE against the labels the model was trained to
/// reproduce, in meters.
pub fn recon_depth_mae<F: Real>(samples: &[DepthEvalSample<F>]) -> Option<F> {
    if samples.is_empty() {
        return None;
    }
    let sum = samples
        .iter()
        .fold(F::zero(), |acc, s| acc + (s.recon_pred - s.recon_target).abs());
    Some(sum / real::<F>(samples.len() as f64))
}

/// Per-stratum reconstruction depth MAE.
pub fn recon_depth_mae_by_stratum<F: Real>(
    samples: &[DepthEvalSample<F>],
    num_strata: usize,
) -> Vec<Option<F>> {
    (0..num_strata)
        .map(|s| {
            let filtered: Vec<DepthEvalSample<F>> = samples
                .iter()
                .filter(|x| x.stratum == s)
                .copied()
                .collect();
            recon_depth_mae(&filtered)
        })
        .collect()
}

/// Log-variance samples from clean label queries keyed by difficulty level
/// (evaluated levels only).
pub fn uncertainty_by_difficulty<F: Real>(
    params: &MlpParams<F>,
    dataset: &Dataset<F>,
    mode: DepthMode,
) -> Result<Vec<UncertaintyRow<F>>, EvalError> {
    let samples = logvar_samples(params, dataset, mode, |obj| {
        DifficultyLevel::EVALUATED
            .contains(&obj.difficulty)
            .then(|| obj.difficulty.as_str().to_string())
    })?;
    Ok(uncertainty_table(&samples))
}

/// Log-variance samples keyed by noise stratum.
pub fn uncertainty_by_stratum<F: Real>(
    params: &MlpParams<F>,
    dataset: &Dataset<F>,
    mode: DepthMode,
) -> Result<Vec<UncertaintyRow<F>>, EvalError> {
    let samples = logvar_samples(params, dataset, mode, |obj| Some(obj.stratum.to_string()))?;
    Ok(uncertainty_table(&samples))
}

/// Raw per-object log-variances with a caller-supplied grouping key.
pub fn logvar_samples<F: Real>(
    params: &MlpParams<F>,
    dataset: &Dataset<F>,
    mode: DepthMode,
    group: impl Fn(&crate::synth::SynthObject<F>) -> Option<String>,
) -> Result<Vec<(String, LogVariances<F>)>, EvalError> {
    let c = params.num_classes();
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        for obj in &scene.objects {
            let Some(key) = group(obj) else { continue };
            let Some(clean) =
                crate::dap::CleanLabel::from_object_label(&obj.label, &scene.calib, mode, c)
            else {
                continue;
            };
            let q = build_dab_query(&clean.box_proj, clean.depth, clean.class_idx, c);
            let out_heads = forward(&q.vec, params)?;
            out.push((key, out_heads.log_variances()?));
        }
    }
    Ok(out)
}

pub fn write_ap_csv<F: Real, W: Write>(
    mut w: W,
    rows: &[(usize, DifficultyLevel, Option<F>)],
) -> io::Result<()> {
    writeln!(w, "class,difficulty,ap")?;
    for (class, level, ap) in rows {
        match ap {
            Some(v) => writeln!(
                w,
                "{},{},{}",
                class,
                level.as_str(),
                v.to_f64().unwrap_or(f64::NAN)
            )?,
            None => writeln!(w, "{},{},", class, level.as_str())?,
        }
    }
    Ok(())
}

pub fn write_depth_mae_csv<F: Real, W: Write>(
    mut w: W,
    report: &DepthMaeReport<F>,
) -> io::Result<()> {
    writeln!(w, "bin_lo,bin_hi,count,mae")?;
    let g = |v: F| v.to_f64().unwrap_or(f64::NAN);
    for (lo, hi, count, mae) in &report.bins {
        match mae {
            Some(v) => writeln!(w, "{},{},{},{}", g(*lo), g(*hi), count, g(*v))?,
            None => writeln!(w, "{},{},{},", g(*lo), g(*hi), count)?,
        }
    }
    match report.overall {
        Some(v) => writeln!(w, ",,{},{}", report.count, g(v))?,
        None => writeln!(w, ",,0,")?,
    }
    Ok(())
}

pub fn write_uncertainty_csv<F: Real, W: Write>(
    mut w: W,
    rows: &[UncertaintyRow<F>],
) -> io::Result<()> {
    writeln!(w, "group,attribute,count,mean_log_sigma,q25,median,q75")?;
    let g = |v: F| v.to_f64().unwrap_or(f64::NAN);
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.group,
            r.attribute.as_str(),
            r.count,
            g(r.mean_log_sigma),
            g(r.q25),
            g(r.median),
            g(r.q75)
        )?;
    }
    Ok(())
}
