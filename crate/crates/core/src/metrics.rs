//! Evaluation: volumetric Dice, surface distances, surface scar scores and the Otsu baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distance::{boundary_set, squared_distance_to};
use crate::error::{Error, Result};
use crate::surface::{
    hard_boundary_mask, project_volume_labels, LabeledSurface, SurfaceClass, SurfaceMask,
    SurfacePoint,
};
use crate::volume::{LabelVolume, Volume3};

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice_overlap(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    a.grid().ensure_same(&b.grid(), "dice operands")?;
    a.ensure_alphabet(&[0, 1])?;
    b.ensure_alphabet(&[0, 1])?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.labels().zip(b.labels()) {
        na += usize::from(x == 1);
        nb += usize::from(y == 1);
        both += usize::from(x == 1 && y == 1);
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// Distances in mm from each boundary voxel of `from` to the boundary of `to`, in linear-index order.
fn directed_distances(from: &[bool], to: &[bool], grid: crate::volume::Grid) -> Vec<f64> {
    let sq = squared_distance_to(grid, to, true);
    from.iter()
        .zip(sq)
        .filter(|(f, _)| **f)
        .map(|(_, d2)| d2.sqrt())
        .collect()
}

fn nonempty_boundary(label: &LabelVolume, what: &str) -> Result<Vec<bool>> {
    label.ensure_alphabet(&[0, 1])?;
    let b = boundary_set(label);
    if !b.iter().any(|&x| x) {
        return Err(Error::EmptyClass(format!("{what} has an empty boundary")));
    }
    Ok(b)
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    // nearest rank
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// `(ASD, HD)` in mm between the boundary sets of two binary labels.
///
/// ASD is the mean of the two directed mean distances; HD is the larger of the
/// two directed maxima.
pub fn surface_distances(a: &LabelVolume, b: &LabelVolume) -> Result<(f64, f64)> {
    surface_distances_percentile(a, b, 100.0)
}

/// As [`surface_distances`], with the directed maxima replaced by the given percentile.
pub fn surface_distances_percentile(
    a: &LabelVolume,
    b: &LabelVolume,
    hd_percentile: f64,
) -> Result<(f64, f64)> {
    if !(hd_percentile > 0.0 && hd_percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in (0, 100], got {hd_percentile}"
        )));
    }
    a.grid()
        .ensure_same(&b.grid(), "surface distance operands")?;
    let sa = nonempty_boundary(a, "first label")?;
    let sb = nonempty_boundary(b, "second label")?;
    let grid = a.grid();
    let ab = directed_distances(&sa, &sb, grid);
    let ba = directed_distances(&sb, &sa, grid);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let asd = 0.5 * (mean(&ab) + mean(&ba));
    let hd = if hd_percentile == 100.0 {
        ab.iter().chain(&ba).copied().fold(0.0, f64::max)
    } else {
        percentile(&ab, hd_percentile).max(percentile(&ba, hd_percentile))
    };
    Ok((asd, hd))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarScores {
    pub accuracy: f64,
    pub dice_s: f64,
    pub dice_g: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Scar-as-positive scores of a predicted surface labelling against the reference one.
///
/// Both surfaces must hold the same points. Ratios with an empty denominator
/// (no scar anywhere, no normal wall anywhere) are 1.
pub fn surface_scar_metrics(pred: &LabeledSurface, gt: &LabeledSurface) -> Result<ScarScores> {
    pred.grid().ensure_same(&gt.grid(), "surface labellings")?;
    if pred.len() != gt.len()
        || pred
            .points()
            .iter()
            .zip(gt.points())
            .any(|(p, g)| p.index != g.index)
    {
        return Err(Error::GridMismatch("surface point sets differ".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty surface".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in pred.points().iter().zip(gt.points()) {
        match (p.class, g.class) {
            (SurfaceClass::Scar, SurfaceClass::Scar) => tp += 1,
            (SurfaceClass::Scar, SurfaceClass::Normal) => fp += 1,
            (SurfaceClass::Normal, SurfaceClass::Scar) => fn_ += 1,
            (SurfaceClass::Normal, SurfaceClass::Normal) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let total = tp + fp + fn_ + tn;
    Ok(ScarScores {
        accuracy: ratio(tp + tn, total),
        dice_s: ratio(2 * tp, 2 * tp + fp + fn_),
        // scar: |A|+|M| = 2tp+fp+fn ; normal: 2tn+fn+fp
        dice_g: ratio(2 * (tp + tn), 2 * total),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    })
}

/// Number of histogram bins used by [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

/// Threshold maximizing the between-class variance of a 256-bin histogram over `[min, max]`.
///
/// When several cuts tie (empty bins between two modes) the middle of the tied
/// range is returned.
pub fn otsu_threshold(samples: &[f64]) -> Result<f64> {
    if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::OutOfRange(format!("non-finite sample {v}")));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if samples.len() < 2 || lo >= hi {
        return Err(Error::Degenerate(
            "Otsu needs at least two distinct values".into(),
        ));
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in samples {
        let bin = (((v - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[bin] += 1;
    }
    let total = samples.len() as f64;
    let center = |b: usize| lo + (b as f64 + 0.5) * width;
    let sum_all: f64 = (0..OTSU_BINS).map(|b| hist[b] as f64 * center(b)).sum();

    let mut best = f64::NEG_INFINITY;
    let (mut first, mut last) = (0, 0);
    let (mut w0, mut sum0) = (0.0, 0.0);
    for cut in 0..OTSU_BINS - 1 {
        w0 += hist[cut] as f64;
        sum0 += hist[cut] as f64 * center(cut);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best {
            best = between;
            first = cut;
            last = cut;
        } else if between == best {
            last = cut;
        }
    }
    // upper edges of the first and last tied cuts
    let edge = |cut: usize| lo + (cut + 1) as f64 * width;
    Ok(0.5 * (edge(first) + edge(last)))
}

/// Otsu baseline: each surface voxel takes the brightest non-LA intensity within
/// `radius` voxels, and is scar when that value exceeds the Otsu threshold of all such values.
pub fn otsu_surface_baseline(
    intensity: &Volume3,
    la: &LabelVolume,
    surface: &SurfaceMask,
    radius: f64,
) -> Result<LabeledSurface> {
    intensity.grid().ensure_same(&la.grid(), "intensity/LA")?;
    intensity
        .grid()
        .ensure_same(&surface.grid(), "intensity/surface")?;
    let grid = intensity.grid();
    let reach = radius.floor() as isize;
    let support = surface.support();
    let mut samples = Vec::with_capacity(support.len());
    for &index in &support {
        let c = grid.coords(index).map(|v| v as isize);
        let mut brightest = f64::NEG_INFINITY;
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if ((dx * dx + dy * dy + dz * dz) as f64) > radius * radius {
                        continue;
                    }
                    let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if !grid.contains(n) {
                        continue;
                    }
                    let ni = grid.index(n[0] as usize, n[1] as usize, n[2] as usize);
                    if la.label(ni) == 0 {
                        brightest = brightest.max(intensity.data()[ni]);
                    }
                }
            }
        }
        samples.push(if brightest.is_finite() {
            brightest
        } else {
            intensity.data()[index]
        });
    }
    let threshold = otsu_threshold(&samples)?;
    let points = support
        .iter()
        .zip(&samples)
        .map(|(&index, &s)| SurfacePoint {
            index,
            coords: grid.coords(index),
            class: if s > threshold {
                SurfaceClass::Scar
            } else {
                SurfaceClass::Normal
            },
        })
        .collect();
    LabeledSurface::new(grid, points)
}

/// One row of the per-case evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub dice_la: f64,
    pub asd_mm: f64,
    pub hd_mm: f64,
    pub accuracy: f64,
    pub dice_s: f64,
    pub dice_g: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "case_id,dice_la,asd_mm,hd_mm,accuracy,dice_s,dice_g,sensitivity,specificity";

pub fn metrics_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.case_id,
            r.dice_la,
            r.asd_mm,
            r.hd_mm,
            r.accuracy,
            r.dice_s,
            r.dice_g,
            r.sensitivity,
            r.specificity
        );
    }
    out
}

/// Scores a predicted LA and predicted surface labelling against ground truth.
///
/// Both the predicted and the reference labellings are projected onto the
/// ground-truth LA surface with a nearest-label search of `radius` voxels.
pub fn evaluate_case(
    case_id: &str,
    pred_la: &LabelVolume,
    pred_surface: &LabeledSurface,
    gt_la: &LabelVolume,
    gt_wall_scar: &LabelVolume,
    radius: f64,
) -> Result<MetricsReport> {
    evaluate_case_percentile(
        case_id,
        pred_la,
        pred_surface,
        gt_la,
        gt_wall_scar,
        radius,
        100.0,
    )
}

/// [`evaluate_case`] with HD taken at `hd_percentile` instead of the maximum.
pub fn evaluate_case_percentile(
    case_id: &str,
    pred_la: &LabelVolume,
    pred_surface: &LabeledSurface,
    gt_la: &LabelVolume,
    gt_wall_scar: &LabelVolume,
    radius: f64,
    hd_percentile: f64,
) -> Result<MetricsReport> {
    let dice_la = dice_overlap(pred_la, gt_la)?;
    let (asd_mm, hd_mm) = surface_distances_percentile(pred_la, gt_la, hd_percentile)?;
    let reference = hard_boundary_mask(gt_la)?;
    let gt_labels = project_volume_labels(gt_wall_scar, &reference, radius)?;
    let pred_labels = project_volume_labels(&pred_surface.to_label_volume(), &reference, radius)?;
    let s = surface_scar_metrics(&pred_labels, &gt_labels)?;
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        dice_la,
        asd_mm,
        hd_mm,
        accuracy: s.accuracy,
        dice_s: s.dice_s,
        dice_g: s.dice_g,
        sensitivity: s.sensitivity,
        specificity: s.specificity,
    })
}
