//! Objective terms for joint LA segmentation and scar quantification, each with
//! its closed-form gradient with respect to the predictions.
//!
//! All sums run over every voxel and are unnormalized unless a [`Reduction::Mean`]
//! is requested, which divides values and gradients by the voxel count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distance::{ChannelPair, SignedDistanceMap};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::surface::{soft_boundary_mask, soft_boundary_mask_vjp, SurfaceMask};
use crate::volume::{Grid, LabelVolume, Volume3};

/// Clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the Dice-loss denominator.
pub const DICE_SMOOTH: f64 = 1.0;
/// Threshold separating LA from background.
pub const T_LA: f64 = 0.5;

/// A scalar term and its gradient with respect to one prediction volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Volume3,
}

/// A scalar term over the two scar-head channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm {
    pub value: f64,
    pub grad_normal: Volume3,
    pub grad_scar: Volume3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTerm {
    pub value: f64,
    pub grad_normal: Volume3,
    pub grad_scar: Volume3,
    pub grad_mask: Volume3,
}

fn finite(grid: Grid, data: Vec<f64>, what: &str) -> Result<Volume3> {
    Volume3::from_vec(grid, data)
        .map_err(|_| Error::OutOfRange(format!("{what}: non-finite gradient")))
}

fn check_probabilities(v: &Volume3, what: &str) -> Result<()> {
    match v.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(i) => Err(Error::OutOfRange(format!(
            "{what}: value {} at voxel {i} outside [0, 1]",
            v.data()[i]
        ))),
        None => Ok(()),
    }
}

fn bce_terms(pred: &[f64], target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    pred.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let value = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            let grad = if pc == p {
                -y / pc + (1.0 - y) / (1.0 - pc)
            } else {
                0.0
            };
            (value, grad)
        })
        .unzip()
}

/// Negated binary log-likelihood `-sum[y ln p + (1-y) ln(1-p)]`, probabilities clamped to `[eps, 1-eps]`.
pub fn bce(pred: &Volume3, target: &LabelVolume) -> Result<Term> {
    pred.grid()
        .ensure_same(&target.grid(), "bce prediction/target")?;
    target.ensure_alphabet(&[0, 1])?;
    check_probabilities(pred, "bce prediction")?;
    let (values, grad) = bce_terms(pred.data(), target.volume().data());
    Ok(Term {
        value: pairwise_sum(&values),
        grad: finite(pred.grid(), grad, "bce")?,
    })
}

/// `sum (p - t) * phi`: linear in the prediction, gradient `phi`.
pub fn se_la(pred: &Volume3, dtm: &SignedDistanceMap, t_la: f64) -> Result<Term> {
    pred.grid()
        .ensure_same(&dtm.grid(), "se_la prediction/distance map")?;
    let phi = dtm.values().data();
    let terms: Vec<f64> = pred
        .data()
        .iter()
        .zip(phi)
        .map(|(p, f)| (p - t_la) * f)
        .collect();
    Ok(Term {
        value: pairwise_sum(&terms),
        grad: dtm.values().clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScarMetric {
    #[default]
    L2,
    Hellinger,
}

impl FromStr for ScarMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(ScarMetric::L2),
            "hellinger" => Ok(ScarMetric::Hellinger),
            other => Err(Error::InvalidArgument(format!(
                "unknown scar metric {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ScarMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScarMetric::L2 => "l2",
            ScarMetric::Hellinger => "hellinger",
        })
    }
}

/// Squared discrepancy between predicted and target DPM channels, summed over both channels.
pub fn se_scar(pred: &ChannelPair, target: &ChannelPair, metric: ScarMetric) -> Result<PairTerm> {
    pred.grid()
        .ensure_same(&target.grid(), "se_scar prediction/target")?;
    let grid = pred.grid();
    let channel = |p: &Volume3, t: &Volume3| -> Result<(Vec<f64>, Vec<f64>)> {
        match metric {
            ScarMetric::L2 => Ok(p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&ph, &pt)| ((ph - pt).powi(2), 2.0 * (ph - pt)))
                .unzip()),
            ScarMetric::Hellinger => {
                if let Some(i) = p.data().iter().chain(t.data()).position(|&v| v <= 0.0) {
                    return Err(Error::OutOfRange(format!(
                        "hellinger needs positive channels (entry {i})"
                    )));
                }
                Ok(p.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&ph, &pt)| {
                        let (sh, st) = (ph.sqrt(), pt.sqrt());
                        ((sh - st).powi(2), 1.0 - st / sh)
                    })
                    .unzip())
            }
        }
    };
    let (vn, gn) = channel(pred.normal(), target.normal())?;
    let (vs, gs) = channel(pred.scar(), target.scar())?;
    let per_voxel: Vec<f64> = vn.iter().zip(&vs).map(|(a, b)| a + b).collect();
    Ok(PairTerm {
        value: pairwise_sum(&per_voxel),
        grad_normal: finite(grid, gn, "se_scar")?,
        grad_scar: finite(grid, gs, "se_scar")?,
    })
}

/// Channel-wise BCE of the scar head against binary normal-wall/scar indicators.
pub fn bce_channels(pred: &ChannelPair, target: &ChannelPair) -> Result<PairTerm> {
    pred.grid()
        .ensure_same(&target.grid(), "bce_channels prediction/target")?;
    check_probabilities(pred.normal(), "normal channel")?;
    check_probabilities(pred.scar(), "scar channel")?;
    let grid = pred.grid();
    let (vn, gn) = bce_terms(pred.normal().data(), target.normal().data());
    let (vs, gs) = bce_terms(pred.scar().data(), target.scar().data());
    let per_voxel: Vec<f64> = vn.iter().zip(&vs).map(|(a, b)| a + b).collect();
    Ok(PairTerm {
        value: pairwise_sum(&per_voxel),
        grad_normal: finite(grid, gn, "bce_channels")?,
        grad_scar: finite(grid, gs, "bce_channels")?,
    })
}

/// Attention term `sum (M (dp_hat - dp))^2` with `dp = p_normal - p_scar`.
pub fn sa(pred: &ChannelPair, target: &ChannelPair, mask: &SurfaceMask) -> Result<AttentionTerm> {
    pred.grid()
        .ensure_same(&target.grid(), "sa prediction/target")?;
    pred.grid()
        .ensure_same(&mask.grid(), "sa prediction/mask")?;
    check_probabilities(mask.values(), "attention mask")?;
    let grid = pred.grid();
    let dp_hat = pred.difference();
    let dp = target.difference();
    let m = mask.values().data();
    let n = grid.len();
    let mut terms = Vec::with_capacity(n);
    let mut g_normal = Vec::with_capacity(n);
    let mut g_mask = Vec::with_capacity(n);
    for i in 0..n {
        let e = dp_hat[i] - dp[i];
        terms.push((m[i] * e).powi(2));
        g_normal.push(2.0 * m[i] * m[i] * e);
        g_mask.push(2.0 * m[i] * e * e);
    }
    let g_scar = g_normal.iter().map(|g| -g).collect();
    Ok(AttentionTerm {
        value: pairwise_sum(&terms),
        grad_normal: finite(grid, g_normal, "sa")?,
        grad_scar: finite(grid, g_scar, "sa")?,
        grad_mask: finite(grid, g_mask, "sa")?,
    })
}

/// Soft Dice loss `1 - 2 sum(p y) / (sum p + sum y + 1)`.
pub fn dice_loss(pred: &Volume3, target: &LabelVolume) -> Result<Term> {
    pred.grid()
        .ensure_same(&target.grid(), "dice prediction/target")?;
    target.ensure_alphabet(&[0, 1])?;
    check_probabilities(pred, "dice prediction")?;
    let y = target.volume().data();
    let p = pred.data();
    let products: Vec<f64> = p.iter().zip(y).map(|(a, b)| a * b).collect();
    let inter = pairwise_sum(&products);
    let denom = pairwise_sum(p) + pairwise_sum(y) + DICE_SMOOTH;
    let grad = y
        .iter()
        .map(|&yj| -2.0 * (yj * denom - inter) / (denom * denom))
        .collect();
    Ok(Term {
        value: 1.0 - 2.0 * inter / denom,
        grad: finite(pred.grid(), grad, "dice")?,
    })
}

/// Balancing weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub la: f64,
    pub scar: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            la: 0.01,
            scar: 10.0,
            m1: 0.01,
            m2: 0.001,
        }
    }
}

impl Weights {
    pub const ZERO: Weights = Weights {
        la: 0.0,
        scar: 0.0,
        m1: 0.0,
        m2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("la", self.la),
            ("scar", self.scar),
            ("m1", self.m1),
            ("m2", self.m2),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "weight {name} must be >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for Weights {
    type Err = Error;

    /// Parses `la=0.01,scar=10,m1=0.01,m2=0.001`; omitted keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut w = Weights::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad weight entry {part:?}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad weight value in {part:?}")))?;
            match key.trim() {
                "la" => w.la = value,
                "scar" => w.scar = value,
                "m1" => w.m1 = value,
                "m2" => w.m2 = value,
                other => return Err(Error::InvalidArgument(format!("unknown weight {other:?}"))),
            }
        }
        w.validate()?;
        Ok(w)
    }
}

/// Whether the predicted-boundary mask passes gradients back to the LA prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M2Mode {
    #[default]
    Differentiable,
    StopGradient,
}

impl FromStr for M2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differentiable" => Ok(M2Mode::Differentiable),
            "stop-gradient" | "stop_gradient" => Ok(M2Mode::StopGradient),
            other => Err(Error::InvalidArgument(format!("unknown m2 mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Which optional terms are active on top of the LA cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSet {
    pub se_la: bool,
    pub se_scar: bool,
    /// Binary cross-entropy of the scar head against hard wall/scar indicators.
    pub bce_scar: bool,
    pub sa_m1: bool,
    pub sa_m2: bool,
}

impl TermSet {
    pub const FULL: TermSet = TermSet {
        se_la: true,
        se_scar: true,
        bce_scar: false,
        sa_m1: true,
        sa_m2: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub terms: TermSet,
    pub m2_mode: M2Mode,
    pub scar_metric: ScarMetric,
    pub reduction: Reduction,
    pub t_la: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            terms: TermSet::FULL,
            m2_mode: M2Mode::default(),
            scar_metric: ScarMetric::default(),
            reduction: Reduction::default(),
            t_la: T_LA,
        }
    }
}

/// Ground truth for one case.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub la_label: LabelVolume,
    pub la_dtm: SignedDistanceMap,
    pub dpm: ChannelPair,
    /// Hard boundary of the ground-truth LA.
    pub m1: SurfaceMask,
    /// Binary normal-wall/scar indicators; required only by the `bce_scar` term.
    pub scar_indicators: Option<ChannelPair>,
}

impl LossTargets {
    pub fn grid(&self) -> Grid {
        self.la_label.grid()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub bce_la: f64,
    pub se_la: f64,
    pub se_scar: f64,
    pub bce_scar: f64,
    pub sa_m1: f64,
    pub sa_m2: f64,
    pub total: f64,
    /// Weights actually applied; disabled terms show as zero.
    pub weights: Weights,
    pub grad_la: Volume3,
    pub grad_normal: Volume3,
    pub grad_scar: Volume3,
}

impl LossReport {
    /// Recombines the term values with the weight snapshot.
    pub fn weighted_sum(&self) -> f64 {
        self.bce_la
            + self.weights.la * self.se_la
            + self.weights.scar * (self.se_scar + self.bce_scar)
            + self.weights.m1 * self.sa_m1
            + self.weights.m2 * self.sa_m2
    }
}

/// The full joint objective with default settings (every term, summed, L2 scar metric).
pub fn total_loss(
    pred_la: &Volume3,
    pred_dpm: &ChannelPair,
    targets: &LossTargets,
    weights: &Weights,
    m2_mode: M2Mode,
) -> Result<LossReport> {
    let config = ObjectiveConfig {
        m2_mode,
        ..ObjectiveConfig::default()
    };
    objective(pred_la, pred_dpm, targets, weights, &config)
}

/// Assembles the selected terms, their weighted total and the gradients with
/// respect to the LA prediction and both scar-head channels.
pub fn objective(
    pred_la: &Volume3,
    pred_dpm: &ChannelPair,
    targets: &LossTargets,
    weights: &Weights,
    config: &ObjectiveConfig,
) -> Result<LossReport> {
    weights.validate()?;
    let grid = targets.grid();
    grid.ensure_same(&pred_la.grid(), "LA prediction")?;
    grid.ensure_same(&pred_dpm.grid(), "scar prediction")?;
    let n = grid.len();
    let terms = config.terms;
    let effective = Weights {
        la: if terms.se_la { weights.la } else { 0.0 },
        scar: if terms.se_scar || terms.bce_scar {
            weights.scar
        } else {
            0.0
        },
        m1: if terms.sa_m1 { weights.m1 } else { 0.0 },
        m2: if terms.sa_m2 { weights.m2 } else { 0.0 },
    };

    let bce_la = bce(pred_la, &targets.la_label)?;
    let mut grad_la = bce_la.grad.into_data();
    let mut grad_normal = vec![0.0; n];
    let mut grad_scar = vec![0.0; n];
    let accumulate = |dst: &mut [f64], src: &Volume3, w: f64| {
        for (d, s) in dst.iter_mut().zip(src.data()) {
            *d += w * s;
        }
    };

    let mut se_la_value = 0.0;
    if terms.se_la {
        let t = se_la(pred_la, &targets.la_dtm, config.t_la)?;
        accumulate(&mut grad_la, &t.grad, effective.la);
        se_la_value = t.value;
    }
    let mut se_scar_value = 0.0;
    if terms.se_scar {
        let t = se_scar(pred_dpm, &targets.dpm, config.scar_metric)?;
        accumulate(&mut grad_normal, &t.grad_normal, effective.scar);
        accumulate(&mut grad_scar, &t.grad_scar, effective.scar);
        se_scar_value = t.value;
    }
    let mut bce_scar_value = 0.0;
    if terms.bce_scar {
        let indicators = targets.scar_indicators.as_ref().ok_or_else(|| {
            Error::InvalidArgument("bce_scar needs binary scar indicators".into())
        })?;
        let t = bce_channels(pred_dpm, indicators)?;
        accumulate(&mut grad_normal, &t.grad_normal, effective.scar);
        accumulate(&mut grad_scar, &t.grad_scar, effective.scar);
        bce_scar_value = t.value;
    }
    let mut sa_m1_value = 0.0;
    if terms.sa_m1 {
        let t = sa(pred_dpm, &targets.dpm, &targets.m1)?;
        accumulate(&mut grad_normal, &t.grad_normal, effective.m1);
        accumulate(&mut grad_scar, &t.grad_scar, effective.m1);
        sa_m1_value = t.value;
    }
    let mut sa_m2_value = 0.0;
    if terms.sa_m2 {
        let m2 = soft_boundary_mask(pred_la)?;
        let t = sa(pred_dpm, &targets.dpm, &m2)?;
        accumulate(&mut grad_normal, &t.grad_normal, effective.m2);
        accumulate(&mut grad_scar, &t.grad_scar, effective.m2);
        if config.m2_mode == M2Mode::Differentiable && effective.m2 != 0.0 {
            let upstream: Vec<f64> = t
                .grad_mask
                .data()
                .iter()
                .map(|g| effective.m2 * g)
                .collect();
            let through_mask = soft_boundary_mask_vjp(pred_la, &upstream)?;
            for (d, s) in grad_la.iter_mut().zip(&through_mask) {
                *d += s;
            }
        }
        sa_m2_value = t.value;
    }

    let scale = match config.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut report = LossReport {
        bce_la: bce_la.value * scale,
        se_la: se_la_value * scale,
        se_scar: se_scar_value * scale,
        bce_scar: bce_scar_value * scale,
        sa_m1: sa_m1_value * scale,
        sa_m2: sa_m2_value * scale,
        total: 0.0,
        weights: effective,
        grad_la: finite(
            grid,
            grad_la.into_iter().map(|g| g * scale).collect(),
            "total",
        )?,
        grad_normal: finite(
            grid,
            grad_normal.into_iter().map(|g| g * scale).collect(),
            "total",
        )?,
        grad_scar: finite(
            grid,
            grad_scar.into_iter().map(|g| g * scale).collect(),
            "total",
        )?,
    };
    report.total = report.weighted_sum();
    if !report.total.is_finite() {
        return Err(Error::OutOfRange("objective is not finite".into()));
    }
    Ok(report)
}
