//! Exact signed Euclidean distance maps and distance-probability maps.
//!
//! The boundary set `S` of a binary label is the set of foreground voxels with
//! at least one in-grid background 6-neighbour. Voxels of `S` get distance 0,
//! the remaining foreground is negative and the background positive.
//!
//! Squared distances come from three separable lower-envelope passes (one per
//! axis) over a field seeded with 0 on the source set and +inf elsewhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume3};

pub const DEFAULT_CLIP: f64 = 50.0;

/// Background, normal wall and scar ids in a wall/scar label.
pub const BACKGROUND: u8 = 0;
pub const NORMAL_WALL: u8 = 1;
pub const SCAR: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceMap {
    values: Volume3,
    beta: f64,
    clip: f64,
    spacing_aware: bool,
}

impl SignedDistanceMap {
    pub fn values(&self) -> &Volume3 {
        &self.values
    }

    pub fn into_values(self) -> Volume3 {
        self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn spacing_aware(&self) -> bool {
        self.spacing_aware
    }

    pub fn grid(&self) -> Grid {
        self.values.grid()
    }

    /// Wraps precomputed values, e.g. a map read back from disk.
    pub fn from_values(values: Volume3, beta: f64, clip: f64, spacing_aware: bool) -> Result<Self> {
        check_params(beta, clip)?;
        let bound = clip.powf(beta);
        if let Some(i) = values.data().iter().position(|v| v.abs() > bound) {
            return Err(Error::OutOfRange(format!(
                "|phi| at voxel {i} exceeds clip^beta = {bound}"
            )));
        }
        Ok(Self {
            values,
            beta,
            clip,
            spacing_aware,
        })
    }
}

fn check_params(beta: f64, clip: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !(clip.is_finite() && clip > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip must be positive, got {clip}"
        )));
    }
    Ok(())
}

/// Foreground voxels with at least one background 6-neighbour inside the grid.
pub fn boundary_set(label: &LabelVolume) -> Vec<bool> {
    let grid = label.grid();
    (0..grid.len())
        .map(|i| label.label(i) != 0 && grid.neighbors6(i).any(|n| label.label(n) == 0))
        .collect()
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel of
/// `sources`. Distances are in voxels, or in mm when `spacing_aware` is set.
/// Returns +inf everywhere when `sources` is empty.
pub fn squared_distance_to(grid: Grid, sources: &[bool], spacing_aware: bool) -> Vec<f64> {
    assert_eq!(sources.len(), grid.len());
    let [nx, ny, nz] = grid.dims();
    let weights = if spacing_aware {
        grid.spacing()
    } else {
        [1.0; 3]
    };
    let mut field: Vec<f64> = sources
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let longest = nx.max(ny).max(nz);
    let mut envelope = Envelope::with_capacity(longest);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // (axis length, stride, starting indices of every line along that axis)
    let passes: [(usize, usize, Vec<usize>); 3] = [
        (nx, 1, (0..ny * nz).map(|jk| jk * nx).collect()),
        (
            ny,
            nx,
            (0..nz)
                .flat_map(|k| (0..nx).map(move |i| i + nx * ny * k))
                .collect(),
        ),
        (nz, nx * ny, (0..nx * ny).collect()),
    ];
    for (axis, (len, stride, starts)) in passes.iter().enumerate() {
        for &start in starts {
            for q in 0..*len {
                line[q] = field[start + q * stride];
            }
            envelope.transform(&line[..*len], weights[axis], &mut out[..*len]);
            for q in 0..*len {
                field[start + q * stride] = out[q];
            }
        }
    }
    field
}

/// One-dimensional lower envelope of parabolas `f(p) + (w (q - p))^2`.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n),
        }
    }

    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let w2 = w * w;
        for (q, &fq) in f.iter().enumerate() {
            if fq.is_infinite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let pf = p as f64;
                let s = ((fq + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
                if self.sites.len() > 1 && s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, slot) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < qf {
                k += 1;
            }
            let p = self.sites[k];
            let dq = w * (qf - p as f64);
            *slot = f[p] + dq * dq;
        }
    }
}

#[inline]
fn penalty(d: f64, beta: f64, clip: f64) -> f64 {
    let d = d.min(clip);
    if beta == 1.0 {
        d
    } else {
        d.powf(beta)
    }
}

/// Signed distance map of a binary label: `-d^beta` inside, 0 on `S`, `+d^beta` outside,
/// with `d` clipped to `clip` before exponentiation.
pub fn signed_edt(
    label: &LabelVolume,
    beta: f64,
    clip: f64,
    spacing_aware: bool,
) -> Result<SignedDistanceMap> {
    check_params(beta, clip)?;
    label.ensure_alphabet(&[0, 1])?;
    let boundary = boundary_set(label);
    if !boundary.iter().any(|&b| b) {
        let what = if label.count(1) == 0 {
            "foreground"
        } else {
            "background"
        };
        return Err(Error::EmptyClass(format!(
            "label has no {what}; boundary set is empty"
        )));
    }
    let grid = label.grid();
    let sq = squared_distance_to(grid, &boundary, spacing_aware);
    let data = (0..grid.len())
        .map(|i| {
            if boundary[i] {
                0.0
            } else {
                let magnitude = penalty(sq[i].sqrt(), beta, clip);
                if label.label(i) == 1 {
                    -magnitude
                } else {
                    magnitude
                }
            }
        })
        .collect();
    Ok(SignedDistanceMap {
        values: Volume3::from_raw(grid, data),
        beta,
        clip,
        spacing_aware,
    })
}

/// Unsigned distance to the nearest voxel of `class` (0 on the class itself), clipped at `clip`.
pub fn class_distance(
    label: &LabelVolume,
    class: u8,
    clip: f64,
    spacing_aware: bool,
) -> Result<SignedDistanceMap> {
    check_params(1.0, clip)?;
    let sources = label.mask(class);
    if !sources.iter().any(|&s| s) {
        return Err(Error::EmptyClass(format!("class {class} has no voxels")));
    }
    let grid = label.grid();
    let data = squared_distance_to(grid, &sources, spacing_aware)
        .into_iter()
        .map(|sq| sq.sqrt().min(clip))
        .collect();
    Ok(SignedDistanceMap {
        values: Volume3::from_raw(grid, data),
        beta: 1.0,
        clip,
        spacing_aware,
    })
}

/// Distance magnitudes to the normal-wall set and to the scar set of a {0,1,2} label.
pub fn dual_class_dtm(
    label: &LabelVolume,
    spacing_aware: bool,
) -> Result<(SignedDistanceMap, SignedDistanceMap)> {
    label.ensure_alphabet(&[BACKGROUND, NORMAL_WALL, SCAR])?;
    Ok((
        class_distance(label, NORMAL_WALL, DEFAULT_CLIP, spacing_aware)?,
        class_distance(label, SCAR, DEFAULT_CLIP, spacing_aware)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpmVariant {
    Exp,
    Expit,
    #[serde(rename = "exp-norm")]
    ExpNormalized,
    #[serde(rename = "expit-norm")]
    ExpitNormalized,
}

impl DpmVariant {
    pub const ALL: [DpmVariant; 4] = [
        DpmVariant::Exp,
        DpmVariant::Expit,
        DpmVariant::ExpNormalized,
        DpmVariant::ExpitNormalized,
    ];

    pub fn is_normalized(self) -> bool {
        matches!(
            self,
            DpmVariant::ExpNormalized | DpmVariant::ExpitNormalized
        )
    }

    /// Unnormalized channel value for a distance magnitude.
    pub fn raw(self, magnitude: f64) -> f64 {
        let m = magnitude.abs();
        match self {
            DpmVariant::Exp | DpmVariant::ExpNormalized => (-m).exp(),
            DpmVariant::Expit | DpmVariant::ExpitNormalized => 1.0 / (1.0 + m.exp()),
        }
    }
}

impl FromStr for DpmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exp" => DpmVariant::Exp,
            "expit" => DpmVariant::Expit,
            "exp-norm" => DpmVariant::ExpNormalized,
            "expit-norm" => DpmVariant::ExpitNormalized,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown DPM variant {other:?}"
                )))
            }
        })
    }
}

impl fmt::Display for DpmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DpmVariant::Exp => "exp",
            DpmVariant::Expit => "expit",
            DpmVariant::ExpNormalized => "exp-norm",
            DpmVariant::ExpitNormalized => "expit-norm",
        })
    }
}

/// Per-voxel `(normal, scar)` channels on a shared grid: targets or network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPair {
    normal: Volume3,
    scar: Volume3,
}

impl ChannelPair {
    pub fn new(normal: Volume3, scar: Volume3) -> Result<Self> {
        normal
            .grid()
            .ensure_same(&scar.grid(), "normal/scar channels")?;
        Ok(Self { normal, scar })
    }

    pub fn normal(&self) -> &Volume3 {
        &self.normal
    }

    pub fn scar(&self) -> &Volume3 {
        &self.scar
    }

    pub fn grid(&self) -> Grid {
        self.normal.grid()
    }

    pub fn len(&self) -> usize {
        self.normal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normal.is_empty()
    }

    /// `normal - scar` per voxel.
    pub fn difference(&self) -> Vec<f64> {
        self.normal
            .data()
            .iter()
            .zip(self.scar.data())
            .map(|(n, s)| n - s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProbabilityMap {
    channels: ChannelPair,
    background: Option<Volume3>,
    variant: DpmVariant,
}

impl DistanceProbabilityMap {
    pub fn channels(&self) -> &ChannelPair {
        &self.channels
    }

    pub fn into_channels(self) -> ChannelPair {
        self.channels
    }

    pub fn normal(&self) -> &Volume3 {
        self.channels.normal()
    }

    pub fn scar(&self) -> &Volume3 {
        self.channels.scar()
    }

    /// Third-class probability, present for normalized variants.
    pub fn background(&self) -> Option<&Volume3> {
        self.background.as_ref()
    }

    pub fn variant(&self) -> DpmVariant {
        self.variant
    }
}

/// Converts wall and scar distance maps into probability channels.
///
/// Normalized variants need the background distance map and divide each of the
/// three raw channels by their per-voxel sum.
pub fn build_dpm(
    wall: &SignedDistanceMap,
    scar: &SignedDistanceMap,
    background: Option<&SignedDistanceMap>,
    variant: DpmVariant,
) -> Result<DistanceProbabilityMap> {
    let grid = wall.grid();
    grid.ensure_same(&scar.grid(), "wall/scar distance maps")?;
    let raw = |m: &SignedDistanceMap| -> Vec<f64> {
        m.values.data().iter().map(|&v| variant.raw(v)).collect()
    };
    let normal = raw(wall);
    let scar_ch = raw(scar);
    if !variant.is_normalized() {
        return Ok(DistanceProbabilityMap {
            channels: ChannelPair::new(
                Volume3::from_raw(grid, normal),
                Volume3::from_raw(grid, scar_ch),
            )?,
            background: None,
            variant,
        });
    }
    let background = background.ok_or_else(|| {
        Error::InvalidArgument(format!("variant {variant} needs a background distance map"))
    })?;
    grid.ensure_same(&background.grid(), "background distance map")?;
    let bg = raw(background);
    let mut pn = Vec::with_capacity(grid.len());
    let mut ps = Vec::with_capacity(grid.len());
    let mut pb = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let total = normal[i] + scar_ch[i] + bg[i];
        pn.push(normal[i] / total);
        ps.push(scar_ch[i] / total);
        pb.push(bg[i] / total);
    }
    Ok(DistanceProbabilityMap {
        channels: ChannelPair::new(Volume3::from_raw(grid, pn), Volume3::from_raw(grid, ps))?,
        background: Some(Volume3::from_raw(grid, pb)),
        variant,
    })
}

/// Target DPM of a {0,1,2} wall/scar label in voxel units.
pub fn dpm_from_labels(label: &LabelVolume, variant: DpmVariant) -> Result<DistanceProbabilityMap> {
    let (wall, scar) = dual_class_dtm(label, false)?;
    let background = if variant.is_normalized() {
        Some(class_distance(label, BACKGROUND, DEFAULT_CLIP, false)?)
    } else {
        None
    };
    build_dpm(&wall, &scar, background.as_ref(), variant)
}
