//! LA surface masks, scar labelling of surface voxels and point-cloud export.

use std::fmt::Write as _;
use std::path::Path;

use crate::distance::{boundary_set, ChannelPair, NORMAL_WALL, SCAR};
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Volume3};

/// Default search radius (voxels) for nearest-label projection.
pub const DEFAULT_PROJECTION_RADIUS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Boundary set of a ground-truth label, values in {0, 1}.
    Hard,
    /// Normalized gradient magnitude of a predicted probability map, values in [0, 1].
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMask {
    mask: Volume3,
    kind: MaskKind,
}

impl SurfaceMask {
    pub fn values(&self) -> &Volume3 {
        &self.mask
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn grid(&self) -> Grid {
        self.mask.grid()
    }

    /// Linear indices of the voxels in a hard mask, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    fn ensure_hard(&self) -> Result<()> {
        match self.kind {
            MaskKind::Hard => Ok(()),
            MaskKind::Soft => Err(Error::InvalidArgument(
                "a hard surface mask is required".into(),
            )),
        }
    }
}

pub fn hard_boundary_mask(la: &LabelVolume) -> Result<SurfaceMask> {
    la.ensure_alphabet(&[0, 1])?;
    let boundary = boundary_set(la);
    if !boundary.iter().any(|&b| b) {
        return Err(Error::EmptyClass("LA label has an empty boundary".into()));
    }
    let data = boundary.iter().map(|&b| f64::from(u8::from(b))).collect();
    Ok(SurfaceMask {
        mask: Volume3::from_raw(la.grid(), data),
        kind: MaskKind::Hard,
    })
}

/// Per-axis finite-difference stencil: central inside, one-sided at the faces.
fn axis_stencil(q: usize, n: usize) -> Option<(usize, usize, f64)> {
    match n {
        1 => None,
        _ if q == 0 => Some((1, 0, 1.0)),
        _ if q == n - 1 => Some((n - 1, n - 2, 1.0)),
        _ => Some((q + 1, q - 1, 0.5)),
    }
}

fn gradient_components(field: &Volume3) -> [Vec<f64>; 3] {
    let grid = field.grid();
    let dims = grid.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let data = field.data();
    std::array::from_fn(|axis| {
        (0..grid.len())
            .map(|i| {
                let c = grid.coords(i);
                let base = i - c[axis] * strides[axis];
                match axis_stencil(c[axis], dims[axis]) {
                    Some((hi, lo, w)) => {
                        w * (data[base + hi * strides[axis]] - data[base + lo * strides[axis]])
                    }
                    None => 0.0,
                }
            })
            .collect()
    })
}

struct SoftMaskParts {
    components: [Vec<f64>; 3],
    magnitude: Vec<f64>,
    peak: usize,
}

fn soft_mask_parts(prob: &Volume3) -> Result<SoftMaskParts> {
    if let Some(i) = prob.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfRange(format!(
            "probability {} at voxel {i} outside [0, 1]",
            prob.data()[i]
        )));
    }
    let components = gradient_components(prob);
    let magnitude: Vec<f64> = (0..prob.len())
        .map(|i| {
            (components[0][i].powi(2) + components[1][i].powi(2) + components[2][i].powi(2)).sqrt()
        })
        .collect();
    let mut peak = 0;
    for (i, &g) in magnitude.iter().enumerate() {
        if g > magnitude[peak] {
            peak = i;
        }
    }
    if magnitude[peak] == 0.0 {
        return Err(Error::Degenerate(
            "probability map has zero gradient everywhere".into(),
        ));
    }
    Ok(SoftMaskParts {
        components,
        magnitude,
        peak,
    })
}

/// Gradient magnitude of a probability map divided by its maximum.
pub fn soft_boundary_mask(prob: &Volume3) -> Result<SurfaceMask> {
    let parts = soft_mask_parts(prob)?;
    let peak = parts.magnitude[parts.peak];
    let data = parts.magnitude.iter().map(|g| g / peak).collect();
    Ok(SurfaceMask {
        mask: Volume3::from_raw(prob.grid(), data),
        kind: MaskKind::Soft,
    })
}

/// Vector-Jacobian product of [`soft_boundary_mask`]: given `upstream = dL/dM`,
/// returns `dL/dprob`. The maximum is differentiated through its (first) argmax
/// and voxels with zero gradient magnitude contribute nothing.
pub fn soft_boundary_mask_vjp(prob: &Volume3, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != prob.len() {
        return Err(Error::GridMismatch(format!(
            "upstream gradient has {} entries for {} voxels",
            upstream.len(),
            prob.len()
        )));
    }
    let parts = soft_mask_parts(prob)?;
    let peak = parts.magnitude[parts.peak];

    // M_i = g_i / G with G = g_peak
    let mut adj_magnitude: Vec<f64> = upstream.iter().map(|u| u / peak).collect();
    let coupled: f64 = upstream
        .iter()
        .zip(&parts.magnitude)
        .map(|(u, g)| u * g)
        .sum::<f64>()
        / (peak * peak);
    adj_magnitude[parts.peak] -= coupled;

    let grid = prob.grid();
    let dims = grid.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut out = vec![0.0; prob.len()];
    for i in 0..prob.len() {
        let g = parts.magnitude[i];
        if g == 0.0 || adj_magnitude[i] == 0.0 {
            continue;
        }
        let c = grid.coords(i);
        for axis in 0..3 {
            let adj_component = adj_magnitude[i] * parts.components[axis][i] / g;
            if let Some((hi, lo, w)) = axis_stencil(c[axis], dims[axis]) {
                let base = i - c[axis] * strides[axis];
                out[base + hi * strides[axis]] += w * adj_component;
                out[base + lo * strides[axis]] -= w * adj_component;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceClass {
    Normal,
    Scar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurfacePoint {
    pub index: usize,
    pub coords: [usize; 3],
    pub class: SurfaceClass,
}

/// Surface voxels with a normal/scar class each, sorted by linear index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSurface {
    grid: Grid,
    points: Vec<SurfacePoint>,
}

impl LabeledSurface {
    pub fn new(grid: Grid, mut points: Vec<SurfacePoint>) -> Result<Self> {
        points.sort_by_key(|p| p.index);
        if points.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(Error::InvalidArgument("duplicate surface point".into()));
        }
        if let Some(p) = points
            .iter()
            .find(|p| p.index >= grid.len() || grid.coords(p.index) != p.coords)
        {
            return Err(Error::OutOfRange(format!(
                "surface point {} is not on the grid",
                p.index
            )));
        }
        Ok(Self { grid, points })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn points(&self) -> &[SurfacePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scar_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| p.class == SurfaceClass::Scar)
            .count()
    }

    /// {0,1,2} label with the surface points painted as normal wall or scar.
    pub fn to_label_volume(&self) -> LabelVolume {
        let mut labels = vec![0u8; self.grid.len()];
        for p in &self.points {
            labels[p.index] = match p.class {
                SurfaceClass::Normal => NORMAL_WALL,
                SurfaceClass::Scar => SCAR,
            };
        }
        LabelVolume::from_labels(self.grid, &labels, &[0, 1, 2]).expect("labels are in alphabet")
    }
}

/// Labels each surface voxel scar iff the predicted scar channel exceeds the normal channel.
pub fn classify_surface(pred: &ChannelPair, surface: &SurfaceMask) -> Result<LabeledSurface> {
    surface.ensure_hard()?;
    pred.grid()
        .ensure_same(&surface.grid(), "prediction/surface")?;
    let grid = surface.grid();
    let points = surface
        .support()
        .into_iter()
        .map(|index| SurfacePoint {
            index,
            coords: grid.coords(index),
            class: if pred.scar().data()[index] > pred.normal().data()[index] {
                SurfaceClass::Scar
            } else {
                SurfaceClass::Normal
            },
        })
        .collect();
    LabeledSurface::new(grid, points)
}

/// Gives each reference surface voxel the class of the nearest wall or scar voxel
/// of `label` within `radius` voxels (ties to the smaller linear index); normal if none.
pub fn project_volume_labels(
    label: &LabelVolume,
    reference: &SurfaceMask,
    radius: f64,
) -> Result<LabeledSurface> {
    reference.ensure_hard()?;
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "radius must be >= 0, got {radius}"
        )));
    }
    label
        .grid()
        .ensure_same(&reference.grid(), "label/reference surface")?;
    let grid = reference.grid();
    let reach = radius.floor() as isize;
    let r2 = radius * radius;
    let points = reference
        .support()
        .into_iter()
        .map(|index| {
            let c = grid.coords(index).map(|v| v as isize);
            let mut best: Option<(isize, usize, u8)> = None;
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let d2 = dx * dx + dy * dy + dz * dz;
                        if d2 as f64 > r2 {
                            continue;
                        }
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if !grid.contains(n) {
                            continue;
                        }
                        let ni = grid.index(n[0] as usize, n[1] as usize, n[2] as usize);
                        let l = label.label(ni);
                        if l != NORMAL_WALL && l != SCAR {
                            continue;
                        }
                        if best.is_none_or(|(bd, bi, _)| (d2, ni) < (bd, bi)) {
                            best = Some((d2, ni, l));
                        }
                    }
                }
            }
            SurfacePoint {
                index,
                coords: grid.coords(index),
                class: match best {
                    Some((_, _, SCAR)) => SurfaceClass::Scar,
                    _ => SurfaceClass::Normal,
                },
            }
        })
        .collect();
    LabeledSurface::new(grid, points)
}

/// ASCII PLY point cloud; scar vertices red, normal vertices white, coordinates in mm.
pub fn encode_ply(surface: &LabeledSurface) -> Result<String> {
    if surface.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot export an empty surface".into(),
        ));
    }
    let spacing = surface.grid().spacing();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", surface.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property float {axis}");
    }
    for channel in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {channel}");
    }
    out.push_str("end_header\n");
    for p in surface.points() {
        let (r, g, b) = match p.class {
            SurfaceClass::Scar => (255, 0, 0),
            SurfaceClass::Normal => (255, 255, 255),
        };
        let _ = writeln!(
            out,
            "{} {} {} {r} {g} {b}",
            p.coords[0] as f64 * spacing[0],
            p.coords[1] as f64 * spacing[1],
            p.coords[2] as f64 * spacing[2]
        );
    }
    Ok(out)
}

pub fn export_labeled_surface_ply(surface: &LabeledSurface, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(surface)?).map_err(|e| Error::io(path, e))
}
