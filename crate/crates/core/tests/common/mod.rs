//! Independent brute-force oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls the code under test for the quantity it checks: distances
//! are all-pairs scans, projections are exhaustive neighbourhood searches and
//! scores are plain counts.
#![allow(dead_code)]

use rand::{Rng, RngCore};
use scarq_core::distance::{dpm_from_labels, signed_edt, DpmVariant};
use scarq_core::losses::LossTargets;
use scarq_core::surface::hard_boundary_mask;
use scarq_core::{Grid, LabelVolume};

/// Spacings whose squares and products are exact in binary floating point.
pub const DYADIC_SPACINGS: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

pub fn random_dims(rng: &mut impl RngCore, max: usize) -> [usize; 3] {
    std::array::from_fn(|_| rng.random_range(2..=max))
}

pub fn random_spacing(rng: &mut impl RngCore) -> [f64; 3] {
    std::array::from_fn(|_| DYADIC_SPACINGS[rng.random_range(0..DYADIC_SPACINGS.len())])
}

/// Random binary label with both classes present.
pub fn random_binary(rng: &mut impl RngCore, grid: Grid) -> LabelVolume {
    let p = rng.random_range(0.1..0.6);
    let mut mask: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(p)).collect();
    let a = rng.random_range(0..grid.len());
    let mut b = rng.random_range(0..grid.len());
    if b == a {
        b = (a + 1) % grid.len();
    }
    mask[a] = true;
    mask[b] = false;
    LabelVolume::from_mask(grid, &mask).unwrap()
}

/// Foreground voxels with a background 6-neighbour, by direct coordinate checks.
pub fn brute_boundary(label: &LabelVolume) -> Vec<bool> {
    let grid = label.grid();
    let [nx, ny, nz] = grid.dims();
    let at = |i: isize, j: isize, k: isize| -> Option<u8> {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            None
        } else {
            Some(label.label(i as usize + nx * (j as usize + ny * k as usize)))
        }
    };
    let mut out = vec![false; grid.len()];
    for k in 0..nz as isize {
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                if at(i, j, k) != Some(1) {
                    continue;
                }
                let offsets = [
                    (1, 0, 0),
                    (-1, 0, 0),
                    (0, 1, 0),
                    (0, -1, 0),
                    (0, 0, 1),
                    (0, 0, -1),
                ];
                out[i as usize + nx * (j as usize + ny * k as usize)] = offsets
                    .iter()
                    .any(|&(a, b, c)| at(i + a, j + b, k + c) == Some(0));
            }
        }
    }
    out
}

pub fn coords(grid: Grid, index: usize) -> [usize; 3] {
    let [nx, ny, _] = grid.dims();
    [index % nx, (index / nx) % ny, index / (nx * ny)]
}

pub fn squared_between(grid: Grid, a: usize, b: usize, spacing_aware: bool) -> f64 {
    let s = if spacing_aware {
        grid.spacing()
    } else {
        [1.0; 3]
    };
    let (ca, cb) = (coords(grid, a), coords(grid, b));
    (0..3)
        .map(|ax| {
            let d = (ca[ax] as f64 - cb[ax] as f64) * s[ax];
            d * d
        })
        .sum()
}

/// All-pairs squared distance from every voxel to the nearest source voxel.
pub fn brute_squared_distances(grid: Grid, sources: &[bool], spacing_aware: bool) -> Vec<f64> {
    let src: Vec<usize> = (0..grid.len()).filter(|&i| sources[i]).collect();
    (0..grid.len())
        .map(|i| {
            src.iter()
                .map(|&j| squared_between(grid, i, j, spacing_aware))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A box-shaped LA with a one-voxel wall ring split into normal wall and scar halves.
pub fn box_case(dims: [usize; 3]) -> (LabelVolume, LabelVolume) {
    let grid = Grid::unit(dims).unwrap();
    let inside = |c: [usize; 3]| (0..3).all(|a| c[a] >= 2 && c[a] + 2 < dims[a]);
    let la: Vec<bool> = (0..grid.len()).map(|i| inside(coords(grid, i))).collect();
    let ring = |c: [usize; 3]| (0..3).all(|a| c[a] >= 1 && c[a] + 1 < dims[a]) && !inside(c);
    let labels: Vec<u8> = (0..grid.len())
        .map(|i| {
            let c = coords(grid, i);
            if !ring(c) {
                0
            } else if c[0] < dims[0] / 2 {
                1
            } else {
                2
            }
        })
        .collect();
    (
        LabelVolume::from_mask(grid, &la).unwrap(),
        LabelVolume::from_labels(grid, &labels, &[0, 1, 2]).unwrap(),
    )
}

pub fn targets(la: &LabelVolume, wall_scar: &LabelVolume) -> LossTargets {
    LossTargets {
        la_label: la.clone(),
        la_dtm: signed_edt(la, 1.0, 50.0, false).unwrap(),
        dpm: dpm_from_labels(wall_scar, DpmVariant::Exp)
            .unwrap()
            .into_channels(),
        m1: hard_boundary_mask(la).unwrap(),
        scar_indicators: None,
    }
}
