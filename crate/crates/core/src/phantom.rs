//! Deterministic synthetic left-atrium phantoms.
//!
//! A phantom is an ellipsoidal blood pool with tubular protrusions (vein-like
//! stubs), a wall ring obtained by dilating the cavity, scar arcs painted on an
//! equatorial band of that wall, and a Gaussian intensity image in which scar is
//! the brightest class.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distance::{BACKGROUND, NORMAL_WALL, SCAR};
use crate::error::{Error, Result};
use crate::volume::{
    self, hex, read_labels, read_mvol, write_labels, write_mvol, Grid, LabelVolume, ValueKind,
    Volume3, VolumeHeader,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protrusion {
    /// Direction around the z axis, degrees.
    pub azimuth_deg: f64,
    /// Direction above the equator, degrees.
    pub elevation_deg: f64,
    /// Length beyond the ellipsoid surface, mm.
    pub length_mm: f64,
    pub radius_mm: f64,
}

/// An angular sector of the wall, measured around the z axis through the center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarArc {
    pub start_deg: f64,
    pub width_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub background: ClassIntensity,
    pub blood: ClassIntensity,
    pub wall: ClassIntensity,
    pub scar: ClassIntensity,
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self {
            background: ClassIntensity {
                mean: 0.15,
                std: 0.06,
            },
            blood: ClassIntensity {
                mean: 0.5,
                std: 0.06,
            },
            wall: ClassIntensity {
                mean: 0.3,
                std: 0.08,
            },
            scar: ClassIntensity {
                mean: 0.75,
                std: 0.1,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid center in mm; `None` centers it on the grid.
    pub center_mm: Option<[f64; 3]>,
    pub semi_axes_mm: [f64; 3],
    pub protrusions: Vec<Protrusion>,
    /// Wall thickness in voxels (6-connected dilation steps).
    pub wall_thickness: usize,
    pub scar_arcs: Vec<ScarArc>,
    /// Half height in mm of the equatorial band that carries scar.
    pub scar_band_half_height_mm: f64,
    /// Blood-bright spheres placed outside the atrium; not part of any label.
    pub confounders: usize,
    pub confounder_radius_mm: f64,
    pub intensity: IntensityModel,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            center_mm: None,
            semi_axes_mm: [9.0, 8.5, 6.5],
            protrusions: vec![
                Protrusion {
                    azimuth_deg: 45.0,
                    elevation_deg: 60.0,
                    length_mm: 3.0,
                    radius_mm: 2.0,
                },
                Protrusion {
                    azimuth_deg: 225.0,
                    elevation_deg: 60.0,
                    length_mm: 3.0,
                    radius_mm: 2.0,
                },
            ],
            wall_thickness: 2,
            scar_arcs: vec![ScarArc {
                start_deg: 30.0,
                width_deg: 90.0,
            }],
            scar_band_half_height_mm: 3.0,
            confounders: 0,
            confounder_radius_mm: 2.5,
            intensity: IntensityModel::default(),
            seed: 42,
        }
    }
}

impl PhantomSpec {
    /// Default spec on a cubic grid of side `n`, with the geometry scaled from the 32-voxel default.
    pub fn cube(n: usize) -> Self {
        let base = Self::default();
        let scale = n as f64 / 32.0;
        Self {
            dims: [n; 3],
            semi_axes_mm: base.semi_axes_mm.map(|a| a * scale),
            protrusions: base
                .protrusions
                .iter()
                .map(|p| Protrusion {
                    length_mm: p.length_mm * scale,
                    radius_mm: (p.radius_mm * scale).max(1.0),
                    ..*p
                })
                .collect(),
            scar_band_half_height_mm: (base.scar_band_half_height_mm * scale).max(1.0),
            wall_thickness: ((base.wall_thickness as f64 * scale).round() as usize).max(1),
            ..base
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing)
    }

    fn center(&self) -> [f64; 3] {
        self.center_mm.unwrap_or_else(|| {
            std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) * 0.5 * self.spacing[a])
        })
    }

    fn validate(&self) -> Result<()> {
        self.grid()?;
        if self
            .semi_axes_mm
            .iter()
            .any(|&a| !(a.is_finite() && a > 0.0))
        {
            return Err(Error::Infeasible("semi-axes must be positive".into()));
        }
        if self.wall_thickness == 0 {
            return Err(Error::Infeasible(
                "wall thickness must be at least 1 voxel".into(),
            ));
        }
        for p in &self.protrusions {
            if !(p.length_mm >= 0.0 && p.radius_mm > 0.0) {
                return Err(Error::Infeasible(
                    "protrusion length must be >= 0 and radius > 0".into(),
                ));
            }
        }
        let mut total = 0.0;
        for arc in &self.scar_arcs {
            if !(arc.width_deg > 0.0 && arc.width_deg <= 360.0) {
                return Err(Error::Infeasible(format!(
                    "arc width {} out of (0, 360]",
                    arc.width_deg
                )));
            }
            total += arc.width_deg;
        }
        if total > 360.0 {
            return Err(Error::Infeasible(format!(
                "scar arcs cover {total} degrees of the wall"
            )));
        }
        let margin = self.wall_thickness + 2;
        let c = self.center();
        for a in 0..3 {
            let lo = (c[a] - self.semi_axes_mm[a]) / self.spacing[a];
            let hi = (c[a] + self.semi_axes_mm[a]) / self.spacing[a];
            if lo < margin as f64 || hi > (self.dims[a] - 1 - margin) as f64 {
                return Err(Error::Infeasible(format!(
                    "ellipsoid spans voxels {lo:.1}..{hi:.1} along axis {a}; needs a {margin}-voxel margin"
                )));
            }
        }
        if self.scar_band_half_height_mm.is_nan() || self.scar_band_half_height_mm <= 0.0 {
            return Err(Error::Infeasible(
                "scar band half height must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub intensity: Volume3,
    pub la_label: LabelVolume,
    /// 0 background, 1 normal wall, 2 scar.
    pub wall_scar_label: LabelVolume,
    pub spec: PhantomSpec,
    pub checksum: String,
}

fn unit_direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    (0..3)
        .map(|i| (ap[i] - t * ab[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 6-connected dilation of a boolean mask by `steps` voxels.
pub fn dilate6(grid: Grid, mask: &[bool], steps: usize) -> Vec<bool> {
    let mut current = mask.to_vec();
    for _ in 0..steps {
        let next = (0..grid.len())
            .map(|i| current[i] || grid.neighbors6(i).any(|n| current[n]))
            .collect();
        current = next;
    }
    current
}

/// 6-connected erosion: a voxel survives when it and every in-grid neighbour are set.
pub fn erode6(grid: Grid, mask: &[bool], steps: usize) -> Vec<bool> {
    let mut current = mask.to_vec();
    for _ in 0..steps {
        let next = (0..grid.len())
            .map(|i| current[i] && grid.neighbors6(i).all(|n| current[n]))
            .collect();
        current = next;
    }
    current
}

fn azimuth_deg(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

fn in_arc(angle: f64, arc: &ScarArc) -> bool {
    (angle - arc.start_deg).rem_euclid(360.0) <= arc.width_deg
}

/// Builds one phantom. Identical specs give identical volumes and checksums.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let grid = spec.grid()?;
    let c = spec.center();
    let ax = spec.semi_axes_mm;
    let s = spec.spacing;
    let pos = |idx: usize| -> [f64; 3] {
        let v = grid.coords(idx);
        [v[0] as f64 * s[0], v[1] as f64 * s[1], v[2] as f64 * s[2]]
    };

    let segments: Vec<([f64; 3], [f64; 3], f64)> = spec
        .protrusions
        .iter()
        .map(|p| {
            let u = unit_direction(p.azimuth_deg, p.elevation_deg);
            let reach = 1.0 / (0..3).map(|i| (u[i] / ax[i]).powi(2)).sum::<f64>().sqrt();
            let end = std::array::from_fn(|i| c[i] + u[i] * (reach + p.length_mm));
            (c, end, p.radius_mm)
        })
        .collect();

    let cavity: Vec<bool> = (0..grid.len())
        .map(|i| {
            let p = pos(i);
            let e: f64 = (0..3).map(|a| ((p[a] - c[a]) / ax[a]).powi(2)).sum();
            e <= 1.0
                || segments
                    .iter()
                    .any(|&(a, b, r)| point_segment_distance(p, a, b) <= r)
        })
        .collect();

    let margin = spec.wall_thickness + 2;
    let dims = spec.dims;
    for (i, _) in cavity.iter().enumerate().filter(|(_, &v)| v) {
        let v = grid.coords(i);
        if (0..3).any(|a| v[a] < margin || v[a] + margin >= dims[a]) {
            return Err(Error::Infeasible(format!(
                "cavity voxel {v:?} lies within {margin} voxels of the grid border"
            )));
        }
    }

    let grown = dilate6(grid, &cavity, spec.wall_thickness);
    let mut wall_scar = vec![BACKGROUND; grid.len()];
    for i in 0..grid.len() {
        if grown[i] && !cavity[i] {
            let p = pos(i);
            let in_band = (p[2] - c[2]).abs() <= spec.scar_band_half_height_mm;
            let angle = azimuth_deg(p[0] - c[0], p[1] - c[1]);
            let scar = in_band && spec.scar_arcs.iter().any(|arc| in_arc(angle, arc));
            wall_scar[i] = if scar { SCAR } else { NORMAL_WALL };
        }
    }
    if !spec.scar_arcs.is_empty() && !wall_scar.contains(&SCAR) {
        return Err(Error::Infeasible(
            "scar arcs do not intersect the wall band".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // confounders: blood-bright spheres well clear of the wall
    let keep_out = dilate6(grid, &grown, 3);
    let mut blobs: Vec<[f64; 3]> = Vec::new();
    let r = spec.confounder_radius_mm;
    let mut attempts = 0;
    while blobs.len() < spec.confounders {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Infeasible(
                "no room for the requested confounders".into(),
            ));
        }
        let centre: [f64; 3] = std::array::from_fn(|a| {
            let extent = (dims[a] - 1) as f64 * s[a];
            rng.random_range((r + 1.0)..(extent - r - 1.0).max(r + 1.0 + 1e-9))
        });
        let fits = (0..grid.len()).all(|i| {
            let p = pos(i);
            let d2: f64 = (0..3).map(|a| (p[a] - centre[a]).powi(2)).sum();
            d2 > r * r || !keep_out[i]
        }) && blobs.iter().all(|b| {
            (0..3)
                .map(|a| (b[a] - centre[a]).powi(2))
                .sum::<f64>()
                .sqrt()
                > 2.0 * r + 2.0
        });
        if fits {
            blobs.push(centre);
        }
    }

    let draw = |m: &ClassIntensity| {
        Normal::new(m.mean, m.std).map_err(|e| Error::InvalidArgument(e.to_string()))
    };
    let (bg, blood, wall, scar) = (
        draw(&spec.intensity.background)?,
        draw(&spec.intensity.blood)?,
        draw(&spec.intensity.wall)?,
        draw(&spec.intensity.scar)?,
    );
    let intensity: Vec<f64> = (0..grid.len())
        .map(|i| {
            let dist = if cavity[i] {
                &blood
            } else {
                match wall_scar[i] {
                    SCAR => &scar,
                    NORMAL_WALL => &wall,
                    _ => {
                        let p = pos(i);
                        let in_blob = blobs
                            .iter()
                            .any(|b| (0..3).map(|a| (p[a] - b[a]).powi(2)).sum::<f64>() <= r * r);
                        if in_blob {
                            &blood
                        } else {
                            &bg
                        }
                    }
                }
            };
            dist.sample(&mut rng)
        })
        .collect();

    let intensity = Volume3::from_vec(grid, intensity)?;
    let la_label = LabelVolume::from_mask(grid, &cavity)?;
    let wall_scar_label =
        LabelVolume::from_labels(grid, &wall_scar, &[BACKGROUND, NORMAL_WALL, SCAR])?;
    let checksum = case_checksum(&intensity, &la_label, &wall_scar_label);
    Ok(PhantomCase {
        intensity,
        la_label,
        wall_scar_label,
        spec: spec.clone(),
        checksum,
    })
}

fn case_checksum(intensity: &Volume3, la: &LabelVolume, wall_scar: &LabelVolume) -> String {
    let mut hasher = Sha256::new();
    for v in [intensity, la.volume(), wall_scar.volume()] {
        for x in v.data() {
            hasher.update(x.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of case `index` in a suite; depends only on `(seed, index)`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Longest protrusion whose rounded tip still clears the border margin.
fn protrusion_room(base: &PhantomSpec, c: [f64; 3], ax: [f64; 3], p: &Protrusion) -> f64 {
    let u = unit_direction(p.azimuth_deg, p.elevation_deg);
    let reach = 1.0 / (0..3).map(|i| (u[i] / ax[i]).powi(2)).sum::<f64>().sqrt();
    let margin = (base.wall_thickness + 2) as f64;
    (0..3)
        .filter(|&a| u[a].abs() > 1e-9)
        .map(|a| {
            let s = base.spacing[a];
            // half a voxel of slack keeps boundary rounding off the margin
            let limit = if u[a] > 0.0 {
                (base.dims[a] as f64 - margin - 1.5) * s - c[a]
            } else {
                c[a] - (margin + 0.5) * s
            };
            (limit - p.radius_mm) / u[a].abs() - reach
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-case randomized variant of `base`: jittered axes and center, protrusions at
/// random azimuths, and 1–3 non-overlapping scar arcs of 40–90°.
pub fn randomized_spec(base: &PhantomSpec, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = base.dims[0].min(base.dims[1]).min(base.dims[2]) as f64 / 32.0;
    let semi_axes_mm = base
        .semi_axes_mm
        .map(|a| a + rng.random_range(-1.5..1.5) * scale);
    let center = base.center();
    let center_mm: [f64; 3] =
        std::array::from_fn(|a| center[a] + rng.random_range(-1.0..1.0) * base.spacing[a]);
    let first = rng.random_range(0.0..360.0);
    let protrusions = (0..base.protrusions.len().max(1))
        .map(|k| {
            let p = Protrusion {
                azimuth_deg: (first + 180.0 * k as f64 + rng.random_range(-30.0..30.0))
                    .rem_euclid(360.0),
                elevation_deg: rng.random_range(45.0..70.0),
                length_mm: rng.random_range(2.0..4.0) * scale,
                radius_mm: rng.random_range(1.5..2.5) * scale.max(0.5),
            };
            let room = protrusion_room(base, center_mm, semi_axes_mm, &p);
            Protrusion {
                length_mm: p.length_mm.min(room).max(0.0),
                ..p
            }
        })
        .collect();
    let n_arcs = rng.random_range(1..=3usize);
    let mut start: f64 = rng.random_range(0.0..360.0);
    let mut scar_arcs = Vec::with_capacity(n_arcs);
    for _ in 0..n_arcs {
        let width = rng.random_range(40.0..90.0);
        scar_arcs.push(ScarArc {
            start_deg: start.rem_euclid(360.0),
            width_deg: width,
        });
        // at most 3 × 90° arcs and 3 × 30° gaps, so arcs never wrap onto each other
        start += width + rng.random_range(20.0..30.0);
    }
    PhantomSpec {
        center_mm: Some(center_mm),
        semi_axes_mm,
        protrusions,
        scar_arcs,
        seed,
        ..base.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub checksum: String,
    pub intensity: FileEntry,
    pub la: FileEntry,
    pub wall_scar: FileEntry,
    pub spec: PhantomSpec,
}

/// `manifest.json` of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub base_spec: PhantomSpec,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FORMAT: &str = "scarq-suite/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// An in-memory suite of cases with their split assignment.
#[derive(Clone, Debug)]
pub struct Suite {
    pub manifest: Manifest,
    pub cases: Vec<PhantomCase>,
}

impl Suite {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&CaseEntry, &PhantomCase)> {
        self.manifest
            .cases
            .iter()
            .zip(&self.cases)
            .filter(move |(e, _)| e.split == split)
    }

    /// Reads a suite written by [`write_suite`], verifying every checksum.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported suite format {:?}",
                manifest.format
            )));
        }
        let check = |entry: &FileEntry, found: String| -> Result<()> {
            if found == entry.checksum {
                Ok(())
            } else {
                Err(Error::Checksum {
                    offset: 0,
                    expected: entry.checksum.clone(),
                    found,
                })
            }
        };
        let check_labels = |entry: &FileEntry, labels: &LabelVolume| {
            check(entry, volume::payload_checksum(labels.volume()))
        };
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for entry in &manifest.cases {
            let (h, intensity) = read_mvol(dir.join(&entry.intensity.path))?;
            check(&entry.intensity, h.checksum.unwrap_or_default())?;
            let la_label = read_labels(dir.join(&entry.la.path))?;
            check_labels(&entry.la, &la_label)?;
            let wall_scar_label = read_labels(dir.join(&entry.wall_scar.path))?;
            check_labels(&entry.wall_scar, &wall_scar_label)?;
            let checksum = case_checksum(&intensity, &la_label, &wall_scar_label);
            if checksum != entry.checksum {
                return Err(Error::Checksum {
                    offset: 0,
                    expected: entry.checksum.clone(),
                    found: checksum,
                });
            }
            cases.push(PhantomCase {
                intensity,
                la_label,
                wall_scar_label,
                spec: entry.spec.clone(),
                checksum,
            });
        }
        Ok(Self { manifest, cases })
    }
}

/// Generates `n_train + n_test` randomized cases in memory.
pub fn generate_suite(
    n_train: usize,
    n_test: usize,
    base: &PhantomSpec,
    seed: u64,
) -> Result<Suite> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "a suite needs at least one train and one test case".into(),
        ));
    }
    let mut entries = Vec::with_capacity(n_train + n_test);
    let mut cases = Vec::with_capacity(n_train + n_test);
    for index in 0..n_train + n_test {
        let cseed = case_seed(seed, index);
        let spec = randomized_spec(base, cseed);
        let case = generate(&spec)?;
        let id = format!("case_{index:03}");
        let file = |name: &str, v: &Volume3| FileEntry {
            path: format!("{id}/{name}.mvol"),
            checksum: volume::payload_checksum(v),
        };
        entries.push(CaseEntry {
            id: id.clone(),
            split: if index < n_train {
                Split::Train
            } else {
                Split::Test
            },
            seed: cseed,
            checksum: case.checksum.clone(),
            intensity: file("intensity", &case.intensity),
            la: file("la", case.la_label.volume()),
            wall_scar: file("wall_scar", case.wall_scar_label.volume()),
            spec,
        });
        cases.push(case);
    }
    Ok(Suite {
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            seed,
            n_train,
            n_test,
            base_spec: base.clone(),
            cases: entries,
        },
        cases,
    })
}

/// Writes the suite's case directories and manifest under `dir`; returns the manifest path.
pub fn write_suite(suite: &Suite, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for (entry, case) in suite.manifest.cases.iter().zip(&suite.cases) {
        let case_dir = dir.join(&entry.id);
        std::fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        write_mvol(
            dir.join(&entry.intensity.path),
            &VolumeHeader::new(&case.intensity, ValueKind::Intensity),
            &case.intensity,
        )?;
        write_labels(dir.join(&entry.la.path), &case.la_label)?;
        write_labels(dir.join(&entry.wall_scar.path), &case.wall_scar_label)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&suite.manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Fraction of the equatorial-band wall voxels labelled scar.
pub fn band_scar_fraction(case: &PhantomCase) -> f64 {
    let grid = case.la_label.grid();
    let c = case.spec.center();
    let s = case.spec.spacing;
    let (mut wall, mut scar) = (0usize, 0usize);
    for i in 0..grid.len() {
        let z = grid.coords(i)[2] as f64 * s[2];
        if (z - c[2]).abs() > case.spec.scar_band_half_height_mm {
            continue;
        }
        match case.wall_scar_label.label(i) {
            NORMAL_WALL => wall += 1,
            SCAR => {
                wall += 1;
                scar += 1
            }
            _ => {}
        }
    }
    scar as f64 / wall as f64
}
