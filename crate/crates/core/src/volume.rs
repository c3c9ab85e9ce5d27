//! Dense 3-D grids, label volumes and the MVOL / PGM file formats.
//!
//! Voxels are stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// Grid geometry shared by every volume: voxel counts and voxel size in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dims: Dims,
    spacing: Spacing,
}

impl Grid {
    pub fn new(dims: Dims, spacing: Spacing) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .is_none()
        {
            return Err(Error::InvalidArgument("grid too large".into()));
        }
        Ok(Self { dims, spacing })
    }

    /// Isotropic 1 mm grid.
    pub fn unit(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, c: [isize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
    }

    /// In-grid 6-neighbours of a voxel, in the order -x, +x, -y, +y, -z, +z.
    pub fn neighbors6(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(index);
        const OFFSETS: [[isize; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        OFFSETS.iter().filter_map(move |o| {
            let n = [
                c[0] as isize + o[0],
                c[1] as isize + o[1],
                c[2] as isize + o[2],
            ];
            self.contains(n)
                .then(|| self.index(n[0] as usize, n[1] as usize, n[2] as usize))
        })
    }

    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims || self.spacing != other.spacing {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }
}

/// A dense grid of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3 {
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::OutOfRange(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { grid, data })
    }

    /// Caller guarantees `data.len() == grid.len()` and finiteness.
    pub(crate) fn from_raw(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { grid, data }
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::OutOfRange("fill value must be finite".into()));
        }
        Ok(Self::from_raw(grid, vec![value; grid.len()]))
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::from_raw(grid, vec![0.0; grid.len()])
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::from_vec(grid, data)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dims(&self) -> Dims {
        self.grid.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.grid.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_vec(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Returns a copy with voxel values translated by `shift` voxels; voxels
    /// shifted in from outside the grid take `fill`.
    pub fn translated(&self, shift: [isize; 3], fill: f64) -> Self {
        let [nx, ny, nz] = self.dims();
        let mut out = vec![fill; self.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let src = [
                        i as isize - shift[0],
                        j as isize - shift[1],
                        k as isize - shift[2],
                    ];
                    if self.grid.contains(src) {
                        out[self.grid.index(i, j, k)] = self.data[self.grid.index(
                            src[0] as usize,
                            src[1] as usize,
                            src[2] as usize,
                        )];
                    }
                }
            }
        }
        Self::from_raw(self.grid, out)
    }
}

/// A volume whose values are restricted to a small integer alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    volume: Volume3,
    alphabet: Vec<u8>,
}

impl LabelVolume {
    pub fn new(volume: Volume3, alphabet: &[u8]) -> Result<Self> {
        let mut alphabet = alphabet.to_vec();
        alphabet.sort_unstable();
        alphabet.dedup();
        if alphabet.is_empty() {
            return Err(Error::InvalidArgument("empty label alphabet".into()));
        }
        check_alphabet(volume.data(), &alphabet)?;
        Ok(Self { volume, alphabet })
    }

    pub fn from_labels(grid: Grid, labels: &[u8], alphabet: &[u8]) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        let volume = Volume3::from_raw(grid, labels.iter().map(|&l| f64::from(l)).collect());
        Self::new(volume, alphabet)
    }

    /// Binary {0,1} label from a boolean mask.
    pub fn from_mask(grid: Grid, mask: &[bool]) -> Result<Self> {
        let labels: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
        Self::from_labels(grid, &labels, &[0, 1])
    }

    pub fn binary(volume: Volume3) -> Result<Self> {
        Self::new(volume, &[0, 1])
    }

    pub fn volume(&self) -> &Volume3 {
        &self.volume
    }

    pub fn grid(&self) -> Grid {
        self.volume.grid()
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    #[inline]
    pub fn label(&self, index: usize) -> u8 {
        self.volume.data[index] as u8
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.volume.data.iter().map(|&v| v as u8)
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels().map(|l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels().filter(|&l| l == class).count()
    }

    /// Binary label that is 1 where this label equals `class`.
    pub fn select(&self, class: u8) -> LabelVolume {
        let data = self
            .labels()
            .map(|l| f64::from(u8::from(l == class)))
            .collect();
        LabelVolume {
            volume: Volume3::from_raw(self.grid(), data),
            alphabet: vec![0, 1],
        }
    }

    /// Errors unless every voxel is drawn from `expected`.
    pub fn ensure_alphabet(&self, expected: &[u8]) -> Result<()> {
        match self
            .labels()
            .enumerate()
            .find(|(_, l)| !expected.contains(l))
        {
            Some((index, l)) => Err(Error::LabelOutOfAlphabet {
                index,
                value: f64::from(l),
                alphabet: expected.to_vec(),
            }),
            None => Ok(()),
        }
    }
}

fn check_alphabet(data: &[f64], alphabet: &[u8]) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        let ok = value.fract() == 0.0
            && (0.0..=255.0).contains(&value)
            && alphabet.binary_search(&(value as u8)).is_ok();
        if !ok {
            return Err(Error::LabelOutOfAlphabet {
                index,
                value,
                alphabet: alphabet.to_vec(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Intensity,
    Label,
    Probability,
    Distance,
    /// Flat model parameter vectors in checkpoints.
    Parameter,
}

impl ValueKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "intensity" => Self::Intensity,
            "label" => Self::Label,
            "probability" => Self::Probability,
            "distance" => Self::Distance,
            "parameter" => Self::Parameter,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl VolumeHeader {
    pub fn new(volume: &Volume3, kind: ValueKind) -> Self {
        Self {
            dims: volume.dims(),
            spacing: volume.spacing(),
            kind,
            alphabet: None,
            checksum: None,
        }
    }

    pub fn for_labels(labels: &LabelVolume) -> Self {
        Self {
            alphabet: Some(labels.alphabet().to_vec()),
            ..Self::new(labels.volume(), ValueKind::Label)
        }
    }

    fn validate_against(&self, volume: &Volume3) -> Result<()> {
        let inconsistent =
            |reason: String| Error::InvalidArgument(format!("header/payload: {reason}"));
        if self.dims != volume.dims() || self.spacing != volume.spacing() {
            return Err(inconsistent(format!(
                "header grid {:?}/{:?} vs volume {:?}/{:?}",
                self.dims,
                self.spacing,
                volume.dims(),
                volume.spacing()
            )));
        }
        match (self.kind, &self.alphabet) {
            (ValueKind::Label, Some(alphabet)) => {
                let mut sorted = alphabet.clone();
                sorted.sort_unstable();
                sorted.dedup();
                check_alphabet(volume.data(), &sorted)?;
            }
            (ValueKind::Label, None) => {
                return Err(inconsistent("label kind without alphabet".into()))
            }
            (_, Some(_)) => return Err(inconsistent("alphabet given for non-label kind".into())),
            (ValueKind::Probability, None) => {
                if let Some(i) = volume.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::OutOfRange(format!(
                        "probability volume has value {} at voxel {i}",
                        volume.data()[i]
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn payload_checksum(volume: &Volume3) -> String {
    let mut hasher = Sha256::new();
    for v in volume.data() {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Serializes a volume to MVOL bytes. The written header always carries the payload checksum.
pub fn encode_mvol(header: &VolumeHeader, volume: &Volume3) -> Result<Vec<u8>> {
    header.validate_against(volume)?;
    let checksum = payload_checksum(volume);
    if let Some(given) = &header.checksum {
        if *given != checksum {
            return Err(Error::InvalidArgument(format!(
                "header checksum {given} does not match payload {checksum}"
            )));
        }
    }
    let header = VolumeHeader {
        checksum: Some(checksum),
        ..header.clone()
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(volume.len() * 8);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

#[derive(Deserialize)]
struct RawHeader {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    kind: String,
    #[serde(default)]
    alphabet: Option<Vec<u8>>,
    #[serde(default)]
    checksum: Option<String>,
}

pub fn decode_mvol(bytes: &[u8]) -> Result<(VolumeHeader, Volume3)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader {
            offset: bytes.len(),
            reason: "no header terminator".into(),
        })?;
    let raw: RawHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::MalformedHeader {
            offset: e.column().saturating_sub(1),
            reason: e.to_string(),
        })?;
    let malformed = |reason: &str| Error::MalformedHeader {
        offset: 0,
        reason: reason.to_string(),
    };
    let kind = ValueKind::parse(&raw.kind).ok_or_else(|| Error::UnknownKind {
        offset: 0,
        kind: raw.kind.clone(),
    })?;
    let dims: Dims = raw
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| malformed("dims must have three entries"))?;
    let spacing: Spacing = raw
        .spacing
        .as_slice()
        .try_into()
        .map_err(|_| malformed("spacing must have three entries"))?;
    let grid = Grid::new(dims, spacing).map_err(|e| malformed(&e.to_string()))?;

    let start = newline + 1;
    let payload = &bytes[start..];
    let expected = grid.len() * 8;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            offset: start,
            expected,
            found: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(grid.len());
    for (n, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                offset: start + 8 * n,
            });
        }
        data.push(v);
    }
    let volume = Volume3::from_raw(grid, data);
    if let Some(expected) = &raw.checksum {
        let found = payload_checksum(&volume);
        if *expected != found {
            return Err(Error::Checksum {
                offset: start,
                expected: expected.clone(),
                found,
            });
        }
    }
    let header = VolumeHeader {
        dims,
        spacing,
        kind,
        alphabet: raw.alphabet,
        checksum: raw.checksum,
    };
    header.validate_against(&volume)?;
    Ok((header, volume))
}

pub fn write_mvol(path: impl AsRef<Path>, header: &VolumeHeader, volume: &Volume3) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mvol(header, volume)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<(VolumeHeader, Volume3)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes)
}

/// Reads an MVOL file that must hold a label volume.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (header, volume) = read_mvol(path)?;
    match (header.kind, header.alphabet) {
        (ValueKind::Label, Some(alphabet)) => LabelVolume::new(volume, &alphabet),
        _ => Err(Error::InvalidArgument(format!(
            "expected a label volume, found kind {:?}",
            header.kind
        ))),
    }
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    write_mvol(path, &VolumeHeader::for_labels(labels), labels.volume())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Extracts one slice as row-major 8-bit pixels `(width, height, pixels)`, windowed to `[lo, hi]`.
///
/// Slices normal to z are `nx` wide and `ny` tall; x-slices are `ny × nz`; y-slices are `nx × nz`.
pub fn slice_pixels(
    volume: &Volume3,
    axis: Axis,
    index: usize,
    window: (f64, f64),
) -> Result<(usize, usize, Vec<u8>)> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "degenerate window [{lo}, {hi}]"
        )));
    }
    let [nx, ny, nz] = volume.dims();
    let extent = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= extent {
        return Err(Error::OutOfRange(format!(
            "slice index {index} outside 0..{extent} along {axis}"
        )));
    }
    let (w, h) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut pixels = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let v = match axis {
                Axis::X => volume.get(index, col, row),
                Axis::Y => volume.get(col, index, row),
                Axis::Z => volume.get(col, row, index),
            };
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            pixels.push((t * 255.0).round() as u8);
        }
    }
    Ok((w, h, pixels))
}

/// Binary PGM (P5, maxval 255) of one slice.
pub fn export_slice_pgm(
    volume: &Volume3,
    axis: Axis,
    index: usize,
    window: (f64, f64),
) -> Result<Vec<u8>> {
    let (w, h, pixels) = slice_pixels(volume, axis, index, window)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
