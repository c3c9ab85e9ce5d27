//! Browser demo: one phantom, three views of it.
//!
//! * the signed LA distance map at a chosen exponent,
//! * the normal/scar distance probability maps for each construction,
//! * the spatially encoded LA penalty of a prediction shifted off the truth.
//!
//! All views are z-slices returned as flat row-major `Float64Array`s of
//! `width() * height()` values; the page does its own colouring.

use scarq_core::distance::{dpm_from_labels, signed_edt, DpmVariant};
use scarq_core::losses::{se_la, T_LA};
use scarq_core::phantom::{generate, randomized_spec, PhantomCase, PhantomSpec};
use scarq_core::volume::{LabelVolume, Volume3};
use scarq_core::Result;
use wasm_bindgen::prelude::*;

const CLIP: f64 = 50.0;

/// Plain-Rust side of the demo, usable and testable off the browser.
pub struct Scene {
    case: PhantomCase,
}

impl Scene {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let spec = randomized_spec(&PhantomSpec::cube(size), seed);
        Ok(Self {
            case: generate(&spec)?,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.case.intensity.dims()
    }

    fn slice(&self, volume: &Volume3, z: usize) -> Vec<f64> {
        let [nx, ny, nz] = self.dims();
        let z = z.min(nz - 1);
        (0..ny)
            .flat_map(|j| (0..nx).map(move |i| volume.get(i, j, z)))
            .collect()
    }

    pub fn intensity(&self, z: usize) -> Vec<f64> {
        self.slice(&self.case.intensity, z)
    }

    /// Wall/scar labels, for outlining the scar arcs on top of any view.
    pub fn labels(&self, z: usize) -> Vec<f64> {
        self.slice(self.case.wall_scar_label.volume(), z)
    }

    pub fn dtm(&self, beta: f64, z: usize) -> Result<Vec<f64>> {
        let map = signed_edt(&self.case.la_label, beta, CLIP, false)?;
        Ok(self.slice(map.values(), z))
    }

    /// `(normal, scar)` probability slices.
    pub fn dpm(&self, variant: DpmVariant, z: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let map = dpm_from_labels(&self.case.wall_scar_label, variant)?;
        Ok((self.slice(map.normal(), z), self.slice(map.scar(), z)))
    }

    fn shifted_prediction(&self, shift: [i32; 3]) -> Volume3 {
        let shift = shift.map(|s| s as isize);
        self.case.la_label.volume().translated(shift, 0.0)
    }

    /// Per-voxel `(p - T) * phi` for the true LA translated by `shift`, and its sum.
    pub fn penalty(&self, beta: f64, shift: [i32; 3], z: usize) -> Result<(Vec<f64>, f64)> {
        let map = signed_edt(&self.case.la_label, beta, CLIP, false)?;
        let pred = self.shifted_prediction(shift);
        let total = se_la(&pred, &map, T_LA)?.value;
        let per_voxel = Volume3::from_fn(pred.grid(), |i, j, k| {
            (pred.get(i, j, k) - T_LA) * map.values().get(i, j, k)
        })?;
        Ok((self.slice(&per_voxel, z), total))
    }

    pub fn la(&self) -> &LabelVolume {
        &self.case.la_label
    }
}

fn js(e: scarq_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u32) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            scene: Scene::new(size, seed as u64).map_err(js)?,
        })
    }

    pub fn width(&self) -> usize {
        self.scene.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.scene.dims()[1]
    }

    pub fn depth(&self) -> usize {
        self.scene.dims()[2]
    }

    pub fn intensity(&self, z: usize) -> Vec<f64> {
        self.scene.intensity(z)
    }

    pub fn labels(&self, z: usize) -> Vec<f64> {
        self.scene.labels(z)
    }

    pub fn dtm(&self, beta: f64, z: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.dtm(beta, z).map_err(js)
    }

    /// `variant` is one of `exp`, `expit`, `exp-norm`, `expit-norm`; `scar`
    /// picks the scar channel over the normal one.
    pub fn dpm(
        &self,
        variant: &str,
        scar: bool,
        z: usize,
    ) -> std::result::Result<Vec<f64>, JsError> {
        let variant: DpmVariant = variant.parse().map_err(js)?;
        let (normal, scar_map) = self.scene.dpm(variant, z).map_err(js)?;
        Ok(if scar { scar_map } else { normal })
    }

    pub fn penalty(
        &self,
        beta: f64,
        dx: i32,
        dy: i32,
        z: usize,
    ) -> std::result::Result<Vec<f64>, JsError> {
        Ok(self.scene.penalty(beta, [dx, dy, 0], z).map_err(js)?.0)
    }

    pub fn penalty_total(&self, beta: f64, dx: i32, dy: i32) -> std::result::Result<f64, JsError> {
        Ok(self.scene.penalty(beta, [dx, dy, 0], 0).map_err(js)?.1)
    }
}
