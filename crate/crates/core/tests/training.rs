mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarq_core::losses::{objective, M2Mode, ObjectiveConfig, Weights};
use scarq_core::metrics::dice_overlap;
use scarq_core::model::{infer_case, train, Arm, ModelKind, ToyModel, TrainConfig};
use scarq_core::numeric::median;
use scarq_core::phantom::{generate, generate_suite, PhantomSpec, Split};
use scarq_core::Volume3;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn conv_backward_matches_central_differences_in_every_layer() {
    let (la, ws) = box_case([8, 8, 8]);
    let targets = targets(&la, &ws);
    let grid = la.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let intensity = Volume3::from_vec(
        grid,
        (0..grid.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap();
    let weights = Weights {
        la: 0.1,
        scar: 1.0,
        m1: 0.1,
        m2: 0.1,
    };
    let config = ObjectiveConfig {
        m2_mode: M2Mode::Differentiable,
        ..ObjectiveConfig::default()
    };
    let model = ToyModel::new(ModelKind::Conv, grid, 11);
    let cache = model.forward_cached(&intensity).unwrap();
    let out = cache.outputs();
    let report = objective(&out.la, &out.dpm, &targets, &weights, &config).unwrap();
    let grad = model.backward(&cache, &report).unwrap();

    let value = |params: &[f64]| {
        let m = ToyModel::from_params(ModelKind::Conv, grid, params.to_vec()).unwrap();
        let o = m.forward(&intensity).unwrap();
        objective(&o.la, &o.dpm, &targets, &weights, &config)
            .unwrap()
            .total
    };
    // central-difference rounding error is about eps·|f|/h
    let floor = f64::EPSILON * report.total.abs() / (H * TOL);
    let mut theta = model.params().to_vec();
    for (index, layer) in model.layers().iter().enumerate() {
        for _ in 0..20 {
            let i = layer.offset + rng.random_range(0..layer.n_params());
            let x = theta[i];
            theta[i] = x + H;
            let up = value(&theta);
            theta[i] = x - H;
            let down = value(&theta);
            theta[i] = x;
            let fd = (up - down) / (2.0 * H);
            let err = rel_err(fd, grad[i], floor);
            assert!(
                err < TOL,
                "layer {index} param {i}: fd {fd} vs {} (rel {err:.2e})",
                grad[i]
            );
        }
    }
}

#[test]
fn conv_initialization_is_frozen() {
    let case = generate(&PhantomSpec::default()).unwrap();
    let model = ToyModel::new(ModelKind::Conv, case.intensity.grid(), 7);
    assert_eq!(model.n_params(), 46_203);
    let out = model.forward(&case.intensity).unwrap();
    // GEMM kernels differ by CPU (FMA or not), so compare sums rather than bits
    let sum = |v: &Volume3| v.data().iter().sum::<f64>();
    let got = [sum(&out.la), sum(out.dpm.normal()), sum(out.dpm.scar())];
    let frozen = [1538.1110564466035, 1549.4442482970776, 1554.8844929764794];
    for (g, f) in got.iter().zip(frozen) {
        assert!((g - f).abs() <= 1e-9 * f.abs(), "{got:?}");
    }
}

#[test]
fn sesa_training_segments_the_atrium() {
    let suite = generate_suite(10, 5, &PhantomSpec::default(), 7).unwrap();
    let config = TrainConfig {
        iterations: 1000,
        arm: Arm::Sesa,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, log) = train(ModelKind::Conv, &suite, &config).unwrap();
    assert!(log.rows.last().unwrap().total < log.rows[0].total);
    let dice: Vec<f64> = suite
        .split(Split::Test)
        .map(|(_, case)| {
            let inferred = infer_case(&model, &case.intensity).unwrap();
            dice_overlap(&inferred.la_label, &case.la_label).unwrap()
        })
        .collect();
    let m = median(&dice).unwrap();
    assert!(m >= 0.85, "median test Dice_LA {m:.3} from {dice:?}");
}
