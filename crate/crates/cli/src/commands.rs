use std::fs;
use std::path::Path;

use scarq_core::distance::{dpm_from_labels, signed_edt, ChannelPair};
use scarq_core::losses::{objective, Reduction, Weights};
use scarq_core::metrics::{
    evaluate_case_percentile, metrics_csv, otsu_surface_baseline, MetricsReport,
};
use scarq_core::model::{
    self, infer_case, load_checkpoint, prepare_case, save_checkpoint, ToyModel, TrainConfig,
};
use scarq_core::phantom::{generate_suite, write_suite, PhantomSpec, Split, Suite};
use scarq_core::surface::{export_labeled_surface_ply, hard_boundary_mask, project_volume_labels};
use scarq_core::volume::{
    export_slice_pgm, read_labels, read_mvol, write_mvol, ValueKind, Volume3, VolumeHeader,
};
use scarq_core::{Error, Result};
use serde::Serialize;

use crate::parallel::parallel_map;
use crate::{
    Baseline, Cli, Command, DpmArgs, DtmArgs, EvaluateArgs, ExportMeshArgs, ExportSliceArgs,
    GenPhantomArgs, LossEvalArgs, ObjectiveArgs, ProjectArgs, SplitArg, TrainArgs, TrainOptions,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenPhantom(a) => gen_phantom(a, cli.seed),
        Command::Dtm(a) => dtm(a),
        Command::Dpm(a) => dpm(a),
        Command::LossEval(a) => loss_eval(a),
        Command::Train(a) => train(a, cli.seed),
        Command::Project(a) => project(a),
        Command::Evaluate(a) => evaluate(a, cli.jobs),
        Command::ExportSlice(a) => export_slice(a),
        Command::ExportMesh(a) => export_mesh(a),
        Command::Sweep(a) => crate::sweep::run(a, cli.seed, cli.jobs),
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_volume(path: &Path, volume: &Volume3, kind: ValueKind) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_mvol(path, &VolumeHeader::new(volume, kind), volume)
}

fn gen_phantom(a: &GenPhantomArgs, seed: u64) -> Result<()> {
    let base = PhantomSpec {
        confounders: a.confounders,
        ..PhantomSpec::cube(a.size)
    };
    let suite = generate_suite(a.n_train, a.n_test, &base, seed)?;
    create_dir(&a.out)?;
    write_suite(&suite, &a.out)?;
    Ok(())
}

fn dtm(a: &DtmArgs) -> Result<()> {
    let label = read_labels(&a.label)?;
    let map = signed_edt(&label, a.beta, a.clip, a.spacing_aware)?;
    write_volume(&a.out, map.values(), ValueKind::Distance)
}

fn dpm(a: &DpmArgs) -> Result<()> {
    let label = read_labels(&a.label)?;
    let map = dpm_from_labels(&label, a.variant)?;
    create_dir(&a.out)?;
    write_volume(
        &a.out.join("normal.mvol"),
        map.normal(),
        ValueKind::Probability,
    )?;
    write_volume(&a.out.join("scar.mvol"), map.scar(), ValueKind::Probability)?;
    if let Some(bg) = map.background() {
        write_volume(&a.out.join("background.mvol"), bg, ValueKind::Probability)?;
    }
    Ok(())
}

/// Term values of one objective evaluation.
#[derive(Debug, Serialize)]
struct LossSummary {
    arm: String,
    reduction: Reduction,
    weights: Weights,
    bce_la: f64,
    se_la: f64,
    se_scar: f64,
    bce_scar: f64,
    sa_m1: f64,
    sa_m2: f64,
    total: f64,
}

pub fn train_config(o: &ObjectiveArgs, t: &TrainOptions, seed: u64) -> Result<TrainConfig> {
    let base = if t.long_schedule {
        TrainConfig::long_schedule()
    } else {
        TrainConfig::default()
    };
    let config = TrainConfig {
        iterations: t.iters,
        batch_size: t.batch_size,
        lr: t.lr.unwrap_or(base.lr),
        lr_step: t.lr_step.unwrap_or(base.lr_step),
        weights: o.weights.parse()?,
        arm: o.arm,
        m2_mode: o.m2_mode,
        scar_metric: o.scar_metric,
        dpm_variant: o.variant,
        beta: o.beta,
        reduction: if t.sum {
            Reduction::Sum
        } else {
            Reduction::Mean
        },
        seed,
        ..base
    };
    config.validate()?;
    Ok(config)
}

fn loss_eval(a: &LossEvalArgs) -> Result<()> {
    let o = &a.objective;
    let la_label = read_labels(&a.la)?;
    let wall_scar = read_labels(&a.wall_scar)?;
    let (_, la_pred) = read_mvol(&a.la_pred)?;
    let (_, normal) = read_mvol(&a.normal_pred)?;
    let (_, scar) = read_mvol(&a.scar_pred)?;
    let case = scarq_core::phantom::PhantomCase {
        intensity: Volume3::zeros(la_label.grid()),
        la_label,
        wall_scar_label: wall_scar,
        spec: PhantomSpec::default(),
        checksum: String::new(),
    };
    let targets = prepare_case(&case, o.beta, o.variant)?.targets;
    let weights: Weights = o.weights.parse()?;
    let config = scarq_core::losses::ObjectiveConfig {
        terms: o.arm.terms(),
        m2_mode: o.m2_mode,
        scar_metric: o.scar_metric,
        reduction: if a.mean {
            Reduction::Mean
        } else {
            Reduction::Sum
        },
        t_la: scarq_core::losses::T_LA,
    };
    let report = objective(
        &la_pred,
        &ChannelPair::new(normal, scar)?,
        &targets,
        &weights,
        &config,
    )?;
    let summary = LossSummary {
        arm: o.arm.to_string(),
        reduction: config.reduction,
        weights: report.weights,
        bce_la: report.bce_la,
        se_la: report.se_la,
        se_scar: report.se_scar,
        bce_scar: report.bce_scar,
        sa_m1: report.sa_m1,
        sa_m2: report.sa_m2,
        total: report.total,
    };
    match &a.out {
        Some(path) => write_json(path, &summary),
        None => {
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

/// Written next to every checkpoint so a run can be replayed.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub version: &'static str,
    pub kind: String,
    pub suite_seed: u64,
    pub config: &'a TrainConfig,
    pub final_log_checksum: String,
}

/// Trains one model, writing the checkpoint, `train_log.csv` and `config.json` into `out`.
pub fn train_run(
    suite: &Suite,
    kind: model::ModelKind,
    config: &TrainConfig,
    out: &Path,
) -> Result<ToyModel> {
    create_dir(out)?;
    match model::train(kind, suite, config) {
        Ok((trained, log)) => {
            save_checkpoint(&trained, out)?;
            write_text(&out.join("train_log.csv"), &log.to_csv())?;
            write_json(
                &out.join("config.json"),
                &RunRecord {
                    version: env!("CARGO_PKG_VERSION"),
                    kind: kind.to_string(),
                    suite_seed: suite.manifest.seed,
                    config,
                    final_log_checksum: log.checksum(),
                },
            )?;
            Ok(trained)
        }
        Err(Error::Diverged {
            iteration,
            last_good,
        }) => {
            save_checkpoint(&last_good, out.join("last_good"))?;
            Err(Error::Diverged {
                iteration,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let suite = Suite::load(&a.suite)?;
    let config = train_config(&a.objective, &a.train, seed)?;
    train_run(&suite, a.train.kind, &config, &a.out).map(|_| ())
}

fn project(a: &ProjectArgs) -> Result<()> {
    let labels = read_labels(&a.scar)?;
    let la = read_labels(&a.surface_from)?;
    let surface = project_volume_labels(&labels, &hard_boundary_mask(&la)?, a.radius)?;
    export_labeled_surface_ply(&surface, &a.out)
}

fn splits(split: SplitArg) -> Vec<Split> {
    match split {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => vec![Split::Train, Split::Test],
    }
}

/// What labels the surface of each evaluated case.
pub enum Method<'a> {
    Model(&'a ToyModel),
    Otsu,
}

/// Scores every case of the given splits, in manifest order.
pub fn evaluate_suite(
    suite: &Suite,
    method: &Method<'_>,
    split: SplitArg,
    radius: f64,
    hd_percentile: f64,
    jobs: usize,
) -> Result<Vec<MetricsReport>> {
    let wanted = splits(split);
    let items: Vec<_> = suite
        .manifest
        .cases
        .iter()
        .zip(&suite.cases)
        .filter(|(e, _)| wanted.contains(&e.split))
        .collect();
    parallel_map(&items, jobs, |(entry, case)| {
        let (la, surface) = match method {
            Method::Model(m) => {
                let inf = infer_case(m, &case.intensity)?;
                (inf.la_label, inf.surface)
            }
            Method::Otsu => {
                let mask = hard_boundary_mask(&case.la_label)?;
                let s = otsu_surface_baseline(&case.intensity, &case.la_label, &mask, radius)?;
                (case.la_label.clone(), s)
            }
        };
        evaluate_case_percentile(
            &entry.id,
            &la,
            &surface,
            &case.la_label,
            &case.wall_scar_label,
            radius,
            hd_percentile,
        )
    })
    .into_iter()
    .collect()
}

fn evaluate(a: &EvaluateArgs, jobs: usize) -> Result<()> {
    let suite = Suite::load(&a.suite)?;
    let loaded;
    let method = match (&a.model, a.baseline) {
        (Some(dir), _) => {
            loaded = load_checkpoint(dir)?;
            Method::Model(&loaded)
        }
        (None, Some(Baseline::Otsu)) => Method::Otsu,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "evaluate needs --model or --baseline".into(),
            ))
        }
    };
    let rows = evaluate_suite(&suite, &method, a.split, a.radius, a.hd_percentile, jobs)?;
    write_text(&a.out, &metrics_csv(&rows))
}

fn export_slice(a: &ExportSliceArgs) -> Result<()> {
    let (_, volume) = read_mvol(&a.volume)?;
    let index = a.index.unwrap_or_else(|| {
        let d = volume.dims();
        d[a.axis as usize] / 2
    });
    let window = match a.window.as_deref() {
        Some([lo, hi]) => (*lo, *hi),
        _ => {
            let (lo, hi) = volume.min_max();
            if lo < hi {
                (lo, hi)
            } else {
                (lo, lo + 1.0)
            }
        }
    };
    let bytes = export_slice_pgm(&volume, a.axis, index, window)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, bytes).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}

fn export_mesh(a: &ExportMeshArgs) -> Result<()> {
    let surface = match (&a.model, &a.image, &a.la, &a.wall_scar) {
        (Some(dir), Some(image), _, _) => {
            let model = load_checkpoint(dir)?;
            let (_, intensity) = read_mvol(image)?;
            infer_case(&model, &intensity)?.surface
        }
        (None, _, Some(la), Some(ws)) => {
            let la = read_labels(la)?;
            let ws = read_labels(ws)?;
            project_volume_labels(&ws, &hard_boundary_mask(&la)?, a.radius)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "export-mesh needs --model with --image, or --la with --wall-scar".into(),
            ))
        }
    };
    export_labeled_surface_ply(&surface, &a.out)
}
