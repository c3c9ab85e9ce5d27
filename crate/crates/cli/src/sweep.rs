//! Preset sweeps: each expands to a list of train-then-evaluate points whose
//! equivalent command lines are logged to `plan.json` before anything runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scarq_core::distance::DpmVariant;
use scarq_core::losses::ScarMetric;
use scarq_core::metrics::MetricsReport;
use scarq_core::model::{Arm, TrainConfig};
use scarq_core::numeric::median;
use scarq_core::phantom::Suite;
use scarq_core::Result;
use serde::Serialize;

use crate::commands::{
    create_dir, evaluate_suite, train_config, train_run, write_json, write_text, Method,
};
use crate::parallel::parallel_map;
use crate::{ObjectiveArgs, Preset, SplitArg, SweepArgs};

const RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Serialize)]
struct Point {
    /// Rows sharing a group land in the same `metrics.csv`.
    group: String,
    tags: Vec<(String, String)>,
    /// `None` for the Otsu baseline, which is not trained.
    seed: Option<u64>,
    arm: Option<Arm>,
    beta: f64,
    variant: DpmVariant,
    scar_metric: ScarMetric,
    commands: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Plan<'a> {
    preset: String,
    suite: &'a Path,
    out: &'a Path,
    points: &'a [Point],
}

fn objective(arm: Arm, beta: f64, variant: DpmVariant, scar_metric: ScarMetric) -> ObjectiveArgs {
    ObjectiveArgs {
        weights: "la=0.01,scar=10,m1=0.01,m2=0.001".into(),
        arm,
        m2_mode: Default::default(),
        scar_metric,
        variant,
        beta,
    }
}

fn expand(a: &SweepArgs, seeds: &[u64]) -> Vec<Point> {
    let mut points = Vec::new();
    let mut push =
        |group: String, tags: Vec<(&str, String)>, arm: Arm, beta: f64, variant, scar_metric| {
            for &seed in seeds {
                points.push(Point {
                    group: group.clone(),
                    tags: tags
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.clone()))
                        .collect(),
                    seed: Some(seed),
                    arm: Some(arm),
                    beta,
                    variant,
                    scar_metric,
                    commands: Vec::new(),
                });
            }
        };
    match a.preset {
        Preset::AblationTable2Shape => {
            for arm in Arm::ALL {
                push(
                    arm.to_string(),
                    vec![("arm", arm.to_string())],
                    arm,
                    1.0,
                    DpmVariant::Exp,
                    ScarMetric::L2,
                );
            }
        }
        Preset::BetaSweep => {
            for &beta in &a.betas {
                push(
                    format!("beta_{beta}"),
                    vec![("beta", beta.to_string())],
                    Arm::Sesa,
                    beta,
                    DpmVariant::Exp,
                    ScarMetric::L2,
                );
            }
        }
        Preset::DpmVariantSweep => {
            for variant in DpmVariant::ALL {
                for metric in [ScarMetric::L2, ScarMetric::Hellinger] {
                    push(
                        format!("{variant}_{metric}"),
                        vec![
                            ("variant", variant.to_string()),
                            ("scar_metric", metric.to_string()),
                        ],
                        Arm::Sesa,
                        1.0,
                        variant,
                        metric,
                    );
                }
            }
        }
    }
    if a.preset == Preset::AblationTable2Shape {
        points.push(Point {
            group: "otsu".into(),
            tags: vec![("arm".into(), "otsu".into())],
            seed: None,
            arm: None,
            beta: 1.0,
            variant: DpmVariant::Exp,
            scar_metric: ScarMetric::L2,
            commands: Vec::new(),
        });
    }
    for p in &mut points {
        p.commands = commands(a, p);
    }
    points
}

fn point_dir(out: &Path, p: &Point) -> PathBuf {
    match p.seed {
        Some(seed) => out.join(&p.group).join(format!("seed_{seed}")),
        None => out.join(&p.group),
    }
}

/// The standalone invocations equivalent to one sweep point.
fn commands(a: &SweepArgs, p: &Point) -> Vec<String> {
    let dir = point_dir(&a.out, p);
    let suite = a.suite.display();
    let metrics = dir.join("metrics.csv");
    let Some(seed) = p.seed else {
        return vec![format!(
            "scarq evaluate --suite {suite} --baseline otsu --split test --out {}",
            metrics.display()
        )];
    };
    let t = &a.train;
    let mut train = format!(
        "scarq --seed {seed} train --suite {suite} --out {} --kind {} --iters {} --batch-size {}",
        dir.display(),
        t.kind,
        t.iters,
        t.batch_size
    );
    if let Some(lr) = t.lr {
        let _ = write!(train, " --lr {lr}");
    }
    if let Some(step) = t.lr_step {
        let _ = write!(train, " --lr-step {step}");
    }
    if t.long_schedule {
        train.push_str(" --long-schedule");
    }
    if t.sum {
        train.push_str(" --sum");
    }
    let _ = write!(
        train,
        " --arm {} --beta {} --variant {} --scar-metric {}",
        p.arm.unwrap_or(Arm::Sesa),
        p.beta,
        p.variant,
        p.scar_metric
    );
    vec![
        train,
        format!(
            "scarq evaluate --suite {suite} --model {} --split test --out {}",
            dir.display(),
            metrics.display()
        ),
    ]
}

fn run_point(a: &SweepArgs, suite: &Suite, p: &Point) -> Result<Vec<MetricsReport>> {
    let dir = point_dir(&a.out, p);
    let rows = match (p.seed, p.arm) {
        (Some(seed), Some(arm)) => {
            let config: TrainConfig = train_config(
                &objective(arm, p.beta, p.variant, p.scar_metric),
                &a.train,
                seed,
            )?;
            let model = train_run(suite, a.train.kind, &config, &dir)?;
            evaluate_suite(
                suite,
                &Method::Model(&model),
                SplitArg::Test,
                RADIUS,
                100.0,
                1,
            )?
        }
        _ => {
            create_dir(&dir)?;
            evaluate_suite(suite, &Method::Otsu, SplitArg::Test, RADIUS, 100.0, 1)?
        }
    };
    write_text(
        &dir.join("metrics.csv"),
        &scarq_core::metrics::metrics_csv(&rows),
    )?;
    Ok(rows)
}

fn metric_values(r: &MetricsReport) -> [f64; 8] {
    [
        r.dice_la,
        r.asd_mm,
        r.hd_mm,
        r.accuracy,
        r.dice_s,
        r.dice_g,
        r.sensitivity,
        r.specificity,
    ]
}

const METRIC_NAMES: &str = "dice_la,asd_mm,hd_mm,accuracy,dice_s,dice_g,sensitivity,specificity";

fn tag_header(p: &Point) -> String {
    p.tags
        .iter()
        .map(|(k, _)| k.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn tag_values(p: &Point) -> String {
    p.tags
        .iter()
        .map(|(_, v)| v.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

fn seed_cell(p: &Point) -> String {
    p.seed.map(|s| s.to_string()).unwrap_or_default()
}

fn row_cells(r: &MetricsReport) -> String {
    metric_values(r)
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes `<group>/metrics.csv` with tag and seed columns on every row, and a
/// `summary.csv` with per-group medians over seeds and cases.
fn write_tables(a: &SweepArgs, points: &[Point], results: &[Vec<MetricsReport>]) -> Result<()> {
    let mut groups: Vec<&str> = Vec::new();
    for p in points {
        if !groups.contains(&p.group.as_str()) {
            groups.push(&p.group);
        }
    }
    // Tag columns differ only between the Otsu row and the rest, and both use `arm`.
    let header_tags = tag_header(&points[0]);
    let mut summary = format!("group,{header_tags},n,{METRIC_NAMES}\n");
    for g in groups {
        let members: Vec<(&Point, &Vec<MetricsReport>)> = points
            .iter()
            .zip(results)
            .filter(|(p, _)| p.group == g)
            .collect();
        let first = members[0].0;
        let mut csv = format!("{},seed,case_id,{METRIC_NAMES}\n", tag_header(first));
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); 8];
        for (p, rows) in &members {
            for r in rows.iter() {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    tag_values(p),
                    seed_cell(p),
                    r.case_id,
                    row_cells(r)
                );
                for (c, v) in columns.iter_mut().zip(metric_values(r)) {
                    c.push(v);
                }
            }
        }
        write_text(&a.out.join(g).join("metrics.csv"), &csv)?;
        let medians: Vec<String> = columns
            .iter()
            .map(|c| median(c).map(|m| m.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(
            summary,
            "{g},{},{},{}",
            tag_values(first),
            columns[0].len(),
            medians.join(",")
        );
    }
    write_text(&a.out.join("summary.csv"), &summary)
}

pub fn run(a: &SweepArgs, seed: u64, jobs: usize) -> Result<()> {
    let seeds = if a.seeds.is_empty() {
        vec![seed]
    } else {
        a.seeds.clone()
    };
    let points = expand(a, &seeds);
    create_dir(&a.out)?;
    let preset = match a.preset {
        Preset::AblationTable2Shape => "ablation_table2_shape",
        Preset::BetaSweep => "beta_sweep",
        Preset::DpmVariantSweep => "dpm_variant_sweep",
    };
    write_json(
        &a.out.join("plan.json"),
        &Plan {
            preset: preset.into(),
            suite: &a.suite,
            out: &a.out,
            points: &points,
        },
    )?;
    if a.dry_run {
        return Ok(());
    }
    let suite = Suite::load(&a.suite)?;
    let results: Vec<Vec<MetricsReport>> = parallel_map(&points, jobs, |p| run_point(a, &suite, p))
        .into_iter()
        .collect::<Result<_>>()?;
    write_tables(a, &points, &results)
}
