//! The four commands. Each takes a validated, flag-merged [`RunConfig`] and
//! an output directory, and writes digest-stamped files atomically.

use std::path::{Path, PathBuf};

use dog_core::denoiser::{toy_training_set, train_toy_denoiser};
use dog_core::eval::{eps_disagreement, evaluate, summarize};
use dog_core::sampler::sample_batch;
use dog_core::{
    AnalyticDenoiser, GuidanceConfig, MetricReport, PerturbTarget, Recording, SamplerOptions,
    Strategy,
};

use crate::config::RunConfig;
use crate::output::{csv_document, digest_line, write_atomic};
use crate::plot::{bar_chart, line_chart, Bar, Series};
use crate::{CliError, CliResult};

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Projection,
    Schedule,
    Target,
    Peak,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Projection => "projection",
            Axis::Schedule => "schedule",
            Axis::Target => "target",
            Axis::Peak => "peak",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub disagreement: f64,
    pub disagreement_threshold: f64,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn loss_ratio(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN) / self.epoch_losses[0]
    }
}

fn manifest(cfg: &RunConfig, out: &Path, command: &str) -> CliResult<()> {
    let body = format!("{}{}", digest_line(&cfg.digest()), cfg.to_toml());
    write_atomic(
        &out.join(format!("{command}-manifest.toml")),
        body.as_bytes(),
    )
}

fn sampler_options(cfg: &RunConfig, recording: Recording) -> SamplerOptions {
    SamplerOptions {
        stride: cfg.sampling.stride,
        recording,
        config_digest: cfg.digest(),
    }
}

/// Trains the toy denoiser on samples of the configured target.
///
/// Writes `checkpoint.txt`, `training_loss.csv` and `training_summary.csv`.
pub fn train(cfg: &RunConfig, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset.as_ref().ok_or_else(|| CliError::Config {
        field: "dataset".into(),
        reason: "the train command needs a [dataset] section".into(),
    })?;
    let digest = cfg.digest();
    let gmm = cfg.gmm()?;
    let embedder = cfg.embedder();
    let schedule = cfg.diffusion_schedule()?;
    let data = toy_training_set(&gmm, &embedder, dataset.per_slice, dataset.seed)?;
    let (model, report) = train_toy_denoiser(&data, &schedule, &cfg.training)?;

    let analytic = AnalyticDenoiser::new(
        gmm.clone(),
        &embedder,
        schedule.clone(),
        cfg.denoiser.bandwidth,
    )?;
    let disagreement = eps_disagreement(
        &model,
        &analytic,
        &gmm,
        &embedder,
        &schedule,
        dataset.probes,
        dataset.seed,
    )?;

    let checkpoint = out.join("checkpoint.txt");
    write_atomic(
        &checkpoint,
        format!("{}{}", digest_line(&digest), model.to_checkpoint()).as_bytes(),
    )?;
    let rows = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{},{l}", i + 1));
    write_atomic(
        &out.join("training_loss.csv"),
        csv_document(&digest, "epoch,mse", rows).as_bytes(),
    )?;
    let outcome = TrainOutcome {
        epoch_losses: report.epoch_losses,
        disagreement,
        disagreement_threshold: dataset.disagreement_threshold,
        checkpoint,
    };
    let summary = format!(
        "{},{},{},{},{}",
        outcome.epoch_losses[0],
        outcome.epoch_losses.last().expect("at least one epoch"),
        outcome.loss_ratio(),
        outcome.disagreement,
        outcome.disagreement_threshold
    );
    write_atomic(
        &out.join("training_summary.csv"),
        csv_document(
            &digest,
            "first_mse,final_mse,mse_ratio,disagreement,disagreement_threshold",
            [summary],
        )
        .as_bytes(),
    )?;
    manifest(cfg, out, "train")?;
    Ok(outcome)
}

/// Samples `sampling.seeds` trajectories for the fixed condition.
///
/// Writes one record file per seed under `trajectories/`, the final samples
/// in `samples.csv` and their metrics in `summary.csv`.
pub fn sample(cfg: &RunConfig, out: &Path) -> CliResult<MetricReport> {
    cfg.validate()?;
    let digest = cfg.digest();
    let model = cfg.build_denoiser()?;
    let schedule = cfg.diffusion_schedule()?;
    let gcfg = cfg.guidance_config()?;
    let cond = cfg.condition(cfg.sampling.condition)?;
    let seeds = cfg.seeds(cfg.sampling.seeds);
    let conds = vec![cond.clone(); seeds.len()];
    let trajectories = sample_batch(
        model.as_ref(),
        &conds,
        &gcfg,
        &schedule,
        &seeds,
        &sampler_options(cfg, Recording::Every),
    )?;

    let width = seeds.last().map_or(1, |s| s.to_string().len());
    for traj in &trajectories {
        let mut buf = Vec::new();
        traj.write_records(&mut buf)
            .map_err(|source| CliError::Io {
                path: out.to_path_buf(),
                source,
            })?;
        write_atomic(
            &out.join("trajectories")
                .join(format!("seed-{:0width$}.csv", traj.seed)),
            &buf,
        )?;
    }
    let dim = model.sample_dim();
    let header = format!(
        "seed,{},max_norm",
        (1..=dim)
            .map(|i| format!("x{i}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    let rows = trajectories.iter().map(|t| {
        let xs: Vec<String> = t.final_sample.iter().map(|v| v.to_string()).collect();
        format!("{},{},{}", t.seed, xs.join(","), t.max_norm)
    });
    write_atomic(
        &out.join("samples.csv"),
        csv_document(&digest, &header, rows).as_bytes(),
    )?;

    let report = summarize(
        gcfg.strategy.label(),
        gcfg.gs(),
        &[cond],
        &[trajectories],
        &cfg.gmm()?,
        &cfg.eval,
    )?;
    write_atomic(
        &out.join("summary.csv"),
        csv_document(&digest, MetricReport::CSV_HEADER, [report.csv_row()]).as_bytes(),
    )?;
    manifest(cfg, out, "sample")?;
    Ok(report)
}

/// Stability curves: one row per (strategy, gs) over the evaluation
/// condition set. Writes `compare.csv` and `compare.svg`.
pub fn compare(cfg: &RunConfig, out: &Path) -> CliResult<Vec<MetricReport>> {
    cfg.validate()?;
    let digest = cfg.digest();
    let model = cfg.build_denoiser()?;
    let schedule = cfg.diffusion_schedule()?;
    let gmm = cfg.gmm()?;
    let conds = cfg.conditions()?;
    let seeds = cfg.seeds(cfg.sampling.seeds);
    let opts = sampler_options(cfg, Recording::FinalOnly);
    let base = cfg.guidance_config()?;

    let mut reports = Vec::new();
    for &strategy in &cfg.compare.strategies {
        let run = |gs: f64| -> CliResult<MetricReport> {
            let gcfg = base.clone().with_strategy(strategy).with_gs(gs)?;
            Ok(evaluate(
                strategy.label(),
                model.as_ref(),
                &conds,
                &gcfg,
                &schedule,
                &seeds,
                &gmm,
                &cfg.eval,
                &opts,
            )?)
        };
        if strategy == Strategy::None {
            // guidance scale has no effect on the unguided chain
            let once = run(0.0)?;
            reports.extend(
                cfg.compare
                    .gs_list
                    .iter()
                    .map(|&gs| MetricReport { gs, ..once.clone() }),
            );
        } else {
            for &gs in &cfg.compare.gs_list {
                reports.push(run(gs)?);
            }
        }
    }

    let rows = reports.iter().map(MetricReport::csv_row);
    write_atomic(
        &out.join("compare.csv"),
        csv_document(&digest, MetricReport::CSV_HEADER, rows).as_bytes(),
    )?;
    let series = |metric: fn(&MetricReport) -> f64| -> Vec<Series> {
        cfg.compare
            .strategies
            .iter()
            .map(|s| Series {
                name: s.label().to_string(),
                points: reports
                    .iter()
                    .filter(|r| r.strategy == s.label())
                    .map(|r| (r.gs, metric(r)))
                    .collect(),
            })
            .collect()
    };
    let svg = line_chart(
        &format!("guidance comparison ({})", &digest[..12]),
        "gs",
        &[
            ("fidelity_w2", series(|r| r.fidelity_w2)),
            ("blowup_rate", series(|r| r.blowup_rate)),
        ],
    );
    write_atomic(&out.join("compare.svg"), svg.as_bytes())?;
    manifest(cfg, out, "compare")?;
    Ok(reports)
}

/// The DOG arms compared along `axis`, labelled for the CSV.
pub fn ablation_arms(cfg: &RunConfig, axis: Axis) -> CliResult<Vec<(String, GuidanceConfig)>> {
    let base = cfg
        .guidance_config()?
        .with_strategy(Strategy::Dog)
        .with_gs(cfg.ablate.gs)?;
    let arm = |name: String, g: GuidanceConfig| (format!("dog/{}={name}", axis.label()), g);
    Ok(match axis {
        Axis::Projection => [true, false]
            .into_iter()
            .map(|on| {
                let mut g = base.clone();
                g.projection_on = on;
                arm(if on { "on" } else { "off" }.into(), g)
            })
            .collect(),
        Axis::Schedule => [true, false]
            .into_iter()
            .map(|on| {
                let mut g = base.clone();
                g.schedule_on = on;
                arm(if on { "triangular" } else { "constant" }.into(), g)
            })
            .collect(),
        Axis::Target => PerturbTarget::ALL
            .into_iter()
            .map(|t| {
                let mut g = base.clone();
                g.perturb.target = t;
                arm(t.label().into(), g)
            })
            .collect(),
        Axis::Peak => cfg
            .ablate
            .peaks
            .iter()
            .map(|&p| Ok(arm(p.to_string(), base.clone().with_peak(p)?)))
            .collect::<CliResult<_>>()?,
    })
}

/// DOG ablation on the fixed condition with `ablate.seeds` seeds. Writes
/// `ablate-<axis>.csv` and `ablate-<axis>.svg`.
pub fn ablate(cfg: &RunConfig, axis: Axis, out: &Path) -> CliResult<Vec<MetricReport>> {
    cfg.validate()?;
    let digest = cfg.digest();
    let model = cfg.build_denoiser()?;
    let schedule = cfg.diffusion_schedule()?;
    let gmm = cfg.gmm()?;
    let cond = cfg.condition(cfg.sampling.condition)?;
    let seeds = cfg.seeds(cfg.ablate.seeds);
    let opts = sampler_options(cfg, Recording::FinalOnly);

    let reports = ablation_arms(cfg, axis)?
        .into_iter()
        .map(|(label, g)| {
            Ok(evaluate(
                &label,
                model.as_ref(),
                std::slice::from_ref(&cond),
                &g,
                &schedule,
                &seeds,
                &gmm,
                &cfg.eval,
                &opts,
            )?)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let name = format!("ablate-{}", axis.label());
    let rows = reports.iter().map(MetricReport::csv_row);
    write_atomic(
        &out.join(format!("{name}.csv")),
        csv_document(&digest, MetricReport::CSV_HEADER, rows).as_bytes(),
    )?;
    let bars = |metric: fn(&MetricReport) -> f64| -> Vec<Bar> {
        reports
            .iter()
            .map(|r| Bar {
                label: r.strategy.clone(),
                value: metric(r),
            })
            .collect()
    };
    let svg = bar_chart(
        &format!(
            "{} ablation at gs={} ({})",
            axis.label(),
            cfg.ablate.gs,
            &digest[..12]
        ),
        &[
            ("fidelity_w2", bars(|r| r.fidelity_w2)),
            ("blowup_rate", bars(|r| r.blowup_rate)),
            ("diversity", bars(|r| r.diversity)),
        ],
    );
    write_atomic(&out.join(format!("{name}.svg")), svg.as_bytes())?;
    manifest(cfg, out, &name)?;
    Ok(reports)
}
