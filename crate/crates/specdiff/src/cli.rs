//! Command-line surface: train, sample, evaluate, analyze-schedule, synth.
//! Every run writes a manifest naming the files it produced together with
//! the full configuration echo.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::AppConfig;
use crate::dataio::{generate_synthetic, load_csv, write_csv, DatasetSpec, SeriesWindow};
use crate::denoiser::{
    denormalize, instance_normalize, load_checkpoint, save_checkpoint,
};
use crate::diffusion::{ancestral_sample, forward_sample, ForecastDistribution};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_instance, histogram_export, persistence_forecast, MetricReport};
use crate::rng::RandomSource;
use crate::scheduler::{
    run_pgd, ParametricSchedule, QuadraticObjective, RealizedSchedule,
};
use crate::spectral::spectral_flatness;
use crate::tensor::Tensor;
use crate::training::{make_windows, train_full_with, Trainer};

#[derive(Parser)]
#[command(
    name = "specdiff",
    about = "Diffusion-based time-series forecasting with a learnable spectral noise schedule"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run two-stage training from a config file and a dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load a checkpoint and emit forecast-distribution exports for the test
    /// windows
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on the number of test windows (0 = all)
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Score emitted forecasts against held-out truth
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export the realized schedule, its flatness trajectory, and a
    /// projected-gradient verification trace
    AnalyzeSchedule {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "sin2")]
        generator: String,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<AppConfig> {
    let mut cfg = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Manifest accumulating named files plus structured sections; a run is only
/// complete once every listed file exists.
struct Manifest {
    command: String,
    seed: u64,
    files: Vec<String>,
    sections: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str, seed: u64) -> Self {
        Manifest { command: command.into(), seed, files: Vec::new(), sections: Vec::new() }
    }

    fn file(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    fn section(&mut self, name: &str, body: String) {
        self.sections.push((name.to_string(), body));
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut out = String::from("run-manifest v1\n");
        out.push_str(&format!("command {}\n", self.command));
        out.push_str(&format!("seed {}\n", self.seed));
        for f in &self.files {
            if !dir.join(f).exists() {
                return Err(Error::contract(format!("manifest names missing file '{}'", f)));
            }
            out.push_str(&format!("file {}\n", f));
        }
        for (name, body) in &self.sections {
            out.push_str(&format!("[{}]\n", name));
            out.push_str(body);
            if !body.ends_with('\n') {
                out.push('\n');
            }
        }
        write_file(dir, "manifest.txt", &out)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, seed } => cmd_train(&config, &data, &out, seed),
        Command::Sample { config, checkpoint, schedule, data, out, seed, limit } => {
            cmd_sample(&config, &checkpoint, &schedule, &data, &out, seed, limit)
        }
        Command::Evaluate { config, data, forecasts, out, seed } => {
            cmd_evaluate(&config, &data, &forecasts, &out, seed)
        }
        Command::AnalyzeSchedule { config, data, out, seed } => {
            cmd_analyze(&config, &data, &out, seed)
        }
        Command::Synth { config, generator, rows, channels, out, seed } => {
            cmd_synth(&config, &generator, rows, channels, &out, seed)
        }
    }
}

fn cmd_train(config: &Option<PathBuf>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    ensure_dir(out)?;
    let dataset = load_csv(&DatasetSpec::csv(data))?;
    let trainer = train_full_with(
        &dataset.values,
        &cfg.train,
        cfg.fgd_config(dataset.values.cols()),
        cfg.sigma_mode,
    )?;
    export_training_run(&cfg, &trainer, out)
}

fn export_training_run(cfg: &AppConfig, trainer: &Trainer, out: &Path) -> Result<()> {
    let mut manifest = Manifest::new("train", cfg.train.seed);
    save_checkpoint(&trainer.denoiser, &out.join("checkpoint.txt"))?;
    manifest.file("checkpoint.txt");
    write_file(out, "schedule.txt", &trainer.realized_schedule()?.export_text())?;
    manifest.file("schedule.txt");
    for (i, snap) in trainer.log.schedule_snapshots.iter().enumerate() {
        let name = format!("schedule_round_{}.txt", i + 1);
        write_file(out, &name, &snap.export_text())?;
        manifest.file(&name);
    }
    manifest.section("config", cfg.echo_text());
    let mut s1 = String::new();
    for (i, (f, s)) in trainer
        .log
        .stage_one_fgd
        .iter()
        .zip(&trainer.log.stage_one_sts)
        .enumerate()
    {
        s1.push_str(&format!("round {} fgd {:.16e} sts {:.16e}\n", i + 1, f, s));
    }
    manifest.section("stage-one", s1);
    let mut s2 = String::new();
    for (i, (t, v)) in trainer
        .log
        .stage_two_train
        .iter()
        .zip(&trainer.log.stage_two_val)
        .enumerate()
    {
        s2.push_str(&format!("epoch {} train {:.16e} val {:.16e}\n", i + 1, t, v));
    }
    s2.push_str(&format!(
        "best_epoch {}\n",
        trainer.log.best_epoch.map(|e| (e + 1) as i64).unwrap_or(-1)
    ));
    s2.push_str(&format!("stopped_early {}\n", trainer.log.stopped_early));
    manifest.section("stage-two", s2);
    manifest.write(out)
}

fn test_windows(cfg: &AppConfig, series: &Tensor, limit: usize) -> Result<Vec<SeriesWindow>> {
    let split = make_windows(
        series,
        cfg.train.history_len,
        cfg.train.horizon,
        cfg.train.stride,
        cfg.train.split,
    )?;
    let mut test = split.test;
    if limit > 0 && test.len() > limit {
        test.truncate(limit);
    }
    if test.is_empty() {
        return Err(Error::contract("no test windows under this split"));
    }
    Ok(test)
}

fn forecast_file_name(start: usize) -> String {
    format!("forecast_w{}.csv", start)
}

fn export_distribution(dist: &ForecastDistribution) -> String {
    let mut out = String::from("sample,step,channel,value\n");
    for (s, sample) in dist.samples.iter().enumerate() {
        for step in 0..dist.horizon {
            for channel in 0..dist.channels {
                out.push_str(&format!(
                    "{},{},{},{:.16e}\n",
                    s,
                    step,
                    channel,
                    sample.at(step, channel)
                ));
            }
        }
    }
    out
}

fn parse_distribution(text: &str, location: &str) -> Result<ForecastDistribution> {
    let mut cells: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut max = (0usize, 0usize, 0usize);
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 {
            if line != "sample,step,channel,value" {
                return Err(Error::Parse {
                    location: format!("{}:1", location),
                    detail: format!("unexpected header '{}'", line),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |detail: String| Error::Parse {
            location: format!("{}:{}", location, line_no + 1),
            detail,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let s: usize = fields[0].parse().map_err(|_| bad(format!("bad sample '{}'", fields[0])))?;
        let step: usize = fields[1].parse().map_err(|_| bad(format!("bad step '{}'", fields[1])))?;
        let ch: usize = fields[2].parse().map_err(|_| bad(format!("bad channel '{}'", fields[2])))?;
        let v: f64 = fields[3].parse().map_err(|_| bad(format!("bad value '{}'", fields[3])))?;
        max = (max.0.max(s), max.1.max(step), max.2.max(ch));
        cells.insert((s, step, ch), v);
    }
    let (num_samples, horizon, channels) = (max.0 + 1, max.1 + 1, max.2 + 1);
    if cells.len() != num_samples * horizon * channels {
        return Err(Error::Parse {
            location: location.to_string(),
            detail: "forecast grid has missing cells".into(),
        });
    }
    let mut samples = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let mut t = Tensor::zeros(&[horizon, channels]);
        for step in 0..horizon {
            for ch in 0..channels {
                t.set(step, ch, cells[&(s, step, ch)]);
            }
        }
        samples.push(t);
    }
    Ok(ForecastDistribution { samples, horizon, channels })
}

fn cmd_sample(
    config: &Option<PathBuf>,
    checkpoint: &Path,
    schedule_path: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    limit: usize,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    ensure_dir(out)?;
    let params = load_checkpoint(checkpoint)?;
    let schedule_text = std::fs::read_to_string(schedule_path)
        .map_err(|e| Error::io(schedule_path.display().to_string(), e))?;
    let schedule = RealizedSchedule::parse_text(&schedule_text, cfg.sigma_mode)?;
    let dataset = load_csv(&DatasetSpec::csv(data))?;
    let test = test_windows(&cfg, &dataset.values, limit)?;

    let mut manifest = Manifest::new("sample", cfg.train.seed);
    let mut index = String::from("start,file\n");
    let base_rng = RandomSource::new(cfg.train.seed).fork(0x5a3);
    for w in &test {
        let (norm, stats) = instance_normalize(w)?;
        let rng = base_rng.fork(w.start as u64 + 1);
        let dist = ancestral_sample(
            &params,
            &schedule,
            &norm.history,
            cfg.train.horizon,
            dataset.values.cols(),
            cfg.eval.samples,
            &rng,
        )?;
        let denorm = ForecastDistribution {
            samples: dist.samples.iter().map(|s| denormalize(s, &stats)).collect(),
            horizon: dist.horizon,
            channels: dist.channels,
        };
        let name = forecast_file_name(w.start);
        write_file(out, &name, &export_distribution(&denorm))?;
        index.push_str(&format!("{},{}\n", w.start, name));
        manifest.file(&name);
    }
    write_file(out, "index.csv", &index)?;
    manifest.file("index.csv");
    manifest.section("config", cfg.echo_text());
    manifest.write(out)
}

fn cmd_evaluate(
    config: &Option<PathBuf>,
    data: &Path,
    forecasts: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    ensure_dir(out)?;
    let dataset = load_csv(&DatasetSpec::csv(data))?;
    let index_path = forecasts.join("index.csv");
    let index_text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    let mut emitted: Vec<(usize, String)> = Vec::new();
    for (line_no, line) in index_text.lines().enumerate() {
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let (start, file) = line.split_once(',').ok_or_else(|| Error::Parse {
            location: format!("index.csv:{}", line_no + 1),
            detail: format!("malformed line '{}'", line),
        })?;
        emitted.push((
            start.parse().map_err(|_| Error::Parse {
                location: format!("index.csv:{}", line_no + 1),
                detail: format!("bad start '{}'", start),
            })?,
            file.to_string(),
        ));
    }
    let test = test_windows(&cfg, &dataset.values, emitted.len())?;
    // alignment guard: forecasts must cover exactly these windows
    let expected: Vec<usize> = test.iter().map(|w| w.start).collect();
    let got: Vec<usize> = emitted.iter().map(|(s, _)| *s).collect();
    if expected != got {
        return Err(Error::contract(format!(
            "forecast windows {:?}... disagree with test windows {:?}...; refusing to score",
            &got[..got.len().min(4)],
            &expected[..expected.len().min(4)]
        )));
    }

    let mut per_instance = Vec::new();
    let mut sample_count = 0;
    for (w, (_, file)) in test.iter().zip(&emitted) {
        let path = forecasts.join(file);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let dist = parse_distribution(&text, file)?;
        sample_count = dist.num_samples();
        per_instance.push(evaluate_instance(&dist, &w.target)?);
    }
    let report = MetricReport::aggregate(&per_instance, sample_count)?;

    let mut manifest = Manifest::new("evaluate", cfg.train.seed);
    write_file(out, "metrics.txt", &report.export_text())?;
    manifest.file("metrics.txt");
    write_file(out, "mse_histogram.csv", &histogram_export(&report.per_instance_mse)?)?;
    manifest.file("mse_histogram.csv");
    // persistence baseline for direction-of-effect comparisons
    let baseline: Vec<(f64, f64, f64)> = test
        .iter()
        .map(|w| {
            let pred = persistence_forecast(&w.history, cfg.train.horizon);
            let dist = ForecastDistribution {
                samples: vec![pred.clone()],
                horizon: cfg.train.horizon,
                channels: w.target.cols(),
            };
            evaluate_instance(&dist, &w.target)
        })
        .collect::<Result<_>>()?;
    let baseline_report = MetricReport::aggregate(&baseline, 1)?;
    write_file(out, "baseline_metrics.txt", &baseline_report.export_text())?;
    manifest.file("baseline_metrics.txt");
    manifest.section("config", cfg.echo_text());
    manifest.write(out)
}

/// Batch-mean spectral flatness of forward samples at every step t = 0..=T.
pub fn flatness_trajectory(
    schedule: &RealizedSchedule,
    windows: &[SeriesWindow],
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::contract("flatness trajectory needs at least one window"));
    }
    let t_total = schedule.t_steps();
    let mut out = Vec::with_capacity(t_total + 1);
    let noises: Vec<Tensor> =
        windows.iter().map(|w| rng.normal_tensor(w.target.shape())).collect();
    for t in 0..=t_total {
        let mut acc = 0.0;
        for (w, noise) in windows.iter().zip(&noises) {
            let x_t = if t == 0 {
                w.target.clone()
            } else {
                forward_sample(&w.target, schedule.alpha_bar_t(t), noise)?
            };
            acc += spectral_flatness(&x_t)?;
        }
        out.push(acc / windows.len() as f64);
    }
    Ok(out)
}

fn cmd_analyze(
    config: &Option<PathBuf>,
    data: &Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    ensure_dir(out)?;
    let mut manifest = Manifest::new("analyze-schedule", cfg.train.seed);

    let mut schedule = ParametricSchedule::new(
        cfg.train.t_steps,
        cfg.train.template,
        cfg.train.beta_start,
        cfg.train.beta_end,
        cfg.clamp_eps,
        cfg.train.seed,
    )?;
    schedule.sigma_mode = cfg.sigma_mode;
    let realized = schedule.realize()?;
    write_file(out, "schedule.txt", &realized.export_text())?;
    manifest.file("schedule.txt");

    // flatness trajectory over instance-normalized windows
    let series = match data {
        Some(p) => load_csv(&DatasetSpec::csv(p))?.values,
        None => generate_synthetic(
            "sin2",
            2 * (cfg.train.history_len + cfg.train.horizon) + 64,
            2,
            cfg.train.seed,
        )?,
    };
    let split = make_windows(
        &series,
        cfg.train.history_len,
        cfg.train.horizon,
        cfg.train.stride,
        (1.0, 0.0, 0.0),
    )?;
    let mut windows = split.train;
    windows.truncate(32);
    let windows: Vec<SeriesWindow> = windows
        .iter()
        .map(|w| instance_normalize(w).map(|(n, _)| n))
        .collect::<Result<_>>()?;
    let mut rng = RandomSource::new(cfg.train.seed).fork(0xf1a7);
    let trajectory = flatness_trajectory(&realized, &windows, &mut rng)?;
    let mut flat = String::from("t flatness\n");
    for (t, v) in trajectory.iter().enumerate() {
        flat.push_str(&format!("{} {:.16e}\n", t, v));
    }
    write_file(out, "flatness.txt", &flat)?;
    manifest.file("flatness.txt");

    // projected-gradient verification trace on a synthetic quadratic
    let mut pgd_rng = RandomSource::new(cfg.train.seed).fork(0x96d);
    let objective = QuadraticObjective::random(cfg.train.t_steps, &mut pgd_rng);
    let eta = 1.0 / objective.smoothness();
    let start = Tensor::full(&[cfg.train.t_steps, 1], 0.5);
    let trace = run_pgd(&objective, &start, (0.0, 1.0), 1e-6, 10_000)?;
    let mut pgd = String::from("k value mapping_norm descent_ok\n");
    for k in 0..trace.mapping_norms.len() {
        let lhs = trace.values[k + 1];
        let rhs = trace.values[k] - 0.5 * eta * trace.mapping_norms[k].powi(2);
        pgd.push_str(&format!(
            "{} {:.16e} {:.16e} {}\n",
            k,
            trace.values[k],
            trace.mapping_norms[k],
            lhs <= rhs + 1e-12
        ));
    }
    pgd.push_str(&format!("converged {} iterations {}\n", trace.converged, trace.iterations));
    write_file(out, "pgd_trace.txt", &pgd)?;
    manifest.file("pgd_trace.txt");

    manifest.section("config", cfg.echo_text());
    manifest.write(out)
}

fn cmd_synth(
    config: &Option<PathBuf>,
    generator: &str,
    rows: usize,
    channels: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    ensure_dir(out)?;
    let values = generate_synthetic(generator, rows, channels, cfg.train.seed)?;
    let names: Vec<String> = (0..channels).map(|c| format!("ch{}", c)).collect();
    write_csv(&out.join("data.csv"), &values, &names)?;
    let mut manifest = Manifest::new("synth", cfg.train.seed);
    manifest.file("data.csv");
    manifest.section(
        "generator",
        format!("name {}\nrows {}\nchannels {}\n", generator, rows, channels),
    );
    manifest.section("config", cfg.echo_text());
    manifest.write(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("specdiff_cli_{}_{}", tag, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_config_text() -> &'static str {
        "[train]\n\
         epochs = 2\n\
         alternation_epochs = 1\n\
         batch_size = 8\n\
         history_len = 24\n\
         horizon = 8\n\
         patience = 5\n\
         seed = 3\n\
         [schedule]\n\
         t_steps = 4\n\
         [denoiser]\n\
         hidden = 16\n\
         gate_hidden = 8\n\
         embed_dim = 8\n\
         [eval]\n\
         samples = 5\n"
    }

    fn run_args(args: &[&str]) -> Result<()> {
        let cli = Cli::try_parse_from(std::iter::once("specdiff").chain(args.iter().copied()))
            .map_err(|e| Error::contract(e.to_string()))?;
        run(cli)
    }

    #[test]
    fn full_pipeline_on_synthetic_data() {
        let root = temp_dir("pipeline");
        let cfg_path = root.join("cfg.txt");
        std::fs::write(&cfg_path, tiny_config_text()).unwrap();
        let cfg = cfg_path.to_str().unwrap();
        let synth_dir = root.join("synth");
        let train_dir = root.join("train");
        let sample_dir = root.join("sample");
        let eval_dir = root.join("eval");

        run_args(&[
            "synth",
            "--config",
            cfg,
            "--rows",
            "400",
            "--out",
            synth_dir.to_str().unwrap(),
        ])
        .unwrap();
        let data = synth_dir.join("data.csv");
        assert!(data.exists());

        run_args(&[
            "train",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--out",
            train_dir.to_str().unwrap(),
        ])
        .unwrap();
        assert!(train_dir.join("checkpoint.txt").exists());
        assert!(train_dir.join("schedule.txt").exists());
        let manifest = std::fs::read_to_string(train_dir.join("manifest.txt")).unwrap();
        assert!(manifest.contains("[config]"));
        assert!(manifest.contains("[stage-two]"));
        // every file the manifest names exists
        for line in manifest.lines().filter(|l| l.starts_with("file ")) {
            assert!(train_dir.join(&line[5..]).exists(), "{}", line);
        }

        run_args(&[
            "sample",
            "--config",
            cfg,
            "--checkpoint",
            train_dir.join("checkpoint.txt").to_str().unwrap(),
            "--schedule",
            train_dir.join("schedule.txt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            sample_dir.to_str().unwrap(),
            "--limit",
            "3",
        ])
        .unwrap();
        assert!(sample_dir.join("index.csv").exists());

        run_args(&[
            "evaluate",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--forecasts",
            sample_dir.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ])
        .unwrap();
        let report =
            MetricReport::parse(&std::fs::read_to_string(eval_dir.join("metrics.txt")).unwrap())
                .unwrap();
        assert!(report.crps > 0.0);
        assert!(report.instance_count == 3);
        assert!(eval_dir.join("baseline_metrics.txt").exists());

        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn analyze_schedule_linear_template_is_affine() {
        let root = temp_dir("analyze");
        let cfg_path = root.join("cfg.txt");
        std::fs::write(&cfg_path, tiny_config_text().replace("t_steps = 4", "t_steps = 12"))
            .unwrap();
        run_args(&[
            "analyze-schedule",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            root.join("out").to_str().unwrap(),
        ])
        .unwrap();
        let text = std::fs::read_to_string(root.join("out/schedule.txt")).unwrap();
        let beta: Vec<f64> = text
            .lines()
            .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(beta.len(), 12);
        for w in beta.windows(3) {
            assert!((w[0] - 2.0 * w[1] + w[2]).abs() < 1e-12);
        }
        let pgd = std::fs::read_to_string(root.join("out/pgd_trace.txt")).unwrap();
        assert!(pgd.contains("converged true"));
        assert!(!pgd.contains(" false\n"));
        let flat = std::fs::read_to_string(root.join("out/flatness.txt")).unwrap();
        assert_eq!(flat.lines().count(), 14); // header + t = 0..=12
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn evaluate_rejects_misaligned_forecasts() {
        let root = temp_dir("misaligned");
        let cfg_path = root.join("cfg.txt");
        std::fs::write(&cfg_path, tiny_config_text()).unwrap();
        let cfg = cfg_path.to_str().unwrap();
        let synth_dir = root.join("synth");
        run_args(&["synth", "--config", cfg, "--rows", "400", "--out", synth_dir.to_str().unwrap()])
            .unwrap();
        let data = synth_dir.join("data.csv");
        let fake = root.join("fake");
        std::fs::create_dir_all(&fake).unwrap();
        std::fs::write(fake.join("index.csv"), "start,file\n0,forecast_w0.csv\n").unwrap();
        std::fs::write(
            fake.join("forecast_w0.csv"),
            "sample,step,channel,value\n0,0,0,1.0\n",
        )
        .unwrap();
        let err = run_args(&[
            "evaluate",
            "--config",
            cfg,
            "--data",
            data.to_str().unwrap(),
            "--forecasts",
            fake.to_str().unwrap(),
            "--out",
            root.join("out").to_str().unwrap(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("refusing to score"), "{}", err);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn unknown_generator_fails() {
        let root = temp_dir("badgen");
        let err = run_args(&[
            "synth",
            "--generator",
            "mystery",
            "--out",
            root.join("out").to_str().unwrap(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("sin2"), "{}", err);
        std::fs::remove_dir_all(&root).ok();
    }

    #[test]
    fn forecast_export_roundtrip() {
        let dist = ForecastDistribution {
            samples: vec![
                Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            ],
            horizon: 2,
            channels: 2,
        };
        let text = export_distribution(&dist);
        assert!(text.starts_with("sample,step,channel,value\n"));
        let parsed = parse_distribution(&text, "test").unwrap();
        assert_eq!(parsed.samples, dist.samples);
    }

    #[test]
    fn seed_override_changes_run_but_stays_reproducible() {
        let root = temp_dir("seeds");
        let cfg_path = root.join("cfg.txt");
        std::fs::write(&cfg_path, tiny_config_text()).unwrap();
        let cfg = cfg_path.to_str().unwrap();
        let synth_dir = root.join("synth");
        run_args(&["synth", "--config", cfg, "--rows", "400", "--out", synth_dir.to_str().unwrap()])
            .unwrap();
        let data = synth_dir.join("data.csv");
        let run_train = |tag: &str, seed: &str| {
            let dir = root.join(tag);
            run_args(&[
                "train",
                "--config",
                cfg,
                "--data",
                data.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                seed,
            ])
            .unwrap();
            std::fs::read_to_string(dir.join("checkpoint.txt")).unwrap()
        };
        let a1 = run_train("s5a", "5");
        let a2 = run_train("s5b", "5");
        let b = run_train("s6", "6");
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        std::fs::remove_dir_all(&root).ok();
    }
}
