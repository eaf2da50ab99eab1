//! Two-stage training: alternating scheduler/denoiser epochs, then
//! denoiser-only training under the frozen learned schedule. Also the Adam
//! optimizer, sliding-window datasets, and chronological splits.

use crate::dataio::SeriesWindow;
use crate::denoiser::{denoiser_loss, instance_normalize, FgdParams};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scheduler::{
    sts_total_loss, ParametricSchedule, RealizedSchedule, ScheduleTemplate, StsWeights,
};
use crate::tensor::Tensor;

pub const GRAD_CLIP_NORM: f64 = 10.0;
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
pub const ADAM_EPS: f64 = 1e-8;

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t_steps: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub alternation_epochs: usize,
    pub seed: u64,
    pub weights: StsWeights,
    pub template: ScheduleTemplate,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learn_schedule: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub stride: usize,
    pub split: (f64, f64, f64),
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_steps: 50,
            history_len: 168,
            horizon: 24,
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 50,
            alternation_epochs: 3,
            seed: 1,
            weights: StsWeights::default(),
            template: ScheduleTemplate::Linear,
            beta_start: 1e-5,
            beta_end: 0.1,
            learn_schedule: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            stride: 1,
            split: (0.7, 0.1, 0.2),
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alternation_epochs > self.epochs {
            return Err(Error::contract(format!(
                "alternation epochs k = {} exceed total epochs {}",
                self.alternation_epochs, self.epochs
            )));
        }
        if self.t_steps < 1
            || self.history_len < 2
            || self.horizon < 1
            || self.batch_size < 1
            || self.epochs < 1
            || self.alternation_epochs < 1
            || self.stride < 1
        {
            return Err(Error::contract("all training counts must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::contract("split fractions must be nonnegative and sum to 1"));
        }
        self.weights.validate()
    }
}

// ---- optimizer ----

/// Bias-corrected first/second-moment accumulators, one pair per tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One Adam update across a parameter group list. Gradients are jointly
/// clipped to a global norm of 10 before the moment update; non-finite
/// gradients abort with the offending group's name.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::contract("optimizer group count mismatch"));
    }
    for (g, name) in grads.iter().zip(names) {
        if !g.all_finite() {
            return Err(Error::Numeric {
                op: "optimizer_step",
                detail: format!("non-finite gradient in parameter group '{}'", name),
            });
        }
    }
    let total_norm: f64 = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    let clip = if total_norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / total_norm } else { 1.0 };
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i].scale(clip);
        state.m[i] = state.m[i].scale(beta1).add(&g.scale(1.0 - beta1))?;
        let g2 = g.mul(&g)?;
        state.v[i] = state.v[i].scale(beta2).add(&g2.scale(1.0 - beta2))?;
        for j in 0..params[i].len() {
            let m_hat = state.m[i].data()[j] / bc1;
            let v_hat = state.v[i].data()[j] / bc2;
            params[i].data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ---- windowing ----

#[derive(Debug, Clone)]
pub struct WindowSplit {
    pub train: Vec<SeriesWindow>,
    pub val: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
}

/// Sliding windows with a chronological count-based split. Errors if the raw
/// row ranges of the train and test portions overlap (the validation segment
/// must be long enough to separate them).
pub fn make_windows(
    series: &Tensor,
    history_len: usize,
    horizon: usize,
    stride: usize,
    split: (f64, f64, f64),
) -> Result<WindowSplit> {
    let n = series.rows();
    let d = series.cols();
    let total = history_len + horizon;
    if n < total {
        return Err(Error::contract(format!(
            "series length {} shorter than L + H = {}",
            n, total
        )));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + total <= n {
        let slice = |from: usize, len: usize| {
            let mut t = Tensor::zeros(&[len, d]);
            for r in 0..len {
                for c in 0..d {
                    t.set(r, c, series.at(from + r, c));
                }
            }
            t
        };
        windows.push(SeriesWindow {
            history: slice(start, history_len),
            target: slice(start + history_len, horizon),
            start,
        });
        start += stride;
    }
    let w = windows.len();
    let n_train = (split.0 * w as f64).floor() as usize;
    let n_val = (split.1 * w as f64).floor() as usize;
    let mut iter = windows.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let val: Vec<_> = iter.by_ref().take(n_val).collect();
    let test: Vec<_> = iter.collect();
    if let (Some(last_train), Some(first_test)) = (train.last(), test.first()) {
        let train_end = last_train.start + total; // exclusive raw row bound
        if first_test.start < train_end {
            return Err(Error::contract(format!(
                "train rows [..{}) overlap test rows [{}..): widen the validation segment",
                train_end, first_test.start
            )));
        }
    }
    Ok(WindowSplit { train, val, test })
}

/// Normalize every window with its own history statistics; the schedule and
/// denoiser both train in this normalized space.
pub fn normalize_windows(windows: &[SeriesWindow]) -> Result<Vec<SeriesWindow>> {
    windows.iter().map(|w| instance_normalize(w).map(|(n, _)| n)).collect()
}

fn shuffled_indices(n: usize, rng: &mut RandomSource) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        idx.swap(i, j);
    }
    idx
}

// ---- training stages ----

/// Per-epoch losses and schedule snapshots of a full run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub stage_one_fgd: Vec<f64>,
    pub stage_one_sts: Vec<f64>,
    pub schedule_snapshots: Vec<RealizedSchedule>,
    pub stage_two_train: Vec<f64>,
    pub stage_two_val: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: ParametricSchedule,
    pub denoiser: FgdParams,
    fgd_opt: OptimizerState,
    sts_opt: OptimizerState,
    rng: RandomSource,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: TrainConfig, schedule: ParametricSchedule, denoiser: FgdParams) -> Result<Self> {
        config.validate()?;
        let fgd_opt = OptimizerState::new(&denoiser.params());
        let sts_opt = OptimizerState::new(&schedule.params());
        let rng = RandomSource::new(config.seed).fork(0x7e41);
        Ok(Trainer { config, schedule, denoiser, fgd_opt, sts_opt, rng, log: TrainLog::default() })
    }

    fn batches<'a>(
        windows: &'a [SeriesWindow],
        batch_size: usize,
        rng: &mut RandomSource,
    ) -> Vec<Vec<&'a SeriesWindow>> {
        let order = shuffled_indices(windows.len(), rng);
        order
            .chunks(batch_size)
            .map(|chunk| chunk.iter().map(|&i| &windows[i]).collect())
            .collect()
    }

    /// One epoch of denoiser updates under a fixed realized schedule; the
    /// scheduler parameters are never touched. Returns the mean batch loss.
    pub fn run_fgd_epoch(
        &mut self,
        windows: &[SeriesWindow],
        schedule: &RealizedSchedule,
        stage: &str,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        let batches = Self::batches(windows, self.config.batch_size, &mut self.rng);
        for batch in batches {
            let owned: Vec<SeriesWindow> = batch.into_iter().cloned().collect();
            let (loss, grads) = denoiser_loss(&self.denoiser, &owned, schedule, &mut self.rng)?;
            if loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    detail: format!("denoiser loss {} above {}", loss, DIVERGENCE_THRESHOLD),
                });
            }
            optimizer_step(
                &mut self.denoiser.params_mut(),
                &grads,
                FgdParams::param_names(),
                &mut self.fgd_opt,
                self.config.learning_rate,
                self.config.adam_beta1,
                self.config.adam_beta2,
            )?;
            total += loss;
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    /// One epoch of schedule updates against the frozen denoiser. Returns the
    /// mean batch loss.
    pub fn run_sts_epoch(&mut self, windows: &[SeriesWindow], stage: &str) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        let batches = Self::batches(windows, self.config.batch_size, &mut self.rng);
        for batch in batches {
            let owned: Vec<SeriesWindow> = batch.into_iter().cloned().collect();
            let (loss, grads) = sts_total_loss(
                &self.schedule,
                &self.config.weights,
                &owned,
                &self.denoiser,
                &mut self.rng,
            )?;
            if loss.abs() > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    detail: format!("schedule loss {} above {}", loss, DIVERGENCE_THRESHOLD),
                });
            }
            optimizer_step(
                &mut self.schedule.params_mut(),
                &grads,
                ParametricSchedule::param_names(),
                &mut self.sts_opt,
                self.config.learning_rate,
                self.config.adam_beta1,
                self.config.adam_beta2,
            )?;
            total += loss;
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Stage one: k alternation rounds, each one denoiser epoch under the
    /// current frozen schedule followed by one schedule epoch against the
    /// frozen denoiser. Skipped entirely when the schedule is not learned.
    pub fn stage_one(&mut self, train: &[SeriesWindow]) -> Result<()> {
        if !self.config.learn_schedule {
            return Ok(());
        }
        for round in 0..self.config.alternation_epochs {
            let stage = format!("stage-one round {}", round + 1);
            let realized = self.schedule.realize()?;
            let fgd_loss = self.run_fgd_epoch(train, &realized, &stage)?;
            let sts_loss = self.run_sts_epoch(train, &stage)?;
            self.log.stage_one_fgd.push(fgd_loss);
            self.log.stage_one_sts.push(sts_loss);
            self.log.schedule_snapshots.push(self.schedule.realize()?);
        }
        Ok(())
    }

    /// Validation loss without any parameter update.
    pub fn validation_loss(
        &self,
        windows: &[SeriesWindow],
        schedule: &RealizedSchedule,
    ) -> Result<f64> {
        // fixed stream: validation must not advance training randomness
        let mut rng = RandomSource::new(self.config.seed).fork(0x7a1);
        let (loss, _) = denoiser_loss(&self.denoiser, windows, schedule, &mut rng)?;
        Ok(loss)
    }

    /// Stage two: the schedule is frozen and realized once; the denoiser
    /// trains for the remaining epochs with early stopping on validation
    /// loss. The best-validation parameters are restored at the end.
    pub fn stage_two(&mut self, train: &[SeriesWindow], val: &[SeriesWindow]) -> Result<()> {
        let realized = self.schedule.realize()?;
        let stage_epochs = if self.config.learn_schedule {
            self.config.epochs - self.config.alternation_epochs
        } else {
            self.config.epochs
        };
        let mut best: Option<(f64, FgdParams, usize)> = None;
        let mut since_best = 0usize;
        for epoch in 0..stage_epochs {
            let stage = format!("stage-two epoch {}", epoch + 1);
            let train_loss = self.run_fgd_epoch(train, &realized, &stage)?;
            let val_loss = if val.is_empty() {
                train_loss
            } else {
                self.validation_loss(val, &realized)?
            };
            self.log.stage_two_train.push(train_loss);
            self.log.stage_two_val.push(val_loss);
            let improved = best.as_ref().map(|(b, _, _)| val_loss < *b).unwrap_or(true);
            if improved {
                best = Some((val_loss, self.denoiser.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience {
                    self.log.stopped_early = true;
                    break;
                }
            }
        }
        if let Some((_, params, epoch)) = best {
            self.denoiser = params;
            self.log.best_epoch = Some(epoch);
        }
        Ok(())
    }

    pub fn realized_schedule(&self) -> Result<RealizedSchedule> {
        self.schedule.realize()
    }
}

/// Complete two-stage run on a raw series: window, normalize, train.
pub fn train_full(series: &Tensor, config: &TrainConfig) -> Result<Trainer> {
    let fgd_config =
        crate::denoiser::FgdConfig::new(config.history_len, config.horizon, series.cols());
    train_full_with(series, config, fgd_config, crate::scheduler::SigmaMode::default())
}

/// [`train_full`] with explicit denoiser widths and sigma mode.
pub fn train_full_with(
    series: &Tensor,
    config: &TrainConfig,
    fgd_config: crate::denoiser::FgdConfig,
    sigma_mode: crate::scheduler::SigmaMode,
) -> Result<Trainer> {
    config.validate()?;
    if fgd_config.history_len != config.history_len
        || fgd_config.horizon != config.horizon
        || fgd_config.channels != series.cols()
    {
        return Err(Error::contract("denoiser shape settings disagree with the training config"));
    }
    let split = make_windows(
        series,
        config.history_len,
        config.horizon,
        config.stride,
        config.split,
    )?;
    let train = normalize_windows(&split.train)?;
    let val = normalize_windows(&split.val)?;
    let mut schedule = ParametricSchedule::new(
        config.t_steps,
        config.template,
        config.beta_start,
        config.beta_end,
        crate::scheduler::DEFAULT_CLAMP_EPS,
        config.seed,
    )?;
    schedule.sigma_mode = sigma_mode;
    let denoiser = FgdParams::init(fgd_config, config.seed)?;
    let mut trainer = Trainer::new(config.clone(), schedule, denoiser)?;
    trainer.stage_one(&train)?;
    trainer.stage_two(&train, &val)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;
    use crate::denoiser::FgdConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            t_steps: 4,
            history_len: 8,
            horizon: 4,
            batch_size: 4,
            learning_rate: 1e-3,
            epochs: 3,
            alternation_epochs: 1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_trainer(config: &TrainConfig) -> Trainer {
        let schedule = ParametricSchedule::new(
            config.t_steps,
            config.template,
            config.beta_start,
            config.beta_end,
            1e-5,
            config.seed,
        )
        .unwrap();
        let fgd = FgdParams::init(
            FgdConfig {
                hidden: 16,
                gate_hidden: 8,
                embed_dim: 8,
                ..FgdConfig::new(config.history_len, config.horizon, 2)
            },
            config.seed,
        )
        .unwrap();
        Trainer::new(config.clone(), schedule, fgd).unwrap()
    }

    fn tiny_windows(n: usize, seed: u64) -> Vec<SeriesWindow> {
        let series = generate_synthetic("sin2", n + 12, 2, seed).unwrap();
        let split = make_windows(&series, 8, 4, 1, (1.0, 0.0, 0.0)).unwrap();
        normalize_windows(&split.train[..n.min(split.train.len())].to_vec()).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::from_column(&[1.0, -2.0]);
        let before = p.clone();
        let mut state = OptimizerState::new(&[&p]);
        let g = Tensor::zeros(&[2, 1]);
        optimizer_step(&mut [&mut p], &[g], &["g"], &mut state, 0.1, 0.9, 0.999).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        for &g in &[3.0, -0.02] {
            let mut p = Tensor::scalar(0.0);
            let mut state = OptimizerState::new(&[&p]);
            let grad = Tensor::scalar(g);
            optimizer_step(&mut [&mut p], &[grad], &["g"], &mut state, 0.05, 0.9, 0.999).unwrap();
            let moved = p.scalar_value();
            assert!((moved + 0.05 * g.signum()).abs() < 1e-6, "g {}: moved {}", g, moved);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = 0.5 (x - 2)^2; low first-moment decay avoids the terminal
        // oscillation of the default betas on a 1-D quadratic
        let mut p = Tensor::scalar(0.0);
        let mut state = OptimizerState::new(&[&p]);
        for _ in 0..100 {
            let grad = Tensor::scalar(p.scalar_value() - 2.0);
            optimizer_step(&mut [&mut p], &[grad], &["x"], &mut state, 0.3, 0.5, 0.99).unwrap();
        }
        assert!((p.scalar_value() - 2.0).abs() < 1e-6, "final {}", p.scalar_value());
    }

    #[test]
    fn adam_rejects_nan_gradient_with_group_name() {
        let mut p = Tensor::scalar(0.0);
        let mut state = OptimizerState::new(&[&p]);
        let grad = Tensor::scalar(f64::NAN);
        let err = optimizer_step(&mut [&mut p], &[grad], &["fgd.head_w"], &mut state, 0.1, 0.9, 0.999)
            .unwrap_err();
        assert!(err.to_string().contains("fgd.head_w"), "{}", err);
    }

    #[test]
    fn gradient_clipping_matches_prescaled_gradient() {
        let run = |grad: Tensor| {
            let mut p = Tensor::from_column(&[1.0, 1.0]);
            let mut state = OptimizerState::new(&[&p]);
            optimizer_step(&mut [&mut p], &[grad], &["g"], &mut state, 0.1, 0.9, 0.999).unwrap();
            p
        };
        let big = Tensor::from_column(&[600.0, 800.0]); // norm 1000
        let scaled = big.scale(GRAD_CLIP_NORM / 1000.0);
        assert_eq!(run(big), run(scaled));
    }

    #[test]
    fn window_count_example() {
        let series = Tensor::matrix(10, 1, (0..10).map(|i| i as f64).collect()).unwrap();
        let split = make_windows(&series, 3, 2, 1, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 6);
        assert_eq!(split.train[0].history.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(split.train[0].target.data(), &[3.0, 4.0]);
        assert_eq!(split.train[5].start, 5);
    }

    #[test]
    fn split_fractions_and_leakage_guard() {
        // L + H = 5: 100 windows need 104 rows; val spans starts 70..79,
        // train's last raw row is 73 < test's first start 80
        let series = Tensor::matrix(104, 1, (0..104).map(|i| i as f64).collect()).unwrap();
        let split = make_windows(&series, 3, 2, 1, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(split.train.len(), 70);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 20);
        // exhaustive raw-index scan
        let train_rows: std::collections::HashSet<usize> = split
            .train
            .iter()
            .flat_map(|w| w.start..w.start + 5)
            .collect();
        for w in &split.test {
            for r in w.start..w.start + 5 {
                assert!(!train_rows.contains(&r), "row {} leaks", r);
            }
        }
    }

    #[test]
    fn leakage_rejected_when_val_too_short() {
        // L + H = 40 but the validation gap is only ~10 starts
        let series = Tensor::matrix(140, 1, (0..140).map(|i| i as f64).collect()).unwrap();
        assert!(make_windows(&series, 30, 10, 1, (0.7, 0.1, 0.2)).is_err());
    }

    #[test]
    fn too_short_series_rejected() {
        let series = Tensor::matrix(4, 1, vec![0.0; 4]).unwrap();
        assert!(make_windows(&series, 3, 2, 1, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn stage_one_k1_runs_one_round_each() {
        let config = tiny_config();
        let mut trainer = tiny_trainer(&config);
        let windows = tiny_windows(8, 1);
        trainer.stage_one(&windows).unwrap();
        assert_eq!(trainer.log.stage_one_fgd.len(), 1);
        assert_eq!(trainer.log.stage_one_sts.len(), 1);
        assert_eq!(trainer.log.schedule_snapshots.len(), 1);
        assert!(trainer.log.stage_one_fgd[0].is_finite());
        assert!(trainer.log.stage_one_sts[0].is_finite());
    }

    #[test]
    fn sts_epoch_freezes_denoiser_bits() {
        let config = tiny_config();
        let mut trainer = tiny_trainer(&config);
        let windows = tiny_windows(8, 2);
        let before = trainer.denoiser.clone();
        trainer.run_sts_epoch(&windows, "freeze-check").unwrap();
        assert_eq!(trainer.denoiser, before);
    }

    #[test]
    fn fgd_epoch_freezes_schedule_bits() {
        let config = tiny_config();
        let mut trainer = tiny_trainer(&config);
        let windows = tiny_windows(8, 3);
        let before_params: Vec<Tensor> = trainer.schedule.params().into_iter().cloned().collect();
        let realized = trainer.schedule.realize().unwrap();
        trainer.run_fgd_epoch(&windows, &realized, "freeze-check").unwrap();
        for (a, b) in trainer.schedule.params().into_iter().zip(&before_params) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stage_two_schedule_stationary_and_best_checkpoint() {
        let config = TrainConfig { epochs: 5, ..tiny_config() };
        let mut trainer = tiny_trainer(&config);
        let train = tiny_windows(8, 4);
        let val = tiny_windows(4, 5);
        let sched_before = trainer.schedule.realize().unwrap();
        trainer.stage_one(&train).unwrap();
        let sched_frozen = trainer.schedule.realize().unwrap();
        trainer.stage_two(&train, &val).unwrap();
        // schedule untouched by stage two
        assert_eq!(trainer.schedule.realize().unwrap(), sched_frozen);
        // stage one did move it
        assert_ne!(sched_before, sched_frozen);
        // restored checkpoint achieves the minimum logged validation loss
        let best = trainer.log.stage_two_val.iter().cloned().fold(f64::INFINITY, f64::min);
        let final_val = trainer
            .validation_loss(&val, &trainer.schedule.realize().unwrap())
            .unwrap();
        assert!((final_val - best).abs() < 1e-12, "{} vs {}", final_val, best);
    }

    #[test]
    fn validation_pass_never_updates_params() {
        let config = tiny_config();
        let mut trainer = tiny_trainer(&config);
        let windows = tiny_windows(6, 6);
        let realized = trainer.schedule.realize().unwrap();
        trainer.stage_one(&windows).unwrap();
        let before = trainer.denoiser.clone();
        trainer.validation_loss(&windows, &realized).unwrap();
        assert_eq!(trainer.denoiser, before);
    }

    #[test]
    fn full_run_is_deterministic() {
        let series = generate_synthetic("sin2", 200, 2, 9).unwrap();
        let config = TrainConfig {
            epochs: 2,
            alternation_epochs: 1,
            ..tiny_config()
        };
        let a = train_full(&series, &config).unwrap();
        let b = train_full(&series, &config).unwrap();
        assert_eq!(a.denoiser, b.denoiser);
        assert_eq!(a.schedule.realize().unwrap(), b.schedule.realize().unwrap());
        assert_eq!(a.log.stage_two_train, b.log.stage_two_train);
    }

    #[test]
    fn training_reduces_denoiser_loss() {
        let series = generate_synthetic("sin2", 300, 2, 10).unwrap();
        let config = TrainConfig {
            epochs: 4,
            alternation_epochs: 1,
            learning_rate: 3e-3,
            ..tiny_config()
        };
        let trainer = train_full(&series, &config).unwrap();
        let first = trainer.log.stage_one_fgd[0];
        let last = *trainer.log.stage_two_train.last().unwrap();
        assert!(last < first, "loss went {} -> {}", first, last);
    }
}
