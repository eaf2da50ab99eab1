//! Frequency-guided denoiser: instance normalization, the frequency anchor
//! branch with magnitude gating and multi-band complex reweighting, the
//! distortion-gated FiLM backbone, and the learnable fusion of the two.

use std::path::Path;

use crate::autodiff::{evaluate_with_gradients, sigmoid, Tape, Var};
use crate::dataio::SeriesWindow;
use crate::diffusion::{forward_sample, DenoiseModel};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::scheduler::{step_embedding, FrozenDenoiser, RealizedSchedule};
use crate::spectral::{num_bins, real_dft_var, inverse_real_dft_var};
use crate::tensor::Tensor;

pub const EPS_NORM: f64 = 1e-5;
pub const EPS_DISTORTION: f64 = 1e-6;
pub const DISTORTION_CLIP: f64 = 10.0;

// keeps |C| differentiable at exactly zero spectra
const MAGNITUDE_TINY: f64 = 1e-24;

/// Per-channel standardization statistics taken from the history window only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalize both history and target with the history's per-channel mean and
/// floored standard deviation.
pub fn instance_normalize(window: &SeriesWindow) -> Result<(SeriesWindow, NormStats)> {
    let l = window.history.rows();
    let d = window.history.cols();
    if l < 2 {
        return Err(Error::contract("instance normalization needs history length >= 2"));
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let mut m = 0.0;
        for r in 0..l {
            m += window.history.at(r, c);
        }
        m /= l as f64;
        let mut v = 0.0;
        for r in 0..l {
            let x = window.history.at(r, c) - m;
            v += x * x;
        }
        mean[c] = m;
        std[c] = (v / l as f64).sqrt().max(EPS_NORM);
    }
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                out.set(r, c, (t.at(r, c) - mean[c]) / std[c]);
            }
        }
        out
    };
    Ok((
        SeriesWindow {
            history: apply(&window.history),
            target: apply(&window.target),
            start: window.start,
        },
        NormStats { mean, std },
    ))
}

/// Exact inverse of [`instance_normalize`] on any tensor in normalized space.
pub fn denormalize(t: &Tensor, stats: &NormStats) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            out.set(r, c, t.at(r, c) * stats.std[c] + stats.mean[c]);
        }
    }
    out
}

/// Shape and width settings of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgdConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub bands: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
    pub embed_dim: usize,
}

impl FgdConfig {
    pub fn new(history_len: usize, horizon: usize, channels: usize) -> Self {
        FgdConfig {
            history_len,
            horizon,
            channels,
            bands: 2,
            hidden: 128,
            gate_hidden: 64,
            embed_dim: 64,
        }
    }

    pub fn freq_bins(&self) -> usize {
        num_bins(self.history_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len < 2 || self.horizon < 1 || self.channels < 1 {
            return Err(Error::contract("denoiser needs L >= 2, H >= 1, d >= 1"));
        }
        if self.bands < 1 || self.bands > self.freq_bins() {
            return Err(Error::contract(format!(
                "band count {} must lie in 1..={}",
                self.bands,
                self.freq_bins()
            )));
        }
        if self.hidden < 1 || self.gate_hidden < 1 || self.embed_dim < 2 {
            return Err(Error::contract("denoiser widths must be positive"));
        }
        Ok(())
    }
}

/// Contiguous near-equal band partition of the F frequency bins: bands of
/// size ceil(F/B) until the remainder runs out.
pub fn band_partition(freq_bins: usize, bands: usize) -> Result<Vec<usize>> {
    if bands == 0 || bands > freq_bins {
        return Err(Error::contract(format!(
            "cannot split {} bins into {} bands",
            freq_bins, bands
        )));
    }
    let chunk = freq_bins.div_ceil(bands);
    let mut sizes = Vec::with_capacity(bands);
    let mut left = freq_bins;
    for b in 0..bands {
        let remaining_bands = bands - b;
        let take = chunk.min(left - (remaining_bands - 1));
        sizes.push(take);
        left -= take;
    }
    debug_assert_eq!(sizes.iter().sum::<usize>(), freq_bins);
    Ok(sizes)
}

/// All trainable tensors of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct FgdParams {
    pub config: FgdConfig,
    pub gate_a: Tensor,
    pub gate_b: Tensor,
    pub band_re: Tensor,
    pub band_im: Tensor,
    pub anchor_head: Tensor,
    pub dist_w1: Tensor,
    pub dist_b1: Tensor,
    pub dist_w2: Tensor,
    pub dist_b2: Tensor,
    pub in_raw_w: Tensor,
    pub in_raw_b: Tensor,
    pub in_guided_w: Tensor,
    pub film1_scale_w: Tensor,
    pub film1_scale_b: Tensor,
    pub film1_shift_w: Tensor,
    pub film1_shift_b: Tensor,
    pub film2_scale_w: Tensor,
    pub film2_scale_b: Tensor,
    pub film2_shift_w: Tensor,
    pub film2_shift_b: Tensor,
    pub refine_w: Tensor,
    pub refine_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub omega_raw: Tensor,
}

impl FgdParams {
    /// Initialization keeps the closed-form behaviors exact: zero gate
    /// affine (g_f = 0.5 everywhere), unit band gains, neutral FiLM biases,
    /// and a balanced fusion (omega = 0.5).
    pub fn init(config: FgdConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.freq_bins();
        let (l, h, hid, gh, ds) =
            (config.history_len, config.horizon, config.hidden, config.gate_hidden, config.embed_dim);
        let b = config.bands;
        let mut rng = RandomSource::new(seed).fork(0xf9d);
        let mut small = |rows: usize, cols: usize| rng.uniform_tensor(&[rows, cols], -0.05, 0.05);
        Ok(FgdParams {
            config,
            gate_a: Tensor::zeros(&[f, 1]),
            gate_b: Tensor::zeros(&[f, 1]),
            band_re: Tensor::full(&[b, 1], 1.0),
            band_im: Tensor::zeros(&[b, 1]),
            anchor_head: small(h, l),
            dist_w1: small(gh, f),
            dist_b1: Tensor::zeros(&[gh, 1]),
            dist_w2: small(h, gh),
            dist_b2: Tensor::zeros(&[h, 1]),
            in_raw_w: small(hid, h),
            in_raw_b: Tensor::zeros(&[hid, 1]),
            in_guided_w: small(hid, h),
            film1_scale_w: small(hid, ds),
            film1_scale_b: Tensor::full(&[hid, 1], 1.0),
            film1_shift_w: small(hid, ds),
            film1_shift_b: Tensor::zeros(&[hid, 1]),
            film2_scale_w: small(hid, ds),
            film2_scale_b: Tensor::full(&[hid, 1], 1.0),
            film2_shift_w: small(hid, ds),
            film2_shift_b: Tensor::zeros(&[hid, 1]),
            refine_w: small(hid, hid),
            refine_b: Tensor::zeros(&[hid, 1]),
            head_w: small(h, hid),
            head_b: Tensor::zeros(&[h, 1]),
            omega_raw: Tensor::zeros(&[1, 1]),
        })
    }

    pub fn omega(&self) -> f64 {
        sigmoid(self.omega_raw.scalar_value())
    }

    pub fn param_names() -> &'static [&'static str] {
        &[
            "fgd.gate_a",
            "fgd.gate_b",
            "fgd.band_re",
            "fgd.band_im",
            "fgd.anchor_head",
            "fgd.dist_w1",
            "fgd.dist_b1",
            "fgd.dist_w2",
            "fgd.dist_b2",
            "fgd.in_raw_w",
            "fgd.in_raw_b",
            "fgd.in_guided_w",
            "fgd.film1_scale_w",
            "fgd.film1_scale_b",
            "fgd.film1_shift_w",
            "fgd.film1_shift_b",
            "fgd.film2_scale_w",
            "fgd.film2_scale_b",
            "fgd.film2_shift_w",
            "fgd.film2_shift_b",
            "fgd.refine_w",
            "fgd.refine_b",
            "fgd.head_w",
            "fgd.head_b",
            "fgd.omega_raw",
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.gate_a,
            &self.gate_b,
            &self.band_re,
            &self.band_im,
            &self.anchor_head,
            &self.dist_w1,
            &self.dist_b1,
            &self.dist_w2,
            &self.dist_b2,
            &self.in_raw_w,
            &self.in_raw_b,
            &self.in_guided_w,
            &self.film1_scale_w,
            &self.film1_scale_b,
            &self.film1_shift_w,
            &self.film1_shift_b,
            &self.film2_scale_w,
            &self.film2_scale_b,
            &self.film2_shift_w,
            &self.film2_shift_b,
            &self.refine_w,
            &self.refine_b,
            &self.head_w,
            &self.head_b,
            &self.omega_raw,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.gate_a,
            &mut self.gate_b,
            &mut self.band_re,
            &mut self.band_im,
            &mut self.anchor_head,
            &mut self.dist_w1,
            &mut self.dist_b1,
            &mut self.dist_w2,
            &mut self.dist_b2,
            &mut self.in_raw_w,
            &mut self.in_raw_b,
            &mut self.in_guided_w,
            &mut self.film1_scale_w,
            &mut self.film1_scale_b,
            &mut self.film1_shift_w,
            &mut self.film1_shift_b,
            &mut self.film2_scale_w,
            &mut self.film2_scale_b,
            &mut self.film2_shift_w,
            &mut self.film2_shift_b,
            &mut self.refine_w,
            &mut self.refine_b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.omega_raw,
        ]
    }

    /// Enter every parameter as a tape leaf, in `param_names` order.
    pub fn enter(&self, tape: &mut Tape) -> FgdVars {
        let vars: Vec<Var> = self.params().into_iter().map(|t| tape.leaf(t.clone())).collect();
        FgdVars { vars }
    }
}

/// Tape handles for all parameters, positionally aligned with `param_names`.
pub struct FgdVars {
    pub vars: Vec<Var>,
}

impl FgdVars {
    fn get(&self, name: &str) -> Var {
        let idx = FgdParams::param_names()
            .iter()
            .position(|n| *n == name)
            .expect("known parameter name");
        self.vars[idx]
    }
}

fn magnitude_var(tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
    let re2 = tape.square(re);
    let im2 = tape.square(im);
    let s = tape.add(re2, im2)?;
    let s = tape.add_scalar(s, MAGNITUDE_TINY);
    Ok(tape.sqrt(s))
}

/// Frequency anchor: gate the history spectrum by channel-averaged log
/// magnitude, reweight per band by a complex gain, invert, and project the
/// filtered history to the horizon with a bias-free head.
pub fn freq_anchor_var(
    tape: &mut Tape,
    params: &FgdVars,
    config: &FgdConfig,
    c0: Var,
) -> Result<Var> {
    let d = config.channels;
    let (re, im) = real_dft_var(tape, c0)?;
    let mag = magnitude_var(tape, re, im)?;
    let avg = tape.mean_cols(mag); // F x 1
    let one_plus = tape.add_scalar(avg, 1.0);
    let energy = tape.ln(one_plus)?;
    let a = params.get("fgd.gate_a");
    let b = params.get("fgd.gate_b");
    let pre = tape.mul(a, energy)?;
    let pre = tape.add(pre, b)?;
    let gate = tape.sigmoid(pre); // F x 1

    // per-band complex reweighting
    let h_re = params.get("fgd.band_re");
    let h_im = params.get("fgd.band_im");
    let sizes = band_partition(config.freq_bins(), config.bands)?;
    let mut re_parts = Vec::with_capacity(sizes.len());
    let mut im_parts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (bidx, &len) in sizes.iter().enumerate() {
        let re_b = tape.slice_rows(re, offset, len)?;
        let im_b = tape.slice_rows(im, offset, len)?;
        let hr = tape.row(h_re, bidx)?;
        let hi = tape.row(h_im, bidx)?;
        let rr = tape.scale_by(re_b, hr)?;
        let ii = tape.scale_by(im_b, hi)?;
        let ri = tape.scale_by(im_b, hr)?;
        let ir = tape.scale_by(re_b, hi)?;
        re_parts.push(tape.sub(rr, ii)?);
        im_parts.push(tape.add(ri, ir)?);
        offset += len;
    }
    let re_w = tape.concat_rows(&re_parts)?;
    let im_w = tape.concat_rows(&im_parts)?;
    let gate_wide = tape.repeat_cols(gate, d)?;
    let re_g = tape.mul(re_w, gate_wide)?;
    let im_g = tape.mul(im_w, gate_wide)?;
    let filtered = inverse_real_dft_var(tape, re_g, im_g, config.history_len)?;
    let head = params.get("fgd.anchor_head");
    tape.matmul(head, filtered)
}

/// Relative per-bin magnitude distortion of the corrupted history, clipped
/// to [-10, 10].
pub fn spectral_distortion_var(tape: &mut Tape, c0: Var, c_t: Var) -> Result<Var> {
    let (re0, im0) = real_dft_var(tape, c0)?;
    let (ret, imt) = real_dft_var(tape, c_t)?;
    let m0 = magnitude_var(tape, re0, im0)?;
    let mt = magnitude_var(tape, ret, imt)?;
    let num = tape.sub(mt, m0)?;
    let den = tape.add_scalar(m0, EPS_DISTORTION);
    let r = tape.div(num, den)?;
    Ok(tape.clamp(r, -DISTORTION_CLIP, DISTORTION_CLIP))
}

/// Plain-value distortion for inspection paths.
pub fn spectral_distortion(c0: &Tensor, c_t: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.leaf(c0.clone());
    let b = tape.leaf(c_t.clone());
    let r = spectral_distortion_var(&mut tape, a, b)?;
    Ok(tape.value(r).clone())
}

fn film_var(
    tape: &mut Tape,
    scale_w: Var,
    scale_b: Var,
    shift_w: Var,
    shift_b: Var,
    emb: Var,
    h: Var,
    channels: usize,
) -> Result<Var> {
    let scale = tape.affine(scale_w, emb, scale_b)?;
    let shift = tape.affine(shift_w, emb, shift_b)?;
    let scale_wide = tape.repeat_cols(scale, channels)?;
    let shift_wide = tape.repeat_cols(shift, channels)?;
    let scaled = tape.mul(scale_wide, h)?;
    let modulated = tape.add(scaled, shift_wide)?;
    Ok(tape.silu(modulated))
}

/// Distortion-gated diffusion branch with dual FiLM step conditioning.
pub fn denoise_var(
    tape: &mut Tape,
    params: &FgdVars,
    config: &FgdConfig,
    x_t: Var,
    t: usize,
    t_total: usize,
    c0: Var,
    c_t: Var,
) -> Result<Var> {
    if t < 1 || t > t_total {
        return Err(Error::contract(format!("denoise step t = {} outside 1..={}", t, t_total)));
    }
    let d = config.channels;
    let r = spectral_distortion_var(tape, c0, c_t)?; // F x d
    let w1 = params.get("fgd.dist_w1");
    let b1 = params.get("fgd.dist_b1");
    let w2 = params.get("fgd.dist_w2");
    let b2 = params.get("fgd.dist_b2");
    let hidden = tape.affine(w1, r, b1)?;
    let hidden = tape.silu(hidden);
    let gate_pre = tape.affine(w2, hidden, b2)?;
    let g = tape.sigmoid(gate_pre); // H x d
    let x_tilde = tape.mul(x_t, g)?;

    let raw_w = params.get("fgd.in_raw_w");
    let raw_b = params.get("fgd.in_raw_b");
    let guided_w = params.get("fgd.in_guided_w");
    let raw = tape.affine(raw_w, x_t, raw_b)?;
    let guided = tape.matmul(guided_w, x_tilde)?;
    let h0 = tape.add(raw, guided)?;

    let emb = tape.leaf(step_embedding(t, t_total, config.embed_dim));
    let h = film_var(
        tape,
        params.get("fgd.film1_scale_w"),
        params.get("fgd.film1_scale_b"),
        params.get("fgd.film1_shift_w"),
        params.get("fgd.film1_shift_b"),
        emb,
        h0,
        d,
    )?;
    let h = film_var(
        tape,
        params.get("fgd.film2_scale_w"),
        params.get("fgd.film2_scale_b"),
        params.get("fgd.film2_shift_w"),
        params.get("fgd.film2_shift_b"),
        emb,
        h,
        d,
    )?;
    let refined = tape.affine(params.get("fgd.refine_w"), h, params.get("fgd.refine_b"))?;
    tape.affine(params.get("fgd.head_w"), refined, params.get("fgd.head_b"))
}

/// omega * x_freq + (1 - omega) * x_diff with omega = sigmoid(omega_raw).
pub fn fuse_var(tape: &mut Tape, params: &FgdVars, x_freq: Var, x_diff: Var) -> Result<Var> {
    let omega_raw = params.get("fgd.omega_raw");
    let omega = tape.sigmoid(omega_raw);
    let neg = tape.neg(omega);
    let complement = tape.add_scalar(neg, 1.0);
    let a = tape.scale_by(x_freq, omega)?;
    let b = tape.scale_by(x_diff, complement)?;
    tape.add(a, b)
}

/// Full fused prediction on an existing tape.
pub fn predict_x0_var(
    tape: &mut Tape,
    params: &FgdVars,
    config: &FgdConfig,
    x_t: Var,
    t: usize,
    t_total: usize,
    c0: Var,
    c_t: Var,
) -> Result<Var> {
    let x_freq = freq_anchor_var(tape, params, config, c0)?;
    let x_diff = denoise_var(tape, params, config, x_t, t, t_total, c0, c_t)?;
    fuse_var(tape, params, x_freq, x_diff)
}

/// Mean per-coordinate squared error of a clean estimate, the quantity the
/// denoiser loss averages over the batch.
pub fn prediction_loss(x0: &Tensor, x0_hat: &Tensor) -> Result<f64> {
    let diff = x0.sub(x0_hat)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Denoiser training loss: for each window draw t uniformly, corrupt target
/// and history with independent noise, and average the per-coordinate
/// squared error of the fused prediction. Gradients cover every parameter.
pub fn denoiser_loss(
    params: &FgdParams,
    batch: &[SeriesWindow],
    schedule: &RealizedSchedule,
    rng: &mut RandomSource,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("denoiser loss needs a nonempty batch"));
    }
    let t_total = schedule.t_steps();
    let mut tape = Tape::new();
    let vars = params.enter(&mut tape);
    let mut terms = Vec::with_capacity(batch.len());
    for w in batch {
        let t = 1 + rng.next_below(t_total);
        let ab = schedule.alpha_bar_t(t);
        let x_t_val = forward_sample(&w.target, ab, &rng.normal_tensor(w.target.shape()))?;
        let c_t_val = forward_sample(&w.history, ab, &rng.normal_tensor(w.history.shape()))?;
        let x0 = tape.leaf(w.target.clone());
        let c0 = tape.leaf(w.history.clone());
        let x_t = tape.leaf(x_t_val);
        let c_t = tape.leaf(c_t_val);
        let x_hat = predict_x0_var(&mut tape, &vars, &params.config, x_t, t, t_total, c0, c_t)?;
        let diff = tape.sub(x0, x_hat)?;
        terms.push(tape.mean_sq(diff));
    }
    let stacked = tape.concat_rows(&terms)?;
    let loss = tape.mean_all(stacked);
    evaluate_with_gradients(&tape, loss, &vars.vars)
}

/// Plain forward pass on a throwaway tape.
pub fn predict_x0(
    params: &FgdParams,
    x_t: &Tensor,
    t: usize,
    t_total: usize,
    c0: &Tensor,
    c_t: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.enter(&mut tape);
    let x_t = tape.leaf(x_t.clone());
    let c0 = tape.leaf(c0.clone());
    let c_t = tape.leaf(c_t.clone());
    let out = predict_x0_var(&mut tape, &vars, &params.config, x_t, t, t_total, c0, c_t)?;
    Ok(tape.value(out).clone())
}

impl DenoiseModel for FgdParams {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        t: usize,
        schedule: &RealizedSchedule,
        history: &Tensor,
        rng: &mut RandomSource,
    ) -> Result<Tensor> {
        let ab = schedule.alpha_bar_t(t);
        let c_t = forward_sample(history, ab, &rng.normal_tensor(history.shape()))?;
        predict_x0(self, x_t, t, schedule.t_steps(), history, &c_t)
    }
}

impl FrozenDenoiser for FgdParams {
    fn predict_x0_var(
        &self,
        tape: &mut Tape,
        x_t: Var,
        t: usize,
        t_total: usize,
        c0: Var,
        c_t: Var,
    ) -> Result<Var> {
        // parameters enter as fresh leaves: their adjoints are simply unread,
        // so no update can flow into the denoiser from the schedule loss
        let vars = self.enter(tape);
        predict_x0_var(tape, &vars, &self.config, x_t, t, t_total, c0, c_t)
    }
}

// ---- checkpoint io ----

const CHECKPOINT_HEADER: &str = "fgd-checkpoint v1";

/// Text checkpoint: a manifest of name/shape/field-offset lines followed by
/// all values in declaration order at full precision.
pub fn save_checkpoint(params: &FgdParams, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    let c = &params.config;
    out.push_str(&format!(
        "config {} {} {} {} {} {} {}\n",
        c.history_len, c.horizon, c.channels, c.bands, c.hidden, c.gate_hidden, c.embed_dim
    ));
    let mut offset = 0usize;
    for (name, tensor) in FgdParams::param_names().iter().zip(params.params()) {
        out.push_str(&format!("param {} {} {} {}\n", name, tensor.rows(), tensor.cols(), offset));
        offset += tensor.len();
    }
    out.push_str("data\n");
    for tensor in params.params() {
        for v in tensor.data() {
            out.push_str(&format!("{:.16e}\n", v));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<FgdParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != CHECKPOINT_HEADER {
        return Err(Error::Parse {
            location: format!("{}:1", path.display()),
            detail: format!("unexpected header '{}'", header),
        });
    }
    let parse_err = |line: usize, detail: String| Error::Parse {
        location: format!("{}:{}", path.display(), line + 1),
        detail,
    };
    let (cfg_line_no, cfg_line) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing config line".into()))?;
    let cfg_fields: Vec<&str> = cfg_line.split_whitespace().collect();
    if cfg_fields.len() != 8 || cfg_fields[0] != "config" {
        return Err(parse_err(cfg_line_no, "malformed config line".into()));
    }
    let num = |s: &str, line: usize| -> Result<usize> {
        s.parse().map_err(|_| parse_err(line, format!("bad integer '{}'", s)))
    };
    let config = FgdConfig {
        history_len: num(cfg_fields[1], cfg_line_no)?,
        horizon: num(cfg_fields[2], cfg_line_no)?,
        channels: num(cfg_fields[3], cfg_line_no)?,
        bands: num(cfg_fields[4], cfg_line_no)?,
        hidden: num(cfg_fields[5], cfg_line_no)?,
        gate_hidden: num(cfg_fields[6], cfg_line_no)?,
        embed_dim: num(cfg_fields[7], cfg_line_no)?,
    };
    let mut manifest: Vec<(String, usize, usize, usize)> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut in_data = false;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if !in_data {
            if line == "data" {
                in_data = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 || fields[0] != "param" {
                return Err(parse_err(line_no, "malformed manifest line".into()));
            }
            manifest.push((
                fields[1].to_string(),
                num(fields[2], line_no)?,
                num(fields[3], line_no)?,
                num(fields[4], line_no)?,
            ));
        } else {
            values.push(
                line.trim()
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad value '{}'", line)))?,
            );
        }
    }
    if manifest.len() != FgdParams::param_names().len() {
        return Err(Error::Parse {
            location: path.display().to_string(),
            detail: format!(
                "manifest lists {} parameters, expected {}",
                manifest.len(),
                FgdParams::param_names().len()
            ),
        });
    }
    let mut params = FgdParams::init(config, 0)?;
    for ((name, rows, cols, offset), (expect_name, slot)) in manifest
        .into_iter()
        .zip(FgdParams::param_names().iter().zip(params.params_mut()))
    {
        if name != *expect_name {
            return Err(Error::Parse {
                location: path.display().to_string(),
                detail: format!("parameter '{}' out of order, expected '{}'", name, expect_name),
            });
        }
        let len = rows * cols;
        if offset + len > values.len() {
            return Err(Error::Parse {
                location: path.display().to_string(),
                detail: format!("data section too short for '{}'", name),
            });
        }
        *slot = Tensor::matrix(rows, cols, values[offset..offset + len].to_vec())?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::real_dft;

    fn small_config() -> FgdConfig {
        FgdConfig { hidden: 16, gate_hidden: 8, embed_dim: 8, ..FgdConfig::new(8, 4, 2) }
    }

    fn random_window(rng: &mut RandomSource, l: usize, h: usize, d: usize) -> SeriesWindow {
        SeriesWindow {
            history: rng.normal_tensor(&[l, d]),
            target: rng.normal_tensor(&[h, d]),
            start: 0,
        }
    }

    #[test]
    fn normalize_centers_and_scales() {
        let mut hist = Tensor::zeros(&[6, 2]);
        for r in 0..6 {
            hist.set(r, 0, 5.0 + 2.0 * [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0][r]);
            hist.set(r, 1, -3.0 + 0.5 * [1.0, -1.0, 1.0, -1.0, 1.0, -1.0][r]);
        }
        let w = SeriesWindow { history: hist, target: Tensor::zeros(&[2, 2]), start: 0 };
        let (norm, stats) = instance_normalize(&w).unwrap();
        assert!((stats.mean[0] - 5.0).abs() < 1e-12);
        assert!((stats.std[0] - 2.0).abs() < 1e-12);
        for c in 0..2 {
            let col: Vec<f64> = (0..6).map(|r| norm.history.at(r, c)).collect();
            let m: f64 = col.iter().sum::<f64>() / 6.0;
            let v: f64 = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
            assert!((v.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_channel_zeroed() {
        let w = SeriesWindow {
            history: Tensor::full(&[5, 1], 3.7),
            target: Tensor::full(&[2, 1], 3.7),
            start: 0,
        };
        let (norm, stats) = instance_normalize(&w).unwrap();
        assert_eq!(stats.std[0], EPS_NORM);
        assert!(norm.history.max_abs() < 1e-12);
    }

    #[test]
    fn normalize_roundtrip() {
        let mut rng = RandomSource::new(8);
        for _ in 0..20 {
            let w = random_window(&mut rng, 12, 5, 3);
            let scaled = SeriesWindow {
                history: w.history.scale(4.0).map(|x| x + 2.5),
                target: w.target.scale(4.0).map(|x| x + 2.5),
                start: 0,
            };
            let (norm, stats) = instance_normalize(&scaled).unwrap();
            let back_h = denormalize(&norm.history, &stats);
            let back_t = denormalize(&norm.target, &stats);
            assert!(back_h.sub(&scaled.history).unwrap().max_abs() < 1e-12);
            assert!(back_t.sub(&scaled.target).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_ignores_target_values() {
        let mut rng = RandomSource::new(9);
        let w = random_window(&mut rng, 10, 4, 2);
        let (_, stats_a) = instance_normalize(&w).unwrap();
        let perturbed = SeriesWindow {
            history: w.history.clone(),
            target: w.target.scale(100.0),
            start: 0,
        };
        let (_, stats_b) = instance_normalize(&perturbed).unwrap();
        assert_eq!(stats_a, stats_b);
    }

    #[test]
    fn band_partition_shapes() {
        assert_eq!(band_partition(13, 2).unwrap(), vec![7, 6]);
        assert_eq!(band_partition(5, 1).unwrap(), vec![5]);
        assert_eq!(band_partition(5, 5).unwrap(), vec![1, 1, 1, 1, 1]);
        assert_eq!(band_partition(9, 4).unwrap(), vec![3, 3, 2, 1]);
        assert!(band_partition(3, 4).is_err());
    }

    #[test]
    fn anchor_halves_history_at_init_with_identity_head() {
        // a = 0, b = 0 -> every gate is sigmoid(0) = 0.5; unit band gains and
        // an identity head (L = H) reduce the anchor to 0.5 * c0
        let config = FgdConfig { horizon: 8, ..small_config() };
        let mut params = FgdParams::init(config, 1).unwrap();
        let mut eye = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            eye.set(i, i, 1.0);
        }
        params.anchor_head = eye;
        let mut rng = RandomSource::new(2);
        let c0t = rng.normal_tensor(&[8, 2]);
        let mut tape = Tape::new();
        let vars = params.enter(&mut tape);
        let c0 = tape.leaf(c0t.clone());
        let out = freq_anchor_var(&mut tape, &vars, &config, c0).unwrap();
        let expect = c0t.scale(0.5);
        assert!(tape.value(out).sub(&expect).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn anchor_zero_history_zero_output() {
        let config = small_config();
        let params = FgdParams::init(config, 3).unwrap();
        let mut tape = Tape::new();
        let vars = params.enter(&mut tape);
        let c0 = tape.leaf(Tensor::zeros(&[8, 2]));
        let out = freq_anchor_var(&mut tape, &vars, &config, c0).unwrap();
        // MAGNITUDE_TINY leaks a sqrt(1e-24) magnitude into the gate input
        // only, never into the reweighted spectrum itself
        assert!(tape.value(out).max_abs() < 1e-12);
    }

    #[test]
    fn band_partition_invariance_with_shared_gains() {
        let mut rng = RandomSource::new(4);
        let c0t = rng.normal_tensor(&[8, 2]);
        let gain = (1.3, -0.4);
        let mut outputs = Vec::new();
        for bands in [1usize, 2, 3, 5] {
            let config = FgdConfig { bands, ..small_config() };
            let mut params = FgdParams::init(config, 7).unwrap();
            params.band_re = Tensor::full(&[bands, 1], gain.0);
            params.band_im = Tensor::full(&[bands, 1], gain.1);
            let mut tape = Tape::new();
            let vars = params.enter(&mut tape);
            let c0 = tape.leaf(c0t.clone());
            let out = freq_anchor_var(&mut tape, &vars, &config, c0).unwrap();
            outputs.push(tape.value(out).clone());
        }
        for other in &outputs[1..] {
            assert!(outputs[0].sub(other).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn distortion_zero_double_and_clip() {
        let mut rng = RandomSource::new(5);
        let c0 = rng.normal_tensor(&[16, 2]);
        let same = spectral_distortion(&c0, &c0).unwrap();
        assert_eq!(same.max_abs(), 0.0);

        let doubled = spectral_distortion(&c0, &c0.scale(2.0)).unwrap();
        let spec = real_dft(&c0).unwrap();
        for r in 0..doubled.rows() {
            for c in 0..doubled.cols() {
                let m = (spec.re.at(r, c).powi(2) + spec.im.at(r, c).powi(2)).sqrt();
                if m > 1e-3 {
                    assert!((doubled.at(r, c) - 1.0).abs() < 1e-2, "bin {} ch {}", r, c);
                }
            }
        }

        let amplified = spectral_distortion(&c0, &c0.scale(1e4)).unwrap();
        let max = amplified.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, DISTORTION_CLIP);
    }

    #[test]
    fn gate_saturation_disables_guided_path() {
        let config = small_config();
        let mut rng = RandomSource::new(6);
        let w = random_window(&mut rng, 8, 4, 2);
        let x_t = rng.normal_tensor(&[4, 2]);
        let c_t = rng.normal_tensor(&[8, 2]);

        let mut saturated = FgdParams::init(config, 11).unwrap();
        saturated.dist_b2 = Tensor::full(&[4, 1], -60.0);
        let mut no_guide = saturated.clone();
        no_guide.in_guided_w = Tensor::zeros(no_guide.in_guided_w.shape());

        let run = |p: &FgdParams| {
            let mut tape = Tape::new();
            let vars = p.enter(&mut tape);
            let x = tape.leaf(x_t.clone());
            let h = tape.leaf(w.history.clone());
            let ct = tape.leaf(c_t.clone());
            let out = denoise_var(&mut tape, &vars, &config, x, 2, 4, h, ct).unwrap();
            tape.value(out).clone()
        };
        assert!(run(&saturated).sub(&run(&no_guide)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn neutral_modulation_reduces_to_plain_mlp() {
        // FiLM weights zeroed (scale 1, shift 0) and identity refinement:
        // output must equal head(silu(silu(h0))) recomputed with plain
        // tensor arithmetic
        let config = small_config();
        let mut rng = RandomSource::new(12);
        let w = random_window(&mut rng, 8, 4, 2);
        let x_t = rng.normal_tensor(&[4, 2]);
        let c_t = rng.normal_tensor(&[8, 2]);
        let mut params = FgdParams::init(config, 13).unwrap();
        for t in [
            &mut params.film1_scale_w,
            &mut params.film1_shift_w,
            &mut params.film2_scale_w,
            &mut params.film2_shift_w,
        ] {
            *t = Tensor::zeros(t.shape());
        }
        let mut eye = Tensor::zeros(&[config.hidden, config.hidden]);
        for i in 0..config.hidden {
            eye.set(i, i, 1.0);
        }
        params.refine_w = eye;
        params.refine_b = Tensor::zeros(&[config.hidden, 1]);

        let mut tape = Tape::new();
        let vars = params.enter(&mut tape);
        let x = tape.leaf(x_t.clone());
        let h = tape.leaf(w.history.clone());
        let ct = tape.leaf(c_t.clone());
        let out = denoise_var(&mut tape, &vars, &config, x, 1, 3, h, ct).unwrap();

        // independent recomputation
        let r = spectral_distortion(&w.history, &c_t).unwrap();
        let silu_t = |t: &Tensor| t.map(|x| x * sigmoid(x));
        let bias_add = |t: &Tensor, b: &Tensor| {
            let mut out = t.clone();
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    out.set(i, j, t.at(i, j) + b.at(i, 0));
                }
            }
            out
        };
        let h1 = silu_t(&bias_add(&params.dist_w1.matmul(&r).unwrap(), &params.dist_b1));
        let g = bias_add(&params.dist_w2.matmul(&h1).unwrap(), &params.dist_b2).map(sigmoid);
        let x_tilde = x_t.mul(&g).unwrap();
        let h0 = bias_add(&params.in_raw_w.matmul(&x_t).unwrap(), &params.in_raw_b)
            .add(&params.in_guided_w.matmul(&x_tilde).unwrap())
            .unwrap();
        let expect = bias_add(
            &params.head_w.matmul(&silu_t(&silu_t(&h0))).unwrap(),
            &params.head_b,
        );
        assert!(tape.value(out).sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fuse_endpoints_midpoint_and_affinity() {
        let config = small_config();
        let mut rng = RandomSource::new(14);
        let xf = rng.normal_tensor(&[4, 2]);
        let xd = rng.normal_tensor(&[4, 2]);
        let u = rng.normal_tensor(&[4, 2]);
        let run = |omega_raw: f64, a: &Tensor, b: &Tensor| {
            let mut params = FgdParams::init(config, 15).unwrap();
            params.omega_raw = Tensor::scalar(omega_raw);
            let mut tape = Tape::new();
            let vars = params.enter(&mut tape);
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let out = fuse_var(&mut tape, &vars, av, bv).unwrap();
            tape.value(out).clone()
        };
        assert!(run(50.0, &xf, &xd).sub(&xf).unwrap().max_abs() < 1e-12);
        assert!(run(-50.0, &xf, &xd).sub(&xd).unwrap().max_abs() < 1e-12);
        let mid = run(0.0, &xf, &xd);
        let expect = xf.add(&xd).unwrap().scale(0.5);
        assert!(mid.sub(&expect).unwrap().max_abs() < 1e-12);
        // affine: fuse(x+u, y+u) = fuse(x, y) + u
        let shifted = run(0.73, &xf.add(&u).unwrap(), &xd.add(&u).unwrap());
        let base = run(0.73, &xf, &xd).add(&u).unwrap();
        assert!(shifted.sub(&base).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gates_stay_in_unit_interval() {
        let config = small_config();
        let mut rng = RandomSource::new(16);
        for trial in 0..10u64 {
            let mut params = FgdParams::init(config, trial).unwrap();
            params.gate_a = rng.uniform_tensor(params.gate_a.shape(), -3.0, 3.0);
            params.gate_b = rng.uniform_tensor(params.gate_b.shape(), -3.0, 3.0);
            let c0t = rng.normal_tensor(&[8, 2]);
            let mut tape = Tape::new();
            let vars = params.enter(&mut tape);
            let c0 = tape.leaf(c0t);
            // rebuild the gate exactly as freq_anchor does
            let (re, im) = real_dft_var(&mut tape, c0).unwrap();
            let mag = magnitude_var(&mut tape, re, im).unwrap();
            let avg = tape.mean_cols(mag);
            let one_plus = tape.add_scalar(avg, 1.0);
            let energy = tape.ln(one_plus).unwrap();
            let a = vars.get("fgd.gate_a");
            let b = vars.get("fgd.gate_b");
            let pre = tape.mul(a, energy).unwrap();
            let pre = tape.add(pre, b).unwrap();
            let gate = tape.sigmoid(pre);
            for &g in tape.value(gate).data() {
                assert!(0.0 < g && g < 1.0);
            }
            assert!(0.0 < params.omega() && params.omega() < 1.0);
        }
    }

    #[test]
    fn prediction_loss_examples() {
        let mut rng = RandomSource::new(17);
        let x0 = rng.normal_tensor(&[4, 2]);
        assert_eq!(prediction_loss(&x0, &x0).unwrap(), 0.0);
        let shifted = x0.map(|v| v + 0.3);
        assert!((prediction_loss(&x0, &shifted).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn denoiser_loss_gradients_match_finite_differences() {
        let config = small_config();
        let params = FgdParams::init(config, 21).unwrap();
        let schedule = RealizedSchedule::from_beta(&[0.05, 0.1, 0.2, 0.35]).unwrap();
        let mut data_rng = RandomSource::new(22);
        let batch: Vec<SeriesWindow> =
            (0..2).map(|_| random_window(&mut data_rng, 8, 4, 2)).collect();

        let eval = |p: &FgdParams| {
            let mut rng = RandomSource::new(33);
            denoiser_loss(p, &batch, &schedule, &mut rng).unwrap().0
        };
        let (_, grads) = {
            let mut rng = RandomSource::new(33);
            denoiser_loss(&params, &batch, &schedule, &mut rng).unwrap()
        };

        let mut probe_rng = RandomSource::new(44);
        let h = 1e-5;
        let names = FgdParams::param_names();
        let mut checked = 0;
        while checked < 64 {
            let group = probe_rng.next_below(names.len());
            let len = params.params()[group].len();
            let coord = probe_rng.next_below(len);
            let mut plus = params.clone();
            plus.params_mut()[group].data_mut()[coord] += h;
            let mut minus = params.clone();
            minus.params_mut()[group].data_mut()[coord] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads[group].data()[coord];
            // the 1e-6 floor absorbs central-difference roundoff noise
            // (~1e-11 absolute) on near-zero coordinates
            let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-6);
            assert!(
                rel <= 1e-4,
                "{} coord {}: analytic {} vs fd {}",
                names[group],
                coord,
                an,
                fd
            );
            checked += 1;
        }
    }

    #[test]
    fn frozen_denoiser_leaves_params_untouched() {
        let config = small_config();
        let params = FgdParams::init(config, 51).unwrap();
        let before = params.clone();
        let mut rng = RandomSource::new(52);
        let w = random_window(&mut rng, 8, 4, 2);
        let mut tape = Tape::new();
        let x_t = tape.leaf(rng.normal_tensor(&[4, 2]));
        let c0 = tape.leaf(w.history.clone());
        let c_t = tape.leaf(rng.normal_tensor(&[8, 2]));
        let out = FrozenDenoiser::predict_x0_var(&params, &mut tape, x_t, 2, 4, c0, c_t).unwrap();
        let root = tape.mean_sq(out);
        tape.backward(root).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn denoise_rejects_out_of_range_step() {
        let config = small_config();
        let params = FgdParams::init(config, 61).unwrap();
        let mut rng = RandomSource::new(62);
        let mut tape = Tape::new();
        let vars = params.enter(&mut tape);
        let x = tape.leaf(rng.normal_tensor(&[4, 2]));
        let h = tape.leaf(rng.normal_tensor(&[8, 2]));
        let ct = tape.leaf(rng.normal_tensor(&[8, 2]));
        assert!(denoise_var(&mut tape, &vars, &config, x, 0, 4, h, ct).is_err());
        assert!(denoise_var(&mut tape, &vars, &config, x, 5, 4, h, ct).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let config = small_config();
        let mut params = FgdParams::init(config, 71).unwrap();
        let mut rng = RandomSource::new(72);
        for t in params.params_mut() {
            *t = rng.uniform_tensor(t.shape(), -1.0, 1.0);
        }
        let dir = std::env::temp_dir().join("fgd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.txt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_rejects_corrupt_header() {
        let dir = std::env::temp_dir().join("fgd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.txt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
