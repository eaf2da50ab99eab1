//! Sample-based CRPS, point metrics, and error-distribution exports.

use crate::diffusion::ForecastDistribution;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 64;

/// Energy-form CRPS estimator for one scalar observation:
/// mean_i |X_i - x| - (1 / (2 S^2)) sum_{i,j} |X_i - X_j|.
pub fn crps_from_samples(samples: &[f64], observation: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("crps needs at least one sample"));
    }
    let s = samples.len() as f64;
    let term1: f64 = samples.iter().map(|x| (x - observation).abs()).sum::<f64>() / s;
    let mut pair = 0.0;
    for a in samples {
        for b in samples {
            pair += (a - b).abs();
        }
    }
    Ok(term1 - pair / (2.0 * s * s))
}

/// MAE and MSE of a point prediction, averaged over all (step, channel)
/// coordinates.
pub fn mae_mse(prediction: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    let diff = prediction.sub(truth)?;
    let n = diff.len() as f64;
    let mae = diff.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    let mse = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((mae, mse))
}

/// Copy-last-value baseline: every horizon step repeats the final history
/// row.
pub fn persistence_forecast(history: &Tensor, horizon: usize) -> Tensor {
    let d = history.cols();
    let last = history.rows() - 1;
    let mut out = Tensor::zeros(&[horizon, d]);
    for r in 0..horizon {
        for c in 0..d {
            out.set(r, c, history.at(last, c));
        }
    }
    out
}

/// Metrics of one forecast distribution against one truth window, all in the
/// same (original) scale. CRPS is computed per (step, channel) and averaged.
pub fn evaluate_instance(dist: &ForecastDistribution, truth: &Tensor) -> Result<(f64, f64, f64)> {
    if truth.rows() != dist.horizon || truth.cols() != dist.channels {
        return Err(Error::ShapeMismatch {
            op: "evaluate_instance",
            detail: format!(
                "truth {:?} vs forecast {} x {}",
                truth.shape(),
                dist.horizon,
                dist.channels
            ),
        });
    }
    let mut crps_sum = 0.0;
    for r in 0..dist.horizon {
        for c in 0..dist.channels {
            crps_sum += crps_from_samples(&dist.point_samples(r, c), truth.at(r, c))?;
        }
    }
    let crps = crps_sum / (dist.horizon * dist.channels) as f64;
    let (mae, mse) = mae_mse(&dist.mean(), truth)?;
    Ok((crps, mae, mse))
}

/// Aggregated metrics over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub crps: f64,
    pub mae: f64,
    pub mse: f64,
    pub per_instance_mse: Vec<f64>,
    pub sample_count: usize,
    pub instance_count: usize,
}

impl MetricReport {
    pub fn aggregate(per_instance: &[(f64, f64, f64)], sample_count: usize) -> Result<Self> {
        if per_instance.is_empty() {
            return Err(Error::contract("metric report needs at least one instance"));
        }
        let n = per_instance.len() as f64;
        Ok(MetricReport {
            crps: per_instance.iter().map(|m| m.0).sum::<f64>() / n,
            mae: per_instance.iter().map(|m| m.1).sum::<f64>() / n,
            mse: per_instance.iter().map(|m| m.2).sum::<f64>() / n,
            per_instance_mse: per_instance.iter().map(|m| m.2).collect(),
            sample_count,
            instance_count: per_instance.len(),
        })
    }

    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str("metric-report v1\n");
        out.push_str(&format!("instances {}\n", self.instance_count));
        out.push_str(&format!("samples {}\n", self.sample_count));
        out.push_str(&format!("crps {:.16e}\n", self.crps));
        out.push_str(&format!("mae {:.16e}\n", self.mae));
        out.push_str(&format!("mse {:.16e}\n", self.mse));
        for (i, v) in self.per_instance_mse.iter().enumerate() {
            out.push_str(&format!("instance_mse {} {:.16e}\n", i, v));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut crps = None;
        let mut mae = None;
        let mut mse = None;
        let mut samples = None;
        let mut instances = None;
        let mut per_instance = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line_no == 0 {
                if line != "metric-report v1" {
                    return Err(Error::Parse {
                        location: "line 1".into(),
                        detail: format!("unexpected header '{}'", line),
                    });
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse {
                location: format!("line {}", line_no + 1),
                detail: format!("malformed line '{}'", line),
            };
            match fields.as_slice() {
                ["instances", v] => instances = Some(v.parse().map_err(|_| bad())?),
                ["samples", v] => samples = Some(v.parse().map_err(|_| bad())?),
                ["crps", v] => crps = Some(v.parse().map_err(|_| bad())?),
                ["mae", v] => mae = Some(v.parse().map_err(|_| bad())?),
                ["mse", v] => mse = Some(v.parse().map_err(|_| bad())?),
                ["instance_mse", _, v] => per_instance.push(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Ok(MetricReport {
            crps: crps.ok_or_else(|| Error::contract("report missing crps"))?,
            mae: mae.ok_or_else(|| Error::contract("report missing mae"))?,
            mse: mse.ok_or_else(|| Error::contract("report missing mse"))?,
            per_instance_mse: per_instance,
            sample_count: samples.ok_or_else(|| Error::contract("report missing samples"))?,
            instance_count: instances.ok_or_else(|| Error::contract("report missing instances"))?,
        })
    }
}

/// Fixed-bin histogram spanning the observed range; a zero-width range is
/// widened to one unit so every value lands in a bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<(f64, f64, usize)>> {
    if values.is_empty() {
        return Err(Error::contract("histogram needs at least one value"));
    }
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect())
}

/// Histogram export: `bin_left,bin_right,count`, one bin per line.
pub fn histogram_export(values: &[f64]) -> Result<String> {
    let bins = histogram(values, HISTOGRAM_BINS)?;
    let mut out = String::from("bin_left,bin_right,count\n");
    for (left, right, count) in bins {
        out.push_str(&format!("{:.16e},{:.16e},{}\n", left, right, count));
    }
    Ok(out)
}
