//! Band-pass filtering, resampling and amplitude rescaling.

mod filter;
mod resample;

pub use filter::{Biquad, Sos};
pub use resample::{Resampler, KAISER_BETA, TAPS_PER_PHASE};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_trial, DatasetManifest, DatasetWriter, EegTrial, Task};
use crate::error::{Error, Result};

/// Butterworth prototype order; the band-pass cascade has this many biquads.
pub const FILTER_ORDER: usize = 4;
/// Odd-reflection padding used by the zero-phase filter.
pub const PAD_LEN: usize = 3 * (FILTER_ORDER + 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub target_rate_hz: f64,
    /// Overrides the manifest's `unit_scale` when set.
    #[serde(default)]
    pub unit_scale: Option<f64>,
}

impl PreprocessConfig {
    /// 4-30 Hz for motor imagery, 1-30 Hz for ERP, both at 256 Hz.
    pub fn for_task(task: Task) -> Self {
        let lo = match task {
            Task::Mi => 4.0,
            Task::Erp => 1.0,
        };
        PreprocessConfig {
            band_lo_hz: lo,
            band_hi_hz: 30.0,
            target_rate_hz: 256.0,
            unit_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_lo_hz
            && self.band_lo_hz < self.band_hi_hz
            && self.band_hi_hz < self.target_rate_hz / 2.0)
        {
            return Err(Error::config(
                "preprocess.band",
                format!(
                    "need 0 < lo < hi < rate/2, got {}:{} at {} Hz",
                    self.band_lo_hz, self.band_hi_hz, self.target_rate_hz
                ),
            ));
        }
        if let Some(s) = self.unit_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("preprocess.unit_scale", "must be positive"));
            }
        }
        Ok(())
    }
}

fn map_rows(
    trial: &EegTrial,
    n_out: usize,
    rate: f64,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<EegTrial> {
    let mut data = Vec::with_capacity(trial.n_channels() * n_out);
    let mut buf = Vec::with_capacity(trial.n_samples);
    for ch in 0..trial.n_channels() {
        buf.clear();
        buf.extend(trial.row(ch).iter().map(|&v| v as f64));
        let y = f(&buf)?;
        debug_assert_eq!(y.len(), n_out);
        data.extend(y.into_iter().map(|v| v as f32));
    }
    Ok(trial.with_data(data, n_out, rate))
}

/// Zero-phase Butterworth band-pass of every channel.
pub fn bandpass(trial: &EegTrial, cfg: &PreprocessConfig) -> Result<EegTrial> {
    if trial.rate_hz <= 2.0 * cfg.band_hi_hz {
        return Err(Error::arg(format!(
            "band edge {} Hz is above Nyquist of a {} Hz trial",
            cfg.band_hi_hz, trial.rate_hz
        )));
    }
    let sos = Sos::butterworth_bandpass(FILTER_ORDER, cfg.band_lo_hz, cfg.band_hi_hz, trial.rate_hz)?;
    map_rows(trial, trial.n_samples, trial.rate_hz, |x| sos.filtfilt(x, PAD_LEN))
}

/// Resamples every channel to `target_rate_hz`.
pub fn resample(trial: &EegTrial, target_rate_hz: f64) -> Result<EegTrial> {
    let r = Resampler::new(trial.rate_hz, target_rate_hz)?;
    if r.is_identity() {
        return Ok(trial.with_data(trial.data.clone(), trial.n_samples, target_rate_hz));
    }
    let n_out = r.output_len(trial.n_samples);
    if n_out == 0 {
        return Err(Error::arg("resampling leaves no samples"));
    }
    map_rows(trial, n_out, target_rate_hz, |x| Ok(r.apply(x)))
}

pub fn rescale(trial: &EegTrial, unit_scale: f64) -> Result<EegTrial> {
    if !(unit_scale > 0.0 && unit_scale.is_finite()) {
        return Err(Error::arg(format!("unit scale must be positive, got {unit_scale}")));
    }
    let data = trial.data.iter().map(|&v| (v as f64 * unit_scale) as f32).collect();
    Ok(trial.with_data(data, trial.n_samples, trial.rate_hz))
}

/// Band-pass, resample and rescale one trial.
pub fn preprocess_trial(trial: &EegTrial, cfg: &PreprocessConfig, unit_scale: f64) -> Result<EegTrial> {
    let t = bandpass(trial, cfg)?;
    let t = resample(&t, cfg.target_rate_hz)?;
    rescale(&t, unit_scale)
}

/// Runs [`preprocess_trial`] over a whole dataset and writes the result to `out`.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    out: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if manifest.layout.is_some() {
        return Err(Error::data("layout", "dataset is already aligned"));
    }
    let scale = cfg.unit_scale.unwrap_or(manifest.unit_scale);
    let processed: Vec<EegTrial> = (0..manifest.trials.len())
        .into_par_iter()
        .map(|i| preprocess_trial(&load_trial(manifest, i)?, cfg, scale))
        .collect::<Result<_>>()?;
    let mut w = DatasetWriter::create(
        out,
        &manifest.name,
        manifest.task,
        cfg.target_rate_hz,
        manifest.class_names.clone(),
    )?;
    for t in &processed {
        w.push(t)?;
    }
    w.finish()
}
