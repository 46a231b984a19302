//! Synthetic multi-domain EEG with controllable class signal and domain shift.
//!
//! Every trial is pink background noise plus a task signal: a lateralized
//! 8-12 Hz rhythm for motor imagery, or a late positive deflection on
//! centro-parietal channels for event-related potentials. Each domain then
//! applies its own log-normal channel gains and a small orthogonal mixing, and
//! lists its channels in its own order. Distractor channels carry
//! class-independent artifacts only.
//!
//! Samples are written in microvolts with `unit_scale = 0.01`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{channel_list, ChannelLabel, DatasetManifest, DatasetWriter, DomainId, EegTrial, Task, TaskTemplateSpec};
use crate::error::{Error, Result};

/// Right-hemisphere motor channels, attenuated for the left-hand class.
pub const RIGHT_MOTOR: [&str; 5] = ["C4", "C2", "CP4", "FC4", "C6"];
/// Left-hemisphere motor channels, attenuated for the right-hand class.
pub const LEFT_MOTOR: [&str; 5] = ["C3", "C1", "CP3", "FC3", "C5"];
/// Channels carrying the target deflection, with relative weights.
pub const P300_CHANNELS: [(&str, f64); 5] = [("PZ", 1.0), ("CPZ", 0.9), ("CZ", 0.8), ("P3", 0.7), ("P4", 0.7)];
/// Non-motor remainder of a 10-20 cap. Frontopolar channels carry blinks,
/// occipital ones an alpha rhythm, the rest background only.
pub const MI_DISTRACTORS: [&str; 16] = [
    "FP1", "FP2", "F7", "F3", "FZ", "F4", "F8", "T7", "T8", "P7", "P3", "PZ", "P4", "P8", "O1", "O2",
];
pub const ERP_DISTRACTORS: [&str; 2] = ["TP9", "TP10"];

/// Background standard deviation in microvolts.
const NOISE_UV: f64 = 10.0;
/// Microvolts to the canonical 0.1 mV unit.
const UNIT_SCALE: f64 = 0.01;
const ERP_LATENCY_S: f64 = 0.3;
const ERP_WIDTH_S: f64 = 0.08;
const ERP_JITTER_S: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Channels in this domain's recording order.
    pub channels: Vec<ChannelLabel>,
    pub trial_len_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: Task,
    /// Dataset name, also the prefix of every domain id.
    pub name: String,
    pub rate_hz: f64,
    pub trials_per_domain: usize,
    pub domains: Vec<DomainSpec>,
    /// Task signal power over background power, in dB.
    pub snr_db: f64,
    /// Standard deviation of the log channel gains.
    pub domain_gain_sigma: f64,
    /// Scale of the perturbation orthogonalized into the channel mixing.
    pub mixing: f64,
    /// Motor imagery: rhythm amplitude factor on the attenuated hemisphere;
    /// the other hemisphere is scaled by `2 - erd_factor`.
    pub erd_factor: f64,
    /// Event-related potentials: fraction of target trials.
    pub class_ratio: f64,
    /// Distractor artifact amplitude relative to the background.
    pub distractor_gain: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPreset {
    /// Whole task montage in every domain.
    Full,
    /// A random 60-100% subset of the montage per domain.
    Varied,
    /// The montage dealt round-robin into one group per domain.
    Disjoint,
}

impl std::str::FromStr for ChannelPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ChannelPreset::Full),
            "varied" => Ok(ChannelPreset::Varied),
            "disjoint" => Ok(ChannelPreset::Disjoint),
            other => Err(Error::arg(format!("unknown channel preset {other:?} (full, varied, disjoint)"))),
        }
    }
}

fn labels(names: &[&str]) -> Vec<ChannelLabel> {
    channel_list(names).expect("builtin channel names are valid")
}

fn distractors(task: Task) -> Vec<ChannelLabel> {
    match task {
        Task::Mi => labels(&MI_DISTRACTORS),
        Task::Erp => labels(&ERP_DISTRACTORS),
    }
}

/// Channels that carry class information.
fn signal_channels(task: Task) -> Vec<ChannelLabel> {
    match task {
        Task::Mi => labels(&[LEFT_MOTOR, RIGHT_MOTOR].concat()),
        Task::Erp => labels(&P300_CHANNELS.map(|(c, _)| c)),
    }
}

/// Montage split into lists dealt separately by the disjoint preset, so that
/// every group receives signal channels from both hemispheres.
fn montage_strata(task: Task) -> Vec<Vec<ChannelLabel>> {
    let montage = TaskTemplateSpec::builtin(task).target_channels;
    let signal = signal_channels(task);
    let rest: Vec<ChannelLabel> = montage.into_iter().filter(|c| !signal.contains(c)).collect();
    match task {
        Task::Mi => vec![labels(&LEFT_MOTOR), labels(&RIGHT_MOTOR), rest],
        Task::Erp => vec![signal, rest],
    }
}

impl SynthSpec {
    /// Desk-scale defaults for `task`, with domain channel sets from `preset`.
    pub fn new(task: Task, n_domains: usize, trials_per_domain: usize, snr_db: f64, preset: ChannelPreset, seed: u64) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::arg("at least one domain is required"));
        }
        let lengths: &[f64] = match task {
            Task::Mi => &[4.0, 3.5, 3.0],
            Task::Erp => &[1.0, 0.9],
        };
        let channels = preset_channels(task, n_domains, preset, seed)?;
        Ok(SynthSpec {
            task,
            name: format!("synth-{}", task.name()),
            rate_hz: 256.0,
            trials_per_domain,
            domains: channels
                .into_iter()
                .enumerate()
                .map(|(i, channels)| DomainSpec { channels, trial_len_s: lengths[i % lengths.len()] })
                .collect(),
            snr_db,
            domain_gain_sigma: 0.3,
            mixing: 0.1,
            erd_factor: 0.5,
            class_ratio: 1.0 / 6.0,
            distractor_gain: 3.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |k: &str, m: &str| Err(Error::config(format!("synth.{k}"), m));
        if self.domains.is_empty() {
            return cfg("domains", "at least one domain is required");
        }
        if self.trials_per_domain < 2 {
            return cfg("trials_per_domain", "need at least 2 trials per domain");
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return cfg("rate_hz", "must be positive");
        }
        if !self.snr_db.is_finite() {
            return cfg("snr_db", "must be finite");
        }
        if !(self.domain_gain_sigma >= 0.0 && self.mixing >= 0.0 && self.distractor_gain >= 0.0) {
            return cfg("domain_gain_sigma", "spread parameters must be non-negative");
        }
        if !(self.erd_factor > 0.0 && self.erd_factor <= 1.0) {
            return cfg("erd_factor", "must lie in (0, 1]");
        }
        if !(self.class_ratio > 0.0 && self.class_ratio < 1.0) {
            return cfg("class_ratio", "must lie in (0, 1)");
        }
        let target = TaskTemplateSpec::builtin(self.task);
        for (i, d) in self.domains.iter().enumerate() {
            crate::data::check_unique(&d.channels).map_err(|m| Error::config(format!("synth.domains[{i}].channels"), m))?;
            if !d.channels.iter().any(|c| target.index_of(c).is_some()) {
                return Err(Error::config(
                    format!("synth.domains[{i}].channels"),
                    "no channel of the task montage",
                ));
            }
            let n = (d.trial_len_s * self.rate_hz).round();
            if !(n >= 32.0) {
                return Err(Error::config(format!("synth.domains[{i}].trial_len_s"), "trial shorter than 32 samples"));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.task {
            Task::Mi => vec!["left_hand".into(), "right_hand".into()],
            Task::Erp => vec!["nontarget".into(), "target".into()],
        }
    }
}

/// Per-domain channel lists for a preset, each including the distractors and
/// shuffled into a domain-specific order.
pub fn preset_channels(task: Task, n_domains: usize, preset: ChannelPreset, seed: u64) -> Result<Vec<Vec<ChannelLabel>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let montage = TaskTemplateSpec::builtin(task).target_channels;
    let signal = signal_channels(task);
    let mut sets: Vec<Vec<ChannelLabel>> = match preset {
        ChannelPreset::Full => vec![montage; n_domains],
        ChannelPreset::Varied => (0..n_domains)
            .map(|_| loop {
                let lo = (montage.len() * 3).div_ceil(5);
                let k = rng.gen_range(lo..=montage.len());
                let pick: Vec<ChannelLabel> = montage.choose_multiple(&mut rng, k).cloned().collect();
                if pick.iter().any(|c| signal.contains(c)) {
                    break pick;
                }
            })
            .collect(),
        ChannelPreset::Disjoint => {
            if n_domains > montage.len() {
                return Err(Error::arg(format!("cannot split {} channels into {n_domains} groups", montage.len())));
            }
            let mut groups = vec![Vec::new(); n_domains];
            let mut next = 0;
            for stratum in montage_strata(task) {
                for c in stratum {
                    groups[next % n_domains].push(c);
                    next += 1;
                }
            }
            groups
        }
    };
    for s in &mut sets {
        s.extend(distractors(task));
        s.shuffle(&mut rng);
    }
    Ok(sets)
}

/// Unit-variance noise with a `1/f` amplitude spectrum (DC removed).
pub fn pink_noise<R: Rng>(n: usize, rng: &mut R, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let amp = 1.0 / k as f64;
        let v = Complex64::new(normal.sample(rng), normal.sample(rng)) * amp;
        spec[k] = v;
        if k != n - k {
            spec[n - k] = v.conj();
        } else {
            spec[k] = Complex64::new(v.re, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if sd > 0.0 {
        x.into_iter().map(|v| v / sd).collect()
    } else {
        x
    }
}

/// Random orthogonal matrix near the identity: Gram-Schmidt of `I + scale * N(0, 1)`.
fn near_identity_orthogonal<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut q: Vec<f64> = (0..n * n)
        .map(|i| f64::from(u8::from(i / n == i % n)) + scale * normal.sample(rng))
        .collect();
    for r in 0..n {
        for p in 0..r {
            let d: f64 = (0..n).map(|j| q[r * n + j] * q[p * n + j]).sum();
            for j in 0..n {
                q[r * n + j] -= d * q[p * n + j];
            }
        }
        let norm = (0..n).map(|j| q[r * n + j].powi(2)).sum::<f64>().sqrt();
        for j in 0..n {
            q[r * n + j] /= norm;
        }
    }
    q
}

struct DomainState {
    gains: Vec<f64>,
    mixing: Vec<f64>,
    alpha_hz: f64,
    labels: Vec<usize>,
}

fn domain_state(spec: &SynthSpec, d: usize, seed: u64) -> DomainState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((d as u64) << 32) | 0xFFFF_FFFF);
    let n = spec.domains[d].channels.len();
    let g = Normal::new(0.0, spec.domain_gain_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let gains = (0..n).map(|_| if spec.domain_gain_sigma > 0.0 { g.sample(&mut rng).exp() } else { 1.0 }).collect();
    let mixing = near_identity_orthogonal(n, spec.mixing, &mut rng);
    let alpha_hz = rng.gen_range(9.0..11.0);
    let t = spec.trials_per_domain;
    let n_pos = match spec.task {
        Task::Mi => t / 2,
        Task::Erp => ((t as f64 * spec.class_ratio).round() as usize).clamp(1, t - 1),
    };
    let mut labels: Vec<usize> = (0..t).map(|i| usize::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    DomainState { gains, mixing, alpha_hz, labels }
}

fn add_rhythm<R: Rng>(x: &mut [f64], amp: f64, center_hz: f64, rate: f64, rng: &mut R) {
    // three components of equal power around the domain's alpha peak
    let a = amp * (2.0f64 / 3.0).sqrt();
    for _ in 0..3 {
        let f = (center_hz + rng.gen_range(-1.0..1.0)).clamp(8.0, 12.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / rate + phase).sin();
        }
    }
}

fn generate_trial(spec: &SynthSpec, d: usize, state: &DomainState, i: usize, seed: u64, planner: &mut FftPlanner<f64>) -> Result<EegTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((d as u64) << 32) | i as u64);
    let dom = &spec.domains[d];
    let n = (dom.trial_len_s * spec.rate_hz).round() as usize;
    let rate = spec.rate_hz;
    let label = state.labels[i];
    let signal_amp = NOISE_UV * 10f64.powf(spec.snr_db / 20.0);
    let distract = labels(match spec.task {
        Task::Mi => &MI_DISTRACTORS,
        Task::Erp => &ERP_DISTRACTORS,
    });
    let left = labels(&LEFT_MOTOR);
    let right = labels(&RIGHT_MOTOR);
    let erp_latency = ERP_LATENCY_S + rng.gen_range(-ERP_JITTER_S..ERP_JITTER_S);
    // blink times shared by the frontal distractors
    let blinks: Vec<f64> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(0.0..dom.trial_len_s)).collect();
    let occipital = rng.gen_range(0.0..1.0) * spec.distractor_gain * NOISE_UV;

    let mut src = Vec::with_capacity(dom.channels.len() * n);
    for ch in &dom.channels {
        let mut x: Vec<f64> = pink_noise(n, &mut rng, planner).into_iter().map(|v| v * NOISE_UV).collect();
        if distract.contains(ch) {
            if ch.as_str().starts_with("FP") || ch.as_str().starts_with("TP") {
                for &b in &blinks {
                    for (k, v) in x.iter_mut().enumerate() {
                        let t = k as f64 / rate - b;
                        *v += spec.distractor_gain * 5.0 * NOISE_UV * (-t * t / (2.0 * 0.1f64.powi(2))).exp();
                    }
                }
            } else if ch.as_str().starts_with('O') {
                add_rhythm(&mut x, occipital, state.alpha_hz, rate, &mut rng);
            }
        } else {
            match spec.task {
                Task::Mi => {
                    let (weak, strong) = if label == 0 { (&right, &left) } else { (&left, &right) };
                    let factor = if weak.contains(ch) {
                        spec.erd_factor
                    } else if strong.contains(ch) {
                        2.0 - spec.erd_factor
                    } else {
                        1.0
                    };
                    add_rhythm(&mut x, signal_amp * factor, state.alpha_hz, rate, &mut rng);
                }
                Task::Erp => {
                    add_rhythm(&mut x, 0.5 * NOISE_UV, state.alpha_hz, rate, &mut rng);
                    let w = P300_CHANNELS.iter().find(|(c, _)| ch.as_str() == *c).map_or(0.0, |(_, w)| *w);
                    if label == 1 && w > 0.0 {
                        for (k, v) in x.iter_mut().enumerate() {
                            let t = k as f64 / rate - erp_latency;
                            *v += w * signal_amp * (-t * t / (2.0 * ERP_WIDTH_S * ERP_WIDTH_S)).exp();
                        }
                    }
                }
            }
        }
        src.extend(x);
    }

    let c = dom.channels.len();
    let mut data = vec![0.0f32; c * n];
    for r in 0..c {
        for (k, &q) in state.mixing[r * c..(r + 1) * c].iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let g = state.gains[r] * q;
            for (o, &s) in data[r * n..(r + 1) * n].iter_mut().zip(&src[k * n..(k + 1) * n]) {
                *o += (g * s) as f32;
            }
        }
    }
    EegTrial::new(data, dom.channels.clone(), rate, label, DomainId::new(&spec.name, &format!("s{d:02}"), "1"))
}

/// All trials of the dataset, domain by domain. Deterministic in `(spec, seed)`.
pub fn generate_trials(spec: &SynthSpec, seed: u64) -> Result<Vec<EegTrial>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.domains.len() * spec.trials_per_domain);
    for d in 0..spec.domains.len() {
        let state = domain_state(spec, d, seed);
        let trials: Vec<EegTrial> = (0..spec.trials_per_domain)
            .into_par_iter()
            .map_init(FftPlanner::new, |planner, i| generate_trial(spec, d, &state, i, seed, planner))
            .collect::<Result<_>>()?;
        out.extend(trials);
    }
    Ok(out)
}

fn write_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let trials = generate_trials(spec, seed)?;
    let mut w = DatasetWriter::create(out, &spec.name, spec.task, spec.rate_hz, spec.class_names())?;
    w.set_unit_scale(UNIT_SCALE);
    for t in &trials {
        w.push(t)?;
    }
    let spec_path = out.join("synth_spec.json");
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    w.finish()
}

/// Writes a motor imagery dataset to `out`.
pub fn gen_mi_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if spec.task != Task::Mi {
        return Err(Error::config("synth.task", "expected task mi"));
    }
    write_dataset(spec, seed, out)
}

/// Writes an event-related potential dataset to `out`.
pub fn gen_erp_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if spec.task != Task::Erp {
        return Err(Error::config("synth.task", "expected task erp"));
    }
    write_dataset(spec, seed, out)
}
