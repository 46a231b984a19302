//! Trials, domains and the on-disk dataset format.

mod channels;
mod manifest;

pub use channels::{
    channel_list, ChannelLabel, Task, TaskTemplateSpec, ERP_CHANNELS, ERP_TEMPLATE_LEN,
    MI_CHANNELS, MI_TEMPLATE_LEN,
};
pub use manifest::{
    load_all_trials, load_manifest, load_trial, DatasetManifest, DatasetWriter, TrialRecord,
    MANIFEST_FILE,
};

pub(crate) use channels::check_unique;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies a recording domain: trials sharing subject, session and device.
///
/// The conventional form is `dataset:subject:session`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub String);

impl DomainId {
    pub fn new(dataset: &str, subject: &str, session: &str) -> Self {
        DomainId(format!("{dataset}:{subject}:{session}"))
    }

    /// The `dataset:subject` prefix, used as the unit of cross-subject folds.
    pub fn subject(&self) -> &str {
        match self.0.rfind(':') {
            Some(i) if self.0[..i].contains(':') => &self.0[..i],
            _ => &self.0,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        DomainId(s.to_string())
    }
}

/// One labeled trial: `channels.len() x n_samples` values, row-major, in 0.1 mV.
#[derive(Clone, Debug, PartialEq)]
pub struct EegTrial {
    pub data: Vec<f32>,
    pub n_samples: usize,
    pub channels: Vec<ChannelLabel>,
    pub rate_hz: f64,
    pub label: usize,
    pub domain_id: DomainId,
}

impl EegTrial {
    pub fn new(
        data: Vec<f32>,
        channels: Vec<ChannelLabel>,
        rate_hz: f64,
        label: usize,
        domain_id: DomainId,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::data("channels", "trial has no channels"));
        }
        channels::check_unique(&channels).map_err(|m| Error::data("channels", m))?;
        if data.len() % channels.len() != 0 {
            return Err(Error::data(
                "data",
                format!("{} values do not divide into {} channels", data.len(), channels.len()),
            ));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::data("rate_hz", format!("must be positive, got {rate_hz}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("data", "non-finite sample"));
        }
        let n_samples = data.len() / channels.len();
        Ok(EegTrial {
            data,
            n_samples,
            channels,
            rate_hz,
            label,
            domain_id,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn row(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }

    pub fn row_mut(&mut self, ch: usize) -> &mut [f32] {
        &mut self.data[ch * self.n_samples..(ch + 1) * self.n_samples]
    }

    /// Replaces the sample matrix, keeping the metadata.
    pub(crate) fn with_data(&self, data: Vec<f32>, n_samples: usize, rate_hz: f64) -> Self {
        debug_assert_eq!(data.len(), n_samples * self.channels.len());
        EegTrial {
            data,
            n_samples,
            channels: self.channels.clone(),
            rate_hz,
            label: self.label,
            domain_id: self.domain_id.clone(),
        }
    }
}

/// Trials of one domain; the unit over which alignment statistics are computed.
#[derive(Clone, Debug)]
pub struct DomainGroup {
    pub domain_id: DomainId,
    pub trials: Vec<EegTrial>,
}

/// Partitions trials by domain id, groups sorted by id, input order kept inside
/// each group. Trials sharing an id must share channel list and rate.
pub fn group_by_domain(trials: Vec<EegTrial>) -> Result<Vec<DomainGroup>> {
    if trials.is_empty() {
        return Err(Error::arg("no trials to group"));
    }
    let mut groups: BTreeMap<DomainId, Vec<EegTrial>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.domain_id.clone()).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|(domain_id, trials)| {
            let first = &trials[0];
            for t in &trials[1..] {
                if t.channels != first.channels {
                    return Err(Error::data(
                        format!("domain[{domain_id}]"),
                        "trials disagree on channel list",
                    ));
                }
                if t.rate_hz != first.rate_hz {
                    return Err(Error::data(
                        format!("domain[{domain_id}]"),
                        "trials disagree on sampling rate",
                    ));
                }
            }
            Ok(DomainGroup { domain_id, trials })
        })
        .collect()
}
