use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A 10-20 electrode name in canonical form: uppercase with separators removed.
///
/// `"Fcz"`, `"FC-z"` and `"fc z"` all canonicalize to `"FCZ"`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelLabel(String);

impl ChannelLabel {
    pub fn new(name: &str) -> Result<Self> {
        let canon: String = name
            .chars()
            .filter(|c| !c.is_whitespace() && !matches!(c, '-' | '_' | '.'))
            .flat_map(char::to_uppercase)
            .collect();
        if canon.is_empty() {
            return Err(Error::arg(format!("empty channel name {name:?}")));
        }
        Ok(ChannelLabel(canon))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for ChannelLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ChannelLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ChannelLabel::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a list of names, rejecting duplicates after canonicalization.
pub fn channel_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<ChannelLabel>> {
    let labels = names
        .iter()
        .map(|n| ChannelLabel::new(n.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    check_unique(&labels).map_err(Error::arg)?;
    Ok(labels)
}

pub(crate) fn check_unique(labels: &[ChannelLabel]) -> std::result::Result<(), String> {
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(format!("duplicate channel {l}"));
        }
    }
    Ok(())
}

/// Decoding paradigm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Motor imagery / motor execution.
    Mi,
    /// Event-related potentials.
    Erp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Mi => "mi",
            Task::Erp => "erp",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mi" => Ok(Task::Mi),
            "erp" => Ok(Task::Erp),
            other => Err(Error::arg(format!("unknown task {other:?}, expected mi or erp"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Motor-cortex target set for motor imagery.
pub const MI_CHANNELS: [&str; 17] = [
    "FC3", "FC1", "FCZ", "FC2", "FC4", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "CP3", "CP1",
    "CPZ", "CP2", "CP4",
];

/// Centro-parietal / occipital target set for event-related potentials.
pub const ERP_CHANNELS: [&str; 28] = [
    "FP1", "FP2", "F5", "F3", "FZ", "F4", "F6", "FCZ", "T7", "C3", "CZ", "C4", "T8", "CP3", "CPZ",
    "CP4", "P7", "P3", "PZ", "P4", "P8", "PO7", "PO3", "PO4", "PO8", "O1", "OZ", "O2",
];

/// Template length for MI inputs: 5 s at 256 Hz.
pub const MI_TEMPLATE_LEN: usize = 1280;
/// Template length for ERP inputs: 1 s at 256 Hz.
pub const ERP_TEMPLATE_LEN: usize = 256;

/// The unified input layout for one task: an ordered target channel list and a
/// fixed number of time samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplateSpec {
    pub task: Task,
    pub target_channels: Vec<ChannelLabel>,
    pub template_len: usize,
}

impl TaskTemplateSpec {
    pub fn mi() -> Self {
        Self::builtin(Task::Mi)
    }

    pub fn erp() -> Self {
        Self::builtin(Task::Erp)
    }

    pub fn builtin(task: Task) -> Self {
        let (names, len): (&[&str], usize) = match task {
            Task::Mi => (&MI_CHANNELS, MI_TEMPLATE_LEN),
            Task::Erp => (&ERP_CHANNELS, ERP_TEMPLATE_LEN),
        };
        TaskTemplateSpec {
            task,
            target_channels: channel_list(names).expect("builtin montage is valid"),
            template_len: len,
        }
    }

    /// Custom template, e.g. the channel union used when selection is disabled.
    pub fn custom(task: Task, target_channels: Vec<ChannelLabel>, template_len: usize) -> Result<Self> {
        if target_channels.is_empty() {
            return Err(Error::arg("template needs at least one channel"));
        }
        if template_len == 0 {
            return Err(Error::arg("template length must be positive"));
        }
        check_unique(&target_channels).map_err(Error::arg)?;
        Ok(TaskTemplateSpec {
            task,
            target_channels,
            template_len,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.target_channels.len()
    }

    pub fn index_of(&self, label: &ChannelLabel) -> Option<usize> {
        self.target_channels.iter().position(|c| c == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names() {
        assert_eq!(ChannelLabel::new("Fcz").unwrap().as_str(), "FCZ");
        assert_eq!(ChannelLabel::new(" fc-z ").unwrap().as_str(), "FCZ");
        assert!(ChannelLabel::new("  ").is_err());
        assert_eq!(ChannelLabel::new("cz").unwrap(), ChannelLabel::new("CZ").unwrap());
    }

    #[test]
    fn duplicate_after_canonicalization_rejected() {
        assert!(channel_list(&["Cz", "CZ"]).is_err());
    }

    #[test]
    fn builtin_templates() {
        let mi = TaskTemplateSpec::mi();
        let names: Vec<&str> = mi.target_channels.iter().map(|c| c.as_str()).collect();
        assert_eq!(
            names.join(" "),
            "FC3 FC1 FCZ FC2 FC4 C5 C3 C1 CZ C2 C4 C6 CP3 CP1 CPZ CP2 CP4"
        );
        assert_eq!(mi.template_len, 1280);

        let erp = TaskTemplateSpec::erp();
        assert_eq!(erp.n_channels(), 28);
        assert_eq!(erp.target_channels[0].as_str(), "FP1");
        assert_eq!(erp.target_channels[27].as_str(), "O2");
        assert_eq!(erp.template_len, 256);
    }
}
