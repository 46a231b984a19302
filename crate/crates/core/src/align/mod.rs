//! Spatial alignment: channel selection, per-domain Euclidean alignment and
//! mapping into the task template.
//!
//! A trial `X` (channels `S`, samples `T`) goes through three stages:
//!
//! 1. selection keeps the rows of `C = S ∩ T_task`, ordered as in the template;
//! 2. alignment left-multiplies every trial of a domain by `R̄^{-1/2}`, where
//!    `R̄ = (1/D) Σ X' X'^T` is the mean spatial covariance of the domain;
//! 3. mapping writes the aligned rows into a zero `M x T'` template.

mod linalg;

pub use linalg::{inv_sqrt_psd, symmetric_eigen, InvSqrt, SquareMatrix, SymmetricEigen};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    group_by_domain, load_all_trials, ChannelLabel, DatasetManifest, DatasetWriter, DomainId,
    EegTrial, Task, TaskTemplateSpec,
};
use crate::error::{Error, Result};

/// Eigenvalue floor relative to the mean eigenvalue.
pub const EIG_EPS_REL: f64 = 1e-10;

/// A trial restricted to the task-relevant channels, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedTrial {
    /// `selected.len() x n_samples`, row-major.
    pub data: Vec<f64>,
    pub n_samples: usize,
    /// Channel of each row with its template row index.
    pub selected: Vec<(ChannelLabel, usize)>,
    pub domain_id: DomainId,
    pub label: usize,
}

impl SelectedTrial {
    pub fn n_channels(&self) -> usize {
        self.selected.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }
}

/// Per-domain alignment statistics, persisted as json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub domain_id: DomainId,
    pub channels: Vec<ChannelLabel>,
    pub d_count: usize,
    pub r_bar: SquareMatrix,
    pub r_inv_sqrt: SquareMatrix,
    /// Eigenvalues raised to the floor while inverting.
    pub clamped: usize,
}

/// A trial in the unified `M x T'` input layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateInput {
    pub data: Vec<f32>,
    pub n_channels: usize,
    pub template_len: usize,
    pub label: usize,
    pub domain_id: DomainId,
}

impl TemplateInput {
    pub fn zeros(n_channels: usize, template_len: usize, label: usize, domain_id: DomainId) -> Self {
        TemplateInput {
            data: vec![0.0; n_channels * template_len],
            n_channels,
            template_len,
            label,
            domain_id,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.template_len..(i + 1) * self.template_len]
    }
}

/// Keeps rows whose channel is in the template, in template order.
pub fn select_channels(trial: &EegTrial, spec: &TaskTemplateSpec) -> Result<SelectedTrial> {
    let mut picks: Vec<(usize, usize)> = trial
        .channels
        .iter()
        .enumerate()
        .filter_map(|(src, ch)| spec.index_of(ch).map(|dst| (dst, src)))
        .collect();
    if picks.is_empty() {
        return Err(Error::data(
            format!("domain[{}]", trial.domain_id),
            "no task-relevant channels",
        ));
    }
    picks.sort_unstable();
    let mut data = Vec::with_capacity(picks.len() * trial.n_samples);
    let mut selected = Vec::with_capacity(picks.len());
    for &(dst, src) in &picks {
        data.extend(trial.row(src).iter().map(|&v| v as f64));
        selected.push((trial.channels[src].clone(), dst));
    }
    Ok(SelectedTrial {
        data,
        n_samples: trial.n_samples,
        selected,
        domain_id: trial.domain_id.clone(),
        label: trial.label,
    })
}

/// `R̄ = (1/D) Σ X' X'^T`, symmetrised.
pub fn mean_covariance(group: &[SelectedTrial]) -> Result<SquareMatrix> {
    let first = group.first().ok_or_else(|| Error::arg("empty domain"))?;
    let m = first.n_channels();
    let mut r = SquareMatrix::zeros(m);
    for t in group {
        if t.n_channels() != m || t.selected != first.selected {
            return Err(Error::data(
                format!("domain[{}]", t.domain_id),
                "trials disagree on selected channels",
            ));
        }
        for i in 0..m {
            let ri = t.row(i);
            for j in i..m {
                let v: f64 = ri.iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                r.data[i * m + j] += v;
            }
        }
    }
    let d = group.len() as f64;
    for i in 0..m {
        for j in i..m {
            let v = r.data[i * m + j] / d;
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    r.symmetrize();
    Ok(r)
}

/// Whitens every trial of one domain by the inverse square root of its mean covariance.
pub fn align_domain(group: &[SelectedTrial]) -> Result<(Vec<SelectedTrial>, AlignmentMatrix)> {
    let r_bar = mean_covariance(group)?;
    let inv = inv_sqrt_psd(&r_bar, EIG_EPS_REL).map_err(|e| {
        Error::numeric(format!("domain {}: {e}", group[0].domain_id))
    })?;
    let w = &inv.matrix;
    let m = r_bar.n;
    let aligned = group
        .iter()
        .map(|t| {
            let n = t.n_samples;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let dst = &mut out[i * n..(i + 1) * n];
                for k in 0..m {
                    let c = w.get(i, k);
                    for (o, x) in dst.iter_mut().zip(t.row(k)) {
                        *o += c * x;
                    }
                }
            }
            SelectedTrial {
                data: out,
                ..t.clone()
            }
        })
        .collect();
    let stats = AlignmentMatrix {
        domain_id: group[0].domain_id.clone(),
        channels: group[0].selected.iter().map(|(c, _)| c.clone()).collect(),
        d_count: group.len(),
        r_bar,
        r_inv_sqrt: inv.matrix,
        clamped: inv.clamped,
    };
    Ok((aligned, stats))
}

/// Writes the rows of `aligned` at their template row indices of a zero `M x T'` matrix.
pub fn map_to_template(aligned: &SelectedTrial, spec: &TaskTemplateSpec) -> Result<TemplateInput> {
    let rows: Vec<usize> = aligned.selected.iter().map(|(_, r)| *r).collect();
    place_rows(aligned, &rows, spec.n_channels(), spec.template_len)
}

fn place_rows(
    aligned: &SelectedTrial,
    rows: &[usize],
    n_rows: usize,
    template_len: usize,
) -> Result<TemplateInput> {
    let t = aligned.n_samples;
    if t > template_len {
        return Err(Error::data(
            format!("domain[{}]", aligned.domain_id),
            format!("trial exceeds template length: {t} > {template_len}"),
        ));
    }
    let mut out = TemplateInput::zeros(n_rows, template_len, aligned.label, aligned.domain_id.clone());
    for (i, &r) in rows.iter().enumerate() {
        let dst = &mut out.data[r * template_len..r * template_len + t];
        for (d, s) in dst.iter_mut().zip(aligned.row(i)) {
            *d = *s as f32;
        }
    }
    Ok(out)
}

/// Which spatial stages run; switching one off gives the corresponding ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignStages {
    pub select: bool,
    pub euclidean: bool,
    pub map: bool,
}

impl Default for AlignStages {
    fn default() -> Self {
        AlignStages {
            select: true,
            euclidean: true,
            map: true,
        }
    }
}

/// Input layout of an aligned dataset, stored in its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignedLayout {
    /// Target channels and template length. With selection disabled this is the
    /// union of all training channels rather than the task montage.
    pub template: TaskTemplateSpec,
    pub stages: AlignStages,
}

impl AlignedLayout {
    pub fn new(task: Task, stages: AlignStages) -> Self {
        AlignedLayout {
            template: TaskTemplateSpec::builtin(task),
            stages,
        }
    }

    pub fn task(&self) -> Task {
        self.template.task
    }

    pub fn n_channels(&self) -> usize {
        self.template.n_channels()
    }

    pub fn template_len(&self) -> usize {
        self.template.template_len
    }

    /// Replaces the template channels by the union of `channel_sets`, keeping
    /// first-seen order. Used when selection is disabled.
    pub fn with_channel_union<'a>(
        mut self,
        channel_sets: impl IntoIterator<Item = &'a [ChannelLabel]>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut union = Vec::new();
        for set in channel_sets {
            for ch in set {
                if seen.insert(ch.clone()) {
                    union.push(ch.clone());
                }
            }
        }
        self.template = TaskTemplateSpec::custom(self.template.task, union, self.template.template_len)?;
        Ok(self)
    }

    /// Row labels written to aligned manifests.
    fn row_labels(&self) -> Vec<ChannelLabel> {
        if self.stages.map {
            self.template.target_channels.clone()
        } else {
            (0..self.n_channels())
                .map(|i| ChannelLabel::new(&format!("SLOT{i}")).expect("valid label"))
                .collect()
        }
    }
}

/// Channel union over every channel set of the given manifests.
pub fn channel_union(manifests: &[DatasetManifest]) -> Vec<Vec<ChannelLabel>> {
    manifests
        .iter()
        .flat_map(|m| m.channel_sets.values().cloned())
        .collect()
}

/// Multiplies a whitened trial by `sqrt(T)`, giving unit variance per sample.
///
/// `align_domain` whitens with the covariance summed over time, so its output
/// rows carry unit energy rather than unit variance and the per-sample scale
/// depends on trial length. Applied between whitening and template mapping.
pub fn to_unit_variance(mut aligned: SelectedTrial) -> SelectedTrial {
    let s = (aligned.n_samples as f64).sqrt();
    for v in &mut aligned.data {
        *v *= s;
    }
    aligned
}

/// Runs the spatial stages over trials that may span several domains and
/// channel layouts. Output keeps input order.
pub fn align_trials(
    trials: Vec<EegTrial>,
    layout: &AlignedLayout,
) -> Result<(Vec<TemplateInput>, Vec<AlignmentMatrix>)> {
    let n = trials.len();
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    // remember input positions through the grouping
    let mut order: Vec<(DomainId, usize)> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| (t.domain_id.clone(), i))
        .collect();
    order.sort();
    let groups = group_by_domain(trials)?;
    let spec = &layout.template;
    let mut outputs: Vec<Option<TemplateInput>> = vec![None; n];
    let mut stats = Vec::new();
    let mut cursor = order.into_iter();
    for g in groups {
        let selected = g
            .trials
            .iter()
            .map(|t| select_channels(t, spec))
            .collect::<Result<Vec<_>>>()?;
        let aligned = if layout.stages.euclidean {
            let (a, s) = align_domain(&selected)?;
            stats.push(s);
            a.into_iter().map(to_unit_variance).collect()
        } else {
            selected
        };
        for (t, src) in aligned.iter().zip(&g.trials) {
            let x = if layout.stages.map {
                map_to_template(t, spec)?
            } else {
                // original montage order, packed from row 0
                let mut by_source: Vec<(usize, usize)> = t
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(i, (ch, _))| {
                        let p = src.channels.iter().position(|c| c == ch).expect("selected from source");
                        (p, i)
                    })
                    .collect();
                by_source.sort_unstable();
                let mut rows = vec![0; by_source.len()];
                for (slot, &(_, i)) in by_source.iter().enumerate() {
                    rows[i] = slot;
                }
                place_rows(t, &rows, spec.n_channels(), spec.template_len)?
            };
            let (_, idx) = cursor.next().expect("one position per trial");
            outputs[idx] = Some(x);
        }
    }
    Ok((outputs.into_iter().map(|o| o.expect("filled")).collect(), stats))
}

fn domain_file_name(id: &DomainId) -> String {
    let s: String = id
        .as_str()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{s}.json")
}

/// Aligns a preprocessed dataset and writes template inputs plus per-domain
/// statistics (`alignment/<domain>.json`) to `out`.
pub fn align_dataset(
    manifest: &DatasetManifest,
    layout: &AlignedLayout,
    out: &Path,
) -> Result<DatasetManifest> {
    if manifest.layout.is_some() {
        return Err(Error::data("layout", "dataset is already aligned"));
    }
    if manifest.task != layout.task() {
        return Err(Error::TemplateMismatch(format!(
            "{} dataset with a {} template",
            manifest.task,
            layout.task()
        )));
    }
    let trials = load_all_trials(manifest)?;
    let (inputs, stats) = align_trials(trials, layout)?;
    let mut w = DatasetWriter::create(
        out,
        &manifest.name,
        manifest.task,
        manifest.rate_hz,
        manifest.class_names.clone(),
    )?;
    w.set_layout(layout.clone());
    let labels = layout.row_labels();
    for x in inputs {
        let t = EegTrial::new(x.data, labels.clone(), manifest.rate_hz, x.label, x.domain_id)?;
        w.push(&t)?;
    }
    let dir = out.join("alignment");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in &stats {
        let path = dir.join(domain_file_name(&s.domain_id));
        let text = serde_json::to_string_pretty(s).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    w.finish()
}

/// Reads an aligned dataset back as template inputs.
pub fn load_template_inputs(manifest: &DatasetManifest) -> Result<(AlignedLayout, Vec<TemplateInput>)> {
    let layout = manifest
        .layout
        .clone()
        .ok_or_else(|| Error::data("layout", format!("dataset {} is not aligned", manifest.name)))?;
    let inputs = load_all_trials(manifest)?
        .into_iter()
        .map(|t| {
            if t.n_channels() != layout.n_channels() || t.n_samples != layout.template_len() {
                return Err(Error::data(
                    "trials",
                    format!(
                        "aligned trial is {}x{}, layout is {}x{}",
                        t.n_channels(),
                        t.n_samples,
                        layout.n_channels(),
                        layout.template_len()
                    ),
                ));
            }
            Ok(TemplateInput {
                n_channels: t.n_channels(),
                template_len: t.n_samples,
                data: t.data,
                label: t.label,
                domain_id: t.domain_id,
            })
        })
        .collect::<Result<_>>()?;
    Ok((layout, inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::channel_list;

    fn trial(chans: &[&str], data: Vec<f32>, id: &str) -> EegTrial {
        EegTrial::new(data, channel_list(chans).unwrap(), 256.0, 0, id.into()).unwrap()
    }

    fn selected(rows: &[&[f64]], id: &str) -> SelectedTrial {
        let n = rows[0].len();
        SelectedTrial {
            data: rows.concat(),
            n_samples: n,
            selected: (0..rows.len())
                .map(|i| (ChannelLabel::new(&format!("X{i}")).unwrap(), i))
                .collect(),
            domain_id: id.into(),
            label: 0,
        }
    }

    #[test]
    fn selection_orders_by_template() {
        let t = trial(&["C4", "F3", "CZ", "C3"], (0..8).map(|v| v as f32).collect(), "d");
        let s = select_channels(&t, &TaskTemplateSpec::mi()).unwrap();
        let names: Vec<&str> = s.selected.iter().map(|(c, _)| c.as_str()).collect();
        assert_eq!(names, ["C3", "CZ", "C4"]);
        assert_eq!(s.selected.iter().map(|(_, r)| *r).collect::<Vec<_>>(), [6, 8, 10]);
        assert_eq!(s.row(0), &[6.0, 7.0]);
        assert_eq!(s.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn full_montage_selection() {
        let mut names = crate::data::MI_CHANNELS.to_vec();
        names.reverse();
        let t = trial(&names, vec![1.0; 17 * 3], "d");
        let s = select_channels(&t, &TaskTemplateSpec::mi()).unwrap();
        assert_eq!(s.n_channels(), 17);
        assert!(s.selected.iter().enumerate().all(|(i, (_, r))| i == *r));
    }

    #[test]
    fn no_overlap_is_an_error() {
        let t = trial(&["O1", "O2"], vec![1.0; 4], "d");
        let err = select_channels(&t, &TaskTemplateSpec::mi()).unwrap_err().to_string();
        assert!(err.contains("no task-relevant channels"));
    }

    #[test]
    fn mean_covariance_examples() {
        let r = mean_covariance(&[selected(&[&[1.0, 0.0], &[0.0, 1.0]], "d")]).unwrap();
        assert_eq!(r, SquareMatrix::identity(2));
        let r = mean_covariance(&[selected(&[&[1.0, 1.0]], "d"), selected(&[&[3.0, 1.0]], "d")])
            .unwrap();
        assert_eq!(r.data, vec![6.0]);
    }

    #[test]
    fn single_trial_whitening() {
        let x = selected(&[&[1.0, 2.0, 0.5], &[0.3, -1.0, 2.0]], "d");
        let (a, stats) = align_domain(&[x]).unwrap();
        let r = mean_covariance(&a).unwrap();
        assert!(r.frobenius_dist(&SquareMatrix::identity(2)) < 1e-8);
        assert_eq!(stats.d_count, 1);
        assert_eq!(stats.clamped, 0);
    }

    #[test]
    fn zero_domain_fails() {
        let x = selected(&[&[0.0, 0.0], &[0.0, 0.0]], "d");
        assert!(matches!(align_domain(&[x]), Err(Error::Numeric(_))));
    }

    #[test]
    fn template_placement() {
        let spec = TaskTemplateSpec::custom(Task::Mi, channel_list(&["A", "B", "C"]).unwrap(), 4).unwrap();
        let t = trial(&["A", "C"], vec![1.0, 2.0, 3.0, 4.0], "d");
        let s = select_channels(&t, &spec).unwrap();
        let x = map_to_template(&s, &spec).unwrap();
        assert_eq!(x.row(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(x.row(1), &[0.0; 4]);
        assert_eq!(x.row(2), &[3.0, 4.0, 0.0, 0.0]);

        let exact = trial(&["A", "B", "C"], vec![1.0; 12], "d");
        let x = map_to_template(&select_channels(&exact, &spec).unwrap(), &spec).unwrap();
        assert!(x.data.iter().all(|&v| v == 1.0));

        let long = trial(&["A"], vec![1.0; 5], "d");
        let err = map_to_template(&select_channels(&long, &spec).unwrap(), &spec).unwrap_err();
        assert!(err.to_string().contains("exceeds template length"));
    }

    #[test]
    fn unmapped_layout_keeps_source_order() {
        let spec = TaskTemplateSpec::custom(Task::Mi, channel_list(&["A", "B", "C"]).unwrap(), 2).unwrap();
        let layout = AlignedLayout {
            template: spec,
            stages: AlignStages {
                select: true,
                euclidean: false,
                map: false,
            },
        };
        let t = trial(&["C", "X", "A"], vec![1.0, 1.0, 9.0, 9.0, 2.0, 2.0], "d");
        let (out, stats) = align_trials(vec![t], &layout).unwrap();
        assert!(stats.is_empty());
        assert_eq!(out[0].row(0), &[1.0, 1.0]);
        assert_eq!(out[0].row(1), &[2.0, 2.0]);
        assert_eq!(out[0].row(2), &[0.0, 0.0]);
    }

    #[test]
    fn aligned_inputs_have_unit_sample_variance() {
        let spec = TaskTemplateSpec::custom(Task::Mi, channel_list(&["A", "B"]).unwrap(), 8).unwrap();
        let layout = AlignedLayout { template: spec, stages: AlignStages::default() };
        let trials = (0..3)
            .map(|i| {
                let data: Vec<f32> = (0..16).map(|k| ((k * 7 + i * 5) % 11) as f32 - 5.0).collect();
                trial(&["A", "B"], data, "d")
            })
            .collect();
        let (out, _) = align_trials(trials, &layout).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let c: f64 = out
                    .iter()
                    .map(|x| x.row(i).iter().zip(x.row(j)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>())
                    .sum::<f64>()
                    / (3.0 * 8.0);
                assert!((c - f64::from(u8::from(i == j))).abs() < 1e-5, "{i},{j}: {c}");
            }
        }
    }

    #[test]
    fn union_template() {
        let a = channel_list(&["C3", "O1"]).unwrap();
        let b = channel_list(&["O1", "CZ"]).unwrap();
        let l = AlignedLayout::new(Task::Mi, AlignStages::default())
            .with_channel_union([a.as_slice(), b.as_slice()])
            .unwrap();
        let names: Vec<&str> = l.template.target_channels.iter().map(|c| c.as_str()).collect();
        assert_eq!(names, ["C3", "O1", "CZ"]);
    }
}
