//! Introspection of a trained model: how full-extent kernel responses track
//! label positions, which samples excite a kernel most, and how per-class
//! AP gains relate to the number of co-occurring labels.

use log::warn;
use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::SrnModel;
use crate::trainer::eval_view;

/// Samples needed before a correlation entry counts as reliable.
pub const MIN_RELIABLE: usize = 30;

/// Pearson correlation. A constant series gives `(0.0, true)`.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    assert_eq!(x.len(), y.len(), "pearson needs paired series");
    let n = x.len() as f64;
    if x.len() < 2 {
        return (0.0, true);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, true);
    }
    ((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), false)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=end] {
            out[i] = avg;
        }
        k = end + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> (f64, bool) {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationEntry {
    pub neuron: usize,
    pub label: usize,
    pub axis: Axis,
    pub r: f64,
    pub count: usize,
    pub reliable: bool,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationTable {
    pub neurons: usize,
    pub labels: usize,
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationTable {
    pub fn get(&self, neuron: usize, label: usize, axis: Axis) -> &CorrelationEntry {
        let k = (neuron * self.labels + label) * 2 + (axis == Axis::Y) as usize;
        &self.entries[k]
    }

    /// The reliable entry with the largest `|r|`.
    pub fn strongest(&self) -> Option<&CorrelationEntry> {
        self.entries
            .iter()
            .filter(|e| e.reliable && !e.degenerate)
            .max_by(|a, b| a.r.abs().total_cmp(&b.r.abs()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("neuron\tlabel\taxis\tr\tcount\tflags\n");
        for e in &self.entries {
            let mut flags = vec![];
            if !e.reliable {
                flags.push("unreliable");
            }
            if e.degenerate {
                flags.push("degenerate");
            }
            let axis = if e.axis == Axis::X { "x" } else { "y" };
            s += &format!("{}\t{}\t{axis}\t{:.4}\t{}\t{}\n", e.neuron, e.label, e.r, e.count, flags.join(","));
        }
        s
    }
}

/// Correlates every neuron with every label's centre, over the samples in
/// which the label is present. `activations[i][n]` is neuron `n` on sample
/// `i`; centres are `(row, col)`, so `y` is the row and `x` the column.
pub fn correlation_table(activations: &[Vec<f64>], centers: &[Vec<Option<(f64, f64)>>], labels: usize) -> Result<CorrelationTable> {
    if activations.len() != centers.len() {
        return Err(Error::Data(format!("{} activation rows for {} samples", activations.len(), centers.len())));
    }
    let neurons = activations.first().map_or(0, Vec::len);
    if activations.iter().any(|a| a.len() != neurons) || centers.iter().any(|c| c.len() != labels) {
        return Err(Error::Data("ragged activation or centre table".into()));
    }
    let mut entries = Vec::with_capacity(neurons * labels * 2);
    for n in 0..neurons {
        for l in 0..labels {
            let present: Vec<(f64, (f64, f64))> =
                activations.iter().zip(centers).filter_map(|(a, c)| c[l].map(|p| (a[n], p))).collect();
            let act: Vec<f64> = present.iter().map(|p| p.0).collect();
            for axis in [Axis::X, Axis::Y] {
                let pos: Vec<f64> = present.iter().map(|p| if axis == Axis::Y { p.1 .0 } else { p.1 .1 }).collect();
                let (r, degenerate) = pearson(&act, &pos);
                entries.push(CorrelationEntry {
                    neuron: n,
                    label: l,
                    axis,
                    r,
                    count: present.len(),
                    reliable: present.len() >= MIN_RELIABLE,
                    degenerate,
                });
            }
        }
    }
    Ok(CorrelationTable { neurons, labels, entries })
}

/// Full-extent kernel responses of the model on each sample.
pub fn conv4_activations(model: &SrnModel, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let (h, w) = (model.config.image_h, model.config.image_w);
    samples
        .iter()
        .map(|s| Ok(model.conv4_activations(&eval_view(&s.image, h, w)?)?.into_data()))
        .collect()
}

pub fn neuron_location_correlation(model: &SrnModel, samples: &[&Sample]) -> Result<CorrelationTable> {
    let acts = conv4_activations(model, samples)?;
    let centers: Vec<_> = samples.iter().map(|s| s.centers.clone()).collect();
    correlation_table(&acts, &centers, model.config.num_labels)
}

/// The `k` samples with the largest response of `neuron`, as
/// `(sample position, activation)`, highest first, ties by position.
pub fn top_activating(activations: &[Vec<f64>], neuron: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if activations.iter().any(|a| neuron >= a.len()) {
        return Err(Error::Data(format!("neuron {neuron} out of range")));
    }
    if k > activations.len() {
        warn!("asked for the top {k} of {} samples, returning all", activations.len());
    }
    let mut order: Vec<(usize, f64)> = activations.iter().map(|a| a[neuron]).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    order.truncate(k);
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApGainRow {
    pub label: usize,
    pub ap: f64,
    pub ap_baseline: f64,
    pub delta_ap: f64,
    /// Mean number of labels present in the images containing this label,
    /// itself included.
    pub concurrency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApGainTable {
    /// Sorted by `delta_ap`, largest first.
    pub rows: Vec<ApGainRow>,
    /// Labels without AP in either report or absent from the samples.
    pub excluded: Vec<usize>,
    /// Spearman correlation between gain and concurrency; `None` with fewer
    /// than two rows or a constant column.
    pub rank_correlation: Option<f64>,
}

impl ApGainTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("label\tAP\tAP_baseline\tdelta\tconcurrency\n");
        for r in &self.rows {
            s += &format!("{}\t{:.4}\t{:.4}\t{:+.4}\t{:.3}\n", r.label, r.ap, r.ap_baseline, r.delta_ap, r.concurrency);
        }
        match self.rank_correlation {
            Some(rho) => s += &format!("rank correlation (gain vs concurrency): {rho:.4}\n"),
            None => s += "rank correlation (gain vs concurrency): undefined\n",
        }
        if !self.excluded.is_empty() {
            s += &format!("excluded labels: {:?}\n", self.excluded);
        }
        s
    }
}

/// Per-class AP differences between two reports on the same samples.
pub fn ap_gain_vs_concurrency(report: &MetricsReport, baseline: &MetricsReport, samples: &[&Sample]) -> Result<ApGainTable> {
    let c = report.per_class_ap.len();
    if baseline.per_class_ap.len() != c || samples.iter().any(|s| s.targets.len() != c) {
        return Err(Error::Data("reports and samples disagree on the number of labels".into()));
    }
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for l in 0..c {
        let containing: Vec<usize> = samples.iter().filter(|s| s.targets[l]).map(|s| s.num_present()).collect();
        match (report.per_class_ap[l], baseline.per_class_ap[l]) {
            (Some(ap), Some(ap_baseline)) if !containing.is_empty() => rows.push(ApGainRow {
                label: l,
                ap,
                ap_baseline,
                delta_ap: ap - ap_baseline,
                concurrency: containing.iter().sum::<usize>() as f64 / containing.len() as f64,
            }),
            _ => excluded.push(l),
        }
    }
    rows.sort_by(|a, b| b.delta_ap.total_cmp(&a.delta_ap).then(a.label.cmp(&b.label)));
    let gains: Vec<f64> = rows.iter().map(|r| r.delta_ap).collect();
    let conc: Vec<f64> = rows.iter().map(|r| r.concurrency).collect();
    let rank_correlation = match spearman(&gains, &conc) {
        (rho, false) => Some(rho),
        _ => None,
    };
    Ok(ApGainTable { rows, excluded, rank_correlation })
}
