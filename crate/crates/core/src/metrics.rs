//! Multi-label evaluation: per-class AP, macro and micro P/R/F1, and the
//! top-k protocols.
//!
//! Every ratio with a zero denominator is 0. Ranking ties are broken by the
//! lower index (sample index for AP, label index for top-k).

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores, targets and validity flags of `n` images over `c` labels, all
/// row-major `n x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub n: usize,
    pub c: usize,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
    pub mask: Vec<bool>,
}

impl PredictionSet {
    pub fn new(c: usize, scores: Vec<f64>, targets: Vec<bool>, mask: Option<Vec<bool>>) -> Result<Self> {
        if c == 0 || scores.len() % c != 0 {
            return Err(Error::Data(format!("{} scores do not fill rows of {c} labels", scores.len())));
        }
        let n = scores.len() / c;
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::with_ids(c, ids, scores, targets, mask)
    }

    pub fn with_ids(
        c: usize,
        ids: Vec<String>,
        scores: Vec<f64>,
        targets: Vec<bool>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = ids.len();
        let mask = mask.unwrap_or_else(|| vec![true; n * c]);
        if c == 0 || scores.len() != n * c || targets.len() != n * c || mask.len() != n * c {
            return Err(Error::Data(format!(
                "{n} images x {c} labels need {} entries; got {} scores, {} targets, {} mask flags",
                n * c,
                scores.len(),
                targets.len(),
                mask.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Data(format!("score {s} outside [0, 1]")));
        }
        Ok(PredictionSet { n, c, ids, scores, targets, mask })
    }

    fn at(&self, i: usize, l: usize) -> usize {
        i * self.c + l
    }

    /// Tab-separated table: `image_id`, `score_*`, `target_*`, then `mask_*`
    /// when any label is unspecified.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let with_mask = self.mask.iter().any(|&m| !m);
        let mut header = vec!["image_id".to_string()];
        for kind in ["score", "target"].iter().chain(with_mask.then_some(&"mask")) {
            header.extend((0..self.c).map(|l| format!("{kind}_{l}")));
        }
        writeln!(w, "{}", header.join("\t"))?;
        for i in 0..self.n {
            let row = &self.scores[i * self.c..(i + 1) * self.c];
            let mut fields = vec![self.ids[i].clone()];
            fields.extend(row.iter().map(|s| s.to_string()));
            fields.extend((0..self.c).map(|l| (self.targets[self.at(i, l)] as u8).to_string()));
            if with_mask {
                fields.extend((0..self.c).map(|l| (self.mask[self.at(i, l)] as u8).to_string()));
            }
            writeln!(w, "{}", fields.join("\t"))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty prediction file".into()))??;
        let cols: Vec<&str> = header.split('\t').collect();
        let count = |kind: &str| cols.iter().filter(|h| h.starts_with(kind)).count();
        let c = count("score_");
        let with_mask = count("mask_") > 0;
        if cols.first() != Some(&"image_id") || c == 0 || count("target_") != c || (with_mask && count("mask_") != c) {
            return Err(Error::Data(format!("unexpected prediction header: {header}")));
        }
        let (mut ids, mut scores, mut targets, mut mask) = (vec![], vec![], vec![], vec![]);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(Error::Data(format!("row {}: {} fields, header has {}", k + 1, f.len(), cols.len())));
            }
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::Data(format!("row {}: expected 0 or 1, got {s:?}", k + 1))),
            };
            ids.push(f[0].to_string());
            for s in &f[1..=c] {
                scores.push(s.parse::<f64>().map_err(|e| Error::Data(format!("row {}: {e}", k + 1)))?);
            }
            for s in &f[c + 1..=2 * c] {
                targets.push(flag(s)?);
            }
            if with_mask {
                for s in &f[2 * c + 1..] {
                    mask.push(flag(s)?);
                }
            }
        }
        Self::with_ids(c, ids, scores, targets, with_mask.then_some(mask))
    }
}

/// `score > threshold`, strictly.
pub fn binarize_all(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

/// Marks the `k` best-scoring labels of each row of `c` as positive, then
/// drops those at or below `filter` when one is given. Labels whose mask
/// flag is false are never chosen.
pub fn binarize_topk(scores: &[f64], c: usize, k: usize, filter: Option<f64>, mask: Option<&[bool]>) -> Vec<bool> {
    let mut out = vec![false; scores.len()];
    for (i, row) in scores.chunks(c).enumerate() {
        let mut labels: Vec<usize> = (0..c).filter(|&l| mask.map_or(true, |m| m[i * c + l])).collect();
        // Stable sort keeps ascending label order among equal scores.
        labels.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &l in labels.iter().take(k) {
            out[i * c + l] = filter.map_or(true, |t| row[l] > t);
        }
    }
    out
}

/// Un-interpolated average precision of one ranking: the mean over positives
/// of the precision at the positive's rank. `None` without positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// AP of every label over its unmasked entries.
pub fn per_class_ap(set: &PredictionSet) -> Vec<Option<f64>> {
    (0..set.c)
        .map(|l| {
            let rows: Vec<usize> = (0..set.n).filter(|&i| set.mask[set.at(i, l)]).collect();
            let s: Vec<f64> = rows.iter().map(|&i| set.scores[set.at(i, l)]).collect();
            let t: Vec<bool> = rows.iter().map(|&i| set.targets[set.at(i, l)]).collect();
            average_precision(&s, &t)
        })
        .collect()
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMicro {
    #[serde(rename = "P-C")]
    pub p_c: f64,
    #[serde(rename = "R-C")]
    pub r_c: f64,
    #[serde(rename = "F1-C")]
    pub f1_c: f64,
    #[serde(rename = "P-O")]
    pub p_o: f64,
    #[serde(rename = "R-O")]
    pub r_o: f64,
    #[serde(rename = "F1-O")]
    pub f1_o: f64,
}

/// Macro (per-class, then averaged) and micro (pooled counts) metrics.
/// F1-C is the mean of per-class F1 scores.
pub fn macro_micro(pred: &[bool], targets: &[bool], mask: &[bool], c: usize) -> Result<MacroMicro> {
    if c == 0 || pred.len() != targets.len() || pred.len() != mask.len() || pred.len() % c != 0 {
        return Err(Error::Data(format!(
            "predictions ({}), targets ({}) and mask ({}) must agree in rows of {c}",
            pred.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for k in (0..pred.len()).filter(|&k| mask[k]) {
        let l = k % c;
        match (pred[k], targets[k]) {
            (true, true) => tp[l] += 1,
            (true, false) => fp[l] += 1,
            (false, true) => fn_[l] += 1,
            (false, false) => {}
        }
    }
    let (mut p_c, mut r_c, mut f1_c) = (0.0, 0.0, 0.0);
    for l in 0..c {
        let p = ratio(tp[l], tp[l] + fp[l]);
        let r = ratio(tp[l], tp[l] + fn_[l]);
        p_c += p;
        r_c += r;
        f1_c += f1(p, r);
    }
    let cf = c as f64;
    let (t, f, m) = (tp.iter().sum::<usize>(), fp.iter().sum::<usize>(), fn_.iter().sum::<usize>());
    let p_o = ratio(t, t + f);
    let r_o = ratio(t, t + m);
    Ok(MacroMicro { p_c: p_c / cf, r_c: r_c / cf, f1_c: f1_c / cf, p_o, r_o, f1_o: f1(p_o, r_o) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    /// Every label scoring above 0.5.
    All,
    /// The `k` best labels per image, optionally dropping those not above
    /// `filter`.
    TopK { k: usize, filter: Option<f64> },
}

impl Protocol {
    pub const TOP3: Protocol = Protocol::TopK { k: 3, filter: None };
    pub const TOP3_FILTERED: Protocol = Protocol::TopK { k: 3, filter: Some(0.5) };

    pub fn binarize(&self, set: &PredictionSet) -> Vec<bool> {
        match *self {
            Protocol::All => binarize_all(&set.scores, 0.5),
            Protocol::TopK { k, filter } => binarize_topk(&set.scores, set.c, k, filter, Some(&set.mask)),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::All => write!(f, "all"),
            Protocol::TopK { k, filter: None } => write!(f, "top-{k}"),
            Protocol::TopK { k, filter: Some(t) } if *t == 0.5 => write!(f, "top-{k}-filtered"),
            Protocol::TopK { k, filter: Some(t) } => write!(f, "top-{k}-filtered-{t}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `all`, `top-K`, `top-K-filtered` (at 0.5) or `top-K-filtered-T`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Protocol::All);
        }
        let bad = || Error::Config(format!("unknown protocol {s:?}"));
        let rest = s.strip_prefix("top-").ok_or_else(bad)?;
        let (k, filter) = match rest.split_once("-filtered") {
            None => (rest, None),
            Some((k, "")) => (k, Some(0.5)),
            Some((k, t)) => (k, Some(t.strip_prefix('-').and_then(|t| t.parse().ok()).ok_or_else(bad)?)),
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        Ok(Protocol::TopK { k, filter })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub protocol: String,
    #[serde(flatten)]
    pub metrics: MacroMicro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `null` for labels without a positive example.
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub protocols: Vec<ProtocolMetrics>,
}

impl MetricsReport {
    pub fn protocol(&self, name: &str) -> Option<&MacroMicro> {
        self.protocols.iter().find(|p| p.protocol == name).map(|p| &p.metrics)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("mAP {:.4}", self.map);
        if !self.excluded_classes.is_empty() {
            s += &format!(" (classes without positives: {:?})", self.excluded_classes);
        }
        s += "\nprotocol          P-C     R-C     F1-C    P-O     R-O     F1-O\n";
        for p in &self.protocols {
            let m = &p.metrics;
            s += &format!(
                "{:<16}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                p.protocol, m.p_c, m.r_c, m.f1_c, m.p_o, m.r_o, m.f1_o
            );
        }
        s
    }
}

pub fn evaluate(set: &PredictionSet, protocols: &[Protocol]) -> Result<MetricsReport> {
    let aps = per_class_ap(set);
    let included: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if included.is_empty() { 0.0 } else { included.iter().sum::<f64>() / included.len() as f64 };
    let excluded_classes = (0..set.c).filter(|&l| aps[l].is_none()).collect();
    let protocols = protocols
        .iter()
        .map(|p| {
            Ok(ProtocolMetrics {
                protocol: p.to_string(),
                metrics: macro_micro(&p.binarize(set), &set.targets, &set.mask, set.c)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { map, per_class_ap: aps, excluded_classes, protocols })
}
