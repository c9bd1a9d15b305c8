//! Synthetic multi-label worlds with planted co-occurrence and spatial rules.
//!
//! Labels are drawn from a noisy-OR network: label `l` switches on with its
//! base rate `marginals[l]`, and every present parent `p` with an edge
//! `p -> l` independently switches it on with the edge probability. Each
//! present label is drawn as one glyph. A spatial rule between two present
//! labels is made to hold with its compliance probability and to fail
//! otherwise.

use std::collections::HashMap;

use log::warn;
use petgraph::algo::{is_cyclic_directed, toposort};
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
    Near,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Glyph {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Diameter range in pixels.
    pub size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub a: usize,
    pub b: usize,
    pub relation: Relation,
    pub compliance: f64,
}

impl Rule {
    /// Whether centres `a` and `b`, given as `(row, col)`, satisfy the rule.
    pub fn holds(&self, a: (f64, f64), b: (f64, f64), near_radius: f64) -> bool {
        match self.relation {
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Near => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= near_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_labels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
    /// Largest centre distance that counts as "near"; defaults to a quarter
    /// of the canvas width.
    #[serde(default)]
    pub near_radius: Option<f64>,
    /// Glyph pairs closer than this fraction of their summed radii are
    /// resampled.
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub marginals: Vec<f64>,
    pub glyphs: Vec<Glyph>,
    #[serde(default)]
    pub cooccurrence: Vec<Edge>,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

fn default_separation() -> f64 {
    0.8
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// Positions of the glyphs of one sample, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub targets: Vec<bool>,
    pub centers: Vec<Option<(f64, f64)>>,
    pub diameters: Vec<f64>,
    /// `false` when placement gave up and a rule ended up in the wrong state.
    pub satisfied: bool,
}

impl WorldSpec {
    /// Eight labels on a 32x32 canvas. Labels 4/5 and 6/7 share a glyph and
    /// differ only in where they sit relative to labels 0 and 1.
    pub fn desk_benchmark() -> Self {
        let glyph = |shape, color: [f64; 3], lo, hi| Glyph { shape, color, size: [lo, hi] };
        let rule = |a, b, relation| Rule { a, b, relation, compliance: 0.9 };
        let edge = |from, to, prob| Edge { from, to, prob };
        WorldSpec {
            num_labels: 8,
            height: 32,
            width: 32,
            noise: 0.05,
            seed: 7,
            background: [0.0; 3],
            near_radius: None,
            min_separation: default_separation(),
            split: default_split(),
            marginals: vec![0.35, 0.35, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2],
            glyphs: vec![
                glyph(Shape::Bar, [0.9, 0.9, 0.9], 7.0, 9.0),
                glyph(Shape::Square, [0.9, 0.2, 0.2], 6.0, 9.0),
                glyph(Shape::Triangle, [0.2, 0.8, 0.2], 7.0, 10.0),
                glyph(Shape::Disk, [0.25, 0.35, 0.95], 6.0, 9.0),
                glyph(Shape::Disk, [0.9, 0.8, 0.1], 5.0, 7.0),
                glyph(Shape::Disk, [0.9, 0.8, 0.1], 5.0, 7.0),
                glyph(Shape::Square, [0.9, 0.2, 0.9], 5.0, 7.0),
                glyph(Shape::Square, [0.9, 0.2, 0.9], 5.0, 7.0),
            ],
            cooccurrence: vec![edge(4, 0, 0.8), edge(5, 0, 0.8), edge(6, 1, 0.8), edge(7, 1, 0.8), edge(2, 3, 0.3)],
            rules: vec![
                rule(4, 0, Relation::Above),
                rule(5, 0, Relation::Below),
                rule(6, 1, Relation::LeftOf),
                rule(7, 1, Relation::RightOf),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let world: WorldSpec = toml::from_str(text).map_err(|e| Error::Config(format!("world spec: {e}")))?;
        world.validate()?;
        Ok(world)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world spec serializes")
    }

    pub fn near_radius(&self) -> f64 {
        self.near_radius.unwrap_or(self.width as f64 / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_labels;
        let bad = |msg: String| Err(Error::Config(msg));
        if c == 0 || self.height == 0 || self.width == 0 {
            return bad("world needs at least one label and a nonempty canvas".into());
        }
        if self.marginals.len() != c || self.glyphs.len() != c {
            return bad(format!(
                "{c} labels but {} marginals and {} glyphs",
                self.marginals.len(),
                self.glyphs.len()
            ));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if let Some(p) = self.marginals.iter().find(|&&p| !prob(p)) {
            return bad(format!("marginal {p} outside [0, 1]"));
        }
        if !(self.noise >= 0.0) || !(self.min_separation >= 0.0) || self.near_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("noise, separation and near radius must be nonnegative".into());
        }
        if self.split.iter().any(|&f| !(f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be nonnegative and sum to 1", self.split));
        }
        for (l, g) in self.glyphs.iter().enumerate() {
            let (lo, hi) = (g.size[0], g.size[1]);
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("label {l}: glyph size range {:?} is empty", g.size));
            }
            let (hh, hw) = half_extent(g.shape, hi);
            if 2.0 * hh > self.height as f64 || 2.0 * hw > self.width as f64 {
                return bad(format!("label {l}: glyph of size {hi} does not fit the canvas"));
            }
        }
        for e in &self.cooccurrence {
            if e.from >= c || e.to >= c || e.from == e.to || !prob(e.prob) {
                return bad(format!("bad co-occurrence edge {e:?}"));
            }
        }
        self.label_order()?;
        for r in &self.rules {
            if r.a >= c || r.b >= c || r.a == r.b || !prob(r.compliance) {
                return bad(format!("bad spatial rule {r:?}"));
            }
        }
        self.check_hard_rules()
    }

    /// Labels in an order where every co-occurrence parent precedes its
    /// children.
    fn label_order(&self) -> Result<Vec<usize>> {
        let mut g = DiGraph::<usize, ()>::new();
        let nodes: Vec<_> = (0..self.num_labels).map(|l| g.add_node(l)).collect();
        for e in &self.cooccurrence {
            g.add_edge(nodes[e.from], nodes[e.to], ());
        }
        toposort(&g, None)
            .map(|order| order.into_iter().map(|n| g[n]).collect())
            .map_err(|c| Error::Config(format!("co-occurrence graph has a cycle through label {}", g[c.node_id()])))
    }

    /// Rules that must always hold cannot order labels cyclically.
    fn check_hard_rules(&self) -> Result<()> {
        let mut vertical = DiGraph::<(), ()>::new();
        let mut horizontal = DiGraph::<(), ()>::new();
        let vn: Vec<_> = (0..self.num_labels).map(|_| vertical.add_node(())).collect();
        let hn: Vec<_> = (0..self.num_labels).map(|_| horizontal.add_node(())).collect();
        for r in self.rules.iter().filter(|r| r.compliance >= 1.0) {
            match r.relation {
                Relation::Above => vertical.add_edge(vn[r.a], vn[r.b], ()),
                Relation::Below => vertical.add_edge(vn[r.b], vn[r.a], ()),
                Relation::LeftOf => horizontal.add_edge(hn[r.a], hn[r.b], ()),
                Relation::RightOf => horizontal.add_edge(hn[r.b], hn[r.a], ()),
                Relation::Near => continue,
            };
        }
        if is_cyclic_directed(&vertical) || is_cyclic_directed(&horizontal) {
            return Err(Error::Config("spatial rules with compliance 1 form a cycle and cannot all hold".into()));
        }
        Ok(())
    }

    /// Exact label marginals implied by the noisy-OR network, by enumeration.
    pub fn expected_marginals(&self) -> Result<Vec<f64>> {
        let c = self.num_labels;
        if c > 20 {
            return Err(Error::Config(format!("exact marginals need at most 20 labels, world has {c}")));
        }
        let order = self.label_order()?;
        let parents = self.parents();
        let mut out = vec![0.0; c];
        for bits in 0u32..(1 << c) {
            let on = |l: usize| bits >> l & 1 == 1;
            let mut p = 1.0;
            for &l in &order {
                let q = self.activation(l, &parents[l], &on);
                p *= if on(l) { q } else { 1.0 - q };
                if p == 0.0 {
                    break;
                }
            }
            for (l, o) in out.iter_mut().enumerate() {
                if on(l) {
                    *o += p;
                }
            }
        }
        Ok(out)
    }

    fn parents(&self) -> Vec<Vec<(usize, f64)>> {
        let mut parents = vec![Vec::new(); self.num_labels];
        for e in &self.cooccurrence {
            parents[e.to].push((e.from, e.prob));
        }
        parents
    }

    fn activation(&self, l: usize, parents: &[(usize, f64)], on: &dyn Fn(usize) -> bool) -> f64 {
        let off = parents
            .iter()
            .filter(|(p, _)| on(*p))
            .fold(1.0 - self.marginals[l], |acc, (_, w)| acc * (1.0 - w));
        1.0 - off
    }

    fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Draws the label set and glyph positions of sample `index`.
    pub fn layout(&self, index: usize) -> Result<Layout> {
        let mut rng = self.sample_rng(index);
        self.layout_with(&mut rng, &self.label_order()?, &self.parents())
    }

    fn layout_with(&self, rng: &mut ChaCha8Rng, order: &[usize], parents: &[Vec<(usize, f64)>]) -> Result<Layout> {
        let c = self.num_labels;
        let mut targets = vec![false; c];
        for &l in order {
            let q = self.activation(l, &parents[l], &|p| targets[p]);
            targets[l] = rng.gen::<f64>() < q;
        }
        let diameters: Vec<f64> = self
            .glyphs
            .iter()
            .map(|g| if g.size[0] == g.size[1] { g.size[0] } else { rng.gen_range(g.size[0]..=g.size[1]) })
            .collect();
        // Decide up front which active rules hold in this sample.
        let wanted: Vec<(usize, bool)> = self
            .rules
            .iter()
            .enumerate()
            .filter(|(_, r)| targets[r.a] && targets[r.b])
            .map(|(k, r)| (k, rng.gen::<f64>() < r.compliance))
            .collect();

        let near = self.near_radius();
        let mut best: Option<(usize, Vec<Option<(f64, f64)>>)> = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let centers: Vec<Option<(f64, f64)>> = (0..c)
                .map(|l| {
                    targets[l].then(|| {
                        let (hh, hw) = half_extent(self.glyphs[l].shape, diameters[l]);
                        (
                            uniform_in(rng, hh, self.height as f64 - hh),
                            uniform_in(rng, hw, self.width as f64 - hw),
                        )
                    })
                })
                .collect();
            let rule_misses = wanted
                .iter()
                .filter(|&&(k, want)| {
                    let r = &self.rules[k];
                    r.holds(centers[r.a].unwrap(), centers[r.b].unwrap(), near) != want
                })
                .count();
            let mut overlaps = 0;
            for a in 0..c {
                for b in a + 1..c {
                    if let (Some(p), Some(q)) = (centers[a], centers[b]) {
                        let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                        if d < self.min_separation * (diameters[a] + diameters[b]) / 2.0 {
                            overlaps += 1;
                        }
                    }
                }
            }
            let score = rule_misses * 1000 + overlaps;
            if best.as_ref().map_or(true, |(s, _)| score < *s) {
                best = Some((score, centers));
            }
            if score == 0 {
                break;
            }
        }
        let (score, centers) = best.expect("at least one attempt");
        let satisfied = score < 1000;
        if !satisfied {
            warn!("spatial rules relaxed after {PLACEMENT_ATTEMPTS} placement attempts");
        }
        Ok(Layout { targets, centers, diameters, satisfied })
    }

    /// Renders a layout, adding pixel noise from `rng`.
    pub fn render(&self, layout: &Layout, rng: &mut ChaCha8Rng) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut img = Tensor::from_fn(&[h, w, 3], |k| self.background[k % 3]);
        for l in 0..self.num_labels {
            if let Some(center) = layout.centers[l] {
                draw_glyph(&mut img, &self.glyphs[l], layout.diameters[l], center);
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("finite noise");
            for v in img.data_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn sample(&self, index: usize, split: Split) -> Result<Sample> {
        let mut rng = self.sample_rng(index);
        let layout = self.layout_with(&mut rng, &self.label_order()?, &self.parents())?;
        let image = self.render(&layout, &mut rng);
        Ok(Sample {
            image,
            mask: vec![true; self.num_labels],
            targets: layout.targets,
            centers: layout.centers,
            split,
        })
    }

    /// `n` samples split by the world's split fractions.
    pub fn generate(&self, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("cannot generate an empty dataset".into()));
        }
        let train = (n as f64 * self.split[0]).round() as usize;
        let val = ((n as f64 * self.split[1]).round() as usize).min(n - train);
        self.generate_counts(train, val, n - train - val)
    }

    /// Explicit split sizes; samples are laid out train, then val, then test.
    pub fn generate_counts(&self, train: usize, val: usize, test: usize) -> Result<Dataset> {
        self.validate()?;
        let splits = std::iter::repeat(Split::Train)
            .take(train)
            .chain(std::iter::repeat(Split::Val).take(val))
            .chain(std::iter::repeat(Split::Test).take(test));
        let samples = splits.enumerate().map(|(i, s)| self.sample(i, s)).collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Config("cannot generate an empty dataset".into()));
        }
        Ok(Dataset { image_h: self.height, image_w: self.width, image_c: 3, num_labels: self.num_labels, samples })
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        (lo + hi) / 2.0
    }
}

/// Half height and half width of a glyph of the given diameter.
fn half_extent(shape: Shape, diameter: f64) -> (f64, f64) {
    let r = diameter / 2.0;
    match shape {
        Shape::Bar => (0.4 * r, 2.5 * r),
        _ => (r, r),
    }
}

fn inside(shape: Shape, r: f64, dy: f64, dx: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // Apex up: the half-width grows linearly from 0 at the top to r at the base.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Bar => dx.abs() <= 2.5 * r && dy.abs() <= 0.4 * r,
    }
}

/// Composites one glyph with supersampled coverage for anti-aliasing.
fn draw_glyph(img: &mut Tensor, glyph: &Glyph, diameter: f64, (cy, cx): (f64, f64)) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = diameter / 2.0;
    let (hh, hw) = half_extent(glyph.shape, diameter);
    let rows = (cy - hh).floor().max(0.0) as usize..((cy + hh).ceil() as usize).min(h);
    let cols = (cx - hw).floor().max(0.0) as usize..((cx + hw).ceil() as usize).min(w);
    let step = 1.0 / SUPERSAMPLE as f64;
    for i in rows {
        for j in cols.clone() {
            let mut hits = 0;
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let y = i as f64 + (si as f64 + 0.5) * step;
                    let x = j as f64 + (sj as f64 + 0.5) * step;
                    hits += inside(glyph.shape, r, y - cy, x - cx) as usize;
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let d = img.data_mut();
            for ch in 0..3 {
                let v = &mut d[(i * w + j) * 3 + ch];
                *v = (1.0 - cover) * *v + cover * glyph.color[ch];
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RuleStats {
    pub rule: usize,
    pub cooccurring: usize,
    pub complied: usize,
    pub rate: f64,
    pub target: f64,
}

/// Empirical statistics of a world on a probe draw.
#[derive(Clone, Debug, Serialize)]
pub struct WorldReport {
    pub probe_size: usize,
    pub expected_marginals: Vec<f64>,
    pub marginals: Vec<f64>,
    /// Fraction of samples where both labels are present.
    pub cooccurrence: Vec<Vec<f64>>,
    pub rules: Vec<RuleStats>,
    pub relaxed_samples: usize,
    /// Statistics more than three standard errors from their targets.
    pub flags: Vec<String>,
}

impl WorldReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("probe of {} samples\nlabel  expected  realized\n", self.probe_size);
        for (l, (e, r)) in self.expected_marginals.iter().zip(&self.marginals).enumerate() {
            s += &format!("{l:>5}  {e:>8.4}  {r:>8.4}\n");
        }
        s += "rule  pairs  rate    target\n";
        for r in &self.rules {
            s += &format!("{:>4}  {:>5}  {:.4}  {:.4}\n", r.rule, r.cooccurring, r.rate, r.target);
        }
        s += &format!("relaxed placements: {}\n", self.relaxed_samples);
        for f in &self.flags {
            s += &format!("FLAG {f}\n");
        }
        s
    }
}

/// Draws `probe` layouts (indices past any realistic dataset, so the probe
/// never coincides with generated samples) and summarizes them.
pub fn validate_world(world: &WorldSpec, probe: usize) -> Result<WorldReport> {
    world.validate()?;
    let c = world.num_labels;
    let order = world.label_order()?;
    let parents = world.parents();
    let near = world.near_radius();
    let mut counts = vec![vec![0usize; c]; c];
    let mut rule_counts: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut relaxed = 0;
    for i in 0..probe {
        let mut rng = world.sample_rng(i + (1 << 40));
        let layout = world.layout_with(&mut rng, &order, &parents)?;
        relaxed += (!layout.satisfied) as usize;
        for a in 0..c {
            for b in 0..c {
                counts[a][b] += (layout.targets[a] && layout.targets[b]) as usize;
            }
        }
        for (k, r) in world.rules.iter().enumerate() {
            if let (Some(p), Some(q)) = (layout.centers[r.a], layout.centers[r.b]) {
                let e = rule_counts.entry(k).or_default();
                e.0 += 1;
                e.1 += r.holds(p, q, near) as usize;
            }
        }
    }
    let n = probe.max(1) as f64;
    let expected = world.expected_marginals().unwrap_or_default();
    let marginals: Vec<f64> = (0..c).map(|l| counts[l][l] as f64 / n).collect();
    let mut flags = Vec::new();
    for (l, (&e, &m)) in expected.iter().zip(&marginals).enumerate() {
        let se = (e * (1.0 - e) / n).sqrt();
        if (m - e).abs() > 3.0 * se + 1e-12 {
            flags.push(format!("label {l}: marginal {m:.4} vs expected {e:.4}"));
        }
    }
    let rules: Vec<RuleStats> = world
        .rules
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (pairs, ok) = rule_counts.get(&k).copied().unwrap_or((0, 0));
            let rate = if pairs > 0 { ok as f64 / pairs as f64 } else { 0.0 };
            let se = (r.compliance * (1.0 - r.compliance) / pairs.max(1) as f64).sqrt();
            if pairs > 0 && (rate - r.compliance).abs() > 3.0 * se + 1e-12 {
                flags.push(format!("rule {k}: compliance {rate:.4} vs target {:.4}", r.compliance));
            }
            RuleStats { rule: k, cooccurring: pairs, complied: ok, rate, target: r.compliance }
        })
        .collect();
    Ok(WorldReport {
        probe_size: probe,
        expected_marginals: expected,
        marginals,
        cooccurrence: counts.iter().map(|row| row.iter().map(|&v| v as f64 / n).collect()).collect(),
        rules,
        relaxed_samples: relaxed,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            num_labels: 3,
            height: 24,
            width: 24,
            noise: 0.0,
            seed: 1,
            background: [0.0; 3],
            near_radius: None,
            min_separation: 0.8,
            split: default_split(),
            marginals: vec![0.5, 0.4, 0.3],
            glyphs: vec![
                Glyph { shape: Shape::Disk, color: [1.0, 0.0, 0.0], size: [5.0, 7.0] },
                Glyph { shape: Shape::Square, color: [0.0, 1.0, 0.0], size: [5.0, 7.0] },
                Glyph { shape: Shape::Triangle, color: [0.0, 0.0, 1.0], size: [5.0, 7.0] },
            ],
            cooccurrence: vec![],
            rules: vec![],
        }
    }

    #[test]
    fn desk_world_is_valid() {
        let w = WorldSpec::desk_benchmark();
        w.validate().unwrap();
        assert_eq!(WorldSpec::from_toml(&w.to_toml()).unwrap(), w);
        let m = w.expected_marginals().unwrap();
        assert!((m[4] - 0.2).abs() < 1e-12);
        // Label 0 fires on its own or via either disk parent.
        let want0 = 1.0 - 0.65 * (1.0 - 0.2 * 0.8) * (1.0 - 0.2 * 0.8);
        assert!((m[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn cycles_are_rejected() {
        let mut w = small();
        w.cooccurrence = vec![Edge { from: 0, to: 1, prob: 0.5 }, Edge { from: 1, to: 0, prob: 0.5 }];
        assert!(matches!(w.validate(), Err(Error::Config(_))));

        let mut w = small();
        let hard = |a, b, relation| Rule { a, b, relation, compliance: 1.0 };
        w.rules = vec![hard(0, 1, Relation::Above), hard(1, 2, Relation::Above), hard(2, 0, Relation::Above)];
        let err = w.validate().unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        w.rules[2] = hard(0, 2, Relation::Below);
        assert!(w.validate().is_err());
        w.rules[2].compliance = 0.9;
        assert!(w.validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = small();
        let a = w.generate(20).unwrap();
        let b = w.generate(20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Train).len(), 14);
        assert_eq!(a.indices(Split::Val).len(), 2);
        assert_eq!(a.indices(Split::Test).len(), 4);
    }

    #[test]
    fn targets_match_drawn_glyphs() {
        let w = small();
        let ds = w.generate(40).unwrap();
        for s in &ds.samples {
            for l in 0..3 {
                assert_eq!(s.targets[l], s.centers[l].is_some());
                if let Some((r, c)) = s.centers[l] {
                    assert!(r > 0.0 && r < 24.0 && c > 0.0 && c < 24.0);
                    let (i, j) = (r as usize, c as usize);
                    assert!(s.image.at3(i, j, l) > 0.5, "glyph {l} missing at its centre");
                }
            }
            let lit = s.image.data().iter().any(|&v| v > 0.0);
            assert_eq!(lit, s.num_present() > 0);
        }
    }

    #[test]
    fn empty_world_draws_background() {
        let mut w = small();
        w.marginals = vec![0.0; 3];
        w.background = [0.2, 0.3, 0.4];
        let ds = w.generate(10).unwrap();
        for s in &ds.samples {
            assert_eq!(s.num_present(), 0);
            assert!(s.image.data().chunks(3).all(|p| p == [0.2, 0.3, 0.4]));
        }
    }

    #[test]
    fn anti_aliased_edges() {
        let mut img = Tensor::zeros(&[9, 9, 3]);
        let g = Glyph { shape: Shape::Disk, color: [1.0; 3], size: [6.0, 6.0] };
        draw_glyph(&mut img, &g, 6.0, (4.5, 4.5));
        assert_eq!(img.at3(4, 4, 0), 1.0);
        assert_eq!(img.at3(0, 0, 0), 0.0);
        assert!(img.data().iter().any(|&v| v > 0.0 && v < 1.0));
    }
}
