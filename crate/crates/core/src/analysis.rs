//! Post-training analyses: per-layer distill–intact ratios, prior ranking
//! by mean reciprocal rank, and export of the strongest gated connections.

use std::fmt;
use std::str::FromStr;

use crate::data::{Cohort, PriorSet, Split};
use crate::error::{Error, Result};
use crate::model::BrainTap;
use crate::tensor::Tensor;

/// Distill–intact ratios of one layer: the fraction of each modality's
/// tokens replaced by cross-modal content.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioRow {
    pub layer: usize,
    /// γ, mixing weight on the FC stream.
    pub fc: f64,
    /// β, mixing weight on the SC stream.
    pub sc: f64,
}

pub fn report_ratios(model: &BrainTap) -> Vec<RatioRow> {
    model
        .ratios()
        .into_iter()
        .enumerate()
        .map(|(layer, (beta, gamma))| RatioRow {
            layer: layer + 1,
            fc: gamma,
            sc: beta,
        })
        .collect()
}

pub fn ratios_csv(rows: &[RatioRow]) -> String {
    let mut out = String::from("layer,fc,sc\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.layer, r.fc, r.sc));
    }
    out
}

/// How a prior's gate entries are reduced to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregator {
    #[default]
    Mean,
    Max,
    /// Mean of the largest tenth (rounded up) of the entries.
    TopDecile,
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "top-decile" => Ok(Self::TopDecile),
            other => Err(Error::Usage(format!(
                "unknown aggregator '{other}' (expected mean, max or top-decile)"
            ))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::TopDecile => "top-decile",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MrrOptions {
    pub aggregator: Aggregator,
    /// Rank the free region alongside the expert priors.
    pub include_free: bool,
}

/// Upper-triangle gate values inside `mask`.
fn masked_upper(gate: &Tensor, mask: &Tensor) -> Vec<f64> {
    let n = gate.rows();
    let mut v = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if mask.get(i, j) == 1.0 {
                v.push(gate.get(i, j));
            }
        }
    }
    v
}

/// Score of one region, `None` when its mask has no off-diagonal entry.
pub fn region_score(gate: &Tensor, mask: &Tensor, aggregator: Aggregator) -> Option<f64> {
    let mut v = masked_upper(gate, mask);
    if v.is_empty() {
        return None;
    }
    Some(match aggregator {
        Aggregator::Mean => v.iter().sum::<f64>() / v.len() as f64,
        Aggregator::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::TopDecile => {
            v.sort_by(|a, b| b.total_cmp(a));
            let k = v.len().div_ceil(10);
            v[..k].iter().sum::<f64>() / k as f64
        }
    })
}

/// Reciprocal rank of each score when ranked descending; equal scores are
/// ordered by index, so the ranks are always a permutation of `1..=K`.
pub fn reciprocal_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rr = vec![0.0; scores.len()];
    for (rank, &k) in order.iter().enumerate() {
        rr[k] = 1.0 / (rank + 1) as f64;
    }
    rr
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrrReport {
    /// Ranked regions, in prior order (free last when included).
    pub names: Vec<String>,
    pub scores: Vec<f64>,
    /// Priors left out because their mask is empty.
    pub excluded: Vec<String>,
    pub n_subjects: usize,
    pub task: String,
}

impl MrrReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.scores[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("prior,mrr,n_subjects,task\n");
        for (n, s) in self.names.iter().zip(&self.scores) {
            out.push_str(&format!("{n},{s:.6},{},{}\n", self.n_subjects, self.task));
        }
        out
    }
}

/// Mean reciprocal rank of regions over a list of per-subject gates.
pub fn mrr_from_gates(
    gates: &[Tensor],
    priors: &PriorSet,
    options: MrrOptions,
    task: &str,
) -> Result<MrrReport> {
    if gates.is_empty() {
        return Err(Error::EmptySplit("no subjects to rank priors on".into()));
    }
    let mut regions: Vec<(&str, &Tensor)> = priors
        .names
        .iter()
        .map(String::as_str)
        .zip(&priors.masks)
        .collect();
    if options.include_free {
        regions.push(("free", &priors.free_mask));
    }
    let mut excluded = Vec::new();
    regions.retain(|(name, mask)| {
        let empty = masked_upper(mask, mask).is_empty();
        if empty {
            log::warn!("prior '{name}' has an empty mask and is excluded from ranking");
            excluded.push(name.to_string());
        }
        !empty
    });
    if regions.is_empty() {
        return Err(Error::Parameter("no prior with a non-empty mask".into()));
    }

    let mut sums = vec![0.0; regions.len()];
    for gate in gates {
        let scores: Vec<f64> = regions
            .iter()
            .map(|(_, m)| region_score(gate, m, options.aggregator).expect("non-empty mask"))
            .collect();
        for (s, rr) in sums.iter_mut().zip(reciprocal_ranks(&scores)) {
            *s += rr;
        }
    }
    Ok(MrrReport {
        names: regions.iter().map(|(n, _)| n.to_string()).collect(),
        scores: sums.iter().map(|s| s / gates.len() as f64).collect(),
        excluded,
        n_subjects: gates.len(),
        task: task.to_string(),
    })
}

/// Gates of every test subject, in cohort order.
pub fn test_gates(model: &BrainTap, cohort: &Cohort) -> Result<Vec<Tensor>> {
    if !model.config.spf_enabled() {
        return Err(Error::Usage(
            "model was trained without prior fusion; it has no gate".into(),
        ));
    }
    let test = cohort.split(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    test.iter()
        .map(|s| {
            model
                .gate_matrix(s, &cohort.priors)
                .map(|g| g.expect("prior fusion enabled").gate)
        })
        .collect()
}

/// Ranks priors by their gate on every test subject and averages the
/// reciprocal ranks.
pub fn analyze_mrr(model: &BrainTap, cohort: &Cohort, options: MrrOptions) -> Result<MrrReport> {
    if cohort.priors.is_empty() {
        return Err(Error::Parameter("cohort has no priors".into()));
    }
    let gates = test_gates(model, cohort)?;
    mrr_from_gates(&gates, &cohort.priors, options, &cohort.manifest.task)
}

/// One upper-triangle connection of the gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub gate: f64,
    /// Containing priors joined by `+`, or `free`.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub edges: Vec<Edge>,
}

impl EdgeList {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("roi_i,roi_j,gate,prior\n");
        for e in &self.edges {
            out.push_str(&format!("{},{},{:.8},{}\n", e.i, e.j, e.gate, e.label));
        }
        out
    }
}

/// Number of edges kept out of `n_rois · (n_rois − 1) / 2` at `fraction`.
pub fn top_edge_count(n_rois: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let total = n_rois * n_rois.saturating_sub(1) / 2;
    // guard against products like 0.05 · 190 landing just above an integer
    let k = (fraction * total as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(total))
}

/// The strongest upper-triangle entries of `gate`, sorted descending with
/// ties in row-major order.
pub fn top_edges(gate: &Tensor, priors: &PriorSet, fraction: f64) -> Result<EdgeList> {
    let n = gate.rows();
    let k = top_edge_count(n, fraction)?;
    let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            all.push((i, j, gate.get(i, j)));
        }
    }
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let edges = all
        .into_iter()
        .take(k)
        .map(|(i, j, g)| {
            let names = priors.membership(i, j);
            Edge {
                i,
                j,
                gate: g,
                label: if names.is_empty() {
                    "free".to_string()
                } else {
                    names.join("+")
                },
            }
        })
        .collect();
    Ok(EdgeList { edges })
}

/// Element-wise mean of equally shaped matrices, summed in list order.
pub fn mean_matrix(ms: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(ms[0].rows(), ms[0].cols());
    for m in ms {
        for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / ms.len() as f64;
    acc.map(|v| v * inv)
}

/// Top connections of the gate averaged over test subjects.
pub fn export_top_edges(model: &BrainTap, cohort: &Cohort, fraction: f64) -> Result<EdgeList> {
    top_edge_count(cohort.n_rois(), fraction)?;
    let gates = test_gates(model, cohort)?;
    top_edges(&mean_matrix(&gates), &cohort.priors, fraction)
}

/// Fraction of `edges` whose label includes `prior`, divided by the fraction
/// of all upper-triangle edges inside that prior.
pub fn enrichment(edges: &EdgeList, priors: &PriorSet, prior: &str) -> Result<f64> {
    let k = priors
        .names
        .iter()
        .position(|n| n == prior)
        .ok_or_else(|| Error::Parameter(format!("unknown prior '{prior}'")))?;
    let n = priors.n_rois();
    let base =
        masked_upper(&priors.masks[k], &priors.masks[k]).len() as f64 / (n * (n - 1) / 2) as f64;
    if base == 0.0 || edges.edges.is_empty() {
        return Err(Error::Parameter(format!("prior '{prior}' has no edges")));
    }
    let hits = edges
        .edges
        .iter()
        .filter(|e| e.label.split('+').any(|l| l == prior))
        .count() as f64;
    Ok(hits / edges.edges.len() as f64 / base)
}
