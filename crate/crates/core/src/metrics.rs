//! Evaluation: ROC/AUC, bootstrap intervals, Youden operating threshold,
//! stratified AUC, logistic-regression covariate importance and
//! attention-by-group summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::milnet::SignedTile;
use crate::numkit::{derive_seed, Tensor2D};

/// Slide scores with labels and optional stratification tags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Stratum key -> one tag per slide.
    #[serde(default)]
    pub strata: BTreeMap<String, Vec<String>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(ScoredSet {
            scores,
            labels,
            strata: BTreeMap::new(),
        })
    }

    pub fn with_stratum(mut self, key: &str, tags: Vec<String>) -> Result<Self> {
        if tags.len() != self.scores.len() {
            return Err(Error::Dimension(format!(
                "stratum {key} has {} tags for {} slides",
                tags.len(),
                self.scores.len()
            )));
        }
        self.strata.insert(key.to_string(), tags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    fn subset(&self, idx: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            strata: BTreeMap::new(),
        }
    }
}

/// Area under the ROC curve via the rank-sum statistic; ties count ½.
pub fn auc(scored: &ScoredSet) -> Result<f64> {
    auc_raw(&scored.scores, &scored.labels)
}

pub(crate) fn auc_raw(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based; sums of half-integers stay exact in f64
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = n_pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Empirical,
    Loaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// ROC curve with strictly decreasing thresholds, from `(se=0, sp=1)` to
/// `(se=1, sp=0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub provenance: Provenance,
}

impl RocCurve {
    /// Validates and wraps externally supplied points.
    pub fn from_points(points: Vec<RocPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateCurve);
        }
        for p in &points {
            for v in [p.sensitivity, p.specificity] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!("ROC value {v} outside [0, 1]")));
                }
            }
            if p.threshold.is_nan() {
                return Err(Error::Format("NaN threshold".into()));
            }
        }
        for w in points.windows(2) {
            if w[1].threshold >= w[0].threshold {
                return Err(Error::Format("thresholds must be strictly decreasing".into()));
            }
            if w[1].sensitivity < w[0].sensitivity || w[1].specificity > w[0].specificity {
                return Err(Error::Format(
                    "sensitivity must not decrease (and specificity not increase) as the threshold decreases"
                        .into(),
                ));
            }
        }
        let first = points[0];
        let last = points[points.len() - 1];
        if first.sensitivity != 0.0 || first.specificity != 1.0 {
            return Err(Error::Format("curve must start at (se=0, sp=1)".into()));
        }
        if last.sensitivity != 1.0 || last.specificity != 0.0 {
            return Err(Error::Format("curve must end at (se=1, sp=0)".into()));
        }
        Ok(RocCurve {
            points,
            provenance: Provenance::Loaded,
        })
    }

    /// Trapezoidal area in (1 − sp, se) space.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let dx = (1.0 - w[1].specificity) - (1.0 - w[0].specificity);
                dx * (w[0].sensitivity + w[1].sensitivity) / 2.0
            })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "sensitivity", "specificity"])?;
        for p in &self.points {
            w.write_record([
                format_float(p.threshold),
                format_float(p.sensitivity),
                format_float(p.specificity),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["threshold", "sensitivity", "specificity"] {
            return Err(Error::Format(
                "ROC CSV header must be threshold,sensitivity,specificity".into(),
            ));
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad ROC value {:?}: {e}", &rec[i])))
            };
            points.push(RocPoint {
                threshold: parse(0)?,
                sensitivity: parse(1)?,
                specificity: parse(2)?,
            });
        }
        RocCurve::from_points(points)
    }
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Empirical ROC: one point per distinct score, predicting positive when
/// `score >= threshold`, preceded by a `+inf` threshold.
pub fn roc(scored: &ScoredSet) -> Result<RocCurve> {
    let (n_pos, n_neg) = scored.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored.scores[b].total_cmp(&scored.scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        specificity: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scored.scores[order[i]];
        while i < order.len() && scored.scores[order[i]] == t {
            if scored.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / n_pos as f64,
            specificity: (n_neg - fp) as f64 / n_neg as f64,
        });
    }
    Ok(RocCurve {
        points,
        provenance: Provenance::Empirical,
    })
}

/// Percentile interval of `values` (linear interpolation between order
/// statistics). `values` must be sorted.
fn percentile_sorted(values: &[f64], q: f64) -> f64 {
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Slide-level percentile bootstrap interval of the AUC. Single-class
/// resamples are redrawn.
pub fn bootstrap_ci(scored: &ScoredSet, n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if n_boot < 100 {
        return Err(Error::InvalidArgument(format!("n_boot must be >= 100, got {n_boot}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    let (n_pos, n_neg) = scored.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let n = scored.len();
    let mut aucs: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64]));
            let mut scores = vec![0.0; n];
            let mut labels = vec![0u8; n];
            loop {
                for j in 0..n {
                    let i = rng.random_range(0..n);
                    scores[j] = scored.scores[i];
                    labels[j] = scored.labels[i];
                }
                if let Ok(a) = auc_raw(&scores, &labels) {
                    return a;
                }
            }
        })
        .collect();
    aucs.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((
        percentile_sorted(&aucs, alpha / 2.0),
        percentile_sorted(&aucs, 1.0 - alpha / 2.0),
    ))
}

/// Threshold maximising `se + sp − 1`; ties go to the higher specificity,
/// then to the earlier point.
pub fn youden_threshold(roc: &RocCurve) -> Result<f64> {
    Ok(youden_point(roc)?.threshold)
}

pub fn youden_point(roc: &RocCurve) -> Result<RocPoint> {
    if roc.points.len() < 2 {
        return Err(Error::DegenerateCurve);
    }
    let mut best = roc.points[0];
    let mut best_j = best.sensitivity + best.specificity - 1.0;
    for p in &roc.points[1..] {
        let j = p.sensitivity + p.specificity - 1.0;
        if j > best_j || (j == best_j && p.specificity > best.specificity) {
            best = *p;
            best_j = j;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumAuc {
    pub group: String,
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `None` when the group lacks one of the classes.
    pub auc: Option<f64>,
    /// Fewer than the configured minimum number of slides.
    pub small: bool,
}

/// AUC per stratum value, groups in lexicographic order.
pub fn stratified_auc(scored: &ScoredSet, key: &str, min_size: usize) -> Result<Vec<StratumAuc>> {
    let tags = scored
        .strata
        .get(key)
        .ok_or_else(|| Error::UnknownKey(format!("stratum {key}")))?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        groups.entry(t.as_str()).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(g, idx)| {
            let sub = scored.subset(&idx);
            let (n_pos, n_neg) = sub.class_counts();
            StratumAuc {
                group: g.to_string(),
                n: idx.len(),
                n_pos,
                n_neg,
                auc: auc(&sub).ok(),
                small: idx.len() < min_size,
            }
        })
        .collect())
}

pub fn write_strata_csv<W: Write>(rows: &[StratumAuc], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "n", "n_pos", "n_neg", "auc", "small"])?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.n.to_string(),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            r.auc.map_or("degenerate".to_string(), format_float),
            r.small.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: Coefficient,
    pub coefficients: Vec<Coefficient>,
    pub iterations: usize,
    pub converged: bool,
    /// Some coefficient exceeded the divergence bound (quasi-separation).
    pub separation: bool,
    /// The ridge fallback was used.
    pub ridge: bool,
}

const SEPARATION_BOUND: f64 = 15.0;
const RIDGE_LAMBDA: f64 = 1e-6;
const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-10;

fn column_name(j: usize) -> String {
    if j == 0 {
        "intercept".to_string()
    } else {
        format!("x{}", j - 1)
    }
}

/// In-place Cholesky factorisation of a symmetric positive definite matrix
/// (lower triangle). Fails with the offending column when a pivot vanishes.
fn cholesky(a: &mut [Vec<f64>], names: &dyn Fn(usize) -> String) -> Result<()> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if !(d > 1e-13 * scale) {
            return Err(Error::Singular(names(j)));
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i][k] * y[k];
        }
        y[i] /= l[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k][i] * y[k];
        }
        y[i] /= l[i][i];
    }
    y
}

/// Maximum-likelihood logistic regression (intercept added) fitted by
/// iteratively reweighted least squares, with Wald intervals and p-values.
pub fn logistic_importance(x: &Tensor2D, y: &[u8]) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} rows for {} labels", y.len())));
    }
    if n <= p + 1 {
        return Err(Error::InvalidArgument(format!(
            "need more observations ({n}) than parameters ({})",
            p + 1
        )));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let dim = p + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = Vec::with_capacity(dim);
        r.push(1.0);
        r.extend_from_slice(x.row(i));
        r
    };
    let rows: Vec<Vec<f64>> = (0..n).map(row).collect();

    let mut beta = vec![0.0; dim];
    let mut ridge = false;
    let mut separation = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut info = vec![vec![0.0; dim]; dim];

    let build_info = |beta: &[f64], lambda: f64| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut info = vec![vec![0.0; dim]; dim];
        let mut score = vec![0.0; dim];
        for (r, &yi) in rows.iter().zip(y) {
            let eta: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
            let mu = crate::numkit::sigmoid(eta);
            let w = mu * (1.0 - mu);
            let resid = yi as f64 - mu;
            for a in 0..dim {
                score[a] += r[a] * resid;
                for b in 0..=a {
                    info[a][b] += w * r[a] * r[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                info[b][a] = info[a][b];
            }
            if a > 0 {
                info[a][a] += lambda;
                score[a] -= lambda * beta[a];
            }
        }
        (info, score)
    };

    for it in 0..IRLS_MAX_ITER {
        iterations = it + 1;
        let lambda = if ridge { RIDGE_LAMBDA } else { 0.0 };
        let (inf, score) = build_info(&beta, lambda);
        let mut l = inf.clone();
        cholesky(&mut l, &column_name)?;
        let step = cholesky_solve(&l, &score);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        info = inf;
        let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            separation = true;
            if !ridge {
                ridge = true;
                continue;
            }
        }
        if max_step < IRLS_TOL {
            converged = true;
            break;
        }
    }

    let lambda = if ridge { RIDGE_LAMBDA } else { 0.0 };
    let (final_info, _) = build_info(&beta, lambda);
    info.clone_from(&final_info);
    let mut l = info;
    cholesky(&mut l, &column_name)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z_crit = normal.inverse_cdf(0.975);
    let coefs: Vec<Coefficient> = (0..dim)
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let var = cholesky_solve(&l, &e)[j];
            let se = var.sqrt();
            let z = beta[j] / se;
            Coefficient {
                name: column_name(j),
                estimate: beta[j],
                std_error: se,
                ci_low: beta[j] - z_crit * se,
                ci_high: beta[j] + z_crit * se,
                p_value: 2.0 * (1.0 - normal.cdf(z.abs())),
            }
        })
        .collect();
    let mut it = coefs.into_iter();
    let intercept = it.next().expect("intercept present");
    Ok(LogisticFit {
        intercept,
        coefficients: it.collect(),
        iterations,
        converged,
        separation,
        ridge,
    })
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// One slide's tiles with group tags and signed attention.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideAttention {
    pub slide_id: String,
    pub label: u8,
    pub groups: Vec<u8>,
    pub tiles: Vec<SignedTile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttention {
    pub slide_id: String,
    pub label: u8,
    pub group: u8,
    /// Median attention of positively signed tiles; `None` if there are none.
    pub median_positive: Option<f64>,
    pub median_negative: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Median positive and negative attention per (slide, group).
pub fn attention_by_group(slides: &[SlideAttention]) -> Result<Vec<GroupAttention>> {
    let mut out = Vec::new();
    for s in slides {
        if s.groups.len() != s.tiles.len() {
            return Err(Error::Dimension(format!(
                "slide {}: {} group tags for {} tiles",
                s.slide_id,
                s.groups.len(),
                s.tiles.len()
            )));
        }
        let mut cells: BTreeMap<u8, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (g, t) in s.groups.iter().zip(&s.tiles) {
            let cell = cells.entry(*g).or_default();
            if t.positive {
                cell.0.push(t.attention);
            } else {
                cell.1.push(t.attention);
            }
        }
        for (group, (mut pos, mut neg)) in cells {
            out.push(GroupAttention {
                slide_id: s.slide_id.clone(),
                label: s.label,
                group,
                median_positive: median(&mut pos),
                median_negative: median(&mut neg),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no grouped tiles".into()));
    }
    Ok(out)
}

/// Fraction of positive slides whose median positive attention in
/// `target` exceeds that in `reference`. A missing positive cell counts as
/// zero positive attention; slides lacking a positive `target` cell fail.
pub fn positive_attention_win_rate(cells: &[GroupAttention], target: u8, reference: u8) -> Option<f64> {
    let mut per_slide: BTreeMap<&str, (Option<f64>, Option<f64>, u8)> = BTreeMap::new();
    for c in cells {
        let e = per_slide.entry(c.slide_id.as_str()).or_insert((None, None, c.label));
        if c.group == target {
            e.0 = c.median_positive;
        } else if c.group == reference {
            e.1 = c.median_positive;
        }
    }
    let pos: Vec<_> = per_slide.values().filter(|v| v.2 == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let wins = pos
        .iter()
        .filter(|(t, r, _)| match t {
            Some(t) => *t > r.unwrap_or(0.0),
            None => false,
        })
        .count();
    Some(wins as f64 / pos.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(
            auc(&set(&[0.1, 0.2], &[1, 1])).unwrap_err().to_string(),
            "degenerate labels"
        );
    }

    #[test]
    fn roc_examples() {
        let perfect = roc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        assert!(perfect
            .points
            .iter()
            .any(|p| p.sensitivity == 1.0 && p.specificity == 1.0));
        let r = roc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap();
        assert!((r.area() - 0.75).abs() < 1e-12);
        let binary = roc(&set(&[0.0, 1.0, 1.0, 0.0, 1.0], &[0, 1, 0, 0, 1])).unwrap();
        assert_eq!(binary.points.len(), 3);
        assert!(roc(&set(&[0.3], &[0])).is_err());
    }

    #[test]
    fn roc_csv_round_trip() {
        let r = roc(&set(&[0.1, 0.4, 0.35, 0.8, 1.0 / 3.0], &[0, 0, 1, 1, 0])).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("threshold,sensitivity,specificity\n"));
        let back = RocCurve::read_csv(&buf[..]).unwrap();
        assert_eq!(back.points, r.points);
        assert_eq!(back.provenance, Provenance::Loaded);
    }

    #[test]
    fn roc_loading_checks_invariants() {
        let pts = |v: &[(f64, f64, f64)]| {
            v.iter()
                .map(|&(t, se, sp)| RocPoint {
                    threshold: t,
                    sensitivity: se,
                    specificity: sp,
                })
                .collect::<Vec<_>>()
        };
        assert!(RocCurve::from_points(pts(&[(1.0, 0.0, 1.0), (0.0, 1.0, 0.0)])).is_ok());
        assert!(RocCurve::from_points(pts(&[(0.0, 0.0, 1.0), (1.0, 1.0, 0.0)])).is_err());
        assert!(RocCurve::from_points(pts(&[(1.0, 0.5, 1.0), (0.0, 1.0, 0.0)])).is_err());
        assert!(RocCurve::from_points(pts(&[
            (2.0, 0.0, 1.0),
            (1.0, 0.6, 0.5),
            (0.5, 0.4, 0.4),
            (0.0, 1.0, 0.0)
        ]))
        .is_err());
        assert!(matches!(
            RocCurve::from_points(pts(&[(1.0, 0.0, 1.0)])),
            Err(Error::DegenerateCurve)
        ));
    }

    #[test]
    fn youden_examples() {
        let curve = RocCurve {
            points: vec![
                RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0 },
                RocPoint { threshold: 0.8, sensitivity: 0.5, specificity: 0.95 },
                RocPoint { threshold: 0.6, sensitivity: 0.9, specificity: 0.8 },
                RocPoint { threshold: 0.3, sensitivity: 0.95, specificity: 0.5 },
                RocPoint { threshold: 0.1, sensitivity: 1.0, specificity: 0.0 },
            ],
            provenance: Provenance::Loaded,
        };
        assert_eq!(youden_threshold(&curve).unwrap(), 0.6);
        let perfect = roc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        let p = youden_point(&perfect).unwrap();
        assert_eq!((p.sensitivity, p.specificity, p.threshold), (1.0, 1.0, 0.8));
    }

    #[test]
    fn youden_tie_prefers_specificity() {
        let curve = RocCurve {
            points: vec![
                RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0 },
                RocPoint { threshold: 0.7, sensitivity: 0.5, specificity: 0.75 },
                RocPoint { threshold: 0.5, sensitivity: 0.75, specificity: 0.5 },
                RocPoint { threshold: 0.1, sensitivity: 1.0, specificity: 0.0 },
            ],
            provenance: Provenance::Loaded,
        };
        // both J = 0.25 exactly
        let p = youden_point(&curve).unwrap();
        assert_eq!(p.threshold, 0.7);
    }

    #[test]
    fn stratified_examples() {
        let s = set(&[0.1, 0.4, 0.35, 0.8, 0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1, 0, 0, 1, 1])
            .with_stratum("site", vec!["a", "a", "a", "a", "b", "b", "b", "b"].into_iter().map(String::from).collect())
            .unwrap()
            .with_stratum("all", vec!["x".to_string(); 8])
            .unwrap();
        let rows = stratified_auc(&s, "site", 5).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].auc, rows[1].auc);
        assert!(rows[0].small);
        let whole = stratified_auc(&s, "all", 1).unwrap();
        assert_eq!(whole[0].auc.unwrap(), auc(&s).unwrap());
        assert!(matches!(stratified_auc(&s, "nope", 1), Err(Error::UnknownKey(_))));

        let deg = set(&[0.1, 0.9, 0.4], &[0, 1, 1])
            .with_stratum("g", vec!["a".into(), "b".into(), "b".into()])
            .unwrap();
        let rows = stratified_auc(&deg, "g", 1).unwrap();
        assert!(rows.iter().all(|r| r.auc.is_none()));
    }

    #[test]
    fn bootstrap_basic_properties() {
        let s = set(
            &[0.1, 0.3, 0.2, 0.5, 0.45, 0.7, 0.9, 0.65, 0.4, 0.8],
            &[0, 0, 0, 0, 1, 1, 1, 1, 0, 1],
        );
        let a = bootstrap_ci(&s, 1000, 0.95, 3).unwrap();
        assert_eq!(a, bootstrap_ci(&s, 1000, 0.95, 3).unwrap());
        let point = auc(&s).unwrap();
        assert!(a.0 <= point && point <= a.1);
        assert!(bootstrap_ci(&s, 50, 0.95, 3).is_err());
        assert!(bootstrap_ci(&s, 200, 1.0, 3).is_err());
    }

    #[test]
    fn percentile_convention() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile_sorted(&v, 0.025), 2.5);
        assert_eq!(percentile_sorted(&v, 0.975), 97.5);
    }

    #[test]
    fn logistic_two_by_two() {
        // (x=1,y=1)=30, (x=0,y=1)=10, (x=1,y=0)=10, (x=0,y=0)=30
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, y, n) in [(1.0, 1u8, 30), (0.0, 1, 10), (1.0, 0, 10), (0.0, 0, 30)] {
            for _ in 0..n {
                xs.push(x);
                ys.push(y);
            }
        }
        let x = Tensor2D::from_vec(xs.len(), 1, xs).unwrap();
        let fit = logistic_importance(&x, &ys).unwrap();
        let c = &fit.coefficients[0];
        assert!((c.estimate - 9f64.ln()).abs() < 1e-3);
        let se = (1.0f64 / 30.0 + 0.1 + 0.1 + 1.0 / 30.0).sqrt();
        assert!((c.std_error - se).abs() < 1e-3);
        assert!(fit.converged && !fit.separation);
        assert!(c.p_value < 1e-3);
    }

    #[test]
    fn logistic_null_feature_ci_contains_zero() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in [0u8, 1] {
            for v in [-1.0, 0.0, 1.0, 2.0] {
                for _ in 0..5 {
                    xs.push(v);
                    ys.push(y);
                }
            }
        }
        let x = Tensor2D::from_vec(xs.len(), 1, xs).unwrap();
        let c = &logistic_importance(&x, &ys).unwrap().coefficients[0];
        assert!(c.ci_low < 0.0 && 0.0 < c.ci_high);
    }

    #[test]
    fn logistic_flags_separation() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 9.5).collect();
        let ys: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let x = Tensor2D::from_vec(20, 1, xs).unwrap();
        let fit = logistic_importance(&x, &ys).unwrap();
        assert!(fit.separation && fit.ridge);
    }

    #[test]
    fn logistic_singular_column_is_named() {
        let x = Tensor2D::from_vec(6, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 1.0, 2.0, 0.0, 0.0, 5.0, 10.0]).unwrap();
        let err = logistic_importance(&x, &[0, 1, 0, 1, 1, 0]).unwrap_err();
        assert_eq!(err.to_string(), "singular information matrix at column x1");
    }

    #[test]
    fn attention_group_medians() {
        let t = |positive, attention| SignedTile { positive, attention };
        let slide = SlideAttention {
            slide_id: "s1".into(),
            label: 1,
            groups: vec![0, 0, 0, 1],
            tiles: vec![t(true, 0.1), t(true, 0.3), t(true, 0.2), t(false, 0.4)],
        };
        let cells = attention_by_group(&[slide]).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].median_positive, Some(0.2));
        assert_eq!(cells[0].median_negative, None);
        assert_eq!(cells[1].median_negative, Some(0.4));
        assert!(attention_by_group(&[]).is_err());
    }

    #[test]
    fn win_rate_treats_missing_reference_as_zero() {
        let c = |slide: &str, group, pos| GroupAttention {
            slide_id: slide.into(),
            label: 1,
            group,
            median_positive: pos,
            median_negative: None,
        };
        let cells = vec![
            c("a", 1, Some(0.3)),
            c("a", 0, Some(0.1)),
            c("b", 1, Some(0.2)),
            c("b", 0, None),
            c("c", 1, None),
            c("c", 0, Some(0.1)),
        ];
        assert_eq!(positive_attention_win_rate(&cells, 1, 0), Some(2.0 / 3.0));
    }
}
