//! Screening-impact calculus: sub-optimally treated patients before and
//! after model-guided testing under a fixed testing budget, sensitivity
//! grids and trial-enrollment Monte Carlo.
//!
//! With `N` adenocarcinomas per year, mutation prevalence `p` and testing
//! rate `t`, untested mutant patients number `N·p·(1−t)`. A screen with
//! sensitivity `se` and specificity `sp` flags
//! `se·N·p + (1−sp)·N·(1−p)` patients; testing only those misses
//! `N·p − precision·flagged = N·p·(1−se)` mutant patients.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{format_float, RocCurve};
use crate::numkit::derive_seed;

/// Lung-cancer statistics for one country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryStats {
    pub name: String,
    pub lung_cancers_per_year: f64,
    pub luad_fraction: f64,
    pub egfr_low: f64,
    pub egfr_high: f64,
    pub test_low: f64,
    pub test_high: f64,
}

impl CountryStats {
    pub fn n_luad(&self) -> f64 {
        self.lung_cancers_per_year * self.luad_fraction
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{}: {name} must lie in [0, 1], got {v}", self.name)))
            }
        };
        unit("luad_fraction", self.luad_fraction)?;
        unit("egfr_low", self.egfr_low)?;
        unit("egfr_high", self.egfr_high)?;
        unit("test_low", self.test_low)?;
        unit("test_high", self.test_high)?;
        if self.egfr_low > self.egfr_high || self.test_low > self.test_high {
            return Err(invalid(format!("{}: low bound above high bound", self.name)));
        }
        if !(self.lung_cancers_per_year >= 0.0) {
            return Err(invalid(format!("{}: negative case count", self.name)));
        }
        Ok(())
    }
}

/// Built-in registry (yearly lung cancers, adenocarcinoma share, mutation
/// prevalence range, testing-rate range).
pub fn builtin_countries() -> Vec<CountryStats> {
    let c = |name: &str, n, luad, el, eh, tl, th| CountryStats {
        name: name.to_string(),
        lung_cancers_per_year: n,
        luad_fraction: luad,
        egfr_low: el,
        egfr_high: eh,
        test_low: tl,
        test_high: th,
    };
    vec![
        c("US", 250_000.0, 0.41, 0.09, 0.23, 0.72, 0.76),
        c("China", 815_000.0, 0.63, 0.37, 0.48, 0.42, 0.46),
        c("Brazil", 30_200.0, 0.38, 0.08, 0.28, 0.38, 0.38),
        c("Germany", 56_000.0, 0.40, 0.11, 0.14, 0.66, 0.66),
    ]
}

/// Built-ins with overrides applied (matched by name, case-insensitive;
/// unknown names are appended).
pub fn registry_with_overrides(overrides: &[CountryStats]) -> Result<Vec<CountryStats>> {
    let mut reg = builtin_countries();
    for o in overrides {
        o.validate()?;
        match reg.iter_mut().find(|c| c.name.eq_ignore_ascii_case(&o.name)) {
            Some(c) => *c = o.clone(),
            None => reg.push(o.clone()),
        }
    }
    Ok(reg)
}

pub fn find_country<'a>(registry: &'a [CountryStats], name: &str) -> Result<&'a CountryStats> {
    registry
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            let known: Vec<&str> = registry.iter().map(|c| c.name.as_str()).collect();
            Error::UnknownKey(format!("country {name:?}; known: {}", known.join(", ")))
        })
}

/// Mutant patients who are never tested.
pub fn sot_current(n_luad: f64, p_egfr: f64, p_test: f64) -> f64 {
    n_luad * p_egfr * (1.0 - p_test)
}

/// Expected number of positive screens.
pub fn positive_screens(n_luad: f64, p_egfr: f64, se: f64, sp: f64) -> f64 {
    se * n_luad * p_egfr + (1.0 - sp) * n_luad * (1.0 - p_egfr)
}

/// Positive predictive value of the screen.
pub fn precision(p_egfr: f64, se: f64, sp: f64) -> Result<f64> {
    let denom = p_egfr * se + (1.0 - p_egfr) * (1.0 - sp);
    if denom <= 0.0 {
        return Err(Error::NoPositivePredictions);
    }
    Ok(p_egfr * se / denom)
}

/// Mutant patients missed when only positive screens are tested, computed
/// as `N·p − precision·flagged`.
pub fn sot_after(n_luad: f64, p_egfr: f64, se: f64, sp: f64) -> Result<f64> {
    let flagged = positive_screens(n_luad, p_egfr, se, sp);
    if flagged == 0.0 {
        // nobody flagged: every mutant patient is missed
        return Ok(n_luad * p_egfr);
    }
    Ok(n_luad * p_egfr - precision(p_egfr, se, sp)? * flagged)
}

/// Fold increase in mutant yield over random selection.
pub fn enrichment(p_egfr: f64, se: f64, sp: f64) -> Result<f64> {
    if p_egfr <= 0.0 {
        return Err(invalid("prevalence must be positive for enrichment"));
    }
    Ok(precision(p_egfr, se, sp)? / p_egfr)
}

pub fn reduction_pct(before: f64, after: f64) -> Option<f64> {
    (before > 0.0).then(|| 100.0 * (before - after) / before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub positive_screens: f64,
    /// `|positive_screens − budget|`
    pub residual: f64,
    /// Residual within `margin · budget`.
    pub within_margin: bool,
}

/// Curve point whose expected positive screens are closest to the testing
/// budget; ties go to the higher sensitivity.
pub fn find_operating_point(
    roc: &RocCurve,
    n_luad: f64,
    p_egfr: f64,
    n_tests_budget: f64,
    margin: f64,
) -> Result<OperatingPoint> {
    if roc.points.is_empty() {
        return Err(invalid("empty ROC curve"));
    }
    if !(0.0..=n_luad).contains(&n_tests_budget) {
        return Err(invalid(format!(
            "budget {n_tests_budget} outside [0, {n_luad}]"
        )));
    }
    let mut best: Option<OperatingPoint> = None;
    for p in &roc.points {
        let ps = positive_screens(n_luad, p_egfr, p.sensitivity, p.specificity);
        let residual = (ps - n_tests_budget).abs();
        let better = match &best {
            None => true,
            Some(b) => residual < b.residual || (residual == b.residual && p.sensitivity > b.sensitivity),
        };
        if better {
            best = Some(OperatingPoint {
                sensitivity: p.sensitivity,
                specificity: p.specificity,
                threshold: p.threshold,
                positive_screens: ps,
                residual,
                within_margin: residual <= margin * n_tests_budget,
            });
        }
    }
    Ok(best.expect("non-empty curve"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// Low prevalence paired with high testing.
    Low,
    /// High prevalence paired with low testing.
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactRow {
    pub country: String,
    pub bound: Bound,
    pub n_luad: f64,
    pub p_egfr: f64,
    pub p_test: f64,
    pub n_tests: f64,
    pub point: OperatingPoint,
    pub sot_before: f64,
    pub sot_after: f64,
    pub reduction_pct: Option<f64>,
}

/// Low- and high-bound rows for one country.
pub fn impact_report(country: &CountryStats, roc: &RocCurve, margin: f64) -> Result<Vec<ImpactRow>> {
    country.validate()?;
    let n = country.n_luad();
    [
        (Bound::Low, country.egfr_low, country.test_high),
        (Bound::High, country.egfr_high, country.test_low),
    ]
    .into_iter()
    .map(|(bound, p, t)| {
        let n_tests = t * n;
        let point = find_operating_point(roc, n, p, n_tests, margin)?;
        let before = sot_current(n, p, t);
        let after = sot_after(n, p, point.sensitivity, point.specificity)?;
        Ok(ImpactRow {
            country: country.name.clone(),
            bound,
            n_luad: n,
            p_egfr: p,
            p_test: t,
            n_tests,
            point,
            sot_before: before,
            sot_after: after,
            reduction_pct: reduction_pct(before, after),
        })
    })
    .collect()
}

pub fn write_impact_csv<W: Write>(rows: &[ImpactRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "country",
        "bound",
        "n_luad",
        "p_egfr",
        "p_test",
        "n_tests",
        "sensitivity",
        "specificity",
        "threshold",
        "positive_screens",
        "within_margin",
        "sot_before",
        "sot_after",
        "reduction_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.country.clone(),
            format!("{:?}", r.bound).to_lowercase(),
            format_float(r.n_luad),
            format_float(r.p_egfr),
            format_float(r.p_test),
            format_float(r.n_tests),
            format_float(r.point.sensitivity),
            format_float(r.point.specificity),
            format_float(r.point.threshold),
            format!("{:.0}", r.point.positive_screens),
            r.point.within_margin.to_string(),
            format!("{:.0}", r.sot_before),
            format!("{:.0}", r.sot_after),
            r.reduction_pct.map_or("NA".into(), |v| format!("{v:.1}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sensitivity: f64,
    pub specificity: f64,
    pub positive_screens: f64,
    /// `None` when there are no sub-optimal treatments to reduce.
    pub reduction_pct: Option<f64>,
}

pub fn grid_cell(n_luad: f64, p_egfr: f64, p_test: f64, se: f64, sp: f64) -> GridCell {
    let before = sot_current(n_luad, p_egfr, p_test);
    GridCell {
        sensitivity: se,
        specificity: sp,
        positive_screens: positive_screens(n_luad, p_egfr, se, sp),
        reduction_pct: reduction_pct(before, n_luad * p_egfr * (1.0 - se)),
    }
}

fn grid_axis(step: f64) -> Vec<f64> {
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut v: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(1.0)).collect();
    if *v.last().expect("non-empty") < 1.0 - 1e-12 {
        v.push(1.0);
    } else {
        *v.last_mut().expect("non-empty") = 1.0;
    }
    v
}

/// Positive screens and SOT reduction over a regular `(se, sp)` grid,
/// sensitivity-major.
pub fn sensitivity_grid(n_luad: f64, p_egfr: f64, p_test: f64, step: f64) -> Result<Vec<GridCell>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(invalid(format!("grid step must lie in (0, 0.5], got {step}")));
    }
    let axis = grid_axis(step);
    Ok(axis
        .iter()
        .flat_map(|&se| axis.iter().map(move |&sp| grid_cell(n_luad, p_egfr, p_test, se, sp)))
        .collect())
}

pub fn write_grid_csv<W: Write>(cells: &[GridCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sensitivity", "specificity", "positive_screens", "reduction_pct"])?;
    for c in cells {
        w.write_record([
            format_float(c.sensitivity),
            format_float(c.specificity),
            format_float(c.positive_screens),
            c.reduction_pct.map_or("NA".into(), format_float),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Lower confidence bound on the number of eligible patients found among
/// `n_screened`, from `n_trials` binomial draws: the order statistic at
/// 1-based rank `⌈(1 − confidence)·n_trials⌉`.
pub fn simulate_enrollment(
    n_screened: u64,
    positive_rate: f64,
    n_trials: usize,
    confidence: f64,
    seed: u64,
) -> Result<u64> {
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(invalid(format!("rate must lie in [0, 1], got {positive_rate}")));
    }
    if n_trials < 1000 {
        return Err(invalid(format!("n_trials must be >= 1000, got {n_trials}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(invalid(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let dist = Binomial::new(n_screened, positive_rate).map_err(|e| invalid(e.to_string()))?;
    const CHUNK: usize = 1000;
    let n_chunks = n_trials.div_ceil(CHUNK);
    let mut draws: Vec<u64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
            let len = CHUNK.min(n_trials - c * CHUNK);
            (0..len).map(move |_| dist.sample(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    draws.sort_unstable();
    let rank = (((1.0 - confidence) * n_trials as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(draws[rank.min(n_trials) - 1])
}

/// Normal-approximation lower bound `⌊np − z·√(np(1−p))⌋`.
pub fn normal_lower_bound(n: u64, rate: f64, z: f64) -> i64 {
    let mean = n as f64 * rate;
    (mean - z * (mean * (1.0 - rate)).sqrt()).floor() as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Provenance, RocPoint};

    fn curve(points: &[(f64, f64)]) -> RocCurve {
        let n = points.len();
        RocCurve {
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(se, sp))| RocPoint {
                    threshold: (n - i) as f64,
                    sensitivity: se,
                    specificity: sp,
                })
                .collect(),
            provenance: Provenance::Loaded,
        }
    }

    #[test]
    fn sot_current_examples() {
        assert_eq!(sot_current(102_500.0, 0.09, 0.76).round(), 2214.0);
        assert_eq!(sot_current(102_500.0, 0.09, 1.0), 0.0);
        assert_eq!(sot_current(513_450.0, 0.48, 0.42).round(), 142_944.0);
    }

    #[test]
    fn positive_screen_examples() {
        assert_eq!(positive_screens(1000.0, 0.2, 1.0, 1.0), 200.0);
        assert_eq!(positive_screens(1000.0, 0.2, 1.0, 0.0), 1000.0);
        let ps = positive_screens(102_500.0, 0.09, 0.992, 0.263);
        assert!((ps - 77_893.0).abs() <= 5.0, "{ps}");
        assert!((ps - 77_900.0).abs() / 77_900.0 < 0.05);
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision(0.3, 1.0, 1.0).unwrap(), 1.0);
        assert!((precision(0.5, 0.8, 0.8).unwrap() - 0.8).abs() < 1e-12);
        assert!((precision(0.09, 0.992, 0.263).unwrap() - 0.1175).abs() < 5e-4);
        assert!(matches!(precision(0.3, 0.0, 1.0), Err(Error::NoPositivePredictions)));
    }

    #[test]
    fn sot_after_examples() {
        assert!(sot_after(1000.0, 0.2, 1.0, 0.4).unwrap().abs() < 1e-9);
        let de = sot_after(22_400.0, 0.11, 0.967, 0.378).unwrap();
        assert!((de - 81.0).abs() <= 1.0, "{de}");
        let us = sot_after(102_500.0, 0.23, 0.974, 0.356).unwrap();
        assert!((us - 612.0).abs() <= 2.0, "{us}");
        assert_eq!(sot_after(1000.0, 0.2, 0.0, 1.0).unwrap(), 200.0);
    }

    #[test]
    fn operating_point_endpoints() {
        let roc = curve(&[(0.0, 1.0), (0.5, 0.9), (0.9, 0.5), (1.0, 0.0)]);
        let all = find_operating_point(&roc, 1000.0, 0.2, 1000.0, 0.05).unwrap();
        assert_eq!((all.sensitivity, all.specificity), (1.0, 0.0));
        let none = find_operating_point(&roc, 1000.0, 0.2, 0.0, 0.05).unwrap();
        assert_eq!((none.sensitivity, none.specificity), (0.0, 1.0));
        assert!(find_operating_point(&roc, 1000.0, 0.2, 2000.0, 0.05).is_err());
    }

    #[test]
    fn operating_point_margin_flag() {
        let roc = curve(&[(0.0, 1.0), (1.0, 0.0)]);
        let p = find_operating_point(&roc, 1000.0, 0.2, 500.0, 0.05).unwrap();
        assert!(!p.within_margin);
    }

    #[test]
    fn perfect_screen_removes_all_sot() {
        let roc = curve(&[(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]);
        let us = &builtin_countries()[0];
        for row in impact_report(us, &roc, 0.05).unwrap() {
            assert_eq!(row.sot_after, 0.0);
            assert_eq!(row.reduction_pct, Some(100.0));
        }
    }

    #[test]
    fn brazil_low_bound_before() {
        let br = &builtin_countries()[2];
        let roc = curve(&[(0.0, 1.0), (0.902, 0.665), (1.0, 0.0)]);
        let rows = impact_report(br, &roc, 0.05).unwrap();
        assert_eq!(rows[0].sot_before.round(), 569.0);
    }

    #[test]
    fn grid_properties() {
        let cells = sensitivity_grid(102_500.0, 0.09, 0.76, 0.1).unwrap();
        assert_eq!(cells.len(), 121);
        for c in &cells {
            if c.sensitivity == 1.0 {
                assert_eq!(c.reduction_pct, Some(100.0));
            }
        }
        for row in cells.chunks(11) {
            assert!(row.iter().all(|c| c.reduction_pct == row[0].reduction_pct));
        }
        assert!(sensitivity_grid(1.0, 0.1, 0.5, 0.0).is_err());
        assert!(sensitivity_grid(1.0, 0.1, 0.5, 0.6).is_err());
        let none = sensitivity_grid(100.0, 0.1, 1.0, 0.5).unwrap();
        assert!(none.iter().all(|c| c.reduction_pct.is_none()));
        assert_eq!(grid_axis(0.3), vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
    }

    #[test]
    fn china_low_grid_cell_matches_budget() {
        let c = grid_cell(513_450.0, 0.37, 0.46, 0.852, 0.770);
        let budget = 0.46 * 513_450.0;
        assert!((c.positive_screens - budget).abs() / budget < 0.05);
    }

    #[test]
    fn enrollment_edge_cases() {
        assert_eq!(simulate_enrollment(1000, 1.0, 1000, 0.95, 1).unwrap(), 1000);
        assert_eq!(simulate_enrollment(1000, 0.0, 1000, 0.95, 1).unwrap(), 0);
        assert!(simulate_enrollment(1000, 0.2, 999, 0.95, 1).is_err());
        assert!(simulate_enrollment(1000, 1.2, 1000, 0.95, 1).is_err());
        let a = simulate_enrollment(500, 0.3, 2000, 0.9, 5).unwrap();
        assert_eq!(a, simulate_enrollment(500, 0.3, 2000, 0.9, 5).unwrap());
    }

    #[test]
    fn enrichment_examples() {
        // chance diagonal
        assert!((enrichment(0.16, 0.3, 0.7).unwrap() - 1.0).abs() < 1e-12);
        assert!((enrichment(0.16, 1.0, 1.0).unwrap() - 1.0 / 0.16).abs() < 1e-12);
        assert!(enrichment(0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn country_lookup() {
        let reg = builtin_countries();
        assert_eq!(find_country(&reg, "germany").unwrap().name, "Germany");
        let err = find_country(&reg, "Atlantis").unwrap_err().to_string();
        assert!(err.contains("US") && err.contains("Brazil"), "{err}");
        let mut us = reg[0].clone();
        us.test_high = 0.9;
        let reg = registry_with_overrides(&[us]).unwrap();
        assert_eq!(reg[0].test_high, 0.9);
        let mut bad = reg[1].clone();
        bad.egfr_low = 0.9;
        assert!(registry_with_overrides(&[bad]).is_err());
    }
}
