//! Synthetic cohorts with planted witness tiles and clinical covariates.
//!
//! Every tile of a negative bag, and the non-witness tiles of a positive
//! bag, are `N(0, I)`. A positive bag additionally holds
//! `⌈witness_fraction · B⌉` witness tiles whose mean is shifted by
//! `witness_shift` on a fixed random subset of feature coordinates. Labels
//! are drawn per patient; smoking status depends on the label.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::milnet::{FeatureBag, GROUP_BACKGROUND, GROUP_WITNESS};
use crate::numkit::{derive_seed, Tensor2D};

pub const MISSING: &str = "NA";

pub const SMOKING: &str = "smoking";
pub const SEX: &str = "sex";
pub const AGE: &str = "age";
pub const STAGE: &str = "stage";
pub const METASTASIS: &str = "metastasis";

pub const SMOKING_VOCAB: [&str; 3] = ["never", "former", "current"];
pub const SEX_VOCAB: [&str; 2] = ["female", "male"];
pub const STAGE_VOCAB: [&str; 4] = ["I", "II", "III", "IV"];
pub const METASTASIS_VOCAB: [&str; 2] = ["no", "yes"];

/// Names of the encoded covariate vector, in order.
pub const ENCODED_COVARIATES: [&str; 6] = [
    "smoking_former",
    "smoking_current",
    "sex_male",
    "age_std",
    "stage",
    "metastasis",
];
/// Indices of the smoking indicators inside the encoded vector.
pub const SMOKING_COLUMNS: [usize; 2] = [0, 1];

/// Smoking status probabilities conditional on the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokingCoupling {
    pub never_given_positive: f64,
    pub current_given_positive: f64,
    pub never_given_negative: f64,
    pub current_given_negative: f64,
}

impl Default for SmokingCoupling {
    fn default() -> Self {
        SmokingCoupling {
            never_given_positive: 0.6,
            current_given_positive: 0.15,
            never_given_negative: 0.3,
            current_given_negative: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range.
    pub slides_per_patient: (usize, usize),
    /// Inclusive range of tiles per bag.
    pub bag_size: (usize, usize),
    pub d1: usize,
    /// Size of the planted subspace (capped at `d1`).
    pub witness_dims: usize,
    pub witness_fraction_positive: f64,
    pub witness_shift: f64,
    pub label_prevalence: f64,
    pub smoking: SmokingCoupling,
    /// Probability that any single covariate value is missing.
    pub missing_rate: f64,
    /// Inclusive range of total tissue tiles per slide (QC area).
    pub tile_count_total: (u32, u32),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            slides_per_patient: (1, 2),
            bag_size: (8, 32),
            d1: 64,
            witness_dims: 32,
            witness_fraction_positive: 0.15,
            witness_shift: 0.5,
            label_prevalence: 0.3,
            smoking: SmokingCoupling::default(),
            missing_rate: 0.05,
            tile_count_total: (400, 4000),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if self.n_patients == 0 {
            return Err(invalid("n_patients must be >= 1"));
        }
        if self.slides_per_patient.0 == 0 || self.slides_per_patient.0 > self.slides_per_patient.1 {
            return Err(invalid("slides_per_patient must be a range with minimum >= 1"));
        }
        if self.bag_size.0 == 0 || self.bag_size.0 > self.bag_size.1 {
            return Err(invalid("bag_size must be a range with minimum >= 1"));
        }
        if self.d1 == 0 || self.witness_dims == 0 {
            return Err(invalid("d1 and witness_dims must be >= 1"));
        }
        if self.tile_count_total.0 > self.tile_count_total.1 {
            return Err(invalid("tile_count_total range is reversed"));
        }
        frac("witness_fraction_positive", self.witness_fraction_positive)?;
        frac("missing_rate", self.missing_rate)?;
        if !(self.label_prevalence > 0.0 && self.label_prevalence < 1.0) {
            return Err(invalid(format!(
                "label_prevalence must lie in (0, 1), got {}",
                self.label_prevalence
            )));
        }
        if !self.witness_shift.is_finite() {
            return Err(invalid("witness_shift must be finite"));
        }
        let s = &self.smoking;
        for (never, current) in [
            (s.never_given_positive, s.current_given_positive),
            (s.never_given_negative, s.current_given_negative),
        ] {
            frac("smoking probability", never)?;
            frac("smoking probability", current)?;
            if never + current > 1.0 {
                return Err(invalid("smoking probabilities exceed 1"));
            }
        }
        Ok(())
    }
}

/// One covariate column; `None` is a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    /// Allowed values for categorical columns; `None` for numeric ones.
    pub vocabulary: Option<Vec<String>>,
    pub values: Vec<Option<String>>,
}

/// Per-patient clinical covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub patient_ids: Vec<String>,
    pub columns: Vec<Column>,
}

fn vocab(v: &[&str]) -> Option<Vec<String>> {
    Some(v.iter().map(|s| s.to_string()).collect())
}

impl CovariateTable {
    /// Empty table with the standard clinical schema.
    pub fn clinical() -> Self {
        let col = |name: &str, vocabulary| Column {
            name: name.to_string(),
            vocabulary,
            values: Vec::new(),
        };
        CovariateTable {
            patient_ids: Vec::new(),
            columns: vec![
                col(SMOKING, vocab(&SMOKING_VOCAB)),
                col(SEX, vocab(&SEX_VOCAB)),
                col(AGE, None),
                col(STAGE, vocab(&STAGE_VOCAB)),
                col(METASTASIS, vocab(&METASTASIS_VOCAB)),
            ],
        }
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| c.values.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.columns {
            if c.values.len() != self.patient_ids.len() {
                return Err(Error::Dimension(format!(
                    "column {} has {} values for {} patients",
                    c.name,
                    c.values.len(),
                    self.patient_ids.len()
                )));
            }
            if let Some(voc) = &c.vocabulary {
                for v in c.values.iter().flatten() {
                    if !voc.contains(v) {
                        return Err(Error::Format(format!("column {}: value {v:?} not in vocabulary", c.name)));
                    }
                }
            } else {
                for v in c.values.iter().flatten() {
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("column {}: {v:?} is not numeric", c.name)))?;
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["patient_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (i, id) in self.patient_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(
                self.columns
                    .iter()
                    .map(|c| c.values[i].clone().unwrap_or_else(|| MISSING.to_string())),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with the clinical header.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let mut table = CovariateTable::clinical();
        let mut expected = vec!["patient_id"];
        expected.extend(table.columns.iter().map(|c| c.name.as_str()));
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format(format!(
                "covariate CSV header must be {}",
                expected.join(",")
            )));
        }
        for rec in r.records() {
            let rec = rec?;
            table.patient_ids.push(rec[0].to_string());
            for (j, c) in table.columns.iter_mut().enumerate() {
                let v = &rec[j + 1];
                c.values.push((v != MISSING).then(|| v.to_string()));
            }
        }
        table.validate()?;
        Ok(table)
    }

    /// Encoded covariate vector per patient, keyed by patient id. Missing
    /// values encode as zero; impute first to avoid that.
    pub fn encode(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.validate()?;
        let get = |name: &str| {
            self.column(name)
                .ok_or_else(|| Error::Format(format!("missing column {name}")))
        };
        let (smoking, sex, age, stage, met) = (get(SMOKING)?, get(SEX)?, get(AGE)?, get(STAGE)?, get(METASTASIS)?);
        let mut out = BTreeMap::new();
        for (i, id) in self.patient_ids.iter().enumerate() {
            let is = |c: &Column, v: &str| f64::from(c.values[i].as_deref() == Some(v));
            let age_std = age.values[i]
                .as_deref()
                .map_or(0.0, |a| (a.parse::<f64>().unwrap_or(65.0) - 65.0) / 10.0);
            let stage_num = stage.values[i]
                .as_deref()
                .and_then(|s| STAGE_VOCAB.iter().position(|v| *v == s))
                .map_or(0.0, |p| (p + 1) as f64 / 4.0);
            out.insert(
                id.clone(),
                vec![
                    is(smoking, "former"),
                    is(smoking, "current"),
                    is(sex, "male"),
                    age_std,
                    stage_num,
                    is(met, "yes"),
                ],
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeStrategy {
    /// Most frequent value; ties go to the lexicographically first.
    Mode,
    /// Draws from the column's observed values.
    Distribution,
}

/// Fills every missing value. Columns without missing values are left as is.
pub fn impute(table: &CovariateTable, strategy: ImputeStrategy, seed: u64) -> Result<CovariateTable> {
    let mut out = table.clone();
    for (j, col) in out.columns.iter_mut().enumerate() {
        if col.values.iter().all(Option::is_some) {
            continue;
        }
        let observed: Vec<String> = col.values.iter().flatten().cloned().collect();
        if observed.is_empty() {
            return Err(invalid(format!("column {} has no observed values", col.name)));
        }
        match strategy {
            ImputeStrategy::Mode => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for v in &observed {
                    *counts.entry(v.as_str()).or_default() += 1;
                }
                // BTreeMap iterates in lexicographic order; keep the first max
                let mut mode = "";
                let mut best = 0;
                for (v, c) in counts {
                    if c > best {
                        best = c;
                        mode = v;
                    }
                }
                let mode = mode.to_string();
                for v in col.values.iter_mut().filter(|v| v.is_none()) {
                    *v = Some(mode.clone());
                }
            }
            ImputeStrategy::Distribution => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[j as u64]));
                for v in col.values.iter_mut().filter(|v| v.is_none()) {
                    *v = Some(observed[rng.random_range(0..observed.len())].clone());
                }
            }
        }
    }
    Ok(out)
}

/// Generated cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub bags: Vec<FeatureBag>,
    /// Raw covariates, with missing values.
    pub covariates: CovariateTable,
    /// Coordinates carrying the witness shift.
    pub witness_dims: Vec<usize>,
}

impl SynthDataset {
    /// Per-patient labels in table order.
    pub fn patient_labels(&self) -> BTreeMap<String, u8> {
        self.bags
            .iter()
            .map(|b| (b.patient_id.clone(), b.label))
            .collect()
    }
}

struct PatientDraw {
    bags: Vec<FeatureBag>,
    covariates: [Option<String>; 5],
}

fn draw_patient(cfg: &SynthConfig, index: usize, witness_dims: &[usize]) -> PatientDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, index as u64]));
    let patient_id = format!("P{index:05}");
    let label = u8::from(rng.random::<f64>() < cfg.label_prevalence);
    let n_slides = rng.random_range(cfg.slides_per_patient.0..=cfg.slides_per_patient.1);
    let mut bags = Vec::with_capacity(n_slides);
    for s in 0..n_slides {
        let b = rng.random_range(cfg.bag_size.0..=cfg.bag_size.1);
        let n_witness = if label == 1 {
            ((cfg.witness_fraction_positive * b as f64).ceil() as usize).min(b)
        } else {
            0
        };
        let mut groups = vec![GROUP_BACKGROUND; b];
        groups[..n_witness].fill(GROUP_WITNESS);
        groups.shuffle(&mut rng);
        let mut data = Vec::with_capacity(b * cfg.d1);
        for g in &groups {
            let start = data.len();
            for _ in 0..cfg.d1 {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z);
            }
            if *g == GROUP_WITNESS {
                for &d in witness_dims {
                    data[start + d] += cfg.witness_shift;
                }
            }
        }
        // features are stored as f32; round now so files round-trip exactly
        let data: Vec<f64> = data.into_iter().map(|v| v as f32 as f64).collect();
        bags.push(FeatureBag {
            slide_id: format!("{patient_id}-S{s}"),
            patient_id: patient_id.clone(),
            label,
            features: Tensor2D::from_vec(b, cfg.d1, data).expect("finite normals"),
            covariates: Vec::new(),
            tile_groups: Some(groups),
            tile_count_total: rng.random_range(cfg.tile_count_total.0..=cfg.tile_count_total.1),
        });
    }

    let sm = &cfg.smoking;
    let (p_never, p_current) = if label == 1 {
        (sm.never_given_positive, sm.current_given_positive)
    } else {
        (sm.never_given_negative, sm.current_given_negative)
    };
    let u: f64 = rng.random();
    let smoking = if u < p_never {
        "never"
    } else if u < p_never + p_current {
        "current"
    } else {
        "former"
    };
    let sex = SEX_VOCAB[rng.random_range(0..2)];
    let z: f64 = StandardNormal.sample(&mut rng);
    let age = (65.0 + 10.0 * z).round().clamp(30.0, 95.0);
    let stage = STAGE_VOCAB[rng.random_range(0..4)];
    let met = METASTASIS_VOCAB[usize::from(rng.random::<f64>() < 0.3)];
    let mut covariates = [
        Some(smoking.to_string()),
        Some(sex.to_string()),
        Some(format!("{age}")),
        Some(stage.to_string()),
        Some(met.to_string()),
    ];
    for c in &mut covariates {
        if rng.random::<f64>() < cfg.missing_rate {
            *c = None;
        }
    }
    PatientDraw {
        bags,
        covariates,
    }
}

/// Generates a cohort. Patients are drawn from independent derived streams,
/// so the result does not depend on the number of worker threads.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let mut dims: Vec<usize> = (0..cfg.d1).collect();
    dims.shuffle(&mut rng);
    dims.truncate(cfg.witness_dims.min(cfg.d1));
    dims.sort_unstable();

    let draws: Vec<PatientDraw> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| draw_patient(cfg, i, &dims))
        .collect();

    let mut table = CovariateTable::clinical();
    let mut bags = Vec::new();
    for (i, d) in draws.into_iter().enumerate() {
        table.patient_ids.push(format!("P{i:05}"));
        for (col, v) in table.columns.iter_mut().zip(d.covariates) {
            col.values.push(v);
        }
        bags.extend(d.bags);
    }
    let encoded = impute(&table, ImputeStrategy::Mode, cfg.seed)?.encode()?;
    for bag in &mut bags {
        bag.covariates = encoded[&bag.patient_id]
            .iter()
            .map(|&v| v as f32 as f64)
            .collect();
    }
    Ok(SynthDataset {
        bags,
        covariates: table,
        witness_dims: dims,
    })
}

/// Keeps only the selected encoded covariates on every bag.
pub fn select_covariates(bags: &[FeatureBag], columns: &[usize]) -> Result<Vec<FeatureBag>> {
    bags.iter()
        .map(|b| {
            let cov = columns
                .iter()
                .map(|&c| {
                    b.covariates.get(c).copied().ok_or_else(|| {
                        Error::Dimension(format!(
                            "bag {} has {} covariates, column {c} requested",
                            b.slide_id,
                            b.covariates.len()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureBag {
                covariates: cov,
                ..b.clone()
            })
        })
        .collect()
}

/// Ordinal smoking score (never = 2, former = 1, current = 0) from the
/// encoded covariates; higher means more likely mutant.
pub fn smoking_score(covariates: &[f64]) -> f64 {
    if covariates.len() < 2 {
        return 0.0;
    }
    match (covariates[0] > 0.5, covariates[1] > 0.5) {
        (false, false) => 2.0,
        (true, _) => 1.0,
        (false, true) => 0.0,
    }
}
