//! Synthetic multi-site cohorts with planted image and transcriptomics
//! signal, stratified splits, pan-cancer pooling and the on-disk layout.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureBag;
use crate::error::{Error, Result};
use crate::eval::{probe_balanced_accuracy, SurvivalData};
use crate::io;
use crate::modal::{ClinicalField, ClinicalSchema, FieldKind, ModalInputs, PathwayMap};
use crate::numerics::{rng, Tensor2D};
use crate::text::{site_name, ClinicalRecord, DurationBins, GroupingTable, SiteGrouping, SubtypeClass, Tnm};

/// Strength of the planted effects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSpec {
    /// Mean of the per-patient class evidence (unit variance), per modality.
    pub evidence_mean: f64,
    /// Mixture weight moved onto a class prototype per unit of evidence.
    pub image_share: f64,
    /// Log-expression shift of marker genes per unit of evidence.
    pub expr_shift: f64,
    pub risk_loading: f64,
    /// Log-hazard coefficient of the transcriptomic risk score.
    pub hazard_expr: f64,
    /// Log-hazard coefficient of the image prototype score.
    pub hazard_image: f64,
    /// Largest mixture weight of the aggressive prototype.
    pub aggressive_share: f64,
    pub patch_noise: f64,
    pub gene_noise: f64,
    /// Median event time at zero risk.
    pub median_months: f64,
    pub tnm_missing: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            evidence_mean: 1.8,
            image_share: 0.05,
            expr_shift: 2.5,
            risk_loading: 1.5,
            hazard_expr: 2.5,
            hazard_image: 2.0,
            aggressive_share: 0.6,
            patch_noise: 0.5,
            gene_noise: 1.0,
            median_months: 36.0,
            tnm_missing: 0.1,
        }
    }
}

/// Everything that determines one synthetic site.
///
/// Cohorts that share `world_seed`, `d_img`, `n_genes`, `n_pathways` and
/// `n_prototypes` share prototypes, gene baselines and the pathway map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub site: String,
    pub n_patients: usize,
    pub n_classes: usize,
    /// Inclusive patch-count range.
    pub n_img: [usize; 2],
    pub d_img: usize,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub n_prototypes: usize,
    /// Prototype carrying each class's image signal.
    pub class_prototypes: Vec<usize>,
    pub aggressive_prototype: usize,
    /// Pathway carrying each class's expression signal.
    pub marker_pathways: Vec<usize>,
    pub risk_pathways: Vec<usize>,
    pub censoring_fraction: f64,
    pub rare_fraction: f64,
    pub seed: u64,
    pub world_seed: u64,
    #[serde(default)]
    pub clinical: bool,
    #[serde(default)]
    pub signal: SignalSpec,
}

impl CohortSpec {
    fn base(site: &str, seed: u64) -> Self {
        Self {
            site: site.to_string(),
            n_patients: 300,
            n_classes: 2,
            n_img: [16, 64],
            d_img: 64,
            n_genes: 200,
            n_pathways: 20,
            n_prototypes: 8,
            class_prototypes: vec![0, 1],
            aggressive_prototype: 7,
            marker_pathways: vec![0, 1],
            risk_pathways: vec![2, 3],
            censoring_fraction: 0.4,
            rare_fraction: 0.05,
            seed,
            world_seed: 7,
            clinical: false,
            signal: SignalSpec::default(),
        }
    }

    /// The two default training sites.
    pub fn desk_sites() -> Vec<Self> {
        let brca = Self::base("BRCA", 101);
        let nsclc = Self {
            class_prototypes: vec![2, 3],
            marker_pathways: vec![4, 5],
            risk_pathways: vec![6, 7],
            ..Self::base("NSCLC", 202)
        };
        vec![brca, nsclc]
    }

    /// Held-out site whose class prototypes all appear in the training
    /// sites, under a different class assignment.
    pub fn desk_ood() -> Self {
        Self {
            n_classes: 3,
            class_prototypes: vec![0, 3, 1],
            marker_pathways: vec![8, 9, 10],
            risk_pathways: vec![11, 12],
            rare_fraction: 0.0,
            ..Self::base("RCC", 303)
        }
    }

    pub fn validate(&self, table: &GroupingTable) -> Result<()> {
        site_name(&self.site)?;
        let labels = table.labels(&self.site);
        let table_classes: HashSet<usize> = labels.iter().filter_map(|(_, c)| *c).collect();
        if self.n_classes < 2 || (0..self.n_classes).any(|k| !table_classes.contains(&k)) {
            return Err(Error::arg(format!(
                "{}: {} classes requested, grouping table has {}",
                self.site,
                self.n_classes,
                table_classes.len()
            )));
        }
        if self.rare_fraction > 0.0 && !labels.iter().any(|(_, c)| c.is_none()) {
            return Err(Error::arg(format!("{}: no rare labels in the grouping table", self.site)));
        }
        if !(0.0..1.0).contains(&self.rare_fraction) {
            return Err(Error::arg("rare fraction must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.censoring_fraction) {
            return Err(Error::arg(format!(
                "censoring target {} infeasible; must lie in [0, 1)",
                self.censoring_fraction
            )));
        }
        if self.n_img[0] == 0 || self.n_img[0] > self.n_img[1] {
            return Err(Error::arg("patch-count range must be nonempty and start at 1 or more"));
        }
        if self.n_patients == 0 || self.d_img == 0 {
            return Err(Error::arg("cohort needs patients and a feature width"));
        }
        if self.n_pathways == 0 || self.n_genes < self.n_pathways {
            return Err(Error::arg("need at least one gene per pathway"));
        }
        if self.class_prototypes.len() != self.n_classes || self.marker_pathways.len() != self.n_classes {
            return Err(Error::arg("one prototype and one marker pathway per class"));
        }
        let protos: HashSet<usize> = self.class_prototypes.iter().copied().collect();
        if protos.len() != self.n_classes
            || self.class_prototypes.iter().any(|&p| p >= self.n_prototypes)
            || self.aggressive_prototype >= self.n_prototypes
            || protos.contains(&self.aggressive_prototype)
        {
            return Err(Error::arg("prototype indices must be distinct and in range"));
        }
        if self.background_prototypes().is_empty() {
            return Err(Error::arg("no background prototype left"));
        }
        let paths: HashSet<usize> = self.marker_pathways.iter().chain(&self.risk_pathways).copied().collect();
        if paths.len() != self.n_classes + self.risk_pathways.len()
            || paths.iter().any(|&p| p >= self.n_pathways)
        {
            return Err(Error::arg("marker and risk pathways must be distinct and in range"));
        }
        Ok(())
    }

    fn background_prototypes(&self) -> Vec<usize> {
        (0..self.n_prototypes)
            .filter(|p| *p != self.aggressive_prototype && !self.class_prototypes.contains(p))
            .collect()
    }

    fn world_key(&self) -> (u64, usize, usize, usize, usize) {
        (self.world_seed, self.d_img, self.n_genes, self.n_pathways, self.n_prototypes)
    }
}

/// Contiguous, disjoint gene blocks; the last pathway takes the remainder.
pub fn block_pathway_map(n_genes: usize, n_pathways: usize) -> Result<PathwayMap> {
    let size = n_genes / n_pathways.max(1);
    let genes: Vec<String> = (0..n_genes).map(|g| format!("G{:03}", g + 1)).collect();
    let names: Vec<String> = (0..n_pathways).map(|p| format!("P{:02}", p + 1)).collect();
    let members = (0..n_pathways)
        .map(|p| {
            let end = if p + 1 == n_pathways { n_genes } else { (p + 1) * size };
            (p * size..end).collect()
        })
        .collect();
    PathwayMap::new(genes, names, members)
}

/// Age, T, N and M codes.
pub fn synthetic_clinical_schema() -> ClinicalSchema {
    let field = |name: &str, kind| ClinicalField {
        name: name.into(),
        kind,
    };
    ClinicalSchema {
        fields: vec![
            field("age", FieldKind::Numeric),
            field("t_stage", FieldKind::Categorical { levels: 5 }),
            field("n_stage", FieldKind::Categorical { levels: 4 }),
            field("m_stage", FieldKind::Categorical { levels: 2 }),
        ],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub bag: FeatureBag,
    pub inputs: ModalInputs,
    pub record: ClinicalRecord,
}

impl Patient {
    pub fn id(&self) -> &str {
        &self.record.patient_id
    }
}

/// Planted quantities, kept for harness diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub patient_id: String,
    pub latent_class: usize,
    pub image_evidence: f64,
    pub expr_evidence: f64,
    pub risk_score: f64,
    pub image_score: f64,
    pub log_hazard: f64,
    pub event_time: f64,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub map: PathwayMap,
    pub patients: Vec<Patient>,
    /// Empty for cohorts read from disk.
    pub truth: Vec<PlantedTruth>,
    /// Unencoded clinical fields per patient, when the modality is on.
    pub clinical_raw: Vec<Vec<Option<f64>>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.patients.iter().enumerate().map(|(i, p)| (p.id(), i)).collect()
    }

    pub fn get(&self, id: &str) -> Result<&Patient> {
        self.patients
            .iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::arg(format!("patient {id} not in cohort {}", self.spec.site)))
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&Patient>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &self.patients[i])
                    .ok_or_else(|| Error::arg(format!("patient {id} not in cohort {}", self.spec.site)))
            })
            .collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        let c = self.patients.iter().filter(|p| !p.record.event).count();
        c as f64 / self.len().max(1) as f64
    }
}

pub fn survival_of(patients: &[&Patient]) -> Result<SurvivalData> {
    SurvivalData::new(
        patients.iter().map(|p| p.record.survival_months).collect(),
        patients.iter().map(|p| p.record.event).collect(),
    )
}

struct World {
    prototypes: Vec<Vec<f64>>,
    gene_base: Vec<f64>,
}

fn world(spec: &CohortSpec) -> World {
    let mut r = rng::seeded(spec.world_seed, "prototypes");
    let prototypes = (0..spec.n_prototypes)
        .map(|_| (0..spec.d_img).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut r = rng::seeded(spec.world_seed, "gene-baseline");
    let gene_base = (0..spec.n_genes)
        .map(|_| 0.5 * r.sample::<f64, _>(StandardNormal))
        .collect();
    World { prototypes, gene_base }
}

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Signed class evidence: positive values point at the true class, negative
/// values at a uniformly drawn other class.
fn evidence_target(c: usize, e: f64, n_classes: usize, r: &mut impl Rng) -> usize {
    if e >= 0.0 {
        c
    } else {
        let other = r.random_range(0..n_classes - 1);
        if other >= c {
            other + 1
        } else {
            other
        }
    }
}

fn stage(x: f64, lo: i64, hi: i64) -> i64 {
    (x.round() as i64).clamp(lo, hi)
}

struct Draw {
    truth: PlantedTruth,
    raw_label: String,
    base_class: SubtypeClass,
    bag: FeatureBag,
    expression: Vec<f32>,
    tnm: Option<Tnm>,
    age: f64,
    censor_u: f64,
}

fn draw_patient(spec: &CohortSpec, w: &World, map: &PathwayMap, labels: &[(String, Option<usize>)], idx: usize) -> Result<Draw> {
    let sig = &spec.signal;
    let id = format!("{}-{:04}", spec.site, idx + 1);
    let mut r = rng::seeded(spec.seed, &id);
    let rare = r.random::<f64>() < spec.rare_fraction;
    let c = r.random_range(0..spec.n_classes);
    let pool: Vec<&(String, Option<usize>)> = labels
        .iter()
        .filter(|(_, k)| if rare { k.is_none() } else { *k == Some(c) })
        .collect();
    let (raw_label, k) = pool[r.random_range(0..pool.len())].clone();
    let base_class = k.map_or(SubtypeClass::Rare, SubtypeClass::Class);

    // image: mixture over class, background and aggressive prototypes
    let image_evidence = sig.evidence_mean + normal(&mut r);
    let image_score = normal(&mut r);
    let target = evidence_target(c, image_evidence, spec.n_classes, &mut r);
    let share = (sig.image_share * image_evidence.abs()).min(0.6);
    let aggr = sig.aggressive_share * std_normal_cdf(image_score);
    let background = spec.background_prototypes();
    let mut weights = vec![0.0; spec.n_prototypes];
    weights[spec.class_prototypes[target]] += share;
    weights[spec.aggressive_prototype] += aggr;
    let rest = (1.0 - share - aggr).max(0.0);
    for &b in &background {
        weights[b] += rest / background.len() as f64;
    }
    let n_img = r.random_range(spec.n_img[0]..=spec.n_img[1]);
    let mut feats = Vec::with_capacity(n_img * spec.d_img);
    for _ in 0..n_img {
        let mut u = r.random::<f64>() * weights.iter().sum::<f64>();
        let mut p = 0;
        while p + 1 < weights.len() && u >= weights[p] {
            u -= weights[p];
            p += 1;
        }
        for d in 0..spec.d_img {
            feats.push((w.prototypes[p][d] + sig.patch_noise * normal(&mut r)) as f32);
        }
    }
    let bag = FeatureBag::new(id.clone(), Tensor2D::new(n_img, spec.d_img, feats)?)?;

    // expression: log of lognormal draws plus marker and risk shifts
    let expr_evidence = sig.evidence_mean + normal(&mut r);
    let marker = spec.marker_pathways[evidence_target(c, expr_evidence, spec.n_classes, &mut r)];
    let risk_score = normal(&mut r);
    let mut expression: Vec<f64> = w
        .gene_base
        .iter()
        .map(|b| b + sig.gene_noise * normal(&mut r))
        .collect();
    for &g in map.members(marker) {
        expression[g] += sig.expr_shift * expr_evidence.abs();
    }
    for &p in &spec.risk_pathways {
        for &g in map.members(p) {
            expression[g] += sig.risk_loading * risk_score;
        }
    }

    let log_hazard = sig.hazard_expr * risk_score + sig.hazard_image * image_score;
    let rate = std::f64::consts::LN_2 / sig.median_months * log_hazard.exp();
    let event_time = Exp::new(rate)
        .map_err(|e| Error::numeric("event time", e.to_string()))?
        .sample(&mut r);
    let censor_u: f64 = r.random();

    let tnm = if r.random::<f64>() < sig.tnm_missing {
        None
    } else {
        let t = stage(2.0 + 0.8 * log_hazard + 0.7 * normal(&mut r), 1, 4);
        let sub = if t <= 2 { ["", "a", "b"][r.random_range(0..3)] } else { "" };
        let n = stage(0.6 + 0.8 * log_hazard + 0.7 * normal(&mut r), 0, 3);
        let m = i64::from(log_hazard + 0.5 * normal(&mut r) > 1.8);
        Some(Tnm {
            t: Some(format!("T{t}{sub}")),
            n: Some(format!("N{n}")),
            m: Some(format!("M{m}")),
        })
    };
    let age = (60.0 + 10.0 * normal(&mut r)).clamp(25.0, 90.0).round();
    Ok(Draw {
        truth: PlantedTruth {
            patient_id: id,
            latent_class: c,
            image_evidence,
            expr_evidence,
            risk_score,
            image_score,
            log_hazard,
            event_time,
        },
        raw_label,
        base_class,
        bag,
        expression: expression.into_iter().map(|v| v as f32).collect(),
        tnm,
        age,
        censor_u,
    })
}

/// Scale of the uniform administrative censoring times that brings the
/// censored fraction closest to `target`.
fn censoring_scale(times: &[f64], u: &[f64], target: f64) -> f64 {
    if target == 0.0 {
        return f64::INFINITY;
    }
    let frac = |tau: f64| times.iter().zip(u).filter(|(t, u)| **t > **u * tau).count() as f64 / times.len() as f64;
    let (mut lo, mut hi) = (1e-9_f64.ln(), 1e9_f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (lo.exp(), hi.exp());
    if (frac(a) - target).abs() < (frac(b) - target).abs() {
        a
    } else {
        b
    }
}

fn round_months(t: f64) -> f64 {
    ((t * 100.0).round() / 100.0).max(0.01)
}

/// Draw a full cohort; a pure function of the spec.
pub fn generate_cohort(spec: &CohortSpec, table: &GroupingTable) -> Result<Cohort> {
    spec.validate(table)?;
    let w = world(spec);
    let map = block_pathway_map(spec.n_genes, spec.n_pathways)?;
    let labels = table.labels(&spec.site);
    let draws = (0..spec.n_patients)
        .map(|i| draw_patient(spec, &w, &map, &labels, i))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = draws.iter().map(|d| d.truth.event_time).collect();
    let us: Vec<f64> = draws.iter().map(|d| d.censor_u).collect();
    let tau = censoring_scale(&times, &us, spec.censoring_fraction);
    let schema = synthetic_clinical_schema();
    let mut cohort = Cohort {
        spec: spec.clone(),
        map,
        patients: Vec::with_capacity(draws.len()),
        truth: Vec::with_capacity(draws.len()),
        clinical_raw: Vec::new(),
    };
    for d in draws {
        let censor = d.censor_u * tau;
        let event = d.truth.event_time <= censor;
        let record = ClinicalRecord {
            patient_id: d.truth.patient_id.clone(),
            site: spec.site.clone(),
            subtype_raw: d.raw_label,
            subtype_class: d.base_class,
            tnm: d.tnm,
            survival_months: round_months(if event { d.truth.event_time } else { censor }),
            event,
            duration_bin: 0,
        };
        let raw = clinical_fields(&record, d.age);
        let clinical = if spec.clinical {
            cohort.clinical_raw.push(raw.clone());
            Some(schema.encode(&record.patient_id, &raw)?)
        } else {
            None
        };
        cohort.patients.push(Patient {
            bag: d.bag,
            inputs: ModalInputs {
                expression: d.expression,
                clinical,
            },
            record,
        });
        cohort.truth.push(d.truth);
    }
    Ok(cohort)
}

fn stage_code(s: Option<&String>) -> Option<f64> {
    s.and_then(|s| s[1..].trim_end_matches(|c: char| c.is_ascii_alphabetic()).parse::<f64>().ok())
}

fn clinical_fields(r: &ClinicalRecord, age: f64) -> Vec<Option<f64>> {
    let tnm = r.tnm.as_ref();
    vec![
        Some((age - 60.0) / 10.0),
        tnm.and_then(|t| stage_code(t.t.as_ref())),
        tnm.and_then(|t| stage_code(t.n.as_ref())),
        tnm.and_then(|t| stage_code(t.m.as_ref())),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
    const FRACTIONS: [f64; 3] = [0.68, 0.12, 0.20];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Stratum of each patient, keyed by id.
    pub strata: BTreeMap<String, String>,
}

impl CohortSplit {
    pub fn ids(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.ids(s).iter().any(|x| x == id))
    }
}

fn stratum_label(c: SubtypeClass) -> String {
    match c {
        SubtypeClass::Class(k) => k.to_string(),
        SubtypeClass::Rare => "RARE".into(),
    }
}

/// 68/12/20 split stratified by subtype (the rare set is its own stratum).
pub fn split_cohort(cohort: &Cohort, seed: u64) -> Result<CohortSplit> {
    let n = cohort.len();
    if n < 25 {
        return Err(Error::arg(format!("need at least 25 patients to split, have {n}")));
    }
    let strata: BTreeMap<String, String> = cohort
        .patients
        .iter()
        .map(|p| (p.id().to_string(), stratum_label(p.record.subtype_class)))
        .collect();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in &cohort.patients {
        groups.entry(strata[p.id()].clone()).or_default().push(p.id().to_string());
    }
    if groups.values().any(|g| g.len() < 3) {
        log::warn!("{}: stratum with fewer than 3 members; falling back to a global split", cohort.spec.site);
        groups = BTreeMap::from([(
            "all".to_string(),
            cohort.patients.iter().map(|p| p.id().to_string()).collect(),
        )]);
    }
    let mut r = rng::seeded(seed, &format!("split-{}", cohort.spec.site));
    for g in groups.values_mut() {
        g.shuffle(&mut r);
    }
    let totals = {
        let tr = (n as f64 * Split::FRACTIONS[0]).round() as usize;
        let va = (n as f64 * Split::FRACTIONS[1]).round() as usize;
        [tr, va, n - tr - va]
    };
    let alloc = allocate(&groups.values().map(Vec::len).collect::<Vec<_>>(), totals);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (g, counts) in groups.values().zip(alloc) {
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            out[k].extend_from_slice(&g[start..start + c]);
            start += c;
        }
    }
    let [train, val, test] = out;
    Ok(CohortSplit {
        train,
        val,
        test,
        strata,
    })
}

/// Per-stratum counts with row sums `sizes`, column sums `totals` and every
/// cell within one of its proportional share.
fn allocate(sizes: &[usize], totals: [usize; 3]) -> Vec<[usize; 3]> {
    let n: usize = sizes.iter().sum();
    let ideal = |s: usize, k: usize| sizes[s] as f64 * totals[k] as f64 / n as f64;
    let mut cells: Vec<[usize; 3]> = (0..sizes.len())
        .map(|s| std::array::from_fn(|k| ideal(s, k).floor() as usize))
        .collect();
    let mut row_left: Vec<usize> = (0..sizes.len()).map(|s| sizes[s] - cells[s].iter().sum::<usize>()).collect();
    let mut col_left: [usize; 3] = std::array::from_fn(|k| totals[k] - cells.iter().map(|c| c[k]).sum::<usize>());
    let mut order: Vec<(usize, usize)> = (0..sizes.len()).flat_map(|s| (0..3).map(move |k| (s, k))).collect();
    order.sort_by(|a, b| {
        let fa = ideal(a.0, a.1).fract();
        let fb = ideal(b.0, b.1).fract();
        fb.total_cmp(&fa).then(a.cmp(b))
    });
    for &(s, k) in &order {
        if row_left[s] > 0 && col_left[k] > 0 {
            cells[s][k] += 1;
            row_left[s] -= 1;
            col_left[k] -= 1;
        }
    }
    // greedy leftovers, if any, go wherever both margins still allow
    for s in 0..sizes.len() {
        for k in 0..3 {
            let m = row_left[s].min(col_left[k]);
            cells[s][k] += m;
            row_left[s] -= m;
            col_left[k] -= m;
        }
    }
    cells
}

/// Bins, grouping and their effect on the records; all fitted on the
/// training split only.
#[derive(Clone, Debug)]
pub struct SitePrep {
    pub bins: DurationBins,
    pub grouping: SiteGrouping,
}

pub fn prepare_site(cohort: &mut Cohort, split: &CohortSplit, table: &GroupingTable, rare_threshold: usize) -> Result<SitePrep> {
    let train = cohort.select(&split.train)?;
    let bins = DurationBins::fit(&train.iter().map(|p| p.record.survival_months).collect::<Vec<_>>())?;
    let raw: Vec<&str> = train.iter().map(|p| p.record.subtype_raw.as_str()).collect();
    let grouping = table.for_site(&cohort.spec.site, &raw, rare_threshold)?;
    for p in &mut cohort.patients {
        p.record.subtype_class = grouping.classify(&p.record.subtype_raw)?;
        p.record.duration_bin = bins.bin(p.record.survival_months);
    }
    Ok(SitePrep { bins, grouping })
}

/// Ids and class labels of the non-rare patients of one split list.
pub fn labelled(cohort: &Cohort, ids: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
    let mut out_ids = Vec::new();
    let mut labels = Vec::new();
    for p in cohort.select(ids)? {
        if let Some(k) = p.record.subtype_class.index() {
            out_ids.push(p.id().to_string());
            labels.push(k);
        }
    }
    Ok((out_ids, labels))
}

/// `(cohort index, patient index)` of every training patient across sites,
/// in a seeded interleave.
pub fn pool_pan_cancer(sites: &[(&Cohort, &CohortSplit)], seed: u64) -> Result<Vec<(usize, usize)>> {
    if sites.len() < 2 {
        return Err(Error::arg("pan-cancer pooling needs at least two cohorts"));
    }
    let key = sites[0].0.spec.world_key();
    if sites.iter().any(|(c, _)| c.spec.world_key() != key) {
        return Err(Error::arg("pooled cohorts must share prototypes, genes and pathways"));
    }
    let mut seen = HashSet::new();
    for (c, _) in sites {
        for p in &c.patients {
            if !seen.insert(p.id().to_string()) {
                return Err(Error::arg(format!("duplicate patient id {} across sites", p.id())));
            }
        }
    }
    let mut pooled = Vec::new();
    for (s, (c, split)) in sites.iter().enumerate() {
        let index = c.index();
        for id in &split.train {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| Error::arg(format!("split id {id} not in cohort")))?;
            pooled.push((s, i));
        }
    }
    pooled.shuffle(&mut rng::seeded(seed, "pan-cancer-interleave"));
    Ok(pooled)
}

/// Oracle probe balanced accuracies on (expression, mean patch features,
/// both), fitted on train and scored on test.
pub fn oracle_complementarity(cohort: &Cohort, split: &CohortSplit) -> Result<[f64; 3]> {
    let rows = |ids: &[String]| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
        let (ids, y) = labelled(cohort, ids)?;
        let ps = cohort.select(&ids)?;
        let expr = ps.iter().map(|p| p.inputs.expression.iter().map(|&v| f64::from(v)).collect()).collect();
        let img = ps
            .iter()
            .map(|p| p.bag.features.mean_rows().to_f64_vec())
            .collect();
        Ok((expr, img, y))
    };
    let (tr_e, tr_i, tr_y) = rows(&split.train)?;
    let (te_e, te_i, te_y) = rows(&split.test)?;
    let cat = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
    };
    Ok([
        probe_balanced_accuracy(&tr_e, &tr_y, &te_e, &te_y)?,
        probe_balanced_accuracy(&tr_i, &tr_y, &te_i, &te_y)?,
        probe_balanced_accuracy(&cat(&tr_e, &tr_i), &tr_y, &cat(&te_e, &te_i), &te_y)?,
    ])
}

const MANIFEST_HEADER: [&str; 9] = [
    "patient_id", "site", "subtype_raw", "class", "duration", "event", "tnm_t", "tnm_n", "tnm_m",
];

fn bag_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("bags").join(format!("{id}.fbag"))
}

/// Manifest, expression, pathway map, clinical fields, bags and the spec.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    std::fs::create_dir_all(dir.join("bags")).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&cohort.spec)?).map_err(|e| Error::io(&spec_path, e))?;
    cohort.map.write_csv(&dir.join("pathways.csv"))?;

    let mut m = csv::Writer::from_path(dir.join("manifest.csv"))?;
    m.write_record(MANIFEST_HEADER)?;
    for p in &cohort.patients {
        let r = &p.record;
        let tnm = r.tnm.clone().unwrap_or_default();
        m.write_record([
            r.patient_id.as_str(),
            &r.site,
            &r.subtype_raw,
            &stratum_label(r.subtype_class),
            &format!("{:.2}", r.survival_months),
            if r.event { "1" } else { "0" },
            tnm.t.as_deref().unwrap_or(""),
            tnm.n.as_deref().unwrap_or(""),
            tnm.m.as_deref().unwrap_or(""),
        ])?;
        io::write_fbag(&bag_path(dir, &r.patient_id), &p.bag)?;
    }
    m.flush().map_err(|e| Error::io(dir, e))?;

    let mut e = csv::Writer::from_path(dir.join("expression.csv"))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(cohort.map.gene_names().iter().cloned());
    e.write_record(&header)?;
    for p in &cohort.patients {
        let mut row = vec![p.id().to_string()];
        row.extend(p.inputs.expression.iter().map(|v| v.to_string()));
        e.write_record(&row)?;
    }
    e.flush().map_err(|e| Error::io(dir, e))?;

    if !cohort.clinical_raw.is_empty() {
        let schema = synthetic_clinical_schema();
        let mut c = csv::Writer::from_path(dir.join("clinical.csv"))?;
        let mut header = vec!["patient_id".to_string()];
        header.extend(schema.fields.iter().map(|f| f.name.clone()));
        c.write_record(&header)?;
        for (p, raw) in cohort.patients.iter().zip(&cohort.clinical_raw) {
            let mut row = vec![p.id().to_string()];
            row.extend(raw.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
            c.write_record(&row)?;
        }
        c.flush().map_err(|e| Error::io(dir, e))?;
    }
    if !cohort.truth.is_empty() {
        let mut t = csv::Writer::from_path(dir.join("truth.csv"))?;
        for row in &cohort.truth {
            t.serialize(row)?;
        }
        t.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn parse_stage(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let spec_path = dir.join("spec.json");
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: CohortSpec = serde_json::from_str(&text)?;

    let mut e = csv::Reader::from_path(dir.join("expression.csv"))?;
    let genes: Vec<String> = e.headers()?.iter().skip(1).map(String::from).collect();
    let map = PathwayMap::read_csv(&dir.join("pathways.csv"), &genes)?;
    let mut expression: HashMap<String, Vec<f32>> = HashMap::new();
    for rec in e.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f32>().map_err(|_| Error::format("expression", format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != genes.len() {
            return Err(Error::format("expression", format!("row {} has {} values", &rec[0], vals.len())));
        }
        expression.insert(rec[0].to_string(), vals);
    }

    let mut clinical: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    let clinical_path = dir.join("clinical.csv");
    if clinical_path.exists() {
        let mut c = csv::Reader::from_path(&clinical_path)?;
        for rec in c.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| {
                    if v.is_empty() {
                        Ok(None)
                    } else {
                        v.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::format("clinical", format!("bad value {v:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            clinical.insert(rec[0].to_string(), vals);
        }
    }
    let schema = synthetic_clinical_schema();

    let mut m = csv::Reader::from_path(dir.join("manifest.csv"))?;
    if m.headers()?.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::format("manifest", format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let mut cohort = Cohort {
        spec,
        map,
        patients: Vec::new(),
        truth: Vec::new(),
        clinical_raw: Vec::new(),
    };
    for rec in m.records() {
        let rec = rec?;
        let id = rec[0].to_string();
        let class = match &rec[3] {
            "RARE" => SubtypeClass::Rare,
            k => SubtypeClass::Class(k.parse().map_err(|_| Error::format("manifest", format!("bad class {k:?}")))?),
        };
        let tnm = [&rec[6], &rec[7], &rec[8]];
        let tnm = (!tnm.iter().all(|s| s.is_empty())).then(|| Tnm {
            t: parse_stage(tnm[0]),
            n: parse_stage(tnm[1]),
            m: parse_stage(tnm[2]),
        });
        let record = ClinicalRecord {
            patient_id: id.clone(),
            site: rec[1].to_string(),
            subtype_raw: rec[2].to_string(),
            subtype_class: class,
            tnm,
            survival_months: rec[4]
                .parse()
                .map_err(|_| Error::format("manifest", format!("bad duration {:?}", &rec[4])))?,
            event: match &rec[5] {
                "1" => true,
                "0" => false,
                v => return Err(Error::format("manifest", format!("bad event {v:?}"))),
            },
            duration_bin: 0,
        };
        record.validate()?;
        let expr = expression
            .remove(&id)
            .ok_or_else(|| Error::format("expression", format!("no row for {id}")))?;
        let clin = match clinical.get(&id) {
            Some(raw) => {
                cohort.clinical_raw.push(raw.clone());
                Some(schema.encode(&id, raw)?)
            }
            None => None,
        };
        cohort.patients.push(Patient {
            bag: io::read_fbag(&bag_path(dir, &id), &id)?,
            inputs: ModalInputs {
                expression: expr,
                clinical: clin,
            },
            record,
        });
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(site: &str, n: usize) -> CohortSpec {
        let mut s = CohortSpec::desk_sites().into_iter().find(|s| s.site == site).unwrap();
        s.n_patients = n;
        s
    }

    #[test]
    fn generation_is_deterministic() {
        let t = GroupingTable::builtin();
        let a = generate_cohort(&small("BRCA", 40), &t).unwrap();
        let b = generate_cohort(&small("BRCA", 40), &t).unwrap();
        assert_eq!(a.patients, b.patients);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn infeasible_censoring_rejected() {
        let mut s = small("BRCA", 30);
        s.censoring_fraction = 1.0;
        assert!(matches!(generate_cohort(&s, &GroupingTable::builtin()), Err(Error::Argument(_))));
    }

    #[test]
    fn split_sizes_and_strata() {
        let t = GroupingTable::builtin();
        let c = generate_cohort(&small("NSCLC", 100), &t).unwrap();
        let s = split_cohort(&c, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 12, 20));
        let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn allocation_margins() {
        let a = allocate(&[50, 47, 3], [68, 12, 20]);
        for (k, &tot) in [68, 12, 20].iter().enumerate() {
            assert_eq!(a.iter().map(|c| c[k]).sum::<usize>(), tot);
        }
        for (s, &n) in [50usize, 47, 3].iter().enumerate() {
            assert_eq!(a[s].iter().sum::<usize>(), n);
            for (k, &f) in [0.68, 0.12, 0.2].iter().enumerate() {
                assert!((a[s][k] as f64 - n as f64 * f).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn pooling_counts_and_duplicates() {
        let t = GroupingTable::builtin();
        let specs = CohortSpec::desk_sites();
        let cs: Vec<Cohort> = specs
            .iter()
            .map(|s| generate_cohort(&CohortSpec { n_patients: 100, ..s.clone() }, &t).unwrap())
            .collect();
        let ss: Vec<CohortSplit> = cs.iter().map(|c| split_cohort(c, 1).unwrap()).collect();
        let pooled = pool_pan_cancer(&[(&cs[0], &ss[0]), (&cs[1], &ss[1])], 5).unwrap();
        assert_eq!(pooled.len(), 136);
        assert!(pool_pan_cancer(&[(&cs[0], &ss[0]), (&cs[0], &ss[0])], 5).is_err());
    }

    #[test]
    fn cohort_round_trips_through_files() {
        let t = GroupingTable::builtin();
        let mut spec = small("BRCA", 30);
        spec.clinical = true;
        let c = generate_cohort(&spec, &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &c).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.map, c.map);
        assert_eq!(back.patients, c.patients);
        assert_eq!(back.clinical_raw, c.clinical_raw);
    }
}
