//! Text targets: natural-language prompts built from clinical records,
//! a pluggable text encoder, and the fixed random projector.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{TASK_GENERAL, TASK_SUBTYPE, TASK_SURVIVAL};
use crate::error::{Error, Result};
use crate::numerics::rng;

/// Cancer-site codes understood by the prompt builder.
pub const SITES: &[(&str, &str)] = &[
    ("BRCA", "breast"),
    ("NSCLC", "lung"),
    ("GBMLGG", "brain"),
    ("RCC", "kidney"),
    ("COADREAD", "colorectal"),
    ("BLCA", "bladder"),
];

pub fn site_name(code: &str) -> Result<&'static str> {
    SITES
        .iter()
        .find(|(c, _)| *c == code)
        .map(|(_, n)| *n)
        .ok_or_else(|| Error::arg(format!("unknown cancer site {code}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubtypeClass {
    Class(usize),
    Rare,
}

impl SubtypeClass {
    pub fn index(self) -> Option<usize> {
        match self {
            Self::Class(k) => Some(k),
            Self::Rare => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tnm {
    pub t: Option<String>,
    pub n: Option<String>,
    pub m: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub site: String,
    pub subtype_raw: String,
    pub subtype_class: SubtypeClass,
    pub tnm: Option<Tnm>,
    pub survival_months: f64,
    pub event: bool,
    pub duration_bin: usize,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        site_name(&self.site)?;
        if !(self.survival_months >= 0.0 && self.survival_months.is_finite()) {
            return Err(Error::arg(format!(
                "{}: survival time {} must be finite and nonnegative",
                self.patient_id, self.survival_months
            )));
        }
        if self.duration_bin > 3 {
            return Err(Error::arg(format!("{}: duration bin {}", self.patient_id, self.duration_bin)));
        }
        Ok(())
    }
}

fn strip_stage<'s>(stage: &'s str, prefix: char) -> Result<&'s str> {
    let bad = || Error::arg(format!("unparseable stage {stage:?}"));
    let rest = stage
        .trim()
        .strip_prefix(prefix)
        .or_else(|| stage.trim().strip_prefix(prefix.to_ascii_lowercase()))
        .ok_or_else(bad)?;
    let core = rest.trim_end_matches(|c: char| matches!(c, 'a'..='d' | 'A'..='D'));
    if core.is_empty() || (core.len() < rest.len() && !core.chars().all(|c| c.is_ascii_digit())) {
        return Err(bad());
    }
    Ok(core)
}

/// Natural-language phrase for one T, N or M stage string; sub-letters
/// (`T1b`) collapse onto the main stage.
pub fn tnm_to_text(stage: &str) -> Result<String> {
    let bad = || Error::arg(format!("stage {stage:?} outside the T/N/M grammar"));
    let first = stage.trim().chars().next().ok_or_else(bad)?.to_ascii_uppercase();
    match first {
        'T' => match strip_stage(stage, 'T')? {
            "X" | "x" => Ok("tumor stage unknown".into()),
            "is" | "IS" => Ok("tumor stage in situ".into()),
            d @ ("0" | "1" | "2" | "3" | "4") => Ok(format!("tumor stage {d}")),
            _ => Err(bad()),
        },
        'N' => match strip_stage(stage, 'N')? {
            "X" | "x" => Ok("lymph node status unknown".into()),
            "0" => Ok("cancer has not spread to lymph nodes".into()),
            d @ ("1" | "2" | "3") => Ok(format!("cancer has spread to lymph nodes, node stage {d}")),
            _ => Err(bad()),
        },
        'M' => match strip_stage(stage, 'M')? {
            "X" | "x" => Ok("metastasis status unknown".into()),
            "0" => Ok("cancer has not metastasized".into()),
            "1" => Ok("cancer has metastasized".into()),
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}

/// Per-bin phrase templates with `{lo}`/`{hi}` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinTemplates(pub [String; 4]);

impl Default for BinTemplates {
    fn default() -> Self {
        let mid = "between {lo} and {hi} months".to_string();
        Self(["before {hi} months".to_string(), mid.clone(), mid.clone(), mid])
    }
}

impl BinTemplates {
    /// Four non-empty lines, one per bin.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let arr: [String; 4] = lines
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|_| Error::format("bin templates", format!("{} lines, expected 4", lines.len())))?;
        Ok(Self(arr))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Quartile duration bins fitted on one site's training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationBins {
    /// Upper edges of bins 0..=2.
    pub edges: [f64; 3],
    /// Largest training duration, quoted as the top bin's upper limit.
    pub max: f64,
}

impl DurationBins {
    pub fn fit(train_durations: &[f64]) -> Result<Self> {
        let n = train_durations.len();
        if n < 4 {
            return Err(Error::Degenerate(format!("{n} durations; four bins need at least 4")));
        }
        let mut s = train_durations.to_vec();
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite duration"));
        }
        s.sort_by(f64::total_cmp);
        let mut distinct = s.clone();
        distinct.dedup();
        if distinct.len() < 4 {
            return Err(Error::Degenerate(format!(
                "{} distinct durations; four bins need at least 4",
                distinct.len()
            )));
        }
        let edge = |k: usize| s[(k * n).div_ceil(4) - 1];
        Ok(Self {
            edges: [edge(1), edge(2), edge(3)],
            max: s[n - 1],
        })
    }

    /// Intervals are `(lo, hi]`; durations beyond the last edge fall in bin 3.
    pub fn bin(&self, t: f64) -> usize {
        self.edges.iter().position(|&e| t <= e).unwrap_or(3)
    }

    pub fn texts(&self, templates: &BinTemplates) -> [String; 4] {
        let fmt = |v: f64| format!("{}", v.round() as i64);
        let bounds = [
            (0.0, self.edges[0]),
            (self.edges[0], self.edges[1]),
            (self.edges[1], self.edges[2]),
            (self.edges[2], self.max),
        ];
        std::array::from_fn(|k| {
            templates.0[k]
                .replace("{lo}", &fmt(bounds[k].0))
                .replace("{hi}", &fmt(bounds[k].1))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum TableClass {
    Class(usize),
    Rare,
}

/// Raw-subtype grouping, keyed by site and lower-cased raw label.
#[derive(Clone, Debug, Default)]
pub struct GroupingTable {
    entries: BTreeMap<(String, String), TableClass>,
    /// Display name per (site, table class): the first raw label listed.
    class_names: BTreeMap<(String, usize), String>,
    order: Vec<(String, String, String)>,
}

const BUILTIN_GROUPINGS: &str = "site,raw_subtype,class_or_RARE
BRCA,Infiltrating duct carcinoma,0
BRCA,Lobular carcinoma,1
BRCA,Infiltrating duct and lobular carcinoma,RARE
BRCA,Infiltrating duct mixed with other types of carcinoma,RARE
BRCA,Mucinous adenocarcinoma,RARE
BRCA,Metaplastic carcinoma,RARE
BRCA,Medullary carcinoma,RARE
BRCA,Intraductal papillary adenocarcinoma with invasion,RARE
BRCA,Tubular adenocarcinoma,RARE
BRCA,Adenoid cystic carcinoma,RARE
BRCA,Cribriform carcinoma,RARE
GBMLGG,Glioblastoma,0
GBMLGG,Mixed glioma,1
GBMLGG,Oligodendroglioma,1
GBMLGG,Astrocytoma,1
GBMLGG,Oligodendroglioma anaplastic,1
GBMLGG,Astrocytoma anaplastic,1
NSCLC,Lung adenocarcinoma,0
NSCLC,Lung squamous cell carcinoma,1
NSCLC,Lung bronchiolo-alveolar carcinoma,RARE
NSCLC,Lung papillary adenocarcinoma,RARE
NSCLC,Lung acinar cell carcinoma,RARE
NSCLC,Lung basaloid squamous cell carcinoma,RARE
NSCLC,Lung solid carcinoma,RARE
NSCLC,Lung signet ring cell carcinoma,RARE
NSCLC,Lung papillary squamous cell carcinoma,RARE
NSCLC,Lung micropapillary carcinoma,RARE
RCC,Papillary renal cell carcinoma,0
RCC,Renal clear cell carcinoma,1
RCC,Chromophobe renal cell carcinoma,2
COADREAD,Colon adenocarcinoma,0
COADREAD,Rectal adenocarcinoma,1
COADREAD,Colon mucinous adenocarcinoma,RARE
COADREAD,Rectal mucinous adenocarcinoma,RARE
COADREAD,Rectal adenocarcinoma in tubolovillous adenoma,RARE
COADREAD,Rectal tubular adenocarcinoma,RARE
COADREAD,Colon papillary adenocarcinoma,RARE
BLCA,Transitional cell carcinoma,0
BLCA,Papillary transitional cell carcinoma,1
";

#[derive(Deserialize)]
struct GroupingRow {
    site: String,
    raw_subtype: String,
    class_or_rare: String,
}

impl GroupingTable {
    pub fn builtin() -> Self {
        Self::from_csv_reader(BUILTIN_GROUPINGS.as_bytes()).expect("builtin grouping table parses")
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 3 || &headers[0] != "site" || &headers[1] != "raw_subtype" {
            return Err(Error::format("grouping table", "header must be site,raw_subtype,class_or_RARE"));
        }
        rdr.set_headers(csv::StringRecord::from(vec!["site", "raw_subtype", "class_or_rare"]));
        let mut table = Self::default();
        for row in rdr.deserialize::<GroupingRow>() {
            let row = row?;
            let class = if row.class_or_rare.eq_ignore_ascii_case("rare") {
                TableClass::Rare
            } else {
                TableClass::Class(row.class_or_rare.parse().map_err(|_| {
                    Error::format("grouping table", format!("bad class {:?}", row.class_or_rare))
                })?)
            };
            table.insert(&row.site, &row.raw_subtype, class)?;
        }
        Ok(table)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["site", "raw_subtype", "class_or_RARE"])?;
        for (site, raw, class) in &self.order {
            w.write_record([site, raw, class])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn insert(&mut self, site: &str, raw: &str, class: TableClass) -> Result<()> {
        let key = (site.to_string(), raw.to_lowercase());
        if self.entries.contains_key(&key) {
            return Err(Error::format("grouping table", format!("duplicate row {site},{raw}")));
        }
        let label = match class {
            TableClass::Class(k) => {
                self.class_names
                    .entry((site.to_string(), k))
                    .or_insert_with(|| raw.to_string());
                k.to_string()
            }
            TableClass::Rare => "RARE".to_string(),
        };
        self.order.push((site.to_string(), raw.to_string(), label));
        self.entries.insert(key, class);
        Ok(())
    }

    /// Add a row programmatically (synthetic sites).
    pub fn add(&mut self, site: &str, raw: &str, class: Option<usize>) -> Result<()> {
        self.insert(site, raw, class.map_or(TableClass::Rare, TableClass::Class))
    }

    /// Raw labels listed for a site, in file order, with their table class.
    pub fn labels(&self, site: &str) -> Vec<(String, Option<usize>)> {
        self.order
            .iter()
            .filter(|(s, _, _)| s == site)
            .map(|(_, raw, c)| (raw.clone(), c.parse().ok()))
            .collect()
    }

    fn lookup(&self, site: &str, raw: &str) -> Result<&TableClass> {
        self.entries
            .get(&(site.to_string(), raw.to_lowercase()))
            .ok_or_else(|| Error::arg(format!("subtype {raw:?} not in grouping table for {site}")))
    }

    /// Final classes for one site: table groups with fewer than
    /// `rare_threshold` training cases join the rare set, and surviving
    /// classes are renumbered in table order.
    pub fn for_site(&self, site: &str, train_raw: &[&str], rare_threshold: usize) -> Result<SiteGrouping> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for raw in train_raw {
            if let TableClass::Class(k) = self.lookup(site, raw)? {
                *counts.entry(*k).or_default() += 1;
            }
        }
        let kept: Vec<usize> = counts
            .iter()
            .filter(|(_, &c)| c >= rare_threshold)
            .map(|(&k, _)| k)
            .collect();
        let renumber: HashMap<usize, usize> = kept.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut map = HashMap::new();
        for ((s, raw), class) in &self.entries {
            if s != site {
                continue;
            }
            let c = match class {
                TableClass::Class(k) => renumber.get(k).map_or(SubtypeClass::Rare, |&i| SubtypeClass::Class(i)),
                TableClass::Rare => SubtypeClass::Rare,
            };
            map.insert(raw.clone(), c);
        }
        let names = kept
            .iter()
            .map(|k| self.class_names[&(site.to_string(), *k)].clone())
            .collect();
        Ok(SiteGrouping {
            site: site.to_string(),
            names,
            map,
        })
    }
}

/// Subtype classes of one site after the rare-set rule.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteGrouping {
    pub site: String,
    names: Vec<String>,
    map: HashMap<String, SubtypeClass>,
}

impl SiteGrouping {
    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn classify(&self, raw: &str) -> Result<SubtypeClass> {
        self.map
            .get(&raw.to_lowercase())
            .copied()
            .ok_or_else(|| Error::arg(format!("subtype {raw:?} not in grouping table for {}", self.site)))
    }

    /// Grouped class name, or the raw label for rare-set subtypes.
    pub fn subtype_text(&self, raw: &str) -> Result<String> {
        Ok(match self.classify(raw)? {
            SubtypeClass::Class(k) => self.names[k].clone(),
            SubtypeClass::Rare => raw.to_string(),
        })
    }
}

fn staging_clause(tnm: &Option<Tnm>) -> Result<Option<String>> {
    let Some(tnm) = tnm else { return Ok(None) };
    let parts: Vec<String> = [&tnm.t, &tnm.n, &tnm.m]
        .into_iter()
        .flatten()
        .map(|s| tnm_to_text(s))
        .collect::<Result<_>>()?;
    Ok((!parts.is_empty()).then(|| format!("Staging: {}.", parts.join(", "))))
}

/// Prompts for tasks `1..=n_tasks` (general, survival, subtype).
pub fn build_prompts(
    r: &ClinicalRecord,
    grouping: &SiteGrouping,
    bin_texts: &[String; 4],
    n_tasks: usize,
) -> Result<Vec<String>> {
    r.validate()?;
    if !(1..=3).contains(&n_tasks) {
        return Err(Error::arg(format!("{n_tasks} tasks; prompts exist for 1 to 3")));
    }
    let site = format!("Cancer site is {}.", site_name(&r.site)?);
    let subtype = format!("Cancer subtype is {}.", grouping.subtype_text(&r.subtype_raw)?.to_lowercase());
    let stage = staging_clause(&r.tnm)?;
    let status = format!(
        "The patient {} {}.",
        if r.event { "died" } else { "was censored" },
        bin_texts[r.duration_bin]
    );
    let join = |parts: &[Option<&str>]| parts.iter().flatten().copied().collect::<Vec<_>>().join(" ");
    let st = stage.as_deref();
    let all = [
        (TASK_GENERAL, join(&[Some(&site), Some(&subtype), st, Some(&status)])),
        (TASK_SURVIVAL, join(&[Some(&site), st, Some(&status)])),
        (TASK_SUBTYPE, join(&[Some(&site), Some(&subtype)])),
    ];
    Ok(all.into_iter().take(n_tasks).map(|(_, p)| p).collect())
}

/// Maps a prompt to a fixed-width vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<Vec<f32>>;
}

/// Sum of per-token Gaussian vectors, normalized to unit length.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    dim: usize,
    seed: u64,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut r = rng::seeded(self.seed ^ rng::stable_hash(token), "text-token");
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *a += z;
        }
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dim];
        let mut n = 0;
        for tok in prompt.split_whitespace() {
            let t = tok.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
            if t.is_empty() {
                continue;
            }
            self.token_vector(&t, &mut acc);
            n += 1;
        }
        if n == 0 {
            return Err(Error::arg("empty prompt"));
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::numeric("encode_text", "zero-norm embedding"));
        }
        Ok(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Line protocol over a child process: one prompt line in, one line of
/// space-separated floats out.
pub struct ProcessTextEncoder {
    dim: usize,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ProcessTextEncoder {
    pub fn spawn(program: &str, args: &[String], dim: usize) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(Path::new(program), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            dim,
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl Drop for ProcessTextEncoder {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.0.kill();
            let _ = io.0.wait();
        }
    }
}

impl TextEncoder for ProcessTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Vec<f32>> {
        if prompt.trim().is_empty() || prompt.contains('\n') {
            return Err(Error::arg("prompt must be one non-empty line"));
        }
        let mut io = self.io.lock().map_err(|_| Error::numeric("text encoder", "poisoned lock"))?;
        let (_, stdin, stdout) = &mut *io;
        let fail = |what: String| Error::numeric("external text encoder", what);
        writeln!(stdin, "{prompt}").and_then(|_| stdin.flush()).map_err(|e| fail(e.to_string()))?;
        let mut line = String::new();
        if stdout.read_line(&mut line).map_err(|e| fail(e.to_string()))? == 0 {
            return Err(fail("process closed its output".into()));
        }
        let v: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>().map_err(|_| fail(format!("bad float {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != self.dim {
            return Err(fail(format!("{} values, expected {}", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        Ok(v)
    }
}

/// Where the text-side random projection sits and whether it trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorMode {
    #[default]
    FrozenTextSide,
    None,
    ModelSide,
    /// Known to collapse; kept for the ablation.
    TrainableTextSide,
}

/// Fixed Gaussian linear map `D_text -> D_final`, entries of variance
/// `1/D_final`, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    d_in: usize,
    d_out: usize,
    /// Row-major `d_in x d_out`.
    weights: Vec<f32>,
}

impl Projector {
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed, "text-projector");
        let sd = 1.0 / (d_out as f64).sqrt();
        let weights = (0..d_in * d_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                (z * sd) as f32
            })
            .collect();
        Self { d_in, d_out, weights }
    }

    pub fn from_weights(d_in: usize, d_out: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != d_in * d_out {
            return Err(Error::dim("projector", format!("{} weights for {d_in}x{d_out}", weights.len())));
        }
        Ok(Self { d_in, d_out, weights })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn project(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.d_in {
            return Err(Error::dim("project_text", format!("{} != {}", v.len(), self.d_in)));
        }
        let mut out = vec![0.0f64; self.d_out];
        for (i, &x) in v.iter().enumerate() {
            let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += f64::from(x) * f64::from(w);
            }
        }
        Ok(out.into_iter().map(|x| x as f32).collect())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d_in as u64).to_le_bytes());
        h.update((self.d_out as u64).to_le_bytes());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Prompts and embeddings for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTargetSet {
    pub prompts: Vec<String>,
    pub raw: Vec<Vec<f32>>,
    /// Projected targets (equal to `raw` when no text-side projection).
    pub projected: Vec<Vec<f32>>,
}

pub fn text_targets(
    prompts: Vec<String>,
    encoder: &dyn TextEncoder,
    projector: Option<&Projector>,
) -> Result<TextTargetSet> {
    let raw: Vec<Vec<f32>> = prompts.iter().map(|p| encoder.encode(p)).collect::<Result<_>>()?;
    let projected = match projector {
        Some(p) => raw.iter().map(|v| p.project(v)).collect::<Result<_>>()?,
        None => raw.clone(),
    };
    Ok(TextTargetSet {
        prompts,
        raw,
        projected,
    })
}

/// Largest `|d'/d - 1|` over all pairs.
pub fn max_distortion(before: &[Vec<f32>], after: &[Vec<f32>]) -> f64 {
    let dist = |a: &[f32], b: &[f32]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut worst: f64 = 0.0;
    for i in 0..before.len() {
        for j in i + 1..before.len() {
            let d0 = dist(&before[i], &before[j]);
            if d0 > 0.0 {
                worst = worst.max((dist(&after[i], &after[j]) / d0 - 1.0).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(months: f64, event: bool, bin: usize, tnm: Option<Tnm>) -> ClinicalRecord {
        ClinicalRecord {
            patient_id: "p1".into(),
            site: "BRCA".into(),
            subtype_raw: "Lobular carcinoma".into(),
            subtype_class: SubtypeClass::Class(1),
            tnm,
            survival_months: months,
            event,
            duration_bin: bin,
        }
    }

    fn brca_grouping() -> SiteGrouping {
        let raw: Vec<&str> = std::iter::repeat_n("Infiltrating duct carcinoma", 30)
            .chain(std::iter::repeat_n("Lobular carcinoma", 30))
            .collect();
        GroupingTable::builtin().for_site("BRCA", &raw, 25).unwrap()
    }

    fn brca_bins() -> DurationBins {
        DurationBins::fit(&[15.0, 27.0, 55.0, 283.0]).unwrap()
    }

    #[test]
    fn tnm_phrases() {
        assert_eq!(tnm_to_text("T1b").unwrap(), "tumor stage 1");
        assert_eq!(tnm_to_text("T1").unwrap(), "tumor stage 1");
        assert_eq!(tnm_to_text("N0").unwrap(), "cancer has not spread to lymph nodes");
        assert_eq!(tnm_to_text("M1a").unwrap(), "cancer has metastasized");
        for bad in ["T9", "N5", "Q1", "", "T", "Tab"] {
            assert!(tnm_to_text(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn quartile_edges() {
        let d: Vec<f64> = (1..=8).map(f64::from).collect();
        let b = DurationBins::fit(&d).unwrap();
        assert_eq!(b.edges, [2.0, 4.0, 6.0]);
        let mut counts = [0; 4];
        for &t in &d {
            counts[b.bin(t)] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
        assert!(matches!(DurationBins::fit(&[1.0, 1.0, 2.0, 3.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(DurationBins::fit(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn brca_bin_phrases() {
        let texts = brca_bins().texts(&BinTemplates::default());
        assert_eq!(texts[0], "before 15 months");
        assert_eq!(texts[1], "between 15 and 27 months");
        assert_eq!(texts[3], "between 55 and 283 months");
        assert_eq!(brca_bins().bin(144.0), 3);
    }

    #[test]
    fn prompts_follow_recipe() {
        let bins = brca_bins();
        let texts = bins.texts(&BinTemplates::default());
        let tnm = Tnm {
            t: Some("T2".into()),
            n: Some("N0".into()),
            m: Some("M0".into()),
        };
        let r = record(144.0, false, bins.bin(144.0), Some(tnm));
        let p = build_prompts(&r, &brca_grouping(), &texts, 3).unwrap();
        assert!(p[1].contains("The patient was censored between 55 and 283 months"));
        assert!(p[1].contains("cancer has not spread to lymph nodes"));
        assert!(p[2].contains("lobular carcinoma") && !p[2].contains("months"));
        assert_eq!(p[0].matches("breast").count(), 1);
        assert!(p[0].contains("lobular") && p[0].contains("lymph") && p[0].contains("censored"));

        let bare = record(10.0, true, 0, None);
        let p = build_prompts(&bare, &brca_grouping(), &texts, 3).unwrap();
        assert!(!p[1].contains("Staging") && !p[1].contains("stage"));
        assert!(p[1].contains("died before 15 months"));
        assert_eq!(build_prompts(&bare, &brca_grouping(), &texts, 1).unwrap().len(), 1);

        let mut unknown = bare.clone();
        unknown.site = "XYZ".into();
        assert!(build_prompts(&unknown, &brca_grouping(), &texts, 3).is_err());
    }

    #[test]
    fn grouping_rules() {
        let g = brca_grouping();
        assert_eq!(g.classify("Lobular carcinoma").unwrap(), SubtypeClass::Class(1));
        assert_eq!(g.classify("mucinous adenocarcinoma").unwrap(), SubtypeClass::Rare);
        assert!(g.classify("made-up carcinoma").is_err());

        let mut t = GroupingTable::default();
        t.add("BLCA", "alpha", Some(0)).unwrap();
        t.add("BLCA", "beta", Some(1)).unwrap();
        t.add("BLCA", "gamma", Some(2)).unwrap();
        let mut raw: Vec<&str> = vec!["alpha"; 30];
        raw.extend(vec!["beta"; 24]);
        raw.extend(vec!["gamma"; 25]);
        let s = t.for_site("BLCA", &raw, 25).unwrap();
        assert_eq!(s.classify("beta").unwrap(), SubtypeClass::Rare);
        assert_eq!(s.classify("gamma").unwrap(), SubtypeClass::Class(1));
        assert_eq!(s.n_classes(), 2);
    }

    #[test]
    fn grouping_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let t = GroupingTable::builtin();
        t.write_csv(&path).unwrap();
        let back = GroupingTable::read_csv(&path).unwrap();
        assert_eq!(back.labels("RCC"), t.labels("RCC"));
        assert!(GroupingTable::from_csv_reader("a,b\n1,2\n".as_bytes()).is_err());
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn stub_encoder_similarity() {
        let enc = StubTextEncoder::new(512, 7);
        let a = enc.encode("the patient was censored before 15 months").unwrap();
        assert_eq!(a.len(), 512);
        assert_eq!(a, enc.encode("the patient was censored before 15 months").unwrap());
        let n: f64 = cosine(&a, &a);
        assert!((n - 1.0).abs() < 1e-5);
        let one_off = enc.encode("the patient died before 15 months").unwrap();
        let disjoint = enc.encode("alpha beta gamma delta epsilon zeta").unwrap();
        let c1 = cosine(&a, &one_off);
        let c0 = cosine(&a, &disjoint);
        assert!(c1 < 1.0 - 1e-6 && c1 > c0, "{c1} {c0}");
        assert!(enc.encode("  ").is_err());
    }

    #[test]
    fn projector_properties() {
        let p = Projector::new(512, 256, 3);
        assert_eq!(p.project(&vec![0.0; 512]).unwrap(), vec![0.0; 256]);
        assert_eq!(p, Projector::new(512, 256, 3));
        assert_ne!(p.digest(), Projector::new(512, 256, 4).digest());
        assert!(p.project(&[1.0]).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn external_process_encoder() {
        let enc = ProcessTextEncoder::spawn(
            "sh",
            &["-c".into(), "while read l; do echo 0.5 -1 2; done".into()],
            3,
        )
        .unwrap();
        assert_eq!(enc.encode("hello").unwrap(), vec![0.5, -1.0, 2.0]);
        let wrong = ProcessTextEncoder::spawn("sh", &["-c".into(), "while read l; do echo 1; done".into()], 3)
            .unwrap();
        assert!(wrong.encode("hello").is_err());
    }
}
