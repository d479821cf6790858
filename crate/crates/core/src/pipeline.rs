//! End-to-end orchestration: cohorts, text targets, training, feature
//! extraction and the downstream probes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterState, TASK_SUBTYPE, TASK_SURVIVAL};
use crate::data::{
    generate_cohort, labelled, pool_pan_cancer, prepare_site, read_cohort, split_cohort, survival_of, write_cohort,
    Cohort, CohortSpec, CohortSplit, Patient, SitePrep, Split,
};
use crate::encoder::{EncoderConfig, SlideEncoder};
use crate::error::{Error, Result};
use crate::eval::{
    balanced_accuracy, concordance_index, extract_features, fit_cph, kaplan_meier, log_rank, median_split, FeatureMatrix,
    KmCurve, LogRank, LogisticProbe, MetricRow, ProbeOptions, RiskReadout, Standardizer,
};
use crate::io;
use crate::modal::{ModalConfig, PathwayMap};
use crate::numerics::rng;
use crate::text::{
    build_prompts, BinTemplates, GroupingTable, ProcessTextEncoder, Projector, ProjectorMode, StubTextEncoder,
    TextEncoder,
};
use crate::train::{train, SiteEval, TrainConfig, TrainInputs, TrainRun, TrainSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub dim: usize,
    pub seed: u64,
    pub projector_seed: u64,
    /// External encoder command line; the deterministic stub when absent.
    pub process: Option<Vec<String>>,
    pub bin_templates: Option<PathBuf>,
    pub grouping_table: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            seed: 17,
            projector_seed: 23,
            process: None,
            bin_templates: None,
            grouping_table: None,
        }
    }
}

/// The single document that drives every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub sites: Vec<CohortSpec>,
    pub ood: Option<CohortSpec>,
    pub encoder: EncoderConfig,
    /// Seed of the synthetic frozen weights, used when no file is given.
    pub encoder_seed: u64,
    pub frozen_weights: Option<PathBuf>,
    pub modal: ModalConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub text: TextConfig,
    pub rare_threshold: usize,
    pub cph_penalizer: f64,
    pub ig_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            sites: CohortSpec::desk_sites(),
            ood: Some(CohortSpec::desk_ood()),
            encoder: EncoderConfig::desk(),
            encoder_seed: 1,
            frozen_weights: None,
            modal: ModalConfig::desk(),
            adapter: AdapterConfig::desk(),
            train: TrainConfig {
                epochs: 12,
                max_lr: 2e-3,
                warmup_epochs: 2,
                ..TrainConfig::full_scale()
            },
            text: TextConfig::default(),
            rare_threshold: 25,
            cph_penalizer: 0.1,
            ig_steps: 256,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Adapter layout after applying the ablation and projector switches.
    pub fn effective_adapter(&self) -> Result<AdapterConfig> {
        let mut a = self.adapter.clone();
        a.single_modal = a.single_modal || self.train.single_modal;
        a.n_tasks = self.train.n_tasks;
        match self.train.projector_mode {
            ProjectorMode::ModelSide => a.output_projection = Some(self.text.dim),
            ProjectorMode::None => {
                if a.d_final != self.text.dim {
                    log::info!("projector off: D_final set to the text width {}", self.text.dim);
                    a.d_final = self.text.dim;
                }
            }
            _ => {}
        }
        Ok(a)
    }

    pub fn grouping_table(&self) -> Result<GroupingTable> {
        match &self.text.grouping_table {
            Some(p) => GroupingTable::read_csv(p),
            None => Ok(GroupingTable::builtin()),
        }
    }

    pub fn bin_templates(&self) -> Result<BinTemplates> {
        match &self.text.bin_templates {
            Some(p) => BinTemplates::read(p),
            None => Ok(BinTemplates::default()),
        }
    }

    pub fn text_encoder(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match &self.text.process {
            Some(cmd) if !cmd.is_empty() => Box::new(ProcessTextEncoder::spawn(&cmd[0], &cmd[1..], self.text.dim)?),
            _ => Box::new(StubTextEncoder::new(self.text.dim, self.text.seed)),
        })
    }

    pub fn projector(&self) -> Projector {
        Projector::new(self.text.dim, self.adapter.d_final, self.text.projector_seed)
    }

    pub fn frozen_encoder(&self) -> Result<SlideEncoder<f32>> {
        let mut enc = SlideEncoder::init_frozen(&self.encoder, self.encoder_seed)?;
        if let Some(p) = &self.frozen_weights {
            enc.load_weights(&io::read_mtw(p)?)?;
        }
        Ok(enc)
    }

    /// A copy with the single-modal ablation switched on.
    pub fn single_modal(&self) -> Self {
        let mut c = self.clone();
        c.train.single_modal = true;
        c
    }
}

/// One site's cohort with its split and training-split fits.
#[derive(Clone, Debug)]
pub struct SiteData {
    pub cohort: Cohort,
    pub split: CohortSplit,
    pub prep: SitePrep,
}

impl SiteData {
    pub fn site(&self) -> &str {
        &self.cohort.spec.site
    }

    pub fn patients(&self, s: Split) -> Result<Vec<&Patient>> {
        self.cohort.select(self.split.ids(s))
    }

    /// Non-rare patients of one split and their class labels.
    pub fn labelled(&self, s: Split) -> Result<(Vec<&Patient>, Vec<usize>)> {
        let (ids, y) = labelled(&self.cohort, self.split.ids(s))?;
        Ok((self.cohort.select(&ids)?, y))
    }
}

fn site_seed(seed: u64, site: &str) -> u64 {
    rng::derive_seed(seed, site)
}

pub fn finish_site(mut cohort: Cohort, split: CohortSplit, cfg: &RunConfig, table: &GroupingTable) -> Result<SiteData> {
    let prep = prepare_site(&mut cohort, &split, table, cfg.rare_threshold)?;
    Ok(SiteData { cohort, split, prep })
}

pub fn generate_site(spec: &CohortSpec, cfg: &RunConfig, table: &GroupingTable) -> Result<SiteData> {
    let cohort = generate_cohort(spec, table)?;
    let split = split_cohort(&cohort, site_seed(cfg.seed, &spec.site))?;
    finish_site(cohort, split, cfg, table)
}

pub fn generate_sites(cfg: &RunConfig) -> Result<Vec<SiteData>> {
    let table = cfg.grouping_table()?;
    cfg.sites.iter().map(|s| generate_site(s, cfg, &table)).collect()
}

pub fn generate_ood(cfg: &RunConfig) -> Result<Option<SiteData>> {
    let table = cfg.grouping_table()?;
    cfg.ood.as_ref().map(|s| generate_site(s, cfg, &table)).transpose()
}

/// `dir/<site>/` holds the cohort files and `split.json`.
pub fn write_site(dir: &Path, site: &SiteData) -> Result<()> {
    let d = dir.join(site.site());
    write_cohort(&d, &site.cohort)?;
    let p = d.join("split.json");
    std::fs::write(&p, serde_json::to_string_pretty(&site.split)?).map_err(|e| Error::io(&p, e))
}

pub fn read_site(dir: &Path, cfg: &RunConfig) -> Result<SiteData> {
    let cohort = read_cohort(dir)?;
    let p = dir.join("split.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let split: CohortSplit = serde_json::from_str(&text)?;
    finish_site(cohort, split, cfg, &cfg.grouping_table()?)
}

/// Prompts and raw text embeddings for every patient, in cohort order.
pub fn site_text(site: &SiteData, cfg: &RunConfig, encoder: &dyn TextEncoder) -> Result<Vec<(Vec<String>, Vec<Vec<f32>>)>> {
    let templates = cfg.bin_templates()?;
    let texts = site.prep.bins.texts(&templates);
    site.cohort
        .patients
        .iter()
        .map(|p| {
            let prompts = build_prompts(&p.record, &site.prep.grouping, &texts, cfg.train.n_tasks)?;
            let emb = prompts.iter().map(|s| encoder.encode(s)).collect::<Result<Vec<_>>>()?;
            Ok((prompts, emb))
        })
        .collect()
}

/// Freshly initialized adapter for `cfg`; also the shape that saved
/// weights are loaded into.
pub fn new_adapter(cfg: &RunConfig, map: &PathwayMap) -> Result<AdapterState<f32>> {
    let acfg = cfg.effective_adapter()?;
    AdapterState::new(&cfg.encoder, &cfg.modal, map.clone(), &acfg, rng::derive_seed(cfg.seed, "adapter"))
}

/// Joined site names of one training group.
pub fn group_name<S: AsRef<str>>(sites: &[S]) -> String {
    sites.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join("+")
}

/// Sites trained together: all of them when pooled, else one per site.
pub fn training_groups(cfg: &RunConfig) -> Vec<Vec<String>> {
    let names: Vec<String> = cfg.sites.iter().map(|s| s.site.clone()).collect();
    if cfg.train.pan_cancer {
        vec![names]
    } else {
        names.into_iter().map(|n| vec![n]).collect()
    }
}

/// A tuned adapter and the sites it serves.
pub struct TrainedModel {
    pub sites: Vec<String>,
    pub adapter: AdapterState<f32>,
    pub run: TrainRun<f32>,
}

/// Train one adapter on the training splits of `sites`; validation uses
/// each site's own train/val split.
pub fn train_on_sites(
    cfg: &RunConfig,
    encoder: &SlideEncoder<f32>,
    sites: &[&SiteData],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedModel> {
    let map = &sites[0].cohort.map;
    if sites.iter().any(|s| &s.cohort.map != map) {
        return Err(Error::arg("sites trained together must share a pathway map"));
    }
    let mut adapter = new_adapter(cfg, map)?;
    let text_enc = cfg.text_encoder()?;
    let texts: Vec<Vec<(Vec<String>, Vec<Vec<f32>>)>> =
        sites.iter().map(|s| site_text(s, cfg, text_enc.as_ref())).collect::<Result<_>>()?;
    let order: Vec<(usize, usize)> = if sites.len() > 1 {
        let pairs: Vec<(&Cohort, &CohortSplit)> = sites.iter().map(|s| (&s.cohort, &s.split)).collect();
        pool_pan_cancer(&pairs, cfg.seed)?
    } else {
        let index = sites[0].cohort.index();
        sites[0].split.train.iter().map(|id| (0, index[id.as_str()])).collect()
    };
    let samples: Vec<TrainSample> = order
        .iter()
        .map(|&(s, i)| TrainSample {
            patient: &sites[s].cohort.patients[i],
            text: texts[s][i].1.clone(),
        })
        .collect();
    let evals: Vec<SiteEval> = sites
        .iter()
        .map(|s| {
            Ok(SiteEval {
                site: s.site().to_string(),
                train: s.patients(Split::Train)?,
                val: s.patients(Split::Val)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut tcfg = cfg.train.clone();
    tcfg.pan_cancer = sites.len() > 1;
    let projector = cfg.projector();
    let run = train(
        encoder,
        &mut adapter,
        TrainInputs {
            samples: &samples,
            evals: &evals,
            projector: &projector,
            checkpoint_dir,
        },
        &tcfg,
    )?;
    Ok(TrainedModel {
        sites: sites.iter().map(|s| s.site().to_string()).collect(),
        adapter,
        run,
    })
}

/// General-prompt features for every patient of a site.
pub fn site_features(encoder: &SlideEncoder<f32>, adapter: &AdapterState<f32>, site: &SiteData) -> Result<FeatureMatrix> {
    extract_features(encoder, adapter, site.cohort.patients.iter().map(|p| (&p.bag, &p.inputs)))
}

/// Downstream results for one site's test split.
#[derive(Clone, Debug, Serialize)]
pub struct SiteResult {
    pub site: String,
    pub balanced_accuracy: f64,
    pub c_index: f64,
    pub log_rank: LogRank,
    pub km_low: KmCurve,
    pub km_high: KmCurve,
    pub majority_balanced_accuracy: f64,
    pub readout: RiskReadout,
    pub test_risk: Vec<(String, f64)>,
}

impl SiteResult {
    pub fn metric_rows(&self, split: &str, seed: u64) -> Vec<MetricRow> {
        let row = |metric: &str, task: &str, value: f64| MetricRow {
            metric: metric.into(),
            task: task.into(),
            site: self.site.clone(),
            split: split.into(),
            value,
            seed,
        };
        vec![
            row("balanced_accuracy", "subtype", self.balanced_accuracy),
            row("majority_balanced_accuracy", "subtype", self.majority_balanced_accuracy),
            row("c_index", "survival", self.c_index),
            row("log_rank_statistic", "survival", self.log_rank.statistic),
            row("log_rank_p", "survival", self.log_rank.p_value),
        ]
    }
}

fn rows_for(features: &FeatureMatrix, patients: &[&Patient]) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<String> = patients.iter().map(|p| p.id().to_string()).collect();
    Ok(features.select(&ids)?.rows)
}

/// Subtype probe and CPH fitted on the train split, scored on test.
pub fn evaluate_site(features: &FeatureMatrix, site: &SiteData, penalizer: f64) -> Result<SiteResult> {
    let (tr, ytr) = site.labelled(Split::Train)?;
    let (te, yte) = site.labelled(Split::Test)?;
    let xtr = rows_for(features, &tr)?;
    let xte = rows_for(features, &te)?;
    let s = Standardizer::fit(&xtr)?;
    let probe = LogisticProbe::fit(&s.apply(&xtr)?, &ytr, ProbeOptions::default())?;
    let ba = balanced_accuracy(&yte, &probe.predict(&s.apply(&xte)?)?)?;
    let majority = {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &y in &ytr {
            *counts.entry(y).or_default() += 1;
        }
        let top = counts.iter().max_by_key(|(k, c)| (**c, std::cmp::Reverse(**k))).map(|(k, _)| *k).unwrap_or(0);
        balanced_accuracy(&yte, &vec![top; yte.len()])?
    };

    let str_ = site.patients(Split::Train)?;
    let ste = site.patients(Split::Test)?;
    let xs_tr = rows_for(features, &str_)?;
    let xs_te = rows_for(features, &ste)?;
    let ss = Standardizer::fit(&xs_tr)?;
    let model = fit_cph(&ss.apply(&xs_tr)?, &survival_of(&str_)?, penalizer)?;
    let risk = model.risk(&ss.apply(&xs_te)?)?;
    let surv_te = survival_of(&ste)?;
    let c_index = concordance_index(&risk, &surv_te)?;
    let high = median_split(&risk);
    let low: Vec<bool> = high.iter().map(|h| !h).collect();
    Ok(SiteResult {
        site: site.site().to_string(),
        balanced_accuracy: ba,
        c_index,
        log_rank: log_rank(&surv_te, &high)?,
        km_low: kaplan_meier(&surv_te, &low)?,
        km_high: kaplan_meier(&surv_te, &high)?,
        majority_balanced_accuracy: majority,
        readout: RiskReadout {
            standardizer: ss,
            beta: model.beta,
        },
        test_risk: ste.iter().map(|p| p.id().to_string()).zip(risk).collect(),
    })
}

/// Outputs of [`run_pipeline`].
pub struct PipelineOutput {
    pub metrics: Vec<MetricRow>,
    pub models: Vec<TrainedModel>,
    pub results: Vec<SiteResult>,
    pub features: Vec<(String, FeatureMatrix)>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

/// Train (per site, or pooled when `pan_cancer`), extract and probe.
pub fn run_pipeline(cfg: &RunConfig, sites: &[SiteData], out: Option<&Path>) -> Result<PipelineOutput> {
    let encoder = cfg.frozen_encoder()?;
    let before = encoder.digest();
    let groups: Vec<Vec<&SiteData>> = if cfg.train.pan_cancer {
        vec![sites.iter().collect()]
    } else {
        sites.iter().map(|s| vec![s]).collect()
    };
    let mut models = Vec::new();
    let mut results = Vec::new();
    let mut features = Vec::new();
    let mut metrics = Vec::new();
    for group in groups {
        let name = group_name(&group.iter().map(|s| s.site()).collect::<Vec<_>>());
        let ckpt = out.map(|o| o.join("checkpoints").join(&name));
        let model = train_on_sites(cfg, &encoder, &group, ckpt.as_deref())?;
        for s in &group {
            let f = site_features(&encoder, &model.adapter, s)?;
            let r = evaluate_site(&f, s, cfg.cph_penalizer)?;
            metrics.extend(r.metric_rows("test", cfg.seed));
            for e in &model.run.epochs {
                if let Some(v) = e.val_balanced_accuracy.get(s.site()) {
                    metrics.push(MetricRow {
                        metric: format!("val_balanced_accuracy_epoch{:03}", e.epoch),
                        task: "subtype".into(),
                        site: s.site().to_string(),
                        split: "val".into(),
                        value: *v,
                        seed: cfg.seed,
                    });
                }
            }
            features.push((s.site().to_string(), f));
            results.push(r);
        }
        models.push(model);
    }
    Ok(PipelineOutput {
        metrics,
        models,
        results,
        features,
        frozen_digest_before: before,
        frozen_digest_after: encoder.digest(),
    })
}

/// Features from an already-trained adapter on an unseen site, probed on
/// that site's own splits.
pub fn ood_protocol(encoder: &SlideEncoder<f32>, adapter: &AdapterState<f32>, site: &SiteData, penalizer: f64) -> Result<SiteResult> {
    let f = site_features(encoder, adapter, site)?;
    evaluate_site(&f, site, penalizer)
}

/// Downstream task scored directly on text embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextProbeTask {
    /// Balanced accuracy of the subtype probe on subtype prompts.
    Subtype,
    /// C-index of CPH on survival prompts.
    Survival,
}

/// Train-split fit, test-split score of `task` on the site's text
/// embeddings, optionally after the text-side projection.
pub fn probe_text_embeddings(
    site: &SiteData,
    cfg: &RunConfig,
    encoder: &dyn TextEncoder,
    task: TextProbeTask,
    projector: Option<&Projector>,
) -> Result<f64> {
    let prompt_ix = match task {
        TextProbeTask::Subtype => TASK_SUBTYPE,
        TextProbeTask::Survival => TASK_SURVIVAL,
    } - 1;
    if cfg.train.n_tasks <= prompt_ix {
        return Err(Error::arg(format!("text probe needs {} task prompts", prompt_ix + 1)));
    }
    let templates = cfg.bin_templates()?;
    let texts = site.prep.bins.texts(&templates);
    let embed = |p: &Patient| -> Result<Vec<f64>> {
        let prompts = build_prompts(&p.record, &site.prep.grouping, &texts, cfg.train.n_tasks)?;
        let e = encoder.encode(&prompts[prompt_ix])?;
        let e = match projector {
            Some(pr) => pr.project(&e)?,
            None => e,
        };
        Ok(e.into_iter().map(f64::from).collect())
    };
    match task {
        TextProbeTask::Subtype => {
            let (tr, ytr) = site.labelled(Split::Train)?;
            let (te, yte) = site.labelled(Split::Test)?;
            let xtr = tr.iter().map(|p| embed(p)).collect::<Result<Vec<_>>>()?;
            let xte = te.iter().map(|p| embed(p)).collect::<Result<Vec<_>>>()?;
            crate::eval::probe_balanced_accuracy(&xtr, &ytr, &xte, &yte)
        }
        TextProbeTask::Survival => {
            let tr = site.patients(Split::Train)?;
            let te = site.patients(Split::Test)?;
            let xtr = tr.iter().map(|p| embed(p)).collect::<Result<Vec<_>>>()?;
            let xte = te.iter().map(|p| embed(p)).collect::<Result<Vec<_>>>()?;
            let s = Standardizer::fit(&xtr)?;
            let m = fit_cph(&s.apply(&xtr)?, &survival_of(&tr)?, cfg.cph_penalizer)?;
            concordance_index(&m.risk(&s.apply(&xte)?)?, &survival_of(&te)?)
        }
    }
}
