use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modaltune_core::adapter::AdapterState;
use modaltune_core::data::{labelled, Split};
use modaltune_core::encoder::SlideEncoder;
use modaltune_core::eval::{
    attention_maps, balanced_accuracy, concordance_index, fit_cph, kaplan_meier, log_rank, median_split,
    model_integrated_gradients, read_metrics, write_metrics, FeatureMatrix, KmCurve, LogisticProbe, MetricRow,
    ProbeOptions, RiskReadout, Standardizer, SurvivalData,
};
use modaltune_core::pipeline::{
    generate_site, group_name, new_adapter, read_site, site_features, train_on_sites, training_groups, RunConfig,
    SiteData,
};
use modaltune_core::Error as CoreError;

use crate::error::{require, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::plot;

pub const CONFIG_FILE: &str = "config.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Layout of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> CliResult<Self> {
        mkdir(root)?;
        Ok(Self { root: root.to_path_buf() })
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn data(&self, site: &str) -> PathBuf {
        self.root.join("data").join(site)
    }
    pub fn model(&self, group: &str) -> PathBuf {
        self.root.join("model").join(group)
    }
    pub fn adapter(&self, group: &str) -> PathBuf {
        self.model(group).join("adapter.mtw")
    }
    pub fn features(&self, site: &str) -> PathBuf {
        self.root.join("features").join(format!("{site}.csv"))
    }
    pub fn labels(&self, site: &str) -> PathBuf {
        self.root.join("features").join(format!("{site}_labels.csv"))
    }
    pub fn survival(&self, site: &str) -> PathBuf {
        self.root.join("features").join(format!("{site}_survival.csv"))
    }
    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }
    pub fn plots(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

/// Writes the resolved config next to the outputs.
pub fn save_config(run: &RunDir, cfg: &RunConfig) -> CliResult<PathBuf> {
    let p = run.config();
    write_text(&p, &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    Ok(p)
}

fn all_site_specs(cfg: &RunConfig) -> Vec<&modaltune_core::data::CohortSpec> {
    cfg.sites.iter().chain(cfg.ood.iter()).collect()
}

pub fn gen_data(run: &RunDir, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let table = cfg.grouping_table()?;
    let mut outputs = vec![save_config(run, cfg)?];
    for spec in all_site_specs(cfg) {
        let site = generate_site(spec, cfg, &table)?;
        let dir = run.root.join("data");
        modaltune_core::pipeline::write_site(&dir, &site)?;
        outputs.extend(list_files(&run.data(&spec.site))?);
        log::info!("{}: {} patients written", spec.site, site.cohort.len());
    }
    record(run, cfg, "gen-data", &outputs, BTreeMap::new())?;
    Ok(outputs)
}

fn list_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = entry.map_err(|e| io_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn record(run: &RunDir, cfg: &RunConfig, stage: &str, outputs: &[PathBuf], digests: BTreeMap<String, String>) -> CliResult<()> {
    let digest = cfg.digest();
    let mut m = RunManifest::load_or_new(&run.root, &digest, cfg.seed)?;
    m.record(&run.root, stage, &digest, cfg.seed, outputs, digests)
}

/// Reads one generated site and checks it was made from the same spec.
pub fn load_site(run: &RunDir, cfg: &RunConfig, site: &str) -> CliResult<SiteData> {
    let dir = run.data(site);
    require(&dir.join("manifest.csv"))?;
    let data = read_site(&dir, cfg)?;
    let want = all_site_specs(cfg).into_iter().find(|s| s.site == site);
    if let Some(want) = want {
        if &data.cohort.spec != want {
            return Err(CliError::Digest {
                what: format!("cohort spec of {site}"),
                expected: "spec in config".into(),
                found: dir.join("spec.json").display().to_string(),
            });
        }
    }
    Ok(data)
}

fn check_frozen(run: &RunDir, cfg: &RunConfig, encoder: &SlideEncoder<f32>) -> CliResult<()> {
    let m = RunManifest::load(&run.root)?;
    let rec = m.check_stage("train", &cfg.digest())?;
    if let Some(want) = rec.digests.get("frozen_weights") {
        let found = encoder.digest();
        if want != &found {
            return Err(CliError::Digest {
                what: "frozen weights".into(),
                expected: want.clone(),
                found,
            });
        }
    }
    Ok(())
}

pub fn train(run: &RunDir, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let encoder = cfg.frozen_encoder()?;
    let before = encoder.digest();
    let mut outputs = vec![save_config(run, cfg)?];
    for group in training_groups(cfg) {
        let sites: Vec<SiteData> = group.iter().map(|s| load_site(run, cfg, s)).collect::<CliResult<_>>()?;
        let refs: Vec<&SiteData> = sites.iter().collect();
        let name = group_name(&group);
        let ckpt = run.model(&name).join("checkpoints");
        mkdir(&ckpt)?;
        let model = train_on_sites(cfg, &encoder, &refs, Some(&ckpt))?;
        let ap = run.adapter(&name);
        model.adapter.save(&ap)?;
        outputs.push(ap);
        outputs.extend(list_files(&ckpt)?);
        let mut rows = Vec::new();
        for e in &model.run.epochs {
            rows.push(MetricRow {
                metric: format!("train_loss_epoch{:03}", e.epoch),
                task: "alignment".into(),
                site: name.clone(),
                split: "train".into(),
                value: e.mean_loss,
                seed: cfg.seed,
            });
            for (site, v) in &e.val_balanced_accuracy {
                rows.push(MetricRow {
                    metric: format!("val_balanced_accuracy_epoch{:03}", e.epoch),
                    task: "subtype".into(),
                    site: site.clone(),
                    split: "val".into(),
                    value: *v,
                    seed: cfg.seed,
                });
            }
        }
        rows.push(MetricRow {
            metric: "best_epoch".into(),
            task: "selection".into(),
            site: name.clone(),
            split: "val".into(),
            value: model.run.best_epoch as f64,
            seed: cfg.seed,
        });
        let mp = run.metrics(&format!("train_{name}"));
        mkdir(mp.parent().expect("metrics dir"))?;
        write_metrics(&mp, &rows)?;
        outputs.push(mp);
        log::info!("{name}: best epoch {}", model.run.best_epoch);
    }
    let after = encoder.digest();
    if before != after {
        return Err(CliError::Digest {
            what: "frozen weights after training".into(),
            expected: before,
            found: after,
        });
    }
    let mut digests = BTreeMap::new();
    digests.insert("frozen_weights".to_string(), after);
    record(run, cfg, "train", &outputs, digests)?;
    Ok(outputs)
}

/// The trained adapter serving `site`, or the first group for sites
/// outside every training group.
pub fn load_model(run: &RunDir, cfg: &RunConfig, site: &SiteData) -> CliResult<AdapterState<f32>> {
    let groups = training_groups(cfg);
    let group = groups
        .iter()
        .find(|g| g.iter().any(|s| s == site.site()))
        .or(groups.first())
        .ok_or_else(|| CliError::Schema("config lists no training sites".into()))?;
    let path = run.adapter(&group_name(group));
    require(&path)?;
    let mut adapter = new_adapter(cfg, &site.cohort.map)?;
    adapter.load(&path)?;
    Ok(adapter)
}

fn write_labels(path: &Path, site: &SiteData) -> CliResult<()> {
    let mut body = String::from("patient_id,split,label\n");
    for s in Split::ALL {
        let (ids, y) = labelled(&site.cohort, site.split.ids(s))?;
        for (id, k) in ids.iter().zip(y) {
            body.push_str(&format!("{id},{},{k}\n", s.name()));
        }
    }
    write_text(path, &body)
}

fn write_survival(path: &Path, site: &SiteData) -> CliResult<()> {
    let mut body = String::from("patient_id,split,duration,event\n");
    for s in Split::ALL {
        for p in site.patients(s)? {
            body.push_str(&format!(
                "{},{},{},{}\n",
                p.id(),
                s.name(),
                p.record.survival_months,
                u8::from(p.record.event)
            ));
        }
    }
    write_text(path, &body)
}

pub fn extract(run: &RunDir, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let encoder = cfg.frozen_encoder()?;
    check_frozen(run, cfg, &encoder)?;
    let mut outputs = Vec::new();
    for spec in all_site_specs(cfg) {
        let site = load_site(run, cfg, &spec.site)?;
        let adapter = load_model(run, cfg, &site)?;
        let f = site_features(&encoder, &adapter, &site)?;
        let fp = run.features(site.site());
        mkdir(fp.parent().expect("features dir"))?;
        f.write_csv(&fp)?;
        write_labels(&run.labels(site.site()), &site)?;
        write_survival(&run.survival(site.site()), &site)?;
        outputs.extend([fp, run.labels(site.site()), run.survival(site.site())]);
    }
    record(run, cfg, "extract", &outputs, BTreeMap::new())?;
    Ok(outputs)
}

#[derive(serde::Deserialize)]
struct LabelRow {
    patient_id: String,
    split: String,
    label: usize,
}

#[derive(serde::Deserialize)]
struct SurvivalRow {
    patient_id: String,
    split: String,
    duration: f64,
    event: u8,
}

fn read_rows<R: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<R>> {
    require(path)?;
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<R>, csv::Error> = r.deserialize().collect();
    rows.map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn read_features(path: &Path) -> CliResult<BTreeMap<String, Vec<f64>>> {
    require(path)?;
    let f = FeatureMatrix::read_csv(path)?;
    Ok(f.ids.into_iter().zip(f.rows).collect())
}

fn rows_of<'a>(features: &'a BTreeMap<String, Vec<f64>>, id: &str, file: &Path) -> CliResult<&'a Vec<f64>> {
    features
        .get(id)
        .ok_or_else(|| CliError::Schema(format!("{id} has no row in {}", file.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "features".into())
}

fn metric(name: &str, task: &str, site: &str, split: &str, value: f64, seed: u64) -> MetricRow {
    MetricRow {
        metric: name.into(),
        task: task.into(),
        site: site.into(),
        split: split.into(),
        value,
        seed,
    }
}

/// Probe fitted on the `train` rows and scored on `test` rows.
pub fn probe(run: &RunDir, cfg: &RunConfig, features: &Path, labels: &Path) -> CliResult<(f64, PathBuf)> {
    let fm = read_features(features)?;
    let rows: Vec<LabelRow> = read_rows(labels)?;
    let split = |name: &str| -> CliResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in rows.iter().filter(|r| r.split == name) {
            x.push(rows_of(&fm, &r.patient_id, features)?.clone());
            y.push(r.label);
        }
        Ok((x, y))
    };
    let (xtr, ytr) = split("train")?;
    let (xte, yte) = split("test")?;
    if xtr.is_empty() || xte.is_empty() {
        return Err(CliError::Core(CoreError::Degenerate("label file needs train and test rows".into())));
    }
    let s = Standardizer::fit(&xtr)?;
    let model = LogisticProbe::fit(&s.apply(&xtr)?, &ytr, ProbeOptions::default())?;
    let ba = balanced_accuracy(&yte, &model.predict(&s.apply(&xte)?)?)?;
    let name = stem(features);
    let out = run.metrics(&format!("probe_{name}"));
    mkdir(out.parent().expect("metrics dir"))?;
    write_metrics(&out, &[metric("balanced_accuracy", "subtype", &name, "test", ba, cfg.seed)])?;
    record(run, cfg, &format!("probe:{name}"), std::slice::from_ref(&out), BTreeMap::new())?;
    Ok((ba, out))
}

fn km_csv(curves: &[(&str, &KmCurve)]) -> String {
    let mut s = String::from("group,time,survival,at_risk,events\n");
    for (g, c) in curves {
        for i in 0..c.times.len() {
            s.push_str(&format!(
                "{g},{},{:.6},{},{}\n",
                c.times[i], c.survival[i], c.at_risk[i], c.events[i]
            ));
        }
    }
    s
}

/// CPH on train rows, C-index and median-split KM / log-rank on test rows.
pub fn eval_surv(run: &RunDir, cfg: &RunConfig, features: &Path, survival: &Path) -> CliResult<(f64, Vec<PathBuf>)> {
    let fm = read_features(features)?;
    let rows: Vec<SurvivalRow> = read_rows(survival)?;
    let part = |name: &str| -> CliResult<(Vec<Vec<f64>>, SurvivalData)> {
        let mut x = Vec::new();
        let (mut d, mut e) = (Vec::new(), Vec::new());
        for r in rows.iter().filter(|r| r.split == name) {
            x.push(rows_of(&fm, &r.patient_id, features)?.clone());
            d.push(r.duration);
            e.push(r.event != 0);
        }
        Ok((x, SurvivalData::new(d, e)?))
    };
    let (xtr, str_) = part("train")?;
    let (xte, ste) = part("test")?;
    if xtr.is_empty() || xte.is_empty() {
        return Err(CliError::Core(CoreError::Degenerate("survival file needs train and test rows".into())));
    }
    let s = Standardizer::fit(&xtr)?;
    let model = fit_cph(&s.apply(&xtr)?, &str_, cfg.cph_penalizer)?;
    let risk = model.risk(&s.apply(&xte)?)?;
    let c = concordance_index(&risk, &ste)?;
    let high = median_split(&risk);
    let low: Vec<bool> = high.iter().map(|h| !h).collect();
    let lr = log_rank(&ste, &high)?;
    let (km_low, km_high) = (kaplan_meier(&ste, &low)?, kaplan_meier(&ste, &high)?);
    let name = stem(features);
    let mp = run.metrics(&format!("surv_{name}"));
    mkdir(mp.parent().expect("metrics dir"))?;
    write_metrics(
        &mp,
        &[
            metric("c_index", "survival", &name, "test", c, cfg.seed),
            metric("log_rank_statistic", "survival", &name, "test", lr.statistic, cfg.seed),
            metric("log_rank_p", "survival", &name, "test", lr.p_value, cfg.seed),
        ],
    )?;
    let csv_path = run.plots(&format!("km_{name}.csv"));
    write_text(&csv_path, &km_csv(&[("low", &km_low), ("high", &km_high)]))?;
    let svg_path = run.plots(&format!("km_{name}.svg"));
    let series = vec![
        ("low risk".to_string(), km_low.times.clone(), km_low.survival.clone()),
        ("high risk".to_string(), km_high.times.clone(), km_high.survival.clone()),
    ];
    write_text(
        &svg_path,
        &plot::step_curves(
            &format!("{name}: log-rank p = {:.3e}", lr.p_value),
            &series,
            "months",
            "survival",
        ),
    )?;
    let outputs = vec![mp, csv_path, svg_path];
    record(run, cfg, &format!("eval-surv:{name}"), &outputs, BTreeMap::new())?;
    Ok((c, outputs))
}

/// Integrated gradients over compressed pathway tokens and the
/// last-block attention maps for one patient.
pub fn attribute(run: &RunDir, cfg: &RunConfig, site_name: &str, patient: &str) -> CliResult<Vec<PathBuf>> {
    let encoder = cfg.frozen_encoder()?;
    check_frozen(run, cfg, &encoder)?;
    let site = load_site(run, cfg, site_name)?;
    let adapter = load_model(run, cfg, &site)?;
    let idx = site.cohort.index();
    let &k = idx
        .get(patient)
        .ok_or_else(|| CliError::Schema(format!("patient {patient} is not in site {site_name}")))?;
    let p = &site.cohort.patients[k];

    let fpath = run.features(site_name);
    let fm = read_features(&fpath)?;
    let train = site.patients(Split::Train)?;
    let xtr: Vec<Vec<f64>> = train
        .iter()
        .map(|q| rows_of(&fm, q.id(), &fpath).cloned())
        .collect::<CliResult<_>>()?;
    let s = Standardizer::fit(&xtr)?;
    let model = fit_cph(&s.apply(&xtr)?, &modaltune_core::data::survival_of(&train)?, cfg.cph_penalizer)?;
    let readout = RiskReadout {
        standardizer: s,
        beta: model.beta,
    };
    let ig = model_integrated_gradients(&encoder, &adapter, &p.bag, &p.inputs, &readout, cfg.ig_steps)?;
    let per_token = ig.per_row(adapter.width());

    let base = format!("{site_name}_{patient}");
    let dir = run.root.join("attribution");
    let mut outputs = Vec::new();
    let mut csv = String::from("token,attribution\n");
    for (t, v) in per_token.iter().enumerate() {
        csv.push_str(&format!("{t},{v:e}\n"));
    }
    let p_csv = dir.join(format!("{base}_ig.csv"));
    write_text(&p_csv, &csv)?;
    let p_svg = dir.join(format!("{base}_ig.svg"));
    let items: Vec<(String, f64)> = per_token.iter().enumerate().map(|(t, v)| (format!("token {t}"), *v)).collect();
    write_text(&p_svg, &plot::bars(&format!("{patient}: pathway-token attribution"), &items, "IG"))?;
    outputs.extend([p_csv, p_svg]);

    let maps = attention_maps(&encoder, &adapter, &p.bag, &p.inputs)?;
    let mean = |heads: &[Vec<f64>]| -> Vec<f64> {
        let n = heads.len().max(1) as f64;
        let w = heads.first().map_or(0, Vec::len);
        (0..w).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / n).collect()
    };
    let mut named: Vec<(String, &Vec<Vec<f64>>)> = vec![
        ("cls_to_patch".into(), &maps.cls_to_patch),
        ("patch_to_pathway".into(), &maps.patch_to_pathway),
    ];
    for (task, heads) in &maps.patch_to_task {
        named.push((format!("patch_to_task{task}"), heads));
    }
    let mut csv = String::from("map,head,patch,weight\n");
    for (name, heads) in &named {
        for (h, row) in heads.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                csv.push_str(&format!("{name},{h},{i},{v:e}\n"));
            }
        }
    }
    let a_csv = dir.join(format!("{base}_attention.csv"));
    write_text(&a_csv, &csv)?;
    let rows: Vec<(String, Vec<f64>)> = named.iter().map(|(n, h)| (n.clone(), mean(h))).collect();
    let a_svg = dir.join(format!("{base}_attention.svg"));
    write_text(&a_svg, &plot::heatmap(&format!("{patient}: block {} attention", maps.block), &rows))?;
    outputs.extend([a_csv, a_svg]);

    let mp = run.metrics(&format!("attr_{base}"));
    mkdir(mp.parent().expect("metrics dir"))?;
    write_metrics(
        &mp,
        &[
            metric("ig_total", "survival", site_name, patient, ig.total(), cfg.seed),
            metric("ig_delta", "survival", site_name, patient, ig.delta(), cfg.seed),
        ],
    )?;
    outputs.push(mp);
    record(run, cfg, &format!("attribute:{base}"), &outputs, BTreeMap::new())?;
    Ok(outputs)
}

/// Concatenated metrics table and a bar chart of the headline test
/// metrics; depends only on the metric files.
pub fn report(run: &RunDir, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let dir = run.root.join("metrics");
    require(&dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        let source = stem(f);
        for r in read_metrics(f)? {
            rows.push((source.clone(), r));
        }
    }
    let mut csv = String::from("source,metric,task,site,split,value,seed\n");
    for (src, r) in &rows {
        csv.push_str(&format!(
            "{src},{},{},{},{},{:.6},{}\n",
            r.metric, r.task, r.site, r.split, r.value, r.seed
        ));
    }
    let out = run.root.join("report");
    let p_csv = out.join("summary.csv");
    write_text(&p_csv, &csv)?;
    let headline: Vec<(String, f64)> = rows
        .iter()
        .filter(|(_, r)| r.split == "test" && matches!(r.metric.as_str(), "balanced_accuracy" | "c_index"))
        .map(|(_, r)| (format!("{} {}", r.site, r.metric), r.value))
        .collect();
    let p_svg = out.join("summary.svg");
    write_text(&p_svg, &plot::bars("test metrics", &headline, "value"))?;
    let outputs = vec![p_csv, p_svg];
    record(run, cfg, "report", &outputs, BTreeMap::new())?;
    Ok(outputs)
}
