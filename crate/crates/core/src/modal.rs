//! Encoders that turn non-image modalities into width-`D` tokens.
//!
//! Transcriptomics: pathway-masked S-MLP, MLP-mixer, then a linear
//! compression across the pathway axis down to `N_t` tokens. Clinical
//! tabular data: a 2-layer MLP producing a single token.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    Dropout, Graph, LayerNorm, Linear, MlpBlock, ParamId, ParamStore, Real, Tensor2D, Var,
};

/// Gene-to-pathway membership.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayMap {
    gene_names: Vec<String>,
    pathway_names: Vec<String>,
    /// Sorted member gene indices per pathway.
    members: Vec<Vec<usize>>,
}

impl PathwayMap {
    pub fn new(
        gene_names: Vec<String>,
        pathway_names: Vec<String>,
        mut members: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if pathway_names.len() != members.len() {
            return Err(Error::arg("one member list per pathway required"));
        }
        for (p, m) in members.iter_mut().enumerate() {
            m.sort_unstable();
            m.dedup();
            if m.is_empty() {
                return Err(Error::arg(format!(
                    "pathway {} has no member genes",
                    pathway_names[p]
                )));
            }
            if let Some(&g) = m.iter().find(|&&g| g >= gene_names.len()) {
                return Err(Error::arg(format!(
                    "pathway {} references gene index {g} of {}",
                    pathway_names[p],
                    gene_names.len()
                )));
            }
        }
        Ok(Self {
            gene_names,
            pathway_names,
            members,
        })
    }

    /// Every gene its own pathway.
    pub fn identity(n_genes: usize) -> Self {
        let genes: Vec<String> = (0..n_genes).map(|g| format!("gene_{g}")).collect();
        let names = (0..n_genes).map(|g| format!("pathway_{g}")).collect();
        Self::new(genes, names, (0..n_genes).map(|g| vec![g]).collect()).expect("valid identity map")
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_pathways(&self) -> usize {
        self.members.len()
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn pathway_names(&self) -> &[String] {
        &self.pathway_names
    }

    pub fn members(&self, p: usize) -> &[usize] {
        &self.members[p]
    }

    pub fn contains(&self, p: usize, g: usize) -> bool {
        self.members[p].binary_search(&g).is_ok()
    }

    /// Parse `pathway,gene` rows. Gene column order follows `gene_names`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R, gene_names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = gene_names
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["pathway", "gene"] {
            return Err(Error::format("pathway map", "header must be `pathway,gene`"));
        }
        let mut order: Vec<String> = Vec::new();
        let mut by_name: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let (p, g) = (&rec[0], &rec[1]);
            let gi = *index
                .get(g)
                .ok_or_else(|| Error::format("pathway map", format!("unknown gene {g}")))?;
            if !by_name.contains_key(p) {
                order.push(p.to_string());
            }
            by_name.entry(p.to_string()).or_default().push(gi);
        }
        let members = order.iter().map(|p| by_name[p].clone()).collect();
        Self::new(gene_names.to_vec(), order, members)
    }

    pub fn read_csv(path: &Path, gene_names: &[String]) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f, gene_names)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["pathway", "gene"])?;
        for (p, m) in self.members.iter().enumerate() {
            for &g in m {
                w.write_record([&self.pathway_names[p], &self.gene_names[g]])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Numeric,
    Categorical { levels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalField {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

/// Declared layout of the clinical CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSchema {
    pub fields: Vec<ClinicalField>,
}

impl ClinicalSchema {
    /// Encoded width: one column per numeric field, one per categorical level.
    pub fn width(&self) -> usize {
        self.fields
            .iter()
            .map(|f| match f.kind {
                FieldKind::Numeric => 1,
                FieldKind::Categorical { levels } => levels,
            })
            .sum()
    }

    /// One-hot / numeric encoding; `None` marks a missing field.
    pub fn encode(&self, patient_id: &str, raw: &[Option<f64>]) -> Result<ClinicalFeatures> {
        if raw.len() != self.fields.len() {
            return Err(Error::format(
                "clinical",
                format!("{patient_id}: {} fields, schema has {}", raw.len(), self.fields.len()),
            ));
        }
        let mut values = Vec::with_capacity(self.width());
        let mut presence = Vec::with_capacity(self.width());
        for (f, v) in self.fields.iter().zip(raw) {
            match (f.kind, v) {
                (FieldKind::Numeric, Some(x)) => {
                    values.push(*x as f32);
                    presence.push(true);
                }
                (FieldKind::Numeric, None) => {
                    values.push(0.0);
                    presence.push(false);
                }
                (FieldKind::Categorical { levels }, Some(x)) => {
                    let level = *x as usize;
                    if x.fract() != 0.0 || *x < 0.0 || level >= levels {
                        return Err(Error::format(
                            "clinical",
                            format!("{patient_id}: {} level {x} outside 0..{levels}", f.name),
                        ));
                    }
                    values.extend((0..levels).map(|l| if l == level { 1.0 } else { 0.0 }));
                    presence.extend(std::iter::repeat_n(true, levels));
                }
                (FieldKind::Categorical { levels }, None) => {
                    values.extend(std::iter::repeat_n(0.0, levels));
                    presence.extend(std::iter::repeat_n(false, levels));
                }
            }
        }
        Ok(ClinicalFeatures {
            patient_id: patient_id.to_string(),
            values,
            presence,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalFeatures {
    pub patient_id: String,
    pub values: Vec<f32>,
    pub presence: Vec<bool>,
}

/// Everything beyond the slide that one patient contributes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalInputs {
    pub expression: Vec<f32>,
    pub clinical: Option<ClinicalFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalConfig {
    pub d_gp: usize,
    pub n_tokens: usize,
    pub smlp_dense_layer: bool,
    pub mixer_layers: usize,
    pub mixer_ratio: f64,
    pub mixer_dropout: f64,
    pub clinical: Option<ClinicalSchema>,
}

impl ModalConfig {
    pub fn desk() -> Self {
        Self {
            d_gp: 32,
            n_tokens: 8,
            smlp_dense_layer: true,
            mixer_layers: 3,
            mixer_ratio: 0.5,
            mixer_dropout: 0.25,
            clinical: None,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            d_gp: 256,
            n_tokens: 64,
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug)]
struct MixerLayer {
    ln_token: LayerNorm,
    token_mlp: MlpBlock,
    ln_channel: LayerNorm,
    channel_mlp: MlpBlock,
}

#[derive(Clone, Debug)]
pub struct Mixer {
    layers: Vec<MixerLayer>,
    ln_out: LayerNorm,
    proj: Linear,
}

impl Mixer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n_tokens: usize,
        d_in: usize,
        d_out: usize,
        cfg: &ModalConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.mixer_layers);
        for l in 0..cfg.mixer_layers {
            let n = format!("{name}.layer{l}");
            layers.push(MixerLayer {
                ln_token: LayerNorm::new(store, &format!("{n}.ln_token"), d_in),
                token_mlp: MlpBlock::new(
                    store,
                    &format!("{n}.token_mlp"),
                    n_tokens,
                    cfg.mixer_ratio,
                    n_tokens,
                    cfg.mixer_dropout,
                    rng,
                )?,
                ln_channel: LayerNorm::new(store, &format!("{n}.ln_channel"), d_in),
                channel_mlp: MlpBlock::new(
                    store,
                    &format!("{n}.channel_mlp"),
                    d_in,
                    cfg.mixer_ratio,
                    d_in,
                    cfg.mixer_dropout,
                    rng,
                )?,
            });
        }
        Ok(Self {
            layers,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d_in),
            proj: Linear::new(store, &format!("{name}.proj"), d_in, d_out, true, rng),
        })
    }

    /// `N_gp x D_gp -> N_gp x D`.
    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        ctx: Dropout,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln_token.forward(g, store, h)?;
            let nt = g.transpose(n);
            let mixed = layer.token_mlp.forward(g, store, nt, ctx)?;
            let mixed = g.transpose(mixed);
            h = g.add(h, mixed)?;
            let n = layer.ln_channel.forward(g, store, h)?;
            let mixed = layer.channel_mlp.forward(g, store, n, ctx)?;
            h = g.add(h, mixed)?;
        }
        let n = self.ln_out.forward(g, store, h)?;
        self.proj.forward(g, store, n)
    }
}

/// Parameters of every modal encoder, living in the adapter's store.
#[derive(Clone, Debug)]
pub struct ModalEncoders<T> {
    cfg: ModalConfig,
    map: PathwayMap,
    d: usize,
    mask: Tensor2D<T>,
    smlp_w: ParamId,
    smlp_b: ParamId,
    smlp_dense: Option<Linear>,
    mixer: Mixer,
    compress_w: ParamId,
    compress_b: ParamId,
    tabular: Option<MlpBlock>,
}

impl<T: Real> ModalEncoders<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        map: PathwayMap,
        d: usize,
        cfg: &ModalConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (ng, np, dg) = (map.n_genes(), map.n_pathways(), cfg.d_gp);
        let mask = Tensor2D::from_fn(ng, np * dg, |gene, col| {
            if map.contains(col / dg, gene) {
                T::one()
            } else {
                T::zero()
            }
        });
        let fan_in = (ng as f64 / np as f64).max(1.0);
        let smlp_w = store.add_uniform(
            "adapter.modal.smlp.masked.weight",
            ng,
            np * dg,
            1.0 / fan_in.sqrt(),
            rng,
        );
        let smlp_b = store.add_zeros("adapter.modal.smlp.masked.bias", 1, np * dg);
        let smlp_dense = cfg
            .smlp_dense_layer
            .then(|| Linear::new(store, "adapter.modal.smlp.dense", dg, dg, true, rng));
        let mixer = Mixer::new(store, "adapter.modal.mixer", np, dg, d, cfg, rng)?;
        let compress_w = store.add_uniform(
            "adapter.modal.compress.weight",
            cfg.n_tokens,
            np,
            1.0 / (np as f64).sqrt(),
            rng,
        );
        let compress_b = store.add_zeros("adapter.modal.compress.bias", cfg.n_tokens, 1);
        let tabular = match &cfg.clinical {
            Some(schema) => {
                let w = 2 * schema.width();
                Some(MlpBlock::new(
                    store,
                    "adapter.modal.tabular",
                    w,
                    d as f64 / w as f64,
                    d,
                    0.0,
                    rng,
                )?)
            }
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            map,
            d,
            mask,
            smlp_w,
            smlp_b,
            smlp_dense,
            mixer,
            compress_w,
            compress_b,
            tabular,
        })
    }

    pub fn config(&self) -> &ModalConfig {
        &self.cfg
    }

    pub fn map(&self) -> &PathwayMap {
        &self.map
    }

    /// Number of modal tokens (`N_t`, plus one when clinical data is used).
    pub fn n_tokens(&self) -> usize {
        self.cfg.n_tokens + usize::from(self.tabular.is_some())
    }

    pub fn n_pathway_tokens(&self) -> usize {
        self.cfg.n_tokens
    }

    pub fn compress_ids(&self) -> (ParamId, ParamId) {
        (self.compress_w, self.compress_b)
    }

    /// Pathway features `N_gp x D_gp`.
    pub fn smlp_forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        expression: &[f32],
    ) -> Result<Var> {
        if expression.len() != self.map.n_genes() {
            return Err(Error::dim(
                "smlp_forward",
                format!(
                    "expression has {} genes, pathway map {}",
                    expression.len(),
                    self.map.n_genes()
                ),
            ));
        }
        let x = g.constant(Tensor2D::row_vector(
            expression.iter().map(|&v| T::lit(f64::from(v))).collect(),
        ));
        let w = g.param(store, self.smlp_w);
        let m = g.constant_ref(&self.mask);
        let wm = g.mul(w, m)?;
        let h = g.matmul(x, wm)?;
        let b = g.param(store, self.smlp_b);
        let h = g.add_row(h, b)?;
        let h = g.reshape(h, self.map.n_pathways(), self.cfg.d_gp)?;
        match &self.smlp_dense {
            Some(dense) => {
                let h = g.gelu(h);
                dense.forward(g, store, h)
            }
            None => Ok(h),
        }
    }

    pub fn mixer_forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        pathways: Var,
        ctx: Dropout,
    ) -> Result<Var> {
        self.mixer.forward(g, store, pathways, ctx)
    }

    /// `W_c F + b`, mixing across the pathway axis: `N_gp x D -> N_t x D`.
    pub fn compress_pathways<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        f: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.compress_w);
        let b = g.param(store, self.compress_b);
        let y = g.matmul(w, f)?;
        g.add_col(y, b)
    }

    pub fn tabular_encode<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        c: &ClinicalFeatures,
    ) -> Result<Var> {
        let mlp = self
            .tabular
            .as_ref()
            .ok_or_else(|| Error::arg("no clinical schema configured"))?;
        if c.values.len() != c.presence.len() || 2 * c.values.len() != mlp.fc1.in_dim {
            return Err(Error::dim(
                "tabular_encode",
                format!("{} clinical columns", c.values.len()),
            ));
        }
        let mut row: Vec<T> = c
            .values
            .iter()
            .zip(&c.presence)
            .map(|(&v, &p)| if p { T::lit(f64::from(v)) } else { T::zero() })
            .collect();
        row.extend(c.presence.iter().map(|&p| if p { T::one() } else { T::zero() }));
        let x = g.constant(Tensor2D::row_vector(row));
        mlp.forward(g, store, x, Dropout::eval())
    }

    /// Compressed pathway tokens `N_t x D`.
    pub fn transcriptomic_tokens<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        expression: &[f32],
        ctx: Dropout,
    ) -> Result<Var> {
        let p = self.smlp_forward(g, store, expression)?;
        let f = self.mixer_forward(g, store, p, ctx)?;
        self.compress_pathways(g, store, f)
    }

    /// Clinical token (when configured) following the given pathway tokens.
    pub fn assemble<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        pathway_tokens: Var,
        inputs: &ModalInputs,
    ) -> Result<Var> {
        if g.shape(pathway_tokens) != (self.cfg.n_tokens, self.d) {
            return Err(Error::dim(
                "modal tokens",
                format!("{:?} != {}x{}", g.shape(pathway_tokens), self.cfg.n_tokens, self.d),
            ));
        }
        match (&self.tabular, &inputs.clinical) {
            (None, _) => Ok(pathway_tokens),
            (Some(_), Some(c)) => {
                let t = self.tabular_encode(g, store, c)?;
                concat_modalities(g, &[pathway_tokens, t])
            }
            (Some(_), None) => Err(Error::arg(
                "clinical modality configured but missing for this patient",
            )),
        }
    }
}

/// Row-stack modality tokens in the given order.
pub fn concat_modalities<T: Real>(g: &mut Graph<'_, T>, tokens: &[Var]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::arg("no modalities to concatenate"));
    }
    if tokens.len() == 1 {
        return Ok(tokens[0]);
    }
    g.concat_rows(tokens)
}
