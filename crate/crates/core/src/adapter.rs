//! Modal adapter: task prompts, feature injectors/extractors interleaved with
//! the frozen encoder blocks, and the output fusion head.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeatureBag, ImageTokens, SlideEncoder};
use crate::error::{Error, Result};
use crate::io;
use crate::modal::{ModalConfig, ModalEncoders, ModalInputs, PathwayMap};
use crate::numerics::{
    rng, AttentionParams, Dropout, Graph, LayerNorm, Linear, MlpBlock, ParamId, ParamStore, Real,
    StoreKind, Var,
};

/// General prompt index.
pub const TASK_GENERAL: usize = 1;
pub const TASK_SURVIVAL: usize = 2;
pub const TASK_SUBTYPE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_heads: usize,
    pub ff_ratio: f64,
    pub dropout: f64,
    pub d_final: usize,
    pub n_tasks: usize,
    /// Replace the modal encoders by trainable tokens.
    pub single_modal: bool,
    /// Trainable linear map appended after the fusion head.
    pub output_projection: Option<usize>,
}

impl AdapterConfig {
    pub fn desk() -> Self {
        Self {
            n_heads: 4,
            ff_ratio: 0.25,
            dropout: 0.1,
            d_final: 64,
            n_tasks: 3,
            single_modal: false,
            output_projection: None,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            n_heads: 12,
            d_final: 256,
            ..Self::desk()
        }
    }

    /// Width of the vector compared against text targets.
    pub fn output_dim(&self) -> usize {
        self.output_projection.unwrap_or(self.d_final)
    }
}

#[derive(Clone, Debug)]
struct AdapterBlock {
    inj_ln_img: LayerNorm,
    inj_ln_mm: LayerNorm,
    inj_attn: AttentionParams,
    gamma: ParamId,
    ext_ln_mm: LayerNorm,
    ext_ln_img: LayerNorm,
    ext_cross: AttentionParams,
    ext_ln_mlp: LayerNorm,
    ext_mlp: MlpBlock,
    ext_self: AttentionParams,
}

#[derive(Clone, Debug)]
enum ModalSource<T> {
    Encoders(Box<ModalEncoders<T>>),
    Substitute { tokens: ParamId, n_tokens: usize },
}

/// Per-head attention weights recorded during a traced forward.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// Encoder self-attention of the block's last layer, `(N+1) x (N+1)`.
    pub encoder: Vec<Var>,
    /// Image query over modal keys, `(N+1) x (N_mm+1)`.
    pub injector: Vec<Var>,
    /// Modal query over image keys, `(N_mm+1) x (N+1)`.
    pub extractor_cross: Vec<Var>,
    pub extractor_self: Vec<Var>,
}

/// Graph handles for one task branch.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub task: usize,
    pub z_img: Var,
    pub z_task: Var,
    pub z_mm: Var,
    pub z_comb: Var,
    /// `z_comb`, or its model-side projection when configured.
    pub output: Var,
    pub image_stream: Var,
    pub modal_stream: Var,
    pub trace: Vec<BlockTrace>,
}

/// Evaluated outputs of one task branch.
#[derive(Clone, Debug)]
pub struct AdapterOutput<T> {
    pub z_img: Vec<T>,
    pub z_task: Vec<T>,
    pub z_mm: Vec<T>,
    pub z_comb: Vec<T>,
    pub output: Vec<T>,
}

impl<T: Real> AdapterOutput<T> {
    pub fn read(g: &Graph<'_, T>, v: &AdapterVars) -> Self {
        let row = |x: Var| g.value(x).data().to_vec();
        Self {
            z_img: row(v.z_img),
            z_task: row(v.z_task),
            z_mm: row(v.z_mm),
            z_comb: row(v.z_comb),
            output: row(v.output),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub dropout: Dropout,
    pub trace: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            dropout: Dropout::eval(),
            trace: false,
        }
    }

    pub fn traced() -> Self {
        Self {
            trace: true,
            ..Self::eval()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub inject: usize,
    pub extract: usize,
    pub task_passes: usize,
}

/// All trainable parameters and their layout.
#[derive(Debug)]
pub struct AdapterState<T> {
    cfg: AdapterConfig,
    d: usize,
    store: ParamStore<T>,
    modal: ModalSource<T>,
    prompts: Vec<ParamId>,
    blocks: Vec<AdapterBlock>,
    fusion_ln: LayerNorm,
    fusion_mlp: MlpBlock,
    output_proj: Option<Linear>,
    inject_calls: AtomicUsize,
    extract_calls: AtomicUsize,
    task_passes: AtomicUsize,
}

impl<T: Real> Clone for AdapterState<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            d: self.d,
            store: self.store.clone(),
            modal: self.modal.clone(),
            prompts: self.prompts.clone(),
            blocks: self.blocks.clone(),
            fusion_ln: self.fusion_ln.clone(),
            fusion_mlp: self.fusion_mlp.clone(),
            output_proj: self.output_proj.clone(),
            inject_calls: AtomicUsize::new(0),
            extract_calls: AtomicUsize::new(0),
            task_passes: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> AdapterState<T> {
    pub fn new(
        enc: &EncoderConfig,
        modal_cfg: &ModalConfig,
        map: PathwayMap,
        cfg: &AdapterConfig,
        seed: u64,
    ) -> Result<Self> {
        if cfg.n_tasks == 0 {
            return Err(Error::arg("at least one task prompt required"));
        }
        let d = enc.d;
        let mut rng = rng::seeded(seed, "adapter");
        let mut store = ParamStore::new(StoreKind::Trainable);
        let bound = 1.0 / (d as f64).sqrt();
        let modal = if cfg.single_modal {
            let n = modal_cfg.n_tokens;
            ModalSource::Substitute {
                tokens: store.add_uniform("adapter.modal.substitute", n, d, bound, &mut rng),
                n_tokens: n,
            }
        } else {
            ModalSource::Encoders(Box::new(ModalEncoders::new(
                &mut store, map, d, modal_cfg, &mut rng,
            )?))
        };
        let prompts = (1..=cfg.n_tasks)
            .map(|j| store.add_uniform(format!("adapter.prompt.task{j}"), 1, d, bound, &mut rng))
            .collect();
        let mut blocks = Vec::with_capacity(enc.blocks);
        for b in 0..enc.blocks {
            let n = format!("adapter.block{b}");
            let s = &mut store;
            let r = &mut rng;
            blocks.push(AdapterBlock {
                inj_ln_img: LayerNorm::new(s, &format!("{n}.inject.ln_img"), d),
                inj_ln_mm: LayerNorm::new(s, &format!("{n}.inject.ln_mm"), d),
                inj_attn: AttentionParams::new(s, &format!("{n}.inject.attn"), d, cfg.n_heads, bound, r)?,
                gamma: s.add_zeros(format!("{n}.inject.gamma"), 1, d),
                ext_ln_mm: LayerNorm::new(s, &format!("{n}.extract.ln_mm"), d),
                ext_ln_img: LayerNorm::new(s, &format!("{n}.extract.ln_img"), d),
                ext_cross: AttentionParams::new(s, &format!("{n}.extract.cross"), d, cfg.n_heads, bound, r)?,
                ext_ln_mlp: LayerNorm::new(s, &format!("{n}.extract.ln_mlp"), d),
                ext_mlp: MlpBlock::new(s, &format!("{n}.extract.mlp"), d, cfg.ff_ratio, d, cfg.dropout, r)?,
                ext_self: AttentionParams::new(s, &format!("{n}.extract.self"), d, cfg.n_heads, bound, r)?,
            });
        }
        let fusion_ln = LayerNorm::new(&mut store, "adapter.fusion.ln", d);
        let fusion_mlp = MlpBlock::new(
            &mut store,
            "adapter.fusion.mlp",
            d,
            1.0,
            cfg.d_final,
            cfg.dropout,
            &mut rng,
        )?;
        let output_proj = cfg.output_projection.map(|out| {
            Linear::new(&mut store, "adapter.output_projection", cfg.d_final, out, false, &mut rng)
        });
        Ok(Self {
            cfg: cfg.clone(),
            d,
            store,
            modal,
            prompts,
            blocks,
            fusion_ln,
            fusion_mlp,
            output_proj,
            inject_calls: AtomicUsize::new(0),
            extract_calls: AtomicUsize::new(0),
            task_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn n_tasks(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_single_modal(&self) -> bool {
        matches!(self.modal, ModalSource::Substitute { .. })
    }

    pub fn modal_encoders(&self) -> Option<&ModalEncoders<T>> {
        match &self.modal {
            ModalSource::Encoders(m) => Some(m),
            ModalSource::Substitute { .. } => None,
        }
    }

    /// Number of modal rows before the prompt is attached.
    pub fn n_modal_tokens(&self) -> usize {
        match &self.modal {
            ModalSource::Encoders(m) => m.n_tokens(),
            ModalSource::Substitute { n_tokens, .. } => *n_tokens,
        }
    }

    pub fn prompt_id(&self, j: usize) -> Result<ParamId> {
        self.check_task(j)?;
        Ok(self.prompts[j - 1])
    }

    pub fn gamma_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.gamma).collect()
    }

    fn check_task(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.prompts.len() {
            return Err(Error::arg(format!(
                "task index {j} outside 1..={}",
                self.prompts.len()
            )));
        }
        Ok(())
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            inject: self.inject_calls.load(Ordering::Relaxed),
            extract: self.extract_calls.load(Ordering::Relaxed),
            task_passes: self.task_passes.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        self.inject_calls.store(0, Ordering::Relaxed);
        self.extract_calls.store(0, Ordering::Relaxed);
        self.task_passes.store(0, Ordering::Relaxed);
    }

    /// The replaceable transcriptomics tokens (`N_t x D`); for the
    /// single-modal variant, the substitute tokens.
    pub fn pathway_tokens<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        inputs: &ModalInputs,
        ctx: Dropout,
    ) -> Result<Var> {
        match &self.modal {
            ModalSource::Encoders(m) => {
                m.transcriptomic_tokens(g, &self.store, &inputs.expression, ctx)
            }
            ModalSource::Substitute { tokens, .. } => Ok(g.param(&self.store, *tokens)),
        }
    }

    /// `F_mm^0` without the prompt row.
    pub fn modal_tokens<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        pathway_tokens: Var,
        inputs: &ModalInputs,
    ) -> Result<Var> {
        match &self.modal {
            ModalSource::Encoders(m) => m.assemble(g, &self.store, pathway_tokens, inputs),
            ModalSource::Substitute { .. } => Ok(pathway_tokens),
        }
    }

    /// Append prompt `j` as the last row.
    pub fn attach_task_prompt<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        f_mm: Var,
        j: usize,
    ) -> Result<Var> {
        let p = self.prompt_id(j)?;
        let p = g.param(&self.store, p);
        g.concat_rows(&[f_mm, p])
    }

    /// `F + gamma * CrossAttn(LN(F), LN(F_mm))`.
    pub fn inject<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        block: usize,
        f_img: Var,
        f_mm: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let b = &self.blocks[block];
        let s = &self.store;
        let qi = b.inj_ln_img.forward(g, s, f_img)?;
        let kv = b.inj_ln_mm.forward(g, s, f_mm)?;
        let att = b.inj_attn.forward(g, s, qi, kv, None)?;
        let gamma = g.param(s, b.gamma);
        let gated = g.mul_row(att.out, gamma)?;
        self.inject_calls.fetch_add(1, Ordering::Relaxed);
        Ok((g.add(f_img, gated)?, att.weights))
    }

    /// Cross-attention residual, then `SelfAttn(F^ + MLP(LN(F^)))`.
    pub fn extract<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        block: usize,
        f_mm: Var,
        f_img_next: Var,
        ctx: Dropout,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let b = &self.blocks[block];
        let s = &self.store;
        let q = b.ext_ln_mm.forward(g, s, f_mm)?;
        let kv = b.ext_ln_img.forward(g, s, f_img_next)?;
        let cross = b.ext_cross.forward(g, s, q, kv, None)?;
        let hat = g.add(f_mm, cross.out)?;
        let n = b.ext_ln_mlp.forward(g, s, hat)?;
        let m = b.ext_mlp.forward(g, s, n, ctx)?;
        let x = g.add(hat, m)?;
        let sa = b.ext_self.forward(g, s, x, x, None)?;
        self.extract_calls.fetch_add(1, Ordering::Relaxed);
        Ok((sa.out, cross.weights, sa.weights))
    }

    /// `MLP(LN(z_img + z_mm + z_task))`.
    pub fn fuse_outputs<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        z_img: Var,
        z_mm: Var,
        z_task: Var,
        ctx: Dropout,
    ) -> Result<Var> {
        let s = g.add(z_img, z_mm)?;
        let s = g.add(s, z_task)?;
        let n = self.fusion_ln.forward(g, &self.store, s)?;
        self.fusion_mlp.forward(g, &self.store, n, ctx)
    }

    /// One task branch from the CLS-prefixed patch tokens and `F_mm^0`.
    pub fn task_forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        encoder: &'a SlideEncoder<T>,
        image: ImageTokens,
        modal: Var,
        j: usize,
        opts: ForwardOptions,
    ) -> Result<AdapterVars> {
        if encoder.config().blocks != self.blocks.len() || encoder.config().d != self.d {
            return Err(Error::dim(
                "adapter_forward",
                "encoder blocks or width differ from the adapter layout",
            ));
        }
        let ctx = opts.dropout.scoped(j as u64);
        let n_mm = g.shape(modal).0;
        let mut f_mm = self.attach_task_prompt(g, modal, j)?;
        let mut img = image;
        let mut trace = Vec::new();
        self.task_passes.fetch_add(1, Ordering::Relaxed);
        for b in 0..self.blocks.len() {
            let (injected, inj_w) = self.inject(g, b, img.var, f_mm)?;
            let out = encoder.block_forward(
                g,
                ImageTokens {
                    var: injected,
                    has_cls: true,
                },
                b,
            )?;
            img = out.tokens;
            let (next_mm, cross_w, self_w) = self.extract(g, b, f_mm, img.var, ctx)?;
            f_mm = next_mm;
            g.ensure_finite(f_mm, || format!("adapter block {b}"))?;
            if opts.trace {
                trace.push(BlockTrace {
                    encoder: out.last_attention,
                    injector: inj_w,
                    extractor_cross: cross_w,
                    extractor_self: self_w,
                });
            }
        }
        let z_img = g.slice_rows(img.var, 0, 1)?;
        let z_task = g.slice_rows(f_mm, n_mm, 1)?;
        let rows = g.slice_rows(f_mm, 0, n_mm)?;
        let z_mm = g.mean_rows(rows);
        let z_comb = self.fuse_outputs(g, z_img, z_mm, z_task, ctx)?;
        let output = match &self.output_proj {
            Some(p) => p.forward(g, &self.store, z_comb)?,
            None => z_comb,
        };
        Ok(AdapterVars {
            task: j,
            z_img,
            z_task,
            z_mm,
            z_comb,
            output,
            image_stream: img.var,
            modal_stream: f_mm,
            trace,
        })
    }

    /// Full forward for the listed tasks; modal encoding runs once and is
    /// shared across the task branches. `pathway_override` replaces the
    /// compressed transcriptomics tokens.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        encoder: &'a SlideEncoder<T>,
        bag: &FeatureBag,
        inputs: &ModalInputs,
        tasks: &[usize],
        pathway_override: Option<Var>,
        opts: ForwardOptions,
    ) -> Result<Vec<AdapterVars>> {
        for &j in tasks {
            self.check_task(j)?;
        }
        let x = encoder.bag_input(g, bag)?;
        let f = encoder.embed_patches(g, x)?;
        let image = encoder.prepend_cls(g, f)?;
        let pathways = match pathway_override {
            Some(v) => v,
            None => self.pathway_tokens(g, inputs, opts.dropout)?,
        };
        let modal = self.modal_tokens(g, pathways, inputs)?;
        tasks
            .iter()
            .map(|&j| self.task_forward(g, encoder, image, modal, j, opts))
            .collect()
    }

    /// Eval-mode outputs for one task.
    pub fn evaluate(
        &self,
        encoder: &SlideEncoder<T>,
        bag: &FeatureBag,
        inputs: &ModalInputs,
        j: usize,
    ) -> Result<AdapterOutput<T>> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, encoder, bag, inputs, &[j], None, ForwardOptions::eval())?;
        Ok(AdapterOutput::read(&g, &vars[0]))
    }

    /// A copy whose modal encoders are replaced by `n_tokens` trainable
    /// vectors; every other parameter is carried over.
    pub fn single_modal_substitute(&self, n_tokens: usize, seed: u64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.single_modal = true;
        let layout = EncoderConfig {
            d: self.d,
            blocks: self.blocks.len(),
            ..EncoderConfig::desk()
        };
        let modal_cfg = ModalConfig {
            n_tokens,
            ..ModalConfig::desk()
        };
        let mut out = Self::new(&layout, &modal_cfg, PathwayMap::identity(1), &cfg, seed)?;
        for (id, name, t) in self.store.iter() {
            if let Some(dst) = out.store.find(name) {
                if out.store.get(dst).shape() == t.shape() {
                    *out.store.get_mut(dst) = self.store.get(id).clone();
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_mtw(path, &self.store.named_tensors())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = io::read_mtw::<T>(path)?;
        self.store.load_from(&named)
    }
}

/// Parameter totals, counting masked S-MLP entries as absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
}

/// Closed-form counts for a configuration; `memberships` is the number of
/// nonzero gene/pathway pairs.
pub fn param_counts(
    enc: &EncoderConfig,
    modal: &ModalConfig,
    cfg: &AdapterConfig,
    n_genes: usize,
    n_pathways: usize,
    memberships: usize,
) -> ParamCounts {
    let d = enc.d;
    let linear = |i: usize, o: usize, bias: bool| i * o + if bias { o } else { 0 };
    let ln = 2 * d;
    let hidden = |i: usize, r: f64| ((i as f64 * r).round() as usize).max(1);
    let mlp = |i: usize, r: f64, o: usize| {
        let h = hidden(i, r);
        linear(i, h, true) + linear(h, o, true)
    };
    let attn = 4 * d * d;
    let frozen = linear(enc.d_img, d, true)
        + d
        + enc.layers * (ln + attn + ln + mlp(d, enc.ff_dim as f64 / d as f64, d));

    let dg = modal.d_gp;
    let modal_params = if cfg.single_modal {
        modal.n_tokens * d
    } else {
        let _ = n_genes;
        let smlp = memberships * dg
            + n_pathways * dg
            + if modal.smlp_dense_layer { linear(dg, dg, true) } else { 0 };
        let mixer = modal.mixer_layers
            * (2 * dg + mlp(n_pathways, modal.mixer_ratio, n_pathways) + 2 * dg
                + mlp(dg, modal.mixer_ratio, dg))
            + 2 * dg
            + linear(dg, d, true);
        let compress = modal.n_tokens * n_pathways + modal.n_tokens;
        let tabular = modal.clinical.as_ref().map_or(0, |s| {
            let w = 2 * s.width();
            mlp(w, d as f64 / w as f64, d)
        });
        smlp + mixer + compress + tabular
    };
    let block = 2 * ln + attn + d + 2 * ln + attn + ln + mlp(d, cfg.ff_ratio, d) + attn;
    let trainable = modal_params
        + cfg.n_tasks * d
        + enc.blocks * block
        + ln
        + mlp(d, 1.0, cfg.d_final)
        + cfg.output_projection.map_or(0, |o| cfg.d_final * o);
    ParamCounts { trainable, frozen }
}

/// Store size minus the structurally masked S-MLP entries.
pub fn effective_trainable<T: Real>(state: &AdapterState<T>) -> usize {
    let total = state.store.scalar_count();
    match state.modal_encoders() {
        Some(m) => {
            let dg = m.config().d_gp;
            let map = m.map();
            let members: usize = (0..map.n_pathways()).map(|p| map.members(p).len()).sum();
            total - (map.n_genes() * map.n_pathways() - members) * dg
        }
        None => total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionMode;
    use crate::numerics::{check_store, GradCheckOptions, Tensor2D};

    pub(crate) fn toy_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            d_img: 6,
            d: 8,
            layers: 2,
            blocks: 2,
            n_heads: 2,
            ff_dim: 16,
            attention_mode: AttentionMode::Dense,
            segment_lengths: vec![8],
            dilation_ratios: vec![1],
        }
    }

    fn toy_modal_cfg() -> ModalConfig {
        ModalConfig {
            d_gp: 4,
            n_tokens: 2,
            mixer_layers: 1,
            ..ModalConfig::desk()
        }
    }

    fn toy_map() -> PathwayMap {
        let genes: Vec<String> = (0..8).map(|g| format!("g{g}")).collect();
        let names: Vec<String> = (0..4).map(|p| format!("p{p}")).collect();
        let members = (0..4).map(|p| vec![2 * p, 2 * p + 1]).collect();
        PathwayMap::new(genes, names, members).unwrap()
    }

    fn toy_adapter_cfg() -> AdapterConfig {
        AdapterConfig {
            n_heads: 2,
            d_final: 6,
            ..AdapterConfig::desk()
        }
    }

    fn bag(n: usize, seed: u64) -> FeatureBag {
        let t = Tensor2D::from_fn(n, 6, |i, j| {
            (rng::unit_f64(rng::splitmix64(seed ^ (i * 6 + j) as u64)) as f32) * 2.0 - 1.0
        });
        FeatureBag::new("p", t).unwrap()
    }

    fn inputs(seed: u64) -> ModalInputs {
        ModalInputs {
            expression: (0..8)
                .map(|g| rng::unit_f64(rng::splitmix64(seed.wrapping_add(g))) as f32)
                .collect(),
            clinical: None,
        }
    }

    #[test]
    fn prompt_attachment() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let st = AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2)
            .unwrap();
        let mut g = Graph::new();
        let p = st.pathway_tokens(&mut g, &inputs(3), Dropout::eval()).unwrap();
        let m = st.modal_tokens(&mut g, p, &inputs(3)).unwrap();
        let a = st.attach_task_prompt(&mut g, m, 1).unwrap();
        let b = st.attach_task_prompt(&mut g, m, 3).unwrap();
        assert_eq!(g.shape(a), (3, 8));
        let (va, vb, vm) = (g.value(a), g.value(b), g.value(m));
        for r in 0..2 {
            assert_eq!(va.row(r), vm.row(r));
            assert_eq!(va.row(r), vb.row(r));
        }
        assert_ne!(va.row(2), vb.row(2));
        assert!(st.attach_task_prompt(&mut g, m, 0).is_err());
        assert!(st.attach_task_prompt(&mut g, m, 4).is_err());
    }

    #[test]
    fn gamma_zero_keeps_image_stream() {
        let enc = SlideEncoder::<f32>::init_frozen(&toy_encoder_cfg(), 5).unwrap();
        let st = AdapterState::<f32>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 6)
            .unwrap();
        for s in 0..4 {
            let b = bag(3 + s as usize, s);
            let cls = enc.cls_embedding(&b).unwrap();
            for j in 1..=3 {
                let out = st.evaluate(&enc, &b, &inputs(s), j).unwrap();
                let bits: Vec<u32> = out.z_img.iter().map(|v| v.to_bits()).collect();
                let want: Vec<u32> = cls.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits, want);
            }
        }
    }

    #[test]
    fn inject_with_unit_gate_and_single_token() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let mut cfg = toy_adapter_cfg();
        cfg.n_heads = 1;
        let mut st = AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &cfg, 2).unwrap();
        let b = st.blocks[0].clone();
        for w in [b.inj_attn.w_q, b.inj_attn.w_k, b.inj_attn.w_v, b.inj_attn.w_o] {
            *st.store.get_mut(w) = Tensor2D::identity(8);
        }
        *st.store.get_mut(b.gamma) = Tensor2D::filled(1, 8, 1.0);
        let f_img = Tensor2D::from_fn(3, 8, |i, j| (i * 8 + j) as f64 * 0.1 - 1.0);
        let tok = Tensor2D::from_f64(1, 8, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let fi = g.constant(f_img.clone());
        let fm = g.constant(tok.clone());
        let (out, w) = st.inject(&mut g, 0, fi, fm).unwrap();
        assert!(g.value(w[0]).data().iter().all(|&v| v == 1.0));
        // LN of the token (gain 1, bias 0), projected by identities
        let mean = tok.data().iter().sum::<f64>() / 8.0;
        let var = tok.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let normed: Vec<f64> = tok
            .data()
            .iter()
            .map(|v| (v - mean) / (var + crate::numerics::LN_EPS).sqrt())
            .collect();
        for i in 0..3 {
            for j in 0..8 {
                let want = f_img.get(i, j) + normed[j];
                assert!((g.value(out).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_residual_and_stochastic_self_attention() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let mut st =
            AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2).unwrap();
        let b = st.blocks[0].clone();
        *st.store.get_mut(b.ext_cross.w_v) = Tensor2D::zeros(8, 8);
        let f_mm = Tensor2D::from_fn(3, 8, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        let f_img = Tensor2D::from_fn(4, 8, |i, j| ((3 * i + j) % 7) as f64 * 0.3);
        let mut g = Graph::new();
        let fm = g.constant(f_mm.clone());
        let fi = g.constant(f_img);
        let (_, cross_w, self_w) = st.extract(&mut g, 0, fm, fi, Dropout::eval()).unwrap();
        assert_eq!(g.shape(cross_w[0]), (3, 4));
        for h in &self_w {
            let w = g.value(*h);
            assert_eq!(w.shape(), (3, 3));
            for r in 0..3 {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // the cross-attention residual alone
        let q = b.ext_ln_mm.forward(&mut g, &st.store, fm).unwrap();
        let kv = b.ext_ln_img.forward(&mut g, &st.store, fi).unwrap();
        let c = b.ext_cross.forward(&mut g, &st.store, q, kv, None).unwrap();
        let hat = g.add(fm, c.out).unwrap();
        assert_eq!(g.value(hat), &f_mm);
    }

    #[test]
    fn fusion_is_order_free() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let st = AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2)
            .unwrap();
        let mut g = Graph::new();
        let v: Vec<Var> = (0..3)
            .map(|k| g.constant(Tensor2D::from_fn(1, 8, |_, j| ((k * 8 + j) as f64).sin())))
            .collect();
        let a = st.fuse_outputs(&mut g, v[0], v[1], v[2], Dropout::eval()).unwrap();
        let b = st.fuse_outputs(&mut g, v[2], v[0], v[1], Dropout::eval()).unwrap();
        assert_eq!(g.shape(a), (1, 6));
        let diff: f64 = g
            .value(a)
            .data()
            .iter()
            .zip(g.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn counts_per_forward() {
        let cfg = EncoderConfig {
            layers: 6,
            blocks: 3,
            ..toy_encoder_cfg()
        };
        let enc = SlideEncoder::<f32>::init_frozen(&cfg, 1).unwrap();
        let st = AdapterState::<f32>::new(&cfg, &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2).unwrap();
        st.evaluate(&enc, &bag(4, 1), &inputs(1), 1).unwrap();
        assert_eq!(
            st.counts(),
            CallCounts {
                inject: 3,
                extract: 3,
                task_passes: 1
            }
        );
        assert_eq!(enc.layer_calls(), 6);
    }

    #[test]
    fn z_mm_is_mean_of_modal_rows() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let st = AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2)
            .unwrap();
        let mut g = Graph::new();
        let v = st
            .forward(&mut g, &enc, &bag(4, 2), &inputs(2), &[1], None, ForwardOptions::eval())
            .unwrap();
        let m = g.value(v[0].modal_stream);
        assert_eq!(m.rows(), 3);
        for c in 0..8 {
            let want = (m.get(0, c) + m.get(1, c)) / 2.0;
            assert!((g.value(v[0].z_mm).get(0, c) - want).abs() < 1e-15);
        }
        assert_eq!(g.value(v[0].z_task).row(0), m.row(2));
    }

    #[test]
    fn single_modal_substitute_layout() {
        let enc = SlideEncoder::<f32>::init_frozen(&toy_encoder_cfg(), 1).unwrap();
        let st = AdapterState::<f32>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 2)
            .unwrap();
        let sm = st.single_modal_substitute(2, 9).unwrap();
        assert!(sm.is_single_modal());
        assert!(sm.store().find("adapter.modal.substitute").is_some());
        assert!(sm.store().find("adapter.modal.compress.weight").is_none());
        let p = st.prompt_id(2).unwrap();
        assert_eq!(sm.store().get(sm.prompt_id(2).unwrap()), st.store().get(p));
        let b = bag(3, 4);
        let out = sm.evaluate(&enc, &b, &inputs(0), 1).unwrap();
        assert_eq!(out.z_img, enc.cls_embedding(&b).unwrap().data());
        let mut g = Graph::new();
        let v = sm
            .forward(&mut g, &enc, &b, &inputs(0), &[1], None, ForwardOptions::eval())
            .unwrap();
        assert_eq!(g.shape(v[0].modal_stream), (3, 8));
    }

    #[test]
    fn analytic_counts_match_store() {
        let enc_cfg = toy_encoder_cfg();
        let enc = SlideEncoder::<f32>::init_frozen(&enc_cfg, 1).unwrap();
        for single in [false, true] {
            for proj in [None, Some(5)] {
                let cfg = AdapterConfig {
                    single_modal: single,
                    output_projection: proj,
                    ..toy_adapter_cfg()
                };
                let st = AdapterState::<f32>::new(&enc_cfg, &toy_modal_cfg(), toy_map(), &cfg, 2).unwrap();
                let c = param_counts(&enc_cfg, &toy_modal_cfg(), &cfg, 8, 4, 8);
                assert_eq!(c.frozen, enc.store().scalar_count());
                assert_eq!(c.trainable, effective_trainable(&st), "single={single} proj={proj:?}");
            }
        }
        let full = param_counts(
            &EncoderConfig::full_scale(),
            &ModalConfig::full_scale(),
            &AdapterConfig::full_scale(),
            4987,
            331,
            4987 * 3,
        );
        assert!(full.trainable * 3 < full.frozen, "{full:?}");
    }

    #[test]
    fn end_to_end_gradients_f64() {
        let enc = SlideEncoder::<f64>::init_frozen(&toy_encoder_cfg(), 3).unwrap();
        let mut st =
            AdapterState::<f64>::new(enc.config(), &toy_modal_cfg(), toy_map(), &toy_adapter_cfg(), 4).unwrap();
        // non-zero gates so every path carries gradient
        for id in st.gamma_ids() {
            *st.store.get_mut(id) = Tensor2D::from_fn(1, 8, |_, j| 0.3 - 0.05 * j as f64);
        }
        let b = bag(4, 11);
        let x = inputs(12);
        let target = Tensor2D::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.7).cos());
        let st_ref = &st;
        let rep = check_store(st.store(), GradCheckOptions::f64(), |store, want| {
            let mut probe = st_ref.clone();
            probe.store = store.clone();
            let mut g = Graph::new();
            let vars = probe.forward(&mut g, &enc, &b, &x, &[1, 2, 3], None, ForwardOptions::eval())?;
            let outs: Vec<Var> = vars.iter().map(|v| v.output).collect();
            let z = g.concat_rows(&outs)?;
            let zn = g.l2_normalize_rows(z)?;
            let y = g.constant(target.clone());
            let yn = g.l2_normalize_rows(y)?;
            let kl = g.kl_softmax_rows(zn, yn)?;
            let loss = g.scale(kl, 1.0 / 3.0);
            let value = g.value(loss).get(0, 0);
            if !want {
                return Ok((value, None));
            }
            let grads = g.backward(loss)?;
            Ok((value, Some(grads.param_grads(&g, &probe.store))))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}
