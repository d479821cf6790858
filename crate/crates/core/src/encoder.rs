//! Frozen transformer slide encoder.
//!
//! Patch features are projected to width `D`, a CLS token is prepended, and
//! `L` pre-norm layers run in `B` equal blocks so the adapter can interleave
//! with them.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    rng, AttentionParams, Dropout, Graph, LayerNorm, Linear, MlpBlock, ParamId, ParamStore, Real,
    StoreKind, Tensor2D, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Dense,
    Dilated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_img: usize,
    pub d: usize,
    pub layers: usize,
    pub blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub attention_mode: AttentionMode,
    pub segment_lengths: Vec<usize>,
    pub dilation_ratios: Vec<usize>,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            d_img: 64,
            d: 64,
            layers: 6,
            blocks: 3,
            n_heads: 4,
            ff_dim: 256,
            attention_mode: AttentionMode::Dense,
            segment_lengths: vec![16, 32, 64],
            dilation_ratios: vec![1, 2, 4],
        }
    }

    pub fn full_scale() -> Self {
        Self {
            d_img: 1536,
            d: 768,
            layers: 12,
            blocks: 3,
            n_heads: 16,
            ff_dim: 3072,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers % self.blocks != 0 {
            return Err(Error::arg(format!(
                "{} layers cannot be split into {} blocks",
                self.layers, self.blocks
            )));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::arg(format!(
                "{} heads do not divide width {}",
                self.n_heads, self.d
            )));
        }
        if self.attention_mode == AttentionMode::Dilated {
            if self.segment_lengths.is_empty()
                || self.segment_lengths.len() != self.dilation_ratios.len()
            {
                return Err(Error::arg(
                    "segment_lengths and dilation_ratios must be nonempty and equal length",
                ));
            }
            for (&s, &r) in self.segment_lengths.iter().zip(&self.dilation_ratios) {
                check_segment(s, r)?;
            }
        }
        Ok(())
    }

    pub fn layers_per_block(&self) -> usize {
        self.layers / self.blocks
    }
}

fn check_segment(segment_len: usize, ratio: usize) -> Result<()> {
    if segment_len < 1 {
        return Err(Error::arg("segment length must be at least 1"));
    }
    if ratio < 1 || segment_len % ratio != 0 {
        return Err(Error::arg(format!(
            "dilation ratio {ratio} does not divide segment length {segment_len}"
        )));
    }
    Ok(())
}

/// One patient's bag of patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub patient_id: String,
    pub features: Tensor2D<f32>,
    pub slide_ids: Vec<String>,
}

impl FeatureBag {
    pub fn new(patient_id: impl Into<String>, features: Tensor2D<f32>) -> Result<Self> {
        let patient_id = patient_id.into();
        if features.rows() == 0 {
            return Err(Error::arg(format!("bag {patient_id} has no patches")));
        }
        if !features.is_finite() {
            return Err(Error::numeric(
                format!("bag {patient_id}"),
                "non-finite feature",
            ));
        }
        Ok(Self {
            slide_ids: vec![format!("{patient_id}-S1")],
            patient_id,
            features,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.features.rows()
    }
}

/// A token sequence in the image stream, tracking whether CLS is present.
#[derive(Clone, Copy, Debug)]
pub struct ImageTokens {
    pub var: Var,
    pub has_cls: bool,
}

/// Attention mask over `n_patches + 1` tokens for the union of the given
/// (segment, ratio) patterns. Position 0 is CLS and is unrestricted; patch
/// `i` and patch `j` may attend iff for some pattern they share a segment
/// and the same residue modulo the ratio within it.
pub fn dilated_mask(n_patches: usize, patterns: &[(usize, usize)]) -> Result<Arc<Vec<bool>>> {
    for &(s, r) in patterns {
        check_segment(s, r)?;
    }
    let n = n_patches + 1;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = i == 0
                || j == 0
                || patterns.iter().any(|&(s, r)| {
                    let (pi, pj) = (i - 1, j - 1);
                    pi / s == pj / s && (pi % s) % r == (pj % s) % r
                });
        }
    }
    Ok(Arc::new(mask))
}

/// Single-pattern dilated self-attention over a CLS-prefixed sequence.
pub fn dilated_attention<'a, T: Real>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    f: Var,
    segment_len: usize,
    ratio: usize,
    p: &AttentionParams,
) -> Result<crate::numerics::AttentionOutput> {
    let n = g.shape(f).0;
    if n == 0 {
        return Err(Error::arg("empty sequence"));
    }
    let mask = dilated_mask(n - 1, &[(segment_len, ratio)])?;
    p.forward(g, store, f, f, Some(&mask))
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: AttentionParams,
    ln2: LayerNorm,
    ff: MlpBlock,
}

/// Output of one encoder block.
pub struct BlockOutput {
    pub tokens: ImageTokens,
    /// Per-head self-attention weights of the block's last layer.
    pub last_attention: Vec<Var>,
}

/// The frozen slide encoder: its weights never receive gradients.
#[derive(Debug)]
pub struct SlideEncoder<T> {
    cfg: EncoderConfig,
    store: ParamStore<T>,
    patch_proj: Linear,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
    layer_calls: AtomicUsize,
}

impl<T: Real> Clone for SlideEncoder<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            patch_proj: self.patch_proj.clone(),
            cls: self.cls,
            layers: self.layers.clone(),
            layer_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> SlideEncoder<T> {
    /// Seeded random stand-in for pre-trained weights.
    pub fn init_frozen(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed, "slide-encoder");
        let mut store = ParamStore::new(StoreKind::Frozen);
        let d = cfg.d;
        let patch_proj = Linear::new(&mut store, "encoder.patch_proj", cfg.d_img, d, true, &mut rng);
        let cls = store.add_uniform("encoder.cls_token", 1, d, 1.0, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("encoder.layer{l}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), d),
                attn: AttentionParams::new(
                    &mut store,
                    &format!("{name}.attn"),
                    d,
                    cfg.n_heads,
                    bound,
                    &mut rng,
                )?,
                ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), d),
                ff: MlpBlock::new(
                    &mut store,
                    &format!("{name}.ff"),
                    d,
                    cfg.ff_dim as f64 / d as f64,
                    d,
                    0.0,
                    &mut rng,
                )?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            patch_proj,
            cls,
            layers,
            layer_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Replace every weight from named tensors (e.g. a `.mtw` file).
    pub fn load_weights(&mut self, named: &[(String, Tensor2D<T>)]) -> Result<()> {
        self.store.load_from(named)
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn cls_token(&self) -> &Tensor2D<T> {
        self.store.get(self.cls)
    }

    pub fn layer_calls(&self) -> usize {
        self.layer_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.layer_calls.store(0, Ordering::Relaxed);
    }

    pub fn bag_input(&self, g: &mut Graph<'_, T>, bag: &FeatureBag) -> Result<Var> {
        if bag.features.cols() != self.cfg.d_img {
            return Err(Error::dim(
                "embed_patches",
                format!(
                    "bag width {} but encoder expects {}",
                    bag.features.cols(),
                    self.cfg.d_img
                ),
            ));
        }
        Ok(g.constant(bag.features.cast()))
    }

    pub fn embed_patches<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<ImageTokens> {
        if g.shape(x).1 != self.cfg.d_img {
            return Err(Error::dim(
                "embed_patches",
                format!("width {} != {}", g.shape(x).1, self.cfg.d_img),
            ));
        }
        Ok(ImageTokens {
            var: self.patch_proj.forward(g, &self.store, x)?,
            has_cls: false,
        })
    }

    pub fn prepend_cls<'a>(&'a self, g: &mut Graph<'a, T>, f: ImageTokens) -> Result<ImageTokens> {
        if f.has_cls {
            return Err(Error::arg("CLS token already prepended"));
        }
        if g.shape(f.var).1 != self.cfg.d {
            return Err(Error::dim("prepend_cls", "width differs from D"));
        }
        let cls = g.param(&self.store, self.cls);
        Ok(ImageTokens {
            var: g.concat_rows(&[cls, f.var])?,
            has_cls: true,
        })
    }

    fn mask_for(&self, n_tokens: usize) -> Result<Option<Arc<Vec<bool>>>> {
        match self.cfg.attention_mode {
            AttentionMode::Dense => Ok(None),
            AttentionMode::Dilated => {
                let patterns: Vec<(usize, usize)> = self
                    .cfg
                    .segment_lengths
                    .iter()
                    .copied()
                    .zip(self.cfg.dilation_ratios.iter().copied())
                    .collect();
                dilated_mask(n_tokens - 1, &patterns).map(Some)
            }
        }
    }

    /// The `L/B` layers of block `block_idx`.
    pub fn block_forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: ImageTokens,
        block_idx: usize,
    ) -> Result<BlockOutput> {
        if block_idx >= self.cfg.blocks {
            return Err(Error::arg(format!(
                "block {block_idx} out of range (B = {})",
                self.cfg.blocks
            )));
        }
        if !x.has_cls {
            return Err(Error::arg("block input must carry the CLS token"));
        }
        let per = self.cfg.layers_per_block();
        let mask = self.mask_for(g.shape(x.var).0)?;
        let mut h = x.var;
        let mut last_attention = Vec::new();
        for l in block_idx * per..(block_idx + 1) * per {
            let layer = &self.layers[l];
            let n1 = layer.ln1.forward(g, &self.store, h)?;
            let att = layer.attn.forward(g, &self.store, n1, n1, mask.as_ref())?;
            h = g.add(h, att.out)?;
            let n2 = layer.ln2.forward(g, &self.store, h)?;
            let ff = layer.ff.forward(g, &self.store, n2, Dropout::eval())?;
            h = g.add(h, ff)?;
            g.ensure_finite(h, || format!("encoder layer {l}"))?;
            self.layer_calls.fetch_add(1, Ordering::Relaxed);
            last_attention = att.weights;
        }
        Ok(BlockOutput {
            tokens: ImageTokens {
                var: h,
                has_cls: true,
            },
            last_attention,
        })
    }

    /// Adapter-free pass; returns the final token sequence.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, bag: &FeatureBag) -> Result<Var> {
        let x = self.bag_input(g, bag)?;
        let f = self.embed_patches(g, x)?;
        let mut f = self.prepend_cls(g, f)?;
        for b in 0..self.cfg.blocks {
            f = self.block_forward(g, f, b)?.tokens;
        }
        Ok(f.var)
    }

    /// Final CLS row of the adapter-free pass.
    pub fn cls_embedding(&self, bag: &FeatureBag) -> Result<Tensor2D<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, bag)?;
        let cls = g.slice_rows(out, 0, 1)?;
        Ok(g.value(cls).clone())
    }
}
