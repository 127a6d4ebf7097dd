//! Patch-sequence transformer encoder with uv-indexed positional
//! embeddings.
//!
//! Unlike a raster-order ViT, the input is an unordered set of patches;
//! each patch looks up its positional embedding by the grid cell of its
//! normalized center coordinate, and the CLS token's final-layer state is
//! the global representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PatchSequence;
use crate::tensor::params::ParameterStore;
use crate::tensor::tape::{Graph, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Architecture of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Per-axis positional grid resolution; uv coordinates index a
    /// `pos_grid^2` embedding table.
    pub pos_grid: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::vtamiq_base()
    }
}

impl ViTConfig {
    /// The full-scale configuration: 16x16 patches, ViT-Base width, 6
    /// retained layers.
    pub fn vtamiq_base() -> Self {
        Self {
            patch_size: 16,
            hidden_size: 768,
            num_layers: 6,
            num_heads: 12,
            mlp_ratio: 4.0,
            pos_grid: 14,
        }
    }

    /// Small configuration for tests and toy training.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            pos_grid: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 2 {
            return Err(Error::Config("hidden_size must be at least 2".into()));
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("need at least one encoder layer".into()));
        }
        if self.pos_grid < 1 {
            return Err(Error::Config("pos_grid must be at least 1".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.hidden_size as f64).round() as usize
    }

    /// Flattened patch width `3 p^2`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// The D-dimensional CLS readout for one image.
#[derive(Debug, Clone)]
pub struct EncodedRepresentation<F: Scalar> {
    pub vector: Tensor<F>,
}

/// Registers all encoder parameters under the `encoder.` prefix.
pub fn init_encoder_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &ViTConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden_size;
    let std = 0.02;

    store.insert(
        "encoder.patch_embed.weight",
        Tensor::trunc_normal(&[cfg.patch_dim(), d], std, rng),
    )?;
    store.insert("encoder.patch_embed.bias", Tensor::zeros(&[d]))?;
    store.insert("encoder.pos.cls", Tensor::trunc_normal(&[d], std, rng))?;
    store.insert(
        "encoder.pos.grid",
        Tensor::trunc_normal(&[cfg.pos_grid * cfg.pos_grid, d], std, rng),
    )?;

    for layer in 0..cfg.num_layers {
        let p = format!("encoder.layer{layer}");
        store.insert(format!("{p}.ln1.gamma"), Tensor::ones(&[d]))?;
        store.insert(format!("{p}.ln1.beta"), Tensor::zeros(&[d]))?;
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(
                format!("{p}.attn.{proj}.weight"),
                Tensor::trunc_normal(&[d, d], std, rng),
            )?;
            store.insert(format!("{p}.attn.{proj}.bias"), Tensor::zeros(&[d]))?;
        }
        store.insert(format!("{p}.ln2.gamma"), Tensor::ones(&[d]))?;
        store.insert(format!("{p}.ln2.beta"), Tensor::zeros(&[d]))?;
        store.insert(
            format!("{p}.mlp.fc1.weight"),
            Tensor::trunc_normal(&[d, cfg.mlp_hidden()], std, rng),
        )?;
        store.insert(
            format!("{p}.mlp.fc1.bias"),
            Tensor::zeros(&[cfg.mlp_hidden()]),
        )?;
        store.insert(
            format!("{p}.mlp.fc2.weight"),
            Tensor::trunc_normal(&[cfg.mlp_hidden(), d], std, rng),
        )?;
        store.insert(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
    }
    store.insert("encoder.final_ln.gamma", Tensor::ones(&[d]))?;
    store.insert("encoder.final_ln.beta", Tensor::zeros(&[d]))?;
    Ok(())
}

/// Nearest-cell index of a normalized (u, v) coordinate into a `G x G`
/// positional grid, boundary-clamped so (1, 1) lands in the last cell.
pub fn positional_index(u: f64, v: f64, grid: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::Contract {
            op: "positional_index",
            reason: format!("uv ({u}, {v}) outside [0,1]^2"),
        });
    }
    let g = grid as f64;
    let cell = |x: f64| ((x * g).floor() as usize).min(grid - 1);
    Ok(cell(u) * grid + cell(v))
}

/// Flattens `[N, p, p, 3]` patches and applies the trainable linear
/// projection to the transformer width, yielding `[N, D]` tokens.
pub fn embed_patches<F: Scalar>(
    g: &mut Graph<'_, F>,
    patches: &Tensor<F>,
    cfg: &ViTConfig,
) -> Result<Var> {
    let shape = patches.shape();
    if shape.len() != 4 || shape[1] != cfg.patch_size || shape[2] != cfg.patch_size || shape[3] != 3
    {
        return Err(Error::Config(format!(
            "patch stack {shape:?} does not match patch size {}",
            cfg.patch_size
        )));
    }
    let n = shape[0];
    let flat = patches.reshape(vec![n, cfg.patch_dim()])?;
    let x = g.tape.leaf(flat);
    let w = g.param("encoder.patch_embed.weight")?;
    let b = g.param("encoder.patch_embed.bias")?;
    g.tape.affine(x, w, b)
}

/// Adds positional embeddings looked up by uv cell and prepends the CLS
/// embedding, producing the `[N+1, D]` input sequence.
pub fn assemble_sequence<F: Scalar>(
    g: &mut Graph<'_, F>,
    tokens: Var,
    uv: &[(f64, f64)],
    cfg: &ViTConfig,
) -> Result<Var> {
    let n = g.tape.value(tokens).shape()[0];
    if uv.len() != n {
        return Err(Error::ShapeMismatch {
            op: "assemble_sequence",
            lhs: vec![n],
            rhs: vec![uv.len()],
        });
    }
    let indices: Vec<usize> = uv
        .iter()
        .map(|&(u, v)| positional_index(u, v, cfg.pos_grid))
        .collect::<Result<_>>()?;
    let table = g.param("encoder.pos.grid")?;
    let pos = g.tape.gather_rows(table, &indices)?;
    let with_pos = g.tape.add(tokens, pos)?;
    let cls = g.param("encoder.pos.cls")?;
    let cls_row = g.tape.reshape(cls, vec![1, cfg.hidden_size])?;
    g.tape.concat_rows(&[cls_row, with_pos])
}

/// `softmax(Q K^T / sqrt(dk)) V`.
pub fn scaled_dot_product_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let dk = tape.value(q).last_dim();
    if tape.value(k).shape() != tape.value(q).shape() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product_attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (dk as f64).sqrt()));
    let weights = tape.softmax(scaled)?;
    tape.matmul(weights, v)
}

/// Multi-head self-attention: h parallel heads of width D/h on learned
/// Q/K/V projections, concatenated and output-projected.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    prefix: &str,
    cfg: &ViTConfig,
) -> Result<Var> {
    cfg.validate()?;
    let dk = cfg.head_dim();
    let wq = g.param(&format!("{prefix}.wq.weight"))?;
    let bq = g.param(&format!("{prefix}.wq.bias"))?;
    let wk = g.param(&format!("{prefix}.wk.weight"))?;
    let bk = g.param(&format!("{prefix}.wk.bias"))?;
    let wv = g.param(&format!("{prefix}.wv.weight"))?;
    let bv = g.param(&format!("{prefix}.wv.bias"))?;
    let wo = g.param(&format!("{prefix}.wo.weight"))?;
    let bo = g.param(&format!("{prefix}.wo.bias"))?;

    let q_full = g.tape.affine(x, wq, bq)?;
    let k_full = g.tape.affine(x, wk, bk)?;
    let v_full = g.tape.affine(x, wv, bv)?;

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = g.tape.slice_cols(q_full, h * dk, dk)?;
        let k = g.tape.slice_cols(k_full, h * dk, dk)?;
        let v = g.tape.slice_cols(v_full, h * dk, dk)?;
        heads.push(scaled_dot_product_attention(&mut g.tape, q, k, v)?);
    }
    let concat = g.tape.concat_cols(&heads)?;
    g.tape.affine(concat, wo, bo)
}

/// One pre-norm transformer block:
/// `x + MHSA(LN1(x))`, then `y + MLP(LN2(y))`.
pub fn encoder_layer<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    layer: usize,
    cfg: &ViTConfig,
) -> Result<Var> {
    let p = format!("encoder.layer{layer}");
    let eps = F::from_f64(LN_EPS);

    let g1 = g.param(&format!("{p}.ln1.gamma"))?;
    let b1 = g.param(&format!("{p}.ln1.beta"))?;
    let normed = g.tape.layer_norm(x, g1, b1, eps)?;
    let attn = multi_head_attention(g, normed, &format!("{p}.attn"), cfg)?;
    let y = g.tape.add(x, attn)?;

    let g2 = g.param(&format!("{p}.ln2.gamma"))?;
    let b2 = g.param(&format!("{p}.ln2.beta"))?;
    let normed2 = g.tape.layer_norm(y, g2, b2, eps)?;
    let w1 = g.param(&format!("{p}.mlp.fc1.weight"))?;
    let bias1 = g.param(&format!("{p}.mlp.fc1.bias"))?;
    let w2 = g.param(&format!("{p}.mlp.fc2.weight"))?;
    let bias2 = g.param(&format!("{p}.mlp.fc2.bias"))?;
    let hidden = g.tape.affine(normed2, w1, bias1)?;
    let act = g.tape.gelu(hidden);
    let mlp = g.tape.affine(act, w2, bias2)?;
    g.tape.add(y, mlp)
}

/// Full encode on an existing graph: embeds, assembles, applies all layers
/// and the final norm, and returns the CLS vector (`[D]`).
pub fn encode_on_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    seq: &PatchSequence<F>,
    cfg: &ViTConfig,
) -> Result<Var> {
    let tokens = embed_patches(g, &seq.patches, cfg)?;
    let mut x = assemble_sequence(g, tokens, &seq.uv, cfg)?;
    for layer in 0..cfg.num_layers {
        x = encoder_layer(g, x, layer, cfg)?;
    }
    let gamma = g.param("encoder.final_ln.gamma")?;
    let beta = g.param("encoder.final_ln.beta")?;
    let eps = F::from_f64(LN_EPS);
    let normed = g.tape.layer_norm(x, gamma, beta, eps)?;
    g.tape.select_row(normed, 0)
}

/// Frozen-parameter encode: builds a throwaway graph and returns the CLS
/// vector as a tensor. Safe to call concurrently over one store.
pub fn encode<F: Scalar>(
    store: &ParameterStore<F>,
    seq: &PatchSequence<F>,
    cfg: &ViTConfig,
) -> Result<EncodedRepresentation<F>> {
    let mut g = Graph::new(store);
    let cls = encode_on_graph(&mut g, seq, cfg)?;
    Ok(EncodedRepresentation {
        vector: g.tape.value(cls).clone(),
    })
}
