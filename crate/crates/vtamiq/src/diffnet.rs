//! Difference modulation network: stacked residual channel attention over
//! the encoded-feature difference, then an MLP regression to one score.
//!
//! The block algebra is
//! `CA(x) = x * gate(x)`, `RCAB(x) = x + U(x) * CA(x)`,
//! `RG(x) = x + U_rg(RCAB_n(...RCAB_1(x)))`, and the full network chains
//! residual groups without an outer skip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::ParameterStore;
use crate::tensor::tape::{Graph, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Shape of the modulation network and regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffNetConfig {
    /// Number of residual groups.
    pub num_groups: usize,
    /// RCABs per residual group.
    pub blocks_per_group: usize,
    /// Excitation bottleneck reduction `r`; the hidden width is `D / r`.
    pub reduction: usize,
    /// Hidden widths of the regression MLP; empty means derive
    /// `[D/2, D/4]` from the encoder width.
    pub head_widths: Vec<usize>,
    /// Use `|f_ref - f_dist|` instead of the signed difference.
    pub absolute_difference: bool,
    /// Apply the gate to `U(x)` instead of `x` (the alternative reading of
    /// the RCAB composition; off by default).
    pub gate_on_transform: bool,
    /// When false, each CA module is replaced by the same two-layer
    /// fully-connected block without the sigmoid gate (ablation path).
    pub channel_attention: bool,
}

impl Default for DiffNetConfig {
    fn default() -> Self {
        Self {
            num_groups: 4,
            blocks_per_group: 4,
            reduction: 16,
            head_widths: Vec::new(),
            absolute_difference: false,
            gate_on_transform: false,
            channel_attention: true,
        }
    }
}

impl DiffNetConfig {
    /// Small configuration for tests and toy training.
    pub fn tiny() -> Self {
        Self {
            num_groups: 1,
            blocks_per_group: 1,
            reduction: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self, hidden_size: usize) -> Result<()> {
        if self.num_groups >= 1 && self.blocks_per_group < 1 {
            return Err(Error::Config(
                "blocks_per_group must be at least 1 when groups exist".into(),
            ));
        }
        if self.num_groups >= 1
            && (self.reduction == 0 || !hidden_size.is_multiple_of(self.reduction))
        {
            return Err(Error::Config(format!(
                "hidden_size {hidden_size} must be divisible by reduction {}",
                self.reduction
            )));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    /// Effective MLP hidden widths for encoder width `d`.
    pub fn effective_head_widths(&self, d: usize) -> Vec<usize> {
        if self.head_widths.is_empty() {
            vec![(d / 2).max(1), (d / 4).max(1)]
        } else {
            self.head_widths.clone()
        }
    }
}

/// Scalar quality prediction; higher is better, unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub value: f64,
}

/// Registers DiffNet and regression-head parameters (`diffnet.` / `head.`).
pub fn init_diffnet_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    hidden_size: usize,
    cfg: &DiffNetConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate(hidden_size)?;
    let d = hidden_size;
    let std = 0.02;

    for group in 0..cfg.num_groups {
        for block in 0..cfg.blocks_per_group {
            let p = format!("diffnet.rg{group}.rcab{block}");
            let bottleneck = d / cfg.reduction;
            store.insert(
                format!("{p}.ca.fc1.weight"),
                Tensor::trunc_normal(&[d, bottleneck], std, rng),
            )?;
            store.insert(format!("{p}.ca.fc1.bias"), Tensor::zeros(&[bottleneck]))?;
            store.insert(
                format!("{p}.ca.fc2.weight"),
                Tensor::trunc_normal(&[bottleneck, d], std, rng),
            )?;
            store.insert(format!("{p}.ca.fc2.bias"), Tensor::zeros(&[d]))?;
            store.insert(
                format!("{p}.u.weight"),
                Tensor::trunc_normal(&[d, d], std, rng),
            )?;
            store.insert(format!("{p}.u.bias"), Tensor::zeros(&[d]))?;
        }
        store.insert(
            format!("diffnet.rg{group}.u.weight"),
            Tensor::trunc_normal(&[d, d], std, rng),
        )?;
        store.insert(format!("diffnet.rg{group}.u.bias"), Tensor::zeros(&[d]))?;
    }

    let mut in_width = d;
    for (i, &w) in cfg.effective_head_widths(d).iter().enumerate() {
        store.insert(
            format!("head.fc{i}.weight"),
            Tensor::trunc_normal(&[in_width, w], std, rng),
        )?;
        store.insert(format!("head.fc{i}.bias"), Tensor::zeros(&[w]))?;
        in_width = w;
    }
    store.insert(
        "head.out.weight",
        Tensor::trunc_normal(&[in_width, 1], std, rng),
    )?;
    store.insert("head.out.bias", Tensor::zeros(&[1]))?;
    Ok(())
}

/// Signed elementwise `f_ref - f_dist`.
pub fn feature_difference<F: Scalar>(tape: &mut Tape<F>, f_ref: Var, f_dist: Var) -> Result<Var> {
    if tape.value(f_ref).shape() != tape.value(f_dist).shape() {
        return Err(Error::ShapeMismatch {
            op: "feature_difference",
            lhs: tape.value(f_ref).shape().to_vec(),
            rhs: tape.value(f_dist).shape().to_vec(),
        });
    }
    tape.sub(f_ref, f_dist)
}

/// `CA(x) = x * sigmoid(fc2(act(fc1(x))))` with a `D/r` bottleneck. With
/// `channel_attention` off, the sigmoid gating is dropped and the block
/// output is the plain fully-connected response.
pub fn channel_attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    prefix: &str,
    cfg: &DiffNetConfig,
) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.fc1.weight"))?;
    let b1 = g.param(&format!("{prefix}.fc1.bias"))?;
    let w2 = g.param(&format!("{prefix}.fc2.weight"))?;
    let b2 = g.param(&format!("{prefix}.fc2.bias"))?;
    let squeezed = g.tape.affine(x, w1, b1)?;
    let act = g.tape.gelu(squeezed);
    let excited = g.tape.affine(act, w2, b2)?;
    if cfg.channel_attention {
        let gate = g.tape.sigmoid(excited);
        g.tape.mul(x, gate)
    } else {
        Ok(excited)
    }
}

/// `RCAB(x) = x + U(x) * CA(x)`.
pub fn rcab<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    prefix: &str,
    cfg: &DiffNetConfig,
) -> Result<Var> {
    let w = g.param(&format!("{prefix}.u.weight"))?;
    let b = g.param(&format!("{prefix}.u.bias"))?;
    let transformed = g.tape.affine(x, w, b)?;
    let gated = if cfg.gate_on_transform {
        channel_attention(g, transformed, &format!("{prefix}.ca"), cfg)?
    } else {
        channel_attention(g, x, &format!("{prefix}.ca"), cfg)?
    };
    let product = if cfg.gate_on_transform {
        gated
    } else {
        g.tape.mul(transformed, gated)?
    };
    g.tape.add(x, product)
}

/// `RG(x) = x + U_rg(RCAB_n(...RCAB_1(x)))`.
pub fn residual_group<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    group: usize,
    cfg: &DiffNetConfig,
) -> Result<Var> {
    let mut y = x;
    for block in 0..cfg.blocks_per_group {
        y = rcab(g, y, &format!("diffnet.rg{group}.rcab{block}"), cfg)?;
    }
    let w = g.param(&format!("diffnet.rg{group}.u.weight"))?;
    let b = g.param(&format!("diffnet.rg{group}.u.bias"))?;
    let transformed = g.tape.affine(y, w, b)?;
    g.tape.add(x, transformed)
}

/// Chains the residual groups. No outer skip; zero groups is the identity.
pub fn diffnet<F: Scalar>(g: &mut Graph<'_, F>, x: Var, cfg: &DiffNetConfig) -> Result<Var> {
    let mut y = x;
    for group in 0..cfg.num_groups {
        y = residual_group(g, y, group, cfg)?;
    }
    Ok(y)
}

/// Regression MLP from the modulated difference to a scalar (`[1]`).
pub fn quality_head<F: Scalar>(
    g: &mut Graph<'_, F>,
    x: Var,
    hidden_size: usize,
    cfg: &DiffNetConfig,
) -> Result<Var> {
    let mut y = x;
    for i in 0..cfg.effective_head_widths(hidden_size).len() {
        let w = g.param(&format!("head.fc{i}.weight"))?;
        let b = g.param(&format!("head.fc{i}.bias"))?;
        y = g.tape.affine(y, w, b)?;
        y = g.tape.gelu(y);
    }
    let w = g.param("head.out.weight")?;
    let b = g.param("head.out.bias")?;
    g.tape.affine(y, w, b)
}

/// Full head: difference, modulation, regression. Returns the scalar `[1]`
/// prediction node.
pub fn predict_on_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    f_ref: Var,
    f_dist: Var,
    hidden_size: usize,
    cfg: &DiffNetConfig,
) -> Result<Var> {
    let mut diff = feature_difference(&mut g.tape, f_ref, f_dist)?;
    if cfg.absolute_difference {
        diff = g.tape.abs(diff);
    }
    let modulated = diffnet(g, diff, cfg)?;
    quality_head(g, modulated, hidden_size, cfg)
}

/// Frozen-parameter prediction from two encoded representations.
pub fn predict_quality<F: Scalar>(
    store: &ParameterStore<F>,
    f_ref: &Tensor<F>,
    f_dist: &Tensor<F>,
    hidden_size: usize,
    cfg: &DiffNetConfig,
) -> Result<QualityScore> {
    let mut g = Graph::new(store);
    let a = g.tape.leaf(f_ref.clone());
    let b = g.tape.leaf(f_dist.clone());
    let out = predict_on_graph(&mut g, a, b, hidden_size, cfg)?;
    Ok(QualityScore {
        value: g.tape.value(out).data()[0].as_f64(),
    })
}
