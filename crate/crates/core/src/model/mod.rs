//! The three-branch recommender: item baskets, categorical attributes and
//! numerical attributes, each with its own time-level attention stack,
//! intra-basket / intra-attribute attention on top, a fusion network, and
//! scoring against the shared item table.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_masks, stack, ForwardCtx, MhsabParams};
use crate::encoder::{build_tokens, EmbeddingTables, EncodedSequence, LayoutSpec};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

pub use checkpoint::{
    check_config, load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot,
    CHECKPOINT_VERSION,
};

fn yes() -> bool {
    true
}

/// Mechanism switches used by the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "yes")]
    pub use_periodic: bool,
    #[serde(default = "yes")]
    pub use_attributes: bool,
    #[serde(default = "yes")]
    pub use_intra_basket: bool,
    #[serde(default = "yes")]
    pub use_intra_attribute: bool,
    #[serde(default = "yes")]
    pub use_time_level: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_periodic: true,
            use_attributes: true,
            use_intra_basket: true,
            use_intra_attribute: true,
            use_time_level: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnDaConfig {
    pub num_items: usize,
    /// Embedding width `D` of every item, attribute value and index row.
    pub embed_dim: usize,
    /// Window length `T`.
    pub max_len: usize,
    /// Periodic cycle length `T'`.
    pub period: usize,
    /// Item slots per step, `|V_max|`.
    pub vmax: usize,
    #[serde(default)]
    pub num_cat_values: usize,
    #[serde(default)]
    pub num_cat_attrs: usize,
    #[serde(default)]
    pub num_numerical: usize,
    /// Heads of each time-level block; the length is the depth `k`.
    pub time_heads: Vec<usize>,
    /// Heads of each intra-basket / intra-attribute block; depth `m`.
    #[serde(default)]
    pub intra_heads: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default = "yes")]
    pub time_aware_padding: bool,
}

impl AnDaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
            ("period", self.period),
            ("vmax", self.vmax),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::contract(
                "embed_dim must be at least 2 for layer normalisation",
            ));
        }
        if self.flags.use_time_level && self.time_heads.is_empty() {
            return Err(Error::contract(
                "time-level attention needs at least one block",
            ));
        }
        if self
            .time_heads
            .iter()
            .chain(&self.intra_heads)
            .any(|&h| h == 0)
        {
            return Err(Error::contract("every block needs at least one head"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if (self.num_cat_attrs == 0) != (self.num_cat_values == 0) {
            return Err(Error::contract(
                "num_cat_attrs and num_cat_values must both be zero or both positive",
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> LayoutSpec {
        LayoutSpec {
            max_len: self.max_len,
            period: self.period,
            vmax: self.vmax,
            embed_dim: self.embed_dim,
            num_cat_attrs: self.num_cat_attrs,
            num_numerical: self.num_numerical,
            use_periodic: self.flags.use_periodic,
            time_aware_padding: self.time_aware_padding,
        }
    }

    fn has_cat_branch(&self) -> bool {
        self.flags.use_attributes && self.num_cat_attrs > 0
    }

    fn has_num_branch(&self) -> bool {
        self.flags.use_attributes && self.num_numerical > 0
    }
}

/// The ablation variants: the full model and five reductions of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// No periodic index embedding.
    P,
    /// Basket branch only.
    B,
    /// Basket branch only, without intra-basket attention.
    #[serde(rename = "B-")]
    BMinus,
    /// No intra modules.
    T,
    /// No time-level attention.
    I,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::P,
        Variant::B,
        Variant::BMinus,
        Variant::T,
        Variant::I,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::P => "P",
            Variant::B => "B",
            Variant::BMinus => "B-",
            Variant::T => "T",
            Variant::I => "I",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown variant tag `{s}` (expected Full, P, B, B-, T or I)"
                ))
            })
    }
}

/// Returns `config` with the flags of `variant` applied.
pub fn make_variant(config: &AnDaConfig, variant: Variant) -> AnDaConfig {
    let mut c = config.clone();
    let f = &mut c.flags;
    match variant {
        Variant::Full => {}
        Variant::P => f.use_periodic = false,
        Variant::B => f.use_attributes = false,
        Variant::BMinus => {
            f.use_attributes = false;
            f.use_intra_basket = false;
        }
        Variant::T => {
            f.use_intra_basket = false;
            f.use_intra_attribute = false;
        }
        Variant::I => f.use_time_level = false,
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FusionParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnDaModel {
    config: AnDaConfig,
    pub params: ParamStore,
    tables: EmbeddingTables,
    time_item: Vec<MhsabParams>,
    time_cat: Vec<MhsabParams>,
    time_num: Vec<MhsabParams>,
    intra_basket: Vec<MhsabParams>,
    intra_attr: Vec<MhsabParams>,
    fusion: FusionParams,
}

/// Per-branch intermediate outputs, each flattened to `[B·T, width]`.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub item_time: Var,
    pub item_intra: Var,
    pub cat_time: Option<Var>,
    pub cat_intra: Option<Var>,
    pub num_time: Option<Var>,
    /// `L_t^all`, `[B·T, D]`.
    pub fused: Var,
    /// `L_t^all · Q_iᵀ`, `[B·T, |V|]`.
    pub logits: Var,
}

impl AnDaModel {
    /// Registers all parameters, drawing initial values from a ChaCha8
    /// stream seeded with `seed`.
    pub fn new(config: AnDaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = config.layout();
        let tables = EmbeddingTables::register(
            &mut store,
            &layout,
            config.num_items,
            config.num_cat_values,
            config.flags.use_attributes,
            &mut rng,
        );
        let d = config.embed_dim;
        let p = config.dropout;
        let blocks = |store: &mut ParamStore,
                      rng: &mut ChaCha8Rng,
                      prefix: &str,
                      width: usize,
                      heads: &[usize]| {
            heads
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    MhsabParams::register(store, &format!("{prefix}.{i}"), width, h, p, rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let time_heads: &[usize] = if config.flags.use_time_level {
            &config.time_heads
        } else {
            &[]
        };
        let time_item = blocks(
            &mut store,
            &mut rng,
            "time.item",
            layout.item_width(),
            time_heads,
        )?;
        let (time_cat, time_num) = (
            if config.has_cat_branch() {
                blocks(
                    &mut store,
                    &mut rng,
                    "time.categorical",
                    layout.cat_width(),
                    time_heads,
                )?
            } else {
                vec![]
            },
            if config.has_num_branch() {
                blocks(
                    &mut store,
                    &mut rng,
                    "time.numerical",
                    layout.num_width(),
                    time_heads,
                )?
            } else {
                vec![]
            },
        );
        let intra_basket = if config.flags.use_intra_basket {
            blocks(&mut store, &mut rng, "intra.basket", d, &config.intra_heads)?
        } else {
            vec![]
        };
        let intra_attr = if config.flags.use_intra_attribute && config.has_cat_branch() {
            blocks(
                &mut store,
                &mut rng,
                "intra.attribute",
                d,
                &config.intra_heads,
            )?
        } else {
            vec![]
        };
        let fusion_in = layout.item_width()
            + if config.has_cat_branch() {
                layout.cat_width()
            } else {
                0
            }
            + if config.has_num_branch() {
                layout.num_width()
            } else {
                0
            };
        let b_in = 1.0 / (fusion_in as f64).sqrt();
        let b_hidden = 1.0 / (d as f64).sqrt();
        let fusion = FusionParams {
            w1: store.register(
                "fusion.w1",
                Tensor::uniform(&[fusion_in, d], b_in, &mut rng),
            ),
            b1: store.register("fusion.b1", Tensor::zeros(&[d])),
            w2: store.register("fusion.w2", Tensor::uniform(&[d, d], b_hidden, &mut rng)),
            b2: store.register("fusion.b2", Tensor::zeros(&[d])),
        };
        Ok(Self {
            config,
            params: store,
            tables,
            time_item,
            time_cat,
            time_num,
            intra_basket,
            intra_attr,
            fusion,
        })
    }

    pub fn config(&self) -> &AnDaConfig {
        &self.config
    }

    pub fn layout(&self) -> LayoutSpec {
        self.config.layout()
    }

    pub fn item_table(&self) -> ParamId {
        self.tables.item
    }

    /// Runs every branch on a batch and scores all items at every position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        batch: &[EncodedSequence],
        ctx: &mut ForwardCtx,
    ) -> Result<BranchOutputs> {
        if !std::ptr::eq(binder.store(), &self.params) {
            return Err(Error::contract(
                "binder is attached to a different parameter store",
            ));
        }
        let layout = self.layout();
        let (b, t, d) = (batch.len(), layout.max_len, layout.embed_dim);
        let tokens = build_tokens(
            tape,
            binder,
            &self.tables,
            &layout,
            batch,
            self.config.flags.use_attributes,
        )?;

        let presence: Vec<bool> = batch
            .iter()
            .flat_map(|e| e.presence.iter().copied())
            .collect();
        let time_mask = build_masks(&presence, t, true);
        let item_time = stack(
            tape,
            binder,
            tokens.item,
            &self.time_item,
            &time_mask,
            ctx,
            "time.item",
        )?;
        let item_time = tape.reshape(item_time, &[b * t, layout.item_width()])?;
        let item_time = gate_rows(tape, item_time, &presence)?;

        let slot_presence: Vec<bool> = batch
            .iter()
            .flat_map(|e| {
                (0..t).flat_map(move |p| {
                    let slots = &e.item_slots[p * layout.vmax..(p + 1) * layout.vmax];
                    let idx =
                        std::iter::repeat(e.presence[p]).take(layout.item_tokens() - layout.vmax);
                    slots.iter().copied().chain(idx)
                })
            })
            .collect();
        let item_intra = intra(
            tape,
            binder,
            item_time,
            &self.intra_basket,
            &slot_presence,
            layout.item_tokens(),
            d,
            ctx,
            "intra.basket",
        )?;
        let item_intra = gate_rows(tape, item_intra, &presence)?;

        let mut fused_parts = vec![item_intra];
        let mut out = BranchOutputs {
            item_time,
            item_intra,
            cat_time: None,
            cat_intra: None,
            num_time: None,
            fused: item_intra,
            logits: item_intra,
        };
        let attr_presence: Vec<bool> = batch
            .iter()
            .flat_map(|e| e.attr_presence.iter().copied())
            .collect();
        let attr_mask = build_masks(&attr_presence, t, true);
        if let Some(cat) = tokens.categorical {
            let ct = stack(
                tape,
                binder,
                cat,
                &self.time_cat,
                &attr_mask,
                ctx,
                "time.categorical",
            )?;
            let ct = tape.reshape(ct, &[b * t, layout.cat_width()])?;
            let ct = gate_rows(tape, ct, &attr_presence)?;
            let token_presence: Vec<bool> = attr_presence
                .iter()
                .flat_map(|&p| std::iter::repeat(p).take(layout.cat_tokens()))
                .collect();
            let ci = intra(
                tape,
                binder,
                ct,
                &self.intra_attr,
                &token_presence,
                layout.cat_tokens(),
                d,
                ctx,
                "intra.attribute",
            )?;
            let ci = gate_rows(tape, ci, &attr_presence)?;
            out.cat_time = Some(ct);
            out.cat_intra = Some(ci);
            fused_parts.push(ci);
        }
        if let Some(num) = tokens.numerical {
            let nt = stack(
                tape,
                binder,
                num,
                &self.time_num,
                &attr_mask,
                ctx,
                "time.numerical",
            )?;
            let nt = tape.reshape(nt, &[b * t, layout.num_width()])?;
            let nt = gate_rows(tape, nt, &attr_presence)?;
            out.num_time = Some(nt);
            fused_parts.push(nt);
        }

        let fused = fuse(tape, binder, &self.fusion, &fused_parts)?;
        let q = binder.var(tape, self.tables.item);
        out.logits = tape.matmul_nt(fused, q)?;
        out.fused = fused;
        Ok(out)
    }

    /// Scores `σ(L_t^all · Q_i)` for every position and item, in evaluation
    /// mode, as a `[B·T, |V|]` tensor.
    pub fn scores(&self, batch: &[EncodedSequence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, batch, &mut ForwardCtx::eval())?;
        let s = tape.sigmoid(out.logits);
        Ok(tape.value(s).clone())
    }

    /// Evaluation-mode logits at each sequence's last position, one row of
    /// `|V|` values per sequence.
    pub fn last_step_logits(&self, batch: &[EncodedSequence]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, batch, &mut ForwardCtx::eval())?;
        let logits = tape.value(out.logits);
        let v = self.config.num_items;
        let t = self.config.max_len;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let row = i * t + e.last_position();
                logits.data()[row * v..(row + 1) * v].to_vec()
            })
            .collect())
    }

    pub fn last_step_scores(&self, batch: &[EncodedSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .last_step_logits(batch)?
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = AnDaModel::new(ckpt.config.clone(), 0)?;
        model.params.load_values(ckpt.params.clone())?;
        Ok(model)
    }
}

/// Intra-basket / intra-attribute attention: each step's `[tokens·D]`
/// vector becomes `tokens` tokens of width `D`, attended with a full mask
/// over the real ones, then flattened back with padded tokens zeroed.
/// Identity without blocks.
#[allow(clippy::too_many_arguments)]
pub fn intra(
    tape: &mut Tape,
    binder: &mut Binder,
    steps: Var,
    blocks: &[MhsabParams],
    token_presence: &[bool],
    tokens: usize,
    d: usize,
    ctx: &mut ForwardCtx,
    label: &str,
) -> Result<Var> {
    if blocks.is_empty() {
        return Ok(steps);
    }
    let rows = tape.shape(steps)[0];
    if tape.shape(steps)[1] != tokens * d || token_presence.len() != rows * tokens {
        return Err(Error::Dimension {
            op: "intra",
            lhs: tape.shape(steps).to_vec(),
            rhs: vec![rows, tokens, d],
        });
    }
    let x = tape.reshape(steps, &[rows, tokens, d])?;
    let mask = build_masks(token_presence, tokens, false);
    let y = stack(tape, binder, x, blocks, &mask, ctx, label)?;
    let y = tape.reshape(y, &[rows * tokens, d])?;
    let y = gate_rows(tape, y, token_presence)?;
    tape.reshape(y, &[rows, tokens * d])
}

/// Zeroes the rows of `x: [rows, width]` whose flag is false, so padded
/// steps contribute nothing downstream.
fn gate_rows(tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&k| k) {
        return Ok(x);
    }
    let width = tape.shape(x)[1];
    let data = keep
        .iter()
        .flat_map(|&k| std::iter::repeat(if k { 1.0 } else { 0.0 }).take(width))
        .collect();
    let gate = tape.constant(Tensor::new(vec![keep.len(), width], data)?);
    tape.mul(x, gate)
}

fn fuse(tape: &mut Tape, binder: &mut Binder, p: &FusionParams, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::contract("fusion needs at least one enabled branch"));
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_last(parts)?
    };
    let w1 = binder.var(tape, p.w1);
    let b1 = binder.var(tape, p.b1);
    let w2 = binder.var(tape, p.w2);
    let b2 = binder.var(tape, p.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Shifted-target binary cross-entropy over the whole catalog.
///
/// Each real position with a successor basket contributes
/// `−Σ_{i∈next} log σ(z_i) − Σ_{j∉next} log(1 − σ(z_j))`. Per-sequence sums
/// are averaged over the batch.
pub fn bce_loss(
    tape: &mut Tape,
    logits: Var,
    batch: &[EncodedSequence],
    num_items: usize,
) -> Result<Var> {
    let rows: usize = batch.iter().map(|e| e.len).sum();
    if tape.shape(logits) != [rows, num_items] {
        return Err(Error::Dimension {
            op: "bce_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![rows, num_items],
        });
    }
    let mut targets = vec![0.0; rows * num_items];
    let mut weights = vec![0.0; rows];
    let mut r = 0;
    for e in batch {
        for p in 0..e.len {
            if let (true, Some(next)) = (e.presence[p], &e.targets[p]) {
                weights[r] = 1.0;
                for &i in next {
                    if i >= num_items {
                        return Err(Error::Lookup {
                            index: i,
                            rows: num_items,
                        });
                    }
                    targets[r * num_items + i] = 1.0;
                }
            }
            r += 1;
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::contract(
            "no position in the batch has a target basket",
        ));
    }
    let targets = Tensor::new(vec![rows, num_items], targets)?;
    tape.bce_with_logits(logits, &targets, &weights, 1.0 / batch.len() as f64)
}
