//! Item encoders, LightGCN aggregation and the joint BPR + neighborhood
//! alignment objective.

mod aggregate;
mod losses;
#[cfg(test)]
mod tests;

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, BipartiteAdj};
pub use losses::{
    bpr_loss, item_similarity, joint_loss, na_loss, na_loss_on_tape, neg_log_sigmoid, sample_na_batch, AnchorMode,
    NaBatch,
};

use crate::error::{Result, TmlpError};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor2, Var};
use aggregate::Propagate;
use losses::BprOp;

/// Which content features feed the item representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    #[default]
    Both,
    TextOnly,
    VisualOnly,
}

impl Modalities {
    pub fn uses_visual(self) -> bool {
        self != Modalities::TextOnly
    }

    pub fn uses_textual(self) -> bool {
        self != Modalities::VisualOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
    pub hidden: usize,
    /// Number of hidden Linear→tanh→LayerNorm→Dropout blocks per encoder.
    pub depth: usize,
    pub embed_dim: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub modalities: Modalities,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TmlpError::Config(m));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("model needs at least one user and one item".into());
        }
        if self.depth == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return bad(format!(
                "depth, hidden and embed_dim must be positive (got {}, {}, {})",
                self.depth, self.hidden, self.embed_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.modalities.uses_visual() && self.visual_dim == 0 {
            return bad("visual features required but visual_dim is 0".into());
        }
        if self.modalities.uses_textual() && self.textual_dim == 0 {
            return bad("textual features required but textual_dim is 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut width = in_dim;
        for l in 0..cfg.depth {
            blocks.push(Block {
                w: store.add_xavier(format!("{prefix}.{l}.weight"), width, cfg.hidden, rng),
                b: store.add(format!("{prefix}.{l}.bias"), Array2::zeros((1, cfg.hidden))),
                gain: store.add(format!("{prefix}.{l}.ln_gain"), Array2::ones((1, cfg.hidden))),
                bias: store.add(format!("{prefix}.{l}.ln_bias"), Array2::zeros((1, cfg.hidden))),
            });
            width = cfg.hidden;
        }
        Self {
            blocks,
            out_w: store.add_xavier(format!("{prefix}.out.weight"), width, cfg.embed_dim, rng),
            out_b: store.add(format!("{prefix}.out.bias"), Array2::zeros((1, cfg.embed_dim))),
        }
    }

    fn forward<'s, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'s>,
        store: &'s ParamStore,
        x: Var,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for blk in &self.blocks {
            let (w, b) = (tape.param(store, blk.w), tape.param(store, blk.b));
            h = tape.linear(h, w, b)?;
            h = tape.tanh(h);
            let (g, beta) = (tape.param(store, blk.gain), tape.param(store, blk.bias));
            h = tape.layer_norm(h, g, beta)?;
            h = tape.dropout(h, dropout, rng, train)?;
        }
        let (w, b) = (tape.param(store, self.out_w), tape.param(store, self.out_b));
        tape.linear(h, w, b)
    }
}

/// Features and interaction structure the model is run on.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub visual: Option<Tensor2>,
    pub textual: Option<Tensor2>,
    pub adj: Arc<BipartiteAdj>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub h_v: Option<Var>,
    pub h_t: Option<Var>,
    /// Fused item content representation.
    pub h_i: Var,
    /// Layer-summed representations, users first.
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bpr: Var,
    pub na: Option<Var>,
    pub total: Var,
}

/// Knobs of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Also align each modality encoder output separately.
    pub per_modality_na: bool,
}

#[derive(Clone, Debug)]
pub struct TmlpModel {
    cfg: ModelConfig,
    store: ParamStore,
    visual: Option<Encoder>,
    textual: Option<Encoder>,
    fuser_w: ParamId,
    fuser_b: ParamId,
    user_emb: ParamId,
    item_emb: ParamId,
}

impl TmlpModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let visual = cfg
            .modalities
            .uses_visual()
            .then(|| Encoder::new(&mut store, "mlp_v", cfg.visual_dim, &cfg, rng));
        let textual = cfg
            .modalities
            .uses_textual()
            .then(|| Encoder::new(&mut store, "mlp_t", cfg.textual_dim, &cfg, rng));
        let fuse_in = cfg.embed_dim * (visual.is_some() as usize + textual.is_some() as usize);
        let fuser_w = store.add_xavier("fuser.weight", fuse_in, cfg.embed_dim, rng);
        let fuser_b = store.add("fuser.bias", Array2::zeros((1, cfg.embed_dim)));
        let user_emb = store.add_xavier("user_embedding", cfg.num_users, cfg.embed_dim, rng);
        let item_emb = store.add_xavier("item_embedding", cfg.num_items, cfg.embed_dim, rng);
        Ok(Self {
            cfg,
            store,
            visual,
            textual,
            fuser_w,
            fuser_b,
            user_emb,
            item_emb,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Fuser weight and bias.
    pub fn fuser_params(&self) -> (ParamId, ParamId) {
        (self.fuser_w, self.fuser_b)
    }

    /// Item-side parameters that only the NA term would touch when `α > 0`
    /// and BPR is absent: the encoders and the fuser.
    pub fn content_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for enc in self.visual.iter().chain(self.textual.iter()) {
            for b in &enc.blocks {
                ids.extend([b.w, b.b, b.gain, b.bias]);
            }
            ids.extend([enc.out_w, enc.out_b]);
        }
        ids.extend([self.fuser_w, self.fuser_b]);
        ids
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let check = |name: &str, feats: &Option<Tensor2>, dim: usize, used: bool| -> Result<()> {
            match (used, feats) {
                (false, _) => Ok(()),
                (true, None) => Err(TmlpError::InvalidArgument(format!("{name} features missing"))),
                (true, Some(f)) if f.dim() != (self.cfg.num_items, dim) => Err(TmlpError::Shape {
                    op: "encode_items",
                    left: f.dim(),
                    right: (self.cfg.num_items, dim),
                }),
                _ => Ok(()),
            }
        };
        check("visual", &inputs.visual, self.cfg.visual_dim, self.visual.is_some())?;
        check("textual", &inputs.textual, self.cfg.textual_dim, self.textual.is_some())?;
        if inputs.adj.num_users() != self.cfg.num_users || inputs.adj.num_items() != self.cfg.num_items {
            return Err(TmlpError::Shape {
                op: "aggregate",
                left: (inputs.adj.num_users(), inputs.adj.num_items()),
                right: (self.cfg.num_users, self.cfg.num_items),
            });
        }
        Ok(())
    }

    /// Records encoders, fuser and propagation on `tape`.
    pub fn forward<'s, R: Rng + ?Sized>(
        &'s self,
        tape: &mut Tape<'s>,
        inputs: &'s ModelInputs,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        self.check_inputs(inputs)?;
        let store = &self.store;
        let p = self.cfg.dropout;
        let h_v = match (&self.visual, &inputs.visual) {
            (Some(enc), Some(x)) => {
                let x = tape.constant_ref(x);
                Some(enc.forward(tape, store, x, p, train, rng)?)
            }
            _ => None,
        };
        let h_t = match (&self.textual, &inputs.textual) {
            (Some(enc), Some(x)) => {
                let x = tape.constant_ref(x);
                Some(enc.forward(tape, store, x, p, train, rng)?)
            }
            _ => None,
        };
        let fuse_in = match (h_v, h_t) {
            (Some(v), Some(t)) => tape.concat_cols(v, t)?,
            (Some(v), None) => v,
            (None, Some(t)) => t,
            (None, None) => unreachable!("validated config has a modality"),
        };
        let (fw, fb) = (tape.param(store, self.fuser_w), tape.param(store, self.fuser_b));
        let fused = tape.linear(fuse_in, fw, fb)?;
        let h_i = tape.tanh(fused);
        let ids = tape.param(store, self.item_emb);
        let h_i0 = tape.add(ids, h_i)?;
        let h_u0 = tape.param(store, self.user_emb);
        let x = tape.concat_rows(h_u0, h_i0)?;
        let z = tape.apply(
            Box::new(Propagate {
                adj: Arc::clone(&inputs.adj),
                layers: self.cfg.gcn_layers,
            }),
            &[x],
        )?;
        Ok(ForwardVars { h_v, h_t, h_i, z })
    }

    /// BPR over `triples` plus `α`-weighted NA over `na_batch`.
    pub fn objective(
        &self,
        tape: &mut Tape<'_>,
        fwd: &ForwardVars,
        triples: &[(u32, u32, u32)],
        na_batch: Option<&NaBatch>,
        obj: &ObjectiveConfig,
    ) -> Result<LossVars> {
        let bpr = tape.apply(
            Box::new(BprOp {
                triples: triples.to_vec(),
                num_users: self.cfg.num_users,
            }),
            &[fwd.z],
        )?;
        let na = match na_batch {
            Some(batch) if obj.alpha != 0.0 => {
                let mut na = na_loss_on_tape(tape, fwd.h_i, batch, obj.tau)?;
                if obj.per_modality_na {
                    for h in [fwd.h_v, fwd.h_t].into_iter().flatten() {
                        let extra = na_loss_on_tape(tape, h, batch, obj.tau)?;
                        na = tape.add(na, extra)?;
                    }
                }
                Some(na)
            }
            _ => None,
        };
        let total = joint_loss(tape, bpr, na, obj.alpha)?;
        Ok(LossVars { bpr, na, total })
    }

    /// Inference-mode `(z_u, z_i)`.
    pub fn embeddings(&self, inputs: &ModelInputs) -> Result<(Tensor2, Tensor2)> {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fwd = self.forward(&mut tape, inputs, false, &mut rng)?;
        let z = tape.value(fwd.z);
        let u = self.cfg.num_users;
        Ok((z.slice(s![..u, ..]).to_owned(), z.slice(s![u.., ..]).to_owned()))
    }

    /// Inference-mode fused content representation `h_i`.
    pub fn encode_items(&self, inputs: &ModelInputs) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fwd = self.forward(&mut tape, inputs, false, &mut rng)?;
        Ok(tape.value(fwd.h_i).clone())
    }
}

/// Full score matrix `z_u · z_iᵀ`.
pub fn predict_scores(z_users: &Tensor2, z_items: &Tensor2) -> Result<Tensor2> {
    if z_users.ncols() != z_items.ncols() {
        return Err(TmlpError::Shape {
            op: "predict_scores",
            left: z_users.dim(),
            right: z_items.dim(),
        });
    }
    Ok(z_users.dot(&z_items.t()))
}
