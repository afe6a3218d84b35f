//! Encoder/decoder backbone.
//!
//! A convolutional GRU encodes the observed window (segmentation-feature
//! frames plus location one-hot planes) into a final hidden state; the
//! decoder context is the concatenation of that hidden state with the
//! observed frames. Two separate convolutional GRUs decode per-step grid-cell
//! distributions (coarse) and per-cell 2-D offsets (fine). Decoder inputs are
//! teacher-forced during training and fed back from the model's own chosen
//! cells at evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::{cls_loss, reg_loss, total_loss, weight_decay};
use super::{argmax_cell, compose_at_cell, BackboneConfig, ModelError, SoftLabel, SoftLabelSeq};
use crate::rng::rng_for;
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

const KERNEL: usize = 3;
const PAD: usize = 1;

/// One convolutional GRU cell with fused input/hidden weights.
#[derive(Debug, Clone)]
pub struct ConvGru<T> {
    pub wz: Tensor<T>,
    pub wr: Tensor<T>,
    pub wh: Tensor<T>,
    pub bz: Tensor<T>,
    pub br: Tensor<T>,
    pub bh: Tensor<T>,
}

/// Decoder GRU with weights split into a static context part and a recurrent
/// part. Splitting is an exact reparameterization of one convolution over the
/// concatenated channels and lets the context contribution be computed once
/// per rollout instead of once per step.
#[derive(Debug, Clone)]
pub struct SplitConvGru<T> {
    pub wz_ctx: Tensor<T>,
    pub wz_rec: Tensor<T>,
    pub wr_ctx: Tensor<T>,
    pub wr_rec: Tensor<T>,
    pub wh_ctx: Tensor<T>,
    pub wh_rec: Tensor<T>,
    pub bz: Tensor<T>,
    pub br: Tensor<T>,
    pub bh: Tensor<T>,
}

/// All learnable weights, fixed by `(grid, num_classes, d_enc, obs_len)`.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub encoder: ConvGru<T>,
    pub coarse: SplitConvGru<T>,
    pub coarse_head_w: Tensor<T>,
    pub coarse_head_b: Tensor<T>,
    pub fine: SplitConvGru<T>,
    pub fine_mlp_w1: Tensor<T>,
    pub fine_mlp_b1: Tensor<T>,
    pub fine_mlp_w2: Tensor<T>,
    pub fine_mlp_b2: Tensor<T>,
}

fn glorot<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn conv_weight<T: Scalar, R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Tensor<T> {
    let fan = KERNEL * KERNEL;
    glorot(
        &[KERNEL, KERNEL, c_in, c_out],
        fan * c_in,
        fan * c_out,
        rng,
    )
}

/// Conv weight that is one channel-group of a logically larger convolution;
/// `logical_in` is the full input channel count so the init scale matches the
/// fused parameterization.
fn conv_weight_grouped<T: Scalar, R: Rng>(
    c_in: usize,
    logical_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let fan = KERNEL * KERNEL;
    glorot(
        &[KERNEL, KERNEL, c_in, c_out],
        fan * logical_in,
        fan * c_out,
        rng,
    )
}

impl<T: Scalar> ConvGru<T> {
    fn init<R: Rng>(c_in: usize, d: usize, rng: &mut R) -> Self {
        ConvGru {
            wz: conv_weight(c_in + d, d, rng),
            bz: Tensor::zeros(&[d]),
            wr: conv_weight(c_in + d, d, rng),
            br: Tensor::zeros(&[d]),
            wh: conv_weight(c_in + d, d, rng),
            bh: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> SplitConvGru<T> {
    fn init<R: Rng>(c_ctx: usize, c_rec: usize, d: usize, rng: &mut R) -> Self {
        let logical = c_ctx + c_rec + d;
        SplitConvGru {
            wz_ctx: conv_weight_grouped(c_ctx, logical, d, rng),
            wz_rec: conv_weight_grouped(c_rec + d, logical, d, rng),
            bz: Tensor::zeros(&[d]),
            wr_ctx: conv_weight_grouped(c_ctx, logical, d, rng),
            wr_rec: conv_weight_grouped(c_rec + d, logical, d, rng),
            br: Tensor::zeros(&[d]),
            wh_ctx: conv_weight_grouped(c_ctx, logical, d, rng),
            wh_rec: conv_weight_grouped(c_rec + d, logical, d, rng),
            bh: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from a seed.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x6d6f64656c]);
        let d = cfg.d_enc;
        let enc_in = cfg.num_classes + 1;
        let c_ctx = cfg.context_channels();
        ModelParams {
            encoder: ConvGru::init(enc_in, d, &mut rng),
            coarse: SplitConvGru::init(c_ctx, 1, d, &mut rng),
            coarse_head_w: glorot(&[1, 1, d, 1], d, 1, &mut rng),
            coarse_head_b: Tensor::zeros(&[1]),
            fine: SplitConvGru::init(c_ctx, 1, d, &mut rng),
            fine_mlp_w1: glorot(&[1, 1, d, d], d, d, &mut rng),
            fine_mlp_b1: Tensor::zeros(&[d]),
            fine_mlp_w2: glorot(&[1, 1, d, 2], d, 2, &mut rng),
            fine_mlp_b2: Tensor::zeros(&[2]),
        }
    }

    /// All-zero parameters (uniform coarse distributions, zero offsets).
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let mut p = Self::init(cfg, 0);
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v = T::ZERO;
            }
        }
        p
    }

    /// Tensors with stable names, in checkpoint declaration order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("enc.wz", &self.encoder.wz),
            ("enc.bz", &self.encoder.bz),
            ("enc.wr", &self.encoder.wr),
            ("enc.br", &self.encoder.br),
            ("enc.wh", &self.encoder.wh),
            ("enc.bh", &self.encoder.bh),
            ("coarse.wz_ctx", &self.coarse.wz_ctx),
            ("coarse.wz_rec", &self.coarse.wz_rec),
            ("coarse.bz", &self.coarse.bz),
            ("coarse.wr_ctx", &self.coarse.wr_ctx),
            ("coarse.wr_rec", &self.coarse.wr_rec),
            ("coarse.br", &self.coarse.br),
            ("coarse.wh_ctx", &self.coarse.wh_ctx),
            ("coarse.wh_rec", &self.coarse.wh_rec),
            ("coarse.bh", &self.coarse.bh),
            ("coarse_head.w", &self.coarse_head_w),
            ("coarse_head.b", &self.coarse_head_b),
            ("fine.wz_ctx", &self.fine.wz_ctx),
            ("fine.wz_rec", &self.fine.wz_rec),
            ("fine.bz", &self.fine.bz),
            ("fine.wr_ctx", &self.fine.wr_ctx),
            ("fine.wr_rec", &self.fine.wr_rec),
            ("fine.br", &self.fine.br),
            ("fine.wh_ctx", &self.fine.wh_ctx),
            ("fine.wh_rec", &self.fine.wh_rec),
            ("fine.bh", &self.fine.bh),
            ("fine_mlp.w1", &self.fine_mlp_w1),
            ("fine_mlp.b1", &self.fine_mlp_b1),
            ("fine_mlp.w2", &self.fine_mlp_w2),
            ("fine_mlp.b2", &self.fine_mlp_b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("enc.wz", &mut self.encoder.wz),
            ("enc.bz", &mut self.encoder.bz),
            ("enc.wr", &mut self.encoder.wr),
            ("enc.br", &mut self.encoder.br),
            ("enc.wh", &mut self.encoder.wh),
            ("enc.bh", &mut self.encoder.bh),
            ("coarse.wz_ctx", &mut self.coarse.wz_ctx),
            ("coarse.wz_rec", &mut self.coarse.wz_rec),
            ("coarse.bz", &mut self.coarse.bz),
            ("coarse.wr_ctx", &mut self.coarse.wr_ctx),
            ("coarse.wr_rec", &mut self.coarse.wr_rec),
            ("coarse.br", &mut self.coarse.br),
            ("coarse.wh_ctx", &mut self.coarse.wh_ctx),
            ("coarse.wh_rec", &mut self.coarse.wh_rec),
            ("coarse.bh", &mut self.coarse.bh),
            ("coarse_head.w", &mut self.coarse_head_w),
            ("coarse_head.b", &mut self.coarse_head_b),
            ("fine.wz_ctx", &mut self.fine.wz_ctx),
            ("fine.wz_rec", &mut self.fine.wz_rec),
            ("fine.bz", &mut self.fine.bz),
            ("fine.wr_ctx", &mut self.fine.wr_ctx),
            ("fine.wr_rec", &mut self.fine.wr_rec),
            ("fine.br", &mut self.fine.br),
            ("fine.wh_ctx", &mut self.fine.wh_ctx),
            ("fine.wh_rec", &mut self.fine.wh_rec),
            ("fine.bh", &mut self.fine.bh),
            ("fine_mlp.w1", &mut self.fine_mlp_w1),
            ("fine_mlp.b1", &mut self.fine_mlp_b1),
            ("fine_mlp.w2", &mut self.fine_mlp_w2),
            ("fine_mlp.b2", &mut self.fine_mlp_b2),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        fn c<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
            let data = t.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
            Tensor::from_vec(t.shape(), data).expect("cast shape")
        }
        ModelParams {
            encoder: ConvGru {
                wz: c(&self.encoder.wz),
                wr: c(&self.encoder.wr),
                wh: c(&self.encoder.wh),
                bz: c(&self.encoder.bz),
                br: c(&self.encoder.br),
                bh: c(&self.encoder.bh),
            },
            coarse: SplitConvGru {
                wz_ctx: c(&self.coarse.wz_ctx),
                wz_rec: c(&self.coarse.wz_rec),
                wr_ctx: c(&self.coarse.wr_ctx),
                wr_rec: c(&self.coarse.wr_rec),
                wh_ctx: c(&self.coarse.wh_ctx),
                wh_rec: c(&self.coarse.wh_rec),
                bz: c(&self.coarse.bz),
                br: c(&self.coarse.br),
                bh: c(&self.coarse.bh),
            },
            coarse_head_w: c(&self.coarse_head_w),
            coarse_head_b: c(&self.coarse_head_b),
            fine: SplitConvGru {
                wz_ctx: c(&self.fine.wz_ctx),
                wz_rec: c(&self.fine.wz_rec),
                wr_ctx: c(&self.fine.wr_ctx),
                wr_rec: c(&self.fine.wr_rec),
                wh_ctx: c(&self.fine.wh_ctx),
                wh_rec: c(&self.fine.wh_rec),
                bz: c(&self.fine.bz),
                br: c(&self.fine.br),
                bh: c(&self.fine.bh),
            },
            fine_mlp_w1: c(&self.fine_mlp_w1),
            fine_mlp_b1: c(&self.fine_mlp_b1),
            fine_mlp_w2: c(&self.fine_mlp_w2),
            fine_mlp_b2: c(&self.fine_mlp_b2),
        }
    }
}

/// Tape handles for attached parameters, in `named()` order.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    fn id(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }
}

// Indices into ParamNodes.ids, matching named() order.
const ENC_WZ: usize = 0;
const ENC_BZ: usize = 1;
const ENC_WR: usize = 2;
const ENC_BR: usize = 3;
const ENC_WH: usize = 4;
const ENC_BH: usize = 5;
const COARSE_WZ_CTX: usize = 6;
const COARSE_WZ_REC: usize = 7;
const COARSE_BZ: usize = 8;
const COARSE_WR_CTX: usize = 9;
const COARSE_WR_REC: usize = 10;
const COARSE_BR: usize = 11;
const COARSE_WH_CTX: usize = 12;
const COARSE_WH_REC: usize = 13;
const COARSE_BH: usize = 14;
const COARSE_HEAD_W: usize = 15;
const COARSE_HEAD_B: usize = 16;
const FINE_WZ_CTX: usize = 17;
const FINE_WZ_REC: usize = 18;
const FINE_BZ: usize = 19;
const FINE_WR_CTX: usize = 20;
const FINE_WR_REC: usize = 21;
const FINE_BR: usize = 22;
const FINE_WH_CTX: usize = 23;
const FINE_WH_REC: usize = 24;
const FINE_BH: usize = 25;
const FINE_MLP_W1: usize = 26;
const FINE_MLP_B1: usize = 27;
const FINE_MLP_W2: usize = 28;
const FINE_MLP_B2: usize = 29;

/// Per-parameter gradients in `named()` order.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub parts: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        ParamGrads {
            parts: params
                .named()
                .iter()
                .map(|(_, t)| vec![T::ZERO; t.numel()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.parts.iter_mut().zip(&other.parts) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64(s);
        for p in &mut self.parts {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// How decoder inputs are produced during a rollout.
pub enum DecodeFeedback<'a> {
    /// Teacher forcing: the input at step `i > 0` is the label of step `i-1`.
    Forced(&'a [SoftLabel]),
    /// Feed back the argmax of the model's own coarse distribution.
    Greedy,
    /// Feed back a cell sampled from the coarse distribution.
    Sampled(&'a mut ChaCha8Rng),
}

/// Output of a coarse rollout: per-step distributions over cells, the cell
/// chosen at each step (argmax for forced/greedy, sampled otherwise), and the
/// exact input planes used, for replay through the fine decoder.
pub struct CoarseRollout<T> {
    pub probs: Vec<NodeId>,
    pub cells: Vec<usize>,
    pub planes: Vec<Tensor<T>>,
}

/// Scalar loss nodes of one training pass.
pub struct LossNodes {
    pub cls: NodeId,
    pub reg: NodeId,
    pub wd: NodeId,
    pub total: NodeId,
}

/// Loss values extracted after a pass.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// One decoded future trajectory.
#[derive(Debug, Clone)]
pub struct PredictedTrajectory {
    pub cells: Vec<usize>,
    pub points: Vec<(f64, f64)>,
}

pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, params: ModelParams<T>) -> Self {
        Backbone { cfg, params }
    }

    pub fn init(cfg: BackboneConfig, seed: u64) -> Self {
        let params = ModelParams::init(&cfg, seed);
        Backbone { cfg, params }
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> ParamNodes {
        let ids = self
            .params
            .named()
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone(), trainable))
            .collect();
        ParamNodes { ids }
    }

    pub fn collect_grads(&self, tape: &Tape<T>, nodes: &ParamNodes) -> ParamGrads<T> {
        ParamGrads {
            parts: nodes
                .ids
                .iter()
                .map(|&id| tape.grad_tensor(id).data().to_vec())
                .collect(),
        }
    }

    fn check_features(&self, features: &Tensor<T>) -> Result<(), ModelError> {
        let want = [
            self.cfg.obs_len,
            self.cfg.grid.rows,
            self.cfg.grid.cols,
            self.cfg.num_classes,
        ];
        if features.shape() != want {
            return Err(ModelError::Tensor(crate::tensor::TensorError::InvalidShape {
                op: "encode_history",
                shape: features.shape().to_vec(),
                msg: format!("expected {want:?}"),
            }));
        }
        Ok(())
    }

    fn cell_plane(&self, label: &SoftLabel) -> Tensor<T> {
        let dense = label.to_dense::<T>(self.cfg.grid.num_cells());
        Tensor::from_vec(&[self.cfg.grid.rows, self.cfg.grid.cols, 1], dense).expect("plane shape")
    }

    /// Run the history encoder; returns the decoder context
    /// `[rows, cols, d_enc + obs_len * num_classes]`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &ParamNodes,
        features: NodeId,
        obs_cells: &[usize],
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.cfg;
        if obs_cells.len() != cfg.obs_len {
            return Err(ModelError::BadObservation {
                got: obs_cells.len(),
                expected: cfg.obs_len,
            });
        }
        let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
        let mut hidden = tape.constant(Tensor::zeros(&[rows, cols, cfg.d_enc]));
        let mut frames = Vec::with_capacity(cfg.obs_len);
        for t in 0..cfg.obs_len {
            let frame4 = tape.slice(features, 0, t, 1)?;
            let frame = tape.reshape(frame4, &[rows, cols, cfg.num_classes])?;
            frames.push(frame);
            let plane = tape.constant(self.cell_plane(&SoftLabel::hard(obs_cells[t])));
            let x = tape.concat(&[frame, plane], 2)?;
            let gate_in = tape.concat(&[x, hidden], 2)?;
            let az = tape.conv2d(gate_in, p.id(ENC_WZ), PAD)?;
            let az = tape.add_bias(az, p.id(ENC_BZ))?;
            let z = tape.sigmoid(az)?;
            let ar = tape.conv2d(gate_in, p.id(ENC_WR), PAD)?;
            let ar = tape.add_bias(ar, p.id(ENC_BR))?;
            let r = tape.sigmoid(ar)?;
            let rh = tape.mul(r, hidden)?;
            let cand_in = tape.concat(&[x, rh], 2)?;
            let ah = tape.conv2d(cand_in, p.id(ENC_WH), PAD)?;
            let ah = tape.add_bias(ah, p.id(ENC_BH))?;
            let cand = tape.tanh(ah)?;
            let keep = tape.affine(z, -T::ONE, T::ONE)?;
            let kh = tape.mul(keep, hidden)?;
            let zc = tape.mul(z, cand)?;
            hidden = tape.add(kh, zc)?;
        }
        let mut parts = vec![hidden];
        parts.extend(frames);
        Ok(tape.concat(&parts, 2)?)
    }

    fn split_gru_step(
        &self,
        tape: &mut Tape<T>,
        pre: &(NodeId, NodeId, NodeId),
        wz_rec: NodeId,
        wr_rec: NodeId,
        wh_rec: NodeId,
        plane: NodeId,
        hidden: NodeId,
    ) -> Result<NodeId, ModelError> {
        let rec_in = tape.concat(&[plane, hidden], 2)?;
        let az = tape.conv2d(rec_in, wz_rec, PAD)?;
        let az = tape.add(pre.0, az)?;
        let z = tape.sigmoid(az)?;
        let ar = tape.conv2d(rec_in, wr_rec, PAD)?;
        let ar = tape.add(pre.1, ar)?;
        let r = tape.sigmoid(ar)?;
        let rh = tape.mul(r, hidden)?;
        let cand_in = tape.concat(&[plane, rh], 2)?;
        let ah = tape.conv2d(cand_in, wh_rec, PAD)?;
        let ah = tape.add(pre.2, ah)?;
        let cand = tape.tanh(ah)?;
        let keep = tape.affine(z, -T::ONE, T::ONE)?;
        let kh = tape.mul(keep, hidden)?;
        let zc = tape.mul(z, cand)?;
        Ok(tape.add(kh, zc)?)
    }

    fn gru_precompute(
        &self,
        tape: &mut Tape<T>,
        ctx: NodeId,
        w_ctx: [NodeId; 3],
        b: [NodeId; 3],
    ) -> Result<(NodeId, NodeId, NodeId), ModelError> {
        let mut out = Vec::with_capacity(3);
        for i in 0..3 {
            let c = tape.conv2d(ctx, w_ctx[i], PAD)?;
            out.push(tape.add_bias(c, b[i])?);
        }
        Ok((out[0], out[1], out[2]))
    }

    /// Coarse decoder rollout over the prediction horizon.
    pub fn coarse_rollout(
        &self,
        tape: &mut Tape<T>,
        p: &ParamNodes,
        ctx: NodeId,
        last_obs_cell: usize,
        mut feedback: DecodeFeedback<'_>,
    ) -> Result<CoarseRollout<T>, ModelError> {
        let cfg = &self.cfg;
        let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
        let hw = cfg.grid.num_cells();
        let pre = self.gru_precompute(
            tape,
            ctx,
            [p.id(COARSE_WZ_CTX), p.id(COARSE_WR_CTX), p.id(COARSE_WH_CTX)],
            [p.id(COARSE_BZ), p.id(COARSE_BR), p.id(COARSE_BH)],
        )?;
        let mut hidden = tape.constant(Tensor::zeros(&[rows, cols, cfg.d_enc]));
        let mut plane_t = self.cell_plane(&SoftLabel::hard(last_obs_cell));
        let mut probs = Vec::with_capacity(cfg.pred_len());
        let mut cells = Vec::with_capacity(cfg.pred_len());
        let mut planes = Vec::with_capacity(cfg.pred_len());
        for step in 0..cfg.pred_len() {
            planes.push(plane_t.clone());
            let plane = tape.constant(plane_t.clone());
            hidden = self.split_gru_step(
                tape,
                &pre,
                p.id(COARSE_WZ_REC),
                p.id(COARSE_WR_REC),
                p.id(COARSE_WH_REC),
                plane,
                hidden,
            )?;
            let logit_map = tape.conv2d(hidden, p.id(COARSE_HEAD_W), 0)?;
            let logit_map = tape.add_bias(logit_map, p.id(COARSE_HEAD_B))?;
            let flat = tape.reshape(logit_map, &[hw])?;
            let prob = tape.softmax_last(flat)?;
            probs.push(prob);
            let chosen;
            let next_label = match feedback {
                DecodeFeedback::Forced(labels) => {
                    chosen = argmax_cell(tape.value(prob).data());
                    labels[step].clone()
                }
                DecodeFeedback::Greedy => {
                    chosen = argmax_cell(tape.value(prob).data());
                    SoftLabel::hard(chosen)
                }
                DecodeFeedback::Sampled(ref mut rng) => {
                    chosen = sample_from_probs(tape.value(prob).data(), rng);
                    SoftLabel::hard(chosen)
                }
            };
            cells.push(chosen);
            plane_t = self.cell_plane(&next_label);
        }
        Ok(CoarseRollout {
            probs,
            cells,
            planes,
        })
    }

    /// Fine decoder rollout consuming the same input planes used by the
    /// coarse rollout. Returns per-step `[HW, 2]` offset nodes.
    pub fn fine_rollout(
        &self,
        tape: &mut Tape<T>,
        p: &ParamNodes,
        ctx: NodeId,
        planes: &[Tensor<T>],
    ) -> Result<Vec<NodeId>, ModelError> {
        let cfg = &self.cfg;
        let hw = cfg.grid.num_cells();
        let pre = self.gru_precompute(
            tape,
            ctx,
            [p.id(FINE_WZ_CTX), p.id(FINE_WR_CTX), p.id(FINE_WH_CTX)],
            [p.id(FINE_BZ), p.id(FINE_BR), p.id(FINE_BH)],
        )?;
        let mut hidden = tape.constant(Tensor::zeros(&[cfg.grid.rows, cfg.grid.cols, cfg.d_enc]));
        let mut offsets = Vec::with_capacity(planes.len());
        for plane_t in planes {
            let plane = tape.constant(plane_t.clone());
            hidden = self.split_gru_step(
                tape,
                &pre,
                p.id(FINE_WZ_REC),
                p.id(FINE_WR_REC),
                p.id(FINE_WH_REC),
                plane,
                hidden,
            )?;
            let h1 = tape.conv2d(hidden, p.id(FINE_MLP_W1), 0)?;
            let h1 = tape.add_bias(h1, p.id(FINE_MLP_B1))?;
            let h1 = tape.relu(h1)?;
            let off = tape.conv2d(h1, p.id(FINE_MLP_W2), 0)?;
            let off = tape.add_bias(off, p.id(FINE_MLP_B2))?;
            offsets.push(tape.reshape(off, &[hw, 2])?);
        }
        Ok(offsets)
    }

    /// Classification loss of a teacher-forced pass on `labels`.
    pub fn cls_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &ParamNodes,
        features: NodeId,
        obs_cells: &[usize],
        labels: &SoftLabelSeq,
    ) -> Result<NodeId, ModelError> {
        self.check_labels(labels)?;
        let ctx = self.encode_on_tape(tape, p, features, obs_cells)?;
        let roll = self.coarse_rollout(
            tape,
            p,
            ctx,
            obs_cells[self.cfg.obs_len - 1],
            DecodeFeedback::Forced(labels),
        )?;
        Ok(cls_loss(tape, &roll.probs, labels, self.cfg.total_len)?)
    }

    fn check_labels(&self, labels: &SoftLabelSeq) -> Result<(), ModelError> {
        if labels.len() != self.cfg.pred_len() {
            return Err(ModelError::BadLabelLength {
                got: labels.len(),
                expected: self.cfg.pred_len(),
            });
        }
        Ok(())
    }

    /// Full training objective: classification + weighted regression +
    /// weight decay.
    pub fn full_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &ParamNodes,
        features: NodeId,
        obs_cells: &[usize],
        cls_labels: &SoftLabelSeq,
        future_pixels: &[(f64, f64)],
    ) -> Result<LossNodes, ModelError> {
        self.check_labels(cls_labels)?;
        if future_pixels.len() != self.cfg.pred_len() {
            return Err(ModelError::BadLabelLength {
                got: future_pixels.len(),
                expected: self.cfg.pred_len(),
            });
        }
        let ctx = self.encode_on_tape(tape, p, features, obs_cells)?;
        let roll = self.coarse_rollout(
            tape,
            p,
            ctx,
            obs_cells[self.cfg.obs_len - 1],
            DecodeFeedback::Forced(cls_labels),
        )?;
        let offsets = self.fine_rollout(tape, p, ctx, &roll.planes)?;
        let cls = cls_loss(tape, &roll.probs, cls_labels, self.cfg.total_len)?;
        let reg = reg_loss(
            tape,
            &offsets,
            future_pixels,
            &self.cfg.grid,
            self.cfg.total_len,
        )?;
        let wd = weight_decay(tape, &p.ids)?;
        let total = total_loss(tape, cls, reg, wd)?;
        Ok(LossNodes {
            cls,
            reg,
            wd,
            total,
        })
    }

    /// Forward-only classification loss value.
    pub fn cls_loss_value(
        &self,
        features: &Tensor<T>,
        obs_cells: &[usize],
        labels: &SoftLabelSeq,
    ) -> Result<f64, ModelError> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let p = self.attach(&mut tape, false);
        let f = tape.constant(features.clone());
        let loss = self.cls_loss_on_tape(&mut tape, &p, f, obs_cells, labels)?;
        Ok(tape.value(loss).item().to_f64())
    }

    /// Classification-loss values against several target label sequences,
    /// sharing one encoder pass.
    pub fn cls_loss_multi(
        &self,
        features: &Tensor<T>,
        obs_cells: &[usize],
        targets: &[&SoftLabelSeq],
    ) -> Result<Vec<f64>, ModelError> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let p = self.attach(&mut tape, false);
        let f = tape.constant(features.clone());
        let ctx = self.encode_on_tape(&mut tape, &p, f, obs_cells)?;
        let mut out = Vec::with_capacity(targets.len());
        for labels in targets {
            self.check_labels(labels)?;
            let roll = self.coarse_rollout(
                &mut tape,
                &p,
                ctx,
                obs_cells[self.cfg.obs_len - 1],
                DecodeFeedback::Forced(labels),
            )?;
            let loss = cls_loss(&mut tape, &roll.probs, labels, self.cfg.total_len)?;
            out.push(tape.value(loss).item().to_f64());
        }
        Ok(out)
    }

    /// Gradient of the classification loss with respect to the input
    /// features; parameters stay frozen and accumulate no gradient.
    pub fn input_cls_gradient(
        &self,
        features: &Tensor<T>,
        obs_cells: &[usize],
        labels: &SoftLabelSeq,
    ) -> Result<Tensor<T>, ModelError> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let p = self.attach(&mut tape, false);
        let f = tape.leaf(features.clone(), true);
        let loss = self.cls_loss_on_tape(&mut tape, &p, f, obs_cells, labels)?;
        tape.backward(loss)?;
        Ok(tape.grad_tensor(f))
    }

    /// Loss and parameter gradients for one training sample.
    pub fn sample_grads(
        &self,
        features: &Tensor<T>,
        obs_cells: &[usize],
        cls_labels: &SoftLabelSeq,
        future_pixels: &[(f64, f64)],
    ) -> Result<(LossBreakdown, ParamGrads<T>), ModelError> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let p = self.attach(&mut tape, true);
        let f = tape.constant(features.clone());
        let losses =
            self.full_loss_on_tape(&mut tape, &p, f, obs_cells, cls_labels, future_pixels)?;
        tape.backward(losses.total)?;
        let breakdown = LossBreakdown {
            total: tape.value(losses.total).item().to_f64(),
            cls: tape.value(losses.cls).item().to_f64(),
            reg: tape.value(losses.reg).item().to_f64(),
        };
        Ok((breakdown, self.collect_grads(&tape, &p)))
    }

    /// Decode `k` future trajectories: the first greedily, the rest by
    /// seeded temperature-1 sampling of grid cells.
    pub fn predict(
        &self,
        features: &Tensor<T>,
        obs_cells: &[usize],
        k: usize,
        seed: u64,
    ) -> Result<Vec<PredictedTrajectory>, ModelError> {
        self.check_features(features)?;
        let mut tape = Tape::new();
        let p = self.attach(&mut tape, false);
        let f = tape.constant(features.clone());
        let ctx = self.encode_on_tape(&mut tape, &p, f, obs_cells)?;
        let last = obs_cells[self.cfg.obs_len - 1];
        let mut out = Vec::with_capacity(k);
        for ki in 0..k {
            let roll = if ki == 0 {
                self.coarse_rollout(&mut tape, &p, ctx, last, DecodeFeedback::Greedy)?
            } else {
                let mut rng = rng_for(seed, &[0x73616d706c65, ki as u64]);
                self.coarse_rollout(&mut tape, &p, ctx, last, DecodeFeedback::Sampled(&mut rng))?
            };
            let offsets = self.fine_rollout(&mut tape, &p, ctx, &roll.planes)?;
            let mut points = Vec::with_capacity(roll.cells.len());
            for (step, &cell) in roll.cells.iter().enumerate() {
                let off = tape.value(offsets[step]);
                let ox = off.data()[cell * 2];
                let oy = off.data()[cell * 2 + 1];
                points.push(compose_at_cell(cell, (ox, oy), &self.cfg.grid));
            }
            out.push(PredictedTrajectory {
                cells: roll.cells,
                points,
            });
        }
        Ok(out)
    }
}

fn sample_from_probs<T: Scalar>(probs: &[T], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().map(|&v| v.to_f64()).sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &v) in probs.iter().enumerate() {
        r -= v.to_f64();
        if r <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}
