use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{MaskKind, PromptedInput};
use super::vocab::TokenId;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pad_id: TokenId,
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Two pre-norm blocks, width 64, four heads.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 128,
            max_len: 128,
            pad_id: 0,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::Invalid("encoder sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Small pre-norm transformer encoder with a masked-token prediction head.
///
/// Parameters live in a shared [`ParamStore`]; the encoder only keeps ids.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    mlm_w: ParamId,
    mlm_b: ParamId,
}

/// Final-block hidden states for one prompted input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch<T> {
    pub hidden: Tensor<T>,
    pub input: PromptedInput,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let ones = |n| Tensor::filled(1, n, T::one());
        let zeros = |n| Tensor::zeros(1, n);
        let w_std = 1.0 / (d as f64).sqrt();
        let tok_emb = store.add_normal("encoder.tok_emb", cfg.vocab_size, d, w_std, rng);
        let pos_emb = store.add_normal("encoder.pos_emb", cfg.max_len, d, 0.1 * w_std, rng);
        let out_std = w_std / ((2 * cfg.n_blocks) as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let n = |s: &str| format!("encoder.block{b}.{s}");
                Block {
                    ln1_g: store.add(n("ln1_g"), ones(d)),
                    ln1_b: store.add(n("ln1_b"), zeros(d)),
                    wq: store.add_normal(&n("wq"), d, d, w_std, rng),
                    bq: store.add(n("bq"), zeros(d)),
                    wk: store.add_normal(&n("wk"), d, d, w_std, rng),
                    bk: store.add(n("bk"), zeros(d)),
                    wv: store.add_normal(&n("wv"), d, d, w_std, rng),
                    bv: store.add(n("bv"), zeros(d)),
                    wo: store.add_normal(&n("wo"), d, d, out_std, rng),
                    bo: store.add(n("bo"), zeros(d)),
                    ln2_g: store.add(n("ln2_g"), ones(d)),
                    ln2_b: store.add(n("ln2_b"), zeros(d)),
                    w1: store.add_normal(&n("w1"), d, cfg.d_ff, w_std, rng),
                    b1: store.add(n("b1"), zeros(cfg.d_ff)),
                    w2: store.add_normal(&n("w2"), cfg.d_ff, d, out_std * (d as f64 / cfg.d_ff as f64).sqrt(), rng),
                    b2: store.add(n("b2"), zeros(d)),
                }
            })
            .collect();
        let lnf_g = store.add("encoder.lnf_g", ones(d));
        let lnf_b = store.add("encoder.lnf_b", zeros(d));
        let mlm_w = store.add_normal("encoder.mlm_w", cfg.vocab_size, d, w_std, rng);
        let mlm_b = store.add("encoder.mlm_b", zeros(cfg.vocab_size));
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            mlm_w,
            mlm_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// Output-projection weight and bias of attention in block `b`.
    pub fn attention_output_params(&self, b: usize) -> (ParamId, ParamId) {
        (self.blocks[b].wo, self.blocks[b].bo)
    }

    pub fn token_embedding_param(&self) -> ParamId {
        self.tok_emb
    }

    /// Records the forward pass on `tape`; returns the `n x d_model` hidden states.
    /// `injection`, when given, is added to the input embeddings.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[TokenId], injection: Option<Var>) -> Var {
        let n = tokens.len();
        assert!(n > 0 && n <= self.cfg.max_len, "sequence length {n} outside 1..={}", self.cfg.max_len);
        let d = self.cfg.d_model;
        let eps = T::lit(self.cfg.ln_eps);

        let emb = store.bind(tape, self.tok_emb);
        let pos = store.bind(tape, self.pos_emb);
        let tok = tape.gather_rows(emb, tokens);
        let positions: Vec<usize> = (0..n).collect();
        let p = tape.gather_rows(pos, &positions);
        let mut x = tape.add(tok, p);
        if let Some(inj) = injection {
            assert_eq!(tape.shape(inj), (n, d), "injection shape");
            x = tape.add(x, inj);
        }

        let key_mask: Vec<bool> = tokens.iter().map(|&t| t == self.cfg.pad_id).collect();
        let any_pad = key_mask.iter().any(|&m| m);
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();

        for blk in &self.blocks {
            let h = self.affine_norm(tape, store, x, blk.ln1_g, blk.ln1_b, eps);
            let q = self.linear(tape, store, h, blk.wq, blk.bq);
            let k = self.linear(tape, store, h, blk.wk, blk.bk);
            let v = self.linear(tape, store, h, blk.wv, blk.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, s, e);
                let kh = tape.slice_cols(k, s, e);
                let vh = tape.slice_cols(v, s, e);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let att = tape.softmax(scores, any_pad.then_some(key_mask.as_slice()));
                outs.push(tape.matmul(att, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = self.linear(tape, store, cat, blk.wo, blk.bo);
            x = tape.add(x, o);

            let h2 = self.affine_norm(tape, store, x, blk.ln2_g, blk.ln2_b, eps);
            let f = self.linear(tape, store, h2, blk.w1, blk.b1);
            let f = tape.gelu(f);
            let f = self.linear(tape, store, f, blk.w2, blk.b2);
            x = tape.add(x, f);
        }
        self.affine_norm(tape, store, x, self.lnf_g, self.lnf_b, eps)
    }

    /// Vocabulary logits of the token-prediction head at `positions`.
    pub fn mlm_logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var, positions: &[usize]) -> Var {
        let h = tape.gather_rows(hidden, positions);
        let w = store.bind(tape, self.mlm_w);
        let b = store.bind(tape, self.mlm_b);
        let z = tape.matmul_t(h, w);
        tape.add_row(z, b)
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = store.bind(tape, w);
        let b = store.bind(tape, b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn affine_norm<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, g: ParamId, b: ParamId, eps: T) -> Var {
        let n = tape.layer_norm(x, eps);
        let g = store.bind(tape, g);
        let b = store.bind(tape, b);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }

    /// Encodes one prompted input with per-position injection vectors.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, input: &PromptedInput, injections: &[(usize, Vec<T>)]) -> Result<EncodedBatch<T>> {
        let n = input.len();
        let d = self.cfg.d_model;
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence length {n} outside 1..={}", self.cfg.max_len)));
        }
        let mut tape = Tape::new();
        let inj = if injections.is_empty() {
            None
        } else {
            let mut m = Tensor::zeros(n, d);
            for (p, v) in injections {
                if v.len() != d {
                    return Err(Error::Shape(format!("injection width {} != d_model {d}", v.len())));
                }
                if *p >= n {
                    return Err(Error::Shape(format!("injection position {p} outside sequence of length {n}")));
                }
                for (o, &x) in m.row_mut(*p).iter_mut().zip(v) {
                    *o += x;
                }
            }
            Some(tape.constant(m))
        };
        let h = self.forward(&mut tape, store, &input.tokens, inj);
        Ok(EncodedBatch {
            hidden: tape.value(h).clone(),
            input: input.clone(),
        })
    }
}

/// Hidden vectors at the recorded slots, one per level.
pub fn extract_mask_states<T: Scalar>(batch: &EncodedBatch<T>, which: MaskKind) -> Result<Vec<Vec<T>>> {
    let positions = batch.input.mask_positions(which);
    if positions.is_empty() {
        return Err(Error::Invalid(format!("input has no {which:?} mask positions")));
    }
    Ok(positions.iter().map(|&p| batch.hidden.row(p).to_vec()).collect())
}
