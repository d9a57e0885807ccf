//! A minimal gated recurrent report decoder with dot-product visual context.
//!
//! Per step, with hidden state `h`, previous token `t` and visual features
//! `V'` (`N_I × d`):
//!
//! ```text
//! c   = softmax((h·Wa)·V'ᵀ / sqrt(d)) · V'
//! x   = [E[t]; c]
//! z   = σ([x; h]·Wz)          r = σ([x; h]·Wr)
//! h~  = tanh([x; r⊙h]·Wc)
//! h'  = h + z⊙(h~ - h)
//! out = h'·Wo
//! ```
//!
//! The initial state is `tanh(v_hat'·W_init)`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table; the first four entries are always pad, bos, eos, unk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::InvalidConfig(
                "vocabulary must start with <pad> <bos> <eos> <unk>".to_string(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by every token seen at least `min_count`
    /// times, in lexicographic order.
    pub fn build<'a, I>(reports: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in reports {
            for t in r {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
                .map(|(t, _)| t.to_string()),
        );
        Self::new(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// `bos, ids..., eos`
    pub fn encode(&self, report: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(report.len() + 2);
        out.push(BOS);
        out.extend(report.iter().map(|t| self.id(t)));
        out.push(EOS);
        out
    }

    /// Drops pad/bos/eos and maps ids back to tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// `|V| × e`
    pub embedding: Tensor,
    /// `d × h`, initial state from the fused global feature.
    pub init: Tensor,
    /// Update, reset and candidate gates, each `(e + d + h) × h`.
    pub update: Tensor,
    pub reset: Tensor,
    pub candidate: Tensor,
    /// Context query projection, `h × d`.
    pub context: Tensor,
    /// Output projection, `h × |V|`.
    pub output: Tensor,
}

impl DecoderParams {
    /// Uniform initialisation with bound `1/sqrt(fan_in)` per matrix.
    pub fn init(rng: &mut DetRng, vocab: usize, embed: usize, hidden: usize, d: usize) -> Self {
        let u = |rng: &mut DetRng, r: usize, c: usize| {
            rng::uniform(rng, r, c, 1.0 / libm::sqrt(r as f64))
        };
        let gate_in = embed + d + hidden;
        Self {
            embedding: rng::uniform(rng, vocab, embed, 1.0 / libm::sqrt(embed as f64)),
            init: u(rng, d, hidden),
            update: u(rng, gate_in, hidden),
            reset: u(rng, gate_in, hidden),
            candidate: u(rng, gate_in, hidden),
            context: u(rng, hidden, d),
            output: u(rng, hidden, vocab),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.init.cols()
    }

    pub fn d(&self) -> usize {
        self.init.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        alloc::vec![
            &self.embedding,
            &self.init,
            &self.update,
            &self.reset,
            &self.candidate,
            &self.context,
            &self.output,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![
            &mut self.embedding,
            &mut self.init,
            &mut self.update,
            &mut self.reset,
            &mut self.candidate,
            &mut self.context,
            &mut self.output,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (v, e, h, d) = (
            self.vocab_size(),
            self.embed_dim(),
            self.hidden_dim(),
            self.d(),
        );
        let expect = [
            (v, e),
            (d, h),
            (e + d + h, h),
            (e + d + h, h),
            (e + d + h, h),
            (h, d),
            (h, v),
        ];
        for (t, s) in self.tensors().into_iter().zip(expect) {
            if t.shape() != s {
                return Err(Error::Shape {
                    op: "decoder params",
                    left: s,
                    right: t.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DecoderVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DecoderVars {
            embedding: put(&self.embedding),
            init: put(&self.init),
            update: put(&self.update),
            reset: put(&self.reset),
            candidate: put(&self.candidate),
            context: put(&self.context),
            output: put(&self.output),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub embedding: Var,
    pub init: Var,
    pub update: Var,
    pub reset: Var,
    pub candidate: Var,
    pub context: Var,
    pub output: Var,
}

impl DecoderVars {
    /// Same order as [`DecoderParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        alloc::vec![
            self.embedding,
            self.init,
            self.update,
            self.reset,
            self.candidate,
            self.context,
            self.output,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    /// `1 × h`
    pub hidden: Tensor,
    pub step: usize,
    pub emitted: Vec<usize>,
}

pub fn init_on(tape: &mut Tape, v_hat_fused: Var, vars: &DecoderVars) -> Result<Var> {
    let lin = tape.matmul(v_hat_fused, vars.init)?;
    tape.tanh(lin)
}

/// Handles produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub hidden: Var,
    pub logits: Var,
    pub context: Var,
    pub attention: Var,
}

pub fn step_on(
    tape: &mut Tape,
    vars: &DecoderVars,
    hidden: Var,
    token: usize,
    v_fused: Var,
) -> Result<StepVars> {
    let vocab = tape.value(vars.embedding).rows();
    if token >= vocab {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let d = tape.value(v_fused).cols();
    let query = tape.matmul(hidden, vars.context)?;
    let raw = tape.matmul_t(query, v_fused)?;
    let scores = tape.scale(raw, 1.0 / libm::sqrt(d as f64))?;
    let attention = tape.softmax_rows(scores)?;
    let context = tape.matmul(attention, v_fused)?;

    let emb = tape.select_row(vars.embedding, token)?;
    let x = tape.concat_cols(&[emb, context])?;
    let xh = tape.concat_cols(&[x, hidden])?;
    let z_lin = tape.matmul(xh, vars.update)?;
    let z = tape.sigmoid(z_lin)?;
    let r_lin = tape.matmul(xh, vars.reset)?;
    let r = tape.sigmoid(r_lin)?;
    let rh = tape.mul(r, hidden)?;
    let xrh = tape.concat_cols(&[x, rh])?;
    let c_lin = tape.matmul(xrh, vars.candidate)?;
    let cand = tape.tanh(c_lin)?;
    let delta = tape.sub(cand, hidden)?;
    let gated = tape.mul(z, delta)?;
    let next = tape.add(hidden, gated)?;
    let logits = tape.matmul(next, vars.output)?;
    Ok(StepVars {
        hidden: next,
        logits,
        context,
        attention,
    })
}

/// `hidden = tanh(v_hat_fused · W_init)`, step 0.
pub fn init_state(v_hat_fused: &Tensor, params: &DecoderParams) -> Result<DecodeState> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let v = tape.constant(v_hat_fused.clone());
    let h = init_on(&mut tape, v, &vars)?;
    Ok(DecodeState {
        hidden: tape.value(h).clone(),
        step: 0,
        emitted: Vec::new(),
    })
}

/// One decoding step on `token`; returns the next state and `1 × |V|` logits.
pub fn step(
    state: &DecodeState,
    token: usize,
    v_fused: &Tensor,
    params: &DecoderParams,
) -> Result<(DecodeState, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let h = tape.constant(state.hidden.clone());
    let v = tape.constant(v_fused.clone());
    let out = step_on(&mut tape, &vars, h, token, v)?;
    let mut emitted = state.emitted.clone();
    emitted.push(token);
    Ok((
        DecodeState {
            hidden: tape.value(out.hidden).clone(),
            step: state.step + 1,
            emitted,
        },
        tape.value(out.logits).clone(),
    ))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
