//! End-to-end model: projection, optional contrastive attention, decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_on, CAParams, CAVars, ContrastiveOutput};
use crate::decoder::{self, argmax, DecoderParams, DecoderVars, BOS, EOS};
use crate::error::{Error, Result};
use crate::features::{init_projection, FeatureGrid, RawFeatures};
use crate::gradcheck::CheckReport;
use crate::rng::{self, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which parts of contrastive attention feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaMode {
    /// Decoder reads the projected features directly (baseline).
    Off,
    /// Differentiate attention and fusion only; the closest-normal rows are
    /// `n` pool rows drawn at random instead of aggregate attention.
    DifferentiateOnly,
    /// Aggregate attention, differentiate attention and fusion.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub raw_dim: usize,
    /// Model size `d`.
    pub d: usize,
    /// Aggregate-attention heads `n`.
    pub heads: usize,
    pub embed: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub mode: CaMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.raw_dim, self.d, self.heads, self.embed, self.hidden].contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        if self.vocab_size < decoder::RESERVED.len() {
            return Err(Error::InvalidConfig(String::from(
                "vocabulary smaller than the reserved tokens",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `W_I`, `raw_dim × d`.
    pub projection: Tensor,
    pub ca: CAParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub projection: Var,
    pub ca: CAVars,
    pub decoder: DecoderVars,
}

impl ModelVars {
    /// Same order as [`Model::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = alloc::vec![self.projection];
        out.extend(self.ca.all());
        out.extend(self.decoder.all());
        out
    }
}

/// Tape handles of the encoder side.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub v: Var,
    pub v_hat: Var,
    pub v_hat_fused: Var,
    pub v_fused: Var,
    pub contrast: Option<crate::contrastive::ContrastiveVars>,
}

/// Encoder-side values for one instance.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub grid: FeatureGrid,
    pub contrastive: Option<ContrastiveOutput>,
    /// What the decoder consumes: fused features, or the grid when CA is off.
    pub v_hat_fused: Tensor,
    pub v_fused: Tensor,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let projection = init_projection(&mut r, config.raw_dim, config.d);
        let ca = CAParams::init(&mut r, config.d, config.heads)?;
        let decoder = DecoderParams::init(
            &mut r,
            config.vocab_size,
            config.embed,
            config.hidden,
            config.d,
        );
        Ok(Self {
            config,
            projection,
            ca,
            decoder,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.projection.shape() != (c.raw_dim, c.d) {
            return Err(Error::Shape {
                op: "projection",
                left: (c.raw_dim, c.d),
                right: self.projection.shape(),
            });
        }
        if self.ca.d != c.d || self.ca.n() != c.heads {
            return Err(Error::InvalidConfig(String::from(
                "contrastive parameters do not match config",
            )));
        }
        self.ca.validate()?;
        self.decoder.validate()?;
        if self.decoder.vocab_size() != c.vocab_size || self.decoder.d() != c.d {
            return Err(Error::InvalidConfig(String::from(
                "decoder parameters do not match config",
            )));
        }
        Ok(())
    }

    /// Parameter names, aligned with [`Model::tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = alloc::vec![String::from("projection")];
        for k in 0..self.ca.n() {
            names.push(format!("ca.head{k}.query"));
            names.push(format!("ca.head{k}.key"));
        }
        for n in ["ca.self.query", "ca.self.key", "ca.fusion"] {
            names.push(n.into());
        }
        for n in [
            "dec.embedding",
            "dec.init",
            "dec.update",
            "dec.reset",
            "dec.candidate",
            "dec.context",
            "dec.output",
        ] {
            names.push(n.into());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = alloc::vec![&self.projection];
        out.extend(self.ca.tensors());
        out.extend(self.decoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = alloc::vec![&mut self.projection];
        out.extend(self.ca.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let projection = if trainable {
            tape.leaf(self.projection.clone())
        } else {
            tape.constant(self.projection.clone())
        };
        ModelVars {
            projection,
            ca: self.ca.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }

    /// Projects, pools and (depending on the mode) applies contrastive
    /// attention. `rng` is only drawn from in differentiate-only mode.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        raw: &RawFeatures,
        pool: &Tensor,
        rng: &mut DetRng,
    ) -> Result<EncodedVars> {
        let patches = tape.constant(raw.patches.clone());
        let v = tape.matmul(patches, vars.projection)?;
        let v_hat = tape.mean_rows(v)?;
        let contrast = match self.config.mode {
            CaMode::Off => None,
            CaMode::Full => {
                let p = tape.constant(pool.clone());
                Some(contrastive_on(tape, v_hat, v, p, &vars.ca, None)?)
            }
            CaMode::DifferentiateOnly => {
                let rows = random_rows(pool, self.config.heads, rng)?;
                let p = tape.constant(pool.clone());
                let fixed = tape.constant(rows);
                Some(contrastive_on(tape, v_hat, v, p, &vars.ca, Some(fixed))?)
            }
        };
        let (v_hat_fused, v_fused) = match &contrast {
            Some(c) => (c.v_hat_fused, c.v_fused),
            None => (v_hat, v),
        };
        Ok(EncodedVars {
            v,
            v_hat,
            v_hat_fused,
            v_fused,
            contrast,
        })
    }

    /// Mean teacher-forced cross-entropy of `tokens` (bos ... eos).
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        raw: &RawFeatures,
        tokens: &[usize],
        pool: &Tensor,
        rng: &mut DetRng,
    ) -> Result<Var> {
        check_sequence(tokens, self.config.vocab_size)?;
        let enc = self.encode_on(tape, vars, raw, pool, rng)?;
        let mut hidden = decoder::init_on(tape, enc.v_hat_fused, &vars.decoder)?;
        let mut terms = Vec::with_capacity(tokens.len() - 1);
        for w in tokens.windows(2) {
            let out = decoder::step_on(tape, &vars.decoder, hidden, w[0], enc.v_fused)?;
            terms.push(tape.cross_entropy(out.logits, w[1])?);
            hidden = out.hidden;
        }
        tape.mean_scalars(&terms)
    }

    pub fn sequence_loss(
        &self,
        raw: &RawFeatures,
        tokens: &[usize],
        pool: &Tensor,
        rng: &mut DetRng,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let loss = self.loss_on(&mut tape, &vars, raw, tokens, pool, rng)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss and its gradient for every parameter, in [`Model::tensors`] order.
    pub fn loss_and_grads(
        &self,
        raw: &RawFeatures,
        tokens: &[usize],
        pool: &Tensor,
        rng: &mut DetRng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let loss = self.loss_on(&mut tape, &vars, raw, tokens, pool, rng)?;
        let grads = tape.backward_scalar(loss)?;
        Ok((
            tape.value(loss).get(0, 0),
            vars.all().into_iter().map(|v| grads.wrt(v)).collect(),
        ))
    }

    pub fn encode(&self, raw: &RawFeatures, pool: &Tensor, rng: &mut DetRng) -> Result<Encoded> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = self.encode_on(&mut tape, &vars, raw, pool, rng)?;
        let grid = FeatureGrid {
            image_id: raw.image_id.clone(),
            v: tape.value(enc.v).clone(),
            v_hat: tape.value(enc.v_hat).clone(),
        };
        let contrastive = match &enc.contrast {
            Some(c) => {
                let head_weights = if c.head_weights.is_empty() {
                    Tensor::zeros(0, pool.rows())
                } else {
                    let w = tape.concat_rows(&c.head_weights)?;
                    tape.value(w).clone()
                };
                Some(ContrastiveOutput {
                    p_prime: tape.value(c.p_prime).clone(),
                    v_common: tape.value(c.v_common).clone(),
                    v_contrast: tape.value(c.v_contrast).clone(),
                    v_hat_fused: tape.value(c.v_hat_fused).clone(),
                    v_fused: tape.value(c.v_fused).clone(),
                    head_weights,
                })
            }
            None => None,
        };
        Ok(Encoded {
            grid,
            contrastive,
            v_hat_fused: tape.value(enc.v_hat_fused).clone(),
            v_fused: tape.value(enc.v_fused).clone(),
        })
    }

    /// Argmax decoding until eos or `max_len` tokens; bos/eos are not returned.
    pub fn greedy_decode(
        &self,
        raw: &RawFeatures,
        pool: &Tensor,
        rng: &mut DetRng,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let enc = self.encode(raw, pool, rng)?;
        self.decode_from(&enc, max_len)
    }

    pub fn decode_from(&self, enc: &Encoded, max_len: usize) -> Result<Vec<usize>> {
        let mut state = decoder::init_state(&enc.v_hat_fused, &self.decoder)?;
        let mut token = BOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let (next, logits) = decoder::step(&state, token, &enc.v_fused, &self.decoder)?;
            token = argmax(logits.data());
            if token == EOS {
                break;
            }
            out.push(token);
            state = next;
        }
        Ok(out)
    }

    /// Compares analytic gradients of the sequence loss against central
    /// differences for every parameter entry. Returns one report per
    /// parameter tensor, aligned with [`Model::param_names`].
    pub fn gradcheck(
        &self,
        raw: &RawFeatures,
        tokens: &[usize],
        pool: &Tensor,
        seed: u64,
        h: f64,
        tol: crate::gradcheck::Tolerance,
    ) -> Result<Vec<CheckReport>> {
        let (_, grads) = self.loss_and_grads(raw, tokens, pool, &mut rng::seeded(seed))?;
        self.check_against(&grads, raw, tokens, pool, seed, h, tol)
    }

    /// Like [`Model::gradcheck`] but with caller-provided analytic gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn check_against(
        &self,
        grads: &[Tensor],
        raw: &RawFeatures,
        tokens: &[usize],
        pool: &Tensor,
        seed: u64,
        h: f64,
        tol: crate::gradcheck::Tolerance,
    ) -> Result<Vec<CheckReport>> {
        let mut probe = self.clone();
        let mut reports = Vec::with_capacity(grads.len());
        for (idx, g) in grads.iter().enumerate() {
            let mut numeric = Tensor::zeros(g.rows(), g.cols());
            for e in 0..g.len() {
                let orig = probe.tensors()[idx].data()[e];
                probe.tensors_mut()[idx].data_mut()[e] = orig + h;
                let plus = probe.sequence_loss(raw, tokens, pool, &mut rng::seeded(seed))?;
                probe.tensors_mut()[idx].data_mut()[e] = orig - h;
                let minus = probe.sequence_loss(raw, tokens, pool, &mut rng::seeded(seed))?;
                probe.tensors_mut()[idx].data_mut()[e] = orig;
                numeric.data_mut()[e] = (plus - minus) / (2.0 * h);
            }
            reports.push(crate::gradcheck::compare(g, &numeric, tol));
        }
        Ok(reports)
    }
}

/// `n` rows of `pool`, distinct when the pool is large enough.
pub fn random_rows(pool: &Tensor, n: usize, rng: &mut DetRng) -> Result<Tensor> {
    if pool.rows() == 0 {
        return Err(Error::EmptyInput("differentiate-only: empty pool"));
    }
    let idx: Vec<usize> = if n <= pool.rows() {
        rng::sample_indices(rng, pool.rows(), n)
    } else {
        use rand::Rng;
        (0..n).map(|_| rng.gen_range(0..pool.rows())).collect()
    };
    Ok(Tensor::from_fn(n, pool.cols(), |i, j| pool.get(idx[i], j)))
}

fn check_sequence(tokens: &[usize], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::BadSequence("empty sequence"));
    }
    if tokens.len() < 2 || tokens[0] != BOS || tokens[tokens.len() - 1] != EOS {
        return Err(Error::BadSequence(
            "sequence must start with bos and end with eos",
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    Ok(())
}
