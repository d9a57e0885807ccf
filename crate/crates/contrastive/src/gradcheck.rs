//! Full-pipeline finite-difference check at toy dimensions.

use contrastive_core::decoder::{BOS, EOS, RESERVED};
use contrastive_core::features::RawFeatures;
use contrastive_core::gradcheck::{CheckReport, Tolerance};
use contrastive_core::model::{CaMode, Model, ModelConfig};
use contrastive_core::rng;
use contrastive_core::tape::{OpKind, Tape};
use rand::Rng;

use crate::error::{CliError, Result};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub n: usize,
    pub pool: usize,
    pub patches: usize,
    pub vocab: usize,
    pub raw_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub tokens: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d: 8,
            n: 2,
            pool: 5,
            patches: 4,
            vocab: 12,
            raw_dim: 6,
            embed: 4,
            hidden: 6,
            tokens: 5,
        }
    }
}

impl Dims {
    /// Parses overrides such as `d=8,n=2,np=5,ni=4,v=12`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut dims = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--dims entry {part:?} is not key=value"))
            })?;
            let v: usize = v
                .parse()
                .map_err(|_| CliError::Usage(format!("--dims value {v:?} is not a count")))?;
            let slot = match k.trim() {
                "d" => &mut dims.d,
                "n" => &mut dims.n,
                "np" | "n_p" => &mut dims.pool,
                "ni" | "n_i" => &mut dims.patches,
                "v" | "vocab" => &mut dims.vocab,
                "raw" | "raw_dim" => &mut dims.raw_dim,
                "e" => &mut dims.embed,
                "h" => &mut dims.hidden,
                "t" | "tokens" => &mut dims.tokens,
                other => return Err(CliError::Usage(format!("unknown --dims key {other:?}"))),
            };
            *slot = v;
        }
        if dims.vocab <= RESERVED.len() {
            return Err(CliError::Usage(
                "vocabulary must exceed the four reserved tokens".into(),
            ));
        }
        Ok(dims)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// `(parameter name, report)` in model order.
    pub reports: Vec<(String, CheckReport)>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.passed)
    }

    pub fn max_rel(&self) -> f64 {
        self.reports
            .iter()
            .map(|(_, r)| r.max_rel)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.reports.iter().map(|(_, r)| r.checked).sum()
    }
}

/// Checks the analytic gradient of the sequence loss for every parameter,
/// the projection included. With `fault`, the adjoint of that op is scaled
/// by the given factor first, which must make the check fail.
pub fn run(dims: Dims, mode: CaMode, seed: u64, fault: Option<(OpKind, f64)>) -> Result<Outcome> {
    let config = ModelConfig {
        raw_dim: dims.raw_dim,
        d: dims.d,
        heads: dims.n,
        embed: dims.embed,
        hidden: dims.hidden,
        vocab_size: dims.vocab,
        mode,
    };
    let model = Model::init(config, seed)?;
    let mut r = rng::seeded(rng::derive_seed(seed, 0x4743));
    let raw = RawFeatures::new(
        "gradcheck",
        rng::uniform(&mut r, dims.patches, dims.raw_dim, 1.0),
    )?;
    let pool = rng::uniform(&mut r, dims.pool, dims.d, 1.0);
    let mut tokens = vec![BOS];
    tokens.extend((0..dims.tokens).map(|_| r.gen_range(RESERVED.len()..dims.vocab)));
    tokens.push(EOS);

    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_adjoint_fault(kind, factor);
    }
    let vars = model.bind(&mut tape, true);
    let sample_seed = rng::derive_seed(seed, 0x5350);
    let loss = model.loss_on(
        &mut tape,
        &vars,
        &raw,
        &tokens,
        &pool,
        &mut rng::seeded(sample_seed),
    )?;
    let grads = tape.backward_scalar(loss)?;
    let grads: Vec<_> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    let reports = model.check_against(
        &grads,
        &raw,
        &tokens,
        &pool,
        sample_seed,
        STEP,
        Tolerance::STANDARD,
    )?;
    Ok(Outcome {
        reports: model.param_names().into_iter().zip(reports).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dims() {
        let d = Dims::parse("d=8, n=2,np=5,ni=4,v=12").unwrap();
        assert_eq!((d.d, d.n, d.pool, d.patches, d.vocab), (8, 2, 5, 4, 12));
        assert!(Dims::parse("q=1").is_err());
        assert!(Dims::parse("v=3").is_err());
    }
}
