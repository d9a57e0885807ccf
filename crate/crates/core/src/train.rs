//! Teacher-forced training with Adam.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pool::{refresh_pool, NormalityPool};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Seeds instance order and differentiate-only row sampling.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rebuild pool entries under the current projection every this many
    /// steps; 0 keeps the pool frozen.
    pub refresh_pool_every: usize,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            refresh_pool_every: 0,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (libm::sqrt(vhat) + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: Model,
    pub pool: NormalityPool,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Trains `model` for `config.steps` single-instance steps.
///
/// Instances are visited in a fresh seeded permutation each epoch.
/// `on_step(step, loss)` is called after every update.
pub fn train(
    mut model: Model,
    corpus: &[Instance],
    vocab: &Vocab,
    mut pool: NormalityPool,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainingRun> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "learning rate must be finite and non-negative, got {}",
            config.learning_rate
        )));
    }
    model.validate()?;
    let encoded: Vec<Vec<usize>> = corpus.iter().map(|i| vocab.encode(&i.report)).collect();
    let mut adam = Adam::new(
        &model.tensors(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut order_rng = rng::seeded(rng::derive_seed(config.seed, 0x4f52_4452));
    let mut sample_rng = rng::seeded(rng::derive_seed(config.seed, 0x5341_4d50));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let pos = step % corpus.len();
        if pos == 0 {
            rng::shuffle(&mut order_rng, &mut order);
        }
        let i = order[pos];
        let (loss, mut grads) = model.loss_and_grads(
            &corpus[i].features,
            &encoded[i],
            &pool.entries,
            &mut sample_rng,
        )?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = config.clip_norm {
            let norm = libm::sqrt(
                grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>(),
            );
            if norm > max {
                let s = max / norm;
                for g in &mut grads {
                    *g = g.scale(s);
                }
            }
        }
        adam.step(model.tensors_mut(), &grads);
        losses.push(loss);
        on_step(step, loss);
        if config.refresh_pool_every > 0 && (step + 1) % config.refresh_pool_every == 0 {
            pool = refresh_pool(&pool, corpus, &model.projection)?;
        }
    }
    Ok(TrainingRun {
        model,
        pool,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CaMode, ModelConfig};
    use crate::pool::build_pool;
    use crate::synth::SynthConfig;

    fn setup(mode: CaMode) -> (Model, Vec<Instance>, Vocab, NormalityPool) {
        let cfg = SynthConfig::default();
        let idx: Vec<usize> = (0..50).collect();
        let corpus = crate::corpus::synthesize(5, &idx, 0.3, &cfg);
        let vocab = Vocab::build(corpus.iter().map(|i| i.report.as_slice()), 1);
        let model = Model::init(
            ModelConfig {
                raw_dim: cfg.raw_dim,
                d: 16,
                heads: 2,
                embed: 8,
                hidden: 16,
                vocab_size: vocab.len(),
                mode,
            },
            1,
        )
        .unwrap();
        let pool = build_pool(&corpus, &model.projection, 10, 2).unwrap();
        (model, corpus, vocab, pool)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (model, corpus, vocab, pool) = setup(CaMode::Full);
        let cfg = TrainConfig {
            steps: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let run = train(model.clone(), &corpus, &vocab, pool, &cfg, |_, _| {}).unwrap();
        assert_eq!(run.model, model);
        assert_eq!(run.losses.len(), 5);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (model, corpus, vocab, pool) = setup(CaMode::DifferentiateOnly);
        let cfg = TrainConfig {
            steps: 8,
            ..TrainConfig::default()
        };
        let a = train(
            model.clone(),
            &corpus,
            &vocab,
            pool.clone(),
            &cfg,
            |_, _| {},
        )
        .unwrap();
        let b = train(model, &corpus, &vocab, pool, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.model, b.model);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
    }

    #[test]
    fn refresh_updates_fingerprint() {
        let (model, corpus, vocab, pool) = setup(CaMode::Full);
        let cfg = TrainConfig {
            steps: 1,
            refresh_pool_every: 1,
            ..TrainConfig::default()
        };
        let before = pool.projection_fingerprint;
        let run = train(model, &corpus, &vocab, pool, &cfg, |_, _| {}).unwrap();
        assert_ne!(run.pool.projection_fingerprint, before);
        assert!(run.pool.matches_projection(&run.model.projection));
    }

    #[test]
    fn loss_decreases_on_small_corpus() {
        for seed in 0..5 {
            let (model, corpus, vocab, pool) = setup(CaMode::Full);
            let cfg = TrainConfig {
                steps: 300,
                seed,
                ..TrainConfig::default()
            };
            let run = train(model, &corpus, &vocab, pool, &cfg, |_, _| {}).unwrap();
            let head: f64 = run.losses[..50].iter().sum::<f64>() / 50.0;
            let tail: f64 = run.losses[run.losses.len() - 50..].iter().sum::<f64>() / 50.0;
            assert!(tail < head, "seed {seed}: {head} -> {tail}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (model, corpus, vocab, pool) = setup(CaMode::Full);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(model.clone(), &[], &vocab, pool.clone(), &cfg, |_, _| {}),
            Err(Error::EmptyCorpus)
        ));
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..cfg
        };
        assert!(train(model, &corpus, &vocab, pool, &bad, |_, _| {}).is_err());
    }

    #[test]
    fn divergence_aborts() {
        let (mut model, corpus, vocab, pool) = setup(CaMode::Full);
        model.decoder.output.data_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        let err = train(model, &corpus, &vocab, pool, &cfg, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
    }
}
