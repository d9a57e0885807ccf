//! Train, generate and evaluate on loaded instances, plus the ablation
//! harness comparing baseline, differentiate-only and full contrastive
//! attention.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use contrastive_core::corpus::Instance;
use contrastive_core::decoder::Vocab;
use contrastive_core::metrics::{self, EvalReport};
use contrastive_core::model::{CaMode, Model};
use contrastive_core::pool::{build_pool, NormalityPool};
use contrastive_core::rng;
use contrastive_core::synth::tag_lexicon;
use contrastive_core::train::{train, TrainingRun};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TSV_HEADER: &str = "B-1\tB-2\tB-3\tB-4\tM\tR-L\tP\tR\tF1";

/// Builds a pool of `min(config.pool_size, normals)` entries under `model`'s
/// projection.
pub fn pool_for(train: &[Instance], model: &Model, config: &RunConfig) -> Result<NormalityPool> {
    let normals = train.iter().filter(|i| i.normal).count();
    if normals == 0 {
        return Err(CliError::Data(
            "training split has no normal instances for the pool".into(),
        ));
    }
    Ok(build_pool(
        train,
        &model.projection,
        config.pool_size.min(normals),
        config.seed,
    )?)
}

pub fn init_model(train: &[Instance], vocab: &Vocab, config: &RunConfig) -> Result<Model> {
    let raw_dim = train
        .first()
        .ok_or(contrastive_core::Error::EmptyCorpus)?
        .features
        .raw_dim();
    Ok(Model::init(
        config.model_config(raw_dim, vocab.len()),
        config.seed,
    )?)
}

/// Initialises a model from `config.seed`, builds its pool and trains it.
pub fn fit(
    train_set: &[Instance],
    vocab: &Vocab,
    config: &RunConfig,
    pool: Option<NormalityPool>,
    on_step: impl FnMut(usize, f64),
) -> Result<TrainingRun> {
    let model = init_model(train_set, vocab, config)?;
    let pool = match pool {
        Some(p) => p,
        None => pool_for(train_set, &model, config)?,
    };
    if pool.d() != model.config.d {
        return Err(CliError::Data(format!(
            "pool width {} does not match model size {}",
            pool.d(),
            model.config.d
        )));
    }
    if !pool.matches_projection(&model.projection) {
        log::warn!("pool was built under a different projection than the model being trained");
    }
    Ok(train(
        model,
        train_set,
        vocab,
        pool,
        &config.train_config(),
        on_step,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub id: String,
    pub report: String,
}

/// Greedy reports for `instances`, in input order. Differentiate-only mode
/// draws its pool rows from a stream derived from `seed` and the position.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    pool: &NormalityPool,
    instances: &[Instance],
    max_len: usize,
    seed: u64,
) -> Result<Vec<Generated>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut r = rng::seeded(rng::derive_seed(seed, i as u64));
            let ids = model.greedy_decode(&inst.features, &pool.entries, &mut r, max_len)?;
            Ok(Generated {
                id: inst.id.clone(),
                report: vocab.decode(&ids).join(" "),
            })
        })
        .collect()
}

/// Scores generated reports against gold instances matched by id.
pub fn evaluate(generated: &[Generated], gold: &[Instance]) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Generated> = generated.iter().map(|g| (g.id.as_str(), g)).collect();
    if by_id.len() != generated.len() {
        return Err(CliError::Data(
            "generated reports contain duplicate ids".into(),
        ));
    }
    if generated.len() != gold.len() {
        return Err(CliError::Data(format!(
            "{} generated reports for {} gold instances",
            generated.len(),
            gold.len()
        )));
    }
    let mut cands = Vec::with_capacity(gold.len());
    for g in gold {
        let c = by_id
            .get(g.id.as_str())
            .ok_or_else(|| CliError::Data(format!("no generated report for id {:?}", g.id)))?;
        cands.push(
            c.report
                .split_whitespace()
                .map(String::from)
                .collect::<Vec<_>>(),
        );
    }
    let refs: Vec<Vec<String>> = gold.iter().map(|g| g.report.clone()).collect();
    let tags: Vec<Vec<String>> = gold.iter().map(|g| g.tags.clone()).collect();
    Ok(metrics::evaluate(&cands, &refs, &tags, &tag_lexicon())?)
}

/// Metric row in header order, METEOR as `n/a`.
pub fn tsv_row(r: &EvalReport) -> String {
    let e = &r.efficacy;
    format!(
        "{:.4}\t{:.4}\t{:.4}\t{:.4}\tn/a\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, e.precision, e.recall, e.f1
    )
}

/// One ablation arm: a mode and a head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub mode: CaMode,
    pub heads: usize,
}

impl Arm {
    pub fn label(&self) -> String {
        match self.mode {
            CaMode::Off => "Baseline".into(),
            CaMode::DifferentiateOnly => format!("w/ DA (n={})", self.heads),
            CaMode::Full => format!("w/ DA+AA (n={})", self.heads),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    /// One report per seed, in seed order.
    pub runs: Vec<EvalReport>,
}

impl ArmResult {
    pub fn median(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        median(self.runs.iter().map(f).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty(), "median of nothing");
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Trains and evaluates every arm for every seed. Seeds are paired: arm `a`
/// and arm `b` with seed `s` share the corpus order and sampling streams.
pub fn run_ablation(
    train_set: &[Instance],
    eval_set: &[Instance],
    vocab: &Vocab,
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    mut progress: impl FnMut(&Arm, u64, &EvalReport),
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = RunConfig {
                seed,
                mode: arm.mode,
                heads: arm.heads,
                ..base.clone()
            };
            let run = fit(train_set, vocab, &config, None, |_, _| {})?;
            let generated = generate(&run.model, vocab, &run.pool, eval_set, config.max_len, seed)?;
            let report = evaluate(&generated, eval_set)?;
            progress(arm, seed, &report);
            runs.push(report);
        }
        out.push(ArmResult { arm: *arm, runs });
    }
    Ok(out)
}

/// Arms of the head-count sweep: the baseline, then differentiate-only and
/// full contrastive attention at every `n`.
pub fn sweep_arms(heads: &[usize]) -> Vec<Arm> {
    let mut arms = vec![Arm {
        mode: CaMode::Off,
        heads: heads.first().copied().unwrap_or(1),
    }];
    for &n in heads {
        arms.push(Arm {
            mode: CaMode::DifferentiateOnly,
            heads: n,
        });
        arms.push(Arm {
            mode: CaMode::Full,
            heads: n,
        });
    }
    arms
}

/// Table with one row per arm holding seed medians of every metric.
pub fn ablation_tsv(results: &[ArmResult]) -> String {
    let mut out = format!("Setting\tn\t{TSV_HEADER}\n");
    for r in results {
        let n = match r.arm.mode {
            CaMode::Off => "-".to_string(),
            _ => r.arm.heads.to_string(),
        };
        let m = EvalReport {
            bleu: [0, 1, 2, 3].map(|k| r.median(|e| e.bleu[k])),
            rouge_l: r.median(|e| e.rouge_l),
            efficacy: metrics::Efficacy {
                precision: r.median(|e| e.efficacy.precision),
                recall: r.median(|e| e.efficacy.recall),
                f1: r.median(|e| e.efficacy.f1),
            },
            count: r.runs.first().map_or(0, |e| e.count),
        };
        let label = match r.arm.mode {
            CaMode::Off => "Baseline",
            CaMode::DifferentiateOnly => "w/ DA",
            CaMode::Full => "w/ DA+AA",
        };
        writeln!(out, "{label}\t{n}\t{}", tsv_row(&m)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_layout() {
        let arms = sweep_arms(&[1, 2]);
        let labels: Vec<String> = arms.iter().map(Arm::label).collect();
        assert_eq!(
            labels,
            [
                "Baseline",
                "w/ DA (n=1)",
                "w/ DA+AA (n=1)",
                "w/ DA (n=2)",
                "w/ DA+AA (n=2)"
            ]
        );
    }

    #[test]
    fn row_format() {
        let r = EvalReport {
            bleu: [1.0, 0.5, 0.25, 0.125],
            rouge_l: 0.75,
            efficacy: metrics::Efficacy::from_counts(1, 0, 1),
            count: 1,
        };
        assert_eq!(
            tsv_row(&r),
            "1.0000\t0.5000\t0.2500\t0.1250\tn/a\t0.7500\t1.0000\t0.5000\t0.6667"
        );
        assert_eq!(
            TSV_HEADER.split('\t').count(),
            tsv_row(&r).split('\t').count()
        );
    }
}
