//! Seeded synthetic corpus: feature specs plus templated reports.
//!
//! Each instance is drawn from one of `views` prototype feature grids (think
//! acquisition orientation). Abnormal instances carry one or more tags; each
//! tag adds a finding sentence to the report and a signature to a contiguous
//! block of patches. The view prototype also picks the opening sentence, so
//! the whole report is predictable from the features.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Abnormality tags, each with its trigger token and finding sentence.
pub const TAGS: [(&str, &str); 6] = [
    ("effusion", "there is a small left pleural effusion ."),
    ("cardiomegaly", "there is mild cardiomegaly ."),
    ("pneumothorax", "there is a right apical pneumothorax ."),
    (
        "opacity",
        "there is a patchy opacity in the right lower lobe .",
    ),
    ("nodule", "a small nodule is seen in the left upper lobe ."),
    ("fracture", "there is an old healed rib fracture ."),
];

const VIEW_SENTENCES: [&str; 6] = [
    "the heart size is normal .",
    "heart size and mediastinal contour are within normal limits .",
    "the cardiomediastinal silhouette is unremarkable .",
    "cardiac and mediastinal contours are stable .",
    "the heart is not enlarged .",
    "normal heart size and pulmonary vascularity .",
];

const LUNG_SENTENCES: [&str; 2] = ["the lungs are clear .", "lungs are clear bilaterally ."];

const NORMAL_CLOSING: &str = "no acute cardiopulmonary abnormality .";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Patches per image (`N_I`).
    pub patches: usize,
    /// Raw feature width (`D_raw`).
    pub raw_dim: usize,
    /// Number of view prototypes.
    pub views: usize,
    /// Prototype entries are uniform in `[-view_scale, view_scale]`.
    pub view_scale: f64,
    /// Per-entry uniform noise half-width.
    pub noise: f64,
    pub block_len: usize,
    /// Magnitude added to abnormal block rows.
    pub shift: f64,
    pub max_tags: usize,
    /// Tokens seen fewer times than this in the training split map to unk.
    pub vocab_min_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            raw_dim: 32,
            views: 6,
            view_scale: 1.0,
            noise: 0.3,
            block_len: 4,
            shift: 1.0,
            max_tags: 2,
            vocab_min_count: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidConfig(m.to_string()));
        if self.patches == 0 || self.raw_dim == 0 {
            return bad("patches and raw_dim must be positive");
        }
        if self.views == 0 || self.views > VIEW_SENTENCES.len() {
            return bad("views must be between 1 and 6");
        }
        if self.block_len == 0 || self.block_len > self.patches {
            return bad("block_len must be in 1..=patches");
        }
        if self.max_tags == 0 || self.max_tags > TAGS.len() {
            return bad("max_tags must be between 1 and 6");
        }
        if !(self.noise >= 0.0 && self.view_scale >= 0.0 && self.shift.is_finite()) {
            return bad("noise, view_scale and shift must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalBlock {
    pub start: usize,
    pub len: usize,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: String,
    /// Seed for this instance's feature noise.
    pub seed: u64,
    /// Seed of the shared prototypes and tag signatures.
    pub world_seed: u64,
    pub normal: bool,
    pub view: usize,
    /// Sorted tag names; empty iff `normal`.
    pub tags: Vec<String>,
    pub abnormal_block: Option<AbnormalBlock>,
    pub report: Vec<String>,
}

/// State shared by all instances of one corpus seed.
#[derive(Debug, Clone)]
pub struct World {
    pub prototypes: Vec<Tensor>,
    raw_dim: usize,
}

impl World {
    pub fn new(world_seed: u64, config: &SynthConfig) -> Self {
        let mut rng = rng::seeded(world_seed);
        let prototypes = (0..config.views)
            .map(|_| rng::uniform(&mut rng, config.patches, config.raw_dim, config.view_scale))
            .collect();
        Self {
            prototypes,
            raw_dim: config.raw_dim,
        }
    }

    /// Columns owned by tag `t` are those with `col % TAGS.len() == t`.
    pub fn tag_mask(&self, tags: &[String]) -> Vec<f64> {
        let owned: Vec<usize> = tags.iter().filter_map(|t| tag_index(t)).collect();
        (0..self.raw_dim)
            .map(|j| {
                if owned.contains(&(j % TAGS.len())) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn tag_index(tag: &str) -> Option<usize> {
    TAGS.iter().position(|(name, _)| *name == tag)
}

/// Tag name to trigger tokens.
pub fn tag_lexicon() -> Vec<(String, Vec<String>)> {
    TAGS.iter()
        .map(|(name, _)| (name.to_string(), alloc::vec![name.to_string()]))
        .collect()
}

pub fn world_seed(global_seed: u64) -> u64 {
    rng::derive_seed(global_seed, 0x5752_4c44)
}

fn abnormal_offset(global_seed: u64) -> f64 {
    let mut r = rng::seeded(rng::derive_seed(global_seed, 0x4142_4e4f));
    r.gen::<f64>()
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Whether instance `index` is abnormal.
///
/// Uses a seeded golden-ratio sequence, so over any run of consecutive
/// indices the abnormal fraction stays within a few instances of
/// `abnormal_rate` instead of fluctuating binomially.
pub fn is_abnormal(global_seed: u64, index: usize, abnormal_rate: f64) -> bool {
    let u = abnormal_offset(global_seed) + index as f64 * GOLDEN;
    (u - libm::floor(u)) < abnormal_rate
}

/// Deterministic spec for instance `index` of the corpus seeded by `global_seed`.
pub fn gen_instance(
    global_seed: u64,
    index: usize,
    abnormal_rate: f64,
    config: &SynthConfig,
) -> InstanceSpec {
    let seed = rng::derive_seed(global_seed, index as u64 + 1);
    let mut rng = rng::seeded(seed);
    let abnormal = is_abnormal(global_seed, index, abnormal_rate);
    let view = rng.gen_range(0..config.views);
    let lung = rng.gen_range(0..LUNG_SENTENCES.len());

    let (tags, block) = if abnormal {
        let count = if config.max_tags > 1 && rng.gen::<f64>() < 0.3 {
            rng.gen_range(2..=config.max_tags)
        } else {
            1
        };
        let picked: BTreeSet<usize> = rng::sample_indices(&mut rng, TAGS.len(), count)
            .into_iter()
            .collect();
        let tags: Vec<String> = picked.iter().map(|&t| TAGS[t].0.to_string()).collect();
        let start = rng.gen_range(0..=config.patches - config.block_len);
        let block = AbnormalBlock {
            start,
            len: config.block_len,
            shift: config.shift,
        };
        (tags, Some(block))
    } else {
        (Vec::new(), None)
    };

    let mut report = words(VIEW_SENTENCES[view]);
    if tags.is_empty() {
        report.extend(words(LUNG_SENTENCES[lung]));
        report.extend(words(NORMAL_CLOSING));
    } else {
        for t in &tags {
            let (_, sentence) = TAGS[tag_index(t).expect("known tag")];
            report.extend(words(sentence));
        }
    }

    let seed = rng.gen();
    InstanceSpec {
        id: format!("syn-{index:05}"),
        seed,
        world_seed: world_seed(global_seed),
        normal: tags.is_empty(),
        view,
        tags,
        abnormal_block: block,
        report,
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Instance indices of the train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70/10/20 split of `0..size`; each part is sorted.
pub fn split_indices(size: usize, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..size).collect();
    let mut r: DetRng = rng::seeded(rng::derive_seed(seed, 0x5350_4c54));
    rng::shuffle(&mut r, &mut order);
    let n_train = (size * 7 + 5) / 10;
    let n_val = (size + 5) / 10;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_all_normal() {
        let cfg = SynthConfig::default();
        for i in 0..100 {
            let s = gen_instance(1, i, 0.0, &cfg);
            assert!(s.normal && s.tags.is_empty() && s.abnormal_block.is_none());
        }
    }

    #[test]
    fn full_rate_tags_every_report() {
        let cfg = SynthConfig::default();
        for i in 0..100 {
            let s = gen_instance(2, i, 1.0, &cfg);
            assert!(!s.normal && !s.tags.is_empty() && s.abnormal_block.is_some());
            for t in &s.tags {
                assert!(s.report.contains(t));
            }
        }
    }

    #[test]
    fn same_seed_same_spec() {
        let cfg = SynthConfig::default();
        assert_eq!(
            gen_instance(9, 42, 0.3, &cfg),
            gen_instance(9, 42, 0.3, &cfg)
        );
        assert_ne!(
            gen_instance(9, 42, 0.3, &cfg).seed,
            gen_instance(9, 43, 0.3, &cfg).seed
        );
    }

    #[test]
    fn triggers_appear_exactly_for_present_tags() {
        let cfg = SynthConfig::default();
        for i in 0..200 {
            let s = gen_instance(3, i, 0.5, &cfg);
            for (name, _) in TAGS {
                let present = s.tags.iter().any(|t| t == name);
                assert_eq!(present, s.report.iter().any(|w| w == name), "{s:?}");
            }
        }
    }

    #[test]
    fn abnormal_fraction_tracks_rate() {
        for seed in 0..20 {
            for &rate in &[0.1, 0.3, 0.5, 0.9] {
                for size in [200usize, 333, 1000] {
                    let k = (0..size).filter(|&i| is_abnormal(seed, i, rate)).count();
                    let frac = k as f64 / size as f64;
                    assert!(
                        (frac - rate).abs() <= 0.05,
                        "seed {seed} rate {rate} size {size}: {frac}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_is_70_10_20() {
        let s = split_indices(100, 4);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let s = split_indices(300, 4);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (210, 30, 60));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }
}
