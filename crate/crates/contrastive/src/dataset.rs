//! On-disk synthetic corpora.
//!
//! A corpus directory holds `train.jsonl`, `val.jsonl`, `test.jsonl`,
//! `vocab.txt`, `corpus.json` (generation parameters) and one FMAT file per
//! instance under `features/`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use contrastive_core::corpus::Instance;
use contrastive_core::decoder::Vocab;
use contrastive_core::features::featurize_with_world;
use contrastive_core::synth::{self, InstanceSpec, SynthConfig, World};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FormatError, Result};
use crate::fmat;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One line of a split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Relative to the corpus directory.
    pub feature_file: String,
    /// Space-separated tokens.
    pub report: String,
    pub normal: bool,
    pub tags: Vec<String>,
}

impl Record {
    pub fn tokens(&self) -> Vec<String> {
        self.report.split_whitespace().map(String::from).collect()
    }
}

/// Contents of `corpus.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    pub size: usize,
    pub abnormal_rate: f64,
    pub synth: SynthConfig,
}

impl CorpusMeta {
    /// Regenerates the spec of a synthetic instance from its id.
    pub fn spec_for(&self, id: &str) -> Option<InstanceSpec> {
        let index: usize = id.strip_prefix("syn-")?.parse().ok()?;
        (index < self.size)
            .then(|| synth::gen_instance(self.seed, index, self.abnormal_rate, &self.synth))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub abnormal: usize,
    pub vocab: usize,
}

/// Writes a complete corpus directory. Output is a pure function of the
/// arguments, so reruns are byte-identical.
pub fn gen_corpus(
    dir: &Path,
    seed: u64,
    size: usize,
    abnormal_rate: f64,
    config: &SynthConfig,
) -> Result<GenSummary> {
    if size < 10 {
        return Err(CliError::Usage(format!(
            "corpus size must be at least 10, got {size}"
        )));
    }
    if !(0.0..=1.0).contains(&abnormal_rate) {
        return Err(CliError::Usage(format!(
            "abnormal rate must be in [0, 1], got {abnormal_rate}"
        )));
    }
    config.validate()?;
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| CliError::io(&features, e))?;

    let world = World::new(synth::world_seed(seed), config);
    let split = synth::split_indices(size, seed);
    let mut abnormal = 0;
    let mut train_reports = Vec::new();
    for (name, indices) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let spec = synth::gen_instance(seed, i, abnormal_rate, config);
            let raw = featurize_with_world(&spec, config, &world);
            let rel = format!("features/{}.fmat", spec.id);
            fmat::write(&dir.join(&rel), &raw.patches)?;
            abnormal += usize::from(!spec.normal);
            if *name == "train" {
                train_reports.push(spec.report.clone());
            }
            records.push(Record {
                id: spec.id,
                feature_file: rel,
                report: spec.report.join(" "),
                normal: spec.normal,
                tags: spec.tags,
            });
        }
        write_records(&dir.join(format!("{name}.jsonl")), &records)?;
    }
    let vocab = Vocab::build(
        train_reports.iter().map(Vec::as_slice),
        config.vocab_min_count,
    );
    write_vocab(&dir.join("vocab.txt"), &vocab)?;
    let meta = CorpusMeta {
        seed,
        size,
        abnormal_rate,
        synth: config.clone(),
    };
    let meta_path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    fs::write(&meta_path, text).map_err(|e| CliError::io(&meta_path, e))?;
    Ok(GenSummary {
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        abnormal,
        vocab: vocab.len(),
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            CliError::format(path, FormatError::Invalid(format!("line {}: {e}", n + 1)))
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    for t in vocab.tokens() {
        writeln!(f, "{t}").map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let tokens = text.lines().map(String::from).collect();
    Vocab::new(tokens).map_err(|e| CliError::format(path, FormatError::Invalid(e.to_string())))
}

/// Handle on a corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
}

impl Corpus {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.join("vocab.txt").is_file() {
            return Err(CliError::Data(format!(
                "{} is not a corpus directory (no vocab.txt)",
                dir.display()
            )));
        }
        Ok(Self { dir })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        read_vocab(&self.dir.join("vocab.txt"))
    }

    pub fn meta(&self) -> Result<CorpusMeta> {
        let path = self.dir.join("corpus.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))
    }

    pub fn records(&self, split: &str) -> Result<Vec<Record>> {
        if !SPLITS.contains(&split) {
            return Err(CliError::Usage(format!(
                "unknown split {split:?} (expected train, val or test)"
            )));
        }
        read_jsonl(&self.dir.join(format!("{split}.jsonl")))
    }

    pub fn load(&self, record: &Record) -> Result<Instance> {
        let features = fmat::load_features(&self.dir.join(&record.feature_file), &record.id)?;
        Ok(Instance {
            id: record.id.clone(),
            features,
            report: record.tokens(),
            normal: record.normal,
            tags: record.tags.clone(),
        })
    }

    pub fn instances(&self, split: &str) -> Result<Vec<Instance>> {
        self.records(split)?.iter().map(|r| self.load(r)).collect()
    }

    /// Finds an instance by id in any split.
    pub fn find(&self, id: &str) -> Result<Instance> {
        for split in SPLITS {
            if let Some(r) = self.records(split)?.into_iter().find(|r| r.id == id) {
                return self.load(&r);
            }
        }
        Err(CliError::Data(format!("unknown instance id {id:?}")))
    }
}
