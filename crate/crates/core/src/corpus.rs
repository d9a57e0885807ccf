//! In-memory corpus instances.

use alloc::string::String;
use alloc::vec::Vec;

use crate::features::{featurize_with_world, RawFeatures};
use crate::synth::{InstanceSpec, SynthConfig, World};

/// One image (or paired-view study) with its report.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub features: RawFeatures,
    /// Report tokens without bos/eos.
    pub report: Vec<String>,
    pub normal: bool,
    pub tags: Vec<String>,
}

impl Instance {
    pub fn from_spec(spec: &InstanceSpec, config: &SynthConfig, world: &World) -> Self {
        Self {
            id: spec.id.clone(),
            features: featurize_with_world(spec, config, world),
            report: spec.report.clone(),
            normal: spec.normal,
            tags: spec.tags.clone(),
        }
    }
}

/// Builds the instances `indices` of a synthetic corpus directly in memory.
pub fn synthesize(
    global_seed: u64,
    indices: &[usize],
    abnormal_rate: f64,
    config: &SynthConfig,
) -> Vec<Instance> {
    let world = World::new(crate::synth::world_seed(global_seed), config);
    indices
        .iter()
        .map(|&i| {
            let spec = crate::synth::gen_instance(global_seed, i, abnormal_rate, config);
            Instance::from_spec(&spec, config, &world)
        })
        .collect()
}
