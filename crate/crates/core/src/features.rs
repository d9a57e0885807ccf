//! Patch features, the learnable projection and global average pooling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::synth::{InstanceSpec, SynthConfig, World};
use crate::tensor::{self, Tensor};

/// Encoder output for one image: `N_I` patch rows of width `D_raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub image_id: String,
    pub patches: Tensor,
}

impl RawFeatures {
    pub fn new(image_id: impl Into<String>, patches: Tensor) -> Result<Self> {
        if patches.rows() == 0 {
            return Err(Error::EmptyInput("raw features"));
        }
        if !patches.is_finite() {
            return Err(Error::NonFinite("raw features"));
        }
        Ok(Self {
            image_id: image_id.into(),
            patches,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.patches.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    /// Row-stacks the patches of several views of the same study (for
    /// example frontal and lateral images) into one feature set.
    pub fn stack_views(image_id: impl Into<String>, views: &[RawFeatures]) -> Result<Self> {
        let parts: Vec<&Tensor> = views.iter().map(|v| &v.patches).collect();
        Self::new(image_id, tensor::concat_rows(&parts)?)
    }
}

/// Projected patch features `V` and their mean `v_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub v: Tensor,
    pub v_hat: Tensor,
}

impl FeatureGrid {
    pub fn from_patches(image_id: impl Into<String>, v: Tensor) -> Result<Self> {
        let v_hat = global_pool(&v)?;
        Ok(Self {
            image_id: image_id.into(),
            v,
            v_hat,
        })
    }

    /// Projects `raw` with `w_i` and pools.
    pub fn build(raw: &RawFeatures, w_i: &Tensor) -> Result<Self> {
        Self::from_patches(raw.image_id.clone(), project(raw, w_i)?)
    }

    pub fn d(&self) -> usize {
        self.v.cols()
    }
}

/// `V = patches · W_I` (no bias).
pub fn project(raw: &RawFeatures, w_i: &Tensor) -> Result<Tensor> {
    if w_i.rows() != raw.raw_dim() {
        return Err(Error::Shape {
            op: "project",
            left: raw.patches.shape(),
            right: w_i.shape(),
        });
    }
    tensor::matmul(&raw.patches, w_i)
}

/// Global average pooling over patch rows.
pub fn global_pool(v: &Tensor) -> Result<Tensor> {
    tensor::mean_rows(v)
}

/// Initial projection, uniform in `[-1/sqrt(raw_dim), 1/sqrt(raw_dim)]`.
pub fn init_projection(rng: &mut DetRng, raw_dim: usize, d: usize) -> Tensor {
    rng::uniform(rng, raw_dim, d, 1.0 / libm::sqrt(raw_dim as f64))
}

/// Stand-in encoder output for a synthetic instance.
///
/// Every patch row is the view prototype plus uniform noise. Abnormal
/// instances additionally get `shift * (1 + mask)` added to each row in the
/// abnormal block, where `mask` marks the columns owned by the instance's
/// tags.
pub fn featurize_synthetic(spec: &InstanceSpec, config: &SynthConfig) -> RawFeatures {
    let world = World::new(spec.world_seed, config);
    featurize_with_world(spec, config, &world)
}

/// [`featurize_synthetic`] with a prebuilt [`World`].
pub fn featurize_with_world(
    spec: &InstanceSpec,
    config: &SynthConfig,
    world: &World,
) -> RawFeatures {
    let mut rng = rng::seeded(spec.seed);
    let proto = &world.prototypes[spec.view];
    let noise = config.noise;
    let mut patches = Tensor::from_fn(config.patches, config.raw_dim, |i, j| {
        proto.get(i, j)
            + if noise > 0.0 {
                rng.gen_range(-noise..noise)
            } else {
                0.0
            }
    });
    if let Some(block) = &spec.abnormal_block {
        let mask = world.tag_mask(&spec.tags);
        for i in block.start..block.start + block.len {
            for (j, m) in mask.iter().enumerate() {
                let v = patches.get(i, j) + block.shift * (1.0 + m);
                patches.set(i, j, v);
            }
        }
    }
    RawFeatures {
        image_id: spec.id.clone(),
        patches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_instance, AbnormalBlock};

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn project_shapes_and_identity() {
        let raw = RawFeatures::new("x", Tensor::zeros(49, 2048)).unwrap();
        let w = Tensor::zeros(2048, 512);
        assert_eq!(project(&raw, &w).unwrap().shape(), (49, 512));

        let mut r = rng::seeded(1);
        let p = rng::uniform(&mut r, 3, 4, 1.0);
        let raw = RawFeatures::new("y", p.clone()).unwrap();
        assert_eq!(project(&raw, &Tensor::identity(4)).unwrap(), p);
        assert!(matches!(
            project(&raw, &Tensor::zeros(5, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn project_matches_hand_oracle() {
        let raw = RawFeatures::new(
            "h",
            Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]).unwrap(),
        )
        .unwrap();
        let w = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, -1.0]]).unwrap();
        // row0: [1 + 3, 4 - 3] ; row1: [-1 + 2, 1 - 2]
        let v = project(&raw, &w).unwrap();
        assert_eq!(v, Tensor::from_rows(&[[4.0, 1.0], [1.0, -1.0]]).unwrap());
    }

    #[test]
    fn global_pool_delegates_to_mean_rows() {
        let v = Tensor::from_rows(&[[0.0, 0.0], [2.0, 4.0]]).unwrap();
        assert_eq!(global_pool(&v).unwrap().data(), &[1.0, 2.0]);
        let one = Tensor::from_rows(&[[3.5, -1.0]]).unwrap();
        assert_eq!(global_pool(&one).unwrap(), one);
        let mut r = rng::seeded(2);
        let x = rng::uniform(&mut r, 7, 5, 3.0);
        assert_eq!(global_pool(&x).unwrap(), tensor::mean_rows(&x).unwrap());
        assert!(global_pool(&Tensor::zeros(0, 3)).is_err());
    }

    #[test]
    fn pooling_commutes_with_projection() {
        let mut r = rng::seeded(4);
        let raw = RawFeatures::new("c", rng::uniform(&mut r, 9, 6, 2.0)).unwrap();
        let w = rng::uniform(&mut r, 6, 4, 1.0);
        let a = FeatureGrid::build(&raw, &w).unwrap().v_hat;
        let b = tensor::matmul(&global_pool(&raw.patches).unwrap(), &w).unwrap();
        assert!(close(&a, &b, 1e-9));
    }

    #[test]
    fn stacked_views_keep_rows() {
        let a = RawFeatures::new("a", Tensor::filled(2, 3, 1.0)).unwrap();
        let b = RawFeatures::new("b", Tensor::filled(4, 3, 2.0)).unwrap();
        let s = RawFeatures::stack_views("ab", &[a, b]).unwrap();
        assert_eq!(s.patches.shape(), (6, 3));
        assert_eq!(s.patches.get(5, 2), 2.0);
    }

    #[test]
    fn synthetic_features_are_deterministic() {
        let cfg = SynthConfig::default();
        let spec = gen_instance(7, 3, 0.5, &cfg);
        let a = featurize_synthetic(&spec, &cfg);
        let b = featurize_synthetic(&spec, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.patches.shape(), (cfg.patches, cfg.raw_dim));
    }

    #[test]
    fn normal_features_stay_near_prototype() {
        let cfg = SynthConfig::default();
        let spec = gen_instance(7, 0, 0.0, &cfg);
        assert!(spec.normal);
        let world = World::new(spec.world_seed, &cfg);
        let raw = featurize_synthetic(&spec, &cfg);
        let proto = &world.prototypes[spec.view];
        for i in 0..cfg.patches {
            for j in 0..cfg.raw_dim {
                assert!((raw.patches.get(i, j) - proto.get(i, j)).abs() <= cfg.noise);
            }
        }
    }

    #[test]
    fn abnormal_block_rows_have_larger_means() {
        let cfg = SynthConfig::default();
        let mut spec = gen_instance(11, 0, 0.0, &cfg);
        spec.normal = false;
        spec.tags = alloc::vec![String::from("effusion")];
        spec.abnormal_block = Some(AbnormalBlock {
            start: 5,
            len: 4,
            shift: 3.0,
        });
        let raw = featurize_synthetic(&spec, &cfg);
        let row_mean = |i: usize| raw.patches.row(i).iter().sum::<f64>() / cfg.raw_dim as f64;
        let block_min = (5..9).map(row_mean).fold(f64::INFINITY, f64::min);
        let base_max = (0..cfg.patches)
            .filter(|i| !(5..9).contains(i))
            .map(row_mean)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(block_min > base_max, "{block_min} vs {base_max}");
    }
}
