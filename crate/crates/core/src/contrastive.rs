//! Contrastive attention.
//!
//! Given the global feature `v_hat` of an image and a pool `P` of normal
//! global features:
//!
//! 1. Aggregate attention runs `n` dot-product attentions from `v_hat` over
//!    `P`, each with its own projections, giving the closest-normal summary
//!    `P'` (`n × d`).
//! 2. Differentiate attention self-attends over `[v_hat; P']`, mean-pools the
//!    result into the common information `v_c` and subtracts it:
//!    `v_d = v_hat - v_c`.
//! 3. Fusion maps `[v_hat; v_d]` and every `[v_i; v_d]` through one shared
//!    `2d × d` matrix followed by ReLU.
//!
//! The attention output mixes the raw rows of `y`; the projections only
//! shape the scores. Every function has a tape form (`*_on`) used for
//! training and a value form for inference and tests.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::rng::{self, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query and key projections of one attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
}

impl AttentionWeights {
    fn init(rng: &mut DetRng, d: usize) -> Self {
        let b = 1.0 / libm::sqrt(d as f64);
        Self {
            query: rng::uniform(rng, d, d, b),
            key: rng::uniform(rng, d, d, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAParams {
    /// One pair per aggregate-attention head.
    pub heads: Vec<AttentionWeights>,
    /// Projections of the differentiate self-attention.
    pub self_attn: AttentionWeights,
    /// Shared fusion matrix, `2d × d`.
    pub fusion: Tensor,
    pub d: usize,
}

impl CAParams {
    /// Uniform `[-1/sqrt(d), 1/sqrt(d)]` initialisation.
    pub fn init(rng: &mut DetRng, d: usize, n: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "need d >= 1 and n >= 1, got d={d} n={n}"
            )));
        }
        let heads = (0..n).map(|_| AttentionWeights::init(rng, d)).collect();
        let self_attn = AttentionWeights::init(rng, d);
        let fusion = rng::uniform(rng, 2 * d, d, 1.0 / libm::sqrt(d as f64));
        Ok(Self {
            heads,
            self_attn,
            fusion,
            d,
        })
    }

    pub fn n(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if self.heads.is_empty() {
            return Err(Error::InvalidConfig(
                "contrastive attention needs at least one head".into(),
            ));
        }
        let square = |t: &Tensor| -> Result<()> {
            if t.shape() != (d, d) {
                return Err(Error::Shape {
                    op: "attention weights",
                    left: (d, d),
                    right: t.shape(),
                });
            }
            Ok(())
        };
        for h in self.heads.iter().chain(core::iter::once(&self.self_attn)) {
            square(&h.query)?;
            square(&h.key)?;
        }
        if self.fusion.shape() != (2 * d, d) {
            return Err(Error::Shape {
                op: "fusion weights",
                left: (2 * d, d),
                right: self.fusion.shape(),
            });
        }
        Ok(())
    }

    /// Tensors in a fixed order: heads (query, key), self (query, key), fusion.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.heads.len() + 3);
        for h in &self.heads {
            out.push(&h.query);
            out.push(&h.key);
        }
        out.push(&self.self_attn.query);
        out.push(&self.self_attn.key);
        out.push(&self.fusion);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.heads.len() + 3);
        for h in &mut self.heads {
            out.push(&mut h.query);
            out.push(&mut h.key);
        }
        out.push(&mut self.self_attn.query);
        out.push(&mut self.self_attn.key);
        out.push(&mut self.fusion);
        out
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CAVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let heads = self
            .heads
            .iter()
            .map(|h| (put(&h.query), put(&h.key)))
            .collect();
        let self_attn = (put(&self.self_attn.query), put(&self.self_attn.key));
        let fusion = put(&self.fusion);
        CAVars {
            heads,
            self_attn,
            fusion,
        }
    }
}

/// Tape handles of [`CAParams`].
#[derive(Debug, Clone)]
pub struct CAVars {
    pub heads: Vec<(Var, Var)>,
    pub self_attn: (Var, Var),
    pub fusion: Var,
}

impl CAVars {
    /// Same order as [`CAParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(q, k) in &self.heads {
            out.push(q);
            out.push(k);
        }
        out.push(self.self_attn.0);
        out.push(self.self_attn.1);
        out.push(self.fusion);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    /// Closest-normal summary, `n × d`.
    pub p_prime: Tensor,
    pub v_common: Tensor,
    pub v_contrast: Tensor,
    pub v_hat_fused: Tensor,
    pub v_fused: Tensor,
    /// Attention of each head over the pool, `n × N_P`.
    pub head_weights: Tensor,
}

/// Tape form of [`att`]. Returns `(output, weights)`.
///
/// Scores are evaluated as `((x·Wx)·Wyᵀ)·yᵀ / sqrt(d)`, which equals
/// `(x·Wx)(y·Wy)ᵀ / sqrt(d)` but avoids projecting every row of a large `y`.
pub fn att_on(tape: &mut Tape, x: Var, y: Var, w_x: Var, w_y: Var) -> Result<(Var, Var)> {
    let d = tape.value(x).cols();
    let (ys, wxs, wys) = (
        tape.value(y).shape(),
        tape.value(w_x).shape(),
        tape.value(w_y).shape(),
    );
    if ys.1 != d {
        return Err(Error::Shape {
            op: "att(x, y)",
            left: tape.value(x).shape(),
            right: ys,
        });
    }
    for s in [wxs, wys] {
        if s != (d, d) {
            return Err(Error::Shape {
                op: "att weights",
                left: (d, d),
                right: s,
            });
        }
    }
    let q = tape.matmul(x, w_x)?;
    let qk = tape.matmul_t(q, w_y)?;
    let raw = tape.matmul_t(qk, y)?;
    let scores = tape.scale(raw, 1.0 / libm::sqrt(d as f64))?;
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, y)?;
    Ok((out, weights))
}

/// `softmax((x·Wx)(y·Wy)ᵀ / sqrt(d)) · y`; returns `(output, weights)`.
pub fn att(x: &Tensor, y: &Tensor, w_x: &Tensor, w_y: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = [x, y, w_x, w_y].map(|t| tape.constant(t.clone()));
    let (o, w) = att_on(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok((tape.value(o).clone(), tape.value(w).clone()))
}

/// Tape form of [`aggregate_attention`]. Returns `(P', per-head weights)`.
pub fn aggregate_on(
    tape: &mut Tape,
    v_hat: Var,
    pool: Var,
    heads: &[(Var, Var)],
) -> Result<(Var, Vec<Var>)> {
    if tape.value(pool).rows() == 0 {
        return Err(Error::EmptyInput("aggregate_attention: empty pool"));
    }
    if heads.is_empty() {
        return Err(Error::EmptyInput("aggregate_attention: no heads"));
    }
    let mut rows = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for &(wx, wy) in heads {
        let (o, w) = att_on(tape, v_hat, pool, wx, wy)?;
        rows.push(o);
        weights.push(w);
    }
    Ok((tape.concat_rows(&rows)?, weights))
}

/// Row `k` of `P'` is `att(v_hat, pool)` under head `k`.
/// Returns `(P', head_weights)` with `head_weights` of shape `n × N_P`.
pub fn aggregate_attention(
    v_hat: &Tensor,
    pool: &Tensor,
    params: &CAParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let v = tape.constant(v_hat.clone());
    let p = tape.constant(pool.clone());
    let (pp, w) = aggregate_on(&mut tape, v, p, &vars.heads)?;
    let w = tape.concat_rows(&w)?;
    Ok((tape.value(pp).clone(), tape.value(w).clone()))
}

/// Tape form of [`differentiate_attention`]. Returns `(v_common, v_contrast)`.
pub fn differentiate_on(
    tape: &mut Tape,
    v_hat: Var,
    p_prime: Var,
    self_attn: (Var, Var),
) -> Result<(Var, Var)> {
    let (vs, ps) = (tape.value(v_hat).shape(), tape.value(p_prime).shape());
    if vs.0 != 1 || vs.1 != ps.1 {
        return Err(Error::Shape {
            op: "differentiate_attention",
            left: vs,
            right: ps,
        });
    }
    let stacked = tape.concat_rows(&[v_hat, p_prime])?;
    let (attended, _) = att_on(tape, stacked, stacked, self_attn.0, self_attn.1)?;
    let common = tape.mean_rows(attended)?;
    let contrast = tape.sub(v_hat, common)?;
    Ok((common, contrast))
}

/// `v_c = mean(att([v_hat; P'], [v_hat; P']))` and `v_d = v_hat - v_c`.
pub fn differentiate_attention(
    v_hat: &Tensor,
    p_prime: &Tensor,
    params: &CAParams,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let v = tape.constant(v_hat.clone());
    let p = tape.constant(p_prime.clone());
    let (c, d) = differentiate_on(&mut tape, v, p, vars.self_attn)?;
    Ok((tape.value(c).clone(), tape.value(d).clone()))
}

/// Tape form of [`fuse`]. Returns `(v_hat_fused, V_fused)`.
pub fn fuse_on(
    tape: &mut Tape,
    v_hat: Var,
    v: Var,
    v_contrast: Var,
    w_prime: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(v_hat).cols();
    let ws = tape.value(w_prime).shape();
    if ws != (2 * d, d) {
        return Err(Error::Shape {
            op: "fuse",
            left: (2 * d, d),
            right: ws,
        });
    }
    let cs = tape.value(v_contrast).shape();
    if cs != (1, d) {
        return Err(Error::Shape {
            op: "fuse contrast",
            left: (1, d),
            right: cs,
        });
    }
    let global_in = tape.concat_cols(&[v_hat, v_contrast])?;
    let global_lin = tape.matmul(global_in, w_prime)?;
    let global = tape.relu(global_lin)?;

    let n = tape.value(v).rows();
    let copies: Vec<Var> = (0..n).map(|_| v_contrast).collect();
    let broadcast = tape.concat_rows(&copies)?;
    let patch_in = tape.concat_cols(&[v, broadcast])?;
    let patch_lin = tape.matmul(patch_in, w_prime)?;
    let patches = tape.relu(patch_lin)?;
    Ok((global, patches))
}

/// `v_hat' = relu([v_hat; v_d]·W')`, `v_i' = relu([v_i; v_d]·W')` with one
/// shared `W'`.
pub fn fuse(
    v_hat: &Tensor,
    v: &Tensor,
    v_contrast: &Tensor,
    w_prime: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = [v_hat, v, v_contrast, w_prime].map(|t| tape.constant(t.clone()));
    let (g, p) = fuse_on(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok((tape.value(g).clone(), tape.value(p).clone()))
}

/// Tape handles of every intermediate of [`contrastive_forward`].
#[derive(Debug, Clone)]
pub struct ContrastiveVars {
    pub p_prime: Var,
    pub v_common: Var,
    pub v_contrast: Var,
    pub v_hat_fused: Var,
    pub v_fused: Var,
    pub head_weights: Vec<Var>,
}

/// Aggregate, differentiate and fuse on a tape. `p_prime_override` replaces
/// the aggregate step with fixed closest-normal rows.
pub fn contrastive_on(
    tape: &mut Tape,
    v_hat: Var,
    v: Var,
    pool: Var,
    vars: &CAVars,
    p_prime_override: Option<Var>,
) -> Result<ContrastiveVars> {
    let (d_pool, d_in) = (tape.value(pool).cols(), tape.value(v_hat).cols());
    if d_pool != d_in {
        return Err(Error::Shape {
            op: "contrastive_forward pool",
            left: tape.value(v_hat).shape(),
            right: tape.value(pool).shape(),
        });
    }
    let (p_prime, head_weights) = match p_prime_override {
        Some(p) => (p, Vec::new()),
        None => aggregate_on(tape, v_hat, pool, &vars.heads)?,
    };
    let (v_common, v_contrast) = differentiate_on(tape, v_hat, p_prime, vars.self_attn)?;
    let (v_hat_fused, v_fused) = fuse_on(tape, v_hat, v, v_contrast, vars.fusion)?;
    Ok(ContrastiveVars {
        p_prime,
        v_common,
        v_contrast,
        v_hat_fused,
        v_fused,
        head_weights,
    })
}

/// Full contrastive attention for one feature grid.
pub fn contrastive_forward(
    grid: &FeatureGrid,
    pool: &Tensor,
    params: &CAParams,
) -> Result<ContrastiveOutput> {
    if grid.d() != params.d || pool.cols() != params.d {
        return Err(Error::Shape {
            op: "contrastive_forward",
            left: grid.v_hat.shape(),
            right: pool.shape(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let v_hat = tape.constant(grid.v_hat.clone());
    let v = tape.constant(grid.v.clone());
    let p = tape.constant(pool.clone());
    let out = contrastive_on(&mut tape, v_hat, v, p, &vars, None)?;
    let weights = tape.concat_rows(&out.head_weights)?;
    Ok(ContrastiveOutput {
        p_prime: tape.value(out.p_prime).clone(),
        v_common: tape.value(out.v_common).clone(),
        v_contrast: tape.value(out.v_contrast).clone(),
        v_hat_fused: tape.value(out.v_hat_fused).clone(),
        v_fused: tape.value(out.v_fused).clone(),
        head_weights: tape.value(weights).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_where, finite_diff, Tolerance};
    use crate::tensor::{self, concat_rows};
    use alloc::vec;

    fn t<R: AsRef<[f64]>>(rows: &[R]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn params(d: usize, n: usize, seed: u64) -> CAParams {
        CAParams::init(&mut rng::seeded(seed), d, n).unwrap()
    }

    #[test]
    fn att_single_key_returns_it() {
        let mut r = rng::seeded(1);
        let x = rng::uniform(&mut r, 3, 2, 5.0);
        let y = t(&[[2.0, 4.0]]);
        let (o, w) = att(
            &x,
            &y,
            &rng::uniform(&mut r, 2, 2, 1.0),
            &rng::uniform(&mut r, 2, 2, 1.0),
        )
        .unwrap();
        assert_eq!(o, t(&[[2.0, 4.0], [2.0, 4.0], [2.0, 4.0]]));
        assert_eq!(w, Tensor::filled(3, 1, 1.0));
    }

    #[test]
    fn att_zero_query_projection_is_column_mean() {
        let y = t(&[[0.0, 0.0], [2.0, 4.0]]);
        let x = t(&[[0.3, -0.7]]);
        let (o, w) = att(&x, &y, &Tensor::zeros(2, 2), &Tensor::identity(2)).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        assert_eq!(o.data(), &[1.0, 2.0]);
    }

    #[test]
    fn att_hand_computed_case() {
        let x = t(&[[1.0, 0.0]]);
        let y = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let (o, w) = att(&x, &y, &Tensor::identity(2), &Tensor::identity(2)).unwrap();
        // softmax(1/sqrt(2), 0)
        let a = libm::exp(core::f64::consts::FRAC_1_SQRT_2);
        let p0 = a / (a + 1.0);
        assert!((w.get(0, 0) - p0).abs() < 1e-15 && (w.get(0, 1) - (1.0 - p0)).abs() < 1e-15);
        assert!((p0 - 0.6698).abs() < 1e-4);
        assert!((o.get(0, 0) - p0).abs() < 1e-15 && (o.get(0, 1) - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn att_shape_errors() {
        let y = Tensor::zeros(3, 4);
        assert!(matches!(
            att(
                &Tensor::zeros(1, 3),
                &y,
                &Tensor::zeros(3, 3),
                &Tensor::zeros(3, 3)
            ),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            att(
                &Tensor::zeros(1, 4),
                &y,
                &Tensor::zeros(4, 3),
                &Tensor::zeros(4, 4)
            ),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn aggregate_full_size_shape() {
        let p = params(512, 6, 3);
        let mut r = rng::seeded(4);
        let pool = rng::uniform(&mut r, 1000, 512, 1.0);
        let v = rng::uniform(&mut r, 1, 512, 1.0);
        let (pp, w) = aggregate_attention(&v, &pool, &p).unwrap();
        assert_eq!(pp.shape(), (6, 512));
        assert_eq!(w.shape(), (6, 1000));
    }

    #[test]
    fn aggregate_identical_rows_and_single_head() {
        let p = params(3, 4, 5);
        let r = t(&[[0.5, -1.0, 2.0]]);
        let pool = concat_rows(&[&r, &r, &r, &r, &r]).unwrap();
        let (pp, _) = aggregate_attention(&t(&[[1.0, 2.0, 3.0]]), &pool, &p).unwrap();
        for k in 0..4 {
            for (a, b) in pp.row(k).iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let p1 = params(3, 1, 6);
        let mut g = rng::seeded(7);
        let pool = rng::uniform(&mut g, 5, 3, 1.0);
        let v = rng::uniform(&mut g, 1, 3, 1.0);
        let (pp, w) = aggregate_attention(&v, &pool, &p1).unwrap();
        let (o, w1) = att(&v, &pool, &p1.heads[0].query, &p1.heads[0].key).unwrap();
        assert_eq!((pp, w), (o, w1));
        assert!(matches!(
            aggregate_attention(&v, &Tensor::zeros(0, 3), &p1),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn differentiate_identical_rows_fixed_point() {
        let p = params(4, 3, 8);
        let v = t(&[[0.2, -0.4, 1.0, 3.0]]);
        let pp = concat_rows(&[&v, &v, &v]).unwrap();
        let (c, d) = differentiate_attention(&v, &pp, &p).unwrap();
        for (a, b) in c.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn differentiate_zero_query_projection() {
        let mut p = params(2, 1, 9);
        p.self_attn.query = Tensor::zeros(2, 2);
        let (c, d) = differentiate_attention(&t(&[[2.0, 0.0]]), &t(&[[0.0, 2.0]]), &p).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0]);
        assert_eq!(d.data(), &[1.0, -1.0]);
    }

    /// Straight-line evaluation with explicit loops, independent of the tape.
    fn reference_att(x: &Tensor, y: &Tensor, wx: &Tensor, wy: &Tensor) -> Tensor {
        let d = x.cols();
        let xp = naive_mm(x, wx);
        let yp = naive_mm(y, wy);
        let mut out = Tensor::zeros(x.rows(), d);
        for i in 0..x.rows() {
            let scores: Vec<f64> = (0..y.rows())
                .map(|j| {
                    (0..d).map(|k| xp.get(i, k) * yp.get(j, k)).sum::<f64>() / libm::sqrt(d as f64)
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - m)).collect();
            let z: f64 = e.iter().sum();
            for k in 0..d {
                out.set(i, k, (0..y.rows()).map(|j| e[j] / z * y.get(j, k)).sum());
            }
        }
        out
    }

    fn naive_mm(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn differentiate_matches_step_by_step_reference() {
        let p = params(5, 3, 10);
        let mut r = rng::seeded(11);
        let v = rng::uniform(&mut r, 1, 5, 1.0);
        let pp = rng::uniform(&mut r, 3, 5, 1.0);
        let (c, d) = differentiate_attention(&v, &pp, &p).unwrap();
        let s = concat_rows(&[&v, &pp]).unwrap();
        let a = reference_att(&s, &s, &p.self_attn.query, &p.self_attn.key);
        let c_ref: Vec<f64> = (0..5)
            .map(|k| (0..4).map(|i| a.get(i, k)).sum::<f64>() / 4.0)
            .collect();
        for k in 0..5 {
            assert!((c.get(0, k) - c_ref[k]).abs() < 1e-12);
            assert!((d.get(0, k) - (v.get(0, k) - c_ref[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let d = 2;
        let top = concat_rows(&[&Tensor::identity(d), &Tensor::zeros(d, d)]).unwrap();
        let v_hat = t(&[[1.0, -2.0]]);
        let (g, _) = fuse(&v_hat, &v_hat, &t(&[[5.0, 5.0]]), &top).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);

        let bottom = concat_rows(&[&Tensor::zeros(d, d), &Tensor::identity(d)]).unwrap();
        let v = t(&[[3.0, 1.0], [-1.0, 2.0]]);
        let (g, p) = fuse(&v_hat, &v, &Tensor::zeros(1, d), &bottom).unwrap();
        assert_eq!(g, Tensor::zeros(1, d));
        assert_eq!(p, Tensor::zeros(2, d));

        let (g, p) = fuse(
            &Tensor::zeros(1, 512),
            &Tensor::zeros(49, 512),
            &Tensor::zeros(1, 512),
            &Tensor::zeros(1024, 512),
        )
        .unwrap();
        assert_eq!((g.shape(), p.shape()), ((1, 512), (49, 512)));
        assert!(fuse(&v_hat, &v, &Tensor::zeros(1, d), &Tensor::zeros(d, d)).is_err());
    }

    #[test]
    fn forward_identical_pool() {
        let p = params(4, 2, 12);
        let mut r = rng::seeded(13);
        let grid = FeatureGrid::from_patches("g", rng::uniform(&mut r, 3, 4, 1.0)).unwrap();
        let copies: Vec<&Tensor> = (0..5).map(|_| &grid.v_hat).collect();
        let pool = concat_rows(&copies).unwrap();
        let out = contrastive_forward(&grid, &pool, &p).unwrap();
        assert!(out.v_contrast.max_abs() <= 1e-9);
        let zero = Tensor::zeros(1, 4);
        let (_, expect) = fuse(&grid.v_hat, &grid.v, &zero, &p.fusion).unwrap();
        for (a, b) in out.v_fused.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_shapes_and_invariants() {
        for (d, n, np, ni) in [(3, 1, 1, 1), (4, 2, 5, 4), (8, 3, 7, 9)] {
            let p = params(d, n, 14);
            let mut r = rng::seeded(15);
            let grid = FeatureGrid::from_patches("g", rng::uniform(&mut r, ni, d, 1.0)).unwrap();
            let pool = rng::uniform(&mut r, np, d, 1.0);
            let out = contrastive_forward(&grid, &pool, &p).unwrap();
            assert_eq!(out.p_prime.shape(), (n, d));
            assert_eq!(out.v_common.shape(), (1, d));
            assert_eq!(out.v_contrast.shape(), (1, d));
            assert_eq!(out.v_hat_fused.shape(), (1, d));
            assert_eq!(out.v_fused.shape(), (ni, d));
            assert_eq!(out.head_weights.shape(), (n, np));
            for k in 0..d {
                assert_eq!(
                    out.v_contrast.get(0, k),
                    grid.v_hat.get(0, k) - out.v_common.get(0, k)
                );
            }
            for i in 0..n {
                let s: f64 = out.head_weights.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
            assert!(out
                .v_fused
                .data()
                .iter()
                .chain(out.v_hat_fused.data())
                .all(|&x| x >= 0.0));
        }
        let p = params(4, 2, 16);
        let grid = FeatureGrid::from_patches("g", Tensor::zeros(2, 4)).unwrap();
        assert!(contrastive_forward(&grid, &Tensor::zeros(3, 5), &p).is_err());
    }

    #[test]
    fn gradient_of_fused_sum_matches_finite_differences() {
        let (d, n, np, ni) = (8, 2, 5, 4);
        let params0 = params(d, n, 17);
        let mut r = rng::seeded(18);
        let v0 = rng::uniform(&mut r, ni, d, 1.0);
        let pool = rng::uniform(&mut r, np, d, 1.0);

        let eval = |p: &CAParams, v: &Tensor| -> (f64, Vec<Tensor>, Tensor, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, true);
            let vv = tape.leaf(v.clone());
            let vh = tape.mean_rows(vv).unwrap();
            let pl = tape.constant(pool.clone());
            let out = contrastive_on(&mut tape, vh, vv, pl, &vars, None).unwrap();
            let s = tape.sum(out.v_fused).unwrap();
            let g = tape.backward_scalar(s).unwrap();
            // pre-activations of the fused rows, to stay clear of the kink
            let fused_in = tensor::concat_cols(&[
                tape.value(vv),
                &concat_rows(
                    &(0..ni)
                        .map(|_| tape.value(out.v_contrast))
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
            ])
            .unwrap();
            let pre = tensor::matmul(&fused_in, &p.fusion).unwrap();
            (
                tape.value(s).get(0, 0),
                vars.all().into_iter().map(|v| g.wrt(v)).collect(),
                g.wrt(vv),
                vec![pre],
            )
        };
        let (_, grads, gv, pre) = eval(&params0, &v0);
        assert!(pre[0].data().iter().all(|x| x.abs() > 1e-3));

        let mut overall = crate::gradcheck::CheckReport::empty();
        for (idx, g) in grads.iter().enumerate() {
            let base = params0.tensors()[idx].clone();
            let numeric = finite_diff(
                |x| {
                    let mut p = params0.clone();
                    *p.tensors_mut()[idx] = x.clone();
                    eval(&p, &v0).0
                },
                &base,
                1e-5,
            );
            overall = overall.merge(compare_where(g, &numeric, Tolerance::STANDARD, |_| true));
        }
        let numeric_v = finite_diff(|x| eval(&params0, x).0, &v0, 1e-5);
        overall = overall.merge(compare_where(&gv, &numeric_v, Tolerance::STANDARD, |_| {
            true
        }));
        assert!(overall.passed, "{overall:?}");
    }
}
