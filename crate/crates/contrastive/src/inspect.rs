//! Attention and saliency dumps for a single instance.

use std::fmt::Write as _;
use std::path::Path;

use contrastive_core::corpus::Instance;
use contrastive_core::model::Model;
use contrastive_core::pool::NormalityPool;
use contrastive_core::rng::DetRng;
use contrastive_core::Tensor;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct Inspection {
    pub id: String,
    /// `n × N_P` aggregate-attention weights; empty without aggregate attention.
    pub head_weights: Tensor,
    /// Per head, the `k` heaviest pool entries as `(pool index, weight)`.
    pub top: Vec<Vec<(usize, f64)>>,
    /// `‖v'_i − v_i‖` for every patch.
    pub saliency: Vec<f64>,
}

impl Inspection {
    pub fn peak_patch(&self) -> usize {
        self.saliency
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| {
                if s > best.1 {
                    (i, s)
                } else {
                    best
                }
            })
            .0
    }
}

pub fn inspect(
    model: &Model,
    pool: &NormalityPool,
    instance: &Instance,
    k: usize,
    rng: &mut DetRng,
) -> Result<Inspection> {
    let enc = model.encode(&instance.features, &pool.entries, rng)?;
    let head_weights = enc
        .contrastive
        .as_ref()
        .map_or_else(|| Tensor::zeros(0, pool.len()), |c| c.head_weights.clone());
    let top = (0..head_weights.rows())
        .map(|h| {
            let mut idx: Vec<(usize, f64)> =
                head_weights.row(h).iter().copied().enumerate().collect();
            idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            idx.truncate(k);
            idx
        })
        .collect();
    let v = &enc.grid.v;
    let saliency = (0..v.rows())
        .map(|i| {
            v.row(i)
                .iter()
                .zip(enc.v_fused.row(i))
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(Inspection {
        id: instance.id.clone(),
        head_weights,
        top,
        saliency,
    })
}

pub fn weights_csv(ins: &Inspection, pool: &NormalityPool) -> String {
    let mut out = String::from("head,pool_index,pool_id,weight\n");
    for h in 0..ins.head_weights.rows() {
        for (j, w) in ins.head_weights.row(h).iter().enumerate() {
            writeln!(out, "{h},{j},{},{w:.17e}", pool.ids[j]).unwrap();
        }
    }
    out
}

pub fn top_csv(ins: &Inspection, pool: &NormalityPool) -> String {
    let mut out = String::from("head,rank,pool_id,weight\n");
    for (h, list) in ins.top.iter().enumerate() {
        for (rank, (j, w)) in list.iter().enumerate() {
            writeln!(out, "{h},{},{},{w:.6}", rank + 1, pool.ids[*j]).unwrap();
        }
    }
    out
}

pub fn saliency_csv(ins: &Inspection) -> String {
    let mut out = String::from("patch,saliency\n");
    for (i, s) in ins.saliency.iter().enumerate() {
        writeln!(out, "{i},{s:.6}").unwrap();
    }
    out
}

/// Plain (P2) PGM of the saliency laid out on a near-square grid, each
/// patch drawn as a `scale × scale` block. Brightest is the maximum.
pub fn saliency_pgm(saliency: &[f64], scale: usize) -> String {
    let n = saliency.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let max = saliency.iter().cloned().fold(0.0, f64::max);
    let level = |i: usize| -> u32 {
        match saliency.get(i) {
            Some(&s) if max > 0.0 => (255.0 * s / max).round() as u32,
            _ => 0,
        }
    };
    let scale = scale.max(1);
    let mut out = format!("P2\n{} {}\n255\n", cols * scale, rows * scale);
    for y in 0..rows * scale {
        let line: Vec<String> = (0..cols * scale)
            .map(|x| level((y / scale) * cols + x / scale).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_all(
    dir: &Path,
    ins: &Inspection,
    pool: &NormalityPool,
    pgm_scale: Option<usize>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = vec![
        ("attention_weights.csv", weights_csv(ins, pool)),
        ("top_k.csv", top_csv(ins, pool)),
        ("saliency.csv", saliency_csv(ins)),
    ];
    if let Some(s) = pgm_scale {
        files.push(("saliency.pgm", saliency_pgm(&ins.saliency, s)));
    }
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let pgm = saliency_pgm(&[0.0, 1.0, 0.5], 1);
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n128 0\n");
        let big = saliency_pgm(&[1.0; 4], 3);
        assert!(big.starts_with("P2\n6 6\n255\n"));
    }
}
