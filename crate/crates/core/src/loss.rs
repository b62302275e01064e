//! Multi-level detection loss over the 20-channel heads.
//!
//! Each pyramid level `k` (face, head, body) contributes a two-way softmax
//! classification term over the positives plus hard-mined negatives and a
//! smooth-L1 regression term over the positives:
//!
//! `L = Σ_k λ_k · (λ / N_cls · Σ L_cls + 1 / N_reg · Σ p* L_reg)`
//!
//! evaluated per image and averaged over the batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::anchors::{AnchorGrid, PyramidAnchorConfig, PyramidLabelSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{face_scores, HeadLayout, HEAD_CHANNELS};
use crate::tensor::{Real, Tensor};

pub use crate::graph::smooth_l1;

/// Per-level values, averaged over the batch after per-image normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTerms {
    pub k: usize,
    /// Mean over images of `Σ L_cls / N_cls`.
    pub cls_loss: f64,
    /// Mean over images of `Σ L_reg / N_reg`.
    pub reg_loss: f64,
    /// Classified anchors (positives plus mined negatives), summed over the
    /// batch.
    pub n_cls: usize,
    /// Positive anchors, summed over the batch.
    pub n_reg: usize,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub levels: Vec<LevelTerms>,
    /// Scalar loss on the graph.
    pub total: Var,
    pub total_value: f64,
}

impl LossBreakdown {
    /// First non-finite term, named for error reports.
    pub fn non_finite_term(&self) -> Option<alloc::string::String> {
        non_finite_term(&self.levels, self.total_value)
    }
}

/// First non-finite term among `levels` and `total`, named for error reports.
pub fn non_finite_term(levels: &[LevelTerms], total: f64) -> Option<alloc::string::String> {
    for t in levels {
        if !t.cls_loss.is_finite() {
            return Some(format!("cls_loss[k={}]", t.k));
        }
        if !t.reg_loss.is_finite() {
            return Some(format!("reg_loss[k={}]", t.k));
        }
    }
    (!total.is_finite()).then(|| "total".into())
}

/// Indices of the negatives kept by hard mining: highest loss first, lower
/// anchor index on ties, `ratio · max(n_pos, 1)` of them (all when `ratio`
/// is `None`).
pub fn mine_negatives(candidates: &[(usize, f64)], n_pos: usize, ratio: Option<f64>) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = match ratio {
        Some(r) => ((r * n_pos.max(1) as f64).floor() as usize).min(sorted.len()),
        None => sorted.len(),
    };
    sorted.truncate(keep);
    sorted.into_iter().map(|(a, _)| a).collect()
}

fn check_inputs<T: Real>(
    g: &Graph<T>,
    heads: &[Var],
    grid: &AnchorGrid,
    labels: &[PyramidLabelSet],
    cfg: &PyramidAnchorConfig,
) -> Result<usize> {
    if heads.len() != grid.layers.len() {
        return Err(Error::contract(format!("{} head maps for {} anchor layers", heads.len(), grid.layers.len())));
    }
    let batch = g.value(heads[0]).shape()[0];
    if labels.len() != batch {
        return Err(Error::contract(format!("{} label sets for a batch of {batch}", labels.len())));
    }
    for (l, (&h, layer)) in heads.iter().zip(&grid.layers).enumerate() {
        let (n, c, rows, cols) = g.value(h).dims4()?;
        if n != batch || c != HEAD_CHANNELS || rows != layer.rows || cols != layer.cols {
            return Err(Error::contract(format!(
                "head {l} has shape {:?}, grid expects [{batch}, {HEAD_CHANNELS}, {}, {}]",
                g.value(h).shape(),
                layer.rows,
                layer.cols
            )));
        }
    }
    for set in labels {
        if set.levels.len() < cfg.levels() {
            return Err(Error::contract(format!("labels cover {} levels, loss needs {}", set.levels.len(), cfg.levels())));
        }
        if set.levels.iter().any(|lv| lv.p_star.len() != grid.len()) {
            return Err(Error::contract("label set does not match the anchor grid"));
        }
    }
    Ok(batch)
}

/// Builds the loss on `g` from raw head maps (one per anchor layer).
pub fn pyramidbox_loss<T: Real>(
    g: &mut Graph<T>,
    heads: &[Var],
    grid: &AnchorGrid,
    labels: &[PyramidLabelSet],
    cfg: &PyramidAnchorConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let batch = check_inputs(g, heads, grid, labels, cfg)?;
    let mut terms: Vec<Var> = Vec::new();
    let mut levels = Vec::with_capacity(cfg.levels());
    let mut total_value = 0.0;
    for k in 0..cfg.levels() {
        let (cls_ch, reg_ch) = HeadLayout::level_channels(k);
        let mut logps = Vec::with_capacity(heads.len());
        let mut regs = Vec::with_capacity(heads.len());
        for (l, &h) in heads.iter().enumerate() {
            let logits = match cls_ch {
                None => {
                    let (pos, neg) = face_scores(g, h, grid.layers[l].spec.index)?;
                    g.concat_channels(&[pos, neg])?
                }
                Some(c) => g.slice_channels(h, c, 2)?,
            };
            logps.push(g.log_softmax_channels(logits, 2)?);
            regs.push(g.slice_channels(h, reg_ch, 4)?);
        }

        // Per-image anchor selection; weights are zero elsewhere.
        let mut w_cls: Vec<Vec<f64>> = grid.layers.iter().map(|ly| vec![0.0; batch * 2 * ly.len()]).collect();
        let mut w_reg: Vec<Vec<f64>> = grid.layers.iter().map(|ly| vec![0.0; batch * 4 * ly.len()]).collect();
        let mut target: Vec<Vec<f64>> = w_reg.clone();
        let (mut cls_mean, mut reg_mean) = (0.0, 0.0);
        let (mut n_cls_total, mut n_reg_total) = (0, 0);
        for (n, set) in labels.iter().enumerate() {
            let lab = &set.levels[k];
            let logp_at = |a: usize, c: usize| -> f64 {
                let (l, row, col) = grid.locate(a);
                let ly = &grid.layers[l];
                g.value(logps[l]).data()[((n * 2 + c) * ly.rows + row) * ly.cols + col].f64()
            };
            let positives: Vec<usize> = (0..grid.len()).filter(|&a| lab.p_star[a] == 1).collect();
            let candidates: Vec<(usize, f64)> = (0..grid.len())
                .filter(|&a| lab.p_star[a] == 0 && !lab.ignore[a])
                .map(|a| (a, -logp_at(a, 1)))
                .collect();
            let negatives = mine_negatives(&candidates, positives.len(), cfg.neg_pos_ratio);
            let n_cls = positives.len() + negatives.len();
            let n_reg = positives.len();
            n_cls_total += n_cls;
            n_reg_total += n_reg;
            let wc = cfg.lambda_k[k] * cfg.lambda / (n_cls.max(1) * batch) as f64;
            let wr = cfg.lambda_k[k] / (n_reg.max(1) * batch) as f64;
            let mut cls_sum = 0.0;
            for (&a, c) in positives.iter().map(|a| (a, 0)).chain(negatives.iter().map(|a| (a, 1))) {
                let (l, row, col) = grid.locate(a);
                let ly = &grid.layers[l];
                w_cls[l][((n * 2 + c) * ly.rows + row) * ly.cols + col] = wc;
                cls_sum -= logp_at(a, c);
            }
            let mut reg_sum = 0.0;
            for &a in &positives {
                let t = lab.t_star[a].ok_or_else(|| Error::contract(format!("positive anchor {a} has no target")))?;
                let (l, row, col) = grid.locate(a);
                let ly = &grid.layers[l];
                let pred = g.value(regs[l]).data();
                for (c, &tc) in t.iter().enumerate() {
                    let i = ((n * 4 + c) * ly.rows + row) * ly.cols + col;
                    w_reg[l][i] = wr;
                    target[l][i] = tc;
                    reg_sum += smooth_l1(pred[i].f64() - tc);
                }
            }
            cls_mean += cls_sum / n_cls.max(1) as f64 / batch as f64;
            reg_mean += reg_sum / n_reg.max(1) as f64 / batch as f64;
        }
        total_value += cfg.lambda_k[k] * (cfg.lambda * cls_mean + reg_mean);
        levels.push(LevelTerms { k, cls_loss: cls_mean, reg_loss: reg_mean, n_cls: n_cls_total, n_reg: n_reg_total });

        if cfg.lambda_k[k] == 0.0 {
            continue;
        }
        for (l, ly) in grid.layers.iter().enumerate() {
            let to_t = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
            let wc = g.constant(Tensor::new(&[batch, 2, ly.rows, ly.cols], to_t(&w_cls[l]))?);
            let weighted = g.mul(wc, logps[l])?;
            let s = g.sum(weighted)?;
            terms.push(g.scale(s, -T::one())?);
            if w_reg[l].iter().any(|&w| w != 0.0) {
                let shape = [batch, 4, ly.rows, ly.cols];
                let t = g.constant(Tensor::new(&shape, to_t(&target[l]))?);
                let wr = g.constant(Tensor::new(&shape, to_t(&w_reg[l]))?);
                let d = g.sub(regs[l], t)?;
                let sl = g.smooth_l1(d)?;
                let weighted = g.mul(wr, sl)?;
                terms.push(g.sum(weighted)?);
            }
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    for &t in terms.iter().skip(1) {
        total = g.add(total, t)?;
    }
    Ok(LossBreakdown { levels, total, total_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_ratio_and_ties() {
        let cands = [(0, 0.5), (1, 0.9), (2, 0.5), (3, 0.1), (4, 0.7)];
        assert_eq!(mine_negatives(&cands, 1, Some(3.0)), vec![1, 4, 0]);
        assert_eq!(mine_negatives(&cands, 0, Some(3.0)), vec![1, 4, 0]);
        assert_eq!(mine_negatives(&cands, 2, Some(3.0)), vec![1, 4, 0, 2, 3]);
        assert_eq!(mine_negatives(&cands, 1, None).len(), 5);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
    }
}
