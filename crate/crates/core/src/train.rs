//! SGD training loop and face-branch inference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{decode_box_flagged, label_pyramid, AnchorGrid, PyramidLabelSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{nms, Detection};
use crate::graph::Graph;
use crate::image::{batch_tensor, Image};
use crate::loss::{pyramidbox_loss, LevelTerms, non_finite_term};
use crate::network::{face_scores, HeadLayout, ModelParams, Network};
use crate::sampling::{baseline_augment, data_anchor_sample, letterbox, SampleRecord, TrainCrop};
use crate::tensor::Tensor;

/// Piecewise-constant learning rate: `(steps, lr)` segments in order. Steps
/// past the last segment keep its rate.
pub type LrSchedule = Vec<(u64, f64)>;

pub fn lr_at(step: u64, schedule: &[(u64, f64)]) -> f64 {
    let mut end = 0;
    for &(len, lr) in schedule {
        end += len;
        if step < end {
            return lr;
        }
    }
    schedule.last().map_or(0.0, |s| s.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Probability of drawing a crop with data-anchor-sampling rather than
    /// the baseline flip/jitter/crop path.
    pub das_prob: f64,
    pub seed: u64,
    /// Worker threads for per-image gradients; 0 uses every available core.
    /// The result does not depend on this.
    pub threads: usize,
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            lr_schedule: vec![(80_000, 1e-3), (20_000, 1e-4), (20_000, 1e-5)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            das_prob: 0.5,
            seed: 0,
            threads: 0,
        }
    }

    /// Toy schedule: step counts divided by 100.
    pub fn toy() -> Self {
        let full = Self::full_scale();
        TrainConfig {
            lr_schedule: full.lr_schedule.iter().map(|&(n, lr)| (n / 100, lr)).collect(),
            batch_size: 4,
            ..full
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.lr_schedule.iter().map(|s| s.0).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::config("lr_schedule must have at least one segment"));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.das_prob) {
            return Err(Error::config(format!("das_prob {} outside [0, 1]", self.das_prob)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        Ok(())
    }
}

/// Parameters, momentum buffers and the sampling stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub velocity: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters drawn from `seed`; the sampling stream is derived
    /// from the same seed.
    pub fn new(net: &Network, seed: u64) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init_params(&mut init_rng);
        Self::from_params(params, seed)
    }

    pub fn from_params(params: ModelParams<f32>, seed: u64) -> Self {
        let velocity = params.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        TrainState { params, velocity, step: 0, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5DA7_A5EE_D000_0001) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub levels: Vec<LevelTerms>,
}

/// One training crop drawn from a random record.
pub fn draw_crop(records: &[SampleRecord], rng: &mut impl Rng, input_size: usize, das_prob: f64) -> Result<TrainCrop> {
    if records.is_empty() {
        return Err(Error::contract("no training records"));
    }
    let rec = &records[rng.gen_range(0..records.len())];
    let use_das = rng.gen::<f64>() < das_prob;
    if use_das && !rec.faces.is_empty() {
        data_anchor_sample(rec, rng, input_size)
    } else {
        let aug = baseline_augment(rec, rng);
        Ok(letterbox(&aug, input_size).0)
    }
}

pub fn label_batch(net: &Network, grid: &AnchorGrid, crops: &[TrainCrop]) -> Result<Vec<PyramidLabelSet>> {
    crops.iter().map(|c| label_pyramid(grid, &c.faces, &net.config.pyramid)).collect()
}

/// Loss terms and parameter gradients of a single crop, gradients in
/// parameter-name order.
struct ImageGrads {
    total: f64,
    levels: Vec<LevelTerms>,
    grads: Vec<Option<Tensor<f32>>>,
}

fn image_gradients(net: &Network, grid: &AnchorGrid, params: &ModelParams<f32>, crop: &TrainCrop, label: &PyramidLabelSet) -> Result<ImageGrads> {
    let mut g = Graph::<f32>::new();
    let pv = params.register(&mut g);
    let x = g.constant(batch_tensor(&[&crop.image])?);
    let heads = net.forward(&mut g, &pv, x)?;
    let loss = pyramidbox_loss(&mut g, &heads, grid, core::slice::from_ref(label), &net.config.pyramid)?;
    if loss.non_finite_term().is_some() {
        return Ok(ImageGrads { total: loss.total_value, levels: loss.levels, grads: Vec::new() });
    }
    g.backward(loss.total)?;
    let grads = pv.vars.values().map(|&v| g.grad(v)).collect();
    Ok(ImageGrads { total: loss.total_value, levels: loss.levels, grads })
}

/// `f(0..n)` in index order, spread over up to `threads` scoped threads.
#[cfg(feature = "std")]
fn map_indices<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |t| t.get()),
        t => t,
    }
    .min(n);
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("gradient worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every index mapped")).collect()
}

#[cfg(not(feature = "std"))]
fn map_indices<R>(n: usize, _threads: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Forward, loss, backward and one SGD-with-momentum update on `crops`.
///
/// Each crop gets its own graph; gradients are summed in crop order and
/// divided by the batch size, so the update is the same for any thread
/// count. `v ← μ·v + (∇ + wd·θ)`, `θ ← θ − lr·v`. A non-finite loss aborts
/// before any parameter changes.
pub fn train_step(net: &Network, grid: &AnchorGrid, state: &mut TrainState, cfg: &TrainConfig, crops: &[TrainCrop]) -> Result<StepReport> {
    if crops.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let labels = label_batch(net, grid, crops)?;
    let params = &state.params;
    let per_image = map_indices(crops.len(), cfg.threads, |i| image_gradients(net, grid, params, &crops[i], &labels[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n = crops.len() as f64;
    let mut levels = per_image[0].levels.clone();
    for t in &mut levels {
        t.cls_loss = 0.0;
        t.reg_loss = 0.0;
    }
    let mut total = 0.0;
    for im in &per_image {
        total += im.total / n;
        for (acc, t) in levels.iter_mut().zip(&im.levels) {
            acc.cls_loss += t.cls_loss / n;
            acc.reg_loss += t.reg_loss / n;
            acc.n_cls += t.n_cls;
            acc.n_reg += t.n_reg;
        }
    }
    if let Some(term) = non_finite_term(&levels, total) {
        return Err(Error::Numeric(format!("non-finite {term} at step {}", state.step)));
    }

    let lr = lr_at(state.step, &cfg.lr_schedule) as f32;
    let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
    let scale = 1.0 / crops.len() as f32;
    for (j, (name, p)) in state.params.tensors.iter_mut().enumerate() {
        let v = state.velocity.get_mut(name).ok_or_else(|| Error::contract(format!("no momentum for {name}")))?;
        let mut grad: Option<Vec<f32>> = None;
        for im in &per_image {
            if let Some(t) = &im.grads[j] {
                match &mut grad {
                    None => grad = Some(t.data().to_vec()),
                    Some(acc) => acc.iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                }
            }
        }
        for (i, (pi, vi)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = grad.as_ref().map_or(0.0, |d| d[i] * scale);
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    let report = StepReport { step: state.step, lr: lr as f64, loss: total, levels };
    state.step += 1;
    Ok(report)
}

/// Draws a batch from `records` and trains on it.
pub fn train_on_records(
    net: &Network,
    grid: &AnchorGrid,
    state: &mut TrainState,
    cfg: &TrainConfig,
    records: &[SampleRecord],
) -> Result<StepReport> {
    let crops = (0..cfg.batch_size)
        .map(|_| draw_crop(records, &mut state.rng, net.config.input_size, cfg.das_prob))
        .collect::<Result<Vec<_>>>()?;
    train_step(net, grid, state, cfg, &crops)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    /// Face probability must exceed this.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Candidates kept, by score, before suppression.
    pub pre_nms_top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { score_threshold: 0.05, nms_threshold: 0.3, pre_nms_top_k: 1000 }
    }
}

/// Face detections for an `N × 3 × S × S` input, in input pixel
/// coordinates. Only the face branch (level 0) is decoded.
pub fn detect_batch(
    net: &Network,
    grid: &AnchorGrid,
    params: &ModelParams<f32>,
    input: Tensor<f32>,
    cfg: &InferConfig,
) -> Result<Vec<Vec<Detection>>> {
    let batch = input.shape()[0];
    let mut g = Graph::<f32>::new();
    let pv = params.register(&mut g);
    let x = g.constant(input);
    let heads = net.forward(&mut g, &pv, x)?;
    let side = net.config.input_size as f64;
    let variance = net.config.pyramid.variance;
    let mut out = vec![Vec::new(); batch];
    for (&h, ly) in heads.iter().zip(&grid.layers) {
        let (pos, neg) = face_scores(&mut g, h, ly.spec.index)?;
        let (pv_, nv, hv) = (g.value(pos).data(), g.value(neg).data(), g.value(h).data());
        let plane = ly.rows * ly.cols;
        for (n, dets) in out.iter_mut().enumerate() {
            for i in 0..plane {
                let (p, q) = (pv_[n * plane + i] as f64, nv[n * plane + i] as f64);
                let score = 1.0 / (1.0 + (q - p).exp());
                if !(score > cfg.score_threshold) {
                    continue;
                }
                let reg = |c: usize| hv[(n * 20 + HeadLayout::FACE_REG + c) * plane + i] as f64;
                let anchor = &grid.boxes[ly.offset + i];
                let (bbox, _) = decode_box_flagged(anchor, [reg(0), reg(1), reg(2), reg(3)], variance)?;
                if let Some(b) = bbox.clip(side, side) {
                    dets.push(Detection::face(b, score));
                }
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|mut dets| {
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(cfg.pre_nms_top_k);
            nms(&dets, cfg.nms_threshold)
        })
        .collect())
}

/// Detects faces in an arbitrary image: letterboxed to the network input,
/// boxes mapped back to image coordinates.
pub fn detect(net: &Network, grid: &AnchorGrid, params: &ModelParams<f32>, image: &Image, cfg: &InferConfig) -> Result<Vec<Detection>> {
    let rec = SampleRecord { image: image.clone(), faces: Vec::new(), source_path: String::new() };
    let (crop, scale) = letterbox(&rec, net.config.input_size);
    let dets = detect_batch(net, grid, params, crop.image.to_tensor(), cfg)?.remove(0);
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(dets
        .into_iter()
        .filter_map(|d| {
            let b = crate::geometry::scale_box(&d.bbox, 1.0 / scale).ok()?.clip(w, h)?;
            Some(Detection::face(b, d.score))
        })
        .collect())
}

/// Detects on every record and scores the result against its faces.
pub fn evaluate_records(
    net: &Network,
    grid: &AnchorGrid,
    params: &ModelParams<f32>,
    records: &[SampleRecord],
    infer: &InferConfig,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let dets = records
        .iter()
        .map(|r| detect(net, grid, params, &r.image, infer))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<_>> = records.iter().map(|r| r.faces.clone()).collect();
    evaluate(&dets, &gts, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = TrainConfig::full_scale().lr_schedule;
        assert_eq!(lr_at(0, &s), 1e-3);
        assert_eq!(lr_at(79_999, &s), 1e-3);
        assert_eq!(lr_at(80_000, &s), 1e-4);
        assert_eq!(lr_at(100_000, &s), 1e-5);
        assert_eq!(lr_at(500_000, &s), 1e-5);
        let toy = TrainConfig::toy();
        assert_eq!(toy.total_steps(), 1200);
        assert_eq!(lr_at(800, &toy.lr_schedule), 1e-4);
    }
}
