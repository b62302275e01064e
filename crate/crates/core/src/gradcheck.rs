//! Finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit. Each case builds a scalar-valued computation from named
//! inputs; every input element is perturbed by `±eps` and the central
//! difference compared against the gradient produced by
//! [`Graph::backward`].

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use alloc::collections::BTreeMap;
use alloc::vec;

use crate::anchors::{label_pyramid, AnchorGrid, AnchorLayerSpec, PyramidAnchorConfig};
use crate::error::Result;
use crate::geometry::BoxPx;
use crate::graph::{ConvSpec, Graph, UpsampleMode, Var, L2_EPS};
use crate::loss::pyramidbox_loss;
use crate::network::{Network, NetworkConfig, ParamVars};
use crate::tensor::Tensor;

/// Default perturbation.
pub const EPS: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<(String, Tensor<f64>)>,
    build: Builder,
}

impl GradCheckCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<(String, Tensor<f64>)>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCheckCase { name: name.into(), inputs, build: Box::new(build) }
    }

    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub case: String,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Relative error with a small floor on the denominator so that two
/// vanishing gradients compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn gradcheck(case: &GradCheckCase, eps: f64) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(vars.len());
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = g.grad(var).unwrap_or_else(|| Tensor::zeros(values[slot].shape()));
        let mut worst = InputReport {
            name: case.inputs[slot].0.clone(),
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..values[slot].numel() {
            let orig = values[slot].data()[idx];
            values[slot].data_mut()[idx] = orig + eps;
            let plus = case.eval(&values)?;
            values[slot].data_mut()[idx] = orig - eps;
            let minus = case.eval(&values)?;
            values[slot].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err || idx == 0 {
                worst.max_rel_err = err;
                worst.worst = idx;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport { case: case.name.clone(), inputs: reports })
}

/// Seeded random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights, so
/// every output element receives a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

/// Values on a lattice of spacing `gap`, randomly permuted: distinct enough
/// that max/argmax and ReLU kinks sit far from any finite-difference probe.
pub fn spread_tensor(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).expect("shape product matches")
}

fn case1(
    name: &str,
    x: Tensor<f64>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> GradCheckCase {
    GradCheckCase::new(alloc::format!("{name}"), vec![("x".into(), x)], move |g, v| {
        let y = f(g, v[0])?;
        weighted_sum(g, y, seed)
    })
}

/// The per-seed suite: every differentiable operation in isolation, a
/// full prediction module, and prediction modules feeding the detection
/// loss on a small anchor grid.
pub fn standard_cases(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = seeded_rng(seed);
    let mut cases = Vec::new();
    for (label, spec) in [("conv2d", ConvSpec::same(3)), ("conv2d_s2", ConvSpec::new(2, 1, 1)), ("conv2d_d2", ConvSpec::new(1, 2, 2))] {
        let x = random_tensor(&mut rng, &[2, 3, 8, 8]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[4]);
        cases.push(GradCheckCase::new(label, vec![("x".into(), x), ("w".into(), w), ("b".into(), b)], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(g, y, seed)
        }));
    }
    let x = random_tensor(&mut rng, &[1, 5, 4, 4]);
    let w = random_tensor(&mut rng, &[3, 5, 1, 1]);
    cases.push(GradCheckCase::new("conv2d_1x1", vec![("x".into(), x), ("w".into(), w)], move |g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvSpec::new(1, 0, 1))?;
        weighted_sum(g, y, seed)
    }));
    cases.push(case1("relu", spread_tensor(&mut rng, &[2, 3, 4, 4], 0.01), seed, |g, x| g.relu(x)));
    for (label, op) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        let a = random_tensor(&mut rng, &[2, 3, 4, 4]);
        let b = random_tensor(&mut rng, &[2, 3, 4, 4]);
        cases.push(GradCheckCase::new(label, vec![("a".into(), a), ("b".into(), b)], move |g, v| {
            let y = match op {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[0], v[1])?,
                _ => g.mul(v[0], v[1])?,
            };
            weighted_sum(g, y, seed)
        }));
    }
    cases.push(case1("scale", random_tensor(&mut rng, &[1, 2, 3, 3]), seed, |g, x| g.scale(x, -1.7)));
    cases.push(case1("upsample_nearest", random_tensor(&mut rng, &[1, 2, 3, 3]), seed, |g, x| {
        g.upsample2x(x, UpsampleMode::Nearest)
    }));
    cases.push(case1("upsample_bilinear", random_tensor(&mut rng, &[1, 2, 3, 3]), seed, |g, x| {
        g.upsample2x(x, UpsampleMode::Bilinear)
    }));
    cases.push(case1("maxpool2x", spread_tensor(&mut rng, &[1, 2, 6, 6], 0.01), seed, |g, x| g.maxpool2x(x)));
    let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
    let gamma = random_tensor(&mut rng, &[4]);
    cases.push(GradCheckCase::new("l2_rescale", vec![("x".into(), x), ("gamma".into(), gamma)], move |g, v| {
        let y = g.l2_rescale(v[0], v[1], L2_EPS)?;
        weighted_sum(g, y, seed)
    }));
    cases.push(case1("softmax_channels", random_tensor(&mut rng, &[2, 4, 3, 3]), seed, |g, x| g.softmax_channels(x, 2)));
    cases.push(case1("log_softmax_channels", random_tensor(&mut rng, &[2, 6, 3, 3]), seed, |g, x| {
        g.log_softmax_channels(x, 3)
    }));
    cases.push(case1("channel_group_max", spread_tensor(&mut rng, &[2, 5, 3, 3], 0.01), seed, |g, x| {
        g.channel_group_max(x, 1, 3)
    }));
    cases.push(case1("slice_channels", random_tensor(&mut rng, &[2, 5, 3, 3]), seed, |g, x| g.slice_channels(x, 1, 3)));
    cases.push(case1("crop_spatial", random_tensor(&mut rng, &[1, 2, 4, 4]), seed, |g, x| g.crop_spatial(x, 3, 2)));
    let a = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[2, 3, 3, 3]);
    cases.push(GradCheckCase::new("concat_channels", vec![("a".into(), a), ("b".into(), b)], move |g, v| {
        let y = g.concat_channels(&[v[0], v[1], v[0]])?;
        weighted_sum(g, y, seed)
    }));
    // keep |d| away from the junction at 1
    let d = Tensor::from_fn(&[1, 2, 4, 4], |_| {
        let m: f64 = rng.gen_range(0.05..0.9);
        let far: f64 = rng.gen_range(1.1..3.0);
        let v = if rng.gen_bool(0.5) { m } else { far };
        if rng.gen_bool(0.5) { v } else { -v }
    });
    cases.push(case1("smooth_l1", d, seed, |g, x| g.smooth_l1(x)));
    cases.push(case1("sum", random_tensor(&mut rng, &[1, 3, 2, 2]), seed, |g, x| {
        let s = g.sum(x)?;
        g.mul(s, s)
    }));
    let x = random_tensor(&mut rng, &[1, 3, 6, 6]);
    let w = random_tensor(&mut rng, &[2, 3, 3, 3]);
    cases.push(GradCheckCase::new("conv_relu_sum", vec![("x".into(), x), ("w".into(), w)], move |g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3))?;
        let r = g.relu(y)?;
        g.sum(r)
    }));
    cases.push(cpm_case(&mut rng)?);
    cases.push(cpm_loss_case(&mut rng)?);
    Ok(cases)
}

fn tiny_network() -> Result<Network> {
    let cfg = NetworkConfig { input_size: 64, width_factor: 1.0 / 32.0, cpm_width: 8, ..NetworkConfig::toy() };
    Network::new(cfg)
}

/// Whole prediction module of tap 0 on a `1 × 8 × 6 × 6` input; every
/// module parameter is checked along with the input.
fn cpm_case(rng: &mut ChaCha8Rng) -> Result<GradCheckCase> {
    let net = tiny_network()?;
    let params = net.init_params::<f64>(rng);
    let mut inputs = vec![("x".into(), random_tensor(rng, &[1, 8, 6, 6]))];
    let names: Vec<String> = params.tensors.keys().filter(|k| k.starts_with("cpm0.")).cloned().collect();
    for name in &names {
        // biases nudged off zero so every ReLU sees a spread of inputs
        let t = params.tensors[name].clone();
        let t = if name.ends_with(".bias") { random_tensor(rng, t.shape()) } else { t };
        inputs.push((name.clone(), t));
    }
    Ok(GradCheckCase::new("cpm_block", inputs, move |g, v| {
        let pv = ParamVars { vars: names.iter().cloned().zip(v[1..].iter().copied()).collect() };
        let y = net.build_cpm(g, &pv, 0, v[0])?;
        g.sum(y).and_then(|s| g.mul(s, s))
    }))
}

/// Prediction modules on the three deepest anchor layers of a 64-pixel
/// input, their heads, and the full three-level loss with mining.
fn cpm_loss_case(rng: &mut ChaCha8Rng) -> Result<GradCheckCase> {
    let net = tiny_network()?;
    let params = net.init_params::<f64>(rng);
    let layers: Vec<_> = (3..6).map(AnchorLayerSpec::standard).collect();
    let grid = AnchorGrid::build(&layers, 64)?;
    let faces = [BoxPx::new(4.0, 6.0, 40.0, 44.0), BoxPx::new(30.0, 20.0, 28.0, 30.0)];
    let cfg = PyramidAnchorConfig::default();
    let labels = vec![label_pyramid(&grid, &faces, &cfg)?];
    let channels = net.config.tap_channels();
    let mut inputs = Vec::new();
    for (l, ly) in grid.layers.iter().enumerate() {
        inputs.push((alloc::format!("feat{l}"), random_tensor(rng, &[1, channels[ly.spec.index], ly.rows, ly.cols])));
    }
    let pv_names: Vec<String> = params.tensors.keys().cloned().collect();
    let fixed = params;
    Ok(GradCheckCase::new("cpm_heads_loss", inputs, move |g, v| {
        let mut vars = BTreeMap::new();
        for name in &pv_names {
            vars.insert(name.clone(), g.constant(fixed.tensors[name].clone()));
        }
        let pv = ParamVars { vars };
        let mut heads = Vec::new();
        for (l, ly) in grid.layers.iter().enumerate() {
            let c = net.build_cpm(g, &pv, ly.spec.index, v[l])?;
            let w = pv.vars[&alloc::format!("head{}.weight", ly.spec.index)];
            heads.push(g.conv2d(c, w, None, ConvSpec::same(3))?);
        }
        Ok(pyramidbox_loss(g, &heads, &grid, &labels, &cfg)?.total)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let case = GradCheckCase::new(
            "x·x",
            vec![("x".into(), Tensor::new(&[1], vec![3.0]).unwrap())],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
        );
        let r = gradcheck(&case, EPS).unwrap();
        assert_eq!(r.inputs[0].analytic, 6.0);
        assert!((r.inputs[0].numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn smooth_l1_junction_brackets_slope() {
        // One-sided differences at d = 1 bracket the analytic slope 1.
        let h = 1e-6;
        let f = crate::graph::smooth_l1::<f64>;
        let left = (f(1.0) - f(1.0 - h)) / h;
        let right = (f(1.0 + h) - f(1.0)) / h;
        let analytic = crate::graph::smooth_l1_grad(1.0f64);
        assert_eq!(analytic, 1.0);
        assert!(left <= analytic + 1e-9 && right >= analytic - 1e-9);
        assert!((left - 1.0).abs() < 1e-5 && (right - 1.0).abs() < 1e-5);
    }

    #[test]
    fn standard_suite_passes() {
        for seed in 0..2 {
            for case in standard_cases(seed).unwrap() {
                let r = gradcheck(&case, EPS).unwrap();
                assert!(r.passed(TOLERANCE), "{} seed {seed}: {:?}", r.case, r.inputs);
            }
        }
    }
}
