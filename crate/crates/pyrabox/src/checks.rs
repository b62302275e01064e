//! Invariant checks shared by `selftest` and the acceptance suite. Each
//! compares production code against an independent oracle or a closed-form
//! value and reports a single pass/fail row.

use std::collections::BTreeSet;
use std::time::Instant;

use pyrabox_core::anchors::{
    encode_targets, label_pyramid, level_iou, standard_layers, AnchorGrid, ContextTransformParams, PyramidAnchorConfig,
};
use pyrabox_core::eval::{average_precision, evaluate};
use pyrabox_core::geometry::{iou, nms, BoxPx, Detection};
use pyrabox_core::gradcheck::{gradcheck, seeded_rng, standard_cases, EPS, TOLERANCE};
use pyrabox_core::graph::Graph;
use pyrabox_core::loss::pyramidbox_loss;
use pyrabox_core::network::{receptive_field, HeadLayout, Network, NetworkConfig, HEAD_CHANNELS, TAP_NAMES};
use pyrabox_core::oracle;
use pyrabox_core::sampling::{draw_target, nearest_anchor_index, target_indices, anchor_scale};
use pyrabox_core::Tensor;
use rand::Rng;

use crate::error::{AppError, FormatError};
use crate::formats::annotations::{parse_annotations, serialize_annotations};
use crate::formats::model::{decode_model, encode_model};
use crate::formats::ppm::{decode_ppm, encode_ppm};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, failures: Vec<String>, summary: String) -> Self {
        let passed = failures.is_empty();
        let detail = if passed { summary } else { format!("{summary}; {}", failures.join("; ")) };
        Check { name: name.into(), passed, detail }
    }
}

/// Finite-difference checks of every op and the composed CPM and loss
/// graphs, one suite per seed.
pub fn gradients(seeds: std::ops::Range<u64>) -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    let (mut worst, mut worst_case, mut cases) = (0.0f64, String::new(), 0);
    for seed in seeds.clone() {
        let suite = match standard_cases(seed) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        for case in &suite {
            cases += 1;
            match gradcheck(case, EPS) {
                Ok(r) => {
                    if r.max_rel_err() > worst {
                        worst = r.max_rel_err();
                        worst_case = format!("{} (seed {seed})", r.case);
                    }
                    if !r.passed(TOLERANCE) {
                        failures.push(format!("{} seed {seed}: rel err {:.2e}", r.case, r.max_rel_err()));
                    }
                }
                Err(e) => failures.push(format!("{} seed {seed}: {e}", case.name)),
            }
        }
    }
    let summary = format!(
        "{cases} cases over {} seeds, max rel err {worst:.2e} in {worst_case}, {:.1}s",
        seeds.end - seeds.start,
        start.elapsed().as_secs_f64()
    );
    Check::new("gradient fidelity", failures, summary)
}

fn random_box(rng: &mut impl Rng, max: f64) -> BoxPx {
    let w = rng.gen_range(1.0..max);
    let h = rng.gen_range(1.0..max);
    BoxPx::new(rng.gen_range(-max / 2.0..max), rng.gen_range(-max / 2.0..max), w, h)
}

/// Layers holding level-`k` positives for a single face.
fn positive_layers(grid: &AnchorGrid, face: BoxPx, k: usize) -> BTreeSet<usize> {
    let labels = label_pyramid(grid, &[face], &PyramidAnchorConfig::default()).expect("valid fixture");
    let lv = &labels.levels[k];
    (0..grid.len()).filter(|&a| lv.p_star[a] == 1).map(|a| grid.locate(a).0).collect()
}

/// Down-sampled-anchor labels against the enlarged-face oracle, plus the
/// level assignment of faces centred exactly on an anchor.
pub fn pyramid_labels(triples: usize, seed: u64) -> Check {
    let cfg = PyramidAnchorConfig::default();
    let mut rng = seeded_rng(seed);
    let mut failures = Vec::new();
    let mut positives = 0;
    for i in 0..triples {
        // anchors on the power-of-two lattice, faces anywhere nearby
        let scale = anchor_scale(rng.gen_range(0..6));
        let anchor = BoxPx::from_center(rng.gen_range(0..64) as f64 * 8.0, rng.gen_range(0..64) as f64 * 8.0, scale, scale);
        let k = rng.gen_range(0..=2usize);
        let (cx, cy) = anchor.center();
        let side = scale / cfg.level_scale(k) * rng.gen_range(0.3..1.8);
        let face = if i % 4 == 0 {
            random_box(&mut rng, 600.0)
        } else {
            BoxPx::from_center(cx + rng.gen_range(-0.6..0.6) * side, cy + rng.gen_range(-0.6..0.6) * side, side, side * rng.gen_range(0.7..1.4))
        };
        let lit = level_iou(&anchor, &face, cfg.s_pa, k) > cfg.threshold;
        let ora = oracle::scaled_face_positive(&anchor, &face, cfg.s_pa, k, cfg.threshold);
        positives += lit as usize;
        if lit != ora && failures.len() < 5 {
            failures.push(format!("triple {i}: anchor {anchor:?} face {face:?} k={k}: {lit} vs {ora}"));
        }
    }
    let grid = AnchorGrid::build(&standard_layers(), 640).expect("standard grid");
    for (side, first_layer) in [(128.0, 3usize), (16.0, 0)] {
        for k in 0..=2 {
            let l = first_layer + k;
            let stride = grid.layers[l].spec.stride as f64;
            // the level-k rule compares the face with the anchor divided by s_pa^k
            let c = ((grid.layers[l].cols / 2) as f64 * stride + stride / 2.0) / 2f64.powi(k as i32);
            let face = BoxPx::from_center(c, c, side, side);
            let got = positive_layers(&grid, face, k);
            if got != BTreeSet::from([l]) {
                failures.push(format!(
                    "face {side} level {k}: positives on layers {got:?}, expected scale {}",
                    grid.layers[l].spec.scale
                ));
            }
        }
    }
    Check::new("pyramid labels", failures, format!("{triples} triples ({positives} positive), 6 level fixtures"))
}

/// Context targets against symbolic substitution and the closed forms.
pub fn context_targets(samples: usize, seed: u64) -> Check {
    const TOL: f64 = 1e-12;
    let cfg = PyramidAnchorConfig::default();
    let mut rng = seeded_rng(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let anchor = BoxPx::from_center(rng.gen_range(0.0..640.0), rng.gen_range(0.0..640.0), 64.0, 64.0);
        let face = BoxPx::from_center(
            anchor.center().0 + rng.gen_range(-20.0..20.0),
            anchor.center().1 + rng.gen_range(-20.0..20.0),
            rng.gen_range(8.0..200.0),
            rng.gen_range(8.0..200.0),
        );
        let [tx, ty, tw, th] = oracle::reference_base_targets(&anchor, &face);
        let closed = [[tx, ty, tw, th], [tx - tw / 2.0, ty - th / 2.0, 2.0 * tw, 2.0 * th], [
            tx - 21.0 / 16.0 * tw,
            ty - th / 2.0,
            3.5 * tw,
            2.0 * th,
        ]];
        for (k, expect) in closed.iter().enumerate() {
            let params = ContextTransformParams::for_level(k);
            let got = match encode_targets(&anchor, &face, k, cfg.s_pa, &params) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(format!("k={k}: {e}"));
                    continue;
                }
            };
            let sym = oracle::apply_forms(&oracle::symbolic_transform(k, cfg.s_pa, &params), [tx, ty, tw, th]);
            for c in 0..4 {
                let err = (got[c] - sym[c]).abs().max((got[c] - expect[c]).abs());
                worst = worst.max(err);
                if err > TOL && failures.len() < 5 {
                    failures.push(format!("k={k} component {c}: {} vs {} / {}", got[c], sym[c], expect[c]));
                }
            }
        }
    }
    Check::new("context targets", failures, format!("{samples} pairs × 3 levels, max abs err {worst:.1e}"))
}

/// Worked sampling example and target-index frequencies.
pub fn das_numerics(draws: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    let i_anchor = nearest_anchor_index(140.0);
    if i_anchor != 3 {
        failures.push(format!("i_anchor for 140 is {i_anchor}"));
    }
    let sizes: Vec<f64> = target_indices(i_anchor, 640).into_iter().map(anchor_scale).collect();
    if sizes != [16.0, 32.0, 64.0, 128.0, 256.0] {
        failures.push(format!("target sizes {sizes:?}"));
    }
    let s_star = 32.0 / 140.0;
    if (s_star - 0.2285f64).abs() > 1e-4 {
        failures.push(format!("s* = {s_star}"));
    }
    let mut rng = seeded_rng(seed);
    let mut counts = [0usize; 6];
    for _ in 0..draws {
        match draw_target(&mut rng, 140.0, 640) {
            Ok((_, i, _)) => counts[i] += 1,
            Err(e) => {
                failures.push(e.to_string());
                break;
            }
        }
    }
    let freqs: Vec<f64> = counts[..5].iter().map(|&c| c as f64 / draws as f64).collect();
    if counts[5] != 0 || freqs.iter().any(|f| (f - 0.2).abs() > 0.02) {
        failures.push(format!("index frequencies {freqs:?}, index 5 drawn {} times", counts[5]));
    }
    let summary = format!(
        "i_anchor {i_anchor}, sizes {sizes:?}, s* {s_star:.4}, freqs [{}] in {:.2}s",
        freqs.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(", "),
        start.elapsed().as_secs_f64()
    );
    Check::new("data-anchor-sampling numerics", failures, summary)
}

/// Receptive fields, LFPN start, head sizes and the max-in-out split of the
/// full-scale network.
pub fn architecture() -> Check {
    let cfg = NetworkConfig::full_scale();
    let mut failures = Vec::new();
    // (tap, receptive field / input)
    let table = [(5, 1.13125), (4, 0.73125), (3, 0.53125), (2, 0.35625), (1, 0.16875)];
    for (tap, expect) in table {
        match receptive_field(&cfg, tap) {
            Ok((_, ratio)) if ratio == expect => {}
            Ok((rf, ratio)) => failures.push(format!("{}: rf {rf}, ratio {ratio} != {expect}", TAP_NAMES[tap])),
            Err(e) => failures.push(e.to_string()),
        }
    }
    let start = cfg.resolved_lfpn_start();
    if TAP_NAMES[start] != "conv_fc7" {
        failures.push(format!("auto LFPN start is {}", TAP_NAMES[start]));
    }
    for (l, h) in cfg.head_layout().iter().enumerate() {
        let side = 640 >> (2 + l);
        let cp = if l == 0 { 1 } else { 3 };
        if *h != HeadLayout::for_tap(l, side) || h.channels() != HEAD_CHANNELS || h.cp != cp || h.cn != 4 - cp {
            failures.push(format!("head {l}: {h:?}"));
        }
    }
    if let Err(e) = Network::new(cfg) {
        failures.push(e.to_string());
    }
    Check::new("architecture arithmetic", failures, format!("RF table, LFPN start {}", TAP_NAMES[start]))
}

fn loss_vs_reference(seed: u64) -> Result<f64, String> {
    let mut rng = seeded_rng(seed);
    let grid = AnchorGrid::build(&standard_layers(), 64).map_err(|e| e.to_string())?;
    let cfg = PyramidAnchorConfig::default();
    let batch = 2;
    let labels = (0..batch)
        .map(|_| {
            let faces: Vec<BoxPx> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    let s = rng.gen_range(8.0..40.0);
                    BoxPx::new(rng.gen_range(0.0..64.0 - s), rng.gen_range(0.0..64.0 - s), s, s * rng.gen_range(0.8..1.2))
                })
                .collect();
            label_pyramid(&grid, &faces, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let heads: Vec<Tensor<f64>> = grid
        .layers
        .iter()
        .map(|ly| Tensor::from_fn(&[batch, HEAD_CHANNELS, ly.rows, ly.cols], |_| rng.gen_range(-2.0..2.0)))
        .collect();
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = heads.iter().map(|t| g.constant(t.clone())).collect();
    let got = pyramidbox_loss(&mut g, &vars, &grid, &labels, &cfg).map_err(|e| e.to_string())?;
    let on_graph = g.value(got.total).data()[0];
    let reference = oracle::reference_loss(&heads, &grid, &labels, &cfg);
    let err = (on_graph - reference).abs().max((got.total_value - reference).abs()) / reference.abs().max(1.0);
    Ok(err)
}

/// IoU, NMS, loss and AP against their reference implementations.
pub fn oracle_equivalences(trials: usize, seed: u64) -> Check {
    let mut rng = seeded_rng(seed);
    let mut failures = Vec::new();
    let mut iou_err = 0.0f64;
    for _ in 0..trials {
        let mut int_box = || {
            BoxPx::new(
                rng.gen_range(0..20) as f64,
                rng.gen_range(0..20) as f64,
                rng.gen_range(1..16) as f64,
                rng.gen_range(1..16) as f64,
            )
        };
        let (a, b) = (int_box(), int_box());
        iou_err = iou_err.max((iou(&a, &b) - oracle::raster_iou(&a, &b, 1)).abs());
    }
    if iou_err > 1e-9 {
        failures.push(format!("IoU vs raster {iou_err:.2e}"));
    }
    let mut nms_mismatch = 0;
    for _ in 0..trials {
        let dets: Vec<Detection> = (0..rng.gen_range(0..25))
            .map(|_| Detection::face(random_box(&mut rng, 60.0), (rng.gen_range(0..10) as f64) / 10.0))
            .collect();
        let thr = rng.gen_range(0.1..0.9);
        if nms(&dets, thr) != oracle::exhaustive_nms(&dets, thr) {
            nms_mismatch += 1;
        }
    }
    if nms_mismatch > 0 {
        failures.push(format!("NMS keep-set differs in {nms_mismatch} trials"));
    }
    let mut loss_err = 0.0f64;
    for s in 0..8 {
        match loss_vs_reference(seed.wrapping_add(s)) {
            Ok(e) => loss_err = loss_err.max(e),
            Err(e) => failures.push(format!("loss: {e}")),
        }
    }
    if !(loss_err < 1e-6) {
        failures.push(format!("loss vs reference {loss_err:.2e}"));
    }
    let gts = vec![vec![BoxPx::new(0.0, 0.0, 10.0, 10.0), BoxPx::new(50.0, 50.0, 10.0, 10.0)]];
    let dets = vec![vec![
        Detection::face(BoxPx::new(0.0, 0.0, 10.0, 10.0), 0.9),
        Detection::face(BoxPx::new(100.0, 100.0, 10.0, 10.0), 0.8),
        Detection::face(BoxPx::new(50.0, 50.0, 10.0, 10.0), 0.7),
    ]];
    match evaluate(&dets, &gts, 0.5) {
        Ok(r) => {
            let manual = oracle::manual_ap(&oracle::manual_curve(&dets, &gts, 0.5));
            // 1/2 + 1/3 rounds one ulp below the literal 5.0 / 6.0
            if (r.ap - 5.0 / 6.0).abs() > f64::EPSILON || manual != r.ap || average_precision(&r.curve) != r.ap {
                failures.push(format!("AP fixture {} (manual {manual})", r.ap));
            }
        }
        Err(e) => failures.push(e.to_string()),
    }
    let summary = format!("IoU err {iou_err:.1e}, NMS {trials} sets, loss rel err {loss_err:.1e}, AP fixture 5/6");
    Check::new("oracle equivalences", failures, summary)
}

const MALFORMED_ANNOTATIONS: [(&str, &str); 4] = [
    ("bad count", "a.ppm\nmany\n"),
    ("short block", "a.ppm\n2\n1 2 3 4\n"),
    ("non-numeric box", "a.ppm\n1\n1 2 x 4\n"),
    ("negative extent", "a.ppm\n1\n1 2 -3 4\n"),
];

/// Model and annotation round trips, and the error class and exit code of
/// malformed inputs.
pub fn serialization(seed: u64) -> Check {
    let mut failures = Vec::new();
    let net = Network::new(NetworkConfig::toy()).expect("toy config");
    let params = net.init_params::<f32>(&mut seeded_rng(seed));
    let bytes = encode_model(&params);
    match decode_model(&bytes) {
        Ok(back) if back.tensors.iter().zip(&params.tensors).all(|(a, b)| {
            a.0 == b.0 && a.1.shape() == b.1.shape() && a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }) && back.len() == params.len() => {}
        Ok(_) => failures.push("model round trip changed values".into()),
        Err(e) => failures.push(format!("model round trip: {e}")),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    if !matches!(decode_model(&bad), Err(FormatError::BadMagic { .. })) {
        failures.push("bad magic accepted".into());
    }
    if !matches!(decode_model(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated(_))) {
        failures.push("truncated model accepted".into());
    }
    let text = "img/0.ppm\n2\n1 2 30 40\n5.5 6 7 8\nimg/1.ppm\n0\n0 0 0 0 0 0 0 0 0 0\n";
    match parse_annotations(text) {
        Ok(blocks) if serialize_annotations(&blocks) == text => {}
        Ok(blocks) => failures.push(format!("annotation round trip gave {:?}", serialize_annotations(&blocks))),
        Err(e) => failures.push(format!("annotation parse: {e}")),
    }
    for (what, text) in MALFORMED_ANNOTATIONS {
        match parse_annotations(text) {
            Ok(_) => failures.push(format!("{what}: accepted")),
            Err(e) => {
                let code = AppError::format(std::path::Path::new("fixture"), e).exit_code();
                if code != 2 {
                    failures.push(format!("{what}: exit code {code}"));
                }
            }
        }
    }
    let img = pyrabox_core::image::Image::filled(3, 2, [1, 2, 3]);
    if decode_ppm(&encode_ppm(&img)).ok().as_ref() != Some(&img) {
        failures.push("PPM round trip".into());
    }
    if decode_ppm(b"P3\n1 1\n255\n0 0 0").is_ok() {
        failures.push("ASCII PPM accepted".into());
    }
    Check::new("serialization and parsing", failures, format!("{} tensors, {} malformed fixtures", params.len(), MALFORMED_ANNOTATIONS.len() + 3))
}

/// The fast checks, as run by `selftest`.
pub fn standard_suite(seed: u64) -> Vec<Check> {
    vec![
        gradients(seed..seed + 2),
        pyramid_labels(10_000, seed),
        context_targets(1_000, seed),
        das_numerics(10_000, seed),
        architecture(),
        oracle_equivalences(500, seed),
        serialization(seed),
    ]
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!("{:<width$}  {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail));
    }
    out
}
