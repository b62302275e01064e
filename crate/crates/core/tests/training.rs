use pyrabox_core::anchors::label_pyramid;
use pyrabox_core::geometry::iou;
use pyrabox_core::graph::Graph;
use pyrabox_core::image::batch_tensor;
use pyrabox_core::loss::pyramidbox_loss;
use pyrabox_core::network::{Network, NetworkConfig};
use pyrabox_core::sampling::{letterbox, TrainCrop};
use pyrabox_core::synthetic::{synthetic_dataset, SyntheticConfig};
use pyrabox_core::train::{detect, train_step, InferConfig, TrainConfig, TrainState};

fn small_net() -> Network {
    Network::new(NetworkConfig { input_size: 64, width_factor: 1.0 / 32.0, cpm_width: 8, ..NetworkConfig::toy() }).unwrap()
}

fn crops(n: usize, side: usize) -> Vec<TrainCrop> {
    let syn = SyntheticConfig { image_size: side, max_side: side / 2, ..SyntheticConfig::default() };
    synthetic_dataset(9, n, &syn).iter().map(|r| letterbox(r, side).0).collect()
}

#[test]
fn zero_rate_leaves_parameters() {
    let net = small_net();
    let grid = net.config.anchor_grid().unwrap();
    let mut state = TrainState::new(&net, 3);
    let before = state.params.clone();
    let cfg = TrainConfig { lr_schedule: vec![(10, 0.0)], batch_size: 2, ..TrainConfig::toy() };
    let batch = crops(2, 64);
    for _ in 0..3 {
        train_step(&net, &grid, &mut state, &cfg, &batch).unwrap();
    }
    assert_eq!(state.params, before);
    assert_eq!(state.step, 3);
    assert!(state.velocity.values().any(|v| v.data().iter().any(|&x| x != 0.0)));
}

/// SGD step on `batch` against gradients from one batched graph, which the
/// step never builds: it works image by image.
fn check_update(batch: &[TrainCrop], exact: bool) {
    let net = small_net();
    let grid = net.config.anchor_grid().unwrap();
    let mut state = TrainState::new(&net, 5);
    let (lr, wd) = (0.01f32, 0.1f32);
    let cfg = TrainConfig { lr_schedule: vec![(1, lr as f64)], momentum: 0.0, weight_decay: wd as f64, batch_size: batch.len(), ..TrainConfig::toy() };

    let labels: Vec<_> = batch.iter().map(|c| label_pyramid(&grid, &c.faces, &net.config.pyramid).unwrap()).collect();
    let mut g = Graph::<f32>::new();
    let pv = state.params.register(&mut g);
    let x = g.constant(batch_tensor(&batch.iter().map(|c| &c.image).collect::<Vec<_>>()).unwrap());
    let heads = net.forward(&mut g, &pv, x).unwrap();
    let loss = pyramidbox_loss(&mut g, &heads, &grid, &labels, &net.config.pyramid).unwrap();
    g.backward(loss.total).unwrap();

    let before = state.params.clone();
    let report = train_step(&net, &grid, &mut state, &cfg, batch).unwrap();
    assert!((report.loss - loss.total_value).abs() <= 1e-6 * loss.total_value.abs());
    for (name, var) in &pv.vars {
        let theta = before.get(name).unwrap().data();
        let after = state.params.get(name).unwrap().data();
        let grad = g.grad(*var);
        for i in 0..theta.len() {
            let gi = grad.as_ref().map_or(0.0, |t| t.data()[i]);
            let expect = theta[i] - lr * (gi + wd * theta[i]);
            if exact {
                assert_eq!(after[i], expect, "{name}[{i}]");
            } else {
                let tol = 1e-6 + 1e-4 * lr * gi.abs();
                assert!((after[i] - expect).abs() <= tol, "{name}[{i}]: {} vs {expect}", after[i]);
            }
        }
    }
}

#[test]
fn update_is_gradient_plus_decay() {
    check_update(&crops(1, 64), true);
}

#[test]
fn batch_update_is_mean_gradient() {
    check_update(&crops(3, 64), false);
}

#[test]
fn thread_count_does_not_change_update() {
    let net = small_net();
    let grid = net.config.anchor_grid().unwrap();
    let batch = crops(3, 64);
    let run = |threads| {
        let mut state = TrainState::new(&net, 8);
        let cfg = TrainConfig { batch_size: 3, threads, ..TrainConfig::toy() };
        for _ in 0..2 {
            train_step(&net, &grid, &mut state, &cfg, &batch).unwrap();
        }
        state.params
    };
    let one = run(1);
    assert_eq!(run(2), one);
    assert_eq!(run(3), one);
}

#[test]
fn single_image_overfits() {
    let net = Network::new(NetworkConfig::toy()).unwrap();
    let grid = net.config.anchor_grid().unwrap();
    let rec = synthetic_dataset(21, 1, &SyntheticConfig::default()).remove(0);
    let crop = letterbox(&rec, 160).0;
    let cfg = TrainConfig { batch_size: 1, ..TrainConfig::toy() };
    let mut state = TrainState::new(&net, 21);
    let mut losses = Vec::new();
    for _ in 0..500 {
        losses.push(train_step(&net, &grid, &mut state, &cfg, std::slice::from_ref(&crop)).unwrap().loss);
    }
    assert!(losses[499] * 10.0 <= losses[9], "loss {} at step 10, {} at step 500", losses[9], losses[499]);
    let dets = detect(&net, &grid, &state.params, &rec.image, &InferConfig::default()).unwrap();
    assert!(
        dets.iter().any(|d| rec.faces.iter().any(|f| iou(&d.bbox, f) > 0.5)),
        "no detection overlaps {:?}",
        rec.faces
    );
}
