use std::collections::BTreeMap;

use proptest::prelude::*;
use pyrabox::formats::annotations::{parse_annotations, serialize_annotations, Annotation};
use pyrabox::formats::model::{decode_model, encode_model};
use pyrabox::formats::ppm::{decode_ppm, encode_ppm};
use pyrabox::formats::{format_detections, parse_detections, DetectionLine};
use pyrabox::FormatError;
use pyrabox_core::image::Image;
use pyrabox_core::network::ModelParams;
use pyrabox_core::{BoxPx, Detection, Tensor};

fn arb_face() -> impl Strategy<Value = BoxPx> {
    (0u32..2000, 0u32..2000, 1u32..500, 1u32..500, 0u8..4)
        .prop_map(|(x, y, w, h, q)| BoxPx::new(x as f64 / 4.0, y as f64, w as f64 + q as f64 * 0.25, h as f64))
}

fn arb_block() -> impl Strategy<Value = Annotation> {
    ("[a-z0-9_/]{1,12}\\.ppm", prop::collection::vec(arb_face(), 0..5))
        .prop_map(|(path, faces)| Annotation { path, faces })
}

proptest! {
    #[test]
    fn annotation_round_trip(blocks in prop::collection::vec(arb_block(), 0..6)) {
        let text = serialize_annotations(&blocks);
        let back = parse_annotations(&text).unwrap();
        prop_assert_eq!(&back, &blocks);
        prop_assert_eq!(serialize_annotations(&back), text);
    }

    #[test]
    fn model_round_trip_bit_exact(raw in prop::collection::vec((prop::collection::vec(1usize..4, 1..4), any::<u32>()), 1..6)) {
        let mut tensors = BTreeMap::new();
        for (i, (shape, seed)) in raw.into_iter().enumerate() {
            let mut s = seed;
            let t = Tensor::from_fn(&shape, |_| {
                s = s.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                f32::from_bits(s & 0xBF7F_FFFF)
            });
            tensors.insert(format!("layer{i}.weight"), t);
        }
        let p = ModelParams { tensors };
        let bytes = encode_model(&p);
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn ppm_round_trip(w in 1usize..9, h in 1usize..9, fill in any::<u8>()) {
        let data = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(fill)).collect();
        let img = Image::new(w, h, data).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }
}

#[test]
fn malformed_model_classes() {
    let mut tensors = BTreeMap::new();
    tensors.insert("w".to_string(), Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap());
    let bytes = encode_model(&ModelParams { tensors });
    assert!(matches!(decode_model(b"GIF8aaaa"), Err(FormatError::BadMagic { .. })));
    assert!(matches!(decode_model(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_model(&extra), Err(FormatError::Invalid(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_model(&version), Err(FormatError::Invalid(_))));
}

#[test]
fn malformed_ppm_classes() {
    assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(FormatError::BadMagic { .. })));
    assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(FormatError::Truncated(_))));
    assert!(decode_ppm(b"P6\n2 x\n255\n").is_err());
}

#[test]
fn detection_lines_keep_six_decimals() {
    let lines = vec![
        DetectionLine { path: "x/1.ppm".into(), det: Detection::face(BoxPx::new(0.0, 1.0, 2.0, 3.0), 0.1234567) },
        DetectionLine { path: "x/2.ppm".into(), det: Detection::face(BoxPx::new(4.5, 5.0, 6.0, 7.0), 1.0) },
    ];
    let text = format_detections(&lines);
    assert_eq!(text, "x/1.ppm 0 1 2 3 0.123457\nx/2.ppm 4.5 5 6 7 1.000000\n");
    let back = parse_detections(&text).unwrap();
    assert_eq!(back[1], lines[1]);
    assert!(matches!(parse_detections("a 1 2 3 4 x\n"), Err(FormatError::Line { line: 1, .. })));
}
