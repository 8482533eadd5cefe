use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchdit::fusion::{patch_coords, Segment, TokenSequence};
use sketchdit::image::LUMA;
use sketchdit::physical::{
    cross_attend, patch_descriptor, phys_encode, phys_fuse, reference_summary, ConditionEncoder, CrossAttention,
    PhysHead, DESCRIPTOR_DIM, ORIENTATION_BINS,
};
use sketchdit::Error;
use sketchdit_tensor::gradcheck::gradient_check_params;
use sketchdit_tensor::{ParamStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gray patch `q×q` from a luminance function, as three equal channels.
fn gray(q: usize, f: impl Fn(usize, usize) -> f32) -> Vec<Vec<f32>> {
    let plane: Vec<f32> = (0..q * q).map(|i| f(i % q, i / q)).collect();
    vec![plane.clone(), plane.clone(), plane]
}

fn descriptor(p: &[Vec<f32>], q: usize) -> [f64; DESCRIPTOR_DIM] {
    patch_descriptor([&p[0], &p[1], &p[2]], q)
}

/// Pixel-loop histogram: angle in degrees, linear split between the two
/// bins whose centres bracket it.
fn histogram_oracle(lum: &[f64], q: usize) -> Vec<f64> {
    let px = |x: i64, y: i64| lum[(y.clamp(0, q as i64 - 1) * q as i64 + x.clamp(0, q as i64 - 1)) as usize];
    let mut h = vec![0.0; 8];
    for y in 0..q as i64 {
        for x in 0..q as i64 {
            let gx = (px(x + 1, y) - px(x - 1, y)) / 2.0;
            let gy = (px(x, y + 1) - px(x, y - 1)) / 2.0;
            let m = (gx * gx + gy * gy).sqrt();
            if m == 0.0 {
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 360.0;
            }
            let below = (deg / 45.0).floor();
            let w_above = deg / 45.0 - below;
            h[below as usize % 8] += m * (1.0 - w_above);
            h[(below as usize + 1) % 8] += m * w_above;
        }
    }
    h.iter().map(|v| v / (q * q) as f64).collect()
}

#[test]
fn constant_colour_has_no_gradient_mass() {
    let q = 8;
    let colour = [0.2f32, 0.5, 0.9];
    let p: Vec<Vec<f32>> = colour.iter().map(|&c| vec![c; q * q]).collect();
    let d = descriptor(&p, q);
    assert!(d[..ORIENTATION_BINS].iter().all(|&v| v == 0.0));
    let lum: f64 = (0..3).map(|c| LUMA[c] as f64 * colour[c] as f64).sum();
    assert!((d[8] - lum).abs() < 1e-12);
    assert!(d[9].abs() < 1e-12);
    for c in 0..3 {
        assert!((d[10 + c] - colour[c] as f64).abs() < 1e-7);
    }
}

#[test]
fn vertical_step_edge_lands_in_horizontal_bins() {
    let q = 8;
    let p = gray(q, |x, _| if x < 4 { 0.1 } else { 0.9 });
    let d = descriptor(&p, q);
    let lum: Vec<f64> = p[0].iter().map(|&v| v as f64 * LUMA.iter().map(|&l| l as f64).sum::<f64>()).collect();
    let oracle = histogram_oracle(&lum, q);
    for k in 0..8 {
        assert!((d[k] - oracle[k]).abs() < 1e-9, "bin {k}: {} vs {}", d[k], oracle[k]);
    }
    let horizontal = d[0] + d[4];
    let total: f64 = d[..8].iter().sum();
    assert!(total > 0.0);
    assert!((horizontal / total - 1.0).abs() < 1e-9);
    // Two columns per row see half the step each.
    let step: f64 = lum[4] - lum[3];
    assert!((d[0] - 8.0 * 2.0 * step / 2.0 / 64.0).abs() < 1e-9);
}

#[test]
fn random_patches_match_pixel_loop_oracle() {
    let q = 6;
    let mut r = rng(3);
    for _ in 0..10 {
        let t = Tensor::<f32>::rand_uniform(&[3, q * q], 0.0, 1.0, &mut r);
        let p: Vec<Vec<f32>> = (0..3).map(|c| t.data()[c * q * q..][..q * q].to_vec()).collect();
        let lum: Vec<f64> =
            (0..q * q).map(|i| (0..3).map(|c| LUMA[c] as f64 * p[c][i] as f64).sum()).collect();
        let d = descriptor(&p, q);
        for (k, o) in histogram_oracle(&lum, q).iter().enumerate() {
            assert!((d[k] - o).abs() < 1e-9);
        }
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lum.len() as f64).sqrt();
        assert!((d[8] - mean).abs() < 1e-9 && (d[9] - std).abs() < 1e-9);
    }
}

/// `out(x, y) = in(q-1-y, x)`
fn rotate_quarter(p: &[Vec<f32>], q: usize) -> Vec<Vec<f32>> {
    p.iter().map(|plane| (0..q * q).map(|i| plane[(i % q) * q + (q - 1 - i / q)]).collect()).collect()
}

#[test]
fn quarter_rotation_shifts_bins_by_two() {
    let q = 8;
    let mut r = rng(4);
    let t = Tensor::<f32>::rand_uniform(&[3, q * q], 0.0, 1.0, &mut r);
    let p: Vec<Vec<f32>> = (0..3).map(|c| t.data()[c * q * q..][..q * q].to_vec()).collect();
    let rot = rotate_quarter(&p, q);
    // Sanity check the rotation itself.
    for y in 0..q {
        for x in 0..q {
            assert_eq!(rot[0][y * q + x], p[0][x * q + (q - 1 - y)]);
        }
    }
    let a = descriptor(&p, q);
    let b = descriptor(&rot, q);
    for k in 0..8 {
        assert!((b[k] - a[(k + 2) % 8]).abs() < 1e-9, "bin {k}");
    }
    for k in 8..DESCRIPTOR_DIM {
        assert!((b[k] - a[k]).abs() < 1e-9);
    }
}

#[test]
fn encode_shapes_and_errors() {
    let refs = Tensor::<f32>::rand_uniform(&[2, 3, 3, 16, 24], 0.0, 1.0, &mut rng(5));
    let f = phys_encode(&refs, 8).unwrap();
    assert_eq!(f.shape(), &[2, 3 * 2 * 3, DESCRIPTOR_DIM]);
    assert_eq!(phys_encode(&refs, 8).unwrap(), f);
    assert!(matches!(phys_encode(&refs, 5), Err(Error::Dimension(_))));
    let s = reference_summary(&f, 3).unwrap();
    assert_eq!(s.shape(), &[2, 3, DESCRIPTOR_DIM]);
    assert!(reference_summary(&f, 4).is_err());
}

fn roll_right(refs: &Tensor<f32>, by: usize) -> Tensor<f32> {
    let w = *refs.shape().last().unwrap();
    Tensor::from_fn(refs.shape(), |i| {
        let (row, x) = (i / w, i % w);
        refs.data()[row * w + (x + w - by) % w]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn translation_by_patch_permutes_descriptors(seed in 0u64..1000, shift in 1usize..3) {
        let q = 4;
        let (ph, pw) = (3, 4);
        let refs = Tensor::<f32>::rand_uniform(&[1, 3, 2, ph * q, pw * q], 0.0, 1.0, &mut rng(seed));
        let a = phys_encode(&refs, q).unwrap();
        let b = phys_encode(&roll_right(&refs, shift * q), q).unwrap();
        for r in 0..2 {
            for py in 0..ph {
                for px in 0..pw {
                    let src = (r * ph + py) * pw + px;
                    let dst = (r * ph + py) * pw + (px + shift) % pw;
                    prop_assert_eq!(
                        &a.data()[src * DESCRIPTOR_DIM..][..DESCRIPTOR_DIM],
                        &b.data()[dst * DESCRIPTOR_DIM..][..DESCRIPTOR_DIM]
                    );
                }
            }
        }
    }
}

#[test]
fn head_shapes_zero_output_and_width_check() {
    let mut store = ParamStore::<f32>::new();
    let head = PhysHead::new(&mut store, "phys", 10, &mut rng(6));
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::rand_uniform(&[2, 7, DESCRIPTOR_DIM], 0.0, 1.0, &mut rng(7)));
    let y = head.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(y), &[2, 7, 10]);
    let zero = tape.constant(Tensor::zeros(&[1, 3, DESCRIPTOR_DIM]));
    let y0 = head.forward(&mut tape, zero).unwrap();
    assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    let wrong = tape.constant(Tensor::zeros(&[1, 3, DESCRIPTOR_DIM + 1]));
    assert!(matches!(head.forward(&mut tape, wrong), Err(Error::Dimension(_))));
}

#[test]
fn head_gradients_match_central_differences() {
    let mut store = ParamStore::<f64>::new();
    let head = PhysHead::new(&mut store, "phys", 6, &mut rng(8));
    let mut r = rng(9);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.5, &mut r)).unwrap();
    }
    let x = Tensor::<f64>::rand_uniform(&[1, 4, DESCRIPTOR_DIM], 0.0, 1.0, &mut r);
    let target = Tensor::<f64>::randn(&[1, 4, 6], 1.0, &mut r);
    let report = gradient_check_params(
        |tape| {
            let xv = tape.constant(x.clone());
            let y = head.forward(tape, xv).expect("head forward");
            let t = tape.constant(target.clone());
            Ok(tape.mse(y, t)?)
        },
        &store,
        1e-4,
        1,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, store.num_scalars());
}

#[test]
fn physical_tokens_append_without_coordinates() {
    let mut tape = Tape::<f32>::new();
    let noise = tape.constant(Tensor::randn(&[1, 8, 4], 1.0, &mut rng(10)));
    let refs = tape.constant(Tensor::randn(&[1, 2, 4], 1.0, &mut rng(11)));
    let mut seq = TokenSequence::unplaced(&tape, noise, Segment::Noise).unwrap();
    seq.coords = patch_coords([2, 2, 2]);
    let refs = TokenSequence::unplaced(&tape, refs, Segment::Reference).unwrap();
    let fused = seq.concat(&mut tape, refs).unwrap();

    let phys = Tensor::<f32>::randn(&[1, 5, 4], 1.0, &mut rng(12));
    let pv = tape.constant(phys.clone());
    let before = tape.value(fused.data).clone();
    let all = phys_fuse(&mut tape, fused.clone(), pv).unwrap();
    assert_eq!(all.len(), 8 + 2 + 5);
    assert_eq!(all.count(Segment::Physical), 5);
    assert!(all.coords[10..].iter().all(Option::is_none));
    let v = tape.value(all.data);
    assert_eq!(v.narrow(1, 0, 10).unwrap(), before);
    assert_eq!(v.narrow(1, 10, 5).unwrap(), phys);

    let none = tape.constant(Tensor::zeros(&[1, 0, 4]));
    let same = phys_fuse(&mut tape, fused.clone(), none).unwrap();
    assert_eq!(same.len(), 10);
    assert_eq!(tape.value(same.data), &before);

    let wide = tape.constant(Tensor::zeros(&[1, 2, 5]));
    assert!(matches!(phys_fuse(&mut tape, fused, wide), Err(Error::Dimension(_))));
}

#[test]
fn condition_bundle_contract() {
    let mut store = ParamStore::<f32>::new();
    let enc = ConditionEncoder::new(&mut store, "cond", 12, 6, &mut rng(13));
    let one = Tensor::<f32>::rand_uniform(&[1, 3, 1, 16, 16], 0.0, 1.0, &mut rng(14));
    let two = Tensor::concat(&[&one, &one], 2).unwrap();
    let summary = reference_summary(&phys_encode(&two, 8).unwrap(), 2).unwrap();

    let mut tape = Tape::with_params(&store);
    let s = tape.constant(summary.clone());
    let bundle = enc.forward(&mut tape, &[vec![]], Some(s)).unwrap();
    assert_eq!((bundle.text_len, bundle.visual_len), (0, 2));
    let tokens = tape.value(bundle.tokens.unwrap()).clone();
    assert_eq!(tokens.shape(), &[1, 2, 6]);
    assert_eq!(tokens.narrow(1, 0, 1).unwrap(), tokens.narrow(1, 1, 1).unwrap());

    let s = tape.constant(summary);
    let bundle = enc.forward(&mut tape, &[vec![3, 1, 4]], Some(s)).unwrap();
    let tokens = tape.value(bundle.tokens.unwrap()).clone();
    assert_eq!(tokens.shape(), &[1, 5, 6]);
    let table = store.get(enc.text.table);
    for (row, id) in [3usize, 1, 4].iter().enumerate() {
        assert_eq!(&tokens.data()[row * 6..][..6], &table.data()[id * 6..][..6]);
    }

    let nothing = enc.forward(&mut tape, &[vec![]], None).unwrap();
    assert!(nothing.tokens.is_none());
    assert!(matches!(enc.forward(&mut tape, &[vec![12]], None), Err(Error::Vocabulary(_))));
}

#[test]
fn cross_attention_mechanics() {
    let mut store = ParamStore::<f32>::new();
    let layer = CrossAttention::new(&mut store, "xattn", 8, 6, 2, &mut rng(15));
    let x = Tensor::<f32>::randn(&[2, 5, 8], 1.0, &mut rng(16));

    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let single = tape.constant(Tensor::randn(&[2, 1, 6], 1.0, &mut rng(17)));
    let (_, w) = layer.attend(&mut tape, xv, single).unwrap();
    assert!(tape.value(w).data().iter().all(|&v| v == 1.0));

    let many = tape.constant(Tensor::randn(&[2, 4, 6], 3.0, &mut rng(18)));
    let (delta, w) = layer.attend(&mut tape, xv, many).unwrap();
    assert_eq!(tape.shape(delta), &[2, 5, 8]);
    let w = tape.value(w);
    assert_eq!(w.shape(), &[2, 2, 5, 4]);
    for row in w.data().chunks(4) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    let seq = TokenSequence::unplaced(&tape, xv, Segment::Noise).unwrap();
    let bundle = sketchdit::physical::ConditionBundle { tokens: Some(many), text_len: 0, visual_len: 4 };
    let out = cross_attend(&mut tape, &layer, seq.clone(), &bundle).unwrap();
    assert_eq!(tape.shape(out.data), &[2, 5, 8]);
    assert_eq!(out.segments, seq.segments);
    let empty = sketchdit::physical::ConditionBundle { tokens: None, text_len: 0, visual_len: 0 };
    assert_eq!(cross_attend(&mut tape, &layer, seq, &empty).unwrap().data, xv);
}

#[test]
fn zero_key_value_projections_pass_tokens_through() {
    let mut store = ParamStore::<f32>::new();
    let layer = CrossAttention::new(&mut store, "xattn", 8, 6, 2, &mut rng(19));
    for lin in [layer.key, layer.value] {
        store.set(lin.weight, Tensor::zeros(&[6, 8])).unwrap();
        if let Some(b) = lin.bias {
            store.set(b, Tensor::zeros(&[8])).unwrap();
        }
    }
    let x = Tensor::<f32>::randn(&[1, 5, 8], 1.0, &mut rng(20));
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let c = tape.constant(Tensor::randn(&[1, 3, 6], 1.0, &mut rng(21)));
    let seq = TokenSequence::unplaced(&tape, xv, Segment::Noise).unwrap();
    let bundle = sketchdit::physical::ConditionBundle { tokens: Some(c), text_len: 0, visual_len: 3 };
    let out = cross_attend(&mut tape, &layer, seq, &bundle).unwrap();
    for (a, b) in tape.value(out.data).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}
