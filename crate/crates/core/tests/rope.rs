use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchdit::flow::MotionStats;
use sketchdit::rope::{apply_rope, build_rope, Coord, RopeConfig, RopeTable};
use sketchdit_tensor::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn at(axis: usize, p: usize) -> Coord {
    let mut c = [0; 3];
    c[axis] = p;
    Some(c)
}

fn rotate(v: &Tensor<f64>, c: Coord, table: &RopeTable) -> Vec<f64> {
    apply_rope(v, &[c], table).unwrap().into_data()
}

#[test]
fn zero_coordinates_are_identity() {
    let table = build_rope(MotionStats::new(0.6, 0.4, 0.9), [4, 4, 4], &RopeConfig::new(12)).unwrap();
    let x = Tensor::<f64>::randn(&[2, 3, 5, 12], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let y = apply_rope(&x, &[Some([0, 0, 0]); 5], &table).unwrap();
    assert_eq!(y, x);
    let z = apply_rope(&x, &[None; 5], &table).unwrap();
    assert_eq!(z, x);
}

#[test]
fn relative_position_identity_per_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stats in [MotionStats::default(), MotionStats::new(0.7, 0.3, 1.0)] {
        let table = build_rope(stats, [8, 8, 8], &RopeConfig::new(18)).unwrap();
        for axis in 0..3 {
            let q = Tensor::<f64>::randn(&[1, 1, 1, 18], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[1, 1, 1, 18], 1.0, &mut rng);
            for p1 in 0..8 {
                for p2 in 0..8 {
                    let lhs = dot(&rotate(&q, at(axis, p1), &table), &rotate(&k, at(axis, p2), &table));
                    let rhs = if p1 >= p2 {
                        dot(&rotate(&q, at(axis, p1 - p2), &table), k.data())
                    } else {
                        dot(q.data(), &rotate(&k, at(axis, p2 - p1), &table))
                    };
                    assert!((lhs - rhs).abs() < 1e-4, "axis {axis} ({p1},{p2}): {lhs} vs {rhs}");
                }
            }
        }
    }
}

#[test]
fn sign_changes_grow_with_motion() {
    let cfg = RopeConfig::new(36);
    let mut prev: Option<Vec<usize>> = None;
    for m in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let table = build_rope(MotionStats::new(m, m, m), [1, 64, 1], &cfg).unwrap();
        let h = &table.height;
        let counts: Vec<usize> = (0..h.half_dim)
            .map(|band| {
                (1..h.length).filter(|&p| (h.angle(p - 1, band).cos() > 0.0) != (h.angle(p, band).cos() > 0.0)).count()
            })
            .collect();
        if let Some(prev) = &prev {
            for (a, b) in prev.iter().zip(&counts) {
                assert!(b >= a);
            }
        }
        prev = Some(counts);
    }
}

#[test]
fn horizontal_motion_raises_width_frequency() {
    let table = build_rope(MotionStats::new(0.5, 0.2, 1.0), [2, 4, 4], &RopeConfig::new(36)).unwrap();
    assert!(table.width.freqs[0] > table.height.freqs[0]);
    assert!((table.width.freqs[0] - 1.3).abs() < 1e-12);
    assert!((table.height.freqs[0] - 1.06).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rotation_preserves_norm(seed in 0u64..10_000, t in 0usize..4, h in 0usize..6, w in 0usize..6, m in 0.0f64..=1.0) {
        let table = build_rope(MotionStats::new(m, m * 0.5, m), [4, 6, 6], &RopeConfig::new(24)).unwrap();
        let x = Tensor::<f32>::randn(&[1, 1, 1, 24], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = apply_rope(&x, &[Some([t, h, w])], &table).unwrap();
        let (nx, ny) = (x.sq_norm().sqrt(), y.sq_norm().sqrt());
        prop_assert!((nx - ny).abs() <= 1e-5 * nx.max(1.0));
    }

    #[test]
    fn angles_are_linear_in_position(m in 0.0f64..=1.0, len in 1usize..20) {
        let table = build_rope(MotionStats::new(m, m, m), [len, len, len], &RopeConfig::new(30)).unwrap();
        for axis in table.axes() {
            for band in 0..axis.half_dim {
                prop_assert_eq!(axis.angle(0, band), 0.0);
                for p in 0..len {
                    prop_assert_eq!(axis.angle(p, band), p as f64 * axis.freqs[band]);
                }
            }
        }
        let (d_t, d_h, d_w) = sketchdit::rope::split_dimensions(30).unwrap();
        prop_assert_eq!(table.time.half_dim + table.height.half_dim + table.width.half_dim, 15);
        prop_assert_eq!(d_t + d_h + d_w, 30);
    }
}
