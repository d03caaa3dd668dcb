use mipseg::fusion::{dice_loss, downscale_index, feature_retrieve, loss_3d, loss_all, FeatureGrid3D};
use mipseg::projection::mip_project;
use mipseg::{Axis, Dims, Grid3, Spacing};
use proptest::prelude::*;

/// Relative error with a floor so gradients near zero are compared
/// absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

proptest! {
    #[test]
    fn gather_matches_brute_force(
        c in 1usize..4,
        (nx, ny, nz) in (1usize..7, 1usize..7, 1usize..7),
        seed in any::<u64>(),
        level in 0u32..3,
    ) {
        let f = 1usize << level;
        let d = Dims::new(nx * f, ny * f, nz * f);
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f32 / (1u64 << 31) as f32
        };
        let vol = Grid3::new(d, Spacing::default(), (0..d.len()).map(|_| next()).collect()).unwrap();
        let mip = mip_project(&vol, Axis::Z);
        let idx = downscale_index(&mip, level).unwrap();
        let fd = Dims::new(nx, ny, nz);
        let feats: Vec<f32> = (0..c * fd.len()).map(|_| next()).collect();
        let f3d = FeatureGrid3D::new(c, fd, feats.clone()).unwrap();
        let out = feature_retrieve(&f3d, &idx).unwrap();
        for ch in 0..c {
            for y in 0..ny {
                for x in 0..nx {
                    let k = (mip.index[(y * f) * d.nx + x * f] as usize / f).min(nz - 1);
                    let expected = feats[ch * fd.len() + (k * ny + y) * nx + x];
                    prop_assert_eq!(out.get(ch, x, y), expected);
                }
            }
        }
    }

    #[test]
    fn loss_3d_gradient_matches_finite_differences(
        p in proptest::collection::vec(0.05f64..0.95, 6..20),
        picks in proptest::collection::vec(0usize..3, 20),
    ) {
        let n = p.len();
        let sets: Vec<Vec<usize>> = (0..3).map(|s| (0..n).filter(|&i| picks[i] == s).collect()).collect();
        let l = loss_3d(&p, &sets[0], &sets[1], &sets[2]).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss_3d(&up, &sets[0], &sets[1], &sets[2]).unwrap().value
                - loss_3d(&down, &sets[0], &sets[1], &sets[2]).unwrap().value) / (2.0 * h);
            prop_assert!(rel_err(l.grad[i], fd) < 1e-4, "voxel {}: {} vs {}", i, l.grad[i], fd);
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences(
        p in proptest::collection::vec(0.0f64..1.0, 4..30),
        y in proptest::collection::vec(any::<bool>(), 30),
    ) {
        let y = &y[..p.len()];
        let l = dice_loss(&p, y).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (dice_loss(&up, y).unwrap().value - dice_loss(&down, y).unwrap().value) / (2.0 * h);
            prop_assert!(rel_err(l.grad[i], fd) < 1e-4, "pixel {}: {} vs {}", i, l.grad[i], fd);
        }
    }

    #[test]
    fn combined_loss_is_linear_in_lambda(l3 in 0.0f64..10.0, l2 in 0.0f64..2.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let at = |lambda| loss_all(l3, l2, lambda).unwrap();
        prop_assert!((at(a + b) - (at(a) + at(b) - at(0.0))).abs() < 1e-9);
        prop_assert_eq!(at(0.0), l3);
    }
}

#[test]
fn negative_or_nan_lambda_is_rejected() {
    assert!(loss_all(1.0, 1.0, -0.5).is_err());
    assert!(loss_all(1.0, 1.0, f64::NAN).is_err());
}
