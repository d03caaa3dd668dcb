use mipseg::metrics::count_components;
use mipseg::phantom::{generate, ground_truth, oracle_probabilities, OracleConfig, PhantomSpec};
use mipseg::projection::{back_project, mip_project, project_mask};
use mipseg::refine::{entropy_bits, mc_aggregate};
use mipseg::Axis;

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn generation_ignores_thread_count() {
    let spec = PhantomSpec::y_branch(32, 11);
    let one = in_pool(1, || generate(&spec).unwrap());
    let many = in_pool(8, || generate(&spec).unwrap());
    assert_eq!(one, many);
    let gt = one.1;
    let cfg = OracleConfig::default();
    assert_eq!(
        in_pool(1, || oracle_probabilities(&gt, &cfg).unwrap()),
        in_pool(8, || oracle_probabilities(&gt, &cfg).unwrap())
    );
}

#[test]
fn seeds_from_gt_projection_are_vessel_voxels() {
    for seed in 0..20 {
        let spec = PhantomSpec::random_tree(32, seed);
        let (v, gt) = generate(&spec).unwrap();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let mip = mip_project(&v, axis);
            let seeds = back_project(&project_mask(&gt, axis), &mip).unwrap();
            assert!(!seeds.is_empty());
            assert!(seeds.iter().all(|&s| *gt.at(s)), "seed {seed}, axis {axis}");
        }
    }
}

#[test]
fn ground_truth_is_the_within_radius_set() {
    let spec = PhantomSpec::straight_tube(15, 2.5, 2);
    let gt = ground_truth(&spec).unwrap();
    let d = gt.dims();
    for i in 0..d.len() {
        let [x, y, z] = d.coord(i);
        let r2 = (x as f64 - 7.0).powi(2) + (y as f64 - 7.0).powi(2);
        // Beyond the end caps the distance is to the end point.
        let dz = if z < 2 { 2.0 - z as f64 } else if z > 12 { z as f64 - 12.0 } else { 0.0 };
        assert_eq!(gt.data()[i], r2 + dz * dz <= 6.25, "voxel {:?}", [x, y, z]);
    }
}

#[test]
fn random_trees_are_single_components() {
    for seed in 0..10 {
        let gt = ground_truth(&PhantomSpec::random_tree(32, seed)).unwrap();
        assert_eq!(count_components(&gt), 1, "seed {seed}");
    }
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

#[test]
fn pass_disagreement_grows_with_noise() {
    let gt = ground_truth(&PhantomSpec::y_branch(24, 0)).unwrap();
    let n = gt.len();
    let mut last = (-1.0, -1.0);
    for std in [0.0, 0.1, 0.2, 0.3, 0.4] {
        let cfg = OracleConfig {
            pass_std: std,
            ..OracleConfig::default()
        };
        let (clean, passes) = oracle_probabilities(&gt, &cfg).unwrap();
        let agg = mc_aggregate(&clean, &passes).unwrap();
        // Predictive entropy of the pass mean, and its excess over the mean
        // per-pass entropy (the part due to disagreement between passes).
        let predictive = mean(agg.uncertainty.iter().copied(), n);
        let per_pass = mean(
            passes.iter().flat_map(|p| (0..n).map(move |i| entropy_bits(p.p_fg(i)))),
            n * passes.len(),
        );
        let disagreement = predictive - per_pass;
        assert!(predictive > last.0, "std {std}: predictive {predictive} <= {}", last.0);
        assert!(disagreement > last.1, "std {std}: disagreement {disagreement} <= {}", last.1);
        last = (predictive, disagreement);
    }
}

#[test]
fn small_noise_lowers_predictive_entropy() {
    // Entropy is concave, so near p = 0.9 a little symmetric noise lowers
    // the expected entropy of the mean before larger noise raises it.
    let gt = ground_truth(&PhantomSpec::y_branch(24, 0)).unwrap();
    let predictive = |std: f64| {
        let cfg = OracleConfig {
            pass_std: std,
            ..OracleConfig::default()
        };
        let (clean, passes) = oracle_probabilities(&gt, &cfg).unwrap();
        let agg = mc_aggregate(&clean, &passes).unwrap();
        mean(agg.uncertainty.iter().copied(), gt.len())
    };
    assert!(predictive(0.05) < predictive(0.0));
    assert!(predictive(0.2) > predictive(0.0));
}
