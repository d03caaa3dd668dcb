use mipseg::refine::{entropy_bits, mc_aggregate, refine_round, RefineConfig, RefineInputs};
use mipseg::{Dims, Grid3, Label, LabelVolume, ProbabilityVolume, ScalarVolume, Spacing};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Case {
    dims: Dims,
    labels: Vec<Label>,
    conflicts: Vec<usize>,
    volume: Vec<f32>,
    clean: Vec<f32>,
    passes: Vec<Vec<f32>>,
    v_ave: f64,
    disable_priors: bool,
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..5, 2usize..5, 1usize..4).prop_flat_map(|(x, y, z)| {
        let d = Dims::new(x, y, z);
        let n = d.len();
        // Probabilities on a coarse grid so ties in margins and thresholds occur.
        let prob = || proptest::collection::vec((0u8..=20).prop_map(|k| k as f32 / 20.0), n);
        (
            proptest::collection::vec(0u8..4, n),
            proptest::collection::vec(0.0f32..1.0, n),
            prob(),
            proptest::collection::vec(prob(), 6),
            0.3f64..0.9,
            any::<bool>(),
        )
            .prop_map(move |(codes, volume, clean, passes, v_ave, disable_priors)| {
                // Code 3 marks a conflict voxel (unlabeled, claimed by both).
                let mut labels: Vec<Label> = codes
                    .iter()
                    .map(|&c| match c {
                        0 => Label::Background,
                        1 => Label::Foreground,
                        _ => Label::Unlabeled,
                    })
                    .collect();
                labels[0] = Label::Background;
                labels[1] = Label::Foreground;
                let conflicts = (0..n).filter(|&i| codes[i] == 3 && i > 1).collect();
                Case { dims: d, labels, conflicts, volume, clean, passes, v_ave, disable_priors }
            })
    })
}

fn argmax(p: f64) -> usize {
    usize::from(p >= 0.5)
}

fn pclass(p: f64, c: usize) -> f64 {
    if c == 1 { p } else { 1.0 - p }
}

/// Straight transcription of one refinement round over plain vectors.
fn reference(c: &Case, cfg: &RefineConfig) -> Vec<Label> {
    let n = c.dims.len();
    let p: Vec<f64> = c.clean.iter().map(|&v| v as f64).collect();
    let mut s = [vec![false; n], vec![false; n]];
    for i in 0..n {
        match c.labels[i] {
            Label::Background => s[0][i] = true,
            Label::Foreground => s[1][i] = true,
            Label::Unlabeled => {}
        }
    }
    for &k in &c.conflicts {
        s[0][k] = true;
        s[1][k] = true;
    }
    let labeled: Vec<bool> = (0..n).map(|i| s[0][i] || s[1][i]).collect();

    let t: Vec<f64> = (0..2)
        .map(|i| {
            let m: Vec<f64> = (0..n).filter(|&v| s[i][v]).map(|v| pclass(p[v], i)).collect();
            m.iter().sum::<f64>() / m.len() as f64
        })
        .collect();
    let latent: Vec<Vec<bool>> = (0..2)
        .map(|j| (0..n).map(|v| labeled[v] && argmax(p[v]) == j && pclass(p[v], j) > t[j]).collect())
        .collect();
    let mut cm = [[0usize; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cm[i][j] = (0..n).filter(|&v| s[i][v] && latent[j][v]).count();
        }
    }
    let both: Vec<bool> = (0..n).map(|v| s[0][v] && s[1][v]).collect();
    let mut removed = [both.clone(), both.clone()];
    if cm.iter().flatten().any(|&k| k > 0) {
        let size = [0, 1].map(|i| s[i].iter().filter(|&&b| b).count() as f64);
        let mut ct = [[0.0; 2]; 2];
        for i in 0..2 {
            let row = (cm[i][0] + cm[i][1]) as f64;
            if row > 0.0 {
                for j in 0..2 {
                    ct[i][j] = cm[i][j] as f64 / row * size[i];
                }
            }
        }
        let total: f64 = ct.iter().flatten().sum();
        let omega_l = labeled.iter().filter(|&&b| b).count() as f64;
        for i in 0..2 {
            let quota = (omega_l * ct[i][1 - i] / total + 1e-9).floor() as usize;
            let mut cand: Vec<usize> = (0..n).filter(|&v| s[i][v] && latent[1 - i][v]).collect();
            cand.sort_by(|&a, &b| {
                let ma = pclass(p[a], 1 - i) - pclass(p[a], i);
                let mb = pclass(p[b], 1 - i) - pclass(p[b], i);
                mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
            });
            for &v in cand.iter().take(quota) {
                removed[i][v] = true;
            }
        }
    }

    let dist_fg = |v: usize| -> f64 {
        let a = c.dims.coord(v);
        (0..n)
            .filter(|&w| s[1][w])
            .map(|w| {
                let b = c.dims.coord(w);
                (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let prior = |v: usize, class: usize, eps: f64, dth: f64| -> bool {
        if cfg.disable_priors {
            return true;
        }
        if class == 0 {
            (c.volume[v] as f64) < eps * c.v_ave
        } else {
            dist_fg(v) < dth
        }
    };
    let add1: Vec<Vec<bool>> = (0..2)
        .map(|i| (0..n).map(|v| removed[1 - i][v] && !removed[i][v] && prior(v, i, cfg.eps1, cfg.d_th1)).collect())
        .collect();

    let mean: Vec<f64> = (0..n)
        .map(|v| c.passes.iter().map(|q| q[v] as f64).sum::<f64>() / c.passes.len() as f64)
        .collect();
    let u: Vec<f64> = mean
        .iter()
        .map(|&m| {
            let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
            h(m) + h(1.0 - m)
        })
        .collect();
    let agree = |v: usize, i: usize| !labeled[v] && argmax(p[v]) == i && argmax(mean[v]) == i;
    let add2: Vec<Vec<bool>> = (0..2)
        .map(|i| {
            let members: Vec<usize> = (0..n).filter(|&v| agree(v, i)).collect();
            if members.is_empty() {
                return vec![false; n];
            }
            let ua = members.iter().map(|&v| u[v]).sum::<f64>() / members.len() as f64;
            (0..n).map(|v| agree(v, i) && u[v] < ua && prior(v, i, cfg.eps2, cfg.d_th2)).collect()
        })
        .collect();

    (0..n)
        .map(|v| {
            let member = |i: usize| ((s[i][v] || add1[i][v]) && !removed[i][v]) || add2[i][v];
            match (member(0), member(1)) {
                (false, true) => Label::Foreground,
                (true, false) => Label::Background,
                (false, false) => Label::Unlabeled,
                (true, true) => panic!("reference produced overlapping sets"),
            }
        })
        .collect()
}

fn grid<T>(d: Dims, v: Vec<T>) -> Grid3<T> {
    Grid3::new(d, Spacing::default(), v).unwrap()
}

fn prob(d: Dims, v: Vec<f32>) -> ProbabilityVolume {
    ProbabilityVolume::new(grid(d, v)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn refine_round_matches_reference(c in case()) {
        let cfg = RefineConfig { disable_priors: c.disable_priors, ..RefineConfig::default() };
        let labels: LabelVolume = grid(c.dims, c.labels.clone());
        let volume: ScalarVolume = grid(c.dims, c.volume.clone());
        let clean = prob(c.dims, c.clean.clone());
        let passes: Vec<_> = c.passes.iter().map(|p| prob(c.dims, p.clone())).collect();
        let inputs = RefineInputs {
            labels: &labels,
            conflicts: &c.conflicts,
            volume: &volume,
            clean: &clean,
            passes: &passes,
            v_ave: c.v_ave,
        };
        let (out, report) = refine_round(&inputs, &cfg).unwrap();
        prop_assert_eq!(out.data(), &reference(&c, &cfg)[..]);
        prop_assert_eq!(report.counts_after, out.class_counts());
        prop_assert_eq!(report.conflicts, c.conflicts.len());
    }

    #[test]
    fn mc_entropy_is_entropy_of_the_mean(ps in proptest::collection::vec(0.0f32..=1.0, 2..9)) {
        let d = Dims::new(1, 1, 1);
        let clean = prob(d, vec![0.5]);
        let passes: Vec<_> = ps.iter().map(|&p| prob(d, vec![p])).collect();
        let agg = mc_aggregate(&clean, &passes).unwrap();
        let m = ps.iter().map(|&p| p as f64).sum::<f64>() / ps.len() as f64;
        prop_assert!((agg.mean[0] - m).abs() < 1e-12);
        prop_assert!((agg.uncertainty[0] - entropy_bits(m)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&agg.uncertainty[0]));
    }
}

#[test]
fn entropy_edges_and_monotonicity() {
    assert_eq!(entropy_bits(0.5), 1.0);
    assert_eq!(entropy_bits(0.0), 0.0);
    assert_eq!(entropy_bits(1.0), 0.0);
    let grid: Vec<f64> = (0..=500).map(|k| k as f64 / 1000.0).collect();
    for w in grid.windows(2) {
        // Moving toward 0.5 from below raises entropy; the mirror image holds.
        assert!(entropy_bits(w[1]) > entropy_bits(w[0]));
        assert!(entropy_bits(1.0 - w[1]) > entropy_bits(1.0 - w[0]));
        assert!((entropy_bits(w[0]) - entropy_bits(1.0 - w[0])).abs() < 1e-12);
    }
}

#[test]
fn consistent_labels_are_a_fixed_point() {
    let d = Dims::new(4, 4, 2);
    let labels: Vec<Label> = (0..d.len()).map(|i| if i % 3 == 0 { Label::Foreground } else { Label::Background }).collect();
    let clean: Vec<f32> = labels.iter().map(|&l| if l == Label::Foreground { 0.9 } else { 0.1 }).collect();
    let labels = grid(d, labels);
    let volume = grid(d, clean.iter().map(|&p| p * 0.8).collect());
    let clean = prob(d, clean);
    let passes = vec![clean.clone(); 6];
    let inputs = RefineInputs {
        labels: &labels,
        conflicts: &[],
        volume: &volume,
        clean: &clean,
        passes: &passes,
        v_ave: 0.72,
    };
    let (out, report) = refine_round(&inputs, &RefineConfig::default()).unwrap();
    assert_eq!(out, labels);
    assert_eq!(report.quota, [0, 0]);
}
