//! One round of pseudo-label refinement.
//!
//! Labeled voxels are cleaned with confident learning: model confidences
//! estimate the latent class of every labeled voxel, a 2x2 joint
//! distribution between given and latent labels sets how many voxels per
//! class are presumed mislabeled, and those with the largest confidence
//! margin against their label are removed (prune by noise rate). Removed
//! voxels that satisfy an intensity or distance prior switch class.
//!
//! Unlabeled voxels are filled from several stochastic prediction passes:
//! voxels whose clean and averaged predictions agree and whose predictive
//! entropy is below the class mean gain that class, again subject to a
//! prior.
//!
//! The networks producing the probabilities are external; this module only
//! consumes their outputs.

use serde::{Deserialize, Serialize};

use crate::edt::distance_to_set;
use crate::error::{Error, Result};
use crate::volume::{argmax_class, BinaryVolume, Grid3, Label, LabelVolume, ProbabilityVolume, ScalarVolume};

/// Tolerance added before flooring the removal quota so that quotas which
/// are integral in exact arithmetic do not lose one to rounding.
const QUOTA_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Number of stochastic passes expected.
    pub k: usize,
    /// Std of the input perturbation used by whoever produces the passes.
    pub sigma: f64,
    pub mu: f64,
    /// Distance prior (voxels) for labeled voxels switching to foreground.
    pub d_th1: f64,
    /// Distance prior (voxels) for unlabeled voxels gaining foreground.
    pub d_th2: f64,
    /// Intensity prior (x `v_ave`) for labeled voxels switching to background.
    pub eps1: f64,
    /// Intensity prior (x `v_ave`) for unlabeled voxels gaining background.
    pub eps2: f64,
    /// Treat every prior threshold as infinite.
    pub disable_priors: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            k: 6,
            sigma: 0.1,
            mu: 0.0,
            d_th1: 1.5,
            d_th2: 4.0,
            eps1: 0.7,
            eps2: 0.2,
            disable_priors: false,
        }
    }
}

impl RefineConfig {
    /// Defaults with priors disabled, for label sets with many thin or
    /// spurious vessels.
    pub fn tubetk() -> Self {
        RefineConfig {
            disable_priors: true,
            ..RefineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad noise parameters mu={} sigma={}", self.mu, self.sigma)));
        }
        if !self.disable_priors {
            for (name, v) in [
                ("d_th1", self.d_th1),
                ("d_th2", self.d_th2),
                ("eps1", self.eps1),
                ("eps2", self.eps2),
            ] {
                if !(v > 0.0) {
                    return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// The given labels as two possibly overlapping sets over the volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSets {
    pub background: BinaryVolume,
    pub foreground: BinaryVolume,
}

impl LabelSets {
    /// Conflict voxels (claimed by both classes but stored as unlabeled)
    /// are put back into both sets.
    pub fn from_labels(labels: &LabelVolume, conflicts: &[usize]) -> Result<Self> {
        let mut background = labels.mask_of(Label::Background);
        let mut foreground = labels.mask_of(Label::Foreground);
        for &c in conflicts {
            if c >= labels.len() {
                return Err(Error::IndexOutOfRange {
                    value: c,
                    limit: labels.len(),
                });
            }
            if labels.data()[c] != Label::Unlabeled {
                return Err(Error::InvalidGrid(format!("conflict voxel {c} is not unlabeled")));
            }
            background.data_mut()[c] = true;
            foreground.data_mut()[c] = true;
        }
        Ok(LabelSets { background, foreground })
    }

    pub fn class(&self, i: usize) -> &BinaryVolume {
        if i == 1 {
            &self.foreground
        } else {
            &self.background
        }
    }

    #[inline]
    pub fn is_labeled(&self, idx: usize) -> bool {
        self.background.data()[idx] || self.foreground.data()[idx]
    }

    pub fn labeled_count(&self) -> usize {
        (0..self.background.len()).filter(|&i| self.is_labeled(i)).count()
    }
}

/// Estimated latent sets and per-class average self-confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSets {
    pub threshold: [f64; 2],
    pub background: BinaryVolume,
    pub foreground: BinaryVolume,
}

impl LatentSets {
    pub fn class(&self, i: usize) -> &BinaryVolume {
        if i == 1 {
            &self.foreground
        } else {
            &self.background
        }
    }
}

const CLASS_NAMES: [&str; 2] = ["background", "foreground"];

/// Labeled voxels whose predicted class is `i` with confidence strictly
/// above the mean confidence of the voxels labeled `i`.
pub fn latent_sets(sets: &LabelSets, p: &ProbabilityVolume) -> Result<LatentSets> {
    if sets.foreground.dims() != p.dims() {
        return Err(Error::dims(sets.foreground.dims(), p.dims()));
    }
    let mut threshold = [0.0; 2];
    for (i, t) in threshold.iter_mut().enumerate() {
        let members = sets.class(i).data();
        let (sum, n) = members
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .fold((0.0f64, 0usize), |(s, n), (idx, _)| (s + p.p_class(idx, i), n + 1));
        if n == 0 {
            return Err(Error::EmptyClass(CLASS_NAMES[i]));
        }
        *t = sum / n as f64;
    }
    let n = p.dims().len();
    let mut latent = [vec![false; n], vec![false; n]];
    for idx in 0..n {
        if !sets.is_labeled(idx) {
            continue;
        }
        let c = argmax_class(p.p_fg(idx));
        if p.p_class(idx, c) > threshold[c] {
            latent[c][idx] = true;
        }
    }
    let [bg, fg] = latent;
    let like = &sets.foreground;
    Ok(LatentSets {
        threshold,
        background: Grid3::new(like.dims(), like.spacing(), bg)?,
        foreground: Grid3::new(like.dims(), like.spacing(), fg)?,
    })
}

/// Confident-learning statistics for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClState {
    /// Average self-confidence per class.
    pub threshold: [f64; 2],
    /// `|S_i ∩ S*_j|`.
    pub intersections: [[usize; 2]; 2],
    /// Rows rescaled to the labeled class sizes.
    pub count_matrix: [[f64; 2]; 2],
    /// Count matrix normalized to sum 1.
    pub joint: [[f64; 2]; 2],
    /// `|Ω_L|`, the number of labeled voxels.
    pub labeled: usize,
    /// Voxels to remove per labeled class.
    pub quota: [usize; 2],
}

pub fn count_and_joint(sets: &LabelSets, latent: &LatentSets) -> Result<ClState> {
    let mut intersections = [[0usize; 2]; 2];
    let mut class_size = [0usize; 2];
    for i in 0..2 {
        let given = sets.class(i).data();
        class_size[i] = given.iter().filter(|&&b| b).count();
        for j in 0..2 {
            let lat = latent.class(j).data();
            intersections[i][j] = given.iter().zip(lat).filter(|(&g, &l)| g && l).count();
        }
    }
    if intersections.iter().flatten().all(|&c| c == 0) {
        return Err(Error::DegenerateCl);
    }
    let mut count_matrix = [[0.0; 2]; 2];
    for i in 0..2 {
        let row: usize = intersections[i].iter().sum();
        if row == 0 {
            continue;
        }
        for j in 0..2 {
            count_matrix[i][j] = intersections[i][j] as f64 / row as f64 * class_size[i] as f64;
        }
    }
    let total: f64 = count_matrix.iter().flatten().sum();
    let mut joint = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            joint[i][j] = count_matrix[i][j] / total;
        }
    }
    let labeled = sets.labeled_count();
    let quota = [0, 1].map(|i| (labeled as f64 * joint[i][1 - i] + QUOTA_EPS).floor() as usize);
    Ok(ClState {
        threshold: latent.threshold,
        intersections,
        count_matrix,
        joint,
        labeled,
        quota,
    })
}

/// Indices of the `quota` candidates with the largest margin; equal margins
/// are taken in ascending index order.
pub fn select_top_margins(candidates: &[(usize, f64)], quota: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = sorted.into_iter().take(quota).map(|(i, _)| i).collect();
    out.sort_unstable();
    out
}

/// Voxels removed from each labeled class.
#[derive(Clone, Debug, PartialEq)]
pub struct Removals {
    pub background: BinaryVolume,
    pub foreground: BinaryVolume,
    /// Of which claimed by both classes.
    pub conflicts: usize,
}

impl Removals {
    pub fn class(&self, i: usize) -> &BinaryVolume {
        if i == 1 {
            &self.foreground
        } else {
            &self.background
        }
    }

    fn conflicts_only(sets: &LabelSets) -> Removals {
        let both = sets
            .foreground
            .data()
            .iter()
            .zip(sets.background.data())
            .map(|(&a, &b)| a && b)
            .collect::<Vec<_>>();
        let conflicts = both.iter().filter(|&&b| b).count();
        let like = &sets.foreground;
        let mask = Grid3::new(like.dims(), like.spacing(), both).expect("same dims");
        Removals {
            background: mask.clone(),
            foreground: mask,
            conflicts,
        }
    }
}

/// Prune by noise rate: for each class `i`, remove the `quota[i]` voxels of
/// `S_i ∩ S*_{1-i}` with the largest margin `p(1-i) - p(i)`, plus every
/// voxel labeled with both classes.
pub fn pbnr_remove(sets: &LabelSets, latent: &LatentSets, p: &ProbabilityVolume, state: &ClState) -> Removals {
    let mut out = Removals::conflicts_only(sets);
    for i in 0..2 {
        let given = sets.class(i).data();
        let other = latent.class(1 - i).data();
        let candidates: Vec<(usize, f64)> = (0..given.len())
            .filter(|&idx| given[idx] && other[idx])
            .map(|idx| (idx, p.p_class(idx, 1 - i) - p.p_class(idx, i)))
            .collect();
        let target = if i == 1 { &mut out.foreground } else { &mut out.background };
        for idx in select_top_margins(&candidates, state.quota[i]) {
            target.data_mut()[idx] = true;
        }
    }
    out
}

/// Inputs of the class-switch priors.
#[derive(Clone, Debug)]
pub struct PriorContext<'a> {
    pub volume: &'a ScalarVolume,
    pub v_ave: f64,
    /// Distance (voxels) to the labeled foreground; `None` when priors are off.
    pub dist_to_fg: Option<Vec<f64>>,
    pub disable: bool,
}

impl<'a> PriorContext<'a> {
    pub fn new(volume: &'a ScalarVolume, foreground: &BinaryVolume, v_ave: f64, cfg: &RefineConfig) -> Result<Self> {
        if cfg.disable_priors {
            return Ok(PriorContext {
                volume,
                v_ave,
                dist_to_fg: None,
                disable: true,
            });
        }
        if !v_ave.is_finite() {
            return Err(Error::InvalidConfig(format!("v_ave must be finite, got {v_ave}")));
        }
        volume.ensure_same_dims(foreground)?;
        Ok(PriorContext {
            volume,
            v_ave,
            dist_to_fg: Some(distance_to_set(foreground)?),
            disable: false,
        })
    }

    /// Whether voxel `idx` may join class `i` under the given thresholds.
    #[inline]
    pub fn admits(&self, idx: usize, class: usize, eps: f64, d_th: f64) -> bool {
        if self.disable {
            return true;
        }
        if class == 0 {
            (self.volume.data()[idx] as f64) < eps * self.v_ave
        } else {
            self.dist_to_fg.as_ref().is_some_and(|d| d[idx] < d_th)
        }
    }
}

/// Class switches for removed voxels: a voxel removed from class `1-i` joins
/// class `i` if it satisfies the class-`i` prior. Voxels removed from both
/// classes (conflicts) switch to neither.
pub fn cl_add(removals: &Removals, priors: &PriorContext<'_>, cfg: &RefineConfig) -> [BinaryVolume; 2] {
    [0, 1].map(|i| {
        let removed = removals.class(1 - i);
        let kept = removals.class(i).data();
        let bits = removed
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &r)| r && !kept[idx] && priors.admits(idx, i, cfg.eps1, cfg.d_th1))
            .collect();
        Grid3::new(removed.dims(), removed.spacing(), bits).expect("same dims")
    })
}

/// Binary entropy in bits of foreground probability `m`; `0 log 0 = 0`.
#[inline]
pub fn entropy_bits(m: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    term(m) + term(1.0 - m)
}

/// Mean of the stochastic passes and the per-voxel predictive entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct McAggregate {
    pub mean: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl McAggregate {
    pub fn mean_volume(&self, like: &ProbabilityVolume) -> ProbabilityVolume {
        let g = like.grid();
        let data = self.mean.iter().map(|&m| (m as f32).clamp(0.0, 1.0)).collect();
        ProbabilityVolume::new(Grid3::new(g.dims(), g.spacing(), data).expect("same dims")).expect("in range")
    }
}

pub fn mc_aggregate(clean: &ProbabilityVolume, passes: &[ProbabilityVolume]) -> Result<McAggregate> {
    if passes.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 passes, got {}", passes.len())));
    }
    for p in passes {
        if p.dims() != clean.dims() {
            return Err(Error::dims(clean.dims(), p.dims()));
        }
    }
    let k = passes.len() as f64;
    let n = clean.dims().len();
    let mean: Vec<f64> = (0..n)
        .map(|i| passes.iter().map(|p| p.p_fg(i)).sum::<f64>() / k)
        .collect();
    let uncertainty = mean.iter().map(|&m| entropy_bits(m)).collect();
    Ok(McAggregate { mean, uncertainty })
}

/// Additions to the unlabeled region from agreeing low-entropy voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct UeAdds {
    pub add: [BinaryVolume; 2],
    /// Mean entropy of agreeing unlabeled voxels per class, if any agree.
    pub u_ave: [Option<f64>; 2],
}

pub fn ue_add(
    sets: &LabelSets,
    clean: &ProbabilityVolume,
    agg: &McAggregate,
    priors: &PriorContext<'_>,
    cfg: &RefineConfig,
) -> Result<UeAdds> {
    if sets.foreground.dims() != clean.dims() {
        return Err(Error::dims(sets.foreground.dims(), clean.dims()));
    }
    let n = clean.dims().len();
    let agreeing: Vec<Option<usize>> = (0..n)
        .map(|idx| {
            if sets.is_labeled(idx) {
                return None;
            }
            let y = argmax_class(clean.p_fg(idx));
            (y == argmax_class(agg.mean[idx])).then_some(y)
        })
        .collect();
    let mut u_ave = [None; 2];
    for (i, slot) in u_ave.iter_mut().enumerate() {
        let (sum, count) = agreeing
            .iter()
            .zip(&agg.uncertainty)
            .filter(|(a, _)| **a == Some(i))
            .fold((0.0f64, 0usize), |(s, c), (_, &u)| (s + u, c + 1));
        if count > 0 {
            *slot = Some(sum / count as f64);
        }
    }
    let like = &sets.foreground;
    let add = [0, 1].map(|i| {
        let bits = (0..n)
            .map(|idx| {
                agreeing[idx] == Some(i)
                    && u_ave[i].is_some_and(|ua| agg.uncertainty[idx] < ua)
                    && priors.admits(idx, i, cfg.eps2, cfg.d_th2)
            })
            .collect();
        Grid3::new(like.dims(), like.spacing(), bits).expect("same dims")
    });
    Ok(UeAdds { add, u_ave })
}

/// Everything a refinement round consumes.
#[derive(Clone, Copy, Debug)]
pub struct RefineInputs<'a> {
    pub labels: &'a LabelVolume,
    /// Voxels claimed by both classes during pseudo-label assembly.
    pub conflicts: &'a [usize],
    pub volume: &'a ScalarVolume,
    pub clean: &'a ProbabilityVolume,
    pub passes: &'a [ProbabilityVolume],
    /// Mean seed intensity.
    pub v_ave: f64,
}

/// Counts and statistics of one refinement round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub threshold: [f64; 2],
    pub count_matrix: [[f64; 2]; 2],
    pub joint: [[f64; 2]; 2],
    pub quota: [usize; 2],
    /// Set when no labeled voxel entered a latent set; labeled voxels are
    /// then left unchanged.
    pub cl_degenerate: bool,
    pub removed: [usize; 2],
    pub added_cl: [usize; 2],
    pub added_ue: [usize; 2],
    pub u_ave: [Option<f64>; 2],
    pub conflicts: usize,
    /// Voxel counts (background, foreground, unlabeled) before and after.
    pub counts_before: [usize; 3],
    pub counts_after: [usize; 3],
}

/// Runs one round of confident-learning cleanup and uncertainty-based
/// labeling. The refined sets are `((S_i ∪ add1_i) \ re_i) ∪ add2_i`.
pub fn refine_round(inputs: &RefineInputs<'_>, cfg: &RefineConfig) -> Result<(LabelVolume, RefinementReport)> {
    cfg.validate()?;
    let labels = inputs.labels;
    labels.ensure_same_dims(inputs.volume)?;
    if inputs.clean.dims() != labels.dims() {
        return Err(Error::dims(labels.dims(), inputs.clean.dims()));
    }
    if inputs.passes.len() != cfg.k {
        return Err(Error::InvalidConfig(format!(
            "configured for k = {} passes but {} were supplied",
            cfg.k,
            inputs.passes.len()
        )));
    }

    let sets = LabelSets::from_labels(labels, inputs.conflicts)?;
    let latent = latent_sets(&sets, inputs.clean)?;
    let mut report = RefinementReport {
        threshold: latent.threshold,
        counts_before: labels.class_counts(),
        ..RefinementReport::default()
    };
    let removals = match count_and_joint(&sets, &latent) {
        Ok(state) => {
            report.count_matrix = state.count_matrix;
            report.joint = state.joint;
            report.quota = state.quota;
            pbnr_remove(&sets, &latent, inputs.clean, &state)
        }
        Err(Error::DegenerateCl) => {
            report.cl_degenerate = true;
            Removals::conflicts_only(&sets)
        }
        Err(e) => return Err(e),
    };
    report.conflicts = removals.conflicts;

    let priors = PriorContext::new(inputs.volume, &sets.foreground, inputs.v_ave, cfg)?;
    let add1 = cl_add(&removals, &priors, cfg);
    let agg = mc_aggregate(inputs.clean, inputs.passes)?;
    let ue = ue_add(&sets, inputs.clean, &agg, &priors, cfg)?;
    report.u_ave = ue.u_ave;

    let n = labels.len();
    let mut refined = vec![Label::Unlabeled; n];
    for (idx, out) in refined.iter_mut().enumerate() {
        let member = |i: usize| {
            let kept = (sets.class(i).data()[idx] || add1[i].data()[idx]) && !removals.class(i).data()[idx];
            kept || ue.add[i].data()[idx]
        };
        let (bg, fg) = (member(0), member(1));
        assert!(!(bg && fg), "refined sets overlap at voxel {idx}");
        if fg {
            *out = Label::Foreground;
        } else if bg {
            *out = Label::Background;
        }
    }
    for i in 0..2 {
        report.removed[i] = removals.class(i).count();
        report.added_cl[i] = add1[i].count();
        report.added_ue[i] = ue.add[i].count();
    }
    let refined = Grid3::new(labels.dims(), labels.spacing(), refined)?;
    report.counts_after = refined.class_counts();
    Ok((refined, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};

    fn line<T: Clone>(data: Vec<T>) -> Grid3<T> {
        Grid3::new(Dims::new(data.len(), 1, 1), Spacing::default(), data).unwrap()
    }

    fn prob(data: Vec<f32>) -> ProbabilityVolume {
        ProbabilityVolume::new(line(data)).unwrap()
    }

    use Label::{Background as B, Foreground as F, Unlabeled as U};

    #[test]
    fn single_voxel_threshold_is_strict() {
        let labels = line(vec![F, B]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let lat = latent_sets(&sets, &prob(vec![0.9, 0.2])).unwrap();
        assert!((lat.threshold[1] - 0.9f32 as f64).abs() < 1e-12);
        assert!(!lat.foreground.data()[0]);
    }

    #[test]
    fn mean_confidence_threshold() {
        let labels = line(vec![F, F, B]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let lat = latent_sets(&sets, &prob(vec![0.6, 0.9, 0.1])).unwrap();
        assert!((lat.threshold[1] - 0.75).abs() < 1e-7);
        assert_eq!(lat.foreground.indices(), vec![1]);
    }

    #[test]
    fn empty_class_is_named() {
        let labels = line(vec![F, U]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let err = latent_sets(&sets, &prob(vec![0.9, 0.5])).unwrap_err();
        assert!(matches!(err, Error::EmptyClass("background")));
    }

    #[test]
    fn argmax_tie_goes_to_foreground() {
        let labels = line(vec![F, B, B]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let lat = latent_sets(&sets, &prob(vec![0.2, 0.5, 0.0])).unwrap();
        // p = 0.5 is foreground by argmax; t_1 = 0.2 so it enters S*_1.
        assert!(lat.foreground.data()[1]);
        assert!(!lat.background.data()[1]);
    }

    #[test]
    fn clean_labels_give_zero_quota() {
        let labels = line(vec![F, F, B, B]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let p = prob(vec![0.8, 0.9, 0.3, 0.1]);
        let lat = latent_sets(&sets, &p).unwrap();
        let state = count_and_joint(&sets, &lat).unwrap();
        assert_eq!(state.count_matrix[0][1], 0.0);
        assert_eq!(state.count_matrix[1][0], 0.0);
        assert_eq!(state.count_matrix[0][0], 2.0);
        assert_eq!(state.count_matrix[1][1], 2.0);
        assert_eq!(state.quota, [0, 0]);
    }

    #[test]
    fn count_matrix_row_rescaling() {
        // |S_1| = 10 with 2 in S*_0, 6 in S*_1 and 2 in neither.
        let mut data = vec![0.97f32; 6];
        data.extend([0.05, 0.05, 0.6, 0.6]);
        data.extend([0.2f32; 4]);
        let mut labels = vec![F; 10];
        labels.extend([B; 4]);
        let sets = LabelSets::from_labels(&line(labels), &[]).unwrap();
        let p = prob(data);
        let lat = latent_sets(&sets, &p).unwrap();
        let state = count_and_joint(&sets, &lat).unwrap();
        assert_eq!(state.intersections[1], [2, 6]);
        assert!((state.count_matrix[1][0] - 2.5).abs() < 1e-12);
        assert!((state.count_matrix[1][1] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn top_margin_selection() {
        let c = [(10, 0.4), (11, 0.2), (12, 0.1)];
        assert_eq!(select_top_margins(&c, 2), vec![10, 11]);
        assert_eq!(select_top_margins(&c, 0), Vec::<usize>::new());
        assert_eq!(select_top_margins(&c, 9), vec![10, 11, 12]);
        let tied = [(5, 0.3), (2, 0.3), (7, 0.3)];
        assert_eq!(select_top_margins(&tied, 2), vec![2, 5]);
    }

    #[test]
    fn zero_quota_removes_only_conflicts() {
        let labels = line(vec![F, F, B, B, U]);
        let sets = LabelSets::from_labels(&labels, &[4]).unwrap();
        let p = prob(vec![0.8, 0.9, 0.3, 0.1, 0.5]);
        let lat = latent_sets(&sets, &p).unwrap();
        let mut state = count_and_joint(&sets, &lat).unwrap();
        state.quota = [0, 0];
        let r = pbnr_remove(&sets, &lat, &p, &state);
        assert_eq!(r.foreground.indices(), vec![4]);
        assert_eq!(r.background.indices(), vec![4]);
        assert_eq!(r.conflicts, 1);
    }

    #[test]
    fn priors_for_class_switches() {
        let vol = line(vec![0.3f32, 0.9, 0.9]);
        let fg = line(vec![false, false, true]);
        let cfg = RefineConfig::default();
        let priors = PriorContext::new(&vol, &fg, 0.5, &cfg).unwrap();
        // 0.3 < 0.7 * 0.5
        assert!(priors.admits(0, 0, cfg.eps1, cfg.d_th1));
        assert!(!priors.admits(1, 0, cfg.eps1, cfg.d_th1));
        // distance 1 < 1.5, distance 2 is not
        assert!(priors.admits(1, 1, cfg.eps1, cfg.d_th1));
        assert!(!priors.admits(0, 1, cfg.eps1, cfg.d_th1));
        let off = PriorContext::new(&vol, &fg, 0.5, &RefineConfig::tubetk()).unwrap();
        assert!(off.admits(0, 1, 0.0, 0.0));
    }

    #[test]
    fn disabled_priors_switch_every_removal() {
        let vol = line(vec![0.9f32; 4]);
        let fg = line(vec![true, true, false, false]);
        let removals = Removals {
            foreground: line(vec![true, false, false, false]),
            background: line(vec![false, false, true, false]),
            conflicts: 0,
        };
        let cfg = RefineConfig::tubetk();
        let priors = PriorContext::new(&vol, &fg, 0.5, &cfg).unwrap();
        let [to_bg, to_fg] = cl_add(&removals, &priors, &cfg);
        assert_eq!(to_bg, removals.foreground);
        assert_eq!(to_fg, removals.background);
    }

    #[test]
    fn entropy_edges() {
        let a = mc_aggregate(&prob(vec![0.5, 1.0]), &[prob(vec![0.5, 1.0]), prob(vec![0.5, 1.0])]).unwrap();
        assert_eq!(a.mean, vec![0.5, 1.0]);
        assert_eq!(a.uncertainty, vec![1.0, 0.0]);
        assert_eq!(entropy_bits(0.0), 0.0);
        assert!(mc_aggregate(&prob(vec![0.5]), &[prob(vec![0.5])]).is_err());
        assert!(mc_aggregate(&prob(vec![0.5]), &[prob(vec![0.5]), prob(vec![0.5, 0.5])]).is_err());
    }

    #[test]
    fn uncertainty_equal_to_mean_is_excluded() {
        // Two unlabeled foreground-agreeing voxels with equal entropy.
        let labels = line(vec![F, B, U, U]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let clean = prob(vec![0.9, 0.1, 0.8, 0.8]);
        let passes = vec![clean.clone(), clean.clone()];
        let agg = mc_aggregate(&clean, &passes).unwrap();
        let vol = line(vec![0.9f32, 0.1, 0.9, 0.9]);
        let cfg = RefineConfig::tubetk();
        let priors = PriorContext::new(&vol, &sets.foreground, 0.9, &cfg).unwrap();
        let ue = ue_add(&sets, &clean, &agg, &priors, &cfg).unwrap();
        assert_eq!(ue.add[1].count(), 0);
        assert_eq!(ue.u_ave[0], None);
    }

    #[test]
    fn confident_unlabeled_voxel_near_foreground_is_added() {
        let labels = line(vec![F, U, U, U, B, U]);
        let sets = LabelSets::from_labels(&labels, &[]).unwrap();
        let clean = prob(vec![0.9, 0.6, 0.99, 0.55, 0.1, 0.2]);
        let agg = mc_aggregate(&clean, &[clean.clone(), clean.clone()]).unwrap();
        let vol = line(vec![0.9f32, 0.5, 0.9, 0.5, 0.05, 0.5]);
        let cfg = RefineConfig::default();
        let priors = PriorContext::new(&vol, &sets.foreground, 0.9, &cfg).unwrap();
        let ue = ue_add(&sets, &clean, &agg, &priors, &cfg).unwrap();
        // voxel 2 sits at distance 2 < 4 with the lowest foreground entropy.
        assert_eq!(ue.add[1].indices(), vec![2]);
    }

    #[test]
    fn perfect_inputs_are_a_fixed_point() {
        let labels = line(vec![F, F, B, B, B]);
        let clean = prob(vec![0.8, 0.95, 0.1, 0.3, 0.05]);
        let passes = vec![clean.clone(); 6];
        let vol = line(vec![0.9f32, 0.9, 0.1, 0.2, 0.1]);
        let inputs = RefineInputs {
            labels: &labels,
            conflicts: &[],
            volume: &vol,
            clean: &clean,
            passes: &passes,
            v_ave: 0.9,
        };
        let (out, report) = refine_round(&inputs, &RefineConfig::default()).unwrap();
        assert_eq!(out, labels);
        assert_eq!(report.removed, [0, 0]);
        assert_eq!(report.added_cl, [0, 0]);
        assert_eq!(report.added_ue, [0, 0]);
    }

    #[test]
    fn pass_count_must_match_config() {
        let labels = line(vec![F, B]);
        let clean = prob(vec![0.8, 0.1]);
        let vol = line(vec![0.9f32, 0.1]);
        let passes = vec![clean.clone(); 3];
        let inputs = RefineInputs {
            labels: &labels,
            conflicts: &[],
            volume: &vol,
            clean: &clean,
            passes: &passes,
            v_ave: 0.9,
        };
        assert!(matches!(refine_round(&inputs, &RefineConfig::default()), Err(Error::InvalidConfig(_))));
    }
}
