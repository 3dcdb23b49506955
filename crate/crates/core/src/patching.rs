//! Patch lattice over the ROI and mask-plan construction.
//!
//! Images are tiled by a P-stride lattice; only lattice cells touching the
//! ROI become patches. Mask plans pick which patches the model must
//! reconstruct: uniformly at random during pretraining, biased toward
//! high-uncertainty patches during stage-1 adaptation, and with suspected
//! anomaly patches forced visible during stage-2 adaptation.

use crate::detection::{cc_label, percentile_filter, retain_top_ccs};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Mask;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Patches of one image: the ROI-restricted cells of the patch lattice, in
/// row-major lattice order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    patch_size: usize,
    image_shape: (usize, usize),
    /// Pixel origin (row, col) of each patch.
    origins: Vec<(usize, usize)>,
    roi: Mask,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.origins.len()
    }
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }
    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }
    pub fn origin(&self, i: usize) -> (usize, usize) {
        self.origins[i]
    }
    pub fn roi(&self) -> &Mask {
        &self.roi
    }

    /// Lattice slot of patch i, shifted by one: slot 0 is reserved for the
    /// class token in positional-encoding tables.
    pub fn lattice_slot(&self, i: usize) -> usize {
        let (y, x) = self.origins[i];
        let cols = self.image_shape.1 / self.patch_size;
        1 + (y / self.patch_size) * cols + (x / self.patch_size)
    }

    /// Pixel coordinates of patch i in row-major order.
    pub fn pixels(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (y0, x0) = self.origins[i];
        let p = self.patch_size;
        (0..p).flat_map(move |dy| (0..p).map(move |dx| (y0 + dy, x0 + dx)))
    }

    /// Number of ROI pixels inside patch i.
    pub fn roi_count(&self, i: usize) -> usize {
        self.pixels(i).filter(|&(y, x)| self.roi[(y, x)] == 1).count()
    }

    /// Flattened patch values with non-ROI pixels zeroed. This is the model's
    /// view of the image: context and reconstruction targets live on the ROI.
    pub fn masked_patch<T: Scalar>(&self, image: &Array2<T>, i: usize) -> Vec<T> {
        self.pixels(i)
            .map(|(y, x)| if self.roi[(y, x)] == 1 { image[(y, x)] } else { T::zero() })
            .collect()
    }
}

/// Build the patch grid for an ROI. The patch size must tile the image
/// exactly and the ROI must be nonempty.
pub fn build_patch_grid(roi: &Mask, patch_size: usize) -> Result<PatchGrid> {
    let (h, w) = roi.dim();
    if patch_size == 0 {
        return Err(Error::argument("patch size must be positive"));
    }
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::config(format!(
            "patch size {patch_size} does not tile a {h}x{w} image"
        )));
    }
    let mut origins = Vec::new();
    for by in (0..h).step_by(patch_size) {
        for bx in (0..w).step_by(patch_size) {
            let touches = (by..by + patch_size)
                .any(|y| (bx..bx + patch_size).any(|x| roi[(y, x)] == 1));
            if touches {
                origins.push((by, bx));
            }
        }
    }
    if origins.is_empty() {
        return Err(Error::degenerate("roi is empty: no patches"));
    }
    Ok(PatchGrid { patch_size, image_shape: (h, w), origins, roi: roi.clone() })
}

/// Which patches are hidden from the encoder. `forced_visible` lists patches
/// pinned visible by anomaly exclusion; it is a subset of `visible`. All index
/// lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub forced_visible: Vec<usize>,
}

impl MaskPlan {
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        let mut seen = vec![0u8; n_patches];
        for &i in self.masked.iter().chain(self.visible.iter()) {
            if i >= n_patches {
                return Err(Error::argument(format!("patch index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::argument("masked and visible must partition the patches"));
        }
        for &f in &self.forced_visible {
            if self.visible.binary_search(&f).is_err() {
                return Err(Error::argument("forced_visible must be a subset of visible"));
            }
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !r.is_finite() || !(0.0..=1.0).contains(&r) {
        return Err(Error::argument(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(())
}

/// Indices of the k largest scores; ties broken by ascending index. Excluded
/// indices (score < 0) never win against uniform draws in [0, 1).
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

fn plan_from_scores(scores: &[f64], k: usize, forced_visible: Vec<usize>) -> MaskPlan {
    let masked = top_k_indices(scores, k);
    let mut is_masked = vec![false; scores.len()];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..scores.len()).filter(|&i| !is_masked[i]).collect();
    MaskPlan { masked, visible, forced_visible }
}

/// Uniformly random plan masking floor(r * N) patches.
pub fn random_mask_plan(grid: &PatchGrid, r: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    check_ratio(r)?;
    let n = grid.n_patches();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let k = (r * n as f64).floor() as usize;
    Ok(plan_from_scores(&scores, k, Vec::new()))
}

/// Sum of map values over the ROI pixels of patch i.
pub fn patch_eu_sum<T: Scalar>(map: &Array2<T>, grid: &PatchGrid, i: usize) -> Result<T> {
    if map.dim() != grid.image_shape() {
        return Err(Error::argument("map shape does not match grid"));
    }
    if i >= grid.n_patches() {
        return Err(Error::argument(format!("patch index {i} out of range")));
    }
    let mut sum = T::zero();
    for (y, x) in grid.pixels(i) {
        if grid.roi[(y, x)] == 1 {
            sum = sum + map[(y, x)];
        }
    }
    Ok(sum)
}

/// Per-patch selection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights {
    pub weights: Vec<f64>,
}

/// Softmax of eu / tau with max subtraction: strictly positive weights that
/// sum to one, increasing in the uncertainty sum.
pub fn eu_weights(eu_sums: &[f64], tau: f64) -> Result<PatchWeights> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::argument(format!("temperature {tau} must be positive")));
    }
    if eu_sums.is_empty() {
        return Err(Error::argument("no patches"));
    }
    if eu_sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("uncertainty sums must be finite"));
    }
    let m = eu_sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eu_sums.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(PatchWeights { weights: exps.into_iter().map(|e| e / z).collect() })
}

/// Stage-1 plan: weight patches by softmax of their EU pixel sums, scale
/// uniform base probabilities by the weights, and mask the top floor(r * N).
pub fn eu_guided_plan<T: Scalar>(
    grid: &PatchGrid,
    eu_map: &Array2<T>,
    r: f64,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    check_ratio(r)?;
    let n = grid.n_patches();
    let sums: Vec<f64> = (0..n)
        .map(|i| patch_eu_sum(eu_map, grid, i).map(|v| v.to_real()))
        .collect::<Result<_>>()?;
    let w = eu_weights(&sums, tau)?;
    let base: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let scores: Vec<f64> = w.weights.iter().zip(base.iter()).map(|(w, p)| w * p).collect();
    let k = (r * n as f64).floor() as usize;
    Ok(plan_from_scores(&scores, k, Vec::new()))
}

/// Stage-2 plan: threshold the AU map (same convention as detection
/// postprocessing), label components, and pin every patch touching one of the
/// `top_k` components visible. Remaining patches are masked by uniform
/// base-probability rank, up to min(floor(r * N), N - |forced|).
pub fn au_exclusion_plan<T: Scalar>(
    grid: &PatchGrid,
    au_map: &Array2<T>,
    r: f64,
    rng: &mut ChaCha8Rng,
    top_k: usize,
    connectivity: u8,
    quantile: f64,
) -> Result<MaskPlan> {
    check_ratio(r)?;
    if au_map.dim() != grid.image_shape() {
        return Err(Error::argument("map shape does not match grid"));
    }
    let filtered = percentile_filter(au_map, grid.roi(), quantile)?;
    let ccs = retain_top_ccs(&cc_label(&filtered, connectivity)?, top_k);

    let n = grid.n_patches();
    let p = grid.patch_size();
    let (h, w) = grid.image_shape();
    let cols = w / p;
    let mut slot_to_patch = vec![usize::MAX; (h / p) * cols];
    for i in 0..n {
        let (y, x) = grid.origin(i);
        slot_to_patch[(y / p) * cols + x / p] = i;
    }
    let mut forced = vec![false; n];
    for cc in &ccs {
        for &(y, x) in &cc.pixels {
            let idx = slot_to_patch[(y / p) * cols + x / p];
            if idx != usize::MAX {
                forced[idx] = true;
            }
        }
    }
    let forced_visible: Vec<usize> = (0..n).filter(|&i| forced[i]).collect();

    let scores: Vec<f64> = (0..n)
        .map(|i| if forced[i] { -1.0 } else { rng.random::<f64>() })
        .collect();
    let k = ((r * n as f64).floor() as usize).min(n - forced_visible.len());
    Ok(plan_from_scores(&scores, k, forced_visible))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr2;

    fn full_roi(h: usize, w: usize) -> Mask {
        Array2::ones((h, w))
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        stream(seed, "test/patching", &[])
    }

    #[test]
    fn grid_covers_full_roi_lattice() {
        let grid = build_patch_grid(&full_roi(32, 24), 8).unwrap();
        assert_eq!(grid.n_patches(), 12);
        assert_eq!(grid.origin(0), (0, 0));
        assert_eq!(grid.origin(1), (0, 8));
        assert_eq!(grid.origin(3), (8, 0));
        assert_eq!(grid.lattice_slot(0), 1);
        assert_eq!(grid.lattice_slot(11), 12);
        let big = build_patch_grid(&full_roi(256, 256), 8).unwrap();
        assert_eq!(big.n_patches(), 1024);
    }

    #[test]
    fn single_aligned_block_is_one_patch() {
        let mut roi = Array2::<u8>::zeros((32, 32));
        for y in 8..16 {
            for x in 16..24 {
                roi[(y, x)] = 1;
            }
        }
        let grid = build_patch_grid(&roi, 8).unwrap();
        assert_eq!(grid.n_patches(), 1);
        assert_eq!(grid.origin(0), (8, 16));
        assert_eq!(grid.roi_count(0), 64);
    }

    #[test]
    fn grid_rejects_empty_roi_and_bad_patch_size() {
        assert!(matches!(
            build_patch_grid(&Array2::zeros((16, 16)), 8),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(build_patch_grid(&full_roi(20, 16), 8), Err(Error::Config(_))));
        assert!(matches!(build_patch_grid(&full_roi(16, 16), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn masked_patch_zeroes_non_roi_pixels() {
        let mut roi = Array2::<u8>::zeros((8, 8));
        roi[(0, 0)] = 1;
        roi[(3, 5)] = 1;
        let grid = build_patch_grid(&roi, 8).unwrap();
        let image = Array2::<f64>::from_elem((8, 8), 0.7);
        let patch = grid.masked_patch(&image, 0);
        assert_eq!(patch.iter().filter(|&&v| v != 0.0).count(), 2);
        assert_eq!(patch[0], 0.7);
        assert_eq!(patch[3 * 8 + 5], 0.7);
    }

    #[test]
    fn random_plan_has_exact_sizes_and_partitions() {
        let grid = build_patch_grid(&full_roi(48, 48), 8).unwrap(); // N = 36
        let mut r = rng(1);
        for ratio in [0.0, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0] {
            let plan = random_mask_plan(&grid, ratio, &mut r).unwrap();
            assert_eq!(plan.masked.len(), (ratio * 36.0).floor() as usize);
            assert_eq!(plan.masked.len() + plan.visible.len(), 36);
            assert!(plan.forced_visible.is_empty());
            plan.validate(36).unwrap();
        }
        assert!(random_mask_plan(&grid, 1.5, &mut r).is_err());
    }

    #[test]
    fn random_plans_are_uniform_over_patches() {
        let grid = build_patch_grid(&full_roi(16, 24), 8).unwrap(); // N = 6
        let mut r = rng(2);
        let mut hits = vec![0usize; 6];
        let draws = 4000;
        for _ in 0..draws {
            for i in random_mask_plan(&grid, 0.5, &mut r).unwrap().masked {
                hits[i] += 1;
            }
        }
        for &h in &hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.03, "frequency {freq} off uniform");
        }
    }

    #[test]
    fn patch_eu_sum_matches_pixel_loop_oracle() {
        let mut roi = Array2::<u8>::zeros((16, 16));
        for y in 0..16 {
            for x in 4..11 {
                roi[(y, x)] = 1;
            }
        }
        let grid = build_patch_grid(&roi, 8).unwrap();
        let mut r = rng(3);
        let map = Array2::<f64>::from_shape_fn((16, 16), |_| r.random::<f64>());
        for i in 0..grid.n_patches() {
            let (y0, x0) = grid.origin(i);
            let mut oracle = 0.0;
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    if roi[(y, x)] == 1 {
                        oracle += map[(y, x)];
                    }
                }
            }
            let got = patch_eu_sum(&map, &grid, i).unwrap();
            assert!((got - oracle).abs() < 1e-9);
        }
        assert!(patch_eu_sum(&map, &grid, grid.n_patches()).is_err());
    }

    #[test]
    fn eu_weights_match_hand_softmax() {
        let w = eu_weights(&[1.0, 2.0, 3.0], 1.0).unwrap().weights;
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (got, want) in w.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eu_weights_edge_cases() {
        let w = eu_weights(&[0.4, 0.4, 0.4, 0.4], 2.0).unwrap().weights;
        for &v in &w {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // max subtraction keeps huge sums finite
        let w = eu_weights(&[1e6, 2e6, 3e6], 1.0).unwrap().weights;
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w[2] > w[1] || w[1] == 0.0);
        assert!(eu_weights(&[1.0], 0.0).is_err());
        assert!(eu_weights(&[1.0], -1.0).is_err());
        assert!(eu_weights(&[f64::NAN], 1.0).is_err());
        assert!(eu_weights(&[], 1.0).is_err());
    }

    #[test]
    fn hot_patch_is_nearly_always_masked_at_low_tau() {
        let grid = build_patch_grid(&full_roi(16, 32), 8).unwrap(); // N = 8
        let mut eu = Array2::<f64>::from_elem((16, 32), 0.01);
        for (y, x) in grid.pixels(3) {
            eu[(y, x)] = 5.0;
        }
        let mut r = rng(4);
        let mut hot_masked = 0;
        for _ in 0..1000 {
            let plan = eu_guided_plan(&grid, &eu, 0.5, 0.05, &mut r).unwrap();
            assert_eq!(plan.masked.len(), 4);
            if plan.masked.contains(&3) {
                hot_masked += 1;
            }
        }
        assert!(hot_masked >= 990, "hot patch masked only {hot_masked}/1000 times");
    }

    #[test]
    fn uniform_eu_plans_match_random_frequencies() {
        let grid = build_patch_grid(&full_roi(16, 32), 8).unwrap(); // N = 8
        let eu = Array2::<f64>::from_elem((16, 32), 0.3);
        let mut r = rng(5);
        let mut hits = vec![0usize; 8];
        let draws = 4000;
        for _ in 0..draws {
            for i in eu_guided_plan(&grid, &eu, 0.75, 1.0, &mut r).unwrap().masked {
                hits[i] += 1;
            }
        }
        for &h in &hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.75).abs() < 0.03, "frequency {freq} off 0.75");
        }
    }

    #[test]
    fn exclusion_pins_bright_component_patches_visible() {
        let grid = build_patch_grid(&full_roi(32, 32), 8).unwrap(); // N = 16
        let mut au = Array2::<f64>::zeros((32, 32));
        // bright blob spanning patches 5 and 6 (lattice row 1, cols 1-2)
        for y in 10..14 {
            for x in 10..20 {
                au[(y, x)] = 2.0;
            }
        }
        let mut r = rng(6);
        for _ in 0..200 {
            let plan = au_exclusion_plan(&grid, &au, 0.75, &mut r, 3, 8, 0.2).unwrap();
            assert_eq!(plan.forced_visible, vec![5, 6]);
            assert!(plan.masked.iter().all(|i| !plan.forced_visible.contains(i)));
            assert_eq!(plan.masked.len(), 12.min(16 - 2));
            plan.validate(16).unwrap();
        }
    }

    #[test]
    fn exclusion_with_connected_backdrop_pins_the_whole_support() {
        // the filter only zeroes the bottom quantile, so a uniformly positive
        // map keeps one giant component and every patch is pinned visible
        let grid = build_patch_grid(&full_roi(32, 32), 8).unwrap();
        let au = Array2::<f64>::from_elem((32, 32), 0.02);
        let plan = au_exclusion_plan(&grid, &au, 0.75, &mut rng(11), 3, 8, 0.2).unwrap();
        assert_eq!(plan.forced_visible.len(), 16);
        assert!(plan.masked.is_empty());
    }

    #[test]
    fn exclusion_without_components_is_a_plain_random_plan() {
        let grid = build_patch_grid(&full_roi(16, 16), 8).unwrap();
        let au = Array2::<f64>::zeros((16, 16));
        let plan = au_exclusion_plan(&grid, &au, 0.5, &mut rng(7), 3, 8, 0.2).unwrap();
        assert!(plan.forced_visible.is_empty());
        assert_eq!(plan.masked.len(), 2);
    }

    #[test]
    fn exclusion_caps_masked_count_when_forced_set_is_large() {
        let grid = build_patch_grid(&full_roi(16, 32), 8).unwrap(); // N = 8
        let mut au = Array2::<f64>::from_elem((16, 32), 0.01);
        for i in 0..6 {
            for (y, x) in grid.pixels(i) {
                au[(y, x)] = 1.0 + i as f64;
            }
        }
        // top 3 components cover patches; with r=0.9, floor(0.9*8)=7 > N-forced
        let plan = au_exclusion_plan(&grid, &au, 0.9, &mut rng(8), 3, 8, 0.2).unwrap();
        assert_eq!(plan.masked.len(), 8 - plan.forced_visible.len());
        plan.validate(8).unwrap();
    }

    #[test]
    fn plans_are_deterministic_given_the_stream() {
        let grid = build_patch_grid(&full_roi(32, 32), 8).unwrap();
        let eu = Array2::<f64>::from_shape_fn((32, 32), |(y, x)| ((y * 31 + x) % 7) as f64 * 0.1);
        let a = eu_guided_plan(&grid, &eu, 0.75, 1.0, &mut rng(9)).unwrap();
        let b = eu_guided_plan(&grid, &eu, 0.75, 1.0, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tie_scores_break_by_ascending_index() {
        let scores = vec![0.5, 0.5, 0.9, 0.5];
        assert_eq!(top_k_indices(&scores, 3), vec![0, 1, 2]);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let grid = build_patch_grid(&arr2(&[[1u8; 8]; 8]), 8).unwrap();
        let plan = random_mask_plan(&grid, 0.0, &mut rng(10)).unwrap();
        assert!(plan.masked.is_empty());
        assert_eq!(plan.visible, vec![0]);
    }
}
