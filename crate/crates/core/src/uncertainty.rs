//! Monte-Carlo uncertainty estimation from repeated masked reconstructions.
//!
//! Random mask plans are sampled until every patch has been reconstructed at
//! least `k` times, then per-pixel statistics over the first `k`
//! reconstructions give three maps: the mean reconstruction, aleatoric
//! uncertainty |x - mean|, and epistemic uncertainty (the unbiased sample
//! variance). Outside the ROI all uncertainty is zero and the mean keeps the
//! input pixel.

use crate::error::{Error, Result};
use crate::model::{decode, encode, ModelParams};
use crate::patching::{random_mask_plan, MaskPlan, PatchGrid};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything that predicts pixel values for the masked patches of a plan.
/// Implemented by the model; tests substitute deterministic stubs.
pub trait Reconstructor<T: Scalar> {
    /// (M, P^2) pixel predictions in `plan.masked` order.
    fn reconstruct_masked(
        &self,
        image: &Array2<T>,
        grid: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<Array2<T>>;
}

impl<T: Scalar> Reconstructor<T> for ModelParams<T> {
    fn reconstruct_masked(
        &self,
        image: &Array2<T>,
        grid: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<Array2<T>> {
        let enc = encode(self, image, grid, &plan.visible)?;
        Ok(decode(self, &enc, grid, plan)?.0)
    }
}

/// Monte-Carlo sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    /// Reconstructions kept per patch.
    pub k: usize,
    /// Mask ratio of each sampling pass.
    pub ratio: f64,
    /// Pass cap before giving up; `None` derives 100 * k / ratio.
    pub max_passes: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { k: 10, ratio: 0.75, max_passes: None }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k must be at least 2 for a sample variance"));
        }
        if !(self.ratio.is_finite() && self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("mc ratio {} outside (0, 1]", self.ratio)));
        }
        if self.max_passes == Some(0) {
            return Err(Error::config("max_passes must be positive"));
        }
        Ok(())
    }

    fn pass_cap(&self) -> usize {
        self.max_passes.unwrap_or_else(|| (100.0 * self.k as f64 / self.ratio).ceil() as usize)
    }
}

/// Per-patch reconstruction samples. Only the first `k` arrivals per patch
/// are kept: later passes stop contributing once a patch is covered, so the
/// statistics are the "first k in pass order" subsample by construction.
#[derive(Debug, Clone)]
pub struct McEnsemble<T> {
    samples: Vec<Vec<Vec<T>>>,
    k: usize,
    pub passes: usize,
}

impl<T> McEnsemble<T> {
    pub fn n_patches(&self) -> usize {
        self.samples.len()
    }
    pub fn counts(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.len()).collect()
    }
}

/// Sample random plans until every patch holds `k` reconstructions. Each
/// prediction is clipped to [0, 1] on arrival, matching how reconstructions
/// are composed into images.
pub fn mc_sample<T: Scalar, R: Reconstructor<T> + ?Sized>(
    model: &R,
    image: &Array2<T>,
    grid: &PatchGrid,
    cfg: &McConfig,
    rng: &mut ChaCha8Rng,
) -> Result<McEnsemble<T>> {
    cfg.validate()?;
    let n = grid.n_patches();
    if ((cfg.ratio * n as f64).floor() as usize) == 0 {
        return Err(Error::argument(format!("ratio {} masks no patches of {n}", cfg.ratio)));
    }
    let cap = cfg.pass_cap();
    let mut samples: Vec<Vec<Vec<T>>> = vec![Vec::new(); n];
    let mut covered = 0usize;
    let mut passes = 0usize;
    while covered < n {
        if passes >= cap {
            return Err(Error::SamplingRunaway(format!(
                "{covered}/{n} patches covered after {passes} passes"
            )));
        }
        let plan = random_mask_plan(grid, cfg.ratio, rng)?;
        let preds = model.reconstruct_masked(image, grid, &plan)?;
        passes += 1;
        for (row, &pi) in plan.masked.iter().enumerate() {
            let s = &mut samples[pi];
            if s.len() < cfg.k {
                s.push(
                    preds.row(row).iter().map(|v| v.max(T::zero()).min(T::one())).collect(),
                );
                if s.len() == cfg.k {
                    covered += 1;
                }
            }
        }
    }
    Ok(McEnsemble { samples, k: cfg.k, passes })
}

/// Mean reconstruction and both uncertainty maps.
#[derive(Debug, Clone)]
pub struct UncertaintyMaps<T> {
    /// K-sample mean reconstruction; input pixels outside the ROI.
    pub mean: Array2<T>,
    /// Aleatoric: |x - mean| on the ROI, zero elsewhere.
    pub au: Array2<T>,
    /// Epistemic: unbiased per-pixel sample variance on the ROI, zero elsewhere.
    pub eu: Array2<T>,
}

/// Per-pixel statistics over the ensemble. Accumulation runs in f64.
pub fn estimate_maps<T: Scalar>(
    ens: &McEnsemble<T>,
    image: &Array2<T>,
    grid: &PatchGrid,
) -> Result<UncertaintyMaps<T>> {
    if ens.samples.len() != grid.n_patches() {
        return Err(Error::precondition("ensemble does not match the grid"));
    }
    if image.dim() != grid.image_shape() {
        return Err(Error::argument("image shape does not match grid"));
    }
    let roi = grid.roi();
    let mut mean = image.clone();
    let mut au = Array2::zeros(image.raw_dim());
    let mut eu = Array2::zeros(image.raw_dim());
    let k = ens.k;
    for (i, s) in ens.samples.iter().enumerate() {
        if s.len() < k {
            return Err(Error::IncompleteEnsemble(format!(
                "patch {i} holds {} of {k} samples",
                s.len()
            )));
        }
        for (px, (y, x)) in grid.pixels(i).enumerate() {
            if roi[(y, x)] != 1 {
                continue;
            }
            let mut sum = 0.0f64;
            for row in &s[..k] {
                sum += row[px].to_real();
            }
            let mu = sum / k as f64;
            let mut var = 0.0f64;
            for row in &s[..k] {
                let d = row[px].to_real() - mu;
                var += d * d;
            }
            var /= (k - 1) as f64;
            mean[(y, x)] = T::from_real(mu);
            au[(y, x)] = T::from_real((image[(y, x)].to_real() - mu).abs());
            eu[(y, x)] = T::from_real(var);
        }
    }
    Ok(UncertaintyMaps { mean, au, eu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::patching::build_patch_grid;
    use crate::rng::stream;
    use crate::Mask;
    use rand::Rng;
    use std::cell::RefCell;

    fn full_roi(h: usize, w: usize) -> Mask {
        Array2::ones((h, w))
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        stream(seed, "test/uncertainty", &[])
    }

    /// Every pass predicts one constant for all pixels, advancing through
    /// `values` pass by pass.
    struct CyclingStub {
        values: Vec<f64>,
        calls: RefCell<usize>,
    }

    impl Reconstructor<f64> for CyclingStub {
        fn reconstruct_masked(
            &self,
            _: &Array2<f64>,
            grid: &PatchGrid,
            plan: &MaskPlan,
        ) -> Result<Array2<f64>> {
            let mut c = self.calls.borrow_mut();
            let v = self.values[*c % self.values.len()];
            *c += 1;
            let p2 = grid.patch_size() * grid.patch_size();
            Ok(Array2::from_elem((plan.masked.len(), p2), v))
        }
    }

    /// Predicts the true (ROI-zeroed) patch pixels.
    struct PerfectStub;

    impl Reconstructor<f64> for PerfectStub {
        fn reconstruct_masked(
            &self,
            image: &Array2<f64>,
            grid: &PatchGrid,
            plan: &MaskPlan,
        ) -> Result<Array2<f64>> {
            let p2 = grid.patch_size() * grid.patch_size();
            let mut out = Array2::zeros((plan.masked.len(), p2));
            for (row, &pi) in plan.masked.iter().enumerate() {
                for (k, v) in grid.masked_patch(image, pi).into_iter().enumerate() {
                    out[(row, k)] = v;
                }
            }
            Ok(out)
        }
    }

    struct NoisyStub {
        base: f64,
        amp: f64,
        rng: RefCell<ChaCha8Rng>,
    }

    impl Reconstructor<f64> for NoisyStub {
        fn reconstruct_masked(
            &self,
            _: &Array2<f64>,
            grid: &PatchGrid,
            plan: &MaskPlan,
        ) -> Result<Array2<f64>> {
            let p2 = grid.patch_size() * grid.patch_size();
            let mut r = self.rng.borrow_mut();
            Ok(Array2::from_shape_fn((plan.masked.len(), p2), |_| {
                self.base + self.amp * (r.random::<f64>() - 0.5)
            }))
        }
    }

    #[test]
    fn three_value_ensemble_matches_hand_statistics() {
        let grid = build_patch_grid(&full_roi(8, 8), 4).unwrap();
        let image = Array2::from_elem((8, 8), 0.5);
        let stub = CyclingStub { values: vec![0.2, 0.4, 0.6], calls: RefCell::new(0) };
        // ratio 1 masks everything, so pass t gives every patch values[t]
        let cfg = McConfig { k: 3, ratio: 1.0, max_passes: None };
        let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(1)).unwrap();
        assert_eq!(ens.passes, 3);
        let maps = estimate_maps(&ens, &image, &grid).unwrap();
        for v in maps.mean.iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }
        for v in maps.au.iter() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        // unbiased variance of {0.2, 0.4, 0.6} is 0.04
        for v in maps.eu.iter() {
            assert!((v - 0.04).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_predictor_has_zero_epistemic_uncertainty() {
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap();
        let image = Array2::from_elem((16, 16), 0.9);
        let stub = CyclingStub { values: vec![0.7], calls: RefCell::new(0) };
        let cfg = McConfig { k: 4, ratio: 0.75, max_passes: None };
        let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(2)).unwrap();
        let maps = estimate_maps(&ens, &image, &grid).unwrap();
        assert!(maps.eu.iter().all(|&v| v == 0.0));
        for v in maps.au.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictor_has_zero_aleatoric_uncertainty() {
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap();
        let mut r = rng(3);
        let image = Array2::from_shape_fn((16, 16), |_| r.random::<f64>());
        let cfg = McConfig { k: 3, ratio: 0.5, max_passes: None };
        let ens = mc_sample(&PerfectStub, &image, &grid, &cfg, &mut rng(4)).unwrap();
        let maps = estimate_maps(&ens, &image, &grid).unwrap();
        // the mean of k identical values can round by an ulp
        assert!(maps.au.iter().all(|&v| v < 1e-15));
        assert!(maps.eu.iter().all(|&v| v < 1e-30));
        for (m, x) in maps.mean.iter().zip(image.iter()) {
            assert!((m - x).abs() < 1e-15);
        }
    }

    #[test]
    fn noisier_predictors_raise_epistemic_uncertainty() {
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap();
        let image = Array2::from_elem((16, 16), 0.5);
        let cfg = McConfig { k: 10, ratio: 0.75, max_passes: None };
        let mut mean_eu = Vec::new();
        for amp in [0.02, 0.2] {
            let stub = NoisyStub { base: 0.5, amp, rng: RefCell::new(rng(5)) };
            let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(6)).unwrap();
            let maps = estimate_maps(&ens, &image, &grid).unwrap();
            mean_eu.push(maps.eu.mean().unwrap());
        }
        assert!(
            mean_eu[1] > 10.0 * mean_eu[0],
            "eu {} vs {} does not track noise",
            mean_eu[1],
            mean_eu[0]
        );
    }

    #[test]
    fn sampling_covers_every_patch_with_k_reconstructions() {
        let grid = build_patch_grid(&full_roi(32, 32), 8).unwrap();
        let image = Array2::from_elem((32, 32), 0.5);
        let stub = CyclingStub { values: vec![0.3, 0.6], calls: RefCell::new(0) };
        let cfg = McConfig::default();
        let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(7)).unwrap();
        assert!(ens.counts().iter().all(|&c| c == 10));
        assert!(ens.passes >= 14, "cannot cover 10 samples in {} passes", ens.passes);
        assert!(ens.passes <= cfg.pass_cap());
    }

    #[test]
    fn ratio_that_masks_nothing_is_rejected() {
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap(); // N = 16
        let image = Array2::from_elem((16, 16), 0.5);
        let stub = CyclingStub { values: vec![0.5], calls: RefCell::new(0) };
        let cfg = McConfig { k: 3, ratio: 0.05, max_passes: None };
        assert!(matches!(
            mc_sample(&stub, &image, &grid, &cfg, &mut rng(8)),
            Err(Error::Argument(_))
        ));
        assert!(McConfig { k: 1, ratio: 0.5, max_passes: None }.validate().is_err());
        assert!(McConfig { k: 3, ratio: 0.0, max_passes: None }.validate().is_err());
    }

    #[test]
    fn pass_cap_reports_runaway() {
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap();
        let image = Array2::from_elem((16, 16), 0.5);
        let stub = CyclingStub { values: vec![0.5], calls: RefCell::new(0) };
        let cfg = McConfig { k: 2, ratio: 0.75, max_passes: Some(1) };
        assert!(matches!(
            mc_sample(&stub, &image, &grid, &cfg, &mut rng(9)),
            Err(Error::SamplingRunaway(_))
        ));
    }

    #[test]
    fn maps_are_zero_outside_the_roi() {
        let mut roi = Mask::zeros((16, 16));
        for y in 4..12 {
            for x in 6..10 {
                roi[(y, x)] = 1;
            }
        }
        let grid = build_patch_grid(&roi, 4).unwrap();
        let mut r = rng(10);
        let image = Array2::from_shape_fn((16, 16), |_| r.random::<f64>());
        let stub = CyclingStub { values: vec![0.2, 0.8], calls: RefCell::new(0) };
        let cfg = McConfig { k: 4, ratio: 0.5, max_passes: None };
        let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(11)).unwrap();
        let maps = estimate_maps(&ens, &image, &grid).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if roi[(y, x)] == 0 {
                    assert_eq!(maps.au[(y, x)], 0.0);
                    assert_eq!(maps.eu[(y, x)], 0.0);
                    assert_eq!(maps.mean[(y, x)], image[(y, x)]);
                } else {
                    assert!(maps.eu[(y, x)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn predictions_are_clipped_on_arrival() {
        let grid = build_patch_grid(&full_roi(8, 8), 4).unwrap();
        let image = Array2::from_elem((8, 8), 0.5);
        let stub = CyclingStub { values: vec![-3.0, 7.0], calls: RefCell::new(0) };
        let cfg = McConfig { k: 2, ratio: 1.0, max_passes: None };
        let ens = mc_sample(&stub, &image, &grid, &cfg, &mut rng(12)).unwrap();
        let maps = estimate_maps(&ens, &image, &grid).unwrap();
        // samples become {0, 1}: mean 0.5, variance 0.5
        for v in maps.mean.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for v in maps.eu.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn incomplete_ensemble_is_reported() {
        let grid = build_patch_grid(&full_roi(8, 8), 4).unwrap();
        let image = Array2::from_elem((8, 8), 0.5);
        let ens = McEnsemble::<f64> {
            samples: vec![vec![vec![0.5; 16]; 3], vec![vec![0.5; 16]; 2], vec![], vec![]],
            k: 3,
            passes: 3,
        };
        assert!(matches!(
            estimate_maps(&ens, &image, &grid),
            Err(Error::IncompleteEnsemble(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_given_the_stream() {
        let cfg = ModelConfig {
            patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            lambda_edge: 0.1,
            image_height: 16,
            image_width: 16,
        };
        let model = ModelParams::<f64>::init(cfg, &mut rng(13)).unwrap();
        let grid = build_patch_grid(&full_roi(16, 16), 4).unwrap();
        let mut r = rng(14);
        let image = Array2::from_shape_fn((16, 16), |_| r.random::<f64>());
        let mc = McConfig { k: 3, ratio: 0.75, max_passes: None };
        let a = estimate_maps(&mc_sample(&model, &image, &grid, &mc, &mut rng(15)).unwrap(), &image, &grid)
            .unwrap();
        let b = estimate_maps(&mc_sample(&model, &image, &grid, &mc, &mut rng(15)).unwrap(), &image, &grid)
            .unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.au, b.au);
        assert_eq!(a.eu, b.eu);
        assert!(a.au.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(a.eu.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
