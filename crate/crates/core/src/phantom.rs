//! Synthetic midsagittal spinal-cord phantoms.
//!
//! Each case is a grayscale image of a vertically elongated cord band (the
//! region of interest) flanked by brighter cerebrospinal fluid against a dark
//! background, with a smooth intensity modulation along the long axis so that
//! reconstruction is not trivial. Anomalies are elliptical bright lesions
//! embedded inside the cord. The cord is split into six longitudinal segments
//! used for localization scoring.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const TISSUE_BACKGROUND: u8 = 0;
pub const TISSUE_CORD: u8 = 1;
pub const TISSUE_CSF: u8 = 2;

/// Lesion geometry bounds: full width as a fraction of the local cord width,
/// and length as a multiple of the lesion width.
pub const ANOMALY_WIDTH_FRAC: (f64, f64) = (0.7, 1.0);
pub const ANOMALY_LENGTH_MULT: (f64, f64) = (1.0, 4.0);
/// Pixel-noise variance and brightness/contrast factor range used by [`augment`].
pub const AUG_NOISE_VAR: f64 = 0.02;
pub const AUG_FACTOR_RANGE: (f64, f64) = (0.8, 1.2);

const ANOMALY_MAX_RETRIES: usize = 64;
/// Minimum fraction of an ellipse that must land on cord pixels.
const ANOMALY_FIT_FRAC: f64 = 0.5;

/// Geometry and intensity knobs for the generator. Ranges are sampled per
/// case; levels are nominal intensities before noise and normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Cord half-width range in pixels.
    pub cord_halfwidth: (f64, f64),
    /// Relative amplitude of the half-width modulation along the cord.
    pub halfwidth_mod: f64,
    /// Lateral wobble amplitude range of the cord centerline, pixels.
    pub wobble_amplitude: (f64, f64),
    /// Wobble wavelength range, rows.
    pub wobble_wavelength: (f64, f64),
    /// CSF band thickness range on each side of the cord, pixels.
    pub csf_margin: (f64, f64),
    pub background_level: f64,
    pub cord_level: f64,
    pub csf_level: f64,
    /// Per-case uniform jitter applied to cord/CSF levels.
    pub level_jitter: f64,
    /// Max relative amplitude of the longitudinal intensity modulation.
    pub intensity_mod: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    pub n_segments: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 256,
            width: 256,
            cord_halfwidth: (11.0, 15.0),
            halfwidth_mod: 0.15,
            wobble_amplitude: (2.0, 7.0),
            wobble_wavelength: (140.0, 340.0),
            csf_margin: (6.0, 10.0),
            background_level: 0.07,
            cord_level: 0.42,
            csf_level: 0.86,
            level_jitter: 0.02,
            intensity_mod: 0.06,
            noise_sigma: 0.02,
            n_segments: 6,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("phantom image must be at least 16x16"));
        }
        let max_extent = self.cord_halfwidth.1 * (1.0 + self.halfwidth_mod)
            + self.wobble_amplitude.1
            + self.csf_margin.1;
        if 2.0 * max_extent >= self.width as f64 {
            return Err(Error::config(format!(
                "cord plus CSF band (up to {:.0}px) does not fit in width {}",
                2.0 * max_extent,
                self.width
            )));
        }
        for (lo, hi, name) in [
            (self.cord_halfwidth.0, self.cord_halfwidth.1, "cord_halfwidth"),
            (self.wobble_amplitude.0, self.wobble_amplitude.1, "wobble_amplitude"),
            (self.wobble_wavelength.0, self.wobble_wavelength.1, "wobble_wavelength"),
            (self.csf_margin.0, self.csf_margin.1, "csf_margin"),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                return Err(Error::config(format!("bad range for {name}: [{lo}, {hi}]")));
            }
        }
        if self.cord_halfwidth.0 < 3.0 {
            return Err(Error::config("cord_halfwidth must be at least 3px"));
        }
        if !(self.background_level < self.cord_level && self.cord_level < self.csf_level) {
            return Err(Error::config(
                "intensity levels must be ordered background < cord < CSF",
            ));
        }
        if self.n_segments == 0 || self.n_segments > self.height {
            return Err(Error::config("n_segments must be in 1..=height"));
        }
        if self.noise_sigma < 0.0 || self.level_jitter < 0.0 || self.intensity_mod < 0.0 {
            return Err(Error::config("noise/jitter/modulation must be nonnegative"));
        }
        Ok(())
    }
}

/// One generated case: image plus label rasters and ground truth.
#[derive(Debug, Clone)]
pub struct CaseRecord<T> {
    pub id: String,
    pub image: Array2<T>,
    /// 0 background, 1 cord, 2 CSF.
    pub tissue: Array2<u8>,
    /// 1 on cord pixels (the region of interest), 0 elsewhere.
    pub roi: Array2<u8>,
    /// Segment label 1..=n on cord pixels, 0 elsewhere.
    pub segments: Array2<u8>,
    /// 1 on embedded anomaly pixels.
    pub anomaly: Array2<u8>,
    pub is_anomalous: bool,
    pub seed: u64,
    /// Segments containing each embedded lesion's centroid, sorted, deduped.
    pub gt_segments: Vec<u8>,
}

impl<T: Scalar> CaseRecord<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }

    /// Structural consistency checks used when loading cases from disk.
    pub fn validate(&self) -> Result<()> {
        let dim = self.image.dim();
        for (name, d) in [
            ("tissue", self.tissue.dim()),
            ("roi", self.roi.dim()),
            ("segments", self.segments.dim()),
            ("anomaly", self.anomaly.dim()),
        ] {
            if d != dim {
                return Err(Error::precondition(format!(
                    "{name} raster {d:?} does not match image {dim:?}"
                )));
            }
        }
        for (&t, (&r, &s)) in self.tissue.iter().zip(self.roi.iter().zip(self.segments.iter())) {
            if t > TISSUE_CSF {
                return Err(Error::precondition(format!("tissue label {t} out of range")));
            }
            if (t == TISSUE_CORD) != (r == 1) {
                return Err(Error::precondition("roi mask does not match cord tissue"));
            }
            if (s != 0) != (r == 1) {
                return Err(Error::precondition("segment labels must cover exactly the roi"));
            }
        }
        if self.is_anomalous != self.anomaly.iter().any(|&a| a != 0) {
            return Err(Error::precondition("is_anomalous flag contradicts anomaly mask"));
        }
        Ok(())
    }
}

/// Per-class intensity statistics (population variance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub background: ClassStats,
    pub cord: ClassStats,
    pub csf: ClassStats,
}

/// Mean and population variance per tissue class. Errors if a class is empty.
pub fn region_stats<T: Scalar>(image: &Array2<T>, tissue: &Array2<u8>) -> Result<RegionStats> {
    if image.dim() != tissue.dim() {
        return Err(Error::argument("image and tissue shapes differ"));
    }
    let mut sum = [0.0f64; 3];
    let mut count = [0usize; 3];
    for (&v, &t) in image.iter().zip(tissue.iter()) {
        let c = t as usize;
        if c > 2 {
            return Err(Error::argument(format!("tissue label {t} out of range")));
        }
        sum[c] += v.to_real();
        count[c] += 1;
    }
    for (c, name) in ["background", "cord", "csf"].iter().enumerate() {
        if count[c] == 0 {
            return Err(Error::degenerate(format!("tissue class {name} is empty")));
        }
    }
    let mean = [sum[0] / count[0] as f64, sum[1] / count[1] as f64, sum[2] / count[2] as f64];
    let mut sq = [0.0f64; 3];
    for (&v, &t) in image.iter().zip(tissue.iter()) {
        let c = t as usize;
        let d = v.to_real() - mean[c];
        sq[c] += d * d;
    }
    let class = |c: usize| ClassStats { mean: mean[c], var: sq[c] / count[c] as f64, count: count[c] };
    Ok(RegionStats { background: class(0), cord: class(1), csf: class(2) })
}

/// One sampled lesion: an axis-aligned ellipse inside the cord with a Gaussian
/// intensity signal between the cord and CSF distributions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// (row, col) of the ellipse center.
    pub center: (usize, usize),
    /// Full lateral extent, pixels.
    pub width: f64,
    /// Full longitudinal extent, pixels.
    pub length: f64,
    pub signal_mean: f64,
    pub signal_var: f64,
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Pixels covered by the ellipse, clipped to the image.
fn ellipse_pixels(spec: &AnomalySpec, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (cy, cx) = (spec.center.0 as f64, spec.center.1 as f64);
    let (a, b) = (spec.width / 2.0, spec.length / 2.0);
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = ((cy + b).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (cx - a).floor().max(0.0) as usize;
    let x1 = ((cx + a).ceil() as usize).min(w.saturating_sub(1));
    let mut px = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = (y as f64 - cy) / b.max(0.5);
            let dx = (x as f64 - cx) / a.max(0.5);
            if dx * dx + dy * dy <= 1.0 {
                px.push((y, x));
            }
        }
    }
    px
}

/// Draw a lesion spec for a healthy case. Width is 0.7..1.0 of the local cord
/// width at the sampled center row; length is 1..4 times the width; the
/// signal mean lies strictly between the cord and CSF means, the variance
/// between the two class variances. Centers are resampled until the ellipse
/// lands predominantly on cord pixels.
pub fn sample_anomaly<T: Scalar>(
    case: &CaseRecord<T>,
    stats: &RegionStats,
    rng: &mut ChaCha8Rng,
) -> Result<AnomalySpec> {
    let (h, w) = case.shape();
    let cord_pixels: Vec<(usize, usize)> = case
        .roi
        .indexed_iter()
        .filter(|(_, &v)| v == 1)
        .map(|((y, x), _)| (y, x))
        .collect();
    if cord_pixels.is_empty() {
        return Err(Error::degenerate("case has no cord pixels"));
    }
    let row_width: Vec<usize> = (0..h)
        .map(|y| (0..w).filter(|&x| case.roi[(y, x)] == 1).count())
        .collect();

    for _ in 0..ANOMALY_MAX_RETRIES {
        let center = cord_pixels[rng.random_range(0..cord_pixels.len())];
        let local = row_width[center.0] as f64;
        if local < 4.0 {
            continue;
        }
        let width = uniform_in(rng, ANOMALY_WIDTH_FRAC) * local;
        let length = uniform_in(rng, ANOMALY_LENGTH_MULT) * width;
        let spec = AnomalySpec { center, width, length, signal_mean: 0.0, signal_var: 0.0 };
        let px = ellipse_pixels(&spec, h, w);
        if px.is_empty() {
            continue;
        }
        let on_cord = px.iter().filter(|&&(y, x)| case.roi[(y, x)] == 1).count();
        if (on_cord as f64) < ANOMALY_FIT_FRAC * px.len() as f64 {
            continue;
        }
        let (m_lo, m_hi) = ord(stats.cord.mean, stats.csf.mean);
        let (v_lo, v_hi) = ord(stats.cord.var, stats.csf.var);
        return Ok(AnomalySpec {
            signal_mean: m_lo + (m_hi - m_lo) * rng.random::<f64>(),
            signal_var: v_lo + (v_hi - v_lo) * rng.random::<f64>(),
            ..spec
        });
    }
    Err(Error::degenerate("could not place an anomaly inside the cord"))
}

fn ord(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Embed `n` lesions (1..=3) into a healthy case. Lesion pixels (ellipse
/// intersected with the cord) are replaced by draws from the lesion's
/// Gaussian, clipped to [0,1]. Overlapping lesions may merge in the mask.
pub fn embed_anomalies<T: Scalar>(
    case: &CaseRecord<T>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CaseRecord<T>> {
    if !(1..=3).contains(&n) {
        return Err(Error::argument(format!("anomaly count {n} outside 1..=3")));
    }
    if case.is_anomalous {
        return Err(Error::precondition("anomalies can only be embedded into a healthy case"));
    }
    let stats = region_stats(&case.image, &case.tissue)?;
    let (h, w) = case.shape();
    let mut out = case.clone();
    let mut gt = Vec::new();
    for _ in 0..n {
        let spec = sample_anomaly(case, &stats, rng)?;
        let sigma = spec.signal_var.max(0.0).sqrt();
        let normal = Normal::new(spec.signal_mean, sigma)
            .map_err(|e| Error::degenerate(format!("bad lesion distribution: {e}")))?;
        let mut painted = Vec::new();
        for (y, x) in ellipse_pixels(&spec, h, w) {
            if case.roi[(y, x)] == 1 {
                let v = normal.sample(rng).clamp(0.0, 1.0);
                out.image[(y, x)] = T::from_real(v);
                out.anomaly[(y, x)] = 1;
                painted.push((y, x));
            }
        }
        let cy = painted.iter().map(|&(y, _)| y).sum::<usize>() as f64 / painted.len() as f64;
        gt.push(segment_of_row(cy.round() as usize, h, out_n_segments(&out)));
    }
    gt.sort_unstable();
    gt.dedup();
    out.is_anomalous = true;
    out.gt_segments = gt;
    Ok(out)
}

fn out_n_segments<T>(case: &CaseRecord<T>) -> usize {
    case.segments.iter().copied().max().unwrap_or(0) as usize
}

/// Segment label (1-based) of a row under the near-equal partition of rows.
pub fn segment_of_row(row: usize, height: usize, n_segments: usize) -> u8 {
    let s = (row * n_segments) / height;
    (s.min(n_segments - 1) + 1) as u8
}

/// Min-max normalization to [0,1]. A constant image has no dynamic range and
/// is rejected.
pub fn normalize<T: Scalar>(image: &Array2<T>) -> Result<Array2<T>> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in image.iter() {
        if !v.is_finite() {
            return Err(Error::degenerate("image contains non-finite values"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if image.is_empty() {
        return Err(Error::degenerate("empty image"));
    }
    if hi == lo {
        return Err(Error::degenerate("constant image cannot be normalized"));
    }
    let span = hi - lo;
    Ok(image.mapv(|v| (v - lo) / span))
}

fn apply_noise_brightness_contrast<T: Scalar>(
    image: &Array2<T>,
    noise_sigma: f64,
    brightness: f64,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<T> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = image.mapv(|v| v.to_real());
    if noise_sigma > 0.0 {
        for v in out.iter_mut() {
            *v += noise_sigma * normal.sample(rng);
        }
    }
    for v in out.iter_mut() {
        *v *= brightness;
    }
    let mean = out.sum() / out.len() as f64;
    for v in out.iter_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    out.mapv(T::from_real)
}

/// Augmentation with explicit factors; see [`augment`] for the sampled form.
pub fn augment_with<T: Scalar>(
    image: &Array2<T>,
    noise_sigma: f64,
    brightness: f64,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<T>> {
    let pre = apply_noise_brightness_contrast(image, noise_sigma, brightness, contrast, rng);
    normalize(&pre)
}

/// Training-time augmentation: additive Gaussian noise (variance 0.02),
/// brightness and contrast scaled by independent factors in [0.8, 1.2],
/// then min-max renormalization to [0,1].
pub fn augment<T: Scalar>(image: &Array2<T>, rng: &mut ChaCha8Rng) -> Result<Array2<T>> {
    let brightness = uniform_in(rng, AUG_FACTOR_RANGE);
    let contrast = uniform_in(rng, AUG_FACTOR_RANGE);
    augment_with(image, AUG_NOISE_VAR.sqrt(), brightness, contrast, rng)
}

/// Generate one healthy case from its seed.
pub fn generate_phantom<T: Scalar>(cfg: &PhantomConfig, seed: u64) -> Result<CaseRecord<T>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(seed, tag::PHANTOM_CASE, &[]);

    let halfwidth = uniform_in(&mut rng, cfg.cord_halfwidth);
    let hw_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let hw_wl = uniform_in(&mut rng, cfg.wobble_wavelength);
    let wobble_amp = uniform_in(&mut rng, cfg.wobble_amplitude);
    let wobble_wl = uniform_in(&mut rng, cfg.wobble_wavelength);
    let wobble_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let drift = (rng.random::<f64>() - 0.5) * 6.0;
    let margin = uniform_in(&mut rng, cfg.csf_margin);
    let cord_level = cfg.cord_level + (rng.random::<f64>() - 0.5) * 2.0 * cfg.level_jitter;
    let csf_level = cfg.csf_level + (rng.random::<f64>() - 0.5) * 2.0 * cfg.level_jitter;
    let mod_amp = cfg.intensity_mod * rng.random::<f64>();
    let mod_wl = uniform_in(&mut rng, cfg.wobble_wavelength);
    let mod_phase = rng.random::<f64>() * std::f64::consts::TAU;

    let mut tissue = Array2::<u8>::zeros((h, w));
    let mut roi = Array2::<u8>::zeros((h, w));
    let mut segments = Array2::<u8>::zeros((h, w));
    let mut image = Array2::<f64>::zeros((h, w));
    let normal = Normal::new(0.0, 1.0).unwrap();

    for y in 0..h {
        let t = y as f64 / h as f64;
        let center = w as f64 / 2.0
            + wobble_amp * (std::f64::consts::TAU * y as f64 / wobble_wl + wobble_phase).sin()
            + drift * (t - 0.5);
        let hw = halfwidth
            * (1.0 + cfg.halfwidth_mod * (std::f64::consts::TAU * y as f64 / hw_wl + hw_phase).sin());
        let long_mod = 1.0 + mod_amp * (std::f64::consts::TAU * y as f64 / mod_wl + mod_phase).sin();
        let seg = segment_of_row(y, h, cfg.n_segments);
        for x in 0..w {
            let d = (x as f64 - center).abs();
            let (label, base) = if d <= hw {
                (TISSUE_CORD, cord_level * long_mod)
            } else if d <= hw + margin {
                (TISSUE_CSF, csf_level * (1.0 + 0.3 * (long_mod - 1.0)))
            } else {
                (TISSUE_BACKGROUND, cfg.background_level)
            };
            tissue[(y, x)] = label;
            if label == TISSUE_CORD {
                roi[(y, x)] = 1;
                segments[(y, x)] = seg;
            }
            image[(y, x)] = base + cfg.noise_sigma * normal.sample(&mut rng);
        }
    }

    let image = normalize(&image)?.mapv(T::from_real);
    Ok(CaseRecord {
        id: format!("case_{seed:08x}"),
        image,
        tissue,
        roi,
        segments,
        anomaly: Array2::zeros((h, w)),
        is_anomalous: false,
        seed,
        gt_segments: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a: CaseRecord<f32> = generate_phantom(&cfg, 42).unwrap();
        let b: CaseRecord<f32> = generate_phantom(&cfg, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.tissue, b.tissue);
        let c: CaseRecord<f32> = generate_phantom(&cfg, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn rasters_are_consistent_and_segments_near_equal() {
        let cfg = PhantomConfig::default();
        let case: CaseRecord<f32> = generate_phantom(&cfg, 1).unwrap();
        case.validate().unwrap();
        // every row holds cord pixels, so segment bands are H/6 rows each
        let mut rows_per_seg = vec![0usize; cfg.n_segments];
        for y in 0..cfg.height {
            let seg = segment_of_row(y, cfg.height, cfg.n_segments) as usize;
            rows_per_seg[seg - 1] += 1;
        }
        let (lo, hi) = (
            rows_per_seg.iter().min().unwrap(),
            rows_per_seg.iter().max().unwrap(),
        );
        assert!(hi - lo <= 1, "segment row bands differ by more than one row");
        // cord pixels form one contiguous run per row
        for y in 0..cfg.height {
            let xs: Vec<usize> =
                (0..cfg.width).filter(|&x| case.roi[(y, x)] == 1).collect();
            assert!(!xs.is_empty());
            assert_eq!(xs.last().unwrap() - xs[0] + 1, xs.len());
        }
    }

    #[test]
    fn intensity_ordering_background_cord_csf() {
        let cfg = PhantomConfig::default();
        for seed in 0..25 {
            let case: CaseRecord<f64> = generate_phantom(&cfg, seed).unwrap();
            let s = region_stats(&case.image, &case.tissue).unwrap();
            assert!(s.background.mean < s.cord.mean);
            assert!(s.cord.mean < s.csf.mean);
            let (lo, hi) = (
                case.image.iter().cloned().fold(f64::INFINITY, f64::min),
                case.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn region_stats_matches_two_pass_oracle() {
        let cfg = PhantomConfig {
            height: 64,
            width: 64,
            cord_halfwidth: (6.0, 8.0),
            wobble_amplitude: (1.0, 3.0),
            csf_margin: (3.0, 5.0),
            ..PhantomConfig::default()
        };
        let case: CaseRecord<f64> = generate_phantom(&cfg, 9).unwrap();
        let got = region_stats(&case.image, &case.tissue).unwrap();
        for class in [TISSUE_BACKGROUND, TISSUE_CORD, TISSUE_CSF] {
            let vals: Vec<f64> = case
                .image
                .iter()
                .zip(case.tissue.iter())
                .filter(|(_, &t)| t == class)
                .map(|(&v, _)| v)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let s = match class {
                TISSUE_BACKGROUND => got.background,
                TISSUE_CORD => got.cord,
                _ => got.csf,
            };
            assert!((s.mean - mean).abs() < 1e-12);
            assert!((s.var - var).abs() < 1e-12);
            assert_eq!(s.count, vals.len());
        }
    }

    #[test]
    fn region_stats_rejects_empty_class() {
        let image = Array2::<f64>::zeros((4, 4));
        let tissue = Array2::<u8>::ones((4, 4));
        assert!(matches!(
            region_stats(&image, &tissue),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn two_valued_image_has_zero_variances() {
        let mut image = Array2::<f64>::zeros((4, 4));
        let mut tissue = Array2::<u8>::zeros((4, 4));
        for x in 0..4 {
            image[(0, x)] = 0.5;
            tissue[(0, x)] = TISSUE_CORD;
            image[(1, x)] = 0.9;
            tissue[(1, x)] = TISSUE_CSF;
        }
        let s = region_stats(&image, &tissue).unwrap();
        assert_eq!(s.cord.var, 0.0);
        assert_eq!(s.csf.var, 0.0);
        assert_eq!(s.background.var, 0.0);
    }

    #[test]
    fn anomaly_specs_respect_bounds() {
        let cfg = PhantomConfig::default();
        let case: CaseRecord<f64> = generate_phantom(&cfg, 3).unwrap();
        let stats = region_stats(&case.image, &case.tissue).unwrap();
        let (m_lo, m_hi) = ord(stats.cord.mean, stats.csf.mean);
        let mut r = rng(5);
        for _ in 0..10_000 {
            let spec = sample_anomaly(&case, &stats, &mut r).unwrap();
            let local = (0..cfg.width)
                .filter(|&x| case.roi[(spec.center.0, x)] == 1)
                .count() as f64;
            assert!(spec.width >= ANOMALY_WIDTH_FRAC.0 * local - 1e-9);
            assert!(spec.width <= ANOMALY_WIDTH_FRAC.1 * local + 1e-9);
            assert!(spec.length >= ANOMALY_LENGTH_MULT.0 * spec.width - 1e-9);
            assert!(spec.length <= ANOMALY_LENGTH_MULT.1 * spec.width + 1e-9);
            assert!(spec.signal_mean > m_lo && spec.signal_mean < m_hi);
            assert!(case.roi[spec.center] == 1);
        }
    }

    #[test]
    fn embedded_anomalies_are_brighter_than_cord() {
        let cfg = PhantomConfig::default();
        let mut brighter = 0;
        for seed in 0..100 {
            let case: CaseRecord<f64> = generate_phantom(&cfg, seed).unwrap();
            let mut r = rng(seed ^ 0xabcd);
            let sick = embed_anomalies(&case, 1 + (seed as usize) % 3, &mut r).unwrap();
            assert!(sick.is_anomalous);
            assert!(!sick.gt_segments.is_empty());
            assert!(sick.gt_segments.iter().all(|&s| (1..=6).contains(&s)));
            let mut inside = (0.0, 0usize);
            let mut outside = (0.0, 0usize);
            for ((&v, &a), &r) in sick.image.iter().zip(sick.anomaly.iter()).zip(sick.roi.iter()) {
                if r != 1 {
                    continue;
                }
                if a == 1 {
                    inside = (inside.0 + v, inside.1 + 1);
                } else {
                    outside = (outside.0 + v, outside.1 + 1);
                }
            }
            assert!(inside.1 > 0);
            if inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64 {
                brighter += 1;
            }
        }
        assert!(brighter >= 95, "only {brighter}/100 cases had brighter lesions");
    }

    #[test]
    fn embed_rejects_bad_count_and_non_healthy() {
        let cfg = PhantomConfig::default();
        let case: CaseRecord<f32> = generate_phantom(&cfg, 7).unwrap();
        assert!(matches!(embed_anomalies(&case, 0, &mut rng(0)), Err(Error::Argument(_))));
        assert!(matches!(embed_anomalies(&case, 4, &mut rng(0)), Err(Error::Argument(_))));
        let sick = embed_anomalies(&case, 1, &mut rng(0)).unwrap();
        assert!(matches!(
            embed_anomalies(&sick, 1, &mut rng(1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn normalize_maps_to_unit_range_and_rejects_constant() {
        let img = ndarray::arr2(&[[2.0f64, 4.0], [6.0, 10.0]]);
        let n = normalize(&img).unwrap();
        assert_eq!(n, ndarray::arr2(&[[0.0, 0.25], [0.5, 1.0]]));
        let flat = Array2::<f64>::from_elem((3, 3), 0.7);
        assert!(matches!(normalize(&flat), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn augment_identity_with_unit_factors_and_no_noise() {
        let cfg = PhantomConfig::default();
        let case: CaseRecord<f64> = generate_phantom(&cfg, 11).unwrap();
        let out = augment_with(&case.image, 0.0, 1.0, 1.0, &mut rng(1)).unwrap();
        let max_diff = out
            .iter()
            .zip(case.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "identity augmentation drifted by {max_diff}");
    }

    #[test]
    fn augment_noise_variance_matches_spec() {
        let img = Array2::<f64>::from_elem((1000, 1000), 0.5);
        let noisy =
            apply_noise_brightness_contrast(&img, AUG_NOISE_VAR.sqrt(), 1.0, 1.0, &mut rng(3));
        let mean = noisy.sum() / noisy.len() as f64;
        let var = noisy.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / noisy.len() as f64;
        assert!(
            (var - AUG_NOISE_VAR).abs() < 0.002,
            "noise variance {var} not within 0.002 of {AUG_NOISE_VAR}"
        );
    }

    #[test]
    fn augment_output_stays_in_unit_range() {
        let cfg = PhantomConfig::default();
        let case: CaseRecord<f32> = generate_phantom(&cfg, 13).unwrap();
        let mut r = rng(77);
        for _ in 0..5 {
            let out = augment(&case.image, &mut r).unwrap();
            for &v in out.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn oversized_cord_is_a_config_error() {
        let cfg = PhantomConfig {
            width: 32,
            cord_halfwidth: (14.0, 18.0),
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}
