//! Prior stages that turn a black-and-white page into the generator inputs:
//! the shaded grayscale `x_g` and the rough colorization `x_col`.
//!
//! Real deployments bind external models through [`HttpPrior`]. Training and
//! desk-scale use rely on the built-in stand-ins: [`IdentityShading`],
//! [`synthetic_rough_color`] (training-time degradation of the ground truth)
//! and [`HintTintPrior`] (inference-time tint from hints and a reference).

use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{
    lab_pixel_to_srgb, rgb_to_lab, srgb_pixel_to_lab, ImagePlane, ImageStack, ValueRange,
};
use crate::data::HintSet;
use crate::error::{Error, Result};
use crate::raster;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("prior returned {got:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{0}")]
    Failed(String),
}

impl From<Error> for PriorError {
    fn from(e: Error) -> Self {
        PriorError::Failed(e.to_string())
    }
}

/// `I_bw -> x_g`.
pub trait ShadingPrior: Send + Sync {
    fn shade(&self, page: &ImagePlane) -> Result<ImagePlane, PriorError>;
}

/// `(I_bw, hints, reference) -> x_col`.
pub trait RoughColorPrior: Send + Sync {
    fn colorize(
        &self,
        page: &ImagePlane,
        hints: Option<&HintSet>,
        reference: Option<&ImageStack>,
    ) -> Result<ImageStack, PriorError>;
}

/// Runs a shading prior and enforces that it preserves dimensions.
pub fn run_shading(prior: &dyn ShadingPrior, page: &ImagePlane) -> Result<ImagePlane> {
    let wrap = |source| Error::Prior {
        stage: "shading",
        source,
    };
    let out = prior.shade(page).map_err(wrap)?;
    if out.dims() != page.dims() {
        return Err(wrap(PriorError::DimensionMismatch {
            expected: page.dims(),
            got: out.dims(),
        }));
    }
    Ok(out)
}

/// Runs a rough-color prior and enforces that it preserves dimensions.
pub fn run_rough_color(
    prior: &dyn RoughColorPrior,
    page: &ImagePlane,
    hints: Option<&HintSet>,
    reference: Option<&ImageStack>,
) -> Result<ImageStack> {
    let wrap = |source| Error::Prior {
        stage: "rough_color",
        source,
    };
    let out = prior.colorize(page, hints, reference).map_err(wrap)?;
    if out.dims() != page.dims() {
        return Err(wrap(PriorError::DimensionMismatch {
            expected: page.dims(),
            got: out.dims(),
        }));
    }
    Ok(out)
}

/// Passes the page through unchanged; during training `x_g` is the grayscale
/// transform of the ground truth itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityShading;

pub fn identity_shading(page: &ImagePlane) -> ImagePlane {
    page.clone()
}

impl ShadingPrior for IdentityShading {
    fn shade(&self, page: &ImagePlane) -> Result<ImagePlane, PriorError> {
        Ok(identity_shading(page))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub palette_size: usize,
    pub chroma_downsample: usize,
    pub patch_perturb_count: usize,
    /// Maximum a*/b* shift of a perturbed rectangle, in CIELAB units.
    pub patch_perturb_magnitude: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            palette_size: 12,
            chroma_downsample: 4,
            patch_perturb_count: 3,
            patch_perturb_magnitude: 20.0,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// Settings under which the degrader leaves its input unchanged.
    pub fn identity() -> Self {
        Self {
            palette_size: usize::MAX,
            chroma_downsample: 1,
            patch_perturb_count: 0,
            patch_perturb_magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette_size < 2 {
            return Err(Error::Config("palette_size must be >= 2".into()));
        }
        if self.chroma_downsample < 1 {
            return Err(Error::Config("chroma_downsample must be >= 1".into()));
        }
        if !(self.patch_perturb_magnitude >= 0.0) {
            return Err(Error::Config("patch_perturb_magnitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// Maps a CIELAB color into sRGB, pulling chroma toward neutral (keeping
/// L*) until it fits the gamut.
pub(crate) fn fit_to_gamut(lab: [f64; 3]) -> [f64; 3] {
    let in_gamut = |rgb: [f64; 3]| rgb.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v));
    let rgb = lab_pixel_to_srgb(lab);
    if in_gamut(rgb) {
        return rgb.map(|v| v.clamp(0.0, 1.0));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if in_gamut(lab_pixel_to_srgb([lab[0], lab[1] * mid, lab[2] * mid])) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lab_pixel_to_srgb([lab[0], lab[1] * lo, lab[2] * lo]).map(|v| v.clamp(0.0, 1.0))
}

fn lab_to_stack(height: usize, width: usize, lab: &[[f64; 3]]) -> Result<ImageStack> {
    let data = lab.iter().flat_map(|p| fit_to_gamut(*p)).collect();
    ImageStack::srgb(height, width, data)
}

/// Deterministic k-means over chroma points, returning the quantized points.
fn quantize_chroma(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut distinct: Vec<[f64; 2]> = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite chroma"));
    distinct.dedup();
    if distinct.len() <= k {
        return points.to_vec();
    }
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    // k-means++ seeding over the distinct colors.
    let mut centers = vec![distinct[rng.random_range(0..distinct.len())]];
    let mut dist: Vec<f64> = distinct.iter().map(|&p| d2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = distinct.len() - 1;
        for (i, d) in dist.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = distinct[pick];
        centers.push(c);
        for (d, &p) in dist.iter_mut().zip(&distinct) {
            *d = d.min(d2(p, c));
        }
    }
    let nearest = |p: [f64; 2], centers: &[[f64; 2]]| {
        let mut best = 0;
        for (i, &c) in centers.iter().enumerate() {
            if d2(p, c) < d2(p, centers[best]) {
                best = i;
            }
        }
        best
    };
    for _ in 0..10 {
        let mut sums = vec![[0.0f64; 3]; k];
        for &p in points {
            let i = nearest(p, &centers);
            sums[i][0] += p[0];
            sums[i][1] += p[1];
            sums[i][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    points.iter().map(|&p| centers[nearest(p, &centers)]).collect()
}

/// Training-time stand-in for the rough colorization stage: the ground truth
/// with block-averaged chroma, a reduced chroma palette and a few shifted
/// rectangles. L* is kept.
pub fn synthetic_rough_color(img: &ImageStack, cfg: &DegradationConfig) -> Result<ImageStack> {
    cfg.validate()?;
    let lab = rgb_to_lab(&img.to_range(ValueRange::Unit)?)?;
    let (h, w) = lab.dims();
    let f = cfg.chroma_downsample;
    let (bh, bw) = (h.div_ceil(f), w.div_ceil(f));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut blocks = vec![[0.0f64; 2]; bh * bw];
    let mut counts = vec![0.0f64; bh * bw];
    for y in 0..h {
        for x in 0..w {
            let p = lab.pixel(y, x);
            let b = (y / f) * bw + x / f;
            blocks[b][0] += p[1];
            blocks[b][1] += p[2];
            counts[b] += 1.0;
        }
    }
    for (b, n) in blocks.iter_mut().zip(&counts) {
        b[0] /= n;
        b[1] /= n;
    }
    let blocks = quantize_chroma(&blocks, cfg.palette_size, &mut rng);

    let mut out: Vec<[f64; 3]> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = blocks[(y / f) * bw + x / f];
            out.push([lab.pixel(y, x)[0], c[0], c[1]]);
        }
    }

    for _ in 0..cfg.patch_perturb_count {
        let rh = rng.random_range((h / 8).max(1)..=(h / 3).max(1));
        let rw = rng.random_range((w / 8).max(1)..=(w / 3).max(1));
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let m = cfg.patch_perturb_magnitude;
        let (da, db) = if m > 0.0 {
            (rng.random_range(-m..=m), rng.random_range(-m..=m))
        } else {
            (0.0, 0.0)
        };
        for y in top..top + rh {
            for x in left..left + rw {
                let p = &mut out[y * w + x];
                p[1] = (p[1] + da).clamp(-128.0, 127.0);
                p[2] = (p[2] + db).clamp(-128.0, 127.0);
            }
        }
    }
    lab_to_stack(h, w, &out)
}

/// Inference-time stand-in for the rough colorization model: L* from the
/// page, chroma from the reference image (resized to the page) when present,
/// and each hint's chroma painted over a disc of its radius.
#[derive(Debug, Clone, Copy, Default)]
pub struct HintTintPrior;

impl RoughColorPrior for HintTintPrior {
    fn colorize(
        &self,
        page: &ImagePlane,
        hints: Option<&HintSet>,
        reference: Option<&ImageStack>,
    ) -> Result<ImageStack, PriorError> {
        let (h, w) = page.dims();
        let page = page.to_range(ValueRange::Unit)?;
        let ref_lab = match reference {
            Some(r) => Some(rgb_to_lab(&raster::resize_stack(r, h, w)?)?),
            None => None,
        };
        let mut lab: Vec<[f64; 3]> = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let v = page.get(y, x);
                let l = srgb_pixel_to_lab([v, v, v])[0];
                let (a, b) = match &ref_lab {
                    Some(r) => {
                        let p = r.pixel(y, x);
                        (p[1], p[2])
                    }
                    None => (0.0, 0.0),
                };
                lab.push([l, a, b]);
            }
        }
        if let Some(hints) = hints {
            for hint in hints.hints() {
                let c = srgb_pixel_to_lab(hint.color);
                let r = hint.radius as isize;
                let (cx, cy) = (hint.x as isize, hint.y as isize);
                for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                    for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                        if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                            let p = &mut lab[y as usize * w + x as usize];
                            p[1] = c[1];
                            p[2] = c[2];
                        }
                    }
                }
            }
        }
        Ok(lab_to_stack(h, w, &lab)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRole {
    Shading,
    RoughColor,
}

/// Request body sent to an external prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorRequest {
    pub role: PriorRole,
    /// Base64 PNG of the page.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hints: Option<crate::data::HintDocument>,
    /// Base64 PNG of the reference image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Client for a prior model served over HTTP. The request is a JSON
/// [`PriorRequest`]; the response body is one PNG.
#[derive(Debug, Clone)]
pub struct HttpPrior {
    endpoint: String,
    role: PriorRole,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

pub const DEFAULT_PRIOR_TIMEOUT: Duration = Duration::from_secs(120);

pub fn external_prior_adapter(endpoint: &str, role: PriorRole) -> Result<HttpPrior> {
    HttpPrior::new(endpoint, role, DEFAULT_PRIOR_TIMEOUT)
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

impl HttpPrior {
    pub fn new(endpoint: &str, role: PriorRole, timeout: Duration) -> Result<Self> {
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(Error::Config(format!("prior endpoint {endpoint:?} is not an http(s) URL")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            role,
            timeout,
            client,
        })
    }

    pub fn role(&self) -> PriorRole {
        self.role
    }

    fn classify(&self, e: reqwest::Error) -> PriorError {
        if e.is_timeout() {
            PriorError::Timeout(self.timeout)
        } else if e.is_connect() {
            PriorError::Unreachable(e.to_string())
        } else {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(": ");
                msg.push_str(&s.to_string());
                src = s.source();
            }
            PriorError::Transport(msg)
        }
    }

    fn call(&self, req: &PriorRequest, expected: (usize, usize)) -> Result<Vec<u8>, PriorError> {
        let body = serde_json::to_vec(req).map_err(|e| PriorError::Failed(e.to_string()))?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| self.classify(e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(PriorError::MalformedResponse(format!("status {status}")));
        }
        let bytes = resp.bytes().map_err(|e| self.classify(e))?;
        let dims = image::ImageReader::new(std::io::Cursor::new(&bytes[..]))
            .with_guessed_format()
            .ok()
            .and_then(|r| r.into_dimensions().ok())
            .ok_or_else(|| PriorError::MalformedResponse("body is not a raster image".into()))?;
        let got = (dims.1 as usize, dims.0 as usize);
        if got != expected {
            return Err(PriorError::DimensionMismatch { expected, got });
        }
        Ok(bytes.to_vec())
    }

    fn request(
        &self,
        page: &ImagePlane,
        hints: Option<&HintSet>,
        reference: Option<&ImageStack>,
    ) -> Result<PriorRequest, PriorError> {
        Ok(PriorRequest {
            role: self.role,
            image: b64(&raster::encode_plane_png(page)?),
            hints: hints.map(HintSet::to_document),
            reference: match reference {
                Some(r) => Some(b64(&raster::encode_stack_png(r)?)),
                None => None,
            },
        })
    }
}

impl ShadingPrior for HttpPrior {
    fn shade(&self, page: &ImagePlane) -> Result<ImagePlane, PriorError> {
        let req = self.request(page, None, None)?;
        let bytes = self.call(&req, page.dims())?;
        raster::decode_plane(&bytes).map_err(|e| PriorError::MalformedResponse(e.to_string()))
    }
}

impl RoughColorPrior for HttpPrior {
    fn colorize(
        &self,
        page: &ImagePlane,
        hints: Option<&HintSet>,
        reference: Option<&ImageStack>,
    ) -> Result<ImageStack, PriorError> {
        let req = self.request(page, hints, reference)?;
        let bytes = self.call(&req, page.dims())?;
        raster::decode_stack(&bytes).map_err(|e| PriorError::MalformedResponse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::to_grayscale;
    use crate::data::{synthetic_page, Hint};

    #[test]
    fn identity_shading_is_pass_through() {
        let p = to_grayscale(&synthetic_page(24, 40, 1)).unwrap();
        let once = identity_shading(&p);
        assert_eq!(once, p);
        assert_eq!(identity_shading(&once), once);
        assert_eq!(IdentityShading.shade(&p).unwrap().dims(), (24, 40));
    }

    #[test]
    fn degradation_no_op_limit() {
        let img = synthetic_page(32, 32, 2);
        let out = synthetic_rough_color(&img, &DegradationConfig::identity()).unwrap();
        assert!(img.max_abs_diff(&out).unwrap() < 1e-6);
    }

    #[test]
    fn degradation_blocks_are_constant() {
        // Mid-lightness, low-chroma colors stay in gamut, so no chroma is pulled
        // in during gamut fitting.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..32 * 32 {
            let lab = [rng.random_range(45.0..65.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            data.extend(lab_pixel_to_srgb(lab).map(|v| v.clamp(0.0, 1.0)));
        }
        let img = ImageStack::srgb(32, 32, data).unwrap();
        let cfg = DegradationConfig {
            patch_perturb_count: 0,
            chroma_downsample: 4,
            ..DegradationConfig::default()
        };
        let lab = rgb_to_lab(&synthetic_rough_color(&img, &cfg).unwrap()).unwrap();
        for by in 0..8 {
            for bx in 0..8 {
                let first = lab.pixel(by * 4, bx * 4);
                for y in by * 4..by * 4 + 4 {
                    for x in bx * 4..bx * 4 + 4 {
                        let p = lab.pixel(y, x);
                        assert!((p[1] - first[1]).abs() < 1e-6, "{p:?} vs {first:?}");
                        assert!((p[2] - first[2]).abs() < 1e-6, "{p:?} vs {first:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn degradation_is_seeded_and_keeps_luminance() {
        let img = synthetic_page(48, 40, 4);
        let cfg = DegradationConfig {
            seed: 11,
            ..DegradationConfig::default()
        };
        let a = synthetic_rough_color(&img, &cfg).unwrap();
        let b = synthetic_rough_color(&img, &cfg).unwrap();
        assert_eq!(a, b);
        let la = rgb_to_lab(&a).unwrap();
        let li = rgb_to_lab(&img).unwrap();
        for (p, q) in la.pixels().zip(li.pixels()) {
            assert!((p[0] - q[0]).abs() / 100.0 <= 2.0 / 255.0, "{p:?} vs {q:?}");
        }
        let c = synthetic_rough_color(&img, &DegradationConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degradation_config_validation() {
        let bad = DegradationConfig {
            palette_size: 1,
            ..DegradationConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DegradationConfig {
            chroma_downsample: 0,
            ..DegradationConfig::default()
        };
        assert!(synthetic_rough_color(&synthetic_page(8, 8, 0), &bad).is_err());
    }

    #[test]
    fn hint_tint_paints_hints_and_keeps_dims() {
        let page = ImagePlane::filled(32, 48, ValueRange::Unit, 0.6).unwrap();
        let hints = HintSet::new(
            48,
            32,
            vec![Hint {
                x: 10,
                y: 12,
                color: [0.9, 0.2, 0.2],
                radius: 3,
            }],
        )
        .unwrap();
        let out = HintTintPrior.colorize(&page, Some(&hints), None).unwrap();
        assert_eq!(out.dims(), (32, 48));
        let hinted = out.pixel(12, 10);
        let plain = out.pixel(0, 0);
        assert!(hinted[0] > hinted[1] + 0.1, "{hinted:?}");
        assert!((plain[0] - plain[1]).abs() < 1e-6);
        let reference = synthetic_page(16, 16, 5);
        let with_ref = HintTintPrior.colorize(&page, None, Some(&reference)).unwrap();
        assert_eq!(with_ref.dims(), (32, 48));
    }

    struct Shrinking;

    impl ShadingPrior for Shrinking {
        fn shade(&self, page: &ImagePlane) -> Result<ImagePlane, PriorError> {
            Ok(ImagePlane::filled(page.height() / 2, page.width(), ValueRange::Unit, 0.0)?)
        }
    }

    #[test]
    fn dimension_changes_are_rejected_centrally() {
        let page = ImagePlane::filled(8, 8, ValueRange::Unit, 0.5).unwrap();
        let err = run_shading(&Shrinking, &page).unwrap_err();
        assert!(matches!(
            err,
            Error::Prior {
                stage: "shading",
                source: PriorError::DimensionMismatch { .. }
            }
        ));
    }

    #[test]
    fn adapter_rejects_non_http_endpoints() {
        assert!(external_prior_adapter("ftp://x", PriorRole::Shading).is_err());
        assert!(external_prior_adapter("http://127.0.0.1:9/p", PriorRole::Shading).is_ok());
    }
}
