//! Color rasters and the color math used around the model: sRGB <-> CIELAB
//! (D65), BT.601 grayscale, and the user-weighted chroma blend applied as the
//! final post-processing stage.
//!
//! Rasters store `f64` samples so chroma interpolation is exact enough to
//! compare planes at 1e-6 in native CIELAB units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma weights applied to gamma-encoded sRGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// IEC 61966-2-1 linear sRGB -> XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404548360214087, -1.5371388501025751, -0.498531546868481],
    [-0.9692663898756538, 1.876010928842491, 0.041556082346673545],
    [0.05564341960421367, -0.20402585426769818, 1.057225162457929],
];

/// Values this far outside [0, 1] after CIELAB -> sRGB are clamped without
/// being reported as gamut clips.
const CLIP_SLACK: f64 = 1e-6;

const LAB_EPSILON: f64 = 6.0 / 29.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`, the model-internal range.
    Signed,
    /// CIELAB native units: L* in [0, 100], a*/b* in [-128, 127].
    Native,
}

impl ValueRange {
    fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
            ValueRange::Native => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Srgb,
    Lab,
}

/// Single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, range: ValueRange, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image plane needs height, width >= 1"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "plane data has {} samples, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if range == ValueRange::Native {
            return Err(Error::contract("grayscale planes are unit or signed"));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::contract(format!(
                "plane value {v} outside declared {range:?} range"
            )));
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, range: ValueRange, value: f64) -> Result<Self> {
        Self::new(height, width, range, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Same plane expressed in `range`.
    pub fn to_range(&self, range: ValueRange) -> Result<Self> {
        let data = match (self.range, range) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Signed) => {
                self.data.iter().map(|v| v * 2.0 - 1.0).collect()
            }
            (ValueRange::Signed, ValueRange::Unit) => {
                self.data.iter().map(|v| (v + 1.0) * 0.5).collect()
            }
            (a, b) => return Err(Error::contract(format!("cannot convert plane {a:?} -> {b:?}"))),
        };
        Ok(Self {
            height: self.height,
            width: self.width,
            range,
            data,
        })
    }

    /// Replicates the plane into an sRGB stack (gray pixels).
    pub fn to_stack(&self) -> ImageStack {
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageStack {
            height: self.height,
            width: self.width,
            space: ColorSpace::Srgb,
            range: self.range,
            data,
        }
    }
}

/// Three-channel raster, row-major with interleaved channels (HxWx3).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    height: usize,
    width: usize,
    space: ColorSpace,
    range: ValueRange,
    data: Vec<f64>,
}

impl ImageStack {
    pub fn new(
        height: usize,
        width: usize,
        space: ColorSpace,
        range: ValueRange,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image stack needs height, width >= 1"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "stack data has {} samples, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        match (space, range) {
            (ColorSpace::Lab, ValueRange::Native) => {
                for px in data.chunks_exact(3) {
                    let ok = (0.0..=100.0).contains(&px[0])
                        && (-128.0..=127.0).contains(&px[1])
                        && (-128.0..=127.0).contains(&px[2]);
                    if !ok {
                        return Err(Error::contract(format!(
                            "CIELAB pixel {px:?} outside L*[0,100], a*b*[-128,127]"
                        )));
                    }
                }
            }
            (ColorSpace::Lab, r) => {
                return Err(Error::contract(format!("CIELAB stacks use native units, not {r:?}")))
            }
            (ColorSpace::Srgb, ValueRange::Native) => {
                return Err(Error::contract("sRGB stacks are unit or signed"))
            }
            (ColorSpace::Srgb, r) => {
                let (lo, hi) = r.bounds();
                if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
                    return Err(Error::contract(format!(
                        "sRGB value {v} outside declared {r:?} range"
                    )));
                }
            }
        }
        Ok(Self {
            height,
            width,
            space,
            range,
            data,
        })
    }

    pub fn srgb(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Srgb, ValueRange::Unit, data)
    }

    pub fn lab(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Lab, ValueRange::Native, data)
    }

    /// Unit-range sRGB image filled with one color.
    pub fn solid(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::srgb(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::srgb(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(3)
    }

    /// One channel as a flat row-major vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Same sRGB image expressed in `range`.
    pub fn to_range(&self, range: ValueRange) -> Result<Self> {
        if self.space != ColorSpace::Srgb {
            return Err(Error::contract("range conversion applies to sRGB stacks"));
        }
        let data = match (self.range, range) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Signed) => {
                self.data.iter().map(|v| v * 2.0 - 1.0).collect()
            }
            (ValueRange::Signed, ValueRange::Unit) => {
                self.data.iter().map(|v| (v + 1.0) * 0.5).collect()
            }
            (a, b) => return Err(Error::contract(format!("cannot convert stack {a:?} -> {b:?}"))),
        };
        Ok(Self {
            range,
            data,
            ..*self
        })
    }

    pub fn max_abs_diff(&self, other: &ImageStack) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// User-controlled chroma interpolation weight in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub fn new(lambda_ab: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_ab) {
            return Err(Error::contract(format!(
                "blend weight {lambda_ab} outside [0, 1]"
            )));
        }
        Ok(Self(lambda_ab))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for BlendWeight {
    fn default() -> Self {
        Self(0.8)
    }
}

impl TryFrom<f64> for BlendWeight {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BlendWeight> for f64 {
    fn from(w: BlendWeight) -> f64 {
        w.0
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.0031308 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// D65 white as the image of sRGB (1,1,1), so white maps to a*=b*=0 exactly.
fn white_point() -> [f64; 3] {
    mat_vec(&RGB_TO_XYZ, [1.0, 1.0, 1.0])
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * LAB_EPSILON * LAB_EPSILON) + 4.0 / 29.0
    }
}

fn lab_f_inv(u: f64) -> f64 {
    if u > LAB_EPSILON {
        u * u * u
    } else {
        3.0 * LAB_EPSILON * LAB_EPSILON * (u - 4.0 / 29.0)
    }
}

/// Converts one gamma-encoded sRGB triple in `[0, 1]` to CIELAB.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let w = white_point();
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one CIELAB triple to unclipped sRGB.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white_point();
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];
    mat_vec(&XYZ_TO_RGB, xyz).map(linear_to_srgb)
}

pub fn rgb_to_lab(img: &ImageStack) -> Result<ImageStack> {
    if img.space != ColorSpace::Srgb {
        return Err(Error::contract("rgb_to_lab expects an sRGB stack"));
    }
    if img.range != ValueRange::Unit {
        return Err(Error::contract("rgb_to_lab expects unit-range values"));
    }
    let data = img
        .pixels()
        .flat_map(|p| srgb_pixel_to_lab([p[0], p[1], p[2]]))
        .collect();
    Ok(ImageStack {
        space: ColorSpace::Lab,
        range: ValueRange::Native,
        data,
        ..*img
    })
}

/// Result of CIELAB -> sRGB; `clipped` counts channel samples that fell
/// outside the sRGB gamut and were clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct GamutMapped {
    pub image: ImageStack,
    pub clipped: usize,
}

pub fn lab_to_rgb(img: &ImageStack) -> Result<GamutMapped> {
    if img.space != ColorSpace::Lab {
        return Err(Error::contract("lab_to_rgb expects a CIELAB stack"));
    }
    let mut clipped = 0;
    let mut data = Vec::with_capacity(img.data.len());
    for p in img.pixels() {
        for v in lab_pixel_to_srgb([p[0], p[1], p[2]]) {
            if !(-CLIP_SLACK..=1.0 + CLIP_SLACK).contains(&v) {
                clipped += 1;
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(GamutMapped {
        image: ImageStack {
            space: ColorSpace::Srgb,
            range: ValueRange::Unit,
            data,
            ..*img
        },
        clipped,
    })
}

/// Keeps L* from `y_hat` and interpolates a*, b* toward `x_col` by `w`.
pub fn blend_chroma(y_hat: &ImageStack, x_col: &ImageStack, w: BlendWeight) -> Result<ImageStack> {
    if y_hat.space != ColorSpace::Lab || x_col.space != ColorSpace::Lab {
        return Err(Error::contract("blend_chroma expects CIELAB stacks"));
    }
    if y_hat.dims() != x_col.dims() {
        return Err(Error::shape(format!(
            "blend inputs {:?} vs {:?}",
            y_hat.dims(),
            x_col.dims()
        )));
    }
    let lambda = w.get();
    let data = y_hat
        .pixels()
        .zip(x_col.pixels())
        .flat_map(|(g, r)| {
            [
                g[0],
                g[1] * (1.0 - lambda) + r[1] * lambda,
                g[2] * (1.0 - lambda) + r[2] * lambda,
            ]
        })
        .collect();
    Ok(ImageStack {
        data,
        ..y_hat.clone()
    })
}

/// BT.601 luma of gamma-encoded sRGB, returned as a unit-range plane.
pub fn to_grayscale(img: &ImageStack) -> Result<ImagePlane> {
    if img.space != ColorSpace::Srgb {
        return Err(Error::contract("to_grayscale expects an sRGB stack"));
    }
    let unit = img.to_range(ValueRange::Unit)?;
    let data = unit
        .pixels()
        .map(|p| {
            let v = LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2];
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImagePlane {
        height: img.height,
        width: img.width,
        range: ValueRange::Unit,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lab_px(rgb: [f64; 3]) -> [f64; 3] {
        let img = ImageStack::solid(2, 3, rgb).unwrap();
        rgb_to_lab(&img).unwrap().pixel(1, 2)
    }

    #[test]
    fn white_and_black_points() {
        let w = lab_px([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-6, "{w:?}");
        assert!(w[1].abs() < 1e-6 && w[2].abs() < 1e-6, "{w:?}");
        assert_eq!(lab_px([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn primaries_match_reference_formulas() {
        // Frozen from a standalone evaluation of the IEC sRGB -> XYZ(D65) -> CIELAB
        // formulas with the white point taken as M * (1,1,1).
        let golden = [
            ([1.0, 0.0, 0.0], [53.24079183328088, 80.09246954480042, 67.20319253649727]),
            ([0.0, 1.0, 0.0], [87.73471889497407, -86.18270151612145, 83.17931454093255]),
            ([0.0, 0.0, 1.0], [32.29700932295047, 79.18752678434745, -107.86016452983817]),
            ([0.5, 0.25, 0.75], [41.15532343887163, 51.410823067112226, -56.4485192615105]),
        ];
        for (rgb, lab) in golden {
            let got = lab_px(rgb);
            for c in 0..3 {
                assert!((got[c] - lab[c]).abs() < 1e-9, "{rgb:?}: {got:?} vs {lab:?}");
            }
        }
    }

    #[test]
    fn lab_endpoints_map_back() {
        let white = ImageStack::lab(1, 1, vec![100.0, 0.0, 0.0]).unwrap();
        let out = lab_to_rgb(&white).unwrap();
        assert_eq!(out.clipped, 0);
        for v in out.image.pixel(0, 0) {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let black = ImageStack::lab(1, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let out = lab_to_rgb(&black).unwrap();
        for v in out.image.pixel(0, 0) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..10_000 * 3).map(|_| rng.random::<f64>()).collect();
        let img = ImageStack::srgb(100, 100, data).unwrap();
        let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
        assert_eq!(back.clipped, 0);
        assert!(img.max_abs_diff(&back.image).unwrap() < 1e-3);
    }

    #[test]
    fn out_of_gamut_is_clipped_and_counted() {
        // Saturated green at high lightness lies outside sRGB.
        let img = ImageStack::lab(1, 2, vec![90.0, -120.0, 100.0, 50.0, 0.0, 0.0]).unwrap();
        let out = lab_to_rgb(&img).unwrap();
        assert!(out.clipped > 0);
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_tags_are_rejected() {
        let rgb = ImageStack::solid(1, 1, [0.2, 0.3, 0.4]).unwrap();
        let lab = rgb_to_lab(&rgb).unwrap();
        assert!(matches!(rgb_to_lab(&lab), Err(Error::Contract(_))));
        assert!(matches!(lab_to_rgb(&rgb), Err(Error::Contract(_))));
        assert!(matches!(to_grayscale(&lab), Err(Error::Contract(_))));
        let signed = rgb.to_range(ValueRange::Signed).unwrap();
        assert!(matches!(rgb_to_lab(&signed), Err(Error::Contract(_))));
        assert!(ImageStack::srgb(1, 1, vec![1.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let g = ImageStack::lab(1, 1, vec![40.0, 10.0, -5.0]).unwrap();
        let r = ImageStack::lab(1, 1, vec![70.0, 30.0, 15.0]).unwrap();
        let b0 = blend_chroma(&g, &r, BlendWeight::new(0.0).unwrap()).unwrap();
        assert_eq!(b0.pixel(0, 0), [40.0, 10.0, -5.0]);
        let b1 = blend_chroma(&g, &r, BlendWeight::new(1.0).unwrap()).unwrap();
        assert_eq!(b1.pixel(0, 0), [40.0, 30.0, 15.0]);
        let bh = blend_chroma(&g, &r, BlendWeight::new(0.5).unwrap()).unwrap();
        assert_eq!(bh.pixel(0, 0), [40.0, 20.0, 5.0]);
    }

    #[test]
    fn blend_shape_mismatch() {
        let g = ImageStack::lab(1, 1, vec![40.0, 10.0, -5.0]).unwrap();
        let r = ImageStack::lab(1, 2, vec![70.0, 30.0, 15.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            blend_chroma(&g, &r, BlendWeight::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn blend_weight_bounds() {
        assert!(BlendWeight::new(-0.01).is_err());
        assert!(BlendWeight::new(1.01).is_err());
        assert!(BlendWeight::new(f64::NAN).is_err());
        assert_eq!(BlendWeight::default().get(), 0.8);
    }

    #[test]
    fn grayscale_points() {
        let gray = |rgb| to_grayscale(&ImageStack::solid(1, 1, rgb).unwrap()).unwrap().get(0, 0);
        assert!((gray([1.0, 1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(gray([0.0, 0.0, 0.0]), 0.0);
        assert_eq!(gray([1.0, 0.0, 0.0]), 0.299);
    }

    fn lab_pixel() -> impl Strategy<Value = [f64; 3]> {
        (0.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(l, a, b)| [l, a, b])
    }

    proptest! {
        #[test]
        fn blend_is_affine_in_lambda(g in lab_pixel(), r in lab_pixel(), l1 in 0.0..1.0f64, l2 in 0.0..1.0f64) {
            let g = ImageStack::lab(1, 1, g.to_vec()).unwrap();
            let r = ImageStack::lab(1, 1, r.to_vec()).unwrap();
            let at = |l: f64| blend_chroma(&g, &r, BlendWeight::new(l).unwrap()).unwrap().pixel(0, 0);
            let (a, b, m) = (at(l1), at(l2), at((l1 + l2) / 2.0));
            for c in 0..3 {
                prop_assert!((a[c] + b[c] - 2.0 * m[c]).abs() <= 1e-6);
            }
            prop_assert_eq!(a[0], g.pixel(0, 0)[0]);
        }

        #[test]
        fn grayscale_scales_linearly(r in 0.0..1.0f64, g in 0.0..1.0f64, b in 0.0..1.0f64, s in 0.001..=1.0f64) {
            let base = to_grayscale(&ImageStack::solid(1, 1, [r, g, b]).unwrap()).unwrap().get(0, 0);
            let scaled = to_grayscale(&ImageStack::solid(1, 1, [r * s, g * s, b * s]).unwrap()).unwrap().get(0, 0);
            prop_assert!((scaled - s * base).abs() < 1e-12);
        }

        #[test]
        fn round_trip_is_tight(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let back = lab_pixel_to_srgb(srgb_pixel_to_lab([r, g, b]));
            for (x, y) in [r, g, b].iter().zip(back) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn independent_rng_samples_stay_in_lab_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = [rng.random(), rng.random(), rng.random()];
            let lab = srgb_pixel_to_lab(p);
            assert!(ImageStack::lab(1, 1, lab.to_vec()).is_ok(), "{p:?} -> {lab:?}");
        }
    }
}
