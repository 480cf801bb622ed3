//! Operation identities, magnitude classes and magnitude maps.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Every augmentation operation the search can choose from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Flip,
    Solarize,
    Posterize,
    Invert,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    AutoContrast,
    Equalize,
    Cutout,
    SamplePairing,
}

/// How an operation's magnitude enters its forward computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeClass {
    /// Differentiable in μ.
    Continuous,
    /// Piecewise-constant in μ; gradients use the straight-through estimator.
    Discrete,
    /// μ is ignored.
    None,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Rotate,
        OpKind::Flip,
        OpKind::Solarize,
        OpKind::Posterize,
        OpKind::Invert,
        OpKind::Contrast,
        OpKind::Color,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::AutoContrast,
        OpKind::Equalize,
        OpKind::Cutout,
        OpKind::SamplePairing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShearX => "shear_x",
            OpKind::ShearY => "shear_y",
            OpKind::TranslateX => "translate_x",
            OpKind::TranslateY => "translate_y",
            OpKind::Rotate => "rotate",
            OpKind::Flip => "flip",
            OpKind::Solarize => "solarize",
            OpKind::Posterize => "posterize",
            OpKind::Invert => "invert",
            OpKind::Contrast => "contrast",
            OpKind::Color => "color",
            OpKind::Brightness => "brightness",
            OpKind::Sharpness => "sharpness",
            OpKind::AutoContrast => "auto_contrast",
            OpKind::Equalize => "equalize",
            OpKind::Cutout => "cutout",
            OpKind::SamplePairing => "sample_pairing",
        }
    }

    pub fn magnitude_class(self) -> MagnitudeClass {
        use OpKind::*;
        match self {
            ShearX | ShearY | TranslateX | TranslateY | Rotate => MagnitudeClass::Continuous,
            Contrast | Color | Brightness | SamplePairing => MagnitudeClass::Continuous,
            Solarize | Posterize | Cutout => MagnitudeClass::Discrete,
            Flip | Invert | Sharpness | AutoContrast | Equalize => MagnitudeClass::None,
        }
    }

    pub fn magnitude_map(self) -> MagnitudeMap {
        use OpKind::*;
        let (unit, offset, scale) = match self {
            Rotate => ("degrees", -30.0, 60.0),
            ShearX | ShearY => ("shear", -0.3, 0.6),
            TranslateX | TranslateY => ("fraction_of_size", -0.3, 0.6),
            // Inverts pixels whose 8-bit level reaches 256·(1 - μ), so that
            // μ = 0 leaves every pixel alone and μ = 1 inverts all of them.
            Solarize => ("threshold", 256.0 / 255.0, -256.0 / 255.0),
            Posterize => ("bits", 1.0, 7.0),
            Cutout => ("fraction_of_min_side", 0.0, 0.5),
            SamplePairing => ("blend_weight", 0.0, 0.4),
            Contrast | Color | Brightness => ("blend_weight", 0.1, 1.8),
            Sharpness => ("blend_weight", 1.5, 0.0),
            Flip | Invert | AutoContrast | Equalize => ("none", 0.0, 0.0),
        };
        let (lo, hi) = match self {
            Posterize => (1.0, 8.0),
            Contrast | Color | Brightness => (0.0, 2.0),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        MagnitudeMap {
            unit,
            offset,
            scale,
            lo,
            hi,
            round: self == Posterize,
        }
    }

    pub fn index(self) -> usize {
        OpKind::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown operation {0:?} (valid: {valid})", valid = valid_names())]
pub struct UnknownOp(pub String);

pub fn valid_names() -> String {
    OpKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}

impl FromStr for OpKind {
    type Err = UnknownOp;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownOp(s.to_string()))
    }
}

/// Affine map from μ ∈ [0,1] to a physical parameter:
/// `clamp(offset + scale·μ, lo, hi)`, rounded to an integer when `round`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeMap {
    pub unit: &'static str,
    pub offset: f64,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
    pub round: bool,
}

impl MagnitudeMap {
    pub fn apply(&self, mu: f64) -> f64 {
        let mut v = self.offset + self.scale * mu;
        if self.round {
            v = v.round();
        }
        v.clamp(self.lo, self.hi)
    }
}

/// Physical parameter values used identically by the differentiable ops and
/// the reference implementations.
pub mod params {
    /// Posterize bit depth for magnitude `mu`.
    pub fn posterize_bits(mu: f32) -> u32 {
        (1.0 + (7.0 * mu).round()).clamp(1.0, 8.0) as u32
    }

    /// Solarize threshold on the `[0,1]` pixel scale.
    pub fn solarize_threshold(mu: f32) -> f32 {
        (256.0 / 255.0) * (1.0 - mu)
    }

    /// Cutout patch side in pixels.
    pub fn cutout_side(mu: f32, h: usize, w: usize) -> usize {
        (0.5 * mu as f64 * h.min(w) as f64).round() as usize
    }

    /// Sharpening factor; the op has no magnitude.
    pub const SHARPNESS_FACTOR: f32 = 1.5;

    /// Fill value of cutout patches.
    pub const CUTOUT_FILL: f32 = 0.5;

    /// Luma weights for RGB input.
    pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
}
