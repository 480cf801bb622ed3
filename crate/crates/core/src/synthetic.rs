//! Synthetic source/target pairs whose target is the source transformed by
//! one known operation at a known magnitude.

use crate::augment::OpDraws;
use crate::data::DatasetBundle;
use crate::ops::OpKind;
use crate::reference;
use augsearch_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Target = source rotated by `angle` degrees.
    RotatedPair { angle: f32 },
    /// Target = source under brightness at magnitude `mu`.
    BrightnessPair { mu: f32 },
    /// Two classes of noisy flat images; target = source.
    TwoGaussians,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub op: Option<OpKind>,
    pub mu: Option<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("unknown synthetic kind {0:?} (valid: rotated_pair, brightness_pair, two_gaussians)")]
    UnknownKind(String),
    #[error("bad synthetic option {0:?}")]
    BadOption(String),
    #[error("rotation angle {0} is outside the representable range [-30, 30]")]
    AngleRange(f32),
    #[error("magnitude {0} is outside [0, 1]")]
    MagnitudeRange(f32),
}

impl SyntheticSpec {
    pub fn rotated_pair(angle: f32, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::RotatedPair { angle },
            n: 256,
            channels: 3,
            height: 16,
            width: 16,
            seed,
        }
    }
}

/// Parses `kind[:key=value,...]`, e.g. `rotated_pair:angle=20,n=256`.
/// Keys: `angle`, `mu`, `n`, `c`, `h`, `w`, `size` (sets h and w), `seed`.
impl FromStr for SyntheticSpec {
    type Err = SyntheticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, opts) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = SyntheticSpec::rotated_pair(20.0, 0);
        spec.kind = match kind {
            "rotated_pair" => SyntheticKind::RotatedPair { angle: 20.0 },
            "brightness_pair" => SyntheticKind::BrightnessPair { mu: 0.25 },
            "two_gaussians" => SyntheticKind::TwoGaussians,
            other => return Err(SyntheticError::UnknownKind(other.to_string())),
        };
        for opt in opts.split(',').filter(|o| !o.is_empty()) {
            let bad = || SyntheticError::BadOption(opt.to_string());
            let (key, value) = opt.split_once('=').ok_or_else(bad)?;
            let float = || value.parse::<f32>().map_err(|_| bad());
            let int = || value.parse::<usize>().map_err(|_| bad());
            match (key, &mut spec.kind) {
                ("angle", SyntheticKind::RotatedPair { angle }) => *angle = float()?,
                ("mu", SyntheticKind::BrightnessPair { mu }) => *mu = float()?,
                ("n", _) => spec.n = int()?,
                ("c", _) => spec.channels = int()?,
                ("h", _) => spec.height = int()?,
                ("w", _) => spec.width = int()?,
                ("size", _) => {
                    spec.height = int()?;
                    spec.width = spec.height;
                }
                ("seed", _) => spec.seed = value.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(spec)
    }
}

/// Magnitude at which rotate produces `angle` degrees.
pub fn rotate_mu_for_angle(angle: f32) -> f32 {
    angle / 60.0 + 0.5
}

/// Smooth two-class images: a horizontal intensity ramp with a Gaussian
/// blob left of center (class 0) or right of center (class 1).
fn blob_images(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = (spec.n, spec.channels, spec.height, spec.width);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = w as f32 * if label == 0 { 0.3 } else { 0.7 } + rng.gen_range(-1.0..1.0);
        let cy = h as f32 * 0.5 + rng.gen_range(-2.0..2.0);
        let sigma = rng.gen_range(1.5..2.5) * (h.min(w) as f32 / 16.0);
        let tint: Vec<f32> = (0..c).map(|_| rng.gen_range(0.75..1.0)).collect();
        let slope = rng.gen_range(0.4..0.6);
        for (ch, &tint) in tint.iter().enumerate() {
            let base = 0.1 + 0.05 * ch as f32;
            for r in 0..h {
                for col in 0..w {
                    let bg = base + slope * (col as f32 + 0.5) / w as f32;
                    let d2 = (col as f32 + 0.5 - cx).powi(2) + (r as f32 + 0.5 - cy).powi(2);
                    let a = (-d2 / (2.0 * sigma * sigma)).exp();
                    data.push((bg * (1.0 - a) + tint * a).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    (Tensor::new(vec![n, c, h, w], data).expect("shape"), labels)
}

fn two_gaussian_images(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let per = spec.channels * spec.height * spec.width;
    let noise = Normal::new(0.0f32, 0.1).expect("valid");
    let mut data = Vec::with_capacity(spec.n * per);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % 2;
        let mean = if label == 0 { 0.35 } else { 0.65 };
        data.extend((0..per).map(|_| (mean + noise.sample(rng)).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let shape = vec![spec.n, spec.channels, spec.height, spec.width];
    (Tensor::new(shape, data).expect("shape"), labels)
}

/// Builds `(source, target, ground_truth)` for a synthetic pair description.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(DatasetBundle, DatasetBundle, GroundTruth), SyntheticError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (images, labels) = match spec.kind {
        SyntheticKind::TwoGaussians => two_gaussian_images(spec, &mut rng),
        _ => blob_images(spec, &mut rng),
    };
    let (target_images, truth) = match spec.kind {
        SyntheticKind::RotatedPair { angle } => {
            if !(-30.0..=30.0).contains(&angle) {
                return Err(SyntheticError::AngleRange(angle));
            }
            let mu = rotate_mu_for_angle(angle);
            let t = reference::apply(OpKind::Rotate, &images, mu, &OpDraws::default());
            (t, GroundTruth { op: Some(OpKind::Rotate), mu: Some(mu) })
        }
        SyntheticKind::BrightnessPair { mu } => {
            if !(0.0..=1.0).contains(&mu) {
                return Err(SyntheticError::MagnitudeRange(mu));
            }
            let t = reference::apply(OpKind::Brightness, &images, mu, &OpDraws::default());
            (t, GroundTruth { op: Some(OpKind::Brightness), mu: Some(mu) })
        }
        SyntheticKind::TwoGaussians => (images.clone(), GroundTruth { op: None, mu: None }),
    };
    let name = match spec.kind {
        SyntheticKind::RotatedPair { .. } => "rotated_pair",
        SyntheticKind::BrightnessPair { .. } => "brightness_pair",
        SyntheticKind::TwoGaussians => "two_gaussians",
    };
    let source = DatasetBundle::new(format!("{name}-source"), images, labels.clone(), 2).expect("generated in range");
    let target = DatasetBundle::new(format!("{name}-target"), target_images, labels, 2).expect("generated in range");
    Ok((source, target, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angle_target_is_source() {
        let mut spec = SyntheticSpec::rotated_pair(0.0, 3);
        spec.n = 8;
        let (s, t, g) = make_synthetic(&spec).unwrap();
        assert_eq!(s.images, t.images);
        assert_eq!(g.mu, Some(0.5));
    }

    #[test]
    fn ground_truth_for_twenty_degrees() {
        assert!((rotate_mu_for_angle(20.0) - 0.8333).abs() < 1e-4);
        let mut spec = SyntheticSpec::rotated_pair(20.0, 1);
        spec.n = 6;
        let (s, t, g) = make_synthetic(&spec).unwrap();
        let again = reference::apply(OpKind::Rotate, &s.images, g.mu.unwrap(), &OpDraws::default());
        assert!(again.max_abs_diff(&t.images) <= 1e-6);
        assert_eq!(make_synthetic(&spec).unwrap().0, s);
    }

    #[test]
    fn parse_options() {
        let spec: SyntheticSpec = "rotated_pair:angle=-10,n=32,size=8,seed=4".parse().unwrap();
        assert_eq!(spec.kind, SyntheticKind::RotatedPair { angle: -10.0 });
        assert_eq!((spec.n, spec.height, spec.width, spec.seed), (32, 8, 8, 4));
        assert!("spiral".parse::<SyntheticSpec>().is_err());
        assert!("two_gaussians:angle=3".parse::<SyntheticSpec>().is_err());
        assert!(make_synthetic(&"rotated_pair:angle=45".parse().unwrap()).is_err());
    }
}
