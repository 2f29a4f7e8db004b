//! Input-layer widening from 3 to 4 channels with partial weight transfer,
//! and the weight archive format.

mod archive;

pub use archive::{ArchivedTensor, WeightArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// How the new fourth input channel is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpansionStrategy {
    /// `RGBx`: seeded uniform `[-b, b]`, `b = sqrt(1 / (4 * kh * kw))`.
    Random,
    /// `RGBR`
    CopyR,
    /// `RGBG`
    CopyG,
    /// `RGBB`
    CopyB,
    /// All zeros; the widened net ignores the new channel.
    Zero,
    /// `xxxx`: all four slices re-randomised, nothing transferred.
    NoTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionScope {
    InputLayerOnly,
    AllRandom,
}

impl ExpansionStrategy {
    pub const ALL: [ExpansionStrategy; 6] = [
        Self::NoTransfer,
        Self::Random,
        Self::CopyR,
        Self::CopyG,
        Self::CopyB,
        Self::Zero,
    ];

    /// Source slice copied into slice 3, for the copy strategies.
    pub fn source_slice(self) -> Option<usize> {
        match self {
            Self::CopyR => Some(0),
            Self::CopyG => Some(1),
            Self::CopyB => Some(2),
            _ => None,
        }
    }

    pub fn scope(self) -> ExpansionScope {
        match self {
            Self::NoTransfer => ExpansionScope::AllRandom,
            _ => ExpansionScope::InputLayerOnly,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::Random => "RGBx",
            Self::CopyR => "RGBR",
            Self::CopyG => "RGBG",
            Self::CopyB => "RGBB",
            Self::Zero => "zero",
            Self::NoTransfer => "xxxx",
        }
    }
}

impl fmt::Display for ExpansionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ExpansionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "rgbx" | "x" | "random" => Self::Random,
            "rgbr" | "copy_r" => Self::CopyR,
            "rgbg" | "copy_g" => Self::CopyG,
            "rgbb" | "copy_b" => Self::CopyB,
            "zero" => Self::Zero,
            "xxxx" | "none" | "all_random" => Self::NoTransfer,
            other => return Err(Error::InvalidArgument(format!("unknown expansion strategy `{other}`"))),
        })
    }
}

/// Resolves a layer name (`conv1`) or a tensor name (`conv1.weight`).
fn weight_name(archive: &WeightArchive, layer: &str) -> Result<String> {
    [layer.to_owned(), format!("{layer}.weight")]
        .into_iter()
        .find(|n| archive.get(n).is_some())
        .ok_or_else(|| Error::InvalidArgument(format!("archive has no tensor `{layer}` or `{layer}.weight`")))
}

fn rgb_kernel_dims(shape: &[usize], name: &str) -> Result<(usize, usize)> {
    match shape {
        [k, 3, kh, kw] => Ok((*k, kh * kw)),
        [_, c, _, _] => Err(Error::Shape(format!("`{name}` has {c} input channels, expected 3"))),
        _ => Err(Error::Shape(format!("`{name}` has rank {}, expected 4", shape.len()))),
    }
}

/// Widens the named `[k, 3, kh, kw]` conv weight to `[k, 4, kh, kw]`.
///
/// Slices 0 to 2 are copied bit for bit (except under `NoTransfer`), slice 3
/// follows the strategy. Every other tensor is left untouched.
pub fn expand_input_conv(
    archive: &WeightArchive,
    input_layer: &str,
    strategy: ExpansionStrategy,
    seed: u64,
) -> Result<WeightArchive> {
    let name = weight_name(archive, input_layer)?;
    let src = archive.get(&name).expect("resolved above");
    let (k, plane) = rgb_kernel_dims(&src.shape, &name)?;
    let bound = (1.0 / (4 * plane) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = || rng.random_range(-bound..=bound) as f32;
    let mut data = Vec::with_capacity(k * 4 * plane);
    for f in 0..k {
        let filter = &src.data[f * 3 * plane..(f + 1) * 3 * plane];
        if strategy == ExpansionStrategy::NoTransfer {
            data.extend((0..4 * plane).map(|_| random()));
            continue;
        }
        data.extend_from_slice(filter);
        match strategy.source_slice() {
            Some(s) => data.extend_from_slice(&filter[s * plane..(s + 1) * plane]),
            None if strategy == ExpansionStrategy::Zero => data.extend(std::iter::repeat_n(0.0, plane)),
            None => data.extend((0..plane).map(|_| random())),
        }
    }
    let mut out = archive.clone();
    let t = out.get_mut(&name).expect("present");
    t.shape[1] = 4;
    t.data = data;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceCheck {
    pub slice: usize,
    /// What the slice was compared with, e.g. `original[1]` or `zeros`.
    pub reference: String,
    pub bit_identical: bool,
    pub max_abs_deviation: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub tensor: String,
    pub strategy: String,
    pub slices: Vec<SliceCheck>,
    /// Every tensor other than the input layer is bit-identical.
    pub others_identical: bool,
    pub passed: bool,
}

/// Checks that `expanded` is what `strategy` should have produced from
/// `original`.
pub fn verify_expansion(
    original: &WeightArchive,
    expanded: &WeightArchive,
    input_layer: &str,
    strategy: ExpansionStrategy,
) -> Result<ExpansionReport> {
    let name = weight_name(original, input_layer)?;
    let src = original.get(&name).expect("resolved above");
    let (k, plane) = rgb_kernel_dims(&src.shape, &name)?;
    let dst = expanded
        .get(&name)
        .ok_or_else(|| Error::Shape(format!("expanded archive lacks `{name}`")))?;
    let mut want = src.shape.clone();
    want[1] = 4;
    if dst.shape != want {
        return Err(Error::Shape(format!("`{name}`: expanded shape {:?}, expected {want:?}", dst.shape)));
    }
    let slice_of = |data: &[f32], c: usize, per: usize| -> Vec<f32> {
        (0..k).flat_map(|f| data[(f * per + c) * plane..(f * per + c + 1) * plane].to_vec()).collect()
    };
    let compare = |a: &[f32], b: &[f32]| -> (bool, f32) {
        let bits = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let dev = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        (bits, dev)
    };
    let mut slices = Vec::with_capacity(4);
    let mut passed = true;
    for c in 0..3 {
        let (bit_identical, max_abs_deviation) = compare(&slice_of(&dst.data, c, 4), &slice_of(&src.data, c, 3));
        if strategy != ExpansionStrategy::NoTransfer {
            passed &= bit_identical;
        }
        slices.push(SliceCheck {
            slice: c,
            reference: format!("original[{c}]"),
            bit_identical,
            max_abs_deviation,
        });
    }
    let new = slice_of(&dst.data, 3, 4);
    let (reference, target) = match strategy.source_slice() {
        Some(s) => (format!("original[{s}]"), slice_of(&src.data, s, 3)),
        None => ("zeros".to_owned(), vec![0.0; new.len()]),
    };
    let (bit_identical, max_abs_deviation) = compare(&new, &target);
    match strategy {
        ExpansionStrategy::CopyR | ExpansionStrategy::CopyG | ExpansionStrategy::CopyB | ExpansionStrategy::Zero => {
            passed &= bit_identical
        }
        _ => {
            let bound = (1.0 / (4 * plane) as f64).sqrt() as f32;
            passed &= max_abs_deviation <= bound;
        }
    }
    slices.push(SliceCheck {
        slice: 3,
        reference,
        bit_identical,
        max_abs_deviation,
    });
    let others_identical = original.tensors().len() == expanded.tensors().len()
        && original
            .tensors()
            .iter()
            .filter(|t| t.name != name)
            .all(|t| expanded.get(&t.name).is_some_and(|e| e.shape == t.shape && bits_equal(&e.data, &t.data)));
    passed &= others_identical;
    Ok(ExpansionReport {
        tensor: name,
        strategy: strategy.to_string(),
        slices,
        others_identical,
        passed,
    })
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(k: usize) -> WeightArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = WeightArchive::new();
        let w = (0..k * 27).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        a.push("conv1.weight", vec![k, 3, 3, 3], w).unwrap();
        a.push("conv1.bias", vec![k], vec![0.25; k]).unwrap();
        a.push("fc.weight", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        a
    }

    #[test]
    fn copy_b_on_hand_built_kernel() {
        let mut a = WeightArchive::new();
        a.push("c", vec![1, 3, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
        let e = expand_input_conv(&a, "c", ExpansionStrategy::CopyB, 0).unwrap();
        assert_eq!(e.get("c").unwrap().data, vec![0.1, 0.2, 0.3, 0.3]);
        assert_eq!(e.get("c").unwrap().shape, vec![1, 4, 1, 1]);
    }

    #[test]
    fn every_strategy_verifies_against_itself() {
        let a = sample(4);
        for s in ExpansionStrategy::ALL {
            let e = expand_input_conv(&a, "conv1", s, 7).unwrap();
            let rep = verify_expansion(&a, &e, "conv1", s).unwrap();
            assert!(rep.passed, "{s}: {rep:?}");
            assert!(rep.others_identical);
        }
    }

    #[test]
    fn mismatched_strategy_fails_slice_three() {
        let a = sample(4);
        let e = expand_input_conv(&a, "conv1", ExpansionStrategy::CopyR, 0).unwrap();
        let rep = verify_expansion(&a, &e, "conv1", ExpansionStrategy::CopyG).unwrap();
        assert!(!rep.passed);
        assert!(rep.slices[..3].iter().all(|s| s.bit_identical));
        assert!(!rep.slices[3].bit_identical);
    }

    #[test]
    fn random_is_seeded_and_bounded() {
        let a = sample(8);
        let e1 = expand_input_conv(&a, "conv1.weight", ExpansionStrategy::Random, 7).unwrap();
        let e2 = expand_input_conv(&a, "conv1", ExpansionStrategy::Random, 7).unwrap();
        assert_eq!(e1.to_bytes(), e2.to_bytes());
        let e3 = expand_input_conv(&a, "conv1", ExpansionStrategy::Random, 8).unwrap();
        assert_ne!(e1.to_bytes(), e3.to_bytes());
        let b = (1.0f32 / 36.0).sqrt();
        let w = &e1.get("conv1.weight").unwrap().data;
        for f in 0..8 {
            assert!(w[f * 36 + 27..(f + 1) * 36].iter().all(|v| v.abs() <= b));
        }
    }

    #[test]
    fn no_transfer_rerandomises_all_slices() {
        let a = sample(2);
        let e = expand_input_conv(&a, "conv1", ExpansionStrategy::NoTransfer, 1).unwrap();
        let rep = verify_expansion(&a, &e, "conv1", ExpansionStrategy::NoTransfer).unwrap();
        assert!(rep.slices[..3].iter().all(|s| !s.bit_identical));
        assert_eq!(ExpansionStrategy::NoTransfer.scope(), ExpansionScope::AllRandom);
    }

    #[test]
    fn bad_inputs() {
        let a = sample(2);
        assert!(matches!(expand_input_conv(&a, "nope", ExpansionStrategy::Zero, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(expand_input_conv(&a, "fc", ExpansionStrategy::Zero, 0), Err(Error::Shape(_))));
        let e = expand_input_conv(&a, "conv1", ExpansionStrategy::Zero, 0).unwrap();
        assert!(expand_input_conv(&e, "conv1", ExpansionStrategy::Zero, 0).is_err());
        assert!(matches!(verify_expansion(&a, &a, "conv1", ExpansionStrategy::Zero), Err(Error::Shape(_))));
    }

    #[test]
    fn strategy_names() {
        for s in ExpansionStrategy::ALL {
            assert_eq!(s.code().parse::<ExpansionStrategy>().unwrap(), s);
        }
        assert_eq!("copy_g".parse::<ExpansionStrategy>().unwrap(), ExpansionStrategy::CopyG);
        assert!("rgbq".parse::<ExpansionStrategy>().is_err());
    }
}
