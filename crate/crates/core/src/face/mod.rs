//! Face parsing taxonomy, makeup region policy and the two perception seams:
//! parsers ([`FaceParser`]) and makeup removers ([`MakeupRemover`]).

mod parser;
mod remover;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RoiMask};

pub use parser::{CommandParser, ConstantParser, EllipseParser, FaceParser};
pub(crate) use parser::run_command;
pub use remover::{CommandRemover, FlattenRemover, IdentityRemover, MakeupRemover, PrecomputedRemover};

/// Face-parsing classes. Discriminants are the on-disk label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum FaceClass {
    Background = 0,
    Skin = 1,
    LeftBrow = 2,
    RightBrow = 3,
    LeftEye = 4,
    RightEye = 5,
    Eyeglasses = 6,
    Ear = 7,
    Nose = 8,
    InnerMouth = 9,
    UpperLip = 10,
    LowerLip = 11,
    Neck = 12,
    Clothing = 13,
    Hair = 14,
}

impl FaceClass {
    pub const ALL: [FaceClass; 15] = [
        FaceClass::Background,
        FaceClass::Skin,
        FaceClass::LeftBrow,
        FaceClass::RightBrow,
        FaceClass::LeftEye,
        FaceClass::RightEye,
        FaceClass::Eyeglasses,
        FaceClass::Ear,
        FaceClass::Nose,
        FaceClass::InnerMouth,
        FaceClass::UpperLip,
        FaceClass::LowerLip,
        FaceClass::Neck,
        FaceClass::Clothing,
        FaceClass::Hair,
    ];

    /// Classes that never receive makeup regardless of policy.
    pub const ALWAYS_EXCLUDED: [FaceClass; 3] = [FaceClass::Hair, FaceClass::Neck, FaceClass::Background];

    pub fn from_label(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    /// Translates the 19-class label set used by the common BiSeNet face-parsing
    /// checkpoints (CelebAMask-HQ ordering). Accessories fold into the nearest
    /// region that is never made up.
    pub fn from_bisenet(v: u8) -> Option<Self> {
        use FaceClass::*;
        Some(match v {
            0 => Background,
            1 => Skin,
            2 => LeftBrow,
            3 => RightBrow,
            4 => LeftEye,
            5 => RightEye,
            6 => Eyeglasses,
            7 | 8 => Ear,
            9 => Background, // earring
            10 => Nose,
            11 => InnerMouth,
            12 => UpperLip,
            13 => LowerLip,
            14 => Neck,
            15 => Neck, // necklace
            16 => Clothing,
            17 => Hair,
            18 => Background, // hat
            _ => return None,
        })
    }

    pub fn is_lip(self) -> bool {
        matches!(self, FaceClass::UpperLip | FaceClass::LowerLip)
    }

    pub fn is_eye(self) -> bool {
        matches!(self, FaceClass::LeftEye | FaceClass::RightEye)
    }
}

impl fmt::Display for FaceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    height: usize,
    width: usize,
    labels: Vec<FaceClass>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize, labels: Vec<FaceClass>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("ParsingMap::new", height * width, labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: FaceClass) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> FaceClass) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self { height, width, labels }
    }

    /// Builds from raw label bytes, rejecting values outside the taxonomy.
    pub fn from_raw(height: usize, width: usize, raw: &[u8], translate: impl Fn(u8) -> Option<FaceClass>) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|v| {
                translate(*v).ok_or_else(|| Error::Adapter {
                    adapter: "parsing".into(),
                    id: None,
                    reason: format!("label {v} outside the face-parsing taxonomy"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, labels)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[FaceClass] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> FaceClass {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class, indexed by label value.
    pub fn histogram(&self) -> [usize; 15] {
        let mut h = [0usize; 15];
        for l in &self.labels {
            h[*l as usize] += 1;
        }
        h
    }
}

/// Which parse classes receive makeup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MakeupRegionPolicy {
    include: BTreeSet<FaceClass>,
}

impl MakeupRegionPolicy {
    pub fn new(include: impl IntoIterator<Item = FaceClass>) -> Result<Self> {
        let include: BTreeSet<_> = include.into_iter().collect();
        if include.is_empty() {
            return Err(Error::Config(vec!["makeup region policy must include at least one class".into()]));
        }
        let forbidden: Vec<String> = FaceClass::ALWAYS_EXCLUDED
            .iter()
            .filter(|c| include.contains(c))
            .map(|c| c.to_string())
            .collect();
        if !forbidden.is_empty() {
            return Err(Error::Config(vec![format!(
                "makeup region policy may not include {}",
                forbidden.join(", ")
            )]));
        }
        Ok(Self { include })
    }

    pub fn include(&self) -> &BTreeSet<FaceClass> {
        &self.include
    }

    pub fn contains(&self, class: FaceClass) -> bool {
        self.include.contains(&class)
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            include: self.include.union(&other.include).copied().collect(),
        }
    }
}

impl Default for MakeupRegionPolicy {
    /// Skin and every facial feature; occluders and surroundings stay untouched.
    fn default() -> Self {
        use FaceClass::*;
        Self {
            include: [
                Skin, LeftBrow, RightBrow, LeftEye, RightEye, Nose, UpperLip, LowerLip, InnerMouth, Ear,
            ]
            .into_iter()
            .collect(),
        }
    }
}

pub fn parse_face(image: &Image, id: &str, parser: &dyn FaceParser) -> Result<ParsingMap> {
    let map = parser.parse(image, id).map_err(|e| with_sample_id(e, id))?;
    if map.dims() != image.dims() {
        return Err(Error::Adapter {
            adapter: parser.name().into(),
            id: Some(id.into()),
            reason: format!(
                "parsing map is {}x{}, image is {}x{}",
                map.height,
                map.width,
                image.height(),
                image.width()
            ),
        });
    }
    Ok(map)
}

/// 1 exactly where the label is in the policy's include set.
pub fn build_roi_mask(parsing: &ParsingMap, policy: &MakeupRegionPolicy) -> RoiMask {
    let data = parsing.labels.iter().map(|l| policy.contains(*l) as u8).collect();
    RoiMask::new(parsing.height, parsing.width, data).expect("labels and mask have equal length")
}

pub fn remove_makeup(image: &Image, id: &str, remover: &dyn MakeupRemover) -> Result<Image> {
    let out = remover.remove(image, id).map_err(|e| with_sample_id(e, id))?;
    if out.dims() != image.dims() {
        return Err(Error::shape(
            "remove_makeup",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{} from remover `{}`", out.height(), out.width(), remover.name()),
        ));
    }
    Ok(out)
}

fn with_sample_id(err: Error, id: &str) -> Error {
    match err {
        Error::Adapter { adapter, id: None, reason } => Error::Adapter {
            adapter,
            id: Some(id.to_string()),
            reason,
        },
        other => other,
    }
}
