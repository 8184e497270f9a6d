//! Deterministic pairwise box relations, used to audit generated responses.
//!
//! Horizontal: compare right edges (`x2`). Vertical: compare bottom edges
//! (`y2`). Under the default [`VerticalConvention::YUp`] a larger `y2`
//! means "on top of"; [`VerticalConvention::Image`] flips that to match
//! downward-growing image rows.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    RightOf,
    LeftOf,
    OnTopOf,
    Below,
    Overlapping,
}

impl SpatialRelation {
    pub fn as_str(self) -> &'static str {
        match self {
            SpatialRelation::RightOf => "right_of",
            SpatialRelation::LeftOf => "left_of",
            SpatialRelation::OnTopOf => "on_top_of",
            SpatialRelation::Below => "below",
            SpatialRelation::Overlapping => "overlapping",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            SpatialRelation::RightOf => SpatialRelation::LeftOf,
            SpatialRelation::LeftOf => SpatialRelation::RightOf,
            SpatialRelation::OnTopOf => SpatialRelation::Below,
            SpatialRelation::Below => SpatialRelation::OnTopOf,
            SpatialRelation::Overlapping => SpatialRelation::Overlapping,
        }
    }
}

impl fmt::Display for SpatialRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalConvention {
    #[default]
    YUp,
    Image,
}

impl FromStr for VerticalConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "y_up" => Ok(Self::YUp),
            "image" => Ok(Self::Image),
            other => Err(format!("unknown vertical convention {other:?}")),
        }
    }
}

/// Relation of the horizontal axis alone.
pub fn horizontal_relation(a: &BoundingBox, b: &BoundingBox) -> SpatialRelation {
    if a.x2 > b.x2 {
        SpatialRelation::RightOf
    } else if a.x2 < b.x2 {
        SpatialRelation::LeftOf
    } else {
        SpatialRelation::Overlapping
    }
}

/// Relation of the vertical axis alone.
pub fn vertical_relation(a: &BoundingBox, b: &BoundingBox, convention: VerticalConvention) -> SpatialRelation {
    let rel = if a.y2 > b.y2 {
        SpatialRelation::OnTopOf
    } else if a.y2 < b.y2 {
        SpatialRelation::Below
    } else {
        SpatialRelation::Overlapping
    };
    match convention {
        VerticalConvention::YUp => rel,
        VerticalConvention::Image => rel.opposite(),
    }
}

pub fn resolve_spatial_relation_with(
    a: &BoundingBox,
    b: &BoundingBox,
    convention: VerticalConvention,
) -> BTreeSet<SpatialRelation> {
    [horizontal_relation(a, b), vertical_relation(a, b, convention)]
        .into_iter()
        .collect()
}

/// Relations of `a` relative to `b` under the default convention.
pub fn resolve_spatial_relation(a: &BoundingBox, b: &BoundingBox) -> BTreeSet<SpatialRelation> {
    resolve_spatial_relation_with(a, b, VerticalConvention::YUp)
}
