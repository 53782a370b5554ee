//! Bounding-box math and the two patch-division functions.
//!
//! Coordinates are integer pixels, origin top-left, with half-open extents
//! `[x0, x1) x [y0, y1)`. Every function here is pure.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x0},{y0},{x1},{y1}): need x0 < x1 and y0 < y1")]
    InvalidBox { x0: u32, y0: u32, x1: u32, y1: u32 },
    #[error("image of {width}x{height} cannot be divided into quadrants")]
    DegenerateImage { width: u32, height: u32 },
    #[error("union of an empty box list")]
    EmptyInput,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
}

/// Axis-aligned pixel box with half-open extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        if x0 < x1 && y0 < y1 {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(GeometryError::InvalidBox { x0, y0, x1, y1 })
        }
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        BBox::new(x0, y0, x1, y1).ok()
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersection(other).map_or(0, |b| b.area())
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Clip to the image extent; `None` when nothing of the box remains.
    pub fn clip(&self, extent: ImageExtent) -> Option<BBox> {
        self.intersection(&extent.full_box_unchecked())
    }

    pub fn within(&self, extent: ImageExtent) -> bool {
        self.x1 <= extent.width && self.y1 <= extent.height
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    /// The whole image as a box. Fails only for zero-sized extents.
    pub fn full_box(&self) -> Result<BBox, GeometryError> {
        BBox::new(0, 0, self.width, self.height).map_err(|_| GeometryError::DegenerateImage {
            width: self.width,
            height: self.height,
        })
    }

    fn full_box_unchecked(&self) -> BBox {
        BBox { x0: 0, y0: 0, x1: self.width, y1: self.height }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "TL")]
    TopLeft,
    #[serde(rename = "TR")]
    TopRight,
    #[serde(rename = "BL")]
    BottomLeft,
    #[serde(rename = "BR")]
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    /// 1-based position in TL, TR, BL, BR order.
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "TL",
            Quadrant::TopRight => "TR",
            Quadrant::BottomLeft => "BL",
            Quadrant::BottomRight => "BR",
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Spatial(Quadrant),
    Semantic,
    Global,
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchKind::Spatial(q) => write!(f, "{q}"),
            PatchKind::Semantic => f.write_str("semantic"),
            PatchKind::Global => f.write_str("global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub kind: PatchKind,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub assigned_objects: Vec<String>,
}

impl Patch {
    pub fn new(kind: PatchKind, bbox: BBox) -> Self {
        Self { kind, bbox, assigned_objects: Vec::new() }
    }
}

/// How an object proposal is matched against a quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMetric {
    /// Intersection over the object's own area.
    #[default]
    Coverage,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivisionConfig {
    pub conf_threshold: f64,
    pub assign_threshold: f64,
    pub assign_metric: AssignMetric,
    pub expand_patches: bool,
}

impl Default for DivisionConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.3,
            assign_threshold: 0.4,
            assign_metric: AssignMetric::Coverage,
            expand_patches: true,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

pub fn coverage(inner: &BBox, outer: &BBox) -> f64 {
    inner.intersection_area(outer) as f64 / inner.area() as f64
}

pub fn union_box(boxes: &[BBox]) -> Result<BBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyInput)?;
    Ok(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}

/// Split at the floor midpoint, returned in TL, TR, BL, BR order.
pub fn quadrants(extent: ImageExtent) -> Result<[BBox; 4], GeometryError> {
    let ImageExtent { width, height } = extent;
    if width < 2 || height < 2 {
        return Err(GeometryError::DegenerateImage { width, height });
    }
    let mx = width / 2;
    let my = height / 2;
    Ok([
        BBox { x0: 0, y0: 0, x1: mx, y1: my },
        BBox { x0: mx, y0: 0, x1: width, y1: my },
        BBox { x0: 0, y0: my, x1: mx, y1: height },
        BBox { x0: mx, y0: my, x1: width, y1: height },
    ])
}

/// The four plain quadrant patches.
pub fn equal_patches(extent: ImageExtent) -> Result<Vec<Patch>, GeometryError> {
    let boxes = quadrants(extent)?;
    Ok(Quadrant::ALL
        .iter()
        .zip(boxes)
        .map(|(q, b)| Patch::new(PatchKind::Spatial(*q), b))
        .collect())
}

fn check_threshold(t: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(GeometryError::Threshold(t))
    }
}

/// Relation-based spatial division: anchor on quadrants, then attach each
/// confident proposal to every quadrant it overlaps enough, growing the
/// quadrant to hold it.
pub fn refine_spatial_patches(
    extent: ImageExtent,
    proposals: &[ObjectProposal],
    config: &DivisionConfig,
) -> Result<Vec<Patch>, GeometryError> {
    check_threshold(config.conf_threshold)?;
    check_threshold(config.assign_threshold)?;
    let anchors = quadrants(extent)?;
    let mut patches = equal_patches(extent)?;

    for proposal in proposals.iter().filter(|p| p.confidence >= config.conf_threshold) {
        let Some(object) = proposal.bbox.clip(extent) else {
            continue;
        };
        for (patch, anchor) in patches.iter_mut().zip(anchors.iter()) {
            let score = match config.assign_metric {
                AssignMetric::Coverage => coverage(&object, anchor),
                AssignMetric::Iou => iou(&object, anchor),
            };
            if score > config.assign_threshold {
                patch.assigned_objects.push(proposal.label.clone());
                if config.expand_patches {
                    patch.bbox = patch.bbox.hull(&object);
                }
            }
        }
    }
    Ok(patches)
}

pub(crate) fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Semantics-based division: the hull of every proposal whose label was
/// selected upstream. `None` when nothing matches.
pub fn semantic_patch(
    extent: ImageExtent,
    proposals: &[ObjectProposal],
    overlap_labels: &[String],
) -> Option<Patch> {
    let wanted: Vec<String> = overlap_labels.iter().map(|l| normalize_label(l)).collect();
    let matched: Vec<&ObjectProposal> = proposals
        .iter()
        .filter(|p| wanted.contains(&normalize_label(&p.label)))
        .collect();
    let boxes: Vec<BBox> = matched.iter().filter_map(|p| p.bbox.clip(extent)).collect();
    let hull = union_box(&boxes).ok()?;
    let mut patch = Patch::new(PatchKind::Semantic, hull);
    for p in matched {
        if !patch.assigned_objects.contains(&p.label) {
            patch.assigned_objects.push(p.label.clone());
        }
    }
    Some(patch)
}
