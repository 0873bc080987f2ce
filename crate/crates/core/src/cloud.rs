//! Labeled point cloud model and label remapping.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::{Label, Point};

/// An immutable point cloud with optional per-point class labels.
///
/// Invariants enforced at construction: coordinates are finite, the label
/// sequence (when present) has one entry per point, and every label value
/// appears as a key of the class table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    points: Vec<Point>,
    labels: Option<Vec<Label>>,
    class_table: BTreeMap<Label, String>,
}

impl LabeledCloud {
    /// Builds a labeled cloud, validating the cross-field invariants.
    pub fn new(
        points: Vec<Point>,
        labels: Option<Vec<Label>>,
        class_table: BTreeMap<Label, String>,
    ) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index });
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::LabelCountMismatch {
                    points: points.len(),
                    labels: labels.len(),
                });
            }
            for &l in labels {
                if !class_table.contains_key(&l) {
                    return Err(Error::LabelNotInTable(l));
                }
            }
        }
        Ok(Self {
            points,
            labels,
            class_table,
        })
    }

    /// Cloud without labels; the class table is empty.
    pub fn unlabeled(points: Vec<Point>) -> Result<Self> {
        Self::new(points, None, BTreeMap::new())
    }

    /// Cloud with labels; class names are synthesized as `class_<id>`.
    pub fn with_labels(points: Vec<Point>, labels: Vec<Label>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for &l in &labels {
            table.entry(l).or_insert_with(|| format!("class_{l}"));
        }
        Self::new(points, Some(labels), table)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn class_table(&self) -> &BTreeMap<Label, String> {
        &self.class_table
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of model classes implied by the table: highest id plus one.
    pub fn num_classes(&self) -> usize {
        self.class_table
            .keys()
            .next_back()
            .map_or(0, |&k| k as usize + 1)
    }

    /// Replaces the labels, keeping the points; used when writing predictions.
    pub fn relabeled(&self, labels: Vec<Label>, class_table: BTreeMap<Label, String>) -> Result<Self> {
        Self::new(self.points.clone(), Some(labels), class_table)
    }
}

/// Target of one mapping entry: a new class id, or removal of the point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapTarget {
    Class(Label),
    Drop,
}

/// A total map from source label ids to coarse target ids.
///
/// Serialized as a flat JSON object whose keys are source ids written as
/// strings and whose values are either a target id or the string `"drop"`:
/// `{"0": 0, "1": 0, "2": "drop"}`. Target ids must be contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    entries: BTreeMap<Label, MapTarget>,
}

impl LabelMapping {
    pub fn new(entries: BTreeMap<Label, MapTarget>) -> Result<Self> {
        let mut targets: Vec<Label> = entries
            .values()
            .filter_map(|t| match t {
                MapTarget::Class(c) => Some(*c),
                MapTarget::Drop => None,
            })
            .collect();
        targets.sort_unstable();
        targets.dedup();
        for (i, &t) in targets.iter().enumerate() {
            if t != i as Label {
                return Err(Error::MappingNotContiguous(targets));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, source: Label) -> Option<MapTarget> {
        self.entries.get(&source).copied()
    }

    pub fn entries(&self) -> &BTreeMap<Label, MapTarget> {
        &self.entries
    }

    /// Number of target classes (contiguous ids, so max + 1).
    pub fn num_targets(&self) -> usize {
        self.entries
            .values()
            .filter_map(|t| match t {
                MapTarget::Class(c) => Some(*c as usize + 1),
                MapTarget::Drop => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mapping serializes")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TargetRepr {
    Id(Label),
    Tag(String),
}

impl Serialize for LabelMapping {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr: BTreeMap<String, TargetRepr> = self
            .entries
            .iter()
            .map(|(&k, &v)| {
                let value = match v {
                    MapTarget::Class(c) => TargetRepr::Id(c),
                    MapTarget::Drop => TargetRepr::Tag("drop".into()),
                };
                (k.to_string(), value)
            })
            .collect();
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelMapping {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = BTreeMap::<String, TargetRepr>::deserialize(deserializer)?;
        let mut entries = BTreeMap::new();
        for (key, value) in repr {
            let source: Label = key
                .parse()
                .map_err(|_| D::Error::custom(format!("invalid source id {key:?}")))?;
            let target = match value {
                TargetRepr::Id(id) => MapTarget::Class(id),
                TargetRepr::Tag(tag) if tag == "drop" => MapTarget::Drop,
                TargetRepr::Tag(tag) => {
                    return Err(D::Error::custom(format!(
                        "invalid target {tag:?} for source {key}"
                    )))
                }
            };
            entries.insert(source, target);
        }
        LabelMapping::new(entries).map_err(D::Error::custom)
    }
}

/// Applies a label mapping: points mapped to [`MapTarget::Drop`] are removed,
/// the rest are relabeled. Every label present in the cloud must be covered.
///
/// The rebuilt class table has one entry per target id of the mapping. A
/// target keeps the name of its lowest source id when the source cloud named
/// it, and falls back to `class_<id>`.
pub fn remap_labels(cloud: &LabeledCloud, mapping: &LabelMapping) -> Result<LabeledCloud> {
    let labels = cloud.labels().ok_or(Error::UnlabeledCloud)?;

    let mut points = Vec::new();
    let mut new_labels = Vec::new();
    for (p, &l) in cloud.points().iter().zip(labels) {
        match mapping.get(l) {
            None => return Err(Error::LabelNotMapped(l)),
            Some(MapTarget::Drop) => {}
            Some(MapTarget::Class(t)) => {
                points.push(*p);
                new_labels.push(t);
            }
        }
    }

    let mut table: BTreeMap<Label, String> = BTreeMap::new();
    for (&source, &target) in mapping.entries() {
        if let MapTarget::Class(t) = target {
            table.entry(t).or_insert_with(|| {
                cloud
                    .class_table()
                    .get(&source)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{t}"))
            });
        }
    }

    LabeledCloud::new(points, Some(new_labels), table)
}
