//! Modular parameter layout: named tensor blocks tagged as backbone, neck or head.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bundled YOLOv11n layout, one synthetic block per component.
pub const YOLOV11N_SCHEMA: &str = include_str!("../fixtures/yolov11n.schema");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema has no blocks")]
    Empty,
    #[error("duplicate block name `{0}`")]
    DuplicateBlock(String),
    #[error("block `{0}` has an empty shape")]
    EmptyShape(String),
    #[error("block `{name}` has a zero dimension in {shape:?}")]
    ZeroDim { name: String, shape: Vec<usize> },
    #[error("unknown component `{0}` (expected backbone, neck or head)")]
    UnknownComponent(String),
    #[error("mask {mask} selects no block of schema `{schema}`")]
    EmptySelection { mask: ComponentMask, schema: String },
    #[error("parameter data does not match schema: {0}")]
    Mismatch(String),
    #[error("failed to parse schema: {0}")]
    Parse(String),
    #[error("failed to read schema {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Neck,
    Head,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Neck, Component::Head];

    /// Bit position used by [`ComponentMask`] and on the wire.
    pub fn bit(self) -> u8 {
        match self {
            Component::Backbone => 0b001,
            Component::Neck => 0b010,
            Component::Head => 0b100,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Neck => "neck",
            Component::Head => "head",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "backbone" => Ok(Component::Backbone),
            "neck" => Ok(Component::Neck),
            "head" => Ok(Component::Head),
            _ => Err(SchemaError::UnknownComponent(s.to_string())),
        }
    }
}

/// Subset of components, encoded as bit0 = backbone, bit1 = neck, bit2 = head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ComponentMask(u8);

impl ComponentMask {
    pub const EMPTY: ComponentMask = ComponentMask(0);
    pub const ALL: ComponentMask = ComponentMask(0b111);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0b111 == 0).then_some(ComponentMask(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn of(components: &[Component]) -> Self {
        ComponentMask(components.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn contains(self, component: Component) -> bool {
        self.0 & component.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_superset_of(self, other: ComponentMask) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn complement(self) -> Self {
        ComponentMask(!self.0 & 0b111)
    }

    pub fn components(self) -> impl Iterator<Item = Component> {
        Component::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("{}");
        }
        let names: Vec<_> = self.components().map(Component::as_str).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, component: Component, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            component,
            shape,
        }
    }

    /// Number of scalars in the block.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, validated list of parameter blocks.
///
/// Block order is the canonical serialization order for packing, the wire
/// format and aggregation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSchema {
    name: String,
    blocks: Vec<BlockSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    name: String,
    #[serde(rename = "block")]
    blocks: Vec<BlockSpec>,
}

impl ModelSchema {
    pub fn new(name: impl Into<String>, blocks: Vec<BlockSpec>) -> Result<Self, SchemaError> {
        if blocks.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = HashSet::new();
        for block in &blocks {
            if !seen.insert(block.name.as_str()) {
                return Err(SchemaError::DuplicateBlock(block.name.clone()));
            }
            if block.shape.is_empty() {
                return Err(SchemaError::EmptyShape(block.name.clone()));
            }
            if block.shape.contains(&0) {
                return Err(SchemaError::ZeroDim {
                    name: block.name.clone(),
                    shape: block.shape.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            blocks,
        })
    }

    /// Parses the key-value schema format (`name` plus `[[block]]` tables).
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        Self::new(file.name, file.blocks)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            name: &'a str,
            block: &'a [BlockSpec],
        }
        toml::to_string(&Out {
            name: &self.name,
            block: &self.blocks,
        })
        .expect("schema serializes")
    }

    pub fn yolov11n() -> Self {
        Self::parse(YOLOV11N_SCHEMA).expect("bundled yolov11n schema is valid")
    }

    /// Small three-component layout for fast simulations.
    pub fn toy(backbone: usize, neck: usize, head: usize) -> Result<Self, SchemaError> {
        Self::new(
            "toy",
            vec![
                BlockSpec::new("backbone", Component::Backbone, vec![backbone]),
                BlockSpec::new("neck", Component::Neck, vec![neck]),
                BlockSpec::new("head", Component::Head, vec![head]),
            ],
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(BlockSpec::len).sum()
    }

    /// Indices of the blocks selected by `mask`, in schema order.
    pub fn masked_indices(&self, mask: ComponentMask) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| mask.contains(b.component))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn masked_len(&self, mask: ComponentMask) -> usize {
        self.blocks
            .iter()
            .filter(|b| mask.contains(b.component))
            .map(BlockSpec::len)
            .sum()
    }

    pub fn into_shared(self) -> Arc<Self> {
        Arc::new(self)
    }
}
