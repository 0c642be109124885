//! Parameter values laid out per schema block, full or restricted to a mask.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schema::{ComponentMask, ModelSchema, SchemaError};

/// Bytes per transmitted scalar (little-endian f32).
pub const SCALAR_BYTES: usize = 4;

/// A full assignment of f32 values to every block of a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    schema: Arc<ModelSchema>,
    blocks: Vec<Vec<f32>>,
}

impl ParameterSet {
    pub fn zeros(schema: Arc<ModelSchema>) -> Self {
        Self::filled(schema, 0.0)
    }

    pub fn filled(schema: Arc<ModelSchema>, value: f32) -> Self {
        let blocks = schema.blocks().iter().map(|b| vec![value; b.len()]).collect();
        Self { schema, blocks }
    }

    pub fn from_blocks(schema: Arc<ModelSchema>, blocks: Vec<Vec<f32>>) -> Result<Self, SchemaError> {
        check_lengths(&schema, &(0..schema.blocks().len()).collect::<Vec<_>>(), &blocks)?;
        Ok(Self { schema, blocks })
    }

    /// Concatenation of all blocks in schema order.
    pub fn from_flat(schema: Arc<ModelSchema>, flat: &[f32]) -> Result<Self, SchemaError> {
        if flat.len() != schema.total_len() {
            return Err(SchemaError::Mismatch(format!(
                "expected {} scalars, got {}",
                schema.total_len(),
                flat.len()
            )));
        }
        let mut rest = flat;
        let blocks = schema
            .blocks()
            .iter()
            .map(|b| {
                let (head, tail) = rest.split_at(b.len());
                rest = tail;
                head.to_vec()
            })
            .collect();
        Ok(Self { schema, blocks })
    }

    /// Seeded uniform values in `[-scale, scale)`.
    pub fn random(schema: Arc<ModelSchema>, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = schema
            .blocks()
            .iter()
            .map(|b| (0..b.len()).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        Self { schema, blocks }
    }

    pub fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    pub fn blocks(&self) -> &[Vec<f32>] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &[f32] {
        &self.blocks[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.blocks[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f32> {
        self.blocks.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.blocks.iter_mut().flatten()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.iter().copied().collect()
    }

    /// Equality of the raw bit patterns (distinguishes `-0.0` and NaN payloads).
    pub fn bits_eq(&self, other: &ParameterSet) -> bool {
        self.schema == other.schema && blocks_bits_eq(&self.blocks, &other.blocks)
    }

    /// Copy of the blocks selected by `mask`.
    pub fn restrict(&self, mask: ComponentMask) -> MaskedParams {
        let indices = self.schema.masked_indices(mask);
        let blocks = indices.iter().map(|&i| self.blocks[i].clone()).collect();
        MaskedParams {
            schema: Arc::clone(&self.schema),
            mask,
            indices,
            blocks,
        }
    }

    /// Euclidean distance over all coordinates, accumulated in f64.
    pub fn distance(&self, other: &ParameterSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// The blocks of a schema selected by a component mask, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParams {
    schema: Arc<ModelSchema>,
    mask: ComponentMask,
    indices: Vec<usize>,
    blocks: Vec<Vec<f32>>,
}

impl MaskedParams {
    pub fn from_blocks(
        schema: Arc<ModelSchema>,
        mask: ComponentMask,
        blocks: Vec<Vec<f32>>,
    ) -> Result<Self, SchemaError> {
        let indices = schema.masked_indices(mask);
        check_lengths(&schema, &indices, &blocks)?;
        Ok(Self {
            schema,
            mask,
            indices,
            blocks,
        })
    }

    pub fn schema(&self) -> &Arc<ModelSchema> {
        &self.schema
    }

    pub fn mask(&self) -> ComponentMask {
        self.mask
    }

    /// Schema indices of the carried blocks.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn blocks(&self) -> &[Vec<f32>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Vec<f32>> {
        self.blocks
    }

    /// Data for schema block `index`, if the mask carries it.
    pub fn get(&self, index: usize) -> Option<&[f32]> {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map(|p| self.blocks[p].as_slice())
    }

    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn bits_eq(&self, other: &MaskedParams) -> bool {
        self.schema == other.schema
            && self.mask == other.mask
            && blocks_bits_eq(&self.blocks, &other.blocks)
    }
}

fn blocks_bits_eq(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn check_lengths(schema: &ModelSchema, indices: &[usize], blocks: &[Vec<f32>]) -> Result<(), SchemaError> {
    if indices.len() != blocks.len() {
        return Err(SchemaError::Mismatch(format!(
            "expected {} blocks, got {}",
            indices.len(),
            blocks.len()
        )));
    }
    for (&i, data) in indices.iter().zip(blocks) {
        let spec = &schema.blocks()[i];
        if spec.len() != data.len() {
            return Err(SchemaError::Mismatch(format!(
                "block `{}` expects {} scalars, got {}",
                spec.name,
                spec.len(),
                data.len()
            )));
        }
    }
    Ok(())
}

/// Serializes the masked blocks in schema order as little-endian f32.
pub fn pack(params: &ParameterSet, mask: ComponentMask) -> Result<Vec<u8>, SchemaError> {
    let schema = params.schema();
    let indices = schema.masked_indices(mask);
    if indices.is_empty() {
        return Err(SchemaError::EmptySelection {
            mask,
            schema: schema.name().to_string(),
        });
    }
    let mut out = Vec::with_capacity(schema.masked_len(mask) * SCALAR_BYTES);
    for i in indices {
        write_f32s(&mut out, params.block(i));
    }
    Ok(out)
}

/// Inverse of [`pack`].
pub fn unpack(schema: &Arc<ModelSchema>, mask: ComponentMask, bytes: &[u8]) -> Result<MaskedParams, SchemaError> {
    let indices = schema.masked_indices(mask);
    if indices.is_empty() {
        return Err(SchemaError::EmptySelection {
            mask,
            schema: schema.name().to_string(),
        });
    }
    let expected = schema.masked_len(mask) * SCALAR_BYTES;
    if bytes.len() != expected {
        return Err(SchemaError::Mismatch(format!(
            "packed buffer for mask {mask} must be {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut rest = bytes;
    let blocks = indices
        .iter()
        .map(|&i| {
            let n = schema.blocks()[i].len() * SCALAR_BYTES;
            let (head, tail) = rest.split_at(n);
            rest = tail;
            read_f32s(head)
        })
        .collect();
    Ok(MaskedParams {
        schema: Arc::clone(schema),
        mask,
        indices,
        blocks,
    })
}

pub(crate) fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * SCALAR_BYTES);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(SCALAR_BYTES)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
