//! FedAvg and FedMedian over the masked subset of client parameters, and the
//! splice of aggregated components back into client-local models.

use std::sync::Arc;

use thiserror::Error;

use crate::params::{MaskedParams, ParameterSet};
use crate::schema::{ComponentMask, ModelSchema, SchemaError};
use crate::strategy::AggRule;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("sum of client weights is zero")]
    ZeroTotalWeight,
    #[error("client `{client}` has invalid weight {weight}")]
    InvalidWeight { client: String, weight: f64 },
    #[error("client `{client}` update carries {carried}, which does not cover {mask}")]
    MaskNotCovered {
        client: String,
        carried: ComponentMask,
        mask: ComponentMask,
    },
    #[error("client `{0}` update uses a different schema")]
    SchemaMismatch(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: String,
    pub params: MaskedParams,
    /// Training sample count, or 1 under uniform weighting.
    pub weight: f64,
    pub val_metric: f64,
}

impl ClientUpdate {
    pub fn new(client_id: impl Into<String>, params: MaskedParams, weight: f64, val_metric: f64) -> Self {
        Self {
            client_id: client_id.into(),
            params,
            weight,
            val_metric,
        }
    }
}

pub fn aggregate(
    rule: AggRule,
    updates: &[ClientUpdate],
    mask: ComponentMask,
) -> Result<MaskedParams, AggregationError> {
    match rule {
        AggRule::Average => fed_avg(updates, mask),
        AggRule::Median => fed_median(updates, mask),
    }
}

/// Validates coverage and returns the shared schema with the masked block indices.
fn prepare(updates: &[ClientUpdate], mask: ComponentMask) -> Result<(Arc<ModelSchema>, Vec<usize>), AggregationError> {
    let first = updates.first().ok_or(AggregationError::NoUpdates)?;
    let schema = Arc::clone(first.params.schema());
    for u in updates {
        if u.params.schema() != &schema {
            return Err(AggregationError::SchemaMismatch(u.client_id.clone()));
        }
        if !u.params.mask().is_superset_of(mask) {
            return Err(AggregationError::MaskNotCovered {
                client: u.client_id.clone(),
                carried: u.params.mask(),
                mask,
            });
        }
    }
    let indices = schema.masked_indices(mask);
    if indices.is_empty() {
        return Err(SchemaError::EmptySelection {
            mask,
            schema: schema.name().to_string(),
        }
        .into());
    }
    Ok((schema, indices))
}

/// Weighted coordinate-wise mean, accumulated in f64. Updates are summed in
/// client-id order so the result does not depend on arrival order.
pub fn fed_avg(updates: &[ClientUpdate], mask: ComponentMask) -> Result<MaskedParams, AggregationError> {
    let (schema, indices) = prepare(updates, mask)?;
    let mut total = 0.0f64;
    for u in updates {
        if !u.weight.is_finite() || u.weight < 0.0 {
            return Err(AggregationError::InvalidWeight {
                client: u.client_id.clone(),
                weight: u.weight,
            });
        }
        total += u.weight;
    }
    if total <= 0.0 {
        return Err(AggregationError::ZeroTotalWeight);
    }

    let mut order: Vec<&ClientUpdate> = updates.iter().filter(|u| u.weight > 0.0).collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));

    let mut blocks = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let mut acc = vec![0.0f64; schema.blocks()[idx].len()];
        for u in &order {
            let data = u.params.get(idx).expect("coverage checked");
            for (a, x) in acc.iter_mut().zip(data) {
                *a += u.weight * f64::from(*x);
            }
        }
        blocks.push(acc.into_iter().map(|a| (a / total) as f32).collect());
    }
    Ok(MaskedParams::from_blocks(schema, mask, blocks)?)
}

/// Unweighted coordinate-wise median; even counts take the midpoint of the
/// two middle order statistics.
pub fn fed_median(updates: &[ClientUpdate], mask: ComponentMask) -> Result<MaskedParams, AggregationError> {
    let (schema, indices) = prepare(updates, mask)?;
    let n = updates.len();
    let mut column = vec![0.0f32; n];
    let mut blocks = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let sources: Vec<&[f32]> = updates
            .iter()
            .map(|u| u.params.get(idx).expect("coverage checked"))
            .collect();
        let len = schema.blocks()[idx].len();
        let mut out = Vec::with_capacity(len);
        for k in 0..len {
            for (slot, src) in column.iter_mut().zip(&sources) {
                *slot = src[k];
            }
            column.sort_unstable_by(f32::total_cmp);
            let m = if n % 2 == 1 {
                column[n / 2]
            } else {
                ((f64::from(column[n / 2 - 1]) + f64::from(column[n / 2])) / 2.0) as f32
            };
            out.push(m);
        }
        blocks.push(out);
    }
    Ok(MaskedParams::from_blocks(schema, mask, blocks)?)
}

/// Replaces the masked components of `local` with `aggregated`; every other
/// block is copied from `local` unchanged.
pub fn merge(
    local: &ParameterSet,
    aggregated: &MaskedParams,
    mask: ComponentMask,
) -> Result<ParameterSet, SchemaError> {
    if aggregated.mask() != mask {
        return Err(SchemaError::Mismatch(format!(
            "aggregated parameters cover {}, expected {mask}",
            aggregated.mask()
        )));
    }
    if aggregated.schema() != local.schema() {
        return Err(SchemaError::Mismatch("aggregated parameters use a different schema".into()));
    }
    let mut out = local.clone();
    for (&idx, data) in aggregated.indices().iter().zip(aggregated.blocks()) {
        out.block_mut(idx).copy_from_slice(data);
    }
    Ok(out)
}
