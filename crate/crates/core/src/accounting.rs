//! Per-strategy communication cost: scalars transmitted and saved relative to
//! full aggregation, per client per round.

use std::fmt;

use serde::Serialize;

use crate::schema::{Component, ComponentMask, ModelSchema};
use crate::strategy::{mask_name, NAMED_MASKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ComponentCounts {
    pub backbone: u64,
    pub neck: u64,
    pub head: u64,
}

impl ComponentCounts {
    pub fn get(&self, component: Component) -> u64 {
        match component {
            Component::Backbone => self.backbone,
            Component::Neck => self.neck,
            Component::Head => self.head,
        }
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.neck + self.head
    }

    pub fn masked(&self, mask: ComponentMask) -> u64 {
        mask.components().map(|c| self.get(c)).sum()
    }
}

pub fn component_counts(schema: &ModelSchema) -> ComponentCounts {
    let mut counts = ComponentCounts::default();
    for block in schema.blocks() {
        let n = block.len() as u64;
        match block.component {
            Component::Backbone => counts.backbone += n,
            Component::Neck => counts.neck += n,
            Component::Head => counts.head += n,
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommReport {
    pub mask: ComponentMask,
    pub transmitted: u64,
    pub saved: u64,
    pub total: u64,
    /// Saved percentage in hundredths of a percent, rounded half-up.
    pub saved_pct_centi: u64,
}

impl CommReport {
    pub fn saved_pct(&self) -> f64 {
        self.saved_pct_centi as f64 / 100.0
    }

    pub fn transmitted_pct(&self) -> f64 {
        100.0 - self.saved_pct()
    }
}

/// Communication cost of aggregating `mask` on `schema`.
pub fn comm_report(schema: &ModelSchema, mask: ComponentMask) -> CommReport {
    let counts = component_counts(schema);
    let total = counts.total();
    let transmitted = counts.masked(mask);
    let saved = total - transmitted;
    CommReport {
        mask,
        transmitted,
        saved,
        total,
        saved_pct_centi: pct_centi(saved, total),
    }
}

/// `100 * part / whole` in hundredths, rounded half-up with exact integer arithmetic.
pub fn pct_centi(part: u64, whole: u64) -> u64 {
    if whole == 0 {
        return 0;
    }
    let num = u128::from(part) * 10_000 * 2 + u128::from(whole);
    (num / (2 * u128::from(whole))) as u64
}

/// `1234567` -> `"1,234,567"`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn format_pct_centi(centi: u64) -> String {
    format!("{}.{:02}%", centi / 100, centi % 100)
}

impl fmt::Display for CommReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "transmitted {} saved {} ({})",
            group_thousands(self.transmitted),
            group_thousands(self.saved),
            format_pct_centi(self.saved_pct_centi)
        )
    }
}

/// One row per named mask, in table order.
pub fn savings_table(schema: &ModelSchema) -> Vec<(&'static str, CommReport)> {
    NAMED_MASKS
        .iter()
        .map(|(name, bits)| (*name, comm_report(schema, ComponentMask::from_bits(*bits).unwrap())))
        .collect()
}

pub fn render_savings_table(schema: &ModelSchema) -> String {
    let rows = savings_table(schema);
    let mut out = format!("{:<17} {:>12} {:>12} {:>8}\n", "strategy", "transmitted", "saved", "saved%");
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<17} {:>12} {:>12} {:>8}\n",
            name,
            group_thousands(r.transmitted),
            group_thousands(r.saved),
            format_pct_centi(r.saved_pct_centi)
        ));
    }
    out
}

/// Human label for a mask, falling back to the component list.
pub fn describe_mask(mask: ComponentMask) -> String {
    mask_name(mask).map(str::to_string).unwrap_or_else(|| mask.to_string())
}
