use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerRecord {
    pub index: usize,
    pub op: &'static str,
    pub region: String,
    pub retained_bytes: u64,
}

/// Activation bytes kept alive for the backward pass, per tape record and
/// per region tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ActivationLedger {
    records: Vec<LedgerRecord>,
    by_region: BTreeMap<String, u64>,
    total: u64,
}

impl ActivationLedger {
    pub fn from_records(records: Vec<LedgerRecord>) -> Self {
        let mut by_region = BTreeMap::new();
        let mut total = 0;
        for r in &records {
            *by_region.entry(r.region.clone()).or_insert(0) += r.retained_bytes;
            total += r.retained_bytes;
        }
        Self {
            records,
            by_region,
            total,
        }
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn total_retained_bytes(&self) -> u64 {
        self.total
    }

    pub fn regions(&self) -> &BTreeMap<String, u64> {
        &self.by_region
    }

    pub fn region(&self, tag: &str) -> u64 {
        self.by_region.get(tag).copied().unwrap_or(0)
    }

    /// Sum over regions whose tag starts with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> u64 {
        self.by_region
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// Bytes retained by the transformer blocks of the image encoder.
    pub fn encoder_block_bytes(&self) -> u64 {
        self.prefix_total("encoder-block-")
    }
}
