//! Single-target ranking metrics and the metrics report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

fn rank_of(ranked: &[String], target: &str) -> Option<usize> {
    ranked.iter().position(|r| r == target).map(|i| i + 1)
}

/// 1 if `target` is in the top `k`, else 0.
pub fn recall_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` within the top `k`, else 0.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub users: usize,
    pub excluded: usize,
    pub recall_5: f64,
    pub recall_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
}

impl DomainMetrics {
    /// Means over `(ranked, target)` cases.
    pub fn from_cases<'a>(domain: &str, excluded: usize, cases: impl IntoIterator<Item = (&'a [String], &'a str)>) -> Self {
        let mut m = DomainMetrics { domain: domain.to_string(), excluded, ..Default::default() };
        for (ranked, target) in cases {
            m.users += 1;
            m.recall_5 += recall_at_k(ranked, target, 5);
            m.recall_10 += recall_at_k(ranked, target, 10);
            m.ndcg_5 += ndcg_at_k(ranked, target, 5);
            m.ndcg_10 += ndcg_at_k(ranked, target, 10);
        }
        if m.users > 0 {
            let n = m.users as f64;
            m.recall_5 /= n;
            m.recall_10 /= n;
            m.ndcg_5 /= n;
            m.ndcg_10 /= n;
        }
        m
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub domains: Vec<DomainMetrics>,
    pub decodes: usize,
    /// Finished sequences that were not target-domain items.
    pub invalid: usize,
}

impl VariantReport {
    pub fn domain(&self, d: &str) -> Option<&DomainMetrics> {
        self.domains.iter().find(|m| m.domain == d)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub variants: Vec<VariantReport>,
    /// Median fusion weight per user label, when labels are known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma_by_label: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tdomain\tusers\texcluded\tR@5\tR@10\tN@5\tN@10\n");
        for v in &self.variants {
            for m in &v.domains {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    v.variant, m.domain, m.users, m.excluded, m.recall_5, m.recall_10, m.ndcg_5, m.ndcg_10
                );
            }
        }
        s
    }
}
