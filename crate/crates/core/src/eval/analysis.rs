//! CSV tables for offline analysis.

use std::fmt::Write;

use crate::corpus::ChunkPartition;
use crate::lexical::token_overlap;
use crate::supervision::{record_max_target_at_k, SupervisionRecord};

use super::{ImprovementReport, SubgroupReport};

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub doc_id: String,
    pub query: usize,
    pub retriever: String,
    pub rank: usize,
    pub neighbor: usize,
    /// Distinct tokens shared by the target chunk and the neighbor with its continuation.
    pub overlap: usize,
    pub positive: bool,
}

/// Lexical overlap between each retrieved neighbor and the chunk it is meant
/// to help predict.
pub fn overlap_rows(
    partition: &ChunkPartition,
    record: &SupervisionRecord,
    retriever: &str,
    neighbors: &[usize],
) -> Vec<OverlapRow> {
    let i = record.query_index;
    if i + 1 >= partition.num_chunks() {
        return Vec::new();
    }
    let target = partition.chunk_tokens(i + 1);
    neighbors
        .iter()
        .enumerate()
        .map(|(rank, &j)| {
            let mut span = partition.chunk_tokens(j).to_vec();
            if j + 1 < partition.num_chunks() {
                span.extend_from_slice(partition.chunk_tokens(j + 1));
            }
            OverlapRow {
                doc_id: partition.doc_id.clone(),
                query: i,
                retriever: retriever.to_string(),
                rank,
                neighbor: j,
                overlap: token_overlap(target, &span),
                positive: record.is_positive(j),
            }
        })
        .collect()
}

pub fn overlap_csv(rows: &[OverlapRow]) -> String {
    let mut out = String::from("doc_id,query,retriever,rank,neighbor,overlap,positive\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.doc_id),
            r.query,
            r.retriever,
            r.rank,
            r.neighbor,
            r.overlap,
            r.positive
        );
    }
    out
}

pub fn improvement_csv(report: &ImprovementReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for b in &report.histogram {
        let _ = writeln!(out, "{},{},{}", b.lo, b.hi, b.count);
    }
    out
}

/// Best achievable target score within the top-k candidates, per record.
pub fn max_target_csv(records: &[SupervisionRecord], ks: &[usize]) -> String {
    let mut out = String::from("doc_id,query");
    for k in ks {
        let _ = write!(out, ",max_target_at_{k}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{}", csv_field(&r.doc_id), r.query_index);
        for &k in ks {
            let _ = write!(out, ",{}", record_max_target_at_k(r, k));
        }
        out.push('\n');
    }
    out
}

pub fn subgroup_csv(report: &SubgroupReport) -> String {
    let mut out = String::from("group,count,mean_improvement\n");
    for (name, g) in [("gold_retrieved", &report.with_gold), ("no_gold", &report.without_gold)] {
        match g {
            Some(g) => {
                let _ = writeln!(out, "{name},{},{}", g.count, g.mean_improvement);
            }
            None => {
                let _ = writeln!(out, "{name},0,");
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
