//! Event-graph enrichment: scoring implicit relation candidates with a
//! trained model and merging the accepted edges into an explicit event graph
//! under a confidence-tier policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InstancePair, Task};
use crate::error::{Error, Result};
use crate::model::Model;

/// Confidence tiers, strictest first. An edge's tier is the strictest band
/// its confidence clears; graph views at a tier keep that band and above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    Core,
    High,
    Full,
}

pub const TIER_CORE_MIN: f64 = 3.0;
pub const TIER_HIGH_MIN: f64 = 2.0;
pub const TIER_FULL_MIN: f64 = 1.0;

impl Tier {
    pub fn parse(s: &str) -> Result<Tier> {
        match s {
            "core" => Ok(Tier::Core),
            "high" => Ok(Tier::High),
            "full" => Ok(Tier::Full),
            other => Err(Error::Invalid(format!(
                "unknown tier {other:?} (expected core, high or full)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Core => "core",
            Tier::High => "high",
            Tier::Full => "full",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeSource {
    Explicit,
    Implicit,
}

impl EdgeSource {
    fn name(self) -> &'static str {
        match self {
            EdgeSource::Explicit => "explicit",
            EdgeSource::Implicit => "implicit",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(EdgeSource::Explicit),
            "implicit" => Ok(EdgeSource::Implicit),
            other => Err(Error::Data(format!("unknown edge source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedEdge {
    pub event1: String,
    pub event2: String,
    pub relation: String,
    pub probability: f64,
    pub frequency: u32,
    pub confidence: f64,
    pub tier: Tier,
    pub source: EdgeSource,
}

/// An event pair proposed for implicit-relation scoring, with its corpus
/// frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub event1: String,
    pub event2: String,
    pub frequency: u32,
}

/// Event graph: node id -> surface text, plus typed edges.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventGraph {
    pub nodes: BTreeMap<String, String>,
    pub edges: Vec<EnrichedEdge>,
}

/// Edge confidence: classifier probability weighted by corpus frequency.
pub fn score_edge(probability: f64, frequency: u32) -> Result<f64> {
    if !(probability > 0.0 && probability <= 1.0) {
        return Err(Error::Invalid(format!(
            "edge probability must be in (0, 1], got {probability}"
        )));
    }
    if frequency == 0 {
        return Err(Error::Invalid("edge frequency must be >= 1".into()));
    }
    Ok(probability * frequency as f64)
}

/// Tier for a confidence score; `None` means the edge is rejected outright.
pub fn assign_tier(confidence: f64) -> Option<Tier> {
    if confidence >= TIER_CORE_MIN {
        Some(Tier::Core)
    } else if confidence >= TIER_HIGH_MIN {
        Some(Tier::High)
    } else if confidence >= TIER_FULL_MIN {
        Some(Tier::Full)
    } else {
        None
    }
}

/// Collapses raw co-occurrence pairs into candidates with summed frequency,
/// in deterministic (event1, event2) order.
pub fn candidates_from_pairs<I>(pairs: I) -> Vec<Candidate>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut counts: BTreeMap<(String, String), u32> = BTreeMap::new();
    for (e1, e2) in pairs {
        *counts.entry((e1, e2)).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|((event1, event2), frequency)| Candidate { event1, event2, frequency })
        .collect()
}

impl EventGraph {
    /// View of the graph at a tier: edges in that band or stricter, plus all
    /// explicit edges regardless of confidence.
    pub fn at_tier(&self, tier: Tier) -> EventGraph {
        EventGraph {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .filter(|e| e.source == EdgeSource::Explicit || e.tier <= tier)
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            for node in [&e.event1, &e.event2] {
                if !self.nodes.contains_key(node) {
                    return Err(Error::Data(format!("edge references unknown node {node:?}")));
                }
            }
            if !seen.insert((&e.event1, &e.event2, &e.relation)) {
                return Err(Error::Data(format!(
                    "duplicate edge ({}, {}, {})",
                    e.event1, e.event2, e.relation
                )));
            }
        }
        Ok(())
    }

    // ---- TSV persistence --------------------------------------------------

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut nodes = String::from("id\ttext\n");
        for (id, text) in &self.nodes {
            if id.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
                return Err(Error::Data(format!(
                    "node {id:?} contains a tab or newline and cannot be written as TSV"
                )));
            }
            nodes.push_str(&format!("{id}\t{text}\n"));
        }
        fs::write(dir.join("nodes.tsv"), nodes)?;

        let mut edges = String::from(
            "event1\tevent2\trelation\tprobability\tfrequency\tconfidence\ttier\tsource\n",
        );
        for e in &self.edges {
            edges.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}\n",
                e.event1,
                e.event2,
                e.relation,
                e.probability,
                e.frequency,
                e.confidence,
                e.tier,
                e.source.name()
            ));
        }
        fs::write(dir.join("edges.tsv"), edges)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<EventGraph> {
        let mut graph = EventGraph::default();
        let nodes = fs::read_to_string(dir.join("nodes.tsv"))
            .map_err(|e| Error::Data(format!("cannot read {}/nodes.tsv: {e}", dir.display())))?;
        for (i, line) in nodes.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 2 {
                return Err(Error::Data(format!("nodes.tsv line {}: expected 2 fields", i + 1)));
            }
            graph.nodes.insert(parts[0].to_string(), parts[1].to_string());
        }
        let edges = fs::read_to_string(dir.join("edges.tsv"))
            .map_err(|e| Error::Data(format!("cannot read {}/edges.tsv: {e}", dir.display())))?;
        for (i, line) in edges.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 8 {
                return Err(Error::Data(format!("edges.tsv line {}: expected 8 fields", i + 1)));
            }
            let bad = |field: &str| Error::Data(format!("edges.tsv line {}: bad {field}", i + 1));
            graph.edges.push(EnrichedEdge {
                event1: parts[0].to_string(),
                event2: parts[1].to_string(),
                relation: parts[2].to_string(),
                probability: parts[3].parse().map_err(|_| bad("probability"))?,
                frequency: parts[4].parse().map_err(|_| bad("frequency"))?,
                confidence: parts[5].parse().map_err(|_| bad("confidence"))?,
                tier: Tier::parse(parts[6])?,
                source: EdgeSource::parse(parts[7])?,
            });
        }
        graph.validate()?;
        Ok(graph)
    }
}

/// Scores every candidate pair with the model and merges the accepted edges
/// into `base`. Explicit edges are never displaced: an implicit prediction
/// that duplicates an explicit (pair, relation) is dropped, and one that
/// assigns a *different* relation to an explicitly related pair is kept but
/// reported on stderr as a conflict. Candidates for the same pair are merged
/// first, summing frequency. Running the enrichment twice with the same
/// inputs yields the same graph.
pub fn enrich_graph(
    model: &Model,
    task: Task,
    base: &EventGraph,
    candidates: &[Candidate],
) -> Result<EventGraph> {
    if model.ablation.gold_coarse_at_test {
        return Err(Error::Invalid(
            "cannot enrich with a gold-coarse oracle model; unlabeled pairs have no gold label"
                .into(),
        ));
    }
    base.validate()?;
    let placeholder = model.specs.spec(task).fine_labels[0].clone();

    // Merge duplicate candidate pairs, summing frequency.
    let mut merged: BTreeMap<(String, String), u32> = BTreeMap::new();
    for c in candidates {
        if c.frequency == 0 {
            return Err(Error::Invalid(format!(
                "candidate ({}, {}) has zero frequency",
                c.event1, c.event2
            )));
        }
        for node in [&c.event1, &c.event2] {
            if !base.nodes.contains_key(node) {
                return Err(Error::Data(format!("candidate references unknown node {node:?}")));
            }
        }
        *merged.entry((c.event1.clone(), c.event2.clone())).or_insert(0) += c.frequency;
    }

    // Index explicit relations per pair for overwrite/conflict handling.
    let mut existing: BTreeMap<(&str, &str), Vec<&EnrichedEdge>> = BTreeMap::new();
    for e in &base.edges {
        existing.entry((&e.event1, &e.event2)).or_default().push(e);
    }

    let mut out = base.clone();
    for ((e1, e2), freq) in &merged {
        let pair = InstancePair {
            id: format!("enrich-{e1}-{e2}"),
            task,
            arg1: base.nodes[e1].clone(),
            arg2: base.nodes[e2].clone(),
            fine_label: placeholder.clone(),
            coarse_label: crate::coarse::CoarseLabel::Temporal,
            connective: None,
            confidence: None,
            extra: BTreeMap::new(),
        };
        let pred = model.predict(&pair)?;
        let probability =
            pred.fine_probs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let confidence = score_edge(probability, *freq)?;
        let Some(tier) = assign_tier(confidence) else { continue };

        if let Some(prior) = existing.get(&(e1.as_str(), e2.as_str())) {
            if prior.iter().any(|e| e.relation == pred.fine_label) {
                // Already known for this pair; the existing edge wins.
                continue;
            }
            for e in prior {
                eprintln!(
                    "warning: implicit edge ({e1}, {e2}, {}) conflicts with existing ({e1}, {e2}, {}); keeping both",
                    pred.fine_label, e.relation
                );
            }
        }
        out.edges.push(EnrichedEdge {
            event1: e1.clone(),
            event2: e2.clone(),
            relation: pred.fine_label,
            probability,
            frequency: *freq,
            confidence,
            tier,
            source: EdgeSource::Implicit,
        });
    }

    out.edges.sort_by(|a, b| {
        (&a.event1, &a.event2, &a.relation).cmp(&(&b.event1, &b.event2, &b.relation))
    });
    out.edges.dedup_by(|a, b| {
        a.event1 == b.event1 && a.event2 == b.event2 && a.relation == b.relation
    });
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explicit(e1: &str, e2: &str, rel: &str) -> EnrichedEdge {
        EnrichedEdge {
            event1: e1.into(),
            event2: e2.into(),
            relation: rel.into(),
            probability: 1.0,
            frequency: 5,
            confidence: 5.0,
            tier: Tier::Core,
            source: EdgeSource::Explicit,
        }
    }

    fn implicit(e1: &str, e2: &str, rel: &str, conf: f64) -> EnrichedEdge {
        EnrichedEdge {
            event1: e1.into(),
            event2: e2.into(),
            relation: rel.into(),
            probability: 0.5,
            frequency: (conf / 0.5) as u32,
            confidence: conf,
            tier: assign_tier(conf).unwrap(),
            source: EdgeSource::Implicit,
        }
    }

    fn graph_with(edges: Vec<EnrichedEdge>) -> EventGraph {
        let mut nodes = BTreeMap::new();
        for e in &edges {
            nodes.insert(e.event1.clone(), format!("text {}", e.event1));
            nodes.insert(e.event2.clone(), format!("text {}", e.event2));
        }
        EventGraph { nodes, edges }
    }

    #[test]
    fn score_is_probability_times_frequency() {
        assert!((score_edge(0.8, 5).unwrap() - 4.0).abs() < 1e-12);
        assert!(score_edge(0.0, 5).is_err());
        assert!(score_edge(1.5, 5).is_err());
        assert!(score_edge(0.5, 0).is_err());
    }

    #[test]
    fn tier_boundaries_inclusive() {
        assert_eq!(assign_tier(3.0), Some(Tier::Core));
        assert_eq!(assign_tier(2.9), Some(Tier::High));
        assert_eq!(assign_tier(2.0), Some(Tier::High));
        assert_eq!(assign_tier(1.0), Some(Tier::Full));
        assert_eq!(assign_tier(0.99), None);
    }

    #[test]
    fn tier_assignment_is_monotone() {
        let rank = |c: f64| assign_tier(c).map(|t| match t {
            Tier::Core => 3,
            Tier::High => 2,
            Tier::Full => 1,
        })
        .unwrap_or(0);
        let mut prev = 0;
        for i in 0..500 {
            let r = rank(i as f64 * 0.01);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn tier_views_nest() {
        let g = graph_with(vec![
            implicit("a", "b", "R1", 3.5),
            implicit("b", "c", "R2", 2.5),
            implicit("c", "d", "R3", 1.5),
        ]);
        assert_eq!(g.at_tier(Tier::Core).edges.len(), 1);
        assert_eq!(g.at_tier(Tier::High).edges.len(), 2);
        assert_eq!(g.at_tier(Tier::Full).edges.len(), 3);
    }

    #[test]
    fn explicit_edges_survive_every_tier() {
        let g = graph_with(vec![explicit("a", "b", "R1"), implicit("b", "c", "R2", 1.2)]);
        for tier in [Tier::Core, Tier::High, Tier::Full] {
            assert!(g
                .at_tier(tier)
                .edges
                .iter()
                .any(|e| e.source == EdgeSource::Explicit));
        }
        assert_eq!(g.at_tier(Tier::Core).edges.len(), 1);
    }

    #[test]
    fn candidates_merge_and_sort() {
        let cs = candidates_from_pairs(vec![
            ("b".to_string(), "c".to_string()),
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
        ]);
        assert_eq!(cs.len(), 2);
        assert_eq!((cs[0].event1.as_str(), cs[0].frequency), ("a", 1));
        assert_eq!((cs[1].event1.as_str(), cs[1].frequency), ("b", 2));
    }

    #[test]
    fn tsv_round_trip() {
        let g = graph_with(vec![explicit("a", "b", "R1"), implicit("b", "c", "R2", 2.5)]);
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let g2 = EventGraph::load(dir.path()).unwrap();
        assert_eq!(g.nodes, g2.nodes);
        assert_eq!(g.edges, g2.edges);
    }

    #[test]
    fn tsv_rejects_tabs_in_text() {
        let mut g = graph_with(vec![explicit("a", "b", "R1")]);
        g.nodes.insert("a".into(), "has\ttab".into());
        let dir = tempfile::tempdir().unwrap();
        assert!(g.save(dir.path()).is_err());
    }

    #[test]
    fn validate_catches_dangling_edges_and_duplicates() {
        let mut g = graph_with(vec![explicit("a", "b", "R1")]);
        g.nodes.remove("b");
        assert!(g.validate().is_err());
        let dup = graph_with(vec![explicit("a", "b", "R1"), explicit("a", "b", "R1")]);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn tier_parse_round_trip() {
        for t in [Tier::Core, Tier::High, Tier::Full] {
            assert_eq!(Tier::parse(t.name()).unwrap(), t);
        }
        assert!(Tier::parse("bogus").is_err());
    }
}
