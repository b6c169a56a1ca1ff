//! Validator for the flowchart subset used by reasoning graphs.
//!
//! Supported: a `graph TD|LR` or `flowchart TD|LR` header, node lines
//! `ID[label]` or `ID`, and edge lines `A --> B` or `A -->|label| B` where
//! either endpoint may carry a `[label]`. `%%` comments and blank lines are
//! ignored. Endpoints used in edges are declared implicitly.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningGraph {
    pub source_text: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(graph|flowchart)\s+(TD|LR)\s*;?$").expect("header regex"))
}

const NODE: &str = r"([A-Za-z_][A-Za-z0-9_]*)(?:\[([^\[\]]+)\])?";

fn node_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"^{NODE}\s*;?$")).expect("node regex"))
}

fn edge_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(r"^{NODE}\s*-->\s*(?:\|([^|]+)\|\s*)?{NODE}\s*;?$")).expect("edge regex")
    })
}

struct Builder {
    nodes: Vec<GraphNode>,
}

impl Builder {
    fn declare(&mut self, id: &str, label: Option<&str>) {
        let label = label.map(|l| l.trim().to_string());
        match self.nodes.iter_mut().find(|n| n.id == id) {
            Some(n) => {
                if let Some(l) = label {
                    n.label = l;
                }
            }
            None => self.nodes.push(GraphNode {
                id: id.to_string(),
                label: label.unwrap_or_else(|| id.to_string()),
            }),
        }
    }
}

/// Parses `text`; `parse_ok` is false with diagnostics when any line falls
/// outside the supported subset.
pub fn validate_mermaid(text: &str) -> ReasoningGraph {
    let mut graph = ReasoningGraph {
        source_text: text.to_string(),
        ..Default::default()
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with("%%"));
    match lines.next() {
        None => {
            graph.diagnostics.push("empty graph".into());
            return graph;
        }
        Some((n, l)) if !header_re().is_match(l) => {
            graph
                .diagnostics
                .push(format!("line {n}: expected `graph TD|LR` or `flowchart TD|LR` header"));
            return graph;
        }
        Some(_) => {}
    }
    let mut b = Builder { nodes: Vec::new() };
    let mut edges = Vec::new();
    for (n, line) in lines {
        if let Some(c) = edge_re().captures(line) {
            b.declare(&c[1], c.get(2).map(|m| m.as_str()));
            b.declare(&c[4], c.get(5).map(|m| m.as_str()));
            edges.push(GraphEdge {
                from: c[1].to_string(),
                to: c[4].to_string(),
                label: c.get(3).map(|m| m.as_str().trim().to_string()),
            });
        } else if let Some(c) = node_re().captures(line) {
            b.declare(&c[1], c.get(2).map(|m| m.as_str()));
        } else {
            graph.diagnostics.push(format!("line {n}: unsupported statement `{line}`"));
        }
    }
    if graph.diagnostics.is_empty() {
        graph.nodes = b.nodes;
        graph.edges = edges;
        graph.parse_ok = true;
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_graph() {
        let g = validate_mermaid("graph TD\nA[Q] --> B[Funnel]");
        assert!(g.parse_ok);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.nodes[1].label, "Funnel");
    }

    #[test]
    fn dangling_edge_and_empty() {
        assert!(!validate_mermaid("graph TD\nA --> ").parse_ok);
        assert!(!validate_mermaid("").parse_ok);
        assert!(!validate_mermaid("sequenceDiagram\nA->>B: hi").parse_ok);
    }

    #[test]
    fn labels_and_implicit_nodes() {
        let g = validate_mermaid("flowchart LR\n%% comment\nQ[GMV drop]\nQ -->|drill| U\nU --> V[vip];");
        assert!(g.parse_ok, "{:?}", g.diagnostics);
        assert_eq!(g.nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), vec!["Q", "U", "V"]);
        assert_eq!(g.edges[0].label.as_deref(), Some("drill"));
        for e in &g.edges {
            assert!(g.nodes.iter().any(|n| n.id == e.from) && g.nodes.iter().any(|n| n.id == e.to));
        }
    }
}
