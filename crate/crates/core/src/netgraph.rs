//! Directed road network: ingestion from the two-section CSV format and
//! shortest-path queries.
//!
//! The file format is a single CSV stream whose first column tags the record
//! type:
//!
//! ```text
//! node,id,x,y
//! node,O,0,0
//! node,D,1000,0
//! edge,id,from,to,length,speed,capacity
//! edge,OD,O,D,1000,10,100
//! ```
//!
//! Coordinates may be left empty; they are only used for rendering.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

const NODE_HEADER: [&str; 4] = ["node", "id", "x", "y"];
const EDGE_HEADER: [&str; 7] = ["edge", "id", "from", "to", "length", "speed", "capacity"];

const BUNDLED: &[(&str, &str)] = &[
    ("two_route", include_str!("../networks/two_route.csv")),
    ("three_route", include_str!("../networks/three_route.csv")),
    ("grid3", include_str!("../networks/grid3.csv")),
    ("single_edge", include_str!("../networks/single_edge.csv")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIdx(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeIdx(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub id: String,
    pub from: NodeIdx,
    pub to: NodeIdx,
    /// Meters.
    pub length: f64,
    /// Meters per second.
    pub speed: f64,
    /// Vehicles per hour.
    pub capacity: f64,
}

impl Edge {
    /// Free-flow traversal time in seconds.
    pub fn fftime(&self) -> f64 {
        self.length / self.speed
    }
}

/// Immutable road graph. Node and edge indices are positions in file order.
#[derive(Clone, Debug)]
pub struct Network {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    node_index: HashMap<String, NodeIdx>,
    edge_index: HashMap<String, EdgeIdx>,
    outgoing: Vec<Vec<EdgeIdx>>,
    /// Position of each edge when all edges are sorted by id; used for
    /// lexicographic tie-breaking without string comparisons.
    edge_rank: Vec<u32>,
}

/// Raw edge description used while building a [`Network`].
#[derive(Clone, Debug)]
pub struct EdgeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub speed: f64,
    pub capacity: f64,
}

impl Network {
    pub fn new(nodes: Vec<Node>, edges: Vec<EdgeSpec>) -> Result<Self> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(Error::Validation("empty node id".into()));
            }
            if node_index.insert(node.id.clone(), NodeIdx(i)).is_some() {
                return Err(Error::DuplicateId(node.id.clone()));
            }
        }

        let mut edge_index = HashMap::with_capacity(edges.len());
        let mut built = Vec::with_capacity(edges.len());
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (i, spec) in edges.into_iter().enumerate() {
            if spec.id.is_empty() {
                return Err(Error::Validation("empty edge id".into()));
            }
            if edge_index.insert(spec.id.clone(), EdgeIdx(i)).is_some() {
                return Err(Error::DuplicateId(spec.id));
            }
            let from = *node_index.get(&spec.from).ok_or_else(|| {
                Error::Validation(format!("edge `{}` references undefined node `{}`", spec.id, spec.from))
            })?;
            let to = *node_index.get(&spec.to).ok_or_else(|| {
                Error::Validation(format!("edge `{}` references undefined node `{}`", spec.id, spec.to))
            })?;
            for (name, value) in [("length", spec.length), ("speed", spec.speed), ("capacity", spec.capacity)] {
                if !(value.is_finite() && value > 0.0) {
                    return Err(Error::Validation(format!(
                        "edge `{}` has nonpositive or non-finite {name} ({value})",
                        spec.id
                    )));
                }
            }
            let edge = Edge {
                id: spec.id,
                from,
                to,
                length: spec.length,
                speed: spec.speed,
                capacity: spec.capacity,
            };
            if !edge.fftime().is_finite() {
                return Err(Error::Validation(format!("edge `{}` has non-finite free-flow time", edge.id)));
            }
            outgoing[from.0].push(EdgeIdx(i));
            built.push(edge);
        }

        let mut order: Vec<usize> = (0..built.len()).collect();
        order.sort_by(|&a, &b| built[a].id.cmp(&built[b].id));
        let mut edge_rank = vec![0u32; built.len()];
        for (rank, &i) in order.iter().enumerate() {
            edge_rank[i] = rank as u32;
        }

        Ok(Network {
            nodes,
            edges: built,
            node_index,
            edge_index,
            outgoing,
            edge_rank,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// Loads one of the networks shipped with the crate.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::InvalidArgument(format!("no bundled network named `{name}`")))?;
        Self::from_csv_str(text)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            Start,
            Nodes,
            Edges,
        }

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());

        let mut section = Section::Start;
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.iter().all(str::is_empty) {
                continue;
            }
            let fields: Vec<&str> = record.iter().collect();
            let parse_err = |msg: String| Error::Parse { line, msg };

            if fields == NODE_HEADER {
                if section != Section::Start {
                    return Err(parse_err("node header must come first".into()));
                }
                section = Section::Nodes;
                continue;
            }
            if fields == EDGE_HEADER {
                if section != Section::Nodes {
                    return Err(parse_err("edge header must follow the node section".into()));
                }
                section = Section::Edges;
                continue;
            }

            match (&section, fields[0]) {
                (Section::Nodes, "node") => {
                    if fields.len() != 4 {
                        return Err(parse_err(format!("node row needs 4 fields, got {}", fields.len())));
                    }
                    let coord = |s: &str| -> Result<Option<f64>> {
                        if s.is_empty() {
                            Ok(None)
                        } else {
                            s.parse::<f64>()
                                .map(Some)
                                .map_err(|_| parse_err(format!("bad coordinate `{s}`")))
                        }
                    };
                    nodes.push(Node {
                        id: fields[1].to_string(),
                        x: coord(fields[2])?,
                        y: coord(fields[3])?,
                    });
                }
                (Section::Edges, "edge") => {
                    if fields.len() != 7 {
                        return Err(parse_err(format!("edge row needs 7 fields, got {}", fields.len())));
                    }
                    let num = |s: &str, what: &str| -> Result<f64> {
                        s.parse::<f64>()
                            .map_err(|_| parse_err(format!("bad {what} `{s}`")))
                    };
                    edges.push(EdgeSpec {
                        id: fields[1].to_string(),
                        from: fields[2].to_string(),
                        to: fields[3].to_string(),
                        length: num(fields[4], "length")?,
                        speed: num(fields[5], "speed")?,
                        capacity: num(fields[6], "capacity")?,
                    });
                }
                (Section::Start, _) => return Err(parse_err("missing `node,id,x,y` header".into())),
                (_, tag) => return Err(parse_err(format!("unexpected record tag `{tag}`"))),
            }
        }
        if section == Section::Start {
            return Err(Error::Parse {
                line: 1,
                msg: "missing `node,id,x,y` header".into(),
            });
        }
        Self::new(nodes, edges)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx.0]
    }

    pub fn edge(&self, idx: EdgeIdx) -> &Edge {
        &self.edges[idx.0]
    }

    pub fn node_idx(&self, id: &str) -> Result<NodeIdx> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn edge_idx(&self, id: &str) -> Result<EdgeIdx> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownEdge(id.to_string()))
    }

    pub fn outgoing(&self, node: NodeIdx) -> &[EdgeIdx] {
        &self.outgoing[node.0]
    }

    /// Free-flow time of every edge, indexed by [`EdgeIdx`].
    pub fn fftimes(&self) -> Vec<f64> {
        self.edges.iter().map(Edge::fftime).collect()
    }

    /// Sort key of an edge sequence under lexicographic edge-id order.
    pub fn id_rank_key(&self, edges: &[EdgeIdx]) -> Vec<u32> {
        edges.iter().map(|e| self.edge_rank[e.0]).collect()
    }

    /// Minimum-weight path between two nodes by label-setting Dijkstra.
    ///
    /// Equal-weight paths are ordered by their edge-id sequences and the
    /// lexicographically smallest wins.
    pub fn shortest_path(&self, origin: NodeIdx, dest: NodeIdx, weights: &[f64]) -> Result<ShortestPath> {
        if origin.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(format!("#{}", origin.0)));
        }
        if dest.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(format!("#{}", dest.0)));
        }
        if origin == dest {
            return Err(Error::InvalidArgument(format!(
                "origin and destination are both `{}`",
                self.node(origin).id
            )));
        }
        if weights.len() != self.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} edge weights, got {}",
                self.edges.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("edge weight {w} is negative or non-finite")));
        }

        let n = self.nodes.len();
        let mut best: Vec<Option<Label>> = vec![None; n];
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();

        let start = Label {
            cost: 0.0,
            ranks: Vec::new(),
            edges: Vec::new(),
        };
        best[origin.0] = Some(start.clone());
        heap.push(Entry { label: start, node: origin });

        while let Some(Entry { label, node }) = heap.pop() {
            if settled[node.0] {
                continue;
            }
            settled[node.0] = true;
            if node == dest {
                return Ok(ShortestPath {
                    edges: label.edges,
                    cost: label.cost,
                });
            }
            for &e in &self.outgoing[node.0] {
                let next = self.edges[e.0].to;
                if settled[next.0] {
                    continue;
                }
                let mut cand = label.clone();
                cand.cost += weights[e.0];
                cand.ranks.push(self.edge_rank[e.0]);
                cand.edges.push(e);
                let improves = match &best[next.0] {
                    None => true,
                    Some(cur) => cand.cmp(cur) == Ordering::Less,
                };
                if improves {
                    best[next.0] = Some(cand.clone());
                    heap.push(Entry { label: cand, node: next });
                }
            }
        }

        Err(Error::Unreachable {
            origin: self.node(origin).id.clone(),
            dest: self.node(dest).id.clone(),
        })
    }

    /// Edge ids of a path, in order.
    pub fn edge_ids(&self, edges: &[EdgeIdx]) -> Vec<&str> {
        edges.iter().map(|e| self.edges[e.0].id.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortestPath {
    pub edges: Vec<EdgeIdx>,
    pub cost: f64,
}

#[derive(Clone, Debug)]
struct Label {
    cost: f64,
    ranks: Vec<u32>,
    edges: Vec<EdgeIdx>,
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then_with(|| self.ranks.cmp(&other.ranks))
    }
}

#[derive(PartialEq, Eq)]
struct Entry {
    label: Label,
    node: NodeIdx,
}

// Reversed so the max-heap pops the smallest label.
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.label.cmp(&self.label).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "network ({} nodes, {} edges)", self.nodes.len(), self.edges.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(length: &str, speed: &str) -> String {
        format!("node,id,x,y\nnode,A,0,0\nnode,B,,\nedge,id,from,to,length,speed,capacity\nedge,AB,A,B,{length},{speed},100\n")
    }

    #[test]
    fn single_edge_fftime() {
        let net = Network::from_csv_str(&two_node("1000", "10")).unwrap();
        assert_eq!(net.edges().len(), 1);
        assert_eq!(net.edges()[0].fftime(), 100.0);
        assert_eq!(net.node(NodeIdx(1)).x, None);
    }

    #[test]
    fn undefined_endpoint_is_rejected() {
        let text = "node,id,x,y\nnode,A,0,0\nedge,id,from,to,length,speed,capacity\nedge,AZ,A,Z,10,1,1\n";
        assert!(matches!(Network::from_csv_str(text), Err(Error::Validation(_))));
    }

    #[test]
    fn nonpositive_attributes_are_rejected() {
        for (l, s) in [("0", "10"), ("100", "-1"), ("nan", "1")] {
            assert!(matches!(
                Network::from_csv_str(&two_node(l, s)),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "node,id,x,y\nnode,A,0,0\nnode,A,1,1\nedge,id,from,to,length,speed,capacity\n";
        assert!(matches!(Network::from_csv_str(text), Err(Error::DuplicateId(id)) if id == "A"));
        let text = "node,id,x,y\nnode,A,0,0\nnode,B,1,1\nedge,id,from,to,length,speed,capacity\nedge,e,A,B,1,1,1\nedge,e,B,A,1,1,1\n";
        assert!(matches!(Network::from_csv_str(text), Err(Error::DuplicateId(id)) if id == "e"));
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = "node,id,x,y\nnode,A,0,0\nnode,B,0\n";
        match Network::from_csv_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Network::from_csv_str("edge,id,from,to,length,speed,capacity\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            Network::from_csv_str(&two_node("ten", "1")),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn bundled_networks_load() {
        for name in Network::bundled_names() {
            let net = Network::bundled(name).unwrap();
            for e in net.edges() {
                assert!(e.from.0 < net.nodes().len() && e.to.0 < net.nodes().len());
            }
        }
        assert_eq!(Network::bundled("grid3").unwrap().edges().len(), 24);
        assert!(Network::bundled("nope").is_err());
    }

    #[test]
    fn shortest_single_edge() {
        let net = Network::bundled("single_edge").unwrap();
        let p = net
            .shortest_path(NodeIdx(0), NodeIdx(1), &net.fftimes())
            .unwrap();
        assert_eq!(net.edge_ids(&p.edges), vec!["OD"]);
        assert_eq!(p.cost, 100.0);
    }

    #[test]
    fn shortest_prefers_cheaper_parallel_route() {
        let net = Network::bundled("two_route").unwrap();
        let o = net.node_idx("O").unwrap();
        let d = net.node_idx("D").unwrap();
        let p = net.shortest_path(o, d, &net.fftimes()).unwrap();
        assert_eq!(net.edge_ids(&p.edges), vec!["OA", "AD"]);
        assert_eq!(p.cost, 100.0);

        // Make the upper route dearer.
        let mut w = net.fftimes();
        w[net.edge_idx("OA").unwrap().0] = 200.0;
        let p = net.shortest_path(o, d, &w).unwrap();
        assert_eq!(net.edge_ids(&p.edges), vec!["OB", "BD"]);
    }

    #[test]
    fn ties_go_to_smallest_edge_id_sequence() {
        let net = Network::bundled("grid3").unwrap();
        let o = net.node_idx("n00").unwrap();
        let d = net.node_idx("n22").unwrap();
        let p = net.shortest_path(o, d, &net.fftimes()).unwrap();
        assert_eq!(p.cost, 4.0);
        // "n00_n01" < "n00_n10", and so on down the sequence.
        assert_eq!(
            net.edge_ids(&p.edges),
            vec!["n00_n01", "n01_n02", "n02_n12", "n12_n22"]
        );
    }

    #[test]
    fn shortest_path_errors() {
        let net = Network::bundled("two_route").unwrap();
        let o = net.node_idx("O").unwrap();
        let d = net.node_idx("D").unwrap();
        let w = net.fftimes();
        assert!(matches!(net.shortest_path(d, o, &w), Err(Error::Unreachable { .. })));
        assert!(matches!(net.shortest_path(o, o, &w), Err(Error::InvalidArgument(_))));
        assert!(matches!(net.shortest_path(o, NodeIdx(99), &w), Err(Error::UnknownNode(_))));
        assert!(matches!(net.node_idx("Q"), Err(Error::UnknownNode(_))));
        let mut neg = w.clone();
        neg[0] = -1.0;
        assert!(net.shortest_path(o, d, &neg).is_err());
    }
}
