//! Route-set generation: the discrete action space of every OD pair.
//!
//! Routes are found with an iterative penalty method. Each round runs a
//! shortest-path query on working weights, then inflates the weights of the
//! edges just used so the next query is pushed toward different corridors.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{EdgeIdx, Network, NodeIdx};

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub origin: NodeIdx,
    pub dest: NodeIdx,
    pub edges: Vec<EdgeIdx>,
    /// Sum of the member edges' free-flow times, seconds.
    pub fftime: f64,
}

impl Route {
    /// Builds a route from an edge sequence, checking incidence and
    /// simplicity.
    pub fn new(net: &Network, edges: Vec<EdgeIdx>) -> Result<Self> {
        let first = edges
            .first()
            .ok_or_else(|| Error::Validation("route has no edges".into()))?;
        let origin = net.edge(*first).from;
        let mut visited = HashSet::from([origin]);
        let mut at = origin;
        let mut fftime = 0.0;
        for &e in &edges {
            if e.0 >= net.edges().len() {
                return Err(Error::UnknownEdge(format!("#{}", e.0)));
            }
            let edge = net.edge(e);
            if edge.from != at {
                return Err(Error::Validation(format!(
                    "edge `{}` does not start at node `{}`",
                    edge.id,
                    net.node(at).id
                )));
            }
            if !visited.insert(edge.to) {
                return Err(Error::Validation(format!(
                    "route revisits node `{}`",
                    net.node(edge.to).id
                )));
            }
            at = edge.to;
            fftime += edge.fftime();
        }
        Ok(Route {
            origin,
            dest: at,
            edges,
            fftime,
        })
    }

    pub fn edge_ids<'a>(&self, net: &'a Network) -> Vec<&'a str> {
        net.edge_ids(&self.edges)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteSet {
    pub origin: NodeIdx,
    pub dest: NodeIdx,
    pub routes: Vec<Route>,
}

impl RouteSet {
    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn fftimes(&self) -> Vec<f64> {
        self.routes.iter().map(|r| r.fftime).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteGenParams {
    pub k: usize,
    pub penalty: f64,
    pub max_detour: f64,
}

impl Default for RouteGenParams {
    fn default() -> Self {
        RouteGenParams {
            k: 3,
            penalty: 1.3,
            max_detour: 2.0,
        }
    }
}

impl RouteGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.penalty.is_finite() && self.penalty > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "penalty must exceed 1, got {}",
                self.penalty
            )));
        }
        if !(self.max_detour.is_finite() && self.max_detour >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_detour must be at least 1, got {}",
                self.max_detour
            )));
        }
        Ok(())
    }
}

/// Generates up to `params.k` distinct routes for one OD pair.
///
/// At most `10 * k` shortest-path rounds are run. Routes whose free-flow
/// time exceeds `max_detour` times the fastest route's are dropped. The
/// result is sorted by free-flow time, then by edge-id sequence.
pub fn generate_routes(
    net: &Network,
    origin: NodeIdx,
    dest: NodeIdx,
    params: &RouteGenParams,
) -> Result<RouteSet> {
    params.validate()?;
    let fftimes = net.fftimes();
    let mut working = fftimes.clone();
    let mut seen: HashSet<Vec<EdgeIdx>> = HashSet::new();
    let mut routes: Vec<Route> = Vec::new();
    let mut fastest: Option<f64> = None;

    for _ in 0..10 * params.k {
        if routes.len() == params.k {
            break;
        }
        let path = net.shortest_path(origin, dest, &working)?;
        for e in &path.edges {
            working[e.0] *= params.penalty;
        }
        if !seen.insert(path.edges.clone()) {
            continue;
        }
        let route = Route::new(net, path.edges)?;
        // The first query runs on free-flow weights, so it fixes the fastest time.
        let base = *fastest.get_or_insert(route.fftime);
        if route.fftime <= params.max_detour * base {
            routes.push(route);
        }
    }

    routes.sort_by(|a, b| {
        a.fftime
            .total_cmp(&b.fftime)
            .then_with(|| net.id_rank_key(&a.edges).cmp(&net.id_rank_key(&b.edges)))
    });
    Ok(RouteSet {
        origin,
        dest,
        routes,
    })
}

/// Route sets keyed by (origin, dest).
pub type RouteTable = BTreeMap<(NodeIdx, NodeIdx), RouteSet>;

const ROUTE_HEADER: [&str; 5] = ["origin", "dest", "route_index", "edge_sequence", "fftime"];

pub fn write_routes_csv<W: Write>(net: &Network, table: &RouteTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUTE_HEADER)?;
    for set in table.values() {
        for (i, route) in set.routes.iter().enumerate() {
            w.write_record([
                net.node(set.origin).id.as_str(),
                net.node(set.dest).id.as_str(),
                &i.to_string(),
                &route.edge_ids(net).join(";"),
                &route.fftime.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<routes csv>", e))?;
    Ok(())
}

/// Reads a route-set CSV, re-validating every route against `net`. The
/// `fftime` column is informational; it is recomputed from the network.
pub fn read_routes_csv(net: &Network, text: &str) -> Result<RouteTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ROUTE_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`", ROUTE_HEADER.join(",")),
        });
    }
    let mut table = RouteTable::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let origin = net.node_idx(&record[0])?;
        let dest = net.node_idx(&record[1])?;
        let index: usize = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad route_index `{}`", &record[2]),
        })?;
        let edges = record[3]
            .split(';')
            .map(|id| net.edge_idx(id))
            .collect::<Result<Vec<_>>>()?;
        let route = Route::new(net, edges)?;
        if route.origin != origin || route.dest != dest {
            return Err(Error::Validation(format!(
                "line {line}: route does not connect `{}` to `{}`",
                &record[0], &record[1]
            )));
        }
        let set = table.entry((origin, dest)).or_insert_with(|| RouteSet {
            origin,
            dest,
            routes: Vec::new(),
        });
        if index != set.routes.len() {
            return Err(Error::Validation(format!(
                "line {line}: route_index {index} out of sequence"
            )));
        }
        if set.routes.iter().any(|r| r.edges == route.edges) {
            return Err(Error::Validation(format!("line {line}: duplicate route")));
        }
        set.routes.push(route);
    }
    Ok(table)
}

pub fn load_routes(net: &Network, path: impl AsRef<Path>) -> Result<RouteTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_routes_csv(net, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn od(net: &Network, o: &str, d: &str) -> (NodeIdx, NodeIdx) {
        (net.node_idx(o).unwrap(), net.node_idx(d).unwrap())
    }

    #[test]
    fn two_route_network_has_two_routes() {
        let net = Network::bundled("two_route").unwrap();
        let (o, d) = od(&net, "O", "D");
        let params = RouteGenParams { k: 3, ..Default::default() };
        let set = generate_routes(&net, o, d, &params).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.fftimes(), vec![100.0, 120.0]);
        assert_eq!(set.routes[0].edge_ids(&net), vec!["OA", "AD"]);
    }

    #[test]
    fn k_one_is_the_free_flow_shortest_path() {
        let net = Network::bundled("grid3").unwrap();
        let (o, d) = od(&net, "n00", "n22");
        let params = RouteGenParams { k: 1, ..Default::default() };
        let set = generate_routes(&net, o, d, &params).unwrap();
        let sp = net.shortest_path(o, d, &net.fftimes()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.routes[0].edges, sp.edges);
    }

    #[test]
    fn detour_bound_discards_long_routes() {
        let net = Network::bundled("two_route").unwrap();
        let (o, d) = od(&net, "O", "D");
        let params = RouteGenParams { k: 3, penalty: 1.3, max_detour: 1.1 };
        let set = generate_routes(&net, o, d, &params).unwrap();
        assert_eq!(set.fftimes(), vec![100.0]);
    }

    #[test]
    fn argument_errors() {
        let net = Network::bundled("two_route").unwrap();
        let (o, d) = od(&net, "O", "D");
        let bad = [
            RouteGenParams { k: 0, ..Default::default() },
            RouteGenParams { penalty: 1.0, ..Default::default() },
            RouteGenParams { max_detour: 0.5, ..Default::default() },
        ];
        for p in bad {
            assert!(matches!(generate_routes(&net, o, d, &p), Err(Error::InvalidArgument(_))));
        }
        assert!(matches!(
            generate_routes(&net, d, o, &RouteGenParams::default()),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn route_rejects_broken_sequences() {
        let net = Network::bundled("two_route").unwrap();
        let oa = net.edge_idx("OA").unwrap();
        let bd = net.edge_idx("BD").unwrap();
        assert!(Route::new(&net, vec![oa, bd]).is_err());
        assert!(Route::new(&net, vec![]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let net = Network::bundled("three_route").unwrap();
        let (o, d) = od(&net, "O", "D");
        let mut table = RouteTable::new();
        table.insert((o, d), generate_routes(&net, o, d, &RouteGenParams::default()).unwrap());
        let mut buf = Vec::new();
        write_routes_csv(&net, &table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("origin,dest,route_index,edge_sequence,fftime\nO,D,0,OA;AD,100\n"));
        assert_eq!(read_routes_csv(&net, &text).unwrap(), table);
    }

    #[test]
    fn csv_import_rejects_bad_rows() {
        let net = Network::bundled("two_route").unwrap();
        let head = "origin,dest,route_index,edge_sequence,fftime\n";
        for body in [
            "O,D,0,OA;BD,100\n",
            "O,D,1,OA;AD,100\n",
            "O,D,0,OA;AD,100\nO,D,1,OA;AD,100\n",
            "O,A,0,OA;AD,100\n",
            "O,D,0,XX,100\n",
        ] {
            assert!(read_routes_csv(&net, &format!("{head}{body}")).is_err(), "{body}");
        }
    }
}
