//! Undirected communication/sensing graph, neighbourhoods and round-based
//! message passing.
//!
//! Nodes are labelled `1..=n`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub type NodeId = usize;

const MAX_DRAWS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FleetGraph {
    n: usize,
    adj: Vec<BTreeSet<NodeId>>,
}

impl FleetGraph {
    /// Build a connected graph from an edge list.
    pub fn new(n: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        let g = Self::unchecked(n, edges)?;
        if !g.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(g)
    }

    fn unchecked(n: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut adj = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            for x in [a, b] {
                if x == 0 || x > n {
                    return Err(Error::UnknownNode(x));
                }
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self loop on node {a}")));
            }
            adj[a - 1].insert(b);
            adj[b - 1].insert(a);
        }
        Ok(FleetGraph { n, adj })
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..=n).flat_map(|a| ((a + 1)..=n).map(move |b| (a, b))).collect();
        Self::new(n, &edges)
    }

    /// Erdos-Renyi graph `G(n, p)`, redrawn until it is connected.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("random graphs need at least two nodes".into()));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("edge probability must be in (0, 1], got {p}")));
        }
        for _ in 0..MAX_DRAWS {
            let mut edges = Vec::new();
            for a in 1..=n {
                for b in (a + 1)..=n {
                    if rng.random::<f64>() < p {
                        edges.push((a, b));
                    }
                }
            }
            let g = Self::unchecked(n, &edges)?;
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::NoConvergence(MAX_DRAWS))
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        1..=self.n
    }

    fn check(&self, i: NodeId) -> Result<()> {
        if i == 0 || i > self.n {
            Err(Error::UnknownNode(i))
        } else {
            Ok(())
        }
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        a >= 1 && a <= self.n && self.adj[a - 1].contains(&b)
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for a in 1..=self.n {
            out.extend(self.adj[a - 1].iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    pub fn neighbours(&self, i: NodeId) -> Result<Vec<NodeId>> {
        self.check(i)?;
        Ok(self.adj[i - 1].iter().copied().collect())
    }

    pub fn degree(&self, i: NodeId) -> Result<usize> {
        self.check(i)?;
        Ok(self.adj[i - 1].len())
    }

    /// The node together with its neighbours, in ascending order.
    pub fn neighbourhood(&self, i: NodeId) -> Result<Neighbourhood> {
        self.check(i)?;
        let mut members: Vec<NodeId> = self.adj[i - 1].iter().copied().collect();
        members.push(i);
        members.sort_unstable();
        Ok(Neighbourhood { owner: i, members })
    }

    /// Nodes tracked by both `i` and `k`.
    pub fn common(&self, i: NodeId, k: NodeId) -> Result<Vec<NodeId>> {
        let a = self.neighbourhood(i)?;
        let b = self.neighbourhood(k)?;
        Ok(a.members.iter().copied().filter(|x| b.contains(*x)).collect())
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([1usize]);
        seen[0] = true;
        while let Some(a) = queue.pop_front() {
            for &b in &self.adj[a - 1] {
                if !seen[b - 1] {
                    seen[b - 1] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabel nodes: node `i` becomes `perm[i - 1]`.
    pub fn relabel(&self, perm: &[NodeId]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let edges: Vec<_> = self.edges().into_iter().map(|(a, b)| (perm[a - 1], perm[b - 1])).collect();
        Self::new(self.n, &edges)
    }

    /// One `i j` pair per line, preceded by a `nodes N` header.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("nodes {}\n", self.n);
        for (a, b) in self.edges() {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    /// Parse the edge-list format. Blank lines and `#` comments are ignored.
    /// Without a `nodes` header the node count is the largest label seen.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut n = None;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Parse { line: lineno + 1, msg: format!("expected a node label, got '{s}'") })
            };
            match parts.as_slice() {
                ["nodes", count] => n = Some(parse(count)?),
                [a, b] => edges.push((parse(a)?, parse(b)?)),
                _ => {
                    return Err(Error::Parse { line: lineno + 1, msg: format!("cannot parse '{line}'") });
                }
            }
        }
        let n = n.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0));
        Self::new(n, &edges)
    }
}

pub(crate) fn check_permutation(perm: &[NodeId], n: usize) -> Result<()> {
    let set: BTreeSet<_> = perm.iter().copied().collect();
    if perm.len() != n || set.len() != n || set.iter().any(|&x| x == 0 || x > n) {
        return Err(Error::InvalidArgument("not a permutation of the node labels".into()));
    }
    Ok(())
}

/// A node and the neighbours it tracks, in ascending label order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbourhood {
    owner: NodeId,
    members: Vec<NodeId>,
}

impl Neighbourhood {
    /// Neighbourhood of a node with no neighbours.
    pub fn singleton(owner: NodeId) -> Self {
        Neighbourhood { owner, members: vec![owner] }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.binary_search(&node).is_ok()
    }

    /// Position of `node` in the stacked layout.
    pub fn slot(&self, node: NodeId) -> Option<usize> {
        self.members.binary_search(&node).ok()
    }

    pub fn own_slot(&self) -> usize {
        self.slot(self.owner).expect("owner is a member")
    }

    pub fn neighbours(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.members.iter().copied().filter(move |&m| m != self.owner)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeaderSet {
    leaders: BTreeSet<NodeId>,
}

impl LeaderSet {
    pub fn new(graph: &FleetGraph, leaders: impl IntoIterator<Item = NodeId>) -> Result<Self> {
        let leaders: BTreeSet<_> = leaders.into_iter().collect();
        if leaders.is_empty() {
            return Err(Error::InvalidArgument("at least one leader is required".into()));
        }
        for &l in &leaders {
            graph.check(l)?;
        }
        Ok(LeaderSet { leaders })
    }

    pub fn all(graph: &FleetGraph) -> Self {
        LeaderSet { leaders: graph.nodes().collect() }
    }

    /// `round(fraction n)` leaders (at least one) chosen uniformly.
    pub fn random<R: Rng + ?Sized>(graph: &FleetGraph, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("leader fraction must be in (0, 1], got {fraction}")));
        }
        let n = graph.n_nodes();
        let count = ((fraction * n as f64).round() as usize).clamp(1, n);
        let picked = sample(rng, n, count).into_iter().map(|i| i + 1);
        Self::new(graph, picked)
    }

    pub fn is_leader(&self, i: NodeId) -> bool {
        self.leaders.contains(&i)
    }

    pub fn leaders(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaders.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.leaders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaders.is_empty()
    }
}

/// Inboxes after a round: `received[receiver][sender]`.
pub type Inboxes<T> = BTreeMap<NodeId, BTreeMap<NodeId, T>>;

/// One synchronous round of point-to-point messages along graph edges.
#[derive(Debug)]
pub struct RoundBus<'g, T> {
    graph: &'g FleetGraph,
    mail: BTreeMap<(NodeId, NodeId), T>,
}

impl<'g, T> RoundBus<'g, T> {
    pub fn new(graph: &'g FleetGraph) -> Self {
        RoundBus { graph, mail: BTreeMap::new() }
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, payload: T) -> Result<()> {
        if !self.graph.has_edge(from, to) {
            return Err(Error::NotAdjacent(from, to));
        }
        if self.mail.insert((from, to), payload).is_some() {
            return Err(Error::DuplicateMessage { from, to });
        }
        Ok(())
    }

    /// Deliver the round, checking every node heard from every neighbour.
    pub fn deliver(self) -> Result<Inboxes<T>> {
        let mut inboxes: Inboxes<T> = self.graph.nodes().map(|i| (i, BTreeMap::new())).collect();
        for ((from, to), payload) in self.mail {
            inboxes.get_mut(&to).unwrap().insert(from, payload);
        }
        for (&to, inbox) in &inboxes {
            for from in self.graph.neighbours(to)? {
                if !inbox.contains_key(&from) {
                    return Err(Error::MissingMessage { from, to });
                }
            }
        }
        Ok(inboxes)
    }
}
