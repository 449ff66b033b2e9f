//! Cell DAGs of the NAS-Bench-101 style search space.
//!
//! A cell has between 2 and 7 nodes. Node 0 is always `INPUT`, node `n - 1`
//! is always `OUTPUT`, and the interior nodes carry one of three operations.
//! Every [`CellGraph`] handed out by this module is canonical: dead nodes are
//! pruned, the adjacency matrix is strictly upper triangular and the node
//! order is a deterministic function of the graph structure alone.
//!
//! Node ordering uses the *depth* of a node, the longest edge distance from
//! `INPUT`. Every edge strictly increases depth, so sorting by depth is always
//! a topological order and nodes sharing a depth are never adjacent. Nodes
//! are ordered by `(depth, op id)`, and any remaining ties are broken by
//! picking the arrangement whose row-major adjacency bit string is largest.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Maximum number of nodes in a cell, terminals included.
pub const MAX_NODES: usize = 7;
/// Maximum number of edges in a cell.
pub const MAX_EDGES: usize = 9;
/// Upper bound on the number of same-depth permutations returned by
/// [`CellGraph::augmentations`].
pub const MAX_AUGMENTATIONS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CellError {
    #[error("adjacency matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare { row: usize, len: usize, expected: usize },
    #[error("adjacency entry ({row}, {col}) is {value}, expected 0 or 1")]
    NotBinary { row: usize, col: usize, value: u8 },
    #[error("ops vector has {ops} entries but the matrix has {nodes} nodes")]
    OpsLength { ops: usize, nodes: usize },
    #[error("cell has {0} nodes, at most {MAX_NODES} are allowed")]
    TooManyNodes(usize),
    #[error("cell has {0} edges, at most {MAX_EDGES} are allowed")]
    TooManyEdges(usize),
    #[error("cell contains a cycle")]
    CycleDetected,
    #[error("missing or misplaced terminal: {0}")]
    MissingTerminal(String),
    #[error("no path from INPUT to OUTPUT")]
    Disconnected,
    #[error("cell text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Node operation. The discriminant is the type id used in the type matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Op {
    #[serde(rename = "INPUT")]
    Input = 1,
    #[serde(rename = "CONV3X3")]
    Conv3x3 = 2,
    #[serde(rename = "CONV1X1")]
    Conv1x1 = 3,
    #[serde(rename = "MAXPOOL3X3")]
    MaxPool3x3 = 4,
    #[serde(rename = "OUTPUT")]
    Output = 5,
}

impl Op {
    /// Operations allowed on interior nodes.
    pub const INTERIOR: [Op; 3] = [Op::Conv3x3, Op::Conv1x1, Op::MaxPool3x3];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Op> {
        match id {
            1 => Some(Op::Input),
            2 => Some(Op::Conv3x3),
            3 => Some(Op::Conv1x1),
            4 => Some(Op::MaxPool3x3),
            5 => Some(Op::Output),
            _ => None,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Op::Input => "INPUT",
            Op::Conv3x3 => "CONV3X3",
            Op::Conv1x1 => "CONV1X1",
            Op::MaxPool3x3 => "MAXPOOL3X3",
            Op::Output => "OUTPUT",
        }
    }

    pub fn is_interior(self) -> bool {
        !matches!(self, Op::Input | Op::Output)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "INPUT" => Ok(Op::Input),
            "CONV3X3" => Ok(Op::Conv3x3),
            "CONV1X1" => Ok(Op::Conv1x1),
            "MAXPOOL3X3" => Ok(Op::MaxPool3x3),
            "OUTPUT" => Ok(Op::Output),
            other => Err(format!("unknown op token {other:?}")),
        }
    }
}

/// A canonical, validated cell.
///
/// Row `i` of the adjacency is stored as a bit mask: bit `j` set means an
/// edge `i -> j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "CellRepr", into = "CellRepr")]
pub struct CellGraph {
    n: usize,
    rows: [u8; MAX_NODES],
    ops: Vec<Op>,
}

/// Longest edge distance from `INPUT` for every node of a cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthProfile {
    pub depth: Vec<usize>,
}

/// Interior operation counts of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCensus {
    pub conv3x3: usize,
    pub conv1x1: usize,
    pub maxpool3x3: usize,
}

impl CellGraph {
    /// Validates a raw cell description and returns its canonical form.
    ///
    /// Nodes that are not on any `INPUT -> OUTPUT` path are pruned before the
    /// edge limit is checked.
    pub fn validate(raw_adj: &[Vec<u8>], raw_ops: &[Op]) -> Result<CellGraph, CellError> {
        let n = raw_adj.len();
        if n > MAX_NODES {
            return Err(CellError::TooManyNodes(n));
        }
        if n < 2 {
            return Err(CellError::MissingTerminal(format!(
                "a cell needs INPUT and OUTPUT, got {n} node(s)"
            )));
        }
        let mut rows = [0u8; MAX_NODES];
        for (i, row) in raw_adj.iter().enumerate() {
            if row.len() != n {
                return Err(CellError::NotSquare { row: i, len: row.len(), expected: n });
            }
            for (j, &value) in row.iter().enumerate() {
                match value {
                    0 => {}
                    1 => rows[i] |= 1 << j,
                    _ => return Err(CellError::NotBinary { row: i, col: j, value }),
                }
            }
        }
        if raw_ops.len() != n {
            return Err(CellError::OpsLength { ops: raw_ops.len(), nodes: n });
        }
        if raw_ops[0] != Op::Input {
            return Err(CellError::MissingTerminal("node 0 must be INPUT".into()));
        }
        if raw_ops[n - 1] != Op::Output {
            return Err(CellError::MissingTerminal(format!("node {} must be OUTPUT", n - 1)));
        }
        if let Some(v) = raw_ops[1..n - 1].iter().position(|op| !op.is_interior()) {
            return Err(CellError::MissingTerminal(format!(
                "interior node {} is {}",
                v + 1,
                raw_ops[v + 1]
            )));
        }

        let topo = topological_order(n, &rows).ok_or(CellError::CycleDetected)?;

        // Forward reachability in topological order, backward in reverse.
        let mut from_input = 1u8;
        for &v in &topo {
            if from_input & (1 << v) != 0 {
                from_input |= rows[v];
            }
        }
        let mut to_output = 1u8 << (n - 1);
        for &v in topo.iter().rev() {
            if rows[v] & to_output != 0 {
                to_output |= 1 << v;
            }
        }
        if from_input & (1 << (n - 1)) == 0 {
            return Err(CellError::Disconnected);
        }
        let live = from_input & to_output;

        let keep: Vec<usize> = (0..n).filter(|&v| live & (1 << v) != 0).collect();
        let mut pruned = [0u8; MAX_NODES];
        for (a, &u) in keep.iter().enumerate() {
            for (b, &v) in keep.iter().enumerate() {
                if rows[u] & (1 << v) != 0 {
                    pruned[a] |= 1 << b;
                }
            }
        }
        let edges: usize = pruned.iter().map(|r| r.count_ones() as usize).sum();
        if edges > MAX_EDGES {
            return Err(CellError::TooManyEdges(edges));
        }
        let ops: Vec<Op> = keep.iter().map(|&v| raw_ops[v]).collect();
        Ok(canonical_form(keep.len(), &pruned, &ops))
    }

    /// Returns the canonical form of `self`. Graphs produced by
    /// [`CellGraph::validate`] are already canonical, so this is the identity
    /// on them; it matters for graphs obtained from
    /// [`CellGraph::augmentations`].
    pub fn canonicalize(&self) -> CellGraph {
        canonical_form(self.n, &self.rows, &self.ops)
    }

    /// The minimal cell `INPUT -> OUTPUT`.
    pub fn minimal() -> CellGraph {
        let mut rows = [0u8; MAX_NODES];
        rows[0] = 0b10;
        CellGraph { n: 2, rows, ops: vec![Op::Input, Op::Output] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        from < self.n && to < self.n && self.rows[from] & (1 << to) != 0
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(|r| r.count_ones() as usize).sum()
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.has_edge(i, j) as u8).collect())
            .collect()
    }

    /// Adjacency rows as `0`/`1` strings, as used by the text and JSONL formats.
    pub fn adjacency_rows(&self) -> Vec<String> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| if self.has_edge(i, j) { '1' } else { '0' }).collect())
            .collect()
    }

    /// Longest edge distance from `INPUT` for each node.
    pub fn depth_profile(&self) -> DepthProfile {
        DepthProfile { depth: longest_depths(self.n, &self.rows, &(0..self.n).collect::<Vec<_>>()) }
    }

    /// Shortest edge distance from `INPUT` to `OUTPUT`.
    pub fn io_distance(&self) -> usize {
        let mut dist = vec![usize::MAX; self.n];
        dist[0] = 0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..self.n {
                if self.has_edge(u, v) && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist[self.n - 1]
    }

    pub fn op_census(&self) -> OpCensus {
        let mut census = OpCensus::default();
        for op in &self.ops {
            match op {
                Op::Conv3x3 => census.conv3x3 += 1,
                Op::Conv1x1 => census.conv1x1 += 1,
                Op::MaxPool3x3 => census.maxpool3x3 += 1,
                Op::Input | Op::Output => {}
            }
        }
        census
    }

    /// All reorderings of `self` obtained by permuting interior nodes that
    /// share a depth. The identity ordering comes first. When the number of
    /// orderings exceeds [`MAX_AUGMENTATIONS`], a deterministic sample of
    /// that many distinct orderings is returned instead.
    ///
    /// Orderings are not deduplicated: automorphic permutations yield equal
    /// graphs.
    pub fn augmentations(&self) -> Vec<CellGraph> {
        self.augmentations_capped(MAX_AUGMENTATIONS)
    }

    fn augmentations_capped(&self, cap: usize) -> Vec<CellGraph> {
        let depth = self.depth_profile().depth;
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for v in 1..self.n - 1 {
            match groups.last_mut() {
                Some(g) if depth[g[0]] == depth[v] => g.push(v),
                _ => groups.push(vec![v]),
            }
        }
        let total: usize = groups.iter().map(|g| factorial(g.len())).product();

        let orders: Vec<Vec<usize>> = if total <= cap {
            group_orderings(self.n, &groups)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.stable_hash());
            let identity: Vec<usize> = (0..self.n).collect();
            let mut seen = HashSet::from([identity.clone()]);
            let mut orders = vec![identity.clone()];
            while orders.len() < cap {
                let mut order = identity.clone();
                for g in &groups {
                    let mut shuffled = g.clone();
                    shuffled.shuffle(&mut rng);
                    for (slot, v) in g.iter().zip(shuffled) {
                        order[*slot] = v;
                    }
                }
                if seen.insert(order.clone()) {
                    orders.push(order);
                }
            }
            orders
        };
        orders.iter().map(|order| self.reordered(order)).collect()
    }

    /// Graph whose node `k` is node `order[k]` of `self`.
    fn reordered(&self, order: &[usize]) -> CellGraph {
        let (rows, ops) = permute(&self.rows, &self.ops, order);
        CellGraph { n: self.n, rows, ops }
    }

    /// 64-bit FNV-1a hash of the text form; stable across processes.
    pub(crate) fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Parses the text format and validates the result.
    pub fn parse_text(text: &str) -> Result<CellGraph, CellError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let parse_err = |line: usize, msg: String| CellError::Parse { line, msg };
        let &(first_line, header) = lines.first().ok_or_else(|| parse_err(1, "empty input".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| parse_err(first_line, format!("expected node count, got {header:?}")))?;
        if lines.len() != n + 2 {
            return Err(parse_err(
                first_line,
                format!("expected {} non-empty lines for n = {n}, got {}", n + 2, lines.len()),
            ));
        }
        let mut adj = Vec::with_capacity(n);
        for &(line, row) in &lines[1..=n] {
            let parsed: Result<Vec<u8>, _> = row
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(parse_err(line, format!("unexpected adjacency character {other:?}"))),
                })
                .collect();
            adj.push(parsed?);
        }
        let (ops_line, ops_text) = lines[n + 1];
        let ops = parse_ops(ops_text.split(',')).map_err(|msg| parse_err(ops_line, msg))?;
        CellGraph::validate(&adj, &ops)
    }
}

/// Serialized form: adjacency rows as `0`/`1` strings plus op tokens.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRepr {
    adj: Vec<String>,
    ops: Vec<Op>,
}

impl From<CellGraph> for CellRepr {
    fn from(g: CellGraph) -> Self {
        CellRepr { adj: g.adjacency_rows(), ops: g.ops }
    }
}

impl TryFrom<CellRepr> for CellGraph {
    type Error = CellError;

    fn try_from(r: CellRepr) -> Result<Self, Self::Error> {
        let adj: Vec<Vec<u8>> = r
            .adj
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.bytes()
                    .enumerate()
                    .map(|(j, b)| match b {
                        b'0' | b'1' => Ok(b - b'0'),
                        other => Err(CellError::NotBinary { row: i, col: j, value: other }),
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        CellGraph::validate(&adj, &r.ops)
    }
}

/// Parses op tokens.
pub fn parse_ops<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Vec<Op>, String> {
    tokens.into_iter().map(str::parse).collect()
}

/// Text form: node count, one `0`/`1` row per node, then comma-separated ops.
impl fmt::Display for CellGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.n)?;
        for row in self.adjacency_rows() {
            writeln!(f, "{row}")?;
        }
        let ops: Vec<&str> = self.ops.iter().map(|op| op.token()).collect();
        writeln!(f, "{}", ops.join(","))
    }
}

impl FromStr for CellGraph {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CellGraph::parse_text(s)
    }
}

fn factorial(k: usize) -> usize {
    (1..=k).product()
}

fn permute(rows: &[u8; MAX_NODES], ops: &[Op], order: &[usize]) -> ([u8; MAX_NODES], Vec<Op>) {
    let mut out = [0u8; MAX_NODES];
    for (a, &u) in order.iter().enumerate() {
        for (b, &v) in order.iter().enumerate() {
            if rows[u] & (1 << v) != 0 {
                out[a] |= 1 << b;
            }
        }
    }
    (out, order.iter().map(|&v| ops[v]).collect())
}

/// Kahn's algorithm; `None` when the graph has a cycle (self loops included).
fn topological_order(n: usize, rows: &[u8; MAX_NODES]) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    for row in &rows[..n] {
        for (v, d) in indegree.iter_mut().enumerate() {
            if row & (1 << v) != 0 {
                *d += 1;
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = ready.pop_front() {
        order.push(u);
        for (v, d) in indegree.iter_mut().enumerate() {
            if rows[u] & (1 << v) != 0 {
                *d -= 1;
                if *d == 0 {
                    ready.push_back(v);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Longest-path depth from node 0, given a topological order.
fn longest_depths(n: usize, rows: &[u8; MAX_NODES], topo: &[usize]) -> Vec<usize> {
    let mut depth = vec![0usize; n];
    for &u in topo {
        for v in 0..n {
            if rows[u] & (1 << v) != 0 {
                depth[v] = depth[v].max(depth[u] + 1);
            }
        }
    }
    depth
}

/// Row-major adjacency bits, first entry most significant.
fn adjacency_code(n: usize, rows: &[u8; MAX_NODES]) -> u64 {
    let mut code = 0u64;
    for row in &rows[..n] {
        for j in 0..n {
            code = (code << 1) | ((row >> j) & 1) as u64;
        }
    }
    code
}

/// Every ordering of `0..n` that keeps each group in its slots, produced by
/// permuting the members of each group. Identity first.
fn group_orderings(n: usize, groups: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut orders = vec![(0..n).collect::<Vec<usize>>()];
    for g in groups.iter().filter(|g| g.len() > 1) {
        let perms = permutations(g);
        orders = orders
            .iter()
            .flat_map(|base| {
                perms.iter().map(move |p| {
                    let mut order = base.clone();
                    for (slot, &v) in g.iter().zip(p) {
                        order[*slot] = v;
                    }
                    order
                })
            })
            .collect();
    }
    orders
}

/// All permutations of `items` in lexicographic index order, identity first.
fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Canonical form of an acyclic, pruned graph with terminals at 0 and n-1.
fn canonical_form(n: usize, rows: &[u8; MAX_NODES], ops: &[Op]) -> CellGraph {
    let topo = topological_order(n, rows).expect("canonical_form requires an acyclic graph");
    let depth = longest_depths(n, rows, &topo);
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by_key(|&v| (v == n - 1, depth[v], ops[v].id(), v));

    // Slots sharing (depth, op) form a class; try every arrangement within
    // classes and keep the one with the largest adjacency code.
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for slot in 0..n {
        let v = sorted[slot];
        match classes.last_mut() {
            Some(c) if {
                let w = sorted[c[0]];
                depth[w] == depth[v] && ops[w] == ops[v]
            } =>
            {
                c.push(slot)
            }
            _ => classes.push(vec![slot]),
        }
    }
    let mut best: Option<(u64, [u8; MAX_NODES])> = None;
    for slot_order in group_orderings(n, &classes) {
        let order: Vec<usize> = slot_order.iter().map(|&s| sorted[s]).collect();
        let (candidate, _) = permute(rows, ops, &order);
        let code = adjacency_code(n, &candidate);
        if best.is_none_or(|(c, _)| code > c) {
            best = Some((code, candidate));
        }
    }
    let (_, rows) = best.expect("at least one ordering");
    let ops = sorted.iter().map(|&v| ops[v]).collect();
    CellGraph { n, rows, ops }
}
