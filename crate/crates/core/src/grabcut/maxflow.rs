//! s-t graphs for binary energies and an exact max-flow solver (Dinic).

use crate::error::{Error, Result};

/// Terminal-weighted undirected graph.
///
/// `source_caps[p]` is paid when node `p` ends on the sink side,
/// `sink_caps[p]` when it ends on the source side, and each neighbor edge
/// `(i, j, c)` is paid when `i` and `j` are separated.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    pub node_count: usize,
    pub source_caps: Vec<f64>,
    pub sink_caps: Vec<f64>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl FlowGraph {
    pub fn new(node_count: usize) -> Self {
        Self {
            node_count,
            source_caps: vec![0.0; node_count],
            sink_caps: vec![0.0; node_count],
            edges: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_caps.len() != self.node_count || self.sink_caps.len() != self.node_count {
            return Err(Error::DimensionMismatch("terminal capacity arrays must match node count".into()));
        }
        let bad = |c: f64| !(c.is_finite() && c >= 0.0);
        if self.source_caps.iter().chain(&self.sink_caps).any(|&c| bad(c)) {
            return Err(Error::InvalidArgument("terminal capacities must be finite and non-negative".into()));
        }
        for &(i, j, c) in &self.edges {
            if i >= self.node_count || j >= self.node_count {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) references a missing node")));
            }
            if bad(c) {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has invalid capacity {c}")));
            }
        }
        Ok(())
    }

    /// Cost of the cut induced by `source_side` (true = source side).
    pub fn cut_cost(&self, source_side: &[bool]) -> f64 {
        let mut cost = 0.0;
        for p in 0..self.node_count {
            cost += if source_side[p] { self.sink_caps[p] } else { self.source_caps[p] };
        }
        for &(i, j, c) in &self.edges {
            if source_side[i] != source_side[j] {
                cost += c;
            }
        }
        cost
    }
}

#[derive(Debug, Clone)]
pub struct MinCut {
    pub flow: f64,
    /// `true` for nodes on the source side of the minimum cut.
    pub source_side: Vec<bool>,
}

struct Residual {
    head: Vec<usize>,
    to: Vec<usize>,
    next: Vec<usize>,
    cap: Vec<f64>,
}

const NIL: usize = usize::MAX;

impl Residual {
    fn with_nodes(n: usize, arcs: usize) -> Self {
        Self {
            head: vec![NIL; n],
            to: Vec::with_capacity(arcs),
            next: Vec::with_capacity(arcs),
            cap: Vec::with_capacity(arcs),
        }
    }

    /// Adds arc u->v with capacity `c` and its partner v->u with `rc`.
    fn add_pair(&mut self, u: usize, v: usize, c: f64, rc: f64) {
        for (a, b, cc) in [(u, v, c), (v, u, rc)] {
            self.to.push(b);
            self.next.push(self.head[a]);
            self.cap.push(cc);
            self.head[a] = self.to.len() - 1;
        }
    }
}

/// Exact maximum flow and the source-reachable minimum cut.
pub fn max_flow_min_cut(g: &FlowGraph) -> Result<MinCut> {
    g.validate()?;
    let n = g.node_count;
    let (s, t) = (n, n + 1);
    let mut flow = 0.0;

    // route the trivially available s->p->t flow up front
    let mut src = g.source_caps.clone();
    let mut snk = g.sink_caps.clone();
    for p in 0..n {
        let m = src[p].min(snk[p]);
        if m > 0.0 {
            flow += m;
            src[p] -= m;
            snk[p] -= m;
        }
    }

    let mut r = Residual::with_nodes(n + 2, 2 * (2 * n + g.edges.len()));
    for p in 0..n {
        if src[p] > 0.0 {
            r.add_pair(s, p, src[p], 0.0);
        }
        if snk[p] > 0.0 {
            r.add_pair(p, t, snk[p], 0.0);
        }
    }
    for &(i, j, c) in &g.edges {
        if c > 0.0 && i != j {
            r.add_pair(i, j, c, c);
        }
    }

    let mut level = vec![u32::MAX; n + 2];
    let mut queue = Vec::with_capacity(n + 2);
    let mut iter = vec![NIL; n + 2];
    let mut stack: Vec<usize> = Vec::new();
    loop {
        // BFS levels on the residual graph
        level.iter_mut().for_each(|l| *l = u32::MAX);
        queue.clear();
        level[s] = 0;
        queue.push(s);
        let mut qi = 0;
        while qi < queue.len() {
            let u = queue[qi];
            qi += 1;
            let mut e = r.head[u];
            while e != NIL {
                let v = r.to[e];
                if r.cap[e] > 0.0 && level[v] == u32::MAX {
                    level[v] = level[u] + 1;
                    queue.push(v);
                }
                e = r.next[e];
            }
        }
        if level[t] == u32::MAX {
            break;
        }
        iter.copy_from_slice(&r.head);

        // blocking flow via iterative DFS over current arcs
        stack.clear();
        let mut u = s;
        loop {
            if u == t {
                let mut bottleneck = f64::INFINITY;
                for &e in &stack {
                    bottleneck = bottleneck.min(r.cap[e]);
                }
                let mut cut_at = stack.len();
                for (k, &e) in stack.iter().enumerate() {
                    r.cap[e] -= bottleneck;
                    r.cap[e ^ 1] += bottleneck;
                    if r.cap[e] <= 0.0 && cut_at == stack.len() {
                        cut_at = k;
                    }
                }
                flow += bottleneck;
                stack.truncate(cut_at);
                u = if cut_at == 0 { s } else { r.to[stack[cut_at - 1]] };
                continue;
            }
            let mut e = iter[u];
            while e != NIL {
                let v = r.to[e];
                if r.cap[e] > 0.0 && level[v] == level[u] + 1 {
                    break;
                }
                e = r.next[e];
            }
            iter[u] = e;
            if e != NIL {
                stack.push(e);
                u = r.to[e];
            } else {
                // dead end
                level[u] = u32::MAX;
                match stack.pop() {
                    None => break,
                    Some(back) => {
                        u = r.to[back ^ 1];
                        iter[u] = r.next[iter[u]];
                    }
                }
            }
        }
    }

    // source side = residual-reachable from s
    let mut seen = vec![false; n + 2];
    seen[s] = true;
    queue.clear();
    queue.push(s);
    let mut qi = 0;
    while qi < queue.len() {
        let u = queue[qi];
        qi += 1;
        let mut e = r.head[u];
        while e != NIL {
            let v = r.to[e];
            if r.cap[e] > 0.0 && !seen[v] {
                seen[v] = true;
                queue.push(v);
            }
            e = r.next[e];
        }
    }
    let source_side = seen[..n].to_vec();
    Ok(MinCut { flow, source_side })
}
