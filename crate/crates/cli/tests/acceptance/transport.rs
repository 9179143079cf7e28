//! Brute-force optimal transport between two histograms on `0..K` with cost
//! `|i - j|`, solved as a min-cost flow by successive shortest paths.

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
    rev: usize,
}

struct Network {
    adj: Vec<Vec<Edge>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Self {
            adj: (0..n).map(|_| Vec::new()).collect(),
        }
    }

    fn edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        let (rf, rt) = (self.adj[to].len(), self.adj[from].len());
        self.adj[from].push(Edge { to, cap, cost, rev: rf });
        self.adj[to].push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
            rev: rt,
        });
    }

    /// Bellman-Ford over residual edges; returns the predecessor edge of
    /// every node reachable from `src`.
    fn shortest(&self, src: usize) -> Vec<Option<(usize, usize)>> {
        let n = self.adj.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        dist[src] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u].is_infinite() {
                    continue;
                }
                for (i, e) in self.adj[u].iter().enumerate() {
                    if e.cap > 1e-15 && dist[u] + e.cost < dist[e.to] - 1e-12 {
                        dist[e.to] = dist[u] + e.cost;
                        prev[e.to] = Some((u, i));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        prev
    }
}

pub fn transport_cost(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    let (src, sink) = (0, 2 * k + 1);
    let mut net = Network::new(2 * k + 2);
    for i in 0..k {
        net.edge(src, 1 + i, a[i], 0.0);
        net.edge(1 + k + i, sink, b[i], 0.0);
        for j in 0..k {
            net.edge(1 + i, 1 + k + j, f64::INFINITY, (i as f64 - j as f64).abs());
        }
    }
    let mut total = 0.0;
    loop {
        let prev = net.shortest(src);
        if prev[sink].is_none() {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while let Some((u, i)) = prev[v] {
            push = push.min(net.adj[u][i].cap);
            v = u;
        }
        let mut v = sink;
        while let Some((u, i)) = prev[v] {
            let rev = net.adj[u][i].rev;
            net.adj[u][i].cap -= push;
            net.adj[v][rev].cap += push;
            total += push * net.adj[u][i].cost;
            v = u;
        }
    }
    total
}
