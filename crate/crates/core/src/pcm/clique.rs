//! Maximum-clique solvers over a bit-packed adjacency matrix.

/// Symmetric boolean matrix with a true diagonal, one bitset per row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Adjacency {
    n: usize,
    rows: Vec<Vec<u64>>,
}

fn words(n: usize) -> usize {
    n.div_ceil(64)
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        let mut adj = Self {
            n,
            rows: vec![vec![0; words(n)]; n],
        };
        for i in 0..n {
            adj.set_bit(i, i);
        }
        adj
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut adj = Self::new(n);
        for i in 0..n {
            for j in i + 1..n {
                adj.set(i, j, f(i, j));
            }
        }
        adj
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn set_bit(&mut self, i: usize, j: usize) {
        self.rows[i][j / 64] |= 1 << (j % 64);
    }

    fn clear_bit(&mut self, i: usize, j: usize) {
        self.rows[i][j / 64] &= !(1 << (j % 64));
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i][j / 64] >> (j % 64) & 1 == 1
    }

    /// Set the symmetric entry (i, j); the diagonal stays true.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        if i == j {
            return;
        }
        if value {
            self.set_bit(i, j);
            self.set_bit(j, i);
        } else {
            self.clear_bit(i, j);
            self.clear_bit(j, i);
        }
    }

    /// Append a node whose adjacency to the existing nodes is `row`.
    pub fn push(&mut self, row: &[bool]) {
        assert_eq!(row.len(), self.n, "row length must match node count");
        let n = self.n + 1;
        if words(n) > words(self.n) {
            for r in &mut self.rows {
                r.push(0);
            }
        }
        self.rows.push(vec![0; words(n)]);
        self.n = n;
        let new = n - 1;
        self.set_bit(new, new);
        for (j, &v) in row.iter().enumerate() {
            self.set(new, j, v);
        }
    }

    pub fn degree(&self, i: usize) -> usize {
        self.rows[i].iter().map(|w| w.count_ones() as usize).sum::<usize>() - 1
    }

    pub fn is_clique(&self, set: &[usize]) -> bool {
        set.iter().all(|&i| i < self.n)
            && set
                .iter()
                .enumerate()
                .all(|(a, &i)| set[a + 1..].iter().all(|&j| i != j && self.get(i, j)))
    }

    /// Text grid, one row per line, `1` for consistent pairs.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(if self.get(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

type Bits = Vec<u64>;

fn first_one(bits: &Bits) -> Option<usize> {
    bits.iter()
        .enumerate()
        .find(|(_, &w)| w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

fn count(bits: &Bits) -> usize {
    bits.iter().map(|w| w.count_ones() as usize).sum()
}

fn and(a: &Bits, b: &Bits) -> Bits {
    a.iter().zip(b).map(|(x, y)| x & y).collect()
}

struct Search<'a> {
    adj: &'a Adjacency,
    best: Vec<usize>,
    current: Vec<usize>,
}

impl Search<'_> {
    /// Colors used by a greedy sequential coloring of `cand`, an upper
    /// bound on the clique number of the induced subgraph.
    fn color_bound(&self, cand: &Bits) -> usize {
        let mut uncolored = cand.clone();
        let mut colors = 0;
        while count(&uncolored) > 0 {
            colors += 1;
            let mut available = uncolored.clone();
            while let Some(v) = first_one(&available) {
                uncolored[v / 64] &= !(1 << (v % 64));
                available[v / 64] &= !(1 << (v % 64));
                for (a, r) in available.iter_mut().zip(&self.adj.rows[v]) {
                    *a &= !r;
                }
            }
        }
        colors
    }

    fn expand(&mut self, cand: Bits) {
        if self.current.len() > self.best.len() {
            self.best = self.current.clone();
        }
        if self.current.len() + count(&cand) <= self.best.len() {
            return;
        }
        if self.current.len() + self.color_bound(&cand) <= self.best.len() {
            return;
        }
        let mut remaining = cand;
        // children in increasing index order keep the search lexicographic
        while let Some(v) = first_one(&remaining) {
            if self.current.len() + count(&remaining) <= self.best.len() {
                return;
            }
            remaining[v / 64] &= !(1 << (v % 64));
            let next = and(&remaining, &self.adj.rows[v]);
            self.current.push(v);
            self.expand(next);
            self.current.pop();
        }
    }
}

/// A maximum clique by branch and bound with a greedy-coloring bound.
///
/// Cliques are explored in lexicographic order and the incumbent is replaced
/// only by strictly larger ones, so among several maximum cliques the
/// lexicographically smallest index set is returned.
pub fn max_clique_exact(adj: &Adjacency) -> Vec<usize> {
    let mut all = vec![0u64; words(adj.n)];
    for i in 0..adj.n {
        all[i / 64] |= 1 << (i % 64);
    }
    let mut search = Search {
        adj,
        best: Vec::new(),
        current: Vec::new(),
    };
    search.expand(all);
    search.best
}

fn greedy_from(adj: &Adjacency, seed: usize, order: &[usize]) -> Vec<usize> {
    let mut clique = vec![seed];
    let mut cand = adj.rows[seed].clone();
    cand[seed / 64] &= !(1 << (seed % 64));
    for &v in order {
        if cand[v / 64] >> (v % 64) & 1 == 1 {
            clique.push(v);
            cand = and(&cand, &adj.rows[v]);
            cand[v / 64] &= !(1 << (v % 64));
        }
    }
    clique.sort_unstable();
    clique
}

/// Number of seeds tried by the greedy restart.
const GREEDY_SEEDS: usize = 64;

/// Heuristic clique maintained across insertions.
///
/// If the newest node (the last index) is adjacent to every member of
/// `previous`, the clique is simply extended. Otherwise a degree-ordered
/// greedy search is restarted from the highest-degree seeds and the best
/// result is kept, never falling below a still-valid `previous`.
pub fn max_clique_incremental(adj: &Adjacency, previous: &[usize]) -> Vec<usize> {
    if adj.is_empty() {
        return Vec::new();
    }
    let newest = adj.n - 1;
    let previous_valid = adj.is_clique(previous);
    if previous_valid
        && (!previous.is_empty() || adj.n == 1)
        && !previous.contains(&newest)
        && previous.iter().all(|&i| adj.get(i, newest)) {
        let mut out = previous.to_vec();
        out.push(newest);
        out.sort_unstable();
        return out;
    }
    let mut order: Vec<usize> = (0..adj.n).collect();
    let degree: Vec<usize> = order.iter().map(|&i| adj.degree(i)).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    let mut best: Vec<usize> = if previous_valid {
        let mut p = previous.to_vec();
        p.sort_unstable();
        p
    } else {
        Vec::new()
    };
    for &seed in order.iter().take(GREEDY_SEEDS) {
        if degree[seed] + 1 <= best.len() {
            break;
        }
        let c = greedy_from(adj, seed, &order);
        if c.len() > best.len() {
            best = c;
        }
    }
    best
}
