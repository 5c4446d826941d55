//! Discrete probability measures, Kantorovich–Rubinshtein distances and the
//! push-forward iteration `μ ↦ Σ aᵢ (fᵢ)_* μ`.
//!
//! Transport problems are solved by a primal network simplex over a sparse arc
//! set that is grown by full pricing until no reduced cost is negative. The
//! c-transform of the final potentials gives a certified lower bound.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gasket::{apply_fan_map, TriangleSystem};
use crate::metric::MetricSpace;
use crate::scalar::Real;
use crate::surface::{SurfaceModel, SurfacePoint};
use crate::triangle::{next, prev, GeodesicTriangleRegion};

/// Atoms with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<P, T> {
    atoms: Vec<P>,
    weights: Vec<T>,
}

impl<P, T: Real> DiscreteMeasure<P, T> {
    pub fn new(atoms: Vec<P>, weights: Vec<T>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "{} atoms with {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::Invalid("weights must be finite and nonnegative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::tol(1e-12) * T::of_usize(weights.len()).max(T::one()) {
            return Err(Error::Invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(DiscreteMeasure { atoms, weights })
    }

    pub fn dirac(p: P) -> Self {
        DiscreteMeasure {
            atoms: vec![p],
            weights: vec![T::one()],
        }
    }

    pub fn uniform(atoms: Vec<P>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::Invalid("no atoms".into()));
        }
        let w = T::one() / T::of_usize(n);
        Ok(DiscreteMeasure {
            weights: vec![w; n],
            atoms,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[P] {
        &self.atoms
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Value of a transport problem with its certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrDistance {
    /// Cost of the best plan found (an upper bound).
    pub value: f64,
    /// Dual value of the c-transformed potentials (a lower bound).
    pub lower: f64,
    /// Optimality certified: no negative reduced cost over all pairs.
    pub exact: bool,
    pub pricing_rounds: usize,
}

impl KrDistance {
    pub fn gap(&self) -> f64 {
        (self.value - self.lower).max(0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    /// Supports with `n·m` at most this many pairs get every arc up front.
    pub dense_limit: usize,
    /// Pricing rounds before giving up on exactness.
    pub max_rounds: usize,
    /// Initial nearest neighbours per atom on sparse problems.
    pub neighbours: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            dense_limit: 1_000_000,
            max_rounds: 40,
            neighbours: 8,
        }
    }
}

/// `d*_𝓜`: transport with cost `d`.
pub fn kr_distance<M, T>(
    space: &M,
    mu: &DiscreteMeasure<M::Point, T>,
    nu: &DiscreteMeasure<M::Point, T>,
) -> Result<KrDistance>
where
    M: MetricSpace<T>,
    M::Point: PartialEq,
    T: Real,
{
    transport_with(space, mu, nu, |d| d, TransportOptions::default())
}

/// `d_𝓜`: test functions also bounded by 1, i.e. transport with cost `min(d, 2)`.
pub fn bounded_lipschitz_distance<M, T>(
    space: &M,
    mu: &DiscreteMeasure<M::Point, T>,
    nu: &DiscreteMeasure<M::Point, T>,
) -> Result<KrDistance>
where
    M: MetricSpace<T>,
    M::Point: PartialEq,
    T: Real,
{
    transport_with(space, mu, nu, |d| d.min(2.0), TransportOptions::default())
}

pub fn transport_with<M, T, G>(
    space: &M,
    mu: &DiscreteMeasure<M::Point, T>,
    nu: &DiscreteMeasure<M::Point, T>,
    ground: G,
    opts: TransportOptions,
) -> Result<KrDistance>
where
    M: MetricSpace<T>,
    M::Point: PartialEq,
    T: Real,
    G: Fn(f64) -> f64 + Sync,
{
    if mu == nu {
        return Ok(KrDistance {
            value: 0.0,
            lower: 0.0,
            exact: true,
            pricing_rounds: 0,
        });
    }
    let a: Vec<f64> = mu.weights.iter().map(|w| w.as_f64()).collect();
    let b: Vec<f64> = nu.weights.iter().map(|w| w.as_f64()).collect();
    let cost = |i: usize, j: usize| -> Result<f64> {
        Ok(ground(space.distance(&mu.atoms[i], &nu.atoms[j])?.as_f64()))
    };
    solve_transport(&a, &b, &cost, opts)
}

/// Balanced transport between `a` and `b` (both summing to one) with the
/// given cost.
pub fn solve_transport<C>(a: &[f64], b: &[f64], cost: &C, opts: TransportOptions) -> Result<KrDistance>
where
    C: Fn(usize, usize) -> Result<f64> + Sync,
{
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::Invalid("empty measure".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::Invalid(format!("unbalanced masses {sa} and {sb}")));
    }
    let b: Vec<f64> = b.iter().map(|x| x * sa / sb).collect();
    let dense = n.saturating_mul(m) <= opts.dense_limit;

    let mut max_c: f64 = 0.0;
    let mut arcs: Vec<(usize, usize, f64)> = Vec::new();
    if dense {
        arcs.reserve(n * m);
        for i in 0..n {
            for j in 0..m {
                let c = cost(i, j)?;
                max_c = max_c.max(c);
                arcs.push((i, j, c));
            }
        }
    } else {
        let k = opts.neighbours.max(1);
        let mut col_best: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(k + 1); m];
        let mut row = vec![0.0; m];
        for i in 0..n {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = cost(i, j)?;
                max_c = max_c.max(*slot);
            }
            let mut order: Vec<usize> = (0..m).collect();
            let kk = k.min(m);
            order.select_nth_unstable_by(kk - 1, |&x, &y| row[x].total_cmp(&row[y]));
            for &j in &order[..kk] {
                arcs.push((i, j, row[j]));
            }
            for (j, &c) in row.iter().enumerate() {
                let best = &mut col_best[j];
                if best.len() < k || c < best[best.len() - 1].0 {
                    let pos = best.partition_point(|e| e.0 <= c);
                    best.insert(pos, (c, i));
                    best.truncate(k);
                }
            }
        }
        let mut seen: std::collections::HashSet<(usize, usize)> = arcs.iter().map(|e| (e.0, e.1)).collect();
        for (j, best) in col_best.iter().enumerate() {
            for &(c, i) in best {
                if seen.insert((i, j)) {
                    arcs.push((i, j, c));
                }
            }
        }
    }

    let mut net = Simplex::new(a, &b, 2.0 * max_c + 1.0);
    for &(i, j, c) in &arcs {
        net.add_arc(i, n + j, c);
    }
    drop(arcs);
    let eps = 1e-13 * (1.0 + max_c);
    net.run(eps)?;
    if dense {
        let value = net.transport_cost();
        return Ok(KrDistance {
            value,
            lower: value,
            exact: true,
            pricing_rounds: 0,
        });
    }

    let mut rounds = 0;
    loop {
        rounds += 1;
        let pot = net.potentials();
        // f_i = -pot(i), g_j = pot(j); price every pair and form g' = min_i (c_ij - f_i)
        let mut g_min = vec![f64::INFINITY; m];
        let mut entering: Vec<(usize, usize, f64)> = Vec::new();
        let mut row_neg: Vec<(f64, usize, f64)> = Vec::new();
        for i in 0..n {
            let fi = -pot[i];
            row_neg.clear();
            for (j, gm) in g_min.iter_mut().enumerate() {
                let c = cost(i, j)?;
                let slack = c - fi;
                if slack < *gm {
                    *gm = slack;
                }
                let rc = c + pot[i] - pot[n + j];
                if rc < -eps {
                    row_neg.push((rc, j, c));
                }
            }
            if !row_neg.is_empty() {
                let keep = 4.min(row_neg.len());
                row_neg.select_nth_unstable_by(keep - 1, |x, y| x.0.total_cmp(&y.0));
                for &(_, j, c) in &row_neg[..keep] {
                    entering.push((i, j, c));
                }
            }
        }
        let lower: f64 = (0..n).map(|i| a[i] * -pot[i]).sum::<f64>() + (0..m).map(|j| b[j] * g_min[j]).sum::<f64>();
        let value = net.transport_cost() + net.artificial_flow() * max_c;
        if entering.is_empty() || rounds >= opts.max_rounds {
            let exact = entering.is_empty();
            return Ok(KrDistance {
                value,
                lower: if exact { value.min(lower.max(value - eps)) } else { lower.min(value) },
                exact,
                pricing_rounds: rounds,
            });
        }
        for (i, j, c) in entering {
            net.add_arc(i, n + j, c);
        }
        net.run(eps)?;
    }
}

/// Primal network simplex for uncapacitated transportation problems.
/// Nodes: sources, then sinks, then an artificial root joined to every node.
struct Simplex {
    #[cfg_attr(not(test), allow(dead_code))]
    n_src: usize,
    tail: Vec<u32>,
    head: Vec<u32>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    parent: Vec<u32>,
    pred: Vec<u32>,
    /// `pred` is oriented from the node to its parent.
    up: Vec<bool>,
    depth: Vec<u32>,
    pot: Vec<f64>,
    children: Vec<Vec<u32>>,
    child_pos: Vec<u32>,
    n_artificial: usize,
    cursor: usize,
}

impl Simplex {
    fn new(a: &[f64], b: &[f64], big_m: f64) -> Self {
        let (n, m) = (a.len(), b.len());
        let root = n + m;
        let nodes = root + 1;
        let mut s = Simplex {
            n_src: n,
            tail: Vec::new(),
            head: Vec::new(),
            cost: Vec::new(),
            flow: Vec::new(),
            parent: vec![root as u32; nodes],
            pred: vec![0; nodes],
            up: vec![false; nodes],
            depth: vec![1; nodes],
            pot: vec![0.0; nodes],
            children: vec![Vec::new(); nodes],
            child_pos: vec![0; nodes],
            n_artificial: n + m,
            cursor: 0,
        };
        s.depth[root] = 0;
        for v in 0..n + m {
            let e = s.tail.len() as u32;
            if v < n {
                s.push_arc(v, root, big_m, a[v]);
                s.up[v] = true;
                s.pot[v] = -big_m;
            } else {
                s.push_arc(root, v, big_m, b[v - n]);
                s.pot[v] = big_m;
            }
            s.pred[v] = e;
            s.child_pos[v] = s.children[root].len() as u32;
            s.children[root].push(v as u32);
        }
        s
    }

    fn push_arc(&mut self, u: usize, v: usize, c: f64, f: f64) {
        self.tail.push(u as u32);
        self.head.push(v as u32);
        self.cost.push(c);
        self.flow.push(f);
    }

    fn add_arc(&mut self, u: usize, v: usize, c: f64) {
        self.push_arc(u, v, c, 0.0);
    }

    fn reduced(&self, e: usize) -> f64 {
        self.cost[e] + self.pot[self.tail[e] as usize] - self.pot[self.head[e] as usize]
    }

    fn potentials(&self) -> &[f64] {
        &self.pot
    }

    fn transport_cost(&self) -> f64 {
        (self.n_artificial..self.cost.len())
            .map(|e| self.cost[e] * self.flow[e])
            .sum()
    }

    fn artificial_flow(&self) -> f64 {
        self.flow[..self.n_artificial].iter().sum()
    }

    /// Block search pricing: most negative reduced cost in the first block
    /// that has one.
    fn find_entering(&mut self, eps: f64) -> Option<usize> {
        let total = self.cost.len();
        let block = ((total as f64).sqrt() as usize).max(16);
        let mut scanned = 0;
        let mut best = None;
        let mut best_rc = -eps;
        let mut in_block = 0;
        while scanned < total {
            let e = self.cursor;
            self.cursor = if self.cursor + 1 == total { 0 } else { self.cursor + 1 };
            let rc = self.reduced(e);
            if rc < best_rc {
                best_rc = rc;
                best = Some(e);
            }
            scanned += 1;
            in_block += 1;
            if in_block == block {
                if best.is_some() {
                    return best;
                }
                in_block = 0;
            }
        }
        best
    }

    fn run(&mut self, eps: f64) -> Result<()> {
        let mut path_u = Vec::new();
        let mut path_v = Vec::new();
        let mut stack = Vec::new();
        let limit = 200 * self.cost.len() + 10_000;
        let mut pivots = 0;
        while let Some(e) = self.find_entering(eps) {
            pivots += 1;
            if pivots > limit {
                return Err(Error::Convergence {
                    what: "network simplex",
                    iterations: pivots,
                    residual: self.reduced(e),
                });
            }
            self.pivot(e, &mut path_u, &mut path_v, &mut stack);
        }
        Ok(())
    }

    fn pivot(&mut self, e: usize, path_u: &mut Vec<usize>, path_v: &mut Vec<usize>, stack: &mut Vec<usize>) {
        let u = self.tail[e] as usize;
        let v = self.head[e] as usize;
        path_u.clear();
        path_v.clear();
        let (mut x, mut y) = (u, v);
        while self.depth[x] > self.depth[y] {
            path_u.push(x);
            x = self.parent[x] as usize;
        }
        while self.depth[y] > self.depth[x] {
            path_v.push(y);
            y = self.parent[y] as usize;
        }
        while x != y {
            path_u.push(x);
            path_v.push(y);
            x = self.parent[x] as usize;
            y = self.parent[y] as usize;
        }

        // Cycle orientation: join → u (down), u → v, v → join (up). The last
        // blocking arc in that order leaves.
        let mut theta = f64::INFINITY;
        let mut leave: Option<(usize, bool)> = None;
        for &x in path_u.iter().rev() {
            if self.up[x] {
                let f = self.flow[self.pred[x] as usize];
                if f <= theta {
                    theta = f;
                    leave = Some((x, true));
                }
            }
        }
        for &y in path_v.iter() {
            if !self.up[y] {
                let f = self.flow[self.pred[y] as usize];
                if f <= theta {
                    theta = f;
                    leave = Some((y, false));
                }
            }
        }
        let (q, on_u) = leave.expect("cycle has a backward arc");

        for &x in path_u.iter() {
            let a = self.pred[x] as usize;
            if self.up[x] {
                self.flow[a] -= theta;
            } else {
                self.flow[a] += theta;
            }
        }
        for &y in path_v.iter() {
            let a = self.pred[y] as usize;
            if self.up[y] {
                self.flow[a] += theta;
            } else {
                self.flow[a] -= theta;
            }
        }
        self.flow[e] = theta;

        // hang the cut-off subtree from the entering arc
        let (a, b, a_is_tail) = if on_u { (u, v, true) } else { (v, u, false) };
        let mut new_parent = b;
        let mut new_pred = e as u32;
        let mut new_up = a_is_tail;
        let mut x = a;
        loop {
            let old_parent = self.parent[x] as usize;
            let old_pred = self.pred[x];
            let old_up = self.up[x];
            self.detach(x, old_parent);
            self.parent[x] = new_parent as u32;
            self.pred[x] = new_pred;
            self.up[x] = new_up;
            self.attach(x, new_parent);
            if x == q {
                break;
            }
            new_parent = x;
            new_pred = old_pred;
            new_up = !old_up;
            x = old_parent;
        }

        let target = if a_is_tail {
            self.pot[v] - self.cost[e]
        } else {
            self.pot[u] + self.cost[e]
        };
        let delta = target - self.pot[a];
        stack.clear();
        stack.push(a);
        while let Some(z) = stack.pop() {
            self.pot[z] += delta;
            self.depth[z] = self.depth[self.parent[z] as usize] + 1;
            stack.extend(self.children[z].iter().map(|&c| c as usize));
        }
    }

    fn detach(&mut self, x: usize, p: usize) {
        let pos = self.child_pos[x] as usize;
        let list = &mut self.children[p];
        list.swap_remove(pos);
        if pos < list.len() {
            let moved = list[pos] as usize;
            self.child_pos[moved] = pos as u32;
        }
    }

    fn attach(&mut self, x: usize, p: usize) {
        self.child_pos[x] = self.children[p].len() as u32;
        self.children[p].push(x as u32);
    }

    #[cfg(test)]
    fn plan(&self) -> Vec<(usize, usize, f64)> {
        (self.n_artificial..self.cost.len())
            .filter(|&e| self.flow[e] > 0.0)
            .map(|e| (self.tail[e] as usize, self.head[e] as usize - self.n_src, self.flow[e]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PushforwardOptions {
    pub budget: usize,
    pub resample: bool,
    /// Snapping resolution; the snap depth is `⌈log₂(1/tol)⌉`, capped by the
    /// budget and the system depth.
    pub snap_tol: f64,
}

impl Default for PushforwardOptions {
    fn default() -> Self {
        PushforwardOptions {
            budget: 20_000,
            resample: true,
            snap_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PushforwardResult<T> {
    pub measure: DiscreteMeasure<SurfacePoint<T>, T>,
    /// `trace[m] = d*_𝓜(μ_m, μ_{m+1})`.
    pub trace: Vec<KrDistance>,
    /// Successive quotients of the trace (0 once the trace vanishes).
    pub ratios: Vec<f64>,
    /// Iterations after which atoms were merged.
    pub snapped_at: Vec<usize>,
    pub snap_depth: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Address {
    len: u32,
    idx: u64,
}

/// Iterates `μ ↦ Σ aᵢ (fᵢ)_* μ` with the corner maps of the base triangle.
/// Atoms remember the word of maps applied to them; merging replaces every
/// atom whose word has a common depth-`d` prefix `J` by one atom at the
/// chart centroid of `Δ_J`.
pub fn pushforward_fixpoint<T: Real>(
    system: &TriangleSystem<T>,
    weights: &[T],
    iterations: usize,
    seed: DiscreteMeasure<SurfacePoint<T>, T>,
    opts: PushforwardOptions,
) -> Result<PushforwardResult<T>> {
    let k = weights.len();
    if k == 0 || k > 3 {
        return Err(Error::Invalid(format!("{k} weights; expected 1 to 3")));
    }
    if weights.iter().any(|w| !(*w > T::zero())) {
        return Err(Error::Invalid("weights must be positive".into()));
    }
    let total: T = weights.iter().copied().sum();
    if (total - T::one()).abs() > T::tol(1e-12) {
        return Err(Error::Invalid(format!("weights sum to {total}, not 1")));
    }
    let surface = &system.surface;
    let base = &system.base;
    let budget_depth = (0..=40u32)
        .take_while(|&d| 3usize.saturating_pow(d).saturating_mul(seed.len().max(1)) <= opts.budget.max(1))
        .last()
        .unwrap_or(0) as usize;
    let tol_depth = (1.0 / opts.snap_tol).log2().ceil().max(0.0) as usize;
    let snap_depth = tol_depth.min(budget_depth).min(system.depth());

    let mut atoms: Vec<(SurfacePoint<T>, T, Address)> = seed
        .atoms
        .iter()
        .zip(&seed.weights)
        .map(|(p, w)| (*p, *w, Address { len: 0, idx: 0 }))
        .collect();
    let mut current = seed.clone();
    let mut trace = Vec::with_capacity(iterations);
    let mut snapped_at = Vec::new();
    for it in 0..iterations {
        let mut next_atoms = Vec::with_capacity(atoms.len() * k);
        for (i, &a) in weights.iter().enumerate() {
            for (p, w, addr) in &atoms {
                let q = apply_fan_map(surface, base, i, p)?;
                let idx = (i as u64) * 3u64.pow(addr.len) + addr.idx;
                next_atoms.push((q, a * *w, Address { len: addr.len + 1, idx }));
            }
        }
        if next_atoms.len() > opts.budget {
            if !opts.resample {
                return Err(Error::Capacity {
                    atoms: next_atoms.len(),
                    budget: opts.budget,
                });
            }
            next_atoms = snap(system, next_atoms, snap_depth)?;
            if next_atoms.len() > opts.budget {
                return Err(Error::Capacity {
                    atoms: next_atoms.len(),
                    budget: opts.budget,
                });
            }
            snapped_at.push(it + 1);
        }
        let next = DiscreteMeasure {
            atoms: next_atoms.iter().map(|a| a.0).collect(),
            weights: next_atoms.iter().map(|a| a.1).collect(),
        };
        trace.push(kr_distance(surface, &current, &next)?);
        current = next;
        atoms = next_atoms;
    }
    let ratios = trace
        .windows(2)
        .map(|w| if w[1].value == 0.0 { 0.0 } else { w[1].value / w[0].value })
        .collect();
    Ok(PushforwardResult {
        measure: current,
        trace,
        ratios,
        snapped_at,
        snap_depth,
    })
}

fn snap<T: Real>(
    system: &TriangleSystem<T>,
    atoms: Vec<(SurfacePoint<T>, T, Address)>,
    depth: usize,
) -> Result<Vec<(SurfacePoint<T>, T, Address)>> {
    let mut order: Vec<Address> = Vec::new();
    let mut mass: HashMap<Address, T> = HashMap::new();
    for (_, w, addr) in atoms {
        if (addr.len as usize) < depth {
            return Err(Error::domain(format!(
                "atom word of length {} is shorter than the snap depth {depth}",
                addr.len
            )));
        }
        let key = Address {
            len: depth as u32,
            idx: addr.idx / 3u64.pow(addr.len - depth as u32),
        };
        let slot = mass.entry(key).or_insert_with(|| {
            order.push(key);
            T::zero()
        });
        *slot += w;
    }
    order.sort_by_key(|a| a.idx);
    Ok(order
        .into_iter()
        .map(|key| {
            let cell = &system.levels[depth][key.idx as usize];
            let c = cell.vertices;
            let third = T::one() / T::lit(3.0);
            let centroid = SurfacePoint::new((c[0].u + c[1].u + c[2].u) * third, (c[0].v + c[1].v + c[2].v) * third);
            (centroid, mass[&key], key)
        })
        .collect())
}

/// Mass of every depth-`depth` cell, indexed by level position. Atoms outside
/// every cell of that depth are reported separately.
pub fn cell_masses<T: Real>(
    system: &TriangleSystem<T>,
    measure: &DiscreteMeasure<SurfacePoint<T>, T>,
    depth: usize,
) -> Result<(Vec<T>, T)> {
    if depth > system.depth() {
        return Err(Error::domain(format!("depth {depth} exceeds the system depth")));
    }
    let b = system.branching();
    let mut regions: Vec<Vec<GeodesicTriangleRegion<T>>> = vec![vec![system.base.clone()]];
    for n in 1..depth {
        let mut level = Vec::with_capacity(system.levels[n].len());
        for c in &system.levels[n] {
            let v = c.vertices;
            let mut sides = Vec::with_capacity(3);
            for i in 0..3 {
                sides.push(system.surface.geodesic_between(&v[next(i)], &v[prev(i)])?);
            }
            level.push(GeodesicTriangleRegion::from_parts(v, [sides[0], sides[1], sides[2]]));
        }
        regions.push(level);
    }
    let mut masses = vec![T::zero(); b.pow(depth as u32)];
    let mut outside = T::zero();
    'atoms: for (x, w) in measure.atoms.iter().zip(&measure.weights) {
        let mut idx = 0usize;
        for n in 0..depth {
            match locate_child(&system.surface, &regions[n][idx], x)? {
                Some(i) => idx = idx * b + i,
                None => {
                    outside += *w;
                    continue 'atoms;
                }
            }
        }
        masses[idx] += *w;
    }
    Ok((masses, outside))
}

/// Corner child of `parent` containing `x`, if any.
fn locate_child<T: Real>(
    surface: &SurfaceModel<T>,
    parent: &GeodesicTriangleRegion<T>,
    x: &SurfacePoint<T>,
) -> Result<Option<usize>> {
    let slack = T::tol(1e-9);
    let limit = T::tol(1e-7) * parent.diam();
    for i in 0..3 {
        if *x == parent.vertices[i] {
            return Ok(Some(i));
        }
        let fc = parent.fan_coordinates(surface, i, x)?;
        if fc.residual <= limit
            && fc.s >= -slack
            && fc.s <= T::lit(0.5) + slack
            && fc.t >= -slack
            && fc.t <= T::one() + slack
        {
            return Ok(Some(i));
        }
    }
    Ok(None)
}
