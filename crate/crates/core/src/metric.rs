//! Finite metric spaces: distance tables, diameters, covers and packings.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::surface::{SurfaceModel, SurfacePoint};

/// A space that can report distances between its points.
pub trait MetricSpace<T: Real>: Sync {
    type Point: Clone + Send + Sync;

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> Result<T>;

    /// Whether the space is flat; selects the packing bound.
    fn is_flat(&self) -> bool {
        false
    }
}

impl<T: Real> MetricSpace<T> for SurfaceModel<T> {
    type Point = SurfacePoint<T>;

    fn distance(&self, a: &SurfacePoint<T>, b: &SurfacePoint<T>) -> Result<T> {
        SurfaceModel::distance(self, a, b)
    }

    fn is_flat(&self) -> bool {
        self.kind().is_flat()
    }
}

/// Points together with their symmetric distance table.
#[derive(Debug, Clone)]
pub struct PointCloud<P, T> {
    points: Vec<P>,
    dist: Vec<T>,
}

impl<P: Clone + Send + Sync, T: Real> PointCloud<P, T> {
    /// Computes every pairwise distance with the space's oracle.
    pub fn build<M>(space: &M, points: Vec<P>) -> Result<Self>
    where
        M: MetricSpace<T, Point = P>,
    {
        let n = points.len();
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| space.distance(&points[i], &points[j]))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        let mut dist = vec![T::zero(); n * n];
        for (i, row) in rows.into_iter().enumerate() {
            for (k, d) in row.into_iter().enumerate() {
                let j = i + 1 + k;
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Ok(PointCloud { points, dist })
    }

    /// Wraps a precomputed table; rejects asymmetric, negative or nonzero
    /// diagonal entries.
    pub fn from_table(points: Vec<P>, dist: Vec<T>) -> Result<Self> {
        let n = points.len();
        if dist.len() != n * n {
            return Err(Error::Invalid(format!(
                "distance table has {} entries for {n} points",
                dist.len()
            )));
        }
        for i in 0..n {
            if dist[i * n + i] != T::zero() {
                return Err(Error::Invalid(format!("dist({i},{i}) is not zero")));
            }
            for j in 0..i {
                let d = dist[i * n + j];
                if !(d >= T::zero()) || d != dist[j * n + i] {
                    return Err(Error::Invalid(format!(
                        "dist({i},{j}) is negative or asymmetric"
                    )));
                }
            }
        }
        Ok(PointCloud { points, dist })
    }
}

impl<P, T: Real> PointCloud<P, T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[P] {
        &self.points
    }

    pub fn dist(&self, i: usize, j: usize) -> T {
        self.dist[i * self.points.len() + j]
    }

    /// Largest relative violation of the triangle inequality, as
    /// `max(d(i,k) − d(i,j) − d(j,k)) / diameter`, over all triples when there
    /// are at most `exhaustive_limit` points and over `samples` seeded random
    /// triples otherwise.
    pub fn triangle_inequality_defect(&self, exhaustive_limit: usize, samples: usize, seed: u64) -> T {
        let n = self.len();
        let diam = diameter(self).unwrap_or(T::zero());
        if n < 3 || diam == T::zero() {
            return T::zero();
        }
        let defect = |i: usize, j: usize, k: usize| {
            let a = self.dist(i, k) - self.dist(i, j) - self.dist(j, k);
            let b = self.dist(i, j) - self.dist(i, k) - self.dist(k, j);
            let c = self.dist(j, k) - self.dist(j, i) - self.dist(i, k);
            a.max(b).max(c)
        };
        let mut worst = T::zero();
        if n <= exhaustive_limit {
            for i in 0..n {
                for j in (i + 1)..n {
                    for k in (j + 1)..n {
                        worst = worst.max(defect(i, j, k));
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                let idx = sample(&mut rng, n, 3);
                worst = worst.max(defect(idx.index(0), idx.index(1), idx.index(2)));
            }
        }
        worst / diam
    }

    /// Audits the triangle inequality at tolerance 1e−9 relative to the diameter.
    pub fn check_triangle_inequality(&self, seed: u64) -> Result<()> {
        let d = self.triangle_inequality_defect(200, 100_000, seed);
        if d > T::tol(1e-9) {
            return Err(Error::Invalid(format!(
                "triangle inequality violated by {d} relative to the diameter"
            )));
        }
        Ok(())
    }
}

/// Largest pairwise distance; 0 for a singleton.
pub fn diameter<P, T: Real>(cloud: &PointCloud<P, T>) -> Result<T> {
    if cloud.is_empty() {
        return Err(Error::domain("diameter of an empty cloud"));
    }
    Ok(cloud.dist.iter().fold(T::zero(), |m, &d| m.max(d)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverRecord<T> {
    pub epsilon: T,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingReport<T> {
    pub delta: T,
    pub achieved: usize,
    pub bound_constant: usize,
    /// Indices of the chosen centers in the candidate cloud.
    pub centers: Vec<usize>,
}

/// Upper bound on the number of disjoint `δr`-balls inside an `r`-ball.
///
/// Flat: area ratio `1/δ²`. Curved with |K| ≤ 1: the `r`-ball has area at most
/// the hyperbolic `2π(cosh r − 1)` and each `δr`-ball at least the spherical
/// `2π(1 − cos δr)`.
pub fn packing_bound<T: Real>(flat: bool, r: T, delta: T) -> usize {
    let q = if flat {
        T::one() / (delta * delta)
    } else {
        (r.cosh() - T::one()) / (T::one() - (delta * r).cos())
    };
    // Guard against round-off just below an integer.
    (q * (T::one() + T::tol(1e-12))).floor().to_usize().unwrap_or(usize::MAX)
}

/// Greedy farthest-point packing of disjoint `δr`-balls inside `B(center, r)`.
///
/// A candidate `c` qualifies when `d(center, c) ≤ (1 − δ)r`, so its whole
/// `δr`-ball lies in the big one. Farthest-point insertion starts from the
/// candidate nearest the center and adds the candidate farthest from the
/// chosen set while that distance exceeds the separation.
///
/// The greedy is repeated on every shrunken candidate set
/// `{d(center, c) < (1 − τ)r}`, `τ > δ`, with separation `2τr`; each such run
/// is a valid packing for `δ` as well, and the largest is reported. This makes
/// `achieved` nonincreasing in `δ`.
pub fn greedy_pack<M, T>(
    space: &M,
    center: &M::Point,
    r: T,
    delta: T,
    candidates: &PointCloud<M::Point, T>,
) -> Result<PackingReport<T>>
where
    M: MetricSpace<T>,
    T: Real,
{
    if !(delta > T::zero() && delta < T::one()) {
        return Err(Error::domain(format!("delta = {delta} outside (0, 1)")));
    }
    if !(r > T::zero()) {
        return Err(Error::domain(format!("radius {r} must be positive")));
    }
    let flat = space.is_flat();
    let bound_constant = packing_bound(flat, r, delta);
    let to_center: Vec<T> = candidates
        .points()
        .par_iter()
        .map(|p| space.distance(center, p))
        .collect::<Result<_>>()?;
    let reach = (T::one() - delta) * r;
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| to_center[i] <= reach)
        .collect();
    order.sort_by(|&a, &b| to_center[a].partial_cmp(&to_center[b]).unwrap().then(a.cmp(&b)));

    let mut best: Vec<usize> = Vec::new();
    let mut end = order.len();
    let mut tau = delta;
    while end > 0 {
        if packing_bound(flat, r, tau) <= best.len() {
            break;
        }
        let run = farthest_point_run(candidates, &order[..end], T::lit(2.0) * tau * r);
        if run.len() > best.len() {
            best = run;
        }
        // next shrunken set drops the outermost distance level
        let level = to_center[order[end - 1]];
        while end > 0 && to_center[order[end - 1]] == level {
            end -= 1;
        }
        tau = T::one() - level / r;
    }
    Ok(PackingReport {
        delta,
        achieved: best.len(),
        bound_constant,
        centers: best,
    })
}

fn farthest_point_run<P, T: Real>(cloud: &PointCloud<P, T>, eligible: &[usize], sep: T) -> Vec<usize> {
    let Some(&first) = eligible.first() else {
        return Vec::new();
    };
    let mut centers = vec![first];
    let mut gap: Vec<T> = eligible.iter().map(|&i| cloud.dist(i, first)).collect();
    loop {
        let mut best: Option<(usize, T)> = None;
        for (k, &g) in gap.iter().enumerate() {
            if best.map_or(true, |(_, b)| g > b) {
                best = Some((k, g));
            }
        }
        match best {
            Some((k, g)) if g > sep => {
                let idx = eligible[k];
                centers.push(idx);
                for (kk, &i) in eligible.iter().enumerate() {
                    gap[kk] = gap[kk].min(cloud.dist(i, idx));
                }
            }
            _ => return centers,
        }
    }
}

/// Cover witness: every cell must have diameter at most `epsilon` (relative
/// slack 1e−12 absorbs round-off in computed diameters).
pub fn box_count<P, T: Real>(cells: &[PointCloud<P, T>], epsilon: T) -> Result<CoverRecord<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::domain(format!("epsilon = {epsilon} must be positive")));
    }
    let slack = epsilon * (T::one() + T::tol(1e-12));
    for (i, cell) in cells.iter().enumerate() {
        let d = diameter(cell)?;
        if d > slack {
            return Err(Error::Rejected {
                cell: i.to_string(),
                reason: format!("diameter {d} exceeds epsilon {epsilon}"),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::domain("cover with no cells"));
    }
    Ok(CoverRecord {
        epsilon,
        count: cells.len(),
    })
}

/// Writes `epsilon,count` rows with a header, epsilon to 17 significant digits.
pub fn write_cover_csv<T: Real, W: Write>(records: &[CoverRecord<T>], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epsilon,count")?;
    for r in records {
        writeln!(out, "{:.16e},{}", r.epsilon.as_f64(), r.count)?;
    }
    Ok(())
}
