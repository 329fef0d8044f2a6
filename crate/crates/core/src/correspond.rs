//! Marker labelling by Euclidean distance matrix (EDM) comparison.
//!
//! A model EDM is computed once from the known constellation; every frame the
//! EDM of the reconstructed points is compared against it. Two matchers run
//! side by side:
//!
//! * [`match_profile`] compares each model marker's ascending distance profile
//!   with every reconstructed point's profile (sum of absolute differences
//!   after truncating to the shorter profile) and assigns greedily.
//! * [`match_permutation`] searches the injection of model markers into
//!   reconstructed points that minimises the mean squared EDM discrepancy.
//!
//! [`resolve`] merges the two, falling back on the previous frame's positions
//! where they disagree.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

/// Largest model size the permutation matcher accepts.
pub const MAX_PERMUTATION_MARKERS: usize = 12;
/// Model sizes up to this use plain enumeration when the search space is small.
pub const MAX_EXHAUSTIVE_MARKERS: usize = 8;
const MAX_EXHAUSTIVE_LEAVES: f64 = 5.0e5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrespondError {
    #[error("an EDM needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("{model} model markers exceed the permutation search limit of {MAX_PERMUTATION_MARKERS}")]
    TooManyMarkers { model: usize },
    #[error("scene has {scene} points but the model has {model} markers")]
    SceneSmallerThanModel { scene: usize, model: usize },
}

/// Symmetric matrix of pairwise distances (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Edm {
    d: DMatrix<f64>,
}

impl Edm {
    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.d.row(i).iter().copied().collect()
    }

    /// Smallest gap between two distinct pairwise distances. Labelling of an
    /// isometric copy is stable while per-point noise stays well below half of
    /// this.
    pub fn min_distance_gap(&self) -> f64 {
        let mut ds: Vec<f64> = (0..self.n())
            .flat_map(|i| (i + 1..self.n()).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        ds.sort_by(f64::total_cmp);
        ds.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

pub fn build_edm(points: &[Point3]) -> Result<Edm, CorrespondError> {
    let n = points.len();
    if n < 2 {
        return Err(CorrespondError::TooFewPoints(n));
    }
    let d = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (points[i] - points[j]).norm() });
    Ok(Edm { d })
}

/// Partial injective map from model markers to reconstructed points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    /// `assignment[model] = Some(reconstructed index)`.
    pub assignment: Vec<Option<usize>>,
    /// Mean squared EDM discrepancy over labelled pairs (mm²).
    pub residual: f64,
}

impl Labeling {
    pub fn empty(n_model: usize) -> Self {
        Self {
            assignment: vec![None; n_model],
            residual: 0.0,
        }
    }

    pub fn from_assignment(assignment: Vec<Option<usize>>, rm: &Edm, mm: &Edm) -> Self {
        let residual = mean_squared_discrepancy(&assignment, rm, mm);
        Self {
            assignment,
            residual,
        }
    }

    pub fn labelled(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen: Vec<usize> = self.assignment.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    /// `(model index, reconstructed index)` for each labelled marker.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(m, a)| a.map(|r| (m, r)))
    }
}

/// Mean squared `(mm[i][j] - rm[a_i][a_j])²` over labelled pairs; 0 when fewer
/// than two markers are labelled.
pub fn mean_squared_discrepancy(assignment: &[Option<usize>], rm: &Edm, mm: &Edm) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..assignment.len() {
        let Some(ai) = assignment[i] else { continue };
        for j in i + 1..assignment.len() {
            let Some(aj) = assignment[j] else { continue };
            let e = mm.get(i, j) - rm.get(ai, aj);
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean squared discrepancy of one labelled marker against the other labelled
/// markers.
pub fn marker_discrepancy(labeling: &Labeling, marker: usize, rm: &Edm, mm: &Edm) -> f64 {
    let Some(a) = labeling.assignment[marker] else {
        return f64::INFINITY;
    };
    let (sum, count) = labeling
        .pairs()
        .filter(|&(j, _)| j != marker)
        .fold((0.0, 0usize), |(s, c), (j, aj)| {
            let e = mm.get(marker, j) - rm.get(a, aj);
            (s + e * e, c + 1)
        });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn sorted_row(edm: &Edm, i: usize) -> Vec<f64> {
    let mut r = edm.row(i);
    r.sort_by(f64::total_cmp);
    r
}

/// Greedy assignment by distance-profile similarity.
pub fn match_profile(rm: &Edm, mm: &Edm) -> Labeling {
    let model_profiles: Vec<Vec<f64>> = (0..mm.n()).map(|i| sorted_row(mm, i)).collect();
    let scene_profiles: Vec<Vec<f64>> = (0..rm.n()).map(|q| sorted_row(rm, q)).collect();

    let mut costs = Vec::with_capacity(mm.n() * rm.n());
    for (i, mp) in model_profiles.iter().enumerate() {
        for (q, sp) in scene_profiles.iter().enumerate() {
            let c: f64 = mp.iter().zip(sp).map(|(a, b)| (a - b).abs()).sum();
            costs.push((c, i, q));
        }
    }
    costs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assignment = vec![None; mm.n()];
    let mut used = vec![false; rm.n()];
    for (_, i, q) in costs {
        if assignment[i].is_none() && !used[q] {
            assignment[i] = Some(q);
            used[q] = true;
        }
    }
    Labeling::from_assignment(assignment, rm, mm)
}

struct Search<'a> {
    rm: &'a Edm,
    mm: &'a Edm,
    bound: f64,
    best_cost: f64,
    best: Option<Vec<usize>>,
    current: Vec<usize>,
    used: Vec<bool>,
}

impl Search<'_> {
    fn increment(&self, k: usize, q: usize) -> f64 {
        (0..k)
            .map(|i| {
                let e = self.mm.get(i, k) - self.rm.get(self.current[i], q);
                e * e
            })
            .sum()
    }

    fn exhaustive(&mut self, k: usize, partial: f64) {
        if k == self.mm.n() {
            if partial < self.best_cost {
                self.best_cost = partial;
                self.best = Some(self.current.clone());
            }
            return;
        }
        for q in 0..self.rm.n() {
            if self.used[q] {
                continue;
            }
            let cost = partial + self.increment(k, q);
            self.used[q] = true;
            self.current.push(q);
            self.exhaustive(k + 1, cost);
            self.current.pop();
            self.used[q] = false;
        }
    }

    /// Pruning threshold: anything whose lower bound exceeds this cannot win,
    /// not even on the lexicographic tie-break.
    fn limit(&self) -> f64 {
        let l = self.bound.min(self.best_cost);
        l * (1.0 + 1e-12) + 1e-9
    }

    /// Lower bound on the pair terms between the assigned prefix and every
    /// unassigned model marker, ignoring injectivity among the latter.
    fn remaining_bound(&self, k: usize) -> f64 {
        let mut total = 0.0;
        for j in k..self.mm.n() {
            let mut best = f64::INFINITY;
            for q in 0..self.rm.n() {
                if self.used[q] {
                    continue;
                }
                let mut c = 0.0;
                for i in 0..k {
                    let e = self.mm.get(i, j) - self.rm.get(self.current[i], q);
                    c += e * e;
                    if c >= best {
                        break;
                    }
                }
                best = best.min(c);
            }
            total += best;
        }
        total
    }

    fn branch_and_bound(&mut self, k: usize, partial: f64) {
        if k == self.mm.n() {
            let better = partial < self.best_cost
                || (partial == self.best_cost && self.best.as_ref().is_some_and(|b| self.current < *b));
            if better {
                self.best_cost = partial;
                self.best = Some(self.current.clone());
            }
            return;
        }
        let mut children: Vec<(f64, usize)> = (0..self.rm.n())
            .filter(|&q| !self.used[q])
            .map(|q| (partial + self.increment(k, q), q))
            .collect();
        children.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (cost, q) in children {
            if cost > self.limit() {
                break;
            }
            self.used[q] = true;
            self.current.push(q);
            if cost + self.remaining_bound(k + 1) <= self.limit() {
                self.branch_and_bound(k + 1, cost);
            }
            self.current.pop();
            self.used[q] = false;
        }
    }
}

fn check_sizes(rm: &Edm, mm: &Edm) -> Result<(), CorrespondError> {
    if mm.n() > MAX_PERMUTATION_MARKERS {
        return Err(CorrespondError::TooManyMarkers { model: mm.n() });
    }
    if rm.n() < mm.n() {
        return Err(CorrespondError::SceneSmallerThanModel {
            scene: rm.n(),
            model: mm.n(),
        });
    }
    Ok(())
}

fn search(rm: &Edm, mm: &Edm, prune: bool, seed: Option<&[usize]>) -> Labeling {
    let bound = match seed {
        Some(s) if prune && s.len() == mm.n() => {
            let a: Vec<Option<usize>> = s.iter().map(|&q| Some(q)).collect();
            let pairs = (mm.n() * (mm.n() - 1) / 2) as f64;
            mean_squared_discrepancy(&a, rm, mm) * pairs
        }
        _ => f64::INFINITY,
    };
    let mut s = Search {
        rm,
        mm,
        bound,
        best_cost: f64::INFINITY,
        best: None,
        current: Vec::with_capacity(mm.n()),
        used: vec![false; rm.n()],
    };
    if prune {
        s.branch_and_bound(0, 0.0);
    } else {
        s.exhaustive(0, 0.0);
    }
    let assignment = s
        .best
        .expect("at least one injection exists")
        .into_iter()
        .map(Some)
        .collect();
    Labeling::from_assignment(assignment, rm, mm)
}

/// Enumerate every injection of model markers into reconstructed points.
pub fn match_permutation_exhaustive(rm: &Edm, mm: &Edm) -> Result<Labeling, CorrespondError> {
    check_sizes(rm, mm)?;
    Ok(search(rm, mm, false, None))
}

/// Depth-first branch and bound, cheapest child first, pruning subtrees whose
/// partial cost plus a lower bound on the remaining pair terms cannot improve
/// on the best complete injection. `seed`, when given, supplies an initial
/// upper bound. Equal-cost injections are broken toward the lexicographically
/// smallest, so the result equals exhaustive enumeration.
pub fn match_permutation_bnb(rm: &Edm, mm: &Edm, seed: Option<&[usize]>) -> Result<Labeling, CorrespondError> {
    check_sizes(rm, mm)?;
    Ok(search(rm, mm, true, seed))
}

fn injection_count(m: usize, n: usize) -> f64 {
    (0..n).map(|k| (m - k) as f64).product()
}

/// Injection minimising the mean squared EDM discrepancy.
///
/// Small searches (at most eight model markers and a modest number of
/// injections) are enumerated outright; larger ones use branch and bound seeded
/// with the profile matcher's answer.
pub fn match_permutation(rm: &Edm, mm: &Edm) -> Result<Labeling, CorrespondError> {
    check_sizes(rm, mm)?;
    if mm.n() <= MAX_EXHAUSTIVE_MARKERS && injection_count(rm.n(), mm.n()) <= MAX_EXHAUSTIVE_LEAVES {
        return match_permutation_exhaustive(rm, mm);
    }
    let profile = match_profile(rm, mm);
    let seed: Option<Vec<usize>> = profile.assignment.iter().copied().collect();
    match_permutation_bnb(rm, mm, seed.as_deref())
}

/// Labelled positions from the previous frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    model: Edm,
    pub previous: Vec<Option<Point3>>,
    pub frame: u64,
}

impl TrackState {
    pub fn new(model: Edm) -> Self {
        let n = model.n();
        Self {
            model,
            previous: vec![None; n],
            frame: 0,
        }
    }

    pub fn model(&self) -> &Edm {
        &self.model
    }

    pub fn has_history(&self) -> bool {
        self.previous.iter().any(|p| p.is_some())
    }

    fn update(&mut self, labeling: &Labeling, points: &[Point3]) {
        for (m, r) in labeling.pairs() {
            self.previous[m] = Some(points[r]);
        }
        self.frame += 1;
    }
}

/// Merge the two matchers' labelings and update the track.
///
/// Without history the permutation result `b` is adopted. Otherwise agreeing
/// markers keep their label and disagreements go to the candidate nearest the
/// marker's previous position.
pub fn resolve(a: &Labeling, b: &Labeling, track: &mut TrackState, points: &[Point3]) -> Labeling {
    let n = track.model.n();
    let rm = match build_edm(points) {
        Ok(rm) => rm,
        Err(_) => {
            // Fewer than two points cannot carry a constellation label.
            track.frame += 1;
            return Labeling::empty(n);
        }
    };

    let assignment = if !track.has_history() {
        b.assignment.clone()
    } else {
        let mut out = vec![None; n];
        let mut used = vec![false; points.len()];
        // Agreements first, so a disagreement cannot steal an agreed point.
        for m in 0..n {
            if let (Some(x), Some(y)) = (a.assignment[m], b.assignment[m]) {
                if x == y && !used[x] {
                    out[m] = Some(x);
                    used[x] = true;
                }
            }
        }
        for m in 0..n {
            if out[m].is_some() {
                continue;
            }
            let mut candidates: Vec<usize> = [b.assignment[m], a.assignment[m]]
                .into_iter()
                .flatten()
                .filter(|&q| !used[q])
                .collect();
            candidates.dedup();
            if let Some(prev) = track.previous[m] {
                candidates.sort_by(|&p, &q| {
                    (points[p] - prev)
                        .norm()
                        .total_cmp(&(points[q] - prev).norm())
                });
            }
            if let Some(&q) = candidates.first() {
                out[m] = Some(q);
                used[q] = true;
            }
        }
        out
    };

    let labeling = Labeling::from_assignment(assignment, &rm, &track.model);
    track.update(&labeling, points);
    labeling
}

/// Drop labels inconsistent with the rest of the constellation.
///
/// Repeatedly removes the marker with the largest mean absolute EDM
/// discrepancy while that exceeds `gate_mm`, keeping at least three labels.
pub fn prune_inconsistent(labeling: &Labeling, rm: &Edm, mm: &Edm, gate_mm: f64) -> Labeling {
    let mut assignment = labeling.assignment.clone();
    loop {
        let labelled: Vec<(usize, usize)> = assignment
            .iter()
            .enumerate()
            .filter_map(|(m, a)| a.map(|r| (m, r)))
            .collect();
        if labelled.len() <= 3 {
            break;
        }
        let worst = labelled
            .iter()
            .map(|&(m, r)| {
                let mad = labelled
                    .iter()
                    .filter(|&&(j, _)| j != m)
                    .map(|&(j, rj)| (mm.get(m, j) - rm.get(r, rj)).abs())
                    .sum::<f64>()
                    / (labelled.len() - 1) as f64;
                (mad, m)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("non-empty");
        if worst.0 <= gate_mm {
            break;
        }
        assignment[worst.1] = None;
    }
    Labeling::from_assignment(assignment, rm, mm)
}

/// Settle points claimed by both the breast and the device labelings: the
/// owner with the lower per-marker discrepancy keeps the point.
pub fn arbitrate(breast: &mut Labeling, device: &mut Labeling, rm: &Edm, mm_breast: &Edm, mm_device: &Edm) {
    let conflicts: Vec<(usize, usize)> = breast
        .pairs()
        .filter_map(|(mb, r)| device.assignment.iter().position(|&a| a == Some(r)).map(|md| (mb, md)))
        .collect();
    if conflicts.is_empty() {
        return;
    }
    for (mb, md) in conflicts {
        let eb = marker_discrepancy(breast, mb, rm, mm_breast);
        let ed = marker_discrepancy(device, md, rm, mm_device);
        if eb <= ed {
            device.assignment[md] = None;
        } else {
            breast.assignment[mb] = None;
        }
    }
    breast.residual = mean_squared_discrepancy(&breast.assignment, rm, mm_breast);
    device.residual = mean_squared_discrepancy(&device.assignment, rm, mm_device);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, min_sep: f64) -> Vec<Point3> {
        let mut pts: Vec<Point3> = Vec::new();
        while pts.len() < n {
            let p = Point3::new(
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-30.0..30.0),
            );
            if pts.iter().all(|q| (q - p).norm() >= min_sep) {
                pts.push(p);
            }
        }
        pts
    }

    #[test]
    fn edm_basics() {
        let e = build_edm(&[Point3::origin(), Point3::new(3.0, 4.0, 0.0)]).unwrap();
        assert_eq!(e.n(), 2);
        assert_eq!(e.get(0, 1), 5.0);
        assert_eq!(e.get(1, 0), 5.0);
        assert_eq!(e.get(0, 0), 0.0);

        let t = build_edm(&[Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)]).unwrap();
        let mut d = vec![t.get(0, 1), t.get(0, 2), t.get(1, 2)];
        d.sort_by(f64::total_cmp);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.matrix(), &t.matrix().transpose());

        assert_eq!(build_edm(&[Point3::origin()]), Err(CorrespondError::TooFewPoints(1)));
    }

    #[test]
    fn identical_edms_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 7, 10.0);
        let e = build_edm(&pts).unwrap();
        for l in [match_profile(&e, &e), match_permutation(&e, &e).unwrap()] {
            assert_eq!(l.assignment, (0..7).map(Some).collect::<Vec<_>>());
            assert_eq!(l.residual, 0.0);
        }
    }

    #[test]
    fn permuted_scene_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_points(&mut rng, 8, 10.0);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        // scene[perm[i]] = model[i]
        let mut scene = vec![Point3::origin(); 8];
        for (i, &p) in perm.iter().enumerate() {
            scene[p] = model[i];
        }
        let mm = build_edm(&model).unwrap();
        let rm = build_edm(&scene).unwrap();
        let expect: Vec<Option<usize>> = perm.iter().map(|&p| Some(p)).collect();
        assert_eq!(match_profile(&rm, &mm).assignment, expect);
        assert_eq!(match_permutation(&rm, &mm).unwrap().assignment, expect);
    }

    #[test]
    fn spurious_far_point_is_never_assigned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_points(&mut rng, 6, 10.0);
        let mut scene = model.clone();
        scene.insert(2, Point3::new(900.0, -800.0, 700.0));
        let mm = build_edm(&model).unwrap();
        let rm = build_edm(&scene).unwrap();
        for l in [match_profile(&rm, &mm), match_permutation(&rm, &mm).unwrap()] {
            assert!(l.assignment.iter().all(|&a| a != Some(2)));
            assert_eq!(l.labelled(), 6);
        }
    }

    #[test]
    fn bnb_equals_exhaustive_n6() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let model = random_points(&mut rng, 6, 5.0);
            let mut scene: Vec<Point3> = model
                .iter()
                .map(|p| p + nalgebra::Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0)))
                .collect();
            scene.push(Point3::new(rng.random_range(-60.0..60.0), 0.0, 0.0));
            scene.shuffle(&mut rng);
            let mm = build_edm(&model).unwrap();
            let rm = build_edm(&scene).unwrap();
            let ex = match_permutation_exhaustive(&rm, &mm).unwrap();
            let bb = match_permutation_bnb(&rm, &mm, None).unwrap();
            assert_eq!(ex, bb);
            let seed: Vec<usize> = match_profile(&rm, &mm).assignment.iter().map(|a| a.unwrap()).collect();
            assert_eq!(match_permutation_bnb(&rm, &mm, Some(&seed)).unwrap(), ex);
        }
    }

    #[test]
    fn size_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = build_edm(&random_points(&mut rng, 13, 2.0)).unwrap();
        assert!(matches!(
            match_permutation(&big, &big),
            Err(CorrespondError::TooManyMarkers { model: 13 })
        ));
        let small = build_edm(&random_points(&mut rng, 3, 2.0)).unwrap();
        let four = build_edm(&random_points(&mut rng, 4, 2.0)).unwrap();
        assert!(matches!(
            match_permutation(&small, &four),
            Err(CorrespondError::SceneSmallerThanModel { .. })
        ));
    }

    #[test]
    fn resolve_policies() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(40.0, 0.0, 0.0),
            Point3::new(0.0, 55.0, 0.0),
            Point3::new(40.1, 0.0, 0.0),
        ];
        let model = build_edm(&pts[..3]).unwrap();
        let rm = build_edm(&pts).unwrap();
        let a = Labeling::from_assignment(vec![Some(0), Some(1), Some(2)], &rm, &model);
        let b = Labeling::from_assignment(vec![Some(0), Some(3), Some(2)], &rm, &model);

        // First frame adopts the permutation result.
        let mut track = TrackState::new(model.clone());
        assert_eq!(resolve(&a, &b, &mut track, &pts).assignment, b.assignment);
        assert_eq!(track.frame, 1);

        // Agreement passes through.
        let mut track = TrackState::new(model.clone());
        track.previous = vec![Some(pts[0]), Some(pts[1]), Some(pts[2])];
        assert_eq!(resolve(&a, &a, &mut track, &pts).assignment, a.assignment);

        // Disagreement on marker 1: the previous position sits 0.1 mm from b's pick.
        let mut track = TrackState::new(model);
        track.previous = vec![Some(pts[0]), Some(Point3::new(40.2, 0.0, 0.0)), Some(pts[2])];
        let r = resolve(&a, &b, &mut track, &pts);
        assert_eq!(r.assignment[1], Some(3));
        assert_eq!(track.previous[1], Some(pts[3]));
    }

    #[test]
    fn pruning_removes_ghost_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_points(&mut rng, 8, 15.0);
        let mut scene = model.clone();
        scene[4] += nalgebra::Vector3::new(0.0, 0.0, 80.0);
        let mm = build_edm(&model).unwrap();
        let rm = build_edm(&scene).unwrap();
        let full = Labeling::from_assignment((0..8).map(Some).collect(), &rm, &mm);
        let pruned = prune_inconsistent(&full, &rm, &mm, 5.0);
        assert_eq!(pruned.assignment[4], None);
        assert_eq!(pruned.labelled(), 7);
        assert!(pruned.residual < 1e-20);
    }

    #[test]
    fn arbitration_prefers_lower_discrepancy() {
        let breast_pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(50.0, 0.0, 0.0),
            Point3::new(0.0, 70.0, 0.0),
        ];
        let device_pts = vec![Point3::new(200.0, 0.0, 0.0), Point3::new(230.0, 0.0, 0.0), Point3::new(200.0, 45.0, 0.0)];
        let scene: Vec<Point3> = breast_pts.iter().chain(&device_pts).copied().collect();
        let rm = build_edm(&scene).unwrap();
        let mb = build_edm(&breast_pts).unwrap();
        let md = build_edm(&device_pts).unwrap();
        let mut breast = Labeling::from_assignment(vec![Some(0), Some(1), Some(2)], &rm, &mb);
        // Device wrongly claims breast point 2 for its marker 2.
        let mut device = Labeling::from_assignment(vec![Some(3), Some(4), Some(2)], &rm, &md);
        arbitrate(&mut breast, &mut device, &rm, &mb, &md);
        assert_eq!(breast.assignment[2], Some(2));
        assert_eq!(device.assignment[2], None);
        assert!(breast.is_injective() && device.is_injective());
    }
}
