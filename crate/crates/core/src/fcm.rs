//! Fuzzy c-means clustering over scalar pixel intensities.
//!
//! The alternating scheme minimizes
//! `J = sum_i sum_j u_ij^m (x_j - v_i)^2` subject to every pixel's
//! memberships summing to one. Memberships and centroids are updated in
//! closed form, which makes `J` non-increasing from one sweep to the next.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::ClassMatrix;
use crate::seed;

/// Clustering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FcmConfig {
    pub num_clusters: usize,
    pub fuzzifier: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        Self { num_clusters: 4, fuzzifier: 2.0, max_iterations: 100, tolerance: 1e-5, seed: 0 }
    }
}

impl FcmConfig {
    pub fn with_clusters(num_clusters: usize) -> Self {
        Self { num_clusters, ..Self::default() }
    }

    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::invalid("fcm needs at least 2 clusters"));
        }
        if pixels <= self.num_clusters {
            return Err(Error::invalid(format!(
                "fcm needs more pixels ({pixels}) than clusters ({})",
                self.num_clusters
            )));
        }
        check_fuzzifier(self.fuzzifier)?;
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("fcm tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("fcm max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Membership degrees, one row per cluster and one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix(pub ClassMatrix);

impl MembershipMatrix {
    pub fn new(matrix: ClassMatrix) -> Self {
        Self(matrix)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ClassMatrix::from_rows(rows).map(Self)
    }

    pub fn matrix(&self) -> &ClassMatrix {
        &self.0
    }

    pub fn clusters(&self) -> usize {
        self.0.classes()
    }

    pub fn pixels(&self) -> usize {
        self.0.pixels()
    }

    pub fn get(&self, cluster: usize, pixel: usize) -> f64 {
        self.0.get(cluster, pixel)
    }

    /// Mean over pixels of the largest membership, a crispness summary.
    pub fn mean_max_membership(&self) -> f64 {
        let n = self.pixels();
        if n == 0 {
            return 0.0;
        }
        let total: f64 = (0..n)
            .map(|j| (0..self.clusters()).map(|i| self.get(i, j)).fold(0.0, f64::max))
            .sum();
        total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids(pub Vec<f64>);

impl Centroids {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmResult {
    pub memberships: MembershipMatrix,
    pub centroids: Centroids,
    pub objective: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Objective after each membership update, starting with the initial one.
    pub objective_trace: Vec<f64>,
}

fn check_fuzzifier(m: f64) -> Result<()> {
    if m.is_finite() && m > 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("fuzzifier must be finite and > 1, got {m}")))
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::invalid(format!("{what}[{k}] is not finite"))),
        None => Ok(()),
    }
}

/// Closed-form membership update for fixed centroids.
///
/// A pixel that sits exactly on `k` centroids splits its membership evenly
/// between them and gets zero everywhere else.
pub fn update_memberships(pixels: &[f64], centroids: &Centroids, m: f64) -> Result<MembershipMatrix> {
    if pixels.is_empty() {
        return Err(Error::invalid("no pixels"));
    }
    if centroids.is_empty() {
        return Err(Error::invalid("no centroids"));
    }
    check_fuzzifier(m)?;
    check_finite(pixels, "pixels")?;
    check_finite(centroids.values(), "centroids")?;

    let c = centroids.len();
    let exponent = 1.0 / (m - 1.0);
    let mut u = ClassMatrix::zeros(c, pixels.len());
    let mut d2 = vec![0.0; c];
    for (j, &x) in pixels.iter().enumerate() {
        let mut coincident = 0usize;
        for (i, &v) in centroids.values().iter().enumerate() {
            d2[i] = (x - v) * (x - v);
            if d2[i] == 0.0 {
                coincident += 1;
            }
        }
        if coincident > 0 {
            let share = 1.0 / coincident as f64;
            for i in 0..c {
                u.set(i, j, if d2[i] == 0.0 { share } else { 0.0 });
            }
            continue;
        }
        // u_i = w_i / sum_r w_r with w_i = (d2_min / d2_i)^(1/(m-1)) in (0, 1]
        let nearest = d2.iter().copied().fold(f64::INFINITY, f64::min);
        for w in d2.iter_mut() {
            *w = if exponent == 1.0 { nearest / *w } else { (nearest / *w).powf(exponent) };
        }
        let total: f64 = d2.iter().sum();
        for i in 0..c {
            u.set(i, j, d2[i] / total);
        }
    }
    Ok(MembershipMatrix(u))
}

#[inline]
fn pow_m(u: f64, m: f64) -> f64 {
    if m == 2.0 {
        u * u
    } else {
        u.powf(m)
    }
}

/// Closed-form centroid update: the `u^m`-weighted mean of intensities.
pub fn update_centroids(pixels: &[f64], memberships: &MembershipMatrix, m: f64) -> Result<Centroids> {
    check_fuzzifier(m)?;
    if memberships.pixels() != pixels.len() {
        return Err(Error::invalid(format!(
            "memberships cover {} pixels, image has {}",
            memberships.pixels(),
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(memberships.clusters());
    for i in 0..memberships.clusters() {
        let row = memberships.0.row(i);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&uij, &x) in row.iter().zip(pixels) {
            let w = pow_m(uij, m);
            num += w * x;
            den += w;
        }
        if den <= 0.0 {
            return Err(Error::DegenerateCluster { cluster: i });
        }
        out.push(num / den);
    }
    Ok(Centroids(out))
}

/// The clustering objective `sum_i sum_j u_ij^m (x_j - v_i)^2`.
pub fn objective(pixels: &[f64], memberships: &MembershipMatrix, centroids: &Centroids, m: f64) -> Result<f64> {
    if memberships.pixels() != pixels.len() || memberships.clusters() != centroids.len() {
        return Err(Error::invalid(format!(
            "objective: memberships {}x{}, {} pixels, {} centroids",
            memberships.clusters(),
            memberships.pixels(),
            pixels.len(),
            centroids.len()
        )));
    }
    let mut total = 0.0;
    for (i, &v) in centroids.values().iter().enumerate() {
        for (&uij, &x) in memberships.0.row(i).iter().zip(pixels) {
            total += pow_m(uij, m) * (x - v) * (x - v);
        }
    }
    Ok(total)
}

/// Evenly spaced quantiles of the sorted intensities.
///
/// When two quantiles land on the same value the later one is replaced by a
/// seeded draw from the intensities not yet used; if there are not enough
/// distinct intensities the tie is kept.
fn initial_centroids(pixels: &[f64], c: usize, seed_value: u64) -> Centroids {
    let mut sorted = pixels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..c)
        .map(|i| {
            let q = (i as f64 + 0.5) / c as f64;
            let idx = ((q * n as f64).floor() as usize).min(n - 1);
            sorted[idx]
        })
        .collect();

    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() >= c {
        let mut rng = seed::rng(seed_value, &[seed::stream::FCM_TIES]);
        for i in 1..c {
            if centroids[..i].contains(&centroids[i]) {
                let unused: Vec<f64> =
                    distinct.iter().copied().filter(|v| !centroids[..i].contains(v)).collect();
                centroids[i] = unused[rng.random_range(0..unused.len())];
            }
        }
        centroids.sort_by(f64::total_cmp);
    }
    Centroids(centroids)
}

fn max_abs_change(a: &MembershipMatrix, b: &MembershipMatrix) -> f64 {
    a.0.as_slice().iter().zip(b.0.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs FCM to convergence.
///
/// Clusters are returned ordered by ascending centroid, so cluster `i`
/// lines up with the `i`-th darkest tissue class.
pub fn run(pixels: &[f64], config: &FcmConfig) -> Result<FcmResult> {
    config.validate(pixels.len())?;
    check_finite(pixels, "pixels")?;
    let m = config.fuzzifier;

    let mut centroids = initial_centroids(pixels, config.num_clusters, config.seed);
    let mut memberships = update_memberships(pixels, &centroids, m)?;
    let mut trace = vec![objective(pixels, &memberships, &centroids, m)?];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        centroids = update_centroids(pixels, &memberships, m)?;
        let next = update_memberships(pixels, &centroids, m)?;
        let change = max_abs_change(&memberships, &next);
        memberships = next;
        trace.push(objective(pixels, &memberships, &centroids, m)?);
        if change < config.tolerance {
            converged = true;
            break;
        }
    }

    let (memberships, centroids) = sort_clusters(memberships, centroids);
    Ok(FcmResult {
        objective: *trace.last().expect("trace is never empty"),
        memberships,
        centroids,
        iterations_used: iterations,
        converged,
        objective_trace: trace,
    })
}

fn sort_clusters(memberships: MembershipMatrix, centroids: Centroids) -> (MembershipMatrix, Centroids) {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids.0[a].total_cmp(&centroids.0[b]));
    if order.iter().enumerate().all(|(k, &i)| k == i) {
        return (memberships, centroids);
    }
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| memberships.0.row(i).to_vec()).collect();
    let sorted = order.iter().map(|&i| centroids.0[i]).collect();
    (
        MembershipMatrix(ClassMatrix::from_rows(&rows).expect("rows share a length")),
        Centroids(sorted),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coincident_pixels_are_crisp() {
        let u = update_memberships(&[0.0, 1.0], &Centroids(vec![0.0, 1.0]), 2.0).unwrap();
        assert_eq!(u.0.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equidistant_pixel_splits_evenly() {
        let u = update_memberships(&[0.5], &Centroids(vec![0.0, 1.0]), 2.0).unwrap();
        assert_eq!(u.0.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn quarter_pixel_membership() {
        // 1 / (1 + (0.25/0.75)^2) = 0.9
        let u = update_memberships(&[0.25], &Centroids(vec![0.0, 1.0]), 2.0).unwrap();
        assert!(close(u.get(0, 0), 0.9, 1e-9));
        assert!(close(u.get(1, 0), 0.1, 1e-9));
    }

    #[test]
    fn multiply_coincident_centroids_share() {
        let u = update_memberships(&[0.3], &Centroids(vec![0.3, 0.3, 0.9]), 2.0).unwrap();
        assert_eq!(u.0.as_slice(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(matches!(
            update_memberships(&[f64::NAN], &Centroids(vec![0.0, 1.0]), 2.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(update_memberships(&[0.1], &Centroids(vec![f64::INFINITY, 1.0]), 2.0).is_err());
        assert!(update_memberships(&[0.1], &Centroids(vec![0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn centroid_update_matches_hand_value() {
        // (0 + 0.25 * 1) / (1 + 0.25) = 0.2
        let u = MembershipMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap();
        let v = update_centroids(&[0.0, 1.0], &u, 2.0).unwrap();
        assert!(close(v.0[0], 0.2, 1e-12));
        assert!(close(v.0[1], 1.0, 1e-12));
    }

    #[test]
    fn crisp_centroids_are_cluster_means() {
        let x = [0.1, 0.2, 0.3, 0.8, 1.0];
        let u = MembershipMatrix::from_rows(&[vec![1.0, 1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 1.0]])
            .unwrap();
        let v = update_centroids(&x, &u, 2.0).unwrap();
        assert!(close(v.0[0], 0.2, 1e-12));
        assert!(close(v.0[1], 0.9, 1e-12));
    }

    #[test]
    fn uniform_memberships_give_global_mean() {
        let x = [0.1, 0.4, 0.7, 0.2];
        let u = MembershipMatrix::from_rows(&[vec![1.0 / 3.0; 4], vec![1.0 / 3.0; 4], vec![1.0 / 3.0; 4]])
            .unwrap();
        let v = update_centroids(&x, &u, 2.0).unwrap();
        for c in v.0 {
            assert!(close(c, 0.35, 1e-12));
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let u = MembershipMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            update_centroids(&[0.0, 1.0], &u, 2.0),
            Err(Error::DegenerateCluster { cluster: 1 })
        ));
    }

    #[test]
    fn objective_hand_values() {
        let u = MembershipMatrix::from_rows(&[vec![0.9], vec![0.1]]).unwrap();
        let j = objective(&[0.25], &u, &Centroids(vec![0.0, 1.0]), 2.0).unwrap();
        assert!(close(j, 0.81 * 0.0625 + 0.01 * 0.5625, 1e-12));
        assert!(close(j, 0.05625, 1e-12));

        let crisp = MembershipMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(objective(&[0.0, 1.0], &crisp, &Centroids(vec![0.0, 1.0]), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn objective_crisp_is_within_cluster_sum_of_squares() {
        let x = [0.1, 0.2, 0.3, 0.8, 1.0];
        let u = MembershipMatrix::from_rows(&[vec![1.0, 1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 1.0]])
            .unwrap();
        let j = objective(&x, &u, &Centroids(vec![0.2, 0.9]), 2.0).unwrap();
        let wcss = 0.01 + 0.0 + 0.01 + 0.01 + 0.01;
        assert!(close(j, wcss, 1e-12));
    }

    #[test]
    fn objective_shape_mismatch() {
        let u = MembershipMatrix::from_rows(&[vec![0.9], vec![0.1]]).unwrap();
        assert!(matches!(
            objective(&[0.25, 0.3], &u, &Centroids(vec![0.0, 1.0]), 2.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn too_few_pixels() {
        let cfg = FcmConfig::with_clusters(2);
        assert!(matches!(run(&[0.1, 0.2], &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_image_splits_ties() {
        let cfg = FcmConfig::with_clusters(2);
        match run(&[0.4; 16], &cfg) {
            Ok(res) => {
                for v in res.memberships.0.as_slice() {
                    assert_eq!(*v, 0.5);
                }
            }
            Err(e) => assert!(matches!(e, Error::DegenerateCluster { .. })),
        }
    }

    #[test]
    fn clusters_sorted_by_centroid() {
        let x: Vec<f64> = (0..40).map(|k| if k % 2 == 0 { 0.9 } else { 0.1 }).collect();
        let res = run(&x, &FcmConfig::with_clusters(2)).unwrap();
        assert!(res.centroids.0[0] < res.centroids.0[1]);
        assert!(res.memberships.get(0, 1) > 0.99);
    }
}
