//! Simplex equiangular tight frame prototypes and the geometry diagnostics
//! that measure how closely learned features follow them.
//!
//! Prototypes are the columns of `P = sqrt(C/(C-1)) U (I - 11ᵀ/C)` where `U`
//! is a `d x C` matrix with orthonormal columns. Every column has unit norm
//! and every pair of distinct columns has inner product `-1/(C-1)`.

use crate::diffmath::{dot, l2_normalize, norm, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Fixed `d x C` prototype matrix. Column `c` is the target for category `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfPrototypes {
    matrix: Tensor,
    categories: usize,
    dim: usize,
    seed: u64,
}

impl EtfPrototypes {
    /// Wraps an arbitrary `d x C` matrix without checking the ETF property.
    /// Use [`verify_etf`] to test it.
    pub fn from_matrix(matrix: Tensor, seed: u64) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "prototype matrix must be 2-D, got {:?}",
                matrix.shape()
            )));
        }
        let (dim, categories) = (matrix.rows(), matrix.cols());
        Ok(Self {
            matrix,
            categories,
            dim,
            seed,
        })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Column `c` as an owned vector.
    pub fn prototype(&self, c: usize) -> Result<Vec<f64>> {
        if c >= self.categories {
            return Err(Error::UnknownCategory(c));
        }
        Ok((0..self.dim).map(|r| self.matrix.at(r, c)).collect())
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.categories)
            .map(|c| self.prototype(c).expect("in range"))
            .collect()
    }

    /// `Pᵀ P`.
    pub fn gram(&self) -> Tensor {
        self.matrix.transpose().matmul(&self.matrix)
    }

    /// Multiplies column `c` by `factor`. Used for fault injection.
    pub fn scale_column(&mut self, c: usize, factor: f64) {
        for r in 0..self.dim {
            let v = self.matrix.at(r, c);
            self.matrix.set(r, c, v * factor);
        }
    }
}

/// Builds the simplex ETF for `categories` classes in `dim` dimensions.
pub fn build_etf(categories: usize, dim: usize, seed: u64) -> Result<EtfPrototypes> {
    if categories < 2 {
        return Err(Error::DegenerateCategoryCount(categories));
    }
    if dim < categories {
        return Err(Error::DimensionTooSmall { dim, categories });
    }
    let basis = orthonormal_columns(dim, categories, seed);
    let c = categories as f64;
    let scale = (c / (c - 1.0)).sqrt();
    // U (I - 11ᵀ/C): subtract each row's mean across columns.
    let mut data = vec![0.0; dim * categories];
    for r in 0..dim {
        let row = &basis[r * categories..(r + 1) * categories];
        let mean = row.iter().sum::<f64>() / c;
        for (j, &u) in row.iter().enumerate() {
            data[r * categories + j] = scale * (u - mean);
        }
    }
    EtfPrototypes::from_matrix(Tensor::matrix(dim, categories, data), seed)
}

/// `dim x n` row-major matrix with orthonormal columns, from seeded Gaussian
/// draws orthonormalized by modified Gram-Schmidt with one re-orthogonalization
/// pass.
fn orthonormal_columns(dim: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = rng::normal_vec(&mut rng, dim, 1.0);
        for _pass in 0..2 {
            for q in &cols {
                let proj = dot(&v, q);
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
        }
        // A draw inside the span of earlier columns is discarded.
        if let Ok(u) = l2_normalize(&v) {
            if norm(&v) > 1e-8 {
                cols.push(u);
            }
        }
    }
    let mut out = vec![0.0; dim * n];
    for (j, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            out[r * n + j] = x;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtfVerification {
    pub passed: bool,
    pub max_diag_deviation: f64,
    pub max_offdiag_deviation: f64,
}

/// Checks the Gram matrix against `1` on the diagonal and `-1/(C-1)` off it.
pub fn verify_etf(prototypes: &EtfPrototypes, tol: f64) -> EtfVerification {
    let gram = prototypes.gram();
    let c = prototypes.categories();
    let target = if c > 1 { -1.0 / (c as f64 - 1.0) } else { 0.0 };
    let mut diag: f64 = 0.0;
    let mut off: f64 = 0.0;
    for i in 0..c {
        for j in 0..c {
            let g = gram.at(i, j);
            if i == j {
                diag = diag.max((g - 1.0).abs());
            } else {
                off = off.max((g - target).abs());
            }
        }
    }
    EtfVerification {
        passed: diag <= tol && off <= tol,
        max_diag_deviation: diag,
        max_offdiag_deviation: off,
    }
}

/// Feature vectors of one modality, grouped by category label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    groups: Vec<(usize, Vec<Vec<f64>>)>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, category: usize, feature: Vec<f64>) {
        match self.groups.binary_search_by_key(&category, |g| g.0) {
            Ok(i) => self.groups[i].1.push(feature),
            Err(i) => self.groups.insert(i, (category, vec![feature])),
        }
    }

    pub fn from_groups(groups: Vec<(usize, Vec<Vec<f64>>)>) -> Self {
        let mut set = Self::new();
        for (c, feats) in groups {
            for f in feats {
                set.push(c, f);
            }
        }
        set
    }

    /// Groups in ascending category order.
    pub fn groups(&self) -> &[(usize, Vec<Vec<f64>>)] {
        &self.groups
    }

    pub fn categories(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.0).collect()
    }

    pub fn get(&self, category: usize) -> Option<&[Vec<f64>]> {
        self.groups
            .binary_search_by_key(&category, |g| g.0)
            .ok()
            .map(|i| self.groups[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.1.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Unweighted mean of each category, in category order.
    pub fn category_means(&self) -> Vec<Vec<f64>> {
        self.groups.iter().map(|(_, f)| mean_of(f)).collect()
    }

    /// Mean over every feature of every category.
    pub fn global_mean(&self) -> Vec<f64> {
        let all: Vec<Vec<f64>> = self.groups.iter().flat_map(|g| g.1.iter().cloned()).collect();
        mean_of(&all)
    }

    fn require_pairs(&self) -> Result<()> {
        for (c, f) in &self.groups {
            if f.len() < 2 {
                return Err(Error::InsufficientSamples(*c));
            }
        }
        Ok(())
    }
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let dim = vs.first().map_or(0, Vec::len);
    let mut m = vec![0.0; dim];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = vs.len().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_REL_TOL: f64 = 1e-8;
const POWER_SEED: u64 = 0x00E7_A5EE_D000;

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
fn lambda_max(sym: &Tensor) -> f64 {
    let n = sym.rows();
    if sym.data().iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut rng = rng::seeded(POWER_SEED);
    let mut v = l2_normalize(&rng::normal_vec(&mut rng, n, 1.0)).expect("nonzero start");
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w: Vec<f64> = (0..n).map(|i| dot(sym.row(i), &v)).collect();
        let next = dot(&v, &w);
        let Ok(u) = l2_normalize(&w) else {
            return 0.0;
        };
        v = u;
        let converged = (next - lambda).abs() <= POWER_REL_TOL * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if converged {
            break;
        }
    }
    lambda.max(0.0)
}

/// Largest top eigenvalue of the within-category covariance over categories.
pub fn intra_concentration(features: &FeatureSet) -> Result<f64> {
    features.require_pairs()?;
    let mut eta: f64 = 0.0;
    for (_, feats) in features.groups() {
        let mu = mean_of(feats);
        let d = mu.len();
        let mut cov = vec![0.0; d * d];
        for f in feats {
            let diff: Vec<f64> = f.iter().zip(&mu).map(|(a, b)| a - b).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += diff[i] * diff[j];
                }
            }
        }
        let n = feats.len() as f64;
        cov.iter_mut().for_each(|x| *x /= n);
        eta = eta.max(lambda_max(&Tensor::matrix(d, d, cov)));
    }
    Ok(eta)
}

/// Centers each mean by `global_mean` and normalizes it.
pub fn center_and_normalize(means: &[Vec<f64>], global_mean: &[f64]) -> Result<Vec<Vec<f64>>> {
    means
        .iter()
        .map(|m| {
            let c: Vec<f64> = m.iter().zip(global_mean).map(|(a, b)| a - b).collect();
            l2_normalize(&c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquiangularDeviation {
    /// max over pairs of |ε_{c,c'}|
    pub epsilon: f64,
    /// (c, c', ε_{c,c'}) for every c < c'
    pub pairs: Vec<(usize, usize, f64)>,
}

/// `ε_{c,c'} = μ̂_cᵀ μ̂_c' + 1/(C-1)` over centered, normalized means.
pub fn equiangular_deviation(means: &[Vec<f64>]) -> Result<EquiangularDeviation> {
    let c = means.len();
    if c < 2 {
        return Err(Error::DegenerateCategoryCount(c));
    }
    if means.iter().any(|m| norm(m) <= crate::diffmath::ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    let offset = 1.0 / (c as f64 - 1.0);
    let mut pairs = Vec::with_capacity(c * (c - 1) / 2);
    let mut epsilon: f64 = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            let e = dot(&means[i], &means[j]) + offset;
            epsilon = epsilon.max(e.abs());
            pairs.push((i, j, e));
        }
    }
    Ok(EquiangularDeviation { epsilon, pairs })
}

/// Per-category `δ_c = 1 - <μ̂_cᵗ, μ̂_cᵛ>` and their maximum `γ`.
pub fn cross_modal_discrepancy(text_means: &[Vec<f64>], video_means: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if text_means.len() != video_means.len() {
        return Err(Error::CategoryCountMismatch(text_means.len(), video_means.len()));
    }
    let deltas = text_means
        .iter()
        .zip(video_means)
        .map(|(t, v)| Ok((1.0 - dot(&l2_normalize(t)?, &l2_normalize(v)?)).clamp(0.0, 2.0)))
        .collect::<Result<Vec<f64>>>()?;
    let gamma = deltas.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok((gamma, deltas))
}

/// Mean intra-category dispersion: average pairwise `1 - cos` within each
/// category, averaged over categories.
pub fn micd(features: &FeatureSet) -> Result<f64> {
    features.require_pairs()?;
    let mut total = 0.0;
    for (_, feats) in features.groups() {
        let units = feats.iter().map(|f| l2_normalize(f)).collect::<Result<Vec<_>>>()?;
        let n = units.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += 1.0 - dot(&units[i], &units[j]);
            }
        }
        // Each unordered pair counts twice in the i != j sum.
        total += 2.0 * acc / (n * (n - 1)) as f64;
    }
    Ok((total / features.groups().len() as f64).clamp(0.0, 2.0))
}

/// P1/P2/P3 diagnostics plus MICD for one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryReport {
    pub eta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub per_category_delta: Vec<f64>,
    pub micd: f64,
}

impl GeometryReport {
    /// Diagnostics over paired text and video features sharing category
    /// labels. `eta` and `epsilon` take the worse modality, `micd` averages
    /// the two modalities, and `gamma` compares normalized category means.
    pub fn from_features(text: &FeatureSet, video: &FeatureSet) -> Result<Self> {
        if text.categories() != video.categories() {
            return Err(Error::CategoryCountMismatch(
                text.groups().len(),
                video.groups().len(),
            ));
        }
        let eta = intra_concentration(text)?.max(intra_concentration(video)?);
        let epsilon = if text.groups().len() >= 2 {
            let et = equiangular_deviation(&center_and_normalize(
                &text.category_means(),
                &text.global_mean(),
            )?)?;
            let ev = equiangular_deviation(&center_and_normalize(
                &video.category_means(),
                &video.global_mean(),
            )?)?;
            et.epsilon.max(ev.epsilon)
        } else {
            0.0
        };
        let (gamma, per_category_delta) =
            cross_modal_discrepancy(&text.category_means(), &video.category_means())?;
        let micd = 0.5 * (micd(text)? + micd(video)?);
        Ok(Self {
            eta,
            epsilon,
            gamma,
            per_category_delta,
            micd,
        })
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let deltas: Vec<String> = self.per_category_delta.iter().map(|d| format!("{d:.6}")).collect();
        format!(
            "eta = {:.9}\nepsilon = {:.9}\ngamma = {:.9}\nmicd = {:.9}\nper_category_delta = {}\n",
            self.eta,
            self.epsilon,
            self.gamma,
            self.micd,
            deltas.join(",")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation(d: usize, seed: u64) -> Tensor {
        let q = orthonormal_columns(d, d, seed);
        Tensor::matrix(d, d, q)
    }

    #[test]
    fn two_categories_are_antipodal() {
        let p = build_etf(2, 2, 0).unwrap();
        assert!((p.gram().at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_in_eight_has_minus_third() {
        let g = build_etf(4, 8, 0).unwrap().gram();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { -1.0 / 3.0 };
                assert!((g.at(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ten_in_sixteen_has_unit_columns() {
        let p = build_etf(10, 16, 3).unwrap();
        for col in p.columns() {
            assert!((norm(&col) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn build_rejects_bad_sizes() {
        assert_eq!(build_etf(1, 4, 0), Err(Error::DegenerateCategoryCount(1)));
        assert_eq!(
            build_etf(5, 4, 0),
            Err(Error::DimensionTooSmall { dim: 4, categories: 5 })
        );
    }

    #[test]
    fn build_is_bitwise_deterministic() {
        assert_eq!(build_etf(10, 16, 42).unwrap(), build_etf(10, 16, 42).unwrap());
        assert_ne!(build_etf(10, 16, 42).unwrap(), build_etf(10, 16, 43).unwrap());
    }

    #[test]
    fn verify_examples() {
        let p = build_etf(4, 8, 0).unwrap();
        assert!(verify_etf(&p, 1e-9).passed);

        let mut scaled = p.clone();
        scaled.scale_column(1, 2.0);
        let r = verify_etf(&scaled, 1e-9);
        assert!(!r.passed);
        assert!((r.max_diag_deviation - 3.0).abs() < 1e-9);

        let basis = EtfPrototypes::from_matrix(Tensor::identity(3), 0).unwrap();
        let r = verify_etf(&basis, 1e-9);
        assert!(!r.passed);
        assert!((r.max_offdiag_deviation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gram_is_rotation_invariant() {
        for seed in 0..3 {
            let p = build_etf(6, 9, seed).unwrap();
            let q = rotation(9, 100 + seed);
            let rotated = EtfPrototypes::from_matrix(q.matmul(p.matrix()), seed).unwrap();
            let (g1, g2) = (p.gram(), rotated.gram());
            for (a, b) in g1.data().iter().zip(g2.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn etf_columns_have_zero_equiangular_deviation() {
        for c in [2usize, 4, 10] {
            for d in c..=2 * c {
                let p = build_etf(c, d, 7).unwrap();
                let e = equiangular_deviation(&p.columns()).unwrap();
                assert!(e.epsilon < 1e-9, "C={c} d={d}: {}", e.epsilon);
            }
        }
    }

    #[test]
    fn equiangular_examples() {
        let anti = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(equiangular_deviation(&anti).unwrap().epsilon < 1e-15);
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let e = equiangular_deviation(&basis).unwrap();
        assert!((e.epsilon - 0.5).abs() < 1e-15);
        assert_eq!(e.pairs.len(), 3);
        let zero = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(equiangular_deviation(&zero), Err(Error::ZeroVector));
    }

    #[test]
    fn centering_helper_rejects_degenerate_mean() {
        let means = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(
            center_and_normalize(&means, &[1.0, 0.0]),
            Err(Error::ZeroVector)
        );
    }

    #[test]
    fn concentration_examples() {
        let same = FeatureSet::from_groups(vec![(0, vec![vec![0.6, 0.8]; 3])]);
        assert_eq!(intra_concentration(&same).unwrap(), 0.0);

        let spread = FeatureSet::from_groups(vec![(0, vec![vec![1.0, 0.0], vec![-1.0, 0.0]])]);
        assert!((intra_concentration(&spread).unwrap() - 1.0).abs() < 1e-8);

        let both = FeatureSet::from_groups(vec![
            (0, vec![vec![0.6, 0.8]; 2]),
            (1, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]),
        ]);
        assert!((intra_concentration(&both).unwrap() - 1.0).abs() < 1e-8);

        let lonely = FeatureSet::from_groups(vec![(5, vec![vec![1.0, 0.0]])]);
        assert_eq!(intra_concentration(&lonely), Err(Error::InsufficientSamples(5)));
    }

    #[test]
    fn discrepancy_examples() {
        let t = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let (g, d) = cross_modal_discrepancy(&t, &t).unwrap();
        assert_eq!(g, 0.0);
        assert!(d.iter().all(|&x| x == 0.0));

        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let (g, d) = cross_modal_discrepancy(&t, &v).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 2.0]);
        assert_eq!(g, 2.0);

        assert_eq!(
            cross_modal_discrepancy(&t, &v[..2]),
            Err(Error::CategoryCountMismatch(3, 2))
        );
    }

    #[test]
    fn micd_examples() {
        let same = FeatureSet::from_groups(vec![(0, vec![vec![0.0, 2.0]; 4])]);
        assert!(micd(&same).unwrap().abs() < 1e-15);
        let ortho = FeatureSet::from_groups(vec![(0, vec![vec![1.0, 0.0], vec![0.0, 1.0]])]);
        assert!((micd(&ortho).unwrap() - 1.0).abs() < 1e-15);
        let mixed = FeatureSet::from_groups(vec![
            (0, vec![vec![1.0, 1.0]; 2]),
            (1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        ]);
        assert!((micd(&mixed).unwrap() - 0.5).abs() < 1e-15);
        let lonely = FeatureSet::from_groups(vec![(0, vec![vec![1.0, 0.0]])]);
        assert_eq!(micd(&lonely), Err(Error::InsufficientSamples(0)));
    }

    #[test]
    fn micd_matches_ordered_pair_formula() {
        // Oracle: literal double sum over i != j.
        let mut r = rng::seeded(11);
        let groups: Vec<(usize, Vec<Vec<f64>>)> = (0..3)
            .map(|c| (c, (0..5).map(|_| rng::normal_vec(&mut r, 4, 1.0)).collect()))
            .collect();
        let set = FeatureSet::from_groups(groups.clone());
        let mut oracle = 0.0;
        for (_, f) in &groups {
            let n = f.len();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += 1.0 - crate::diffmath::cosine_sim(&f[i], &f[j]).unwrap();
                    }
                }
            }
            oracle += s / (n * (n - 1)) as f64;
        }
        oracle /= groups.len() as f64;
        assert!((micd(&set).unwrap() - oracle).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn group() -> impl Strategy<Value = Vec<Vec<f64>>> {
            prop::collection::vec(
                prop::collection::vec(-1.0f64..1.0, 3).prop_filter("nonzero", |v| norm(v) > 1e-3),
                2..7,
            )
        }

        proptest! {
            #[test]
            fn within_category_permutation_invariance(g in group(), rot in 0usize..7) {
                let mut perm = g.clone();
                let k = rot % perm.len();
                perm.rotate_left(k);
                perm.reverse();
                let a = FeatureSet::from_groups(vec![(0, g)]);
                let b = FeatureSet::from_groups(vec![(0, perm)]);
                prop_assert!((micd(&a).unwrap() - micd(&b).unwrap()).abs() < 1e-12);
                let (ea, eb) = (intra_concentration(&a).unwrap(), intra_concentration(&b).unwrap());
                prop_assert!((ea - eb).abs() <= 1e-7 * ea.max(1e-12));
            }

            #[test]
            fn micd_in_range(g1 in group(), g2 in group()) {
                let m = micd(&FeatureSet::from_groups(vec![(0, g1), (1, g2)])).unwrap();
                prop_assert!((0.0..=2.0).contains(&m));
            }
        }
    }
}
