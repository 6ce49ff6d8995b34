use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamMut, ParamRef, Parameters};
use crate::nn::{sq_dist, Matrix, Stream};

/// One level of residual codes: `K` entries of latent dimension `d_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub level: usize,
    /// `K x d_z`
    pub entries: Matrix,
    pub frozen: bool,
}

impl Codebook {
    pub fn new(level: usize, size: usize, dim: usize, rng: &mut Stream) -> Self {
        Self { level, entries: rng.normal_matrix(size, dim, 0.1), frozen: false }
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }

    /// Squared-Euclidean nearest entry; ties go to the lowest index.
    pub fn nearest(&self, r: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d = sq_dist(r, self.entry(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookSet {
    pub levels: Vec<Codebook>,
}

impl CodebookSet {
    pub fn new(levels: usize, size: usize, dim: usize, rng: &mut Stream) -> Self {
        Self { levels: (0..levels).map(|l| Codebook::new(l, size, dim, rng)).collect() }
    }

    pub fn from_entries(levels: Vec<Matrix>) -> Result<Self> {
        let dim = levels.first().map(Matrix::cols).ok_or_else(|| Error::Config("no codebooks".into()))?;
        for m in &levels {
            if m.cols() != dim || m.rows() < 2 {
                return Err(Error::Config("codebooks need K >= 2 entries of one latent dimension".into()));
            }
        }
        Ok(Self {
            levels: levels.into_iter().enumerate().map(|(level, entries)| Codebook { level, entries, frozen: false }).collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.levels.first().map_or(0, Codebook::dim)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Codebook::size).collect()
    }
}

impl Parameters for CodebookSet {
    fn params(&self) -> Vec<ParamRef<'_>> {
        self.levels.iter().map(|c| ParamRef::new(format!("level{}", c.level), &c.entries, c.frozen)).collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.levels.iter_mut().map(|c| ParamMut::new(format!("level{}", c.level), &mut c.entries, c.frozen)).collect()
    }
}

/// Result of quantising one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    pub z_hat: Vec<f64>,
    /// `residuals[d]` is the residual quantised at level `d` (`r_0 = z`).
    pub residuals: Vec<Vec<f64>>,
}

/// Greedy residual quantisation: each level encodes what the previous
/// levels left over.
pub fn residual_quantize(z: &[f64], codebooks: &CodebookSet) -> Result<Quantized> {
    if codebooks.depth() == 0 {
        return Err(Error::Config("no codebooks".into()));
    }
    if z.len() != codebooks.dim() {
        return Err(Error::Shape(format!("latent has length {}, codebooks expect {}", z.len(), codebooks.dim())));
    }
    let mut r = z.to_vec();
    let mut z_hat = vec![0.0; z.len()];
    let mut codes = Vec::with_capacity(codebooks.depth());
    let mut residuals = Vec::with_capacity(codebooks.depth());
    for cb in &codebooks.levels {
        let c = cb.nearest(&r);
        let e = cb.entry(c);
        residuals.push(r.clone());
        for ((zh, ri), ei) in z_hat.iter_mut().zip(r.iter_mut()).zip(e) {
            *zh += ei;
            *ri -= ei;
        }
        codes.push(c);
    }
    Ok(Quantized { codes, z_hat, residuals })
}

/// Lloyd's k-means with k-means++ seeding; returns `k x d` centroids.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Stream) -> Matrix {
    let d = points[0].len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.below(points.len())].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 { rng.categorical(&dist) } else { rng.below(points.len()) };
        let c = points[next].iter().map(|v| v + 1e-3 * rng.normal()).collect::<Vec<f64>>();
        for (di, p) in dist.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (best, _) = centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (i, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, &n)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Matrix::from_rows(&centroids).expect("uniform rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngSeed;

    #[test]
    fn exact_entry_gives_zero_residual() {
        let cb = CodebookSet::from_entries(vec![Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap()]).unwrap();
        let q = residual_quantize(&[-1.0, 0.5], &cb).unwrap();
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.z_hat, vec![-1.0, 0.5]);
    }

    #[test]
    fn two_level_hand_example() {
        let cb = CodebookSet::from_entries(vec![
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![-0.1, 0.1], vec![0.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        let q = residual_quantize(&[0.9, 0.1], &cb).unwrap();
        // r0 = (0.9, 0.1) -> (1,0); r1 = (-0.1, 0.1) -> entry 0
        assert_eq!(q.codes, vec![0, 0]);
        assert!((q.z_hat[0] - 0.9).abs() < 1e-12 && (q.z_hat[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let cb = CodebookSet::from_entries(vec![Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]).unwrap()]).unwrap();
        assert_eq!(residual_quantize(&[0.0], &cb).unwrap().codes, vec![0]);
        assert_eq!(residual_quantize(&[1.0], &cb).unwrap().codes, vec![0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = RngSeed::new(1, "q").stream();
        let cb = CodebookSet::new(2, 4, 3, &mut rng);
        assert!(matches!(residual_quantize(&[0.0; 2], &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn telescoping_identity() {
        let mut rng = RngSeed::new(2, "q").stream();
        let cb = CodebookSet::new(4, 8, 5, &mut rng);
        for _ in 0..50 {
            let z = rng.normal_vec(5, 0.3);
            let q = residual_quantize(&z, &cb).unwrap();
            for d in 0..3 {
                let e = cb.levels[d].entry(q.codes[d]);
                for j in 0..5 {
                    assert!((q.residuals[d + 1][j] - (q.residuals[d][j] - e[j])).abs() < 1e-12);
                }
            }
            let last = cb.levels[3].entry(q.codes[3]);
            for j in 0..5 {
                let rebuilt = q.z_hat[j] + q.residuals[3][j] - last[j];
                assert!((rebuilt - z[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut rng = RngSeed::new(3, "km").stream();
        let mut pts = Vec::new();
        for c in [-5.0, 5.0] {
            for _ in 0..50 {
                pts.push(vec![c + 0.1 * rng.normal(), 0.1 * rng.normal()]);
            }
        }
        let m = kmeans(&pts, 2, 10, &mut rng);
        let mut xs = vec![m.get(0, 0), m.get(1, 0)];
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 5.0).abs() < 0.2 && (xs[1] - 5.0).abs() < 0.2);
    }

    proptest::proptest! {
        #[test]
        fn residuals_telescope(seed in 0u64..1000, levels in 1usize..5, k in 1usize..9, dim in 1usize..6) {
            let mut rng = RngSeed::new(seed, "telescope").stream();
            let cb = CodebookSet::new(levels, k, dim, &mut rng);
            let z = rng.normal_vec(dim, 2.0);
            let q = residual_quantize(&z, &cb).unwrap();
            for d in 0..levels {
                let next = if d + 1 < levels { q.residuals[d + 1].clone() } else { z.iter().zip(&q.z_hat).map(|(a, b)| a - b).collect() };
                for i in 0..dim {
                    proptest::prop_assert!((q.residuals[d][i] - cb.levels[d].entry(q.codes[d])[i] - next[i]).abs() < 1e-12);
                }
            }
        }
    }
}
