//! Synthetic ground truth and per-client datasets.

use crate::error::{CoreError, Result};
use crate::linalg::{full_svd, orthonormal_columns, SvdResult};
use crate::rng::{gaussian_vector, purpose, seeded_gaussian, RngStream};
use crate::{Matrix, Vector};
use rayon::prelude::*;
use std::io::{BufRead, BufWriter, Write};

/// Stacked local models `Phi` (column `i` is client `i`'s ground-truth
/// model) together with its SVD.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub phi: Matrix,
    pub svd: SvdResult,
}

impl GroundTruth {
    pub fn from_phi(phi: Matrix) -> Result<Self> {
        let svd = full_svd(&phi)?;
        Ok(Self { phi, svd })
    }

    pub fn d(&self) -> usize {
        self.phi.nrows()
    }

    pub fn clients(&self) -> usize {
        self.phi.ncols()
    }

    /// `min(d, M)`, the number of singular values.
    pub fn d_under(&self) -> usize {
        self.d().min(self.clients())
    }

    /// Spectral gap `2 (lambda_k - lambda_{k+1})`, with `lambda_{k+1} = 0`
    /// past the rank budget.
    pub fn delta_k(&self, k: usize) -> f64 {
        let s = &self.svd.singular_values;
        assert!(k >= 1 && k <= self.d_under(), "k out of range");
        let next = if k < self.d_under() { s[k] } else { 0.0 };
        2.0 * (s[k - 1] - next)
    }

    /// Total spectral energy `sum_i lambda_i^2`.
    pub fn energy(&self) -> f64 {
        self.svd.singular_values.iter().map(|s| s * s).sum()
    }
}

/// One client's regression data.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub index: usize,
    /// `N x d` design matrix; rows are samples.
    pub x: Matrix,
    /// Responses, length `N`.
    pub y: Vector,
    pub sigma2: f64,
}

impl ClientShard {
    pub fn samples(&self) -> usize {
        self.x.nrows()
    }

    /// Realized noise `E_i = y - X phi_i`.
    pub fn noise(&self, gt: &GroundTruth) -> Vector {
        &self.y - &self.x * gt.phi.column(self.index)
    }
}

/// One client's classification data with its class ownership indicator.
#[derive(Debug, Clone)]
pub struct ClassShard {
    pub index: usize,
    /// `n x dim` feature matrix.
    pub features: Matrix,
    /// Labels in `[0, m)`.
    pub labels: Vec<usize>,
    /// The owned class set, sorted ascending.
    pub class_set: Vec<usize>,
    /// 0/1 indicator of the class set, length `m`.
    pub indicator: Vector,
}

/// Prescribed singular-value sequence `lambda_i = 2 d_under / (i + 1)`
/// for `i = 1..=d_under`.
pub fn prescribed_singular_values(d_under: usize) -> Vector {
    Vector::from_iterator(
        d_under,
        (1..=d_under).map(|i| 2.0 * d_under as f64 / (i as f64 + 1.0)),
    )
}

/// Build `Phi = U Lambda V^T` with seeded orthonormal factors and the
/// prescribed spectrum.
pub fn make_ground_truth(d: usize, clients: usize, seed: u64) -> Result<GroundTruth> {
    assert!(d >= 1 && clients >= 1);
    let d_under = d.min(clients);
    let lambda = prescribed_singular_values(d_under);
    let u = orthonormal_columns(&seeded_gaussian(
        d,
        d_under,
        1.0,
        RngStream::new(seed, purpose::GT_LEFT),
    ));
    // V has d_under orthonormal rows: orthonormalize an M x d_under draw
    // and transpose.
    let v = orthonormal_columns(&seeded_gaussian(
        clients,
        d_under,
        1.0,
        RngStream::new(seed, purpose::GT_RIGHT),
    ));
    let phi = &u * Matrix::from_diagonal(&lambda) * v.transpose();
    GroundTruth::from_phi(phi)
}

/// Generate `M` client shards: `X` rows IID standard Gaussian, responses
/// `y = X phi_i + xi` with `xi ~ Normal(0, sigma2)`, one stream per client.
pub fn make_client_shards(
    gt: &GroundTruth,
    samples: usize,
    sigma2: f64,
    seed: u64,
) -> Vec<ClientShard> {
    assert!(samples >= 1);
    assert!(sigma2 >= 0.0);
    let d = gt.d();
    let noise_std = sigma2.sqrt();
    (0..gt.clients())
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::client(seed, i).rng();
            let mut x = Matrix::zeros(samples, d);
            for r in 0..samples {
                let row = gaussian_vector(&mut rng, d, 1.0);
                x.row_mut(r).copy_from(&row.transpose());
            }
            let xi = gaussian_vector(&mut rng, samples, noise_std);
            let y = &x * gt.phi.column(i) + xi;
            ClientShard {
                index: i,
                x,
                y,
                sigma2,
            }
        })
        .collect()
}

/// Class-partitioned Gaussian-blob corpus: `m` class means on a sphere of
/// radius `separation`, each client owning `m_prime` classes chosen by a
/// seeded round-robin over a shuffled class order, so every class lands on
/// at least one client whenever `m_prime * M >= m`.
pub fn make_classification_tasks(
    m: usize,
    m_prime: usize,
    clients: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<ClassShard>> {
    if m_prime < 1 || m_prime > m {
        return Err(CoreError::InvalidParameter {
            name: "m_prime",
            reason: format!("must satisfy 1 <= m_prime <= m, got {m_prime} with m = {m}"),
        });
    }
    if m_prime * clients < m {
        return Err(CoreError::InfeasiblePartition {
            classes: m,
            per_client: m_prime,
            clients,
        });
    }
    assert!(dim >= 1 && n_per_class >= 1);
    assert!(separation >= 0.0);

    // Class means: Gaussian directions normalized to the separation sphere.
    let mut means_rng = RngStream::new(seed, purpose::CLASS_MEANS).rng();
    let means: Vec<Vector> = (0..m)
        .map(|_| {
            let g = gaussian_vector(&mut means_rng, dim, 1.0);
            let norm = g.norm();
            if norm > 0.0 {
                g * (separation / norm)
            } else {
                g
            }
        })
        .collect();

    // Seeded shuffle of the class order, then consecutive blocks of
    // m_prime wrap around it.
    let mut order: Vec<usize> = (0..m).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = RngStream::new(seed, purpose::CLASS_PARTITION).rng();
        order.shuffle(&mut rng);
    }

    let shards: Vec<ClassShard> = (0..clients)
        .into_par_iter()
        .map(|i| {
            let mut class_set: Vec<usize> =
                (0..m_prime).map(|j| order[(i * m_prime + j) % m]).collect();
            class_set.sort_unstable();
            let mut indicator = Vector::zeros(m);
            for &c in &class_set {
                indicator[c] = 1.0;
            }
            let mut rng = RngStream::client(seed, i).rng();
            let n = class_set.len() * n_per_class;
            let mut features = Matrix::zeros(n, dim);
            let mut labels = Vec::with_capacity(n);
            for (ci, &c) in class_set.iter().enumerate() {
                for s in 0..n_per_class {
                    let sample = &means[c] + gaussian_vector(&mut rng, dim, 1.0);
                    features
                        .row_mut(ci * n_per_class + s)
                        .copy_from(&sample.transpose());
                    labels.push(c);
                }
            }
            ClassShard {
                index: i,
                features,
                labels,
                class_set,
                indicator,
            }
        })
        .collect();
    Ok(shards)
}

/// Write shards as a flat CSV table with header
/// `client,row,x1,...,xd,y` and 17-significant-digit values.
pub fn dump_shards_csv<W: Write>(shards: &[ClientShard], out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    let d = shards.first().map_or(0, |s| s.x.ncols());
    write!(w, "client,row")?;
    for j in 1..=d {
        write!(w, ",x{j}")?;
    }
    writeln!(w, ",y")?;
    for shard in shards {
        for r in 0..shard.samples() {
            write!(w, "{},{}", shard.index, r)?;
            for j in 0..d {
                write!(w, ",{:.16e}", shard.x[(r, j)])?;
            }
            writeln!(w, ",{:.16e}", shard.y[r])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the table written by [`dump_shards_csv`]. The noise variance is not
/// stored in the table and must be supplied.
pub fn load_shards_csv<R: BufRead>(input: R, sigma2: f64) -> Result<Vec<ClientShard>> {
    let mut rows: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    let mut dim = 0usize;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            let cols = line.split(',').count();
            if cols < 4 {
                return Err(CoreError::MalformedShardTable {
                    line: 1,
                    reason: "expected header client,row,x1,...,y".into(),
                });
            }
            dim = cols - 3;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(CoreError::MalformedShardTable {
                line: lineno + 1,
                reason: format!("expected {} fields, got {}", dim + 3, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| CoreError::MalformedShardTable {
                line: lineno + 1,
                reason: e.to_string(),
            })
        };
        let client: usize = fields[0]
            .parse()
            .map_err(|_| CoreError::MalformedShardTable {
                line: lineno + 1,
                reason: "bad client id".into(),
            })?;
        let xs: Vec<f64> = fields[2..2 + dim]
            .iter()
            .map(|s| parse(s))
            .collect::<Result<_>>()?;
        let y = parse(fields[dim + 2])?;
        rows.push((client, xs, y));
    }
    let clients = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut shards = Vec::with_capacity(clients);
    for i in 0..clients {
        let mine: Vec<&(usize, Vec<f64>, f64)> = rows.iter().filter(|r| r.0 == i).collect();
        let n = mine.len();
        let mut x = Matrix::zeros(n, dim);
        let mut y = Vector::zeros(n);
        for (r, row) in mine.iter().enumerate() {
            for j in 0..dim {
                x[(r, j)] = row.1[j];
            }
            y[r] = row.2;
        }
        shards.push(ClientShard {
            index: i,
            x,
            y,
            sigma2,
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn prescribed_spectrum_small_cases() {
        let gt = make_ground_truth(10, 15, 1).unwrap();
        assert_eq!(gt.d_under(), 10);
        assert_abs_diff_eq!(gt.svd.singular_values[0], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(gt.svd.singular_values[1], 20.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(gt.svd.singular_values[2], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn scalar_ground_truth() {
        let gt = make_ground_truth(1, 1, 3).unwrap();
        assert_eq!(gt.phi.shape(), (1, 1));
        assert_abs_diff_eq!(gt.phi[(0, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn svd_round_trip_matches_prescription() {
        for (d, m, seed) in [(5, 8, 2u64), (12, 7, 9), (6, 6, 4)] {
            let gt = make_ground_truth(d, m, seed).unwrap();
            let expected = prescribed_singular_values(d.min(m));
            for i in 0..d.min(m) {
                assert_abs_diff_eq!(gt.svd.singular_values[i], expected[i], epsilon = 1e-9);
            }
            let err = (&gt.phi - gt.svd.reconstruct()).norm();
            assert!(err <= 1e-9 * gt.phi.norm());
        }
    }

    #[test]
    fn ground_truth_deterministic_per_seed() {
        let a = make_ground_truth(6, 9, 11).unwrap();
        let b = make_ground_truth(6, 9, 11).unwrap();
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn delta_matches_svd_gap() {
        let gt = make_ground_truth(10, 15, 1).unwrap();
        let s = &gt.svd.singular_values;
        for k in 1..10 {
            assert_eq!(gt.delta_k(k), 2.0 * (s[k - 1] - s[k]));
        }
        assert_eq!(gt.delta_k(10), 2.0 * s[9]);
    }

    #[test]
    fn noiseless_shards_are_exact() {
        let gt = make_ground_truth(4, 3, 5).unwrap();
        let shards = make_client_shards(&gt, 6, 0.0, 5);
        for shard in &shards {
            assert!(shard.noise(&gt).norm() <= 1e-12);
        }
    }

    #[test]
    fn noise_variance_concentrates() {
        let gt = make_ground_truth(3, 2, 7).unwrap();
        let shards = make_client_shards(&gt, 5000, 0.25, 7);
        for shard in &shards {
            let e = shard.noise(&gt);
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            assert!((var - 0.25).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn shard_streams_are_client_independent() {
        // Generating the full set or a single client's shard yields the
        // same bytes for that client.
        let gt = make_ground_truth(4, 5, 13).unwrap();
        let all = make_client_shards(&gt, 8, 0.3, 13);
        let again = make_client_shards(&gt, 8, 0.3, 13);
        for (a, b) in all.iter().zip(&again) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
    }

    #[test]
    fn single_client_owns_all_classes() {
        let shards = make_classification_tasks(2, 2, 1, 3, 4, 1.0, 1).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].labels.len(), 6);
        assert_eq!(shards[0].indicator, Vector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn partition_covers_all_classes() {
        let shards = make_classification_tasks(6, 2, 12, 2, 3, 4.0, 5).unwrap();
        let mut covered = vec![false; 6];
        for s in &shards {
            assert_eq!(s.class_set.len(), 2);
            assert_eq!(s.indicator.iter().sum::<f64>(), 2.0);
            for &c in &s.class_set {
                covered[c] = true;
            }
            for &l in &s.labels {
                assert!(s.class_set.contains(&l));
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn infeasible_partition_rejected() {
        assert!(make_classification_tasks(10, 2, 3, 1, 2, 1.0, 0).is_err());
    }

    #[test]
    fn zero_separation_collapses_means() {
        let shards = make_classification_tasks(3, 3, 1, 50, 2, 0.0, 2).unwrap();
        // All class means coincide at the origin, so per-class feature means
        // are statistically indistinguishable.
        let f = &shards[0].features;
        let mean = f.row_mean();
        assert!(mean.norm() < 0.3);
    }

    #[test]
    fn shard_csv_round_trip() {
        let gt = make_ground_truth(3, 2, 5).unwrap();
        let shards = make_client_shards(&gt, 4, 0.1, 5);
        let mut buf = Vec::new();
        dump_shards_csv(&shards, &mut buf).unwrap();
        let loaded = load_shards_csv(std::io::Cursor::new(&buf), 0.1).unwrap();
        assert_eq!(loaded.len(), shards.len());
        for (a, b) in shards.iter().zip(&loaded) {
            assert!((&a.x - &b.x).norm() < 1e-12);
            assert!((&a.y - &b.y).norm() < 1e-12);
        }
    }
}
