//! Inter-patch consistency learning: two patch-embedding heads, the
//! pairwise inconsistency volume, target-volume construction from the
//! grid-projected mask, and the mean-BCE consistency loss.
//!
//! A volume entry near 0 means the two patches share the same forensic
//! characteristic; near 1 means they differ. Authentic images therefore
//! target an all-zero volume.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::GridMask;
use crate::model::FeatureGrid;
use crate::nn::{bce, sigmoid, Linear};

/// Hard cap on grid cells: the volume is O((H'W')^2).
pub const MAX_GRID_CELLS: usize = 4096;

/// The two patch-embedding heads. Both map C-dim features to `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeads {
    pub phi1: Linear,
    pub phi2: Linear,
    pub embed_dim: usize,
}

/// Pairwise inconsistency scores, entries strictly in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyVolume {
    /// Indexed `(i, j, h, k)` over two grid positions.
    pub values: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Original reading: patches differ iff exactly one of them is tampered.
    Xor,
    /// Modified reading: patches differ iff both are tampered.
    And,
}

/// Supervision signal for the consistency volume; symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVolume {
    pub values: Array4<f64>,
    pub mode: TargetMode,
}

/// Applies both heads position-wise to the feature rows `(G, C)`.
pub fn embed_matrix(features: &Array2<f64>, heads: &EmbeddingHeads) -> (Array2<f64>, Array2<f64>) {
    (heads.phi1.apply(features), heads.phi2.apply(features))
}

/// Position-wise embeddings of a feature grid; no spatial mixing.
pub fn embed_pair(
    features: &FeatureGrid,
    heads: &EmbeddingHeads,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if heads.phi1.weight.shape()[1] != features.channels() {
        return Err(Error::Argument(format!(
            "head input dim {} does not match feature channels {}",
            heads.phi1.weight.shape()[1],
            features.channels()
        )));
    }
    Ok(embed_matrix(&features.as_matrix(), heads))
}

/// Inconsistency matrix `(G, G)` from embedding rows:
/// `v = 1 - sigmoid(e1 . e2 / sqrt(embed_dim))`.
pub fn volume_matrix(e1: &Array2<f64>, e2: &Array2<f64>, embed_dim: usize) -> Array2<f64> {
    let scale = 1.0 / (embed_dim as f64).sqrt();
    let s = e1.dot(&e2.t());
    s.mapv(|x| 1.0 - sigmoid(x * scale))
}

/// Full 4-D consistency volume of a feature grid.
pub fn consistency_volume(
    features: &FeatureGrid,
    heads: &EmbeddingHeads,
) -> Result<ConsistencyVolume> {
    let (gh, gw) = (features.grid_h(), features.grid_w());
    if gh * gw > MAX_GRID_CELLS {
        return Err(Error::Config(format!(
            "grid {}x{} exceeds the {MAX_GRID_CELLS}-cell cap",
            gh, gw
        )));
    }
    let (e1, e2) = embed_pair(features, heads)?;
    let m = volume_matrix(&e1, &e2, heads.embed_dim);
    let mut values = Array4::zeros((gh, gw, gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            for h in 0..gh {
                for k in 0..gw {
                    values[(i, j, h, k)] = m[(i * gw + j, h * gw + k)];
                }
            }
        }
    }
    Ok(ConsistencyVolume { values })
}

/// Target matrix `(G, G)` from a flattened grid mask.
pub fn target_matrix(grid: &GridMask, mode: TargetMode) -> Array2<f64> {
    let (gh, gw) = (grid.values.shape()[0], grid.values.shape()[1]);
    let g = gh * gw;
    let flat: Vec<f64> = grid.values.iter().copied().collect();
    let mut t = Array2::zeros((g, g));
    for a in 0..g {
        for b in 0..g {
            let (ma, mb) = (flat[a], flat[b]);
            t[(a, b)] = match mode {
                TargetMode::Xor => ma * (1.0 - mb) + (1.0 - ma) * mb,
                TargetMode::And => ma * mb,
            };
        }
    }
    t
}

/// Full 4-D target volume.
pub fn target_volume(grid: &GridMask, mode: TargetMode) -> TargetVolume {
    let (gh, gw) = (grid.values.shape()[0], grid.values.shape()[1]);
    let m = target_matrix(grid, mode);
    let mut values = Array4::zeros((gh, gw, gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            for h in 0..gh {
                for k in 0..gw {
                    values[(i, j, h, k)] = m[(i * gw + j, h * gw + k)];
                }
            }
        }
    }
    TargetVolume { values, mode }
}

/// Mean BCE between target and prediction matrices.
pub fn ipc_loss_matrix(v: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let n = v.len() as f64;
    v.iter()
        .zip(t.iter())
        .map(|(&p, &tgt)| bce(tgt, p))
        .sum::<f64>()
        / n
}

/// Inter-patch consistency loss over 4-D volumes.
pub fn ipc_loss(v: &ConsistencyVolume, t: &TargetVolume) -> Result<f64> {
    if v.values.shape() != t.values.shape() {
        return Err(Error::Argument(format!(
            "volume shape {:?} does not match target shape {:?}",
            v.values.shape(),
            t.values.shape()
        )));
    }
    let n = v.values.len() as f64;
    Ok(v.values
        .iter()
        .zip(t.values.iter())
        .map(|(&p, &tgt)| bce(tgt, p))
        .sum::<f64>()
        / n)
}

/// Gradient of the mean-BCE loss with respect to the raw dot-product matrix
/// S, where v = 1 - sigmoid(S / sqrt(embed_dim)):
/// dL/dS = (T - V) / (N * sqrt(embed_dim)).
///
/// With v strictly interior, the clamped-BCE gradient and the analytic form
/// coincide up to BCE_EPS effects.
pub fn ipc_grad_scores(v: &Array2<f64>, t: &Array2<f64>, embed_dim: usize) -> Array2<f64> {
    let n = v.len() as f64;
    let scale = 1.0 / (embed_dim as f64).sqrt();
    let mut d = Array2::zeros(v.raw_dim());
    ndarray::Zip::from(&mut d)
        .and(v)
        .and(t)
        .for_each(|g, &vv, &tt| {
            *g = (tt - vv) / n * scale;
        });
    d
}

/// Sanity check used across tests: volume entries must stay interior.
pub fn volume_entries_interior(v: &Array2<f64>) -> bool {
    v.iter().all(|&x| x > 0.0 && x < 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeatureGrid;
    use crate::rng::derive_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_grid(gh: usize, gw: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = derive_rng(seed, &[1]);
        FeatureGrid {
            values: Array3::from_shape_fn((c, gh, gw), |_| rng.random_range(-1.0..1.0)),
            stride: 16,
        }
    }

    fn random_heads(c: usize, ce: usize, seed: u64) -> EmbeddingHeads {
        let mut rng = derive_rng(seed, &[2]);
        EmbeddingHeads {
            phi1: Linear::init(c, ce, &mut rng),
            phi2: Linear::init(c, ce, &mut rng),
            embed_dim: ce,
        }
    }

    /// Scalar quadruple-loop oracle for the consistency volume.
    fn volume_oracle(grid: &FeatureGrid, heads: &EmbeddingHeads) -> Array4<f64> {
        let (c, gh, gw) = (grid.channels(), grid.grid_h(), grid.grid_w());
        let ce = heads.embed_dim;
        let emb = |lin: &Linear, y: usize, x: usize| -> Vec<f64> {
            (0..ce)
                .map(|o| {
                    let mut acc = lin.bias[o];
                    for ci in 0..c {
                        acc += lin.weight[(o, ci)] * grid.values[(ci, y, x)];
                    }
                    acc
                })
                .collect()
        };
        let mut out = Array4::zeros((gh, gw, gh, gw));
        for i in 0..gh {
            for j in 0..gw {
                let e1 = emb(&heads.phi1, i, j);
                for h in 0..gh {
                    for k in 0..gw {
                        let e2 = emb(&heads.phi2, h, k);
                        let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
                        out[(i, j, h, k)] = 1.0 - sigmoid(dot / (ce as f64).sqrt());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn volume_matches_quadruple_loop_oracle() {
        for trial in 0..20u64 {
            let mut rng = derive_rng(trial, &[3]);
            let gh = rng.random_range(1..=4);
            let gw = rng.random_range(1..=4);
            let c = rng.random_range(1..=6);
            let ce = rng.random_range(1..=8);
            let grid = random_grid(gh, gw, c, trial * 7 + 1);
            let heads = random_heads(c, ce, trial * 13 + 2);
            let fast = consistency_volume(&grid, &heads).unwrap();
            let slow = volume_oracle(&grid, &heads);
            let err = (&fast.values - &slow)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err <= 1e-6, "trial {trial}: err {err}");
        }
    }

    #[test]
    fn zero_heads_give_half_everywhere() {
        let grid = random_grid(2, 2, 4, 1);
        let mut heads = random_heads(4, 4, 1);
        heads.phi1.weight.fill(0.0);
        heads.phi1.bias.fill(0.0);
        heads.phi2.weight.fill(0.0);
        heads.phi2.bias.fill(0.0);
        let v = consistency_volume(&grid, &heads).unwrap();
        assert!(v.values.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn large_dot_product_drives_entry_to_zero() {
        // shared forensic characteristic: strongly aligned embeddings -> v ~ 0
        let grid = FeatureGrid {
            values: Array3::from_elem((2, 1, 1), 1.0),
            stride: 16,
        };
        let mut heads = random_heads(2, 2, 5);
        heads.phi1.weight.fill(50.0);
        heads.phi1.bias.fill(0.0);
        heads.phi2.weight.fill(50.0);
        heads.phi2.bias.fill(0.0);
        let v = consistency_volume(&grid, &heads).unwrap();
        assert!(v.values[(0, 0, 0, 0)] < 1e-12);
    }

    #[test]
    fn volume_is_strictly_decreasing_in_dot_product() {
        let grid = random_grid(1, 2, 3, 8);
        let heads = random_heads(3, 4, 8);
        let (e1, e2) = embed_pair(&grid, &heads).unwrap();
        let dot = e1.row(0).dot(&e2.row(1));
        assert!(dot != 0.0);
        let mut vs = Vec::new();
        for lambda in [0.5, 1.0, 2.0] {
            let e1s = &e1 * lambda;
            let v = volume_matrix(&e1s, &e2, heads.embed_dim);
            vs.push(v[(0, 1)]);
        }
        if dot > 0.0 {
            assert!(vs[0] > vs[1] && vs[1] > vs[2]);
        } else {
            assert!(vs[0] < vs[1] && vs[1] < vs[2]);
        }
    }

    #[test]
    fn volume_is_not_symmetric_in_general() {
        let grid = random_grid(2, 2, 4, 9);
        let heads = random_heads(4, 4, 9);
        let v = consistency_volume(&grid, &heads).unwrap();
        assert!((v.values[(0, 0, 1, 1)] - v.values[(1, 1, 0, 0)]).abs() > 1e-9);
    }

    #[test]
    fn target_truth_tables_exhaustive() {
        // all 16 binary two-cell masks; check all four pair positions
        for bits in 0..4u8 {
            let m0 = f64::from(bits & 1);
            let m1 = f64::from((bits >> 1) & 1);
            let grid = GridMask {
                values: ndarray::arr2(&[[m0, m1]]),
            };
            let xor = target_matrix(&grid, TargetMode::Xor);
            let and = target_matrix(&grid, TargetMode::And);
            let cells = [m0, m1];
            for a in 0..2 {
                for b in 0..2 {
                    let expect_xor =
                        f64::from((cells[a] > 0.5) != (cells[b] > 0.5));
                    let expect_and = f64::from(cells[a] > 0.5 && cells[b] > 0.5);
                    assert_eq!(xor[(a, b)], expect_xor);
                    assert_eq!(and[(a, b)], expect_and);
                }
            }
        }
    }

    #[test]
    fn target_symmetry_and_edge_masks() {
        let zero = GridMask {
            values: Array2::zeros((2, 2)),
        };
        for mode in [TargetMode::Xor, TargetMode::And] {
            let t = target_volume(&zero, mode);
            assert!(t.values.iter().all(|&x| x == 0.0));
        }
        let ones = GridMask {
            values: Array2::from_elem((2, 2), 1.0),
        };
        assert!(target_volume(&ones, TargetMode::Xor)
            .values
            .iter()
            .all(|&x| x == 0.0));
        assert!(target_volume(&ones, TargetMode::And)
            .values
            .iter()
            .all(|&x| x == 1.0));

        // mixed mask, xor: at least one entry equals 1; and symmetry
        let mut mixed = Array2::zeros((2, 2));
        mixed[(0, 1)] = 1.0;
        let grid = GridMask { values: mixed };
        for mode in [TargetMode::Xor, TargetMode::And] {
            let t = target_matrix(&grid, mode);
            for a in 0..4 {
                for b in 0..4 {
                    assert_eq!(t[(a, b)], t[(b, a)]);
                }
            }
        }
        let t = target_matrix(&grid, TargetMode::Xor);
        assert!(t.iter().any(|&x| x == 1.0));
    }

    #[test]
    fn ipc_loss_closed_form_and_oracle() {
        // v = 0.5 everywhere, target 0 -> ln 2
        let v = Array2::from_elem((4, 4), 0.5);
        let t = Array2::zeros((4, 4));
        assert!((ipc_loss_matrix(&v, &t) - std::f64::consts::LN_2).abs() < 1e-9);

        // matched binary values within clamp -> tiny loss
        let v1 = Array2::from_elem((3, 3), 1.0 - 1e-6);
        let t1 = Array2::from_elem((3, 3), 1.0);
        assert!(ipc_loss_matrix(&v1, &t1) <= 2e-6);

        // random volumes vs elementwise loop oracle
        let mut rng = derive_rng(10, &[4]);
        for _ in 0..20 {
            let g = rng.random_range(1..=4);
            let v = Array2::from_shape_fn((g, g), |_| rng.random_range(0.01..0.99));
            let t = Array2::from_shape_fn((g, g), |_| rng.random_range(0.0..1.0));
            let mut acc = 0.0;
            for a in 0..g {
                for b in 0..g {
                    let p: f64 = v[(a, b)];
                    acc += -(t[(a, b)] * p.ln() + (1.0 - t[(a, b)]) * (1.0 - p).ln());
                }
            }
            let oracle = acc / (g * g) as f64;
            assert!((ipc_loss_matrix(&v, &t) - oracle).abs() <= 1e-6);
        }
    }

    #[test]
    fn embed_pair_cases() {
        // constant grid -> constant embeddings
        let grid = FeatureGrid {
            values: Array3::from_elem((3, 2, 2), 0.7),
            stride: 16,
        };
        let heads = random_heads(3, 4, 11);
        let (e1, e2) = embed_pair(&grid, &heads).unwrap();
        for r in 1..4 {
            for c in 0..4 {
                assert!((e1[(r, c)] - e1[(0, c)]).abs() < 1e-12);
                assert!((e2[(r, c)] - e2[(0, c)]).abs() < 1e-12);
            }
        }

        // identity heads reproduce the features
        let grid = random_grid(2, 2, 3, 12);
        let ident = EmbeddingHeads {
            phi1: Linear {
                weight: Array2::eye(3),
                bias: ndarray::Array1::zeros(3),
            },
            phi2: Linear {
                weight: Array2::eye(3),
                bias: ndarray::Array1::zeros(3),
            },
            embed_dim: 3,
        };
        let (e1, _) = embed_pair(&grid, &ident).unwrap();
        let f = grid.as_matrix();
        assert!((&e1 - &f).iter().all(|d| d.abs() < 1e-12));

        // dimension mismatch
        let bad = random_heads(5, 4, 13);
        assert!(embed_pair(&grid, &bad).is_err());
    }

    #[test]
    fn ipc_gradient_matches_finite_differences() {
        // d(mean BCE)/d(embedding entries) via the score-matrix chain
        let mut rng = derive_rng(14, &[6]);
        let g = 4; // 2x2 grid
        let ce = 3;
        let e1 = Array2::from_shape_fn((g, ce), |_| rng.random_range(-1.0..1.0));
        let e2 = Array2::from_shape_fn((g, ce), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((g, g), |_| f64::from(rng.random_bool(0.5)));

        let loss = |e1: &Array2<f64>, e2: &Array2<f64>| -> f64 {
            ipc_loss_matrix(&volume_matrix(e1, e2, ce), &t)
        };
        let v = volume_matrix(&e1, &e2, ce);
        // dL/d(dot products); chain through e1.e2^T gives embedding grads
        let dscore = ipc_grad_scores(&v, &t, ce);
        let de1 = dscore.dot(&e2);
        let de2 = dscore.t().dot(&e1);

        let step = 1e-6;
        let check = |which: usize, r: usize, c: usize, analytic: f64| {
            let perturbed = |delta: f64| {
                let mut e1p = e1.clone();
                let mut e2p = e2.clone();
                if which == 0 {
                    e1p[(r, c)] += delta;
                } else {
                    e2p[(r, c)] += delta;
                }
                loss(&e1p, &e2p)
            };
            let fd = (perturbed(step) - perturbed(-step)) / (2.0 * step);
            let rel = (fd - analytic).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "which {which} ({r},{c}): fd {fd} vs {analytic}");
        };
        for &(r, c) in &[(0usize, 0usize), (1, 2), (3, 1)] {
            check(0, r, c, de1[(r, c)]);
            check(1, r, c, de2[(r, c)]);
        }
    }
}
