//! Small dense tensors over 2D Cartesian indices and the Voigt packings
//! used for reporting.
//!
//! Index convention: all indices run over {0, 1} (the paper-style 1/2 axes
//! shifted down by one). Rank-4 tensors couple displacement-gradient pairs,
//! rank-6 tensors couple second-gradient triplets (component, first
//! derivative, second derivative).

use crate::error::{Error, Result};

/// 2x2 matrix, used for second-moment tensors.
pub type Mat2 = [[f64; 2]; 2];

/// Rank-4 tensor in 2D (16 components).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tensor4(pub [[[[f64; 2]; 2]; 2]; 2]);

/// Rank-5 tensor in 2D (32 components); the coupling diagnostic between
/// first- and second-gradient localization.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tensor5(pub [[[[[f64; 2]; 2]; 2]; 2]; 2]);

/// Rank-6 tensor in 2D (64 components); the strain-gradient stiffness.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tensor6(pub [[[[[[f64; 2]; 2]; 2]; 2]; 2]; 2]);

/// Voigt pair order for 2D strain: 11, 22, 12.
pub const VOIGT_PAIRS: [(usize, usize); 3] = [(0, 0), (1, 1), (0, 1)];

/// Voigt triplet order for 2D strain gradients: 111, 221, 122, 222, 112, 121.
pub const VOIGT_TRIPLETS: [(usize, usize, usize); 6] = [
    (0, 0, 0),
    (1, 1, 0),
    (0, 1, 1),
    (1, 1, 1),
    (0, 0, 1),
    (0, 1, 0),
];

impl Tensor4 {
    pub fn zero() -> Self {
        Self::default()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[i][j][k][l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[i][j][k][l] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        s += self.0[i][j][k][l] * self.0[i][j][k][l];
                    }
                }
            }
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        m = m.max(self.0[i][j][k][l].abs());
                    }
                }
            }
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        out.0[i][j][k][l] *= s;
                    }
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        m = m.max((self.0[i][j][k][l] - other.0[i][j][k][l]).abs());
                    }
                }
            }
        }
        m
    }

    /// Enforces the minor symmetries (ij) and (kl) and the major symmetry
    /// (ij)<->(kl) by averaging over the orbit of each index tuple.
    /// Returns the symmetrized tensor and the largest absolute deviation
    /// between any two members of an orbit.
    pub fn symmetrized(&self) -> (Self, f64) {
        let mut out = Self::zero();
        let mut max_dev: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let orbit = [
                            self.0[i][j][k][l],
                            self.0[j][i][k][l],
                            self.0[i][j][l][k],
                            self.0[j][i][l][k],
                            self.0[k][l][i][j],
                            self.0[l][k][i][j],
                            self.0[k][l][j][i],
                            self.0[l][k][j][i],
                        ];
                        let mean = orbit.iter().sum::<f64>() / orbit.len() as f64;
                        for v in orbit {
                            max_dev = max_dev.max((v - mean).abs());
                        }
                        out.0[i][j][k][l] = mean;
                    }
                }
            }
        }
        (out, max_dev)
    }

    /// Packs into the 3x3 Voigt matrix (pairs 11, 22, 12). Errors if the
    /// minor/major symmetries are violated beyond `tol` relative to the
    /// largest component.
    pub fn voigt(&self, tol: f64) -> Result<[[f64; 3]; 3]> {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: (f64, String, String) = (0.0, String::new(), String::new());
        let mut check = |a: f64, b: f64, la: String, lb: String| {
            let dev = (a - b).abs();
            if dev > worst.0 {
                worst = (dev, la, lb);
            }
        };
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        check(
                            self.0[i][j][k][l],
                            self.0[j][i][k][l],
                            format!("C_{}{}{}{}", i + 1, j + 1, k + 1, l + 1),
                            format!("C_{}{}{}{}", j + 1, i + 1, k + 1, l + 1),
                        );
                        check(
                            self.0[i][j][k][l],
                            self.0[i][j][l][k],
                            format!("C_{}{}{}{}", i + 1, j + 1, k + 1, l + 1),
                            format!("C_{}{}{}{}", i + 1, j + 1, l + 1, k + 1),
                        );
                        check(
                            self.0[i][j][k][l],
                            self.0[k][l][i][j],
                            format!("C_{}{}{}{}", i + 1, j + 1, k + 1, l + 1),
                            format!("C_{}{}{}{}", k + 1, l + 1, i + 1, j + 1),
                        );
                    }
                }
            }
        }
        if worst.0 > tol * scale {
            return Err(Error::Packing {
                lhs: worst.1,
                rhs: worst.2,
                deviation: worst.0,
                tolerance: tol * scale,
            });
        }
        let mut m = [[0.0; 3]; 3];
        for (row, &(a, b)) in VOIGT_PAIRS.iter().enumerate() {
            for (col, &(c, d)) in VOIGT_PAIRS.iter().enumerate() {
                m[row][col] = self.0[a][b][c][d];
            }
        }
        Ok(m)
    }

    /// Expands a 3x3 Voigt matrix back into a rank-4 tensor with full
    /// minor symmetries.
    pub fn from_voigt(m: &[[f64; 3]; 3]) -> Self {
        let mut t = Self::zero();
        let slot = |i: usize, j: usize| -> usize {
            match (i, j) {
                (0, 0) => 0,
                (1, 1) => 1,
                _ => 2,
            }
        };
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        t.0[i][j][k][l] = m[slot(i, j)][slot(k, l)];
                    }
                }
            }
        }
        t
    }
}

impl Tensor5 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            s += self.0[a][b][c][d][e] * self.0[a][b][c][d][e];
                        }
                    }
                }
            }
        }
        s.sqrt()
    }
}

impl Tensor6 {
    pub fn zero() -> Self {
        Self::default()
    }

    #[inline]
    pub fn get(&self, t: (usize, usize, usize), s: (usize, usize, usize)) -> f64 {
        self.0[t.0][t.1][t.2][s.0][s.1][s.2]
    }

    #[inline]
    pub fn set(&mut self, t: (usize, usize, usize), s: (usize, usize, usize), v: f64) {
        self.0[t.0][t.1][t.2][s.0][s.1][s.2] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, _, v| s += v * v);
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.for_each(|_, _, v| m = m.max(v.abs()));
        m
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            for f in 0..2 {
                                m = m.max(
                                    (self.0[a][b][c][d][e][f] - other.0[a][b][c][d][e][f]).abs(),
                                );
                            }
                        }
                    }
                }
            }
        }
        m
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        out.for_each_mut(|v| *v *= s);
        out
    }

    fn for_each(&self, mut f: impl FnMut((usize, usize, usize), (usize, usize, usize), f64)) {
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            for g in 0..2 {
                                f((a, b, c), (d, e, g), self.0[a][b][c][d][e][g]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            for g in 0..2 {
                                f(&mut self.0[a][b][c][d][e][g]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Packs into the 6x6 Voigt matrix (triplets 111, 221, 122, 222, 112,
    /// 121). The packing relies on symmetry under swapping the first two
    /// indices within each triplet (which identifies 211 with 121 and 212
    /// with 122) plus the major triplet swap; violations beyond `tol`
    /// relative to the largest component are an error reporting the worst
    /// offending pair.
    pub fn voigt(&self, tol: f64) -> Result<[[f64; 6]; 6]> {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let name = |t: (usize, usize, usize), s: (usize, usize, usize)| {
            format!(
                "D_{}{}{}{}{}{}",
                t.0 + 1,
                t.1 + 1,
                t.2 + 1,
                s.0 + 1,
                s.1 + 1,
                s.2 + 1
            )
        };
        let swap = |t: (usize, usize, usize)| (t.1, t.0, t.2);
        let mut worst: (f64, String, String) = (0.0, String::new(), String::new());
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            for f in 0..2 {
                                let t = (a, b, c);
                                let s = (d, e, f);
                                let base = self.get(t, s);
                                for (ot, os) in
                                    [(swap(t), s), (t, swap(s)), (s, t)]
                                {
                                    let dev = (base - self.get(ot, os)).abs();
                                    if dev > worst.0 {
                                        worst = (dev, name(t, s), name(ot, os));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if worst.0 > tol * scale {
            return Err(Error::Packing {
                lhs: worst.1,
                rhs: worst.2,
                deviation: worst.0,
                tolerance: tol * scale,
            });
        }
        let mut m = [[0.0; 6]; 6];
        for (row, &t) in VOIGT_TRIPLETS.iter().enumerate() {
            for (col, &s) in VOIGT_TRIPLETS.iter().enumerate() {
                // Average over the four first-pair-swap variants; they agree
                // within tol by the check above.
                let vals = [
                    self.get(t, s),
                    self.get(swap(t), s),
                    self.get(t, swap(s)),
                    self.get(swap(t), swap(s)),
                ];
                m[row][col] = vals.iter().sum::<f64>() / 4.0;
            }
        }
        Ok(m)
    }

    /// Expands a 6x6 Voigt matrix back into the full rank-6 tensor with
    /// first-pair symmetry in each triplet.
    pub fn from_voigt(m: &[[f64; 6]; 6]) -> Self {
        let slot = |t: (usize, usize, usize)| -> usize {
            let canon = if t.0 <= t.1 { t } else { (t.1, t.0, t.2) };
            VOIGT_TRIPLETS
                .iter()
                .position(|&v| v == canon)
                .expect("canonical triplet present")
        };
        let mut out = Self::zero();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        for e in 0..2 {
                            for f in 0..2 {
                                out.0[a][b][c][d][e][f] =
                                    m[slot((a, b, c))][slot((d, e, f))];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Frobenius norm of a 3x3 Voigt matrix.
pub fn voigt3_norm(m: &[[f64; 3]; 3]) -> f64 {
    m.iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Frobenius norm of a 6x6 Voigt matrix.
pub fn voigt6_norm(m: &[[f64; 6]; 6]) -> f64 {
    m.iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
