//! The two asymptotic cell problems on the RVE: the first-order fluctuation
//! fields (one per macroscopic gradient direction pair) and, once the
//! classical effective tensor is known, the second-order fluctuation fields.

use crate::error::{Error, Result};
use crate::fem::{
    assemble_with_stiffness, condense_periodic_zero_mean, element_stiffness_field, qp_geometry,
    solve_periodic, CondensedSystem, QuadratureRule, SolveStats, SolverSettings,
};
use crate::material::MicroMaterial;
use crate::mesh::PeriodicMesh;
use crate::tensors::Tensor4;

/// Flat index of the pair (a,b), a,b in {0,1}.
pub fn pair_index(a: usize, b: usize) -> usize {
    2 * a + b
}

/// Flat index of the triplet (a,b,c).
pub fn triplet_index(a: usize, b: usize, c: usize) -> usize {
    4 * a + 2 * b + c
}

/// All (a,b) pairs in solve order 11, 12, 21, 22.
pub const PAIRS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// All (a,b,c) triplets in solve order 111..222.
pub const TRIPLETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// The y-periodic, zero-mean fluctuation fields on mesh nodes
/// (component-interleaved, length 2 * node count each).
pub struct CellSolution {
    pub phi: [Vec<f64>; 4],
    pub psi: [Vec<f64>; 8],
    pub phi_stats: [SolveStats; 4],
    pub psi_stats: [SolveStats; 8],
}

impl CellSolution {
    pub fn phi_field(&self, a: usize, b: usize) -> &[f64] {
        &self.phi[pair_index(a, b)]
    }

    pub fn psi_field(&self, a: usize, b: usize, c: usize) -> &[f64] {
        &self.psi[triplet_index(a, b, c)]
    }
}

/// Shared state for the cell solves: the condensed periodic operator and the
/// per-element stiffness tensors.
pub struct CellProblem<'m> {
    pub mesh: &'m PeriodicMesh,
    pub elem_c: Vec<Tensor4>,
    pub system: CondensedSystem,
    pub quad: QuadratureRule,
}

impl<'m> CellProblem<'m> {
    pub fn new(mesh: &'m PeriodicMesh, material: &MicroMaterial) -> Result<Self> {
        let quad = QuadratureRule::gauss(2);
        let elem_c = element_stiffness_field(mesh, material)?;
        let assembled = assemble_with_stiffness(mesh, &elem_c, &quad)?;
        let system = condense_periodic_zero_mean(&assembled)?;
        Ok(Self {
            mesh,
            elem_c,
            system,
            quad,
        })
    }

    fn element_coords(&self, e: usize) -> [[f64; 2]; 4] {
        let q = self.mesh.elements[e];
        [
            self.mesh.nodes[q[0]],
            self.mesh.nodes[q[1]],
            self.mesh.nodes[q[2]],
            self.mesh.nodes[q[3]],
        ]
    }

    /// Right-hand side of the first-order problem for gradient pair (a,b):
    /// f_(i,alpha) = -int C_{alpha g a b} dN_i/dy_g dV.
    fn phi_rhs(&self, a: usize, b: usize) -> Result<Vec<f64>> {
        let mut rhs = vec![0.0; 2 * self.mesh.node_count()];
        for (e, q) in self.mesh.elements.iter().enumerate() {
            let coords = self.element_coords(e);
            let c = &self.elem_c[e];
            for &(xi, w) in &self.quad.points {
                let qp = qp_geometry(&coords, xi, w)?;
                for (k, &node) in q.iter().enumerate() {
                    for alpha in 0..2 {
                        let mut v = 0.0;
                        for g in 0..2 {
                            v += c.0[alpha][g][a][b] * qp.grads[k][g];
                        }
                        rhs[2 * node + alpha] -= qp.jxw * v;
                    }
                }
            }
        }
        Ok(rhs)
    }

    /// Solves the four first-order problems.
    pub fn solve_phi(&self, settings: &SolverSettings) -> Result<([Vec<f64>; 4], [SolveStats; 4])> {
        let mut fields: [Vec<f64>; 4] = Default::default();
        let mut stats = [SolveStats::default(); 4];
        for &(a, b) in &PAIRS {
            let rhs = self.phi_rhs(a, b)?;
            let label = format!("phi_{}{}", a + 1, b + 1);
            let (u, st) = solve_periodic(&self.system, &rhs, settings, &label)?;
            fields[pair_index(a, b)] = u;
            stats[pair_index(a, b)] = st;
        }
        Ok((fields, stats))
    }

    /// Gradient of a nodal field at a quadrature point:
    /// grad[k][l] = d(field_k)/dy_l.
    fn field_gradient(
        &self,
        field: &[f64],
        q: &[usize; 4],
        grads: &[[f64; 2]; 4],
    ) -> [[f64; 2]; 2] {
        let mut g = [[0.0; 2]; 2];
        for (k, &node) in q.iter().enumerate() {
            for comp in 0..2 {
                for l in 0..2 {
                    g[comp][l] += field[2 * node + comp] * grads[k][l];
                }
            }
        }
        g
    }

    /// Volume averages <C_ickl L_abkl> (localized stress) and
    /// <L_cd C L_ab> (the classical tensor integrand) in one sweep.
    /// Returns (c_bar_raw, stress_mean) where stress_mean[i][c][a][b] is the
    /// average of C_ickl L_abkl.
    fn integrate_classical(&self, phi: &[Vec<f64>; 4]) -> Result<(Tensor4, Tensor4)> {
        let mut c_bar = Tensor4::zero();
        let mut stress_mean = Tensor4::zero();
        let mut volume = 0.0;
        for (e, q) in self.mesh.elements.iter().enumerate() {
            let coords = self.element_coords(e);
            let c = &self.elem_c[e];
            for &(xi, w) in &self.quad.points {
                let qp = qp_geometry(&coords, xi, w)?;
                volume += qp.jxw;
                // L_abij = delta_ia delta_jb + d(phi_ab_i)/dy_j
                let mut l = [[[[0.0; 2]; 2]; 2]; 2];
                for &(a, b) in &PAIRS {
                    let g = self.field_gradient(&phi[pair_index(a, b)], q, &qp.grads);
                    for i in 0..2 {
                        for j in 0..2 {
                            l[a][b][i][j] =
                                g[i][j] + if i == a && j == b { 1.0 } else { 0.0 };
                        }
                    }
                }
                for &(a, b) in &PAIRS {
                    // sigma[i][c'] = C_ic'kl L_abkl
                    let mut sigma = [[0.0; 2]; 2];
                    for i in 0..2 {
                        for cc in 0..2 {
                            let mut v = 0.0;
                            for k in 0..2 {
                                for lam in 0..2 {
                                    v += c.0[i][cc][k][lam] * l[a][b][k][lam];
                                }
                            }
                            sigma[i][cc] = v;
                        }
                    }
                    for i in 0..2 {
                        for cc in 0..2 {
                            stress_mean.0[i][cc][a][b] += qp.jxw * sigma[i][cc];
                        }
                    }
                    for &(cd_a, cd_b) in &PAIRS {
                        let mut v = 0.0;
                        for i in 0..2 {
                            for j in 0..2 {
                                v += l[cd_a][cd_b][i][j] * sigma[i][j];
                            }
                        }
                        c_bar.0[a][b][cd_a][cd_b] += qp.jxw * v;
                    }
                }
            }
        }
        Ok((c_bar.scaled(1.0 / volume), stress_mean.scaled(1.0 / volume)))
    }

    /// Classical effective tensor from the first-order fields, with the
    /// symmetrization bookkeeping and the consistency diagnostic
    /// max |<C L> - C_M| / |C_M|.
    pub fn compute_cm(&self, phi: &[Vec<f64>; 4]) -> Result<(Tensor4, CmDiagnostics)> {
        let (c_raw, stress_mean) = self.integrate_classical(phi)?;
        let (c_m, sym_dev) = c_raw.symmetrized();
        let scale = c_m.max_abs().max(f64::MIN_POSITIVE);
        let consistency_rel = stress_mean.max_abs_diff(&c_m) / scale;
        Ok((
            c_m,
            CmDiagnostics {
                symmetry_deviation_rel: sym_dev / scale,
                consistency_rel,
            },
        ))
    }

    /// Right-hand side of the second-order problem for triplet (a,b,c).
    /// Also returns the volume mean of the source term (the solvability
    /// check: it must vanish when `c_m` matches the fields).
    fn psi_rhs(
        &self,
        phi_ab: &[f64],
        a: usize,
        b: usize,
        cidx: usize,
        c_m: &Tensor4,
    ) -> Result<(Vec<f64>, [f64; 2], f64)> {
        let mut rhs = vec![0.0; 2 * self.mesh.node_count()];
        let mut source_mean = [0.0; 2];
        let mut volume = 0.0;
        for (e, q) in self.mesh.elements.iter().enumerate() {
            let coords = self.element_coords(e);
            let c = &self.elem_c[e];
            for &(xi, w) in &self.quad.points {
                let qp = qp_geometry(&coords, xi, w)?;
                volume += qp.jxw;
                // phi value and gradient at the point
                let mut phi_val = [0.0; 2];
                for (k, &node) in q.iter().enumerate() {
                    for comp in 0..2 {
                        phi_val[comp] += phi_ab[2 * node + comp] * qp.values[k];
                    }
                }
                let g = self.field_gradient(phi_ab, q, &qp.grads);
                // Source term S_i = C_ickl L_abkl - C^M_icab
                let mut source = [0.0; 2];
                for i in 0..2 {
                    let mut v = 0.0;
                    for k in 0..2 {
                        for lam in 0..2 {
                            let l_kl =
                                g[k][lam] + if k == a && lam == b { 1.0 } else { 0.0 };
                            v += c.0[i][cidx][k][lam] * l_kl;
                        }
                    }
                    source[i] = v - c_m.0[i][cidx][a][b];
                    source_mean[i] += qp.jxw * source[i];
                }
                for (k, &node) in q.iter().enumerate() {
                    for alpha in 0..2 {
                        // -int C_{alpha g k c} phi_k dN/dy_g
                        let mut flux = 0.0;
                        for gg in 0..2 {
                            for kk in 0..2 {
                                flux += c.0[alpha][gg][kk][cidx] * phi_val[kk] * qp.grads[k][gg];
                            }
                        }
                        rhs[2 * node + alpha] +=
                            qp.jxw * (source[alpha] * qp.values[k] - flux);
                    }
                }
            }
        }
        Ok((
            rhs,
            [source_mean[0] / volume, source_mean[1] / volume],
            volume,
        ))
    }

    /// Solves the eight second-order problems. `c_m` must come from
    /// `compute_cm` on the same fields; that is the Fredholm solvability
    /// condition, and a violated source mean is reported as a consistency
    /// error rather than handed to the solver.
    pub fn solve_psi(
        &self,
        phi: &[Vec<f64>; 4],
        c_m: &Tensor4,
        settings: &SolverSettings,
    ) -> Result<([Vec<f64>; 8], [SolveStats; 8])> {
        let mut fields: [Vec<f64>; 8] = Default::default();
        let mut stats = [SolveStats::default(); 8];
        let scale = c_m.max_abs().max(f64::MIN_POSITIVE);
        for &(a, b, c) in &TRIPLETS {
            let phi_ab = &phi[pair_index(a, b)];
            let (rhs, source_mean, _) = self.psi_rhs(phi_ab, a, b, c, c_m)?;
            let deviation = source_mean[0].abs().max(source_mean[1].abs()) / scale;
            if deviation > 1e-6 {
                return Err(Error::Consistency {
                    deviation,
                    tolerance: 1e-6,
                });
            }
            let label = format!("psi_{}{}{}", a + 1, b + 1, c + 1);
            let (u, st) = solve_periodic(&self.system, &rhs, settings, &label)?;
            fields[triplet_index(a, b, c)] = u;
            stats[triplet_index(a, b, c)] = st;
        }
        Ok((fields, stats))
    }

    /// Full cell solve in the fixed order: all phi, then C^M, then all psi.
    pub fn solve_all(&self, settings: &SolverSettings) -> Result<(CellSolution, Tensor4, CmDiagnostics)> {
        let (phi, phi_stats) = self.solve_phi(settings)?;
        let (c_m, diag) = self.compute_cm(&phi)?;
        let (psi, psi_stats) = self.solve_psi(&phi, &c_m, settings)?;
        Ok((
            CellSolution {
                phi,
                psi,
                phi_stats,
                psi_stats,
            },
            c_m,
            diag,
        ))
    }
}

/// Diagnostics recorded while building the classical tensor.
#[derive(Clone, Copy, Debug, Default)]
pub struct CmDiagnostics {
    /// Largest deviation removed by minor/major symmetrization, relative to
    /// the largest component.
    pub symmetry_deviation_rel: f64,
    /// max |<C L> - C_M| / max |C_M|: the orthogonality identity between the
    /// localized stress average and the classical tensor.
    pub consistency_rel: f64,
}

/// Convenience wrappers matching the operation-level interface.
pub fn solve_phi(
    mesh: &PeriodicMesh,
    material: &MicroMaterial,
    settings: &SolverSettings,
) -> Result<[Vec<f64>; 4]> {
    let p = CellProblem::new(mesh, material)?;
    Ok(p.solve_phi(settings)?.0)
}

pub fn compute_cm(
    mesh: &PeriodicMesh,
    material: &MicroMaterial,
    phi: &[Vec<f64>; 4],
) -> Result<(Tensor4, CmDiagnostics)> {
    let p = CellProblem::new(mesh, material)?;
    p.compute_cm(phi)
}

pub fn solve_psi(
    mesh: &PeriodicMesh,
    material: &MicroMaterial,
    phi: &[Vec<f64>; 4],
    c_m: &Tensor4,
    settings: &SolverSettings,
) -> Result<[Vec<f64>; 8]> {
    let p = CellProblem::new(mesh, material)?;
    Ok(p.solve_psi(phi, c_m, settings)?.0)
}
