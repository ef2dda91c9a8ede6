//! Epigraph lowering shared by the backends.

use super::program::{ConicProgram, LinExpr};
use super::Norm;

pub(crate) type SparseRow = Vec<(usize, f64)>;

/// `t >= || (a_j . x + c_j)_j ||_2`.
pub(crate) struct SocBlock {
    pub t: usize,
    pub rows: Vec<(SparseRow, f64)>,
}

/// Linear objective, equalities, `<=` rows, variable sign flags and SOC blocks.
/// Columns `0..n_user` are the program's variables, the rest are epigraph
/// auxiliaries.
pub(crate) struct StandardForm {
    pub n: usize,
    pub c: Vec<f64>,
    pub eq: Vec<(SparseRow, f64)>,
    pub le: Vec<(SparseRow, f64)>,
    pub nonneg: Vec<bool>,
    pub socs: Vec<SocBlock>,
}

fn row_of(e: &LinExpr) -> SparseRow {
    e.terms().iter().map(|(v, c)| (v.index(), *c)).collect()
}

fn negated(e: &LinExpr) -> SparseRow {
    e.terms().iter().map(|(v, c)| (v.index(), -*c)).collect()
}

impl StandardForm {
    pub fn lower(prog: &ConicProgram) -> Self {
        let mut n = prog.num_vars();
        let mut c = vec![0.0; n];
        for &(v, coef) in &prog.linear_objective {
            c[v.index()] += coef;
        }
        let eq = prog.equalities.iter().map(|(e, r)| (row_of(e), *r)).collect();
        let mut le: Vec<(SparseRow, f64)> =
            prog.inequalities.iter().filter(|(_, r)| r.is_finite()).map(|(e, r)| (row_of(e), *r)).collect();
        let mut nonneg = vec![false; n];
        for v in prog.nonneg_vars() {
            nonneg[v.index()] = true;
        }
        let mut socs = Vec::new();
        let new_aux = |n: &mut usize, c: &mut Vec<f64>, nonneg: &mut Vec<bool>| {
            let idx = *n;
            *n += 1;
            c.push(1.0);
            nonneg.push(false);
            idx
        };
        for term in &prog.norm_terms {
            match term.norm {
                Norm::L1 => {
                    for r in &term.rows {
                        let e = new_aux(&mut n, &mut c, &mut nonneg);
                        let mut up = row_of(r);
                        up.push((e, -1.0));
                        le.push((up, -r.constant_part()));
                        let mut down = negated(r);
                        down.push((e, -1.0));
                        le.push((down, r.constant_part()));
                    }
                }
                Norm::Linf => {
                    let t = new_aux(&mut n, &mut c, &mut nonneg);
                    for r in &term.rows {
                        let mut up = row_of(r);
                        up.push((t, -1.0));
                        le.push((up, -r.constant_part()));
                        let mut down = negated(r);
                        down.push((t, -1.0));
                        le.push((down, r.constant_part()));
                    }
                }
                Norm::L2 => {
                    let t = new_aux(&mut n, &mut c, &mut nonneg);
                    let rows = term.rows.iter().map(|r| (row_of(r), r.constant_part())).collect();
                    socs.push(SocBlock { t, rows });
                }
            }
        }
        Self { n, c, eq, le, nonneg, socs }
    }
}
