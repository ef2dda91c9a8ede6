use crate::error::{Error, Result};

use super::Norm;

/// A scalar decision variable (global column index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, contiguous block of variables laid out row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    id: usize,
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry `(r, c)`.
    pub fn at(&self, r: usize, c: usize) -> Var {
        assert!(r < self.rows && c < self.cols, "block index ({r},{c}) out of range");
        Var(self.offset + r * self.cols + c)
    }

    /// Entry `i` in flat row-major order.
    pub fn idx(&self, i: usize) -> Var {
        assert!(i < self.len(), "block index {i} out of range");
        Var(self.offset + i)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.len()).map(|i| self.idx(i))
    }
}

/// Sparse affine expression `sum coef * var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub(crate) terms: Vec<(Var, f64)>,
    pub(crate) constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { terms: Vec::with_capacity(n), constant: 0.0 }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn plus(mut self, v: Var, coef: f64) -> Self {
        self.add_term(v, coef);
        self
    }

    pub fn plus_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    /// Zero coefficients are dropped.
    pub fn add_term(&mut self, v: Var, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn terms(&self) -> &[(Var, f64)] {
        &self.terms
    }

    pub fn constant_part(&self) -> f64 {
        self.constant
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(v, c)| c * x[v.0]).sum::<f64>() + self.constant
    }

    fn scaled(&self, s: f64) -> Self {
        Self { terms: self.terms.iter().map(|&(v, c)| (v, c * s)).collect(), constant: self.constant * s }
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }
}

/// `norm(rows)` where each row is an affine expression.
#[derive(Debug, Clone)]
pub struct NormTerm {
    pub rows: Vec<LinExpr>,
    pub norm: Norm,
}

impl NormTerm {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(|r| r.eval(x)).collect();
        self.norm.eval(&v)
    }
}

#[derive(Debug, Clone)]
struct BlockInfo {
    name: String,
    block: Block,
}

/// A minimization problem: linear objective plus a sum of norms, subject to
/// sparse linear equalities, `<=` inequalities and nonnegative blocks.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    blocks: Vec<BlockInfo>,
    num_vars: usize,
    /// Rows `expr = rhs`, constant already folded into `rhs`.
    pub(crate) equalities: Vec<(LinExpr, f64)>,
    /// Rows `expr <= rhs`, constant already folded into `rhs`.
    pub(crate) inequalities: Vec<(LinExpr, f64)>,
    pub(crate) nonneg_blocks: Vec<usize>,
    pub(crate) norm_terms: Vec<NormTerm>,
    pub(crate) linear_objective: Vec<(Var, f64)>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Block {
        let block = Block { id: self.blocks.len(), offset: self.num_vars, rows, cols };
        self.num_vars += rows * cols;
        self.blocks.push(BlockInfo { name: name.into(), block });
        block
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.blocks.iter().find(|b| b.name == name).map(|b| b.block)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, Block)> + '_ {
        self.blocks.iter().map(|b| (b.name.as_str(), b.block))
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of declared variables (epigraph auxiliaries not included).
    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    pub fn norm_terms(&self) -> &[NormTerm] {
        &self.norm_terms
    }

    pub fn add_eq(&mut self, expr: LinExpr, rhs: f64) {
        let c = expr.constant;
        self.equalities.push((LinExpr { constant: 0.0, ..expr }, rhs - c));
    }

    pub fn add_le(&mut self, expr: LinExpr, rhs: f64) {
        let c = expr.constant;
        self.inequalities.push((LinExpr { constant: 0.0, ..expr }, rhs - c));
    }

    pub fn add_ge(&mut self, expr: LinExpr, rhs: f64) {
        self.add_le(expr.scaled(-1.0), -rhs);
    }

    pub fn nonneg(&mut self, b: &Block) {
        if !self.nonneg_blocks.contains(&b.id) {
            self.nonneg_blocks.push(b.id);
        }
    }

    pub fn add_norm_term(&mut self, rows: Vec<LinExpr>, norm: Norm) {
        self.norm_terms.push(NormTerm { rows, norm });
    }

    pub fn add_objective(&mut self, v: Var, coef: f64) {
        self.linear_objective.push((v, coef));
    }

    pub fn has_l2_terms(&self) -> bool {
        self.norm_terms.iter().any(|t| t.norm == Norm::L2)
    }

    pub(crate) fn nonneg_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.nonneg_blocks.iter().flat_map(move |&id| self.blocks[id].block.vars())
    }

    /// Structural audit: every referenced variable belongs to a declared block
    /// and all data are finite.
    pub fn validate(&self) -> Result<()> {
        let check = |e: &LinExpr, what: &str| -> Result<()> {
            for &(v, c) in &e.terms {
                if v.0 >= self.num_vars {
                    return Err(Error::Model(format!("{what} references undeclared variable {}", v.0)));
                }
                if !c.is_finite() {
                    return Err(Error::Model(format!("{what} has a non-finite coefficient")));
                }
            }
            if !e.constant.is_finite() {
                return Err(Error::Model(format!("{what} has a non-finite constant")));
            }
            Ok(())
        };
        for (e, r) in &self.equalities {
            check(e, "equality row")?;
            if !r.is_finite() {
                return Err(Error::Model("equality row has a non-finite right-hand side".into()));
            }
        }
        for (e, r) in &self.inequalities {
            check(e, "inequality row")?;
            if r.is_nan() {
                return Err(Error::Model("inequality row has a NaN right-hand side".into()));
            }
        }
        for t in &self.norm_terms {
            if t.rows.is_empty() {
                return Err(Error::Model("empty norm term".into()));
            }
            for r in &t.rows {
                check(r, "norm term")?;
            }
        }
        for &(v, c) in &self.linear_objective {
            if v.0 >= self.num_vars || !c.is_finite() {
                return Err(Error::Model("bad linear objective entry".into()));
            }
        }
        for &id in &self.nonneg_blocks {
            if id >= self.blocks.len() {
                return Err(Error::Model(format!("nonnegative block {id} not declared")));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear_objective.iter().map(|(v, c)| c * x[v.0]).sum();
        lin + self.norm_terms.iter().map(|t| t.eval(x)).sum::<f64>()
    }

    /// `(max |eq residual|, max inequality violation, ||eq rhs||_inf, ||ineq rhs||_inf)`.
    /// Nonnegative blocks count as inequalities with zero right-hand side.
    pub fn residuals(&self, x: &[f64]) -> (f64, f64, f64, f64) {
        let mut eq = 0.0f64;
        let mut eq_scale = 0.0f64;
        for (e, r) in &self.equalities {
            eq = eq.max((e.eval(x) - r).abs());
            eq_scale = eq_scale.max(r.abs());
        }
        let mut ineq = 0.0f64;
        let mut in_scale = 0.0f64;
        for (e, r) in &self.inequalities {
            if r.is_finite() {
                ineq = ineq.max(e.eval(x) - r);
                in_scale = in_scale.max(r.abs());
            }
        }
        for v in self.nonneg_vars() {
            ineq = ineq.max(-x[v.0]);
        }
        (eq, ineq, eq_scale, in_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout_is_row_major_and_contiguous() {
        let mut p = ConicProgram::new();
        let a = p.add_block("a", 2, 3);
        let b = p.add_block("b", 1, 1);
        assert_eq!(a.at(1, 2).index(), 5);
        assert_eq!(b.idx(0).index(), 6);
        assert_eq!(p.num_vars(), 7);
        assert_eq!(p.block("b"), Some(b));
    }

    #[test]
    fn constants_fold_into_rhs() {
        let mut p = ConicProgram::new();
        let a = p.add_block("a", 1, 1);
        p.add_le(LinExpr::from(a.idx(0)).plus_constant(2.0), 5.0);
        p.add_ge(LinExpr::from(a.idx(0)), 1.0);
        assert_eq!(p.inequalities[0].1, 3.0);
        assert_eq!(p.inequalities[1].1, -1.0);
        let (_, viol, _, _) = p.residuals(&[0.0]);
        assert_eq!(viol, 1.0);
    }

    #[test]
    fn foreign_variables_fail_validation() {
        let mut other = ConicProgram::new();
        other.add_block("z", 10, 1);
        let stray = other.block("z").unwrap().idx(9);
        let mut p = ConicProgram::new();
        p.add_block("a", 1, 1);
        p.add_eq(LinExpr::from(stray), 0.0);
        assert!(matches!(p.validate(), Err(Error::Model(_))));
    }
}
