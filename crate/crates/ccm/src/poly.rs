//! Exact multivariate polynomials and polynomial matrices.
//!
//! Polynomials are stored as coefficient/exponent term lists in graded-lex
//! canonical order, so structural equality, differentiation, and printing are
//! all exact (up to f64 arithmetic on the coefficients). Variables are
//! positional; parsing and printing name them `x1..xn` and, when a state/input
//! split is given, `u1..um` for the trailing block.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{CcmError, Result};

/// One monomial term: coefficient times a product of variable powers.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coeff: f64,
    pub exps: Vec<u32>,
}

/// A multivariate polynomial over `nvars` positional variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpr {
    nvars: usize,
    terms: Vec<Term>,
}

fn graded_lex(a: &[u32], b: &[u32]) -> std::cmp::Ordering {
    let da: u32 = a.iter().sum();
    let db: u32 = b.iter().sum();
    da.cmp(&db).then_with(|| a.cmp(b))
}

impl PolyExpr {
    /// Builds a polynomial from raw terms, merging duplicates and dropping
    /// zero coefficients.
    pub fn new(nvars: usize, terms: Vec<Term>) -> Result<Self> {
        for t in &terms {
            if t.exps.len() != nvars {
                return Err(CcmError::DimensionMismatch(format!(
                    "term exponent vector has length {}, expected {}",
                    t.exps.len(),
                    nvars
                )));
            }
        }
        let mut p = PolyExpr { nvars, terms };
        p.normalize();
        Ok(p)
    }

    pub fn zero(nvars: usize) -> Self {
        PolyExpr { nvars, terms: Vec::new() }
    }

    pub fn constant(c: f64, nvars: usize) -> Self {
        let mut p = PolyExpr { nvars, terms: vec![Term { coeff: c, exps: vec![0; nvars] }] };
        p.normalize();
        p
    }

    pub fn one(nvars: usize) -> Self {
        Self::constant(1.0, nvars)
    }

    /// The `i`-th variable as a polynomial.
    pub fn var(i: usize, nvars: usize) -> Self {
        assert!(i < nvars, "variable index {i} out of range for {nvars} variables");
        let mut exps = vec![0; nvars];
        exps[i] = 1;
        PolyExpr { nvars, terms: vec![Term { coeff: 1.0, exps }] }
    }

    /// A single monomial `c * x^exps`.
    pub fn monomial(c: f64, exps: Vec<u32>) -> Self {
        let nvars = exps.len();
        let mut p = PolyExpr { nvars, terms: vec![Term { coeff: c, exps }] };
        p.normalize();
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when every coefficient is at most `tol` in magnitude.
    pub fn is_zero_within(&self, tol: f64) -> bool {
        self.terms.iter().all(|t| t.coeff.abs() <= tol)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().fold(0.0, |m, t| m.max(t.coeff.abs()))
    }

    /// Total degree; zero polynomial reports 0.
    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exps.iter().sum()).max().unwrap_or(0)
    }

    fn normalize(&mut self) {
        self.terms.sort_by(|a, b| graded_lex(&a.exps, &b.exps));
        let mut merged: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match merged.last_mut() {
                Some(last) if last.exps == t.exps => last.coeff += t.coeff,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.coeff != 0.0);
        self.terms = merged;
    }

    /// Evaluates at `x`, checking the dimension.
    pub fn try_eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.nvars {
            return Err(CcmError::DimensionMismatch(format!(
                "evaluation point has length {}, polynomial has {} variables",
                x.len(),
                self.nvars
            )));
        }
        Ok(self.eval(x))
    }

    /// Evaluates at `x`. Panics on dimension mismatch; use [`try_eval`]
    /// at validation boundaries.
    ///
    /// [`try_eval`]: PolyExpr::try_eval
    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nvars, "evaluation point dimension mismatch");
        let mut acc = 0.0;
        for t in &self.terms {
            let mut v = t.coeff;
            for (xi, &e) in x.iter().zip(&t.exps) {
                if e > 0 {
                    v *= xi.powi(e as i32);
                }
            }
            acc += v;
        }
        acc
    }

    pub fn neg(&self) -> Self {
        let terms = self.terms.iter().map(|t| Term { coeff: -t.coeff, exps: t.exps.clone() }).collect();
        PolyExpr { nvars: self.nvars, terms }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars, "polynomial variable count mismatch");
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        let mut p = PolyExpr { nvars: self.nvars, terms };
        p.normalize();
        p
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut p = PolyExpr {
            nvars: self.nvars,
            terms: self.terms.iter().map(|t| Term { coeff: c * t.coeff, exps: t.exps.clone() }).collect(),
        };
        p.normalize();
        p
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars, "polynomial variable count mismatch");
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                let exps = a.exps.iter().zip(&b.exps).map(|(x, y)| x + y).collect();
                terms.push(Term { coeff: a.coeff * b.coeff, exps });
            }
        }
        let mut p = PolyExpr { nvars: self.nvars, terms };
        p.normalize();
        p
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut acc = PolyExpr::one(self.nvars);
        for _ in 0..k {
            acc = acc.mul(self);
        }
        acc
    }

    /// Partial derivative with respect to variable `j`.
    pub fn partial(&self, j: usize) -> Self {
        assert!(j < self.nvars, "variable index out of range");
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exps[j] > 0)
            .map(|t| {
                let mut exps = t.exps.clone();
                let e = exps[j];
                exps[j] = e - 1;
                Term { coeff: t.coeff * e as f64, exps }
            })
            .collect();
        let mut p = PolyExpr { nvars: self.nvars, terms };
        p.normalize();
        p
    }

    /// Embeds into a larger variable space (new variables appended).
    pub fn extend_vars(&self, nvars: usize) -> Self {
        assert!(nvars >= self.nvars, "cannot shrink variable space");
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut exps = t.exps.clone();
                exps.resize(nvars, 0);
                Term { coeff: t.coeff, exps }
            })
            .collect();
        PolyExpr { nvars, terms }
    }

    /// Substitutes `images[j]` for variable `j`. All images must share a
    /// common variable space, which becomes the result's.
    pub fn compose(&self, images: &[PolyExpr]) -> Self {
        assert_eq!(images.len(), self.nvars, "need one image per variable");
        let nv_out = images.first().map(|p| p.nvars).unwrap_or(0);
        let mut acc = PolyExpr::zero(nv_out);
        for t in &self.terms {
            let mut term_poly = PolyExpr::constant(t.coeff, nv_out);
            for (j, &e) in t.exps.iter().enumerate() {
                if e > 0 {
                    term_poly = term_poly.mul(&images[j].pow(e));
                }
            }
            acc = acc.add(&term_poly);
        }
        acc
    }

    /// Parses a polynomial in the state variables `x1..xn`.
    pub fn parse(input: &str, n: usize) -> Result<Self> {
        Parser::new(input, n, 0).parse_all()
    }

    /// Parses a polynomial in `x1..xn, u1..um` (inputs map to the trailing
    /// variable block).
    pub fn parse_xu(input: &str, n: usize, m: usize) -> Result<Self> {
        Parser::new(input, n, m).parse_all()
    }

    /// Renders with an explicit state/input split, e.g. `x1*u2`.
    pub fn to_string_xu(&self, n: usize, m: usize) -> String {
        assert_eq!(n + m, self.nvars, "split does not cover variable space");
        self.format(&|i| if i < n { format!("x{}", i + 1) } else { format!("u{}", i - n + 1) })
    }

    fn format(&self, name: &dyn Fn(usize) -> String) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (k, t) in self.terms.iter().enumerate() {
            let mag = t.coeff.abs();
            let neg = t.coeff < 0.0;
            if k == 0 {
                if neg {
                    out.push('-');
                }
            } else {
                out.push_str(if neg { " - " } else { " + " });
            }
            let mut factors: Vec<String> = Vec::new();
            for (j, &e) in t.exps.iter().enumerate() {
                match e {
                    0 => {}
                    1 => factors.push(name(j)),
                    _ => factors.push(format!("{}^{}", name(j), e)),
                }
            }
            if factors.is_empty() {
                out.push_str(&format!("{mag}"));
            } else {
                if mag != 1.0 {
                    out.push_str(&format!("{mag}*"));
                }
                out.push_str(&factors.join("*"));
            }
        }
        out
    }
}

impl fmt::Display for PolyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.format(&|i| format!("x{}", i + 1)))
    }
}

/// Jacobian of a polynomial vector field: entry `(i, j) = ∂v_i/∂x_j`.
pub fn jacobian(v: &[PolyExpr]) -> PolyMatrix {
    let nvars = v.first().map(|p| p.nvars()).unwrap_or(0);
    PolyMatrix::from_fn(v.len(), nvars, nvars, |i, j| v[i].partial(j))
}

/// Directional derivative `∂_v M = Σ_j (∂M/∂x_j) v_j` as a polynomial identity.
pub fn directional_derivative(m: &PolyMatrix, v: &[PolyExpr]) -> PolyMatrix {
    assert!(v.len() <= m.nvars(), "direction field longer than variable space");
    let mut acc = PolyMatrix::zero(m.rows(), m.cols(), m.nvars());
    for (j, vj) in v.iter().enumerate() {
        let vj = if vj.nvars() == m.nvars() { vj.clone() } else { vj.extend_vars(m.nvars()) };
        if vj.is_zero() {
            continue;
        }
        let dj = m.map(|p| p.partial(j).mul(&vj));
        acc = acc.add(&dj);
    }
    acc
}

/// A dense matrix of polynomials over a shared variable space.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    entries: Vec<PolyExpr>,
    symmetric: bool,
}

impl PolyMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<PolyExpr>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(CcmError::DimensionMismatch(format!(
                "expected {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        let nvars = entries.first().map(|p| p.nvars()).unwrap_or(0);
        if entries.iter().any(|p| p.nvars() != nvars) {
            return Err(CcmError::DimensionMismatch(
                "matrix entries live in different variable spaces".into(),
            ));
        }
        Ok(PolyMatrix { rows, cols, nvars, entries, symmetric: false })
    }

    pub fn from_fn(rows: usize, cols: usize, nvars: usize, mut f: impl FnMut(usize, usize) -> PolyExpr) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let p = f(i, j);
                assert_eq!(p.nvars(), nvars, "entry variable space mismatch");
                entries.push(p);
            }
        }
        PolyMatrix { rows, cols, nvars, entries, symmetric: false }
    }

    pub fn zero(rows: usize, cols: usize, nvars: usize) -> Self {
        Self::from_fn(rows, cols, nvars, |_, _| PolyExpr::zero(nvars))
    }

    pub fn identity(n: usize, nvars: usize) -> Self {
        let mut m = Self::from_fn(n, n, nvars, |i, j| {
            if i == j {
                PolyExpr::one(nvars)
            } else {
                PolyExpr::zero(nvars)
            }
        });
        m.symmetric = true;
        m
    }

    /// Lifts a constant matrix into the polynomial ring.
    pub fn from_constant(m: &DMatrix<f64>, nvars: usize) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), nvars, |i, j| PolyExpr::constant(m[(i, j)], nvars))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> &PolyExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: PolyExpr) {
        assert_eq!(p.nvars(), self.nvars, "entry variable space mismatch");
        self.entries[i * self.cols + j] = p;
        self.symmetric = false;
    }

    /// Marks the matrix symmetric after verifying `(i,j)` and `(j,i)` agree
    /// term-by-term.
    pub fn into_symmetric(mut self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(CcmError::DimensionMismatch("symmetric flag on non-square matrix".into()));
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if self.get(i, j) != self.get(j, i) {
                    return Err(CcmError::InvalidArgument(format!(
                        "matrix is not symmetric: entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        self.symmetric = true;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::from_fn(self.cols, self.rows, self.nvars, |i, j| self.get(j, i).clone());
        m.symmetric = self.symmetric;
        m
    }

    pub fn neg(&self) -> Self {
        let mut m = self.map(|p| p.neg());
        m.symmetric = self.symmetric;
        m
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "matrix shape mismatch");
        let mut m = Self::from_fn(self.rows, self.cols, self.nvars, |i, j| self.get(i, j).add(other.get(i, j)));
        m.symmetric = self.symmetric && other.symmetric;
        m
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        Self::from_fn(self.rows, other.cols, self.nvars, |i, j| {
            let mut acc = PolyExpr::zero(self.nvars);
            for k in 0..self.cols {
                acc = acc.add(&self.get(i, k).mul(other.get(k, j)));
            }
            acc
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut m = self.map(|p| p.scale(c));
        m.symmetric = self.symmetric;
        m
    }

    pub fn scale_poly(&self, s: &PolyExpr) -> Self {
        let mut m = self.map(|p| p.mul(s));
        m.symmetric = self.symmetric;
        m
    }

    pub fn map(&self, f: impl Fn(&PolyExpr) -> PolyExpr) -> Self {
        Self::from_fn(self.rows, self.cols, self.nvars, |i, j| f(self.get(i, j)))
    }

    pub fn extend_vars(&self, nvars: usize) -> Self {
        let entries = self.entries.iter().map(|p| p.extend_vars(nvars)).collect();
        PolyMatrix { rows: self.rows, cols: self.cols, nvars, entries, symmetric: self.symmetric }
    }

    pub fn column(&self, j: usize) -> Vec<PolyExpr> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    /// Entrywise partial derivative with respect to variable `j`.
    pub fn partial(&self, j: usize) -> Self {
        let mut m = self.map(|p| p.partial(j));
        m.symmetric = self.symmetric;
        m
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub fn try_eval(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.nvars {
            return Err(CcmError::DimensionMismatch(format!(
                "evaluation point has length {}, matrix entries have {} variables",
                x.len(),
                self.nvars
            )));
        }
        Ok(self.eval(x))
    }

    pub fn is_zero_within(&self, tol: f64) -> bool {
        self.entries.iter().all(|p| p.is_zero_within(tol))
    }

    /// True if all entries are degree-0 polynomials.
    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|p| p.degree() == 0)
    }

    pub fn parse(rows: usize, cols: usize, n: usize, entries: &[&str]) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(CcmError::DimensionMismatch(format!(
                "expected {} entry strings, got {}",
                rows * cols,
                entries.len()
            )));
        }
        let parsed: Result<Vec<PolyExpr>> = entries.iter().map(|s| PolyExpr::parse(s, n)).collect();
        Self::new(rows, cols, parsed?)
    }
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    input: &'a str,
    n: usize,
    m: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str, n: usize, m: usize) -> Self {
        Parser { chars: input.chars().collect(), pos: 0, input, n, m }
    }

    fn nvars(&self) -> usize {
        self.n + self.m
    }

    fn err(&self, msg: &str) -> CcmError {
        CcmError::Parse(format!("{msg} at position {} in {:?}", self.pos, self.input))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        self.skip_ws();
        let c = self.chars.get(self.pos).copied();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn parse_all(&mut self) -> Result<PolyExpr> {
        let p = self.parse_expr()?;
        self.skip_ws();
        if self.pos < self.chars.len() {
            return Err(self.err("trailing input"));
        }
        Ok(p)
    }

    fn parse_expr(&mut self) -> Result<PolyExpr> {
        let mut acc = match self.peek() {
            Some('-') => {
                self.bump();
                self.parse_term()?.neg()
            }
            Some('+') => {
                self.bump();
                self.parse_term()?
            }
            _ => self.parse_term()?,
        };
        loop {
            match self.peek() {
                Some('+') => {
                    self.bump();
                    acc = acc.add(&self.parse_term()?);
                }
                Some('-') => {
                    self.bump();
                    acc = acc.sub(&self.parse_term()?);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn parse_term(&mut self) -> Result<PolyExpr> {
        let mut acc = self.parse_factor()?;
        while self.peek() == Some('*') {
            self.bump();
            acc = acc.mul(&self.parse_factor()?);
        }
        Ok(acc)
    }

    fn parse_factor(&mut self) -> Result<PolyExpr> {
        let base = self.parse_atom()?;
        if self.peek() == Some('^') {
            self.bump();
            let e = self.parse_uint()?;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<PolyExpr> {
        match self.peek() {
            Some('(') => {
                self.bump();
                let p = self.parse_expr()?;
                if self.bump() != Some(')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(p)
            }
            Some('-') => {
                self.bump();
                Ok(self.parse_factor()?.neg())
            }
            Some(c) if c == 'x' || c == 'u' => self.parse_var(),
            Some(c) if c.is_ascii_digit() || c == '.' => self.parse_number(),
            _ => Err(self.err("expected variable, number, or '('")),
        }
    }

    fn parse_var(&mut self) -> Result<PolyExpr> {
        let kind = self.bump().unwrap();
        let idx = self.parse_uint()? as usize;
        if idx == 0 {
            return Err(self.err("variable indices start at 1"));
        }
        let var = match kind {
            'x' if idx <= self.n => idx - 1,
            'x' => return Err(self.err(&format!("x{idx} out of range (n = {})", self.n))),
            'u' if idx <= self.m => self.n + idx - 1,
            _ => return Err(self.err(&format!("u{idx} out of range (m = {})", self.m))),
        };
        Ok(PolyExpr::var(var, self.nvars()))
    }

    fn parse_uint(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected an integer"));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse::<u32>().map_err(|_| self.err("integer out of range"))
    }

    fn parse_number(&mut self) -> Result<PolyExpr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len() && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.') {
            self.pos += 1;
        }
        // optional exponent, e.g. 1e-3
        if self.pos < self.chars.len() && (self.chars[self.pos] == 'e' || self.chars[self.pos] == 'E') {
            let mut k = self.pos + 1;
            if k < self.chars.len() && (self.chars[k] == '+' || self.chars[k] == '-') {
                k += 1;
            }
            if k < self.chars.len() && self.chars[k].is_ascii_digit() {
                self.pos = k;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        if start == self.pos {
            return Err(self.err("expected a number"));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        let v: f64 = s.parse().map_err(|_| self.err("malformed number"))?;
        Ok(PolyExpr::constant(v, self.nvars()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn eval_monomial() {
        let p = PolyExpr::parse("x1^2", 1).unwrap();
        assert_eq!(p.try_eval(&[2.0]).unwrap(), 4.0);
    }

    #[test]
    fn eval_zero_poly() {
        let p = PolyExpr::zero(3);
        assert_eq!(p.try_eval(&[1.0, -2.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn eval_cubic_example() {
        // f1 of the planar non-feedback-linearizable example
        let p = PolyExpr::parse("-x1 - x1^3 + x2^2", 2).unwrap();
        assert_eq!(p.try_eval(&[1.0, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let p = PolyExpr::parse("x1 + x2", 2).unwrap();
        assert!(matches!(p.try_eval(&[1.0]), Err(CcmError::DimensionMismatch(_))));
    }

    #[test]
    fn jacobian_of_three_state_drift_at_origin() {
        let f = vec![
            PolyExpr::parse("-x1 + x3", 3).unwrap(),
            PolyExpr::parse("x1^2 - x2 - 2*x1*x3 + x3", 3).unwrap(),
            PolyExpr::parse("-x2", 3).unwrap(),
        ];
        let j = jacobian(&f).eval(&[0.0, 0.0, 0.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 0.0]);
        assert_eq!(j, expected);
    }

    #[test]
    fn jacobian_constant_vector_is_zero() {
        let f = vec![PolyExpr::constant(3.0, 2), PolyExpr::constant(-1.0, 2)];
        let j = jacobian(&f);
        assert!(j.is_zero_within(0.0));
    }

    #[test]
    fn jacobian_linear_swap() {
        let f = vec![PolyExpr::var(1, 2), PolyExpr::var(0, 2)];
        let j = jacobian(&f).eval(&[0.3, -0.7]);
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = vec![
            PolyExpr::parse("x1^2*x2 - 0.5*x2^3", 2).unwrap(),
            PolyExpr::parse("-x1 + 2*x1*x2", 2).unwrap(),
        ];
        let j = jacobian(&f);
        let h = 1e-6;
        let pts = [[0.7, -0.4], [1.3, 2.1], [-0.9, 0.2]];
        for x in pts {
            for i in 0..2 {
                for k in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (f[i].eval(&xp) - f[i].eval(&xm)) / (2.0 * h);
                    let exact = j.get(i, k).eval(&x);
                    assert!((exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()), "({i},{k}) at {x:?}");
                }
            }
        }
    }

    #[test]
    fn directional_derivative_single_variable_chain() {
        // M = diag(1 + x1^2, 1), v = e1  =>  ∂_v M = diag(2 x1, 0)
        let m = PolyMatrix::new(
            2,
            2,
            vec![
                PolyExpr::parse("1 + x1^2", 2).unwrap(),
                PolyExpr::zero(2),
                PolyExpr::zero(2),
                PolyExpr::one(2),
            ],
        )
        .unwrap();
        let v = vec![PolyExpr::one(2), PolyExpr::zero(2)];
        let d = directional_derivative(&m, &v);
        assert_eq!(d.get(0, 0), &PolyExpr::parse("2*x1", 2).unwrap());
        assert!(d.get(0, 1).is_zero() && d.get(1, 0).is_zero() && d.get(1, 1).is_zero());
    }

    #[test]
    fn directional_derivative_constant_matrix() {
        let m = PolyMatrix::identity(3, 3).scale(2.5);
        let v = vec![PolyExpr::var(0, 3), PolyExpr::var(1, 3), PolyExpr::var(2, 3)];
        assert!(directional_derivative(&m, &v).is_zero_within(0.0));
    }

    #[test]
    fn directional_derivative_vanishing_weighted_term() {
        // M = diag(1 + 2 x2^2, 1): ∂M/∂x1 = 0, and v2 = 0 kills the x2 term.
        let m = PolyMatrix::new(
            2,
            2,
            vec![
                PolyExpr::parse("1 + 2*x2^2", 2).unwrap(),
                PolyExpr::zero(2),
                PolyExpr::zero(2),
                PolyExpr::one(2),
            ],
        )
        .unwrap();
        let v = vec![PolyExpr::parse("-x1 - x1^3 + x2^2", 2).unwrap(), PolyExpr::zero(2)];
        assert!(directional_derivative(&m, &v).is_zero_within(0.0));
    }

    #[test]
    fn parse_rejects_out_of_range_variables() {
        assert!(PolyExpr::parse("x3", 2).is_err());
        assert!(PolyExpr::parse("u1", 2).is_err());
        assert!(PolyExpr::parse_xu("u2", 2, 1).is_err());
    }

    #[test]
    fn parse_xu_places_inputs_after_states() {
        let p = PolyExpr::parse_xu("x1*u1", 2, 1).unwrap();
        assert_eq!(p.try_eval(&[3.0, 0.0, 2.0]).unwrap(), 6.0);
        assert_eq!(p.to_string_xu(2, 1), "x1*u1");
    }

    #[test]
    fn display_round_trip_examples() {
        for s in ["-x1 - x1^3 + x2^2", "0", "1.5", "2*x1^2*x2 - 0.25", "x1", "-3*x2^4"] {
            let p = PolyExpr::parse(s, 2).unwrap();
            let q = PolyExpr::parse(&p.to_string(), 2).unwrap();
            assert_eq!(p, q, "round trip failed for {s}");
        }
    }

    #[test]
    fn compose_with_linear_images() {
        // p(x) = x1^2 composed with x1 -> x1 + x2 gives (x1 + x2)^2
        let p = PolyExpr::parse("x1^2", 1).unwrap();
        let img = vec![PolyExpr::parse("x1 + x2", 2).unwrap()];
        let q = p.compose(&img);
        assert_eq!(q, PolyExpr::parse("x1^2 + 2*x1*x2 + x2^2", 2).unwrap());
    }

    #[test]
    fn symmetric_flag_checks_entries() {
        let ok = PolyMatrix::parse(2, 2, 2, &["x1", "x2", "x2", "1"]).unwrap().into_symmetric();
        assert!(ok.is_ok());
        let bad = PolyMatrix::parse(2, 2, 2, &["x1", "x2", "x1", "1"]).unwrap().into_symmetric();
        assert!(bad.is_err());
    }

    #[test]
    fn matmul_and_eval_agree_with_numeric_product() {
        let a = PolyMatrix::parse(2, 2, 2, &["x1", "1", "0", "x2"]).unwrap();
        let b = PolyMatrix::parse(2, 2, 2, &["1", "x2", "x1", "0"]).unwrap();
        let x = [0.8, -1.3];
        let prod = a.matmul(&b).eval(&x);
        let numeric = a.eval(&x) * b.eval(&x);
        assert_relative_eq!(prod, numeric, epsilon = 1e-14);
    }

    fn arb_poly() -> impl Strategy<Value = PolyExpr> {
        let term = (any::<i16>(), proptest::collection::vec(0u32..4, 3)).prop_map(|(c, exps)| Term {
            coeff: c as f64 / 8.0,
            exps,
        });
        proptest::collection::vec(term, 0..8).prop_map(|ts| PolyExpr::new(3, ts).unwrap())
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(p in arb_poly()) {
            let s = p.to_string();
            let q = PolyExpr::parse(&s, 3).unwrap();
            prop_assert_eq!(p, q);
        }

        #[test]
        fn product_rule_for_partials(p in arb_poly(), q in arb_poly(), j in 0usize..3) {
            let lhs = p.mul(&q).partial(j);
            let rhs = p.partial(j).mul(&q).add(&p.mul(&q.partial(j)));
            prop_assert!(lhs.sub(&rhs).is_zero_within(1e-9));
        }
    }
}
