//! Loop iterators, affine access expressions, indexing maps and generic
//! tensor operations.
//!
//! A [`GenericOp`] describes a perfectly nested loop over `num_dims`
//! iterators. Every operand is accessed through an [`IndexingMap`] whose
//! results are [`AffineExpr`]s of at most two iterator terms plus a constant.
//! The scalar body is a [`PayloadExpr`] evaluated on 8-bit operands with a
//! 32-bit accumulator; the final store saturates to the signed 8-bit range.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Index of a loop dimension (`d0`, `d1`, ...).
pub type DimId = usize;

/// Maximum number of iterator terms accepted in one access expression.
pub const MAX_TERMS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("no value supplied for dimension d{dim} ({supplied} values given)")]
    MissingDimValue { dim: DimId, supplied: usize },
    #[error("payload references input {index} but only {available} operands are available")]
    MissingInput { index: usize, available: usize },
    #[error("i32 overflow while evaluating payload")]
    Overflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IteratorKind {
    Parallel,
    Reduction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term {
    pub dim: DimId,
    pub coeff: i64,
}

/// `Σ coeff·d + constant`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AffineExpr {
    pub terms: Vec<Term>,
    #[serde(default)]
    pub constant: i64,
}

impl AffineExpr {
    pub fn dim(dim: DimId) -> Self {
        Self::scaled(dim, 1)
    }

    pub fn scaled(dim: DimId, coeff: i64) -> Self {
        AffineExpr {
            terms: vec![Term { dim, coeff }],
            constant: 0,
        }
    }

    pub fn constant(value: i64) -> Self {
        AffineExpr {
            terms: Vec::new(),
            constant: value,
        }
    }

    /// `coeff_a·a + coeff_b·b`.
    pub fn sum(a: DimId, coeff_a: i64, b: DimId, coeff_b: i64) -> Self {
        AffineExpr {
            terms: vec![
                Term { dim: a, coeff: coeff_a },
                Term { dim: b, coeff: coeff_b },
            ],
            constant: 0,
        }
    }

    pub fn with_constant(mut self, constant: i64) -> Self {
        self.constant = constant;
        self
    }

    /// A single iterator with no constant offset (any coefficient).
    pub fn single_dim(&self) -> Option<DimId> {
        match self.terms.as_slice() {
            [t] => Some(t.dim),
            _ => None,
        }
    }

    pub fn is_single_dim(&self) -> bool {
        self.terms.len() == 1
    }

    pub fn dims(&self) -> impl Iterator<Item = DimId> + '_ {
        self.terms.iter().map(|t| t.dim)
    }

    pub fn coeff_of(&self, dim: DimId) -> Option<i64> {
        self.terms.iter().find(|t| t.dim == dim).map(|t| t.coeff)
    }

    /// Largest value the expression takes over `0 <= d < trip(d)`, assuming
    /// non-negative coefficients.
    pub fn max_value(&self, trips: &[usize]) -> i64 {
        self.terms
            .iter()
            .map(|t| t.coeff * (trips.get(t.dim).copied().unwrap_or(1) as i64 - 1))
            .sum::<i64>()
            + self.constant
    }
}

impl fmt::Display for AffineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.terms {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            if t.coeff == 1 {
                write!(f, "d{}", t.dim)?;
            } else {
                write!(f, "d{} * {}", t.dim, t.coeff)?;
            }
        }
        if self.constant != 0 || first {
            if !first {
                f.write_str(" + ")?;
            }
            write!(f, "{}", self.constant)?;
        }
        Ok(())
    }
}

/// Evaluates `Σ coeff·iter_values[dim] + constant`.
pub fn eval_affine(expr: &AffineExpr, iter_values: &[i64]) -> Result<i64, IrError> {
    let mut acc = expr.constant;
    for t in &expr.terms {
        let v = iter_values.get(t.dim).ok_or(IrError::MissingDimValue {
            dim: t.dim,
            supplied: iter_values.len(),
        })?;
        acc += t.coeff * v;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexingMap {
    pub num_dims: usize,
    pub results: Vec<AffineExpr>,
}

impl IndexingMap {
    pub fn new(num_dims: usize, results: Vec<AffineExpr>) -> Self {
        IndexingMap { num_dims, results }
    }

    pub fn identity(num_dims: usize) -> Self {
        IndexingMap {
            num_dims,
            results: (0..num_dims).map(AffineExpr::dim).collect(),
        }
    }

    pub fn eval(&self, iter_values: &[i64]) -> Result<Vec<i64>, IrError> {
        self.results
            .iter()
            .map(|e| eval_affine(e, iter_values))
            .collect()
    }

    pub fn dims(&self) -> BTreeSet<DimId> {
        self.results.iter().flat_map(|e| e.dims()).collect()
    }
}

impl fmt::Display for IndexingMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for d in 0..self.num_dims {
            if d > 0 {
                f.write_str(", ")?;
            }
            write!(f, "d{d}")?;
        }
        f.write_str(") -> (")?;
        for (i, e) in self.results.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str(")")
    }
}

/// True iff the results are exactly `(d0, ..., d{n-1})`.
pub fn is_identity_map(map: &IndexingMap) -> bool {
    map.results.len() == map.num_dims
        && map.results.iter().enumerate().all(|(i, e)| {
            e.constant == 0 && matches!(e.terms.as_slice(), [Term { dim, coeff: 1 }] if *dim == i)
        })
}

/// Saturates a 32-bit value into the signed 8-bit range.
pub fn clamp_i8(v: i32) -> i32 {
    v.clamp(i8::MIN as i32, i8::MAX as i32)
}

/// Scalar loop body.
///
/// Leaves are 8-bit (`Input`, `Const`); interior nodes compute in 32 bits.
/// `Acc` reads the running value of the output element for reductions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadExpr {
    Input(usize),
    Acc,
    Const(i32),
    Mul(Box<PayloadExpr>, Box<PayloadExpr>),
    Add(Box<PayloadExpr>, Box<PayloadExpr>),
    Max(Box<PayloadExpr>, Box<PayloadExpr>),
    ClampToI8(Box<PayloadExpr>),
}

/// Operation counts of a payload tree, used for DSP costing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadOps {
    pub mul: u64,
    pub add: u64,
    pub max: u64,
    pub clamp: u64,
}

impl PayloadExpr {
    pub fn input(i: usize) -> Self {
        PayloadExpr::Input(i)
    }

    pub fn mul(a: PayloadExpr, b: PayloadExpr) -> Self {
        PayloadExpr::Mul(Box::new(a), Box::new(b))
    }

    pub fn add(a: PayloadExpr, b: PayloadExpr) -> Self {
        PayloadExpr::Add(Box::new(a), Box::new(b))
    }

    pub fn max(a: PayloadExpr, b: PayloadExpr) -> Self {
        PayloadExpr::Max(Box::new(a), Box::new(b))
    }

    pub fn clamp(a: PayloadExpr) -> Self {
        PayloadExpr::ClampToI8(Box::new(a))
    }

    /// `acc + in0 * in1`.
    pub fn mac() -> Self {
        Self::add(
            PayloadExpr::Acc,
            Self::mul(PayloadExpr::Input(0), PayloadExpr::Input(1)),
        )
    }

    pub fn eval(&self, inputs: &[i32], acc: i32) -> Result<i32, IrError> {
        Ok(match self {
            PayloadExpr::Input(i) => *inputs.get(*i).ok_or(IrError::MissingInput {
                index: *i,
                available: inputs.len(),
            })?,
            PayloadExpr::Acc => acc,
            PayloadExpr::Const(c) => *c,
            PayloadExpr::Mul(a, b) => a
                .eval(inputs, acc)?
                .checked_mul(b.eval(inputs, acc)?)
                .ok_or(IrError::Overflow)?,
            PayloadExpr::Add(a, b) => a
                .eval(inputs, acc)?
                .checked_add(b.eval(inputs, acc)?)
                .ok_or(IrError::Overflow)?,
            PayloadExpr::Max(a, b) => a.eval(inputs, acc)?.max(b.eval(inputs, acc)?),
            PayloadExpr::ClampToI8(a) => clamp_i8(a.eval(inputs, acc)?),
        })
    }

    pub fn op_counts(&self) -> PayloadOps {
        let mut ops = PayloadOps::default();
        self.visit(&mut |e| match e {
            PayloadExpr::Mul(..) => ops.mul += 1,
            PayloadExpr::Add(..) => ops.add += 1,
            PayloadExpr::Max(..) => ops.max += 1,
            PayloadExpr::ClampToI8(..) => ops.clamp += 1,
            _ => {}
        });
        ops
    }

    pub fn acc_refs(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |e| {
            if matches!(e, PayloadExpr::Acc) {
                n += 1
            }
        });
        n
    }

    fn visit(&self, f: &mut impl FnMut(&PayloadExpr)) {
        f(self);
        match self {
            PayloadExpr::Mul(a, b) | PayloadExpr::Add(a, b) | PayloadExpr::Max(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            PayloadExpr::ClampToI8(a) => a.visit(f),
            _ => {}
        }
    }

    /// Renders the payload as a C expression over named operands.
    pub fn to_c(&self, inputs: &[String], acc: &str) -> String {
        match self {
            PayloadExpr::Input(i) => format!("(int32_t){}", inputs[*i]),
            PayloadExpr::Acc => acc.to_string(),
            PayloadExpr::Const(c) => c.to_string(),
            PayloadExpr::Mul(a, b) => format!("({} * {})", a.to_c(inputs, acc), b.to_c(inputs, acc)),
            PayloadExpr::Add(a, b) => format!("({} + {})", a.to_c(inputs, acc), b.to_c(inputs, acc)),
            PayloadExpr::Max(a, b) => {
                let (a, b) = (a.to_c(inputs, acc), b.to_c(inputs, acc));
                format!("({a} > {b} ? {a} : {b})")
            }
            PayloadExpr::ClampToI8(a) => format!("clamp_i8({})", a.to_c(inputs, acc)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub element_bits: u8,
}

impl TensorDecl {
    pub fn i8(name: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorDecl {
            name: name.into(),
            shape,
            element_bits: 8,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One operand of a [`GenericOp`]: a tensor and the map used to index it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub tensor: String,
    pub shape: Vec<usize>,
    pub map: IndexingMap,
}

impl Operand {
    pub fn new(tensor: impl Into<String>, shape: Vec<usize>, map: IndexingMap) -> Self {
        Operand {
            tensor: tensor.into(),
            shape,
            map,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericOp {
    pub op_id: String,
    pub inputs: Vec<Operand>,
    pub output: Operand,
    pub iterator_kinds: Vec<IteratorKind>,
    pub trip_counts: Vec<usize>,
    pub payload: PayloadExpr,
}

impl GenericOp {
    pub fn num_dims(&self) -> usize {
        self.iterator_kinds.len()
    }

    pub fn kind(&self, dim: DimId) -> IteratorKind {
        self.iterator_kinds[dim]
    }

    pub fn is_parallel(&self, dim: DimId) -> bool {
        self.iterator_kinds.get(dim) == Some(&IteratorKind::Parallel)
    }

    pub fn has_reduction(&self) -> bool {
        self.iterator_kinds.contains(&IteratorKind::Reduction)
    }

    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        self.inputs.iter().chain(std::iter::once(&self.output))
    }
}

/// A single invariant violation reported by [`validate_op`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every structural invariant of `op`. An empty result means the op
/// is well formed.
pub fn validate_op(op: &GenericOp) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let n = op.iterator_kinds.len();

    if op.trip_counts.len() != n {
        diags.push(Diagnostic::new(
            "trip_counts",
            format!("{} trip counts for {} iterators", op.trip_counts.len(), n),
        ));
    }
    for (d, &t) in op.trip_counts.iter().enumerate() {
        if t == 0 {
            diags.push(Diagnostic::new(format!("trip_counts[{d}]"), "trip count must be positive"));
        }
    }

    let mut seen = BTreeSet::new();
    let num_inputs = op.inputs.len();
    for (idx, operand) in op.operands().enumerate() {
        let field = if idx < num_inputs {
            format!("inputs[{idx}]")
        } else {
            "output".to_string()
        };
        let map = &operand.map;
        if map.num_dims != n {
            diags.push(Diagnostic::new(
                format!("{field}.map.num_dims"),
                format!("map has {} dims, op has {}", map.num_dims, n),
            ));
        }
        if map.results.len() != operand.shape.len() {
            diags.push(Diagnostic::new(
                format!("{field}.map.results"),
                format!(
                    "{} results for tensor `{}` of rank {}",
                    map.results.len(),
                    operand.tensor,
                    operand.shape.len()
                ),
            ));
        }
        for (r, e) in map.results.iter().enumerate() {
            let rf = format!("{field}.map.results[{r}]");
            if e.terms.len() > MAX_TERMS {
                diags.push(Diagnostic::new(
                    &rf,
                    format!("{} iterator terms, at most {MAX_TERMS} supported", e.terms.len()),
                ));
            }
            let mut dims = BTreeSet::new();
            let mut in_range = true;
            for t in &e.terms {
                if t.dim >= n {
                    in_range = false;
                    diags.push(Diagnostic::new(&rf, format!("d{} out of range (num_dims = {n})", t.dim)));
                } else {
                    seen.insert(t.dim);
                }
                if !dims.insert(t.dim) {
                    diags.push(Diagnostic::new(&rf, format!("d{} appears twice", t.dim)));
                }
                if t.coeff < 1 {
                    diags.push(Diagnostic::new(&rf, format!("coefficient {} of d{} must be >= 1", t.coeff, t.dim)));
                }
            }
            if e.constant < 0 {
                diags.push(Diagnostic::new(&rf, "negative constant offset"));
            }
            if idx == num_inputs {
                for d in e.dims().filter(|&d| d < n) {
                    if op.iterator_kinds[d] == IteratorKind::Reduction {
                        diags.push(Diagnostic::new(&rf, format!("reduction dimension d{d} in output map")));
                    }
                }
            }
            if in_range && op.trip_counts.len() == n {
                if let Some(&extent) = operand.shape.get(r) {
                    if e.max_value(&op.trip_counts) >= extent as i64 {
                        diags.push(Diagnostic::new(
                            &rf,
                            format!("access `{e}` exceeds extent {extent} of `{}`", operand.tensor),
                        ));
                    }
                }
            }
        }
        if operand.shape.is_empty() || operand.shape.contains(&0) {
            diags.push(Diagnostic::new(format!("{field}.shape"), "shape must be non-empty with positive extents"));
        }
    }
    for d in 0..n {
        if !seen.contains(&d) {
            diags.push(Diagnostic::new("iterator_kinds", format!("d{d} appears in no indexing map")));
        }
    }

    let mut payload_diags = Vec::new();
    check_payload(&op.payload, num_inputs, &mut payload_diags);
    diags.extend(payload_diags);
    if op.payload.acc_refs() > 1 {
        diags.push(Diagnostic::new("payload", "more than one accumulator reference"));
    }
    diags
}

fn check_payload(e: &PayloadExpr, num_inputs: usize, diags: &mut Vec<Diagnostic>) {
    match e {
        PayloadExpr::Input(i) if *i >= num_inputs => diags.push(Diagnostic::new(
            "payload",
            format!("input {i} out of range ({num_inputs} inputs)"),
        )),
        PayloadExpr::Const(c) if i8::try_from(*c).is_err() => {
            diags.push(Diagnostic::new("payload", format!("constant {c} is not an 8-bit leaf")))
        }
        PayloadExpr::Mul(a, b) | PayloadExpr::Add(a, b) | PayloadExpr::Max(a, b) => {
            check_payload(a, num_inputs, diags);
            check_payload(b, num_inputs, diags);
        }
        PayloadExpr::ClampToI8(a) => check_payload(a, num_inputs, diags),
        _ => {}
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Canonical 3x3 convolution on a 1x3x8x8 input with 4 filters.
    pub(crate) fn conv_op() -> GenericOp {
        use IteratorKind::*;
        GenericOp {
            op_id: "conv".into(),
            inputs: vec![
                Operand::new(
                    "x",
                    vec![1, 3, 8, 8],
                    IndexingMap::new(
                        7,
                        vec![
                            AffineExpr::dim(0),
                            AffineExpr::dim(4),
                            AffineExpr::sum(2, 1, 5, 1),
                            AffineExpr::sum(3, 1, 6, 1),
                        ],
                    ),
                ),
                Operand::new(
                    "w",
                    vec![4, 3, 3, 3],
                    IndexingMap::new(7, vec![AffineExpr::dim(1), AffineExpr::dim(4), AffineExpr::dim(5), AffineExpr::dim(6)]),
                ),
            ],
            output: Operand::new(
                "y",
                vec![1, 4, 6, 6],
                IndexingMap::new(7, (0..4).map(AffineExpr::dim).collect()),
            ),
            iterator_kinds: vec![Parallel, Parallel, Parallel, Parallel, Reduction, Reduction, Reduction],
            trip_counts: vec![1, 4, 6, 6, 3, 3, 3],
            payload: PayloadExpr::mac(),
        }
    }

    #[test]
    fn eval_examples() {
        let e = AffineExpr::sum(2, 1, 5, 1);
        assert_eq!(eval_affine(&e, &[0, 0, 3, 0, 0, 1]).unwrap(), 4);
        let e = AffineExpr::sum(1, 2, 3, 3);
        assert_eq!(eval_affine(&e, &[0, 2, 0, 1]).unwrap(), 7);
        assert_eq!(eval_affine(&AffineExpr::dim(0), &[0]).unwrap(), 0);
    }

    #[test]
    fn eval_missing_dim() {
        let e = AffineExpr::dim(3);
        assert_eq!(
            eval_affine(&e, &[1, 2]),
            Err(IrError::MissingDimValue { dim: 3, supplied: 2 })
        );
    }

    #[test]
    fn identity_maps() {
        assert!(is_identity_map(&IndexingMap::identity(4)));
        let m = IndexingMap::new(3, vec![AffineExpr::dim(0), AffineExpr::dim(2)]);
        assert!(!is_identity_map(&m));
        let m = IndexingMap::new(2, vec![AffineExpr::scaled(0, 2), AffineExpr::dim(1)]);
        assert!(!is_identity_map(&m));
        let m = IndexingMap::new(1, vec![AffineExpr::dim(0).with_constant(1)]);
        assert!(!is_identity_map(&m));
    }

    #[test]
    fn validate_well_formed_conv() {
        assert_eq!(validate_op(&conv_op()), vec![]);
    }

    #[test]
    fn validate_out_of_range_dim() {
        use IteratorKind::*;
        let op = GenericOp {
            op_id: "bad".into(),
            inputs: vec![Operand::new(
                "x",
                vec![4, 4, 4, 8],
                IndexingMap::new(4, vec![AffineExpr::dim(0), AffineExpr::dim(1), AffineExpr::dim(2), AffineExpr::dim(7)]),
            )],
            output: Operand::new(
                "y",
                vec![4, 4, 4, 4],
                IndexingMap::identity(4),
            ),
            iterator_kinds: vec![Parallel; 4],
            trip_counts: vec![4; 4],
            payload: PayloadExpr::input(0),
        };
        let diags = validate_op(&op);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].message.contains("d7 out of range"));
        assert_eq!(diags[0].field, "inputs[0].map.results[3]");
    }

    #[test]
    fn validate_reduction_in_output() {
        let mut op = conv_op();
        op.output.map.results[3] = AffineExpr::dim(6);
        op.output.shape[3] = 3;
        let diags = validate_op(&op);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].message.contains("reduction dimension d6"));
    }

    #[test]
    fn validate_rejects_three_terms_and_negative_coeff() {
        let mut op = conv_op();
        op.inputs[0].map.results[2] = AffineExpr {
            terms: vec![
                Term { dim: 2, coeff: 1 },
                Term { dim: 5, coeff: 1 },
                Term { dim: 1, coeff: 1 },
            ],
            constant: 0,
        };
        assert!(validate_op(&op).iter().any(|d| d.message.contains("iterator terms")));
        let mut op = conv_op();
        op.inputs[0].map.results[2].terms[1].coeff = -1;
        assert!(validate_op(&op).iter().any(|d| d.message.contains("must be >= 1")));
    }

    #[test]
    fn validate_unused_dim_and_payload() {
        let mut op = conv_op();
        op.inputs[1].map.results[3] = AffineExpr::dim(5);
        op.inputs[0].map.results[3] = AffineExpr::dim(3);
        op.inputs[0].shape[3] = 6;
        let diags = validate_op(&op);
        assert!(diags.iter().any(|d| d.message.contains("d6 appears in no indexing map")), "{diags:?}");

        let mut op = conv_op();
        op.payload = PayloadExpr::add(PayloadExpr::Acc, PayloadExpr::add(PayloadExpr::Acc, PayloadExpr::input(2)));
        let diags = validate_op(&op);
        assert_eq!(diags.len(), 2, "{diags:?}");
    }

    #[test]
    fn payload_eval_and_counts() {
        let p = PayloadExpr::mac();
        assert_eq!(p.eval(&[3, -4], 10).unwrap(), -2);
        assert_eq!(p.op_counts(), PayloadOps { mul: 1, add: 1, max: 0, clamp: 0 });
        let relu = PayloadExpr::max(PayloadExpr::input(0), PayloadExpr::Const(0));
        assert_eq!(relu.eval(&[-5], 0).unwrap(), 0);
        let add = PayloadExpr::clamp(PayloadExpr::add(PayloadExpr::input(0), PayloadExpr::input(1)));
        assert_eq!(add.eval(&[100, 100], 0).unwrap(), 127);
        assert_eq!(PayloadExpr::mac().eval(&[2, 2], i32::MAX), Err(IrError::Overflow));
    }

    #[test]
    fn display_forms() {
        assert_eq!(AffineExpr::sum(2, 2, 5, 3).to_string(), "d2 * 2 + d5 * 3");
        assert_eq!(AffineExpr::dim(1).with_constant(2).to_string(), "d1 + 2");
        assert_eq!(IndexingMap::identity(2).to_string(), "(d0, d1) -> (d0, d1)");
    }

    fn small_expr() -> impl Strategy<Value = AffineExpr> {
        (0usize..4, 1i64..5, 0usize..4, 1i64..5, 0i64..4, any::<bool>()).prop_map(
            |(a, ca, b, cb, k, two)| {
                if two && a != b {
                    AffineExpr::sum(a, ca, b, cb).with_constant(k)
                } else {
                    AffineExpr::scaled(a, ca).with_constant(k)
                }
            },
        )
    }

    proptest! {
        #[test]
        fn eval_is_linear(e in small_expr(),
                          a in proptest::collection::vec(-50i64..50, 4),
                          b in proptest::collection::vec(-50i64..50, 4)) {
            let ab: Vec<i64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = eval_affine(&e, &ab).unwrap() - eval_affine(&e, &b).unwrap();
            prop_assert_eq!(lhs, eval_affine(&e, &a).unwrap() - e.constant);
        }

        #[test]
        fn identity_selects_each_value(n in 1usize..7, v in proptest::collection::vec(-100i64..100, 7)) {
            let m = IndexingMap::identity(n);
            prop_assert!(is_identity_map(&m));
            let vals = &v[..n];
            prop_assert_eq!(m.eval(vals).unwrap(), vals.to_vec());
        }
    }
}
