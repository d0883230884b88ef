//! Define-by-run reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is created per forward pass. Operations whose operands require
//! gradients are appended to it; [`backward`] replays the tape in reverse.
//! [`Tensor::detach`] returns a value-identical tensor with no link to the
//! tape, which is how the detector stops gradient flow into a frozen backbone.

mod kernels;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use kernels::conv_out_dim;

/// Identifies a trainable parameter across tapes, optimizer state and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// Row-major n-dimensional array. Values are immutable once constructed and
/// shared between clones.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != values.len() {
            return Err(Error::ValueCount {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            node: None,
            requires_grad: false,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("1-d shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    /// Value-identical tensor with no gradient linkage to this one's producers.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
            requires_grad: false,
        }
    }
}

/// Built-in differentiable primitives. Attributes travel with the variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Primitive {
    /// Elementwise sum; the right operand may be a trailing-dimension suffix
    /// of the left one (bias add).
    Add,
    Multiply,
    /// `[m, k] x [k, n]`.
    Matmul,
    /// Operands `[input NCHW, weight OCKK]` or `[input, weight, bias O]`; no padding.
    Conv2d {
        stride: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    /// `[n, d1, d2, ...]` to `[n, d1*d2*...]`.
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    Mean,
    Sum,
}

/// Loose attribute bag used when a primitive is named at runtime.
#[derive(Debug, Clone, Default)]
pub struct PrimitiveAttrs {
    pub stride: Option<usize>,
    pub kernel: Option<usize>,
    pub shape: Option<Vec<usize>>,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::Matmul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::Flatten => "flatten",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
        }
    }

    pub fn from_name(name: &str, attrs: &PrimitiveAttrs) -> Result<Self> {
        let missing = |what: &str| Error::InvalidAttr {
            op: "primitive",
            msg: format!("`{name}` requires `{what}`"),
        };
        Ok(match name {
            "add" => Primitive::Add,
            "multiply" => Primitive::Multiply,
            "matmul" => Primitive::Matmul,
            "conv2d" => Primitive::Conv2d {
                stride: attrs.stride.unwrap_or(1),
            },
            "relu" => Primitive::Relu,
            "maxpool2d" => {
                let kernel = attrs.kernel.ok_or_else(|| missing("kernel"))?;
                Primitive::MaxPool2d {
                    kernel,
                    stride: attrs.stride.unwrap_or(kernel),
                }
            }
            "flatten" => Primitive::Flatten,
            "reshape" => Primitive::Reshape {
                shape: attrs.shape.clone().ok_or_else(|| missing("shape"))?,
            },
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }

    /// Evaluates without recording anything.
    pub fn forward(&self, operands: &[&Tensor]) -> Result<Tensor> {
        kernels::forward(self, operands)
    }

    pub fn output_shape(&self, operands: &[&Tensor]) -> Result<Vec<usize>> {
        kernels::output_shape(self, operands)
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` returns one gradient per input (same length as that input);
/// gradients for inputs that do not require them are discarded.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf(ParamId),
    Builtin(Primitive),
    Custom(Arc<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    operands: Vec<Tensor>,
    output: Tensor,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Append-only record of one forward pass; append order is topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a gradient-receiving leaf identified by `id`.
    pub fn watch(&mut self, t: &Tensor, id: ParamId) -> Tensor {
        let out = t.detach();
        let index = self.push(Node {
            op: Op::Leaf(id),
            inputs: Vec::new(),
            operands: Vec::new(),
            output: out.clone(),
        });
        self.link(out, index)
    }

    pub fn param(&mut self, id: ParamId, shape: &[usize], values: &[f64]) -> Result<Tensor> {
        let t = Tensor::new(shape.to_vec(), values.to_vec())?;
        Ok(self.watch(&t, id))
    }

    pub fn apply(&mut self, prim: Primitive, operands: &[&Tensor]) -> Result<Tensor> {
        let out = kernels::forward(&prim, operands)?;
        self.record(Op::Builtin(prim), operands, out)
    }

    pub fn apply_custom(&mut self, op: Arc<dyn CustomOp>, operands: &[&Tensor]) -> Result<Tensor> {
        let out = op.forward(operands)?;
        self.record(Op::Custom(op), operands, out)
    }

    fn record(&mut self, op: Op, operands: &[&Tensor], out: Tensor) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(operands.len());
        for t in operands {
            inputs.push(self.resolve(t)?);
        }
        if inputs.iter().all(Option::is_none) {
            return Ok(out);
        }
        let index = self.push(Node {
            op,
            inputs,
            operands: operands.iter().map(|t| t.detach()).collect(),
            output: out.detach(),
        });
        Ok(self.link(out, index))
    }

    fn resolve(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            Some(node) if node.tape != self.id => Err(Error::ForeignTensor),
            Some(node) if t.requires_grad => Ok(Some(node.index)),
            _ => Ok(None),
        }
    }

    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn link(&self, mut t: Tensor, index: usize) -> Tensor {
        t.node = Some(NodeRef {
            tape: self.id,
            index,
        });
        t.requires_grad = true;
        t
    }
}

/// Parameter gradients, ordered by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<ParamId, Tensor>);

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.0.insert(id, grad);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor> {
        self.0.remove(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(&id, t)| (id, t))
    }

    /// Keeps only the entries for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.0.retain(|&id, _| keep(id));
    }
}

impl FromIterator<(ParamId, Tensor)> for Gradients {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Reverse pass from a one-element `loss`. Leaves that the loss does not reach
/// are absent from the result.
pub fn backward(loss: &Tensor, tape: &Tape) -> Result<Gradients> {
    if tape.is_empty() {
        return Err(Error::EmptyTape);
    }
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let Some(root) = tape.resolve(loss)? else {
        return Ok(Gradients::new());
    };

    let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; root + 1];
    adjoint[root] = Some(vec![1.0]);
    let mut grads: BTreeMap<ParamId, (Vec<usize>, Vec<f64>)> = BTreeMap::new();

    for index in (0..=root).rev() {
        let Some(grad) = adjoint[index].take() else {
            continue;
        };
        let node = &tape.nodes[index];
        let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
        let input_grads = match &node.op {
            Op::Leaf(id) => {
                match grads.get_mut(id) {
                    Some((_, acc)) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => {
                        grads.insert(*id, (node.output.shape().to_vec(), grad));
                    }
                }
                continue;
            }
            Op::Builtin(prim) => {
                kernels::backward(prim, &node.operands, node.output.shape(), &grad, &needs)
            }
            Op::Custom(op) => op
                .backward(&node.operands, &node.output, &grad)
                .into_iter()
                .zip(&needs)
                .map(|(g, &need)| need.then_some(g))
                .collect(),
        };
        for (input, g) in node.inputs.iter().zip(input_grads) {
            let (Some(input), Some(g)) = (input, g) else {
                continue;
            };
            match &mut adjoint[*input] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    grads
        .into_iter()
        .map(|(id, (shape, g))| Ok((id, Tensor::new(shape, g)?)))
        .collect()
}
