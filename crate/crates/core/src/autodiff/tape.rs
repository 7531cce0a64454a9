use super::ops::{self, OpKind};
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a tensor owned by a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    op: OpKind,
    inputs: Vec<Var>,
    output: Var,
    saved: Vec<f64>,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order because
/// an operator can only consume handles that already exist.
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, t: Tensor) -> Var {
        self.tensors.push(t);
        Var(self.tensors.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false))
    }

    /// Copies a parameter into the tape. Only `trainable` bindings collect
    /// gradients for [`Tape::accumulate_into`].
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let t = store.get(id).tensor.clone();
        if trainable {
            let mut t = t.with_grad(true);
            t.zero_grad();
            let v = self.push(t);
            self.bindings.push((v, id));
            v
        } else {
            self.constant(t)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.tensors[v.0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.tensors[v.0].grad()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Input handles of node `i`, in recording order.
    pub fn node_inputs(&self, i: usize) -> (&[Var], Var) {
        (&self.nodes[i].inputs, self.nodes[i].output)
    }

    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.tensors[v.0]).collect();
        let fwd = ops::forward(&op, &refs)?;
        let requires_grad = refs.iter().any(|t| t.requires_grad());
        let out = Tensor::new(&fwd.shape, fwd.values)?.with_grad(requires_grad);
        let output = self.push(out);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            output,
            saved: fwd.saved,
        });
        Ok(output)
    }

    /// Adds d(loss)/d(t) into the gradient slot of every `requires_grad`
    /// tensor on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lt = &self.tensors[loss.0];
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        adj[loss.0] = Some(vec![1.0]);
        for node in self.nodes[..].iter().rev() {
            let Some(gout) = adj[node.output.0].take() else {
                continue;
            };
            if !self.tensors[node.output.0].requires_grad() {
                continue;
            }
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.tensors[v.0].requires_grad())
                .collect();
            let refs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.tensors[v.0]).collect();
            let grads = ops::backward(
                &node.op,
                &refs,
                &self.tensors[node.output.0],
                &node.saved,
                &gout,
                &need,
            );
            for ((v, g), needed) in node.inputs.iter().zip(grads).zip(&need) {
                let (Some(g), true) = (g, *needed) else {
                    continue;
                };
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            // Keep the output adjoint so callers can inspect intermediate grads.
            adj[node.output.0] = Some(gout);
        }
        for (t, a) in self.tensors.iter_mut().zip(adj) {
            if let (Some(a), true) = (a, t.requires_grad()) {
                t.grad_mut().iter_mut().zip(&a).for_each(|(g, d)| *g += d);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of trainable bindings into the parameter store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(v, id) in &self.bindings {
            let g = self.tensors[v.0].grad();
            store
                .get_mut(id)
                .tensor
                .grad_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let op = OpKind::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::AvgPool2, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::AddBias, &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(
            OpKind::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn entropy(&mut self, p: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Entropy, &[p])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::SliceBatch { start, len }, &[x])
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::ConcatBatch, xs)
    }
}
