//! Feed-forward base encoder and projection head with hand-written backprop.
//!
//! The encoder is a stack of dense layers `x -> h` with ReLU between hidden
//! layers and a linear output. The projection head maps `h` to the
//! contrastive space as `v = normalize(W2 · relu(W1 · h))` and carries no
//! biases. At test time only the encoder is used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{check_dims, dot, norm, Embedding, Matrix, ZERO_NORM};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    /// Widths of the hidden encoder layers (may be empty).
    pub hidden: Vec<usize>,
    /// Encoder output width.
    pub embed: usize,
    /// Projection head hidden width.
    pub head_hidden: usize,
    /// Projection output width.
    pub proj: usize,
}

impl EncoderDims {
    pub fn new(input: usize, hidden: Vec<usize>, embed: usize) -> Self {
        EncoderDims {
            input,
            hidden,
            embed,
            head_hidden: embed,
            proj: 128.min(embed),
        }
    }

    pub fn with_head(mut self, head_hidden: usize, proj: usize) -> Self {
        self.head_hidden = head_hidden;
        self.proj = proj;
        self
    }

    fn validate(&self) -> Result<()> {
        let widths = [self.input, self.embed, self.head_hidden, self.proj];
        if widths.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "all layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each encoder layer in order.
    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.embed);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }
}

/// Scalar logit attached to the encoder output, used by the cross-entropy
/// baselines. Positive logits favour the normal class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LogitHead {
    pub fn logit(&self, h: &Embedding) -> Result<f64> {
        check_dims("logit head", self.weight.len(), h.dim())?;
        Ok(dot(&self.weight, h.as_slice()) + self.bias)
    }
}

/// All trainable weights. The same shape doubles as a gradient or momentum
/// buffer via [`EncoderParams::zeros_like`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    pub layers: Vec<DenseLayer>,
    /// `head_hidden × embed`.
    pub head_w1: Matrix,
    /// `proj × head_hidden`.
    pub head_w2: Matrix,
    pub logit_head: Option<LogitHead>,
}

fn glorot(rng: &mut ChaCha8Rng, m: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in m {
        *w = rng.random_range(-limit..limit);
    }
}

impl EncoderParams {
    /// Glorot-uniform weights and zero biases, seeded.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        for layer in &mut p.layers {
            let (out, inp) = layer.weight.shape();
            glorot(&mut rng, layer.weight.as_mut_slice(), inp, out);
        }
        let (hh, e) = p.head_w1.shape();
        glorot(&mut rng, p.head_w1.as_mut_slice(), e, hh);
        let (pr, hh) = p.head_w2.shape();
        glorot(&mut rng, p.head_w2.as_mut_slice(), hh, pr);
        Ok(p)
    }

    /// Adds a freshly initialised logit head drawn from its own seeded stream.
    pub fn with_logit_head(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_10C1);
        let mut weight = vec![0.0; self.dims.embed];
        glorot(&mut rng, &mut weight, self.dims.embed, 1);
        self.logit_head = Some(LogitHead { weight, bias: 0.0 });
        self
    }

    fn zeros(dims: EncoderDims) -> Self {
        let layers = dims
            .encoder_shapes()
            .into_iter()
            .map(|(i, o)| DenseLayer::zeros(i, o))
            .collect();
        EncoderParams {
            head_w1: Matrix::zeros(dims.head_hidden, dims.embed),
            head_w2: Matrix::zeros(dims.proj, dims.head_hidden),
            layers,
            logit_head: None,
            dims,
        }
    }

    /// Assembles parameters from explicit tensors, checking that shapes chain.
    pub fn from_parts(
        layers: Vec<DenseLayer>,
        head_w1: Matrix,
        head_w2: Matrix,
        logit_head: Option<LogitHead>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("encoder needs at least one layer".into()))?;
        let input = first.weight.cols();
        let mut width = input;
        let mut hidden = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            check_dims("encoder layer input", width, l.weight.cols())?;
            check_dims("encoder layer bias", l.weight.rows(), l.bias.len())?;
            width = l.weight.rows();
            if i + 1 < layers.len() {
                hidden.push(width);
            }
        }
        check_dims("projection W1 input", width, head_w1.cols())?;
        check_dims("projection W2 input", head_w1.rows(), head_w2.cols())?;
        if let Some(lh) = &logit_head {
            check_dims("logit head", width, lh.weight.len())?;
        }
        let dims = EncoderDims {
            input,
            hidden,
            embed: width,
            head_hidden: head_w1.rows(),
            proj: head_w2.rows(),
        };
        dims.validate()?;
        let p = EncoderParams {
            dims,
            layers,
            head_w1,
            head_w2,
            logit_head,
        };
        if !p.is_finite() {
            return Err(Error::NonFinite("encoder weights".into()));
        }
        Ok(p)
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    /// Zero-filled buffer with identical shapes, including the logit head if present.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims.clone());
        z.logit_head = self.logit_head.as_ref().map(|lh| LogitHead {
            weight: vec![0.0; lh.weight.len()],
            bias: 0.0,
        });
        z
    }

    /// Every tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 4);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.head_w1.as_slice());
        out.push(self.head_w2.as_slice());
        if let Some(lh) = &self.logit_head {
            out.push(&lh.weight);
            out.push(std::slice::from_ref(&lh.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 4);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.head_w1.as_mut_slice());
        out.push(self.head_w2.as_mut_slice());
        if let Some(lh) = &mut self.logit_head {
            out.push(&mut lh.weight);
            out.push(std::slice::from_mut(&mut lh.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Whether `other` can be used as a gradient/momentum buffer for `self`.
    pub fn congruent(&self, other: &EncoderParams) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        debug_assert!(self.congruent(other));
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Encoder forward pass `h = f(x)`.
    pub fn encode(&self, x: &[f64]) -> Result<(Embedding, ForwardTrace)> {
        Ok(self.encode_batch(&[x])?.pop().expect("one input, one output"))
    }

    /// [`encode`](Self::encode) over many inputs at once; each weight matrix
    /// is streamed once per batch instead of once per input. Results are
    /// bit-identical to per-input calls.
    pub fn encode_batch(&self, xs: &[&[f64]]) -> Result<Vec<(Embedding, ForwardTrace)>> {
        for x in xs {
            check_dims("encode input", self.dims.input, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder input".into()));
            }
        }
        let mut acts: Vec<Vec<Vec<f64>>> = xs.iter().map(|x| vec![x.to_vec()]).collect();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs: Vec<&[f64]> = acts.iter().map(|a| a[i].as_slice()).collect();
            let zs = layer.weight.matvec_many(&inputs)?;
            for (a, mut z) in acts.iter_mut().zip(zs) {
                for (zi, b) in z.iter_mut().zip(&layer.bias) {
                    *zi += b;
                }
                if i < last {
                    relu_in_place(&mut z);
                }
                a.push(z);
            }
        }
        Ok(acts
            .into_iter()
            .map(|activations| {
                let h = Embedding::new(activations[last + 1].clone());
                (
                    h,
                    ForwardTrace {
                        activations,
                        head: None,
                    },
                )
            })
            .collect())
    }

    /// Encoder output only, without keeping a trace.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.encode(x).map(|(h, _)| h)
    }

    /// Projection head `v = normalize(W2 · relu(W1 · h))`.
    pub fn project(&self, h: &Embedding) -> Result<Embedding> {
        let mut t = self.head_forward(&[h.as_slice()])?;
        Ok(Embedding::new(t.pop().expect("one input").v))
    }

    /// Runs the projection head on the traced encoder output and records what
    /// backprop needs.
    pub fn project_traced(&self, trace: &mut ForwardTrace) -> Result<Embedding> {
        self.check_trace(trace)?;
        let head = self.head_forward(&[trace.output()])?.pop().expect("one input");
        let v = Embedding::new(head.v.clone());
        trace.head = Some(head);
        Ok(v)
    }

    /// Full training-time pass `x -> v` with trace.
    pub fn forward(&self, x: &[f64]) -> Result<(Embedding, ForwardTrace)> {
        Ok(self.forward_batch(&[x])?.pop().expect("one input, one output"))
    }

    /// [`forward`](Self::forward) over many inputs; bit-identical to
    /// per-input calls.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<(Embedding, ForwardTrace)>> {
        let mut enc = self.encode_batch(xs)?;
        let hs: Vec<&[f64]> = enc.iter().map(|(h, _)| h.as_slice()).collect();
        let heads = self.head_forward(&hs)?;
        Ok(enc
            .drain(..)
            .zip(heads)
            .map(|((_, mut trace), head)| {
                let v = Embedding::new(head.v.clone());
                trace.head = Some(head);
                (v, trace)
            })
            .collect())
    }

    fn head_forward(&self, hs: &[&[f64]]) -> Result<Vec<HeadTrace>> {
        for h in hs {
            check_dims("project input", self.dims.embed, h.len())?;
        }
        let mut rs = self.head_w1.matvec_many(hs)?;
        for r in &mut rs {
            relu_in_place(r);
        }
        let us = self.head_w2.matvec_many(&slices(&rs))?;
        rs.into_iter()
            .zip(us)
            .map(|(r, u)| {
                let u_norm = norm(&u);
                if !u_norm.is_finite() {
                    return Err(Error::NonFinite("projection output".into()));
                }
                if u_norm < ZERO_NORM {
                    return Err(Error::Degenerate(
                        "projection head output collapsed to zero".into(),
                    ));
                }
                let v = u.iter().map(|x| x / u_norm).collect();
                Ok(HeadTrace { r, u_norm, v })
            })
            .collect()
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        check_dims(
            "trace layer count",
            self.layers.len() + 1,
            trace.activations.len(),
        )?;
        for (layer, a) in self.layers.iter().zip(&trace.activations) {
            check_dims("trace activation width", layer.weight.cols(), a.len())?;
        }
        check_dims("trace output width", self.dims.embed, trace.output().len())
    }

    fn check_grads(&self, grads: &EncoderParams) -> Result<()> {
        if self.congruent(grads) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "gradient buffer does not match parameter shapes".into(),
            ))
        }
    }

    /// Gradients of a scalar objective through `x -> h -> v`, given `∂L/∂v`.
    ///
    /// Returns parameter gradients (logit head, if any, left at zero) and
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_v: &Embedding,
    ) -> Result<(EncoderParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let gx = self.backward_into(trace, grad_v, &mut grads)?;
        Ok((grads, gx))
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_v: &Embedding,
        grads: &mut EncoderParams,
    ) -> Result<Vec<f64>> {
        let mut gx = self.backward_batch_into(&[trace], &[grad_v], grads)?;
        Ok(gx.pop().expect("one trace"))
    }

    /// Accumulates the gradients of many samples into `grads`, in sample
    /// order, and returns each input gradient. Bit-identical to calling
    /// [`backward_into`](Self::backward_into) once per sample.
    pub fn backward_batch_into(
        &self,
        traces: &[&ForwardTrace],
        grad_vs: &[&Embedding],
        grads: &mut EncoderParams,
    ) -> Result<Vec<Vec<f64>>> {
        check_dims("gradient count", traces.len(), grad_vs.len())?;
        self.check_grads(grads)?;
        let mut heads = Vec::with_capacity(traces.len());
        for (trace, gv) in traces.iter().zip(grad_vs) {
            self.check_trace(trace)?;
            heads.push(trace.head.as_ref().ok_or_else(|| {
                Error::InvalidArgument("trace has no projection pass; use project_traced".into())
            })?);
            check_dims("grad_v", self.dims.proj, gv.dim())?;
        }

        // Through the normalization: (I/|u| - u u^T/|u|^3) g = (g - v (v.g)) / |u|.
        let grad_u: Vec<Vec<f64>> = heads
            .iter()
            .zip(grad_vs)
            .map(|(head, gv)| {
                let gv = gv.as_slice();
                let vg = dot(&head.v, gv);
                gv.iter()
                    .zip(&head.v)
                    .map(|(g, v)| (g - v * vg) / head.u_norm)
                    .collect()
            })
            .collect();
        let rs: Vec<&[f64]> = heads.iter().map(|h| h.r.as_slice()).collect();
        grads.head_w2.add_outer_many(&slices(&grad_u), &rs);
        let mut grad_z1 = self.head_w2.matvec_transposed_many(&slices(&grad_u))?;
        for (g, r) in grad_z1.iter_mut().zip(&rs) {
            relu_mask(g, r);
        }
        let outputs: Vec<&[f64]> = traces.iter().map(|t| t.output()).collect();
        grads.head_w1.add_outer_many(&slices(&grad_z1), &outputs);
        let grad_h = self.head_w1.matvec_transposed_many(&slices(&grad_z1))?;

        self.backward_encoder_batch_into(traces, &slices(&grad_h), grads)
    }

    /// Backprop from `∂L/∂h` through the encoder layers only.
    pub fn backward_encoder_into(
        &self,
        trace: &ForwardTrace,
        grad_h: &[f64],
        grads: &mut EncoderParams,
    ) -> Result<Vec<f64>> {
        let mut gx = self.backward_encoder_batch_into(&[trace], &[grad_h], grads)?;
        Ok(gx.pop().expect("one trace"))
    }

    /// Batched [`backward_encoder_into`](Self::backward_encoder_into),
    /// accumulating in sample order.
    pub fn backward_encoder_batch_into(
        &self,
        traces: &[&ForwardTrace],
        grad_hs: &[&[f64]],
        grads: &mut EncoderParams,
    ) -> Result<Vec<Vec<f64>>> {
        check_dims("gradient count", traces.len(), grad_hs.len())?;
        self.check_grads(grads)?;
        for (trace, gh) in traces.iter().zip(grad_hs) {
            self.check_trace(trace)?;
            check_dims("grad_h", self.dims.embed, gh.len())?;
        }
        let mut grad: Vec<Vec<f64>> = grad_hs.iter().map(|g| g.to_vec()).collect();
        for l in (0..self.layers.len()).rev() {
            let a_prev: Vec<&[f64]> = traces.iter().map(|t| t.activations[l].as_slice()).collect();
            let g = &mut grads.layers[l];
            g.weight.add_outer_many(&slices(&grad), &a_prev);
            for d in &grad {
                for (gb, di) in g.bias.iter_mut().zip(d) {
                    *gb += di;
                }
            }
            let mut next = self.layers[l].weight.matvec_transposed_many(&slices(&grad))?;
            if l > 0 {
                for (n, a) in next.iter_mut().zip(&a_prev) {
                    relu_mask(n, a);
                }
            }
            grad = next;
        }
        Ok(grad)
    }
}

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn relu_in_place(z: &mut [f64]) {
    for v in z {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose ReLU output was not positive (derivative 0 at 0).
fn relu_mask(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
struct HeadTrace {
    r: Vec<f64>,
    u_norm: f64,
    v: Vec<f64>,
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[x, a_1, ..., h]`.
    activations: Vec<Vec<f64>>,
    head: Option<HeadTrace>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace is never empty")
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len() - 1
    }
}
