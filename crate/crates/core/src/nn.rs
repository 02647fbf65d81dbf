//! Small dense numerics: activations, losses, a flat parameter store,
//! dot-product attention and one-hidden-layer feed-forward heads, each
//! with a hand-written backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += term_weights * x`
pub fn axpy(term_weights: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += term_weights * xi;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + ln(logits.iter().map(|&z| libm::exp(z - max)).sum::<f64>())
}

/// Binary cross-entropy of a logit against a {0,1} target, and its derivative.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + libm::log1p(libm::exp(-logit.abs()));
    (loss, sigmoid(logit) - target)
}

/// Binary cross-entropy of a probability against a {0,1} target.
pub fn bce(p: f64, target: f64) -> f64 {
    -(target * ln(p) + (1.0 - target) * ln(1.0 - p))
}

/// Cross-entropy of logits against a class index. Returns the loss and the
/// softmax, whose value minus the one-hot target is the logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[label];
    (loss, softmax(logits))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `out = W x` for a row-major `rows x cols` matrix.
pub fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `dx += W^T dy`
pub fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, &w[r * cols..(r + 1) * cols], dx);
        }
    }
}

/// `dW += dy x^T`
pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, &mut dw[r * cols..(r + 1) * cols]);
        }
    }
}

/// Handle to a named block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Block(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable parameters of a model in one row-major buffer.
///
/// Gradients use a plain `Vec<f64>` of the same length, addressed through
/// the same block handles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    blocks: Vec<BlockInfo>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-filled `rows x cols` block.
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Block {
        let offset = self.data.len();
        self.data.resize(offset + rows * cols, 0.0);
        self.blocks.push(BlockInfo {
            name: name.into(),
            rows,
            cols,
            offset,
        });
        Block(self.blocks.len() - 1)
    }

    pub fn init_uniform(&mut self, block: Block, scale: f64, rng: &mut Rng) {
        for x in self.get_mut(block) {
            *x = rng.gen_range(-scale..scale);
        }
    }

    pub fn info(&self, block: Block) -> &BlockInfo {
        &self.blocks[block.0]
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<Block> {
        self.blocks.iter().position(|b| b.name == name).map(Block)
    }

    pub fn get(&self, block: Block) -> &[f64] {
        let b = &self.blocks[block.0];
        &self.data[b.offset..b.offset + b.len()]
    }

    pub fn get_mut(&mut self, block: Block) -> &mut [f64] {
        let b = &self.blocks[block.0];
        &mut self.data[b.offset..b.offset + b.len()]
    }

    /// The slice of a gradient buffer belonging to `block`.
    pub fn grad<'g>(&self, grads: &'g [f64], block: Block) -> &'g [f64] {
        let b = &self.blocks[block.0];
        &grads[b.offset..b.offset + b.len()]
    }

    pub fn grad_mut<'g>(&self, grads: &'g mut [f64], block: Block) -> &'g mut [f64] {
        let b = &self.blocks[block.0];
        &mut grads[b.offset..b.offset + b.len()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Plain gradient step `params -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) {
        axpy(-lr, grads, &mut self.data);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies a block of the same name and shape from `other`.
    pub fn copy_block_from(&mut self, block: Block, other: &ParamStore) -> Result<()> {
        let info = self.info(block).clone();
        let src = other
            .find(&info.name)
            .ok_or_else(|| Error::Shape(format!("source has no block `{}`", info.name)))?;
        let src_info = other.info(src);
        if (src_info.rows, src_info.cols) != (info.rows, info.cols) {
            return Err(Error::Shape(format!(
                "block `{}` is {}x{} in the source but {}x{} here",
                info.name, src_info.rows, src_info.cols, info.rows, info.cols
            )));
        }
        self.get_mut(block).copy_from_slice(other.get(src));
        Ok(())
    }

    /// Replaces the buffer wholesale; used when loading serialized parameters.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.data.len(),
                data.len()
            )));
        }
        self.data = data;
        Ok(())
    }
}

/// Output of [`attend`].
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Dot-product attention of one query over a row-major sequence of
/// `width`-wide value vectors.
pub fn attend(query: &[f64], values: &[f64], width: usize) -> Result<Attention> {
    if query.len() != width {
        return Err(Error::Shape(format!(
            "query width {} does not match value width {width}",
            query.len()
        )));
    }
    if width == 0 || values.len() % width != 0 {
        return Err(Error::Shape(format!(
            "value buffer of {} entries is not a sequence of width {width}",
            values.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::Shape(String::from("attention over an empty sequence")));
    }
    let scores: Vec<f64> = values.chunks_exact(width).map(|v| dot(query, v)).collect();
    let weights = softmax(&scores);
    let mut context = vec![0.0; width];
    for (w, v) in weights.iter().zip(values.chunks_exact(width)) {
        axpy(*w, v, &mut context);
    }
    Ok(Attention { context, weights })
}

/// Accumulates gradients of [`attend`] with respect to query and values.
pub fn attend_backward(
    query: &[f64],
    values: &[f64],
    att: &Attention,
    dcontext: &[f64],
    dquery: &mut [f64],
    dvalues: &mut [f64],
) {
    let width = query.len();
    let dc_dot_c = dot(dcontext, &att.context);
    for (j, v) in values.chunks_exact(width).enumerate() {
        let w = att.weights[j];
        let dscore = w * (dot(dcontext, v) - dc_dot_c);
        let dv = &mut dvalues[j * width..(j + 1) * width];
        axpy(w, dcontext, dv);
        axpy(dscore, query, dv);
        axpy(dscore, v, dquery);
    }
}

/// Parameter views of a feed-forward unit with one `tanh` hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl<'a> HeadParams<'a> {
    pub fn check(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.input
            && self.b1.len() == self.hidden
            && self.w2.len() == self.output * self.hidden
            && self.b2.len() == self.output;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(String::from("head parameter blocks have inconsistent sizes")))
        }
    }

    /// Hidden activations and output logits.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = vec![0.0; self.hidden];
        matvec(self.w1, self.input, x, &mut hidden);
        for (h, b) in hidden.iter_mut().zip(self.b1) {
            *h = tanh(*h + b);
        }
        let mut logits = vec![0.0; self.output];
        matvec(self.w2, self.hidden, &hidden, &mut logits);
        for (z, b) in logits.iter_mut().zip(self.b2) {
            *z += b;
        }
        (hidden, logits)
    }
}

/// Block handles of a [`HeadParams`] unit living in a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadBlocks {
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl HeadBlocks {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), hidden, input),
            b1: store.add(format!("{prefix}.b1"), 1, hidden),
            w2: store.add(format!("{prefix}.w2"), output, hidden),
            b2: store.add(format!("{prefix}.b2"), 1, output),
            input,
            hidden,
            output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.init_uniform(self.w1, 1.0 / libm::sqrt(self.input as f64), rng);
        store.init_uniform(self.w2, 1.0 / libm::sqrt(self.hidden as f64), rng);
    }

    pub fn view<'a>(&self, store: &'a ParamStore) -> HeadParams<'a> {
        HeadParams {
            w1: store.get(self.w1),
            b1: store.get(self.b1),
            w2: store.get(self.w2),
            b2: store.get(self.b2),
            input: self.input,
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Backward through one forward call: accumulates parameter gradients
    /// and `dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        hidden: &[f64],
        dlogits: &[f64],
        grads: &mut [f64],
        dx: &mut [f64],
    ) {
        let p = self.view(store);
        outer_acc(store.grad_mut(grads, self.w2), dlogits, hidden);
        axpy(1.0, dlogits, store.grad_mut(grads, self.b2));
        let mut dhidden = vec![0.0; self.hidden];
        matvec_t_acc(p.w2, self.hidden, dlogits, &mut dhidden);
        for (dh, h) in dhidden.iter_mut().zip(hidden) {
            *dh *= 1.0 - h * h;
        }
        outer_acc(store.grad_mut(grads, self.w1), &dhidden, x);
        axpy(1.0, &dhidden, store.grad_mut(grads, self.b1));
        matvec_t_acc(p.w1, self.input, &dhidden, dx);
    }
}
