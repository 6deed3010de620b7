use super::kernels::{conv3_forward, conv3_weight_grad, deconv_gather, deconv_scatter, flip_conv3_weight};
use super::tensor::{matmul, Scalar, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const DICE_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var },
    Deconv3d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Concat { a: Var, b: Var },
    /// Loss terminals store d(loss)/d(input) at forward time.
    Loss { x: Var, dx: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of tensor operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for backpropagation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape5(s: &[usize], what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(s).map_err(|_| AutodiffError::Shape(format!("{what}: expected rank 5, got {s:?}")))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf; receives a gradient unless the graph is in inference mode.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(t, rg, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 3x3x3 convolution, stride 1, zero padding 1.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c, d, h, wd] = shape5(self.value(x).shape(), "conv3d input")?;
        let [k, wc, k0, k1, k2] = shape5(self.value(w).shape(), "conv3d weight")?;
        if wc != c || [k0, k1, k2] != [3, 3, 3] || self.value(b).shape() != [k] {
            return Err(AutodiffError::Shape(format!(
                "conv3d: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let v = d * h * wd;
        let mut out = vec![T::zero(); n * k * v];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let o = &mut out[i * k * v..(i + 1) * k * v];
                conv3_forward(&xv[i * c * v..(i + 1) * c * v], c, [d, h, wd], wv, k, o, false);
                for (ki, row) in o.chunks_mut(v).enumerate() {
                    let bias = bv[ki];
                    row.iter_mut().for_each(|e| *e = *e + bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, k, d, h, wd], out), rg, Op::Conv3d { x, w, b }))
    }

    /// 4x4x4 transposed convolution, stride 2, padding 1: doubles every spatial extent.
    /// Weight layout is `[C_in, C_out, 4, 4, 4]`.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c, d, h, wd] = shape5(self.value(x).shape(), "deconv3d input")?;
        let [wc, k, k0, k1, k2] = shape5(self.value(w).shape(), "deconv3d weight")?;
        if wc != c || [k0, k1, k2] != [4, 4, 4] || self.value(b).shape() != [k] {
            return Err(AutodiffError::Shape(format!(
                "deconv3d: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let vin = d * h * wd;
        let vout = 8 * vin;
        let rows = k * 64;
        let mut out = vec![T::zero(); n * k * vout];
        let mut cols = vec![T::zero(); rows * vin];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                matmul(rows, c, vin, wv, true, &xv[i * c * vin..(i + 1) * c * vin], false, &mut cols, false);
                let o = &mut out[i * k * vout..(i + 1) * k * vout];
                deconv_scatter(&cols, k, [d, h, wd], o);
                for (ki, row) in o.chunks_mut(vout).enumerate() {
                    let bias = bv[ki];
                    row.iter_mut().for_each(|e| *e = *e + bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, k, 2 * d, 2 * h, 2 * wd], out), rg, Op::Deconv3d { x, w, b }))
    }

    /// 2x2x2 max pooling, stride 2. Ties route the gradient to the first voxel in scan order.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = shape5(self.value(x).shape(), "maxpool3d")?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddExtent(vec![d, h, w]));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                    if xv[i] > xv[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(xv[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, od, oh, ow], out), rg, Op::MaxPool { x, argmax }))
    }

    /// Per-channel batch normalization over `[N, C, ...]`. Training mode uses batch
    /// statistics and updates `stats`; inference mode uses `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Shape(format!("batchnorm: rank {} < 2", shape.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(AutodiffError::Shape(format!("batchnorm: {c} channels vs parameter/statistic shapes")));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let m = n * s;
        let mf = T::from_f64_lossy(m as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            let slices = (0..n).map(|i| (i * c + ch) * s);
            let (mean, var) = if training {
                let mut sum = T::zero();
                for o in slices.clone() {
                    sum = sum + xv[o..o + s].iter().copied().sum::<T>();
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for o in slices.clone() {
                    sq = sq + xv[o..o + s].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / mf;
                let unbiased = if m > 1 { sq / T::from_f64_lossy((m - 1) as f64) } else { var };
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for o in slices {
                for i in o..o + s {
                    let xh = (xv[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out), rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), rg, Op::Sigmoid { x })
    }

    /// Softmax over the channel axis of `[N, C, ...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Shape(format!("softmax: rank {} < 2", shape.len())));
        }
        let out = softmax_data(t.data(), shape[0], shape[1], shape[2..].iter().product());
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out), rg, Op::Softmax { x }))
    }

    /// Concatenate two `[N, C, ...]` tensors along channels (`a` first).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(AutodiffError::Shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let s: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&self.value(b).data()[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out), rg, Op::Concat { a, b }))
    }

    /// Cross entropy of channel-softmax logits `[N, C, ...]`, averaged over the
    /// `ceil(keep_fraction * V)` voxels with the highest loss (ties: lower index first).
    /// The remaining voxels receive zero gradient.
    pub fn bootstrapped_ce(&mut self, logits: Var, target: &[u16], keep_fraction: f64) -> Result<Var> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(AutodiffError::InvalidArgument(format!("keep_fraction {keep_fraction} not in (0, 1]")));
        }
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Shape(format!("bootstrapped_ce: rank {} < 2", shape.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let voxels = n * s;
        if target.len() != voxels {
            return Err(AutodiffError::Shape(format!("target length {} vs {voxels} voxels", target.len())));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(AutodiffError::TargetOutOfRange { value: bad as usize, classes: c });
        }
        let probs = softmax_data(self.value(logits).data(), n, c, s);
        let tiny = T::from_f64_lossy(1e-300_f64.max(T::min_positive_value().to_f64_lossy()));
        let ce: Vec<T> = (0..voxels)
            .map(|vox| {
                let (i, j) = (vox / s, vox % s);
                let t = target[vox] as usize;
                -(probs[(i * c + t) * s + j].max(tiny)).ln()
            })
            .collect();
        let keep = ((keep_fraction * voxels as f64 - 1e-9).ceil() as usize).clamp(1, voxels);
        let mut order: Vec<usize> = (0..voxels).collect();
        let cmp = |a: &usize, b: &usize| ce[*b].partial_cmp(&ce[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
        if keep < voxels {
            order.select_nth_unstable_by(keep - 1, cmp);
            order.truncate(keep);
        }
        order.sort_unstable();
        let kf = T::from_f64_lossy(keep as f64);
        let loss = order.iter().map(|&v| ce[v]).sum::<T>() / kf;
        let mut dx = vec![T::zero(); probs.len()];
        for &vox in &order {
            let (i, j) = (vox / s, vox % s);
            for ch in 0..c {
                let idx = (i * c + ch) * s + j;
                let onehot = if ch == target[vox] as usize { T::one() } else { T::zero() };
                dx[idx] = (probs[idx] - onehot) / kf;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Loss { x: logits, dx }))
    }

    /// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
    pub fn dice_loss(&mut self, prob: Var, target: &[T]) -> Result<Var> {
        let p = self.value(prob).data();
        if p.len() != target.len() {
            return Err(AutodiffError::Shape(format!("dice: {} predictions vs {} targets", p.len(), target.len())));
        }
        let eps = T::from_f64_lossy(DICE_EPS);
        let two = T::from_f64_lossy(2.0);
        let sp: T = p.iter().copied().sum();
        let st: T = target.iter().copied().sum();
        let inter: T = p.iter().zip(target).map(|(&a, &b)| a * b).sum();
        let denom = sp + st + eps;
        let num = two * inter + eps;
        let loss = T::one() - num / denom;
        let dx = target.iter().map(|&t| -(two * t * denom - num) / (denom * denom)).collect();
        let rg = self.rg(prob);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Loss { x: prob, dx }))
    }

    /// `sum(w * x)` for a constant weight vector; used to reduce tensors to scalars.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != weights.len() {
            return Err(AutodiffError::Shape(format!("weighted_sum: {} vs {}", xv.len(), weights.len())));
        }
        let v = xv.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), rg, Op::Loss { x, dx: weights.to_vec() }))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients stay available through
    /// [`Graph::grad`]; intermediate gradients are released as the sweep proceeds.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, op, gy);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: Op<T>, gy: Vec<T>) {
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b } => {
                let [n, c, d, h, wd] = shape5(self.value(x).shape(), "").expect("checked in forward");
                let k = self.value(w).shape()[0];
                let v = d * h * wd;
                let need_x = self.rg(x);
                let mut gw = vec![T::zero(); k * c * 27];
                let mut gb = vec![T::zero(); k];
                let mut gx = if need_x { vec![T::zero(); n * c * v] } else { Vec::new() };
                {
                    let xv = self.value(x).data();
                    // input gradient is a convolution of the output gradient with the flipped kernel
                    let flipped = if need_x { flip_conv3_weight(self.value(w).data(), k, c) } else { Vec::new() };
                    for s in 0..n {
                        let go = &gy[s * k * v..(s + 1) * k * v];
                        for (ki, row) in go.chunks(v).enumerate() {
                            gb[ki] = gb[ki] + row.iter().copied().sum::<T>();
                        }
                        conv3_weight_grad(&xv[s * c * v..(s + 1) * c * v], c, [d, h, wd], go, k, &mut gw);
                        if need_x {
                            conv3_forward(go, k, [d, h, wd], &flipped, c, &mut gx[s * c * v..(s + 1) * c * v], false);
                        }
                    }
                }
                if need_x {
                    self.accumulate(x, gx);
                }
                self.accumulate(w, gw);
                self.accumulate(b, gb);
            }
            Op::Deconv3d { x, w, b } => {
                let [n, c, d, h, wd] = shape5(self.value(x).shape(), "").expect("checked in forward");
                let k = self.value(w).shape()[1];
                let vin = d * h * wd;
                let vout = 8 * vin;
                let rows = k * 64;
                let need_x = self.rg(x);
                let mut gw = vec![T::zero(); c * rows];
                let mut gb = vec![T::zero(); k];
                let mut gx = if need_x { vec![T::zero(); n * c * vin] } else { Vec::new() };
                {
                    let xv = self.value(x).data();
                    let wv = self.value(w).data();
                    let mut cols = vec![T::zero(); rows * vin];
                    for s in 0..n {
                        let go = &gy[s * k * vout..(s + 1) * k * vout];
                        for (ki, row) in go.chunks(vout).enumerate() {
                            gb[ki] = gb[ki] + row.iter().copied().sum::<T>();
                        }
                        deconv_gather(go, k, [d, h, wd], &mut cols);
                        matmul(c, vin, rows, &xv[s * c * vin..(s + 1) * c * vin], false, &cols, true, &mut gw, true);
                        if need_x {
                            matmul(c, rows, vin, wv, false, &cols, false, &mut gx[s * c * vin..(s + 1) * c * vin], false);
                        }
                    }
                }
                if need_x {
                    self.accumulate(x, gx);
                }
                self.accumulate(w, gw);
                self.accumulate(b, gb);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (&src, &g) in argmax.iter().zip(&gy) {
                    gx[src] = gx[src] + g;
                }
                self.accumulate(x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let shape = self.value(x).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let mf = T::from_f64_lossy((n * s) as f64);
                let gv = self.value(gamma).data().to_vec();
                let mut gx = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for i in 0..n {
                        let o = (i * c + ch) * s;
                        for j in o..o + s {
                            sum_dy = sum_dy + gy[j];
                            sum_dy_xh = sum_dy_xh + gy[j] * xhat[j];
                        }
                    }
                    gg[ch] = sum_dy_xh;
                    gbeta[ch] = sum_dy;
                    let scale = gv[ch] * inv_std[ch];
                    for i in 0..n {
                        let o = (i * c + ch) * s;
                        for j in o..o + s {
                            gx[j] = if training {
                                scale * (gy[j] - sum_dy / mf - xhat[j] * sum_dy_xh / mf)
                            } else {
                                scale * gy[j]
                            };
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gamma, gg);
                self.accumulate(beta, gbeta);
            }
            Op::Relu { x } => {
                let gx = self.value(x).data().iter().zip(&gy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(x, gx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let gx = y.iter().zip(&gy).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                self.accumulate(x, gx);
            }
            Op::Softmax { x } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let y = self.nodes[i].value.data();
                let mut gx = vec![T::zero(); y.len()];
                for b in 0..n {
                    for j in 0..s {
                        let dot: T = (0..c).map(|ch| y[(b * c + ch) * s + j] * gy[(b * c + ch) * s + j]).sum();
                        for ch in 0..c {
                            let idx = (b * c + ch) * s + j;
                            gx[idx] = y[idx] * (gy[idx] - dot);
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let n = sa[0];
                let s: usize = sa[2..].iter().product();
                let ca = sa[1];
                let cb = self.value(b).shape()[1];
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for bi in 0..n {
                    let o = bi * (ca + cb) * s;
                    ga.extend_from_slice(&gy[o..o + ca * s]);
                    gb.extend_from_slice(&gy[o + ca * s..o + (ca + cb) * s]);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Loss { x, dx } => {
                let g = gy[0];
                self.accumulate(x, dx.into_iter().map(|d| d * g).collect());
            }
        }
    }
}

pub(crate) fn softmax_data<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for j in 0..s {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[(b * c + ch) * s + j]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let idx = (b * c + ch) * s + j;
                let e = (x[idx] - mx).exp();
                out[idx] = e;
                sum = sum + e;
            }
            for ch in 0..c {
                let idx = (b * c + ch) * s + j;
                out[idx] = out[idx] / sum;
            }
        }
    }
    out
}
