//! The JigsawHSI network: a declarative spec assembled into an
//! Inception-style graph with an optional leading 1x1 layer (module A),
//! a multi-scale branch pyramid (module B), an optional center-pixel crop
//! branch (module C) and a dense softmax head (module D).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{self, Mat, Mode, Scalar, Tensor4};

/// Window size of the max-pool pyramid branch (stride 1, same padding).
const POOL_BRANCH_WINDOW: usize = 3;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("batch shape ({n},{h},{w},{c}) does not match spec input ({s},{s},{sc})")]
    ShapeMismatch {
        n: usize,
        h: usize,
        w: usize,
        c: usize,
        s: usize,
        sc: usize,
    },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Declarative description of the network; every knob of the generalized
/// architecture is here.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Tile side S (odd).
    pub input_size: usize,
    /// Input channels c after decomposition.
    pub input_channels: usize,
    /// Optional first 1x1 conv filter count.
    pub hsi_filters: Option<usize>,
    /// 1x1 conv filter counts of module A, applied in series (may be empty).
    pub module_a: Vec<usize>,
    /// Largest pyramid filter size n (odd); branches are 1,3,...,n plus a
    /// max-pool branch.
    pub max_filter_size: usize,
    /// Filters per pyramid branch.
    pub branch_units: usize,
    /// Optional 1x1 reduce before each k x k conv.
    pub nin_before: Option<usize>,
    /// Optional 1x1 projection after each branch (and after the pool
    /// branch).
    pub nin_after: Option<usize>,
    /// Average-pool size p (stride p, padded on the right/bottom edge).
    pub avg_pool_size: usize,
    /// Enable the center-pixel crop branch (module C).
    pub crop_enabled: bool,
    /// Widths of the two dense layers in module D.
    pub dense_units: (usize, usize),
    pub dropout_rate: f64,
    pub l2_coeff: f64,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), GraphError> {
        let err = |msg: String| Err(GraphError::BadSpec(msg));
        if self.input_size % 2 == 0 {
            return err(format!("window size {} must be odd", self.input_size));
        }
        if self.input_channels == 0 {
            return err("input channels must be positive".into());
        }
        if self.max_filter_size % 2 == 0 {
            return err(format!("filter size {} must be odd", self.max_filter_size));
        }
        if self.max_filter_size >= self.input_size {
            return err(format!(
                "filter size {} must be smaller than window size {}",
                self.max_filter_size, self.input_size
            ));
        }
        if self.branch_units == 0 {
            return err("branch units must be positive".into());
        }
        if self.avg_pool_size == 0 {
            return err("avg pool size must be positive".into());
        }
        if self.num_classes < 2 {
            return err("need at least 2 classes".into());
        }
        if self.dense_units.0 == 0 || self.dense_units.1 == 0 {
            return err("dense units must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.l2_coeff < 0.0 {
            return err("l2 coefficient must be non-negative".into());
        }
        if self.hsi_filters == Some(0) || self.nin_before == Some(0) || self.nin_after == Some(0) {
            return err("filter counts must be positive when present".into());
        }
        if self.module_a.contains(&0) {
            return err("module A filter counts must be positive".into());
        }
        Ok(())
    }

    /// Pyramid branch kernel sizes: 1, 3, ..., n.
    pub fn branch_kernels(&self) -> Vec<usize> {
        (0..).map(|i| 2 * i + 1).take_while(|&k| k <= self.max_filter_size).collect()
    }

    /// Channel count entering module B (after hsi layer and module A).
    pub fn trunk_channels(&self) -> usize {
        self.module_a
            .last()
            .copied()
            .or(self.hsi_filters)
            .unwrap_or(self.input_channels)
    }
}

/// One parameter array and its gradient accumulator. `is_weight` marks
/// arrays subject to L2 regularization (biases are not).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<F> {
    pub values: Vec<F>,
    pub grads: Vec<F>,
    pub is_weight: bool,
}

impl<F: Scalar> ParamTensor<F> {
    fn new(values: Vec<F>, is_weight: bool) -> Self {
        let grads = vec![F::zero(); values.len()];
        Self {
            values,
            grads,
            is_weight,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = F::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub w: ParamTensor<F>,
    pub b: ParamTensor<F>,
}

impl<F: Scalar> ConvLayer<F> {
    fn init(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = k * k * cin;
        let fan_out = k * k * cout;
        let w = nn::glorot_uniform(fan_in, fan_out, k * k * cin * cout, rng);
        Self {
            k,
            cin,
            cout,
            w: ParamTensor::new(w, true),
            b: ParamTensor::new(vec![F::zero(); cout], false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub fin: usize,
    pub fout: usize,
    pub w: ParamTensor<F>,
    pub b: ParamTensor<F>,
}

impl<F: Scalar> DenseLayer<F> {
    fn init(fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = nn::glorot_uniform(fin, fout, fin * fout, rng);
        Self {
            fin,
            fout,
            w: ParamTensor::new(w, true),
            b: ParamTensor::new(vec![F::zero(); fout], false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<F> {
    pub reduce: Option<ConvLayer<F>>,
    pub conv: ConvLayer<F>,
    pub project: Option<ConvLayer<F>>,
}

impl<F: Scalar> Branch<F> {
    fn out_channels(&self) -> usize {
        self.project
            .as_ref()
            .map(|p| p.cout)
            .unwrap_or(self.conv.cout)
    }
}

/// An instantiated network: spec plus parameters in fixed topological
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub spec: NetworkSpec,
    pub hsi: Option<ConvLayer<F>>,
    pub module_a: Vec<ConvLayer<F>>,
    pub branches: Vec<Branch<F>>,
    pub pool_project: Option<ConvLayer<F>>,
    pub dense1: DenseLayer<F>,
    pub dense2: DenseLayer<F>,
    pub head: DenseLayer<F>,
}

/// Builds a model with Glorot-initialized weights, deterministic under
/// seed.
pub fn build<F: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Model<F>, GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut channels = spec.input_channels;
    let hsi = spec.hsi_filters.map(|f| {
        let layer = ConvLayer::init(1, channels, f, &mut rng);
        channels = f;
        layer
    });
    let mut module_a = Vec::with_capacity(spec.module_a.len());
    for &f in &spec.module_a {
        module_a.push(ConvLayer::init(1, channels, f, &mut rng));
        channels = f;
    }
    let trunk = channels;

    let mut branches = Vec::new();
    for k in spec.branch_kernels() {
        let reduce = spec
            .nin_before
            .map(|r| ConvLayer::init(1, trunk, r, &mut rng));
        let conv_in = spec.nin_before.unwrap_or(trunk);
        let conv = ConvLayer::init(k, conv_in, spec.branch_units, &mut rng);
        let project = spec
            .nin_after
            .map(|p| ConvLayer::init(1, spec.branch_units, p, &mut rng));
        branches.push(Branch {
            reduce,
            conv,
            project,
        });
    }
    let pool_project = spec.nin_after.map(|p| ConvLayer::init(1, trunk, p, &mut rng));

    let pool_out_c = pool_project.as_ref().map(|l| l.cout).unwrap_or(trunk);
    let concat_c: usize =
        branches.iter().map(|b| b.out_channels()).sum::<usize>() + pool_out_c;
    let pooled = spec.input_size.div_ceil(spec.avg_pool_size);
    let left_features = pooled * pooled * concat_c;
    let right_features = if spec.crop_enabled { trunk } else { 0 };

    let dense1 = DenseLayer::init(left_features + right_features, spec.dense_units.0, &mut rng);
    let dense2 = DenseLayer::init(spec.dense_units.0, spec.dense_units.1, &mut rng);
    let head = DenseLayer::init(spec.dense_units.1, spec.num_classes, &mut rng);

    Ok(Model {
        spec: spec.clone(),
        hsi,
        module_a,
        branches,
        pool_project,
        dense1,
        dense2,
        head,
    })
}

struct ConvCache<F> {
    x: Tensor4<F>,
    z: Tensor4<F>,
}

struct DenseCache<F> {
    x: Mat<F>,
    z: Mat<F>,
}

struct BranchCache<F> {
    reduce: Option<ConvCache<F>>,
    conv: ConvCache<F>,
    project: Option<ConvCache<F>>,
}

/// Cached activations from one forward pass, consumed by `backward`.
pub struct ForwardPass<F> {
    trunk_convs: Vec<ConvCache<F>>, // hsi layer first when present, then module A
    trunk: Tensor4<F>,
    branches: Vec<BranchCache<F>>,
    pool_argmax: Vec<usize>,
    pool_project: Option<ConvCache<F>>,
    concat_split: Vec<usize>,
    concat_shape: (usize, usize, usize, usize),
    avg_shape: (usize, usize, usize, usize),
    left_cols: usize,
    dense1: DenseCache<F>,
    drop1: Vec<F>,
    dense2: DenseCache<F>,
    drop2: Vec<F>,
    head: DenseCache<F>,
    pub logits: Mat<F>,
    /// Row-normalized class probabilities, one row per tile.
    pub probs: Mat<F>,
}

fn conv_relu<F: Scalar>(layer: &ConvLayer<F>, x: Tensor4<F>) -> (ConvCache<F>, Tensor4<F>) {
    let z = nn::conv2d_forward(&x, &layer.w.values, &layer.b.values, layer.k, layer.cin, layer.cout);
    let a = Tensor4::from_vec(z.n, z.h, z.w, z.c, nn::relu(&z.data));
    (ConvCache { x, z }, a)
}

fn conv_relu_backward<F: Scalar>(
    layer: &mut ConvLayer<F>,
    cache: &ConvCache<F>,
    da: &Tensor4<F>,
) -> Tensor4<F> {
    let dz_data = nn::relu_backward(&cache.z.data, &da.data);
    let dz = Tensor4::from_vec(da.n, da.h, da.w, da.c, dz_data);
    let (dx, dw, db) = nn::conv2d_backward(&cache.x, &layer.w.values, &dz, layer.k, layer.cin, layer.cout);
    for (g, d) in layer.w.grads.iter_mut().zip(dw) {
        *g += d;
    }
    for (g, d) in layer.b.grads.iter_mut().zip(db) {
        *g += d;
    }
    dx
}

impl<F: Scalar> Model<F> {
    /// Runs the graph over a batch. Dropout draws from `rng` in train
    /// mode and is the identity at inference.
    pub fn forward(
        &self,
        batch: &Tensor4<F>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass<F>, GraphError> {
        let s = self.spec.input_size;
        let c = self.spec.input_channels;
        if batch.h != s || batch.w != s || batch.c != c || batch.n == 0 {
            return Err(GraphError::ShapeMismatch {
                n: batch.n,
                h: batch.h,
                w: batch.w,
                c: batch.c,
                s,
                sc: c,
            });
        }

        // Trunk: optional hsi 1x1, then module A 1x1 convs, relu after each.
        let mut trunk_convs = Vec::new();
        let mut cur = batch.clone();
        for layer in self.hsi.iter().chain(self.module_a.iter()) {
            let (cache, a) = conv_relu(layer, cur);
            trunk_convs.push(cache);
            cur = a;
        }
        let trunk = cur;

        // Module B: the branch pyramid plus the max-pool branch.
        let mut branch_caches = Vec::new();
        let mut branch_outs = Vec::new();
        for branch in &self.branches {
            let mut x = trunk.clone();
            let reduce = branch.reduce.as_ref().map(|layer| {
                let (cache, a) = conv_relu(layer, std::mem::replace(&mut x, Tensor4::zeros(1, 1, 1, 1)));
                x = a;
                cache
            });
            let (conv_cache, mut out) = conv_relu(&branch.conv, x);
            let project = branch.project.as_ref().map(|layer| {
                let (cache, a) = conv_relu(layer, std::mem::replace(&mut out, Tensor4::zeros(1, 1, 1, 1)));
                out = a;
                cache
            });
            branch_caches.push(BranchCache {
                reduce,
                conv: conv_cache,
                project,
            });
            branch_outs.push(out);
        }
        let (mut pool_final, pool_argmax) = nn::max_pool_forward(&trunk, POOL_BRANCH_WINDOW);
        let pool_project = self.pool_project.as_ref().map(|layer| {
            let (cache, a) = conv_relu(layer, std::mem::replace(&mut pool_final, Tensor4::zeros(1, 1, 1, 1)));
            pool_final = a;
            cache
        });

        let mut concat_inputs: Vec<&Tensor4<F>> = branch_outs.iter().collect();
        concat_inputs.push(&pool_final);
        let concat_split: Vec<usize> = concat_inputs.iter().map(|t| t.c).collect();
        let concat = nn::concat_channels(&concat_inputs);
        let concat_shape = (concat.n, concat.h, concat.w, concat.c);

        let avg = nn::avg_pool_forward(&concat, self.spec.avg_pool_size);
        let avg_shape = (avg.n, avg.h, avg.w, avg.c);
        let left = nn::flatten(&avg);
        let left_cols = left.cols;

        // Module C: center-pixel crop of the trunk.
        let features = if self.spec.crop_enabled {
            let crop = nn::crop_center(&trunk);
            let right = nn::flatten(&crop);
            let mut data = Vec::with_capacity(batch.n * (left.cols + right.cols));
            for r in 0..batch.n {
                data.extend_from_slice(left.row(r));
                data.extend_from_slice(right.row(r));
            }
            Mat::from_vec(batch.n, left.cols + right.cols, data)
        } else {
            left
        };

        // Module D: dense -> relu -> dropout, twice, then the class head.
        let rate = self.spec.dropout_rate;
        let z1 = nn::dense_forward(&features, &self.dense1.w_mat(), &self.dense1.b.values);
        let a1 = nn::relu(&z1.data);
        let (d1_out, drop1) = nn::dropout(&a1, rate, mode, rng);
        let d1_mat = Mat::from_vec(batch.n, self.dense1.fout, d1_out);

        let z2 = nn::dense_forward(&d1_mat, &self.dense2.w_mat(), &self.dense2.b.values);
        let a2 = nn::relu(&z2.data);
        let (d2_out, drop2) = nn::dropout(&a2, rate, mode, rng);
        let d2_mat = Mat::from_vec(batch.n, self.dense2.fout, d2_out);

        let logits = nn::dense_forward(&d2_mat, &self.head.w_mat(), &self.head.b.values);

        // Row-stabilized softmax for the caller.
        let mut probs = Mat::zeros(logits.rows, logits.cols);
        for r in 0..logits.rows {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs.set(r, i, e);
                denom += e;
            }
            for i in 0..logits.cols {
                let p = probs.get(r, i) / denom;
                probs.set(r, i, p);
            }
        }

        Ok(ForwardPass {
            trunk_convs,
            trunk,
            branches: branch_caches,
            pool_argmax,
            pool_project,
            concat_split,
            concat_shape,
            avg_shape,
            left_cols,
            dense1: DenseCache { x: features, z: z1 },
            drop1,
            dense2: DenseCache { x: d1_mat, z: z2 },
            drop2,
            head: DenseCache { x: d2_mat, z: logits.clone() },
            logits,
            probs,
        })
    }

    /// Backpropagates the softmax cross-entropy loss through the cached
    /// pass, accumulating parameter gradients (with L2 contributions on
    /// weights). Returns the data loss; add `l2_loss` for the full
    /// objective.
    pub fn backward(&mut self, pass: &ForwardPass<F>, targets: &Mat<F>) -> F {
        self.zero_grad();
        let (loss, _, dlogits) = nn::softmax_xent(&pass.logits, targets);

        let dense_back = |layer: &mut DenseLayer<F>, cache: &DenseCache<F>, dy: &Mat<F>| -> Mat<F> {
            let w = layer.w_mat();
            let (dx, dw, db) = nn::dense_backward(&cache.x, &w, dy);
            for (g, d) in layer.w.grads.iter_mut().zip(dw.data) {
                *g += d;
            }
            for (g, d) in layer.b.grads.iter_mut().zip(db) {
                *g += d;
            }
            dx
        };

        let d_head_in = dense_back(&mut self.head, &pass.head, &dlogits);
        let d2 = Mat::from_vec(
            d_head_in.rows,
            d_head_in.cols,
            nn::relu_backward(&pass.dense2.z.data, &nn::dropout_backward(&pass.drop2, &d_head_in.data)),
        );
        let d_d2_in = dense_back(&mut self.dense2, &pass.dense2, &d2);
        let d1 = Mat::from_vec(
            d_d2_in.rows,
            d_d2_in.cols,
            nn::relu_backward(&pass.dense1.z.data, &nn::dropout_backward(&pass.drop1, &d_d2_in.data)),
        );
        let d_features = dense_back(&mut self.dense1, &pass.dense1, &d1);

        // Split features into the pooled module-B part and the crop part.
        let n = d_features.rows;
        let left_cols = pass.left_cols;
        let trunk_c = pass.trunk.c;
        let (d_left, d_crop) = if self.spec.crop_enabled {
            let mut left = Mat::zeros(n, left_cols);
            let mut right = Mat::zeros(n, trunk_c);
            for r in 0..n {
                let row = d_features.row(r);
                left.data[r * left_cols..(r + 1) * left_cols].copy_from_slice(&row[..left_cols]);
                right.data[r * trunk_c..(r + 1) * trunk_c].copy_from_slice(&row[left_cols..]);
            }
            (left, Some(right))
        } else {
            (d_features, None)
        };

        // Module B backward.
        let (an, ah, aw, ac) = pass.avg_shape;
        let d_avg = nn::unflatten(&d_left, ah, aw, ac);
        debug_assert_eq!(an, n);
        let d_concat = nn::avg_pool_backward(pass.concat_shape, self.spec.avg_pool_size, &d_avg);
        let mut parts = nn::concat_channels_backward(&d_concat, &pass.concat_split);
        let d_pool_final = parts.pop().expect("pool branch gradient");

        let mut d_trunk = Tensor4::zeros(pass.trunk.n, pass.trunk.h, pass.trunk.w, pass.trunk.c);
        for ((branch, cache), d_out) in self
            .branches
            .iter_mut()
            .zip(&pass.branches)
            .zip(parts.into_iter())
        {
            let mut grad = d_out;
            if let (Some(layer), Some(pcache)) = (branch.project.as_mut(), cache.project.as_ref()) {
                grad = conv_relu_backward(layer, pcache, &grad);
            }
            grad = conv_relu_backward(&mut branch.conv, &cache.conv, &grad);
            if let (Some(layer), Some(rcache)) = (branch.reduce.as_mut(), cache.reduce.as_ref()) {
                grad = conv_relu_backward(layer, rcache, &grad);
            }
            for (acc, g) in d_trunk.data.iter_mut().zip(grad.data) {
                *acc += g;
            }
        }

        let mut d_pool = d_pool_final;
        if let (Some(layer), Some(pcache)) = (self.pool_project.as_mut(), pass.pool_project.as_ref())
        {
            d_pool = conv_relu_backward(layer, pcache, &d_pool);
        }
        let d_pool_in = nn::max_pool_backward(
            (pass.trunk.n, pass.trunk.h, pass.trunk.w, pass.trunk.c),
            &pass.pool_argmax,
            &d_pool,
        );
        for (acc, g) in d_trunk.data.iter_mut().zip(d_pool_in.data) {
            *acc += g;
        }

        // Module C backward.
        if let Some(d_crop) = d_crop {
            let d_crop_t = nn::unflatten(&d_crop, 1, 1, trunk_c);
            let d_in = nn::crop_center_backward(
                (pass.trunk.n, pass.trunk.h, pass.trunk.w, pass.trunk.c),
                &d_crop_t,
            );
            for (acc, g) in d_trunk.data.iter_mut().zip(d_in.data) {
                *acc += g;
            }
        }

        // Trunk backward (module A then the hsi layer, in reverse).
        let mut grad = d_trunk;
        let n_hsi = usize::from(self.hsi.is_some());
        for (i, cache) in pass.trunk_convs.iter().enumerate().rev() {
            let layer = if i < n_hsi {
                self.hsi.as_mut().unwrap()
            } else {
                &mut self.module_a[i - n_hsi]
            };
            grad = conv_relu_backward(layer, cache, &grad);
        }

        // L2 contributions on every weight array.
        let coeff = F::from_f64(self.spec.l2_coeff);
        if coeff > F::zero() {
            self.visit_params_mut(&mut |p| {
                if p.is_weight {
                    nn::add_l2_grad(&p.values, &mut p.grads, coeff);
                }
            });
        }
        loss
    }

    /// coeff * sum of squared weights over all weight arrays.
    pub fn l2_loss(&self) -> F {
        let coeff = F::from_f64(self.spec.l2_coeff);
        if coeff == F::zero() {
            return F::zero();
        }
        let mut total = F::zero();
        self.visit_params(&mut |p| {
            if p.is_weight {
                total += nn::l2_penalty(&p.values, F::one());
            }
        });
        total * coeff
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Visits every parameter tensor in fixed topological order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor<F>)) {
        let conv = |l: &ConvLayer<F>, f: &mut dyn FnMut(&ParamTensor<F>)| {
            f(&l.w);
            f(&l.b);
        };
        if let Some(l) = &self.hsi {
            conv(l, f);
        }
        for l in &self.module_a {
            conv(l, f);
        }
        for b in &self.branches {
            if let Some(l) = &b.reduce {
                conv(l, f);
            }
            conv(&b.conv, f);
            if let Some(l) = &b.project {
                conv(l, f);
            }
        }
        if let Some(l) = &self.pool_project {
            conv(l, f);
        }
        for d in [&self.dense1, &self.dense2, &self.head] {
            f(&d.w);
            f(&d.b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>)) {
        let conv = |l: &mut ConvLayer<F>, f: &mut dyn FnMut(&mut ParamTensor<F>)| {
            f(&mut l.w);
            f(&mut l.b);
        };
        if let Some(l) = &mut self.hsi {
            conv(l, f);
        }
        for l in &mut self.module_a {
            conv(l, f);
        }
        for b in &mut self.branches {
            if let Some(l) = &mut b.reduce {
                conv(l, f);
            }
            conv(&mut b.conv, f);
            if let Some(l) = &mut b.project {
                conv(l, f);
            }
        }
        if let Some(l) = &mut self.pool_project {
            conv(l, f);
        }
        for d in [&mut self.dense1, &mut self.dense2, &mut self.head] {
            f(&mut d.w);
            f(&mut d.b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.values.len());
        total
    }

    /// Snapshot of all parameter values in topological order.
    pub fn param_snapshot(&self) -> Vec<Vec<F>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.values.clone()));
        out
    }

    pub fn restore_params(&mut self, snapshot: &[Vec<F>]) {
        let mut i = 0;
        self.visit_params_mut(&mut |p| {
            p.values.copy_from_slice(&snapshot[i]);
            i += 1;
        });
        assert_eq!(i, snapshot.len(), "snapshot layout mismatch");
    }
}

impl<F: Scalar> DenseLayer<F> {
    fn w_mat(&self) -> Mat<F> {
        Mat::from_vec(self.fin, self.fout, self.w.values.clone())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: spec echo header + float32 parameter payload
// ---------------------------------------------------------------------------

fn spec_header(spec: &NetworkSpec) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
    let module_a = if spec.module_a.is_empty() {
        "none".to_string()
    } else {
        spec.module_a
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "# jigsawhsi model checkpoint\n\
         input_size={}\ninput_channels={}\nhsi_filters={}\nmodule_a={}\n\
         max_filter_size={}\nbranch_units={}\nnin_before={}\nnin_after={}\n\
         avg_pool_size={}\ncrop_enabled={}\ndense_units={},{}\ndropout_rate={}\n\
         l2_coeff={}\nnum_classes={}\n",
        spec.input_size,
        spec.input_channels,
        opt(spec.hsi_filters),
        module_a,
        spec.max_filter_size,
        spec.branch_units,
        opt(spec.nin_before),
        opt(spec.nin_after),
        spec.avg_pool_size,
        spec.crop_enabled,
        spec.dense_units.0,
        spec.dense_units.1,
        spec.dropout_rate,
        spec.l2_coeff,
        spec.num_classes,
    )
}

fn parse_spec_header(path: &Path, text: &str) -> Result<NetworkSpec, GraphError> {
    let cerr = |msg: String| GraphError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cerr(format!("bad header line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        kv.get(key)
            .cloned()
            .ok_or_else(|| cerr(format!("missing key `{key}`")))
    };
    let num = |key: &str| -> Result<usize, GraphError> {
        get(key)?.parse().map_err(|_| cerr(format!("bad `{key}`")))
    };
    let opt = |key: &str| -> Result<Option<usize>, GraphError> {
        let v = get(key)?;
        if v == "none" {
            Ok(None)
        } else {
            v.parse().map(Some).map_err(|_| cerr(format!("bad `{key}`")))
        }
    };
    let module_a = {
        let v = get("module_a")?;
        if v == "none" {
            Vec::new()
        } else {
            v.split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<Vec<usize>, _>>()
                .map_err(|_| cerr("bad `module_a`".into()))?
        }
    };
    let dense = {
        let v = get("dense_units")?;
        let (a, b) = v
            .split_once(',')
            .ok_or_else(|| cerr("bad `dense_units`".into()))?;
        (
            a.trim().parse().map_err(|_| cerr("bad `dense_units`".into()))?,
            b.trim().parse().map_err(|_| cerr("bad `dense_units`".into()))?,
        )
    };
    Ok(NetworkSpec {
        input_size: num("input_size")?,
        input_channels: num("input_channels")?,
        hsi_filters: opt("hsi_filters")?,
        module_a,
        max_filter_size: num("max_filter_size")?,
        branch_units: num("branch_units")?,
        nin_before: opt("nin_before")?,
        nin_after: opt("nin_after")?,
        avg_pool_size: num("avg_pool_size")?,
        crop_enabled: get("crop_enabled")? == "true",
        dense_units: dense,
        dropout_rate: get("dropout_rate")?
            .parse()
            .map_err(|_| cerr("bad `dropout_rate`".into()))?,
        l2_coeff: get("l2_coeff")?
            .parse()
            .map_err(|_| cerr("bad `l2_coeff`".into()))?,
        num_classes: num("num_classes")?,
    })
}

/// Saves spec + parameters; `load_checkpoint` reads them back bit-exactly.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), GraphError> {
    fs::write(path, spec_header(&model.spec)).map_err(|e| GraphError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut payload = Vec::new();
    model.visit_params(&mut |p| {
        for &v in &p.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let raw = path.with_extension("raw");
    fs::write(&raw, payload).map_err(|e| GraphError::File {
        path: raw.clone(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| GraphError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let spec = parse_spec_header(path, &text)?;
    let mut model: Model<f32> = build(&spec, 0)?;
    let raw = path.with_extension("raw");
    let bytes = fs::read(&raw).map_err(|e| GraphError::File {
        path: raw.clone(),
        source: e,
    })?;
    if bytes.len() != model.param_count() * 4 {
        return Err(GraphError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!(
                "payload holds {} bytes, spec requires {}",
                bytes.len(),
                model.param_count() * 4
            ),
        });
    }
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    model.visit_params_mut(&mut |p| {
        for v in p.values.iter_mut() {
            *v = vals.next().unwrap();
        }
    });
    Ok(model)
}
