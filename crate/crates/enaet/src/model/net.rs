use std::rc::Rc;

use ndarray::{Array1, Array4, Ix1};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{BufferStore, ModelConfig, ModelState, ParamStore, DECODER_DOFS};
use crate::autodiff::{BatchStats, ConvSpec, NodeId, Tape, Tensor, BN_EPS};

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: usize,
    pub spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub mean_buf: usize,
    pub var_buf: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

/// Pre-activation residual block: x -> bn/relu -> conv -> bn/relu -> conv,
/// plus a skip that is a strided 1x1 projection whenever shape changes.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv2d,
    pub bn2: BatchNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

/// Residual block + bn/relu + global average pool + linear projection; the
/// classifier and all five decoders share this shape.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub block: ResBlock,
    pub bn: BatchNorm,
    pub fc: Linear,
}

#[derive(Debug)]
pub struct Network {
    pub stem: Conv2d,
    pub stages: Vec<ResBlock>,
    pub classifier: Head,
    pub decoders: Vec<Head>,
    /// Number of leading params covered by the EMA teacher: everything
    /// allocated before the first decoder.
    pub teacher_len: usize,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    buffers: &'a mut BufferStore,
    rng: &'a mut dyn RngCore,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                v * std
            })
            .collect();
        let w = Array4::from_shape_vec((cout, cin, k, k), data).unwrap().into_dyn();
        let pad = if k == 1 { 0 } else { 1 };
        Conv2d { w: self.params.add(format!("{name}.w"), w), spec: ConvSpec { stride, pad } }
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.params.add(format!("{name}.gamma"), Array1::ones(c).into_dyn()),
            beta: self.params.add(format!("{name}.beta"), Array1::zeros(c).into_dyn()),
            mean_buf: self.buffers.add(format!("{name}.running_mean"), Array1::zeros(c).into_dyn()),
            var_buf: self.buffers.add(format!("{name}.running_var"), Array1::ones(c).into_dyn()),
        }
    }

    /// Head projections start at zero so an untrained classifier is uniform.
    fn fc_zero(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        Linear {
            w: self
                .params
                .add(format!("{name}.w"), ndarray::Array2::zeros((cout, cin)).into_dyn()),
            b: self.params.add(format!("{name}.b"), Array1::zeros(cout).into_dyn()),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        ResBlock {
            bn1: self.bn(&format!("{name}.bn1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, stride),
            bn2: self.bn(&format!("{name}.bn2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout || stride != 1)
                .then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, stride)),
        }
    }

    fn head(&mut self, name: &str, cin: usize, width: usize, out: usize) -> Head {
        Head {
            block: self.block(&format!("{name}.block"), cin, width, 2),
            bn: self.bn(&format!("{name}.bn"), width),
            fc: self.fc_zero(&format!("{name}.fc"), width, out),
        }
    }
}

impl Network {
    pub fn build(
        config: &ModelConfig,
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        rng: &mut dyn RngCore,
    ) -> Self {
        let [w0, w1, w2, w3, w4] = config.widths;
        let mut b = Builder { params, buffers, rng };
        let stem = b.conv("stem", config.input_channels, w0, 3, config.stem_stride);
        let stages = vec![
            b.block("stage1", w0, w1, 1),
            b.block("stage2", w1, w2, 2),
            b.block("stage3", w2, w3, 2),
        ];
        let classifier = b.head("classifier", w3, w4, config.num_classes);
        let teacher_len = b.params.len();
        let decoders = DECODER_DOFS
            .iter()
            .enumerate()
            .map(|(k, &dof)| b.head(&format!("decoder{k}"), 2 * w3, w4, dof))
            .collect();
        Network { stem, stages, classifier, decoders, teacher_len }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Differentiable pass: params become grad leaves, batchnorm uses batch
    /// statistics and reports them for running-stat updates.
    Train,
    /// Pure function of (student params, input); running-stat batchnorm.
    Eval,
    /// Like `Eval` but reading the EMA teacher weights.
    TeacherEval,
}

pub struct PendingBnUpdate {
    pub mean_buf: usize,
    pub var_buf: usize,
    pub stats: BatchStats,
}

/// One forward pass over a tape. Parameter nodes are created lazily and
/// cached, so repeated sub-network applications (the Siamese branches) bind
/// to the same tape leaves and gradients accumulate across branches.
pub struct Forward<'t, 'm> {
    pub tape: &'t mut Tape,
    state: &'m ModelState,
    mode: ForwardMode,
    param_nodes: Vec<Option<NodeId>>,
    pending_bn: Vec<PendingBnUpdate>,
}

impl<'t, 'm> Forward<'t, 'm> {
    pub fn new(tape: &'t mut Tape, state: &'m ModelState, mode: ForwardMode) -> Self {
        let n = state.params.len();
        Self { tape, state, mode, param_nodes: vec![None; n], pending_bn: Vec::new() }
    }

    /// Batch statistics recorded by train-mode batchnorms, in forward order;
    /// feed to [`ModelState::apply_bn_updates`] after the step.
    pub fn take_bn_updates(&mut self) -> Vec<PendingBnUpdate> {
        std::mem::take(&mut self.pending_bn)
    }

    /// The tape leaf already bound for a parameter, if any (test hook for
    /// the weight-sharing invariant).
    pub fn bound_param_node(&self, id: usize) -> Option<NodeId> {
        self.param_nodes[id]
    }

    /// Hands over the param-id to tape-leaf map, one slot per parameter;
    /// `None` for parameters this pass never touched.
    pub fn take_param_nodes(&mut self) -> Vec<Option<NodeId>> {
        std::mem::take(&mut self.param_nodes)
    }

    fn param_value(&self, id: usize) -> Rc<Tensor> {
        match self.mode {
            ForwardMode::TeacherEval => {
                assert!(
                    id < self.state.net.teacher_len,
                    "decoder params have no teacher copy"
                );
                Rc::clone(&self.state.teacher[id])
            }
            _ => Rc::clone(&self.state.params.values[id]),
        }
    }

    fn param_node(&mut self, id: usize) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let value = self.param_value(id);
        let node = if self.mode == ForwardMode::Train {
            self.tape.param(value)
        } else {
            self.tape.constant_rc(value)
        };
        self.param_nodes[id] = Some(node);
        node
    }

    pub fn input(&mut self, x: Tensor) -> NodeId {
        self.tape.constant(x)
    }

    fn conv(&mut self, x: NodeId, layer: Conv2d) -> NodeId {
        let w = self.param_node(layer.w);
        self.tape.conv2d(x, w, layer.spec)
    }

    fn batchnorm(&mut self, x: NodeId, layer: BatchNorm) -> NodeId {
        if self.mode == ForwardMode::Train {
            let gamma = self.param_node(layer.gamma);
            let beta = self.param_node(layer.beta);
            let (node, stats) = self.tape.batchnorm_train(x, gamma, beta);
            self.pending_bn.push(PendingBnUpdate {
                mean_buf: layer.mean_buf,
                var_buf: layer.var_buf,
                stats,
            });
            node
        } else {
            // Fold running stats and the affine params into one per-channel
            // scale/shift; eval passes are never differentiated w.r.t. them.
            let gamma = self.param_value(layer.gamma);
            let beta = self.param_value(layer.beta);
            let gamma = gamma.view().into_dimensionality::<Ix1>().unwrap();
            let beta = beta.view().into_dimensionality::<Ix1>().unwrap();
            let mean = &self.state.buffers.values[layer.mean_buf];
            let var = &self.state.buffers.values[layer.var_buf];
            let c = gamma.len();
            let mut scale = vec![0.0; c];
            let mut shift = vec![0.0; c];
            for i in 0..c {
                let istd = 1.0 / (var[[i]] + BN_EPS).sqrt();
                scale[i] = gamma[i] * istd;
                shift[i] = beta[i] - mean[[i]] * scale[i];
            }
            self.tape.channel_affine(x, scale, shift)
        }
    }

    fn bn_relu(&mut self, x: NodeId, layer: BatchNorm) -> NodeId {
        let x = self.batchnorm(x, layer);
        self.tape.relu(x)
    }

    fn res_block(&mut self, x: NodeId, block: ResBlock) -> NodeId {
        let pre = self.bn_relu(x, block.bn1);
        let mut y = self.conv(pre, block.conv1);
        let h = self.bn_relu(y, block.bn2);
        y = self.conv(h, block.conv2);
        let skip = match block.skip {
            Some(proj) => self.conv(pre, proj),
            None => x,
        };
        self.tape.add(y, skip)
    }

    fn head(&mut self, x: NodeId, head: Head) -> NodeId {
        let x = self.res_block(x, head.block);
        let x = self.bn_relu(x, head.bn);
        let pooled = self.tape.global_avg_pool(x);
        let w = self.param_node(head.fc.w);
        let b = self.param_node(head.fc.b);
        self.tape.linear(pooled, w, b)
    }

    /// Encoder: stem + three residual stages. Returns the feature map node.
    pub fn encode(&mut self, x: NodeId) -> NodeId {
        let mut h = self.conv(x, self.state.net.stem);
        for i in 0..self.state.net.stages.len() {
            let block = self.state.net.stages[i];
            h = self.res_block(h, block);
        }
        h
    }

    /// Classifier logits `(N, num_classes)` from an encoded feature map.
    pub fn classify_logits(&mut self, features: NodeId) -> NodeId {
        self.head(features, self.state.net.classifier)
    }

    /// Class probabilities (softmax over logits).
    pub fn classify(&mut self, features: NodeId) -> NodeId {
        let logits = self.classify_logits(features);
        self.tape.softmax(logits)
    }

    /// Decoder `k` reads the ordered channel concatenation of the original
    /// and transformed feature maps; output is `(N, DOF(k))`.
    pub fn decode_transform(&mut self, k: usize, feat_orig: NodeId, feat_trans: NodeId) -> NodeId {
        assert!(k < self.state.net.decoders.len(), "decoder index {k} out of range");
        let cat = self.tape.concat_channels(feat_orig, feat_trans);
        self.head(cat, self.state.net.decoders[k])
    }
}

impl ModelState {
    /// Eval-mode class probabilities for a normalized input batch, as a
    /// plain tensor. `teacher` selects the EMA weights.
    pub fn predict_probs(&self, x: Tensor, teacher: bool) -> Tensor {
        let mut tape = Tape::new();
        let mode = if teacher { ForwardMode::TeacherEval } else { ForwardMode::Eval };
        let mut fw = Forward::new(&mut tape, self, mode);
        let input = fw.input(x);
        let feat = fw.encode(input);
        let probs = fw.classify(feat);
        tape.value(probs).clone()
    }
}
