//! The plastic reasoning stack: hashed query embedding, per-layer
//! query-conditioned routing over LoRA experts, affordance cross-attention,
//! and the three task heads with their losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, NodeId};
use crate::numeric::matrix::Matrix;
use crate::numeric::prob::{softmax_unchecked, ProbVector};

/// Reserved id for the empty/unknown token.
pub const UNKNOWN_TOKEN: usize = 0;

/// Whitespace tokenizer with case folding and a stable FNV-1a hash into a
/// fixed vocabulary; id 0 stays reserved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryEmbedder {
    vocab: usize,
    /// Frozen input embedding table, vocab x d_q.
    pub table: Matrix,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl QueryEmbedder {
    pub fn new(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut table = Matrix::zeros(vocab, dim);
        for v in table.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        Self { vocab, table }
    }

    pub fn token_ids(&self, query: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = query
            .split_whitespace()
            .map(|w| {
                let folded = w.to_lowercase();
                1 + (fnv1a(folded.as_bytes()) % (self.vocab as u64 - 1)) as usize
            })
            .collect();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty query".into()));
        }
        Ok(ids)
    }

    /// Token embeddings (L x d_q) and their mean pool (1 x d_q).
    pub fn embed(&self, query: &str) -> Result<(Matrix, Matrix)> {
        let ids = self.token_ids(query)?;
        let mut u = Matrix::zeros(ids.len(), self.table.cols());
        for (r, &id) in ids.iter().enumerate() {
            u.row_mut(r).copy_from_slice(self.table.row(id));
        }
        let mut pooled = Matrix::zeros(1, self.table.cols());
        let inv = 1.0 / ids.len() as f64;
        for r in 0..u.rows() {
            for (p, &v) in pooled.row_mut(0).iter_mut().zip(u.row(r)) {
                *p += v * inv;
            }
        }
        Ok((u, pooled))
    }
}

/// One low-rank expert: delta = b * a / scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraExpert {
    /// r x d_in.
    pub a: Matrix,
    /// d_out x r.
    pub b: Matrix,
    /// Fixed scale; set to the rank at initialization so growth never
    /// rescales the existing contribution.
    pub scale: f64,
}

impl LoraExpert {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Dense contribution b * a / scale.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).scale(1.0 / self.scale)
    }
}

/// A frozen base linear map plus routed experts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutedLayer {
    /// Frozen d_out x d_in weight; never updated after construction.
    pub base: Matrix,
    /// Router matrix, m x d_q.
    pub router: Matrix,
    pub experts: Vec<LoraExpert>,
}

impl RoutedLayer {
    /// Mixture weights alpha = softmax(router * u); uniform under the
    /// router-free ablation.
    pub fn route(&self, pooled_query: &Matrix, uniform: bool) -> ProbVector {
        let m = self.experts.len();
        if uniform {
            return ProbVector::new(vec![1.0 / m as f64; m]).expect("uniform mixture");
        }
        let logits = pooled_query.matmul_tb(&self.router);
        ProbVector::new(softmax_unchecked(logits.row(0), 1.0)).expect("softmax mixture")
    }

    /// Dense effective weight W + sum_j alpha_j * b_j a_j / s_j. This is the
    /// reference route; the forward pass keeps the factors apart.
    pub fn effective_weight(&self, alpha: &ProbVector) -> Result<Matrix> {
        if alpha.len() != self.experts.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture length {} does not match expert count {}",
                alpha.len(),
                self.experts.len()
            )));
        }
        let mut w = self.base.clone();
        for (expert, &aj) in self.experts.iter().zip(alpha.as_slice()) {
            if expert.a.cols() != self.base.cols() || expert.b.rows() != self.base.rows() {
                return Err(Error::InvalidState(
                    "expert factor shapes do not match the base weight".into(),
                ));
            }
            w.axpy(aj / expert.scale, &expert.b.matmul(&expert.a));
        }
        Ok(w)
    }
}

/// Autoregressive head (shared machinery for the gen and step formats).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArHead {
    /// vocab x d_model output map.
    pub w: Matrix,
    /// 1 x vocab bias.
    pub b: Matrix,
    /// vocab x d_model prefix embedding table.
    pub embed: Matrix,
}

impl ArHead {
    fn new(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Matrix::zeros(vocab, dim);
        for v in w.data_mut() {
            *v = rng.gen_range(-0.5..0.5) / (dim as f64).sqrt();
        }
        let mut embed = Matrix::zeros(vocab, dim);
        for v in embed.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        Self {
            w,
            b: Matrix::zeros(1, vocab),
            embed,
        }
    }

    pub fn vocab(&self) -> usize {
        self.w.rows()
    }
}

/// Supervision for one sample; exactly one head is active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "target")]
pub enum TaskTarget {
    /// Answer token ids.
    Gen(Vec<usize>),
    /// Inclusive frame interval (start, end), 0-based, start <= end.
    Span(usize, usize),
    /// Step ids.
    Step(Vec<usize>),
}

/// Temporal IoU of inclusive discrete frame intervals.
pub fn tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let (a0, a1) = (a.0.min(a.1), a.0.max(a.1));
    let (b0, b1) = (b.0.min(b.1), b.0.max(b.1));
    let inter_lo = a0.max(b0);
    let inter_hi = a1.min(b1);
    let inter = if inter_hi >= inter_lo {
        inter_hi - inter_lo + 1
    } else {
        0
    };
    let len_a = a1 - a0 + 1;
    let len_b = b1 - b0 + 1;
    let union = len_a + len_b - inter;
    inter as f64 / union as f64
}

/// Model prediction extracted during the forward pass (teacher-forced).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Tokens(Vec<usize>),
    Span(usize, usize),
}

impl Prediction {
    /// Evaluation convention: token heads need an exact sequence match,
    /// span heads need tIoU >= 0.5.
    pub fn correct(&self, target: &TaskTarget) -> bool {
        match (self, target) {
            (Prediction::Tokens(p), TaskTarget::Gen(t)) | (Prediction::Tokens(p), TaskTarget::Step(t)) => p == t,
            (Prediction::Span(s, e), TaskTarget::Span(ts, te)) => {
                tiou((*s, *e), (*ts, *te)) >= 0.5
            }
            _ => false,
        }
    }
}

/// The full plastic parameter set g_phi.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scheduler {
    pub embedder: QueryEmbedder,
    pub layers: Vec<RoutedLayer>,
    pub gen: ArHead,
    pub step: ArHead,
    /// d_model x d_model bilinear maps scoring span endpoints against keys.
    pub span_start: Matrix,
    pub span_end: Matrix,
}

impl Scheduler {
    pub fn new(
        cfg: &ModelConfig,
        answer_vocab: usize,
        step_vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.model_dim;
        let embedder = QueryEmbedder::new(cfg.llm_vocab, d, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut base = Matrix::zeros(d, d);
            for v in base.data_mut() {
                *v = rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
            }
            let mut router = Matrix::zeros(cfg.experts, d);
            for v in router.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            let mut experts = Vec::with_capacity(cfg.experts);
            for _ in 0..cfg.experts {
                let mut a = Matrix::zeros(cfg.rank_init, d);
                for v in a.data_mut() {
                    *v = rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
                }
                experts.push(LoraExpert {
                    a,
                    b: Matrix::zeros(d, cfg.rank_init),
                    scale: cfg.rank_init as f64,
                });
            }
            layers.push(RoutedLayer {
                base,
                router,
                experts,
            });
        }
        Self {
            embedder,
            layers,
            gen: ArHead::new(answer_vocab, d, rng),
            step: ArHead::new(step_vocab, d, rng),
            span_start: {
                let mut m = Matrix::zeros(d, d);
                for v in m.data_mut() {
                    *v = rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
                }
                m
            },
            span_end: {
                let mut m = Matrix::zeros(d, d);
                for v in m.data_mut() {
                    *v = rng.gen_range(-1.0..1.0) / (d as f64).sqrt();
                }
                m
            },
        }
    }

    pub fn model_dim(&self) -> usize {
        self.span_start.rows()
    }

    pub fn ranks(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| l.experts.iter().map(|e| e.rank()).collect())
            .collect()
    }

    /// Flat view of the trainable parameters, padding each expert to the
    /// rank given in `ranks` (entries the expert does not have yet read 0).
    pub fn flatten_padded(&self, ranks: &[Vec<usize>]) -> Vec<f64> {
        let d = self.model_dim();
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend_from_slice(layer.router.data());
            for (j, expert) in layer.experts.iter().enumerate() {
                let target = ranks[l][j];
                for r in 0..target {
                    if r < expert.rank() {
                        out.extend_from_slice(expert.a.row(r));
                    } else {
                        out.extend(std::iter::repeat(0.0).take(d));
                    }
                }
                for row in 0..d {
                    for c in 0..target {
                        out.push(if c < expert.rank() { expert.b.at(row, c) } else { 0.0 });
                    }
                }
            }
        }
        for h in [&self.gen, &self.step] {
            out.extend_from_slice(h.w.data());
            out.extend_from_slice(h.b.data());
            out.extend_from_slice(h.embed.data());
        }
        out.extend_from_slice(self.span_start.data());
        out.extend_from_slice(self.span_end.data());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flatten_padded(&self.ranks())
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0;
        let mut take = |n: usize, flat: &[f64]| -> Result<std::ops::Range<usize>> {
            if pos + n > flat.len() {
                return Err(Error::InvalidArgument("flat scheduler vector too short".into()));
            }
            let r = pos..pos + n;
            pos += n;
            Ok(r)
        };
        for layer in &mut self.layers {
            let n = layer.router.data().len();
            let r = take(n, flat)?;
            layer.router.data_mut().copy_from_slice(&flat[r]);
            for expert in &mut layer.experts {
                let n = expert.a.data().len();
                let r = take(n, flat)?;
                expert.a.data_mut().copy_from_slice(&flat[r]);
                let n = expert.b.data().len();
                let r = take(n, flat)?;
                expert.b.data_mut().copy_from_slice(&flat[r]);
            }
        }
        for h in [&mut self.gen, &mut self.step] {
            for m in [&mut h.w, &mut h.b, &mut h.embed] {
                let n = m.data().len();
                let r = take(n, flat)?;
                m.data_mut().copy_from_slice(&flat[r]);
            }
        }
        for m in [&mut self.span_start, &mut self.span_end] {
            let n = m.data().len();
            let r = take(n, flat)?;
            m.data_mut().copy_from_slice(&flat[r]);
        }
        if pos != flat.len() {
            return Err(Error::InvalidArgument("flat scheduler vector too long".into()));
        }
        Ok(())
    }

    /// Registers scheduler parameters on a tape. `trainable` turns them into
    /// variables; `track_base` additionally registers the frozen base
    /// weights as variables so their (never applied) gradients can seed
    /// growth.
    pub fn register(&self, g: &mut Graph, trainable: bool, track_base: bool) -> SchedVars {
        let mut leaf = |g: &mut Graph, m: &Matrix, var: bool| {
            if var {
                g.var(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        let mut routers = Vec::new();
        let mut expert_a = Vec::new();
        let mut expert_b = Vec::new();
        let mut base = Vec::new();
        for layer in &self.layers {
            routers.push(leaf(g, &layer.router, trainable));
            base.push(leaf(g, &layer.base, track_base));
            let mut la = Vec::new();
            let mut lb = Vec::new();
            for e in &layer.experts {
                la.push(leaf(g, &e.a, trainable));
                lb.push(leaf(g, &e.b, trainable));
            }
            expert_a.push(la);
            expert_b.push(lb);
        }
        SchedVars {
            routers,
            expert_a,
            expert_b,
            base,
            gen_w: leaf(g, &self.gen.w, trainable),
            gen_b: leaf(g, &self.gen.b, trainable),
            gen_e: leaf(g, &self.gen.embed, trainable),
            step_w: leaf(g, &self.step.w, trainable),
            step_b: leaf(g, &self.step.b, trainable),
            step_e: leaf(g, &self.step.embed, trainable),
            span_start: leaf(g, &self.span_start, trainable),
            span_end: leaf(g, &self.span_end, trainable),
        }
    }

    /// Builds the routed cross-attention stack for one sample and returns
    /// the pooled readout node (1 x d_model).
    ///
    /// Keys and values arrive as plain matrices: the scheduler treats the
    /// substrate as data, so no gradient ever flows from task or replay
    /// losses into the head.
    pub fn pooled_graph(
        &self,
        g: &mut Graph,
        vars: &SchedVars,
        query: &str,
        keys: &Matrix,
        values: &Matrix,
        uniform_router: bool,
    ) -> Result<NodeId> {
        if keys.rows() == 0 {
            return Err(Error::InvalidArgument("cross-attention needs T >= 1".into()));
        }
        let (u0, pooled_u) = self.embedder.embed(query)?;
        let d = self.model_dim();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let u_pool = g.constant(pooled_u);
        let keys_t = g.constant(keys.transpose());
        let vals = g.constant(values.clone());
        let mut state = g.constant(u0);

        for (l, layer) in self.layers.iter().enumerate() {
            // Q = state * W_eff^T, factored as state W^T + sum_j (a_j/s_j) (state A_j^T) B_j^T
            let base_t = g.transpose(vars.base[l]);
            let mut q = g.matmul(state, base_t);
            let alpha = if uniform_router {
                let m = layer.experts.len();
                g.constant(Matrix::new(1, m, vec![1.0 / m as f64; m]).unwrap())
            } else {
                let router_t = g.transpose(vars.routers[l]);
                let logits = g.matmul(u_pool, router_t);
                g.softmax_rows(logits, 1.0)
            };
            for (j, expert) in layer.experts.iter().enumerate() {
                let a_t = g.transpose(vars.expert_a[l][j]);
                let down = g.matmul(state, a_t);
                let b_t = g.transpose(vars.expert_b[l][j]);
                let up = g.matmul(down, b_t);
                let scaled = g.scale(up, 1.0 / expert.scale);
                let aj = g.select(alpha, 0, j);
                let contrib = g.scalar_mul(aj, scaled);
                q = g.add(q, contrib);
            }
            let scores = g.matmul(q, keys_t);
            let scaled_scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scaled_scores, 1.0);
            let h = g.matmul(attn, vals);
            state = g.add(state, h);
        }
        Ok(g.mean_rows(state))
    }

    /// First-position answer logits (1 x answer vocab): the distribution the
    /// replay distillation acts on.
    pub fn answer_logits_graph(&self, g: &mut Graph, vars: &SchedVars, pooled: NodeId) -> NodeId {
        let w_t = g.transpose(vars.gen_w);
        let raw = g.matmul(pooled, w_t);
        g.add_row_broadcast(raw, vars.gen_b)
    }

    fn autoregressive_nll(
        &self,
        g: &mut Graph,
        pooled: NodeId,
        w: NodeId,
        b: NodeId,
        embed: NodeId,
        vocab: usize,
        target: &[usize],
    ) -> Result<(NodeId, Vec<usize>)> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        if target.iter().any(|&t| t >= vocab) {
            return Err(Error::InvalidArgument("target token outside vocabulary".into()));
        }
        let w_t = g.transpose(w);
        let mut nll: Option<NodeId> = None;
        let mut predicted = Vec::with_capacity(target.len());
        for (m, &tok) in target.iter().enumerate() {
            let state = if m == 0 {
                pooled
            } else {
                let prefix = g.gather_rows(embed, &target[..m]);
                let mean = g.mean_rows(prefix);
                g.add(pooled, mean)
            };
            let raw = g.matmul(state, w_t);
            let logits = g.add_row_broadcast(raw, b);
            let lse = g.log_sum_exp_rows(logits);
            let picked = g.select(logits, 0, tok);
            let term = g.sub(lse, picked);
            nll = Some(match nll {
                Some(acc) => g.add(acc, term),
                None => term,
            });
            let row = g.value(logits).row(0);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            predicted.push(best);
        }
        Ok((nll.unwrap(), predicted))
    }

    /// Task loss for one sample. Returns the loss node and the teacher-forced
    /// prediction.
    pub fn task_loss_graph(
        &self,
        g: &mut Graph,
        vars: &SchedVars,
        pooled: NodeId,
        keys: &Matrix,
        target: &TaskTarget,
        lambda_u: f64,
    ) -> Result<(NodeId, Prediction)> {
        match target {
            TaskTarget::Gen(tokens) => {
                let (nll, pred) = self.autoregressive_nll(
                    g,
                    pooled,
                    vars.gen_w,
                    vars.gen_b,
                    vars.gen_e,
                    self.gen.vocab(),
                    tokens,
                )?;
                Ok((nll, Prediction::Tokens(pred)))
            }
            TaskTarget::Step(tokens) => {
                let (nll, pred) = self.autoregressive_nll(
                    g,
                    pooled,
                    vars.step_w,
                    vars.step_b,
                    vars.step_e,
                    self.step.vocab(),
                    tokens,
                )?;
                Ok((nll, Prediction::Tokens(pred)))
            }
            TaskTarget::Span(ts, te) => {
                if ts > te {
                    return Err(Error::InvalidArgument(format!(
                        "span start {ts} exceeds end {te}"
                    )));
                }
                let t_frames = keys.rows();
                if *te >= t_frames {
                    return Err(Error::InvalidArgument("span outside the clip".into()));
                }
                let keys_t = g.constant(keys.transpose());
                let mut endpoint_nll: Option<NodeId> = None;
                let mut argmaxes = [0usize; 2];
                for (slot, (proj, tgt)) in [(vars.span_start, ts), (vars.span_end, te)]
                    .into_iter()
                    .enumerate()
                {
                    let p_t = g.transpose(proj);
                    let w = g.matmul(pooled, p_t);
                    let scores = g.matmul(w, keys_t);
                    let lse = g.log_sum_exp_rows(scores);
                    let picked = g.select(scores, 0, *tgt);
                    let term = g.sub(lse, picked);
                    endpoint_nll = Some(match endpoint_nll {
                        Some(acc) => g.add(acc, term),
                        None => term,
                    });
                    let row = g.value(scores).row(0);
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    argmaxes[slot] = best;
                }
                let (ps, pe) = (argmaxes[0].min(argmaxes[1]), argmaxes[0].max(argmaxes[1]));
                let penalty = lambda_u * (1.0 - tiou((ps, pe), (*ts, *te)));
                let penalty_node = g.scalar(penalty);
                let loss = g.add(endpoint_nll.unwrap(), penalty_node);
                Ok((loss, Prediction::Span(ps, pe)))
            }
        }
    }

    pub fn apply_grads(&mut self, grads: &SchedGrads, lr: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.router.axpy(-lr, &grads.routers[l]);
            for (j, expert) in layer.experts.iter_mut().enumerate() {
                expert.a.axpy(-lr, &grads.expert_a[l][j]);
                expert.b.axpy(-lr, &grads.expert_b[l][j]);
            }
        }
        self.gen.w.axpy(-lr, &grads.gen_w);
        self.gen.b.axpy(-lr, &grads.gen_b);
        self.gen.embed.axpy(-lr, &grads.gen_e);
        self.step.w.axpy(-lr, &grads.step_w);
        self.step.b.axpy(-lr, &grads.step_b);
        self.step.embed.axpy(-lr, &grads.step_e);
        self.span_start.axpy(-lr, &grads.span_start);
        self.span_end.axpy(-lr, &grads.span_end);
    }
}

/// Tape handles for scheduler parameters.
pub struct SchedVars {
    pub routers: Vec<NodeId>,
    pub expert_a: Vec<Vec<NodeId>>,
    pub expert_b: Vec<Vec<NodeId>>,
    /// Frozen base weights; variables only while seeding growth.
    pub base: Vec<NodeId>,
    pub gen_w: NodeId,
    pub gen_b: NodeId,
    pub gen_e: NodeId,
    pub step_w: NodeId,
    pub step_b: NodeId,
    pub step_e: NodeId,
    pub span_start: NodeId,
    pub span_end: NodeId,
}

impl SchedVars {
    pub fn collect(&self, g: &Graph, grads: &Gradients, with_base: bool) -> SchedGrads {
        SchedGrads {
            routers: self.routers.iter().map(|&id| grads.grad(g, id)).collect(),
            expert_a: self
                .expert_a
                .iter()
                .map(|l| l.iter().map(|&id| grads.grad(g, id)).collect())
                .collect(),
            expert_b: self
                .expert_b
                .iter()
                .map(|l| l.iter().map(|&id| grads.grad(g, id)).collect())
                .collect(),
            base: if with_base {
                self.base.iter().map(|&id| Some(grads.grad(g, id))).collect()
            } else {
                self.base.iter().map(|_| None).collect()
            },
            gen_w: grads.grad(g, self.gen_w),
            gen_b: grads.grad(g, self.gen_b),
            gen_e: grads.grad(g, self.gen_e),
            step_w: grads.grad(g, self.step_w),
            step_b: grads.grad(g, self.step_b),
            step_e: grads.grad(g, self.step_e),
            span_start: grads.grad(g, self.span_start),
            span_end: grads.grad(g, self.span_end),
        }
    }
}

/// Gradients for the plastic parameters. Base-weight gradients are carried
/// separately for growth seeding and are never applied.
#[derive(Clone, Debug)]
pub struct SchedGrads {
    pub routers: Vec<Matrix>,
    pub expert_a: Vec<Vec<Matrix>>,
    pub expert_b: Vec<Vec<Matrix>>,
    pub base: Vec<Option<Matrix>>,
    pub gen_w: Matrix,
    pub gen_b: Matrix,
    pub gen_e: Matrix,
    pub step_w: Matrix,
    pub step_b: Matrix,
    pub step_e: Matrix,
    pub span_start: Matrix,
    pub span_end: Matrix,
}

impl SchedGrads {
    fn applied<'a>(&'a self) -> impl Iterator<Item = &'a Matrix> {
        self.routers
            .iter()
            .chain(self.expert_a.iter().flatten())
            .chain(self.expert_b.iter().flatten())
            .chain([
                &self.gen_w,
                &self.gen_b,
                &self.gen_e,
                &self.step_w,
                &self.step_b,
                &self.step_e,
                &self.span_start,
                &self.span_end,
            ])
    }

    fn applied_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.extend(self.routers.iter_mut());
        for l in self.expert_a.iter_mut() {
            out.extend(l.iter_mut());
        }
        for l in self.expert_b.iter_mut() {
            out.extend(l.iter_mut());
        }
        out.push(&mut self.gen_w);
        out.push(&mut self.gen_b);
        out.push(&mut self.gen_e);
        out.push(&mut self.step_w);
        out.push(&mut self.step_b);
        out.push(&mut self.step_e);
        out.push(&mut self.span_start);
        out.push(&mut self.span_end);
        out
    }

    /// Norm over applied gradients (base-weight tracking excluded).
    pub fn norm(&self) -> f64 {
        self.applied()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for m in self.applied_mut() {
            for v in m.data_mut() {
                *v *= c;
            }
        }
    }

    /// Clips the joint norm to `max`, returning the pre-clip norm.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let n = self.norm();
        if n > max {
            self.scale(max / n);
        }
        n
    }

    /// Per-expert gradient over vec(A) then vec(B), the conflict signal.
    pub fn expert_grad_vector(&self, layer: usize, expert: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.expert_a[layer][expert].data().len() + self.expert_b[layer][expert].data().len(),
        );
        v.extend_from_slice(self.expert_a[layer][expert].data());
        v.extend_from_slice(self.expert_b[layer][expert].data());
        v
    }
}

/// Reference cross-attention: Q = q_source * w_q^T, H = softmax(Q K^T / sqrt(d)) V,
/// pooled readout r = mean(H) + mean(q_source).
pub fn cross_attend(
    q_source: &Matrix,
    w_q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if keys.rows() == 0 {
        return Err(Error::InvalidArgument("cross-attention needs T >= 1".into()));
    }
    let d = w_q.rows();
    let q = q_source.matmul_tb(w_q);
    let mut scores = q.matmul_tb(keys);
    let inv = 1.0 / (d as f64).sqrt();
    for v in scores.data_mut() {
        *v *= inv;
    }
    let mut h = Matrix::zeros(q_source.rows(), values.cols());
    for r in 0..scores.rows() {
        let attn = softmax_unchecked(scores.row(r), 1.0);
        for (t, &w) in attn.iter().enumerate() {
            for (o, &v) in h.row_mut(r).iter_mut().zip(values.row(t)) {
                *o += w * v;
            }
        }
    }
    let mut pooled = Matrix::zeros(1, values.cols());
    let inv_rows = 1.0 / q_source.rows() as f64;
    for r in 0..h.rows() {
        for (p, (&hv, &uv)) in pooled
            .row_mut(0)
            .iter_mut()
            .zip(h.row(r).iter().zip(q_source.row(r)))
        {
            *p += (hv + uv) * inv_rows;
        }
    }
    Ok((h, pooled))
}

/// KL(softmax(teacher/T) || softmax(student/T)) for one logit pair.
pub fn replay_pair_kl(teacher_logits: &[f64], student_logits: &[f64], t_kd: f64) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::InvalidArgument("replay logit length mismatch".into()));
    }
    if !(t_kd > 0.0) {
        return Err(Error::InvalidArgument("distillation temperature must be positive".into()));
    }
    let p = ProbVector::new(softmax_unchecked(teacher_logits, t_kd))?;
    let q = ProbVector::new(softmax_unchecked(student_logits, t_kd))?;
    crate::numeric::kl_divergence(&p, &q)
}
