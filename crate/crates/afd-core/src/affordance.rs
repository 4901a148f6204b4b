//! The shared, slowly-varying substrate: frame features -> affordance
//! distributions -> sparse mixture tokens -> projected keys/values, plus the
//! stability loss that is the only training signal this head ever receives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::numeric::matrix::Matrix;
use crate::numeric::prob::ProbVector;

/// A weak supervision span: a set of frames paired with candidate vocabulary
/// entries that should capture probability mass somewhere in the span.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeakSpan {
    pub frames: Vec<usize>,
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffordanceHead {
    /// Frame encoder, single hidden layer with tanh: hidden x d_v.
    pub enc_w1: Matrix,
    pub enc_b1: Matrix,
    /// d_z x hidden.
    pub enc_w2: Matrix,
    pub enc_b2: Matrix,
    /// Vocabulary score vectors, |V_A| x d_z.
    pub scorer: Matrix,
    /// Token embedding table, |V_A| x d_a.
    pub embed: Matrix,
    /// Projections into the scheduler hidden space, d_model x d_a.
    pub proj_k: Matrix,
    pub proj_v: Matrix,
    pub temperature: f64,
    pub top_l: usize,
}

/// Frozen deep copy of the head taken at a task boundary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherSnapshot {
    head: AffordanceHead,
}

impl TeacherSnapshot {
    pub fn head(&self) -> &AffordanceHead {
        &self.head
    }
}

/// Per-clip output of the head.
#[derive(Clone, Debug)]
pub struct AffordanceTokens {
    /// Per-frame distributions over the vocabulary.
    pub dists: Vec<ProbVector>,
    /// Sparse renormalized top-L mixtures.
    pub mixtures: Vec<ProbVector>,
    /// Continuous tokens, T x d_a.
    pub tokens: Matrix,
    /// Projected keys and values, T x d_model.
    pub keys: Matrix,
    pub values: Matrix,
}

/// Gradients of the stability loss; only the parameters the loss touches.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub enc_w1: Matrix,
    pub enc_b1: Matrix,
    pub enc_w2: Matrix,
    pub enc_b2: Matrix,
    pub scorer: Matrix,
}

impl HeadGrads {
    pub fn zeros_like(head: &AffordanceHead) -> Self {
        Self {
            enc_w1: Matrix::zeros(head.enc_w1.rows(), head.enc_w1.cols()),
            enc_b1: Matrix::zeros(1, head.enc_b1.cols()),
            enc_w2: Matrix::zeros(head.enc_w2.rows(), head.enc_w2.cols()),
            enc_b2: Matrix::zeros(1, head.enc_b2.cols()),
            scorer: Matrix::zeros(head.scorer.rows(), head.scorer.cols()),
        }
    }

    pub fn norm(&self) -> f64 {
        let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
        (sq(&self.enc_w1) + sq(&self.enc_b1) + sq(&self.enc_w2) + sq(&self.enc_b2)
            + sq(&self.scorer))
        .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for m in [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.scorer,
        ] {
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
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        // Box-Muller keeps us off rand_distr for one distribution.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    m
}

impl AffordanceHead {
    pub fn new(cfg: &ModelConfig, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.encoder_hidden;
        Self {
            enc_w1: gaussian(rng, h, feature_dim, 1.0 / (feature_dim as f64).sqrt()),
            enc_b1: Matrix::zeros(1, h),
            enc_w2: gaussian(rng, cfg.latent_dim, h, 1.0 / (h as f64).sqrt()),
            enc_b2: Matrix::zeros(1, cfg.latent_dim),
            scorer: gaussian(rng, cfg.vocab_a, cfg.latent_dim, 0.1 / (cfg.latent_dim as f64).sqrt()),
            embed: gaussian(rng, cfg.vocab_a, cfg.token_dim, 0.5),
            proj_k: gaussian(rng, cfg.model_dim, cfg.token_dim, 1.0 / (cfg.token_dim as f64).sqrt()),
            proj_v: gaussian(rng, cfg.model_dim, cfg.token_dim, 1.0 / (cfg.token_dim as f64).sqrt()),
            temperature: cfg.temperature,
            top_l: cfg.top_l,
        }
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot { head: self.clone() }
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_w1.cols()
    }

    /// f_st: frames (T x d_v) -> latents (T x d_z).
    pub fn encode(&self, frames: &Matrix) -> Matrix {
        let mut h = frames.matmul_tb(&self.enc_w1);
        for r in 0..h.rows() {
            for (v, &b) in h.row_mut(r).iter_mut().zip(self.enc_b1.row(0)) {
                *v = (*v + b).tanh();
            }
        }
        let mut z = h.matmul_tb(&self.enc_w2);
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(self.enc_b2.row(0)) {
                *v += b;
            }
        }
        z
    }

    /// Per-frame affordance distributions softmax(<w_a, f_st(X_t)> / tau).
    pub fn distribution(&self, frames: &Matrix) -> Result<Vec<ProbVector>> {
        if frames.rows() == 0 {
            return Err(Error::InvalidArgument("need at least one frame".into()));
        }
        if frames.cols() != self.feature_dim() {
            return Err(Error::InvalidArgument(format!(
                "frame width {} does not match encoder input {}",
                frames.cols(),
                self.feature_dim()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidArgument("frames must be finite".into()));
        }
        let z = self.encode(frames);
        let scores = z.matmul_tb(&self.scorer);
        (0..scores.rows())
            .map(|r| crate::numeric::softmax(scores.row(r), self.temperature))
            .collect()
    }

    /// Full forward pass. With `bypass` the encoder output is used directly
    /// as the token (distributions are still produced for the stability
    /// loss and diagnostics).
    pub fn forward(&self, frames: &Matrix, bypass: bool) -> Result<AffordanceTokens> {
        let dists = self.distribution(frames)?;
        let mixtures: Vec<ProbVector> = dists
            .iter()
            .map(|p| topl_mixture(p, self.top_l))
            .collect::<Result<_>>()?;
        let tokens = if bypass {
            let z = self.encode(frames);
            if z.cols() != self.embed.cols() {
                return Err(Error::InvalidArgument(
                    "token bypass requires latent_dim == token_dim".into(),
                ));
            }
            z
        } else {
            self.tokens_from_mixtures(&mixtures)
        };
        let keys = tokens.matmul_tb(&self.proj_k);
        let values = tokens.matmul_tb(&self.proj_v);
        Ok(AffordanceTokens {
            dists,
            mixtures,
            tokens,
            keys,
            values,
        })
    }

    /// A_t = sum_a q_t(a) E_A[a], stacked over frames.
    pub fn tokens_from_mixtures(&self, mixtures: &[ProbVector]) -> Matrix {
        let mut out = Matrix::zeros(mixtures.len(), self.embed.cols());
        for (t, q) in mixtures.iter().enumerate() {
            for (a, &w) in q.as_slice().iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &e) in out.row_mut(t).iter_mut().zip(self.embed.row(a)) {
                    *o += w * e;
                }
            }
        }
        out
    }

    /// Tape forward producing the per-frame distribution node (T x |V_A|)
    /// with encoder and scorer registered as variables.
    fn distribution_graph(&self, g: &mut Graph, vars: &HeadVars, frames: &Matrix) -> NodeId {
        let x = g.constant(frames.clone());
        let w1t = g.transpose(vars.enc_w1);
        let pre1 = g.matmul(x, w1t);
        let pre1b = g.add_row_broadcast(pre1, vars.enc_b1);
        let h = g.tanh(pre1b);
        let w2t = g.transpose(vars.enc_w2);
        let pre2 = g.matmul(h, w2t);
        let z = g.add_row_broadcast(pre2, vars.enc_b2);
        let st = g.transpose(vars.scorer);
        let scores = g.matmul(z, st);
        g.softmax_rows(scores, self.temperature)
    }

    /// Blended stability loss over a batch of clips:
    /// beta * [-sum_l log(sum_{t in S_l, a in C_l} P_t(a))]
    ///   + (1 - beta) * (1/T) sum_t KL(teacher_t || P_t),
    /// averaged over clips. Gradients touch head parameters only.
    pub fn stability_loss(
        &self,
        teacher: &TeacherSnapshot,
        clips: &[(&Matrix, &[WeakSpan])],
        beta: f64,
    ) -> Result<(f64, HeadGrads)> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta = {beta} outside [0, 1]")));
        }
        if clips.is_empty() {
            return Ok((0.0, HeadGrads::zeros_like(self)));
        }
        let vocab = self.scorer.rows();

        let mut g = Graph::new();
        let vars = HeadVars::register(&mut g, self);

        let mut per_clip: Vec<NodeId> = Vec::with_capacity(clips.len());
        for (frames, spans) in clips {
            let t_frames = frames.rows();
            for span in spans.iter() {
                if span.frames.iter().any(|&t| t >= t_frames) {
                    return Err(Error::InvalidArgument(
                        "weak span frame index out of range".into(),
                    ));
                }
                if span.candidates.iter().any(|&a| a >= vocab) {
                    return Err(Error::InvalidArgument(
                        "weak span candidate outside vocabulary".into(),
                    ));
                }
            }
            let p = self.distribution_graph(&mut g, &vars, frames);

            let mut terms: Vec<NodeId> = Vec::new();
            if beta > 0.0 {
                for span in spans.iter() {
                    let mut mask = Matrix::zeros(t_frames, vocab);
                    for &t in &span.frames {
                        for &a in &span.candidates {
                            mask.set(t, a, 1.0);
                        }
                    }
                    let mask = g.constant(mask);
                    let masked = g.hadamard(p, mask);
                    let total = g.sum_all(masked);
                    let log = g.ln(total);
                    terms.push(g.scale(log, -beta));
                }
            }
            if beta < 1.0 {
                let teacher_p = teacher_dist_matrix(teacher.head(), frames)?;
                let entropy: f64 = teacher_p
                    .data()
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum();
                let tp = g.constant(teacher_p);
                let logp = g.ln(p);
                let cross = g.hadamard(tp, logp);
                let cross_sum = g.sum_all(cross);
                let kl_var = g.scale(cross_sum, -(1.0 - beta) / t_frames as f64);
                let kl_const = g.scalar((1.0 - beta) * entropy / t_frames as f64);
                terms.push(g.add(kl_var, kl_const));
            }
            let clip_loss = match terms.len() {
                0 => g.scalar(0.0),
                _ => {
                    let mut acc = terms[0];
                    for &t in &terms[1..] {
                        acc = g.add(acc, t);
                    }
                    acc
                }
            };
            per_clip.push(clip_loss);
        }

        let mut total = per_clip[0];
        for &c in &per_clip[1..] {
            total = g.add(total, c);
        }
        let loss = g.scale(total, 1.0 / clips.len() as f64);
        let value = g.scalar_value(loss);
        let grads = g.backward(loss);
        Ok((value, vars.collect(&g, &grads)))
    }

    pub fn apply_grads(&mut self, grads: &HeadGrads, lr: f64) {
        self.enc_w1.axpy(-lr, &grads.enc_w1);
        self.enc_b1.axpy(-lr, &grads.enc_b1);
        self.enc_w2.axpy(-lr, &grads.enc_w2);
        self.enc_b2.axpy(-lr, &grads.enc_b2);
        self.scorer.axpy(-lr, &grads.scorer);
    }

    /// Flat view of the trainable head parameters, fixed order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.enc_w1, &self.enc_b1, &self.enc_w2, &self.enc_b2, &self.scorer] {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn load_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0;
        for m in [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.scorer,
        ] {
            let n = m.data().len();
            if pos + n > flat.len() {
                return Err(Error::InvalidArgument("flat head vector too short".into()));
            }
            m.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        if pos != flat.len() {
            return Err(Error::InvalidArgument("flat head vector too long".into()));
        }
        Ok(())
    }
}

struct HeadVars {
    enc_w1: NodeId,
    enc_b1: NodeId,
    enc_w2: NodeId,
    enc_b2: NodeId,
    scorer: NodeId,
}

impl HeadVars {
    fn register(g: &mut Graph, head: &AffordanceHead) -> Self {
        Self {
            enc_w1: g.var(head.enc_w1.clone()),
            enc_b1: g.var(head.enc_b1.clone()),
            enc_w2: g.var(head.enc_w2.clone()),
            enc_b2: g.var(head.enc_b2.clone()),
            scorer: g.var(head.scorer.clone()),
        }
    }

    fn collect(&self, g: &Graph, grads: &crate::graph::Gradients) -> HeadGrads {
        HeadGrads {
            enc_w1: grads.grad(g, self.enc_w1),
            enc_b1: grads.grad(g, self.enc_b1),
            enc_w2: grads.grad(g, self.enc_w2),
            enc_b2: grads.grad(g, self.enc_b2),
            scorer: grads.grad(g, self.scorer),
        }
    }
}

fn teacher_dist_matrix(head: &AffordanceHead, frames: &Matrix) -> Result<Matrix> {
    let dists = head.distribution(frames)?;
    let mut m = Matrix::zeros(dists.len(), dists[0].len());
    for (r, p) in dists.iter().enumerate() {
        m.row_mut(r).copy_from_slice(p.as_slice());
    }
    Ok(m)
}

/// Keeps the L largest-probability categories (ties to the lower index) and
/// renormalizes them to sum 1. The result keeps the original length.
pub fn topl_mixture(p: &ProbVector, l: usize) -> Result<ProbVector> {
    if l == 0 {
        return Err(Error::InvalidArgument("top-L needs L >= 1".into()));
    }
    if l > p.len() {
        return Err(Error::InvalidArgument(format!(
            "top-L = {l} exceeds vocabulary size {}",
            p.len()
        )));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        p.as_slice()[b]
            .partial_cmp(&p.as_slice()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let kept = &order[..l];
    let total: f64 = kept.iter().map(|&i| p.as_slice()[i]).sum();
    let mut out = vec![0.0; p.len()];
    for &i in kept {
        out[i] = p.as_slice()[i] / total;
    }
    ProbVector::new(out)
}

/// Mean prototype cosine distance (1/|P|) sum_p (1 - cos(mu_p, mu_p')).
pub fn prototype_drift(prev: &[Vec<f64>], curr: &[Vec<f64>]) -> Result<f64> {
    if prev.len() != curr.len() {
        return Err(Error::InvalidArgument(format!(
            "prototype sets differ in size: {} vs {}",
            prev.len(),
            curr.len()
        )));
    }
    if prev.is_empty() {
        return Err(Error::InvalidArgument("empty prototype set".into()));
    }
    let mut total = 0.0;
    for (a, b) in prev.iter().zip(curr.iter()) {
        if a.len() != b.len() {
            return Err(Error::InvalidArgument("prototype dimension mismatch".into()));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        };
        total += 1.0 - cos;
    }
    Ok(total / prev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, softmax};
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_a: 6,
            token_dim: 4,
            latent_dim: 4,
            encoder_hidden: 5,
            model_dim: 4,
            temperature: 1.0,
            top_l: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_head(seed: u64) -> AffordanceHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AffordanceHead::new(&tiny_cfg(), 3, &mut rng)
    }

    fn frames(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn uniform_when_scorer_rows_equal() {
        let mut head = tiny_head(1);
        for r in 0..head.scorer.rows() {
            for c in 0..head.scorer.cols() {
                head.scorer.set(r, c, 0.3 * c as f64);
            }
        }
        let p = head.distribution(&frames(2, 3, 2)).unwrap();
        for row in &p {
            for &v in row.as_slice() {
                assert!((v - 1.0 / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distribution_rejects_mismatched_frames() {
        let head = tiny_head(1);
        assert!(head.distribution(&frames(2, 4, 3)).is_err());
        assert!(head.distribution(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn temperature_sharpening_ratio() {
        // score gap 0.1 at tau = 0.07 gives probability ratio e^{0.1/0.07}
        let p = softmax(&[0.1, 0.0], 0.07).unwrap();
        let ratio = p.as_slice()[0] / p.as_slice()[1];
        assert!((ratio - (0.1f64 / 0.07).exp()).abs() < 1e-9);
        assert!((ratio - 4.17).abs() < 0.01);
    }

    #[test]
    fn temperature_monotonicity() {
        let head = tiny_head(7);
        let f = frames(4, 3, 8);
        let z = head.encode(&f);
        let scores = z.matmul_tb(&head.scorer);
        for r in 0..scores.rows() {
            let hot = softmax(scores.row(r), 0.05).unwrap();
            let cold = softmax(scores.row(r), 1.0).unwrap();
            assert!(hot.max() >= cold.max() - 1e-12);
        }
    }

    #[test]
    fn topl_examples() {
        let p = softmax(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let q = topl_mixture(&p, 2).unwrap();
        assert!((q.as_slice()[0] - 0.73106).abs() < 1e-5);
        assert!((q.as_slice()[1] - 0.26894).abs() < 1e-5);
        assert_eq!(q.as_slice()[2], 0.0);

        let full = topl_mixture(&p, 3).unwrap();
        for (a, b) in full.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        let one = topl_mixture(&p, 1).unwrap();
        assert_eq!(one.as_slice(), &[1.0, 0.0, 0.0]);

        // ties broken by lower index
        let tie = ProbVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let q = topl_mixture(&tie, 2).unwrap();
        assert_eq!(q.as_slice(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn topl_support_and_sum_property() {
        let head = tiny_head(11);
        let f = frames(5, 3, 12);
        let out = head.forward(&f, false).unwrap();
        for q in &out.mixtures {
            let support = q.as_slice().iter().filter(|&&v| v > 0.0).count();
            assert!(support <= head.top_l);
            let sum: f64 = q.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tokens_one_hot_and_average() {
        let head = tiny_head(3);
        let one_hot = ProbVector::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = head.tokens_from_mixtures(&[one_hot]);
        assert_eq!(t.row(0), head.embed.row(2));

        let half = ProbVector::new(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let t = head.tokens_from_mixtures(&[half]);
        for (i, &v) in t.row(0).iter().enumerate() {
            let want = 0.5 * (head.embed.at(0, i) + head.embed.at(1, i));
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_lie_in_convex_hull_of_selected_rows() {
        // 2-D table, 3 selected rows: solve barycentric coordinates and check
        // they match the mixture and stay inside [0, 1].
        let mut head = tiny_head(4);
        head.embed = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![5.0, 5.0],
            vec![-3.0, 1.0],
            vec![1.0, -4.0],
        ])
        .unwrap();
        let q = ProbVector::new(vec![0.2, 0.5, 0.3, 0.0, 0.0, 0.0]).unwrap();
        let t = head.tokens_from_mixtures(&[q.clone()]);
        let (p0, p1, p2) = (head.embed.row(0), head.embed.row(1), head.embed.row(2));
        // barycentric solve on the triangle (p0, p1, p2)
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let l1 = ((t.at(0, 0) - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (t.at(0, 1) - p0[1])) / det;
        let l2 = ((p1[0] - p0[0]) * (t.at(0, 1) - p0[1]) - (t.at(0, 0) - p0[0]) * (p1[1] - p0[1])) / det;
        let l0 = 1.0 - l1 - l2;
        assert!((l0 - 0.2).abs() < 1e-9 && (l1 - 0.5).abs() < 1e-9 && (l2 - 0.3).abs() < 1e-9);
        for l in [l0, l1, l2] {
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn tokens_invariant_to_score_shift() {
        let head = tiny_head(5);
        let f = frames(3, 3, 6);
        let base = head.forward(&f, false).unwrap();

        // shifting every vocabulary score by a constant leaves tokens unchanged
        let z = head.encode(&f);
        let mut shifted_scores = z.matmul_tb(&head.scorer);
        for v in shifted_scores.data_mut() {
            *v += 3.7;
        }
        let mixtures: Vec<ProbVector> = (0..shifted_scores.rows())
            .map(|r| {
                let p = softmax(shifted_scores.row(r), head.temperature).unwrap();
                topl_mixture(&p, head.top_l).unwrap()
            })
            .collect();
        let tokens = head.tokens_from_mixtures(&mixtures);
        for (a, b) in tokens.data().iter().zip(base.tokens.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stability_zero_against_self_teacher() {
        let head = tiny_head(9);
        let teacher = head.snapshot();
        let f = frames(4, 3, 10);
        let spans: Vec<WeakSpan> = vec![];
        let (loss, grads) = head
            .stability_loss(&teacher, &[(&f, spans.as_slice())], 0.0)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.norm() < 1e-10, "gradient norm {}", grads.norm());
    }

    #[test]
    fn stability_full_coverage_span_is_minus_log_t() {
        let head = tiny_head(13);
        let f = frames(4, 3, 14);
        let spans = vec![WeakSpan {
            frames: (0..4).collect(),
            candidates: (0..6).collect(),
        }];
        let teacher = head.snapshot();
        let (loss, _) = head
            .stability_loss(&teacher, &[(&f, spans.as_slice())], 1.0)
            .unwrap();
        assert!((loss - (-(4.0f64).ln())).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn stability_gradient_matches_finite_differences() {
        let head = tiny_head(15);
        let mut teacher_head = tiny_head(16);
        teacher_head.temperature = head.temperature;
        let teacher = teacher_head.snapshot();
        let f = frames(3, 3, 17);
        let spans = vec![
            WeakSpan { frames: vec![0, 1], candidates: vec![1, 4] },
            WeakSpan { frames: vec![2], candidates: vec![0, 2, 5] },
        ];
        let beta = 0.5;

        let (_, grads) = head
            .stability_loss(&teacher, &[(&f, spans.as_slice())], beta)
            .unwrap();
        let mut analytic = Vec::new();
        for m in [&grads.enc_w1, &grads.enc_b1, &grads.enc_w2, &grads.enc_b2, &grads.scorer] {
            analytic.extend_from_slice(m.data());
        }

        let x0 = head.flatten_trainable();
        let f_obj = |p: &[f64]| {
            let mut h = head.clone();
            h.load_trainable(p).unwrap();
            h.stability_loss(&teacher, &[(&f, spans.as_slice())], beta)
                .unwrap()
                .0
        };
        let err = grad_check(f_obj, &x0, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "stability gradient error {err}");
    }

    #[test]
    fn stability_rejects_bad_spans_and_beta() {
        let head = tiny_head(19);
        let teacher = head.snapshot();
        let f = frames(2, 3, 20);
        let bad_frame = vec![WeakSpan { frames: vec![5], candidates: vec![0] }];
        assert!(head
            .stability_loss(&teacher, &[(&f, bad_frame.as_slice())], 0.5)
            .is_err());
        let bad_cand = vec![WeakSpan { frames: vec![0], candidates: vec![99] }];
        assert!(head
            .stability_loss(&teacher, &[(&f, bad_cand.as_slice())], 0.5)
            .is_err());
        let spans: Vec<WeakSpan> = vec![];
        assert!(head
            .stability_loss(&teacher, &[(&f, spans.as_slice())], 1.5)
            .is_err());
    }

    #[test]
    fn prototype_drift_examples() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        assert!(prototype_drift(&a, &a).unwrap().abs() < 1e-12);

        let neg: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!((prototype_drift(&a, &neg).unwrap() - 2.0).abs() < 1e-12);

        // rotate the first prototype 90 degrees, keep the rest
        let mut rot = a.clone();
        rot[0] = vec![0.0, 1.0];
        assert!((prototype_drift(&a, &rot).unwrap() - 0.25).abs() < 1e-12);

        assert!(prototype_drift(&a, &a[..2].to_vec()).is_err());
    }
}
