//! Task-time classifier: a single affine layer with softmax over the
//! aggregated vertex features.
//!
//! Training runs in two stages. Stage 1 fits the classifier and the
//! propagation weight `α` with cross-entropy on the support vertices plus
//! mixup copies of them. Stage 2 freezes `α`, re-initializes the classifier
//! and trains it on the support vertices only, against the labels and the
//! stage-1 classifier's predictions:
//!
//! ```text
//! L = (1/Nk) Σ_i β·CE(p_θ(V_i), y_i) + (1 − β)·KL(p_θ(V_i) ‖ p_θ0(V_i))
//! ```

use crate::dataset::Episode;
use crate::error::{check_dim, Error, Result};
use crate::graph::{propagate, propagate_alpha_grad, PropagationConfig, TaskGraph};
use crate::linalg::Matrix;
use crate::optim::Adam;
use crate::rng::{mix_seed, rng_from_seed, uniform_symmetric};
use crate::scalar::{softmax, Scalar};

use rand::Rng;

/// XORed into the run seed for the stage-2 re-initialization.
pub const STAGE2_SEED_XOR: u64 = 0xD15C_0FFE_E5EE_D002;
const MIXUP_STREAM: u64 = 0x4D49_5855;

/// Which way round the distillation divergence is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`.
    #[default]
    StudentTeacher,
    /// `KL(teacher ‖ student)`.
    TeacherStudent,
}

impl std::str::FromStr for KlDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student_teacher" => Ok(Self::StudentTeacher),
            "teacher_student" => Ok(Self::TeacherStudent),
            other => Err(format!(
                "unknown kl direction {other:?} (student_teacher|teacher_student)"
            )),
        }
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StudentTeacher => "student_teacher",
            Self::TeacherStudent => "teacher_student",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrainConfig {
    pub lambda_mix: f64,
    /// Mixup copies drawn per support vertex.
    pub copies: usize,
    pub beta: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub kl_direction: KlDirection,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 0.95,
            copies: 120,
            beta: 0.5,
            stage1_epochs: 11,
            stage2_epochs: 1000,
            lr1: 1e-2,
            lr2: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kl_direction: KlDirection::StudentTeacher,
            seed: 0,
        }
    }
}

impl TaskTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda_mix)?;
        check_beta(self.beta)?;
        for (name, lr) in [("lr1", self.lr1), ("lr2", self.lr2)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::param("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::param("lambda_mix", format!("{lambda} outside (0, 1]")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::param("beta", format!("{beta} outside [0, 1]")))
    }
}

/// Classifier weights (`dim × N`), bias (`N`) and the propagation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub alpha: T,
}

/// Gradient with the same layout as [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub alpha: T,
}

impl<T: Scalar> ClassifierParams<T> {
    /// Glorot-uniform weights from `seed`, zero bias.
    pub fn init(dim: usize, classes: usize, alpha: T, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let limit = (6.0 / (dim + classes) as f64).sqrt();
        let data = (0..dim * classes)
            .map(|_| uniform_symmetric(&mut rng, limit))
            .collect();
        Self {
            weight: Matrix::from_vec(dim, classes, data),
            bias: vec![T::zero(); classes],
            alpha,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite()) && self.alpha.is_finite()
    }

    pub fn logits(&self, v: &[T]) -> Result<Vec<T>> {
        check_dim("classifier input", self.input_dim(), v.len())?;
        let mut z = self.weight.vecmat(v)?;
        for (zi, &b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }
}

/// `softmax(vᵀW + b)`.
pub fn forward<T: Scalar>(params: &ClassifierParams<T>, v: &[T]) -> Result<Vec<T>> {
    Ok(softmax(&params.logits(v)?))
}

/// `−log p[label]` with `p` clamped away from zero.
pub fn ce_loss<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs.get(label).ok_or_else(|| {
        Error::param("label", format!("{label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(T::prob_floor()).ln())
}

/// `Σ p_i log(p_i / q_i)` with `0·log 0 = 0` and `q` clamped away from zero.
pub fn kl_div<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    check_dim("kl_div", p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi / qi.max(T::prob_floor())).ln())
        .sum())
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn predict<T: Scalar>(params: &ClassifierParams<T>, rows: &Matrix<T>) -> Result<Vec<usize>> {
    rows.row_iter()
        .map(|r| {
            let z = params.logits(r)?;
            let mut best = 0;
            for (c, &zc) in z.iter().enumerate().skip(1) {
                if zc > z[best] {
                    best = c;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Mean cross-entropy of `params` over `rows`.
pub fn mean_ce<T: Scalar>(params: &ClassifierParams<T>, rows: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_dim("labels per row", rows.rows(), labels.len())?;
    let total = rows
        .row_iter()
        .zip(labels)
        .map(|(r, &y)| ce_loss(&forward(params, r)?, y))
        .sum::<Result<T>>()?;
    Ok(total / T::lit(rows.rows() as f64))
}

/// Mixup pairing: augmented row `r` mixes base row `pairs[r].0` with
/// partner `pairs[r].1` and keeps the base row's label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixupPlan {
    pub pairs: Vec<(usize, usize)>,
}

impl MixupPlan {
    /// For each base row `i` in order, `copies` partners drawn uniformly from
    /// `[0, base_rows)` (the base row itself included).
    pub fn draw(base_rows: usize, copies: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::with_capacity(base_rows * copies);
        for i in 0..base_rows {
            for _ in 0..copies {
                pairs.push((i, rng.random_range(0..base_rows)));
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `λ·V_i + (1 − λ)·V_j` for every pair; `λ = 1` copies `V_i` exactly.
    pub fn materialize<T: Scalar>(&self, base: &Matrix<T>, lambda: T) -> Matrix<T> {
        let mut out = Matrix::zeros(self.pairs.len(), base.cols());
        let rest = T::one() - lambda;
        for (r, &(i, j)) in self.pairs.iter().enumerate() {
            if lambda == T::one() {
                out.row_mut(r).copy_from_slice(base.row(i));
                continue;
            }
            for ((o, &a), &b) in out.row_mut(r).iter_mut().zip(base.row(i)).zip(base.row(j)) {
                *o = lambda * a + rest * b;
            }
        }
        out
    }
}

/// Mixup copies of already aggregated support rows, labeled with their
/// base row's label.
pub fn mixup_augment<T: Scalar>(
    v_support: &Matrix<T>,
    labels: &[usize],
    lambda: f64,
    copies: usize,
    seed: u64,
) -> Result<(Matrix<T>, Vec<usize>)> {
    check_lambda(lambda)?;
    check_dim("labels per support row", v_support.rows(), labels.len())?;
    if v_support.rows() == 0 {
        return Err(Error::param("v_support", "needs at least one row"));
    }
    let plan = MixupPlan::draw(v_support.rows(), copies, seed);
    let rows = plan.materialize(v_support, T::lit(lambda));
    let out_labels = plan.pairs.iter().map(|&(i, _)| labels[i]).collect();
    Ok((rows, out_labels))
}

fn zero_grads<T: Scalar>(params: &ClassifierParams<T>) -> ClassifierGrads<T> {
    ClassifierGrads {
        weight: Matrix::zeros(params.input_dim(), params.classes()),
        bias: vec![T::zero(); params.classes()],
        alpha: T::zero(),
    }
}

/// Accumulates `x ⊗ dlogits` into the weight gradient.
fn add_outer<T: Scalar>(grad: &mut Matrix<T>, x: &[T], dlogits: &[T]) {
    for (d, &xd) in x.iter().enumerate() {
        for (g, &dl) in grad.row_mut(d).iter_mut().zip(dlogits) {
            *g += xd * dl;
        }
    }
}

/// Self-distillation objective over the original support rows. Teacher
/// predictions are constants. `grads.alpha` is always zero.
pub fn distill_loss<T: Scalar>(
    params: &ClassifierParams<T>,
    teacher: &ClassifierParams<T>,
    rows: &Matrix<T>,
    labels: &[usize],
    beta: f64,
    direction: KlDirection,
) -> Result<(T, ClassifierGrads<T>)> {
    check_beta(beta)?;
    check_dim("labels per row", rows.rows(), labels.len())?;
    check_dim("teacher classes", params.classes(), teacher.classes())?;
    let n = rows.rows();
    let beta = T::lit(beta);
    let rest = T::one() - beta;
    let scale = T::one() / T::lit(n as f64);
    let mut grads = zero_grads(params);
    let mut terms = Vec::with_capacity(n);
    for (r, &y) in rows.row_iter().zip(labels) {
        let z = params.logits(r)?;
        let p = softmax(&z);
        let q = forward(teacher, r)?;
        let ce = ce_loss(&p, y)?;
        let (kl, kl_grad) = match direction {
            KlDirection::StudentTeacher => {
                let kl = kl_div(&p, &q)?;
                let lse = crate::scalar::log_sum_exp(z.iter().copied());
                let g: Vec<T> = z
                    .iter()
                    .zip(&p)
                    .zip(&q)
                    .map(|((&zk, &pk), &qk)| pk * ((zk - lse) - qk.max(T::prob_floor()).ln() - kl))
                    .collect();
                (kl, g)
            }
            KlDirection::TeacherStudent => {
                let kl = kl_div(&q, &p)?;
                (kl, p.iter().zip(&q).map(|(&pk, &qk)| pk - qk).collect())
            }
        };
        terms.push(beta * ce + rest * kl);
        let dl: Vec<T> = p
            .iter()
            .zip(&kl_grad)
            .enumerate()
            .map(|(c, (&pc, &kg))| {
                let onehot = if c == y { T::one() } else { T::zero() };
                (beta * (pc - onehot) + rest * kg) * scale
            })
            .collect();
        add_outer(&mut grads.weight, r, &dl);
        for (gb, &d) in grads.bias.iter_mut().zip(&dl) {
            *gb += d;
        }
    }
    let total: T = terms.into_iter().sum();
    Ok((total / T::lit(n as f64), grads))
}

/// Stage-1 objective: mean cross-entropy over the support vertices and
/// their mixup copies, as a function of the classifier and `α`.
#[derive(Debug, Clone)]
pub struct Stage1Objective<'a, T> {
    v: &'a Matrix<T>,
    e_norm: &'a Matrix<T>,
    gamma: usize,
    labels: Vec<usize>,
    plan: MixupPlan,
    lambda: T,
}

impl<'a, T: Scalar> Stage1Objective<'a, T> {
    /// `labels` are the support labels; support vertices are rows
    /// `[0, labels.len())` of `v`.
    pub fn new(
        v: &'a Matrix<T>,
        e_norm: &'a Matrix<T>,
        gamma: usize,
        labels: Vec<usize>,
        plan: MixupPlan,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if labels.is_empty() || labels.len() > v.rows() {
            return Err(Error::param("labels", "must cover between 1 and all vertices"));
        }
        if let Some(&(i, j)) = plan.pairs.iter().find(|&&(i, j)| i.max(j) >= labels.len()) {
            return Err(Error::param("mixup plan", format!("pair ({i}, {j}) outside support")));
        }
        Ok(Self {
            v,
            e_norm,
            gamma,
            labels,
            plan,
            lambda: T::lit(lambda),
        })
    }

    pub fn training_rows(&self) -> usize {
        self.labels.len() + self.plan.len()
    }

    /// Loss and gradient with respect to weight, bias and `α`.
    pub fn evaluate(&self, params: &ClassifierParams<T>) -> Result<(T, ClassifierGrads<T>)> {
        let prop = PropagationConfig {
            alpha: params.alpha,
            gamma: self.gamma,
        };
        let v_new = propagate(self.v, self.e_norm, &prop)?;
        let ns = self.labels.len();
        let classes = params.classes();

        // Logits are affine in the input, so mixed-row logits mix the base
        // logits and every gradient flows back through the support rows.
        let support_logits: Vec<Vec<T>> = (0..ns)
            .map(|i| params.weight.vecmat(v_new.row(i)))
            .collect::<Result<_>>()?;
        let rows = T::lit(self.training_rows() as f64);
        let inv = T::one() / rows;
        let mut coef = Matrix::zeros(ns, classes);
        let mut bias_grad = vec![T::zero(); classes];
        let mut total = T::zero();

        let mut visit = |logits: Vec<T>, y: usize, parts: [(usize, T); 2]| -> Result<()> {
            let p = softmax(&logits);
            total += ce_loss(&p, y)?;
            for (c, &pc) in p.iter().enumerate() {
                let onehot = if c == y { T::one() } else { T::zero() };
                let d = (pc - onehot) * inv;
                bias_grad[c] += d;
                for &(row, w) in &parts {
                    if w != T::zero() {
                        coef[(row, c)] += w * d;
                    }
                }
            }
            Ok(())
        };

        for (i, &y) in self.labels.iter().enumerate() {
            let z: Vec<T> = support_logits[i]
                .iter()
                .zip(&params.bias)
                .map(|(&a, &b)| a + b)
                .collect();
            visit(z, y, [(i, T::one()), (i, T::zero())])?;
        }
        let rest = T::one() - self.lambda;
        for &(i, j) in &self.plan.pairs {
            let z: Vec<T> = support_logits[i]
                .iter()
                .zip(&support_logits[j])
                .zip(&params.bias)
                .map(|((&a, &b), &c)| self.lambda * a + rest * b + c)
                .collect();
            visit(z, self.labels[i], [(i, self.lambda), (j, rest)])?;
        }

        let v_support = Matrix::from_vec(ns, v_new.cols(), v_new.as_slice()[..ns * v_new.cols()].to_vec());
        let weight_grad = v_support.transpose().matmul(&coef)?;
        let mut upstream = Matrix::zeros(v_new.rows(), v_new.cols());
        let back = coef.matmul(&params.weight.transpose())?;
        upstream.as_mut_slice()[..ns * v_new.cols()].copy_from_slice(back.as_slice());
        let alpha_grad = propagate_alpha_grad(self.v, self.e_norm, &prop, &upstream)?;

        Ok((
            total * inv,
            ClassifierGrads {
                weight: weight_grad,
                bias: bias_grad,
                alpha: alpha_grad,
            },
        ))
    }
}

/// Trained parameters and the loss recorded before every step plus once
/// after the last one.
#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub params: ClassifierParams<T>,
    pub loss_trace: Vec<T>,
}

fn check_episode_graph<T: Scalar>(graph: &TaskGraph<T>, episode: &Episode) -> Result<()> {
    check_dim("graph vertices vs episode", episode.spec.total(), graph.vertex_count())
}

struct ClassifierAdam<T> {
    weight: Adam<T>,
    bias: Adam<T>,
    alpha: Option<Adam<T>>,
}

impl<T: Scalar> ClassifierAdam<T> {
    fn new(params: &ClassifierParams<T>, lr: f64, cfg: &TaskTrainConfig, train_alpha: bool) -> Self {
        let make = |len| Adam::new(len, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Self {
            weight: make(params.weight.as_slice().len()),
            bias: make(params.bias.len()),
            alpha: train_alpha.then(|| make(1)),
        }
    }

    fn step(&mut self, params: &mut ClassifierParams<T>, grads: &ClassifierGrads<T>) {
        self.weight
            .step(params.weight.as_mut_slice(), grads.weight.as_slice());
        self.bias.step(&mut params.bias, &grads.bias);
        if let Some(a) = &mut self.alpha {
            let mut x = [params.alpha];
            a.step(&mut x, &[grads.alpha]);
            params.alpha = x[0];
        }
    }
}

fn ensure_finite<T: Scalar>(loss: T, params: &ClassifierParams<T>, stage: &str) -> Result<()> {
    if loss.is_finite() && params.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure(format!("{stage}: loss {loss} or parameters non-finite")))
    }
}

/// First sub-stage: cross-entropy on support + mixup rows, training the
/// classifier and `α` with full-batch Adam.
pub fn train_stage1<T: Scalar>(
    graph: &TaskGraph<T>,
    episode: &Episode,
    cfg: &TaskTrainConfig,
    prop: &PropagationConfig<T>,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    check_episode_graph(graph, episode)?;
    let labels = episode.support_labels();
    let plan = MixupPlan::draw(labels.len(), cfg.copies, mix_seed(cfg.seed, MIXUP_STREAM));
    let objective = Stage1Objective::new(&graph.v, &graph.e_norm, prop.gamma, labels, plan, cfg.lambda_mix)?;
    let mut params = ClassifierParams::init(graph.v.cols(), episode.spec.n_way, prop.alpha, cfg.seed);
    let mut adam = ClassifierAdam::new(&params, cfg.lr1, cfg, true);
    let mut loss_trace = Vec::with_capacity(cfg.stage1_epochs + 1);
    for _ in 0..cfg.stage1_epochs {
        let (loss, grads) = objective.evaluate(&params)?;
        ensure_finite(loss, &params, "stage 1")?;
        loss_trace.push(loss);
        adam.step(&mut params, &grads);
    }
    let (loss, _) = objective.evaluate(&params)?;
    ensure_finite(loss, &params, "stage 1")?;
    loss_trace.push(loss);
    Ok(StageOutcome { params, loss_trace })
}

/// Second sub-stage: fresh classifier distilled from `teacher` on the
/// original support rows with `α` frozen at the teacher's value.
pub fn train_stage2<T: Scalar>(
    graph: &TaskGraph<T>,
    episode: &Episode,
    teacher: &ClassifierParams<T>,
    cfg: &TaskTrainConfig,
    prop: &PropagationConfig<T>,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    check_episode_graph(graph, episode)?;
    let frozen = PropagationConfig {
        alpha: teacher.alpha,
        gamma: prop.gamma,
    };
    let v_new = graph.propagate(&frozen)?;
    let ns = episode.spec.support_len();
    let support: Vec<usize> = (0..ns).collect();
    let rows = v_new.select_rows(&support);
    let labels = episode.support_labels();
    let mut params = ClassifierParams::init(
        graph.v.cols(),
        episode.spec.n_way,
        teacher.alpha,
        cfg.seed ^ STAGE2_SEED_XOR,
    );
    let mut adam = ClassifierAdam::new(&params, cfg.lr2, cfg, false);
    let mut loss_trace = Vec::with_capacity(cfg.stage2_epochs + 1);
    for _ in 0..cfg.stage2_epochs {
        let (loss, grads) = distill_loss(&params, teacher, &rows, &labels, cfg.beta, cfg.kl_direction)?;
        ensure_finite(loss, &params, "stage 2")?;
        loss_trace.push(loss);
        adam.step(&mut params, &grads);
    }
    let (loss, _) = distill_loss(&params, teacher, &rows, &labels, cfg.beta, cfg.kl_direction)?;
    ensure_finite(loss, &params, "stage 2")?;
    loss_trace.push(loss);
    Ok(StageOutcome { params, loss_trace })
}

/// Aggregated vertex features under the classifier's `α`.
pub fn aggregate<T: Scalar>(graph: &TaskGraph<T>, params: &ClassifierParams<T>, gamma: usize) -> Result<Matrix<T>> {
    graph.propagate(&PropagationConfig {
        alpha: params.alpha,
        gamma,
    })
}
