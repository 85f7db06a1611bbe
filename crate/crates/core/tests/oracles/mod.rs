//! Independent reference computations shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use fewshot::classifier::{mean_ce, Stage1Objective};
use fewshot::rng::rng_from_seed;
use fewshot::{
    contrast_loss, distill_loss, kl_div, propagate, ClassifierParams, KlDirection, Matrix, MixupPlan, Mlp,
    PropagationConfig, SparsifyRule, TaskGraph,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from_seed(seed)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = l2(a).max(l2(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn random_classifier(rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> ClassifierParams<f64> {
    ClassifierParams {
        weight: random_matrix(rng, dim, classes, 1.0),
        bias: (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect(),
        alpha: rng.random_range(0.2..1.5),
    }
}

fn flat(p: &ClassifierParams<f64>) -> Vec<f64> {
    let mut out = p.weight.as_slice().to_vec();
    out.extend_from_slice(&p.bias);
    out
}

fn unflat(template: &ClassifierParams<f64>, x: &[f64]) -> ClassifierParams<f64> {
    let w = template.weight.rows() * template.weight.cols();
    ClassifierParams {
        weight: Matrix::from_vec(template.weight.rows(), template.weight.cols(), x[..w].to_vec()),
        bias: x[w..].to_vec(),
        alpha: template.alpha,
    }
}

/// Worst relative error of the symmetric contrastive loss gradient.
pub fn contrast_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let b = rng.random_range(2..7);
            let w = rng.random_range(2..7);
            let tau = rng.random_range(0.1..1.0);
            let z1 = random_matrix(&mut rng, b, w, 1.0);
            let z2 = random_matrix(&mut rng, b, w, 1.0);
            let out = contrast_loss(&z1, &z2, tau).unwrap();
            let mut x = z1.as_slice().to_vec();
            x.extend_from_slice(z2.as_slice());
            let fd = central_diff(&x, |x| {
                let a = Matrix::from_vec(b, w, x[..b * w].to_vec());
                let c = Matrix::from_vec(b, w, x[b * w..].to_vec());
                contrast_loss(&a, &c, tau).unwrap().loss
            });
            let mut analytic = out.grad_z1.as_slice().to_vec();
            analytic.extend_from_slice(out.grad_z2.as_slice());
            rel_err(&analytic, &fd)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the encoder backward pass for a random linear
/// functional of the output.
pub fn encoder_worst(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..instances)
        .map(|i| {
            let depth = r.random_range(1..4);
            let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(2..6)).collect();
            let mut init = rng(seed ^ (i as u64 + 1));
            let net: Mlp<f64> = Mlp::glorot(&widths, &mut init);
            let mut net = net;
            let mut flat = net.to_flat();
            for p in flat.iter_mut() {
                *p += r.random_range(-0.1..0.1);
            }
            net.set_flat(&flat);
            let x: Vec<f64> = (0..widths[0]).map(|_| r.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..*widths.last().unwrap()).map(|_| r.random_range(-1.0..1.0)).collect();
            let trace = net.forward_trace(&x).unwrap();
            let mut grads = net.zeros_like();
            net.backward(&trace, &c, &mut grads);
            let mut probe = net.clone();
            let fd = central_diff(&flat, |p| {
                probe.set_flat(p);
                let y = probe.forward(&x).unwrap();
                y.iter().zip(&c).map(|(a, b)| a * b).sum()
            });
            rel_err(&grads.to_flat(), &fd)
        })
        .fold(0.0, f64::max)
}

struct DistillCase {
    student: ClassifierParams<f64>,
    teacher: ClassifierParams<f64>,
    rows: Matrix<f64>,
    labels: Vec<usize>,
}

fn distill_case(rng: &mut ChaCha8Rng) -> DistillCase {
    let dim = rng.random_range(2..6);
    let classes = rng.random_range(2..5);
    let n = rng.random_range(1..8);
    DistillCase {
        student: random_classifier(rng, dim, classes),
        teacher: random_classifier(rng, dim, classes),
        rows: random_matrix(rng, n, dim, 1.0),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

fn distill_err(case: &DistillCase, beta: f64, direction: KlDirection, loss: impl Fn(&ClassifierParams<f64>) -> f64) -> f64 {
    let (_, grads) = distill_loss(&case.student, &case.teacher, &case.rows, &case.labels, beta, direction).unwrap();
    let mut analytic = grads.weight.as_slice().to_vec();
    analytic.extend_from_slice(&grads.bias);
    let fd = central_diff(&flat(&case.student), |x| loss(&unflat(&case.student, x)));
    rel_err(&analytic, &fd)
}

/// Cross-entropy gradient (the `β = 1` objective) against finite
/// differences of the mean cross-entropy itself.
pub fn ce_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let case = distill_case(&mut rng);
            distill_err(&case, 1.0, KlDirection::StudentTeacher, |p| {
                mean_ce(p, &case.rows, &case.labels).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

/// KL gradient (the `β = 0` objective) in both directions against finite
/// differences of an explicit KL sum.
pub fn kl_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|i| {
            let case = distill_case(&mut rng);
            let direction = if i % 2 == 0 {
                KlDirection::StudentTeacher
            } else {
                KlDirection::TeacherStudent
            };
            distill_err(&case, 0.0, direction, |p| {
                let n = case.rows.rows() as f64;
                case.rows
                    .row_iter()
                    .map(|r| {
                        let ps = softmax_ref(&p.logits(r).unwrap());
                        let qs = softmax_ref(&case.teacher.logits(r).unwrap());
                        match direction {
                            KlDirection::StudentTeacher => kl_ref(&ps, &qs),
                            KlDirection::TeacherStudent => kl_ref(&qs, &ps),
                        }
                    })
                    .sum::<f64>()
                    / n
            })
        })
        .fold(0.0, f64::max)
}

/// Full self-distillation objective for random `β`.
pub fn distill_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|i| {
            let case = distill_case(&mut rng);
            let beta = rng.random_range(0.0..1.0);
            let direction = if i % 2 == 0 {
                KlDirection::StudentTeacher
            } else {
                KlDirection::TeacherStudent
            };
            distill_err(&case, beta, direction, |p| {
                distill_loss(p, &case.teacher, &case.rows, &case.labels, beta, direction)
                    .unwrap()
                    .0
            })
        })
        .fold(0.0, f64::max)
}

pub fn softmax_ref(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn kl_ref(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum()
}

pub struct Stage1Case {
    pub graph: TaskGraph<f64>,
    pub labels: Vec<usize>,
    pub plan: MixupPlan,
    pub lambda: f64,
    pub params: ClassifierParams<f64>,
}

pub fn stage1_case(rng: &mut ChaCha8Rng, gamma_seed: u64) -> Stage1Case {
    let classes = rng.random_range(2..4);
    let k = rng.random_range(1..3);
    let n = classes * k + rng.random_range(1..6);
    let dim = rng.random_range(3..6);
    let v = random_matrix(rng, n, dim, 1.0).map(|x| x.abs() + 0.1);
    let m = rng.random_range(1..n);
    let graph = TaskGraph::build(v, m, SparsifyRule::Union).unwrap();
    let labels = (0..classes * k).map(|i| i % classes).collect::<Vec<_>>();
    let copies = rng.random_range(0..4);
    let plan = MixupPlan::draw(labels.len(), copies, gamma_seed);
    let lambda = rng.random_range(0.5..1.0);
    let mut params = random_classifier(rng, dim, classes);
    params.weight = params.weight.scale(0.5);
    Stage1Case {
        graph,
        labels,
        plan,
        lambda,
        params,
    }
}

/// `∂L/∂α` of the stage-1 objective through `γ = 3` propagation.
pub fn alpha_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|i| {
            let case = stage1_case(&mut rng, seed ^ i as u64);
            let objective = Stage1Objective::new(
                &case.graph.v,
                &case.graph.e_norm,
                3,
                case.labels.clone(),
                case.plan.clone(),
                case.lambda,
            )
            .unwrap();
            let (_, grads) = objective.evaluate(&case.params).unwrap();
            let fd = central_diff(&[case.params.alpha], |a| {
                let mut p = case.params.clone();
                p.alpha = a[0];
                objective.evaluate(&p).unwrap().0
            });
            rel_err(&[grads.alpha], &fd)
        })
        .fold(0.0, f64::max)
}

/// Weight and bias gradient of the stage-1 objective, mixup rows included.
pub fn stage1_weight_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|i| {
            let case = stage1_case(&mut rng, seed ^ i as u64);
            let objective = Stage1Objective::new(
                &case.graph.v,
                &case.graph.e_norm,
                3,
                case.labels.clone(),
                case.plan.clone(),
                case.lambda,
            )
            .unwrap();
            let (_, grads) = objective.evaluate(&case.params).unwrap();
            let mut analytic = grads.weight.as_slice().to_vec();
            analytic.extend_from_slice(&grads.bias);
            let fd = central_diff(&flat(&case.params), |x| {
                objective.evaluate(&unflat(&case.params, x)).unwrap().0
            });
            rel_err(&analytic, &fd)
        })
        .fold(0.0, f64::max)
}

fn dense_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let p = b[0].len();
    let inner = b.len();
    (0..n)
        .map(|i| {
            (0..p)
                .map(|j| (0..inner).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.to_vec()).collect()
}

/// Worst relative error of `propagate` against the materialized
/// `(αI + E)^γ V` over `graphs` random 10-vertex graphs and `γ ∈ 0..=5`.
pub fn propagation_worst(graphs: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0_f64;
    for _ in 0..graphs {
        let n = 10;
        let d = rng.random_range(2..8);
        let v = random_matrix(&mut rng, n, d, 1.0).map(|x| x.abs() + 0.1);
        let m = rng.random_range(1..n);
        let graph = TaskGraph::build(v.clone(), m, SparsifyRule::Union).unwrap();
        let alpha = rng.random_range(-1.0..2.0);
        let e = to_rows(&graph.e_norm);
        let step: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| e[i][j] + if i == j { alpha } else { 0.0 }).collect())
            .collect();
        let mut power: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for gamma in 0..=5 {
            if gamma > 0 {
                power = dense_matmul(&power, &step);
            }
            let expected: Vec<f64> = dense_matmul(&power, &to_rows(&v)).concat();
            let got = propagate(&v, &graph.e_norm, &PropagationConfig { alpha, gamma }).unwrap();
            worst = worst.max(rel_err(got.as_slice(), &expected));
        }
    }
    worst
}

/// Symmetric zero-diagonal matrix with entries drawn from a small grid so
/// that ties occur.
pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, non_negative: bool) -> Matrix<f64> {
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = if rng.random_bool(0.3) {
                rng.random_range(0..5) as f64 / 4.0
            } else {
                rng.random_range(0.0..1.0)
            };
            let x = if non_negative { x } else { 2.0 * x - 1.0 };
            s[(i, j)] = x;
            s[(j, i)] = x;
        }
    }
    s
}

/// Union-rule top-`m` selection by exhaustive ranking: `(i, j)` is in row
/// `i`'s top-`m` iff fewer than `m` off-diagonal entries of row `i` beat it,
/// where a beats b when larger, or equal with a lower column.
pub fn brute_force_union(s: &Matrix<f64>, m: usize) -> Matrix<f64> {
    let n = s.rows();
    if m + 1 >= n {
        return s.clone();
    }
    let in_top = |i: usize, j: usize| {
        let beaten_by = (0..n)
            .filter(|&c| c != i && c != j)
            .filter(|&c| s[(i, c)] > s[(i, j)] || (s[(i, c)] == s[(i, j)] && c < j))
            .count();
        beaten_by < m
    };
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && (in_top(i, j) || in_top(j, i)) {
                out[(i, j)] = s[(i, j)];
            }
        }
    }
    out
}

/// Number of random 20×20 instances where `sparsify_top_m` differs from the
/// brute-force oracle.
pub fn sparsify_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = rng(seed);
    (0..instances)
        .filter(|_| {
            let s = random_symmetric(&mut rng, 20, false);
            let m = rng.random_range(1..20);
            fewshot::sparsify_top_m(&s, m, SparsifyRule::Union).unwrap() != brute_force_union(&s, m)
        })
        .count()
}

/// Largest `|√D_i · E_ij · √D_j − S_ij|` over random non-negative inputs.
pub fn reconstruction_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let n = rng.random_range(2..25);
        let s = random_symmetric(&mut rng, n, true);
        let (e, d) = fewshot::normalize_adjacency(&s).unwrap();
        for i in 0..n {
            for j in 0..n {
                let back = d[i].sqrt() * e[(i, j)] * d[j].sqrt();
                worst = worst.max((back - s[(i, j)]).abs());
            }
        }
    }
    worst
}

/// Largest KL value deviation from zero over `KL(p, p)` for random `p`.
pub fn kl_self_worst(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let n = rng.random_range(2..10);
            let p = random_probs(&mut rng, n);
            kl_div(&p, &p).unwrap().abs()
        })
        .fold(0.0, f64::max)
}

/// Largest deviation of each boundary identity over random instances:
/// `β = 1` distillation vs mean CE, `λ = 1` mixup vs its base rows,
/// `γ = 0` propagation vs its input, single-pair contrast loss vs 0 and
/// `KL(p, p)` vs 0.
pub fn endpoint_deviations(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut beta_one = 0.0_f64;
    let mut lambda_one = 0.0_f64;
    let mut gamma_zero = 0.0_f64;
    let mut single_pair = 0.0_f64;
    for i in 0..instances {
        let case = distill_case(&mut rng);
        for direction in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let (loss, _) = distill_loss(&case.student, &case.teacher, &case.rows, &case.labels, 1.0, direction).unwrap();
            let ce = mean_ce(&case.student, &case.rows, &case.labels).unwrap();
            beta_one = beta_one.max((loss - ce).abs());
        }

        let rows = rng_range(&mut rng, 1, 8);
        let base = random_matrix(&mut rng, rows, 4, 3.0);
        let plan = MixupPlan::draw(base.rows(), 5, seed ^ i as u64);
        let mixed = plan.materialize(&base, 1.0);
        for (r, &(i, _)) in plan.pairs.iter().enumerate() {
            for (a, b) in mixed.row(r).iter().zip(base.row(i)) {
                lambda_one = lambda_one.max((a - b).abs());
            }
        }

        let n = rng_range(&mut rng, 2, 10);
        let v = random_matrix(&mut rng, n, 3, 1.0);
        let e = random_symmetric(&mut rng, n, false);
        let alpha = rng.random_range(-3.0..3.0);
        let w = propagate(&v, &e, &PropagationConfig { alpha, gamma: 0 }).unwrap();
        for (a, b) in w.as_slice().iter().zip(v.as_slice()) {
            gamma_zero = gamma_zero.max((a - b).abs());
        }

        let z1 = random_matrix(&mut rng, 1, 5, 2.0);
        let z2 = random_matrix(&mut rng, 1, 5, 2.0);
        let tau = rng.random_range(0.05..1.0);
        single_pair = single_pair.max(contrast_loss(&z1, &z2, tau).unwrap().loss.abs());
    }
    vec![
        ("beta=1 distill vs mean CE", beta_one),
        ("lambda=1 mixup vs base rows", lambda_one),
        ("gamma=0 propagate vs input", gamma_zero),
        ("B=1 contrast loss", single_pair),
        ("KL(p,p)", kl_self_worst(instances, seed ^ 0xA5)),
    ]
}

fn rng_range(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..hi)
}

/// Predictions of a nearest-centroid classifier on raw episode features:
/// each query goes to the label whose support mean is closest.
pub fn nearest_centroid(features: &fewshot::FeatureDataset, episode: &fewshot::Episode) -> Vec<usize> {
    let dim = features.dim();
    let n = episode.spec.n_way;
    let mut centroids = vec![vec![0.0; dim]; n];
    let mut counts = vec![0.0; n];
    for &(i, l) in &episode.support {
        for (c, x) in centroids[l].iter_mut().zip(&features.record(i).vector) {
            *c += x;
        }
        counts[l] += 1.0;
    }
    for (c, k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= k);
    }
    episode
        .query
        .iter()
        .map(|&(i, _)| {
            let x = &features.record(i).vector;
            (0..n)
                .map(|l| centroids[l].iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .enumerate()
                .fold((0, f64::INFINITY), |best, (l, d)| if d < best.1 { (l, d) } else { best })
                .0
        })
        .collect()
}

/// Pretraining summary on the default synthetic two-view set:
/// `(first epoch loss, last epoch loss, mean positive cosine, mean negative cosine)`.
pub fn pretrain_summary(seed: u64) -> (f64, f64, f64, f64) {
    use fewshot::contrastive::{embed_views, pair_cosines, view_matrices};
    let (data, _) = fewshot::SyntheticPairs { seed, ..Default::default() }.generate().unwrap();
    let cfg = fewshot::PretrainConfig { seed, ..Default::default() };
    let out = fewshot::pretrain::<f64>(&data, &cfg).unwrap();
    let (v1, v2) = view_matrices::<f64>(&data).unwrap();
    let (z1, z2) = embed_views(&out.params, &v1, &v2).unwrap();
    let (pos, neg) = pair_cosines(&z1, &z2).unwrap();
    (out.loss_trace[0], *out.loss_trace.last().unwrap(), pos, neg)
}
