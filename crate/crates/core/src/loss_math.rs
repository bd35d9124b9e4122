//! Reference implementations of the interaction-detector training objectives.
//!
//! The visual objective sums, over matched human/object pairs, a temperature
//! softmax contrastive localization term, a multi-label binary cross-entropy
//! over actions, and a cross-entropy over places. The language objective is
//! the autoregressive negative log-likelihood, and the total is their sum.
//! Nothing here trains a model; every loss comes with an analytic gradient
//! that [`verification_suite`] checks against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Probability clamp for log-domain stability.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("ZERO_VECTOR: cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("LENGTH_MISMATCH: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("NOT_ONE_HOT: target must have exactly one 1 and zeros elsewhere")]
    NotOneHot,
    #[error("NOT_SIMPLEX: probabilities sum to {0}")]
    NotSimplex(f64),
    #[error("EMPTY_SEQUENCE: no tokens")]
    EmptySequence,
    #[error("NON_FINITE: {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for {len} entities")]
    BadIndex { index: usize, len: usize },
    #[error("invalid input: {0}")]
    Invalid(&'static str),
}

/// Entity representations the pointers choose from.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityBank {
    mu: Vec<Vec<f64>>,
}

impl EntityBank {
    pub fn new(mu: Vec<Vec<f64>>) -> Result<Self, LossError> {
        let first = mu.first().ok_or(LossError::Invalid("entity bank is empty"))?;
        let d = first.len();
        for m in &mu {
            if m.len() != d {
                return Err(LossError::LengthMismatch { left: d, right: m.len() });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(LossError::NonFinite("entity vector"));
            }
            if norm(m) == 0.0 {
                return Err(LossError::ZeroVector);
            }
        }
        Ok(Self { mu })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.mu
    }
}

/// Outputs of the human and object projection heads for one action, plus the
/// softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionProjection {
    pub ffn_h_out: Vec<f64>,
    pub ffn_o_out: Vec<f64>,
    pub temperature: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Index of the entity most cosine-similar to `v`; ties go to the smallest index.
pub fn pointer_select(v: &[f64], bank: &EntityBank) -> Result<usize, LossError> {
    if v.len() != bank.dim() {
        return Err(LossError::LengthMismatch { left: v.len(), right: bank.dim() });
    }
    if norm(v) == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, mu) in bank.mu.iter().enumerate() {
        let s = cosine(v, mu);
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    Ok(best)
}

/// `-log softmax(cos(v, mu) / temp)[target]` and its gradient in `v`.
fn contrastive_term(v: &[f64], bank: &EntityBank, target: usize, temp: f64) -> Result<(f64, Vec<f64>), LossError> {
    if v.len() != bank.dim() {
        return Err(LossError::LengthMismatch { left: v.len(), right: bank.dim() });
    }
    if target >= bank.len() {
        return Err(LossError::BadIndex { index: target, len: bank.len() });
    }
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let sims: Vec<f64> = bank.mu.iter().map(|m| cosine(v, m)).collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / temp).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(logits[target] - max) + z.ln();

    // dL/dlogit_j = p_j - [j == target]; dcos_j/dv = mu_j/(|v||mu_j|) - cos_j v/|v|^2.
    let mut grad = vec![0.0; v.len()];
    for (j, mu) in bank.mu.iter().enumerate() {
        let coeff = (exps[j] / z - if j == target { 1.0 } else { 0.0 }) / temp;
        if coeff == 0.0 {
            continue;
        }
        let mu_norm = norm(mu);
        for k in 0..v.len() {
            grad[k] += coeff * (mu[k] / (v_norm * mu_norm) - sims[j] * v[k] / (v_norm * v_norm));
        }
    }
    Ok((loss, grad))
}

fn check_temperature(t: f64) -> Result<(), LossError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LossError::Invalid("temperature must be positive"))
    }
}

/// Localization loss: one contrastive term for the human pointer and one for the object pointer.
pub fn loc_loss(proj: &ActionProjection, bank: &EntityBank, c_h: usize, c_o: usize) -> Result<f64, LossError> {
    check_temperature(proj.temperature)?;
    let (h, _) = contrastive_term(&proj.ffn_h_out, bank, c_h, proj.temperature)?;
    let (o, _) = contrastive_term(&proj.ffn_o_out, bank, c_o, proj.temperature)?;
    Ok(h + o)
}

/// Gradients of [`loc_loss`] with respect to the human and object projections.
pub fn loc_loss_grad(
    proj: &ActionProjection,
    bank: &EntityBank,
    c_h: usize,
    c_o: usize,
) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    check_temperature(proj.temperature)?;
    let (_, gh) = contrastive_term(&proj.ffn_h_out, bank, c_h, proj.temperature)?;
    let (_, go) = contrastive_term(&proj.ffn_o_out, bank, c_o, proj.temperature)?;
    Ok((gh, go))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Multi-label binary cross-entropy summed over action classes.
pub fn act_loss(a: &[f64], a_hat: &[f64]) -> Result<f64, LossError> {
    if a.len() != a_hat.len() {
        return Err(LossError::LengthMismatch { left: a.len(), right: a_hat.len() });
    }
    Ok(-a
        .iter()
        .zip(a_hat)
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>())
}

pub fn act_loss_grad(a: &[f64], a_hat: &[f64]) -> Result<Vec<f64>, LossError> {
    if a.len() != a_hat.len() {
        return Err(LossError::LengthMismatch { left: a.len(), right: a_hat.len() });
    }
    Ok(a.iter()
        .zip(a_hat)
        .map(|(&t, &p)| {
            if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                0.0
            } else {
                -t / p + (1.0 - t) / (1.0 - p)
            }
        })
        .collect())
}

/// `-sum p_j ln p_hat_j` without input checks.
pub fn cross_entropy(p: &[f64], p_hat: &[f64]) -> Result<f64, LossError> {
    if p.len() != p_hat.len() {
        return Err(LossError::LengthMismatch { left: p.len(), right: p_hat.len() });
    }
    Ok(-p.iter().zip(p_hat).map(|(&t, &q)| t * q.max(PROB_EPS).ln()).sum::<f64>())
}

/// Place cross-entropy against a one-hot target.
pub fn place_loss(p: &[f64], p_hat: &[f64]) -> Result<f64, LossError> {
    if p.len() != p_hat.len() {
        return Err(LossError::LengthMismatch { left: p.len(), right: p_hat.len() });
    }
    let ones = p.iter().filter(|&&x| x == 1.0).count();
    let zeros = p.iter().filter(|&&x| x == 0.0).count();
    if ones != 1 || ones + zeros != p.len() {
        return Err(LossError::NotOneHot);
    }
    let total: f64 = p_hat.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p_hat.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(LossError::NotSimplex(total));
    }
    cross_entropy(p, p_hat)
}

pub fn place_loss_grad(p: &[f64], p_hat: &[f64]) -> Result<Vec<f64>, LossError> {
    if p.len() != p_hat.len() {
        return Err(LossError::LengthMismatch { left: p.len(), right: p_hat.len() });
    }
    Ok(p.iter()
        .zip(p_hat)
        .map(|(&t, &q)| if q <= PROB_EPS { 0.0 } else { -t / q })
        .collect())
}

/// Inputs for one matched human/object pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub projection: ActionProjection,
    pub human_index: usize,
    pub object_index: usize,
    pub actions: Vec<f64>,
    pub action_probs: Vec<f64>,
    pub place: Vec<f64>,
    pub place_probs: Vec<f64>,
}

/// Unweighted sum of localization, action and place losses over all pairs.
pub fn visual_loss(bank: &EntityBank, pairs: &[MatchedPair]) -> Result<f64, LossError> {
    pairs.iter().try_fold(0.0, |acc, p| {
        Ok(acc
            + loc_loss(&p.projection, bank, p.human_index, p.object_index)?
            + act_loss(&p.actions, &p.action_probs)?
            + place_loss(&p.place, &p.place_probs)?)
    })
}

/// Negative log-likelihood of one token sequence.
pub fn lm_loss(token_probs: &[f64]) -> Result<f64, LossError> {
    if token_probs.is_empty() {
        return Err(LossError::EmptySequence);
    }
    if token_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0 && *p <= 1.0)) {
        return Err(LossError::Invalid("token probability outside [0, 1]"));
    }
    Ok(-token_probs.iter().map(|&p| p.max(PROB_EPS).ln()).sum::<f64>())
}

pub fn lm_loss_grad(token_probs: &[f64]) -> Result<Vec<f64>, LossError> {
    if token_probs.is_empty() {
        return Err(LossError::EmptySequence);
    }
    Ok(token_probs
        .iter()
        .map(|&p| if p <= PROB_EPS { 0.0 } else { -1.0 / p })
        .collect())
}

/// Mean [`lm_loss`] over a batch of sequences (the dataset expectation).
pub fn lm_loss_batch(sequences: &[Vec<f64>]) -> Result<f64, LossError> {
    if sequences.is_empty() {
        return Err(LossError::EmptySequence);
    }
    let total = sequences.iter().try_fold(0.0, |acc, s| Ok::<_, LossError>(acc + lm_loss(s)?))?;
    Ok(total / sequences.len() as f64)
}

pub fn total_loss(l_v: f64, l_lm: f64) -> Result<f64, LossError> {
    if !l_v.is_finite() || !l_lm.is_finite() {
        return Err(LossError::NonFinite("loss term"));
    }
    Ok(l_v + l_lm)
}

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const VALUE_ABS_TOL: f64 = 1e-4;
pub const GRAD_POINTS: usize = 20;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors, with a tiny floor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn value_check(name: &str, got: Result<f64, LossError>, expected: f64) -> CheckResult {
    match got {
        Ok(v) => CheckResult {
            name: name.to_owned(),
            passed: (v - expected).abs() <= VALUE_ABS_TOL,
            detail: format!("got {v:.6}, expected {expected:.6}"),
        },
        Err(e) => CheckResult {
            name: name.to_owned(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn grad_check(name: &str, worst: f64) -> CheckResult {
    CheckResult {
        name: name.to_owned(),
        passed: worst <= GRAD_REL_TOL,
        detail: format!("worst relative error {worst:.2e} over {GRAD_POINTS} points"),
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Known analytic values plus finite-difference gradient checks at random points.
pub fn verification_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    let orth = EntityBank::new(
        (1..=4)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect(),
    )
    .expect("valid bank");
    let mut e0 = vec![0.0; 5];
    e0[0] = 1.0;
    let uniform = ActionProjection {
        ffn_h_out: e0.clone(),
        ffn_o_out: e0,
        temperature: DEFAULT_TEMPERATURE,
    };
    out.push(value_check("loc_loss uniform K=4", loc_loss(&uniform, &orth, 0, 3), 2.0 * 4f64.ln()));

    let pair_bank = EntityBank::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).expect("valid bank");
    let margin_one = ActionProjection {
        ffn_h_out: vec![1.0, 0.0],
        ffn_o_out: vec![0.0, 1.0],
        temperature: 1.0,
    };
    out.push(value_check(
        "loc_loss K=2 temp=1 margin 1",
        loc_loss(&margin_one, &pair_bank, 0, 1),
        2.0 * (1.0 + (-1.0f64).exp()).ln(),
    ));
    out.push(value_check("act_loss [1,0] vs [0.9,0.1]", act_loss(&[1.0, 0.0], &[0.9, 0.1]), -2.0 * 0.9f64.ln()));
    out.push(value_check("place_loss uniform P=4", place_loss(&[0.0, 1.0, 0.0, 0.0], &[0.25; 4]), 4f64.ln()));
    out.push(value_check("lm_loss uniform 1/10 N=3", lm_loss(&[0.1; 3]), 3.0 * 10f64.ln()));
    out.push(value_check("total_loss 1.5 + 2.5", total_loss(1.5, 2.5), 4.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loc_worst, mut act_worst, mut place_worst, mut lm_worst) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..GRAD_POINTS {
        let d = 4;
        let k = 6;
        let bank = EntityBank::new((0..k).map(|_| random_vec(&mut rng, d)).collect()).expect("valid bank");
        let proj = ActionProjection {
            ffn_h_out: random_vec(&mut rng, d),
            ffn_o_out: random_vec(&mut rng, d),
            temperature: rng.gen_range(0.2..1.0),
        };
        let (c_h, c_o) = (rng.gen_range(0..k), rng.gen_range(0..k));
        let (gh, go) = loc_loss_grad(&proj, &bank, c_h, c_o).expect("valid inputs");
        let nh = finite_difference(
            |x| {
                let p = ActionProjection { ffn_h_out: x.to_vec(), ..proj.clone() };
                loc_loss(&p, &bank, c_h, c_o).expect("valid inputs")
            },
            &proj.ffn_h_out,
            FD_STEP,
        );
        let no = finite_difference(
            |x| {
                let p = ActionProjection { ffn_o_out: x.to_vec(), ..proj.clone() };
                loc_loss(&p, &bank, c_h, c_o).expect("valid inputs")
            },
            &proj.ffn_o_out,
            FD_STEP,
        );
        loc_worst = loc_worst.max(relative_error(&gh, &nh)).max(relative_error(&go, &no));

        let gamma = 5;
        let a: Vec<f64> = (0..gamma).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let a_hat: Vec<f64> = (0..gamma).map(|_| rng.gen_range(0.05..0.95)).collect();
        let g = act_loss_grad(&a, &a_hat).expect("valid inputs");
        let n = finite_difference(|x| act_loss(&a, x).expect("valid inputs"), &a_hat, FD_STEP);
        act_worst = act_worst.max(relative_error(&g, &n));

        let places = 4;
        let mut p = vec![0.0; places];
        p[rng.gen_range(0..places)] = 1.0;
        let raw: Vec<f64> = (0..places).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p_hat: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let g = place_loss_grad(&p, &p_hat).expect("valid inputs");
        let n = finite_difference(|x| cross_entropy(&p, x).expect("valid inputs"), &p_hat, FD_STEP);
        place_worst = place_worst.max(relative_error(&g, &n));

        let tokens: Vec<f64> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0.05..1.0)).collect();
        let g = lm_loss_grad(&tokens).expect("valid inputs");
        let n = finite_difference(|x| lm_loss(x).expect("valid inputs"), &tokens, FD_STEP);
        lm_worst = lm_worst.max(relative_error(&g, &n));
    }
    out.push(grad_check("loc_loss gradient", loc_worst));
    out.push(grad_check("act_loss gradient", act_worst));
    out.push(grad_check("place_loss gradient", place_worst));
    out.push(grad_check("lm_loss gradient", lm_worst));
    out
}
