//! Clipped-surrogate policy optimization with generalized advantage estimation.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{stack_rows, Adam, Gradients, NnError, VecAdam};
use crate::policy::{gaussian_log_prob, Actor, Critic, ACTION_DIM};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// How a transition ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepEnd {
    /// The episode continues into the next stored transition.
    Continue,
    /// True terminal state: no value beyond this step.
    Terminal,
    /// Cut short by a time limit; bootstrap from the value of the next state.
    Truncated { next_value: f64 },
}

/// One transition of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub obs: Vec<f64>,
    pub critic_input: Vec<f64>,
    /// Pre-squash action sample.
    pub u: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub end: StepEnd,
}

/// Per-environment transition sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub envs: Vec<Vec<RolloutRecord>>,
    /// Value of the state after each sequence's last record.
    pub last_values: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.envs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Advantages and returns for one environment's sequence. Episodes never
/// share credit across a terminal or truncated step.
pub fn gae(records: &[RolloutRecord], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = records.len();
    let mut adv = vec![0.0; n];
    let mut next_value = last_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let r = &records[t];
        let a = match r.end {
            StepEnd::Terminal => r.reward - r.value,
            StepEnd::Truncated { next_value: v } => r.reward + gamma * v - r.value,
            StepEnd::Continue => r.reward + gamma * next_value - r.value + gamma * lambda * next_adv,
        };
        adv[t] = a;
        next_adv = a;
        next_value = r.value;
    }
    let returns = adv.iter().zip(records).map(|(a, r)| a + r.value).collect();
    (adv, returns)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    /// Updates stop, and the last pass is undone, once the approximate KL
    /// divergence from the rollout policy exceeds this.
    pub target_kl: f64,
    pub entropy_coef: f64,
    pub min_log_std: f64,
    pub max_log_std: f64,
    /// Halve the actor learning rate after a rolled-back pass and raise it
    /// when the divergence stays well under target.
    pub adaptive_lr: bool,
    pub min_actor_lr: f64,
    pub max_actor_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            max_grad_norm: 1.0,
            target_kl: 0.03,
            entropy_coef: 0.0,
            min_log_std: -3.0,
            max_log_std: 0.5,
            adaptive_lr: true,
            min_actor_lr: 1e-6,
            max_actor_lr: 1e-2,
        }
    }
}

/// Optimizer state carried across updates.
#[derive(Debug, Clone)]
pub struct PpoState {
    pub actor_opt: Adam,
    pub log_std_opt: VecAdam,
    pub critic_opt: Adam,
}

impl PpoState {
    pub fn new(actor: &Actor, critic: &Critic, cfg: &PpoConfig) -> Self {
        Self {
            actor_opt: Adam::new(&actor.net, cfg.actor_lr),
            log_std_opt: VecAdam::new(ACTION_DIM, cfg.actor_lr),
            critic_opt: Adam::new(&critic.net, cfg.critic_lr),
        }
    }

    pub fn set_actor_lr(&mut self, lr: f64) {
        self.actor_opt.learning_rate = lr;
        self.log_std_opt.learning_rate = lr;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Approximate KL divergence between the rollout and final policies.
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub passes: usize,
    pub mean_advantage: f64,
    /// Actor learning rate after the update.
    pub actor_lr: f64,
}

struct Flat {
    obs: Array2<f64>,
    critic_in: Array2<f64>,
    u: Array2<f64>,
    old_logp: Vec<f64>,
    adv: Vec<f64>,
    ret: Vec<f64>,
}

fn flatten(buffer: &RolloutBuffer, cfg: &PpoConfig) -> Flat {
    let mut adv = Vec::new();
    let mut ret = Vec::new();
    for (seq, last) in buffer.envs.iter().zip(&buffer.last_values) {
        let (a, r) = gae(seq, *last, cfg.gamma, cfg.lambda);
        adv.extend(a);
        ret.extend(r);
    }
    let recs: Vec<&RolloutRecord> = buffer.envs.iter().flatten().collect();
    Flat {
        obs: stack_rows(&recs.iter().map(|r| r.obs.as_slice()).collect::<Vec<_>>()),
        critic_in: stack_rows(&recs.iter().map(|r| r.critic_input.as_slice()).collect::<Vec<_>>()),
        u: stack_rows(&recs.iter().map(|r| r.u.as_slice()).collect::<Vec<_>>()),
        old_logp: recs.iter().map(|r| r.log_prob).collect(),
        adv,
        ret,
    }
}

fn clip_to_norm(grads: &mut Gradients, extra: &mut [f64], max_norm: f64) {
    let norm = (grads.squared_norm() + extra.iter().map(|g| g * g).sum::<f64>()).sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.scale(k);
        extra.iter_mut().for_each(|g| *g *= k);
    }
}

/// Mean of `(r - 1) - ln r` over the batch, a non-negative KL estimate.
fn approx_kl(actor: &Actor, flat: &Flat) -> Result<f64, PpoError> {
    let mu = actor.net.forward(flat.obs.view())?;
    let n = flat.old_logp.len();
    let mut kl = 0.0;
    for i in 0..n {
        let lp = gaussian_log_prob(
            flat.u.row(i).as_slice().expect("row-major"),
            mu.row(i).as_slice().expect("row-major"),
            &actor.log_std,
        );
        let log_ratio = lp - flat.old_logp[i];
        kl += log_ratio.exp_m1() - log_ratio;
    }
    Ok(kl / n as f64)
}

/// Clipped surrogate loss of one minibatch and its gradients.
#[derive(Debug, Clone)]
pub struct SurrogateLoss {
    /// `-mean(min(r A, clip(r) A)) - entropy_coef * sum(log_std)`
    pub loss: f64,
    pub net_grads: Gradients,
    pub log_std_grads: Vec<f64>,
    /// Samples where the clipped term was active.
    pub clipped: usize,
}

/// Clipped surrogate objective over rows of `obs` with stored pre-squash
/// actions `u`, behaviour log probabilities and normalized advantages.
pub fn surrogate_loss(
    actor: &Actor,
    obs: ArrayView2<f64>,
    u: ArrayView2<f64>,
    old_logp: &[f64],
    adv: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<SurrogateLoss, PpoError> {
    let m = old_logp.len() as f64;
    let tape = actor.net.forward_tape(obs)?;
    let mu = tape.output();
    let sigma2: Vec<f64> = actor.log_std.iter().map(|ls| (2.0 * ls).exp()).collect();
    let mut d_mu = Array2::zeros(mu.raw_dim());
    let mut d_log_std = vec![-entropy_coef; ACTION_DIM];
    let mut loss = -entropy_coef * actor.log_std.iter().sum::<f64>();
    let mut clipped = 0;
    for (row, (&lp_old, &a)) in old_logp.iter().zip(adv).enumerate() {
        let urow = u.row(row);
        let murow = mu.row(row);
        let lp = gaussian_log_prob(
            urow.as_slice().expect("row-major"),
            murow.as_slice().expect("row-major"),
            &actor.log_std,
        );
        let ratio = (lp - lp_old).exp();
        let unclipped = ratio * a;
        let clipped_obj = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(clipped_obj) / m;
        // Gradient flows only where the unclipped term is the active minimum.
        if unclipped <= clipped_obj {
            let g = -a * ratio / m;
            for j in 0..ACTION_DIM {
                let diff = urow[j] - murow[j];
                d_mu[[row, j]] += g * diff / sigma2[j];
                d_log_std[j] += g * (diff * diff / sigma2[j] - 1.0);
            }
        } else {
            clipped += 1;
        }
    }
    let (net_grads, _) = actor.net.backward(&tape, d_mu.view())?;
    Ok(SurrogateLoss {
        loss,
        net_grads,
        log_std_grads: d_log_std,
        clipped,
    })
}

/// Mean squared value error and its gradient.
pub fn value_loss(critic: &Critic, inputs: ArrayView2<f64>, returns: &[f64]) -> Result<(f64, Gradients), PpoError> {
    let m = returns.len() as f64;
    let tape = critic.net.forward_tape(inputs)?;
    let v = tape.output();
    let mut d_v = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for (row, r) in returns.iter().enumerate() {
        let e = v[[row, 0]] - r;
        loss += e * e / m;
        d_v[[row, 0]] = 2.0 * e / m;
    }
    let (grads, _) = critic.net.backward(&tape, d_v.view())?;
    Ok((loss, grads))
}

/// One policy and value update from a filled buffer.
pub fn update<R: Rng + ?Sized>(
    buffer: &RolloutBuffer,
    actor: &mut Actor,
    critic: &mut Critic,
    state: &mut PpoState,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    if buffer.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    let mut flat = flatten(buffer, cfg);
    let n = flat.adv.len();
    let mean = flat.adv.iter().sum::<f64>() / n as f64;
    let var = flat.adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !mean.is_finite() || !std.is_finite() {
        return Err(PpoError::NonFinite("advantage"));
    }
    // Normalizing a zero-spread batch would divide noise by nothing.
    for a in flat.adv.iter_mut() {
        *a = if std > 1e-8 { (*a - mean) / std } else { 0.0 };
    }

    let mut stats = UpdateStats {
        mean_advantage: mean,
        ..UpdateStats::default()
    };
    let mut indices: Vec<usize> = (0..n).collect();
    let mb_size = n.div_ceil(cfg.minibatches.max(1));
    let mut kl = 0.0;
    for _ in 0..cfg.epochs {
        let snapshot = (actor.clone(), state.actor_opt.clone(), state.log_std_opt.clone());
        indices.shuffle(rng);
        let (mut pl, mut vl, mut clipped, mut count) = (0.0, 0.0, 0usize, 0usize);
        for mb in indices.chunks(mb_size) {
            let m = mb.len() as f64;
            let obs = flat.obs.select(Axis(0), mb);
            let u = flat.u.select(Axis(0), mb);
            let old_logp: Vec<f64> = mb.iter().map(|&i| flat.old_logp[i]).collect();
            let adv: Vec<f64> = mb.iter().map(|&i| flat.adv[i]).collect();
            let mut s = surrogate_loss(actor, obs.view(), u.view(), &old_logp, &adv, cfg.clip, cfg.entropy_coef)?;
            pl += s.loss * m;
            clipped += s.clipped;
            count += mb.len();
            clip_to_norm(&mut s.net_grads, &mut s.log_std_grads, cfg.max_grad_norm);
            state.actor_opt.step(&mut actor.net, &s.net_grads)?;
            state.log_std_opt.step(&mut actor.log_std, &s.log_std_grads)?;
            for ls in actor.log_std.iter_mut() {
                *ls = ls.clamp(cfg.min_log_std, cfg.max_log_std);
            }

            let cin = flat.critic_in.select(Axis(0), mb);
            let ret: Vec<f64> = mb.iter().map(|&i| flat.ret[i]).collect();
            let (loss, mut cgrads) = value_loss(critic, cin.view(), &ret)?;
            vl += loss * m;
            clip_to_norm(&mut cgrads, &mut [], cfg.max_grad_norm);
            state.critic_opt.step(&mut critic.net, &cgrads)?;
        }
        if !pl.is_finite() || !vl.is_finite() {
            return Err(PpoError::NonFinite("loss"));
        }
        stats.policy_loss = pl / count as f64;
        stats.value_loss = vl / count as f64;
        stats.clip_fraction = clipped as f64 / count as f64;
        let new_kl = approx_kl(actor, &flat)?;
        if new_kl > cfg.target_kl {
            (*actor, state.actor_opt, state.log_std_opt) = snapshot;
            if cfg.adaptive_lr {
                state.set_actor_lr((state.actor_opt.learning_rate * 0.5).max(cfg.min_actor_lr));
            }
            break;
        }
        kl = new_kl;
        stats.passes += 1;
        if cfg.adaptive_lr && new_kl < cfg.target_kl / 4.0 {
            state.set_actor_lr((state.actor_opt.learning_rate * 1.5).min(cfg.max_actor_lr));
        }
    }
    stats.actor_lr = state.actor_opt.learning_rate;
    stats.approx_kl = kl;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::ResidualBounds;
    use crate::policy::{CRITIC_INPUT_DIM, OBS_DIM};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(reward: f64, value: f64, end: StepEnd) -> RolloutRecord {
        RolloutRecord {
            obs: vec![],
            critic_input: vec![],
            u: vec![],
            log_prob: 0.0,
            value,
            reward,
            end,
        }
    }

    #[test]
    fn gae_single_step_by_hand() {
        let (adv, ret) = gae(&[rec(1.0, 0.5, StepEnd::Continue)], 2.0, 0.9, 0.95);
        assert_abs_diff_eq!(adv[0], 1.0 + 0.9 * 2.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ret[0], 1.0 + 0.9 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn no_credit_across_episode_boundary() {
        let gamma = 0.99;
        let lambda = 0.95;
        let a = [rec(1.0, 0.0, StepEnd::Continue), rec(1.0, 0.0, StepEnd::Terminal)];
        let b = [rec(100.0, 0.0, StepEnd::Continue), rec(100.0, 0.0, StepEnd::Continue)];
        let joined: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
        let (adv_joined, _) = gae(&joined, 0.0, gamma, lambda);
        let (adv_a, _) = gae(&a, 12345.0, gamma, lambda);
        assert_eq!(&adv_joined[..2], &adv_a[..]);
        assert_abs_diff_eq!(adv_a[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv_a[0], 1.0 + gamma * lambda * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn truncation_bootstraps_from_next_value() {
        let (adv, _) = gae(
            &[rec(1.0, 0.0, StepEnd::Truncated { next_value: 10.0 }), rec(5.0, 0.0, StepEnd::Continue)],
            0.0,
            0.5,
            1.0,
        );
        assert_abs_diff_eq!(adv[0], 1.0 + 0.5 * 10.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_reward_returns_converge_to_geometric_sum() {
        // With lambda = 1 and a long sequence, returns approach r / (1 - gamma).
        let gamma = 0.9;
        let records: Vec<_> = (0..400).map(|_| rec(1.0, 0.0, StepEnd::Continue)).collect();
        let (_, ret) = gae(&records, 0.0, gamma, 1.0);
        assert_abs_diff_eq!(ret[0], 1.0 / (1.0 - gamma), epsilon = 1e-9);
    }

    fn synthetic_buffer(rng: &mut ChaCha8Rng, actor: &Actor, reward: impl Fn(&[f64]) -> f64) -> RolloutBuffer {
        let mut seq = Vec::new();
        for t in 0..256 {
            let obs: Vec<f64> = (0..OBS_DIM).map(|k| ((t * 7 + k) % 13) as f64 / 13.0 - 0.5).collect();
            let s = actor.sample(&obs, rng).unwrap();
            let mut cin = obs.clone();
            cin.extend(std::iter::repeat_n(0.0, CRITIC_INPUT_DIM - OBS_DIM));
            seq.push(RolloutRecord {
                reward: reward(&s.normalized),
                obs,
                critic_input: cin,
                u: s.u,
                log_prob: s.log_prob,
                value: 0.0,
                end: if t % 32 == 31 { StepEnd::Terminal } else { StepEnd::Continue },
            });
        }
        RolloutBuffer { envs: vec![seq], last_values: vec![0.0] }
    }

    #[test]
    fn identical_rewards_leave_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut actor = Actor::new(&[16], -0.5, ResidualBounds::default(), &mut rng);
        let mut critic = Critic::new(&[16], &mut rng);
        let mut buffer = synthetic_buffer(&mut rng, &actor, |_| 1.0);
        // Values equal to the returns make every advantage exactly zero.
        let (_, ret) = gae(&buffer.envs[0], 0.0, 0.99, 1.0);
        for (r, v) in buffer.envs[0].iter_mut().zip(ret) {
            r.value = v;
        }
        let cfg = PpoConfig::default();
        let mut st = PpoState::new(&actor, &critic, &cfg);
        let before = actor.clone();
        let stats = update(&buffer, &mut actor, &mut critic, &mut st, &cfg, &mut rng).unwrap();
        assert_eq!(actor, before);
        assert_eq!(stats.approx_kl, 0.0);
    }

    #[test]
    fn kl_stays_under_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut actor = Actor::new(&[32], -0.5, ResidualBounds::default(), &mut rng);
        let mut critic = Critic::new(&[32], &mut rng);
        let buffer = synthetic_buffer(&mut rng, &actor, |a| -a.iter().map(|x| (x - 0.5).powi(2)).sum::<f64>());
        let cfg = PpoConfig { epochs: 30, actor_lr: 1e-2, target_kl: 0.01, ..PpoConfig::default() };
        let mut st = PpoState::new(&actor, &critic, &cfg);
        let stats = update(&buffer, &mut actor, &mut critic, &mut st, &cfg, &mut rng).unwrap();
        assert!(stats.approx_kl <= cfg.target_kl);
        assert!(stats.passes < 30, "aggressive settings should trip the KL guard");
    }

    #[test]
    fn policy_moves_toward_rewarded_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut actor = Actor::new(&[32], -0.5, ResidualBounds::default(), &mut rng);
        let mut critic = Critic::new(&[32], &mut rng);
        let cfg = PpoConfig::default();
        let mut st = PpoState::new(&actor, &critic, &cfg);
        let obs = synthetic_buffer(&mut rng, &actor, |_| 0.0).envs[0][5].obs.clone();
        let start = actor.deterministic(&obs).unwrap()[0];
        for _ in 0..30 {
            let buffer = synthetic_buffer(&mut rng, &actor, |a| a[0]);
            update(&buffer, &mut actor, &mut critic, &mut st, &cfg, &mut rng).unwrap();
        }
        assert!(actor.deterministic(&obs).unwrap()[0] > start + 0.3);
    }

    #[test]
    fn empty_buffer_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut actor = Actor::new(&[4], 0.0, ResidualBounds::default(), &mut rng);
        let mut critic = Critic::new(&[4], &mut rng);
        let cfg = PpoConfig::default();
        let mut st = PpoState::new(&actor, &critic, &cfg);
        let r = update(&RolloutBuffer::default(), &mut actor, &mut critic, &mut st, &cfg, &mut rng);
        assert!(matches!(r, Err(PpoError::EmptyBuffer)));
    }
}
