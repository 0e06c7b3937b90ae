"""On-the-fly retrieval: episode rollouts over partial-sketch renders, local
and global rewards, and PPO fine-tuning of the sketch-branch policy.

The photo branch stays frozen, so the gallery and the per-step encoder states
are precomputed; training touches only the Gaussian policy head (mean map and
diagonal covariance) and, for the actor-critic variant, a small value head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import GaussianPolicyHead, RasterEncoder, canvas_batch
from .optim import Adam
from .ranking import (EpisodeCurve, Gallery, acc_at_q, episode_metrics,
                      kendall_tau_norm, rank_of, ranking_percentile,
                      stroke_backlash)
from .sketch import VectorSketch, partial_prefix, rasterize


@dataclass
class RewardScheme:
    """Per-step reward design; `combined` sums local and global terms."""

    variant: str = "combined"  # inverse_rank | neg_rank | inv_sqrt_rank | topq_indicator | combined
    q: int = 5
    gamma1: float = 1.0
    gamma2: float = 1e-4

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma weights must be non-negative")
        valid = {"inverse_rank", "neg_rank", "inv_sqrt_rank", "topq_indicator", "combined"}
        if self.variant not in valid:
            raise ValueError(f"unknown reward variant {self.variant!r}")

    def local(self, rank: int) -> float:
        if self.variant == "neg_rank":
            return -float(rank)
        if self.variant == "inv_sqrt_rank":
            return 1.0 / np.sqrt(rank)
        if self.variant == "topq_indicator":
            return 1.0 if rank <= self.q else 0.0
        return 1.0 / rank  # inverse_rank and the local part of combined

    @property
    def uses_global(self) -> bool:
        return self.variant == "combined"


def reward_local(rank: int, scheme: RewardScheme | None = None) -> float:
    """Local reward 1/rank (or the scheme's variant)."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    return (scheme or RewardScheme(variant="inverse_rank")).local(rank)


def reward_global(list_prev, list_cur, list_next) -> float:
    """-max(0, tau(L_t, L_t+1) - tau(L_t-1, L_t)); 0 at episode boundaries."""
    if list_prev is None or list_next is None:
        return 0.0
    tau_next = kendall_tau_norm(list_cur, list_next)
    tau_prev = kendall_tau_norm(list_prev, list_cur)
    return -max(0.0, tau_next - tau_prev)


def combined_reward(local: float, global_: float, gamma1: float = 1.0,
                    gamma2: float = 1e-4) -> float:
    return gamma1 * local + gamma2 * global_


@dataclass
class PPOConfig:
    variant: str = "actor_only_clip"  # vanilla_pg | actor_only_clip | actor_critic_clip | kl_penalty
    clip_epsilon: float = 0.2
    kl_coef: float = 0.01
    value_coef: float = 0.5
    steps: int = 20          # T sketch renders per episode
    batch_size: int = 16     # episodes averaged per gradient update

    def __post_init__(self):
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError("clip epsilon must lie in (0, 1)")
        valid = {"vanilla_pg", "actor_only_clip", "actor_critic_clip", "kl_penalty"}
        if self.variant not in valid:
            raise ValueError(f"unknown ppo variant {self.variant!r}")


@dataclass
class EpisodeStep:
    state: np.ndarray        # frozen encoder state s'_t
    action: np.ndarray       # raw sampled action a_t
    log_prob_old: float
    mu_old: np.ndarray
    sigma_old: np.ndarray
    rank: int
    rank_list: np.ndarray
    reward_local: float = 0.0
    reward_global: float = 0.0
    reward: float = 0.0


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def curve(self, gallery_size: int) -> EpisodeCurve:
        c = EpisodeCurve()
        for s in self.steps:
            c.append(s.rank, gallery_size)
        return c


class OtfPolicy:
    """Sketch-branch agent: frozen feature stack + trainable Gaussian head."""

    def __init__(self, encoder: RasterEncoder, seed=0):
        self.encoder = encoder
        self.head = GaussianPolicyHead(state_dim=encoder.channels,
                                       action_dim=encoder.embed_dim, seed=seed)
        self.head.copy_from_projection(encoder)
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        self.value_w = Tensor(rng.uniform(-0.1, 0.1, size=(encoder.channels, 1)),
                              requires_grad=True)
        self.value_b = Tensor(np.zeros(1), requires_grad=True)

    def trainable_params(self, variant: str) -> dict:
        params = {"mu_w": self.head.params["mu_w"], "mu_b": self.head.params["mu_b"],
                  "log_sigma": self.head.params["log_sigma"]}
        if variant == "actor_critic_clip":
            params["value_w"] = self.value_w
            params["value_b"] = self.value_b
        return params

    def states(self, canvases: np.ndarray) -> np.ndarray:
        """Frozen attention-pooled features for a batch of canvases."""
        with ad.no_grad():
            return self.encoder.attended(canvases).data

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.head.params.items()}


def prefix_states(sketch: VectorSketch, policy: OtfPolicy, total_steps: int) -> np.ndarray:
    """(T, channels) frozen states of the T partial renders of a sketch."""
    enc = policy.encoder
    canvases = canvas_batch([
        rasterize(partial_prefix(sketch, t, total_steps), enc.height, enc.width)
        for t in range(1, total_steps + 1)])
    return policy.states(canvases)


def rollout(sketch: VectorSketch, policy: OtfPolicy, gallery: Gallery,
            true_id: int, total_steps: int, rng=None, sample: bool = True,
            scheme: RewardScheme | None = None,
            states: np.ndarray | None = None,
            old_params: dict | None = None) -> EpisodeTrace:
    """One complete sketch-rendering episode against a frozen gallery.

    `states` may carry precomputed per-step encoder states; `old_params`
    overrides the sampling policy's parameters (the importance-sampling
    behaviour policy).  With sample=False the mean action is used.
    """
    if sketch.is_empty():
        raise ValueError("cannot roll out an empty sketch")
    scheme = scheme or RewardScheme()
    if states is None:
        states = prefix_states(sketch, policy, total_steps)
    p = old_params or {k: v.data for k, v in policy.head.params.items()}
    mu_all = states @ p["mu_w"] + p["mu_b"]
    sigma = np.exp(p["log_sigma"])
    trace = EpisodeTrace()
    d = mu_all.shape[1]
    for t in range(total_steps):
        mu = mu_all[t]
        xi = rng.standard_normal(d) if (sample and rng is not None) else np.zeros(d)
        action = mu + xi * sigma
        quad = ((action - mu) ** 2 / sigma).sum()
        lp = -0.5 * (d * np.log(2 * np.pi) + np.log(sigma).sum() + quad)
        a_n = action / max(np.linalg.norm(action), 1e-12)
        rank, rlist = rank_of(a_n, gallery, true_id)
        trace.steps.append(EpisodeStep(
            state=states[t], action=action, log_prob_old=float(lp),
            mu_old=mu.copy(), sigma_old=sigma.copy(),
            rank=rank, rank_list=rlist))
    _assign_rewards(trace, scheme)
    return trace


def _assign_rewards(trace: EpisodeTrace, scheme: RewardScheme):
    steps = trace.steps
    n = len(steps)
    for i, s in enumerate(steps):
        s.reward_local = scheme.local(s.rank)
        if scheme.uses_global:
            prev_list = steps[i - 1].rank_list if i > 0 else None
            next_list = steps[i + 1].rank_list if i < n - 1 else None
            s.reward_global = reward_global(prev_list, s.rank_list, next_list)
            s.reward = combined_reward(s.reward_local, s.reward_global,
                                       scheme.gamma1, scheme.gamma2)
        else:
            s.reward_global = 0.0
            s.reward = s.reward_local


def _gaussian_kl(mu0, sigma0, mu1_t, log_sigma1_t):
    """KL(N(mu0, diag sigma0) || N(mu1, diag sigma1)) with tensor mu1/sigma1."""
    sigma1 = ad.exp(log_sigma1_t)
    inv1 = ad.pow_const(sigma1, -1.0)
    diff = ad.add(mu1_t, -mu0)
    quad = ad.sum_(ad.mul(ad.mul(diff, diff), inv1), axis=-1)
    trace_term = ad.sum_(ad.mul(inv1, sigma0), axis=-1)
    logdet = ad.add(ad.sum_(log_sigma1_t), -float(np.log(sigma0).sum()))
    d = len(sigma0)
    return ad.mul(ad.add(ad.add(trace_term, quad), ad.add(logdet, -float(d))), 0.5)


def ppo_update(traces, config: PPOConfig, policy: OtfPolicy, optimizer: Adam) -> dict:
    """One gradient step on the policy surrogate from a batch of episodes.

    Gradients are averaged over all steps of all episodes; only the Gaussian
    head (and the value head in the actor-critic variant) is trainable.
    """
    states = np.stack([s.state for tr in traces for s in tr.steps])
    actions = np.stack([s.action for tr in traces for s in tr.steps])
    rewards = np.array([s.reward for tr in traces for s in tr.steps])
    lp_old = np.array([s.log_prob_old for tr in traces for s in tr.steps])

    mu = policy.head.mean_action(Tensor(states))
    lp_new = policy.head.log_prob(mu, actions)

    diagnostics = {}
    if config.variant == "vanilla_pg":
        objective = ad.mul(lp_new, rewards)
    else:
        ratio = ad.exp(ad.add(lp_new, -lp_old))
        diagnostics["mean_ratio"] = float(ratio.data.mean())
        if config.variant == "kl_penalty":
            mu0 = np.stack([s.mu_old for tr in traces for s in tr.steps])
            sigma0 = traces[0].steps[0].sigma_old
            kl = _gaussian_kl(mu0, sigma0, mu, policy.head.params["log_sigma"])
            objective = ad.add(ad.mul(ratio, rewards), ad.mul(kl, -config.kl_coef))
        else:
            advantage = rewards
            if config.variant == "actor_critic_clip":
                v = ad.add(Tensor(states) @ policy.value_w, policy.value_b)
                v = ad.reshape(v, (len(rewards),))
                advantage = rewards - v.data  # critic baseline, detached
            unclipped = ad.mul(ratio, advantage)
            clipped = ad.mul(ad.clip(ratio, 1.0 - config.clip_epsilon,
                                     1.0 + config.clip_epsilon), advantage)
            objective = ad.minimum(unclipped, clipped)
            if config.variant == "actor_critic_clip":
                value_err = ad.squared_error(v, rewards)
                objective = ad.add(objective, ad.mul(value_err, -config.value_coef))

    loss = ad.mul(ad.mean(objective), -1.0)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    diagnostics["loss"] = loss.item()
    diagnostics["mean_reward"] = float(rewards.mean())
    return diagnostics


def evaluate_policy(policy: OtfPolicy, instances, gallery: Gallery,
                    total_steps: int, state_cache: dict | None = None) -> dict:
    """Deterministic (mean-action) episode metrics over a set of instances.

    The stroke-backlash index is computed on the per-step ranking-percentile
    curve averaged over all samples, as is m@A/m@B by linearity.
    """
    m = len(gallery)
    rp_curves = []
    inv_curves = []
    final_ranks = []
    for inst in instances:
        states = state_cache.get(inst.instance_id) if state_cache else None
        trace = rollout(inst.sketch, policy, gallery, inst.instance_id,
                        total_steps, sample=False, states=states)
        curve = trace.curve(m)
        rp_curves.append(curve.percentiles)
        inv_curves.append(curve.inverse_ranks)
        final_ranks.append(trace.steps[-1].rank)
    mean_rp = np.mean(np.array(rp_curves), axis=0)
    mean_inv = np.mean(np.array(inv_curves), axis=0)
    return {
        "m@A": 100.0 * float(mean_rp.mean()),
        "m@B": float(mean_inv.mean()),
        "backlash": stroke_backlash(mean_rp),
        "acc@1": acc_at_q(final_ranks, 1),
        "acc@5": acc_at_q(final_ranks, min(5, m)),
        "acc@10": acc_at_q(final_ranks, min(10, m)),
        "rp_curve": mean_rp.tolist(),
    }


def baseline_trace(sketch: VectorSketch, encoder: RasterEncoder, gallery: Gallery,
                   true_id: int, total_steps: int) -> list[tuple[int, np.ndarray]]:
    """Per-step (rank, rank list) using the frozen triplet embedding g_phi."""
    out = []
    for t in range(1, total_steps + 1):
        canvas = rasterize(partial_prefix(sketch, t, total_steps),
                           encoder.height, encoder.width)
        with ad.no_grad():
            emb = encoder.embed(canvas_batch([canvas])).data[0]
        out.append(rank_of(emb, gallery, true_id))
    return out


def train_otf(instances, base_encoder: RasterEncoder, scheme: RewardScheme,
              config: PPOConfig, epochs: int, lr: float = 1e-3, seed: int = 0,
              log=None) -> tuple[OtfPolicy, dict]:
    """PPO fine-tuning of the sketch branch over complete rendering episodes.

    Returns the trained policy and a report with metrics before and after.
    Epoch = one update batch of `config.batch_size` episodes; the behaviour
    (old) policy is refreshed after every update.
    """
    from .ranking import build_gallery

    rng = np.random.Generator(np.random.PCG64(seed))
    gallery = build_gallery(base_encoder, instances)
    policy = OtfPolicy(base_encoder, seed=seed)
    state_cache = {inst.instance_id: prefix_states(inst.sketch, policy, config.steps)
                   for inst in instances}

    report = {"before": evaluate_policy(policy, instances, gallery, config.steps,
                                        state_cache)}
    opt = Adam(policy.trainable_params(config.variant), lr=lr)
    old_params = policy.snapshot()
    n = len(instances)
    for epoch in range(epochs):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        traces = []
        for i in idx:
            inst = instances[i]
            traces.append(rollout(
                inst.sketch, policy, gallery, inst.instance_id, config.steps,
                rng=rng, sample=True, scheme=scheme,
                states=state_cache[inst.instance_id], old_params=old_params))
        diag = ppo_update(traces, config, policy, opt)
        old_params = policy.snapshot()
        if log:
            log(epoch, diag)
    report["after"] = evaluate_policy(policy, instances, gallery, config.steps,
                                      state_cache)
    return policy, report
