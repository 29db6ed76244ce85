"""Last-layer-only MAML (ANIL): inner-loop head adaptation on support sets,
outer-loop updates of backbone and head through the inner steps.

The inner loop rebinds only the linear head phi; backbone features are
computed once per episode with the graph kept, so the outer gradient
differentiates through the inner updates (exact second-order path). All
forward passes run the backbone in eval mode: normalization statistics stay
frozen inside the bilevel computation, which keeps every operation here a
pure function of (parameters, inputs).
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .backbones import FeatureExtractor, build_backbone
from .data import sample_episode
from .errors import ConfigError, NonFiniteGradient, ShapeMismatch
from .imageops import normalize
from .rng import stream
from .trainer import CheckpointRecord


def default_alpha(n_way):
    """Inner step size: 0.01 for 5-way-like tasks, 0.05 from 10-way up."""
    return 0.05 if n_way >= 10 else 0.01


@dataclass
class MetaConfig:
    n_way: int = 5
    k_shot: int = 1
    alpha: float = None  # None -> default_alpha(n_way)
    beta: float = 0.001
    inner_steps_train: int = 5
    inner_steps_eval: int = 10
    task_batch: int = 4
    epochs: int = 400
    episodes_per_epoch: int = 100
    query_per_class: int = 15
    val_episodes: int = 200
    val_partition: object = "val"  # partition name (or tuple) for checkpoint selection
    first_order: bool = False  # speed-comparison toggle only

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = default_alpha(self.n_way)
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigError("step sizes must be positive")
        if self.inner_steps_train < 1:
            raise ConfigError("need at least one inner step during training")

    @property
    def outer_steps_per_epoch(self):
        return max(1, self.episodes_per_epoch // self.task_batch)


class TensorEpisode(NamedTuple):
    """Model-ready episode tensors (normalized float inputs, long labels)."""

    support_x: torch.Tensor
    support_y: torch.Tensor
    query_x: torch.Tensor
    query_y: torch.Tensor


@dataclass
class MetaState:
    """Backbone parameters theta plus the carried head phi (n_way x dim)."""

    backbone: torch.nn.Module
    phi_w: torch.Tensor
    phi_b: torch.Tensor

    @property
    def n_way(self):
        return self.phi_w.shape[0]

    def features(self, x):
        """Eval-mode forward with the autograd graph kept."""
        was_training = self.backbone.training
        self.backbone.eval()
        try:
            return self.backbone(x)
        finally:
            self.backbone.train(was_training)

    def parameters(self):
        return list(self.backbone.parameters()) + [self.phi_w, self.phi_b]


def init_meta_state(backbone_cfg, n_way, seed, dtype=torch.float32):
    """(FeatureExtractor, MetaState) with seeded random theta and phi."""
    fe = build_backbone(backbone_cfg, seed)
    fe.module.to(dtype)
    with torch.random.fork_rng():
        torch.manual_seed((int(seed) ^ 0x5DEECE66D) & 0x7FFFFFFFFFFFFFFF)
        phi_w = 0.01 * torch.randn(n_way, fe.feature_dim, dtype=dtype)
        phi_b = torch.zeros(n_way, dtype=dtype)
    phi_w.requires_grad_(True)
    phi_b.requires_grad_(True)
    return fe, MetaState(fe.module, phi_w, phi_b)


def inner_adapt(state, support_x, support_y, alpha, steps, create_graph=True):
    """Adapted head (w', b') after `steps` support-set gradient steps.

    theta stays frozen; with create_graph=True the result remains
    differentiable with respect to both theta and phi for outer-loop use.
    """
    if support_y.max().item() >= state.n_way or support_y.min().item() < 0:
        raise ShapeMismatch(f"support labels must lie in 0..{state.n_way - 1}")
    feats = state.features(support_x)
    if feats.shape[1] != state.phi_w.shape[1]:
        raise ShapeMismatch(
            f"feature width {feats.shape[1]} != head width {state.phi_w.shape[1]}"
        )
    w, b = state.phi_w, state.phi_b
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(feats @ w.T + b, support_y)
        gw, gb = torch.autograd.grad(loss, (w, b), create_graph=create_graph)
        w = w - alpha * gw
        b = b - alpha * gb
    return w, b


def bilevel_objective(state, episodes, alpha, inner_steps, create_graph=True):
    """Sum over the task batch of query losses at the adapted heads."""
    total = None
    for ep in episodes:
        w, b = inner_adapt(state, ep.support_x, ep.support_y, alpha, inner_steps,
                           create_graph=create_graph)
        feats_q = state.features(ep.query_x)
        loss = torch.nn.functional.cross_entropy(feats_q @ w.T + b, ep.query_y)
        total = loss if total is None else total + loss
    return total


# ANIL and last-layer-only MAML are the same computation; both names resolve
# to the one implementation above so the equivalence is structural.
anil_objective = bilevel_objective
maml_last_layer_objective = bilevel_objective


def outer_gradients(state, episodes, config):
    """Exact gradient of the bilevel objective w.r.t. (theta, phi)."""
    total = bilevel_objective(
        state, episodes, config.alpha, config.inner_steps_train,
        create_graph=not config.first_order,
    )
    params = state.parameters()
    grads = torch.autograd.grad(total, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("meta gradient contains NaN or Inf")
    return grads, float(total.detach())


def meta_outer_step(state, episodes, config):
    """One outer update of theta and phi through the inner steps."""
    if len(episodes) != config.task_batch:
        raise ConfigError(f"expected a task batch of {config.task_batch}, got {len(episodes)}")
    grads, total = outer_gradients(state, episodes, config)
    with torch.no_grad():
        for p, g in zip(state.parameters(), grads):
            p.sub_(config.beta * g)
    return state, total


def meta_eval_episode(state, ep, alpha, steps):
    """Native inner-loop evaluation: (query loss, query accuracy)."""
    w, b = inner_adapt(state, ep.support_x, ep.support_y, alpha, steps, create_graph=False)
    with torch.no_grad():
        logits = state.features(ep.query_x) @ w.T + b
        loss = torch.nn.functional.cross_entropy(logits, ep.query_y)
        acc = (logits.argmax(dim=1) == ep.query_y).float().mean()
    return float(loss), float(acc)


def episode_tensors(dataset, episode, mean, std, out_size, dtype=torch.float32):
    """Normalized model-input tensors for a sampled dataset episode."""
    sx = normalize(dataset.views(episode.support_idx, out_size), mean, std)
    qx = normalize(dataset.views(episode.query_idx, out_size), mean, std)
    return TensorEpisode(
        torch.from_numpy(sx).to(dtype),
        torch.from_numpy(episode.support_y),
        torch.from_numpy(qx).to(dtype),
        torch.from_numpy(episode.query_y),
    )


def _dataset_stats(dataset, partition="train"):
    from .data import _channel_stats

    return _channel_stats(dataset, dataset.indices(partition))


def meta_train(config, dataset, backbone_cfg, seed, split=None, log_path=None):
    """Meta-train on train-partition episodes, validate on val episodes.

    Returns (FeatureExtractor, MetaState, records) with the
    minimum-validation-loss parameters restored into both.
    """
    if split is not None:
        mean, std = split.mean_rgb, split.std_rgb
    else:
        mean, std = _dataset_stats(dataset)
    fe, state = init_meta_state(backbone_cfg, config.n_way, seed)
    out_size = backbone_cfg.input_size
    n, k, q = config.n_way, config.k_shot, config.query_per_class
    steps_per_epoch = config.outer_steps_per_epoch

    def draw(partition, rng_key):
        ep = sample_episode(dataset, partition, n, k, q, rng_key)
        return episode_tensors(dataset, ep, mean, std, out_size)

    records = []
    best = None
    for epoch in range(config.epochs):
        for step_i in range(steps_per_epoch):
            episodes = [
                draw("train", stream(seed, "train-ep", epoch, step_i, j))
                for j in range(config.task_batch)
            ]
            meta_outer_step(state, episodes, config)
        val_losses, val_accs = [], []
        for v in range(config.val_episodes):
            ep = draw(config.val_partition, stream(seed, "val-ep", v))
            loss, acc = meta_eval_episode(state, ep, config.alpha, config.inner_steps_eval)
            val_losses.append(loss)
            val_accs.append(acc)
        val_loss = float(np.mean(val_losses))
        records.append(CheckpointRecord(epoch, val_loss, {"query_acc": float(np.mean(val_accs))}))
        if best is None or val_loss < best[0]:
            best = (
                val_loss,
                {k_: v.detach().clone() for k_, v in state.backbone.state_dict().items()},
                state.phi_w.detach().clone(),
                state.phi_b.detach().clone(),
            )
    if best is not None:
        state.backbone.load_state_dict(best[1])
        with torch.no_grad():
            state.phi_w.copy_(best[2])
            state.phi_b.copy_(best[3])
    if log_path is not None:
        from .trainer import _write_log

        _write_log(log_path, [
            dict(epoch=r.epoch, val_loss=r.val_loss, **r.holdout_acc) for r in records
        ])
    return fe, state, records
