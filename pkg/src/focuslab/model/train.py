"""Closed-loop training of the focus-step network on virtual-camera episodes."""
import csv
from dataclasses import dataclass, field
import logging
import math
import time

import numpy as np

from ..camera import MotionModel, capture, start_episode, synthetic_stack
from ..optics import LensConfig
from .network import ModelConfig, ModelParams, NumericError, backward, episode_losses, forward_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # the final stage; ``curriculum`` stages run before it
    epochs: int = 8
    batch_episodes: int = 4
    steps_per_episode: int = 30
    learning_rate: float = 1e-3
    # (epochs, steps per episode, batch episodes, learning rate) per stage
    curriculum: tuple = ((60, 1, 8, 3e-3), (30, 5, 8, 3e-3), (12, 12, 8, 1e-3))
    clip_norm: float = 5.0
    optimizer: str = "adam"         # "sgd" or "adam"
    momentum: float = 0.0
    seed: int = 0
    n_train_stacks: int = 24
    updates_per_epoch: int = 10
    static_fraction: float = 0.5
    # t=0 target is +|f_best - f_prev|: the defocus sign is invisible in one frame
    canonical_first_step: bool = True
    max_seconds: float = None
    in_focus_range: tuple = (-1.5, 2.5)

    def __post_init__(self):
        stages = tuple(tuple(st) for st in self.curriculum)
        for st in stages:
            if len(st) != 4 or min(st[:3]) < 1 or not st[3] > 0:
                raise ValueError(f"curriculum stage {st!r}: need (epochs, steps, batch, lr), all > 0")
        self.curriculum = tuple((int(a), int(b), int(c), float(d)) for a, b, c, d in stages)


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)   # (epoch, total, focus, heatmap)
    aborted: bool = False
    message: str = ""


LOG_COLUMNS = ("epoch", "mean_loss_total", "mean_loss_f", "mean_loss_heatmap")


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def random_motion(rng, static_fraction=0.5):
    """Motion model drawn from the training mixture."""
    u = rng.uniform()
    if u < static_fraction:
        return MotionModel("static")
    kind = rng.choice(["linear", "swing", "random"], p=[0.25, 0.5, 0.25])
    seed = int(rng.integers(2**31))
    if kind == "linear":
        v = (rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.08, 0.08))
        return MotionModel("linear", velocity=v, rng_seed=seed)
    if kind == "swing":
        a = (rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0.2, 0.8))
        return MotionModel("swing", amplitude=a, period=float(rng.uniform(12, 30)), rng_seed=seed)
    return MotionModel("random", max_step=(1.0, 1.0, rng.uniform(0.02, 0.1)), rng_seed=seed)


def training_stacks(n, seed=0, lens=None, size=64, in_focus_range=(-1.5, 2.5)):
    return [synthetic_stack(seed * 100003 + i, lens=lens, size=size, in_focus_range=in_focus_range)
            for i in range(n)]


def rollout(params, episodes, n_steps, canonical_first_step=True, keep_cache=True):
    """Run a batch of episodes in closed loop with the model's own commands.

    Returns (activations, targets (T, N), labels (T, N, H, W), commands (T, N)).
    """
    states = list(episodes)
    n = len(states)
    acts, targets, labels, commands = [], [], [], []
    rec = None
    prev = np.array([s.current_focus_dpt for s in states])
    for t in range(n_steps):
        imgs, masks, nxt = [], [], []
        for i, s in enumerate(states):
            img, ns = capture(s, prev[i])
            imgs.append(img)
            masks.append(s.current_mask() > 0.5)
            nxt.append(ns)
        states = nxt
        f_best = np.array([s.best_focus_dpt() for s in states])
        tgt = f_best - prev
        if t == 0 and canonical_first_step:
            tgt = np.abs(tgt)
        act = forward_step(params, np.stack(imgs), rec, keep_cache=keep_cache)
        rec = act.state
        acts.append(act)
        targets.append(tgt)
        labels.append(np.stack(masks).astype(np.int64))
        prev = np.array([s.lens.clamp(p + d) for s, p, d in zip(states, prev, act.delta_f)])
        commands.append(prev.copy())
    return acts, np.array(targets), np.array(labels), np.array(commands)


class _Optimizer:
    def __init__(self, cfg, params):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        cfg = self.cfg
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = min(1.0, cfg.clip_norm / norm) if cfg.clip_norm and norm > 0 else 1.0
        self.t += 1
        for k, p in params.tensors.items():
            g = grads[k] * scale
            if cfg.optimizer == "adam":
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1 ** self.t)
                vh = self.v[k] / (1 - b2 ** self.t)
                p -= lr * mh / (np.sqrt(vh) + 1e-8)
            elif cfg.momentum:
                self.m[k] = cfg.momentum * self.m[k] + g
                p -= lr * self.m[k]
            else:
                p -= lr * g
        return norm


def random_episodes(stacks, lens, static_fraction=0.5):
    """Default episode source: random stack, motion and initial focus per episode."""
    def source(rng, n):
        eps = []
        for _ in range(n):
            stack = stacks[int(rng.integers(len(stacks)))]
            motion = random_motion(rng, static_fraction)
            f0 = rng.uniform(lens.focus_min_dpt, lens.focus_max_dpt)
            eps.append(start_episode(stack, motion, lens, f0))
        return eps
    return source


def train(model_config=None, train_config=None, stacks=None, lens=None, params=None, progress=None,
          episodes=None):
    """Train on closed-loop episodes; deterministic for a fixed ``train_config.seed``.

    Stages run in order: each ``curriculum`` entry, then the final stage given
    by ``epochs``, ``steps_per_episode``, ``batch_episodes`` and ``learning_rate``.
    Short episodes first teach the network to read defocus from one frame;
    longer ones teach it to correct and then hold focus over a full episode.

    ``episodes(rng, n)`` supplies each batch of fresh episode states; by default
    they are drawn from ``stacks`` (generated when not given). A non-finite
    loss aborts training and returns the last good parameters.
    """
    model_config = model_config or ModelConfig()
    tc = train_config or TrainConfig()
    lens = lens or LensConfig()
    if tc.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {tc.optimizer!r}")
    if episodes is None and stacks is None:
        w, h = model_config.input_size
        stacks = training_stacks(tc.n_train_stacks, tc.seed, lens, size=w, in_focus_range=tc.in_focus_range)
    if episodes is None:
        episodes = random_episodes(stacks, lens, tc.static_fraction)
    params = params.copy() if params is not None else ModelParams.init(model_config, tc.seed)
    opt = _Optimizer(tc, params)
    rng = np.random.default_rng([tc.seed, 11])
    result = TrainResult(params)
    good = params.copy()
    t_start = time.monotonic()

    schedule = []
    for n_epochs, n_steps, batch, lr in tuple(tc.curriculum) + (
            (tc.epochs, tc.steps_per_episode, tc.batch_episodes, tc.learning_rate),):
        schedule += [(n_steps, batch, lr)] * n_epochs

    for epoch, (n_steps, batch, lr) in enumerate(schedule):
        sums = np.zeros(3)
        for _ in range(tc.updates_per_epoch):
            eps = episodes(rng, batch)
            try:
                acts, targets, labels, _ = rollout(params, eps, n_steps, tc.canonical_first_step)
                total, lf, lh, d_f, d_h = episode_losses(acts, targets, labels, model_config.lambda_heatmap)
                if not math.isfinite(total):
                    raise NumericError("non-finite training loss")
                grads = backward(params, acts, d_f, d_h)
            except NumericError as exc:
                result.params, result.aborted = good, True
                result.message = f"diverged in epoch {epoch}: {exc}"
                log.warning(result.message)
                return result
            opt.step(params, grads, lr)
            sums += (total, lf, lh)
        row = (epoch, *(sums / tc.updates_per_epoch))
        result.log.append(row)
        good = params.copy()
        if progress:
            progress(row)
        if tc.max_seconds is not None and time.monotonic() - t_start > tc.max_seconds:
            result.message = f"time budget reached after epoch {epoch}"
            break
    result.params = params
    return result
