"""Experiment harness: run controllers over seeded episodes and tabulate sharpness.

Configs are INI files; ``configs/experiment.ini`` documents every key.
Episode ``e`` of a scene always uses the same stack, motion seed and initial
focus whatever the controller, so controller comparisons are paired.
Episode ids in ``traces.csv`` run on across scenes in config order.
"""
import configparser
from dataclasses import dataclass, field
import logging
import os
from pathlib import Path

import numpy as np

from .camera import MotionModel, capture, load_stack, masked_sharpness_range, start_episode, synthetic_stack
from .controllers import CONTROLLER_NAMES, make_controller
from .metrics import SharpnessTrace, normalize_against, tenengrad, write_traces_csv
from .optics import LensConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    name: str
    motion: MotionModel


@dataclass
class ExperimentConfig:
    output: str = "bench_out"
    n_steps: int = 30
    n_episodes: int = 20
    seed: int = 0
    controllers: tuple = ("fibonacci", "learned")
    scenes: list = field(default_factory=lambda: [SceneConfig("static", MotionModel())])
    # stack source
    stack_dir: str = None
    n_stacks: int = 20
    stack_size: int = 64
    n_positions: int = 80
    stack_seed: int = 1000
    lens: LensConfig = field(default_factory=LensConfig)
    # controller params
    hillclimb_step_dpt: float = 0.5
    fibonacci_budget: int = None
    checkpoint: str = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        for c in self.controllers:
            if c not in CONTROLLER_NAMES and c != "oracle":
                raise ConfigError(f"unknown controller {c!r}; expected one of {CONTROLLER_NAMES}")


# ------------------------------------------------------------------ config parsing

def _line_of(path, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it (best effort)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError:
        return 0
    in_sec = False
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            in_sec = s[1:-1].strip() == section
            if in_sec and key is None:
                return i
            continue
        if in_sec and key is not None and s.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return i
    return 0


def _floats(text, n=None):
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _curriculum(text):
    """``EPOCHSxSTEPSxBATCH@LR`` stages separated by commas; ``none`` for no stages."""
    if text.strip().lower() == "none":
        return ()
    stages = []
    for item in text.split(","):
        sizes, _, lr = item.strip().partition("@")
        parts = sizes.split("x")
        if len(parts) != 3 or not lr:
            raise ValueError(f"bad curriculum stage {item.strip()!r}, expected EPOCHSxSTEPSxBATCH@LR")
        stages.append((int(parts[0]), int(parts[1]), int(parts[2]), float(lr)))
    return tuple(stages)


def parse_config(text, path="<config>"):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"{path}:{lineno}" if lineno else str(path)
        raise ConfigError(f"{where}: {exc.message if hasattr(exc, 'message') else exc}") from None

    def get(section, key, conv, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{_line_of(path, section, key)}: [{section}] {key} = {raw!r}: {exc}") from None

    known = {"experiment", "stacks", "lens", "hillclimb", "fibonacci", "learned", "train"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("scene."):
            raise ConfigError(f"{path}:{_line_of(path, sec)}: unknown section [{sec}]")
    if not cp.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")

    def names(raw):
        return tuple(v.strip() for v in raw.replace(",", " ").split() if v.strip())

    kw = dict(
        output=get("experiment", "output", str, "bench_out"),
        n_steps=get("experiment", "n_steps", int, 30),
        n_episodes=get("experiment", "n_episodes", int, 20),
        seed=get("experiment", "seed", int, 0),
        controllers=get("experiment", "controllers", names, ("fibonacci", "learned")),
        stack_dir=get("stacks", "directory", str, None),
        n_stacks=get("stacks", "n_stacks", int, 20),
        stack_size=get("stacks", "size", int, 64),
        n_positions=get("stacks", "positions", int, 80),
        stack_seed=get("stacks", "seed", int, 1000),
        hillclimb_step_dpt=get("hillclimb", "step_dpt", float, 0.5),
        fibonacci_budget=get("fibonacci", "budget", int, None),
        checkpoint=get("learned", "checkpoint", str, None),
    )
    lens_kw = {}
    for key in ("aperture_radius_D", "image_plane_L", "focus_min_dpt", "focus_max_dpt",
                "pixel_pitch", "base_power_dpt"):
        v = get("lens", key, float, None)
        if v is not None:
            lens_kw[key] = v
    try:
        kw["lens"] = LensConfig(**lens_kw)
    except ValueError as exc:
        raise ConfigError(f"{path}:{_line_of(path, 'lens')}: [lens] {exc}") from None

    scenes = []
    for sec in cp.sections():
        if not sec.startswith("scene."):
            continue
        kind = get(sec, "motion", str, "static")
        try:
            motion = MotionModel(
                kind,
                velocity=get(sec, "velocity", lambda s: _floats(s, 3), (0.0, 0.0, 0.0)),
                amplitude=get(sec, "amplitude", lambda s: _floats(s, 3), (0.0, 0.0, 0.0)),
                period=get(sec, "period", float, 20.0),
                max_step=get(sec, "max_step", lambda s: _floats(s, 3), (0.0, 0.0, 0.0)),
                rng_seed=get(sec, "seed", int, 0),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}:{_line_of(path, sec, 'motion')}: [{sec}] {exc}") from None
        scenes.append(SceneConfig(sec[len("scene."):], motion))
    if scenes:
        kw["scenes"] = scenes

    if cp.has_section("train"):
        train = {}
        for key, conv in (("epochs", int), ("batch_episodes", int), ("steps_per_episode", int),
                          ("learning_rate", float), ("clip_norm", float), ("optimizer", str),
                          ("momentum", float), ("curriculum", _curriculum), ("seed", int), ("n_train_stacks", int),
                          ("updates_per_epoch", int), ("static_fraction", float),
                          ("max_seconds", float)):
            v = get("train", key, conv, None)
            if v is not None:
                train[key] = v
        for key in cp.options("train"):
            if key not in train:
                raise ConfigError(f"{path}:{_line_of(path, 'train', key)}: unknown [train] key {key!r}")
        kw["train"] = train

    try:
        return ExperimentConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{path}:{_line_of(path, 'experiment')}: {exc}") from None


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from None
    cfg = parse_config(text, path)
    # relative paths in a config resolve against the config's directory
    base = Path(path).resolve().parent
    for attr in ("output", "stack_dir", "checkpoint"):
        v = getattr(cfg, attr)
        if v is not None and not os.path.isabs(v):
            setattr(cfg, attr, os.path.normpath(base / v))
    return cfg


# ------------------------------------------------------------------ episodes

def episode_stacks(cfg):
    """The stacks episodes draw from, in a fixed order."""
    if cfg.stack_dir:
        root = Path(cfg.stack_dir)
        if (root / "manifest.tsv").exists():
            return [load_stack(root)]
        dirs = sorted(p for p in root.iterdir() if (p / "manifest.tsv").exists())
        if not dirs:
            raise ConfigError(f"{root}: no focal stacks found")
        return [load_stack(d) for d in dirs]
    return [synthetic_stack(cfg.stack_seed + i, lens=cfg.lens, size=cfg.stack_size,
                            n_positions=cfg.n_positions) for i in range(cfg.n_stacks)]


def episode_setup(cfg, scene, episode):
    """(stack index, motion, initial focus) for episode ``episode`` of ``scene``: controller independent."""
    rng = np.random.default_rng([cfg.seed, episode])
    motion = scene.motion
    if motion.kind == "random":
        motion = MotionModel(motion.kind, motion.velocity, motion.amplitude, motion.period,
                             motion.max_step, int(rng.integers(2**31)) ^ motion.rng_seed)
    else:
        rng.integers(2**31)
    f0 = float(rng.uniform(cfg.lens.focus_min_dpt, cfg.lens.focus_max_dpt))
    return episode, motion, f0


def run_episode(cfg, stack, controller, motion=None, initial_focus_dpt=0.0, episode=0):
    """Closed loop for ``cfg.n_steps`` captures; step 0 is the initial focus."""
    state = start_episode(stack, motion, cfg.lens, initial_focus_dpt)
    controller.reset(episode=state)
    trace = SharpnessTrace(episode, controller.name)
    cmd = state.current_focus_dpt
    for step in range(cfg.n_steps):
        mask = state.current_mask()
        lo, hi = masked_sharpness_range(state)
        image, nxt = capture(state, cmd)
        value = tenengrad(image, mask)
        trace.append(step, nxt.current_focus_dpt, value, normalize_against(value, lo, hi))
        if hasattr(controller, "bind"):
            controller.bind(nxt)
        decision = controller.observe(image, nxt.current_focus_dpt, roi=mask)
        cmd = cfg.lens.clamp(decision.next_focus_dpt)
        state = nxt
    return trace


@dataclass
class SuiteResult:
    traces: list
    # (controller, scene) -> (mean per step, std per step, n ok episodes)
    stats: dict
    failures: list      # (scene, episode, controller, message)
    scene_episodes: dict


def step_statistics(traces, n_steps):
    ok = [t for t in traces if t.error is None and len(t.records) == n_steps]
    if not ok:
        return np.full(n_steps, np.nan), np.full(n_steps, np.nan), 0
    arr = np.array([t.normalized() for t in ok])
    return arr.mean(axis=0), arr.std(axis=0), len(ok)


def resolve_params(cfg, progress=None):
    """Model parameters for the learned controller: checkpoint if it exists, else train and save."""
    from .model.checkpoint import load_params, save_params
    from .model.train import TrainConfig, train
    if cfg.checkpoint and Path(cfg.checkpoint).exists():
        return load_params(cfg.checkpoint)
    tc = TrainConfig(**cfg.train)
    result = train(train_config=tc, lens=cfg.lens, progress=progress)
    models = Path(cfg.output) / "models"
    models.mkdir(parents=True, exist_ok=True)
    save_params(models / "learned.ckpt", result.params)
    if cfg.checkpoint:
        Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
        save_params(cfg.checkpoint, result.params)
    return result.params


def run_suite(cfg, params=None, write=True):
    """Every controller on every scene; writes traces.csv and summary.txt under ``cfg.output``."""
    stacks = episode_stacks(cfg)
    if "learned" in cfg.controllers and params is None:
        params = resolve_params(cfg)
    traces, failures, stats, scene_eps = [], [], {}, {}
    next_id = 0
    for scene in cfg.scenes:
        ids = list(range(next_id, next_id + cfg.n_episodes))
        scene_eps[scene.name] = ids
        next_id += cfg.n_episodes
        setups = [episode_setup(cfg, scene, e) for e in range(cfg.n_episodes)]
        for name in cfg.controllers:
            scene_traces = []
            for eid, (e, motion, f0) in zip(ids, setups):
                stack = stacks[e % len(stacks)]
                try:
                    ctrl = make_controller(name, stack, cfg.lens, params, step_dpt=cfg.hillclimb_step_dpt,
                                           budget=cfg.fibonacci_budget)
                    tr = run_episode(cfg, stack, ctrl, motion, f0, eid)
                except Exception as exc:   # recorded per episode, reported in the summary
                    tr = SharpnessTrace(eid, name, error=f"{type(exc).__name__}: {exc}")
                    failures.append((scene.name, eid, name, tr.error))
                    log.warning("episode %d (%s, %s) failed: %s", eid, scene.name, name, tr.error)
                scene_traces.append(tr)
            traces.extend(scene_traces)
            stats[(name, scene.name)] = step_statistics(scene_traces, cfg.n_steps)
    result = SuiteResult(traces, stats, failures, scene_eps)
    if write:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        write_traces_csv(out / "traces.csv", [t for t in traces if t.error is None])
        (out / "summary.txt").write_text(format_summary(cfg, result))
    return result


def format_summary(cfg, result):
    lines = []
    for scene in cfg.scenes:
        ids = result.scene_episodes[scene.name]
        lines.append(f"scene {scene.name} (motion {scene.motion.kind}, episodes {ids[0]}-{ids[-1]})")
        header = f"{'step':>4}"
        for name in cfg.controllers:
            header += f"  {name + ' mean':>16}  {name + ' std':>15}"
        lines.append(header)
        for step in range(cfg.n_steps):
            row = f"{step:>4}"
            for name in cfg.controllers:
                mean, std, _ = result.stats[(name, scene.name)]
                row += f"  {mean[step]:>16.4f}  {std[step]:>15.4f}"
            lines.append(row)
        row = f"{'all':>4}"
        for name in cfg.controllers:
            mean, std, n = result.stats[(name, scene.name)]
            row += f"  {np.mean(mean):>16.4f}  {f'n={n}':>15}"
        lines.append(row)
        lines.append("")
    if result.failures:
        lines.append("failed episodes:")
        for scene, eid, name, msg in result.failures:
            lines.append(f"  {scene} episode {eid} {name}: {msg}")
    else:
        lines.append("failed episodes: none")
    return "\n".join(lines) + "\n"
