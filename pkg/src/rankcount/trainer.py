"""Training regimes: counting-only, ranking-then-finetune, alternating and multi-task."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import BatchConfig, Minibatch, PatchConfig, Sources, assemble_batch
from .losses import active_pairs, counting_loss, multitask_loss, normalized_counts, ranking_loss
from .model import CountingNet, NetConfig, init, save_checkpoint
from .tensor import SGD, Tensor

log = logging.getLogger(__name__)

REGIMES = ("finetune", "alternating", "multitask", "counting")


@dataclass
class TrainConfig:
    regime: str = "multitask"
    lam: float = 100.0
    epsilon: float = 0.0
    lr: float = 1e-2
    lr_decay: float = 0.1
    lr_step: int = 10000
    iterations: int = 20000
    rank_iterations: int | None = None  # finetune phase 1 length; None means same as `iterations`
    weight_decay: float = 5e-4
    momentum: float = 0.0
    alt_period: int = 300
    k: int = 5
    s: float = 0.75
    r: float = 8.0
    anchor_mode: str = "area"
    counting_batch: int = 25
    chains_per_batch: int = 5
    input_size: int = 224
    sigma: float = 15.0
    min_side: int = 56
    max_side: int = 448
    scales: tuple[float, ...] = (1.0,)
    side_dist: str = "uniform"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    in_channels: int = 3
    input_scale: float = 1.0
    head_scale: float = 1.0
    head_bias: float = 0.0
    seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 1000
    reset_lr_per_phase: bool = True  # finetune: restart the schedule for phase 2

    def __post_init__(self):
        self.scales = tuple(float(v) for v in self.scales)
        self.widths = tuple(int(v) for v in self.widths)
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for name in ("lr", "iterations", "lr_step", "alt_period", "counting_batch", "chains_per_batch", "input_size", "sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0 or self.weight_decay < 0 or self.epsilon < 0 or (self.rank_iterations or 0) < 0:
            raise ValueError("lam, weight_decay, epsilon and rank_iterations must be non-negative")

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(self.in_channels, self.widths, input_scale=self.input_scale)

    @property
    def batch_config(self) -> BatchConfig:
        patch = PatchConfig(
            self.input_size, self.net_config.output_stride, self.sigma, self.min_side, self.max_side, self.scales, self.side_dist
        )
        return BatchConfig(patch, self.counting_batch, self.chains_per_batch, self.k, self.seed)

    def init_net(self) -> CountingNet:
        return init(self.net_config, np.random.default_rng(self.init_seed), head_scale=self.head_scale, head_bias=self.head_bias)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        d["widths"] = list(self.widths)
        return d


PRESETS = {
    "toy": {},
    "published": {"lr": 1e-6},
    # laptop-CPU scale: native-resolution 32 px patches, a two-block net and
    # normalized inputs; see the README for the toy experiment it was tuned on
    "desk": {
        "input_size": 32,
        "widths": (8, 16),
        "min_side": 32,
        "max_side": 32,
        "sigma": 4.0,
        "input_scale": 10.0,
        "head_scale": 0.1,
        "head_bias": -2.0,
        "lr": 1e-2,
        "momentum": 0.9,
        "lam": 1.0,
        "iterations": 800,
        "lr_step": 560,
        "alt_period": 100,
        "checkpoint_every": 200,
    },
}


def _parse_value(field_type, text: str):
    kind = str(field_type)
    text = text.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    if kind.startswith("tuple"):
        cast = int if "int" in kind else float
        return tuple(cast(p) for p in text.replace(",", " ").split())
    if kind.startswith("int"):
        return int(float(text))
    if kind.startswith("float"):
        return float(text)
    if kind.startswith("bool"):
        return text.lower() in ("1", "true", "yes", "on")
    return text


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, text in pairs.items():
        name = key.replace("-", "_")
        if name == "lambda":
            name = "lam"
        if name not in types:
            raise KeyError(f"unknown config key {key!r}")
        out[name] = _parse_value(types[name], text)
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` text; '#' starts a comment."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def make_config(preset: str = "toy", file_values: dict[str, str] | None = None, overrides: dict | None = None) -> TrainConfig:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if file_values:
        values.update(parse_overrides(file_values))
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Step schedule: lr * decay ** (iteration // lr_step), iterations counted from 0."""
    return cfg.lr * cfg.lr_decay ** (iteration // cfg.lr_step)


# -- log ---------------------------------------------------------------------
@dataclass
class IterRecord:
    iteration: int
    phase: str
    lc: float | None
    lr_loss: float | None
    active_pairs: int
    lr: float


@dataclass
class EvalRecord:
    iteration: int
    mae: float
    mse: float


@dataclass
class TrainLog:
    records: list[IterRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def add(self, rec: IterRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError(f"iteration {rec.iteration} does not follow {self.records[-1].iteration}")
        self.records.append(rec)

    def phases(self) -> list[tuple[str, int]]:
        """Run-length (phase, n_iterations) summary."""
        out: list[tuple[str, int]] = []
        for r in self.records:
            if out and out[-1][0] == r.phase:
                out[-1] = (r.phase, out[-1][1] + 1)
            else:
                out.append((r.phase, 1))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "phase", "L_c", "L_r", "active_pairs", "lr"])
            for r in self.records:
                w.writerow([r.iteration, r.phase, _fmt(r.lc), _fmt(r.lr_loss), r.active_pairs, repr(r.lr)])
            if self.evals:
                w.writerow([])
                w.writerow(["eval_iteration", "MAE", "MSE"])
                for e in self.evals:
                    w.writerow([e.iteration, repr(e.mae), repr(e.mse)])


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


# -- one optimisation step ---------------------------------------------------
def batch_loss(net: CountingNet, batch: Minibatch, phase: str, cfg: TrainConfig) -> tuple[Tensor, IterRecord]:
    """Loss for one batch. ``phase`` selects which terms drive the gradient."""
    if phase == "counting":
        pred = net(batch.images[: batch.n_counting])
        lc = counting_loss(pred, batch.gt)
        return lc, IterRecord(0, phase, lc.item(), None, 0, 0.0)
    if phase == "ranking":
        pred = net(batch.images[batch.n_counting :])
        counts = normalized_counts(pred)
        pairs = batch.pairs - batch.n_counting
        lr_t = ranking_loss(counts, pairs, cfg.epsilon)
        return lr_t, IterRecord(0, phase, None, lr_t.item(), active_pairs(counts.data, pairs, cfg.epsilon), 0.0)
    if phase == "multitask":
        nc = batch.n_counting
        if cfg.lam == 0:
            # L = L_c exactly; the ranking rows are only evaluated for the log
            pred_c = net(batch.images[:nc])
            lc = counting_loss(pred_c, batch.gt)
            rcounts = normalized_counts(net(batch.images[nc:])).data
            pairs = batch.pairs - nc
            lr_val = float(np.maximum(rcounts[pairs[:, 1]] - rcounts[pairs[:, 0]] + cfg.epsilon, 0).sum())
            return lc, IterRecord(0, phase, lc.item(), lr_val, active_pairs(rcounts, pairs, cfg.epsilon), 0.0)
        pred = net(batch.images)
        lc = counting_loss(pred[:nc], batch.gt)
        counts = normalized_counts(pred)
        lr_t = ranking_loss(counts, batch.pairs, cfg.epsilon)
        total = multitask_loss(lc, lr_t, cfg.lam)
        return total, IterRecord(0, phase, lc.item(), lr_t.item(), active_pairs(counts.data, batch.pairs, cfg.epsilon), 0.0)
    raise ValueError(f"unknown phase {phase!r}")


class Trainer:
    """Runs one regime; holds the single optimizer shared by all phases."""

    def __init__(
        self,
        net: CountingNet,
        sources: Sources,
        cfg: TrainConfig,
        out_dir: str | Path | None = None,
        eval_fn: Callable[[CountingNet], tuple[float, float]] | None = None,
        eval_every: int = 0,
    ):
        self.net = net
        self.sources = sources
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.opt = SGD(net.parameters(), cfg.weight_decay, cfg.momentum)
        self.log = TrainLog()
        self.eval_fn = eval_fn
        self.eval_every = eval_every
        self.batch_cfg = cfg.batch_config
        self.step_hooks: list[Callable[[int, str, CountingNet], None]] = []

    def _batch(self, phase: str, index: int) -> Minibatch:
        kind = {"counting": "counting", "ranking": "ranking", "multitask": "mixed"}[phase]
        return assemble_batch(kind, self.sources, self.batch_cfg, index)

    def step(self, iteration: int, phase: str, batch_index: int, lr_clock: int) -> IterRecord:
        for p in self.net.parameters():
            assert p.grad is None, f"stale gradient on {p.name}: grads must be cleared before backward"
        batch = self._batch(phase, batch_index)
        loss, rec = batch_loss(self.net, batch, phase, self.cfg)
        loss.backward()
        for hook in self.step_hooks:
            hook(iteration, phase, self.net)
        lr = lr_at(self.cfg, lr_clock)
        self.opt.step(lr)
        rec = dataclasses.replace(rec, iteration=iteration, lr=lr)
        self.log.add(rec)
        if self.out_dir and self.cfg.checkpoint_every and (iteration + 1) % self.cfg.checkpoint_every == 0:
            self.checkpoint(f"iter{iteration + 1:06d}.ckpt")
        if self.eval_fn and self.eval_every and (iteration + 1) % self.eval_every == 0:
            mae, mse = self.eval_fn(self.net)
            self.log.evals.append(EvalRecord(iteration + 1, mae, mse))
        return rec

    def checkpoint(self, name: str) -> Path | None:
        if not self.out_dir:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        save_checkpoint(self.net, path, {"train_config": self.cfg.to_dict()})
        return path

    def run_phase(self, phase: str, n: int, start: int, batch_start: int, clock_start: int) -> int:
        for t in range(n):
            self.step(start + t, phase, batch_start + t, clock_start + t)
        return start + n

    # regimes
    def counting_only(self) -> TrainLog:
        self.run_phase("counting", self.cfg.iterations, 0, 0, 0)
        return self.log

    def finetune(self) -> TrainLog:
        n1 = self.cfg.iterations if self.cfg.rank_iterations is None else self.cfg.rank_iterations
        if n1:
            self.run_phase("ranking", n1, 0, 0, 0)
        self.checkpoint("ranking_phase.ckpt")
        clock = 0 if self.cfg.reset_lr_per_phase else n1
        self.run_phase("counting", self.cfg.iterations, n1, 0, clock)
        return self.log

    def alternating(self) -> TrainLog:
        period = self.cfg.alt_period
        it = 0
        counters = {"counting": 0, "ranking": 0}
        # begin with ranking so that an even number of phases ends on the counting task
        phase = "ranking"
        while it < self.cfg.iterations:
            n = min(period, self.cfg.iterations - it)
            # one global iteration clock drives the schedule; each task keeps its own batch stream
            self.run_phase(phase, n, it, counters[phase], it)
            counters[phase] += n
            it += n
            phase = "ranking" if phase == "counting" else "counting"
        return self.log

    def multitask(self) -> TrainLog:
        self.run_phase("multitask", self.cfg.iterations, 0, 0, 0)
        return self.log

    def run(self) -> TrainLog:
        fn = {
            "counting": self.counting_only,
            "finetune": self.finetune,
            "alternating": self.alternating,
            "multitask": self.multitask,
        }[self.cfg.regime]
        log.info("training regime=%s iterations=%d", self.cfg.regime, self.cfg.iterations)
        out = fn()
        self.checkpoint("final.ckpt")
        return out


def train_counting(net, sources, cfg, **kw):
    return net, Trainer(net, sources, cfg, **kw).counting_only()


def train_finetune(net, sources, cfg, **kw):
    return net, Trainer(net, sources, cfg, **kw).finetune()


def train_alternating(net, sources, cfg, **kw):
    return net, Trainer(net, sources, cfg, **kw).alternating()


def train_multitask(net, sources, cfg, **kw):
    return net, Trainer(net, sources, cfg, **kw).multitask()
