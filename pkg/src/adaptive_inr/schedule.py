"""Staged adaptive training: train / densify / twd / prune / finetune.

A :class:`SchedulePlan` is an ordered list of stages.  ``train``, ``finetune``
and ``twd`` run epochs of Adam; ``densify`` and ``prune`` are instantaneous
structural edits.  The full run state (network, Adam moments, position in the
plan, frozen candidate set, metrics so far) can be checkpointed between epochs
and resumed with bit-identical results.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import siren
from .pruning import DEFAULT_EPSILON, PruneEvent, PrunePlan, alpha_schedule, make_plan, prune_below, twd_loss
from .siren import SirenNet, append_input_neurons, remove_pruned
from .spectral import plan_densification
from .tasks import FitTask, evaluate
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

STAGE_KINDS = ("train", "finetune", "twd", "prune", "densify")
_STAGE_KEYS = {
    "train": ({"epochs"}, {"lr"}),
    "finetune": ({"epochs"}, {"lr"}),
    "twd": ({"epochs", "targets"}, {"lr", "rescore"}),
    "prune": (set(), {"epsilon", "input_epsilon", "force", "targets"}),
    "densify": ({"count"}, {"init_scale"}),
}
RUN_CHECKPOINT_VERSION = 1
DEFAULT_BATCH_SIZE = 65_536
_PARAM_NAME = re.compile(r"[Wb]\d+|L|c")


class ScheduleError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class Stage:
    kind: str
    epochs: int = 0
    lr: float | None = None
    targets: tuple[tuple[int, int], ...] = ()
    rescore: bool = False
    epsilon: float | None = None
    input_epsilon: float | None = None
    force: bool = False
    count: int = 0
    init_scale: float = 1e-4

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ScheduleError(f"unknown stage kind {self.kind!r}; expected one of {STAGE_KINDS}")
        self.targets = tuple((int(layer), int(k)) for layer, k in self.targets)
        if self.epochs < 0:
            raise ScheduleError(f"{self.kind} stage has negative epochs")
        if self.kind in ("prune", "densify") and self.epochs:
            raise ScheduleError(f"{self.kind} stages are instantaneous; epochs must be 0")
        if self.kind == "twd" and not self.targets:
            raise ScheduleError("twd stage needs targets")
        if self.kind == "densify" and self.count < 0:
            raise ScheduleError("densify count must be non-negative")
        if self.epsilon is not None and self.epsilon < 0:
            raise ScheduleError("epsilon must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "Stage":
        data = dict(data)
        kind = data.pop("kind", None)
        if kind not in _STAGE_KEYS:
            raise ScheduleError(f"unknown stage kind {kind!r}; expected one of {STAGE_KINDS}")
        required, optional = _STAGE_KEYS[kind]
        unknown = set(data) - required - optional
        if unknown:
            raise ScheduleError(f"{kind} stage does not accept {sorted(unknown)}")
        missing = required - set(data)
        if missing:
            raise ScheduleError(f"{kind} stage is missing {sorted(missing)}")
        if "targets" in data:
            data["targets"] = tuple(tuple(t) for t in data["targets"])
        return cls(kind=kind, **data)

    def to_dict(self) -> dict:
        required, optional = _STAGE_KEYS[self.kind]
        defaults = Stage(kind="train")
        out = {"kind": self.kind}
        for key in sorted(required | optional):
            value = getattr(self, key)
            if key in required or value != getattr(defaults, key):
                out[key] = [list(t) for t in value] if key == "targets" else value
        return out


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SchedulePlan:
    stages: list[Stage]
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = DEFAULT_BATCH_SIZE
    frozen: tuple[str, ...] = ()

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def validate(self) -> None:
        if self.batch_size <= 0:
            raise ScheduleError("batch_size must be positive")
        self.frozen = tuple(self.frozen)
        bad = [n for n in self.frozen if not _PARAM_NAME.fullmatch(n)]
        if bad:
            raise ScheduleError(f"cannot freeze unknown parameters {bad}")
        active = False
        for i, stage in enumerate(self.stages):
            if stage.kind == "twd":
                if active:
                    raise ScheduleError(f"stage {i}: a twd stage is already waiting for its prune stage")
                active = True
            elif stage.kind == "prune":
                if not active and not stage.targets:
                    raise ScheduleError(f"stage {i}: prune without a preceding twd stage needs targets")
                active = False

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "optimizer": asdict(self.optimizer),
            "stages": [s.to_dict() for s in self.stages],
            "frozen": list(self.frozen),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SchedulePlan":
        data = dict(data)
        unknown = set(data) - {"seed", "batch_size", "optimizer", "stages", "frozen"}
        if unknown:
            raise ScheduleError(f"schedule does not accept {sorted(unknown)}")
        opt = data.get("optimizer", {})
        bad = set(opt) - {"lr", "beta1", "beta2", "eps"}
        if bad:
            raise ScheduleError(f"optimizer does not accept {sorted(bad)}")
        plan = cls(
            stages=[Stage.from_dict(s) for s in data.get("stages", [])],
            seed=int(data.get("seed", 0)),
            optimizer=OptimizerConfig(**opt),
            batch_size=int(data.get("batch_size", DEFAULT_BATCH_SIZE)),
            frozen=tuple(data.get("frozen", ())),
        )
        plan.validate()
        return plan


METRIC_FIELDS = ("epoch", "stage_index", "stage", "loss", "psnr", "rmse", "param_count")


@dataclass
class MetricsLog:
    """Per-epoch losses plus metric rows at the end of every stage."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in METRIC_FIELDS})

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows if r["loss"] != ""]

    def stage_metrics(self) -> list[dict]:
        return [r for r in self.rows if r["psnr"] != ""]

    def final(self) -> dict:
        return self.stage_metrics()[-1]

    def to_csv(self, path) -> None:
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        os.replace(tmp, path)


@dataclass
class RunState:
    net: SirenNet
    adam: AdamState = field(default_factory=AdamState)
    stage_index: int = 0
    epoch_in_stage: int = 0
    global_epoch: int = 0
    plan: PrunePlan | None = None
    metrics: MetricsLog = field(default_factory=MetricsLog)
    events: list[PruneEvent] = field(default_factory=list)
    initial_widths: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.initial_widths:
            self.initial_widths = list(self.net.widths)


def _stage_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    if batch_size >= n:
        return [np.arange(n)]
    perm = _stage_rng(seed, 0, epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _enforce_masks(net: SirenNet, adam: AdamState) -> None:
    if not net.is_masked:
        return
    for layer, mask in enumerate(net.masks):
        dead = ~mask
        if dead.any():
            net.outgoing(layer)[:, dead] = 0.0
            name = f"W{layer + 1}" if layer < net.depth else "L"
            if name in adam.m:
                adam.m[name][:, dead] = 0.0
                adam.v[name][:, dead] = 0.0


def train_epoch(
    net: SirenNet,
    adam: AdamState,
    X,
    Y,
    opt: OptimizerConfig,
    lr: float,
    batch_size: int,
    seed: int,
    epoch: int,
    plan: PrunePlan | None = None,
    alpha: float = 0.0,
    frozen=(),
) -> float:
    """One pass over ``(X, Y)``; returns the mean objective over mini-batches.

    Mini-batch order depends only on ``(seed, epoch)`` so that resumed runs
    replay the same batches.
    """
    params = net.parameters()
    batches = _batches(len(X), batch_size, seed, epoch)
    total = 0.0
    for idx in batches:
        loss, _, grads = twd_loss(net, X[idx], Y[idx], plan, alpha)
        for name in frozen:
            grads.pop(name, None)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}; training diverged")
        adam_step(params, grads, adam, lr, opt.beta1, opt.beta2, opt.eps)
        _enforce_masks(net, adam)
        total += loss
    return total / len(batches)


def densify(state: RunState, count: int, seed, init_scale: float = 1e-4):
    """Append doubled input frequencies; new parameters get zero Adam moments."""
    dplan = plan_densification(state.net, count)
    old = state.net
    state.net = append_input_neurons(old, dplan.new_frequencies, seed=seed, init_scale=init_scale)
    k = len(dplan.source_indices)
    nxt = "W1" if old.depth >= 1 else "L"
    for store in (state.adam.m, state.adam.v):
        if "W0" in store:
            store["W0"] = np.vstack([store["W0"], np.zeros((k, old.in_dim))])
        if "b0" in store:
            store["b0"] = np.concatenate([store["b0"], np.zeros(k)])
        if nxt in store:
            store[nxt] = np.hstack([store[nxt], np.zeros((store[nxt].shape[0], k))])
    return dplan


def prune_and_compact(state: RunState, stage: Stage) -> list[PruneEvent]:
    """Threshold-prune the active candidate set, then delete the pruned neurons."""
    plan = state.plan
    if plan is None:
        plan = make_plan(state.net, stage.targets, state.global_epoch)
    eps = DEFAULT_EPSILON if stage.epsilon is None else stage.epsilon
    masked, events = prune_below(state.net, plan, eps, stage.force, stage.input_epsilon, state.global_epoch)
    for e in events:
        if e.action == "force_pruned":
            log.info("force-pruned neuron %d of layer %d with norm %.3g > epsilon %.3g", e.index, e.layer, e.norm, eps)
    state.net, keep = remove_pruned(masked)
    depth = state.net.depth
    for store in (state.adam.m, state.adam.v):
        for name in list(store):
            a = store[name]
            if name == "L":
                store[name] = a[:, keep[depth]]
            elif name == "c":
                continue
            else:
                i = int(name[1:])
                a = a[keep[i]]
                if name[0] == "W" and i > 0:
                    a = a[:, keep[i - 1]]
                store[name] = a
    state.plan = None
    return events


def _record_stage_metrics(state: RunState, stage: Stage, task: FitTask) -> None:
    m = evaluate(state.net, task)
    state.metrics.add(
        epoch=state.global_epoch,
        stage_index=state.stage_index,
        stage=stage.kind,
        psnr=m["psnr"],
        rmse=m["rmse"],
        param_count=m["param_count"],
    )


def _check_compatible(plan: SchedulePlan, task: FitTask, net: SirenNet) -> None:
    plan.validate()
    if net.in_dim != task.in_dim or net.out_dim != task.out_dim:
        raise ScheduleError(
            f"network maps {net.in_dim} -> {net.out_dim} but the task maps {task.in_dim} -> {task.out_dim}"
        )


def execute(
    plan: SchedulePlan,
    task: FitTask,
    state: RunState,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    stop_after_epoch: int | None = None,
    event_log=None,
) -> RunState:
    """Advance ``state`` through the remaining stages of ``plan``.

    With ``checkpoint_path`` the state is saved every ``checkpoint_every``
    global epochs and when the run stops.  ``stop_after_epoch`` interrupts the
    run once that many global epochs have completed.
    """
    _check_compatible(plan, task, state.net)
    X, Y = task.train_data()
    opt = plan.optimizer

    def save():
        if checkpoint_path is not None:
            save_run_checkpoint(state, plan, checkpoint_path)

    while state.stage_index < len(plan.stages):
        stage = plan.stages[state.stage_index]
        lr = opt.lr if stage.lr is None else stage.lr
        if stage.kind in ("train", "finetune", "twd"):
            if stage.kind == "twd" and state.epoch_in_stage == 0 and state.plan is None:
                state.plan = make_plan(state.net, stage.targets, state.global_epoch)
                log.info("twd candidates: %s", {k: v.tolist() for k, v in state.plan.selected.items()})
            while state.epoch_in_stage < stage.epochs:
                if stop_after_epoch is not None and state.global_epoch >= stop_after_epoch:
                    save()
                    return state
                alpha = 0.0
                if stage.kind == "twd":
                    if stage.rescore:
                        state.plan = make_plan(state.net, stage.targets, state.global_epoch)
                    alpha = alpha_schedule(state.epoch_in_stage, stage.epochs)
                try:
                    loss = train_epoch(
                        state.net, state.adam, X, Y, opt, lr, plan.batch_size, plan.seed, state.global_epoch,
                        state.plan if stage.kind == "twd" else None, alpha, plan.frozen,
                    )
                except DivergenceError as exc:
                    raise DivergenceError(f"stage {state.stage_index} ({stage.kind}): {exc}") from None
                state.epoch_in_stage += 1
                state.global_epoch += 1
                state.metrics.add(
                    epoch=state.global_epoch,
                    stage_index=state.stage_index,
                    stage=stage.kind,
                    loss=loss,
                    param_count=state.net.param_count(),
                )
                if checkpoint_every and state.global_epoch % checkpoint_every == 0:
                    save()
        elif stage.kind == "densify":
            dplan = densify(state, stage.count, _stage_rng(plan.seed, 1, state.stage_index), stage.init_scale)
            log.info("densified from input neurons %s", dplan.source_indices.tolist())
        elif stage.kind == "prune":
            events = prune_and_compact(state, stage)
            state.events.extend(events)
            if event_log is not None:
                with open(event_log, "a") as fh:
                    for e in events:
                        fh.write(e.to_json() + "\n")
        _record_stage_metrics(state, stage, task)
        state.stage_index += 1
        state.epoch_in_stage = 0
    save()
    return state


def run(plan: SchedulePlan, task: FitTask, net: SirenNet, **kwargs) -> tuple[SirenNet, MetricsLog]:
    """Execute every stage of ``plan`` starting from ``net`` (which is not modified)."""
    state = execute(plan, task, RunState(net=net.copy()), **kwargs)
    return state.net, state.metrics


def train_plain(net: SirenNet, task: FitTask, epochs: int, seed: int = 0, **opt) -> tuple[SirenNet, MetricsLog]:
    return run(SchedulePlan([Stage("train", epochs=epochs)], seed=seed, optimizer=OptimizerConfig(**opt)), task, net)


# -- run checkpoints -------------------------------------------------------


def save_run_checkpoint(state: RunState, plan: SchedulePlan, path) -> None:
    arrays = siren.net_arrays(state.net)
    for name, a in state.adam.m.items():
        arrays[f"adam/m/{name}"] = a
    for name, a in state.adam.v.items():
        arrays[f"adam/v/{name}"] = a
    meta = {
        "format_version": RUN_CHECKPOINT_VERSION,
        "kind": "run",
        **siren.net_meta(state.net),
        "initial_widths": state.initial_widths,
        "adam_t": state.adam.t,
        "stage_index": state.stage_index,
        "epoch_in_stage": state.epoch_in_stage,
        "global_epoch": state.global_epoch,
        "prune_plan": None if state.plan is None else state.plan.to_json(),
        "schedule": plan.to_dict(),
        "metrics": state.metrics.rows,
        "events": [json.loads(e.to_json()) for e in state.events],
    }
    siren.write_npz_atomic(path, arrays, meta)


def load_run_checkpoint(path) -> tuple[RunState, dict]:
    arrays, meta = siren.read_npz(path)
    if meta.get("kind") != "run":
        raise siren.CheckpointError(f"{path} is not a run checkpoint")
    if meta.get("format_version") != RUN_CHECKPOINT_VERSION:
        raise siren.CheckpointError(
            f"run checkpoint version {meta.get('format_version')} is not supported (expected {RUN_CHECKPOINT_VERSION})"
        )
    net = siren.net_from_arrays(arrays, meta)
    adam = AdamState(t=int(meta["adam_t"]))
    for key, a in arrays.items():
        if key.startswith("adam/m/"):
            adam.m[key[7:]] = np.array(a)
        elif key.startswith("adam/v/"):
            adam.v[key[7:]] = np.array(a)
    state = RunState(
        net=net,
        adam=adam,
        stage_index=int(meta["stage_index"]),
        epoch_in_stage=int(meta["epoch_in_stage"]),
        global_epoch=int(meta["global_epoch"]),
        plan=None if meta["prune_plan"] is None else PrunePlan.from_json(meta["prune_plan"]),
        metrics=MetricsLog(rows=list(meta["metrics"])),
        events=[PruneEvent(**e) for e in meta["events"]],
        initial_widths=list(meta["initial_widths"]),
    )
    return state, meta


def resume(
    checkpoint,
    plan: SchedulePlan,
    task: FitTask,
    stage_index: int | None = None,
    initial_widths=None,
    **kwargs,
) -> tuple[SirenNet, MetricsLog]:
    """Continue a checkpointed run; the schedule and widths must match the checkpoint."""
    state, meta = load_run_checkpoint(checkpoint)
    if meta["schedule"] != json.loads(json.dumps(plan.to_dict())):
        raise ScheduleError("checkpoint was written by a different schedule")
    if stage_index is not None and stage_index != state.stage_index:
        raise ScheduleError(f"checkpoint is at stage {state.stage_index}, not {stage_index}")
    if initial_widths is not None and list(initial_widths) != state.initial_widths:
        raise ScheduleError(f"checkpoint started from widths {state.initial_widths}, not {list(initial_widths)}")
    state = execute(plan, task, state, **kwargs)
    return state.net, state.metrics
