"""Command-line entry point: ``adaptive-inr {train,eval,spectrum,verify,prune-report}``.

Exit codes: 0 success, 1 runtime failure (including divergence or a violated
bound), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import siren, verify
from .pruning import DEFAULT_EPSILON
from .schedule import DivergenceError, RunState, ScheduleError, SchedulePlan, execute, load_run_checkpoint
from .siren import CheckpointError, ConfigError, SirenNet, column_l1, init_siren, load_checkpoint, save_checkpoint
from .spectral import EnumerationGuardError, layer0_spectrum
from .tasks import DEFAULT_SPLIT, FitTask, TaskError, error_map, evaluate, image_task, sdf_task, synthetic_1d

log = logging.getLogger("adaptive_inr")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_TASK_KEYS = {
    "image": ({"path"}, {"split_frac"}),
    "synthetic": ({"signal"}, {"n_samples", "freqs", "split_frac"}),
    "sdf": ({"source"}, {"path", "on_surface", "off_surface", "split_frac"}),
}
_CONFIG_KEYS = {"task", "widths", "omega0", "seed", "out_dir", "schedule"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``widths`` lists the hidden widths only; the input width comes from the
    task.  ``schedule`` holds a :class:`SchedulePlan` whose seed is ``seed``.
    """

    task: dict
    widths: list[int]
    schedule: SchedulePlan
    omega0: float = siren.DEFAULT_OMEGA0
    seed: int = 0
    out_dir: str = "run"
    base_dir: str = field(default=".", compare=False, repr=False)

    def __post_init__(self):
        kind = self.task.get("kind")
        if kind not in _TASK_KEYS:
            raise ConfigError(f"task kind must be one of {sorted(_TASK_KEYS)}, got {kind!r}")
        required, optional = _TASK_KEYS[kind]
        keys = set(self.task) - {"kind"}
        if keys - required - optional:
            raise ConfigError(f"{kind} task does not accept {sorted(keys - required - optional)}")
        if required - keys:
            raise ConfigError(f"{kind} task is missing {sorted(required - keys)}")
        if not self.widths or any(int(w) <= 0 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive integers, got {self.widths}")
        self.widths = [int(w) for w in self.widths]
        self.schedule.seed = self.seed

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("task", "widths", "schedule"):
            if key not in data:
                raise ConfigError(f"config is missing {key!r}")
        schedule = dict(data["schedule"])
        if "seed" in schedule:
            raise ConfigError("set the seed at the top level, not inside schedule")
        seed = int(data.get("seed", 0))
        return cls(
            task=dict(data["task"]),
            widths=list(data["widths"]),
            schedule=SchedulePlan.from_dict({**schedule, "seed": seed}),
            omega0=float(data.get("omega0", siren.DEFAULT_OMEGA0)),
            seed=seed,
            out_dir=str(data.get("out_dir", "run")),
            base_dir=base_dir,
        )

    def to_dict(self) -> dict:
        schedule = self.schedule.to_dict()
        del schedule["seed"]
        return {
            "task": dict(self.task),
            "widths": list(self.widths),
            "omega0": self.omega0,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "schedule": schedule,
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def _path(self, value) -> str:
        return value if os.path.isabs(value) else os.path.join(self.base_dir, value)

    def build_task(self) -> FitTask:
        t = self.task
        split = float(t.get("split_frac", DEFAULT_SPLIT))
        if t["kind"] == "image":
            return image_task(self._path(t["path"]), self.seed, split)
        if t["kind"] == "synthetic":
            return synthetic_1d(t["signal"], int(t.get("n_samples", 256)), self.seed, t.get("freqs", (5.0, 10.0)), split)
        path = self._path(t["path"]) if "path" in t else None
        _, task = sdf_task(
            t["source"], int(t.get("on_surface", 1000)), int(t.get("off_surface", 1000)), self.seed, path, split
        )
        return task

    def build_net(self, task: FitTask) -> SirenNet:
        return init_siren([task.in_dim, *self.widths], task.out_dim, self.omega0, self.seed)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return RunConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def _write_text_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


# -- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.schedule.seed = args.seed
    for stage in cfg.schedule.stages:
        if stage.kind == "prune":
            if args.epsilon is not None:
                stage.epsilon = args.epsilon
            if args.force_prune:
                stage.force = True
    out = args.out or cfg._path(cfg.out_dir)
    os.makedirs(out, exist_ok=True)
    task = cfg.build_task()
    run_ckpt = os.path.join(out, "run.npz")
    events = os.path.join(out, "events.jsonl")
    if args.checkpoint:
        state, meta = load_run_checkpoint(args.checkpoint)
        if meta["schedule"] != json.loads(json.dumps(cfg.schedule.to_dict())):
            raise ScheduleError(f"{args.checkpoint} was written by a different schedule")
    else:
        state = RunState(net=cfg.build_net(task))
        _write_text_atomic(events, "")
    _write_text_atomic(os.path.join(out, "config.yaml"), cfg.dumps())
    try:
        state = execute(
            cfg.schedule, task, state, checkpoint_path=run_ckpt, checkpoint_every=args.checkpoint_every, event_log=events
        )
    finally:
        state.metrics.to_csv(os.path.join(out, "metrics.csv"))
    save_checkpoint(state.net, os.path.join(out, "model.npz"), {"seed": cfg.seed})
    if task.kind == "image":
        error_map(state.net, task, os.path.join(out, "error_map.png"))
    m = evaluate(state.net, task)
    print(f"widths={state.net.widths} psnr={m['psnr']:.4f} rmse={m['rmse']:.6g} param_count={m['param_count']}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    task = cfg.build_task()
    if net.in_dim != task.in_dim or net.out_dim != task.out_dim:
        raise ConfigError(f"checkpoint maps {net.in_dim} -> {net.out_dim}, task needs {task.in_dim} -> {task.out_dim}")
    m = evaluate(net, task)
    print(f"psnr={m['psnr']:.4f} rmse={m['rmse']:.6g} param_count={m['param_count']}")
    if args.out:
        _write_text_atomic(args.out, _csv_text(["psnr", "rmse", "param_count"], [[_fmt(m[k]) for k in ("psnr", "rmse", "param_count")]]))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    net = load_checkpoint(args.checkpoint)
    try:
        spec = layer0_spectrum(net, args.order, args.floor)
    except EnumerationGuardError as exc:
        print(f"error: {exc} (see --order)", file=sys.stderr)
        return EXIT_USAGE
    spec.to_csv(args.out)
    print(f"{len(spec)} generated frequencies with amplitude >= {args.floor:g} written to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if (args.checkpoint is None) == (args.random is None):
        raise UsageError("give exactly one of --checkpoint or --random")
    if args.random is not None:
        checks = verify.verify_random(args.random, args.seed, args.order, args.samples, args.rhs_scale)
    else:
        net = load_checkpoint(args.checkpoint)
        checks = verify.verify_net(net, args.trials, args.seed, args.order, args.samples, args.rhs_scale)
    failed = [c for c in checks if not c.holds]
    for c in checks if args.verbose else failed:
        print(c.line())
    by_suite = {}
    for c in checks:
        ok, total = by_suite.get(c.suite, (0, 0))
        by_suite[c.suite] = (ok + c.holds, total + 1)
    for suite, (ok, total) in by_suite.items():
        print(f"{suite}: {ok}/{total} bounds hold")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_prune_report(args) -> int:
    net = load_checkpoint(args.checkpoint)
    rows = []
    print(f"{'layer':>5} {'width':>6} {'active':>6} {'<=eps':>6} {'min':>10} {'median':>10}")
    for layer in range(net.depth + 1):
        norms = column_l1(net, layer)
        active = net.masks[layer]
        below = active & (norms <= args.epsilon)
        a = norms[active]
        print(
            f"{layer:>5} {len(norms):>6} {int(active.sum()):>6} {int(below.sum()):>6} "
            f"{a.min(initial=np.inf):>10.3e} {np.median(a) if a.size else float('nan'):>10.3e}"
        )
        rows.extend([layer, j, _fmt(norms[j]), int(active[j]), int(below[j])] for j in range(len(norms)))
    if args.out:
        _write_text_atomic(args.out, _csv_text(["layer", "unit", "column_l1", "active", "below_epsilon"], rows))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-inr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and list every check")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training schedule from a YAML config")
    p.add_argument("--config", required=True, help="YAML run config")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epsilon", type=float, help="override the pruning threshold of every prune stage")
    p.add_argument("--force-prune", action="store_true", help="prune every candidate, even above epsilon")
    p.add_argument("--checkpoint", help="resume from a run checkpoint (run.npz) written by this config")
    p.add_argument("--checkpoint-every", type=int, default=None, metavar="N", help="save run.npz every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the task of a config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config whose task (and seed, for the split) is used")
    p.add_argument("--out", help="also write the metrics to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum", help="write the generated-frequency spectrum of the first two layers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--order", type=int, default=2, help="truncation order |k|_1 (default 2)")
    p.add_argument("--floor", type=float, default=1e-6, help="drop frequencies with smaller amplitude")
    p.add_argument("--out", default="spectrum.csv", help="CSV path (default spectrum.csv)")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("verify", help="check the expansion identity and the perturbation bound")
    p.add_argument("--checkpoint", help="verify this network")
    p.add_argument("--random", type=int, metavar="N", help="verify N random neurons and N random networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--order", type=int, default=10, help="expansion truncation order (default 10)")
    p.add_argument("--trials", type=int, default=20, help="checks per suite for --checkpoint (default 20)")
    p.add_argument("--samples", type=int, default=10_000, help="input samples per stability check")
    p.add_argument(
        "--rhs-scale", type=float, default=1.0, help="multiply every bound by this factor (test hook; default 1)"
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("prune-report", help="outgoing column norms per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", help="write per-neuron norms to this CSV")
    p.set_defaults(func=cmd_prune_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (UsageError, ConfigError, ScheduleError, TaskError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
