"""Run directory layout, metrics CSV and multi-model checkpoints."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .tensor_net import AdamState, ParamSet, load_params, save_params

RUN_ROOT_ENV = "CRDFLOW_RUN_ROOT"


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass
class MetricsRow:
    step: int
    mean_raw_reward: float
    eval_reward: float
    crd_loss: float
    kl_loss: float
    implicit_reward_mean: float
    implicit_reward_std: float
    kl_to_phi: float
    wall_time: float

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# wall time is kept out of metrics.csv so that reruns produce identical files
METRICS_COLUMNS = [n for n in MetricsRow.field_names() if n != "wall_time"]


class MetricsWriter:
    """Line-buffered CSV appender; every row is flushed and fsynced."""

    def __init__(self, path: Path, columns: list[str], append: bool = False):
        self.path = Path(path)
        self.columns = columns
        exists = append and self.path.exists() and self.path.stat().st_size > 0
        try:
            self._fh = open(self.path, "a" if exists else "w", encoding="utf-8", newline="", buffering=1)
        except OSError as exc:
            raise OSError(f"cannot open metrics file {self.path}: {exc}") from exc
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if not exists:
            self._writer.writerow(columns)
            self._flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row[c]) for c in self.columns])
        self._flush()

    def _flush(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[k]) for r in body]) for k, name in enumerate(header)}


def truncate_metrics(path: Path, last_step: int) -> None:
    """Drop rows after ``last_step`` (used when resuming)."""
    if not Path(path).exists():
        return
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(float(r[0])) <= last_step]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


class RunDir:
    def __init__(self, path: Path | str):
        self.path = Path(path)

    def create(self) -> "RunDir":
        for sub in ("", "checkpoints", "plots"):
            (self.path / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config_path(self) -> Path:
        return self.path / "config.yaml"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.csv"

    @property
    def timing_path(self) -> Path:
        return self.path / "timing.csv"

    @property
    def summary_path(self) -> Path:
        return self.path / "summary.json"

    @property
    def plots(self) -> Path:
        return self.path / "plots"

    def checkpoint_path(self, step: int | str) -> Path:
        name = f"step_{step:06d}" if isinstance(step, int) else str(step)
        return self.path / "checkpoints" / name

    def write_config(self, text: str) -> None:
        self.config_path.write_text(text, encoding="utf-8")

    def write_summary(self, summary: dict) -> None:
        self.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_checkpoint(path: Path, models: dict[str, ParamSet], opt: AdamState | None = None, state: dict | None = None) -> Path:
    """Write a checkpoint directory; refuses to overwrite an existing one."""
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"checkpoint {path} already exists")
    tmp = path.with_name(path.name + ".partial")
    tmp.mkdir(parents=True)
    for name, params in models.items():
        save_params(params, tmp / name)
    if opt is not None:
        ref = next(iter(models.values()))
        save_params(ParamSet(ref.spec, opt.m), tmp / "adam_m")
        save_params(ParamSet(ref.spec, opt.v), tmp / "adam_v")
    meta = dict(state or {})
    meta["models"] = list(models)
    meta["adam_step"] = None if opt is None else opt.step
    (tmp / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.rename(path)
    return path


def read_checkpoint(path: Path):
    path = Path(path)
    meta = json.loads((path / "state.json").read_text(encoding="utf-8"))
    models = {name: load_params(path / name) for name in meta["models"]}
    opt = None
    if meta.get("adam_step") is not None:
        opt = AdamState(load_params(path / "adam_m").tensors, load_params(path / "adam_v").tensors, meta["adam_step"])
    return models, opt, meta


def save_group_dump(path: Path, groups) -> None:
    Path(path).write_text(json.dumps([g.to_dict() for g in groups]) + "\n", encoding="utf-8")
