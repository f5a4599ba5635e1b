"""YAML experiment configuration: schema, validation with line numbers, echo.

Every key is optional; missing keys keep their defaults.  Unknown keys,
wrong types and out-of-range values are rejected with the file line that
holds the offending key.  Schema (defaults in brackets)::

    method: pagmil | naive-baseline | separate-upper-bound   [pagmil]
    seed: int >= 0                                           [0]
    epochs: int >= 1                                         [30]
    threads: int >= 1                                        [1]
    task_order: list of task indices (a permutation) or null [null]
    use_patch_selector: bool or null (null = method default) [null]
    use_prompt_guide: bool or null                           [null]
    data:
      grid_size [16]  feature_dim [8]  sigma [1.0]  tumor_shift [6.0]
      n_subtypes [3]  blob_size_range [[8, 16]]  min_blobs [2]  max_blobs [3]
      n_isolated_noise [1]  n_isolated_noise_normal [0]  thumb_size [8]
      n_train [60]  n_test [50]  class_counts [[2, 4, 2, 4]]
      offset_norms [[6.0, 5.5, 5.0, 4.5]]
    selector:      B [8]  k_percent [10.0]  neighborhood [8-conn]  kmeans_restarts [20]
    prompt:        p_dim [32]  gen_hidden [32]  min_margin [1.0]  inter_variant [hinge-only]
    model:         hidden [32]  tau [1.0]
    loss_weights:  instance [1.0]  intra [0.1]  inter [0.1]
    optim:         lr [0.01]  momentum [0.9]

"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

import yaml

from . import prompt_guide as pg
from .cl_harness import (METHODS, ExperimentConfig, ModelSettings, OptimSettings, PromptSettings,
                         SelectorSettings)
from .errors import ConfigError
from .mil_core import LossWeights
from .patch_selector import CONN4, CONN8
from .synth_data import DataConfig

SECTIONS = {
    "data": DataConfig,
    "selector": SelectorSettings,
    "prompt": PromptSettings,
    "model": ModelSettings,
    "loss_weights": LossWeights,
    "optim": OptimSettings,
}


class _Marks(dict):
    """Dotted key path -> 1-based line number in the source file."""

    def line(self, path: str) -> int | None:
        while path:
            if path in self:
                return self[path]
            path = path.rpartition(".")[0]
        return None


def _err(source: str, line: int | None, msg: str) -> ConfigError:
    where = f"{source}:{line}" if line is not None else source
    return ConfigError(f"{where}: {msg}")


def _scalar(node) -> object:
    return yaml.SafeLoader("").construct_object(node, deep=True)


def _check_type(value, hint, path: str):
    """Coerce ``value`` to the annotated field type or raise TypeError."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise TypeError(f"{path} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{path} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{path} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise TypeError(f"{path} must be a string, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise TypeError(f"{path} must be a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise TypeError(f"{path} must have {len(args)} entries, got {len(value)}")
            return tuple(_check_type(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        item = args[0] if args else object
        out = [_check_type(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    return value


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _build_section(cls, node, source: str, prefix: str, marks: _Marks):
    if not isinstance(node, yaml.MappingNode):
        raise _err(source, node.start_mark.line + 1, f"section {prefix!r} must be a mapping")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for knode, vnode in node.value:
        key = knode.value
        path = f"{prefix}.{key}"
        line = knode.start_mark.line + 1
        marks[path] = line
        if key not in names:
            raise _err(source, line, f"unknown key {path!r} (allowed: {', '.join(sorted(names))})")
        if key in kwargs:
            raise _err(source, line, f"duplicate key {path!r}")
        try:
            kwargs[key] = _check_type(_scalar(vnode), hints[key], path)
        except TypeError as exc:
            raise _err(source, line, str(exc)) from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise _err(source, node.start_mark.line + 1, f"{prefix}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> tuple[ExperimentConfig, _Marks]:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise _err(source, mark.line + 1 if mark else None, f"invalid YAML: {exc}") from None
    marks = _Marks()
    if root is None:
        cfg = ExperimentConfig()
    else:
        if not isinstance(root, yaml.MappingNode):
            raise _err(source, root.start_mark.line + 1, "top level must be a mapping")
        hints = _hints(ExperimentConfig)
        top = {f.name for f in dataclasses.fields(ExperimentConfig)}
        kwargs = {}
        for knode, vnode in root.value:
            key = knode.value
            line = knode.start_mark.line + 1
            marks[key] = line
            if key not in top:
                raise _err(source, line, f"unknown key {key!r} (allowed: {', '.join(sorted(top))})")
            if key in kwargs:
                raise _err(source, line, f"duplicate key {key!r}")
            if key in SECTIONS:
                kwargs[key] = _build_section(SECTIONS[key], vnode, source, key, marks)
            else:
                try:
                    kwargs[key] = _check_type(_scalar(vnode), hints[key], key)
                except TypeError as exc:
                    raise _err(source, line, str(exc)) from None
        cfg = ExperimentConfig(**kwargs)
    validate_config(cfg, source, marks)
    return cfg, marks


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))[0]


def _problems(cfg: ExperimentConfig):
    """Yield (dotted field, message) for every constraint the config breaks."""
    d = cfg.data
    if cfg.method not in METHODS:
        yield "method", f"must be one of {', '.join(METHODS)}"
    if cfg.seed < 0 or cfg.seed >= 2 ** 64:
        yield "seed", "must be an unsigned 64-bit integer"
    if cfg.epochs < 1:
        yield "epochs", "must be >= 1"
    if cfg.threads < 1:
        yield "threads", "must be >= 1"
    if d.grid_size < 8:
        yield "data.grid_size", f"must be >= 8, got {d.grid_size}"
    if d.n_subtypes < 1:
        yield "data.n_subtypes", "must be >= 1"
    if d.feature_dim < max(d.n_subtypes, 3) + 1:
        yield "data.feature_dim", f"must be >= {max(d.n_subtypes, 3) + 1} for {d.n_subtypes} tumour subtypes"
    if d.sigma <= 0:
        yield "data.sigma", "must be > 0"
    if d.tumor_shift < 0:
        yield "data.tumor_shift", "must be >= 0"
    lo, hi = d.blob_size_range
    if not 2 <= lo <= hi:
        yield "data.blob_size_range", "must satisfy 2 <= min <= max"
    if not 1 <= d.min_blobs <= 3:
        yield "data.min_blobs", "must be between 1 and 3"
    if not 1 <= d.max_blobs <= 3:
        yield "data.max_blobs", "must be between 1 and 3"
    elif d.min_blobs > d.max_blobs:
        yield "data.max_blobs", "must be >= data.min_blobs"
    if d.n_isolated_noise < 0 or d.n_isolated_noise_normal < 0:
        yield "data.n_isolated_noise", "noise counts must be >= 0"
    if d.thumb_size < 1:
        yield "data.thumb_size", "must be >= 1"
    if d.n_train < 1 or d.n_test < 1:
        yield "data.n_train", "dataset sizes must be >= 1"
    if not d.class_counts:
        yield "data.class_counts", "need at least one task"
    elif min(d.class_counts) < 2:
        yield "data.class_counts", "every task needs >= 2 classes"
    if len(d.offset_norms) != len(d.class_counts):
        yield "data.offset_norms", "needs one entry per task (same length as class_counts)"
    s = cfg.selector
    if s.B < 1:
        yield "selector.B", "must be >= 1"
    elif d.grid_size ** 2 < 2 * s.B:
        yield "selector.B", f"bags of {d.grid_size ** 2} patches are too small for B={s.B}"
    if not 0 < s.k_percent <= 100:
        yield "selector.k_percent", "must be in (0, 100]"
    if s.neighborhood not in (CONN8, CONN4):
        yield "selector.neighborhood", f"must be {CONN8} or {CONN4}"
    if s.kmeans_restarts < 1:
        yield "selector.kmeans_restarts", "must be >= 1"
    p = cfg.prompt
    if p.p_dim < 1 or p.gen_hidden < 1:
        yield "prompt.p_dim", "prompt and hidden widths must be >= 1"
    if p.min_margin <= 0:
        yield "prompt.min_margin", "must be > 0"
    if p.inter_variant not in pg.INTER_VARIANTS:
        yield "prompt.inter_variant", f"must be one of {', '.join(pg.INTER_VARIANTS)}"
    if cfg.model.hidden < 1:
        yield "model.hidden", "must be >= 1"
    if cfg.model.tau <= 0:
        yield "model.tau", "must be > 0"
    for k in ("instance", "intra", "inter"):
        if getattr(cfg.loss_weights, k) < 0:
            yield f"loss_weights.{k}", "must be >= 0"
    if cfg.optim.lr <= 0:
        yield "optim.lr", "must be > 0"
    if not 0 <= cfg.optim.momentum < 1:
        yield "optim.momentum", "must be in [0, 1)"
    if cfg.task_order is not None and sorted(cfg.task_order) != list(range(len(d.class_counts))):
        yield "task_order", f"must be a permutation of 0..{len(d.class_counts) - 1}"


def validate_config(cfg: ExperimentConfig, source: str = "<config>", marks: _Marks | None = None) -> None:
    marks = marks or _Marks()
    for path, msg in _problems(cfg):
        raise _err(source, marks.line(path), f"{path}: {msg}")


def config_to_yaml(cfg: ExperimentConfig) -> str:
    """Full, explicit config text; parsing it back gives an equal config."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)
