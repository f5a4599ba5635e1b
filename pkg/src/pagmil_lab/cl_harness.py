"""Sequential-task experiments: train across a task stream, evaluate every task after every stage."""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import prompt_guide as pg
from .errors import InputError, InvariantViolation, PagmilError, UndefinedMetricError
from .mil_core import SGD, LossWeights, ModelState, PromptContext, aggregate, score_patches, train_step
from .numerics import auc_binary, softmax
from .patch_selector import SelectorConfig
from .synth_data import DataConfig, TUMOR, default_styles, generate_task_dataset

PAGMIL = "pagmil"
NAIVE = "naive-baseline"
SEPARATE = "separate-upper-bound"
METHODS = (PAGMIL, NAIVE, SEPARATE)


@dataclass
class SelectorSettings:
    B: int = 8
    k_percent: float = 10.0
    neighborhood: str = "8-conn"
    kmeans_restarts: int = 20

    def build(self) -> SelectorConfig:
        return SelectorConfig(self.B, self.k_percent, self.neighborhood, self.kmeans_restarts)


@dataclass
class PromptSettings:
    p_dim: int = 32
    gen_hidden: int = 32
    min_margin: float = 1.0
    inter_variant: str = pg.HINGE_ONLY


@dataclass
class ModelSettings:
    hidden: int = 32
    tau: float = 1.0


@dataclass
class OptimSettings:
    lr: float = 1e-2
    momentum: float = 0.9


@dataclass
class ExperimentConfig:
    method: str = PAGMIL
    seed: int = 0
    epochs: int = 30
    data: DataConfig = field(default_factory=DataConfig)
    selector: SelectorSettings = field(default_factory=SelectorSettings)
    prompt: PromptSettings = field(default_factory=PromptSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimSettings = field(default_factory=OptimSettings)
    task_order: list[int] | None = None
    # None -> method default (on for pagmil / separate, off for the naive baseline)
    use_patch_selector: bool | None = None
    use_prompt_guide: bool | None = None
    threads: int = 1

    @property
    def n_tasks(self) -> int:
        return len(self.data.class_counts)

    def order(self) -> list[int]:
        return list(range(self.n_tasks)) if self.task_order is None else list(self.task_order)

    def ps_enabled(self) -> bool:
        if self.use_patch_selector is not None:
            return self.use_patch_selector
        return self.method != NAIVE

    def pg_enabled(self) -> bool:
        if self.method == SEPARATE:
            return False
        if self.use_prompt_guide is not None:
            return self.use_prompt_guide
        return self.method == PAGMIL

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["blob_size_range"] = list(self.data.blob_size_range)
        return d


@dataclass
class EvalResult:
    acc: float
    auc: float | None
    routing_acc: float | None
    predictions: list[int] = field(default_factory=list)


@dataclass
class RunReport:
    method: str
    seed: int
    task_order: list[int]
    class_counts: list[int]
    R: list[list[dict | None]]         # R[stage][task] = {"acc", "auc", "routing_acc"} or None
    summary: dict
    routing_per_stage: list[float | None]
    config: dict
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "method": self.method, "seed": self.seed, "task_order": self.task_order,
            "class_counts": self.class_counts, "R": self.R, "summary": self.summary,
            "routing_per_stage": self.routing_per_stage, "config": self.config,
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def acc_matrix(self) -> list[list[float | None]]:
        return [[None if c is None else c["acc"] for c in row] for row in self.R]

    def table(self) -> str:
        return format_table([self])


# ---------------------------------------------------------------------------
# Evaluation

def _bag_auc_scores(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> float | None:
    try:
        if n_classes == 2:
            return auc_binary(probs[:, 1], labels)
        aucs = []
        for c in range(n_classes):
            y = (labels == c).astype(int)
            if 0 < y.sum() < y.size:
                aucs.append(auc_binary(probs[:, c], y))
        if not aucs:
            raise UndefinedMetricError("no class has both positives and negatives")
        return float(np.mean(aucs))
    except UndefinedMetricError:
        return None


def _predict_one(model: ModelState, bag, use_routing: bool, forced_head: int | None):
    scores = score_patches(bag, model.attn)
    M = aggregate(bag, scores)
    if forced_head is not None:
        hid, routed_task = forced_head, None
    elif use_routing:
        prompt = pg.generate_prompt(bag.thumbnail, model.gen)
        routed_task, hid, _ = pg.route(prompt, model.prompts)
    else:
        hid, routed_task = 0, None
    return model.heads.predict(M, hid), routed_task


def evaluate(model: ModelState, test_set, method: str = PAGMIL, n_classes: int | None = None,
             use_routing: bool | None = None, oracle_head: int | None = None,
             threads: int = 1) -> EvalResult:
    """ACC / AUC (binary or macro one-vs-rest) and routing accuracy on one task's test set.

    With routing, each bag goes to the head whose stored prompt is closest in
    cosine; ``oracle_head`` forces a head instead.  Logits from a head with
    a different class count than the task are truncated/padded so that a
    misrouted bag is simply scored by whatever the wrong head says.
    """
    if len(model.heads) == 0:
        raise PagmilError("model has no heads to evaluate")
    if use_routing is None:
        use_routing = method == PAGMIL and len(model.prompts) > 0
    labels = np.array([b.label for b in test_set])
    C = n_classes or int(labels.max()) + 1

    def work(bag):
        return _predict_one(model, bag, use_routing, oracle_head)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(work, test_set))
    else:
        outs = [work(b) for b in test_set]

    probs = np.zeros((len(test_set), C))
    preds, routed_ok = [], []
    for i, ((logits, routed_task), bag) in enumerate(zip(outs, test_set)):
        p = softmax(logits)
        k = min(C, p.size)
        probs[i, :k] = p[:k]
        preds.append(int(np.argmax(logits)))
        if routed_task is not None:
            routed_ok.append(routed_task == bag.task_id)
    acc = float(np.mean(np.array(preds) == labels))
    auc = _bag_auc_scores(probs, labels, C)
    routing = float(np.mean(routed_ok)) if routed_ok else None
    return EvalResult(acc, auc, routing, preds)


def forgetting_metrics(R) -> dict:
    """Summaries of an ACC matrix R[stage][task] (stages and tasks in training order)."""
    R = [[None if v is None else float(v) for v in row] for row in R]
    T = len(R)
    last = R[-1]
    final_avg = float(np.mean([last[t] for t in range(T)]))
    if T < 2:
        bwt = None
    else:
        bwt = float(np.mean([last[t] - R[t][t] for t in range(T - 1)]))
    return {
        "final_avg_acc": final_avg,
        "backward_transfer": bwt,
        "task1_retention": last[0] - R[0][0],
        "task1_final_acc": last[0],
    }


# ---------------------------------------------------------------------------
# Training

@dataclass
class _Seeds:
    data: int
    init: int
    kmeans: int
    order: int

    @classmethod
    def split(cls, root: int) -> "_Seeds":
        data, init, km, order = np.random.SeedSequence(root).spawn(4)
        return cls(*(int(s.generate_state(1)[0]) for s in (data, init, km, order)))


def build_datasets(cfg: ExperimentConfig, seeds: _Seeds):
    styles = default_styles(cfg.data, seeds.data)
    data = {}
    for t in range(cfg.n_tasks):
        C = cfg.data.class_counts[t]
        data[t] = generate_task_dataset(t, cfg.data.n_train, cfg.data.n_test, [1.0] * C,
                                        seeds.data, styles[t], cfg.data)
    return styles, data


def _init_model(cfg: ExperimentConfig, seeds: _Seeds) -> ModelState:
    return ModelState.init(cfg.data.feature_dim, cfg.data.thumb_size, cfg.model.hidden,
                           cfg.prompt.gen_hidden, cfg.prompt.p_dim, cfg.prompt.min_margin,
                           seed=seeds.init)


def _head_seed(seeds: _Seeds, task: int):
    return [seeds.init, 0x4EAD, task]


def _mean_prompt(model: ModelState, bags) -> np.ndarray:
    return np.mean([pg.generate_prompt(b.thumbnail, model.gen) for b in bags], axis=0)


def train_task(model: ModelState, train_bags, cfg: ExperimentConfig, seeds: _Seeds, stage: int,
               use_ps: bool, use_pg: bool, log=None) -> np.ndarray | None:
    """Train the active head (plus shared parts) for ``cfg.epochs`` epochs on one task.

    Returns the final-epoch prompts when the prompt branch is on.
    """
    opt = SGD(cfg.optim.lr, cfg.optim.momentum)
    sel_cfg = cfg.selector.build() if use_ps else None
    weights = cfg.loss_weights
    n = len(train_bags)
    last_prompts = None
    for epoch in range(cfg.epochs):
        ctx = None
        if use_pg:
            # the epoch mean is recomputed once at the start of every epoch
            ctx = PromptContext(_mean_prompt(model, train_bags), n, cfg.prompt.inter_variant)
            running = []
        order = np.random.default_rng([seeds.order, stage, epoch]).permutation(n)
        tot = 0.0
        for j, idx in enumerate(order):
            _, diag = train_step(model, train_bags[idx], sel_cfg, weights, opt, ctx,
                                 tau=cfg.model.tau, kmeans_seed=[seeds.kmeans, stage, epoch, j])
            tot += diag.total
            if use_pg:
                running.append(diag.prompt)
        if use_pg:
            last_prompts = np.array(running)
        if log is not None:
            log(f"stage {stage} epoch {epoch + 1}/{cfg.epochs} mean loss {tot / n:.5f}")
    return last_prompts


def _check_frozen(model: ModelState, reference: dict[str, bytes]) -> None:
    now = model.snapshot()
    for name, blob in reference.items():
        if now.get(name) != blob:
            raise InvariantViolation(f"frozen parameter {name} changed")


def run_experiment(cfg: ExperimentConfig, log=None, stage_hook=None, datasets=None) -> RunReport:
    """Train ``cfg.method`` over the task stream and evaluate every task after every stage.

    ``stage_hook(stage, models)`` is called after each stage's evaluation.
    ``datasets`` maps task -> (train bags, test bags) and replaces generation.
    """
    if cfg.method not in METHODS:
        raise PagmilError(f"unknown method {cfg.method!r}")
    if cfg.n_tasks < 1 or cfg.epochs < 1:
        raise PagmilError("need at least one task and one epoch")
    t0 = time.perf_counter()
    seeds = _Seeds.split(cfg.seed)
    if datasets is None:
        styles, data = build_datasets(cfg, seeds)
    else:
        styles, data = None, datasets
        missing = [t for t in range(cfg.n_tasks) if t not in data]
        if missing:
            raise PagmilError(f"datasets lack tasks {missing}")
    order = cfg.order()
    T = len(order)
    use_ps, use_pg = cfg.ps_enabled(), cfg.pg_enabled()
    counts = cfg.data.class_counts

    models: dict[int, ModelState] = {}
    shared = None
    if cfg.method != SEPARATE:
        shared = _init_model(cfg, seeds)
        if not use_pg:
            # one head for the whole stream, wide enough for every task
            shared.heads.new_head(max(counts), cfg.data.feature_dim, _head_seed(seeds, order[0]),
                                  task_id=order[0])
    frozen_ref: dict[str, bytes] = {}
    R: list[list[dict | None]] = []
    routing_per_stage: list[float | None] = []

    for stage, task in enumerate(order):
        train_bags = data[task][0]
        try:
            if cfg.method == SEPARATE:
                model = _init_model(cfg, seeds)
                model.heads.new_head(counts[task], cfg.data.feature_dim, _head_seed(seeds, task), task_id=task)
                train_task(model, train_bags, cfg, seeds, stage, use_ps, False, log)
                model.heads.freeze_active()
                models[task] = model
            else:
                model = shared
                if use_pg:
                    hid = model.heads.new_head(counts[task], cfg.data.feature_dim,
                                               _head_seed(seeds, task), task_id=task)
                prompts = train_task(model, train_bags, cfg, seeds, stage, use_ps, use_pg, log)
                if use_pg:
                    pg.finalize_task(prompts, model.prompts, task, hid)
                    model.heads.freeze_active()
                _check_frozen(model, frozen_ref)
                frozen_ref = {k: v for k, v in model.snapshot().items()
                              if k.startswith("prompt.") or _is_frozen_head(model, k)}
        except PagmilError as exc:
            raise type(exc)(f"stage {stage} (task {task}): {exc}") from exc

        row: list[dict | None] = [None] * T
        stage_routing = []
        for pos, t in enumerate(order):
            test = data[t][1]
            if cfg.method == SEPARATE:
                if t not in models:
                    continue
                res = evaluate(models[t], test, SEPARATE, counts[t], use_routing=False,
                               oracle_head=0, threads=cfg.threads)
            else:
                res = evaluate(shared, test, cfg.method, counts[t], use_routing=use_pg,
                               threads=cfg.threads)
            row[pos] = {"acc": res.acc, "auc": res.auc, "routing_acc": res.routing_acc}
            if res.routing_acc is not None and pos <= stage:
                stage_routing.append(res.routing_acc)
        R.append(row)
        routing_per_stage.append(float(np.mean(stage_routing)) if stage_routing else None)
        if log is not None:
            log(f"stage {stage} (task {task}) acc " + " ".join(
                "-" if c is None else f"{c['acc']:.3f}" for c in row))
        if stage_hook is not None:
            stage_hook(stage, models if cfg.method == SEPARATE else {None: shared})

    acc = [[None if c is None else c["acc"] for c in row] for row in R]
    summary = forgetting_metrics(acc)
    aucs = [c["auc"] for c in R[-1] if c is not None and c["auc"] is not None]
    summary["final_avg_auc"] = float(np.mean(aucs)) if aucs else None
    report = RunReport(cfg.method, cfg.seed, order, [counts[t] for t in order], R, summary,
                       routing_per_stage, cfg.to_dict())
    report.wall_clock = time.perf_counter() - t0
    report.artifacts = {"models": models if cfg.method == SEPARATE else {None: shared},
                        "data": data, "styles": styles}
    return report


def _is_frozen_head(model: ModelState, key: str) -> bool:
    if not key.startswith("head."):
        return False
    return model.heads.get(int(key.split(".")[1])).frozen


# ---------------------------------------------------------------------------
# Reporting

def format_table(reports: list[RunReport]) -> str:
    """Rows = methods, column pairs = per-task final ACC / AUC (percent)."""
    order = reports[0].task_order
    head1 = f"{'Method':<22}" + "".join(f"| {'task ' + str(t + 1):^15}" for t in order)
    head2 = f"{'':<22}" + "".join(f"| {'ACC':>6} {'AUC':>7} " for _ in order)
    lines = [head1, head2, "-" * len(head2)]
    for rep in reports:
        cells = []
        for c in rep.R[-1]:
            if c is None:
                cells.append(f"| {'-':>6} {'-':>7} ")
            else:
                auc = "-" if c["auc"] is None else f"{100 * c['auc']:.2f}"
                cells.append(f"| {100 * c['acc']:>6.2f} {auc:>7} ")
        lines.append(f"{rep.method:<22}" + "".join(cells))
    lines.append("")
    for rep in reports:
        lines.append(f"[{rep.method}] ACC after each stage (rows = stages, cols = tasks)")
        for s, row in enumerate(rep.R):
            lines.append(f"  stage {s + 1}: " + " ".join(
                "   -  " if c is None else f"{100 * c['acc']:6.2f}" for c in row))
        sm = rep.summary
        bwt = "n/a" if sm["backward_transfer"] is None else f"{100 * sm['backward_transfer']:.2f}"
        lines.append(f"  final avg ACC {100 * sm['final_avg_acc']:.2f}  BWT {bwt}  "
                     f"task-1 retention {100 * sm['task1_retention']:.2f}")
        routed = [r for r in rep.routing_per_stage if r is not None]
        if routed:
            lines.append("  routing acc per stage: " + " ".join(f"{100 * r:.1f}" for r in rep.routing_per_stage if r is not None))
    return "\n".join(lines) + "\n"


def summarize_seeds(reports: list[RunReport]) -> dict:
    """Mean and standard deviation of the final per-task ACC and the summaries across seeds."""
    final = np.array([[c["acc"] for c in r.R[-1]] for r in reports])
    avg = np.array([r.summary["final_avg_acc"] for r in reports])
    return {
        "per_task_acc_mean": final.mean(axis=0).tolist(),
        "per_task_acc_std": final.std(axis=0).tolist(),
        "final_avg_acc_mean": float(avg.mean()),
        "final_avg_acc_std": float(avg.std()),
        "seeds": [r.seed for r in reports],
    }


# ---------------------------------------------------------------------------
# Heatmaps (binary PPM, P6)

def score_raster(bag, raw_scores) -> np.ndarray:
    """G x G x 3 uint8 raster: min-max normalised scores on a blue -> red ramp, white where no patch."""
    G = bag.grid_size
    s = np.asarray(raw_scores, dtype=float)
    span = s.max() - s.min()
    t = np.full_like(s, 0.5) if span <= 0 else (s - s.min()) / span
    img = np.full((G, G, 3), 255, dtype=np.uint8)
    rgb = np.stack([255.0 * t, np.zeros_like(t), 255.0 * (1.0 - t)], axis=1)
    img[bag.coords[:, 0], bag.coords[:, 1]] = np.rint(rgb).astype(np.uint8)
    return img


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte before the pixels
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise InputError(f"{path}: not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(data[m.end(): m.end() + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise InputError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()


def export_heatmap(bag, scores, path) -> np.ndarray:
    raw = getattr(scores, "raw", scores)
    img = score_raster(bag, raw)
    write_ppm(img, path)
    return img


def hottest_in_tumor(bag, raw_scores) -> bool:
    """Whether the highest-scoring patch (lowest index on ties) is a tumour patch."""
    return bag.mask[int(np.argmax(raw_scores))] == TUMOR
