"""Synthetic slide bags: patch grids with planted tumour blobs and isolated noise.

Each bag is a G x G grid of patches.  Normal patches are drawn from
N(0, sigma^2 I); tumour patches of subtype c from N(shift * u_c, sigma^2 I) where
u_c is a fixed unit direction per subtype.  Isolated noise patches use the
subtype-1 tumour distribution but are never 8-adjacent to tumour or other noise.
A task style adds a constant feature offset to every patch and tints the
thumbnail, playing the role of inter-institution staining shift.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, SpecError

NORMAL, TUMOR, NOISE = 0, 1, 2
TAG_NAMES = {NORMAL: "normal", TUMOR: "tumor", NOISE: "noise"}
TAG_CODES = {v: k for k, v in TAG_NAMES.items()}

# Seed of the class directions; shared by every task (tumour biology does not
# change between institutions, only the staining does).
CLASS_DIRECTION_SEED = 20240917
THUMB_BLEND = 0.5  # weight of the tint in a thumbnail pixel


@dataclass(frozen=True)
class TaskStyle:
    task_id: int
    feature_offset: np.ndarray
    thumbnail_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_scale: float = 1.0

    def __post_init__(self):
        tint = tuple(float(t) for t in self.thumbnail_tint)
        if len(tint) != 3 or any(t < 0.0 or t > 1.0 for t in tint):
            raise SpecError(f"thumbnail_tint must be 3 values in [0, 1], got {tint}")
        if self.noise_scale < 0:
            raise SpecError("noise_scale must be >= 0")
        object.__setattr__(self, "thumbnail_tint", tint)
        object.__setattr__(self, "feature_offset", np.asarray(self.feature_offset, dtype=float))


@dataclass(frozen=True)
class SlideSpec:
    grid_size: int = 16
    feature_dim: int = 16
    n_tumor_blobs: int = 0
    blob_size_range: tuple[int, int] = (4, 12)
    n_isolated_noise: int = 0
    label: int = 0
    task_id: int = 0
    seed: int = 0
    sigma: float = 1.0
    tumor_shift: float = 3.0
    thumb_size: int = 8
    subtype: int = 0   # tumour subtype (class direction); 0 -> same as label

    def validate(self) -> None:
        if self.grid_size < 8:
            raise SpecError(f"grid_size must be >= 8, got {self.grid_size}")
        if self.feature_dim < 3:
            raise SpecError("feature_dim must be >= 3 (thumbnail colours use three coordinates)")
        if not 0 <= self.n_tumor_blobs <= 3:
            raise SpecError("n_tumor_blobs must be in 0..3")
        lo, hi = self.blob_size_range
        if lo < 2 or hi < lo:
            raise SpecError(f"blob_size_range must satisfy 2 <= min <= max, got {self.blob_size_range}")
        if self.n_isolated_noise < 0:
            raise SpecError("n_isolated_noise must be >= 0")
        if self.label > 0 and self.n_tumor_blobs == 0:
            raise SpecError("a tumour-labelled slide needs at least one blob")
        if self.label == 0 and self.n_tumor_blobs > 0:
            raise SpecError("a normal slide cannot carry tumour blobs")
        if self.thumb_size < 1:
            raise SpecError("thumb_size must be >= 1")
        if self.n_tumor_blobs or self.n_isolated_noise:
            need = max(self.tumour_class, 3) + 1
            if self.feature_dim < need:
                raise SpecError(f"feature_dim must be >= {need} for tumour subtype {self.tumour_class}")

    @property
    def tumour_class(self) -> int:
        return self.subtype or max(self.label, 1)


@dataclass
class Bag:
    coords: np.ndarray        # (n, 2) int rows/cols
    features: np.ndarray      # (n, d)
    label: int
    task_id: int
    thumbnail: np.ndarray     # (S, S, 3) in [0, 1]
    mask: np.ndarray          # (n,) NORMAL / TUMOR / NOISE, evaluation only
    seed: int = 0
    grid_size: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=float)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        self.thumbnail = np.asarray(self.thumbnail, dtype=float)
        n = self.coords.shape[0]
        if self.features.shape[0] != n or self.mask.shape[0] != n:
            raise InputError("coords, features and mask disagree on patch count")
        if len({(int(r), int(c)) for r, c in self.coords}) != n:
            raise InputError("patch coordinates are not unique")
        if not np.all(np.isfinite(self.thumbnail)):
            raise InputError("thumbnail is not finite")
        if not self.grid_size:
            self.grid_size = int(self.coords.max()) + 1 if n else 0

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def class_direction(subtype: int, dim: int) -> np.ndarray:
    """Unit direction of a tumour subtype's mean (subtype >= 1).

    Every subtype shares a common tumour component and adds its own
    orthogonal component with equal weight.
    """
    k = max(subtype, 3) + 1
    if subtype < 1 or dim < k:
        raise SpecError(f"no tumour direction for subtype {subtype} in dimension {dim}")
    rng = np.random.default_rng([CLASS_DIRECTION_SEED, dim])
    q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    return (q[:, 0] + q[:, subtype]) / np.sqrt(2.0)


_STEPS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _neighbours(cell, G):
    r, c = cell
    for dr, dc in _STEPS8:
        rr, cc = r + dr, c + dc
        if 0 <= rr < G and 0 <= cc < G:
            yield rr, cc


def _grow_blob(rng, G, size, forbidden: set) -> list | None:
    """Seeded random walk that collects ``size`` distinct cells, all outside ``forbidden``."""
    free = [(r, c) for r in range(G) for c in range(G) if (r, c) not in forbidden]
    if not free:
        return None
    cur = free[rng.integers(len(free))]
    cells = [cur]
    seen = {cur}
    for _ in range(60 * size):
        if len(cells) == size:
            return cells
        options = [p for p in _neighbours(cur, G) if p not in forbidden]
        if not options:
            # walk is boxed in; restart from a random blob cell
            cur = cells[rng.integers(len(cells))]
            continue
        cur = options[rng.integers(len(options))]
        if cur not in seen:
            seen.add(cur)
            cells.append(cur)
    return cells if len(cells) == size else None


def _halo(cells, G) -> set:
    out = set(cells)
    for cell in cells:
        out.update(_neighbours(cell, G))
    return out


def plan_layout(spec: SlideSpec, rng: np.random.Generator) -> np.ndarray:
    """Return a G x G tag grid with blobs and isolated noise placed."""
    G = spec.grid_size
    lo, hi = spec.blob_size_range
    for _attempt in range(50):
        tags = np.full((G, G), NORMAL, dtype=np.int64)
        blocked: set = set()  # cells a new blob or noise patch may not occupy
        ok = True
        for _ in range(spec.n_tumor_blobs):
            size = int(rng.integers(lo, hi + 1))
            cells = _grow_blob(rng, G, size, blocked)
            if cells is None:
                ok = False
                break
            for r, c in cells:
                tags[r, c] = TUMOR
            blocked |= _halo(cells, G)
        if not ok:
            continue
        free = [(r, c) for r in range(G) for c in range(G) if (r, c) not in blocked]
        for _ in range(spec.n_isolated_noise):
            if not free:
                ok = False
                break
            cell = free[rng.integers(len(free))]
            tags[cell] = NOISE
            halo = _halo([cell], G)
            blocked |= halo
            free = [p for p in free if p not in halo]
        if ok:
            return tags
    raise SpecError(
        f"cannot place {spec.n_tumor_blobs} blobs of size {spec.blob_size_range} and "
        f"{spec.n_isolated_noise} isolated noise patches on a {G}x{G} grid"
    )


def generate_bag(spec: SlideSpec, style: TaskStyle | None = None) -> Bag:
    spec.validate()
    d = spec.feature_dim
    if style is None:
        style = TaskStyle(spec.task_id, np.zeros(d))
    if style.feature_offset.shape != (d,):
        raise SpecError(f"style offset has dimension {style.feature_offset.shape}, expected ({d},)")
    rng = np.random.default_rng(spec.seed)
    tags = plan_layout(spec, rng)
    G = spec.grid_size
    rows, cols = np.divmod(np.arange(G * G), G)
    coords = np.stack([rows, cols], axis=1)
    mask = tags.ravel()

    sigma = spec.sigma * style.noise_scale
    feats = sigma * rng.standard_normal((G * G, d))
    # noise patches look exactly like this slide's tumour; only their isolation gives them away
    tumour_like = (mask == TUMOR) | (mask == NOISE)
    if np.any(tumour_like):
        feats[tumour_like] += spec.tumor_shift * class_direction(spec.tumour_class, d)
    feats += style.feature_offset

    bag = Bag(coords, feats, spec.label, spec.task_id, np.zeros((1, 1, 3)), mask, spec.seed, G)
    bag.thumbnail = render_thumbnail(bag, spec.thumb_size, style.thumbnail_tint)
    return bag


def _area_matrix(m: int, S: int) -> np.ndarray:
    """(S, m) weights resampling m cells onto S pixels by overlap area."""
    A = np.zeros((S, m))
    for i in range(S):
        a0, a1 = i * m / S, (i + 1) * m / S
        for j in range(int(math.floor(a0)), min(m, int(math.ceil(a1)))):
            A[i, j] = max(0.0, min(a1, j + 1) - max(a0, j))
    return A / A.sum(axis=1, keepdims=True)


def render_thumbnail(bag: Bag, S: int, tint: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Stitch patch colours into a near-square mosaic and area-resample to S x S x 3.

    Patch colour is the logistic squash of its first three feature coordinates;
    a pixel is ``(1 - THUMB_BLEND) * colour + THUMB_BLEND * tint``.  Mosaic cells
    without a patch are white background.
    """
    n = len(bag)
    if n == 0:
        raise InputError("cannot render an empty bag")
    side = math.isqrt(n - 1) + 1
    colours = 1.0 / (1.0 + np.exp(-bag.features[:, :3]))
    colours = (1.0 - THUMB_BLEND) * colours + THUMB_BLEND * np.asarray(tint, dtype=float)
    mosaic = np.ones((side * side, 3))
    # patches are stitched in grid (row-major) order
    order = np.lexsort((bag.coords[:, 1], bag.coords[:, 0]))
    mosaic[:n] = colours[order]
    mosaic = mosaic.reshape(side, side, 3)
    A = _area_matrix(side, S)
    return np.einsum("ij,jkc,lk->ilc", A, mosaic, A)


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class DataConfig:
    grid_size: int = 16
    feature_dim: int = 8
    sigma: float = 1.0
    tumor_shift: float = 6.0
    n_subtypes: int = 3
    blob_size_range: tuple[int, int] = (8, 16)
    min_blobs: int = 2                 # tumour slides draw min_blobs..max_blobs blobs
    max_blobs: int = 3
    n_isolated_noise: int = 1          # in tumour-labelled slides
    n_isolated_noise_normal: int = 0   # in normal slides
    thumb_size: int = 8
    n_train: int = 60
    n_test: int = 50
    class_counts: list[int] = field(default_factory=lambda: [2, 4, 2, 4])
    offset_norms: list[float] = field(default_factory=lambda: [6.0, 5.5, 5.0, 4.5])


def subtypes_for_label(label: int, n_classes: int, n_subtypes: int) -> list[int]:
    """Tumour subtypes a class label covers.

    Subtypes 1..K are spread over labels 1..C-1 in order, so a binary task
    calls every subtype "tumour" while a (K+1)-class task names each one.
    """
    if label == 0:
        return []
    out = [s for s in range(1, n_subtypes + 1) if math.ceil(s * (n_classes - 1) / n_subtypes) == label]
    return out or [min(label, n_subtypes)]


def default_styles(cfg: DataConfig, seed: int) -> list[TaskStyle]:
    """One style per task: mutually orthogonal offsets scaled to ``offset_norms``, hue-spaced tints.

    Orthogonality makes the pairwise offset distance at least sqrt(2) * min(norm).
    """
    T = len(cfg.offset_norms)
    rng = np.random.default_rng([seed, 0x5717E])
    dirs = rng.standard_normal((cfg.feature_dim, max(T, 1)))
    if T <= cfg.feature_dim:
        dirs, _ = np.linalg.qr(dirs)
    else:
        dirs /= np.linalg.norm(dirs, axis=0)
    phase = rng.random()
    styles = []
    for t, norm in enumerate(cfg.offset_norms):
        # evenly spaced hues keep the stains of different tasks apart
        tint = colorsys.hsv_to_rgb((phase + t / T) % 1.0, 0.8, 0.9)
        styles.append(TaskStyle(t, norm * cfg.sigma * dirs[:, t], tint, 1.0))
    return styles


def stratified_labels(n: int, class_balance: Sequence[float]) -> list[int]:
    """Per-class counts by largest remainder, in class order."""
    w = np.asarray(class_balance, dtype=float)
    w = w / w.sum()
    raw = n * w
    counts = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[j] += 1
    return [c for c, k in enumerate(counts) for _ in range(k)]


def bag_seed(base_seed: int, task_id: int, split: int, index: int) -> int:
    # train (split 0) and test (split 1) occupy disjoint ranges
    if index >= 50_000:
        raise SpecError("at most 50000 bags per split")
    return ((base_seed * 1000 + task_id) * 2 + split) * 50_000 + index


def generate_task_dataset(
    task_id: int,
    n_train: int,
    n_test: int,
    class_balance: Sequence[float],
    base_seed: int,
    style: TaskStyle | None = None,
    cfg: DataConfig | None = None,
) -> tuple[list[Bag], list[Bag]]:
    if n_train <= 0 or n_test <= 0:
        raise SpecError("dataset sizes must be positive")
    cfg = cfg or DataConfig()
    if style is None:
        style = TaskStyle(task_id, np.zeros(cfg.feature_dim))
    out = []
    for split, n in ((0, n_train), (1, n_test)):
        labels = stratified_labels(n, class_balance)
        rng = np.random.default_rng([base_seed, task_id, split])
        labels = [labels[i] for i in rng.permutation(n)]
        bags = []
        for j, y in enumerate(labels):
            seed = bag_seed(base_seed, task_id, split, j)
            pick = np.random.default_rng([seed, 1])
            blobs = 0 if y == 0 else int(pick.integers(cfg.min_blobs, cfg.max_blobs + 1))
            kinds = subtypes_for_label(y, len(class_balance), cfg.n_subtypes)
            subtype = int(kinds[pick.integers(len(kinds))]) if kinds else 0
            spec = SlideSpec(
                grid_size=cfg.grid_size, feature_dim=cfg.feature_dim, n_tumor_blobs=blobs,
                blob_size_range=tuple(cfg.blob_size_range),
                n_isolated_noise=cfg.n_isolated_noise if y > 0 else cfg.n_isolated_noise_normal,
                label=y, task_id=task_id, seed=seed, sigma=cfg.sigma,
                tumor_shift=cfg.tumor_shift, thumb_size=cfg.thumb_size, subtype=subtype,
            )
            bags.append(generate_bag(spec, style))
        out.append(bags)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Text serialization
#
#   pagmil-bag 1
#   task_id <t> label <y> seed <s> grid <G> dim <d> patches <n> thumb <S>
#   <row> <col> <tag> <f_1> ... <f_d>            (n lines)
#   <r,g,b of pixel (i, 0)> ... <pixel (i, S-1)>  (S lines, 3S values each)
#
# Floats are written with repr() so a read/write cycle is exact.

BAG_MAGIC = "pagmil-bag 1"


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_bag(bag: Bag) -> str:
    S = bag.thumbnail.shape[0]
    lines = [
        BAG_MAGIC,
        f"task_id {bag.task_id} label {bag.label} seed {bag.seed} grid {bag.grid_size} "
        f"dim {bag.feature_dim} patches {len(bag)} thumb {S}",
    ]
    for (r, c), tag, f in zip(bag.coords, bag.mask, bag.features):
        lines.append(f"{r} {c} {TAG_NAMES[int(tag)]} " + " ".join(_fmt(x) for x in f))
    for i in range(S):
        lines.append(" ".join(_fmt(x) for x in bag.thumbnail[i].ravel()))
    return "\n".join(lines) + "\n"


def loads_bag(text: str) -> Bag:
    lines = text.splitlines()
    if not lines or lines[0].strip() != BAG_MAGIC:
        raise InputError("not a pagmil bag file (bad magic line)")
    head = lines[1].split()
    meta = {head[i]: int(head[i + 1]) for i in range(0, len(head), 2)}
    n, d, S = meta["patches"], meta["dim"], meta["thumb"]
    if len(lines) < 2 + n + S:
        raise InputError("truncated bag file")
    coords = np.empty((n, 2), dtype=np.int64)
    feats = np.empty((n, d))
    mask = np.empty(n, dtype=np.int64)
    for i in range(n):
        parts = lines[2 + i].split()
        if len(parts) != 3 + d:
            raise InputError(f"line {3 + i}: expected {3 + d} fields, got {len(parts)}")
        coords[i] = int(parts[0]), int(parts[1])
        mask[i] = TAG_CODES[parts[2]]
        feats[i] = [float(x) for x in parts[3:]]
    thumb = np.array(
        [[float(x) for x in lines[2 + n + i].split()] for i in range(S)]
    ).reshape(S, S, 3)
    return Bag(coords, feats, meta["label"], meta["task_id"], thumb, mask, meta["seed"], meta["grid"])


def save_bag(bag: Bag, path) -> None:
    Path(path).write_text(dumps_bag(bag))


def load_bag(path) -> Bag:
    return loads_bag(Path(path).read_text())
