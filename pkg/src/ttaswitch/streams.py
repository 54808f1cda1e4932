"""Synthetic scenes, label-preserving corruptions, and the target stream.

A scene is a textured background (class 0) plus a few geometric objects of
distinct non-background classes; the dense class map is reduced to
per-patch majority labels. Corruptions transform pixels only, so labels
carry over untouched. The target stream cycles the corruption domains for
a fixed number of rounds and is a single-pass iterator: each instance is
yielded exactly once and the stream cannot be rewound.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

CORRUPTIONS = ("fog", "night", "rain", "snow")

# fixed base colors per non-background class; jittered per scene
_CLASS_COLORS = np.array([
    (0.85, 0.25, 0.20),
    (0.20, 0.75, 0.30),
    (0.25, 0.35, 0.85),
    (0.90, 0.80, 0.25),
    (0.70, 0.30, 0.80),
    (0.90, 0.55, 0.15),
    (0.20, 0.75, 0.75),
])
_SHAPES = ("disk", "square", "triangle", "diamond")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    num_classes: int = 5
    min_objects: int = 2
    max_objects: int = 5

    def __post_init__(self):
        if self.channels != 3:
            raise ValueError("scene rendering is RGB only (channels=3)")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if not 2 <= self.num_classes <= len(_CLASS_COLORS) + 1:
            raise ValueError(f"num_classes must lie in [2, {len(_CLASS_COLORS) + 1}]")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class Scene:
    image: np.ndarray        # [3, h, w] float64 in [0, 1]
    class_map: np.ndarray    # [h, w] int64 dense labels
    labels: np.ndarray       # [num_patches] int64 per-patch majority labels
    seed: int
    layout: tuple            # ((class, shape, cy, cx, radius), ...)


def _shape_mask(kind: str, yy, xx, cy: float, cx: float, r: float) -> np.ndarray:
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r
    if kind == "triangle":
        return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - cy + r) / 2.0)
    if kind == "diamond":
        return np.abs(yy - cy) + np.abs(xx - cx) <= r
    raise ValueError(f"unknown shape kind '{kind}'")


def generate_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministic scene for (seed, spec); same inputs give identical bytes."""
    rng = np.random.default_rng(int(seed))
    h = w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = rng.uniform(0.30, 0.55, size=3)
    tilt = rng.uniform(-0.12, 0.12, size=(3, 2))
    image = np.empty((3, h, w))
    for c in range(3):
        image[c] = base[c] + tilt[c, 0] * (yy / h) + tilt[c, 1] * (xx / w)
    image += rng.normal(0.0, 0.02, size=image.shape)

    class_map = np.zeros((h, w), dtype=np.int64)
    max_obj = min(spec.max_objects, spec.num_classes - 1)
    n_obj = int(rng.integers(spec.min_objects, max_obj + 1))
    classes = rng.choice(np.arange(1, spec.num_classes), size=n_obj, replace=False)
    layout = []
    for cls in classes:
        kind = _SHAPES[(int(cls) - 1) % len(_SHAPES)]
        r = rng.uniform(0.12, 0.26) * spec.image_size
        cy = rng.uniform(r * 0.7, h - r * 0.7)
        cx = rng.uniform(r * 0.7, w - r * 0.7)
        mask = _shape_mask(kind, yy, xx, cy, cx, r)
        color = np.clip(_CLASS_COLORS[int(cls) - 1] + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        texture = rng.normal(0.0, 0.03, size=(3, h, w))
        for c in range(3):
            image[c][mask] = color[c] + texture[c][mask]
        class_map[mask] = int(cls)
        layout.append((int(cls), kind, float(cy), float(cx), float(r)))

    image = np.clip(image, 0.0, 1.0)
    labels = majority_patch_labels(class_map, spec.patch_size, spec.num_classes)
    return Scene(image=image, class_map=class_map, labels=labels, seed=int(seed),
                 layout=tuple(layout))


def majority_patch_labels(class_map: np.ndarray, patch_size: int, num_classes: int) -> np.ndarray:
    """Per-patch majority class; ties resolve to the lowest class index."""
    h, w = class_map.shape
    g = h // patch_size
    patches = class_map.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3)
    patches = patches.reshape(g * g, patch_size * patch_size)
    out = np.empty(g * g, dtype=np.int64)
    for i in range(g * g):
        out[i] = np.argmax(np.bincount(patches[i], minlength=num_classes))
    return out


def scene_class_label(scene: Scene) -> int:
    """Image-level label for classification runs: class of the largest object."""
    areas = np.bincount(scene.class_map.reshape(-1))
    if areas.size <= 1:
        return 0
    fg = areas[1:]
    return int(np.argmax(fg)) + 1 if fg.max() > 0 else 0


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption '{self.kind}' (expected one of {CORRUPTIONS})")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt pixels; geometry (and therefore labels) is untouched."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"apply_corruption: expected [c, h, w], got {x.shape}")
    s = float(spec.severity)
    if s == 0.0:
        return x.copy()
    rng = np.random.default_rng(int(spec.seed))
    out = _CORRUPTION_FNS[spec.kind](x, s, rng)
    return np.clip(out, 0.0, 1.0)


def _fog(x, s, rng):
    return (1.0 - 0.6 * s) * x + 0.6 * s


def _night(x, s, rng):
    return x * (1.0 - 0.8 * s) + rng.normal(0.0, 0.05 * s, size=x.shape)


def _rain(x, s, rng):
    _, h, w = x.shape
    out = x.copy()
    n_streaks = int(round(25 * s))
    for _ in range(n_streaks):
        length = int(rng.integers(6, 13))
        y0 = int(rng.integers(0, max(h - length, 1)))
        x0 = int(rng.integers(0, w))
        slant = int(rng.integers(-2, 3))
        ys = y0 + np.arange(length)
        xs = x0 + np.rint(np.linspace(0.0, slant, length)).astype(int)
        keep = (ys < h) & (xs >= 0) & (xs < w)
        out[:, ys[keep], xs[keep]] = np.minimum(out[:, ys[keep], xs[keep]] + 0.45, 1.0)
    for _ in range(int(np.ceil(3 * s))):
        out = ndimage.uniform_filter(out, size=(1, 3, 3), mode="nearest")
    return out


def _snow(x, s, rng):
    _, h, w = x.shape
    out = 0.5 + (x - 0.5) * (1.0 - 0.35 * s)  # contrast reduction
    n = int(round(0.1 * s * h * w))
    flat = rng.choice(h * w, size=n, replace=False)
    ys, xs = np.divmod(flat, w)
    out[:, ys, xs] = 0.15 * out[:, ys, xs] + 0.85
    return out


_CORRUPTION_FNS = {"fog": _fog, "night": _night, "rain": _rain, "snow": _snow}


# ---------------------------------------------------------------------------
# stream
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamInstance:
    """One target-stream element. The label field is for evaluation only and
    is never handed to the adaptation engine (whose input is the bare image)."""

    image: np.ndarray
    labels: np.ndarray
    domain: str
    round: int
    t: int
    scene_seed: int


def _derive_scene_seed(seed: int, t: int) -> int:
    return int(np.random.default_rng((int(seed), int(t))).integers(0, 2 ** 62))


def _derive_corruption_seed(scene_seed: int) -> int:
    return int(np.random.default_rng((int(scene_seed), 977)).integers(0, 2 ** 62))


def _make_instance(spec: SceneSpec, seed: int, t: int, domain: str, rnd: int,
                   severity: float) -> StreamInstance:
    scene_seed = _derive_scene_seed(seed, t)
    scene = generate_scene(scene_seed, spec)
    if domain == "clean":
        image = scene.image.copy()
    else:
        cspec = CorruptionSpec(kind=domain, severity=severity,
                               seed=_derive_corruption_seed(scene_seed))
        image = apply_corruption(scene.image, cspec)
    return StreamInstance(image=image, labels=scene.labels, domain=domain, round=rnd,
                          t=t, scene_seed=scene_seed)


def build_stream(spec: SceneSpec, domains, per_domain: int, rounds: int, seed: int,
                 severity: float = 0.8):
    """Single-pass iterator over rounds x domains x per_domain instances.

    Rounds are 0-indexed. Instance t of the default 4-domain, 40-per-domain
    stream therefore lands in round t // 160.
    """
    domains = list(domains)
    if not domains:
        raise ValueError("build_stream: at least one domain required")
    for d in domains:
        if d != "clean":
            CorruptionSpec(kind=d, severity=severity)  # validates kind and severity
    if per_domain < 1 or rounds < 1:
        raise ValueError("build_stream: per_domain and rounds must be >= 1")

    def gen():
        t = 0
        for rnd in range(rounds):
            for domain in domains:
                for _ in range(per_domain):
                    yield _make_instance(spec, seed, t, domain, rnd, severity)
                    t += 1

    return gen()


MANIFEST_COLUMNS = ("t", "domain", "round", "scene_seed")


def stream_manifest(domains, per_domain: int, rounds: int, seed: int) -> list[dict]:
    """Manifest rows without rendering any pixels."""
    rows = []
    t = 0
    for rnd in range(rounds):
        for domain in list(domains):
            for _ in range(per_domain):
                rows.append({"t": t, "domain": domain, "round": rnd,
                             "scene_seed": _derive_scene_seed(seed, t)})
                t += 1
    return rows


def write_manifest(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def stream_from_manifest(path, spec: SceneSpec, severity: float = 0.8):
    """Replay a stream byte-exactly from its manifest."""
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"manifest columns must be {MANIFEST_COLUMNS}")
        rows = list(reader)

    def gen():
        for row in rows:
            scene_seed = int(row["scene_seed"])
            scene = generate_scene(scene_seed, spec)
            domain = row["domain"]
            if domain == "clean":
                image = scene.image.copy()
            else:
                cspec = CorruptionSpec(kind=domain, severity=severity,
                                       seed=_derive_corruption_seed(scene_seed))
                image = apply_corruption(scene.image, cspec)
            yield StreamInstance(image=image, labels=scene.labels, domain=domain,
                                 round=int(row["round"]), t=int(row["t"]),
                                 scene_seed=scene_seed)

    return gen()
