"""Patch-token vision transformer with parallel bottleneck adapters.

The encoder embeds non-overlapping image patches, adds learnable absolute
position embeddings, and applies pre-norm transformer blocks. Each block
carries a parallel adapter branch (down-project, ReLU, up-project, scale)
added to the MLP output; the up-projection starts at zero so a freshly
inserted adapter leaves the function unchanged.

Decoders: per-patch segmentation logits, per-pixel reconstruction, and an
optional mean-pooled classification head. Masking replaces whole patches
with a learnable mask token at input-pixel level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scalar_mul,
    softmax_lastdim,
    tape_active,
    transpose,
)
from .params import ParamStore

TASKS = ("segmentation", "classification")
MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 5
    adapter_dim: int = 45
    adapter_scale: float = 0.1
    mask_ratio: float = 0.6
    task: str = "segmentation"

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.embed_dim < 1 or self.depth < 1 or self.heads < 1:
            raise ValueError("embed_dim, depth and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.adapter_dim < 1:
            raise ValueError("adapter_dim must be >= 1 (adapters are always present)")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}' (expected one of {TASKS})")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return MLP_RATIO * self.embed_dim


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_INIT_STD = 0.02


def _normal(rng, shape):
    return rng.normal(0.0, _INIT_STD, size=shape)


def _adapter_names(i: int) -> list[str]:
    pre = f"blocks.{i}.adapter."
    return [pre + s for s in ("down.w", "down.b", "up.w", "up.b")]


def parameter_names(config: ModelConfig, include_adapters: bool = True) -> list[str]:
    """Canonical parameter name list for a config, in insertion order."""
    names = ["patch_embed.w", "patch_embed.b", "pos_embed"]
    for i in range(config.depth):
        pre = f"blocks.{i}."
        names += [pre + "ln1.g", pre + "ln1.b"]
        names += [pre + f"attn.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [pre + "ln2.g", pre + "ln2.b"]
        names += [pre + f"mlp.{w}" for w in ("w1", "b1", "w2", "b2")]
        if include_adapters:
            names += _adapter_names(i)
    names += ["final_ln.g", "final_ln.b"]
    if config.task == "segmentation":
        names += ["seg_head.w", "seg_head.b"]
    else:
        names += ["clf_head.w", "clf_head.b"]
    names += ["rec_head.w", "rec_head.b", "mask_token"]
    return names


def init_params(config: ModelConfig, seed: int = 0, include_adapters: bool = True) -> ParamStore:
    """Freshly initialized parameters. Adapter up-projections start at zero."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    store = ParamStore()

    def p(name, value, group):
        store.add(name, Tensor(value, requires_grad=True), group)

    p("patch_embed.w", _normal(rng, (config.patch_dim, d)), "backbone")
    p("patch_embed.b", np.zeros(d), "backbone")
    p("pos_embed", _normal(rng, (config.num_patches, d)), "backbone")
    for i in range(config.depth):
        pre = f"blocks.{i}."
        p(pre + "ln1.g", np.ones(d), "backbone")
        p(pre + "ln1.b", np.zeros(d), "backbone")
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            p(pre + "attn." + w, _normal(rng, (d, d)), "backbone")
            p(pre + "attn." + b, np.zeros(d), "backbone")
        p(pre + "ln2.g", np.ones(d), "backbone")
        p(pre + "ln2.b", np.zeros(d), "backbone")
        p(pre + "mlp.w1", _normal(rng, (d, config.mlp_dim)), "backbone")
        p(pre + "mlp.b1", np.zeros(config.mlp_dim), "backbone")
        p(pre + "mlp.w2", _normal(rng, (config.mlp_dim, d)), "backbone")
        p(pre + "mlp.b2", np.zeros(d), "backbone")
        if include_adapters:
            _add_adapter(store, config, i, rng)
    p("final_ln.g", np.ones(d), "backbone")
    p("final_ln.b", np.zeros(d), "backbone")
    if config.task == "segmentation":
        p("seg_head.w", _normal(rng, (d, config.num_classes)), "seg_head")
        p("seg_head.b", np.zeros(config.num_classes), "seg_head")
    else:
        p("clf_head.w", _normal(rng, (d, config.num_classes)), "seg_head")
        p("clf_head.b", np.zeros(config.num_classes), "seg_head")
    p("rec_head.w", _normal(rng, (d, config.patch_dim)), "rec_head")
    p("rec_head.b", np.zeros(config.patch_dim), "rec_head")
    p("mask_token", _normal(rng, (config.channels, config.patch_size, config.patch_size)),
      "mask_token")
    return store


def _add_adapter(store: ParamStore, config: ModelConfig, i: int, rng) -> None:
    pre = f"blocks.{i}.adapter."
    d, r = config.embed_dim, config.adapter_dim
    store.add(pre + "down.w", Tensor(_normal(rng, (d, r)), requires_grad=True), "adapter")
    store.add(pre + "down.b", Tensor(np.zeros(r), requires_grad=True), "adapter")
    # zero-initialized up-projection: a fresh adapter is the identity map
    store.add(pre + "up.w", Tensor(np.zeros((r, d)), requires_grad=True), "adapter")
    store.add(pre + "up.b", Tensor(np.zeros(d), requires_grad=True), "adapter")


def insert_adapters(store: ParamStore, config: ModelConfig, seed: int = 0) -> ParamStore:
    """Add freshly initialized adapter parameters to an adapter-free store.

    Because up-projections start at zero, every model output is unchanged
    until the first optimizer step that touches the adapter group.
    """
    rng = np.random.default_rng(seed)
    for i in range(config.depth):
        if _adapter_names(i)[0] in store:
            raise ValueError(f"block {i} already has adapter parameters")
        _add_adapter(store, config, i, rng)
    return store


def count_params(store: ParamStore) -> dict[str, int]:
    return store.count_by_group()


def adapter_fraction(store: ParamStore) -> float:
    counts = store.count_by_group()
    total = sum(counts.values())
    return counts.get("adapter", 0) / total if total else 0.0


# ---------------------------------------------------------------------------
# patch masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchMask:
    """Boolean per-patch mask; True marks a patch replaced by the mask token."""

    mask: np.ndarray
    seed: int
    step: int
    count: int = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "count", int(m.sum()))

    @property
    def ratio_actual(self) -> float:
        return self.count / self.mask.size


def draw_mask(num_patches: int, mask_ratio: float, seed: int, step: int) -> PatchMask:
    """Sample round(ratio * n) distinct patches; reproducible from (seed, step)."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    if num_patches < 1:
        raise ValueError("num_patches must be positive")
    count = int(np.rint(mask_ratio * num_patches))
    rng = np.random.default_rng((int(seed), int(step)))
    chosen = rng.choice(num_patches, size=count, replace=False)
    m = np.zeros(num_patches, dtype=bool)
    m[chosen] = True
    return PatchMask(mask=m, seed=int(seed), step=int(step))


def patchify(x, patch_size: int) -> Tensor:
    """[c, h, w] -> [num_patches, c*p*p], rows ordered row-major over the grid."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"patchify: expected [c, h, w], got {x.shape}")
    c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"patchify: {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    t = reshape(x, (c, gh, patch_size, gw, patch_size))
    t = transpose(t, (1, 3, 0, 2, 4))
    return reshape(t, (gh * gw, c * patch_size * patch_size))


def unpatchify(tokens, channels: int, image_size: int, patch_size: int) -> Tensor:
    """Inverse of patchify for a square image."""
    g = image_size // patch_size
    t = reshape(tokens, (g, g, channels, patch_size, patch_size))
    t = transpose(t, (2, 0, 3, 1, 4))
    return reshape(t, (channels, image_size, image_size))


def apply_mask(x, patch_mask: PatchMask, mask_token: Tensor, config: ModelConfig) -> Tensor:
    """Replace masked patches of x with the (learnable) mask token.

    Visible patches pass through bit-identical; gradient reaches the token
    only via masked positions.
    """
    x = as_tensor(x)
    if x.shape != (config.channels, config.image_size, config.image_size):
        raise ValueError(f"apply_mask: image shape {x.shape} does not match config")
    if patch_mask.mask.size != config.num_patches:
        raise ValueError("apply_mask: mask length does not match patch count")
    if mask_token.shape != (config.channels, config.patch_size, config.patch_size):
        raise ValueError(f"apply_mask: mask token shape {mask_token.shape} invalid")
    xp = patchify(x, config.patch_size)
    col = patch_mask.mask.astype(np.float64)[:, None]
    m = Tensor(np.broadcast_to(col, (config.num_patches, config.patch_dim)).copy())
    inv = Tensor(1.0 - m.data)
    visible = mul(xp, inv)
    token_row = reshape(mask_token, (1, config.patch_dim))
    masked = mul(token_row, m)
    return unpatchify(add(visible, masked), config.channels, config.image_size,
                      config.patch_size)


def pixel_mask(patch_mask: PatchMask, config: ModelConfig) -> np.ndarray:
    """0/1 float mask at pixel level, [c, h, w]; 1 where patches are masked."""
    g, p = config.grid, config.patch_size
    grid = patch_mask.mask.reshape(g, g).astype(np.float64)
    plane = np.kron(grid, np.ones((p, p)))
    return np.broadcast_to(plane, (config.channels, g * p, g * p)).copy()


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _ln_affine(x, g: Tensor, b: Tensor) -> Tensor:
    return add(mul(layer_norm(x), g), b)


def _attention(x, params: ParamStore, config: ModelConfig, pre: str) -> Tensor:
    n = x.shape[0]
    h, dh = config.heads, config.head_dim

    def proj(w, b):
        t = add(matmul(x, params[pre + "attn." + w]), params[pre + "attn." + b])
        return transpose(reshape(t, (n, h, dh)), (1, 0, 2))  # [heads, n, dh]

    q = proj("wq", "bq")
    k = proj("wk", "bk")
    v = proj("wv", "bv")
    scores = scalar_mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax_lastdim(scores)
    ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (n, config.embed_dim))
    return add(matmul(ctx, params[pre + "attn.wo"]), params[pre + "attn.bo"])


def _mlp(x, params: ParamStore, pre: str) -> Tensor:
    hdn = gelu(add(matmul(x, params[pre + "mlp.w1"]), params[pre + "mlp.b1"]))
    return add(matmul(hdn, params[pre + "mlp.w2"]), params[pre + "mlp.b2"])


def _adapter(x, params: ParamStore, config: ModelConfig, pre: str) -> Tensor | None:
    if pre + "adapter.down.w" not in params:
        return None
    a = relu(add(matmul(x, params[pre + "adapter.down.w"]), params[pre + "adapter.down.b"]))
    a = add(matmul(a, params[pre + "adapter.up.w"]), params[pre + "adapter.up.b"])
    return scalar_mul(a, config.adapter_scale)


def _block(x, params: ParamStore, config: ModelConfig, i: int) -> Tensor:
    pre = f"blocks.{i}."
    x = add(x, _attention(_ln_affine(x, params[pre + "ln1.g"], params[pre + "ln1.b"]),
                          params, config, pre))
    n2 = _ln_affine(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
    m = _mlp(n2, params, pre)
    a = _adapter(n2, params, config, pre)
    return add(x, m if a is None else add(m, a))


def _pos_embed_for_grid(params: ParamStore, config: ModelConfig, grid: int) -> Tensor:
    pos = params["pos_embed"]
    if grid == config.grid:
        return pos
    if tape_active():
        raise ValueError("variable input size is inference-only (no tape may be active)")
    g0, d = config.grid, config.embed_dim
    field2d = pos.data.reshape(g0, g0, d)
    z = grid / g0
    resized = ndimage.zoom(field2d, (z, z, 1.0), order=1, grid_mode=True, mode="nearest")
    return Tensor(resized.reshape(grid * grid, d))


def encode(x, params: ParamStore, config: ModelConfig) -> Tensor:
    """Image [c, h, w] -> patch features [num_patches, embed_dim].

    h == w and divisibility by the patch size are required. Inputs at a
    different resolution than the config are accepted only outside of a
    recording tape (position embeddings are bilinearly resized).
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != config.channels:
        raise ValueError(f"encode: expected [{config.channels}, h, w], got {x.shape}")
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"encode: image must be square, got {x.shape}")
    if x.shape[1] % config.patch_size:
        raise ValueError(f"encode: size {x.shape[1]} not divisible by patch "
                         f"{config.patch_size}")
    grid = x.shape[1] // config.patch_size
    tokens = add(matmul(patchify(x, config.patch_size), params["patch_embed.w"]),
                 params["patch_embed.b"])
    h = add(tokens, _pos_embed_for_grid(params, config, grid))
    for i in range(config.depth):
        try:
            h = _block(h, params, config, i)
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite activations in block {i}: {e}") from e
    return _ln_affine(h, params["final_ln.g"], params["final_ln.b"])


def seg_decode(z, params: ParamStore, config: ModelConfig) -> Tensor:
    """Per-patch class logits [num_patches, num_classes]."""
    if config.task != "segmentation":
        raise ValueError(f"seg_decode requires task='segmentation', config says '{config.task}'")
    return add(matmul(z, params["seg_head.w"]), params["seg_head.b"])


def rec_decode(z, params: ParamStore, config: ModelConfig) -> Tensor:
    """Per-pixel reconstruction [c, h, w] from patch features."""
    z = as_tensor(z)
    tokens = add(matmul(z, params["rec_head.w"]), params["rec_head.b"])
    if z.shape[0] != config.num_patches:
        raise ValueError("rec_decode: token count does not match config grid")
    return unpatchify(tokens, config.channels, config.image_size, config.patch_size)


def clf_head(z, params: ParamStore, config: ModelConfig) -> Tensor:
    """Mean-pooled class logits [num_classes]."""
    if config.task != "classification":
        raise ValueError(f"clf_head requires task='classification', config says '{config.task}'")
    pooled = reshape(mean(z, axis=0), (1, config.embed_dim))
    out = add(matmul(pooled, params["clf_head.w"]), params["clf_head.b"])
    return reshape(out, (config.num_classes,))


def predict(image, params: ParamStore, config: ModelConfig) -> np.ndarray:
    """Task prediction on an unmasked image, outside any tape.

    Segmentation: per-patch labels [num_patches]. Classification: a single
    label wrapped in a length-1 array. Argmax ties resolve to the lowest
    class index.
    """
    if tape_active():
        raise ValueError("predict is inference-only; no tape may be active")
    z = encode(image, params, config)
    if config.task == "segmentation":
        logits = seg_decode(z, params, config)
        return np.argmax(logits.data, axis=-1)
    logits = clf_head(z, params, config)
    return np.array([int(np.argmax(logits.data))])
