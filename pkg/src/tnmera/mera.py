"""2D MERA classifier: construction, embedding, contraction and capacity.

The network coarse-grains a square grid of sites by a factor of two per level.
Each level applies disentanglers (rank 8: four in-legs, four out-legs) and then
4-to-1 isometries (rank 5). The last 2x2 grid feeds the top tensor, whose fifth
leg carries the class logits. Leg order in every stored tensor is row-major
over the 2x2 plaquette: top-left, top-right, bottom-left, bottom-right, and
in-legs always precede out-legs.

Two disentangler layouts are supported:

``offset``
    Plaquettes shifted by one site in both directions from the isometry
    blocks, so each disentangler straddles four isometries. This is the
    standard 2D MERA. Exact contraction cost grows exponentially with the
    grid width, so it is only practical for small site grids.
``block``
    One disentangler per isometry block, acting on the same four sites. The
    network is then a tree and contraction stays cheap at any size.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import asdict, dataclass, field, fields
from itertools import count
from typing import Iterator

import numpy as np

from . import autodiff
from .autodiff import Step
from .tensor import TensorError, isometry_residual, random_isometry, rng_stream

BOUNDARIES = ("open", "periodic")
EMBEDDINGS = ("flatten_bias", "pixel_map")
SHARING = ("none", "per_layer")
LAYOUTS = ("offset", "block")

# per-sample flop budget above which forward_logits refuses a schedule
MAX_SAMPLE_FLOPS = 2e9
NOMINAL_BATCH = 64


class GeometryError(TensorError):
    pass


@dataclass
class MeraConfig:
    image_height: int = 32
    image_width: int = 32
    block_size: int = 4
    bond_dim: int = 4
    num_classes: int = 10
    boundary: str = "open"
    embedding: str = "flatten_bias"
    weight_sharing: str = "none"
    init_mode: str = "noise"
    init_std: float = 1e-4
    layout: str = "offset"
    auto_pad: bool = False
    init_gain: bool = False

    def validate(self):
        if self.boundary not in BOUNDARIES:
            raise GeometryError(f"boundary must be one of {BOUNDARIES}")
        if self.embedding not in EMBEDDINGS:
            raise GeometryError(f"embedding must be one of {EMBEDDINGS}")
        if self.weight_sharing not in SHARING:
            raise GeometryError(f"weight_sharing must be one of {SHARING}")
        if self.layout not in LAYOUTS:
            raise GeometryError(f"layout must be one of {LAYOUTS}")
        if self.bond_dim < 2:
            raise GeometryError("bond_dim must be >= 2")
        if self.num_classes < 2:
            raise GeometryError("num_classes must be >= 2")
        if self.block_size < 1:
            raise GeometryError("block_size must be >= 1")
        side = self.padded_size // self.block_size
        if side < 2 or side & (side - 1):
            raise GeometryError(
                f"{self.image_height}x{self.image_width} image with block size {self.block_size} "
                f"gives a {self.image_height / self.block_size:g}x{self.image_width / self.block_size:g} "
                "site grid; need equal powers of two >= 2 (enable auto_pad to zero-pad)"
            )
        return self

    @property
    def padded_size(self) -> int:
        """Image side after padding; equals the raw size when already admissible."""
        b = self.block_size
        h, w = self.image_height, self.image_width
        if not self.auto_pad:
            if h != w or h % b:
                return -1
            return h
        sites = math.ceil(max(h, w) / b)
        return b * (1 << max(1, (sites - 1).bit_length()))

    @property
    def grid_side(self) -> int:
        return self.padded_size // self.block_size

    @property
    def raw_dim(self) -> int:
        b2 = self.block_size ** 2
        return b2 + 1 if self.embedding == "flatten_bias" else 2 * b2

    @property
    def num_levels(self) -> int:
        """Coarse-graining levels, counting the top tensor as the last one."""
        return int(math.log2(self.grid_side))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeraConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class NetNode:
    ref: str            # parameter or input name
    labels: tuple[str, ...]
    kind: str           # "input", "embedder", "disentangler", "isometry", "top"


@dataclass
class LevelInfo:
    side: int
    disentanglers: int
    isometries: int     # at the last level this is the top tensor


@dataclass
class MeraModel:
    config: MeraConfig
    params: dict[str, np.ndarray]
    nodes: list[NetNode]
    dims: dict[str, int]
    levels: list[LevelInfo]
    _schedule: list[Step] | None = field(default=None, repr=False)
    _flops: float | None = field(default=None, repr=False)

    @property
    def schedule(self) -> list[Step]:
        if self._schedule is None:
            self._schedule, self._flops = plan_schedule(self.nodes, self.dims)
        return self._schedule

    @property
    def flops_per_sample(self) -> float:
        """Estimated multiply-adds of one forward pass per sample."""
        self.schedule
        return self._flops

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def summary(self) -> str:
        return summary(self)


def _param_name(cfg: MeraConfig, kind: str, level: int, i: int, j: int) -> str:
    shared = cfg.weight_sharing == "per_layer"
    if kind == "emb":
        return "emb" if shared else f"emb.{i}.{j}"
    if kind == "top":
        return "top"
    return f"{kind}.{level}" if shared else f"{kind}.{level}.{i}.{j}"


def _plaquettes(cfg: MeraConfig, side: int) -> list[tuple[int, int]]:
    """Top-left corners of the disentangler plaquettes on a ``side`` grid."""
    if side <= 2:
        return []
    if cfg.layout == "block":
        return [(r, c) for r in range(0, side, 2) for c in range(0, side, 2)]
    if cfg.boundary == "periodic":
        return [(r, c) for r in range(1, side, 2) for c in range(1, side, 2)]
    return [(r, c) for r in range(1, side - 1, 2) for c in range(1, side - 1, 2)]


def _quad(r: int, c: int, side: int) -> list[tuple[int, int]]:
    return [((r + dr) % side, (c + dc) % side) for dr in (0, 1) for dc in (0, 1)]


def network(cfg: MeraConfig) -> tuple[list[NetNode], dict[str, int], list[LevelInfo]]:
    """Tensor network of the model: one node per tensor placement plus the inputs."""
    cfg.validate()
    chi, side = cfg.bond_dim, cfg.grid_side
    nodes: list[NetNode] = []
    dims: dict[str, int] = {"B": NOMINAL_BATCH, "class": cfg.num_classes}
    fresh = count()

    def leg() -> str:
        name = f"l{next(fresh)}"
        dims[name] = chi
        return name

    legs: dict[tuple[int, int], str] = {}
    for r in range(side):
        for c in range(side):
            raw = f"raw.{r}.{c}"
            dims[raw] = cfg.raw_dim
            nodes.append(NetNode(f"x.{r}.{c}", ("B", raw), "input"))
            legs[r, c] = leg()
            nodes.append(NetNode(_param_name(cfg, "emb", 0, r, c), (raw, legs[r, c]), "embedder"))

    levels = []
    level = 0
    while side > 2:
        plaq = _plaquettes(cfg, side)
        for (r, c) in plaq:
            sites = _quad(r, c, side)
            outs = [leg() for _ in sites]
            nodes.append(NetNode(
                _param_name(cfg, "dis", level, r // 2, c // 2),
                tuple(legs[s] for s in sites) + tuple(outs), "disentangler"))
            for s, o in zip(sites, outs):
                legs[s] = o
        half = side // 2
        coarse = {}
        for bi in range(half):
            for bj in range(half):
                coarse[bi, bj] = leg()
                nodes.append(NetNode(
                    _param_name(cfg, "iso", level, bi, bj),
                    tuple(legs[s] for s in _quad(2 * bi, 2 * bj, side)) + (coarse[bi, bj],),
                    "isometry"))
        levels.append(LevelInfo(side, len(plaq), half * half))
        legs, side, level = coarse, half, level + 1

    nodes.append(NetNode("top", tuple(legs[s] for s in _quad(0, 0, 2)) + ("class",), "top"))
    levels.append(LevelInfo(2, 0, 1))
    _audit(nodes, dims)
    return nodes, dims, levels


def _audit(nodes: list[NetNode], dims: dict[str, int]):
    """Every bond joins exactly two tensors; only the batch and class legs are open."""
    uses: dict[str, int] = {}
    for n in nodes:
        if len(set(n.labels)) != len(n.labels):
            raise GeometryError(f"tensor {n.ref} repeats a leg")
        for lab in n.labels:
            if lab not in dims:
                raise GeometryError(f"leg {lab} of {n.ref} has no extent")
            uses[lab] = uses.get(lab, 0) + 1
    for lab, k in uses.items():
        if lab == "B":
            continue
        if lab == "class":
            if k != 1:
                raise GeometryError("class leg must be open")
        elif k != 2:
            raise GeometryError(f"bond {lab} used {k} times")


def param_shapes(cfg: MeraConfig, nodes: list[NetNode], dims: dict[str, int]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for n in nodes:
        if n.kind == "input":
            continue
        shape = tuple(dims[l] for l in n.labels)
        if shapes.setdefault(n.ref, shape) != shape:
            raise GeometryError(f"shared tensor {n.ref} used with shapes {shapes[n.ref]} and {shape}")
    return shapes


def _init_tensor(cfg: MeraConfig, name: str, kind: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    n_in = 1 if kind == "embedder" else 4
    rows = int(np.prod(shape[:n_in]))
    cols = int(np.prod(shape[n_in:]))
    rng = rng_stream(seed, "init", name)
    mode, std = cfg.init_mode, cfg.init_std
    if mode != "noise" and cols > rows:
        if kind != "embedder":
            raise GeometryError(f"{name}: cannot initialize a {rows}x{cols} isometry")
        # raw dimension below the bond dimension: isometric embedding instead
        m = random_isometry(cols, rows, mode, std, rng).T.copy()
    else:
        m = random_isometry(rows, cols, mode, std, rng)
    if kind == "embedder" and mode == "identity_noise" and cfg.embedding == "flatten_bias":
        # route the constant channel to bond index 0, which the truncated
        # identities of the upper levels pass through unchanged
        m = np.roll(m, -1, axis=0)
    return m.reshape(shape)


def init_gain(cfg: MeraConfig, kind: str, shape: tuple[int, ...]) -> float:
    """Multiplier that keeps the expected norm of a unit input unchanged.

    An isometry from dimension n to m shrinks a generic vector by sqrt(m/n) on
    average, which compounds to vanishing logits over several levels.
    Embedders additionally divide out the typical norm of a raw site vector.
    """
    if not cfg.init_gain:
        return 1.0
    n_in = 1 if kind == "embedder" else 4
    rows = int(np.prod(shape[:n_in]))
    cols = int(np.prod(shape[n_in:]))
    gain = math.sqrt(rows / cols) if rows > cols else 1.0
    if kind == "embedder" and cfg.embedding == "pixel_map":
        gain /= cfg.block_size
    return gain


def iter_initial_tensors(cfg: MeraConfig, seed: int = 0) -> Iterator[tuple[str, str, np.ndarray]]:
    """Yield ``(name, kind, tensor)`` for every parameter, in build order.

    Each tensor draws from its own named random stream, so the values do not
    depend on iteration order and large models can be checked one tensor at a
    time.
    """
    nodes, dims, _ = network(cfg)
    shapes = param_shapes(cfg, nodes, dims)
    kinds = {n.ref: n.kind for n in nodes}
    for name, shape in shapes.items():
        t = _init_tensor(cfg, name, kinds[name], shape, seed)
        yield name, kinds[name], t * init_gain(cfg, kinds[name], shape) if cfg.init_gain else t


def build(cfg: MeraConfig, seed: int = 0) -> MeraModel:
    cfg.validate()
    nodes, dims, levels = network(cfg)
    params = {name: t for name, _, t in iter_initial_tensors(cfg, seed)}
    return MeraModel(cfg, params, nodes, dims, levels)


def constraint_residual(model: MeraModel) -> float:
    """Largest isometry residual over all disentanglers and isometries."""
    kinds = {n.ref: n.kind for n in model.nodes}
    worst = 0.0
    for name, t in model.params.items():
        if kinds[name] in ("disentangler", "isometry"):
            worst = max(worst, isometry_residual(t, 4))
    return worst


def plan_schedule(nodes: list[NetNode], dims: dict[str, int]) -> tuple[list[Step], float]:
    """Greedy pairwise contraction order.

    Repeatedly contracts the pair of tensors sharing a bond whose contraction
    is cheapest (multiply-adds at a nominal batch size), ties broken by result
    size and then by creation order. Returns the steps and the estimated flops
    per sample.
    """
    live: dict[int, tuple[str, tuple[str, ...]]] = {}
    by_label: dict[str, set[int]] = {}
    for k, n in enumerate(nodes):
        live[k] = (n.ref, n.labels)
        for lab in n.labels:
            if lab != "B":
                by_label.setdefault(lab, set()).add(k)

    def size(labels):
        return math.prod(dims[l] for l in labels)

    def merged(la, lb):
        shared = set(la) & set(lb)
        batch = "B" in shared
        out = (("B",) if batch else ()) + tuple(l for l in la if l not in shared) \
            + tuple(l for l in lb if l not in shared)
        return out, size(set(la) | set(lb))

    heap = []

    def push(a, b):
        if a > b:
            a, b = b, a
        out, cost = merged(live[a][1], live[b][1])
        heapq.heappush(heap, (cost, size(out), a, b))

    for lab, ks in by_label.items():
        if len(ks) == 2:
            a, b = sorted(ks)
            push(a, b)

    steps: list[Step] = []
    flops = 0.0
    next_id = len(nodes)
    tmp = count()
    while heap:
        cost, _, a, b = heapq.heappop(heap)
        if a not in live or b not in live:
            continue
        (ra, la), (rb, lb) = live.pop(a), live.pop(b)
        shared = set(la) & set(lb)
        pairs = tuple((la.index(l), lb.index(l)) for l in la if l in shared and l != "B")
        batch = ((la.index("B"), lb.index("B")),) if "B" in shared else ()
        out_labels, _ = merged(la, lb)
        name = f"t{next(tmp)}"
        steps.append(Step("contract", name, (ra, rb), pairs=pairs, batch=batch))
        # parameter-only products run once per batch, so amortize them too
        flops += cost / NOMINAL_BATCH
        k = next_id
        next_id += 1
        live[k] = (name, out_labels)
        for lab in set(la) | set(lb):
            if lab == "B":
                continue
            ks = by_label.get(lab)
            if ks is None:
                continue
            ks.discard(a)
            ks.discard(b)
            if lab in out_labels:
                ks.add(k)
        neighbours = {j for lab in out_labels if lab != "B" for j in by_label.get(lab, ()) if j != k}
        for j in sorted(neighbours):
            push(j, k)

    if len(live) != 1:
        raise GeometryError(f"network is disconnected ({len(live)} components)")
    (ref, labels), = live.values()
    want = ("B", "class")
    if tuple(labels) != want:
        steps.append(Step("permute", "logits", (ref,), perm=tuple(labels.index(l) for l in want)))
    return steps, flops


def check_image(image: np.ndarray, cfg: MeraConfig) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise GeometryError(f"image must be 2D, got shape {image.shape}")
    if np.any(image < 0) or np.any(image > 1) or not np.all(np.isfinite(image)):
        raise ValueError("pixel values must lie in [0, 1]")
    side = cfg.padded_size
    if image.shape != (side, side):
        if cfg.auto_pad and image.shape == (cfg.image_height, cfg.image_width):
            from .data import pad_center
            image = pad_center(image, side, side)
        else:
            raise GeometryError(f"image shape {image.shape} does not match model geometry {cfg.image_height}x{cfg.image_width}")
    return image


def embed(image, cfg: MeraConfig) -> np.ndarray:
    """Site grid for one image: array of shape (side, side, raw_dim)."""
    return embed_batch(np.asarray(image, dtype=float)[None], cfg)[0]


def embed_batch(images, cfg: MeraConfig) -> np.ndarray:
    """Embed a stack of images into shape (n, side, side, raw_dim).

    ``flatten_bias`` flattens each b x b block row-major and appends a constant
    1; ``pixel_map`` maps every pixel p to (cos(pi p/2), sin(pi p/2)) and
    concatenates the pairs in row-major pixel order.
    """
    images = np.asarray(images)
    dtype = images.dtype if images.dtype in (np.float32, np.float64) else np.float64
    if images.ndim != 3:
        raise GeometryError("expected a stack of 2D images")
    images = np.stack([check_image(im, cfg) for im in images]) if len(images) else images.astype(float)
    n = images.shape[0]
    b, side = cfg.block_size, cfg.grid_side
    blocks = images.reshape(n, side, b, side, b).transpose(0, 1, 3, 2, 4).reshape(n, side, side, b * b)
    if cfg.embedding == "flatten_bias":
        out = np.concatenate([blocks, np.ones((n, side, side, 1))], axis=-1)
    else:
        angle = 0.5 * np.pi * blocks
        out = np.stack([np.cos(angle), np.sin(angle)], axis=-1).reshape(n, side, side, 2 * b * b)
    return out.astype(dtype, copy=False)


def site_inputs(sites: np.ndarray) -> dict[str, np.ndarray]:
    """Split a batch of site grids into the per-site input tensors of the schedule."""
    _, h, w, _ = sites.shape
    return {f"x.{r}.{c}": np.ascontiguousarray(sites[:, r, c, :]) for r in range(h) for c in range(w)}


def _check_cost(model: MeraModel):
    if model.flops_per_sample > MAX_SAMPLE_FLOPS:
        raise GeometryError(
            f"exact contraction needs ~{model.flops_per_sample:.2e} flops per sample "
            f"(limit {MAX_SAMPLE_FLOPS:.0e}); use layout='block' or a smaller grid"
        )


def forward_logits(model: MeraModel, images, params=None) -> np.ndarray:
    """Class logits: shape (C,) for one image, (n, C) for a stack."""
    images = np.asarray(images)
    single = images.ndim == 2
    sites = embed_batch(images[None] if single else images, model.config)
    _check_cost(model)
    out = autodiff.evaluate(model.params if params is None else params, site_inputs(sites), model.schedule)
    return out[0] if single else out


def record(model: MeraModel, images, params=None):
    """Taped forward pass over a stack of images; returns ``(tape, logits)``."""
    sites = embed_batch(images, model.config)
    _check_cost(model)
    return autodiff.record_forward(model.params if params is None else params, site_inputs(sites), model.schedule)


def argmax_lowest(logits) -> np.ndarray | int:
    """Argmax along the last axis; ties go to the lowest index (numpy's rule)."""
    return np.argmax(np.asarray(logits), axis=-1)


def predict(model: MeraModel, images) -> np.ndarray | int:
    out = argmax_lowest(forward_logits(model, images))
    return int(out) if np.ndim(out) == 0 else out


def capacity_graph(model_or_cfg, cut) -> tuple[list[tuple[str, str, float]], str, str]:
    """Bond graph for an A/B bipartition of the bottom sites.

    Nodes are the network tensors above the embedders plus two terminals; the
    embedded site legs join a tensor to the terminal of its side. Each edge
    carries log2(extent) of its bond. The class leg is excluded.
    """
    cfg = model_or_cfg.config if isinstance(model_or_cfg, MeraModel) else model_or_cfg
    nodes, dims, _ = network(cfg)
    side = cfg.grid_side
    mask = np.asarray(cut, dtype=bool)
    if mask.shape != (side, side):
        raise GeometryError(f"cut mask must have shape {(side, side)}, got {mask.shape}")

    owner: dict[str, list[str]] = {}
    terminal: dict[str, str] = {}
    for k, n in enumerate(nodes):
        if n.kind == "input":
            continue
        if n.kind == "embedder":
            # embedder refs may be shared; the raw leg names the site
            _, r, c = n.labels[0].split(".")
            terminal[n.labels[1]] = "A" if mask[int(r), int(c)] else "B"
            continue
        for lab in n.labels:
            if lab != "class":
                owner.setdefault(lab, []).append(f"n{k}")
    edges = []
    for lab, ends in owner.items():
        w = math.log2(dims[lab])
        if lab in terminal:
            (u,) = ends
            edges.append((terminal[lab], u, w))
        else:
            u, v = ends
            edges.append((u, v, w))
    return edges, "A", "B"


def entanglement_capacity(model_or_cfg, cut) -> float:
    """Bits of entanglement the network can carry across a site bipartition.

    The minimum over all cuts of the bond graph separating the A sites from the
    B sites of the summed log2 bond extents. Any state the model represents
    has entanglement entropy across the bipartition at most this value.
    """
    import networkx as nx

    mask = np.asarray(cut, dtype=bool)
    if not mask.any() or mask.all():
        cfg = model_or_cfg.config if isinstance(model_or_cfg, MeraModel) else model_or_cfg
        if mask.shape != (cfg.grid_side, cfg.grid_side):
            raise GeometryError("cut mask has the wrong shape")
        return 0.0
    edges, s, t = capacity_graph(model_or_cfg, mask)
    g = nx.DiGraph()
    for u, v, w in edges:
        for x, y in ((u, v), (v, u)):
            if g.has_edge(x, y):
                g[x][y]["capacity"] += w
            else:
                g.add_edge(x, y, capacity=w)
    value, _ = nx.minimum_cut(g, s, t)
    return float(value)


def summary(model: MeraModel) -> str:
    """Plain-text listing of every tensor with its shape and parameter count."""
    cfg = model.config
    kinds = {n.ref: n.kind for n in model.nodes}
    lines = [
        f"MERA {cfg.image_height}x{cfg.image_width} (padded {cfg.padded_size}), block {cfg.block_size}, "
        f"chi {cfg.bond_dim}, classes {cfg.num_classes}, layout {cfg.layout}, boundary {cfg.boundary}, "
        f"embedding {cfg.embedding}, sharing {cfg.weight_sharing}",
        f"site grid {cfg.grid_side}x{cfg.grid_side}, levels {len(model.levels)}",
    ]
    for k, lv in enumerate(model.levels):
        what = "top" if k == len(model.levels) - 1 else f"{lv.isometries} isometries"
        lines.append(f"  level {k}: {lv.side}x{lv.side} sites, {lv.disentanglers} disentanglers, {what}")
    lines.append(f"{'name':<24} {'kind':<13} {'shape':<28} params")
    for name, t in model.params.items():
        lines.append(f"{name:<24} {kinds[name]:<13} {str(tuple(t.shape)):<28} {t.size}")
    lines.append(f"total parameters: {model.num_parameters()}")
    return "\n".join(lines)
