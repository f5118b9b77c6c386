"""Brute-force entanglement entropy of small golden states.

A target function F over N binary pixels defines the state with amplitudes
F(s) / ||F||. Pixel k is axis k of the amplitude vector reshaped to
``(2,) * N``, so pixel 0 is the most significant bit of the basis index.
Entropies are in bits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor import rng_stream

MAX_PIXELS = 20
MAX_RDM_QUBITS = 12
PSD_TOL = 1e-10

REPORT_HEADER = ["cut_id", "|A|", "L_AB", "S_bits", "bound_bits", "ok"]


class EntanglementError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionState:
    amplitudes: np.ndarray
    num_pixels: int
    geometry: tuple[int, int] | None = None

    def __post_init__(self):
        if self.geometry is not None and self.geometry[0] * self.geometry[1] != self.num_pixels:
            raise EntanglementError(f"geometry {self.geometry} does not hold {self.num_pixels} pixels")


def _num_pixels(size: int) -> int:
    n = size.bit_length() - 1
    if size < 2 or 1 << n != size:
        raise EntanglementError(f"truth table length {size} is not a power of two >= 2")
    return n


def golden_state(truth_table, geometry: tuple[int, int] | None = None) -> FunctionState:
    table = np.asarray(truth_table, dtype=np.float64).ravel()
    n = _num_pixels(table.size)
    if n > MAX_PIXELS:
        raise EntanglementError(f"{n} pixels exceeds the limit of {MAX_PIXELS}")
    if not np.all(np.isfinite(table)):
        raise EntanglementError("truth table has non-finite values")
    norm = np.linalg.norm(table)
    if norm == 0:
        raise EntanglementError("truth table is identically zero")
    return FunctionState(table / norm, n, tuple(geometry) if geometry else None)


def mask_pixels(mask, n: int) -> list[int]:
    """Normalize a region mask to a sorted pixel list.

    Accepts an int bitmask (bit k selects pixel k), a boolean array of
    length n, or an iterable of pixel indices.
    """
    if isinstance(mask, (int, np.integer)) and not isinstance(mask, bool):
        if mask < 0 or mask >> n:
            raise EntanglementError(f"bitmask {mask} out of range for {n} pixels")
        return [k for k in range(n) if mask >> k & 1]
    arr = np.asarray(mask)
    if arr.dtype == bool:
        if arr.size != n:
            raise EntanglementError(f"boolean mask has {arr.size} entries, expected {n}")
        return [int(k) for k in np.flatnonzero(arr.ravel())]
    pix = sorted({int(k) for k in arr.ravel()})
    if pix and (pix[0] < 0 or pix[-1] >= n):
        raise EntanglementError(f"mask pixel out of range 0..{n - 1}")
    if len(pix) != arr.size:
        raise EntanglementError("mask lists a pixel twice")
    return pix


def _bipartition(state: FunctionState, pix: list[int]) -> np.ndarray:
    n = state.num_pixels
    rest = [k for k in range(n) if k not in set(pix)]
    psi = state.amplitudes.reshape((2,) * n).transpose(pix + rest)
    return psi.reshape(1 << len(pix), 1 << len(rest))


def reduced_density_matrix(state: FunctionState, mask) -> np.ndarray:
    """rho_A = Tr_B |psi><psi| as a 2^|A| x 2^|A| matrix, A in ascending pixel order."""
    pix = mask_pixels(mask, state.num_pixels)
    if not 1 <= len(pix) <= state.num_pixels - 1:
        raise EntanglementError("region A must be non-empty and leave B non-empty")
    if len(pix) > MAX_RDM_QUBITS:
        raise EntanglementError(f"|A| = {len(pix)} gives a matrix larger than 2^{MAX_RDM_QUBITS}")
    m = _bipartition(state, pix)
    rho = m @ m.T
    return 0.5 * (rho + rho.T)


def entropy(rho) -> float:
    """Von Neumann entropy -sum(l log2 l) in bits, with 0 log 0 = 0."""
    rho = np.asarray(rho, dtype=np.float64)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise EntanglementError("density matrix must be square")
    if np.max(np.abs(rho - rho.T), initial=0.0) > PSD_TOL:
        raise EntanglementError("density matrix is not symmetric")
    if abs(np.trace(rho) - 1) > PSD_TOL:
        raise EntanglementError(f"density matrix has trace {np.trace(rho)}")
    lam = np.linalg.eigvalsh(rho)
    if lam[0] < -PSD_TOL:
        raise EntanglementError(f"density matrix has eigenvalue {lam[0]:.3g} < 0")
    lam = lam[lam > 0]
    return float(-np.sum(lam * np.log2(lam))) + 0.0


def region_entropy(state: FunctionState, mask) -> float:
    """Entropy of A, computed on whichever side of the cut is smaller."""
    pix = mask_pixels(mask, state.num_pixels)
    if 2 * len(pix) > state.num_pixels:
        pix = [k for k in range(state.num_pixels) if k not in set(pix)]
    return entropy(reduced_density_matrix(state, pix))


# -- geometry ----------------------------------------------------------------

def parse_geometry(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise EntanglementError(f"geometry {text!r} is not HxW") from None
    if h < 1 or w < 1:
        raise EntanglementError("geometry extents must be positive")
    return h, w


def straight_cuts(geometry: tuple[int, int]) -> dict[str, list[int]]:
    """Every cut along a full grid line: ``v<c>`` keeps columns < c, ``h<r>`` rows < r."""
    h, w = geometry
    cuts = {}
    for c in range(1, w):
        cuts[f"v{c}"] = [i * w + j for i in range(h) for j in range(c)]
    for r in range(1, h):
        cuts[f"h{r}"] = list(range(r * w))
    return cuts


def _cut_name(pix: list[int], geometry) -> str:
    n = geometry[0] * geometry[1]
    comp = [k for k in range(n) if k not in set(pix)]
    for name, region in straight_cuts(geometry).items():
        if pix == region or comp == region:
            return name
    raise EntanglementError("cut is not a straight grid line")


def boundary_length(mask, geometry: tuple[int, int]) -> int:
    """Number of 4-adjacent pixel pairs with one pixel on each side."""
    h, w = geometry
    inside = np.zeros(h * w, dtype=bool)
    inside[mask_pixels(mask, h * w)] = True
    grid = inside.reshape(h, w)
    return int(np.sum(grid[:, 1:] != grid[:, :-1]) + np.sum(grid[1:, :] != grid[:-1, :]))


# -- r-local functions ---------------------------------------------------------

def clause_windows(geometry: tuple[int, int], r: int, region: Iterable[int] | None = None) -> list[list[int]]:
    """Pixel sets of every (r+1) x (r+1) window inside the grid.

    Any two pixels in a window are within Chebyshev distance r. With
    ``region`` given, windows are restricted to those pixels and empty ones
    are dropped.
    """
    h, w = geometry
    keep = None if region is None else set(region)
    out = []
    for i in range(max(h - r, 1)):
        for j in range(max(w - r, 1)):
            pix = [a * w + b for a in range(i, min(i + r + 1, h)) for b in range(j, min(j + r + 1, w))]
            if keep is not None:
                pix = [k for k in pix if k in keep]
            if pix:
                out.append(pix)
    return out


def product_of_clauses(geometry: tuple[int, int], windows: Sequence[Sequence[int]], seed: int) -> np.ndarray:
    """Truth table of a product of random real clause tables, one per window."""
    h, w = geometry
    n = h * w
    if n > MAX_PIXELS:
        raise EntanglementError(f"{n} pixels exceeds the limit of {MAX_PIXELS}")
    table = np.ones((2,) * n)
    for idx, pix in enumerate(windows):
        clause = rng_stream(seed, "clause", idx).standard_normal((2,) * len(pix))
        shape = [1] * n
        for k in pix:
            shape[k] = 2
        # clause axes follow ascending pixel order, matching the broadcast shape
        table = table * clause.reshape(shape)
    return table.ravel()


def r_local_function(geometry: tuple[int, int], r: int, seed: int) -> np.ndarray:
    if r < 1:
        raise EntanglementError("interaction radius must be >= 1")
    return product_of_clauses(geometry, clause_windows(geometry, r), seed)


def disk_pixels(geometry: tuple[int, int], radius: float) -> list[int]:
    """Pixels whose centres lie within ``radius`` of the grid centre."""
    h, w = geometry
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return [i * w + j for i in range(h) for j in range(w) if (i - cy) ** 2 + (j - cx) ** 2 <= radius ** 2 + 1e-12]


def disk_function(geometry: tuple[int, int], radius: float, r: int, seed: int) -> np.ndarray:
    """r-local function that depends only on the pixels of a central disk."""
    return product_of_clauses(geometry, clause_windows(geometry, r, disk_pixels(geometry, radius)), seed)


# -- reports -------------------------------------------------------------------

def area_law_check(truth_table, geometry: tuple[int, int], r: int, cuts=None) -> list[dict]:
    """Entropy and the bound r * L_AB (bits) for each straight cut.

    ``cuts`` may be None (all straight cuts), a list of cut names such as
    ``"v1"``, or a list of region masks.
    """
    geometry = tuple(geometry)
    state = golden_state(truth_table, geometry)
    named = straight_cuts(geometry)
    if cuts is None:
        items = list(named.items())
    else:
        items = []
        for cut in cuts:
            if isinstance(cut, str):
                if cut not in named:
                    raise EntanglementError(f"unknown cut {cut!r}; expected one of {sorted(named)}")
                items.append((cut, named[cut]))
            else:
                pix = mask_pixels(cut, state.num_pixels)
                items.append((_cut_name(pix, geometry), pix))
    rows = []
    for name, pix in items:
        s = region_entropy(state, pix)
        lab = boundary_length(pix, geometry)
        bound = float(r * lab)
        rows.append({"cut_id": name, "|A|": len(pix), "L_AB": lab, "S_bits": s,
                     "bound_bits": bound, "ok": s <= bound + 1e-9})
    return rows


def write_report(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in rows:
            w.writerow([row["cut_id"], row["|A|"], row["L_AB"], f"{row['S_bits']:.12g}",
                        f"{row['bound_bits']:g}", str(row["ok"]).lower()])


def o2i_scaling(geometry: tuple[int, int] = (4, 4), radii=(0.75, 1.6, 2.2), r: int = 1,
                seeds=range(3)) -> list[dict]:
    """Entropy across the central vertical cut for disk objects of growing area.

    Returned as data only: at these sizes the asymptotic trends are not
    testable claims.
    """
    h, w = geometry
    cut = straight_cuts(geometry)[f"v{w // 2}"]
    rows = []
    for radius in radii:
        disk = disk_pixels(geometry, radius)
        eta = len(disk) / (h * w)
        ents = [region_entropy(golden_state(disk_function(geometry, radius, r, s), geometry), cut) for s in seeds]
        rows.append({"radius": radius, "object_pixels": len(disk), "eta": eta,
                     "r_sqrt_eta": r * math.sqrt(eta), "r_eta": r * eta,
                     "mean_S_bits": float(np.mean(ents)), "max_S_bits": float(np.max(ents))})
    return rows
