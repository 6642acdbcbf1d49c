"""Backbone RMSD between protein conformations and its distributions.

A :class:`Conformation` holds the N, CA, C and O atoms of consecutive
residues.  RMSD is taken over corresponding backbone atoms, either in the
frame the coordinates come in (``raw``) or after the optimal rigid
superposition (``superposed``, Kabsch with proper rotations only).
Segments sampled inside a fixed surrounding structure share its frame,
so ``raw`` is the default.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

BACKBONE = ("N", "CA", "C", "O")
MODES = ("raw", "superposed")
KINDS = ("RR", "MM", "RM")


class PdbLineError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Conformation:
    """Backbone coordinates; ``coords[r, a]`` is atom ``BACKBONE[a]`` of
    residue ``positions[r]``."""

    positions: np.ndarray
    coords: np.ndarray
    missing: tuple = ()

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=float).reshape(len(self.positions), 4, 3)
        if len(self.positions) == 0:
            raise ValueError("a conformation needs at least one residue")
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("residue positions must be strictly increasing")
        if not np.isfinite(self.coords).all():
            raise ValueError("coordinates must be finite")

    def atoms(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)

    def select(self, positions) -> "Conformation":
        keep = np.isin(self.positions, positions)
        return Conformation(self.positions[keep], self.coords[keep])


# ------------------------------------------------------------------ parsing


def _atom_fields(line: str, lineno: int) -> dict:
    if len(line) < 54:
        raise PdbLineError("ATOM record shorter than its coordinate columns", lineno)
    try:
        return {
            "name": line[12:16].strip(),
            "altloc": line[16].strip(),
            "chain": line[21].strip(),
            "resseq": int(line[22:26]),
            "icode": line[26].strip() if len(line) > 26 else "",
            "xyz": (float(line[30:38]), float(line[38:46]), float(line[46:54])),
        }
    except ValueError as exc:
        raise PdbLineError(f"malformed ATOM record ({exc})", lineno) from None


def _models(lines: Iterable[str]):
    """Yield lists of ``(lineno, line)`` per MODEL block (one block if none)."""
    current = []
    for lineno, line in enumerate(lines, start=1):
        rec = line[:6]
        if rec == "MODEL ":
            current = []
        elif rec == "ENDMDL":
            yield current
            current = []
        elif rec in ("ATOM  ", "HETATM"):
            current.append((lineno, line.rstrip("\n")))
    if current:
        yield current


def _backbone(records, chain: str, start: int | None, end: int | None) -> Conformation:
    found: dict = {}
    for lineno, line in records:
        if line[:6] != "ATOM  ":
            continue
        f = _atom_fields(line, lineno)
        if f["chain"] != chain or f["name"] not in BACKBONE:
            continue
        pos = f["resseq"]
        if (start is not None and pos < start) or (end is not None and pos > end):
            continue
        if f["icode"]:
            raise PdbLineError(f"insertion code {f['icode']!r} at residue {pos} is not supported",
                               lineno)
        # alternate locations: the first occurrence wins
        found.setdefault(pos, {}).setdefault(f["name"], f["xyz"])
    complete = sorted(p for p, a in found.items() if all(n in a for n in BACKBONE))
    if not complete:
        raise ValueError(f"no complete backbone residues for chain {chain!r} in the requested range")
    lo = start if start is not None else complete[0]
    hi = end if end is not None else complete[-1]
    missing = tuple(p for p in range(lo, hi + 1) if p not in complete)
    if missing:
        logger.warning("chain %s: residues without a full backbone: %s", chain,
                       ", ".join(map(str, missing)))
    coords = [[found[p][n] for n in BACKBONE] for p in complete]
    return Conformation(np.array(complete), np.array(coords), missing)


def _read_lines(source) -> list:
    """Lines of a path, of literal text (anything containing a newline) or
    of an iterable of lines."""
    if isinstance(source, str) and "\n" in source:
        return io.StringIO(source).readlines()
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return fh.readlines()
    return list(source)


def parse_backbone(source, chain: str = "A", start: int | None = None,
                   end: int | None = None, model: int = 0) -> Conformation:
    """Backbone of one chain from legacy fixed-column PDB text.

    Parameters
    ----------
    source : path, str or iterable of lines
    chain : str
        Chain identifier.
    start, end : int, optional
        Inclusive residue range.
    model : int
        0-based model index for multi-model files.

    Residues of the range lacking any backbone atom are listed in the
    ``missing`` attribute and logged; they are not an error.
    """
    blocks = list(_models(_read_lines(source)))
    if not blocks:
        raise ValueError("no ATOM records found")
    if not 0 <= model < len(blocks):
        raise ValueError(f"model {model} not present ({len(blocks)} models)")
    return _backbone(blocks[model], chain, start, end)


def parse_models(source, chain: str = "A", start: int | None = None,
                 end: int | None = None) -> list:
    """Every model of a multi-model PDB file as a conformation."""
    return [_backbone(b, chain, start, end) for b in _models(_read_lines(source))]


def read_conformation_table(source) -> list:
    """Conformations from a whitespace table ``position atom x y z``.

    Conformations are separated by blank lines; lines starting with ``#``
    are comments.
    """
    confs, current = [], []

    def flush():
        if current:
            by_pos: dict = {}
            for pos, name, xyz, lineno in current:
                if name not in BACKBONE:
                    raise PdbLineError(f"unknown backbone atom {name!r}", lineno)
                by_pos.setdefault(pos, {})[name] = xyz
            pos = sorted(by_pos)
            for p in pos:
                if len(by_pos[p]) != 4:
                    raise ValueError(f"residue {p} lacks backbone atoms")
            confs.append(Conformation(np.array(pos), [[by_pos[p][n] for n in BACKBONE]
                                                      for p in pos]))
            current.clear()

    for lineno, line in enumerate(_read_lines(source), start=1):
        text = line.strip()
        if text.startswith("#"):
            continue
        if not text:
            flush()
            continue
        parts = text.split()
        if len(parts) != 5:
            raise PdbLineError("expected 'position atom x y z'", lineno)
        try:
            current.append((int(parts[0]), parts[1].upper(),
                            tuple(float(v) for v in parts[2:]), lineno))
        except ValueError as exc:
            raise PdbLineError(str(exc), lineno) from None
    flush()
    return confs


def write_conformation_table(path, confs: Sequence[Conformation]) -> None:
    with open(path, "w") as fh:
        for k, conf in enumerate(confs):
            if k:
                fh.write("\n")
            for pos, atoms in zip(conf.positions, conf.coords):
                for name, xyz in zip(BACKBONE, atoms):
                    fh.write(f"{pos} {name} {float(xyz[0])!r} {float(xyz[1])!r} {float(xyz[2])!r}\n")


def read_conformations(path, chain: str = "A", start: int | None = None,
                       end: int | None = None) -> list:
    """Conformation set from a PDB (one per model) or a plain table."""
    text = Path(path).read_text()
    if any(line[:6] in ("ATOM  ", "MODEL ") for line in text.splitlines()):
        return parse_models(text, chain, start, end)
    confs = read_conformation_table(text)
    if start is not None or end is not None:
        lo = -math.inf if start is None else start
        hi = math.inf if end is None else end
        confs = [c.select([p for p in c.positions if lo <= p <= hi]) for c in confs]
    return confs


# ---------------------------------------------------------------------- RMSD


def kabsch(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Proper rotation ``R`` minimizing ``|(P - p0) R - (Q - q0)|`` for
    centred point sets; rows are points."""
    H = P.T @ Q
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    return U @ D @ Vt


def _common(A: Conformation, B: Conformation):
    if np.array_equal(A.positions, B.positions):
        return A.atoms(), B.atoms()
    common = np.intersect1d(A.positions, B.positions)
    if len(common) == 0:
        raise ValueError("conformations share no residue positions")
    logger.warning("RMSD over %d common positions only", len(common))
    return A.select(common).atoms(), B.select(common).atoms()


def _rmsd_points(P: np.ndarray, Q: np.ndarray, mode: str) -> float:
    if mode == "raw":
        return float(np.sqrt(((P - Q) ** 2).sum(axis=1).mean()))
    if mode != "superposed":
        raise ValueError(f"mode must be one of {MODES}")
    Pc = P - P.mean(axis=0)
    Qc = Q - Q.mean(axis=0)
    R = kabsch(Pc, Qc)
    return float(np.sqrt(((Pc @ R - Qc) ** 2).sum(axis=1).mean()))


def rmsd(A: Conformation, B: Conformation, mode: str = "raw") -> float:
    """Backbone RMSD in the coordinates' units (Angstrom for PDB input)."""
    P, Q = _common(A, B)
    return _rmsd_points(P, Q, mode)


@numba.njit(cache=True, parallel=True)
def _pairwise_raw(X, Y, pairs):
    out = np.empty(len(pairs))
    n_atoms = X.shape[1]
    for k in numba.prange(len(pairs)):
        a, b = pairs[k, 0], pairs[k, 1]
        acc = 0.0
        for r in range(n_atoms):
            for d in range(3):
                diff = X[a, r, d] - Y[b, r, d]
                acc += diff * diff
        out[k] = math.sqrt(acc / n_atoms)
    return out


@dataclass
class RmsdSample:
    kind: str
    values: np.ndarray
    mode: str = "raw"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if (self.values < 0).any():
            raise ValueError("RMSD values are nonnegative")

    def to_csv(self, path) -> None:
        pd.DataFrame({f"d_{self.kind}": self.values}).to_csv(path, index=False)


def _stack(confs: Sequence[Conformation], positions) -> np.ndarray:
    out = []
    for c in confs:
        if not np.array_equal(c.positions, positions):
            c = c.select(positions)
            if len(c.positions) != len(positions):
                raise ValueError("conformation lacks some common positions")
        out.append(c.atoms())
    return np.ascontiguousarray(np.stack(out))


def pairwise_rmsd(setR: Sequence[Conformation], setM: Sequence[Conformation] | None = None,
                  kind: str = "RR", mode: str = "raw") -> RmsdSample:
    """Pairwise RMSD collection.

    ``kind="RR"`` (or ``"MM"``) uses every unordered pair ``k < l`` of the
    first set; ``kind="RM"`` every ordered pair of the two sets, row-major
    over the first set.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if kind == "RM":
        if not setR or not setM:
            raise ValueError("cross RMSD needs two non-empty sets")
        first, second = list(setR), list(setM)
        ii, jj = np.meshgrid(np.arange(len(first)), np.arange(len(second)), indexing="ij")
        pairs = np.stack([ii.ravel(), jj.ravel()], axis=1)
    else:
        first = list(setR if kind == "RR" or setM is None else setM)
        if len(first) < 2:
            raise ValueError("within-set RMSD needs at least two conformations")
        second = first
        pairs = np.stack(np.triu_indices(len(first), 1), axis=1)
    positions = first[0].positions
    for c in first + second:
        positions = np.intersect1d(positions, c.positions)
    if len(positions) == 0:
        raise ValueError("the sets share no residue positions")
    X, Y = _stack(first, positions), _stack(second, positions)
    if mode == "raw":
        values = _pairwise_raw(X, Y, pairs.astype(np.int64))
    else:
        values = np.array([_rmsd_points(X[a], Y[b], "superposed") for a, b in pairs])
    return RmsdSample(kind, values, mode)


# ----------------------------------------------------------------------- KDE


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        return float(trapezoid(self.density, self.grid))

    def modes(self) -> np.ndarray:
        d = self.density
        inner = (d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:])
        return self.grid[1:-1][inner]

    def to_csv(self, path) -> None:
        pd.DataFrame({"x": self.grid, "density": self.density}).to_csv(path, index=False)


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def kde(sample, bandwidth: float | str = "silverman", n_grid: int = 512) -> DensityCurve:
    """Gaussian kernel density on ``n_grid`` points over ``[min - 3h, max + 3h]``."""
    x = np.asarray(getattr(sample, "values", sample), dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    h = silverman_bandwidth(x) if bandwidth in ("silverman", "auto", None) else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth is zero (all values identical?)")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    dens = np.zeros(n_grid)
    for chunk in np.array_split(x, max(1, x.size // 20000)):
        z = (grid[:, None] - chunk[None, :]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return DensityCurve(grid, dens, h)


# ------------------------------------------------------------------ reports


def segment_window(j: int, halfwidth: int = 7, length: int = 1273) -> tuple:
    """Residue range ``(j - halfwidth, j + halfwidth)`` around a mutation."""
    if j - halfwidth < 1 or j + halfwidth > length:
        raise ValueError(f"window around {j} leaves the chain 1..{length}")
    return j - halfwidth, j + halfwidth


def mode_shift_report(ref: Conformation, lowest_r: Conformation, lowest_m: Conformation,
                      mode: str = "raw") -> dict:
    """RMSD of the reference structure to the lowest-energy reference-sequence
    conformation, and between the two lowest-energy conformations."""
    return {"rmsd_r": rmsd(ref, lowest_r, mode), "rmsd_rm": rmsd(lowest_r, lowest_m, mode),
            "mode": mode}
