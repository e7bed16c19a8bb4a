"""Domain types, dataset I/O and splitting.

Structures are immutable after construction (arrays are locked), so they can
be shared freely across threads. Parsing and writing are pure functions over
the extended-XYZ text format described in the README.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

_SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe "
    "Co Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn "
    "Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W "
    "Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()
_Z_OF = {s: z for z, s in enumerate(_SYMBOLS)}


def symbol_of(z: int) -> str:
    if not 1 <= z < len(_SYMBOLS):
        raise ValidationError(f"unknown atomic number {z}")
    return _SYMBOLS[z]


def number_of(symbol: str) -> int:
    try:
        return _Z_OF[symbol]
    except KeyError:
        raise ParseError(f"unknown element symbol {symbol!r}") from None


def _locked(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)  # never alias caller buffers
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Structure:
    """Atomic configuration: species, positions (A), optional periodic cell."""

    species: tuple[int, ...]
    positions: np.ndarray
    cell: np.ndarray | None = None
    periodic: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(int(z) for z in self.species))
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be (N, 3), got {pos.shape}")
        if len(self.species) != pos.shape[0] or pos.shape[0] < 1:
            raise ValidationError("species and positions disagree on atom count")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("non-finite positions")
        object.__setattr__(self, "positions", _locked(pos))
        if any(self.periodic):
            if self.cell is None:
                raise ValidationError("periodic structure requires a cell")
        if self.cell is not None:
            cell = np.asarray(self.cell, dtype=np.float64)
            if cell.shape != (3, 3) or not np.all(np.isfinite(cell)):
                raise ValidationError("cell must be a finite 3x3 matrix")
            if any(self.periodic) and abs(np.linalg.det(cell)) <= 1e-10:
                raise ValidationError("singular cell for periodic structure")
            object.__setattr__(self, "cell", _locked(cell))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def with_positions(self, positions: np.ndarray) -> "Structure":
        return Structure(self.species, positions, self.cell, self.periodic)


@dataclass(frozen=True)
class LabeledStructure:
    """Structure plus reference energy (eV) and forces (eV/A)."""

    structure: Structure
    energy: float
    forces: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.forces, dtype=np.float64)
        if f.shape != (self.structure.n_atoms, 3):
            raise ValidationError(
                f"forces shape {f.shape} does not match {self.structure.n_atoms} atoms"
            )
        if not (np.all(np.isfinite(f)) and np.isfinite(self.energy)):
            raise ValidationError("non-finite labels")
        object.__setattr__(self, "energy", float(self.energy))
        object.__setattr__(self, "forces", _locked(f))


@dataclass(frozen=True)
class Dataset:
    items: tuple[LabeledStructure, ...]
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def require_nonempty(self, what: str = "operation") -> "Dataset":
        if not self.items:
            raise ValidationError(f"{what} requires a non-empty dataset ({self.name})")
        return self


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.9
    val_frac: float = 0.05
    test_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 <= f <= 1.0 for f in fr):
            raise ConfigError(f"split fractions must lie in [0, 1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fr)!r}")
        if self.seed < 0:
            raise ConfigError("split seed must be non-negative")


def split_dataset(d: Dataset, s: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffle then contiguous partition (train, val, test).

    Val/test sizes are rounded down; the remainder goes to train, so the
    training set never starves.
    """
    n = len(d)
    if n < 3:
        raise ValidationError(f"need at least 3 items to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(s.seed))
    order = rng.permutation(n)
    n_val = int(n * s.val_frac)
    n_test = int(n * s.test_frac)
    n_train = n - n_val - n_test
    shuffled = [d.items[i] for i in order]
    return (
        Dataset(shuffled[:n_train], name=f"{d.name}:train"),
        Dataset(shuffled[n_train : n_train + n_val], name=f"{d.name}:val"),
        Dataset(shuffled[n_train + n_val :], name=f"{d.name}:test"),
    )


# ---------------------------------------------------------------------------
# Extended XYZ
# ---------------------------------------------------------------------------

_FLOAT_FMT = "%.16e"  # 17 significant digits, lossless float64 round-trip
_KEYVAL_RE = re.compile(r'(\w+)\s*=\s*(?:"([^"]*)"|(\S+))')

_PROPERTIES = "species:S:1:pos:R:3:forces:R:3"


def _parse_header(line: str, lineno: int) -> dict:
    out = {}
    for m in _KEYVAL_RE.finditer(line):
        key = m.group(1)
        out[key] = m.group(2) if m.group(2) is not None else m.group(3)
    return out


def parse_extxyz(text: str) -> Dataset:
    """Parse extended-XYZ text into a Dataset (one item per frame)."""
    lines = text.splitlines()
    items = []
    i = 0
    nline = len(lines)
    while i < nline:
        if not lines[i].strip():
            i += 1
            continue
        try:
            natoms = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"line {i + 1}: expected atom count, got {lines[i]!r}")
        if natoms < 1:
            raise ParseError(f"line {i + 1}: atom count must be >= 1")
        if i + 1 >= nline:
            raise ParseError(f"line {i + 2}: missing comment line")
        header = _parse_header(lines[i + 1], i + 2)
        if "energy" not in header:
            raise ParseError(f"line {i + 2}: missing required key 'energy'")
        try:
            energy = float(header["energy"])
        except ValueError:
            raise ParseError(f"line {i + 2}: non-numeric energy {header['energy']!r}")
        props = header.get("Properties", _PROPERTIES)
        if props != _PROPERTIES:
            raise ParseError(
                f"line {i + 2}: unsupported Properties {props!r}, need {_PROPERTIES!r}"
            )
        cell = None
        periodic = (False, False, False)
        if "Lattice" in header:
            vals = header["Lattice"].split()
            if len(vals) != 9:
                raise ParseError(f"line {i + 2}: Lattice needs 9 numbers")
            try:
                cell = np.array([float(v) for v in vals]).reshape(3, 3)
            except ValueError:
                raise ParseError(f"line {i + 2}: non-numeric Lattice entry")
            periodic = (True, True, True)
        if "pbc" in header:
            flags = header["pbc"].split()
            if len(flags) != 3 or any(f not in ("T", "F") for f in flags):
                raise ParseError(f"line {i + 2}: pbc must be three T/F flags")
            periodic = tuple(f == "T" for f in flags)
        species = []
        pos = np.empty((natoms, 3))
        forces = np.empty((natoms, 3))
        for a in range(natoms):
            j = i + 2 + a
            if j >= nline or not lines[j].strip():
                raise ParseError(
                    f"line {j + 1}: frame starting at line {i + 1} declares "
                    f"{natoms} atoms but has {a}"
                )
            tok = lines[j].split()
            if len(tok) != 7:
                raise ParseError(f"line {j + 1}: expected 7 columns, got {len(tok)}")
            species.append(number_of(tok[0]))
            try:
                pos[a] = [float(t) for t in tok[1:4]]
                forces[a] = [float(t) for t in tok[4:7]]
            except ValueError:
                raise ParseError(f"line {j + 1}: non-numeric field")
        items.append(
            LabeledStructure(Structure(species, pos, cell, periodic), energy, forces)
        )
        i += 2 + natoms
    return Dataset(items)


def write_extxyz(d: Dataset) -> str:
    """Serialize a Dataset as extended-XYZ text (lossless round-trip)."""
    out = []
    for item in d.items:
        s = item.structure
        out.append(str(s.n_atoms))
        header = [f"energy={_FLOAT_FMT % item.energy}"]
        if s.cell is not None:
            lat = " ".join(_FLOAT_FMT % v for v in s.cell.ravel())
            header.append(f'Lattice="{lat}"')
        if any(s.periodic):
            header.append('pbc="%s"' % " ".join("T" if p else "F" for p in s.periodic))
        header.append(f"Properties={_PROPERTIES}")
        out.append(" ".join(header))
        for z, r, f in zip(s.species, s.positions, item.forces):
            row = [symbol_of(z)]
            row += [_FLOAT_FMT % v for v in r]
            row += [_FLOAT_FMT % v for v in f]
            out.append(" ".join(row))
    return "\n".join(out) + "\n"
