"""Analytic reference potentials standing in for the ab-initio labels.

Two families:

* ``lj_cluster``      -- truncated Lennard-Jones, e.g. an Ar7 cluster.
* ``pseudo_molecule`` -- harmonic bonds + harmonic angles + LJ between
                         non-bonded pairs, e.g. a methane-like CH4 analogue.

Energies and forces are closed-form numpy (`eval_ref`); a separate tape twin
(`build_ref_program`) realizes the same function on the autodiff engine so
that forces can be cross-checked as exact negative gradients and so that
perturbed-analytic base models get Hessian-vector products for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import Dataset, LabeledStructure, Structure
from .errors import ConfigError, EvaluationError, GenerationError, ValidationError

MIN_PAIR_DISTANCE = 0.1  # A, below which atoms count as overlapping

_COS_CLAMP = 1.0 - 1e-9  # keeps arccos finite near collinear angles


@dataclass(frozen=True)
class LJParams:
    epsilon: float  # eV
    sigma: float  # A
    cutoff: float  # A

    def __post_init__(self):
        if self.epsilon <= 0 or self.sigma <= 0:
            raise ConfigError("LJ epsilon and sigma must be > 0")
        if self.cutoff <= self.sigma:
            raise ConfigError("LJ cutoff must exceed sigma")


@dataclass(frozen=True)
class BondTerm:
    i: int
    j: int
    k_b: float  # eV/A^2
    r0: float  # A

    def __post_init__(self):
        if self.k_b <= 0 or self.r0 <= 0:
            raise ConfigError("bond force constant and r0 must be > 0")


@dataclass(frozen=True)
class AngleTerm:
    i: int
    j: int  # vertex
    k: int
    k_theta: float  # eV/rad^2
    theta0: float  # rad

    def __post_init__(self):
        if self.k_theta <= 0:
            raise ConfigError("angle force constant must be > 0")


@dataclass(frozen=True)
class RefPotentialSpec:
    kind: str  # "lj_cluster" | "pseudo_molecule"
    lj: LJParams | None = None
    bonds: tuple[BondTerm, ...] = ()
    angles: tuple[AngleTerm, ...] = ()
    nonbonded: LJParams | None = None

    def __post_init__(self):
        if self.kind == "lj_cluster":
            if self.lj is None:
                raise ConfigError("lj_cluster spec needs lj parameters")
        elif self.kind == "pseudo_molecule":
            if not self.bonds:
                raise ConfigError("pseudo_molecule spec needs at least one bond")
        else:
            raise ConfigError(f"unknown reference potential kind {self.kind!r}")
        object.__setattr__(self, "bonds", tuple(self.bonds))
        object.__setattr__(self, "angles", tuple(self.angles))

    def max_index(self) -> int:
        idx = [-1]
        idx += [max(b.i, b.j) for b in self.bonds]
        idx += [max(a.i, a.j, a.k) for a in self.angles]
        return max(idx)

    def scaled(self, energy_scale: float = 1.0, length_scale: float = 1.0):
        """Globally rescaled copy: energy terms by `energy_scale`, length
        parameters by `length_scale` (used by perturbed-analytic bases)."""

        def lj_scaled(p):
            if p is None:
                return None
            return LJParams(
                p.epsilon * energy_scale, p.sigma * length_scale, p.cutoff
            )

        return RefPotentialSpec(
            kind=self.kind,
            lj=lj_scaled(self.lj),
            bonds=tuple(
                BondTerm(b.i, b.j, b.k_b * energy_scale, b.r0 * length_scale)
                for b in self.bonds
            ),
            angles=tuple(
                AngleTerm(a.i, a.j, a.k, a.k_theta * energy_scale, a.theta0)
                for a in self.angles
            ),
            nonbonded=lj_scaled(self.nonbonded),
        )


@dataclass(frozen=True)
class SamplerSpec:
    temperature: float  # K
    timestep: float  # fs
    n_frames: int
    stride: int = 10
    seed: int = 0
    friction: float = 0.01  # 1/fs

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("sampler temperature must be > 0")
        if not 0 < self.timestep <= 5.0:
            raise ConfigError("sampler timestep must lie in (0, 5] fs")
        if self.n_frames < 1 or self.stride < 1:
            raise ConfigError("n_frames and stride must be >= 1")


# ---------------------------------------------------------------------------
# Closed-form evaluation
# ---------------------------------------------------------------------------

def _lj_pair_terms(p: LJParams, r: np.ndarray):
    """Energy and dE/dr for pair distances r, hard-truncated at the cutoff."""
    inside = r < p.cutoff
    s6 = np.where(inside, (p.sigma / r) ** 6, 0.0)
    e = 4.0 * p.epsilon * (s6 * s6 - s6)
    dedr = np.where(inside, -24.0 * p.epsilon * (2.0 * s6 * s6 - s6) / r, 0.0)
    return np.where(inside, e, 0.0), dedr


def _check_structure(spec: RefPotentialSpec, s: Structure):
    if spec.max_index() >= s.n_atoms:
        raise ValidationError(
            f"spec references atom index {spec.max_index()} but structure has "
            f"{s.n_atoms} atoms"
        )


def eval_ref(spec: RefPotentialSpec, s: Structure) -> tuple[float, np.ndarray]:
    """Closed-form reference energy (eV) and forces (eV/A), forces = -grad E."""
    _check_structure(spec, s)
    pos = s.positions
    n = s.n_atoms
    iu, ju = np.triu_indices(n, k=1)
    dvec = pos[iu] - pos[ju]
    dist = np.linalg.norm(dvec, axis=1)
    if dist.size and dist.min() < MIN_PAIR_DISTANCE:
        raise EvaluationError(
            f"overlapping atoms: min pair distance {dist.min():.4g} A"
        )
    energy = 0.0
    forces = np.zeros((n, 3))

    def add_pair_forces(sel, dedr_sel):
        # dE/dx_i = dedr * (x_i - x_j)/r
        f = (dedr_sel / dist[sel])[:, None] * dvec[sel]
        np.subtract.at(forces, iu[sel], f)
        np.add.at(forces, ju[sel], f)

    if spec.kind == "lj_cluster":
        e, dedr = _lj_pair_terms(spec.lj, dist)
        energy += float(e.sum())
        add_pair_forces(slice(None), dedr)
        return energy, forces

    bonded = {(b.i, b.j) if b.i < b.j else (b.j, b.i) for b in spec.bonds}
    for b in spec.bonds:
        d = pos[b.i] - pos[b.j]
        r = float(np.linalg.norm(d))
        energy += 0.5 * b.k_b * (r - b.r0) ** 2
        g = b.k_b * (r - b.r0) / r * d  # dE/dx_i
        forces[b.i] -= g
        forces[b.j] += g
    for a in spec.angles:
        u = pos[a.i] - pos[a.j]
        v = pos[a.k] - pos[a.j]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        c_raw = float(u @ v) / (nu * nv)
        c = min(max(c_raw, -_COS_CLAMP), _COS_CLAMP)
        theta = np.arccos(c)
        energy += 0.5 * a.k_theta * (theta - a.theta0) ** 2
        if abs(c_raw) < _COS_CLAMP:  # clamped region has zero gradient
            dedt = a.k_theta * (theta - a.theta0)
            dtdc = -1.0 / np.sqrt(1.0 - c * c)
            dcdu = v / (nu * nv) - c * u / (nu * nu)
            dcdv = u / (nu * nv) - c * v / (nv * nv)
            forces[a.i] -= dedt * dtdc * dcdu
            forces[a.k] -= dedt * dtdc * dcdv
            forces[a.j] += dedt * dtdc * (dcdu + dcdv)
    if spec.nonbonded is not None:
        sel = np.array(
            [(i, j) not in bonded for i, j in zip(iu, ju)], dtype=bool
        )
        if sel.any():
            e, dedr = _lj_pair_terms(spec.nonbonded, dist)
            energy += float(e[sel].sum())
            add_pair_forces(sel, dedr[sel])
    return energy, forces


def bind_ref(spec: RefPotentialSpec, template: Structure):
    """Force provider callable over positions for `run_md`."""

    def ff(x):
        return eval_ref(spec, template.with_positions(x))

    return ff


# ---------------------------------------------------------------------------
# Tape twin (exact same function on the autodiff engine)
# ---------------------------------------------------------------------------

def _tape_mask_below(r, cutoff):
    """Step function 1[r < cutoff] built from clamps; zero derivative a.e."""
    big = 1e12
    return ad.clamp_max(ad.clamp_min((cutoff - r) * big, 0.0), 1.0)


def _tape_lj(r, p: LJParams):
    s6 = (p.sigma / r) ** 6.0
    return 4.0 * p.epsilon * (s6 * s6 - s6) * _tape_mask_below(r, p.cutoff)


def build_ref_program(
    spec: RefPotentialSpec, n_atoms: int, batch: int = 1
) -> tuple[ad.Program, int, int]:
    """Compile E(x) for `batch` stacked structures onto a tape.

    Returns (program, leaf id of the flat (batch*n_atoms*3,) positions,
    output id of the (batch,) energies).
    """
    t = ad.Tape()
    x = t.leaf(batch * n_atoms * 3)

    def flat(b, i):
        base = (b * n_atoms + i) * 3
        return [base, base + 1, base + 2]

    def pair_distances(pairs):
        """pairs: list of (b, i, j); returns Var of distances."""
        gi = ad.gather(x, np.array([k for b, i, j in pairs for k in flat(b, i)]))
        gj = ad.gather(x, np.array([k for b, i, j in pairs for k in flat(b, j)]))
        d = gi - gj
        seg = np.repeat(np.arange(len(pairs)), 3)
        r2 = ad.scatter_add(d * d, seg, len(pairs))
        return ad.sqrt(r2), d

    terms = []
    frame_of = []

    if spec.kind == "lj_cluster":
        pairs = [
            (b, i, j)
            for b in range(batch)
            for i in range(n_atoms)
            for j in range(i + 1, n_atoms)
        ]
        r, _ = pair_distances(pairs)
        terms.append(_tape_lj(r, spec.lj))
        frame_of.append(np.array([b for b, _, _ in pairs]))
    else:
        bpairs = [(b, bt.i, bt.j) for b in range(batch) for bt in spec.bonds]
        r, _ = pair_distances(bpairs)
        kb = t.const(np.array([bt.k_b for b in range(batch) for bt in spec.bonds]))
        r0 = t.const(np.array([bt.r0 for b in range(batch) for bt in spec.bonds]))
        dr = r - r0
        terms.append(0.5 * kb * dr * dr)
        frame_of.append(np.array([b for b, _, _ in bpairs]))

        if spec.angles:
            ang = [(b, a) for b in range(batch) for a in spec.angles]
            gu_i = ad.gather(x, np.array([k for b, a in ang for k in flat(b, a.i)]))
            gu_j = ad.gather(x, np.array([k for b, a in ang for k in flat(b, a.j)]))
            gu_k = ad.gather(x, np.array([k for b, a in ang for k in flat(b, a.k)]))
            u = gu_i - gu_j
            v = gu_k - gu_j
            seg = np.repeat(np.arange(len(ang)), 3)
            nu = ad.sqrt(ad.scatter_add(u * u, seg, len(ang)))
            nv = ad.sqrt(ad.scatter_add(v * v, seg, len(ang)))
            uv = ad.scatter_add(u * v, seg, len(ang))
            c = ad.clamp_max(ad.clamp_min(uv / (nu * nv), -_COS_CLAMP), _COS_CLAMP)
            theta = ad.acos(c)
            kt = t.const(np.array([a.k_theta for b, a in ang]))
            t0 = t.const(np.array([a.theta0 for b, a in ang]))
            dth = theta - t0
            terms.append(0.5 * kt * dth * dth)
            frame_of.append(np.array([b for b, _ in ang]))

        if spec.nonbonded is not None:
            bonded = {
                (bt.i, bt.j) if bt.i < bt.j else (bt.j, bt.i) for bt in spec.bonds
            }
            nb = [
                (b, i, j)
                for b in range(batch)
                for i in range(n_atoms)
                for j in range(i + 1, n_atoms)
                if (i, j) not in bonded
            ]
            if nb:
                r, _ = pair_distances(nb)
                terms.append(_tape_lj(r, spec.nonbonded))
                frame_of.append(np.array([b for b, _, _ in nb]))

    energy = None
    for term, fo in zip(terms, frame_of):
        e = ad.scatter_add(term, fo, batch)
        energy = e if energy is None else energy + e
    prog = t.compile([energy])
    return prog, x.i, energy.i


class RefProgramCache:
    """Per-(spec, n_atoms, batch) compiled reference programs."""

    def __init__(self, spec: RefPotentialSpec):
        self.spec = spec
        self._cache: dict = {}

    def get(self, n_atoms: int, batch: int = 1):
        key = (n_atoms, batch)
        if key not in self._cache:
            self._cache[key] = build_ref_program(self.spec, n_atoms, batch)
        return self._cache[key]


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

def pseudo_methane_spec() -> RefPotentialSpec:
    """Methane-like analogue: central atom 0, satellites 1..4."""
    theta0 = 1.9106  # rad, tetrahedral
    bonds = tuple(BondTerm(0, i, 20.0, 1.09) for i in range(1, 5))
    angles = tuple(
        AngleTerm(i, 0, j, 3.0, theta0)
        for i in range(1, 5)
        for j in range(i + 1, 5)
    )
    return RefPotentialSpec(
        kind="pseudo_molecule",
        bonds=bonds,
        angles=angles,
        nonbonded=LJParams(epsilon=0.003, sigma=1.55, cutoff=5.0),
    )


def pseudo_methane_structure() -> Structure:
    r0 = 1.09
    dirs = np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    ) / np.sqrt(3.0)
    pos = np.vstack([np.zeros(3), r0 * dirs])
    return Structure([6, 1, 1, 1, 1], pos)


def lj7_argon_spec() -> RefPotentialSpec:
    return RefPotentialSpec(
        kind="lj_cluster", lj=LJParams(epsilon=0.0103, sigma=3.4, cutoff=8.5)
    )


def minimize_structure(
    spec: RefPotentialSpec, s: Structure, tol: float = 1e-10, max_iter: int = 20000
) -> Structure:
    """Deterministic gradient descent with backtracking to a local minimum."""
    x = s.positions.copy()
    step = 0.05
    e, f = eval_ref(spec, s.with_positions(x))
    for _ in range(max_iter):
        fmax = np.abs(f).max()
        if fmax < tol:
            break
        x_new = x + step * f
        e_new, f_new = eval_ref(spec, s.with_positions(x_new))
        if e_new < e:
            x, e, f = x_new, e_new, f_new
            step = min(step * 1.2, 0.2)
        else:
            step *= 0.5
    return s.with_positions(x)


def lj7_argon_structure() -> Structure:
    """Relaxed pentagonal-bipyramid Ar7 cluster."""
    spec = lj7_argon_spec()
    sigma = spec.lj.sigma
    d = 2.0 ** (1.0 / 6.0) * sigma
    ring_r = d / (2.0 * np.sin(np.pi / 5.0))
    apex_h = np.sqrt(d * d - ring_r * ring_r)
    pos = [[0.0, 0.0, apex_h], [0.0, 0.0, -apex_h]]
    for k in range(5):
        a = 2.0 * np.pi * k / 5.0
        pos.append([ring_r * np.cos(a), ring_r * np.sin(a), 0.0])
    s = Structure([18] * 7, np.array(pos))
    return minimize_structure(spec, s)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def generate_dataset(
    p: RefPotentialSpec,
    smp: SamplerSpec,
    init: Structure,
    name: str = "refpes",
) -> Dataset:
    """Sample `n_frames` labeled frames from Langevin dynamics on the
    reference potential, recording every `stride` steps (initial frame
    excluded). Deterministic per seed."""
    from .mdsim import MDConfig, run_md  # local import to avoid a cycle

    cfg = MDConfig(
        timestep=smp.timestep,
        n_steps=smp.n_frames * smp.stride,
        ensemble="langevin",
        temperature=smp.temperature,
        friction=smp.friction,
        record_stride=smp.stride,
        seed=smp.seed,
    )
    traj = run_md(bind_ref(p, init), init, cfg)
    if traj.exploded_at is not None:
        raise GenerationError(
            f"reference trajectory blew up at step {traj.exploded_at}"
        )
    # escape test is taken relative to each frame's own centroid so that
    # benign center-of-mass diffusion of a free molecule does not trip it
    init_extent = np.abs(init.positions - init.positions.mean(axis=0)).max()
    limit = 3.0 * max(float(init_extent), 1.0)
    items = []
    for k in range(1, traj.n_frames):
        pos = traj.positions[k]
        if np.abs(pos - pos.mean(axis=0)).max() > limit:
            raise GenerationError(
                f"atom escaped 3x the initial bounding box at step "
                f"{k * smp.stride}; structure not stable at {smp.temperature} K"
            )
        s = init.with_positions(pos)
        e, f = eval_ref(p, s)
        items.append(LabeledStructure(s, e, f))
    return Dataset(items, name=name)
