"""Molecular dynamics engine and trajectory-level physics checks.

Integrators: velocity Verlet (NVE) and BAOAB-split Langevin (NVT), both with
exactly one force call per step. A force provider is any callable mapping
positions (N, 3) to a tuple (potential energy eV, forces (N, 3) eV/A); the
batched variant maps (R, N, 3) to ((R,), (R, N, 3)) for lock-step replicas.

Structural diagnostics: bond-deviation stability criterion, interatomic
distance distribution h(r) and its integrated MAE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, LabeledStructure, Structure, symbol_of
from .errors import ConfigError, ValidationError
from .units import EV_PER_DYN, KB

# Standard atomic weights (amu); enough for the synthetic systems.
DEFAULT_MASSES = {
    1: 1.008, 2: 4.0026, 6: 12.011, 7: 14.007, 8: 15.999,
    9: 18.998, 10: 20.180, 18: 39.948,
}

# Single-bond covalent radii (A), Cordero et al. values.
COVALENT_RADII = {
    1: 0.31, 2: 0.28, 6: 0.76, 7: 0.71, 8: 0.66, 9: 0.57, 10: 0.58, 18: 1.06,
}

FORCE_BLOWUP = 1e3  # eV/A, per-atom force norm beyond which a run counts as exploded


@dataclass(frozen=True)
class MDConfig:
    timestep: float = 0.5  # fs
    n_steps: int = 1000
    ensemble: str = "nve"  # "nve" | "langevin"
    temperature: float = 300.0  # K, langevin only
    friction: float = 0.01  # 1/fs, langevin only
    record_stride: int = 10
    seed: int = 0
    masses: dict | None = None  # atomic number -> amu, overrides defaults

    def __post_init__(self):
        if not 0.0 < self.timestep <= 5.0:
            raise ConfigError(f"timestep must lie in (0, 5] fs, got {self.timestep}")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.ensemble not in ("nve", "langevin"):
            raise ConfigError(f"unknown ensemble {self.ensemble!r}")
        if self.ensemble == "langevin":
            if self.temperature <= 0:
                raise ConfigError("langevin temperature must be > 0")
            if self.friction <= 0:
                raise ConfigError("langevin friction must be > 0")
        if self.record_stride < 1:
            raise ConfigError("record_stride must be >= 1")

    def mass_of(self, z: int) -> float:
        table = self.masses if self.masses is not None else DEFAULT_MASSES
        try:
            return float(table[z])
        except KeyError:
            raise ConfigError(f"no mass configured for element Z={z}") from None


@dataclass
class Trajectory:
    species: tuple[int, ...]
    times: np.ndarray  # (T,) fs
    positions: np.ndarray  # (T, N, 3)
    velocities: np.ndarray  # (T, N, 3) A/fs
    epot: np.ndarray  # (T,) eV
    ekin: np.ndarray  # (T,) eV
    record_stride: int
    exploded_at: int | None = None  # MD step index of blow-up, if any

    @property
    def n_frames(self) -> int:
        return len(self.times)

    def structures(self) -> list[Structure]:
        return [Structure(self.species, p) for p in self.positions]

    def total_energy(self) -> np.ndarray:
        return self.epot + self.ekin

    def dump_extxyz(self) -> str:
        """Extended-XYZ dump with time_fs / epot_eV / ekin_eV header keys."""
        out = []
        n = len(self.species)
        for t in range(self.n_frames):
            out.append(str(n))
            out.append(
                f"time_fs={self.times[t]!r} epot_eV={self.epot[t]!r} "
                f"ekin_eV={self.ekin[t]!r} "
                "Properties=species:S:1:pos:R:3:vel:R:3"
            )
            for z, r, v in zip(self.species, self.positions[t], self.velocities[t]):
                row = [symbol_of(z)]
                row += ["%.16e" % x for x in r]
                row += ["%.16e" % x for x in v]
                out.append(" ".join(row))
        return "\n".join(out) + "\n"


def maxwell_boltzmann_velocities(
    masses: np.ndarray, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """Velocities (A/fs) at the requested temperature, no COM removal."""
    sigma = np.sqrt(KB * temperature * EV_PER_DYN / masses)
    return rng.normal(size=(masses.size, 3)) * sigma[:, None]


def _kinetic(masses: np.ndarray, vel: np.ndarray) -> float:
    return float(0.5 * np.sum(masses[:, None] * vel * vel) / EV_PER_DYN)


def _blown_up(forces: np.ndarray) -> bool:
    if not np.all(np.isfinite(forces)):
        return True
    return bool(np.max(np.einsum("...i,...i->...", forces, forces)) > FORCE_BLOWUP**2)


def run_md(
    ff,
    init: Structure,
    cfg: MDConfig,
    init_velocities: np.ndarray | None = None,
) -> Trajectory:
    """Integrate one trajectory; deterministic for a fixed seed.

    Records frame 0 and every `record_stride` steps. On force blow-up
    (per-atom |F| > 1e3 eV/A or non-finite state) the run stops early and the
    trajectory is marked exploded at that step.
    """
    n = init.n_atoms
    masses = np.array([cfg.mass_of(z) for z in init.species])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    x = init.positions.copy()
    if init_velocities is not None:
        v = np.asarray(init_velocities, dtype=np.float64).copy()
        if v.shape != (n, 3):
            raise ValidationError("init_velocities must be (N, 3)")
    elif cfg.ensemble == "langevin":
        v = maxwell_boltzmann_velocities(masses, cfg.temperature, rng)
    else:
        v = np.zeros((n, 3))

    dt = cfg.timestep
    inv_m = (EV_PER_DYN / masses)[:, None]  # F (eV/A) -> a (A/fs^2)
    if cfg.ensemble == "langevin":
        c1 = np.exp(-cfg.friction * dt)
        c2 = np.sqrt(KB * cfg.temperature * EV_PER_DYN / masses * (1.0 - c1 * c1))[
            :, None
        ]

    times, xs, vs, eps, eks = [], [], [], [], []
    exploded_at = None

    epot, forces = ff(x)
    if _blown_up(forces):
        exploded_at = 0
        forces = np.zeros_like(forces)

    def record(step):
        times.append(step * dt)
        xs.append(x.copy())
        vs.append(v.copy())
        eps.append(epot)
        eks.append(_kinetic(masses, v))

    record(0)
    if exploded_at is None:
        for step in range(1, cfg.n_steps + 1):
            if cfg.ensemble == "nve":
                v += 0.5 * dt * forces * inv_m
                x += dt * v
                epot, forces = ff(x)
                if _blown_up(forces) or not np.all(np.isfinite(x)):
                    exploded_at = step
                    break
                v += 0.5 * dt * forces * inv_m
            else:  # BAOAB Langevin
                v += 0.5 * dt * forces * inv_m
                x += 0.5 * dt * v
                v = c1 * v + c2 * rng.normal(size=(n, 3))
                x += 0.5 * dt * v
                epot, forces = ff(x)
                if _blown_up(forces) or not np.all(np.isfinite(x)):
                    exploded_at = step
                    break
                v += 0.5 * dt * forces * inv_m
            if step % cfg.record_stride == 0:
                record(step)

    return Trajectory(
        species=init.species,
        times=np.array(times),
        positions=np.array(xs),
        velocities=np.array(vs),
        epot=np.array(eps),
        ekin=np.array(eks),
        record_stride=cfg.record_stride,
        exploded_at=exploded_at,
    )


def run_md_replicas(
    ff_batch,
    init: Structure,
    cfg: MDConfig,
    n_replicas: int,
    seeds: list[int],
) -> list[Trajectory]:
    """Integrate `n_replicas` lock-step trajectories with one batched force
    call per step. Per-replica RNG streams make each trajectory identical to
    a sequential `run_md` with the same seed (up to its explosion step, after
    which the replica is frozen in place while the rest continue)."""
    if len(seeds) != n_replicas:
        raise ValidationError("need one seed per replica")
    n = init.n_atoms
    masses = np.array([cfg.mass_of(z) for z in init.species])
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
    x = np.broadcast_to(init.positions, (n_replicas, n, 3)).copy()
    if cfg.ensemble == "langevin":
        v = np.stack(
            [maxwell_boltzmann_velocities(masses, cfg.temperature, g) for g in rngs]
        )
    else:
        v = np.zeros((n_replicas, n, 3))

    dt = cfg.timestep
    inv_m = (EV_PER_DYN / masses)[None, :, None]
    if cfg.ensemble == "langevin":
        c1 = np.exp(-cfg.friction * dt)
        c2 = np.sqrt(KB * cfg.temperature * EV_PER_DYN / masses * (1.0 - c1 * c1))[
            None, :, None
        ]

    alive = np.ones(n_replicas, dtype=bool)
    exploded_at = [None] * n_replicas
    times, xs, vs, eps, eks = [], [], [], [], []

    def check_explosions(step, forces, x_prev, ep_prev):
        """Mark blown-up replicas and freeze them at their pre-step state."""
        bad = ~np.all(np.isfinite(forces.reshape(n_replicas, -1)), axis=1)
        norm2 = np.einsum("rni,rni->rn", np.nan_to_num(forces), np.nan_to_num(forces))
        bad |= norm2.max(axis=1) > FORCE_BLOWUP**2
        bad |= ~np.all(np.isfinite(x.reshape(n_replicas, -1)), axis=1)
        for r in np.nonzero(bad & alive)[0]:
            exploded_at[r] = step
            alive[r] = False
            x[r] = x_prev[r]
            v[r] = 0.0
            forces[r] = 0.0
            epot[r] = ep_prev[r]

    epot, forces = ff_batch(x)
    epot = np.asarray(epot, dtype=np.float64).copy()
    forces = np.array(forces, dtype=np.float64)
    check_explosions(0, forces, x.copy(), epot.copy())

    def record(step):
        times.append(step * dt)
        xs.append(x.copy())
        vs.append(v.copy())
        eps.append(epot.copy())
        ek = 0.5 * np.einsum("n,rni->r", masses, v * v) / EV_PER_DYN
        eks.append(ek)

    record(0)
    for step in range(1, cfg.n_steps + 1):
        live = alive[:, None, None]
        x_prev, ep_prev = x.copy(), epot.copy()
        if cfg.ensemble == "nve":
            v += np.where(live, 0.5 * dt * forces * inv_m, 0.0)
            x += np.where(live, dt * v, 0.0)
        else:
            v += np.where(live, 0.5 * dt * forces * inv_m, 0.0)
            x += np.where(live, 0.5 * dt * v, 0.0)
            noise = np.stack([g.normal(size=(n, 3)) for g in rngs])
            v = np.where(live, c1 * v + c2 * noise, v)
            x += np.where(live, 0.5 * dt * v, 0.0)
        epot_new, forces = ff_batch(x)
        forces = np.array(forces, dtype=np.float64)
        epot = np.where(alive, np.asarray(epot_new, dtype=np.float64), epot)
        check_explosions(step, forces, x_prev, ep_prev)
        v += np.where(alive[:, None, None], 0.5 * dt * forces * inv_m, 0.0)
        if step % cfg.record_stride == 0:
            record(step)
        if not alive.any():
            break

    times = np.array(times)
    xs = np.array(xs)
    vs = np.array(vs)
    eps = np.array(eps)
    eks = np.array(eks)
    out = []
    for r in range(n_replicas):
        out.append(
            Trajectory(
                species=init.species,
                times=times.copy(),
                positions=xs[:, r],
                velocities=vs[:, r],
                epot=eps[:, r],
                ekin=eks[:, r],
                record_stride=cfg.record_stride,
                exploded_at=exploded_at[r],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Bonds and stability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BondSet:
    bonds: tuple[tuple[int, int, float], ...]  # (i, j, equilibrium length A), i < j

    def __post_init__(self):
        for i, j, b in self.bonds:
            if not (0 <= i < j):
                raise ValidationError(f"bond indices must satisfy i < j, got ({i},{j})")
            if b <= 0:
                raise ValidationError(f"equilibrium bond length must be > 0, got {b}")

    def __len__(self):
        return len(self.bonds)


def detect_bonds(s: Structure, ref=None, radius_scale: float = 1.3) -> BondSet:
    """Bond set for the stability criterion.

    If `ref` carries an explicit bond list (pseudo-molecule specs), those
    bonds are used with their equilibrium lengths. Otherwise pairs closer
    than radius_scale * (sum of covalent radii) in `s` become bonds with the
    current distance as equilibrium value, so `s` should be a minimized
    reference structure.
    """
    bonds = []
    spec_bonds = getattr(ref, "bonds", None)
    if spec_bonds:
        for term in spec_bonds:
            i, j = (term.i, term.j) if term.i < term.j else (term.j, term.i)
            bonds.append((i, j, float(term.r0)))
    else:
        pos = s.positions
        for i in range(s.n_atoms):
            for j in range(i + 1, s.n_atoms):
                ri = COVALENT_RADII.get(s.species[i], 0.75)
                rj = COVALENT_RADII.get(s.species[j], 0.75)
                d = float(np.linalg.norm(pos[i] - pos[j]))
                if d < radius_scale * (ri + rj):
                    bonds.append((i, j, d))
    if not bonds:
        raise ValidationError("no bonds detected; stability criterion undefined")
    return BondSet(tuple(bonds))


@dataclass(frozen=True)
class StabilityResult:
    stable: bool
    first_violation_step: int | None = None


def check_stability(t: Trajectory, b: BondSet, delta: float = 0.5) -> StabilityResult:
    """A trajectory is unstable iff some bond deviates from equilibrium by
    strictly more than `delta` at any recorded frame (default 0.5 A), or if
    the run exploded."""
    if delta <= 0:
        raise ValidationError("delta must be > 0")
    idx_i = np.array([bb[0] for bb in b.bonds])
    idx_j = np.array([bb[1] for bb in b.bonds])
    b0 = np.array([bb[2] for bb in b.bonds])
    d = np.linalg.norm(t.positions[:, idx_i] - t.positions[:, idx_j], axis=2)
    dev = np.abs(d - b0[None, :])
    violated = np.any(dev > delta, axis=1)
    first = int(np.argmax(violated)) if violated.any() else None
    if t.exploded_at is not None:
        step = t.exploded_at
        if first is None or first * t.record_stride >= step:
            return StabilityResult(False, step)
    if first is not None:
        return StabilityResult(False, first)
    return StabilityResult(True, None)


def stability_percentage(runs: list[StabilityResult]) -> float:
    if not runs:
        raise ValidationError("stability percentage needs at least one run")
    return 100.0 * sum(1 for r in runs if r.stable) / len(runs)


def stability_report(runs: list[StabilityResult]) -> str:
    """JSON stability report: {runs, stable_pct, per_run: [...]}."""
    doc = {
        "runs": len(runs),
        "stable_pct": stability_percentage(runs),
        "per_run": [
            {"stable": r.stable, "first_violation_step": r.first_violation_step}
            for r in runs
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# h(r) distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HrHistogram:
    bin_edges: np.ndarray  # (n_bins + 1,) A
    densities: np.ndarray  # (n_bins,) 1/A, integrates to 1

    def __post_init__(self):
        if np.any(self.densities < 0):
            raise ValidationError("densities must be non-negative")

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


def compute_hr(frames: list[Structure], bins: tuple[float, int]) -> HrHistogram:
    """Distribution of interatomic distances, averaged over frames.

    Each frame contributes a normalized histogram of its N(N-1) ordered pair
    distances; frame histograms are averaged and divided by the bin width so
    the result integrates to one.
    """
    r_max, n_bins = float(bins[0]), int(bins[1])
    if r_max <= 0 or n_bins < 1:
        raise ValidationError("need r_max > 0 and n_bins >= 1")
    if not frames:
        raise ValidationError("need at least one frame")
    n = frames[0].n_atoms
    if n < 2 or any(f.n_atoms != n for f in frames):
        raise ValidationError("all frames must share the same N >= 2")
    width = r_max / n_bins
    iu, ju = np.triu_indices(n, k=1)
    counts = np.zeros(n_bins)
    for f in frames:
        d = np.linalg.norm(f.positions[iu] - f.positions[ju], axis=1)
        which = np.floor(d / width).astype(int)
        if np.any(which >= n_bins):
            raise ValidationError(
                f"pair distance {d.max():.6g} A exceeds r_max={r_max}; enlarge range"
            )
        counts += 2.0 * np.bincount(which, minlength=n_bins)  # ordered pairs
    densities = counts / (len(frames) * n * (n - 1) * width)
    edges = np.linspace(0.0, r_max, n_bins + 1)
    return HrHistogram(bin_edges=edges, densities=densities)


def mae_hr(ref: HrHistogram, pred: HrHistogram) -> float:
    """Integrated mean absolute error between two distance distributions."""
    if ref.bin_edges.shape != pred.bin_edges.shape or not np.allclose(
        ref.bin_edges, pred.bin_edges
    ):
        raise ValidationError("histograms must share identical binning")
    return float(np.sum(np.abs(ref.densities - pred.densities)) * ref.bin_width)
