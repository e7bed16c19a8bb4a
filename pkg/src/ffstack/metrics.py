"""Prediction-accuracy metrics, ensemble subset scan, parity regions.

A "dataset predictor" is a callable Dataset -> (energies (F,) or None,
forces (F, N, 3)); factories below adapt the base/mean/direct/conservative
surfaces. Force errors are reported in meV/A, energies in meV/atom. When
several datasets (systems) are evaluated together the averaged metrics are
means of the per-system values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .basemodels import BaseModel
from .core import Dataset
from .errors import ValidationError
from .graph import neighbor_list
from .meta_conserv import ConservModel, bind_conserv
from .meta_direct import DirectModel, DirectSpec, cache_base_predictions, train_direct
from .training import TrainHyper


def base_predictor(m: BaseModel):
    def run(d: Dataset):
        e, f = m.predict_dataset(d)
        return e, f

    return run


def mean_baseline_predictor(bases: list[BaseModel]):
    def run(d: Dataset):
        es, fs = [], []
        for m in bases:
            e, f = m.predict_dataset(d)
            es.append(e)
            fs.append(f)
        return np.mean(es, axis=0), np.mean(fs, axis=0)

    return run


def direct_predictor(m: DirectModel, bases: list[BaseModel]):
    def run(d: Dataset):
        d.require_nonempty("evaluation")
        species = d[0].structure.species
        edges, _, _ = neighbor_list(d[0].structure, m.spec.graph.cutoff)
        f_b, e_b = cache_base_predictions(bases, d)
        return None, m.forward_batch(species, edges, f_b, e_b)

    return run


def conserv_predictor(m: ConservModel, bases: list[BaseModel]):
    def run(d: Dataset):
        d.require_nonempty("evaluation")
        template = d[0].structure
        ff = bind_conserv(m, bases, template)
        pos = np.stack([it.structure.positions for it in d.items])
        e, f = ff(pos)
        return e, f

    return run


@dataclass(frozen=True)
class EvalReport:
    per_system: dict
    force_rmse_mev: float
    force_mae_mev: float
    energy_mae_mev_atom: float | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "force_rmse_meV_per_A": self.force_rmse_mev,
                "force_mae_meV_per_A": self.force_mae_mev,
                "energy_mae_meV_per_atom": self.energy_mae_mev_atom,
                "per_system": self.per_system,
            },
            indent=2,
            sort_keys=True,
        )


def eval_forces(predictor, test) -> EvalReport:
    """Averaged RMSE/MAE over systems: each dataset is one system whose
    force components are pooled before the per-system RMSE/MAE."""
    systems = [test] if isinstance(test, Dataset) else list(test)
    if not systems:
        raise ValidationError("eval_forces needs at least one dataset")
    per = {}
    rmses, maes, emaes = [], [], []
    for d in systems:
        d.require_nonempty("evaluation")
        e_pred, f_pred = predictor(d)
        f_ref = np.stack([it.forces for it in d.items])
        if f_pred.shape != f_ref.shape:
            raise ValidationError("prediction/reference force shape mismatch")
        res = (f_pred - f_ref).ravel()
        rmse = float(np.sqrt(np.mean(res**2))) * 1e3
        mae = float(np.mean(np.abs(res))) * 1e3
        entry = {
            "force_rmse_meV_per_A": rmse,
            "force_mae_meV_per_A": mae,
            "n_frames": len(d),
            "n_components": res.size,
        }
        if e_pred is not None:
            n = d[0].structure.n_atoms
            e_ref = np.array([it.energy for it in d.items])
            emae = float(np.mean(np.abs(e_pred - e_ref)) / n) * 1e3
            entry["energy_mae_meV_per_atom"] = emae
            emaes.append(emae)
        per[d.name] = entry
        rmses.append(rmse)
        maes.append(mae)
    return EvalReport(
        per_system=per,
        force_rmse_mev=float(np.mean(rmses)),
        force_mae_mev=float(np.mean(maes)),
        energy_mae_mev_atom=float(np.mean(emaes)) if emaes else None,
    )


# ---------------------------------------------------------------------------
# Subset scan (every non-empty combination of base models)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubsetScanRow:
    bitmask: int
    k: int
    rmse_mev: float  # NaN for failed rows
    seed: int
    error: str | None = None


@dataclass
class SubsetScanResult:
    rows: list[SubsetScanRow] = field(default_factory=list)

    def per_k_summary(self) -> dict[int, dict]:
        out = {}
        ks = sorted({r.k for r in self.rows})
        for k in ks:
            vals = np.array(
                [r.rmse_mev for r in self.rows if r.k == k and np.isfinite(r.rmse_mev)]
            )
            if vals.size == 0:
                out[k] = {"count": 0}
                continue
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            out[k] = {
                "count": int(vals.size),
                "median": float(med),
                "iqr": float(q3 - q1),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        return out

    def to_csv(self) -> str:
        lines = ["bitmask,k,rmse_meV_per_A,seed,error"]
        for r in self.rows:
            err = "" if r.error is None else r.error.replace(",", ";")
            lines.append(f"{r.bitmask},{r.k},{r.rmse_mev!r},{r.seed},{err}")
        return "\n".join(lines) + "\n"


class _ScanTask:
    """Picklable one-subset job for parallel scans."""

    def __init__(self, bases, spec, train, val, test, hyper):
        self.bases = bases
        self.spec = spec
        self.train = train
        self.val = val
        self.test = test
        self.hyper = hyper

    def __call__(self, mask: int) -> SubsetScanRow:
        chosen = [self.bases[i] for i in range(len(self.bases)) if mask >> i & 1]
        try:
            model = train_direct(self.spec, chosen, self.train, self.val, self.hyper)
            rep = eval_forces(direct_predictor(model, chosen), self.test)
            return SubsetScanRow(mask, len(chosen), rep.force_rmse_mev, self.hyper.seed)
        except Exception as exc:  # failed rows are recorded, scan continues
            return SubsetScanRow(
                mask, len(chosen), float("nan"), self.hyper.seed, error=str(exc)
            )


def subset_scan(
    bases: list[BaseModel],
    spec: DirectSpec,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    hyper: TrainHyper,
    jobs: int = 1,
) -> SubsetScanResult:
    """Train one fresh direct meta-model per non-empty base subset and score
    it on the test set. Training failures become failed rows, not aborts.
    Rows are deterministic per (bitmask, seed) regardless of `jobs`."""
    m = len(bases)
    if not 1 <= m <= 8:
        raise ValidationError("subset scan supports 1..8 base models (2^M - 1 runs)")
    task = _ScanTask(bases, spec, train, val, test, hyper)
    masks = list(range(1, 2**m))
    if jobs <= 1:
        rows = [task(mask) for mask in masks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(task, masks))
    return SubsetScanResult(rows=rows)


# ---------------------------------------------------------------------------
# Parity data (force-component scatter and per-region MAE)
# ---------------------------------------------------------------------------

DEFAULT_PARITY_REGIONS = ((-1.0, 1.0), (4.0, 6.0))


@dataclass(frozen=True)
class ParityData:
    reference: np.ndarray  # flat force components, eV/A
    predicted: np.ndarray
    region_maes: tuple  # ((lo, hi, mae_mev | None), ...)

    def to_csv(self) -> str:
        lines = ["reference_eV_per_A,predicted_eV_per_A"]
        for r, p in zip(self.reference, self.predicted):
            lines.append(f"{float(r)!r},{float(p)!r}")
        return "\n".join(lines) + "\n"


def parity_data(
    predictor, test: Dataset, regions=DEFAULT_PARITY_REGIONS
) -> ParityData:
    """Reference/predicted force-component pairs plus MAE inside windows of
    the reference value; empty windows report None rather than zero."""
    for lo, hi in regions:
        if not lo < hi:
            raise ValidationError(f"invalid parity region ({lo}, {hi})")
    test.require_nonempty("parity analysis")
    e_pred, f_pred = predictor(test)
    ref = np.stack([it.forces for it in test.items]).ravel()
    pred = np.asarray(f_pred).ravel()
    maes = []
    for lo, hi in regions:
        sel = (ref >= lo) & (ref <= hi)
        if sel.any():
            maes.append((lo, hi, float(np.mean(np.abs(pred[sel] - ref[sel]))) * 1e3))
        else:
            maes.append((lo, hi, None))
    return ParityData(reference=ref, predicted=pred, region_maes=tuple(maes))
