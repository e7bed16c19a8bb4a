"""Command-line pipeline driver.

    ffstack <gen-data|train|eval|md|subset-scan|report> --config cfg.json
            [--target ...] [--model ...] [--jobs N] [--seed N]

One JSON config file describes the whole experiment; unknown keys are
rejected and the merged config is echoed into the working directory so
every defaulted value is visible and diffable. All outputs land under the
working directory (override with FFSTACK_WORKDIR). Exit codes: 0 ok,
2 config error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .basemodels import BaseModel, BaseModelSpec, DescriptorSpec, build_ensemble, default_ensemble_specs, train_base
from .checkpoints import descriptor_from_doc, load_checkpoint, save_checkpoint
from .core import Dataset, SplitSpec, parse_extxyz, split_dataset, write_extxyz
from .errors import ConfigError, FFStackError, MissingArtifactError
from .graph import GraphSpec
from .mdsim import MDConfig, check_stability, compute_hr, detect_bonds, mae_hr, run_md, run_md_replicas, stability_percentage
from .meta_conserv import ConservSpec, ConservModel, bind_conserv, train_conserv
from .meta_direct import DirectModel, DirectSpec, train_direct
from .metrics import (
    base_predictor,
    conserv_predictor,
    direct_predictor,
    eval_forces,
    mean_baseline_predictor,
    parity_data,
    subset_scan,
)
from .refpes import (
    RefPotentialSpec,
    SamplerSpec,
    generate_dataset,
    lj7_argon_spec,
    lj7_argon_structure,
    minimize_structure,
    pseudo_methane_spec,
    pseudo_methane_structure,
)
from .training import TrainHyper

_HYPER_DEFAULT = {
    "lr": 1e-3, "batch_size": 16, "epochs": 500, "lambda_e": 0.1,
    "lambda_f": 1.0, "patience": 50, "seed": 0, "lr_decay": 0.01,
}

DEFAULT_CONFIG = {
    "jobs": 1,
    "paths": {
        "workdir": "ffstack-run",
        "dataset": "dataset.extxyz",
        "checkpoints": "checkpoints",
    },
    "ref_pes": {"system": "pseudo_methane"},
    "sampler": {
        "temperature": 300.0, "timestep": 0.5, "n_frames": 2222,
        "stride": 10, "seed": 1, "friction": 0.01,
    },
    "split": {"train_frac": 0.9, "val_frac": 0.05, "test_frac": 0.05, "seed": 2},
    "bases": "default",
    "base_hyper": dict(_HYPER_DEFAULT, seed=3),
    "graph": {
        "cutoff": 5.0, "self_loops": True, "energy_embed_dim": 16,
        "elements": [1, 6, 18],
    },
    "meta_direct": {
        "layers": 4, "hidden": 128, "heads": 4, "head_hidden": 64, "seed": 4,
        "hyper": dict(_HYPER_DEFAULT, seed=4),
    },
    "meta_conserv": {
        "layers": 2, "hidden": 40, "n_rbf": 6, "cutoff": 5.0,
        "mode": "full_eq6", "energy_embed_dim": 16, "mu_min": 0.6, "seed": 5,
        "hyper": dict(_HYPER_DEFAULT, seed=5),
    },
    "md": {
        "timestep": 1.0, "n_steps": 100000, "ensemble": "langevin",
        "temperature": 300.0, "friction": 0.01, "record_stride": 50,
        "seed": 6, "replicas": 10, "stability_delta": 0.5,
    },
    "metrics": {
        "hr_rmax": 6.0, "hr_bins": 60,
        "parity_regions": [[-1.0, 1.0], [4.0, 6.0]],
        "scan": {
            "layers": 2, "hidden": 32, "heads": 2, "head_hidden": 16, "seed": 7,
            "hyper": dict(
                _HYPER_DEFAULT, lr=5e-3, batch_size=64, epochs=150,
                patience=20, seed=7,
            ),
        },
    },
}

_BASE_SPEC_KEYS = {
    "id", "kind", "hidden", "seed", "elements", "epsilon_scale", "sigma_scale",
    "descriptor",
}
_REF_KEYS = {"system", "kind", "lj", "bonds", "angles", "nonbonded", "species", "positions"}


def _merge_checked(default, user, path=""):
    """Deep-merge user config over defaults, rejecting unknown keys."""
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = copy.deepcopy(default)
    for key, val in user.items():
        here = f"{path}.{key}" if path else key
        if key not in default:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(default[key], dict) and key not in ("lj", "nonbonded"):
            out[key] = _merge_checked(default[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        user = {}
    else:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise MissingArtifactError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    # the "bases" and "ref_pes" sections have open-ended shapes
    user = dict(user)
    bases = user.pop("bases", None)
    ref = user.pop("ref_pes", None)
    cfg = _merge_checked(DEFAULT_CONFIG, user)
    if bases is not None:
        cfg["bases"] = bases
    if ref is not None:
        if not isinstance(ref, dict) or not set(ref) <= _REF_KEYS:
            raise ConfigError(
                f"ref_pes keys must be within {sorted(_REF_KEYS)}"
            )
        cfg["ref_pes"] = ref
    if os.environ.get("FFSTACK_WORKDIR"):
        cfg["paths"]["workdir"] = os.environ["FFSTACK_WORKDIR"]
    return cfg


def _workdir(cfg) -> Path:
    wd = Path(cfg["paths"]["workdir"])
    wd.mkdir(parents=True, exist_ok=True)
    (wd / cfg["paths"]["checkpoints"]).mkdir(exist_ok=True)
    return wd


def echo_config(cfg) -> Path:
    wd = _workdir(cfg)
    out = wd / "config_echo.json"
    with open(out, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# -- config -> domain objects -------------------------------------------------

def ref_system(cfg):
    """(RefPotentialSpec, minimized init Structure) from the config."""
    rp = cfg["ref_pes"]
    name = rp.get("system")
    if name == "pseudo_methane":
        return pseudo_methane_spec(), pseudo_methane_structure()
    if name == "lj7_argon":
        return lj7_argon_spec(), lj7_argon_structure()
    if name is not None:
        raise ConfigError(f"unknown builtin system {name!r}")
    from .checkpoints import ref_spec_from_doc
    from .core import Structure

    doc = {
        "kind": rp.get("kind"),
        "lj": rp.get("lj"),
        "bonds": rp.get("bonds", []),
        "angles": rp.get("angles", []),
        "nonbonded": rp.get("nonbonded"),
    }
    spec = ref_spec_from_doc(doc)
    if "species" not in rp or "positions" not in rp:
        raise ConfigError("explicit ref_pes needs species and positions")
    init = Structure(rp["species"], np.array(rp["positions"], dtype=float))
    return spec, minimize_structure(spec, init)


def sampler_spec(cfg) -> SamplerSpec:
    return SamplerSpec(**cfg["sampler"])


def split_spec(cfg) -> SplitSpec:
    return SplitSpec(**cfg["split"])


def hyper_from(doc) -> TrainHyper:
    return TrainHyper(**doc)


def base_specs(cfg) -> list[BaseModelSpec]:
    elements = tuple(cfg["graph"]["elements"])
    if cfg["bases"] == "default":
        return default_ensemble_specs(elements=elements, seed=cfg["base_hyper"]["seed"])
    if not isinstance(cfg["bases"], list) or not cfg["bases"]:
        raise ConfigError("bases must be 'default' or a non-empty list")
    specs = []
    for doc in cfg["bases"]:
        if not set(doc) <= _BASE_SPEC_KEYS:
            raise ConfigError(f"unknown base spec keys: {set(doc) - _BASE_SPEC_KEYS}")
        doc = dict(doc)
        doc.setdefault("elements", elements)
        if "descriptor" in doc:
            doc["descriptor"] = descriptor_from_doc(
                {**{"kind": "radial", "n_rbf": 8, "cutoff": 5.0, "eta": 4.0,
                    "mu_min": 0.6, "angular_terms": [], "eta_ang": 0.4},
                 **doc["descriptor"]}
            )
        doc["hidden"] = tuple(doc.get("hidden", (24, 24)))
        doc["elements"] = tuple(doc["elements"])
        specs.append(BaseModelSpec(**doc))
    return specs


def graph_spec(cfg) -> GraphSpec:
    g = cfg["graph"]
    return GraphSpec(
        cutoff=g["cutoff"], self_loops=g["self_loops"],
        energy_embed_dim=g["energy_embed_dim"], elements=tuple(g["elements"]),
    )


def direct_spec(cfg) -> DirectSpec:
    d = cfg["meta_direct"]
    return DirectSpec(
        layers=d["layers"], hidden=d["hidden"], heads=d["heads"],
        head_hidden=d["head_hidden"], graph=graph_spec(cfg), seed=d["seed"],
    )


def conserv_spec(cfg) -> ConservSpec:
    c = cfg["meta_conserv"]
    return ConservSpec(
        layers=c["layers"], hidden=c["hidden"], n_rbf=c["n_rbf"],
        cutoff=c["cutoff"], mode=c["mode"],
        energy_embed_dim=c["energy_embed_dim"],
        elements=tuple(cfg["graph"]["elements"]),
        mu_min=c["mu_min"], seed=c["seed"],
    )


def md_config(cfg) -> MDConfig:
    m = cfg["md"]
    return MDConfig(
        timestep=m["timestep"], n_steps=m["n_steps"], ensemble=m["ensemble"],
        temperature=m["temperature"], friction=m["friction"],
        record_stride=m["record_stride"], seed=m["seed"],
    )


# -- artifact helpers ---------------------------------------------------------

def _dataset_path(cfg) -> Path:
    return _workdir(cfg) / cfg["paths"]["dataset"]


def load_dataset(cfg) -> Dataset:
    path = _dataset_path(cfg)
    if not path.exists():
        raise MissingArtifactError(f"dataset not found: {path} (run gen-data first)")
    d = parse_extxyz(path.read_text())
    return Dataset(d.items, name=cfg["ref_pes"].get("system", "custom"))


def load_splits(cfg):
    return split_dataset(load_dataset(cfg), split_spec(cfg))


def _ckpt_path(cfg, name: str) -> Path:
    return _workdir(cfg) / cfg["paths"]["checkpoints"] / f"{name}.json"


def load_bases(cfg) -> list[BaseModel]:
    models = []
    for spec in base_specs(cfg):
        path = _ckpt_path(cfg, f"base_{spec.id}")
        if not path.exists():
            raise MissingArtifactError(
                f"base checkpoint missing: {path} (train target=ensemble first)"
            )
        models.append(load_checkpoint(path))
    return models


def write_train_log(path: Path, log, best_epoch):
    lines = ["epoch,train_loss,val_loss,is_best"]
    best_row = None
    for epoch, tr, va in log:
        flag = 1 if epoch == best_epoch else 0
        lines.append(f"{epoch},{tr!r},{va!r},{flag}")
        if flag:
            best_row = f"{epoch},{tr!r},{va!r},1"
    if best_row is not None:
        lines.append(best_row)  # last row carries the best-val marker
    path.write_text("\n".join(lines) + "\n")


def _pmap(fn, tasks, jobs: int):
    """Deterministic parallel map (order-preserving); serial when jobs <= 1."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    spec, init = ref_system(cfg)
    smp = sampler_spec(cfg)
    d = generate_dataset(spec, smp, init, name=cfg["ref_pes"].get("system", "custom"))
    path = _dataset_path(cfg)
    path.write_text(write_extxyz(d))
    ref_doc = json.dumps(cfg["ref_pes"], sort_keys=True).encode()
    manifest = {
        "seed": smp.seed,
        "spec_hash": hashlib.sha256(ref_doc).hexdigest(),
        "frame_count": len(d),
    }
    (wd / "dataset_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {len(d)} frames to {path}")
    return 0


class _TrainBaseTask:
    """Picklable per-base training job for --jobs parallelism."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._loaded = None

    def __call__(self, spec):
        if self._loaded is None:
            tr, va, _ = load_splits(self.cfg)
            ref, _ = ref_system(self.cfg)
            self._loaded = (tr, va, ref)
        tr, va, ref = self._loaded
        return train_base(spec, tr, va, hyper_from(self.cfg["base_hyper"]), ref)

    def __getstate__(self):
        return {"cfg": self.cfg, "_loaded": None}  # workers reload lazily


def cmd_train(cfg, target: str) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    tr, va, te = load_splits(cfg)
    ref, _ = ref_system(cfg)
    if target == "ensemble" or target.startswith("base:"):
        specs = base_specs(cfg)
        if target.startswith("base:"):
            want = target.split(":", 1)[1]
            specs = [s for s in specs if s.id == want]
            if not specs:
                raise ConfigError(f"no base spec with id {want!r}")
        models = _pmap(_TrainBaseTask(cfg), specs, cfg["jobs"])
        for spec, model in zip(specs, models):
            save_checkpoint(_ckpt_path(cfg, f"base_{spec.id}"), model)
            if model.train_meta.get("log"):
                write_train_log(
                    wd / f"train_base_{spec.id}.csv",
                    model.train_meta["log"],
                    model.train_meta["best_epoch"],
                )
            print(f"trained base {spec.id}")
        return 0
    if target == "direct":
        bases = load_bases(cfg)
        model = train_direct(direct_spec(cfg), bases, tr, va,
                             hyper_from(cfg["meta_direct"]["hyper"]))
        save_checkpoint(_ckpt_path(cfg, "direct"), model)
        write_train_log(wd / "train_direct.csv", model.train_meta["log"],
                        model.train_meta["best_epoch"])
        print("trained direct meta-model")
        return 0
    if target == "conserv":
        bases = load_bases(cfg)
        model = train_conserv(conserv_spec(cfg), bases, tr, va,
                              hyper_from(cfg["meta_conserv"]["hyper"]))
        save_checkpoint(_ckpt_path(cfg, "conserv"), model)
        write_train_log(wd / "train_conserv.csv", model.train_meta["log"],
                        model.train_meta["best_epoch"])
        print("trained conservative meta-model")
        return 0
    raise ConfigError(f"unknown train target {target!r}")


def _predictor_for(cfg, name: str):
    if name.startswith("base:"):
        want = name.split(":", 1)[1]
        for spec in base_specs(cfg):
            if spec.id == want:
                path = _ckpt_path(cfg, f"base_{want}")
                if not path.exists():
                    raise MissingArtifactError(f"checkpoint missing: {path}")
                return base_predictor(load_checkpoint(path))
        raise ConfigError(f"no base spec with id {want!r}")
    if name == "mean_baseline":
        return mean_baseline_predictor(load_bases(cfg))
    if name == "direct":
        path = _ckpt_path(cfg, "direct")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint missing: {path}")
        return direct_predictor(load_checkpoint(path), load_bases(cfg))
    if name == "conserv":
        path = _ckpt_path(cfg, "conserv")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint missing: {path}")
        return conserv_predictor(load_checkpoint(path), load_bases(cfg))
    raise ConfigError(f"unknown model reference {name!r}")


def _safe_name(name: str) -> str:
    return name.replace(":", "_")


def cmd_eval(cfg, model_ref: str) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    _, _, te = load_splits(cfg)
    pred = _predictor_for(cfg, model_ref)
    rep = eval_forces(pred, te)
    out = wd / f"eval_{_safe_name(model_ref)}.json"
    out.write_text(rep.to_json() + "\n")
    regions = tuple(tuple(r) for r in cfg["metrics"]["parity_regions"])
    par = parity_data(pred, te, regions=regions)
    (wd / f"eval_{_safe_name(model_ref)}_parity.csv").write_text(par.to_csv())
    print(
        f"{model_ref}: force RMSE {rep.force_rmse_mev:.3f} meV/A, "
        f"MAE {rep.force_mae_mev:.3f} meV/A"
    )
    return 0


def _force_provider_for(cfg, name: str, template):
    """Batched (R,N,3) -> ((R,), (R,N,3)) provider for MD."""
    if name.startswith("base:"):
        want = name.split(":", 1)[1]
        path = _ckpt_path(cfg, f"base_{want}")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint missing: {path}")
        return load_checkpoint(path).bind_batch(template)
    if name == "mean_baseline":
        binders = [m.bind_batch(template) for m in load_bases(cfg)]

        def ff(xb):
            es, fs = zip(*(b(xb) for b in binders))
            return np.mean(es, axis=0), np.mean(fs, axis=0)

        return ff
    if name == "direct":
        path = _ckpt_path(cfg, "direct")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint missing: {path}")
        model = load_checkpoint(path)
        bases = load_bases(cfg)
        binders = [m.bind_batch(template) for m in bases]
        species = template.species
        n = template.n_atoms
        from .graph import neighbor_list

        edges, _, _ = neighbor_list(template, model.spec.graph.cutoff)

        def ff(xb):
            es, fs = [], []
            for b in binders:
                e_m, f_m = b(xb)
                es.append(e_m)
                fs.append(f_m)
            feats = np.concatenate(fs, axis=2)
            e_atom = np.stack(es, axis=1) / n
            f = model.forward_batch(species, edges, feats, e_atom)
            # the direct model predicts forces only; report the mean base
            # energy so trajectories still log a potential-energy column
            return np.mean(es, axis=0), f

        return ff
    if name == "conserv":
        path = _ckpt_path(cfg, "conserv")
        if not path.exists():
            raise MissingArtifactError(f"checkpoint missing: {path}")
        return bind_conserv(load_checkpoint(path), load_bases(cfg), template)
    raise ConfigError(f"unknown model reference {name!r}")


def run_stability(cfg, name: str):
    """MD replicas for one model: stability results, drifts, pooled frames."""
    spec, init = ref_system(cfg)
    mdc = md_config(cfg)
    ff = _force_provider_for(cfg, name, init)
    n_rep = int(cfg["md"]["replicas"])
    seeds = [mdc.seed + 1000 * r for r in range(n_rep)]
    if mdc.ensemble == "nve":
        from .mdsim import maxwell_boltzmann_velocities

        masses = np.array([mdc.mass_of(z) for z in init.species])
        rng = np.random.Generator(np.random.PCG64(mdc.seed))
        v0 = maxwell_boltzmann_velocities(masses, cfg["md"]["temperature"], rng)
        trajs = [run_md(lambda x: _single(ff, x), init, mdc, init_velocities=v0)]
    else:
        trajs = run_md_replicas(ff, init, mdc, n_rep, seeds)
    bonds = detect_bonds(init, spec)
    delta = float(cfg["md"]["stability_delta"])
    results = [check_stability(t, bonds, delta) for t in trajs]
    drifts = [
        float(np.abs(t.total_energy() - t.total_energy()[0]).max()) / init.n_atoms
        for t in trajs
    ]
    return trajs, results, drifts


def _single(ff_batch, x):
    e, f = ff_batch(x[None])
    return float(e[0]), f[0]


def cmd_md(cfg, model_ref: str) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    trajs, results, drifts = run_stability(cfg, model_ref)
    doc = {
        "runs": len(results),
        "stable_pct": stability_percentage(results),
        "per_run": [
            {
                "stable": r.stable,
                "first_violation_step": r.first_violation_step,
                "drift_eV_per_atom": d,
            }
            for r, d in zip(results, drifts)
        ],
    }
    name = _safe_name(model_ref)
    (wd / f"md_{name}_stability.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )
    (wd / f"md_{name}_traj.extxyz").write_text(trajs[0].dump_extxyz())
    print(f"{model_ref}: stability {doc['stable_pct']:.0f}%")
    return 0


def cmd_subset_scan(cfg) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    tr, va, te = load_splits(cfg)
    bases = load_bases(cfg)
    sc = cfg["metrics"]["scan"]
    spec = DirectSpec(
        layers=sc["layers"], hidden=sc["hidden"], heads=sc["heads"],
        head_hidden=sc["head_hidden"], graph=graph_spec(cfg), seed=sc["seed"],
    )
    result = subset_scan(bases, spec, tr, va, te, hyper_from(sc["hyper"]),
                         jobs=cfg["jobs"])
    (wd / "subset_scan.csv").write_text(result.to_csv())
    (wd / "subset_scan_summary.json").write_text(
        json.dumps(result.per_k_summary(), indent=2, sort_keys=True) + "\n"
    )
    print(f"scanned {len(result.rows)} subsets")
    return 0


def cmd_report(cfg) -> int:
    wd = _workdir(cfg)
    echo_config(cfg)
    _, _, te = load_splits(cfg)
    names = [f"base:{s.id}" for s in base_specs(cfg)]
    names += ["mean_baseline", "direct", "conserv"]
    rmax, nbins = float(cfg["metrics"]["hr_rmax"]), int(cfg["metrics"]["hr_bins"])
    ref_hr = compute_hr([it.structure for it in te.items], (rmax, nbins))
    report = {}
    for name in names:
        entry = {}
        rep = eval_forces(_predictor_for(cfg, name), te)
        entry["force_mae_meV_per_A"] = rep.force_mae_mev
        entry["force_rmse_meV_per_A"] = rep.force_rmse_mev
        entry["energy_mae_meV_per_atom"] = rep.energy_mae_mev_atom
        trajs, results, drifts = run_stability(cfg, name)
        entry["stability_pct"] = stability_percentage(results)
        entry["max_drift_eV_per_atom"] = max(drifts)
        frames = []
        for t, r in zip(trajs, results):
            if t.exploded_at is not None:
                continue
            for s in t.structures():
                iu, ju = np.triu_indices(s.n_atoms, k=1)
                dmax = np.linalg.norm(s.positions[iu] - s.positions[ju], axis=1).max()
                if dmax <= rmax:
                    frames.append(s)
        if frames:
            entry["hr_mae"] = mae_hr(ref_hr, compute_hr(frames, (rmax, nbins)))
        else:
            entry["hr_mae"] = None
        report[name] = entry
        print(
            f"{name}: MAE {entry['force_mae_meV_per_A']:.2f} meV/A, "
            f"stability {entry['stability_pct']:.0f}%, "
            f"h(r) MAE {entry['hr_mae']}"
        )
    (wd / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ffstack", description=__doc__)
    parser.add_argument("command", choices=[
        "gen-data", "train", "eval", "md", "subset-scan", "report",
    ])
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--target", default="ensemble",
                        help="train target: base:<id> | ensemble | direct | conserv")
    parser.add_argument("--model", default="conserv",
                        help="model ref for eval/md: base:<id> | mean_baseline | direct | conserv")
    parser.add_argument("--jobs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the command's primary seed")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.jobs is not None:
            cfg["jobs"] = args.jobs
        if args.seed is not None:
            cfg["sampler"]["seed"] = args.seed
            cfg["base_hyper"]["seed"] = args.seed
            cfg["meta_direct"]["hyper"]["seed"] = args.seed
            cfg["meta_conserv"]["hyper"]["seed"] = args.seed
            cfg["md"]["seed"] = args.seed
            cfg["metrics"]["scan"]["hyper"]["seed"] = args.seed
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.target)
        if args.command == "eval":
            return cmd_eval(cfg, args.model)
        if args.command == "md":
            return cmd_md(cfg, args.model)
        if args.command == "subset-scan":
            return cmd_subset_scan(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except FFStackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
