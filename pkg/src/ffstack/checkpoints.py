"""JSON checkpoints for base and meta models.

One document per model: {"format_version": 1, "kind": ..., "spec": {...},
"params": [...], ...}. Floats are emitted as plain JSON numbers in Python's
shortest round-trip form, which reparses bit-exactly. `format_version` and,
for the conservative model, `mode` are enforced at load.
"""

from __future__ import annotations

import json

import numpy as np

from .basemodels import BaseModel, BaseModelSpec, DescriptorSpec
from .errors import ValidationError
from .graph import GraphSpec
from .meta_conserv import ConservModel, ConservSpec
from .meta_direct import DirectModel, DirectSpec
from .refpes import AngleTerm, BondTerm, LJParams, RefPotentialSpec

FORMAT_VERSION = 1


def _ref_spec_doc(spec: RefPotentialSpec | None):
    if spec is None:
        return None
    return {
        "kind": spec.kind,
        "lj": None
        if spec.lj is None
        else {"epsilon": spec.lj.epsilon, "sigma": spec.lj.sigma, "cutoff": spec.lj.cutoff},
        "bonds": [[b.i, b.j, b.k_b, b.r0] for b in spec.bonds],
        "angles": [[a.i, a.j, a.k, a.k_theta, a.theta0] for a in spec.angles],
        "nonbonded": None
        if spec.nonbonded is None
        else {
            "epsilon": spec.nonbonded.epsilon,
            "sigma": spec.nonbonded.sigma,
            "cutoff": spec.nonbonded.cutoff,
        },
    }


def ref_spec_from_doc(doc) -> RefPotentialSpec | None:
    if doc is None:
        return None
    return RefPotentialSpec(
        kind=doc["kind"],
        lj=None if doc["lj"] is None else LJParams(**doc["lj"]),
        bonds=tuple(BondTerm(*b) for b in doc["bonds"]),
        angles=tuple(AngleTerm(*a) for a in doc["angles"]),
        nonbonded=None if doc["nonbonded"] is None else LJParams(**doc["nonbonded"]),
    )


def _descriptor_doc(d: DescriptorSpec):
    return {
        "kind": d.kind,
        "n_rbf": d.n_rbf,
        "cutoff": d.cutoff,
        "eta": d.eta,
        "mu_min": d.mu_min,
        "angular_terms": [list(t) for t in d.angular_terms],
        "eta_ang": d.eta_ang,
    }


def descriptor_from_doc(doc) -> DescriptorSpec:
    return DescriptorSpec(
        kind=doc["kind"],
        n_rbf=doc["n_rbf"],
        cutoff=doc["cutoff"],
        eta=doc["eta"],
        mu_min=doc["mu_min"],
        angular_terms=tuple(tuple(t) for t in doc["angular_terms"]),
        eta_ang=doc["eta_ang"],
    )


def _graph_doc(g: GraphSpec):
    return {
        "cutoff": g.cutoff,
        "self_loops": g.self_loops,
        "energy_embed_dim": g.energy_embed_dim,
        "elements": list(g.elements),
    }


def graph_from_doc(doc) -> GraphSpec:
    return GraphSpec(
        cutoff=doc["cutoff"],
        self_loops=doc["self_loops"],
        energy_embed_dim=doc["energy_embed_dim"],
        elements=tuple(doc["elements"]),
    )


def _meta_doc(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if k != "log"}


def model_to_doc(model) -> dict:
    if isinstance(model, BaseModel):
        s = model.spec
        return {
            "format_version": FORMAT_VERSION,
            "kind": "base",
            "spec": {
                "id": s.id,
                "kind": s.kind,
                "descriptor": _descriptor_doc(s.descriptor),
                "hidden": list(s.hidden),
                "seed": s.seed,
                "elements": list(s.elements),
                "epsilon_scale": s.epsilon_scale,
                "sigma_scale": s.sigma_scale,
            },
            "params": model.params.tolist(),
            "energy_shift": model.energy_shift,
            "energy_scale": model.energy_scale,
            "ref": _ref_spec_doc(model.ref),
            "train_meta": _meta_doc(model.train_meta),
        }
    if isinstance(model, DirectModel):
        s = model.spec
        return {
            "format_version": FORMAT_VERSION,
            "kind": "direct",
            "spec": {
                "layers": s.layers,
                "hidden": s.hidden,
                "heads": s.heads,
                "head_hidden": s.head_hidden,
                "graph": _graph_doc(s.graph),
                "seed": s.seed,
            },
            "n_models": model.n_models,
            "params": model.params.tolist(),
            "train_meta": _meta_doc(model.train_meta),
        }
    if isinstance(model, ConservModel):
        s = model.spec
        return {
            "format_version": FORMAT_VERSION,
            "kind": "conserv",
            "mode": s.mode,
            "spec": {
                "layers": s.layers,
                "hidden": s.hidden,
                "n_rbf": s.n_rbf,
                "cutoff": s.cutoff,
                "mode": s.mode,
                "energy_embed_dim": s.energy_embed_dim,
                "elements": list(s.elements),
                "mu_min": s.mu_min,
                "seed": s.seed,
            },
            "n_models": model.n_models,
            "params": model.params.tolist(),
            "energy_stats": list(model.energy_stats),
            "energy_scale": model.energy_scale,
            "train_meta": _meta_doc(model.train_meta),
        }
    raise ValidationError(f"cannot checkpoint object of type {type(model).__name__}")


def model_from_doc(doc):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format_version {doc.get('format_version')!r}"
        )
    kind = doc.get("kind")
    if kind == "base":
        sd = doc["spec"]
        spec = BaseModelSpec(
            id=sd["id"],
            kind=sd["kind"],
            descriptor=descriptor_from_doc(sd["descriptor"]),
            hidden=tuple(sd["hidden"]),
            seed=sd["seed"],
            elements=tuple(sd["elements"]),
            epsilon_scale=sd["epsilon_scale"],
            sigma_scale=sd["sigma_scale"],
        )
        return BaseModel(
            spec=spec,
            params=np.array(doc["params"], dtype=np.float64),
            energy_shift=doc["energy_shift"],
            energy_scale=doc["energy_scale"],
            ref=ref_spec_from_doc(doc["ref"]),
            train_meta=doc["train_meta"],
        )
    if kind == "direct":
        sd = doc["spec"]
        spec = DirectSpec(
            layers=sd["layers"],
            hidden=sd["hidden"],
            heads=sd["heads"],
            head_hidden=sd["head_hidden"],
            graph=graph_from_doc(sd["graph"]),
            seed=sd["seed"],
        )
        return DirectModel(
            spec=spec,
            n_models=doc["n_models"],
            params=np.array(doc["params"], dtype=np.float64),
            train_meta=doc["train_meta"],
        )
    if kind == "conserv":
        sd = doc["spec"]
        if doc.get("mode") != sd["mode"]:
            raise ValidationError("checkpoint mode disagrees with its spec")
        spec = ConservSpec(
            layers=sd["layers"],
            hidden=sd["hidden"],
            n_rbf=sd["n_rbf"],
            cutoff=sd["cutoff"],
            mode=sd["mode"],
            energy_embed_dim=sd["energy_embed_dim"],
            elements=tuple(sd["elements"]),
            mu_min=sd["mu_min"],
            seed=sd["seed"],
        )
        return ConservModel(
            spec=spec,
            n_models=doc["n_models"],
            params=np.array(doc["params"], dtype=np.float64),
            energy_stats=tuple(doc["energy_stats"]),
            energy_scale=doc["energy_scale"],
            train_meta=doc["train_meta"],
        )
    raise ValidationError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(path, model):
    with open(path, "w") as fh:
        json.dump(model_to_doc(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return model_from_doc(json.load(fh))
