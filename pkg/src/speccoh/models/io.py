"""JSON model files: ``{"kind": ..., "dim": d, ...}``."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .constructions import ConvolutionModel, Kernel, LmcModel, SeparableModel
from .matern import CrossParams, MaternParams, MultiMaternModel

__all__ = ["model_from_dict", "model_to_dict", "load_model", "save_model", "ModelFileError"]


class ModelFileError(ValueError):
    pass


def _matern(d):
    return MaternParams(**{k: d[k] for k in ("sigma2", "nu", "a") if k in d})


def model_from_dict(spec: dict):
    """
    Build a model from its JSON form.

    Schemas::

        {"kind": "matern_mv", "dim": 2,
         "marginals": [{"sigma2": 1, "nu": 0.5, "a": 1}, ...],
         "cross": [{"i": 0, "j": 1, "rho": 0.5, "nu": 1, "a": 1}, ...]}
        {"kind": "lmc", "dim": 2, "B": [[...]], "latent": [{"sigma2", "nu", "a"}, ...]}
        {"kind": "separable", "dim": 2, "R": [[...]], "base": {"sigma2", "nu", "a"}}
        {"kind": "convolution", "dim": 2, "base": {...} | null, "white_level": 1.0,
         "kernels": [{"kind": "gaussian", "width": 0.3, "gain": 1}, ...]}
    """
    try:
        kind = spec["kind"]
        dim = int(spec["dim"])
        if kind == "matern_mv":
            cross = {(int(c["i"]), int(c["j"])): CrossParams(c["rho"], c["nu"], c["a"]) for c in spec.get("cross", [])}
            return MultiMaternModel(dim, tuple(_matern(m) for m in spec["marginals"]), cross)
        if kind == "lmc":
            return LmcModel(dim, np.asarray(spec["B"], dtype=float), tuple(_matern(m) for m in spec["latent"]))
        if kind == "separable":
            return SeparableModel(dim, np.asarray(spec["R"], dtype=float), _matern(spec.get("base", {})))
        if kind == "convolution":
            base = spec.get("base")
            return ConvolutionModel(
                dim,
                tuple(Kernel(**k) for k in spec["kernels"]),
                None if base is None else _matern(base),
                float(spec.get("white_level", 1.0)),
            )
    except (KeyError, TypeError) as exc:
        raise ModelFileError(f"malformed model description: {exc!r}") from None
    raise ModelFileError(f"unknown model kind {spec.get('kind')!r}")


def model_to_dict(model) -> dict:
    if isinstance(model, MultiMaternModel):
        return {
            "kind": "matern_mv",
            "dim": model.dim,
            "marginals": [asdict(m) for m in model.marginals],
            "cross": [{"i": i, "j": j, **asdict(c)} for (i, j), c in sorted(model.cross.items())],
        }
    if isinstance(model, LmcModel):
        return {"kind": "lmc", "dim": model.dim, "B": model.B.tolist(), "latent": [asdict(m) for m in model.latent]}
    if isinstance(model, SeparableModel):
        return {"kind": "separable", "dim": model.dim, "R": model.R.tolist(), "base": asdict(model.base)}
    if isinstance(model, ConvolutionModel):
        return {
            "kind": "convolution",
            "dim": model.dim,
            "base": None if model.base is None else asdict(model.base),
            "white_level": model.white_level,
            "kernels": [asdict(k) for k in model.kernels],
        }
    raise TypeError(f"cannot serialise {type(model).__name__}")


def load_model(path):
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"model file is not JSON: {exc}") from None
    return model_from_dict(spec)


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
