"""Checkpoints: a JSON manifest next to an ``.npz`` archive of named arrays."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .exceptions import CorruptCheckpoint, MissingDependency

FORMAT_VERSION = 1


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes in sorted key order."""
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(f"{k}|{a.dtype.str}|{a.shape}\n".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def module_hash(module: torch.nn.Module) -> str:
    return content_hash(state_arrays(module))


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".npz"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".npz")


def save_arrays(path, arrays: dict[str, np.ndarray], *, kind: str, hyperparameters: dict, seed: int | None,
                extra: dict | None = None) -> Path:
    manifest_path, npz_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(npz_path, **arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "hyperparameters": hyperparameters,
        "seed": seed,
        "sha256": content_hash(arrays),
        "weights": npz_path.name,
    }
    if extra:
        manifest.update(extra)
    manifest_path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return manifest_path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def read_manifest(path) -> dict:
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise MissingDependency(manifest_path.stem, manifest_path)
    return json.loads(manifest_path.read_text())


def load_arrays(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    manifest = read_manifest(path)
    manifest_path, _ = _paths(path)
    npz_path = manifest_path.parent / manifest["weights"]
    if not npz_path.exists():
        raise MissingDependency(npz_path.stem, npz_path)
    with np.load(npz_path) as z:
        arrays = {k: z[k] for k in z.files}
    if verify and content_hash(arrays) != manifest["sha256"]:
        raise CorruptCheckpoint(f"{npz_path}: content hash does not match manifest")
    return arrays, manifest


def load_module_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    ref = module.state_dict()
    state = {k: torch.from_numpy(np.array(v)).to(ref[k].dtype) for k, v in arrays.items()}
    module.load_state_dict(state)


# ---------------------------------------------------------------- estimators


def _plain_params(est) -> dict:
    return {k: v for k, v in est.get_params(deep=False).items()
            if isinstance(v, (int, float, str, bool, tuple, list, type(None)))}


def save_estimator(est, path) -> Path:
    """Persist a fitted SceneTransformer, ViewDiffusion or FieldDistiller."""
    from .diffusion import ViewDiffusion
    from .distill import FieldDistiller
    from .srt import SceneTransformer

    if isinstance(est, SceneTransformer):
        return save_arrays(path, state_arrays(est.model_), kind="srt", hyperparameters=est.hyperparameters(),
                           seed=est.random_state, extra={"params": _plain_params(est),
                                                         "steps_done": est.n_steps_done_})
    if isinstance(est, ViewDiffusion):
        return save_arrays(path, state_arrays(est.model_), kind="diffusion", hyperparameters=est.hyperparameters(),
                           seed=est.random_state, extra={"params": _plain_params(est),
                                                         "steps_done": est.n_steps_done_,
                                                         "srt_sha256": module_hash(est.srt.model_)})
    if isinstance(est, FieldDistiller):
        arrays = state_arrays(est.field_)
        arrays["context_images"] = est.context_.images
        arrays["context_intrinsics"] = est.context_.intrinsics
        return save_arrays(path, arrays, kind="field", hyperparameters=est.field_kwargs(), seed=est.random_state,
                           extra={"params": _plain_params(est)})
    raise TypeError(f"cannot checkpoint {type(est).__name__}")


def load_estimator(path, *, srt=None, diffusion=None, device="auto"):
    """Rebuild an estimator; diffusion checkpoints need their ``srt``, fields their ``diffusion``."""
    from .diffusion import ViewDiffusion, make_schedule
    from .distill import FieldDistiller, NeuralField
    from .srt import ImageSet, SceneTransformer

    arrays, manifest = load_arrays(path)
    kind = manifest["kind"]
    params = dict(manifest.get("params", {}))
    if "channel_mult" in params:
        params["channel_mult"] = tuple(params["channel_mult"])
    if kind == "srt":
        params["device"] = device
        est = SceneTransformer(**params)._init_model()
        load_module_state(est.model_, arrays)
        est.model_.eval()
        est.n_steps_done_ = manifest.get("steps_done", 0)
        return est
    if kind == "diffusion":
        if srt is None:
            raise MissingDependency("srt checkpoint")
        if module_hash(srt.model_) != manifest.get("srt_sha256"):
            raise CorruptCheckpoint("diffusion checkpoint was trained against a different srt model")
        params["device"] = device
        est = ViewDiffusion(srt=srt, **params)._init_model()
        load_module_state(est.model_, arrays)
        est.model_.eval()
        est.n_steps_done_ = manifest.get("steps_done", 0)
        return est
    if kind == "field":
        est = FieldDistiller(diffusion=diffusion, **params)
        est.context_ = ImageSet(arrays.pop("context_images"), intrinsics=arrays.pop("context_intrinsics"))
        est.field_ = NeuralField(**est.field_kwargs())
        load_module_state(est.field_, arrays)
        est.field_.eval()
        est.audit_ = []
        return est
    raise CorruptCheckpoint(f"unknown checkpoint kind {kind!r}")
