"""Versioned .npz checkpoints for the encoder, the SAE and resumable training state."""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def exists(path) -> bool:
    return Path(path).exists()


def _write_npz(path, arrays: dict) -> None:
    """np.load-compatible archive with fixed member timestamps, so equal content gives equal bytes."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)
    os.replace(tmp, path)


def save_encoder(path, params) -> None:
    arrays = {f"p.{k}": v for k, v in params.arrays.items()}
    arrays["version"] = np.int64(CHECKPOINT_VERSION)
    arrays["kind"] = np.array("encoder")
    arrays["config"] = np.array(json.dumps(asdict(params.config), sort_keys=True))
    arrays["n_items"] = np.int64(params.n_items)
    _write_npz(path, arrays)


def load_encoder(path):
    from .encoder import EncoderConfig, EncoderParams

    with np.load(path, allow_pickle=False) as z:
        _check(z, "encoder")
        cfg = EncoderConfig(**json.loads(str(z["config"])))
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("p.")}
        return EncoderParams(cfg, int(z["n_items"]), arrays)


def save_sae(path, params) -> None:
    _write_npz(
        path,
        {
            "version": np.int64(CHECKPOINT_VERSION),
            "kind": np.array("sae"),
            "config": np.array(json.dumps(asdict(params.config), sort_keys=True)),
            "W_enc": params.W_enc,
            "W_dec": params.W_dec,
            "b_pre": params.b_pre,
        },
    )


def load_sae(path):
    from .sae import SaeConfig, SaeParams

    with np.load(path, allow_pickle=False) as z:
        _check(z, "sae")
        cfg = SaeConfig(**json.loads(str(z["config"])))
        return SaeParams(cfg, z["W_enc"], z["W_dec"], z["b_pre"])


def _check(z, kind: str) -> None:
    if str(z["kind"]) != kind:
        raise ValueError(f"expected a {kind} checkpoint, found {str(z['kind'])}")
    if int(z["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(z['version'])}")


def save_train_state(path, *, params, opt, rng, best, best_score, since_best, epoch, history) -> None:
    arrays = {f"p.{k}": v for k, v in params.items()}
    arrays.update({f"o.{k}": v for k, v in opt.items()})
    arrays.update({f"b.{k}": v for k, v in best.items()})
    arrays["meta"] = np.array(
        json.dumps(
            {
                "rng": rng,
                "best_score": best_score,
                "since_best": since_best,
                "epoch": epoch,
                "history": asdict(history),
            }
        )
    )
    _write_npz(path, arrays)


def load_train_state(path) -> dict:
    from .encoder import TrainingHistory

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        return {
            "params": {k[2:]: z[k] for k in z.files if k.startswith("p.")},
            "opt": {k[2:]: z[k] for k in z.files if k.startswith("o.")},
            "best": {k[2:]: z[k] for k in z.files if k.startswith("b.")},
            "rng": meta["rng"],
            "best_score": meta["best_score"],
            "since_best": meta["since_best"],
            "epoch": meta["epoch"],
            "history": TrainingHistory(**meta["history"]),
        }


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]
