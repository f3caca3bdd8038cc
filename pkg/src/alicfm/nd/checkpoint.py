"""Checkpoint container for networks, optimiser buffers and loose arrays.

A checkpoint is a zip archive of ``.npy`` members (the NumPy array format,
raw little-endian float64 for weights) plus one ``meta.json`` member::

    meta.json            {"format": "alicfm-checkpoint", "version": 1,
                          "nets": {name: {"widths": [...], "activation": ...,
                                          "output_activation": ..., "n_arrays": k}},
                          "meta": {...free-form JSON...}}
    nets/<name>/<k>.npy  k-th parameter of net <name> (W0, b0, W1, b1, ...)
    arrays/<key>.npy     any extra array (optimiser moments, rng state, ...)

Members are written with a fixed timestamp so identical content gives
identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Mlp

FORMAT = "alicfm-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    nets: dict[str, Mlp] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(a, order="C"), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(
    path: str | Path,
    nets: dict[str, Mlp],
    arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "nets": {}, "meta": meta or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(nets):
            net = nets[name]
            header["nets"][name] = {
                "widths": net.widths,
                "activation": net.activation,
                "output_activation": net.output_activation,
                "n_arrays": len(net.params),
            }
            for k, p in enumerate(net.params):
                _write_member(zf, f"nets/{name}/{k}.npy", _npy_bytes(p.data))
        for key in sorted(arrays or {}):
            _write_member(zf, f"arrays/{key}.npy", _npy_bytes(np.asarray(arrays[key])))
        _write_member(zf, "meta.json", json.dumps(header, sort_keys=True, indent=1).encode())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("meta.json"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not an {FORMAT} file")
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")

        def read(name: str) -> np.ndarray:
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        ckpt = Checkpoint(meta=header.get("meta", {}))
        for name, spec in header["nets"].items():
            net = Mlp(spec["widths"], spec["activation"], spec["output_activation"], rng=0)
            net.load_state([read(f"nets/{name}/{k}.npy") for k in range(spec["n_arrays"])])
            ckpt.nets[name] = net
        for member in zf.namelist():
            if member.startswith("arrays/") and member.endswith(".npy"):
                ckpt.arrays[member[len("arrays/") : -len(".npy")]] = read(member)
    return ckpt
