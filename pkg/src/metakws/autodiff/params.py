"""Named parameter sets and their checkpoint container.

Checkpoint layout (all text lines are UTF-8, ``\\n`` terminated)::

    METAKWS-PARAMS
    version 1
    count <n>
    <name>\\t<dtype>\\t<d0,d1,...>      (one line per tensor, in payload order)
    END
    <raw little-endian payloads, row-major, concatenated>
"""

import os
from pathlib import Path
from typing import Callable, Dict, Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = "METAKWS-PARAMS"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}

ParamSet = Dict[str, Tensor]


class CheckpointError(ValueError):
    pass


def as_params(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> ParamSet:
    return {k: Tensor(np.array(v), requires_grad=requires_grad, name=k) for k, v in arrays.items()}


def to_arrays(params: ParamSet) -> Dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def detach(params: ParamSet, requires_grad: bool = True) -> ParamSet:
    """Fresh leaf tensors holding copies of the current values."""
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


def map_params(fn: Callable[[Tensor], Tensor], params: ParamSet) -> ParamSet:
    return {k: fn(v) for k, v in params.items()}


def cast(params: ParamSet, dtype) -> ParamSet:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
            for k, v in params.items()}


def global_norm(params: ParamSet) -> float:
    return float(np.sqrt(sum(float(np.sum(v.data.astype(np.float64) ** 2)) for v in params.values())))


def save_params(params: ParamSet, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    lines = [MAGIC, f"version {FORMAT_VERSION}", f"count {len(params)}"]
    payloads = []
    for name, t in params.items():
        if any(ch in name for ch in "\t\n"):
            raise CheckpointError(f"invalid parameter name {name!r}")
        arr = np.asarray(t.data)
        code = {np.float32: "f4", np.float64: "f8"}.get(arr.dtype.type)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{code}\t{shape}")
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for p in payloads:
            fh.write(p)
    os.replace(tmp, path)
    return path


def load_params(path: Union[str, os.PathLike], requires_grad: bool = True) -> ParamSet:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    lines = raw[:end].decode("utf-8").split("\n")
    if lines[1] != f"version {FORMAT_VERSION}":
        raise CheckpointError(f"{path}: unsupported {lines[1]!r}")
    count = int(lines[2].split()[1])
    entries = lines[3:]
    if len(entries) != count:
        raise CheckpointError(f"{path}: header lists {len(entries)} tensors, expected {count}")
    offset = end + len(b"\nEND\n")
    params: ParamSet = {}
    for entry in entries:
        name, code, shape_txt = entry.split("\t")
        shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(dt.newbyteorder("=")), requires_grad=requires_grad, name=name)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params
