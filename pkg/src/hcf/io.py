"""Model files and delimited outputs.

Model container layout (all integers little-endian)::

    b"HCFMODEL\\n"                 9-byte magic
    uint64                         header length H in bytes
    H bytes                        UTF-8 JSON header
    float64[...]                   parameter arrays, row-major, back to back

The header holds ``format`` ("hcf-model"), ``version`` (1), ``kind``
("hcf", "mf_bpr", "mf_implicit" or "historical"), ``arrays`` (a list of
``{"name", "shape"}`` in storage order) and ``config`` (hyperparameters,
seed, training window and free-form metadata).  Array ``k`` starts right
after array ``k-1`` and holds ``prod(shape)`` doubles.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .baselines import HistoricalModel, MfModel
from .errors import DataError
from .model import ConvBlock, HcfModel

MAGIC = b"HCFMODEL\n"
VERSION = 1


def _arrays(model):
    if isinstance(model, HistoricalModel):
        coo = model.counts.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return {"shape": np.array(coo.shape, dtype=np.float64),
                "rows": coo.row[order].astype(np.float64),
                "cols": coo.col[order].astype(np.float64),
                "counts": coo.data[order].astype(np.float64)}
    return model.params()


def save_model(model, path, meta=None):
    arrays = _arrays(model)
    header = {"format": "hcf-model", "version": VERSION, "kind": model.kind,
              "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
              "config": {**model.config(), **(meta or {})}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_container(path):
    """Header dict and ``{name: array}`` of a model file."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a model file")
    (size,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + size].decode("utf-8"))
    offset = start + size
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                             offset=offset).reshape(entry["shape"]).copy()
        offset += 8 * count
    return header, arrays


def load_model(path):
    header, a = read_container(path)
    kind, cfg = header["kind"], header["config"]
    if kind == "hcf":
        blocks = []
        for side in ("user", "item"):
            layers = len([k for k in a if k.startswith(f"{side}_block.w")])
            blocks.append(ConvBlock([a[f"{side}_block.w{k}"] for k in range(layers)],
                                    [a[f"{side}_block.b{k}"] for k in range(layers)]))
        model = HcfModel(a["user_emb"], a["item_emb"], *blocks, cfg["n"], cfg.get("seed"),
                         cfg.get("stop_history_grad", False))
    elif kind in ("mf_bpr", "mf_implicit"):
        model = MfModel(a["user_factors"], a["item_factors"], cfg["variant"], cfg["l2"],
                        cfg["alpha_conf"], cfg.get("seed"))
    elif kind == "historical":
        shape = tuple(int(x) for x in a["shape"])
        counts = sp.csr_matrix((a["counts"], (a["rows"].astype(np.int64),
                                              a["cols"].astype(np.int64))), shape=shape)
        model = HistoricalModel(counts)
    else:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    return model, header


def fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, (np.ndarray, tuple)):
        return list(x)
    raise TypeError(f"not JSON serializable: {type(x)}")
