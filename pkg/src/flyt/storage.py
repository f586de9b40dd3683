"""Reading and writing score tables, pools, manifests and model checkpoints.

Formats:

* score tables: UTF-8 CSV, first header ``uid``, one column per score, values
  written with 17 significant digits;
* pools: binary, ``FLYTPOOL`` magic, a version byte, then a little-endian
  header (row count, feature width) and length-prefixed records;
* manifests: one uid per line in sampling order;
* model parameters, configs and reports: JSON.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import FormatError, InvalidInputError, VersionError
from .mixing import ScoreTable
from .model import DownstreamSet, Pool, ReferenceParams, ScoringParams
from .sampling import SampleManifest

POOL_MAGIC = b"FLYTPOOL"
POOL_VERSION = 1
PARAMS_FORMAT_VERSION = 1


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# score tables


def write_score_table(table: ScoreTable, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["uid"] + table.names)
        cols = [table.columns[n] for n in table.names]
        for i, uid in enumerate(table.uids):
            writer.writerow([uid] + [_fmt(c[i]) for c in cols])


def read_score_table(path) -> ScoreTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "uid":
            raise FormatError(f"{path}: first header must be 'uid', got {header[:1]}")
        names = header[1:]
        if len(set(names)) != len(names):
            raise FormatError(f"{path}: duplicate column names")
        uids, rows, seen = [], [], set()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            uid = row[0]
            if uid in seen:
                raise FormatError(f"{path}:{line_no}: duplicate uid {uid!r}")
            seen.add(uid)
            values = []
            for name, field in zip(names, row[1:]):
                try:
                    values.append(float(field))
                except ValueError:
                    raise FormatError(f"{path}:{line_no}: column {name!r}: cannot parse {field!r}") from None
            uids.append(uid)
            rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return ScoreTable(uids, {n: data[:, j] for j, n in enumerate(names)})


# ---------------------------------------------------------------------------
# pools


def write_pool(pool: Pool, path):
    m, d = len(pool), (pool.d_in if len(pool) else 0)
    with open(path, "wb") as fh:
        fh.write(POOL_MAGIC + bytes([POOL_VERSION]))
        fh.write(struct.pack("<QQ", m, d))
        for i, uid in enumerate(pool.uids):
            raw = uid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(pool.image[i].astype("<f8").tobytes())
            fh.write(pool.text[i].astype("<f8").tobytes())


def read_pool(path) -> Pool:
    data = Path(path).read_bytes()
    if data[: len(POOL_MAGIC)] != POOL_MAGIC:
        raise FormatError(f"{path}: not a pool file (bad magic)")
    pos = len(POOL_MAGIC)
    if len(data) < pos + 17:
        raise FormatError(f"{path}: truncated header")
    version = data[pos]
    if version != POOL_VERSION:
        raise VersionError(f"{path}: pool format version {version}, expected {POOL_VERSION}")
    m, d = struct.unpack_from("<QQ", data, pos + 1)
    pos += 17
    uids = []
    image = np.empty((m, d))
    text = np.empty((m, d))
    width = 8 * d
    for i in range(m):
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated at record {i}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n + 2 * width > len(data):
            raise FormatError(f"{path}: truncated at record {i}")
        try:
            uids.append(data[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: record {i}: uid is not valid UTF-8") from None
        pos += n
        image[i] = np.frombuffer(data, "<f8", d, pos)
        text[i] = np.frombuffer(data, "<f8", d, pos + width)
        pos += 2 * width
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after {m} records")
    try:
        return Pool(tuple(uids), image, text)
    except InvalidInputError as err:
        raise FormatError(f"{path}: {err}") from None


def write_ground_truth(uids, corrupt, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["uid", "corrupt"])
        for uid, flag in zip(uids, corrupt):
            writer.writerow([uid, int(bool(flag))])


def read_ground_truth(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["uid", "corrupt"]:
            raise FormatError(f"{path}: expected header uid,corrupt")
        uids, flags = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1] not in ("0", "1"):
                raise FormatError(f"{path}:{line_no}: malformed row {row}")
            uids.append(row[0])
            flags.append(row[1] == "1")
    return tuple(uids), np.array(flags, dtype=bool)


def write_downstream(ds: DownstreamSet, path):
    arrays = {"image": ds.image, "labels": ds.labels}
    for c, t in enumerate(ds.templates):
        arrays[f"templates_{c}"] = t
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_downstream(path) -> DownstreamSet:
    try:
        with np.load(path) as z:
            k = sum(1 for name in z.files if name.startswith("templates_"))
            return DownstreamSet(z["image"], z["labels"], tuple(z[f"templates_{c}"] for c in range(k)))
    except (OSError, KeyError, ValueError) as err:
        raise FormatError(f"{path}: {err}") from None


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: SampleManifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid in manifest.uids:
            fh.write(uid + "\n")


def read_manifest(path) -> SampleManifest:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return SampleManifest(tuple(lines))


def histogram_to_json(hist: dict) -> str:
    return json.dumps({str(k): v for k, v in sorted(hist.items())}, indent=2)


# ---------------------------------------------------------------------------
# parameters


def scoring_to_dict(params: ScoringParams) -> dict:
    if params.kind == "linear":
        weights = params.weights.tolist()
    else:
        weights = {name: arr.tolist() for name, arr in params.weights.items()}
    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "kind": params.kind,
        "input_names": list(params.input_names),
        "input_means": params.input_means.tolist(),
        "input_stds": params.input_stds.tolist(),
        "weights": weights,
        "bias": params.bias,
        "downstream_log_temperature": params.downstream_log_temperature,
    }


def _check_version(d: dict, what: str):
    if not isinstance(d, dict) or "format_version" not in d:
        raise FormatError(f"{what}: missing format_version")
    if d["format_version"] != PARAMS_FORMAT_VERSION:
        raise VersionError(f"{what}: format version {d['format_version']}, expected {PARAMS_FORMAT_VERSION}")


def scoring_from_dict(d: dict) -> ScoringParams:
    _check_version(d, "scoring params")
    try:
        return ScoringParams(d["kind"], d["input_names"], d["input_means"], d["input_stds"],
                             d["weights"], d["bias"], d["downstream_log_temperature"])
    except KeyError as err:
        raise FormatError(f"scoring params: missing field {err.args[0]!r}") from None
    except (InvalidInputError, TypeError, ValueError) as err:
        raise FormatError(f"scoring params: {err}") from None


def reference_to_dict(params: ReferenceParams) -> dict:
    def tower(layers):
        return [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in layers
        ]

    return {
        "format_version": PARAMS_FORMAT_VERSION,
        "image_layers": tower(params.image_layers),
        "text_layers": tower(params.text_layers),
        "log_temperature": params.log_temperature,
    }


def reference_from_dict(d: dict) -> ReferenceParams:
    _check_version(d, "reference params")

    def tower(layers):
        return [
            (np.array(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]),
             np.array(layer["bias"], dtype=np.float64))
            for layer in layers
        ]

    try:
        return ReferenceParams(tower(d["image_layers"]), tower(d["text_layers"]), d["log_temperature"])
    except KeyError as err:
        raise FormatError(f"reference params: missing field {err.args[0]!r}") from None
    except (InvalidInputError, TypeError, ValueError) as err:
        raise FormatError(f"reference params: {err}") from None


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None


def write_json(obj, path, meta: dict | None = None):
    if meta is not None:
        obj = dict(obj)
        obj["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def save_scoring(params: ScoringParams, path, meta: dict | None = None):
    write_json(scoring_to_dict(params), path, meta)


def load_scoring(path) -> ScoringParams:
    return scoring_from_dict(_read_json(path))


def save_reference(params: ReferenceParams, path, meta: dict | None = None):
    write_json(reference_to_dict(params), path, meta)


def load_reference(path) -> ReferenceParams:
    return reference_from_dict(_read_json(path))


def run_meta(config: dict) -> dict:
    return {"tool": "flyt", "version": __version__, "config": config}


def write_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_log(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise FormatError(f"{path}:{line_no}: {err.msg}") from None
    return records

