"""On-disk formats: datasets, feature matrices, checkpoints and forests.

All numeric payloads are little-endian. Readers validate everything before
returning, so a failed load never yields a partial object.

Feature file (``.aecf``)::

    magic  b"AECF" | version u32 | count u64 | dim u32 | count*dim f32

Checkpoint (``.aeck``)::

    magic  b"AECK" | version u32 | epoch u32 | adam_step u64 | digest 16B
    config_len u32 | config JSON | n_sections u32
    per section: name_len u16 | name | offset u64 | length u64 | ndim u8 | dims u32*ndim
    blob: f32, offsets and lengths counted in elements

Forest (``.aerf``)::

    magic  b"AERF" | version u32 | n_classes u32 | n_features u32 | n_trees u32
    per tree: n_nodes u32 | feature i32*n | threshold f64*n | left i32*n
              | right i32*n | value f64*(n*n_classes)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import UNLABELED, Dataset, DatasetMeta
from .errors import IncompatibleCheckpoint, IntegrityError, UnsupportedFeatureFile
from .forest import DecisionTree, ForestModel
from .network import ModelConfig, check_params
from .training import AdamState

FEATURE_MAGIC = b"AECF"
CHECKPOINT_MAGIC = b"AECK"
FOREST_MAGIC = b"AERF"
FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.txt"
MANIFEST_TAG = "aecfe-manifest"
FEATURE_FILE_NAME = "features.aecf"
IMAGE_DIR = "images"

_FEATURE_HEADER = struct.Struct("<4sIQI")
_CKPT_HEADER = struct.Struct("<4sIIQ16sI")
_FOREST_HEADER = struct.Struct("<4sIIII")


# --- feature matrices -------------------------------------------------------

def write_features(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_feature_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_FEATURE_HEADER.size)
    if len(raw) < _FEATURE_HEADER.size:
        raise UnsupportedFeatureFile(f"unsupported feature file: {path} is shorter than its header")
    magic, version, count, dim = _FEATURE_HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise UnsupportedFeatureFile(f"unsupported feature file: bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise UnsupportedFeatureFile(f"unsupported feature file: version {version} in {path}")
    return {"format": "feature-matrix", "version": version, "count": count, "dim": dim}


def read_features(path) -> np.ndarray:
    header = read_feature_header(path)
    payload = Path(path).read_bytes()[_FEATURE_HEADER.size:]
    expected = header["count"] * header["dim"] * 4
    if len(payload) != expected:
        raise IntegrityError(
            f"feature payload of {path}: expected {expected} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(header["count"], header["dim"])
    return arr.astype(np.float32)


# --- datasets ---------------------------------------------------------------

def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Manifest + feature file + one lossless PNG per record."""
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    write_features(out / FEATURE_FILE_NAME, ds.features)
    m = ds.meta
    lines = [
        f"{MANIFEST_TAG} {FORMAT_VERSION}",
        f"feature_dim={m.feature_dim}",
        f"image_side={m.image_side}",
        f"num_classes={m.num_classes}",
        f"num_domains={m.num_domains}",
        f"seed={m.seed}",
        f"generator_version={m.generator_version}",
        f"features={FEATURE_FILE_NAME}",
        f"records={len(ds)}",
        "# record_id domain label feature_row image_path",
    ]
    for row in range(len(ds)):
        rid = int(ds.record_ids[row])
        rel = f"{IMAGE_DIR}/{rid:06d}.png"
        (out / rel).write_bytes(_png_bytes(ds.images[row]))
        label = int(ds.labels[row])
        lines.append(f"{rid} {int(ds.domains[row])} {'-' if label == UNLABELED else label} {row} {rel}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return out


def _parse_manifest(path: Path):
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise IntegrityError(f"manifest integrity: {path} not found") from None
    if not lines or lines[0].split() != [MANIFEST_TAG, str(FORMAT_VERSION)]:
        raise IntegrityError(f"manifest integrity: {path} has an unknown header")
    header, records = {}, []
    for n, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        if "=" in line and not records:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise IntegrityError(f"manifest integrity: malformed record on line {n}")
        records.append(parts)
    required = ("feature_dim", "image_side", "num_classes", "num_domains", "seed",
                "generator_version", "features", "records")
    missing = [k for k in required if k not in header]
    if missing:
        raise IntegrityError(f"manifest integrity: missing header keys {missing}")
    if int(header["records"]) != len(records):
        raise IntegrityError(
            f"manifest integrity: header declares {header['records']} records, found {len(records)}")
    return header, records


def read_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    header, records = _parse_manifest(root / MANIFEST_NAME)
    meta = DatasetMeta(int(header["feature_dim"]), int(header["image_side"]), int(header["num_classes"]),
                       int(header["num_domains"]), int(header["seed"]), header["generator_version"])
    feat_path = root / header["features"]
    if not feat_path.exists():
        raise IntegrityError(f"manifest integrity: feature file {feat_path} missing")
    feats = read_features(feat_path)
    if feats.shape[1] != meta.feature_dim and len(feats):
        raise IntegrityError("manifest integrity: feature file dim differs from manifest feature_dim")
    n = len(records)
    side = meta.image_side
    features = np.zeros((n, meta.feature_dim), dtype=np.float32)
    images = np.zeros((n, side, side, 3), dtype=np.uint8)
    ids, doms, labs = np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64)
    for i, (rid, dom, lab, row, rel) in enumerate(records):
        row = int(row)
        if not 0 <= row < len(feats):
            raise IntegrityError(f"manifest integrity: feature row {row} out of bounds for record {rid}")
        img_path = root / rel
        if not img_path.exists():
            raise IntegrityError(f"manifest integrity: missing image {rel}")
        with Image.open(img_path) as im:
            img = np.asarray(im.convert("RGB"))
        if img.shape != (side, side, 3):
            raise IntegrityError(f"manifest integrity: image {rel} has shape {img.shape}")
        features[i] = feats[row]
        images[i] = img
        ids[i], doms[i] = int(rid), int(dom)
        labs[i] = UNLABELED if lab == "-" else int(lab)
    try:
        return Dataset(features, images, doms, labs, ids, meta)
    except ValueError as exc:
        raise IntegrityError(f"manifest integrity: {exc}") from None


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    opt_state: AdamState
    epoch: int


def _sections(params: dict, state: AdamState):
    for name, arr in params.items():
        yield f"param/{name}", arr
    for name, arr in state.m.items():
        yield f"adam_m/{name}", arr
    for name, arr in state.v.items():
        yield f"adam_v/{name}", arr


def save_checkpoint(path, params: dict, opt_state: AdamState, epoch: int, config: ModelConfig) -> None:
    check_params(params, config)
    table, blobs, offset = [], [], 0
    for name, arr in _sections(params, opt_state):
        a = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"refusing to save non-finite tensor {name}")
        enc = name.encode()
        table.append(struct.pack("<H", len(enc)) + enc + struct.pack("<QQB", offset, a.size, a.ndim)
                     + struct.pack(f"<{a.ndim}I", *a.shape))
        blobs.append(a.tobytes())
        offset += a.size
    cfg_bytes = config.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, epoch, opt_state.t,
                                   config.digest(), len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(table)))
        fh.writelines(table)
        fh.writelines(blobs)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic, version, epoch, step, digest, cfg_len = r.unpack(_CKPT_HEADER.format, "checkpoint header")
    if magic != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    cfg_text = r.take(cfg_len, "config section").decode()
    (n_sections,) = r.unpack("<I", "section count")
    table = []
    for _ in range(n_sections):
        (name_len,) = r.unpack("<H", "section table")
        name = r.take(name_len, "section table").decode()
        offset, length, ndim = r.unpack("<QQB", f"section table entry {name}")
        shape = r.unpack(f"<{ndim}I", f"section table entry {name}")
        table.append((name, offset, length, tuple(shape)))
    return {"format": "checkpoint", "version": version, "epoch": epoch, "adam_step": step,
            "digest": digest.hex(), "config": cfg_text, "sections": table, "blob_start": r.pos,
            "size": len(data)}


def load_checkpoint(path, expected_config: ModelConfig = None) -> Checkpoint:
    header = read_checkpoint_header(path)
    config = ModelConfig.from_json(header["config"])
    if config.digest().hex() != header["digest"]:
        raise IntegrityError(f"{path}: config section does not match its digest")
    if expected_config is not None and expected_config.digest() != config.digest():
        raise IncompatibleCheckpoint(f"incompatible checkpoint: {path} was written for a different model shape")
    blob = Path(path).read_bytes()[header["blob_start"]:]
    if len(blob) % 4:
        raise IntegrityError(f"{path}: blob length {len(blob)} is not a multiple of 4")
    n_elems = len(blob) // 4
    values = np.frombuffer(blob, dtype="<f4")
    spans = sorted((off, off + length, name) for name, off, length, _ in header["sections"])
    end = 0
    for start, stop, name in spans:
        if start < end:
            raise IntegrityError(f"{path}: section {name} overlaps the previous section")
        if stop > n_elems:
            raise IntegrityError(f"{path}: section {name} extends past the end of the blob")
        end = stop
    if end != n_elems:
        raise IntegrityError(f"{path}: {n_elems - end} trailing elements after the last section")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, off, length, shape in header["sections"]:
        kind, _, pname = name.partition("/")
        if kind not in groups:
            raise IntegrityError(f"{path}: unknown section {name}")
        if int(np.prod(shape)) != length:
            raise IntegrityError(f"{path}: section {name} shape {shape} disagrees with length {length}")
        groups[kind][pname] = values[off:off + length].reshape(shape).astype(np.float32)
    try:
        check_params(groups["param"], config)
        check_params(groups["adam_m"], config)
        check_params(groups["adam_v"], config)
    except Exception as exc:
        raise IntegrityError(f"{path}: section table does not match the model: {exc}") from None
    state = AdamState(groups["adam_m"], groups["adam_v"], header["adam_step"])
    return Checkpoint(config, groups["param"], state, header["epoch"])


# --- forests ----------------------------------------------------------------

def save_forest(path, model: ForestModel) -> None:
    c = model.n_classes
    with open(path, "wb") as fh:
        fh.write(_FOREST_HEADER.pack(FOREST_MAGIC, FORMAT_VERSION, c, model.n_features, len(model.trees)))
        for t in model.trees:
            fh.write(struct.pack("<I", t.n_nodes))
            fh.write(t.feature.astype("<i4").tobytes())
            fh.write(t.threshold.astype("<f8").tobytes())
            fh.write(t.left.astype("<i4").tobytes())
            fh.write(t.right.astype("<i4").tobytes())
            fh.write(t.value.astype("<f8").tobytes())


def read_forest_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_FOREST_HEADER.size)
    if len(raw) < _FOREST_HEADER.size:
        raise IntegrityError(f"{path}: truncated forest header")
    magic, version, n_classes, n_features, n_trees = _FOREST_HEADER.unpack(raw)
    if magic != FOREST_MAGIC:
        raise IntegrityError(f"{path}: not a forest file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported forest version {version}")
    return {"format": "forest", "version": version, "n_classes": n_classes,
            "n_features": n_features, "n_trees": n_trees}


def load_forest(path) -> ForestModel:
    header = read_forest_header(path)
    c = header["n_classes"]
    r = _Reader(Path(path).read_bytes(), path)
    r.pos = _FOREST_HEADER.size
    trees = []
    for i in range(header["n_trees"]):
        (n,) = r.unpack("<I", f"tree {i} node count")
        arrays = {}
        for key, dt, count in (("feature", "<i4", n), ("threshold", "<f8", n), ("left", "<i4", n),
                               ("right", "<i4", n), ("value", "<f8", n * c)):
            raw = r.take(count * np.dtype(dt).itemsize, f"tree {i} {key}")
            arrays[key] = np.frombuffer(raw, dtype=dt)
        internal = arrays["feature"] >= 0
        kids = np.concatenate([arrays["left"][internal], arrays["right"][internal]])
        if kids.size and (kids.min() <= 0 or kids.max() >= n):
            raise IntegrityError(f"{path}: tree {i} has child indices out of range")
        trees.append(DecisionTree(
            feature=arrays["feature"].astype(np.int64), threshold=arrays["threshold"].astype(np.float64),
            left=arrays["left"].astype(np.int64), right=arrays["right"].astype(np.int64),
            value=arrays["value"].astype(np.float64).reshape(n, c)))
    if r.pos != len(r.data):
        raise IntegrityError(f"{path}: trailing bytes after the last tree")
    return ForestModel(tuple(trees), c, header["n_features"])


def inspect(path) -> dict:
    """Header/metadata of any artifact: dataset dir, feature file, checkpoint or forest."""
    p = Path(path)
    if p.is_dir():
        header, records = _parse_manifest(p / MANIFEST_NAME)
        return {"format": "dataset", **header, "records": len(records)}
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == FEATURE_MAGIC:
        return read_feature_header(p)
    if magic == CHECKPOINT_MAGIC:
        h = read_checkpoint_header(p)
        return {k: h[k] for k in ("format", "version", "epoch", "adam_step", "digest", "config")} | {
            "sections": len(h["sections"]), "size": h["size"]}
    if magic == FOREST_MAGIC:
        return read_forest_header(p)
    if p.name == MANIFEST_NAME:
        return inspect(p.parent)
    raise IntegrityError(f"{path}: unrecognized artifact (magic {magic!r})")
