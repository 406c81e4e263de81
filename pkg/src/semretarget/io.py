"""File formats: characters, motions, character pairs, checkpoints and configs.

JSON is the primary format and round-trips exactly (Python writes floats
with shortest round-trip repr). Motions also have a little-endian binary
variant: ``<i4 T, <i4 N, <f4 fps`` followed by ``rot6d`` (T*N*6) and
``root_pos`` (T*3) as ``<f4``.
"""
from __future__ import annotations

import json
import os
import struct
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .character import Character
from .errors import SchemaViolation
from .skeleton import Motion, Skeleton
from .skinning import SkinnedMesh

FORMAT_VERSION = 1
CHECKPOINT_FORMAT = "semretarget-checkpoint"
_MOTION_HEADER = struct.Struct("<iif")


def _schema(name: str) -> dict:
    text = resources.files("semretarget").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc


def _validate(doc, schema: str, where) -> None:
    try:
        jsonschema.validate(doc, _schema(schema))
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"{where}: {loc}: {exc.message}") from None


def _write_json(doc, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


# ---------------------------------------------------------------- characters

def character_to_dict(char: Character) -> dict:
    skel, mesh = char.skeleton, char.mesh
    weights = []
    for row in mesh.weights:
        nz = np.flatnonzero(row)
        weights.append([[int(j), float(row[j])] for j in nz])
    return {
        "format_version": FORMAT_VERSION,
        "name": char.name,
        "height": float(skel.height),
        "joints": [{"name": nm, "parent": int(p), "offset": [float(x) for x in off]}
                   for nm, p, off in zip(skel.joint_names, skel.parent, skel.offsets)],
        "mesh": {
            "vertices": mesh.vertices_bind.tolist(),
            "faces": mesh.faces.tolist(),
            "weights": weights,
        },
        "limb_chains": [list(c) for c in char.limb_chains],
    }


def character_from_dict(doc: dict, where="<character>") -> Character:
    _validate(doc, "character", where)
    joints = doc["joints"]
    n = len(joints)
    names = [j["name"] for j in joints]
    for i, j in enumerate(joints):
        if j["parent"] >= n or j["parent"] == i:
            raise SchemaViolation(f"{where}: joint {j['name']!r} has unknown parent index {j['parent']}")
    try:
        skel = Skeleton(names, [j["parent"] for j in joints], [j["offset"] for j in joints],
                        doc["height"])
    except ValueError as exc:
        raise SchemaViolation(f"{where}: skeleton: {exc}") from None
    m = doc["mesh"]
    nv = len(m["vertices"])
    if len(m["weights"]) != nv:
        raise SchemaViolation(f"{where}: {len(m['weights'])} weight rows for {nv} vertices")
    W = np.zeros((nv, n))
    for v, row in enumerate(m["weights"]):
        for j, w in row:
            if j >= n:
                raise SchemaViolation(f"{where}: vertex {v} weights unknown joint {j}")
            W[v, j] += w
        total = W[v].sum()
        if abs(total - 1.0) > 1e-5:
            raise SchemaViolation(f"{where}: weights of vertex {v} sum to {total:.6g}, not 1")
    faces = np.asarray(m["faces"], dtype=np.int64).reshape(-1, 3)
    if len(faces) and faces.max() >= nv:
        raise SchemaViolation(f"{where}: face index {faces.max()} out of range for {nv} vertices")
    for chain in doc["limb_chains"]:
        for nm in chain:
            if nm not in names:
                raise SchemaViolation(f"{where}: limb chain names unknown joint {nm!r}")
    try:
        mesh = SkinnedMesh.from_skeleton(skel, np.asarray(m["vertices"], dtype=np.float64).reshape(-1, 3),
                                         faces, W)
    except ValueError as exc:
        raise SchemaViolation(f"{where}: mesh: {exc}") from None
    return Character(doc["name"], skel, mesh, [list(c) for c in doc["limb_chains"]])


def load_character(path) -> Character:
    return character_from_dict(_read_json(path), where=str(path))


def save_character(char: Character, path) -> None:
    _write_json(character_to_dict(char), path)


# ---------------------------------------------------------------- motions

def motion_to_dict(motion: Motion, character: str = "") -> dict:
    m = motion.numpy()
    return {"format_version": FORMAT_VERSION, "character": character, "fps": float(m.fps),
            "frames": m.frames, "rot6d": m.rot6d.tolist(), "root_pos": m.root_pos.tolist()}


def motion_from_dict(doc: dict, where="<motion>") -> Motion:
    _validate(doc, "motion", where)
    try:
        rot6d = np.asarray(doc["rot6d"], dtype=np.float64)
        root = np.asarray(doc["root_pos"], dtype=np.float64)
    except ValueError:
        raise SchemaViolation(f"{where}: rot6d rows have inconsistent joint counts") from None
    if rot6d.ndim != 3 or rot6d.shape[0] != doc["frames"] or root.shape != (doc["frames"], 3):
        raise SchemaViolation(f"{where}: frame count {doc['frames']} does not match the arrays")
    if not (np.all(np.isfinite(rot6d)) and np.all(np.isfinite(root))):
        raise SchemaViolation(f"{where}: non-finite values")
    return Motion(rot6d, root, float(doc["fps"]))


def save_motion(motion: Motion, path, character: str = "") -> None:
    path = Path(path)
    if path.suffix == ".bin":
        m = motion.numpy()
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(_MOTION_HEADER.pack(m.frames, m.n_joints, m.fps))
            fh.write(np.ascontiguousarray(m.rot6d, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(m.root_pos, dtype="<f4").tobytes())
        tmp.replace(path)
    else:
        _write_json(motion_to_dict(motion, character), path)


def load_motion(path) -> Motion:
    path = Path(path)
    if path.suffix != ".bin":
        return motion_from_dict(_read_json(path), where=str(path))
    raw = path.read_bytes()
    if len(raw) < _MOTION_HEADER.size:
        raise SchemaViolation(f"{path}: truncated header")
    t, n, fps = _MOTION_HEADER.unpack_from(raw)
    vals = np.frombuffer(raw, dtype="<f4", offset=_MOTION_HEADER.size)
    if t < 1 or n < 1 or vals.size != t * n * 6 + t * 3:
        raise SchemaViolation(f"{path}: payload does not match header dims T={t}, N={n}")
    rot6d = vals[:t * n * 6].reshape(t, n, 6).astype(np.float64)
    root = vals[t * n * 6:].reshape(t, 3).astype(np.float64)
    if not (np.all(np.isfinite(rot6d)) and np.all(np.isfinite(root))):
        raise SchemaViolation(f"{path}: non-finite values")
    return Motion(rot6d, root, float(fps))


def motion_character_name(path) -> str:
    path = Path(path)
    return "" if path.suffix == ".bin" else str(_read_json(path).get("character", ""))


# ---------------------------------------------------------------- pairs

def load_pair(path):
    """``(source Character, target Character, checkpoint_id)``; paths resolve relative to the file."""
    path = Path(path)
    doc = _read_json(path)
    _validate(doc, "pair", str(path))
    base = path.parent
    src = load_character(base / doc["source"])
    tgt = load_character(base / doc["target"])
    return src, tgt, doc.get("checkpoint_id")


def save_pair(path, source_path, target_path, checkpoint_id=None) -> None:
    base = Path(path).resolve().parent
    _write_json({"source": os.path.relpath(Path(source_path).resolve(), base),
                 "target": os.path.relpath(Path(target_path).resolve(), base),
                 "checkpoint_id": checkpoint_id}, path)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, discriminator=None, step: int = 0, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": FORMAT_VERSION,
        "hparams": dict(model.hparams),
        "model": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "discriminator": (None if discriminator is None else
                          {k: v.detach().clone() for k, v in discriminator.state_dict().items()}),
        "step": int(step),
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(RetargetModel, Discriminator | None, payload)``."""
    from .network import Discriminator, RetargetModel

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaViolation(f"{path}: not a checkpoint file")
    if payload.get("format_version") != FORMAT_VERSION:
        raise SchemaViolation(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    model = RetargetModel(**payload["hparams"])
    model.load_state_dict(payload["model"])
    disc = None
    if payload.get("discriminator") is not None:
        disc = Discriminator()
        disc.load_state_dict(payload["discriminator"])
    return model, disc, payload


# ---------------------------------------------------------------- configs

def load_config(path) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        try:
            return tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise SchemaViolation(f"{path}: {exc}") from None
    return _read_json(path)
