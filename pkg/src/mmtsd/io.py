"""On-disk formats: datasets, RTTM, checkpoints.

Dataset directory layout::

    manifest.tsv            sample_id, features, activity, speaker_ids, duration_s, split
    features/<id>.f32       b"MMDS1" + <i4 T, <i4 d_a  + T*d_a little-endian float32
    activity/<id>.u8        b"MMDS1" + <i4 S, <i4 T    + S*T uint8

Checkpoint file::

    b"MMTSD1" + <i4 version, <i4 D, <i4 encoder layers, <i4 decoder layers
    then, until EOF, one block per tensor:
    <i4 name length, UTF-8 name, <i4 rank, rank * <i4 dims, little-endian float64 data
"""

from __future__ import annotations

import os
import shutil
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ParseError
from .metrics import Segment
from .worldsim import ConversationSample

DATASET_MAGIC = b"MMDS1"
CKPT_MAGIC = b"MMTSD1"
CKPT_VERSION = 1
MANIFEST_HEADER = ("sample_id", "features", "activity", "speaker_ids", "duration_s", "split")


# --------------------------------------------------------------------------- dataset

def _write_matrix(path: Path, arr: np.ndarray, dtype: str):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<ii", *arr.shape))
        f.write(arr.tobytes())


def _read_matrix(path: Path, dtype: str) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    head = len(DATASET_MAGIC) + 8
    if len(blob) < head or blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad or missing MMDS1 header")
    rows, cols = struct.unpack("<ii", blob[len(DATASET_MAGIC):head])
    itemsize = np.dtype(dtype).itemsize
    if rows < 0 or cols < 0 or len(blob) - head != rows * cols * itemsize:
        raise FormatError(
            f"{path}: header declares {rows}x{cols} but payload has {len(blob) - head} bytes")
    return np.frombuffer(blob, dtype=dtype, offset=head).reshape(rows, cols).copy()


@dataclass
class ManifestRecord:
    sample_id: str
    features: str
    activity: str
    speaker_ids: list[int]
    duration_s: float
    split: str


def save_dataset(samples, directory, frame_rate: float, extra_files: dict[str, str] | None = None):
    """Write samples to ``directory`` via a temporary sibling and an atomic rename."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / "features").mkdir()
        (tmp / "activity").mkdir()
        lines = ["\t".join(MANIFEST_HEADER)]
        for s in samples:
            feat_rel = f"features/{s.sample_id}.f32"
            act_rel = f"activity/{s.sample_id}.u8"
            _write_matrix(tmp / feat_rel, s.features, "<f4")
            _write_matrix(tmp / act_rel, s.activity, "u1")
            duration = s.features.shape[0] / frame_rate
            lines.append("\t".join([s.sample_id, feat_rel, act_rel,
                                    ",".join(str(i) for i in s.speaker_ids),
                                    f"{duration:.3f}", s.split]))
        (tmp / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        for name, content in (extra_files or {}).items():
            (tmp / name).write_text(content, encoding="utf-8")
        os.chmod(tmp, 0o755)
        if directory.exists():
            shutil.rmtree(directory)
        os.rename(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_manifest(directory) -> list[ManifestRecord]:
    path = Path(directory) / "manifest.tsv"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError:
        raise FormatError(f"{path}: missing manifest") from None
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise FormatError(f"{path}: bad header")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
        try:
            ids = [int(x) for x in parts[3].split(",") if x]
            records.append(ManifestRecord(parts[0], parts[1], parts[2], ids, float(parts[4]), parts[5]))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed record") from None
    return records


def load_dataset(directory, splits=None) -> tuple[list[ManifestRecord], list[ConversationSample]]:
    directory = Path(directory)
    records = read_manifest(directory)
    samples = []
    for rec in records:
        if splits is not None and rec.split not in splits:
            continue
        feats = _read_matrix(directory / rec.features, "<f4")
        act = _read_matrix(directory / rec.activity, "u1")
        if act.shape != (len(rec.speaker_ids), feats.shape[0]):
            raise FormatError(
                f"{directory / rec.activity}: shape {act.shape} does not match "
                f"{len(rec.speaker_ids)} speakers x {feats.shape[0]} frames")
        samples.append(ConversationSample(rec.sample_id, feats, act, rec.speaker_ids, split=rec.split))
    return records, samples


# --------------------------------------------------------------------------- RTTM

def format_rttm(segments, file_id: str) -> str:
    return "".join(
        f"SPEAKER {file_id} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>\n"
        for s in segments)


def write_rttm(segments, file_id: str, path):
    Path(path).write_text(format_rttm(segments, file_id), encoding="utf-8")


def parse_rttm(text: str, source: str = "<rttm>", file_id: str | None = None) -> list[Segment]:
    segments = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) != 10:
            raise ParseError(f"{source}:{lineno}: expected 10 fields, got {len(fields)}")
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise ParseError(f"{source}:{lineno}: onset/duration are not numbers") from None
        if dur <= 0:
            raise ParseError(f"{source}:{lineno}: non-positive duration")
        if file_id is None or fields[1] == file_id:
            segments.append(Segment(fields[7], onset, dur))
    return segments


def read_rttm(path, file_id: str | None = None) -> list[Segment]:
    return parse_rttm(Path(path).read_text(encoding="utf-8"), str(path), file_id)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, tensors: dict, d_model: int, enc_layers: int, dec_layers: int):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<iiii", CKPT_VERSION, d_model, enc_layers, dec_layers))
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<i", len(raw)))
            f.write(raw)
            f.write(struct.pack("<i", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC or len(blob) < len(CKPT_MAGIC) + 16:
        raise FormatError(f"{path}: not an MMTSD1 checkpoint")
    pos = len(CKPT_MAGIC)
    version, d_model, enc_layers, dec_layers = struct.unpack_from("<iiii", blob, pos)
    pos += 16
    header = {"version": version, "d_model": d_model, "enc_layers": enc_layers,
              "dec_layers": dec_layers}
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<i", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<i", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}i", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError):
        raise FormatError(f"{path}: truncated or corrupt block") from None
    return header, tensors


def load_into(module: torch.nn.Module, tensors: dict, prefix: str = "", path="checkpoint"):
    """Copy ``prefix``-named tensors into a module's state dict, checking names and shapes."""
    state = module.state_dict()
    wanted = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(wanted))
    if missing:
        raise FormatError(f"{path}: missing tensors {missing[:5]} for prefix {prefix!r}")
    new_state = {}
    for k, ref in state.items():
        arr = wanted[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"{path}: {prefix}{k} has shape {arr.shape}, expected {tuple(ref.shape)}")
        new_state[k] = torch.as_tensor(arr).to(ref.dtype)
    module.load_state_dict(new_state)
