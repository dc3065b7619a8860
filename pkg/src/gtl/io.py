"""Plain-text file formats: datasets, samples, key=value stats and CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch


def _write_sequences(path: Path, header: str, seqs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(seqs.numpy() if isinstance(seqs, torch.Tensor) else seqs)
    lines = [header] + [" ".join(map(str, row)) for row in arr.tolist()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith("#"):
        raise ValueError("missing '#' header line")
    parts = line[1:].split()
    if len(parts) % 2:
        raise ValueError(f"malformed header: {line!r}")
    return dict(zip(parts[0::2], parts[1::2]))


def write_dataset(path, seqs, vocab_size: int) -> Path:
    arr = np.asarray(seqs)
    return _write_sequences(path, f"#vocab {vocab_size} len {arr.shape[1]}", arr)


def read_sequences(path) -> tuple[torch.Tensor, dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = _parse_header(lines[0])
    vocab, length = int(header["vocab"]), int(header["len"])
    rows = [list(map(int, ln.split())) for ln in lines[1:] if ln.strip()]
    arr = np.array(rows, dtype=np.int64).reshape(-1, length) if rows else np.zeros((0, length), dtype=np.int64)
    if any(len(r) != length for r in rows):
        raise ValueError(f"{path}: sequence length differs from header")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise ValueError(f"{path}: token ids outside [0, {vocab})")
    return torch.from_numpy(arr), header


def read_dataset(path) -> tuple[torch.Tensor, int]:
    seqs, header = read_sequences(path)
    return seqs, int(header["vocab"])


def write_samples(path, seqs, vocab_size: int, variant: str, gamma, n_ratio: int, seed: int) -> Path:
    arr = np.asarray(seqs.numpy() if isinstance(seqs, torch.Tensor) else seqs)
    header = f"#vocab {vocab_size} len {arr.shape[1]} variant {variant} gamma {gamma} n_ratio {n_ratio} seed {seed}"
    return _write_sequences(path, header, arr)


def write_stats(path, record: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in record.items()))
    return path


def read_stats(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def write_csv(path, rows: list[dict], fields: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
