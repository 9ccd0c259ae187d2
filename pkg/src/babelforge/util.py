"""Shared plumbing: seedable RNG streams, stable hashing, flat key-value
config files, and provenance manifests."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Iterable

import numpy as np


def _stream_key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def spawn_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Named, splittable PCG64 stream.

    Identical (seed, stream) always yields the identical generator; distinct
    stream names yield statistically independent streams (SeedSequence spawn
    keys). All randomness in the package flows through this.
    """
    key = tuple(_stream_key(p) for p in stream)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def stable_hash(s: str) -> int:
    """64-bit content hash, stable across processes (unlike builtin hash)."""
    digest = hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def config_fingerprint(config: dict[str, Any], exclude: Iterable[str] = ()) -> str:
    """Short hex fingerprint of a flat config, optionally ignoring some keys.

    Sweeps use this to check that all points share every setting except the
    swept variable.
    """
    skip = set(exclude)
    lines = [f"{k}={config[k]!r}" for k in sorted(config) if k not in skip]
    digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    return digest[:10]


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines; '#' starts a comment; blank lines ok."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_text(f.read())


def write_kv_file(path: str, config: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key in sorted(config):
            f.write(f"{key} = {config[key]}\n")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, config: dict[str, Any],
                   inputs: Iterable[str] = (), outputs: Iterable[str] = (),
                   seed: int | None = None) -> str:
    """Provenance record written next to a stage's outputs.

    Every resolved config value is echoed, defaults included, so a run can be
    reproduced from the manifest alone.
    """
    from . import __version__

    record = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {k: config[k] for k in sorted(config)},
        "inputs": [
            {"path": p, "sha256": file_sha256(p) if os.path.isfile(p) else None}
            for p in inputs
        ],
        "outputs": sorted(outputs),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(record, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path
