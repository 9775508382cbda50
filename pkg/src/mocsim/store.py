"""Versioned, checksummed, completion-marked checkpoint store.

On-disk layout (all paths relative to the store root):

    v<version, 6 digits>/rank<rank, 4 digits>/<key>.bin   entry payloads
    v<version>/meta.json                                  iteration + ranges
    v<version>/manifest.tsv    rows: key<TAB>path<TAB>size<TAB>crc32c-hex
    v<version>/COMPLETE        zero length, written via temp + atomic rename

A version exists for readers only once COMPLETE is present; everything else
is ignored as a torn write.  Entry payloads are a deterministic function of
(key, version, iteration) so round trips are bit-exact and checksums are
meaningful without modelling tensor contents.

``MemoryStore`` mirrors the same interface without touching disk; the
simulator uses it by default and the CLI swaps in ``DiskStore``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple


class StoreError(Exception):
    pass


class IncompleteVersionError(StoreError):
    """The requested version has no COMPLETE marker."""


class ChecksumMismatchError(StoreError):
    """An entry's bytes do not match the manifest; names the offending key."""

    def __init__(self, key: str, detail: str):
        super().__init__(f"entry {key!r}: {detail}")
        self.key = key


class CrashPoint(RuntimeError):
    """Raised by a fault injector when its write budget is exhausted."""


_CRC32C_POLY = 0x82F63B78


def _build_table() -> tuple[int, ...]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC32C_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _build_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC-32C (Castagnoli) of ``data``."""
    crc = ~crc & 0xFFFFFFFF
    for byte in data:
        crc = (crc >> 8) ^ _CRC_TABLE[(crc ^ byte) & 0xFF]
    return ~crc & 0xFFFFFFFF


class StoreEntry(NamedTuple):
    """One persisted slice: which rank wrote which byte range of a unit."""

    store_key: str
    rank: int
    unit_key: str
    start: int
    stop: int


@dataclass(frozen=True)
class VersionMeta:
    version: int
    iteration: int
    checkpoint_index: int
    # store_key -> StoreEntry
    entries: dict[str, StoreEntry]

    def units_covered(self, unit_sizes: dict[str, int]) -> set[str]:
        """Unit keys whose full byte span is present in this version."""
        spans: dict[str, list[tuple[int, int]]] = {}
        for e in self.entries.values():
            spans.setdefault(e.unit_key, []).append((e.start, e.stop))
        covered = set()
        for unit, ranges in spans.items():
            ranges.sort()
            pos = 0
            for start, stop in ranges:
                if start > pos:
                    break
                pos = max(pos, stop)
            if pos >= unit_sizes[unit]:
                covered.add(unit)
        return covered


@dataclass(frozen=True)
class StoreManifest:
    version: int
    iteration: int
    # key -> (relative path, size bytes, crc32c)
    entries: dict[str, tuple[str, int, int]]
    complete_marker: bool


def entry_payload(store_key: str, version: int, iteration: int) -> bytes:
    """Deterministic synthetic payload standing in for tensor bytes."""
    header = f"mocsim\t{store_key}\tv{version}\ti{iteration}\n".encode()
    return header + hashlib.blake2b(header, digest_size=32).digest()


class TruncatingInjector:
    """Stops a persist after a byte budget, emulating a crash mid-write.

    Every payload byte consumes budget; the atomic COMPLETE rename consumes
    one unit, so a budget larger than the full stream lets the version land.
    """

    def __init__(self, crash_after_bytes: int):
        self.remaining = crash_after_bytes

    def write(self, fileobj, data: bytes) -> None:
        if self.remaining >= len(data):
            fileobj.write(data)
            self.remaining -= len(data)
            return
        fileobj.write(data[: self.remaining])
        self.remaining = 0
        raise CrashPoint("write budget exhausted")

    def charge_op(self) -> None:
        if self.remaining <= 0:
            raise CrashPoint("no budget left for rename")
        self.remaining -= 1


def _meta_bytes(meta: VersionMeta) -> bytes:
    doc = {
        "version": meta.version,
        "iteration": meta.iteration,
        "checkpoint_index": meta.checkpoint_index,
        "entries": {
            k: {"rank": e.rank, "unit": e.unit_key, "start": e.start, "stop": e.stop}
            for k, e in sorted(meta.entries.items())
        },
    }
    return (json.dumps(doc, sort_keys=True, indent=0) + "\n").encode()


def _manifest_bytes(rows: list[tuple[str, str, int, int]]) -> bytes:
    lines = [f"{key}\t{path}\t{size}\t{crc:08x}" for key, path, size, crc in rows]
    return ("\n".join(lines) + "\n").encode()


def _entry_path(rank: int, store_key: str) -> str:
    return f"rank{rank:04d}/{store_key}.bin"


class DiskStore:
    """The real store.  One directory per version under ``root``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def version_dir(self, version: int) -> Path:
        return self.root / f"v{version:06d}"

    def _write(self, path: Path, data: bytes, injector) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            if injector is None:
                f.write(data)
            else:
                injector.write(f, data)

    def serialized_size(self, version: int, iteration: int, checkpoint_index: int,
                        entries: Iterable[StoreEntry]) -> int:
        """Bytes write_version would stream (excluding the rename op)."""
        entries = list(entries)
        total = sum(len(entry_payload(e.store_key, version, iteration)) for e in entries)
        meta = VersionMeta(version, iteration, checkpoint_index,
                           {e.store_key: e for e in entries})
        rows = [(e.store_key, _entry_path(e.rank, e.store_key),
                 len(entry_payload(e.store_key, version, iteration)),
                 crc32c(entry_payload(e.store_key, version, iteration)))
                for e in sorted(entries)]
        return total + len(_meta_bytes(meta)) + len(_manifest_bytes(rows))

    def write_version(self, version: int, iteration: int, checkpoint_index: int,
                      entries: Iterable[StoreEntry],
                      injector: TruncatingInjector | None = None) -> StoreManifest:
        """Persist a version: entry files, meta, manifest, then COMPLETE."""
        entries = sorted(entries)
        newest = self.newest_complete()
        if newest is not None and version <= newest:
            raise StoreError(f"version {version} not above newest complete {newest}")
        vdir = self.version_dir(version)
        rows: list[tuple[str, str, int, int]] = []
        for e in entries:
            payload = entry_payload(e.store_key, version, iteration)
            rel = _entry_path(e.rank, e.store_key)
            self._write(vdir / rel, payload, injector)
            rows.append((e.store_key, rel, len(payload), crc32c(payload)))
        meta = VersionMeta(version, iteration, checkpoint_index,
                           {e.store_key: e for e in entries})
        self._write(vdir / "meta.json", _meta_bytes(meta), injector)
        self._write(vdir / "manifest.tsv", _manifest_bytes(rows), injector)
        tmp = vdir / ".COMPLETE.tmp"
        self._write(tmp, b"", injector)
        if injector is not None:
            injector.charge_op()
        os.replace(tmp, vdir / "COMPLETE")
        return StoreManifest(version=version, iteration=iteration,
                             entries={k: (p, s, c) for k, p, s, c in rows},
                             complete_marker=True)

    def complete_versions(self) -> list[int]:
        out = []
        for child in self.root.iterdir():
            if child.name.startswith("v") and (child / "COMPLETE").exists():
                try:
                    out.append(int(child.name[1:]))
                except ValueError:
                    continue
        return sorted(out)

    def newest_complete(self) -> int | None:
        versions = self.complete_versions()
        return versions[-1] if versions else None

    def manifest(self, version: int) -> StoreManifest:
        vdir = self.version_dir(version)
        complete = (vdir / "COMPLETE").exists()
        if not complete:
            raise IncompleteVersionError(f"version {version} has no COMPLETE marker")
        meta = self.meta(version)
        entries: dict[str, tuple[str, int, int]] = {}
        for line in (vdir / "manifest.tsv").read_text().splitlines():
            key, path, size, crc_hex = line.split("\t")
            entries[key] = (path, int(size), int(crc_hex, 16))
        return StoreManifest(version=version, iteration=meta.iteration,
                             entries=entries, complete_marker=True)

    def meta(self, version: int) -> VersionMeta:
        doc = json.loads((self.version_dir(version) / "meta.json").read_text())
        entries = {
            k: StoreEntry(store_key=k, rank=v["rank"], unit_key=v["unit"],
                          start=v["start"], stop=v["stop"])
            for k, v in doc["entries"].items()
        }
        return VersionMeta(version=doc["version"], iteration=doc["iteration"],
                           checkpoint_index=doc["checkpoint_index"], entries=entries)

    def load_checkpoint(self, version: int) -> dict[str, bytes]:
        """All entries of a COMPLETE version, with verified checksums."""
        manifest = self.manifest(version)
        vdir = self.version_dir(version)
        out: dict[str, bytes] = {}
        for key, (rel, size, crc) in sorted(manifest.entries.items()):
            path = vdir / rel
            if not path.exists():
                raise ChecksumMismatchError(key, "entry file missing")
            data = path.read_bytes()
            if len(data) != size:
                raise ChecksumMismatchError(key, f"size {len(data)} != manifest {size}")
            if crc32c(data) != crc:
                raise ChecksumMismatchError(key, "crc32c mismatch")
            out[key] = data
        return out


@dataclass
class MemoryStore:
    """Drop-in store without disk I/O; used for fast simulation runs."""

    _versions: dict[int, tuple[VersionMeta, dict[str, bytes]]] = field(default_factory=dict)

    def write_version(self, version: int, iteration: int, checkpoint_index: int,
                      entries: Iterable[StoreEntry],
                      injector: TruncatingInjector | None = None) -> StoreManifest:
        if injector is not None:
            raise StoreError("crash injection requires the disk store")
        newest = self.newest_complete()
        if newest is not None and version <= newest:
            raise StoreError(f"version {version} not above newest complete {newest}")
        entries = sorted(entries)
        payloads = {e.store_key: entry_payload(e.store_key, version, iteration)
                    for e in entries}
        meta = VersionMeta(version, iteration, checkpoint_index,
                           {e.store_key: e for e in entries})
        self._versions[version] = (meta, payloads)
        return StoreManifest(
            version=version, iteration=iteration,
            entries={e.store_key: (_entry_path(e.rank, e.store_key),
                                   len(payloads[e.store_key]),
                                   crc32c(payloads[e.store_key]))
                     for e in entries},
            complete_marker=True)

    def complete_versions(self) -> list[int]:
        return sorted(self._versions)

    def newest_complete(self) -> int | None:
        return max(self._versions) if self._versions else None

    def meta(self, version: int) -> VersionMeta:
        return self._versions[version][0]

    def manifest(self, version: int) -> StoreManifest:
        if version not in self._versions:
            raise IncompleteVersionError(f"version {version} is not complete")
        meta, payloads = self._versions[version]
        return StoreManifest(
            version=version, iteration=meta.iteration,
            entries={k: (_entry_path(meta.entries[k].rank, k), len(v), crc32c(v))
                     for k, v in payloads.items()},
            complete_marker=True)

    def load_checkpoint(self, version: int) -> dict[str, bytes]:
        if version not in self._versions:
            raise IncompleteVersionError(f"version {version} is not complete")
        return dict(self._versions[version][1])
