"""On-disk store: checksums, atomic publication, crash behaviour."""

import pytest

from mocsim import (
    ChecksumMismatchError,
    CrashPoint,
    DiskStore,
    IncompleteVersionError,
    MemoryStore,
    StoreEntry,
    TruncatingInjector,
    crc32c,
)
from mocsim.store import StoreError, entry_payload


def _entries():
    return [
        StoreEntry("ew.L0.E0", rank=0, unit_key="ew.L0.E0", start=0, stop=100),
        StoreEntry("ew.L0.E1.part0", rank=0, unit_key="ew.L0.E1", start=0, stop=50),
        StoreEntry("ew.L0.E1.part1", rank=1, unit_key="ew.L0.E1", start=50, stop=100),
        StoreEntry("neo.r0", rank=0, unit_key="neo.r0", start=0, stop=64),
        StoreEntry("neo.r1", rank=1, unit_key="neo.r1", start=0, stop=64),
    ]


def test_crc32c_known_vector():
    assert crc32c(b"123456789") == 0xE3069283
    assert crc32c(b"") == 0


def test_round_trip(tmp_path):
    store = DiskStore(tmp_path)
    manifest = store.write_version(1, iteration=7, checkpoint_index=0,
                                   entries=_entries())
    assert manifest.complete_marker
    content = store.load_checkpoint(1)
    assert set(content) == {e.store_key for e in _entries()}
    for key, data in content.items():
        assert data == entry_payload(key, 1, 7)
    assert store.meta(1).iteration == 7
    assert store.meta(1).checkpoint_index == 0


def test_layout_on_disk(tmp_path):
    store = DiskStore(tmp_path)
    store.write_version(3, iteration=1, checkpoint_index=0, entries=_entries())
    vdir = tmp_path / "v000003"
    assert (vdir / "COMPLETE").exists()
    assert (vdir / "COMPLETE").stat().st_size == 0
    assert (vdir / "rank0000" / "ew.L0.E0.bin").exists()
    rows = (vdir / "manifest.tsv").read_text().splitlines()
    assert all(len(r.split("\t")) == 4 for r in rows)
    key, path, size, crc_hex = rows[0].split("\t")
    data = (vdir / path).read_bytes()
    assert int(size) == len(data)
    assert int(crc_hex, 16) == crc32c(data)


def test_flipped_byte_detected(tmp_path):
    store = DiskStore(tmp_path)
    store.write_version(1, iteration=7, checkpoint_index=0, entries=_entries())
    victim = tmp_path / "v000001" / "rank0000" / "neo.r0.bin"
    data = bytearray(victim.read_bytes())
    data[5] ^= 0xFF
    victim.write_bytes(bytes(data))
    with pytest.raises(ChecksumMismatchError) as exc:
        store.load_checkpoint(1)
    assert exc.value.key == "neo.r0"


def test_incomplete_version_ignored(tmp_path):
    store = DiskStore(tmp_path)
    store.write_version(1, iteration=5, checkpoint_index=0, entries=_entries())
    total = store.serialized_size(2, 9, 1, _entries())
    with pytest.raises(CrashPoint):
        store.write_version(2, iteration=9, checkpoint_index=1,
                            entries=_entries(),
                            injector=TruncatingInjector(total // 2))
    assert store.complete_versions() == [1]
    assert store.newest_complete() == 1
    store.load_checkpoint(1)
    with pytest.raises(IncompleteVersionError):
        store.load_checkpoint(2)


def test_budget_past_rename_completes(tmp_path):
    store = DiskStore(tmp_path)
    total = store.serialized_size(1, 5, 0, _entries())
    store.write_version(1, iteration=5, checkpoint_index=0, entries=_entries(),
                        injector=TruncatingInjector(total + 1))
    assert store.newest_complete() == 1


def test_versions_strictly_increase(tmp_path):
    store = DiskStore(tmp_path)
    store.write_version(2, iteration=1, checkpoint_index=0, entries=_entries())
    with pytest.raises(StoreError):
        store.write_version(2, iteration=2, checkpoint_index=1, entries=_entries())
    with pytest.raises(StoreError):
        store.write_version(1, iteration=2, checkpoint_index=1, entries=_entries())


def test_units_covered_requires_full_span(tmp_path):
    store = DiskStore(tmp_path)
    partial = [e for e in _entries() if e.store_key != "ew.L0.E1.part1"]
    store.write_version(1, iteration=3, checkpoint_index=0, entries=partial)
    sizes = {"ew.L0.E0": 100, "ew.L0.E1": 100, "neo.r0": 64, "neo.r1": 64}
    covered = store.meta(1).units_covered(sizes)
    assert "ew.L0.E0" in covered
    assert "ew.L0.E1" not in covered


def test_memory_store_parity(tmp_path):
    disk, mem = DiskStore(tmp_path), MemoryStore()
    for store in (disk, mem):
        store.write_version(1, iteration=7, checkpoint_index=0, entries=_entries())
    assert disk.load_checkpoint(1) == mem.load_checkpoint(1)
    assert disk.manifest(1).entries == mem.manifest(1).entries
    assert disk.meta(1).entries == mem.meta(1).entries
    assert mem.complete_versions() == [1]
