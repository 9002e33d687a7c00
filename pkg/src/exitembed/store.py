"""Single-file embedding store with an INT4 activation cache.

File layout (little-endian)::

    header   "EMST" | version u32 | num_layers u8 | embedding enc u8 |
             cache enc u8 | echo text (u32 length + utf-8) | crc32 u32
    blocks   kind u8 | body length u32 | body | crc32 u32 (kind, length, body)

    kind 1, record: id u64 | modality u8 | exit u8 | state u8 | dim u32 | payload
    kind 2, cache:  id u64 | layer u8 | payload
    kind 3, index:  count u32 | count * (id u64, record offset u64, cache offset u64)

Encodings: 0 stores float32 values (``count u32`` then values for cache
payloads, ``dim`` floats for records); 1 stores a QuantBlock (``count u32,
scale f32, packed nibbles``). Appends drop the trailing index, add blocks and
write a fresh index. Opening scans every block and stops at the first
truncated or corrupt one, so a torn tail is dropped. Releasing cache entries
rewrites the file to a temporary sibling and renames it into place.
"""
from __future__ import annotations

import contextlib
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DTYPE, QuantBlock, dequantize_int4, l2_normalize, quantize_int4

STORE_MAGIC = b"EMST"
STORE_VERSION = 1

KIND_RECORD, KIND_CACHE, KIND_INDEX = 1, 2, 3
ENC_F32, ENC_INT4 = 0, 1
_ENCODINGS = {"f32": ENC_F32, "int4": ENC_INT4}
STATE_CODES = {"coarse": 0, "fine": 1}
_STATE_NAMES = {v: k for k, v in STATE_CODES.items()}

BLOCK_OVERHEAD = 1 + 4 + 4
RECORD_HEADER = 8 + 1 + 1 + 1 + 4
CACHE_HEADER = 8 + 1
INDEX_ENTRY = 24


class StoreError(Exception):
    pass


class IntegrityError(StoreError):
    pass


@dataclass
class EmbeddingRecord:
    item_id: int
    modality: str
    exit: int
    embedding: np.ndarray
    state: str = "coarse"

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.modality == other.modality
            and self.exit == other.exit
            and self.state == other.state
            and np.asarray(self.embedding, DTYPE).tobytes() == np.asarray(other.embedding, DTYPE).tobytes()
        )


@dataclass
class ActivationCacheEntry:
    item_id: int
    layer: int
    quant: QuantBlock | None = None
    values: np.ndarray | None = None

    def hidden(self) -> np.ndarray:
        """Decoded hidden state; never cached in decoded form."""
        if self.quant is not None:
            return dequantize_int4(self.quant)
        return np.array(self.values, dtype=DTYPE)


@dataclass
class StoreStats:
    records: int
    cache_entries: int
    header_bytes: int
    record_bytes: int
    cache_bytes: int
    index_bytes: int
    embedding_payload_bytes: int
    total_bytes: int

    @property
    def bytes_per_record(self) -> float:
        return self.record_bytes / self.records if self.records else 0.0

    @property
    def bytes_per_cache_entry(self) -> float:
        return self.cache_bytes / self.cache_entries if self.cache_entries else 0.0

    @property
    def bytes_per_item(self) -> float:
        return self.total_bytes / self.records if self.records else 0.0


def _payload_size(enc: int, count: int) -> int:
    return 4 * count if enc == ENC_F32 else QuantBlock.nbytes(count)


def layout_sizes(unified_dim: int, d_model: int, embedding_encoding: str = "int4",
                 cache_encoding: str = "int4") -> dict:
    """Per-item byte accounting for a hypothetical configuration."""
    e_enc, c_enc = _ENCODINGS[embedding_encoding], _ENCODINGS[cache_encoding]
    payload = _payload_size(e_enc, unified_dim)
    cache_payload = 4 + 4 * d_model if c_enc == ENC_F32 else QuantBlock.nbytes(d_model)
    record = BLOCK_OVERHEAD + RECORD_HEADER + payload
    cache = BLOCK_OVERHEAD + CACHE_HEADER + cache_payload
    codes = 4 * unified_dim if e_enc == ENC_F32 else (unified_dim + 1) // 2
    return {
        "embedding_codes": codes,
        "embedding_payload": payload,
        "record_block": record,
        "cache_block": cache,
        "index_entry": INDEX_ENTRY,
        "coarse_item_total": record + cache + INDEX_ENTRY,
        "fine_item_total": record + INDEX_ENTRY,
    }


def _block(kind: int, body: bytes) -> bytes:
    head = struct.pack("<BI", kind, len(body))
    return head + body + struct.pack("<I", zlib.crc32(head + body))


class EmbeddingStore:
    """Persistent store of coarse/fine embedding records.

    Readers see an immutable ``(records, cache)`` snapshot that writers
    replace atomically under a lock.
    """

    def __init__(self, path, num_layers: int | None = None, embedding_encoding: str = "f32",
                 cache_encoding: str = "int4", echo: str = ""):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._emb_quant: dict[int, QuantBlock] = {}
        if self.path.exists() and self.path.stat().st_size > 0:
            self._open()
        else:
            if num_layers is None:
                raise StoreError("num_layers is required to create a new store")
            if embedding_encoding not in _ENCODINGS or cache_encoding not in _ENCODINGS:
                raise StoreError("encodings must be 'f32' or 'int4'")
            self.num_layers = int(num_layers)
            self.embedding_encoding = _ENCODINGS[embedding_encoding]
            self.cache_encoding = _ENCODINGS[cache_encoding]
            self.echo = echo
            self._snapshot = ({}, {})
            self._rewrite({}, {})

    # -- format -----------------------------------------------------------

    def _header(self) -> bytes:
        echo = self.echo.encode()
        body = (STORE_MAGIC + struct.pack("<IBBB", STORE_VERSION, self.num_layers,
                                          self.embedding_encoding, self.cache_encoding)
                + struct.pack("<I", len(echo)) + echo)
        return body + struct.pack("<I", zlib.crc32(body))

    def _record_body(self, rec: EmbeddingRecord) -> bytes:
        emb = np.asarray(rec.embedding, dtype=DTYPE)
        head = struct.pack("<QBBBI", rec.item_id, ord(rec.modality), rec.exit, STATE_CODES[rec.state], emb.size)
        if self.embedding_encoding == ENC_F32:
            return head + emb.astype("<f4").tobytes()
        return head + self._emb_quant[rec.item_id].to_bytes()

    def _cache_body(self, entry: ActivationCacheEntry) -> bytes:
        head = struct.pack("<QB", entry.item_id, entry.layer)
        if entry.quant is not None:
            return head + entry.quant.to_bytes()
        vals = np.asarray(entry.values, dtype="<f4")
        return head + struct.pack("<I", vals.size) + vals.tobytes()

    def _parse_record(self, body: bytes) -> EmbeddingRecord:
        item_id, mod, exit_, state, dim = struct.unpack_from("<QBBBI", body, 0)
        off = RECORD_HEADER
        if self.embedding_encoding == ENC_F32:
            if len(body) != off + 4 * dim:
                raise ValueError("record payload size mismatch")
            emb = np.frombuffer(body[off:], dtype="<f4").astype(DTYPE)
        else:
            q, end = QuantBlock.from_bytes(body, off)
            if end != len(body) or q.count != dim:
                raise ValueError("record payload size mismatch")
            self._emb_quant[item_id] = q
            emb = l2_normalize(dequantize_int4(q))
        return EmbeddingRecord(item_id, chr(mod), exit_, emb, _STATE_NAMES[state])

    def _parse_cache(self, body: bytes) -> ActivationCacheEntry:
        item_id, layer = struct.unpack_from("<QB", body, 0)
        off = CACHE_HEADER
        if self.cache_encoding == ENC_INT4:
            q, end = QuantBlock.from_bytes(body, off)
            if end != len(body):
                raise ValueError("cache payload size mismatch")
            return ActivationCacheEntry(item_id, layer, quant=q)
        (count,) = struct.unpack_from("<I", body, off)
        if len(body) != off + 4 + 4 * count:
            raise ValueError("cache payload size mismatch")
        return ActivationCacheEntry(item_id, layer, values=np.frombuffer(body[off + 4:], dtype="<f4").astype(DTYPE))

    def _index_body(self, offsets: dict) -> bytes:
        out = [struct.pack("<I", len(offsets))]
        for item_id, (rec_off, cache_off) in offsets.items():
            out.append(struct.pack("<QQQ", item_id, rec_off, cache_off))
        return b"".join(out)

    def _open(self) -> None:
        data = self.path.read_bytes()
        if len(data) < 15 or data[:4] != STORE_MAGIC:
            raise StoreError(f"{self.path}: not an embedding store")
        version, self.num_layers, self.embedding_encoding, self.cache_encoding = struct.unpack_from("<IBBB", data, 4)
        if version != STORE_VERSION:
            raise StoreError(f"{self.path}: unsupported store version {version}")
        (n_echo,) = struct.unpack_from("<I", data, 11)
        hdr_end = 15 + n_echo
        if len(data) < hdr_end + 4 or struct.unpack_from("<I", data, hdr_end)[0] != zlib.crc32(data[:hdr_end]):
            raise StoreError(f"{self.path}: corrupt header")
        self.echo = data[15:hdr_end].decode()
        pos = hdr_end + 4
        records, cache = {}, {}
        rec_off, cache_off = {}, {}
        self.dropped_tail_bytes = 0
        self._index_offset = None
        while pos < len(data):
            parsed = self._read_block(data, pos)
            if parsed is None:
                self.dropped_tail_bytes = len(data) - pos
                break
            kind, body, end = parsed
            try:
                if kind == KIND_RECORD:
                    rec = self._parse_record(body)
                    records[rec.item_id] = rec
                    rec_off[rec.item_id] = pos
                elif kind == KIND_CACHE:
                    entry = self._parse_cache(body)
                    cache[entry.item_id] = entry
                    cache_off[entry.item_id] = pos
                elif kind == KIND_INDEX:
                    self._index_offset = pos
                else:
                    raise ValueError(f"unknown block kind {kind}")
            except (ValueError, KeyError, struct.error):
                self.dropped_tail_bytes = len(data) - pos
                break
            if kind != KIND_INDEX:
                self._index_offset = None
            pos = end
        self._snapshot = (records, cache)
        self._offsets = {i: (rec_off[i], cache_off.get(i, 0)) for i in records}
        if self.dropped_tail_bytes or self._index_offset is None:
            # torn tail or missing index: rewrite a clean file
            self._rewrite(records, cache)

    @staticmethod
    def _read_block(data: bytes, pos: int):
        if pos + 5 > len(data):
            return None
        kind, length = struct.unpack_from("<BI", data, pos)
        end = pos + 5 + length + 4
        if end > len(data):
            return None
        (crc,) = struct.unpack_from("<I", data, end - 4)
        if crc != zlib.crc32(data[pos : end - 4]):
            return None
        return kind, data[pos + 5 : end - 4], end

    def _rewrite(self, records: dict, cache: dict) -> None:
        out = [self._header()]
        pos = len(out[0])
        offsets = {}
        for item_id, rec in records.items():
            blk = _block(KIND_RECORD, self._record_body(rec))
            rec_off = pos
            out.append(blk)
            pos += len(blk)
            cache_off = 0
            if item_id in cache:
                blk = _block(KIND_CACHE, self._cache_body(cache[item_id]))
                cache_off = pos
                out.append(blk)
                pos += len(blk)
            offsets[item_id] = (rec_off, cache_off)
        self._index_offset = pos
        out.append(_block(KIND_INDEX, self._index_body(offsets)))
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(b"".join(out))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)
        self._offsets = offsets

    def _append(self, new_records: list, new_cache: list) -> None:
        with open(self.path, "r+b") as f:
            f.truncate(self._index_offset)
            f.seek(self._index_offset)
            pos = self._index_offset
            offsets = dict(self._offsets)
            for rec, entry in zip(new_records, new_cache):
                blk = _block(KIND_RECORD, self._record_body(rec))
                f.write(blk)
                rec_off, pos = pos, pos + len(blk)
                cache_off = 0
                if entry is not None:
                    blk = _block(KIND_CACHE, self._cache_body(entry))
                    f.write(blk)
                    cache_off, pos = pos, pos + len(blk)
                offsets[rec.item_id] = (rec_off, cache_off)
            f.write(_block(KIND_INDEX, self._index_body(offsets)))
            f.flush()
            os.fsync(f.fileno())
        self._index_offset = pos
        self._offsets = offsets

    # -- public API -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._snapshot[0])

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._snapshot[0]

    @property
    def ids(self) -> list:
        return list(self._snapshot[0])

    def snapshot(self) -> tuple[dict, dict]:
        return self._snapshot

    def _make_entry(self, item_id: int, layer: int, hidden) -> ActivationCacheEntry:
        hidden = np.asarray(hidden, dtype=DTYPE)
        if self.cache_encoding == ENC_INT4:
            return ActivationCacheEntry(item_id, layer, quant=quantize_int4(hidden))
        return ActivationCacheEntry(item_id, layer, values=hidden.copy())

    def _normalize_record(self, rec: EmbeddingRecord) -> EmbeddingRecord:
        emb = np.asarray(rec.embedding, dtype=DTYPE)
        if not np.all(np.isfinite(emb)):
            raise StoreError(f"record {rec.item_id}: non-finite embedding")
        norm = float(np.linalg.norm(emb.astype(np.float64)))
        if norm != 0.0 and abs(norm - 1.0) > 1e-5:
            raise StoreError(f"record {rec.item_id}: embedding norm {norm} is neither 0 nor 1")
        if rec.state not in STATE_CODES:
            raise StoreError(f"record {rec.item_id}: unknown state {rec.state!r}")
        if not 1 <= rec.exit <= self.num_layers:
            raise StoreError(f"record {rec.item_id}: exit {rec.exit} outside [1, {self.num_layers}]")
        if self.embedding_encoding == ENC_INT4:
            q = quantize_int4(emb)
            self._emb_quant[int(rec.item_id)] = q
            emb = l2_normalize(dequantize_int4(q))
        return EmbeddingRecord(int(rec.item_id), rec.modality, int(rec.exit), emb.copy(), rec.state)

    def put_coarse(self, record: EmbeddingRecord, snapshot) -> None:
        self.put_many([record], [snapshot])

    def put_many(self, records, snapshots) -> None:
        """Append coarse records with their pre-head snapshots."""
        records, snapshots = list(records), list(snapshots)
        if len(records) != len(snapshots):
            raise StoreError("records and snapshots are not aligned")
        with self._lock:
            cur_rec, cur_cache = self._snapshot
            seen = set()
            new_r, new_c = [], []
            for rec, snap in zip(records, snapshots):
                if rec.item_id in cur_rec or rec.item_id in seen:
                    raise StoreError(f"duplicate item id {rec.item_id}")
                if rec.state != "coarse":
                    raise StoreError("put_coarse expects coarse records")
                seen.add(rec.item_id)
                rec = self._normalize_record(rec)
                hidden = getattr(snap, "hidden", snap)
                layer = getattr(snap, "layer_index", rec.exit)
                if layer != rec.exit:
                    raise StoreError(f"record {rec.item_id}: snapshot layer {layer} != exit {rec.exit}")
                new_r.append(rec)
                new_c.append(self._make_entry(rec.item_id, rec.exit, hidden))
            self._append(new_r, new_c)
            records2 = dict(cur_rec)
            cache2 = dict(cur_cache)
            for rec, entry in zip(new_r, new_c):
                records2[rec.item_id] = rec
                cache2[rec.item_id] = entry
            self._snapshot = (records2, cache2)

    def get(self, item_id: int):
        records, cache = self._snapshot
        item_id = int(item_id)
        if item_id not in records:
            raise KeyError(f"no record for item {item_id}")
        return records[item_id], cache.get(item_id)

    def get_many(self, ids) -> list:
        return [self.get(i) for i in ids]

    def records(self) -> list:
        return list(self._snapshot[0].values())

    def list_exits(self) -> list:
        return sorted({self.num_layers if r.state == "fine" else r.exit for r in self._snapshot[0].values()})

    def upgrade_to_fine(self, item_id: int, fine_embedding) -> bool:
        """Replace with the fine embedding and release the cache entry.

        Returns False (and changes nothing) when the record is already fine.
        """
        return self.upgrade_many({item_id: fine_embedding}) > 0

    def upgrade_many(self, fine: dict) -> int:
        with self._lock:
            records, cache = self._snapshot
            records2, cache2 = dict(records), dict(cache)
            changed = 0
            for item_id, emb in fine.items():
                item_id = int(item_id)
                if item_id not in records:
                    raise KeyError(f"no record for item {item_id}")
                rec = records[item_id]
                if rec.state == "fine":
                    continue
                new = EmbeddingRecord(item_id, rec.modality, self.num_layers, emb, "fine")
                records2[item_id] = self._normalize_record(new)
                cache2.pop(item_id, None)
                changed += 1
            if changed:
                self._rewrite(records2, cache2)
                self._snapshot = (records2, cache2)
            return changed

    def integrity_scan(self) -> list:
        """Violations of ``state == fine <=> no cache entry``."""
        records, cache = self._snapshot
        problems = []
        for item_id, rec in records.items():
            has = item_id in cache
            if rec.state == "fine" and has:
                problems.append(f"item {item_id}: fine record still has a cache entry")
            if rec.state == "coarse" and not has:
                problems.append(f"item {item_id}: coarse record has no cache entry")
            if has and cache[item_id].layer != rec.exit:
                problems.append(f"item {item_id}: cache layer {cache[item_id].layer} != exit {rec.exit}")
        for item_id in cache:
            if item_id not in records:
                problems.append(f"item {item_id}: orphan cache entry")
        return problems

    def storage_report(self) -> StoreStats:
        records, cache = self._snapshot
        header = len(self._header())
        rec_bytes = sum(BLOCK_OVERHEAD + len(self._record_body(r)) for r in records.values())
        cache_bytes = sum(BLOCK_OVERHEAD + len(self._cache_body(c)) for c in cache.values())
        index = BLOCK_OVERHEAD + 4 + INDEX_ENTRY * len(records)
        payload = sum(len(self._record_body(r)) - RECORD_HEADER for r in records.values())
        return StoreStats(
            records=len(records),
            cache_entries=len(cache),
            header_bytes=header,
            record_bytes=rec_bytes,
            cache_bytes=cache_bytes,
            index_bytes=index,
            embedding_payload_bytes=payload,
            total_bytes=header + rec_bytes + cache_bytes + index,
        )


@contextlib.contextmanager
def locked(path):
    """Advisory exclusive lock on ``path`` + '.lock' for the duration of a command."""
    import fcntl

    lock_path = Path(str(path) + ".lock")
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
