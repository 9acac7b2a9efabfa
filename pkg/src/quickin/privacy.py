"""Privacy layer for completed sessions.

Completed sessions are generalized to six fields (gender, age range,
coarsened start/end position, minute-truncated start/end time) before they
are stored, every stored payload is envelope encrypted, and anonymity of the
store is audited by counting records per quasi-identifier group.
"""
from __future__ import annotations

import base64
import csv
import io
import json
import math
import os
import secrets
import threading
from collections import Counter
from dataclasses import dataclass, fields
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Optional, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .domain import GeoPoint, User, UserSession, age_of, round_half_up, to_rfc3339, utc_date, parse_ts
from .errors import DecryptionError, EmptyReportError, IntegrityError, InvalidInputError, KAnonymityRefused
from .store import KVStore

AGE_RANGES = (
    ("0-14", 0, 14),
    ("15-24", 15, 24),
    ("25-34", 25, 34),
    ("35-49", 35, 49),
    ("50-64", 50, 64),
    ("65-79", 65, 79),
    ("80+", 80, None),
)
AGE_RANGE_LABELS = tuple(label for label, _, _ in AGE_RANGES)

COORD_DECIMALS = 3
RECORD_KEYS = ("gender", "age_range", "start_lat", "start_lon", "end_lat", "end_lon", "start_ts", "end_ts")


def age_to_range(age: int) -> str:
    if age < 0:
        raise InvalidInputError(f"negative age {age}")
    for label, lo, hi in AGE_RANGES:
        if age >= lo and (hi is None or age <= hi):
            return label
    raise AssertionError("age buckets must cover every age")  # pragma: no cover


def coarsen_coordinate(x: float, decimals: int = COORD_DECIMALS) -> float:
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def truncate_to_minute(ts: float) -> float:
    return float(math.floor(ts / 60.0) * 60)


@dataclass(frozen=True)
class AnonymizedSessionRecord:
    gender: str
    age_range: str
    start_pos: GeoPoint
    end_pos: GeoPoint
    start_ts: float
    end_ts: float

    def to_json(self) -> dict:
        return {
            "gender": self.gender,
            "age_range": self.age_range,
            "start_lat": self.start_pos.lat,
            "start_lon": self.start_pos.lon,
            "end_lat": self.end_pos.lat,
            "end_lon": self.end_pos.lon,
            "start_ts": to_rfc3339(self.start_ts),
            "end_ts": to_rfc3339(self.end_ts),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, d: dict) -> "AnonymizedSessionRecord":
        if set(d) != set(RECORD_KEYS):
            raise InvalidInputError(f"record fields {sorted(d)} do not match the archive schema")
        return cls(
            gender=d["gender"],
            age_range=d["age_range"],
            start_pos=GeoPoint(d["start_lat"], d["start_lon"]),
            end_pos=GeoPoint(d["end_lat"], d["end_lon"]),
            start_ts=parse_ts(d["start_ts"]),
            end_ts=parse_ts(d["end_ts"]),
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AnonymizedSessionRecord":
        return cls.from_json(json.loads(raw))


RECORD_FIELDS = tuple(f.name for f in fields(AnonymizedSessionRecord))


def generalize(user: User, session: UserSession, now: float) -> AnonymizedSessionRecord:
    age = age_of(user.birth_date, utc_date(now))
    end_pos = session.end_pos if session.end_pos is not None else session.start_pos
    end_ts = session.end_ts if session.end_ts is not None else session.start_ts
    return AnonymizedSessionRecord(
        gender=getattr(user.gender, "value", user.gender),
        age_range=age_to_range(age),
        start_pos=GeoPoint(coarsen_coordinate(session.start_pos.lat), coarsen_coordinate(session.start_pos.lon)),
        end_pos=GeoPoint(coarsen_coordinate(end_pos.lat), coarsen_coordinate(end_pos.lon)),
        start_ts=truncate_to_minute(session.start_ts),
        end_ts=truncate_to_minute(end_ts),
    )


def estimate_bus_users(inhabitants: int, usage_rate) -> int:
    """Expected riders in a population, rounded half-up to a whole person."""
    if inhabitants < 0:
        raise InvalidInputError("inhabitants must be non-negative")
    rate = Decimal(str(usage_rate))
    if not (0 <= rate <= 1):
        raise InvalidInputError("usage rate must lie in [0, 1]")
    return round_half_up(Decimal(int(inhabitants)) * rate)


# k-anonymity audit ---------------------------------------------------------

@dataclass(frozen=True)
class KAnonymityReport:
    quasi_identifier: tuple
    group_counts: dict
    k_min: int
    k_avg: float
    k_max: int

    @property
    def k_avg_rounded(self) -> int:
        return round_half_up(Decimal(sum(self.group_counts.values())) / Decimal(len(self.group_counts)))

    @property
    def n_records(self) -> int:
        return sum(self.group_counts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "count"])
        for group, count in self.group_counts.items():
            w.writerow([_group_label(group), count])
        w.writerow(["summary:k_min", self.k_min])
        w.writerow(["summary:k_avg", self.k_avg_rounded])
        w.writerow(["summary:k_max", self.k_max])
        return buf.getvalue()


def _group_label(group) -> str:
    if isinstance(group, tuple):
        return "|".join(str(g) for g in group)
    return str(group)


def _field(record, name):
    if isinstance(record, Mapping):
        return record[name]
    value = getattr(record, name)
    if isinstance(value, GeoPoint):
        return (value.lat, value.lon)
    return value


def k_report(data, quasi_identifier: Sequence[str] = ("age_range",)) -> KAnonymityReport:
    """Group sizes over the quasi-identifier.

    ``data`` is either an iterable of records (dataclasses or dicts) or a
    mapping of group -> count.
    """
    qi = tuple(quasi_identifier)
    if isinstance(data, Mapping):
        counts = {(g if isinstance(g, tuple) else (g,)): int(c) for g, c in data.items() if int(c) > 0}
    else:
        counter = Counter(tuple(_field(r, name) for name in qi) for r in data)
        counts = dict(counter)
    if not counts:
        raise EmptyReportError("k is undefined for an empty store")
    counts = {(g[0] if len(g) == 1 else g): c for g, c in sorted(counts.items(), key=_sort_key)}
    values = list(counts.values())
    return KAnonymityReport(qi, counts, min(values), sum(values) / len(values), max(values))


def _sort_key(item):
    group = item[0]
    return tuple(AGE_RANGE_LABELS.index(g) if g in AGE_RANGE_LABELS else 99 for g in group), tuple(map(str, group))


def require_k(report: KAnonymityReport, threshold: int) -> KAnonymityReport:
    if report.k_min < threshold:
        raise KAnonymityRefused(report, threshold)
    return report


# envelope encryption -------------------------------------------------------

@dataclass(frozen=True)
class MasterKey:
    key_id: str
    key: bytes

    @classmethod
    def generate(cls) -> "MasterKey":
        return cls("mk-" + secrets.token_hex(8), AESGCM.generate_key(bit_length=256))


@dataclass(frozen=True)
class EnvelopeCiphertext:
    wrapped_data_key: bytes
    nonce: bytes
    ciphertext: bytes
    key_id: str

    def to_bytes(self) -> bytes:
        b64 = lambda b: base64.b64encode(b).decode()  # noqa: E731
        return json.dumps({"kid": self.key_id, "wk": b64(self.wrapped_data_key),
                           "iv": b64(self.nonce), "ct": b64(self.ciphertext)},
                          separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EnvelopeCiphertext":
        try:
            d = json.loads(raw)
            return cls(base64.b64decode(d["wk"]), base64.b64decode(d["iv"]),
                       base64.b64decode(d["ct"]), d["kid"])
        except (ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed envelope: {exc}") from exc


WRAP_NONCE_BYTES = 12


def _wrap(master_key: MasterKey, data_key: bytes) -> bytes:
    # AEAD key wrapping: nonce || AES-GCM(master, data_key), bound to the key id
    nonce = os.urandom(WRAP_NONCE_BYTES)
    return nonce + AESGCM(master_key.key).encrypt(nonce, data_key, master_key.key_id.encode())


def _unwrap(master_key: MasterKey, wrapped: bytes) -> bytes:
    if len(wrapped) <= WRAP_NONCE_BYTES:
        raise IntegrityError("wrapped data key is truncated")
    try:
        return AESGCM(master_key.key).decrypt(wrapped[:WRAP_NONCE_BYTES], wrapped[WRAP_NONCE_BYTES:],
                                              master_key.key_id.encode())
    except (InvalidTag, ValueError) as exc:
        raise IntegrityError("data key failed to unwrap") from exc


def envelope_encrypt(plaintext: bytes, master_key: MasterKey) -> EnvelopeCiphertext:
    data_key = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(12)
    ct = AESGCM(data_key).encrypt(nonce, plaintext, master_key.key_id.encode())
    return EnvelopeCiphertext(_wrap(master_key, data_key), nonce, ct, master_key.key_id)


def envelope_decrypt(ct: EnvelopeCiphertext, master_key: MasterKey) -> bytes:
    if ct.key_id != master_key.key_id:
        raise DecryptionError(f"envelope sealed under {ct.key_id}, not {master_key.key_id}")
    data_key = _unwrap(master_key, ct.wrapped_data_key)
    try:
        return AESGCM(data_key).decrypt(ct.nonce, ct.ciphertext, ct.key_id.encode())
    except (InvalidTag, ValueError) as exc:
        raise IntegrityError("ciphertext failed authentication") from exc


class KeyService:
    """Local stand-in for a managed key service: holds master keys, never exports data keys."""

    def __init__(self, keys: Optional[Iterable[MasterKey]] = None):
        self._lock = threading.Lock()
        self._keys = {k.key_id: k for k in (keys or ())}
        self._current = next(reversed(self._keys.values())) if self._keys else None
        if self._current is None:
            self.rotate()

    @property
    def current_key_id(self) -> str:
        return self._current.key_id

    def rotate(self) -> str:
        with self._lock:
            key = MasterKey.generate()
            self._keys[key.key_id] = key
            self._current = key
            return key.key_id

    def encrypt(self, plaintext: bytes) -> bytes:
        return envelope_encrypt(plaintext, self._current).to_bytes()

    def decrypt(self, blob: bytes) -> bytes:
        ct = EnvelopeCiphertext.from_bytes(blob)
        key = self._keys.get(ct.key_id)
        if key is None:
            raise DecryptionError(f"unknown master key {ct.key_id}")
        return envelope_decrypt(ct, key)

    def save(self, path: str) -> None:
        payload = [{"key_id": k.key_id, "key": k.key.hex()} for k in self._keys.values()]
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path: str) -> "KeyService":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(MasterKey(d["key_id"], bytes.fromhex(d["key"])) for d in payload)

    @classmethod
    def open_or_create(cls, path: str) -> "KeyService":
        if os.path.exists(path):
            return cls.load(path)
        ks = cls()
        ks.save(path)
        return ks


class EncryptedStore:
    """KVStore wrapper that seals every value with the key service."""

    def __init__(self, kv: KVStore, keys: KeyService):
        self.kv = kv
        self.keys = keys

    def put(self, key: str, value: bytes) -> None:
        self.kv.put(key, self.keys.encrypt(value))

    def get(self, key: str) -> Optional[bytes]:
        blob = self.kv.get(key)
        return None if blob is None else self.keys.decrypt(blob)

    def put_json(self, key: str, obj) -> None:
        self.put(key, json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())

    def get_json(self, key: str):
        raw = self.get(key)
        return None if raw is None else json.loads(raw)

    def delete(self, key: str) -> bool:
        return self.kv.delete(key)

    def items(self):
        for k, blob in self.kv.items():
            yield k, self.keys.decrypt(blob)

    def __len__(self) -> int:
        return len(self.kv)


class CompletedSessionStore:
    """Per-service archive of generalized, encrypted session records."""

    def __init__(self, kv: KVStore, keys: KeyService):
        self._store = EncryptedStore(kv, keys)

    @property
    def kv(self) -> KVStore:
        return self._store.kv

    def archive(self, record: AnonymizedSessionRecord) -> str:
        key = "r" + secrets.token_hex(10)
        self._store.put(key, record.to_bytes())
        return key

    def archive_many(self, records: Iterable[AnonymizedSessionRecord]) -> int:
        items = [("r" + secrets.token_hex(10), self._store.keys.encrypt(r.to_bytes())) for r in records]
        self.kv.put_many(items)
        return len(items)

    def records(self) -> list:
        return [AnonymizedSessionRecord.from_bytes(raw) for _, raw in self._store.items()]

    def __len__(self) -> int:
        return len(self._store)
