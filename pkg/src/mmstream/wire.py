"""Sample type, topic rules and the three-frame wire codec.

A message on the wire is three frames, each preceded by its length as an
unsigned 32-bit little-endian integer::

    [len][topic utf-8] [len][header] [len][payload]

The header is ``<HHQQQBBH`` (32 bytes: schema_version, flags, seq,
time_of_arrival_ns, time_of_generation_ns, dtype, ndim, reserved) followed by
``ndim`` little-endian ``u32`` extents.
"""

from __future__ import annotations

import enum
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import BadVersion, DimMismatch, InvalidSample, InvalidTopic, OversizeTopic, Truncated

SCHEMA_VERSION = 1
MAX_TOPIC_BYTES = 255
WILDCARD = "*"
RESERVED_PREFIX = "__"

_LEN = struct.Struct("<I")
_HEADER = struct.Struct("<HHQQQBBH")
HEADER_FIXED_BYTES = _HEADER.size  # 32
_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1


class DType(enum.IntEnum):
    """Element-type codes carried in the header; payload elements are little-endian."""

    U8 = 1
    I8 = 2
    U16 = 3
    I16 = 4
    U32 = 5
    I32 = 6
    U64 = 7
    I64 = 8
    F16 = 9
    F32 = 10
    F64 = 11

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(_NUMPY_CODES[self]).newbyteorder("<")

    @property
    def itemsize(self) -> int:
        return self.numpy.itemsize

    @classmethod
    def from_numpy(cls, dtype) -> DType:
        dt = np.dtype(dtype)
        key = dt.kind + str(dt.itemsize)
        for code, name in _NUMPY_CODES.items():
            if name[1:] == key:
                return code
        raise ValueError(f"unsupported dtype {dt}")

    @classmethod
    def parse(cls, value) -> DType:
        """Accept a DType, its int code, its name (``"f32"``) or a numpy dtype spec."""
        if isinstance(value, DType):
            return value
        if isinstance(value, int):
            return cls(value)
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return cls.from_numpy(value)


_NUMPY_CODES = {
    DType.U8: "<u1",
    DType.I8: "<i1",
    DType.U16: "<u2",
    DType.I16: "<i2",
    DType.U32: "<u4",
    DType.I32: "<i4",
    DType.U64: "<u8",
    DType.I64: "<i8",
    DType.F16: "<f2",
    DType.F32: "<f4",
    DType.F64: "<f8",
}


def validate_topic(topic: str) -> str:
    """Raise InvalidTopic / OversizeTopic unless ``topic`` is a well-formed path."""
    if not isinstance(topic, str) or not topic:
        raise InvalidTopic("topic must be a non-empty string")
    if len(topic.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise OversizeTopic(f"topic exceeds {MAX_TOPIC_BYTES} bytes: {topic[:40]!r}...")
    if topic.startswith("/") or topic.endswith("/") or "//" in topic:
        raise InvalidTopic(f"empty segment in topic {topic!r}")
    return topic


def is_reserved(topic: str) -> bool:
    return topic.startswith(RESERVED_PREFIX)


def match_topic(prefix: str, topic: str) -> bool:
    """Segment-boundary prefix match.

    ``"imu"`` matches ``"imu"`` and ``"imu/joint_angles"`` but not
    ``"imu2/raw"``. The wildcard ``"*"`` matches every non-reserved topic.
    """
    validate_topic(topic)
    if prefix == WILDCARD:
        return not is_reserved(topic)
    validate_topic(prefix)
    return topic == prefix or topic.startswith(prefix + "/")


@dataclass(frozen=True, eq=False)
class Sample:
    """One timestamped measurement of one modality.

    ``payload`` is kept by reference; no copy is made on construction.
    """

    topic: str
    seq: int
    time_of_arrival_ns: int
    time_of_generation_ns: int
    dtype: DType
    dims: tuple[int, ...]
    payload: bytes | bytearray | memoryview = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "dtype", DType.parse(self.dtype))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        self.validate()

    def validate(self) -> None:
        validate_topic(self.topic)
        for name in ("seq", "time_of_arrival_ns", "time_of_generation_ns"):
            v = getattr(self, name)
            if not 0 <= v <= _U64_MAX:
                raise InvalidSample(f"{name}={v} outside u64")
        if self.time_of_generation_ns and self.time_of_generation_ns > self.time_of_arrival_ns:
            raise InvalidSample("time_of_generation_ns after time_of_arrival_ns")
        if len(self.dims) > 255:
            raise DimMismatch("more than 255 dims")
        if any(not 0 <= d <= _U32_MAX for d in self.dims):
            raise DimMismatch(f"dims out of u32 range: {self.dims}")
        expected = self.dtype.itemsize * math.prod(self.dims)
        if len(self.payload) != expected:
            raise DimMismatch(
                f"payload is {len(self.payload)} bytes, dims {self.dims} of "
                f"{self.dtype.name} need {expected}"
            )

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def array(self) -> np.ndarray:
        """Zero-copy read-only view of the payload."""
        return np.frombuffer(self.payload, dtype=self.dtype.numpy).reshape(self.dims)

    @classmethod
    def from_array(cls, topic: str, seq: int, toa_ns: int, tog_ns: int, arr) -> Sample:
        arr = np.ascontiguousarray(arr)
        dtype = DType.from_numpy(arr.dtype)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        return cls(topic, seq, toa_ns, tog_ns, dtype, arr.shape, arr.tobytes())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.topic == other.topic
            and self.seq == other.seq
            and self.time_of_arrival_ns == other.time_of_arrival_ns
            and self.time_of_generation_ns == other.time_of_generation_ns
            and self.dtype == other.dtype
            and self.dims == other.dims
            and bytes(self.payload) == bytes(other.payload)
        )

    __hash__ = None


def encode_frames(sample: Sample) -> list[bytes]:
    """The three frames (topic, header, payload) without length prefixes."""
    topic = sample.topic.encode("utf-8")
    if len(topic) > MAX_TOPIC_BYTES:
        raise OversizeTopic(sample.topic[:40])
    sample.validate()
    header = _HEADER.pack(
        SCHEMA_VERSION,
        0,
        sample.seq,
        sample.time_of_arrival_ns,
        sample.time_of_generation_ns,
        int(sample.dtype),
        len(sample.dims),
        0,
    ) + struct.pack(f"<{len(sample.dims)}I", *sample.dims)
    return [topic, header, sample.payload]


def encode_message(sample: Sample) -> bytes:
    """Length-prefixed wire bytes for ``sample``."""
    parts = []
    for frame in encode_frames(sample):
        parts.append(_LEN.pack(len(frame)))
        parts.append(frame)
    return b"".join(parts)


def split_frames(data: bytes | memoryview) -> list[memoryview]:
    """Split length-prefixed wire bytes into exactly three frames."""
    view = memoryview(data)
    frames = []
    pos = 0
    while pos < len(view):
        if pos + 4 > len(view):
            raise Truncated("partial length prefix")
        (n,) = _LEN.unpack_from(view, pos)
        pos += 4
        if pos + n > len(view):
            raise Truncated(f"frame claims {n} bytes, {len(view) - pos} available")
        frames.append(view[pos : pos + n])
        pos += n
    if len(frames) != 3:
        raise Truncated(f"expected 3 frames, got {len(frames)}")
    return frames


def decode_header(header: bytes | memoryview) -> tuple:
    """Return (seq, toa, tog, dtype, dims) after version and length checks."""
    if len(header) < HEADER_FIXED_BYTES:
        raise Truncated(f"header of {len(header)} bytes")
    version, _flags, seq, toa, tog, dtype, ndim, _reserved = _HEADER.unpack_from(header, 0)
    if version != SCHEMA_VERSION:
        raise BadVersion(f"schema_version {version}")
    if len(header) != HEADER_FIXED_BYTES + 4 * ndim:
        raise Truncated(f"header holds {len(header)} bytes for ndim={ndim}")
    dims = struct.unpack_from(f"<{ndim}I", header, HEADER_FIXED_BYTES)
    try:
        dtype = DType(dtype)
    except ValueError:
        raise DimMismatch(f"unknown dtype code {dtype}") from None
    return seq, toa, tog, dtype, dims


def decode_message(frames: bytes | memoryview | Sequence) -> Sample:
    """Inverse of :func:`encode_message`; also accepts the three raw frames."""
    if isinstance(frames, (bytes, bytearray, memoryview)):
        frames = split_frames(frames)
    if len(frames) != 3:
        raise Truncated(f"expected 3 frames, got {len(frames)}")
    topic_b, header, payload = frames
    seq, toa, tog, dtype, dims = decode_header(header)
    expected = dtype.itemsize * math.prod(dims)
    if len(payload) != expected:
        raise DimMismatch(f"payload {len(payload)} bytes, header implies {expected}")
    try:
        topic = bytes(topic_b).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidTopic("topic is not utf-8") from exc
    return Sample(topic, seq, toa, tog, dtype, dims, bytes(payload))


def check_frames(frames: Sequence) -> str:
    """Validate three raw frames without copying the payload; return the topic."""
    if len(frames) != 3:
        raise Truncated(f"expected 3 frames, got {len(frames)}")
    topic_b, header, payload = frames
    if len(topic_b) > MAX_TOPIC_BYTES:
        raise OversizeTopic(f"topic frame of {len(topic_b)} bytes")
    _seq, toa, tog, dtype, dims = decode_header(header)
    if len(payload) != dtype.itemsize * math.prod(dims):
        raise DimMismatch(f"payload {len(payload)} bytes inconsistent with dims {dims}")
    if tog and tog > toa:
        raise InvalidSample("time_of_generation_ns after time_of_arrival_ns")
    try:
        topic = bytes(topic_b).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidTopic("topic is not utf-8") from exc
    return validate_topic(topic)


def wire_size(sample: Sample) -> int:
    return 12 + len(sample.topic.encode("utf-8")) + HEADER_FIXED_BYTES + 4 * len(sample.dims) + sample.nbytes


def control_sample(topic: str, text: str | bytes = b"", seq: int = 0, toa_ns: int = 0) -> Sample:
    """Build a u8 sample carrying ``text`` (used for reserved control topics)."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return Sample(topic, seq, toa_ns, 0, DType.U8, (len(data),), data)


class SubscriptionTable:
    """Set of (endpoint, topic prefix) pairs with a per-topic lookup cache."""

    def __init__(self) -> None:
        self._prefixes: dict[object, set[str]] = {}
        self._cache: dict[str, frozenset] = {}

    def add(self, endpoint, prefix: str) -> bool:
        if prefix != WILDCARD:
            validate_topic(prefix)
        prefixes = self._prefixes.setdefault(endpoint, set())
        if prefix in prefixes:
            return False
        prefixes.add(prefix)
        self._cache.clear()
        return True

    def remove(self, endpoint, prefix: str | None = None) -> None:
        """Drop one prefix, or every prefix of ``endpoint`` when ``prefix`` is None."""
        if endpoint not in self._prefixes:
            return
        if prefix is None:
            del self._prefixes[endpoint]
        else:
            self._prefixes[endpoint].discard(prefix)
            if not self._prefixes[endpoint]:
                del self._prefixes[endpoint]
        self._cache.clear()

    def prefixes(self, endpoint=None) -> set[str]:
        if endpoint is not None:
            return set(self._prefixes.get(endpoint, ()))
        out: set[str] = set()
        for p in self._prefixes.values():
            out |= p
        return out

    @property
    def entries(self) -> set[tuple]:
        return {(ep, p) for ep, ps in self._prefixes.items() for p in ps}

    def destinations(self, topic: str, exclude=None) -> frozenset:
        dests = self._cache.get(topic)
        if dests is None:
            dests = frozenset(
                ep for ep, ps in self._prefixes.items() if any(match_topic(p, topic) for p in ps)
            )
            self._cache[topic] = dests
        if exclude is not None and exclude in dests:
            return dests - {exclude}
        return dests

    def __len__(self) -> int:
        return sum(len(p) for p in self._prefixes.values())
