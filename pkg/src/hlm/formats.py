"""Binary file formats: HLMD datasets and HLCK parameter checkpoints.

Both share the same envelope discipline: 4-byte magic, u16 version,
little-endian fixed-width fields, a header-declared payload length, and
a trailing CRC32 over the payload. Readers fail loudly on bad magic,
unknown versions, truncation, and checksum mismatch.

HLMD layout:
    magic "HLMD" | version u16 | n_styles u16 | n_contents u16 |
    n_sequences u32 | seed u64 | fps f64 | payload_len u64 |
    payload | crc32 u32
    payload = style table, content table, sequence records
    tables  = per entry: u32 byte length + UTF-8 JSON of the spec
    record  = T u32 | fps f32 | content u16 | style u16 | split u8 |
              T*20 float32 frames, row-major

HLCK layout:
    magic "HLCK" | version u16 | n_entries u32 | payload_len u64 |
    payload | crc32 u32
    payload = per entry: u32 name length + UTF-8 name + u8 ndim +
              ndim u32 dims + float64 values, row-major
"""

import json
import struct
import zlib

import numpy as np

from .motion import ContentSpec, Dataset, MotionSequence, StyleSpec

HLMD_MAGIC = b"HLMD"
HLCK_MAGIC = b"HLCK"
HLMD_VERSION = 1
HLCK_VERSION = 1


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf, name):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.name}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


# -- HLMD datasets ----------------------------------------------------

def _encode_tables(dataset):
    chunks = []
    for spec in dataset.style_specs:
        blob = json.dumps({"style_id": spec.style_id, "parameters": spec.parameters,
                           "jitter_std": spec.jitter_std}, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(blob)) + blob)
    for spec in dataset.content_specs:
        blob = json.dumps({"content_id": spec.content_id, "prompt_text": spec.prompt_text,
                           "trajectory": spec.trajectory}, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(chunks)


_SPLIT_CODES = {"train": 0, "test": 1, "generated": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def dataset_payload(dataset):
    style_index = {s: i for i, s in enumerate(dataset.style_ids)}
    content_index = {c: i for i, c in enumerate(dataset.content_ids)}
    chunks = [_encode_tables(dataset)]
    for seq in dataset.sequences:
        frames = np.ascontiguousarray(seq.frames, dtype="<f4")
        chunks.append(struct.pack(
            "<IfHHB", seq.num_frames, seq.fps,
            content_index[seq.content_id], style_index[seq.style_id],
            _SPLIT_CODES[seq.split]))
        chunks.append(frames.tobytes())
    return b"".join(chunks)


def save_dataset(dataset, path):
    payload = dataset_payload(dataset)
    header = HLMD_MAGIC + struct.pack(
        "<HHHIQdQ", HLMD_VERSION, len(dataset.style_specs), len(dataset.content_specs),
        len(dataset.sequences), dataset.seed, dataset.fps, len(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf, str(path))
    if rd.take(4) != HLMD_MAGIC:
        raise FormatError(f"{path}: bad magic, not a dataset file")
    version, n_styles, n_contents, n_seq, seed, fps, payload_len = rd.unpack("HHHIQdQ")
    if version != HLMD_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    payload = rd.take(payload_len)
    (crc_stored,) = rd.unpack("I")
    if rd.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - rd.pos} trailing bytes after checksum")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{path}: checksum mismatch, file corrupted")

    prd = _Reader(payload, str(path))
    styles, contents = [], []
    for _ in range(n_styles):
        (blen,) = prd.unpack("I")
        d = json.loads(prd.take(blen).decode("utf-8"))
        styles.append(StyleSpec(d["style_id"], d["parameters"], d["jitter_std"]))
    for _ in range(n_contents):
        (blen,) = prd.unpack("I")
        d = json.loads(prd.take(blen).decode("utf-8"))
        contents.append(ContentSpec(d["content_id"], d["prompt_text"], d["trajectory"]))
    sequences = []
    from .motion import FEATURE_DIM
    for _ in range(n_seq):
        t, seq_fps, ci, si, split_flag = prd.unpack("IfHHB")
        raw = prd.take(t * FEATURE_DIM * 4)
        frames = np.frombuffer(raw, dtype="<f4").reshape(t, FEATURE_DIM)
        if split_flag not in _SPLIT_NAMES:
            raise FormatError(f"{path}: unknown split code {split_flag}")
        sequences.append(MotionSequence(
            frames, seq_fps, contents[ci].content_id, styles[si].style_id,
            _SPLIT_NAMES[split_flag]))
    if prd.pos != len(payload):
        raise FormatError(f"{path}: payload length mismatch")
    return Dataset(sequences, styles, contents, seed, fps)


def expected_file_size(dataset):
    """Header size + header-declared payload length + checksum."""
    header = 4 + struct.calcsize("<HHHIQdQ")
    return header + len(dataset_payload(dataset)) + 4


# -- HLCK checkpoints -------------------------------------------------

def checkpoint_payload(named_arrays):
    chunks = []
    for name, arr in named_arrays.items():
        arr = np.asarray(arr, dtype="<f8")   # ascontiguousarray would promote 0-d
        nb = name.encode("utf-8")
        if arr.ndim > 255:
            raise FormatError(f"checkpoint entry {name!r}: too many dims")
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def write_checkpoint_bytes(named_arrays):
    payload = checkpoint_payload(named_arrays)
    header = HLCK_MAGIC + struct.pack("<HIQ", HLCK_VERSION, len(named_arrays), len(payload))
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def read_checkpoint_bytes(buf, name="checkpoint"):
    rd = _Reader(buf, name)
    if rd.take(4) != HLCK_MAGIC:
        raise FormatError(f"{name}: bad magic, not a checkpoint")
    version, n_entries, payload_len = rd.unpack("HIQ")
    if version != HLCK_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    payload = rd.take(payload_len)
    (crc_stored,) = rd.unpack("I")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{name}: checksum mismatch, file corrupted")
    prd = _Reader(payload, name)
    out = {}
    for _ in range(n_entries):
        (nlen,) = prd.unpack("I")
        key = prd.take(nlen).decode("utf-8")
        (ndim,) = prd.unpack("B")
        dims = prd.unpack(f"{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(prd.take(count * 8), dtype="<f8").reshape(dims)
        out[key] = arr.copy()
    if prd.pos != len(payload):
        raise FormatError(f"{name}: payload length mismatch")
    return out
