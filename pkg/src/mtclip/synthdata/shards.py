"""Binary shard files and their key=value manifests.

Layout (all integers little-endian)::

    header   : b"MTCX" | u16 version | u32 count | u16 image_size | u16 class_count | u16 flags
    record*  : u32 body_length | body
    body     : u8  rgb[3*S*S]          (channel-major)
               u16 caption_length | caption (UTF-8)
               u8  mask[S*S]
               f32 disparity[S*S]
               f32 normals[3*S*S]
               [pseudo block, same layout as mask/disparity/normals]   if flags & 1

Any inconsistency raises :class:`FormatError` carrying the byte offset where
reading failed.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mtclip.errors import FormatError
from mtclip.synthdata.oracle import PseudoLabelSet
from mtclip.synthdata.scenes import NUM_CLASSES, Sample

MAGIC = b"MTCX"
VERSION = 1
FLAG_PSEUDO = 1
_HEADER = struct.Struct("<4sHIHHH")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def _dense_block_size(s: int) -> int:
    return s * s + 4 * s * s + 4 * 3 * s * s


def _pack_dense(mask, disparity, normals) -> bytes:
    return (
        np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(disparity, dtype="<f4").tobytes()
        + np.ascontiguousarray(normals, dtype="<f4").tobytes()
    )


def _unpack_dense(buf: memoryview, s: int):
    n = s * s
    mask = np.frombuffer(buf[:n], dtype=np.uint8).reshape(s, s).copy()
    disp = np.frombuffer(buf[n:n + 4 * n], dtype="<f4").reshape(s, s).astype(np.float32)
    normals = np.frombuffer(buf[5 * n:5 * n + 12 * n], dtype="<f4").reshape(3, s, s).astype(np.float32)
    return mask, disp, normals


def write_shard(path, samples: Sequence[Sample], pseudo: Optional[Sequence[PseudoLabelSet]] = None,
                num_classes: int = NUM_CLASSES) -> Path:
    path = Path(path)
    if pseudo is not None and len(pseudo) != len(samples):
        raise ValueError("pseudo-label list must match the sample list")
    s = samples[0].image_size if samples else 0
    flags = FLAG_PSEUDO if pseudo is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(samples), s, num_classes, flags))
        for i, sample in enumerate(samples):
            if sample.image_size != s:
                raise ValueError("all samples in a shard must share one image size")
            caption = sample.caption.encode("utf-8")
            body = b"".join([
                np.ascontiguousarray(sample.pixels, dtype=np.uint8).tobytes(),
                _U16.pack(len(caption)),
                caption,
                _pack_dense(sample.gt_mask, sample.gt_disparity, sample.gt_normals),
            ])
            if pseudo is not None:
                p = pseudo[i]
                body += _pack_dense(p.mask, p.disparity, p.normals)
            fh.write(_U32.pack(len(body)))
            fh.write(body)
    return path


@dataclasses.dataclass
class ShardHeader:
    count: int
    image_size: int
    num_classes: int
    has_pseudo: bool


def _read_header(buf: memoryview) -> ShardHeader:
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    _, version, count, s, classes, flags = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    return ShardHeader(count, s, classes, bool(flags & FLAG_PSEUDO))


def _iter_records(buf: memoryview, header: ShardHeader):
    s = header.image_size
    fixed = 3 * s * s + 2 + _dense_block_size(s) * (2 if header.has_pseudo else 1)
    pos = _HEADER.size
    for i in range(header.count):
        if pos + _U32.size > len(buf):
            raise FormatError(f"record {i} of {header.count} missing: file ends early", offset=pos)
        (length,) = _U32.unpack_from(buf, pos)
        start = pos + _U32.size
        if start + length > len(buf):
            raise FormatError(f"record {i} truncated: needs {length} bytes, {len(buf) - start} remain", offset=pos)
        if length < fixed:
            raise FormatError(f"record {i} length {length} shorter than the fixed layout ({fixed})", offset=pos)
        body = buf[start:start + length]
        pix_n = 3 * s * s
        (cap_len,) = _U16.unpack_from(body, pix_n)
        if length != fixed + cap_len:
            raise FormatError(f"record {i} length {length} inconsistent with header (expected {fixed + cap_len})",
                              offset=pos)
        yield i, pos, body, pix_n, cap_len
        pos = start + length
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {header.count} records", offset=pos)


def read_shard(path) -> Tuple[List[Sample], Optional[List[PseudoLabelSet]]]:
    """Read every record. Returns ``(samples, pseudo_labels_or_None)``."""
    buf = memoryview(Path(path).read_bytes())
    header = _read_header(buf)
    s = header.image_size
    samples: List[Sample] = []
    pseudo: Optional[List[PseudoLabelSet]] = [] if header.has_pseudo else None
    dense = _dense_block_size(s)
    for i, pos, body, pix_n, cap_len in _iter_records(buf, header):
        pixels = np.frombuffer(body[:pix_n], dtype=np.uint8).reshape(3, s, s).copy()
        try:
            caption = bytes(body[pix_n + 2:pix_n + 2 + cap_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record {i} caption is not UTF-8", offset=pos) from exc
        off = pix_n + 2 + cap_len
        mask, disp, normals = _unpack_dense(body[off:off + dense], s)
        samples.append(Sample(pixels, caption, mask, disp, normals))
        if pseudo is not None:
            pm, pd, pn = _unpack_dense(body[off + dense:off + 2 * dense], s)
            pseudo.append(PseudoLabelSet(pm, pd, pn))
    return samples, pseudo


@dataclasses.dataclass
class ShardArrays:
    """Stacked, memory-light view of a shard for training and evaluation."""

    pixels: np.ndarray           # uint8 (N, 3, S, S)
    captions: List[str]
    gt_mask: np.ndarray          # uint8 (N, S, S)
    gt_disparity: np.ndarray     # float32 (N, S, S)
    gt_normals: np.ndarray       # float32 (N, 3, S, S)
    pseudo_mask: Optional[np.ndarray] = None
    pseudo_disparity: Optional[np.ndarray] = None
    pseudo_normals: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def has_pseudo(self) -> bool:
        return self.pseudo_mask is not None

    def images(self, idx) -> np.ndarray:
        """Float64 images in [0, 1]; identical to ``Sample.image`` cast to float64."""
        return _PIXEL_LUT[self.pixels[idx]]

    def dominant_class(self) -> np.ndarray:
        counts = np.stack([np.bincount(m.reshape(-1), minlength=NUM_CLASSES) for m in self.gt_mask])
        counts[:, 0] = 0
        return counts.argmax(axis=1)

    def subset(self, idx) -> "ShardArrays":
        idx = np.asarray(idx)
        pick = (lambda a: None if a is None else a[idx])
        return ShardArrays(self.pixels[idx], [self.captions[i] for i in idx], self.gt_mask[idx],
                           self.gt_disparity[idx], self.gt_normals[idx], pick(self.pseudo_mask),
                           pick(self.pseudo_disparity), pick(self.pseudo_normals))


_PIXEL_LUT = (np.arange(256, dtype=np.float32) / np.float32(255.0)).astype(np.float64)


def stack_samples(samples: Sequence[Sample], pseudo: Optional[Sequence[PseudoLabelSet]] = None) -> ShardArrays:
    arrays = ShardArrays(
        pixels=np.stack([s.pixels for s in samples]),
        captions=[s.caption for s in samples],
        gt_mask=np.stack([s.gt_mask for s in samples]),
        gt_disparity=np.stack([s.gt_disparity for s in samples]),
        gt_normals=np.stack([s.gt_normals for s in samples]),
    )
    if pseudo is not None:
        arrays.pseudo_mask = np.stack([p.mask for p in pseudo])
        arrays.pseudo_disparity = np.stack([p.disparity for p in pseudo])
        arrays.pseudo_normals = np.stack([p.normals for p in pseudo])
    return arrays


def load_arrays(path) -> ShardArrays:
    samples, pseudo = read_shard(path)
    return stack_samples(samples, pseudo)


# ---------------------------------------------------------------------------
# manifest sidecar
# ---------------------------------------------------------------------------

def manifest_path(shard_path) -> Path:
    return Path(str(shard_path) + ".manifest")


def write_manifest(shard_path, entries: Dict[str, str]) -> Path:
    path = manifest_path(shard_path)
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    return path


def read_manifest(shard_path) -> Dict[str, str]:
    from mtclip.config import read_file

    return read_file(manifest_path(shard_path))


def class_pixel_counts(masks: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    return np.bincount(np.asarray(masks).reshape(-1), minlength=num_classes)[:num_classes]
