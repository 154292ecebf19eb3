"""Image files, the CPDLv1 dictionary format, corpus manifests and reports.

CPDLv1 layout (all integers little-endian)::

    b"CPDLv1"                  magic
    uint8                      layout tag (0 denoise, 1 superres)
    uint32 n, uint32 K, uint32 patch_side
    float64[n*K] per block     row-major, blocks in BLOCK_ORDER[layout]
    uint32 L, L bytes          provenance as UTF-8 JSON (sorted keys)
    uint32                     CRC32 of every preceding byte
"""

import csv
import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from mmcdl.core import PatchGeometry, as_image, bicubic_upsample, to_luminance
from mmcdl.dictlearn import BLOCK_ORDER, DENOISE, SUPERRES, CoupledDictionary, check_layout
from mmcdl.errors import ChecksumError, FormatError, IngestionError, InputError

MAGIC = b"CPDLv1"
LAYOUT_TAGS = {DENOISE: 0, SUPERRES: 1}
_HEADER = struct.Struct("<6sBIII")
_U32 = struct.Struct("<I")

DEFAULT_TOTAL_SAMPLES = 15000
REPORT_FIELDS = ("name", "psnr", "rmse", "ssim", "peak")


# -- images -----------------------------------------------------------------

def load_image(path, luminance=True):
    """Read an image as ``float64`` in [0, 1].

    8-bit data is divided by 255 and 16-bit data by 65535. Colour images are
    reduced to BT.601 luminance unless ``luminance`` is False, in which case
    an ``H x W x 3`` array comes back. ``.npy`` files are returned as stored.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    if path.suffix.lower() == ".npy":
        try:
            arr = np.load(path, allow_pickle=False).astype(np.float64)
        except (ValueError, OSError) as exc:
            raise FormatError(f"{path}: cannot decode array: {exc}") from exc
        if arr.ndim == 3 and luminance:
            arr = to_luminance(arr)
        return arr
    try:
        with Image.open(path) as im:
            im.load()
            return _pil_to_array(im, luminance)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode image: {exc}") from exc


def _pil_to_array(im, luminance):
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        return arr / 65535.0
    if mode in ("L", "1"):
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if mode == "LA":
        return np.asarray(im.getchannel(0), dtype=np.float64) / 255.0
    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return to_luminance(rgb) if luminance else rgb


def save_image(path, img, bit_depth=8):
    """Write a [0, 1] image: PNG (8 or 16 bit), binary PGM (8 bit) or ``.npy``.

    Integer formats clip to [0, 1] and round to the nearest level.
    """
    path = Path(path)
    arr = as_image(img)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        np.save(path, arr)
        return path
    if bit_depth not in (8, 16):
        raise InputError("bit_depth must be 8 or 16")
    if suffix == ".pgm" and bit_depth != 8:
        raise InputError("PGM output is 8-bit only")
    if suffix not in (".png", ".pgm"):
        raise InputError(f"{path}: unsupported image format {suffix!r}")
    levels = 255 if bit_depth == 8 else 65535
    q = np.round(np.clip(arr, 0.0, 1.0) * levels)
    data = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    im = Image.fromarray(data)
    im.save(path, format="PNG" if suffix == ".png" else "PPM")
    return path


# -- dictionaries -----------------------------------------------------------

def dictionary_bytes(cd):
    if cd.layout not in LAYOUT_TAGS:
        check_layout(cd.layout)
    parts = [_HEADER.pack(MAGIC, LAYOUT_TAGS[cd.layout], cd.n, cd.K, cd.patch_side)]
    for name in BLOCK_ORDER[cd.layout]:
        parts.append(np.ascontiguousarray(cd.blocks[name], dtype="<f8").tobytes())
    meta = json.dumps(cd.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_dictionary(path, cd):
    path = Path(path)
    path.write_bytes(dictionary_bytes(cd))
    return path


def parse_dictionary(data, source="<bytes>"):
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not a CPDLv1 dictionary (bad magic)")
    if len(data) < _HEADER.size + 2 * _U32.size:
        raise ChecksumError(f"{source}: file truncated")
    body, (crc,) = data[:-4], _U32.unpack(data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: checksum mismatch (file truncated or corrupted)")
    _, tag, n, K, p = _HEADER.unpack_from(body, 0)
    layouts = {v: k for k, v in LAYOUT_TAGS.items()}
    if tag not in layouts:
        raise FormatError(f"{source}: unknown layout tag {tag}")
    if p * p != n:
        raise FormatError(f"{source}: patch side {p} inconsistent with n={n}")
    layout = layouts[tag]
    off = _HEADER.size
    blocks = {}
    size = n * K * 8
    for name in BLOCK_ORDER[layout]:
        if off + size > len(body):
            raise FormatError(f"{source}: block {name} extends past the end of the file")
        blocks[name] = np.frombuffer(body, dtype="<f8", count=n * K, offset=off).reshape(n, K).astype(np.float64)
        off += size
    (mlen,) = _U32.unpack_from(body, off)
    off += _U32.size
    if off + mlen != len(body):
        raise FormatError(f"{source}: provenance length does not match the file size")
    try:
        prov = json.loads(body[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: bad provenance JSON: {exc}") from exc
    return CoupledDictionary(layout, K, p, blocks, prov)


def load_dictionary(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    return parse_dictionary(path.read_bytes(), str(path))


# -- corpora ----------------------------------------------------------------

@dataclass
class Manifest:
    """Registered (target, guidance) image pairs plus sampling settings."""

    pairs: list
    patch_side: int = 8
    samples_per_pair: int | None = None
    seed: int = 0
    test_pairs: list = field(default_factory=list)
    layout: str = DENOISE
    sigma: float = 0.0
    scale: int = 4
    remove_dc: bool = True
    source: str = ""

    def __post_init__(self):
        check_layout(self.layout)
        if self.samples_per_pair is None:
            self.samples_per_pair = DEFAULT_TOTAL_SAMPLES // max(len(self.pairs), 1)
        if self.samples_per_pair < 0:
            raise InputError("samples_per_pair must be >= 0")
        if self.patch_side < 1:
            raise InputError("patch_side must be >= 1")
        train = {Path(p) for pair in self.pairs for p in pair}
        test = {Path(p) for pair in self.test_pairs for p in pair}
        shared = sorted(str(p) for p in train & test)
        if shared:
            raise IngestionError(f"training and test groups share files: {shared}")
        for pair in list(self.pairs) + list(self.test_pairs):
            for p in pair:
                if not Path(p).is_file():
                    raise IngestionError(f"manifest {self.source}: missing file {p}")


def _pair_list(raw, base):
    out = []
    for item in raw:
        if isinstance(item, dict):
            item = (item["target"], item["guidance"])
        if len(item) != 2:
            raise InputError(f"manifest pair {item!r} must name a target and a guidance image")
        out.append(tuple(str((base / p) if not Path(p).is_absolute() else Path(p)) for p in item))
    return out


def load_manifest(path):
    """Read a JSON manifest; relative image paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: manifest not found")
    try:
        raw = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: invalid manifest JSON: {exc}") from exc
    if not isinstance(raw, dict) or "pairs" not in raw:
        raise InputError(f"{path}: manifest needs a 'pairs' list")
    base = path.parent
    known = {"patch_side", "samples_per_pair", "seed", "layout", "sigma", "scale", "remove_dc"}
    kw = {k: raw[k] for k in known if k in raw}
    return Manifest(pairs=_pair_list(raw["pairs"], base),
                    test_pairs=_pair_list(raw.get("test_pairs", []), base),
                    source=str(path), **kw)


@dataclass
class Corpus:
    signals: np.ndarray
    layout: str
    patch_side: int
    corpus_hash: str


def _sample_block(img, p, r, c):
    idx = r[:, None] + np.arange(p)[None, :]
    jdx = c[:, None] + np.arange(p)[None, :]
    blocks = img[idx[:, :, None], jdx[:, None, :]]  # (P, p, p)
    return blocks.reshape(len(r), p * p).T


def ingest_corpus(manifest):
    """Sample stacked training patches from every manifest pair.

    Patch origins are drawn uniformly, seeded per pair from ``(seed, index)``.
    Denoising rows are ``[target + sigma noise; guidance]``; super-resolution
    rows are ``[HR target; upsampled degraded target; guidance]``. With
    ``remove_dc`` each block of each column is made zero-mean.
    """
    from mmcdl.tasks import add_gaussian_noise, crop_to_multiple, degrade_for_sr

    m = manifest
    p = m.patch_side
    cols = []
    for idx, (tpath, gpath) in enumerate(m.pairs):
        tgt = load_image(tpath)
        gde = load_image(gpath)
        if tgt.shape != gde.shape:
            raise IngestionError(
                f"pair {idx} ({tpath}, {gpath}) is not registered: {tgt.shape} vs {gde.shape}")
        if m.layout == DENOISE:
            noisy = add_gaussian_noise(tgt, m.sigma, seed=[m.seed, idx, 1])
            rows = [noisy, gde]
        else:
            hr = crop_to_multiple(tgt, m.scale)
            gde = crop_to_multiple(gde, m.scale)
            up = bicubic_upsample(degrade_for_sr(hr, m.scale), m.scale)
            rows = [hr, up, gde]
        PatchGeometry(p, 1, *rows[0].shape)  # size check
        rng = np.random.default_rng([m.seed, idx])
        k = m.samples_per_pair
        r = rng.integers(0, rows[0].shape[0] - p + 1, size=k)
        c = rng.integers(0, rows[0].shape[1] - p + 1, size=k)
        blocks = [_sample_block(img, p, r, c) for img in rows]
        if m.remove_dc:
            blocks = [b - b.mean(axis=0, keepdims=True) for b in blocks]
        cols.append(np.vstack(blocks))
    d = (2 if m.layout == DENOISE else 3) * p * p
    X = np.hstack(cols) if cols else np.zeros((d, 0))
    X = np.ascontiguousarray(X)
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", *X.shape))
    h.update(X.astype("<f8").tobytes())
    return Corpus(X, m.layout, p, h.hexdigest())


# -- reports ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return str(v)


def write_report(path, reports):
    """CSV with one row per report followed by an ``average`` row."""
    reports = list(reports)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([r.name, _fmt(r.psnr), _fmt(r.rmse), _fmt(r.ssim), _fmt(r.peak)])
        if reports:
            avg = [float(np.mean([getattr(r, f) for r in reports])) for f in REPORT_FIELDS[1:]]
            w.writerow(["average"] + [_fmt(v) for v in avg])
    return path


def read_report(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in REPORT_FIELDS[1:]:
            row[k] = float(row[k])
    return rows


def write_objective_log(path, values):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "objective"))
        for i, v in enumerate(values, 1):
            w.writerow((i, repr(float(v))))
    return path
