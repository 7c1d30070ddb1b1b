"""On-disk formats: cohort bundles, model bundles and raw matrix-dump import.

Cohort bundle
    A directory holding ``manifest.json`` and one little-endian blob per
    participant. Each blob stores ``(block, character, channel, sample,
    subband)`` in C order; the manifest records dimensions, dtype and value
    count per blob so that size mismatches are caught before any array is
    built.

Model bundle
    A single zip archive: ``manifest.json`` plus ``.npy`` members for the
    global weights, every fine-tuned weight set and the template bank. Member
    timestamps are pinned, so equal models give byte-identical archives.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .network import (NetworkWeights, TrainingConfig, arch_from_dict, arch_to_dict,
                      weights_from_arrays, weights_to_arrays)
from .signal import (OCCIPITAL_CHANNELS, CohortDataset, FilterBankConfig, ParticipantRecords,
                     SpellerLayout, epochs_from_raw)
from .similarity import TemplateBank

COHORT_FORMAT = "ssvep-cohort"
MODEL_FORMAT = "ssvep-model"
FORMAT_VERSION = "1"
COHORT_DIMS = ("block", "character", "channel", "sample", "subband")
DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

PathLike = Union[str, os.PathLike]


class BundleError(ValueError):
    """Base class for malformed bundles and dumps."""


class BundleVersionError(BundleError):
    pass


class BundleDimensionError(BundleError):
    pass


class BundleTruncatedError(BundleError):
    pass


class FingerprintMismatchError(BundleError):
    pass


class MissingChannelError(BundleError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InconsistentDumpError(BundleError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> bytes:
    """Sorted, indented JSON with a trailing newline; stable across runs."""
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n").encode()


def _grid_order(rec: ParticipantRecords, n_blocks: int, m: int) -> NDArray[np.int64]:
    """Epoch indices arranged as a full ``(block, character)`` grid."""
    index = np.full((n_blocks, m), -1, dtype=np.int64)
    for i, (b, c) in enumerate(zip(rec.blocks, rec.labels)):
        if not 0 <= b < n_blocks or index[b, c] >= 0:
            raise BundleDimensionError(
                f"participant {rec.participant_id}: epochs do not form a block x character grid")
        index[b, c] = i
    if np.any(index < 0):
        raise BundleDimensionError(
            f"participant {rec.participant_id}: some (block, character) cells are empty")
    return index.ravel()


def _n_blocks(cohort: CohortDataset) -> int:
    counts = {int(rec.blocks.max()) + 1 if len(rec) else 0 for rec in cohort.participants}
    if len(counts) != 1:
        raise BundleDimensionError("participants have different block counts")
    return counts.pop()


def cohort_fingerprint(cohort: CohortDataset) -> str:
    """SHA-256 over layout, rate, channel names, ids, labels and sample bytes.

    Samples are hashed in their stored dtype, so a cohort loaded from a
    bundle has the fingerprint recorded in that bundle.
    """
    h = hashlib.sha256()
    header = {"layout": cohort.layout.to_dict(), "fs": float(cohort.fs),
              "channel_names": list(cohort.channel_names),
              "participants": cohort.participant_ids}
    h.update(canonical_json(header))
    for rec in cohort.participants:
        data = np.ascontiguousarray(rec.data)
        h.update(f"{rec.participant_id}|{data.dtype.str}|{data.shape}".encode())
        h.update(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())
        h.update(rec.labels.astype("<i8").tobytes())
        h.update(rec.blocks.astype("<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cohort bundles

def save_cohort(cohort: CohortDataset, path: PathLike, dtype: str = "f32le") -> Path:
    """Write ``cohort`` as a bundle directory; returns the manifest path.

    ``dtype`` is ``'f32le'`` or ``'f64le'``. Samples are cast to it, so the
    round trip is bitwise whenever the data is representable in that dtype.
    Blobs are written first and the manifest last, each atomically.
    """
    if dtype not in DTYPES:
        raise ValueError(f"unsupported sample dtype {dtype!r}; use one of {sorted(DTYPES)}")
    if cohort.n_participants == 0:
        raise ValueError("cannot save an empty cohort")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = cohort.layout.n_classes
    n_blocks = _n_blocks(cohort)
    c, nt, ns = cohort.epoch_shape
    entries, blobs = [], []
    for k, rec in enumerate(cohort.participants):
        order = _grid_order(rec, n_blocks, m)
        blob = np.ascontiguousarray(rec.data[order], dtype=DTYPES[dtype])
        blobs.append(blob)
        name = f"p{k:03d}.{dtype}"
        _atomic_write(path / name, blob.tobytes())
        entries.append({"id": rec.participant_id, "file": name, "n_values": int(blob.size),
                        "sha256": hashlib.sha256(blob.tobytes()).hexdigest()})
    manifest = {
        "format": COHORT_FORMAT,
        "format_version": FORMAT_VERSION,
        "dtype": dtype,
        "dims": list(COHORT_DIMS),
        "shape": {"block": n_blocks, "character": m, "channel": c, "sample": nt,
                  "subband": ns},
        "layout": cohort.layout.to_dict(),
        "fs": float(cohort.fs),
        "channel_names": list(cohort.channel_names),
        "participants": entries,
        "provenance": cohort.provenance,
    }
    # fingerprint of the cohort exactly as load_cohort will return it
    manifest["fingerprint"] = cohort_fingerprint(_cohort_from_blobs(manifest, blobs))
    target = path / "manifest.json"
    _atomic_write(target, canonical_json(manifest))
    return target


def _read_manifest(path: Path) -> dict:
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise BundleError(f"no cohort manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"cohort manifest {mpath} is not valid JSON: {exc}") from None
    if manifest.get("format") != COHORT_FORMAT:
        raise BundleError(f"{mpath} is not a cohort bundle manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleVersionError(
            f"cohort bundle version {manifest.get('format_version')!r} is not supported "
            f"(expected {FORMAT_VERSION!r})")
    return manifest


def _cohort_from_blobs(manifest: dict, blobs: Sequence[NDArray]) -> CohortDataset:
    shape = manifest["shape"]
    grid = tuple(shape[d] for d in COHORT_DIMS)
    n_blocks, m = grid[0], grid[1]
    labels = np.tile(np.arange(m), n_blocks)
    blocks = np.repeat(np.arange(n_blocks), m)
    parts = [ParticipantRecords(e["id"], b.reshape((n_blocks * m,) + grid[2:]), labels, blocks)
             for e, b in zip(manifest["participants"], blobs)]
    return CohortDataset(SpellerLayout.from_dict(manifest["layout"]), float(manifest["fs"]),
                         parts, tuple(manifest["channel_names"]), manifest.get("provenance", {}))


def load_cohort(path: PathLike, verify: bool = True) -> CohortDataset:
    """Read a cohort bundle written by ``save_cohort``.

    Every check runs before any data is returned: the version, that the
    manifest dimensions multiply to each blob's value count, and that each
    blob file holds exactly that many values. With ``verify`` the stored
    fingerprint is recomputed as well.
    """
    path = Path(path)
    manifest = _read_manifest(path)
    root = path if path.is_dir() else path.parent
    try:
        dtype = DTYPES[manifest["dtype"]]
        shape = manifest["shape"]
        grid = [int(shape[d]) for d in COHORT_DIMS]
    except KeyError as exc:
        raise BundleError(f"cohort manifest lacks field {exc}") from None
    if list(manifest.get("dims", [])) != list(COHORT_DIMS):
        raise BundleDimensionError(f"unsupported dimension order {manifest.get('dims')}")
    if len(manifest["channel_names"]) != grid[2]:
        raise BundleDimensionError(
            f"manifest lists {len(manifest['channel_names'])} channel names for "
            f"{grid[2]} channels")
    expected = int(np.prod(grid))
    blobs = []
    for e in manifest["participants"]:
        if int(e["n_values"]) != expected:
            raise BundleDimensionError(
                f"participant {e['id']}: manifest dimensions {dict(zip(COHORT_DIMS, grid))} "
                f"give {expected} values but the blob holds {e['n_values']}")
        fpath = root / e["file"]
        try:
            size = fpath.stat().st_size
        except FileNotFoundError:
            raise BundleTruncatedError(f"participant {e['id']}: blob {fpath} is missing") from None
        want = expected * dtype.itemsize
        if size < want:
            raise BundleTruncatedError(
                f"participant {e['id']}: blob has {size} bytes, expected {want}")
        if size > want:
            raise BundleDimensionError(
                f"participant {e['id']}: blob has {size} bytes, more than the {want} "
                f"implied by the manifest")
        blobs.append(fpath)
    arrays = [np.fromfile(f, dtype=dtype) for f in blobs]
    cohort = _cohort_from_blobs(manifest, arrays)
    if verify and "fingerprint" in manifest and cohort_fingerprint(cohort) != manifest["fingerprint"]:
        raise FingerprintMismatchError(f"cohort bundle {path}: sample data does not match "
                                       f"the stored fingerprint")
    return cohort


def read_fingerprint(path: PathLike) -> str:
    """Stored fingerprint of a cohort bundle without loading the samples."""
    return _read_manifest(Path(path))["fingerprint"]


# ---------------------------------------------------------------------------
# model bundles

@dataclass
class ModelBundle:
    global_weights: NetworkWeights
    ensemble: list
    templates: TemplateBank
    training: TrainingConfig
    layout: SpellerLayout
    fs: float
    participant_ids: list
    cohort_fingerprint: str
    nh: int = 5
    channel_names: tuple = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ensemble)
        if n != len(self.participant_ids) or n != self.templates.n_participants:
            raise BundleDimensionError(
                f"{n} fine-tuned networks, {len(self.participant_ids)} participant ids and "
                f"{self.templates.n_participants} template sets")

    def check_cohort(self, fingerprint: str) -> None:
        if fingerprint != self.cohort_fingerprint:
            raise FingerprintMismatchError(
                f"model was trained on cohort {self.cohort_fingerprint[:12]}, "
                f"not {fingerprint[:12]}")

    def manifest(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": FORMAT_VERSION,
            "architecture": arch_to_dict(self.global_weights.arch),
            "training": self.training.to_dict(),
            "seed": self.training.seed,
            "layout": self.layout.to_dict(),
            "fs": float(self.fs),
            "nh": int(self.nh),
            "channel_names": list(self.channel_names),
            "participant_ids": list(self.participant_ids),
            "n_ensemble": len(self.ensemble),
            "cohort_fingerprint": self.cohort_fingerprint,
            "extra": self.extra,
        }


def _npy_bytes(a: NDArray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _zip_add(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_model(bundle: ModelBundle, path: PathLike) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_add(zf, "manifest.json", canonical_json(bundle.manifest()))
        for k, a in weights_to_arrays(bundle.global_weights).items():
            _zip_add(zf, f"global/{k}.npy", _npy_bytes(a))
        for n, w in enumerate(bundle.ensemble):
            for k, a in weights_to_arrays(w).items():
                _zip_add(zf, f"ensemble/{n:03d}/{k}.npy", _npy_bytes(a))
        _zip_add(zf, "templates/templates.npy", _npy_bytes(bundle.templates.templates))
        _zip_add(zf, "templates/counts.npy", _npy_bytes(bundle.templates.counts))
    _atomic_write(path, buf.getvalue())
    return path


def load_model(path: PathLike) -> ModelBundle:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise BundleError(f"cannot open model bundle {path}: {exc}") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise BundleError(f"{path} has no manifest.json") from None
        if manifest.get("format") != MODEL_FORMAT:
            raise BundleError(f"{path} is not a model bundle")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise BundleVersionError(
                f"model bundle version {manifest.get('format_version')!r} is not supported "
                f"(expected {FORMAT_VERSION!r})")
        names = set(zf.namelist())

        def read(name):
            if name not in names:
                raise BundleTruncatedError(f"model bundle {path} lacks member {name}")
            return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)

        arch = arch_from_dict(manifest["architecture"])
        keys = arch.param_shapes()
        global_w = weights_from_arrays(arch, {k: read(f"global/{k}.npy") for k in keys})
        ens = [weights_from_arrays(arch, {k: read(f"ensemble/{n:03d}/{k}.npy") for k in keys})
               for n in range(int(manifest["n_ensemble"]))]
        templates = TemplateBank(read("templates/templates.npy"), read("templates/counts.npy"))
    return ModelBundle(global_w, ens, templates, TrainingConfig.from_dict(manifest["training"]),
                       SpellerLayout.from_dict(manifest["layout"]), float(manifest["fs"]),
                       list(manifest["participant_ids"]), manifest["cohort_fingerprint"],
                       int(manifest["nh"]), tuple(manifest["channel_names"]),
                       manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# matrix-dump import

RAW_DIMS = ("block", "character", "channel", "sample")


def _load_dump(path: Path, variable: Optional[str]) -> NDArray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            key = variable or (z.files[0] if len(z.files) == 1 else None)
            if key is None or key not in z.files:
                raise InconsistentDumpError(
                    f"{path.name}: choose the array with 'variable' (found {z.files})")
            return z[key]
    if suffix == ".mat":
        from scipy.io import loadmat
        contents = {k: v for k, v in loadmat(path).items() if not k.startswith("__")}
        key = variable or (next(iter(contents)) if len(contents) == 1 else None)
        if key is None or key not in contents:
            raise InconsistentDumpError(
                f"{path.name}: choose the array with 'variable' (found {sorted(contents)})")
        return contents[key]
    raise InconsistentDumpError(f"unsupported dump format {path.name}")


def _mapping(mapping_config) -> dict:
    if isinstance(mapping_config, (str, os.PathLike)):
        return json.loads(Path(mapping_config).read_text())
    return dict(mapping_config)


def import_matrix_dump(path: PathLike, mapping_config) -> CohortDataset:
    """Build a filtered cohort from raw per-participant array dumps.

    ``path`` is a directory of ``.npy``, ``.npz`` or ``.mat`` files, one per
    participant (the file stem becomes the participant id), each holding the
    unfiltered recording of one participant. ``mapping_config`` (a dict or a
    JSON file) describes them:

    ``dim_order``
        Axis names of each dump, a permutation of ``block``, ``character``,
        ``channel`` and ``sample``.
    ``channel_names``
        Names along the channel axis.
    ``freqs``, ``phases``
        Stimulus table; ``character`` index ``i`` flickers at ``freqs[i]``.
    ``fs``, ``pre_stimulus_s``
        Sampling rate and how much of each epoch precedes stimulus onset.
    ``latency_s``, ``duration_s``, ``filter_bank`` (optional)
        Analysis window and filter-bank overrides.
    ``select_channels`` (optional)
        Channels to keep, in output order; defaults to the nine
        parieto-occipital channels.
    ``variable``, ``files`` (optional)
        Array name inside ``.npz``/``.mat`` files and an explicit file list.
    """
    path = Path(path)
    cfg = _mapping(mapping_config)
    try:
        dim_order = list(cfg["dim_order"])
        names = list(cfg["channel_names"])
        layout = SpellerLayout(tuple(cfg["freqs"]),
                               tuple(cfg.get("phases", [0.0] * len(cfg["freqs"]))))
        fs = float(cfg["fs"])
        pre = float(cfg.get("pre_stimulus_s", 0.0))
    except KeyError as exc:
        raise BundleError(f"mapping config lacks field {exc}") from None
    if sorted(dim_order) != sorted(RAW_DIMS):
        raise BundleError(f"dim_order must be a permutation of {list(RAW_DIMS)}, got {dim_order}")
    select = list(cfg.get("select_channels", OCCIPITAL_CHANNELS))
    missing = [ch for ch in select if ch not in names]
    if missing:
        raise MissingChannelError(f"dump lacks channel(s) {', '.join(missing)}")
    picks = [names.index(ch) for ch in select]
    fb = dict(cfg.get("filter_bank", {}))
    fb.update(pre_stimulus_s=pre, latency_s=float(cfg.get("latency_s", fb.get("latency_s", 0.14))),
              duration_s=cfg.get("duration_s"))
    fbcfg = FilterBankConfig(**fb)
    files = ([path / f for f in cfg["files"]] if "files" in cfg else
             sorted(p for p in path.iterdir() if p.suffix.lower() in (".npy", ".npz", ".mat")))
    if not files:
        raise InconsistentDumpError(f"no array dumps found in {path}")
    perm = [dim_order.index(d) for d in RAW_DIMS]
    parts, shape = [], None
    for f in files:
        raw = np.asarray(_load_dump(f, cfg.get("variable")), dtype=np.float64)
        if raw.ndim != 4:
            raise InconsistentDumpError(f"{f.name}: expected 4 axes {dim_order}, got {raw.shape}")
        raw = raw.transpose(perm)
        if raw.shape[2] != len(names):
            raise InconsistentDumpError(
                f"{f.name}: {raw.shape[2]} channels but {len(names)} channel names")
        if raw.shape[1] != layout.n_classes:
            raise InconsistentDumpError(
                f"{f.name}: {raw.shape[1]} characters but {layout.n_classes} frequencies")
        if shape is None:
            shape = raw.shape
        elif raw.shape != shape:
            raise InconsistentDumpError(
                f"{f.name}: shape {dict(zip(RAW_DIMS, raw.shape))} differs from "
                f"{dict(zip(RAW_DIMS, shape))} of {files[0].name}")
        n_blocks, m = raw.shape[:2]
        raw = raw[:, :, picks, :].reshape((n_blocks * m, len(picks), raw.shape[3]))
        data = epochs_from_raw(raw, fs, fbcfg)
        parts.append(ParticipantRecords(f.stem, data, np.tile(np.arange(m), n_blocks),
                                        np.repeat(np.arange(n_blocks), m)))
    provenance = {"source": "import", "mapping": {k: v for k, v in cfg.items()},
                  "files": [f.name for f in files]}
    return CohortDataset(layout, fs, parts, tuple(select), provenance)
