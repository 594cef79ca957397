"""Study ingestion, preprocessing, the on-disk tensor container, and a
synthetic coupled-modality generator for desk-scale experiments.

A study on disk is a plain-text manifest pointing at per-sample tensor
containers plus tab-separated spot coordinates:

    [study]
    columns = columns.txt        # column names of the raw count matrices
    genes = genes.txt            # user-supplied selection, one name per line

    [sample:S00]
    patient = P00
    local = S00_local.gdml       # container entry "local", N x D_in
    neighbor = S00_neighbor.gdml # container entry "neighbor", N x T x D_in
    expression = S00_expression.gdml  # container entry "counts", N x M_all
    coords = S00_coords.tsv      # spot_id <tab> row <tab> col

All paths are relative to the manifest's directory.
"""

from __future__ import annotations

import configparser
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ShapeError

# ---------------------------------------------------------------------------
# binary tensor container

MAGIC = b"GDML"
VERSION = 1

_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_KIND_TO_TAG = {"f4": 1, "f8": 2, "i4": 3}


def _dtype_tag(arr: np.ndarray) -> tuple[int, np.ndarray]:
    if arr.dtype in (np.float32,):
        return 1, arr.astype("<f4")
    if arr.dtype in (np.float64,):
        return 2, arr.astype("<f8")
    if np.issubdtype(arr.dtype, np.integer):
        as32 = arr.astype(np.int64)
        if as32.size and (as32.max() > np.iinfo(np.int32).max or as32.min() < np.iinfo(np.int32).min):
            raise ContractError("integer entry exceeds the i32 range of the container format")
        return 3, arr.astype("<i4")
    raise ContractError(f"unsupported dtype for container entry: {arr.dtype}")


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays to the binary container format (little-endian)."""
    path = Path(path)
    names = list(entries)
    if len(set(names)) != len(names):
        raise ContractError("duplicate entry names")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(entries[name])
            tag, data = _dtype_tag(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(data).tobytes())


def read_container(path) -> dict[str, np.ndarray]:
    """Read a container back; raises DataError on any structural problem."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read container {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    offset = 4
    (version,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if tag not in _TAG_TO_DTYPE:
            raise DataError(f"{path}: unknown dtype tag {tag} for entry {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        dtype = _TAG_TO_DTYPE[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = blob[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise DataError(f"{path}: truncated payload for entry {name!r}")
        offset += nbytes
        if name in entries:
            raise DataError(f"{path}: duplicate entry name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        entries[name] = arr.astype(dtype.newbyteorder("="))
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return entries


# ---------------------------------------------------------------------------
# in-memory per-sample bundle


@dataclass
class SpotBatch:
    """Per-sample bundle of image features, expression, and coordinates."""

    sample_id: str
    patient_id: str
    local_feat: np.ndarray  # N x D_in
    neighbor_feat: np.ndarray  # N x T x D_in
    expression: np.ndarray  # N x M, preprocessed
    coords: np.ndarray  # N x 2 int (row, col)

    def __post_init__(self):
        n = self.local_feat.shape[0]
        for name in ("neighbor_feat", "expression", "coords"):
            other = getattr(self, name)
            if other.shape[0] != n:
                raise ShapeError(
                    f"sample {self.sample_id}: {name} has {other.shape[0]} spots, expected {n}"
                )
        if not np.all(np.isfinite(self.expression)) or np.any(self.expression < 0):
            raise DataError(f"sample {self.sample_id}: expression must be finite and >= 0")

    @property
    def n_spots(self) -> int:
        return self.local_feat.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expression.shape[1]

    def take(self, indices) -> "SpotBatch":
        """Subset the batch by spot indices (used for minibatching)."""
        return SpotBatch(
            sample_id=self.sample_id,
            patient_id=self.patient_id,
            local_feat=self.local_feat[indices],
            neighbor_feat=self.neighbor_feat[indices],
            expression=self.expression[indices],
            coords=self.coords[indices],
        )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessResult:
    expression: np.ndarray  # kept spots x selected genes
    keep_mask: np.ndarray  # boolean over input spots
    n_dropped: int


def preprocess_expression(
    raw_counts: np.ndarray,
    column_names: list[str],
    gene_list: list[str],
    scale: float = 1e4,
) -> PreprocessResult:
    """Select genes, normalize per spot, log-transform.

    Each spot's counts are scaled by ``scale / total`` where the total runs
    over ALL columns (before selection), then mapped through log(1 + x).
    Spots whose total count is zero are dropped and counted.
    """
    missing = [g for g in gene_list if g not in set(column_names)]
    if missing:
        raise DataError(f"genes not present in the count matrix: {missing}")
    raw = np.asarray(raw_counts, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(column_names):
        raise ShapeError(
            f"count matrix has shape {raw.shape}, expected N x {len(column_names)}"
        )
    index = {name: i for i, name in enumerate(column_names)}
    cols = [index[g] for g in gene_list]
    totals = raw.sum(axis=1)
    keep = totals > 0
    selected = raw[keep][:, cols]
    expr = np.log1p(scale * selected / totals[keep, None])
    return PreprocessResult(expr, keep, int((~keep).sum()))


# ---------------------------------------------------------------------------
# manifest / study loading

_STUDY_KEYS = {"columns", "genes"}
_SAMPLE_KEYS = {"patient", "local", "neighbor", "expression", "coords"}


def read_gene_list(path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def write_gene_list(path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def read_coords(path) -> tuple[list[str], np.ndarray]:
    """Read a tab-separated (spot_id, row, col) table with header."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["spot_id", "row", "col"]:
        raise DataError(f"{path}: expected header 'spot_id\\trow\\tcol'")
    ids, rows = [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}: malformed coordinate line {ln!r}")
        ids.append(parts[0])
        rows.append((int(parts[1]), int(parts[2])))
    return ids, np.array(rows, dtype=np.int32).reshape(len(rows), 2)


def write_coords(path, spot_ids: list[str], coords: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("spot_id\trow\tcol\n")
        for sid, (r, c) in zip(spot_ids, coords):
            f.write(f"{sid}\t{int(r)}\t{int(c)}\n")


def read_manifest(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except configparser.Error as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    return parser


def load_study(manifest_path) -> list[SpotBatch]:
    """Load every sample in a manifest, cross-checking dimensions.

    Zero-total spots are dropped during preprocessing; the drop count is
    recorded on the returned batches' study-level attribute by the caller
    if needed (the count is also reachable via preprocess_expression).
    """
    manifest_path = Path(manifest_path)
    parser = read_manifest(manifest_path)
    sample_sections = [s for s in parser.sections() if s.startswith("sample:")]
    if not sample_sections:
        return []
    if "study" not in parser:
        raise DataError(f"{manifest_path}: missing [study] section")
    study = parser["study"]
    unknown = set(study) - _STUDY_KEYS
    if unknown:
        raise DataError(f"{manifest_path}: unknown study keys {sorted(unknown)}")
    base = manifest_path.parent
    column_names = read_gene_list(base / study["columns"])
    gene_list = read_gene_list(base / study["genes"])

    batches = []
    for section in sample_sections:
        sid = section.split(":", 1)[1]
        entry = parser[section]
        unknown = set(entry) - _SAMPLE_KEYS
        if unknown:
            raise DataError(f"{manifest_path}: unknown keys {sorted(unknown)} in [{section}]")
        missing = _SAMPLE_KEYS - set(entry)
        if missing:
            raise DataError(f"{manifest_path}: [{section}] missing keys {sorted(missing)}")

        local_path = base / entry["local"]
        neighbor_path = base / entry["neighbor"]
        expr_path = base / entry["expression"]
        local = _expect_entry(local_path, "local", ndim=2)
        neighbor = _expect_entry(neighbor_path, "neighbor", ndim=3)
        counts = _expect_entry(expr_path, "counts", ndim=2)
        spot_ids, coords = read_coords(base / entry["coords"])

        n = local.shape[0]
        for label, arr, path in (
            ("neighbor", neighbor, neighbor_path),
            ("counts", counts, expr_path),
            ("coords", coords, base / entry["coords"]),
        ):
            if arr.shape[0] != n:
                raise DataError(
                    f"{path}: {label} has {arr.shape[0]} spots, expected {n} (from {local_path})"
                )
        if counts.shape[1] != len(column_names):
            raise DataError(
                f"{expr_path}: {counts.shape[1]} gene columns, expected {len(column_names)}"
            )

        pre = preprocess_expression(counts, column_names, gene_list)
        if pre.n_dropped:
            warnings.warn(f"sample {sid}: dropped {pre.n_dropped} zero-total spots")
        keep = pre.keep_mask
        batches.append(
            SpotBatch(
                sample_id=sid,
                patient_id=entry["patient"],
                local_feat=local[keep].astype(np.float64),
                neighbor_feat=neighbor[keep].astype(np.float64),
                expression=pre.expression,
                coords=coords[keep],
            )
        )
    return batches


def _expect_entry(path, name: str, ndim: int) -> np.ndarray:
    entries = read_container(path)
    if name not in entries:
        raise DataError(f"{path}: missing entry {name!r}")
    arr = entries[name]
    if arr.ndim != ndim:
        raise DataError(f"{path}: entry {name!r} has rank {arr.ndim}, expected {ndim}")
    return arr


# ---------------------------------------------------------------------------
# synthetic coupled-modality generator


@dataclass
class SynthSpec:
    """Scale and coupling knobs for the synthetic study generator.

    ``n_clusters > 0`` draws the latent field from spatially contiguous
    domains (nearest of ``n_clusters`` seed locations on the grid), mixing a
    shared domain center into each spot's latent at ``cluster_strength``.
    This gives both modalities a common group structure, as tissue domains
    do for morphology and expression programs.
    """

    n_spots: int = 400
    n_slides: int = 2
    latent_dim: int = 8
    n_genes: int = 60
    rho: float = 0.8  # feature-expression coupling strength
    sigma: float = 0.3  # feature noise level
    seed: int = 0
    d_in: int = 64
    neighbor_grid: int = 5
    count_scale: float = 20.0
    n_clusters: int = 0
    cluster_strength: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {self.rho}")
        if self.sigma < 0.0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")
        if self.neighbor_grid % 2 != 1:
            raise ContractError("neighbor_grid must be odd")
        if self.n_clusters < 0:
            raise ContractError("n_clusters must be >= 0")
        if not 0.0 <= self.cluster_strength < 1.0:
            raise ContractError("cluster_strength must be in [0, 1)")


@dataclass
class SynthSample:
    sample_id: str
    patient_id: str
    coords: np.ndarray  # N x 2 int
    local: np.ndarray  # N x d_in
    neighbor: np.ndarray  # N x grid^2 x d_in
    counts: np.ndarray  # N x M raw counts
    latents: np.ndarray  # N x latent_dim ground truth
    domains: np.ndarray | None = None  # N domain labels when clustered


@dataclass
class SynthStudy:
    spec: SynthSpec
    samples: list[SynthSample]
    column_names: list[str]
    gene_list: list[str]
    weights: dict[str, np.ndarray] = field(default_factory=dict)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def synth_generate(spec: SynthSpec) -> SynthStudy:
    """Draw a coupled image-feature / expression study.

    Per spot a latent z drives both modalities: local features are a linear
    map of z, neighbor tokens mix z with the neighboring spot's latent over
    the stencil, and expression rates blend softplus(W_G z) with independent
    noise at coupling rho before Poisson sampling.
    """
    wrng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    w_local = wrng.normal(size=(spec.latent_dim, spec.d_in)) / math.sqrt(spec.latent_dim)
    w_neighbor = wrng.normal(size=(spec.latent_dim, spec.d_in)) / math.sqrt(spec.latent_dim)
    w_gene = wrng.normal(size=(spec.latent_dim, spec.n_genes)) / math.sqrt(spec.latent_dim)
    domain_centers = (
        wrng.normal(size=(spec.n_clusters, spec.latent_dim)) if spec.n_clusters else None
    )

    side = math.ceil(math.sqrt(spec.n_spots))
    half = spec.neighbor_grid // 2
    offsets = [(dr, dc) for dr in range(-half, half + 1) for dc in range(-half, half + 1)]

    samples = []
    for slide in range(spec.n_slides):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, slide]))
        coords = np.array(
            [(i // side, i % side) for i in range(spec.n_spots)], dtype=np.int32
        )
        z = rng.normal(size=(spec.n_spots, spec.latent_dim))
        domains = None
        if domain_centers is not None:
            # contiguous domains: label each spot by its nearest seed location
            seeds = rng.integers(0, side, size=(spec.n_clusters, 2))
            dist = ((coords[:, None, :].astype(float) - seeds[None, :, :]) ** 2).sum(axis=-1)
            domains = dist.argmin(axis=1)
            w = spec.cluster_strength
            z = math.sqrt(w) * domain_centers[domains] + math.sqrt(1.0 - w) * z
        by_coord = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}

        local = z @ w_local + spec.sigma * rng.normal(size=(spec.n_spots, spec.d_in))

        neighbor = np.empty((spec.n_spots, len(offsets), spec.d_in))
        for t, (dr, dc) in enumerate(offsets):
            nb_index = np.array(
                [
                    by_coord.get((int(r) + dr, int(c) + dc), i)
                    for i, (r, c) in enumerate(coords)
                ]
            )
            mixed = 0.5 * (z + z[nb_index])
            neighbor[:, t, :] = mixed @ w_neighbor + spec.sigma * rng.normal(
                size=(spec.n_spots, spec.d_in)
            )

        signal = _softplus(z @ w_gene)
        independent = _softplus(rng.normal(size=(spec.n_spots, spec.n_genes)))
        rate = spec.rho * signal + (1.0 - spec.rho) * independent
        counts = rng.poisson(spec.count_scale * rate).astype(np.int32)

        samples.append(
            SynthSample(
                sample_id=f"S{slide:02d}",
                patient_id=f"P{slide:02d}",
                coords=coords,
                local=local,
                neighbor=neighbor,
                counts=counts,
                latents=z,
                domains=domains,
            )
        )

    column_names = [f"gene_{i:04d}" for i in range(spec.n_genes)]
    return SynthStudy(
        spec=spec,
        samples=samples,
        column_names=column_names,
        gene_list=list(column_names),
        weights={"local": w_local, "neighbor": w_neighbor, "gene": w_gene},
    )


def batches_from_study(study: SynthStudy) -> list[SpotBatch]:
    """Preprocess a synthetic study into per-sample SpotBatches."""
    batches = []
    for s in study.samples:
        pre = preprocess_expression(s.counts, study.column_names, study.gene_list)
        if pre.n_dropped:
            warnings.warn(f"sample {s.sample_id}: dropped {pre.n_dropped} zero-total spots")
        keep = pre.keep_mask
        batches.append(
            SpotBatch(
                sample_id=s.sample_id,
                patient_id=s.patient_id,
                local_feat=s.local[keep],
                neighbor_feat=s.neighbor[keep],
                expression=pre.expression,
                coords=s.coords[keep],
            )
        )
    return batches


def write_study(study: SynthStudy, out_dir) -> Path:
    """Write a study to disk in manifest form; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_gene_list(out / "columns.txt", study.column_names)
    write_gene_list(out / "genes.txt", study.gene_list)

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["study"] = {"columns": "columns.txt", "genes": "genes.txt"}
    for s in study.samples:
        write_container(out / f"{s.sample_id}_local.gdml", {"local": s.local})
        write_container(out / f"{s.sample_id}_neighbor.gdml", {"neighbor": s.neighbor})
        write_container(out / f"{s.sample_id}_expression.gdml", {"counts": s.counts})
        spot_ids = [f"{s.sample_id}_spot{i:04d}" for i in range(s.coords.shape[0])]
        write_coords(out / f"{s.sample_id}_coords.tsv", spot_ids, s.coords)
        parser[f"sample:{s.sample_id}"] = {
            "patient": s.patient_id,
            "local": f"{s.sample_id}_local.gdml",
            "neighbor": f"{s.sample_id}_neighbor.gdml",
            "expression": f"{s.sample_id}_expression.gdml",
            "coords": f"{s.sample_id}_coords.tsv",
        }
    manifest = out / "manifest.ini"
    with open(manifest, "w") as f:
        parser.write(f)
    return manifest
