"""Per-class Gaussian feature statistics used to replay old classes without exemplars.

Pool file layout (little-endian)::

    header : magic b"APGPOOL\\0" | u32 version | u32 d | u32 N_P | u32 n_classes | u8 diagonal
    record : i64 class_id | u64 n_l | u64 n_final
             | f64[d] mean_l | f64[d*d] cov_l | f64[d] mean_final | f64[d*d] cov_final
             | f64[N_P*d] prompt_centroid
    trailer: i64 seed | u128 PCG64 state | u128 PCG64 increment | u8 has_uint32 | u32 uinteger
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MAGIC = b"APGPOOL\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIB")
_RECORD_HEAD = struct.Struct("<qQQ")
_TRAILER = struct.Struct("<q16s16sBI")


class PoolError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStat:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise PoolError("sample_count must be >= 1")
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)

    @classmethod
    def fit(cls, features, diagonal: bool = False) -> "GaussianStat":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise PoolError("cannot summarise an empty feature set")
        n = x.shape[0]
        mu = x.mean(axis=0)
        xc = x - mu
        cov = xc.T @ xc / max(n - 1, 1)
        cov = 0.5 * (cov + cov.T)
        if diagonal:
            cov = np.diag(np.diag(cov))
        return cls(mu, cov, n)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def jitter(self) -> float:
        return 1e-4 * (float(np.trace(self.cov)) / self.dim + 1e-8)

    def cholesky(self) -> np.ndarray:
        """Lower factor of ``cov + jitter * I``; jitter grows x10 up to three times."""
        eye = np.eye(self.dim)
        jit = self.jitter()
        for _ in range(4):
            try:
                return np.linalg.cholesky(self.cov + jit * eye)
            except np.linalg.LinAlgError:
                jit *= 10
        eig = np.linalg.eigvalsh(self.cov)
        raise PoolError(
            f"Cholesky failed after jitter escalation to {jit / 10:.3e}; "
            f"eigenvalue range [{eig.min():.3e}, {eig.max():.3e}]"
        )


@dataclass(frozen=True)
class ClassStatistics:
    stat_l: GaussianStat
    stat_final: GaussianStat
    prompt_centroid: np.ndarray

    def __post_init__(self):
        self.prompt_centroid.setflags(write=False)

    def stat(self, layer: str) -> GaussianStat:
        if layer == "l":
            return self.stat_l
        if layer == "final":
            return self.stat_final
        raise PoolError(f"layer selector must be 'l' or 'final', got {layer!r}")


def summarize_class(
    features_l,
    features_final,
    apg: Callable[[np.ndarray], np.ndarray],
    diagonal: bool = False,
) -> ClassStatistics:
    """Fit both Gaussians and record the APG's prompts for the layer-l mean."""
    fl = np.asarray(features_l, dtype=np.float64)
    ff = np.asarray(features_final, dtype=np.float64)
    if fl.shape[0] == 0 or ff.shape[0] == 0:
        raise PoolError("cannot summarise an empty feature set")
    if fl.shape[0] != ff.shape[0]:
        raise PoolError("feature sets at layer l and final layer differ in size")
    stat_l = GaussianStat.fit(fl, diagonal)
    stat_final = GaussianStat.fit(ff, diagonal)
    centroid = np.array(apg(stat_l.mean), dtype=np.float64)
    if centroid.ndim != 2:
        raise PoolError("APG must return an (N_P, d) prompt matrix")
    return ClassStatistics(stat_l, stat_final, centroid)


@dataclass
class KnowledgePool:
    seed: int = 0
    diagonal: bool = False
    entries: dict[int, ClassStatistics] = field(default_factory=dict)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self._chol: dict[tuple[int, str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, c: int) -> bool:
        return c in self.entries

    @property
    def class_ids(self) -> list[int]:
        return list(self.entries)

    def add(self, class_id: int, stats: ClassStatistics) -> None:
        if class_id in self.entries:
            raise PoolError(f"class {class_id} already summarised; entries are immutable")
        self.entries[int(class_id)] = stats

    def get(self, class_id: int) -> ClassStatistics:
        try:
            return self.entries[int(class_id)]
        except KeyError:
            raise PoolError(f"class {class_id} is not in the knowledge pool") from None

    def factor(self, class_id: int, layer: str) -> np.ndarray:
        key = (int(class_id), layer)
        if key not in self._chol:
            self._chol[key] = self.get(class_id).stat(layer).cholesky()
        return self._chol[key]

    def sample(self, class_id: int, layer: str, n: int, seed: int | None = None) -> np.ndarray:
        """Draw ``n`` vectors ``mu + L eps``. With ``seed`` a fresh generator is used,
        otherwise the pool's own stream advances."""
        stat = self.get(class_id).stat(layer)
        chol = self.factor(class_id, layer)
        rng = np.random.default_rng(seed) if seed is not None else self.rng
        eps = rng.standard_normal((n, stat.dim))
        return stat.mean + eps @ chol.T

    def sample_classes(self, class_ids, layer: str) -> np.ndarray:
        """One vector per requested class id, in order, from the pool stream."""
        class_ids = np.asarray(class_ids)
        d = next(iter(self.entries.values())).stat_l.dim
        eps = self.rng.standard_normal((len(class_ids), d))
        out = np.empty((len(class_ids), d))
        for c in np.unique(class_ids):
            idx = np.nonzero(class_ids == c)[0]
            stat = self.get(int(c)).stat(layer)
            out[idx] = stat.mean + eps[idx] @ self.factor(int(c), layer).T
        return out

    def centroids(self, class_ids) -> np.ndarray:
        return np.stack([self.get(int(c)).prompt_centroid for c in class_ids])


def serialize_pool(pool: KnowledgePool) -> bytes:
    buf = io.BytesIO()
    entries = list(pool.entries.items())
    if entries:
        d = entries[0][1].stat_l.dim
        n_p = entries[0][1].prompt_centroid.shape[0]
    else:
        d = n_p = 0
    buf.write(_HEADER.pack(MAGIC, VERSION, d, n_p, len(entries), int(pool.diagonal)))
    for c, s in entries:
        buf.write(_RECORD_HEAD.pack(c, s.stat_l.sample_count, s.stat_final.sample_count))
        for arr in (s.stat_l.mean, s.stat_l.cov, s.stat_final.mean, s.stat_final.cov, s.prompt_centroid):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    st = pool.rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise PoolError(f"cannot serialise a {st['bit_generator']} sampler")
    buf.write(_TRAILER.pack(
        pool.seed,
        st["state"]["state"].to_bytes(16, "little"),
        st["state"]["inc"].to_bytes(16, "little"),
        st["has_uint32"],
        st["uinteger"],
    ))
    return buf.getvalue()


def deserialize_pool(data: bytes) -> KnowledgePool:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise PoolError(f"truncated pool data: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic, version, d, n_p, n_classes, diagonal = _HEADER.unpack(take(_HEADER.size))
    if magic != MAGIC:
        raise PoolError("not a knowledge pool file (bad magic)")
    if version != VERSION:
        raise PoolError(f"unsupported pool version {version}, expected {VERSION}")
    record_size = _RECORD_HEAD.size + 8 * (2 * d + 2 * d * d + n_p * d)
    if n_classes * record_size > len(view) - pos:
        raise PoolError(
            f"truncated pool data: header declares {n_classes} classes "
            f"({n_classes * record_size} bytes) but only {len(view) - pos} bytes follow"
        )

    def arr(shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    entries = {}
    for _ in range(n_classes):
        c, n_l, n_f = _RECORD_HEAD.unpack(take(_RECORD_HEAD.size))
        mean_l, cov_l = arr((d,)), arr((d, d))
        mean_f, cov_f = arr((d,)), arr((d, d))
        centroid = arr((n_p, d))
        entries[int(c)] = ClassStatistics(
            GaussianStat(mean_l, cov_l, n_l), GaussianStat(mean_f, cov_f, n_f), centroid
        )
    seed, rng_state, rng_inc, has_uint32, uinteger = _TRAILER.unpack(take(_TRAILER.size))
    if pos != len(view):
        raise PoolError(f"{len(view) - pos} trailing bytes after pool data")
    pool = KnowledgePool(seed=seed, diagonal=bool(diagonal), entries=entries)
    pool.rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(rng_state, "little"), "inc": int.from_bytes(rng_inc, "little")},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return pool


def save_pool(pool: KnowledgePool, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_pool(pool))


def load_pool(path) -> KnowledgePool:
    with open(path, "rb") as fh:
        return deserialize_pool(fh.read())
