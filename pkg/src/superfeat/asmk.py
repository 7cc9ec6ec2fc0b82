"""Binary selective-match-kernel indexing and search.

Test-time retrieval: features assign to visual words from a k-means
codebook; per-word residual sums are binarized into B-bit signatures held
in an inverted file.  Query/database images score by a selective
(thresholded, exponentiated) similarity accumulated over shared words,
normalized by the self-kernels so self-retrieval scores exactly 1.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexEmpty, NoFeatures

log = logging.getLogger(__name__)

MAGIC = b"SFIX"
VERSION = 1

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass
class Codebook:
    centroids: np.ndarray  # k x dim, float64

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class BinarySignature:
    word: int
    bits: np.ndarray  # packed uint8, little-endian, bit 0 = dimension 0


@dataclass
class SelectedFeature:
    vector: np.ndarray
    scale: float
    feature_id: int
    strength: float


def select_top_features(per_scale_sets, budget: int) -> list[SelectedFeature]:
    """Keep the strongest features across all scales.

    Candidates are every usable feature of every scale; ranking is by
    pre-normalization strength (descending), then scale (descending), then
    feature ID (ascending).  Returns everything when under budget.
    """
    candidates = []
    for sfs in per_scale_sets:
        feats = sfs.features_np()
        strengths = sfs.strengths.detach().cpu().double().numpy()
        usable = sfs.usable.detach().cpu().numpy().astype(bool)
        for fid in range(sfs.count):
            if not usable[fid]:
                continue
            candidates.append(SelectedFeature(
                vector=feats[fid], scale=float(sfs.scale),
                feature_id=fid, strength=float(strengths[fid])))
    candidates.sort(key=lambda c: (-c.strength, -c.scale, c.feature_id))
    return candidates[:budget]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points ** 2).sum(axis=1)[:, None]
    c2 = (centroids ** 2).sum(axis=1)[None, :]
    return p2 + c2 - 2.0 * points @ centroids.T


def assign_words(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid assignment; exact ties go to the lowest word index."""
    return np.argmin(_squared_distances(features, codebook.centroids), axis=1)


def train_codebook(features: np.ndarray, k: int, seed: int,
                   iterations: int = 25) -> Codebook:
    """Seeded k-means with plus-plus initialization and a fixed Lloyd cap.

    Empty clusters are reseeded to the point currently farthest from its
    centroid (logged), so every centroid is a mean of at least one point.
    """
    x = np.asarray(features, dtype=np.float64)
    m = x.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} features, got {m}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(m))
    centroids[0] = x[first]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[i] = x[int(rng.integers(m))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            idx = min(idx, m - 1)
            centroids[i] = x[idx]
        closest = np.minimum(closest, ((x - centroids[i]) ** 2).sum(axis=1))

    assignments = np.full(m, -1)
    for it in range(iterations):
        d2 = _squared_distances(x, centroids)
        new_assign = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(m), new_assign]
        counts = np.bincount(new_assign, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            # Move the farthest points into the empty clusters, never
            # stealing the last member of another cluster (m >= k
            # guarantees a donor cluster with >= 2 members exists).
            order = np.argsort(-point_d2, kind="stable")
            cursor = 0
            for word in empties:
                while cursor < m and counts[new_assign[order[cursor]]] < 2:
                    cursor += 1
                point = int(order[cursor])
                cursor += 1
                counts[new_assign[point]] -= 1
                new_assign[point] = word
                counts[word] = 1
                centroids[word] = x[point]
                log.info("EmptyClusterResolved: word %d reseeded to point %d "
                         "(iteration %d)", word, point, it)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, x)
        centroids = sums / counts[:, None]
    return Codebook(centroids=centroids)


def pack_bits(signs: np.ndarray) -> np.ndarray:
    """Pack a boolean vector into little-endian bytes, bit 0 = dimension 0."""
    return np.packbits(signs.astype(np.uint8), bitorder="little")


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def aggregate_binarize(features: np.ndarray, codebook: Codebook):
    """Aggregate an image's features into per-word binary signatures.

    Features assign to their nearest word; each non-empty word stores the
    elementwise sign of the residual sum (ties binarize to 1).  Returns the
    signatures sorted by word plus the self-kernel normalizer, which equals
    the inverse square root of the number of non-empty words.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] == 0:
        raise NoFeatures("image contributed no usable features")
    words = assign_words(x, codebook)
    signatures = []
    for word in np.unique(words):
        residual = (x[words == word] - codebook.centroids[word]).sum(axis=0)
        signatures.append(BinarySignature(word=int(word),
                                          bits=pack_bits(residual >= 0)))
    gamma = 1.0 / np.sqrt(len(signatures))
    return signatures, float(gamma)


def selectivity(u: float, alpha: float, tau: float) -> float:
    # np.power keeps this bit-identical with the vectorized search path.
    return float(np.power(np.float64(u), np.float64(alpha))) if u > tau else 0.0


def kernel_score(q_sigs: list[BinarySignature], x_sigs: list[BinarySignature],
                 gamma_q: float, gamma_x: float,
                 alpha: float = 3.0, tau: float = 0.0) -> float:
    """Selective match-kernel similarity between two signature sets."""
    b = q_sigs[0].bits.size * 8 if q_sigs else 0
    by_word = {sig.word: sig.bits for sig in x_sigs}
    total = 0.0
    for sig in sorted(q_sigs, key=lambda s: s.word):
        other = by_word.get(sig.word)
        if other is None:
            continue
        u = (b - 2 * hamming_distance(sig.bits, other)) / b
        total += selectivity(u, alpha, tau)
    return gamma_q * gamma_x * total


@dataclass
class AsmkIndex:
    codebook: Codebook
    bits: int
    posting_ids: dict[int, np.ndarray] = field(default_factory=dict)
    posting_bits: dict[int, np.ndarray] = field(default_factory=dict)
    gammas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cluster_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    image_names: list[str] = field(default_factory=list)
    alpha: float = 3.0
    tau: float = 0.0

    @property
    def image_count(self) -> int:
        return len(self.image_names)


def build_signature_index(codebook: Codebook, bits: int, items,
                          alpha: float = 3.0, tau: float = 0.0) -> AsmkIndex:
    """Assemble an inverted file from (image name, signatures) pairs."""
    index = AsmkIndex(codebook=codebook, bits=bits, alpha=alpha, tau=tau)
    ids_by_word: dict[int, list[int]] = {}
    bits_by_word: dict[int, list[np.ndarray]] = {}
    counts, gammas = [], []
    for name, signatures in items:
        idx = len(index.image_names)
        index.image_names.append(name)
        for sig in signatures:
            ids_by_word.setdefault(sig.word, []).append(idx)
            bits_by_word.setdefault(sig.word, []).append(sig.bits)
        counts.append(len(signatures))
        gammas.append(1.0 / np.sqrt(len(signatures)))
    if not index.image_names:
        raise IndexEmpty("no images to index")
    for word, ids in ids_by_word.items():
        index.posting_ids[word] = np.array(ids, dtype=np.uint32)
        index.posting_bits[word] = np.vstack(bits_by_word[word])
    index.cluster_counts = np.array(counts, dtype=np.int64)
    index.gammas = np.array(gammas)
    return index


def search_signatures(index: AsmkIndex, q_sigs: list[BinarySignature],
                      top_m: int | None = None):
    """Score every indexed image against a query signature set.

    Accumulates selective similarities over the inverted file in ascending
    word order, then normalizes by sqrt(|C(q)| * |C(x)|); the integer count
    product keeps self-retrieval at exactly 1.  Ranking is by descending
    score with ties broken by insertion order.
    """
    if index.image_count == 0:
        raise IndexEmpty("search on an empty index")
    b = index.bits
    acc = np.zeros(index.image_count)
    for sig in sorted(q_sigs, key=lambda s: s.word):
        ids = index.posting_ids.get(sig.word)
        if ids is None:
            continue
        bits = index.posting_bits[sig.word]
        ham = _POPCOUNT[np.bitwise_xor(bits, sig.bits)].sum(axis=1)
        u = (b - 2 * ham) / b
        keep = u > index.tau
        if keep.any():
            acc[ids[keep]] += u[keep] ** index.alpha
    gamma_q2 = float(len(q_sigs))
    norm = np.sqrt(gamma_q2 * index.cluster_counts.astype(np.float64))
    scores = np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)
    order = np.lexsort((np.arange(index.image_count), -scores))
    if top_m is not None:
        order = order[:top_m]
    return [(index.image_names[i], float(scores[i])) for i in order]


def memory_footprint(index: AsmkIndex):
    """Per-image non-empty word counts and their corpus average."""
    per_image = {name: int(count) for name, count
                 in zip(index.image_names, index.cluster_counts)}
    average = float(index.cluster_counts.mean()) if index.image_count else 0.0
    return per_image, average


# --- serialization ---

def _write_varint(buf: io.BytesIO, value: int):
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.write(bytes([byte | 0x80]))
        else:
            buf.write(bytes([byte]))
            return


def _read_varint(buf: io.BufferedReader) -> int:
    shift, result = 0, 0
    while True:
        byte = buf.read(1)[0]
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result
        shift += 7


def save_index(index: AsmkIndex, path):
    """Single binary file: header, centroids, per-word postings, gamma and
    cluster-count tables, then image names."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = np.array([VERSION, index.codebook.k, index.bits, index.image_count],
                      dtype="<u4")
    buf.write(header.tobytes())
    buf.write(np.ascontiguousarray(index.codebook.centroids, dtype="<f8").tobytes())
    buf.write(np.array([index.alpha, index.tau], dtype="<f8").tobytes())
    for word in range(index.codebook.k):
        ids = index.posting_ids.get(word)
        if ids is None:
            _write_varint(buf, 0)
            continue
        _write_varint(buf, len(ids))
        buf.write(np.ascontiguousarray(ids, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(index.posting_bits[word], dtype=np.uint8).tobytes())
    buf.write(np.ascontiguousarray(index.gammas, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(index.cluster_counts, dtype="<u4").tobytes())
    for name in index.image_names:
        raw = name.encode("utf-8")
        _write_varint(buf, len(raw))
        buf.write(raw)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_index(path) -> AsmkIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not an index file: bad magic {magic!r}")
        version, k, bits, image_count = np.frombuffer(fh.read(16), dtype="<u4")
        if version != VERSION:
            raise ValueError(f"unsupported index version {version}")
        centroids = np.frombuffer(fh.read(int(k) * int(bits) * 8),
                                  dtype="<f8").reshape(int(k), int(bits)).copy()
        alpha, tau = np.frombuffer(fh.read(16), dtype="<f8")
        index = AsmkIndex(codebook=Codebook(centroids=centroids), bits=int(bits),
                          alpha=float(alpha), tau=float(tau))
        byte_width = int(bits) // 8
        for word in range(int(k)):
            count = _read_varint(fh)
            if count == 0:
                continue
            ids = np.frombuffer(fh.read(4 * count), dtype="<u4").copy()
            sig = np.frombuffer(fh.read(byte_width * count),
                                dtype=np.uint8).reshape(count, byte_width).copy()
            index.posting_ids[word] = ids
            index.posting_bits[word] = sig
        index.gammas = np.frombuffer(fh.read(8 * int(image_count)), dtype="<f8").copy()
        index.cluster_counts = np.frombuffer(fh.read(4 * int(image_count)),
                                             dtype="<u4").astype(np.int64)
        names = []
        for _ in range(int(image_count)):
            length = _read_varint(fh)
            names.append(fh.read(length).decode("utf-8"))
        index.image_names = names
    return index
