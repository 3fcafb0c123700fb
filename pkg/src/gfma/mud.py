"""Non-coherent 2-means multiuser detection.

Each identified device's matched-filter output forms two point clouds at
+-g_k; Lloyd's 2-means separates them without knowing g_k, bit mapping labels
the clusters, and differential decoding removes the label ambiguity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .results import DetectionResult
from .waveform import Codec, IdentityCodec, Waveform, sequence_matched_filter

if TYPE_CHECKING:
    from .model import DeviceProfile, FrameRealization, SystemConfig

__all__ = ["ClusterResult", "two_means", "bit_map", "differential_decode",
           "detect_all", "dump_detection_json"]


@dataclass
class ClusterResult:
    """Partition of symbol indices into U_0/U_1 with the cluster means.

    ``assign`` is True where the sample belongs to U_1.  The means satisfy the
    centroid equations of the returned partition exactly.
    """

    assign: np.ndarray
    mu0: complex
    mu1: complex
    iterations: int
    wcss: float
    converged: bool


def _wcss(y: np.ndarray, assign: np.ndarray, mu0: complex, mu1: complex) -> float:
    return float(np.sum(np.abs(y[~assign] - mu0) ** 2) + np.sum(np.abs(y[assign] - mu1) ** 2))


def _lloyd(y: np.ndarray, mu0: complex, mu1: complex, max_iter: int):
    assign = np.zeros(y.size, dtype=bool)
    prev = None
    for it in range(1, max_iter + 1):
        d0 = np.abs(y - mu0) ** 2
        d1 = np.abs(y - mu1) ** 2
        assign = d1 < d0  # ties go to U_0
        # empty-cluster rule: hand the farthest sample to the empty side
        if not assign.any():
            assign[np.argmax(d0)] = True
        elif assign.all():
            assign[np.argmax(d1)] = False
        if prev is not None and np.array_equal(assign, prev):
            return assign, mu0, mu1, it, True
        prev = assign.copy()
        mu0 = complex(y[~assign].mean())
        mu1 = complex(y[assign].mean())
    return assign, mu0, mu1, max_iter, False


def two_means(y: np.ndarray, init: tuple[complex, complex] | None = None,
              max_iter: int = 100, rng: np.random.Generator | None = None) -> ClusterResult:
    """Lloyd's 2-means on a complex symbol sequence.

    Default initialization exploits the antipodal signal geometry: the
    maximum-modulus sample and its negation.  A single random restart is taken
    if the first run degenerates into one cluster.
    """
    y = np.asarray(y, dtype=complex)
    if y.size < 2:
        raise ValueError("need at least two samples")
    if init is None:
        mu1 = complex(y[np.argmax(np.abs(y))])
        init = (-mu1, mu1)
    assign, mu0, mu1, iters, conv = _lloyd(y, init[0], init[1], max_iter)
    if assign.all() or not assign.any():
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(y.size, size=2, replace=False)
        assign, mu0, mu1, iters2, conv = _lloyd(y, complex(y[pick[0]]), complex(y[pick[1]]),
                                                max_iter)
        iters += iters2
    return ClusterResult(assign=assign, mu0=mu0, mu1=mu1, iterations=iters,
                         wcss=_wcss(y, assign, mu0, mu1), converged=conv)


def bit_map(cluster: ClusterResult) -> np.ndarray:
    """b_m[i] = 1 iff sample i sits in U_1."""
    return cluster.assign.astype(np.int8)


def differential_decode(b_m: np.ndarray) -> np.ndarray:
    """b_c[i] = b_m[i] XOR b_m[i-1]; the first received bit is the reference.

    Complementing the input (cluster relabeling) leaves the output unchanged.
    """
    b = np.asarray(b_m, dtype=np.int8)
    if b.size < 2:
        raise ValueError("need at least two mapped bits")
    return np.bitwise_xor(b[1:], b[:-1])


def detect_all(waveform: Waveform, est_active_set: np.ndarray,
               profiles: list["DeviceProfile"], codec: Codec | None,
               config: "SystemConfig", truth: "FrameRealization | None" = None,
               max_iter: int = 100, keep_mf: bool = False) -> DetectionResult:
    """Matched filter, cluster, map, differentially decode and codec-decode.

    Devices are processed in order of increasing delay.  When ``truth`` is
    given, a packet-error flag is recorded for every truly active device in the
    estimated set (the harness accounts for missed devices separately).
    """
    codec = codec or IdentityCodec()
    est = [int(k) for k in est_active_set]
    for k in est:
        if not 0 <= k < len(profiles):
            raise ValueError(f"estimated device {k} has no profile")
    order = sorted(est, key=lambda k: profiles[k].delay_chips)
    payloads: dict[int, np.ndarray] = {}
    errors: dict[int, bool] = {}
    mf_outputs = {} if keep_mf else None
    partitions = {} if keep_mf else None
    means = {} if keep_mf else None
    truly_active = set(truth.active_set.tolist()) if truth is not None else set()
    for k in order:
        y = sequence_matched_filter(waveform, profiles[k], config)
        cluster = two_means(y, max_iter=max_iter)
        decoded = codec.decode(differential_decode(bit_map(cluster)))
        payloads[k] = decoded
        if keep_mf:
            mf_outputs[k] = y
            partitions[k] = cluster.assign.copy()
            means[k] = (cluster.mu0, cluster.mu1)
        if truth is not None and k in truly_active:
            true_payload = truth.payloads[k]
            errors[k] = decoded.size != true_payload.size or bool(np.any(decoded != true_payload))
    return DetectionResult(payloads=payloads, errors=errors, order=np.array(order),
                           mf_outputs=mf_outputs, partitions=partitions, means=means)


def dump_detection_json(result: DetectionResult, path: str | Path) -> None:
    """Per-device MF outputs, partitions and means for scatter-style plots."""
    if result.mf_outputs is None:
        raise ValueError("detection was run without keep_mf=True")
    payload = {
        str(k): {
            "mf": [[z.real, z.imag] for z in result.mf_outputs[k]],
            "partition": result.partitions[k].astype(int).tolist(),
            "means": [[result.means[k][0].real, result.means[k][0].imag],
                      [result.means[k][1].real, result.means[k][1].imag]],
        }
        for k in result.payloads
    }
    Path(path).write_text(json.dumps(payload))
