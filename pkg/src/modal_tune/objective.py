"""Modal targets, MAC indicators, mode pairing and the weighted residual."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

SCHEMES = ("absolute", "relative", "custom")
DEFAULT_MODE_WEIGHT = 0.1


class TargetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModalTarget:
    frequencies: np.ndarray  # measured, Hz, ascending
    sensor_dofs: np.ndarray  # global dof indices, 2 * node + direction
    mode_shapes: np.ndarray  # (q, n_sensors)
    weights: np.ndarray  # (2q,), unit Euclidean norm

    @property
    def q(self) -> int:
        return len(self.frequencies)

    def frequency_weights(self):
        return self.weights[:self.q]

    def mode_weights(self):
        return self.weights[self.q:]

    def with_frequencies(self, frequencies) -> "ModalTarget":
        return ModalTarget(np.asarray(frequencies, dtype=float), self.sensor_dofs,
                           self.mode_shapes, self.weights)


def normalize_weights(raw) -> np.ndarray:
    w = np.asarray(raw, dtype=float)
    if np.any(w < 0):
        raise TargetError("negative weights")
    norm = np.linalg.norm(w)
    if not norm > 0:
        raise TargetError("degenerate weights: all zero")
    return w / norm


def raw_weights(frequencies, scheme: str = "relative", mode_weight=DEFAULT_MODE_WEIGHT,
                custom=None) -> np.ndarray:
    """Unnormalized weight vector of length 2q.

    ``absolute``: 1 per frequency; ``relative``: ``1 / f`` per frequency;
    ``custom``: the given 2q values. ``mode_weight`` is a scalar or one value
    per mode (zero drops a mode).
    """
    f = np.asarray(frequencies, dtype=float)
    q = len(f)
    if scheme == "custom":
        if custom is None or len(custom) != 2 * q:
            raise TargetError(f"custom weights need {2 * q} entries")
        return np.asarray(custom, dtype=float)
    if scheme == "absolute":
        wf = np.ones(q)
    elif scheme == "relative":
        wf = 1.0 / f
    else:
        raise TargetError(f"unknown weighting scheme {scheme!r}; expected one of {SCHEMES}")
    wm = np.broadcast_to(np.asarray(mode_weight, dtype=float), (q,)) if q else np.zeros(0)
    if wm.shape != (q,):
        raise TargetError("mode weights must be a scalar or one per mode")
    return np.concatenate([wf, wm])


def build_target(frequencies, mode_shapes, sensor_dofs, scheme: str = "relative",
                 mode_weight=DEFAULT_MODE_WEIGHT, custom=None, constrained_dofs=(),
                 n_dofs: int | None = None) -> ModalTarget:
    f = np.asarray(frequencies, dtype=float).reshape(-1)
    sensors = np.asarray(sensor_dofs, dtype=np.int64).reshape(-1)
    q = len(f)
    shapes = np.asarray(mode_shapes, dtype=float)
    if q == 0:
        shapes = shapes.reshape(0, len(sensors))
    if shapes.shape != (q, len(sensors)):
        raise TargetError(f"mode shapes must be {q} x {len(sensors)}, got {shapes.shape}")
    if np.any(f <= 0):
        raise TargetError("measured frequencies must be positive")
    if np.any(np.diff(f) < 0):
        raise TargetError("measured frequencies must be ascending")
    if q and len(sensors) == 0:
        raise TargetError("no observed dofs")
    if len(set(sensors.tolist())) != len(sensors):
        raise TargetError("repeated sensor dof")
    if n_dofs is not None and np.any((sensors < 0) | (sensors >= n_dofs)):
        raise TargetError("sensor dof outside the model")
    bad = set(sensors.tolist()) & set(int(d) for d in constrained_dofs)
    if bad:
        raise TargetError(f"sensor dof {min(bad)} is constrained")
    w = raw_weights(f, scheme, mode_weight, custom)
    if len(w) != 2 * q:
        raise TargetError(f"expected {2 * q} weights, got {len(w)}")
    return ModalTarget(f, sensors, shapes, normalize_weights(w) if q else w)


def project_mode(mode, sensor_dofs) -> np.ndarray:
    sensors = np.asarray(sensor_dofs, dtype=np.int64)
    if sensors.size == 0:
        raise TargetError("no observed dofs")
    return np.asarray(mode)[sensors]


def mac(a, b) -> float:
    """|a . b| / (|a| |b|), the correlation measure used in the objective."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise TargetError("MAC of vectors with different lengths")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise TargetError("MAC of a zero vector")
    return float(min(1.0, abs(a @ b) / (na * nb)))


def mac_matrix(A, B) -> np.ndarray:
    """MAC between columns of A and columns of B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    num = np.abs(A.T @ B)
    den = np.outer(np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, 0.0)
    return np.minimum(out, 1.0)


@dataclass(frozen=True)
class Pairing:
    indices: tuple  # numerical mode paired with target mode i
    swapped: bool  # index and MAC pairings disagree


def pair_modes(projected_modes, target: ModalTarget, method: str = "index",
               buffer: int = 2) -> Pairing:
    """Pair target modes with numerical modes (columns of ``projected_modes``).

    ``index`` pairs by ascending frequency; ``mac`` maximizes the summed MAC over
    the first ``q + buffer`` numerical modes. A warning is logged when the two
    disagree.
    """
    if method not in ("index", "mac"):
        raise TargetError(f"unknown pairing method {method!r}")
    q = target.q
    modes = np.asarray(projected_modes, dtype=float)
    if q == 0:
        return Pairing((), False)
    if modes.ndim != 2 or modes.shape[1] < q:
        raise TargetError(f"need at least {q} numerical modes")
    pool = min(modes.shape[1], q + buffer)
    gamma = mac_matrix(target.mode_shapes.T, modes[:, :pool])
    rows, cols = linear_sum_assignment(gamma, maximize=True)
    best = tuple(int(c) for c in cols[np.argsort(rows)])
    # ties (e.g. modes not weighted) fall back to the index order
    if gamma[np.arange(q), list(best)].sum() <= gamma[np.arange(q), np.arange(q)].sum() + 1e-12:
        best = tuple(range(q))
    swapped = best != tuple(range(q))
    if swapped:
        log.warning("mode swap: MAC pairing %s differs from frequency ordering", best)
    return Pairing(best if method == "mac" else tuple(range(q)), swapped)


@dataclass(frozen=True, eq=False)
class Residual:
    r: np.ndarray  # (2q,) weighted frequency gaps then weighted MAC gaps
    mac: np.ndarray  # (q,)

    @property
    def phi(self) -> float:
        return float(self.r @ self.r)


def residual(target: ModalTarget, frequencies, projected_modes) -> Residual:
    """Weighted residual for paired model data.

    ``frequencies`` (q,) and ``projected_modes`` (n_sensors, q) are already in
    target order.
    """
    f = np.asarray(frequencies, dtype=float)
    q = target.q
    modes = np.asarray(projected_modes, dtype=float).reshape(len(target.sensor_dofs), -1)
    if len(f) != q or modes.shape[1] != q:
        raise TargetError(f"expected {q} frequencies and modes, got {len(f)} and {modes.shape[1]}")
    w = target.weights
    gamma = np.zeros(q)
    for i in range(q):
        try:
            gamma[i] = mac(target.mode_shapes[i], modes[:, i])
        except TargetError:
            if w[q + i] != 0:
                raise
    # zero weights give exact zeros whatever gamma is
    r = w * np.concatenate([target.frequencies - f, 1.0 - gamma])
    return Residual(r, gamma)


def phi_sum(target: ModalTarget, frequencies, gammas) -> float:
    """The objective written as the explicit weighted sum over modes."""
    w, q = target.weights, target.q
    total = 0.0
    for i in range(q):
        total += w[i] ** 2 * (target.frequencies[i] - frequencies[i]) ** 2
        total += w[q + i] ** 2 * (1.0 - gammas[i]) ** 2
    return total


def evaluate(target: ModalTarget, frequencies, full_modes, pairing: str = "index",
             check_swap: bool = False) -> Residual:
    """Residual from model frequencies (k >= q) and full-coordinate modes (n, k)."""
    if target.q == 0:
        return Residual(np.zeros(0), np.zeros(0))
    modes = np.asarray(full_modes)[np.asarray(target.sensor_dofs)]
    if pairing == "mac" or check_swap:
        idx = list(pair_modes(modes, target, pairing).indices)
    else:
        idx = list(range(target.q))
    return residual(target, np.asarray(frequencies)[idx], modes[:, idx])


# ---------------------------------------------------------------------------
# Target files

def target_from_dict(doc: dict, n_dofs: int | None = None, constrained_dofs=()) -> ModalTarget:
    try:
        f = doc["frequencies_hz"]
        sensors = [2 * int(n) + int(d) for n, d in doc["sensor_dofs"]]
        shapes = doc["mode_shapes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TargetError(f"target file missing or malformed field: {exc}") from None
    wspec = doc.get("weights", {}) or {}
    return build_target(f, shapes, sensors, wspec.get("scheme", "relative"),
                        wspec.get("mode_weight", DEFAULT_MODE_WEIGHT), wspec.get("custom"),
                        constrained_dofs, n_dofs)


def target_to_dict(target: ModalTarget, scheme: str = "custom", mode_weight=None) -> dict:
    weights = {"scheme": scheme}
    if scheme == "custom":
        weights["custom"] = target.weights.tolist()
    else:
        if mode_weight is None:
            # stored weights are normalized: bring the mode part back to the raw scale
            raw = raw_weights(target.frequencies, scheme, 0.0)[:target.q]
            wf = target.frequency_weights()
            scale = raw[0] / wf[0] if target.q and wf[0] > 0 else 1.0
            mode_weight = (scale * target.mode_weights()).tolist()
        weights["mode_weight"] = mode_weight
    return {
        "frequencies_hz": target.frequencies.tolist(),
        "sensor_dofs": [[int(d) // 2, int(d) % 2] for d in target.sensor_dofs],
        "mode_shapes": target.mode_shapes.tolist(),
        "weights": weights,
    }


def load_target(text: str, n_dofs: int | None = None, constrained_dofs=()) -> ModalTarget:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TargetError(f"target file is not valid JSON: {exc}") from None
    return target_from_dict(doc, n_dofs, constrained_dofs)
