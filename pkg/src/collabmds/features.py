"""Feature extraction and state windows.

``BsmFeaturizer`` is a scikit-learn transformer: ``fit`` learns per-feature
standardization on a training trace and ``transform`` maps any trace to a
``(N, d)`` matrix.  ``encode_trace`` then groups messages into streams (one
per pseudonym by default) and builds the fixed-length feature window each
message is judged on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .trace import BsmRecord, TraceArrays

FEATURE_NAMES = ("pos", "spd", "acl", "hed", "iat")
DEFAULT_FEATURES = ("pos", "spd", "acl", "hed")


def as_trace_arrays(X) -> TraceArrays:
    if isinstance(X, TraceArrays):
        return X
    if isinstance(X, EncodedTrace):
        return X.arrays
    records = list(X)
    if not records or not isinstance(records[0], BsmRecord):
        raise TypeError("expected a non-empty sequence of BsmRecord or a TraceArrays")
    return TraceArrays.from_records(records)


def raw_features(arrays: TraceArrays, features: Sequence[str], iat_fill: float = 1.0) -> np.ndarray:
    """Unscaled feature matrix with the requested columns, in order."""
    norms = None
    cols = []
    for name in features:
        if name == "iat":
            cols.append(arrays.inter_arrival(iat_fill))
            continue
        if name not in FEATURE_NAMES:
            raise ValueError(f"unknown feature {name!r}; choose from {FEATURE_NAMES}")
        if norms is None:
            norms = arrays.norms()
        cols.append(norms[:, FEATURE_NAMES.index(name)])
    return np.stack(cols, axis=1)


class BsmFeaturizer(TransformerMixin, BaseEstimator):
    """Kinematic norms (plus optional inter-arrival time), standardized.

    Parameters
    ----------
    features : tuple of str
        Columns to emit, any of ``pos, spd, acl, hed, iat``.
    iat_fill : float
        Inter-arrival value used for the first message of a pseudonym.
    standardize : bool
        Subtract the training mean and divide by the training std.
    """

    def __init__(self, features=DEFAULT_FEATURES, iat_fill=1.0, standardize=True):
        self.features = features
        self.iat_fill = iat_fill
        self.standardize = standardize

    def fit(self, X, y=None):
        raw = raw_features(as_trace_arrays(X), self.features, self.iat_fill)
        self.n_features_out_ = raw.shape[1]
        if self.standardize:
            self.mean_ = raw.mean(axis=0)
            scale = raw.std(axis=0)
            self.scale_ = np.where(scale > 1e-12, scale, 1.0)
        else:
            self.mean_ = np.zeros(raw.shape[1])
            self.scale_ = np.ones(raw.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        raw = raw_features(as_trace_arrays(X), self.features, self.iat_fill)
        return (raw - self.mean_) / self.scale_

    def to_dict(self) -> dict:
        check_is_fitted(self, "mean_")
        return {
            "features": list(self.features),
            "iat_fill": self.iat_fill,
            "standardize": self.standardize,
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> BsmFeaturizer:
        f = cls(tuple(d["features"]), d["iat_fill"], d["standardize"])
        f.mean_ = np.array(d["mean"], dtype=np.float64)
        f.scale_ = np.array(d["scale"], dtype=np.float64)
        f.n_features_out_ = len(f.mean_)
        return f


@dataclass
class EncodedTrace:
    """A trace turned into per-message feature windows.

    ``windows[i]`` holds the features of the ``n`` most recent messages of
    message ``i``'s stream (itself last), zero-padded at the front.
    ``rank[i]`` is the position of message ``i`` within its stream.
    """

    arrays: TraceArrays
    windows: np.ndarray
    keys: np.ndarray
    rank: np.ndarray
    window_key: str

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def labels(self) -> np.ndarray:
        return self.arrays.label

    @property
    def n_keys(self) -> int:
        return int(self.keys.max()) + 1

    def with_labels(self, labels) -> EncodedTrace:
        arr = TraceArrays(**{**vars(self.arrays), "label": np.asarray(labels, dtype=np.int8)})
        return EncodedTrace(arr, self.windows, self.keys, self.rank, self.window_key)

    def episode_order(self, rng: np.random.Generator | None, bucket: float = 1.0) -> np.ndarray:
        """Message order for one pass.

        Messages keep their coarse time order (``bucket``-second slots); inside
        a slot, vehicles are interleaved in a fresh random order.  Order within
        every stream is preserved, so windows stay valid.  With a single
        global stream the trace order is returned unchanged.
        """
        t = self.arrays.recv_time
        if rng is None or self.window_key == "global":
            return np.arange(len(self))
        vehicles = self.arrays.sender
        perm = rng.permutation(int(vehicles.max()) + 1)
        slot = np.floor(t / bucket)
        return np.lexsort((np.arange(len(self)), t, perm[vehicles], slot))


def stream_positions(keys: np.ndarray, times: np.ndarray):
    """Sort order by (key, time) and each message's rank within its stream."""
    n = len(keys)
    order = np.lexsort((np.arange(n), times, keys))
    sk = keys[order]
    starts = np.r_[True, sk[1:] != sk[:-1]]
    run_start = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    rank_sorted = np.arange(n) - run_start
    rank = np.empty(n, dtype=np.int64)
    rank[order] = rank_sorted
    return order, rank_sorted, rank


def build_windows(feats: np.ndarray, keys: np.ndarray, times: np.ndarray, n: int):
    order, rank_sorted, rank = stream_positions(keys, times)
    N, d = feats.shape
    windows = np.zeros((N, n, d))
    pos = np.arange(N)
    for lag in range(n):
        ok = rank_sorted >= lag
        windows[order[ok], n - 1 - lag] = feats[order[pos[ok] - lag]]
    return windows, rank


def encode_trace(featurizer: BsmFeaturizer, X, window: int, window_key: str = "pseudo") -> EncodedTrace:
    arrays = as_trace_arrays(X)
    feats = featurizer.transform(arrays)
    if window_key == "pseudo":
        keys = arrays.pseudo
    elif window_key == "global":
        keys = np.zeros(len(arrays), dtype=np.int64)
    else:
        raise ValueError(f"window_key must be 'pseudo' or 'global', got {window_key!r}")
    windows, rank = build_windows(feats, keys, arrays.recv_time, window)
    return EncodedTrace(arrays, windows, np.asarray(keys), rank, window_key)
