"""Linear softmax policies over a finite candidate-answer set.

A policy scores candidate ``a`` as ``w . phi(x, a)`` and normalizes the
scores with a softmax. ``phi`` is produced by :func:`joint_features`, which
places every candidate's image block before every candidate's question
block, so zeroing the leading ``n_candidates * image_dim`` weights yields a
policy that cannot see the image.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DomainError, ImmutabilityError, ShapeError


def as_vector(values, dim=None, name="vector"):
    """Validate a feature vector and return it as a float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def joint_features(image, question, n_candidates):
    """Per-candidate features for an input ``x = (image, question)``.

    Row ``a`` is zero except for a copy of ``image`` in slot ``a`` of the
    image block and a copy of ``question`` in slot ``a`` of the question
    block. The result has shape ``(n_candidates, n_candidates * (di + dq))``.
    """
    image = as_vector(image, name="image features")
    question = as_vector(question, name="question features")
    di, dq = image.shape[0], question.shape[0]
    out = np.zeros((n_candidates, n_candidates * (di + dq)))
    img_off = 0
    txt_off = n_candidates * di
    for a in range(n_candidates):
        out[a, img_off + a * di : img_off + (a + 1) * di] = image
        out[a, txt_off + a * dq : txt_off + (a + 1) * dq] = question
    return out


def feature_dim(n_candidates, image_dim, question_dim):
    return n_candidates * (image_dim + question_dim)


def image_weight_mask(n_candidates, image_dim, question_dim):
    """Boolean mask selecting the image-block weights."""
    mask = np.zeros(feature_dim(n_candidates, image_dim, question_dim), dtype=bool)
    mask[: n_candidates * image_dim] = True
    return mask


def _log_softmax(scores):
    shift = scores - np.max(scores)
    return shift - np.log(np.sum(np.exp(shift)))


class ToyPolicy:
    """Softmax-linear policy with a shared weight vector.

    Weights are read-only outside :meth:`apply_update`; a frozen policy
    rejects both updates and gradient requests.
    """

    def __init__(self, weights, candidate_set, frozen=False):
        candidate_set = [str(c) for c in candidate_set]
        if not candidate_set:
            raise DomainError("candidate_set must be non-empty")
        if len(set(candidate_set)) != len(candidate_set):
            raise DomainError("candidate ids must be unique")
        w = as_vector(weights, name="weights").copy()
        w.setflags(write=False)
        self._weights = w
        self.candidate_set = tuple(candidate_set)
        self._index = {c: i for i, c in enumerate(candidate_set)}
        self.frozen = bool(frozen)

    @classmethod
    def zeros(cls, dim, candidate_set):
        return cls(np.zeros(dim), candidate_set)

    @classmethod
    def random(cls, dim, candidate_set, rng, scale=1.0):
        return cls(rng.normal(scale=scale, size=dim), candidate_set)

    @property
    def weights(self):
        return self._weights

    @property
    def dim(self):
        return self._weights.shape[0]

    def index(self, answer):
        try:
            return self._index[str(answer)]
        except KeyError:
            raise DomainError(f"unknown answer id {answer!r}") from None

    def clone(self, frozen=None):
        return ToyPolicy(self._weights, self.candidate_set,
                         self.frozen if frozen is None else frozen)

    def apply_update(self, delta):
        """Add ``delta`` to the weights in place (single-writer)."""
        if self.frozen:
            raise ImmutabilityError("cannot update a frozen policy")
        delta = as_vector(delta, self.dim, name="update")
        w = self._weights + delta
        w.setflags(write=False)
        self._weights = w

    def _check_features(self, features):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape != (len(self.candidate_set), self.dim):
            raise ShapeError(
                f"expected features of shape {(len(self.candidate_set), self.dim)}, got {f.shape}"
            )
        return f

    def log_probs(self, features):
        """Log-probabilities of every candidate."""
        f = self._check_features(features)
        return _log_softmax(f @ self._weights)

    def log_prob(self, features, answer):
        return float(self.log_probs(features)[self.index(answer)])

    def grad_log_prob(self, features, answer):
        """Gradient of ``log_prob`` with respect to the weights."""
        if self.frozen:
            raise ImmutabilityError("frozen policy has no trainable gradient")
        f = self._check_features(features)
        probs = np.exp(_log_softmax(f @ self._weights))
        return f[self.index(answer)] - probs @ f

    def to_dict(self):
        return {
            "dim": self.dim,
            "candidate_set": list(self.candidate_set),
            "weights": [float(x) for x in self._weights],
            "frozen": self.frozen,
        }

    @classmethod
    def from_dict(cls, data):
        policy = cls(data["weights"], data["candidate_set"], data.get("frozen", False))
        if policy.dim != int(data["dim"]):
            raise ShapeError(f"checkpoint dim {data['dim']} != len(weights) {policy.dim}")
        return policy

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __repr__(self):
        return f"ToyPolicy(dim={self.dim}, candidates={len(self.candidate_set)}, frozen={self.frozen})"


def log_prob(policy, features, answer):
    return policy.log_prob(features, answer)


def grad_log_prob(policy, features, answer):
    return policy.grad_log_prob(features, answer)
