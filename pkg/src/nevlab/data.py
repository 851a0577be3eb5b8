"""Synthetic paired data with planted caption-swap noise and dropped objects."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class WorldConfig:
    vocab_size: int = 24  # number of object nouns M
    objects_per_image: int = 3
    feature_dim: int = 32
    noise_rate: float = 0.3
    drop_rate: float = 0.2
    feature_noise_sigma: float = 0.05
    dataset_size: int = 400
    seed: int = 0
    # the object basis is shared by every split drawn from one world
    basis_seed: int = 1234

    def validate(self) -> None:
        if self.vocab_size < 1 or self.objects_per_image < 1:
            raise ValueError("vocab_size and objects_per_image must be positive")
        if self.objects_per_image > self.vocab_size:
            raise ValueError("objects_per_image exceeds vocab_size")
        if self.feature_dim < self.vocab_size:
            raise ValueError("feature_dim must be at least vocab_size")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be non-negative")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be positive")
        if self.noise_rate > 0 and int(np.floor(self.noise_rate * self.dataset_size)) > 0 and self.dataset_size < 2:
            raise ValueError("caption-swap noise needs at least two samples")


@dataclass
class PairedSample:
    id: int
    features: np.ndarray
    caption: list[int]
    true_objects: list[int]
    is_noisy: bool = False
    dropped: list[int] = field(default_factory=list)
    original_caption: list[int] | None = None

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "features": [float(v) for v in self.features],
            "caption": list(self.caption),
            "true_objects": list(self.true_objects),
            "is_noisy": bool(self.is_noisy),
            "dropped": list(self.dropped),
        }
        if self.original_caption is not None:
            d["original_caption"] = list(self.original_caption)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PairedSample":
        return cls(
            id=int(d["id"]),
            features=np.array(d["features"], dtype=np.float64),
            caption=[int(t) for t in d["caption"]],
            true_objects=[int(t) for t in d["true_objects"]],
            is_noisy=bool(d["is_noisy"]),
            dropped=[int(t) for t in d["dropped"]],
            original_caption=None
            if d.get("original_caption") is None
            else [int(t) for t in d["original_caption"]],
        )


def object_basis(cfg: WorldConfig) -> np.ndarray:
    """(feature_dim, M) matrix with orthonormal columns, fixed by ``basis_seed``."""
    rng = np.random.default_rng(cfg.basis_seed)
    q, r = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.vocab_size)))
    return q * np.sign(np.diag(r))


def _swap_captions(captions: list[list[int]], chosen: np.ndarray, rng) -> dict[int, list[int]]:
    """Cyclic shift of captions among ``chosen`` so every one changes."""
    k = len(chosen)
    if k == 0:
        return {}
    n = len(captions)
    if k == 1:
        i = int(chosen[0])
        donors = [j for j in range(n) if captions[j] != captions[i]]
        if not donors:
            raise ValueError("cannot plant noise: all captions identical")
        return {i: list(captions[donors[int(rng.integers(len(donors)))]])}
    order = np.array(chosen)
    for _ in range(64):
        shifted = {int(order[a]): captions[int(order[(a + 1) % k])] for a in range(k)}
        if all(shifted[i] != captions[i] for i in shifted):
            return {i: list(c) for i, c in shifted.items()}
        order = rng.permutation(order)
    # identical captions keep colliding; patch the leftovers from any differing sample
    for i in shifted:
        if shifted[i] == captions[i]:
            donors = [j for j in range(n) if captions[j] != captions[i]]
            if not donors:
                raise ValueError("cannot plant noise: all captions identical")
            shifted[i] = captions[donors[int(rng.integers(len(donors)))]]
    return {i: list(c) for i, c in shifted.items()}


def generate_dataset(cfg: WorldConfig) -> list[PairedSample]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    basis = object_basis(cfg)
    M, m, N = cfg.vocab_size, cfg.objects_per_image, cfg.dataset_size
    samples = []
    for i in range(N):
        objs = np.sort(rng.choice(M, size=m, replace=False))
        feats = basis[:, objs].sum(axis=1) + rng.normal(0.0, cfg.feature_noise_sigma, cfg.feature_dim)
        keep = rng.random(m) >= cfg.drop_rate
        samples.append(
            PairedSample(
                id=i,
                features=feats,
                caption=[int(o) for o in objs[keep]],
                true_objects=[int(o) for o in objs],
                dropped=[int(o) for o in objs[~keep]],
            )
        )
    k = int(np.floor(cfg.noise_rate * N))
    chosen = np.sort(rng.choice(N, size=k, replace=False)) if k else np.array([], dtype=int)
    swapped = _swap_captions([s.caption for s in samples], chosen, rng)
    for i, cap in swapped.items():
        samples[i].caption = cap
        samples[i].is_noisy = True
    return samples


def save_dataset(samples: list[PairedSample], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


_REQUIRED = ("id", "features", "caption", "true_objects", "is_noisy", "dropped")


def load_dataset(path) -> list[PairedSample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                missing = [k for k in _REQUIRED if k not in d]
                if missing:
                    raise ValueError(f"missing keys {missing}")
                out.append(PairedSample.from_json(d))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
    return out


def features_matrix(samples: list[PairedSample]) -> np.ndarray:
    return np.stack([s.features for s in samples])
