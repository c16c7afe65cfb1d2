from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class HypothesisSet:
    """Finite candidate set ``M x d``. Immutable once built."""

    matrix: np.ndarray
    provenance: tuple
    strategy: str
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise InvalidArgument("hypothesis set must be a nonempty M x d matrix")
        if not np.all(np.isfinite(m)):
            raise InvalidArgument("hypothesis set contains non-finite rows")
        if len(self.provenance) != m.shape[0]:
            raise InvalidArgument("one provenance tag per row required")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def M(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def d(self) -> int:
        return int(self.matrix.shape[1])

    def digest(self) -> str:
        cached = self.__dict__.get("_digest")
        if cached is None:
            h = hashlib.sha256()
            h.update(self.strategy.encode())
            h.update(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
            h.update("|".join(self.provenance).encode())
            cached = h.hexdigest()
            object.__setattr__(self, "_digest", cached)  # fields are immutable
        return cached

    def permuted(self, perm) -> "HypothesisSet":
        perm = np.asarray(perm)
        return HypothesisSet(self.matrix[perm], tuple(np.asarray(self.provenance)[perm]),
                             self.strategy, dict(self.source))


def save_hypothesis_set(hyp: HypothesisSet, path) -> None:
    """Write ``hyp`` in the zoo container, with provenance in the manifest."""
    from .zoo import ModelZoo, save_zoo

    manifest = {"kind": "hypothesis-set", "strategy": hyp.strategy,
                "provenance": list(hyp.provenance), "source": hyp.source,
                "digest": hyp.digest()}
    save_zoo(ModelZoo(hyp.matrix, manifest), path)


def load_hypothesis_set(path) -> HypothesisSet:
    """Read a hypothesis set; a plain zoo file loads as the model-zoo strategy."""
    from .zoo import load_zoo

    z = load_zoo(path)
    if z.manifest.get("kind") == "hypothesis-set":
        return HypothesisSet(z.matrix, tuple(z.manifest["provenance"]),
                             z.manifest["strategy"], z.manifest.get("source", {}))
    return HypothesisSet(z.matrix, ("zoo",) * z.N, "model-zoo",
                         {"zoo": z.manifest.get("config_hash"), "N": z.N})
