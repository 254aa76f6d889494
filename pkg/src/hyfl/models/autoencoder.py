"""Account-side autoencoder: reconstruction-loss training and encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import DenseParams, flatten_grads
from .training import SGDState, TrainSpec, minibatch_sgd


@dataclass
class Autoencoder:
    encoder: DenseParams
    decoder: DenseParams
    train_state: SGDState | None = None

    def __post_init__(self) -> None:
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError("encoder output must match decoder input")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ValueError("decoder output must match encoder input")

    @classmethod
    def init(cls, in_dim: int = 13, hidden: int = 8, latent_dim: int = 4, seed: int = 0) -> "Autoencoder":
        rng = np.random.default_rng(seed)
        enc = DenseParams.init([in_dim, hidden, latent_dim], ["relu", "linear"], rng)
        dec = DenseParams.init([latent_dim, hidden, in_dim], ["relu", "linear"], rng)
        return cls(enc, dec)

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def n_params(self) -> int:
        return self.encoder.n_params + self.decoder.n_params

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.encoder.to_vector(), self.decoder.to_vector()])

    def set_vector(self, vec: np.ndarray) -> None:
        k = self.encoder.n_params
        self.encoder.set_vector(vec[:k])
        self.decoder.set_vector(vec[k:])

    def with_vector(self, vec: np.ndarray) -> "Autoencoder":
        out = self.copy()
        out.set_vector(vec)
        return out

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.encoder.copy(), self.decoder.copy())

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(X))

    def to_json(self) -> dict:
        return {"format": "hyfl-model", "version": 1, "kind": "autoencoder",
                "encoder": self.encoder.to_json(), "decoder": self.decoder.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> "Autoencoder":
        if doc.get("kind") != "autoencoder":
            raise ValueError("not an autoencoder document")
        return cls(DenseParams.from_json(doc["encoder"]), DenseParams.from_json(doc["decoder"]))


def ae_loss_grad(model: Autoencoder, X: np.ndarray, need_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """Summed squared reconstruction error and its gradient w.r.t. the flat parameter vector."""
    z = model.encoder.forward(X, keep=need_grad)
    out = model.decoder.forward(z, keep=need_grad)
    resid = out - X
    loss = float((resid * resid).sum())
    if not need_grad:
        return loss, None
    gWd, gbd, dz = model.decoder.backward(2.0 * resid)
    gWe, gbe, _ = model.encoder.backward(dz)
    return loss, np.concatenate([flatten_grads(gWe, gbe), flatten_grads(gWd, gbd)])


def ae_train_local(
    X: np.ndarray,
    init: Autoencoder,
    spec: TrainSpec,
    state: SGDState | None = None,
    stream: int = 0,
) -> Autoencoder:
    """Minimize the reconstruction error of ``init`` on ``X``.

    Batches use the mean per-row error. ``state`` resumes an earlier call's
    learning rate and epoch counter; ``stream`` separates the shuffles of
    different clients.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty shard")
    if X.shape[1] != init.in_dim:
        raise ValueError(f"feature dim {X.shape[1]} != encoder input {init.in_dim}")
    if not np.isfinite(X).all():
        raise ValueError("non-finite features")
    spec.validate()
    work = init.copy()

    def objective(theta, rows, need_grad):
        work.set_vector(theta)
        batch = X if rows is None else X[rows]
        loss, g = ae_loss_grad(work, batch, need_grad)
        n = len(batch)
        return loss / n, (g / n if g is not None else None)

    theta, state = minibatch_sgd(init.to_vector(), objective, len(X), spec, state, stream)
    out = init.with_vector(theta)
    out.train_state = state
    return out


def ae_encode(model: Autoencoder, x: np.ndarray) -> np.ndarray:
    """Embedding of one feature vector (1-D) or a batch of them (2-D)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.in_dim:
        raise ValueError(f"input dim {X.shape[1]} != encoder input {model.in_dim}")
    z = model.encoder.forward_rowwise(X)
    return z[0] if single else z
