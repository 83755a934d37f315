"""GMF/MLP base recommenders, the learned group head, and group baselines.

Batch methods take integer index arrays and return float64 predictions; the
single-sample functions at the bottom wrap them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numkit import (Activation, ConfigurationError, ContractViolation, DenseLayer,
                     embedding_normal)

DEFAULT_K = 8
DEFAULT_TOWER = (64, 32, 16, 8)
DEFAULT_HEAD = (64, 32, 16, 8)


class ModelKind(str, enum.Enum):
    GMF = "gmf"
    MLP = "mlp"


class MultiHotWeights(str, enum.Enum):
    ONES = "ones"
    UNIFORM = "uniform"


class GroupSizeError(ValueError):
    pass


def multihot_encode(members: Sequence[int], num_users: int,
                    weights: MultiHotWeights | str = MultiHotWeights.ONES) -> np.ndarray:
    members = [int(u) for u in members]
    if len(set(members)) != len(members):
        raise ValueError(f"duplicate members {members}")
    if not members:
        raise ValueError("empty group")
    for u in members:
        if not 0 <= u < num_users:
            raise IndexError(f"user index {u} out of range [0, {num_users})")
    x = np.zeros(num_users, dtype=np.float64)
    x[members] = 1.0 if MultiHotWeights(weights) is MultiHotWeights.ONES else 1.0 / len(members)
    return x


def _check_range(idx: np.ndarray, bound: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        bad = idx[(idx < 0) | (idx >= bound)].flat[0]
        raise IndexError(f"{what} index {bad} out of range [0, {bound})")
    return idx


def _run_layers(layers: Sequence[DenseLayer], x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = layer.forward(x)
    return x


def _back_layers(layers: Sequence[DenseLayer], g: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    grads: list[np.ndarray] = []
    for layer in reversed(layers):
        gw, gb, g = layer.backward(g)
        grads[:0] = [gw, gb]
    return grads, g


@dataclass
class BaseModel:
    """Individual recommender: user/item embeddings plus an optional tower.

    GMF predicts ``dot(P[u], Q[i])``; MLP feeds ``concat(P[u], Q[i])``
    through ReLU layers ending in a single linear unit.
    """

    kind: ModelKind
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    tower: list[DenseLayer] = field(default_factory=list)
    frozen: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ConfigurationError("user and item embeddings differ in latent dim")
        if self.kind is ModelKind.GMF and self.tower:
            raise ConfigurationError("GMF has no tower")
        if self.kind is ModelKind.MLP:
            if not self.tower:
                raise ConfigurationError("MLP needs a tower")
            if self.tower[0].in_dim != 2 * self.k:
                raise ConfigurationError(f"tower input {self.tower[0].in_dim} != 2K = {2 * self.k}")
            last = self.tower[-1]
            if last.out_dim != 1 or last.activation is not Activation.LINEAR:
                raise ConfigurationError("tower must end in a single linear unit")

    @classmethod
    def init(cls, kind: ModelKind | str, num_users: int, num_items: int, k: int = DEFAULT_K,
             tower: Sequence[int] = DEFAULT_TOWER, seed: int = 0) -> "BaseModel":
        rng = np.random.default_rng(seed)
        kind = ModelKind(kind)
        p = embedding_normal(rng, num_users, k)
        q = embedding_normal(rng, num_items, k)
        layers = []
        if kind is ModelKind.MLP:
            widths = [2 * k, *tower]
            layers = [DenseLayer.init(rng, a, b) for a, b in zip(widths, widths[1:])]
            layers.append(DenseLayer.init(rng, widths[-1], 1, Activation.LINEAR))
        return cls(kind, p, q, layers, seed=seed)

    @property
    def num_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def k(self) -> int:
        return self.user_embeddings.shape[1]

    def params(self) -> list[np.ndarray]:
        out = [self.user_embeddings, self.item_embeddings]
        for layer in self.tower:
            out += layer.params()
        return out

    def tower_params(self) -> list[np.ndarray]:
        return [p for layer in self.tower for p in layer.params()]

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params():
            p.setflags(write=False)

    def forward_vectors(self, user_vecs: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Predict from explicit user-side latent vectors ``(n, K)``."""
        user_vecs = np.asarray(user_vecs, dtype=np.float64)
        if user_vecs.shape[-1] != self.k:
            raise ConfigurationError(f"user vector width {user_vecs.shape[-1]} != K {self.k}")
        items = _check_range(items, self.num_items, "item")
        q = self.item_embeddings[items].astype(np.float64)
        self._cache = (user_vecs, q)
        if self.kind is ModelKind.GMF:
            return np.einsum("nk,nk->n", user_vecs, q)
        return _run_layers(self.tower, np.concatenate([user_vecs, q], axis=1))[:, 0]

    def backward_vectors(self, grad_pred: np.ndarray):
        """Gradients for the last :meth:`forward_vectors` call.

        Returns ``(grad_user_vecs, grad_item_rows, tower_grads)``.
        """
        if getattr(self, "_cache", None) is None:
            raise ContractViolation("backward without forward")
        user_vecs, q = self._cache
        g = np.asarray(grad_pred, dtype=np.float64)[:, None]
        if self.kind is ModelKind.GMF:
            return g * q, g * user_vecs, []
        grads, gx = _back_layers(self.tower, g)
        return gx[:, : self.k], gx[:, self.k:], grads

    def predict(self, users, items) -> np.ndarray:
        users = _check_range(users, self.num_users, "user")
        return self.forward_vectors(self.user_embeddings[users].astype(np.float64), items)


class HeadInput(str, enum.Enum):
    # First stage of the head: the base's frozen user embeddings summed over
    # members (EMBEDDING), or a trainable U-wide dense layer (MULTIHOT).
    EMBEDDING = "embedding"
    MULTIHOT = "multihot"


@dataclass
class GroupHead:
    """MLP taking an all-ones multi-hot group vector (width U) to the user latent space.

    With ``HeadInput.EMBEDDING`` the multi-hot vector first passes through the
    frozen base user embeddings, so ``layers`` start at width K. With
    ``HeadInput.MULTIHOT`` the first layer is a trainable ``U x width`` map.
    """

    layers: list[DenseLayer]
    num_users: int
    input_mode: HeadInput = HeadInput.EMBEDDING
    seed: int | None = None

    def __post_init__(self):
        self.input_mode = HeadInput(self.input_mode)
        if self.input_mode is HeadInput.MULTIHOT and self.layers[0].in_dim != self.num_users:
            raise ConfigurationError(
                f"multi-hot head input width {self.layers[0].in_dim} != number of users {self.num_users}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError("head layer widths do not chain")
        for layer in self.layers[:-1]:
            if layer.activation is not Activation.RELU:
                raise ConfigurationError("hidden head layers must be ReLU")
        if self.layers[-1].activation is not Activation.LINEAR:
            raise ConfigurationError("last head layer must be linear")

    @classmethod
    def init(cls, num_users: int, widths: Sequence[int] = DEFAULT_HEAD, seed: int = 0,
             input_mode: HeadInput | str = HeadInput.EMBEDDING, latent_dim: int | None = None) -> "GroupHead":
        """Glorot-initialised head; ``latent_dim`` defaults to the last width."""
        input_mode = HeadInput(input_mode)
        rng = np.random.default_rng(seed)
        first = num_users if input_mode is HeadInput.MULTIHOT else (latent_dim or widths[-1])
        dims = [first, *widths]
        n = len(widths)
        layers = [DenseLayer.init(rng, a, b, Activation.LINEAR if j == n - 1 else Activation.RELU)
                  for j, (a, b) in enumerate(zip(dims, dims[1:]))]
        return cls(layers, num_users, input_mode, seed=seed)

    @property
    def input_dim(self) -> int:
        return self.num_users

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def forward_members(self, members: np.ndarray, user_embeddings: np.ndarray | None = None) -> np.ndarray:
        """Head output for ``(n, G)`` member indexes.

        Both modes sum rows (of the embeddings or of the first weight matrix),
        which equals the dense product with the all-ones multi-hot vector.
        """
        members = _check_range(members, self.num_users, "user")
        self._members = members
        if self.input_mode is HeadInput.EMBEDDING:
            if user_embeddings is None:
                raise ConfigurationError("embedding-input head needs the base user embeddings")
            pooled = user_embeddings[members].astype(np.float64).sum(axis=1)
            return _run_layers(self.layers, pooled)
        first = self.layers[0]
        pre = first.weights[members].astype(np.float64).sum(axis=1) + first.bias
        x = first.forward_pre(pre)
        return _run_layers(self.layers[1:], x)

    def backward_members(self, grad_out: np.ndarray) -> list[np.ndarray]:
        if self.input_mode is HeadInput.EMBEDDING:
            grads, _ = _back_layers(self.layers, grad_out)
            return grads
        grads, g = _back_layers(self.layers[1:], grad_out)
        _, gb, _ = self.layers[0].backward(g, need_input_grad=False)
        if self.layers[0].activation is Activation.RELU:
            g = g * (self.layers[0]._pre > 0)
        gw = np.zeros(self.layers[0].weights.shape, dtype=np.float64)
        n, size = self._members.shape
        np.add.at(gw, self._members, np.broadcast_to(g[:, None, :], (n, size, g.shape[1])))
        return [gw, gb, *grads]

    def forward_dense(self, x: np.ndarray, user_embeddings: np.ndarray | None = None) -> np.ndarray:
        """Reference path taking an explicit multi-hot matrix ``(n, U)``."""
        x = np.asarray(x, dtype=np.float64)
        if self.input_mode is HeadInput.EMBEDDING:
            if user_embeddings is None:
                raise ConfigurationError("embedding-input head needs the base user embeddings")
            x = x @ user_embeddings.astype(np.float64)
        return _run_layers(self.layers, x)


@dataclass
class GroupModel:
    """Frozen base plus a group head trained for one group size (GGMF/GMLP)."""

    base: BaseModel
    head: GroupHead
    group_size: int
    allow_size_mismatch: bool = False

    def __post_init__(self):
        if self.head.output_dim != self.base.k:
            raise ConfigurationError(
                f"head output width {self.head.output_dim} != base latent dim K {self.base.k}")
        if self.head.num_users != self.base.num_users:
            raise ConfigurationError(
                f"head input width {self.head.num_users} != number of users {self.base.num_users}")
        if self.head.input_mode is HeadInput.EMBEDDING and self.head.layers[0].in_dim != self.base.k:
            raise ConfigurationError(
                f"head first layer width {self.head.layers[0].in_dim} != base latent dim K {self.base.k}")

    @property
    def name(self) -> str:
        return "GGMF" if self.base.kind is ModelKind.GMF else "GMLP"

    def check_size(self, size: int) -> None:
        if size != self.group_size and not self.allow_size_mismatch:
            raise GroupSizeError(f"model trained for groups of {self.group_size}, got {size}")

    def group_vectors(self, members: np.ndarray) -> np.ndarray:
        members = np.atleast_2d(np.asarray(members, dtype=np.int64))
        self.check_size(members.shape[1])
        return self.head.forward_members(members, self.base.user_embeddings)

    def predict(self, members: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.base.forward_vectors(self.group_vectors(members), items)


def ipa_batch(base: BaseModel, members: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Average of the members' individual predictions."""
    members = np.atleast_2d(np.asarray(members, dtype=np.int64))
    n, size = members.shape
    preds = base.predict(members.reshape(-1), np.repeat(np.asarray(items, dtype=np.int64), size))
    return preds.reshape(n, size).mean(axis=1)


def moavg_batch(base: BaseModel, members: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Predict once from the mean of the members' embedding rows."""
    members = np.atleast_2d(np.asarray(members, dtype=np.int64))
    members = _check_range(members, base.num_users, "user")
    vecs = base.user_embeddings[members].astype(np.float64).mean(axis=1)
    return base.forward_vectors(vecs, items)


def predict_individual(base: BaseModel, user: int, item: int) -> float:
    return float(base.predict(np.array([user]), np.array([item]))[0])


def predict_group(model: GroupModel, members: Sequence[int], item: int) -> float:
    return float(model.predict(np.array([list(members)]), np.array([item]))[0])


def ipa_predict(base: BaseModel, members: Sequence[int], item: int) -> float:
    if len(members) == 0:
        raise ValueError("empty group")
    return float(ipa_batch(base, np.array([list(members)]), np.array([item]))[0])


def moavg_predict(base: BaseModel, members: Sequence[int], item: int) -> float:
    if len(members) == 0:
        raise ValueError("empty group")
    return float(moavg_batch(base, np.array([list(members)]), np.array([item]))[0])
