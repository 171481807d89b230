"""Modular two-input classifier with a question-only adversary head.

Image encoder, question encoder, multiplicative fusion and answer classifier
form the base model; the adversary reads only the question encoding through
a gradient reversal layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

CHECKPOINT_HEADER = "advreg-ckpt-v1"
GROUPS = ("theta_v", "theta_q", "theta_z", "theta_vqa", "theta_adv")
BASE_GROUPS = ("theta_v", "theta_q", "theta_z", "theta_vqa")
ADV_DEPTHS = (1, 2, 3)
ADV_WIDTHS = (256, 512, 1024, 2048)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    question_vocab_size: int
    image_input_dim: int
    answer_vocab_size: int
    embed_dim: int = 32
    question_hidden_dim: int = 32
    fused_dim: int = 64
    adversary_hidden_layers: int = 2
    adversary_hidden_units: int = 512
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "seed":
                continue
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Five disjoint parameter groups, each a name -> float64 array mapping."""

    def __init__(self, groups: dict[str, dict[str, np.ndarray]]):
        if set(groups) != set(GROUPS):
            raise ConfigError(f"expected groups {GROUPS}, got {sorted(groups)}")
        self.groups = groups

    def __getitem__(self, group: str) -> dict[str, np.ndarray]:
        return self.groups[group]

    def items(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for g in GROUPS:
            for name, value in self.groups[g].items():
                yield g, name, value

    def copy(self) -> "ModelParams":
        return ModelParams({g: {n: v.copy() for n, v in ps.items()} for g, ps in self.groups.items()})

    def bind(self, tape: Tape) -> dict[str, dict[str, Tensor]]:
        """Register every parameter as a leaf on ``tape``."""
        return {
            g: {n: tape.leaf(v, name=f"{g}.{n}") for n, v in ps.items()}
            for g, ps in self.groups.items()
        }

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, _, a), (_, _, b) in zip(self.items(), other.items())
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    c = config
    layer = lambda i, o: (_glorot(rng, i, o), np.zeros(o))  # noqa: E731

    theta_q = {"embedding": _glorot(rng, c.question_vocab_size, c.embed_dim)}
    theta_q["W"], theta_q["b"] = layer(c.embed_dim, c.question_hidden_dim)

    theta_v = dict(zip(("W", "b"), layer(c.image_input_dim, c.fused_dim)))

    theta_z = {}
    theta_z["W_v"], theta_z["b_v"] = layer(c.fused_dim, c.fused_dim)
    theta_z["W_q"], theta_z["b_q"] = layer(c.question_hidden_dim, c.fused_dim)

    theta_vqa = dict(zip(("W", "b"), layer(c.fused_dim, c.answer_vocab_size)))

    theta_adv = {}
    width_in = c.question_hidden_dim
    for i in range(c.adversary_hidden_layers):
        theta_adv[f"W{i}"], theta_adv[f"b{i}"] = layer(width_in, c.adversary_hidden_units)
        width_in = c.adversary_hidden_units
    theta_adv["W_out"], theta_adv["b_out"] = layer(width_in, c.answer_vocab_size)

    return ModelParams(
        {"theta_v": theta_v, "theta_q": theta_q, "theta_z": theta_z,
         "theta_vqa": theta_vqa, "theta_adv": theta_adv}
    )


def bag_of_words(token_lists: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row-normalised token counts: row ``i`` averages the one-hots of question ``i``."""
    bag = np.zeros((len(token_lists), vocab_size))
    for i, tokens in enumerate(token_lists):
        if len(tokens) == 0:
            raise DataError(f"question {i} is empty")
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= vocab_size:
            raise DataError(f"question {i} has a token id outside [0, {vocab_size})")
        np.add.at(bag[i], ids, 1.0)
        bag[i] /= len(ids)
    return bag


def encode_bag(bag: Tensor, theta_q: dict[str, Tensor]) -> Tensor:
    pooled = ad.matmul(bag, theta_q["embedding"])
    return ad.relu(ad.linear(pooled, theta_q["W"], theta_q["b"]))


def encode_question(tape: Tape, token_lists: Sequence[Sequence[int]], theta_q: dict[str, Tensor]) -> Tensor:
    """Embed, mean-pool over positions, then linear + ReLU. One row per question."""
    vocab = theta_q["embedding"].shape[0]
    return encode_bag(tape.leaf(bag_of_words(token_lists, vocab)), theta_q)


def encode_image(features: Tensor, theta_v: dict[str, Tensor]) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != theta_v["W"].shape[0]:
        raise DataError(f"image features {features.shape} do not match encoder input {theta_v['W'].shape[0]}")
    return ad.relu(ad.linear(features, theta_v["W"], theta_v["b"]))


def fuse(v: Tensor, q: Tensor, theta_z: dict[str, Tensor]) -> Tensor:
    if v.shape[1] != theta_z["W_v"].shape[0] or q.shape[1] != theta_z["W_q"].shape[0]:
        raise ad.ContractError(f"fusion inputs {v.shape}, {q.shape} do not match projections")
    pv = ad.relu(ad.linear(v, theta_z["W_v"], theta_z["b_v"]))
    pq = ad.relu(ad.linear(q, theta_z["W_q"], theta_z["b_q"]))
    return ad.mul(pv, pq)


def predict_vqa(z: Tensor, theta_vqa: dict[str, Tensor]) -> Tensor:
    return ad.log_softmax(ad.linear(z, theta_vqa["W"], theta_vqa["b"]))


def adversary_head(h: Tensor, theta_adv: dict[str, Tensor]) -> Tensor:
    """Hidden linear+ReLU layers, then linear + log-softmax over answers."""
    depth = sum(1 for k in theta_adv if k.startswith("W") and k != "W_out")
    for i in range(depth):
        h = ad.relu(ad.linear(h, theta_adv[f"W{i}"], theta_adv[f"b{i}"]))
    return ad.log_softmax(ad.linear(h, theta_adv["W_out"], theta_adv["b_out"]))


def predict_adv(q: Tensor, theta_adv: dict[str, Tensor], lambda_grl: float) -> Tensor:
    """Answer log-probabilities from the question encoding alone, behind a GRL."""
    return adversary_head(ad.grl(q, lambda_grl), theta_adv)


@dataclass
class Forward:
    q: Tensor
    vqa_log_probs: Tensor
    adv_log_probs: Tensor | None


def forward(bound: dict[str, dict[str, Tensor]], images: Tensor, bags: Tensor,
            lambda_grl: float | None) -> Forward:
    """Run both heads; ``lambda_grl=None`` skips the adversary entirely."""
    q = encode_bag(bags, bound["theta_q"])
    v = encode_image(images, bound["theta_v"])
    log_p = predict_vqa(fuse(v, q, bound["theta_z"]), bound["theta_vqa"])
    adv = None if lambda_grl is None else predict_adv(q, bound["theta_adv"], lambda_grl)
    return Forward(q, log_p, adv)


def predict_answers(params: ModelParams, images: np.ndarray, bags: np.ndarray) -> np.ndarray:
    """Argmax answer ids of the base model (ties go to the lowest id)."""
    tape = Tape()
    bound = {g: {n: tape.leaf(v) for n, v in params[g].items()} for g in BASE_GROUPS}
    q = encode_bag(tape.leaf(bags), bound["theta_q"])
    v = encode_image(tape.leaf(images), bound["theta_v"])
    log_p = predict_vqa(fuse(v, q, bound["theta_z"]), bound["theta_vqa"])
    return np.argmax(log_p.data, axis=1)


def save_checkpoint(params: ModelParams, path: str | Path, config: ModelConfig | None = None) -> None:
    payload = {
        "format": CHECKPOINT_HEADER,
        "config": None if config is None else config.to_dict(),
        "params": {
            f"{g}/{n}": {"shape": list(v.shape), "values": v.ravel().tolist()}
            for g, n, v in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig | None]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_HEADER:
        raise ConfigError(f"{path}: not an {CHECKPOINT_HEADER} checkpoint")
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for key, entry in payload["params"].items():
        g, n = key.split("/", 1)
        groups[g][n] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    cfg = payload.get("config")
    return ModelParams(groups), (None if cfg is None else ModelConfig(**cfg))


def predict_question_only(params: ModelParams, bags: np.ndarray) -> np.ndarray:
    """Argmax answer ids of the adversary head applied directly to the question encoding."""
    tape = Tape()
    bound = {g: {n: tape.leaf(v) for n, v in params[g].items()} for g in ("theta_q", "theta_adv")}
    q = encode_bag(tape.leaf(bags), bound["theta_q"])
    return np.argmax(adversary_head(q, bound["theta_adv"]).data, axis=1)
