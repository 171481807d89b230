"""Synthetic changing-priors question answering data.

Each question type has a prefix, an answer type and a candidate answer list
with a train prior; the test split draws answers from the rank-reversed
prior.  Image features carry a noisy answer signature for a fraction of
examples, and questions of selected answer types carry a content token that
points at the answer with a configurable reliability.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import bag_of_words
from .objective import NUM_ANNOTATORS, annotator_soft_targets

ANSWER_TYPES = ("YesNo", "Number", "Other")
PRIOR_TOL = 1e-9


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class QuestionType:
    prefix: tuple[str, ...]
    answer_type: str
    candidates: tuple[str, ...]
    train_prior: tuple[float, ...]
    test_prior: tuple[float, ...]

    @property
    def name(self) -> str:
        return " ".join(self.prefix)


@dataclass(frozen=True)
class ChangingPriorsSpec:
    question_types: tuple[QuestionType, ...]
    content_vocab_size: int = 40
    image_feature_dim: int = 24
    annotator_noise: float = 0.1
    examples_per_split: int = 10000
    signal_strength: float = 0.7
    cue_reliability: float = 0.8
    cue_answer_types: tuple[str, ...] = ("Other",)
    signature_scale: float = 3.0
    content_tokens: tuple[int, int] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        validate_spec(self)

    @property
    def answer_vocab(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for qt in self.question_types:
            for a in qt.candidates:
                seen.setdefault(a, None)
        return tuple(seen)

    @property
    def token_vocab(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for qt in self.question_types:
            for tok in qt.prefix:
                seen.setdefault(tok, None)
        for i in range(self.content_vocab_size):
            seen.setdefault(f"w{i}", None)
        for qt in self.question_types:
            if qt.answer_type in self.cue_answer_types:
                for a in qt.candidates:
                    seen.setdefault(f"cue:{a}", None)
        return tuple(seen)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChangingPriorsSpec":
        d = dict(d)
        d["question_types"] = tuple(
            QuestionType(
                prefix=tuple(q["prefix"]),
                answer_type=q["answer_type"],
                candidates=tuple(q["candidates"]),
                train_prior=tuple(q["train_prior"]),
                test_prior=tuple(q["test_prior"]),
            )
            for q in d["question_types"]
        )
        for key in ("cue_answer_types", "content_tokens"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **changes) -> "ChangingPriorsSpec":
        d = asdict(self)
        d.update(changes)
        return ChangingPriorsSpec.from_dict(d)


def _check_prior(p: Sequence[float], k: int, what: str) -> None:
    if len(p) != k:
        raise SpecError(f"{what} has {len(p)} entries for {k} candidates")
    if any(x < 0 for x in p) or abs(sum(p) - 1.0) > PRIOR_TOL:
        raise SpecError(f"{what} is not a probability distribution: {p}")


def validate_spec(spec: ChangingPriorsSpec) -> None:
    if not spec.question_types:
        raise SpecError("at least one question type is required")
    changed = False
    for qt in spec.question_types:
        if not qt.candidates:
            raise SpecError(f"question type {qt.name!r} has no candidates")
        if not qt.prefix:
            raise SpecError("question types need a nonempty prefix")
        if qt.answer_type not in ANSWER_TYPES:
            raise SpecError(f"unknown answer type {qt.answer_type!r}")
        _check_prior(qt.train_prior, len(qt.candidates), f"{qt.name!r} train prior")
        _check_prior(qt.test_prior, len(qt.candidates), f"{qt.name!r} test prior")
        changed |= tuple(qt.train_prior) != tuple(qt.test_prior)
    if not changed:
        raise SpecError("test priors must differ from train priors for at least one question type")
    if len({qt.prefix for qt in spec.question_types}) != len(spec.question_types):
        raise SpecError("question type prefixes must be unique")
    for name in ("annotator_noise", "signal_strength", "cue_reliability"):
        v = getattr(spec, name)
        if not 0.0 <= v <= 1.0:
            raise SpecError(f"{name} must lie in [0, 1], got {v}")
    lo, hi = spec.content_tokens
    if lo < 0 or hi < lo:
        raise SpecError(f"bad content token range {spec.content_tokens}")
    if lo > 0 and spec.content_vocab_size < 1:
        raise SpecError("content tokens requested with an empty content vocabulary")
    if spec.image_feature_dim < 1 or spec.examples_per_split < 1:
        raise SpecError("image_feature_dim and examples_per_split must be positive")


def invert_priors(p: Sequence[float]) -> tuple[float, ...]:
    """Rank reversal: the i-th most likely candidate gets the i-th least likely mass.

    Ties are ordered by candidate index, which keeps the map an involution
    for distributions with distinct entries.
    """
    p = [float(x) for x in p]
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    out = [0.0] * len(p)
    for rank, i in enumerate(order):
        out[i] = p[order[len(p) - 1 - rank]]
    return tuple(out)


def _qt(prefix: str, answer_type: str, candidates: Sequence[str], prior: Sequence[float]) -> QuestionType:
    prior = tuple(float(x) for x in prior)
    return QuestionType(tuple(prefix.split()), answer_type, tuple(candidates), prior, invert_priors(prior))


def _flatten(p: Sequence[float], power: float) -> tuple[float, ...]:
    q = np.asarray(p) ** power
    q = q / q.sum()
    return tuple(float(x) for x in q)


def default_spec(version: int = 1, **overrides) -> ChangingPriorsSpec:
    """Stock question taxonomy.

    Version 1 has strong binary priors (0.9 / 0.1); version 2 is closer to
    balanced (0.65 / 0.35) with flatter priors elsewhere.
    """
    if version == 1:
        yes_no, power = (0.9, 0.1), 1.0
    elif version == 2:
        yes_no, power = (0.65, 0.35), 0.6
    else:
        raise SpecError(f"unknown default spec version {version}")
    numbers = tuple(str(i) for i in range(6))
    colors = ("red", "blue", "green", "yellow", "white", "black")
    sports = ("tennis", "baseball", "skiing", "soccer", "surfing")
    count_prior = (0.4, 0.25, 0.15, 0.1, 0.06, 0.04)
    color_prior = (0.35, 0.25, 0.15, 0.1, 0.09, 0.06)
    sport_prior = (0.45, 0.25, 0.13, 0.1, 0.07)
    # paired types share candidates with mirrored priors, so every answer is
    # common in train overall while each individual type stays skewed
    types = (
        _qt("is there a", "YesNo", ("no", "yes"), yes_no),
        _qt("is this a", "YesNo", ("yes", "no"), yes_no),
        _qt("are the", "YesNo", ("no", "yes"), yes_no),
        _qt("does the", "YesNo", ("yes", "no"), yes_no),
        _qt("how many", "Number", numbers, _flatten(count_prior, power)),
        _qt("how many people are", "Number", numbers, _flatten(count_prior[::-1], power)),
        _qt("what color is the", "Other", colors, _flatten(color_prior, power)),
        _qt("what color are the", "Other", colors, _flatten(color_prior[::-1], power)),
        _qt("what sport is", "Other", sports, _flatten(sport_prior, power)),
        _qt("what is the man playing", "Other", sports, _flatten(sport_prior[::-1], power)),
    )
    return ChangingPriorsSpec(question_types=types, **overrides)


@dataclass(frozen=True)
class Example:
    image_features: np.ndarray
    question_tokens: tuple[int, ...]
    question_type_id: int
    answer_type: str
    annotator_answers: tuple[int, ...]
    soft_target: np.ndarray
    ground_answer: int


@dataclass
class Split:
    """Columnar storage for one split; indexing yields :class:`Example`."""

    images: np.ndarray
    tokens: list[tuple[int, ...]]
    type_ids: np.ndarray
    annotators: np.ndarray
    ground: np.ndarray
    answer_type_of: tuple[str, ...]
    answer_vocab_size: int
    token_vocab_size: int
    targets: np.ndarray = field(init=False, repr=False)
    _bags: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.targets = np.stack(
            [annotator_soft_targets(row, self.answer_vocab_size) for row in self.annotators.tolist()]
        ) if len(self.tokens) else np.zeros((0, self.answer_vocab_size))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bags(self) -> np.ndarray:
        """Mean-pooling matrix over token ids (rows sum to 1), computed once."""
        if self._bags is None:
            self._bags = bag_of_words(self.tokens, self.token_vocab_size)
        return self._bags

    def __getitem__(self, i: int) -> Example:
        t = int(self.type_ids[i])
        return Example(
            image_features=self.images[i],
            question_tokens=self.tokens[i],
            question_type_id=t,
            answer_type=self.answer_type_of[t],
            annotator_answers=tuple(int(a) for a in self.annotators[i]),
            soft_target=self.targets[i],
            ground_answer=int(self.ground[i]),
        )

    def subset(self, idx: np.ndarray) -> "Split":
        return Split(
            images=self.images[idx],
            tokens=[self.tokens[i] for i in idx],
            type_ids=self.type_ids[idx],
            annotators=self.annotators[idx],
            ground=self.ground[idx],
            answer_type_of=self.answer_type_of,
            answer_vocab_size=self.answer_vocab_size,
            token_vocab_size=self.token_vocab_size,
        )

    @property
    def answer_types(self) -> np.ndarray:
        return np.array(self.answer_type_of)[self.type_ids]


@dataclass
class DatasetBundle:
    train: Split
    val: Split
    test: Split
    spec: ChangingPriorsSpec

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}


class _Generator:
    def __init__(self, spec: ChangingPriorsSpec):
        self.spec = spec
        self.answers = spec.answer_vocab
        self.answer_id = {a: i for i, a in enumerate(self.answers)}
        self.tokens = spec.token_vocab
        self.token_id = {t: i for i, t in enumerate(self.tokens)}
        seeds = np.random.SeedSequence(spec.seed).spawn(3)
        world = np.random.default_rng(seeds[0])
        directions = world.normal(size=(len(self.answers), spec.image_feature_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.signatures = spec.signature_scale * directions
        self.rngs = {"train": np.random.default_rng(seeds[1]), "test": np.random.default_rng(seeds[2])}

    def sample(self, split: str, n: int) -> Split:
        spec, rng = self.spec, self.rngs[split]
        qts = spec.question_types
        dim = spec.image_feature_dim
        type_ids = rng.integers(len(qts), size=n)
        images = np.empty((n, dim))
        tokens: list[tuple[int, ...]] = []
        annotators = np.empty((n, NUM_ANNOTATORS), dtype=np.int64)
        ground = np.empty(n, dtype=np.int64)
        lo, hi = spec.content_tokens
        for i, t in enumerate(type_ids):
            qt = qts[t]
            prior = qt.train_prior if split == "train" else qt.test_prior
            k = len(qt.candidates)
            g = int(rng.choice(k, p=prior))
            noise = rng.normal(size=dim)
            if rng.random() < spec.signal_strength:
                images[i] = self.signatures[self.answer_id[qt.candidates[g]]] + noise
            else:
                images[i] = noise
            toks = [self.token_id[w] for w in qt.prefix]
            n_content = int(rng.integers(lo, hi + 1))
            toks += [self.token_id[f"w{j}"] for j in rng.integers(spec.content_vocab_size, size=n_content)]
            if qt.answer_type in spec.cue_answer_types:
                toks.append(self.token_id[f"cue:{qt.candidates[self._deviate(rng, g, k, spec.cue_reliability)]}"])
            tokens.append(tuple(toks))
            noise_draws = rng.random(NUM_ANNOTATORS)
            for j in range(NUM_ANNOTATORS):
                c = g if noise_draws[j] >= spec.annotator_noise else self._other(rng, g, k)
                annotators[i, j] = self.answer_id[qt.candidates[c]]
            ground[i] = self.answer_id[qt.candidates[g]]
        return Split(
            images=images,
            tokens=tokens,
            type_ids=type_ids.astype(np.int64),
            annotators=annotators,
            ground=ground,
            answer_type_of=tuple(qt.answer_type for qt in qts),
            answer_vocab_size=len(self.answers),
            token_vocab_size=len(self.tokens),
        )

    @staticmethod
    def _other(rng: np.random.Generator, g: int, k: int) -> int:
        """A uniformly chosen candidate different from ``g`` (``g`` itself if k == 1)."""
        if k == 1:
            return g
        c = int(rng.integers(k - 1))
        return c + 1 if c >= g else c

    def _deviate(self, rng, g: int, k: int, reliability: float) -> int:
        return g if rng.random() < reliability else self._other(rng, g, k)


def generate(spec: ChangingPriorsSpec) -> DatasetBundle:
    """Draw train/val/test; val is a random 10% of the train pool."""
    gen = _Generator(spec)
    pool = gen.sample("train", spec.examples_per_split)
    test = gen.sample("test", spec.examples_per_split)
    n_val = int(round(0.1 * len(pool)))
    perm = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(4)[3]).permutation(len(pool))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return DatasetBundle(pool.subset(train_idx), pool.subset(val_idx), test, spec)


JSONL_FIELDS = ("image_features", "question_tokens", "question_type_id", "answer_type", "annotator_answers")


def _example_line(split: Split, i: int) -> str:
    t = int(split.type_ids[i])
    row = {
        "image_features": split.images[i].tolist(),
        "question_tokens": list(split.tokens[i]),
        "question_type_id": t,
        "answer_type": split.answer_type_of[t],
        "annotator_answers": split.annotators[i].tolist(),
    }
    return json.dumps(row, separators=(",", ":"))


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> list[Path]:
    """Write ``{train,val,test}.jsonl`` and ``spec.json`` (with vocabularies)."""
    out = Path(out_dir)
    written = []
    for name, split in bundle.splits().items():
        path = out / f"{name}.jsonl"
        path.write_text("".join(_example_line(split, i) + "\n" for i in range(len(split))))
        written.append(path)
    meta = {
        "spec": bundle.spec.to_dict(),
        "answer_vocab": list(bundle.spec.answer_vocab),
        "token_vocab": list(bundle.spec.token_vocab),
    }
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(meta, indent=2) + "\n")
    written.append(spec_path)
    return written


def _majority(annotators: Sequence[int]) -> int:
    counts = np.bincount(annotators)
    return int(np.argmax(counts))


def load_split(path: str | Path, spec: ChangingPriorsSpec) -> Split:
    """Read a JSON-lines split. The ground answer is restored as the annotator majority."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    n = len(rows)
    return Split(
        images=np.array([r["image_features"] for r in rows], dtype=np.float64).reshape(n, spec.image_feature_dim),
        tokens=[tuple(r["question_tokens"]) for r in rows],
        type_ids=np.array([r["question_type_id"] for r in rows], dtype=np.int64),
        annotators=np.array([r["annotator_answers"] for r in rows], dtype=np.int64).reshape(n, NUM_ANNOTATORS),
        ground=np.array([_majority(r["annotator_answers"]) for r in rows], dtype=np.int64),
        answer_type_of=tuple(qt.answer_type for qt in spec.question_types),
        answer_vocab_size=len(spec.answer_vocab),
        token_vocab_size=len(spec.token_vocab),
    )


def load_bundle(data_dir: str | Path) -> DatasetBundle:
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "spec.json").read_text())
    spec = ChangingPriorsSpec.from_dict(meta["spec"])
    splits = {name: load_split(data_dir / f"{name}.jsonl", spec) for name in ("train", "val", "test")}
    return DatasetBundle(spec=spec, **splits)
