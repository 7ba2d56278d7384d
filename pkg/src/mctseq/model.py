"""Policy/value models: f(state) -> (priors over the vocabulary, value in [0,1]).

Three kinds share the same evaluation interface:

  * TabularModel  — trainable; looks up one feature per state (the mirrored
                    source token, or an end-of-source feature) and keeps a
                    softmax logit row plus a sigmoid value parameter per
                    feature. Exact for the reverse synthetic task, and every
                    gradient is hand-derivable, which the test suite exploits.
  * OracleModel   — knows the synthetic task's bijection; not trainable.
  * RemoteModel   — speaks the wire protocol to an external backend
                    (see mctseq.remote).

The joint update minimizes, over a batch and with one gradient step,

    sum_s [ w_v * (bleu_s - v_s)^2  -  sum_a pi_s(a) * log p_s(a) ]  +  c * ||theta||^2

where the cross-entropy runs only over the actions present in the sample's
visit table, against the model's raw (un-renormalized) probabilities there.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, EOS_ID, SyntheticTaskSpec, Vocab, token_mapping

PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class State:
    """Source sentence plus the translation prefix (BOS-initial)."""

    src: tuple[int, ...]
    prefix: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "src", tuple(self.src))
        object.__setattr__(self, "prefix", tuple(self.prefix))
        if not self.prefix or self.prefix[0] != BOS_ID:
            raise ValueError("prefix must begin with BOS")
        if EOS_ID in self.prefix[:-1]:
            raise ValueError("EOS may appear only as the final prefix element")

    @property
    def emitted(self) -> int:
        return len(self.prefix) - 1

    @property
    def translation(self) -> tuple[int, ...]:
        return self.prefix[1:]


@dataclass(frozen=True)
class Evaluation:
    """Full-vocabulary prior distribution and a value estimate in [0,1]."""

    priors: np.ndarray
    value: float

    def __post_init__(self):
        s = float(self.priors.sum())
        if abs(s - 1.0) > 1e-6:
            raise ValueError(f"priors must sum to 1, got {s}")
        if float(self.priors.min()) < 0.0:
            raise ValueError("priors must be non-negative")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"value outside [0,1]: {self.value}")


@dataclass(frozen=True)
class TrainingSample:
    """One search step: state, visit-probability table, final sentence BLEU."""

    state: State
    visit_probs: dict[int, float]
    bleu: float

    def __post_init__(self):
        total = 0.0
        for p in self.visit_probs.values():
            if p < 0.0:
                raise ValueError("visit probabilities must be non-negative")
            total += p
        if total > 1.0 + 1e-6:
            raise ValueError(f"visit probabilities sum above 1: {total}")
        if not 0.0 <= self.bleu <= 1.0:
            raise ValueError(f"bleu outside [0,1]: {self.bleu}")


@dataclass(frozen=True)
class TrainParams:
    learning_rate: float
    l2_coeff: float = 0.0
    value_loss_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.l2_coeff < 0.0:
            raise ValueError("l2_coeff must be non-negative")


@dataclass(frozen=True)
class LossReport:
    total: float
    value_term: float
    policy_term: float
    l2_term: float

    def __add__(self, other: "LossReport") -> "LossReport":
        return LossReport(
            self.total + other.total,
            self.value_term + other.value_term,
            self.policy_term + other.policy_term,
            self.l2_term + other.l2_term,
        )

    def scaled(self, k: float) -> "LossReport":
        return LossReport(self.total * k, self.value_term * k, self.policy_term * k, self.l2_term * k)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class TabularModel:
    """Feature-table policy/value model over a fixed vocabulary.

    The feature of a state with t emitted tokens is src[len(src)-1-t] while
    t < len(src) (the source token read back-to-front), else a dedicated
    end-of-source feature. Zero-initialized: uniform priors, value 0.5.
    """

    kind = "tabular"
    trainable = True

    def __init__(self, vocab_size: int, vocab_fingerprint: str = ""):
        if vocab_size < 5:
            raise ValueError("vocab_size must cover the four specials")
        self.vocab_size = vocab_size
        self.vocab_fingerprint = vocab_fingerprint
        self.num_features = vocab_size + 1  # one row per token id + end feature
        self.logits = np.zeros((self.num_features, vocab_size))
        self.value_params = np.zeros(self.num_features)
        self._cache: dict[int, Evaluation] = {}

    # -- evaluation ----------------------------------------------------------

    def feature_of(self, state: State) -> int:
        t = state.emitted
        src = state.src
        if t < len(src):
            return src[len(src) - 1 - t]
        return self.num_features - 1

    def _evaluate_feature(self, f: int) -> Evaluation:
        ev = self._cache.get(f)
        if ev is None:
            priors = _softmax(self.logits[f])
            priors.flags.writeable = False
            ev = Evaluation(priors, _sigmoid(self.value_params[f]))
            self._cache[f] = ev
        return ev

    def evaluate_batch(self, states) -> list[Evaluation]:
        if not states:
            raise ValueError("evaluate_batch needs at least one state")
        return [self._evaluate_feature(self.feature_of(s)) for s in states]

    # -- training ------------------------------------------------------------

    def mark_updated(self) -> None:
        """Invalidate cached evaluations after any parameter change."""
        self._cache.clear()

    def loss_and_grad(self, batch, tp: TrainParams):
        """Summed batch loss and its exact gradient, without stepping.

        Returns (LossReport, grad_logits, grad_values). Probabilities at or
        below PROB_FLOOR enter the loss as log(PROB_FLOOR) and contribute no
        gradient, matching what a finite difference of the same loss sees.
        """
        g_logits = np.zeros_like(self.logits)
        g_values = np.zeros_like(self.value_params)
        value_term = 0.0
        policy_term = 0.0
        w_v = tp.value_loss_weight
        for s in batch:
            f = self.feature_of(s.state)
            p = _softmax(self.logits[f])
            v = _sigmoid(self.value_params[f])
            value_term += w_v * (s.bleu - v) ** 2
            g_values[f] += w_v * 2.0 * (v - s.bleu) * v * (1.0 - v)
            if s.visit_probs:
                live_mass = 0.0
                for a, pi in s.visit_probs.items():
                    pa = p[a]
                    if pa > PROB_FLOOR:
                        policy_term -= pi * math.log(pa)
                        live_mass += pi
                        g_logits[f, a] -= pi
                    else:
                        policy_term -= pi * math.log(PROB_FLOOR)
                if live_mass:
                    g_logits[f] += live_mass * p
        l2_term = 0.0
        if tp.l2_coeff:
            l2_term = tp.l2_coeff * (float((self.logits**2).sum()) + float((self.value_params**2).sum()))
            g_logits += 2.0 * tp.l2_coeff * self.logits
            g_values += 2.0 * tp.l2_coeff * self.value_params
        report = LossReport(value_term + policy_term + l2_term, value_term, policy_term, l2_term)
        return report, g_logits, g_values

    def apply_update(self, batch, tp: TrainParams) -> LossReport:
        """One gradient step on the summed batch loss. Returns the pre-step loss."""
        report, g_logits, g_values = self.loss_and_grad(batch, tp)
        self.logits -= tp.learning_rate * g_logits
        self.value_params -= tp.learning_rate * g_values
        self.mark_updated()
        return report

    def policy_step_weighted(self, entries, lr: float) -> float:
        """Descend -sum_t w_t * log p(a_t | s_t) with signed weights w_t.

        Used by the advantage-weighted baseline, where weights may be
        negative. Value parameters are untouched. Returns the loss.
        """
        loss, g = self.weighted_logprob_loss_and_grad(entries)
        self.logits -= lr * g
        self.mark_updated()
        return loss

    def weighted_logprob_loss_and_grad(self, entries):
        g = np.zeros_like(self.logits)
        loss = 0.0
        for state, action, w in entries:
            f = self.feature_of(state)
            p = _softmax(self.logits[f])
            pa = p[action]
            if pa > PROB_FLOOR:
                loss -= w * math.log(pa)
                g[f] += w * p
                g[f, action] -= w
            else:
                loss -= w * math.log(PROB_FLOOR)
        return loss, g

    # -- flat parameter access (finite-difference tests) ----------------------

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), self.value_params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        n = self.logits.size
        self.logits = flat[:n].reshape(self.logits.shape).copy()
        self.value_params = flat[n:].copy()
        self.mark_updated()

    def batch_loss(self, batch, tp: TrainParams) -> float:
        report, _, _ = self.loss_and_grad(batch, tp)
        return report.total


class OracleModel:
    """Task-aware reference model: 0.99 prior mass on the correct next token
    (the bijection-mapped source token, or EOS past the source), the rest
    uniform; value constantly 1. Not trainable."""

    kind = "oracle"
    trainable = False

    def __init__(self, task: SyntheticTaskSpec, vocab: Vocab):
        self.task = task
        self.vocab_size = vocab.size
        self.vocab_fingerprint = vocab.fingerprint()
        self._mapping = token_mapping(task)
        self._cache: dict[int, Evaluation] = {}

    def _target_action(self, state: State) -> int:
        t = state.emitted
        src = state.src
        if t >= len(src):
            return EOS_ID
        pos = len(src) - 1 - t if self.task.reorder == "reverse" else t
        return self._mapping[src[pos]]

    def _evaluate_target(self, target: int) -> Evaluation:
        ev = self._cache.get(target)
        if ev is None:
            rest = 0.01 / (self.vocab_size - 1)
            priors = np.full(self.vocab_size, rest)
            priors[target] = 0.99
            priors.flags.writeable = False
            ev = Evaluation(priors, 1.0)
            self._cache[target] = ev
        return ev

    def evaluate_batch(self, states) -> list[Evaluation]:
        if not states:
            raise ValueError("evaluate_batch needs at least one state")
        return [self._evaluate_target(self._target_action(s)) for s in states]

    def apply_update(self, batch, tp) -> LossReport:
        raise ValueError("not trainable")


def greedy_decode(model, src, max_len: int) -> list[int]:
    """Stepwise argmax decoding (ties break to the lowest id).

    Stops at EOS or after max_len emitted tokens. The result excludes BOS and
    includes EOS when one was produced.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src = tuple(src)
    prefix = (BOS_ID,)
    out: list[int] = []
    for _ in range(max_len):
        ev = model.evaluate_batch([State(src, prefix)])[0]
        a = int(np.argmax(ev.priors))
        out.append(a)
        if a == EOS_ID:
            break
        prefix = prefix + (a,)
    return out


def auto_max_len(src) -> int:
    """Default emitted-token cap for decoding a given source."""
    return 2 * len(src) + 5


# -- checkpoints --------------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model, path) -> None:
    """Write a versioned, self-describing checkpoint.

    Tabular parameters go out as decimal text, only the nonzero rows, so
    checkpoints diff cleanly and load/save round-trips are byte-identical.
    """
    if model.kind == "tabular":
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "model_kind": "tabular",
            "vocab_size": model.vocab_size,
            "vocab_fingerprint": model.vocab_fingerprint,
            "policy_logits": {
                str(f): [float(x) for x in row]
                for f, row in enumerate(model.logits)
                if np.any(row != 0.0)
            },
            "value_params": {
                str(f): float(v) for f, v in enumerate(model.value_params) if v != 0.0
            },
        }
    elif model.kind == "oracle":
        t = model.task
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "model_kind": "oracle",
            "vocab_size": model.vocab_size,
            "vocab_fingerprint": model.vocab_fingerprint,
            "task": {
                "src_vocab_size": t.src_vocab_size,
                "min_len": t.min_len,
                "max_len": t.max_len,
                "mapping_seed": t.mapping_seed,
                "reorder": t.reorder,
            },
        }
    else:
        raise ValueError(f"cannot checkpoint model kind {model.kind!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(_canonical_json(doc))


def load_model(path):
    """Load a checkpoint written by save_model; evaluates identically."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ValueError(f"corrupt checkpoint {path}: not a checkpoint document")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {doc['format_version']} (expected {CHECKPOINT_VERSION})"
        )
    kind = doc.get("model_kind")
    try:
        if kind == "tabular":
            m = TabularModel(doc["vocab_size"], doc.get("vocab_fingerprint", ""))
            for f_str, row in doc["policy_logits"].items():
                m.logits[int(f_str)] = row
            for f_str, v in doc["value_params"].items():
                m.value_params[int(f_str)] = v
            m.mark_updated()
            return m
        if kind == "oracle":
            t = doc["task"]
            spec = SyntheticTaskSpec(
                src_vocab_size=t["src_vocab_size"],
                min_len=t["min_len"],
                max_len=t["max_len"],
                mapping_seed=t["mapping_seed"],
                reorder=t["reorder"],
            )
            from .corpus import synthetic_vocab

            vocab = synthetic_vocab(spec)
            m = OracleModel(spec, vocab)
            if doc.get("vocab_fingerprint") and doc["vocab_fingerprint"] != m.vocab_fingerprint:
                raise ValueError(f"corrupt checkpoint {path}: vocab fingerprint mismatch")
            return m
    except (KeyError, TypeError, IndexError) as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from None
    raise ValueError(f"unknown model kind {kind!r} in {path}")
