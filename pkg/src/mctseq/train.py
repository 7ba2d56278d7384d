"""Training orchestration.

Four ways to move the model, all sharing the same update primitive:

  * pretrain_policy     — teacher-forced cross entropy on reference prefixes.
  * pretrain_value      — regression of v(prefix) toward the sentence BLEU of
                          the policy's own greedy translation, one uniformly
                          chosen prefix per sentence per pass.
  * train_mcts          — rounds of search-guided self-improvement: simulate
                          a block of sentences, pool the per-step visit
                          distributions, then several uniform redraws with one
                          gradient step each.
  * train_reinforce / train_actor_critic — the sampling baselines.

Every trainer reports cumulative sentences consumed so equal-budget
comparisons are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .bleu import BleuScore, corpus_bleu, sentence_bleu, strip_special_tokens
from .corpus import BOS_ID, EOS_ID, SentencePair
from .mcts import SearchParams, per_sentence_params, translate_mcts
from .model import (
    LossReport,
    State,
    TrainParams,
    TrainingSample,
    auto_max_len,
    greedy_decode,
)


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer coordinates (round, block, ...)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _require_trainable(model):
    if not getattr(model, "trainable", False):
        raise ValueError("not trainable")


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i : i + n]


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    sentences: int  # cumulative sentences consumed
    mean_train_bleu: float
    val_bleu: float | None
    loss: LossReport | None

    def to_json(self) -> str:
        rec = {
            "round": self.round,
            "sentences": self.sentences,
            "mean_train_bleu": self.mean_train_bleu,
            "val_bleu": self.val_bleu,
            "loss_total": self.loss.total if self.loss else None,
            "loss_value": self.loss.value_term if self.loss else None,
            "loss_policy": self.loss.policy_term if self.loss else None,
            "loss_l2": self.loss.l2_term if self.loss else None,
        }
        return json.dumps(rec, sort_keys=True)


def _emit(metrics_fp, record: RoundMetrics):
    if metrics_fp is not None:
        metrics_fp.write(record.to_json() + "\n")
        metrics_fp.flush()


# -- supervised pretraining ----------------------------------------------------


def pretrain_policy(model, data, epochs: int, lr: float) -> list[float]:
    """Teacher forcing: at every reference position, push probability onto the
    reference token. One update per sentence, fixed order. Returns per-epoch
    summed loss."""
    _require_trainable(model)
    tp = TrainParams(learning_rate=lr, value_loss_weight=0.0)
    curve = []
    for _ in range(epochs):
        total = 0.0
        for pair in data:
            prefix = (BOS_ID,)
            batch = []
            for tok in pair.ref:
                batch.append(TrainingSample(State(pair.src, prefix), {int(tok): 1.0}, 0.0))
                prefix = prefix + (int(tok),)
            total += model.apply_update(batch, tp).policy_term
        curve.append(total)
    return curve


def pretrain_value(model, data, policy_model, samples_per_sentence: int = 1, lr: float = 0.05, seed: int = 0) -> list[float]:
    """Fit the value head on greedy rollouts of the given policy.

    Each pass decodes every sentence once, scores it, and regresses the value
    of a single uniformly drawn prefix toward that score. One prefix per
    sentence per pass keeps successive updates from hitting near-identical
    states.
    """
    _require_trainable(model)
    rng = np.random.default_rng(seed)
    tp = TrainParams(learning_rate=lr, value_loss_weight=1.0)
    curve = []
    for _ in range(samples_per_sentence):
        total = 0.0
        for pair in data:
            x = greedy_decode(policy_model, pair.src, auto_max_len(pair.src))
            b = sentence_bleu(strip_special_tokens(x), strip_special_tokens(pair.ref)).value
            j = int(rng.integers(1, len(x) + 1))  # prefix length in [1, T]
            state = State(pair.src, (BOS_ID,) + tuple(x[:j]))
            total += model.apply_update([TrainingSample(state, {}, b)], tp).value_term
        curve.append(total)
    return curve


# -- search-guided training ----------------------------------------------------


def sim_sentences(batch, model, p: SearchParams, batcher_config=None) -> list[TrainingSample]:
    """Decode each pair with sampling turned on; every decode step becomes one
    training sample carrying the finished translation's sentence BLEU."""
    if batcher_config is not None:
        from .batcher import run_concurrent_searches

        results = run_concurrent_searches(batch, model, p, batcher_config, sample=True)
    else:
        results = [
            translate_mcts(pair.src, pair.ref, model, per_sentence_params(p, i), sample=True)
            for i, pair in enumerate(batch)
        ]
    samples: list[TrainingSample] = []
    for pair, (translation, trace) in zip(batch, results):
        b = sentence_bleu(strip_special_tokens(translation), strip_special_tokens(pair.ref)).value
        for state, vd in trace:
            samples.append(TrainingSample(state, vd.probs, b))
    return samples


def update_network(model, pool, tp: TrainParams, draws: int = 8, draw_size: int = 256, seed: int = 0) -> list[LossReport]:
    """`draws` gradient steps, each on `draw_size` samples drawn uniformly with
    replacement from the pool."""
    if not pool:
        raise ValueError("empty sample pool")
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(draws):
        idx = rng.integers(0, len(pool), size=draw_size)
        reports.append(model.apply_update([pool[i] for i in idx], tp))
    return reports


def train_mcts(
    model,
    data,
    p: SearchParams,
    tp: TrainParams,
    sentences_per_round: int = 256,
    rounds: int = 8,
    *,
    sub_batch: int = 64,
    draws: int = 8,
    draw_size: int = 256,
    val_data=None,
    batcher_config=None,
    metrics_fp=None,
) -> list[RoundMetrics]:
    """Self-improvement rounds: simulate, pool, update, validate.

    Sentences are taken from `data` in order, wrapping around, in sub-batches
    of `sub_batch`. Without a value model the update runs with the value term
    weighted to zero, leaving those parameters untouched.
    """
    _require_trainable(model)
    if p.mode == "no_value":
        tp = replace(tp, value_loss_weight=0.0)
    history: list[RoundMetrics] = []
    consumed = 0
    cursor = 0
    for r in range(rounds):
        block = [data[(cursor + i) % len(data)] for i in range(sentences_per_round)]
        cursor += sentences_per_round
        pool: list[TrainingSample] = []
        bleus: list[float] = []
        for b_idx, chunk in enumerate(_chunks(block, sub_batch)):
            sub_p = replace(p, rng_seed=derive_seed(p.rng_seed, 2, r, b_idx))
            samples = sim_sentences(chunk, model, sub_p, batcher_config=batcher_config)
            # each sentence opens with an empty-translation state
            for s in samples:
                if s.state.emitted == 0:
                    bleus.append(s.bleu)
            pool.extend(samples)
        reports = update_network(model, pool, tp, draws=draws, draw_size=draw_size, seed=derive_seed(p.rng_seed, 3, r))
        consumed += sentences_per_round
        val = evaluate_greedy(model, val_data).value if val_data else None
        loss = reports[0]
        for rep in reports[1:]:
            loss = loss + rep
        record = RoundMetrics(r, consumed, float(np.mean(bleus)), val, loss)
        history.append(record)
        _emit(metrics_fp, record)
    return history


# -- sampling baselines --------------------------------------------------------


def _sample_translation(model, src, rng, max_len: int):
    """Multinomial rollout of the policy; returns (states, actions)."""
    src = tuple(src)
    prefix = (BOS_ID,)
    states, actions = [], []
    for _ in range(max_len):
        state = State(src, prefix)
        ev = model.evaluate_batch([state])[0]
        a = int(rng.choice(len(ev.priors), p=ev.priors))
        states.append(state)
        actions.append(a)
        if a == EOS_ID:
            break
        prefix = prefix + (a,)
    return states, actions


def _rollout_bleu(actions, ref) -> float:
    return sentence_bleu(strip_special_tokens(actions), strip_special_tokens(ref)).value


def train_reinforce(
    model,
    data,
    lr: float,
    batch_sentences: int = 64,
    *,
    seed: int = 0,
    val_data=None,
    metrics_fp=None,
) -> list[RoundMetrics]:
    """Sentence-reward policy gradient: sample a translation, scale every
    taken action's log-probability gradient by its BLEU. Value parameters are
    never touched. One update per batch of sentences; one pass over data."""
    _require_trainable(model)
    rng = np.random.default_rng(seed)
    tp = TrainParams(learning_rate=lr, value_loss_weight=0.0)
    history: list[RoundMetrics] = []
    consumed = 0
    for b_idx, chunk in enumerate(_chunks(data, batch_sentences)):
        batch: list[TrainingSample] = []
        bleus = []
        for pair in chunk:
            states, actions = _sample_translation(model, pair.src, rng, auto_max_len(pair.src))
            b = _rollout_bleu(actions, pair.ref)
            bleus.append(b)
            for state, a in zip(states, actions):
                batch.append(TrainingSample(state, {a: b}, b))
        loss = model.apply_update(batch, tp)
        consumed += len(chunk)
        val = evaluate_greedy(model, val_data).value if val_data else None
        record = RoundMetrics(b_idx, consumed, float(np.mean(bleus)), val, loss)
        history.append(record)
        _emit(metrics_fp, record)
    return history


def train_actor_critic(
    model,
    data,
    lr: float,
    batch_sentences: int = 64,
    *,
    seed: int = 0,
    val_data=None,
    metrics_fp=None,
) -> list[RoundMetrics]:
    """Advantage-weighted policy gradient with a learned state-value critic.

    Advantages b - v(s_t) are computed for the whole batch before either
    update, then the policy ascends sum advantage * grad log p and the value
    head regresses toward b. Needs direct access to signed policy-gradient
    steps, so only the tabular model qualifies.
    """
    _require_trainable(model)
    if getattr(model, "kind", None) != "tabular":
        raise ValueError("actor-critic requires a tabular model")
    rng = np.random.default_rng(seed)
    value_tp = TrainParams(learning_rate=lr, value_loss_weight=1.0)
    history: list[RoundMetrics] = []
    consumed = 0
    for b_idx, chunk in enumerate(_chunks(data, batch_sentences)):
        entries = []  # (state, action, advantage), advantages frozen pre-update
        value_batch: list[TrainingSample] = []
        bleus = []
        for pair in chunk:
            states, actions = _sample_translation(model, pair.src, rng, auto_max_len(pair.src))
            b = _rollout_bleu(actions, pair.ref)
            bleus.append(b)
            evs = model.evaluate_batch(states)
            for state, a, ev in zip(states, actions, evs):
                entries.append((state, a, b - ev.value))
                value_batch.append(TrainingSample(state, {}, b))
        policy_loss = model.policy_step_weighted(entries, lr)
        value_loss = model.apply_update(value_batch, value_tp)
        consumed += len(chunk)
        val = evaluate_greedy(model, val_data).value if val_data else None
        loss = LossReport(
            policy_loss + value_loss.value_term, value_loss.value_term, policy_loss, 0.0
        )
        record = RoundMetrics(b_idx, consumed, float(np.mean(bleus)), val, loss)
        history.append(record)
        _emit(metrics_fp, record)
    return history


# -- evaluation ----------------------------------------------------------------


def evaluate_greedy(model, data) -> BleuScore:
    """Corpus BLEU of greedy decodes over a dataset."""
    hyps, refs = [], []
    for pair in data:
        hyp = greedy_decode(model, pair.src, auto_max_len(pair.src))
        hyps.append(strip_special_tokens(hyp))
        refs.append(strip_special_tokens(pair.ref))
    return corpus_bleu(hyps, refs)


# -- sample-pool persistence ---------------------------------------------------


def save_pool(pool, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in pool:
            rec = {
                "src": list(s.state.src),
                "prefix": list(s.state.prefix),
                "probs": {str(a): p for a, p in sorted(s.visit_probs.items())},
                "bleu": s.bleu,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_pool(path) -> list[TrainingSample]:
    pool = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            pool.append(
                TrainingSample(
                    State(tuple(rec["src"]), tuple(rec["prefix"])),
                    {int(a): float(p) for a, p in rec["probs"].items()},
                    float(rec["bleu"]),
                )
            )
    return pool
