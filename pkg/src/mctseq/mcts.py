"""PUCT tree search over translation prefixes.

One tree decodes one sentence. Simulations descend by Q + U, expand a new
node per simulation with the model's priors pruned to the top-K actions
(raw prior mass kept, not renormalized), and back up either the model value
or, at terminal nodes, the sentence BLEU against the reference. The visit
distribution returned for a decode step is rescaled by the retained prior
mass, so actions the pruning discarded keep probability zero downstream.

In no_value mode only terminal BLEU reaches backup; expansions still happen
so the tree deepens, but nothing is backed up from non-terminal leaves, and
visit counts grow only along paths that touched a finished translation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .bleu import sentence_bleu, strip_special_tokens
from .corpus import BOS_ID, EOS_ID
from .model import State, auto_max_len

# Study switch: the selection rule's written form divides the exploration
# term by N, which is infinite on fresh edges; the default uses 1+N so P
# steers first visits. Flip for side-by-side behavior comparisons only.
LITERAL_U_DENOMINATOR = False


@dataclass(frozen=True)
class Edge:
    N: int
    W: float
    Q: float
    P: float


@dataclass(frozen=True)
class SearchParams:
    c_puct: float = 0.5
    tau: float = 1.0
    num_simulations: int = 100
    top_k: int = 50
    max_len: int = 0  # 0: derive 2*len(src)+5 per sentence
    mode: str = "with_value"
    rng_seed: int = 0

    def __post_init__(self):
        if self.c_puct <= 0.0:
            raise ValueError("c_puct must be positive")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.num_simulations < 1:
            raise ValueError("num_simulations must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")
        if self.mode not in ("with_value", "no_value"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")


def per_sentence_params(p: "SearchParams", index: int) -> "SearchParams":
    """Independent, reproducible search seed for the index-th sentence of a
    block; concurrent and sequential runs derive the same one."""
    seed = int(np.random.SeedSequence([p.rng_seed, index]).generate_state(1)[0])
    return replace(p, rng_seed=seed)


@dataclass(frozen=True)
class VisitDist:
    """Root visit probabilities, already scaled down by the retained prior mass."""

    probs: dict[int, float]
    retained_mass: float

    def __post_init__(self):
        if not 0.0 < self.retained_mass <= 1.0 + 1e-6:
            raise ValueError(f"retained_mass outside (0,1]: {self.retained_mass}")
        total = 0.0
        for p in self.probs.values():
            if p < 0.0:
                raise ValueError("visit probabilities must be non-negative")
            total += p
        if abs(total - self.retained_mass) > 1e-6:
            raise ValueError(f"probs sum {total} != retained mass {self.retained_mass}")

    def argmax_action(self) -> int:
        best_a, best_p = -1, -1.0
        for a, p in sorted(self.probs.items()):
            if p > best_p:
                best_a, best_p = a, p
        return best_a


class SearchNode:
    """Tree node: per-edge stats live in parallel arrays sorted by action id.

    Children are materialized on first traversal, so most of the K edges
    never own a node. The per-sentence context (stripped reference, model,
    search params) rides along on every node so moves can expand children
    without re-threading it.
    """

    __slots__ = (
        "state",
        "terminal",
        "terminal_value",
        "parent",
        "parent_edge_index",
        "actions",
        "P",
        "N",
        "W",
        "children",
        "ref",
        "model",
        "params",
    )

    def __init__(self, state: State, terminal: bool, terminal_value=None, ref=None, model=None, params=None):
        self.state = state
        self.terminal = terminal
        self.terminal_value = terminal_value
        self.parent = None
        self.parent_edge_index = None
        self.actions = None  # set by expand()
        self.P = None
        self.N = None
        self.W = None
        self.children: dict[int, SearchNode] = {}
        self.ref = ref
        self.model = model
        self.params = params

    @property
    def expanded(self) -> bool:
        return self.actions is not None

    @property
    def parent_edge_used(self):
        if self.parent is None:
            return None
        return int(self.parent.actions[self.parent_edge_index])

    @property
    def edges(self) -> dict[int, Edge]:
        if self.actions is None:
            return {}
        return {
            int(a): Edge(int(n), float(w), float(w / n) if n > 0 else 0.0, float(p))
            for a, n, w, p in zip(self.actions, self.N, self.W, self.P)
        }

    def __repr__(self):
        return f"SearchNode(prefix={self.state.prefix}, edges={len(self.actions) if self.expanded else 0}, terminal={self.terminal})"


def effective_max_len(params: SearchParams, src) -> int:
    return params.max_len if params.max_len > 0 else auto_max_len(src)


def _is_terminal(state: State, max_len: int) -> bool:
    return state.prefix[-1] == EOS_ID or state.emitted >= max_len


def top_k_actions(priors: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest priors (ties to the lower id), sorted by id."""
    if k >= len(priors):
        return np.arange(len(priors))
    order = np.lexsort((np.arange(len(priors)), -priors))
    return np.sort(order[:k])


def expand(node: SearchNode, evaluation, k: int) -> None:
    """Attach edges for the k most probable actions, keeping raw priors."""
    if node.actions is not None:
        raise ValueError("double expansion")
    if node.terminal:
        raise ValueError("expand on terminal node")
    keep = top_k_actions(np.asarray(evaluation.priors), k)
    node.actions = keep
    node.P = np.asarray(evaluation.priors)[keep].astype(float)
    node.N = np.zeros(len(keep))
    node.W = np.zeros(len(keep))


def _select_index(node: SearchNode, c_puct: float, parent_visits: float) -> int:
    n = node.N
    q = np.where(n > 0.0, node.W / np.maximum(n, 1.0), 0.0)
    if LITERAL_U_DENOMINATOR:
        with np.errstate(divide="ignore"):
            u = c_puct * node.P * math.sqrt(parent_visits) / n
        u[n == 0.0] = math.inf
    else:
        u = c_puct * node.P * math.sqrt(parent_visits) / (1.0 + n)
    score = q + u
    best = np.flatnonzero(score == score.max())
    if len(best) > 1:
        p = node.P[best]
        best = best[p == p.max()]
    return int(best[0])  # actions sorted ascending: first index is lowest id


def select_child(node: SearchNode, c_puct: float, parent_visits: int):
    """Action maximizing Q + c_puct*P*sqrt(N_parent)/(1+N); ties prefer higher P, then lower id."""
    if node.actions is None or len(node.actions) == 0:
        raise ValueError("select on unexpanded node")
    return int(node.actions[_select_index(node, c_puct, float(parent_visits))])


def backup(leaf: SearchNode, value: float) -> None:
    """Credit every edge on the root->leaf path: N += 1, W += value."""
    node = leaf
    while node.parent is not None:
        parent, i = node.parent, node.parent_edge_index
        parent.N[i] += 1.0
        parent.W[i] += value
        node = parent


def _make_child(parent: SearchNode, index: int, action: int, max_len: int) -> SearchNode:
    state = State(parent.state.src, parent.state.prefix + (action,))
    terminal = _is_terminal(state, max_len)
    value = None
    if terminal and parent.ref is not None:
        hyp = strip_special_tokens(state.translation)
        value = sentence_bleu(hyp, parent.ref).value
    child = SearchNode(state, terminal, value, ref=parent.ref, model=parent.model, params=parent.params)
    child.parent = parent
    child.parent_edge_index = index
    parent.children[action] = child
    return child


def make_root(src, ref, model, params: SearchParams) -> SearchNode:
    """Fresh expanded root over the BOS-only prefix."""
    src = tuple(src)
    state = State(src, (BOS_ID,))
    max_len = effective_max_len(params, src)
    ref_stripped = tuple(strip_special_tokens(ref)) if ref is not None else None
    root = SearchNode(state, _is_terminal(state, max_len), ref=ref_stripped, model=model, params=params)
    if not root.terminal:
        ev = model.evaluate_batch([state])[0]
        expand(root, ev, params.top_k)
    return root


def visit_dist_from_root(root: SearchNode, tau: float) -> VisitDist:
    """Temperature-shaped visit frequencies times the retained prior mass."""
    sum_priors = float(root.P.sum())
    counts = root.N
    total = counts.sum()
    if total == 0.0:
        # nothing was backed up (possible without a value model): lean on priors
        return VisitDist({int(a): float(p) for a, p in zip(root.actions, root.P)}, sum_priors)
    if tau == 1.0:
        weights = counts / total
    else:
        weights = np.zeros_like(counts)
        pos = counts > 0.0
        logw = np.log(counts[pos]) / tau
        w = np.exp(logw - logw.max())
        weights[pos] = w / w.sum()
    return VisitDist(
        {int(a): float(x * sum_priors) for a, x in zip(root.actions, weights)}, sum_priors
    )


def run_simulations(root: SearchNode, model, p: SearchParams) -> VisitDist:
    """One decode step's worth of search: Y simulations, then the visit distribution."""
    if root.terminal:
        raise ValueError("run_simulations on terminal root")
    if not root.expanded:
        raise ValueError("run_simulations needs an expanded root")
    max_len = effective_max_len(p, root.state.src)
    with_value = p.mode == "with_value"
    for _ in range(p.num_simulations):
        node = root
        value = None
        while True:
            if node.terminal:
                value = node.terminal_value
                break
            if node.parent is None:
                parent_visits = max(1.0, float(node.N.sum()))
            else:
                parent_visits = max(1.0, float(node.parent.N[node.parent_edge_index]))
            i = _select_index(node, p.c_puct, parent_visits)
            action = int(node.actions[i])
            child = node.children.get(action)
            if child is not None:
                node = child
                continue
            node = _make_child(node, i, action, max_len)
            if node.terminal:
                value = node.terminal_value
            else:
                ev = model.evaluate_batch([node.state])[0]
                expand(node, ev, p.top_k)
                if with_value:
                    value = ev.value
            break
        if value is not None:
            backup(node, value)
    return visit_dist_from_root(root, p.tau)


def advance_root(root: SearchNode, action) -> SearchNode:
    """Commit a move: the chosen child keeps its subtree and becomes the root."""
    if not root.expanded:
        raise ValueError("advance from unexpanded root")
    pos = int(np.searchsorted(root.actions, action))
    if pos >= len(root.actions) or root.actions[pos] != action:
        raise ValueError(f"no edge for action {action}")
    child = root.children.get(int(action))
    if child is None:
        child = _make_child(root, pos, int(action), effective_max_len(root.params, root.state.src))
    if child.actions is None and not child.terminal:
        ev = child.model.evaluate_batch([child.state])[0]
        expand(child, ev, child.params.top_k)
    child.parent = None
    child.parent_edge_index = None
    return child


def translate_mcts(src, ref, model, p: SearchParams, sample: bool):
    """Decode one sentence by repeated search.

    Each step runs the simulations, picks an action (argmax, or a draw from
    the visit distribution renormalized to 1 when sample is true), and
    advances the root, reusing the chosen subtree. The reference only ever
    feeds terminal BLEU backups inside the search. Returns the emitted id
    sequence and the per-step (state, VisitDist) trace.
    """
    rng = np.random.default_rng(p.rng_seed)
    root = make_root(src, ref, model, p)
    trace: list[tuple[State, VisitDist]] = []
    while not root.terminal:
        vd = run_simulations(root, model, p)
        if sample:
            items = sorted(vd.probs.items())
            weights = np.array([w for _, w in items])
            action = int(items[rng.choice(len(items), p=weights / weights.sum())][0])
        else:
            action = vd.argmax_action()
        trace.append((root.state, vd))
        root = advance_root(root, action)
    return list(root.state.translation), trace


def write_trace(fp, trace, translation) -> None:
    """Dump one decode's trace as line-delimited JSON (one record per step)."""
    for (state, vd), chosen in zip(trace, translation):
        rec = {
            "prefix": list(state.prefix),
            "probs": {str(a): p for a, p in sorted(vd.probs.items())},
            "retained_mass": vd.retained_mass,
            "chosen": int(chosen),
        }
        fp.write(json.dumps(rec, sort_keys=True) + "\n")
