"""Concurrent per-sentence searches against one shared evaluation service.

Search workers (one thread per in-flight sentence) block on every expansion;
the service coalesces their pending states into model batches. A batch goes
out when max_batch requests are queued, when every live worker is blocked
(nobody else can add to the batch), or when the oldest request has waited
max_wait. Per-sentence seeds are derived from the sentence index, so batching
never changes any individual search's behavior.
"""
from __future__ import annotations

import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass

from .mcts import SearchParams, per_sentence_params, translate_mcts
from .model import State


@dataclass(frozen=True)
class EvalRequest:
    worker_id: int
    request_id: int
    state: State


@dataclass(frozen=True)
class BatcherConfig:
    max_batch: int = 64
    max_wait: float = 0.01  # seconds
    workers: int = 64

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.max_wait <= 0.0:
            raise ValueError("max_wait must be positive")


@dataclass(frozen=True)
class BatchStats:
    histogram: dict[int, int]  # batch size -> count
    mean_wait: float
    total_evaluations: int


class _Aborted(Exception):
    pass


class _Pending:
    __slots__ = ("request", "enqueued_at", "result", "error")

    def __init__(self, request: EvalRequest):
        self.request = request
        self.enqueued_at = time.monotonic()
        self.result = None
        self.error = None


class _EvalService:
    """Owns the model for reads; workers talk to it only through evaluate()."""

    def __init__(self, model, max_batch: int, max_wait: float):
        self.model = model
        self.max_batch = max_batch
        self.max_wait = max_wait
        self.cond = threading.Condition()
        self.pending: list[_Pending] = []
        self.active = 0  # worker threads still running
        self.blocked = 0  # workers currently awaiting a response
        self.stopped = False
        self.batch_sizes: Counter = Counter()
        self.waits: list[float] = []
        self._req_counters: dict[int, int] = {}

    def evaluate(self, worker_id: int, states):
        with self.cond:
            if self.stopped:
                raise _Aborted()
            entries = []
            for s in states:
                rid = self._req_counters.get(worker_id, 0)
                self._req_counters[worker_id] = rid + 1
                entries.append(_Pending(EvalRequest(worker_id, rid, s)))
            self.pending.extend(entries)
            self.blocked += 1
            self.cond.notify_all()
            try:
                while any(e.result is None and e.error is None for e in entries):
                    if self.stopped:
                        raise _Aborted()
                    self.cond.wait(timeout=0.5)
            finally:
                self.blocked -= 1
            for e in entries:
                if e.error is not None:
                    raise e.error
            return [e.result for e in entries]

    def dispatch_loop(self):
        try:
            self._dispatch()
        except BaseException:
            self.abort()
            raise

    def _dispatch(self):
        while True:
            with self.cond:
                while True:
                    if self.stopped:
                        return
                    if self.active == 0 and not self.pending:
                        return
                    if self.pending:
                        age = time.monotonic() - self.pending[0].enqueued_at
                        if (
                            len(self.pending) >= self.max_batch
                            or self.blocked >= self.active
                            or age >= self.max_wait
                        ):
                            break
                        self.cond.wait(timeout=max(1e-4, self.max_wait - age))
                    else:
                        self.cond.wait(timeout=0.05)
                batch = self.pending[: self.max_batch]
                del self.pending[: len(batch)]
                now = time.monotonic()
                self.batch_sizes[len(batch)] += 1
                self.waits.extend(now - e.enqueued_at for e in batch)
            try:
                evals = self.model.evaluate_batch([e.request.state for e in batch])
            except Exception as exc:
                with self.cond:
                    for e in batch:
                        e.error = exc
                    self.cond.notify_all()
                continue
            with self.cond:
                for e, ev in zip(batch, evals):
                    e.result = ev
                self.cond.notify_all()

    def abort(self):
        with self.cond:
            self.stopped = True
            self.cond.notify_all()

    def worker_done(self):
        with self.cond:
            self.active -= 1
            self.cond.notify_all()


class _ProxyModel:
    """Model stand-in handed to each search worker; evaluation only."""

    kind = "proxy"
    trainable = False

    def __init__(self, service: _EvalService, worker_id: int):
        self._service = service
        self._worker_id = worker_id

    def evaluate_batch(self, states):
        return self._service.evaluate(self._worker_id, states)


_last_stats: BatchStats | None = None


def run_concurrent_searches(pairs, model, sp: SearchParams, bc: BatcherConfig, sample: bool = True):
    """Decode every pair concurrently; results match the sequential reference
    run exactly and come back in input order."""
    global _last_stats
    if not pairs:
        _last_stats = BatchStats({}, 0.0, 0)
        return []
    service = _EvalService(model, bc.max_batch, bc.max_wait)
    n_workers = min(bc.workers, len(pairs))
    jobs: queue.SimpleQueue = queue.SimpleQueue()
    for i in range(len(pairs)):
        jobs.put(i)
    results: list = [None] * len(pairs)
    failure: list = []  # (sentence index, exception)
    fail_lock = threading.Lock()

    def worker(worker_id: int):
        proxy = _ProxyModel(service, worker_id)
        try:
            while not service.stopped:
                try:
                    i = jobs.get_nowait()
                except queue.Empty:
                    return
                try:
                    results[i] = translate_mcts(
                        pairs[i].src, pairs[i].ref, proxy, per_sentence_params(sp, i), sample=sample
                    )
                except _Aborted:
                    return
                except Exception as exc:
                    with fail_lock:
                        failure.append((i, exc))
                    service.abort()
                    return
        finally:
            service.worker_done()

    service.active = n_workers
    dispatcher = threading.Thread(target=service.dispatch_loop, name="eval-service")
    dispatcher.start()
    threads = [threading.Thread(target=worker, args=(w,), name=f"search-{w}") for w in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    with service.cond:
        service.cond.notify_all()
    dispatcher.join()
    total = sum(size * count for size, count in service.batch_sizes.items())
    mean_wait = float(sum(service.waits) / len(service.waits)) if service.waits else 0.0
    _last_stats = BatchStats(dict(service.batch_sizes), mean_wait, total)
    if failure:
        idx, exc = failure[0]
        raise RuntimeError(f"search worker failed on sentence {idx}") from exc
    return results


def batch_stats() -> BatchStats:
    """Dispatch histogram and mean queue wait of the most recent run."""
    if _last_stats is None:
        raise ValueError("no batch run recorded")
    return _last_stats
