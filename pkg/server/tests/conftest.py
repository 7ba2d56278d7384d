import queue
import threading

import pytest

mctseq_server = pytest.importorskip("mctseq_server", reason="server package not installed")

from mctseq.corpus import SyntheticTaskSpec, gen_synthetic, synthetic_vocab

from mctseq_server import serve


@pytest.fixture(scope="session")
def e2e_task():
    """Small enough that a 1-CPU transformer run stays in seconds."""
    return SyntheticTaskSpec(src_vocab_size=8, min_len=3, max_len=5)


@pytest.fixture(scope="session")
def e2e_vocab(e2e_task):
    return synthetic_vocab(e2e_task)


@pytest.fixture(scope="session")
def e2e_train(e2e_task):
    return gen_synthetic(e2e_task, 32, seed=21)


@pytest.fixture(scope="session")
def e2e_test(e2e_task):
    return gen_synthetic(e2e_task, 16, seed=22)


@pytest.fixture()
def server_factory():
    """Launch servers on ephemeral ports in daemon threads.

    Yields launch(cfg, vocab_size=None) -> port. Tests stop servers through
    shutdown requests; teardown only reaps the threads.
    """
    threads = []

    def launch(cfg, vocab_size=None):
        q = queue.Queue()
        t = threading.Thread(
            target=serve,
            args=(("127.0.0.1", 0), cfg),
            kwargs={"vocab_size": vocab_size, "ready": q.put},
            daemon=True,
        )
        t.start()
        threads.append(t)
        return q.get(timeout=30)

    yield launch
    for t in threads:
        t.join(timeout=10)
