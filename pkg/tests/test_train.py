import io
import json

import numpy as np
import pytest

from mctseq.corpus import (
    EOS_ID,
    SentencePair,
    SyntheticTaskSpec,
    gen_synthetic,
    synthetic_vocab,
    token_mapping,
)
from mctseq.mcts import SearchParams
from mctseq.model import (
    OracleModel,
    State,
    TabularModel,
    TrainingSample,
    TrainParams,
)
from mctseq.train import (
    derive_seed,
    evaluate_greedy,
    load_pool,
    pretrain_policy,
    pretrain_value,
    save_pool,
    sim_sentences,
    train_actor_critic,
    train_mcts,
    train_reinforce,
    update_network,
)


class TestDeriveSeed:
    def test_deterministic_and_sensitive(self):
        assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
        assert derive_seed(7, 1, 2) != derive_seed(7, 1, 3)
        assert derive_seed(7, 1, 2) != derive_seed(8, 1, 2)

    def test_nonnegative(self):
        assert all(derive_seed(s, 5) >= 0 for s in range(50))


class TestPretrainPolicy:
    def test_loss_decreases_over_first_epochs(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size, small_vocab.fingerprint())
        curve = pretrain_policy(model, small_train, epochs=5, lr=0.2)
        assert all(b < a for a, b in zip(curve, curve[1:]))

    def test_zero_epochs_is_identity(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        before = model.get_flat_params().copy()
        assert pretrain_policy(model, small_train, epochs=0, lr=0.2) == []
        assert np.array_equal(model.get_flat_params(), before)

    def test_single_pair_converges(self, small_vocab):
        model = TabularModel(small_vocab.size)
        pair = SentencePair((5, 6, 7), (7, 6, 5, EOS_ID))
        pretrain_policy(model, [pair], epochs=40, lr=1.0)
        prefix = (1,)
        for tok in pair.ref:
            ev = model.evaluate_batch([State(pair.src, prefix)])[0]
            assert ev.priors[tok] > 0.95
            prefix = prefix + (int(tok),)

    def test_oracle_rejected(self, tiny_task):
        oracle = OracleModel(tiny_task, synthetic_vocab(tiny_task))
        with pytest.raises(ValueError, match="not trainable"):
            pretrain_policy(oracle, [], epochs=1, lr=0.1)


class TestPretrainValue:
    def test_perfect_policy_drives_value_toward_one(self, small_task, small_vocab, small_train):
        oracle = OracleModel(small_task, small_vocab)
        model = TabularModel(small_vocab.size)
        curve = pretrain_value(model, small_train[:40], oracle, samples_per_sentence=30, lr=0.5)
        assert len(curve) == 30
        assert curve[-1] < curve[0]
        states = [State(p.src, (1,) + p.ref[:1]) for p in small_train[:10]]
        assert all(ev.value > 0.8 for ev in model.evaluate_batch(states))

    def test_policy_parameters_untouched(self, small_task, small_vocab, small_train):
        oracle = OracleModel(small_task, small_vocab)
        model = TabularModel(small_vocab.size)
        logits_before = model.logits.copy()
        pretrain_value(model, small_train[:20], oracle, samples_per_sentence=2, lr=0.3)
        assert np.array_equal(model.logits, logits_before)

    def test_seeded_runs_agree(self, small_task, small_vocab, small_train):
        oracle = OracleModel(small_task, small_vocab)
        m1, m2 = TabularModel(small_vocab.size), TabularModel(small_vocab.size)
        c1 = pretrain_value(m1, small_train[:20], oracle, samples_per_sentence=3, lr=0.3, seed=5)
        c2 = pretrain_value(m2, small_train[:20], oracle, samples_per_sentence=3, lr=0.3, seed=5)
        assert c1 == c2
        assert np.array_equal(m1.value_params, m2.value_params)


class TestSimSentences:
    def test_one_sample_per_step_sharing_final_bleu(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        p = SearchParams(num_simulations=12, top_k=5, rng_seed=4)
        samples = sim_sentences(small_train[:1], model, p)
        # steps = emitted tokens of the finished translation
        depths = [s.state.emitted for s in samples]
        assert depths == list(range(len(samples)))
        assert len({s.bleu for s in samples}) == 1

    def test_oracle_samples_carry_unit_bleu(self, tiny_task):
        vocab = synthetic_vocab(tiny_task)
        oracle = OracleModel(tiny_task, vocab)
        pairs = gen_synthetic(tiny_task, 3, seed=8)
        p = SearchParams(num_simulations=20, top_k=vocab.size, rng_seed=0)
        samples = sim_sentences(pairs, oracle, p)
        assert samples and all(s.bleu == 1.0 for s in samples)

    def test_empty_batch(self, small_vocab):
        assert sim_sentences([], TabularModel(small_vocab.size), SearchParams()) == []

    def test_visit_probs_within_pruning_budget(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        p = SearchParams(num_simulations=10, top_k=3, rng_seed=1)
        for s in sim_sentences(small_train[:2], model, p):
            assert len(s.visit_probs) <= 3


class TestUpdateNetwork:
    def make_pool(self, vocab_size, n=10, seed=0):
        rng = np.random.default_rng(seed)
        pool = []
        for _ in range(n):
            src = tuple(int(t) for t in rng.integers(4, vocab_size, size=3))
            a = int(rng.integers(0, vocab_size))
            pool.append(TrainingSample(State(src, (1,)), {a: float(rng.random())}, float(rng.random())))
        return pool

    def test_zero_draws_is_identity(self, small_vocab):
        model = TabularModel(small_vocab.size)
        before = model.get_flat_params().copy()
        assert update_network(model, self.make_pool(small_vocab.size), TrainParams(learning_rate=0.1), draws=0) == []
        assert np.array_equal(model.get_flat_params(), before)

    def test_small_pool_still_fills_draws(self, small_vocab):
        model = TabularModel(small_vocab.size)
        reports = update_network(
            model, self.make_pool(small_vocab.size), TrainParams(learning_rate=0.05), draws=3, draw_size=256
        )
        assert len(reports) == 3

    def test_seed_fixes_the_draw_sequence(self, small_vocab):
        pool = self.make_pool(small_vocab.size, n=30)
        m1, m2 = TabularModel(small_vocab.size), TabularModel(small_vocab.size)
        r1 = update_network(m1, pool, TrainParams(learning_rate=0.1), draws=4, draw_size=16, seed=9)
        r2 = update_network(m2, pool, TrainParams(learning_rate=0.1), draws=4, draw_size=16, seed=9)
        assert [r.total for r in r1] == [r.total for r in r2]
        assert np.array_equal(m1.get_flat_params(), m2.get_flat_params())

    def test_empty_pool_rejected(self, small_vocab):
        with pytest.raises(ValueError, match="empty sample pool"):
            update_network(TabularModel(small_vocab.size), [], TrainParams(learning_rate=0.1))


class TestTrainMcts:
    def small_setup(self, task, vocab, train, mode="with_value"):
        model = TabularModel(vocab.size, vocab.fingerprint())
        pretrain_policy(model, train, epochs=1, lr=0.02)
        p = SearchParams(num_simulations=16, top_k=6, rng_seed=3, mode=mode)
        tp = TrainParams(learning_rate=0.05)
        return model, p, tp

    def test_history_length_and_budget_accounting(self, small_task, small_vocab, small_train):
        model, p, tp = self.small_setup(small_task, small_vocab, small_train)
        hist = train_mcts(
            model, small_train[:16], p, tp, sentences_per_round=8, rounds=3, sub_batch=4, draws=2, draw_size=32
        )
        assert len(hist) == 3
        assert [h.sentences for h in hist] == [8, 16, 24]
        assert [h.round for h in hist] == [0, 1, 2]

    def test_improves_validation_bleu(self):
        # narrow vocabulary keeps c_puct*P*sqrt(Y) above the backed-up values,
        # so the search can actually explore past its first choice
        task = SyntheticTaskSpec(src_vocab_size=4, min_len=2, max_len=4)
        vocab = synthetic_vocab(task)
        train = gen_synthetic(task, 80, seed=11)
        test = gen_synthetic(task, 30, seed=12)
        model = TabularModel(vocab.size, vocab.fingerprint())
        pretrain_policy(model, train[:1], epochs=1, lr=0.5)
        pretrain_value(model, train[:20], model, samples_per_sentence=4, lr=0.3, seed=0)
        before = evaluate_greedy(model, test).value
        p = SearchParams(num_simulations=50, top_k=vocab.size, rng_seed=3)
        hist = train_mcts(
            model,
            train[:32],
            p,
            TrainParams(learning_rate=0.3),
            sentences_per_round=16,
            rounds=4,
            sub_batch=8,
            draws=6,
            draw_size=128,
            val_data=test,
        )
        assert hist[-1].val_bleu is not None
        assert hist[-1].val_bleu > before

    def test_no_value_mode_leaves_value_parameters(self, small_task, small_vocab, small_train):
        model, p, tp = self.small_setup(small_task, small_vocab, small_train, mode="no_value")
        values_before = model.value_params.copy()
        train_mcts(model, small_train[:8], p, tp, sentences_per_round=8, rounds=1, sub_batch=4, draws=2, draw_size=16)
        assert np.array_equal(model.value_params, values_before)

    def test_dataset_not_mutated(self, small_task, small_vocab, small_train):
        model, p, tp = self.small_setup(small_task, small_vocab, small_train)
        data = small_train[:8]
        snapshot = list(data)
        train_mcts(model, data, p, tp, sentences_per_round=8, rounds=1, sub_batch=4, draws=1, draw_size=8)
        assert data == snapshot

    def test_metrics_stream_is_line_json(self, small_task, small_vocab, small_train):
        model, p, tp = self.small_setup(small_task, small_vocab, small_train)
        buf = io.StringIO()
        train_mcts(
            model, small_train[:8], p, tp, sentences_per_round=4, rounds=2, sub_batch=4, draws=1, draw_size=8,
            metrics_fp=buf,
        )
        lines = buf.getvalue().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["round"] == 0 and rec["sentences"] == 4 and "loss_total" in rec

    def test_oracle_rejected(self, tiny_task, small_train):
        oracle = OracleModel(tiny_task, synthetic_vocab(tiny_task))
        with pytest.raises(ValueError, match="not trainable"):
            train_mcts(oracle, small_train, SearchParams(), TrainParams(learning_rate=0.1))


class TestTrainReinforce:
    def test_zero_reward_sample_contributes_no_gradient(self, small_vocab):
        model = TabularModel(small_vocab.size)
        before = model.get_flat_params().copy()
        st = State((5, 6), (1,))
        model.apply_update([TrainingSample(st, {7: 0.0}, 0.0)], TrainParams(learning_rate=0.5, value_loss_weight=0.0))
        assert np.array_equal(model.get_flat_params(), before)

    def test_unit_reward_does_not_lower_taken_action(self, small_vocab, trained_model, small_train):
        import copy

        model = copy.deepcopy(trained_model)
        pair = small_train[0]
        probs_before = [
            model.evaluate_batch([State(pair.src, (1,) + pair.ref[:t])])[0].priors[pair.ref[t]]
            for t in range(len(pair.ref))
        ]
        train_reinforce(model, [pair], lr=0.1, batch_sentences=1, seed=0)
        probs_after = [
            model.evaluate_batch([State(pair.src, (1,) + pair.ref[:t])])[0].priors[pair.ref[t]]
            for t in range(len(pair.ref))
        ]
        # the trained policy samples its own reference (reward 1): reinforcement
        # must not push those action probabilities down
        assert all(a >= b - 1e-12 for a, b in zip(probs_after, probs_before))

    def test_value_parameters_untouched(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        values_before = model.value_params.copy()
        train_reinforce(model, small_train[:12], lr=0.1, batch_sentences=4, seed=1)
        assert np.array_equal(model.value_params, values_before)

    def test_history_budget_accounting(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        hist = train_reinforce(model, small_train[:10], lr=0.05, batch_sentences=4, seed=2)
        assert [h.sentences for h in hist] == [4, 8, 10]

    def test_seeded_runs_agree(self, small_vocab, small_train):
        m1, m2 = TabularModel(small_vocab.size), TabularModel(small_vocab.size)
        train_reinforce(m1, small_train[:8], lr=0.1, batch_sentences=4, seed=3)
        train_reinforce(m2, small_train[:8], lr=0.1, batch_sentences=4, seed=3)
        assert np.array_equal(m1.get_flat_params(), m2.get_flat_params())


class TestTrainActorCritic:
    def test_zero_advantage_means_zero_policy_step(self, small_vocab):
        model = TabularModel(small_vocab.size)
        logits_before = model.logits.copy()
        entries = [(State((5,), (1,)), 6, 0.0), (State((6,), (1,)), 7, 0.0)]
        loss = model.policy_step_weighted(entries, lr=0.5)
        assert loss == 0.0
        assert np.array_equal(model.logits, logits_before)

    def test_zero_critic_matches_reinforce_gradient(self, small_vocab):
        rng = np.random.default_rng(6)
        model = TabularModel(small_vocab.size)
        model.set_flat_params(rng.normal(0, 0.3, size=model.get_flat_params().shape))
        sts = [State(tuple(int(t) for t in rng.integers(4, 16, size=3)), (1,)) for _ in range(5)]
        acts = [int(rng.integers(0, 16)) for _ in range(5)]
        rewards = [float(rng.random()) for _ in range(5)]
        _, g_ac = model.weighted_logprob_loss_and_grad(list(zip(sts, acts, rewards)))
        batch = [TrainingSample(s, {a: b}, b) for s, a, b in zip(sts, acts, rewards)]
        _, g_re, _ = model.loss_and_grad(batch, TrainParams(learning_rate=0.1, value_loss_weight=0.0))
        assert np.allclose(g_ac, g_re, atol=1e-12)

    def test_requires_tabular_model(self, tiny_task):
        class Trainable:
            kind = "other"
            trainable = True

        with pytest.raises(ValueError, match="tabular"):
            train_actor_critic(Trainable(), [], lr=0.1)

    def test_runs_and_accounts_budget(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        hist = train_actor_critic(model, small_train[:8], lr=0.05, batch_sentences=4, seed=4)
        assert [h.sentences for h in hist] == [4, 8]
        assert all(h.loss is not None for h in hist)

    def test_critic_learns_while_policy_trains(self, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        values_before = model.value_params.copy()
        train_actor_critic(model, small_train[:12], lr=0.2, batch_sentences=4, seed=5)
        assert not np.array_equal(model.value_params, values_before)


class TestEvaluateGreedy:
    def test_oracle_scores_one(self, small_task, small_vocab, small_test):
        assert evaluate_greedy(OracleModel(small_task, small_vocab), small_test).value == 1.0

    def test_uniform_model_scores_near_zero(self, small_vocab, small_test):
        assert evaluate_greedy(TabularModel(small_vocab.size), small_test).value < 0.05

    def test_deterministic(self, trained_model, small_test):
        a = evaluate_greedy(trained_model, small_test)
        b = evaluate_greedy(trained_model, small_test)
        assert a == b


class TestPoolPersistence:
    def test_roundtrip(self, tmp_path, small_vocab, small_train):
        model = TabularModel(small_vocab.size)
        p = SearchParams(num_simulations=8, top_k=4, rng_seed=0)
        pool = sim_sentences(small_train[:3], model, p)
        path = tmp_path / "pool.jsonl"
        save_pool(pool, path)
        loaded = load_pool(path)
        assert len(loaded) == len(pool)
        for a, b in zip(pool, loaded):
            assert a.state == b.state
            assert a.bleu == pytest.approx(b.bleu)
            assert set(a.visit_probs) == set(b.visit_probs)
            for k in a.visit_probs:
                assert a.visit_probs[k] == pytest.approx(b.visit_probs[k])
