"""Search-guided sequence decoding: PUCT tree search over translation
prefixes that improves a policy/value model from its own decodes, with
supervised and policy-gradient baselines on a synthetic reversal task."""

from .batcher import BatcherConfig, batch_stats, run_concurrent_searches
from .bleu import BleuScore, corpus_bleu, sentence_bleu, strip_special_tokens
from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    SentencePair,
    SyntheticTaskSpec,
    Vocab,
    build_vocab,
    gen_synthetic,
    load_dataset,
    save_dataset,
    synthetic_vocab,
    token_mapping,
)
from .mcts import (
    SearchNode,
    SearchParams,
    VisitDist,
    advance_root,
    backup,
    expand,
    make_root,
    run_simulations,
    select_child,
    translate_mcts,
)
from .model import (
    Evaluation,
    OracleModel,
    State,
    TabularModel,
    TrainingSample,
    TrainParams,
    greedy_decode,
    load_model,
    save_model,
)
from .remote import RemoteModel, run_conformance_suite
from .train import (
    evaluate_greedy,
    pretrain_policy,
    pretrain_value,
    sim_sentences,
    train_actor_critic,
    train_mcts,
    train_reinforce,
    update_network,
)

__version__ = "0.1.0"
