"""Encoder/decoder policy-value network.

One tower is a source transformer encoder plus a causally masked prefix
decoder with cross attention; the hidden state at the last real prefix
position feeds the output head(s). encoder_mode picks whether the policy and
value heads read one shared tower or two parameter-independent ones.

Batching pads with index 0 behind key-padding masks, so the pad choice never
reaches the math. Evaluation runs in eval mode (dropout off) and is
deterministic; training steps draw dropout noise from the module-level torch
RNG seeded at construction.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ServerConfig

PAD_INDEX = 0


class Tower(nn.Module):
    """Embeddings, source encoder, and prefix decoder for one head."""

    def __init__(self, vocab_size: int, cfg: ServerConfig):
        super().__init__()
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(vocab_size, d)
        self.pos_embed = nn.Embedding(cfg.max_positions, d)
        self.scale = math.sqrt(d)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=cfg.heads,
            dim_feedforward=cfg.ffn_dim,
            dropout=cfg.dropout,
            batch_first=True,
        )
        # plain math path; the nested-tensor fast path degrades padding invariance
        self.encoder = nn.TransformerEncoder(enc_layer, num_layers=cfg.layers, enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(
            d_model=d,
            nhead=cfg.heads,
            dim_feedforward=cfg.ffn_dim,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(dec_layer, num_layers=cfg.layers)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device).unsqueeze(0)
        return self.token_embed(ids) * self.scale + self.pos_embed(pos)

    def forward(self, src, src_pad, prefix, prefix_pad, last_index):
        memory = self.encoder(self._embed(src), src_key_padding_mask=src_pad)
        t = prefix.shape[1]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=prefix.device), diagonal=1)
        h = self.decoder(
            self._embed(prefix),
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=prefix_pad,
            memory_key_padding_mask=src_pad,
        )
        # one hidden vector per sample: the last real (unpadded) prefix position
        return h[torch.arange(h.shape[0], device=h.device), last_index]


class PolicyValueNet(nn.Module):
    def __init__(self, vocab_size: int, cfg: ServerConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.policy_tower = Tower(vocab_size, cfg)
        self.value_tower = self.policy_tower if cfg.encoder_mode == "shared" else Tower(vocab_size, cfg)
        self.policy_head = nn.Linear(cfg.embed_dim, vocab_size)
        self.value_head = nn.Linear(cfg.embed_dim, 1)

    def _tensors(self, states):
        """Pad variable-length (src, prefix) id lists into masked batches."""
        n = len(states)
        s_len = max(len(s["src"]) for s in states)
        p_len = max(len(s["prefix"]) for s in states)
        if s_len > self.cfg.max_positions or p_len > self.cfg.max_positions:
            raise ValueError(f"sequence longer than max_positions={self.cfg.max_positions}")
        src = torch.full((n, s_len), PAD_INDEX, dtype=torch.long)
        prefix = torch.full((n, p_len), PAD_INDEX, dtype=torch.long)
        src_pad = torch.ones(n, s_len, dtype=torch.bool)
        prefix_pad = torch.ones(n, p_len, dtype=torch.bool)
        last = torch.zeros(n, dtype=torch.long)
        for i, s in enumerate(states):
            a, b = s["src"], s["prefix"]
            src[i, : len(a)] = torch.as_tensor(a, dtype=torch.long)
            src_pad[i, : len(a)] = False
            prefix[i, : len(b)] = torch.as_tensor(b, dtype=torch.long)
            prefix_pad[i, : len(b)] = False
            last[i] = len(b) - 1
        return src, src_pad, prefix, prefix_pad, last

    def _heads(self, states):
        t = self._tensors(states)
        hp = self.policy_tower(*t)
        hv = hp if self.value_tower is self.policy_tower else self.value_tower(*t)
        logits = self.policy_head(hp)
        values = torch.sigmoid(self.value_head(hv)).squeeze(-1)
        return logits, values

    @torch.no_grad()
    def evaluate(self, states) -> tuple[list[list[float]], list[float]]:
        self.eval()
        logits, values = self._heads(states)
        priors = torch.softmax(logits, dim=-1)
        return priors.double().tolist(), values.double().tolist()

    def loss_terms(self, samples, value_weight: float, l2_coeff: float):
        """Summed batch objective: visit-probability cross entropy, squared
        value error, and an optional L2 term over all live parameters."""
        self.train()
        logits, values = self._heads(samples)
        logp = torch.log_softmax(logits, dim=-1)
        policy_term = logits.new_zeros(())
        value_term = logits.new_zeros(())
        for i, s in enumerate(samples):
            for a, pi in s["probs"].items():
                policy_term = policy_term - pi * logp[i, a]
            value_term = value_term + value_weight * (s["bleu"] - values[i]) ** 2
        l2_term = logits.new_zeros(())
        if l2_coeff:
            for p in self.parameters():
                l2_term = l2_term + l2_coeff * (p**2).sum()
        return policy_term, value_term, l2_term

    def param_report(self) -> dict:
        def count(mod: nn.Module) -> int:
            return sum(p.numel() for p in mod.parameters())

        components = {"policy_tower": count(self.policy_tower)}
        if self.value_tower is self.policy_tower:
            components["value_tower"] = 0  # shared with the policy tower
        else:
            components["value_tower"] = count(self.value_tower)
        components["policy_head"] = count(self.policy_head)
        components["value_head"] = count(self.value_head)
        total = sum(p.numel() for p in self.parameters())
        return {"total": total, "components": components}
