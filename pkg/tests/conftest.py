import numpy as np
import pytest

from dualdistill import tensor as T
from dualdistill.model import Batch, ModelConfig, forward_mlm, init_model, mlm_loss
from dualdistill.vocab import NUM_SPECIALS, Source


def micro_config(role="student", extra=0, **kw) -> ModelConfig:
    base = dict(vocab_size=20, hidden_dim=8, intermediate_dim=32, num_layers=2, num_heads=2,
                max_positions=16, extra_vocab_size=extra, role=role)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, rng, B=2, S=16, masked_per_row=3, pad_tail=0) -> Batch:
    """Random ids with a few masked positions per row; the last ``pad_tail`` columns of row 0 are padding."""
    ids = rng.integers(NUM_SPECIALS, cfg.vocab_size, size=(B, S))
    attn = np.ones((B, S), dtype=np.int64)
    if pad_tail:
        ids[0, S - pad_tail:] = 0
        attn[0, S - pad_tail:] = 0
    rows, cols = [], []
    for b in range(B):
        live = S - (pad_tail if b == 0 else 0)
        for c in rng.choice(live, size=masked_per_row, replace=False):
            rows.append(b)
            cols.append(int(c))
    rows, cols = np.array(rows), np.array(cols)
    labels = ids[rows, cols].copy()
    return Batch(
        token_ids=ids,
        source_tags=np.full((B, S), int(cfg.primary_source)),
        attention_mask=attn,
        type_ids=np.zeros((B, S), dtype=np.int64),
        mask_rows=rows,
        mask_cols=cols,
        label_sources=np.full(rows.size, int(cfg.primary_source)),
        label_ids=labels,
    )


def loss_wrt(params, batch, name):
    """Loss as a function of one parameter, the rest held at their values."""

    def f(x):
        saved = params.entries[name]
        params.entries[name] = x
        try:
            return mlm_loss(forward_mlm(params, batch))
        finally:
            params.entries[name] = saved

    return f


@pytest.fixture
def micro():
    cfg = micro_config()
    rng = np.random.default_rng(7)
    params = init_model(cfg, rng).astype(np.float64)
    return cfg, params, random_batch(cfg, rng)


__all__ = ["micro_config", "random_batch", "loss_wrt", "T", "Source"]
