import numpy as np
import pytest
import torch

from flowtts import acoustic, data, duration


@pytest.fixture(scope="session")
def tiny_corpus():
    return data.synthetic_corpus(n_utterances=8, n_speakers=2, seed=0)


@pytest.fixture(scope="session")
def tiny_acoustic_cfg(tiny_corpus):
    return acoustic.AcousticConfig(
        n_layers=2, hidden_dim=64, n_heads=4, dropout=0.0, spk_dim=32,
        phoneme_dim=32, vocab_size=len(tiny_corpus.vocab))


@pytest.fixture()
def tiny_system(tiny_acoustic_cfg):
    torch.manual_seed(7)
    return acoustic.AcousticSystem(tiny_acoustic_cfg)


@pytest.fixture(scope="session")
def tiny_duration_cfg(tiny_corpus):
    return duration.DurModelConfig.desk(vocab_size=len(tiny_corpus.vocab))


@pytest.fixture()
def tiny_duration_model(tiny_duration_cfg):
    torch.manual_seed(11)
    model = duration.DurationModel(tiny_duration_cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def trained_acoustic(tiny_corpus):
    """Overfit desk-config acoustic system shared by the slow tests."""
    cfg = acoustic.AcousticConfig(vocab_size=len(tiny_corpus.vocab))
    system, ema, losses = acoustic.train_acoustic(
        tiny_corpus, cfg, steps=4000, seed=0, batch_size=8)
    ema_system = acoustic.AcousticSystem(cfg)
    ema.copy_to(ema_system)
    ema_system.eval()
    return {"system": system, "ema": ema, "ema_system": ema_system,
            "losses": losses, "cfg": cfg}


@pytest.fixture(scope="session")
def trained_duration(tiny_corpus):
    """Overfit duration model on the same corpus."""
    cfg = duration.DurModelConfig.desk(vocab_size=len(tiny_corpus.vocab))
    model, losses = duration.train_duration(tiny_corpus, cfg, steps=1200, seed=0)
    return {"model": model, "losses": losses, "cfg": cfg}


@pytest.fixture(scope="session")
def style_corpora():
    """Neutral corpus for pretraining plus a 1.5x-stretched stylistic corpus
    (200 train + 40 held-out sentences) for the preference-trend experiment."""
    neutral = data.synthetic_corpus(n_utterances=64, n_speakers=2, seed=1)
    styled = data.synthetic_corpus(n_utterances=240, n_speakers=2, seed=2,
                                   duration_scale=1.5)
    return {"neutral": neutral,
            "styled_train": styled.utterances[:200],
            "styled_test": styled.utterances[200:],
            "styled": styled}


@pytest.fixture(scope="session")
def style_policy(style_corpora):
    """Duration model pretrained on the neutral corpus; the DPO reference."""
    neutral = style_corpora["neutral"]
    cfg = duration.DurModelConfig.desk(vocab_size=len(neutral.vocab))
    model, _ = duration.train_duration(neutral, cfg, steps=1200, seed=3)
    return model


@pytest.fixture(scope="session")
def style_pairs(style_corpora, style_policy):
    """Oracle preference pairs (winner = stylistic ground truth, loser =
    pretrained-policy sample) on the styled training split."""
    from flowtts import dpo
    rng = np.random.default_rng(10)
    return dpo.generate_pairs(style_corpora["styled_train"], style_policy, rng)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
