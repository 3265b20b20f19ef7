import math

import numpy as np
import pytest

from alignlab import autodiff as ad
from alignlab import nn, pipeline
from alignlab.errors import ConfigError, DataError
from test_nn import tiny_model


@pytest.fixture(scope="module")
def default_model():
    chars = sorted(set("abcdefghijklmnopqrstuvwxyz0123456789 :"))
    return nn.PipelineModel(
        nn.EncoderConfig(), nn.ProjectorConfig(),
        nn.DecoderLmConfig(chars=chars, embed_dim=48, n_layers=2, n_heads=4),
        nn.LoraConfig(), d_feat=8, seed=0)


# --- regulate -------------------------------------------------------------


def test_regulate_boundary_example():
    # 20 frames at subsampling 3 -> 7 speech rows; "abc" prompt -> bos+3 = 4
    # rows; 5-char transcript + eos -> 6 rows; regions tile [0,17).
    m = tiny_model()
    feats = np.random.default_rng(0).standard_normal((20, 5))
    reg = pipeline.regulate(m, feats, prompt="abc", transcript="abcab")
    assert reg.bounds == {"speech": (0, 7), "prompt": (7, 11),
                          "transcript": (11, 17)}
    assert reg.embeds.data.shape == (17, 16)
    assert len(reg.targets) == len(reg.mask) == 17
    # supervised positions are exactly those predicting a transcript/eos row
    assert [i for i, f in enumerate(reg.mask) if f] == list(range(10, 16))
    ids = m.tok.encode("abcab") + [m.tok.eos_id]
    assert [reg.targets[i] for i in range(10, 16)] == ids


def test_regulate_supervised_count_is_len_plus_one():
    m = tiny_model()
    feats = np.random.default_rng(1).standard_normal((9, 5))
    for text in ["a", "cab", "abc ab", ""]:
        reg = pipeline.regulate(m, feats, prompt="c", transcript=text)
        assert sum(reg.mask) == len(text) + 1


def test_regulate_order_variant_moves_regions():
    m = tiny_model()
    feats = np.random.default_rng(2).standard_normal((20, 5))
    reg = pipeline.regulate(m, feats, prompt="abc", transcript="abcab",
                            order=("prompt", "speech", "transcript"))
    assert reg.bounds == {"prompt": (0, 4), "speech": (4, 11),
                          "transcript": (11, 17)}
    assert sum(reg.mask) == 6


def test_regulate_rejects_bad_orders():
    m = tiny_model()
    feats = np.zeros((3, 5))
    for order in [("transcript", "prompt", "speech"),
                  ("speech", "transcript", "prompt"),
                  ("speech", "prompt"),
                  ("speech", "speech", "transcript")]:
        with pytest.raises(ConfigError):
            pipeline.regulate(m, feats, transcript="a", order=order)


def test_regulate_decode_prefix_has_no_transcript_rows():
    m = tiny_model()
    feats = np.random.default_rng(3).standard_normal((20, 5))
    reg = pipeline.regulate(m, feats, prompt="abc", transcript=None)
    assert reg.embeds.data.shape[0] == 11
    assert "transcript" not in reg.bounds
    assert not any(reg.mask)


def test_regulate_prompt_region_starts_with_bos():
    m = tiny_model()
    feats = np.zeros((3, 5))
    reg = pipeline.regulate(m, feats, prompt="", transcript="a")
    lo, hi = reg.bounds["prompt"]
    assert hi - lo == 1  # bos only
    bos_row = m.lm.embed([m.tok.bos_id]).data
    assert np.array_equal(reg.embeds.data[lo], bos_row[0])


# --- forward_loss -----------------------------------------------------------


def test_loss_at_random_init_near_log_vocab(default_model):
    m = default_model
    v = m.tok.vocab_size
    rng = np.random.default_rng(5)
    items = [(rng.standard_normal((24, 8)), "hello world"),
             (rng.standard_normal((30, 8)), "write code 42")]
    with ad.no_grad():
        loss, count = pipeline.forward_loss(m, items, prompt="transcribe:")
    assert count == len("hello world") + 1 + len("write code 42") + 1
    assert abs(float(loss.data) - math.log(v)) <= 0.15 * math.log(v)


def test_loss_duplication_bit_identical():
    m = tiny_model()
    rng = np.random.default_rng(6)
    u = (rng.standard_normal((8, 5)), "cab")
    with ad.no_grad():
        single, _ = pipeline.forward_loss(m, [u], prompt="a")
        doubled, _ = pipeline.forward_loss(m, [u, u], prompt="a")
    assert single.data.tobytes() == doubled.data.tobytes()


def test_loss_reduction_sum_matches_mean_times_count():
    m = tiny_model()
    rng = np.random.default_rng(7)
    items = [(rng.standard_normal((6, 5)), "ab"),
             (rng.standard_normal((10, 5)), "c a")]
    with ad.no_grad():
        mean, n = pipeline.forward_loss(m, items, reduction="mean")
        total, n2 = pipeline.forward_loss(m, items, reduction="sum")
    assert n == n2 == 3 + 4
    assert float(total.data) == pytest.approx(float(mean.data) * n, rel=1e-12)


def test_loss_rejects_empty_batch_and_bad_reduction():
    m = tiny_model()
    with pytest.raises(ConfigError):
        pipeline.forward_loss(m, [])
    with pytest.raises(ConfigError):
        pipeline.forward_loss(m, [(np.zeros((3, 5)), "a")], reduction="max")


def test_gradient_routing_respects_frozen_groups():
    m = tiny_model(lora=True)
    m.set_trainable(["projector"])
    rng = np.random.default_rng(8)
    loss, _ = pipeline.forward_loss(m, [(rng.standard_normal((7, 5)), "ba")])
    ad.backward(loss)
    groups = m.param_groups()
    for _, t in groups["projector"]:
        assert t.grad is not None
    for gname in ("encoder", "bridge", "lora", "lm_body"):
        for _, t in groups[gname]:
            assert t.grad is None


def test_gradient_reaches_all_unfrozen_groups():
    m = tiny_model(lora=True)
    m.set_trainable(["encoder", "projector", "bridge", "lora"])
    rng = np.random.default_rng(9)
    loss, _ = pipeline.forward_loss(m, [(rng.standard_normal((7, 5)), "ba")])
    ad.backward(loss)
    for gname in ("encoder", "projector", "bridge", "lora"):
        grads = [t.grad for _, t in m.param_groups()[gname]]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)


# --- greedy decode -----------------------------------------------------------


def test_greedy_decode_stops_on_eos_immediately():
    m = tiny_model()
    m.lm.b_out.data = np.zeros_like(m.lm.b_out.data)
    m.lm.b_out.data[m.tok.eos_id] = 1000.0
    out = pipeline.greedy_decode(m, np.zeros((6, 5)), prompt="a")
    assert out == ""


def test_greedy_decode_exhausts_budget_without_eos():
    m = tiny_model()
    cid = m.tok.encode("b")[0]
    m.lm.b_out.data = np.zeros_like(m.lm.b_out.data)
    m.lm.b_out.data[cid] = 1000.0
    out = pipeline.greedy_decode(m, np.zeros((6, 5)), max_new_tokens=5)
    assert out == "b" * 5


def test_greedy_decode_deterministic_and_tape_clean():
    m = tiny_model(seed=4)
    feats = np.random.default_rng(10).standard_normal((12, 5))
    before = len(ad.tape().entries)
    a = pipeline.greedy_decode(m, feats, prompt="ab")
    b = pipeline.greedy_decode(m, feats, prompt="ab")
    assert a == b
    assert len(ad.tape().entries) == before


def test_greedy_decode_budget_validation():
    m = tiny_model()
    with pytest.raises(ConfigError):
        pipeline.greedy_decode(m, np.zeros((3, 5)), max_new_tokens=0)


# --- decode files -------------------------------------------------------------


def test_decode_file_round_trip(tmp_path):
    path = tmp_path / "decode.tsv"
    pairs = [("utt-003", "hello there"), ("utt-001", ""), ("utt-002", "a b")]
    pipeline.write_decode_file(path, pairs)
    assert pipeline.read_decode_file(path) == dict(pairs)
    # file order is preserved as written
    lines = path.read_text().splitlines()
    assert lines[0] == "utt-003\thello there"
    assert lines[1] == "utt-001\t"


def test_decode_file_rejects_tabs_and_duplicates(tmp_path):
    path = tmp_path / "decode.tsv"
    with pytest.raises(DataError):
        pipeline.write_decode_file(path, [("u1", "a\tb")])
    with pytest.raises(DataError):
        pipeline.write_decode_file(path, [("u\t1", "ab")])
    path.write_text("u1\ta\nu1\tb\n")
    with pytest.raises(DataError):
        pipeline.read_decode_file(path)
    path.write_text("no-tab-here\n")
    with pytest.raises(DataError):
        pipeline.read_decode_file(path)
