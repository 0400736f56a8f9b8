import numpy as np
import pytest

from conceptmoe.errors import CheckpointError, ConfigError, ContextError, StateError
from conceptmoe.model import (
    ConceptModel,
    ConceptPipeline,
    EncoderBlock,
    ModelConfig,
    count_params,
    load_checkpoint,
    paper_config,
    param_breakdown,
    read_checkpoint_header,
    save_checkpoint,
)
from conceptmoe.nn import Attention, causal_mask
from conceptmoe.numerics import Tensor, check_gradients, no_grad, sum_
from conceptmoe.tokenizer import train as train_tokenizer
from conceptmoe.training import lm_loss, translation_loss


def tiny(**kw):
    base = dict(d_model=8, n_layers=2, n_heads=2, ffn_dim=12, n_experts=3, top_k=2,
                context_window=16, vocab_size=300, enc_layers=1, dec_layers=1,
                enc_heads=2, dec_heads=2, languages=("aa", "bb"))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tok():
    return train_tokenizer(["red cat sat", "blue dog ran", "red dog sat"] * 3, 264)


# -- config ----------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(d_model=10, n_heads=4), dict(top_k=5), dict(context_window=0),
    dict(vocab_size=0), dict(d_model=8, enc_heads=3), dict(n_layers=-1),
])
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


def test_config_dict_round_trip():
    cfg = tiny(seed=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_paper_config_matches_reference_table():
    cfg = paper_config()
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.ffn_dim) == (1024, 32, 32, 14336)
    assert (cfg.n_experts, cfg.top_k, cfg.enc_heads, cfg.dec_heads) == (8, 2, 16, 16)


def test_count_params_matches_enumeration():
    for cfg in (tiny(), tiny(moe_every_k_layers=2), tiny(top_k=3, n_experts=3), ModelConfig()):
        total, active = count_params(cfg)
        assert ConceptPipeline(cfg).num_parameters() == total
        assert active <= total
    cfg = paper_config()
    assert ConceptPipeline(cfg, meta=True).num_parameters() == count_params(cfg)[0]


def test_param_breakdown_active_counts_only_topk_experts():
    b = param_breakdown(tiny())
    assert b["total"] - b["active"] == b["experts_total"] - b["experts_active"]
    assert b["experts_active"] * 3 == b["experts_total"] * 2


# -- concept model ----------------------------------------------------------------
def test_lm_forward_shape():
    m = ConceptModel(tiny(), np.random.default_rng(0))
    assert m.lm_forward(np.zeros((3, 5), dtype=int)).shape == (3, 5, 300)


def test_lm_forward_is_causal_by_perturbation():
    m = ConceptModel(tiny(), np.random.default_rng(1))
    ids = np.random.default_rng(2).integers(4, 300, size=(1, 8))
    base = m.lm_forward(ids).data
    for j in range(8):
        alt = ids.copy()
        alt[0, j] = (alt[0, j] + 1) % 300
        out = m.lm_forward(alt).data
        # BLAS blocking may differ in the last ulp, so compare at 1e-12
        assert np.allclose(out[0, :j], base[0, :j], rtol=0, atol=1e-12)
        assert not np.allclose(out[0, j:], base[0, j:])


def test_lm_causality_by_autodiff():
    m = ConceptModel(tiny(), np.random.default_rng(3))
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 6, 8)), requires_grad=True)
    for i in range(6):
        x.grad = None
        sum_(m.transform(x)[:, i]).backward()
        assert np.all(x.grad[0, i + 1:] == 0)
        assert np.any(x.grad[0, : i + 1] != 0)


def test_context_window_enforced():
    m = ConceptModel(tiny(), np.random.default_rng(0))
    with pytest.raises(ContextError):
        m.lm_forward(np.zeros((1, 17), dtype=int))
    with pytest.raises(IndexError):
        m.lm_forward(np.full((1, 3), 300))


def test_concept_transform_matches_lm_hidden_states():
    m = ConceptModel(tiny(), np.random.default_rng(5))
    ids = np.array([[5, 9, 44, 7]])
    assert np.array_equal(m.transform(m.embed(ids)).data, m.hidden(ids).data)


def test_zero_layer_concept_model_is_identity():
    pipe = ConceptPipeline(tiny(n_layers=0))
    v = np.random.default_rng(6).normal(size=(5, 8))
    assert np.array_equal(pipe.concept_transform(v, final_norm=False).data, v)


def test_concept_transform_shape_and_width_check():
    pipe = ConceptPipeline(tiny())
    assert pipe.concept_transform(np.ones((4, 8))).shape == (4, 8)
    with pytest.raises(ConfigError):
        pipe.concept_transform(np.ones((4, 7)))


# -- codec ----------------------------------------------------------------------
def test_encode_language_shape_and_language_identity(tok):
    pipe = ConceptPipeline(tiny(vocab_size=tok.vocab_size), tok)
    ids = pipe.tokenize("red cat sat")
    a, b = pipe.encode_language(ids, "aa"), pipe.encode_language(ids, "bb")
    assert a.shape == (len(ids), 8)
    assert not np.allclose(a.data, b.data)
    with pytest.raises(ConfigError):
        pipe.encode_language(ids, "zz")


def test_encoder_is_bidirectional():
    pipe = ConceptPipeline(tiny())
    ids = [5, 6, 7, 8]
    base = pipe.encode_language(ids, "aa").data
    out = pipe.encode_language([5, 6, 7, 9], "aa").data
    assert not np.allclose(out[0], base[0])


def test_decode_language_shape_and_errors():
    pipe = ConceptPipeline(tiny())
    c = np.random.default_rng(7).normal(size=(3, 8))
    assert pipe.decode_language(c, "bb", [4, 5]).shape == (300,)
    with pytest.raises(ConfigError):
        pipe.decode_language(np.zeros((0, 8)), "bb", [])
    with pytest.raises(ConfigError):
        pipe.decode_language(c, "zz", [])
    with pytest.raises(ContextError):
        pipe.decode_language(c, "bb", list(range(4, 20)))


def test_decoder_is_causal():
    pipe = ConceptPipeline(tiny())
    c = Tensor(np.random.default_rng(8).normal(size=(1, 3, 8)))
    ids = np.array([[1, 5, 6, 7]])
    base = pipe.decoder(ids, [0], c).data
    alt = pipe.decoder(np.array([[1, 5, 6, 9]]), [0], c).data
    assert np.allclose(base[0, :3], alt[0, :3], rtol=0, atol=1e-12)


def test_vocab_mismatch_is_config_error(tok):
    with pytest.raises(ConfigError):
        ConceptPipeline(tiny(vocab_size=tok.vocab_size + 1), tok)


# -- gradients ------------------------------------------------------------------
def test_attention_block_gradients():
    rng = np.random.default_rng(9)
    attn = Attention(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
    w = rng.normal(size=(2, 4, 8))
    params = [x] + list(attn.parameters().values())
    assert check_gradients(lambda: sum_(attn(x, mask=causal_mask(4)) * w), params) < 1e-4


def test_encoder_block_gradients():
    rng = np.random.default_rng(10)
    blk = EncoderBlock(tiny(), rng, False)
    x = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    w = rng.normal(size=(1, 3, 8))
    params = [x] + list(blk.parameters().values())
    assert check_gradients(lambda: sum_(blk(x, None) * w), params) < 1e-4


def test_every_parameter_gets_a_finite_gradient():
    pipe = ConceptPipeline(tiny(seed=3))
    rng = np.random.default_rng(11)
    batch = [(rng.integers(4, 300, 6).tolist(), i % 2, rng.integers(4, 300, 5).tolist(), 1 - i % 2)
             for i in range(8)]
    seqs = [rng.integers(4, 300, 6).tolist() for _ in range(8)]
    (translation_loss(pipe, batch) + lm_loss(pipe.concept, seqs)).backward()
    for name, p in pipe.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
        assert np.any(p.grad != 0), name


def test_pipeline_path_never_touches_concept_embedding():
    pipe = ConceptPipeline(tiny())
    batch = [([5, 6, 7], "aa", [8, 9], "bb")]
    translation_loss(pipe, batch).backward()
    g = pipe.concept.embed.weight.grad
    assert g is None or np.all(g == 0)


# -- generation -------------------------------------------------------------------
def test_generate_requires_phase_two(tok):
    pipe = ConceptPipeline(tiny(vocab_size=tok.vocab_size), tok)
    with pytest.raises(StateError):
        pipe.generate("red cat", "aa", "bb", 5)
    pipe.trained_phases = [1, 2]
    assert pipe.generate("red cat", "aa", "bb", 0) == ""
    with pytest.raises(ContextError):
        pipe.generate("red cat", "aa", "bb", 17)
    assert pipe.generate("red cat", "aa", "bb", 6) == pipe.generate("red cat", "aa", "bb", 6)


# -- checkpoints ------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path, tok):
    pipe = ConceptPipeline(tiny(vocab_size=tok.vocab_size, seed=4), tok)
    pipe.trained_phases = [1, 2]
    path = tmp_path / "m.ckpt"
    save_checkpoint(pipe, path, extra={"note": "x"})
    again = load_checkpoint(path)
    assert again.trained_phases == [1, 2] and again.tokenizer == tok
    for (n1, p1), (n2, p2) in zip(pipe.named_parameters(), again.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert again.generate("red dog", "aa", "bb", 8) == pipe.generate("red dog", "aa", "bb", 8)
    header, _ = read_checkpoint_header(path)
    assert header["extra"] == {"note": "x"} and header["format_version"] == 1


def test_checkpoint_bytes_stable_across_saves(tmp_path):
    pipe = ConceptPipeline(tiny(seed=2))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert save_checkpoint(pipe, a) == save_checkpoint(pipe, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_config_mismatch_names_expected_and_found(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ConceptPipeline(tiny()), path)
    with pytest.raises(CheckpointError, match="d_model: expected 16, found 8"):
        load_checkpoint(path, expected=tiny(d_model=16))


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ConceptPipeline(tiny()), path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_save_refuses_non_finite(tmp_path):
    pipe = ConceptPipeline(tiny())
    pipe.decoder.norm.gain.data[0] = np.nan
    with pytest.raises(CheckpointError):
        save_checkpoint(pipe, tmp_path / "m.ckpt")


def test_meta_pipeline_has_no_real_storage():
    with no_grad():
        pipe = ConceptPipeline(paper_config(), meta=True)
    assert all(p.data.strides == (0,) * p.data.ndim for p in pipe.parameters().values())
