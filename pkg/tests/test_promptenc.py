import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtsd.errors import ConfigurationError, CorpusError, FormatError, InputError
from mmtsd.promptenc import PromptEmbedding
from mmtsd.promptenc.corpus import (EVENT_KEYS, SPLITS, Vocabulary, build_text_corpus, load_templates,
                                    save_templates, split_sizes, tokenize)
from mmtsd.promptenc.face import (VoiceFaceAligner, AlignerHyper, FaceEncoder, align_face,
                                  cross_modal_score, encode_face, train_aligner)
from mmtsd.promptenc.lora import LoraAdapter, LoRALinear, lora_forward, lora_merge
from mmtsd.promptenc.speaker import SpeakerEmbedder, encode_audio_prompt, stats_pool
from mmtsd.promptenc.text import TextConfig, TextPromptEncoder, encode_text
from mmtsd.system import module_checksum
from mmtsd.worldsim import WorldConfig, make_world, render_face_observation


def _adapter(d_in=6, d_out=5, rank=2, alpha=3.0, seed=0, zero_b=False):
    torch.manual_seed(seed)
    a = LoraAdapter(d_in, d_out, rank, alpha).double()
    if not zero_b:
        with torch.no_grad():
            a.B.normal_()
    return a


# --------------------------------------------------------------------------- LoRA

def test_zero_b_is_identity():
    a = _adapter(zero_b=True)
    W = torch.randn(5, 6, dtype=torch.float64)
    x = torch.randn(4, 6, dtype=torch.float64)
    assert torch.equal(lora_forward(x, W, a), x @ W.T)
    assert torch.equal(lora_merge(W, a), W)


def test_zero_alpha_is_identity():
    a = _adapter(alpha=0.0)
    W = torch.randn(5, 6, dtype=torch.float64)
    x = torch.randn(3, 6, dtype=torch.float64)
    assert torch.equal(lora_forward(x, W, a), x @ W.T)


def test_forward_matches_dense_merge():
    a = _adapter(rank=2)
    W = torch.randn(5, 6, dtype=torch.float64)
    x = torch.randn(100, 6, dtype=torch.float64)
    dense = x @ (W + (a.alpha / a.rank) * a.B @ a.A).T
    torch.testing.assert_close(lora_forward(x, W, a), dense, rtol=1e-6, atol=0)
    merged = lora_merge(W, a)
    assert (x @ merged.T - lora_forward(x, W, a)).abs().max() < 1e-6


def test_merge_twice_adds_update_twice():
    a = _adapter()
    W = torch.randn(5, 6, dtype=torch.float64)
    twice = lora_merge(lora_merge(W, a), a)
    torch.testing.assert_close(twice - lora_merge(W, a), a.delta_weight())


def test_rank_and_shape_errors():
    with pytest.raises(ConfigurationError):
        LoraAdapter(4, 4, rank=0)
    with pytest.raises(ConfigurationError):
        lora_forward(torch.zeros(1, 6), torch.zeros(5, 7), LoraAdapter(6, 5))


def test_lora_linear_starts_equal_to_base():
    layer = LoRALinear(8, 8)
    x = torch.randn(3, 8)
    before = layer(x)
    layer.attach(4, 8.0)
    assert torch.equal(layer(x), before)


# --------------------------------------------------------------------------- corpus

def test_packaged_corpus_splits():
    templates = load_templates()
    assert set(templates) == set(EVENT_KEYS)
    corpus = build_text_corpus(templates, seed=0)
    for event in EVENT_KEYS:
        parts = [set(corpus.texts(event, s)) for s in SPLITS]
        assert len(templates[event]) >= 20
        assert [len(p) for p in parts] == list(split_sizes(len(templates[event])))
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])


def test_twenty_paraphrases_split_16_2_2():
    templates = {"female": [f"phrase number {i}" for i in range(20)]}
    corpus = build_text_corpus(templates, seed=3)
    assert [len(corpus.texts("female", s)) for s in SPLITS] == [16, 2, 2]
    again = build_text_corpus(templates, seed=3)
    assert corpus.entries == again.entries


def test_too_few_paraphrases():
    with pytest.raises(CorpusError):
        build_text_corpus({"male": ["a"] * 19 + ["b"]})


def test_vocabulary_from_train_split_only():
    corpus = build_text_corpus(load_templates(), seed=0)
    train_words = {w for e in corpus.events for t in corpus.texts(e, "train") for w in tokenize(t)}
    assert set(corpus.vocabulary.tokens[3:]) == train_words
    assert corpus.vocabulary.encode("zzzunseen word")[0] == 1  # CLS first
    assert corpus.vocabulary.encode("zzzunseen")[1] == 2


def test_tokenize_rules():
    assert tokenize("Find the FEMALE, speaker!") == ["find", "the", "female", "speaker"]


def test_template_and_vocabulary_files(tmp_path):
    templates = {"female": ["a b", "c d"]}
    save_templates(templates, tmp_path / "t.tsv")
    assert load_templates(tmp_path / "t.tsv") == templates
    (tmp_path / "bad.tsv").write_text("female only-one-field-no-tab\n")
    with pytest.raises(FormatError):
        load_templates(tmp_path / "bad.tsv")
    vocab = Vocabulary.from_texts(["hello world"])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab


# --------------------------------------------------------------------------- text encoder

@pytest.fixture(scope="module")
def text_encoder():
    torch.manual_seed(0)
    corpus = build_text_corpus(load_templates(), seed=0)
    return TextPromptEncoder(corpus.vocabulary, TextConfig()).freeze_base()


def test_token_noise_only_in_training_mode(text_encoder):
    text = "please detect the regions where female speech occurs in the audio"
    clean, pad = text_encoder.tokenize_batch([text])
    g = torch.Generator().manual_seed(0)
    noisy = [text_encoder.noised_ids([text], g)[0] for _ in range(20)]
    oov = text_encoder.vocab.index["[OOV]"]
    assert any((n == oov).any() for n in noisy)
    assert all(n[0, 0] == clean[0, 0] for n in noisy)  # CLS stays in front
    # shuffling permutes words; it never adds or loses any besides dropped ones
    kept = [sorted(n[0][n[0] != oov].tolist()) for n in noisy]
    assert all(set(k) <= set(clean[0].tolist()) for k in kept)
    assert torch.equal(encode_text(text, text_encoder).vector, encode_text(text, text_encoder).vector)


def test_token_noise_rates_validated():
    corpus = build_text_corpus(load_templates(), seed=0)
    with pytest.raises(ConfigurationError):
        TextPromptEncoder(corpus.vocabulary, TextConfig(token_dropout=1.0))
    with pytest.raises(ConfigurationError):
        TextPromptEncoder(corpus.vocabulary, TextConfig(shuffle_prob=-0.1))


def test_text_embedding_deterministic_and_sized(text_encoder):
    a = encode_text("detect the female speaker", text_encoder)
    b = encode_text("detect the female speaker", text_encoder)
    assert a.dim == 192 and torch.equal(a.vector, b.vector)


def test_empty_text_rejected(text_encoder):
    with pytest.raises(InputError):
        encode_text("   ", text_encoder)


def test_lora_attach_keeps_output_and_base(text_encoder):
    enc = copy.deepcopy(text_encoder)
    before = encode_text("who talks the most", enc).vector
    base_sum = module_checksum(enc.base)
    enc.attach_lora()
    assert len(enc.adapters()) == 2 * enc.cfg.n_layers
    assert torch.equal(encode_text("who talks the most", enc).vector, before)
    # a training step on adapters + head leaves the frozen base untouched
    params = [p for p in enc.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=0.1)
    enc.train()
    loss = enc(["who talks the most", "female voice"]).pow(2).mean()
    loss.backward()
    opt.step()
    assert module_checksum(enc.base) == base_sum
    assert not torch.equal(encode_text("who talks the most", enc).vector, before)


# --------------------------------------------------------------------------- speaker embedder

def test_stats_pool_constant_frames():
    x = torch.ones(20, 4) * torch.tensor([1.0, 2.0, 3.0, 4.0])
    pooled = stats_pool(x)
    assert torch.equal(pooled[4:], torch.zeros(4))
    assert torch.equal(pooled[:4], torch.tensor([1.0, 2.0, 3.0, 4.0]))


def test_audio_prompt_dimension_and_short_input():
    emb = SpeakerEmbedder(32, out_dim=192)
    e = encode_audio_prompt(np.random.default_rng(0).standard_normal((40, 32)), emb)
    assert e.dim == 192 and e.modality == "audio"
    with pytest.raises(InputError):
        encode_audio_prompt(np.zeros((5, 32)), emb)


# --------------------------------------------------------------------------- face

def test_face_encoder_laws():
    enc = FaceEncoder(64, 128, seed=0)
    profiles = make_world(WorldConfig(), 1000)
    obs = np.stack([p.face_params for p in profiles])
    out = encode_face(obs, enc)
    assert out.shape == (1000, 128)
    assert torch.equal(out, encode_face(obs, enc))
    assert torch.cdist(out.double(), out.double()).add(torch.eye(1000, dtype=torch.float64)).min() > 0


def test_aligner_dimension_chain():
    al = VoiceFaceAligner(128, 192)
    linears = [m for m in al.modules() if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linears] == [
        (128, 1024), (1024, 1024), (1024, 256), (256, 512), (512, 192)]
    assert sum(isinstance(m, torch.nn.GELU) for m in al.modules()) == 4
    x = torch.randn(3, 128)
    e1, e2 = align_face(x[0], al), align_face(x[0], al)
    assert e1.dim == 192 and torch.equal(e1.vector, e2.vector)


def _toy_pairs(n=400, noise_faces=False, seed=0):
    # voice and face are both linear images of a shared latent
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, 8, generator=g)
    voice = z @ torch.randn(8, 16, generator=g)
    face = z @ torch.randn(8, 32, generator=g)
    if noise_faces:
        face = torch.randn(n, 32, generator=g)
    return voice, face


def test_train_aligner_beats_random_init():
    voice, face = _toy_pairs()
    hyper = AlignerHyper(epochs=30, lr=1e-3, batch_size=64, seed=0)
    torch.manual_seed(hyper.seed)
    init = VoiceFaceAligner(32, 16)
    test_v, test_f = voice[-80:], face[-80:]
    before = F.mse_loss(init(test_f), test_v).item()
    trained, hist = train_aligner((voice[:-80], face[:-80]), hyper, copy.deepcopy(init))
    after = F.mse_loss(trained(test_f), test_v).item()
    assert after < before
    assert len(hist.train_loss) == 30


def test_train_aligner_cannot_learn_from_noise():
    voice, face = _toy_pairs(noise_faces=True)
    hyper = AlignerHyper(epochs=30, lr=1e-3, batch_size=64, seed=0)
    trained, _ = train_aligner((voice[:-100], face[:-100]), hyper)
    test_v, test_f = voice[-100:], face[-100:]
    with torch.no_grad():
        mse = F.mse_loss(trained(test_f), test_v).item()
    baseline = F.mse_loss(voice[:-100].mean(0).expand_as(test_v), test_v).item()
    assert mse > 0.95 * baseline


def test_zero_epochs_returns_initialization():
    voice, face = _toy_pairs(20)
    torch.manual_seed(0)
    init = VoiceFaceAligner(32, 16)
    trained, hist = train_aligner((voice, face), AlignerHyper(epochs=0), copy.deepcopy(init))
    assert module_checksum(trained) == module_checksum(init)
    assert hist.train_loss == []


def test_train_aligner_rejects_empty():
    with pytest.raises(InputError):
        train_aligner([])


def test_cross_modal_score():
    v = torch.tensor([1.0, 2.0, 3.0])
    assert cross_modal_score(v, v) == pytest.approx(1.0)
    assert cross_modal_score([1.0, 0.0], [0.0, 2.0]) == 0.0
    with pytest.raises(InputError):
        cross_modal_score([0.0, 0.0], [1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["text", "audio", "face", "audio_text"]), st.integers(1, 300))
def test_prompt_embedding_validation(modality, dim):
    e = PromptEmbedding(torch.zeros(dim), modality)
    assert e.dim == dim
    with pytest.raises(InputError):
        PromptEmbedding(torch.full((dim,), float("nan")), modality)
