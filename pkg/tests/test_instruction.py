import numpy as np
import pytest

from refedit.forge.describe import build_instruction, describe_object
from refedit.forge.scene import gen_scene, random_identity
from refedit.instruction import (
    PLACEHOLDER_ID,
    UNK_ID,
    InstructionConfig,
    InstructionEncoder,
    QFormerBlock,
    TokenSequence,
    Vocabulary,
    detokenize,
    embedding_length,
    tokenize,
)
from refedit.nk import Rng, Tensor, gradcheck, ops, precision

SMALL = InstructionConfig(dim=16, heads=2, text_layers=1, tower_layers=1, qformer_layers=1, num_queries=4)


@pytest.fixture(scope="module")
def enc():
    return InstructionEncoder(Rng(0), InstructionConfig())


def _image(seed):
    return gen_scene(seed)[1]


def test_tokenize_pure_text():
    seq = tokenize("remove the red square")
    assert len(seq) == 4
    assert UNK_ID not in seq.ids
    assert seq.placeholder_positions == []


def test_tokenize_placeholder_position():
    seq = tokenize("replace the red square with S*")
    assert seq.placeholder_positions == [5]
    assert seq.ids[5] == PLACEHOLDER_ID


def test_unknown_word_maps_to_unk():
    assert tokenize("remove the zebra").ids[2] == UNK_ID


def test_round_trip_templates():
    rng = Rng(3)
    for _ in range(200):
        ident = random_identity(rng)
        d = describe_object(ident, "detailed", rng, 0.0)
        for task in ("replace", "add", "remove"):
            for region in ("left", "right", "top", "bottom", "center"):
                s = build_instruction(task, d, region)
                assert detokenize(tokenize(s)) == s


def test_vocabulary_file_round_trip(tmp_path):
    v = Vocabulary.default()
    v.save(tmp_path / "vocab.txt")
    w = Vocabulary.load(tmp_path / "vocab.txt")
    assert w.tokens == v.tokens
    assert w.tokens[:3] == ["<pad>", "<unk>", "S*"]


def test_reference_shape_and_image_dependence(enc):
    o1 = enc.encode_reference(_image(1), "square")
    o2 = enc.encode_reference(_image(2), "square")
    assert o1.shape == (16, 128)
    assert np.max(np.abs(o1.data - o2.data)) > 0


def test_zero_layer_qformer_is_projected_queries():
    cfg = InstructionConfig(dim=16, heads=2, text_layers=1, tower_layers=1, qformer_layers=0, num_queries=4)
    e = InstructionEncoder(Rng(1), cfg)
    o1 = e.encode_reference(_image(1), "circle")
    o2 = e.encode_reference(_image(5), "ring")
    expect = e.qformer.proj(e.qformer.queries).data
    np.testing.assert_array_equal(o1.data, expect)
    np.testing.assert_array_equal(o2.data, expect)


def test_resolution_mismatch(enc):
    with pytest.raises(ValueError):
        enc.encode_reference(np.zeros((16, 16, 3), np.uint8), "circle")


def test_length_law(enc):
    O = enc.encode_reference(_image(1), "star")
    c = enc.encode_instruction(tokenize("replace the red striped square with S*"), O)
    assert c.shape == (embedding_length(7, 1), 128) == (22, 128)
    c = enc.encode_instruction(tokenize("remove the red square"))
    assert c.shape == (4, 128)


def test_placeholder_contract(enc):
    O = enc.encode_reference(_image(1), "star")
    with pytest.raises(ValueError):
        enc.encode_instruction(tokenize("add S* to the left"))
    with pytest.raises(ValueError):
        enc.encode_instruction(tokenize("remove the red square"), O)
    with pytest.raises(ValueError):
        enc.encode_instruction(tokenize("add S* to S*"), O)


def test_position_awareness(enc):
    a = enc.encode_instruction(tokenize("remove the red square")).data
    b = enc.encode_instruction(tokenize("remove the square red")).data
    assert np.max(np.abs(a - b)) > 0


def test_pure_text_invariant_to_reference_bytes(enc):
    # The pure-text path never reads an image; changing the reference used
    # elsewhere in the batch must not leak.
    seqs = [tokenize("remove the red square"), tokenize("add S* to the left")]
    a, _ = enc.encode_batch(seqs, [None, enc.encode_reference(_image(1), "circle")])
    b, _ = enc.encode_batch(seqs, [None, enc.encode_reference(_image(9), "circle")])
    np.testing.assert_array_equal(a.data[0, :4], b.data[0, :4])


def test_batch_matches_single(enc):
    O = enc.encode_reference(_image(1), "circle")
    seqs = [tokenize("remove the red square"), tokenize("add S* to the left")]
    c, bias = enc.encode_batch(seqs, [None, O])
    assert bias is not None
    single = enc.encode_instruction(seqs[1], O).data
    np.testing.assert_allclose(c.data[1], single, atol=1e-5)
    np.testing.assert_allclose(c.data[0, :4], enc.encode_instruction(seqs[0]).data, atol=1e-5)


def test_batched_reference_matches_single(enc):
    imgs = np.stack([_image(1), _image(2)])
    texts = [tokenize("circle"), tokenize("red striped square")]
    O = enc.encode_reference(imgs, texts).data
    for i in range(2):
        np.testing.assert_allclose(O[i], enc.encode_reference(imgs[i], texts[i]).data, atol=1e-5)


def test_null_embedding_is_single_token(enc):
    assert enc.null_embedding().shape == (1, 128)


def test_gradients_reach_queries_and_tower():
    e = InstructionEncoder(Rng(2), SMALL)
    O = e.encode_reference(_image(1), "circle")
    c = e.encode_instruction(tokenize("add S* to the left"), O)
    (c * c).sum().backward()
    assert np.abs(e.qformer.queries.grad.data).sum() > 0
    assert np.abs(e.tower.patch_proj.weight.grad.data).sum() > 0


def test_determinism():
    a = InstructionEncoder(Rng(4), SMALL).encode_reference(_image(1), "circle").data
    b = InstructionEncoder(Rng(4), SMALL).encode_reference(_image(1), "circle").data
    np.testing.assert_array_equal(a, b)


def test_qformer_block_gradcheck():
    with precision(np.float64):
        rng = Rng(7)
        blk = QFormerBlock(rng, 8, 2, 16)
        w0 = rng.normal((5, 8), dtype=np.float64)
        feats = Tensor(rng.normal((6, 8), dtype=np.float64))
        weights = rng.normal((5, 8), dtype=np.float64)
        for name, p in blk.named_parameters().items():
            def f(p=p):
                return (blk(Tensor(w0), feats) * weights).sum()
            err = gradcheck.finite_diff_check(f, p)
            assert err < 1e-4, name
