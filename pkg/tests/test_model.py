import numpy as np
import pytest

from openworld.losses import ocn_loss
from openworld.model import (
    EMBED_DIM,
    JointModel,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    nhwc_batch,
    save_checkpoint,
    train_joint,
)
from openworld.optim import Adam
from openworld.synth import make_synthetic_dataset
from openworld.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def glyphs():
    return make_synthetic_dataset(range(4), 24, seed=0)


@pytest.fixture(scope="module")
def model():
    return JointModel(m_seen=3, seed=1)


def training_arrays(ds, seen):
    sel = np.flatnonzero(np.isin(ds.labels, seen))
    cls = np.searchsorted(seen, ds.labels[sel])
    rng = np.random.default_rng(0)
    n = len(sel)
    left = rng.integers(0, n, size=60)
    right = (left + rng.integers(1, n - 1, size=60)) % n
    pl = (ds.labels[sel[left]] == ds.labels[sel[right]]).astype(int)
    return sel, cls, sel[left], sel[right], pl


# ------------------------------------------------------------- forward


def test_encode_zero_image_finite(model):
    emb = model.encode(np.zeros((2, 28, 28), dtype=np.float32))
    assert emb.shape == (2, EMBED_DIM)
    assert np.all(np.isfinite(emb))


def test_encode_deterministic(model, glyphs):
    a = model.encode(glyphs.images[:4])
    b = model.encode(glyphs.images[:4])
    assert np.array_equal(a, b)


def test_embedding_width_is_1568(model, glyphs):
    # 28 -> conv -> conv -> pool 14 -> conv -> pool 7, with 32 channels
    assert model.encode(glyphs.images[:1]).shape[1] == 32 * 7 * 7


def test_encode_rejects_wrong_shape(model):
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 14, 14)))


def test_ocn_output_width_and_range(model, glyphs):
    probs = model.ocn_probs(glyphs.images[:6])
    assert probs.shape == (6, 3)
    assert np.all((probs > 0) & (probs < 1))


def test_ocn_outputs_not_normalized(glyphs):
    # 1-vs-rest heads are independent; pushing the output bias high makes
    # every class probability exceed 0.9 at once, which must be legal
    m = JointModel(m_seen=3, seed=0)
    m.params["ocn.out.b"].data[...] = 6.0
    probs = m.ocn_probs(glyphs.images[:4])
    assert np.all(probs > 0.9)
    assert np.all(probs < 1.0)


def test_pcn_probability_range(model, glyphs):
    p = model.pcn_prob(glyphs.images[:5], glyphs.images[5:10])
    assert p.shape == (5,)
    assert np.all((p > 0) & (p < 1))


def test_reconstruction_shape_matches_input(model, glyphs):
    rec = model.reconstruct(glyphs.images[:3])
    assert rec.shape == (3, 1, 28, 28)
    assert np.all((rec > 0) & (rec < 1))


def test_encoder_is_shared_between_heads(glyphs):
    # one optimizer step driven only by the classifier loss must move the
    # shared encoder and therefore shift pair probabilities too
    m = JointModel(m_seen=3, seed=2)
    before = m.pcn_prob(glyphs.images[:3], glyphs.images[3:6]).copy()
    x = Tensor(nhwc_batch(glyphs.images[:8]))
    flat, _ = m.encoder_pass(x)
    loss = ocn_loss(m.ocn_pass(flat), np.zeros(8, dtype=int))
    adam = Adam(m.params, lr=0.05)
    loss.backward()
    adam.step()
    after = m.pcn_prob(glyphs.images[:3], glyphs.images[3:6])
    assert not np.allclose(before, after)


# ------------------------------------------------------------- training


def test_train_joint_loss_trends_down(glyphs):
    m = JointModel(m_seen=3, seed=3)
    sel, cls, pl, pr, plab = training_arrays(glyphs, [0, 1, 2])
    cfg = TrainConfig(epochs=5, batch_size=32, pcn_pairs_per_step=16,
                      ae_per_step=16, seed=0)
    hist = train_joint(m, cfg, glyphs.images, sel, cls, pl, pr, plab,
                       np.arange(len(glyphs)))
    assert len(hist) == 5
    assert hist[4].l_joint < hist[0].l_joint
    for h in hist:
        assert h.l_joint == h.l_ocn + h.l_pcn + h.l_ae


def test_train_joint_without_pairs_or_ae_is_pure_ocn(glyphs):
    m = JointModel(m_seen=3, seed=4)
    sel, cls, *_ = training_arrays(glyphs, [0, 1, 2])
    cfg = TrainConfig(epochs=1, batch_size=32, seed=0)
    empty = np.zeros(0, dtype=np.int64)
    hist = train_joint(m, cfg, glyphs.images, sel, cls, empty, empty, empty, empty)
    assert hist[0].l_pcn == 0.0
    assert hist[0].l_ae == 0.0
    assert hist[0].l_joint == hist[0].l_ocn


def test_train_joint_deterministic(glyphs):
    def run():
        m = JointModel(m_seen=3, seed=5)
        sel, cls, pl, pr, plab = training_arrays(glyphs, [0, 1, 2])
        cfg = TrainConfig(epochs=2, batch_size=32, pcn_pairs_per_step=8,
                          ae_per_step=8, seed=11)
        return train_joint(m, cfg, glyphs.images, sel, cls, pl, pr, plab,
                           np.arange(len(glyphs)))

    a, b = run(), run()
    assert [h.l_joint for h in a] == [h.l_joint for h in b]


def test_train_joint_divergence_aborts_with_step(glyphs):
    m = JointModel(m_seen=3, seed=6)
    m.params["ocn.out.w"].data[0, 0] = np.inf
    sel, cls, *_ = training_arrays(glyphs, [0, 1, 2])
    cfg = TrainConfig(epochs=1, batch_size=32, seed=0)
    empty = np.zeros(0, dtype=np.int64)
    with pytest.raises(TrainingDivergedError, match="step 1"), \
            np.errstate(invalid="ignore"):
        train_joint(m, cfg, glyphs.images, sel, cls, empty, empty, empty, empty)


# ----------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, glyphs):
    m = JointModel(m_seen=3, seed=7)
    cfg = TrainConfig(epochs=1, batch_size=64, seed=7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, cfg, path)
    back, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert back.m_seen == 3
    for name, p in m.params.items():
        np.testing.assert_array_equal(back.params[name].data, p.data)
    a = m.ocn_probs(glyphs.images[:3])
    b = back.ocn_probs(glyphs.images[:3])
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    m = JointModel(m_seen=3, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, TrainConfig(), path)
    blob = bytearray(path.read_bytes())
    # corrupt the recorded m_seen so ocn.out shapes disagree
    idx = blob.find(b'"m_seen": 3')
    blob[idx : idx + len(b'"m_seen": 3')] = b'"m_seen": 4'
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="ocn.out"):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
