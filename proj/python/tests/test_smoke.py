import numpy as np
import pytest

import ehrgan

TINY = """
seed = 5
cohort.case_count = 40
cohort.control_count = 80
cohort.vocab_size = 120
cohort.cluster_count = 6
cohort.cluster_size = 8
embedding.dim = 8
embedding.epochs = 2
gan.z_dim = 6
gan.seq_len = 12
gan.trunk.widths = 2, 3
gan.trunk.maps = 4
gan.decoder_hidden = 8
gan.decoder_maps = 4
gan.batch_size = 4
gan.k = 2
gan.max_iterations = 3
gan.convergence_window = 0
predictor.trunk.widths = 2, 3
predictor.trunk.maps = 4
predictor.batch_size = 8
predictor.max_epochs = 2
"""


@pytest.fixture(scope="module")
def pipeline():
    cfg = ehrgan.Config(TINY)
    cohort = ehrgan.build_cohort(cfg)
    emb = ehrgan.train_embedding(cohort, cfg)
    return cfg, cohort, emb


def test_config_round_trip():
    cfg = ehrgan.Config(TINY)
    again = ehrgan.Config(str(cfg))
    assert again.hash() == cfg.hash()
    with pytest.raises(ehrgan.ParseError):
        ehrgan.Config("gan.rhoo = 1\n")
    with pytest.raises(ehrgan.ParseError):
        ehrgan.Config("gan.rho 1\n")
    assert issubclass(ehrgan.ParseError, ehrgan.Error) and issubclass(ehrgan.Error, ValueError)


def test_cohort_is_deterministic(pipeline):
    cfg, cohort, _ = pipeline
    again = ehrgan.build_cohort(cfg)
    assert again.to_text() == cohort.to_text()
    assert cohort.count("case") + cohort.count("control") == len(cohort)
    rec = cohort.record(0)
    assert rec["label"] in ("case", "control")
    assert len(rec["codes"]) == len(rec["windows"])
    assert ehrgan.Cohort.parse(cohort.to_text()).to_text() == cohort.to_text()


def test_auroc_matches_pair_count():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 40).astype(float)
    y = rng.integers(0, 2, 40)
    y[0], y[1] = 0, 1
    pos, neg = s[y == 1], s[y == 0]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert ehrgan.auroc(s.tolist(), y.tolist()) == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)


def test_conv_adjoint():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 9, 3))
    k = rng.normal(size=(3, 3, 4))
    y = rng.normal(size=(2, 4, 4))
    ax = ehrgan.conv1d(x, k, np.zeros(4), stride=2)
    aty = ehrgan.deconv1d(y, k, np.zeros(3), stride=2)
    assert ax.shape == y.shape and aty.shape == x.shape
    assert np.sum(ax * y) == pytest.approx(np.sum(x * aty), rel=1e-12)


def test_embedding_nearest_code(pipeline):
    _, cohort, emb = pipeline
    assert emb.vocab_size == cohort.vocab_size
    assert emb.matrix.shape == (emb.vocab_size + 1, emb.dim)
    code, score = emb.nearest_code(emb.matrix[7])
    assert code == 7 and score == pytest.approx(1.0)
    x = emb.embed([3, 4], 5)
    assert x.shape == (5, emb.dim)
    assert np.all(x[3:] == 0)


def test_gan_zero_mask_equals_reconstruction(pipeline, tmp_path):
    cfg, cohort, emb = pipeline
    gan, history, reasons = ehrgan.train_gan(cohort, emb, cfg)
    assert gan.net_count == 2 and len(reasons) == 2
    assert all(0 < h["mean_d_real"] < 1 for h in history)
    x = emb.embed(cohort.record(0)["codes"], gan.seq_len)
    out = gan.sample_transition(x, seed=3, mask=np.zeros(gan.z_dim))
    assert np.array_equal(out["x_tilde"], out["x_bar"])
    out = gan.sample_transition(x, seed=3)
    assert out["x_tilde"].shape == x.shape

    path = str(tmp_path / "gan.ckpt")
    gan.save(path)
    again = ehrgan.Gan.load(path)
    assert np.array_equal(again.sample_transition(x, seed=3)["x_tilde"], out["x_tilde"])

    generated = gan.generate(emb, cohort, seed=2)
    assert len(generated) > 0
    report = ehrgan.fidelity(cohort, generated, split="train")
    assert 0 <= report["length_tv"] <= 1


def test_predictor_scores(pipeline):
    cfg, cohort, emb = pipeline
    model, best_epoch, val_auroc = ehrgan.train_predictor(cohort, emb, cfg)
    p = model.predict(emb, cohort, "test")
    assert all(0 <= v <= 1 for v in p)
    auc, acc = model.score(emb, cohort, "test")
    assert 0 <= auc <= 1 and 0 <= acc <= 1
