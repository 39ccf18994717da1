import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import synthetic_task
from m3g.embeddings import EmbeddingMatrix
from m3g.joint import (
    INIT_LOG_SCALE,
    MAX_LOG_SCALE,
    AdamW,
    JointEmbeddingModel,
    ProjectionHead,
    TrainConfig,
    TrainingError,
    clip_loss,
    grad_check,
    load_model,
    loss_and_grad,
    model_objective,
    project,
    project_batch,
    save_model,
    train,
    write_loss_trace,
)
from m3g.retrieval import knn


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- project -----------------------------------------------------------------

def test_project_identity_rig():
    head = ProjectionHead(np.eye(5), np.zeros(5))
    np.testing.assert_allclose(project(head, [3, 4, 0, 0, 0]), [0.6, 0.8, 0, 0, 0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), st.integers(0, 2**32 - 1))
def test_project_unit_norm(v, seed):
    rng = np.random.default_rng(seed)
    head = ProjectionHead(rng.normal(size=(4, 6)), rng.normal(size=4))
    out = project(head, v)
    assert out.shape == (4,)
    assert abs(np.linalg.norm(out) - 1) < 1e-6


def test_project_matches_naive_oracle():
    rng = np.random.default_rng(3)
    w, b, v = rng.normal(size=(7, 11)), rng.normal(size=7), rng.normal(size=11)
    naive = []
    for i in range(7):
        acc = b[i]
        for j in range(11):
            acc += w[i][j] * v[j]
        naive.append(acc)
    norm = math.sqrt(sum(x * x for x in naive))
    expected = [x / norm for x in naive]
    np.testing.assert_allclose(project(ProjectionHead(w, b), v), expected, atol=1e-6)
    np.testing.assert_allclose(project_batch(ProjectionHead(w, b), v[None, :])[0], expected, atol=1e-12)


def test_project_errors():
    head = ProjectionHead(np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="length"):
        project(head, [1.0, 2.0])
    with pytest.raises(ValueError, match="zero"):
        project(head, [0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="non-finite"):
        project(head, [np.nan, 0.0, 1.0])


# -- clip_loss ---------------------------------------------------------------

def test_clip_loss_single_pair_is_zero():
    v = np.array([[0.6, 0.8]])
    assert clip_loss(v, v, 0.0).loss == pytest.approx(0.0, abs=1e-15)


def test_clip_loss_orthonormal_pairs():
    eye = np.eye(2)
    expected = -math.log(math.e / (math.e + 1))
    assert expected == pytest.approx(0.3133, abs=1e-4)
    assert clip_loss(eye, eye, 0.0).loss == pytest.approx(expected, abs=1e-12)


def test_clip_loss_identical_rows():
    v = np.full((2, 2), 1 / math.sqrt(2))
    assert clip_loss(v, v, 0.0).loss == pytest.approx(math.log(2), abs=1e-12)
    assert clip_loss(np.eye(2), np.eye(2), 0.0).loss < clip_loss(v, v, 0.0).loss


def test_clip_loss_rejects_non_finite():
    v = np.eye(2)
    with pytest.raises(ValueError):
        clip_loss(v, np.array([[np.nan, 0], [0, 1]]), 0.0)
    with pytest.raises(ValueError):
        clip_loss(v, np.eye(3), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(-2, 4.6), st.integers(0, 2**32 - 1))
def test_clip_loss_symmetric_nonnegative_permutation(n, d, log_s, seed):
    rng = np.random.default_rng(seed)
    img, txt = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
    loss = clip_loss(img, txt, log_s).loss
    assert loss >= 0
    assert clip_loss(txt, img, log_s).loss == pytest.approx(loss, rel=1e-12, abs=1e-12)
    perm = rng.permutation(n)
    assert clip_loss(img[perm], txt[perm], log_s).loss == pytest.approx(loss, rel=1e-12, abs=1e-12)


def test_clip_loss_gradients_against_finite_differences():
    rng = np.random.default_rng(11)
    img, txt, log_s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), 0.7
    res = clip_loss(img, txt, log_s)
    eps = 1e-6
    for arr, grad in ((img, res.d_image), (txt, res.d_text)):
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + eps
            up = clip_loss(img, txt, log_s).loss
            arr[idx] = saved - eps
            down = clip_loss(img, txt, log_s).loss
            arr[idx] = saved
            assert (up - down) / (2 * eps) == pytest.approx(grad[idx], rel=1e-6, abs=1e-9)
    fd = (clip_loss(img, txt, log_s + eps).loss - clip_loss(img, txt, log_s - eps).loss) / (2 * eps)
    assert fd == pytest.approx(res.d_log_scale, rel=1e-6, abs=1e-9)


# -- grad_check --------------------------------------------------------------

def test_grad_check_linear_rig():
    a = np.random.default_rng(0).normal(size=(5, 7))

    def fn(p):
        return float(np.sum(a @ p)), a.sum(axis=0)

    assert grad_check(fn, np.ones(7), 1e-5).max_error < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_small_model(seed):
    rng = np.random.default_rng(seed)
    model = JointEmbeddingModel.init(8, 8, 4, seed=seed)
    x_img, x_txt = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    assert grad_check(model_objective(model, x_img, x_txt), model.flatten(), 1e-5).max_error < 1e-4


def test_grad_check_detects_corruption():
    rng = np.random.default_rng(5)
    model = JointEmbeddingModel.init(8, 8, 4, seed=5)
    fn = model_objective(model, rng.normal(size=(4, 8)), rng.normal(size=(4, 8)))
    _, g = fn(model.flatten())
    target = int(np.argmax(np.abs(g)))

    def corrupted(p):
        loss, grad = fn(p)
        grad = grad.copy()
        grad[target] *= 2
        return loss, grad

    res = grad_check(corrupted, model.flatten(), 1e-5)
    assert res.errors[target] > 0.3
    assert res.worst_index == target


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        grad_check(lambda p: (0.0, p), np.zeros(2), 1e-2)


def test_grad_check_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        grad_check(lambda p: (0.0, np.full_like(p, np.nan)), np.zeros(2), 1e-5)


# -- optimizer ---------------------------------------------------------------

def test_adamw_matches_scalar_reference():
    p = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
    opt = AdamW(lr=0.1, weight_decay=0.01, decay=("w",))
    grads = [{"w": np.array([0.3, -0.1]), "b": np.array([0.2])}, {"w": np.array([-0.2, 0.4]), "b": np.array([0.1])}]
    ref = {"w": [1.0, -2.0], "b": [0.5]}
    m = {k: [0.0] * len(v) for k, v in ref.items()}
    v = {k: [0.0] * len(v) for k, v in ref.items()}
    for t, g in enumerate(grads, start=1):
        opt.step(p, g)
        for k in ref:
            for i in range(len(ref[k])):
                gi = float(g[k][i])
                m[k][i] = 0.9 * m[k][i] + 0.1 * gi
                v[k][i] = 0.999 * v[k][i] + 0.001 * gi * gi
                if k == "w":
                    ref[k][i] *= 1 - 0.1 * 0.01
                mhat = m[k][i] / (1 - 0.9**t)
                vhat = v[k][i] / (1 - 0.999**t)
                ref[k][i] -= 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
    for k in ref:
        np.testing.assert_allclose(p[k], ref[k], rtol=1e-12)


def test_adamw_decay_only_named_params():
    p = {"w": np.ones(3), "b": np.ones(3)}
    AdamW(lr=0.1, weight_decay=0.5, decay=("w",)).step(p, {"w": np.zeros(3), "b": np.zeros(3)})
    np.testing.assert_allclose(p["w"], 0.95)
    np.testing.assert_allclose(p["b"], 1.0)


def test_single_step_decreases_batch_loss():
    images, texts, pairs, _ = synthetic_task(0)
    batch = pairs[::9][:8]
    x_img = images.rows([i for i, _ in batch]).astype(np.float64)
    x_txt = texts.rows([t for _, t in batch]).astype(np.float64)
    model = JointEmbeddingModel.init(16, 12, 8, seed=1)
    before, grad = loss_and_grad(model, x_img, x_txt)
    params = {"w_i": model.image_head.weight, "b_i": model.image_head.bias,
              "w_t": model.text_head.weight, "b_t": model.text_head.bias}
    AdamW(lr=1e-4, weight_decay=0.0).step(
        params, {"w_i": grad.image.weight, "b_i": grad.image.bias, "w_t": grad.text.weight, "b_t": grad.text.bias}
    )
    after, _ = loss_and_grad(model, x_img, x_txt)
    assert after < before


# -- train -------------------------------------------------------------------

def _accuracy(model, images, texts, held):
    refs = EmbeddingMatrix(texts.ids, project_batch(model.text_head, texts.data))
    queries = project_batch(model.image_head, images.rows([i for i, _ in held]))
    return np.mean([knn(q, refs, 1)[0][0] == lab for q, (_, lab) in zip(queries, held)])


def test_train_separable_synthetic():
    images, texts, pairs, held = synthetic_task(7)
    result = train(TrainConfig(batch_size=16, epochs=50, seed=7), images, texts, pairs)
    assert len(result.loss_trace) == 50
    assert result.loss_trace[-1] < result.loss_trace[0]
    assert _accuracy(result.model, images, texts, held) == 1.0


def test_train_deterministic():
    images, texts, pairs, _ = synthetic_task(1)
    cfg = TrainConfig(batch_size=8, epochs=3, seed=7, out_dim=8)
    a = train(cfg, images, texts, pairs)
    b = train(cfg, images, texts, pairs)
    assert a.model.flatten().tobytes() == b.model.flatten().tobytes()
    assert a.loss_trace == b.loss_trace


def test_train_zero_epochs_is_init():
    images, texts, pairs, _ = synthetic_task(1)
    cfg = TrainConfig(batch_size=8, epochs=0, seed=3, out_dim=8)
    result = train(cfg, images, texts, pairs)
    init_ss = np.random.SeedSequence(3).spawn(3)[0]
    expected = JointEmbeddingModel.init(16, 12, 8, rng=np.random.default_rng(init_ss))
    assert result.model.flatten().tobytes() == expected.flatten().tobytes()
    assert result.model.log_logit_scale == INIT_LOG_SCALE
    assert not result.model.image_head.bias.any()
    assert result.loss_trace == []


def test_train_shuffle_independent_of_batch_size():
    images, texts, pairs, _ = synthetic_task(2)
    a = train(TrainConfig(batch_size=4, epochs=3, seed=9, out_dim=4), images, texts, pairs)
    b = train(TrainConfig(batch_size=32, epochs=3, seed=9, out_dim=4), images, texts, pairs)
    for x, y in zip(a.epoch_orders, b.epoch_orders):
        np.testing.assert_array_equal(x, y)
    assert a.model.flatten().tobytes() != b.model.flatten().tobytes()


def test_train_logit_scale_clamped():
    images, texts, pairs, _ = synthetic_task(4)
    result = train(TrainConfig(batch_size=16, epochs=40, seed=0, learning_rate=0.5, out_dim=8), images, texts, pairs)
    assert result.model.log_logit_scale <= MAX_LOG_SCALE
    assert np.isfinite(result.model.flatten()).all()


def test_train_variant_sampling_changes_result():
    from conftest import with_variants

    images, texts, pairs, _ = synthetic_task(5)
    aug = with_variants(images, 2, seed=1)
    base = train(TrainConfig(batch_size=8, epochs=2, seed=1, out_dim=4), aug, texts, pairs)
    sampled = train(TrainConfig(batch_size=8, epochs=2, seed=1, out_dim=4, variant_sampling=True), aug, texts, pairs)
    plain = train(TrainConfig(batch_size=8, epochs=2, seed=1, out_dim=4), images, texts, pairs)
    assert base.model.flatten().tobytes() == plain.model.flatten().tobytes()
    assert sampled.model.flatten().tobytes() != base.model.flatten().tobytes()


def test_train_dedup_skips_batches_with_repeated_labels():
    images, texts, pairs, _ = synthetic_task(0)
    result = train(TrainConfig(batch_size=8, epochs=2, seed=0, out_dim=4, dedup_labels_in_batch=True), images, texts, pairs)
    # eight pairs over three labels always repeat one
    assert result.skipped_batches == 2 * (len(pairs) // 8)
    assert all(math.isnan(x) for x in result.loss_trace)


def test_train_errors():
    images, texts, pairs, _ = synthetic_task(0)
    with pytest.raises(TrainingError, match="exceeds"):
        train(TrainConfig(batch_size=len(pairs) + 1, epochs=1), images, texts, pairs)
    with pytest.raises(TrainingError, match="unresolvable"):
        train(TrainConfig(batch_size=2, epochs=1), images, texts, [*pairs, ("ghost", "label0")])
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=1)
    with pytest.raises(TrainingError):
        TrainConfig(learning_rate=0)


def test_model_file_round_trip(tmp_path):
    images, texts, pairs, _ = synthetic_task(0)
    cfg = TrainConfig(batch_size=8, epochs=1, seed=4, out_dim=8)
    model = train(cfg, images, texts, pairs).model
    save_model(model, tmp_path / "m.bin", cfg)
    back, header = load_model(tmp_path / "m.bin")
    assert back.flatten().tobytes() == model.flatten().tobytes()
    assert header["seed"] == 4 and header["config"]["batch_size"] == 8
    assert (header["image_in_dim"], header["text_in_dim"], header["out_dim"]) == (16, 12, 8)


def test_loss_trace_csv(tmp_path):
    write_loss_trace([1.5, 0.25], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "epoch,mean_loss\n1,1.5\n2,0.25\n"
