import numpy as np
import pytest

from targetforge.attacks import (
    BIM,
    CW,
    UAP,
    ZOO,
    DeepFool,
    FGSM,
    PGD,
    bim,
    config_digest,
    config_from_dict,
    config_to_dict,
    cw,
    deepfool,
    fgsm,
    load_adv_batch,
    pgd,
    run_attack,
    save_adv_batch,
    uap,
    zoo,
    zoo_estimate_gradient,
)
from targetforge.engine import per_sample_cross_entropy

from conftest import linear_model


def rng(seed=0):
    return np.random.default_rng(seed)


def random_batch(n=8, d=6, seed=1):
    x = rng(seed).random((n, 1, 1, d)).astype(np.float32)
    return x


@pytest.fixture
def binary_linear():
    # logits: [x.w1, x.w2]; boundary where (w1-w2).x + (b1-b2) = 0
    w = np.array([[1.0, -1.0], [0.5, 0.2], [-0.3, 0.8]], dtype=np.float32)
    b = np.array([0.1, -0.1], dtype=np.float32)
    return linear_model(w, b)


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------


def test_fgsm_zero_epsilon_is_identity(binary_linear):
    x = random_batch(d=3)
    labels = np.zeros(len(x), dtype=np.int64)
    adv = fgsm(binary_linear, x, labels, FGSM(epsilon=0.0))
    assert np.array_equal(adv.adversarial, x)
    assert np.all(adv.l2 == 0) and np.all(adv.linf == 0)


def test_fgsm_matches_hand_computed_sign_step():
    # one pixel, two logits: z = [w0*x, w1*x]; dloss/dx = (p - onehot) . w
    w = np.array([[2.0, -1.0]], dtype=np.float32)
    model = linear_model(w, [0.0, 0.0])
    x = np.full((1, 1, 1, 1), 0.5, dtype=np.float32)
    z = np.array([1.0, -0.5])
    p = np.exp(z) / np.exp(z).sum()
    dx = (p[0] - 1) * 2.0 + p[1] * (-1.0)  # label 0
    expected = np.clip(0.5 + 0.2 * np.sign(dx), 0, 1)
    adv = fgsm(model, x, np.array([0]), FGSM(epsilon=0.2))
    assert adv.adversarial[0, 0, 0, 0] == pytest.approx(expected, abs=1e-6)


def test_fgsm_budget_with_equality_off_clip(binary_linear):
    x = (rng(3).random((50, 1, 1, 3)) * 0.5 + 0.25).astype(np.float32)  # interior
    labels = rng(4).integers(0, 2, size=50)
    eps = 0.1
    adv = fgsm(binary_linear, x, labels, FGSM(epsilon=eps))
    delta = np.abs(adv.adversarial - x)
    assert delta.max() <= eps + 1e-6
    grads_nonzero = delta > 0  # interior points, nonzero grad -> exact step
    assert np.allclose(delta[grads_nonzero], eps, atol=1e-6)


def test_attacks_do_not_mutate_inputs_or_model(binary_linear):
    x = random_batch(d=3, seed=9)
    x_copy = x.copy()
    w_copy = binary_linear.network.layers[0].weight.copy()
    labels = np.zeros(len(x), dtype=np.int64)
    fgsm(binary_linear, x, labels, FGSM(epsilon=0.2))
    pgd(binary_linear, x, labels, PGD(epsilon=0.1, alpha=0.02, steps=5), seed=3)
    assert np.array_equal(x, x_copy)
    assert np.array_equal(binary_linear.network.layers[0].weight, w_copy)


# ---------------------------------------------------------------------------
# BIM
# ---------------------------------------------------------------------------


def test_bim_single_step_equals_fgsm(binary_linear):
    x = random_batch(d=3, seed=5)
    labels = rng(6).integers(0, 2, size=len(x))
    a = bim(binary_linear, x, labels, BIM(epsilon=0.15, alpha=0.15, steps=1))
    b = fgsm(binary_linear, x, labels, FGSM(epsilon=0.15))
    assert np.array_equal(a.adversarial, b.adversarial)


def test_bim_respects_budget_after_many_steps(binary_linear):
    x = random_batch(n=30, d=3, seed=7)
    labels = rng(8).integers(0, 2, size=30)
    adv = bim(binary_linear, x, labels, BIM(epsilon=0.2, alpha=0.07, steps=20))
    assert np.abs(adv.adversarial - x).max() <= 0.2 + 1e-6
    assert adv.adversarial.min() >= 0 and adv.adversarial.max() <= 1


def test_bim_loss_monotone_on_linear_model(binary_linear):
    x = (rng(9).random((10, 1, 1, 3)) * 0.4 + 0.3).astype(np.float32)
    labels = rng(10).integers(0, 2, size=10)
    losses = []
    for steps in range(1, 6):
        adv = bim(binary_linear, x, labels, BIM(epsilon=0.3, alpha=0.03, steps=steps))
        logits = binary_linear.predict_logits(adv.adversarial)
        losses.append(per_sample_cross_entropy(logits, labels).mean())
    assert all(b >= a - 1e-7 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------


def test_pgd_zero_epsilon_collapses_to_input(binary_linear):
    x = random_batch(d=3, seed=11)
    labels = np.zeros(len(x), dtype=np.int64)
    adv = pgd(binary_linear, x, labels, PGD(epsilon=0.0, alpha=0.01, steps=5), seed=1)
    assert np.array_equal(adv.adversarial, x)


def test_pgd_every_iterate_inside_ball(binary_linear):
    x = random_batch(n=20, d=3, seed=12)
    labels = rng(13).integers(0, 2, size=20)
    eps = 0.3
    iterates = []
    pgd(binary_linear, x, labels, PGD(epsilon=eps, alpha=0.05, steps=12), seed=2,
        on_iterate=iterates.append)
    assert len(iterates) == 12
    for it in iterates:
        assert np.abs(it - x).max() <= eps + 1e-6
        assert it.min() >= 0 and it.max() <= 1


def test_pgd_random_start_seeded_and_per_sample(binary_linear):
    x = random_batch(n=6, d=3, seed=14)
    labels = np.zeros(6, dtype=np.int64)
    cfg = PGD(epsilon=0.2, alpha=0.02, steps=3)
    a = pgd(binary_linear, x, labels, cfg, seed=5)
    b = pgd(binary_linear, x, labels, cfg, seed=5)
    c = pgd(binary_linear, x, labels, cfg, seed=6)
    assert np.array_equal(a.adversarial, b.adversarial)
    assert not np.array_equal(a.adversarial, c.adversarial)
    # chunked == serial thanks to per-sample streams keyed on source index
    first = pgd(binary_linear, x[:3], labels[:3], cfg, seed=5,
                source_indices=np.arange(3))
    assert np.array_equal(first.adversarial, a.adversarial[:3])


# ---------------------------------------------------------------------------
# CW
# ---------------------------------------------------------------------------


def test_cw_l2_reaches_hyperplane_distance(binary_linear):
    # closed form: distance to boundary = |(w0-w1).x + (b0-b1)| / ||w0-w1||
    w = binary_linear.network.layers[0].weight.astype(np.float64)
    b = binary_linear.network.layers[0].bias.astype(np.float64)
    x = np.array(
        [[[[0.55, 0.52, 0.48]]], [[[0.62, 0.40, 0.55]]], [[[0.45, 0.61, 0.50]]]],
        dtype=np.float32,
    )
    logits = binary_linear.predict_logits(x)
    labels = logits.argmax(axis=1)  # attack from the currently-predicted side
    diff_w = w[:, 0] - w[:, 1]
    signed = x.reshape(3, 3) @ diff_w + (b[0] - b[1])
    exact = np.abs(signed) / np.linalg.norm(diff_w)
    adv = cw(binary_linear, x, labels,
             CW(norm="l2", kappa=0.0, max_iterations=400, binary_search_steps=9))
    assert adv.success.all()
    assert np.all(adv.l2 <= exact * 1.05 + 1e-4)


def test_cw_l2_margin_satisfied_on_moved_samples(toy_target_clean, toy_data):
    _, test = toy_data
    x, y = test.images[:40], test.labels[:40]
    kappa = 1.5
    adv = cw(toy_target_clean, x, y,
             CW(norm="l2", kappa=kappa, max_iterations=150, binary_search_steps=5))
    logits = toy_target_clean.predict_logits(adv.adversarial)
    moved = adv.linf > 0
    checked = 0
    for i in np.where(adv.success & moved)[0]:
        z = logits[i]
        margin = np.delete(z, y[i]).max() - z[y[i]]
        assert margin >= kappa - 1e-4
        checked += 1
    assert checked > 0


def test_cw_l2_already_misclassified_zero_norm(binary_linear):
    x = random_batch(n=12, d=3, seed=15)
    logits = binary_linear.predict_logits(x)
    wrong = 1 - logits.argmax(axis=1)  # claim the other class as ground truth
    adv = cw(binary_linear, x, wrong,
             CW(norm="l2", kappa=0.0, max_iterations=50, binary_search_steps=3))
    assert adv.success.all()
    assert np.all(adv.l2 < 1e-2)


def test_cw_linf_finds_small_linf_perturbations(binary_linear):
    x = (rng(16).random((8, 1, 1, 3)) * 0.4 + 0.3).astype(np.float32)
    logits = binary_linear.predict_logits(x)
    labels = logits.argmax(axis=1)
    adv = cw(binary_linear, x, labels, CW(norm="linf", kappa=0.0, max_iterations=300))
    assert adv.success.all()
    l2 = cw(binary_linear, x, labels,
            CW(norm="l2", kappa=0.0, max_iterations=300, binary_search_steps=6))
    # the linf objective should not lose badly to the l2 objective on linf norm
    assert adv.linf.mean() <= l2.linf.mean() * 1.5 + 1e-3


def test_cw_unsuccessful_samples_returned_unchanged():
    # constant logits: gradient-free landscape, margin kappa unreachable
    model = linear_model(np.zeros((3, 2), dtype=np.float32), [5.0, 0.0])
    x = random_batch(n=4, d=3, seed=17)
    labels = np.zeros(4, dtype=np.int64)
    adv = cw(model, x, labels, CW(norm="l2", kappa=10.0, max_iterations=30,
                                  binary_search_steps=2))
    assert not adv.success.any()
    assert np.array_equal(adv.adversarial, x)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------


def test_deepfool_returns_misclassified_unchanged(binary_linear):
    x = random_batch(n=10, d=3, seed=18)
    logits = binary_linear.predict_logits(x)
    wrong = 1 - logits.argmax(axis=1)
    adv = deepfool(binary_linear, x, wrong, DeepFool())
    assert np.array_equal(adv.adversarial, x)
    assert adv.success.all()


def test_deepfool_linear_model_exact_boundary_distance():
    # three classes so the nearest-boundary argmin matters
    w = np.array([[1.2, -0.4, 0.1], [0.3, 0.9, -0.2], [-0.5, 0.2, 0.7]], dtype=np.float32)
    b = np.array([0.05, -0.1, 0.0], dtype=np.float32)
    model = linear_model(w, b)
    x = (rng(19).random((20, 1, 1, 3)) * 0.3 + 0.35).astype(np.float32)
    labels = model.predict_logits(x).argmax(axis=1)
    overshoot = 0.02
    adv = deepfool(model, x, labels, DeepFool(max_iterations=50, overshoot=overshoot))
    assert adv.success.all()
    w64 = w.astype(np.float64)
    for i in range(len(x)):
        y = labels[i]
        xi = x[i].reshape(3).astype(np.float64)
        dists = []
        for j in range(3):
            if j == y:
                continue
            wj = w64[:, j] - w64[:, y]
            fj = (xi @ wj) + (b[j] - b[y])
            dists.append(abs(fj) / np.linalg.norm(wj))
        exact = min(dists)
        pre_overshoot = adv.l2[i] / (1 + overshoot)
        assert pre_overshoot == pytest.approx(exact, rel=0.02, abs=1e-3)


def test_deepfool_single_iteration_suffices_on_linear(binary_linear):
    x = (rng(20).random((10, 1, 1, 3)) * 0.4 + 0.3).astype(np.float32)
    labels = binary_linear.predict_logits(x).argmax(axis=1)
    one = deepfool(binary_linear, x, labels, DeepFool(max_iterations=1))
    many = deepfool(binary_linear, x, labels, DeepFool(max_iterations=50))
    assert one.success.all()
    assert np.array_equal(one.adversarial, many.adversarial)


# ---------------------------------------------------------------------------
# ZOO
# ---------------------------------------------------------------------------


def test_zoo_gradient_estimate_on_quadratic():
    a = np.array([0.7, -1.3, 2.0, 0.4])
    b = np.array([0.2, 0.5, -0.8, 1.1])

    def objective(v):
        return (a * v ** 2).sum(axis=1) + (b * v).sum(axis=1)

    x = np.array([0.3, -0.2, 0.5, 0.9])
    coords = np.array([0, 1, 2, 3])
    est = zoo_estimate_gradient(objective, x, coords)
    exact = 2 * a * x + b
    assert np.allclose(est, exact, atol=1e-3)


def test_zoo_estimator_call_budget():
    calls = {"rows": 0}

    def objective(v):
        calls["rows"] += len(v)
        return (v ** 2).sum(axis=1)

    coords = np.array([1, 3, 5, 7, 9])
    zoo_estimate_gradient(objective, np.zeros(12), coords)
    assert calls["rows"] == 2 * len(coords)


def test_zoo_attacks_linear_model(binary_linear):
    x = (rng(21).random((6, 1, 1, 3)) * 0.4 + 0.3).astype(np.float32)
    labels = binary_linear.predict_logits(x).argmax(axis=1)
    adv = zoo(binary_linear, x, labels,
              ZOO(max_iterations=150, initial_const=10.0, coord_batch=3,
                  learning_rate=0.05), seed=3)
    assert adv.adversarial.min() >= 0 and adv.adversarial.max() <= 1
    assert adv.success.mean() >= 0.5
    again = zoo(binary_linear, x, labels,
                ZOO(max_iterations=150, initial_const=10.0, coord_batch=3,
                    learning_rate=0.05), seed=3)
    assert np.array_equal(adv.adversarial, again.adversarial)


# ---------------------------------------------------------------------------
# UAP
# ---------------------------------------------------------------------------


def test_uap_projection_and_tiny_xi(toy_unsecured, toy_data):
    train, test = toy_data
    tr_x, tr_y = train.images[:60], train.labels[:60]
    te_x, te_y = test.images[:80], test.labels[:80]
    clean_acc = (toy_unsecured.infer_class(te_x) == te_y).mean()

    v, batch = uap(toy_unsecured, tr_x, tr_y, te_x, te_y,
                   UAP(xi=1e-6, max_outer_iterations=1, per_sample_max_iter=5), seed=0)
    tiny_acc = (toy_unsecured.infer_class(batch.adversarial) == te_y).mean()
    assert tiny_acc == clean_acc
    assert np.abs(v).max() <= 1e-6 + 1e-12

    v2, batch2 = uap(toy_unsecured, tr_x, tr_y, te_x, te_y,
                     UAP(xi=0.4, max_outer_iterations=2, per_sample_max_iter=5), seed=0)
    assert np.abs(v2).max() <= 0.4 + 1e-6
    fooled_acc = (toy_unsecured.infer_class(batch2.adversarial) == te_y).mean()
    assert fooled_acc < clean_acc  # one shared perturbation degrades accuracy


# ---------------------------------------------------------------------------
# config plumbing and persistence
# ---------------------------------------------------------------------------


def test_config_roundtrip_and_digest_stability():
    cfg = CW(norm="linf", kappa=40.0, max_iterations=500)
    d = config_to_dict(cfg)
    assert config_from_dict(d) == cfg
    assert config_digest(cfg) == config_digest(CW(norm="linf", kappa=40.0, max_iterations=500))
    assert config_digest(cfg) != config_digest(CW(norm="l2", kappa=40.0, max_iterations=500))


def test_config_validation():
    with pytest.raises(ValueError):
        BIM(epsilon=0.1, alpha=-0.1, steps=3)
    with pytest.raises(ValueError):
        CW(norm="l1")
    with pytest.raises(ValueError):
        DeepFool(max_iterations=0)
    with pytest.raises(ValueError):
        config_from_dict({"kind": "nope"})


def test_adv_batch_roundtrip(tmp_path, binary_linear):
    x = random_batch(n=5, d=3, seed=22)
    labels = rng(23).integers(0, 2, size=5)
    adv = fgsm(binary_linear, x, labels, FGSM(epsilon=0.1))
    path = tmp_path / "batch.advs"
    save_adv_batch(path, adv, labels, FGSM(epsilon=0.1))
    loaded, loaded_labels, cfg_dict = load_adv_batch(path)
    assert np.array_equal(loaded.adversarial, adv.adversarial)
    assert np.array_equal(loaded.success, adv.success)
    assert np.array_equal(loaded_labels, labels)
    assert config_from_dict(cfg_dict) == FGSM(epsilon=0.1)


def test_run_attack_dispatch(binary_linear, toy_unsecured, toy_data):
    x = random_batch(n=3, d=3, seed=24)
    labels = np.zeros(3, dtype=np.int64)
    for cfg in [FGSM(0.05), BIM(0.05, 0.02, 2), PGD(0.05, 0.02, 2),
                CW(max_iterations=10, binary_search_steps=1),
                DeepFool(max_iterations=3),
                ZOO(max_iterations=5, coord_batch=2)]:
        batch = run_attack(binary_linear, x, labels, cfg, seed=1)
        assert batch.adversarial.shape == x.shape
    train, test = toy_data
    with pytest.raises(ValueError, match="train_data"):
        run_attack(toy_unsecured, test.images[:2], test.labels[:2], UAP(xi=0.1))
