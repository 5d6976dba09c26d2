import csv
from dataclasses import replace

import numpy as np
import pytest

from test_newton import one_kernel
from test_raster import straight_camera
from splatnewton.dataset import Dataset
from splatnewton.errors import InvalidInputError
from splatnewton.loss import LossConfig, total_loss
from splatnewton.newton import attribute_gradients, evaluate_view
from splatnewton.raster import DEFAULT, render
from splatnewton.scene import Scene
from splatnewton.secondary import (SecondaryTargetSet, fit_bounding_sphere, knn_views,
                                   matched_lowpass)
from splatnewton.sh import C0
from splatnewton.synth import make_cameras, random_scene, synth_scene
from splatnewton.trainer import (ADAM_LEARNING_RATES, CSV_COLUMNS, TrainConfig, Trainer,
                                 image_schedule, parse_order, run_training)

ZERO_LR = {"position": 0.0, "rotation": 0.0, "scaling": 0.0, "opacity": 0.0, "color": 0.0}


def self_consistent(scene, cameras, knn=3, factor=4):
    """Dataset and secondary targets rendered from ``scene`` with the training renderer."""
    ds = Dataset(cameras, [render(scene, c, DEFAULT).color for c in cameras])
    opts = replace(DEFAULT, lowpass=matched_lowpass(factor))
    low = [render(scene, c.scaled(factor), opts).color for c in cameras]
    secondary = SecondaryTargetSet.build(ds, fit_bounding_sphere(scene), knn, factor, images=low)
    return ds, secondary


def test_fixed_point():
    scene = random_scene(np.random.default_rng(0), 30)
    ds, secondary = self_consistent(scene, make_cameras(5, 48))
    trainer = Trainer(TrainConfig(), scene, ds, secondary)
    before = trainer.probe()[0]
    for t in range(5):
        report = trainer.train_step(t)
        assert all(v < 1e-8 for v in report.delta_norms.values()), report.delta_norms
    assert abs(trainer.probe()[0] - before) <= 1e-10


def test_single_kernel_mismatch_decreases():
    truth = one_kernel(scale=(0.15, 0.08, 0.08))
    init = one_kernel(pos=(0.03, -0.02, 4.0), scale=(0.11, 0.1, 0.07), opacity=0.6,
                      color=(0.6, 0.5, 0.3))
    cam = straight_camera()
    ds = Dataset([cam], [render(truth, cam, DEFAULT).color])
    _, reports = run_training(TrainConfig(knn=0, max_steps=5), init, ds)
    losses = [r.probe_loss for r in reports]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_zero_gradient_step_is_a_no_op():
    scene = random_scene(np.random.default_rng(1), 10)
    ds, _ = self_consistent(scene, make_cameras(2, 32))
    for opt in ("gd", "adam"):
        trainer = Trainer(TrainConfig(optimizer=opt, lam=0.0), scene, ds)
        trainer.train_step(0)
        for attr in ("positions", "rotations", "scales", "opacities", "sh"):
            np.testing.assert_allclose(getattr(trainer.scene, attr), getattr(scene, attr),
                                       atol=1e-15)


def test_gd_follows_closed_form_on_quadratic_colors():
    truth = one_kernel(scale=(0.12, 0.12, 0.12), color=(0.2, 0.7, 0.5))
    init = one_kernel(scale=(0.12, 0.12, 0.12), color=(0.8, 0.4, 0.3))
    cam = straight_camera(32)
    ds = Dataset([cam], [render(truth, cam, DEFAULT).color])
    lr = 50.0
    config = TrainConfig(optimizer="gd", lam=0.0, learning_rates=dict(ZERO_LR, color=lr))
    trainer = Trainer(config, init, ds)
    view = evaluate_view(init, cam, ds.images[0], LossConfig(lam=0.0), DEFAULT)
    cap = view.capture
    w = cap.alpha * cap.T
    # gradient per SH DC coefficient is A (dc - dc_truth)
    A = C0 ** 2 * np.sum(w * w) / (3.0 * cam.width * cam.height)
    e0 = init.sh[0, :, 0] - truth.sh[0, :, 0]
    for k in range(1, 6):
        trainer.train_step(0, probe=False)
        e = trainer.scene.sh[0, :, 0] - truth.sh[0, :, 0]
        np.testing.assert_allclose(e, (1.0 - lr * A) ** k * e0, rtol=1e-9, atol=1e-14)
    np.testing.assert_array_equal(trainer.scene.positions, init.positions)


def test_adam_first_step_has_learning_rate_magnitude():
    _, init, ds = synth_scene(2, 15, 2, 32)
    trainer = Trainer(TrainConfig(optimizer="adam"), init, ds)
    trainer.train_step(0, probe=False)
    dp = trainer.scene.positions - init.positions
    moved = np.abs(dp) > 0
    assert moved.any()
    np.testing.assert_allclose(np.abs(dp[moved]), ADAM_LEARNING_RATES["position"], rtol=1e-9)
    view = evaluate_view(init, ds.cameras[0], ds.images[0], LossConfig(), DEFAULT, second=False)
    g = attribute_gradients(init, view)["color"]
    dsh = trainer.scene.sh - init.sh
    # with bias correction the first step is lr * g / (|g| + eps)
    lr = ADAM_LEARNING_RATES["color"]
    big = np.abs(g) > 1e-12
    np.testing.assert_allclose(np.abs(dsh[big]), lr * np.abs(g[big]) / (np.abs(g[big]) + 1e-15),
                               rtol=1e-9)
    assert np.all(np.abs(dsh) <= lr * (1 + 1e-12))
    assert np.all(dsh[g == 0] == 0)


def test_zero_epochs_is_identity():
    _, init, ds = synth_scene(3, 10, 3, 32)
    final, reports = run_training(TrainConfig(epochs=0), init, ds)
    assert len(reports) == 1
    for attr in ("positions", "rotations", "scales", "opacities", "sh"):
        np.testing.assert_array_equal(getattr(final, attr), getattr(init, attr))


def read_log(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: v for k, v in r.items() if k != "dt_ms"} for r in rows], rows


@pytest.mark.parametrize("optimizer", ["newton", "gd"])
def test_same_seed_gives_identical_curves(tmp_path, optimizer):
    _, init, ds = synth_scene(4, 20, 4, 32)
    config = TrainConfig(optimizer=optimizer, max_steps=6, seed=9)
    run_training(config, init, ds, tmp_path / "a.csv")
    run_training(config, init, ds, tmp_path / "b.csv")
    a, raw = read_log(tmp_path / "a.csv")
    b, _ = read_log(tmp_path / "b.csv")
    assert a == b
    assert tuple(raw[0].keys()) == CSV_COLUMNS
    assert len(a) == 7


def test_epoch_schedule_and_checkpoints(tmp_path):
    _, init, ds = synth_scene(5, 10, 3, 32)
    final, reports = run_training(TrainConfig(optimizer="gd", epochs=2, seed=1), init, ds,
                                  checkpoint_dir=tmp_path)
    assert [r.step for r in reports] == list(range(7))
    ids = [r.image_id for r in reports[1:]]
    assert sorted(ids[:3]) == [0, 1, 2] and sorted(ids[3:]) == [0, 1, 2]
    assert ids[:3] == image_schedule(3, 1, 0).tolist()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0001.json", "epoch_0002.json"]
    saved = Scene.load(tmp_path / "epoch_0002.json")
    np.testing.assert_array_equal(saved.positions, final.positions)


def test_barrier_weight_decays_per_epoch():
    _, init, ds = synth_scene(6, 5, 2, 32)
    trainer = Trainer(TrainConfig(knn=0), init, ds)
    for _ in range(10):
        trainer.end_epoch()
    assert trainer.barrier_weight == 1e-6
    trainer = Trainer(TrainConfig(knn=0), init, ds)
    trainer.end_epoch()
    assert trainer.barrier_weight == 0.5e-4


def test_order_validation():
    assert parse_order("pos,rot,scale,opacity,color") == (
        "position", "rotation", "scaling", "opacity", "color")
    with pytest.raises(InvalidInputError):
        TrainConfig(order=("position", "color"))
    with pytest.raises(InvalidInputError):
        TrainConfig(order=("position",) * 5)
    with pytest.raises(InvalidInputError):
        TrainConfig(optimizer="sgd")


def test_logging_cadence_skips_probes():
    _, init, ds = synth_scene(7, 10, 3, 32)
    _, reports = run_training(TrainConfig(optimizer="gd", max_steps=6, log_every=3), init, ds)
    probed = [r.step for r in reports if np.isfinite(r.probe_loss)]
    assert probed == [0, 3, 6]


def test_non_finite_loss_aborts_with_dump(tmp_path):
    _, init, ds = synth_scene(8, 10, 3, 32)
    dump = tmp_path / "systems.csv"
    trainer = Trainer(TrainConfig(knn=0, dump_path=str(dump)), init, ds)
    trainer.train_step(0, probe=False)
    ds.images[1] = np.full_like(ds.images[1], np.nan)
    with pytest.raises(ArithmeticError):
        trainer.train_step(1, probe=False)
    assert dump.exists()


def test_newton_ignores_learning_rates():
    _, init, ds = synth_scene(9, 15, 3, 32)
    a, _ = run_training(TrainConfig(max_steps=2, knn=0), init, ds)
    b, _ = run_training(TrainConfig(max_steps=2, knn=0, learning_rates=dict(ZERO_LR)), init, ds)
    np.testing.assert_array_equal(a.positions, b.positions)
