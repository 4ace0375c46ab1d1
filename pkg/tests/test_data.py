import json

import numpy as np
import pytest

from handmim import data
from handmim.errors import IngestionError
from handmim.hand_model import forward, intrinsics, project, regress_joints


def test_wrist_is_model_origin(hand):
    j3d = regress_joints(hand, forward(hand, np.zeros((16, 3)), np.zeros(4)))
    uv = project(j3d, np.array([0.0, 0.0, 0.5]), intrinsics(500.0, 112.0, 112.0))
    assert np.abs(uv[0] - [112.0, 112.0]).max() < 1e-9


def test_fixed_seed_bit_identical(hand):
    a = data.generate_sample(np.random.default_rng(7), hand)
    b = data.generate_sample(np.random.default_rng(7), hand)
    assert a.image.tobytes() == b.image.tobytes()
    for name in ("K", "j3d", "j2d", "verts"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))


def test_generated_samples_self_consistent(small_dataset, hand):
    assert all(data.check_sample(s, hand) for s in small_dataset)
    for s in small_dataset:
        assert s.image.shape == (64, 64, 3) and 0 <= s.image.min() and s.image.max() <= 1
        assert ((s.j3d + s.params.t)[:, 2] > 0).all()


def test_pose_ranges():
    cfg = data.GenConfig()
    rng = np.random.default_rng(0)
    thetas = np.stack([data.sample_pose(rng, cfg) for _ in range(10000)])
    for axis, (lo, hi) in enumerate(cfg.root_range):
        assert lo <= thetas[:, 0, axis].min() and thetas[:, 0, axis].max() <= hi
    fingers = thetas[:, 1:]
    assert cfg.curl_range[0] <= fingers[..., 0].min() and fingers[..., 0].max() <= cfg.curl_range[1]
    assert (fingers[..., 1] == 0).all()
    base = fingers[:, 0::3, 2]
    assert cfg.spread_range[0] <= base.min() and base.max() <= cfg.spread_range[1]
    assert (np.delete(fingers[..., 2], np.arange(0, 15, 3), axis=1) == 0).all()


def test_quantize_png_lossless(tmp_path, rng):
    img = data.quantize(rng.random((8, 8, 3)))
    data.save_png(tmp_path / "a.png", img)
    assert np.array_equal(data.load_png(tmp_path / "a.png"), img)


def test_empty_directory(tmp_path):
    assert data.load_freihand_dir(tmp_path) == []


def _fixture(root, n_xyz=3):
    (root / "rgb").mkdir(parents=True)
    for i in range(3):
        data.save_png(root / "rgb" / f"{i:08d}.png", np.full((8, 8, 3), i / 4))
    K = [[[100.0, 0.0, 4.0], [0.0, 100.0, 4.0], [0.0, 0.0, 1.0]]] * 3
    xyz = [[[0.01 * i + 0.001 * j, 0.02, 0.5] for j in range(21)] for i in range(n_xyz)]
    verts = [[[0.0, 0.0, 0.5]] * 63 for _ in range(3)]
    (root / "training_K.json").write_text(json.dumps(K))
    (root / "training_xyz.json").write_text(json.dumps(xyz))
    (root / "training_verts.json").write_text(json.dumps(verts))
    return xyz


def test_loader_fixture_verbatim(tmp_path):
    xyz = _fixture(tmp_path)
    samples = data.load_freihand_dir(tmp_path)
    assert len(samples) == 3
    assert samples[0].j3d.tolist() == xyz[0]
    assert samples[2].image[0, 0, 0] == pytest.approx(round(0.5 * 255) / 255)
    assert samples[1].params is None
    assert np.allclose(samples[1].j2d[0], [100 * 0.01 / 0.5 + 4, 100 * 0.02 / 0.5 + 4])


def test_loader_length_mismatch(tmp_path):
    _fixture(tmp_path, n_xyz=2)
    with pytest.raises(IngestionError, match="training_xyz.json"):
        data.load_freihand_dir(tmp_path)


def test_loader_round_trip(small_dataset, tmp_path):
    data.save_freihand_dir(small_dataset[:6], tmp_path)
    again = data.load_freihand_dir(tmp_path)
    assert len(again) == 6
    for a, b in zip(small_dataset, again):
        assert np.array_equal(a.image, b.image)
        for name in ("K", "j3d", "j2d", "verts"):
            assert np.abs(getattr(a, name) - getattr(b, name)).max() < 1e-9
        for x, y in zip(a.params, b.params):
            assert np.abs(np.asarray(x) - y).max() < 1e-9


def test_corpus_count_bounds_and_order(small_dataset, tmp_path):
    store = data.build_pretrain_corpus([small_dataset[:10], small_dataset[10:]], tmp_path / "c", out_size=32)
    assert len(store) == len(small_dataset)
    assert store.paths == sorted(store.paths)
    assert data.ImageStore.open(tmp_path / "c").paths == store.paths
    assert store.load_all().shape == (len(small_dataset), 32, 32, 3)
    for s in small_dataset:
        x0, y0, side = data.crop_box(s.j2d, 64, 1.3)
        assert x0 >= 0 and y0 >= 0 and x0 + side <= 64 and y0 + side <= 64
    again = data.build_pretrain_corpus([small_dataset], tmp_path / "d", out_size=32)
    for p in store.paths:
        assert (tmp_path / "c" / p).read_bytes() == (tmp_path / "d" / p).read_bytes()


def test_crop_box_clamps_outside_points():
    x0, y0, side = data.crop_box(np.array([[-10.0, -10.0], [70.0, 5.0]]), 64, 1.3)
    assert (x0, y0) == (0.0, 0.0) and side == 64.0


def test_thousand_samples_pass_consistency_chain(hand):
    samples = data.generate_dataset(1000, seed=11, model=hand)
    assert sum(data.check_sample(s, hand, atol=1e-6) for s in samples) == 1000
