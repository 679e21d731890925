import math
import shutil

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import stats

from campari.datasets import (SIDECAR, DatasetError, ImageStore, Mixture, SyntheticSpec, area_downsample,
                              generate_synthetic, load_batch, read_pose_record, render_scene, sample_poses, SCENES)


def save_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), "RGB").save(path)


# -- mixtures and poses --------------------------------------------------------

def test_mixture_parse_round_trip():
    m = Mixture.parse("0.5*N(0.2, 0.1) + 0.5*N(0.7, 0.1)")
    assert m.weights == (0.5, 0.5) and m.means == (0.2, 0.7) and m.sigmas == (0.1, 0.1)
    assert Mixture.parse(str(m)) == m
    u = Mixture.parse("uniform(-pi, pi)")
    assert u.uniform == pytest.approx((-math.pi, math.pi))
    with pytest.raises(ValueError):
        Mixture((0.5, 0.6), (0.0, 1.0), (0.1, 0.1))
    with pytest.raises(ValueError):
        Mixture.parse("0.5*Q(1, 2)")


def test_elevation_samples_match_mixture_cdf():
    spec = SyntheticSpec(n_images=10_000, seed=3)
    ele = np.sort(sample_poses(spec)["alpha_e"])
    n = len(ele)
    cdf = spec.elevation.cdf(ele)
    ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    assert ks < 0.02
    assert ks == pytest.approx(stats.kstest(ele, spec.elevation.cdf).statistic, abs=1e-12)


def test_bimodal_rotation_modes():
    spec = SyntheticSpec(rotation=Mixture((0.5, 0.5), (-math.pi / 2, math.pi / 2), (0.2, 0.2)), n_images=10_000)
    rot = sample_poses(spec)["alpha_r"]
    hist, edges = np.histogram(rot, bins=126, range=(-math.pi, math.pi))
    centres = (edges[1:] + edges[:-1]) / 2
    left = centres[np.argmax(np.where(centres < 0, hist, -1))]
    right = centres[np.argmax(np.where(centres > 0, hist, -1))]
    assert abs(left + math.pi / 2) < 0.05 and abs(right - math.pi / 2) < 0.05
    assert hist[np.argmin(np.abs(centres))] < 0.05 * hist.max()


def test_degenerate_mixture_gives_identical_images(tmp_path):
    spec = SyntheticSpec(rotation=Mixture((1.0,), (0.4,), (0.0,)), elevation=Mixture((1.0,), (0.3,), (0.0,)),
                         n_images=3, resolution=16)
    store = generate_synthetic(spec, tmp_path)
    imgs = store.load_all(16)
    assert torch.equal(imgs[0], imgs[1]) and torch.equal(imgs[1], imgs[2])


def test_renders_are_deterministic_and_show_the_object(tmp_path):
    spec = SyntheticSpec(n_images=4, resolution=16, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for scene in SCENES.values():
        img = render_scene(scene(), 0.3, 0.4, 0.75, 0.5, 16)
        assert img.shape == (16, 16, 3) and 0 <= img.min() and img.max() <= 1
        assert img.std() > 0.01


def test_elevation_changes_the_chair_more_than_nothing():
    objs = SCENES["chair-proxy"]()
    low = render_scene(objs, 0.5, 0.1, 0.75, 0.5, 32)
    high = render_scene(objs, 0.5, 0.9, 0.75, 0.5, 32)
    assert np.abs(low - high).mean() > 0.02


def test_sidecar_layout_and_values(tmp_path):
    spec = SyntheticSpec(n_images=5, resolution=8, seed=2)
    generate_synthetic(spec, tmp_path)
    header = (tmp_path / SIDECAR).read_text().splitlines()[0]
    assert header == "filename,alpha_r,alpha_e,r_cam"
    rec = read_pose_record(tmp_path / SIDECAR)
    truth = sample_poses(spec)
    np.testing.assert_array_equal(rec["alpha_e"], truth["alpha_e"])
    assert list(rec["filename"]) == [f"img_{i:05d}.png" for i in range(5)]


def test_missing_sidecar_explains(tmp_path):
    with pytest.raises(DatasetError, match="synthetic"):
        read_pose_record(tmp_path / SIDECAR)


# -- ingestion -------------------------------------------------------------------

def test_white_png_loads_as_ones(tmp_path):
    save_png(tmp_path / "w.png", np.full((20, 20, 3), 255))
    out = load_batch(ImageStore(tmp_path), [0, 0], 8)
    assert out.shape == (2, 8, 8, 3)
    assert torch.equal(out, torch.ones(2, 8, 8, 3))


def test_checker_downsamples_to_half(tmp_path):
    yy, xx = np.mgrid[:64, :64]
    checker = ((yy + xx) % 2 * 255)[..., None].repeat(3, axis=2)
    save_png(tmp_path / "c.png", checker)
    out = load_batch(ImageStore(tmp_path), [0], 32)
    assert torch.allclose(out, torch.full((1, 32, 32, 3), 0.5))
    # non-integer ratios go through a box filter and keep the mean
    assert abs(area_downsample(out[0].numpy(), 24).mean() - 0.5) < 0.01


def test_centre_crop_of_wide_image(tmp_path):
    img = np.zeros((10, 30, 3))
    img[:, 10:20] = 255
    save_png(tmp_path / "wide.png", img)
    store = ImageStore(tmp_path)
    assert torch.equal(load_batch(store, [0], 10), torch.ones(1, 10, 10, 3))
    with pytest.raises(DatasetError, match="not square"):
        load_batch(ImageStore(tmp_path, crop=False), [0], 10)


def test_unreadable_file_error_names_path(tmp_path):
    save_png(tmp_path / "a.png", np.zeros((4, 4, 3)))
    (tmp_path / "b.png").write_bytes(b"not a png")
    store = ImageStore(tmp_path)
    with pytest.raises(DatasetError, match="b.png"):
        load_batch(store, [1], 4)
    with pytest.raises(IndexError):
        load_batch(store, [2], 4)


def test_store_ignores_non_images_and_rejects_empty(tmp_path):
    with pytest.raises(DatasetError):
        ImageStore(tmp_path)
    with pytest.raises(DatasetError):
        ImageStore(tmp_path / "missing")
    save_png(tmp_path / "a.png", np.zeros((4, 4, 3)))
    (tmp_path / SIDECAR).write_text("filename,alpha_r,alpha_e,r_cam\n")
    (tmp_path / "notes.txt").write_text("x")
    assert len(ImageStore(tmp_path)) == 1


# -- pose isolation ---------------------------------------------------------------

def test_training_ignores_pose_sidecar(tmp_path):
    from campari.config import build_config
    from campari.training import StageImages, TrainState, train

    spec = SyntheticSpec(n_images=6, resolution=16, seed=1)
    generate_synthetic(spec, tmp_path / "with")
    shutil.copytree(tmp_path / "with", tmp_path / "without")
    (tmp_path / "without" / SIDECAR).unlink()
    shutil.copytree(tmp_path / "with", tmp_path / "deleted")

    cfg = build_config("", ["resolutions=8, 16", "stage_iters=3", "batch_sizes=2, 2", "max_iters=6",
                            "latent_dim=4", "fg_layers=2", "fg_width=8", "fg_skip=0", "bg_layers=2", "bg_width=8",
                            "bg_skip=0", "n_freq_x=2", "n_freq_d=1", "disc_channel_div=16", "camgen_layers=2",
                            "camgen_width=8", "camgen_warmup=1", "points_start=4", "points_max=6"], profile="smoke")

    def trace(folder, delete_at=None):
        state = TrainState.create(cfg)

        def hook(s):
            if delete_at is not None and s.iteration == delete_at:
                (folder / SIDECAR).unlink()

        return [(s.loss_g, s.loss_d) for s in train(state, StageImages(ImageStore(folder)), 6, on_step=hook)]

    ref = trace(tmp_path / "with")
    assert trace(tmp_path / "without") == ref
    assert trace(tmp_path / "deleted", delete_at=2) == ref
