import numpy as np
import pytest

from anat9.augment import (
    AugmentConfig,
    RigidDraw,
    crop_z,
    draw_rigid,
    random_crop_z,
    random_erase_bottom_pair,
    random_rigid_augment,
    rigid_augment,
)
from anat9.geometry import Pose9DoF, pca_parameterize
from anat9.metrics import angle_deviation


def draw(t=(0, 0, 0), s=1.0, a=(0, 0, 0)):
    return RigidDraw(np.asarray(t, float), s, np.asarray(a, float))


def test_pure_translation(ladder):
    t = np.array([4.0, -2.0, 6.0])
    _, poses = rigid_augment(ladder.labels, ladder.gt_poses, draw(t))
    for a, b in zip(ladder.gt_poses, poses):
        assert np.allclose(b.center, a.center + t)
        assert np.allclose(b.scale, a.scale)
        assert np.max(angle_deviation(a.angles, b.angles)) < 1e-9


def test_pure_scale(ladder):
    pivot = ladder.meta.center_world
    _, poses = rigid_augment(ladder.labels, ladder.gt_poses, draw(s=1.1))
    for a, b in zip(ladder.gt_poses, poses):
        assert np.allclose(b.center - pivot, 1.1 * (a.center - pivot))
        assert np.allclose(b.scale, 1.1 * a.scale)
        assert np.max(angle_deviation(a.angles, b.angles)) < 1e-9


def test_rotation_composes():
    from anat9.volume import LabelVolume, VolumeMeta

    vol = LabelVolume(VolumeMeta((4, 4, 4)), np.zeros((4, 4, 4), int))
    box = Pose9DoF(1, (0, 0, 0), (3, 2, 1), (10, 0, 0))
    _, (out,) = rigid_augment(vol, [box], draw(a=(15, 0, 0)))
    assert np.allclose(out.angles, (25, 0, 0), atol=1e-9)


def test_analytic_update_matches_refit(ladder_fine):
    vol = ladder_fine.labels
    spacing = max(vol.meta.spacing)
    base = [pca_parameterize(vol, lab) for lab in vol.labels()]
    for case in range(3):
        d = draw_rigid(AugmentConfig(max_translation=10, seed=7), case)
        out, poses = rigid_augment(vol, base, d)
        for p in poses:
            refit = pca_parameterize(out, p.label)
            assert np.max(angle_deviation(refit.angles, p.angles)) <= 2.0
            assert np.linalg.norm(refit.center - p.center) <= 2 * spacing
            assert np.max(np.abs(refit.scale - p.scale)) <= 2 * spacing


def test_labels_subset_and_determinism(ladder):
    cfg = AugmentConfig(seed=3)
    a, pa = random_rigid_augment(ladder.labels, ladder.gt_poses, cfg, case=1)
    b, pb = random_rigid_augment(ladder.labels, ladder.gt_poses, cfg, case=1)
    assert np.array_equal(a.voxels, b.voxels)
    assert all(np.array_equal(x.as_vector(), y.as_vector()) for x, y in zip(pa, pb))
    assert set(a.labels()) <= set(ladder.labels.labels())


def test_crop_full_extent(ladder):
    nz = ladder.meta.dims[2]
    out, poses = random_crop_z(ladder.labels, ladder.gt_poses, (0, nz))
    assert np.array_equal(out.voxels, ladder.labels.voxels)
    assert out.meta == ladder.meta
    assert all(np.array_equal(a.as_vector(), b.as_vector()) for a, b in zip(poses, ladder.gt_poses))


def test_crop_bisecting_refits(ladder):
    vol = ladder.labels
    z = np.argwhere(vol.voxels == 1)[:, 2]
    mid = int((z.min() + z.max()) // 2)
    out, poses = random_crop_z(vol, ladder.gt_poses, (0, mid))
    refit = {p.label: p for p in poses}
    assert refit[1].label == 1
    oracle = pca_parameterize(crop_z(vol, 0, mid), 1)
    assert np.array_equal(refit[1].as_vector(), oracle.as_vector())
    # untouched instances keep the generator boxes
    assert np.array_equal(refit[24].as_vector(), ladder.pose(24).as_vector())


def test_crop_world_positions_preserved(ladder):
    from anat9.volume import voxel_to_world

    out = crop_z(ladder.labels, 5, 20)
    assert np.allclose(voxel_to_world(out.meta, (3, 4, 0)), voxel_to_world(ladder.meta, (3, 4, 5)))


def test_crop_below_all(ladder):
    z = np.argwhere(ladder.labels.voxels > 0)[:, 2].min()
    out, poses = random_crop_z(ladder.labels, ladder.gt_poses, (0, int(z)))
    assert poses == []
    assert out.labels() == []


def test_crop_bad_interval(ladder):
    with pytest.raises(ValueError):
        random_crop_z(ladder.labels, ladder.gt_poses, (5, 5))


def test_random_crop_seeded(ladder):
    a = random_crop_z(ladder.labels, ladder.gt_poses, seed=11)[0]
    b = random_crop_z(ladder.labels, ladder.gt_poses, seed=11)[0]
    assert a.meta == b.meta and np.array_equal(a.voxels, b.voxels)


def test_erase_probability_one(ladder):
    out, poses = random_erase_bottom_pair(ladder.labels, ladder.gt_poses, 1.0)
    assert len(poses) == 22
    assert out.labels() == list(range(1, 23))


def test_erase_probability_zero(ladder):
    out, poses = random_erase_bottom_pair(ladder.labels, ladder.gt_poses, 0.0)
    assert out is ladder.labels and len(poses) == 24


def test_erase_reproducible(ladder):
    runs = [len(random_erase_bottom_pair(ladder.labels, ladder.gt_poses, 0.5, seed=s)[1]) for s in range(20)]
    again = [len(random_erase_bottom_pair(ladder.labels, ladder.gt_poses, 0.5, seed=s)[1]) for s in range(20)]
    assert runs == again
    assert set(runs) == {22, 24}


def test_erase_too_few(caplog):
    from anat9.volume import LabelVolume, VolumeMeta

    vox = np.zeros((3, 3, 3), int)
    vox[1, 1, 1] = 1
    vol = LabelVolume(VolumeMeta((3, 3, 3)), vox)
    out, poses = random_erase_bottom_pair(vol, [pca_parameterize(vol, 1)], 1.0)
    assert len(poses) == 1
    assert "fewer than two" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(1.2, 1.1))
    with pytest.raises(ValueError):
        AugmentConfig(erase_probability=2)
