import numpy as np
import pytest

from vischain import envsim as es
from vischain import robot_model as rm


def test_make_chain_variants():
    for variant in es.ROBOT_VARIANTS:
        chain = es.make_chain(variant)
        assert chain.dof == len(es.home_config(variant))
        segs = rm.forward_kinematics(chain, np.zeros(chain.dof))
        np.testing.assert_allclose(segs[:, :, 2], 0.0, atol=1e-12)  # planar
        np.testing.assert_allclose(
            rm.end_effector(chain, np.zeros(chain.dof))[0],
            es.max_reach(variant), atol=1e-12)


def test_generate_world_deterministic_and_separated():
    w1 = es.generate_world(42, "planar3", 2)
    w2 = es.generate_world(42, "planar3", 2)
    for (p1, c1), (p2, c2) in zip(w1.targets, w2.targets):
        np.testing.assert_array_equal(p1, p2)
        assert c1 == c2
    assert [c for _, c in w1.targets] == list(es.COLORS)
    lmax = es.max_reach("planar3")
    for pos, _ in w1.targets:
        r = np.linalg.norm(pos[:2])
        assert 0.3 * lmax <= r <= 0.95 * lmax
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(w1.targets[i][0] - w1.targets[j][0]) >= 0.1


def test_solve_ik_reaches_targets():
    # damped least squares can fail from home for some target layouts (the
    # episode generator retries those worlds), so use one known-solvable world
    world = es.generate_world(2, "planar4", 1)
    chain = world.robot
    for pos, _ in world.targets:
        q = es.solve_ik(chain, es.home_config("planar4"), pos)
        assert np.linalg.norm(rm.end_effector(chain, q) - pos) < 1e-4


def test_solve_ik_unreachable_raises():
    chain = es.make_chain("planar3")
    with pytest.raises(es.IKError):
        es.solve_ik(chain, es.home_config("planar3"), (5.0, 0.0, 0.0))


def test_scripted_policy_endpoints():
    world = es.generate_world(4, "planar3", 1)
    task = es.Task(instruction_id=1, target_index=1)
    traj = es.scripted_policy(world, task, H=24)
    assert traj.shape == (24, 3)
    np.testing.assert_array_equal(traj[0], es.home_config("planar3"))
    ee = rm.end_effector(world.robot, traj[-1])
    assert np.linalg.norm(ee - world.targets[1][0]) < 1e-3


def test_render_image_shows_targets_and_robot():
    world = es.generate_world(5, "planar3", 2)
    img = es.render_image(world, es.home_config("planar3"), world.cameras[0])
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    flat = img.reshape(-1, 3)
    assert (flat == (255, 255, 255)).all(axis=1).any()  # robot in white
    for color in es.COLORS:
        assert (flat == es.COLOR_RGB[color]).all(axis=1).any()


def test_chain_point_set_normalized_and_modes():
    world = es.generate_world(6, "planar3", 1)
    q = es.home_config("planar3")
    pts = es.chain_point_set(world, q, world.cameras[0], 16)
    assert pts.shape == (16, 2)
    assert pts.min() > -0.5 and pts.max() < 1.5
    ee = es.chain_point_set(world, q, world.cameras[0], 16, mode="end_effector")
    assert ee.shape == (1, 2)


def test_ground_truth_chains_pads_final_config():
    world = es.generate_world(5, "planar3", 2)
    traj = es.scripted_policy(world, es.Task(0, 0), H=5)
    out = es.ground_truth_chains(world, traj, T=8, n_points=6)
    assert out.shape == (2, 8, 6, 2)
    np.testing.assert_array_equal(out[:, 4], out[:, 7])  # repeated last step


def test_horizon_slice_repeats_last():
    steps = np.arange(5)[:, None, None] * np.ones((5, 3, 2))
    window = es.horizon_slice(steps, 3, 4)
    np.testing.assert_array_equal(window[..., 0, 0], [3, 4, 4, 4])


def test_augment_identity_seed_consistency():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
    pts = rng.uniform(0, 1, (4, 2))
    a_img, a_pts = es.augment(img, pts, seed=9)
    b_img, b_pts = es.augment(img, pts, seed=9)
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_pts, b_pts)


def test_augment_moves_points_with_image():
    # a rendered robot pixel should track its chain point under augmentation
    world = es.generate_world(11, "planar3", 1)
    cam = world.cameras[0]
    q = es.home_config("planar3")
    img = es.render_image(world, q, cam)
    pts = es.chain_point_set(world, q, cam, 8)
    for seed in range(5):
        aug_img, aug_pts = es.augment(img, pts, seed)
        assert aug_img.shape == img.shape
        inside = aug_pts[(aug_pts[:, 0] > 0.1) & (aug_pts[:, 0] < 0.9)
                         & (aug_pts[:, 1] > 0.1) & (aug_pts[:, 1] < 0.9)]
        for p in inside[:3]:
            x, y = int(p[0] * 64), int(p[1] * 64)
            patch = aug_img[max(0, y - 2):y + 3, max(0, x - 2):x + 3]
            assert (patch == 255).any()  # white robot pixels near the point


def test_record_episode_action_exactness():
    world = es.generate_world(5, "planar3", 2)
    ep = es.record_episode(world, es.Task(0, 0), H=10, n_points=8)
    assert ep.configs.shape == (10, 3) and ep.actions.shape == (10, 3)
    # exact in stored precision: q_{t+1} == q_t + a_t
    np.testing.assert_array_equal(ep.configs[1:], ep.configs[:-1] + ep.actions[:-1])
    np.testing.assert_array_equal(ep.actions[-1], 0.0)
    assert ep.images.shape == (10, 2, 64, 64, 3)
    assert ep.point_sets.shape == (10, 2, 8, 2)


def test_generate_episodes_deterministic():
    a = es.generate_episodes(21, "planar3", 2, 1, H=6, n_points=4)
    b = es.generate_episodes(21, "planar3", 2, 1, H=6, n_points=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.images, y.images)
        np.testing.assert_array_equal(x.actions, y.actions)
        assert x.task == y.task


def test_rollout_oracle_policy_succeeds():
    world = es.generate_world(17, "planar3", 1)
    task = es.Task(instruction_id=2, target_index=2)
    traj = es.scripted_policy(world, task, H=24)
    step = {"t": 0}

    def oracle(instruction_id, images):
        t = min(step["t"], 22)
        step["t"] += 1
        return traj[t + 1] - traj[t]

    ok, trace = es.rollout_eval(oracle, world, task, max_steps=30)
    assert ok


def test_rollout_zero_policy_fails():
    world = es.generate_world(18, "planar3", 1)
    task = es.Task(instruction_id=0, target_index=0)
    ok, trace = es.rollout_eval(lambda i, im: np.zeros(3), world, task, max_steps=5)
    assert not ok and len(trace) == 6


def test_dataset_round_trip_exact(tmp_path):
    eps = es.generate_episodes(31, "planar4", 2, 2, H=6, n_points=5)
    path = tmp_path / "ds"
    es.dataset_save(eps, path)
    again = es.dataset_load(path)
    assert len(again) == 2
    for a, b in zip(eps, again):
        np.testing.assert_array_equal(a.configs.astype(np.float32), b.configs)
        np.testing.assert_array_equal(a.actions.astype(np.float32), b.actions)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.point_sets.astype(np.float32), b.point_sets)
        assert a.task == b.task
        for (p1, c1), (p2, c2) in zip(a.world.targets, b.world.targets):
            np.testing.assert_allclose(p1, p2, atol=1e-12)
            assert c1 == c2


def test_dataset_checksum_detects_corruption(tmp_path):
    eps = es.generate_episodes(33, "planar3", 1, 1, H=4, n_points=4)
    path = tmp_path / "ds"
    es.dataset_save(eps, path)
    binpath = path / "ep_0.bin"
    raw = bytearray(binpath.read_bytes())
    raw[100] ^= 0xFF
    binpath.write_bytes(bytes(raw))
    with pytest.raises(es.DatasetError):
        es.dataset_load(path)
