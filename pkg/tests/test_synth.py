import math

import numpy as np
import pytest

from gazedrive.attention import build_attention_map, peak_normalize
from gazedrive.commands import HighLevelCommand
from gazedrive.geometry import CameraExtrinsics, ProjectionStatus, forward_project
from gazedrive.masking import hard_mask
from gazedrive.synth import (
    BACKGROUND,
    EpisodeConfig,
    GazeConfig,
    Landmark,
    Polyline,
    Scene,
    SceneConfig,
    disc_of,
    gen_episode,
    gen_scene,
    generate,
    oracle_control,
    oracle_gaze,
    pose_of,
    quantize,
    render_frame,
    surface_point,
)
from gazedrive.attention import window_fixations

from helpers import default_intrinsics, disc_coverage_oracle

SEEDS = range(10)


@pytest.fixture(scope="module")
def corpus():
    return {seed: generate(seed, 500) for seed in SEEDS}


def straight_scene(landmarks=()):
    return Scene(list(landmarks), Polyline([[0.0, 0.0, 0.0], [200.0, 0.0, 0.0]]), [])


def distance_to_polyline(p, vertices):
    best = math.inf
    for a, b in zip(vertices[:-1], vertices[1:]):
        ab = b - a
        u = min(max(float(np.dot(p - a, ab) / np.dot(ab, ab)), 0.0), 1.0)
        best = min(best, float(np.linalg.norm(p - (a + u * ab))))
    return best


class TestScene:
    def test_deterministic(self):
        a, b = gen_scene(3), gen_scene(3)
        assert a.landmarks == b.landmarks
        assert np.array_equal(a.path.vertices, b.path.vertices)
        assert a.junctions == b.junctions

    def test_seeds_differ(self):
        assert gen_scene(1).landmarks != gen_scene(2).landmarks

    def test_landmark_counts_match_config(self):
        cfg = SceneConfig(n_legs=5, n_vehicles=3, n_pedestrians=4, n_signs=2, n_distractors=7, light_probability=1.0)
        scene = gen_scene(0, cfg)
        kinds = [lm.kind for lm in scene.landmarks]
        assert kinds.count("vehicle") == 3
        assert kinds.count("pedestrian") == 4
        assert kinds.count("sign") == 2
        assert kinds.count("distractor") == 7
        assert kinds.count("light") == 4  # one per junction
        assert len(scene.junctions) == 4

    def test_task_landmarks_near_path_and_radii_positive(self):
        scene = gen_scene(5)
        for lm in scene.landmarks:
            assert lm.radius > 0
            if lm.kind != "distractor":
                c = np.array(lm.center)
                ground = np.array([c[0], c[1], 0.0])
                assert distance_to_polyline(ground, scene.path.vertices) <= 20.0

    def test_balanced_turns(self):
        scene = gen_scene(0, SceneConfig(n_legs=13))
        counts = [sum(j.command is c for j in scene.junctions) for c in (HighLevelCommand.LEFT, HighLevelCommand.RIGHT, HighLevelCommand.STRAIGHT)]
        assert counts == [4, 4, 4]

    def test_degenerate_config(self):
        with pytest.raises(ValueError):
            gen_scene(0, SceneConfig(n_legs=0))
        with pytest.raises(ValueError):
            gen_scene(0, SceneConfig(leg_length=(0.0, 0.0)))
        with pytest.raises(ValueError):
            gen_scene(0, SceneConfig(turn_order="zigzag"))
        with pytest.raises(ValueError):
            Polyline([[0.0, 0.0, 0.0]])


class TestRender:
    intr = default_intrinsics()

    def test_empty_scene_is_background(self):
        scene = Scene([], Polyline([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), [])
        # camera looks along +x while the path runs far behind/aside: no road in view
        ext = CameraExtrinsics.from_pose([500.0, 500.0, 1.5], 0.0)
        img = render_frame(scene, ext, self.intr)
        assert np.array_equal(img, np.broadcast_to(quantize(np.array(BACKGROUND)), img.shape))

    def test_landmark_on_optical_axis_is_centred(self):
        ext = CameraExtrinsics.from_pose([0.0, 0.0, 0.0], 0.0)
        lm = Landmark((20.0, 0.0, 0.0), 2.0, (1.0, 0.0, 0.0), "vehicle")
        x, y, rho, _ = disc_of(lm, ext, self.intr)
        proj = forward_project(lm.center, ext, self.intr)
        assert (x, y) == pytest.approx((32.0, 32.0)) == (proj.pixel.x, proj.pixel.y)
        img = render_frame(Scene([lm], Polyline([[-100.0, 50.0, 0.0], [-99.0, 50.0, 0.0]]), []), ext, self.intr)
        red = np.all(img == quantize(np.array((1.0, 0.0, 0.0))), axis=-1)
        rows, cols = np.nonzero(red)
        assert (rows.min() + rows.max()) / 2 == pytest.approx(32.0, abs=0.5)
        assert (cols.min() + cols.max()) / 2 == pytest.approx(32.0, abs=0.5)
        assert np.array_equal(red, disc_coverage_oracle(x, y, rho, 64, 64))

    def test_disc_coverage_matches_pixel_oracle(self):
        rng = np.random.default_rng(0)
        far_path = Polyline([[-100.0, 50.0, 0.0], [-99.0, 50.0, 0.0]])
        ext = CameraExtrinsics.from_pose([0.0, 0.0, 0.0], 0.0)
        color = (0.0, 0.0, 1.0)
        checked = 0
        while checked < 40:
            center = (rng.uniform(4, 30), rng.uniform(-8, 8), rng.uniform(-8, 8))
            lm = Landmark(center, rng.uniform(0.3, 2.0), color, "vehicle")
            if disc_of(lm, ext, self.intr) is None:
                continue
            img = render_frame(Scene([lm], far_path, []), ext, self.intr)
            drawn = np.all(img == quantize(np.array(color)), axis=-1)
            # independent disc: centre from forward projection, radius from camera-space depth
            centre = forward_project(center, ext, self.intr).pixel
            depth = ext.to_camera(np.array(center))[2]
            truth = disc_coverage_oracle(centre.x, centre.y, self.intr.f * lm.radius / depth, 64, 64)
            assert np.mean(drawn != truth) < 0.01
            checked += 1

    def test_nearer_landmark_drawn_on_top(self):
        ext = CameraExtrinsics.from_pose([0.0, 0.0, 0.0], 0.0)
        near = Landmark((10.0, 0.0, 0.0), 1.0, (1.0, 0.0, 0.0), "vehicle")
        far = Landmark((20.0, 0.0, 0.0), 3.0, (0.0, 1.0, 0.0), "vehicle")
        path = Polyline([[-100.0, 50.0, 0.0], [-99.0, 50.0, 0.0]])
        for order in ([near, far], [far, near]):
            img = render_frame(Scene(order, path, []), ext, self.intr)
            assert np.array_equal(img[32, 32], quantize(np.array((1.0, 0.0, 0.0))))

    def test_deterministic(self):
        scene = gen_scene(2)
        ext = CameraExtrinsics.from_pose(scene.path.point_at(10.0) + [0, 0, 1.5], scene.path.heading_at(10.0), 0.12)
        assert np.array_equal(render_frame(scene, ext, self.intr), render_frame(scene, ext, self.intr))


class TestOracleGaze:
    intr = default_intrinsics()
    ext = CameraExtrinsics.from_pose([0.0, 0.0, 1.5], 0.0)

    def test_single_left_landmark(self):
        lm = Landmark((15.0, 3.0, 1.0), 0.5, (1.0, 1.0, 1.0), "sign")
        scene = straight_scene([lm])
        rng = np.random.default_rng(0)
        cfg = GazeConfig(side_bias=1.0)
        for _ in range(20):
            g = oracle_gaze(scene, self.ext, self.intr, HighLevelCommand.LEFT, rng, cfg=cfg)
            np.testing.assert_allclose(np.array(g), surface_point(lm, self.ext.position))

    def test_no_landmarks_gives_lookahead(self):
        scene = straight_scene()
        rng = np.random.default_rng(0)
        for cmd in HighLevelCommand:
            g = oracle_gaze(scene, self.ext, self.intr, cmd, rng, progress=3.0)
            np.testing.assert_allclose(np.array(g), [3.0 + GazeConfig().gaze_lookahead, 0.0, 0.0])

    @pytest.mark.parametrize("command,sign", [(HighLevelCommand.LEFT, 1.0), (HighLevelCommand.RIGHT, -1.0)])
    def test_side_bias_frequency(self, command, sign):
        left = Landmark((15.0, 3.0, 1.0), 0.5, (1.0, 1.0, 1.0), "sign")
        right = Landmark((12.0, -3.0, 1.0), 0.5, (1.0, 1.0, 1.0), "sign")
        scene = straight_scene([left, right])
        rng = np.random.default_rng(0)
        target = left if sign > 0 else right
        expected = surface_point(target, self.ext.position)
        hits = sum(
            np.allclose(np.array(oracle_gaze(scene, self.ext, self.intr, command, rng)), expected) for _ in range(1000)
        )
        assert abs(hits / 1000 - GazeConfig().side_bias) <= 0.05
        assert hits / 1000 >= 0.7

    def test_distractors_never_fixated(self):
        d = Landmark((10.0, 1.0, 1.5), 0.8, (0.3, 0.6, 0.9), "distractor")
        scene = straight_scene([d])
        rng = np.random.default_rng(1)
        for cmd in HighLevelCommand:
            for _ in range(50):
                g = oracle_gaze(scene, self.ext, self.intr, cmd, rng, waiting=True)
                assert distance_to_polyline(np.array(g), scene.path.vertices) < 1e-9


class TestEpisode:
    def test_deterministic(self):
        scene = gen_scene(4, SceneConfig.for_frames(120))
        cfg = EpisodeConfig(frames=120)
        a, b = gen_episode(scene, 9, cfg), gen_episode(scene, 9, cfg)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.controls, b.controls)
        assert a.gaze == b.gaze and a.commands == b.commands and a.labels == b.labels
        assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a.extrinsics, b.extrinsics))

    def test_sequences_aligned(self, corpus):
        _, ep = corpus[0]
        n = len(ep)
        assert n == 500 and ep.framerate == 25.0
        assert len(ep.images) == len(ep.gaze) == len(ep.controls) == len(ep.commands) == len(ep.labels) == n
        assert set(ep.labels) <= {"driving", "traffic"}
        assert [g.frame_index for g in ep.gaze] == list(range(n))

    def test_gaze_on_landmark_surface_or_path(self, corpus):
        for seed in (0, 1, 2):
            scene, ep = corpus[seed]
            for g, ext in zip(ep.gaze, ep.extrinsics):
                p = np.array(g.point)
                on_surface = min(abs(np.linalg.norm(p - np.array(lm.center)) - lm.radius) for lm in scene.landmarks if lm.kind != "distractor")
                on_path = distance_to_polyline(p, scene.path.vertices)
                assert min(on_surface, on_path) < 1e-6

    def test_out_of_view_fraction_below_five_percent(self, corpus):
        total = out = 0
        for scene, ep in corpus.values():
            for g, ext in zip(ep.gaze, ep.extrinsics):
                if not g.valid:
                    continue
                total += 1
                out += forward_project(g.point, ext, ep.intrinsics).status is not ProjectionStatus.IN_FRAME
        assert out / total < 0.05

    def test_zero_noise_controls_replay_oracle(self):
        cfg = EpisodeConfig(frames=300, noise_prob=0.0)
        scene = gen_scene(6, SceneConfig.for_frames(300))
        ep = gen_episode(scene, 6, cfg)
        for t in range(len(ep)):
            pos, heading = pose_of(ep.extrinsics[t], cfg.camera_height)
            replay = oracle_control(scene.path, pos, heading, ep.controls[t, 3], ep.progress[t], ep.target_speed[t], cfg.controller)
            np.testing.assert_allclose(replay, ep.controls[t], atol=1e-9)

    def test_noise_moves_trajectory_not_recorded_controls(self):
        scene = gen_scene(6, SceneConfig.for_frames(300))
        noisy = gen_episode(scene, 6, EpisodeConfig(frames=300, noise_prob=0.2))
        # recorded controls are still the expert's response to each recorded pose
        for t in range(len(noisy)):
            pos, heading = pose_of(noisy.extrinsics[t], 1.5)
            replay = oracle_control(scene.path, pos, heading, noisy.controls[t, 3], noisy.progress[t], noisy.target_speed[t], EpisodeConfig().controller)
            np.testing.assert_allclose(replay, noisy.controls[t], atol=1e-9)
        clean = gen_episode(scene, 6, EpisodeConfig(frames=300, noise_prob=0.0))
        assert not np.allclose(clean.extrinsics[-1].position, noisy.extrinsics[-1].position)

    def test_traffic_frames_are_stationary(self, corpus):
        n_traffic = 0
        for _, ep in corpus.values():
            for label, c in zip(ep.labels, ep.controls):
                if label == "traffic":
                    n_traffic += 1
                    assert c[3] < 0.1
        assert n_traffic > 0

    def test_traffic_fraction_near_target(self, corpus):
        labels = [lab for _, ep in corpus.values() for lab in ep.labels]
        assert abs(labels.count("traffic") / len(labels) - EpisodeConfig().traffic_fraction) < 0.05

    def test_hard_mask_keeps_relevant_landmark_pixels(self, corpus):
        checked = 0
        for seed in (0, 1, 2, 3):
            scene, ep = corpus[seed]
            for t in range(0, len(ep), 5):
                k = int(ep.relevant[t])
                if k < 0:
                    continue
                disc = disc_of(scene.landmarks[k], ep.extrinsics[t], ep.intrinsics)
                if disc is None:
                    continue
                x, y, rho, _ = disc
                pixels = disc_coverage_oracle(x, y, rho, ep.intrinsics.width, ep.intrinsics.height)
                if not pixels.any():
                    continue
                amap = build_attention_map(window_fixations(ep.gaze, t), ep.extrinsics[t], ep.intrinsics)
                if amap.empty:
                    continue
                masked = hard_mask(ep.images[t], amap)
                weights = peak_normalize(amap)
                assert np.all(weights[pixels] > 0)
                assert np.all(masked[pixels].max(axis=-1) > 0)
                checked += 1
        assert checked > 20
