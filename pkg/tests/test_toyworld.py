import dataclasses

import numpy as np
import pytest

from amlbench import toyworld as tw
from amlbench.tensor import RngStream


class TestReset:
    def test_deterministic(self):
        a, b = tw.reset(7), tw.reset(7)
        assert a == b

    def test_seeds_differ(self):
        assert tw.reset(1) != tw.reset(2)

    def test_objects_separated_and_in_bounds(self):
        for seed in range(200):
            state = tw.reset(seed)
            for o in state.objects:
                assert 0.08 <= o.x <= 0.92 and 0.08 <= o.y <= 0.92
            for i, a in enumerate(state.objects):
                for b in state.objects[i + 1 :]:
                    assert np.hypot(a.x - b.x, a.y - b.y) >= tw.LayoutParams().min_separation

    def test_initial_state_open_and_free(self):
        state = tw.reset(3)
        assert not state.gripper_closed
        assert not any(o.held for o in state.objects)
        assert state.step_count == 0

    def test_impossible_layout_raises(self):
        with pytest.raises(tw.LayoutError):
            tw.reset(0, tw.LayoutParams(n_objects=4, min_separation=5.0))


class TestStep:
    def test_motion_clipped_to_max_step(self):
        state = tw.reset(0)
        nxt = tw.step(state, np.array([1.0, -1.0, -1.0]))
        assert np.isclose(nxt.gripper[0] - state.gripper[0], tw.MAX_STEP)
        assert np.isclose(nxt.gripper[1] - state.gripper[1], -tw.MAX_STEP)

    def test_gripper_stays_in_unit_square(self):
        state = tw.reset(0)
        for _ in range(100):
            state = tw.step(state, np.array([-1.0, -1.0, -1.0]))
        assert state.gripper == (0.0, 0.0)

    def test_close_near_object_grasps(self):
        state = tw.reset(0)
        obj = state.target()
        state = dataclasses.replace(state, gripper=(obj.x, obj.y))
        nxt = tw.step(state, np.array([0.0, 0.0, 1.0]))
        assert nxt.gripper_closed and nxt.target().held

    def test_close_far_from_objects_grasps_nothing(self):
        state = tw.reset(0)
        state = dataclasses.replace(state, gripper=(0.5, 0.02))
        nxt = tw.step(state, np.array([0.0, 0.0, 1.0]))
        assert nxt.gripper_closed and not any(o.held for o in nxt.objects)

    def test_held_object_tracks_gripper(self):
        state = tw.reset(0)
        obj = state.target()
        state = dataclasses.replace(state, gripper=(obj.x, obj.y))
        state = tw.step(state, np.array([0.0, 0.0, 1.0]))
        nxt = tw.step(state, np.array([0.03, -0.02, 1.0]))
        assert np.isclose(nxt.target().x, nxt.gripper[0])
        assert np.isclose(nxt.target().y, nxt.gripper[1])

    def test_open_releases(self):
        state = tw.reset(0)
        obj = state.target()
        state = dataclasses.replace(state, gripper=(obj.x, obj.y))
        state = tw.step(state, np.array([0.0, 0.0, 1.0]))
        nxt = tw.step(state, np.array([0.0, 0.0, -1.0]))
        assert not nxt.gripper_closed and not any(o.held for o in nxt.objects)

    def test_step_count_increments(self):
        state = tw.reset(0)
        assert tw.step(state, np.zeros(3)).step_count == 1


class TestSuccessAndStateVector:
    def test_success_requires_release_and_proximity(self):
        state = tw.reset(0)
        goal = state.goal
        near = dataclasses.replace(
            state.objects[goal.target_id], x=goal.x + 0.01, y=goal.y, held=False
        )
        objs = list(state.objects)
        objs[goal.target_id] = near
        assert tw.evaluate_success(dataclasses.replace(state, objects=tuple(objs)))
        objs[goal.target_id] = dataclasses.replace(near, held=True)
        assert not tw.evaluate_success(dataclasses.replace(state, objects=tuple(objs)))
        objs[goal.target_id] = dataclasses.replace(near, x=goal.x + 0.1, held=False)
        assert not tw.evaluate_success(dataclasses.replace(state, objects=tuple(objs)))

    def test_state_vector_layout(self):
        state = tw.reset(5)
        q = tw.state_vector(state)
        obj = state.target()
        expected = [state.gripper[0], state.gripper[1], 0.0, 0.0, obj.x, obj.y,
                    state.goal.x, state.goal.y]
        assert q.shape == (tw.Q_DIM,)
        assert np.allclose(q, expected)


class TestExpert:
    def test_expert_success_rate(self):
        fails = []
        for seed in range(1000):
            state = tw.reset(seed)
            for _ in range(tw.MAX_EPISODE_STEPS):
                if tw.evaluate_success(state):
                    break
                state = tw.step(state, tw.expert_action(state))
            if not tw.evaluate_success(state):
                fails.append(seed)
        assert len(fails) <= 10, f"expert failed on seeds {fails[:20]}"

    def test_actions_within_limits(self):
        state = tw.reset(0)
        for _ in range(60):
            a = tw.expert_action(state)
            assert np.abs(a[:2]).max() <= tw.MAX_STEP + 1e-12
            assert a[2] in (-1.0, 1.0)
            state = tw.step(state, a)

    def test_scripted_expert_matches_forward_simulation(self):
        state = tw.reset(4)
        chunk = tw.scripted_expert(state, 12)
        assert chunk.shape == (12, tw.ACTION_DIM)
        sim = state
        for i in range(12):
            assert np.array_equal(chunk[i], tw.expert_action(sim))
            sim = tw.step(sim, chunk[i])


class TestRender:
    def test_shapes_and_truth_channel(self):
        out = tw.render_views(tw.reset(0), rng=RngStream(0, 1))
        assert out.mono.shape == (tw.N_TOKENS, tw.C_MONO)
        assert out.left.shape == (tw.N_TOKENS, tw.C_VIEW)
        assert out.right.shape == (tw.N_TOKENS, tw.C_VIEW)
        assert out.depth_truth.shape == (tw.N_TOKENS,)
        assert np.all(out.depth_truth > 0) and np.all(out.depth_truth <= 1)

    def test_deterministic_given_rng(self):
        state = tw.reset(1)
        a = tw.render_views(state, rng=RngStream(3, 5))
        b = tw.render_views(state, rng=RngStream(3, 5))
        assert np.array_equal(a.mono, b.mono) and np.array_equal(a.left, b.left)

    def test_depth_noise_only_on_mono_depth(self):
        state = tw.reset(1)
        clean = tw.render_views(state, rng=RngStream(0, 0), depth_noise_std=0.0)
        noisy = tw.render_views(state, rng=RngStream(0, 0), depth_noise_std=0.25)
        assert np.array_equal(clean.depth_truth, noisy.depth_truth)
        assert np.array_equal(clean.mono[:, [0, 2, 3, 4]], noisy.mono[:, [0, 2, 3, 4]])
        assert not np.array_equal(clean.mono[:, 1], noisy.mono[:, 1])
        assert np.array_equal(clean.left, noisy.left)

    def test_side_views_registered_to_main_frame(self):
        # with zero noise the registered, overlap-cropped side views agree
        # with each other and (on interior columns) with the main view
        state = tw.reset(2)
        out = tw.render_views(state, rng=RngStream(0, 0), depth_noise_std=0.0)
        assert np.array_equal(out.left, out.right)
        assert np.array_equal(out.mono[:, :4].shape, out.left.shape)
        mono = out.mono[:, :4].reshape(tw.GRID, tw.GRID, 4)
        left = out.left.reshape(tw.GRID, tw.GRID, 4)
        assert np.allclose(left[:, 1:-1], mono[:, 1:-1])

    def test_occlusion_replaces_exactly_masked_tokens(self):
        state = tw.reset(2)
        occ = tw.OcclusionConfig(side="left")
        clean = tw.render_views(state, rng=RngStream(7, 0), depth_noise_std=0.0)
        out = tw.render_views(state, occ, RngStream(7, 0), depth_noise_std=0.0)
        mask = occ.corrupted_mask()
        assert np.array_equal(out.corrupted_left, mask)
        assert not out.corrupted_right.any()
        assert np.array_equal(out.left[~mask], clean.left[~mask])
        assert not np.array_equal(out.left[mask], clean.left[mask])
        assert np.array_equal(out.right, clean.right)

    def test_corrupted_mask_is_column_box(self):
        mask = tw.OcclusionConfig(side="right", col_lo=1, col_hi=3).corrupted_mask()
        grid = mask.reshape(tw.GRID, tw.GRID)
        expected = np.zeros((tw.GRID, tw.GRID), dtype=bool)
        expected[:, 1:3] = True
        assert np.array_equal(grid, expected)
        assert not tw.OcclusionConfig(side="none").corrupted_mask().any()


class TestPerturbation:
    def _render(self):
        return tw.render_views(tw.reset(3), rng=RngStream(1, 1), depth_noise_std=0.0)

    def test_none_layout_and_zero_magnitude_are_identity(self):
        r = self._render()
        rng = RngStream(0, 0)
        assert tw.apply_perturbation(r, tw.PerturbationSpec("none", 0.0), rng) is r
        assert tw.apply_perturbation(r, tw.PerturbationSpec("layout", 0.3), rng) is r
        assert tw.apply_perturbation(r, tw.PerturbationSpec("noise", 0.0), rng) is r

    def test_camera_shift_oracle(self):
        r = self._render()
        out = tw.apply_perturbation(r, tw.PerturbationSpec("camera", 1.0), RngStream(0, 0))
        grid = r.mono.reshape(tw.GRID, tw.GRID, tw.C_MONO)
        shifted = out.mono.reshape(tw.GRID, tw.GRID, tw.C_MONO)
        for j in range(tw.GRID):
            src = max(j - 1, 0)
            assert np.array_equal(shifted[:, j], grid[:, src])
        assert np.array_equal(out.depth_truth, r.depth_truth)

    def test_noise_statistics_oracle(self):
        r = self._render()
        mag = 0.3
        diffs = []
        for i in range(40):
            out = tw.apply_perturbation(r, tw.PerturbationSpec("noise", mag), RngStream(50 + i, 0))
            diffs.append((out.mono - r.mono).reshape(-1))
        diffs = np.concatenate(diffs)
        assert abs(diffs.mean()) < 0.01
        assert abs(diffs.std() - mag) < 0.01

    def test_light_scales_tokens_only(self):
        r = self._render()
        out = tw.apply_perturbation(r, tw.PerturbationSpec("light", 0.5), RngStream(0, 0))
        assert np.allclose(out.mono, 1.5 * r.mono)
        assert np.allclose(out.left, 1.5 * r.left)
        assert np.array_equal(out.depth_truth, r.depth_truth)

    def test_unknown_kind_and_negative_magnitude(self):
        r = self._render()
        with pytest.raises(ValueError):
            tw.apply_perturbation(r, tw.PerturbationSpec("fog", 0.1), RngStream(0, 0))
        with pytest.raises(ValueError):
            tw.apply_perturbation(r, tw.PerturbationSpec("noise", -0.1), RngStream(0, 0))


class TestDataset:
    def test_rollout_is_successful_and_padded(self):
        ep = tw.rollout_expert(11, h=8)
        assert ep.success
        assert ep.actions.shape[0] == ep.states_q.shape[0]
        assert ep.actions.shape[1] == tw.ACTION_DIM

    def test_windows_count_and_content(self):
        ds = tw.generate_dataset(3, 5, 0)
        qs, chunks, eps, steps = ds.windows()
        expected = sum(ep.actions.shape[0] - 5 + 1 for ep in ds.episodes)
        assert len(qs) == len(chunks) == len(eps) == len(steps) == expected
        for i in (0, len(qs) // 2, len(qs) - 1):
            ep = ds.episodes[eps[i]]
            t = steps[i]
            assert np.array_equal(qs[i], ep.states_q[t])
            assert np.array_equal(chunks[i], ep.actions[t : t + 5])

    def test_normalize_roundtrip_and_stats(self):
        ds = tw.generate_dataset(4, 6, 1)
        raw = np.concatenate([ep.actions for ep in ds.episodes])
        normed = ds.normalize(raw)
        assert np.max(np.abs(ds.denormalize(normed) - raw)) < 1e-12
        assert np.max(np.abs(normed.mean(axis=0))) < 1e-10
        assert np.all(ds.action_std >= 1e-6)

    def test_generation_deterministic(self):
        a = tw.generate_dataset(2, 4, 3)
        b = tw.generate_dataset(2, 4, 3)
        assert np.array_equal(a.episodes[1].actions, b.episodes[1].actions)
        assert np.array_equal(a.action_mean, b.action_mean)

    def test_views_dataset_has_renders(self):
        ds = tw.generate_dataset(1, 4, 0, with_views=True)
        ep = ds.episodes[0]
        t = ep.actions.shape[0]
        assert ep.mono.shape == (t, tw.N_TOKENS, tw.C_MONO)
        assert ep.left.shape == (t, tw.N_TOKENS, tw.C_VIEW)
        assert ep.depth_truth.shape == (t, tw.N_TOKENS)


class TestDatasetFile:
    def test_roundtrip(self, tmp_path):
        ds = tw.generate_dataset(2, 4, 5, with_views=True,
                                 occlusion=tw.OcclusionConfig(side="left", noise_std=0.7))
        path = tmp_path / "ds.toyw"
        tw.save_dataset(ds, path)
        back = tw.load_dataset(path)
        assert back.h == ds.h and back.with_views and back.occlusion == ds.occlusion
        assert np.array_equal(back.action_mean, ds.action_mean)
        assert len(back.episodes) == 2
        for a, b in zip(ds.episodes, back.episodes):
            assert a.seed == b.seed and a.success == b.success
            for field in ("goal", "states_q", "actions", "mono", "left", "right", "depth_truth"):
                assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.toyw"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(tw.DatasetFormatError):
            tw.load_dataset(path)

    def test_wrong_version_rejected(self, tmp_path):
        ds = tw.generate_dataset(1, 3, 0)
        path = tmp_path / "v.toyw"
        tw.save_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(tw.DatasetFormatError):
            tw.load_dataset(path)
