import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgevo.environment import (
    EnvConfig,
    EnvError,
    Terrain,
    VecEnv,
    batch_step,
    make_terrain,
    next_episode,
    proportional_controller,
    reset,
    step,
    terrain_score,
    update_curriculum,
    zero_policy,
)

CFG = EnvConfig()


def _simulate_straight(drag, gain, n, dt=0.1, v_max=2.0):
    # independent scalar oracle of the point-mass update for a constant unit push along x
    x = v = 0.0
    for _ in range(n):
        v = min((1 - drag) * v + gain * dt, v_max)
        x += v * dt
    return x


class TestTerrain:
    def test_presets(self):
        assert make_terrain("flat") == Terrain("flat", 0.10, 1.0, 0.0)
        assert make_terrain("ice") == Terrain("ice", 0.01, 1.0, 0.0)
        mud = make_terrain("mud")
        assert mud.drag > make_terrain("flat").drag
        assert mud.action_gain < 1.0

    def test_unknown_kind(self):
        with pytest.raises(EnvError):
            make_terrain("lava")

    @pytest.mark.parametrize("drag,gain", [(1.0, 1.0), (-0.1, 1.0), (0.1, 0.0)])
    def test_invalid_parameters(self, drag, gain):
        with pytest.raises(EnvError):
            Terrain("x", drag, gain)

    @pytest.mark.parametrize("kind", ["flat", "ice", "mud"])
    def test_calibration_controller_fetches_three_per_episode(self, kind):
        # presets are calibrated so the scripted PD controller fetches >= 3 treats per episode
        act = proportional_controller()
        for seed in range(5):
            env = VecEnv([kind], seed, CFG)
            obs = env.observe()
            fetched = 0
            for _ in range(CFG.episode_steps):
                obs, _, _, f = env.step(act(obs))
                fetched += int(f[0])
            assert fetched >= 3, (kind, seed, fetched)


class TestReset:
    def test_deterministic(self):
        a, oa = reset(make_terrain("flat"), 1.0, 7)
        b, ob = reset(make_terrain("flat"), 1.0, 7)
        np.testing.assert_array_equal(a.treat_pos, b.treat_pos)
        np.testing.assert_array_equal(oa, ob)

    def test_treat_on_circle(self):
        for seed in range(20):
            s, _ = reset(make_terrain("ice"), 1.0, seed)
            assert abs(np.linalg.norm(s.treat_pos) - 1.0) < 1e-9
            np.testing.assert_array_equal(s.agent_pos, 0.0)
            np.testing.assert_array_equal(s.agent_vel, 0.0)

    def test_radius_below_min(self):
        with pytest.raises(EnvError):
            reset(make_terrain("flat"), 0.05, 0)

    def test_observation_layout(self):
        s, obs = reset(make_terrain("ice"), 2.0, 3)
        assert obs.shape == (5 + len(CFG.terrain_kinds),)
        np.testing.assert_allclose(obs[:2], s.treat_pos - s.agent_pos)
        onehot = obs[4:-1]
        assert onehot.sum() == 1.0 and onehot[CFG.terrain_index("ice")] == 1.0
        assert obs[-1] == 2.0


class TestStep:
    def test_zero_action_fixed_point(self):
        s, _ = reset(make_terrain("flat"), 1.0, 0)
        s2, r = step(s, [0.0, 0.0])
        np.testing.assert_array_equal(s2.agent_pos, 0.0)
        assert r.reward == 0.0 and not r.fetched

    def test_fetch_respawns_at_larger_radius(self):
        cfg = EnvConfig(fetch_eps=0.5)
        s, _ = reset(make_terrain("flat"), 2.0, 1, cfg)
        s.agent_pos = s.treat_pos - np.array([0.1, 0.0])
        s2, r = step(s, [0.0, 0.0])
        assert r.fetched and r.reward == 1.0 and not r.done
        assert s2.spawn_radius == 2.5
        assert abs(np.linalg.norm(s2.treat_pos) - 2.5) < 1e-9

    def test_step_is_functional(self):
        s, _ = reset(make_terrain("flat"), 1.0, 0)
        before = s.agent_pos.copy()
        step(s, [1.0, 1.0])
        np.testing.assert_array_equal(s.agent_pos, before)
        assert s.step_count == 0

    def test_action_is_clamped(self):
        s, _ = reset(make_terrain("flat"), 1.0, 0)
        a, _ = step(s, [5.0, -7.0])
        b, _ = step(s, [1.0, -1.0])
        np.testing.assert_array_equal(a.agent_vel, b.agent_vel)

    def test_dynamics_update(self):
        t = make_terrain("flat")
        s, _ = reset(t, 1.0, 0)
        s.agent_vel = np.array([0.5, -0.2])
        s2, _ = step(s, [0.3, 0.4])
        v = 0.9 * np.array([0.5, -0.2]) + 1.0 * np.array([0.3, 0.4]) * 0.1
        np.testing.assert_allclose(s2.agent_vel, v, rtol=0, atol=1e-15)
        np.testing.assert_allclose(s2.agent_pos, v * 0.1, rtol=0, atol=1e-15)

    def test_speed_clamp(self):
        s, _ = reset(make_terrain("ice"), 1.0, 0)
        for _ in range(200):
            s, _ = step(s, [1.0, 1.0]) if not s.done else (s, None)
        assert np.linalg.norm(s.agent_vel) <= CFG.v_max + 1e-12

    def test_ice_travels_farther_than_flat(self):
        far = {}
        for kind in ("flat", "ice"):
            s, _ = reset(make_terrain(kind), 50.0, 0)  # treat far away: no fetch
            for _ in range(50):
                s, _ = step(s, [1.0, 0.0])
            far[kind] = s.agent_pos[0]
            t = make_terrain(kind)
            assert far[kind] == pytest.approx(_simulate_straight(t.drag, t.action_gain, 50), abs=1e-12)
        assert far["ice"] > far["flat"]

    def test_episode_ends_and_done_state_rejects_step(self):
        cfg = EnvConfig(episode_steps=3)
        s, _ = reset(make_terrain("flat"), 5.0, 0, cfg)
        results = []
        for _ in range(3):
            s, r = step(s, [0.0, 0.0])
            results.append(r.done)
        assert results == [False, False, True]
        with pytest.raises(EnvError):
            step(s, [0.0, 0.0])

    def test_next_episode_applies_curriculum(self):
        cfg = EnvConfig(episode_steps=2)
        s, _ = reset(make_terrain("flat"), 2.0, 0, cfg)
        s, _ = step(s, [0, 0])
        s, _ = step(s, [0, 0])
        s2, obs = next_episode(s)
        assert s2.spawn_radius == 1.5 and s2.episode_count == 1 and s2.step_count == 0
        assert obs[-1] == 1.5

    def test_batch_step_matches_step(self):
        states = [reset(make_terrain(k), 1.0, i)[0] for i, k in enumerate(["flat", "ice", "mud"])]
        acts = [[0.2, -0.5], [1.0, 1.0], [-0.3, 0.9]]
        for (bs, br), s, a in zip(batch_step(states, acts), states, acts):
            ss, sr = step(s, a)
            np.testing.assert_array_equal(bs.agent_pos, ss.agent_pos)
            np.testing.assert_array_equal(br.obs, sr.obs)
            assert (br.reward, br.done, br.fetched) == (sr.reward, sr.done, sr.fetched)


class TestCurriculum:
    def test_update_examples(self):
        assert update_curriculum(2.0, True, 0.5) == 2.5
        assert update_curriculum(2.0, False, 0.5) == 1.5
        assert update_curriculum(0.6, False, 0.5, r_min=0.5) == 0.5

    def test_scripted_agent_sequence(self):
        # scripted agent fetches in episodes 1 and 2, then stops: radius goes up by delta twice then decays to r_min
        r, seen = 1.0, []
        for fetched in [True, True, False, False, False, False, False]:
            r = update_curriculum(r, fetched, 0.5, 0.5)
            seen.append(r)
        assert seen == [1.5, 2.0, 1.5, 1.0, 0.5, 0.5, 0.5]

    @given(r=st.floats(0.5 + 1e-6, 100.0), delta=st.floats(0.01, 0.4))
    def test_symmetric_response(self, r, delta):
        r = r + delta + 0.5  # keep r - delta above r_min
        assert update_curriculum(r, True, delta, 0.5) - r == pytest.approx(delta, abs=1e-9)
        assert r - update_curriculum(r, False, delta, 0.5) == pytest.approx(delta, abs=1e-9)

    @settings(max_examples=200)
    @given(st.lists(st.booleans(), min_size=1, max_size=500))
    def test_radius_floor(self, outcomes):
        r = 1.0
        for f in outcomes:
            r = update_curriculum(r, f, 0.5, 0.5)
            assert r >= 0.5


class TestVecEnv:
    def test_matches_scalar_path(self):
        cfg = EnvConfig(episode_steps=25)
        kinds = ["flat", "ice", "mud", "flat"]
        env = VecEnv(kinds, seed=11, config=cfg)
        from pgevo.environment import env_rng

        states = [reset(make_terrain(k), cfg.r0, env_rng(11, i), cfg)[0] for i, k in enumerate(kinds)]
        act = proportional_controller()
        obs = env.observe()
        for _ in range(120):
            a = act(obs)
            obs, rew, done, fetched = env.step(a)
            for i in range(len(kinds)):
                states[i], res = step(states[i], a[i])
                assert res.reward == rew[i] and res.fetched == fetched[i]
                if res.done:
                    states[i], _ = next_episode(states[i])
                np.testing.assert_array_equal(states[i].agent_pos, env.pos[i])
                np.testing.assert_array_equal(states[i].treat_pos, env.treat[i])
                assert states[i].spawn_radius == env.radius[i]

    def test_reward_equals_fetch(self):
        env = VecEnv(["flat", "ice"], seed=0)
        act = proportional_controller()
        obs = env.observe()
        for _ in range(300):
            obs, rew, _, fetched = env.step(act(obs))
            np.testing.assert_array_equal(rew, fetched.astype(float))
            assert set(np.unique(rew)) <= {0.0, 1.0}

    def test_energy_dissipates_without_action(self):
        env = VecEnv(["flat", "ice", "mud"], seed=0, spawn_radius=40.0)
        env.vel = np.array([[1.0, 0.5], [-1.5, 0.2], [0.3, -0.3]])
        speed = np.linalg.norm(env.vel, axis=1)
        for _ in range(50):
            env.step(np.zeros((3, 2)))
            new = np.linalg.norm(env.vel, axis=1)
            assert np.all(new <= speed)
            speed = new

    def test_radius_below_min(self):
        with pytest.raises(EnvError):
            VecEnv(["flat"], 0, spawn_radius=0.1)


class TestTerrainScore:
    def test_zero_policy_scores_r_min(self):
        for kind in ("flat", "ice", "mud"):
            assert terrain_score(zero_policy, kind, CFG, seed=0) == CFG.r_min

    def test_controller_beats_three_r_min(self):
        assert terrain_score(proportional_controller(), "flat", CFG, seed=0) > 3 * CFG.r_min

    def test_deterministic(self):
        a = terrain_score(proportional_controller(), "ice", CFG, seed=4)
        b = terrain_score(proportional_controller(), "ice", CFG, seed=4)
        assert a == b

    def test_trace_csv(self):
        tr = terrain_score(zero_policy, "flat", CFG, seed=0, trace=True)
        lines = tr.to_csv().splitlines()
        assert lines[0] == "episode,spawn_radius,fetches"
        # zero policy never improves: the loop stops after k_sat stale episodes
        assert len(lines) - 1 == CFG.k_sat + 1

    def test_config_roundtrip(self):
        cfg = EnvConfig(delta=0.25, terrain_kinds=("flat", "ice"))
        assert EnvConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(EnvError):
            EnvConfig.from_dict({"bogus": 1})
