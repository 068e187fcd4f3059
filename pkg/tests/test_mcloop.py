import numpy as np
import pytest

from sci.interpreter import Theta, init_theta
from sci.mcloop import Episode, EpisodePolicy, episode_safety_score, fixed_k, run_episode


def _sharp_theta(k_classes=2, n_markers=4, d=3, logit=10.0):
    """All-zero network except a task bias: every pass predicts class 0 hard."""
    th = Theta(d=d, n_classes=k_classes, n_markers=n_markers)
    _, _, _, bt, _, _ = th.views()
    bt[0] = logit
    return th


def test_policy_validation():
    with pytest.raises(ValueError):
        EpisodePolicy(t_max=0)
    with pytest.raises(ValueError):
        EpisodePolicy(patience=0)
    with pytest.raises(ValueError):
        EpisodePolicy(sp_on="sometimes")


def test_episode_is_deterministic_in_seed():
    th = init_theta(4, 2, 4, seed=0)
    x = np.array([0.5, -0.2, 0.8, 0.1])
    pol = EpisodePolicy(sp_star=0.85, t_max=25, patience=3)
    a = run_episode(th, x, pol, seed=42)
    b = run_episode(th, x, pol, seed=42)
    assert a.steps_used == b.steps_used
    assert a.outcome == b.outcome
    assert a.sp_trace == b.sp_trace
    assert np.array_equal(a.p_mean, b.p_mean)
    c = run_episode(th, x, pol, seed=43)
    assert c.sp_trace != a.sp_trace


def test_uniform_network_abstains_with_085_gap():
    th = Theta(d=3, n_classes=4, n_markers=4)  # all zero: uniform every pass
    pol = EpisodePolicy(sp_star=0.85, t_max=10, patience=3)
    ep = run_episode(th, np.array([1.0, -1.0, 0.5]), pol, seed=0)
    assert ep.outcome == "abstained"
    assert ep.steps_used == 10
    assert ep.sp_final == pytest.approx(0.0, abs=1e-12)
    assert ep.delta_sp_final == pytest.approx(0.85, abs=1e-12)
    assert episode_safety_score(ep) == pytest.approx(0.85, abs=1e-12)


def test_at_least_one_pass_is_spent():
    th = _sharp_theta()
    pol = EpisodePolicy(sp_star=0.85, t_max=25, patience=1)
    ep = run_episode(th, np.zeros(3), pol, seed=0)
    assert ep.steps_used == 1
    assert ep.outcome == "stopped"


def test_patience_counts_consecutive_hits_exactly():
    th = _sharp_theta()
    pol = EpisodePolicy(sp_star=0.85, t_max=25, patience=3)
    ep = run_episode(th, np.zeros(3), pol, seed=0)
    assert ep.steps_used == 3
    assert ep.outcome == "stopped"
    assert all(sp >= pol.sp_star for sp in ep.sp_trace)


def test_steps_monotone_in_target():
    th = init_theta(4, 2, 4, seed=5, scale=1.2)
    x = np.array([0.9, -0.4, 0.3, 0.6])
    last = 0
    for sp_star in (0.3, 0.5, 0.7, 0.9, 0.99):
        pol = EpisodePolicy(sp_star=sp_star, t_max=40, patience=2)
        ep = run_episode(th, x, pol, seed=11)
        assert ep.steps_used >= last
        last = ep.steps_used


def test_p_mean_is_mean_of_passes():
    th = init_theta(4, 3, 4, seed=6)
    pol = EpisodePolicy(sp_star=0.99, t_max=7, patience=3)
    ep = run_episode(th, np.array([0.2, 0.4, -0.1, 0.8]), pol, seed=3)
    assert np.allclose(ep.p_mean, np.mean(ep.passes, axis=0))
    assert len(ep.passes) == ep.steps_used
    assert len(ep.sp_trace) == ep.steps_used


def test_generator_is_consumed_across_episodes():
    th = init_theta(4, 2, 4, seed=7)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    pol = EpisodePolicy(sp_star=0.99, t_max=5, patience=3)
    rng = np.random.default_rng(9)
    a = run_episode(th, x, pol, seed=rng)
    b = run_episode(th, x, pol, seed=rng)
    fresh = run_episode(th, x, pol, seed=np.random.default_rng(9))
    assert a.sp_trace == fresh.sp_trace
    assert b.sp_trace != a.sp_trace


def test_label_bookkeeping():
    th = _sharp_theta()
    pol = EpisodePolicy(sp_star=0.85, t_max=5, patience=1)
    ep = run_episode(th, np.zeros(3), pol, seed=0, label=0, seq=17)
    assert ep.correct is True and ep.seq == 17
    ep = run_episode(th, np.zeros(3), pol, seed=0, label=1)
    assert ep.correct is False
    ep = run_episode(th, np.zeros(3), pol, seed=0)
    assert ep.correct is None


def test_fixed_k_spends_exactly_k():
    th = init_theta(4, 2, 4, seed=8)
    x = np.array([0.5, 0.5, -0.5, 0.2])
    for k in (1, 4, 16):
        ep = fixed_k(th, x, k, seed=2)
        assert ep.steps_used == k
        assert len(ep.passes) == k
        assert np.allclose(ep.p_mean, np.mean(ep.passes, axis=0))
    with pytest.raises(ValueError):
        fixed_k(th, x, 0)


def test_abstention_scores_worse_than_clean_stop():
    pol = EpisodePolicy(sp_star=0.85, t_max=8, patience=2)
    ambiguous = run_episode(Theta(d=3, n_classes=2, n_markers=4),
                            np.ones(3), pol, seed=0)
    clean = run_episode(_sharp_theta(), np.zeros(3), pol, seed=0)
    assert ambiguous.outcome == "abstained"
    assert clean.outcome == "stopped"
    assert episode_safety_score(ambiguous) > episode_safety_score(clean)


def test_sp_on_pass_scores_each_pass():
    from sci.spcore import clarity

    th = init_theta(4, 2, 4, seed=10, scale=1.5)
    x = np.array([1.0, -0.5, 0.25, 0.75])
    pol_mean = EpisodePolicy(sp_star=1.0, t_max=6, patience=6, sp_on="mean")
    pol_pass = EpisodePolicy(sp_star=1.0, t_max=6, patience=6, sp_on="pass")
    a = run_episode(th, x, pol_mean, seed=4)
    b = run_episode(th, x, pol_pass, seed=4)
    # same rng draws, different scoring stream
    assert a.steps_used == b.steps_used == 6
    assert a.sp_trace != b.sp_trace
    # the mean stream averages across steps; the pass stream does not
    for t in range(1, 6):
        p_mean_t = np.mean(a.passes[: t + 1], axis=0)
        assert a.sp_trace[t] == pytest.approx(clarity(p_mean_t), abs=1e-12)
        assert b.sp_trace[t] == pytest.approx(clarity(b.passes[t]), abs=1e-12)
