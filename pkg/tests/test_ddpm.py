import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nesyad import ddpm
from nesyad import kb as kbm
from nesyad import signals as sg
from nesyad.autodiff import Tensor
from nesyad.ddpm import ScheduleError


# schedule & forward process ------------------------------------------------------

def test_two_step_schedule():
    s = ddpm.make_schedule(2, 0.1, 0.1)
    assert np.allclose(s.alpha_bar, [0.9, 0.81], atol=1e-15)


def test_default_schedule_is_pinned():
    s = ddpm.make_schedule()
    assert s.T == 100 and s.betas[0] == 1e-4 and s.betas[-1] == 0.06
    assert s.alpha_bar[-1] < 0.05
    assert s.alpha_bar[-1] == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.06, 100)), abs=0)


def _abar_T(T, lo, hi):
    prod = 1.0
    for i in range(T):
        prod *= 1.0 - (lo + (hi - lo) * i / (T - 1))
    return prod


def test_shallow_schedules_are_rejected_when_strict():
    # the classic (1e-4, 0.02) pair leaves about a third of the signal at T=100
    assert _abar_T(100, 1e-4, 0.02) == pytest.approx(0.3636, abs=1e-4)
    assert _abar_T(100, 1e-4, 0.05) == pytest.approx(0.0782, abs=1e-4)
    assert ddpm.make_schedule(100, 1e-4, 0.02).alpha_bar[-1] == pytest.approx(_abar_T(100, 1e-4, 0.02), abs=1e-12)
    for hi in (0.02, 0.05):
        with pytest.raises(ScheduleError):
            ddpm.make_schedule(100, 1e-4, hi, strict=True)
    assert ddpm.make_schedule(strict=True).alpha_bar[-1] == pytest.approx(_abar_T(100, 1e-4, 0.06), abs=1e-12)


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ScheduleError):
        ddpm.make_schedule(*args)


@given(st.integers(2, 300), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
@settings(max_examples=40)
def test_alpha_bar_strictly_decreasing(T, start, extra):
    end = min(start + extra, 0.9)
    try:
        s = ddpm.make_schedule(T, start, end, strict=True)
    except ScheduleError:
        return
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[-1] < 0.05


def test_forward_noise_hand_value():
    s = ddpm.NoiseSchedule(np.array([0.75]))
    assert ddpm.forward_noise(np.array([1.0]), 1, np.array([1.0]), s)[0] == pytest.approx(0.5 + math.sqrt(0.75))


def test_forward_noise_near_identity():
    s = ddpm.make_schedule(10, 1e-8, 0.9)
    x0 = np.array([0.3, -1.2])
    assert np.allclose(ddpm.forward_noise(x0, 1, np.ones(2), s), x0, atol=1e-3)


def test_forward_noise_level_out_of_range():
    s = ddpm.make_schedule()
    with pytest.raises(ScheduleError):
        ddpm.forward_noise(np.zeros(2), 0, np.zeros(2), s)


@pytest.mark.parametrize("t", [5, 50, 100])
def test_forward_moments_monte_carlo(t):
    s = ddpm.make_schedule()
    n = 100_000
    x0 = np.full(n, 0.7)
    x_t = ddpm.forward_noise(x0, t, np.random.default_rng(t).standard_normal(n), s)
    ab = s.abar(t)
    var = 1 - ab
    assert abs(x_t.mean() - math.sqrt(ab) * 0.7) < 3 * math.sqrt(var / n)
    # variance of the sample variance of a Gaussian: 2 var^2 / (n - 1)
    assert abs(x_t.var(ddof=1) - var) < 3 * math.sqrt(2 * var * var / (n - 1))


# oracle denoiser ----------------------------------------------------------------

class OracleNet:
    """Test double that returns the true noise for known clean inputs."""

    def __init__(self, x0, schedule):
        self.x0 = np.atleast_2d(x0)
        self.schedule = schedule

    def __call__(self, x_t, t):
        ab = self.schedule.alpha_bar[np.asarray(t) - 1]
        return Tensor((x_t - math.sqrt(ab) * self.x0) / math.sqrt(1 - ab))


@pytest.mark.parametrize("t", [1, 10, 50, 100])
def test_oracle_reconstruction_is_exact(t):
    s = ddpm.make_schedule()
    X = np.random.default_rng(0).standard_normal((4, 12))
    x0_hat = ddpm.reconstruct_batch(X, [0, 16, 32, 48], OracleNet(X, s), t, s, seed=3)
    assert np.max(np.abs(x0_hat - X)) < 1e-10


def test_estimate_x0_inverts_forward_noise():
    s = ddpm.make_schedule()
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal(8), rng.standard_normal(8)
    for t in (1, 37, 100):
        x_t = ddpm.forward_noise(x0, t, eps, s)
        assert np.max(np.abs(ddpm.estimate_x0(x_t, eps, t, s) - x0)) < 1e-10


def test_oracle_profile_of_mean_window_is_zero():
    s = ddpm.make_schedule()
    w = sg.Window(np.zeros((2, 6)), 0, ("a", "b"))
    errs = ddpm.profile_errors([w], OracleNet(np.zeros(12), s), s, ddpm.default_levels(100))
    assert np.all(np.abs(errs) < 1e-20)


def test_level_checks():
    s = ddpm.make_schedule()
    w = sg.Window(np.zeros((1, 4)), 0, ("a",))
    net = OracleNet(np.zeros(4), s)
    with pytest.raises(ScheduleError, match="distinct"):
        ddpm.profile_errors([w], net, s, [10, 10, 50])
    with pytest.raises(ScheduleError):
        ddpm.profile_errors([w], net, s, [0, 50])
    with pytest.raises(ScheduleError):
        ddpm.reconstruct(w, net, 101, s)


def test_default_levels():
    assert ddpm.default_levels(100) == [10, 25, 50, 75, 100]
    assert ddpm.default_levels(7) == [1, 2, 4, 6, 7]


# denoiser & training -------------------------------------------------------------

def test_net_output_shape_and_structure():
    net = ddpm.DenoiserNet(12, hidden=16, time_dim=8, seed=0)
    out = net(np.zeros((3, 12)), np.array([1, 5, 9]))
    assert out.shape == (3, 12)
    hidden = [k for k in net.state() if k.startswith("W") and k != "Wg"]
    assert len(hidden) == 4  # three tanh layers plus the output layer


def test_time_embedding():
    e = ddpm.time_embedding(np.array([0, 7]), 32)
    assert e.shape == (2, 32) and np.all(np.abs(e) <= 1)
    assert not np.allclose(e[0], e[1])


def _toy_windows(n=512, C=2, L=8, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(L)
    out = []
    for i in range(n):
        ph = rng.uniform(0, 2 * np.pi, size=(C, 1))
        out.append(sg.Window(np.sin(2 * np.pi * t / 8 + ph) + 0.05 * rng.standard_normal((C, L)), i * L,
                             tuple(f"c{k}" for k in range(C))))
    stats = sg.fit_normalizer(out)
    return sg.normalize_all(out, stats), stats


def test_initial_mse_is_about_one():
    X = np.random.default_rng(0).standard_normal((256, 16))
    wins = [sg.Window(x.reshape(2, 8), i, ("a", "b")) for i, x in enumerate(X)]
    net = ddpm.DenoiserNet(16, hidden=64, seed=0)
    trace = ddpm.train(wins, ddpm.make_schedule(), net, ddpm.TrainConfig(epochs=1, lr=1e-12))
    assert abs(trace.mse[0] - 1.0) < 0.2


@pytest.mark.slow
def test_long_training_halves_mse():
    wins, _ = _toy_windows()
    net = ddpm.DenoiserNet(16, hidden=64, seed=0)
    trace = ddpm.train(wins, ddpm.make_schedule(), net, ddpm.TrainConfig(epochs=500, batch_size=128))
    assert trace.mse[-1] < 0.5 * trace.mse[0]


def test_zero_lambda_matches_plain_training_bitwise():
    wins, stats = _toy_windows(64)
    kb = kbm.parse("axiom p: bound(c0, -0.5, 0.5);", ["c0", "c1"])
    runs = []
    for nesy in (None, ddpm.NesyTerm(kb, 0.0, stats)):
        net = ddpm.DenoiserNet(16, hidden=16, seed=2)
        trace = ddpm.train(wins, ddpm.make_schedule(), net, ddpm.TrainConfig(epochs=3, seed=5), nesy)
        runs.append((trace.loss, net.state()))
    assert runs[0][0] == runs[1][0]
    assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])


def test_semantic_term_is_reported():
    wins, stats = _toy_windows(64)
    kb = kbm.parse("axiom p: bound(c0, -0.5, 0.5);", ["c0", "c1"])
    net = ddpm.DenoiserNet(16, hidden=16, seed=2)
    trace = ddpm.train(wins, ddpm.make_schedule(), net, ddpm.TrainConfig(epochs=2), ddpm.NesyTerm(kb, 1.0, stats))
    assert all(s > 0 for s in trace.semantic)
    assert all(abs(l - m - s) < 1e-9 for l, m, s in zip(trace.loss, trace.mse, trace.semantic))


def test_training_errors():
    with pytest.raises(ValueError, match="empty"):
        ddpm.train([], ddpm.make_schedule(), ddpm.DenoiserNet(4, hidden=4))
    wins, stats = _toy_windows(8)
    kb = kbm.parse("", ["c0", "c1"])
    with pytest.raises(ValueError):
        ddpm.train(wins, ddpm.make_schedule(), ddpm.DenoiserNet(16, hidden=4), nesy=ddpm.NesyTerm(kb, -1.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_a_numeric_error():
    wins, _ = _toy_windows(16)
    net = ddpm.DenoiserNet(16, hidden=8, seed=0)
    from nesyad.autodiff import NonFiniteError
    with pytest.raises(NonFiniteError, match="epoch"):
        ddpm.train(wins, ddpm.make_schedule(), net, ddpm.TrainConfig(epochs=2, lr=1e300))


@pytest.fixture(scope="module")
def trained():
    wins, stats = _toy_windows(512)
    s = ddpm.make_schedule()
    net = ddpm.DenoiserNet(16, hidden=64, seed=0)
    ddpm.train(wins, s, net, ddpm.TrainConfig(epochs=150, batch_size=64, lr_final=1e-5))
    levels = ddpm.default_levels(100)
    errs = ddpm.profile_errors(wins, net, s, levels)
    return wins, net, s, ddpm.fit_profile_stats(errs, levels), errs


def test_minimal_level_reconstruction_is_near_exact(trained):
    wins, net, s, _, _ = trained
    errs = ddpm.profile_errors(wins[:50], net, s, [1, 2])
    assert errs[:, 0].max() < 1e-3


def test_spike_amplitude_raises_score(trained):
    wins, net, s, stats, _ = trained
    base = wins[3]
    scores = []
    for amp in (0.0, 1.0, 2.0, 4.0, 8.0):
        x = base.samples.copy()
        x[0, 4] += amp
        scores.append(ddpm.reconstruction_profile(sg.Window(x, base.origin, base.channel_names),
                                                  net, s, stats).score)
    assert all(b >= a for a, b in zip(scores, scores[1:]))


def test_anomalous_windows_score_higher(trained):
    wins, net, s, stats, errs = trained
    bad = []
    rng = np.random.default_rng(9)
    for w in wins[:64]:
        x = w.samples.copy()
        x[rng.integers(2), rng.integers(8)] += 5.0
        bad.append(sg.Window(x, w.origin, w.channel_names))
    e_bad = ddpm.profile_errors(bad, net, s, stats.levels)
    assert ddpm.aggregate(e_bad, stats).mean() > ddpm.aggregate(errs, stats).mean()
    # nominal errors sit below the anomalous median at every level
    assert np.all(np.median(errs, axis=0) < np.median(e_bad, axis=0))


def test_scoring_is_reproducible(trained):
    wins, net, s, stats, errs = trained
    again = ddpm.profile_errors(wins, net, s, stats.levels)
    assert again.tobytes() == errs.tobytes()


def test_aggregation_rules():
    stats = ddpm.ProfileStats((1, 2), np.array([1.0, 10.0]), np.array([1.0, 5.0]))
    e = np.array([[2.0, 20.0]])
    assert ddpm.aggregate(e, stats, "mean-z")[0] == pytest.approx(1.5)
    assert ddpm.aggregate(e, stats, "max-z")[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        ddpm.aggregate(e, stats, "median")


# pseudo-labels -------------------------------------------------------------------

def test_equal_scores_give_no_positives():
    pl = ddpm.pseudo_label(np.full(20, 3.5))
    assert pl.threshold == 3.5 and pl.labels.sum() == 0


def test_one_to_hundred():
    pl = ddpm.pseudo_label(np.arange(1, 101))
    assert pl.threshold == 95 and pl.labels.sum() == 5


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.randoms())
def test_labels_are_permutation_invariant(scores, rnd):
    perm = list(scores)
    rnd.shuffle(perm)
    a, b = ddpm.pseudo_label(scores), ddpm.pseudo_label(perm)
    assert a.threshold == b.threshold
    assert sorted(a.labels) == sorted(b.labels)
    assert np.array_equal(a.labels, (np.asarray(scores) > a.threshold).astype(int))


def test_empty_scores():
    with pytest.raises(ValueError):
        ddpm.pseudo_label([])


# persistence ---------------------------------------------------------------------

def test_model_round_trip(tmp_path, trained):
    wins, net, s, stats, _ = trained
    model = ddpm.DdpmModel(net, s, sg.NormalizationStats(np.zeros(2), np.ones(2)), stats, (2, 8), 0)
    model.save(tmp_path / "m.nsad")
    back = ddpm.DdpmModel.load(tmp_path / "m.nsad")
    back.save(tmp_path / "m2.nsad")
    assert (tmp_path / "m.nsad").read_bytes() == (tmp_path / "m2.nsad").read_bytes()
    assert back.profile.levels == stats.levels and back.window_shape == (2, 8)
    assert np.array_equal(back.net(wins[0].flat()[None], 5).data, net(wins[0].flat()[None], 5).data)
