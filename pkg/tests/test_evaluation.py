import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from aip.data import InteractionDataset
from aip.errors import EvaluationError, StatisticsError
from aip.evaluation import (SIGNIFICANCE, CandidatePool, delta_hit_rate, evaluate_attack, hit_rate, inject_and_rank,
                            mean_hit_rate, paired_t_test, prediction_shift, reports_to_csv, run_experiment)


class LinearStub:
    """Second-stage stand-in: score = w_u . flattened image (+ optional per-user offset)."""

    def __init__(self, weights, offset=None, fn=None):
        self.weights = weights
        self.offset = np.zeros(len(weights)) if offset is None else offset
        self.fn = fn or (lambda s: s)

    def image_scores(self, images):
        images = np.asarray(images)
        flat = images.reshape(1 if images.ndim == 3 else len(images), -1)
        return self.fn(self.weights @ flat.T + self.offset[:, None])

    def item_scores(self, ds):
        return self.image_scores(ds.images)


class TableStub:
    def __init__(self, table):
        self.table = table

    def scores(self, user):
        return self.table[user]


def small_world(seed, n_users=5, n_items=10, cold=(8, 9)):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 4, size=(n_items, 2, 2, 1)) / 255.0  # coarse grid forces ties
    train_pos, test = [], []
    for _ in range(n_users):
        picks = rng.choice([i for i in range(n_items) if i not in cold], size=3, replace=False)
        train_pos.append(frozenset(int(i) for i in picks[:2]))
        test.append(int(picks[2]))
    pairs = tuple((u, i) for u in range(n_users) for i in sorted(train_pos[u] | {test[u]}))
    ds = InteractionDataset(n_users=n_users, n_items=n_items, interactions=pairs, images=images,
                            train_pos=tuple(train_pos), test_items=tuple(test), cold_items=tuple(cold))
    bpr = TableStub(rng.integers(0, 3, size=(n_users, n_items)).astype(float))
    model = LinearStub(rng.integers(-2, 3, size=(n_users, 4)).astype(float))
    return ds, bpr, model


def oracle_lists(ds, bpr, model, cold_item, k, image=None):
    """Plain-python re-ranking with (score desc, id asc) ordering."""
    image = ds.images[cold_item] if image is None else image
    lists = []
    for u in range(ds.n_users):
        rankable = [i for i in range(ds.n_items) if i not in ds.cold_items and i not in ds.train_pos[u]]
        cands = sorted(rankable, key=lambda i: (-bpr.table[u][i], i))[:k]
        pool = set(cands) | {ds.test_items[u]}
        scored = [(float(model.weights[u] @ ds.images[i].ravel()), i) for i in pool]
        scored.append((float(model.weights[u] @ image.ravel()), cold_item))
        lists.append([i for _, i in sorted(scored, key=lambda p: (-p[0], p[1]))])
    return lists


def oracle_hr(lists, item, n):
    return sum(item in lst[:n] for lst in lists) / len(lists)


# -- brute-force oracle ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("k", [0, 2, 5])
def test_ranking_matches_brute_force(seed, k):
    ds, bpr, model = small_world(seed)
    for cold in ds.cold_items:
        expected = oracle_lists(ds, bpr, model, cold, k)
        got = inject_and_rank(model, bpr, ds, cold, k=k)
        assert [rl.items.tolist() for rl in got] == expected
        for n in range(1, 6):
            assert hit_rate(got, cold, n) == oracle_hr(expected, cold, n)
            pool = CandidatePool(model, bpr, ds, k=k, n=n)
            cold_hits, test_hits, _ = pool.evaluate_images([cold], ds.images[[cold]])
            assert cold_hits[0].mean() == oracle_hr(expected, cold, n)
            assert test_hits[0].tolist() == [t in lst[:n] for t, lst in zip(ds.test_items, expected)]


@pytest.mark.parametrize("seed", range(4))
def test_attack_rows_match_brute_force(seed):
    ds, bpr, model = small_world(seed)
    rng = np.random.default_rng(100 + seed)
    cold = list(ds.cold_items)
    adv = rng.integers(0, 4, size=(2, 2, 2, 1)) / 255.0
    report = evaluate_attack(CandidatePool(model, bpr, ds, k=3, n=2), cold, ds.images[cold], adv)
    for pos, item in enumerate(cold):
        before = oracle_lists(ds, bpr, model, item, 3)
        after = oracle_lists(ds, bpr, model, item, 3, image=adv[pos])
        assert report.cooperative_hr[pos] == oracle_hr(before, item, 2)
        assert report.adversarial_hr[pos] == oracle_hr(after, item, 2)
        assert report.test_hr_adversarial[pos] == np.mean([t in a[:2] for t, a in zip(ds.test_items, after)])
        shift = np.mean([model.weights[u] @ (adv[pos] - ds.images[item]).ravel() for u in range(ds.n_users)])
        assert report.delta_p[pos] == pytest.approx(shift, abs=1e-15)
    assert report.lift == pytest.approx(np.mean(np.subtract(report.adversarial_hr, report.cooperative_hr)))


def test_list_lengths():
    ds, bpr, model = small_world(0)
    for rl in inject_and_rank(model, bpr, ds, 8, k=0):
        assert sorted(rl.items.tolist()) == sorted([ds.test_items[rl.user], 8])
    for rl in inject_and_rank(model, bpr, ds, 8, k=4):
        assert len(rl.items) in (5, 6) and len(set(rl.items.tolist())) == len(rl.items)


def test_full_scale_candidate_size_gives_1002():
    n_items = 1003
    ds = InteractionDataset(n_users=1, n_items=n_items, interactions=((0, 0), (0, 1)),
                            images=np.zeros((n_items, 1, 1, 1)), train_pos=(frozenset({0}),), test_items=(1,),
                            cold_items=(1002,))
    table = np.arange(n_items, dtype=float)[None]
    table[0, 1] = -1.0  # keep the test item out of the candidates
    lists = inject_and_rank(LinearStub(np.ones((1, 1))), TableStub(table), ds, 1002, k=1000)
    assert len(lists[0].items) == 1002


def test_cold_item_on_top_and_large_n():
    ds, bpr, _ = small_world(1)
    model = LinearStub(np.ones((5, 4)))
    hot = np.full((2, 2, 1), 1.0)
    lists = inject_and_rank(model, bpr, ds, 9, k=5, image=hot)
    assert all(rl.items[0] == 9 for rl in lists)
    assert hit_rate(lists, 9, 1) == 1.0
    assert hit_rate(inject_and_rank(model, bpr, ds, 8, k=2), 8, 50) == 1.0


def test_missing_item_and_missing_image():
    ds, bpr, model = small_world(2)
    lists = inject_and_rank(model, bpr, ds, 8, k=1)
    with pytest.raises(EvaluationError) as info:
        hit_rate(lists, 9, 5)
    assert info.value.user == 0
    with pytest.raises(EvaluationError):
        inject_and_rank(model, bpr, ds, 99, k=1)


# -- invariants ------------------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 5))
def test_slots_are_conserved(seed, n, k):
    ds, bpr, model = small_world(seed)
    for cold in ds.cold_items:
        for rl in inject_and_rank(model, bpr, ds, cold, k=k):
            injected = set(rl.items.tolist())
            assert len(set(rl.top(n).tolist()) & injected) == min(n, len(rl.items))


@given(st.integers(0, 10_000), st.integers(1, 5), st.floats(0.0, 5.0))
def test_promotion_only_displaces(seed, n, boost):
    ds, bpr, model = small_world(seed)
    pool = CandidatePool(model, bpr, ds, k=4, n=n)
    base = model.image_scores(ds.images[8])[:, 0]
    cold_a, test_a = pool.evaluate(8, base)
    cold_b, test_b = pool.evaluate(8, base + boost)
    assert np.all(cold_b >= cold_a) and np.all(test_b <= test_a)


@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_user_order_does_not_matter(seed, perm):
    ds, bpr, model = small_world(seed)
    lists = inject_and_rank(model, bpr, ds, 9, k=3)
    shuffled = [lists[p] for p in perm]
    assert hit_rate(shuffled, 9, 3) == hit_rate(lists, 9, 3)
    tests = [ds.test_items[p] for p in perm]
    assert hit_rate(shuffled, tests, 3) == hit_rate(lists, list(ds.test_items), 3)


@given(st.integers(0, 10_000), st.sampled_from([np.exp, np.arctan, lambda s: s ** 3]))
def test_monotone_transform_keeps_hit_rates(seed, fn):
    ds, bpr, model = small_world(seed)
    bent = LinearStub(model.weights, fn=fn)
    for n in (1, 3):
        for cold in ds.cold_items:
            a = hit_rate(inject_and_rank(model, bpr, ds, cold, k=3), cold, n)
            b = hit_rate(inject_and_rank(bent, bpr, ds, cold, k=3), cold, n)
            assert a == b


# -- prediction shift and hit-rate helpers -------------------------------------

def test_prediction_shift_examples(rng):
    model = LinearStub(rng.normal(size=(5, 4)))
    x = rng.uniform(size=(3, 2, 2, 1))
    per_item, total = prediction_shift(model, x, x)
    assert np.all(per_item == 0) and total == 0
    y = rng.uniform(size=(3, 2, 2, 1))
    shifted = LinearStub(model.weights, offset=rng.normal(size=5) * 100)
    np.testing.assert_allclose(prediction_shift(shifted, x, y)[0], prediction_shift(model, x, y)[0], atol=1e-10)


def test_hit_rate_helpers():
    assert mean_hit_rate([0.0, 0.5, 1.0]) == 0.5
    assert delta_hit_rate([0.1, 0.2], [0.3, 0.2]) == pytest.approx(0.1)


def test_full_scale_hit_rate_interpretation():
    assert round(0.01 * 34244) == 342
    assert abs(0.01 * 34244 - 340) < 5


# -- significance --------------------------------------------------------------

def test_symmetric_probe_matches_reference():
    before = np.zeros(5)
    after = np.array([1.0, 1.0, 1.0, 1.0, -1.0])
    assert paired_t_test(before, after) == pytest.approx(stats.ttest_rel(after, before).pvalue, abs=1e-6)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=60))
def test_t_test_matches_reference(pairs):
    before, after = np.array(pairs).T
    d = after - before
    if np.std(d, ddof=1) < 1e-6 * max(1.0, np.abs(d).max()):
        return
    assert paired_t_test(before, after) == pytest.approx(stats.ttest_rel(after, before).pvalue, abs=1e-6)


def test_t_test_degenerate_and_extreme(rng):
    x = rng.uniform(size=10)
    with pytest.raises(StatisticsError):
        paired_t_test(x, x)
    with pytest.raises(StatisticsError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(StatisticsError):
        paired_t_test(x, x[:5])
    assert paired_t_test(x, x + 5 + rng.normal(scale=1e-3, size=10)) < 1e-6
    assert SIGNIFICANCE == 0.01


# -- reports -------------------------------------------------------------------

def test_no_attack_rows_are_identical(tiny_ds, tiny_bpr, tiny_vbpr):
    reports = run_experiment(tiny_ds, tiny_bpr, {"vbpr": tiny_vbpr}, {("vbpr", "none"): None}, k=10)
    r = reports[0]
    assert r.adversarial_hr == r.cooperative_hr and r.test_hr_adversarial == r.test_hr_cooperative
    assert r.integrity_p is None and r.lift == 0.0 and r.delta_set == 0.0
    assert len(r.test_hr_cooperative) == len(r.cold_items) == len(tiny_ds.cold_items)


def test_report_serialization(tiny_ds, tiny_bpr, tiny_rankers, tiny_dvbpr):
    cold = list(tiny_ds.cold_items)
    adv = np.clip(tiny_ds.images[cold] + 8 / 255, 0, 1)
    adv = np.round(adv * 255) / 255
    rep = run_experiment(tiny_ds, tiny_bpr, tiny_rankers, {("dvbpr", "shift"): adv, ("vbpr", "none"): None}, k=10)
    assert [(r.ranker, r.attack) for r in rep] == [("vbpr", "none"), ("dvbpr", "shift")]
    for r in rep:
        assert all(0.0 <= v <= 1.0 for v in r.cooperative_hr + r.adversarial_hr + r.test_hr_adversarial)
    text = reports_to_csv(rep)
    lines = text.splitlines()
    assert lines[0] == "item_id,condition,HR@5,delta_p,p_value"
    assert len(lines) == 1 + 4 * len(cold) * 2
    assert reports_to_csv(rep) == text
    assert '"summary"' in rep[1].to_json()
