"""Two-stage injection protocol, HR@N, prediction shift and significance tests."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from aip.errors import EvaluationError, StatisticsError
from aip.recommenders import candidate_lists, rank_order

SIGNIFICANCE = 0.01


@dataclass(frozen=True)
class RankedList:
    user: int
    items: np.ndarray
    scores: np.ndarray

    def top(self, n):
        return self.items[:n]


def inject_and_rank(model, bpr, ds, cold_item, k=100, image=None, item_scores=None):
    """Rank BPR top-K + the user's test item + one cold item with ``model``.

    ``image`` overrides the cold item's stored image (adversarial runs).
    The test item is not duplicated when BPR already proposes it.
    """
    if image is None:
        if not 0 <= cold_item < ds.n_items:
            raise EvaluationError(f"cold item {cold_item} has no image")
        image = ds.images[cold_item]
    cold_scores = model.image_scores(image)[:, 0]
    scores = model.item_scores(ds) if item_scores is None else item_scores
    out = []
    for u, cands in enumerate(candidate_lists(bpr, ds, k)):
        items = np.array(sorted(set(cands.tolist()) | {ds.test_items[u]}) + [cold_item])
        s = np.concatenate([scores[u, items[:-1]], [cold_scores[u]]])
        order = rank_order(s, items)
        out.append(RankedList(u, items[order], s[order]))
    return out


def hit_rate(ranked_lists, item, n):
    """Fraction of users whose top-``n`` contains ``item``.

    ``item`` may be an int or a per-user sequence (ordinary test items).
    """
    hits = []
    for pos, rl in enumerate(ranked_lists):
        target = item if np.isscalar(item) else item[pos]
        if target not in rl.items:
            raise EvaluationError(f"item {target} missing from the list of user {rl.user}", user=rl.user)
        hits.append(target in rl.items[:n])
    return float(np.mean(hits))


def mean_hit_rate(per_item):
    return float(np.mean(per_item))


def delta_hit_rate(before, after):
    return float(np.mean(np.asarray(after) - np.asarray(before)))


def prediction_shift(model, original_images, attacked_images):
    """Per-item mean over users of (attacked score - original score), and their mean."""
    original = model.image_scores(original_images)
    attacked = model.image_scores(attacked_images)
    per_item = np.mean(attacked - original, axis=0)
    return per_item, float(np.mean(per_item))


def paired_t_test(before, after):
    """Two-sided paired t-test p-value."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape or before.ndim != 1 or len(before) < 2:
        raise StatisticsError("need two equal-length samples of at least 2 values")
    d = after - before
    sd = np.std(d, ddof=1)
    if sd == 0:
        raise StatisticsError("differences have zero variance")
    t = np.mean(d) / (sd / np.sqrt(len(d)))
    return float(2.0 * stats.t.sf(abs(t), df=len(d) - 1))


def _safe_p(before, after):
    try:
        return paired_t_test(before, after)
    except StatisticsError:
        return None


class CandidatePool:
    """Precomputed second-stage scores of each user's BPR candidates + test item.

    Lets many cold images be evaluated without re-ranking from scratch:
    a cold item's rank is the number of candidates that beat it under the
    (score desc, id asc) rule.
    """

    def __init__(self, model, bpr, ds, k=100, n=5):
        self.model, self.ds, self.k, self.n = model, ds, k, n
        scores = model.item_scores(ds)
        lists = candidate_lists(bpr, ds, k)
        width = k + 1
        self.ids = np.full((ds.n_users, width), np.iinfo(np.int64).max, dtype=np.int64)
        self.scores = np.full((ds.n_users, width), -np.inf)
        self.test = np.asarray(ds.test_items, dtype=np.int64)
        for u, cands in enumerate(lists):
            items = np.array(sorted(set(cands.tolist()) | {int(self.test[u])}), dtype=np.int64)
            self.ids[u, :len(items)] = items
            self.scores[u, :len(items)] = scores[u, items]
        self.test_scores = scores[np.arange(ds.n_users), self.test]
        beats_test = (self.scores > self.test_scores[:, None]) | (
            (self.scores == self.test_scores[:, None]) & (self.ids < self.test[:, None]))
        self.test_rank = beats_test.sum(axis=1)

    def evaluate(self, cold_item, cold_scores):
        """Per-user hits of the cold item and of the ordinary test item."""
        s = np.asarray(cold_scores, dtype=np.float64)
        beats_cold = (self.scores > s[:, None]) | ((self.scores == s[:, None]) & (self.ids < cold_item))
        cold_rank = beats_cold.sum(axis=1)
        cold_beats_test = (s > self.test_scores) | ((s == self.test_scores) & (cold_item < self.test))
        test_rank = self.test_rank + cold_beats_test
        return cold_rank < self.n, test_rank < self.n

    def evaluate_images(self, cold_items, images):
        scores = self.model.image_scores(images)
        cold, test = zip(*(self.evaluate(int(i), scores[:, col]) for col, i in enumerate(cold_items)))
        return np.array(cold), np.array(test), scores


@dataclass
class MetricsReport:
    ranker: str
    attack: str
    n: int
    k: int
    cold_items: list
    cooperative_hr: list
    adversarial_hr: list
    test_hr_cooperative: list
    test_hr_adversarial: list
    delta_p: list
    integrity_p: float | None
    availability_p: float | None
    extra: dict = field(default_factory=dict)

    @property
    def mean_cooperative(self):
        return mean_hit_rate(self.cooperative_hr)

    @property
    def mean_adversarial(self):
        return mean_hit_rate(self.adversarial_hr)

    @property
    def lift(self):
        return delta_hit_rate(self.cooperative_hr, self.adversarial_hr)

    @property
    def delta_set(self):
        return float(np.mean(self.delta_p))

    def summary(self):
        return {
            "ranker": self.ranker, "attack": self.attack, f"HR@{self.n}_cooperative": self.mean_cooperative,
            f"HR@{self.n}_adversarial": self.mean_adversarial, "delta_HR": self.lift, "delta_set": self.delta_set,
            "integrity_p": self.integrity_p, "integrity_significant": _significant(self.integrity_p),
            f"test_HR@{self.n}_cooperative": mean_hit_rate(self.test_hr_cooperative),
            f"test_HR@{self.n}_adversarial": mean_hit_rate(self.test_hr_adversarial),
            "availability_p": self.availability_p,
        }

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items()}
        out["summary"] = self.summary()
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable)

    def csv_rows(self):
        rows = []
        for pos, item in enumerate(self.cold_items):
            rows.append((item, f"{self.ranker}/{self.attack}/cooperative", self.cooperative_hr[pos], 0.0, ""))
            rows.append((item, f"{self.ranker}/{self.attack}/adversarial", self.adversarial_hr[pos],
                         self.delta_p[pos], _fmt(self.integrity_p)))
            rows.append((item, f"{self.ranker}/{self.attack}/test_cooperative", self.test_hr_cooperative[pos], 0.0, ""))
            rows.append((item, f"{self.ranker}/{self.attack}/test_adversarial", self.test_hr_adversarial[pos], 0.0,
                         _fmt(self.availability_p)))
        return rows


def _significant(p):
    return p is not None and p < SIGNIFICANCE


def _fmt(p):
    return "" if p is None else repr(float(p))


def _jsonable(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(type(value))


def reports_to_csv(reports, n=5):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id", "condition", f"HR@{n}", "delta_p", "p_value"])
    for report in reports:
        for item, cond, hr, dp, p in report.csv_rows():
            writer.writerow([item, cond, repr(float(hr)), repr(float(dp)), p])
    return buf.getvalue()


def evaluate_attack(pool, cold_items, cooperative_images, adversarial_images, ranker="", attack=""):
    """Integrity and availability rows for one (ranker, attack) pair."""
    coop_cold, coop_test, coop_scores = pool.evaluate_images(cold_items, cooperative_images)
    adv_cold, adv_test, adv_scores = pool.evaluate_images(cold_items, adversarial_images)
    coop_hr, adv_hr = coop_cold.mean(axis=1), adv_cold.mean(axis=1)
    test_coop, test_adv = coop_test.mean(axis=1), adv_test.mean(axis=1)
    delta_p = np.mean(adv_scores - coop_scores, axis=0)
    return MetricsReport(
        ranker=ranker, attack=attack, n=pool.n, k=pool.k, cold_items=[int(i) for i in cold_items],
        cooperative_hr=coop_hr.tolist(), adversarial_hr=adv_hr.tolist(),
        test_hr_cooperative=test_coop.tolist(), test_hr_adversarial=test_adv.tolist(),
        delta_p=delta_p.tolist(), integrity_p=_safe_p(coop_hr, adv_hr), availability_p=_safe_p(test_coop, test_adv),
    )


def run_experiment(ds, bpr, rankers, adversarial, k=100, n=5):
    """Evaluate every (ranker, attack) image set against cooperative cold items.

    ``rankers`` maps name -> model; ``adversarial`` maps (ranker, attack) ->
    images aligned with ``ds.cold_items``. A ``None`` image set means no attack
    (adversarial = cooperative).
    """
    cold = list(ds.cold_items)
    coop = ds.images[cold]
    reports = []
    for name, model in rankers.items():
        pool = CandidatePool(model, bpr, ds, k, n)
        for (ranker, attack), images in adversarial.items():
            if ranker != name:
                continue
            reports.append(evaluate_attack(pool, cold, coop, coop if images is None else images, ranker, attack))
    return reports
